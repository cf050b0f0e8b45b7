//! Node and edge vocabularies of the code property graph, plus the
//! per-language tables that map grammar node kinds onto them.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::cpg::Language;

macro_rules! string_enum {
    ($(#[$meta:meta])* $name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self {
                    $($name::$variant => $text),+
                }
            }
        }

        impl FromStr for $name {
            type Err = String;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                match s {
                    $($text => Ok($name::$variant),)+
                    other => Err(format!("unknown {} `{}`", stringify!($name), other)),
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl Serialize for $name {
            fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
                s.serialize_str(self.as_str())
            }
        }

        impl<'de> Deserialize<'de> for $name {
            fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
                let s = String::deserialize(d)?;
                s.parse().map_err(serde::de::Error::custom)
            }
        }
    };
}

string_enum! {
    /// The node type vocabulary. Every graph node carries exactly one of these.
    NodeType {
        Module => "module",
        FunctionDefinition => "function_definition",
        Identifier => "identifier",
        Parameters => "parameters",
        DefaultParameter => "default_parameter",
        None => "none",
        Comment => "comment",
        Block => "block",
        TryStatement => "try_statement",
        IfStatement => "if_statement",
        ComparisonOperator => "comparison_operator",
        ExpressionStatement => "expression_statement",
        Assignment => "assignment",
        Call => "call",
        ArgumentList => "argument_list",
        ForStatement => "for_statement",
        Integer => "integer",
        BinaryOperator => "binary_operator",
        Subscript => "subscript",
        PatternList => "pattern_list",
        ExpressionList => "expression_list",
        WhileStatement => "while_statement",
        ParenthesizedExpression => "parenthesized_expression",
        String => "string",
        StringStart => "string_start",
        StringContent => "string_content",
        StringEnd => "string_end",
        ElifClause => "elif_clause",
        ElseClause => "else_clause",
        AugmentedAssignment => "augmented_assignment",
        BreakStatement => "break_statement",
        ContinueStatement => "continue_statement",
        ReturnStatement => "return_statement",
        ExceptClause => "except_clause",
        FinallyClause => "finally_clause",
    }
}

impl NodeType {
    /// Statement-level types whose node text keeps only the first source line.
    pub fn is_high_level_statement(self) -> bool {
        matches!(
            self,
            NodeType::IfStatement
                | NodeType::ForStatement
                | NodeType::WhileStatement
                | NodeType::TryStatement
                | NodeType::FunctionDefinition
                | NodeType::ElifClause
                | NodeType::ElseClause
                | NodeType::ExceptClause
                | NodeType::FinallyClause
        )
    }
}

string_enum! {
    EdgeClass {
        Ast => "AST",
        Cfg => "CFG",
        Dfg => "DFG",
    }
}

string_enum! {
    /// Fine-grained edge attributes, grouped by class in declaration order.
    EdgeAttr {
        HasName => "has_name",
        HasParameters => "has_parameters",
        HasBody => "has_body",
        HasCondition => "has_condition",
        HasThenBody => "has_then_body",
        HasElseBody => "has_else_body",
        HasElifBranch => "has_elif_branch",
        HasTarget => "has_target",
        HasValue => "has_value",
        Contains => "contains",
        SequentialExecution => "sequential_execution",
        TrueBranch => "true_branch",
        FalseBranch => "false_branch",
        AlternateConditionBranch => "alternate_condition_branch",
        ConditionEvaluation => "condition_evaluation",
        ForLoopBody => "for_loop_body",
        ForLoopIterationRange => "for_loop_iteration_range",
        WhileLoopBody => "while_loop_body",
        WhileLoopCondition => "while_loop_condition",
        TryBlock => "try_block",
        ExceptionHandler => "exception_handler",
        FinallyBlock => "finally_block",
        BlockExit => "block_exit",
        LoopExit => "loop_exit",
        LoopBack => "loop_back",
        BreakJump => "break_jump",
        ConditionFalseJump => "condition_false_jump",
        FunctionCall => "function_call",
        ContributesTo => "contributes_to",
        FlowsTo => "flows_to",
    }
}

/// Number of real edge-type classes; the edge-type classifier adds one
/// extra `NO_EDGE` class after these.
pub const NUM_EDGE_ATTRS: usize = 30;
pub const NO_EDGE_CLASS: usize = NUM_EDGE_ATTRS;

impl EdgeAttr {
    pub fn class(self) -> EdgeClass {
        match self.index() {
            0..=9 => EdgeClass::Ast,
            10..=27 => EdgeClass::Cfg,
            _ => EdgeClass::Dfg,
        }
    }

    /// Stable class index used as the edge-type prediction label.
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<EdgeAttr> {
        EdgeAttr::ALL.get(i).copied()
    }

    pub fn of_class(class: EdgeClass) -> impl Iterator<Item = EdgeAttr> {
        EdgeAttr::ALL.iter().copied().filter(move |a| a.class() == class)
    }
}

#[derive(Debug, Deserialize)]
struct RoleRule {
    parent: String,
    field: String,
    #[serde(default)]
    child: Option<String>,
    attr: EdgeAttr,
}

#[derive(Debug, Deserialize)]
struct TableFile {
    kinds: HashMap<String, NodeType>,
    skip: Vec<String>,
    roles: Vec<RoleRule>,
}

/// Grammar-to-taxonomy mapping for one language, loaded from the JSON
/// tables under `data/`.
#[derive(Debug)]
pub struct KindTable {
    kinds: HashMap<String, NodeType>,
    skip: Vec<String>,
    roles: Vec<RoleRule>,
}

impl KindTable {
    fn parse(json: &str) -> KindTable {
        let file: TableFile = serde_json::from_str(json).expect("bundled kind table is valid JSON");
        KindTable {
            kinds: file.kinds,
            skip: file.skip,
            roles: file.roles,
        }
    }

    pub fn for_language(language: Language) -> &'static KindTable {
        static PYTHON: OnceLock<KindTable> = OnceLock::new();
        static JAVA: OnceLock<KindTable> = OnceLock::new();
        match language {
            Language::Python => {
                PYTHON.get_or_init(|| KindTable::parse(include_str!("../../data/python.json")))
            }
            Language::Java => JAVA.get_or_init(|| KindTable::parse(include_str!("../../data/java.json"))),
        }
    }

    pub fn node_type(&self, kind: &str) -> Option<NodeType> {
        self.kinds.get(kind).copied()
    }

    /// Kinds dropped from the graph entirely (comments, line continuations).
    pub fn is_skipped(&self, kind: &str) -> bool {
        self.skip.iter().any(|k| k == kind)
    }

    /// AST attribute for a child reached through `field` of a `parent` node.
    /// The most specific matching rule wins; unmatched children are `contains`.
    pub fn role(&self, parent: &str, field: Option<&str>, child: &str) -> EdgeAttr {
        let Some(field) = field else {
            return EdgeAttr::Contains;
        };
        let mut best: Option<(u8, EdgeAttr)> = None;
        for rule in &self.roles {
            if rule.field != field {
                continue;
            }
            let parent_score = if rule.parent == parent {
                2
            } else if rule.parent == "*" {
                0
            } else {
                continue;
            };
            let child_score = match &rule.child {
                Some(c) if c == child => 1,
                Some(_) => continue,
                None => 0,
            };
            let score = parent_score + child_score;
            if best.map_or(true, |(s, _)| score > s) {
                best = Some((score, rule.attr));
            }
        }
        best.map_or(EdgeAttr::Contains, |(_, a)| a)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocabulary_sizes() {
        assert_eq!(NodeType::ALL.len(), 35);
        assert_eq!(EdgeAttr::of_class(EdgeClass::Ast).count(), 10);
        assert_eq!(EdgeAttr::of_class(EdgeClass::Cfg).count(), 18);
        assert_eq!(EdgeAttr::of_class(EdgeClass::Dfg).count(), 2);
        assert_eq!(EdgeAttr::ALL.len(), NUM_EDGE_ATTRS);
    }

    #[test]
    fn attr_round_trips_through_strings_and_indices() {
        for (i, a) in EdgeAttr::ALL.iter().enumerate() {
            assert_eq!(a.index(), i);
            assert_eq!(EdgeAttr::from_index(i), Some(*a));
            assert_eq!(a.as_str().parse::<EdgeAttr>().unwrap(), *a);
        }
        assert!(EdgeAttr::from_index(NO_EDGE_CLASS).is_none());
    }

    #[test]
    fn kind_tables_only_target_the_taxonomy() {
        for lang in [Language::Python, Language::Java] {
            let table = KindTable::for_language(lang);
            assert!(!table.kinds.is_empty());
            for rule in &table.roles {
                assert_eq!(rule.attr.class(), EdgeClass::Ast, "{rule:?}");
            }
        }
    }

    #[test]
    fn role_resolution_prefers_specific_rules() {
        let py = KindTable::for_language(Language::Python);
        assert_eq!(py.role("if_statement", Some("alternative"), "elif_clause"), EdgeAttr::HasElifBranch);
        assert_eq!(py.role("if_statement", Some("alternative"), "else_clause"), EdgeAttr::HasElseBody);
        assert_eq!(py.role("assignment", Some("left"), "identifier"), EdgeAttr::HasTarget);
        assert_eq!(py.role("binary_operator", Some("left"), "identifier"), EdgeAttr::Contains);
        assert_eq!(py.role("function_definition", Some("name"), "identifier"), EdgeAttr::HasName);
        assert_eq!(py.role("block", None, "identifier"), EdgeAttr::Contains);
    }
}
