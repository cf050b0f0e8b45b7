use std::collections::{BTreeSet, HashMap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::flow::Ast;
use super::{build_ast_graph, parse_source, EdgeAttr, Language, NodeId, SourceUnit};
use crate::error::Result;

const PY_BUILTINS: &[&str] = &[
    "abs", "all", "any", "ascii", "bin", "bool", "breakpoint", "bytearray", "bytes", "callable", "chr",
    "classmethod", "compile", "complex", "delattr", "dict", "dir", "divmod", "enumerate", "eval", "exec",
    "filter", "float", "format", "frozenset", "getattr", "globals", "hasattr", "hash", "help", "hex", "id",
    "input", "int", "isinstance", "issubclass", "iter", "len", "list", "locals", "map", "max", "memoryview",
    "min", "next", "object", "oct", "open", "ord", "pow", "print", "property", "range", "repr", "reversed",
    "round", "set", "setattr", "slice", "sorted", "staticmethod", "str", "sum", "super", "tuple", "type",
    "vars", "zip", "self", "cls", "Exception", "ValueError", "TypeError", "KeyError", "IndexError",
    "RuntimeError", "StopIteration", "NotImplementedError", "ZeroDivisionError", "AttributeError",
    "OSError", "IOError", "True", "False", "None",
];

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Role {
    Function,
    Variable,
}

struct Collector<'a, 'g> {
    ast: &'a Ast<'g>,
    names: HashMap<&'g str, Role>,
    protected: HashSet<&'g str>,
}

impl<'a, 'g> Collector<'a, 'g> {
    fn parent_kind(&self, n: NodeId) -> &'g str {
        self.ast.parents[n].map_or("", |p| self.ast.kind(p))
    }

    fn in_class_body(&self, n: NodeId) -> bool {
        let Some(block) = self.ast.parents[n] else {
            return false;
        };
        self.ast.kind(block) == "block" && self.parent_kind(block) == "class_definition"
    }

    fn variable(&mut self, n: NodeId) {
        if self.ast.kind(n) == "identifier" {
            self.names.entry(self.ast.text(n)).or_insert(Role::Variable);
        }
    }

    fn pattern(&mut self, n: NodeId) {
        match self.ast.kind(n) {
            "identifier" => self.variable(n),
            "pattern_list" | "tuple_pattern" | "list_pattern" | "parenthesized_expression" | "list_splat_pattern"
            | "dictionary_splat_pattern" | "as_pattern_target" | "expression_list" | "tuple" | "list" => {
                for c in self.ast.kids(n).collect::<Vec<_>>() {
                    self.pattern(c);
                }
            }
            _ => {}
        }
    }

    fn parameter(&mut self, p: NodeId) {
        match self.ast.kind(p) {
            "identifier" => self.variable(p),
            "list_splat_pattern" | "dictionary_splat_pattern" => self.pattern(p),
            _ => {
                if let Some(name) = self.ast.with_attr(p, EdgeAttr::HasName) {
                    self.variable(name);
                } else if let Some(first) = self.ast.kids(p).next() {
                    self.parameter(first);
                }
            }
        }
    }

    fn python(&mut self) {
        for n in 0..self.ast.graph.nodes.len() {
            match self.ast.kind(n) {
                "import_statement" | "import_from_statement" | "future_import_statement" => {
                    for d in self.ast.subtree(n) {
                        if self.ast.kind(d) == "identifier" {
                            self.protected.insert(self.ast.text(d));
                        }
                    }
                }
                "function_definition" if !self.in_class_body(n) => {
                    if let Some(name) = self.ast.with_attr(n, EdgeAttr::HasName) {
                        self.names.insert(self.ast.text(name), Role::Function);
                    }
                }
                "class_definition" => {
                    if let Some(name) = self.ast.with_attr(n, EdgeAttr::HasName) {
                        self.protected.insert(self.ast.text(name));
                    }
                }
                "parameters" | "lambda_parameters" => {
                    for p in self.ast.kids(n).collect::<Vec<_>>() {
                        self.parameter(p);
                    }
                }
                "assignment" | "augmented_assignment" | "for_statement" | "for_in_clause" => {
                    let class_level = self.ast.parents[n].is_some_and(|p| self.in_class_body(p));
                    if let Some(t) = self.ast.with_attr(n, EdgeAttr::HasTarget) {
                        if class_level {
                            for d in self.ast.subtree(t) {
                                self.protected.insert(self.ast.text(d));
                            }
                        } else {
                            self.pattern(t);
                        }
                    }
                }
                "named_expression" => {
                    if let Some(t) = self.ast.with_attr(n, EdgeAttr::HasName) {
                        self.variable(t);
                    }
                }
                "as_pattern_target" => self.pattern(n),
                _ => {}
            }
        }
    }

    fn java(&mut self) {
        for n in 0..self.ast.graph.nodes.len() {
            match self.ast.kind(n) {
                "formal_parameter" | "catch_formal_parameter" | "spread_parameter" => {
                    if let Some(name) = self.ast.with_attr(n, EdgeAttr::HasName) {
                        self.variable(name);
                    } else if let Some(id) = self.ast.kids_of_kind(n, "identifier").last() {
                        self.variable(id);
                    } else if let Some(d) = self.ast.kid_of_kind(n, "variable_declarator") {
                        if let Some(t) = self.ast.with_attr(d, EdgeAttr::HasTarget) {
                            self.variable(t);
                        }
                    }
                }
                "local_variable_declaration" => {
                    for d in self.ast.kids_of_kind(n, "variable_declarator").collect::<Vec<_>>() {
                        if let Some(t) = self.ast.with_attr(d, EdgeAttr::HasTarget) {
                            self.variable(t);
                        }
                    }
                }
                "enhanced_for_statement" | "resource" => {
                    if let Some(t) = self.ast.with_attr(n, EdgeAttr::HasTarget) {
                        self.variable(t);
                    }
                }
                "inferred_parameters" => {
                    for c in self.ast.kids(n).collect::<Vec<_>>() {
                        self.variable(c);
                    }
                }
                "lambda_expression" => {
                    if let Some(p) = self.ast.with_attr(n, EdgeAttr::HasParameters) {
                        self.variable(p);
                    }
                }
                "field_declaration" | "method_declaration" | "class_declaration" | "interface_declaration"
                | "enum_declaration" | "record_declaration" | "constructor_declaration" => {
                    if let Some(name) = self.ast.with_attr(n, EdgeAttr::HasName) {
                        self.protected.insert(self.ast.text(name));
                    }
                    for d in self.ast.kids_of_kind(n, "variable_declarator").collect::<Vec<_>>() {
                        if let Some(t) = self.ast.with_attr(d, EdgeAttr::HasTarget) {
                            self.protected.insert(self.ast.text(t));
                        }
                    }
                }
                _ => {}
            }
        }
    }
}

/// Whether the identifier occurrence `n` is a reference to a renamable
/// binding rather than an attribute, keyword or member name.
fn renamable_position(ast: &Ast<'_>, n: NodeId, functions: &HashSet<&str>) -> bool {
    let Some(parent) = ast.parents[n] else {
        return true;
    };
    let pk = ast.kind(parent);
    if matches!(pk, "import_statement" | "import_from_statement" | "dotted_name" | "aliased_import") {
        return false;
    }
    if ast.incoming_attr(n) != Some(EdgeAttr::HasName) {
        return true;
    }
    match ast.graph.language {
        Language::Python => match pk {
            "attribute" => false,
            "keyword_argument" => {
                // Keyword names follow the parameter only for calls to local functions.
                let call = ast.parents[parent].and_then(|args| ast.parents[args]);
                call.and_then(|c| ast.with_attr(c, EdgeAttr::HasName))
                    .is_some_and(|f| ast.kind(f) == "identifier" && functions.contains(ast.text(f)))
            }
            "function_definition" => {
                let block = ast.parents[parent];
                !block.is_some_and(|b| ast.kind(b) == "block" && ast.parents[b].is_some_and(|c| ast.kind(c) == "class_definition"))
            }
            "class_definition" => false,
            _ => true,
        },
        Language::Java => matches!(pk, "formal_parameter" | "catch_formal_parameter" | "spread_parameter"),
    }
}

fn fresh_name(rng: &mut ChaCha8Rng, prefix: &str, taken: &mut HashSet<String>) -> String {
    loop {
        let suffix: String = (0..6).map(|_| rng.gen_range(b'a'..=b'z') as char).collect();
        let name = format!("{prefix}{suffix}");
        if taken.insert(name.clone()) {
            return name;
        }
    }
}

/// Consistently rename locally defined functions, parameters and variables
/// to random identifiers. Attribute names, imported names and builtins are
/// left alone. The same seed always gives the same output.
pub fn obfuscate_identifiers(unit: &SourceUnit, seed: u64) -> Result<SourceUnit> {
    let tree = parse_source(unit)?;
    let graph = build_ast_graph(&tree, unit)?;
    let ast = Ast::new(&graph);
    let mut collector = Collector {
        ast: &ast,
        names: HashMap::new(),
        protected: HashSet::new(),
    };
    match unit.language {
        Language::Python => {
            collector.protected.extend(PY_BUILTINS.iter().copied());
            collector.python();
        }
        Language::Java => collector.java(),
    }
    let Collector { names, protected, .. } = collector;
    let ordered: BTreeSet<(Role, &str)> = names
        .into_iter()
        .filter(|(name, _)| !protected.contains(name) && !(name.starts_with("__") && name.ends_with("__")))
        .map(|(name, role)| (role, name))
        .collect();

    let mut taken: HashSet<String> = (0..graph.nodes.len())
        .filter(|&n| ast.kind(n) == "identifier")
        .map(|n| ast.text(n).to_string())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mapping: HashMap<&str, String> = HashMap::new();
    for (role, name) in &ordered {
        let prefix = match role {
            Role::Function => "fn_",
            Role::Variable => "var_",
        };
        mapping.insert(name, fresh_name(&mut rng, prefix, &mut taken));
    }
    let functions: HashSet<&str> = ordered
        .iter()
        .filter(|(r, _)| *r == Role::Function)
        .map(|&(_, n)| n)
        .collect();

    let mut edits: Vec<(usize, usize, &str)> = Vec::new();
    for n in 0..graph.nodes.len() {
        if ast.kind(n) != "identifier" {
            continue;
        }
        if let Some(new) = mapping.get(ast.text(n)) {
            if renamable_position(&ast, n, &functions) {
                let (s, e) = graph.nodes[n].span;
                edits.push((s, e, new));
            }
        }
    }
    edits.sort();
    let mut code = String::with_capacity(unit.code.len() + edits.len() * 8);
    let mut pos = 0;
    for (s, e, new) in edits {
        code.push_str(&unit.code[pos..s]);
        code.push_str(new);
        pos = e;
    }
    code.push_str(&unit.code[pos..]);
    SourceUnit::new(unit.id.clone(), unit.language, code)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn obf(code: &str, seed: u64) -> String {
        obfuscate_identifiers(&SourceUnit::python("t", code).unwrap(), seed).unwrap().code
    }

    #[test]
    fn renames_function_and_parameter() {
        let out = obf("def get_price(cost):\n    return cost", 7);
        assert!(!out.contains("get_price") && !out.contains("cost"), "{out}");
        assert!(out.starts_with("def fn_"));
        let unit = SourceUnit::python("t", out.clone()).unwrap();
        parse_source(&unit).unwrap();
        let param = &out[out.find('(').unwrap() + 1..out.find(')').unwrap()];
        assert!(param.starts_with("var_"));
        assert!(out.ends_with(&format!("return {param}")));
    }

    #[test]
    fn library_calls_are_preserved() {
        let out = obf("import math\ndef f(a):\n    return math.sqrt(a)", 3);
        assert!(out.contains("import math"));
        assert!(out.contains("math.sqrt("));
        assert!(!out.contains("def f("));
        assert!(!out.contains("(a)"));
    }

    #[test]
    fn same_seed_same_output() {
        let code = "def f(xs):\n    total = 0\n    for x in xs:\n        total += x\n    return total\n";
        assert_eq!(obf(code, 11), obf(code, 11));
        assert_ne!(obf(code, 11), obf(code, 12));
    }

    #[test]
    fn attributes_and_methods_are_kept() {
        let code = "class A:\n    def area(self, w):\n        self.w = w\n        return self.w\n";
        let out = obf(code, 1);
        assert!(out.contains("def area(self, "));
        assert!(out.contains("self.w = var_"));
    }

    #[test]
    fn keyword_arguments_follow_local_parameters() {
        let out = obf("def f(size):\n    return size\ny = f(size=2)\nz = print(sep='')\n", 5);
        assert!(!out.contains("size"), "{out}");
        assert!(out.contains("print(sep=''"));
    }
}
