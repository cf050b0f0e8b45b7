use tree_sitter::{Node, Parser, Tree};

use super::{Language, SourceUnit};
use crate::error::{Error, Result};

/// An error-free concrete syntax tree together with the text it was parsed from.
pub struct SyntaxTree {
    tree: Tree,
    language: Language,
    source: String,
}

impl SyntaxTree {
    pub fn root(&self) -> Node<'_> {
        self.tree.root_node()
    }

    pub fn language(&self) -> Language {
        self.language
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    /// Kinds of all named nodes in pre-order (extras such as comments included).
    pub fn named_kinds(&self) -> Vec<&'static str> {
        let mut out = Vec::new();
        let mut stack = vec![self.root()];
        while let Some(node) = stack.pop() {
            if node.is_named() {
                out.push(node.kind());
            }
            let mut cursor = node.walk();
            let children: Vec<_> = node.children(&mut cursor).collect();
            stack.extend(children.into_iter().rev());
        }
        out
    }
}

fn grammar(language: Language) -> tree_sitter::Language {
    match language {
        Language::Python => tree_sitter_python::LANGUAGE.into(),
        Language::Java => tree_sitter_java::LANGUAGE.into(),
    }
}

/// Byte offset of the first error or missing node in pre-order. An error
/// region that runs to the end of the input is an unexpected end of input,
/// reported at the point where the input stops.
fn first_error_offset(root: Node<'_>, source: &str) -> Option<usize> {
    if !root.has_error() {
        return None;
    }
    let content_end = source.trim_end().len();
    let mut stack = vec![root];
    while let Some(node) = stack.pop() {
        if node.is_missing() {
            return Some(node.start_byte());
        }
        if node.is_error() {
            if node.end_byte() >= content_end {
                return Some(node.end_byte().min(content_end));
            }
            return Some(node.start_byte());
        }
        if !node.has_error() {
            continue;
        }
        let mut cursor = node.walk();
        let children: Vec<_> = node.children(&mut cursor).collect();
        stack.extend(children.into_iter().rev());
    }
    Some(root.start_byte())
}

pub fn parse_source(unit: &SourceUnit) -> Result<SyntaxTree> {
    let mut parser = Parser::new();
    parser
        .set_language(&grammar(unit.language))
        .map_err(|_| Error::UnsupportedLanguage(unit.language.to_string()))?;
    let tree = parser
        .parse(&unit.code, None)
        .ok_or(Error::Parse { offset: 0 })?;
    if let Some(offset) = first_error_offset(tree.root_node(), &unit.code) {
        return Err(Error::Parse { offset });
    }
    Ok(SyntaxTree {
        tree,
        language: unit.language,
        source: unit.code.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kinds(code: &str) -> Vec<&'static str> {
        let unit = SourceUnit::python("t", code).unwrap();
        parse_source(&unit).unwrap().named_kinds()
    }

    #[test]
    fn minimal_function() {
        let k = kinds("def f(a):\n    return a");
        for expected in ["function_definition", "parameters", "block", "return_statement"] {
            assert!(k.contains(&expected), "{expected} missing from {k:?}");
        }
        assert_eq!(k.iter().filter(|&&k| k == "identifier").count(), 3);
    }

    #[test]
    fn unbalanced_input_reports_offset() {
        let unit = SourceUnit::python("t", "def f(").unwrap();
        match parse_source(&unit) {
            Err(Error::Parse { offset }) => assert_eq!(offset, 6),
            Err(e) => panic!("unexpected error {e}"),
            Ok(_) => panic!("parse should fail"),
        }
    }

    #[test]
    fn stray_token_is_located() {
        let unit = SourceUnit::python("t", "x = 1\ny = )\nz = 2\n").unwrap();
        match parse_source(&unit) {
            Err(Error::Parse { offset }) => assert_eq!(offset, 10),
            other => panic!("unexpected {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn if_else_function_contains_branch_nodes() {
        let k = kinds("def f(a):\n    if a > 0:\n        x = a\n    else:\n        x = -a\n    return x\n");
        assert!(k.contains(&"if_statement"));
        assert!(k.contains(&"comparison_operator"));
        assert_eq!(k.iter().filter(|&&k| k == "assignment").count(), 2);
    }

    #[test]
    fn java_parses() {
        let unit = SourceUnit::new("j", Language::Java, "class A { int f(int a) { return a + 1; } }").unwrap();
        let k = parse_source(&unit).unwrap().named_kinds();
        assert_eq!(k[0], "program");
        assert!(k.contains(&"method_declaration"));
    }
}
