use std::fmt::Write;

use super::CodePropertyGraph;

fn escape(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for c in text.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            c => out.push(c),
        }
    }
    out
}

/// Plain-text rendering of a graph: every node in id order, then every edge
/// sorted by (src, dst, attr). Newlines inside node text are escaped so each
/// node stays on one line.
pub fn serialize_graph_text(graph: &CodePropertyGraph) -> String {
    let mut out = String::new();
    for node in &graph.nodes {
        writeln!(out, "node {} {}: {}", node.id, node.node_type, escape(&node.text)).unwrap();
    }
    let mut edges: Vec<_> = graph.edges.iter().collect();
    edges.sort_by(|a, b| (a.src, a.dst, a.attr.as_str()).cmp(&(b.src, b.dst, b.attr.as_str())));
    for e in edges {
        writeln!(out, "edge {} -> {} [{}/{}]", e.src, e.dst, e.edge_class, e.attr).unwrap();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cpg::{build_ast_graph, parse_source, SourceUnit};

    fn graph(code: &str) -> CodePropertyGraph {
        let unit = SourceUnit::python("t", code).unwrap();
        build_ast_graph(&parse_source(&unit).unwrap(), &unit).unwrap()
    }

    #[test]
    fn assignment_listing() {
        let text = serialize_graph_text(&graph("x = 1"));
        let expected = "\
node 0 module: x = 1
node 1 expression_statement: x = 1
node 2 assignment: x = 1
node 3 identifier: x
node 4 integer: 1
edge 0 -> 1 [AST/contains]
edge 1 -> 2 [AST/contains]
edge 2 -> 3 [AST/has_target]
edge 2 -> 4 [AST/has_value]
";
        assert_eq!(text, expected);
    }

    #[test]
    fn comment_only_module_is_one_line() {
        let text = serialize_graph_text(&graph("# nothing here\n"));
        assert_eq!(text.lines().count(), 1);
        assert!(text.starts_with("node 0 module: "));
    }

    #[test]
    fn multiline_text_is_escaped() {
        let text = serialize_graph_text(&graph("x = [1,\n 2]\n"));
        assert!(text.lines().all(|l| l.starts_with("node ") || l.starts_with("edge ")));
        assert!(text.contains("\\n"));
    }
}
