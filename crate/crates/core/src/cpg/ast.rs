use std::collections::BTreeSet;

use tree_sitter::Node;

use super::taxonomy::KindTable;
use super::{CodePropertyGraph, CpgEdge, CpgNode, NodeId, SourceUnit, SyntaxTree};
use crate::error::{Error, Result};

struct Builder<'a> {
    table: &'static KindTable,
    source: &'a str,
    nodes: Vec<CpgNode>,
    edges: Vec<CpgEdge>,
    unmapped: BTreeSet<String>,
}

impl<'a> Builder<'a> {
    fn keep(&self, node: &Node<'_>) -> bool {
        node.is_named() && !node.is_extra() && !self.table.is_skipped(node.kind())
    }

    fn visit(&mut self, node: Node<'_>) -> NodeId {
        let kind = node.kind();
        let id = self.nodes.len();
        let span = (node.start_byte(), node.end_byte());
        let node_type = match self.table.node_type(kind) {
            Some(t) => t,
            None => {
                self.unmapped.insert(kind.to_string());
                super::NodeType::None
            }
        };
        let full = &self.source[span.0..span.1];
        let text = if node_type.is_high_level_statement() {
            full.lines().next().unwrap_or("").trim_end_matches('\r').to_string()
        } else {
            full.to_string()
        };
        self.nodes.push(CpgNode {
            id,
            node_type,
            kind: kind.to_string(),
            text,
            span,
        });

        let mut cursor = node.walk();
        if cursor.goto_first_child() {
            loop {
                let child = cursor.node();
                let field = cursor.field_name();
                if self.keep(&child) {
                    let attr = self.table.role(kind, field, child.kind());
                    let child_id = self.visit(child);
                    self.edges.push(CpgEdge::new(id, child_id, attr));
                }
                if !cursor.goto_next_sibling() {
                    break;
                }
            }
        }
        id
    }
}

/// One node per named syntax node (ids in depth-first pre-order) and one
/// AST edge from every parent to each named child.
pub fn build_ast_graph(tree: &SyntaxTree, unit: &SourceUnit) -> Result<CodePropertyGraph> {
    if tree.language() != unit.language || tree.source() != unit.code {
        return Err(Error::InvalidUnit(format!(
            "syntax tree does not belong to unit `{}`",
            unit.id
        )));
    }
    let mut builder = Builder {
        table: KindTable::for_language(unit.language),
        source: &unit.code,
        nodes: Vec::new(),
        edges: Vec::new(),
        unmapped: BTreeSet::new(),
    };
    builder.visit(tree.root());
    if !builder.unmapped.is_empty() {
        return Err(Error::Taxonomy {
            kinds: builder.unmapped.into_iter().collect(),
        });
    }
    let mut graph = CodePropertyGraph {
        source_id: unit.id.clone(),
        language: unit.language,
        code: unit.code.clone(),
        nodes: builder.nodes,
        edges: builder.edges,
    };
    graph.normalize_edges();
    Ok(graph)
}
