use super::{CodePropertyGraph, EdgeAttr, NodeId, NodeType};

/// A text-free view of a graph: node types in AST pre-order and edges
/// renumbered into that order. Two graphs with equal canonical forms are
/// isomorphic under a bijection preserving node type, edge class and attr.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CanonicalGraph {
    pub node_types: Vec<NodeType>,
    pub edges: Vec<(NodeId, NodeId, EdgeAttr)>,
}

pub fn canonical_form(graph: &CodePropertyGraph) -> CanonicalGraph {
    let children = graph.ast_children();
    let mut order = Vec::with_capacity(graph.nodes.len());
    let mut stack = vec![0];
    while let Some(n) = stack.pop() {
        order.push(n);
        stack.extend(children[n].iter().rev().map(|&(c, _)| c));
    }
    // Nodes unreachable from the root keep their relative id order at the end.
    let mut rank = vec![usize::MAX; graph.nodes.len()];
    for (i, &n) in order.iter().enumerate() {
        rank[n] = i;
    }
    for n in 0..graph.nodes.len() {
        if rank[n] == usize::MAX {
            rank[n] = order.len();
            order.push(n);
        }
    }
    let node_types = order.iter().map(|&n| graph.nodes[n].node_type).collect();
    let mut edges: Vec<_> = graph.edges.iter().map(|e| (rank[e.src], rank[e.dst], e.attr)).collect();
    edges.sort();
    edges.dedup();
    CanonicalGraph { node_types, edges }
}
