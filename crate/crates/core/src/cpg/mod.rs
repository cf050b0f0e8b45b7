//! Code property graph extraction: syntax tree, control flow and data flow
//! merged into one typed, attributed graph.

mod ast;
mod canon;
mod cfg;
mod dfg;
mod flow;
mod obfuscate;
mod parse;
pub mod taxonomy;
mod text;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use ast::build_ast_graph;
pub use canon::{canonical_form, CanonicalGraph};
pub use cfg::attach_cfg_edges;
pub use dfg::attach_dfg_edges;
pub use obfuscate::obfuscate_identifiers;
pub use parse::{parse_source, SyntaxTree};
pub use taxonomy::{EdgeAttr, EdgeClass, NodeType};
pub use text::serialize_graph_text;

use crate::error::{Error, Result};

pub type NodeId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Language {
    Python,
    Java,
}

impl Language {
    pub fn as_str(self) -> &'static str {
        match self {
            Language::Python => "python",
            Language::Java => "java",
        }
    }

    /// File extension used when scanning directories.
    pub fn extension(self) -> &'static str {
        match self {
            Language::Python => "py",
            Language::Java => "java",
        }
    }
}

impl FromStr for Language {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "python" | "py" => Ok(Language::Python),
            "java" => Ok(Language::Java),
            other => Err(Error::UnsupportedLanguage(other.to_string())),
        }
    }
}

impl fmt::Display for Language {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SourceUnit {
    pub id: String,
    pub language: Language,
    pub code: String,
}

impl SourceUnit {
    pub fn new(id: impl Into<String>, language: Language, code: impl Into<String>) -> Result<Self> {
        let code = code.into();
        if code.trim().is_empty() {
            return Err(Error::InvalidUnit("source code is empty".into()));
        }
        Ok(SourceUnit {
            id: id.into(),
            language,
            code,
        })
    }

    pub fn python(id: impl Into<String>, code: impl Into<String>) -> Result<Self> {
        SourceUnit::new(id, Language::Python, code)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CpgNode {
    pub id: NodeId,
    #[serde(rename = "type")]
    pub node_type: NodeType,
    /// Grammar node kind the node was built from. Differs from `node_type`
    /// only where the kind table folds several grammar kinds together.
    pub kind: String,
    pub text: String,
    pub span: (usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CpgEdge {
    pub src: NodeId,
    pub dst: NodeId,
    #[serde(rename = "class")]
    pub edge_class: EdgeClass,
    pub attr: EdgeAttr,
}

impl CpgEdge {
    pub fn new(src: NodeId, dst: NodeId, attr: EdgeAttr) -> Self {
        CpgEdge {
            src,
            dst,
            edge_class: attr.class(),
            attr,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodePropertyGraph {
    #[serde(rename = "id")]
    pub source_id: String,
    pub language: Language,
    pub code: String,
    pub nodes: Vec<CpgNode>,
    pub edges: Vec<CpgEdge>,
}

impl CodePropertyGraph {
    pub fn node(&self, id: NodeId) -> &CpgNode {
        &self.nodes[id]
    }

    pub fn edges_of(&self, class: EdgeClass) -> impl Iterator<Item = &CpgEdge> {
        self.edges.iter().filter(move |e| e.edge_class == class)
    }

    pub fn count_edges(&self, class: EdgeClass) -> usize {
        self.edges_of(class).count()
    }

    /// AST children of every node, in source order, with their role attribute.
    pub fn ast_children(&self) -> Vec<Vec<(NodeId, EdgeAttr)>> {
        let mut children = vec![Vec::new(); self.nodes.len()];
        for e in self.edges_of(EdgeClass::Ast) {
            children[e.src].push((e.dst, e.attr));
        }
        for list in &mut children {
            list.sort_by_key(|&(c, _)| (self.nodes[c].span.0, c));
        }
        children
    }

    pub fn ast_parents(&self) -> Vec<Option<NodeId>> {
        let mut parents = vec![None; self.nodes.len()];
        for e in self.edges_of(EdgeClass::Ast) {
            parents[e.dst] = Some(e.src);
        }
        parents
    }

    /// Sort edges by (src, dst, class, attr) and drop duplicates.
    pub(crate) fn normalize_edges(&mut self) {
        self.edges.sort();
        self.edges.dedup();
    }

    /// Check every structural invariant: node ids, spans, attribute
    /// closure, and that AST edges form a tree rooted at the module node.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidGraph(msg));
        let n = self.nodes.len();
        if n == 0 {
            return bad("graph has no nodes".into());
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if node.id != i {
                return bad(format!("node at position {i} has id {}", node.id));
            }
            let (s, e) = node.span;
            if s > e || e > self.code.len() {
                return bad(format!("node {i} span {s}..{e} outside source of {} bytes", self.code.len()));
            }
        }
        for edge in &self.edges {
            if edge.src >= n || edge.dst >= n {
                return bad(format!("edge {}->{} references a missing node", edge.src, edge.dst));
            }
            if edge.attr.class() != edge.edge_class {
                return bad(format!("attr {} does not belong to class {}", edge.attr, edge.edge_class));
            }
        }
        if self.nodes[0].node_type != NodeType::Module {
            return bad("node 0 is not the module root".into());
        }
        let mut parent: Vec<Option<NodeId>> = vec![None; n];
        let mut ast_edges = 0;
        for edge in self.edges_of(EdgeClass::Ast) {
            ast_edges += 1;
            if edge.src == edge.dst {
                return bad(format!("AST self-loop on node {}", edge.src));
            }
            if parent[edge.dst].replace(edge.src).is_some() {
                return bad(format!("node {} has more than one AST parent", edge.dst));
            }
            let (ps, pe) = self.nodes[edge.src].span;
            let (cs, ce) = self.nodes[edge.dst].span;
            if cs < ps || ce > pe {
                return bad(format!("span of node {} escapes its parent {}", edge.dst, edge.src));
            }
        }
        if ast_edges != n - 1 {
            return bad(format!("{ast_edges} AST edges for {n} nodes"));
        }
        if parent[0].is_some() {
            return bad("module root has an AST parent".into());
        }
        // Every node must reach the root without revisiting a node.
        for start in 1..n {
            let mut cur = start;
            let mut steps = 0;
            while let Some(p) = parent[cur] {
                cur = p;
                steps += 1;
                if steps > n {
                    return bad(format!("AST cycle through node {start}"));
                }
            }
            if cur != 0 {
                return bad(format!("node {start} is not connected to the root"));
            }
        }
        Ok(())
    }
}

/// Parse a unit and build its full graph: AST, then CFG, then DFG edges.
pub fn extract(unit: &SourceUnit) -> Result<CodePropertyGraph> {
    let tree = parse_source(unit)?;
    let graph = build_ast_graph(&tree, unit)?;
    let graph = attach_cfg_edges(&graph)?;
    attach_dfg_edges(&graph)
}

/// 1-based (line, column) of a byte offset, for diagnostics and gold files.
pub fn line_col(code: &str, offset: usize) -> (usize, usize) {
    let before = &code[..offset.min(code.len())];
    let line = before.matches('\n').count() + 1;
    let col = before.rfind('\n').map_or(before.len(), |nl| before.len() - nl - 1) + 1;
    (line, col)
}
