//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use cgbridge::cpg::{line_col, CodePropertyGraph, EdgeClass, NodeType};

pub fn gold_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/gold")
}

/// `(name, source)` for every gold program, sorted by name.
pub fn gold_sources() -> Vec<(String, String)> {
    let mut v: Vec<_> = std::fs::read_dir(gold_dir())
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "py"))
        .collect();
    v.sort();
    v.iter()
        .map(|p| (p.file_stem().unwrap().to_string_lossy().into_owned(), std::fs::read_to_string(p).unwrap()))
        .collect()
}

pub fn gold_edges(name: &str) -> BTreeSet<String> {
    std::fs::read_to_string(gold_dir().join(format!("{name}.gold")))
        .unwrap()
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect()
}

fn selector(g: &CodePropertyGraph, id: usize) -> String {
    let n = g.node(id);
    let (l, c) = line_col(&g.code, n.span.0);
    format!("{}@{l}:{c}", n.kind)
}

/// CFG and DFG edges in the gold file notation, `CFG attr kind@line:col -> kind@line:col`.
pub fn rendered(g: &CodePropertyGraph) -> BTreeSet<String> {
    let mut seen: BTreeMap<String, usize> = BTreeMap::new();
    for n in &g.nodes {
        *seen.entry(selector(g, n.id)).or_default() += 1;
    }
    g.edges
        .iter()
        .filter(|e| e.edge_class != EdgeClass::Ast)
        .map(|e| {
            let (s, d) = (selector(g, e.src), selector(g, e.dst));
            assert_eq!(seen[&s], 1, "ambiguous selector {s}");
            assert_eq!(seen[&d], 1, "ambiguous selector {d}");
            let tag = if e.edge_class == EdgeClass::Cfg { "CFG" } else { "DFG" };
            format!("{tag} {} {s} -> {d}", e.attr)
        })
        .collect()
}

/// Checks the tree invariant without the library's own validator: exactly
/// one AST parent for every node but the root, and every node reaches the
/// root by following parents.
pub fn rooted_tree_violation(g: &CodePropertyGraph) -> Option<String> {
    let n = g.nodes.len();
    let mut parent = vec![None; n];
    let mut ast = 0;
    for e in g.edges.iter().filter(|e| e.edge_class == EdgeClass::Ast) {
        ast += 1;
        if parent[e.dst].is_some() {
            return Some(format!("node {} has two AST parents", e.dst));
        }
        parent[e.dst] = Some(e.src);
    }
    if ast + 1 != n {
        return Some(format!("{ast} AST edges for {n} nodes"));
    }
    if parent[0].is_some() {
        return Some("the root has a parent".into());
    }
    for start in 1..n {
        let (mut cur, mut steps) = (start, 0);
        while let Some(p) = parent[cur] {
            cur = p;
            steps += 1;
            if steps > n {
                return Some(format!("cycle above node {start}"));
            }
        }
        if cur != 0 {
            return Some(format!("node {start} does not reach the root"));
        }
    }
    None
}

pub fn assert_rooted_tree(g: &CodePropertyGraph) {
    if let Some(v) = rooted_tree_violation(g) {
        panic!("{}: {v}", g.source_id);
    }
}

fn preorder(g: &CodePropertyGraph) -> Vec<usize> {
    let children = g.ast_children();
    let (mut out, mut stack) = (Vec::new(), vec![0]);
    while let Some(n) = stack.pop() {
        out.push(n);
        stack.extend(children[n].iter().rev().map(|&(c, _)| c));
    }
    out
}

/// Integer and string literal texts in AST pre-order.
pub fn literal_texts(g: &CodePropertyGraph) -> Vec<String> {
    preorder(g)
        .into_iter()
        .filter(|&i| matches!(g.nodes[i].node_type, NodeType::Integer | NodeType::StringContent))
        .map(|i| g.nodes[i].text.clone())
        .collect()
}
