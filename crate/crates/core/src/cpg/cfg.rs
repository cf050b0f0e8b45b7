use std::collections::HashMap;

use super::flow::{self, Ast, Branch, Jump, LoopKind, Stmt};
use super::{CodePropertyGraph, CpgEdge, EdgeAttr, Language, NodeId};
use crate::error::Result;

const ROOT: NodeId = 0;

#[derive(Clone, Copy)]
struct LoopCtx {
    head: NodeId,
    exit: NodeId,
}

struct Emitter {
    edges: Vec<CpgEdge>,
}

impl Emitter {
    /// Falling off the end of the module is not an edge: the root never
    /// receives control flow.
    fn add(&mut self, src: NodeId, dst: NodeId, attr: EdgeAttr) {
        if dst != ROOT {
            self.edges.push(CpgEdge::new(src, dst, attr));
        }
    }

    /// Emit edges for a block whose normal completion continues at `cont`.
    fn block(&mut self, stmts: &[Stmt], cont: NodeId, lp: Option<LoopCtx>) {
        for pair in stmts.windows(2) {
            self.add(pair[0].node(), pair[1].node(), EdgeAttr::SequentialExecution);
        }
        for (i, s) in stmts.iter().enumerate() {
            let next = stmts.get(i + 1).map_or(cont, Stmt::node);
            self.stmt(s, next, lp);
        }
    }

    /// Last statement of a block if control can fall off its end.
    fn falls_through(stmts: &[Stmt]) -> Option<NodeId> {
        stmts.last().filter(|s| !s.is_jump()).map(Stmt::node)
    }

    fn first(stmts: &[Stmt], otherwise: NodeId) -> NodeId {
        stmts.first().map_or(otherwise, Stmt::node)
    }

    fn stmt(&mut self, s: &Stmt, next: NodeId, lp: Option<LoopCtx>) {
        match s {
            Stmt::Simple { node, jump } => match (jump, lp) {
                (Some(Jump::Break), Some(l)) => self.add(*node, l.exit, EdgeAttr::BreakJump),
                (Some(Jump::Continue), Some(l)) => self.add(*node, l.head, EdgeAttr::LoopBack),
                _ => {}
            },
            Stmt::If { branches, else_body } => self.branches(branches, else_body.as_deref(), next, lp),
            Stmt::Loop {
                node,
                kind,
                body,
                else_body,
            } => {
                let head = *node;
                match kind {
                    LoopKind::While { cond } | LoopKind::DoWhile { cond } => {
                        if let Some(c) = cond {
                            self.add(head, *c, EdgeAttr::WhileLoopCondition);
                        }
                        if let Some(f) = body.first() {
                            self.add(head, f.node(), EdgeAttr::WhileLoopBody);
                        }
                    }
                    LoopKind::ForEach { iter, .. } => {
                        if let Some(i) = iter {
                            self.add(head, *i, EdgeAttr::ForLoopIterationRange);
                        }
                        if let Some(f) = body.first() {
                            self.add(head, f.node(), EdgeAttr::ForLoopBody);
                        }
                    }
                    LoopKind::Counting { init, cond, .. } => {
                        if let Some(r) = cond.or_else(|| init.first().copied()) {
                            self.add(head, r, EdgeAttr::ForLoopIterationRange);
                        }
                        if let Some(f) = body.first() {
                            self.add(head, f.node(), EdgeAttr::ForLoopBody);
                        }
                    }
                }
                if let Some(last) = Self::falls_through(body) {
                    self.add(last, head, EdgeAttr::LoopBack);
                }
                let exit_target = match else_body {
                    Some(e) => Self::first(e, next),
                    None => next,
                };
                self.add(head, exit_target, EdgeAttr::LoopExit);
                self.block(body, head, Some(LoopCtx { head, exit: next }));
                if let Some(e) = else_body {
                    self.block(e, next, lp);
                }
            }
            Stmt::Try {
                node,
                body,
                handlers,
                else_body,
                finally,
                ..
            } => {
                let t = *node;
                if let Some(f) = body.first() {
                    self.add(t, f.node(), EdgeAttr::TryBlock);
                }
                for h in handlers {
                    self.add(t, h.node, EdgeAttr::ExceptionHandler);
                    if let Some(f) = h.body.first() {
                        self.add(h.node, f.node(), EdgeAttr::ExceptionHandler);
                    }
                }
                if let Some(fin) = finally {
                    self.add(t, fin.node, EdgeAttr::FinallyBlock);
                    if let Some(f) = fin.body.first() {
                        self.add(fin.node, f.node(), EdgeAttr::FinallyBlock);
                    }
                }
                let after_handlers = finally.as_ref().map_or(next, |f| f.node);
                let after_body = match else_body {
                    Some(e) if !e.is_empty() => e[0].node(),
                    _ => after_handlers,
                };
                if let Some(last) = Self::falls_through(body) {
                    self.add(last, after_body, EdgeAttr::BlockExit);
                }
                self.block(body, after_body, lp);
                for h in handlers {
                    if let Some(last) = Self::falls_through(&h.body) {
                        self.add(last, after_handlers, EdgeAttr::BlockExit);
                    }
                    self.block(&h.body, after_handlers, lp);
                }
                if let Some(e) = else_body {
                    if let Some(last) = Self::falls_through(e) {
                        self.add(last, after_handlers, EdgeAttr::BlockExit);
                    }
                    self.block(e, after_handlers, lp);
                }
                if let Some(fin) = finally {
                    if let Some(last) = Self::falls_through(&fin.body) {
                        self.add(last, next, EdgeAttr::BlockExit);
                    }
                    self.block(&fin.body, next, lp);
                }
            }
            Stmt::With { node, body, .. } => {
                if let Some(f) = body.first() {
                    self.add(*node, f.node(), EdgeAttr::TryBlock);
                }
                if let Some(last) = Self::falls_through(body) {
                    self.add(last, next, EdgeAttr::BlockExit);
                }
                self.block(body, next, lp);
            }
            Stmt::Def { scope, .. } => self.block(&scope.body, scope.node, None),
        }
    }

    fn branches(&mut self, branches: &[Branch], else_body: Option<&[Stmt]>, next: NodeId, lp: Option<LoopCtx>) {
        let head = branches[0].node;
        for (k, b) in branches.iter().enumerate() {
            if k > 0 {
                self.add(branches[k - 1].node, b.node, EdgeAttr::AlternateConditionBranch);
            }
            if let Some(c) = b.cond {
                self.add(b.node, c, EdgeAttr::ConditionEvaluation);
            }
            self.add(b.node, Self::first(&b.body, next), EdgeAttr::TrueBranch);
        }
        let last = branches.last().map_or(head, |b| b.node);
        match else_body {
            Some(e) => self.add(last, Self::first(e, next), EdgeAttr::FalseBranch),
            None => self.add(last, next, EdgeAttr::ConditionFalseJump),
        }
        for b in branches {
            self.block(&b.body, next, lp);
        }
        if let Some(e) = else_body {
            self.block(e, next, lp);
        }
    }
}

/// Name of a directly called function, if the call has a bare callee.
fn callee_name<'g>(ast: &Ast<'g>, call: NodeId) -> Option<&'g str> {
    match (ast.graph.language, ast.kind(call)) {
        (Language::Python, "call") => {
            let f = ast.with_attr(call, EdgeAttr::HasName)?;
            (ast.kind(f) == "identifier").then(|| ast.text(f))
        }
        (Language::Java, "method_invocation") => {
            let mut kids = ast.children[call].iter();
            // Calls through an object or class are not resolved.
            let first = kids.next()?;
            (first.1 == EdgeAttr::HasName && ast.kind(first.0) == "identifier").then(|| ast.text(first.0))
        }
        _ => None,
    }
}

fn function_name<'g>(ast: &Ast<'g>, def: NodeId) -> Option<&'g str> {
    let is_function = match ast.kind(def) {
        // Methods are only reachable through attributes, never by bare name.
        "function_definition" => !ast.parents[def]
            .and_then(|b| ast.parents[b])
            .is_some_and(|c| ast.kind(c) == "class_definition"),
        "method_declaration" => true,
        _ => false,
    };
    let name = ast.with_attr(def, EdgeAttr::HasName)?;
    is_function.then(|| ast.text(name))
}

fn call_edges(ast: &Ast<'_>, out: &mut Vec<CpgEdge>) {
    let mut defs: HashMap<&str, Vec<NodeId>> = HashMap::new();
    for n in 0..ast.graph.nodes.len() {
        if let Some(name) = function_name(ast, n) {
            defs.entry(name).or_default().push(n);
        }
    }
    for n in 0..ast.graph.nodes.len() {
        if let Some(targets) = callee_name(ast, n).and_then(|name| defs.get(name)) {
            for &d in targets {
                out.push(CpgEdge::new(n, d, EdgeAttr::FunctionCall));
            }
        }
    }
}

/// Add statement-level control-flow edges, plus call edges to functions
/// defined in the same unit.
pub fn attach_cfg_edges(graph: &CodePropertyGraph) -> Result<CodePropertyGraph> {
    graph.validate()?;
    let ast = Ast::new(graph);
    let root = flow::lower(&ast);
    let mut emitter = Emitter { edges: Vec::new() };
    emitter.block(&root.body, root.node, None);
    call_edges(&ast, &mut emitter.edges);
    let mut out = graph.clone();
    out.edges.extend(emitter.edges);
    out.normalize_edges();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cpg::{build_ast_graph, parse_source, EdgeClass, NodeType, SourceUnit};

    fn cfg(code: &str) -> CodePropertyGraph {
        let unit = SourceUnit::python("t", code).unwrap();
        let g = build_ast_graph(&parse_source(&unit).unwrap(), &unit).unwrap();
        attach_cfg_edges(&g).unwrap()
    }

    fn find(g: &CodePropertyGraph, ty: NodeType, text: &str) -> NodeId {
        g.nodes
            .iter()
            .find(|n| n.node_type == ty && n.text == text)
            .unwrap_or_else(|| panic!("no {ty} `{text}`"))
            .id
    }

    fn has(g: &CodePropertyGraph, src: NodeId, dst: NodeId, attr: EdgeAttr) -> bool {
        g.edges.iter().any(|e| e.src == src && e.dst == dst && e.attr == attr)
    }

    #[test]
    fn straight_line_has_one_sequential_edge() {
        let g = cfg("a = 1\nb = 2");
        let cfg: Vec<_> = g.edges_of(EdgeClass::Cfg).collect();
        assert_eq!(cfg.len(), 1);
        assert_eq!(cfg[0].attr, EdgeAttr::SequentialExecution);
        assert_eq!(g.node(cfg[0].src).text, "a = 1");
        assert_eq!(g.node(cfg[0].dst).text, "b = 2");
    }

    #[test]
    fn if_else_branches() {
        let g = cfg("if a > 0:\n    x = a\nelse:\n    x = -a");
        let iff = find(&g, NodeType::IfStatement, "if a > 0:");
        let then = find(&g, NodeType::ExpressionStatement, "x = a");
        let els = find(&g, NodeType::ExpressionStatement, "x = -a");
        let cond = find(&g, NodeType::ComparisonOperator, "a > 0");
        assert!(has(&g, iff, then, EdgeAttr::TrueBranch));
        assert!(has(&g, iff, els, EdgeAttr::FalseBranch));
        assert!(has(&g, iff, cond, EdgeAttr::ConditionEvaluation));
    }

    #[test]
    fn break_and_loop_back() {
        let g = cfg("while c:\n    if d: break\n    x = 1\ny = 2");
        let w = find(&g, NodeType::WhileStatement, "while c:");
        let brk = find(&g, NodeType::BreakStatement, "break");
        let x = find(&g, NodeType::ExpressionStatement, "x = 1");
        let y = find(&g, NodeType::ExpressionStatement, "y = 2");
        assert!(has(&g, brk, y, EdgeAttr::BreakJump));
        assert!(has(&g, x, w, EdgeAttr::LoopBack));
        assert!(has(&g, w, y, EdgeAttr::LoopExit));
    }

    #[test]
    fn calls_resolve_by_name() {
        let g = cfg("def f():\n    pass\ndef g():\n    f()\n    h()\n");
        let f = find(&g, NodeType::FunctionDefinition, "def f():");
        let call = find(&g, NodeType::Call, "f()");
        assert!(has(&g, call, f, EdgeAttr::FunctionCall));
        assert_eq!(g.edges.iter().filter(|e| e.attr == EdgeAttr::FunctionCall).count(), 1);
    }

    #[test]
    fn module_root_receives_no_control_flow() {
        let g = cfg("while c:\n    if d:\n        break\n    x = 1\n");
        assert!(g.edges_of(EdgeClass::Cfg).all(|e| e.dst != 0 && e.src != 0));
        let brk = find(&g, NodeType::BreakStatement, "break");
        assert!(!g.edges_of(EdgeClass::Cfg).any(|e| e.src == brk));
    }
}
