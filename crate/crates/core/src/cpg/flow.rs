//! Statement-level structure recovered from the AST part of a graph. Both
//! the control-flow and the data-flow pass work on this lowered form, so
//! they agree on what a statement, a branch and a loop are.

use super::{CodePropertyGraph, EdgeAttr, Language, NodeId};

#[derive(Debug, Clone)]
pub(crate) enum Jump {
    Break,
    Continue,
    Return,
    Raise,
}

#[derive(Debug, Clone)]
pub(crate) struct Branch {
    /// Holder of the condition: the `if` statement itself or an elif clause.
    pub node: NodeId,
    pub cond: Option<NodeId>,
    pub body: Vec<Stmt>,
}

#[derive(Debug, Clone)]
pub(crate) struct Handler {
    pub node: NodeId,
    pub body: Vec<Stmt>,
}

#[derive(Debug, Clone)]
pub(crate) enum LoopKind {
    /// Condition checked before the body.
    While { cond: Option<NodeId> },
    /// Condition checked after the body (Java `do`).
    DoWhile { cond: Option<NodeId> },
    /// Iteration over a collection; `target` receives each element.
    ForEach { target: Option<NodeId>, iter: Option<NodeId> },
    /// Java counting loop.
    Counting { init: Vec<NodeId>, cond: Option<NodeId>, update: Vec<NodeId> },
}

#[derive(Debug, Clone)]
pub(crate) enum Stmt {
    Simple { node: NodeId, jump: Option<Jump> },
    If { branches: Vec<Branch>, else_body: Option<Vec<Stmt>> },
    Loop { node: NodeId, kind: LoopKind, body: Vec<Stmt>, else_body: Option<Vec<Stmt>> },
    Try {
        node: NodeId,
        /// Extra evaluated parts such as Java resources.
        resources: Vec<NodeId>,
        body: Vec<Stmt>,
        handlers: Vec<Handler>,
        else_body: Option<Vec<Stmt>>,
        finally: Option<Handler>,
    },
    With { node: NodeId, items: Vec<NodeId>, body: Vec<Stmt> },
    /// A nested function, method or class. Its body is a separate scope.
    Def { node: NodeId, scope: Scope },
}

impl Stmt {
    pub fn node(&self) -> NodeId {
        match self {
            Stmt::Simple { node, .. }
            | Stmt::Loop { node, .. }
            | Stmt::Try { node, .. }
            | Stmt::With { node, .. }
            | Stmt::Def { node, .. } => *node,
            Stmt::If { branches, .. } => branches[0].node,
        }
    }

    /// Statements that never complete normally.
    pub fn is_jump(&self) -> bool {
        matches!(self, Stmt::Simple { jump: Some(_), .. })
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Scope {
    /// The scope owner: module, function or class node. Control that leaves
    /// the outermost block of a scope is directed here.
    pub node: NodeId,
    /// Parameter nodes (declarations whose names are bound on entry).
    pub params: Vec<NodeId>,
    /// Expressions evaluated in the enclosing scope when the definition runs
    /// (decorators, parameter defaults).
    pub outer_exprs: Vec<NodeId>,
    pub body: Vec<Stmt>,
}

/// Read-only helper over the AST edges of a graph.
pub(crate) struct Ast<'g> {
    pub graph: &'g CodePropertyGraph,
    pub children: Vec<Vec<(NodeId, EdgeAttr)>>,
    pub parents: Vec<Option<NodeId>>,
}

impl<'g> Ast<'g> {
    pub fn new(graph: &'g CodePropertyGraph) -> Self {
        let children = graph.ast_children();
        let mut parents = vec![None; graph.nodes.len()];
        for (p, list) in children.iter().enumerate() {
            for &(c, _) in list {
                parents[c] = Some(p);
            }
        }
        Ast {
            graph,
            children,
            parents,
        }
    }

    pub fn kind(&self, n: NodeId) -> &'g str {
        &self.graph.nodes[n].kind
    }

    pub fn text(&self, n: NodeId) -> &'g str {
        let (s, e) = self.graph.nodes[n].span;
        &self.graph.code[s..e]
    }

    pub fn kids(&self, n: NodeId) -> impl Iterator<Item = NodeId> + '_ {
        self.children[n].iter().map(|&(c, _)| c)
    }

    pub fn with_attr(&self, n: NodeId, attr: EdgeAttr) -> Option<NodeId> {
        self.children[n].iter().find(|&&(_, a)| a == attr).map(|&(c, _)| c)
    }

    pub fn all_with_attr(&self, n: NodeId, attr: EdgeAttr) -> Vec<NodeId> {
        self.children[n].iter().filter(|&&(_, a)| a == attr).map(|&(c, _)| c).collect()
    }

    pub fn kid_of_kind(&self, n: NodeId, kind: &str) -> Option<NodeId> {
        self.kids(n).find(|&c| self.kind(c) == kind)
    }

    pub fn kids_of_kind<'a>(&'a self, n: NodeId, kind: &'a str) -> impl Iterator<Item = NodeId> + 'a {
        self.kids(n).filter(move |&c| self.kind(c) == kind)
    }

    /// Attribute on the AST edge into `n`.
    pub fn incoming_attr(&self, n: NodeId) -> Option<EdgeAttr> {
        let p = self.parents[n]?;
        self.children[p].iter().find(|&&(c, _)| c == n).map(|&(_, a)| a)
    }

    /// Pre-order listing of the subtree rooted at `n`.
    pub fn subtree(&self, n: NodeId) -> Vec<NodeId> {
        let mut out = Vec::new();
        let mut stack = vec![n];
        while let Some(x) = stack.pop() {
            out.push(x);
            let kids: Vec<_> = self.kids(x).collect();
            stack.extend(kids.into_iter().rev());
        }
        out
    }
}

/// Lower the whole graph into its module scope.
pub(crate) fn lower(ast: &Ast<'_>) -> Scope {
    let body = match ast.graph.language {
        Language::Python => py::block(ast, 0),
        Language::Java => java::stmts(ast, ast.kids(0)),
    };
    Scope {
        node: 0,
        params: Vec::new(),
        outer_exprs: Vec::new(),
        body,
    }
}

/// Every scope in the graph, outermost first.
pub(crate) fn all_scopes(root: &Scope) -> Vec<&Scope> {
    fn visit<'a>(stmts: &'a [Stmt], out: &mut Vec<&'a Scope>) {
        for s in stmts {
            match s {
                Stmt::Simple { .. } => {}
                Stmt::If { branches, else_body } => {
                    for b in branches {
                        visit(&b.body, out);
                    }
                    if let Some(e) = else_body {
                        visit(e, out);
                    }
                }
                Stmt::Loop { body, else_body, .. } => {
                    visit(body, out);
                    if let Some(e) = else_body {
                        visit(e, out);
                    }
                }
                Stmt::Try {
                    body,
                    handlers,
                    else_body,
                    finally,
                    ..
                } => {
                    visit(body, out);
                    for h in handlers {
                        visit(&h.body, out);
                    }
                    if let Some(e) = else_body {
                        visit(e, out);
                    }
                    if let Some(f) = finally {
                        visit(&f.body, out);
                    }
                }
                Stmt::With { body, .. } => visit(body, out),
                Stmt::Def { scope, .. } => {
                    out.push(scope);
                    visit(&scope.body, out);
                }
            }
        }
    }
    let mut out = vec![root];
    visit(&root.body, &mut out);
    out
}

mod py {
    use super::*;

    /// Statements directly under a `block` or `module` node.
    pub fn block(ast: &Ast<'_>, n: NodeId) -> Vec<Stmt> {
        ast.kids(n).map(|c| stmt(ast, c)).collect()
    }

    fn body_of(ast: &Ast<'_>, n: NodeId) -> Vec<Stmt> {
        match ast.with_attr(n, EdgeAttr::HasBody).or_else(|| ast.kid_of_kind(n, "block")) {
            Some(b) => block(ast, b),
            None => Vec::new(),
        }
    }

    fn else_of(ast: &Ast<'_>, n: NodeId) -> Option<Vec<Stmt>> {
        ast.kid_of_kind(n, "else_clause").map(|e| body_of(ast, e))
    }

    pub fn def_scope(ast: &Ast<'_>, node: NodeId) -> Scope {
        let def = if ast.kind(node) == "decorated_definition" {
            ast.kids(node)
                .find(|&c| matches!(ast.kind(c), "function_definition" | "class_definition"))
                .unwrap_or(node)
        } else {
            node
        };
        let mut outer_exprs: Vec<NodeId> = ast.kids_of_kind(node, "decorator").collect();
        let mut params = Vec::new();
        if let Some(ps) = ast.with_attr(def, EdgeAttr::HasParameters) {
            for p in ast.kids(ps) {
                params.push(p);
                if let Some(v) = ast.with_attr(p, EdgeAttr::HasValue) {
                    outer_exprs.push(v);
                }
            }
        }
        if ast.kind(def) == "class_definition" {
            // Base classes are evaluated where the class statement runs.
            outer_exprs.extend(ast.kids_of_kind(def, "argument_list"));
        }
        Scope {
            node: def,
            params,
            outer_exprs,
            body: body_of(ast, def),
        }
    }

    fn stmt(ast: &Ast<'_>, n: NodeId) -> Stmt {
        match ast.kind(n) {
            "if_statement" => {
                let mut branches = vec![Branch {
                    node: n,
                    cond: ast.with_attr(n, EdgeAttr::HasCondition),
                    body: ast.with_attr(n, EdgeAttr::HasThenBody).map_or_else(Vec::new, |b| block(ast, b)),
                }];
                for e in ast.all_with_attr(n, EdgeAttr::HasElifBranch) {
                    branches.push(Branch {
                        node: e,
                        cond: ast.with_attr(e, EdgeAttr::HasCondition),
                        body: ast.with_attr(e, EdgeAttr::HasThenBody).map_or_else(Vec::new, |b| block(ast, b)),
                    });
                }
                Stmt::If {
                    branches,
                    else_body: else_of(ast, n),
                }
            }
            "while_statement" => Stmt::Loop {
                node: n,
                kind: LoopKind::While {
                    cond: ast.with_attr(n, EdgeAttr::HasCondition),
                },
                body: body_of(ast, n),
                else_body: else_of(ast, n),
            },
            "for_statement" => Stmt::Loop {
                node: n,
                kind: LoopKind::ForEach {
                    target: ast.with_attr(n, EdgeAttr::HasTarget),
                    iter: ast.with_attr(n, EdgeAttr::HasValue),
                },
                body: body_of(ast, n),
                else_body: else_of(ast, n),
            },
            "try_statement" => Stmt::Try {
                node: n,
                resources: Vec::new(),
                body: body_of(ast, n),
                handlers: ast
                    .kids_of_kind(n, "except_clause")
                    .map(|h| Handler {
                        node: h,
                        body: body_of(ast, h),
                    })
                    .collect(),
                else_body: else_of(ast, n),
                finally: ast.kid_of_kind(n, "finally_clause").map(|f| Handler {
                    node: f,
                    body: body_of(ast, f),
                }),
            },
            "with_statement" => Stmt::With {
                node: n,
                items: ast
                    .kid_of_kind(n, "with_clause")
                    .map(|c| ast.kids(c).collect())
                    .unwrap_or_default(),
                body: body_of(ast, n),
            },
            "function_definition" | "class_definition" | "decorated_definition" => Stmt::Def {
                node: n,
                scope: def_scope(ast, n),
            },
            kind => Stmt::Simple {
                node: n,
                jump: match kind {
                    "break_statement" => Some(Jump::Break),
                    "continue_statement" => Some(Jump::Continue),
                    "return_statement" => Some(Jump::Return),
                    "raise_statement" => Some(Jump::Raise),
                    _ => None,
                },
            },
        }
    }
}

mod java {
    use super::*;

    pub fn stmts(ast: &Ast<'_>, nodes: impl Iterator<Item = NodeId>) -> Vec<Stmt> {
        let mut out = Vec::new();
        for n in nodes {
            push(ast, n, &mut out);
        }
        out
    }

    /// A statement position that may hold a single statement or a block.
    fn body(ast: &Ast<'_>, n: Option<NodeId>) -> Vec<Stmt> {
        let mut out = Vec::new();
        if let Some(n) = n {
            push(ast, n, &mut out);
        }
        out
    }

    fn push(ast: &Ast<'_>, n: NodeId, out: &mut Vec<Stmt>) {
        match ast.kind(n) {
            // Bare nested blocks are flattened into the surrounding sequence.
            "block" => out.extend(stmts(ast, ast.kids(n))),
            "labeled_statement" => {
                let inner: Vec<_> = ast.kids(n).filter(|&c| ast.kind(c) != "identifier").collect();
                for c in inner {
                    push(ast, c, out);
                }
            }
            _ => out.push(stmt(ast, n)),
        }
    }

    fn def_scope(ast: &Ast<'_>, n: NodeId) -> Scope {
        let params = ast
            .with_attr(n, EdgeAttr::HasParameters)
            .map(|ps| ast.kids(ps).collect())
            .unwrap_or_default();
        let body = match ast.with_attr(n, EdgeAttr::HasBody).or_else(|| ast.kid_of_kind(n, "block")) {
            Some(b) => stmts(ast, ast.kids(b)),
            None => Vec::new(),
        };
        Scope {
            node: n,
            params,
            outer_exprs: Vec::new(),
            body,
        }
    }

    fn stmt(ast: &Ast<'_>, n: NodeId) -> Stmt {
        match ast.kind(n) {
            "if_statement" => {
                let mut branches = Vec::new();
                let mut cur = n;
                let else_body = loop {
                    branches.push(Branch {
                        node: cur,
                        cond: ast.with_attr(cur, EdgeAttr::HasCondition),
                        body: body(ast, ast.with_attr(cur, EdgeAttr::HasThenBody)),
                    });
                    if let Some(next) = ast.with_attr(cur, EdgeAttr::HasElifBranch) {
                        cur = next;
                    } else {
                        break ast.with_attr(cur, EdgeAttr::HasElseBody).map(|e| body(ast, Some(e)));
                    }
                };
                Stmt::If { branches, else_body }
            }
            "while_statement" => Stmt::Loop {
                node: n,
                kind: LoopKind::While {
                    cond: ast.with_attr(n, EdgeAttr::HasCondition),
                },
                body: body(ast, ast.with_attr(n, EdgeAttr::HasBody)),
                else_body: None,
            },
            "do_statement" => Stmt::Loop {
                node: n,
                kind: LoopKind::DoWhile {
                    cond: ast.with_attr(n, EdgeAttr::HasCondition),
                },
                body: body(ast, ast.with_attr(n, EdgeAttr::HasBody)),
                else_body: None,
            },
            "enhanced_for_statement" => Stmt::Loop {
                node: n,
                kind: LoopKind::ForEach {
                    target: ast.with_attr(n, EdgeAttr::HasTarget),
                    iter: ast.with_attr(n, EdgeAttr::HasValue),
                },
                body: body(ast, ast.with_attr(n, EdgeAttr::HasBody)),
                else_body: None,
            },
            "for_statement" => {
                let body_node = ast.with_attr(n, EdgeAttr::HasBody);
                let cond = ast.with_attr(n, EdgeAttr::HasCondition);
                let init = ast.all_with_attr(n, EdgeAttr::HasValue);
                let update = ast
                    .children[n]
                    .iter()
                    .filter(|&&(c, a)| a == EdgeAttr::Contains && Some(c) != body_node)
                    .map(|&(c, _)| c)
                    .collect();
                Stmt::Loop {
                    node: n,
                    kind: LoopKind::Counting { init, cond, update },
                    body: body(ast, body_node),
                    else_body: None,
                }
            }
            "try_statement" | "try_with_resources_statement" => Stmt::Try {
                node: n,
                resources: ast
                    .kid_of_kind(n, "resource_specification")
                    .map(|r| ast.kids(r).collect())
                    .unwrap_or_default(),
                body: body(ast, ast.with_attr(n, EdgeAttr::HasBody)),
                handlers: ast
                    .kids_of_kind(n, "catch_clause")
                    .map(|h| Handler {
                        node: h,
                        body: body(ast, ast.with_attr(h, EdgeAttr::HasBody)),
                    })
                    .collect(),
                else_body: None,
                finally: ast.kid_of_kind(n, "finally_clause").map(|f| Handler {
                    node: f,
                    body: body(ast, ast.kid_of_kind(f, "block")),
                }),
            },
            "synchronized_statement" => Stmt::With {
                node: n,
                items: ast.kids_of_kind(n, "parenthesized_expression").collect(),
                body: body(ast, ast.with_attr(n, EdgeAttr::HasBody)),
            },
            "class_declaration" | "interface_declaration" | "enum_declaration" | "record_declaration"
            | "annotation_type_declaration" => {
                let mut scope = def_scope(ast, n);
                scope.params.clear();
                if let Some(b) = ast.with_attr(n, EdgeAttr::HasBody) {
                    scope.body = class_body(ast, b);
                }
                Stmt::Def { node: n, scope }
            }
            "method_declaration" | "constructor_declaration" | "compact_constructor_declaration"
            | "static_initializer" => Stmt::Def {
                node: n,
                scope: def_scope(ast, n),
            },
            kind => Stmt::Simple {
                node: n,
                jump: match kind {
                    "break_statement" => Some(Jump::Break),
                    "continue_statement" => Some(Jump::Continue),
                    "return_statement" => Some(Jump::Return),
                    "throw_statement" => Some(Jump::Raise),
                    _ => None,
                },
            },
        }
    }

    fn class_body(ast: &Ast<'_>, b: NodeId) -> Vec<Stmt> {
        let mut out = Vec::new();
        for c in ast.kids(b) {
            if ast.kind(c) == "enum_body_declarations" {
                out.extend(class_body(ast, c));
            } else {
                out.push(stmt(ast, c));
            }
        }
        out
    }
}
