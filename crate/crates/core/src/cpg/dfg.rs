use std::collections::{BTreeSet, HashSet};

use super::flow::{self, Ast, Jump, LoopKind, Scope, Stmt};
use super::{CodePropertyGraph, CpgEdge, EdgeAttr, NodeId};
use crate::error::Result;

/// Variable reads and writes of one program point, in evaluation order.
#[derive(Debug, Default)]
struct Access {
    uses: Vec<NodeId>,
    defs: Vec<NodeId>,
    /// (operand identifier, assignment target) pairs.
    contrib: Vec<(NodeId, NodeId)>,
}

struct Walker<'a, 'g> {
    ast: &'a Ast<'g>,
}

impl<'a, 'g> Walker<'a, 'g> {
    fn kind(&self, n: NodeId) -> &'g str {
        self.ast.kind(n)
    }

    fn name(&self, n: NodeId) -> &'g str {
        self.ast.text(n)
    }

    /// Collect variable reads under `n`, plus any definitions made by
    /// embedded assignment expressions.
    fn expr(&self, n: NodeId, bound: &HashSet<&'g str>, acc: &mut Access) {
        match self.kind(n) {
            "identifier" => {
                // Names reached through a naming role (callees, attributes,
                // keyword names) are not variable references.
                if self.ast.incoming_attr(n) != Some(EdgeAttr::HasName) && !bound.contains(self.name(n)) {
                    acc.uses.push(n);
                }
            }
            "lambda" | "lambda_expression" | "function_definition" | "class_definition" => {}
            "list_comprehension" | "set_comprehension" | "dictionary_comprehension" | "generator_expression" => {
                let mut inner = bound.clone();
                for clause in self.ast.kids_of_kind(n, "for_in_clause") {
                    if let Some(t) = self.ast.with_attr(clause, EdgeAttr::HasTarget) {
                        for id in self.pattern_identifiers(t) {
                            inner.insert(self.name(id));
                        }
                    }
                }
                for c in self.ast.kids(n).collect::<Vec<_>>() {
                    if self.kind(c) == "for_in_clause" {
                        if let Some(v) = self.ast.with_attr(c, EdgeAttr::HasValue) {
                            self.expr(v, &inner, acc);
                        }
                    } else {
                        self.expr(c, &inner, acc);
                    }
                }
            }
            "named_expression" => {
                let value_start = acc.uses.len();
                if let Some(v) = self.ast.with_attr(n, EdgeAttr::HasValue) {
                    self.expr(v, bound, acc);
                }
                if let Some(t) = self.ast.with_attr(n, EdgeAttr::HasName) {
                    self.contribute(acc, value_start, &[t]);
                    acc.defs.push(t);
                }
            }
            "assignment_expression" => self.java_assignment(n, bound, acc),
            "update_expression" => {
                for c in self.ast.kids(n).collect::<Vec<_>>() {
                    if self.kind(c) == "identifier" {
                        acc.uses.push(c);
                        acc.defs.push(c);
                    } else {
                        self.expr(c, bound, acc);
                    }
                }
            }
            "local_variable_declaration" | "field_declaration" | "constant_declaration" => {
                for d in self.ast.kids_of_kind(n, "variable_declarator").collect::<Vec<_>>() {
                    self.declarator(d, bound, acc);
                }
            }
            _ => {
                for c in self.ast.kids(n).collect::<Vec<_>>() {
                    self.expr(c, bound, acc);
                }
            }
        }
    }

    fn contribute(&self, acc: &mut Access, from: usize, targets: &[NodeId]) {
        let sources: Vec<_> = acc.uses[from..].to_vec();
        for &t in targets {
            for &s in &sources {
                if s != t {
                    acc.contrib.push((s, t));
                }
            }
        }
    }

    /// Identifiers bound by a destructuring target.
    fn pattern_identifiers(&self, n: NodeId) -> Vec<NodeId> {
        match self.kind(n) {
            "identifier" => vec![n],
            "pattern_list" | "tuple_pattern" | "list_pattern" | "expression_list" | "tuple" | "list"
            | "parenthesized_expression" | "list_splat_pattern" | "as_pattern_target" => {
                self.ast.kids(n).flat_map(|c| self.pattern_identifiers(c)).collect()
            }
            _ => Vec::new(),
        }
    }

    /// Process an assignment target: record definitions and the reads made
    /// while evaluating it. Returns the nodes that receive the value.
    fn target(&self, n: NodeId, acc: &mut Access) -> Vec<NodeId> {
        match self.kind(n) {
            "identifier" => {
                acc.defs.push(n);
                vec![n]
            }
            "pattern_list" | "tuple_pattern" | "list_pattern" | "expression_list" | "tuple" | "list"
            | "parenthesized_expression" | "list_splat_pattern" | "as_pattern_target" => {
                let kids: Vec<_> = self.ast.kids(n).collect();
                kids.into_iter().flat_map(|c| self.target(c, acc)).collect()
            }
            "subscript" | "attribute" | "field_access" | "array_access" => {
                self.expr(n, &HashSet::new(), acc);
                vec![n]
            }
            _ => {
                self.expr(n, &HashSet::new(), acc);
                Vec::new()
            }
        }
    }

    /// `left = right` with tuple targets paired element-wise when the shapes agree.
    fn assign_pair(&self, left: NodeId, right: Option<NodeId>, acc: &mut Access) {
        let Some(right) = right else {
            return;
        };
        let tuple_left = matches!(self.kind(left), "pattern_list" | "tuple_pattern");
        let tuple_right = matches!(self.kind(right), "expression_list" | "tuple");
        let lk: Vec<_> = self.ast.kids(left).collect();
        let rk: Vec<_> = self.ast.kids(right).collect();
        let splat = |ks: &[NodeId]| ks.iter().any(|&k| self.kind(k).contains("splat"));
        let none = HashSet::new();
        if tuple_left && tuple_right && lk.len() == rk.len() && !splat(&lk) && !splat(&rk) {
            let mut starts = Vec::new();
            for &r in &rk {
                starts.push(acc.uses.len());
                self.expr(r, &none, acc);
            }
            starts.push(acc.uses.len());
            for (i, &l) in lk.iter().enumerate() {
                let targets = self.target(l, acc);
                let sources: Vec<_> = acc.uses[starts[i]..starts[i + 1]].to_vec();
                for t in targets {
                    for &s in &sources {
                        if s != t {
                            acc.contrib.push((s, t));
                        }
                    }
                }
            }
        } else {
            let start = acc.uses.len();
            self.expr(right, &none, acc);
            let end = acc.uses.len();
            let targets = self.target(left, acc);
            let sources: Vec<_> = acc.uses[start..end].to_vec();
            for t in targets {
                for &s in &sources {
                    if s != t {
                        acc.contrib.push((s, t));
                    }
                }
            }
        }
    }

    fn py_assignment(&self, n: NodeId, acc: &mut Access) {
        // Chained assignments nest: `a = b = v` is assignment(a, assignment(b, v)).
        let mut lefts = Vec::new();
        let mut cur = n;
        let value = loop {
            if let Some(l) = self.ast.with_attr(cur, EdgeAttr::HasTarget) {
                lefts.push(l);
            }
            match self.ast.with_attr(cur, EdgeAttr::HasValue) {
                Some(r) if self.kind(r) == "assignment" => cur = r,
                other => break other,
            }
        };
        if lefts.len() == 1 {
            self.assign_pair(lefts[0], value, acc);
            return;
        }
        let Some(value) = value else {
            return;
        };
        let start = acc.uses.len();
        self.expr(value, &HashSet::new(), acc);
        let end = acc.uses.len();
        let sources: Vec<_> = acc.uses[start..end].to_vec();
        for l in lefts {
            for t in self.target(l, acc) {
                for &s in &sources {
                    if s != t {
                        acc.contrib.push((s, t));
                    }
                }
            }
        }
    }

    fn py_augmented(&self, n: NodeId, acc: &mut Access) {
        let start = acc.uses.len();
        if let Some(r) = self.ast.with_attr(n, EdgeAttr::HasValue) {
            self.expr(r, &HashSet::new(), acc);
        }
        let end = acc.uses.len();
        let sources: Vec<_> = acc.uses[start..end].to_vec();
        let Some(l) = self.ast.with_attr(n, EdgeAttr::HasTarget) else {
            return;
        };
        let targets = if self.kind(l) == "identifier" {
            acc.uses.push(l);
            acc.defs.push(l);
            vec![l]
        } else {
            self.target(l, acc)
        };
        for t in targets {
            for &s in &sources {
                if s != t {
                    acc.contrib.push((s, t));
                }
            }
        }
    }

    fn java_assignment(&self, n: NodeId, bound: &HashSet<&'g str>, acc: &mut Access) {
        let (Some(l), Some(r)) = (
            self.ast.with_attr(n, EdgeAttr::HasTarget),
            self.ast.with_attr(n, EdgeAttr::HasValue),
        ) else {
            return;
        };
        let code = &self.ast.graph.code;
        let op = code[self.ast.graph.nodes[l].span.1..self.ast.graph.nodes[r].span.0].trim();
        let start = acc.uses.len();
        self.expr(r, bound, acc);
        let end = acc.uses.len();
        let sources: Vec<_> = acc.uses[start..end].to_vec();
        let targets = if self.kind(l) == "identifier" {
            if op != "=" {
                acc.uses.push(l);
            }
            acc.defs.push(l);
            vec![l]
        } else {
            self.target(l, acc)
        };
        for t in targets {
            for &s in &sources {
                if s != t {
                    acc.contrib.push((s, t));
                }
            }
        }
    }

    fn declarator(&self, d: NodeId, bound: &HashSet<&'g str>, acc: &mut Access) {
        let start = acc.uses.len();
        let value = self.ast.with_attr(d, EdgeAttr::HasValue);
        if let Some(v) = value {
            self.expr(v, bound, acc);
        }
        if let Some(t) = self.ast.with_attr(d, EdgeAttr::HasTarget) {
            if value.is_some() {
                self.contribute(acc, start, &[t]);
                acc.defs.push(t);
            }
        }
    }

    /// Reads and writes of a simple statement.
    fn simple(&self, n: NodeId) -> Access {
        let mut acc = Access::default();
        match self.kind(n) {
            "import_statement" | "import_from_statement" | "future_import_statement" | "global_statement"
            | "nonlocal_statement" | "pass_statement" | "import_declaration" | "package_declaration" => {}
            "expression_statement" => {
                for c in self.ast.kids(n).collect::<Vec<_>>() {
                    match self.kind(c) {
                        "assignment" => self.py_assignment(c, &mut acc),
                        "augmented_assignment" => self.py_augmented(c, &mut acc),
                        _ => self.expr(c, &HashSet::new(), &mut acc),
                    }
                }
            }
            _ => self.expr(n, &HashSet::new(), &mut acc),
        }
        acc
    }

    fn exprs(&self, nodes: &[NodeId]) -> Access {
        let mut acc = Access::default();
        for &n in nodes {
            self.expr(n, &HashSet::new(), &mut acc);
        }
        acc
    }

    /// A loop target receiving elements of `iter`.
    fn for_target(&self, target: Option<NodeId>, iter: Option<NodeId>) -> (Access, Access) {
        let iter_acc = iter.map_or_else(Access::default, |i| self.exprs(&[i]));
        let mut t_acc = Access::default();
        if let Some(t) = target {
            let targets = self.target(t, &mut t_acc);
            for t in targets {
                for &s in &iter_acc.uses {
                    if s != t {
                        t_acc.contrib.push((s, t));
                    }
                }
            }
        }
        (iter_acc, t_acc)
    }

    /// Context-manager items: `expr as target`.
    fn with_items(&self, items: &[NodeId]) -> Access {
        let mut acc = Access::default();
        for &item in items {
            let inner = match self.kind(item) {
                "with_item" => self.ast.kids(item).next(),
                _ => Some(item),
            };
            let Some(inner) = inner else { continue };
            if self.kind(inner) == "as_pattern" {
                let kids: Vec<_> = self.ast.kids(inner).collect();
                let start = acc.uses.len();
                for &k in &kids {
                    if self.ast.incoming_attr(k) != Some(EdgeAttr::HasName) {
                        self.expr(k, &HashSet::new(), &mut acc);
                    }
                }
                let end = acc.uses.len();
                let sources: Vec<_> = acc.uses[start..end].to_vec();
                for &k in &kids {
                    if self.ast.incoming_attr(k) == Some(EdgeAttr::HasName) {
                        for t in self.target(k, &mut acc) {
                            for &s in &sources {
                                acc.contrib.push((s, t));
                            }
                        }
                    }
                }
            } else {
                self.expr(inner, &HashSet::new(), &mut acc);
            }
        }
        acc
    }

    /// Exception handler head: the caught type is read, the alias is bound.
    fn handler(&self, h: NodeId) -> Access {
        let mut acc = Access::default();
        for c in self.ast.kids(h).collect::<Vec<_>>() {
            match self.kind(c) {
                "block" => {}
                "as_pattern" => {
                    for k in self.ast.kids(c).collect::<Vec<_>>() {
                        if self.ast.incoming_attr(k) == Some(EdgeAttr::HasName) {
                            acc.defs.extend(self.pattern_identifiers(k));
                        } else {
                            self.expr(k, &HashSet::new(), &mut acc);
                        }
                    }
                }
                "catch_formal_parameter" => acc.defs.extend(self.param_names(c)),
                _ if self.ast.incoming_attr(c) == Some(EdgeAttr::HasBody) => {}
                _ if self.ast.incoming_attr(c) == Some(EdgeAttr::HasName) => {
                    acc.defs.extend(self.pattern_identifiers(c));
                }
                _ => self.expr(c, &HashSet::new(), &mut acc),
            }
        }
        acc
    }

    /// Identifiers bound by one parameter declaration.
    fn param_names(&self, p: NodeId) -> Vec<NodeId> {
        match self.kind(p) {
            "identifier" => vec![p],
            _ => {
                if let Some(n) = self.ast.with_attr(p, EdgeAttr::HasName) {
                    if self.kind(n) == "identifier" {
                        return vec![n];
                    }
                }
                self.ast
                    .kids(p)
                    .filter(|&c| self.ast.incoming_attr(c) != Some(EdgeAttr::HasValue))
                    .flat_map(|c| match self.kind(c) {
                        "identifier" => vec![c],
                        "list_splat_pattern" | "dictionary_splat_pattern" => self.param_names(c),
                        _ => Vec::new(),
                    })
                    .take(1)
                    .collect()
            }
        }
    }

    fn resources(&self, nodes: &[NodeId]) -> Access {
        let mut acc = Access::default();
        for &r in nodes {
            if self.kind(r) == "resource" {
                self.declarator(r, &HashSet::new(), &mut acc);
            } else {
                self.expr(r, &HashSet::new(), &mut acc);
            }
        }
        acc
    }
}

struct Point {
    access: Access,
    succ: Vec<usize>,
}

struct LoopFrame {
    cont: usize,
    breaks: Vec<usize>,
}

struct ScopeFlow<'w, 'a, 'g> {
    walker: &'w Walker<'a, 'g>,
    points: Vec<Point>,
    loops: Vec<LoopFrame>,
}

impl<'w, 'a, 'g> ScopeFlow<'w, 'a, 'g> {
    fn point(&mut self, preds: &[usize], access: Access) -> usize {
        let id = self.points.len();
        self.points.push(Point {
            access,
            succ: Vec::new(),
        });
        for &p in preds {
            self.points[p].succ.push(id);
        }
        id
    }

    fn link(&mut self, from: &[usize], to: usize) {
        for &f in from {
            self.points[f].succ.push(to);
        }
    }

    fn seq(&mut self, stmts: &[Stmt], mut preds: Vec<usize>) -> Vec<usize> {
        for s in stmts {
            preds = self.stmt(s, preds);
        }
        preds
    }

    fn stmt(&mut self, s: &Stmt, preds: Vec<usize>) -> Vec<usize> {
        let w = self.walker;
        match s {
            Stmt::Simple { node, jump } => {
                let p = self.point(&preds, w.simple(*node));
                match jump {
                    None => vec![p],
                    Some(Jump::Break) => {
                        if let Some(l) = self.loops.last_mut() {
                            l.breaks.push(p);
                        }
                        Vec::new()
                    }
                    Some(Jump::Continue) => {
                        if let Some(cont) = self.loops.last().map(|l| l.cont) {
                            self.link(&[p], cont);
                        }
                        Vec::new()
                    }
                    Some(Jump::Return) | Some(Jump::Raise) => Vec::new(),
                }
            }
            Stmt::If { branches, else_body } => {
                let mut exits = Vec::new();
                let mut prev = preds;
                for b in branches {
                    let c = self.point(&prev, w.exprs(&b.cond.into_iter().collect::<Vec<_>>()));
                    exits.extend(self.seq(&b.body, vec![c]));
                    prev = vec![c];
                }
                match else_body {
                    Some(e) => exits.extend(self.seq(e, prev)),
                    None => exits.extend(prev),
                }
                exits
            }
            Stmt::Loop {
                kind, body, else_body, ..
            } => {
                let (head, body_preds, cont) = match kind {
                    LoopKind::While { cond } => {
                        let h = self.point(&preds, w.exprs(&cond.into_iter().copied().collect::<Vec<_>>()));
                        (h, vec![h], h)
                    }
                    LoopKind::DoWhile { cond } => {
                        let j = self.point(&preds, Access::default());
                        let c = self.point(&[], w.exprs(&cond.into_iter().copied().collect::<Vec<_>>()));
                        self.link(&[c], j);
                        (c, vec![j], c)
                    }
                    LoopKind::ForEach { target, iter } => {
                        let (iter_acc, t_acc) = w.for_target(*target, *iter);
                        let i = self.point(&preds, iter_acc);
                        let h = self.point(&[i], Access::default());
                        let t = self.point(&[h], t_acc);
                        (h, vec![t], h)
                    }
                    LoopKind::Counting { init, cond, update } => {
                        let i = self.point(&preds, w.exprs(init));
                        let h = self.point(&[i], w.exprs(&cond.into_iter().copied().collect::<Vec<_>>()));
                        let u = self.point(&[], w.exprs(update));
                        self.link(&[u], h);
                        (h, vec![h], u)
                    }
                };
                self.loops.push(LoopFrame {
                    cont,
                    breaks: Vec::new(),
                });
                let body_exits = self.seq(body, body_preds);
                self.link(&body_exits, cont);
                let frame = self.loops.pop().expect("loop frame");
                let mut exits = match else_body {
                    Some(e) => self.seq(e, vec![head]),
                    None => vec![head],
                };
                exits.extend(frame.breaks);
                exits
            }
            Stmt::Try {
                resources,
                body,
                handlers,
                else_body,
                finally,
                ..
            } => {
                let t = self.point(&preds, w.resources(resources));
                let start = self.points.len();
                let body_exits = self.seq(body, vec![t]);
                let end = self.points.len();
                let raisers: Vec<usize> = std::iter::once(t).chain(start..end).collect();
                let mut normal = match else_body {
                    Some(e) => self.seq(e, body_exits),
                    None => body_exits,
                };
                for h in handlers {
                    let hp = self.point(&raisers, w.handler(h.node));
                    normal.extend(self.seq(&h.body, vec![hp]));
                }
                match finally {
                    Some(f) => {
                        let fp = self.point(&normal, Access::default());
                        self.seq(&f.body, vec![fp])
                    }
                    None => normal,
                }
            }
            Stmt::With { items, body, .. } => {
                let p = self.point(&preds, w.with_items(items));
                self.seq(body, vec![p])
            }
            Stmt::Def { scope, .. } => vec![self.point(&preds, w.exprs(&scope.outer_exprs))],
        }
    }
}

/// Reaching definitions over one scope; returns (def, use) identifier pairs.
fn reaching_pairs(walker: &Walker<'_, '_>, scope: &Scope, contrib: &mut Vec<(NodeId, NodeId)>) -> Vec<(NodeId, NodeId)> {
    let mut flow = ScopeFlow {
        walker,
        points: Vec::new(),
        loops: Vec::new(),
    };
    let mut entry = Access::default();
    for &p in &scope.params {
        entry.defs.extend(walker.param_names(p));
    }
    let e = flow.point(&[], entry);
    flow.seq(&scope.body, vec![e]);
    let points = flow.points;

    // Definition universe, one entry per (point, defining identifier).
    let name = |n: NodeId| walker.name(n);
    let mut defs: Vec<NodeId> = Vec::new();
    let mut gen: Vec<Vec<usize>> = Vec::with_capacity(points.len());
    for p in &points {
        let mut g: Vec<usize> = Vec::new();
        for &d in &p.access.defs {
            // A later definition of the same name in one point shadows earlier ones.
            g.retain(|&i| name(defs[i]) != name(d));
            g.push(defs.len());
            defs.push(d);
        }
        gen.push(g);
    }
    let mut preds = vec![Vec::new(); points.len()];
    for (i, p) in points.iter().enumerate() {
        for &s in &p.succ {
            preds[s].push(i);
        }
    }
    let mut out: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); points.len()];
    let transfer = |input: &BTreeSet<usize>, i: usize| -> BTreeSet<usize> {
        let killed: HashSet<&str> = points[i].access.defs.iter().map(|&d| name(d)).collect();
        let mut o: BTreeSet<usize> = input.iter().copied().filter(|&d| !killed.contains(name(defs[d]))).collect();
        o.extend(gen[i].iter().copied());
        o
    };
    let mut changed = true;
    while changed {
        changed = false;
        for i in 0..points.len() {
            let mut input = BTreeSet::new();
            for &p in &preds[i] {
                input.extend(out[p].iter().copied());
            }
            let o = transfer(&input, i);
            if o != out[i] {
                out[i] = o;
                changed = true;
            }
        }
    }

    let mut pairs = Vec::new();
    for (i, p) in points.iter().enumerate() {
        let mut input = BTreeSet::new();
        for &q in &preds[i] {
            input.extend(out[q].iter().copied());
        }
        for &u in &p.access.uses {
            for &d in &input {
                if name(defs[d]) == name(u) {
                    pairs.push((defs[d], u));
                }
            }
        }
    }
    // Operands that never resolve to a definition in this scope (imports,
    // builtins, globals) do not contribute.
    let local: HashSet<&str> = defs.iter().map(|&d| name(d)).collect();
    for p in &points {
        contrib.extend(p.access.contrib.iter().copied().filter(|&(s, _)| local.contains(name(s))));
    }
    pairs
}

/// Add data-flow edges: `flows_to` from each definition to the uses it
/// reaches, and `contributes_to` from operands to the target they are
/// assigned into.
pub fn attach_dfg_edges(graph: &CodePropertyGraph) -> Result<CodePropertyGraph> {
    graph.validate()?;
    let ast = Ast::new(graph);
    let root = flow::lower(&ast);
    let walker = Walker { ast: &ast };
    let mut edges = Vec::new();
    for scope in flow::all_scopes(&root) {
        let mut contrib = Vec::new();
        for (d, u) in reaching_pairs(&walker, scope, &mut contrib) {
            edges.push(CpgEdge::new(d, u, EdgeAttr::FlowsTo));
        }
        for (s, t) in contrib {
            edges.push(CpgEdge::new(s, t, EdgeAttr::ContributesTo));
        }
    }
    let mut out = graph.clone();
    out.edges.extend(edges);
    out.normalize_edges();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cpg::{extract, EdgeClass, SourceUnit};

    fn dfg(code: &str) -> Vec<(String, String, EdgeAttr)> {
        let g = extract(&SourceUnit::python("t", code).unwrap()).unwrap();
        let show = |n: NodeId| {
            let (l, c) = crate::cpg::line_col(&g.code, g.node(n).span.0);
            format!("{}@{l}:{c}", g.node(n).text)
        };
        g.edges_of(EdgeClass::Dfg).map(|e| (show(e.src), show(e.dst), e.attr)).collect()
    }

    fn e(src: &str, dst: &str, attr: EdgeAttr) -> (String, String, EdgeAttr) {
        (src.to_string(), dst.to_string(), attr)
    }

    #[test]
    fn definition_flows_to_use_and_contributes() {
        let edges = dfg("a = 1\nb = a");
        assert_eq!(
            edges,
            vec![
                e("a@1:1", "a@2:5", EdgeAttr::FlowsTo),
                e("a@2:5", "b@2:1", EdgeAttr::ContributesTo),
            ]
        );
    }

    #[test]
    fn redefinition_kills() {
        let edges = dfg("a = 1\na = 2\nb = a");
        let flows: Vec<_> = edges.iter().filter(|x| x.2 == EdgeAttr::FlowsTo).collect();
        assert_eq!(flows, vec![&e("a@2:1", "a@3:5", EdgeAttr::FlowsTo)]);
    }

    #[test]
    fn branches_merge() {
        let edges = dfg("def f(a):\n    if a > 0:\n        x = a\n    else:\n        x = -a\n    return x\n");
        assert!(edges.contains(&e("a@3:13", "x@3:9", EdgeAttr::ContributesTo)));
        assert!(edges.contains(&e("a@5:14", "x@5:9", EdgeAttr::ContributesTo)));
        assert!(edges.contains(&e("x@3:9", "x@6:12", EdgeAttr::FlowsTo)));
        assert!(edges.contains(&e("x@5:9", "x@6:12", EdgeAttr::FlowsTo)));
        assert!(edges.contains(&e("a@1:7", "a@2:8", EdgeAttr::FlowsTo)));
    }

    #[test]
    fn loop_carried_definitions_reach_the_head() {
        let edges = dfg("i = 0\nwhile i < 3:\n    i += 1\n");
        assert!(edges.contains(&e("i@1:1", "i@2:7", EdgeAttr::FlowsTo)));
        assert!(edges.contains(&e("i@3:5", "i@2:7", EdgeAttr::FlowsTo)));
        assert!(edges.contains(&e("i@1:1", "i@3:5", EdgeAttr::FlowsTo)));
        assert!(edges.contains(&e("i@3:5", "i@3:5", EdgeAttr::FlowsTo)));
    }

    #[test]
    fn imports_and_callees_produce_nothing() {
        let edges = dfg("import math\ny = math.sqrt(2)\n");
        assert!(edges.is_empty(), "{edges:?}");
    }
}
