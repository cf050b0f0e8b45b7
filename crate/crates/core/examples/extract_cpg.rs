//! Builds the code property graph of a small Python function and prints its
//! control and data flow edges.
//!
//! cargo run --example extract_cpg [file.py]

use cgbridge::cpg::{extract, line_col, EdgeClass, SourceUnit};

const DEMO: &str = "\
def clamp_sum(xs, limit):
    total = 0
    for x in xs:
        if x < 0:
            continue
        total += x
        if total > limit:
            break
    return total
";

fn main() -> cgbridge::Result<()> {
    let code = match std::env::args().nth(1) {
        Some(path) => std::fs::read_to_string(path)?,
        None => DEMO.to_string(),
    };
    let g = extract(&SourceUnit::python("demo", code)?)?;
    g.validate()?;
    println!(
        "{} nodes, {} AST / {} CFG / {} DFG edges",
        g.nodes.len(),
        g.count_edges(EdgeClass::Ast),
        g.count_edges(EdgeClass::Cfg),
        g.count_edges(EdgeClass::Dfg)
    );
    let at = |id| {
        let n = g.node(id);
        let (l, c) = line_col(&g.code, n.span.0);
        format!("{}@{l}:{c}", n.kind)
    };
    for class in [EdgeClass::Cfg, EdgeClass::Dfg] {
        println!("\n{class:?}");
        for e in g.edges_of(class) {
            println!("  {:<28} {} -> {}", e.attr.to_string(), at(e.src), at(e.dst));
        }
    }
    Ok(())
}
