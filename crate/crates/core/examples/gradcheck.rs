//! Finite-difference gradient checks for every trained loss.

use cgbridge::verify::{run_gradcheck, Component};

fn main() -> cgbridge::Result<()> {
    for c in Component::ALL {
        let r = run_gradcheck(c, 0, None)?;
        println!(
            "{c:?}: {} groups, max relative error {:.2e}, {}",
            r.groups.len(),
            r.max_rel_error,
            if r.pass { "pass" } else { "FAIL" }
        );
        for p in &r.probes {
            println!("  probe {}: {} ({})", p.name, p.pass, p.detail);
        }
    }
    // the harness catches a corrupted gradient
    let r = run_gradcheck(Component::Gtc, 0, Some("bridge.query"))?;
    let bad: Vec<_> = r.groups.iter().filter(|g| !g.pass).map(|g| g.group.as_str()).collect();
    println!("with bridge.query negated: failing groups {bad:?}");
    Ok(())
}
