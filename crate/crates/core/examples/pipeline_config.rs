//! Loads the laptop-scale run configuration, applies command-line style
//! overrides and shows how bad keys are reported.

use std::path::Path;

use cgbridge::config::PipelineConfig;

fn main() -> cgbridge::Result<()> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/desk.toml");
    let cfg = PipelineConfig::load(&path)?.with_overrides(&["stage3.epochs=5".into(), "seed=11".into()])?;
    println!("{}", toml::to_string_pretty(&cfg).expect("config serializes"));
    for bad in ["cge.heads=0", "bridge.querys=8", "stage2.lr=fast"] {
        match cfg.with_overrides(&[bad.to_string()]) {
            Ok(_) => println!("{bad}: accepted"),
            Err(e) => println!("{bad}: {e}"),
        }
    }
    Ok(())
}
