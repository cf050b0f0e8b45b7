//! Aligns query tokens with code text (contrastive, matching and generation
//! objectives) and reports graph-to-text retrieval.

use cgbridge::bridge::train::{evaluate_retrieval, train_stage2, GraphSide};
use cgbridge::bridge::BridgeDims;
use cgbridge::cge::train_stage1;
use cgbridge::config::{BridgeConfig, CgeConfig, Stage2Config};
use cgbridge::store::encode_features;
use cgbridge::synth::{extract_program, synth_corpus};

fn main() -> cgbridge::Result<()> {
    let progs = synth_corpus(24, 3);
    let graphs = progs
        .iter()
        .map(|p| Ok(encode_features(&extract_program(p)?, 32)))
        .collect::<cgbridge::Result<Vec<_>>>()?;
    let codes: Vec<String> = progs.iter().map(|p| p.code.clone()).collect();
    let ccfg = CgeConfig {
        input: 32,
        hidden: 32,
        output: 32,
        heads: 2,
        dropout: 0.0,
        lr: 3e-3,
        epochs: 10,
        ..CgeConfig::default()
    };
    let (cge, _) = train_stage1(&graphs, &ccfg, 0)?;

    let bcfg = BridgeConfig {
        queries: 8,
        layers: 2,
        d_model: 32,
        heads: 4,
        ffn: 64,
        max_len: 64,
        ..BridgeConfig::default()
    };
    let scfg = Stage2Config {
        lr: 3e-3,
        warmup_ratio: 0.0,
        epochs: 100,
        ..Stage2Config::default()
    };
    let side = GraphSide::new(&cge, &graphs, false)?;
    let dims = BridgeDims::new(&bcfg, cge.dims.d_out, 32);
    let (bridge, report) = train_stage2(&side, &codes, dims, &bcfg, &scfg, 0)?;
    for (i, e) in report.trace.iter().enumerate().step_by(10) {
        println!("epoch {i:>3}  loss {:.4}  gtm acc {:.3}", e.loss, e.gtm_accuracy.unwrap_or(f64::NAN));
    }
    let r = evaluate_retrieval(&bridge, &side, &codes)?;
    println!(
        "retrieval R@1 {:.3} (MRR {:.3}), with matching rerank R@1 {:.3}",
        r.gtc.r_at_1, r.gtc.mrr, r.matched.r_at_1
    );
    Ok(())
}
