//! Self-supervised pretraining of the graph encoder: contrastive views plus
//! edge-type prediction.

use cgbridge::cge::train_stage1;
use cgbridge::config::CgeConfig;
use cgbridge::store::encode_features;
use cgbridge::synth::{extract_program, synth_corpus};

fn main() -> cgbridge::Result<()> {
    let corpus = synth_corpus(96, 1)
        .iter()
        .map(|p| Ok(encode_features(&extract_program(p)?, 32)))
        .collect::<cgbridge::Result<Vec<_>>>()?;
    let cfg = CgeConfig {
        input: 32,
        hidden: 32,
        output: 32,
        heads: 2,
        dropout: 0.0,
        batch_size: 16,
        lr: 3e-3,
        epochs: 15,
        ..CgeConfig::default()
    };
    let (cge, report) = train_stage1(&corpus, &cfg, 0)?;
    for (i, e) in report.trace.iter().enumerate() {
        println!(
            "epoch {i:>2}  loss {:.4}  contrastive {:.4}  edge {:.4}  edge acc {:.3}",
            e.loss, e.contrastive, e.edge, e.edge_accuracy
        );
    }
    println!(
        "eval loss {:.4} -> {:.4}, {} parameters",
        report.initial.loss,
        report.last.loss,
        cge.params.num_parameters()
    );
    Ok(())
}
