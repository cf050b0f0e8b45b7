//! Generates a synthetic corpus, attaches hashed text features, writes the
//! dataset to disk and reads its statistics back.

use cgbridge::store::{dataset_stats, encode_features, load_dataset, persist_dataset};
use cgbridge::synth::{extract_program, synth_corpus};

fn main() -> cgbridge::Result<()> {
    let graphs = synth_corpus(64, 0)
        .iter()
        .map(|p| Ok(encode_features(&extract_program(p)?, 32)))
        .collect::<cgbridge::Result<Vec<_>>>()?;
    let dir = std::env::temp_dir().join("cgb-featurize-example");
    persist_dataset(&graphs, &dir)?;
    let back = load_dataset(&dir)?;
    println!("wrote {} graphs to {}", back.len(), dir.display());
    println!("{}", serde_json::to_string_pretty(&dataset_stats(&dir)?)?);
    let g = &back[0];
    println!(
        "first graph `{}`: node features {}x{}, edge features {}x{}",
        g.graph.source_id, g.node_features.rows, g.node_features.cols, g.edge_features.rows, g.edge_features.cols
    );
    Ok(())
}
