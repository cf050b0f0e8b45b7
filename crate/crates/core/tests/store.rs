use std::fs;

use cgbridge::cpg::EdgeClass;
use cgbridge::store::{
    cgfb, cosine, dataset_stats, embed_text, encode_features, load_dataset, persist_dataset, Matrix, EDGE_FEATURES_FILE,
    NODE_FEATURES_FILE,
};
use cgbridge::synth::{extract_program, synth_corpus};
use cgbridge::Error;
use proptest::prelude::*;

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Hashing embedder for whitespace-separated lowercase words.
fn oracle_embed(words: &[&str], dim: usize) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    for w in words {
        let h = fnv1a64(w.as_bytes());
        v[(h % dim as u64) as usize] += if h >> 63 == 1 { -1.0 } else { 1.0 };
    }
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| if n > 0.0 { x / n } else { 0.0 }).collect()
}

fn crc32(bytes: &[u8]) -> u32 {
    let mut c = 0xffff_ffffu32;
    for &b in bytes {
        c ^= b as u32;
        for _ in 0..8 {
            c = if c & 1 == 1 { (c >> 1) ^ 0xedb8_8320 } else { c >> 1 };
        }
    }
    !c
}

#[test]
fn embedding_matches_hashing_oracle() {
    for (text, words) in [
        ("return x", vec!["return", "x"]),
        ("while", vec!["while"]),
        ("total count total", vec!["total", "count", "total"]),
    ] {
        for dim in [7, 16, 64] {
            let got = embed_text(text, dim);
            let want = oracle_embed(&words, dim);
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-15, "{text} at {dim}: {got:?} vs {want:?}");
            }
        }
    }
}

#[test]
fn shared_subtoken_raises_cosine() {
    let rx = embed_text("return x", 64);
    let ry = embed_text("return y", 64);
    let w = embed_text("while", 64);
    let oracle = |a: &[&str], b: &[&str]| cosine(&oracle_embed(a, 64), &oracle_embed(b, 64));
    assert!((cosine(&rx, &ry) - oracle(&["return", "x"], &["return", "y"])).abs() < 1e-12);
    assert!(cosine(&rx, &ry) > cosine(&rx, &w));
}

#[test]
fn cgfb_block_layout() {
    let m = Matrix::new(2, 3, vec![1.0, -2.5, 0.0, 3.25, f32::MIN_POSITIVE, 7.0]).unwrap();
    let mut buf = Vec::new();
    cgfb::write_block(&mut buf, &m).unwrap();
    assert_eq!(buf.len(), 4 + 4 + 8 + 4 + 24 + 4);
    assert_eq!(&buf[..4], b"CGFB");
    assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), 1);
    assert_eq!(u64::from_le_bytes(buf[8..16].try_into().unwrap()), 2);
    assert_eq!(u32::from_le_bytes(buf[16..20].try_into().unwrap()), 3);
    let payload = &buf[20..44];
    let floats: Vec<f32> = payload.chunks(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    assert_eq!(floats, m.data);
    assert_eq!(u32::from_le_bytes(buf[44..48].try_into().unwrap()), crc32(payload));
}

#[test]
fn two_hundred_graphs_round_trip() {
    let graphs: Vec<_> = synth_corpus(200, 11)
        .iter()
        .map(|p| encode_features(&extract_program(p).unwrap(), 24))
        .collect();
    let dir = tempfile::tempdir().unwrap();
    persist_dataset(&graphs, dir.path()).unwrap();
    let back = load_dataset(dir.path()).unwrap();
    assert_eq!(back.len(), 200);
    for (a, b) in graphs.iter().zip(&back) {
        assert_eq!(a.graph, b.graph);
        assert_eq!(a.feature_dim, b.feature_dim);
        let bits = |m: &Matrix| m.data.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.node_features), bits(&b.node_features));
        assert_eq!(bits(&a.edge_features), bits(&b.edge_features));
    }
}

#[test]
fn stats_from_hand_counts() {
    let graphs: Vec<_> = synth_corpus(30, 2).iter().map(|p| extract_program(p).unwrap()).collect();
    let featured: Vec<_> = graphs.iter().map(|g| encode_features(g, 4)).collect();
    let dir = tempfile::tempdir().unwrap();
    persist_dataset(&featured, dir.path()).unwrap();
    let s = dataset_stats(dir.path()).unwrap();
    let mut counts = [0usize; 4];
    for g in &graphs {
        counts[0] += g.nodes.len();
        for e in &g.edges {
            let k = match e.edge_class {
                EdgeClass::Ast => 1,
                EdgeClass::Cfg => 2,
                EdgeClass::Dfg => 3,
            };
            counts[k] += 1;
        }
    }
    assert_eq!(s.total_samples, 30);
    assert_eq!(s.avg_nodes, counts[0] as f64 / 30.0);
    assert_eq!(s.avg_ast_edges, counts[1] as f64 / 30.0);
    assert_eq!(s.avg_cfg_edges, counts[2] as f64 / 30.0);
    assert_eq!(s.avg_dfg_edges, counts[3] as f64 / 30.0);
    assert!((s.avg_nodes - s.avg_ast_edges - 1.0).abs() < 1e-12);
    // a bare JSONL file gives the same numbers
    assert_eq!(dataset_stats(&dir.path().join("graphs.jsonl")).unwrap(), s);
}

fn persisted() -> tempfile::TempDir {
    let graphs: Vec<_> = synth_corpus(3, 5)
        .iter()
        .map(|p| encode_features(&extract_program(p).unwrap(), 8))
        .collect();
    let dir = tempfile::tempdir().unwrap();
    persist_dataset(&graphs, dir.path()).unwrap();
    dir
}

#[test]
fn truncated_feature_file_is_a_format_error() {
    let dir = persisted();
    let p = dir.path().join(NODE_FEATURES_FILE);
    let bytes = fs::read(&p).unwrap();
    fs::write(&p, &bytes[..bytes.len() - 7]).unwrap();
    assert!(matches!(load_dataset(dir.path()), Err(Error::Format(_))));
}

#[test]
fn flipped_payload_bit_fails_the_checksum() {
    let dir = persisted();
    let p = dir.path().join(EDGE_FEATURES_FILE);
    let mut bytes = fs::read(&p).unwrap();
    bytes[25] ^= 0x10;
    fs::write(&p, &bytes).unwrap();
    assert!(matches!(load_dataset(dir.path()), Err(Error::Checksum { .. })));
}

#[test]
fn bad_magic_and_row_count_mismatch() {
    let dir = persisted();
    let p = dir.path().join(NODE_FEATURES_FILE);
    let mut bytes = fs::read(&p).unwrap();
    bytes[0] = b'X';
    fs::write(&p, &bytes).unwrap();
    assert!(matches!(load_dataset(dir.path()), Err(Error::Format(_))));

    let dir = persisted();
    let mut f = fs::File::create(dir.path().join(NODE_FEATURES_FILE)).unwrap();
    cgfb::write_block(&mut f, &Matrix::zeros(2, 8)).unwrap();
    drop(f);
    assert!(matches!(load_dataset(dir.path()), Err(Error::Format(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn embedding_is_pure_and_normalized(text in "[a-zA-Z_ +=()0-9]{0,40}", dim in 1usize..64) {
        let a = embed_text(&text, dim);
        prop_assert_eq!(&a, &embed_text(&text, dim));
        let n = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        prop_assert!(n == 0.0 || (n - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cgfb_blocks_decode_to_what_was_written(
        rows in 0usize..6,
        cols in 1usize..6,
        seed in any::<u64>(),
    ) {
        let data: Vec<f32> = (0..rows * cols)
            .map(|i| f32::from_bits((seed.wrapping_mul(i as u64 + 1) >> 16) as u32 & 0x7f7f_ffff))
            .collect();
        let m = Matrix::new(rows, cols, data).unwrap();
        let mut buf = Vec::new();
        cgfb::write_block(&mut buf, &m).unwrap();
        cgfb::write_block(&mut buf, &m).unwrap();
        let back = cgfb::read_blocks(&mut buf.as_slice()).unwrap();
        prop_assert_eq!(back.len(), 2);
        prop_assert_eq!(&back[0], &m);
    }
}
