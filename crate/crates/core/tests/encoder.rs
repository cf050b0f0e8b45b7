use candle_core::{Tensor, Var};
use cgbridge::cge::{
    augment_view, edge_type_loss, edge_type_loss_from_logits, graph_contrastive_loss, gt_attention,
    sample_batch_pairs, stage1_loss, train_stage1, Cge, CgeDims, GtWeights, Norm, Stage1Batch, EDGE_CLASSES,
};
use cgbridge::config::CgeConfig;
use cgbridge::cpg::{extract, SourceUnit};
use cgbridge::nn::{flat, scalar, DEVICE};
use cgbridge::store::{encode_features, FeaturedGraph};
use cgbridge::synth::{extract_program, synth_corpus};
use cgbridge::Error;

fn t2(rows: &[Vec<f64>]) -> Tensor {
    let (r, c) = (rows.len(), rows[0].len());
    Tensor::from_vec(rows.concat(), (r, c), &DEVICE).unwrap()
}

fn mat(t: &Tensor) -> Vec<Vec<f64>> {
    t.to_vec2::<f64>().unwrap()
}

/// Deterministic small weights: identity plus a structured perturbation.
fn weights(d: usize, seed: f64) -> Vec<Vec<f64>> {
    (0..d)
        .map(|i| {
            (0..d)
                .map(|j| if i == j { 1.0 } else { 0.0 } + 0.05 * ((seed + (i * d + j) as f64) * 0.7).sin())
                .collect()
        })
        .collect()
}

fn gt(ws: &[Vec<Vec<f64>>; 5]) -> GtWeights {
    GtWeights {
        w_q: t2(&ws[0]),
        w_k: t2(&ws[1]),
        w_e: t2(&ws[2]),
        w_self: t2(&ws[3]),
        w_val: t2(&ws[4]),
    }
}

fn matvec(x: &[f64], w: &[Vec<f64>]) -> Vec<f64> {
    // row vector times (in, out) matrix
    (0..w[0].len()).map(|o| (0..x.len()).map(|i| x[i] * w[i][o]).sum()).collect()
}

/// Scalar-by-scalar evaluation of the layer: per head, softmax over in-edges
/// of q_i . (k_j + e_ji) / sqrt(dk), then W_self h_i + sum alpha (v_j + e_ji).
fn oracle(
    h: &[Vec<f64>],
    edges: &[(usize, usize)],
    e: &[Vec<f64>],
    ws: &[Vec<Vec<f64>>; 5],
    heads: usize,
) -> Vec<Vec<f64>> {
    let width = ws[0][0].len();
    let dk = width / heads;
    let mut out: Vec<Vec<f64>> = h.iter().map(|hi| matvec(hi, &ws[3])).collect();
    for i in 0..h.len() {
        let q = matvec(&h[i], &ws[0]);
        let inc: Vec<usize> = (0..edges.len()).filter(|&k| edges[k].1 == i).collect();
        for hd in 0..heads {
            let r = hd * dk..(hd + 1) * dk;
            let scores: Vec<f64> = inc
                .iter()
                .map(|&k| {
                    let key = matvec(&h[edges[k].0], &ws[1]);
                    let ee = matvec(&e[k], &ws[2]);
                    r.clone().map(|c| q[c] * (key[c] + ee[c])).sum::<f64>() / (dk as f64).sqrt()
                })
                .collect();
            let z: f64 = scores.iter().map(|s| s.exp()).sum();
            for (n, &k) in inc.iter().enumerate() {
                let alpha = scores[n].exp() / z;
                let v = matvec(&h[edges[k].0], &ws[4]);
                let ee = matvec(&e[k], &ws[2]);
                for c in r.clone() {
                    out[i][c] += alpha * (v[c] + ee[c]);
                }
            }
        }
    }
    out
}

#[test]
fn path_graph_matches_scalar_oracle() {
    let d = 4;
    let ws = [weights(d, 0.0), weights(d, 1.0), weights(d, 2.0), weights(d, 3.0), weights(d, 4.0)];
    let h = vec![vec![0.1, -0.2, 0.3, 0.0], vec![0.5, 0.1, -0.1, 0.2], vec![-0.3, 0.4, 0.2, -0.5]];
    let edges = [(0usize, 1usize), (1, 2), (0, 2)];
    let e = vec![vec![0.2, 0.0, 0.1, -0.1], vec![0.0, 0.3, 0.0, 0.1], vec![-0.2, 0.1, 0.1, 0.0]];
    for heads in [1, 2] {
        let src: Vec<u32> = edges.iter().map(|e| e.0 as u32).collect();
        let dst: Vec<u32> = edges.iter().map(|e| e.1 as u32).collect();
        let (got, _) = gt_attention(&t2(&h), &src, &dst, &t2(&e), &gt(&ws), heads).unwrap();
        let want = oracle(&h, &edges, &e, &ws, heads);
        for (gr, wr) in mat(&got).iter().zip(&want) {
            for (g, w) in gr.iter().zip(wr) {
                assert!((g - w).abs() < 1e-12, "heads={heads}: {g} vs {w}");
            }
        }
    }
}

#[test]
fn isolated_node_keeps_only_self_term() {
    let d = 4;
    let ws = [weights(d, 0.0), weights(d, 1.0), weights(d, 2.0), weights(d, 3.0), weights(d, 4.0)];
    let h = vec![vec![0.3, -0.1, 0.2, 0.7], vec![1.0, 2.0, 3.0, 4.0]];
    let e = vec![vec![0.5, 0.5, 0.5, 0.5]];
    // node 0 has no incoming edge; node 1 receives from node 0
    let (out, alpha) = gt_attention(&t2(&h), &[0], &[1], &t2(&e), &gt(&ws), 2).unwrap();
    for (g, w) in mat(&out)[0].iter().zip(matvec(&h[0], &ws[3])) {
        assert!((g - w).abs() < 1e-12);
    }
    // single in-neighbour: every head's coefficient is exactly 1
    assert_eq!(flat(&alpha).unwrap(), vec![1.0, 1.0]);
}

#[test]
fn attention_rows_sum_to_one_per_target() {
    let g = extract(&SourceUnit::python("t", "def f(a, b):\n    c = a + b\n    if c:\n        return a\n    return b\n").unwrap()).unwrap();
    let fg = encode_features(&g, 8);
    let cge = Cge::new(dims(8, Norm::Batch), 1).unwrap();
    let src: Vec<u32> = g.edges.iter().map(|e| e.src as u32).collect();
    let dst: Vec<u32> = g.edges.iter().map(|e| e.dst as u32).collect();
    let x = cgbridge::nn::matrix_tensor(&fg.node_features).unwrap();
    let e = cgbridge::nn::matrix_tensor(&fg.edge_features).unwrap();
    let (_, alpha) = gt_attention(&x, &src, &dst, &e, &cge.weights(0).unwrap(), 2).unwrap();
    let a = mat(&alpha);
    for node in 0..g.nodes.len() {
        for h in 0..2 {
            let s: f64 = (0..dst.len()).filter(|&k| dst[k] as usize == node).map(|k| a[k][h]).sum();
            let has_in = dst.iter().any(|&d| d as usize == node);
            if has_in {
                assert!((s - 1.0).abs() < 1e-12, "node {node} head {h}: {s}");
            }
        }
    }
}

fn dims(d: usize, norm: Norm) -> CgeDims {
    CgeDims {
        d_in: d,
        d_hidden: 8,
        d_out: 8,
        layers: 2,
        heads: 2,
        dropout: 0.1,
        norm,
    }
}

fn sample_graph() -> FeaturedGraph {
    let g = extract(&SourceUnit::python("s", "def f(xs):\n    t = 0\n    for x in xs:\n        t += x\n    return t\n").unwrap())
        .unwrap();
    encode_features(&g, 8)
}

fn permuted(fg: &FeaturedGraph, perm: &[usize]) -> FeaturedGraph {
    // perm[old] = new
    let mut out = fg.clone();
    for (old, &new) in perm.iter().enumerate() {
        out.node_features.row_mut(new).copy_from_slice(fg.node_features.row(old));
        out.graph.nodes[new] = fg.graph.nodes[old].clone();
        out.graph.nodes[new].id = new;
    }
    for e in &mut out.graph.edges {
        e.src = perm[e.src];
        e.dst = perm[e.dst];
    }
    out
}

#[test]
fn pooled_embedding_is_permutation_invariant() {
    let fg = sample_graph();
    let n = fg.graph.nodes.len();
    let perm: Vec<usize> = (0..n).map(|i| (i * 7 + 3) % n).collect();
    assert_eq!({ let mut p = perm.clone(); p.sort(); p }, (0..n).collect::<Vec<_>>());
    let pg = permuted(&fg, &perm);
    for norm in [Norm::Batch, Norm::Standardize] {
        let cge = Cge::new(dims(8, norm), 11).unwrap();
        let a = cge.encode_graph(&fg, false, 0).unwrap();
        let b = cge.encode_graph(&pg, false, 0).unwrap();
        for (x, y) in flat(&a.pooled).unwrap().iter().zip(flat(&b.pooled).unwrap()) {
            assert!((x - y).abs() < 1e-12);
        }
        let (sa, sb) = (mat(&a.node_states), mat(&b.node_states));
        for old in 0..n {
            for (x, y) in sa[old].iter().zip(&sb[perm[old]]) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn single_node_pooled_equals_state_and_eval_is_deterministic() {
    let g = extract(&SourceUnit::python("t", "x").unwrap()).unwrap();
    let mut fg = encode_features(&g, 8);
    fg.graph.nodes.truncate(1);
    fg.graph.edges.clear();
    fg.node_features.rows = 1;
    fg.node_features.data.truncate(8);
    fg.edge_features.rows = 0;
    fg.edge_features.data.clear();
    let cge = Cge::new(dims(8, Norm::Batch), 2).unwrap();
    let enc = cge.encode_graph(&fg, false, 0).unwrap();
    assert_eq!(flat(&enc.pooled).unwrap(), mat(&enc.node_states)[0]);
    let again = cge.encode_graph(&fg, false, 0).unwrap();
    assert_eq!(flat(&enc.pooled).unwrap(), flat(&again.pooled).unwrap());
    let fg = sample_graph();
    let (a, b) = (cge.encode_graph(&fg, false, 0).unwrap(), cge.encode_graph(&fg, false, 0).unwrap());
    assert_eq!(flat(&a.node_states).unwrap(), flat(&b.node_states).unwrap());
}

#[test]
fn feature_width_mismatch_is_a_shape_error() {
    let cge = Cge::new(dims(16, Norm::Batch), 2).unwrap();
    assert!(matches!(cge.encode_graph(&sample_graph(), false, 0), Err(Error::Shape(_))));
}

#[test]
fn augmentation_boundaries() {
    let fg = sample_graph();
    assert_eq!(augment_view(&fg, 0.0, 0.0, 9), fg);
    let v = augment_view(&fg, 1.0 - 1e-12, 0.0, 9);
    assert!(v.node_features.data.iter().all(|&x| x == 0.0));
    assert_eq!(v.graph.edges, fg.graph.edges);
    assert_eq!(augment_view(&fg, 0.3, 0.3, 5), augment_view(&fg, 0.3, 0.3, 5));
}

#[test]
fn edge_drop_count_is_binomial() {
    // chain of 1001 nodes -> 1000 edges
    let code: String = (0..1000).map(|i| format!("v{i} = {i}\n")).collect();
    let g = extract(&SourceUnit::python("big", code).unwrap()).unwrap();
    let mut fg = encode_features(&g, 4);
    fg.graph.edges.truncate(1000);
    fg.edge_features.rows = 1000;
    fg.edge_features.data.truncate(4000);
    // Binomial(1000, 0.05): mean 50, sd 6.892; 99% two-sided interval ~ [33, 68]
    let (n, p) = (1000.0, 0.05);
    let sd = (n * p * (1.0 - p) as f64).sqrt();
    let (lo, hi) = (n * p - 2.576 * sd, n * p + 2.576 * sd);
    let mut inside = 0;
    for seed in 0..20 {
        let dropped = 1000 - augment_view(&fg, 0.05, 0.05, seed).graph.edges.len();
        if (lo..=hi).contains(&(dropped as f64)) {
            inside += 1;
        }
    }
    assert!(inside >= 18, "only {inside}/20 seeds inside [{lo:.1}, {hi:.1}]");
}

#[test]
fn contrastive_closed_forms() {
    let z = t2(&[vec![0.7, 0.3, -0.2]]);
    assert_eq!(scalar(&graph_contrastive_loss(&z, &z, 0.3).unwrap()).unwrap(), 0.0);
    let eye = t2(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
    let l = scalar(&graph_contrastive_loss(&eye, &eye, 1.0).unwrap()).unwrap();
    assert!((l - (1.0 + (-1f64).exp()).ln()).abs() < 1e-12);
    assert!((l - 0.313262).abs() < 1e-6);
}

#[test]
fn contrastive_is_relabeling_invariant_and_rejects_zero_rows() {
    let a = t2(&[vec![0.3, 0.1, 0.5], vec![-0.2, 0.9, 0.1], vec![0.4, -0.4, 0.2]]);
    let b = t2(&[vec![0.1, 0.2, 0.4], vec![-0.3, 0.7, 0.0], vec![0.5, -0.1, 0.3]]);
    let idx = Tensor::new(&[2u32, 0, 1], &DEVICE).unwrap();
    let l1 = scalar(&graph_contrastive_loss(&a, &b, 0.3).unwrap()).unwrap();
    let l2 = scalar(
        &graph_contrastive_loss(&a.index_select(&idx, 0).unwrap(), &b.index_select(&idx, 0).unwrap(), 0.3).unwrap(),
    )
    .unwrap();
    assert!((l1 - l2).abs() < 1e-12);
    let zero = t2(&[vec![0.0, 0.0, 0.0], vec![1.0, 0.0, 0.0]]);
    assert!(matches!(
        graph_contrastive_loss(&zero, &zero, 0.3),
        Err(Error::DegenerateInput(_))
    ));
}

#[test]
fn uniform_and_one_hot_edge_heads() {
    let fg = sample_graph();
    let states = Tensor::ones((fg.graph.nodes.len(), 8), candle_core::DType::F64, &DEVICE).unwrap();
    let w = Tensor::zeros((16, EDGE_CLASSES), candle_core::DType::F64, &DEVICE).unwrap();
    let b = Tensor::zeros(EDGE_CLASSES, candle_core::DType::F64, &DEVICE).unwrap();
    let (loss, _) = edge_type_loss(&states, &fg, 0.5, 3, (&w, &b)).unwrap();
    assert!((scalar(&loss).unwrap() - 31f64.ln()).abs() < 1e-9);
    assert_eq!(EDGE_CLASSES, 31);

    let pairs = sample_batch_pairs(&[&fg], 0.5, 3).unwrap();
    let one_hot: Vec<Vec<f64>> = pairs
        .labels
        .iter()
        .map(|&l| (0..EDGE_CLASSES).map(|c| if c as u32 == l { 60.0 } else { 0.0 }).collect())
        .collect();
    let (loss, acc) = edge_type_loss_from_logits(&t2(&one_hot), &pairs.labels).unwrap();
    assert!(scalar(&loss).unwrap() < 1e-20);
    assert_eq!(acc, 1.0);
}

#[test]
fn negative_pairs_are_never_edges() {
    let corpus = synth_corpus(30, 8);
    for (i, p) in corpus.iter().enumerate() {
        let fg = encode_features(&extract_program(p).unwrap(), 4);
        let pairs = sample_batch_pairs(&[&fg], 0.5, i as u64).unwrap();
        let m = fg.graph.edges.len();
        assert_eq!(pairs.len(), m + (0.5 * m as f64).ceil() as usize);
        for k in m..pairs.len() {
            let (s, d) = (pairs.src[k] as usize, pairs.dst[k] as usize);
            assert_ne!(s, d);
            assert!(!fg.graph.edges.iter().any(|e| e.src == s && e.dst == d), "({s},{d}) is an edge");
            assert_eq!(pairs.labels[k], 30);
        }
    }
}

#[test]
fn negatives_need_two_nodes() {
    let mut fg = sample_graph();
    fg.graph.nodes.truncate(1);
    fg.graph.edges = vec![cgbridge::cpg::CpgEdge::new(0, 0, cgbridge::cpg::EdgeAttr::FlowsTo)];
    fg.edge_features.rows = 1;
    fg.edge_features.data.truncate(8);
    let states = Tensor::ones((1, 8), candle_core::DType::F64, &DEVICE).unwrap();
    let w = Tensor::zeros((16, EDGE_CLASSES), candle_core::DType::F64, &DEVICE).unwrap();
    let b = Tensor::zeros(EDGE_CLASSES, candle_core::DType::F64, &DEVICE).unwrap();
    assert!(matches!(
        edge_type_loss(&states, &fg, 0.5, 0, (&w, &b)),
        Err(Error::DegenerateInput(_))
    ));
    assert!(edge_type_loss(&states, &fg, 0.0, 0, (&w, &b)).is_ok());
}

fn tiny_cfg() -> CgeConfig {
    CgeConfig {
        input: 8,
        hidden: 8,
        output: 8,
        heads: 2,
        batch_size: 4,
        lr: 1e-2,
        epochs: 1,
        ..CgeConfig::default()
    }
}

fn tiny_corpus(n: usize) -> Vec<FeaturedGraph> {
    synth_corpus(n, 1).iter().map(|p| encode_features(&extract_program(p).unwrap(), 8)).collect()
}

#[test]
fn stage1_smoke_changes_parameters() {
    let corpus = tiny_corpus(8);
    let cfg = tiny_cfg();
    let (cge, report) = train_stage1(&corpus, &cfg, 3).unwrap();
    assert_eq!(report.trace.len(), 1);
    assert!(report.trace[0].loss.is_finite());
    let fresh = Cge::new(cfg.dims(), 3).unwrap();
    assert_ne!(cge.params.checksum().unwrap(), fresh.params.checksum().unwrap());
}

#[test]
fn loss_decomposes_and_decouples() {
    let corpus = tiny_corpus(4);
    let mut cfg = tiny_cfg();
    let cge = Cge::new(cfg.dims(), 5).unwrap();
    let batch = Stage1Batch {
        graphs: corpus.iter().collect(),
        seed: 17,
    };
    let l = stage1_loss(&cge, &batch, &cfg, false).unwrap();
    let (t, c, e) = (scalar(&l.total).unwrap(), scalar(&l.contrastive).unwrap(), scalar(&l.edge).unwrap());
    assert!((t - (0.6 * c + 0.4 * e)).abs() < 1e-12);

    cfg.lambda_cl = 1.0;
    cfg.lambda_edge = 0.0;
    let l = stage1_loss(&cge, &batch, &cfg, true).unwrap();
    let grads = l.total.backward().unwrap();
    for name in ["edge_head.w", "edge_head.b"] {
        let g = grads.get(cge.params.var(name).unwrap().as_tensor());
        if let Some(g) = g {
            assert!(flat(g).unwrap().iter().all(|&x| x == 0.0), "{name} has gradient");
        }
    }
    let enc: &Var = cge.params.var("cge.l0.w_q").unwrap();
    assert!(flat(grads.get(enc.as_tensor()).unwrap()).unwrap().iter().any(|&x| x != 0.0));
}

#[test]
fn training_step_is_deterministic() {
    let corpus = tiny_corpus(6);
    let cfg = tiny_cfg();
    let (a, ra) = train_stage1(&corpus, &cfg, 9).unwrap();
    let (b, rb) = train_stage1(&corpus, &cfg, 9).unwrap();
    assert_eq!(ra, rb);
    assert_eq!(a.params.checksum().unwrap(), b.params.checksum().unwrap());
}
