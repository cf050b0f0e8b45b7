//! Edge-conditioned graph transformer encoder and its self-supervised
//! pretraining objectives.

mod train;

use std::collections::HashSet;

use candle_core::{Tensor, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use train::{evaluate_stage1, stage1_loss, train_stage1, Stage1Batch, Stage1Epoch, Stage1Loss, Stage1Report};

use crate::cpg::taxonomy::{NO_EDGE_CLASS, NUM_EDGE_ATTRS};
use crate::error::{Error, Result};
use crate::nn::{self, ParamStore, DEVICE, DTYPE};
use crate::store::{FeaturedGraph, Matrix};

pub const EDGE_CLASSES: usize = NUM_EDGE_ATTRS + 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Norm {
    /// Batch normalization; eval mode uses running statistics.
    Batch,
    /// Per-node standardization across features. Stateless.
    Standardize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CgeDims {
    pub d_in: usize,
    pub d_hidden: usize,
    pub d_out: usize,
    pub layers: usize,
    pub heads: usize,
    pub dropout: f64,
    pub norm: Norm,
}

impl CgeDims {
    pub fn layer_io(&self, l: usize) -> (usize, usize) {
        let din = if l == 0 { self.d_in } else { self.d_hidden };
        let dout = if l + 1 == self.layers { self.d_out } else { self.d_hidden };
        (din, dout)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || self.d_in == 0 {
            return Err(Error::Config("encoder needs at least one layer, head and input dim".into()));
        }
        for l in 0..self.layers {
            let (_, dout) = self.layer_io(l);
            if dout % self.heads != 0 {
                return Err(Error::Config(format!(
                    "layer {l} width {dout} is not divisible by {} heads",
                    self.heads
                )));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Weights of one graph transformer layer, each stored as (in, out).
pub struct GtWeights {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_e: Tensor,
    pub w_self: Tensor,
    pub w_val: Tensor,
}

/// One graph transformer layer without normalization or activation.
/// Messages flow along edges `src -> dst`; returns the new node matrix and
/// the attention coefficients (|E| x heads).
pub fn gt_attention(
    h: &Tensor,
    src: &[u32],
    dst: &[u32],
    e: &Tensor,
    w: &GtWeights,
    heads: usize,
) -> Result<(Tensor, Tensor)> {
    let n = h.dim(0)?;
    let width = w.w_q.dim(1)?;
    if width % heads != 0 {
        return Err(Error::Shape(format!("width {width} not divisible by {heads} heads")));
    }
    if src.len() != dst.len() || e.dim(0)? != src.len() {
        return Err(Error::Shape(format!(
            "{} sources, {} targets, {} edge feature rows",
            src.len(),
            dst.len(),
            e.dim(0)?
        )));
    }
    if h.dim(1)? != w.w_q.dim(0)? || e.dim(1)? != w.w_e.dim(0)? {
        return Err(Error::Shape(format!(
            "node width {} / edge width {} do not match layer inputs {} / {}",
            h.dim(1)?,
            e.dim(1)?,
            w.w_q.dim(0)?,
            w.w_e.dim(0)?
        )));
    }
    let self_part = h.matmul(&w.w_self)?;
    let m = src.len();
    if m == 0 {
        return Ok((self_part, Tensor::zeros((0, heads), DTYPE, &DEVICE)?));
    }
    let dk = width / heads;
    let src_t = nn::ids_tensor(src)?;
    let dst_t = nn::ids_tensor(dst)?;
    let q = h.matmul(&w.w_q)?.index_select(&dst_t, 0)?.reshape((m, heads, dk))?;
    let ee = e.matmul(&w.w_e)?;
    let k = h.matmul(&w.w_k)?.index_select(&src_t, 0)?.add(&ee)?.reshape((m, heads, dk))?;
    let scores = (q.mul(&k)?.sum(D::Minus1)? / (dk as f64).sqrt())?;

    // Softmax over each node's incoming edges. The per-target maximum is a
    // constant shift and carries no gradient.
    let raw = nn::flat(&scores)?;
    let mut maxes = vec![f64::NEG_INFINITY; n * heads];
    for (i, &t) in dst.iter().enumerate() {
        for hh in 0..heads {
            let slot = &mut maxes[t as usize * heads + hh];
            *slot = slot.max(raw[i * heads + hh]);
        }
    }
    let shift: Vec<f64> = dst
        .iter()
        .flat_map(|&t| (0..heads).map(move |hh| (t as usize, hh)))
        .map(|(t, hh)| maxes[t * heads + hh])
        .collect();
    let ex = scores.sub(&Tensor::from_vec(shift, (m, heads), &DEVICE)?)?.exp()?;
    let denom = Tensor::zeros((n, heads), DTYPE, &DEVICE)?.index_add(&dst_t, &ex, 0)?;
    let alpha = ex.div(&denom.index_select(&dst_t, 0)?)?;

    let val = h.matmul(&w.w_val)?.index_select(&src_t, 0)?.add(&ee)?.reshape((m, heads, dk))?;
    let msg = val.broadcast_mul(&alpha.unsqueeze(2)?)?.reshape((m, width))?;
    let agg = Tensor::zeros((n, width), DTYPE, &DEVICE)?.index_add(&dst_t, &msg, 0)?;
    Ok((self_part.add(&agg)?, alpha))
}

/// Disjoint union of several featured graphs.
pub struct GraphBatch {
    pub x: Tensor,
    pub e: Tensor,
    pub src: Vec<u32>,
    pub dst: Vec<u32>,
    pub node_graph: Vec<u32>,
    pub node_counts: Vec<usize>,
}

impl GraphBatch {
    pub fn new(graphs: &[&FeaturedGraph]) -> Result<Self> {
        let dim = graphs.first().map_or(0, |g| g.feature_dim);
        let mut nodes = Matrix::zeros(0, dim);
        let mut edges = Matrix::zeros(0, dim);
        let (mut src, mut dst, mut node_graph, mut node_counts) = (vec![], vec![], vec![], vec![]);
        let mut offset = 0u32;
        for (gi, g) in graphs.iter().enumerate() {
            if g.feature_dim != dim {
                return Err(Error::Shape(format!(
                    "graph `{}` has feature dim {}, batch uses {dim}",
                    g.graph.source_id, g.feature_dim
                )));
            }
            let n = g.graph.nodes.len();
            nodes.data.extend_from_slice(&g.node_features.data);
            nodes.rows += n;
            edges.data.extend_from_slice(&g.edge_features.data);
            edges.rows += g.graph.edges.len();
            for e in &g.graph.edges {
                src.push(offset + e.src as u32);
                dst.push(offset + e.dst as u32);
            }
            node_graph.extend(std::iter::repeat(gi as u32).take(n));
            node_counts.push(n);
            offset += n as u32;
        }
        Ok(GraphBatch {
            x: nn::matrix_tensor(&nodes)?,
            e: nn::matrix_tensor(&edges)?,
            src,
            dst,
            node_graph,
            node_counts,
        })
    }

    pub fn num_graphs(&self) -> usize {
        self.node_counts.len()
    }

    /// Mean of node rows per graph (graphs x d).
    pub fn mean_pool(&self, h: &Tensor) -> Result<Tensor> {
        let g = self.num_graphs();
        let d = h.dim(1)?;
        let sums = Tensor::zeros((g, d), DTYPE, &DEVICE)?.index_add(&nn::ids_tensor(&self.node_graph)?, h, 0)?;
        if let Some(i) = self.node_counts.iter().position(|&c| c == 0) {
            return Err(Error::DegenerateInput(format!("graph {i} in batch has no nodes")));
        }
        let counts: Vec<f64> = self.node_counts.iter().map(|&c| c as f64).collect();
        Ok(sums.broadcast_div(&Tensor::from_vec(counts, (g, 1), &DEVICE)?)?)
    }
}

#[derive(Debug, Clone)]
pub struct GraphEncoding {
    pub node_states: Tensor,
    pub pooled: Tensor,
}

/// How a forward pass treats dropout and normalization statistics.
pub enum Mode<'a> {
    Eval,
    Train { rng: &'a mut ChaCha8Rng },
}

/// Per-layer batch statistics from a training pass.
pub type BatchStats = Vec<Option<(Tensor, Tensor)>>;

pub struct Cge {
    pub dims: CgeDims,
    pub params: ParamStore,
    pub bn_momentum: f64,
}

const BN_EPS: f64 = 1e-5;

impl Cge {
    /// Scaled-normal init (std = 1/sqrt(fan_in)); normalization starts at
    /// the identity.
    pub fn new(dims: CgeDims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        for l in 0..dims.layers {
            let (din, dout) = dims.layer_io(l);
            let std = 1.0 / (din as f64).sqrt();
            for w in ["w_q", "w_k", "w_self", "w_val"] {
                p.normal(&format!("cge.l{l}.{w}"), &[din, dout], std, &mut rng)?;
            }
            p.normal(&format!("cge.l{l}.w_e"), &[dims.d_in, dout], 1.0 / (dims.d_in as f64).sqrt(), &mut rng)?;
            if l + 1 < dims.layers {
                p.ones(&format!("cge.l{l}.norm.gamma"), &[dout])?;
                p.zeros(&format!("cge.l{l}.norm.beta"), &[dout])?;
                p.set_buffer(&format!("cge.l{l}.norm.mean"), Tensor::zeros(dout, DTYPE, &DEVICE)?);
                p.set_buffer(&format!("cge.l{l}.norm.var"), Tensor::ones(dout, DTYPE, &DEVICE)?);
            }
        }
        let pair = 2 * dims.d_out;
        p.normal("edge_head.w", &[pair, EDGE_CLASSES], 1.0 / (pair as f64).sqrt(), &mut rng)?;
        p.zeros("edge_head.b", &[EDGE_CLASSES])?;
        Ok(Cge {
            dims,
            params: p,
            bn_momentum: 0.1,
        })
    }

    pub fn from_params(dims: CgeDims, params: ParamStore) -> Result<Self> {
        dims.validate()?;
        let cge = Cge {
            dims,
            params,
            bn_momentum: 0.1,
        };
        for l in 0..cge.dims.layers {
            let (din, dout) = cge.dims.layer_io(l);
            let w = cge.weights(l)?;
            if w.w_q.dims() != [din, dout] || w.w_e.dims() != [cge.dims.d_in, dout] {
                return Err(Error::Shape(format!("checkpoint layer {l} does not match encoder dims")));
            }
        }
        Ok(cge)
    }

    pub fn weights(&self, l: usize) -> Result<GtWeights> {
        let g = |n: &str| self.params.get(&format!("cge.l{l}.{n}"));
        Ok(GtWeights {
            w_q: g("w_q")?,
            w_k: g("w_k")?,
            w_e: g("w_e")?,
            w_self: g("w_self")?,
            w_val: g("w_val")?,
        })
    }

    /// Encoder parameters only (no edge-type head).
    pub fn encoder_vars(&self) -> Vec<candle_core::Var> {
        self.params.vars_with_prefix("cge.")
    }

    fn normalize(&self, l: usize, h: &Tensor, train: bool, stats: &mut BatchStats) -> Result<Tensor> {
        let gamma = self.params.get(&format!("cge.l{l}.norm.gamma"))?;
        let beta = self.params.get(&format!("cge.l{l}.norm.beta"))?;
        match self.dims.norm {
            Norm::Standardize => nn::layer_norm(h, &gamma, &beta, BN_EPS),
            Norm::Batch => {
                let (mean, var) = if train {
                    let mean = h.mean_keepdim(0)?;
                    let var = h.broadcast_sub(&mean)?.sqr()?.mean_keepdim(0)?;
                    stats[l] = Some((mean.squeeze(0)?.detach(), var.squeeze(0)?.detach()));
                    (mean, var)
                } else {
                    (
                        self.params.get(&format!("cge.l{l}.norm.mean"))?.unsqueeze(0)?,
                        self.params.get(&format!("cge.l{l}.norm.var"))?.unsqueeze(0)?,
                    )
                };
                let normed = h.broadcast_sub(&mean)?.broadcast_div(&(var + BN_EPS)?.sqrt()?)?;
                Ok(normed.broadcast_mul(&gamma)?.broadcast_add(&beta)?)
            }
        }
    }

    /// Node states of a batch after all layers, plus batch statistics for
    /// the running averages when training.
    pub fn forward(&self, batch: &GraphBatch, mut mode: Mode<'_>) -> Result<(Tensor, BatchStats)> {
        if batch.x.dim(1)? != self.dims.d_in {
            return Err(Error::Shape(format!(
                "features are {}-dimensional, encoder expects {}",
                batch.x.dim(1)?,
                self.dims.d_in
            )));
        }
        let mut stats: BatchStats = vec![None; self.dims.layers];
        let mut h = batch.x.clone();
        for l in 0..self.dims.layers {
            let (out, _) = gt_attention(&h, &batch.src, &batch.dst, &batch.e, &self.weights(l)?, self.dims.heads)?;
            h = out;
            if l + 1 < self.dims.layers {
                let train = matches!(mode, Mode::Train { .. });
                h = self.normalize(l, &h, train, &mut stats)?.relu()?;
                if let Mode::Train { rng } = &mut mode {
                    h = nn::dropout(&h, self.dims.dropout, rng)?;
                }
            }
        }
        Ok((h, stats))
    }

    /// Fold training batch statistics into the running averages.
    pub fn update_running_stats(&mut self, stats: &BatchStats) -> Result<()> {
        for (l, s) in stats.iter().enumerate() {
            if let Some((mean, var)) = s {
                let m = self.bn_momentum;
                for (name, new) in [("mean", mean), ("var", var)] {
                    let key = format!("cge.l{l}.norm.{name}");
                    let old = self.params.get(&key)?;
                    let upd = ((old * (1.0 - m))? + (new * m)?)?;
                    self.params.set_buffer(&key, upd);
                }
            }
        }
        Ok(())
    }

    pub fn encode_batch(&self, graphs: &[&FeaturedGraph], mode: Mode<'_>) -> Result<(GraphBatch, GraphEncoding)> {
        let batch = GraphBatch::new(graphs)?;
        let (node_states, _) = self.forward(&batch, mode)?;
        let pooled = batch.mean_pool(&node_states)?;
        Ok((batch, GraphEncoding { node_states, pooled }))
    }

    /// Encode one graph. With `train`, dropout masks come from `seed`;
    /// batch statistics are used but running averages are left untouched.
    pub fn encode_graph(&self, fg: &FeaturedGraph, train: bool, seed: u64) -> Result<GraphEncoding> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mode = if train { Mode::Train { rng: &mut rng } } else { Mode::Eval };
        let (_, enc) = self.encode_batch(&[fg], mode)?;
        Ok(GraphEncoding {
            node_states: enc.node_states,
            pooled: enc.pooled.squeeze(0)?,
        })
    }
}

/// Zero node-feature rows and drop edges independently at the given rates.
pub fn augment_view(fg: &FeaturedGraph, node_drop_rate: f64, edge_drop_rate: f64, seed: u64) -> FeaturedGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = fg.clone();
    for i in 0..out.node_features.rows {
        if rng.gen::<f64>() < node_drop_rate {
            out.node_features.row_mut(i).fill(0.0);
        }
    }
    let keep: Vec<bool> = (0..fg.graph.edges.len())
        .map(|_| rng.gen::<f64>() >= edge_drop_rate)
        .collect();
    out.graph.edges = fg
        .graph
        .edges
        .iter()
        .zip(&keep)
        .filter(|(_, &k)| k)
        .map(|(e, _)| *e)
        .collect();
    let mut ef = Matrix::zeros(0, fg.edge_features.cols);
    for (i, &k) in keep.iter().enumerate() {
        if k {
            ef.data.extend_from_slice(fg.edge_features.row(i));
            ef.rows += 1;
        }
    }
    out.edge_features = ef;
    out
}

/// Symmetric InfoNCE over cosine similarities of row-aligned pairs.
pub fn graph_contrastive_loss(z1: &Tensor, z2: &Tensor, temperature: f64) -> Result<Tensor> {
    let (m, d) = z1.dims2()?;
    if z2.dims2()? != (m, d) || m == 0 {
        return Err(Error::Shape(format!("views are {:?} and {:?}", z1.dims(), z2.dims())));
    }
    if temperature <= 0.0 {
        return Err(Error::Config(format!("temperature {temperature} must be positive")));
    }
    let a = nn::l2_normalize_rows(z1, "first view")?;
    let b = nn::l2_normalize_rows(z2, "second view")?;
    let s = (a.matmul(&b.t()?)? / temperature)?;
    let labels: Vec<u32> = (0..m as u32).collect();
    let forward = nn::cross_entropy(&s, &labels)?;
    let backward = nn::cross_entropy(&s.t()?.contiguous()?, &labels)?;
    Ok(((forward + backward)? * 0.5)?)
}

/// Node pairs for edge-type prediction: every real edge labelled by its
/// attribute, plus sampled non-adjacent ordered pairs labelled NO_EDGE.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EdgeSamples {
    pub src: Vec<u32>,
    pub dst: Vec<u32>,
    pub labels: Vec<u32>,
}

impl EdgeSamples {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn extend(&mut self, other: EdgeSamples, offset: u32) {
        self.src.extend(other.src.iter().map(|s| s + offset));
        self.dst.extend(other.dst.iter().map(|d| d + offset));
        self.labels.extend(other.labels);
    }
}

const MAX_REJECTIONS: usize = 64;

/// Real edges of one graph plus `ceil(neg_ratio * |E|)` negatives drawn
/// uniformly from ordered pairs (u != v) with no edge u -> v of any class.
pub fn sample_edge_pairs(fg: &FeaturedGraph, neg_ratio: f64, rng: &mut ChaCha8Rng) -> Result<EdgeSamples> {
    let n = fg.graph.nodes.len();
    let edges = &fg.graph.edges;
    let mut out = EdgeSamples::default();
    for e in edges {
        out.src.push(e.src as u32);
        out.dst.push(e.dst as u32);
        out.labels.push(e.attr.index() as u32);
    }
    let want = (neg_ratio * edges.len() as f64).ceil() as usize;
    if want == 0 {
        return Ok(out);
    }
    if n < 2 {
        return Err(Error::DegenerateInput(format!(
            "graph `{}` has {n} node(s); negative pairs need two",
            fg.graph.source_id
        )));
    }
    let adjacent: HashSet<(usize, usize)> = edges.iter().map(|e| (e.src, e.dst)).collect();
    let free = n * (n - 1) - adjacent.iter().filter(|(s, d)| s != d).count();
    if free == 0 {
        return Err(Error::DegenerateInput(format!(
            "graph `{}` has no non-adjacent pair",
            fg.graph.source_id
        )));
    }
    for _ in 0..want {
        let mut pick = None;
        for _ in 0..MAX_REJECTIONS {
            let (u, v) = (rng.gen_range(0..n), rng.gen_range(0..n));
            if u != v && !adjacent.contains(&(u, v)) {
                pick = Some((u, v));
                break;
            }
        }
        // Dense graphs: fall back to an exact uniform draw over free pairs.
        let (u, v) = match pick {
            Some(p) => p,
            None => {
                let k = rng.gen_range(0..free);
                (0..n)
                    .flat_map(|u| (0..n).map(move |v| (u, v)))
                    .filter(|&(u, v)| u != v && !adjacent.contains(&(u, v)))
                    .nth(k)
                    .unwrap()
            }
        };
        out.src.push(u as u32);
        out.dst.push(v as u32);
        out.labels.push(NO_EDGE_CLASS as u32);
    }
    Ok(out)
}

pub fn sample_batch_pairs(graphs: &[&FeaturedGraph], neg_ratio: f64, seed: u64) -> Result<EdgeSamples> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = EdgeSamples::default();
    let mut offset = 0;
    for g in graphs {
        out.extend(sample_edge_pairs(g, neg_ratio, &mut rng)?, offset);
        offset += g.graph.nodes.len() as u32;
    }
    Ok(out)
}

/// Classifier logits over `[h_src ; h_dst]` (pairs x EDGE_CLASSES).
pub fn edge_type_logits(node_states: &Tensor, pairs: &EdgeSamples, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let hs = node_states.index_select(&nn::ids_tensor(&pairs.src)?, 0)?;
    let hd = node_states.index_select(&nn::ids_tensor(&pairs.dst)?, 0)?;
    nn::linear(&Tensor::cat(&[hs, hd], 1)?, w, Some(b))
}

/// Mean cross-entropy and accuracy of edge-type logits.
pub fn edge_type_loss_from_logits(logits: &Tensor, labels: &[u32]) -> Result<(Tensor, f64)> {
    if labels.is_empty() {
        return Err(Error::DegenerateInput("no edge pairs to classify".into()));
    }
    let loss = nn::cross_entropy(logits, labels)?;
    let pred = logits.argmax(D::Minus1)?.to_vec1::<u32>()?;
    let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok((loss, hits as f64 / labels.len() as f64))
}

/// Edge-type prediction loss and accuracy for one graph's node states.
pub fn edge_type_loss(
    node_states: &Tensor,
    fg: &FeaturedGraph,
    neg_ratio: f64,
    seed: u64,
    head: (&Tensor, &Tensor),
) -> Result<(Tensor, f64)> {
    let pairs = sample_batch_pairs(&[fg], neg_ratio, seed)?;
    let logits = edge_type_logits(node_states, &pairs, head.0, head.1)?;
    edge_type_loss_from_logits(&logits, &pairs.labels)
}
