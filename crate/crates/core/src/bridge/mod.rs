//! Query-token bridge between graph encodings and code text, and the three
//! alignment objectives (contrastive, matching, grounded generation).

pub mod train;

use candle_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cge::GraphEncoding;
use crate::config::BridgeConfig;
use crate::error::{Error, Result};
use crate::nn::{self, ParamStore};

pub const CLS: u32 = 0;
pub const PAD: u32 = 1;
pub const BOS: u32 = 2;
pub const EOS: u32 = 3;
const BYTE_OFFSET: u32 = 4;
/// 256 byte tokens plus the four specials.
pub const VOCAB: usize = 256 + BYTE_OFFSET as usize;

pub fn byte_ids(text: &str) -> Vec<u32> {
    text.bytes().map(|b| b as u32 + BYTE_OFFSET).collect()
}

/// `[CLS]` followed by one id per UTF-8 byte, truncated to `max_len` ids.
pub fn tokenize_code(code: &str, max_len: usize) -> Vec<u32> {
    let mut ids = vec![CLS];
    ids.extend(byte_ids(code));
    ids.truncate(max_len.max(1));
    ids
}

/// Drops special ids and decodes the remaining bytes.
pub fn detokenize(ids: &[u32]) -> String {
    let bytes: Vec<u8> = ids
        .iter()
        .filter(|&&i| (BYTE_OFFSET..VOCAB as u32).contains(&i))
        .map(|&i| (i - BYTE_OFFSET) as u8)
        .collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BridgeDims {
    pub queries: usize,
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub ffn: usize,
    pub cross_freq: usize,
    pub max_len: usize,
    /// Width of the graph node states attended by cross-attention.
    pub d_graph: usize,
    /// Width of the soft prompt handed to the decoder.
    pub d_llm: usize,
}

impl BridgeDims {
    pub fn new(cfg: &BridgeConfig, d_graph: usize, d_llm: usize) -> Self {
        BridgeDims {
            queries: cfg.queries,
            layers: cfg.layers,
            d_model: cfg.d_model,
            heads: cfg.heads,
            ffn: cfg.ffn,
            cross_freq: cfg.cross_freq,
            max_len: cfg.max_len,
            d_graph,
            d_llm,
        }
    }

    pub fn is_cross_layer(&self, l: usize) -> bool {
        l % self.cross_freq == 0
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Shape(m));
        if self.queries == 0 || self.layers == 0 || self.ffn == 0 || self.max_len < 2 {
            return bad(format!("degenerate bridge dims {self:?}"));
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return bad(format!("d_model {} not divisible by {} heads", self.d_model, self.heads));
        }
        if self.cross_freq == 0 {
            return bad("cross-attention frequency must be at least 1".into());
        }
        Ok(())
    }
}

/// `B_Q` and the final text states of a fused pass.
#[derive(Debug, Clone)]
pub struct BridgeOutput {
    pub b_q: Tensor,
    pub h_c: Tensor,
}

/// Which rows may see which in the shared self-attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Visibility {
    Full,
    /// Queries see queries; text sees all queries and earlier text.
    Generative,
}

pub struct Bridge {
    pub dims: BridgeDims,
    pub params: ParamStore,
}

/// Graph keys and values for cross-attention: node states with the pooled
/// vector appended as one extra row.
pub fn graph_memory(enc: &GraphEncoding) -> Result<Tensor> {
    let pooled = enc.pooled.reshape((1, ()))?;
    Ok(Tensor::cat(&[&enc.node_states, &pooled], 0)?)
}

impl Bridge {
    /// Scaled-normal initialization: input projections draw from
    /// N(0, 1/fan_in), output projections of residual branches are further
    /// scaled by 1/sqrt(2 L). Biases start at zero, norms at identity.
    pub fn new(dims: BridgeDims, temp_init: f64, seed: u64) -> Result<Self> {
        dims.validate()?;
        if !(temp_init > 0.0) {
            return Err(Error::Config(format!("bridge temperature must be positive, got {temp_init}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let (d, f) = (dims.d_model, dims.ffn);
        let out_gain = 1.0 / (2.0 * dims.layers as f64).sqrt();
        let std = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();

        p.normal("bridge.query", &[dims.queries, d], 1.0, &mut rng)?;
        p.normal("bridge.tok_emb", &[VOCAB, d], 1.0, &mut rng)?;
        p.normal("bridge.pos_emb", &[dims.max_len, d], 0.1, &mut rng)?;
        for l in 0..dims.layers {
            let mut block = |name: &str, din: usize, dout: usize, gain: f64, rng: &mut ChaCha8Rng| -> Result<()> {
                p.normal(&format!("bridge.l{l}.{name}.w"), &[din, dout], std(din) * gain, rng)?;
                p.zeros(&format!("bridge.l{l}.{name}.b"), &[dout])
            };
            block("sa.q", d, d, 1.0, &mut rng)?;
            block("sa.k", d, d, 1.0, &mut rng)?;
            block("sa.v", d, d, 1.0, &mut rng)?;
            block("sa.o", d, d, out_gain, &mut rng)?;
            if dims.is_cross_layer(l) {
                block("ca.q", d, d, 1.0, &mut rng)?;
                block("ca.k", dims.d_graph, d, 1.0, &mut rng)?;
                block("ca.v", dims.d_graph, d, 1.0, &mut rng)?;
                block("ca.o", d, d, out_gain, &mut rng)?;
            }
            for stream in ["ffn_q", "ffn_c"] {
                block(&format!("{stream}.up"), d, f, 1.0, &mut rng)?;
                block(&format!("{stream}.down"), f, d, out_gain, &mut rng)?;
            }
            let mut norms = vec!["ln_sa", "ln_ffn_q", "ln_ffn_c"];
            if dims.is_cross_layer(l) {
                norms.push("ln_ca");
            }
            for n in norms {
                p.ones(&format!("bridge.l{l}.{n}.g"), &[d])?;
                p.zeros(&format!("bridge.l{l}.{n}.b"), &[d])?;
            }
        }
        for n in ["ln_q", "ln_c"] {
            p.ones(&format!("bridge.{n}.g"), &[d])?;
            p.zeros(&format!("bridge.{n}.b"), &[d])?;
        }
        p.insert("bridge.log_tau", Tensor::new(&[temp_init.ln()], &nn::DEVICE)?)?;
        p.normal("bridge.gtm.up.w", &[2 * d, d], std(2 * d), &mut rng)?;
        p.zeros("bridge.gtm.up.b", &[d])?;
        p.normal("bridge.gtm.out.w", &[d, 1], std(d), &mut rng)?;
        p.zeros("bridge.gtm.out.b", &[1])?;
        p.normal("bridge.lm.w", &[d, VOCAB], std(d), &mut rng)?;
        p.zeros("bridge.lm.b", &[VOCAB])?;
        p.normal("bridge.proj.w", &[d, dims.d_llm], std(d), &mut rng)?;
        Ok(Bridge { dims, params: p })
    }

    /// Wraps loaded parameters after checking them against a fresh layout.
    pub fn from_params(dims: BridgeDims, params: ParamStore) -> Result<Self> {
        let reference = Bridge::new(dims, 1.0, 0)?;
        for (name, var) in reference.params.named_vars() {
            let got = params
                .var(name)
                .ok_or_else(|| Error::Shape(format!("checkpoint lacks `{name}`")))?;
            if got.dims() != var.dims() {
                return Err(Error::Shape(format!(
                    "`{name}` has shape {:?}, expected {:?}",
                    got.dims(),
                    var.dims()
                )));
            }
        }
        Ok(Bridge { dims, params })
    }

    fn p(&self, name: &str) -> Result<Tensor> {
        self.params.get(&format!("bridge.{name}"))
    }

    fn lin(&self, prefix: &str, x: &Tensor) -> Result<Tensor> {
        nn::linear(x, &self.p(&format!("{prefix}.w"))?, Some(&self.p(&format!("{prefix}.b"))?))
    }

    fn ln(&self, prefix: &str, x: &Tensor) -> Result<Tensor> {
        nn::layer_norm(x, &self.p(&format!("{prefix}.g"))?, &self.p(&format!("{prefix}.b"))?, 1e-5)
    }

    pub fn tau(&self) -> Result<Tensor> {
        Ok(self.p("log_tau")?.exp()?.reshape(())?)
    }

    fn check_tokens(&self, ids: &[u32]) -> Result<()> {
        if ids.is_empty() || ids.len() > self.dims.max_len {
            return Err(Error::Shape(format!(
                "token sequence of length {} outside 1..={}",
                ids.len(),
                self.dims.max_len
            )));
        }
        if let Some(bad) = ids.iter().find(|&&i| i as usize >= VOCAB) {
            return Err(Error::Shape(format!("token id {bad} outside the vocabulary")));
        }
        Ok(())
    }

    fn check_memory(&self, memory: &Tensor) -> Result<()> {
        let (_, w) = memory.dims2()?;
        if w != self.dims.d_graph {
            return Err(Error::Shape(format!("graph states have width {w}, expected {}", self.dims.d_graph)));
        }
        Ok(())
    }

    fn embed(&self, ids: &[u32]) -> Result<Tensor> {
        self.check_tokens(ids)?;
        let tok = self.p("tok_emb")?.index_select(&nn::ids_tensor(ids)?, 0)?;
        let pos = self.p("pos_emb")?.narrow(0, 0, ids.len())?;
        Ok((tok + pos)?)
    }

    fn self_attention(&self, l: usize, x: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
        let h = self.ln(&format!("l{l}.ln_sa"), x)?;
        let pre = format!("l{l}.sa");
        let att = nn::attend(
            &self.lin(&format!("{pre}.q"), &h)?,
            &self.lin(&format!("{pre}.k"), &h)?,
            &self.lin(&format!("{pre}.v"), &h)?,
            self.dims.heads,
            mask,
        )?;
        Ok((x + self.lin(&format!("{pre}.o"), &att)?)?)
    }

    fn cross_attention(&self, l: usize, q: &Tensor, memory: &Tensor) -> Result<Tensor> {
        let h = self.ln(&format!("l{l}.ln_ca"), q)?;
        let pre = format!("l{l}.ca");
        let att = nn::attend(
            &self.lin(&format!("{pre}.q"), &h)?,
            &self.lin(&format!("{pre}.k"), memory)?,
            &self.lin(&format!("{pre}.v"), memory)?,
            self.dims.heads,
            None,
        )?;
        Ok((q + self.lin(&format!("{pre}.o"), &att)?)?)
    }

    fn ffn(&self, l: usize, stream: &str, x: &Tensor) -> Result<Tensor> {
        let h = self.ln(&format!("l{l}.ln_{stream}"), x)?;
        let up = self.lin(&format!("l{l}.{stream}.up"), &h)?.gelu()?;
        Ok((x + self.lin(&format!("l{l}.{stream}.down"), &up)?)?)
    }

    /// The layer stack over an optional query stream (which requires graph
    /// memory) and an optional text stream.
    fn run(&self, memory: Option<&Tensor>, text: Option<Tensor>, vis: Visibility) -> Result<(Option<Tensor>, Option<Tensor>)> {
        let mut q = match memory {
            Some(m) => {
                self.check_memory(m)?;
                Some(self.p("query")?)
            }
            None => None,
        };
        let mut x = text;
        let nq = if q.is_some() { self.dims.queries } else { 0 };
        let nt = x.as_ref().map(|x| x.dim(0)).transpose()?.unwrap_or(0);
        let mask = match vis {
            Visibility::Generative if nq > 0 && nt > 0 => {
                Some(nn::mask(nq + nt, nq + nt, |i, j| j < nq || (i >= nq && j <= i))?)
            }
            _ => None,
        };
        for l in 0..self.dims.layers {
            let z = match (&q, &x) {
                (Some(q), Some(x)) => Tensor::cat(&[q, x], 0)?,
                (Some(q), None) => q.clone(),
                (None, Some(x)) => x.clone(),
                (None, None) => return Err(Error::Shape("bridge pass without any stream".into())),
            };
            let z = self.self_attention(l, &z, mask.as_ref())?;
            if q.is_some() {
                let mut qs = z.narrow(0, 0, nq)?;
                if let (true, Some(m)) = (self.dims.is_cross_layer(l), memory) {
                    qs = self.cross_attention(l, &qs, m)?;
                }
                q = Some(self.ffn(l, "ffn_q", &qs)?);
            }
            if x.is_some() {
                x = Some(self.ffn(l, "ffn_c", &z.narrow(0, nq, nt)?)?);
            }
        }
        let q = q.map(|q| self.ln("ln_q", &q)).transpose()?;
        let x = x.map(|x| self.ln("ln_c", &x)).transpose()?;
        Ok((q, x))
    }

    /// Fused pass: queries and code text share bidirectional self-attention
    /// and the queries read the graph on cross-attention layers.
    pub fn bridge_forward(&self, memory: &Tensor, tokens: &[u32]) -> Result<BridgeOutput> {
        let text = self.embed(tokens)?;
        let (q, x) = self.run(Some(memory), Some(text), Visibility::Full)?;
        Ok(BridgeOutput {
            b_q: q.expect("query stream"),
            h_c: x.expect("text stream"),
        })
    }

    /// Queries alone against the graph; the text stream is empty.
    pub fn query_forward(&self, memory: &Tensor) -> Result<Tensor> {
        Ok(self.run(Some(memory), None, Visibility::Full)?.0.expect("query stream"))
    }

    /// Text stream alone (no queries, no graph); the final `[CLS]` state.
    pub fn text_only_forward(&self, tokens: &[u32]) -> Result<Tensor> {
        let text = self.embed(tokens)?;
        let x = self.run(None, Some(text), Visibility::Full)?.1.expect("text stream");
        Ok(x.get(0)?)
    }

    /// Next-token logits for `input` (rows of the text stream) under the
    /// generative mask.
    pub fn generative_logits(&self, memory: &Tensor, input: &[u32]) -> Result<Tensor> {
        let text = self.embed(input)?;
        let x = self.run(Some(memory), Some(text), Visibility::Generative)?.1.expect("text stream");
        self.lin("lm", &x)
    }

    /// Summed next-token NLL of `code` given the graph: the input is
    /// `[BOS] bytes` and the targets are `bytes [EOS]`.
    pub fn gtg_sequence_loss(&self, memory: &Tensor, code: &str) -> Result<Tensor> {
        let (input, targets) = self.gtg_sequences(code)?;
        let logits = self.generative_logits(memory, &input)?;
        Ok(nn::nll_rows(&logits, &targets)?.sum_all()?)
    }

    pub fn gtg_sequences(&self, code: &str) -> Result<(Vec<u32>, Vec<u32>)> {
        let mut bytes = byte_ids(code);
        if bytes.is_empty() {
            return Err(Error::Shape("generation target must hold at least one byte".into()));
        }
        bytes.truncate(self.dims.max_len - 1);
        let mut input = vec![BOS];
        input.extend(&bytes);
        let mut targets = bytes;
        targets.push(EOS);
        Ok((input, targets))
    }

    /// Matching logits for rows of (mean-pooled `B_Q`, `h_cls`).
    pub fn gtm_logits(&self, pairs: &[(Tensor, Tensor)]) -> Result<Tensor> {
        let feats = pairs
            .iter()
            .map(|(b_q, h)| Ok(Tensor::cat(&[&b_q.mean(0)?, h], 0)?))
            .collect::<Result<Vec<_>>>()?;
        let x = Tensor::stack(&feats, 0)?;
        let hidden = self.lin("gtm.up", &x)?.gelu()?;
        Ok(self.lin("gtm.out", &hidden)?.squeeze(1)?)
    }

    /// `P_G = B_Q W_proj`.
    pub fn project_soft_prompt(&self, b_q: &Tensor) -> Result<Tensor> {
        let (_, w) = b_q.dims2()?;
        if w != self.dims.d_model {
            return Err(Error::Shape(format!("B_Q has width {w}, expected {}", self.dims.d_model)));
        }
        nn::linear(b_q, &self.p("proj.w")?, None)
    }

    pub fn head_names(&self, head: &str) -> Vec<String> {
        let prefix = format!("bridge.{head}.");
        self.params.names().filter(|n| n.starts_with(&prefix)).cloned().collect()
    }
}

/// `s(i, j)`: the maximum cosine between any query row of `b_q[i]` and
/// `h[j]`. Returns the M x M similarity matrix.
pub fn gtc_similarity(b_q: &[Tensor], h: &Tensor) -> Result<Tensor> {
    let h = nn::l2_normalize_rows(h, "text embeddings")?;
    let rows = b_q
        .iter()
        .map(|q| {
            let q = nn::l2_normalize_rows(q, "query outputs")?;
            Ok(q.matmul(&h.t()?)?.max(0)?)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::stack(&rows, 0)?)
}

/// Symmetric InfoNCE over a similarity matrix whose diagonal holds the
/// matched pairs.
pub fn gtc_loss_from_similarity(sim: &Tensor, tau: &Tensor) -> Result<Tensor> {
    let m = sim.dim(0)?;
    let logits = sim.broadcast_div(tau)?;
    let diag: Vec<u32> = (0..m as u32).collect();
    let a = nn::cross_entropy(&logits, &diag)?;
    let b = nn::cross_entropy(&logits.t()?.contiguous()?, &diag)?;
    Ok(((a + b)? * 0.5)?)
}

pub fn gtc_loss(b_q: &[Tensor], h: &Tensor, tau: &Tensor) -> Result<Tensor> {
    if b_q.is_empty() || b_q.len() != h.dim(0)? {
        return Err(Error::Shape(format!("{} query sets for {} texts", b_q.len(), h.dim(0)?)));
    }
    gtc_loss_from_similarity(&gtc_similarity(b_q, h)?, tau)
}

/// One hard negative per anchor in each direction: graph anchor `i` gets a
/// text `j != i` and text anchor `j` a graph `i != j`, each drawn from the
/// `k` most similar non-matches with probability proportional to
/// `exp(s / tau)`. Returns (graph, text) index pairs, graph anchors first.
pub fn mine_hard_negatives(sim: &[Vec<f64>], k: usize, tau: f64, seed: u64) -> Result<Vec<(usize, usize)>> {
    let m = sim.len();
    if m < 2 {
        return Err(Error::DegenerateInput(format!("hard negatives need at least 2 pairs, got {m}")));
    }
    if sim.iter().any(|r| r.len() != m) {
        return Err(Error::Shape("similarity matrix is not square".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pick = |scores: Vec<(usize, f64)>| -> usize {
        let mut c = scores;
        c.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        c.truncate(k.max(1));
        let top = c[0].1;
        let w: Vec<f64> = c.iter().map(|(_, s)| ((s - top) / tau).exp()).collect();
        let mut u = rng.gen::<f64>() * w.iter().sum::<f64>();
        for (i, wi) in w.iter().enumerate() {
            if u < *wi {
                return c[i].0;
            }
            u -= wi;
        }
        c[c.len() - 1].0
    };
    let mut out = Vec::with_capacity(2 * m);
    for i in 0..m {
        let j = pick((0..m).filter(|&j| j != i).map(|j| (j, sim[i][j])).collect());
        out.push((i, j));
    }
    for j in 0..m {
        let i = pick((0..m).filter(|&i| i != j).map(|i| (i, sim[i][j])).collect());
        out.push((i, j));
    }
    Ok(out)
}

/// Mean binary cross-entropy of matching logits against 0/1 labels, and
/// the accuracy of thresholding at p = 0.5.
pub fn gtm_loss_from_logits(logits: &Tensor, labels: &[u32]) -> Result<(Tensor, f64)> {
    let n = logits.dim(0)?;
    if labels.len() != n || n == 0 {
        return Err(Error::Shape(format!("{} labels for {n} matching logits", labels.len())));
    }
    // BCE with logit z equals two-class cross-entropy over [0, z].
    let two = Tensor::stack(&[&logits.zeros_like()?, logits], 1)?;
    let loss = nn::cross_entropy(&two, labels)?;
    let z = nn::flat(logits)?;
    let correct = z.iter().zip(labels).filter(|(z, &y)| (**z > 0.0) == (y == 1)).count();
    Ok((loss, correct as f64 / n as f64))
}

pub fn sigmoid(z: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::sigmoid(z)?)
}

/// Recall@1 and mean reciprocal rank of the matched column in each row of
/// a score matrix. Ties rank pessimistically.
pub fn retrieval_metrics(scores: &[Vec<f64>]) -> (f64, f64) {
    let m = scores.len();
    if m == 0 {
        return (0.0, 0.0);
    }
    let mut hits = 0.0;
    let mut rr = 0.0;
    for (i, row) in scores.iter().enumerate() {
        let rank = 1 + row.iter().enumerate().filter(|&(j, &s)| j != i && s >= row[i]).count();
        if rank == 1 {
            hits += 1.0;
        }
        rr += 1.0 / rank as f64;
    }
    (hits / m as f64, rr / m as f64)
}

pub(crate) fn rows(t: &Tensor) -> Result<Vec<Vec<f64>>> {
    Ok(t.to_dtype(nn::DTYPE)?.to_vec2::<f64>()?)
}
