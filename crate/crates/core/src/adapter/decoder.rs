use candle_core::Tensor;
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bridge::{byte_ids, BOS, EOS, VOCAB};
use crate::config::DecoderConfig;
use crate::error::{Error, Result};
use crate::nn::{self, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderDims {
    pub d_llm: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn: usize,
    pub context: usize,
}

impl From<&DecoderConfig> for DecoderDims {
    fn from(c: &DecoderConfig) -> Self {
        DecoderDims {
            d_llm: c.d_llm,
            layers: c.layers,
            heads: c.heads,
            ffn: c.ffn,
            context: c.context,
        }
    }
}

/// A small pre-LN causal transformer over the shared byte vocabulary that
/// accepts raw input embeddings, so soft-prompt rows can be injected.
pub struct Decoder {
    pub dims: DecoderDims,
    pub params: ParamStore,
}

impl Decoder {
    pub fn new(dims: DecoderDims, seed: u64) -> Result<Self> {
        if dims.heads == 0 || dims.d_llm % dims.heads != 0 || dims.layers == 0 || dims.context < 2 {
            return Err(Error::Shape(format!("invalid decoder dims {dims:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let (d, f) = (dims.d_llm, dims.ffn);
        let std = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();
        let out_gain = 1.0 / (2.0 * dims.layers as f64).sqrt();
        p.normal("dec.tok_emb", &[VOCAB, d], 1.0, &mut rng)?;
        p.normal("dec.pos_emb", &[dims.context, d], 0.1, &mut rng)?;
        for l in 0..dims.layers {
            for (name, din, dout, gain) in [
                ("attn.q", d, d, 1.0),
                ("attn.k", d, d, 1.0),
                ("attn.v", d, d, 1.0),
                ("attn.o", d, d, out_gain),
                ("ffn.up", d, f, 1.0),
                ("ffn.down", f, d, out_gain),
            ] {
                p.normal(&format!("dec.l{l}.{name}.w"), &[din, dout], std(din) * gain, &mut rng)?;
                p.zeros(&format!("dec.l{l}.{name}.b"), &[dout])?;
            }
            for n in ["ln_attn", "ln_ffn"] {
                p.ones(&format!("dec.l{l}.{n}.g"), &[d])?;
                p.zeros(&format!("dec.l{l}.{n}.b"), &[d])?;
            }
        }
        p.ones("dec.ln_f.g", &[d])?;
        p.zeros("dec.ln_f.b", &[d])?;
        p.normal("dec.lm.w", &[d, VOCAB], std(d), &mut rng)?;
        p.zeros("dec.lm.b", &[VOCAB])?;
        Ok(Decoder { dims, params: p })
    }

    fn p(&self, name: &str, frozen: bool) -> Result<Tensor> {
        let t = self.params.get(&format!("dec.{name}"))?;
        Ok(if frozen { t.detach() } else { t })
    }

    pub fn embed_tokens(&self, ids: &[u32], frozen: bool) -> Result<Tensor> {
        if let Some(bad) = ids.iter().find(|&&i| i as usize >= VOCAB) {
            return Err(Error::Shape(format!("token id {bad} outside the vocabulary")));
        }
        Ok(self.p("tok_emb", frozen)?.index_select(&nn::ids_tensor(ids)?, 0)?)
    }

    /// Next-token logits (n x V) for a sequence of input embeddings.
    pub fn logits(&self, x: &Tensor, frozen: bool) -> Result<Tensor> {
        self.logits_at(x, 0, frozen)
    }

    /// As `logits`, with the sequence starting at position `offset`.
    pub fn logits_at(&self, x: &Tensor, offset: usize, frozen: bool) -> Result<Tensor> {
        let (n, d) = x.dims2()?;
        if d != self.dims.d_llm {
            return Err(Error::Shape(format!("decoder input width {d}, expected {}", self.dims.d_llm)));
        }
        if offset + n > self.dims.context {
            return Err(Error::Length {
                len: offset + n,
                max: self.dims.context,
            });
        }
        let p = |name: &str| self.p(name, frozen);
        let lin = |pre: &str, x: &Tensor| nn::linear(x, &p(&format!("{pre}.w"))?, Some(&p(&format!("{pre}.b"))?));
        let ln = |pre: &str, x: &Tensor| nn::layer_norm(x, &p(&format!("{pre}.g"))?, &p(&format!("{pre}.b"))?, 1e-5);
        let causal = nn::mask(n, n, |i, j| j <= i)?;
        let mut h = x.broadcast_add(&p("pos_emb")?.narrow(0, offset, n)?)?;
        for l in 0..self.dims.layers {
            let a = ln(&format!("l{l}.ln_attn"), &h)?;
            let att = nn::attend(
                &lin(&format!("l{l}.attn.q"), &a)?,
                &lin(&format!("l{l}.attn.k"), &a)?,
                &lin(&format!("l{l}.attn.v"), &a)?,
                self.dims.heads,
                Some(&causal),
            )?;
            h = (h + lin(&format!("l{l}.attn.o"), &att)?)?;
            let f = ln(&format!("l{l}.ln_ffn"), &h)?;
            let up = lin(&format!("l{l}.ffn.up"), &f)?.gelu()?;
            h = (h + lin(&format!("l{l}.ffn.down"), &up)?)?;
        }
        lin("lm", &ln("ln_f", &h)?)
    }
}

/// Language-model pretraining on `[BOS] text [EOS]` items packed into
/// windows of `pretrain_window` tokens, each at a random position of the
/// context; mean token NLL per window. Returns the
/// decoder and the mean loss per epoch.
pub fn pretrain_decoder(texts: &[String], cfg: &DecoderConfig, seed: u64) -> Result<(Decoder, Vec<f64>)> {
    let dec = Decoder::new(DecoderDims::from(cfg), seed)?;
    if texts.is_empty() {
        return Err(Error::DegenerateInput("empty decoder pretraining corpus".into()));
    }
    let mut opt = AdamW::new(
        dec.params.vars(),
        ParamsAdamW {
            lr: cfg.pretrain_lr,
            weight_decay: 0.0,
            ..Default::default()
        },
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let window = cfg.pretrain_window.clamp(1, dec.dims.context);
    let mut trace = Vec::new();
    let mut step = 0;
    for _ in 0..cfg.pretrain_epochs {
        let mut order: Vec<usize> = (0..texts.len()).collect();
        order.shuffle(&mut rng);
        let mut stream = Vec::new();
        for &i in &order {
            stream.push(BOS);
            stream.extend(byte_ids(&texts[i]));
            stream.push(EOS);
        }
        let (mut total, mut count) = (0.0, 0);
        for chunk in stream.chunks(window + 1).filter(|c| c.len() >= 2) {
            let input = &chunk[..chunk.len() - 1];
            let offset = rng.gen_range(0..=dec.dims.context - input.len());
            let x = dec.embed_tokens(input, false)?;
            let loss = nn::cross_entropy(&dec.logits_at(&x, offset, false)?, &chunk[1..])?;
            let v = nn::scalar(&loss)?;
            nn::check_finite(v, "decoder pretraining", step)?;
            opt.backward_step(&loss)?;
            total += v;
            count += 1;
            step += 1;
        }
        trace.push(total / count as f64);
    }
    Ok((dec, trace))
}

/// A decoder whose parameters never receive gradients: every forward reads
/// detached copies, and the checksum taken at freezing time is re-verified
/// on demand.
pub struct FrozenDecoder {
    decoder: Decoder,
    checksum: String,
}

impl FrozenDecoder {
    pub fn freeze(decoder: Decoder) -> Result<Self> {
        let checksum = decoder.params.checksum()?;
        Ok(FrozenDecoder { decoder, checksum })
    }

    pub fn dims(&self) -> DecoderDims {
        self.decoder.dims
    }

    pub fn checksum(&self) -> &str {
        &self.checksum
    }

    pub fn params(&self) -> &ParamStore {
        &self.decoder.params
    }

    pub fn verify(&self) -> Result<()> {
        let now = self.decoder.params.checksum()?;
        if now != self.checksum {
            return Err(Error::FrozenViolation {
                before: self.checksum.clone(),
                after: now,
            });
        }
        Ok(())
    }

    pub fn embed_tokens(&self, ids: &[u32]) -> Result<Tensor> {
        self.decoder.embed_tokens(ids, true)
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        self.decoder.logits(x, true)
    }
}
