//! Instruction adaptation: a soft prompt from the bridge is prepended to
//! instruction and code tokens of a frozen decoder, and only the bridge
//! learns from the answer likelihood.

pub mod decoder;

use candle_core::{Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use decoder::{pretrain_decoder, Decoder, DecoderDims, FrozenDecoder};

use crate::bridge::train::GraphSide;
use crate::bridge::{byte_ids, detokenize, tokenize_code, Bridge, BOS, EOS, PAD};
use crate::config::Stage3Config;
use crate::error::{Error, Result};
use crate::nn::{self, EarlyStopping, PlateauSchedule};
use crate::synth::TaskExample;

/// `[P_G; I; C]` and, when supervising, `[BOS] T_A` as decoder input
/// embeddings. `targets[p]` is the id following row `p` (PAD where the next
/// row is a soft-prompt row) and `answer_mask` marks the rows whose
/// prediction is scored: `BOS` and the answer bytes, predicting the answer
/// and `EOS`.
pub struct ComposedInput {
    pub embeddings: Tensor,
    pub targets: Vec<u32>,
    pub answer_mask: Vec<bool>,
}

impl ComposedInput {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

pub fn compose_input(
    p_g: &Tensor,
    instruction: &str,
    code: &str,
    answer: Option<&str>,
    decoder: &FrozenDecoder,
) -> Result<ComposedInput> {
    let dims = decoder.dims();
    let (nq, w) = p_g.dims2()?;
    if w != dims.d_llm {
        return Err(Error::Shape(format!("soft prompt width {w}, expected {}", dims.d_llm)));
    }
    let mut ids = byte_ids(instruction);
    ids.extend(byte_ids(code));
    let answer_start = nq + ids.len();
    if let Some(a) = answer {
        ids.push(BOS);
        ids.extend(byte_ids(a));
    }
    let len = nq + ids.len();
    if len > dims.context {
        return Err(Error::Length {
            len,
            max: dims.context,
        });
    }
    let embeddings = if ids.is_empty() {
        p_g.clone()
    } else {
        Tensor::cat(&[p_g, &decoder.embed_tokens(&ids)?], 0)?
    };
    let mut targets = vec![PAD; nq.saturating_sub(1)];
    targets.extend(ids.iter().copied());
    if nq == 0 && !ids.is_empty() {
        targets.remove(0);
    }
    targets.push(if answer.is_some() { EOS } else { PAD });
    targets.truncate(len);
    let answer_mask = (0..len).map(|p| answer.is_some() && p >= answer_start).collect();
    Ok(ComposedInput {
        embeddings,
        targets,
        answer_mask,
    })
}

/// Summed NLL over the answer rows only.
pub fn stage3_loss(composed: &ComposedInput, decoder: &FrozenDecoder) -> Result<Tensor> {
    let rows: Vec<u32> = (0..composed.len() as u32)
        .filter(|&p| composed.answer_mask[p as usize])
        .collect();
    if rows.is_empty() {
        return Err(Error::Shape("composed input carries no answer".into()));
    }
    let targets: Vec<u32> = rows.iter().map(|&p| composed.targets[p as usize]).collect();
    let logits = decoder.logits(&composed.embeddings)?;
    let picked = logits.index_select(&nn::ids_tensor(&rows)?, 0)?;
    Ok(nn::nll_rows(&picked, &targets)?.sum_all()?)
}

/// Soft prompt for one example through the fused bridge pass.
pub fn soft_prompt(bridge: &Bridge, memory: &Tensor, code: &str) -> Result<Tensor> {
    let out = bridge.bridge_forward(memory, &tokenize_code(code, bridge.dims.max_len))?;
    bridge.project_soft_prompt(&out.b_q)
}

/// Divides positive logits and multiplies negative ones by `penalty` for
/// every distinct id in `emitted`.
pub fn penalize(logits: &mut [f64], emitted: &[u32], penalty: f64) {
    let mut seen = emitted.to_vec();
    seen.sort_unstable();
    seen.dedup();
    for id in seen {
        let l = &mut logits[id as usize];
        *l = if *l > 0.0 { *l / penalty } else { *l * penalty };
    }
}

fn argmax(xs: &[f64]) -> u32 {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best as u32
}

/// Greedy decoding after `[P_G; I; C; BOS]` with a repetition penalty on
/// already generated ids. Stops at `EOS`, after `max_new` ids, or when the
/// context window is full.
pub fn generate(
    p_g: &Tensor,
    instruction: &str,
    code: &str,
    decoder: &FrozenDecoder,
    max_new: usize,
    rep_penalty: f64,
) -> Result<String> {
    let prompt = compose_input(p_g, instruction, code, None, decoder)?;
    if max_new == 0 {
        return Ok(String::new());
    }
    let context = decoder.dims().context;
    if prompt.len() + 1 > context {
        return Err(Error::Length {
            len: prompt.len() + 1,
            max: context,
        });
    }
    let mut x = Tensor::cat(&[&prompt.embeddings, &decoder.embed_tokens(&[BOS])?], 0)?;
    let mut out: Vec<u32> = Vec::new();
    while out.len() < max_new {
        let logits = decoder.logits(&x)?;
        let mut last = nn::flat(&logits.get(logits.dim(0)? - 1)?)?;
        penalize(&mut last, &out, rep_penalty);
        let next = argmax(&last);
        if next == EOS {
            break;
        }
        out.push(next);
        if x.dim(0)? + 1 > context {
            break;
        }
        x = Tensor::cat(&[&x, &decoder.embed_tokens(&[next])?], 0)?;
    }
    Ok(detokenize(&out))
}

/// Mean over the examples of the per-sequence answer NLL.
pub fn batch_loss(
    bridge: &Bridge,
    side: &GraphSide<'_>,
    examples: &[TaskExample],
    idx: &[usize],
    decoder: &FrozenDecoder,
) -> Result<Tensor> {
    let per = idx
        .iter()
        .map(|&i| {
            let ex = &examples[i];
            let p_g = soft_prompt(bridge, &side.memory(i)?, &ex.code)?;
            let c = compose_input(&p_g, &ex.instruction, &ex.code, Some(&ex.answer), decoder)?;
            stage3_loss(&c, decoder)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::stack(&per, 0)?.mean(0)?)
}

/// Mean answer NLL per example over a corpus.
pub fn evaluate_stage3(
    bridge: &Bridge,
    side: &GraphSide<'_>,
    examples: &[TaskExample],
    decoder: &FrozenDecoder,
) -> Result<f64> {
    let idx: Vec<usize> = (0..examples.len()).collect();
    let mut total = 0.0;
    for chunk in idx.chunks(16) {
        total += nn::scalar(&batch_loss(bridge, side, examples, chunk, decoder)?)? * chunk.len() as f64;
    }
    Ok(total / examples.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage3Report {
    pub initial: f64,
    pub last: f64,
    pub trace: Vec<f64>,
    pub epochs_run: usize,
    pub stopped_early: bool,
    pub decoder_checksum_before: String,
    pub decoder_checksum_after: String,
}

/// Tunes `bridge` (and a live encoder, if any) in place on answer NLL. The
/// decoder checksum is compared before and after.
pub fn train_stage3(
    bridge: &Bridge,
    side: &GraphSide<'_>,
    examples: &[TaskExample],
    decoder: &FrozenDecoder,
    cfg: &Stage3Config,
    seed: u64,
) -> Result<Stage3Report> {
    let n = examples.len();
    if n == 0 || n != side.len() {
        return Err(Error::DegenerateInput(format!("{n} examples for {} graphs", side.len())));
    }
    decoder.verify()?;
    let before = decoder.params().checksum()?;
    let initial = evaluate_stage3(bridge, side, examples, decoder)?;
    let mut vars: Vec<Var> = bridge.params.vars();
    vars.extend(side.trainable());
    let mut opt = AdamW::new(
        vars,
        ParamsAdamW {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            ..Default::default()
        },
    )?;
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let warmup = (cfg.warmup_ratio * (steps_per_epoch * cfg.epochs) as f64).ceil() as usize;
    let mut schedule = PlateauSchedule::new(cfg.lr, warmup, cfg.sched_patience, cfg.sched_factor, cfg.min_lr);
    let mut stopper = EarlyStopping::new(cfg.patience.max(1));
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(3));
    let (mut trace, mut stopped_early, mut step) = (Vec::new(), false, 0);
    for _ in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            let loss = batch_loss(bridge, side, examples, idx, decoder)?;
            let v = nn::scalar(&loss)?;
            nn::check_finite(v, "stage3", step)?;
            opt.set_learning_rate(schedule.lr_at(step));
            opt.backward_step(&loss)?;
            total += v * idx.len() as f64;
            step += 1;
        }
        let epoch = total / n as f64;
        schedule.end_epoch(epoch);
        let stop = stopper.update(epoch);
        trace.push(epoch);
        if stop {
            stopped_early = true;
            break;
        }
    }
    let after = decoder.params().checksum()?;
    decoder.verify()?;
    let last = evaluate_stage3(bridge, side, examples, decoder)?;
    Ok(Stage3Report {
        initial,
        last,
        epochs_run: trace.len(),
        trace,
        stopped_early,
        decoder_checksum_before: before,
        decoder_checksum_after: after,
    })
}
