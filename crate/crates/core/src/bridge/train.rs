use candle_core::{Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    graph_memory, gtc_loss_from_similarity, gtc_similarity, gtm_loss_from_logits, mine_hard_negatives,
    retrieval_metrics, rows, tokenize_code, Bridge, BridgeDims,
};
use crate::cge::{Cge, Mode};
use crate::config::{BridgeConfig, Stage2Config};
use crate::error::{Error, Result};
use crate::nn::{self, EarlyStopping, PlateauSchedule};
use crate::store::FeaturedGraph;

/// Where the bridge gets graph memory from: a frozen encoder (encoded once,
/// detached) or a live one whose parameters train along.
pub enum GraphSide<'a> {
    Frozen(Vec<Tensor>),
    Live { cge: &'a Cge, graphs: &'a [FeaturedGraph] },
}

impl<'a> GraphSide<'a> {
    pub fn new(cge: &'a Cge, graphs: &'a [FeaturedGraph], finetune: bool) -> Result<Self> {
        if finetune {
            return Ok(GraphSide::Live { cge, graphs });
        }
        let memories = graphs
            .iter()
            .map(|g| Ok(graph_memory(&cge.encode_graph(g, false, 0)?)?.detach()))
            .collect::<Result<Vec<_>>>()?;
        Ok(GraphSide::Frozen(memories))
    }

    pub fn len(&self) -> usize {
        match self {
            GraphSide::Frozen(m) => m.len(),
            GraphSide::Live { graphs, .. } => graphs.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn memory(&self, i: usize) -> Result<Tensor> {
        match self {
            GraphSide::Frozen(m) => Ok(m[i].clone()),
            GraphSide::Live { cge, graphs } => {
                let (_, enc) = cge.encode_batch(&[&graphs[i]], Mode::Eval)?;
                graph_memory(&enc)
            }
        }
    }

    pub fn trainable(&self) -> Vec<Var> {
        match self {
            GraphSide::Frozen(_) => Vec::new(),
            GraphSide::Live { cge, .. } => cge.encoder_vars(),
        }
    }
}

pub struct AlignBatch<'a> {
    pub memories: Vec<Tensor>,
    pub codes: Vec<&'a str>,
    /// Fixes the hard-negative draws.
    pub seed: u64,
}

/// Which objectives enter the sum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Objectives {
    pub gtc: bool,
    pub gtm: bool,
    pub gtg: bool,
}

impl Objectives {
    pub const ALL: Objectives = Objectives {
        gtc: true,
        gtm: true,
        gtg: true,
    };

    pub fn of(cfg: &Stage2Config) -> Self {
        Objectives {
            gtc: cfg.gtc,
            gtm: cfg.gtm,
            gtg: cfg.gtg,
        }
    }
}

pub struct Stage2Loss {
    pub total: Tensor,
    pub gtc: Option<Tensor>,
    pub gtm: Option<Tensor>,
    pub gtg: Option<Tensor>,
    pub gtm_accuracy: Option<f64>,
}

/// `L_GTC + L_GTM + L_GTG` over the enabled objectives for one batch.
pub fn stage2_loss(bridge: &Bridge, batch: &AlignBatch<'_>, on: Objectives, hard_k: usize) -> Result<Stage2Loss> {
    let m = batch.memories.len();
    if m == 0 || m != batch.codes.len() {
        return Err(Error::Shape(format!("{m} graphs for {} code texts", batch.codes.len())));
    }
    let tokens: Vec<Vec<u32>> = batch
        .codes
        .iter()
        .map(|c| tokenize_code(c, bridge.dims.max_len))
        .collect();
    let tau = bridge.tau()?;
    let mut parts = Vec::new();

    let (mut gtc, mut gtm, mut gtm_accuracy) = (None, None, None);
    if on.gtc || on.gtm {
        let b_q = batch
            .memories
            .iter()
            .map(|mem| bridge.query_forward(mem))
            .collect::<Result<Vec<_>>>()?;
        let h = Tensor::stack(
            &tokens
                .iter()
                .map(|t| bridge.text_only_forward(t))
                .collect::<Result<Vec<_>>>()?,
            0,
        )?;
        if on.gtc {
            let sim = gtc_similarity(&b_q, &h)?;
            let l = gtc_loss_from_similarity(&sim, &tau)?;
            parts.push(l.clone());
            gtc = Some(l);
        }
        if on.gtm {
            let detached: Vec<Tensor> = b_q.iter().map(|t| t.detach()).collect();
            let sim = rows(&gtc_similarity(&detached, &h.detach())?)?;
            let negatives = mine_hard_negatives(&sim, hard_k, nn::scalar(&tau)?, batch.seed)?;
            let pairs: Vec<(usize, usize)> = (0..m).map(|i| (i, i)).chain(negatives).collect();
            let (l, acc) = gtm_loss_for_pairs(bridge, &batch.memories, &tokens, &h, &pairs)?;
            parts.push(l.clone());
            gtm = Some(l);
            gtm_accuracy = Some(acc);
        }
    }
    let mut gtg = None;
    if on.gtg {
        let per_seq = batch
            .memories
            .iter()
            .zip(&batch.codes)
            .map(|(mem, code)| bridge.gtg_sequence_loss(mem, code))
            .collect::<Result<Vec<_>>>()?;
        let l = Tensor::stack(&per_seq, 0)?.mean(0)?;
        parts.push(l.clone());
        gtg = Some(l);
    }
    let mut total = parts
        .first()
        .cloned()
        .ok_or_else(|| Error::Config("every alignment objective is disabled".into()))?;
    for p in &parts[1..] {
        total = (total + p)?;
    }
    Ok(Stage2Loss {
        total,
        gtc,
        gtm,
        gtg,
        gtm_accuracy,
    })
}

/// Matching loss over explicit (graph, text) pairs; a pair is positive iff
/// its indices agree. `h` holds the text-only `[CLS]` states.
pub fn gtm_loss_for_pairs(
    bridge: &Bridge,
    memories: &[Tensor],
    tokens: &[Vec<u32>],
    h: &Tensor,
    pairs: &[(usize, usize)],
) -> Result<(Tensor, f64)> {
    let labels: Vec<u32> = pairs.iter().map(|&(g, t)| u32::from(g == t)).collect();
    let feats = pairs
        .iter()
        .map(|&(g, t)| Ok((bridge.bridge_forward(&memories[g], &tokens[t])?.b_q, h.get(t)?)))
        .collect::<Result<Vec<_>>>()?;
    gtm_loss_from_logits(&bridge.gtm_logits(&feats)?, &labels)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Stage2Epoch {
    pub loss: f64,
    pub gtc: Option<f64>,
    pub gtm: Option<f64>,
    pub gtg: Option<f64>,
    pub gtm_accuracy: Option<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Ranking {
    pub r_at_1: f64,
    pub mrr: f64,
}

/// Graph-to-text retrieval. `gtc` ranks by the contrastive similarity
/// alone; `matched` ranks by `s / tau` plus the matching logit of the fused
/// pair.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Retrieval {
    pub gtc: Ranking,
    pub matched: Ranking,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage2Report {
    pub objectives: Objectives,
    /// Full-objective evaluation before training.
    pub initial: Stage2Epoch,
    /// Full-objective evaluation after training.
    pub last: Stage2Epoch,
    pub retrieval: Retrieval,
    pub trace: Vec<Stage2Epoch>,
    pub epochs_run: usize,
    pub stopped_early: bool,
}

fn epoch_of(l: &Stage2Loss) -> Result<Stage2Epoch> {
    let opt = |t: &Option<Tensor>| t.as_ref().map(nn::scalar).transpose();
    Ok(Stage2Epoch {
        loss: nn::scalar(&l.total)?,
        gtc: opt(&l.gtc)?,
        gtm: opt(&l.gtm)?,
        gtg: opt(&l.gtg)?,
        gtm_accuracy: l.gtm_accuracy,
    })
}

fn mean_epoch(parts: &[(Stage2Epoch, usize)]) -> Stage2Epoch {
    let n: usize = parts.iter().map(|p| p.1).sum();
    // weighted over the batches that computed the term
    let avg = |f: fn(&Stage2Epoch) -> Option<f64>| -> Option<f64> {
        let seen: Vec<(f64, usize)> = parts.iter().filter_map(|(e, k)| f(e).map(|v| (v, *k))).collect();
        let w: usize = seen.iter().map(|s| s.1).sum();
        (w > 0).then(|| seen.iter().map(|(v, k)| v * *k as f64).sum::<f64>() / w as f64)
    };
    Stage2Epoch {
        loss: parts.iter().map(|(e, k)| e.loss * *k as f64).sum::<f64>() / n as f64,
        gtc: avg(|e| e.gtc),
        gtm: avg(|e| e.gtm),
        gtg: avg(|e| e.gtg),
        gtm_accuracy: avg(|e| e.gtm_accuracy),
    }
}

fn batches(order: &[usize], size: usize, rng: &mut ChaCha8Rng) -> Vec<(Vec<usize>, u64)> {
    order.chunks(size).map(|c| (c.to_vec(), rng.gen())).collect()
}

fn make_batch<'a>(side: &GraphSide<'_>, codes: &'a [String], idx: &[usize], seed: u64) -> Result<AlignBatch<'a>> {
    Ok(AlignBatch {
        memories: idx.iter().map(|&i| side.memory(i)).collect::<Result<_>>()?,
        codes: idx.iter().map(|&i| codes[i].as_str()).collect(),
        seed,
    })
}

/// All three objectives in eval order with batch seeds fixed by `seed`.
/// Batches of one pair skip the matching term, which needs negatives.
pub fn evaluate_stage2(
    bridge: &Bridge,
    side: &GraphSide<'_>,
    codes: &[String],
    batch_size: usize,
    hard_k: usize,
    seed: u64,
) -> Result<Stage2Epoch> {
    let order: Vec<usize> = (0..side.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut parts = Vec::new();
    for (idx, s) in batches(&order, batch_size, &mut rng) {
        let on = Objectives {
            gtm: idx.len() >= 2,
            ..Objectives::ALL
        };
        let l = stage2_loss(bridge, &make_batch(side, codes, &idx, s)?, on, hard_k)?;
        parts.push((epoch_of(&l)?, idx.len()));
    }
    Ok(mean_epoch(&parts))
}

/// Ranks every code text for every graph.
pub fn evaluate_retrieval(bridge: &Bridge, side: &GraphSide<'_>, codes: &[String]) -> Result<Retrieval> {
    let m = side.len();
    let memories = (0..m).map(|i| side.memory(i)).collect::<Result<Vec<_>>>()?;
    let tokens: Vec<Vec<u32>> = codes.iter().map(|c| tokenize_code(c, bridge.dims.max_len)).collect();
    let b_q = memories
        .iter()
        .map(|mem| Ok(bridge.query_forward(mem)?.detach()))
        .collect::<Result<Vec<_>>>()?;
    let h = Tensor::stack(
        &tokens
            .iter()
            .map(|t| Ok(bridge.text_only_forward(t)?.detach()))
            .collect::<Result<Vec<_>>>()?,
        0,
    )?;
    let sim = rows(&gtc_similarity(&b_q, &h)?)?;
    let tau = nn::scalar(&bridge.tau()?)?;
    let mut matched = vec![vec![0.0; m]; m];
    for g in 0..m {
        let feats = (0..m)
            .map(|t| Ok((bridge.bridge_forward(&memories[g], &tokens[t])?.b_q, h.get(t)?)))
            .collect::<Result<Vec<_>>>()?;
        let z = nn::flat(&bridge.gtm_logits(&feats)?)?;
        for t in 0..m {
            matched[g][t] = sim[g][t] / tau + z[t];
        }
    }
    let rank = |s: &[Vec<f64>]| {
        let (r_at_1, mrr) = retrieval_metrics(s);
        Ranking { r_at_1, mrr }
    };
    Ok(Retrieval {
        gtc: rank(&sim),
        matched: rank(&matched),
    })
}

/// Aligns a fresh bridge to `(graph, code)` pairs with AdamW under a
/// warmup plus reduce-on-plateau schedule and early stopping. With a live
/// graph side the encoder parameters are updated in place as well.
pub fn train_stage2(
    side: &GraphSide<'_>,
    codes: &[String],
    dims: BridgeDims,
    bcfg: &BridgeConfig,
    cfg: &Stage2Config,
    seed: u64,
) -> Result<(Bridge, Stage2Report)> {
    let bridge = Bridge::new(dims, bcfg.temp_init, seed)?;
    let report = fit_stage2(&bridge, side, codes, cfg, seed)?;
    Ok((bridge, report))
}

/// Trains `bridge` in place.
pub fn fit_stage2(
    bridge: &Bridge,
    side: &GraphSide<'_>,
    codes: &[String],
    cfg: &Stage2Config,
    seed: u64,
) -> Result<Stage2Report> {
    let n = side.len();
    if n == 0 || n != codes.len() {
        return Err(Error::DegenerateInput(format!("{n} graphs for {} code texts", codes.len())));
    }
    let on = Objectives::of(cfg);
    let eval_seed = seed ^ 0x5eed;
    let initial = evaluate_stage2(bridge, side, codes, cfg.batch_size, cfg.hard_negatives, eval_seed)?;
    let mut vars = bridge.params.vars();
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
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let (mut trace, mut stopped_early, mut step) = (Vec::new(), false, 0);
    for _ in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let mut parts = Vec::new();
        for (idx, s) in batches(&order, cfg.batch_size, &mut rng) {
            let batch_on = Objectives {
                gtm: on.gtm && idx.len() >= 2,
                ..on
            };
            let l = stage2_loss(bridge, &make_batch(side, codes, &idx, s)?, batch_on, cfg.hard_negatives)?;
            let e = epoch_of(&l)?;
            nn::check_finite(e.loss, "stage2", step)?;
            opt.set_learning_rate(schedule.lr_at(step));
            opt.backward_step(&l.total)?;
            parts.push((e, idx.len()));
            step += 1;
        }
        let epoch = mean_epoch(&parts);
        schedule.end_epoch(epoch.loss);
        let stop = stopper.update(epoch.loss);
        trace.push(epoch);
        if stop {
            stopped_early = true;
            break;
        }
    }
    let last = evaluate_stage2(bridge, side, codes, cfg.batch_size, cfg.hard_negatives, eval_seed)?;
    let retrieval = evaluate_retrieval(bridge, side, codes)?;
    Ok(Stage2Report {
        objectives: on,
        initial,
        last,
        retrieval,
        epochs_run: trace.len(),
        trace,
        stopped_early,
    })
}
