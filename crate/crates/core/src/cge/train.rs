use candle_core::Tensor;
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    augment_view, edge_type_logits, edge_type_loss_from_logits, graph_contrastive_loss, sample_batch_pairs, BatchStats,
    Cge, Mode,
};
use crate::config::CgeConfig;
use crate::error::{Error, Result};
use crate::nn::{self, EarlyStopping};
use crate::store::FeaturedGraph;

/// A batch of graphs with the seed that fixes its augmented views and
/// negative pairs.
pub struct Stage1Batch<'a> {
    pub graphs: Vec<&'a FeaturedGraph>,
    pub seed: u64,
}

pub struct Stage1Loss {
    pub total: Tensor,
    pub contrastive: Tensor,
    pub edge: Tensor,
    pub edge_accuracy: f64,
    pub stats: BatchStats,
}

fn mode(train: bool, rng: &mut ChaCha8Rng) -> Mode<'_> {
    if train {
        Mode::Train { rng }
    } else {
        Mode::Eval
    }
}

/// `lambda_cl * L_cl + lambda_edge * L_edge` for one batch.
pub fn stage1_loss(cge: &Cge, batch: &Stage1Batch<'_>, cfg: &CgeConfig, train: bool) -> Result<Stage1Loss> {
    let mut seeds = ChaCha8Rng::seed_from_u64(batch.seed);
    let views: Vec<(FeaturedGraph, FeaturedGraph)> = batch
        .graphs
        .iter()
        .map(|g| {
            let (s1, s2) = (seeds.gen(), seeds.gen());
            (
                augment_view(g, cfg.node_drop, cfg.edge_drop, s1),
                augment_view(g, cfg.node_drop, cfg.edge_drop, s2),
            )
        })
        .collect();
    let pair_seed: u64 = seeds.gen();
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(seeds.gen());
    let v1: Vec<&FeaturedGraph> = views.iter().map(|v| &v.0).collect();
    let v2: Vec<&FeaturedGraph> = views.iter().map(|v| &v.1).collect();
    let (_, z1) = cge.encode_batch(&v1, mode(train, &mut dropout_rng))?;
    let (_, z2) = cge.encode_batch(&v2, mode(train, &mut dropout_rng))?;
    let contrastive = graph_contrastive_loss(&z1.pooled, &z2.pooled, cfg.temp)?;

    let full = super::GraphBatch::new(&batch.graphs)?;
    let (states, stats) = cge.forward(&full, mode(train, &mut dropout_rng))?;
    let pairs = sample_batch_pairs(&batch.graphs, cfg.neg_ratio, pair_seed)?;
    let head_w = cge.params.get("edge_head.w")?;
    let head_b = cge.params.get("edge_head.b")?;
    let logits = edge_type_logits(&states, &pairs, &head_w, &head_b)?;
    let (edge, edge_accuracy) = edge_type_loss_from_logits(&logits, &pairs.labels)?;

    let total = ((&contrastive * cfg.lambda_cl)? + (&edge * cfg.lambda_edge)?)?;
    Ok(Stage1Loss {
        total,
        contrastive,
        edge,
        edge_accuracy,
        stats,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Stage1Epoch {
    pub loss: f64,
    pub contrastive: f64,
    pub edge: f64,
    pub edge_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage1Report {
    /// Eval-mode loss over the corpus before any update.
    pub initial: Stage1Epoch,
    /// Eval-mode loss over the corpus after training, same seeds.
    pub last: Stage1Epoch,
    /// Mean training loss per epoch.
    pub trace: Vec<Stage1Epoch>,
    pub epochs_run: usize,
    pub stopped_early: bool,
}

fn batches<'a>(corpus: &'a [FeaturedGraph], order: &[usize], size: usize, rng: &mut ChaCha8Rng) -> Vec<Stage1Batch<'a>> {
    order
        .chunks(size)
        .map(|c| Stage1Batch {
            graphs: c.iter().map(|&i| &corpus[i]).collect(),
            seed: rng.gen(),
        })
        .collect()
}

fn mean_epoch(parts: &[(Stage1Epoch, usize)]) -> Stage1Epoch {
    let n: usize = parts.iter().map(|p| p.1).sum();
    let w = |f: fn(&Stage1Epoch) -> f64| parts.iter().map(|(e, k)| f(e) * *k as f64).sum::<f64>() / n as f64;
    Stage1Epoch {
        loss: w(|e| e.loss),
        contrastive: w(|e| e.contrastive),
        edge: w(|e| e.edge),
        edge_accuracy: w(|e| e.edge_accuracy),
    }
}

fn epoch_of(l: &Stage1Loss) -> Result<Stage1Epoch> {
    Ok(Stage1Epoch {
        loss: nn::scalar(&l.total)?,
        contrastive: nn::scalar(&l.contrastive)?,
        edge: nn::scalar(&l.edge)?,
        edge_accuracy: l.edge_accuracy,
    })
}

/// Corpus-wide eval-mode loss with batch seeds fixed by `seed`.
pub fn evaluate_stage1(cge: &Cge, corpus: &[FeaturedGraph], cfg: &CgeConfig, seed: u64) -> Result<Stage1Epoch> {
    let order: Vec<usize> = (0..corpus.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut parts = Vec::new();
    for b in batches(corpus, &order, cfg.batch_size, &mut rng) {
        let l = stage1_loss(cge, &b, cfg, false)?;
        parts.push((epoch_of(&l)?, b.graphs.len()));
    }
    Ok(mean_epoch(&parts))
}

/// Pretrain the encoder with AdamW on the weighted Stage-1 objective,
/// stopping early once the epoch loss stops improving for `cfg.patience`
/// epochs.
pub fn train_stage1(corpus: &[FeaturedGraph], cfg: &CgeConfig, seed: u64) -> Result<(Cge, Stage1Report)> {
    if corpus.is_empty() {
        return Err(Error::DegenerateInput("empty pretraining corpus".into()));
    }
    let mut cge = Cge::new(cfg.dims(), seed)?;
    let eval_seed = seed ^ 0x5eed;
    let initial = evaluate_stage1(&cge, corpus, cfg, eval_seed)?;
    let mut opt = AdamW::new(
        cge.params.vars(),
        ParamsAdamW {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            ..Default::default()
        },
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let mut stopper = EarlyStopping::new(cfg.patience.max(1));
    let mut trace = Vec::new();
    let mut stopped_early = false;
    let mut batch_id = 0;
    for _ in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..corpus.len()).collect();
        order.shuffle(&mut rng);
        let mut parts = Vec::new();
        for b in batches(corpus, &order, cfg.batch_size, &mut rng) {
            let l = stage1_loss(&cge, &b, cfg, true)?;
            let e = epoch_of(&l)?;
            nn::check_finite(e.loss, "stage1", batch_id)?;
            opt.backward_step(&l.total)?;
            cge.update_running_stats(&l.stats)?;
            parts.push((e, b.graphs.len()));
            batch_id += 1;
        }
        let epoch = mean_epoch(&parts);
        let stop = stopper.update(epoch.loss);
        trace.push(epoch);
        if stop {
            stopped_early = true;
            break;
        }
    }
    let last = evaluate_stage1(&cge, corpus, cfg, eval_seed)?;
    let report = Stage1Report {
        initial,
        last,
        epochs_run: trace.len(),
        trace,
        stopped_early,
    };
    Ok((cge, report))
}
