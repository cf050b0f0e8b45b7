//! Parameter storage, checkpoints and the numerical building blocks shared
//! by the encoder, bridge and decoder. Everything runs in f64 on the CPU.

pub mod gradcheck;

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor, Var, D};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::store::{cgfb, Matrix};

pub const DEVICE: Device = Device::Cpu;
pub const DTYPE: DType = DType::F64;

/// Large negative additive mask value; finite so fully masked rows stay
/// finite instead of producing NaN.
pub const MASKED: f64 = -1e30;

/// Named trainable tensors plus non-trainable buffers, iterated in name
/// order so optimizers, checksums and checkpoints are deterministic.
#[derive(Default, Clone)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    buffers: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<()> {
        let value = value.to_dtype(DTYPE)?;
        self.vars.insert(name.to_string(), Var::from_tensor(&value)?);
        Ok(())
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Result<()> {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
        let data: Vec<f64> = (0..n).map(|_| dist.sample(rng)).collect();
        self.insert(name, Tensor::from_vec(data, shape, &DEVICE)?)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<()> {
        self.insert(name, Tensor::zeros(shape, DTYPE, &DEVICE)?)
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> Result<()> {
        self.insert(name, Tensor::ones(shape, DTYPE, &DEVICE)?)
    }

    pub fn get(&self, name: &str) -> Result<Tensor> {
        self.vars
            .get(name)
            .map(|v| v.as_tensor().clone())
            .or_else(|| self.buffers.get(name).cloned())
            .ok_or_else(|| Error::Shape(format!("missing parameter `{name}`")))
    }

    pub fn var(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self
            .vars
            .get(name)
            .ok_or_else(|| Error::Shape(format!("missing parameter `{name}`")))?;
        if var.dims() != value.dims() {
            return Err(Error::Shape(format!(
                "`{name}` is {:?}, new value is {:?}",
                var.dims(),
                value.dims()
            )));
        }
        var.set(value)?;
        Ok(())
    }

    pub fn set_buffer(&mut self, name: &str, value: Tensor) {
        self.buffers.insert(name.to_string(), value);
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.vars.keys()
    }

    pub fn vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    pub fn named_vars(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn vars_with_prefix(&self, prefix: &str) -> Vec<Var> {
        self.vars
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v.clone())
            .collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Copy of every tensor, detached from the graph.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Vec<f64>>> {
        self.vars
            .iter()
            .map(|(k, v)| Ok((k.clone(), flat(v.as_tensor())?)))
            .chain(self.buffers.iter().map(|(k, t)| Ok((format!("{k}#buffer"), flat(t)?))))
            .collect()
    }

    /// SHA-256 over names, shapes and the exact bits of every value.
    pub fn checksum(&self) -> Result<String> {
        let mut h = Sha256::new();
        let mut feed = |name: &str, t: &Tensor| -> Result<()> {
            h.update(name.as_bytes());
            for d in t.dims() {
                h.update((*d as u64).to_le_bytes());
            }
            for x in flat(t)? {
                h.update(x.to_le_bytes());
            }
            Ok(())
        };
        for (k, v) in &self.vars {
            feed(k, v.as_tensor())?;
        }
        for (k, t) in &self.buffers {
            feed(k, t)?;
        }
        Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
    }

    /// Write `<stem>.cgfb` (one block per tensor) and `<stem>.json`.
    pub fn save(&self, stem: &Path, config: serde_json::Value) -> Result<()> {
        let mut entries = Vec::new();
        let mut w = BufWriter::new(File::create(with_ext(stem, "cgfb"))?);
        let all = self
            .vars
            .iter()
            .map(|(k, v)| (k, v.as_tensor(), true))
            .chain(self.buffers.iter().map(|(k, t)| (k, t, false)));
        for (name, t, trainable) in all {
            let shape = t.dims().to_vec();
            let cols = shape.last().copied().unwrap_or(1);
            let data: Vec<f32> = flat(t)?.into_iter().map(|x| x as f32).collect();
            cgfb::write_block(&mut w, &Matrix::new(data.len() / cols.max(1), cols, data)?)?;
            entries.push(TensorEntry {
                name: name.clone(),
                shape,
                trainable,
            });
        }
        w.flush()?;
        let manifest = Manifest {
            format: "cgfb-checkpoint".into(),
            version: cgfb::VERSION,
            tensors: entries,
            config,
        };
        let mut w = BufWriter::new(File::create(with_ext(stem, "json"))?);
        serde_json::to_writer_pretty(&mut w, &manifest)?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }

    pub fn load(stem: &Path) -> Result<(ParamStore, serde_json::Value)> {
        let manifest: Manifest = serde_json::from_reader(BufReader::new(File::open(with_ext(stem, "json"))?))?;
        if manifest.format != "cgfb-checkpoint" {
            return Err(Error::Format(format!("`{}` is not a checkpoint manifest", manifest.format)));
        }
        let blocks = cgfb::read_blocks(&mut BufReader::new(File::open(with_ext(stem, "cgfb"))?))?;
        if blocks.len() != manifest.tensors.len() {
            return Err(Error::Format(format!(
                "manifest lists {} tensors, file holds {}",
                manifest.tensors.len(),
                blocks.len()
            )));
        }
        let mut store = ParamStore::new();
        for (entry, block) in manifest.tensors.iter().zip(blocks) {
            let n: usize = entry.shape.iter().product();
            if n != block.data.len() {
                return Err(Error::Format(format!(
                    "tensor `{}` has {} values, shape {:?} needs {n}",
                    entry.name,
                    block.data.len(),
                    entry.shape
                )));
            }
            let data: Vec<f64> = block.data.iter().map(|&x| x as f64).collect();
            let t = Tensor::from_vec(data, entry.shape.as_slice(), &DEVICE)?;
            if entry.trainable {
                store.insert(&entry.name, t)?;
            } else {
                store.set_buffer(&entry.name, t);
            }
        }
        Ok((store, manifest.config))
    }

    /// Overwrite values of matching tensors from another store.
    pub fn copy_from(&mut self, other: &ParamStore) -> Result<()> {
        for (k, v) in &other.vars {
            if self.vars.contains_key(k) {
                self.set(k, v.as_tensor())?;
            }
        }
        for (k, t) in &other.buffers {
            if self.buffers.contains_key(k) {
                self.buffers.insert(k.clone(), t.clone());
            }
        }
        Ok(())
    }
}

fn with_ext(stem: &Path, ext: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    tensors: Vec<TensorEntry>,
    config: serde_json::Value,
}

pub fn flat(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.flatten_all()?.to_dtype(DTYPE)?.to_vec1::<f64>()?)
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DTYPE)?.reshape(())?.to_scalar::<f64>()?)
}

pub fn matrix_tensor(m: &Matrix) -> Result<Tensor> {
    let data: Vec<f64> = m.data.iter().map(|&x| x as f64).collect();
    Ok(Tensor::from_vec(data, (m.rows, m.cols), &DEVICE)?)
}

pub fn ids_tensor(ids: &[u32]) -> Result<Tensor> {
    Ok(Tensor::from_vec(ids.to_vec(), ids.len(), &DEVICE)?)
}

/// `x @ w (+ b)` with `w` stored as (in, out).
pub fn linear(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let y = x.matmul(w)?;
    Ok(match b {
        Some(b) => y.broadcast_add(b)?,
        None => y,
    })
}

pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    let normed = centered.broadcast_div(&(var + eps)?.sqrt()?)?;
    Ok(normed.broadcast_mul(gamma)?.broadcast_add(beta)?)
}

pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let m = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&m)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

pub fn log_softmax_last(x: &Tensor) -> Result<Tensor> {
    let m = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&m)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

/// Per-row negative log-likelihood of `targets` under `logits` (n x C).
pub fn nll_rows(logits: &Tensor, targets: &[u32]) -> Result<Tensor> {
    let n = logits.dim(0)?;
    if targets.len() != n {
        return Err(Error::Shape(format!("{} targets for {n} rows", targets.len())));
    }
    let idx = Tensor::from_vec(targets.to_vec(), (n, 1), &DEVICE)?;
    Ok(log_softmax_last(logits)?.gather(&idx, 1)?.squeeze(1)?.neg()?)
}

pub fn cross_entropy(logits: &Tensor, targets: &[u32]) -> Result<Tensor> {
    Ok(nll_rows(logits, targets)?.mean_all()?)
}

/// Row-wise L2 normalization; rejects zero rows.
pub fn l2_normalize_rows(x: &Tensor, what: &str) -> Result<Tensor> {
    let norms = x.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?;
    if flat(&norms)?.iter().any(|&n| n == 0.0 || !n.is_finite()) {
        return Err(Error::DegenerateInput(format!("{what} has a zero-norm row")));
    }
    Ok(x.broadcast_div(&norms)?)
}

/// Additive attention mask (n x m) from a visibility predicate.
pub fn mask(n: usize, m: usize, visible: impl Fn(usize, usize) -> bool) -> Result<Tensor> {
    let data: Vec<f64> = (0..n)
        .flat_map(|i| (0..m).map(move |j| (i, j)))
        .map(|(i, j)| if visible(i, j) { 0.0 } else { MASKED })
        .collect();
    Ok(Tensor::from_vec(data, (n, m), &DEVICE)?)
}

/// Multi-head scaled dot-product attention of `q` (n x d) over `k`, `v`
/// (m x d), already projected. `mask` is additive (n x m).
pub fn attend(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize, mask: Option<&Tensor>) -> Result<Tensor> {
    let (n, d) = q.dims2()?;
    let m = k.dim(0)?;
    if d % heads != 0 {
        return Err(Error::Shape(format!("width {d} not divisible by {heads} heads")));
    }
    let dk = d / heads;
    let split = |t: &Tensor, rows: usize| -> Result<Tensor> {
        Ok(t.reshape((rows, heads, dk))?.transpose(0, 1)?.contiguous()?)
    };
    let (qh, kh, vh) = (split(q, n)?, split(k, m)?, split(v, m)?);
    let mut scores = (qh.matmul(&kh.transpose(1, 2)?.contiguous()?)? / (dk as f64).sqrt())?;
    if let Some(mask) = mask {
        scores = scores.broadcast_add(mask)?;
    }
    let att = softmax_last(&scores)?;
    Ok(att.matmul(&vh)?.transpose(0, 1)?.contiguous()?.reshape((n, d))?)
}

/// Inverted dropout with a mask drawn from `rng`.
pub fn dropout(x: &Tensor, rate: f64, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    if rate <= 0.0 {
        return Ok(x.clone());
    }
    let keep = 1.0 - rate;
    let mask: Vec<f64> = (0..x.elem_count())
        .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
        .collect();
    Ok(x.mul(&Tensor::from_vec(mask, x.dims(), &DEVICE)?)?)
}

/// Reduce-on-plateau learning-rate schedule with linear warmup.
#[derive(Debug, Clone)]
pub struct PlateauSchedule {
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub patience: usize,
    pub factor: f64,
    pub min_lr: f64,
    lr: f64,
    best: f64,
    bad_epochs: usize,
}

impl PlateauSchedule {
    pub fn new(base_lr: f64, warmup_steps: usize, patience: usize, factor: f64, min_lr: f64) -> Self {
        PlateauSchedule {
            base_lr,
            warmup_steps,
            patience,
            factor,
            min_lr,
            lr: base_lr,
            best: f64::INFINITY,
            bad_epochs: 0,
        }
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            self.lr * (step + 1) as f64 / self.warmup_steps as f64
        } else {
            self.lr
        }
    }

    pub fn end_epoch(&mut self, loss: f64) {
        if loss < self.best {
            self.best = loss;
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs > self.patience {
                self.lr = (self.lr * self.factor).max(self.min_lr);
                self.bad_epochs = 0;
            }
        }
    }
}

/// Stops when the monitored loss has not improved for `patience` epochs.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    since_best: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: f64::INFINITY,
            since_best: 0,
        }
    }

    /// Record an epoch; true when training should stop.
    pub fn update(&mut self, loss: f64) -> bool {
        if loss < self.best {
            self.best = loss;
            self.since_best = 0;
        } else {
            self.since_best += 1;
        }
        self.since_best >= self.patience
    }
}

pub fn check_finite(loss: f64, stage: &'static str, batch: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteLoss { stage, batch })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::new(&[[1.0f64, 2.0, 3.0], [-1e3, 0.0, 1e3]], &DEVICE).unwrap();
        let s = softmax_last(&x).unwrap().sum(1).unwrap().to_vec1::<f64>().unwrap();
        assert!(s.iter().all(|v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn uniform_cross_entropy() {
        let logits = Tensor::zeros((4, 31), DTYPE, &DEVICE).unwrap();
        let ce = scalar(&cross_entropy(&logits, &[0, 5, 30, 7]).unwrap()).unwrap();
        assert!((ce - 31f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_standardizes() {
        let x = Tensor::new(&[[1.0f64, 2.0, 3.0, 4.0]], &DEVICE).unwrap();
        let g = Tensor::ones(4, DTYPE, &DEVICE).unwrap();
        let b = Tensor::zeros(4, DTYPE, &DEVICE).unwrap();
        let y = flat(&layer_norm(&x, &g, &b, 0.0).unwrap()).unwrap();
        assert!(y.iter().sum::<f64>().abs() < 1e-12);
        assert!((y.iter().map(|v| v * v).sum::<f64>() / 4.0 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn masked_keys_get_no_weight() {
        let q = Tensor::new(&[[1.0f64, 0.0]], &DEVICE).unwrap();
        let k = Tensor::new(&[[1.0f64, 0.0], [5.0, 0.0]], &DEVICE).unwrap();
        let v = Tensor::new(&[[1.0f64, 2.0], [9.0, 9.0]], &DEVICE).unwrap();
        let m = mask(1, 2, |_, j| j == 0).unwrap();
        let out = flat(&attend(&q, &k, &v, 1, Some(&m)).unwrap()).unwrap();
        assert_eq!(out, vec![1.0, 2.0]);
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = ParamStore::new();
        p.normal("a.w", &[3, 2], 1.0, &mut rng).unwrap();
        p.zeros("a.b", &[2]).unwrap();
        p.set_buffer("bn.mean", Tensor::new(&[0.5f64, 0.25], &DEVICE).unwrap());
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("ck");
        p.save(&stem, serde_json::json!({"k": 1})).unwrap();
        let (q, cfg) = ParamStore::load(&stem).unwrap();
        assert_eq!(cfg["k"], 1);
        let w = flat(&q.get("a.w").unwrap()).unwrap();
        let w0: Vec<f64> = flat(&p.get("a.w").unwrap()).unwrap().iter().map(|&x| x as f32 as f64).collect();
        assert_eq!(w, w0);
        assert_eq!(q.get("bn.mean").unwrap().dims(), &[2]);
        assert_eq!(q.vars().len(), 2);
    }

    #[test]
    fn early_stopping_counts_stale_epochs() {
        let mut es = EarlyStopping::new(2);
        assert!(!es.update(1.0));
        assert!(!es.update(1.0));
        assert!(es.update(1.5));
    }
}
