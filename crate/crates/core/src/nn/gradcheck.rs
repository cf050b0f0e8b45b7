//! Central-difference gradient checking over named parameter tensors.

use candle_core::{Tensor, Var};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{flat, scalar, DEVICE};
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradcheckSettings {
    pub step: f64,
    pub tolerance: f64,
    /// Denominator floor of the relative error, so gradients near zero are
    /// judged on an absolute scale.
    pub floor: f64,
    /// Elements sampled per tensor.
    pub samples: usize,
}

impl Default for GradcheckSettings {
    fn default() -> Self {
        GradcheckSettings {
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-3,
            samples: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupResult {
    pub group: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub pass: bool,
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn write_element(var: &Var, values: &mut [f64], i: usize, v: f64) -> Result<()> {
    values[i] = v;
    var.set(&Tensor::from_slice(values, var.shape(), &DEVICE)?)?;
    Ok(())
}

/// Compares backprop gradients of `loss` against central differences for a
/// seeded sample of elements of every named tensor. `flip` negates the
/// analytic gradient of one group, which must then fail on its own.
pub fn check_gradients(
    loss: &dyn Fn() -> Result<Tensor>,
    groups: &[(String, Var)],
    settings: &GradcheckSettings,
    seed: u64,
    flip: Option<&str>,
) -> Result<Vec<GroupResult>> {
    let grads = loss()?.backward()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(groups.len());
    for (name, var) in groups {
        let n = var.elem_count();
        let analytic = match grads.get(var.as_tensor()) {
            Some(g) => flat(g)?,
            None => vec![0.0; n],
        };
        let sign = if flip == Some(name.as_str()) { -1.0 } else { 1.0 };
        let mut values = flat(var.as_tensor())?;
        let picks = sample(&mut rng, n, settings.samples.min(n));
        let (mut max_rel, mut max_abs) = (0.0f64, 0.0f64);
        for i in picks.iter() {
            let orig = values[i];
            write_element(var, &mut values, i, orig + settings.step)?;
            let plus = scalar(&loss()?)?;
            write_element(var, &mut values, i, orig - settings.step)?;
            let minus = scalar(&loss()?)?;
            write_element(var, &mut values, i, orig)?;
            let numeric = (plus - minus) / (2.0 * settings.step);
            let a = sign * analytic[i];
            max_rel = max_rel.max(relative_error(a, numeric, settings.floor));
            max_abs = max_abs.max((a - numeric).abs());
        }
        out.push(GroupResult {
            group: name.clone(),
            checked: picks.len(),
            max_rel_error: max_rel,
            max_abs_error: max_abs,
            pass: max_rel <= settings.tolerance && max_rel.is_finite(),
        });
    }
    Ok(out)
}
