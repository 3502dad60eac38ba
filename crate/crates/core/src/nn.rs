//! Recurrent cell and scoring network primitives with hand-derived backward
//! passes, plus a central-difference gradient checker.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{self, Rng, Tensor};

/// Glorot-uniform matrix: entries drawn from `±√(6 / (fan_in + fan_out))`.
pub fn glorot(rows: usize, cols: usize, rng: &mut Rng) -> Tensor {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::from_fn(&[rows, cols], || rng.uniform_range(-limit, limit))
}

/// A recurrent transition `h_t = step(x_t, h_{t-1})`.
///
/// The fusion model only talks to its encoders and decoders through this
/// trait, so a different cell can be substituted without touching the
/// attention or training code.
pub trait RecurrentCell {
    type Cache;

    fn input_size(&self) -> usize;
    fn hidden_size(&self) -> usize;

    fn step(&self, x: &[f64], h_prev: &[f64]) -> (Vec<f64>, Self::Cache);

    /// Accumulates parameter gradients into `grads` and returns
    /// `(dx, dh_prev)`.
    fn step_backward(&self, cache: &Self::Cache, dh: &[f64], grads: &mut Self)
        -> (Vec<f64>, Vec<f64>);
}

/// Parameters of a vanilla tanh cell `h = tanh(W_x·x + W_h·h_prev + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RnnCellParams {
    pub w_x: Tensor,
    pub w_h: Tensor,
    pub b: Tensor,
}

#[derive(Debug, Clone)]
pub struct StepCache {
    pub x: Vec<f64>,
    pub h_prev: Vec<f64>,
    pub h: Vec<f64>,
}

impl RnnCellParams {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        RnnCellParams {
            w_x: Tensor::zeros(&[hidden, input]),
            w_h: Tensor::zeros(&[hidden, hidden]),
            b: Tensor::zeros(&[hidden]),
        }
    }

    pub fn init(input: usize, hidden: usize, rng: &mut Rng) -> Self {
        RnnCellParams {
            w_x: glorot(hidden, input, rng),
            w_h: glorot(hidden, hidden, rng),
            b: Tensor::zeros(&[hidden]),
        }
    }

    pub fn arrays(&self) -> [(&'static str, &Tensor); 3] {
        [("w_x", &self.w_x), ("w_h", &self.w_h), ("b", &self.b)]
    }

    pub fn arrays_mut(&mut self) -> [(&'static str, &mut Tensor); 3] {
        [
            ("w_x", &mut self.w_x),
            ("w_h", &mut self.w_h),
            ("b", &mut self.b),
        ]
    }
}

impl RecurrentCell for RnnCellParams {
    type Cache = StepCache;

    fn input_size(&self) -> usize {
        self.w_x.dim(1)
    }

    fn hidden_size(&self) -> usize {
        self.w_x.dim(0)
    }

    fn step(&self, x: &[f64], h_prev: &[f64]) -> (Vec<f64>, StepCache) {
        let mut h = self.b.data().to_vec();
        tensor::matvec_acc(self.w_x.data(), x.len(), x, &mut h);
        tensor::matvec_acc(self.w_h.data(), h_prev.len(), h_prev, &mut h);
        h.iter_mut().for_each(|v| *v = v.tanh());
        let cache = StepCache {
            x: x.to_vec(),
            h_prev: h_prev.to_vec(),
            h: h.clone(),
        };
        (h, cache)
    }

    fn step_backward(
        &self,
        cache: &StepCache,
        dh: &[f64],
        grads: &mut Self,
    ) -> (Vec<f64>, Vec<f64>) {
        let da: Vec<f64> = dh
            .iter()
            .zip(&cache.h)
            .map(|(g, h)| g * (1.0 - h * h))
            .collect();
        tensor::outer_acc(grads.w_x.data_mut(), &da, &cache.x);
        tensor::outer_acc(grads.w_h.data_mut(), &da, &cache.h_prev);
        tensor::add_into(grads.b.data_mut(), &da);
        let mut dx = vec![0.0; cache.x.len()];
        tensor::matvec_t_acc(self.w_x.data(), cache.x.len(), &da, &mut dx);
        let mut dh_prev = vec![0.0; cache.h_prev.len()];
        tensor::matvec_t_acc(self.w_h.data(), cache.h_prev.len(), &da, &mut dh_prev);
        (dx, dh_prev)
    }
}

fn check_len(op: &'static str, t: &Tensor, n: usize) -> Result<()> {
    if t.rank() != 1 || t.len() != n {
        return Err(Error::shape(op, t.shape(), &[n]));
    }
    Ok(())
}

/// One checked tanh-cell step on tensors.
pub fn rnn_step(x: &Tensor, h_prev: &Tensor, p: &RnnCellParams) -> Result<Tensor> {
    check_len("rnn_step input", x, p.input_size())?;
    check_len("rnn_step hidden", h_prev, p.hidden_size())?;
    let (h, _) = p.step(x.data(), h_prev.data());
    Ok(Tensor::vector(h))
}

/// Backward of a single step; returns `(dx, dh_prev)` and adds the weight
/// gradients into `grads`.
pub fn rnn_step_backward(
    p: &RnnCellParams,
    cache: &StepCache,
    dh: &Tensor,
    grads: &mut RnnCellParams,
) -> Result<(Tensor, Tensor)> {
    check_len("rnn_step_backward", dh, p.hidden_size())?;
    if cache.x.len() != p.input_size() || cache.h.len() != p.hidden_size() {
        return Err(Error::shape(
            "rnn_step_backward cache",
            &[cache.x.len(), cache.h.len()],
            &[p.input_size(), p.hidden_size()],
        ));
    }
    let (dx, dh_prev) = p.step_backward(cache, dh.data(), grads);
    Ok((Tensor::vector(dx), Tensor::vector(dh_prev)))
}

/// One-hidden-layer scorer `z = W2·tanh(W1·e + b1) + b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct FfnParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

#[derive(Debug, Clone)]
pub struct FfnCache {
    pub e: Vec<f64>,
    pub a: Vec<f64>,
    /// `W2·a` before the output bias.
    pub s: f64,
}

impl FfnParams {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        FfnParams {
            w1: Tensor::zeros(&[hidden, input]),
            b1: Tensor::zeros(&[hidden]),
            w2: Tensor::zeros(&[1, hidden]),
            b2: Tensor::zeros(&[1]),
        }
    }

    pub fn init(input: usize, hidden: usize, rng: &mut Rng) -> Self {
        FfnParams {
            w1: glorot(hidden, input, rng),
            b1: Tensor::zeros(&[hidden]),
            w2: glorot(1, hidden, rng),
            b2: Tensor::zeros(&[1]),
        }
    }

    pub fn input_size(&self) -> usize {
        self.w1.dim(1)
    }

    pub fn arrays(&self) -> [(&'static str, &Tensor); 4] {
        [
            ("w1", &self.w1),
            ("b1", &self.b1),
            ("w2", &self.w2),
            ("b2", &self.b2),
        ]
    }

    pub fn arrays_mut(&mut self) -> [(&'static str, &mut Tensor); 4] {
        [
            ("w1", &mut self.w1),
            ("b1", &mut self.b1),
            ("w2", &mut self.w2),
            ("b2", &mut self.b2),
        ]
    }

    pub(crate) fn forward(&self, e: &[f64]) -> (f64, FfnCache) {
        let mut a = self.b1.data().to_vec();
        tensor::matvec_acc(self.w1.data(), e.len(), e, &mut a);
        a.iter_mut().for_each(|v| *v = v.tanh());
        let s = tensor::dot(self.w2.data(), &a);
        (s + self.b2.data()[0], FfnCache { e: e.to_vec(), a, s })
    }

    /// Accumulates into `grads`, returns `dz/de · dz`.
    pub(crate) fn backward(&self, cache: &FfnCache, dz: f64, grads: &mut FfnParams) -> Vec<f64> {
        let mut de = vec![0.0; cache.e.len()];
        if dz == 0.0 {
            return de;
        }
        tensor::outer_acc(grads.w2.data_mut(), &[dz], &cache.a);
        grads.b2.data_mut()[0] += dz;
        let dpre: Vec<f64> = self
            .w2
            .data()
            .iter()
            .zip(&cache.a)
            .map(|(w, a)| w * dz * (1.0 - a * a))
            .collect();
        tensor::outer_acc(grads.w1.data_mut(), &dpre, &cache.e);
        tensor::add_into(grads.b1.data_mut(), &dpre);
        tensor::matvec_t_acc(self.w1.data(), cache.e.len(), &dpre, &mut de);
        de
    }
}

pub fn ffn_score(e: &Tensor, p: &FfnParams) -> Result<f64> {
    check_len("ffn_score", e, p.input_size())?;
    Ok(p.forward(e.data()).0)
}

/// Above this many coordinates the checker probes a seeded random subsample.
pub const GRAD_CHECK_FULL_LIMIT: usize = 5_000;
pub const GRAD_CHECK_SUBSAMPLE: usize = 200;

/// Compares an analytic gradient against central differences.
///
/// `f` returns the loss and its gradient at the given parameter vector.
/// Returns the largest `|a − n| / max(1e−8, |a| + |n|)` over the probed
/// coordinates.
pub fn grad_check<F>(f: F, theta: &[f64], eps: f64, seed: u64) -> Result<f64>
where
    F: Fn(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("eps must be positive, got {eps}")));
    }
    let (loss, analytic) = f(theta)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("loss {loss} at the check point")));
    }
    if analytic.len() != theta.len() {
        return Err(Error::shape("grad_check", &[analytic.len()], &[theta.len()]));
    }
    let coords: Vec<usize> = if theta.len() <= GRAD_CHECK_FULL_LIMIT {
        (0..theta.len()).collect()
    } else {
        let mut idx: Vec<usize> = (0..theta.len()).collect();
        Rng::new(seed).shuffle(&mut idx);
        idx.truncate(GRAD_CHECK_SUBSAMPLE);
        idx.sort_unstable();
        idx
    };

    let mut probe = theta.to_vec();
    let mut worst = 0.0f64;
    for i in coords {
        probe[i] = theta[i] + eps;
        let (lp, _) = f(&probe)?;
        probe[i] = theta[i] - eps;
        let (lm, _) = f(&probe)?;
        probe[i] = theta[i];
        if !lp.is_finite() || !lm.is_finite() {
            return Err(Error::NonFinite(format!("loss at coordinate {i}")));
        }
        let numeric = (lp - lm) / (2.0 * eps);
        let a = analytic[i];
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}

/// Serializable cell description kept next to the weights in checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CellKind {
    #[default]
    Tanh,
}
