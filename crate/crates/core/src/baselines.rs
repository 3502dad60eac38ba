//! Comparison models: last observed value, per-station and joint ridge
//! regression, and the regular RNN configurations that reuse the fusion
//! model with a single encoder and decoder.

use nalgebra::DMatrix;

use crate::data::{Dataset, SamplePair};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::tensor::{SeriesTensor3, Tensor};

pub const DEFAULT_LAMBDA: f64 = 1e-3;

/// Repeats the last encoder step of every station over the horizon.
pub fn last_observed(x: &SeriesTensor3, t_dec: usize) -> Result<SeriesTensor3> {
    if x.rank() != 3 || t_dec == 0 {
        return Err(Error::shape("last_observed", x.shape(), &[0, 0, 0]));
    }
    let (e, t_enc, f) = (x.dim(0), x.dim(1), x.dim(2));
    let mut out = Tensor::zeros(&[e, t_dec, f]);
    for j in 0..e {
        let last = x.row3(j, t_enc - 1);
        for t in 0..t_dec {
            out.row3_mut(j, t).copy_from_slice(last);
        }
    }
    Ok(out)
}

/// Linear map from a flattened input window (plus an optional constant 1)
/// to a flattened output window.
#[derive(Debug, Clone, PartialEq)]
pub struct RidgeModel {
    /// `[outputs × (inputs + bias)]`
    pub weights: Tensor,
    pub lambda: f64,
    pub bias: bool,
}

impl RidgeModel {
    pub fn inputs(&self) -> usize {
        self.weights.dim(1) - usize::from(self.bias)
    }

    pub fn outputs(&self) -> usize {
        self.weights.dim(0)
    }

    pub fn predict_row(&self, x: &[f64]) -> Vec<f64> {
        let cols = self.weights.dim(1);
        (0..self.outputs())
            .map(|r| {
                let row = &self.weights.data()[r * cols..(r + 1) * cols];
                let mut acc = 0.0;
                for (w, v) in row.iter().zip(x) {
                    acc += w * v;
                }
                if self.bias {
                    acc += row[cols - 1];
                }
                acc
            })
            .collect()
    }
}

/// Solves `(AᵀA + λ·P)·Wᵀ = AᵀB` by Cholesky, where `P` is the identity
/// except for a zero on the bias column (the last one, when `bias`).
///
/// `a` is `[n × p]` without the bias column; it is appended here.
pub fn ridge_solve(a: &Tensor, b: &Tensor, lambda: f64, bias: bool) -> Result<RidgeModel> {
    if a.rank() != 2 || b.rank() != 2 || a.dim(0) != b.dim(0) {
        return Err(Error::shape("ridge_solve", a.shape(), b.shape()));
    }
    if !(lambda >= 0.0) {
        return Err(Error::InvalidArgument(format!("lambda must be >= 0, got {lambda}")));
    }
    let (n, p, q) = (a.dim(0), a.dim(1), b.dim(1));
    let cols = p + usize::from(bias);
    let design = DMatrix::from_fn(n, cols, |r, c| if c < p { a.data()[r * p + c] } else { 1.0 });
    let targets = DMatrix::from_row_slice(n, q, b.data());
    let mut gram = design.transpose() * &design;
    for k in 0..p {
        gram[(k, k)] += lambda;
    }
    let rhs = design.transpose() * targets;

    let chol = gram.clone().cholesky().ok_or(Error::SingularSystem)?;
    if lambda == 0.0 {
        let l = chol.l();
        let diag: Vec<f64> = (0..cols).map(|k| l[(k, k)] * l[(k, k)]).collect();
        let max = diag.iter().cloned().fold(0.0, f64::max);
        if diag.iter().any(|&d| d <= 1e-12 * max) {
            return Err(Error::SingularSystem);
        }
    }
    let solution = chol.solve(&rhs); // [cols × q]
    let mut weights = Tensor::zeros(&[q, cols]);
    for r in 0..q {
        for c in 0..cols {
            weights.data_mut()[r * cols + c] = solution[(c, r)];
        }
    }
    Ok(RidgeModel {
        weights,
        lambda,
        bias,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub enum LinearBaseline {
    /// One model per station over that station's own features.
    PerStation(Vec<RidgeModel>),
    /// One model over all stations' concatenated windows.
    Joint(RidgeModel),
}

fn station_design(samples: &[SamplePair], j: usize) -> Result<(Tensor, Tensor)> {
    let n = samples.len();
    let p = samples[0].x.outer(j).len();
    let q = samples[0].y.outer(j).len();
    let mut a = Vec::with_capacity(n * p);
    let mut b = Vec::with_capacity(n * q);
    for s in samples {
        a.extend_from_slice(s.x.outer(j));
        b.extend_from_slice(s.y.outer(j));
    }
    Ok((Tensor::from_vec(&[n, p], a)?, Tensor::from_vec(&[n, q], b)?))
}

fn joint_design(samples: &[SamplePair]) -> Result<(Tensor, Tensor)> {
    let n = samples.len();
    let (p, q) = (samples[0].x.len(), samples[0].y.len());
    let mut a = Vec::with_capacity(n * p);
    let mut b = Vec::with_capacity(n * q);
    for s in samples {
        a.extend_from_slice(s.x.data());
        b.extend_from_slice(s.y.data());
    }
    Ok((Tensor::from_vec(&[n, p], a)?, Tensor::from_vec(&[n, q], b)?))
}

/// Fits the linear baseline on flattened `time × feature` windows with a
/// bias column.
pub fn ridge_fit(data: &Dataset, joint: bool, lambda: f64) -> Result<LinearBaseline> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("ridge_fit needs at least one sample".into()));
    }
    let first = &data.samples[0];
    if first.x.dim(0) != first.y.dim(0) || first.x.dim(2) != first.y.dim(2) {
        return Err(Error::shape("ridge_fit", first.x.shape(), first.y.shape()));
    }
    if joint {
        let (a, b) = joint_design(&data.samples)?;
        Ok(LinearBaseline::Joint(ridge_solve(&a, &b, lambda, true)?))
    } else {
        (0..first.x.dim(0))
            .map(|j| {
                let (a, b) = station_design(&data.samples, j)?;
                ridge_solve(&a, &b, lambda, true)
            })
            .collect::<Result<Vec<_>>>()
            .map(LinearBaseline::PerStation)
    }
}

/// Predicts `[D × T_dec × F]` for one input window.
pub fn ridge_predict(model: &LinearBaseline, x: &SeriesTensor3, t_dec: usize) -> Result<SeriesTensor3> {
    let (e, f) = (x.dim(0), x.dim(2));
    match model {
        LinearBaseline::Joint(m) => {
            if m.inputs() != x.len() || m.outputs() != e * t_dec * f {
                return Err(Error::shape("ridge_predict", x.shape(), &[m.inputs(), m.outputs()]));
            }
            Tensor::from_vec(&[e, t_dec, f], m.predict_row(x.data()))
        }
        LinearBaseline::PerStation(models) => {
            if models.len() != e {
                return Err(Error::shape("ridge_predict", x.shape(), &[models.len()]));
            }
            let mut out = Vec::with_capacity(e * t_dec * f);
            for (j, m) in models.iter().enumerate() {
                if m.inputs() != x.outer(j).len() || m.outputs() != t_dec * f {
                    return Err(Error::shape("ridge_predict", x.shape(), &[m.inputs(), m.outputs()]));
                }
                out.extend(m.predict_row(x.outer(j)));
            }
            Tensor::from_vec(&[e, t_dec, f], out)
        }
    }
}

/// Configurations for the regular RNN baselines: one single-station model per
/// station, and one model over the station-concatenated feature vector.
pub fn regular_rnn_configs(base: &ModelConfig) -> (Vec<ModelConfig>, ModelConfig) {
    let single = ModelConfig {
        e: 1,
        d: 1,
        ..base.clone()
    };
    let per_station = vec![single; base.d];
    let joint = ModelConfig {
        e: 1,
        d: 1,
        f_enc: base.e * base.f_enc,
        f_dec: base.d * base.f_dec,
        ..base.clone()
    };
    (per_station, joint)
}

/// Station `j`'s slab as a single-station `[1 × T × F]` tensor.
pub fn station_tensor(t: &SeriesTensor3, j: usize) -> SeriesTensor3 {
    Tensor::from_vec(&[1, t.dim(1), t.dim(2)], t.outer(j).to_vec()).expect("valid slab")
}

/// `[S × T × F]` → `[1 × T × (S·F)]`, station-major within each step.
pub fn to_joint(t: &SeriesTensor3) -> SeriesTensor3 {
    let (s, steps, f) = (t.dim(0), t.dim(1), t.dim(2));
    let mut out = Tensor::zeros(&[1, steps, s * f]);
    for step in 0..steps {
        let row = out.row3_mut(0, step);
        for i in 0..s {
            row[i * f..(i + 1) * f].copy_from_slice(t.row3(i, step));
        }
    }
    out
}

/// Inverse of [`to_joint`].
pub fn from_joint(t: &SeriesTensor3, stations: usize) -> Result<SeriesTensor3> {
    let (steps, width) = (t.dim(1), t.dim(2));
    if t.dim(0) != 1 || width % stations != 0 {
        return Err(Error::shape("from_joint", t.shape(), &[1, steps, stations]));
    }
    let f = width / stations;
    let mut out = Tensor::zeros(&[stations, steps, f]);
    for step in 0..steps {
        let row = t.row3(0, step);
        for i in 0..stations {
            out.row3_mut(i, step).copy_from_slice(&row[i * f..(i + 1) * f]);
        }
    }
    Ok(out)
}

pub fn station_dataset(data: &Dataset, j: usize) -> Dataset {
    Dataset {
        samples: data
            .samples
            .iter()
            .map(|s| SamplePair {
                x: station_tensor(&s.x, j),
                y: station_tensor(&s.y, j),
                start: s.start,
            })
            .collect(),
        ..data.clone()
    }
}

pub fn joint_dataset(data: &Dataset) -> Dataset {
    Dataset {
        samples: data
            .samples
            .iter()
            .map(|s| SamplePair {
                x: to_joint(&s.x),
                y: to_joint(&s.y),
                start: s.start,
            })
            .collect(),
        ..data.clone()
    }
}
