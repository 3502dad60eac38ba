//! The multi-encoder-decoder network with spatial attention fusion.
//!
//! Each of the `E` input stations is summarised by its own recurrent
//! encoder; the final hidden state `e_i` is that station's latent vector.
//! For every output station `j` a scoring network rates each `e_i`, the
//! scores are normalised with a (masked) softmax and the weighted sum of the
//! latent vectors seeds the hidden state of decoder `j`, which then unrolls
//! `T_dec` steps feeding back its own previous output.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{CellKind, FfnCache, FfnParams, RecurrentCell, RnnCellParams, StepCache};
use crate::tensor::{self, Rng, SeriesTensor3, Tensor};

/// What the decoder receives as input at its first step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DecoderStart {
    #[default]
    Zero,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Encoder (input station) count.
    pub e: usize,
    /// Decoder (output station) count.
    pub d: usize,
    pub t_enc: usize,
    pub t_dec: usize,
    pub f_enc: usize,
    pub f_dec: usize,
    /// Hidden size shared by encoders and decoders.
    pub h: usize,
    /// Hidden width of the attention scoring network.
    pub p_att: usize,
    /// Multiply the fused vector by `1 / E_present`.
    #[serde(default)]
    pub mean_scale: bool,
    /// One scoring network for all decoders instead of one per decoder.
    #[serde(default)]
    pub share_attention: bool,
    /// Feed ground truth to the decoders during training.
    #[serde(default)]
    pub teacher_forcing: bool,
    #[serde(default)]
    pub cell: CellKind,
    #[serde(default)]
    pub decoder_start: DecoderStart,
}

pub const DEFAULT_HIDDEN: usize = 32;
pub const DEFAULT_ATTENTION_WIDTH: usize = 16;

impl ModelConfig {
    /// Square configuration (`E = D`, `F_enc = F_dec`) with the library
    /// defaults for everything else.
    pub fn square(stations: usize, features: usize, t_enc: usize, t_dec: usize) -> Self {
        ModelConfig {
            e: stations,
            d: stations,
            t_enc,
            t_dec,
            f_enc: features,
            f_dec: features,
            h: DEFAULT_HIDDEN,
            p_att: DEFAULT_ATTENTION_WIDTH,
            mean_scale: false,
            share_attention: false,
            teacher_forcing: false,
            cell: CellKind::Tanh,
            decoder_start: DecoderStart::Zero,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("e", self.e),
            ("d", self.d),
            ("t_enc", self.t_enc),
            ("t_dec", self.t_dec),
            ("f_enc", self.f_enc),
            ("f_dec", self.f_dec),
            ("h", self.h),
            ("p_att", self.p_att),
        ];
        let bad: Vec<String> = fields
            .iter()
            .filter(|(_, v)| *v == 0)
            .map(|(k, _)| format!("model.{k} must be at least 1"))
            .collect();
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad))
        }
    }

    pub fn attention_nets(&self) -> usize {
        if self.share_attention {
            1
        } else {
            self.d
        }
    }

    pub fn input_shape(&self) -> [usize; 3] {
        [self.e, self.t_enc, self.f_enc]
    }

    pub fn output_shape(&self) -> [usize; 3] {
        [self.d, self.t_dec, self.f_dec]
    }

    pub fn param_count(&self) -> usize {
        let cell = |f: usize| self.h * f + self.h * self.h + self.h;
        let att = self.p_att * self.h + self.p_att + self.p_att + 1;
        let out = self.f_dec * self.h + self.f_dec;
        self.e * cell(self.f_enc) + self.attention_nets() * att + self.d * (cell(self.f_dec) + out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderParams {
    pub cell: RnnCellParams,
    pub w_out: Tensor,
    pub b_out: Tensor,
}

/// All trainable arrays of the fusion model.
///
/// Arrays are enumerated in a fixed order (encoders, attention networks,
/// decoders) which defines the flat layout used by the optimizer, the
/// gradient checker and checkpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterStore {
    pub enc: Vec<RnnCellParams>,
    pub att: Vec<FfnParams>,
    pub dec: Vec<DecoderParams>,
}

/// Gradients share the parameter layout.
pub type GradBuffer = ParameterStore;

impl ParameterStore {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        ParameterStore {
            enc: (0..cfg.e).map(|_| RnnCellParams::zeros(cfg.f_enc, cfg.h)).collect(),
            att: (0..cfg.attention_nets())
                .map(|_| FfnParams::zeros(cfg.h, cfg.p_att))
                .collect(),
            dec: (0..cfg.d)
                .map(|_| DecoderParams {
                    cell: RnnCellParams::zeros(cfg.f_dec, cfg.h),
                    w_out: Tensor::zeros(&[cfg.f_dec, cfg.h]),
                    b_out: Tensor::zeros(&[cfg.f_dec]),
                })
                .collect(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.for_each_mut(|t| t.fill(0.0));
        z
    }

    pub fn named_arrays(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, p) in self.enc.iter().enumerate() {
            for (n, t) in p.arrays() {
                out.push((format!("enc.{i}.{n}"), t));
            }
        }
        for (j, p) in self.att.iter().enumerate() {
            for (n, t) in p.arrays() {
                out.push((format!("att.{j}.{n}"), t));
            }
        }
        for (j, p) in self.dec.iter().enumerate() {
            for (n, t) in p.cell.arrays() {
                out.push((format!("dec.{j}.{n}"), t));
            }
            out.push((format!("dec.{j}.w_out"), &p.w_out));
            out.push((format!("dec.{j}.b_out"), &p.b_out));
        }
        out
    }

    fn arrays_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for p in &mut self.enc {
            out.extend(p.arrays_mut().into_iter().map(|(_, t)| t));
        }
        for p in &mut self.att {
            out.extend(p.arrays_mut().into_iter().map(|(_, t)| t));
        }
        for p in &mut self.dec {
            out.extend(p.cell.arrays_mut().into_iter().map(|(_, t)| t));
            out.push(&mut p.w_out);
            out.push(&mut p.b_out);
        }
        out
    }

    pub fn for_each_mut(&mut self, mut f: impl FnMut(&mut Tensor)) {
        for t in self.arrays_mut() {
            f(t);
        }
    }

    pub fn len(&self) -> usize {
        self.named_arrays().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        for (_, t) in self.named_arrays() {
            out.extend_from_slice(t.data());
        }
        out
    }

    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.len() {
            return Err(Error::shape("assign_flat", &[flat.len()], &[self.len()]));
        }
        let mut offset = 0;
        self.for_each_mut(|t| {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        });
        Ok(())
    }

    pub fn unflatten(cfg: &ModelConfig, flat: &[f64]) -> Result<Self> {
        let mut p = ParameterStore::zeros(cfg);
        p.assign_flat(flat)?;
        Ok(p)
    }

    /// `self += k · other`, array by array.
    pub fn add_scaled(&mut self, other: &ParameterStore, k: f64) {
        let src = other.flatten();
        let mut offset = 0;
        self.for_each_mut(|t| {
            for v in t.data_mut() {
                *v += k * src[offset];
                offset += 1;
            }
        });
    }

    pub fn scale(&mut self, k: f64) {
        self.for_each_mut(|t| t.scale(k));
    }

    pub fn norm(&self) -> f64 {
        self.named_arrays()
            .iter()
            .fold(0.0, |acc, (_, t)| acc + t.sum_sq())
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.named_arrays().iter().all(|(_, t)| t.all_finite())
    }

    /// SHA-256 over the little-endian bytes of every array, hex encoded.
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for (_, t) in self.named_arrays() {
            for v in t.data() {
                hasher.update(v.to_le_bytes());
            }
        }
        hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn attention_for(&self, j: usize) -> &FfnParams {
        if self.att.len() == 1 {
            &self.att[0]
        } else {
            &self.att[j]
        }
    }

    fn attention_slot(&self, j: usize) -> usize {
        if self.att.len() == 1 {
            0
        } else {
            j
        }
    }

    pub fn check_config(&self, cfg: &ModelConfig) -> Result<()> {
        let expected = ParameterStore::zeros(cfg);
        let ours = self.named_arrays();
        let theirs = expected.named_arrays();
        if ours.len() != theirs.len() {
            return Err(Error::shape("parameter store", &[ours.len()], &[theirs.len()]));
        }
        for ((_, a), (name, b)) in ours.iter().zip(&theirs) {
            if a.shape() != b.shape() {
                return Err(Error::InvalidShape {
                    shape: a.shape().to_vec(),
                    reason: format!("{name} should be {:?}", b.shape()),
                });
            }
        }
        Ok(())
    }
}

/// Glorot-uniform weights, zero biases; the draw order follows the array
/// order of [`ParameterStore`].
pub fn init_params(cfg: &ModelConfig, seed: u64) -> ParameterStore {
    let mut rng = Rng::new(seed);
    let enc = (0..cfg.e)
        .map(|_| RnnCellParams::init(cfg.f_enc, cfg.h, &mut rng))
        .collect();
    let att = (0..cfg.attention_nets())
        .map(|_| FfnParams::init(cfg.h, cfg.p_att, &mut rng))
        .collect();
    let dec = (0..cfg.d)
        .map(|_| {
            let cell = RnnCellParams::init(cfg.f_dec, cfg.h, &mut rng);
            DecoderParams {
                cell,
                w_out: crate::nn::glorot(cfg.f_dec, cfg.h, &mut rng),
                b_out: Tensor::zeros(&[cfg.f_dec]),
            }
        })
        .collect();
    ParameterStore { enc, att, dec }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderState {
    pub e: Vec<Tensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTrace {
    /// Raw scores `[D × E]`; zero where the encoder is masked out.
    pub z: Tensor,
    /// Normalised weights `[D × E]`.
    pub w: Tensor,
    pub mask: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Forecast {
    pub y_hat: SeriesTensor3,
    pub trace: AttentionTrace,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Attended {
    pub c: Tensor,
    pub z: Vec<f64>,
    pub w: Vec<f64>,
}

pub fn full_mask(e: usize) -> Vec<bool> {
    vec![true; e]
}

fn check_mask(cfg: &ModelConfig, mask: &[bool]) -> Result<()> {
    if mask.len() != cfg.e {
        return Err(Error::shape("mask", &[mask.len()], &[cfg.e]));
    }
    if !mask.iter().any(|&m| m) {
        return Err(Error::EmptyAttentionSupport);
    }
    Ok(())
}

fn check_input(x: &SeriesTensor3, cfg: &ModelConfig, mask: &[bool]) -> Result<()> {
    if x.shape() != cfg.input_shape() {
        return Err(Error::shape("encoder input", x.shape(), &cfg.input_shape()));
    }
    for (i, &present) in mask.iter().enumerate() {
        if present && x.outer(i).iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("encoder input for station {i}")));
        }
    }
    Ok(())
}

fn check_output(y: &SeriesTensor3, cfg: &ModelConfig, what: &'static str) -> Result<()> {
    if y.shape() != cfg.output_shape() {
        return Err(Error::shape(what, y.shape(), &cfg.output_shape()));
    }
    Ok(())
}

struct EncoderCache {
    steps: Vec<StepCache>,
}

struct AttendCache {
    /// Scoring caches indexed by encoder; `None` when masked out.
    ffn: Vec<Option<FfnCache>>,
    w: Vec<f64>,
    scale: f64,
}

struct DecoderCache {
    steps: Vec<StepCache>,
}

struct ForwardCache {
    enc: Vec<Option<EncoderCache>>,
    e: Vec<Vec<f64>>,
    att: Vec<AttendCache>,
    dec: Vec<DecoderCache>,
    teacher_forced: bool,
}

fn encode_one(x: &SeriesTensor3, i: usize, p: &RnnCellParams, cfg: &ModelConfig) -> (Vec<f64>, EncoderCache) {
    let mut h = vec![0.0; cfg.h];
    let mut steps = Vec::with_capacity(cfg.t_enc);
    for t in 0..cfg.t_enc {
        let (next, cache) = p.step(x.row3(i, t), &h);
        steps.push(cache);
        h = next;
    }
    (h, EncoderCache { steps })
}

fn attend_inner(
    e: &[Vec<f64>],
    j: usize,
    params: &ParameterStore,
    cfg: &ModelConfig,
    mask: &[bool],
) -> Result<(Attended, AttendCache)> {
    let scorer = params.attention_for(j);
    let mut z = vec![0.0; cfg.e];
    // the output bias is common to every score and cancels in the softmax;
    // leaving it out keeps that cancellation exact in floating point
    let mut s = vec![0.0; cfg.e];
    let mut ffn = Vec::with_capacity(cfg.e);
    for (i, ei) in e.iter().enumerate() {
        if mask[i] {
            let (score, cache) = scorer.forward(ei);
            z[i] = score;
            s[i] = cache.s;
            ffn.push(Some(cache));
        } else {
            ffn.push(None);
        }
    }
    let mut w = vec![0.0; cfg.e];
    tensor::softmax_into(&s, Some(mask), &mut w)?;
    let present = mask.iter().filter(|&&m| m).count();
    let scale = if cfg.mean_scale { 1.0 / present as f64 } else { 1.0 };
    let mut c = vec![0.0; cfg.h];
    for (i, ei) in e.iter().enumerate() {
        if mask[i] {
            for (ck, ek) in c.iter_mut().zip(ei) {
                *ck += w[i] * ek;
            }
        }
    }
    c.iter_mut().for_each(|v| *v *= scale);
    let attended = Attended {
        c: Tensor::vector(c),
        z,
        w: w.clone(),
    };
    Ok((attended, AttendCache { ffn, w, scale }))
}

fn decode_inner(
    c: &[f64],
    j: usize,
    params: &ParameterStore,
    cfg: &ModelConfig,
    teacher: Option<&[f64]>,
    out: &mut [f64],
) -> DecoderCache {
    let p = &params.dec[j];
    let f = cfg.f_dec;
    let mut h = c.to_vec();
    let mut input = vec![0.0; f];
    let mut steps = Vec::with_capacity(cfg.t_dec);
    for t in 0..cfg.t_dec {
        if t > 0 {
            let src = match teacher {
                Some(rows) => &rows[(t - 1) * f..t * f],
                None => &out[(t - 1) * f..t * f],
            };
            input.copy_from_slice(src);
        }
        let (next, cache) = p.cell.step(&input, &h);
        let y = &mut out[t * f..(t + 1) * f];
        y.copy_from_slice(p.b_out.data());
        tensor::matvec_acc(p.w_out.data(), cfg.h, &next, y);
        steps.push(cache);
        h = next;
    }
    DecoderCache { steps }
}

/// Runs every encoder over its own station's window; `e_i` is the final
/// hidden state.
pub fn encode(x: &SeriesTensor3, params: &ParameterStore, cfg: &ModelConfig) -> Result<EncoderState> {
    let mask = full_mask(cfg.e);
    check_input(x, cfg, &mask)?;
    let e = (0..cfg.e)
        .map(|i| Tensor::vector(encode_one(x, i, &params.enc[i], cfg).0))
        .collect();
    Ok(EncoderState { e })
}

/// Fuses the encoder states for decoder `j`.
pub fn attend(
    state: &EncoderState,
    j: usize,
    params: &ParameterStore,
    cfg: &ModelConfig,
    mask: &[bool],
) -> Result<Attended> {
    check_mask(cfg, mask)?;
    if state.e.len() != cfg.e || j >= cfg.d {
        return Err(Error::shape("attend", &[state.e.len(), j], &[cfg.e, cfg.d]));
    }
    let e: Vec<Vec<f64>> = state.e.iter().map(|t| t.data().to_vec()).collect();
    Ok(attend_inner(&e, j, params, cfg, mask)?.0)
}

/// Unrolls decoder `j` from the fused state `c`. `teacher`, when given, is a
/// `[T_dec × F_dec]` tensor whose rows replace the fed-back outputs.
pub fn decode(
    c: &Tensor,
    j: usize,
    params: &ParameterStore,
    cfg: &ModelConfig,
    teacher: Option<&Tensor>,
) -> Result<Tensor> {
    if c.len() != cfg.h || j >= cfg.d {
        return Err(Error::shape("decode", c.shape(), &[cfg.h]));
    }
    if let Some(t) = teacher {
        if t.shape() != [cfg.t_dec, cfg.f_dec] {
            return Err(Error::shape("decode teacher", t.shape(), &[cfg.t_dec, cfg.f_dec]));
        }
    }
    let mut out = vec![0.0; cfg.t_dec * cfg.f_dec];
    decode_inner(c.data(), j, params, cfg, teacher.map(|t| t.data()), &mut out);
    Tensor::from_vec(&[cfg.t_dec, cfg.f_dec], out)
}

fn forward_cached(
    x: &SeriesTensor3,
    params: &ParameterStore,
    cfg: &ModelConfig,
    mask: &[bool],
    teacher: Option<&SeriesTensor3>,
) -> Result<(Forecast, ForwardCache)> {
    check_mask(cfg, mask)?;
    check_input(x, cfg, mask)?;
    if let Some(t) = teacher {
        check_output(t, cfg, "teacher")?;
    }

    let mut enc = Vec::with_capacity(cfg.e);
    let mut e = Vec::with_capacity(cfg.e);
    for i in 0..cfg.e {
        if mask[i] {
            let (state, cache) = encode_one(x, i, &params.enc[i], cfg);
            e.push(state);
            enc.push(Some(cache));
        } else {
            e.push(vec![0.0; cfg.h]);
            enc.push(None);
        }
    }

    let mut z = Tensor::zeros(&[cfg.d, cfg.e]);
    let mut w = Tensor::zeros(&[cfg.d, cfg.e]);
    let mut y_hat = Tensor::zeros(&cfg.output_shape());
    let mut att = Vec::with_capacity(cfg.d);
    let mut dec = Vec::with_capacity(cfg.d);
    for j in 0..cfg.d {
        let (a, cache) = attend_inner(&e, j, params, cfg, mask)?;
        z.outer_mut(j).copy_from_slice(&a.z);
        w.outer_mut(j).copy_from_slice(&a.w);
        let rows = teacher.map(|t| t.outer(j));
        dec.push(decode_inner(a.c.data(), j, params, cfg, rows, y_hat.outer_mut(j)));
        att.push(cache);
    }

    let forecast = Forecast {
        y_hat,
        trace: AttentionTrace {
            z,
            w,
            mask: mask.to_vec(),
        },
    };
    let cache = ForwardCache {
        enc,
        e,
        att,
        dec,
        teacher_forced: teacher.is_some(),
    };
    Ok((forecast, cache))
}

/// Full forward pass: encode, fuse per decoder, decode.
pub fn forward(
    x: &SeriesTensor3,
    params: &ParameterStore,
    cfg: &ModelConfig,
    mask: &[bool],
    teacher: Option<&SeriesTensor3>,
) -> Result<Forecast> {
    Ok(forward_cached(x, params, cfg, mask, teacher)?.0)
}

/// Mean squared error over every `(station, step, feature)` entry; the
/// Gaussian negative log-likelihood with unit variance up to constants.
pub fn loss(y_hat: &SeriesTensor3, y: &SeriesTensor3) -> Result<f64> {
    if y_hat.shape() != y.shape() {
        return Err(Error::shape("loss", y_hat.shape(), y.shape()));
    }
    let sum = y_hat
        .data()
        .iter()
        .zip(y.data())
        .fold(0.0, |acc, (a, b)| acc + (a - b) * (a - b));
    Ok(sum / y.len() as f64)
}

fn backward_from(
    cache: &ForwardCache,
    d_yhat: &SeriesTensor3,
    params: &ParameterStore,
    cfg: &ModelConfig,
    mask: &[bool],
) -> GradBuffer {
    let mut grads = params.zeros_like();
    let f = cfg.f_dec;
    let mut de = vec![vec![0.0; cfg.h]; cfg.e];

    for j in 0..cfg.d {
        let p = &params.dec[j];
        let g = &mut grads.dec[j];
        let dy_all = d_yhat.outer(j);
        let mut dh_next = vec![0.0; cfg.h];
        let mut d_fed = vec![0.0; f];
        for t in (0..cfg.t_dec).rev() {
            let step = &cache.dec[j].steps[t];
            let dy: Vec<f64> = dy_all[t * f..(t + 1) * f]
                .iter()
                .zip(&d_fed)
                .map(|(a, b)| a + b)
                .collect();
            tensor::outer_acc(g.w_out.data_mut(), &dy, &step.h);
            tensor::add_into(g.b_out.data_mut(), &dy);
            let mut dh = dh_next;
            tensor::matvec_t_acc(p.w_out.data(), cfg.h, &dy, &mut dh);
            let (du, dh_prev) = p.cell.step_backward(step, &dh, &mut g.cell);
            dh_next = dh_prev;
            // The input at step t is the output of step t − 1 when free running.
            if t > 0 && !cache.teacher_forced {
                d_fed = du;
            } else {
                d_fed.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let dc = dh_next;

        let ac = &cache.att[j];
        let slot = params.attention_slot(j);
        let mut dw = vec![0.0; cfg.e];
        for i in 0..cfg.e {
            if mask[i] {
                dw[i] = ac.scale * tensor::dot(&cache.e[i], &dc);
                for (d, c) in de[i].iter_mut().zip(&dc) {
                    *d += ac.scale * ac.w[i] * c;
                }
            }
        }
        let weighted = (0..cfg.e).fold(0.0, |acc, i| acc + ac.w[i] * dw[i]);
        for i in 0..cfg.e {
            if let Some(fc) = &ac.ffn[i] {
                let dz = ac.w[i] * (dw[i] - weighted);
                let de_att = params.att[slot].backward(fc, dz, &mut grads.att[slot]);
                tensor::add_into(&mut de[i], &de_att);
            }
        }
    }

    for i in 0..cfg.e {
        let Some(ec) = &cache.enc[i] else { continue };
        let p = &params.enc[i];
        let mut dh = de[i].clone();
        for step in ec.steps.iter().rev() {
            let (_, dh_prev) = p.step_backward(step, &dh, &mut grads.enc[i]);
            dh = dh_prev;
        }
    }
    grads
}

/// Loss and exact parameter gradients for one sample, with the loss scaled
/// by `weight`. Decoders are teacher-forced with `y` when
/// `cfg.teacher_forcing` is set.
pub fn backward_weighted(
    x: &SeriesTensor3,
    y: &SeriesTensor3,
    params: &ParameterStore,
    cfg: &ModelConfig,
    mask: &[bool],
    weight: f64,
) -> Result<(f64, GradBuffer)> {
    check_output(y, cfg, "target")?;
    let teacher = cfg.teacher_forcing.then_some(y);
    let (forecast, cache) = forward_cached(x, params, cfg, mask, teacher)?;
    let l = loss(&forecast.y_hat, y)?;
    let n = y.len() as f64;
    let mut d = forecast.y_hat;
    for (g, t) in d.data_mut().iter_mut().zip(y.data()) {
        *g = weight * 2.0 * (*g - t) / n;
    }
    let grads = backward_from(&cache, &d, params, cfg, mask);
    Ok((weight * l, grads))
}

pub fn backward(
    x: &SeriesTensor3,
    y: &SeriesTensor3,
    params: &ParameterStore,
    cfg: &ModelConfig,
    mask: &[bool],
) -> Result<(f64, GradBuffer)> {
    backward_weighted(x, y, params, cfg, mask, 1.0)
}

/// Central-difference check of [`backward`] on one sample.
pub fn grad_check_model(
    x: &SeriesTensor3,
    y: &SeriesTensor3,
    params: &ParameterStore,
    cfg: &ModelConfig,
    mask: &[bool],
    eps: f64,
    seed: u64,
) -> Result<f64> {
    let f = |theta: &[f64]| {
        let p = ParameterStore::unflatten(cfg, theta)?;
        let (l, g) = backward(x, y, &p, cfg, mask)?;
        Ok((l, g.flatten()))
    };
    crate::nn::grad_check(f, &params.flatten(), eps, seed)
}
