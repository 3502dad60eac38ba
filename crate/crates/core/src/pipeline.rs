//! End-to-end runs: flat-key run configuration, training of every model
//! family, evaluation, rolling forecasts and attention export.

use std::path::PathBuf;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::baselines::{
    from_joint, joint_dataset, last_observed, regular_rnn_configs, ridge_fit, ridge_predict, station_dataset,
    station_tensor, to_joint, LinearBaseline, RidgeModel, DEFAULT_LAMBDA,
};
use crate::checkpoint::{param_arrays, Checkpoint, RunInfo};
use crate::data::{make_dataset, split, window, Dataset, NormStats, RawSeries, SplitSpec};
use crate::error::{Error, Result};
use crate::model::{forward, full_mask, loss, AttentionTrace, DecoderStart, ModelConfig, ParameterStore};
use crate::nn::CellKind;
use crate::tensor::{SeriesTensor3, Tensor};
use crate::trainer::{train, TrainConfig, TrainReport};

pub use crate::checkpoint::Family;

/// Named hidden-size presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// h = 32 for every family.
    #[default]
    Desk,
    /// h = 130 for per-station style models and 300 for the joint RNN.
    PaperScale,
}

impl Preset {
    pub fn hidden(self, family: Family) -> usize {
        match (self, family) {
            (Preset::Desk, _) => 32,
            (Preset::PaperScale, Family::RnnJoint) => 300,
            (Preset::PaperScale, _) => 130,
        }
    }
}

pub const DEFAULT_T_ENC: usize = 48;
pub const DEFAULT_T_DEC: usize = 24;

/// Everything a training run needs besides the data itself.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub family: Family,
    pub preset: Preset,
    /// Overrides the preset's hidden size.
    pub h: Option<usize>,
    pub p_att: usize,
    pub t_enc: usize,
    pub t_dec: usize,
    pub mean_scale: bool,
    pub share_attention: bool,
    pub teacher_forcing: bool,
    pub cell: CellKind,
    pub decoder_start: DecoderStart,
    pub train: TrainConfig,
    pub data_path: Option<PathBuf>,
    /// Window stride; `None` means `t_dec`.
    pub stride: Option<usize>,
    pub split: SplitSpec,
    pub lambda: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::square(1, 1, DEFAULT_T_ENC, DEFAULT_T_DEC);
        RunConfig {
            family: Family::Attention,
            preset: Preset::Desk,
            h: None,
            p_att: m.p_att,
            t_enc: m.t_enc,
            t_dec: m.t_dec,
            mean_scale: m.mean_scale,
            share_attention: m.share_attention,
            teacher_forcing: m.teacher_forcing,
            cell: m.cell,
            decoder_start: m.decoder_start,
            train: TrainConfig::default(),
            data_path: None,
            stride: None,
            split: SplitSpec::default(),
            lambda: DEFAULT_LAMBDA,
        }
    }
}

fn take<T: DeserializeOwned>(map: &mut Map<String, Value>, key: &str, errors: &mut Vec<String>) -> Option<T> {
    let value = map.remove(key)?;
    match serde_json::from_value(value) {
        Ok(v) => Some(v),
        Err(e) => {
            errors.push(format!("{key}: {e}"));
            None
        }
    }
}

impl RunConfig {
    /// Parses a JSON object with flat dotted keys. Every unknown key and
    /// every invalid value is reported in one [`Error::Config`].
    pub fn from_json(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text)?;
        let Value::Object(mut map) = value else {
            return Err(Error::Config(vec!["config must be a JSON object".into()]));
        };
        let mut errors = Vec::new();
        let mut rc = RunConfig::default();
        let e = &mut errors;

        if let Some(v) = take::<String>(&mut map, "family", e) {
            match v.parse() {
                Ok(f) => rc.family = f,
                Err(err) => e.push(format!("family: {err}")),
            }
        }
        if let Some(v) = take(&mut map, "preset", e) {
            rc.preset = v;
        }
        if let Some(v) = take(&mut map, "model.h", e) {
            rc.h = Some(v);
        }
        macro_rules! set {
            ($($key:literal => $($field:ident).+),* $(,)?) => {
                $(if let Some(v) = take(&mut map, $key, e) {
                    rc.$($field).+ = v;
                })*
            };
        }
        set! {
            "model.p_att" => p_att,
            "model.t_enc" => t_enc,
            "model.t_dec" => t_dec,
            "model.mean_scale" => mean_scale,
            "model.share_attention" => share_attention,
            "model.teacher_forcing" => teacher_forcing,
            "model.cell" => cell,
            "model.decoder_start" => decoder_start,
            "train.learning_rate" => train.learning_rate,
            "train.momentum" => train.momentum,
            "train.batch_size" => train.batch_size,
            "train.max_epochs" => train.max_epochs,
            "train.grad_clip_norm" => train.grad_clip_norm,
            "train.patience" => train.patience,
            "train.seed" => train.seed,
            "train.encoder_dropout_prob" => train.encoder_dropout_prob,
            "linreg.lambda" => lambda,
        }
        if let Some(v) = take(&mut map, "data.path", e) {
            rc.data_path = Some(v);
        }
        if let Some(v) = take(&mut map, "data.stride", e) {
            rc.stride = Some(v);
        }
        let fractions: Option<[f64; 3]> = take(&mut map, "data.split", e);
        let valid_start: Option<i64> = take(&mut map, "data.valid_start", e);
        let test_start: Option<i64> = take(&mut map, "data.test_start", e);
        match (fractions, valid_start, test_start) {
            (Some(fr), None, None) => rc.split = SplitSpec::Fractions(fr),
            (None, Some(valid_start), Some(test_start)) => {
                rc.split = SplitSpec::Boundaries {
                    valid_start,
                    test_start,
                }
            }
            (None, None, None) => {}
            (Some(_), _, _) => e.push("data.split cannot be combined with data.valid_start/data.test_start".into()),
            _ => e.push("data.valid_start and data.test_start must be given together".into()),
        }
        for key in map.keys() {
            e.push(format!("unknown key `{key}`"));
        }
        if let Err(Error::Config(more)) = rc.validate() {
            errors.extend(more);
        }
        if errors.is_empty() {
            Ok(rc)
        } else {
            Err(Error::Config(errors))
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut errors = Vec::new();
        if let Err(Error::Config(more)) = self.model_config(1, 1).validate() {
            errors.extend(more);
        }
        if let Err(Error::Config(more)) = self.train.validate() {
            errors.extend(more);
        }
        if self.stride == Some(0) {
            errors.push("data.stride must be at least 1".into());
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            errors.push(format!("linreg.lambda must be a finite value >= 0, got {}", self.lambda));
        }
        match self.split {
            SplitSpec::Fractions(fr) => {
                if fr.iter().any(|v| !(0.0..=1.0).contains(v)) || (fr.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                    errors.push(format!("data.split fractions {fr:?} must be in [0, 1] and sum to 1"));
                }
            }
            SplitSpec::Boundaries {
                valid_start,
                test_start,
            } => {
                if test_start < valid_start {
                    errors.push("data.test_start precedes data.valid_start".into());
                }
            }
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errors))
        }
    }

    pub fn hidden(&self) -> usize {
        self.h.unwrap_or_else(|| self.preset.hidden(self.family))
    }

    pub fn stride(&self) -> usize {
        self.stride.unwrap_or(self.t_dec)
    }

    /// The square fusion-model configuration for a dataset shape. Baseline
    /// networks derive their own configurations from it.
    pub fn model_config(&self, stations: usize, features: usize) -> ModelConfig {
        ModelConfig {
            h: self.hidden(),
            p_att: self.p_att,
            mean_scale: self.mean_scale,
            share_attention: self.share_attention,
            teacher_forcing: self.teacher_forcing,
            cell: self.cell,
            decoder_start: self.decoder_start,
            ..ModelConfig::square(stations, features, self.t_enc, self.t_dec)
        }
    }

    /// Every key with its post-default value.
    pub fn effective(&self) -> Map<String, Value> {
        let mut m = Map::new();
        let t = &self.train;
        let entries = [
            ("family", json!(self.family)),
            ("preset", json!(self.preset)),
            ("model.h", json!(self.hidden())),
            ("model.p_att", json!(self.p_att)),
            ("model.t_enc", json!(self.t_enc)),
            ("model.t_dec", json!(self.t_dec)),
            ("model.mean_scale", json!(self.mean_scale)),
            ("model.share_attention", json!(self.share_attention)),
            ("model.teacher_forcing", json!(self.teacher_forcing)),
            ("model.cell", json!(self.cell)),
            ("model.decoder_start", json!(self.decoder_start)),
            ("train.learning_rate", json!(t.learning_rate)),
            ("train.momentum", json!(t.momentum)),
            ("train.batch_size", json!(t.batch_size)),
            ("train.max_epochs", json!(t.max_epochs)),
            ("train.grad_clip_norm", json!(t.grad_clip_norm)),
            ("train.patience", json!(t.patience)),
            ("train.seed", json!(t.seed)),
            ("train.encoder_dropout_prob", json!(t.encoder_dropout_prob)),
            ("data.stride", json!(self.stride())),
            ("linreg.lambda", json!(self.lambda)),
        ];
        for (k, v) in entries {
            m.insert(k.into(), v);
        }
        if let Some(p) = &self.data_path {
            m.insert("data.path".into(), json!(p));
        }
        match self.split {
            SplitSpec::Fractions(fr) => {
                m.insert("data.split".into(), json!(fr));
            }
            SplitSpec::Boundaries {
                valid_start,
                test_start,
            } => {
                m.insert("data.valid_start".into(), json!(valid_start));
                m.insert("data.test_start".into(), json!(test_start));
            }
        }
        m
    }
}

/// Normalised, windowed splits of one series.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub stats: NormStats,
    pub train: Dataset,
    pub valid: Option<Dataset>,
    pub test: Option<Dataset>,
}

fn windowed(region: Option<&RawSeries>, stats: &NormStats, t_enc: usize, t_dec: usize, stride: usize, name: &str) -> Option<Dataset> {
    // a region too short for one window is treated as absent
    region.and_then(|r| make_dataset(r, stats, t_enc, t_dec, stride, name).ok())
}

/// Split → fit statistics on the training region → normalise → window.
pub fn prepare(series: &RawSeries, split_spec: SplitSpec, t_enc: usize, t_dec: usize, stride: usize) -> Result<Prepared> {
    let parts = split(series, split_spec)?;
    let stats = NormStats::fit(&parts.train);
    let train = make_dataset(&parts.train, &stats, t_enc, t_dec, stride, "train")?;
    let valid = windowed(parts.valid.as_ref(), &stats, t_enc, t_dec, stride, "valid");
    let test = windowed(parts.test.as_ref(), &stats, t_enc, t_dec, stride, "test");
    Ok(Prepared {
        stats,
        train,
        valid,
        test,
    })
}

/// The fitted state of one model family.
#[derive(Debug, Clone, PartialEq)]
pub enum Fitted {
    /// `attention` and `rnn-joint`.
    Network(ParameterStore),
    PerStation(Vec<ParameterStore>),
    Linear(LinearBaseline),
    LastObserved,
}

/// A trained model plus what is needed to rebuild its inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub family: Family,
    /// Square configuration describing the data shape and network settings.
    pub config: ModelConfig,
    pub seed: u64,
    pub fitted: Fitted,
    pub stats: NormStats,
    pub run: RunInfo,
}

/// Which part of a series to evaluate on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Region {
    Train,
    Valid,
    #[default]
    Test,
    /// Every window of the series.
    All,
}

impl std::str::FromStr for Region {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Region::Train),
            "valid" => Ok(Region::Valid),
            "test" => Ok(Region::Test),
            "all" => Ok(Region::All),
            _ => Err(Error::InvalidArgument(format!(
                "unknown region `{s}` (expected train, valid, test or all)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub family: Family,
    /// Effective configuration after defaults.
    pub config: Map<String, Value>,
    /// One entry per trained network (D entries for `rnn-per-station`,
    /// none for the closed-form baselines).
    pub training: Vec<TrainReport>,
    pub train_windows: usize,
    pub valid_windows: usize,
    pub test_windows: usize,
    pub valid_mse_percent: Option<f64>,
    pub test_mse_percent: Option<f64>,
}

fn network_valid(prep: &Prepared, family: Family) -> Result<&Dataset> {
    prep.valid.as_ref().ok_or_else(|| {
        Error::EmptySplit(format!(
            "{family} needs a validation region with at least one window for model selection"
        ))
    })
}

/// Trains the configured family on `series` and scores it on the held-out
/// test region.
pub fn run_train(series: &RawSeries, rc: &RunConfig) -> Result<(TrainedModel, RunReport)> {
    rc.validate()?;
    let (t_enc, t_dec, stride) = (rc.t_enc, rc.t_dec, rc.stride());
    let prep = prepare(series, rc.split, t_enc, t_dec, stride)?;
    let cfg = rc.model_config(series.n_stations(), series.n_features());
    let tcfg = &rc.train;
    let mut training = Vec::new();

    let fitted = match rc.family {
        Family::Attention => {
            let (p, r) = train(&prep.train, network_valid(&prep, rc.family)?, &cfg, tcfg)?;
            training.push(r);
            Fitted::Network(p)
        }
        Family::RnnJoint => {
            let (_, joint) = regular_rnn_configs(&cfg);
            let valid = joint_dataset(network_valid(&prep, rc.family)?);
            let (p, r) = train(&joint_dataset(&prep.train), &valid, &joint, tcfg)?;
            training.push(r);
            Fitted::Network(p)
        }
        Family::RnnPerStation => {
            let (single, _) = regular_rnn_configs(&cfg);
            let valid = network_valid(&prep, rc.family)?;
            let mut stores = Vec::with_capacity(cfg.d);
            for (j, c) in single.iter().enumerate() {
                let (p, r) = train(&station_dataset(&prep.train, j), &station_dataset(valid, j), c, tcfg)?;
                training.push(r);
                stores.push(p);
            }
            Fitted::PerStation(stores)
        }
        Family::LinregJoint => Fitted::Linear(ridge_fit(&prep.train, true, rc.lambda)?),
        Family::LinregPerStation => Fitted::Linear(ridge_fit(&prep.train, false, rc.lambda)?),
        Family::LastObserved => Fitted::LastObserved,
    };

    let model = TrainedModel {
        family: rc.family,
        config: cfg,
        seed: tcfg.seed,
        fitted,
        stats: prep.stats.clone(),
        run: RunInfo {
            stations: series.stations.clone(),
            features: series.feature_names.clone(),
            stride,
            split: rc.split,
            lambda: matches!(rc.family, Family::LinregJoint | Family::LinregPerStation).then_some(rc.lambda),
        },
    };
    let score = |d: Option<&Dataset>| d.map(|d| model.evaluate(d)).transpose();
    let report = RunReport {
        family: rc.family,
        config: rc.effective(),
        training,
        train_windows: prep.train.len(),
        valid_windows: prep.valid.as_ref().map_or(0, Dataset::len),
        test_windows: prep.test.as_ref().map_or(0, Dataset::len),
        valid_mse_percent: score(prep.valid.as_ref())?,
        test_mse_percent: score(prep.test.as_ref())?,
    };
    Ok((model, report))
}

const NORM_MEAN: &str = "norm.mean";
const NORM_STD: &str = "norm.std";

fn ridge_arrays(m: &RidgeModel, prefix: &str) -> (String, Tensor) {
    (format!("{prefix}weights"), m.weights.clone())
}

impl TrainedModel {
    fn check_input(&self, x: &SeriesTensor3) -> Result<()> {
        let want = self.config.input_shape();
        let names = ["stations", "encoder steps", "features"];
        if x.rank() != 3 {
            return Err(Error::shape("model input", x.shape(), &want));
        }
        for (k, name) in names.iter().enumerate() {
            if x.dim(k) != want[k] {
                return Err(Error::InvalidShape {
                    shape: x.shape().to_vec(),
                    reason: format!("model expects {} {name}, got {}", want[k], x.dim(k)),
                });
            }
        }
        Ok(())
    }

    /// Free-running forecast `[D × T_dec × F]` for one normalised window.
    pub fn predict(&self, x: &SeriesTensor3) -> Result<SeriesTensor3> {
        self.check_input(x)?;
        let cfg = &self.config;
        match &self.fitted {
            Fitted::Network(p) if self.family == Family::Attention => {
                Ok(forward(x, p, cfg, &full_mask(cfg.e), None)?.y_hat)
            }
            Fitted::Network(p) => {
                let (_, joint) = regular_rnn_configs(cfg);
                let y = forward(&to_joint(x), p, &joint, &full_mask(1), None)?.y_hat;
                from_joint(&y, cfg.d)
            }
            Fitted::PerStation(stores) => {
                let (single, _) = regular_rnn_configs(cfg);
                let mut out = Vec::with_capacity(cfg.d * cfg.t_dec * cfg.f_dec);
                for (j, (p, c)) in stores.iter().zip(&single).enumerate() {
                    let y = forward(&station_tensor(x, j), p, c, &full_mask(1), None)?.y_hat;
                    out.extend_from_slice(y.data());
                }
                Tensor::from_vec(&cfg.output_shape(), out)
            }
            Fitted::Linear(m) => ridge_predict(m, x, cfg.t_dec),
            Fitted::LastObserved => last_observed(x, cfg.t_dec),
        }
    }

    /// 100 × mean squared error over the windows of `data`.
    pub fn evaluate(&self, data: &Dataset) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::InvalidArgument("evaluation set is empty".into()));
        }
        let mut sum = 0.0;
        for s in &data.samples {
            sum += loss(&self.predict(&s.x)?, &s.y)?;
        }
        Ok(100.0 * sum / data.len() as f64)
    }

    /// Attention weights of the fusion model for one normalised window.
    pub fn attention(&self, x: &SeriesTensor3) -> Result<AttentionTrace> {
        self.check_input(x)?;
        match &self.fitted {
            Fitted::Network(p) if self.family == Family::Attention => {
                Ok(forward(x, p, &self.config, &full_mask(self.config.e), None)?.trace)
            }
            _ => Err(Error::InvalidArgument(format!(
                "a {} model has no attention weights",
                self.family
            ))),
        }
    }

    fn check_series(&self, series: &RawSeries) -> Result<()> {
        let mut problems = Vec::new();
        if series.stations != self.run.stations {
            problems.push(format!(
                "stations: data has {:?}, model was trained on {:?}",
                series.stations, self.run.stations
            ));
        }
        if series.feature_names != self.run.features {
            problems.push(format!(
                "features: data has {:?}, model was trained on {:?}",
                series.feature_names, self.run.features
            ));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidArgument(problems.join("; ")))
        }
    }

    /// Rebuilds the windows of one region of `series` with the stored split,
    /// stride and normalisation.
    pub fn dataset(&self, series: &RawSeries, region: Region) -> Result<Dataset> {
        self.check_series(series)?;
        let (t_enc, t_dec, stride) = (self.config.t_enc, self.config.t_dec, self.run.stride);
        let parts = split(series, self.run.split)?;
        let (part, name) = match region {
            Region::Train => (Some(parts.train), "train"),
            Region::Valid => (parts.valid, "valid"),
            Region::Test => (parts.test, "test"),
            Region::All => (Some(series.clone()), "all"),
        };
        let part = part.ok_or_else(|| Error::EmptySplit(format!("the {name} region of this series is empty")))?;
        make_dataset(&part, &self.stats, t_enc, t_dec, stride, name)
    }

    pub fn evaluate_series(&self, series: &RawSeries, region: Region) -> Result<f64> {
        self.evaluate(&self.dataset(series, region)?)
    }

    /// Back-to-back forecasts over `series`: windows advance by `T_dec`, so
    /// every step after the first `T_enc` that a full window covers is
    /// predicted exactly once. Values are in the original units.
    pub fn predict_series(&self, series: &RawSeries) -> Result<RawSeries> {
        self.check_series(series)?;
        let (t_enc, t_dec) = (self.config.t_enc, self.config.t_dec);
        let windows = window(&self.stats.apply(series)?, t_enc, t_dec, t_dec)?;
        let (d, f) = (self.config.d, self.config.f_dec);
        let steps = windows.len() * t_dec;
        let mut values = Tensor::zeros(&[d, steps, f]);
        for (k, w) in windows.iter().enumerate() {
            let y = self.stats.invert_tensor(&self.predict(&w.x)?)?;
            for j in 0..d {
                for t in 0..t_dec {
                    values.row3_mut(j, k * t_dec + t).copy_from_slice(y.row3(j, t));
                }
            }
        }
        Ok(RawSeries {
            stations: series.stations.clone(),
            timestamps: series.timestamps[t_enc..t_enc + steps].to_vec(),
            values,
            feature_names: series.feature_names.clone(),
        })
    }

    /// `(sample, decoder, encoder, weight)` for every window of `series` at
    /// the stored stride.
    pub fn attention_rows(&self, series: &RawSeries) -> Result<Vec<(usize, usize, usize, f64)>> {
        let data = self.dataset(series, Region::All)?;
        let mut rows = Vec::new();
        for (n, s) in data.samples.iter().enumerate() {
            let trace = self.attention(&s.x)?;
            let e = trace.w.dim(1);
            for (k, &v) in trace.w.data().iter().enumerate() {
                rows.push((n, k / e, k % e, v));
            }
        }
        Ok(rows)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut arrays = match &self.fitted {
            Fitted::Network(p) => param_arrays(p, ""),
            Fitted::PerStation(stores) => stores
                .iter()
                .enumerate()
                .flat_map(|(j, p)| param_arrays(p, &format!("station.{j}.")))
                .collect(),
            Fitted::Linear(LinearBaseline::Joint(m)) => vec![ridge_arrays(m, "ridge.")],
            Fitted::Linear(LinearBaseline::PerStation(ms)) => ms
                .iter()
                .enumerate()
                .map(|(j, m)| ridge_arrays(m, &format!("ridge.{j}.")))
                .collect(),
            Fitted::LastObserved => vec![],
        };
        arrays.push((NORM_MEAN.into(), self.stats.mean.clone()));
        arrays.push((NORM_STD.into(), self.stats.std.clone()));
        Checkpoint {
            family: self.family,
            config: self.config.clone(),
            seed: self.seed,
            arrays,
            run: Some(self.run.clone()),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let cfg = &ck.config;
        let run = ck
            .run
            .clone()
            .ok_or_else(|| Error::BadHeader("checkpoint has no run information".into()))?;
        if run.stations.len() != cfg.e || run.features.len() != cfg.f_enc || cfg.e != cfg.d || cfg.f_enc != cfg.f_dec {
            return Err(Error::BadHeader("run information disagrees with the model config".into()));
        }
        let array = |name: &str| {
            ck.array(name)
                .cloned()
                .ok_or_else(|| Error::BadHeader(format!("missing array {name}")))
        };
        let ridge = |name: &str, inputs: usize, outputs: usize| -> Result<RidgeModel> {
            let weights = array(name)?;
            if weights.shape() != [outputs, inputs + 1] {
                return Err(Error::BadHeader(format!(
                    "array {name} has shape {:?}, expected [{outputs}, {}]",
                    weights.shape(),
                    inputs + 1
                )));
            }
            Ok(RidgeModel {
                weights,
                lambda: run.lambda.unwrap_or(DEFAULT_LAMBDA),
                bias: true,
            })
        };
        let per_in = cfg.t_enc * cfg.f_enc;
        let per_out = cfg.t_dec * cfg.f_dec;
        let fitted = match ck.family {
            Family::Attention => Fitted::Network(ck.params(cfg, "")?),
            Family::RnnJoint => Fitted::Network(ck.params(&regular_rnn_configs(cfg).1, "")?),
            Family::RnnPerStation => {
                let (single, _) = regular_rnn_configs(cfg);
                Fitted::PerStation(
                    single
                        .iter()
                        .enumerate()
                        .map(|(j, c)| ck.params(c, &format!("station.{j}.")))
                        .collect::<Result<_>>()?,
                )
            }
            Family::LinregJoint => Fitted::Linear(LinearBaseline::Joint(ridge(
                "ridge.weights",
                cfg.e * per_in,
                cfg.d * per_out,
            )?)),
            Family::LinregPerStation => Fitted::Linear(LinearBaseline::PerStation(
                (0..cfg.d)
                    .map(|j| ridge(&format!("ridge.{j}.weights"), per_in, per_out))
                    .collect::<Result<_>>()?,
            )),
            Family::LastObserved => Fitted::LastObserved,
        };
        let stats = NormStats {
            mean: array(NORM_MEAN)?,
            std: array(NORM_STD)?,
        };
        if stats.mean.shape() != [cfg.e, cfg.f_enc] || stats.std.shape() != [cfg.e, cfg.f_enc] {
            return Err(Error::BadHeader("normalisation arrays do not match the config".into()));
        }
        Ok(TrainedModel {
            family: ck.family,
            config: cfg.clone(),
            seed: ck.seed,
            fitted,
            stats,
            run,
        })
    }
}
