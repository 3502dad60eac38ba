//! CSV ingestion, chronological splitting, per-channel normalisation,
//! windowing into encoder/decoder pairs and the synthetic regime-switching
//! generator.

use std::f64::consts::PI;
use std::fs::File;
use std::io::Write;
use std::path::Path;

use chrono::{DateTime, NaiveDate, NaiveDateTime};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Rng, SeriesTensor3, Tensor};

pub const STD_FLOOR: f64 = 1e-8;

/// Equally spaced multivariate series for a fixed set of stations.
#[derive(Debug, Clone, PartialEq)]
pub struct RawSeries {
    pub stations: Vec<String>,
    /// Timestamps as they appear in the source, one per step.
    pub timestamps: Vec<String>,
    /// `[E × T × F]`
    pub values: Tensor,
    pub feature_names: Vec<String>,
}

/// Orders integer timestamps and ISO-8601 date-times on one axis (seconds).
pub fn timestamp_key(raw: &str) -> Option<i64> {
    let s = raw.trim();
    if let Ok(v) = s.parse::<i64>() {
        return Some(v);
    }
    if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
        return Some(dt.timestamp());
    }
    const FORMATS: [&str; 4] = [
        "%Y-%m-%dT%H:%M:%S",
        "%Y-%m-%d %H:%M:%S",
        "%Y-%m-%dT%H:%M",
        "%Y-%m-%d %H:%M",
    ];
    for fmt in FORMATS {
        if let Ok(dt) = NaiveDateTime::parse_from_str(s, fmt) {
            return Some(dt.and_utc().timestamp());
        }
    }
    NaiveDate::parse_from_str(s, "%Y-%m-%d")
        .ok()
        .map(|d| d.and_hms_opt(0, 0, 0).unwrap().and_utc().timestamp())
}

impl RawSeries {
    pub fn n_stations(&self) -> usize {
        self.values.dim(0)
    }

    pub fn len(&self) -> usize {
        self.values.dim(1)
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.values.dim(2)
    }

    /// Steps `[start, end)` of every station.
    pub fn slice(&self, start: usize, end: usize) -> Result<RawSeries> {
        if start >= end || end > self.len() {
            return Err(Error::InvalidArgument(format!(
                "bad step range {start}..{end} for a series of length {}",
                self.len()
            )));
        }
        let (e, f) = (self.n_stations(), self.n_features());
        let mut data = Vec::with_capacity(e * (end - start) * f);
        for i in 0..e {
            for t in start..end {
                data.extend_from_slice(self.values.row3(i, t));
            }
        }
        Ok(RawSeries {
            stations: self.stations.clone(),
            timestamps: self.timestamps[start..end].to_vec(),
            values: Tensor::from_vec(&[e, end - start, f], data)?,
            feature_names: self.feature_names.clone(),
        })
    }
}

fn csv_err(line: u64, message: impl Into<String>) -> Error {
    Error::Csv {
        line,
        message: message.into(),
    }
}

/// Reads `station,timestamp,<features...>` rows, grouped by station and
/// sorted by time within each station.
pub fn load_csv(path: impl AsRef<Path>) -> Result<RawSeries> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(file)
}

pub fn read_csv(reader: impl std::io::Read) -> Result<RawSeries> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let header = rdr.headers().map_err(|e| csv_err(1, e.to_string()))?.clone();
    if header.len() < 3
        || header.get(0).map(str::trim) != Some("station")
        || header.get(1).map(str::trim) != Some("timestamp")
    {
        return Err(csv_err(
            1,
            "header must be `station,timestamp,<feature1>,...`",
        ));
    }
    let feature_names: Vec<String> = header.iter().skip(2).map(|s| s.trim().to_string()).collect();
    let n_feat = feature_names.len();

    struct Block {
        id: String,
        stamps: Vec<String>,
        keys: Vec<i64>,
        values: Vec<f64>,
    }
    let mut blocks: Vec<Block> = Vec::new();

    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            csv_err(line, e.to_string())
        })?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        if rec.len() != n_feat + 2 {
            return Err(csv_err(
                line,
                format!("expected {} cells, found {}", n_feat + 2, rec.len()),
            ));
        }
        let station = rec[0].trim();
        let stamp = rec[1].trim();
        if station.is_empty() || stamp.is_empty() {
            return Err(csv_err(line, "missing cell"));
        }
        let key = timestamp_key(stamp)
            .ok_or_else(|| csv_err(line, format!("unparseable timestamp `{stamp}`")))?;

        let new_block = blocks.last().is_none_or(|b| b.id != station);
        if new_block {
            if blocks.iter().any(|b| b.id == station) {
                return Err(csv_err(
                    line,
                    format!("unsorted rows: station `{station}` appears in more than one block"),
                ));
            }
            blocks.push(Block {
                id: station.to_string(),
                stamps: Vec::new(),
                keys: Vec::new(),
                values: Vec::new(),
            });
        }
        let block = blocks.last_mut().unwrap();
        if let Some(&prev) = block.keys.last() {
            if key <= prev {
                return Err(csv_err(
                    line,
                    format!("unsorted rows: timestamp `{stamp}` does not increase for station `{station}`"),
                ));
            }
        }
        for (k, cell) in rec.iter().skip(2).enumerate() {
            let cell = cell.trim();
            if cell.is_empty() {
                return Err(csv_err(line, format!("missing cell for `{}`", feature_names[k])));
            }
            let v: f64 = cell
                .parse()
                .map_err(|_| csv_err(line, format!("non-numeric value `{cell}` for `{}`", feature_names[k])))?;
            if !v.is_finite() {
                return Err(csv_err(line, format!("non-finite value `{cell}`")));
            }
            block.values.push(v);
        }
        block.stamps.push(stamp.to_string());
        block.keys.push(key);
    }

    let Some(first) = blocks.first() else {
        return Err(csv_err(2, "no data rows"));
    };
    for b in &blocks[1..] {
        if b.keys != first.keys {
            return Err(Error::RaggedCoverage {
                station: b.id.clone(),
            });
        }
    }
    if first.keys.len() > 2 {
        let step = first.keys[1] - first.keys[0];
        if first.keys.windows(2).any(|w| w[1] - w[0] != step) {
            return Err(Error::InvalidArgument(
                "timestamps are not equally spaced".into(),
            ));
        }
    }

    let e = blocks.len();
    let t = first.keys.len();
    let timestamps = first.stamps.clone();
    let stations = blocks.iter().map(|b| b.id.clone()).collect();
    let data: Vec<f64> = blocks.into_iter().flat_map(|b| b.values).collect();
    Ok(RawSeries {
        stations,
        timestamps,
        values: Tensor::from_vec(&[e, t, n_feat], data)?,
        feature_names,
    })
}

pub fn write_csv(series: &RawSeries, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    write_csv_to(series, &mut out).map_err(|e| Error::io(path, e))?;
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn write_csv_to(series: &RawSeries, out: &mut impl Write) -> std::io::Result<()> {
    write!(out, "station,timestamp")?;
    for f in &series.feature_names {
        write!(out, ",{f}")?;
    }
    writeln!(out)?;
    for (i, station) in series.stations.iter().enumerate() {
        for (t, stamp) in series.timestamps.iter().enumerate() {
            write!(out, "{station},{stamp}")?;
            for v in series.values.row3(i, t) {
                // `Display` for f64 is the shortest exact round-trip form.
                write!(out, ",{v}")?;
            }
            writeln!(out)?;
        }
    }
    Ok(())
}

/// One encoder/decoder window pair.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePair {
    /// `[E × T_enc × F]`
    pub x: SeriesTensor3,
    /// `[D × T_dec × F]`
    pub y: SeriesTensor3,
    /// Offset of the first encoder step within the source series.
    pub start: usize,
}

pub fn window_count(t: usize, t_enc: usize, t_dec: usize, stride: usize) -> usize {
    if stride == 0 || t < t_enc + t_dec {
        0
    } else {
        (t - t_enc - t_dec) / stride + 1
    }
}

/// Windows start at `0, stride, 2·stride, …`; the encoder sees
/// `[s, s + T_enc)` and the decoder targets `[s + T_enc, s + T_enc + T_dec)`.
pub fn window(series: &RawSeries, t_enc: usize, t_dec: usize, stride: usize) -> Result<Vec<SamplePair>> {
    if t_enc == 0 || t_dec == 0 || stride == 0 {
        return Err(Error::InvalidArgument(
            "t_enc, t_dec and stride must be at least 1".into(),
        ));
    }
    let t = series.len();
    if t < t_enc + t_dec {
        return Err(Error::SeriesTooShort {
            required: t_enc + t_dec,
            actual: t,
        });
    }
    let (e, f) = (series.n_stations(), series.n_features());
    let n = window_count(t, t_enc, t_dec, stride);
    let take = |from: usize, len: usize| -> Result<Tensor> {
        let mut data = Vec::with_capacity(e * len * f);
        for i in 0..e {
            for s in from..from + len {
                data.extend_from_slice(series.values.row3(i, s));
            }
        }
        Tensor::from_vec(&[e, len, f], data)
    };
    (0..n)
        .map(|k| {
            let s = k * stride;
            Ok(SamplePair {
                x: take(s, t_enc)?,
                y: take(s + t_enc, t_dec)?,
                start: s,
            })
        })
        .collect()
}

/// Per-(station, feature) mean and standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    /// `[E × F]`
    pub mean: Tensor,
    /// `[E × F]`, every entry at least [`STD_FLOOR`].
    pub std: Tensor,
}

impl NormStats {
    /// Fits on the training region; std is the population value.
    pub fn fit(train: &RawSeries) -> NormStats {
        let (e, t, f) = (train.n_stations(), train.len(), train.n_features());
        let mut mean = Tensor::zeros(&[e, f]);
        let mut std = Tensor::zeros(&[e, f]);
        for i in 0..e {
            for k in 0..f {
                let col = (0..t).map(|s| train.values.get(&[i, s, k]));
                let first = train.values.get(&[i, 0, k]);
                let (m, sd) = if col.clone().all(|v| v == first) {
                    (first, 0.0)
                } else {
                    let m = col.clone().fold(0.0, |a, v| a + v) / t as f64;
                    let var = col.fold(0.0, |a, v| a + (v - m) * (v - m)) / t as f64;
                    (m, var.sqrt())
                };
                mean.set(&[i, k], m);
                std.set(&[i, k], sd.max(STD_FLOOR));
            }
        }
        NormStats { mean, std }
    }

    fn check(&self, values: &Tensor) -> Result<()> {
        if values.dim(0) != self.mean.dim(0) || values.dim(2) != self.mean.dim(1) {
            return Err(Error::shape("normalize", values.shape(), self.mean.shape()));
        }
        Ok(())
    }

    /// `(v − mean) / std` per channel on a `[E × T × F]` tensor.
    pub fn apply_tensor(&self, values: &Tensor) -> Result<Tensor> {
        self.check(values)?;
        let mut out = values.clone();
        let f = values.dim(2);
        for i in 0..values.dim(0) {
            for t in 0..values.dim(1) {
                for (k, v) in out.row3_mut(i, t).iter_mut().enumerate() {
                    *v = (*v - self.mean.data()[i * f + k]) / self.std.data()[i * f + k];
                }
            }
        }
        Ok(out)
    }

    pub fn invert_tensor(&self, values: &Tensor) -> Result<Tensor> {
        self.check(values)?;
        let mut out = values.clone();
        let f = values.dim(2);
        for i in 0..values.dim(0) {
            for t in 0..values.dim(1) {
                for (k, v) in out.row3_mut(i, t).iter_mut().enumerate() {
                    *v = *v * self.std.data()[i * f + k] + self.mean.data()[i * f + k];
                }
            }
        }
        Ok(out)
    }

    pub fn apply(&self, series: &RawSeries) -> Result<RawSeries> {
        Ok(RawSeries {
            values: self.apply_tensor(&series.values)?,
            ..series.clone()
        })
    }

    pub fn invert(&self, series: &RawSeries) -> Result<RawSeries> {
        Ok(RawSeries {
            values: self.invert_tensor(&series.values)?,
            ..series.clone()
        })
    }

    pub fn apply_windows(&self, windows: &[SamplePair]) -> Result<Vec<SamplePair>> {
        windows
            .iter()
            .map(|w| {
                Ok(SamplePair {
                    x: self.apply_tensor(&w.x)?,
                    y: self.apply_tensor(&w.y)?,
                    start: w.start,
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<SamplePair>,
    pub stats: NormStats,
    pub split: String,
    pub stride: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// How to cut a series into train / validation / test by time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitSpec {
    Fractions([f64; 3]),
    /// First timestamp key of the validation and of the test region.
    Boundaries { valid_start: i64, test_start: i64 },
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec::Fractions([0.7, 0.1, 0.2])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: RawSeries,
    pub valid: Option<RawSeries>,
    pub test: Option<RawSeries>,
}

pub fn split(series: &RawSeries, spec: SplitSpec) -> Result<Splits> {
    let t = series.len();
    let (a, b) = match spec {
        SplitSpec::Fractions(fr) => {
            if fr.iter().any(|v| !(0.0..=1.0).contains(v)) || (fr.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidArgument(format!(
                    "split fractions {fr:?} must be in [0, 1] and sum to 1"
                )));
            }
            let a = ((fr[0] * t as f64).round() as usize).min(t);
            let b = (((fr[0] + fr[1]) * t as f64).round() as usize).clamp(a, t);
            // fractions summing to one up to rounding must still cover everything
            let b = if fr[2] == 0.0 { t } else { b };
            let a = if fr[1] == 0.0 && fr[2] == 0.0 { t } else { a };
            (a, b)
        }
        SplitSpec::Boundaries {
            valid_start,
            test_start,
        } => {
            if test_start < valid_start {
                return Err(Error::InvalidArgument(
                    "test boundary precedes validation boundary".into(),
                ));
            }
            let keys: Vec<i64> = series
                .timestamps
                .iter()
                .map(|s| timestamp_key(s).ok_or_else(|| Error::InvalidArgument(format!("bad timestamp `{s}`"))))
                .collect::<Result<_>>()?;
            let a = keys.partition_point(|&k| k < valid_start);
            let b = keys.partition_point(|&k| k < test_start);
            (a, b)
        }
    };
    if a == 0 {
        return Err(Error::EmptySplit("training region has no steps".into()));
    }
    let part = |s: usize, e: usize| if s < e { series.slice(s, e).map(Some) } else { Ok(None) };
    Ok(Splits {
        train: series.slice(0, a)?,
        valid: part(a, b)?,
        test: part(b, t)?,
    })
}

/// Normalises one split with the given statistics and windows it.
pub fn make_dataset(
    region: &RawSeries,
    stats: &NormStats,
    t_enc: usize,
    t_dec: usize,
    stride: usize,
    name: &str,
) -> Result<Dataset> {
    let normalized = stats.apply(region)?;
    let samples = window(&normalized, t_enc, t_dec, stride)
        .map_err(|e| match e {
            Error::SeriesTooShort { required, actual } => Error::InvalidArgument(format!(
                "{name} split has {actual} steps, windows need at least {required}"
            )),
            other => other,
        })?;
    Ok(Dataset {
        samples,
        stats: stats.clone(),
        split: name.to_string(),
        stride,
    })
}

/// Knobs of the regime-switching generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    /// AR(1) coefficient of the driver stations.
    pub ar: f64,
    pub amplitude: f64,
    pub period: f64,
    pub driver_noise: f64,
    /// Gain from the lagged active driver into station 0.
    pub coupling: f64,
    pub driven_noise: f64,
    /// Steps between regime draws.
    pub regime_len: usize,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            ar: 0.6,
            amplitude: 0.8,
            period: 24.0,
            driver_noise: 0.1,
            coupling: 0.9,
            driven_noise: 0.1,
            regime_len: 48,
        }
    }
}

pub const SYNTH_MIN_STATIONS: usize = 3;
pub const SYNTH_MIN_STEPS: usize = 500;

/// Synthetic network where station 0 copies a lagged "driver" station that
/// changes every `regime_len` steps. Also returns the active driver index per
/// step.
pub fn synth_generate_with_regimes(
    stations: usize,
    steps: usize,
    seed: u64,
    params: &SynthParams,
) -> Result<(RawSeries, Vec<usize>)> {
    if stations < SYNTH_MIN_STATIONS {
        return Err(Error::InvalidArgument(format!(
            "synthetic generator needs at least {SYNTH_MIN_STATIONS} stations, got {stations}"
        )));
    }
    if steps < SYNTH_MIN_STEPS {
        return Err(Error::InvalidArgument(format!(
            "synthetic generator needs at least {SYNTH_MIN_STEPS} steps, got {steps}"
        )));
    }
    if params.regime_len == 0 {
        return Err(Error::InvalidArgument("regime_len must be at least 1".into()));
    }
    let mut rng = Rng::new(seed);
    let e = stations;
    let mut values = Tensor::zeros(&[e, steps, 1]);
    let mut prev = vec![0.0; e];
    let mut cur = vec![0.0; e];
    let mut regimes = Vec::with_capacity(steps);
    let mut active = 1;
    for t in 0..steps {
        if t % params.regime_len == 0 {
            active = 1 + rng.below(e - 1);
        }
        for i in 1..e {
            let phase = params.period * i as f64 / e as f64;
            let season = (2.0 * PI * (t as f64 + phase) / params.period).sin();
            cur[i] = params.ar * prev[i] + params.amplitude * season + params.driver_noise * rng.normal();
        }
        cur[0] = params.coupling * prev[active] + params.driven_noise * rng.normal();
        for i in 0..e {
            values.set(&[i, t, 0], cur[i]);
        }
        regimes.push(active);
        std::mem::swap(&mut prev, &mut cur);
    }
    let series = RawSeries {
        stations: (0..e).map(|i| format!("s{i}")).collect(),
        timestamps: (0..steps).map(|t| t.to_string()).collect(),
        values,
        feature_names: vec!["value".into()],
    };
    Ok((series, regimes))
}

pub fn synth_generate(stations: usize, steps: usize, seed: u64, params: &SynthParams) -> Result<RawSeries> {
    Ok(synth_generate_with_regimes(stations, steps, seed, params)?.0)
}
