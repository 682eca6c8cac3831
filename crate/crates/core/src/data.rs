//! CSV ingestion, train-only normalization, sliding windows, MCAR masking
//! and a seeded multi-scale synthetic generator.

use std::ops::Range;
use std::path::Path;

use crate::error::{Error, Result};
use crate::ndcore::{SeededRng, Tensor};

/// Fractions of rows assigned to train, validation and test, in order.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios {
            train: 0.6,
            val: 0.2,
            test: 0.2,
        }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|r| !(0.0..=1.0).contains(r)) || parts.iter().sum::<f64>() > 1.0 + 1e-9 || self.train == 0.0 {
            return Err(Error::Config(format!("invalid split ratios {parts:?}")));
        }
        Ok(())
    }

    /// Row ranges for `n` rows. Train and validation take the floor of their
    /// share; when the ratios sum to one the test split takes the rest.
    pub fn ranges(&self, n: usize) -> [Range<usize>; 3] {
        let take = |r: f64| ((n as f64) * r + 1e-9).floor() as usize;
        let train = take(self.train).min(n);
        let val = take(self.val).min(n - train);
        let test = if (self.train + self.val + self.test - 1.0).abs() < 1e-9 {
            n - train - val
        } else {
            take(self.test).min(n - train - val)
        };
        [0..train, train..train + val, train + val..train + val + test]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    fn index(self) -> usize {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        }
    }
}

/// Per-channel statistics from the training rows.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    /// Population standard deviation; 1 for constant channels.
    pub std: Vec<f64>,
    pub constant: Vec<bool>,
}

/// Channels whose training std falls below this are flagged constant.
const CONSTANT_STD: f64 = 1e-12;

impl ChannelStats {
    pub fn from_rows(values: &Tensor, rows: Range<usize>) -> Self {
        let (_, d) = values.dims2().expect("matrix");
        let n = rows.len().max(1) as f64;
        let mut mean = vec![0.0; d];
        for r in rows.clone() {
            for (c, m) in mean.iter_mut().enumerate() {
                *m += values.at(r, c);
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for r in rows {
            for c in 0..d {
                var[c] += (values.at(r, c) - mean[c]).powi(2);
            }
        }
        let mut std = Vec::with_capacity(d);
        let mut constant = Vec::with_capacity(d);
        for v in var {
            let s = (v / n).sqrt();
            constant.push(s < CONSTANT_STD);
            std.push(if s < CONSTANT_STD { 1.0 } else { s });
        }
        ChannelStats { mean, std, constant }
    }
}

/// A multichannel series with its splits and training statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct SeriesDataset {
    pub timestamps: Option<Vec<String>>,
    pub columns: Vec<String>,
    /// `[N × D]`, raw scale.
    pub values: Tensor,
    pub splits: [Range<usize>; 3],
    pub stats: ChannelStats,
}

impl SeriesDataset {
    pub fn new(values: Tensor, columns: Vec<String>, timestamps: Option<Vec<String>>, ratios: SplitRatios) -> Result<Self> {
        ratios.validate()?;
        let (n, d) = values
            .dims2()
            .ok_or_else(|| Error::shape("dataset", "values must be [N x D]"))?;
        if columns.len() != d {
            return Err(Error::shape("dataset", format!("{} column names for {d} channels", columns.len())));
        }
        let values = values.reshaped([n, d])?;
        let splits = ratios.ranges(n);
        if splits[0].is_empty() {
            return Err(Error::Config(format!("{n} rows leave an empty training split")));
        }
        let stats = ChannelStats::from_rows(&values, splits[0].clone());
        Ok(SeriesDataset {
            timestamps,
            columns,
            values,
            splits,
            stats,
        })
    }

    pub fn len(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn split(&self, split: Split) -> Range<usize> {
        self.splits[split.index()].clone()
    }

    /// Value at `(row, channel)` standardized with the training statistics.
    pub fn normalized(&self, row: usize, channel: usize) -> f64 {
        (self.values.at(row, channel) - self.stats.mean[channel]) / self.stats.std[channel]
    }

    /// Maps a normalized `[n × D]` block back to raw scale.
    pub fn denormalize(&self, x: &Tensor) -> Tensor {
        let d = self.channels();
        let mut out = x.clone();
        for (e, v) in out.data_mut().iter_mut().enumerate() {
            let c = e % d;
            *v = *v * self.stats.std[c] + self.stats.mean[c];
        }
        out
    }
}

/// Reads an ETT-style CSV: a header, a first `date`/index column, then
/// numeric channels.
pub fn load_csv(path: &Path, ratios: SplitRatios) -> Result<SeriesDataset> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let headers = reader
        .headers()
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?
        .clone();
    if headers.len() < 2 {
        return Err(Error::Format(format!(
            "{}: need a date column and at least one value column",
            path.display()
        )));
    }
    let columns: Vec<String> = headers.iter().skip(1).map(str::to_string).collect();
    let d = columns.len();
    let mut stamps = Vec::new();
    let mut data = Vec::new();
    for (i, record) in reader.records().enumerate() {
        // Line numbers are 1-based and count the header.
        let row = i + 2;
        let record = record.map_err(|e| Error::Parse {
            row,
            column: 0,
            message: e.to_string(),
        })?;
        if record.len() != d + 1 {
            return Err(Error::Parse {
                row,
                column: record.len(),
                message: format!("expected {} fields, found {}", d + 1, record.len()),
            });
        }
        stamps.push(record[0].to_string());
        for (c, cell) in record.iter().enumerate().skip(1) {
            let v: f64 = cell.trim().parse().map_err(|_| Error::Parse {
                row,
                column: c + 1,
                message: format!("non-numeric value {cell:?} in column {:?}", headers.get(c).unwrap_or("")),
            })?;
            data.push(v);
        }
    }
    if stamps.is_empty() {
        return Err(Error::Format(format!("{}: no data rows", path.display())));
    }
    let n = stamps.len();
    SeriesDataset::new(Tensor::new([n, d], data)?, columns, Some(stamps), ratios)
}

/// Writes the dataset in the same schema [`load_csv`] reads.
pub fn write_csv(ds: &SeriesDataset, path: &Path) -> Result<()> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let io = |e: csv::Error| Error::Format(format!("{}: {e}", path.display()));
    let mut header = vec!["date".to_string()];
    header.extend(ds.columns.iter().cloned());
    writer.write_record(&header).map_err(io)?;
    for r in 0..ds.len() {
        let mut rec = vec![ds.timestamps.as_ref().map_or_else(|| r.to_string(), |t| t[r].clone())];
        rec.extend((0..ds.channels()).map(|c| format!("{}", ds.values.at(r, c))));
        writer.write_record(&rec).map_err(io)?;
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

/// One normalized input/target pair taken from a single split.
#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    /// First input row in the dataset.
    pub start: usize,
    /// `[T × D]`.
    pub x: Tensor,
    /// `[H × D]`.
    pub y: Tensor,
    /// `true` where `x` is observed.
    pub mask: Option<Vec<bool>>,
}

/// Stacked windows: `x` is `[B × T × D]`, `y` is `[B × H × D]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeSeriesBatch {
    pub x: Tensor,
    pub y: Tensor,
    pub mask: Option<Vec<bool>>,
}

impl TimeSeriesBatch {
    pub fn from_windows(windows: &[Window]) -> Result<Self> {
        let xs: Vec<Tensor> = windows.iter().map(|w| w.x.clone()).collect();
        let ys: Vec<Tensor> = windows.iter().map(|w| w.y.clone()).collect();
        let mask = if windows.iter().all(|w| w.mask.is_some()) && !windows.is_empty() {
            Some(windows.iter().flat_map(|w| w.mask.clone().unwrap_or_default()).collect())
        } else {
            None
        };
        Ok(TimeSeriesBatch {
            x: Tensor::stack(&xs)?,
            y: Tensor::stack(&ys)?,
            mask,
        })
    }

    pub fn len(&self) -> usize {
        self.x.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn window(&self, b: usize) -> (Tensor, Tensor) {
        (self.x.slab(b), self.y.slab(b))
    }
}

/// Sliding windows over one split.
#[derive(Clone, Debug)]
pub struct Windows<'a> {
    ds: &'a SeriesDataset,
    input_len: usize,
    horizon: usize,
    stride: usize,
    next: usize,
    end: usize,
}

impl Windows<'_> {
    pub fn remaining(&self) -> usize {
        let span = self.input_len + self.horizon;
        if self.next + span > self.end {
            0
        } else {
            (self.end - self.next - span) / self.stride + 1
        }
    }
}

impl Iterator for Windows<'_> {
    type Item = Window;

    fn next(&mut self) -> Option<Window> {
        let span = self.input_len + self.horizon;
        if self.next + span > self.end {
            return None;
        }
        let start = self.next;
        self.next += self.stride;
        let d = self.ds.channels();
        let block = |from: usize, len: usize| {
            let data = (from..from + len)
                .flat_map(|r| (0..d).map(move |c| (r, c)))
                .map(|(r, c)| self.ds.normalized(r, c))
                .collect();
            Tensor::new([len, d], data).expect("window shape")
        };
        Some(Window {
            start,
            x: block(start, self.input_len),
            y: block(start + self.input_len, self.horizon),
            mask: None,
        })
    }
}

/// Windows of `input_len` inputs followed by `horizon` targets, entirely
/// inside `split`, advancing by `stride`.
pub fn make_windows(ds: &SeriesDataset, input_len: usize, horizon: usize, stride: usize, split: Split) -> Result<Windows<'_>> {
    if stride == 0 || input_len == 0 || horizon == 0 {
        return Err(Error::Config("window length, horizon and stride must be positive".into()));
    }
    let range = ds.split(split);
    let need = input_len + horizon;
    if range.len() < need {
        return Err(Error::Config(format!(
            "{split:?} split has {} rows; windows need at least T + H = {need}",
            range.len()
        )));
    }
    Ok(Windows {
        ds,
        input_len,
        horizon,
        stride,
        next: range.start,
        end: range.end,
    })
}

/// How masked inputs are filled.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fill {
    /// Zero in normalized units, i.e. the training mean.
    ZeroAfterNorm,
    /// Linear interpolation between the nearest observed neighbours along
    /// time; edges copy the nearest observation.
    LinearInterp,
}

/// Drops each input position independently with probability `rate` and
/// fills it. Targets are untouched.
pub fn apply_mcar(window: &Window, rate: f64, fill: Fill, rng: &mut SeededRng) -> Result<Window> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Argument(format!("MCAR rate {rate} outside [0, 1)")));
    }
    let (t, d) = window.x.dims2().ok_or_else(|| Error::shape("apply_mcar", "x must be [T x D]"))?;
    let observed: Vec<bool> = (0..t * d).map(|_| !(rate > 0.0 && rng.bernoulli(rate))).collect();
    let mut x = window.x.clone();
    for c in 0..d {
        let seen: Vec<usize> = (0..t).filter(|&r| observed[r * d + c]).collect();
        for r in 0..t {
            if observed[r * d + c] {
                continue;
            }
            let v = match fill {
                Fill::ZeroAfterNorm => 0.0,
                Fill::LinearInterp => interpolate(&window.x, &seen, r, c),
            };
            x.set(r, c, v);
        }
    }
    Ok(Window {
        start: window.start,
        x,
        y: window.y.clone(),
        mask: Some(observed),
    })
}

fn interpolate(x: &Tensor, seen: &[usize], r: usize, c: usize) -> f64 {
    let after = seen.partition_point(|&s| s < r);
    match (after.checked_sub(1).map(|i| seen[i]), seen.get(after).copied()) {
        (Some(a), Some(b)) => {
            let w = (r - a) as f64 / (b - a) as f64;
            x.at(a, c) * (1.0 - w) + x.at(b, c) * w
        }
        (Some(a), None) => x.at(a, c),
        (None, Some(b)) => x.at(b, c),
        (None, None) => 0.0,
    }
}

/// Components of the synthetic series.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    /// Linear trend per step.
    pub slope: f64,
    /// `(amplitude, period in samples)` pairs.
    pub sinusoids: Vec<(f64, f64)>,
    pub noise_std: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            slope: 0.001,
            sinusoids: vec![(1.0, 64.0), (0.3, 8.0)],
            noise_std: 0.1,
        }
    }
}

/// `x[t, c] = slope·t + Σ a·sin(2πt/p + c·k) + noise`, where channel `c`
/// shifts every sinusoid's phase by `c·k` with `k = 0.7` rad.
pub fn synth_multiscale(n: usize, channels: usize, seed: u64, spec: &SynthSpec, ratios: SplitRatios) -> Result<SeriesDataset> {
    if n == 0 || channels == 0 {
        return Err(Error::Argument("synthetic series needs rows and channels".into()));
    }
    let mut rng = SeededRng::new(seed);
    let mut data = Vec::with_capacity(n * channels);
    for t in 0..n {
        for c in 0..channels {
            let mut v = spec.slope * t as f64;
            for &(amp, period) in &spec.sinusoids {
                v += amp * (2.0 * std::f64::consts::PI * t as f64 / period + 0.7 * c as f64).sin();
            }
            if spec.noise_std > 0.0 {
                v += spec.noise_std * rng.normal();
            }
            data.push(v);
        }
    }
    let columns = (0..channels).map(|c| format!("x{c}")).collect();
    SeriesDataset::new(Tensor::new([n, channels], data)?, columns, None, ratios)
}
