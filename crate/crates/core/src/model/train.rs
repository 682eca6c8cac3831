use std::io::Write;

use serde::{Deserialize, Serialize};

use super::{total_loss, Mode, Model, ModelConfig};
use crate::awdm::{select_level, WaveletBasis};
use crate::csff::SpectralDropoutSchedule;
use crate::data::{SeriesDataset, Split, Window};
use crate::error::{Error, Result};
use crate::ndcore::{Adam, SeededRng, Tape, Tensor};

/// RNG stream for batch sampling and dropout.
const TRAIN_STREAM: u64 = 2;

/// One metrics record, batch-averaged.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub l_pred: f64,
    pub l_recon: f64,
    pub l_ortho: f64,
    pub l_smooth: f64,
    pub lr: f64,
    pub dropout_rate: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub metrics: StepMetrics,
    pub total: f64,
    /// Largest absolute gradient entry per parameter, in store order.
    pub grad_max: Vec<f64>,
}

/// Model plus everything needed to resume training.
#[derive(Clone, Debug, PartialEq)]
pub struct Trainer {
    pub model: Model,
    pub opt: Adam,
    pub rng: SeededRng,
    pub schedule: SpectralDropoutSchedule,
    pub step: u64,
}

impl Trainer {
    pub fn new(model: Model) -> Self {
        let opt = Adam::new(model.config.adam(), model.params.values());
        let rng = SeededRng::new(model.config.seed).fork(TRAIN_STREAM);
        let schedule = model.config.dropout_schedule();
        Trainer {
            model,
            opt,
            rng,
            schedule,
            step: 0,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.model.config
    }

    /// Forward, backward and one optimizer update over `batch`.
    pub fn train_step(&mut self, batch: &[Window]) -> Result<StepReport> {
        if batch.is_empty() {
            return Err(Error::Argument("empty batch".into()));
        }
        let cfg = self.model.config.clone();
        let rate = self.schedule.rate();
        let mut tape = Tape::new();
        let bound = self.model.bind(&mut tape)?;
        let inv = 1.0 / batch.len() as f64;
        let mut sums = [0.0; 4];
        let mut total = None;
        for w in batch {
            let out = bound.forward(&mut tape, &w.x, Mode::Train { dropout: rate }, &mut self.rng)?;
            let terms = total_loss(&mut tape, out.forecast, &w.y, &out.aux, &cfg)?;
            for (s, v) in sums.iter_mut().zip([terms.pred, terms.recon, terms.ortho, terms.smooth]) {
                *s += tape.value(v).item() * inv;
            }
            let scaled = tape.scale(terms.total, inv);
            total = Some(match total {
                Some(t) => tape.add(t, scaled)?,
                None => scaled,
            });
        }
        let total = total.expect("non-empty batch");
        let loss = tape.value(total).item();
        let paths = self.model.params.paths();
        if !loss.is_finite() {
            let culprit = self
                .model
                .params
                .iter()
                .find(|(_, t)| !t.all_finite())
                .map(|(p, _)| p.to_string())
                .or_else(|| {
                    ["loss.l_pred", "loss.l_recon", "loss.l_ortho", "loss.l_smooth"]
                        .iter()
                        .zip(sums)
                        .find(|(_, v)| !v.is_finite())
                        .map(|(p, _)| p.to_string())
                })
                .unwrap_or_else(|| "loss.total".into());
            return Err(Error::Numeric(format!("non-finite loss at step {}: first NaN in {culprit}", self.step)));
        }
        let grads = tape.backward(total)?;
        let values = self.model.params.values();
        let g: Vec<Vec<f64>> = bound
            .vars()
            .iter()
            .zip(values)
            .map(|(&v, p)| grads.get_or_zeros(v, p.len()))
            .collect();
        if let Some(i) = g.iter().position(|g| g.iter().any(|v| !v.is_finite())) {
            return Err(Error::Numeric(format!("non-finite gradient at step {}: first NaN in {}", self.step, paths[i])));
        }
        let grad_max = g.iter().map(|g| g.iter().fold(0.0f64, |m, v| m.max(v.abs()))).collect();
        drop(bound);
        let trainable = self.model.params.trainable().to_vec();
        self.opt.update(self.model.params.values_mut(), &g, &trainable)?;
        self.schedule.advance();
        self.step += 1;
        Ok(StepReport {
            metrics: StepMetrics {
                step: self.step,
                l_pred: sums[0],
                l_recon: sums[1],
                l_ortho: sums[2],
                l_smooth: sums[3],
                lr: cfg.lr,
                dropout_rate: rate,
            },
            total: loss,
            grad_max,
        })
    }

    /// Draws `batch_size` windows uniformly with replacement.
    pub fn sample_batch(&mut self, pool: &[Window]) -> Result<Vec<Window>> {
        if pool.is_empty() {
            return Err(Error::Config("no training windows".into()));
        }
        Ok((0..self.model.config.batch_size)
            .map(|_| pool[self.rng.below(pool.len())].clone())
            .collect())
    }

    /// Trains until `max_steps`, writing one JSON line per step to `sink`.
    pub fn fit(&mut self, pool: &[Window], mut sink: Option<&mut dyn Write>) -> Result<Vec<StepMetrics>> {
        let mut history = Vec::new();
        while self.step < self.model.config.max_steps {
            let batch = self.sample_batch(pool)?;
            let report = self.train_step(&batch)?;
            if let Some(out) = sink.as_deref_mut() {
                let line = serde_json::to_string(&report.metrics).map_err(|e| Error::Format(e.to_string()))?;
                writeln!(out, "{line}").map_err(|e| Error::io("metrics", e))?;
            }
            history.push(report.metrics);
        }
        Ok(history)
    }
}

/// Errors over the first `horizon` forecast steps, averaged over windows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HorizonMetrics {
    pub horizon: usize,
    pub mse: f64,
    pub mae: f64,
}

/// MSE/MAE per requested horizon; each must be at most `H` and divisible by
/// `2^J`.
pub fn evaluate(model: &Model, windows: &[Window], horizons: &[usize]) -> Result<Vec<HorizonMetrics>> {
    let cfg = &model.config;
    for &h in horizons {
        if h == 0 || h > cfg.horizon || h % (1 << cfg.levels) != 0 {
            return Err(Error::Config(format!(
                "evaluation horizon {h} must be in 1..={} and divisible by 2^{}",
                cfg.horizon, cfg.levels
            )));
        }
    }
    if windows.is_empty() {
        return Err(Error::Config("no evaluation windows".into()));
    }
    let mut se = vec![0.0; horizons.len()];
    let mut ae = vec![0.0; horizons.len()];
    for w in windows {
        let f = model.predict(&w.x)?;
        for (k, &h) in horizons.iter().enumerate() {
            let n = h * cfg.channels;
            for (a, b) in f.data()[..n].iter().zip(&w.y.data()[..n]) {
                se[k] += (a - b).powi(2) / n as f64;
                ae[k] += (a - b).abs() / n as f64;
            }
        }
    }
    let count = windows.len() as f64;
    Ok(horizons
        .iter()
        .zip(se.into_iter().zip(ae))
        .map(|(&horizon, (s, a))| HorizonMetrics {
            horizon,
            mse: s / count,
            mae: a / count,
        })
        .collect())
}

/// Picks the decomposition depth on the first window-length slice of the
/// validation split (training split if validation is too short), restricted
/// to depths dividing both `T` and `H`.
pub fn calibrate_levels(cfg: &ModelConfig, ds: &SeriesDataset) -> Result<usize> {
    let t = cfg.input_len;
    let val = ds.split(Split::Val);
    let rows = if val.len() >= t { val } else { ds.split(Split::Train) };
    if rows.len() < t {
        return Err(Error::Config(format!("calibration needs {t} rows, have {}", rows.len())));
    }
    let d = ds.channels();
    let x = Tensor::new(
        [t, d],
        (0..t * d).map(|e| ds.normalized(rows.start + e / d, e % d)).collect(),
    )?;
    let mut j_max = cfg.max_levels.min(30);
    while j_max > 1 && (t % (1 << j_max) != 0 || cfg.horizon % (1 << j_max) != 0) {
        j_max -= 1;
    }
    let basis = match cfg.basis_init {
        super::BasisInit::Db4 => WaveletBasis::db4(cfg.filter_len)?,
        super::BasisInit::Haar => WaveletBasis::haar(cfg.filter_len)?,
    };
    Ok(select_level(&x, &basis, j_max, cfg.level_lambda, cfg.level_threshold)?.j_star)
}
