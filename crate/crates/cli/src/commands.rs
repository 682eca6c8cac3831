use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use awg_core::awdm::{discretize_wavelet, dwt_forward, spread, WaveletBasis};
use awg_core::data::{apply_mcar, load_csv, make_windows, synth_multiscale, SeriesDataset, Split, SplitRatios, SynthSpec, Window};
use awg_core::fama::{build_mask, fama_attention, head_selectivity, mask_time_bandwidth, AttentionVars, FreqHeadParams, HeadVars, MaskMode, PROBE_WIDTH};
use awg_core::model::{ablation_variant, calibrate_levels, evaluate, load_checkpoint, save_checkpoint, HorizonMetrics, Mode, Model, ModelConfig, Trainer, Variant};
use awg_core::ndcore::{SeededRng, Tape, Tensor};

use crate::config::RunConfig;
use crate::CliError;

/// RNG stream for evaluation-time masking.
const MCAR_STREAM: u64 = 7;

fn runtime(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| runtime(dir, e))?;
    }
    Ok(BufWriter::new(File::create(path).map_err(|e| runtime(path, e))?))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<(), CliError> {
    let mut f = create(path)?;
    serde_json::to_writer_pretty(&mut f, value).map_err(|e| runtime(path, e))?;
    writeln!(f).map_err(|e| runtime(path, e))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<BufWriter<File>>, CliError> {
    Ok(csv::Writer::from_writer(create(path)?))
}

fn flush_csv(mut w: csv::Writer<BufWriter<File>>, path: &Path) -> Result<(), CliError> {
    w.flush().map_err(|e| runtime(path, e))
}

pub fn load_dataset(cfg: &RunConfig) -> Result<SeriesDataset, CliError> {
    let ratios = cfg.ratios();
    ratios.validate()?;
    let ds = if cfg.run.data == "synth" {
        synth_multiscale(cfg.run.synth_len, cfg.run.synth_channels, cfg.run.synth_seed, &SynthSpec::default(), ratios)?
    } else {
        load_csv(Path::new(&cfg.run.data), ratios)?
    };
    Ok(ds)
}

/// Model config adapted to the dataset: channel count, and depth when
/// automatic selection is on.
fn model_config(cfg: &RunConfig, ds: &SeriesDataset) -> Result<ModelConfig, CliError> {
    let mut m = cfg.model.clone();
    m.channels = ds.channels();
    if m.auto_level {
        m.levels = calibrate_levels(&m, ds)?;
    }
    m.validate()?;
    Ok(m)
}

fn train_model(model_cfg: ModelConfig, ds: &SeriesDataset, stride: usize, metrics: Option<&mut dyn Write>) -> Result<Trainer, CliError> {
    let pool: Vec<Window> = make_windows(ds, model_cfg.input_len, model_cfg.horizon, stride, Split::Train)?.collect();
    let mut tr = Trainer::new(Model::new(model_cfg)?);
    tr.fit(&pool, metrics)?;
    Ok(tr)
}

/// Test windows, masked when the run asks for MCAR inputs.
fn eval_windows(cfg: &RunConfig, model: &ModelConfig, ds: &SeriesDataset) -> Result<Vec<Window>, CliError> {
    let windows: Vec<Window> = make_windows(ds, model.input_len, model.horizon, cfg.run.eval_stride, Split::Test)?.collect();
    if cfg.run.mcar == 0.0 {
        return Ok(windows);
    }
    let mut rng = SeededRng::new(model.seed).fork(MCAR_STREAM);
    Ok(windows
        .iter()
        .map(|w| apply_mcar(w, cfg.run.mcar, cfg.run.mcar_fill.into(), &mut rng))
        .collect::<awg_core::Result<_>>()?)
}

/// Requested horizons that fit the model; explicitly requested ones must all fit.
fn horizons(cfg: &RunConfig, model: &ModelConfig, explicit: bool) -> Result<Vec<usize>, CliError> {
    let fits = |h: usize| h > 0 && h <= model.horizon && h % (1 << model.levels) == 0;
    if explicit {
        if let Some(&h) = cfg.run.eval_horizons.iter().find(|&&h| !fits(h)) {
            return Err(CliError::Usage(format!(
                "horizon {h} must be at most {} and divisible by 2^{}",
                model.horizon, model.levels
            )));
        }
        return Ok(cfg.run.eval_horizons.clone());
    }
    let mut hs: Vec<usize> = cfg.run.eval_horizons.iter().copied().filter(|&h| fits(h)).collect();
    if hs.is_empty() {
        hs.push(model.horizon);
    }
    Ok(hs)
}

fn report_eval(out: &Path, name: &str, metrics: &[HorizonMetrics]) -> Result<(), CliError> {
    println!("horizon\tmse\tmae");
    for m in metrics {
        println!("{}\t{:.6}\t{:.6}", m.horizon, m.mse, m.mae);
    }
    write_json(&out.join(name), &metrics)
}

pub fn train(cfg: &RunConfig) -> Result<(), CliError> {
    let ds = load_dataset(cfg)?;
    let model_cfg = model_config(cfg, &ds)?;
    let out = cfg.out_dir();
    let metrics_path = out.join("metrics.jsonl");
    let mut metrics = create(&metrics_path)?;
    let tr = train_model(model_cfg.clone(), &ds, cfg.run.train_stride, Some(&mut metrics))?;
    metrics.flush().map_err(|e| runtime(&metrics_path, e))?;
    let ckpt = cfg.checkpoint_path();
    if let Some(dir) = ckpt.parent() {
        fs::create_dir_all(dir).map_err(|e| runtime(dir, e))?;
    }
    save_checkpoint(&ckpt, &tr).map_err(|e| runtime(&ckpt, e))?;
    let windows = eval_windows(cfg, &model_cfg, &ds)?;
    let result = evaluate(&tr.model, &windows, &horizons(cfg, &model_cfg, false)?)?;
    report_eval(&out, "eval.json", &result)
}

pub fn eval(cfg: &RunConfig, explicit_horizons: bool) -> Result<(), CliError> {
    let ckpt = cfg.checkpoint_path();
    let tr = load_checkpoint(&ckpt, None)?;
    let ds = load_dataset(cfg)?;
    let model_cfg = &tr.model.config;
    if ds.channels() != model_cfg.channels {
        return Err(CliError::Usage(format!(
            "dataset has {} channels, checkpoint expects {}",
            ds.channels(),
            model_cfg.channels
        )));
    }
    let hs = horizons(cfg, model_cfg, explicit_horizons)?;
    let windows = eval_windows(cfg, model_cfg, &ds)?;
    let result = evaluate(&tr.model, &windows, &hs)?;
    report_eval(&cfg.out_dir(), "eval.json", &result)
}

#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub mse: f64,
    pub mae: f64,
    pub delta_pct: f64,
}

pub fn ablate(cfg: &RunConfig) -> Result<Vec<AblationRow>, CliError> {
    let ds = load_dataset(cfg)?;
    let base = model_config(cfg, &ds)?;
    let mut scores = Vec::new();
    for v in Variant::ALL {
        let vcfg = ablation_variant(&base, v);
        let tr = train_model(vcfg.clone(), &ds, cfg.run.train_stride, None)?;
        let windows = eval_windows(cfg, &vcfg, &ds)?;
        let m = evaluate(&tr.model, &windows, &[vcfg.horizon])?;
        scores.push((v, m[0].mse, m[0].mae));
    }
    let full = scores[0].1;
    let rows: Vec<AblationRow> = scores
        .into_iter()
        .map(|(v, mse, mae)| AblationRow {
            variant: v.name().into(),
            mse,
            mae,
            delta_pct: 100.0 * (mse - full) / full,
        })
        .collect();
    let path = cfg.out_dir().join("ablation.csv");
    let mut w = csv_writer(&path)?;
    println!("variant\tmse\tmae\tdelta_pct");
    for r in &rows {
        w.serialize(r).map_err(|e| runtime(&path, e))?;
        println!("{}\t{:.6}\t{:.6}\t{:+.2}", r.variant, r.mse, r.mae, r.delta_pct);
    }
    flush_csv(w, &path)?;
    Ok(rows)
}

/// Impulse responses of the cascade: detail filter at every level, then
/// the deepest scaling filter.
pub fn equivalent_filters(basis: &WaveletBasis, levels: usize) -> Result<Vec<(String, usize, Vec<f64>)>, CliError> {
    let (psi, phi) = discretize_wavelet(basis)?;
    let (psi, phi) = (psi.into_data(), phi.into_data());
    let upsample = |f: &[f64], k: usize| {
        let mut out = vec![0.0; (f.len() - 1) * k + 1];
        for (i, &v) in f.iter().enumerate() {
            out[i * k] = v;
        }
        out
    };
    let convolve = |a: &[f64], b: &[f64]| {
        let mut out = vec![0.0; a.len() + b.len() - 1];
        for (i, &x) in a.iter().enumerate() {
            for (j, &y) in b.iter().enumerate() {
                out[i + j] += x * y;
            }
        }
        out
    };
    let mut records = Vec::new();
    let mut low = vec![1.0];
    for j in 1..=levels {
        let k = 1 << (j - 1);
        records.push(("wavelet".to_string(), j, convolve(&low, &upsample(&psi, k))));
        low = convolve(&low, &upsample(&phi, k));
    }
    records.push(("scaling".to_string(), levels, low));
    Ok(records)
}

fn dft_magnitudes(x: &[f64], n: usize) -> Vec<f64> {
    (0..=n / 2)
        .map(|k| {
            let (mut re, mut im) = (0.0, 0.0);
            for (t, v) in x.iter().enumerate() {
                let a = 2.0 * std::f64::consts::PI * (k * t) as f64 / n as f64;
                re += v * a.cos();
                im -= v * a.sin();
            }
            (re * re + im * im).sqrt()
        })
        .collect()
}

fn inspect_window(cfg: &RunConfig, model: &ModelConfig) -> Result<Tensor, CliError> {
    let t = model.input_len;
    if cfg.run.inspect_input == "test" {
        let ds = load_dataset(cfg)?;
        let w = make_windows(&ds, t, model.horizon, 1, Split::Test)?
            .next()
            .ok_or_else(|| CliError::Usage("no test window to inspect".into()))?;
        return Ok(w.x);
    }
    let all_train = SplitRatios {
        train: 1.0,
        val: 0.0,
        test: 0.0,
    };
    let ds = load_csv(Path::new(&cfg.run.inspect_input), all_train)?;
    if ds.len() < t || ds.channels() != model.channels {
        return Err(CliError::Usage(format!(
            "inspect input needs at least {t} rows of {} channels, got {} x {}",
            model.channels,
            ds.len(),
            ds.channels()
        )));
    }
    let d = ds.channels();
    Ok(Tensor::new([t, d], ds.values.data()[..t * d].to_vec())?)
}

pub fn inspect(cfg: &RunConfig) -> Result<(), CliError> {
    let ckpt = cfg.checkpoint_path();
    if !ckpt.exists() {
        return Err(CliError::Usage(format!("checkpoint {} not found", ckpt.display())));
    }
    let tr = load_checkpoint(&ckpt, None)?;
    let model = &tr.model;
    let mcfg = &model.config;
    let dir = cfg.out_dir().join("inspect");
    let basis = model.basis()?;
    let records = equivalent_filters(&basis, mcfg.levels)?;

    let path = dir.join("basis.csv");
    let mut w = csv_writer(&path)?;
    w.write_record(["record", "level", "tap", "value"]).map_err(|e| runtime(&path, e))?;
    for (kind, level, taps) in &records {
        for (k, v) in taps.iter().enumerate() {
            w.write_record([kind.clone(), level.to_string(), k.to_string(), v.to_string()]).map_err(|e| runtime(&path, e))?;
        }
    }
    flush_csv(w, &path)?;

    let path = dir.join("spectrum.csv");
    let mut w = csv_writer(&path)?;
    w.write_record(["record", "level", "frequency", "magnitude"]).map_err(|e| runtime(&path, e))?;
    for (kind, level, taps) in &records {
        let n = taps.len().next_power_of_two().max(128);
        for (k, m) in dft_magnitudes(taps, n).iter().enumerate() {
            w.write_record([kind.clone(), level.to_string(), (k as f64 / n as f64).to_string(), m.to_string()])
                .map_err(|e| runtime(&path, e))?;
        }
    }
    flush_csv(w, &path)?;

    let tb_path = dir.join("time_bandwidth.csv");
    let mut tb = csv_writer(&tb_path)?;
    tb.write_record(["record", "level", "head", "delta_t", "delta_f", "time_bandwidth"]).map_err(|e| runtime(&tb_path, e))?;
    for (kind, level, taps) in &records {
        let s = spread(taps)?;
        tb.write_record([kind.clone(), level.to_string(), String::new(), s.delta_t.to_string(), s.delta_f.to_string(), s.product().to_string()])
            .map_err(|e| runtime(&tb_path, e))?;
    }

    let mask_path = dir.join("masks.csv");
    let sel_path = dir.join("selectivity.csv");
    let mut masks = csv_writer(&mask_path)?;
    let mut sel = csv_writer(&sel_path)?;
    masks.write_record(["layer", "head", "omega", "sigma", "lag", "value"]).map_err(|e| runtime(&mask_path, e))?;
    sel.write_record(["layer", "head", "probe", "ratio"]).map_err(|e| runtime(&sel_path, e))?;
    let count = cfg.run.probe_count.max(2);
    let probes: Vec<f64> = (0..count).map(|i| 0.5 * i as f64 / (count - 1) as f64).collect();
    for l in 0..mcfg.num_layers {
        let heads = model.freq_heads(l)?;
        for h in 0..heads.num_heads() {
            let mask = build_mask(&heads, h, mcfg.seq_len())?;
            for (lag, v) in mask.profile.iter().enumerate() {
                masks
                    .write_record([l.to_string(), h.to_string(), mask.omega.to_string(), mask.sigma.to_string(), lag.to_string(), v.to_string()])
                    .map_err(|e| runtime(&mask_path, e))?;
            }
            let s_tb = mask_time_bandwidth(&mask)?;
            tb.write_record([format!("mask.{l}"), String::new(), h.to_string(), String::new(), String::new(), s_tb.to_string()])
                .map_err(|e| runtime(&tb_path, e))?;
            for (p, r) in probes.iter().zip(head_selectivity(&heads, h, &probes, mcfg.seq_len(), PROBE_WIDTH)?) {
                sel.write_record([l.to_string(), h.to_string(), p.to_string(), r.to_string()]).map_err(|e| runtime(&sel_path, e))?;
            }
        }
    }
    flush_csv(masks, &mask_path)?;
    flush_csv(sel, &sel_path)?;
    flush_csv(tb, &tb_path)?;

    let x = inspect_window(cfg, mcfg)?;
    let (_, aux) = model.forward(&x, Mode::Eval, &mut SeededRng::new(mcfg.seed))?;
    let names: Vec<String> = (1..=mcfg.levels).map(|j| format!("detail.{j}")).chain(["approx".to_string()]).collect();
    let path = dir.join("decomposition.csv");
    let mut w = csv_writer(&path)?;
    w.write_record(["band", "index", "channel", "value"]).map_err(|e| runtime(&path, e))?;
    let epath = dir.join("energy.csv");
    let mut e = csv_writer(&epath)?;
    e.write_record(["band", "energy", "fraction"]).map_err(|e| runtime(&epath, e))?;
    let total: f64 = aux.decomposition.bands().map(|b| b.sq_norm()).sum();
    for (name, band) in names.iter().zip(aux.decomposition.bands()) {
        let d = band.dims2().map_or(1, |d| d.1);
        for (k, v) in band.data().iter().enumerate() {
            w.write_record([name.clone(), (k / d).to_string(), (k % d).to_string(), v.to_string()]).map_err(|e| runtime(&path, e))?;
        }
        let en = band.sq_norm();
        let frac = if total > 0.0 { en / total } else { 0.0 };
        e.write_record([name.clone(), en.to_string(), frac.to_string()]).map_err(|e| runtime(&epath, e))?;
    }
    flush_csv(w, &path)?;
    flush_csv(e, &epath)?;
    println!("wrote inspection data to {}", dir.display());
    Ok(())
}

#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct BenchReport {
    pub lengths: Vec<usize>,
    pub dwt_seconds: Vec<f64>,
    pub attention_seconds: Vec<f64>,
    pub dwt_exponent: f64,
    pub attention_exponent: f64,
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(x: &[usize], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|&v| (v as f64).ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

fn min_time(repeats: usize, mut f: impl FnMut() -> Result<(), CliError>) -> Result<f64, CliError> {
    f()?;
    let mut best = f64::INFINITY;
    for _ in 0..repeats.max(1) {
        let t0 = Instant::now();
        f()?;
        best = best.min(t0.elapsed().as_secs_f64());
    }
    Ok(best)
}

/// Wall time of one transform and one attention pass per length.
pub fn bench_scaling(lengths: &[usize], repeats: usize, levels: usize, seed: u64) -> Result<BenchReport, CliError> {
    if lengths.len() < 2 {
        return Err(CliError::Usage("bench needs at least two lengths".into()));
    }
    let basis = WaveletBasis::db4(8)?;
    let mut rng = SeededRng::new(seed);
    let (width, heads) = (16, 4);
    let freq = FreqHeadParams::init(heads, width / heads);
    let weights: Vec<Tensor> = (0..3 * heads).map(|_| Tensor::randn([width, width / heads], 0.25, &mut rng)).collect();
    let wo = Tensor::randn([width, width], 0.25, &mut rng);
    let mut dwt = Vec::new();
    let mut attn = Vec::new();
    for &t in lengths {
        let x = Tensor::randn([t, 1], 1.0, &mut rng);
        dwt.push(min_time(repeats, || {
            dwt_forward(&x, &basis, levels)?;
            Ok(())
        })?);
        let z = Tensor::randn([t, width], 1.0, &mut rng);
        attn.push(min_time(repeats, || {
            let mut tape = Tape::new();
            let vars = AttentionVars {
                heads: (0..heads)
                    .map(|h| HeadVars {
                        omega: tape.constant(Tensor::scalar(freq.omega[h])),
                        log_sigma: tape.constant(Tensor::scalar(freq.log_sigma[h])),
                        wq: tape.constant(weights[3 * h].clone()),
                        wk: tape.constant(weights[3 * h + 1].clone()),
                        wv: tape.constant(weights[3 * h + 2].clone()),
                    })
                    .collect(),
                wo: tape.constant(wo.clone()),
            };
            let zv = tape.constant(z.clone());
            fama_attention(&mut tape, zv, zv, zv, &vars, MaskMode::Frequency)?;
            Ok(())
        })?);
    }
    Ok(BenchReport {
        lengths: lengths.to_vec(),
        dwt_exponent: loglog_slope(lengths, &dwt),
        attention_exponent: loglog_slope(lengths, &attn),
        dwt_seconds: dwt,
        attention_seconds: attn,
    })
}

pub fn bench(cfg: &RunConfig) -> Result<BenchReport, CliError> {
    let r = bench_scaling(&cfg.run.bench_lengths, cfg.run.bench_repeats, cfg.run.bench_levels, cfg.model.seed)?;
    let path = cfg.out_dir().join("bench.csv");
    let mut w = csv_writer(&path)?;
    w.write_record(["op", "T", "seconds"]).map_err(|e| runtime(&path, e))?;
    println!("op\tT\tseconds");
    for (op, times) in [("dwt_forward", &r.dwt_seconds), ("fama_attention", &r.attention_seconds)] {
        for (t, s) in r.lengths.iter().zip(times.iter()) {
            w.write_record([op.to_string(), t.to_string(), s.to_string()]).map_err(|e| runtime(&path, e))?;
            println!("{op}\t{t}\t{s:.6}");
        }
    }
    flush_csv(w, &path)?;
    println!("dwt_forward exponent {:.3}", r.dwt_exponent);
    println!("fama_attention exponent {:.3}", r.attention_exponent);
    write_json(&cfg.out_dir().join("bench.json"), &r)?;
    Ok(r)
}
