//! Full forecaster: adaptive decomposition, a stack of fusion + attention
//! layers over the aligned bands, and per-band prediction heads. Owns the
//! composite loss, the training loop and checkpoints.

mod checkpoint;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, FORMAT_VERSION, MAGIC};
pub use train::{calibrate_levels, evaluate, HorizonMetrics, StepMetrics, StepReport, Trainer};

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::awdm::{analyze, ortho_loss, smooth_loss, synthesize, AtomVars, BasisVars, Filters, Pyramid, WaveletBasis};
use crate::csff::{align_levels, fuse, nearest_resample, residual_inject, spectral_dropout, CouplingState, CouplingVars, SpectralDropoutSchedule};
use crate::error::{Error, Result};
use crate::fama::{attend, head_dim, head_masks, AttentionVars, FreqHeadParams, HeadVars as AttnHeadVars};
use crate::hpn::{apply_head, horizon_lengths, predict_pyramid, HeadVars, ScaleHead};
use crate::ndcore::{AdamConfig, Boundary, SeededRng, Tape, Tensor, Var};

/// RNG stream used for parameter initialization.
const INIT_STREAM: u64 = 1;

const LN_EPS: f64 = 1e-5;

/// Variance floor of the per-window instance normalization.
const INSTANCE_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BasisInit {
    Db4,
    Haar,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DropoutMode {
    Anneal,
    Fixed,
}

/// Every knob of the model and its optimizer. Flat so it serializes to a
/// plain `key = value` block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Input window `T`.
    pub input_len: usize,
    /// Forecast horizon `H`.
    pub horizon: usize,
    /// Series channels `D`.
    pub channels: usize,
    /// Decomposition depth `J`.
    pub levels: usize,
    /// Upper bound for automatic depth selection.
    pub max_levels: usize,
    pub auto_level: bool,
    pub level_lambda: f64,
    pub level_threshold: f64,
    /// Fusion width `C`.
    pub width: usize,
    pub d_model: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    pub filter_len: usize,
    /// Hidden units of each prediction head.
    pub hidden: usize,
    pub basis_init: BasisInit,
    pub freeze_basis: bool,
    pub use_csff: bool,
    pub use_fama_mask: bool,
    pub use_hpn: bool,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub dropout_mode: DropoutMode,
    pub dropout_start: f64,
    pub dropout_end: f64,
    pub dropout_anneal_steps: u64,
    pub dropout_fixed_rate: f64,
    pub max_steps: u64,
    pub batch_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_len: 128,
            horizon: 32,
            channels: 1,
            levels: 3,
            max_levels: 5,
            auto_level: false,
            level_lambda: 0.01,
            level_threshold: 1e-3,
            width: 32,
            d_model: 64,
            num_heads: 4,
            num_layers: 2,
            filter_len: 8,
            hidden: 64,
            basis_init: BasisInit::Db4,
            freeze_basis: false,
            use_csff: true,
            use_fama_mask: true,
            use_hpn: true,
            lambda1: 0.1,
            lambda2: 0.01,
            lambda3: 0.001,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            seed: 0,
            dropout_mode: DropoutMode::Anneal,
            dropout_start: 0.3,
            dropout_end: 0.05,
            dropout_anneal_steps: 10_000,
            dropout_fixed_rate: 0.2,
            max_steps: 2000,
            batch_size: 8,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let cfg_err = |m: String| Err(Error::Config(m));
        let positive = [
            ("input_len", self.input_len),
            ("horizon", self.horizon),
            ("channels", self.channels),
            ("levels", self.levels),
            ("width", self.width),
            ("d_model", self.d_model),
            ("num_heads", self.num_heads),
            ("num_layers", self.num_layers),
            ("hidden", self.hidden),
            ("batch_size", self.batch_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                return cfg_err(format!("{name} must be positive"));
            }
        }
        if self.levels >= 32 {
            return cfg_err(format!("levels {} is too deep", self.levels));
        }
        let block = 1usize << self.levels;
        if self.input_len % block != 0 {
            return cfg_err(format!("input_len {} is not divisible by 2^{}", self.input_len, self.levels));
        }
        if self.horizon % block != 0 {
            return cfg_err(format!("horizon {} is not divisible by 2^{}", self.horizon, self.levels));
        }
        if self.filter_len < 2 || self.filter_len % 2 != 0 {
            return cfg_err(format!("filter_len {} must be even and at least 2", self.filter_len));
        }
        if self.basis_init == BasisInit::Db4 && self.filter_len < 8 {
            return cfg_err(format!("db4 initialization needs filter_len >= 8, got {}", self.filter_len));
        }
        if self.lambda3 > 0.0 && self.filter_len < 3 {
            return cfg_err("lambda3 > 0 needs filter_len >= 3 for the smoothness term".into());
        }
        head_dim(self.d_model, self.num_heads)?;
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
            ("level_lambda", self.level_lambda),
            ("weight_decay", self.weight_decay),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return cfg_err(format!("{name} must be a finite non-negative number, got {v}"));
            }
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return cfg_err("optimizer needs lr > 0, betas in [0, 1) and eps > 0".into());
        }
        if self.auto_level && self.max_levels == 0 {
            return cfg_err("max_levels must be positive".into());
        }
        self.dropout_schedule().validate()
    }

    /// Length of the encoder sequence: the finest detail band.
    pub fn seq_len(&self) -> usize {
        self.input_len / 2
    }

    pub fn d_k(&self) -> usize {
        self.d_model / self.num_heads
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn dropout_schedule(&self) -> SpectralDropoutSchedule {
        SpectralDropoutSchedule {
            rate_start: self.dropout_start,
            rate_end: self.dropout_end,
            anneal_steps: self.dropout_anneal_steps,
            current_step: 0,
            fixed_rate: (self.dropout_mode == DropoutMode::Fixed).then_some(self.dropout_fixed_rate),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat config always serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ModelConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }
}

/// Architectural variants compared in the ablation study.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Full,
    FixedDb4,
    NoCsff,
    NoFama,
    NoHpn,
    SingleLevel,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Full,
        Variant::FixedDb4,
        Variant::NoCsff,
        Variant::NoFama,
        Variant::NoHpn,
        Variant::SingleLevel,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::FixedDb4 => "fixed_db4",
            Variant::NoCsff => "no_csff",
            Variant::NoFama => "no_fama",
            Variant::NoHpn => "no_hpn",
            Variant::SingleLevel => "single_level",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Argument(format!("unknown variant {s:?}")))
    }
}

/// Applies an ablation to a base configuration.
pub fn ablation_variant(cfg: &ModelConfig, variant: Variant) -> ModelConfig {
    let mut out = cfg.clone();
    match variant {
        Variant::Full => {}
        Variant::FixedDb4 => {
            out.basis_init = BasisInit::Db4;
            out.freeze_basis = true;
            out.lambda2 = 0.0;
            out.lambda3 = 0.0;
        }
        Variant::NoCsff => out.use_csff = false,
        Variant::NoFama => out.use_fama_mask = false,
        Variant::NoHpn => out.use_hpn = false,
        Variant::SingleLevel => {
            out.levels = 1;
            out.auto_level = false;
        }
    }
    out
}

/// Parameters keyed by stable path strings, in registration order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    paths: Vec<String>,
    values: Vec<Tensor>,
    trainable: Vec<bool>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    fn new() -> Self {
        ParamStore {
            paths: Vec::new(),
            values: Vec::new(),
            trainable: Vec::new(),
            index: HashMap::new(),
        }
    }

    fn push(&mut self, path: String, value: Tensor, trainable: bool) {
        debug_assert!(!self.index.contains_key(&path), "duplicate path {path}");
        self.index.insert(path.clone(), self.paths.len());
        self.paths.push(path);
        self.values.push(value);
        self.trainable.push(trainable);
    }

    pub fn len(&self) -> usize {
        self.paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }

    pub fn paths(&self) -> &[String] {
        &self.paths
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn trainable(&self) -> &[bool] {
        &self.trainable
    }

    pub fn position(&self, path: &str) -> Option<usize> {
        self.index.get(path).copied()
    }

    pub fn get(&self, path: &str) -> Option<&Tensor> {
        self.position(path).map(|i| &self.values[i])
    }

    pub fn get_mut(&mut self, path: &str) -> Option<&mut Tensor> {
        self.position(path).map(|i| &mut self.values[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.paths.iter().map(String::as_str).zip(&self.values)
    }
}

const ATOM_FIELDS: [&str; 4] = ["envelope", "omega", "phase", "residual"];

fn band_name(j: usize, levels: usize) -> String {
    if j < levels {
        (j + 1).to_string()
    } else {
        "approx".into()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl Model {
    /// Fresh parameters drawn from the seed in `config`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let cfg = &config;
        let mut rng = SeededRng::new(cfg.seed).fork(INIT_STREAM);
        let mut ps = ParamStore::new();
        let (d, c, dm, bands) = (cfg.channels, cfg.width, cfg.d_model, cfg.levels + 1);

        let basis = match cfg.basis_init {
            BasisInit::Db4 => WaveletBasis::db4(cfg.filter_len)?,
            BasisInit::Haar => WaveletBasis::haar(cfg.filter_len)?,
        };
        for (name, atom) in [("psi", &basis.psi), ("phi", &basis.phi)] {
            for (field, t) in ATOM_FIELDS.iter().zip(atom.tensors()) {
                ps.push(format!("awdm.{name}.{field}"), t, !cfg.freeze_basis);
            }
        }

        ps.push("embed.weight".into(), Tensor::randn([bands * d, dm], 1.0 / ((bands * d) as f64).sqrt(), &mut rng), true);

        for l in 0..cfg.num_layers {
            let p = format!("encoder.{l}");
            let mut cs = CouplingState::init(bands, d, c, &mut rng);
            if !cfg.use_csff {
                for w in &mut cs.coupling {
                    *w = Tensor::zeros(w.shape().to_vec());
                }
            }
            let on = cfg.use_csff;
            for i in 0..bands {
                for j in 0..bands {
                    ps.push(format!("{p}.csff.coupling.{i}.{j}"), cs.coupling[i * bands + j].clone(), on);
                }
            }
            for (j, g) in cs.gates.into_iter().enumerate() {
                ps.push(format!("{p}.csff.gate.{j}"), g, on);
            }
            for (j, w) in cs.proj_in.into_iter().enumerate() {
                ps.push(format!("{p}.csff.proj_in.{j}"), w, on);
            }
            for (j, w) in cs.proj_out.into_iter().enumerate() {
                ps.push(format!("{p}.csff.proj_out.{j}"), w, on);
            }
            ps.push(format!("{p}.csff.to_model"), Tensor::randn([c, dm], 1.0 / (c as f64).sqrt(), &mut rng), on);
            ps.push(format!("{p}.ln1.gain"), Tensor::ones([dm]), true);
            ps.push(format!("{p}.ln1.bias"), Tensor::zeros([dm]), true);

            let freq = FreqHeadParams::init(cfg.num_heads, cfg.d_k());
            let std = 1.0 / (dm as f64).sqrt();
            for h in 0..cfg.num_heads {
                ps.push(format!("{p}.fama.omega.{h}"), Tensor::scalar(freq.omega[h]), cfg.use_fama_mask);
                ps.push(format!("{p}.fama.log_sigma.{h}"), Tensor::scalar(freq.log_sigma[h]), cfg.use_fama_mask);
                for w in ["wq", "wk", "wv"] {
                    ps.push(format!("{p}.fama.{w}.{h}"), Tensor::randn([dm, cfg.d_k()], std, &mut rng), true);
                }
            }
            ps.push(format!("{p}.fama.wo"), Tensor::randn([dm, dm], std, &mut rng), true);
            ps.push(format!("{p}.ln2.gain"), Tensor::ones([dm]), true);
            ps.push(format!("{p}.ln2.bias"), Tensor::zeros([dm]), true);
        }

        ps.push("hpn.context".into(), Tensor::randn([dm, c], 1.0 / (dm as f64).sqrt(), &mut rng), true);
        let push_head = |ps: &mut ParamStore, name: &str, head: ScaleHead| {
            for (field, t) in [("w1", head.w1), ("b1", head.b1), ("w2", head.w2), ("b2", head.b2)] {
                ps.push(format!("hpn.{name}.{field}"), t, true);
            }
        };
        if cfg.use_hpn {
            let outs = horizon_lengths(cfg.horizon, cfg.levels)?;
            for (j, &out_len) in outs.iter().enumerate() {
                let in_len = cfg.input_len >> (j + 1).min(cfg.levels);
                let head = ScaleHead::init(in_len, out_len, d, c, cfg.hidden, &mut rng);
                push_head(&mut ps, &format!("head.{}", band_name(j, cfg.levels)), head);
            }
        } else {
            let head = ScaleHead::init(cfg.input_len, cfg.horizon, d, c, cfg.hidden, &mut rng);
            push_head(&mut ps, "direct", head);
        }

        Ok(Model { config, params: ps })
    }

    /// Current basis as plain parameters.
    pub fn basis(&self) -> Result<WaveletBasis> {
        let atom = |name: &str| {
            let t = |f: &str| self.param(&format!("awdm.{name}.{f}"));
            crate::awdm::AtomParams::from_tensors(t("envelope")?, t("omega")?, t("phase")?, t("residual")?)
        };
        Ok(WaveletBasis {
            psi: atom("psi")?,
            phi: atom("phi")?,
        })
    }

    /// Per-layer head parameters as plain values.
    pub fn freq_heads(&self, layer: usize) -> Result<FreqHeadParams> {
        let cfg = &self.config;
        let mut out = FreqHeadParams {
            omega: Vec::new(),
            log_sigma: Vec::new(),
            d_k: cfg.d_k(),
        };
        for h in 0..cfg.num_heads {
            out.omega.push(self.param(&format!("encoder.{layer}.fama.omega.{h}"))?.item());
            out.log_sigma.push(self.param(&format!("encoder.{layer}.fama.log_sigma.{h}"))?.item());
        }
        Ok(out)
    }

    fn param(&self, path: &str) -> Result<&Tensor> {
        self.params
            .get(path)
            .ok_or_else(|| Error::Argument(format!("no parameter {path}")))
    }

    /// Places every parameter on `tape` and builds the per-tape shared
    /// pieces (filters, masks, regularizers).
    pub fn bind<'m>(&'m self, tape: &mut Tape) -> Result<Bound<'m>> {
        let vars: Vec<Var> = self
            .params
            .values
            .iter()
            .zip(&self.params.trainable)
            .map(|(v, &t)| if t { tape.param(v.clone()) } else { tape.constant(v.clone()) })
            .collect();
        self.bind_vars(tape, vars)
    }

    /// Like [`Model::bind`] with caller-supplied handles, one per parameter
    /// in store order.
    pub fn bind_vars<'m>(&'m self, tape: &mut Tape, vars: Vec<Var>) -> Result<Bound<'m>> {
        let cfg = &self.config;
        if vars.len() != self.params.len() {
            return Err(Error::Argument(format!("{} handles for {} parameters", vars.len(), self.params.len())));
        }
        let lookup = |path: &str| vars[self.params.position(path).expect("registered parameter")];
        let atom = |name: &str| {
            let [envelope, omega, phase, residual] = ATOM_FIELDS.map(|f| lookup(&format!("awdm.{name}.{f}")));
            AtomVars {
                envelope,
                omega,
                phase,
                residual,
            }
        };
        let basis = BasisVars {
            psi: atom("psi"),
            phi: atom("phi"),
        };
        let filters = basis.discretize(tape)?;
        let ortho = ortho_loss(tape, &filters)?;
        let smooth = if cfg.filter_len >= 3 {
            smooth_loss(tape, &filters)?
        } else {
            tape.scalar(0.0)
        };
        let pe = tape.constant(positional_encoding(cfg.seq_len(), cfg.d_model));
        let mut b = Bound {
            model: self,
            vars,
            filters,
            masks: Vec::new(),
            pe,
            ortho,
            smooth,
        };
        for l in 0..cfg.num_layers {
            let masks = if cfg.use_fama_mask {
                let av = b.attention(l);
                Some(head_masks(tape, &av, cfg.seq_len())?)
            } else {
                None
            };
            b.masks.push(masks);
        }
        Ok(b)
    }

    /// Forecast for one window (`[T × D]`, dataset-normalized) in eval mode.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape)?;
        let mut rng = SeededRng::new(0);
        let out = bound.forward(&mut tape, x, Mode::Eval, &mut rng)?;
        Ok(tape.value(out.forecast).clone())
    }

    /// Forecast plus the loss ingredients, evaluated off-tape.
    pub fn forward(&self, x: &Tensor, mode: Mode, rng: &mut SeededRng) -> Result<(Tensor, AuxValues)> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape)?;
        let out = bound.forward(&mut tape, x, mode, rng)?;
        let aux = AuxValues {
            recon: tape.value(out.aux.recon).item(),
            ortho: tape.value(out.aux.ortho).item(),
            smooth: tape.value(out.aux.smooth).item(),
            decomposition: out.decomposition.values(&tape),
            encoded: out.encoded.values(&tape),
        };
        Ok((tape.value(out.forecast).clone(), aux))
    }
}

/// Sinusoidal position table `[len × width]`.
pub fn positional_encoding(len: usize, width: usize) -> Tensor {
    let mut data = Vec::with_capacity(len * width);
    for t in 0..len {
        for i in 0..width {
            let rate = 10_000f64.powf(-((i / 2 * 2) as f64) / width as f64);
            let a = t as f64 * rate;
            data.push(if i % 2 == 0 { a.sin() } else { a.cos() });
        }
    }
    Tensor::new([len, width], data).expect("shape matches data")
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Mode {
    Eval,
    /// Training with the given spectral-dropout rate.
    Train { dropout: f64 },
}

/// Tape handles for the loss terms of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Aux {
    /// `‖x̃ − W⁻¹(W x̃)‖²` on the instance-normalized input.
    pub recon: Var,
    pub ortho: Var,
    pub smooth: Var,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `[H × D]`, dataset-normalized.
    pub forecast: Var,
    pub aux: Aux,
    /// Raw decomposition of the instance-normalized input.
    pub decomposition: Pyramid<Var>,
    /// Pyramid after the encoder's residual injections.
    pub encoded: Pyramid<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AuxValues {
    pub recon: f64,
    pub ortho: f64,
    pub smooth: f64,
    pub decomposition: crate::awdm::DecompositionPyramid,
    pub encoded: crate::awdm::DecompositionPyramid,
}

/// A model bound to one tape.
pub struct Bound<'m> {
    model: &'m Model,
    vars: Vec<Var>,
    pub filters: Filters,
    masks: Vec<Option<Vec<Var>>>,
    pe: Var,
    ortho: Var,
    smooth: Var,
}

impl Bound<'_> {
    /// Tape handle of a parameter.
    pub fn var(&self, path: &str) -> Var {
        self.vars[self.model.params.position(path).unwrap_or_else(|| panic!("no parameter {path}"))]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    fn coupling(&self, l: usize) -> CouplingVars {
        let bands = self.model.config.levels + 1;
        let p = format!("encoder.{l}.csff");
        CouplingVars {
            coupling: (0..bands * bands)
                .map(|e| self.var(&format!("{p}.coupling.{}.{}", e / bands, e % bands)))
                .collect(),
            gates: (0..bands).map(|j| self.var(&format!("{p}.gate.{j}"))).collect(),
            proj_in: (0..bands).map(|j| self.var(&format!("{p}.proj_in.{j}"))).collect(),
            proj_out: (0..bands).map(|j| self.var(&format!("{p}.proj_out.{j}"))).collect(),
        }
    }

    fn attention(&self, l: usize) -> AttentionVars {
        let p = format!("encoder.{l}.fama");
        AttentionVars {
            heads: (0..self.model.config.num_heads)
                .map(|h| AttnHeadVars {
                    omega: self.var(&format!("{p}.omega.{h}")),
                    log_sigma: self.var(&format!("{p}.log_sigma.{h}")),
                    wq: self.var(&format!("{p}.wq.{h}")),
                    wk: self.var(&format!("{p}.wk.{h}")),
                    wv: self.var(&format!("{p}.wv.{h}")),
                })
                .collect(),
            wo: self.var(&format!("{p}.wo")),
        }
    }

    fn head(&self, name: &str) -> HeadVars {
        let f = |s: &str| self.var(&format!("hpn.{name}.{s}"));
        HeadVars {
            w1: f("w1"),
            b1: f("b1"),
            w2: f("w2"),
            b2: f("b2"),
        }
    }

    fn layer_norm(&self, tape: &mut Tape, x: Var, prefix: &str) -> Result<Var> {
        let n = tape.layer_norm_rows(x, LN_EPS)?;
        let g = tape.mul_row(n, self.var(&format!("{prefix}.gain")))?;
        tape.add_row(g, self.var(&format!("{prefix}.bias")))
    }

    /// Full pipeline for one `[T × D]` window.
    pub fn forward(&self, tape: &mut Tape, x: &Tensor, mode: Mode, rng: &mut SeededRng) -> Result<ForwardOutput> {
        let cfg = &self.model.config;
        let (t, d) = x
            .dims2()
            .filter(|_| x.rank() == 2)
            .ok_or_else(|| Error::shape("forward", format!("expected [T x D], got {:?}", x.shape())))?;
        if (t, d) != (cfg.input_len, cfg.channels) {
            return Err(Error::shape(
                "forward",
                format!("input is [{t} x {d}], config expects [{} x {}]", cfg.input_len, cfg.channels),
            ));
        }
        let (training, rate) = match mode {
            Mode::Eval => (false, 0.0),
            Mode::Train { dropout } => (true, dropout),
        };

        let (mean, std) = instance_stats(x);
        let xn = Tensor::new(
            [t, d],
            x.data().iter().enumerate().map(|(e, v)| (v - mean[e % d]) / std[e % d]).collect(),
        )?;
        let xv = tape.constant(xn);

        let decomposition = analyze(tape, xv, &self.filters, cfg.levels, Boundary::Periodic)?;
        let back = synthesize(tape, &decomposition, &self.filters, Boundary::Periodic)?;
        let diff = tape.sub(xv, back)?;
        let sq = tape.mul(diff, diff)?;
        let recon = tape.sum(sq);

        let len = cfg.seq_len();
        let up: Vec<Var> = decomposition
            .bands()
            .map(|&b| nearest_resample(tape, b, len))
            .collect::<Result<_>>()?;
        let cat = tape.concat_cols(&up)?;
        let z = tape.matmul(cat, self.var("embed.weight"))?;
        let mut z = tape.add(z, self.pe)?;

        let mut p = decomposition.clone();
        for l in 0..cfg.num_layers {
            let cv = self.coupling(l);
            let aligned = align_levels(tape, &p, len, &cv)?;
            let fused = fuse(tape, &aligned, &cv.coupling)?;
            let fused = spectral_dropout(tape, fused, rate, training, rng)?;
            p = residual_inject(tape, &p, fused, &cv)?;
            let to_model = tape.matmul(fused, self.var(&format!("encoder.{l}.csff.to_model")))?;
            let z1 = tape.add(z, to_model)?;
            z = self.layer_norm(tape, z1, &format!("encoder.{l}.ln1"))?;

            let av = self.attention(l);
            let a = attend(tape, z, z, z, &av, self.masks[l].as_deref())?;
            let z2 = tape.add(z, a)?;
            z = self.layer_norm(tape, z2, &format!("encoder.{l}.ln2"))?;
        }

        let ctx = tape.matmul(z, self.var("hpn.context"))?;
        let forecast_n = if cfg.use_hpn {
            let heads: Vec<HeadVars> = (0..=cfg.levels).map(|j| self.head(&format!("head.{}", band_name(j, cfg.levels)))).collect();
            let fp = predict_pyramid(tape, &p, ctx, &heads, cfg.horizon)?;
            synthesize(tape, &fp, &self.filters, Boundary::Periodic)?
        } else {
            let bands: Vec<Var> = p.bands().copied().collect();
            let all = tape.concat_rows(&bands)?;
            let ctx = nearest_resample(tape, ctx, cfg.input_len)?;
            let joined = tape.concat_cols(&[all, ctx])?;
            apply_head(tape, joined, &self.head("direct"), cfg.horizon, d)?
        };
        let s = tape.constant(Tensor::vector(std));
        let m = tape.constant(Tensor::vector(mean));
        let scaled = tape.mul_row(forecast_n, s)?;
        let forecast = tape.add_row(scaled, m)?;

        Ok(ForwardOutput {
            forecast,
            aux: Aux {
                recon,
                ortho: self.ortho,
                smooth: self.smooth,
            },
            decomposition,
            encoded: p,
        })
    }
}

/// Per-channel mean and `√(var + ε)` of a window.
fn instance_stats(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (t, d) = x.dims2().expect("checked by caller");
    let mut mean = vec![0.0; d];
    for (e, v) in x.data().iter().enumerate() {
        mean[e % d] += v / t as f64;
    }
    let mut var = vec![0.0; d];
    for (e, v) in x.data().iter().enumerate() {
        var[e % d] += (v - mean[e % d]).powi(2) / t as f64;
    }
    (mean, var.into_iter().map(|v| (v + INSTANCE_EPS).sqrt()).collect())
}

/// Loss terms of one window, each a scalar on the tape.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub pred: Var,
    pub recon: Var,
    pub ortho: Var,
    pub smooth: Var,
}

/// `L_pred + λ₁L_recon + λ₂L_ortho + λ₃L_smooth` with `L_pred` the mean
/// squared error over `H × D`.
pub fn total_loss(tape: &mut Tape, forecast: Var, y: &Tensor, aux: &Aux, cfg: &ModelConfig) -> Result<LossTerms> {
    if tape.shape(forecast) != y.shape() {
        return Err(Error::shape(
            "total_loss",
            format!("forecast {:?} vs target {:?}", tape.shape(forecast), y.shape()),
        ));
    }
    let yv = tape.constant(y.clone());
    let diff = tape.sub(forecast, yv)?;
    let sq = tape.mul(diff, diff)?;
    let pred = tape.mean(sq);
    let mut total = pred;
    for (w, term) in [(cfg.lambda1, aux.recon), (cfg.lambda2, aux.ortho), (cfg.lambda3, aux.smooth)] {
        let scaled = tape.scale(term, w);
        total = tape.add(total, scaled)?;
    }
    Ok(LossTerms {
        total,
        pred,
        recon: aux.recon,
        ortho: aux.ortho,
        smooth: aux.smooth,
    })
}
