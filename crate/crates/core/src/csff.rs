//! Cross-scale feature fusion: levels are brought to a common length and
//! width, coupled pairwise through masked outer products, and re-injected
//! into each level through a learnable gate.

use crate::awdm::Pyramid;
use crate::error::{Error, Result};
use crate::ndcore::{SeededRng, Tape, Tensor, Var};

/// Plain-tensor coupling parameters for `levels` bands of `channels`
/// features each, fused at width `width`.
#[derive(Clone, Debug, PartialEq)]
pub struct CouplingState {
    /// `coupling[i * levels + j]` is `W_ij`, shape `[width × width]`.
    pub coupling: Vec<Tensor>,
    /// One scalar gate per level.
    pub gates: Vec<Tensor>,
    /// `[channels × width]` per level.
    pub proj_in: Vec<Tensor>,
    /// `[width × channels]` per level.
    pub proj_out: Vec<Tensor>,
}

impl CouplingState {
    /// Gates start closed so the module begins as the identity.
    pub fn init(levels: usize, channels: usize, width: usize, rng: &mut SeededRng) -> Self {
        let w_std = 1.0 / width as f64;
        CouplingState {
            coupling: (0..levels * levels).map(|_| Tensor::randn([width, width], w_std, rng)).collect(),
            gates: (0..levels).map(|_| Tensor::scalar(0.0)).collect(),
            proj_in: (0..levels)
                .map(|_| Tensor::randn([channels, width], 1.0 / (channels as f64).sqrt(), rng))
                .collect(),
            proj_out: (0..levels)
                .map(|_| Tensor::randn([width, channels], 1.0 / (width as f64).sqrt(), rng))
                .collect(),
        }
    }

    pub fn levels(&self) -> usize {
        self.gates.len()
    }

    pub fn register(&self, tape: &mut Tape) -> CouplingVars {
        let mut put = |ts: &[Tensor]| ts.iter().map(|t| tape.param(t.clone())).collect::<Vec<_>>();
        CouplingVars {
            coupling: put(&self.coupling),
            gates: put(&self.gates),
            proj_in: put(&self.proj_in),
            proj_out: put(&self.proj_out),
        }
    }
}

/// Coupling parameters on a tape, laid out as in [`CouplingState`].
#[derive(Clone, Debug)]
pub struct CouplingVars {
    pub coupling: Vec<Var>,
    pub gates: Vec<Var>,
    pub proj_in: Vec<Var>,
    pub proj_out: Vec<Var>,
}

impl CouplingVars {
    pub fn levels(&self) -> usize {
        self.gates.len()
    }
}

/// Nearest-neighbour resampling along time (rows): output row `i` takes
/// input row `⌊i · len / target⌋`.
pub fn nearest_resample(tape: &mut Tape, x: Var, target_len: usize) -> Result<Var> {
    let len = tape.shape(x)[0];
    if len == target_len {
        return Ok(x);
    }
    let idx = (0..target_len).map(|i| i * len / target_len).collect();
    tape.gather_rows(x, idx)
}

/// Upsamples every band to `target_len` and projects it to the common width.
pub fn align_levels(tape: &mut Tape, p: &Pyramid<Var>, target_len: usize, vars: &CouplingVars) -> Result<Vec<Var>> {
    let bands: Vec<Var> = p.bands().copied().collect();
    if bands.len() != vars.levels() {
        return Err(Error::Argument(format!(
            "pyramid has {} bands, coupling state expects {}",
            bands.len(),
            vars.levels()
        )));
    }
    bands
        .iter()
        .zip(&vars.proj_in)
        .map(|(&b, &proj)| {
            let len = tape.shape(b)[0];
            if len > target_len {
                return Err(Error::shape(
                    "align_levels",
                    format!("level length {len} exceeds target {target_len}"),
                ));
            }
            let up = nearest_resample(tape, b, target_len)?;
            let up = as_matrix(tape, up)?;
            tape.matmul(up, proj)
        })
        .collect()
}

fn as_matrix(tape: &mut Tape, x: Var) -> Result<Var> {
    match *tape.shape(x) {
        [n] => tape.reshape(x, &[n, 1]),
        _ => Ok(x),
    }
}

/// `Σ_{i,j} Σ_b W_ij[a,b] · H_i[t,a] · H_j[t,b]`, i.e. each outer product
/// `H_i[t] ⊗ H_j[t]` masked by `W_ij` and summed over its second index.
pub fn fuse(tape: &mut Tape, aligned: &[Var], coupling: &[Var]) -> Result<Var> {
    let n = aligned.len();
    if n == 0 || coupling.len() != n * n {
        return Err(Error::Argument(format!(
            "{} coupling matrices for {n} levels, need {}",
            coupling.len(),
            n * n
        )));
    }
    let shape = tape.shape(aligned[0]).to_vec();
    if aligned.iter().any(|&a| tape.shape(a) != shape.as_slice()) {
        return Err(Error::shape("fuse", "aligned levels differ in shape"));
    }
    let mut total: Option<Var> = None;
    for (i, &hi) in aligned.iter().enumerate() {
        // Σ_j H_j W_ijᵀ, then one elementwise product with H_i.
        let mut mixed: Option<Var> = None;
        for (j, &hj) in aligned.iter().enumerate() {
            let wt = tape.transpose(coupling[i * n + j])?;
            let term = tape.matmul(hj, wt)?;
            mixed = Some(match mixed {
                Some(m) => tape.add(m, term)?,
                None => term,
            });
        }
        let contrib = tape.mul(hi, mixed.expect("non-empty"))?;
        total = Some(match total {
            Some(t) => tape.add(t, contrib)?,
            None => contrib,
        });
    }
    Ok(total.expect("non-empty"))
}

/// Annealed channel-dropout rate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpectralDropoutSchedule {
    pub rate_start: f64,
    pub rate_end: f64,
    pub anneal_steps: u64,
    pub current_step: u64,
    /// Overrides the annealed rate when set.
    pub fixed_rate: Option<f64>,
}

impl Default for SpectralDropoutSchedule {
    fn default() -> Self {
        SpectralDropoutSchedule {
            rate_start: 0.3,
            rate_end: 0.05,
            anneal_steps: 10_000,
            current_step: 0,
            fixed_rate: None,
        }
    }
}

impl SpectralDropoutSchedule {
    pub fn rate_at(&self, step: u64) -> f64 {
        if let Some(r) = self.fixed_rate {
            return r;
        }
        if self.anneal_steps == 0 {
            return self.rate_end;
        }
        let frac = (step as f64 / self.anneal_steps as f64).min(1.0);
        self.rate_start + (self.rate_end - self.rate_start) * frac
    }

    pub fn rate(&self) -> f64 {
        self.rate_at(self.current_step)
    }

    /// Called once per optimizer step.
    pub fn advance(&mut self) {
        self.current_step += 1;
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |r: f64| (0.0..1.0).contains(&r);
        if !ok(self.rate_start) || !ok(self.rate_end) || self.fixed_rate.is_some_and(|r| !ok(r)) {
            return Err(Error::Config("dropout rates must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Channel mask for `f` (`[L × C]`): dropped channels are zeroed, survivors
/// scaled by `1/(1 − rate)`. Identity outside training.
pub fn spectral_dropout(tape: &mut Tape, f: Var, rate: f64, training: bool, rng: &mut SeededRng) -> Result<Var> {
    if !training || rate == 0.0 {
        return Ok(f);
    }
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Argument(format!("dropout rate {rate} outside [0, 1)")));
    }
    let channels = tape.value(f).dims2().map(|d| d.1).unwrap_or(1);
    let keep = 1.0 / (1.0 - rate);
    let mask: Vec<f64> = (0..channels).map(|_| if rng.bernoulli(rate) { 0.0 } else { keep }).collect();
    let mask = tape.constant(Tensor::vector(mask));
    tape.mul_row(f, mask)
}

/// `F_j' = F_j + α_j · down_j(fused · proj_out_j)` for every band.
pub fn residual_inject(tape: &mut Tape, p: &Pyramid<Var>, fused: Var, vars: &CouplingVars) -> Result<Pyramid<Var>> {
    let bands: Vec<Var> = p.bands().copied().collect();
    if bands.len() != vars.levels() {
        return Err(Error::Argument(format!(
            "pyramid has {} bands, coupling state expects {}",
            bands.len(),
            vars.levels()
        )));
    }
    let mut out = Vec::with_capacity(bands.len());
    for (j, &band) in bands.iter().enumerate() {
        let len = tape.shape(band)[0];
        let back = tape.matmul(fused, vars.proj_out[j])?;
        let back = nearest_resample(tape, back, len)?;
        let back = if tape.shape(band).len() == 1 {
            tape.reshape(back, &[len])?
        } else {
            back
        };
        let gated = tape.scale_by(back, vars.gates[j])?;
        out.push(tape.add(band, gated)?);
    }
    Ok(Pyramid::from_bands(out))
}
