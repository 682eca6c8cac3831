//! Frequency-aware multi-head attention. Each head owns a Gaussian frequency
//! response; its inverse-DFT lag profile becomes a Toeplitz mask multiplied
//! into the pre-softmax scores.

use crate::awdm::spread;
use crate::error::{Error, Result};
use crate::ndcore::{Tape, Tensor, Var};

/// Lowest mask entry.
pub const MASK_FLOOR: f64 = 1e-3;

/// Lag profiles flatter than this collapse to an all-ones mask.
const FLAT_PROFILE: f64 = 1e-12;

pub const DEFAULT_SIGMA: f64 = 0.08;

/// Per-head centre frequencies and bandwidths, in cycles/sample.
#[derive(Clone, Debug, PartialEq)]
pub struct FreqHeadParams {
    /// Raw centre frequencies; read through [`FreqHeadParams::omega`].
    pub omega: Vec<f64>,
    /// Bandwidths are stored as `ln σ` so they stay positive.
    pub log_sigma: Vec<f64>,
    pub d_k: usize,
}

impl FreqHeadParams {
    /// Centres spread evenly over `(0, ½]`: head `h` sits at `(h + ½)/(2·heads)`.
    pub fn init(num_heads: usize, d_k: usize) -> Self {
        FreqHeadParams {
            omega: (0..num_heads).map(|h| (h as f64 + 0.5) / (2.0 * num_heads as f64)).collect(),
            log_sigma: vec![DEFAULT_SIGMA.ln(); num_heads],
            d_k,
        }
    }

    pub fn single(omega: f64, sigma: f64, d_k: usize) -> Self {
        FreqHeadParams {
            omega: vec![omega],
            log_sigma: vec![sigma.ln()],
            d_k,
        }
    }

    pub fn num_heads(&self) -> usize {
        self.omega.len()
    }

    /// Centre frequency clamped to `[0, ½]`.
    pub fn omega(&self, h: usize) -> f64 {
        self.omega[h].clamp(0.0, 0.5)
    }

    pub fn sigma(&self, h: usize) -> f64 {
        self.log_sigma[h].exp()
    }
}

/// `exp(−(ω − ω_h)² / (2σ_h²))`.
pub fn gaussian_response(omega: f64, head: &FreqHeadParams, h: usize) -> f64 {
    let (c, s) = (head.omega(h), head.sigma(h));
    (-(omega - c).powi(2) / (2.0 * s * s)).exp()
}

/// Folded DFT bin frequencies `min(m, L − m)/L`.
pub fn bin_frequencies(len: usize) -> Vec<f64> {
    (0..len).map(|m| m.min(len - m) as f64 / len as f64).collect()
}

/// Toeplitz mask of one head with its lag profile and a parameter snapshot.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMask {
    pub head: usize,
    pub omega: f64,
    pub sigma: f64,
    /// `m'[δ]` for `δ = 0..L`.
    pub profile: Vec<f64>,
    /// `[L × L]`, `M[i][j] = m'[|i − j|]`.
    pub matrix: Tensor,
}

/// Builds the lag profile and mask on a tape from scalar `omega` and
/// `log_sigma` variables. `omega` is clamped to `[0, ½]`.
pub fn mask_on_tape(tape: &mut Tape, omega: Var, log_sigma: Var, len: usize) -> Result<(Var, Var)> {
    if len < 1 {
        return Err(Error::Argument("mask length must be at least 1".into()));
    }
    let freqs = tape.constant(Tensor::vector(bin_frequencies(len)));
    let omega = tape.clamp(omega, 0.0, 0.5);
    let neg = tape.neg(omega);
    let centred = tape.offset_by(freqs, neg)?;
    let sigma = tape.exp(log_sigma);
    let inv = tape.recip(sigma);
    let z = tape.scale_by(centred, inv)?;
    let z2 = tape.mul(z, z)?;
    let expo = tape.scale(z2, -0.5);
    let response = tape.exp(expo);

    let mut cos = Vec::with_capacity(len * len);
    for delta in 0..len {
        for m in 0..len {
            let arg = 2.0 * std::f64::consts::PI * ((m * delta) % len) as f64 / len as f64;
            cos.push(arg.cos());
        }
    }
    let cos = tape.constant(Tensor::new([len, len], cos)?);
    let response = tape.reshape(response, &[len, 1])?;
    let kernel = tape.matmul(cos, response)?;
    let kernel = tape.reshape(kernel, &[len])?;

    let head = tape.element(kernel, 0)?;
    let inv_head = tape.recip(head);
    let kernel = tape.scale_by(kernel, inv_head)?;
    let values = tape.value(kernel).data();
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if !(hi - lo >= FLAT_PROFILE) {
        let profile = tape.constant(Tensor::ones([len]));
        let matrix = tape.constant(Tensor::ones([len, len]));
        return Ok((profile, matrix));
    }
    // Affine map of [min, max] onto [floor, 1], then the floor itself.
    let min = tape.min(kernel);
    let neg_min = tape.neg(min);
    let shifted = tape.offset_by(kernel, neg_min)?;
    let max = tape.element(kernel, 0)?;
    let range = tape.sub(max, min)?;
    let inv_range = tape.recip(range);
    let unit = tape.scale_by(shifted, inv_range)?;
    let scaled = tape.scale(unit, 1.0 - MASK_FLOOR);
    let profile = tape.offset(scaled, MASK_FLOOR);
    let profile = tape.clamp(profile, MASK_FLOOR, f64::INFINITY);

    let idx = (0..len * len).map(|e| (e / len).abs_diff(e % len)).collect();
    let matrix = tape.gather(profile, idx, &[len, len])?;
    Ok((profile, matrix))
}

pub fn build_mask(head: &FreqHeadParams, h: usize, len: usize) -> Result<AttentionMask> {
    let mut tape = Tape::new();
    let omega = tape.constant(Tensor::scalar(head.omega[h]));
    let log_sigma = tape.constant(Tensor::scalar(head.log_sigma[h]));
    let (profile, matrix) = mask_on_tape(&mut tape, omega, log_sigma, len)?;
    Ok(AttentionMask {
        head: h,
        omega: head.omega(h),
        sigma: head.sigma(h),
        profile: tape.value(profile).data().to_vec(),
        matrix: tape.value(matrix).clone(),
    })
}

/// `Δt · Δf` of the symmetric lag kernel `m'[−(L−1)..=L−1]`, using the same
/// spread estimator as the wavelet basis.
pub fn mask_time_bandwidth(mask: &AttentionMask) -> Result<f64> {
    let p = &mask.profile;
    let kernel: Vec<f64> = p[1..].iter().rev().chain(p.iter()).copied().collect();
    Ok(spread(&kernel)?.product())
}

/// Whether head masks are applied.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskMode {
    Frequency,
    /// Masks treated as all-ones: the multiply is skipped entirely.
    Neutral,
}

/// One head's parameters on a tape.
#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub omega: Var,
    pub log_sigma: Var,
    /// `[d_model × d_k]` each.
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
}

#[derive(Clone, Debug)]
pub struct AttentionVars {
    pub heads: Vec<HeadVars>,
    /// `[heads·d_k × d_model]`.
    pub wo: Var,
}

/// Per-head key width, or a configuration error when it does not divide.
pub fn head_dim(d_model: usize, num_heads: usize) -> Result<usize> {
    if num_heads == 0 || d_model % num_heads != 0 {
        return Err(Error::Config(format!(
            "d_model {d_model} is not divisible by num_heads {num_heads}"
        )));
    }
    Ok(d_model / num_heads)
}

/// `concat_h(softmax(Q_h K_hᵀ/√d_k ⊙ M_h) V_h) · W_o`.
pub fn fama_attention(tape: &mut Tape, q: Var, k: Var, v: Var, vars: &AttentionVars, mode: MaskMode) -> Result<Var> {
    let masks = match mode {
        MaskMode::Frequency => Some(head_masks(tape, vars, tape.shape(q)[0])?),
        MaskMode::Neutral => None,
    };
    attend(tape, q, k, v, vars, masks.as_deref())
}

/// Mask matrices for every head, for reuse across several inputs.
pub fn head_masks(tape: &mut Tape, vars: &AttentionVars, len: usize) -> Result<Vec<Var>> {
    vars.heads
        .iter()
        .map(|h| Ok(mask_on_tape(tape, h.omega, h.log_sigma, len)?.1))
        .collect()
}

/// Attention with precomputed masks; `None` skips masking.
pub fn attend(tape: &mut Tape, q: Var, k: Var, v: Var, vars: &AttentionVars, masks: Option<&[Var]>) -> Result<Var> {
    let mut outs = Vec::with_capacity(vars.heads.len());
    for (h, head) in vars.heads.iter().enumerate() {
        let qh = tape.matmul(q, head.wq)?;
        let kh = tape.matmul(k, head.wk)?;
        let vh = tape.matmul(v, head.wv)?;
        let d_k = tape.shape(qh)[1];
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, 1.0 / (d_k as f64).sqrt());
        let scores = match masks {
            Some(m) => tape.mul(scores, m[h])?,
            None => scores,
        };
        let attn = tape.softmax_rows(scores)?;
        outs.push(tape.matmul(attn, vh)?);
    }
    let cat = if outs.len() == 1 { outs[0] } else { tape.concat_cols(&outs)? };
    tape.matmul(cat, vars.wo)
}

/// Width of the multiphase cosine probe used by [`head_selectivity`].
pub const PROBE_WIDTH: usize = 48;

/// Energy ratio `‖out‖²/‖x‖²` for each probe frequency, where `x[t, c] =
/// cos(2π f t + 2π c / width)` passes through head `h` alone with identity
/// projections and `Q = K = V = x`.
pub fn head_selectivity(head: &FreqHeadParams, h: usize, probes: &[f64], len: usize, width: usize) -> Result<Vec<f64>> {
    probes
        .iter()
        .map(|&f| {
            if !(0.0..=0.5).contains(&f) {
                return Err(Error::Argument(format!("probe frequency {f} outside [0, 0.5]")));
            }
            let x = Tensor::new(
                [len, width],
                (0..len * width)
                    .map(|e| {
                        let (t, c) = ((e / width) as f64, (e % width) as f64);
                        (2.0 * std::f64::consts::PI * (f * t + c / width as f64)).cos()
                    })
                    .collect(),
            )?;
            probe_ratio(head, h, &x)
        })
        .collect()
}

/// `‖attention(x)‖² / ‖x‖²` for one head with identity projections; zero
/// input gives 0.
pub fn probe_ratio(head: &FreqHeadParams, h: usize, x: &Tensor) -> Result<f64> {
    let energy = x.sq_norm();
    if energy == 0.0 {
        return Ok(0.0);
    }
    let width = x.dims2().map(|d| d.1).unwrap_or(1);
    let mut tape = Tape::new();
    let eye = tape.constant(Tensor::eye(width));
    let vars = AttentionVars {
        heads: vec![HeadVars {
            omega: tape.constant(Tensor::scalar(head.omega[h])),
            log_sigma: tape.constant(Tensor::scalar(head.log_sigma[h])),
            wq: eye,
            wk: eye,
            wv: eye,
        }],
        wo: eye,
    };
    let xv = tape.constant(x.clone());
    let out = fama_attention(&mut tape, xv, xv, xv, &vars, MaskMode::Frequency)?;
    Ok(tape.value(out).sq_norm() / energy)
}

#[cfg(test)]
mod tests;
