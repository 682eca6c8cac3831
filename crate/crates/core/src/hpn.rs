//! Hierarchical prediction: one two-layer head per band maps that band's
//! coefficients and the downsampled context to horizon-length coefficients;
//! the forecast is their inverse transform.

use crate::awdm::{dwt_inverse, synthesize, DecompositionPyramid, Filters, Pyramid, WaveletBasis};
use crate::csff::nearest_resample;
use crate::error::{Error, Result};
use crate::ndcore::{Boundary, SeededRng, Tape, Tensor, Var};

/// Per-band horizon lengths: `H/2^j` for details `j = 1..=J`, then `H/2^J`
/// for the approximation.
pub fn horizon_lengths(horizon: usize, levels: usize) -> Result<Vec<usize>> {
    if levels == 0 || levels >= usize::BITS as usize || horizon % (1 << levels) != 0 || horizon == 0 {
        return Err(Error::Config(format!(
            "horizon {horizon} is not divisible by 2^{levels}"
        )));
    }
    let mut lens: Vec<usize> = (1..=levels).map(|j| horizon >> j).collect();
    lens.push(horizon >> levels);
    Ok(lens)
}

/// `flatten → affine → tanh → affine` from `[in_len × (D + C)]` to
/// `[out_len × D]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaleHead {
    pub in_len: usize,
    pub out_len: usize,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl ScaleHead {
    pub fn init(in_len: usize, out_len: usize, channels: usize, context: usize, hidden: usize, rng: &mut SeededRng) -> Self {
        let fan_in = in_len * (channels + context);
        ScaleHead {
            in_len,
            out_len,
            w1: Tensor::randn([fan_in, hidden], 1.0 / (fan_in as f64).sqrt(), rng),
            b1: Tensor::zeros([hidden]),
            w2: Tensor::randn([hidden, out_len * channels], 1.0 / (hidden as f64).sqrt(), rng),
            b2: Tensor::zeros([out_len * channels]),
        }
    }

    pub fn register(&self, tape: &mut Tape) -> HeadVars {
        HeadVars {
            w1: tape.param(self.w1.clone()),
            b1: tape.param(self.b1.clone()),
            w2: tape.param(self.w2.clone()),
            b2: tape.param(self.b2.clone()),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

/// Applies a head to an `[len × width]` input, returning `[out_len × channels]`.
pub fn apply_head(tape: &mut Tape, input: Var, head: &HeadVars, out_len: usize, channels: usize) -> Result<Var> {
    let n = tape.value(input).len();
    let flat = tape.reshape(input, &[1, n])?;
    let hidden = tape.matmul(flat, head.w1)?;
    let hidden = tape.add_row(hidden, head.b1)?;
    let hidden = tape.tanh(hidden);
    let out = tape.matmul(hidden, head.w2)?;
    let out = tape.add_row(out, head.b2)?;
    tape.reshape(out, &[out_len, channels])
}

/// Forecast pyramid from the encoded pyramid (bands `[len_j × D]`) and the
/// context stream (`[L × C]`), one head per band.
pub fn predict_pyramid(tape: &mut Tape, p: &Pyramid<Var>, context: Var, heads: &[HeadVars], horizon: usize) -> Result<Pyramid<Var>> {
    let lens = horizon_lengths(horizon, p.levels())?;
    let bands: Vec<Var> = p.bands().copied().collect();
    if heads.len() != bands.len() {
        return Err(Error::Argument(format!("{} heads for {} bands", heads.len(), bands.len())));
    }
    let mut out = Vec::with_capacity(bands.len());
    for ((&band, head), &out_len) in bands.iter().zip(heads).zip(&lens) {
        let (len, channels) = tape
            .value(band)
            .dims2()
            .ok_or_else(|| Error::shape("predict_pyramid", "bands must be [len x D]"))?;
        let band = tape.reshape(band, &[len, channels])?;
        let ctx = nearest_resample(tape, context, len)?;
        let joined = tape.concat_cols(&[band, ctx])?;
        out.push(apply_head(tape, joined, head, out_len, channels)?);
    }
    Ok(Pyramid::from_bands(out))
}

/// Inverse transform of a forecast pyramid on a tape.
pub fn reconstruct_on_tape(tape: &mut Tape, p: &Pyramid<Var>, filters: &Filters) -> Result<Var> {
    synthesize(tape, p, filters, Boundary::Periodic)
}

/// Inverse transform of a forecast pyramid with the given basis.
pub fn reconstruct_forecast(p: &DecompositionPyramid, basis: &WaveletBasis) -> Result<Tensor> {
    dwt_inverse(p, basis)
}
