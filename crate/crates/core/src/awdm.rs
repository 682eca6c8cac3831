//! Adaptive wavelet decomposition: learnable wavelet/scaling atoms, a
//! dyadic analysis/synthesis cascade, level selection and the basis
//! regularizers.
//!
//! Each atom is `σ(g(t)) · cos(ω t + φ)` sampled on a unit grid centred on
//! the support, where `g` is a cubic in `t`, plus a per-tap residual that
//! lets the bank start exactly at a known orthonormal pair. Both filters are
//! L2-normalized after sampling.

use std::sync::OnceLock;

use crate::error::{Error, Result};
use crate::ndcore::{Boundary, SeededRng, Tape, Tensor, Var};

/// Daubechies-4 (eight-tap) low-pass analysis filter.
pub const DB4_LOWPASS: [f64; 8] = [
    -0.010597401784997278,
    0.032883011666982945,
    0.030841381835986965,
    -0.18703481171888114,
    -0.02798376941698385,
    0.6308807679295904,
    0.7148465705525415,
    0.23037781330885523,
];

/// Quadrature mirror of a low-pass filter: `g[k] = (−1)^(k+1) h[F−1−k]`.
pub fn quadrature_mirror(lowpass: &[f64]) -> Vec<f64> {
    let n = lowpass.len();
    (0..n)
        .map(|k| if k % 2 == 0 { -1.0 } else { 1.0 } * lowpass[n - 1 - k])
        .collect()
}

/// Unnormalized filters below this L2 norm are rejected.
pub const DEGENERATE_NORM: f64 = 1e-8;

/// Parameters of one sampled atom.
#[derive(Clone, Debug, PartialEq)]
pub struct AtomParams {
    /// Cubic envelope coefficients `[c0, c1, c2, c3]` of `g(t)`.
    pub envelope: [f64; 4],
    /// Carrier frequency, radians per sample.
    pub omega: f64,
    /// Carrier phase, radians.
    pub phase: f64,
    /// Additive per-tap correction, one entry per filter tap.
    pub residual: Vec<f64>,
}

impl AtomParams {
    pub fn len(&self) -> usize {
        self.residual.len()
    }

    pub fn is_empty(&self) -> bool {
        self.residual.is_empty()
    }

    /// Sampled atom before normalization.
    pub fn raw_samples(&self) -> Vec<f64> {
        sample_grid(self.len())
            .iter()
            .zip(&self.residual)
            .map(|(&t, r)| {
                let [c0, c1, c2, c3] = self.envelope;
                let g = c0 + t * (c1 + t * (c2 + t * c3));
                let env = 1.0 / (1.0 + (-g).exp());
                env * (self.omega * t + self.phase).cos() + r
            })
            .collect()
    }

    pub fn tensors(&self) -> [Tensor; 4] {
        [
            Tensor::vector(self.envelope.to_vec()),
            Tensor::scalar(self.omega),
            Tensor::scalar(self.phase),
            Tensor::vector(self.residual.clone()),
        ]
    }

    pub fn from_tensors(envelope: &Tensor, omega: &Tensor, phase: &Tensor, residual: &Tensor) -> Result<Self> {
        let env: [f64; 4] = envelope
            .data()
            .try_into()
            .map_err(|_| Error::shape("atom", format!("envelope needs 4 coefficients, got {}", envelope.len())))?;
        if !omega.is_scalar() || !phase.is_scalar() {
            return Err(Error::shape("atom", "omega and phase must be scalars"));
        }
        Ok(AtomParams {
            envelope: env,
            omega: omega.item(),
            phase: phase.item(),
            residual: residual.data().to_vec(),
        })
    }
}

/// Sample positions `t_k = k − (F−1)/2`.
pub fn sample_grid(len: usize) -> Vec<f64> {
    let centre = (len as f64 - 1.0) / 2.0;
    (0..len).map(|k| k as f64 - centre).collect()
}

/// Learnable wavelet (`psi`) and scaling (`phi`) atoms sharing one support.
#[derive(Clone, Debug, PartialEq)]
pub struct WaveletBasis {
    pub psi: AtomParams,
    pub phi: AtomParams,
}

/// Constant envelope large enough that the sigmoid saturates.
const FLAT_ENVELOPE: [f64; 4] = [4.0, 0.0, 0.0, 0.0];

impl WaveletBasis {
    /// Haar pair, zero-padded to `filter_len` taps when longer than two.
    pub fn haar(filter_len: usize) -> Result<Self> {
        check_filter_len(filter_len)?;
        let h = std::f64::consts::FRAC_1_SQRT_2;
        if filter_len == 2 {
            // Exact in the parametric form: constant envelope with
            // cos(0) for the scaling atom and cos(π t + π/2) for the wavelet.
            let phi = AtomParams {
                envelope: FLAT_ENVELOPE,
                omega: 0.0,
                phase: 0.0,
                residual: vec![0.0; 2],
            };
            let psi = AtomParams {
                envelope: FLAT_ENVELOPE,
                omega: std::f64::consts::PI,
                phase: std::f64::consts::FRAC_PI_2,
                residual: vec![0.0; 2],
            };
            return Ok(WaveletBasis { psi, phi });
        }
        let mut lo = vec![0.0; filter_len];
        let mut hi = vec![0.0; filter_len];
        lo[..2].copy_from_slice(&[h, h]);
        hi[..2].copy_from_slice(&[h, -h]);
        Ok(WaveletBasis {
            psi: atom_from_filter(&hi),
            phi: atom_from_filter(&lo),
        })
    }

    /// Daubechies-4 pair: the parametric part is a least-squares fit and the
    /// residual taps make the discretized filters match exactly. Longer
    /// supports are zero-padded.
    pub fn db4(filter_len: usize) -> Result<Self> {
        check_filter_len(filter_len)?;
        if filter_len < DB4_LOWPASS.len() {
            return Err(Error::Argument(format!("Daubechies-4 needs at least 8 taps, got {filter_len}")));
        }
        let mut lo = vec![0.0; filter_len];
        lo[..8].copy_from_slice(&DB4_LOWPASS);
        let mut hi = vec![0.0; filter_len];
        hi[..8].copy_from_slice(&quadrature_mirror(&DB4_LOWPASS));
        if filter_len == 8 {
            static FITTED: OnceLock<WaveletBasis> = OnceLock::new();
            return Ok(FITTED
                .get_or_init(|| WaveletBasis {
                    psi: atom_from_filter(&hi),
                    phi: atom_from_filter(&lo),
                })
                .clone());
        }
        Ok(WaveletBasis {
            psi: atom_from_filter(&hi),
            phi: atom_from_filter(&lo),
        })
    }

    /// Random, generally non-orthonormal basis.
    pub fn random(filter_len: usize, rng: &mut SeededRng) -> Result<Self> {
        check_filter_len(filter_len)?;
        let mut atom = || AtomParams {
            envelope: [rng.normal(), 0.3 * rng.normal(), 0.1 * rng.normal(), 0.02 * rng.normal()],
            omega: rng.uniform_range(0.2, 3.0),
            phase: rng.uniform_range(-3.0, 3.0),
            residual: (0..filter_len).map(|_| 0.1 * rng.normal()).collect(),
        };
        let psi = atom();
        let phi = atom();
        Ok(WaveletBasis { psi, phi })
    }

    pub fn filter_len(&self) -> usize {
        self.psi.len()
    }

    pub fn validate(&self) -> Result<()> {
        check_filter_len(self.psi.len())?;
        if self.phi.len() != self.psi.len() {
            return Err(Error::shape(
                "wavelet basis",
                format!("psi has {} taps, phi has {}", self.psi.len(), self.phi.len()),
            ));
        }
        Ok(())
    }

    /// Places the basis parameters on a tape as differentiable leaves.
    pub fn register(&self, tape: &mut Tape) -> BasisVars {
        BasisVars {
            psi: AtomVars::param(tape, &self.psi),
            phi: AtomVars::param(tape, &self.phi),
        }
    }

    /// Places the basis on a tape as constants.
    pub fn register_frozen(&self, tape: &mut Tape) -> BasisVars {
        BasisVars {
            psi: AtomVars::constant(tape, &self.psi),
            phi: AtomVars::constant(tape, &self.phi),
        }
    }
}

fn check_filter_len(len: usize) -> Result<()> {
    if len < 2 || len % 2 != 0 {
        return Err(Error::Argument(format!("filter length must be even and at least 2, got {len}")));
    }
    Ok(())
}

/// Least-squares fit of the parametric atom to `target` followed by the
/// residual that closes the gap exactly.
fn atom_from_filter(target: &[f64]) -> AtomParams {
    let norm = target.iter().map(|v| v * v).sum::<f64>().sqrt();
    let target: Vec<f64> = target.iter().map(|v| v / norm).collect();
    let mut atom = fit_atom(&target);
    let raw = atom.raw_samples();
    let scale = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
    atom.residual = raw.iter().zip(&target).map(|(a, t)| scale * t - a).collect();
    atom
}

fn fit_error(params: &AtomParams, target: &[f64]) -> f64 {
    let raw = params.raw_samples();
    let n = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n < DEGENERATE_NORM {
        return f64::INFINITY;
    }
    raw.iter().zip(target).map(|(a, t)| (a / n - t).powi(2)).sum()
}

/// Grid search over the carrier, then Adam refinement of all six parametric
/// coefficients against the normalized target. Residual stays zero.
fn fit_atom(target: &[f64]) -> AtomParams {
    let len = target.len();
    let mut best = AtomParams {
        envelope: FLAT_ENVELOPE,
        omega: 0.0,
        phase: 0.0,
        residual: vec![0.0; len],
    };
    let mut best_err = f64::INFINITY;
    for wi in 0..=16 {
        for pi in 0..16 {
            for width in [0.0, 0.1, 0.3] {
                let cand = AtomParams {
                    envelope: [2.0, 0.0, -width, 0.0],
                    omega: std::f64::consts::PI * wi as f64 / 16.0,
                    phase: -std::f64::consts::PI + 2.0 * std::f64::consts::PI * pi as f64 / 16.0,
                    residual: vec![0.0; len],
                };
                let err = fit_error(&cand, target);
                if err < best_err {
                    best_err = err;
                    best = cand;
                }
            }
        }
    }

    let mut theta = [
        best.envelope[0],
        best.envelope[1],
        best.envelope[2],
        best.envelope[3],
        best.omega,
        best.phase,
    ];
    let (mut m, mut v) = ([0.0; 6], [0.0; 6]);
    let (lr, b1, b2) = (0.02, 0.9, 0.999);
    let grid = Tensor::vector(sample_grid(len));
    let powers = Tensor::new(
        [len, 4],
        grid.data().iter().flat_map(|&t| [1.0, t, t * t, t * t * t]).collect(),
    )
    .expect("grid powers");
    let target_t = Tensor::vector(target.to_vec());
    for step in 1..=1500 {
        let mut tape = Tape::new();
        let env = tape.param(Tensor::new([4, 1], theta[..4].to_vec()).expect("envelope"));
        let omega = tape.param(Tensor::scalar(theta[4]));
        let phase = tape.param(Tensor::scalar(theta[5]));
        let p = tape.constant(powers.clone());
        let t = tape.constant(grid.clone());
        let tgt = tape.constant(target_t.clone());
        let g = tape.matmul(p, env).expect("fit");
        let g = tape.reshape(g, &[len]).expect("fit");
        let e = tape.sigmoid(g);
        let arg = tape.scale_by(t, omega).expect("fit");
        let arg = tape.offset_by(arg, phase).expect("fit");
        let c = tape.cos(arg);
        let a = tape.mul(e, c).expect("fit");
        let sq = tape.mul(a, a).expect("fit");
        let n2 = tape.sum(sq);
        let n = tape.sqrt(n2);
        let inv = tape.recip(n);
        let a = tape.scale_by(a, inv).expect("fit");
        let d = tape.sub(a, tgt).expect("fit");
        let d2 = tape.mul(d, d).expect("fit");
        let loss = tape.sum(d2);
        if !tape.value(loss).item().is_finite() {
            break;
        }
        let grads = tape.backward(loss).expect("scalar loss");
        let mut flat = grads.get_or_zeros(env, 4);
        flat.push(grads.get_or_zeros(omega, 1)[0]);
        flat.push(grads.get_or_zeros(phase, 1)[0]);
        for i in 0..6 {
            m[i] = b1 * m[i] + (1.0 - b1) * flat[i];
            v[i] = b2 * v[i] + (1.0 - b2) * flat[i] * flat[i];
            let mh = m[i] / (1.0 - b1.powi(step));
            let vh = v[i] / (1.0 - b2.powi(step));
            theta[i] -= lr * mh / (vh.sqrt() + 1e-8);
        }
    }
    let refined = AtomParams {
        envelope: [theta[0], theta[1], theta[2], theta[3]],
        omega: theta[4],
        phase: theta[5],
        residual: vec![0.0; len],
    };
    if fit_error(&refined, target) < best_err {
        refined
    } else {
        best
    }
}

/// Atom parameters living on a tape.
#[derive(Clone, Copy, Debug)]
pub struct AtomVars {
    pub envelope: Var,
    pub omega: Var,
    pub phase: Var,
    pub residual: Var,
}

impl AtomVars {
    fn param(tape: &mut Tape, p: &AtomParams) -> Self {
        let [e, o, ph, r] = p.tensors();
        AtomVars {
            envelope: tape.param(e),
            omega: tape.param(o),
            phase: tape.param(ph),
            residual: tape.param(r),
        }
    }

    fn constant(tape: &mut Tape, p: &AtomParams) -> Self {
        let [e, o, ph, r] = p.tensors();
        AtomVars {
            envelope: tape.constant(e),
            omega: tape.constant(o),
            phase: tape.constant(ph),
            residual: tape.constant(r),
        }
    }

    pub fn vars(&self) -> [Var; 4] {
        [self.envelope, self.omega, self.phase, self.residual]
    }

    /// Sampled, L2-normalized filter. `name` labels the degenerate-filter error.
    pub fn discretize(&self, tape: &mut Tape, name: &str) -> Result<Var> {
        let len = tape.value(self.residual).len();
        let grid = sample_grid(len);
        let powers = Tensor::new([len, 4], grid.iter().flat_map(|&t| [1.0, t, t * t, t * t * t]).collect())?;
        let powers = tape.constant(powers);
        let t = tape.constant(Tensor::vector(grid));
        let coeffs = tape.reshape(self.envelope, &[4, 1])?;
        let g = tape.matmul(powers, coeffs)?;
        let g = tape.reshape(g, &[len])?;
        let env = tape.sigmoid(g);
        let arg = tape.scale_by(t, self.omega)?;
        let arg = tape.offset_by(arg, self.phase)?;
        let carrier = tape.cos(arg);
        let atom = tape.mul(env, carrier)?;
        let raw = tape.add(atom, self.residual)?;
        let sq = tape.mul(raw, raw)?;
        let energy = tape.sum(sq);
        let norm = tape.value(energy).item().sqrt();
        if !(norm >= DEGENERATE_NORM) {
            return Err(Error::Numeric(format!(
                "degenerate {name} filter: unnormalized norm {norm:e} below {DEGENERATE_NORM:e}"
            )));
        }
        let norm = tape.sqrt(energy);
        let inv = tape.recip(norm);
        tape.scale_by(raw, inv)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BasisVars {
    pub psi: AtomVars,
    pub phi: AtomVars,
}

impl BasisVars {
    pub fn discretize(&self, tape: &mut Tape) -> Result<Filters> {
        Ok(Filters {
            psi: self.psi.discretize(tape, "psi")?,
            phi: self.phi.discretize(tape, "phi")?,
        })
    }
}

/// Discretized wavelet (`psi`) and scaling (`phi`) filters on a tape.
#[derive(Clone, Copy, Debug)]
pub struct Filters {
    pub psi: Var,
    pub phi: Var,
}

impl Filters {
    /// Fixed filters as tape constants.
    pub fn constant(tape: &mut Tape, psi: &[f64], phi: &[f64]) -> Filters {
        Filters {
            psi: tape.constant(Tensor::vector(psi.to_vec())),
            phi: tape.constant(Tensor::vector(phi.to_vec())),
        }
    }
}

/// Normalized `(psi, phi)` filters for a basis.
pub fn discretize_wavelet(basis: &WaveletBasis) -> Result<(Tensor, Tensor)> {
    basis.validate()?;
    let mut tape = Tape::new();
    let vars = basis.register_frozen(&mut tape);
    let f = vars.discretize(&mut tape)?;
    Ok((tape.value(f.psi).clone(), tape.value(f.phi).clone()))
}

/// Detail bands (finest first) and the coarsest approximation.
#[derive(Clone, Debug, PartialEq)]
pub struct Pyramid<T> {
    pub details: Vec<T>,
    pub approx: T,
}

pub type DecompositionPyramid = Pyramid<Tensor>;

impl<T> Pyramid<T> {
    pub fn levels(&self) -> usize {
        self.details.len()
    }

    /// Details finest to coarsest, then the approximation.
    pub fn bands(&self) -> impl Iterator<Item = &T> {
        self.details.iter().chain(std::iter::once(&self.approx))
    }

    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> Pyramid<U> {
        Pyramid {
            details: self.details.iter().map(&mut f).collect(),
            approx: f(&self.approx),
        }
    }

    pub fn try_map<U>(&self, mut f: impl FnMut(&T) -> Result<U>) -> Result<Pyramid<U>> {
        Ok(Pyramid {
            details: self.details.iter().map(&mut f).collect::<Result<_>>()?,
            approx: f(&self.approx)?,
        })
    }

    /// Rebuilds from bands in [`Pyramid::bands`] order.
    pub fn from_bands(mut bands: Vec<T>) -> Self {
        let approx = bands.pop().expect("at least one band");
        Pyramid { details: bands, approx }
    }
}

impl Pyramid<Var> {
    pub fn values(&self, tape: &Tape) -> DecompositionPyramid {
        self.map(|&v| tape.value(v).clone())
    }

    pub fn constant(tape: &mut Tape, p: &DecompositionPyramid) -> Self {
        p.map(|t| tape.constant(t.clone()))
    }
}

impl DecompositionPyramid {
    pub fn coefficient_count(&self) -> usize {
        self.bands().map(Tensor::len).sum()
    }

    /// Lengths along time, finest detail first, approximation last.
    pub fn level_lengths(&self) -> Vec<usize> {
        self.bands().map(|b| b.shape()[0]).collect()
    }
}

fn check_levels(op: &'static str, len: usize, levels: usize) -> Result<()> {
    if levels < 1 {
        return Err(Error::shape(op, "at least one decomposition level is required"));
    }
    if levels >= usize::BITS as usize || len % (1usize << levels) != 0 {
        return Err(Error::shape(
            op,
            format!("length {len} is not divisible by 2^{levels}"),
        ));
    }
    Ok(())
}

/// Analysis cascade on a tape: each level correlates the running
/// approximation with both filters and keeps every second sample.
pub fn analyze(tape: &mut Tape, x: Var, filters: &Filters, levels: usize, boundary: Boundary) -> Result<Pyramid<Var>> {
    let len = tape.value(x).dims2().map(|d| d.0).ok_or_else(|| {
        Error::shape("dwt_forward", format!("expected [T] or [T x D], got {:?}", tape.shape(x)))
    })?;
    check_levels("dwt_forward", len, levels)?;
    let mut approx = x;
    let mut details = Vec::with_capacity(levels);
    for _ in 0..levels {
        details.push(tape.conv1d_stride(approx, filters.psi, 2, boundary)?);
        approx = tape.conv1d_stride(approx, filters.phi, 2, boundary)?;
    }
    Ok(Pyramid { details, approx })
}

/// Synthesis cascade on a tape; the adjoint of [`analyze`].
pub fn synthesize(tape: &mut Tape, p: &Pyramid<Var>, filters: &Filters, boundary: Boundary) -> Result<Var> {
    if p.levels() == 0 {
        return Err(Error::shape("dwt_inverse", "pyramid has no levels"));
    }
    let mut approx = p.approx;
    for (j, &detail) in p.details.iter().enumerate().rev() {
        let (alen, dlen) = (tape.shape(approx).to_vec(), tape.shape(detail).to_vec());
        if alen != dlen {
            return Err(Error::shape(
                "dwt_inverse",
                format!("level {} detail {dlen:?} does not match approximation {alen:?}", j + 1),
            ));
        }
        let out_len = 2 * alen[0];
        let ua = tape.upsample_zeros(approx, 2, out_len)?;
        let ud = tape.upsample_zeros(detail, 2, out_len)?;
        let sa = tape.convolve1d(ua, filters.phi, boundary)?;
        let sd = tape.convolve1d(ud, filters.psi, boundary)?;
        approx = tape.add(sa, sd)?;
    }
    Ok(approx)
}

/// Multi-level analysis of `x` (`[T]` or `[T x D]`, channels independent).
pub fn dwt_forward(x: &Tensor, basis: &WaveletBasis, levels: usize) -> Result<DecompositionPyramid> {
    basis.validate()?;
    let mut tape = Tape::new();
    let vars = basis.register_frozen(&mut tape);
    let filters = vars.discretize(&mut tape)?;
    let xv = tape.constant(x.clone());
    let p = analyze(&mut tape, xv, &filters, levels, Boundary::Periodic)?;
    Ok(p.values(&tape))
}

/// Synthesis by the adjoint filter bank; exact inverse for an orthonormal pair.
pub fn dwt_inverse(p: &DecompositionPyramid, basis: &WaveletBasis) -> Result<Tensor> {
    basis.validate()?;
    let mut tape = Tape::new();
    let vars = basis.register_frozen(&mut tape);
    let filters = vars.discretize(&mut tape)?;
    let pv = Pyramid::constant(&mut tape, p);
    let out = synthesize(&mut tape, &pv, &filters, Boundary::Periodic)?;
    Ok(tape.value(out).clone())
}

/// `‖x − W⁻¹(W(x))‖²` on a tape.
pub fn recon_loss(tape: &mut Tape, x: Var, filters: &Filters, levels: usize, boundary: Boundary) -> Result<Var> {
    let p = analyze(tape, x, filters, levels, boundary)?;
    let back = synthesize(tape, &p, filters, boundary)?;
    let diff = tape.sub(x, back)?;
    let sq = tape.mul(diff, diff)?;
    Ok(tape.sum(sq))
}

/// `‖ΨΨᵀ − I‖²_F` where the rows of Ψ are both filters and their even
/// shifts, laid out on a window long enough to hold every overlap.
pub fn ortho_loss(tape: &mut Tape, filters: &Filters) -> Result<Var> {
    let len = tape.value(filters.psi).len();
    if tape.value(filters.phi).len() != len {
        return Err(Error::shape("ortho_loss", "psi and phi lengths differ"));
    }
    let shifts = len / 2;
    let width = 2 * len - 2;
    let zero = tape.constant(Tensor::zeros([1]));
    let stacked = tape.concat_rows(&[filters.phi, filters.psi, zero])?;
    let zero_idx = 2 * len;
    let mut idx = Vec::with_capacity(2 * shifts * width);
    for f in 0..2 {
        for s in 0..shifts {
            for col in 0..width {
                let tap = col as isize - 2 * s as isize;
                idx.push(if (0..len as isize).contains(&tap) {
                    f * len + tap as usize
                } else {
                    zero_idx
                });
            }
        }
    }
    let rows = 2 * shifts;
    let psi_mat = tape.gather(stacked, idx, &[rows, width])?;
    let psi_t = tape.transpose(psi_mat)?;
    let gram = tape.matmul(psi_mat, psi_t)?;
    let eye = tape.constant(Tensor::eye(rows));
    let diff = tape.sub(gram, eye)?;
    let sq = tape.mul(diff, diff)?;
    Ok(tape.sum(sq))
}

/// Squared second central difference of the wavelet filter.
pub fn smooth_loss(tape: &mut Tape, filters: &Filters) -> Result<Var> {
    second_difference_energy(tape, filters.psi)
}

pub fn second_difference_energy(tape: &mut Tape, filter: Var) -> Result<Var> {
    let len = tape.value(filter).len();
    if len < 3 {
        return Err(Error::Argument(format!("smoothness needs at least 3 taps, got {len}")));
    }
    let inner = len - 2;
    let left = tape.gather(filter, (0..inner).collect(), &[inner])?;
    let mid = tape.gather(filter, (1..=inner).collect(), &[inner])?;
    let right = tape.gather(filter, (2..len).collect(), &[inner])?;
    let mid2 = tape.scale(mid, 2.0);
    let lr = tape.add(left, right)?;
    let d2 = tape.sub(lr, mid2)?;
    let sq = tape.mul(d2, d2)?;
    Ok(tape.sum(sq))
}

/// Outcome of the depth search.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelSelection {
    pub j_star: usize,
    /// `scores[J − 1]` is the score at depth `J`.
    pub scores: Vec<f64>,
    pub lambda: f64,
}

/// Scores closer than this (relative to the best) count as ties.
const TIE_TOLERANCE: f64 = 1e-12;

/// Picks the depth minimizing `L_recon(J) + λ·L_sparse(J)` over `1..=j_max`.
///
/// `L_recon(J)` is the squared error after hard-thresholding coefficients
/// with magnitude below `threshold_rel · ‖x‖_∞`; `L_sparse(J)` is the mean
/// absolute coefficient. Ties go to the smaller depth.
pub fn select_level(x: &Tensor, basis: &WaveletBasis, j_max: usize, lambda: f64, threshold_rel: f64) -> Result<LevelSelection> {
    let len = x.dims2().map(|d| d.0).ok_or_else(|| Error::shape("select_level", "expected [T] or [T x D]"))?;
    check_levels("select_level", len, j_max)?;
    let cutoff = threshold_rel * x.max_abs();
    let mut scores = Vec::with_capacity(j_max);
    for levels in 1..=j_max {
        let p = dwt_forward(x, basis, levels)?;
        let sparse = p.bands().flat_map(|b| b.data()).map(|v| v.abs()).sum::<f64>() / p.coefficient_count() as f64;
        let kept = p.map(|b| b.map(|v| if v.abs() < cutoff { 0.0 } else { v }));
        let back = dwt_inverse(&kept, basis)?;
        let recon: f64 = x.data().iter().zip(back.data()).map(|(a, b)| (a - b) * (a - b)).sum();
        scores.push(recon + lambda * sparse);
    }
    let best = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let j_star = scores
        .iter()
        .position(|&s| s - best <= TIE_TOLERANCE * best.abs().max(1.0))
        .map_or(1, |i| i + 1);
    Ok(LevelSelection { j_star, scores, lambda })
}

/// Squared error of the approximation at resolution `resolution` within a
/// `depth`-level decomposition: the coarsest approximation plus the
/// `resolution − 1` coarsest detail bands are kept, finer details dropped.
/// Resolution 1 keeps only the approximation; higher is finer.
pub fn approximation_error(x: &Tensor, basis: &WaveletBasis, depth: usize, resolution: usize) -> Result<f64> {
    if resolution < 1 || resolution > depth {
        return Err(Error::Argument(format!("resolution {resolution} outside 1..={depth}")));
    }
    let mut p = dwt_forward(x, basis, depth)?;
    let dropped = depth - (resolution - 1);
    for d in &mut p.details[..dropped] {
        *d = Tensor::zeros(d.shape().to_vec());
    }
    let back = dwt_inverse(&p, basis)?;
    Ok(x.data().iter().zip(back.data()).map(|(a, b)| (a - b) * (a - b)).sum())
}

/// Zero-padded DFT length used for the frequency spread.
const SPECTRUM_LEN: usize = 4096;

/// Time and frequency spreads of a sampled kernel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Spread {
    /// Standard deviation of sample position under the weights `|f[k]|²`.
    pub delta_t: f64,
    /// Standard deviation of frequency (cycles/sample, two-sided over
    /// `(−½, ½]`) under the weights `|F(ν)|²`.
    pub delta_f: f64,
}

impl Spread {
    pub fn product(&self) -> f64 {
        self.delta_t * self.delta_f
    }
}

pub fn spread(samples: &[f64]) -> Result<Spread> {
    let energy: f64 = samples.iter().map(|v| v * v).sum();
    if !(energy > 1e-300) || !energy.is_finite() {
        return Err(Error::Numeric("time-bandwidth of a zero-energy kernel".into()));
    }
    let weights = |k: usize| samples[k] * samples[k] / energy;
    let mean_t: f64 = (0..samples.len()).map(|k| k as f64 * weights(k)).sum();
    let var_t: f64 = (0..samples.len()).map(|k| (k as f64 - mean_t).powi(2) * weights(k)).sum();

    let n = SPECTRUM_LEN.max(8 * samples.len().next_power_of_two());
    let mut power = Vec::with_capacity(n);
    let mut freqs = Vec::with_capacity(n);
    for m in 0..n {
        let w = -2.0 * std::f64::consts::PI * m as f64 / n as f64;
        let (mut re, mut im) = (0.0, 0.0);
        for (k, &s) in samples.iter().enumerate() {
            let (sin, cos) = (w * k as f64).sin_cos();
            re += s * cos;
            im += s * sin;
        }
        power.push(re * re + im * im);
        let nu = m as f64 / n as f64;
        freqs.push(if nu > 0.5 { nu - 1.0 } else { nu });
    }
    let total: f64 = power.iter().sum();
    let mean_f: f64 = power.iter().zip(&freqs).map(|(p, f)| p * f).sum::<f64>() / total;
    let var_f: f64 = power.iter().zip(&freqs).map(|(p, f)| p * (f - mean_f).powi(2)).sum::<f64>() / total;
    Ok(Spread {
        delta_t: var_t.sqrt(),
        delta_f: var_f.sqrt(),
    })
}

/// Uncertainty lower bound `1/(4π)` for the time-bandwidth product.
pub const UNCERTAINTY_BOUND: f64 = 1.0 / (4.0 * std::f64::consts::PI);

/// `Δt · Δf` of the discretized wavelet filter.
pub fn time_bandwidth_product(basis: &WaveletBasis) -> Result<f64> {
    let (psi, _) = discretize_wavelet(basis)?;
    Ok(spread(psi.data())?.product())
}

#[cfg(test)]
mod tests;
