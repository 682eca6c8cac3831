use super::*;
use crate::ndcore::gradcheck;
use proptest::prelude::*;

const H: f64 = std::f64::consts::FRAC_1_SQRT_2;

fn random_signal(len: usize, channels: usize, rng: &mut SeededRng) -> Tensor {
    if channels == 1 {
        Tensor::randn([len], 1.0, rng)
    } else {
        Tensor::randn([len, channels], 1.0, rng)
    }
}

/// Straightforward periodic analysis with explicit index arithmetic.
fn direct_level(x: &[f64], filt: &[f64]) -> Vec<f64> {
    let n = x.len();
    (0..n / 2)
        .map(|i| (0..filt.len()).map(|k| x[(2 * i + k) % n] * filt[k]).sum())
        .collect()
}

fn atom(envelope: [f64; 4], omega: f64, phase: f64, len: usize) -> AtomParams {
    AtomParams {
        envelope,
        omega,
        phase,
        residual: vec![0.0; len],
    }
}

#[test]
fn saturated_flat_atom_is_uniform() {
    let a = atom([40.0, 0.0, 0.0, 0.0], 0.0, 0.0, 6);
    let basis = WaveletBasis { psi: a.clone(), phi: a };
    let (psi, _) = discretize_wavelet(&basis).unwrap();
    for v in psi.data() {
        assert!((v - 1.0 / 6f64.sqrt()).abs() < 1e-12);
    }
}

#[test]
fn annihilated_carrier_is_rejected_by_name() {
    let flat = atom([4.0, 0.0, 0.0, 0.0], 0.0, 0.0, 4);
    let dead = atom([4.0, 0.0, 0.0, 0.0], 0.0, std::f64::consts::FRAC_PI_2, 4);
    let basis = WaveletBasis { psi: dead, phi: flat };
    let err = discretize_wavelet(&basis).unwrap_err();
    assert!(matches!(err, Error::Numeric(ref m) if m.contains("psi")), "{err}");
    let x = Tensor::ones([8]);
    assert!(matches!(dwt_forward(&x, &basis, 1), Err(Error::Numeric(_))));
}

#[test]
fn odd_length_is_argument_error() {
    assert!(matches!(WaveletBasis::haar(3), Err(Error::Argument(_))));
    let mut b = WaveletBasis::haar(4).unwrap();
    b.psi.residual.push(0.0);
    b.phi.residual.push(0.0);
    assert!(matches!(discretize_wavelet(&b), Err(Error::Argument(_))));
}

#[test]
fn haar_filters_are_exact() {
    let (psi, phi) = discretize_wavelet(&WaveletBasis::haar(2).unwrap()).unwrap();
    assert!(psi.max_abs_diff(&Tensor::vector(vec![H, -H])) < 1e-12);
    assert!(phi.max_abs_diff(&Tensor::vector(vec![H, H])) < 1e-12);

    let (psi, phi) = discretize_wavelet(&WaveletBasis::haar(6).unwrap()).unwrap();
    assert!(psi.max_abs_diff(&Tensor::vector(vec![H, -H, 0.0, 0.0, 0.0, 0.0])) < 1e-12);
    assert!(phi.max_abs_diff(&Tensor::vector(vec![H, H, 0.0, 0.0, 0.0, 0.0])) < 1e-12);
}

#[test]
fn db4_initialization_matches_daubechies_pair() {
    let basis = WaveletBasis::db4(8).unwrap();
    let (psi, phi) = discretize_wavelet(&basis).unwrap();
    assert!(phi.max_abs_diff(&Tensor::vector(DB4_LOWPASS.to_vec())) < 1e-12);
    assert!(psi.max_abs_diff(&Tensor::vector(quadrature_mirror(&DB4_LOWPASS))) < 1e-12);
    // The parametric part carries most of each filter.
    for a in [&basis.psi, &basis.phi] {
        let raw = a.raw_samples();
        let res: f64 = a.residual.iter().map(|r| r * r).sum::<f64>().sqrt();
        let total: f64 = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(res < 0.5 * total, "residual {res} of {total}");
    }
    assert!(matches!(WaveletBasis::db4(6), Err(Error::Argument(_))));
}

#[test]
fn haar_single_level_on_constant() {
    let basis = WaveletBasis::haar(2).unwrap();
    let x = Tensor::vector(vec![1.0; 4]);
    let p = dwt_forward(&x, &basis, 1).unwrap();
    let oracle_d = direct_level(x.data(), &[H, -H]);
    let oracle_a = direct_level(x.data(), &[H, H]);
    assert!(p.details[0].max_abs_diff(&Tensor::vector(oracle_d)) < 1e-12);
    assert!(p.approx.max_abs_diff(&Tensor::vector(oracle_a)) < 1e-12);
    assert!(p.details[0].max_abs() < 1e-12);
    assert!((p.approx.data()[0] - 2f64.sqrt()).abs() < 1e-12);
}

#[test]
fn zeros_decompose_and_reconstruct_to_zeros() {
    let basis = WaveletBasis::db4(8).unwrap();
    let x = Tensor::zeros([32, 3]);
    let p = dwt_forward(&x, &basis, 3).unwrap();
    assert!(p.bands().all(|b| b.max_abs() == 0.0));
    let y = dwt_inverse(&p, &basis).unwrap();
    assert_eq!(y, x);
}

#[test]
fn cascade_matches_direct_oracle_per_channel() {
    let mut rng = SeededRng::new(5);
    let basis = WaveletBasis::db4(8).unwrap();
    let (psi, phi) = discretize_wavelet(&basis).unwrap();
    let x = random_signal(32, 2, &mut rng);
    let p = dwt_forward(&x, &basis, 3).unwrap();
    for c in 0..2 {
        let mut approx = x.column(c);
        for j in 0..3 {
            let d = direct_level(&approx, psi.data());
            approx = direct_level(&approx, phi.data());
            let got = p.details[j].column(c);
            assert!(got.iter().zip(&d).all(|(a, b)| (a - b).abs() < 1e-12));
        }
        let got = p.approx.column(c);
        assert!(got.iter().zip(&approx).all(|(a, b)| (a - b).abs() < 1e-12));
    }
}

#[test]
fn orthonormal_pairs_conserve_energy() {
    let mut rng = SeededRng::new(9);
    for basis in [WaveletBasis::haar(2).unwrap(), WaveletBasis::db4(8).unwrap()] {
        for _ in 0..10 {
            let x = random_signal(64, 2, &mut rng);
            let p = dwt_forward(&x, &basis, 3).unwrap();
            let energy: f64 = p.bands().map(Tensor::sq_norm).sum();
            assert!((energy - x.sq_norm()).abs() < 1e-8);
        }
    }
}

#[test]
fn round_trip_is_exact_for_haar_and_db4() {
    let mut rng = SeededRng::new(11);
    let haar = WaveletBasis::haar(2).unwrap();
    let db4 = WaveletBasis::db4(8).unwrap();
    for len in [16, 64, 256] {
        for _ in 0..100 {
            let x = random_signal(len, 1, &mut rng);
            let back = dwt_inverse(&dwt_forward(&x, &haar, 3).unwrap(), &haar).unwrap();
            assert!(back.max_abs_diff(&x) < 1e-8);
        }
        let x = random_signal(len, 2, &mut rng);
        let back = dwt_inverse(&dwt_forward(&x, &db4, 3).unwrap(), &db4).unwrap();
        assert!(back.max_abs_diff(&x) < 1e-8);
    }
}

#[test]
fn critical_sampling_and_level_lengths() {
    let basis = WaveletBasis::haar(4).unwrap();
    let x = Tensor::zeros([64, 2]);
    for levels in 1..=5 {
        let p = dwt_forward(&x, &basis, levels).unwrap();
        assert_eq!(p.coefficient_count(), 64 * 2);
        let mut want: Vec<usize> = (1..=levels).map(|j| 64 >> j).collect();
        want.push(64 >> levels);
        assert_eq!(p.level_lengths(), want);
    }
}

#[test]
fn indivisible_length_is_shape_error() {
    let basis = WaveletBasis::haar(2).unwrap();
    let x = Tensor::zeros([12]);
    assert!(matches!(dwt_forward(&x, &basis, 3), Err(Error::Shape { .. })));
    assert!(matches!(dwt_forward(&x, &basis, 0), Err(Error::Shape { .. })));
    assert!(matches!(select_level(&x, &basis, 3, 0.0, 1e-3), Err(Error::Shape { .. })));
}

#[test]
fn inverse_rejects_inconsistent_levels() {
    let basis = WaveletBasis::haar(2).unwrap();
    let p = Pyramid {
        details: vec![Tensor::zeros([8]), Tensor::zeros([3])],
        approx: Tensor::zeros([4]),
    };
    assert!(matches!(dwt_inverse(&p, &basis), Err(Error::Shape { .. })));
}

#[test]
fn ortho_loss_examples() {
    let eval = |basis: &WaveletBasis| {
        let mut tape = Tape::new();
        let f = basis.register_frozen(&mut tape).discretize(&mut tape).unwrap();
        let l = ortho_loss(&mut tape, &f).unwrap();
        tape.value(l).item()
    };
    assert!(eval(&WaveletBasis::haar(2).unwrap()) < 1e-12);
    assert!(eval(&WaveletBasis::haar(8).unwrap()) < 1e-12);
    assert!(eval(&WaveletBasis::db4(8).unwrap()) < 1e-12);

    let haar = WaveletBasis::haar(2).unwrap();
    let dup = WaveletBasis {
        psi: haar.phi.clone(),
        phi: haar.phi,
    };
    // Direct Gram oracle: rows [h, h] twice give off-diagonal ones.
    let rows = [[H, H], [H, H]];
    let mut oracle = 0.0;
    for i in 0..2 {
        for j in 0..2 {
            let g: f64 = (0..2).map(|k| rows[i][k] * rows[j][k]).sum();
            oracle += (g - if i == j { 1.0 } else { 0.0 }).powi(2);
        }
    }
    let got = eval(&dup);
    assert!(got >= 2.0 - 1e-12);
    assert!((got - oracle).abs() < 1e-12);
}

#[test]
fn smooth_loss_examples() {
    let eval = |filter: Vec<f64>| {
        let mut tape = Tape::new();
        let f = tape.constant(Tensor::vector(filter));
        let l = second_difference_energy(&mut tape, f).unwrap();
        tape.value(l).item()
    };
    assert!(eval(vec![-1.5, -0.5, 0.5, 1.5]).abs() < 1e-14);
    assert!((eval(vec![0.0, 1.0, 0.0]) - 4.0).abs() < 1e-14);

    let mut tape = Tape::new();
    let f = WaveletBasis::haar(2).unwrap().register_frozen(&mut tape).discretize(&mut tape).unwrap();
    assert!(matches!(smooth_loss(&mut tape, &f), Err(Error::Argument(_))));
}

#[test]
fn recon_loss_examples() {
    let mut rng = SeededRng::new(21);
    let eval = |basis: &WaveletBasis, x: &Tensor| {
        let mut tape = Tape::new();
        let f = basis.register_frozen(&mut tape).discretize(&mut tape).unwrap();
        let xv = tape.constant(x.clone());
        let l = recon_loss(&mut tape, xv, &f, 3, Boundary::Periodic).unwrap();
        tape.value(l).item()
    };
    let x = random_signal(32, 2, &mut rng);
    assert!(eval(&WaveletBasis::haar(2).unwrap(), &x) < 1e-10);
    let random = WaveletBasis::random(8, &mut rng).unwrap();
    let got = eval(&random, &x);
    let back = dwt_inverse(&dwt_forward(&x, &random, 3).unwrap(), &random).unwrap();
    let oracle: f64 = x.data().iter().zip(back.data()).map(|(a, b)| (a - b).powi(2)).sum();
    assert!(got > 1e-3);
    assert!((got - oracle).abs() < 1e-10 * oracle.max(1.0));
    assert_eq!(eval(&random, &Tensor::zeros([32, 2])), 0.0);
}

#[test]
fn select_level_ties_and_zeros_pick_one() {
    let basis = WaveletBasis::haar(2).unwrap();
    let mut rng = SeededRng::new(2);
    let x = random_signal(64, 1, &mut rng);
    // Threshold zero keeps every coefficient: lossless at every depth.
    let s = select_level(&x, &basis, 4, 0.0, 0.0).unwrap();
    assert_eq!(s.j_star, 1);
    assert_eq!(s.scores.len(), 4);

    let s = select_level(&Tensor::zeros([64]), &basis, 4, 0.5, 1e-3).unwrap();
    assert_eq!(s.j_star, 1);
    assert!(s.scores.iter().all(|&v| v == 0.0));
}

#[test]
fn select_level_low_frequency_goes_deep() {
    let basis = WaveletBasis::haar(2).unwrap();
    let j_max = 3;
    // One cycle per window: slow against every band down to depth `j_max`.
    let period = 64.0;
    let x = Tensor::vector(
        (0..64)
            .map(|t| (2.0 * std::f64::consts::PI * t as f64 / period).sin())
            .collect(),
    );
    let lambda = 0.1;
    let s = select_level(&x, &basis, j_max, lambda, 1e-3).unwrap();

    // Brute-force score table from the direct per-level oracle.
    let cutoff = 1e-3 * x.max_abs();
    let mut table = Vec::new();
    for levels in 1..=j_max {
        let mut approx = x.data().to_vec();
        let mut coeffs = Vec::new();
        for _ in 0..levels {
            coeffs.extend(direct_level(&approx, &[H, -H]));
            approx = direct_level(&approx, &[H, H]);
        }
        coeffs.extend(&approx);
        let sparse = coeffs.iter().map(|v: &f64| v.abs()).sum::<f64>() / coeffs.len() as f64;
        let p = dwt_forward(&x, &basis, levels).unwrap();
        let kept = p.map(|b| b.map(|v| if v.abs() < cutoff { 0.0 } else { v }));
        let back = dwt_inverse(&kept, &basis).unwrap();
        let recon: f64 = x.data().iter().zip(back.data()).map(|(a, b)| (a - b).powi(2)).sum();
        table.push(recon + lambda * sparse);
    }
    for (a, b) in s.scores.iter().zip(&table) {
        assert!((a - b).abs() < 1e-10);
    }
    let argmin = table
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |(bi, bv), (i, &v)| if v < bv { (i, v) } else { (bi, bv) })
        .0;
    assert_eq!(s.j_star, argmin + 1);
    assert_eq!(s.j_star, j_max);
}

#[test]
fn approximation_error_is_monotone_in_resolution() {
    let basis = WaveletBasis::db4(8).unwrap();
    let x = Tensor::vector(
        (0..128)
            .map(|t| {
                let u = t as f64 / 128.0;
                if u < 0.4 { (6.0 * u).sin() } else { 0.5 - u * u }
            })
            .collect(),
    );
    let errs: Vec<f64> = (1..=4).map(|r| approximation_error(&x, &basis, 4, r).unwrap()).collect();
    for w in errs.windows(2) {
        assert!(w[1] <= w[0] + 1e-12, "{errs:?}");
    }
    assert!(matches!(approximation_error(&x, &basis, 4, 5), Err(Error::Argument(_))));
}

fn sampled_gabor(len: usize, width: f64, omega: f64) -> Vec<f64> {
    sample_grid(len)
        .iter()
        .map(|&t| (-t * t / (2.0 * width * width)).exp() * (omega * t).cos())
        .collect()
}

/// Independent spread oracle: direct sums over the samples and a dense
/// frequency grid on (−½, ½].
fn spread_oracle(s: &[f64]) -> f64 {
    let e: f64 = s.iter().map(|v| v * v).sum();
    let mt: f64 = s.iter().enumerate().map(|(k, v)| k as f64 * v * v).sum::<f64>() / e;
    let vt: f64 = s.iter().enumerate().map(|(k, v)| (k as f64 - mt).powi(2) * v * v).sum::<f64>() / e;
    let n = 6000;
    let (mut p_sum, mut m1, mut m2) = (0.0, 0.0, 0.0);
    let mut pts = Vec::new();
    for i in 0..n {
        let nu = -0.5 + (i as f64 + 0.5) / n as f64;
        let (mut re, mut im) = (0.0, 0.0);
        for (k, v) in s.iter().enumerate() {
            let a = 2.0 * std::f64::consts::PI * nu * k as f64;
            re += v * a.cos();
            im -= v * a.sin();
        }
        let p = re * re + im * im;
        pts.push((nu, p));
        p_sum += p;
        m1 += p * nu;
    }
    let mean = m1 / p_sum;
    for (nu, p) in pts {
        m2 += p * (nu - mean).powi(2);
    }
    vt.sqrt() * (m2 / p_sum).sqrt()
}

#[test]
fn spread_matches_dense_oracle() {
    for s in [sampled_gabor(32, 4.0, 0.0), sampled_gabor(16, 2.0, 1.0), vec![H, -H]] {
        let got = spread(&s).unwrap().product();
        assert!((got - spread_oracle(&s)).abs() < 1e-3 * got, "{got}");
    }
    assert!(matches!(spread(&[0.0; 4]), Err(Error::Numeric(_))));
}

#[test]
fn time_bandwidth_examples() {
    for basis in [WaveletBasis::haar(2).unwrap(), WaveletBasis::haar(8).unwrap(), WaveletBasis::db4(8).unwrap()] {
        assert!(time_bandwidth_product(&basis).unwrap() >= UNCERTAINTY_BOUND - 0.01);
    }
    // A wide Gaussian envelope on a baseband carrier is near-optimal.
    let gabor = spread(&sampled_gabor(64, 6.0, 0.0)).unwrap().product();
    assert!((gabor - UNCERTAINTY_BOUND).abs() < 0.25 * UNCERTAINTY_BOUND, "{gabor}");
    let haar = time_bandwidth_product(&WaveletBasis::haar(2).unwrap()).unwrap();
    assert!(haar > gabor);
}

fn basis_inputs(b: &WaveletBasis) -> Vec<Tensor> {
    b.psi.tensors().into_iter().chain(b.phi.tensors()).collect()
}

fn basis_vars(v: &[Var]) -> BasisVars {
    BasisVars {
        psi: AtomVars {
            envelope: v[0],
            omega: v[1],
            phase: v[2],
            residual: v[3],
        },
        phi: AtomVars {
            envelope: v[4],
            omega: v[5],
            phase: v[6],
            residual: v[7],
        },
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn prop_filters_have_unit_norm(seed in 0u64..10_000, half in 1usize..6) {
        let mut rng = SeededRng::new(seed);
        let basis = WaveletBasis::random(2 * half, &mut rng).unwrap();
        let (psi, phi) = discretize_wavelet(&basis).unwrap();
        prop_assert!((psi.sq_norm().sqrt() - 1.0).abs() < 1e-12);
        prop_assert!((phi.sq_norm().sqrt() - 1.0).abs() < 1e-12);
        prop_assert!(psi.all_finite() && phi.all_finite());
    }

    #[test]
    fn prop_forward_is_linear(seed in 0u64..10_000, a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let mut rng = SeededRng::new(seed);
        let basis = WaveletBasis::random(6, &mut rng).unwrap();
        let x = random_signal(32, 2, &mut rng);
        let y = random_signal(32, 2, &mut rng);
        let combo = Tensor::new([32, 2], x.data().iter().zip(y.data()).map(|(p, q)| a * p + b * q).collect()).unwrap();
        let px = dwt_forward(&x, &basis, 3).unwrap();
        let py = dwt_forward(&y, &basis, 3).unwrap();
        let pc = dwt_forward(&combo, &basis, 3).unwrap();
        for ((u, v), w) in px.bands().zip(py.bands()).zip(pc.bands()) {
            for ((p, q), r) in u.data().iter().zip(v.data()).zip(w.data()) {
                prop_assert!((a * p + b * q - r).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn prop_inverse_is_adjoint(seed in 0u64..10_000) {
        let mut rng = SeededRng::new(seed);
        let basis = WaveletBasis::random(8, &mut rng).unwrap();
        let x = random_signal(32, 2, &mut rng);
        let px = dwt_forward(&x, &basis, 3).unwrap();
        let p = px.map(|b| Tensor::randn(b.shape().to_vec(), 1.0, &mut rng));
        let lhs: f64 = px.bands().zip(p.bands()).map(|(a, b)| a.dot(b)).sum();
        let rhs = x.dot(&dwt_inverse(&p, &basis).unwrap());
        prop_assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0));
    }

    #[test]
    fn prop_basis_loss_gradients_match_fd(seed in 0u64..10_000) {
        let mut rng = SeededRng::new(seed);
        let basis = WaveletBasis::random(6, &mut rng).unwrap();
        let x = random_signal(16, 1, &mut rng);
        let inputs = basis_inputs(&basis);
        let ortho = gradcheck::check(&inputs, |t, v| {
            let f = basis_vars(v).discretize(t)?;
            ortho_loss(t, &f)
        }).unwrap();
        prop_assert!(ortho.max_rel_error < 1e-4, "ortho {:?}", ortho);
        let smooth = gradcheck::check(&inputs, |t, v| {
            let f = basis_vars(v).discretize(t)?;
            smooth_loss(t, &f)
        }).unwrap();
        prop_assert!(smooth.max_rel_error < 1e-4, "smooth {:?}", smooth);
        let recon = gradcheck::check(&inputs, |t, v| {
            let f = basis_vars(v).discretize(t)?;
            let xv = t.constant(x.clone());
            recon_loss(t, xv, &f, 2, Boundary::Periodic)
        }).unwrap();
        prop_assert!(recon.max_rel_error < 1e-4, "recon {:?}", recon);
    }
}
