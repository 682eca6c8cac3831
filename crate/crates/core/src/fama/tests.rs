use super::*;
use crate::awdm::UNCERTAINTY_BOUND;
use crate::ndcore::{gradcheck, SeededRng};
use proptest::prelude::*;

/// Lag profile straight from the definition, with the folded frequency in
/// the cosine argument.
fn profile_oracle(omega: f64, sigma: f64, len: usize) -> Vec<f64> {
    let h: Vec<f64> = (0..len)
        .map(|m| {
            let f = m.min(len - m) as f64 / len as f64;
            (-(f - omega).powi(2) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let raw: Vec<f64> = (0..len)
        .map(|d| {
            (0..len)
                .map(|m| {
                    let f = m.min(len - m) as f64 / len as f64;
                    h[m] * (2.0 * std::f64::consts::PI * f * d as f64).cos()
                })
                .sum()
        })
        .collect();
    let m: Vec<f64> = raw.iter().map(|v| v / raw[0]).collect();
    let lo = m.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = m.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo < 1e-12 {
        return vec![1.0; len];
    }
    m.iter()
        .map(|v| (MASK_FLOOR + (1.0 - MASK_FLOOR) * (v - lo) / (hi - lo)).max(MASK_FLOOR))
        .collect()
}

#[test]
fn gaussian_response_examples() {
    let head = FreqHeadParams::single(0.2, 0.05, 4);
    assert!((gaussian_response(0.2, &head, 0) - 1.0).abs() < 1e-15);
    assert!((gaussian_response(0.25, &head, 0) - (-0.5f64).exp()).abs() < 1e-12);
    let wide = FreqHeadParams::single(0.2, 1e8, 4);
    for w in [0.0, 0.1, 0.5] {
        assert!((gaussian_response(w, &wide, 0) - 1.0).abs() < 1e-12);
    }
    let clamped = FreqHeadParams {
        omega: vec![0.9],
        ..head
    };
    assert_eq!(clamped.omega(0), 0.5);
}

#[test]
fn default_heads_cover_band() {
    let p = FreqHeadParams::init(4, 16);
    let want = [0.0625, 0.1875, 0.3125, 0.4375];
    for (h, w) in want.iter().enumerate() {
        assert!((p.omega(h) - w).abs() < 1e-15);
        assert!((p.sigma(h) - DEFAULT_SIGMA).abs() < 1e-15);
    }
}

#[test]
fn mask_profile_matches_dft_oracle() {
    for (omega, sigma, len) in [(0.25, 0.03, 64), (0.1, 0.08, 17), (0.4, 0.2, 32)] {
        let mask = build_mask(&FreqHeadParams::single(omega, sigma, 4), 0, len).unwrap();
        for (a, b) in mask.profile.iter().zip(profile_oracle(omega, sigma, len)) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn flat_response_gives_identity_dominant_mask() {
    let mask = build_mask(&FreqHeadParams::single(0.25, 1e6, 4), 0, 16).unwrap();
    assert!((mask.profile[0] - 1.0).abs() < 1e-12);
    assert!(mask.profile[1..].iter().all(|&v| (v - MASK_FLOOR).abs() < 1e-9));
}

#[test]
fn narrow_baseband_gives_all_ones() {
    let mask = build_mask(&FreqHeadParams::single(0.0, 1e-3, 4), 0, 32).unwrap();
    assert!(mask.matrix.data().iter().all(|&v| v == 1.0));
}

/// Standard multi-head attention written with explicit loops.
fn mha_oracle(x: &Tensor, wq: &[Tensor], wk: &[Tensor], wv: &[Tensor], wo: &Tensor, masks: Option<&[Tensor]>) -> Tensor {
    let matmul = |a: &Tensor, b: &Tensor| {
        let (m, k) = a.dims2().unwrap();
        let n = b.dims2().unwrap().1;
        let mut out = Tensor::zeros([m, n]);
        for i in 0..m {
            for j in 0..n {
                out.set(i, j, (0..k).map(|p| a.at(i, p) * b.at(p, j)).sum());
            }
        }
        out
    };
    let len = x.dims2().unwrap().0;
    let mut cols: Vec<Tensor> = Vec::new();
    for h in 0..wq.len() {
        let (q, k, v) = (matmul(x, &wq[h]), matmul(x, &wk[h]), matmul(x, &wv[h]));
        let d_k = q.dims2().unwrap().1;
        let mut a = Tensor::zeros([len, len]);
        for i in 0..len {
            let s: Vec<f64> = (0..len)
                .map(|j| {
                    let dot: f64 = (0..d_k).map(|c| q.at(i, c) * k.at(j, c)).sum();
                    let m = masks.map_or(1.0, |ms| ms[h].at(i, j));
                    dot / (d_k as f64).sqrt() * m
                })
                .collect();
            let top = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = s.iter().map(|v| (v - top).exp()).sum();
            for j in 0..len {
                a.set(i, j, (s[j] - top).exp() / z);
            }
        }
        cols.push(matmul(&a, &v));
    }
    let (_, d_k) = cols[0].dims2().unwrap();
    let mut cat = Tensor::zeros([len, d_k * cols.len()]);
    for (h, c) in cols.iter().enumerate() {
        for i in 0..len {
            for j in 0..d_k {
                cat.set(i, h * d_k + j, c.at(i, j));
            }
        }
    }
    matmul(&cat, wo)
}

struct Setup {
    x: Tensor,
    params: FreqHeadParams,
    wq: Vec<Tensor>,
    wk: Vec<Tensor>,
    wv: Vec<Tensor>,
    wo: Tensor,
}

fn setup(seed: u64, len: usize, d_model: usize, heads: usize) -> Setup {
    let mut rng = SeededRng::new(seed);
    let d_k = head_dim(d_model, heads).unwrap();
    let mut w = || (0..heads).map(|_| Tensor::randn([d_model, d_k], 0.5, &mut rng)).collect::<Vec<_>>();
    let (wq, wk, wv) = (w(), w(), w());
    Setup {
        x: Tensor::randn([len, d_model], 1.0, &mut rng),
        params: FreqHeadParams::init(heads, d_k),
        wq,
        wk,
        wv,
        wo: Tensor::randn([d_model, d_model], 0.5, &mut rng),
    }
}

fn run(s: &Setup, mode: MaskMode) -> Tensor {
    let mut tape = Tape::new();
    let vars = register(&mut tape, s, &s.params);
    let x = tape.constant(s.x.clone());
    let out = fama_attention(&mut tape, x, x, x, &vars, mode).unwrap();
    tape.value(out).clone()
}

fn register(tape: &mut Tape, s: &Setup, p: &FreqHeadParams) -> AttentionVars {
    AttentionVars {
        heads: (0..p.num_heads())
            .map(|h| HeadVars {
                omega: tape.constant(Tensor::scalar(p.omega[h])),
                log_sigma: tape.constant(Tensor::scalar(p.log_sigma[h])),
                wq: tape.constant(s.wq[h].clone()),
                wk: tape.constant(s.wk[h].clone()),
                wv: tape.constant(s.wv[h].clone()),
            })
            .collect(),
        wo: tape.constant(s.wo.clone()),
    }
}

#[test]
fn neutral_mode_is_standard_attention() {
    let s = setup(1, 12, 8, 2);
    let neutral = run(&s, MaskMode::Neutral);
    let oracle = mha_oracle(&s.x, &s.wq, &s.wk, &s.wv, &s.wo, None);
    assert!(neutral.max_abs_diff(&oracle) < 1e-12);

    // An all-ones frequency mask changes nothing, bit for bit.
    let ones = Setup {
        params: FreqHeadParams {
            omega: vec![0.0; 2],
            log_sigma: vec![1e-4f64.ln(); 2],
            d_k: 4,
        },
        ..s
    };
    assert_eq!(run(&ones, MaskMode::Frequency), neutral);
}

#[test]
fn frequency_mode_matches_masked_oracle() {
    let s = setup(2, 10, 6, 3);
    let masks: Vec<Tensor> = (0..3).map(|h| build_mask(&s.params, h, 10).unwrap().matrix).collect();
    let got = run(&s, MaskMode::Frequency);
    let oracle = mha_oracle(&s.x, &s.wq, &s.wk, &s.wv, &s.wo, Some(&masks));
    assert!(got.max_abs_diff(&oracle) < 1e-12);
}

#[test]
fn single_position_ignores_mask() {
    let s = setup(3, 1, 4, 2);
    let out = run(&s, MaskMode::Frequency);
    // Softmax over one element is 1, so each head returns x·W_v.
    let mut tape = Tape::new();
    let x = tape.constant(s.x.clone());
    let vs: Vec<Var> = s.wv.iter().map(|w| tape.constant(w.clone())).collect();
    let heads: Vec<Var> = vs.iter().map(|&w| tape.matmul(x, w).unwrap()).collect();
    let cat = tape.concat_cols(&heads).unwrap();
    let wo = tape.constant(s.wo.clone());
    let want = tape.matmul(cat, wo).unwrap();
    assert_eq!(&out, tape.value(want));
}

#[test]
fn hand_evaluated_three_by_three() {
    let x = Tensor::from_rows(&[vec![1.0, 0.0, 0.5], vec![0.0, 1.0, 0.0], vec![-1.0, 0.5, 1.0]]).unwrap();
    let params = FreqHeadParams::single(0.2, 0.1, 3);
    let mask = build_mask(&params, 0, 3).unwrap();
    let mut tape = Tape::new();
    let eye = tape.constant(Tensor::eye(3));
    let vars = AttentionVars {
        heads: vec![HeadVars {
            omega: tape.constant(Tensor::scalar(0.2)),
            log_sigma: tape.constant(Tensor::scalar(0.1f64.ln())),
            wq: eye,
            wk: eye,
            wv: eye,
        }],
        wo: eye,
    };
    let q = tape.constant(x.clone());
    // One-hot value rows expose the attention weights directly.
    let v = tape.constant(Tensor::eye(3));
    let out = fama_attention(&mut tape, q, q, v, &vars, MaskMode::Frequency).unwrap();
    let out = tape.value(out);
    for i in 0..3 {
        let s: Vec<f64> = (0..3)
            .map(|j| {
                let dot = x.at(i, 0) * x.at(j, 0) + x.at(i, 1) * x.at(j, 1) + x.at(i, 2) * x.at(j, 2);
                dot / 3f64.sqrt() * mask.profile[i.abs_diff(j)]
            })
            .collect();
        let z: f64 = s.iter().map(|v| v.exp()).sum();
        let mut row = 0.0;
        for j in 0..3 {
            assert!((out.at(i, j) - s[j].exp() / z).abs() < 1e-14);
            row += out.at(i, j);
        }
        assert!((row - 1.0).abs() < 1e-12);
    }
}

#[test]
fn short_flat_masks_fall_below_the_sampled_bound() {
    // A one-sample lag kernel on a short grid has sub-sample time spread;
    // the floor tail only lifts the product once the grid is long enough.
    let flat = FreqHeadParams::single(0.25, 1e6, 4);
    let short = mask_time_bandwidth(&build_mask(&flat, 0, 16).unwrap()).unwrap();
    let long = mask_time_bandwidth(&build_mask(&flat, 0, 64).unwrap()).unwrap();
    assert!(short < UNCERTAINTY_BOUND - 0.01);
    assert!(long >= UNCERTAINTY_BOUND - 0.01);
}

#[test]
fn indivisible_heads_are_config_error() {
    assert!(matches!(head_dim(10, 4), Err(Error::Config(_))));
    assert_eq!(head_dim(64, 4).unwrap(), 16);
}

#[test]
fn selective_head_prefers_its_band() {
    let head = FreqHeadParams::single(0.25, 0.03, PROBE_WIDTH);
    let r = head_selectivity(&head, 0, &[0.25, 0.25 + 4.0 * 0.03, 0.05, 0.45], 64, PROBE_WIDTH).unwrap();
    assert!(r[0] > r[1] && r[0] > r[2] && r[0] > r[3], "{r:?}");
}

#[test]
fn flat_head_is_unselective() {
    let head = FreqHeadParams::single(0.25, 1e6, PROBE_WIDTH);
    let probes = [0.05, 0.1, 0.2, 0.25, 0.3, 0.4, 0.45];
    let r = head_selectivity(&head, 0, &probes, 64, PROBE_WIDTH).unwrap();
    let (lo, hi) = r.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    assert!(hi / lo < 1.05, "{r:?}");
}

#[test]
fn zero_probe_has_zero_ratio() {
    let head = FreqHeadParams::single(0.25, 0.03, 4);
    assert_eq!(probe_ratio(&head, 0, &Tensor::zeros([8, 4])).unwrap(), 0.0);
    assert!(head_selectivity(&head, 0, &[0.7], 8, 4).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn prop_mask_structure(omega in 0.0f64..0.5, log_sigma in -5.0f64..2.0, len in 1usize..40) {
        let p = FreqHeadParams { omega: vec![omega], log_sigma: vec![log_sigma], d_k: 4 };
        let mask = build_mask(&p, 0, len).unwrap();
        let m = &mask.matrix;
        for i in 0..len {
            for j in 0..len {
                prop_assert_eq!(m.at(i, j), m.at(j, i));
                prop_assert_eq!(m.at(i, j), mask.profile[i.abs_diff(j)]);
                prop_assert!(m.at(i, j) >= MASK_FLOOR && m.at(i, j) <= 1.0);
                prop_assert!(m.at(i, j) <= m.at(i, i));
            }
        }
    }

    #[test]
    fn prop_mask_kernels_obey_uncertainty(omega in 0.0f64..0.5, log_sigma in -5.0f64..8.0, len in 48usize..130) {
        let p = FreqHeadParams { omega: vec![omega], log_sigma: vec![log_sigma], d_k: 4 };
        let mask = build_mask(&p, 0, len).unwrap();
        let tb = mask_time_bandwidth(&mask).unwrap();
        prop_assert!(tb >= UNCERTAINTY_BOUND - 0.01, "{}", tb);
    }

    #[test]
    fn prop_frequency_parameter_gradients_match_fd(seed in 0u64..10_000, omega in 0.08f64..0.42, sigma in 0.04f64..0.3) {
        let s = setup(seed, 8, 4, 2);
        let mut rng = SeededRng::new(seed ^ 0x5a5a);
        let target = Tensor::randn([8, 4], 1.0, &mut rng);
        let inputs = vec![
            Tensor::scalar(omega),
            Tensor::scalar(sigma.ln()),
            Tensor::scalar(0.45 - omega / 2.0),
            Tensor::scalar((sigma * 0.7).ln()),
            s.wq[0].clone(),
        ];
        let report = gradcheck::check(&inputs, |t, v| {
            let vars = AttentionVars {
                heads: (0..2).map(|h| HeadVars {
                    omega: v[2 * h],
                    log_sigma: v[2 * h + 1],
                    wq: if h == 0 { v[4] } else { t.constant(s.wq[1].clone()) },
                    wk: t.constant(s.wk[h].clone()),
                    wv: t.constant(s.wv[h].clone()),
                }).collect(),
                wo: t.constant(s.wo.clone()),
            };
            let x = t.constant(s.x.clone());
            let out = fama_attention(t, x, x, x, &vars, MaskMode::Frequency)?;
            let tgt = t.constant(target.clone());
            let d = t.sub(out, tgt)?;
            let sq = t.mul(d, d)?;
            Ok(t.sum(sq))
        }).unwrap();
        prop_assert!(report.max_rel_error < 1e-4, "{:?}", report);
    }
}
