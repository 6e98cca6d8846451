//! Property tests for the invariants of each module.

use collapse_lab::datasets::{exact_spectrum_batch, load_idx, synth_lowrank, write_idx, DataBatch};
use collapse_lab::diagnostics::{classify_category, collapse_report, sigma_histogram, ClassifyContext, CollapseThresholds};
use collapse_lab::diff::{grad_check, soft_threshold, Tape, Tensor};
use collapse_lab::linear_oracle::{ppca_closed_form, predict_collapsed_count, spectral_profile, SpectralProfile};
use collapse_lab::nets::{build_mlp, Activation, DecoderSpec, MlpSpec, ModelSpec, VaeModel};
use collapse_lab::objective::{gaussian_tail, kl_term, optimal_gamma, vae_energy, vae_energy_deterministic};
use collapse_lab::propositions::prop2::{grid_argmin, random_surrogate};
use collapse_lab::propositions::happr_gamma_prime;
use collapse_lab::rng::seeded;
use collapse_lab::trainer::train;
use collapse_lab::{GammaMode, TrainConfig};
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-2.0f64..2.0, rows * cols).prop_map(move |v| Tensor::matrix(rows, cols, v).unwrap())
}

/// `sum(exp(a·b)) + sum(log(1 + b²))` on a `[3, 2]·[2, 4]` product.
fn smooth(tape: &mut Tape, a: collapse_lab::diff::Var, b: collapse_lab::diff::Var) -> collapse_lab::Result<collapse_lab::diff::Var> {
    let p = tape.matmul(a, b)?;
    let s = tape.scale(p, 0.3)?;
    let e = tape.exp(s)?;
    let t1 = tape.sum(e)?;
    let sq = tape.square(b)?;
    let one = tape.constant(Tensor::filled(&[2, 4], 1.0));
    let q = tape.add(sq, one)?;
    let l = tape.log(q)?;
    let t2 = tape.sum(l)?;
    tape.add(t1, t2)
}

proptest! {
    #![proptest_config(ProptestConfig { failure_persistence: None, ..ProptestConfig::with_cases(48) })]

    #[test]
    fn autodiff_matches_finite_differences(a in matrix(3, 2), b in matrix(2, 4)) {
        let err = grad_check(|t, v| smooth(t, v[0], v[1]), &[a, b], 1e-6).unwrap();
        prop_assert!(err <= 1e-5, "{err}");
    }

    #[test]
    fn backward_is_linear(a in matrix(3, 2), b in matrix(2, 4), ca in -3.0f64..3.0, cb in -3.0f64..3.0) {
        let grads = |wa: f64, wb: f64| {
            let mut t = Tape::new();
            let (va, vb) = (t.param(a.clone()), t.param(b.clone()));
            let f = smooth(&mut t, va, vb).unwrap();
            let p = t.matmul(va, vb).unwrap();
            let g0 = t.sum(p).unwrap();
            let fs = t.scale(f, wa).unwrap();
            let gs = t.scale(g0, wb).unwrap();
            let out = t.add(fs, gs).unwrap();
            let gr = t.backward(out).unwrap();
            gr.wrt(&t, va).values().to_vec()
        };
        let (f_only, g_only, both) = (grads(1.0, 0.0), grads(0.0, 1.0), grads(ca, cb));
        for i in 0..both.len() {
            let want = ca * f_only[i] + cb * g_only[i];
            prop_assert!((both[i] - want).abs() <= 1e-12 * (1.0 + want.abs()));
        }
    }

    #[test]
    fn repeated_backward_is_bit_identical(a in matrix(3, 2), b in matrix(2, 4)) {
        let mut t = Tape::new();
        let (va, vb) = (t.param(a), t.param(b));
        let f = smooth(&mut t, va, vb).unwrap();
        let g1 = t.backward(f).unwrap();
        let g2 = t.backward(f).unwrap();
        prop_assert_eq!(g1.wrt(&t, va), g2.wrt(&t, va));
        prop_assert_eq!(g1.wrt(&t, vb), g2.wrt(&t, vb));
    }

    #[test]
    fn soft_threshold_is_one_lipschitz(u in -10.0f64..10.0, v in -10.0f64..10.0, alpha in 0.0f64..3.0) {
        prop_assert!((soft_threshold(u, alpha) - soft_threshold(v, alpha)).abs() <= (u - v).abs() + 1e-15);
    }

    #[test]
    fn mlp_param_count_is_closed_form(input in 1usize..6, out in 1usize..6, hidden in prop::collection::vec(1usize..8, 0..4)) {
        let spec = MlpSpec { input_dim: input, hidden_widths: hidden.clone(), output_dim: out, activation: Activation::Relu };
        let mut w = vec![input];
        w.extend(&hidden);
        w.push(out);
        let want: usize = w.windows(2).map(|p| p[0] * p[1] + p[1]).sum();
        prop_assert_eq!(build_mlp(&spec, 1).unwrap().param_count(), want);
    }

    #[test]
    fn zeroed_latent_ignores_its_coordinate(seed in 0u64..1000, depth in 0usize..3, j in 0usize..3, shift in -5.0f64..5.0) {
        let spec = if depth == 0 { ModelSpec::affine(4, 3) } else { ModelSpec::mlp(4, 3, depth, 5) };
        let m = VaeModel::new(spec, seed).unwrap().zero_latent_dim(j).unwrap();
        let z = Tensor::matrix(2, 3, vec![0.3, -0.2, 1.1, -0.7, 0.5, 0.05]).unwrap();
        let mut z2 = z.clone();
        for r in 0..2 {
            z2.set(r, j, z.get(r, j) + shift);
        }
        prop_assert_eq!(m.decode(&z).unwrap(), m.decode(&z2).unwrap());
        let lg = m.encode(&Tensor::matrix(2, 4, vec![1.0, -2.0, 0.5, 3.0, 0.0, 0.1, -0.4, 2.2]).unwrap()).unwrap();
        for r in 0..2 {
            prop_assert_eq!(lg.mu().get(r, j), 0.0);
            prop_assert_eq!(lg.sigma().get(r, j), 1.0);
        }
    }

    #[test]
    fn unit_scaled_decoder_equals_base(seed in 0u64..1000, per_dim in any::<bool>(), z in matrix(3, 2)) {
        let base = ModelSpec::mlp(3, 2, 2, 4);
        let mut scaled = base.clone();
        scaled.decoder = DecoderSpec::Scaled { base: Box::new(base.decoder.clone()), per_dim };
        let a = VaeModel::new(base, seed).unwrap();
        let b = VaeModel::new(scaled, seed).unwrap();
        prop_assert_eq!(a.decode(&z).unwrap(), b.decode(&z).unwrap());
    }

    #[test]
    fn encoder_scales_are_positive(seed in 0u64..1000, x in matrix(4, 3)) {
        let m = VaeModel::new(ModelSpec::mlp(3, 2, 2, 6), seed).unwrap();
        let lg = m.encode(&x).unwrap();
        prop_assert!(lg.sigma().values().iter().all(|s| *s > 0.0 && s.is_finite()));
    }

    #[test]
    fn kl_is_nonnegative(mu in -5.0f64..5.0, sigma in 1e-3f64..5.0) {
        prop_assert!(kl_term(mu, sigma) >= 0.0);
        prop_assert_eq!(kl_term(0.0, 1.0), 0.0);
    }

    #[test]
    fn tail_recursion_holds(a in -8.0f64..8.0) {
        let t = gaussian_tail(a);
        prop_assert!((t.m2 - (t.prob + a * t.m1)).abs() <= 1e-12);
    }

    #[test]
    fn collapsed_configuration_energy(seed in 0u64..500, d in 1usize..6, n in 2usize..20) {
        let eigs: Vec<f64> = (0..d).map(|i| 2f64.powi(-(i as i32))).collect();
        let batch = synth_lowrank(n, d, &eigs, seed).unwrap();
        let gb = batch.gamma_bar();
        let m = VaeModel::new(ModelSpec::mlp(d, 2, 1, 3), seed).unwrap().collapsed(batch.mean(), gb).unwrap();
        let e = vae_energy(&m, &batch, None, 4, &mut seeded(seed)).unwrap().total_energy;
        let want = (n * d) as f64 * (1.0 + gb.ln());
        prop_assert!((e - want).abs() <= 1e-9 * want.abs().max(1.0), "{e} vs {want}");
    }

    #[test]
    fn optimal_gamma_is_the_argmin(seed in 0u64..500) {
        let batch = synth_lowrank(12, 4, &[1.0, 0.5], seed).unwrap();
        let m = VaeModel::new(ModelSpec::mlp(4, 2, 1, 5), seed).unwrap();
        let g = optimal_gamma(&m, &batch, 8, &mut seeded(1)).unwrap();
        let e = |gm: f64| vae_energy(&m, &batch, Some(gm), 8, &mut seeded(1)).unwrap().total_energy;
        prop_assert!(e(g) <= e(1.1 * g) && e(g) <= e(0.9 * g));
    }

    #[test]
    fn predicted_collapse_is_monotone_in_gamma(eigs in prop::collection::vec(0.0f64..5.0, 1..8), kappa in 1usize..8, g1 in 1e-3f64..10.0, g2 in 1e-3f64..10.0) {
        let prof = SpectralProfile::from_eigenvalues(&eigs).unwrap();
        let (lo, hi) = if g1 <= g2 { (g1, g2) } else { (g2, g1) };
        prop_assert!(predict_collapsed_count(&prof, kappa, lo).unwrap() <= predict_collapsed_count(&prof, kappa, hi).unwrap());
    }

    #[test]
    fn full_rank_ppca_reproduces_total_variance(eigs in prop::collection::vec(0.01f64..5.0, 1..8)) {
        let prof = SpectralProfile::from_eigenvalues(&eigs).unwrap();
        let d = eigs.len();
        let sol = ppca_closed_form(&prof, d, &GammaMode::Learned).unwrap();
        let w2: f64 = sol.w_star.values().iter().map(|v| v * v).sum();
        let total: f64 = eigs.iter().sum();
        prop_assert!((w2 + d as f64 * sol.gamma_star - total).abs() <= 1e-9 * total.max(1.0));
    }

    #[test]
    fn happr_thresholds_at_twice_gamma_prime(seed in 0u64..10_000, len in 1usize..9) {
        let s = random_surrogate(&mut seeded(seed), len);
        let gp = happr_gamma_prime(&s).unwrap();
        prop_assert_eq!(grid_argmin(&s.with_gamma(2.0 * gp)), 0.0);
    }

    #[test]
    fn collapsed_model_reports_full_collapse(seed in 0u64..500, depth in 0usize..3, trainable in any::<bool>()) {
        let batch = synth_lowrank(16, 5, &[2.0, 1.0, 0.3], seed).unwrap();
        let spec = if depth == 0 { ModelSpec::affine(5, 3) } else { ModelSpec::mlp(5, 3, depth, 6) };
        let mut m = VaeModel::new(spec, seed).unwrap().collapsed(batch.mean(), batch.gamma_bar()).unwrap();
        m.gamma_trainable = trainable;
        let r = collapse_report(&m, &batch, 4, &mut seeded(seed)).unwrap();
        prop_assert_eq!(r.collapsed_units, 3);
        prop_assert_eq!(r.label.as_str(), if trainable { "local_min_collapse" } else { "fixed_gamma_collapse" });
    }

    #[test]
    fn histogram_conserves_mass(seed in 0u64..500, n in 1usize..30, bins in 2usize..40) {
        let batch = synth_lowrank(n, 4, &[1.0, 0.5], seed).unwrap();
        let m = VaeModel::new(ModelSpec::mlp(4, 3, 1, 5), seed).unwrap();
        prop_assert_eq!(sigma_histogram(&m, &batch, bins).unwrap().total(), n * 3);
    }

    #[test]
    fn classification_is_pure(seed in 0u64..500, fixed in any::<bool>(), baseline in prop::option::of(1e-4f64..1.0)) {
        let batch = synth_lowrank(10, 4, &[1.0, 0.5], seed).unwrap();
        let m = VaeModel::new(ModelSpec::mlp(4, 3, 1, 5), seed).unwrap();
        let r = collapse_report(&m, &batch, 2, &mut seeded(1)).unwrap();
        let ctx = ClassifyContext { gamma_fixed: fixed, recon_baseline: baseline };
        let th = CollapseThresholds::default();
        prop_assert_eq!(classify_category(&r, &ctx, &th), classify_category(&r.clone(), &ctx, &th));
    }

    #[test]
    fn implicit_gamma_is_optimal_gamma(seed in 0u64..500) {
        let batch = synth_lowrank(10, 4, &[1.0, 0.5], seed).unwrap();
        let m = VaeModel::new(ModelSpec::mlp(4, 3, 1, 5), seed).unwrap();
        let r = collapse_report(&m, &batch, 6, &mut seeded(seed)).unwrap();
        prop_assert_eq!(r.implicit_gamma.to_bits(), optimal_gamma(&m, &batch, 6, &mut seeded(seed)).unwrap().to_bits());
    }

    #[test]
    fn gamma_bar_is_shift_invariant(seed in 0u64..500, shift in prop::collection::vec(-10.0f64..10.0, 3)) {
        let b = synth_lowrank(20, 3, &[1.0, 0.2], seed).unwrap();
        let rows: Vec<Vec<f64>> = (0..b.n()).map(|i| b.x().row(i).iter().zip(&shift).map(|(v, s)| v + s).collect()).collect();
        let shifted = DataBatch::from_rows(&rows).unwrap();
        prop_assert!((b.gamma_bar() - shifted.gamma_bar()).abs() <= 1e-12 * b.gamma_bar().max(1.0));
    }

    #[test]
    fn exact_spectrum_round_trips(seed in 0u64..500, eigs in prop::collection::vec(0.01f64..5.0, 1..5)) {
        let mut sorted = eigs.clone();
        sorted.sort_by(|a, b| b.total_cmp(a));
        let b = exact_spectrum_batch(40, 6, &sorted, seed).unwrap();
        let prof = spectral_profile(&b);
        for (i, l) in sorted.iter().enumerate() {
            prop_assert!((prof.eigenvalues[i] - l).abs() <= 1e-9);
        }
        for l in &prof.eigenvalues[sorted.len()..] {
            prop_assert!(l.abs() <= 1e-9);
        }
    }

    #[test]
    fn idx_round_trips(pixels in prop::collection::vec(any::<u8>(), 12..=12 * 5)) {
        let n = pixels.len() / 12;
        let rows: Vec<Vec<f64>> = pixels.chunks(12).take(n).map(|c| c.iter().map(|&p| p as f64 / 255.0).collect()).collect();
        let batch = DataBatch::from_rows(&rows).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.idx");
        write_idx(&path, &batch, 3, 4, true).unwrap();
        let back = load_idx(&path, None, None, true).unwrap();
        prop_assert_eq!(back.x(), batch.x());
    }
}

proptest! {
    #![proptest_config(ProptestConfig { failure_persistence: None, ..ProptestConfig::with_cases(6) })]

    #[test]
    fn training_is_deterministic_and_decreases_energy(seed in 0u64..100) {
        let batch = synth_lowrank(24, 4, &[1.0, 0.3], seed).unwrap();
        let spec = ModelSpec::mlp(4, 2, 1, 6);
        let cfg = TrainConfig { iterations: 200, batch_size: 8, lr0: 5e-3, eval_every: 50, seed, ..Default::default() };
        let (mut a, mut b) = (VaeModel::new(spec.clone(), seed).unwrap(), VaeModel::new(spec, seed).unwrap());
        let la = train(&mut a, &batch, &cfg).unwrap();
        let lb = train(&mut b, &batch, &cfg).unwrap();
        prop_assert_eq!(&la.rows, &lb.rows);
        prop_assert_eq!(&la.report, &lb.report);
        prop_assert!(la.last().unwrap().total_energy <= la.rows[0].total_energy);
    }

    #[test]
    fn deterministic_energy_has_no_noise(seed in 0u64..100) {
        let batch = synth_lowrank(8, 3, &[1.0], seed).unwrap();
        let m = VaeModel::new(ModelSpec::affine(3, 2), seed).unwrap();
        let a = vae_energy_deterministic(&m, &batch, None).unwrap();
        prop_assert_eq!(a.recon_stderr, 0.0);
    }
}
