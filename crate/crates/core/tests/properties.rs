use proptest::prelude::*;

use robustdiff::autodiff::{finite_difference, max_relative_error};
use robustdiff::data_eval::{gaussian_kl, gaussian_w1, sliced_wasserstein, verify_talagrand, w1_1d, GaussianOracle};
use robustdiff::models::{ema_update, time_embedding};
use robustdiff::samplers::{ancestral_update, clip_denoised, ddim_update, dpm_solver_update, sample, timesteps};
use robustdiff::schedule::q_sample;
use robustdiff::training::{at_inner_ascent, at_loss, project_radius, standard_loss, PerturbScope};
use robustdiff::{
    EpsModel, ModelConfig, NoiseSchedule, Parameterized, SamplerConfig, SamplerKind, ScheduleKind, SeededRng, Tape,
    Tensor,
};

fn kind() -> impl Strategy<Value = ScheduleKind> {
    prop_oneof![Just(ScheduleKind::Cosine), Just(ScheduleKind::Linear)]
}

fn small_model(dim: usize, steps: usize, seed: u64) -> EpsModel {
    let cfg = ModelConfig {
        hidden: 8,
        depth: 2,
        time_embed: 4,
    };
    EpsModel::init_with(&cfg, dim, steps, &mut SeededRng::new(seed), false).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn alpha_bar_is_decreasing_and_in_range(kind in kind(), steps in 1usize..1500) {
        let s = NoiseSchedule::build(kind, steps).unwrap();
        prop_assert_eq!(s.alpha_bar(0), 1.0);
        for t in 1..=steps {
            prop_assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            prop_assert!(s.alpha_bar(t) > 0.0);
            prop_assert!((s.alpha_bar(t) - s.alpha_bar(t - 1) * s.alpha(t)).abs() <= 1e-15);
        }
    }

    #[test]
    fn timestep_grid_is_strictly_decreasing(steps in 1usize..400, frac in 0.0f64..1.0) {
        let nfe = 1 + ((steps - 1) as f64 * frac) as usize;
        let grid = timesteps(nfe, steps).unwrap();
        prop_assert_eq!(grid.len(), nfe + 1);
        prop_assert_eq!(grid[0], steps);
        prop_assert_eq!(*grid.last().unwrap(), 0);
        prop_assert!(grid.windows(2).all(|w| w[0] > w[1]));
    }

    #[test]
    fn q_sample_is_affine_in_its_inputs(seed in any::<u64>(), t in 1usize..100, c in -3.0f64..3.0) {
        let s = NoiseSchedule::build(ScheduleKind::Cosine, 100).unwrap();
        let mut rng = SeededRng::new(seed);
        let (x0, e1, e2) = (rng.normal_tensor(&[4, 2]), rng.normal_tensor(&[4, 2]), rng.normal_tensor(&[4, 2]));
        let a = q_sample(&x0, t, &e1, &s).unwrap();
        let b = q_sample(&x0, t, &e2, &s).unwrap();
        // Changing the noise moves the sample by sqrt(1 - abar) times the change.
        let diff = a.sub(&b).unwrap();
        let expect = e1.sub(&e2).unwrap().scale((1.0 - s.alpha_bar(t)).sqrt());
        prop_assert!(diff.sub(&expect).unwrap().max_abs() < 1e-12);
        let scaled = q_sample(&x0.scale(c), t, &Tensor::zeros(&[4, 2]), &s).unwrap();
        prop_assert!(scaled.sub(&x0.scale(c * s.alpha_bar(t).sqrt())).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn first_order_solver_is_ddim(kind in kind(), steps in 2usize..300, seed in any::<u64>()) {
        let s = NoiseSchedule::build(kind, steps).unwrap();
        let mut rng = SeededRng::new(seed);
        let t_next = rng.int_inclusive(1, steps);
        let t = rng.int_inclusive(0, t_next - 1);
        let (x, e) = (rng.normal_tensor(&[3, 2]), rng.normal_tensor(&[3, 2]));
        let a = ddim_update(&x, &e, t_next, t, &s).unwrap();
        let b = dpm_solver_update(&x, &e, t_next, t, 1, None, &s).unwrap();
        prop_assert!(a.sub(&b).unwrap().max_abs() < 1e-10);
    }

    #[test]
    fn ddim_recovers_the_clean_point_with_true_noise(seed in any::<u64>(), t in 1usize..100) {
        // With the exact noise, DDIM to step 0 lands on x0.
        let s = NoiseSchedule::build(ScheduleKind::Cosine, 100).unwrap();
        let mut rng = SeededRng::new(seed);
        let (x0, e) = (rng.normal_tensor(&[5, 2]), rng.normal_tensor(&[5, 2]));
        let xt = q_sample(&x0, t, &e, &s).unwrap();
        let back = ddim_update(&xt, &e, t, 0, &s).unwrap();
        prop_assert!(back.sub(&x0).unwrap().max_abs() < 1e-6 * (1.0 / s.alpha_bar(t).sqrt()));
    }

    #[test]
    fn ancestral_noise_enters_linearly(seed in any::<u64>(), t_next in 2usize..50) {
        let s = NoiseSchedule::build(ScheduleKind::Cosine, 50).unwrap();
        let mut rng = SeededRng::new(seed);
        let (x, e, z) = (rng.normal_tensor(&[4, 1]), rng.normal_tensor(&[4, 1]), rng.normal_tensor(&[4, 1]));
        let t = t_next - 1;
        let with = ancestral_update(&x, &e, t_next, t, &z, &s).unwrap();
        let without = ancestral_update(&x, &e, t_next, t, &Tensor::zeros(&[4, 1]), &s).unwrap();
        let sigma = (1.0 - s.alpha_bar(t_next) / s.alpha_bar(t)).sqrt();
        prop_assert!(with.sub(&without).unwrap().sub(&z.scale(sigma)).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn clipping_bounds_the_denoised_estimate(seed in any::<u64>(), t in 1usize..100, bound in 0.1f64..3.0) {
        let s = NoiseSchedule::build(ScheduleKind::Cosine, 100).unwrap();
        let mut rng = SeededRng::new(seed);
        let x = rng.normal_tensor(&[6, 2]).scale(3.0);
        let e = rng.normal_tensor(&[6, 2]);
        let out = clip_denoised(&x, &e, t, bound, &s).unwrap();
        let (a, b) = (s.alpha_bar(t).sqrt(), (1.0 - s.alpha_bar(t)).sqrt());
        for (&xv, &ev) in x.data().iter().zip(out.data()) {
            prop_assert!(((xv - b * ev) / a).abs() <= bound * (1.0 + 1e-9));
        }
    }

    #[test]
    fn ascent_steps_have_length_alpha(seed in any::<u64>(), alpha in 1e-4f64..2.0, rows in 1usize..16) {
        let mut rng = SeededRng::new(seed);
        let g = rng.normal_tensor(&[rows, 3]);
        let d0 = rng.normal_tensor(&[rows, 3]);
        let per_row = at_inner_ascent(&g, &d0, alpha, PerturbScope::PerSample).unwrap();
        for (n, _) in per_row.sub(&d0).unwrap().row_norms().into_iter().zip(0..) {
            prop_assert!((n - alpha).abs() <= 1e-12 * (1.0 + alpha));
        }
        let batch = at_inner_ascent(&g, &d0, alpha, PerturbScope::Batch).unwrap();
        prop_assert!((batch.sub(&d0).unwrap().norm() - alpha).abs() <= 1e-12 * (1.0 + alpha));
    }

    #[test]
    fn projection_is_bounded_and_stable(seed in any::<u64>(), radius in 0.01f64..2.0) {
        let mut d = SeededRng::new(seed).normal_tensor(&[5, 2]);
        project_radius(&mut d, radius, PerturbScope::PerSample);
        prop_assert!(d.row_norms().iter().all(|&n| n <= radius * (1.0 + 1e-12)));
        let once = d.clone();
        project_radius(&mut d, radius, PerturbScope::PerSample);
        // A row rounded to just above the radius may be rescaled again by an ulp.
        prop_assert!(d.sub(&once).unwrap().max_abs() <= 1e-15 * radius);
    }

    #[test]
    fn zero_perturbation_is_the_standard_loss(seed in any::<u64>(), t in 1usize..20, dim in 1usize..4) {
        let s = NoiseSchedule::build(ScheduleKind::Cosine, 20).unwrap();
        let m = small_model(dim, 20, seed);
        let mut rng = SeededRng::new(seed ^ 1);
        let (x0, e) = (rng.normal_tensor(&[3, dim]), rng.normal_tensor(&[3, dim]));
        let zero = Tensor::zeros(&[3, dim]);
        prop_assert_eq!(at_loss(&m, &x0, t, &e, &zero, &s).unwrap(), standard_loss(&m, &x0, t, &e, &s).unwrap());
    }

    #[test]
    fn reverse_mode_matches_finite_differences(seed in any::<u64>(), rows in 1usize..5, cols in 1usize..5) {
        let mut rng = SeededRng::new(seed);
        let a = rng.normal_tensor(&[rows, cols]);
        let w = rng.normal_tensor(&[cols, 3]);
        let f = |x: &Tensor| -> robustdiff::Result<f64> {
            let tape = Tape::new();
            let v = tape.constant(x.clone()).matmul(tape.constant(w.clone()))?.tanh()?.square()?.mean()?;
            v.value().item()
        };
        let tape = Tape::new();
        let x = tape.leaf(a.clone());
        let y = x.matmul(tape.constant(w.clone())).unwrap().tanh().unwrap().square().unwrap().mean().unwrap();
        let grads = tape.backward(y).unwrap();
        let fd = finite_difference(f, &a, 1e-4).unwrap();
        prop_assert!(max_relative_error(grads.wrt(x), &fd, 1e-7) < 1e-6);
    }

    #[test]
    fn ema_rate_interpolates(seed in any::<u64>(), mu in 0.0f64..=1.0) {
        let online = small_model(2, 10, seed);
        let start = small_model(2, 10, seed.wrapping_add(1));
        let mut target = start.clone();
        ema_update(&mut target, &online, mu).unwrap();
        for ((t, s), o) in target.flat_params().iter().zip(start.flat_params()).zip(online.flat_params()) {
            prop_assert!((t - (mu * s + (1.0 - mu) * o)).abs() < 1e-14);
        }
    }

    #[test]
    fn time_embedding_is_bounded(t in 0usize..5000, half in 1usize..16) {
        let e = time_embedding(&[t], 2 * half);
        prop_assert_eq!(e.shape(), &[1, 2 * half]);
        prop_assert!(e.data().iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn w1_is_a_metric_on_samples(seed in any::<u64>(), n in 1usize..200, shift in -5.0f64..5.0) {
        let mut rng = SeededRng::new(seed);
        let a: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        let b: Vec<f64> = (0..n + 3).map(|_| rng.normal()).collect();
        prop_assert_eq!(w1_1d(&a, &a).unwrap(), 0.0);
        prop_assert!((w1_1d(&a, &b).unwrap() - w1_1d(&b, &a).unwrap()).abs() < 1e-12);
        let moved: Vec<f64> = a.iter().map(|v| v + shift).collect();
        prop_assert!((w1_1d(&a, &moved).unwrap() - shift.abs()).abs() < 1e-9);
    }

    #[test]
    fn sliced_distance_is_symmetric_and_zero_on_self(seed in any::<u64>(), n in 2usize..100) {
        let mut rng = SeededRng::new(seed);
        let (a, b) = (rng.normal_tensor(&[n, 2]), rng.normal_tensor(&[n + 1, 2]));
        prop_assert_eq!(sliced_wasserstein(&a, &a, 16, seed).unwrap(), 0.0);
        let ab = sliced_wasserstein(&a, &b, 16, seed).unwrap();
        prop_assert!((ab - sliced_wasserstein(&b, &a, 16, seed).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn transport_entropy_inequality_holds(m in -5.0f64..5.0, scale in 0.2f64..5.0, t in 1usize..100) {
        let s = NoiseSchedule::build(ScheduleKind::Cosine, 100).unwrap();
        prop_assert!(verify_talagrand(m, scale, t, &s).unwrap().pass);
        prop_assert!(gaussian_kl(m, scale, m, scale).unwrap().abs() < 1e-15);
        prop_assert!(gaussian_w1(m, scale, m, scale).unwrap().abs() < 1e-15);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn sampling_is_a_function_of_the_seed(seed in any::<u64>(), kind in prop_oneof![
        Just(SamplerKind::Ancestral), Just(SamplerKind::Ddim), Just(SamplerKind::DpmSolver), Just(SamplerKind::Es)
    ]) {
        let s = NoiseSchedule::build(ScheduleKind::Cosine, 30).unwrap();
        let oracle = GaussianOracle::new(1.0, 0.5, s.clone()).unwrap();
        let cfg = SamplerConfig { kind, nfe: 10, seed, ..Default::default() };
        let a = sample(&oracle, &cfg, 64, 1, &s).unwrap().into_final();
        let b = sample(&oracle, &cfg, 64, 1, &s).unwrap().into_final();
        prop_assert_eq!(&a, &b);
        // Chains are independent streams: a prefix of a larger run matches.
        let big = sample(&oracle, &cfg, 80, 1, &s).unwrap().into_final();
        prop_assert_eq!(&big.data()[..64], a.data());
    }
}
