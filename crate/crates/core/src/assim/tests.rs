use super::*;
use crate::codec::{make_linear_codec, Codec, NeuralCodec};
use crate::field::{
    apply_normalization, compute_norm_stats, generate_synthetic, mean_center, split_series,
    FieldSeries, NormMode, StateField, SynthConfig,
};
use crate::reduced::{build_background_matrix, compute_svd, reconstruct_vtau, truncate};
use approx::assert_abs_diff_eq;
use rand::Rng;

fn random_matrix(n: usize, s: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = crate::rng::stream(seed);
    DMatrix::from_fn(n, s, |_, _| rng.gen_range(-1.0..1.0))
}

fn unit_field(n: usize, seed: u64) -> StateField {
    let grid = Grid3::new(n, 1, 1).unwrap();
    let mut rng = crate::rng::stream(seed);
    StateField::new(grid, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn misfit_reduces_to_observation_for_zero_background() {
    let truth = unit_field(12, 1);
    let obs = build_observations(&truth, 12, 0.1, false, 2).unwrap();
    let d = misfit(&obs, &vec![0.0; 12]).unwrap();
    assert_eq!(d, obs.values);
}

#[test]
fn misfit_vanishes_when_background_explains_observations() {
    let truth = unit_field(10, 3);
    let obs = build_observations(&truth, 10, 0.1, false, 4).unwrap();
    let d = misfit(&obs, truth.values()).unwrap();
    assert!(d.iter().all(|v| *v == 0.0));
}

#[test]
fn misfit_matches_elementwise_recomputation_under_subsampling() {
    let truth = unit_field(20, 5);
    let obs = build_observations(&truth, 7, 0.1, false, 6).unwrap();
    let x_b = unit_field(20, 7);
    let d = misfit(&obs, x_b.values()).unwrap();
    let indices = obs.operator.indices().unwrap();
    for (k, &i) in indices.iter().enumerate() {
        let expected = obs.values[k] - x_b.values()[i];
        assert_abs_diff_eq!(d[k], expected, epsilon = 0.0);
    }
}

#[test]
fn full_observation_without_noise_is_the_truth() {
    let truth = unit_field(15, 9);
    let obs = build_observations(&truth, 15, 0.05, false, 1).unwrap();
    assert!(obs.operator.is_identity());
    assert_eq!(obs.values, truth.values());
}

#[test]
fn single_observation_has_length_one() {
    let truth = unit_field(15, 9);
    let obs = build_observations(&truth, 1, 0.05, false, 1).unwrap();
    assert_eq!(obs.values.len(), 1);
    assert_eq!(obs.operator.obs_dim(), 1);
}

#[test]
fn observation_noise_has_requested_std() {
    // sigma_0 = 0.005 over 1e5 sampled locations: empirical std within 10%.
    let grid = Grid3::new(100, 50, 40).unwrap();
    let truth = StateField::zeros(grid);
    let m = grid.n() / 2;
    let obs = build_observations(&truth, m, 0.005, true, 13).unwrap();
    let mean: f64 = obs.values.iter().sum::<f64>() / m as f64;
    let var: f64 = obs.values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
    let std = var.sqrt();
    assert!((std - 0.005).abs() < 0.0005, "std = {std}");
}

#[test]
fn observation_count_is_validated() {
    let truth = unit_field(4, 2);
    assert!(matches!(
        build_observations(&truth, 0, 0.1, false, 1),
        Err(AssimError::BadObservationCount { .. })
    ));
    assert!(matches!(
        build_observations(&truth, 5, 0.1, false, 1),
        Err(AssimError::BadObservationCount { .. })
    ));
    assert!(matches!(
        build_observations(&truth, 2, -1.0, false, 1),
        Err(AssimError::BadSigma(_))
    ));
}

#[test]
fn observations_are_deterministic_per_seed() {
    let truth = unit_field(50, 11);
    let a = build_observations(&truth, 20, 0.01, true, 42).unwrap();
    let b = build_observations(&truth, 20, 0.01, true, 42).unwrap();
    assert_eq!(a, b);
    let c = build_observations(&truth, 20, 0.01, true, 43).unwrap();
    assert_ne!(a, c);
}

#[test]
fn latent_background_matches_dense_multiply_for_linear_codec() {
    let v = random_matrix(18, 5, 8);
    let bg = BackgroundMatrix::from_parts(v.clone(), DVector::zeros(18)).unwrap();
    let codec = make_linear_codec(&compute_svd(&bg).unwrap(), 4).unwrap();
    let v_l = latent_background(&codec, &bg).unwrap();
    let dense = codec.basis().tr_mul(&v);
    assert!((v_l.clone() - dense).norm() < 1e-12);

    let zero_bg = BackgroundMatrix::from_parts(DMatrix::zeros(18, 5), DVector::zeros(18)).unwrap();
    let v_l0 = latent_background(&codec, &zero_bg).unwrap();
    assert!(v_l0.iter().all(|x| *x == 0.0));
}

#[test]
fn latent_background_columns_equal_per_column_encode() {
    let v = random_matrix(12, 4, 10);
    let bg = BackgroundMatrix::from_parts(v, DVector::zeros(12)).unwrap();
    let codec = NeuralCodec::new(vec![12, 6, 3], 5).unwrap();
    let v_l = latent_background(&codec, &bg).unwrap();
    for j in 0..4 {
        let z = codec.encode(bg.column(j)).unwrap();
        for i in 0..3 {
            assert_eq!(v_l[(i, j)].to_bits(), z[i].to_bits());
        }
    }
}

#[test]
fn latent_misfit_is_the_encoded_observation() {
    let v = random_matrix(16, 4, 20);
    let bg = BackgroundMatrix::from_parts(v, DVector::zeros(16)).unwrap();
    let codec = make_linear_codec(&compute_svd(&bg).unwrap(), 3).unwrap();

    let zero_obs = ObservationSet::new(
        ObservationOperator::identity(16),
        vec![0.0; 16],
        0.1,
    )
    .unwrap();
    assert!(latent_misfit(&codec, &zero_obs).unwrap().iter().all(|v| *v == 0.0));

    let truth = unit_field(16, 21);
    let obs = build_observations(&truth, 16, 0.1, false, 22).unwrap();
    let d_l = latent_misfit(&codec, &obs).unwrap();
    let direct = codec.basis().tr_mul(&DVector::from_column_slice(&obs.values));
    for i in 0..3 {
        assert_abs_diff_eq!(d_l[i], direct[i], epsilon = 1e-12);
    }

    let sub = build_observations(&truth, 5, 0.1, false, 23).unwrap();
    assert!(matches!(latent_misfit(&codec, &sub), Err(AssimError::NonIdentityOperator)));
}

#[test]
fn cost_matches_zero_weight_example() {
    // |d|^2 = 2 with sigma = 1 gives J(0) = 1.
    let g = DMatrix::from_row_slice(2, 1, &[1.0, 1.0]);
    let p = QuadraticProblem::new(&g, vec![1.0, 1.0], 1.0).unwrap();
    let (j, grad) = p.cost_grad(&[0.0]);
    assert_abs_diff_eq!(j, 1.0, epsilon = 1e-15);
    // grad = -G^T d = -2.
    assert_abs_diff_eq!(grad[0], -2.0, epsilon = 1e-15);

    let p0 = QuadraticProblem::new(&g, vec![0.0, 0.0], 1.0).unwrap();
    let (j0, grad0) = p0.cost_grad(&[0.0]);
    assert_eq!(j0, 0.0);
    assert!(grad0.iter().all(|v| *v == 0.0));
}

#[test]
fn gradient_matches_central_finite_differences() {
    for seed in 0..5u64 {
        let g = random_matrix(12, 5, 100 + seed);
        let mut rng = crate::rng::stream(200 + seed);
        let d: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let sigma = if seed % 2 == 0 { 1.0 } else { 0.005 };
        let p = QuadraticProblem::new(&g, d, sigma).unwrap();
        let w: Vec<f64> = (0..5).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let (_, grad) = p.cost_grad(&w);
        let h = 1e-6;
        for i in 0..5 {
            let mut wp = w.clone();
            wp[i] += h;
            let (fp, _) = p.cost_grad(&wp);
            wp[i] -= 2.0 * h;
            let (fm, _) = p.cost_grad(&wp);
            let fd = (fp - fm) / (2.0 * h);
            let denom = (grad[i].abs() + fd.abs()).max(1.0);
            assert!(
                (grad[i] - fd).abs() / denom <= 1e-6,
                "component {i}: analytic {} vs fd {fd}",
                grad[i]
            );
        }
    }
}

#[test]
fn closed_form_zero_misfit_gives_zero_weights() {
    let g = random_matrix(8, 3, 31);
    let p = QuadraticProblem::new(&g, vec![0.0; 8], 0.5).unwrap();
    let w = solve_closed_form(&p).unwrap();
    assert!(w.iter().all(|v| *v == 0.0));
}

#[test]
fn closed_form_scalar_case() {
    // H = 1, V = 2, sigma = 1, d = 4: A = 4, b = 8, w = 8/5 = 1.6.
    let g = DMatrix::from_row_slice(1, 1, &[2.0]);
    let p = QuadraticProblem::new(&g, vec![4.0], 1.0).unwrap();
    assert_abs_diff_eq!(p.matrix_a()[(0, 0)], 4.0, epsilon = 1e-15);
    assert_abs_diff_eq!(p.vector_b()[0], 8.0, epsilon = 1e-15);
    let w = solve_closed_form(&p).unwrap();
    assert_abs_diff_eq!(w[0], 1.6, epsilon = 1e-12);
}

#[test]
fn closed_form_solution_is_stationary() {
    for seed in 0..5u64 {
        let g = random_matrix(20, 6, 300 + seed);
        let mut rng = crate::rng::stream(400 + seed);
        let d: Vec<f64> = (0..20).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let p = QuadraticProblem::new(&g, d, 0.05).unwrap();
        let w = solve_closed_form(&p).unwrap();
        let (_, grad) = p.cost_grad(&w);
        let b_norm = p.vector_b().norm();
        let gmax = grad.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        assert!(gmax <= 1e-9 * (1.0 + b_norm), "gmax {gmax} b {b_norm}");
    }
}

#[test]
fn lbfgs_agrees_with_closed_form_on_quadratics() {
    for seed in 0..10u64 {
        let g = random_matrix(15, 4, 500 + seed);
        let mut rng = crate::rng::stream(600 + seed);
        let d: Vec<f64> = (0..15).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let p = QuadraticProblem::new(&g, d, 0.1).unwrap();
        let w_cf = solve_closed_form(&p).unwrap();
        let (w_lb, diag) =
            minimize_lbfgs(|w| p.cost_grad(w), vec![0.0; 4], &LbfgsOptions::default());
        assert!(diag.converged, "seed {seed}: {diag:?}");
        let scale = 1.0 + w_cf.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        for i in 0..4 {
            assert!(
                (w_cf[i] - w_lb[i]).abs() <= 1e-6 * scale,
                "seed {seed} component {i}: {} vs {}",
                w_cf[i],
                w_lb[i]
            );
        }
    }
}

#[test]
fn restore_mono_matches_dense_multiply_and_is_linear() {
    let v = random_matrix(14, 4, 71);
    let bg = BackgroundMatrix::from_parts(v, DVector::zeros(14)).unwrap();
    let basis = truncate(compute_svd(&bg).unwrap(), 3).unwrap();

    assert!(restore_mono(&basis, &[0.0; 4]).unwrap().iter().all(|v| *v == 0.0));

    let e1 = [1.0, 0.0, 0.0, 0.0];
    let x = restore_mono(&basis, &e1).unwrap();
    let dense = reconstruct_vtau(&basis);
    for i in 0..14 {
        assert_abs_diff_eq!(x[i], dense[(i, 0)], epsilon = 1e-12);
    }

    let w = [0.4, -0.3, 1.1, 0.2];
    let x1 = restore_mono(&basis, &w).unwrap();
    let w2: Vec<f64> = w.iter().map(|v| 2.0 * v).collect();
    let x2 = restore_mono(&basis, &w2).unwrap();
    for i in 0..14 {
        assert_abs_diff_eq!(x2[i], 2.0 * x1[i], epsilon = 1e-12);
    }
}

#[test]
fn restore_bi_matches_staged_computation() {
    let v = random_matrix(16, 5, 81);
    let bg = BackgroundMatrix::from_parts(v.clone(), DVector::zeros(16)).unwrap();

    // Linear codec: decode(V_l w) must equal Q (V_l w) by dense multiply.
    let codec = make_linear_codec(&compute_svd(&bg).unwrap(), 4).unwrap();
    let v_l = latent_background(&codec, &bg).unwrap();
    assert!(restore_bi(&codec, &v_l, &[0.0; 5]).unwrap().iter().all(|v| *v == 0.0));
    let w = [0.2, -0.7, 0.3, 0.9, -0.1];
    let x = restore_bi(&codec, &v_l, &w).unwrap();
    let dense = codec.basis() * (&v_l * DVector::from_column_slice(&w));
    for i in 0..16 {
        assert_abs_diff_eq!(x[i], dense[i], epsilon = 1e-12);
    }

    // Neural codec: equals decode of an independently assembled z.
    let neural = NeuralCodec::new(vec![16, 8, 4], 3).unwrap();
    let v_l = latent_background(&neural, &bg).unwrap();
    let x = restore_bi(&neural, &v_l, &w).unwrap();
    let mut z = vec![0.0; 4];
    for (j, wj) in w.iter().enumerate() {
        for i in 0..4 {
            z[i] += v_l[(i, j)] * wj;
        }
    }
    let expected = neural.decode(&z).unwrap();
    for i in 0..16 {
        assert_abs_diff_eq!(x[i], expected[i], epsilon = 1e-12);
    }
}

/// Full desk-size problem in centered-normalized coordinates.
struct Fixture {
    grid: Grid3,
    stats: crate::field::NormStats,
    bg: BackgroundMatrix,
    basis: TruncatedBasis,
    truth_centered: Vec<StateField>,
}

fn fixture(seed: u64, tau: usize) -> Fixture {
    let grid = Grid3::new(5, 4, 2).unwrap();
    let series = generate_synthetic(
        &SynthConfig::new(grid, 20, 5, 0.9, 0.3, 1.5).unwrap(),
        seed,
    )
    .unwrap();
    let (train, test) = split_series(&series, 0.8).unwrap();
    let stats = compute_norm_stats(&train, NormMode::PerLocation).unwrap();
    let norm_train = FieldSeries::new(
        grid,
        train.steps().iter().map(|s| apply_normalization(s, &stats).unwrap()).collect(),
    )
    .unwrap();
    let bg = build_background_matrix(&norm_train).unwrap();
    let mean_vec: Vec<f64> = bg.mean().iter().copied().collect();
    let norm_test = FieldSeries::new(
        grid,
        test.steps().iter().map(|s| apply_normalization(s, &stats).unwrap()).collect(),
    )
    .unwrap();
    let centered = mean_center(&norm_test, &mean_vec).unwrap();
    let mean = bg.mean().clone();
    let basis = truncate(compute_svd(&bg).unwrap(), tau).unwrap().with_mean(mean).unwrap();
    Fixture { grid, stats, bg, basis, truth_centered: centered.steps().to_vec() }
}

#[test]
fn zero_misfit_returns_the_background_exactly() {
    let fx = fixture(1, 16);
    let obs = ObservationSet::new(
        ObservationOperator::identity(fx.grid.n()),
        vec![0.0; fx.grid.n()],
        0.005,
    )
    .unwrap();
    let sol = assimilate_mono(&fx.basis, &fx.stats, fx.grid, &obs, &SolveOptions::default()).unwrap();
    assert!(sol.weights.iter().all(|w| *w == 0.0));
    assert_eq!(sol.iterations, 0);
    let background = invert_normalization(
        &StateField::new(fx.grid, fx.basis.mean().iter().copied().collect()).unwrap(),
        &fx.stats,
    )
    .unwrap();
    assert_eq!(sol.x_da, background);
}

#[test]
fn optimal_cost_beats_prior_cost() {
    // J(w_DA) <= J(0) on every step; the centered ensemble makes the
    // Hessian badly conditioned, so the iteration cap may bite and the
    // converged flag is not asserted here.
    let fx = fixture(2, 16);
    let opts = SolveOptions::default();
    for (i, truth) in fx.truth_centered.iter().enumerate() {
        let obs = build_observations(truth, fx.grid.n(), 0.005, false, 900 + i as u64).unwrap();
        let sol = assimilate_mono(&fx.basis, &fx.stats, fx.grid, &obs, &opts).unwrap();
        let first = sol.cost_history.first().unwrap();
        let last = sol.cost_history.last().unwrap();
        assert!(last < first, "step {i}: J went {first} -> {last}");
        for pair in sol.cost_history.windows(2) {
            assert!(pair[1] <= pair[0] + 1e-12 * pair[0].abs().max(1.0));
        }
    }
}

#[test]
fn mono_and_bi_agree_under_the_equivalence_conditions() {
    // Full-column-rank V, identity H, LinearCodec with m = S, equal sigmas:
    // the two pipelines must return the same weights and states.
    let n = 40;
    let s = 6;
    let grid = Grid3::new(n, 1, 1).unwrap();
    let stats = crate::field::NormStats::unit(NormMode::PerLocation, n);
    let v = random_matrix(n, s, 7);
    let bg = BackgroundMatrix::from_parts(v, DVector::zeros(n)).unwrap();
    let factors = compute_svd(&bg).unwrap();
    let codec = make_linear_codec(&factors, s).unwrap();
    let basis = truncate(factors, s).unwrap();

    let mut rng = crate::rng::stream(17);
    let truth =
        StateField::new(grid, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let obs = build_observations(&truth, n, 0.005, false, 18).unwrap();
    let opts = SolveOptions::default();

    let mono = assimilate_mono(&basis, &stats, grid, &obs, &opts).unwrap();
    let bi = assimilate_bi(&codec, &bg, &stats, grid, &obs, Some(0.005), &opts).unwrap();

    let wdiff = mono
        .weights
        .iter()
        .zip(&bi.weights)
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    assert!(wdiff <= 1e-8, "weight difference {wdiff}");

    let num: f64 = mono
        .x_da
        .values()
        .iter()
        .zip(bi.x_da.values())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let den = mono.x_da.values().iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!(num / den.max(1e-30) <= 1e-6, "state difference {}", num / den);
}

#[test]
fn mono_context_rejects_mismatched_operator() {
    let fx = fixture(3, 8);
    let truth = &fx.truth_centered[0];
    let obs_a = build_observations(truth, 10, 0.01, false, 1).unwrap();
    let obs_b = build_observations(truth, 10, 0.01, false, 2).unwrap();
    let ctx =
        MonoContext::new(&fx.basis, &fx.stats, fx.grid, obs_a.operator.clone()).unwrap();
    assert!(matches!(ctx.assimilate(&obs_b, &SolveOptions::default()), Err(AssimError::OperatorMismatch)));
}

#[test]
fn closed_form_pipeline_matches_lbfgs_pipeline() {
    // Full-column-rank ensemble keeps the Hessian well conditioned, the
    // regime where the minimizer must reach the closed-form solution.
    let n = 48;
    let s = 8;
    let grid = Grid3::new(n, 1, 1).unwrap();
    let stats = crate::field::NormStats::unit(NormMode::PerLocation, n);
    let v = random_matrix(n, s, 44);
    let bg = BackgroundMatrix::from_parts(v, DVector::zeros(n)).unwrap();
    let basis = truncate(compute_svd(&bg).unwrap(), s).unwrap();

    let mut rng = crate::rng::stream(45);
    let truth =
        StateField::new(grid, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let obs = build_observations(&truth, n, 0.005, false, 77).unwrap();
    let lbfgs = assimilate_mono(&basis, &stats, grid, &obs, &SolveOptions::default()).unwrap();
    assert!(lbfgs.converged, "{:?}", lbfgs.grad_norm_history.last());
    let closed = assimilate_mono(
        &basis,
        &stats,
        grid,
        &obs,
        &SolveOptions { solver: SolverKind::ClosedForm, ..Default::default() },
    )
    .unwrap();
    let scale = 1.0 + closed.weights.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    for (a, b) in lbfgs.weights.iter().zip(&closed.weights) {
        assert!((a - b).abs() <= 1e-6 * scale);
    }
}

#[test]
fn solution_times_are_additive() {
    let fx = fixture(5, 16);
    let truth = &fx.truth_centered[0];
    let obs = build_observations(truth, fx.grid.n(), 0.005, false, 5).unwrap();
    let sol = assimilate_mono(&fx.basis, &fx.stats, fx.grid, &obs, &SolveOptions::default()).unwrap();
    assert!(sol.minimize_s >= 0.0 && sol.restore_s >= 0.0);
    assert!(sol.minimize_s + sol.restore_s <= sol.total_s + 1e-6);
}

#[test]
fn hessian_condition_is_at_least_one() {
    let g = random_matrix(10, 4, 90);
    let p = QuadraticProblem::new(&g, vec![0.1; 10], 0.5).unwrap();
    assert!(p.hessian_condition() >= 1.0);
}
