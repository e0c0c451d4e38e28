use approx::assert_abs_diff_eq;
use difkit::irt::*;
use difkit::sim::{generate, SimScenario};
use difkit::{ItemSpec, ResponseMatrix};
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn two_group_mixed(n: usize, seed: u64) -> (SimScenario, ResponseMatrix) {
    let sc = SimScenario::panel(8, SimScenario::groups(n, &[0.0, -0.4]), 3, seed);
    let data = generate(&sc, 0);
    (sc, data)
}

fn phi(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Trapezoid rule on [-10, 10] for a person's marginal likelihood.
fn dense_marginal(row: &[Option<bool>], items: &[ItemParams], dist: GroupDist, n: usize) -> (f64, f64) {
    let (lo, hi) = (-10.0, 10.0);
    let h = (hi - lo) / (n - 1) as f64;
    let (mut z, mut m1) = (0.0, 0.0);
    for k in 0..n {
        let x = lo + h * k as f64;
        let theta = dist.mean + dist.sd * x;
        let mut f = phi(x);
        for (cell, it) in row.iter().zip(items) {
            if let Some(y) = cell {
                let p = it.prob(theta);
                f *= if *y { p } else { 1.0 - p };
            }
        }
        let w = if k == 0 || k == n - 1 { 0.5 * h } else { h };
        z += w * f;
        m1 += w * f * theta;
    }
    (z, m1 / z)
}

#[test]
fn gradient_matches_central_differences() {
    let (sc, data) = two_group_mixed(150, 3);
    let specs = sc.item_specs();
    let plan = ConstraintPlan::anchored(8, 2, &[1, 2]);
    let layout = ParamLayout::new(&specs, &plan);
    let quad = Quadrature::default();
    let base = ModelState {
        items: (0..8)
            .map(|j| vec![sc.true_params(j, 0), sc.true_params(j, 1)])
            .collect(),
        dists: vec![GroupDist::STANDARD, GroupDist::new(-0.4, 1.0)],
    };
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut worst: f64 = 0.0;
    for _ in 0..25 {
        let mut state = base.clone();
        let mut v = layout.pack(&state);
        for x in v.iter_mut() {
            *x += rng.random_range(-0.3..0.3);
        }
        layout.unpack(&v, &mut state);
        let grad = loglik_gradient(&data, &specs, &plan, &state, &quad).unwrap();
        for k in 0..v.len() {
            let h = 1e-5 * v[k].abs().max(1.0);
            let mut plus = v.clone();
            let mut minus = v.clone();
            plus[k] += h;
            minus[k] -= h;
            let (mut sp, mut sm) = (state.clone(), state.clone());
            layout.unpack(&plus, &mut sp);
            layout.unpack(&minus, &mut sm);
            let fp = penalized_loglik(&data, &specs, &plan, &sp, &quad).unwrap();
            let fm = penalized_loglik(&data, &specs, &plan, &sm, &quad).unwrap();
            let fd = (fp - fm) / (2.0 * h);
            let rel = (grad[k] - fd).abs() / fd.abs().max(1.0);
            worst = worst.max(rel);
        }
    }
    assert!(worst < 1e-5, "worst relative gradient error {worst:e}");
}

#[test]
fn em_is_monotone() {
    let (sc, data) = two_group_mixed(300, 5);
    let specs = sc.item_specs();
    for (plan, accelerate) in [
        (ConstraintPlan::all_equal(8, 2), true),
        (ConstraintPlan::anchored(8, 2, &[4]), true),
        (ConstraintPlan::anchored(8, 2, &[4]), false),
    ] {
        let opts = FitOptions {
            accelerate,
            ..FitOptions::default()
        };
        let fit = fit_mml_em(&data, &specs, &plan, &opts).unwrap();
        for w in fit.loglik_trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-9, "loglik fell from {} to {}", w[0], w[1]);
        }
        assert!(fit.converged);
    }
}

#[test]
fn duplicated_group_reproduces_single_group_fit() {
    let sc = SimScenario::panel(10, SimScenario::groups(400, &[0.0]), 0, 8);
    let single = generate(&sc, 0);
    let specs = sc.item_specs();
    let opts = FitOptions {
        tol: 1e-6,
        ..FitOptions::default()
    };
    let one = fit_mml_em(&single, &specs, &ConstraintPlan::all_equal(10, 1), &opts).unwrap();

    let n = single.n_persons();
    let mut cells = Vec::new();
    for _ in 0..2 {
        for p in 0..n {
            cells.extend_from_slice(single.row(p));
        }
    }
    let doubled = ResponseMatrix::new(
        single.item_ids().to_vec(),
        (0..2 * n).map(|p| format!("p{p}")).collect(),
        vec!["A".into(), "B".into()],
        (0..2 * n).map(|p| p / n).collect(),
        cells,
    )
    .unwrap();
    let plan = ConstraintPlan {
        items: vec![[Sharing::EqualAcrossGroups; 3]; 10],
        dists: vec![DistPlan::Fixed(GroupDist::STANDARD); 2],
    };
    let two = fit_mml_em(&doubled, &specs, &plan, &opts).unwrap();
    for j in 0..10 {
        assert_abs_diff_eq!(one.params(j, 0).slope, two.params(j, 1).slope, epsilon = 1e-6);
        assert_abs_diff_eq!(one.params(j, 0).intercept, two.params(j, 0).intercept, epsilon = 1e-6);
    }
}

#[test]
fn marginal_loglik_matches_dense_grid() {
    let items = vec![ItemParams::two_pl(1.3, -0.2), ItemParams::three_pl(0.9, 0.4, -1.2)];
    let dists = vec![GroupDist::STANDARD, GroupDist::new(0.5, 1.3)];
    let data = ResponseMatrix::new(
        vec!["A".into(), "B".into()],
        vec!["p1".into(), "p2".into()],
        vec!["R".into(), "F".into()],
        vec![0, 1],
        vec![Some(true), Some(false), Some(false), Some(true)],
    )
    .unwrap();
    let state = ModelState::shared(&items, dists.clone());
    let ll = marginal_loglik(&data, &state, &Quadrature::default());
    let oracle: f64 = (0..2)
        .map(|p| dense_marginal(data.row(p), &items, dists[data.group_of(p)], 1001).0.ln())
        .sum();
    assert_abs_diff_eq!(ll, oracle, epsilon = 1e-6);
}

#[test]
fn single_constant_item_gives_log_half() {
    let data = ResponseMatrix::new(
        vec!["A".into()],
        vec!["p".into(), "q".into()],
        vec!["R".into()],
        vec![0, 0],
        vec![Some(true), None],
    )
    .unwrap();
    let state = ModelState::shared(&[ItemParams::two_pl(1e-9, 0.0)], vec![GroupDist::STANDARD]);
    assert_abs_diff_eq!(marginal_loglik(&data, &state, &Quadrature::default()), 0.5f64.ln(), epsilon = 1e-9);
}

#[test]
fn quadrature_density_is_stable() {
    let (sc, data) = two_group_mixed(200, 12);
    let state = ModelState {
        items: (0..8).map(|j| vec![sc.true_params(j, 0); 2]).collect(),
        dists: sc.dists(),
    };
    let a = marginal_loglik(&data, &state, &Quadrature::equally_spaced(49, -6.0, 6.0));
    let b = marginal_loglik(&data, &state, &Quadrature::equally_spaced(101, -6.0, 6.0));
    assert!((a - b).abs() < 1e-3, "{a} vs {b}");
}

fn fitted_two_group() -> (ResponseMatrix, FitResult) {
    let (sc, data) = two_group_mixed(300, 21);
    let fit = fit_mml_em(&data, &sc.item_specs(), &ConstraintPlan::all_equal(8, 2), &FitOptions::default()).unwrap();
    (data, fit)
}

#[test]
fn eap_matches_dense_grid_and_prior_for_empty_rows() {
    let (data, fit) = fitted_two_group();
    let mut cells = Vec::new();
    let mut groups = Vec::new();
    for p in [0, 1, 400, 450] {
        cells.extend_from_slice(data.row(p));
        groups.push(data.group_of(p));
    }
    cells.extend(vec![None; 8]);
    groups.push(1);
    let small = ResponseMatrix::new(
        data.item_ids().to_vec(),
        (0..5).map(|p| format!("p{p}")).collect(),
        data.group_names().to_vec(),
        groups,
        cells,
    )
    .unwrap();
    let scores = eap_scores(&small, &fit);
    for p in 0..4 {
        let g = small.group_of(p);
        let items: Vec<ItemParams> = (0..8).map(|j| *fit.params(j, g)).collect();
        let (_, mean) = dense_marginal(small.row(p), &items, fit.dists()[g], 2001);
        assert_abs_diff_eq!(scores[p].0, mean, epsilon = 1e-5);
    }
    assert_eq!(scores[4], (fit.dists()[1].mean, fit.dists()[1].sd));
}

#[test]
fn eap_is_antisymmetric_for_complementary_patterns() {
    let specs: Vec<ItemSpec> = (0..4).map(|j| ItemSpec::two_pl(format!("I{j}"))).collect();
    let data = ResponseMatrix::new(
        specs.iter().map(|s| s.id.clone()).collect(),
        vec!["x".into(), "y".into(), "z".into(), "w".into()],
        vec!["R".into()],
        vec![0; 4],
        [1, 1, 0, 1, 0, 0, 1, 0, 0, 1, 0, 1, 1, 0, 1, 0]
            .iter()
            .map(|&v| Some(v == 1))
            .collect(),
    )
    .unwrap();
    let plan = ConstraintPlan::all_equal(4, 1);
    let mut fit = fit_mml_em(&data, &specs, &plan, &FitOptions::default()).unwrap();
    fit.state = ModelState::shared(&[ItemParams::two_pl(1.2, 0.0); 4], vec![GroupDist::STANDARD]);
    let s = eap_scores(&data, &fit);
    assert_abs_diff_eq!(s[0].0, -s[1].0, epsilon = 1e-9);
    assert_abs_diff_eq!(s[2].0, -s[3].0, epsilon = 1e-9);
}

#[test]
fn icc_properties() {
    let (data, fit) = fitted_two_group();
    let grid = default_grid();
    assert_eq!(grid.len(), 81);
    let rows = icc_table(&fit, data.group_names(), &grid);
    assert_eq!(rows.len(), 8 * 2 * 81);
    for chunk in rows.chunks(81) {
        for w in chunk.windows(2) {
            assert!(w[1].prob >= w[0].prob);
        }
    }
    // Constrained items draw the same curve in both groups.
    for (a, b) in rows[..81].iter().zip(&rows[81..162]) {
        assert_eq!(a.prob, b.prob);
    }
    let steep = ItemParams::three_pl(2.0, -7.0, (0.25f64 / 0.75).ln());
    assert_abs_diff_eq!(irf(-4.0, &steep), 0.25, epsilon = 1e-6);
}

#[test]
fn refit_from_difficulty_start_reaches_same_optimum() {
    let (sc, data) = two_group_mixed(300, 31);
    let specs = sc.item_specs();
    let plan = ConstraintPlan::all_equal(8, 2);
    let opts = FitOptions {
        tol: 1e-7,
        ..FitOptions::default()
    };
    let fit = fit_mml_em(&data, &specs, &plan, &opts).unwrap();
    let mut start = fit.state.clone();
    for row in start.items.iter_mut() {
        for p in row.iter_mut() {
            let g = p.logit_guess.map(|_| p.guess());
            *p = ItemParams::from_difficulty(p.slope * 1.05, p.difficulty() + 0.05, g);
        }
    }
    let refit = fit_mml_em(&data, &specs, &plan, &FitOptions { start: Some(start), ..opts }).unwrap();
    assert_abs_diff_eq!(fit.loglik, refit.loglik, epsilon = 1e-6);
}

#[test]
fn covariance_is_symmetric_psd() {
    let (data, fit) = fitted_two_group();
    let cov = param_covariance(&data, &fit, CovarianceMethod::ObservedInfoFD).unwrap();
    assert_eq!(cov, cov.transpose());
    let eig = cov.clone().symmetric_eigen();
    assert!(eig.eigenvalues.min() >= -1e-8);
}

#[test]
fn single_item_model_is_not_identified() {
    let sc = SimScenario::panel(1, SimScenario::groups(3000, &[0.0]), 0, 4);
    let data = generate(&sc, 0);
    let specs = sc.item_specs();
    let plan = ConstraintPlan::all_equal(1, 1);
    let opts = FitOptions {
        max_cycles: 50,
        ..FitOptions::default()
    };
    let fit = match fit_mml_em(&data, &specs, &plan, &opts) {
        Ok(f) => f,
        Err(difkit::Error::NonConvergence { fit, .. }) => *fit,
        Err(e) => panic!("{e}"),
    };
    let info = observed_information(&data, &fit).unwrap();
    let eig = info.symmetric_eigen();
    let ratio = eig.eigenvalues.max() / eig.eigenvalues.min().abs().max(1e-300);
    assert!(ratio > 1e4, "one-item information should be near singular, ratio {ratio}");
}

#[test]
fn standard_errors_track_sampling_variability() {
    // Empirical spread of slope estimates over replications against the mean
    // model-based standard error; then the same at double sample size.
    let spread = |n: usize| {
        let sc = SimScenario::panel(10, SimScenario::groups(n, &[0.0]), 0, 77);
        let specs = sc.item_specs();
        let plan = ConstraintPlan::all_equal(10, 1);
        let reps = 40;
        let mut est = vec![Vec::new(); 10];
        let mut var = vec![0.0; 10];
        for r in 0..reps {
            let data = generate(&sc, r);
            let mut fit = fit_mml_em(&data, &specs, &plan, &FitOptions::default()).unwrap();
            attach_covariance(&data, &mut fit, CovarianceMethod::ObservedInfoFD).unwrap();
            for j in 0..10 {
                est[j].push(fit.params(j, 0).slope);
                var[j] += fit.standard_error(j, 0, ParamKind::Slope).unwrap().powi(2) / reps as f64;
            }
        }
        let emp: Vec<f64> = est
            .iter()
            .map(|e| {
                let m = e.iter().sum::<f64>() / e.len() as f64;
                e.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (e.len() - 1) as f64
            })
            .collect();
        (DVector::from_vec(emp), DVector::from_vec(var))
    };
    let (emp1, model1) = spread(500);
    let (_, model2) = spread(1000);
    let ratio_model = model2.sum() / model1.sum();
    assert!((0.4..=0.6).contains(&ratio_model), "variance ratio {ratio_model}");
    let calib = emp1.sum() / model1.sum();
    assert!((0.6..=1.6).contains(&calib), "empirical/model variance {calib}");
}

#[test]
fn sem_backend_agrees_with_observed_information() {
    let sc = SimScenario::panel(6, SimScenario::groups(400, &[0.0, 0.3]), 0, 17);
    let data = generate(&sc, 0);
    let specs = sc.item_specs();
    let opts = FitOptions {
        tol: 1e-8,
        ..FitOptions::default()
    };
    let fit = fit_mml_em(&data, &specs, &ConstraintPlan::anchored(6, 2, &[0, 1]), &opts).unwrap();
    let fd = param_covariance(&data, &fit, CovarianceMethod::ObservedInfoFD).unwrap();
    let sem = param_covariance(&data, &fit, CovarianceMethod::SEM).unwrap();
    for k in 0..fd.nrows() {
        let rel = (sem[(k, k)] - fd[(k, k)]).abs() / fd[(k, k)];
        assert!(rel < 0.05, "coordinate {k}: sem {} fd {}", sem[(k, k)], fd[(k, k)]);
    }
}

#[test]
fn degenerate_item_is_rejected() {
    let data = ResponseMatrix::new(
        vec!["A".into(), "B".into()],
        (0..4).map(|p| format!("p{p}")).collect(),
        vec!["R".into(), "F".into()],
        vec![0, 0, 1, 1],
        vec![Some(true), Some(true), Some(true), Some(false), Some(true), Some(true), Some(true), Some(false)],
    )
    .unwrap();
    let specs = vec![ItemSpec::two_pl("A"), ItemSpec::two_pl("B")];
    let err = fit_mml_em(&data, &specs, &ConstraintPlan::all_equal(2, 2), &FitOptions::default()).unwrap_err();
    assert!(matches!(err, difkit::Error::DegenerateItem(id) if id == "A"));
}

#[test]
fn non_convergence_carries_partial_fit() {
    let (sc, data) = two_group_mixed(200, 2);
    let opts = FitOptions {
        max_cycles: 2,
        ..FitOptions::default()
    };
    match fit_mml_em(&data, &sc.item_specs(), &ConstraintPlan::all_equal(8, 2), &opts) {
        Err(difkit::Error::NonConvergence { cycles, fit, .. }) => {
            assert_eq!(cycles, 2);
            assert!(!fit.converged);
        }
        other => panic!("expected non-convergence, got {:?}", other.map(|f| f.cycles)),
    }
}
