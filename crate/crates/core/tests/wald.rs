use approx::assert_relative_eq;
use difkit::sim::{generate, SimScenario};
use difkit::wald::*;
use difkit::ResponseMatrix;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_spd(p: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let a = DMatrix::from_fn(p, p, |_, _| rng.random_range(-1.0..1.0));
    &a * a.transpose() + DMatrix::identity(p, p) * 0.5
}

#[test]
fn q_is_invariant_to_row_transforms() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for (g, k) in [(2, 2), (3, 2), (4, 3), (6, 2)] {
        let p = g * k;
        let v = DVector::from_fn(p, |_, _| rng.random_range(-1.0..1.0));
        let sigma = random_spd(p, &mut rng);
        let c = build_contrasts(g, k, ContrastSubset::All).matrix;
        let (q, df) = wald_q(&v, &sigma, &c).unwrap();
        assert_eq!(df, (g - 1) * k);
        let a = DMatrix::from_fn(c.nrows(), c.nrows(), |i, j| {
            rng.random_range(-0.3..0.3) + if i == j { 2.0 } else { 0.0 }
        });
        let (q2, df2) = wald_q(&v, &sigma, &(a * &c)).unwrap();
        assert_eq!(df2, df);
        assert_relative_eq!(q, q2, max_relative = 1e-8);
    }
}

#[test]
fn q_ignores_common_shifts() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (g, k) = (3, 2);
    let v = DVector::from_fn(g * k, |_, _| rng.random_range(-1.0..1.0));
    let sigma = random_spd(g * k, &mut rng);
    let c = build_contrasts(g, k, ContrastSubset::All).matrix;
    let mut shifted = v.clone();
    for grp in 0..g {
        shifted[grp * k] += 0.7;
        shifted[grp * k + 1] -= 1.3;
    }
    let (q, _) = wald_q(&v, &sigma, &c).unwrap();
    let (q2, _) = wald_q(&shifted, &sigma, &c).unwrap();
    assert_relative_eq!(q, q2, max_relative = 1e-10);
}

fn duplicate_as_groups(data: &ResponseMatrix, copies: usize) -> ResponseMatrix {
    let n = data.n_persons();
    let mut cells = Vec::new();
    let mut group_of = Vec::new();
    let mut ids = Vec::new();
    for g in 0..copies {
        for p in 0..n {
            cells.extend_from_slice(data.row(p));
            group_of.push(g);
            ids.push(format!("{g}-{p}"));
        }
    }
    ResponseMatrix::new(
        data.item_ids().to_vec(),
        ids,
        (0..copies).map(|g| format!("C{g}")).collect(),
        group_of,
        cells,
    )
    .unwrap()
}

#[test]
fn identical_groups_are_not_flagged() {
    let sc = SimScenario::panel(10, SimScenario::groups(400, &[0.0]), 0, 8);
    let data = duplicate_as_groups(&generate(&sc, 0), 2);
    let out = run_wald2(&data, &sc.item_specs(), &WaldOptions::default()).unwrap();
    for r in &out.items {
        let all = r.all.unwrap();
        assert!(all.p > 0.99, "{}: Q = {} p = {}", r.item_id, all.q, all.p);
    }
    let d = &out.step1.state.dists[1];
    assert!(d.mean.abs() < 1e-3 && (d.sd - 1.0).abs() < 1e-3);
}

#[test]
fn swapping_focal_labels_keeps_statistics() {
    let sc = SimScenario::panel(10, SimScenario::groups(300, &[0.0, -0.3, 0.3]), 0, 12)
        .with_dif(2, 1, 0.6, 1.0);
    let data = generate(&sc, 0);
    let swapped = data.select_groups(&[0, 2, 1]).unwrap();
    let specs = sc.item_specs();
    let opts = WaldOptions::default();
    let a = run_wald_pipeline(&data, &specs, &AnchorChoice::Mp(1), &opts).unwrap();
    let b = run_wald_pipeline(&swapped, &specs, &AnchorChoice::Mp(1), &opts).unwrap();
    assert_eq!(a.anchors.anchors, b.anchors.anchors);
    for (x, y) in a.wald1.items.iter().zip(&b.wald1.items) {
        assert_eq!(x.is_anchor, y.is_anchor);
        if let (Some(sx), Some(sy)) = (x.all, y.all) {
            assert_relative_eq!(sx.q, sy.q, max_relative = 1e-2, epsilon = 1e-3);
        }
    }
}

#[test]
fn fixed_anchor_is_reported_as_anchor() {
    let sc = SimScenario::panel(8, SimScenario::groups(300, &[0.0, -0.2]), 0, 2);
    let data = generate(&sc, 1);
    let specs = sc.item_specs();
    let out = run_wald_pipeline(
        &data,
        &specs,
        &AnchorChoice::Fixed(vec!["I08".into()]),
        &WaldOptions::default(),
    )
    .unwrap();
    assert!(out.wald2.is_none());
    assert_eq!(out.anchors.anchors, vec![7]);
    let last = &out.wald1.items[7];
    assert!(last.is_anchor && last.all.is_none());
    assert!(out.wald1.items[..7].iter().all(|r| r.all.is_some()));
}

#[test]
fn unknown_anchor_is_rejected() {
    let sc = SimScenario::panel(4, SimScenario::groups(100, &[0.0, 0.0]), 0, 2);
    let data = generate(&sc, 0);
    let err = run_wald_pipeline(
        &data,
        &sc.item_specs(),
        &AnchorChoice::Fixed(vec!["nope".into()]),
        &WaldOptions::default(),
    );
    assert!(err.is_err());
}
