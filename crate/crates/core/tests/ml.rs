use pipewise_core::ml::cv::{cross_validate, stratified_folds};
use pipewise_core::ml::{accuracy, generic_names, train, ForestParams, ModelKind, ModelParams, SvmParams, TrainedModel, TreeParams};
use pipewise_core::rng::XorShift64Star;
use proptest::prelude::*;

/// Three Gaussian blobs in `d` dimensions; class means differ along the
/// first two axes only.
fn blobs(n_per_class: usize, d: usize, spread: f64, seed: u64) -> (Vec<Vec<f64>>, Vec<String>) {
    let mut rng = XorShift64Star::new(seed);
    let centres = [("bearing_fault", 2.0, 0.0), ("heating_fault", 0.0, 2.0), ("normal", 0.0, 0.0)];
    let (mut x, mut y) = (Vec::new(), Vec::new());
    for i in 0..n_per_class * 3 {
        let (label, a, b) = centres[i % 3];
        let mut row: Vec<f64> = (0..d).map(|_| rng.normal(0.0, spread)).collect();
        row[0] += a;
        row[1] += b;
        x.push(row);
        y.push(label.to_string());
    }
    (x, y)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn single_unbagged_tree_forest_is_the_tree(seed in any::<u64>(), d in 2usize..8, n in 5usize..40, spread in 0.3f64..2.0) {
        let (x, y) = blobs(n, d, spread, seed);
        let names = generic_names(d);
        let dt = train(&ModelParams::Dt(TreeParams { seed, ..Default::default() }), &x, &y, &names).unwrap();
        let rf = train(
            &ModelParams::Rf(ForestParams { n_trees: 1, bootstrap: false, features_per_split: Some(d), seed: seed ^ 1, ..Default::default() }),
            &x, &y, &names,
        ).unwrap();
        let (probe, _) = blobs(20, d, spread * 2.0, seed.wrapping_add(1));
        for row in x.iter().chain(&probe) {
            prop_assert_eq!(dt.predict_label(row), rf.predict_label(row));
        }
    }

    #[test]
    fn folds_are_stratified(seed in any::<u64>(), n in 2usize..30, k in 2usize..6) {
        let (x, y) = blobs(n, 2, 1.0, seed);
        let folds = stratified_folds(&x, &y, k, seed);
        for label in ["bearing_fault", "heating_fault", "normal"] {
            let mut sizes = vec![0usize; k];
            for (i, f) in folds.iter().enumerate() {
                if y[i] == label {
                    sizes[*f] += 1;
                }
            }
            let (lo, hi) = (sizes.iter().min().unwrap(), sizes.iter().max().unwrap());
            prop_assert!(hi - lo <= 1, "{label}: {sizes:?}");
        }
    }
}

#[test]
fn unbounded_tree_memorises_distinct_rows() {
    let (x, y) = blobs(40, 4, 1.5, 3);
    let dt = train(&ModelParams::default_for(ModelKind::Dt), &x, &y, &generic_names(4)).unwrap();
    assert_eq!(accuracy(&dt, &x, &y), 1.0);
}

#[test]
fn separable_blobs_are_learned_by_every_model() {
    let (x, y) = blobs(60, 5, 0.3, 11);
    let (tx, ty) = blobs(30, 5, 0.3, 12);
    for kind in [ModelKind::Dt, ModelKind::Rf, ModelKind::Svm] {
        let params = match kind {
            ModelKind::Svm => ModelParams::Svm(SvmParams { epochs: 200, ..Default::default() }),
            k => ModelParams::default_for(k),
        };
        let m = train(&params, &x, &y, &generic_names(5)).unwrap();
        let acc = accuracy(&m, &tx, &ty);
        assert!(acc >= 0.95, "{kind:?}: {acc}");
    }
}

#[test]
fn models_survive_serialisation() {
    let (x, y) = blobs(30, 3, 1.0, 5);
    let m = train(&ModelParams::default_for(ModelKind::Rf).with_seed(9), &x, &y, &generic_names(3)).unwrap();
    let back: TrainedModel = serde_json::from_str(&serde_json::to_string(&m).unwrap()).unwrap();
    assert_eq!(back, m);
    for row in &x {
        assert_eq!(back.scores(row), m.scores(row));
    }
}

#[test]
fn cross_validation_is_seeded() {
    let (x, y) = blobs(20, 3, 1.2, 8);
    let p = ModelParams::Rf(ForestParams { n_trees: 15, ..Default::default() });
    let a = cross_validate(&p, &x, &y, &generic_names(3), 5, 42).unwrap();
    let b = cross_validate(&p, &x, &y, &generic_names(3), 5, 42).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.fold_accuracies.len(), 5);
    assert!(cross_validate(&p, &x, &y, &generic_names(3), 1, 42).is_err());
}

#[test]
fn training_rejects_bad_input() {
    let names = generic_names(2);
    let p = ModelParams::default_for(ModelKind::Dt);
    assert!(train(&p, &[], &[], &names).is_err());
    assert!(train(&p, &[vec![1.0, f64::NAN]], &["a".into()], &names).is_err());
    assert!(train(&p, &[vec![1.0, 2.0], vec![1.0]], &["a".into(), "b".into()], &names).is_err());
    assert!(train(&p, &[vec![1.0, 2.0]], &["a".into()], &generic_names(3)).is_err());
}

#[test]
fn fold_assignment_ignores_row_order() {
    let (x, y) = blobs(25, 3, 1.0, 21);
    let params = ModelParams::Dt(TreeParams::default());
    let folds = stratified_folds(&x, &y, 5, 42);
    let before = cross_validate(&params, &x, &y, &generic_names(3), 5, 42).unwrap();

    let mut perm: Vec<usize> = (0..x.len()).collect();
    XorShift64Star::new(5).shuffle(&mut perm);
    let xs: Vec<Vec<f64>> = perm.iter().map(|&i| x[i].clone()).collect();
    let ys: Vec<String> = perm.iter().map(|&i| y[i].clone()).collect();
    let shuffled = stratified_folds(&xs, &ys, 5, 42);
    for (j, &i) in perm.iter().enumerate() {
        assert_eq!(shuffled[j], folds[i]);
    }
    assert_eq!(cross_validate(&params, &xs, &ys, &generic_names(3), 5, 42).unwrap(), before);
}

#[test]
fn reloaded_models_predict_identically_on_random_vectors() {
    let (x, y) = blobs(40, 6, 1.0, 13);
    let mut rng = XorShift64Star::new(77);
    let probes: Vec<Vec<f64>> = (0..1000).map(|_| (0..6).map(|_| rng.uniform(-4.0, 6.0)).collect()).collect();
    for kind in [ModelKind::Dt, ModelKind::Rf, ModelKind::Svm] {
        let m = train(&ModelParams::default_for(kind), &x, &y, &generic_names(6)).unwrap();
        let back: TrainedModel = serde_json::from_slice(&serde_json::to_vec(&m).unwrap()).unwrap();
        for p in &probes {
            assert_eq!(back.predict_label(p), m.predict_label(p));
            assert_eq!(back.scores(p), m.scores(p));
        }
    }
}
