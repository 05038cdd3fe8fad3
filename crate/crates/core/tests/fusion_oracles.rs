use phenoscribe::fusion::loss::{mtl_loss, positive_weights, task_loss, total_loss, MtlLossConfig};
use phenoscribe::fusion::{FusionConfig, FusionError, FusionKind, FusionModel, Mode, VisitFeatures, BIO_FEATURES};
use phenoscribe::nn::gradcheck::check_params;
use phenoscribe::nn::{Graph, NnError, ParamStore, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const D: usize = 8;

fn tiny_cfg(mode: Mode) -> FusionConfig {
    FusionConfig { d_model: D, n_layers: 1, n_heads: 2, d_ff: 16, mode, epochs: 5, patience: 5, ..FusionConfig::default() }
}

fn random_visit(rng: &mut ChaCha8Rng, pid: &str, arm: u32, windows: usize) -> VisitFeatures {
    let bio = (0..windows * BIO_FEATURES).map(|_| rng.random_range(-1.0..1.0)).collect();
    VisitFeatures {
        patient_id: pid.into(),
        arm,
        e_lm: (0..D).map(|_| rng.random_range(-1.0..1.0)).collect(),
        bio: Tensor::new(windows, BIO_FEATURES, bio),
        labels: [rng.random_bool(0.5), rng.random_bool(0.3), rng.random_bool(0.4)],
    }
}

fn trajectory(seed: u64, n: usize) -> Vec<VisitFeatures> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|a| random_visit(&mut rng, "P000", a as u32 + 1, 2 + a % 2)).collect()
}

fn bce(y: bool, p: f64, w: f64) -> f64 {
    let p = p.clamp(1e-7, 1.0 - 1e-7);
    if y {
        -w * p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

fn model_loss(model: &FusionModel, store: &ParamStore, g: &mut Graph, traj: &[VisitFeatures], cfg: &MtlLossConfig) -> Result<phenoscribe::nn::Var, NnError> {
    let mut m = model.clone();
    m.store = store.clone();
    m.loss(g, traj, cfg).map_err(|e| match e {
        FusionError::Nn(e) => e,
        other => panic!("{other}"),
    })
}

#[test]
fn fusion_and_heads_pass_finite_difference_checks() {
    for (mode, kind) in [
        (Mode::Longitudinal, FusionKind::Embedding),
        (Mode::CrossSectional, FusionKind::Embedding),
        (Mode::Longitudinal, FusionKind::Probability),
    ] {
        let mut model = FusionModel::new(FusionConfig { fusion: kind, ..tiny_cfg(mode) }).unwrap();
        let traj = trajectory(4, 3);
        model.fit_normalizer(traj.iter().map(|v| &v.bio));
        // move the mixing weights off the symmetric point
        model.store.get_mut(model.fusion_logits_id()).value = Tensor::row(vec![0.3, -0.2]);
        let cfg = MtlLossConfig::new([2.0, 3.0, 1.5], 0.4);
        let mut store = model.store.clone();
        let rep = check_params(&mut store, 1e-4, 1e-6, |g, s| model_loss(&model, s, g, &traj, &cfg)).unwrap();
        assert!(rep.checked > 500);
        assert!(rep.max_rel_err < 1e-5, "{mode:?}/{kind:?}: {} at {}", rep.max_rel_err, rep.worst);
    }
}

#[test]
fn duplicated_windows_pool_to_the_single_window_embedding() {
    let cfg = FusionConfig { positional: false, ..tiny_cfg(Mode::CrossSectional) };
    let model = FusionModel::new(cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let row: Vec<f64> = (0..BIO_FEATURES).map(|_| rng.random_range(-1.0..1.0)).collect();
    let one = Tensor::from_rows(&[row.clone()]);
    let three = Tensor::from_rows(&[row.clone(), row.clone(), row]);
    let mut g = Graph::inference();
    let a = model.encode_biomarkers(&mut g, &one).unwrap();
    let b = model.encode_biomarkers(&mut g, &three).unwrap();
    assert_eq!(g.shape(a), [1, D]);
    for (x, y) in g.value(a).data().iter().zip(g.value(b).data()) {
        assert!((x - y).abs() < 1e-12);
    }
    assert!(matches!(model.encode_biomarkers(&mut g, &Tensor::zeros(0, BIO_FEATURES)), Err(FusionError::EmptySeries)));
    assert!(matches!(model.encode_biomarkers(&mut g, &Tensor::zeros(2, 5)), Err(FusionError::DimMismatch(BIO_FEATURES, 5))));
}

#[test]
fn fusion_is_a_softmax_weighted_sum() {
    let mut model = FusionModel::new(tiny_cfg(Mode::CrossSectional)).unwrap();
    let a: Vec<f64> = (0..D).map(|i| i as f64).collect();
    let b: Vec<f64> = (0..D).map(|i| 10.0 - i as f64).collect();
    for (logits, wa) in [([0.0, 0.0], 0.5), ([3f64.ln(), 0.0], 0.75), ([0.0, 3f64.ln()], 0.25)] {
        model.store.get_mut(model.fusion_logits_id()).value = Tensor::row(logits.to_vec());
        let w = model.fusion_weights();
        assert!((w[0] - wa).abs() < 1e-12 && (w[0] + w[1] - 1.0).abs() < 1e-15);
        let mut g = Graph::inference();
        let (va, vb) = (g.constant(Tensor::row(a.clone())), g.constant(Tensor::row(b.clone())));
        let f = model.fuse(&mut g, va, vb).unwrap();
        for (i, v) in g.value(f).data().iter().enumerate() {
            assert!((v - (wa * a[i] + (1.0 - wa) * b[i])).abs() < 1e-12);
        }
    }
    let mut g = Graph::inference();
    let va = g.constant(Tensor::row(vec![1.0; D]));
    let vb = g.constant(Tensor::row(vec![1.0; D + 1]));
    assert!(matches!(model.fuse(&mut g, va, vb), Err(FusionError::DimMismatch(D, 9))));
}

#[test]
fn longitudinal_state_flows_forward_only() {
    let model = FusionModel::new(tiny_cfg(Mode::Longitudinal)).unwrap();
    let traj = trajectory(2, 4);
    let base = model.predict(&traj).unwrap();
    let mut perturbed = traj.clone();
    perturbed[1].e_lm.iter_mut().for_each(|v| *v += 0.5);
    let p = model.predict(&perturbed).unwrap();
    assert_eq!(p[0], base[0]);
    for i in 1..4 {
        assert_ne!(p[i], base[i], "visit {i} sees the change");
    }

    let xs = FusionModel::new(tiny_cfg(Mode::CrossSectional)).unwrap();
    let base = xs.predict(&traj).unwrap();
    let p = xs.predict(&perturbed).unwrap();
    assert_eq!(p[0], base[0]);
    assert_ne!(p[1], base[1]);
    assert_eq!(p[2..], base[2..]);
}

#[test]
fn probability_fusion_mixes_per_task_outputs() {
    let model = FusionModel::new(FusionConfig { fusion: FusionKind::Probability, ..tiny_cfg(Mode::Longitudinal) }).unwrap();
    let traj = trajectory(5, 3);
    let p = model.predict(&traj).unwrap();
    assert_eq!(p.len(), 3);
    assert!(p.iter().flatten().all(|v| (0.0..=1.0).contains(v)));
    let mut bad = traj.clone();
    bad[0].e_lm.pop();
    assert!(matches!(model.predict(&bad), Err(FusionError::DimMismatch(_, _))));
}

#[test]
fn visits_must_be_in_increasing_arm_order() {
    let model = FusionModel::new(tiny_cfg(Mode::Longitudinal)).unwrap();
    let mut traj = trajectory(3, 3);
    traj.swap(0, 2);
    assert!(matches!(model.predict(&traj), Err(FusionError::UnsortedArms(p)) if p == "P000"));
    let mut dup = trajectory(3, 2);
    dup[1].arm = dup[0].arm;
    assert!(matches!(model.predict(&dup), Err(FusionError::UnsortedArms(_))));
}

#[test]
fn loss_matches_straight_line_formulas_on_random_tuples() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..1000 {
        let p: [f64; 3] = std::array::from_fn(|_| rng.random_range(1e-4..1.0 - 1e-4));
        let y: [bool; 3] = std::array::from_fn(|_| rng.random_bool(0.5));
        let w: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.1..10.0));
        let lambda = rng.random_range(0.0..2.0);
        for k in 0..3 {
            assert!((task_loss(y[k], p[k], w[k]) - bce(y[k], p[k], w[k])).abs() < 1e-12);
        }
        let expect = bce(y[0], p[0], w[0]) + lambda * (bce(y[1], p[1], w[1]) + bce(y[2], p[2], w[2]));
        let l = [0, 1, 2].map(|k| task_loss(y[k], p[k], w[k]));
        assert!((total_loss(l[0], l[1], l[2], lambda) - expect).abs() < 1e-12);
        let mut g = Graph::inference();
        let pv = p.map(|v| g.constant(Tensor::scalar(v)));
        let lv = mtl_loss(&mut g, pv, y, &MtlLossConfig::new(w, lambda));
        assert!((g.value(lv).item() - expect).abs() < 1e-12);
    }
    assert!((task_loss(true, 0.5, 2.0) - 2.0 * 2f64.ln()).abs() < 1e-12);
    assert_eq!(total_loss(1.5, 7.0, 9.0, 0.0), 1.5);
}

#[test]
fn zero_auxiliary_weight_gives_single_task_trunk_gradients() {
    let model = FusionModel::new(tiny_cfg(Mode::Longitudinal)).unwrap();
    let traj = trajectory(8, 3);
    let w = [2.0, 5.0, 0.5];
    let grads = |single: bool| -> Vec<Vec<f64>> {
        let mut store = model.store.clone();
        store.zero_grad();
        let mut g = Graph::new();
        let l = if single {
            let preds = model.predict_vars(&mut g, &traj).unwrap();
            let terms: Vec<_> = preds.iter().zip(&traj).map(|(p, v)| g.weighted_bce(p[0], f64::from(u8::from(v.labels[0])), w[0])).collect();
            let all = g.concat_rows(&terms);
            let s = g.sum(all);
            g.scale(s, 1.0 / traj.len() as f64)
        } else {
            model.loss(&mut g, &traj, &MtlLossConfig::new(w, 0.0)).unwrap()
        };
        g.backward(l).unwrap();
        g.accumulate_param_grads(&mut store);
        model.trunk_params().into_iter().map(|id| store.get(id).grad.clone()).collect()
    };
    let (mtl, single) = (grads(false), grads(true));
    let mut nonzero = 0;
    for (a, b) in mtl.iter().flatten().zip(single.iter().flatten()) {
        assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
        nonzero += usize::from(*a != 0.0);
    }
    assert!(nonzero > 100);
}

#[test]
fn positive_weights_balance_class_mass() {
    let labels = vec![[true, false, false], [false, false, true], [false, false, true], [true, false, false], [false, false, false]];
    let (w, single) = positive_weights(labels.iter());
    assert_eq!(w, [1.5, 1.0, 1.5]);
    assert_eq!(single, vec![phenoscribe::cohort::Task::SuicidalIdeation]);
    for k in [0, 2] {
        let pos = labels.iter().filter(|l| l[k]).count() as f64;
        let neg = labels.len() as f64 - pos;
        assert_eq!(w[k] * pos, neg);
    }
}

proptest! {
    #[test]
    fn weighted_positive_mass_equals_negative_mass(bits in proptest::collection::vec(any::<[bool; 3]>(), 1..60)) {
        let (w, single) = positive_weights(bits.iter());
        for k in 0..3 {
            let pos = bits.iter().filter(|l| l[k]).count() as f64;
            let neg = bits.len() as f64 - pos;
            if pos == 0.0 || neg == 0.0 {
                prop_assert_eq!(w[k], 1.0);
                prop_assert!(single.iter().any(|t| t.index() == k));
            } else {
                prop_assert!((w[k] * pos - neg).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn training_is_deterministic_and_keeps_normalizer_frozen() {
    let trajs: Vec<Vec<VisitFeatures>> = (0..6)
        .map(|i| {
            let mut t = trajectory(20 + i, 3);
            t.iter_mut().for_each(|v| v.patient_id = format!("P{i:03}"));
            t
        })
        .collect();
    let (train, val) = trajs.split_at(4);
    let run = || {
        let mut m = FusionModel::new(tiny_cfg(Mode::Longitudinal)).unwrap();
        let rep = m.train(train, val).unwrap();
        (m.store.checksum(""), m.store.checksum("bio_enc.norm"), rep)
    };
    let (a, norm_a, rep_a) = run();
    let (b, norm_b, rep_b) = run();
    assert_eq!(a, b);
    assert_eq!(rep_a, rep_b);
    assert_eq!(norm_a, norm_b);
    assert!(rep_a.epochs_run >= 1 && rep_a.best_epoch < rep_a.epochs_run);

    let mut m = FusionModel::new(tiny_cfg(Mode::Longitudinal)).unwrap();
    assert!(matches!(m.train(&[], val), Err(FusionError::EmptyCohort)));
    let normalizer = m.store.find("bio_enc.norm.mean").unwrap();
    assert!(m.store.get(normalizer).frozen);
}
