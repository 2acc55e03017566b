//! Distillation and classification losses.

use fmla::losses::{
    cross_entropy_loss, kl_divergence, online_distill_loss, self_distill_loss, softmax,
    total_loss, LossBreakdown,
};
use fmla::model::{FmlaModel, ModelConfig, TrainBatch};
use fmla::train::{sample_step_masks, toy_gradcheck_config};
use fmla::{Error, Graph, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Scalar KL oracle for strictly positive distributions.
fn kl_oracle(p: &[f64], q: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..p.len() {
        s += p[i] * (p[i] / q[i]).ln();
    }
    s
}

fn random_simplex(k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let e: Vec<f64> = (0..k).map(|_| -rng.gen_range(1e-6f64..1.0).ln()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

#[test]
fn kl_examples() {
    assert_eq!(kl_divergence(&[0.5, 0.5], &[0.5, 0.5]).unwrap(), 0.0);
    let v = kl_divergence(&[0.75, 0.25], &[0.5, 0.5]).unwrap();
    assert!((v - 0.1308).abs() < 1e-4, "{v}");
    assert!((v - kl_oracle(&[0.75, 0.25], &[0.5, 0.5])).abs() < 1e-15);
    // Zero teacher mass contributes nothing.
    let v = kl_divergence(&[1.0, 0.0], &[0.25, 0.75]).unwrap();
    assert!((v - 4f64.ln()).abs() < 1e-15);
}

#[test]
fn kl_rejects_unnormalized_inputs() {
    for (p, q) in [
        (vec![0.5, 0.6], vec![0.5, 0.5]),
        (vec![0.5, 0.5], vec![0.2, 0.2]),
        (vec![1.5, -0.5], vec![0.5, 0.5]),
        (vec![0.5, 0.5], vec![1.0 / 3.0; 3]),
    ] {
        assert!(matches!(kl_divergence(&p, &q), Err(Error::Validation(_))), "{p:?} {q:?}");
    }
}

#[test]
fn self_distillation_examples() {
    let reg = vec![0.3, 0.3, 0.4];
    assert_eq!(self_distill_loss(&[reg.clone()], &reg, 1.0).unwrap(), 0.0);
    let rand = vec![
        vec![0.7, 0.2, 0.1],
        vec![0.2, 0.5, 0.3],
        vec![0.3, 0.2, 0.5],
    ];
    assert_eq!(self_distill_loss(&rand, &reg, 0.0).unwrap(), 0.0);
    let mean = [0.4, 0.3, 0.3];
    let want = 0.7 * kl_oracle(&mean, &reg);
    assert!((self_distill_loss(&rand, &reg, 0.7).unwrap() - want).abs() < 1e-14);
    assert!(matches!(self_distill_loss(&[], &reg, 1.0), Err(Error::Validation(_))));
}

#[test]
fn online_distillation_examples() {
    let p = [0.1, 0.6, 0.3];
    let q = [0.2, 0.2, 0.6];
    assert_eq!(online_distill_loss(&p, &p, 1.0).unwrap(), 0.0);
    let one = online_distill_loss(&p, &q, 1.0).unwrap();
    let two = online_distill_loss(&p, &q, 2.0).unwrap();
    assert!(one > 0.0);
    assert!((two - 2.0 * one).abs() < 1e-15);
}

#[test]
fn cross_entropy_examples() {
    let uniform = Tensor::zeros(&[3, 2]);
    let v = cross_entropy_loss(&uniform, &[0, 1, 0]).unwrap();
    assert!((v - 2f64.ln()).abs() < 1e-15);
    let confident = Tensor::from_rows(&[vec![50.0, -50.0]]);
    assert!(cross_entropy_loss(&confident, &[0]).unwrap() < 1e-40);
    let a = Tensor::from_rows(&[vec![0.3, -1.2]]);
    let b = Tensor::from_rows(&[vec![-1.2, 0.3]]);
    assert_eq!(
        cross_entropy_loss(&a, &[1]).unwrap(),
        cross_entropy_loss(&b, &[0]).unwrap()
    );
    match cross_entropy_loss(&uniform, &[0, 2, 0]) {
        Err(Error::Data(msg)) => assert!(msg.contains("sample 1"), "{msg}"),
        other => panic!("expected data error, got {other:?}"),
    }
}

#[test]
fn total_is_the_sum_of_parts() {
    let b = LossBreakdown::new(0.1, 0.2, 0.3, 1.0, 1.0, 3);
    assert!((b.total - 0.6).abs() < 1e-15);
    assert_eq!(total_loss(&b), b.total);
    assert_eq!(LossBreakdown::new(0.0, 0.0, 0.0, 0.0, 0.0, 3).total, 0.0);
    assert_eq!(LossBreakdown::new(0.0, 0.0, 0.45, 0.0, 0.0, 3).total, 0.45);
}

#[test]
fn graph_kl_matches_scalar_and_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let teacher: Vec<Vec<f64>> = (0..2).map(|_| random_simplex(4, &mut rng)).collect();
    let t = Tensor::from_rows(&teacher);
    let logits = Tensor::from_fn(&[2, 4], |_| rng.gen_range(-2.0..2.0));
    let mut g = Graph::new();
    let l = g.variable(logits.clone());
    let kl = g.kl_to_logits(&t, l).unwrap();
    let want: f64 = (0..2)
        .map(|b| kl_oracle(&teacher[b], &softmax(logits.row(b))))
        .sum::<f64>()
        / 2.0;
    assert!((g.value(kl).item() - want).abs() < 1e-12);

    let grads = g.backward(kl).unwrap();
    let gl = grads.get(l).unwrap();
    let h = 1e-6;
    for i in 0..8 {
        let f = |d: f64| {
            let mut z = logits.clone();
            z.data_mut()[i] += d;
            (0..2)
                .map(|b| kl_oracle(&teacher[b], &softmax(z.row(b))))
                .sum::<f64>()
                / 2.0
        };
        let fd = (f(h) - f(-h)) / (2.0 * h);
        assert!((gl.data()[i] - fd).abs() < 1e-8);
    }
}

fn step_config(alpha: f64, beta: f64, ratio: f64) -> ModelConfig {
    ModelConfig {
        alpha,
        beta,
        mask_ratio: ratio,
        ..toy_gradcheck_config()
    }
}

fn batch(cfg: &ModelConfig) -> (Tensor, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = Tensor::from_fn(&[3, cfg.seq_len], |_| rng.gen_range(-1.5..1.5));
    (x, vec![0, 1, 1])
}

/// Gradients of every parameter under `cfg`, plus the loss breakdown.
fn grads(model: &FmlaModel, cfg: &ModelConfig) -> (Vec<Tensor>, LossBreakdown) {
    let (x, labels) = batch(cfg);
    let masks = sample_step_masks(cfg, 3, 1, 0).unwrap();
    let mut g = Graph::new();
    let (vars, mv) = model.bind_variables(&mut g).unwrap();
    let step = model
        .forward_train(
            &mut g,
            &mv,
            &TrainBatch {
                x: &x,
                labels: &labels,
                random_masks: &masks.0,
                regular_masks: &masks.1,
                teachers: None,
            },
        )
        .unwrap();
    let gr = g.backward(step.loss).unwrap();
    let out = vars
        .iter()
        .map(|&v| gr.get(v).cloned().unwrap_or_else(|| Tensor::zeros(g.value(v).dims())))
        .collect();
    (out, step.breakdown)
}

fn live_breakdown(model: &FmlaModel) -> LossBreakdown {
    let cfg = model.config();
    let (x, labels) = batch(cfg);
    let masks = sample_step_masks(cfg, 3, 1, 0).unwrap();
    let mut g = Graph::new();
    let mv = model.bind_constants(&mut g).unwrap();
    model
        .forward_train(
            &mut g,
            &mv,
            &TrainBatch {
                x: &x,
                labels: &labels,
                random_masks: &masks.0,
                regular_masks: &masks.1,
                teachers: None,
            },
        )
        .unwrap()
        .breakdown
}

#[test]
fn online_teacher_is_detached_from_the_dcn_head() {
    let with = step_config(1.0, 0.0, 0.5);
    let without = step_config(0.0, 0.0, 0.5);
    let model = FmlaModel::new(with.clone()).unwrap();
    let model0 = FmlaModel::new(without.clone()).unwrap();
    assert_eq!(model.params(), model0.params());
    let (g1, b1) = grads(&model, &with);
    let (g0, b0) = grads(&model0, &without);
    assert!(b1.loss2 > 0.0 && b0.loss2 == 0.0);
    assert_eq!(b1.loss3, b0.loss3);

    for (i, spec) in model.specs().iter().enumerate() {
        let diff = g1[i].max_abs_diff(&g0[i]);
        if spec.name.starts_with("head.dcn") {
            assert!(diff < 1e-15, "{} picks up {diff} from the teacher", spec.name);
        }
        if spec.name.starts_with("head.cla") {
            assert!(diff > 1e-6, "{} gets no distillation gradient", spec.name);
        }
    }

    // The DCN head still moves the loss value through the teacher.
    let mut probe = model.clone();
    probe.param_mut("head.dcn.weight").unwrap().data_mut()[0] += 1e-3;
    let delta = live_breakdown(&probe).loss2 - live_breakdown(&model).loss2;
    assert!(delta.abs() > 1e-8, "loss2 unchanged: {delta}");
}

#[test]
fn self_distillation_teacher_is_detached() {
    // The ensemble teacher is built from passes that share every parameter
    // with the student. Its detachment shows up as a mismatch between the
    // analytic gradient of loss1 and a finite difference of the live loss1.
    let with = step_config(0.0, 1.0, 0.5);
    let without = step_config(0.0, 0.0, 0.5);
    let model = FmlaModel::new(with.clone()).unwrap();
    let (g1, b1) = grads(&model, &with);
    let (g0, _) = grads(&FmlaModel::new(without).unwrap(), &step_config(0.0, 0.0, 0.5));
    assert!(b1.loss1 > 0.0);
    let idx = model.specs().iter().position(|s| s.name == "head.cla.weight").unwrap();
    let analytic = g1[idx].data()[0] - g0[idx].data()[0];
    let h = 1e-5;
    let mut plus = model.clone();
    plus.param_mut("head.cla.weight").unwrap().data_mut()[0] += h;
    let mut minus = model.clone();
    minus.param_mut("head.cla.weight").unwrap().data_mut()[0] -= h;
    let live_fd = (live_breakdown(&plus).loss1 - live_breakdown(&minus).loss1) / (2.0 * h);
    assert!(
        (analytic - live_fd).abs() > 1e-6,
        "analytic {analytic} equals live {live_fd}"
    );
}

#[test]
fn plain_cross_entropy_when_everything_is_off() {
    let cfg = step_config(0.0, 0.0, 0.0);
    let model = FmlaModel::new(cfg.clone()).unwrap();
    let (x, labels) = batch(&cfg);
    let masks = sample_step_masks(&cfg, 3, 1, 0).unwrap();
    let mut g = Graph::new();
    let mv = model.bind_constants(&mut g).unwrap();
    let step = model
        .forward_train(
            &mut g,
            &mv,
            &TrainBatch {
                x: &x,
                labels: &labels,
                random_masks: &masks.0,
                regular_masks: &masks.1,
                teachers: None,
            },
        )
        .unwrap();
    let b = step.breakdown;
    assert_eq!((b.loss1, b.loss2), (0.0, 0.0));
    assert_eq!(b.total, b.loss3);
    for pass in &step.passes {
        let u = g.value(pass.u_sum);
        assert!((cross_entropy_loss(u, &labels).unwrap() - b.loss3).abs() < 1e-12);
    }

    // With ratio 0 the random passes coincide with the regular pass, so
    // loss1 vanishes even when its weight is on.
    let cfg = step_config(0.0, 1.0, 0.0);
    let model = FmlaModel::new(cfg).unwrap();
    assert!(live_breakdown(&model).loss1.abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn kl_identity_and_gibbs(seed in any::<u64>(), k in 2usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..64 {
            let p = random_simplex(k, &mut rng);
            let q = random_simplex(k, &mut rng);
            prop_assert_eq!(kl_divergence(&p, &p).unwrap(), 0.0);
            let v = kl_divergence(&p, &q).unwrap();
            prop_assert!(v > 0.0);
            prop_assert!((v - kl_oracle(&p, &q)).abs() < 1e-12);
        }
    }
}
