// SPDX-License-Identifier: MIT OR Apache-2.0

use super::*;
use crate::attribution::{visual_contribution, PerturbationSpec};
use crate::datagen::{gen_edit_cases, oracle_answer, BaseAnswerer, EditCase, EditCaseOptions, ToyImage, Vocab};
use crate::numerics::{grad_check, DiffGraph, Sampling, Tensor};
use crate::toyvlm::{ModelConfig, ToyVlm};
use crate::vead::{im_intensity, VeadParams};

struct Oracle<'a>(&'a Vocab);

impl BaseAnswerer for Oracle<'_> {
    fn base_answer(&self, image: Option<&ToyImage>, prompt: &[usize]) -> crate::Result<Vec<usize>> {
        let q = self.0.detokenize(&prompt[1..prompt.len() - 1])?;
        self.0.tokenize(&oracle_answer(image, &q).unwrap_or_default())
    }
}

fn config() -> ModelConfig {
    ModelConfig {
        layers: 3,
        d_model: 12,
        heads: 2,
        d_ff: 10,
        grid_rows: 2,
        grid_cols: 2,
        init_std: 0.3,
        ..ModelConfig::default()
    }
}

fn cases(n: usize) -> Vec<EditCase> {
    let vocab = Vocab::standard();
    let opts = EditCaseOptions {
        rows: 2,
        cols: 2,
        counterfactual: false,
    };
    gen_edit_cases(4, n, opts, &vocab, &Oracle(&vocab)).unwrap()
}

fn fixture(n: usize) -> (ToyVlm<f64>, Vec<PreparedCase<f64>>) {
    let vocab = Vocab::standard();
    let m = ToyVlm::<f64>::init(config(), 5).unwrap();
    let prepared = cases(n)
        .iter()
        .map(|c| prepare_case(&m, &vocab, c, 1, &[2, 3], &PerturbationSpec::default()).unwrap())
        .collect();
    (m, prepared)
}

/// An adapter whose every parameter is nonzero.
fn busy_vead(m: &ToyVlm<f64>, seed: u64) -> VeadParams<f64> {
    let mut v = VeadParams::<f64>::init(&m.config, 1, 6, seed).unwrap();
    let mut rng = crate::datagen::substream(seed, 1);
    for (_, t) in v.named_mut() {
        *t = Tensor::randn(t.shape(), 0.3, &mut rng);
    }
    v
}

fn draws() -> Vec<CaseDraw> {
    vec![
        CaseDraw {
            positions: vec![0, 2, 3],
            donor: Donor::Edit,
        },
        CaseDraw {
            positions: vec![1, 2],
            donor: Donor::Mg,
        },
    ]
}

#[test]
fn polarity_losses_at_zero_logits() {
    let (up, down) = im_polarity_losses(&[0.0; 3], &[0.0; 3], &[0.0; 3]);
    assert!((up - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
    assert!((down - std::f64::consts::LN_2).abs() < 1e-12);
    let (up, down) = im_polarity_losses(&[60.0], &[60.0], &[-60.0]);
    assert!(up < 1e-20 && down < 1e-20);
}

#[test]
fn alignment_loss_oracles() {
    let uniform = vec![vec![0.3; 5]];
    let l = im_align_loss(&uniform, &[0.7; 5]).unwrap();
    assert!((l - 5f64.ln()).abs() < 1e-7);
    assert_eq!(
        im_align_loss(&[vec![0.0; 4], vec![0.0; 4]], &[1.0, -2.0, 0.5, 3.0]).unwrap(),
        0.0
    );
    // Logits whose softmax equals the normalized targets reach the entropy.
    let t = [0.1, 0.6, 0.3];
    let logits: Vec<f64> = t.iter().map(|x: &f64| x.ln()).collect();
    let entropy: f64 = -t.iter().map(|p| p * p.ln()).sum::<f64>();
    let l = im_align_loss(&[t.to_vec()], &logits).unwrap();
    assert!((l - entropy).abs() < 1e-7);
    assert!(im_align_loss(&[t.to_vec()], &[0.0, 0.0]).is_err());
}

#[test]
fn alignment_weights_sum_to_one_per_layer_set() {
    let w = align_weights(&[vec![0.2, 0.2, 0.6], vec![1.0, 0.0, 0.0]]);
    assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-7);
    assert!((w[0] - (0.1 + 0.5)).abs() < 1e-7);
}

#[test]
fn fresh_adapter_has_zero_locality_loss() {
    let (m, pc) = fixture(2);
    let v = VeadParams::<f64>::init(&m.config, 1, 6, 3).unwrap();
    let d = draws();
    let batch: Vec<_> = pc.iter().zip(&d).collect();
    let t = objective_values(&m, &v, &batch, LossFlags::default()).unwrap();
    assert_eq!(t.loc, 0.0);
    assert!(t.rel > 0.0 && t.gen > 0.0);
}

#[test]
fn terms_add_up_and_are_nonnegative() {
    let (m, pc) = fixture(2);
    let v = busy_vead(&m, 8);
    let d = draws();
    let batch: Vec<_> = pc.iter().zip(&d).collect();
    let t = objective_values(&m, &v, &batch, LossFlags::default()).unwrap();
    let sum = t.rel + t.gen + t.loc + t.im_up + t.im_down + t.im_align;
    assert!((t.total - sum).abs() < 1e-6);
    for x in [t.rel, t.gen, t.loc, t.im_up, t.im_down, t.im_align] {
        assert!(x >= 0.0, "{t:?}");
    }
    let off = objective_values(
        &m,
        &v,
        &batch,
        LossFlags {
            drop_im_up: true,
            drop_im_down: true,
            drop_im_align: true,
        },
    )
    .unwrap();
    assert_eq!((off.im_up, off.im_down, off.im_align), (0.0, 0.0, 0.0));
    assert_eq!(off.rel, t.rel);
}

#[test]
fn graph_intensity_terms_match_plain_functions() {
    let (m, pc) = fixture(1);
    let v = busy_vead(&m, 2);
    let d = CaseDraw {
        positions: vec![0, 1, 3],
        donor: Donor::Mg,
    };
    let t = objective_values(&m, &v, &[(&pc[0], &d)], LossFlags::default()).unwrap();
    let logits = |hv: &Tensor<f64>| -> Vec<f64> {
        let (l, _) = im_intensity(&v, hv, &pc[0].signal).unwrap();
        d.positions.iter().map(|&p| l[p]).collect()
    };
    let (a, b, c) = (
        logits(&pc[0].edit_visual),
        logits(&pc[0].mg_visual),
        logits(&pc[0].ml_visual),
    );
    let (up, down) = im_polarity_losses(&a, &b, &c);
    assert!((t.im_up - up).abs() < 1e-10);
    assert!((t.im_down - down).abs() < 1e-10);
    let targets: Vec<Vec<f64>> = pc[0]
        .targets_for(Donor::Mg)
        .iter()
        .map(|l| d.positions.iter().map(|&p| l[p]).collect())
        .collect();
    assert!((t.im_align - im_align_loss(&targets, &b).unwrap()).abs() < 1e-10);
}

#[test]
fn full_objective_gradients_match_finite_differences() {
    let (m, pc) = fixture(2);
    let v = busy_vead(&m, 4);
    let d = draws();
    let batch: Vec<_> = pc.iter().zip(&d).collect();
    let mut g = DiffGraph::new();
    let suffix = FrozenSuffix::build(&mut g, &m, v.l_e);
    let vv = v.to_graph(&mut g, true);
    let terms = objective_graph(&mut g, &suffix, &v, &vv, &batch, LossFlags::default()).unwrap();
    let report = grad_check(&mut g, terms.total, 1e-5, 1e-5, Sampling::All).unwrap();
    assert!(report.all_pass(), "max error {}", report.max_error());
}

#[test]
fn zero_learning_rate_and_frozen_backbone() {
    let (m, pc) = fixture(2);
    let before = m.clone();
    let mut v = busy_vead(&m, 1);
    let v0 = v.clone();
    let d = draws();
    let batch: Vec<_> = pc.iter().zip(&d).collect();
    let tc = TrainConfig {
        lr: 0.0,
        ..TrainConfig::default()
    };
    let mut opt = Adam::new(0.0);
    for i in 0..3 {
        train_step(&m, &mut v, &batch, &tc, &mut opt, i).unwrap();
    }
    assert_eq!(v, v0);
    assert_eq!(m.params, before.params);
}

#[test]
fn repeated_batch_loss_decreases() {
    let (m, pc) = fixture(2);
    let mut v = VeadParams::<f64>::init(&m.config, 1, 6, 3).unwrap();
    let d = draws();
    let batch: Vec<_> = pc.iter().zip(&d).collect();
    let tc = TrainConfig {
        lr: 3e-3,
        ..TrainConfig::default()
    };
    let mut opt = Adam::new(tc.lr);
    let totals: Vec<f64> = (0..200)
        .map(|i| train_step(&m, &mut v, &batch, &tc, &mut opt, i).unwrap().total)
        .collect();
    let ma = |i: usize| totals[i - 20..i].iter().sum::<f64>() / 20.0;
    assert!(ma(200) < ma(40), "{} vs {}", ma(200), ma(40));
}

#[test]
fn loop_is_deterministic_and_empty_loop_keeps_init() {
    let (m, pc) = fixture(3);
    let init = VeadParams::<f64>::init(&m.config, 1, 6, 3).unwrap();
    let tc = TrainConfig {
        max_iters: 0,
        n_s: 3,
        batch: 2,
        ..TrainConfig::default()
    };
    let out = train_loop(&m, &pc, init.clone(), &tc, None, |_| {}).unwrap();
    assert_eq!(out.vead, init);
    assert!(out.selected.is_none());

    let tc = TrainConfig {
        max_iters: 12,
        checkpoint_every: 5,
        smooth_window: 3,
        ..tc
    };
    let a = train_loop(&m, &pc, init.clone(), &tc, None, |_| {}).unwrap();
    let b = train_loop(&m, &pc, init, &tc, None, |_| {}).unwrap();
    assert_eq!(a.curve, b.curve);
    assert_eq!(a.checkpoints.iter().map(|c| c.iter).collect::<Vec<_>>(), [5, 10, 12]);
    let best = a
        .checkpoints
        .iter()
        .min_by(|x, y| x.smoothed_loss.partial_cmp(&y.smoothed_loss).unwrap())
        .unwrap();
    assert_eq!(a.selected.as_ref(), Some(best));
}

#[test]
fn loop_writes_checkpoints_and_curve() {
    let (m, pc) = fixture(2);
    let init = VeadParams::<f64>::init(&m.config, 1, 6, 3).unwrap();
    let dir = std::env::temp_dir().join(format!("vead_loop_{}", std::process::id()));
    let tc = TrainConfig {
        max_iters: 4,
        checkpoint_every: 2,
        n_s: 2,
        batch: 1,
        ..TrainConfig::default()
    };
    train_loop(&m, &pc, init, &tc, Some(&dir), |_| {}).unwrap();
    let curve = std::fs::read_to_string(dir.join("loss_curve.jsonl")).unwrap();
    assert_eq!(curve.lines().count(), 4);
    let r: TrainStepReport = serde_json::from_str(curve.lines().next().unwrap()).unwrap();
    assert_eq!(r.iter, 1);
    assert!(dir.join("vead_000002.ckpt").exists() && dir.join("vead_000004.ckpt").exists());
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn targets_without_noise_vanish_and_self_donor_matches_plain_map() {
    let vocab = Vocab::standard();
    let m = ToyVlm::<f64>::init(config(), 5).unwrap();
    let case = &cases(1)[0];
    let zero = prepare_case(&m, &vocab, case, 1, &[2], &PerturbationSpec::zero_noise()).unwrap();
    assert!(zero.targets.iter().flatten().flatten().all(|&c| c == 0.0));

    let mut tokens = case.edit.prompt_ids(&vocab).unwrap();
    tokens.extend(case.edit.answer_ids(&vocab).unwrap());
    let trace = m
        .forward_trace(&m.embed(case.edit.image.as_ref(), &tokens).unwrap())
        .unwrap();
    let spec = PerturbationSpec::default();
    let n_vt = zero.signal.n_vt;
    let own = attribution_targets(&m, &trace, &trace, 2, n_vt, &spec).unwrap();
    let plain = visual_contribution(&m, &trace, 2, n_vt, &spec).unwrap();
    assert_eq!(own, plain.values);
}

#[test]
fn config_validation() {
    let tc = TrainConfig::default();
    assert!(tc.validate(16).is_ok());
    assert!(tc.validate(4).is_err());
    assert!(TrainConfig { batch: 0, ..tc.clone() }.validate(16).is_err());
    assert!(TrainConfig { lr: f64::NAN, ..tc }.validate(16).is_err());
}
