use super::*;
use crate::autodiff::grad_check;
use crate::corpus::{build_vocab_with, FreqConfig, RawPair, Stopwords};
use crate::metaword::{annotate, Attribute, MetaWordVariable};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const WORDS: [&str; 12] = [
    "apple", "river", "stone", "cloud", "tiger", "piano", "garden", "rocket", "candle", "forest", "mirror", "violin",
];

/// Small copy-style corpus: the response repeats a prefix of the message.
pub(crate) fn toy_raw(n: usize, seed: u64) -> Vec<RawPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let len = rng.random_range(3..=5);
            let msg: Vec<&str> = (0..len).map(|_| WORDS[rng.random_range(0..WORDS.len())]).collect();
            let k = rng.random_range(1..=3);
            let mut resp: Vec<&str> = msg[..k].to_vec();
            resp.push(if rng.random_bool(0.5) { "." } else { "?" });
            RawPair {
                message: msg.join(" "),
                response: resp.join(" "),
            }
        })
        .collect()
}

pub(crate) fn toy_setup(
    d: usize,
    schema: AttributeSchema,
    n: usize,
    seed: u64,
) -> (GtmnSeq2Seq<f64>, Vec<TrainingExample>, FreqStats) {
    let raw = toy_raw(n, seed);
    let freq = FreqConfig {
        top_k: 0,
        stopwords: Stopwords::default(),
    };
    let (mv, rv, stats) = build_vocab_with(&raw, 50, &freq).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    let model = GtmnSeq2Seq::new(d, schema.clone(), mv, rv, &mut rng).unwrap();
    let examples = raw
        .iter()
        .map(|p| {
            let a = annotate(&p.message, &p.response, &AttributeSchema::full(), &stats).unwrap();
            TrainingExample::from_annotated(&a, &model.spec, &stats).unwrap()
        })
        .collect();
    (model, examples, stats)
}

fn zero_out(model: &mut GtmnSeq2Seq<f64>) {
    for id in [model.layers.output.w, model.layers.output.b] {
        model.params.get_mut(id).data_mut().iter_mut().for_each(|x| *x = 0.0);
    }
}

fn scalar(tape: &Tape<'_, f64>, v: Var) -> f64 {
    tape.value(v).item()
}

#[test]
fn uniform_model_nll_is_t_ln_v() {
    let (mut m, ex, _) = toy_setup(4, AttributeSchema::full(), 3, 1);
    zero_out(&mut m);
    let v = m.spec.resp_vocab.len() as f64;
    for e in &ex {
        let mut tape = Tape::new(&m.params);
        let l = nll_loss(&m, &mut tape, std::slice::from_ref(e)).unwrap();
        assert!((scalar(&tape, l) - e.len() as f64 * v.ln()).abs() < 1e-9);
    }
}

#[test]
fn certain_model_has_zero_nll() {
    let (mut m, mut ex, _) = toy_setup(4, AttributeSchema::empty(), 1, 2);
    zero_out(&mut m);
    ex[0].targets = vec![EOS];
    m.params.get_mut(m.layers.output.b).data_mut()[EOS] = 1000.0;
    let mut tape = Tape::new(&m.params);
    let l = nll_loss(&m, &mut tape, &ex).unwrap();
    assert_eq!(scalar(&tape, l), 0.0);
}

#[test]
fn two_token_hand_case() {
    let (mut m, mut ex, _) = toy_setup(4, AttributeSchema::empty(), 1, 3);
    zero_out(&mut m);
    let b = m.params.get_mut(m.layers.output.b).data_mut();
    for (j, x) in b.iter_mut().enumerate() {
        *x = (j % 3) as f64 * 0.5;
    }
    let logits: Vec<f64> = b.to_vec();
    let lse = logits.iter().map(|x| x.exp()).sum::<f64>().ln();
    ex[0].targets = vec![5, EOS];
    let want = -(logits[5] - lse) - (logits[EOS] - lse);
    let mut tape = Tape::new(&m.params);
    let l = nll_loss(&m, &mut tape, &ex).unwrap();
    assert!((scalar(&tape, l) - want).abs() < 1e-12);
}

#[test]
fn padding_contributes_nothing() {
    let (m, ex, _) = toy_setup(6, AttributeSchema::full(), 4, 4);
    let padded = pad_batch(&ex);
    assert!(padded.iter().any(|e| e.targets.contains(&PAD)));
    let mut t1 = Tape::new(&m.params);
    let a = total_loss(&m, &mut t1, &ex, 1.0).unwrap();
    let mut t2 = Tape::new(&m.params);
    let b = total_loss(&m, &mut t2, &padded, 1.0).unwrap();
    assert_eq!(scalar(&t1, a), scalar(&t2, b));
}

#[test]
fn lambda_zero_is_nll_and_lambda_one_is_sum() {
    let (m, ex, _) = toy_setup(6, AttributeSchema::full(), 3, 5);
    let mut tape = Tape::new(&m.params);
    let nll = nll_loss(&m, &mut tape, &ex).unwrap();
    let su = state_update_loss(&m, &mut tape, &ex).unwrap();
    let t0 = total_loss(&m, &mut tape, &ex, 0.0).unwrap();
    let t1 = total_loss(&m, &mut tape, &ex, 1.0).unwrap();
    assert_eq!(scalar(&tape, t0), scalar(&tape, nll));
    assert!(scalar(&tape, su) > 0.0);
    assert!((scalar(&tape, t1) - scalar(&tape, nll) - scalar(&tape, su)).abs() < 1e-12);
}

#[test]
fn state_update_matches_recomputed_norms() {
    let (m, ex, _) = toy_setup(3, AttributeSchema::full(), 2, 6);
    for e in &ex {
        let mut tape = Tape::new(&m.params);
        let pass = m
            .teacher_forced(&mut tape, &e.message, &e.metaword, &e.targets)
            .unwrap();
        let su = sequence_state_update(&m, &mut tape, &pass, e).unwrap().unwrap();
        let got = scalar(&tape, su);

        // Oracle from plain values: embeddings read straight from the table.
        let emb = m.params.get(m.layers.gtmn.embedding);
        let d = 3;
        let row = |tok: &str| -> Vec<f64> {
            let id = m.spec.meta_vocab.ids(tok).unwrap()[0];
            emb.data()[id * d..(id + 1) * d].to_vec()
        };
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        let rep = |attr: Attribute, v: &Value| -> Vec<f64> {
            match v {
                Value::Category(c) => row(c).into_iter().map(sig).collect(),
                Value::Real(x) => row(attr.key()).into_iter().map(|k| x * sig(k)).collect(),
            }
        };
        let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let mut want = 0.0;
        for (i, decl) in m.schema().decls().iter().enumerate() {
            let values_at =
                |t: usize| tape.value(pass.steps[t].panel.unwrap().values).data()[i * d..(i + 1) * d].to_vec();
            match decl.case {
                LossCase::Tracked => {
                    for (t, target) in e.prefix_targets[i].as_ref().unwrap().iter().enumerate() {
                        want += dist(&values_at(t), &rep(decl.attribute, target));
                    }
                }
                LossCase::Final => {
                    let v = e.metaword.get(decl.attribute).unwrap();
                    want += dist(&values_at(pass.steps.len() - 1), &rep(decl.attribute, v));
                }
            }
        }
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }
}

#[test]
fn exact_tracking_gives_zero_case_one_term() {
    // Frozen panel (all-zero update weights keep v_t = 0) and a copy-ratio
    // target that stays 0 on every prefix.
    let schema = AttributeSchema::from_attributes(&[Attribute::CR]);
    let (mut m, mut ex, _) = toy_setup(4, schema, 1, 7);
    let g = m.layers.gtmn.clone();
    for id in [g.w_key, g.w_value, g.w_state, g.b] {
        m.params.get_mut(id).data_mut().iter_mut().for_each(|x| *x = 0.0);
    }
    let steps = ex[0].len();
    ex[0].prefix_targets[0] = Some(vec![Value::Real(0.0); steps]);
    let mut tape = Tape::new(&m.params);
    let su = state_update_loss(&m, &mut tape, &ex).unwrap();
    assert_eq!(scalar(&tape, su), 0.0);
}

#[test]
fn empty_schema_has_zero_state_update_loss() {
    let (m, ex, _) = toy_setup(4, AttributeSchema::empty(), 2, 8);
    let mut tape = Tape::new(&m.params);
    let su = state_update_loss(&m, &mut tape, &ex).unwrap();
    assert_eq!(scalar(&tape, su), 0.0);
    assert!(nll_loss(&m, &mut tape, &[]).is_err());
}

#[test]
fn prefix_targets_cover_every_step() {
    let (m, ex, _) = toy_setup(4, AttributeSchema::full(), 5, 9);
    for e in &ex {
        for (decl, t) in m.schema().decls().iter().zip(&e.prefix_targets) {
            match decl.case {
                LossCase::Tracked => assert_eq!(t.as_ref().unwrap().len(), e.len()),
                LossCase::Final => assert!(t.is_none()),
            }
        }
        // RL target at step t is t, and the EOS step repeats the full length
        let rl = e.prefix_targets[0].as_ref().unwrap();
        let n = e.len() - 1;
        for t in 0..n {
            assert_eq!(rl[t], Value::Category((t + 1).to_string()));
        }
        assert_eq!(rl[n], Value::Category(n.to_string()));
    }
}

#[test]
fn micro_model_gradients_match_finite_differences() {
    for (lambda, seed) in [(0.0, 10), (0.5, 11), (1.0, 12)] {
        let (m, ex, _) = toy_setup(3, AttributeSchema::full(), 2, seed);
        let r = grad_check(&m.params, |tape| total_loss(&m, tape, &ex, lambda), 1e-3).unwrap();
        assert!(r.max_rel_error <= 1e-4, "lambda {lambda}: {r:?}");
    }
}

#[test]
fn per_example_accumulation_matches_single_tape() {
    let (m, ex, _) = toy_setup(4, AttributeSchema::full(), 3, 13);
    let mut tape = Tape::new(&m.params);
    let l = total_loss(&m, &mut tape, &ex, 1.0).unwrap();
    let want = tape.backward(l).unwrap().into_param_grads();
    let mut grads = ParamGrads::zeros_like(&m.params);
    let stats = accumulate_gradients(&m, &ex, 1.0, &mut grads).unwrap();
    assert!((stats.loss - scalar(&tape, l)).abs() < 1e-12);
    for (id, g) in grads.iter() {
        for (a, b) in g.data().iter().zip(want[id.index()].data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

fn one_param(x: f64) -> (ParamSet<f64>, ParamGrads<f64>) {
    let mut p = ParamSet::new();
    p.add("x", Tensor::scalar(x));
    let g = ParamGrads::zeros_like(&p);
    (p, g)
}

#[test]
fn adadelta_zero_gradient_is_a_no_op() {
    let (mut p, mut g) = one_param(0.7);
    let mut opt = Adadelta::new(&p, AdadeltaConfig::default());
    for _ in 0..3 {
        opt.step(&mut p, &mut g).unwrap();
    }
    assert_eq!(p.get(p.ids().next().unwrap()).item(), 0.7);
}

#[test]
fn clipping_halves_norm_ten() {
    let mut p = ParamSet::new();
    let id = p.add("x", Tensor::row(vec![0.0, 0.0]));
    let mut g = ParamGrads::zeros_like(&p);
    g.get_mut(id).data_mut().copy_from_slice(&[6.0, 8.0]);
    let mut opt = Adadelta::new(&p, AdadeltaConfig::default());
    let norm = opt.step(&mut p, &mut g).unwrap();
    assert_eq!(norm, 10.0);
    assert_eq!(g.get(id).data(), &[3.0, 4.0]);
}

#[test]
fn adadelta_two_hand_steps() {
    let (mut p, mut g) = one_param(1.0);
    let id = p.ids().next().unwrap();
    let cfg = AdadeltaConfig {
        clip_norm: None,
        ..AdadeltaConfig::default()
    };
    let mut opt = Adadelta::new(&p, cfg);
    let (rho, eps) = (0.95f64, 1e-6f64);
    let (mut x, mut eg, mut ed) = (1.0f64, 0.0f64, 0.0f64);
    for grad in [0.4, -0.2] {
        g.get_mut(id).data_mut()[0] = grad;
        opt.step(&mut p, &mut g).unwrap();
        eg = rho * eg + (1.0 - rho) * grad * grad;
        let dx = (ed + eps).sqrt() / (eg + eps).sqrt() * grad;
        ed = rho * ed + (1.0 - rho) * dx * dx;
        x -= dx;
        assert_eq!(p.get(id).item(), x);
    }
}

#[test]
fn non_finite_gradient_aborts_step() {
    let (mut p, mut g) = one_param(0.3);
    let id = p.ids().next().unwrap();
    g.get_mut(id).data_mut()[0] = f64::NAN;
    let mut opt = Adadelta::new(&p, AdadeltaConfig::default());
    let err = opt.step(&mut p, &mut g).unwrap_err();
    assert!(err.to_string().contains("x[0]"));
    assert_eq!(p.get(id).item(), 0.3);
}

#[test]
fn config_validation() {
    let bad = [
        TrainConfig {
            lambda: -1.0,
            ..TrainConfig::default()
        },
        TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        },
        TrainConfig {
            patience: 0,
            ..TrainConfig::default()
        },
    ];
    for c in bad {
        assert!(c.validate().is_err());
    }
    assert!(TrainConfig::default().validate().is_ok());
}

#[test]
fn stagnant_validation_stops_after_patience() {
    let (m, ex, _) = toy_setup(4, AttributeSchema::full(), 12, 14);
    let cfg = TrainConfig {
        d: 4,
        batch_size: 4,
        max_epochs: 10,
        patience: 2,
        optimizer: AdadeltaConfig {
            learning_rate: 0.0,
            ..AdadeltaConfig::default()
        },
        ..TrainConfig::default()
    };
    let out = train(m, &ex[..8], &ex[8..], &cfg, |_| {}).unwrap();
    assert_eq!(out.history.len(), 3);
    assert_eq!(out.best_epoch, 1);
}

#[test]
fn time_limit_still_runs_one_epoch() {
    let (m, ex, _) = toy_setup(4, AttributeSchema::full(), 12, 16);
    let cfg = TrainConfig {
        d: 4,
        batch_size: 4,
        max_epochs: 5,
        patience: 5,
        time_limit: Some(1e-9),
        ..TrainConfig::default()
    };
    let out = train(m, &ex[..8], &ex[8..], &cfg, |_| {}).unwrap();
    assert_eq!(out.history.len(), 1);
    let bad = TrainConfig {
        time_limit: Some(0.0),
        ..TrainConfig::default()
    };
    assert!(bad.validate().is_err());
}

#[test]
fn empty_split_is_an_error() {
    let (m, ex, _) = toy_setup(4, AttributeSchema::full(), 3, 15);
    assert!(train(m.clone(), &[], &ex, &TrainConfig::default(), |_| {}).is_err());
    assert!(train(m, &ex, &[], &TrainConfig::default(), |_| {}).is_err());
}

#[test]
fn training_loss_decreases_and_is_deterministic() {
    let run = || {
        let (m, ex, _) = toy_setup(32, AttributeSchema::full(), 200, 16);
        let cfg = TrainConfig {
            d: 32,
            batch_size: 16,
            max_epochs: 3,
            patience: 3,
            seed: 3,
            ..TrainConfig::default()
        };
        train(m, &ex[..180], &ex[180..], &cfg, |_| {}).unwrap()
    };
    let a = run();
    let losses: Vec<f64> = a.history.iter().map(|h| h.train_loss).collect();
    assert_eq!(losses.len(), 3);
    assert!(losses[0] > losses[1] && losses[1] > losses[2], "{losses:?}");
    let b = run();
    assert_eq!(a.model.named_tensors(), b.model.named_tensors());
    assert_eq!(a.history, b.history);
}

#[test]
fn example_projection_drops_unused_variables() {
    let schema = AttributeSchema::from_attributes(&[Attribute::RL]);
    let (m, ex, _) = toy_setup(4, schema, 2, 17);
    assert!(ex.iter().all(|e| e.metaword.len() == 1));
    assert!(matches!(
        e0(&ex).metaword.vars()[0],
        MetaWordVariable {
            attribute: Attribute::RL,
            ..
        }
    ));
    let _ = m;
}

fn e0(ex: &[TrainingExample]) -> &TrainingExample {
    &ex[0]
}
