//! Per-message meta-word distributions for sampling meta-words at inference.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamGrads, ParamId, ParamSet, Tape, Tensor, Var};
use crate::checkpoint::{records, Checkpoint, CheckpointKind, FORMAT_VERSION};
use crate::corpus::{tokenize, Vocab};
use crate::error::{Error, Result};
use crate::metaword::{AnnotatedPair, Attribute, AttributeSchema, MetaWord, MetaWordVariable, Value, VarType};
use crate::rng;
use crate::scalar::Scalar;
use crate::seq2seq::BiGruEncoder;
use crate::training::{Adadelta, AdadeltaConfig};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Clone, Debug)]
pub enum Head {
    Categorical {
        w: ParamId,
        b: ParamId,
    },
    Real {
        w_mu: ParamId,
        b_mu: ParamId,
        w_var: ParamId,
        b_var: ParamId,
    },
}

#[derive(Clone, Debug)]
pub struct MetaWordPredictor<T: Scalar> {
    pub d: usize,
    pub schema: AttributeSchema,
    pub msg_vocab: Vocab,
    pub params: ParamSet<T>,
    pub encoder: BiGruEncoder,
    pub heads: Vec<Head>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum VarDistribution {
    Categorical {
        attribute: Attribute,
        categories: Vec<String>,
        probs: Vec<f64>,
    },
    Real {
        attribute: Attribute,
        mu: f64,
        log_var: f64,
    },
}

impl VarDistribution {
    pub fn attribute(&self) -> Attribute {
        match self {
            Self::Categorical { attribute, .. } | Self::Real { attribute, .. } => *attribute,
        }
    }

    /// Most likely value (the mean, clamped, for reals).
    pub fn mode(&self) -> Value {
        match self {
            Self::Categorical { categories, probs, .. } => {
                let mut best = 0;
                for (i, p) in probs.iter().enumerate() {
                    if *p > probs[best] {
                        best = i;
                    }
                }
                Value::Category(categories[best].clone())
            }
            Self::Real { mu, .. } => Value::Real(mu.clamp(0.0, 1.0)),
        }
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> Value {
        match self {
            Self::Categorical { categories, probs, .. } => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                for (c, p) in categories.iter().zip(probs) {
                    acc += p;
                    if u < acc {
                        return Value::Category(c.clone());
                    }
                }
                // rounding left u above the final partial sum
                let last = probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1);
                Value::Category(categories[last].clone())
            }
            Self::Real { mu, log_var, .. } => {
                let sd = (0.5 * log_var).exp();
                let x = match Normal::new(*mu, sd) {
                    Ok(n) if sd.is_finite() => n.sample(rng),
                    _ => *mu,
                };
                Value::Real(if x.is_nan() { 0.0 } else { x.clamp(0.0, 1.0) })
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaWordDistribution {
    pub vars: Vec<VarDistribution>,
}

impl MetaWordDistribution {
    pub fn get(&self, attribute: Attribute) -> Option<&VarDistribution> {
        self.vars.iter().find(|v| v.attribute() == attribute)
    }

    pub fn mode(&self) -> Result<MetaWord> {
        MetaWord::new(
            self.vars
                .iter()
                .map(|v| MetaWordVariable {
                    attribute: v.attribute(),
                    value: v.mode(),
                })
                .collect(),
        )
    }
}

/// Draws one value per variable independently.
pub fn sample_metaword<R: Rng>(dist: &MetaWordDistribution, rng: &mut R) -> Result<MetaWord> {
    MetaWord::new(
        dist.vars
            .iter()
            .map(|v| MetaWordVariable {
                attribute: v.attribute(),
                value: v.sample(rng),
            })
            .collect(),
    )
}

enum HeadVars {
    Categorical(Var),
    Real { mu: Var, log_var: Var },
}

impl<T: Scalar> MetaWordPredictor<T> {
    pub fn new<R: Rng>(d: usize, schema: AttributeSchema, msg_vocab: Vocab, rng: &mut R) -> Result<Self> {
        if d == 0 {
            return Err(Error::Config("hidden size must be positive".into()));
        }
        let mut p = ParamSet::new();
        let encoder = BiGruEncoder::register(&mut p, "pred.enc", msg_vocab.len(), d, rng);
        let s = 1.0 / (2.0 * d as f64).sqrt();
        let heads = schema
            .decls()
            .iter()
            .map(|decl| {
                let k = decl.attribute.key();
                match decl.var_type {
                    VarType::Categorical => Head::Categorical {
                        w: p.add_uniform(format!("pred.{k}.w"), &[2 * d, decl.categories.len()], s, rng),
                        b: p.add_zeros(format!("pred.{k}.b"), &[1, decl.categories.len()]),
                    },
                    VarType::Real => Head::Real {
                        w_mu: p.add_uniform(format!("pred.{k}.w_mu"), &[2 * d, 1], s, rng),
                        b_mu: p.add_zeros(format!("pred.{k}.b_mu"), &[1, 1]),
                        w_var: p.add_uniform(format!("pred.{k}.w_var"), &[2 * d, 1], s, rng),
                        b_var: p.add_zeros(format!("pred.{k}.b_var"), &[1, 1]),
                    },
                }
            })
            .collect();
        Ok(Self {
            d,
            schema,
            msg_vocab,
            params: p,
            encoder,
            heads,
        })
    }

    fn heads_on(&self, tape: &mut Tape<'_, T>, msg: &[usize]) -> Result<Vec<HeadVars>> {
        let enc = self.encoder.encode(tape, msg)?;
        let h = tape.concat(&[enc.fwd_last, enc.bwd_first], 1)?;
        let affine = |tape: &mut Tape<'_, T>, w: ParamId, b: ParamId| -> Result<Var> {
            let w = tape.param(w);
            let b = tape.param(b);
            let x = tape.matmul(h, w)?;
            tape.add(x, b)
        };
        self.heads
            .iter()
            .map(|head| {
                Ok(match *head {
                    Head::Categorical { w, b } => {
                        let l = affine(tape, w, b)?;
                        HeadVars::Categorical(tape.log_softmax(l))
                    }
                    Head::Real {
                        w_mu,
                        b_mu,
                        w_var,
                        b_var,
                    } => HeadVars::Real {
                        mu: affine(tape, w_mu, b_mu)?,
                        log_var: affine(tape, w_var, b_var)?,
                    },
                })
            })
            .collect()
    }

    pub fn predict_ids(&self, msg: &[usize]) -> Result<MetaWordDistribution> {
        let mut tape = Tape::new(&self.params);
        let heads = self.heads_on(&mut tape, msg)?;
        let vars = self
            .schema
            .decls()
            .iter()
            .zip(heads)
            .map(|(decl, hv)| match hv {
                HeadVars::Categorical(lp) => VarDistribution::Categorical {
                    attribute: decl.attribute,
                    categories: decl.categories.clone(),
                    probs: tape.value(lp).data().iter().map(|x| x.to_f64_lossy().exp()).collect(),
                },
                HeadVars::Real { mu, log_var } => VarDistribution::Real {
                    attribute: decl.attribute,
                    mu: tape.value(mu).item().to_f64_lossy(),
                    log_var: tape.value(log_var).item().to_f64_lossy(),
                },
            })
            .collect();
        Ok(MetaWordDistribution { vars })
    }

    pub fn predict_distributions(&self, message: &str) -> Result<MetaWordDistribution> {
        let toks = tokenize(message);
        self.predict_ids(&self.msg_vocab.encode(&toks))
    }

    /// `-log p(mw | msg) - eta * H`, summed over variables.
    pub fn example_loss(&self, tape: &mut Tape<'_, T>, msg: &[usize], mw: &MetaWord, eta: f64) -> Result<Var> {
        let heads = self.heads_on(tape, msg)?;
        let mut terms = Vec::with_capacity(heads.len());
        for (decl, hv) in self.schema.decls().iter().zip(heads) {
            let value = mw
                .get(decl.attribute)
                .ok_or_else(|| Error::metaword(decl.attribute.key(), "missing from training meta-word"))?;
            match (hv, value) {
                (HeadVars::Categorical(lp), Value::Category(c)) => {
                    let k = decl.category_index(c).ok_or_else(|| {
                        Error::metaword(decl.attribute.key(), format!("{c:?} not in category inventory"))
                    })?;
                    let picked = tape.pick(lp, k)?;
                    terms.push(tape.scale(picked, -T::one()));
                    if eta != 0.0 {
                        let p = tape.exp(lp);
                        let plp = tape.mul(p, lp)?;
                        let neg_h = tape.sum(plp);
                        terms.push(tape.scale(neg_h, T::lit(eta)));
                    }
                }
                (HeadVars::Real { mu, log_var }, Value::Real(x)) => {
                    // 0.5 (ln 2pi + lv + (x - mu)^2 e^-lv)
                    let target = tape.constant(Tensor::filled(&[1, 1], T::lit(*x)));
                    let diff = tape.sub(target, mu)?;
                    let sq = tape.mul(diff, diff)?;
                    let neg_lv = tape.scale(log_var, -T::one());
                    let inv = tape.exp(neg_lv);
                    let q = tape.mul(sq, inv)?;
                    let s = tape.add(q, log_var)?;
                    let nll = tape.affine(s, T::lit(0.5), T::lit(0.5 * LN_2PI));
                    terms.push(tape.sum(nll));
                    if eta != 0.0 {
                        // H = 0.5 (ln 2pi e + lv)
                        let h = tape.affine(log_var, T::lit(0.5), T::lit(0.5 * (LN_2PI + 1.0)));
                        let h = tape.sum(h);
                        terms.push(tape.scale(h, T::lit(-eta)));
                    }
                }
                _ => {
                    return Err(Error::metaword(
                        decl.attribute.key(),
                        "value type does not match declaration",
                    ))
                }
            }
        }
        tape.add_all(&terms)
    }

    pub fn to_checkpoint(&self, config: serde_json::Value, history: Vec<serde_json::Value>) -> Checkpoint {
        Checkpoint {
            format_version: FORMAT_VERSION,
            kind: CheckpointKind::Predictor,
            d: self.d,
            schema: self.schema.clone(),
            msg_vocab: self.msg_vocab.clone(),
            resp_vocab: None,
            meta_vocab: None,
            config,
            history,
            tensors: records(self.params.iter().map(|(_, n, t)| (n.to_string(), t.cast())).collect()),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(CheckpointKind::Predictor)?;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut m = Self::new(ck.d, ck.schema.clone(), ck.msg_vocab.clone(), &mut rng)?;
        let cast: Vec<(String, Tensor<T>)> = ck.named_tensors()?.into_iter().map(|(n, t)| (n, t.cast())).collect();
        m.params.load_from(&cast)?;
        Ok(m)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictorConfig {
    pub d: usize,
    /// Entropy regularization weight.
    pub eta: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub optimizer: AdadeltaConfig,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self {
            d: 64,
            eta: 0.01,
            batch_size: 32,
            max_epochs: 20,
            patience: 2,
            seed: 1,
            optimizer: AdadeltaConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictorEpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

pub struct PredictorExample {
    pub message: Vec<usize>,
    pub metaword: MetaWord,
}

pub fn predictor_examples<T: Scalar>(
    pred: &MetaWordPredictor<T>,
    pairs: &[AnnotatedPair],
) -> Result<Vec<PredictorExample>> {
    pairs
        .iter()
        .map(|p| {
            let mw = p.metaword.project(&pred.schema);
            pred.schema.validate(&mw)?;
            let toks = tokenize(&p.message);
            if toks.is_empty() {
                return Err(Error::Empty("message"));
            }
            Ok(PredictorExample {
                message: pred.msg_vocab.encode(&toks),
                metaword: mw,
            })
        })
        .collect()
}

fn mean_loss<T: Scalar>(pred: &MetaWordPredictor<T>, examples: &[PredictorExample], eta: f64) -> Result<f64> {
    let mut total = 0.0;
    for ex in examples {
        let mut tape = Tape::new(&pred.params);
        let l = pred.example_loss(&mut tape, &ex.message, &ex.metaword, eta)?;
        total += tape.value(l).item().to_f64_lossy();
    }
    Ok(total / examples.len() as f64)
}

/// Adadelta on the regularized likelihood with early stopping on the
/// validation loss; returns the best parameters seen.
pub fn train_predictor<T: Scalar>(
    mut pred: MetaWordPredictor<T>,
    train_set: &[PredictorExample],
    valid_set: &[PredictorExample],
    cfg: &PredictorConfig,
    mut on_epoch: impl FnMut(&PredictorEpochLog),
) -> Result<(MetaWordPredictor<T>, Vec<PredictorEpochLog>)> {
    if train_set.is_empty() {
        return Err(Error::Empty("training split"));
    }
    if cfg.batch_size == 0 || cfg.patience == 0 || !(cfg.eta >= 0.0) {
        return Err(Error::Config(
            "predictor needs batch size >= 1, patience >= 1, eta >= 0".into(),
        ));
    }
    let valid = if valid_set.is_empty() { train_set } else { valid_set };
    let mut opt = Adadelta::new(&pred.params, cfg.optimizer);
    let mut grads = ParamGrads::zeros_like(&pred.params);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut shuffler = rng::stream(cfg.seed, rng::BATCHING);
    let mut history = Vec::new();
    let mut best = (f64::INFINITY, pred.params.clone());
    let mut stale = 0;
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut shuffler);
        let mut sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            grads.zero();
            let w = 1.0 / chunk.len() as f64;
            for &i in chunk {
                let ex = &train_set[i];
                let mut tape = Tape::new(&pred.params);
                let l = pred.example_loss(&mut tape, &ex.message, &ex.metaword, cfg.eta)?;
                tape.backward_accumulate(l, &mut grads, T::lit(w))?;
                sum += tape.value(l).item().to_f64_lossy();
            }
            opt.step(&mut pred.params, &mut grads)?;
        }
        let val_loss = mean_loss(&pred, valid, cfg.eta)?;
        let log = PredictorEpochLog {
            epoch,
            train_loss: sum / train_set.len() as f64,
            val_loss,
        };
        on_epoch(&log);
        history.push(log);
        if val_loss < best.0 {
            best = (val_loss, pred.params.clone());
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    pred.params = best.1;
    Ok((pred, history))
}
