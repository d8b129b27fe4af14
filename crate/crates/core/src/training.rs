//! Losses, Adadelta and the epoch loop.

use std::collections::HashMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamGrads, ParamSet, Tape, Tensor, Var};
use crate::corpus::{tokenize, FreqStats, EOS, PAD};
use crate::error::{Error, Result};
use crate::metaword::{prefix_feature, AnnotatedPair, AttributeSchema, LossCase, MetaWord, Value};
use crate::model::{ForcedPass, GtmnSeq2Seq, ModelSpec};
use crate::rng;
use crate::scalar::Scalar;

/// A teacher-forcing example. `targets` is the response followed by EOS and
/// may carry trailing PAD, which is masked out.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingExample {
    pub message: Vec<usize>,
    pub targets: Vec<usize>,
    pub metaword: MetaWord,
    /// Gold prefix feature per schema variable and step, for tracked
    /// variables only. The EOS step reuses the whole-response value.
    pub prefix_targets: Vec<Option<Vec<Value>>>,
}

impl TrainingExample {
    pub fn new(
        message: &[String],
        response: &[String],
        metaword: &MetaWord,
        spec: &ModelSpec,
        stats: &FreqStats,
    ) -> Result<Self> {
        if message.is_empty() {
            return Err(Error::Empty("message"));
        }
        if response.is_empty() {
            return Err(Error::Empty("response"));
        }
        let metaword = metaword.project(&spec.schema);
        spec.schema.validate(&metaword)?;
        let mut targets = spec.resp_vocab.encode(response);
        targets.push(EOS);
        let mut prefix_targets = Vec::with_capacity(spec.schema.len());
        for decl in spec.schema.decls() {
            if decl.case != LossCase::Tracked {
                prefix_targets.push(None);
                continue;
            }
            let mut vals = Vec::with_capacity(targets.len());
            for t in 1..=response.len() {
                vals.push(prefix_feature(decl.attribute, message, &response[..t], stats)?);
            }
            vals.push(vals[vals.len() - 1].clone());
            prefix_targets.push(Some(vals));
        }
        Ok(Self {
            message: spec.msg_vocab.encode(message),
            targets,
            metaword,
            prefix_targets,
        })
    }

    pub fn from_annotated(pair: &AnnotatedPair, spec: &ModelSpec, stats: &FreqStats) -> Result<Self> {
        Self::new(
            &tokenize(&pair.message),
            &tokenize(&pair.response),
            &pair.metaword,
            spec,
            stats,
        )
    }

    /// Number of unmasked target positions.
    pub fn len(&self) -> usize {
        self.targets
            .iter()
            .position(|&y| y == PAD)
            .unwrap_or(self.targets.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn build_examples(pairs: &[AnnotatedPair], spec: &ModelSpec, stats: &FreqStats) -> Result<Vec<TrainingExample>> {
    pairs
        .iter()
        .map(|p| TrainingExample::from_annotated(p, spec, stats))
        .collect()
}

/// Copies of `examples` with targets right-padded to a common length.
pub fn pad_batch(examples: &[TrainingExample]) -> Vec<TrainingExample> {
    let n = examples.iter().map(|e| e.targets.len()).max().unwrap_or(0);
    examples
        .iter()
        .map(|e| {
            let mut e = e.clone();
            e.targets.resize(n, PAD);
            e
        })
        .collect()
}

/// Per-example loss terms on a tape.
#[derive(Clone, Copy, Debug)]
pub struct ExampleTerms {
    pub nll: Var,
    pub su: Option<Var>,
    pub tokens: usize,
}

fn forced<T: Scalar>(model: &GtmnSeq2Seq<T>, tape: &mut Tape<'_, T>, ex: &TrainingExample) -> Result<ForcedPass> {
    model.teacher_forced(tape, &ex.message, &ex.metaword, &ex.targets[..ex.len()])
}

/// `-sum_t log p(y_t)` over the unmasked targets.
pub fn sequence_nll<T: Scalar>(tape: &mut Tape<'_, T>, pass: &ForcedPass, targets: &[usize]) -> Result<Var> {
    let mut picks = Vec::with_capacity(pass.steps.len());
    for (st, &y) in pass.steps.iter().zip(targets) {
        picks.push(tape.pick(st.log_probs, y)?);
    }
    let total = tape.add_all(&picks)?;
    Ok(tape.scale(total, -T::one()))
}

/// Tracked variables: `sum_t ||v_t - Rep(F(y_1..t))||`; final-only variables:
/// `||v_T - Rep(value)||`. Summed over variables. `None` for an empty schema.
pub fn sequence_state_update<T: Scalar>(
    model: &GtmnSeq2Seq<T>,
    tape: &mut Tape<'_, T>,
    pass: &ForcedPass,
    ex: &TrainingExample,
) -> Result<Option<Var>> {
    let Some(panel0) = pass.initial_panel else {
        return Ok(None);
    };
    let gtmn = &model.layers.gtmn;
    let vocab = &model.spec.meta_vocab;
    let last = pass
        .steps
        .last()
        .and_then(|s| s.panel)
        .ok_or(Error::Empty("response"))?;
    let mut terms = Vec::new();
    for (i, decl) in model.schema().decls().iter().enumerate() {
        match decl.case {
            LossCase::Tracked => {
                let targets = ex.prefix_targets[i]
                    .as_ref()
                    .ok_or_else(|| Error::metaword(decl.attribute.key(), "missing prefix targets"))?;
                let mut cache: HashMap<String, Var> = HashMap::new();
                for (st, target) in pass.steps.iter().zip(targets) {
                    let values = st.panel.expect("panel present when schema is non-empty").values;
                    let v = tape.slice(values, 0, i, 1)?;
                    let key = target.to_string();
                    let r = match cache.get(&key) {
                        Some(&r) => r,
                        None => {
                            let r = gtmn.rep_value(tape, vocab, decl.attribute, target)?;
                            cache.insert(key, r);
                            r
                        }
                    };
                    let diff = tape.sub(v, r)?;
                    terms.push(tape.l2_norm(diff));
                }
            }
            LossCase::Final => {
                let v = tape.slice(last.values, 0, i, 1)?;
                let g = tape.slice(panel0.goals, 0, i, 1)?;
                let diff = tape.sub(v, g)?;
                terms.push(tape.l2_norm(diff));
            }
        }
    }
    Ok(Some(tape.add_all(&terms)?))
}

pub fn example_terms<T: Scalar>(
    model: &GtmnSeq2Seq<T>,
    tape: &mut Tape<'_, T>,
    ex: &TrainingExample,
    with_su: bool,
) -> Result<ExampleTerms> {
    let pass = forced(model, tape, ex)?;
    let nll = sequence_nll(tape, &pass, &ex.targets[..ex.len()])?;
    let su = if with_su {
        sequence_state_update(model, tape, &pass, ex)?
    } else {
        None
    };
    Ok(ExampleTerms {
        nll,
        su,
        tokens: ex.len(),
    })
}

fn batch_mean<T: Scalar>(tape: &mut Tape<'_, T>, terms: &[Var]) -> Result<Var> {
    let s = tape.add_all(terms)?;
    Ok(tape.scale(s, T::lit(1.0 / terms.len() as f64)))
}

fn check_batch(batch: &[TrainingExample]) -> Result<()> {
    if batch.is_empty() {
        Err(Error::Empty("batch"))
    } else {
        Ok(())
    }
}

/// Batch mean of the sequence negative log-likelihood.
pub fn nll_loss<T: Scalar>(model: &GtmnSeq2Seq<T>, tape: &mut Tape<'_, T>, batch: &[TrainingExample]) -> Result<Var> {
    check_batch(batch)?;
    let mut terms = Vec::with_capacity(batch.len());
    for ex in batch {
        terms.push(example_terms(model, tape, ex, false)?.nll);
    }
    batch_mean(tape, &terms)
}

/// Batch mean of the state update loss; zero for an empty schema.
pub fn state_update_loss<T: Scalar>(
    model: &GtmnSeq2Seq<T>,
    tape: &mut Tape<'_, T>,
    batch: &[TrainingExample],
) -> Result<Var> {
    check_batch(batch)?;
    let mut terms = Vec::with_capacity(batch.len());
    for ex in batch {
        let pass = forced(model, tape, ex)?;
        match sequence_state_update(model, tape, &pass, ex)? {
            Some(v) => terms.push(v),
            None => terms.push(tape.constant(Tensor::scalar(T::zero()))),
        }
    }
    batch_mean(tape, &terms)
}

/// `L = L_nll + lambda * L_su`, both batch means.
pub fn total_loss<T: Scalar>(
    model: &GtmnSeq2Seq<T>,
    tape: &mut Tape<'_, T>,
    batch: &[TrainingExample],
    lambda: f64,
) -> Result<Var> {
    check_batch(batch)?;
    let mut terms = Vec::with_capacity(batch.len());
    for ex in batch {
        let t = example_terms(model, tape, ex, lambda != 0.0)?;
        terms.push(combine(tape, t, lambda));
    }
    batch_mean(tape, &terms)
}

fn combine<T: Scalar>(tape: &mut Tape<'_, T>, t: ExampleTerms, lambda: f64) -> Var {
    match t.su {
        Some(su) if lambda != 0.0 => {
            let w = tape.scale(su, T::lit(lambda));
            tape.add(t.nll, w).expect("scalar shapes")
        }
        _ => t.nll,
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BatchStats {
    /// batch-mean total loss
    pub loss: f64,
    pub nll: f64,
    pub su: f64,
    pub tokens: usize,
}

/// Adds `d total_loss / d theta` into `grads`, one tape per example so memory
/// stays bounded; the result equals [`total_loss`] on a single tape.
pub fn accumulate_gradients<T: Scalar>(
    model: &GtmnSeq2Seq<T>,
    batch: &[TrainingExample],
    lambda: f64,
    grads: &mut ParamGrads<T>,
) -> Result<BatchStats> {
    check_batch(batch)?;
    let w = 1.0 / batch.len() as f64;
    let mut stats = BatchStats::default();
    for ex in batch {
        let mut tape = Tape::new(&model.params);
        let t = example_terms(model, &mut tape, ex, lambda != 0.0)?;
        let loss = combine(&mut tape, t, lambda);
        tape.backward_accumulate(loss, grads, T::lit(w))?;
        stats.loss += w * tape.value(loss).item().to_f64_lossy();
        stats.nll += w * tape.value(t.nll).item().to_f64_lossy();
        if let Some(su) = t.su {
            stats.su += w * tape.value(su).item().to_f64_lossy();
        }
        stats.tokens += t.tokens;
    }
    Ok(stats)
}

/// Summed NLL and token count over `examples`, without gradients.
pub fn corpus_nll<T: Scalar>(model: &GtmnSeq2Seq<T>, examples: &[TrainingExample]) -> Result<(f64, usize)> {
    let mut nll = 0.0;
    let mut tokens = 0;
    for ex in examples {
        let mut tape = Tape::new(&model.params);
        let t = example_terms(model, &mut tape, ex, false)?;
        nll += tape.value(t.nll).item().to_f64_lossy();
        tokens += t.tokens;
    }
    Ok((nll, tokens))
}

/// `exp(total NLL / total tokens)`.
pub fn perplexity<T: Scalar>(model: &GtmnSeq2Seq<T>, examples: &[TrainingExample]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    let (nll, tokens) = corpus_nll(model, examples)?;
    Ok((nll / tokens as f64).exp())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdadeltaConfig {
    pub rho: f64,
    pub epsilon: f64,
    pub learning_rate: f64,
    /// Global-norm clip threshold; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdadeltaConfig {
    fn default() -> Self {
        Self {
            rho: 0.95,
            epsilon: 1e-6,
            learning_rate: 1.0,
            clip_norm: Some(5.0),
        }
    }
}

/// Running averages of squared gradients and squared updates.
#[derive(Clone, Debug)]
pub struct Adadelta<T: Scalar> {
    pub config: AdadeltaConfig,
    sq_grad: Vec<Tensor<T>>,
    sq_delta: Vec<Tensor<T>>,
}

impl<T: Scalar> Adadelta<T> {
    pub fn new(params: &ParamSet<T>, config: AdadeltaConfig) -> Self {
        let zeros: Vec<Tensor<T>> = params.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Self {
            config,
            sq_grad: zeros.clone(),
            sq_delta: zeros,
        }
    }

    /// Clips `grads` in place and applies one update. Returns the gradient
    /// norm before clipping. Parameters are left untouched on error.
    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &mut ParamGrads<T>) -> Result<f64> {
        for (id, g) in grads.iter() {
            if let Some(j) = g.data().iter().position(|x| !x.is_finite()) {
                return Err(Error::NonFiniteGradient(format!("{}[{j}]", params.name(id))));
            }
        }
        let norm = grads.global_norm().to_f64_lossy();
        if let Some(clip) = self.config.clip_norm {
            if norm > clip {
                grads.scale(T::lit(clip / norm));
            }
        }
        let rho = T::lit(self.config.rho);
        let one_m = T::one() - rho;
        let eps = T::lit(self.config.epsilon);
        let lr = T::lit(self.config.learning_rate);
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let i = id.index();
            let g = grads.get(id).data();
            let p = params.get_mut(id).data_mut();
            let eg = self.sq_grad[i].data_mut();
            let ed = self.sq_delta[i].data_mut();
            for j in 0..p.len() {
                eg[j] = rho * eg[j] + one_m * g[j] * g[j];
                let delta = (ed[j] + eps).sqrt() / (eg[j] + eps).sqrt() * g[j];
                ed[j] = rho * ed[j] + one_m * delta * delta;
                p[j] -= lr * delta;
            }
        }
        Ok(norm)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub d: usize,
    pub lambda: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without a validation-perplexity drop before stopping.
    pub patience: usize,
    pub schema: AttributeSchema,
    pub seed: u64,
    pub optimizer: AdadeltaConfig,
    /// Cap on non-reserved vocabulary entries per side.
    pub max_vocab: usize,
    /// Wall-clock limit in seconds: no epoch is started that would, at the
    /// previous epoch's pace, end past it.
    #[serde(default)]
    pub time_limit: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            d: 64,
            lambda: 1.0,
            batch_size: 32,
            max_epochs: 20,
            patience: 2,
            schema: AttributeSchema::full(),
            seed: 1,
            optimizer: AdadeltaConfig::default(),
            max_vocab: 2000,
            time_limit: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be >= 1".into()));
        }
        if self.d == 0 {
            return Err(Error::Config("hidden size must be >= 1".into()));
        }
        if let Some(t) = self.time_limit {
            if !(t > 0.0) {
                return Err(Error::Config(format!("time limit must be positive, got {t}")));
            }
        }
        Ok(())
    }
}

/// One line of the JSON training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_nll: f64,
    pub train_su: f64,
    pub val_perplexity: f64,
    pub lambda: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T: Scalar> {
    /// Parameters from the epoch with the lowest validation perplexity.
    pub model: GtmnSeq2Seq<T>,
    pub history: Vec<EpochLog>,
    pub best_epoch: usize,
}

/// Runs epochs of shuffled mini-batches until validation perplexity has not
/// improved for `patience` epochs or `max_epochs` is reached.
pub fn train<T: Scalar>(
    mut model: GtmnSeq2Seq<T>,
    train_set: &[TrainingExample],
    valid_set: &[TrainingExample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Empty("training split"));
    }
    if valid_set.is_empty() {
        return Err(Error::Empty("validation split"));
    }
    let mut opt = Adadelta::new(&model.params, cfg.optimizer);
    let mut grads = ParamGrads::zeros_like(&model.params);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut shuffler = rng::stream(cfg.seed, rng::BATCHING);
    let mut history = Vec::new();
    let mut best = (f64::INFINITY, model.params.clone(), 0usize);
    let mut stale = 0;
    let start = Instant::now();
    let mut last_epoch = 0.0;
    for epoch in 1..=cfg.max_epochs {
        let begun = start.elapsed().as_secs_f64();
        if matches!(cfg.time_limit, Some(limit) if epoch > 1 && begun + last_epoch > limit) {
            break;
        }
        order.shuffle(&mut shuffler);
        let mut sums = BatchStats::default();
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<TrainingExample> = chunk.iter().map(|&i| train_set[i].clone()).collect();
            grads.zero();
            let s = accumulate_gradients(&model, &batch, cfg.lambda, &mut grads)?;
            opt.step(&mut model.params, &mut grads)?;
            sums.loss += s.loss;
            sums.nll += s.nll;
            sums.su += s.su;
            batches += 1;
        }
        let ppl = perplexity(&model, valid_set)?;
        let log = EpochLog {
            epoch,
            train_loss: sums.loss / batches as f64,
            train_nll: sums.nll / batches as f64,
            train_su: sums.su / batches as f64,
            val_perplexity: ppl,
            lambda: cfg.lambda,
        };
        on_epoch(&log);
        history.push(log);
        last_epoch = start.elapsed().as_secs_f64() - begun;
        if ppl < best.0 {
            best = (ppl, model.params.clone(), epoch);
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    model.params = best.1;
    Ok(TrainOutcome {
        model,
        history,
        best_epoch: best.2,
    })
}

#[cfg(test)]
pub(crate) mod tests;
