//! Greedy and beam-search decoding with a private memory panel per
//! hypothesis, meta-word sampling and decoding traces.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::corpus::{tokenize, BOS, EOS};
use crate::error::{Error, Result};
use crate::gtmn::{Gtmn, StatePanel, TraceRecord};
use crate::metaword::{MetaWord, MetaWordVariable};
use crate::model::GtmnSeq2Seq;
use crate::predictor::{MetaWordPredictor, VarDistribution};
use crate::scalar::Scalar;

/// Default decode cap: the longest length category plus EOS.
pub const MAX_DECODE_LEN: usize = 26;

/// Anything that scores the next token given a decoding state.
pub trait StepModel {
    type State: Clone;

    fn start(&self) -> Self::State;

    /// Log-probabilities of the next token after feeding `prev`, and the
    /// state that produced them.
    fn advance(&self, state: &Self::State, prev: usize) -> Result<(Vec<f64>, Self::State)>;
}

#[derive(Clone, Debug)]
pub struct Hypothesis<S> {
    /// Emitted tokens, including a final EOS when present.
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    pub state: S,
    pub finished: bool,
}

impl<S> Hypothesis<S> {
    /// Tokens without the terminating EOS.
    pub fn response(&self, eos: Option<usize>) -> &[usize] {
        match (self.tokens.last(), eos) {
            (Some(&t), Some(e)) if t == e => &self.tokens[..self.tokens.len() - 1],
            _ => &self.tokens,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub beam: usize,
    pub max_len: usize,
    /// Rank by mean per-token log-probability instead of the sum.
    pub length_norm: bool,
    pub bos: usize,
    pub eos: Option<usize>,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            beam: 5,
            max_len: MAX_DECODE_LEN,
            length_norm: false,
            bos: BOS,
            eos: Some(EOS),
        }
    }
}

impl DecodeConfig {
    fn score(&self, log_prob: f64, len: usize) -> f64 {
        if self.length_norm && len > 0 {
            log_prob / len as f64
        } else {
            log_prob
        }
    }

    fn check(&self) -> Result<()> {
        if self.beam == 0 {
            return Err(Error::Config("beam size must be >= 1".into()));
        }
        if self.max_len == 0 {
            return Err(Error::Config("max decode length must be >= 1".into()));
        }
        Ok(())
    }
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

pub fn greedy<M: StepModel>(model: &M, cfg: &DecodeConfig) -> Result<Hypothesis<M::State>> {
    cfg.check()?;
    let mut h = Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        state: model.start(),
        finished: false,
    };
    while !h.finished {
        let prev = h.tokens.last().copied().unwrap_or(cfg.bos);
        let (lp, state) = model.advance(&h.state, prev)?;
        let y = argmax(&lp);
        h.tokens.push(y);
        h.log_prob += lp[y];
        h.state = state;
        h.finished = Some(y) == cfg.eos || h.tokens.len() >= cfg.max_len;
    }
    Ok(h)
}

/// Shrinking-beam search: each step keeps the best `beam` extensions over
/// all live hypotheses; extensions that end move to the finished list and
/// give up their slot. Returns up to `beam` hypotheses, best first. Ties
/// are broken by hypothesis order, then token id.
pub fn beam_search<M: StepModel>(model: &M, cfg: &DecodeConfig) -> Result<Vec<Hypothesis<M::State>>> {
    cfg.check()?;
    let mut alive = vec![Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        state: model.start(),
        finished: false,
    }];
    let mut finished: Vec<Hypothesis<M::State>> = Vec::new();
    while !alive.is_empty() && finished.len() < cfg.beam {
        let slots = cfg.beam - finished.len();
        // (score, log_prob, hypothesis index, token)
        let mut cands: Vec<(f64, f64, usize, usize)> = Vec::new();
        let mut states = Vec::with_capacity(alive.len());
        for (i, h) in alive.iter().enumerate() {
            let prev = h.tokens.last().copied().unwrap_or(cfg.bos);
            let (lp, state) = model.advance(&h.state, prev)?;
            let mut ranked: Vec<usize> = (0..lp.len()).collect();
            ranked.sort_by(|&a, &b| lp[b].total_cmp(&lp[a]).then(a.cmp(&b)));
            for &y in ranked.iter().take(slots) {
                let total = h.log_prob + lp[y];
                cands.push((cfg.score(total, h.tokens.len() + 1), total, i, y));
            }
            states.push(state);
        }
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.2.cmp(&b.2)).then(a.3.cmp(&b.3)));
        let mut next = Vec::with_capacity(slots);
        for &(_, total, i, y) in cands.iter().take(slots) {
            let mut tokens = alive[i].tokens.clone();
            tokens.push(y);
            let done = Some(y) == cfg.eos || tokens.len() >= cfg.max_len;
            let h = Hypothesis {
                tokens,
                log_prob: total,
                state: states[i].clone(),
                finished: done,
            };
            if done {
                finished.push(h);
            } else {
                next.push(h);
            }
        }
        alive = next;
    }
    finished.sort_by(|a, b| {
        cfg.score(b.log_prob, b.tokens.len())
            .total_cmp(&cfg.score(a.log_prob, a.tokens.len()))
    });
    Ok(finished)
}

/// Plain-value decoder state: `s_t` and the hypothesis' own panel.
#[derive(Clone, Debug, PartialEq)]
pub struct DecodeState<T: Scalar> {
    pub s: Tensor<T>,
    pub panel: Option<StatePanel<T>>,
}

/// Encoded message and meta-word, shared read-only by every hypothesis.
pub struct Session<'m, T: Scalar> {
    model: &'m GtmnSeq2Seq<T>,
    h: Tensor<T>,
    hw: Tensor<T>,
    key_proj: Option<Tensor<T>>,
    start: DecodeState<T>,
}

/// Details of one decoding step, for traces.
#[derive(Clone, Debug)]
pub struct StepDetail<T: Scalar> {
    pub log_probs: Vec<f64>,
    pub state: DecodeState<T>,
    pub read: Option<Vec<f64>>,
    pub context: Vec<f64>,
}

impl<'m, T: Scalar> Session<'m, T> {
    pub fn new(model: &'m GtmnSeq2Seq<T>, message: &[usize], mw: &MetaWord) -> Result<Self> {
        if message.is_empty() {
            return Err(Error::Empty("message"));
        }
        let mut tape = Tape::new(&model.params);
        let (_, src, s0) = model.encode(&mut tape, message)?;
        let panel = model.init_panel(&mut tape, mw)?;
        let attrs = mw.vars().iter().map(|v| v.attribute).collect();
        Ok(Self {
            model,
            h: tape.value(src.h).clone(),
            hw: tape.value(src.hw).clone(),
            key_proj: panel.map(|p| tape.value(p.key_proj).clone()),
            start: DecodeState {
                s: tape.value(s0).clone(),
                panel: panel.map(|p| Gtmn::read_panel(&tape, &p, attrs, 0)),
            },
        })
    }

    pub fn from_text(model: &'m GtmnSeq2Seq<T>, message: &str, mw: &MetaWord) -> Result<Self> {
        let ids = model.spec.msg_vocab.encode(&tokenize(message));
        Self::new(model, &ids, mw)
    }

    pub fn step_detail(&self, state: &DecodeState<T>, prev: usize) -> Result<StepDetail<T>> {
        let m = self.model;
        let mut tape = Tape::new(&m.params);
        let src = crate::model::SourceVars {
            h: tape.constant(self.h.clone()),
            hw: tape.constant(self.hw.clone()),
        };
        let s_prev = tape.constant(state.s.clone());
        let panel_vars = match (&state.panel, &self.key_proj) {
            (Some(p), Some(kp)) => Some(m.layers.gtmn.panel_vars(&mut tape, p, kp)),
            _ => None,
        };
        let st = m.step(&mut tape, src, s_prev, prev, panel_vars.as_ref())?;
        let panel = match (&state.panel, st.panel) {
            (Some(old), Some(pv)) => Some(StatePanel {
                attributes: old.attributes.clone(),
                keys: old.keys.clone(),
                goals: old.goals.clone(),
                values: tape.value(pv.values).clone(),
                step: old.step + 1,
            }),
            _ => None,
        };
        Ok(StepDetail {
            log_probs: tape.value(st.log_probs).to_f64_vec(),
            state: DecodeState {
                s: tape.value(st.state).clone(),
                panel,
            },
            read: st.read.map(|a| tape.value(a).to_f64_vec()),
            context: tape.value(st.context).to_f64_vec(),
        })
    }
}

impl<T: Scalar> StepModel for Session<'_, T> {
    type State = DecodeState<T>;

    fn start(&self) -> DecodeState<T> {
        self.start.clone()
    }

    fn advance(&self, state: &DecodeState<T>, prev: usize) -> Result<(Vec<f64>, DecodeState<T>)> {
        let d = self.step_detail(state, prev)?;
        Ok((d.log_probs, d.state))
    }
}

/// Decoded response for one meta-word.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    pub tokens: Vec<usize>,
    pub words: Vec<String>,
    pub log_prob: f64,
}

/// Top-ranked responses for `message` under `mw`.
pub fn decode<T: Scalar>(
    model: &GtmnSeq2Seq<T>,
    message: &[usize],
    mw: &MetaWord,
    cfg: &DecodeConfig,
) -> Result<Vec<Decoded>> {
    let session = Session::new(model, message, mw)?;
    let hyps = beam_search(&session, cfg)?;
    hyps.into_iter()
        .map(|h| {
            let tokens = h.response(cfg.eos).to_vec();
            Ok(Decoded {
                words: model.spec.resp_vocab.decode(&tokens)?,
                tokens,
                log_prob: h.log_prob,
            })
        })
        .collect()
}

/// One line of generation output.
#[derive(Clone, Debug, PartialEq)]
pub struct Generation {
    pub message: String,
    pub metaword: MetaWord,
    pub response: String,
    pub log_prob: f64,
}

impl Generation {
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "message": self.message,
            "metaword": self.metaword.to_json(),
            "response": self.response,
            "log_prob": self.log_prob,
        })
    }

    pub fn from_json(j: &serde_json::Value) -> Result<Self> {
        let field = |k: &str| {
            j.get(k).ok_or_else(|| Error::Parse {
                line: 0,
                msg: format!("missing field {k:?}"),
            })
        };
        let text = |k: &str| -> Result<String> {
            field(k)?.as_str().map(str::to_string).ok_or_else(|| Error::Parse {
                line: 0,
                msg: format!("field {k:?} is not a string"),
            })
        };
        Ok(Self {
            message: text("message")?,
            metaword: MetaWord::from_json(field("metaword")?)?,
            response: text("response")?,
            log_prob: field("log_prob")?.as_f64().unwrap_or(f64::NAN),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerateConfig {
    /// Meta-words (and responses) per message.
    pub samples: usize,
    pub decode: DecodeConfig,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self {
            samples: 10,
            decode: DecodeConfig::default(),
        }
    }
}

/// Meta-word for one draw: override variables win, the rest are sampled
/// from the predictor.
fn draw_metaword<T: Scalar, R: Rng>(
    model: &GtmnSeq2Seq<T>,
    dist: Option<&[VarDistribution]>,
    overrides: &MetaWord,
    rng: &mut R,
) -> Result<MetaWord> {
    let mut vars = Vec::with_capacity(model.schema().len());
    for decl in model.schema().decls() {
        let value = match overrides.get(decl.attribute) {
            Some(v) => v.clone(),
            None => {
                let d = dist
                    .and_then(|ds| ds.iter().find(|d| d.attribute() == decl.attribute))
                    .ok_or_else(|| {
                        Error::metaword(
                            decl.attribute.key(),
                            "not overridden and no predictor distribution available",
                        )
                    })?;
                d.sample(rng)
            }
        };
        vars.push(MetaWordVariable {
            attribute: decl.attribute,
            value,
        });
    }
    let mw = MetaWord::new(vars)?;
    model.schema().validate(&mw)?;
    Ok(mw)
}

/// `cfg.samples` (meta-word, top-1 response) pairs for `message`.
pub fn generate<T: Scalar, R: Rng>(
    model: &GtmnSeq2Seq<T>,
    predictor: Option<&MetaWordPredictor<T>>,
    message: &str,
    overrides: Option<&MetaWord>,
    cfg: &GenerateConfig,
    rng: &mut R,
) -> Result<Vec<Generation>> {
    let empty = MetaWord::default();
    let overrides = overrides.unwrap_or(&empty);
    for v in overrides.vars() {
        model.schema().validate_variable(v)?;
    }
    let toks = tokenize(message);
    if toks.is_empty() {
        return Err(Error::Empty("message"));
    }
    let ids = model.spec.msg_vocab.encode(&toks);
    let needs_predictor = model
        .schema()
        .decls()
        .iter()
        .any(|d| overrides.get(d.attribute).is_none());
    let dist = match (needs_predictor, predictor) {
        (true, Some(p)) => Some(p.predict_distributions(message)?.vars),
        _ => None,
    };
    let mut out = Vec::with_capacity(cfg.samples);
    for _ in 0..cfg.samples {
        let mw = draw_metaword(model, dist.as_deref(), overrides, rng)?;
        let best = decode(model, &ids, &mw, &cfg.decode)?
            .into_iter()
            .next()
            .ok_or(Error::Empty("beam"))?;
        out.push(Generation {
            message: message.to_string(),
            metaword: mw,
            response: best.words.join(" "),
            log_prob: best.log_prob,
        });
    }
    Ok(out)
}

/// Greedy decode recording, per emitted word and cell, the goal distance
/// after the update and the difference-read weight. The EOS step is not
/// recorded.
pub fn trace_decode<T: Scalar>(
    model: &GtmnSeq2Seq<T>,
    message: &[usize],
    mw: &MetaWord,
    max_len: usize,
) -> Result<(Decoded, Vec<TraceRecord>)> {
    let cfg = DecodeConfig {
        beam: 1,
        max_len,
        ..DecodeConfig::default()
    };
    cfg.check()?;
    let session = Session::new(model, message, mw)?;
    let mut state = session.start();
    let mut prev = cfg.bos;
    let mut tokens = Vec::new();
    let mut log_prob = 0.0;
    let mut records = Vec::new();
    loop {
        let d = session.step_detail(&state, prev)?;
        let y = argmax(&d.log_probs);
        log_prob += d.log_probs[y];
        tokens.push(y);
        let token = model.spec.resp_vocab.token(y).unwrap_or("<unk>").to_string();
        let is_eos = Some(y) == cfg.eos;
        if let (false, Some(panel), Some(read)) = (is_eos, &d.state.panel, &d.read) {
            for ((attr, dist), a) in panel.attributes.iter().zip(panel.goal_distance()).zip(read) {
                records.push(TraceRecord {
                    step: tokens.len(),
                    token: token.clone(),
                    key: attr.key().to_string(),
                    goal_distance: dist,
                    attention: *a,
                });
            }
        }
        state = d.state;
        prev = y;
        if Some(y) == cfg.eos || tokens.len() >= cfg.max_len {
            break;
        }
    }
    let resp: Vec<usize> = match tokens.last() {
        Some(&EOS) => tokens[..tokens.len() - 1].to_vec(),
        _ => tokens.clone(),
    };
    Ok((
        Decoded {
            words: model.spec.resp_vocab.decode(&resp)?,
            tokens: resp,
            log_prob,
        },
        records,
    ))
}
