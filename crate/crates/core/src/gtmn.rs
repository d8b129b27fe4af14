//! Goal-tracking memory: one cell per meta-word variable with a frozen key
//! and goal, and a value vector updated at every decoding step.

use std::collections::HashMap;
use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamSet, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::metaword::{meta_tokenize, Attribute, AttributeSchema, MetaWord, Value};
use crate::scalar::Scalar;

/// Token inventory of the meta-word embedding table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct MetaVocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for MetaVocab {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }
}

impl From<MetaVocab> for Vec<String> {
    fn from(v: MetaVocab) -> Self {
        v.tokens
    }
}

impl MetaVocab {
    pub fn from_schema(schema: &AttributeSchema) -> Self {
        schema.meta_tokens().into()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn ids(&self, text: &str) -> Result<Vec<usize>> {
        let toks = meta_tokenize(text);
        if toks.is_empty() {
            return Err(Error::UnknownMetaToken(text.to_string()));
        }
        toks.into_iter()
            .map(|t| self.index.get(&t).copied().ok_or(Error::UnknownMetaToken(t)))
            .collect()
    }
}

/// Plain-value memory panel. Rows of `keys`, `goals` and `values` are cells.
#[derive(Clone, Debug, PartialEq)]
pub struct StatePanel<T: Scalar> {
    pub attributes: Vec<Attribute>,
    pub keys: Tensor<T>,
    pub goals: Tensor<T>,
    pub values: Tensor<T>,
    pub step: usize,
}

impl<T: Scalar> StatePanel<T> {
    pub fn len(&self) -> usize {
        self.attributes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.attributes.is_empty()
    }

    pub fn d(&self) -> usize {
        self.keys.shape()[1]
    }

    /// Row `i` as `(key, goal, value)`.
    pub fn cell(&self, i: usize) -> (&[T], &[T], &[T]) {
        let d = self.d();
        let r = i * d..(i + 1) * d;
        (
            &self.keys.data()[r.clone()],
            &self.goals.data()[r.clone()],
            &self.values.data()[r],
        )
    }

    /// `||v_i - g_i||` per cell.
    pub fn goal_distance(&self) -> Vec<f64> {
        (0..self.len())
            .map(|i| {
                let (_, g, v) = self.cell(i);
                g.iter()
                    .zip(v)
                    .map(|(&g, &v)| (v - g).to_f64_lossy().powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .collect()
    }
}

/// Panel tensors on a tape. `key_proj = K W_key` does not change while
/// decoding, so it is computed once.
#[derive(Clone, Copy, Debug)]
pub struct PanelVars {
    pub keys: Var,
    pub goals: Var,
    pub values: Var,
    pub key_proj: Var,
}

#[derive(Clone, Debug)]
pub struct Gtmn {
    pub embedding: ParamId,
    /// `[d, 3d]` blocks of the gate/SUB/ADD weights acting on the key, the
    /// previous value and the decoder state; columns are gate | SUB | ADD.
    pub w_key: ParamId,
    pub w_value: ParamId,
    pub w_state: ParamId,
    pub b: ParamId,
    /// `[2d, d]` projection of the difference vector.
    pub u: ParamId,
    pub d: usize,
}

impl Gtmn {
    pub fn register<T: Scalar, R: Rng>(
        params: &mut ParamSet<T>,
        prefix: &str,
        meta_vocab: usize,
        d: usize,
        rng: &mut R,
    ) -> Self {
        let s = 1.0 / (d as f64).sqrt();
        Self {
            embedding: params.add_uniform(format!("{prefix}.emb"), &[meta_vocab.max(1), d], 0.5, rng),
            w_key: params.add_uniform(format!("{prefix}.w_key"), &[d, 3 * d], s, rng),
            w_value: params.add_uniform(format!("{prefix}.w_value"), &[d, 3 * d], s, rng),
            w_state: params.add_uniform(format!("{prefix}.w_state"), &[d, 3 * d], s, rng),
            b: params.add_zeros(format!("{prefix}.b"), &[1, 3 * d]),
            u: params.add_uniform(format!("{prefix}.u"), &[2 * d, d], 1.0 / (2.0 * d as f64).sqrt(), rng),
            d,
        }
    }

    /// Mean of the meta-word embeddings of `text`.
    pub fn bag<T: Scalar>(&self, tape: &mut Tape<'_, T>, vocab: &MetaVocab, text: &str) -> Result<Var> {
        let ids = vocab.ids(text)?;
        let table = tape.param(self.embedding);
        let rows = tape.embedding(table, &ids)?;
        if ids.len() == 1 {
            return Ok(rows);
        }
        let w = tape.constant(Tensor::filled(&[1, ids.len()], T::lit(1.0 / ids.len() as f64)));
        tape.matmul(w, rows)
    }

    /// Goal-space representation of `value` for the variable keyed by `attribute`.
    pub fn rep_value<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        vocab: &MetaVocab,
        attribute: Attribute,
        value: &Value,
    ) -> Result<Var> {
        match value {
            Value::Category(c) => {
                let b = self.bag(tape, vocab, c)?;
                Ok(tape.sigmoid(b))
            }
            Value::Real(x) => {
                let b = self.bag(tape, vocab, attribute.key())?;
                let s = tape.sigmoid(b);
                Ok(tape.scale(s, T::lit(*x)))
            }
        }
    }

    /// `(key, goal)` for one variable.
    pub fn rep<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        vocab: &MetaVocab,
        attribute: Attribute,
        value: &Value,
    ) -> Result<(Var, Var)> {
        let key = self.bag(tape, vocab, attribute.key())?;
        let goal = self.rep_value(tape, vocab, attribute, value)?;
        Ok((key, goal))
    }

    /// Builds the panel for `mw` on the tape, or `None` for an empty meta-word.
    pub fn init_panel<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        vocab: &MetaVocab,
        mw: &MetaWord,
    ) -> Result<Option<PanelVars>> {
        if mw.is_empty() {
            return Ok(None);
        }
        let mut keys = Vec::with_capacity(mw.len());
        let mut goals = Vec::with_capacity(mw.len());
        for v in mw.vars() {
            let (k, g) = self.rep(tape, vocab, v.attribute, &v.value)?;
            keys.push(k);
            goals.push(g);
        }
        let keys = tape.concat(&keys, 0)?;
        let goals = tape.concat(&goals, 0)?;
        let values = tape.constant(Tensor::zeros(&[mw.len(), self.d]));
        let key_proj = self.project_keys(tape, keys)?;
        Ok(Some(PanelVars {
            keys,
            goals,
            values,
            key_proj,
        }))
    }

    pub fn project_keys<T: Scalar>(&self, tape: &mut Tape<'_, T>, keys: Var) -> Result<Var> {
        let w = tape.param(self.w_key);
        tape.matmul(keys, w)
    }

    /// Places a plain panel on a tape (inference). `key_proj` may be reused
    /// across steps of the same session.
    pub fn panel_vars<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        panel: &StatePanel<T>,
        key_proj: &Tensor<T>,
    ) -> PanelVars {
        PanelVars {
            keys: tape.constant(panel.keys.clone()),
            goals: tape.constant(panel.goals.clone()),
            values: tape.constant(panel.values.clone()),
            key_proj: tape.constant(key_proj.clone()),
        }
    }

    /// Gate, SUB and ADD activations `[l, 3d]` for the step.
    pub fn gates<T: Scalar>(&self, tape: &mut Tape<'_, T>, panel: &PanelVars, s: Var) -> Result<Var> {
        let wv = tape.param(self.w_value);
        let ws = tape.param(self.w_state);
        let b = tape.param(self.b);
        let pv = tape.matmul(panel.values, wv)?;
        let ps = tape.matmul(s, ws)?;
        let ps = tape.add(ps, b)?;
        let pre = tape.add(panel.key_proj, pv)?;
        let pre = tape.add(pre, ps)?;
        Ok(tape.sigmoid(pre))
    }

    /// `v_t = v_{t-1} - g * SUB + (1 - g) * ADD`; returns the new panel with
    /// keys and goals carried over.
    pub fn state_update<T: Scalar>(&self, tape: &mut Tape<'_, T>, panel: &PanelVars, s: Var) -> Result<PanelVars> {
        let d = self.d;
        let act = self.gates(tape, panel, s)?;
        let gate = tape.slice(act, 1, 0, d)?;
        let sub = tape.slice(act, 1, d, d)?;
        let add = tape.slice(act, 1, 2 * d, d)?;
        let gs = tape.mul(gate, sub)?;
        let ng = tape.one_minus(gate);
        let ga = tape.mul(ng, add)?;
        let v = tape.sub(panel.values, gs)?;
        let v = tape.add(v, ga)?;
        Ok(PanelVars { values: v, ..*panel })
    }

    /// Returns `(o_t [1, d], a_t [1, l])`.
    pub fn difference_read<T: Scalar>(&self, tape: &mut Tape<'_, T>, panel: &PanelVars, s: Var) -> Result<(Var, Var)> {
        let l = tape.shape(panel.goals)[0];
        let diff = tape.sub(panel.goals, panel.values)?;
        let prod = tape.mul(panel.goals, panel.values)?;
        let dvec = tape.concat(&[diff, prod], 1)?;
        let u = tape.param(self.u);
        let proj = tape.matmul(dvec, u)?;
        let col = tape.reshape(s, &[self.d, 1])?;
        let scores = tape.matmul(proj, col)?;
        let scores = tape.reshape(scores, &[1, l])?;
        let a = tape.softmax(scores);
        let o = tape.matmul(a, proj)?;
        Ok((o, a))
    }

    /// Plain panel from tape values, e.g. after [`Gtmn::init_panel`].
    pub fn read_panel<T: Scalar>(
        tape: &Tape<'_, T>,
        vars: &PanelVars,
        attributes: Vec<Attribute>,
        step: usize,
    ) -> StatePanel<T> {
        StatePanel {
            attributes,
            keys: tape.value(vars.keys).clone(),
            goals: tape.value(vars.goals).clone(),
            values: tape.value(vars.values).clone(),
            step,
        }
    }
}

/// One CSV row of a decoding trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: usize,
    pub token: String,
    pub key: String,
    pub goal_distance: f64,
    pub attention: f64,
}

pub const TRACE_HEADER: &str = "step,token,key,goal_distance,attention";

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn write_trace_csv<W: Write>(mut out: W, records: &[TraceRecord]) -> Result<()> {
    writeln!(out, "{TRACE_HEADER}")?;
    for r in records {
        writeln!(
            out,
            "{},{},{},{},{}",
            r.step,
            csv_field(&r.token),
            csv_field(&r.key),
            r.goal_distance,
            r.attention
        )?;
    }
    Ok(())
}
