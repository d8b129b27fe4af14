//! The full generator: attention encoder-decoder with the goal-tracking
//! memory in the decoding loop.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamSet, Tape, Tensor, Var};
use crate::corpus::{Vocab, BOS};
use crate::error::{Error, Result};
use crate::gtmn::{Gtmn, MetaVocab, PanelVars};
use crate::metaword::{AttributeSchema, MetaWord};
use crate::scalar::Scalar;
use crate::seq2seq::{Attention, BiGruEncoder, EncoderStates, Gru, InitState, OutputLayer};

/// Everything needed to rebuild the parameter layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub d: usize,
    pub schema: AttributeSchema,
    pub msg_vocab: Vocab,
    pub resp_vocab: Vocab,
    pub meta_vocab: MetaVocab,
}

#[derive(Clone, Debug)]
pub struct Layers {
    pub encoder: BiGruEncoder,
    pub init: InitState,
    pub attention: Attention,
    pub dec_embedding: ParamId,
    pub decoder: Gru,
    pub gtmn: Gtmn,
    pub output: OutputLayer,
}

#[derive(Clone, Debug)]
pub struct GtmnSeq2Seq<T: Scalar> {
    pub spec: ModelSpec,
    pub params: ParamSet<T>,
    pub layers: Layers,
}

/// Encoder output on a tape, with the attention projection `H W_h`.
#[derive(Clone, Copy, Debug)]
pub struct SourceVars {
    pub h: Var,
    pub hw: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct StepVars {
    pub state: Var,
    pub panel: Option<PanelVars>,
    pub log_probs: Var,
    /// Difference-read weights `[1, l]`.
    pub read: Option<Var>,
    /// Context attention weights `[1, T_x]`.
    pub context: Var,
}

/// Teacher-forced pass: one entry per predicted token (the response
/// followed by EOS).
#[derive(Clone, Debug)]
pub struct ForcedPass {
    pub steps: Vec<StepVars>,
    pub initial_panel: Option<PanelVars>,
}

impl<T: Scalar> GtmnSeq2Seq<T> {
    pub fn new<R: Rng>(
        d: usize,
        schema: AttributeSchema,
        msg_vocab: Vocab,
        resp_vocab: Vocab,
        rng: &mut R,
    ) -> Result<Self> {
        if d == 0 {
            return Err(Error::Config("hidden size must be positive".into()));
        }
        let meta_vocab = MetaVocab::from_schema(&schema);
        let spec = ModelSpec {
            d,
            schema,
            msg_vocab,
            resp_vocab,
            meta_vocab,
        };
        Ok(Self::from_spec(spec, rng))
    }

    pub fn from_spec<R: Rng>(spec: ModelSpec, rng: &mut R) -> Self {
        let d = spec.d;
        let mut p = ParamSet::new();
        let encoder = BiGruEncoder::register(&mut p, "enc", spec.msg_vocab.len(), d, rng);
        let init = InitState::register(&mut p, "dec.init", d, rng);
        let attention = Attention::register(&mut p, "att", d, rng);
        let dec_embedding = p.add_uniform("dec.emb", &[spec.resp_vocab.len(), d], 0.1, rng);
        let decoder = Gru::register(&mut p, "dec.gru", 3 * d, d, rng);
        let gtmn = Gtmn::register(&mut p, "gtmn", spec.meta_vocab.len(), d, rng);
        let output = OutputLayer::register(&mut p, "out", d, spec.resp_vocab.len(), rng);
        Self {
            spec,
            params: p,
            layers: Layers {
                encoder,
                init,
                attention,
                dec_embedding,
                decoder,
                gtmn,
                output,
            },
        }
    }

    pub fn d(&self) -> usize {
        self.spec.d
    }

    pub fn schema(&self) -> &AttributeSchema {
        &self.spec.schema
    }

    pub fn encode(&self, tape: &mut Tape<'_, T>, msg: &[usize]) -> Result<(EncoderStates, SourceVars, Var)> {
        let enc = self.layers.encoder.encode(tape, msg)?;
        let hw = self.layers.attention.project_memory(tape, enc.h)?;
        let s0 = self.layers.init.apply(tape, &enc)?;
        Ok((enc, SourceVars { h: enc.h, hw }, s0))
    }

    /// Panel for `mw`, which must conform to the model's schema.
    pub fn init_panel(&self, tape: &mut Tape<'_, T>, mw: &MetaWord) -> Result<Option<PanelVars>> {
        self.spec.schema.validate(mw)?;
        self.layers.gtmn.init_panel(tape, &self.spec.meta_vocab, mw)
    }

    /// One decoding step: context attention from `s_{t-1}`, GRU to `s_t`,
    /// panel update, difference read, then word prediction.
    pub fn step(
        &self,
        tape: &mut Tape<'_, T>,
        src: SourceVars,
        s_prev: Var,
        prev: usize,
        panel: Option<&PanelVars>,
    ) -> Result<StepVars> {
        let l = &self.layers;
        let (ctx, alpha) = l.attention.context(tape, s_prev, src.h, src.hw)?;
        let table = tape.param(l.dec_embedding);
        let e = tape.embedding(table, &[prev])?;
        let x = tape.concat(&[e, ctx], 1)?;
        let s = l.decoder.step(tape, x, s_prev)?;
        let (panel, o, read) = match panel {
            Some(p) => {
                let next = l.gtmn.state_update(tape, p, s)?;
                let (o, a) = l.gtmn.difference_read(tape, &next, s)?;
                (Some(next), o, Some(a))
            }
            None => (None, tape.constant(Tensor::zeros(&[1, self.d()])), None),
        };
        let log_probs = l.output.log_probs(tape, e, o, s)?;
        Ok(StepVars {
            state: s,
            panel,
            log_probs,
            read,
            context: alpha,
        })
    }

    /// Feeds BOS then the gold tokens; `targets` excludes BOS and is expected
    /// to end with EOS.
    pub fn teacher_forced(
        &self,
        tape: &mut Tape<'_, T>,
        msg: &[usize],
        mw: &MetaWord,
        targets: &[usize],
    ) -> Result<ForcedPass> {
        let (_, src, s0) = self.encode(tape, msg)?;
        let initial_panel = self.init_panel(tape, mw)?;
        let mut panel = initial_panel;
        let mut s = s0;
        let mut prev = BOS;
        let mut steps = Vec::with_capacity(targets.len());
        for &y in targets {
            let st = self.step(tape, src, s, prev, panel.as_ref())?;
            s = st.state;
            panel = st.panel;
            prev = y;
            steps.push(st);
        }
        Ok(ForcedPass { steps, initial_panel })
    }

    /// Named parameter tensors as f64, in registration order.
    pub fn named_tensors(&self) -> Vec<(String, Tensor<f64>)> {
        self.params.iter().map(|(_, n, t)| (n.to_string(), t.cast())).collect()
    }

    /// Rebuilds a model from its spec and stored tensors.
    pub fn from_tensors(spec: ModelSpec, tensors: &[(String, Tensor<f64>)]) -> Result<Self> {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut m = Self::from_spec(spec, &mut rng);
        let cast: Vec<(String, Tensor<T>)> = tensors.iter().map(|(n, t)| (n.clone(), t.cast())).collect();
        m.params.load_from(&cast)?;
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::EOS;
    use crate::metaword::{Attribute, MetaWordVariable, Value};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn toy_vocab(n: usize) -> Vocab {
        Vocab::from_ranked((0..n).map(|i| (format!("w{i}"), (n - i) as u64)))
    }

    fn mw() -> MetaWord {
        MetaWord::new(vec![
            MetaWordVariable {
                attribute: Attribute::RL,
                value: Value::Category("3".into()),
            },
            MetaWordVariable {
                attribute: Attribute::MU,
                value: Value::Category("false".into()),
            },
        ])
        .unwrap()
    }

    fn model(seed: u64) -> GtmnSeq2Seq<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let schema = AttributeSchema::from_attributes(&[Attribute::RL, Attribute::MU]);
        GtmnSeq2Seq::new(6, schema, toy_vocab(8), toy_vocab(9), &mut rng).unwrap()
    }

    #[test]
    fn step_distribution_sums_to_one() {
        let m = model(1);
        let mut tape = Tape::new(&m.params);
        let pass = m.teacher_forced(&mut tape, &[4, 5, 6], &mw(), &[4, 7, EOS]).unwrap();
        assert_eq!(pass.steps.len(), 3);
        for st in &pass.steps {
            let s: f64 = tape.value(st.log_probs).data().iter().map(|x| x.exp()).sum();
            assert!((s - 1.0).abs() < 1e-9);
            let c: f64 = tape.value(st.context).data().iter().sum();
            assert!((c - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_output_layer_is_uniform() {
        let mut m = model(2);
        for id in [m.layers.output.w, m.layers.output.b] {
            m.params.get_mut(id).data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
        let mut tape = Tape::new(&m.params);
        let pass = m.teacher_forced(&mut tape, &[4, 5], &mw(), &[EOS]).unwrap();
        let v = m.spec.resp_vocab.len() as f64;
        for &lp in tape.value(pass.steps[0].log_probs).data() {
            assert!((lp + v.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn schema_violation_is_rejected() {
        let m = model(3);
        let mut tape = Tape::new(&m.params);
        let bad = MetaWord::new(vec![MetaWordVariable {
            attribute: Attribute::RL,
            value: Value::Category("30".into()),
        }])
        .unwrap();
        assert!(m.teacher_forced(&mut tape, &[4], &bad, &[EOS]).is_err());
    }

    #[test]
    fn tensors_round_trip_reproduces_forward() {
        let m = model(4);
        let back = GtmnSeq2Seq::<f64>::from_tensors(m.spec.clone(), &m.named_tensors()).unwrap();
        let run = |m: &GtmnSeq2Seq<f64>| {
            let mut tape = Tape::new(&m.params);
            let pass = m.teacher_forced(&mut tape, &[4, 5, 6], &mw(), &[5, EOS]).unwrap();
            tape.value(pass.steps[1].log_probs).clone()
        };
        assert_eq!(run(&m), run(&back));
    }

    #[test]
    fn hand_case_prediction_d2_vocab3() {
        // Output layer only: logits = [e ; o ; s] W + b
        let mut p = ParamSet::<f64>::new();
        let w: Vec<f64> = (0..18).map(|i| (i as f64 - 9.0) / 10.0).collect();
        let out = OutputLayer {
            w: p.add("w", Tensor::from_f64(&[6, 3], &w).unwrap()),
            b: p.add("b", Tensor::from_f64(&[1, 3], &[0.1, 0.0, -0.1]).unwrap()),
        };
        let e = [0.5, -0.5];
        let o = [1.0, 0.0];
        let s = [0.2, 0.3];
        let mut tape = Tape::new(&p);
        let ev = tape.constant(Tensor::row(e.to_vec()));
        let ov = tape.constant(Tensor::row(o.to_vec()));
        let sv = tape.constant(Tensor::row(s.to_vec()));
        let lp = out.log_probs(&mut tape, ev, ov, sv).unwrap();
        let x: Vec<f64> = e.iter().chain(&o).chain(&s).copied().collect();
        let b = [0.1, 0.0, -0.1];
        let logits: Vec<f64> = (0..3)
            .map(|j| b[j] + (0..6).map(|i| x[i] * w[i * 3 + j]).sum::<f64>())
            .collect();
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        for j in 0..3 {
            assert!((tape.value(lp).data()[j].exp() - logits[j].exp() / z).abs() < 1e-15);
        }
        // shift invariance
        let shifted = tape.constant(Tensor::row(logits.iter().map(|l| l + 7.0).collect()));
        let sm = tape.softmax(shifted);
        for j in 0..3 {
            assert!((tape.value(sm).data()[j] - logits[j].exp() / z).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_schema_runs_without_panel() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = GtmnSeq2Seq::<f64>::new(4, AttributeSchema::empty(), toy_vocab(6), toy_vocab(6), &mut rng).unwrap();
        let mut tape = Tape::new(&m.params);
        let pass = m
            .teacher_forced(&mut tape, &[4], &MetaWord::new(vec![]).unwrap(), &[5, EOS])
            .unwrap();
        assert!(pass.initial_panel.is_none());
        assert!(pass.steps.iter().all(|s| s.read.is_none()));
    }
}
