//! Bi-directional GRU encoder, additive attention and the GRU decoder cell.

use rand::Rng;

use crate::autodiff::{ParamId, ParamSet, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

fn fan_in_scale(fan_in: usize) -> f64 {
    1.0 / (fan_in as f64).sqrt()
}

/// GRU with fused gate weights; columns are ordered reset | update | candidate.
#[derive(Clone, Debug)]
pub struct Gru {
    pub wx: ParamId,
    pub wh: ParamId,
    pub bx: ParamId,
    pub bh: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl Gru {
    pub fn register<T: Scalar, R: Rng>(
        params: &mut ParamSet<T>,
        prefix: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let s = fan_in_scale(hidden);
        Self {
            wx: params.add_uniform(format!("{prefix}.wx"), &[input, 3 * hidden], fan_in_scale(input), rng),
            wh: params.add_uniform(format!("{prefix}.wh"), &[hidden, 3 * hidden], s, rng),
            bx: params.add_zeros(format!("{prefix}.bx"), &[1, 3 * hidden]),
            bh: params.add_zeros(format!("{prefix}.bh"), &[1, 3 * hidden]),
            input,
            hidden,
        }
    }

    /// Input projections `x W_x + b_x` for a whole `[n, input]` sequence.
    pub fn project_inputs<T: Scalar>(&self, tape: &mut Tape<'_, T>, xs: Var) -> Result<Var> {
        let wx = tape.param(self.wx);
        let bx = tape.param(self.bx);
        let p = tape.matmul(xs, wx)?;
        tape.add(p, bx)
    }

    pub fn step<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var, h: Var) -> Result<Var> {
        let gx = self.project_inputs(tape, x)?;
        self.step_projected(tape, gx, h)
    }

    /// One step given the `[1, 3h]` input projection.
    pub fn step_projected<T: Scalar>(&self, tape: &mut Tape<'_, T>, gx: Var, h: Var) -> Result<Var> {
        let d = self.hidden;
        let wh = tape.param(self.wh);
        let bh = tape.param(self.bh);
        let gh = tape.matmul(h, wh)?;
        let gh = tape.add(gh, bh)?;

        let xr = tape.slice(gx, 1, 0, d)?;
        let hr = tape.slice(gh, 1, 0, d)?;
        let r = tape.add(xr, hr)?;
        let r = tape.sigmoid(r);

        let xz = tape.slice(gx, 1, d, d)?;
        let hz = tape.slice(gh, 1, d, d)?;
        let z = tape.add(xz, hz)?;
        let z = tape.sigmoid(z);

        let xn = tape.slice(gx, 1, 2 * d, d)?;
        let hn = tape.slice(gh, 1, 2 * d, d)?;
        let rn = tape.mul(r, hn)?;
        let n = tape.add(xn, rn)?;
        let n = tape.tanh(n);

        // h' = (1 - z) n + z h = n + z (h - n)
        let diff = tape.sub(h, n)?;
        let zd = tape.mul(z, diff)?;
        tape.add(n, zd)
    }
}

/// Hidden states of a message: `h` is `[T, 2d]` with forward states in the
/// first `d` columns and backward states in the last `d`.
#[derive(Clone, Copy, Debug)]
pub struct EncoderStates {
    pub h: Var,
    pub fwd_last: Var,
    pub bwd_first: Var,
    pub len: usize,
}

#[derive(Clone, Debug)]
pub struct BiGruEncoder {
    pub embedding: ParamId,
    pub fwd: Gru,
    pub bwd: Gru,
    pub d: usize,
}

impl BiGruEncoder {
    pub fn register<T: Scalar, R: Rng>(
        params: &mut ParamSet<T>,
        prefix: &str,
        vocab: usize,
        d: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            embedding: params.add_uniform(format!("{prefix}.emb"), &[vocab, d], 0.1, rng),
            fwd: Gru::register(params, &format!("{prefix}.fwd"), d, d, rng),
            bwd: Gru::register(params, &format!("{prefix}.bwd"), d, d, rng),
            d,
        }
    }

    pub fn encode<T: Scalar>(&self, tape: &mut Tape<'_, T>, ids: &[usize]) -> Result<EncoderStates> {
        if ids.is_empty() {
            return Err(Error::Empty("message"));
        }
        let n = ids.len();
        let table = tape.param(self.embedding);
        let x = tape.embedding(table, ids)?;
        let gf = self.fwd.project_inputs(tape, x)?;
        let gb = self.bwd.project_inputs(tape, x)?;

        let zero = tape.constant(Tensor::zeros(&[1, self.d]));
        let mut fwd = Vec::with_capacity(n);
        let mut h = zero;
        for t in 0..n {
            let g = tape.slice(gf, 0, t, 1)?;
            h = self.fwd.step_projected(tape, g, h)?;
            fwd.push(h);
        }
        let mut bwd = vec![zero; n];
        let mut h = zero;
        for t in (0..n).rev() {
            let g = tape.slice(gb, 0, t, 1)?;
            h = self.bwd.step_projected(tape, g, h)?;
            bwd[t] = h;
        }
        let hf = tape.concat(&fwd, 0)?;
        let hb = tape.concat(&bwd, 0)?;
        let h = tape.concat(&[hf, hb], 1)?;
        Ok(EncoderStates {
            h,
            fwd_last: fwd[n - 1],
            bwd_first: bwd[0],
            len: n,
        })
    }
}

/// `e_j = u^T tanh(W_s s + W_h h_j + b)`, `alpha = softmax(e)`,
/// `C = sum_j alpha_j h_j`.
#[derive(Clone, Debug)]
pub struct Attention {
    pub w_s: ParamId,
    pub w_h: ParamId,
    pub b: ParamId,
    pub u: ParamId,
}

impl Attention {
    pub fn register<T: Scalar, R: Rng>(params: &mut ParamSet<T>, prefix: &str, d: usize, rng: &mut R) -> Self {
        Self {
            w_s: params.add_uniform(format!("{prefix}.w_s"), &[d, d], fan_in_scale(d), rng),
            w_h: params.add_uniform(format!("{prefix}.w_h"), &[2 * d, d], fan_in_scale(2 * d), rng),
            b: params.add_zeros(format!("{prefix}.b"), &[1, d]),
            u: params.add_uniform(format!("{prefix}.u"), &[d, 1], fan_in_scale(d), rng),
        }
    }

    /// `H W_h`, reused at every decoding step.
    pub fn project_memory<T: Scalar>(&self, tape: &mut Tape<'_, T>, h: Var) -> Result<Var> {
        let w = tape.param(self.w_h);
        tape.matmul(h, w)
    }

    /// Returns `(C_t [1, 2d], alpha [1, T])`.
    pub fn context<T: Scalar>(&self, tape: &mut Tape<'_, T>, s_prev: Var, h: Var, hw: Var) -> Result<(Var, Var)> {
        let t_len = tape.shape(h)[0];
        let ws = tape.param(self.w_s);
        let b = tape.param(self.b);
        let u = tape.param(self.u);
        let q = tape.matmul(s_prev, ws)?;
        let q = tape.add(q, b)?;
        let e = tape.add(hw, q)?;
        let e = tape.tanh(e);
        let scores = tape.matmul(e, u)?;
        let scores = tape.reshape(scores, &[1, t_len])?;
        let alpha = tape.softmax(scores);
        let c = tape.matmul(alpha, h)?;
        Ok((c, alpha))
    }
}

/// `s_0 = tanh([h_fwd,T ; h_bwd,1] W + b)`.
#[derive(Clone, Debug)]
pub struct InitState {
    pub w: ParamId,
    pub b: ParamId,
}

impl InitState {
    pub fn register<T: Scalar, R: Rng>(params: &mut ParamSet<T>, prefix: &str, d: usize, rng: &mut R) -> Self {
        Self {
            w: params.add_uniform(format!("{prefix}.w"), &[2 * d, d], fan_in_scale(2 * d), rng),
            b: params.add_zeros(format!("{prefix}.b"), &[1, d]),
        }
    }

    pub fn apply<T: Scalar>(&self, tape: &mut Tape<'_, T>, enc: &EncoderStates) -> Result<Var> {
        let cat = tape.concat(&[enc.fwd_last, enc.bwd_first], 1)?;
        let w = tape.param(self.w);
        let b = tape.param(self.b);
        let x = tape.matmul(cat, w)?;
        let x = tape.add(x, b)?;
        Ok(tape.tanh(x))
    }
}

/// Word prediction `softmax(W_p [e(y_{t-1}) ; o_t ; s_t] + b_p)`, returned as
/// log-probabilities.
#[derive(Clone, Debug)]
pub struct OutputLayer {
    pub w: ParamId,
    pub b: ParamId,
}

impl OutputLayer {
    pub fn register<T: Scalar, R: Rng>(
        params: &mut ParamSet<T>,
        prefix: &str,
        d: usize,
        vocab: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            w: params.add_uniform(format!("{prefix}.w"), &[3 * d, vocab], fan_in_scale(3 * d), rng),
            b: params.add_zeros(format!("{prefix}.b"), &[1, vocab]),
        }
    }

    pub fn logits<T: Scalar>(&self, tape: &mut Tape<'_, T>, prev_emb: Var, o: Var, s: Var) -> Result<Var> {
        let x = tape.concat(&[prev_emb, o, s], 1)?;
        let w = tape.param(self.w);
        let b = tape.param(self.b);
        let l = tape.matmul(x, w)?;
        tape.add(l, b)
    }

    pub fn log_probs<T: Scalar>(&self, tape: &mut Tape<'_, T>, prev_emb: Var, o: Var, s: Var) -> Result<Var> {
        let l = self.logits(tape, prev_emb, o, s)?;
        Ok(tape.log_softmax(l))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn zero_params(p: &mut ParamSet<f64>) {
        let ids: Vec<_> = p.ids().collect();
        for id in ids {
            p.get_mut(id).data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
    }

    #[test]
    fn encoder_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = ParamSet::<f64>::new();
        let enc = BiGruEncoder::register(&mut p, "enc", 10, 8, &mut rng);
        let mut tape = Tape::new(&p);
        let out = enc.encode(&mut tape, &[4, 5, 6, 7, 8]).unwrap();
        assert_eq!(tape.shape(out.h), &[5, 16]);
        assert!(enc.encode(&mut tape, &[]).is_err());
    }

    #[test]
    fn zero_weights_give_identical_states_for_identical_tokens() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut p = ParamSet::<f64>::new();
        let enc = BiGruEncoder::register(&mut p, "enc", 10, 4, &mut rng);
        zero_params(&mut p);
        let mut tape = Tape::new(&p);
        let out = enc.encode(&mut tape, &[5, 5, 5]).unwrap();
        // z = 0.5, n = 0, h stays at 0 for every position
        assert!(tape.value(out.h).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn backward_direction_matches_stepping_the_reversed_sequence() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = ParamSet::<f64>::new();
        let enc = BiGruEncoder::register(&mut p, "enc", 12, 4, &mut rng);
        let ids = [4, 9, 2, 7];
        let mut tape = Tape::new(&p);
        let out = enc.encode(&mut tape, &ids).unwrap();
        let h = tape.value(out.h).clone();

        let mut tape2 = Tape::new(&p);
        let table = tape2.param(enc.embedding);
        let mut state = tape2.constant(Tensor::zeros(&[1, 4]));
        for j in (0..4).rev() {
            let x = tape2.embedding(table, &[ids[j]]).unwrap();
            state = enc.bwd.step(&mut tape2, x, state).unwrap();
            assert_eq!(&h.data()[j * 8 + 4..j * 8 + 8], tape2.value(state).data());
        }
        assert_eq!(tape.value(out.bwd_first).data(), &h.data()[4..8]);
        assert_eq!(tape.value(out.fwd_last).data(), &h.data()[24..28]);
    }

    #[test]
    fn single_source_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut p = ParamSet::<f64>::new();
        let att = Attention::register(&mut p, "att", 3, &mut rng);
        let mut tape = Tape::new(&p);
        let h = tape.constant(Tensor::row(vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]));
        let s = tape.constant(Tensor::row(vec![1.0, -1.0, 0.5]));
        let hw = att.project_memory(&mut tape, h).unwrap();
        let (c, alpha) = att.context(&mut tape, s, h, hw).unwrap();
        assert_eq!(tape.value(alpha).data(), &[1.0]);
        assert_eq!(tape.value(c).data(), tape.value(h).data());
    }

    #[test]
    fn zero_attention_params_are_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut p = ParamSet::<f64>::new();
        let att = Attention::register(&mut p, "att", 2, &mut rng);
        zero_params(&mut p);
        let mut tape = Tape::new(&p);
        let h = tape.constant(Tensor::from_f64(&[3, 4], &[1., 2., 3., 4., 5., 6., 7., 8., 9., 1., 2., 3.]).unwrap());
        let s = tape.constant(Tensor::row(vec![0.3, 0.7]));
        let hw = att.project_memory(&mut tape, h).unwrap();
        let (_, alpha) = att.context(&mut tape, s, h, hw).unwrap();
        for &a in tape.value(alpha).data() {
            assert!((a - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn attention_hand_case() {
        // d = 1 (so memory rows are 2-wide), T = 2
        let mut p = ParamSet::<f64>::new();
        let att = Attention {
            w_s: p.add("w_s", Tensor::from_f64(&[1, 1], &[0.5]).unwrap()),
            w_h: p.add("w_h", Tensor::from_f64(&[2, 1], &[1.0, -1.0]).unwrap()),
            b: p.add("b", Tensor::from_f64(&[1, 1], &[0.1]).unwrap()),
            u: p.add("u", Tensor::from_f64(&[1, 1], &[2.0]).unwrap()),
        };
        let mut tape = Tape::new(&p);
        let h = tape.constant(Tensor::from_f64(&[2, 2], &[1.0, 0.0, 0.0, 2.0]).unwrap());
        let s = tape.constant(Tensor::from_f64(&[1, 1], &[1.0]).unwrap());
        let hw = att.project_memory(&mut tape, h).unwrap();
        let (c, alpha) = att.context(&mut tape, s, h, hw).unwrap();
        // e1 = 2 tanh(0.5 + 1 + 0.1), e2 = 2 tanh(0.5 - 2 + 0.1)
        let e1 = 2.0 * (1.6f64).tanh();
        let e2 = 2.0 * (-1.4f64).tanh();
        let a1 = e1.exp() / (e1.exp() + e2.exp());
        let a = tape.value(alpha).data();
        assert!((a[0] - a1).abs() < 1e-15);
        assert!((a[1] - (1.0 - a1)).abs() < 1e-15);
        let cv = tape.value(c).data();
        assert!((cv[0] - a1).abs() < 1e-15);
        assert!((cv[1] - 2.0 * (1.0 - a1)).abs() < 1e-15);
    }

    #[test]
    fn init_state_zero_params() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut p = ParamSet::<f64>::new();
        let enc = BiGruEncoder::register(&mut p, "enc", 10, 4, &mut rng);
        let init = InitState::register(&mut p, "init", 4, &mut rng);
        let mut tape = Tape::new(&p);
        let e = enc.encode(&mut tape, &[4, 5]).unwrap();
        let s0 = init.apply(&mut tape, &e).unwrap();
        assert_eq!(tape.shape(s0), &[1, 4]);
        let ids: Vec<_> = [init.w, init.b].to_vec();
        let mut pz = p.clone();
        for id in ids {
            pz.get_mut(id).data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
        let mut tape = Tape::new(&pz);
        let e = enc.encode(&mut tape, &[4, 5, 6]).unwrap();
        let s0 = init.apply(&mut tape, &e).unwrap();
        assert_eq!(tape.value(s0).data(), &[0.0; 4]);
    }
}
