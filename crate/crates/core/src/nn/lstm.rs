use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::{cast_vec, matvec_acc, matvec_t_acc, outer_acc, sigmoid, Scalar};

/// LSTM layer with separate input-side and recurrent-side biases.
///
/// Gate blocks are stacked `(i, f, g, o)` along the `4h` axis.
#[derive(Debug, Clone, PartialEq)]
pub struct Lstm<S> {
    pub n_in: usize,
    pub n_hidden: usize,
    /// `4h × in`, row-major.
    pub w_ih: Vec<S>,
    /// `4h × h`, row-major.
    pub w_hh: Vec<S>,
    pub b_ih: Vec<S>,
    pub b_hh: Vec<S>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmState<S> {
    pub hidden: Vec<S>,
    pub cell: Vec<S>,
}

impl<S: Scalar> LstmState<S> {
    pub fn zeros(n_hidden: usize) -> Self {
        LstmState {
            hidden: vec![S::zero(); n_hidden],
            cell: vec![S::zero(); n_hidden],
        }
    }
}

/// Forward activations kept for backpropagation through time.
#[derive(Debug, Clone)]
pub struct LstmTrace<S> {
    inputs: Vec<Vec<S>>,
    /// Post-activation gates per step, `(i, f, g, o)` stacked.
    gates: Vec<Vec<S>>,
    /// States after every step; entry 0 is the zero initial state.
    states: Vec<LstmState<S>>,
}

impl<S: Scalar> LstmTrace<S> {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// Hidden state after `t + 1` inputs.
    pub fn hidden(&self, t: usize) -> &[S] {
        &self.states[t + 1].hidden
    }

    pub fn state(&self, t: usize) -> &LstmState<S> {
        &self.states[t + 1]
    }
}

impl<S: Scalar> Lstm<S> {
    pub fn zeros(n_in: usize, n_hidden: usize) -> Self {
        let g = 4 * n_hidden;
        Lstm {
            n_in,
            n_hidden,
            w_ih: vec![S::zero(); g * n_in],
            w_hh: vec![S::zero(); g * n_hidden],
            b_ih: vec![S::zero(); g],
            b_hh: vec![S::zero(); g],
        }
    }

    /// Uniform `±1/sqrt(h)` initialisation.
    pub fn init<R: Rng + ?Sized>(n_in: usize, n_hidden: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (n_hidden as f64).sqrt();
        let mut l = Self::zeros(n_in, n_hidden);
        for v in [&mut l.w_ih, &mut l.w_hh, &mut l.b_ih, &mut l.b_hh] {
            v.iter_mut().for_each(|x| *x = S::of(rng.random_range(-bound..bound)));
        }
        l
    }

    pub fn parameter_count(&self) -> usize {
        4 * self.n_hidden * self.n_in + 4 * self.n_hidden * self.n_hidden + 8 * self.n_hidden
    }

    /// Gate activations and next state; `gates` receives `(i, f, g, o)`.
    fn step_into(&self, state: &LstmState<S>, x: &[S], gates: &mut [S]) -> LstmState<S> {
        let h = self.n_hidden;
        for (g, (a, b)) in gates.iter_mut().zip(self.b_ih.iter().zip(&self.b_hh)) {
            *g = *a + *b;
        }
        matvec_acc(&self.w_ih, x, gates);
        matvec_acc(&self.w_hh, &state.hidden, gates);
        let (ifg, o) = gates.split_at_mut(3 * h);
        let (i_f, g) = ifg.split_at_mut(2 * h);
        i_f.iter_mut().for_each(|v| *v = sigmoid(*v));
        g.iter_mut().for_each(|v| *v = v.tanh());
        o.iter_mut().for_each(|v| *v = sigmoid(*v));
        let mut next = LstmState::zeros(h);
        for k in 0..h {
            let c = gates[h + k] * state.cell[k] + gates[k] * gates[2 * h + k];
            next.cell[k] = c;
            next.hidden[k] = gates[3 * h + k] * c.tanh();
        }
        next
    }

    fn check_input(&self, x: &[S]) -> Result<()> {
        if x.len() != self.n_in {
            return Err(Error::Dimension {
                expected: self.n_in,
                got: x.len(),
                context: "lstm input",
            });
        }
        Ok(())
    }

    pub fn step(&self, state: &LstmState<S>, x: &[S]) -> Result<LstmState<S>> {
        self.check_input(x)?;
        if state.hidden.len() != self.n_hidden || state.cell.len() != self.n_hidden {
            return Err(Error::Dimension {
                expected: self.n_hidden,
                got: state.hidden.len(),
                context: "lstm state",
            });
        }
        let mut gates = vec![S::zero(); 4 * self.n_hidden];
        Ok(self.step_into(state, x, &mut gates))
    }

    /// States after every input, starting from the zero state.
    pub fn forward<X: AsRef<[S]>>(&self, inputs: &[X]) -> Result<Vec<LstmState<S>>> {
        if inputs.is_empty() {
            return Err(Error::Validation("lstm_forward on an empty sequence".into()));
        }
        let mut state = LstmState::zeros(self.n_hidden);
        let mut gates = vec![S::zero(); 4 * self.n_hidden];
        let mut out = Vec::with_capacity(inputs.len());
        for x in inputs {
            self.check_input(x.as_ref())?;
            state = self.step_into(&state, x.as_ref(), &mut gates);
            out.push(state.clone());
        }
        Ok(out)
    }

    /// Final state after consuming `inputs` (zero state for an empty slice).
    pub fn encode<X: AsRef<[S]>>(&self, inputs: &[X]) -> Result<LstmState<S>> {
        let mut state = LstmState::zeros(self.n_hidden);
        let mut gates = vec![S::zero(); 4 * self.n_hidden];
        for x in inputs {
            self.check_input(x.as_ref())?;
            state = self.step_into(&state, x.as_ref(), &mut gates);
        }
        Ok(state)
    }

    pub fn forward_trace<X: AsRef<[S]>>(&self, inputs: &[X]) -> Result<LstmTrace<S>> {
        if inputs.is_empty() {
            return Err(Error::Validation("lstm_forward on an empty sequence".into()));
        }
        let mut states = Vec::with_capacity(inputs.len() + 1);
        states.push(LstmState::zeros(self.n_hidden));
        let mut gates_all = Vec::with_capacity(inputs.len());
        for x in inputs {
            self.check_input(x.as_ref())?;
            let mut gates = vec![S::zero(); 4 * self.n_hidden];
            let next = self.step_into(states.last().unwrap(), x.as_ref(), &mut gates);
            states.push(next);
            gates_all.push(gates);
        }
        Ok(LstmTrace {
            inputs: inputs.iter().map(|x| x.as_ref().to_vec()).collect(),
            gates: gates_all,
            states,
        })
    }

    /// Backpropagation through time. `d_hidden[t]` is the loss gradient with
    /// respect to the hidden output after step `t`; parameter gradients are
    /// accumulated into `grad`.
    pub fn backward(&self, trace: &LstmTrace<S>, d_hidden: &[Vec<S>], grad: &mut Lstm<S>) -> Result<()> {
        if d_hidden.len() != trace.len() {
            return Err(Error::Dimension {
                expected: trace.len(),
                got: d_hidden.len(),
                context: "lstm backward: gradient steps vs cached steps",
            });
        }
        let h = self.n_hidden;
        let mut dh_next = vec![S::zero(); h];
        let mut dc_next = vec![S::zero(); h];
        let mut da = vec![S::zero(); 4 * h];
        for t in (0..trace.len()).rev() {
            let gates = &trace.gates[t];
            let prev = &trace.states[t];
            let cur = &trace.states[t + 1];
            for k in 0..h {
                let (i, f, g, o) = (gates[k], gates[h + k], gates[2 * h + k], gates[3 * h + k]);
                let dh = d_hidden[t][k] + dh_next[k];
                let tc = cur.cell[k].tanh();
                let d_o = dh * tc;
                let dc = dh * o * (S::one() - tc * tc) + dc_next[k];
                da[k] = dc * g * i * (S::one() - i);
                da[h + k] = dc * prev.cell[k] * f * (S::one() - f);
                da[2 * h + k] = dc * i * (S::one() - g * g);
                da[3 * h + k] = d_o * o * (S::one() - o);
                dc_next[k] = dc * f;
            }
            outer_acc(&mut grad.w_ih, &da, &trace.inputs[t]);
            outer_acc(&mut grad.w_hh, &da, &prev.hidden);
            for k in 0..4 * h {
                grad.b_ih[k] += da[k];
                grad.b_hh[k] += da[k];
            }
            dh_next.iter_mut().for_each(|v| *v = S::zero());
            matvec_t_acc(&self.w_hh, &da, &mut dh_next);
        }
        Ok(())
    }

    pub fn cast<T: Scalar>(&self) -> Lstm<T> {
        Lstm {
            n_in: self.n_in,
            n_hidden: self.n_hidden,
            w_ih: cast_vec(&self.w_ih),
            w_hh: cast_vec(&self.w_hh),
            b_ih: cast_vec(&self.b_ih),
            b_hh: cast_vec(&self.b_hh),
        }
    }
}
