use rand::Rng;

use super::init::{bind, glorot, zeros_vec, Bind};
use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};

/// Gate order used throughout: forget, input, candidate, output.
pub const GATES: [&str; 4] = ["f", "i", "c", "o"];

/// Weights of one LSTM layer. Each gate matrix is `hidden x (hidden + input)`
/// and multiplies the concatenation `[h_prev, y]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmParams {
    pub weights: [Tensor; 4],
    pub biases: [Tensor; 4],
}

#[derive(Clone, Debug, PartialEq)]
pub struct LstmState {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

impl LstmState {
    pub fn zeros(hidden: usize) -> Self {
        LstmState {
            h: vec![0.0; hidden],
            c: vec![0.0; hidden],
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LstmVars {
    pub weights: [Var; 4],
    pub biases: [Var; 4],
}

impl LstmParams {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        LstmParams {
            weights: std::array::from_fn(|_| Tensor::zeros(&[hidden, hidden + input])),
            biases: std::array::from_fn(|_| zeros_vec(hidden)),
        }
    }

    pub fn init<R: Rng + ?Sized>(rng: &mut R, input: usize, hidden: usize) -> Self {
        LstmParams {
            weights: std::array::from_fn(|_| glorot(rng, hidden, hidden + input, hidden + input, hidden)),
            biases: std::array::from_fn(|_| zeros_vec(hidden)),
        }
    }

    pub fn hidden(&self) -> usize {
        self.weights[0].shape()[0]
    }

    pub fn input(&self) -> usize {
        self.weights[0].shape()[1] - self.hidden()
    }

    pub fn validate(&self) -> Result<()> {
        let shape = self.weights[0].shape();
        for w in &self.weights {
            if w.shape() != shape {
                return Err(Error::shape("LstmParams", shape, w.shape()));
            }
        }
        for b in &self.biases {
            if b.numel() != self.hidden() {
                return Err(Error::shape("LstmParams", &[self.hidden()], b.shape()));
            }
        }
        Ok(())
    }

    pub fn bind(&self, g: &mut Graph, mode: Bind) -> LstmVars {
        LstmVars {
            weights: std::array::from_fn(|k| bind(g, &self.weights[k], mode)),
            biases: std::array::from_fn(|k| bind(g, &self.biases[k], mode)),
        }
    }

    /// Weights first, then biases, each in gate order.
    pub fn tensors(&self) -> Vec<&Tensor> {
        self.weights.iter().chain(&self.biases).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.weights.iter_mut().chain(self.biases.iter_mut()).collect()
    }

    pub fn named(&self, prefix: &str) -> Vec<String> {
        GATES
            .iter()
            .map(|g| format!("{prefix}.w_{g}"))
            .chain(GATES.iter().map(|g| format!("{prefix}.b_{g}")))
            .collect()
    }
}

/// Unrolled LSTM over `x` (`L x input`), from a zero state.
pub fn lstm_layer_graph(g: &mut Graph, p: &LstmVars, x: Var) -> Result<Var> {
    if g.value(x).rows() == 0 {
        return Err(Error::contract("lstm_layer needs at least one step"));
    }
    g.lstm(x, p.weights, p.biases)
}

/// One cell update composed from primitive ops; `h_prev`, `c_prev` are
/// `1 x hidden` and `y` is `1 x input`. Returns `(h, c)`.
pub fn lstm_cell_step_graph(g: &mut Graph, p: &LstmVars, h_prev: Var, c_prev: Var, y: Var) -> Result<(Var, Var)> {
    let z = g.concat_cols(&[h_prev, y])?;
    let mut pre = Vec::with_capacity(4);
    for k in 0..4 {
        let wt = g.transpose(p.weights[k])?;
        let a = g.matmul(z, wt)?;
        pre.push(g.add_row(a, p.biases[k])?);
    }
    let f = g.sigmoid(pre[0]);
    let i = g.sigmoid(pre[1]);
    let cand = g.tanh(pre[2]);
    let o = g.sigmoid(pre[3]);
    let keep = g.mul(f, c_prev)?;
    let write = g.mul(i, cand)?;
    let c = g.add(keep, write)?;
    let tc = g.tanh(c);
    let h = g.mul(o, tc)?;
    Ok((h, c))
}

pub fn lstm_cell_step(p: &LstmParams, prev: &LstmState, y: &[f64]) -> Result<LstmState> {
    p.validate()?;
    let hidden = p.hidden();
    if y.len() != p.input() {
        return Err(Error::shape("lstm_cell_step", &[p.input()], &[y.len()]));
    }
    if prev.h.len() != hidden || prev.c.len() != hidden {
        return Err(Error::shape("lstm_cell_step", &[hidden, hidden], &[prev.h.len(), prev.c.len()]));
    }
    let mut g = Graph::new();
    let vars = p.bind(&mut g, Bind::Frozen);
    let h = g.constant(Tensor::matrix(1, hidden, prev.h.clone())?);
    let c = g.constant(Tensor::matrix(1, hidden, prev.c.clone())?);
    let y = g.constant(Tensor::matrix(1, y.len(), y.to_vec())?);
    let (h, c) = lstm_cell_step_graph(&mut g, &vars, h, c, y)?;
    Ok(LstmState {
        h: g.value(h).data().to_vec(),
        c: g.value(c).data().to_vec(),
    })
}

/// Hidden states (`L x hidden`) of the layer run over `seq` (`L x input`).
pub fn lstm_layer(p: &LstmParams, seq: &Tensor) -> Result<Tensor> {
    p.validate()?;
    if seq.rank() != 2 {
        return Err(Error::contract("lstm_layer needs an L x input matrix"));
    }
    if seq.cols() != p.input() {
        return Err(Error::shape("lstm_layer", seq.shape(), p.weights[0].shape()));
    }
    let mut g = Graph::new();
    let vars = p.bind(&mut g, Bind::Frozen);
    let x = g.constant(seq.clone());
    let out = lstm_layer_graph(&mut g, &vars, x)?;
    Ok(g.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::sigmoid_scalar;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_params(rng: &mut ChaCha8Rng, input: usize, hidden: usize) -> LstmParams {
        let mut p = LstmParams::init(rng, input, hidden);
        for b in &mut p.biases {
            for v in b.data_mut() {
                *v = rng.random_range(-1.0..1.0);
            }
        }
        p
    }

    /// Scalar transcription of the gate equations, one unit at a time.
    fn scalar_step(p: &LstmParams, prev: &LstmState, y: &[f64]) -> LstmState {
        let hidden = prev.h.len();
        let mut z = prev.h.clone();
        z.extend_from_slice(y);
        let gate = |k: usize, j: usize| -> f64 {
            let mut s = p.biases[k].data()[j];
            for (col, zv) in z.iter().enumerate() {
                s += p.weights[k].get(j, col) * zv;
            }
            s
        };
        let mut next = LstmState::zeros(hidden);
        for j in 0..hidden {
            let f = 1.0 / (1.0 + (-gate(0, j)).exp());
            let i = 1.0 / (1.0 + (-gate(1, j)).exp());
            let a = gate(2, j);
            let cand = (a.exp() - (-a).exp()) / (a.exp() + (-a).exp());
            let o = 1.0 / (1.0 + (-gate(3, j)).exp());
            next.c[j] = f * prev.c[j] + i * cand;
            next.h[j] = o * next.c[j].tanh();
        }
        next
    }

    #[test]
    fn zero_weights_halve_the_cell() {
        let p = LstmParams::zeros(2, 3);
        let prev = LstmState {
            h: vec![0.3, -0.1, 0.9],
            c: vec![1.0, -2.0, 0.4],
        };
        let next = lstm_cell_step(&p, &prev, &[0.7, -0.7]).unwrap();
        for j in 0..3 {
            assert!((next.c[j] - 0.5 * prev.c[j]).abs() < 1e-15);
            assert!((next.h[j] - 0.5 * (0.5 * prev.c[j]).tanh()).abs() < 1e-15);
        }
        let fixed = lstm_cell_step(&p, &LstmState::zeros(3), &[1.0, 2.0]).unwrap();
        assert_eq!(fixed, LstmState::zeros(3));
    }

    #[test]
    fn cell_matches_scalar_transcription() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let p = random_params(&mut rng, 1, 2);
            let prev = LstmState {
                h: vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)],
                c: vec![rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)],
            };
            let y = [rng.random_range(-2.0..2.0)];
            let got = lstm_cell_step(&p, &prev, &y).unwrap();
            let want = scalar_step(&p, &prev, &y);
            for j in 0..2 {
                assert!((got.h[j] - want.h[j]).abs() < 1e-12);
                assert!((got.c[j] - want.c[j]).abs() < 1e-12);
            }
        }
        assert!((sigmoid_scalar(0.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn layer_equals_chained_cells() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = random_params(&mut rng, 3, 4);
        let seq = Tensor::new(&[3, 3], (0..9).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
        let out = lstm_layer(&p, &seq).unwrap();
        let mut state = LstmState::zeros(4);
        for t in 0..3 {
            state = lstm_cell_step(&p, &state, seq.row(t)).unwrap();
            for j in 0..4 {
                assert!((out.get(t, j) - state.h[j]).abs() < 1e-12);
            }
        }

        let single = lstm_layer(&p, &Tensor::from_rows(&[seq.row(0)]).unwrap()).unwrap();
        let step = lstm_cell_step(&p, &LstmState::zeros(4), seq.row(0)).unwrap();
        assert_eq!(single.data(), &step.h[..]);
    }

    #[test]
    fn zero_params_give_zero_output() {
        let p = LstmParams::zeros(2, 3);
        let seq = Tensor::from_rows(&[[1.0, 2.0], [3.0, -4.0], [0.5, 0.5]]).unwrap();
        assert!(lstm_layer(&p, &seq).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layer_is_causal() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = random_params(&mut rng, 2, 3);
        let seq = Tensor::new(&[6, 2], (0..12).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
        let base = lstm_layer(&p, &seq).unwrap();
        for x in 0..6 {
            let mut altered = seq.clone();
            for r in x + 1..6 {
                altered.set(r, 0, 9.0);
                altered.set(r, 1, -9.0);
            }
            let out = lstm_layer(&p, &altered).unwrap();
            for r in 0..=x {
                assert_eq!(out.row(r), base.row(r));
            }
        }
    }

    #[test]
    fn dimension_errors() {
        let p = LstmParams::zeros(2, 3);
        assert!(matches!(
            lstm_cell_step(&p, &LstmState::zeros(3), &[1.0]),
            Err(Error::Shape { .. })
        ));
        assert!(lstm_cell_step(&p, &LstmState::zeros(2), &[1.0, 1.0]).is_err());
        assert!(lstm_layer(&p, &Tensor::zeros(&[4, 3])).is_err());
    }
}
