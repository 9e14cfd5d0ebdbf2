//! The three hybrid LSTM/encoder topologies.
//!
//! Every variant first projects the seven sensor channels to `d_model`
//! features and finishes with a per-position affine head producing one
//! elevation value:
//!
//! * model 1: projection, positional encoding, encoder blocks, LSTM, head
//! * model 2: projection, LSTM, positional encoding, encoder blocks, head.
//!   The encoder blocks run on the LSTM's `lstm_hidden`-wide output.
//! * model 3: projection feeding an LSTM branch and a positional encoding +
//!   encoder branch; the branch outputs are concatenated and fused back to
//!   `d_model` features before the head.

mod checkpoint;
mod spec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use spec::{ModelSpec, Variant};

use crate::error::{Error, Result};
use crate::layers::{
    bind, encoder_block_graph, glorot, lstm_layer_graph, positional_encoding_for_width, zeros_vec,
    Bind, Dropout, EncoderParams, EncoderVars, HeadVars, LstmParams, LstmVars,
};
use crate::numerics::{Graph, Tensor, Var};

/// Affine map `x W + b` applied to every row.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Dense {
    fn init(rng: &mut ChaCha8Rng, n_in: usize, n_out: usize) -> Self {
        Dense {
            weight: glorot(rng, n_in, n_out, n_in, n_out),
            bias: zeros_vec(n_out),
        }
    }

    fn zeros(n_in: usize, n_out: usize) -> Self {
        Dense {
            weight: Tensor::zeros(&[n_in, n_out]),
            bias: zeros_vec(n_out),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct DenseVars {
    pub weight: Var,
    pub bias: Var,
}

fn apply_dense(g: &mut Graph, x: Var, d: &DenseVars) -> Result<Var> {
    let y = g.matmul(x, d.weight)?;
    g.add_row(y, d.bias)
}

#[derive(Clone, Debug, PartialEq)]
pub struct HybridModel {
    spec: ModelSpec,
    pub input_proj: Dense,
    pub lstm: LstmParams,
    pub encoders: Vec<EncoderParams>,
    pub fusion: Option<Dense>,
    pub head: Dense,
}

/// A model's parameters bound onto a graph.
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub input_proj: DenseVars,
    pub lstm: LstmVars,
    pub encoders: Vec<EncoderVars>,
    pub fusion: Option<DenseVars>,
    pub head: DenseVars,
    /// Every parameter in declaration order.
    pub all: Vec<Var>,
}

/// Switches for ablation studies.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Ablation {
    /// Replace every encoder block (and its positional encoding) with the
    /// identity map.
    pub bypass_encoders: bool,
}

impl HybridModel {
    /// Deterministic initialization from `seed`.
    pub fn build(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = spec.d_model;
        let h = spec.lstm_hidden;
        let w = spec.encoder_width();
        let input_proj = Dense::init(&mut rng, spec.input_channels, d);
        let (lstm, encoders) = match spec.variant {
            Variant::TransformerThenLstm => {
                let enc = (0..spec.num_encoder_blocks)
                    .map(|_| EncoderParams::init(&mut rng, w, spec.num_heads, spec.d_head(), spec.d_ff))
                    .collect();
                (LstmParams::init(&mut rng, d, h), enc)
            }
            Variant::LstmThenTransformer | Variant::ParallelLstmTransformer => {
                let lstm = LstmParams::init(&mut rng, d, h);
                let enc = (0..spec.num_encoder_blocks)
                    .map(|_| EncoderParams::init(&mut rng, w, spec.num_heads, spec.d_head(), spec.d_ff))
                    .collect();
                (lstm, enc)
            }
        };
        let fusion = match spec.variant {
            Variant::ParallelLstmTransformer => Some(Dense::init(&mut rng, h + d, d)),
            _ => None,
        };
        let head = Dense::init(&mut rng, spec.head_width(), 1);
        Ok(HybridModel {
            spec,
            input_proj,
            lstm,
            encoders,
            fusion,
            head,
        })
    }

    /// Same structure as [`build`](Self::build) with every parameter zero
    /// (layer-norm gains one).
    pub fn zeros(spec: ModelSpec) -> Result<Self> {
        spec.validate()?;
        let d = spec.d_model;
        let h = spec.lstm_hidden;
        let w = spec.encoder_width();
        Ok(HybridModel {
            input_proj: Dense::zeros(spec.input_channels, d),
            lstm: LstmParams::zeros(d, h),
            encoders: (0..spec.num_encoder_blocks)
                .map(|_| EncoderParams::zeros(w, spec.num_heads, spec.d_head(), spec.d_ff))
                .collect(),
            fusion: (spec.variant == Variant::ParallelLstmTransformer).then(|| Dense::zeros(h + d, d)),
            head: Dense::zeros(spec.head_width(), 1),
            spec,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    /// Parameter tensors in declaration order, which follows the dataflow
    /// of the variant.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.input_proj.weight, &self.input_proj.bias];
        let enc = self.encoders.iter().flat_map(|e| e.tensors());
        match self.spec.variant {
            Variant::TransformerThenLstm => {
                out.extend(enc);
                out.extend(self.lstm.tensors());
            }
            _ => {
                out.extend(self.lstm.tensors());
                out.extend(enc);
            }
        }
        if let Some(f) = &self.fusion {
            out.extend([&f.weight, &f.bias]);
        }
        out.extend([&self.head.weight, &self.head.bias]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = vec![&mut self.input_proj.weight, &mut self.input_proj.bias];
        let enc = self.encoders.iter_mut().flat_map(|e| e.tensors_mut());
        match self.spec.variant {
            Variant::TransformerThenLstm => {
                out.extend(enc);
                out.extend(self.lstm.tensors_mut());
            }
            _ => {
                out.extend(self.lstm.tensors_mut());
                out.extend(enc);
            }
        }
        if let Some(f) = &mut self.fusion {
            out.extend([&mut f.weight, &mut f.bias]);
        }
        out.extend([&mut self.head.weight, &mut self.head.bias]);
        out
    }

    /// Names matching [`tensors`](Self::tensors) one for one.
    pub fn parameter_names(&self) -> Vec<String> {
        let mut out = vec!["input_proj.weight".to_string(), "input_proj.bias".to_string()];
        let enc: Vec<String> = self
            .encoders
            .iter()
            .enumerate()
            .flat_map(|(k, e)| e.named(&format!("encoder{k}")))
            .collect();
        match self.spec.variant {
            Variant::TransformerThenLstm => {
                out.extend(enc);
                out.extend(self.lstm.named("lstm"));
            }
            _ => {
                out.extend(self.lstm.named("lstm"));
                out.extend(enc);
            }
        }
        if self.fusion.is_some() {
            out.extend(["fusion.weight".to_string(), "fusion.bias".to_string()]);
        }
        out.extend(["head.weight".to_string(), "head.bias".to_string()]);
        out
    }

    /// Number of trainable scalars.
    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }

    pub fn bind(&self, g: &mut Graph, mode: Bind) -> ModelVars {
        let all: Vec<Var> = self.tensors().into_iter().map(|t| bind(g, t, mode)).collect();
        self.vars_from(&all)
    }

    /// Structures vars that hold this model's parameters in declaration
    /// order (as produced by [`tensors`](Self::tensors)).
    pub fn vars_from(&self, all: &[Var]) -> ModelVars {
        assert_eq!(all.len(), self.tensors().len(), "one var per parameter tensor");
        let mut it = all.iter().copied();
        let mut next = || it.next().expect("length checked");
        let dense = |next: &mut dyn FnMut() -> Var| DenseVars {
            weight: next(),
            bias: next(),
        };
        let lstm = |next: &mut dyn FnMut() -> Var| LstmVars {
            weights: std::array::from_fn(|_| next()),
            biases: std::array::from_fn(|_| next()),
        };
        let encoder = |next: &mut dyn FnMut() -> Var, e: &EncoderParams| EncoderVars {
            heads: (0..e.num_heads())
                .map(|_| HeadVars {
                    w_q: next(),
                    w_k: next(),
                    w_v: next(),
                })
                .collect(),
            w_o: next(),
            w_1: next(),
            b_1: next(),
            w_2: next(),
            b_2: next(),
            ln1_gain: next(),
            ln1_bias: next(),
            ln2_gain: next(),
            ln2_bias: next(),
        };

        let input_proj = dense(&mut next);
        let (lstm, encoders) = match self.spec.variant {
            Variant::TransformerThenLstm => {
                let enc: Vec<EncoderVars> = self.encoders.iter().map(|e| encoder(&mut next, e)).collect();
                (lstm(&mut next), enc)
            }
            _ => {
                let l = lstm(&mut next);
                (l, self.encoders.iter().map(|e| encoder(&mut next, e)).collect())
            }
        };
        let fusion = self.fusion.as_ref().map(|_| dense(&mut next));
        let head = dense(&mut next);
        ModelVars {
            input_proj,
            lstm,
            encoders,
            fusion,
            head,
            all: all.to_vec(),
        }
    }

    fn encoder_stack(
        &self,
        g: &mut Graph,
        vars: &ModelVars,
        x: Var,
        ablation: Ablation,
        dropout: &mut Option<Dropout<'_>>,
    ) -> Result<Var> {
        if ablation.bypass_encoders {
            return Ok(x);
        }
        let (len, width) = (g.value(x).rows(), g.value(x).cols());
        let pe = g.constant(positional_encoding_for_width(len, width)?);
        let mut z = g.add(x, pe)?;
        for enc in &vars.encoders {
            z = encoder_block_graph(g, z, enc, dropout.as_mut())?;
        }
        Ok(z)
    }

    /// Records the forward pass of `x` (`N x input_channels`) and returns the
    /// `N x 1` prediction.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        vars: &ModelVars,
        x: Var,
        ablation: Ablation,
        mut dropout: Option<Dropout<'_>>,
    ) -> Result<Var> {
        let shape = g.value(x).shape();
        if shape.len() != 2 || shape[1] != self.spec.input_channels {
            return Err(Error::shape("forward", shape, &[shape[0], self.spec.input_channels]));
        }
        let proj = apply_dense(g, x, &vars.input_proj)?;
        let features = match self.spec.variant {
            Variant::TransformerThenLstm => {
                let z = self.encoder_stack(g, vars, proj, ablation, &mut dropout)?;
                lstm_layer_graph(g, &vars.lstm, z)?
            }
            Variant::LstmThenTransformer => {
                let h = lstm_layer_graph(g, &vars.lstm, proj)?;
                self.encoder_stack(g, vars, h, ablation, &mut dropout)?
            }
            Variant::ParallelLstmTransformer => {
                let h = lstm_layer_graph(g, &vars.lstm, proj)?;
                let z = self.encoder_stack(g, vars, proj, ablation, &mut dropout)?;
                let cat = g.concat_cols(&[h, z])?;
                let fusion = vars.fusion.as_ref().expect("parallel model has a fusion layer");
                apply_dense(g, cat, fusion)?
            }
        };
        apply_dense(g, features, &vars.head)
    }

    /// Predicted profile (`N x 1`) for standardized inputs `x` (`N x 7`).
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.forward_with(x, Ablation::default())
    }

    pub fn forward_with(&self, x: &Tensor, ablation: Ablation) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, Bind::Frozen);
        let xv = g.constant(x.clone());
        let out = self.forward_graph(&mut g, &vars, xv, ablation, None)?;
        Ok(g.value(out).clone())
    }
}
