use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::init::{bind, glorot, ones_vec, zeros_vec, Bind};
use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Sinusoidal positional encoding: column `2j` holds
/// `sin(pos / 10000^(2j/d))` and column `2j + 1` the matching cosine.
pub fn positional_encoding(length: usize, dim: usize) -> Result<Tensor> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::contract(format!(
            "positional encoding dimension must be even and positive, got {dim}"
        )));
    }
    if length == 0 {
        return Err(Error::contract("positional encoding needs at least one position"));
    }
    let mut out = Tensor::zeros(&[length, dim]);
    for pos in 0..length {
        for j in 0..dim / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * j as f64 / dim as f64);
            out.set(pos, 2 * j, angle.sin());
            out.set(pos, 2 * j + 1, angle.cos());
        }
    }
    Ok(out)
}

/// Positional encoding for a stream of any width. Odd widths take the
/// leading columns of the next even-width table, so the final column is a
/// sine term with the exponent computed at `width + 1`.
pub fn positional_encoding_for_width(length: usize, width: usize) -> Result<Tensor> {
    if width % 2 == 0 {
        return positional_encoding(length, width);
    }
    let full = positional_encoding(length, width + 1)?;
    let mut data = Vec::with_capacity(length * width);
    for r in 0..length {
        data.extend_from_slice(&full.row(r)[..width]);
    }
    Tensor::matrix(length, width, data)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionHead {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
}

/// One post-norm encoder block. The residual stream has `width` columns;
/// every head projects it to `d_head` columns and `w_o` maps the
/// concatenated heads back to `width`.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub heads: Vec<AttentionHead>,
    pub w_o: Tensor,
    pub w_1: Tensor,
    pub b_1: Tensor,
    pub w_2: Tensor,
    pub b_2: Tensor,
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
}

#[derive(Clone, Debug)]
pub struct HeadVars {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
}

#[derive(Clone, Debug)]
pub struct EncoderVars {
    pub heads: Vec<HeadVars>,
    pub w_o: Var,
    pub w_1: Var,
    pub b_1: Var,
    pub w_2: Var,
    pub b_2: Var,
    pub ln1_gain: Var,
    pub ln1_bias: Var,
    pub ln2_gain: Var,
    pub ln2_bias: Var,
}

impl EncoderParams {
    pub fn zeros(width: usize, num_heads: usize, d_head: usize, d_ff: usize) -> Self {
        EncoderParams {
            heads: (0..num_heads)
                .map(|_| AttentionHead {
                    w_q: Tensor::zeros(&[width, d_head]),
                    w_k: Tensor::zeros(&[width, d_head]),
                    w_v: Tensor::zeros(&[width, d_head]),
                })
                .collect(),
            w_o: Tensor::zeros(&[num_heads * d_head, width]),
            w_1: Tensor::zeros(&[width, d_ff]),
            b_1: zeros_vec(d_ff),
            w_2: Tensor::zeros(&[d_ff, width]),
            b_2: zeros_vec(width),
            ln1_gain: ones_vec(width),
            ln1_bias: zeros_vec(width),
            ln2_gain: ones_vec(width),
            ln2_bias: zeros_vec(width),
        }
    }

    pub fn init<R: Rng + ?Sized>(rng: &mut R, width: usize, num_heads: usize, d_head: usize, d_ff: usize) -> Self {
        let mut p = EncoderParams::zeros(width, num_heads, d_head, d_ff);
        for h in &mut p.heads {
            h.w_q = glorot(rng, width, d_head, width, d_head);
            h.w_k = glorot(rng, width, d_head, width, d_head);
            h.w_v = glorot(rng, width, d_head, width, d_head);
        }
        let cat = num_heads * d_head;
        p.w_o = glorot(rng, cat, width, cat, width);
        p.w_1 = glorot(rng, width, d_ff, width, d_ff);
        p.w_2 = glorot(rng, d_ff, width, d_ff, width);
        p
    }

    pub fn width(&self) -> usize {
        self.w_o.shape()[1]
    }

    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }

    pub fn d_head(&self) -> usize {
        self.heads.first().map(|h| h.w_q.cols()).unwrap_or(0)
    }

    pub fn d_ff(&self) -> usize {
        self.w_1.cols()
    }

    /// Checks that every head has the same projection shape and that the
    /// concatenated heads match the output projection.
    pub fn validate(&self) -> Result<()> {
        let width = self.width();
        let d_head = self.d_head();
        if self.heads.is_empty() {
            return Err(Error::contract("encoder needs at least one attention head"));
        }
        for h in &self.heads {
            for w in [&h.w_q, &h.w_k, &h.w_v] {
                if w.shape() != [width, d_head] {
                    return Err(Error::shape("attention head", &[width, d_head], w.shape()));
                }
            }
        }
        if self.w_o.shape()[0] != self.num_heads() * d_head {
            return Err(Error::contract(format!(
                "{} heads of dimension {} do not match an output projection with {} rows",
                self.num_heads(),
                d_head,
                self.w_o.shape()[0]
            )));
        }
        let d_ff = self.d_ff();
        if self.w_1.shape() != [width, d_ff] || self.w_2.shape() != [d_ff, width] {
            return Err(Error::shape("feed_forward", self.w_1.shape(), self.w_2.shape()));
        }
        if self.b_1.numel() != d_ff || self.b_2.numel() != width {
            return Err(Error::shape("feed_forward", self.b_1.shape(), self.b_2.shape()));
        }
        for t in [&self.ln1_gain, &self.ln1_bias, &self.ln2_gain, &self.ln2_bias] {
            if t.numel() != width {
                return Err(Error::shape("layer_norm", &[width], t.shape()));
            }
        }
        Ok(())
    }

    pub fn bind(&self, g: &mut Graph, mode: Bind) -> EncoderVars {
        let heads = self
            .heads
            .iter()
            .map(|h| HeadVars {
                w_q: bind(g, &h.w_q, mode),
                w_k: bind(g, &h.w_k, mode),
                w_v: bind(g, &h.w_v, mode),
            })
            .collect();
        EncoderVars {
            heads,
            w_o: bind(g, &self.w_o, mode),
            w_1: bind(g, &self.w_1, mode),
            b_1: bind(g, &self.b_1, mode),
            w_2: bind(g, &self.w_2, mode),
            b_2: bind(g, &self.b_2, mode),
            ln1_gain: bind(g, &self.ln1_gain, mode),
            ln1_bias: bind(g, &self.ln1_bias, mode),
            ln2_gain: bind(g, &self.ln2_gain, mode),
            ln2_bias: bind(g, &self.ln2_bias, mode),
        }
    }

    /// Declaration order: per head `w_q, w_k, w_v`, then `w_o`, the
    /// feed-forward weights and the two layer-norm pairs.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = Vec::new();
        for h in &self.heads {
            out.extend([&h.w_q, &h.w_k, &h.w_v]);
        }
        out.extend([
            &self.w_o,
            &self.w_1,
            &self.b_1,
            &self.w_2,
            &self.b_2,
            &self.ln1_gain,
            &self.ln1_bias,
            &self.ln2_gain,
            &self.ln2_bias,
        ]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        for h in &mut self.heads {
            out.extend([&mut h.w_q, &mut h.w_k, &mut h.w_v]);
        }
        out.extend([
            &mut self.w_o,
            &mut self.w_1,
            &mut self.b_1,
            &mut self.w_2,
            &mut self.b_2,
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
        ]);
        out
    }

    pub fn named(&self, prefix: &str) -> Vec<String> {
        let mut out = Vec::new();
        for k in 0..self.heads.len() {
            for w in ["w_q", "w_k", "w_v"] {
                out.push(format!("{prefix}.head{k}.{w}"));
            }
        }
        for n in ["w_o", "w_1", "b_1", "w_2", "b_2", "ln1_gain", "ln1_bias", "ln2_gain", "ln2_bias"] {
            out.push(format!("{prefix}.{n}"));
        }
        out
    }
}

/// Inverted dropout applied to sub-layer outputs while training.
pub struct Dropout<'a> {
    pub rate: f64,
    pub rng: &'a mut ChaCha8Rng,
}

impl Dropout<'_> {
    fn apply(&mut self, g: &mut Graph, x: Var) -> Result<Var> {
        if self.rate <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - self.rate;
        let mask = (0..g.value(x).numel())
            .map(|_| if self.rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        g.mask(x, mask)
    }
}

/// Returns the head output (`L x d_head`) and the attention weights
/// (`L x L`, rows sum to one). Attention is bidirectional.
pub fn attention_head_graph(g: &mut Graph, z: Var, head: &HeadVars) -> Result<(Var, Var)> {
    let q = g.matmul(z, head.w_q)?;
    let k = g.matmul(z, head.w_k)?;
    let v = g.matmul(z, head.w_v)?;
    let d_k = g.value(k).cols() as f64;
    let kt = g.transpose(k)?;
    let scores = g.matmul(q, kt)?;
    let scaled = g.scale(scores, 1.0 / d_k.sqrt());
    let weights = g.softmax_rows(scaled)?;
    let out = g.matmul(weights, v)?;
    Ok((out, weights))
}

pub fn multi_head_attention_graph(g: &mut Graph, z: Var, p: &EncoderVars) -> Result<Var> {
    let mut outs = Vec::with_capacity(p.heads.len());
    for head in &p.heads {
        outs.push(attention_head_graph(g, z, head)?.0);
    }
    let cat = g.concat_cols(&outs)?;
    let expected = g.value(p.w_o).shape()[0];
    if g.value(cat).cols() != expected {
        return Err(Error::contract(format!(
            "concatenated heads have {} columns, output projection expects {expected}",
            g.value(cat).cols()
        )));
    }
    g.matmul(cat, p.w_o)
}

/// Position-wise `relu(z W1 + b1) W2 + b2`.
pub fn feed_forward_graph(g: &mut Graph, z: Var, p: &EncoderVars) -> Result<Var> {
    let a = g.matmul(z, p.w_1)?;
    let a = g.add_row(a, p.b_1)?;
    let a = g.relu(a);
    let b = g.matmul(a, p.w_2)?;
    g.add_row(b, p.b_2)
}

/// Post-norm block: `x = LN(z + MHA(z))`, `out = LN(x + FFN(x))`.
pub fn encoder_block_graph(g: &mut Graph, z: Var, p: &EncoderVars, mut dropout: Option<&mut Dropout<'_>>) -> Result<Var> {
    let mut attn = multi_head_attention_graph(g, z, p)?;
    if let Some(d) = dropout.as_deref_mut() {
        attn = d.apply(g, attn)?;
    }
    let res1 = g.add(z, attn)?;
    let out1 = g.layer_norm(res1, p.ln1_gain, p.ln1_bias, LAYER_NORM_EPS)?;
    let mut ff = feed_forward_graph(g, out1, p)?;
    if let Some(d) = dropout.as_deref_mut() {
        ff = d.apply(g, ff)?;
    }
    let res2 = g.add(out1, ff)?;
    g.layer_norm(res2, p.ln2_gain, p.ln2_bias, LAYER_NORM_EPS)
}

fn check_input(z: &Tensor, p: &EncoderParams) -> Result<()> {
    p.validate()?;
    if z.rank() != 2 || z.cols() != p.width() {
        return Err(Error::shape("encoder input", z.shape(), &[z.rows(), p.width()]));
    }
    Ok(())
}

pub fn attention_head(z: &Tensor, head: &AttentionHead) -> Result<Tensor> {
    Ok(attention_head_with_weights(z, head)?.0)
}

/// Head output together with its attention-weight matrix.
pub fn attention_head_with_weights(z: &Tensor, head: &AttentionHead) -> Result<(Tensor, Tensor)> {
    let mut g = Graph::new();
    let zv = g.constant(z.clone());
    let hv = HeadVars {
        w_q: g.constant(head.w_q.clone()),
        w_k: g.constant(head.w_k.clone()),
        w_v: g.constant(head.w_v.clone()),
    };
    let (out, w) = attention_head_graph(&mut g, zv, &hv)?;
    Ok((g.value(out).clone(), g.value(w).clone()))
}

fn run_frozen(z: &Tensor, p: &EncoderParams, f: impl Fn(&mut Graph, Var, &EncoderVars) -> Result<Var>) -> Result<Tensor> {
    check_input(z, p)?;
    let mut g = Graph::new();
    let vars = p.bind(&mut g, Bind::Frozen);
    let zv = g.constant(z.clone());
    let out = f(&mut g, zv, &vars)?;
    Ok(g.value(out).clone())
}

pub fn multi_head_attention(z: &Tensor, p: &EncoderParams) -> Result<Tensor> {
    run_frozen(z, p, multi_head_attention_graph)
}

pub fn feed_forward(z: &Tensor, p: &EncoderParams) -> Result<Tensor> {
    run_frozen(z, p, feed_forward_graph)
}

pub fn encoder_block(z: &Tensor, p: &EncoderParams) -> Result<Tensor> {
    run_frozen(z, p, |g, z, v| encoder_block_graph(g, z, v, None))
}

pub fn layer_norm(z: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
    if z.rank() != 2 || z.cols() < 2 {
        return Err(Error::contract("layer_norm needs a matrix with at least two columns"));
    }
    let mut g = Graph::new();
    let zv = g.constant(z.clone());
    let gv = g.constant(gain.clone());
    let bv = g.constant(bias.clone());
    let out = g.layer_norm(zv, gv, bv, LAYER_NORM_EPS)?;
    Ok(g.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::{check_gradients, weighted_sum};
    use rand::SeedableRng;

    fn rnd(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn random_encoder(rng: &mut ChaCha8Rng, width: usize, heads: usize, d_head: usize, d_ff: usize) -> EncoderParams {
        let mut p = EncoderParams::zeros(width, heads, d_head, d_ff);
        for t in p.tensors_mut() {
            let shape = t.shape().to_vec();
            *t = rnd(rng, &shape);
        }
        p
    }

    fn permute_rows(t: &Tensor, perm: &[usize]) -> Tensor {
        let rows: Vec<&[f64]> = perm.iter().map(|&r| t.row(r)).collect();
        Tensor::from_rows(&rows).unwrap()
    }

    #[test]
    fn positional_encoding_examples() {
        let pe = positional_encoding(50, 8).unwrap();
        for j in 0..4 {
            assert_eq!(pe.get(0, 2 * j), 0.0);
            assert_eq!(pe.get(0, 2 * j + 1), 1.0);
        }
        assert!(pe.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!((pe.get(1, 0) - 0.8414710).abs() < 1e-7);
        assert!(positional_encoding(4, 3).is_err());
    }

    #[test]
    fn positional_encoding_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let d = 2 * rng.random_range(1..6);
            let len = rng.random_range(1..20);
            let pe = positional_encoding(len, d).unwrap();
            let pos = rng.random_range(0..len);
            let j = rng.random_range(0..d / 2);
            let denom = 10000f64.powf((2 * j) as f64 / d as f64);
            assert!((pe.get(pos, 2 * j) - (pos as f64 / denom).sin()).abs() < 1e-12);
            assert!((pe.get(pos, 2 * j + 1) - (pos as f64 / denom).cos()).abs() < 1e-12);
        }
    }

    #[test]
    fn odd_width_encoding_truncates_even_table() {
        let odd = positional_encoding_for_width(5, 3).unwrap();
        let even = positional_encoding(5, 4).unwrap();
        for r in 0..5 {
            assert_eq!(odd.row(r), &even.row(r)[..3]);
        }
    }

    #[test]
    fn single_position_attention_returns_value_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let head = AttentionHead {
            w_q: rnd(&mut rng, &[3, 2]),
            w_k: rnd(&mut rng, &[3, 2]),
            w_v: rnd(&mut rng, &[3, 2]),
        };
        let z = rnd(&mut rng, &[1, 3]);
        let out = attention_head(&z, &head).unwrap();
        let v = z.matmul(&head.w_v).unwrap();
        assert!(out.max_abs_diff(&v) < 1e-15);
    }

    #[test]
    fn identical_tokens_give_identical_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let head = AttentionHead {
            w_q: rnd(&mut rng, &[3, 2]),
            w_k: rnd(&mut rng, &[3, 2]),
            w_v: rnd(&mut rng, &[3, 2]),
        };
        let row = [0.3, -0.8, 1.1];
        let z = Tensor::from_rows(&[row, row, row, row]).unwrap();
        let out = attention_head(&z, &head).unwrap();
        for r in 1..4 {
            assert_eq!(out.row(r), out.row(0));
        }
    }

    #[test]
    fn attention_matches_scalar_expansion() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..100 {
            let (wq, wk, wv) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
            let (z0, z1) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
            let head = AttentionHead {
                w_q: Tensor::from_rows(&[[wq]]).unwrap(),
                w_k: Tensor::from_rows(&[[wk]]).unwrap(),
                w_v: Tensor::from_rows(&[[wv]]).unwrap(),
            };
            let z = Tensor::from_rows(&[[z0], [z1]]).unwrap();
            let (out, weights) = attention_head_with_weights(&z, &head).unwrap();
            let zs = [z0, z1];
            for i in 0..2 {
                let s: Vec<f64> = (0..2).map(|j| zs[i] * wq * zs[j] * wk).collect();
                let e: Vec<f64> = s.iter().map(|v| v.exp()).collect();
                let a: Vec<f64> = e.iter().map(|v| v / (e[0] + e[1])).collect();
                let want = a[0] * zs[0] * wv + a[1] * zs[1] * wv;
                assert!((out.get(i, 0) - want).abs() < 1e-12);
                assert!((weights.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn multi_head_degenerate_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut one = random_encoder(&mut rng, 4, 1, 4, 6);
        one.w_o = Tensor::identity(4);
        let z = rnd(&mut rng, &[5, 4]);
        let mha = multi_head_attention(&z, &one).unwrap();
        let head = attention_head(&z, &one.heads[0]).unwrap();
        assert!(mha.max_abs_diff(&head) < 1e-15);

        let mut two = random_encoder(&mut rng, 4, 2, 2, 6);
        two.w_o = Tensor::zeros(&[4, 4]);
        assert!(multi_head_attention(&z, &two).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn multi_head_matches_manual_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let p = random_encoder(&mut rng, 4, 2, 2, 6);
        let z = rnd(&mut rng, &[5, 4]);
        let h0 = attention_head(&z, &p.heads[0]).unwrap();
        let h1 = attention_head(&z, &p.heads[1]).unwrap();
        let cat: Vec<Vec<f64>> = (0..5).map(|r| h0.row(r).iter().chain(h1.row(r)).copied().collect()).collect();
        let want = Tensor::from_rows(&cat).unwrap().matmul(&p.w_o).unwrap();
        assert!(multi_head_attention(&z, &p).unwrap().max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn head_dimension_mismatch_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut p = random_encoder(&mut rng, 4, 2, 2, 6);
        p.w_o = Tensor::zeros(&[3, 4]);
        let z = rnd(&mut rng, &[3, 4]);
        assert!(matches!(multi_head_attention(&z, &p), Err(Error::Contract(_))));
    }

    #[test]
    fn feed_forward_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let p = random_encoder(&mut rng, 3, 1, 3, 5);
        let z = rnd(&mut rng, &[4, 3]);
        let out = feed_forward(&z, &p).unwrap();
        let perm = [2, 0, 3, 1];
        let out_perm = feed_forward(&permute_rows(&z, &perm), &p).unwrap();
        assert_eq!(out_perm, permute_rows(&out, &perm));

        let mut zero = p.clone();
        zero.w_1 = Tensor::zeros(&[3, 5]);
        zero.w_2 = Tensor::zeros(&[5, 3]);
        let c = feed_forward(&z, &zero).unwrap();
        for r in 0..4 {
            assert_eq!(c.row(r), p.b_2.data());
        }

        for _ in 0..100 {
            let p = random_encoder(&mut rng, 3, 1, 3, 5);
            let z = rnd(&mut rng, &[1, 3]);
            let out = feed_forward(&z, &p).unwrap();
            for c in 0..3 {
                let mut want = p.b_2.data()[c];
                for k in 0..5 {
                    let mut hidden = p.b_1.data()[k];
                    for i in 0..3 {
                        hidden += z.get(0, i) * p.w_1.get(i, k);
                    }
                    want += hidden.max(0.0) * p.w_2.get(k, c);
                }
                assert!((out.get(0, c) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn layer_norm_examples() {
        let ones = ones_vec(3);
        let zeros = zeros_vec(3);
        let c = layer_norm(&Tensor::from_rows(&[[2.5, 2.5, 2.5]]).unwrap(), &ones, &zeros).unwrap();
        assert!(c.data().iter().all(|&v| v == 0.0));

        let r = layer_norm(&Tensor::from_rows(&[[1.0, 3.0]]).unwrap(), &ones_vec(2), &zeros_vec(2)).unwrap();
        assert!((r.data()[0] + 1.0).abs() < 1e-4 && (r.data()[1] - 1.0).abs() < 1e-4);

        let mut rng = ChaCha8Rng::seed_from_u64(15);
        for _ in 0..100 {
            let cols = rng.random_range(2..9);
            let z = rnd(&mut rng, &[1, cols]).map(|v| 3.0 * v);
            let gain = rnd(&mut rng, &[cols]);
            let bias = rnd(&mut rng, &[cols]);
            let out = layer_norm(&z, &gain, &bias).unwrap();
            let mean = z.data().iter().sum::<f64>() / cols as f64;
            let var = z.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
            for c in 0..cols {
                let want = (z.data()[c] - mean) / (var + 1e-5).sqrt() * gain.data()[c] + bias.data()[c];
                assert!((out.data()[c] - want).abs() < 1e-12);
            }
            let unit = layer_norm(&z, &ones_vec(cols), &zeros_vec(cols)).unwrap();
            let m = unit.data().iter().sum::<f64>() / cols as f64;
            let v = unit.data().iter().map(|x| (x - m).powi(2)).sum::<f64>() / cols as f64;
            assert!(m.abs() < 1e-6);
            // eps in the denominator pulls the variance just below one.
            assert!((v - 1.0).abs() < 1e-6 || (v - var / (var + 1e-5)).abs() < 1e-12);
        }
    }

    #[test]
    fn encoder_block_passthrough_and_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let z = rnd(&mut rng, &[6, 4]);
        let mut p = random_encoder(&mut rng, 4, 2, 2, 8);
        for h in &mut p.heads {
            h.w_v = Tensor::zeros(&[4, 2]);
        }
        p.w_o = Tensor::zeros(&[4, 4]);
        p.w_1 = Tensor::zeros(&[4, 8]);
        p.w_2 = Tensor::zeros(&[8, 4]);
        p.b_2 = zeros_vec(4);
        let out = encoder_block(&z, &p).unwrap();
        let once = layer_norm(&z, &p.ln1_gain, &p.ln1_bias).unwrap();
        let twice = layer_norm(&once, &p.ln2_gain, &p.ln2_bias).unwrap();
        assert!(out.max_abs_diff(&twice) < 1e-12);

        for len in [1, 3, 9] {
            let z = rnd(&mut rng, &[len, 4]);
            assert_eq!(encoder_block(&z, &p).unwrap().shape(), &[len, 4]);
        }
    }

    #[test]
    fn encoder_block_matches_step_by_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let p = random_encoder(&mut rng, 4, 2, 2, 6);
        let z = rnd(&mut rng, &[5, 4]);
        let attn = multi_head_attention(&z, &p).unwrap();
        let mut r1 = z.clone();
        r1.data_mut().iter_mut().zip(attn.data()).for_each(|(a, b)| *a += b);
        let o1 = layer_norm(&r1, &p.ln1_gain, &p.ln1_bias).unwrap();
        let ff = feed_forward(&o1, &p).unwrap();
        let mut r2 = o1.clone();
        r2.data_mut().iter_mut().zip(ff.data()).for_each(|(a, b)| *a += b);
        let want = layer_norm(&r2, &p.ln2_gain, &p.ln2_bias).unwrap();
        assert!(encoder_block(&z, &p).unwrap().max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn attention_is_permutation_equivariant_until_positions_are_added() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let p = random_encoder(&mut rng, 4, 2, 2, 6);
        let z = rnd(&mut rng, &[5, 4]);
        let perm = [3, 1, 4, 0, 2];
        let out = multi_head_attention(&z, &p).unwrap();
        let out_perm = multi_head_attention(&permute_rows(&z, &perm), &p).unwrap();
        assert!(out_perm.max_abs_diff(&permute_rows(&out, &perm)) < 1e-10);

        let pe = positional_encoding(5, 4).unwrap();
        let add = |t: &Tensor| {
            let mut s = t.clone();
            s.data_mut().iter_mut().zip(pe.data()).for_each(|(a, b)| *a += b);
            s
        };
        let with_pe = multi_head_attention(&add(&z), &p).unwrap();
        let with_pe_perm = multi_head_attention(&add(&permute_rows(&z, &perm)), &p).unwrap();
        assert!(with_pe_perm.max_abs_diff(&permute_rows(&with_pe, &perm)) > 1e-6);
    }

    #[test]
    fn layer_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let p = random_encoder(&mut rng, 4, 2, 2, 6);
        let z = rnd(&mut rng, &[3, 4]);
        let weights = rnd(&mut rng, &[3, 4]);
        let mut inputs = vec![z];
        inputs.extend(p.tensors().into_iter().cloned());
        let n_heads = p.heads.len();
        let unpack = move |v: &[Var]| -> EncoderVars {
            let heads = (0..n_heads)
                .map(|k| HeadVars {
                    w_q: v[1 + 3 * k],
                    w_k: v[2 + 3 * k],
                    w_v: v[3 + 3 * k],
                })
                .collect();
            let b = 1 + 3 * n_heads;
            EncoderVars {
                heads,
                w_o: v[b],
                w_1: v[b + 1],
                b_1: v[b + 2],
                w_2: v[b + 3],
                b_2: v[b + 4],
                ln1_gain: v[b + 5],
                ln1_bias: v[b + 6],
                ln2_gain: v[b + 7],
                ln2_bias: v[b + 8],
            }
        };
        let report = check_gradients(&inputs, 1e-5, |g, v| {
            let out = encoder_block_graph(g, v[0], &unpack(v), None)?;
            weighted_sum(g, out, &weights)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }
}
