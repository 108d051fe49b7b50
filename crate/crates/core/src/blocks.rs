//! Attention machinery: scaled dot-product attention, multi-head attention,
//! the position-wise feed-forward network and the post-norm residual wrapper.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numcore::{DropoutRng, Graph, Scalar, Tensor, Var};
use crate::weights::{uniform_init, Bindings, ModelWeights};

/// Additive value applied to hidden attention scores before the softmax.
pub const MASK_FILL: f64 = -1e9;

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionConfig {
    pub model_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
}

impl AttentionConfig {
    pub fn new(model_dim: usize, num_heads: usize) -> Result<Self> {
        let cfg = AttentionConfig {
            model_dim,
            num_heads,
            ffn_dim: 4 * model_dim,
            dropout: 0.1,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.model_dim == 0 || self.num_heads == 0 || self.ffn_dim == 0 {
            return Err(Error::Config("attention dimensions must be positive".into()));
        }
        if !self.model_dim.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "model_dim {} is not divisible by num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }
}

/// Boolean visibility matrix, `rows` queries by `cols` keys.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMask {
    rows: usize,
    cols: usize,
    visible: Vec<bool>,
}

impl AttentionMask {
    pub fn new(rows: usize, cols: usize, visible: Vec<bool>) -> Result<Self> {
        if visible.len() != rows * cols {
            return Err(Error::shape("attention mask", &[rows, cols], &[visible.len()]));
        }
        Ok(AttentionMask { rows, cols, visible })
    }

    /// Query `t` sees keys `0..=t`.
    pub fn causal(len: usize) -> Self {
        let visible = (0..len * len).map(|i| i % len <= i / len).collect();
        AttentionMask {
            rows: len,
            cols: len,
            visible,
        }
    }

    pub fn is_visible(&self, row: usize, col: usize) -> bool {
        self.visible[row * self.cols + col]
    }

    fn additive<T: Scalar>(&self) -> Result<Tensor<T>> {
        for r in 0..self.rows {
            if !(0..self.cols).any(|c| self.is_visible(r, c)) {
                return Err(Error::FullyMasked { row: r });
            }
        }
        Tensor::new(
            vec![self.rows, self.cols],
            self.visible
                .iter()
                .map(|&v| if v { T::zero() } else { T::of(MASK_FILL) })
                .collect(),
        )
    }
}

/// `softmax(Q K^T / sqrt(d_k) + mask) V` over the last two axes; leading axes
/// are independent batches. Returns `(output, attention weights)`.
pub fn attention_with_weights<T: Scalar>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    v: Var,
    mask: Option<&AttentionMask>,
) -> Result<(Var, Var)> {
    let dk = *g.shape(q).last().unwrap_or(&0);
    if dk == 0 || g.shape(k).last() != Some(&dk) {
        return Err(Error::shape("scaled_dot_attention", g.shape(q), g.shape(k)));
    }
    let kt = g.transpose(k)?;
    let scores = g.matmul(q, kt)?;
    let mut scores = g.scale(scores, T::one() / T::of(dk as f64).sqrt())?;
    if let Some(mask) = mask {
        let s = g.shape(scores);
        if s[s.len() - 2..] != [mask.rows, mask.cols] {
            return Err(Error::shape("attention mask", s, &[mask.rows, mask.cols]));
        }
        let m = g.constant(mask.additive()?);
        scores = g.add_broadcast(scores, m)?;
    }
    let axis = g.shape(scores).len() - 1;
    let weights = g.softmax(scores, axis)?;
    let out = g.matmul(weights, v)?;
    Ok((out, weights))
}

pub fn scaled_dot_attention<T: Scalar>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    v: Var,
    mask: Option<&AttentionMask>,
) -> Result<Var> {
    attention_with_weights(g, q, k, v, mask).map(|(out, _)| out)
}

/// Per-head projections `W_i^Q, W_i^K, W_i^V` (`D x d_k`) and output `W^O` (`D x D`).
#[derive(Clone, Debug)]
pub struct MultiHeadWeights {
    pub query: Vec<Var>,
    pub key: Vec<Var>,
    pub value: Vec<Var>,
    pub output: Var,
}

impl MultiHeadWeights {
    pub fn register<T: Scalar, R: Rng>(
        store: &mut ModelWeights<T>,
        prefix: &str,
        cfg: &AttentionConfig,
        rng: &mut R,
    ) -> Result<()> {
        let (d, dk) = (cfg.model_dim, cfg.head_dim());
        for h in 0..cfg.num_heads {
            for role in ["q", "k", "v"] {
                store.insert(format!("{prefix}.{role}.{h}"), uniform_init(rng, &[d, dk], d)?)?;
            }
        }
        store.insert(format!("{prefix}.o"), uniform_init(rng, &[d, d], d)?)
    }

    pub fn bind(b: &Bindings, prefix: &str, num_heads: usize) -> Result<Self> {
        let heads = |role: &str| {
            (0..num_heads)
                .map(|h| b.get(&format!("{prefix}.{role}.{h}")))
                .collect::<Result<Vec<_>>>()
        };
        Ok(MultiHeadWeights {
            query: heads("q")?,
            key: heads("k")?,
            value: heads("v")?,
            output: b.get(&format!("{prefix}.o"))?,
        })
    }
}

/// `Concat(head_1..head_h) W^O` with `head_i = Attention(x_q W_i^Q, x_kv W_i^K, x_kv W_i^V)`.
pub fn multi_head_attention<T: Scalar>(
    g: &mut Graph<T>,
    x_q: Var,
    x_kv: Var,
    w: &MultiHeadWeights,
    cfg: &AttentionConfig,
    mask: Option<&AttentionMask>,
) -> Result<Var> {
    let d = cfg.model_dim;
    for x in [x_q, x_kv] {
        if g.shape(x).last() != Some(&d) {
            return Err(Error::shape("multi_head_attention", g.shape(x), &[d]));
        }
    }
    if w.query.len() != cfg.num_heads {
        return Err(Error::Config(format!(
            "{} query projections for {} heads",
            w.query.len(),
            cfg.num_heads
        )));
    }
    let mut heads = Vec::with_capacity(cfg.num_heads);
    for h in 0..cfg.num_heads {
        let q = g.matmul(x_q, w.query[h])?;
        let k = g.matmul(x_kv, w.key[h])?;
        let v = g.matmul(x_kv, w.value[h])?;
        heads.push(scaled_dot_attention(g, q, k, v, mask)?);
    }
    let cat = if heads.len() == 1 {
        heads[0]
    } else {
        g.concat_last(&heads)?
    };
    g.matmul(cat, w.output)
}

#[derive(Clone, Debug)]
pub struct FeedForwardWeights {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl FeedForwardWeights {
    pub fn register<T: Scalar, R: Rng>(
        store: &mut ModelWeights<T>,
        prefix: &str,
        cfg: &AttentionConfig,
        rng: &mut R,
    ) -> Result<()> {
        let (d, f) = (cfg.model_dim, cfg.ffn_dim);
        store.insert(format!("{prefix}.w1"), uniform_init(rng, &[d, f], d)?)?;
        store.insert(format!("{prefix}.b1"), uniform_init(rng, &[f], d)?)?;
        store.insert(format!("{prefix}.w2"), uniform_init(rng, &[f, d], f)?)?;
        store.insert(format!("{prefix}.b2"), uniform_init(rng, &[d], f)?)
    }

    pub fn bind(b: &Bindings, prefix: &str) -> Result<Self> {
        Ok(FeedForwardWeights {
            w1: b.get(&format!("{prefix}.w1"))?,
            b1: b.get(&format!("{prefix}.b1"))?,
            w2: b.get(&format!("{prefix}.w2"))?,
            b2: b.get(&format!("{prefix}.b2"))?,
        })
    }
}

/// `max(0, x W1 + b1) W2 + b2`, position-wise.
pub fn feed_forward<T: Scalar>(g: &mut Graph<T>, x: Var, w: &FeedForwardWeights) -> Result<Var> {
    let h = g.matmul(x, w.w1)?;
    let h = g.add_broadcast(h, w.b1)?;
    let h = g.relu(h)?;
    let o = g.matmul(h, w.w2)?;
    g.add_broadcast(o, w.b2)
}

#[derive(Clone, Debug)]
pub struct NormWeights {
    pub gain: Var,
    pub bias: Var,
}

impl NormWeights {
    pub fn register<T: Scalar>(store: &mut ModelWeights<T>, prefix: &str, dim: usize) -> Result<()> {
        store.insert(format!("{prefix}.gain"), Tensor::full(&[dim], T::one())?)?;
        store.insert(format!("{prefix}.bias"), Tensor::zeros(&[dim])?)
    }

    pub fn bind(b: &Bindings, prefix: &str) -> Result<Self> {
        Ok(NormWeights {
            gain: b.get(&format!("{prefix}.gain"))?,
            bias: b.get(&format!("{prefix}.bias"))?,
        })
    }
}

/// Post-norm residual connection: `layer_norm(x + dropout(sublayer_output))`.
pub fn residual_sublayer<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    sublayer_output: Var,
    norm: &NormWeights,
    dropout_rate: f64,
    training: bool,
    rng: &mut DropoutRng,
) -> Result<Var> {
    let dropped = g.dropout(sublayer_output, dropout_rate, training, rng)?;
    let sum = g.add(x, dropped)?;
    g.layer_norm(sum, norm.gain, norm.bias, LAYER_NORM_EPS)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn head_dim_at_published_size() {
        let cfg = AttentionConfig::new(512, 8).unwrap();
        assert_eq!(cfg.head_dim(), 64);
        assert_eq!(cfg.ffn_dim, 2048);
        assert!(AttentionConfig::new(10, 3).is_err());
    }

    #[test]
    fn single_key_returns_value() {
        let mut g = Graph::new();
        let q = g.constant(t(&[1, 3], &[0.3, -1.0, 2.0]));
        let v = g.constant(t(&[1, 2], &[5.0, -7.0]));
        let out = scaled_dot_attention(&mut g, q, q, v, None).unwrap();
        assert_eq!(g.value(out).data(), &[5.0, -7.0]);
    }

    #[test]
    fn orthogonal_query_averages_values() {
        let mut g = Graph::new();
        let q = g.constant(t(&[1, 2], &[1.0, 0.0]));
        let k = g.constant(t(&[3, 2], &[0.0, 1.0, 0.0, -2.0, 0.0, 3.0]));
        let v = g.constant(t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 9.0]));
        let out = scaled_dot_attention(&mut g, q, k, v, None).unwrap();
        assert_abs_diff_eq!(g.value(out).data()[0], 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(g.value(out).data()[1], 5.0, epsilon = 1e-12);
    }

    #[test]
    fn two_key_hand_evaluation() {
        // d_k = 4, q.k1 = 2 -> scaled score 1, q.k2 = 0 -> scaled score 0
        let mut g = Graph::new();
        let q = g.constant(t(&[1, 4], &[1.0, 1.0, 0.0, 0.0]));
        let k = g.constant(t(&[2, 4], &[1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]));
        let v = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let (out, w) = attention_with_weights(&mut g, q, k, v, None).unwrap();
        let e = std::f64::consts::E;
        assert_abs_diff_eq!(g.value(w).data()[0], e / (e + 1.0), epsilon = 1e-12);
        assert_abs_diff_eq!(g.value(out).data()[0], 0.7311, epsilon = 1e-4);
        assert_abs_diff_eq!(g.value(out).data()[1], 0.2689, epsilon = 1e-4);
    }

    #[test]
    fn fully_masked_row_is_an_error() {
        let mut g = Graph::new();
        let q = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let mask = AttentionMask::new(2, 2, vec![true, false, false, false]).unwrap();
        let err = scaled_dot_attention(&mut g, q, q, q, Some(&mask)).unwrap_err();
        assert!(matches!(err, Error::FullyMasked { row: 1 }));
    }

    #[test]
    fn causal_mask_layout() {
        let m = AttentionMask::causal(3);
        assert!(m.is_visible(0, 0) && !m.is_visible(0, 1));
        assert!(m.is_visible(2, 1) && m.is_visible(2, 2));
        assert!(!m.is_visible(1, 2));
    }

    #[test]
    fn feed_forward_with_zero_first_layer_emits_bias() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3, 2], &[1.0, 2.0, -3.0, 4.0, 0.5, 0.5]));
        let w = FeedForwardWeights {
            w1: g.constant(Tensor::zeros(&[2, 4]).unwrap()),
            b1: g.constant(Tensor::zeros(&[4]).unwrap()),
            w2: g.constant(Tensor::from_fn(&[4, 2], |i| i as f64).unwrap()),
            b2: g.constant(t(&[2], &[0.5, -1.5])),
        };
        let y = feed_forward(&mut g, x, &w).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, -1.5, 0.5, -1.5, 0.5, -1.5]);
    }

    #[test]
    fn residual_with_zero_branch_is_layer_norm() {
        let mut g = Graph::new();
        let mut rng = DropoutRng::new(0);
        let x = g.constant(t(&[1, 3], &[1.0, 2.0, 6.0]));
        let z = g.constant(Tensor::zeros(&[1, 3]).unwrap());
        let norm = NormWeights {
            gain: g.constant(Tensor::full(&[3], 1.0).unwrap()),
            bias: g.constant(t(&[3], &[0.0, 0.0, 0.0])),
        };
        let y = residual_sublayer(&mut g, x, z, &norm, 0.1, false, &mut rng).unwrap();
        let ln = g.layer_norm(x, norm.gain, norm.bias, LAYER_NORM_EPS).unwrap();
        assert_eq!(g.value(y), g.value(ln));

        let b = g.constant(t(&[3], &[0.1, 0.2, 0.3]));
        let norm = NormWeights { gain: norm.gain, bias: b };
        let y = residual_sublayer(&mut g, z, z, &norm, 0.1, false, &mut rng).unwrap();
        assert_eq!(g.value(y).data(), &[0.1, 0.2, 0.3]);
    }
}
