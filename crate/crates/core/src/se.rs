//! Squeeze-and-excitation attention across agent channels.
//!
//! Each agent is one feature channel of an `N x T x D` tensor. The squeeze
//! pools a channel's whole `T x D` slab to a scalar, the excitation maps the
//! `N` pooled values through a ReLU bottleneck and a sigmoid gate, and the
//! scale multiplies every channel by its gate. Gates lie strictly in (0, 1),
//! so channels are only ever attenuated.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numcore::{Graph, Scalar, Tensor, Var};
use crate::weights::{uniform_init, Bindings, ModelWeights};

pub const DEFAULT_REDUCTION: usize = 2;

pub fn bottleneck_width(channels: usize, reduction: usize) -> usize {
    (channels / reduction.max(1)).max(1)
}

#[derive(Clone, Debug)]
pub struct SeWeights {
    /// `N x B`
    pub w1: Var,
    /// `B x N`
    pub w2: Var,
    pub biases: Option<(Var, Var)>,
}

impl SeWeights {
    pub fn register<T: Scalar, R: Rng>(
        store: &mut ModelWeights<T>,
        prefix: &str,
        channels: usize,
        reduction: usize,
        with_bias: bool,
        rng: &mut R,
    ) -> Result<()> {
        let b = bottleneck_width(channels, reduction);
        store.insert(format!("{prefix}.w1"), uniform_init(rng, &[channels, b], channels)?)?;
        store.insert(format!("{prefix}.w2"), uniform_init(rng, &[b, channels], b)?)?;
        if with_bias {
            store.insert(format!("{prefix}.b1"), uniform_init(rng, &[b], channels)?)?;
            store.insert(format!("{prefix}.b2"), uniform_init(rng, &[channels], b)?)?;
        }
        Ok(())
    }

    pub fn bind(b: &Bindings, prefix: &str) -> Result<Self> {
        let biases = if b.contains(&format!("{prefix}.b1")) {
            Some((b.get(&format!("{prefix}.b1"))?, b.get(&format!("{prefix}.b2"))?))
        } else {
            None
        };
        Ok(SeWeights {
            w1: b.get(&format!("{prefix}.w1"))?,
            w2: b.get(&format!("{prefix}.w2"))?,
            biases,
        })
    }
}

/// Mean over each channel's `T x D` slab: `N x T x D -> N`.
pub fn squeeze<T: Scalar>(g: &mut Graph<T>, e: Var) -> Result<Var> {
    let s = g.shape(e).to_vec();
    if s.len() != 3 {
        return Err(Error::shape("squeeze", &s, &[0, 0, 0]));
    }
    let flat = g.reshape(e, &[s[0], s[1] * s[2]])?;
    g.mean_last(flat)
}

/// `sigmoid(relu(z W1 (+ b1)) W2 (+ b2))` applied to each row of `z` (`[.., N]`).
fn gate<T: Scalar>(g: &mut Graph<T>, z: Var, w: &SeWeights) -> Result<Var> {
    let mut h = g.matmul(z, w.w1)?;
    if let Some((b1, _)) = w.biases {
        h = g.add_broadcast(h, b1)?;
    }
    let h = g.relu(h)?;
    let mut o = g.matmul(h, w.w2)?;
    if let Some((_, b2)) = w.biases {
        o = g.add_broadcast(o, b2)?;
    }
    g.sigmoid(o)
}

/// Channel gates `s = sigmoid(w2 relu(w1 z))`, each in (0, 1).
pub fn excite<T: Scalar>(g: &mut Graph<T>, z: Var, w: &SeWeights) -> Result<Var> {
    let n = match g.shape(z) {
        [n] => *n,
        s => return Err(Error::shape("excite", s, &[0])),
    };
    let row = g.reshape(z, &[1, n])?;
    let s = gate(g, row, w)?;
    g.reshape(s, &[n])
}

/// Multiplies channel `c` of `e` by `s[c]`.
pub fn scale<T: Scalar>(g: &mut Graph<T>, e: Var, s: Var) -> Result<Var> {
    g.mul_prefix(e, s)
}

/// Full squeeze -> excite -> scale pass; shape preserved.
pub fn se_forward<T: Scalar>(g: &mut Graph<T>, e: Var, w: &SeWeights) -> Result<Var> {
    let z = squeeze(g, e)?;
    let s = excite(g, z, w)?;
    scale(g, e, s)
}

/// SE pass for autoregressive inputs: the gate at timestep `t` is computed
/// from slabs pooled over frames `0..=t` only, so earlier outputs never see
/// later frames.
pub fn se_forward_causal<T: Scalar>(g: &mut Graph<T>, e: Var, w: &SeWeights) -> Result<Var> {
    let s = g.shape(e).to_vec();
    if s.len() != 3 {
        return Err(Error::shape("se_forward_causal", &s, &[0, 0, 0]));
    }
    let (frames, len) = (s[1], s[1]);
    let per_frame = g.mean_last(e)?; // N x T
    let by_time = g.transpose(per_frame)?; // T x N
    let averaging = g.constant(Tensor::from_fn(&[frames, len], |i| {
        let (t, j) = (i / len, i % len);
        if j <= t {
            T::one() / T::of((t + 1) as f64)
        } else {
            T::zero()
        }
    })?);
    let z = g.matmul(averaging, by_time)?; // T x N
    let gates = gate(g, z, w)?; // T x N
    let gates = g.transpose(gates)?; // N x T
    g.mul_prefix(e, gates)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn zero_weights(g: &mut Graph<f64>, n: usize, r: usize) -> SeWeights {
        let b = bottleneck_width(n, r);
        SeWeights {
            w1: g.constant(Tensor::zeros(&[n, b]).unwrap()),
            w2: g.constant(Tensor::zeros(&[b, n]).unwrap()),
            biases: None,
        }
    }

    #[test]
    fn bottleneck_never_collapses() {
        assert_eq!(bottleneck_width(5, 16), 1);
        assert_eq!(bottleneck_width(10, 2), 5);
        assert_eq!(bottleneck_width(15, 2), 7);
        assert_eq!(bottleneck_width(1, 2), 1);
    }

    #[test]
    fn squeeze_examples() {
        let mut g = Graph::<f64>::new();
        let e = g.constant(Tensor::from_f64(&[2, 2, 2], &[1.0, 2.0, 3.0, 4.0, 7.0, 7.0, 7.0, 7.0]).unwrap());
        let z = squeeze(&mut g, e).unwrap();
        assert_eq!(g.value(z).data(), &[2.5, 7.0]);
        let e = g.constant(Tensor::zeros(&[3, 4, 5]).unwrap());
        let z = squeeze(&mut g, e).unwrap();
        assert_eq!(g.value(z).data(), &[0.0; 3]);
    }

    #[test]
    fn zero_weights_halve_every_channel() {
        let mut g = Graph::new();
        let w = zero_weights(&mut g, 3, 2);
        let e = g.constant(Tensor::from_fn(&[3, 2, 4], |i| i as f64 - 7.0).unwrap());
        let out = se_forward(&mut g, e, &w).unwrap();
        let expect: Vec<f64> = g.value(e).data().iter().map(|v| v * 0.5).collect();
        assert_eq!(g.value(out).data(), &expect[..]);
        let out = se_forward_causal(&mut g, e, &w).unwrap();
        assert_eq!(g.value(out).data(), &expect[..]);
    }

    #[test]
    fn closed_form_excitation() {
        // N = 2, r = 2 -> width 1; w1 = [1, 1]^T, w2 = [ln 3, ln 3]; z = [1, 0]
        let mut g = Graph::<f64>::new();
        let ln3 = 3f64.ln();
        let w = SeWeights {
            w1: g.constant(Tensor::from_f64(&[2, 1], &[1.0, 1.0]).unwrap()),
            w2: g.constant(Tensor::from_f64(&[1, 2], &[ln3, ln3]).unwrap()),
            biases: None,
        };
        let z = g.constant(Tensor::from_f64(&[2], &[1.0, 0.0]).unwrap());
        let s = excite(&mut g, z, &w).unwrap();
        for &v in g.value(s).data() {
            assert_abs_diff_eq!(v, 0.75, epsilon = 1e-12);
        }
    }

    #[test]
    fn explicit_scale_vector() {
        let mut g = Graph::new();
        let e = g.constant(Tensor::from_fn(&[2, 2, 3], |i| i as f64 + 1.0).unwrap());
        let s = g.constant(Tensor::from_f64(&[2], &[1.0, 0.25]).unwrap());
        let out = scale(&mut g, e, s).unwrap();
        let v = g.value(out);
        for c in 0..2 {
            for t in 0..2 {
                for d in 0..3 {
                    let factor = [1.0, 0.25][c];
                    let expect = g.value(e).at(&[c, t, d]) * factor;
                    assert!((v.at(&[c, t, d]) - expect).abs() <= 1e-9);
                }
            }
        }
    }

    #[test]
    fn causal_gate_ignores_future_frames() {
        let mut g = Graph::new();
        let w = SeWeights {
            w1: g.constant(Tensor::from_f64(&[2, 1], &[0.7, -0.4]).unwrap()),
            w2: g.constant(Tensor::from_f64(&[1, 2], &[1.3, 0.2]).unwrap()),
            biases: None,
        };
        let a = Tensor::from_fn(&[2, 4, 3], |i| (i as f64 * 0.31).sin()).unwrap();
        let mut b = a.clone();
        for c in 0..2 {
            for d in 0..3 {
                b.data_mut()[(c * 4 + 3) * 3 + d] += 5.0;
            }
        }
        let ea = g.constant(a);
        let eb = g.constant(b);
        let oa = se_forward_causal(&mut g, ea, &w).unwrap();
        let ob = se_forward_causal(&mut g, eb, &w).unwrap();
        for c in 0..2 {
            for t in 0..3 {
                for d in 0..3 {
                    assert_eq!(g.value(oa).at(&[c, t, d]), g.value(ob).at(&[c, t, d]));
                }
            }
        }
    }
}
