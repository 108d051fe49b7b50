//! Trajectory embedding (2 -> D) and sinusoidal positional encoding.
//!
//! The positional vector for timestep `t` has one entry per index
//! `d = 1..=D`, stored at component `d - 1`:
//!
//! ```text
//! p(t, d) = sin(t / 10000^(d / D))   d even
//! p(t, d) = cos(t / 10000^(d / D))   d odd
//! ```
//!
//! The exponent uses `d / D` directly rather than the `2 floor(d / 2) / D`
//! pairing common elsewhere, so neighbouring sin/cos entries have slightly
//! different frequencies.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numcore::{Graph, Scalar, Tensor, Var};
use crate::weights::{uniform_init, Bindings, ModelWeights};

pub const DEFAULT_TABLE_LEN: usize = 64;

/// Positional encoding vector of length `dim` for timestep `t`.
pub fn positional_encoding(t: usize, dim: usize) -> Vec<f64> {
    (1..=dim)
        .map(|d| {
            let angle = t as f64 / 10000f64.powf(d as f64 / dim as f64);
            if d % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

/// Precomputed `max_len x dim` table of [`positional_encoding`] rows.
#[derive(Clone, Debug, PartialEq)]
pub struct PositionalTable {
    dim: usize,
    rows: Vec<Vec<f64>>,
}

impl PositionalTable {
    pub fn new(max_len: usize, dim: usize) -> Self {
        let mut table = PositionalTable {
            dim,
            rows: Vec::new(),
        };
        table.extend_to(max_len);
        table
    }

    pub fn extend_to(&mut self, len: usize) {
        while self.rows.len() < len {
            self.rows.push(positional_encoding(self.rows.len(), self.dim));
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, t: usize) -> Option<&[f64]> {
        self.rows.get(t).map(Vec::as_slice)
    }

    /// Rows `start .. start + len` as a `len x dim` tensor.
    pub fn rows<T: Scalar>(&self, start: usize, len: usize) -> Result<Tensor<T>> {
        if start + len > self.rows.len() {
            return Err(Error::Config(format!(
                "timesteps {start}..{} exceed positional table length {}",
                start + len,
                self.rows.len()
            )));
        }
        let data = self.rows[start..start + len]
            .iter()
            .flatten()
            .map(|&v| T::of(v))
            .collect();
        Tensor::new(vec![len, self.dim], data)
    }
}

/// Linear `2 -> D` map, optionally preceded by one hidden ReLU layer.
#[derive(Clone, Debug)]
pub struct EmbeddingWeights {
    pub hidden: Option<(Var, Var)>,
    pub w: Var,
    pub b: Var,
}

impl EmbeddingWeights {
    pub fn register<T: Scalar, R: Rng>(
        store: &mut ModelWeights<T>,
        prefix: &str,
        dim: usize,
        hidden: Option<usize>,
        rng: &mut R,
    ) -> Result<()> {
        let fan_in = match hidden {
            Some(h) => {
                store.insert(format!("{prefix}.hidden.w"), uniform_init(rng, &[2, h], 2)?)?;
                store.insert(format!("{prefix}.hidden.b"), uniform_init(rng, &[h], 2)?)?;
                h
            }
            None => 2,
        };
        store.insert(format!("{prefix}.w"), uniform_init(rng, &[fan_in, dim], fan_in)?)?;
        store.insert(format!("{prefix}.b"), uniform_init(rng, &[dim], fan_in)?)
    }

    pub fn bind(b: &Bindings, prefix: &str) -> Result<Self> {
        let hidden = if b.contains(&format!("{prefix}.hidden.w")) {
            Some((
                b.get(&format!("{prefix}.hidden.w"))?,
                b.get(&format!("{prefix}.hidden.b"))?,
            ))
        } else {
            None
        };
        Ok(EmbeddingWeights {
            hidden,
            w: b.get(&format!("{prefix}.w"))?,
            b: b.get(&format!("{prefix}.b"))?,
        })
    }
}

/// Per-timestep affine map of `[.., T, 2]` coordinates to `[.., T, D]`.
pub fn embed_trajectory<T: Scalar>(g: &mut Graph<T>, points: Var, w: &EmbeddingWeights) -> Result<Var> {
    if g.shape(points).last() != Some(&2) {
        return Err(Error::shape("embed_trajectory", g.shape(points), &[2]));
    }
    let mut x = points;
    if let Some((hw, hb)) = w.hidden {
        let h = g.matmul(x, hw)?;
        let h = g.add_broadcast(h, hb)?;
        x = g.relu(h)?;
    }
    let e = g.matmul(x, w.w)?;
    g.add_broadcast(e, w.b)
}

/// Embedding of an `N x T x 2` scene plus positional rows `start_t .. start_t + T`,
/// the same row added to every agent channel.
pub fn compose_input<T: Scalar>(
    g: &mut Graph<T>,
    points: Var,
    w: &EmbeddingWeights,
    table: &PositionalTable,
    start_t: usize,
) -> Result<Var> {
    let shape = g.shape(points).to_vec();
    if shape.len() != 3 {
        return Err(Error::shape("compose_input", &shape, &[0, 0, 2]));
    }
    let pe = g.constant(table.rows(start_t, shape[1])?);
    let e = embed_trajectory(g, points, w)?;
    g.add_broadcast(e, pe)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_row_is_parity_pattern() {
        let row = positional_encoding(0, 16);
        for (k, &v) in row.iter().enumerate() {
            let d = k + 1;
            assert_eq!(v, if d % 2 == 0 { 0.0 } else { 1.0 });
        }
    }

    #[test]
    fn last_index_at_t1() {
        let d = 512;
        let row = positional_encoding(1, d);
        assert!((row[d - 1] - (1e-4f64).sin()).abs() < 1e-15);
        assert!((row[d - 1] - 1.0e-4).abs() < 1e-11);
    }

    #[test]
    fn table_rows_and_bounds() {
        let mut table = PositionalTable::new(DEFAULT_TABLE_LEN, 8);
        assert_eq!(table.len(), 64);
        assert!(table.rows::<f64>(60, 5).is_err());
        table.extend_to(70);
        let r = table.rows::<f64>(60, 5).unwrap();
        assert_eq!(r.shape(), &[5, 8]);
        assert_eq!(r.data()[..8], positional_encoding(60, 8)[..]);
    }

    #[test]
    fn zero_point_maps_to_bias() {
        let mut g = Graph::new();
        let w = EmbeddingWeights {
            hidden: None,
            w: g.constant(Tensor::from_fn(&[2, 3], |i| i as f64 + 1.0).unwrap()),
            b: g.constant(Tensor::from_f64(&[3], &[0.5, -0.5, 2.0]).unwrap()),
        };
        let p = g.constant(Tensor::zeros(&[1, 2]).unwrap());
        let e = embed_trajectory(&mut g, p, &w).unwrap();
        assert_eq!(g.value(e).data(), &[0.5, -0.5, 2.0]);
    }
}
