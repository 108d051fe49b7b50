use crate::error::{Error, Result};
use crate::numcore::{Scalar, Tensor};

/// `N` agent channels by `T` frames of `(x, y)` positions in meters.
///
/// Masked (padding) channels hold zeros. `origin` is the translation that
/// was subtracted by [`Scene::normalized`], kept for de-normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    agents: usize,
    frames: usize,
    positions: Vec<f64>,
    channel_mask: Vec<bool>,
    target_index: usize,
    origin: [f64; 2],
}

impl Scene {
    pub fn new(
        agents: usize,
        frames: usize,
        positions: Vec<f64>,
        channel_mask: Vec<bool>,
        target_index: usize,
    ) -> Result<Self> {
        if agents == 0 || frames == 0 {
            return Err(Error::Data("scene needs at least one agent and one frame".into()));
        }
        if positions.len() != agents * frames * 2 || channel_mask.len() != agents {
            return Err(Error::shape(
                "scene",
                &[agents, frames, 2],
                &[channel_mask.len(), positions.len()],
            ));
        }
        if positions.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite coordinate in scene".into()));
        }
        if target_index >= agents || !channel_mask[target_index] {
            return Err(Error::Data(format!(
                "target channel {target_index} must be a real agent"
            )));
        }
        for (c, &real) in channel_mask.iter().enumerate() {
            if !real && positions[c * frames * 2..(c + 1) * frames * 2].iter().any(|&v| v != 0.0) {
                return Err(Error::Data(format!("masked channel {c} holds non-zero positions")));
            }
        }
        Ok(Scene {
            agents,
            frames,
            positions,
            channel_mask,
            target_index,
            origin: [0.0, 0.0],
        })
    }

    pub fn agents(&self) -> usize {
        self.agents
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn positions(&self) -> &[f64] {
        &self.positions
    }

    pub fn channel_mask(&self) -> &[bool] {
        &self.channel_mask
    }

    pub fn target_index(&self) -> usize {
        self.target_index
    }

    pub fn origin(&self) -> [f64; 2] {
        self.origin
    }

    pub fn real_agents(&self) -> usize {
        self.channel_mask.iter().filter(|&&m| m).count()
    }

    pub fn point(&self, agent: usize, frame: usize) -> [f64; 2] {
        let i = (agent * self.frames + frame) * 2;
        [self.positions[i], self.positions[i + 1]]
    }

    /// Frames `start .. start + len` of every channel.
    pub fn window(&self, start: usize, len: usize) -> Result<Scene> {
        if len == 0 || start + len > self.frames {
            return Err(Error::Data(format!(
                "frame window {start}..{} outside scene of {} frames",
                start + len,
                self.frames
            )));
        }
        let mut positions = Vec::with_capacity(self.agents * len * 2);
        for a in 0..self.agents {
            let base = (a * self.frames + start) * 2;
            positions.extend_from_slice(&self.positions[base..base + len * 2]);
        }
        Ok(Scene {
            positions,
            frames: len,
            channel_mask: self.channel_mask.clone(),
            ..*self
        })
    }

    /// Keeps the first `n` channels, zero-padding with masked channels if needed.
    pub fn with_channels(&self, n: usize) -> Result<Scene> {
        if n <= self.target_index {
            return Err(Error::Config(format!(
                "{n} channels cannot hold target channel {}",
                self.target_index
            )));
        }
        let keep = n.min(self.agents);
        let mut positions = self.positions[..keep * self.frames * 2].to_vec();
        positions.resize(n * self.frames * 2, 0.0);
        let mut mask = self.channel_mask[..keep].to_vec();
        mask.resize(n, false);
        Ok(Scene {
            agents: n,
            positions,
            channel_mask: mask,
            ..*self
        })
    }

    /// Translates real channels so the target's position at frame
    /// `last_obs` becomes the origin. The translation accumulates into
    /// [`origin`](Self::origin).
    pub fn normalized(&self, last_obs: usize) -> Result<Scene> {
        if last_obs >= self.frames {
            return Err(Error::Data(format!(
                "frame {last_obs} outside scene of {} frames",
                self.frames
            )));
        }
        let [ox, oy] = self.point(self.target_index, last_obs);
        let mut out = self.clone();
        out.translate(-ox, -oy);
        out.origin = [self.origin[0] + ox, self.origin[1] + oy];
        Ok(out)
    }

    /// Same coordinates with a replaced de-normalization offset (used when
    /// reloading cached scenes).
    pub fn with_origin(mut self, origin: [f64; 2]) -> Scene {
        self.origin = origin;
        self
    }

    /// Undoes all normalization, returning the scene in its source frame.
    pub fn denormalized(&self) -> Scene {
        let mut out = self.clone();
        out.translate(self.origin[0], self.origin[1]);
        out.origin = [0.0, 0.0];
        out
    }

    fn translate(&mut self, dx: f64, dy: f64) {
        for (c, &real) in self.channel_mask.iter().enumerate() {
            if !real {
                continue;
            }
            for p in self.positions[c * self.frames * 2..(c + 1) * self.frames * 2].chunks_mut(2) {
                p[0] += dx;
                p[1] += dy;
            }
        }
    }

    /// Maps `N x T x 2` points in this scene's normalized frame back to the source frame.
    pub fn denormalize_points(&self, points: &Tensor<f64>) -> Result<Tensor<f64>> {
        if points.rank() != 3 || points.shape()[2] != 2 {
            return Err(Error::shape("denormalize_points", points.shape(), &[0, 0, 2]));
        }
        let data = points
            .data()
            .chunks(2)
            .flat_map(|p| [p[0] + self.origin[0], p[1] + self.origin[1]])
            .collect();
        Tensor::new(points.shape().to_vec(), data)
    }

    pub fn positions_tensor<T: Scalar>(&self) -> Result<Tensor<T>> {
        Tensor::from_f64(&[self.agents, self.frames, 2], &self.positions)
    }

    pub fn mask_tensor<T: Scalar>(&self) -> Result<Tensor<T>> {
        Tensor::from_fn(&[self.agents], |c| {
            if self.channel_mask[c] {
                T::one()
            } else {
                T::zero()
            }
        })
    }

    /// Replaces the coordinates of one real channel.
    pub fn set_track(&mut self, agent: usize, track: &[[f64; 2]]) -> Result<()> {
        if agent >= self.agents || track.len() != self.frames {
            return Err(Error::Usage(format!(
                "track of {} frames for agent {agent}",
                track.len()
            )));
        }
        if !self.channel_mask[agent] {
            return Err(Error::Usage(format!("agent {agent} is a masked channel")));
        }
        if track.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite coordinate in track".into()));
        }
        for (t, p) in track.iter().enumerate() {
            let i = (agent * self.frames + t) * 2;
            self.positions[i] = p[0];
            self.positions[i + 1] = p[1];
        }
        Ok(())
    }

    /// Overwrites the raw values of a channel, including masked ones. Intended for
    /// perturbation tests; invariants on masked channels are not enforced.
    #[doc(hidden)]
    pub fn overwrite_channel_unchecked(&mut self, agent: usize, values: &[f64]) {
        let span = self.frames * 2;
        self.positions[agent * span..(agent + 1) * span].copy_from_slice(&values[..span]);
    }
}
