//! The full spatial-channel transformer: embedding, channel SE, a per-agent
//! temporal encoder and an autoregressive decoder.
//!
//! All agents share weights. Temporal attention never crosses agent
//! channels; the only cross-agent path is the SE gate.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::{
    feed_forward, multi_head_attention, residual_sublayer, AttentionConfig, AttentionMask,
    FeedForwardWeights, MultiHeadWeights, NormWeights,
};
use crate::embedding::{compose_input, EmbeddingWeights, PositionalTable, DEFAULT_TABLE_LEN};
use crate::error::{Error, Result};
use crate::numcore::{DropoutRng, Graph, Scalar, Tensor, Var};
use crate::scene::Scene;
use crate::se::{se_forward, se_forward_causal, SeWeights, DEFAULT_REDUCTION};
use crate::weights::{uniform_init, Bindings, ModelWeights};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputMode {
    /// The decoder emits positions in the normalized segment frame.
    Absolute,
    /// The decoder emits a displacement added to its own input point.
    Offset,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// Reduced width for quick runs on a laptop.
    Desk,
    /// Full-size published dimensions.
    Paper,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub agents: usize,
    pub obs_len: usize,
    pub pred_len: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    pub use_se: bool,
    pub se_reduction: usize,
    pub se_on_decoder: bool,
    pub se_bias: bool,
    pub embed_hidden: Option<usize>,
    /// Meters per model coordinate unit; inputs are divided by it and outputs multiplied.
    pub position_scale: f64,
    pub output_mode: OutputMode,
    pub seed: u64,
}

impl ModelConfig {
    pub fn for_profile(profile: Profile, agents: usize) -> Self {
        match profile {
            Profile::Desk => Self::desk(agents),
            Profile::Paper => Self::paper(agents),
        }
    }

    /// 8 heads, D = 512.
    pub fn paper(agents: usize) -> Self {
        ModelConfig {
            agents,
            obs_len: 15,
            pred_len: 25,
            model_dim: 512,
            heads: 8,
            layers: 2,
            ffn_dim: 2048,
            dropout: 0.1,
            use_se: true,
            se_reduction: DEFAULT_REDUCTION,
            se_on_decoder: false,
            se_bias: false,
            embed_hidden: None,
            position_scale: 1.0,
            output_mode: OutputMode::Offset,
            seed: 0,
        }
    }

    /// Reduced dimensions for fast runs.
    pub fn desk(agents: usize) -> Self {
        ModelConfig {
            model_dim: 64,
            heads: 4,
            ffn_dim: 256,
            ..Self::paper(agents)
        }
    }

    /// Tiny dimensions used for exhaustive gradient checks.
    pub fn toy() -> Self {
        ModelConfig {
            agents: 3,
            obs_len: 4,
            pred_len: 3,
            model_dim: 16,
            heads: 2,
            layers: 1,
            ffn_dim: 64,
            dropout: 0.0,
            ..Self::paper(3)
        }
    }

    pub fn attention(&self) -> AttentionConfig {
        AttentionConfig {
            model_dim: self.model_dim,
            num_heads: self.heads,
            ffn_dim: self.ffn_dim,
            dropout: self.dropout,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.attention().validate()?;
        if self.agents == 0 || self.obs_len == 0 || self.pred_len == 0 || self.layers == 0 {
            return Err(Error::Config(
                "agents, obs_len, pred_len and layers must be >= 1".into(),
            ));
        }
        if self.se_reduction == 0 {
            return Err(Error::Config("se_reduction must be >= 1".into()));
        }
        if self.embed_hidden == Some(0) {
            return Err(Error::Config("embed_hidden must be >= 1 when set".into()));
        }
        if !(self.position_scale.is_finite() && self.position_scale > 0.0) {
            return Err(Error::Config(format!(
                "position_scale {} must be positive",
                self.position_scale
            )));
        }
        Ok(())
    }
}

/// Dropout mode and generator for one forward pass.
#[derive(Clone, Debug)]
pub struct Pass {
    pub training: bool,
    pub rng: DropoutRng,
}

impl Pass {
    pub fn inference() -> Self {
        Pass {
            training: false,
            rng: DropoutRng::new(0),
        }
    }

    pub fn training(seed: u64) -> Self {
        Pass {
            training: true,
            rng: DropoutRng::new(seed),
        }
    }
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    attn: MultiHeadWeights,
    norm1: NormWeights,
    ffn: FeedForwardWeights,
    norm2: NormWeights,
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    self_attn: MultiHeadWeights,
    norm1: NormWeights,
    cross_attn: MultiHeadWeights,
    norm2: NormWeights,
    ffn: FeedForwardWeights,
    norm3: NormWeights,
}

/// Model weights placed into a particular [`Graph`].
#[derive(Clone, Debug)]
pub struct BoundModel {
    pub bindings: Bindings,
    enc_embed: EmbeddingWeights,
    se: Option<SeWeights>,
    encoder: Vec<EncoderLayer>,
    dec_embed: EmbeddingWeights,
    dec_se: Option<SeWeights>,
    decoder: Vec<DecoderLayer>,
    out_w: Var,
    out_b: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    config: ModelConfig,
    weights: ModelWeights<T>,
    table: PositionalTable,
}

impl<T: Scalar> Model<T> {
    /// Fresh model with weights initialized from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let weights = Self::initial_weights(&config)?;
        Ok(Self::assemble(config, weights))
    }

    pub fn from_weights(config: ModelConfig, weights: ModelWeights<T>) -> Result<Self> {
        config.validate()?;
        weights.check_layout(&Self::initial_weights(&config)?)?;
        Ok(Self::assemble(config, weights))
    }

    fn assemble(config: ModelConfig, weights: ModelWeights<T>) -> Self {
        let len = DEFAULT_TABLE_LEN.max(config.obs_len + config.pred_len);
        let table = PositionalTable::new(len, config.model_dim);
        Model {
            config,
            weights,
            table,
        }
    }

    fn initial_weights(cfg: &ModelConfig) -> Result<ModelWeights<T>> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let att = cfg.attention();
        let d = cfg.model_dim;
        let mut w = ModelWeights::new();
        EmbeddingWeights::register(&mut w, "enc.embed", d, cfg.embed_hidden, &mut rng)?;
        if cfg.use_se {
            SeWeights::register(&mut w, "se", cfg.agents, cfg.se_reduction, cfg.se_bias, &mut rng)?;
        }
        for l in 0..cfg.layers {
            MultiHeadWeights::register(&mut w, &format!("enc.{l}.attn"), &att, &mut rng)?;
            NormWeights::register(&mut w, &format!("enc.{l}.norm1"), d)?;
            FeedForwardWeights::register(&mut w, &format!("enc.{l}.ffn"), &att, &mut rng)?;
            NormWeights::register(&mut w, &format!("enc.{l}.norm2"), d)?;
        }
        EmbeddingWeights::register(&mut w, "dec.embed", d, cfg.embed_hidden, &mut rng)?;
        if cfg.use_se && cfg.se_on_decoder {
            SeWeights::register(&mut w, "dec_se", cfg.agents, cfg.se_reduction, cfg.se_bias, &mut rng)?;
        }
        for l in 0..cfg.layers {
            MultiHeadWeights::register(&mut w, &format!("dec.{l}.self_attn"), &att, &mut rng)?;
            NormWeights::register(&mut w, &format!("dec.{l}.norm1"), d)?;
            MultiHeadWeights::register(&mut w, &format!("dec.{l}.cross_attn"), &att, &mut rng)?;
            NormWeights::register(&mut w, &format!("dec.{l}.norm2"), d)?;
            FeedForwardWeights::register(&mut w, &format!("dec.{l}.ffn"), &att, &mut rng)?;
            NormWeights::register(&mut w, &format!("dec.{l}.norm3"), d)?;
        }
        w.insert("out.w", uniform_init(&mut rng, &[d, 2], d)?)?;
        w.insert("out.b", uniform_init(&mut rng, &[2], d)?)?;
        Ok(w)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn weights(&self) -> &ModelWeights<T> {
        &self.weights
    }

    pub(crate) fn weights_mut(&mut self) -> &mut ModelWeights<T> {
        &mut self.weights
    }

    pub fn into_weights(self) -> ModelWeights<T> {
        self.weights
    }

    pub fn positional_table(&self) -> &PositionalTable {
        &self.table
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            weights: self.weights.cast(),
            table: self.table.clone(),
        }
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Result<BoundModel> {
        Self::bind_with(&self.config, self.weights.bind(g, trainable))
    }

    /// Builds the typed view over externally bound weights (for example
    /// weights placed into a gradient-check graph).
    pub fn bind_with(cfg: &ModelConfig, b: Bindings) -> Result<BoundModel> {
        let h = cfg.heads;
        let encoder = (0..cfg.layers)
            .map(|l| {
                Ok(EncoderLayer {
                    attn: MultiHeadWeights::bind(&b, &format!("enc.{l}.attn"), h)?,
                    norm1: NormWeights::bind(&b, &format!("enc.{l}.norm1"))?,
                    ffn: FeedForwardWeights::bind(&b, &format!("enc.{l}.ffn"))?,
                    norm2: NormWeights::bind(&b, &format!("enc.{l}.norm2"))?,
                })
            })
            .collect::<Result<_>>()?;
        let decoder = (0..cfg.layers)
            .map(|l| {
                Ok(DecoderLayer {
                    self_attn: MultiHeadWeights::bind(&b, &format!("dec.{l}.self_attn"), h)?,
                    norm1: NormWeights::bind(&b, &format!("dec.{l}.norm1"))?,
                    cross_attn: MultiHeadWeights::bind(&b, &format!("dec.{l}.cross_attn"), h)?,
                    norm2: NormWeights::bind(&b, &format!("dec.{l}.norm2"))?,
                    ffn: FeedForwardWeights::bind(&b, &format!("dec.{l}.ffn"))?,
                    norm3: NormWeights::bind(&b, &format!("dec.{l}.norm3"))?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(BoundModel {
            enc_embed: EmbeddingWeights::bind(&b, "enc.embed")?,
            se: if cfg.use_se { Some(SeWeights::bind(&b, "se")?) } else { None },
            encoder,
            dec_embed: EmbeddingWeights::bind(&b, "dec.embed")?,
            dec_se: if cfg.use_se && cfg.se_on_decoder {
                Some(SeWeights::bind(&b, "dec_se")?)
            } else {
                None
            },
            decoder,
            out_w: b.get("out.w")?,
            out_b: b.get("out.b")?,
            bindings: b,
        })
    }

    fn check_agents(&self, scene: &Scene) -> Result<()> {
        if scene.agents() != self.config.agents {
            return Err(Error::Data(format!(
                "scene has {} agent channels, model expects {}",
                scene.agents(),
                self.config.agents
            )));
        }
        Ok(())
    }

    fn scaled_points(&self, g: &mut Graph<T>, points: &Tensor<T>) -> Result<Var> {
        let inv = T::one() / T::of(self.config.position_scale);
        let scaled = Tensor::new(
            points.shape().to_vec(),
            points.data().iter().map(|&v| v * inv).collect(),
        )?;
        Ok(g.constant(scaled))
    }

    /// Latent `N x T_obs x D` for the observed frames of `scene`.
    pub fn encode(&self, g: &mut Graph<T>, bm: &BoundModel, scene: &Scene, pass: &mut Pass) -> Result<Var> {
        self.check_agents(scene)?;
        let cfg = &self.config;
        if scene.frames() != cfg.obs_len {
            return Err(Error::Data(format!(
                "encoder expects {} observed frames, scene has {}",
                cfg.obs_len,
                scene.frames()
            )));
        }
        let pts = self.scaled_points(g, &scene.positions_tensor()?)?;
        let mask = g.constant(scene.mask_tensor()?);
        let e = compose_input(g, pts, &bm.enc_embed, &self.table, 0)?;
        let mut x = g.mul_prefix(e, mask)?;
        if let Some(se) = &bm.se {
            x = se_forward(g, x, se)?;
        }
        let att = cfg.attention();
        for layer in &bm.encoder {
            let a = multi_head_attention(g, x, x, &layer.attn, &att, None)?;
            x = residual_sublayer(g, x, a, &layer.norm1, cfg.dropout, pass.training, &mut pass.rng)?;
            let f = feed_forward(g, x, &layer.ffn)?;
            x = residual_sublayer(g, x, f, &layer.norm2, cfg.dropout, pass.training, &mut pass.rng)?;
        }
        Ok(x)
    }

    /// Runs the decoder over `inputs` (`N x L x 2`, meters) with a causal mask
    /// and returns one predicted point per input position (`N x L x 2`).
    /// Input `j` sits at positional index `T_obs + j`.
    pub fn decode(
        &self,
        g: &mut Graph<T>,
        bm: &BoundModel,
        latent: Var,
        inputs: &Tensor<T>,
        channel_mask: &Tensor<T>,
        pass: &mut Pass,
    ) -> Result<Var> {
        let cfg = &self.config;
        let shape = inputs.shape();
        if shape.len() != 3 || shape[0] != cfg.agents || shape[2] != 2 {
            return Err(Error::shape("decode", shape, &[cfg.agents, 0, 2]));
        }
        let len = shape[1];
        let pts = self.scaled_points(g, inputs)?;
        let mask = g.constant(channel_mask.clone());
        let e = compose_input(g, pts, &bm.dec_embed, &self.table, cfg.obs_len)?;
        let mut x = g.mul_prefix(e, mask)?;
        if let Some(se) = &bm.dec_se {
            x = se_forward_causal(g, x, se)?;
        }
        let att = cfg.attention();
        let causal = AttentionMask::causal(len);
        for layer in &bm.decoder {
            let a = multi_head_attention(g, x, x, &layer.self_attn, &att, Some(&causal))?;
            x = residual_sublayer(g, x, a, &layer.norm1, cfg.dropout, pass.training, &mut pass.rng)?;
            let c = multi_head_attention(g, x, latent, &layer.cross_attn, &att, None)?;
            x = residual_sublayer(g, x, c, &layer.norm2, cfg.dropout, pass.training, &mut pass.rng)?;
            let f = feed_forward(g, x, &layer.ffn)?;
            x = residual_sublayer(g, x, f, &layer.norm3, cfg.dropout, pass.training, &mut pass.rng)?;
        }
        let y = g.matmul(x, bm.out_w)?;
        let y = g.add_broadcast(y, bm.out_b)?;
        let y = g.scale(y, T::of(cfg.position_scale))?;
        match cfg.output_mode {
            OutputMode::Absolute => Ok(y),
            OutputMode::Offset => {
                let base = g.constant(inputs.clone());
                g.add(y, base)
            }
        }
    }

    /// Next point for every channel given the decoder buffer `partial`
    /// (`N x t x 2`, starting with the seed token).
    pub fn decode_step(
        &self,
        g: &mut Graph<T>,
        bm: &BoundModel,
        latent: Var,
        partial: &Tensor<T>,
        channel_mask: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let t = partial.shape().get(1).copied().unwrap_or(0);
        if t == 0 || t > self.config.pred_len {
            return Err(Error::Usage(format!(
                "decode step {t} outside 1..={}",
                self.config.pred_len
            )));
        }
        let out = self.decode(g, bm, latent, partial, channel_mask, &mut Pass::inference())?;
        let last = g.slice(out, 1, t - 1, 1)?;
        Ok(g.value(last).clone())
    }

    /// The seed token of every channel: its position at the last observed frame.
    fn seed_tokens(&self, scene: &Scene) -> Result<Tensor<T>> {
        let last = self.config.obs_len - 1;
        let data: Vec<f64> = (0..scene.agents())
            .flat_map(|a| scene.point(a, last))
            .collect();
        Tensor::from_f64(&[scene.agents(), 1, 2], &data)
    }

    /// Autoregressive prediction (`N x T_pred x 2`) from the first `T_obs`
    /// frames of `scene`, with dropout disabled.
    pub fn predict(&self, scene: &Scene) -> Result<Tensor<T>> {
        self.check_agents(scene)?;
        let cfg = &self.config;
        let obs = scene.window(0, cfg.obs_len)?;
        let mut g = Graph::new();
        let bm = self.bind(&mut g, false)?;
        let latent = self.encode(&mut g, &bm, &obs, &mut Pass::inference())?;
        let mask = scene.mask_tensor()?;
        let n = cfg.agents;
        let mut buffer = self.seed_tokens(scene)?.into_data();
        let mut preds: Vec<Vec<T>> = vec![Vec::with_capacity(cfg.pred_len * 2); n];
        for t in 1..=cfg.pred_len {
            let partial = Tensor::new(vec![n, t, 2], buffer.clone())?;
            let next = self.decode_step(&mut g, &bm, latent, &partial, &mask)?;
            let mut grown = Vec::with_capacity(n * (t + 1) * 2);
            for a in 0..n {
                let p = &next.data()[a * 2..a * 2 + 2];
                grown.extend_from_slice(&buffer[a * t * 2..(a + 1) * t * 2]);
                grown.extend_from_slice(p);
                preds[a].extend_from_slice(p);
            }
            buffer = grown;
        }
        Tensor::new(vec![n, cfg.pred_len, 2], preds.concat())
    }

    /// Decoder inputs for teacher forcing: the seed token followed by the
    /// first `T_pred - 1` future frames of `future` (`N x T_pred x 2`).
    pub fn shifted_inputs(&self, scene: &Scene, future: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, p) = (self.config.agents, self.config.pred_len);
        if future.shape() != [n, p, 2] {
            return Err(Error::shape("shifted_inputs", future.shape(), &[n, p, 2]));
        }
        let seed = self.seed_tokens(scene)?;
        let mut data = Vec::with_capacity(n * p * 2);
        for a in 0..n {
            data.extend_from_slice(&seed.data()[a * 2..a * 2 + 2]);
            data.extend_from_slice(&future.data()[a * p * 2..(a * p + p - 1) * 2]);
        }
        Tensor::new(vec![n, p, 2], data)
    }

    /// Future frames `T_obs .. T_obs + T_pred` of `scene` as `N x T_pred x 2`.
    pub fn ground_truth(&self, scene: &Scene) -> Result<Tensor<T>> {
        let cfg = &self.config;
        if scene.frames() < cfg.obs_len + cfg.pred_len {
            return Err(Error::Data(format!(
                "scene has {} frames, {} observed + {} future required",
                scene.frames(),
                cfg.obs_len,
                cfg.pred_len
            )));
        }
        scene.window(cfg.obs_len, cfg.pred_len)?.positions_tensor()
    }

    /// Single parallel decoder pass fed with the ground-truth future shifted
    /// right by one. Returns `N x T_pred x 2`.
    pub fn teacher_forced_forward(
        &self,
        g: &mut Graph<T>,
        bm: &BoundModel,
        scene: &Scene,
        pass: &mut Pass,
    ) -> Result<Var> {
        self.check_agents(scene)?;
        let future = self.ground_truth(scene)?;
        self.forward_with_future(g, bm, scene, &future, pass)
    }

    /// Teacher-forced pass with an explicit future sequence in place of the
    /// scene's own ground truth.
    pub fn forward_with_future(
        &self,
        g: &mut Graph<T>,
        bm: &BoundModel,
        scene: &Scene,
        future: &Tensor<T>,
        pass: &mut Pass,
    ) -> Result<Var> {
        self.check_agents(scene)?;
        let obs = scene.window(0, self.config.obs_len)?;
        let latent = self.encode(g, bm, &obs, pass)?;
        let inputs = self.shifted_inputs(scene, future)?;
        let mask = scene.mask_tensor()?;
        self.decode(g, bm, latent, &inputs, &mask, pass)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scene(agents: usize, frames: usize) -> Scene {
        let pos = (0..agents * frames * 2)
            .map(|i| ((i * 37 % 11) as f64 - 5.0) * 0.3 + (i % 2) as f64 * (i / 2 % frames) as f64)
            .collect();
        Scene::new(agents, frames, pos, vec![true; agents], 0).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::desk(5).validate().is_ok());
        let bad = ModelConfig {
            heads: 5,
            ..ModelConfig::desk(5)
        };
        assert!(bad.validate().is_err());
        let bad = ModelConfig {
            pred_len: 0,
            ..ModelConfig::desk(5)
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn encode_shape_contract() {
        let cfg = ModelConfig {
            agents: 4,
            ..ModelConfig::toy()
        };
        let model = Model::<f64>::new(cfg).unwrap();
        let mut g = Graph::new();
        let bm = model.bind(&mut g, false).unwrap();
        let s = scene(4, 4);
        let z = model.encode(&mut g, &bm, &s, &mut Pass::inference()).unwrap();
        assert_eq!(g.shape(z), &[4, 4, 16]);
        let wrong = scene(4, 5);
        assert!(model.encode(&mut g, &bm, &wrong, &mut Pass::inference()).is_err());
    }

    #[test]
    fn predict_shape_and_determinism() {
        let model = Model::<f32>::new(ModelConfig::toy()).unwrap();
        let s = scene(3, 7);
        let a = model.predict(&s).unwrap();
        let b = model.predict(&s).unwrap();
        assert_eq!(a.shape(), &[3, 3, 2]);
        assert_eq!(a, b);
    }

    #[test]
    fn decode_step_bounds() {
        let model = Model::<f64>::new(ModelConfig::toy()).unwrap();
        let s = scene(3, 7);
        let mut g = Graph::new();
        let bm = model.bind(&mut g, false).unwrap();
        let z = model
            .encode(&mut g, &bm, &s.window(0, 4).unwrap(), &mut Pass::inference())
            .unwrap();
        let mask = s.mask_tensor().unwrap();
        let too_long = Tensor::zeros(&[3, 4, 2]).unwrap();
        assert!(matches!(
            model.decode_step(&mut g, &bm, z, &too_long, &mask),
            Err(Error::Usage(_))
        ));
        let seed = model.seed_tokens(&s).unwrap();
        let out = model.decode_step(&mut g, &bm, z, &seed, &mask).unwrap();
        assert_eq!(out.shape(), &[3, 1, 2]);
    }

    #[test]
    fn missing_future_is_a_data_error() {
        let model = Model::<f64>::new(ModelConfig::toy()).unwrap();
        let mut g = Graph::new();
        let bm = model.bind(&mut g, true).unwrap();
        let r = model.teacher_forced_forward(&mut g, &bm, &scene(3, 6), &mut Pass::inference());
        assert!(matches!(r, Err(Error::Data(_))));
    }

    #[test]
    fn weight_registry_layout() {
        let model = Model::<f32>::new(ModelConfig::toy()).unwrap();
        let names: Vec<&str> = model.weights().iter().map(|(n, _)| n).collect();
        assert_eq!(names[0], "enc.embed.w");
        assert!(names.contains(&"se.w1") && names.contains(&"out.b"));
        assert!(!names.iter().any(|n| n.starts_with("dec_se")));
        let no_se = Model::<f32>::new(ModelConfig {
            use_se: false,
            ..ModelConfig::toy()
        })
        .unwrap();
        assert!(no_se.weights().get("se.w1").is_none());
        assert!(Model::from_weights(ModelConfig::toy(), no_se.into_weights()).is_err());
    }
}
