//! Masked L2 loss, Adam, and the teacher-forced training loop.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::SegmentSample;
use crate::error::{Error, Result};
use crate::model::{Model, Pass};
use crate::numcore::{check_gradients, GradCheckOptions, GradCheckReport, Graph, Scalar, Tensor, Var};
use crate::weights::ModelWeights;

/// Mean squared error over real channels, timesteps and both coordinates.
/// `mask` has one entry per channel (1 = real, 0 = padding).
pub fn l2_loss<T: Scalar>(g: &mut Graph<T>, pred: Var, target: Var, mask: &Tensor<T>) -> Result<Var> {
    let shape = g.shape(pred).to_vec();
    if shape != g.shape(target) {
        return Err(Error::shape("l2_loss", &shape, g.shape(target)));
    }
    if shape.len() != 3 || mask.shape() != [shape[0]] {
        return Err(Error::shape("l2_loss mask", mask.shape(), &shape));
    }
    let real = mask.data().iter().filter(|&&m| m != T::zero()).count();
    if real == 0 {
        return Err(Error::Data("loss over a scene with no real agent channel".into()));
    }
    let m = g.constant(mask.clone());
    let diff = g.sub(pred, target)?;
    let sq = g.mul(diff, diff)?;
    let sq = g.mul_prefix(sq, m)?;
    let total = g.sum_all(sq)?;
    g.scale(total, T::one() / T::of((real * shape[1] * shape[2]) as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments for every registered tensor, in registry order.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(weights: &ModelWeights<T>, config: AdamConfig) -> Self {
        let zeros: Vec<Vec<T>> = weights.iter().map(|(_, t)| vec![T::zero(); t.numel()]).collect();
        OptimizerState {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn first_moment(&self) -> &[Vec<T>] {
        &self.m
    }

    pub fn second_moment(&self) -> &[Vec<T>] {
        &self.v
    }

    /// One bias-corrected Adam update. `grads` are zeroed afterwards.
    pub fn adam_step(&mut self, weights: &mut ModelWeights<T>, grads: &mut [Vec<T>]) -> Result<()> {
        if grads.len() != self.m.len() || weights.len() != self.m.len() {
            return Err(Error::shape("adam_step", &[grads.len()], &[self.m.len()]));
        }
        for (i, (g, m)) in grads.iter().zip(&self.m).enumerate() {
            if g.len() != m.len() {
                return Err(Error::shape("adam_step", &[i, g.len()], &[i, m.len()]));
            }
        }
        self.step += 1;
        let c = self.config;
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let corr1 = T::of(1.0 - c.beta1.powi(self.step as i32));
        let corr2 = T::of(1.0 - c.beta2.powi(self.step as i32));
        let (lr, eps) = (T::of(c.lr), T::of(c.eps));
        let one = T::one();
        for (((param, grad), m), v) in weights.values_mut().zip(grads.iter_mut()).zip(&mut self.m).zip(&mut self.v) {
            let data = param.data_mut();
            for k in 0..data.len() {
                let gk = grad[k];
                m[k] = b1 * m[k] + (one - b1) * gk;
                v[k] = b2 * v[k] + (one - b2) * gk * gk;
                let m_hat = m[k] / corr1;
                let v_hat = v[k] / corr2;
                data[k] = data[k] - lr * m_hat / (v_hat.sqrt() + eps);
            }
            if data.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite("adam update".into()));
            }
            grad.iter_mut().for_each(|x| *x = T::zero());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    /// Reshuffle the training set every epoch.
    pub shuffle: bool,
    /// Stop after the first epoch whose training loss falls below this value.
    pub target_loss: Option<f64>,
    /// Rescale each averaged batch gradient so its global L2 norm is at most this.
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 16,
            seed: 0,
            adam: AdamConfig::default(),
            shuffle: true,
            target_loss: None,
            clip_norm: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub wall_ms: u64,
}

/// One JSON object per epoch, newline-terminated.
pub fn run_log_jsonl(records: &[EpochRecord]) -> String {
    records
        .iter()
        .map(|r| serde_json::to_string(r).expect("epoch record serializes") + "\n")
        .collect()
}

/// `step,loss` table of per-step mean batch losses.
pub fn loss_trace_csv(step_losses: &[f64]) -> String {
    let mut out = String::from("step,loss\n");
    for (i, l) in step_losses.iter().enumerate() {
        out += &format!("{i},{l}\n");
    }
    out
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    /// Weights after the epoch with the lowest validation loss (training
    /// loss when there is no validation split).
    pub best: Model<T>,
    pub last: Model<T>,
    pub best_epoch: Option<usize>,
    pub epochs: Vec<EpochRecord>,
    /// Mean batch loss of every optimizer step, in order.
    pub step_losses: Vec<f64>,
}

/// Scales `grads` down so their joint L2 norm does not exceed `limit`.
/// Returns the norm before scaling.
pub fn clip_global_norm<T: Scalar>(grads: &mut [Vec<T>], limit: f64) -> f64 {
    let norm = grads.iter().flatten().map(|x| x.widen() * x.widen()).sum::<f64>().sqrt();
    if norm > limit && norm > 0.0 {
        let f = T::of(limit / norm);
        grads.iter_mut().flatten().for_each(|x| *x = *x * f);
    }
    norm
}

/// Running minimum of a loss trace.
pub fn running_min(trace: &[f64]) -> Vec<f64> {
    trace
        .iter()
        .scan(f64::INFINITY, |best, &x| {
            *best = best.min(x);
            Some(*best)
        })
        .collect()
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    // splitmix64 finalizer over a simple combination
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Loss and parameter gradients of one teacher-forced sample.
pub fn sample_gradients<T: Scalar>(model: &Model<T>, sample: &SegmentSample, pass: &mut Pass) -> Result<(f64, Vec<Vec<T>>)> {
    let mut g = Graph::new();
    let bm = model.bind(&mut g, true)?;
    let pred = model.teacher_forced_forward(&mut g, &bm, &sample.scene, pass)?;
    let target = g.constant(model.ground_truth(&sample.scene)?);
    let loss = l2_loss(&mut g, pred, target, &sample.scene.mask_tensor()?)?;
    g.backward(loss)?;
    let value = g.value(loss).item()?.widen();
    Ok((value, model.weights().collect_grads(&g, &bm.bindings)))
}

/// Teacher-forced loss with dropout off.
pub fn sample_loss<T: Scalar>(model: &Model<T>, sample: &SegmentSample) -> Result<f64> {
    let mut g = Graph::new();
    let bm = model.bind(&mut g, false)?;
    let pred = model.teacher_forced_forward(&mut g, &bm, &sample.scene, &mut Pass::inference())?;
    let target = g.constant(model.ground_truth(&sample.scene)?);
    let loss = l2_loss(&mut g, pred, target, &sample.scene.mask_tensor()?)?;
    Ok(g.value(loss).item()?.widen())
}

/// Central-difference check of the teacher-forced loss gradient with
/// respect to every model weight (dropout off, double precision).
pub fn loss_gradient_check(model: &Model<f64>, sample: &SegmentSample, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let inputs: Vec<Tensor<f64>> = model.weights().iter().map(|(_, t)| t.clone()).collect();
    let target = model.ground_truth(&sample.scene)?;
    let mask = sample.scene.mask_tensor()?;
    check_gradients(
        |g, vars| {
            let bm = Model::<f64>::bind_with(model.config(), model.weights().bindings_for(vars)?)?;
            let pred = model.teacher_forced_forward(g, &bm, &sample.scene, &mut Pass::inference())?;
            let y = g.constant(target.clone());
            l2_loss(g, pred, y, &mask)
        },
        &inputs,
        opts,
    )
}

/// Mean teacher-forced loss over `samples`, `None` when empty.
pub fn mean_loss<T: Scalar>(model: &Model<T>, samples: &[SegmentSample]) -> Result<Option<f64>> {
    if samples.is_empty() {
        return Ok(None);
    }
    let losses: Vec<f64> = samples.par_iter().map(|s| sample_loss(model, s)).collect::<Result<_>>()?;
    Ok(Some(losses.iter().sum::<f64>() / losses.len() as f64))
}

/// Mini-batch Adam over teacher-forced L2 loss.
///
/// Per-sample graphs of a batch run in parallel; gradients are summed in
/// sample order so results do not depend on thread scheduling.
pub fn train<T: Scalar>(
    model: Model<T>,
    train_set: &[SegmentSample],
    val_set: &[SegmentSample],
    cfg: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    if train_set.is_empty() {
        return Err(Error::Usage("training split is empty".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be >= 1".into()));
    }
    let mut model = model;
    let mut opt = OptimizerState::new(model.weights(), cfg.adam);
    let mut best = model.clone();
    let mut best_score = f64::INFINITY;
    let mut best_epoch = None;
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut step_losses = Vec::new();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let dropout_on = model.config().dropout > 0.0;

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        if cfg.shuffle {
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(cfg.seed, epoch as u64, 0x5eed)));
        }
        let mut epoch_total = 0.0;
        for (batch, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let step = opt.step;
            let results: Vec<Result<(f64, Vec<Vec<T>>)>> = chunk
                .par_iter()
                .map(|&i| {
                    let mut pass = if dropout_on {
                        Pass::training(mix(cfg.seed, step, i as u64))
                    } else {
                        Pass::inference()
                    };
                    sample_gradients(&model, &train_set[i], &mut pass)
                })
                .collect();
            let diverged = || Error::Diverged {
                epoch,
                batch,
                segments: chunk.to_vec(),
            };
            let mut batch_loss = 0.0;
            let mut grads: Option<Vec<Vec<T>>> = None;
            for r in results {
                let (loss, g) = match r {
                    Ok(v) => v,
                    Err(Error::NonFinite(_)) => return Err(diverged()),
                    Err(e) => return Err(e),
                };
                if !loss.is_finite() {
                    return Err(diverged());
                }
                batch_loss += loss;
                match &mut grads {
                    None => grads = Some(g),
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(&g) {
                            for (x, y) in a.iter_mut().zip(b) {
                                *x = *x + *y;
                            }
                        }
                    }
                }
            }
            let mut grads = grads.expect("non-empty batch");
            let inv = T::one() / T::of(chunk.len() as f64);
            grads.iter_mut().flatten().for_each(|x| *x = *x * inv);
            if let Some(limit) = cfg.clip_norm {
                clip_global_norm(&mut grads, limit);
            }
            opt.adam_step(model.weights_mut(), &mut grads).map_err(|e| match e {
                Error::NonFinite(_) => diverged(),
                other => other,
            })?;
            step_losses.push(batch_loss / chunk.len() as f64);
            epoch_total += batch_loss;
        }
        let train_loss = epoch_total / train_set.len() as f64;
        let val_loss = mean_loss(&model, val_set)?;
        let score = val_loss.unwrap_or(train_loss);
        if score < best_score {
            best_score = score;
            best = model.clone();
            best_epoch = Some(epoch);
        }
        epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            wall_ms: started.elapsed().as_millis() as u64,
        });
        if cfg.target_loss.is_some_and(|t| train_loss < t) {
            break;
        }
    }
    Ok(TrainOutcome {
        best,
        last: model,
        best_epoch,
        epochs,
        step_losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn loss_hand_cases() {
        let mut g = Graph::<f64>::new();
        let p = g.constant(Tensor::from_f64(&[1, 1, 2], &[3.0, 4.0]).unwrap());
        let y = g.constant(Tensor::zeros(&[1, 1, 2]).unwrap());
        let mask = Tensor::from_f64(&[1], &[1.0]).unwrap();
        let l = l2_loss(&mut g, p, y, &mask).unwrap();
        assert_eq!(g.value(l).item().unwrap(), 12.5);
        let l0 = l2_loss(&mut g, p, p, &mask).unwrap();
        assert_eq!(g.value(l0).item().unwrap(), 0.0);
        let p2 = g.constant(Tensor::from_f64(&[1, 1, 2], &[6.0, 8.0]).unwrap());
        let l2 = l2_loss(&mut g, p2, y, &mask).unwrap();
        assert_eq!(g.value(l2).item().unwrap(), 50.0);
    }

    #[test]
    fn loss_masks_padding() {
        let mut g = Graph::<f64>::new();
        let p = g.constant(Tensor::from_f64(&[2, 1, 2], &[3.0, 4.0, 50.0, 50.0]).unwrap());
        let y = g.constant(Tensor::zeros(&[2, 1, 2]).unwrap());
        let l = l2_loss(&mut g, p, y, &Tensor::from_f64(&[2], &[1.0, 0.0]).unwrap()).unwrap();
        assert_eq!(g.value(l).item().unwrap(), 12.5);
        let none = l2_loss(&mut g, p, y, &Tensor::zeros(&[2]).unwrap());
        assert!(matches!(none, Err(Error::Data(_))));
    }

    fn tiny_weights() -> ModelWeights<f64> {
        let mut w = ModelWeights::new();
        w.insert("a", Tensor::from_f64(&[2], &[1.0, -2.0]).unwrap()).unwrap();
        w.insert("b", Tensor::from_f64(&[1], &[0.5]).unwrap()).unwrap();
        w
    }

    #[test]
    fn adam_zero_gradient_is_fixed_point() {
        let mut w = tiny_weights();
        let before = w.clone();
        let mut opt = OptimizerState::new(&w, AdamConfig::default());
        let mut g = vec![vec![0.0; 2], vec![0.0]];
        opt.adam_step(&mut w, &mut g).unwrap();
        assert_eq!(w, before);
        assert!(opt.first_moment().iter().flatten().all(|&m| m == 0.0));
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut w = tiny_weights();
        let mut opt = OptimizerState::new(&w, AdamConfig::default());
        let mut g = vec![vec![0.3, -7.0], vec![1e-3]];
        opt.adam_step(&mut w, &mut g).unwrap();
        let a = w.get("a").unwrap().data();
        assert!((a[0] - (1.0 - 0.01)).abs() < 1e-6);
        assert!((a[1] - (-2.0 + 0.01)).abs() < 1e-6);
        assert!((w.get("b").unwrap().data()[0] - 0.49).abs() < 1e-5);
        assert!(g.iter().flatten().all(|&x| x == 0.0), "grads are cleared");
    }

    #[test]
    fn adam_zero_lr_is_identity() {
        let mut w = tiny_weights();
        let before = w.clone();
        let cfg = AdamConfig {
            lr: 0.0,
            ..AdamConfig::default()
        };
        let mut opt = OptimizerState::new(&w, cfg);
        for _ in 0..3 {
            let mut g = vec![vec![1.0, 2.0], vec![-3.0]];
            opt.adam_step(&mut w, &mut g).unwrap();
        }
        assert_eq!(w, before);
    }

    #[test]
    fn adam_rejects_misaligned_gradients() {
        let mut w = tiny_weights();
        let mut opt = OptimizerState::new(&w, AdamConfig::default());
        assert!(opt.adam_step(&mut w, &mut [vec![0.0; 3], vec![0.0]]).is_err());
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut g = vec![vec![3.0f64], vec![4.0]];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g[0][0] - 0.6).abs() < 1e-12 && (g[1][0] - 0.8).abs() < 1e-12);
        let mut small = vec![vec![0.1f64]];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small[0][0], 0.1);
    }

    #[test]
    fn running_minimum_never_increases() {
        let m = running_min(&[3.0, 1.0, 2.0, 0.5]);
        assert_eq!(m, [3.0, 1.0, 1.0, 0.5]);
    }

    #[test]
    fn zero_epochs_return_initial_weights() {
        let cfg = ModelConfig {
            agents: 3,
            ..ModelConfig::toy()
        };
        let model = Model::<f32>::new(cfg).unwrap();
        let opts = crate::data::SynthOptions {
            agents: 3,
            vehicles: 3,
            frames: 7,
            obs_len: 4,
            ..Default::default()
        };
        let samples = crate::data::synthesize_scenes(2, crate::data::SynthKind::Linear, 0, &opts).unwrap();
        let tc = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let out = train(model.clone(), &samples, &[], &tc).unwrap();
        assert_eq!(out.best.weights(), model.weights());
        assert!(out.epochs.is_empty());
        let empty = train(model, &[], &[], &tc);
        assert!(matches!(empty, Err(Error::Usage(_))));
    }
}
