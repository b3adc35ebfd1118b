//! L1 loss, per-tensor gradient clipping, Adam and the step-halving
//! learning-rate schedule.

use crate::data::PatchPair;
use crate::error::{BsrnError, Result};
use crate::model::{backward, forward_with_trace, on_scale_path, ModelParams};
use crate::tensor::FeatureMap;

/// Pixel-wise L1 loss normalized by the spatial resolution only; the colour
/// channels are summed. Returns the loss and `∂loss/∂ŷ`.
pub fn l1_loss(yhat: &FeatureMap, y: &FeatureMap) -> Result<(f32, FeatureMap)> {
    if !yhat.same_shape(y) {
        return Err(BsrnError::shape(format!(
            "l1_loss: {:?} vs {:?}",
            yhat.shape(),
            y.shape()
        )));
    }
    let norm = 1.0 / yhat.plane_len() as f64;
    let g = norm as f32;
    let mut total = 0.0f64;
    let grad = yhat
        .data()
        .iter()
        .zip(y.data())
        .map(|(&a, &b)| {
            let d = a - b;
            total += f64::from(d.abs());
            if d > 0.0 {
                g
            } else if d < 0.0 {
                -g
            } else {
                0.0
            }
        })
        .collect();
    let (c, h, w) = yhat.shape();
    Ok(((total * norm) as f32, FeatureMap::from_vec(c, h, w, grad)?))
}

pub fn l2_norm(values: &[f32]) -> f64 {
    values.iter().map(|&v| f64::from(v).powi(2)).sum::<f64>().sqrt()
}

/// Rescales `grad` onto the L2 ball of radius `theta` when it lies outside.
/// Returns the norm before clipping.
pub fn clip_gradient(grad: &mut [f32], theta: f32) -> f32 {
    let norm = l2_norm(grad);
    if norm > f64::from(theta) {
        let factor = f64::from(theta) / norm;
        for g in grad.iter_mut() {
            *g = (f64::from(*g) * factor) as f32;
        }
    }
    norm as f32
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f32,
    pub beta2: f32,
    /// ε̂, added to `√v` after the bias correction has been folded into the step size.
    pub epsilon: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First/second moment accumulators shaped like the model, plus the update count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: ModelParams,
    pub v: ModelParams,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }
}

/// Bias-corrected step size `lr·√(1−β₂ᵗ)/(1−β₁ᵗ)` for update number `t ≥ 1`.
pub fn adam_step_size(lr: f32, t: u64, hp: &AdamConfig) -> f32 {
    let t = t as i32;
    let c2 = 1.0 - f64::from(hp.beta2).powi(t);
    let c1 = 1.0 - f64::from(hp.beta1).powi(t);
    (f64::from(lr) * c2.sqrt() / c1) as f32
}

/// One Adam update of a single tensor with precomputed step size.
pub fn adam_update(
    param: &mut [f32],
    grad: &[f32],
    m: &mut [f32],
    v: &mut [f32],
    step_size: f32,
    hp: &AdamConfig,
) {
    let (b1, b2) = (hp.beta1, hp.beta2);
    for (((p, &g), m), v) in param.iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        *p -= step_size * *m / (v.sqrt() + hp.epsilon);
    }
}

/// Adam update of every tensor.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &ModelParams,
    state: &mut AdamState,
    lr: f32,
    hp: &AdamConfig,
) -> Result<()> {
    adam_step_filtered(params, grads, state, lr, hp, |_| true)
}

/// Adam update restricted to the tensors `active` accepts. The others receive
/// no gradient this step and keep both their values and moments.
pub fn adam_step_filtered(
    params: &mut ModelParams,
    grads: &ModelParams,
    state: &mut AdamState,
    lr: f32,
    hp: &AdamConfig,
    active: impl Fn(&str) -> bool,
) -> Result<()> {
    if params.config() != grads.config()
        || params.config() != state.m.config()
        || params.config() != state.v.config()
    {
        return Err(BsrnError::shape("parameter, gradient and moment layouts differ"));
    }
    state.step += 1;
    let step_size = adam_step_size(lr, state.step, hp);
    let grads = grads.tensors();
    let mut m = state.m.tensors_mut();
    let mut v = state.v.tensors_mut();
    for (i, (name, p)) in params.tensors_mut().into_iter().enumerate() {
        if active(&name) {
            adam_update(p, grads[i].data, m[i].1, v[i].1, step_size, hp);
        }
    }
    Ok(())
}

/// Training hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch: usize,
    pub base_lr: f32,
    pub halve_every: u64,
    pub clip_theta: f32,
    pub total_steps: u64,
    pub seed: u64,
    /// Low-resolution patch side; the high-resolution patch is `scale` times larger.
    pub patch: usize,
    pub adam: AdamConfig,
}

impl TrainConfig {
    /// Batch 8, lr 1e-4 halved every 2·10⁵ steps, θ = 5, patch 32
    /// (single-scale) or 48 (multi-scale).
    pub fn recipe(multi_scale: bool) -> Self {
        Self {
            batch: 8,
            base_lr: 1e-4,
            halve_every: 200_000,
            clip_theta: 5.0,
            total_steps: 1_000_000,
            seed: 0,
            patch: if multi_scale { 48 } else { 32 },
            adam: AdamConfig::default(),
        }
    }

    pub fn validate(&self, scales: &[usize]) -> Result<()> {
        if self.batch == 0 || self.patch == 0 || self.halve_every == 0 {
            return Err(BsrnError::config("batch, patch and halve_every must be positive"));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(BsrnError::config("learning rate must be positive"));
        }
        if !(self.clip_theta > 0.0 && self.clip_theta.is_finite()) {
            return Err(BsrnError::config("clipping threshold must be positive"));
        }
        if let Some(f) = scales.iter().find(|&&f| !self.patch.is_multiple_of(f)) {
            return Err(BsrnError::config(format!(
                "patch size {} is not divisible by scale {f}",
                self.patch
            )));
        }
        Ok(())
    }
}

/// `base_lr · 0.5^⌊step / halve_every⌋`.
pub fn lr_schedule(step: u64, cfg: &TrainConfig) -> f32 {
    let halvings = (step / cfg.halve_every).min(i32::MAX as u64) as i32;
    (f64::from(cfg.base_lr) * 0.5f64.powi(halvings)) as f32
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    /// Update index this step ran at (before incrementing).
    pub step: u64,
    pub scale: usize,
    pub lr: f32,
    /// Mean L1 loss over the batch, before the update.
    pub loss: f32,
    /// Pre-clipping L2 norm of every tensor's gradient, in canonical tensor
    /// order. Tensors off the sampled path report zero.
    pub grad_norms: Vec<(String, f32)>,
}

fn batch_scale(batch: &[PatchPair]) -> Result<usize> {
    let first = batch
        .first()
        .ok_or_else(|| BsrnError::config("empty training batch"))?;
    if batch.iter().any(|p| p.scale != first.scale) {
        return Err(BsrnError::config("all batch items must share one upscaling path"));
    }
    Ok(first.scale)
}

/// Mean batch loss and its gradient, accumulated in item order.
pub fn batch_loss_and_grad(params: &ModelParams, batch: &[PatchPair]) -> Result<(f32, ModelParams)> {
    let scale = batch_scale(batch)?;
    let inv = 1.0 / batch.len() as f32;
    let mut grads = params.zeros_like();
    let mut total = 0.0f64;
    for item in batch {
        let trace = forward_with_trace(&item.lr, params, scale)?;
        let (loss, grad) = l1_loss(trace.output(), &item.hr)?;
        total += f64::from(loss);
        backward(&trace, params, &grad.scale(inv), &mut grads)?;
    }
    Ok(((total / batch.len() as f64) as f32, grads))
}

/// Mean batch loss without gradients.
pub fn batch_loss(params: &ModelParams, batch: &[PatchPair]) -> Result<f32> {
    let scale = batch_scale(batch)?;
    let mut total = 0.0f64;
    for item in batch {
        let trace = forward_with_trace(&item.lr, params, scale)?;
        total += f64::from(l1_loss(trace.output(), &item.hr)?.0);
    }
    Ok((total / batch.len() as f64) as f32)
}

/// Forward, backward, per-tensor clipping and one Adam update.
pub fn train_step(
    params: &mut ModelParams,
    state: &mut AdamState,
    batch: &[PatchPair],
    cfg: &TrainConfig,
) -> Result<StepReport> {
    let scale = batch_scale(batch)?;
    let (loss, mut grads) = batch_loss_and_grad(params, batch)?;
    let grad_norms = grads
        .tensors_mut()
        .into_iter()
        .map(|(name, g)| {
            let norm = if on_scale_path(&name, scale) {
                clip_gradient(g, cfg.clip_theta)
            } else {
                0.0
            };
            (name, norm)
        })
        .collect();
    let step = state.step;
    let lr = lr_schedule(step, cfg);
    adam_step_filtered(params, &grads, state, lr, &cfg.adam, |name| {
        on_scale_path(name, scale)
    })?;
    Ok(StepReport {
        step,
        scale,
        lr,
        loss,
        grad_norms,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, ModelConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn l1_examples() {
        let y = FeatureMap::from_fn(3, 2, 2, |c, y, x| (c + y + x) as f32 * 0.1);
        let (loss, grad) = l1_loss(&y, &y).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.data().iter().all(|&g| g == 0.0));

        let a = FeatureMap::filled(1, 1, 1, 0.7);
        let b = FeatureMap::filled(1, 1, 1, 0.2);
        let (loss, grad) = l1_loss(&a, &b).unwrap();
        assert!((loss - 0.5).abs() < 1e-7);
        assert_eq!(grad.data(), &[1.0]);

        // Three channels each off by 0.5 on a single pixel: the channels sum.
        let a = FeatureMap::filled(3, 1, 1, 0.7);
        let b = FeatureMap::filled(3, 1, 1, 0.2);
        assert!((l1_loss(&a, &b).unwrap().0 - 1.5).abs() < 1e-6);

        assert!(l1_loss(&a, &FeatureMap::zeros(3, 1, 2)).is_err());
    }

    #[test]
    fn l1_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = FeatureMap::from_fn(3, 4, 5, |_, _, _| rng.random_range(0.0..1.0));
        let b = FeatureMap::from_fn(3, 4, 5, |_, _, _| rng.random_range(0.0..1.0));
        let (loss, grad) = l1_loss(&a, &b).unwrap();
        let mut want = 0.0f64;
        for c in 0..3 {
            for y in 0..4 {
                for x in 0..5 {
                    let d = f64::from(a.get(c, y, x)) - f64::from(b.get(c, y, x));
                    want += d.abs();
                    let g = f64::from(grad.get(c, y, x));
                    assert!((g - d.signum() / 20.0).abs() < 1e-8);
                }
            }
        }
        assert!((f64::from(loss) - want / 20.0).abs() < 1e-6);
    }

    #[test]
    fn clip_examples() {
        let mut g = vec![2.0f32, 0.0];
        assert_eq!(clip_gradient(&mut g, 5.0), 2.0);
        assert_eq!(g, vec![2.0, 0.0]);

        let mut g = vec![6.0f32, 8.0];
        assert_eq!(clip_gradient(&mut g, 5.0), 10.0);
        assert_eq!(g, vec![3.0, 4.0]);
    }

    #[test]
    fn clip_norm_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for n in [1, 7, 100, 5000] {
            let scale = rng.random_range(0.01..20.0f32);
            let mut g: Vec<f32> = (0..n).map(|_| rng.random_range(-1.0..1.0) * scale).collect();
            let before = l2_norm(&g);
            clip_gradient(&mut g, 5.0);
            let after = l2_norm(&g);
            assert!((after - before.min(5.0)).abs() < 1e-5);
            assert!(after <= 5.0 + 1e-6);
        }
    }

    #[test]
    fn schedule_examples() {
        let cfg = TrainConfig::recipe(false);
        assert_eq!(lr_schedule(0, &cfg), 1e-4);
        assert_eq!(lr_schedule(199_999, &cfg), 1e-4);
        assert_eq!(lr_schedule(200_000, &cfg), 5e-5);
        assert_eq!(lr_schedule(999_999, &cfg), (1e-4f64 * 0.0625) as f32);
        let mut prev = f32::INFINITY;
        for step in (0..2_000_000).step_by(10_007) {
            let lr = lr_schedule(step, &cfg);
            assert!(lr <= prev);
            assert_eq!(lr, lr_schedule(step - step % cfg.halve_every, &cfg));
            prev = lr;
        }
    }

    #[test]
    fn train_config_validation() {
        assert!(TrainConfig::recipe(true).validate(&[2, 3, 4]).is_ok());
        assert!(TrainConfig::recipe(false).validate(&[4]).is_ok());
        assert!(TrainConfig::recipe(false).validate(&[3]).is_err());
        let mut cfg = TrainConfig::recipe(false);
        cfg.batch = 0;
        assert!(cfg.validate(&[2]).is_err());
    }

    /// Scalar Adam in f64, written out term by term.
    fn adam_scalar_oracle(p0: f64, grads: &[f64], lr: f64) -> f64 {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8f64);
        let (mut p, mut m, mut v) = (p0, 0.0, 0.0);
        for (i, &g) in grads.iter().enumerate() {
            let t = (i + 1) as i32;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let lr_t = lr * (1.0 - b2.powi(t)).sqrt() / (1.0 - b1.powi(t));
            p -= lr_t * m / (v.sqrt() + eps);
        }
        p
    }

    #[test]
    fn adam_scalar_trajectory() {
        let hp = AdamConfig::default();
        let grads = [0.3f32, -0.2, 0.05];
        let (mut p, mut m, mut v) = ([1.0f32], [0.0f32], [0.0f32]);
        for (i, g) in grads.iter().enumerate() {
            let step = adam_step_size(1e-3, i as u64 + 1, &hp);
            adam_update(&mut p, &[*g], &mut m, &mut v, step, &hp);
        }
        let want = adam_scalar_oracle(1.0, &[0.3, -0.2, 0.05], 1e-3);
        assert!((f64::from(p[0]) - want).abs() < 1e-6);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let hp = AdamConfig::default();
        for g in [1e-3f32, 0.5, -4.0] {
            let (mut p, mut m, mut v) = ([0.0f32], [0.0f32], [0.0f32]);
            adam_update(&mut p, &[g], &mut m, &mut v, adam_step_size(1e-4, 1, &hp), &hp);
            assert!((p[0].abs() - 1e-4).abs() < 1e-7, "{}", p[0]);
            assert_eq!(p[0].signum(), -g.signum());
        }
    }

    #[test]
    fn adam_zero_gradient_is_identity_with_empty_momentum() {
        let config = ModelConfig::new(2, 1, 1, 1, &[2]).unwrap();
        let mut params = init_params(&config, 1).unwrap();
        let before = params.clone();
        let mut state = AdamState::new(&params);
        // Arbitrary second moments and step count; first moments empty.
        for (_, v) in state.v.tensors_mut() {
            v.iter_mut().enumerate().for_each(|(i, x)| *x = i as f32 * 0.01);
        }
        state.step = 17;
        let zeros = params.zeros_like();
        adam_step(&mut params, &zeros, &mut state, 1e-3, &AdamConfig::default()).unwrap();
        assert_eq!(params, before);
        assert_eq!(state.step, 18);
    }

    #[test]
    fn filtered_adam_leaves_inactive_tensors_alone() {
        let config = ModelConfig::new(2, 1, 1, 1, &[2, 3]).unwrap();
        let mut params = init_params(&config, 1).unwrap();
        let before = params.clone();
        let mut grads = params.zeros_like();
        for (_, g) in grads.tensors_mut() {
            g.fill(0.1);
        }
        let mut state = AdamState::new(&params);
        adam_step_filtered(&mut params, &grads, &mut state, 1e-3, &AdamConfig::default(), |n| {
            on_scale_path(n, 2)
        })
        .unwrap();
        assert_eq!(params.head(3).unwrap(), before.head(3).unwrap());
        assert_ne!(params.head(2).unwrap(), before.head(2).unwrap());
        assert_ne!(params.rrb, before.rrb);
        assert!(state.m.head(3).unwrap().output.weights().iter().all(|&v| v == 0.0));
    }
}
