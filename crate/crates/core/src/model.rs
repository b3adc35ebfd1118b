//! The block-state recursive network: initial feature extraction, the shared
//! recursive residual block (RRB), per-scale sub-pixel upscaling heads and the
//! progressive output combination.
//!
//! Inference runs through [`forward`]. Training runs through
//! [`forward_with_trace`] and [`backward`], which keep the activations each
//! convolution needs for its backward pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{BsrnError, Result};
use crate::tensor::{
    add, add_assign, concat_channels, conv2d_backward, conv2d_forward, depth_to_space,
    relu_backward, relu_forward, space_to_depth, split_channels, ConvKernel, FeatureMap,
};

pub const SUPPORTED_SCALES: [usize; 3] = [2, 3, 4];
pub const IMAGE_CHANNELS: usize = 3;

/// Architecture hyperparameters. Together they fix the parameter count.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    /// Convolutional channel count `c` of the feature path.
    pub channels: usize,
    /// Block-state channel count `s`; zero disables the block state.
    pub state_channels: usize,
    /// Recursion count `R`.
    pub recursions: usize,
    /// Frequency control `r`: every `r`-th recursion produces an output.
    pub freq_control: usize,
    /// Sorted, deduplicated subset of [`SUPPORTED_SCALES`].
    pub scales: Vec<usize>,
}

impl ModelConfig {
    pub fn new(
        channels: usize,
        state_channels: usize,
        recursions: usize,
        freq_control: usize,
        scales: &[usize],
    ) -> Result<Self> {
        let mut scales = scales.to_vec();
        scales.sort_unstable();
        scales.dedup();
        let config = Self {
            channels,
            state_channels,
            recursions,
            freq_control,
            scales,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(BsrnError::config("channel count c must be at least 1"));
        }
        validate_schedule(self.recursions, self.freq_control)?;
        if self.scales.is_empty() {
            return Err(BsrnError::config("at least one upscaling factor is required"));
        }
        if let Some(f) = self.scales.iter().find(|f| !SUPPORTED_SCALES.contains(f)) {
            return Err(BsrnError::config(format!("unsupported scale x{f}")));
        }
        if self.scales.windows(2).any(|w| w[0] >= w[1]) {
            return Err(BsrnError::config("scales must be sorted and unique"));
        }
        Ok(())
    }

    pub fn supports_scale(&self, scale: usize) -> bool {
        self.scales.contains(&scale)
    }

    fn require_scale(&self, scale: usize) -> Result<()> {
        if self.supports_scale(scale) {
            Ok(())
        } else {
            Err(BsrnError::config(format!(
                "model has no x{scale} upscaling path (available: {:?})",
                self.scales
            )))
        }
    }

    /// Channel count of the concatenated `[H, S]` map inside the RRB.
    pub fn joint_channels(&self) -> usize {
        self.channels + self.state_channels
    }
}

/// Checks `1 ≤ r ≤ R` and `r | R`.
pub fn validate_schedule(recursions: usize, freq_control: usize) -> Result<()> {
    if recursions == 0 {
        return Err(BsrnError::config("recursion count R must be at least 1"));
    }
    if freq_control == 0 || freq_control > recursions || !recursions.is_multiple_of(freq_control) {
        return Err(BsrnError::config(format!(
            "frequency control r={freq_control} must divide R={recursions}"
        )));
    }
    Ok(())
}

/// Depth-to-space factors applied by the head of each scale. The ×4 head is
/// two unshared ×2 stages.
pub fn head_stages(scale: usize) -> Result<&'static [usize]> {
    match scale {
        2 => Ok(&[2]),
        3 => Ok(&[3]),
        4 => Ok(&[2, 2]),
        _ => Err(BsrnError::config(format!("unsupported scale x{scale}"))),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UpscaleHead {
    scale: usize,
    /// One `c → f²·c` convolution per depth-to-space stage.
    pub expand: Vec<ConvKernel>,
    /// Final `c → 3` convolution at output resolution.
    pub output: ConvKernel,
}

impl UpscaleHead {
    fn zeros(channels: usize, scale: usize) -> Result<Self> {
        let expand = head_stages(scale)?
            .iter()
            .map(|f| ConvKernel::zeros(channels, f * f * channels))
            .collect();
        Ok(Self {
            scale,
            expand,
            output: ConvKernel::zeros(channels, IMAGE_CHANNELS),
        })
    }

    pub fn scale(&self) -> usize {
        self.scale
    }

    pub fn param_count(&self) -> usize {
        self.expand.iter().map(ConvKernel::param_count).sum::<usize>() + self.output.param_count()
    }
}

/// Every learnable tensor of a model. The three RRB kernels are stored once
/// and reused by all recursions. Gradients and optimizer moments use the same
/// type.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    pub init: ConvKernel,
    pub rrb: [ConvKernel; 3],
    heads: Vec<UpscaleHead>,
}

impl ModelParams {
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let joint = config.joint_channels();
        let heads = config
            .scales
            .iter()
            .map(|&f| UpscaleHead::zeros(config.channels, f))
            .collect::<Result<_>>()?;
        Ok(Self {
            config: config.clone(),
            init: ConvKernel::zeros(IMAGE_CHANNELS, config.channels),
            rrb: std::array::from_fn(|_| ConvKernel::zeros(joint, joint)),
            heads,
        })
    }

    pub fn zeros_like(&self) -> Self {
        // The config was validated when `self` was built.
        Self::zeros(&self.config).expect("validated config")
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Replaces the recursion schedule. Architecture fields must not change.
    pub fn set_schedule(&mut self, recursions: usize, freq_control: usize) -> Result<()> {
        validate_schedule(recursions, freq_control)?;
        self.config.recursions = recursions;
        self.config.freq_control = freq_control;
        Ok(())
    }

    pub fn heads(&self) -> &[UpscaleHead] {
        &self.heads
    }

    pub fn head(&self, scale: usize) -> Result<&UpscaleHead> {
        self.config.require_scale(scale)?;
        Ok(self.heads.iter().find(|h| h.scale == scale).expect("head per scale"))
    }

    pub fn head_mut(&mut self, scale: usize) -> Result<&mut UpscaleHead> {
        self.config.require_scale(scale)?;
        Ok(self
            .heads
            .iter_mut()
            .find(|h| h.scale == scale)
            .expect("head per scale"))
    }

    /// Convolutions in canonical order with their group names
    /// (`init`, `rrb.0`..`rrb.2`, `head.x{f}.expand{j}`, `head.x{f}.output`).
    pub fn named_convs(&self) -> Vec<(String, &ConvKernel)> {
        let mut out = vec![("init".to_string(), &self.init)];
        for (i, k) in self.rrb.iter().enumerate() {
            out.push((format!("rrb.{i}"), k));
        }
        for head in &self.heads {
            for (j, k) in head.expand.iter().enumerate() {
                out.push((format!("head.x{}.expand{j}", head.scale), k));
            }
            out.push((format!("head.x{}.output", head.scale), &head.output));
        }
        out
    }

    pub fn named_convs_mut(&mut self) -> Vec<(String, &mut ConvKernel)> {
        let mut out = vec![("init".to_string(), &mut self.init)];
        for (i, k) in self.rrb.iter_mut().enumerate() {
            out.push((format!("rrb.{i}"), k));
        }
        for head in &mut self.heads {
            let scale = head.scale;
            for (j, k) in head.expand.iter_mut().enumerate() {
                out.push((format!("head.x{scale}.expand{j}"), k));
            }
            out.push((format!("head.x{scale}.output"), &mut head.output));
        }
        out
    }

    /// Flat tensors in canonical order: `<group>.weight` then `<group>.bias`.
    pub fn tensors(&self) -> Vec<TensorRef<'_>> {
        self.named_convs()
            .into_iter()
            .flat_map(|(name, k)| {
                [
                    TensorRef {
                        name: format!("{name}.weight"),
                        dims: k.weight_dims().to_vec(),
                        data: k.weights(),
                    },
                    TensorRef {
                        name: format!("{name}.bias"),
                        dims: vec![k.out_channels()],
                        data: k.bias(),
                    },
                ]
            })
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [f32])> {
        self.named_convs_mut()
            .into_iter()
            .flat_map(|(name, k)| {
                let (weights, bias) = k.parts_mut();
                [(format!("{name}.weight"), weights), (format!("{name}.bias"), bias)]
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.named_convs().iter().map(|(_, k)| k.param_count()).sum()
    }

    /// `self += other` over every tensor.
    pub fn accumulate(&mut self, other: &ModelParams) {
        for ((_, a), (_, b)) in self.named_convs_mut().into_iter().zip(other.named_convs()) {
            a.accumulate(b);
        }
    }
}

/// Borrowed view of one named parameter tensor.
#[derive(Clone, Debug)]
pub struct TensorRef<'a> {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: &'a [f32],
}

/// Whether `group` (a conv name, or a tensor name) lies on the `scale` path:
/// the shared body plus that scale's head.
pub fn on_scale_path(name: &str, scale: usize) -> bool {
    match name.strip_prefix("head.x") {
        Some(rest) => rest.starts_with(&format!("{scale}.")),
        None => true,
    }
}

/// Fan-in scaled uniform initialization with zero biases, fully determined by `seed`.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<ModelParams> {
    let mut params = ModelParams::zeros(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, k) in params.named_convs_mut() {
        let bound = (6.0 / (9.0 * k.in_channels() as f64)).sqrt() as f32;
        for w in k.weights_mut() {
            *w = rng.random_range(-bound..=bound);
        }
    }
    Ok(params)
}

fn conv_count(in_ch: usize, out_ch: usize) -> usize {
    9 * in_ch * out_ch + out_ch
}

/// Learnable scalars on the `scale` path: initial conv, the three shared RRB
/// convs and that scale's head. Independent of `R` and `r`.
pub fn count_params(config: &ModelConfig, scale: usize) -> Result<usize> {
    config.require_scale(scale)?;
    Ok(body_param_count(config) + head_param_count(config.channels, scale)?)
}

pub fn body_param_count(config: &ModelConfig) -> usize {
    let joint = config.joint_channels();
    conv_count(IMAGE_CHANNELS, config.channels) + 3 * conv_count(joint, joint)
}

pub fn head_param_count(channels: usize, scale: usize) -> Result<usize> {
    let expand: usize = head_stages(scale)?
        .iter()
        .map(|f| conv_count(channels, f * f * channels))
        .sum();
    Ok(expand + conv_count(channels, IMAGE_CHANNELS))
}

/// The `(H_t, S_t)` pair threaded through the recursion.
#[derive(Clone, Debug, PartialEq)]
pub struct RecursionState {
    pub h: FeatureMap,
    pub s: FeatureMap,
}

/// `H_0 = conv(x)` and an all-zero block state.
pub fn extract_features(x: &FeatureMap, params: &ModelParams) -> Result<RecursionState> {
    if x.channels() != IMAGE_CHANNELS {
        return Err(BsrnError::shape(format!(
            "input image must have 3 channels, got {}",
            x.channels()
        )));
    }
    let h = conv2d_forward(x, &params.init)?;
    let s = FeatureMap::zeros(params.config.state_channels, x.height(), x.width());
    Ok(RecursionState { h, s })
}

/// Activations one RRB application keeps for its backward pass.
#[derive(Clone, Debug)]
pub struct RrbCache {
    /// `[H_t, S_t]`, input of the first C-Conv.
    joint_in: FeatureMap,
    /// First C-Conv output, before the C-ReLU.
    pre_relu: FeatureMap,
    /// C-ReLU output, input of the second C-Conv.
    activated: FeatureMap,
    /// `[h + H_t, s]`, input of the third C-Conv.
    joint_mid: FeatureMap,
}

fn check_state(state: &RecursionState, channels: usize, state_channels: usize) -> Result<()> {
    if state.h.channels() != channels || state.s.channels() != state_channels {
        return Err(BsrnError::shape(format!(
            "recursion state has {}+{} channels, block expects {channels}+{state_channels}",
            state.h.channels(),
            state.s.channels()
        )));
    }
    if (state.h.height(), state.h.width()) != (state.s.height(), state.s.width()) {
        return Err(BsrnError::shape("H and S spatial dims differ"));
    }
    Ok(())
}

/// One RRB application with an explicit kernel triple:
/// C-Conv → C-ReLU → C-Conv → `+H_t` → C-Conv → `+H_t`, residuals on the H part only.
pub fn rrb_forward(
    state: &RecursionState,
    kernels: &[ConvKernel; 3],
) -> Result<(RecursionState, RrbCache)> {
    rrb_forward_gated(state, kernels, None)
}

/// [`rrb_forward`] with the C-ReLU optionally replaced by a fixed 0/1 gate.
fn rrb_forward_gated(
    state: &RecursionState,
    kernels: &[ConvKernel; 3],
    gate: Option<&[bool]>,
) -> Result<(RecursionState, RrbCache)> {
    let c = state.h.channels();
    let joint = kernels[0].in_channels();
    if joint < c {
        return Err(BsrnError::shape("RRB kernel narrower than the feature path"));
    }
    check_state(state, c, joint - c)?;

    let joint_in = concat_channels(&state.h, &state.s)?;
    let pre_relu = conv2d_forward(&joint_in, &kernels[0])?;
    let activated = match gate {
        None => relu_forward(&pre_relu),
        Some(gate) => {
            if gate.len() != pre_relu.data().len() {
                return Err(BsrnError::shape("C-ReLU gate length mismatch"));
            }
            let mut out = pre_relu.clone();
            for (v, &open) in out.data_mut().iter_mut().zip(gate) {
                if !open {
                    *v = 0.0;
                }
            }
            out
        }
    };

    let (h2, s2) = split_channels(&conv2d_forward(&activated, &kernels[1])?, c)?;
    let h3 = add(&h2, &state.h)?;
    let joint_mid = concat_channels(&h3, &s2)?;

    let (h4, s4) = split_channels(&conv2d_forward(&joint_mid, &kernels[2])?, c)?;
    let h_next = add(&h4, &state.h)?;

    Ok((
        RecursionState { h: h_next, s: s4 },
        RrbCache {
            joint_in,
            pre_relu,
            activated,
            joint_mid,
        },
    ))
}

/// Backward of [`rrb_forward`]. Returns `(∂H_t, ∂S_t)` and this application's
/// kernel gradients.
pub fn rrb_backward(
    cache: &RrbCache,
    kernels: &[ConvKernel; 3],
    grad_h: &FeatureMap,
    grad_s: &FeatureMap,
) -> Result<(FeatureMap, FeatureMap, [ConvKernel; 3])> {
    let c = grad_h.channels();

    let grad_z3 = concat_channels(grad_h, grad_s)?;
    let (grad_mid, gk2) = conv2d_backward(&cache.joint_mid, &kernels[2], &grad_z3)?;
    let (grad_h3, _) = split_channels(&grad_mid, c)?;
    let mut grad_h_in = add(grad_h, &grad_h3)?;

    // Splitting and re-concatenating around the first residual leaves the
    // joint gradient unchanged.
    let (grad_act, gk1) = conv2d_backward(&cache.activated, &kernels[1], &grad_mid)?;
    let grad_pre = relu_backward(&cache.pre_relu, &grad_act)?;
    let (grad_joint, gk0) = conv2d_backward(&cache.joint_in, &kernels[0], &grad_pre)?;
    let (grad_h1, grad_s_in) = split_channels(&grad_joint, c)?;
    add_assign(&mut grad_h_in, &grad_h1)?;

    Ok((grad_h_in, grad_s_in, [gk0, gk1, gk2]))
}

pub fn rrb_step(state: &RecursionState, params: &ModelParams) -> Result<RecursionState> {
    check_state(state, params.config.channels, params.config.state_channels)?;
    Ok(rrb_forward(state, &params.rrb)?.0)
}

/// Applies the shared RRB `recursions` times; returns states `t = 1..=R`.
pub fn run_recursion(
    state0: &RecursionState,
    params: &ModelParams,
    recursions: usize,
) -> Result<Vec<RecursionState>> {
    if recursions == 0 {
        return Err(BsrnError::config("recursion count R must be at least 1"));
    }
    let mut states: Vec<RecursionState> = Vec::with_capacity(recursions);
    for _ in 0..recursions {
        let next = rrb_step(states.last().unwrap_or(state0), params)?;
        states.push(next);
    }
    Ok(states)
}

/// Inputs of every convolution of one head evaluation.
#[derive(Clone, Debug)]
pub struct HeadCache {
    inputs: Vec<FeatureMap>,
}

pub fn head_forward(h: &FeatureMap, head: &UpscaleHead) -> Result<(FeatureMap, HeadCache)> {
    let stages = head_stages(head.scale)?;
    let mut inputs = Vec::with_capacity(stages.len() + 1);
    let mut cur = h.clone();
    for (conv, &f) in head.expand.iter().zip(stages) {
        let expanded = depth_to_space(&conv2d_forward(&cur, conv)?, f)?;
        inputs.push(std::mem::replace(&mut cur, expanded));
    }
    let out = conv2d_forward(&cur, &head.output)?;
    inputs.push(cur);
    Ok((out, HeadCache { inputs }))
}

pub fn head_backward(
    cache: &HeadCache,
    head: &UpscaleHead,
    grad_out: &FeatureMap,
    grads: &mut UpscaleHead,
) -> Result<FeatureMap> {
    let stages = head_stages(head.scale)?;
    let last = cache.inputs.last().expect("head cache holds the output conv input");
    let (mut grad, gk) = conv2d_backward(last, &head.output, grad_out)?;
    grads.output.accumulate(&gk);
    for j in (0..stages.len()).rev() {
        let grad_expanded = space_to_depth(&grad, stages[j])?;
        let (g, gk) = conv2d_backward(&cache.inputs[j], &head.expand[j], &grad_expanded)?;
        grads.expand[j].accumulate(&gk);
        grad = g;
    }
    Ok(grad)
}

/// Upscales a feature map `H_t` (the block state is not consumed here).
pub fn upscale_head(h: &FeatureMap, params: &ModelParams, scale: usize) -> Result<FeatureMap> {
    if h.channels() != params.config.channels {
        return Err(BsrnError::shape(format!(
            "head expects {} channels, got {}",
            params.config.channels,
            h.channels()
        )));
    }
    Ok(head_forward(h, params.head(scale)?)?.0)
}

/// Normalized weights `2^(rt−1) / Σ 2^(rt−1)` for `t = 1..=R/r`, in `f64`.
///
/// Every raw weight is divided by `2^(R−1)` first. That is exact for powers of
/// two and keeps large `R` from overflowing.
pub fn combine_weights(recursions: usize, freq_control: usize) -> Result<Vec<f64>> {
    validate_schedule(recursions, freq_control)?;
    let n = recursions / freq_control;
    let raw: Vec<f64> = (1..=n)
        .map(|t| 2f64.powi((freq_control * t) as i32 - recursions as i32))
        .collect();
    let total: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|w| w / total).collect())
}

/// Weighted average of the intermediate outputs `Ŷ_r, Ŷ_2r, …, Ŷ_R`.
pub fn combine_outputs(
    intermediates: &[FeatureMap],
    freq_control: usize,
    recursions: usize,
) -> Result<FeatureMap> {
    if intermediates.is_empty() {
        return Err(BsrnError::config("no intermediate outputs to combine"));
    }
    let weights = combine_weights(recursions, freq_control)?;
    if weights.len() != intermediates.len() {
        return Err(BsrnError::config(format!(
            "R/r = {} outputs expected, got {}",
            weights.len(),
            intermediates.len()
        )));
    }
    weighted_sum(intermediates.iter(), &weights)
}

fn weighted_sum<'a>(
    maps: impl Iterator<Item = &'a FeatureMap> + Clone,
    weights: &[f64],
) -> Result<FeatureMap> {
    let first = maps.clone().next().expect("non-empty");
    let (c, h, w) = first.shape();
    let mut acc = vec![0.0f64; first.data().len()];
    for (map, &wt) in maps.zip(weights) {
        if map.shape() != (c, h, w) {
            return Err(BsrnError::shape("intermediate outputs differ in shape"));
        }
        for (a, &v) in acc.iter_mut().zip(map.data()) {
            *a += wt * f64::from(v);
        }
    }
    FeatureMap::from_vec(c, h, w, acc.into_iter().map(|v| v as f32).collect())
}

/// What one inference pass computes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Inference {
    pub scale: usize,
    pub recursions: usize,
    pub freq_control: usize,
    /// Also return every `Ŷ_{rt}` and channel-averaged `H_t`, `S_t`.
    pub emit_intermediate: bool,
}

impl Inference {
    /// The schedule stored in `config` at the given scale.
    pub fn new(config: &ModelConfig, scale: usize) -> Self {
        Self {
            scale,
            recursions: config.recursions,
            freq_control: config.freq_control,
            emit_intermediate: false,
        }
    }

    pub fn with_freq_control(mut self, freq_control: usize) -> Self {
        self.freq_control = freq_control;
        self
    }

    pub fn with_intermediates(mut self) -> Self {
        self.emit_intermediate = true;
        self
    }
}

#[derive(Clone, Debug)]
pub struct Intermediates {
    /// `(t, Ŷ_t)` for `t = r, 2r, …, R`.
    pub outputs: Vec<(usize, FeatureMap)>,
    /// Channel mean of `H_t` for `t = 1..=R`.
    pub features: Vec<FeatureMap>,
    /// Channel mean of `S_t` for `t = 1..=R`.
    pub states: Vec<FeatureMap>,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub output: FeatureMap,
    pub head_evaluations: usize,
    pub intermediates: Option<Intermediates>,
}

pub fn forward(x: &FeatureMap, params: &ModelParams, inference: &Inference) -> Result<ForwardOutput> {
    let (scale, recursions, r) = (inference.scale, inference.recursions, inference.freq_control);
    params.config.require_scale(scale)?;
    let weights = combine_weights(recursions, r)?;
    let head = params.head(scale)?;

    let mut state = extract_features(x, params)?;
    let mut outputs = Vec::with_capacity(weights.len());
    let mut features = Vec::new();
    let mut states = Vec::new();
    for t in 1..=recursions {
        state = rrb_step(&state, params)?;
        if inference.emit_intermediate {
            features.push(state.h.mean_over_channels());
            states.push(state.s.mean_over_channels());
        }
        if t % r == 0 {
            outputs.push((t, head_forward(&state.h, head)?.0));
        }
    }
    let head_evaluations = outputs.len();
    let output = if outputs.len() == 1 {
        outputs[0].1.clone()
    } else {
        weighted_sum(outputs.iter().map(|(_, y)| y), &weights)?
    };
    let intermediates = inference.emit_intermediate.then_some(Intermediates {
        outputs,
        features,
        states,
    });
    Ok(ForwardOutput {
        output,
        head_evaluations,
        intermediates,
    })
}

/// Activations of one training forward pass, consumed by [`backward`].
#[derive(Clone, Debug)]
pub struct Trace {
    scale: usize,
    input: FeatureMap,
    steps: Vec<RrbCache>,
    /// `(t, cache)` for every head evaluation.
    heads: Vec<(usize, HeadCache)>,
    weights: Vec<f64>,
    output: FeatureMap,
}

impl Trace {
    pub fn output(&self) -> &FeatureMap {
        &self.output
    }

    pub fn scale(&self) -> usize {
        self.scale
    }

    /// Which C-ReLU inputs are positive, over every recursion in order.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.steps
            .iter()
            .flat_map(|c| c.pre_relu.data().iter().map(|&v| v > 0.0))
            .collect()
    }
}

/// Training forward pass using the schedule stored in the params' config.
pub fn forward_with_trace(x: &FeatureMap, params: &ModelParams, scale: usize) -> Result<Trace> {
    forward_traced(x, params, scale, None)
}

/// [`forward_with_trace`] with every C-ReLU gated by a fixed sign pattern
/// (as returned by [`Trace::relu_pattern`]) instead of its own input. Near a
/// pattern's base point the gated network is smooth and shares the true
/// network's gradient, which finite-difference checks rely on.
pub fn forward_with_relu_pattern(
    x: &FeatureMap,
    params: &ModelParams,
    scale: usize,
    pattern: &[bool],
) -> Result<Trace> {
    forward_traced(x, params, scale, Some(pattern))
}

fn forward_traced(
    x: &FeatureMap,
    params: &ModelParams,
    scale: usize,
    pattern: Option<&[bool]>,
) -> Result<Trace> {
    let config = &params.config;
    let (recursions, r) = (config.recursions, config.freq_control);
    let weights = combine_weights(recursions, r)?;
    let head = params.head(scale)?;

    let mut state = extract_features(x, params)?;
    let mut steps = Vec::with_capacity(recursions);
    let mut heads = Vec::with_capacity(weights.len());
    let mut outputs = Vec::with_capacity(weights.len());
    let per_step = config.joint_channels() * x.height() * x.width();
    if pattern.is_some_and(|p| p.len() != per_step * recursions) {
        return Err(BsrnError::shape(format!(
            "C-ReLU pattern needs {} entries",
            per_step * recursions
        )));
    }
    for t in 1..=recursions {
        let gate = pattern.map(|p| &p[(t - 1) * per_step..t * per_step]);
        let (next, cache) = rrb_forward_gated(&state, &params.rrb, gate)?;
        steps.push(cache);
        state = next;
        if t % r == 0 {
            let (y, cache) = head_forward(&state.h, head)?;
            heads.push((t, cache));
            outputs.push(y);
        }
    }
    let output = if outputs.len() == 1 {
        outputs.pop().expect("one output")
    } else {
        weighted_sum(outputs.iter(), &weights)?
    };
    Ok(Trace {
        scale,
        input: x.clone(),
        steps,
        heads,
        weights,
        output,
    })
}

/// Accumulates `∂L/∂params` into `grads` given `∂L/∂Ŷ`. The shared RRB
/// gradients sum over all recursions.
pub fn backward(
    trace: &Trace,
    params: &ModelParams,
    grad_output: &FeatureMap,
    grads: &mut ModelParams,
) -> Result<()> {
    if !grad_output.same_shape(&trace.output) {
        return Err(BsrnError::shape(format!(
            "output gradient {:?} vs output {:?}",
            grad_output.shape(),
            trace.output.shape()
        )));
    }
    let config = &params.config;
    let head = params.head(trace.scale)?;
    let (h, w) = (trace.input.height(), trace.input.width());
    let mut grad_h = FeatureMap::zeros(config.channels, h, w);
    let mut grad_s = FeatureMap::zeros(config.state_channels, h, w);

    let mut pending = trace.heads.iter().zip(&trace.weights).rev().peekable();
    for t in (1..=trace.steps.len()).rev() {
        if let Some(((_, cache), &wt)) = pending.next_if(|((ht, _), _)| *ht == t) {
            let grad_y = if trace.weights.len() == 1 {
                grad_output.clone()
            } else {
                grad_output.map(|g| (wt * f64::from(g)) as f32)
            };
            let grad_head = head_backward(cache, head, &grad_y, grads.head_mut(trace.scale)?)?;
            add_assign(&mut grad_h, &grad_head)?;
        }
        let (gh, gs, gk) = rrb_backward(&trace.steps[t - 1], &params.rrb, &grad_h, &grad_s)?;
        for (acc, g) in grads.rrb.iter_mut().zip(&gk) {
            acc.accumulate(g);
        }
        grad_h = gh;
        grad_s = gs;
    }
    let (_, gk) = conv2d_backward(&trace.input, &params.init, &grad_h)?;
    grads.init.accumulate(&gk);
    Ok(())
}
