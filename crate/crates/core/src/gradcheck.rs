//! Central-difference gradient checks for the primitives and the full model.
//!
//! Every check compares an analytic gradient `a` with a finite-difference
//! estimate `n` over one parameter group and reports
//! `‖a − n‖₂ / max(‖a‖₂, ‖n‖₂)`. Steps are `h = 10⁻²·max(1, |θ|)` and the
//! losses are evaluated in f64 on top of the f32 forward pass.
//!
//! A step that large can push a C-ReLU input across zero, where the
//! difference quotient stops describing the local slope. The end-to-end
//! check records the sign pattern of every C-ReLU input at the base point.
//! Entries whose probes keep that pattern use the plain forward pass. The
//! others are re-probed with the C-ReLUs gated by the base pattern, a smooth
//! network with the same gradient at the base point. The report counts them
//! per group.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{BsrnError, Result};
use crate::model::{
    backward, forward_with_relu_pattern, forward_with_trace, init_params, on_scale_path,
    ModelConfig, ModelParams,
};
use crate::optim::l1_loss;
use crate::tensor::{
    conv2d_backward, conv2d_forward, depth_to_space, depth_to_space_backward, relu_backward,
    relu_forward, ConvKernel, FeatureMap,
};

pub const DEFAULT_TOLERANCE: f64 = 1e-2;

/// Finite-difference step for a parameter value.
pub fn fd_step(theta: f32) -> f32 {
    1e-2 * theta.abs().max(1.0)
}

/// `‖a − n‖₂ / max(‖a‖₂, ‖n‖₂)`; zero when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut analytic.iter().zip(numeric).map(|(a, n)| a - n));
    let scale = norm(&mut analytic.iter().copied()).max(norm(&mut numeric.iter().copied()));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Central differences of `loss` with respect to every entry of `values`.
/// `values` is restored afterwards.
pub fn numeric_gradient(values: &mut [f32], mut loss: impl FnMut(&[f32]) -> f64) -> Vec<f64> {
    numeric_gradient_masked(values, |v| Some(loss(v)))
        .into_iter()
        .map(|g| g.expect("unmasked"))
        .collect()
}

/// Like [`numeric_gradient`], but `loss` may reject a probe with `None`,
/// which leaves that entry without an estimate.
pub fn numeric_gradient_masked(
    values: &mut [f32],
    mut loss: impl FnMut(&[f32]) -> Option<f64>,
) -> Vec<Option<f64>> {
    (0..values.len())
        .map(|i| {
            let orig = values[i];
            let h = fd_step(orig);
            values[i] = orig + h;
            let plus = loss(values);
            values[i] = orig - h;
            let minus = loss(values);
            values[i] = orig;
            // The step actually taken, as rounded in f32.
            let span = f64::from(orig + h) - f64::from(orig - h);
            Some((plus? - minus?) / span)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupResult {
    pub name: String,
    pub elements: usize,
    /// Entries whose plain probes crossed a C-ReLU kink.
    pub gated: usize,
    pub relative_error: f64,
}

impl GroupResult {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.relative_error < tolerance
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub primitives: Vec<GroupResult>,
    /// One entry per parameter group, the worst over all checked scales.
    pub groups: Vec<GroupResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.primitives
            .iter()
            .chain(&self.groups)
            .all(|g| g.passed(self.tolerance))
    }

    pub fn lines(&self) -> Vec<String> {
        let line = |kind: &str, g: &GroupResult| {
            let verdict = if g.passed(self.tolerance) { "ok" } else { "FAIL" };
            format!(
                "{kind:<9} {:<22} n={:<5} gated={:<4} max_rel_err={:.3e} {verdict}",
                g.name, g.elements, g.gated, g.relative_error
            )
        };
        self.primitives
            .iter()
            .map(|g| line("primitive", g))
            .chain(self.groups.iter().map(|g| line("group", g)))
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    pub channels: usize,
    pub state_channels: usize,
    pub recursions: usize,
    pub size: usize,
    pub scales: Vec<usize>,
    pub seed: u64,
    pub tolerance: f64,
    /// Test hook: multiplies this group's analytic gradient by 1.5.
    pub fault: Option<String>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            channels: 4,
            state_channels: 4,
            recursions: 2,
            size: 8,
            scales: vec![2, 3, 4],
            seed: 7,
            tolerance: DEFAULT_TOLERANCE,
            fault: None,
        }
    }
}

fn random_map(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize, lo: f32, hi: f32) -> FeatureMap {
    let data = (0..c * h * w).map(|_| rng.random_range(lo..hi)).collect();
    FeatureMap::from_vec(c, h, w, data).expect("sized buffer")
}

fn random_sign(rng: &mut ChaCha8Rng) -> f32 {
    if rng.random_bool(0.5) {
        1.0
    } else {
        -1.0
    }
}

fn dot(a: &FeatureMap, w: &FeatureMap) -> f64 {
    a.data().iter().zip(w.data()).map(|(&x, &y)| f64::from(x) * f64::from(y)).sum()
}

fn widen(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| f64::from(x)).collect()
}

/// `L = <w, conv(x)>` with respect to the input, the weights and the bias.
fn check_conv(rng: &mut ChaCha8Rng) -> Result<Vec<GroupResult>> {
    let (cin, cout, h, w) = (3, 4, 5, 6);
    let x = random_map(rng, cin, h, w, -1.0, 1.0);
    let weights = (0..9 * cin * cout).map(|_| rng.random_range(-0.5..0.5)).collect();
    let bias = (0..cout).map(|_| rng.random_range(-0.5..0.5)).collect();
    let kernel = ConvKernel::from_parts(cin, cout, weights, bias)?;
    let wsum = random_map(rng, cout, h, w, -1.0, 1.0);
    let (gx, gk) = conv2d_backward(&x, &kernel, &wsum)?;

    let mut xs = x.data().to_vec();
    let nx = numeric_gradient(&mut xs, |v| {
        let x = FeatureMap::from_vec(cin, h, w, v.to_vec()).expect("same shape");
        dot(&conv2d_forward(&x, &kernel).expect("valid conv"), &wsum)
    });
    let mut ws = kernel.weights().to_vec();
    let nw = numeric_gradient(&mut ws, |v| {
        let k = ConvKernel::from_parts(cin, cout, v.to_vec(), kernel.bias().to_vec()).expect("shape");
        dot(&conv2d_forward(&x, &k).expect("valid conv"), &wsum)
    });
    let mut bs = kernel.bias().to_vec();
    let nb = numeric_gradient(&mut bs, |v| {
        let k = ConvKernel::from_parts(cin, cout, kernel.weights().to_vec(), v.to_vec()).expect("shape");
        dot(&conv2d_forward(&x, &k).expect("valid conv"), &wsum)
    });
    Ok(vec![
        result("conv2d.input", &widen(gx.data()), &nx),
        result("conv2d.weight", &widen(gk.weights()), &nw),
        result("conv2d.bias", &widen(gk.bias()), &nb),
    ])
}

/// ReLU away from its kink: every input is at least 0.1 from zero.
fn check_relu(rng: &mut ChaCha8Rng) -> Result<GroupResult> {
    let data = (0..32).map(|_| random_sign(rng) * rng.random_range(0.1f32..1.0)).collect();
    let x = FeatureMap::from_vec(2, 4, 4, data)?;
    let wsum = random_map(rng, 2, 4, 4, -1.0, 1.0);
    let analytic = relu_backward(&x, &wsum)?;
    let mut xs = x.data().to_vec();
    let numeric = numeric_gradient(&mut xs, |v| {
        dot(&relu_forward(&FeatureMap::from_vec(2, 4, 4, v.to_vec()).expect("shape")), &wsum)
    });
    Ok(result("relu", &widen(analytic.data()), &numeric))
}

fn check_depth_to_space(rng: &mut ChaCha8Rng) -> Result<Vec<GroupResult>> {
    [2usize, 3]
        .iter()
        .map(|&f| {
            let x = random_map(rng, 3 * f * f, 3, 2, -1.0, 1.0);
            let wsum = random_map(rng, 3, 3 * f, 2 * f, -1.0, 1.0);
            let analytic = depth_to_space_backward(&wsum, f)?;
            let mut xs = x.data().to_vec();
            let numeric = numeric_gradient(&mut xs, |v| {
                let m = FeatureMap::from_vec(3 * f * f, 3, 2, v.to_vec()).expect("shape");
                dot(&depth_to_space(&m, f).expect("divisible"), &wsum)
            });
            Ok(result(&format!("depth_to_space.x{f}"), &widen(analytic.data()), &numeric))
        })
        .collect()
}

/// L1 with every residual at least 0.1 from zero.
fn check_l1(rng: &mut ChaCha8Rng) -> Result<GroupResult> {
    let y = random_map(rng, 3, 4, 5, 0.0, 1.0);
    let data = y
        .data()
        .iter()
        .map(|&v| v + random_sign(rng) * rng.random_range(0.1f32..0.5))
        .collect();
    let yhat = FeatureMap::from_vec(3, 4, 5, data)?;
    let (_, analytic) = l1_loss(&yhat, &y)?;
    let mut vs = yhat.data().to_vec();
    let numeric = numeric_gradient(&mut vs, |v| {
        let m = FeatureMap::from_vec(3, 4, 5, v.to_vec()).expect("shape");
        l1_f64(&m, &y)
    });
    Ok(result("l1_loss", &widen(analytic.data()), &numeric))
}

fn l1_f64(yhat: &FeatureMap, y: &FeatureMap) -> f64 {
    let total: f64 = yhat
        .data()
        .iter()
        .zip(y.data())
        .map(|(&a, &b)| (f64::from(a) - f64::from(b)).abs())
        .sum();
    total / yhat.plane_len() as f64
}

fn result(name: &str, analytic: &[f64], numeric: &[f64]) -> GroupResult {
    GroupResult {
        name: name.to_string(),
        elements: analytic.len(),
        gated: 0,
        relative_error: relative_error(analytic, numeric),
    }
}

fn group_of(tensor: &str) -> &str {
    tensor
        .strip_suffix(".weight")
        .or_else(|| tensor.strip_suffix(".bias"))
        .unwrap_or(tensor)
}

/// Per-group gradients from one scale of the end-to-end check.
struct GroupGradients {
    name: String,
    gated: usize,
    analytic: Vec<f64>,
    numeric: Vec<f64>,
}

/// One scale of the end-to-end check: the L1 loss against a target offset
/// by ±0.5 from the initial output, which keeps the loss away from its own
/// kink.
fn end_to_end(
    params: &ModelParams,
    x: &FeatureMap,
    scale: usize,
    rng: &mut ChaCha8Rng,
    fault: Option<&str>,
) -> Result<Vec<GroupGradients>> {
    let trace = forward_with_trace(x, params, scale)?;
    let pattern = trace.relu_pattern();
    let (c, h, w) = trace.output().shape();
    let offsets = trace.output().data().iter().map(|&v| v + 0.5 * random_sign(rng)).collect();
    let target = FeatureMap::from_vec(c, h, w, offsets)?;
    let (_, grad_out) = l1_loss(trace.output(), &target)?;
    let mut grads = params.zeros_like();
    backward(&trace, params, &grad_out, &mut grads)?;

    let mut out: Vec<GroupGradients> = Vec::new();
    for (index, t) in grads.tensors().into_iter().enumerate() {
        if !on_scale_path(&t.name, scale) {
            continue;
        }
        let group = group_of(&t.name);
        let factor = if fault == Some(group) { 1.5 } else { 1.0 };
        let mut values = params.tensors()[index].data.to_vec();
        let mut probe = params.clone();
        let plain = numeric_gradient_masked(&mut values, |v| {
            probe.tensors_mut()[index].1.copy_from_slice(v);
            let y = forward_with_trace(x, &probe, scale).expect("checked shapes");
            (y.relu_pattern() == pattern).then(|| l1_f64(y.output(), &target))
        });
        let mut gated = 0;
        let mut numeric = Vec::with_capacity(plain.len());
        for (i, estimate) in plain.into_iter().enumerate() {
            let estimate = match estimate {
                Some(n) => n,
                None => {
                    gated += 1;
                    let mut one = [values[i]];
                    numeric_gradient(&mut one, |v| {
                        probe.tensors_mut()[index].1[..].copy_from_slice(&values);
                        probe.tensors_mut()[index].1[i] = v[0];
                        let y = forward_with_relu_pattern(x, &probe, scale, &pattern)
                            .expect("checked shapes");
                        l1_f64(y.output(), &target)
                    })[0]
                }
            };
            numeric.push(estimate);
        }
        let slot = match out.iter().position(|g| g.name == group) {
            Some(i) => &mut out[i],
            None => {
                out.push(GroupGradients {
                    name: group.to_string(),
                    gated: 0,
                    analytic: Vec::new(),
                    numeric: Vec::new(),
                });
                out.last_mut().expect("just pushed")
            }
        };
        slot.gated += gated;
        slot.analytic.extend(t.data.iter().map(|&a| factor * f64::from(a)));
        slot.numeric.extend(numeric);
    }
    Ok(out)
}

pub fn run_gradcheck(opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let config = ModelConfig::new(
        opts.channels,
        opts.state_channels,
        opts.recursions,
        1,
        &opts.scales,
    )?;
    let mut params = init_params(&config, opts.seed)?;
    // Nonzero biases exercise every bias path.
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    for (_, k) in params.named_convs_mut() {
        k.bias_mut().iter_mut().for_each(|b| *b = rng.random_range(-0.05..0.05));
    }
    if let Some(fault) = &opts.fault {
        if !params.named_convs().iter().any(|(n, _)| n == fault) {
            return Err(BsrnError::config(format!("unknown parameter group `{fault}`")));
        }
    }

    let mut primitives = check_conv(&mut rng)?;
    primitives.push(check_relu(&mut rng)?);
    primitives.extend(check_depth_to_space(&mut rng)?);
    primitives.push(check_l1(&mut rng)?);

    let names: Vec<String> = params.named_convs().into_iter().map(|(n, _)| n).collect();
    let mut groups: Vec<GroupResult> = names
        .iter()
        .map(|n| GroupResult {
            name: n.clone(),
            elements: 0,
            gated: 0,
            relative_error: 0.0,
        })
        .collect();
    let x = random_map(&mut rng, 3, opts.size, opts.size, 0.0, 1.0);
    for &scale in &config.scales {
        for g in end_to_end(&params, &x, scale, &mut rng, opts.fault.as_deref())? {
            let slot = groups.iter_mut().find(|s| s.name == g.name).expect("known group");
            // Shared groups are checked once per scale.
            slot.elements = g.analytic.len();
            slot.gated = slot.gated.max(g.gated);
            slot.relative_error = slot.relative_error.max(relative_error(&g.analytic, &g.numeric));
        }
    }
    Ok(GradcheckReport {
        tolerance: opts.tolerance,
        primitives,
        groups,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_definition() {
        assert_eq!(relative_error(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
        assert_eq!(relative_error(&[1.0, 0.0], &[1.0, 0.0]), 0.0);
        assert!((relative_error(&[3.0, 4.0], &[0.0, 0.0]) - 1.0).abs() < 1e-15);
        assert!((relative_error(&[1.0], &[1.1]) - 0.1 / 1.1).abs() < 1e-12);
    }

    #[test]
    fn numeric_gradient_of_quadratic() {
        let mut v = vec![0.5f32, -2.0, 3.0];
        let g = numeric_gradient(&mut v, |x| x.iter().map(|&a| f64::from(a).powi(2)).sum());
        assert_eq!(v, [0.5, -2.0, 3.0]);
        for (gi, want) in g.iter().zip([1.0, -4.0, 6.0]) {
            assert!((gi - want).abs() < 1e-5, "{gi} vs {want}");
        }
    }

    #[test]
    fn fault_is_detected_in_the_named_group() {
        let opts = GradcheckOptions {
            scales: vec![2],
            fault: Some("rrb.1".into()),
            ..GradcheckOptions::default()
        };
        let report = run_gradcheck(&opts).unwrap();
        assert!(!report.passed());
        let bad: Vec<_> = report
            .groups
            .iter()
            .filter(|g| !g.passed(report.tolerance))
            .map(|g| g.name.as_str())
            .collect();
        assert_eq!(bad, ["rrb.1"]);
        assert!(run_gradcheck(&GradcheckOptions { fault: Some("nope".into()), ..opts }).is_err());
    }
}
