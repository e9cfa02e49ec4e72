//! Patch scorer: a small strided convolutional network with global average
//! pooling and an affine head producing one logit per rating class.
//!
//! Convolutions are unpadded, so a constant-color input produces constant
//! feature maps of any size and the pooled features do not depend on the
//! patch side. Pixel values in `[0, 1]` are mapped to `[-1, 1]` before the
//! first convolution. Parameters and activations are stored as `T`; every dot
//! product and reduction accumulates in `f64`.

mod checkpoint;

pub use checkpoint::{Checkpoint, RngState, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::patchgrid::{ImageBuffer, CHANNELS};
use crate::ratings::{RatingDistribution, DEFAULT_CLASSES};

/// Storage precision for parameters and activations.
pub trait Real: Copy + Default + PartialOrd + Send + Sync + std::fmt::Debug + 'static {
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        f64::from(self)
    }
}

impl Real for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScorerConfig {
    pub conv_channels: Vec<usize>,
    pub kernel: usize,
    pub stride: usize,
    pub num_classes: usize,
    pub input_min_side: usize,
}

impl Default for ScorerConfig {
    fn default() -> Self {
        ScorerConfig {
            conv_channels: vec![8, 16, 32],
            kernel: 3,
            stride: 2,
            num_classes: DEFAULT_CLASSES,
            input_min_side: 32,
        }
    }
}

impl ScorerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.conv_channels.is_empty() || self.conv_channels.contains(&0) {
            return Err(Error::InvalidParameter(
                "conv_channels must be a non-empty list of positive widths".into(),
            ));
        }
        if self.kernel == 0 || self.stride == 0 {
            return Err(Error::InvalidParameter(
                "kernel and stride must be positive".into(),
            ));
        }
        if self.num_classes < 2 {
            return Err(Error::InvalidParameter("num_classes must be >= 2".into()));
        }
        if self.output_side(self.input_min_side).is_none() {
            return Err(Error::InvalidParameter(format!(
                "input_min_side {} is too small for {} layers of kernel {} stride {}",
                self.input_min_side,
                self.conv_channels.len(),
                self.kernel,
                self.stride
            )));
        }
        Ok(())
    }

    /// Spatial side after the last convolution, if every layer fits.
    fn output_side(&self, side: usize) -> Option<usize> {
        let mut side = side;
        for _ in &self.conv_channels {
            if side < self.kernel {
                return None;
            }
            side = (side - self.kernel) / self.stride + 1;
        }
        Some(side)
    }

    /// Names and shapes of every parameter tensor, in storage order.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut shapes = Vec::new();
        let mut c_in = CHANNELS;
        for (i, &c_out) in self.conv_channels.iter().enumerate() {
            shapes.push((
                format!("conv{i}.weight"),
                vec![c_out, c_in, self.kernel, self.kernel],
            ));
            shapes.push((format!("conv{i}.bias"), vec![c_out]));
            c_in = c_out;
        }
        shapes.push(("head.weight".into(), vec![self.num_classes, c_in]));
        shapes.push(("head.bias".into(), vec![self.num_classes]));
        shapes
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(name: impl Into<String>, dims: Vec<usize>) -> Self {
        let len = dims.iter().product();
        Tensor {
            name: name.into(),
            dims,
            data: vec![T::default(); len],
        }
    }
}

/// Gradients of a scalar with respect to every parameter, in `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterGradients {
    pub grads: Vec<Vec<f64>>,
}

impl ParameterGradients {
    pub fn zeros_like<T: Real>(scorer: &Scorer<T>) -> Self {
        ParameterGradients {
            grads: scorer
                .params
                .iter()
                .map(|p| vec![0.0; p.data.len()])
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &ParameterGradients) -> Result<()> {
        if self.grads.len() != other.grads.len() {
            return Err(Error::mismatch(self.grads.len(), other.grads.len()));
        }
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            if a.len() != b.len() {
                return Err(Error::mismatch(a.len(), b.len()));
            }
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        self.grads.iter_mut().flatten().for_each(|g| *g *= factor);
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.grads.iter().flatten().copied().collect()
    }
}

/// Activations recorded by [`Scorer::forward`] for the matching backward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace<T> {
    version: u64,
    input: Vec<T>,
    /// `(channels, height, width)` of the input and of each layer output.
    shapes: Vec<(usize, usize, usize)>,
    /// Post-ReLU output of every convolution.
    activations: Vec<Vec<T>>,
    pooled: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ForwardPass<T> {
    pub logits: Vec<f64>,
    pub trace: ForwardTrace<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scorer<T: Real = f32> {
    config: ScorerConfig,
    params: Vec<Tensor<T>>,
    /// Bumped on every parameter update; traces from older versions are stale.
    version: u64,
}

/// Anything that maps a patch to a rating distribution.
pub trait PatchPredictor: Sync {
    fn predict(&self, patch: &ImageBuffer) -> Result<RatingDistribution>;
}

impl<T: Real> PatchPredictor for Scorer<T> {
    fn predict(&self, patch: &ImageBuffer) -> Result<RatingDistribution> {
        RatingDistribution::from_logits(&self.logits(patch)?)
    }
}

/// Random initialization: uniform fan-in scaling for weights, zero biases.
pub fn init_scorer<T: Real>(cfg: &ScorerConfig, seed: u64) -> Result<Scorer<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = cfg
        .parameter_shapes()
        .into_iter()
        .map(|(name, dims)| {
            let mut t = Tensor::zeros(name, dims);
            if t.name.ends_with(".weight") {
                let fan_in: usize = t.dims[1..].iter().product();
                let bound = if t.name.starts_with("conv") {
                    (6.0 / fan_in as f64).sqrt()
                } else {
                    (1.0 / fan_in as f64).sqrt()
                };
                for w in &mut t.data {
                    *w = T::from_f64(rng.gen_range(-bound..bound));
                }
            }
            t
        })
        .collect();
    Ok(Scorer {
        config: cfg.clone(),
        params,
        version: 0,
    })
}

impl<T: Real> Scorer<T> {
    /// Assembles a scorer from explicit tensors, checking names and shapes.
    pub fn from_parameters(config: ScorerConfig, params: Vec<Tensor<T>>) -> Result<Self> {
        config.validate()?;
        let shapes = config.parameter_shapes();
        if shapes.len() != params.len() {
            return Err(Error::mismatch(shapes.len(), params.len()));
        }
        for ((name, dims), t) in shapes.iter().zip(&params) {
            let len: usize = t.dims.iter().product();
            if *name != t.name || *dims != t.dims || len != t.data.len() {
                return Err(Error::InvalidParameter(format!(
                    "parameter {} {:?} does not match expected {name} {dims:?}",
                    t.name, t.dims
                )));
            }
        }
        Ok(Scorer {
            config,
            params,
            version: 0,
        })
    }

    pub fn config(&self) -> &ScorerConfig {
        &self.config
    }

    pub fn parameters(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    /// Mutable access for tests and tooling; invalidates outstanding traces.
    pub fn parameters_mut(&mut self) -> &mut [Tensor<T>] {
        self.version += 1;
        &mut self.params
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    /// Same parameters at another storage precision.
    pub fn cast<U: Real>(&self) -> Scorer<U> {
        Scorer {
            config: self.config.clone(),
            params: self
                .params
                .iter()
                .map(|t| Tensor {
                    name: t.name.clone(),
                    dims: t.dims.clone(),
                    data: t.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
                })
                .collect(),
            version: 0,
        }
    }

    pub fn logits(&self, patch: &ImageBuffer) -> Result<Vec<f64>> {
        Ok(self.forward(patch)?.logits)
    }

    pub fn forward(&self, patch: &ImageBuffer) -> Result<ForwardPass<T>> {
        let side = patch.width().min(patch.height());
        if side < self.config.input_min_side || self.config.output_side(side).is_none() {
            return Err(Error::InputTooSmall {
                side,
                min: self.config.input_min_side,
            });
        }
        let (w, h) = (patch.width(), patch.height());
        // HWC -> CHW
        let mut input = vec![T::default(); CHANNELS * w * h];
        for (i, px) in patch.pixels().chunks_exact(CHANNELS).enumerate() {
            for c in 0..CHANNELS {
                input[c * w * h + i] = T::from_f64(2.0 * f64::from(px[c]) - 1.0);
            }
        }
        let mut shapes = vec![(CHANNELS, h, w)];
        let mut activations: Vec<Vec<T>> = Vec::with_capacity(self.config.conv_channels.len());
        for layer in 0..self.config.conv_channels.len() {
            let src = if layer == 0 {
                &input
            } else {
                &activations[layer - 1]
            };
            let (out, shape) = self.conv_forward(layer, src, shapes[layer]);
            activations.push(out);
            shapes.push(shape);
        }

        let &(c_last, oh, ow) = shapes.last().expect("at least one layer");
        let last = activations.last().expect("at least one layer");
        let area = (oh * ow) as f64;
        let pooled: Vec<f64> = last
            .chunks_exact(oh * ow)
            .map(|plane| plane.iter().map(|v| v.to_f64()).sum::<f64>() / area)
            .collect();

        let (hw, hb) = self.head();
        let logits = (0..self.config.num_classes)
            .map(|n| {
                hb[n].to_f64()
                    + (0..c_last)
                        .map(|c| hw[n * c_last + c].to_f64() * pooled[c])
                        .sum::<f64>()
            })
            .collect();
        Ok(ForwardPass {
            logits,
            trace: ForwardTrace {
                version: self.version,
                input,
                shapes,
                activations,
                pooled,
            },
        })
    }

    fn head(&self) -> (&[T], &[T]) {
        let n = self.params.len();
        (&self.params[n - 2].data, &self.params[n - 1].data)
    }

    fn conv_forward(
        &self,
        layer: usize,
        input: &[T],
        (c_in, h, w): (usize, usize, usize),
    ) -> (Vec<T>, (usize, usize, usize)) {
        let (k, s) = (self.config.kernel, self.config.stride);
        let c_out = self.config.conv_channels[layer];
        let (oh, ow) = ((h - k) / s + 1, (w - k) / s + 1);
        let weight = &self.params[2 * layer].data;
        let bias = &self.params[2 * layer + 1].data;
        let mut out = Vec::with_capacity(c_out * oh * ow);
        let mut acc = vec![0.0f64; oh * ow];
        for o in 0..c_out {
            acc.iter_mut().for_each(|a| *a = bias[o].to_f64());
            for c in 0..c_in {
                let plane = &input[c * h * w..(c + 1) * h * w];
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = weight[((o * c_in + c) * k + ky) * k + kx].to_f64();
                        for oy in 0..oh {
                            let row = &plane[(oy * s + ky) * w + kx..];
                            let dst = &mut acc[oy * ow..(oy + 1) * ow];
                            for (ox, a) in dst.iter_mut().enumerate() {
                                *a += wv * row[ox * s].to_f64();
                            }
                        }
                    }
                }
            }
            out.extend(acc.iter().map(|&a| T::from_f64(a.max(0.0))));
        }
        (out, (c_out, oh, ow))
    }

    /// Reverse pass for the trace of an earlier [`Scorer::forward`] call.
    pub fn backward(
        &self,
        trace: &ForwardTrace<T>,
        grad_logits: &[f64],
    ) -> Result<ParameterGradients> {
        if trace.version != self.version {
            return Err(Error::StateError(format!(
                "activation trace is from parameter version {}, scorer is at {}",
                trace.version, self.version
            )));
        }
        if trace.activations.len() != self.config.conv_channels.len() {
            return Err(Error::StateError(
                "activation trace does not match this scorer".into(),
            ));
        }
        let n_classes = self.config.num_classes;
        if grad_logits.len() != n_classes {
            return Err(Error::mismatch(n_classes, grad_logits.len()));
        }
        let mut grads = ParameterGradients::zeros_like(self);
        let n_params = self.params.len();
        let layers = self.config.conv_channels.len();
        let &(c_last, oh, ow) = trace.shapes.last().expect("shapes");

        let (hw, _) = self.head();
        let mut dpooled = vec![0.0; c_last];
        for (n, &g) in grad_logits.iter().enumerate() {
            grads.grads[n_params - 1][n] = g;
            for c in 0..c_last {
                grads.grads[n_params - 2][n * c_last + c] = g * trace.pooled[c];
                dpooled[c] += g * hw[n * c_last + c].to_f64();
            }
        }

        // gradient w.r.t. the pre-activation of the last layer
        let area = (oh * ow) as f64;
        let mut dz: Vec<f64> = trace.activations[layers - 1]
            .iter()
            .enumerate()
            .map(|(i, a)| {
                if a.to_f64() > 0.0 {
                    dpooled[i / (oh * ow)] / area
                } else {
                    0.0
                }
            })
            .collect();

        for layer in (0..layers).rev() {
            let src = if layer == 0 {
                &trace.input
            } else {
                &trace.activations[layer - 1]
            };
            let need_input_grad = layer > 0;
            let din = self.conv_backward(
                layer,
                src,
                trace.shapes[layer],
                trace.shapes[layer + 1],
                &dz,
                &mut grads,
                need_input_grad,
            );
            if need_input_grad {
                dz = din
                    .into_iter()
                    .zip(&trace.activations[layer - 1])
                    .map(|(g, a)| if a.to_f64() > 0.0 { g } else { 0.0 })
                    .collect();
            }
        }
        Ok(grads)
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_backward(
        &self,
        layer: usize,
        input: &[T],
        (c_in, h, w): (usize, usize, usize),
        (c_out, oh, ow): (usize, usize, usize),
        dz: &[f64],
        grads: &mut ParameterGradients,
        need_input_grad: bool,
    ) -> Vec<f64> {
        let (k, s) = (self.config.kernel, self.config.stride);
        let weight = &self.params[2 * layer].data;
        let mut din = if need_input_grad {
            vec![0.0; c_in * h * w]
        } else {
            Vec::new()
        };
        for o in 0..c_out {
            let g_plane = &dz[o * oh * ow..(o + 1) * oh * ow];
            grads.grads[2 * layer + 1][o] = g_plane.iter().sum();
            for c in 0..c_in {
                let plane = &input[c * h * w..(c + 1) * h * w];
                for ky in 0..k {
                    for kx in 0..k {
                        let wi = ((o * c_in + c) * k + ky) * k + kx;
                        let wv = weight[wi].to_f64();
                        let mut dw = 0.0;
                        for oy in 0..oh {
                            let base = (oy * s + ky) * w + kx;
                            let g_row = &g_plane[oy * ow..(oy + 1) * ow];
                            for (ox, &g) in g_row.iter().enumerate() {
                                dw += g * plane[base + ox * s].to_f64();
                            }
                            if need_input_grad {
                                let d_row = &mut din[c * h * w..(c + 1) * h * w];
                                for (ox, &g) in g_row.iter().enumerate() {
                                    d_row[base + ox * s] += g * wv;
                                }
                            }
                        }
                        grads.grads[2 * layer][wi] = dw;
                    }
                }
            }
        }
        din
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub momentum: f64,
    pub weight_decay: f64,
    pub init_lr: f64,
    pub decay_factor: f64,
    pub decay_interval_epochs: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            momentum: 0.9,
            weight_decay: 1e-4,
            init_lr: 1e-2,
            decay_factor: 0.9,
            decay_interval_epochs: 10,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 || self.init_lr < 0.0 {
            return Err(Error::InvalidParameter(
                "momentum must lie in [0, 1), weight decay and learning rate must be >= 0".into(),
            ));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) || self.decay_interval_epochs == 0
        {
            return Err(Error::InvalidParameter(
                "decay factor must lie in (0, 1] and the decay interval must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Step decay: `init_lr * decay_factor^floor(epoch / interval)`.
pub fn lr_at_epoch(opt: &OptimizerConfig, epoch: usize) -> f64 {
    let steps = (epoch / opt.decay_interval_epochs) as i32;
    opt.init_lr * opt.decay_factor.powi(steps)
}

/// Momentum buffers, one per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T: Real = f32> {
    pub velocities: Vec<Vec<T>>,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(scorer: &Scorer<T>) -> Self {
        OptimizerState {
            velocities: scorer
                .params
                .iter()
                .map(|p| vec![T::default(); p.data.len()])
                .collect(),
        }
    }
}

/// Classical momentum with coupled weight decay:
/// `v <- momentum * v + (g + wd * w)`, `w <- w - lr * v`.
pub fn sgd_step<T: Real>(
    scorer: &mut Scorer<T>,
    grads: &ParameterGradients,
    state: &mut OptimizerState<T>,
    lr: f64,
    opt: &OptimizerConfig,
) -> Result<()> {
    if grads.grads.len() != scorer.params.len() {
        return Err(Error::mismatch(scorer.params.len(), grads.grads.len()));
    }
    if state.velocities.len() != scorer.params.len() {
        return Err(Error::mismatch(scorer.params.len(), state.velocities.len()));
    }
    for ((param, g), v) in scorer
        .params
        .iter()
        .zip(&grads.grads)
        .zip(&state.velocities)
    {
        if g.len() != param.data.len() {
            return Err(Error::mismatch(param.data.len(), g.len()));
        }
        if v.len() != param.data.len() {
            return Err(Error::mismatch(param.data.len(), v.len()));
        }
    }
    for ((param, g), v) in scorer
        .params
        .iter_mut()
        .zip(&grads.grads)
        .zip(&mut state.velocities)
    {
        for ((w, &gi), vi) in param.data.iter_mut().zip(g).zip(v.iter_mut()) {
            let wf = w.to_f64();
            let next_v = opt.momentum * vi.to_f64() + gi + opt.weight_decay * wf;
            *vi = T::from_f64(next_v);
            *w = T::from_f64(wf - lr * next_v);
        }
    }
    scorer.version += 1;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::{loss_gradient, patch_term, LossSpec, PatchPrediction};

    fn mini() -> ScorerConfig {
        ScorerConfig {
            conv_channels: vec![2, 3],
            input_min_side: 16,
            ..ScorerConfig::default()
        }
    }

    fn noise_image(side: usize, seed: u64) -> ImageBuffer {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageBuffer::from_fn(side, side, |_, _| [rng.gen(), rng.gen(), rng.gen()]).unwrap()
    }

    fn random_truth(seed: u64) -> RatingDistribution {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w: Vec<f64> = (0..10).map(|_| rng.gen_range(0.05..1.0)).collect();
        let s: f64 = w.iter().sum();
        RatingDistribution::new(w.iter().map(|x| x / s).collect()).unwrap()
    }

    /// Perturbs each parameter of an `f64` scorer and differences the loss.
    fn numeric_gradients(
        scorer: &Scorer<f64>,
        loss: impl Fn(&Scorer<f64>) -> f64,
        h: f64,
    ) -> Vec<f64> {
        let mut probe = scorer.clone();
        let mut out = Vec::new();
        for t in 0..scorer.params.len() {
            for i in 0..scorer.params[t].data.len() {
                let orig = scorer.params[t].data[i];
                probe.params[t].data[i] = orig + h;
                let plus = loss(&probe);
                probe.params[t].data[i] = orig - h;
                let minus = loss(&probe);
                probe.params[t].data[i] = orig;
                out.push((plus - minus) / (2.0 * h));
            }
        }
        out
    }

    fn relative_error(a: &[f64], b: &[f64]) -> f64 {
        let diff = a
            .iter()
            .zip(b)
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            .sqrt();
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        diff / norm(a).max(norm(b)).max(1e-300)
    }

    #[test]
    fn init_is_seeded_with_zero_biases() {
        let cfg = ScorerConfig::default();
        let a: Scorer = init_scorer(&cfg, 7).unwrap();
        let b: Scorer = init_scorer(&cfg, 7).unwrap();
        let c: Scorer = init_scorer(&cfg, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.params, c.params);
        for t in a.parameters().iter().filter(|t| t.name.ends_with(".bias")) {
            assert!(t.data.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn mid_gray_gives_uniform_prediction() {
        let scorer: Scorer = init_scorer(&ScorerConfig::default(), 1).unwrap();
        let img = ImageBuffer::filled(40, 40, [0.5; 3]).unwrap();
        let logits = scorer.logits(&img).unwrap();
        assert!(logits.iter().all(|&z| z == 0.0));
        let d = scorer.predict(&img).unwrap();
        assert!(d.probs().iter().all(|p| (p - 0.1).abs() < 1e-15));
    }

    #[test]
    fn accepts_any_side_above_minimum() {
        let scorer: Scorer = init_scorer(&ScorerConfig::default(), 1).unwrap();
        let a = scorer.logits(&noise_image(299, 1)).unwrap();
        let b = scorer.logits(&noise_image(342, 2)).unwrap();
        assert_eq!(a.len(), 10);
        assert_eq!(b.len(), 10);
        let d = scorer.predict(&noise_image(64, 3)).unwrap();
        assert!((d.probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(matches!(
            scorer.forward(&noise_image(31, 4)),
            Err(Error::InputTooSmall { side: 31, min: 32 })
        ));
    }

    #[test]
    fn constant_patches_are_size_independent() {
        let scorer: Scorer<f64> = init_scorer(&ScorerConfig::default(), 3).unwrap();
        let color = [0.3, 0.7, 0.45];
        let a = scorer
            .logits(&ImageBuffer::filled(40, 40, color).unwrap())
            .unwrap();
        for side in [33, 57, 128, 299] {
            let b = scorer
                .logits(&ImageBuffer::filled(side, side, color).unwrap())
                .unwrap();
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() < 1e-12, "side {side}");
            }
        }
    }

    #[test]
    fn backward_zero_and_linearity() {
        let scorer: Scorer<f64> = init_scorer(&mini(), 5).unwrap();
        let img = noise_image(20, 9);
        let pass = scorer.forward(&img).unwrap();
        let zero = scorer.backward(&pass.trace, &[0.0; 10]).unwrap();
        assert!(zero.flatten().iter().all(|&g| g == 0.0));

        let g1: Vec<f64> = (0..10).map(|i| (i as f64 * 0.37).sin()).collect();
        let g2: Vec<f64> = (0..10).map(|i| (i as f64 * 0.91).cos()).collect();
        let sum: Vec<f64> = g1.iter().zip(&g2).map(|(a, b)| a + b).collect();
        let mut lhs = scorer.backward(&pass.trace, &g1).unwrap();
        lhs.add_assign(&scorer.backward(&pass.trace, &g2).unwrap())
            .unwrap();
        let rhs = scorer.backward(&pass.trace, &sum).unwrap();
        for (a, b) in lhs.flatten().iter().zip(rhs.flatten()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn stale_trace_is_rejected() {
        let mut scorer: Scorer<f64> = init_scorer(&mini(), 5).unwrap();
        let pass = scorer.forward(&noise_image(20, 1)).unwrap();
        let grads = ParameterGradients::zeros_like(&scorer);
        let mut state = OptimizerState::new(&scorer);
        sgd_step(
            &mut scorer,
            &grads,
            &mut state,
            0.1,
            &OptimizerConfig::default(),
        )
        .unwrap();
        assert!(matches!(
            scorer.backward(&pass.trace, &[0.0; 10]),
            Err(Error::StateError(_))
        ));
        assert!(matches!(
            scorer
                .forward(&noise_image(20, 1))
                .and_then(|p| scorer.backward(&p.trace, &[0.0; 3])),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let scorer: Scorer<f64> = init_scorer(&mini(), 21).unwrap();
        let img = noise_image(19, 4);
        let truth = random_truth(2);
        let spec: LossSpec = "ind-emd".parse().unwrap();
        let loss = |s: &Scorer<f64>| {
            let pred = PatchPrediction::from_logits(s.logits(&img).unwrap()).unwrap();
            patch_term(&spec, &pred, &truth).unwrap()
        };
        let pass = scorer.forward(&img).unwrap();
        let pred = PatchPrediction::from_logits(pass.logits.clone()).unwrap();
        let g = loss_gradient(&spec, &pred, &truth).unwrap();
        let analytic = scorer.backward(&pass.trace, &g).unwrap().flatten();
        let numeric = numeric_gradients(&scorer, loss, 1e-6);
        let err = relative_error(&analytic, &numeric);
        assert!(err < 1e-5, "relative error {err}");
    }

    #[test]
    fn sgd_examples() {
        let cfg = mini();
        let mut scorer: Scorer<f64> = init_scorer(&cfg, 1).unwrap();
        let before = scorer.clone();
        let zero = ParameterGradients::zeros_like(&scorer);
        let mut state = OptimizerState::new(&scorer);
        let no_decay = OptimizerConfig {
            weight_decay: 0.0,
            ..OptimizerConfig::default()
        };
        sgd_step(&mut scorer, &zero, &mut state, 0.5, &no_decay).unwrap();
        assert_eq!(scorer.params, before.params);

        let mut grads = ParameterGradients::zeros_like(&scorer);
        grads
            .grads
            .iter_mut()
            .flatten()
            .enumerate()
            .for_each(|(i, g)| *g = (i as f64 * 0.1).sin());
        let opt = OptimizerConfig::default();
        let mut scorer = before.clone();
        let mut state = OptimizerState::new(&scorer);
        sgd_step(&mut scorer, &grads, &mut state, 0.01, &opt).unwrap();
        for ((after, orig), g) in scorer.params.iter().zip(&before.params).zip(&grads.grads) {
            for ((a, w), gi) in after.data.iter().zip(&orig.data).zip(g) {
                assert!((a - (w - 0.01 * (gi + 1e-4 * w))).abs() < 1e-15);
            }
        }

        let mut scorer = before.clone();
        let mut state = OptimizerState::new(&scorer);
        sgd_step(&mut scorer, &grads, &mut state, 0.01, &no_decay).unwrap();
        sgd_step(&mut scorer, &grads, &mut state, 0.01, &no_decay).unwrap();
        for ((after, orig), g) in scorer.params.iter().zip(&before.params).zip(&grads.grads) {
            for ((a, w), gi) in after.data.iter().zip(&orig.data).zip(g) {
                assert!((w - a - 0.01 * gi * 2.9).abs() < 1e-14);
            }
        }

        let short = ParameterGradients {
            grads: vec![vec![0.0]],
        };
        assert!(matches!(
            sgd_step(&mut scorer, &short, &mut state, 0.01, &opt),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn step_decay_schedule() {
        let opt = OptimizerConfig::default();
        assert_eq!(lr_at_epoch(&opt, 0), 1e-2);
        assert!((lr_at_epoch(&opt, 25) - 8.1e-3).abs() < 1e-15);
        let flat = OptimizerConfig {
            decay_factor: 1.0,
            ..opt
        };
        assert!((0..300).all(|e| lr_at_epoch(&flat, e) == 1e-2));
    }

    #[test]
    fn config_validation() {
        assert!(ScorerConfig::default().validate().is_ok());
        let bad = ScorerConfig {
            input_min_side: 8,
            ..ScorerConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = ScorerConfig {
            conv_channels: vec![],
            ..ScorerConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
