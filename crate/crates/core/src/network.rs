//! Layer graph, model builder and the backward/update plumbing that ties the
//! projection layers to the full-precision ones.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{PcnnError, Result};
use crate::layers::{fan_in_uniform, BatchNorm2d, FpConv, GlobalAvgPool, Linear, MaxPool2};
use crate::losses::{self, ProjGrads};
use crate::proj_conv::{LayerCache, ProjConvLayer};
use crate::projection::OmegaNorm;
use crate::tensor::{Kernel4, KernelShape, Shape4, Tensor4};

/// Instrumentation emitted during a training step, in execution order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum StepEvent {
    /// `δ_Ĉ` of a projection layer is available.
    DeltaChat(String),
    GradC(String),
    GradW(String),
    Update(String),
}

/// A projection layer plus its training-time state.
#[derive(Clone, Debug)]
pub struct ProjNode {
    pub layer: ProjConvLayer,
    pub(crate) cache: Option<LayerCache>,
    pub(crate) d_chat: Option<Vec<Kernel4>>,
    pub(crate) grads: Option<ProjGrads>,
}

impl ProjNode {
    pub fn new(layer: ProjConvLayer) -> Self {
        ProjNode {
            layer,
            cache: None,
            d_chat: None,
            grads: None,
        }
    }

    pub fn cache(&self) -> Option<&LayerCache> {
        self.cache.as_ref()
    }

    pub fn d_chat(&self) -> Option<&[Kernel4]> {
        self.d_chat.as_deref()
    }

    pub fn grads(&self) -> Option<&ProjGrads> {
        self.grads.as_ref()
    }

    /// Projection loss of this layer for the cached pass.
    pub fn projection_loss(&self, eta: f64, lambda: f64) -> Result<f64> {
        let (cache, d) = self.cache_and_delta()?;
        losses::layer_projection_loss(&self.layer, cache, d, eta, lambda)
    }

    fn cache_and_delta(&self) -> Result<(&LayerCache, &[Kernel4])> {
        match (&self.cache, &self.d_chat) {
            (Some(c), Some(d)) => Ok((c, d)),
            _ => Err(PcnnError::MissingCache(self.layer.name.clone())),
        }
    }

    /// Compute `δ_C` and `δ_W` from the cached pass. With `projection_loss`
    /// false the projection-loss terms are not evaluated at all.
    pub fn compute_grads(&mut self, eta: f64, lambda: f64, projection_loss: bool) -> Result<&ProjGrads> {
        let (cache, d) = self.cache_and_delta()?;
        let (d_c, d_w) = if projection_loss {
            (
                losses::grad_c(&self.layer, cache, d, eta, lambda)?,
                losses::grad_w(&self.layer, cache, d, eta, lambda)?,
            )
        } else {
            (
                losses::grad_c_task(&self.layer, cache, d)?,
                losses::grad_w_task(&self.layer, cache, d)?,
            )
        };
        let grads = ProjGrads {
            d_chat: d.to_vec(),
            d_c,
            d_w,
        };
        Ok(self.grads.insert(grads))
    }

    pub fn clear(&mut self) {
        self.cache = None;
        self.d_chat = None;
        self.grads = None;
    }
}

#[derive(Clone, Debug)]
pub struct Residual {
    pub name: String,
    pub body: Vec<Layer>,
    /// `None` means identity.
    pub shortcut: Option<Box<Layer>>,
}

#[derive(Clone, Debug)]
pub enum Layer {
    Conv(FpConv),
    Proj(ProjNode),
    BatchNorm(BatchNorm2d),
    MaxPool(MaxPool2),
    GlobalAvgPool(GlobalAvgPool),
    Linear(Linear),
    Residual(Residual),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Full-precision convolution or linear weights.
    Weight,
    Bias,
    BnScale,
    BnShift,
    /// Full-precision kernels `C` of a projection layer.
    Kernel,
    /// Projection matrices `W` of a projection layer.
    Projection,
}

pub struct ParamMut<'a> {
    pub layer: &'a str,
    pub kind: ParamKind,
    pub value: &'a mut [f32],
    pub grad: &'a [f32],
}

fn sum_tensors(a: &Tensor4, b: &Tensor4) -> Result<Tensor4> {
    if a.shape() != b.shape() {
        return Err(PcnnError::shape("residual add", a.shape(), b.shape()));
    }
    Tensor4::new(a.shape(), a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect())
}

impl Layer {
    pub fn name(&self) -> &str {
        match self {
            Layer::Conv(l) => &l.name,
            Layer::Proj(l) => &l.layer.name,
            Layer::BatchNorm(l) => &l.name,
            Layer::MaxPool(l) => &l.name,
            Layer::GlobalAvgPool(l) => &l.name,
            Layer::Linear(l) => &l.name,
            Layer::Residual(l) => &l.name,
        }
    }

    pub fn forward_eval(&self, x: &Tensor4) -> Result<Tensor4> {
        match self {
            Layer::Conv(l) => l.forward_eval(x),
            Layer::Proj(l) => l.layer.forward_eval(x),
            Layer::BatchNorm(l) => l.forward_eval(x),
            Layer::MaxPool(l) => l.forward_eval(x),
            Layer::GlobalAvgPool(l) => l.forward_eval(x),
            Layer::Linear(l) => l.forward_eval(x),
            Layer::Residual(r) => {
                let mut y = x.clone();
                for l in &r.body {
                    y = l.forward_eval(&y)?;
                }
                let s = match &r.shortcut {
                    Some(l) => l.forward_eval(x)?,
                    None => x.clone(),
                };
                sum_tensors(&y, &s)
            }
        }
    }

    pub fn forward_train(&mut self, x: &Tensor4) -> Result<Tensor4> {
        match self {
            Layer::Conv(l) => l.forward_train(x),
            Layer::Proj(n) => {
                let (y, cache) = n.layer.forward(x)?;
                n.cache = Some(cache);
                n.d_chat = None;
                n.grads = None;
                Ok(y)
            }
            Layer::BatchNorm(l) => l.forward_train(x),
            Layer::MaxPool(l) => l.forward_train(x),
            Layer::GlobalAvgPool(l) => l.forward_train(x),
            Layer::Linear(l) => l.forward_train(x),
            Layer::Residual(r) => {
                let mut y = x.clone();
                for l in &mut r.body {
                    y = l.forward_train(&y)?;
                }
                let s = match &mut r.shortcut {
                    Some(l) => l.forward_train(x)?,
                    None => x.clone(),
                };
                sum_tensors(&y, &s)
            }
        }
    }

    fn backward(&mut self, grad: &Tensor4, on_event: &mut dyn FnMut(StepEvent)) -> Result<Tensor4> {
        match self {
            Layer::Conv(l) => l.backward(grad),
            Layer::Proj(n) => {
                let cache = n.cache.as_ref().ok_or_else(|| PcnnError::MissingCache(n.layer.name.clone()))?;
                let (gx, d_chat) = n.layer.backward(cache, grad)?;
                n.d_chat = Some(d_chat);
                on_event(StepEvent::DeltaChat(n.layer.name.clone()));
                Ok(gx)
            }
            Layer::BatchNorm(l) => l.backward(grad),
            Layer::MaxPool(l) => l.backward(grad),
            Layer::GlobalAvgPool(l) => l.backward(grad),
            Layer::Linear(l) => l.backward(grad),
            Layer::Residual(r) => {
                let mut g = grad.clone();
                for l in r.body.iter_mut().rev() {
                    g = l.backward(&g, on_event)?;
                }
                let gs = match &mut r.shortcut {
                    Some(l) => l.backward(grad, on_event)?,
                    None => grad.clone(),
                };
                sum_tensors(&g, &gs)
            }
        }
    }

    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Layer)) {
        f(self);
        if let Layer::Residual(r) = self {
            for l in &r.body {
                l.visit(f);
            }
            if let Some(s) = &r.shortcut {
                s.visit(f);
            }
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Layer)) {
        f(self);
        if let Layer::Residual(r) = self {
            for l in &mut r.body {
                l.visit_mut(f);
            }
            if let Some(s) = &mut r.shortcut {
                s.visit_mut(f);
            }
        }
    }

    /// Stored weight count of the inference model (quantized `D` for
    /// projection layers, batch-norm affine terms included).
    pub fn own_inference_params(&self) -> usize {
        match self {
            Layer::Conv(l) => l.weight.shape().len(),
            Layer::Proj(n) => n.layer.inference_params(),
            Layer::BatchNorm(l) => 2 * l.channels(),
            Layer::Linear(l) => l.weight.len() + l.bias.len(),
            Layer::MaxPool(_) | Layer::GlobalAvgPool(_) | Layer::Residual(_) => 0,
        }
    }
}

/// Architecture and shape parameters of a model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub arch: String,
    /// Base channel count: `16` in the small CNN, `i` for the wide residual net.
    pub width: usize,
    pub j: usize,
    pub input: (usize, usize, usize),
    pub classes: usize,
    pub binarize_activations: bool,
    pub first_last_full_precision: bool,
    pub omega_norm: OmegaNorm,
}

impl ModelSpec {
    pub fn small_cnn(j: usize) -> Self {
        ModelSpec {
            arch: "small-cnn".into(),
            width: 16,
            j,
            input: (1, 28, 28),
            classes: 10,
            binarize_activations: true,
            first_last_full_precision: true,
            omega_norm: OmegaNorm::MeanAbs,
        }
    }

    pub fn wrn22(width: usize, j: usize) -> Self {
        ModelSpec {
            arch: "wrn22-like".into(),
            width,
            j,
            input: (3, 32, 32),
            classes: 10,
            binarize_activations: true,
            first_last_full_precision: true,
            omega_norm: OmegaNorm::MeanAbs,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Network {
    pub spec: ModelSpec,
    pub layers: Vec<Layer>,
}

struct Builder<'r> {
    rng: &'r mut ChaCha8Rng,
    spec: &'r ModelSpec,
}

impl Builder<'_> {
    fn proj(&mut self, name: String, out_base: usize, in_base: usize, k: usize, stride: usize, pad: usize, j: usize, binarize: bool) -> Layer {
        let shape = KernelShape::new(out_base, in_base, k, k);
        let c = fan_in_uniform(self.rng, shape.len(), shape.per_kernel());
        let w = (0..j * k * k).map(|_| self.rng.gen_range(0.9f32..1.1)).collect();
        let mut layer = ProjConvLayer::new(name, Kernel4::new(shape, c).expect("init length"), w, stride, pad, binarize)
            .expect("valid projection layer");
        layer.omega_norm = self.spec.omega_norm;
        Layer::Proj(ProjNode::new(layer))
    }

    /// First layer: full precision unless overridden, producing `width * J` channels.
    fn stem(&mut self, width: usize) -> Result<Layer> {
        let (c_in, _, _) = self.spec.input;
        let j = self.spec.j;
        if self.spec.first_last_full_precision {
            Ok(Layer::Conv(FpConv::init("conv1", KernelShape::new(width * j, c_in, 3, 3), 1, 1, self.rng)))
        } else {
            if c_in % j != 0 {
                return Err(PcnnError::Config(format!(
                    "binarized first layer needs input channels ({c_in}) divisible by J ({j})"
                )));
            }
            Ok(self.proj("conv1".into(), width, c_in / j, 3, 1, 1, j, false))
        }
    }

    /// Classifier over `features` channels of `h x w` maps.
    fn head(&mut self, features: usize, h: usize, w: usize) -> Layer {
        let classes = self.spec.classes;
        if self.spec.first_last_full_precision {
            Layer::Linear(Linear::init("fc", classes, features * h * w, self.rng))
        } else {
            let shape = KernelShape::new(classes, features, h, w);
            let c = fan_in_uniform(self.rng, shape.len(), shape.per_kernel());
            let wts = (0..h * w).map(|_| self.rng.gen_range(0.9f32..1.1)).collect();
            let mut layer = ProjConvLayer::new("fc", Kernel4::new(shape, c).expect("init length"), wts, 1, 0, self.spec.binarize_activations)
                .expect("valid projection layer");
            layer.omega_norm = self.spec.omega_norm;
            Layer::Proj(ProjNode::new(layer))
        }
    }
}

impl Network {
    pub fn input_shape(&self, n: usize) -> Shape4 {
        let (c, h, w) = self.spec.input;
        Shape4::new(n, c, h, w)
    }

    pub fn forward_eval(&self, x: &Tensor4) -> Result<Tensor4> {
        let mut y = x.clone();
        for l in &self.layers {
            y = l.forward_eval(&y)?;
        }
        Ok(y)
    }

    pub fn forward_train(&mut self, x: &Tensor4) -> Result<Tensor4> {
        let mut y = x.clone();
        for l in &mut self.layers {
            y = l.forward_train(&y)?;
        }
        Ok(y)
    }

    /// Back-propagate `∂L_S/∂logits` through every layer, leaving parameter
    /// gradients of full-precision layers and `δ_Ĉ` of projection layers in
    /// place.
    pub fn backward(&mut self, grad_logits: &Tensor4, on_event: &mut dyn FnMut(StepEvent)) -> Result<Tensor4> {
        let mut g = grad_logits.clone();
        for l in self.layers.iter_mut().rev() {
            g = l.backward(&g, on_event)?;
        }
        Ok(g)
    }

    pub fn layers_flat(&self) -> Vec<&Layer> {
        let mut out = Vec::new();
        for l in &self.layers {
            l.visit(&mut |x| out.push(x));
        }
        out
    }

    pub fn proj_nodes(&self) -> Vec<&ProjNode> {
        self.layers_flat()
            .into_iter()
            .filter_map(|l| match l {
                Layer::Proj(n) => Some(n),
                _ => None,
            })
            .collect()
    }

    pub fn proj_nodes_mut(&mut self) -> Vec<&mut ProjNode> {
        let mut out: Vec<*mut ProjNode> = Vec::new();
        for l in &mut self.layers {
            l.visit_mut(&mut |x| {
                if let Layer::Proj(n) = x {
                    out.push(n as *mut ProjNode);
                }
            });
        }
        // SAFETY: each pointer refers to a distinct node of the tree, which
        // stays mutably borrowed by `self` for the returned lifetime.
        out.into_iter().map(|p| unsafe { &mut *p }).collect()
    }

    pub fn proj_layer(&self, name: &str) -> Result<&ProjConvLayer> {
        self.proj_nodes()
            .into_iter()
            .map(|n| &n.layer)
            .find(|l| l.name == name)
            .ok_or_else(|| PcnnError::UnknownLayer(name.to_string()))
    }

    /// The first layer whose kernels are binarized.
    pub fn first_binarized(&self) -> Option<&ProjConvLayer> {
        self.proj_nodes().into_iter().map(|n| &n.layer).next()
    }

    /// Parameter count of the deployed model: quantized kernels `D`,
    /// full-precision layers and batch-norm affine terms.
    pub fn param_count(&self) -> usize {
        self.layers_flat().iter().map(|l| l.own_inference_params()).sum()
    }

    /// Values updated by the optimizer (`C`, `W` and full-precision parameters).
    pub fn trainable_param_count(&self) -> usize {
        self.layers_flat()
            .iter()
            .map(|l| match l {
                Layer::Proj(n) => n.layer.trainable_params(),
                other => other.own_inference_params(),
            })
            .sum()
    }

    /// Visit every full-precision parameter (not `C`/`W`) with its gradient.
    pub fn for_each_fp_param(&mut self, f: &mut dyn FnMut(ParamMut<'_>)) {
        for l in &mut self.layers {
            l.visit_mut(&mut |x| match x {
                Layer::Conv(c) => f(ParamMut {
                    layer: &c.name,
                    kind: ParamKind::Weight,
                    value: c.weight.data_mut(),
                    grad: c.grad.data(),
                }),
                Layer::BatchNorm(b) => {
                    f(ParamMut {
                        layer: &b.name,
                        kind: ParamKind::BnScale,
                        value: &mut b.gamma,
                        grad: &b.grad_gamma,
                    });
                    f(ParamMut {
                        layer: &b.name,
                        kind: ParamKind::BnShift,
                        value: &mut b.beta,
                        grad: &b.grad_beta,
                    });
                }
                Layer::Linear(lin) => {
                    f(ParamMut {
                        layer: &lin.name,
                        kind: ParamKind::Weight,
                        value: &mut lin.weight,
                        grad: &lin.grad_weight,
                    });
                    f(ParamMut {
                        layer: &lin.name,
                        kind: ParamKind::Bias,
                        value: &mut lin.bias,
                        grad: &lin.grad_bias,
                    });
                }
                _ => {}
            });
        }
    }

    /// Name of the first top-level layer whose inference output on `x` is
    /// non-finite (`"input"` if `x` itself is).
    pub fn first_non_finite_output(&self, x: &Tensor4) -> Option<String> {
        if !x.is_finite() {
            return Some("input".into());
        }
        let mut y = x.clone();
        for l in &self.layers {
            y = l.forward_eval(&y).ok()?;
            if !y.is_finite() {
                return Some(l.name().to_string());
            }
        }
        None
    }

    /// Name of the first layer holding a non-finite parameter.
    pub fn first_non_finite(&self) -> Option<String> {
        self.layers_flat().into_iter().find_map(|l| {
            let bad = match l {
                Layer::Conv(c) => c.weight.data().iter().any(|v| !v.is_finite()),
                Layer::Proj(n) => {
                    n.layer.kernels().data().iter().chain(n.layer.projections()).any(|v| !v.is_finite())
                }
                Layer::BatchNorm(b) => b
                    .gamma
                    .iter()
                    .chain(&b.beta)
                    .chain(&b.running_mean)
                    .chain(&b.running_var)
                    .any(|v| !v.is_finite()),
                Layer::Linear(lin) => lin.weight.iter().chain(&lin.bias).any(|v| !v.is_finite()),
                _ => false,
            };
            bad.then(|| l.name().to_string())
        })
    }
}

/// Build a freshly initialized network.
///
/// `small-cnn`: 3x3 conv → BN → pool → proj-conv → BN → pool → proj-conv →
/// BN → classifier. `wrn22-like`: a depth-22, widening-factor-1 residual
/// network with stages of `width`, `2*width`, `4*width` channels, three
/// two-layer blocks per stage, 1x1 projection shortcuts where the shape
/// changes, then BN → global average pool → classifier.
pub fn build_model(spec: &ModelSpec, seed: u64) -> Result<Network> {
    if spec.j == 0 || spec.width == 0 || spec.classes == 0 {
        return Err(PcnnError::Config(format!("invalid model spec {spec:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = Builder { rng: &mut rng, spec };
    let j = spec.j;
    let w = spec.width;
    let bin = spec.binarize_activations;
    let (_, h, wd) = spec.input;
    let layers = match spec.arch.as_str() {
        "small-cnn" => {
            if h < 4 || wd < 4 {
                return Err(PcnnError::Config(format!("small-cnn input too small: {h}x{wd}")));
            }
            vec![
                b.stem(w)?,
                Layer::BatchNorm(BatchNorm2d::new("bn1", w * j)),
                Layer::MaxPool(MaxPool2::new("pool1", 2)),
                b.proj("proj1".into(), w, w, 3, 1, 1, j, bin),
                Layer::BatchNorm(BatchNorm2d::new("bn2", w * j)),
                Layer::MaxPool(MaxPool2::new("pool2", 2)),
                b.proj("proj2".into(), w, w, 3, 1, 1, j, bin),
                Layer::BatchNorm(BatchNorm2d::new("bn3", w * j)),
                b.head(w * j, h / 4, wd / 4),
            ]
        }
        "wrn22-like" => {
            let mut layers = vec![b.stem(w)?];
            let mut in_ch = w;
            let mut spatial = (h, wd);
            for (stage, (&out_ch, &stride)) in [w, 2 * w, 4 * w].iter().zip(&[1usize, 2, 2]).enumerate() {
                for block in 0..3 {
                    let s = if block == 0 { stride } else { 1 };
                    let name = format!("stage{}.block{}", stage + 1, block);
                    let body = vec![
                        Layer::BatchNorm(BatchNorm2d::new(format!("{name}.bn_a"), in_ch * j)),
                        b.proj(format!("{name}.proj_a"), out_ch, in_ch, 3, s, 1, j, bin),
                        Layer::BatchNorm(BatchNorm2d::new(format!("{name}.bn_b"), out_ch * j)),
                        b.proj(format!("{name}.proj_b"), out_ch, out_ch, 3, 1, 1, j, bin),
                    ];
                    let shortcut = (s != 1 || in_ch != out_ch)
                        .then(|| Box::new(b.proj(format!("{name}.shortcut"), out_ch, in_ch, 1, s, 0, j, false)));
                    layers.push(Layer::Residual(Residual { name, body, shortcut }));
                    if s == 2 {
                        spatial = (spatial.0.div_ceil(2), spatial.1.div_ceil(2));
                    }
                    in_ch = out_ch;
                }
            }
            layers.push(Layer::BatchNorm(BatchNorm2d::new("bn_final", in_ch * j)));
            layers.push(Layer::GlobalAvgPool(GlobalAvgPool::new("gap")));
            layers.push(b.head(in_ch * j, 1, 1));
            layers
        }
        other => return Err(PcnnError::UnknownArch(other.to_string())),
    };
    Ok(Network {
        spec: spec.clone(),
        layers,
    })
}
