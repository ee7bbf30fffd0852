//! Feature extractor and fully connected reductor (FCR).
//!
//! The model is a stack of dense layers over flattened inputs. All layers but
//! the last form the backbone `f(·)` producing the intermediate feature
//! `θ_a ∈ R^{d_a}`; the last layer is the FCR, projecting to the prototype
//! feature `θ_p ∈ R^{d_p}`.
//!
//! Gradients are computed analytically through a [`GradientTape`] that caches
//! the inputs and pre-activations of each recorded layer.

use std::fs;
use std::path::Path;

use rand::Rng;

use crate::error::{shape, Error, Result};
use crate::io_util::{fingerprint, write_file, ByteReader};
use crate::numerics::{dot, Matrix};

const PARAM_MAGIC: &[u8; 4] = b"OFSC";
const PARAM_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
}

impl Activation {
    fn code(self) -> u8 {
        match self {
            Activation::Identity => 0,
            Activation::Relu => 1,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Activation::Identity),
            1 => Some(Activation::Relu),
            _ => None,
        }
    }

    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Identity => z,
            Activation::Relu => z.max(0.0),
        }
    }

    #[inline]
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Identity => "identity",
            Activation::Relu => "relu",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "identity" => Some(Activation::Identity),
            "relu" => Some(Activation::Relu),
            _ => None,
        }
    }
}

/// Dense layer `y = act(W x + b)` with `W` stored as `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn new(weight: Matrix, bias: Vec<f64>, activation: Activation) -> Result<Self> {
        if bias.len() != weight.rows() {
            return Err(shape(format!(
                "bias of length {} for layer with {} outputs",
                bias.len(),
                weight.rows()
            )));
        }
        Ok(Self {
            weight,
            bias,
            activation,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    fn pre_activation(&self, x: &[f64]) -> Vec<f64> {
        (0..self.out_dim())
            .map(|r| dot(self.weight.row(r), x) + self.bias[r])
            .collect()
    }
}

/// Shape of a desk-scale model.
#[derive(Debug, Clone, PartialEq)]
pub struct Architecture {
    pub input_dim: usize,
    /// Widths of ReLU hidden layers between the input and `θ_a`.
    pub hidden: Vec<usize>,
    pub d_a: usize,
    pub d_p: usize,
    pub fcr_activation: Activation,
}

/// The reference backbones and the dimensions they feed to the FCR.
///
/// The desk-scale model does not reproduce these networks; the table only
/// documents which reference configuration a run stands in for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackboneVariant {
    MobileNetV2,
    MobileNetV2X2,
    MobileNetV2X4,
    ResNet12,
}

impl BackboneVariant {
    pub fn name(self) -> &'static str {
        match self {
            BackboneVariant::MobileNetV2 => "MobileNetV2",
            BackboneVariant::MobileNetV2X2 => "MobileNetV2_x2",
            BackboneVariant::MobileNetV2X4 => "MobileNetV2_x4",
            BackboneVariant::ResNet12 => "ResNet12",
        }
    }

    /// Convolution stride per inverted residual block; empty for ResNet12.
    pub fn strides(self) -> &'static [u8] {
        match self {
            BackboneVariant::MobileNetV2 => &[1, 2, 2, 2, 1, 2, 1],
            BackboneVariant::MobileNetV2X2 => &[1, 2, 2, 2, 1, 1, 1],
            BackboneVariant::MobileNetV2X4 => &[1, 2, 2, 1, 1, 1, 1],
            BackboneVariant::ResNet12 => &[],
        }
    }

    pub fn d_a(self) -> usize {
        match self {
            BackboneVariant::ResNet12 => 640,
            _ => 1280,
        }
    }

    pub fn d_p(self) -> usize {
        match self {
            BackboneVariant::ResNet12 => 512,
            _ => 256,
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [
            BackboneVariant::MobileNetV2,
            BackboneVariant::MobileNetV2X2,
            BackboneVariant::MobileNetV2X4,
            BackboneVariant::ResNet12,
        ]
        .into_iter()
        .find(|v| v.name().eq_ignore_ascii_case(s))
    }
}

/// Weights and biases of backbone and FCR. The last layer is the FCR.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    layers: Vec<Layer>,
}

/// Which layers `backward` walks through.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackwardScope {
    /// Every recorded layer down to the input.
    Full,
    /// Only the FCR; backbone buffers are never touched.
    FcrOnly,
}

/// The two feature vectors produced for one input.
#[derive(Debug, Clone, PartialEq)]
pub struct Features {
    pub activation: Vec<f64>,
    pub projection: Vec<f64>,
}

/// Anything that maps an input to `(θ_a, θ_p)` without learning.
pub trait FeatureExtractor {
    fn input_dim(&self) -> usize;
    fn d_a(&self) -> usize;
    fn d_p(&self) -> usize;
    fn extract(&self, x: &[f64]) -> Result<Features>;
}

impl ModelParams {
    /// Wraps explicit layers. Needs at least one backbone layer and the FCR,
    /// with consecutive shapes chaining.
    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.len() < 2 {
            return Err(shape("model needs at least one backbone layer and an FCR"));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(shape(format!(
                    "layer {i} outputs {} but layer {} expects {}",
                    pair[0].out_dim(),
                    i + 1,
                    pair[1].in_dim()
                )));
            }
        }
        Ok(Self { layers })
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init<R: Rng + ?Sized>(arch: &Architecture, rng: &mut R) -> Result<Self> {
        if arch.d_p >= arch.d_a {
            return Err(Error::InvalidConfig(format!(
                "d_p ({}) must be smaller than d_a ({})",
                arch.d_p, arch.d_a
            )));
        }
        if arch.input_dim == 0 || arch.d_p == 0 || arch.hidden.contains(&0) {
            return Err(Error::InvalidConfig("layer widths must be positive".into()));
        }
        let mut dims = vec![arch.input_dim];
        dims.extend_from_slice(&arch.hidden);
        dims.push(arch.d_a);
        dims.push(arch.d_p);
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let (fan_in, fan_out) = (dims[i], dims[i + 1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let data = (0..fan_in * fan_out)
                    .map(|_| rng.random_range(-limit..=limit))
                    .collect();
                let activation = if i + 1 == n {
                    arch.fcr_activation
                } else {
                    Activation::Relu
                };
                Layer::new(Matrix::new(fan_out, fan_in, data)?, vec![0.0; fan_out], activation)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_layers(layers)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Index of the FCR layer; everything below it is backbone.
    pub fn split(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn backbone_layers(&self) -> &[Layer] {
        &self.layers[..self.split()]
    }

    pub fn fcr(&self) -> &Layer {
        &self.layers[self.split()]
    }

    pub fn fcr_mut(&mut self) -> &mut Layer {
        let s = self.split();
        &mut self.layers[s]
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn d_a(&self) -> usize {
        self.fcr().in_dim()
    }

    pub fn d_p(&self) -> usize {
        self.fcr().out_dim()
    }

    /// Layer shapes as `(rows, cols)` pairs.
    pub fn shapes(&self) -> Vec<(usize, usize)> {
        self.layers.iter().map(|l| (l.out_dim(), l.in_dim())).collect()
    }

    pub fn backbone_fingerprint(&self) -> u64 {
        layers_fingerprint(self.backbone_layers())
    }

    pub fn fcr_fingerprint(&self) -> u64 {
        layers_fingerprint(std::slice::from_ref(self.fcr()))
    }

    fn run_layers(
        &self,
        range: std::ops::Range<usize>,
        x: &[f64],
        mut tape: Option<&mut GradientTape>,
    ) -> Result<Vec<f64>> {
        if let Some(t) = tape.as_deref() {
            t.check_matches(self)?;
        }
        let mut cur = x.to_vec();
        for i in range {
            let layer = &self.layers[i];
            if cur.len() != layer.in_dim() {
                return Err(shape(format!(
                    "layer {i} expects input of length {}, got {}",
                    layer.in_dim(),
                    cur.len()
                )));
            }
            let pre = layer.pre_activation(&cur);
            let out = pre.iter().map(|&z| layer.activation.apply(z)).collect();
            if let Some(t) = tape.as_deref_mut() {
                t.cache[i] = Some(LayerCache { input: cur, pre });
            }
            cur = out;
        }
        Ok(cur)
    }

    /// `θ_a = f(x)`. Records activations when a tape is attached.
    pub fn forward_backbone(&self, x: &[f64], tape: Option<&mut GradientTape>) -> Result<Vec<f64>> {
        self.run_layers(0..self.split(), x, tape)
    }

    /// `θ_p = FCR(θ_a)`.
    pub fn forward_fcr(&self, theta_a: &[f64], tape: Option<&mut GradientTape>) -> Result<Vec<f64>> {
        let s = self.split();
        self.run_layers(s..s + 1, theta_a, tape)
    }

    pub fn forward(&self, x: &[f64], mut tape: Option<&mut GradientTape>) -> Result<Features> {
        let activation = self.forward_backbone(x, tape.as_deref_mut())?;
        let projection = self.forward_fcr(&activation, tape)?;
        Ok(Features {
            activation,
            projection,
        })
    }

    /// Back-propagates `upstream` (the gradient w.r.t. the output of the
    /// highest recorded layer) and accumulates into `tape.grads`.
    ///
    /// The recorded forward is consumed. With [`BackwardScope::FcrOnly`] the
    /// walk stops at the FCR input and backbone buffers are left untouched.
    pub fn backward(&self, tape: &mut GradientTape, upstream: &[f64], scope: BackwardScope) -> Result<()> {
        tape.check_matches(self)?;
        let top = tape
            .cache
            .iter()
            .rposition(Option::is_some)
            .ok_or(Error::NoForwardRecorded)?;
        let bottom = match scope {
            BackwardScope::Full => 0,
            BackwardScope::FcrOnly => {
                if top != self.split() {
                    return Err(shape("FCR-only backward needs the FCR forward on the tape"));
                }
                self.split()
            }
        };
        if upstream.len() != self.layers[top].out_dim() {
            return Err(shape(format!(
                "upstream gradient of length {} for layer with {} outputs",
                upstream.len(),
                self.layers[top].out_dim()
            )));
        }
        let mut grad = upstream.to_vec();
        for i in (bottom..=top).rev() {
            let cache = tape.cache[i].take().ok_or(Error::NoForwardRecorded)?;
            let layer = &self.layers[i];
            let delta: Vec<f64> = grad
                .iter()
                .zip(&cache.pre)
                .map(|(&g, &z)| g * layer.activation.derivative(z))
                .collect();
            let slot = &mut tape.grads.layers[i];
            slot.weight.add_outer(&delta, &cache.input, 1.0);
            for (b, d) in slot.bias.iter_mut().zip(&delta) {
                *b += d;
            }
            grad = layer.weight.matvec_transposed(&delta)?;
        }
        tape.cache.iter_mut().for_each(|c| *c = None);
        tape.input_grad = Some(grad);
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(PARAM_MAGIC);
        out.extend_from_slice(&PARAM_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        for l in &self.layers {
            out.extend_from_slice(&(l.out_dim() as u32).to_le_bytes());
            out.extend_from_slice(&(l.in_dim() as u32).to_le_bytes());
            out.push(l.activation.code());
        }
        for l in &self.layers {
            for v in l.weight.data().iter().chain(&l.bias) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |what: &str| Error::FormatVersionMismatch(format!("parameter file: {what}"));
        let mut r = ByteReader::new(bytes);
        if r.take(4) != Some(PARAM_MAGIC.as_slice()) {
            return Err(bad("bad magic"));
        }
        let version = r.u32().ok_or_else(|| bad("truncated header"))?;
        if version != PARAM_VERSION {
            return Err(bad(&format!("version {version}, expected {PARAM_VERSION}")));
        }
        let count = r.u32().ok_or_else(|| bad("truncated header"))? as usize;
        let mut specs = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let rows = r.u32().ok_or_else(|| bad("truncated header"))? as usize;
            let cols = r.u32().ok_or_else(|| bad("truncated header"))? as usize;
            let act = r.u8().ok_or_else(|| bad("truncated header"))?;
            let act = Activation::from_code(act).ok_or_else(|| bad("unknown activation code"))?;
            specs.push((rows, cols, act));
        }
        let mut layers = Vec::with_capacity(specs.len());
        for (rows, cols, act) in specs {
            let mut read_n = |n: usize| -> Result<Vec<f64>> {
                (0..n)
                    .map(|_| r.f64().ok_or_else(|| bad("truncated payload")))
                    .collect()
            };
            let weight = read_n(rows * cols)?;
            let bias = read_n(rows)?;
            let weight = Matrix::new(rows, cols, weight).map_err(|e| bad(&e.to_string()))?;
            layers.push(Layer::new(weight, bias, act)?);
        }
        if r.remaining() != 0 {
            return Err(bad("trailing bytes"));
        }
        Self::from_layers(layers).map_err(|e| bad(&e.to_string()))
    }
}

fn layers_fingerprint(layers: &[Layer]) -> u64 {
    fingerprint(
        layers
            .iter()
            .flat_map(|l| l.weight.data().iter().chain(&l.bias).copied()),
    )
}

impl FeatureExtractor for ModelParams {
    fn input_dim(&self) -> usize {
        ModelParams::input_dim(self)
    }

    fn d_a(&self) -> usize {
        ModelParams::d_a(self)
    }

    fn d_p(&self) -> usize {
        ModelParams::d_p(self)
    }

    fn extract(&self, x: &[f64]) -> Result<Features> {
        self.forward(x, None)
    }
}

#[derive(Debug, Clone)]
struct LayerCache {
    input: Vec<f64>,
    pre: Vec<f64>,
}

/// Gradient buffers shaped like a [`ModelParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGrad>,
}

impl Gradients {
    pub fn zeros_like(params: &ModelParams) -> Self {
        Self {
            layers: params
                .layers
                .iter()
                .map(|l| LayerGrad {
                    weight: Matrix::zeros(l.out_dim(), l.in_dim()),
                    bias: vec![0.0; l.out_dim()],
                })
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.weight.data_mut().iter_mut().zip(b.weight.data()) {
                *x += y;
            }
            for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for l in &mut self.layers {
            l.weight.data_mut().iter_mut().for_each(|v| *v *= factor);
            l.bias.iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn fill_zero(&mut self) {
        for l in &mut self.layers {
            l.weight.data_mut().iter_mut().for_each(|v| *v = 0.0);
            l.bias.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Fingerprint of the buffers of layers `range`.
    pub fn fingerprint(&self, range: std::ops::Range<usize>) -> u64 {
        fingerprint(
            self.layers[range]
                .iter()
                .flat_map(|l| l.weight.data().iter().chain(&l.bias).copied()),
        )
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.data().iter().chain(&l.bias).all(|v| v.is_finite()))
    }
}

/// Cached forward activations plus accumulated gradient buffers.
#[derive(Debug, Clone)]
pub struct GradientTape {
    cache: Vec<Option<LayerCache>>,
    pub grads: Gradients,
    input_grad: Option<Vec<f64>>,
}

impl GradientTape {
    pub fn new(params: &ModelParams) -> Self {
        Self {
            cache: vec![None; params.layers.len()],
            grads: Gradients::zeros_like(params),
            input_grad: None,
        }
    }

    /// Gradient w.r.t. the input of the lowest layer walked by the last
    /// `backward`.
    pub fn input_grad(&self) -> Option<&[f64]> {
        self.input_grad.as_deref()
    }

    pub fn has_record(&self) -> bool {
        self.cache.iter().any(Option::is_some)
    }

    pub fn zero_grad(&mut self) {
        self.grads.fill_zero();
        self.input_grad = None;
    }

    fn check_matches(&self, params: &ModelParams) -> Result<()> {
        let ok = self.grads.layers.len() == params.layers.len()
            && self
                .grads
                .layers
                .iter()
                .zip(&params.layers)
                .all(|(g, l)| g.weight.rows() == l.out_dim() && g.weight.cols() == l.in_dim());
        if ok {
            Ok(())
        } else {
            Err(shape("gradient tape does not match model shapes"))
        }
    }
}

/// `w ← w − lr·g` on every layer.
pub fn sgd_step(params: &mut ModelParams, grads: &Gradients, lr: f64) {
    sgd_step_layers(params, grads, lr, 0..params.layers.len());
}

/// `w ← w − lr·g` on the layers in `range` only.
pub fn sgd_step_layers(params: &mut ModelParams, grads: &Gradients, lr: f64, range: std::ops::Range<usize>) {
    for i in range {
        let (layer, g) = (&mut params.layers[i], &grads.layers[i]);
        for (w, d) in layer.weight.data_mut().iter_mut().zip(g.weight.data()) {
            *w -= lr * d;
        }
        for (b, d) in layer.bias.iter_mut().zip(&g.bias) {
            *b -= lr * d;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn layer(rows: usize, cols: usize, w: Vec<f64>, b: Vec<f64>, act: Activation) -> Layer {
        Layer::new(Matrix::new(rows, cols, w).unwrap(), b, act).unwrap()
    }

    fn identity_model(n: usize) -> ModelParams {
        ModelParams::from_layers(vec![
            Layer::new(Matrix::identity(n), vec![0.0; n], Activation::Identity).unwrap(),
            Layer::new(Matrix::identity(n), vec![0.0; n], Activation::Identity).unwrap(),
        ])
        .unwrap()
    }

    fn random_model(seed: u64) -> ModelParams {
        let arch = Architecture {
            input_dim: 6,
            hidden: vec![5],
            d_a: 4,
            d_p: 3,
            fcr_activation: Activation::Identity,
        };
        ModelParams::init(&arch, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn identity_layers_pass_input_through() {
        let m = identity_model(2);
        assert_eq!(m.forward_backbone(&[1.0, 2.0], None).unwrap(), vec![1.0, 2.0]);
        assert_eq!(m.forward_fcr(&[3.0, -4.0], None).unwrap(), vec![3.0, -4.0]);
    }

    #[test]
    fn zero_weights_yield_bias() {
        let m = ModelParams::from_layers(vec![
            layer(2, 3, vec![0.0; 6], vec![0.5, -0.25], Activation::Identity),
            layer(1, 2, vec![0.0; 2], vec![7.0], Activation::Identity),
        ])
        .unwrap();
        assert_eq!(m.forward_backbone(&[9.0, 1.0, -3.0], None).unwrap(), vec![0.5, -0.25]);
        assert_eq!(m.forward_fcr(&[2.0, 2.0], None).unwrap(), vec![7.0]);
    }

    #[test]
    fn random_net_matches_straight_line_evaluation() {
        let m = random_model(1);
        let x = [0.3, -0.2, 0.9, 0.1, -0.7, 0.5];
        // Straight-line evaluation independent of Layer::pre_activation.
        let mut h = x.to_vec();
        for l in m.backbone_layers() {
            let w = l.weight.data();
            let mut next = vec![0.0; l.out_dim()];
            for r in 0..l.out_dim() {
                let mut s = 0.0;
                for c in 0..l.in_dim() {
                    s += w[r * l.in_dim() + c] * h[c];
                }
                next[r] = (s + l.bias[r]).max(0.0);
            }
            h = next;
        }
        assert_eq!(m.forward_backbone(&x, None).unwrap(), h);
        let fcr = m.fcr();
        let expected: Vec<f64> = (0..fcr.out_dim())
            .map(|r| {
                let mut s = 0.0;
                for c in 0..fcr.in_dim() {
                    s += fcr.weight.get(r, c) * h[c];
                }
                s + fcr.bias[r]
            })
            .collect();
        assert_eq!(m.forward_fcr(&h, None).unwrap(), expected);
    }

    #[test]
    fn shape_errors() {
        let m = random_model(2);
        assert!(matches!(m.forward_backbone(&[1.0], None), Err(Error::ShapeMismatch(_))));
        assert!(matches!(m.forward_fcr(&[1.0; 5], None), Err(Error::ShapeMismatch(_))));
        let bad = ModelParams::from_layers(vec![
            layer(2, 2, vec![0.0; 4], vec![0.0; 2], Activation::Relu),
            layer(1, 3, vec![0.0; 3], vec![0.0], Activation::Identity),
        ]);
        assert!(matches!(bad, Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn init_enforces_projection_to_lower_dimension() {
        let arch = Architecture {
            input_dim: 4,
            hidden: vec![],
            d_a: 3,
            d_p: 3,
            fcr_activation: Activation::Identity,
        };
        assert!(ModelParams::init(&arch, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn init_respects_glorot_bounds() {
        let m = random_model(9);
        for l in m.layers() {
            let limit = (6.0 / (l.in_dim() + l.out_dim()) as f64).sqrt();
            assert!(l.weight.data().iter().all(|w| w.abs() <= limit));
            assert!(l.bias.iter().all(|&b| b == 0.0));
        }
    }

    #[test]
    fn single_linear_layer_sum_gradient_is_outer_product() {
        let m = ModelParams::from_layers(vec![
            layer(3, 2, vec![0.1, 0.2, -0.3, 0.4, 0.5, -0.6], vec![0.0; 3], Activation::Identity),
            Layer::new(Matrix::identity(3), vec![0.0; 3], Activation::Identity).unwrap(),
        ])
        .unwrap();
        let x = [1.5, -2.0];
        let mut tape = GradientTape::new(&m);
        m.forward_backbone(&x, Some(&mut tape)).unwrap();
        m.backward(&mut tape, &[1.0, 1.0, 1.0], BackwardScope::Full).unwrap();
        let g = &tape.grads.layers[0];
        for r in 0..3 {
            for c in 0..2 {
                assert_eq!(g.weight.get(r, c), x[c]);
            }
            assert_eq!(g.bias[r], 1.0);
        }
    }

    #[test]
    fn backward_without_forward_fails() {
        let m = random_model(3);
        let mut tape = GradientTape::new(&m);
        assert!(matches!(
            m.backward(&mut tape, &[1.0; 3], BackwardScope::Full),
            Err(Error::NoForwardRecorded)
        ));
        // A forward is consumed by its backward.
        m.forward(&[0.1; 6], Some(&mut tape)).unwrap();
        m.backward(&mut tape, &[1.0; 3], BackwardScope::Full).unwrap();
        assert!(matches!(
            m.backward(&mut tape, &[1.0; 3], BackwardScope::Full),
            Err(Error::NoForwardRecorded)
        ));
    }

    #[test]
    fn full_gradient_matches_finite_differences() {
        // L = Σ_k c_k θ_p,k for a fixed random c.
        for seed in 0..5 {
            let m = random_model(100 + seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
            let c: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let loss = |p: &ModelParams| dot(&p.forward(&x, None).unwrap().projection, &c);
            let mut tape = GradientTape::new(&m);
            m.forward(&x, Some(&mut tape)).unwrap();
            m.backward(&mut tape, &c, BackwardScope::Full).unwrap();
            let h = 1e-5;
            for li in 0..m.layers().len() {
                for wi in 0..m.layers()[li].weight.data().len() {
                    let mut p = m.clone();
                    p.layers[li].weight.data_mut()[wi] += h;
                    let mut q = m.clone();
                    q.layers[li].weight.data_mut()[wi] -= h;
                    let fd = (loss(&p) - loss(&q)) / (2.0 * h);
                    let an = tape.grads.layers[li].weight.data()[wi];
                    assert!((fd - an).abs() <= 1e-4 * fd.abs().max(an.abs()).max(1e-6));
                }
            }
        }
    }

    #[test]
    fn fcr_only_backward_leaves_backbone_buffers_zero() {
        let m = random_model(4);
        let mut tape = GradientTape::new(&m);
        m.forward(&[0.2; 6], Some(&mut tape)).unwrap();
        m.backward(&mut tape, &[1.0, -1.0, 0.5], BackwardScope::FcrOnly).unwrap();
        let before = tape.grads.fingerprint(0..m.split());
        assert_eq!(before, Gradients::zeros_like(&m).fingerprint(0..m.split()));
        assert!(tape.grads.layers[m.split()].bias.iter().any(|&b| b != 0.0));
        assert_eq!(tape.input_grad().unwrap().len(), m.d_a());
    }

    #[test]
    fn sgd_step_examples() {
        let mut m = random_model(5);
        let before = m.clone();
        let mut g = Gradients::zeros_like(&m);
        g.layers.iter_mut().for_each(|l| {
            l.weight.data_mut().iter_mut().for_each(|v| *v = 0.25);
            l.bias.iter_mut().for_each(|v| *v = -0.5);
        });
        sgd_step(&mut m, &g, 0.0);
        assert_eq!(m, before);
        sgd_step(&mut m, &g, 0.1);
        for (a, b) in m.layers().iter().zip(before.layers()) {
            for (x, y) in a.weight.data().iter().zip(b.weight.data()) {
                assert_eq!(*x, y - 0.1 * 0.25);
            }
            for (x, y) in a.bias.iter().zip(&b.bias) {
                assert_eq!(*x, y - 0.1 * -0.5);
            }
        }
    }

    #[test]
    fn sgd_converges_on_scalar_quadratic() {
        // L(w) = (w - 3)^2 on the FCR bias; minimum at 3.
        let mut m = ModelParams::from_layers(vec![
            layer(1, 1, vec![1.0], vec![0.0], Activation::Identity),
            layer(1, 1, vec![0.0], vec![-5.0], Activation::Identity),
        ])
        .unwrap();
        for _ in 0..1000 {
            let mut tape = GradientTape::new(&m);
            let out = m.forward(&[0.0], Some(&mut tape)).unwrap().projection[0];
            m.backward(&mut tape, &[2.0 * (out - 3.0)], BackwardScope::Full).unwrap();
            sgd_step(&mut m, &tape.grads, 0.05);
        }
        assert!((m.fcr().bias[0] - 3.0).abs() < 1e-6);
    }

    #[test]
    fn forward_is_deterministic() {
        let m = random_model(6);
        let x = [0.5, -0.5, 0.25, 1.0, 0.0, -1.0];
        let a = m.forward(&x, None).unwrap();
        let b = m.forward(&x, None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn param_file_round_trip_and_corruption() {
        let m = random_model(7);
        let bytes = m.to_bytes();
        assert_eq!(&bytes[..4], b"OFSC");
        let back = ModelParams::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back, m);

        let truncated = &bytes[..bytes.len() - 3];
        assert!(matches!(ModelParams::from_bytes(truncated), Err(Error::FormatVersionMismatch(_))));
        let mut wrong_magic = bytes.clone();
        wrong_magic[0] = b'X';
        assert!(matches!(ModelParams::from_bytes(&wrong_magic), Err(Error::FormatVersionMismatch(_))));
        let mut wrong_version = bytes.clone();
        wrong_version[4] = 9;
        assert!(matches!(ModelParams::from_bytes(&wrong_version), Err(Error::FormatVersionMismatch(_))));
    }

    #[test]
    fn save_and_load_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nested/model.ofsc");
        let m = random_model(8);
        m.save(&path).unwrap();
        assert_eq!(ModelParams::load(&path).unwrap(), m);
        assert!(matches!(ModelParams::load(&dir.path().join("missing")), Err(Error::Io(_))));
    }

    #[test]
    fn variant_table() {
        assert_eq!(BackboneVariant::MobileNetV2X4.strides(), &[1, 2, 2, 1, 1, 1, 1]);
        assert_eq!(BackboneVariant::ResNet12.d_p(), 512);
        assert_eq!(BackboneVariant::parse("mobilenetv2_x2"), Some(BackboneVariant::MobileNetV2X2));
    }
}
