//! Fully connected networks with a scalar logit output.
//!
//! A network is an ordered list of [`Dense`] layers. The activation is applied
//! after every layer except the last, so a single layer is an affine model and
//! `d → h → 1` is the one-hidden-layer case used by the curvature bound.
//!
//! All derivatives are taken of the raw logit `f(x, θ)`, never of the sigmoid
//! probability. ReLU uses the subgradient `σ'(0) = 0`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, Matrix};

/// Beyond this magnitude of `β·z` softplus switches to its asymptotes.
const SOFTPLUS_CLAMP: f64 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActivationKind {
    Relu,
    Softplus,
}

/// Activation function. `beta` is the softplus sharpness and is ignored for
/// ReLU.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActivationSpec {
    pub kind: ActivationKind,
    #[serde(default = "default_beta")]
    pub beta: f64,
}

fn default_beta() -> f64 {
    1.0
}

#[inline]
pub fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^t)` without overflow.
#[inline]
pub fn log1p_exp(t: f64) -> f64 {
    t.max(0.0) + (-t.abs()).exp().ln_1p()
}

impl ActivationSpec {
    pub fn relu() -> Self {
        Self {
            kind: ActivationKind::Relu,
            beta: 1.0,
        }
    }

    pub fn softplus(beta: f64) -> Self {
        Self {
            kind: ActivationKind::Softplus,
            beta,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind == ActivationKind::Softplus && !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::Domain(format!(
                "softplus beta must be positive and finite, got {}",
                self.beta
            )));
        }
        Ok(())
    }

    /// True when the activation has a non-trivial second derivative.
    pub fn is_smooth(&self) -> bool {
        self.kind == ActivationKind::Softplus
    }

    /// Short identifier such as `relu` or `sp5`.
    pub fn label(&self) -> String {
        match self.kind {
            ActivationKind::Relu => "relu".to_string(),
            ActivationKind::Softplus => format!("sp{}", self.beta),
        }
    }

    #[inline]
    pub fn value(&self, z: f64) -> f64 {
        match self.kind {
            ActivationKind::Relu => z.max(0.0),
            ActivationKind::Softplus => {
                let t = self.beta * z;
                if t > SOFTPLUS_CLAMP {
                    z
                } else if t < -SOFTPLUS_CLAMP {
                    0.0
                } else {
                    log1p_exp(t) / self.beta
                }
            }
        }
    }

    #[inline]
    pub fn derivative(&self, z: f64) -> f64 {
        match self.kind {
            ActivationKind::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            ActivationKind::Softplus => sigmoid(self.beta * z),
        }
    }

    #[inline]
    pub fn second_derivative(&self, z: f64) -> f64 {
        match self.kind {
            ActivationKind::Relu => 0.0,
            ActivationKind::Softplus => {
                let s = sigmoid(self.beta * z);
                self.beta * s * (1.0 - s)
            }
        }
    }
}

/// One affine layer; `w` is `n_out × n_in`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub n_in: usize,
    pub n_out: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl Dense {
    pub fn zeros(n_in: usize, n_out: usize) -> Self {
        Self {
            n_in,
            n_out,
            w: vec![0.0; n_in * n_out],
            b: vec![0.0; n_out],
        }
    }

    #[inline]
    pub fn w_row(&self, o: usize) -> &[f64] {
        &self.w[o * self.n_in..(o + 1) * self.n_in]
    }

    fn n_params(&self) -> usize {
        self.w.len() + self.b.len()
    }
}

/// Network parameters θ together with the activation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MlpJson", into = "MlpJson")]
pub struct MlpParams {
    layers: Vec<Dense>,
    activation: ActivationSpec,
}

/// Parameter-shaped gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGradient {
    pub layers: Vec<Dense>,
}

impl ParamGradient {
    pub fn zeros_like(params: &MlpParams) -> Self {
        Self {
            layers: params
                .layers
                .iter()
                .map(|l| Dense::zeros(l.n_in, l.n_out))
                .collect(),
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        flatten_layers(&self.layers)
    }

    fn fill_zero(&mut self) {
        for l in &mut self.layers {
            l.w.iter_mut().for_each(|v| *v = 0.0);
            l.b.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    fn scale(&mut self, s: f64) {
        for l in &mut self.layers {
            l.w.iter_mut().for_each(|v| *v *= s);
            l.b.iter_mut().for_each(|v| *v *= s);
        }
    }
}

fn flatten_layers(layers: &[Dense]) -> Vec<f64> {
    let mut out = Vec::with_capacity(layers.iter().map(Dense::n_params).sum());
    for l in layers {
        out.extend_from_slice(&l.w);
        out.extend_from_slice(&l.b);
    }
    out
}

/// Mixed derivative `∇_θ ∇_x f` of a one-hidden-layer network.
#[derive(Debug, Clone, PartialEq)]
pub struct MixedDerivative {
    /// `|θ| × d`, rows in [`MlpParams::flatten`] order.
    pub matrix: Matrix,
    /// Set for ReLU networks, whose second derivative vanishes almost
    /// everywhere, so only the first-order terms survive.
    pub piecewise_linear: bool,
}

/// Scratch buffers for forward and backward passes.
#[derive(Debug, Clone)]
pub struct Workspace {
    /// `acts[l]` is the input to layer `l`.
    acts: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    delta: Vec<Vec<f64>>,
}

impl Workspace {
    pub fn new(params: &MlpParams) -> Self {
        let acts = params.layers.iter().map(|l| vec![0.0; l.n_in]).collect();
        let pre: Vec<Vec<f64>> = params.layers.iter().map(|l| vec![0.0; l.n_out]).collect();
        Self {
            acts,
            delta: pre.clone(),
            pre,
        }
    }
}

impl MlpParams {
    pub fn new(layers: Vec<Dense>, activation: ActivationSpec) -> Result<Self> {
        activation.validate()?;
        if layers.is_empty() {
            return Err(Error::Shape("a network needs at least one layer".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.n_in == 0 || l.n_out == 0 {
                return Err(Error::Shape(format!("layer {i} has a zero dimension")));
            }
            if l.w.len() != l.n_in * l.n_out || l.b.len() != l.n_out {
                return Err(Error::Shape(format!(
                    "layer {i}: weights {} / bias {} do not match {}x{}",
                    l.w.len(),
                    l.b.len(),
                    l.n_out,
                    l.n_in
                )));
            }
            if let Some(next) = layers.get(i + 1) {
                if next.n_in != l.n_out {
                    return Err(Error::Shape(format!(
                        "layer {i} outputs {} but layer {} expects {}",
                        l.n_out,
                        i + 1,
                        next.n_in
                    )));
                }
            }
            if l.w.iter().chain(&l.b).any(|v| !v.is_finite()) {
                return Err(Error::Domain(format!("layer {i} has non-finite entries")));
            }
        }
        if layers.last().map(|l| l.n_out) != Some(1) {
            return Err(Error::Shape("final layer must have width 1".into()));
        }
        Ok(Self { layers, activation })
    }

    /// All-zero network with the given architecture.
    pub fn zeros(input_dim: usize, hidden: &[usize], activation: ActivationSpec) -> Result<Self> {
        let mut layers = Vec::with_capacity(hidden.len() + 1);
        let mut n_in = input_dim;
        for &h in hidden.iter().chain(std::iter::once(&1)) {
            layers.push(Dense::zeros(n_in, h));
            n_in = h;
        }
        Self::new(layers, activation)
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn activation(&self) -> ActivationSpec {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].n_in
    }

    pub fn hidden_widths(&self) -> Vec<usize> {
        self.layers[..self.layers.len() - 1]
            .iter()
            .map(|l| l.n_out)
            .collect()
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(Dense::n_params).sum()
    }

    pub fn same_architecture(&self, other: &MlpParams) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.n_in == b.n_in && a.n_out == b.n_out)
    }

    /// Parameters as one vector: per layer, the weights row-major then the
    /// bias.
    pub fn flatten(&self) -> Vec<f64> {
        flatten_layers(&self.layers)
    }

    /// A network with this architecture and activation and parameters taken
    /// from `flat`.
    pub fn with_flat(&self, flat: &[f64]) -> Result<Self> {
        if flat.len() != self.n_params() {
            return Err(Error::Shape(format!(
                "flat parameter vector has {} entries, expected {}",
                flat.len(),
                self.n_params()
            )));
        }
        let mut layers = self.layers.clone();
        let mut off = 0;
        for l in &mut layers {
            let nw = l.w.len();
            l.w.copy_from_slice(&flat[off..off + nw]);
            off += nw;
            let nb = l.b.len();
            l.b.copy_from_slice(&flat[off..off + nb]);
            off += nb;
        }
        Self::new(layers, self.activation)
    }

    pub fn with_activation(&self, activation: ActivationSpec) -> Result<Self> {
        Self::new(self.layers.clone(), activation)
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    /// ‖θ‖₂ over weights and biases.
    pub fn norm(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| l.w.iter().chain(&l.b))
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// ‖θ‖₂ over weights only.
    pub fn weight_norm(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| l.w.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.w.iter().chain(&l.b).all(|v| v.is_finite()))
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::Shape(format!(
                "input has {} features, network expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    /// Forward pass storing intermediate values in `ws`; returns the logit.
    pub(crate) fn forward_ws(&self, x: &[f64], ws: &mut Workspace) -> f64 {
        ws.acts[0].copy_from_slice(x);
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let (head, tail) = ws.acts.split_at_mut(l + 1);
            let input = &head[l];
            let pre = &mut ws.pre[l];
            for o in 0..layer.n_out {
                pre[o] = dot(layer.w_row(o), input) + layer.b[o];
            }
            if l < last {
                let out = &mut tail[0];
                for (a, &z) in out.iter_mut().zip(pre.iter()) {
                    *a = self.activation.value(z);
                }
            }
        }
        ws.pre[last][0]
    }

    /// Backward pass from `d(out)/d(logit) = seed`. Accumulates
    /// `scale · ∇_θ` into `grad` when given, and writes `∇_x` into `dx` when
    /// given. Must follow [`Self::forward_ws`] on the same workspace.
    pub(crate) fn backward_ws(
        &self,
        seed: f64,
        ws: &mut Workspace,
        mut grad: Option<(&mut ParamGradient, f64)>,
        dx: Option<&mut [f64]>,
    ) {
        let last = self.layers.len() - 1;
        ws.delta[last][0] = seed;
        for l in (0..=last).rev() {
            let layer = &self.layers[l];
            if let Some((g, scale)) = grad.as_mut() {
                let gl = &mut g.layers[l];
                let input = &ws.acts[l];
                for o in 0..layer.n_out {
                    let d = ws.delta[l][o] * *scale;
                    if d != 0.0 {
                        axpy(d, input, &mut gl.w[o * layer.n_in..(o + 1) * layer.n_in]);
                    }
                    gl.b[o] += d;
                }
            }
            if l > 0 {
                let (head, tail) = ws.delta.split_at_mut(l);
                let prev = &mut head[l - 1];
                prev.iter_mut().for_each(|v| *v = 0.0);
                for o in 0..layer.n_out {
                    let d = tail[0][o];
                    if d != 0.0 {
                        axpy(d, layer.w_row(o), prev);
                    }
                }
                for (p, &z) in prev.iter_mut().zip(&ws.pre[l - 1]) {
                    *p *= self.activation.derivative(z);
                }
            }
        }
        if let Some(dx) = dx {
            let layer = &self.layers[0];
            dx.iter_mut().for_each(|v| *v = 0.0);
            for o in 0..layer.n_out {
                let d = ws.delta[0][o];
                if d != 0.0 {
                    axpy(d, layer.w_row(o), dx);
                }
            }
        }
    }

    /// The logit `f(x, θ)`.
    pub fn forward(&self, x: &[f64]) -> Result<f64> {
        self.check_input(x)?;
        Ok(self.forward_ws(x, &mut Workspace::new(self)))
    }

    /// Binary cross-entropy of `sigmoid(f(x))` against `y`.
    pub fn loss(&self, x: &[f64], y: u8) -> Result<f64> {
        check_label(y)?;
        Ok(bce_with_logit(self.forward(x)?, y))
    }

    /// `∇_x f(x, θ)` of the logit.
    pub fn input_gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut ws = Workspace::new(self);
        let mut dx = vec![0.0; x.len()];
        self.input_gradient_ws(x, &mut ws, &mut dx);
        Ok(dx)
    }

    pub(crate) fn input_gradient_ws(&self, x: &[f64], ws: &mut Workspace, dx: &mut [f64]) {
        self.forward_ws(x, ws);
        self.backward_ws(1.0, ws, None, Some(dx));
    }

    /// Gradient of `(1/|batch|) Σ ℓ(x, y) + γ‖θ‖²`, where the norm covers
    /// weights and biases.
    pub fn param_gradient(&self, batch: &[(&[f64], u8)], gamma: f64) -> Result<ParamGradient> {
        if batch.is_empty() {
            return Err(Error::Argument("parameter gradient of an empty batch".into()));
        }
        if !(gamma >= 0.0) {
            return Err(Error::Argument(format!("gamma must be >= 0, got {gamma}")));
        }
        let mut ws = Workspace::new(self);
        let mut grad = ParamGradient::zeros_like(self);
        for (x, y) in batch {
            self.check_input(x)?;
            check_label(*y)?;
            self.accumulate_loss_grad(x, *y, &mut ws, &mut grad);
        }
        grad.scale(1.0 / batch.len() as f64);
        self.add_decay(&mut grad, gamma);
        Ok(grad)
    }

    /// Adds the unscaled per-sample loss gradient to `grad`; returns the
    /// loss and the logit.
    pub(crate) fn accumulate_loss_grad(
        &self,
        x: &[f64],
        y: u8,
        ws: &mut Workspace,
        grad: &mut ParamGradient,
    ) -> (f64, f64) {
        let f = self.forward_ws(x, ws);
        let dl = sigmoid(f) - f64::from(y);
        self.backward_ws(dl, ws, Some((grad, 1.0)), None);
        (bce_with_logit(f, y), f)
    }

    pub(crate) fn add_decay(&self, grad: &mut ParamGradient, gamma: f64) {
        if gamma == 0.0 {
            return;
        }
        for (g, p) in grad.layers.iter_mut().zip(&self.layers) {
            axpy(2.0 * gamma, &p.w, &mut g.w);
            axpy(2.0 * gamma, &p.b, &mut g.b);
        }
    }

    pub(crate) fn reset_grad(grad: &mut ParamGradient) {
        grad.fill_zero();
    }

    /// Analytic `∇_θ ∇_x f` for a network with exactly one hidden layer.
    ///
    /// With `z = W x + b`, `f = Σ_j v_j σ(z_j) + c`:
    /// - `∂²f/∂x_i∂v_j = σ'(z_j) W_ji`
    /// - `∂²f/∂x_i∂W_jm = v_j σ''(z_j) W_ji x_m + [i = m] v_j σ'(z_j)`
    /// - `∂²f/∂x_i∂b_j = v_j σ''(z_j) W_ji`
    /// - `∂²f/∂x_i∂c = 0`
    pub fn mixed_derivative_1hidden(&self, x: &[f64]) -> Result<MixedDerivative> {
        if self.layers.len() != 2 {
            return Err(Error::Unsupported(format!(
                "mixed derivative needs exactly one hidden layer, network has {}",
                self.layers.len() - 1
            )));
        }
        self.check_input(x)?;
        let (hid, out) = (&self.layers[0], &self.layers[1]);
        let (d, h) = (hid.n_in, hid.n_out);
        let mut m = Matrix::zeros(self.n_params(), d);
        let w_rows = 0;
        let b_rows = h * d;
        let v_rows = b_rows + h;
        for j in 0..h {
            let wj = hid.w_row(j);
            let z = dot(wj, x) + hid.b[j];
            let s1 = self.activation.derivative(z);
            let s2 = self.activation.second_derivative(z);
            let vj = out.w[j];
            for i in 0..d {
                m.set(v_rows + j, i, s1 * wj[i]);
                m.set(b_rows + j, i, vj * s2 * wj[i]);
                for mm in 0..d {
                    let mut v = vj * s2 * wj[i] * x[mm];
                    if mm == i {
                        v += vj * s1;
                    }
                    m.set(w_rows + j * d + mm, i, v);
                }
            }
        }
        Ok(MixedDerivative {
            matrix: m,
            piecewise_linear: !self.activation.is_smooth(),
        })
    }
}

pub fn check_label(y: u8) -> Result<()> {
    if y > 1 {
        return Err(Error::Domain(format!("label must be 0 or 1, got {y}")));
    }
    Ok(())
}

/// `-[y ln σ(f) + (1-y) ln(1-σ(f))]` in log-sum-exp form.
#[inline]
pub fn bce_with_logit(f: f64, y: u8) -> f64 {
    f.max(0.0) - f * f64::from(y) + (-f.abs()).exp().ln_1p()
}

#[derive(Serialize, Deserialize)]
struct LayerJson {
    w: Vec<Vec<f64>>,
    b: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct MlpJson {
    activation: ActivationSpec,
    layers: Vec<LayerJson>,
}

impl TryFrom<MlpJson> for MlpParams {
    type Error = Error;

    fn try_from(j: MlpJson) -> Result<Self> {
        let mut layers = Vec::with_capacity(j.layers.len());
        for (i, l) in j.layers.into_iter().enumerate() {
            let n_out = l.w.len();
            let n_in = l.w.first().map_or(0, Vec::len);
            if l.w.iter().any(|r| r.len() != n_in) {
                return Err(Error::Shape(format!("layer {i} has ragged weight rows")));
            }
            layers.push(Dense {
                n_in,
                n_out,
                w: l.w.into_iter().flatten().collect(),
                b: l.b,
            });
        }
        MlpParams::new(layers, j.activation)
    }
}

impl From<MlpParams> for MlpJson {
    fn from(p: MlpParams) -> Self {
        MlpJson {
            activation: p.activation,
            layers: p
                .layers
                .into_iter()
                .map(|l| LayerJson {
                    w: l.w.chunks(l.n_in).map(<[f64]>::to_vec).collect(),
                    b: l.b,
                })
                .collect(),
        }
    }
}

impl MlpParams {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}
