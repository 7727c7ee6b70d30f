//! Dense networks with hand-derived gradients, Adam, Polyak averaging and a
//! text checkpoint format.
//!
//! Layers use the row-vector convention `y = act(x W + b)` with `W` stored
//! row-major as `in_dim x out_dim`, so a batch is a row-major matrix with one
//! sample per row.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("architecture mismatch: {0}")]
    ArchitectureMismatch(String),
    #[error("non-finite gradient in layer {layer}")]
    NonFiniteGradient { layer: usize },
    #[error("non-finite parameters after update in layer {layer}")]
    NonFiniteParameters { layer: usize },
    #[error("invalid network: {0}")]
    InvalidNetwork(String),
    #[error("soft update rate {0} outside [0, 1]")]
    InvalidTau(f64),
    #[error("checkpoint parse error at line {line}: {msg}")]
    Checkpoint { line: usize, msg: String },
    #[error("checkpoint has no network named `{0}`")]
    MissingNetwork(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Row-major matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix data length");
        Matrix { rows, cols, data }
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.as_ref().len(), cols, "ragged rows");
            data.extend_from_slice(r.as_ref());
        }
        Matrix {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    /// Concatenates matrices with equal row counts side by side.
    pub fn hcat(parts: &[&Matrix]) -> Matrix {
        let rows = parts.first().map_or(0, |m| m.rows);
        let cols = parts.iter().map(|m| m.cols).sum();
        let mut out = Matrix::zeros(rows, cols);
        for i in 0..rows {
            let mut off = 0;
            for p in parts {
                assert_eq!(p.rows, rows, "hcat row mismatch");
                out.row_mut(i)[off..off + p.cols].copy_from_slice(p.row(i));
                off += p.cols;
            }
        }
        out
    }

    /// Copies columns `start..start + width` into a new matrix.
    pub fn columns(&self, start: usize, width: usize) -> Matrix {
        let mut out = Matrix::zeros(self.rows, width);
        for i in 0..self.rows {
            out.row_mut(i).copy_from_slice(&self.row(i)[start..start + width]);
        }
        out
    }
}

/// `c = alpha * op(a) * op(b) + beta * c` on row-major buffers.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    beta: f64,
) {
    // a is m x k (or k x m transposed), b is k x n (or n x k transposed)
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    // SAFETY: slice lengths cover the strided extents checked by the callers.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
            Activation::Identity => "identity",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "relu" => Some(Activation::Relu),
            "tanh" => Some(Activation::Tanh),
            "identity" => Some(Activation::Identity),
            _ => None,
        }
    }

    #[inline]
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::Tanh => v.tanh(),
            Activation::Identity => v,
        }
    }

    /// Derivative expressed through the activation output.
    #[inline]
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub in_dim: usize,
    pub out_dim: usize,
    /// Row-major `in_dim x out_dim`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Dense {
    pub fn zeros(in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        Dense {
            in_dim,
            out_dim,
            weights: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
            activation,
        }
    }

    /// Orthogonal weights (scaled by `gain`), zero bias.
    pub fn orthogonal<R: Rng + ?Sized>(
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        let mut layer = Dense::zeros(in_dim, out_dim, activation);
        // Orthonormalize the shorter family of vectors in the longer dimension.
        let (count, len) = if in_dim >= out_dim {
            (out_dim, in_dim)
        } else {
            (in_dim, out_dim)
        };
        let mut vecs: Vec<Vec<f64>> = Vec::with_capacity(count);
        while vecs.len() < count {
            let mut v: Vec<f64> = (0..len).map(|_| rng.sample(StandardNormal)).collect();
            for _ in 0..2 {
                for u in &vecs {
                    let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                    v.iter_mut().zip(u).for_each(|(a, b)| *a -= d * b);
                }
            }
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm > 1e-8 {
                v.iter_mut().for_each(|a| *a /= norm);
                vecs.push(v);
            }
        }
        for (k, v) in vecs.iter().enumerate() {
            for (l, x) in v.iter().enumerate() {
                let (i, j) = if in_dim >= out_dim { (l, k) } else { (k, l) };
                layer.weights[i * out_dim + j] = gain * x;
            }
        }
        layer
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

/// Feed-forward stack of dense layers.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseNet {
    layers: Vec<Dense>,
}

/// Parameter-shaped gradient (or moment) storage, one `(weights, bias)` pair per layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub layers: Vec<(Vec<f64>, Vec<f64>)>,
}

impl Gradients {
    pub fn zeros_like(net: &DenseNet) -> Self {
        Gradients {
            layers: net
                .layers
                .iter()
                .map(|l| (vec![0.0; l.weights.len()], vec![0.0; l.bias.len()]))
                .collect(),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(|(w, b)| w.iter().chain(b))
    }

    pub fn scale(&mut self, s: f64) {
        for (w, b) in &mut self.layers {
            w.iter_mut().chain(b.iter_mut()).for_each(|v| *v *= s);
        }
    }
}

/// Activations retained from a batched forward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    /// `outputs[0]` is the input batch, `outputs[k + 1]` the output of layer `k`.
    outputs: Vec<Matrix>,
}

impl ForwardCache {
    pub fn output(&self) -> &Matrix {
        self.outputs.last().expect("cache holds the input at least")
    }

    pub fn input(&self) -> &Matrix {
        &self.outputs[0]
    }
}

impl DenseNet {
    pub fn new(layers: Vec<Dense>) -> Result<Self, NnError> {
        if layers.is_empty() {
            return Err(NnError::InvalidNetwork("no layers".into()));
        }
        for (k, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim != pair[1].in_dim {
                return Err(NnError::InvalidNetwork(format!(
                    "layer {k} outputs {} but layer {} expects {}",
                    pair[0].out_dim,
                    k + 1,
                    pair[1].in_dim
                )));
            }
        }
        for (k, l) in layers.iter().enumerate() {
            if l.weights.len() != l.in_dim * l.out_dim || l.bias.len() != l.out_dim {
                return Err(NnError::InvalidNetwork(format!("layer {k} parameter shape")));
            }
            if l.weights.iter().chain(&l.bias).any(|v| !v.is_finite()) {
                return Err(NnError::InvalidNetwork(format!("layer {k} has non-finite parameters")));
            }
        }
        Ok(DenseNet { layers })
    }

    /// Orthogonally initialized MLP over `dims` (input first) with one
    /// activation per layer.
    pub fn mlp<R: Rng + ?Sized>(
        dims: &[usize],
        activations: &[Activation],
        rng: &mut R,
    ) -> Result<Self, NnError> {
        if dims.len() < 2 || activations.len() != dims.len() - 1 {
            return Err(NnError::InvalidNetwork(
                "need one activation per consecutive dimension pair".into(),
            ));
        }
        let layers = dims
            .windows(2)
            .zip(activations)
            .map(|(d, act)| {
                let gain = if *act == Activation::Relu { 2f64.sqrt() } else { 1.0 };
                Dense::orthogonal(d[0], d[1], *act, gain, rng)
            })
            .collect();
        DenseNet::new(layers)
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Dense::param_count).sum()
    }

    /// Zeroes the last layer so the network outputs `act(0)` everywhere.
    pub fn zero_last_layer(&mut self) {
        let last = self.layers.last_mut().expect("non-empty");
        last.weights.iter_mut().for_each(|v| *v = 0.0);
        last.bias.iter_mut().for_each(|v| *v = 0.0);
    }

    pub fn same_architecture(&self, other: &DenseNet) -> bool {
        self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| {
                a.in_dim == b.in_dim && a.out_dim == b.out_dim && a.activation == b.activation
            })
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>, NnError> {
        let batch = Matrix::from_vec(1, x.len(), x.to_vec());
        Ok(self.forward_batch(&batch)?.output().data.clone())
    }

    pub fn forward_batch(&self, x: &Matrix) -> Result<ForwardCache, NnError> {
        if x.cols != self.input_dim() {
            return Err(NnError::DimensionMismatch {
                expected: self.input_dim(),
                got: x.cols,
            });
        }
        let mut outputs = Vec::with_capacity(self.layers.len() + 1);
        outputs.push(x.clone());
        for layer in &self.layers {
            let input = outputs.last().unwrap();
            let mut out = Matrix::zeros(input.rows, layer.out_dim);
            for i in 0..out.rows {
                out.row_mut(i).copy_from_slice(&layer.bias);
            }
            gemm(
                input.rows,
                layer.in_dim,
                layer.out_dim,
                &input.data,
                false,
                &layer.weights,
                false,
                &mut out.data,
                1.0,
            );
            let act = layer.activation;
            if act != Activation::Identity {
                out.data.iter_mut().for_each(|v| *v = act.apply(*v));
            }
            outputs.push(out);
        }
        Ok(ForwardCache { outputs })
    }

    /// Gradients of `sum_rows <upstream_row, output_row>` with respect to the
    /// parameters and the input batch.
    pub fn backward_batch(
        &self,
        cache: &ForwardCache,
        upstream: &Matrix,
    ) -> Result<(Gradients, Matrix), NnError> {
        let out = cache.output();
        if upstream.cols != out.cols || upstream.rows != out.rows {
            return Err(NnError::DimensionMismatch {
                expected: out.cols,
                got: upstream.cols,
            });
        }
        let mut grads = Gradients::zeros_like(self);
        let mut delta = upstream.clone();
        for (k, layer) in self.layers.iter().enumerate().rev() {
            let y = &cache.outputs[k + 1];
            let x = &cache.outputs[k];
            if layer.activation != Activation::Identity {
                for (d, yv) in delta.data.iter_mut().zip(&y.data) {
                    *d *= layer.activation.derivative_from_output(*yv);
                }
            }
            let (gw, gb) = &mut grads.layers[k];
            // dW = x^T delta
            gemm(
                layer.in_dim,
                x.rows,
                layer.out_dim,
                &x.data,
                true,
                &delta.data,
                false,
                gw,
                0.0,
            );
            for i in 0..delta.rows {
                for (b, d) in gb.iter_mut().zip(delta.row(i)) {
                    *b += d;
                }
            }
            // dx = delta W^T
            let mut dx = Matrix::zeros(delta.rows, layer.in_dim);
            gemm(
                delta.rows,
                layer.out_dim,
                layer.in_dim,
                &delta.data,
                false,
                &layer.weights,
                true,
                &mut dx.data,
                0.0,
            );
            delta = dx;
        }
        Ok((grads, delta))
    }

    pub fn backward(&self, x: &[f64], upstream: &[f64]) -> Result<(Gradients, Vec<f64>), NnError> {
        if upstream.len() != self.output_dim() {
            return Err(NnError::DimensionMismatch {
                expected: self.output_dim(),
                got: upstream.len(),
            });
        }
        let cache = self.forward_batch(&Matrix::from_vec(1, x.len(), x.to_vec()))?;
        let up = Matrix::from_vec(1, upstream.len(), upstream.to_vec());
        let (g, dx) = self.backward_batch(&cache, &up)?;
        Ok((g, dx.data))
    }

    /// Polyak averaging: `self <- (1 - tau) self + tau online`.
    pub fn soft_update(&mut self, online: &DenseNet, tau: f64) -> Result<(), NnError> {
        if !(0.0..=1.0).contains(&tau) {
            return Err(NnError::InvalidTau(tau));
        }
        if !self.same_architecture(online) {
            return Err(NnError::ArchitectureMismatch("soft update between different nets".into()));
        }
        for (t, o) in self.layers.iter_mut().zip(&online.layers) {
            for (tv, ov) in t.weights.iter_mut().chain(t.bias.iter_mut()).zip(o.weights.iter().chain(&o.bias)) {
                *tv = if tau == 1.0 { *ov } else { (1.0 - tau) * *tv + tau * ov };
            }
        }
        Ok(())
    }

    /// Euclidean distance between the flattened parameter vectors.
    pub fn param_distance(&self, other: &DenseNet) -> f64 {
        self.layers
            .iter()
            .zip(&other.layers)
            .flat_map(|(a, b)| a.weights.iter().chain(&a.bias).zip(b.weights.iter().chain(&b.bias)))
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
    }

    pub fn params(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(|l| l.weights.iter().chain(&l.bias))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_hat: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps_hat: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub first_moment: Gradients,
    pub second_moment: Gradients,
    pub step_count: u64,
}

impl AdamState {
    pub fn new(net: &DenseNet, config: AdamConfig) -> Self {
        AdamState {
            config,
            first_moment: Gradients::zeros_like(net),
            second_moment: Gradients::zeros_like(net),
            step_count: 0,
        }
    }

    fn matches(&self, net: &DenseNet) -> bool {
        self.first_moment.layers.len() == net.layers.len()
            && self
                .first_moment
                .layers
                .iter()
                .zip(&net.layers)
                .all(|((w, b), l)| w.len() == l.weights.len() && b.len() == l.bias.len())
    }
}

/// One bias-corrected Adam step. Rejects non-finite gradients before touching
/// any state.
pub fn adam_step(net: &mut DenseNet, grads: &Gradients, state: &mut AdamState) -> Result<(), NnError> {
    if !state.matches(net) || grads.layers.len() != net.layers.len() {
        return Err(NnError::ArchitectureMismatch("optimizer state does not match network".into()));
    }
    for (k, ((gw, gb), l)) in grads.layers.iter().zip(&net.layers).enumerate() {
        if gw.len() != l.weights.len() || gb.len() != l.bias.len() {
            return Err(NnError::ArchitectureMismatch(format!("gradient shape in layer {k}")));
        }
        if gw.iter().chain(gb).any(|v| !v.is_finite()) {
            return Err(NnError::NonFiniteGradient { layer: k });
        }
    }
    state.step_count += 1;
    let AdamConfig {
        lr,
        beta1,
        beta2,
        eps_hat,
    } = state.config;
    let t = state.step_count as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    for (k, layer) in net.layers.iter_mut().enumerate() {
        let (gw, gb) = &grads.layers[k];
        let (mw, mb) = &mut state.first_moment.layers[k];
        let (vw, vb) = &mut state.second_moment.layers[k];
        let params = layer.weights.iter_mut().chain(layer.bias.iter_mut());
        let g = gw.iter().chain(gb);
        let m = mw.iter_mut().chain(mb.iter_mut());
        let v = vw.iter_mut().chain(vb.iter_mut());
        for (((p, g), m), v) in params.zip(g).zip(m).zip(v) {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps_hat);
        }
        if layer.weights.iter().chain(&layer.bias).any(|v| !v.is_finite()) {
            return Err(NnError::NonFiniteParameters { layer: k });
        }
    }
    Ok(())
}

const CHECKPOINT_MAGIC: &str = "fish-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

/// Named networks plus string metadata, stored as versioned text.
///
/// ```text
/// fish-checkpoint 1
/// meta <key> <value>
/// net <name> <layer count>
/// layer <in> <out> <activation>
/// w <in*out values>
/// b <out values>
/// ```
///
/// Values are written in shortest round-trip decimal form, so loading a saved
/// checkpoint reproduces every parameter bit for bit.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub nets: BTreeMap<String, DenseNet>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, net: DenseNet) {
        self.nets.insert(name.to_string(), net);
    }

    pub fn net(&self, name: &str) -> Result<&DenseNet, NnError> {
        self.nets.get(name).ok_or_else(|| NnError::MissingNetwork(name.to_string()))
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}\n");
        for (k, v) in &self.meta {
            let _ = writeln!(s, "meta {k} {v}");
        }
        for (name, net) in &self.nets {
            let _ = writeln!(s, "net {name} {}", net.layers.len());
            for l in &net.layers {
                let _ = writeln!(s, "layer {} {} {}", l.in_dim, l.out_dim, l.activation.name());
                s.push('w');
                for v in &l.weights {
                    let _ = write!(s, " {v}");
                }
                s.push_str("\nb");
                for v in &l.bias {
                    let _ = write!(s, " {v}");
                }
                s.push('\n');
            }
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, NnError> {
        let err = |line: usize, msg: &str| NnError::Checkpoint {
            line,
            msg: msg.to_string(),
        };
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let (_, header) = lines.next().ok_or_else(|| err(1, "empty checkpoint"))?;
        let mut head = header.split_whitespace();
        if head.next() != Some(CHECKPOINT_MAGIC) {
            return Err(err(1, "bad magic"));
        }
        match head.next().and_then(|v| v.parse::<u32>().ok()) {
            Some(CHECKPOINT_VERSION) => {}
            _ => return Err(err(1, "unsupported version")),
        }
        let mut ckpt = Checkpoint::new();
        let parse_values = |line: usize, body: &str, tag: &str, n: usize| -> Result<Vec<f64>, NnError> {
            let mut it = body.split_whitespace();
            if it.next() != Some(tag) {
                return Err(err(line, &format!("expected `{tag}` record")));
            }
            let vals = it
                .map(|t| t.parse::<f64>().map_err(|_| err(line, &format!("bad number `{t}`"))))
                .collect::<Result<Vec<_>, _>>()?;
            if vals.len() != n {
                return Err(err(line, &format!("expected {n} values, found {}", vals.len())));
            }
            Ok(vals)
        };
        while let Some((ln, line)) = lines.next() {
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.splitn(3, ' ');
            match parts.next() {
                Some("meta") => {
                    let key = parts.next().ok_or_else(|| err(ln, "meta without key"))?;
                    let value = parts.next().unwrap_or("");
                    ckpt.meta.insert(key.to_string(), value.to_string());
                }
                Some("net") => {
                    let name = parts.next().ok_or_else(|| err(ln, "net without name"))?;
                    let count: usize = parts
                        .next()
                        .and_then(|c| c.trim().parse().ok())
                        .ok_or_else(|| err(ln, "bad layer count"))?;
                    let mut layers = Vec::with_capacity(count);
                    for _ in 0..count {
                        let (lln, lline) = lines.next().ok_or_else(|| err(ln, "truncated net"))?;
                        let f: Vec<&str> = lline.split_whitespace().collect();
                        if f.len() != 4 || f[0] != "layer" {
                            return Err(err(lln, "expected layer record"));
                        }
                        let in_dim: usize = f[1].parse().map_err(|_| err(lln, "bad in dim"))?;
                        let out_dim: usize = f[2].parse().map_err(|_| err(lln, "bad out dim"))?;
                        let activation = Activation::parse(f[3]).ok_or_else(|| err(lln, "bad activation"))?;
                        let (wln, wline) = lines.next().ok_or_else(|| err(lln, "missing weights"))?;
                        let weights = parse_values(wln, wline, "w", in_dim * out_dim)?;
                        let (bln, bline) = lines.next().ok_or_else(|| err(wln, "missing bias"))?;
                        let bias = parse_values(bln, bline, "b", out_dim)?;
                        layers.push(Dense {
                            in_dim,
                            out_dim,
                            weights,
                            bias,
                            activation,
                        });
                    }
                    let net = DenseNet::new(layers).map_err(|e| err(ln, &e.to_string()))?;
                    ckpt.nets.insert(name.to_string(), net);
                }
                _ => return Err(err(ln, "unknown record")),
            }
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<(), NnError> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, NnError> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}
