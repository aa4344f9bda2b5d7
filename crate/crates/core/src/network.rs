//! Frame-wise feedforward embedding network.
//!
//! Each frame sees a window of `context` log-magnitude frames. A tanh/relu
//! trunk feeds two linear heads: the DC head emits `F·D` values that are
//! reshaped into one `D`-dimensional embedding per bin and normalized to unit
//! length; the optional MI head emits `F·N` logits turned into ratio masks by
//! a softmax over speakers. Backpropagation is written out by hand.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::{norm, Matrix};
use crate::objective::EmbeddingMatrix;

/// Floor on the pre-normalization norm of an embedding.
pub const NORM_EPSILON: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
        }
    }

    /// Derivative expressed through the activation's output.
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
        })
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "relu" => Ok(Activation::Relu),
            other => Err(Error::invalid(format!("unknown activation {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    /// Frequency bins per frame (`F`).
    pub input_dim: usize,
    /// Odd number of frames seen per output frame.
    pub context: usize,
    pub hidden: Vec<usize>,
    /// Embedding dimension `D`.
    pub embedding_dim: usize,
    pub n_speakers: usize,
    pub with_mi_head: bool,
    pub activation: Activation,
    pub seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            input_dim: 129,
            context: 5,
            hidden: vec![128, 128],
            embedding_dim: 40,
            n_speakers: 2,
            with_mi_head: false,
            activation: Activation::Tanh,
            seed: 0,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.embedding_dim == 0 || self.n_speakers == 0 {
            return Err(Error::invalid("network dimensions must be positive"));
        }
        if self.context.is_multiple_of(2) {
            return Err(Error::invalid(format!("context must be odd, got {}", self.context)));
        }
        if self.embedding_dim + 1 < self.n_speakers {
            return Err(Error::invalid(format!(
                "embedding dimension {} cannot hold a simplex for {} speakers",
                self.embedding_dim, self.n_speakers
            )));
        }
        if self.hidden.contains(&0) {
            return Err(Error::invalid("hidden layer widths must be positive"));
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        self.context * self.input_dim
    }
}

/// Affine layer `y = x·W + b` with `W` stored `inputs x outputs`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl Dense {
    fn glorot(rng: &mut ChaCha8Rng, inputs: usize, outputs: usize) -> Self {
        let limit = (6.0 / (inputs + outputs) as f64).sqrt();
        let data = (0..inputs * outputs).map(|_| rng.random_range(-limit..=limit)).collect();
        Self {
            weights: Matrix::from_vec(inputs, outputs, data).expect("shape is consistent"),
            bias: vec![0.0; outputs],
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            weights: Matrix::zeros(self.weights.rows(), self.weights.cols()),
            bias: vec![0.0; self.bias.len()],
        }
    }

    fn forward(&self, x: &Matrix) -> Matrix {
        let mut y = x.matmul(&self.weights).expect("layer shapes checked at construction");
        for r in 0..y.rows() {
            for (v, b) in y.row_mut(r).iter_mut().zip(&self.bias) {
                *v += b;
            }
        }
        y
    }

    /// Returns the gradient with respect to the layer input.
    fn backward(&self, x: &Matrix, dy: &Matrix, grad: &mut Dense) -> Matrix {
        let dw = x.t_matmul(dy).expect("layer shapes checked at construction");
        grad.weights.add_scaled(&dw, 1.0).expect("same shape");
        for row in dy.iter_rows() {
            for (g, d) in grad.bias.iter_mut().zip(row) {
                *g += d;
            }
        }
        dy.matmul_t(&self.weights).expect("layer shapes checked at construction")
    }
}

/// Trainable parameters. Gradients use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub trunk: Vec<Dense>,
    pub dc_head: Dense,
    pub mi_head: Option<Dense>,
}

impl NetworkParams {
    /// Glorot-uniform weights and zero biases drawn from `config.seed`.
    pub fn init(config: &NetworkConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut width = config.feature_dim();
        let mut trunk = Vec::with_capacity(config.hidden.len());
        for &h in &config.hidden {
            trunk.push(Dense::glorot(&mut rng, width, h));
            width = h;
        }
        let dc_head = Dense::glorot(&mut rng, width, config.input_dim * config.embedding_dim);
        let mi_head = config
            .with_mi_head
            .then(|| Dense::glorot(&mut rng, width, config.input_dim * config.n_speakers));
        Ok(Self {
            trunk,
            dc_head,
            mi_head,
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            trunk: self.trunk.iter().map(Dense::zeros_like).collect(),
            dc_head: self.dc_head.zeros_like(),
            mi_head: self.mi_head.as_ref().map(Dense::zeros_like),
        }
    }

    fn layers(&self) -> impl Iterator<Item = &Dense> {
        self.trunk.iter().chain(Some(&self.dc_head)).chain(self.mi_head.as_ref())
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut Dense> {
        self.trunk
            .iter_mut()
            .chain(Some(&mut self.dc_head))
            .chain(self.mi_head.as_mut())
    }

    /// Weight then bias of every layer, in checkpoint order.
    pub fn tensors(&self) -> Vec<&[f64]> {
        self.layers()
            .flat_map(|l| [l.weights.as_slice(), l.bias.as_slice()])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers_mut()
            .flat_map(|l| [l.weights.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }

    pub fn n_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Flat-index access used by finite-difference checks.
    pub fn get(&self, mut index: usize) -> f64 {
        for t in self.tensors() {
            if index < t.len() {
                return t[index];
            }
            index -= t.len();
        }
        panic!("parameter index out of range");
    }

    pub fn set(&mut self, mut index: usize, value: f64) {
        for t in self.tensors_mut() {
            if index < t.len() {
                t[index] = value;
                return;
            }
            index -= t.len();
        }
        panic!("parameter index out of range");
    }

    pub fn add_scaled(&mut self, other: &NetworkParams, c: f64) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += c * y;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|x| x.is_finite()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkOutput {
    /// `(T·F) x D`, row `t·F + f`.
    pub embeddings: EmbeddingMatrix,
    /// `N` masks of shape `T x F`, summing to one in every bin.
    pub masks: Option<Vec<Matrix>>,
}

/// Intermediate values kept by [`Network::forward_trace`] for backpropagation.
#[derive(Debug, Clone)]
pub struct Trace {
    input: Matrix,
    /// Output of each trunk layer after the activation.
    hidden: Vec<Matrix>,
    /// Pre-normalization norm of every embedding.
    norms: Vec<f64>,
    pub output: NetworkOutput,
}

/// Network configuration together with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub config: NetworkConfig,
    pub params: NetworkParams,
}

impl Network {
    pub fn new(config: NetworkConfig) -> Result<Self> {
        let params = NetworkParams::init(&config)?;
        Ok(Self { config, params })
    }

    pub fn with_params(config: NetworkConfig, params: NetworkParams) -> Result<Self> {
        config.validate()?;
        let reference = NetworkParams::init(&config)?;
        let shapes = |p: &NetworkParams| p.tensors().iter().map(|t| t.len()).collect::<Vec<_>>();
        if shapes(&reference) != shapes(&params) || reference.mi_head.is_some() != params.mi_head.is_some() {
            return Err(Error::invalid("parameters do not match the network configuration"));
        }
        Ok(Self { config, params })
    }

    pub fn forward(&self, features: &Matrix) -> Result<NetworkOutput> {
        Ok(self.forward_trace(features)?.output)
    }

    pub fn forward_trace(&self, features: &Matrix) -> Result<Trace> {
        let cfg = &self.config;
        if features.cols() != cfg.feature_dim() || features.rows() == 0 {
            return Err(Error::shape(
                "network input",
                format!("T x {}", cfg.feature_dim()),
                format!("{} x {}", features.rows(), features.cols()),
            ));
        }
        let frames = features.rows();
        let bins = cfg.input_dim;

        let mut hidden = Vec::with_capacity(self.params.trunk.len());
        for layer in &self.params.trunk {
            let mut h = layer.forward(hidden.last().unwrap_or(features));
            h.as_mut_slice().iter_mut().for_each(|x| *x = cfg.activation.apply(*x));
            hidden.push(h);
        }
        let top = hidden.last().unwrap_or(features);

        let z = self.params.dc_head.forward(top);
        let mut v = Matrix::from_vec(frames * bins, cfg.embedding_dim, z.into_vec())?;
        let mut norms = Vec::with_capacity(v.rows());
        for i in 0..v.rows() {
            let row = v.row_mut(i);
            let n = norm(row);
            let d = n.max(NORM_EPSILON);
            row.iter_mut().for_each(|x| *x /= d);
            norms.push(n);
        }
        if !v.is_finite() {
            return Err(Error::NonFinite("embedding activations".into()));
        }
        // Rows under the norm floor cannot reach unit length and fail here.
        let embeddings = EmbeddingMatrix::new(v)?;

        let masks = match &self.params.mi_head {
            Some(head) => {
                let logits = head.forward(top);
                let n = cfg.n_speakers;
                let mut masks = vec![Matrix::zeros(frames, bins); n];
                for (i, row) in logits.as_slice().chunks_exact(n).enumerate() {
                    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let exps: Vec<f64> = row.iter().map(|x| (x - max).exp()).collect();
                    let sum: f64 = exps.iter().sum();
                    for (s, e) in exps.iter().enumerate() {
                        masks[s].as_mut_slice()[i] = e / sum;
                    }
                }
                if masks.iter().any(|m| !m.is_finite()) {
                    return Err(Error::NonFinite("mask activations".into()));
                }
                Some(masks)
            }
            None => None,
        };

        Ok(Trace {
            input: features.clone(),
            hidden,
            norms,
            output: NetworkOutput { embeddings, masks },
        })
    }

    /// Parameter gradients given `dL/dV` (`(T·F) x D`) and optionally `dL/dmask`.
    pub fn backward(
        &self,
        trace: &Trace,
        grad_embeddings: Option<&Matrix>,
        grad_masks: Option<&[Matrix]>,
    ) -> Result<NetworkParams> {
        let cfg = &self.config;
        let frames = trace.input.rows();
        let bins = cfg.input_dim;
        let mut grads = self.params.zeros_like();
        let top = trace.hidden.last().unwrap_or(&trace.input);
        let mut d_top = Matrix::zeros(top.rows(), top.cols());

        if let Some(g) = grad_embeddings {
            let v = trace.output.embeddings.matrix();
            if g.shape() != v.shape() {
                return Err(Error::shape(
                    "embedding gradient",
                    format!("{:?}", v.shape()),
                    format!("{:?}", g.shape()),
                ));
            }
            // dv/dz = (I − vvᵀ)/‖z‖
            let mut dz = g.clone();
            for i in 0..dz.rows() {
                let vi = v.row(i);
                let radial: f64 = vi.iter().zip(g.row(i)).map(|(a, b)| a * b).sum();
                let scale = trace.norms[i].max(NORM_EPSILON);
                for (d, &vx) in dz.row_mut(i).iter_mut().zip(vi) {
                    *d = (*d - radial * vx) / scale;
                }
            }
            let dz = Matrix::from_vec(frames, bins * cfg.embedding_dim, dz.into_vec())?;
            let d = self.params.dc_head.backward(top, &dz, &mut grads.dc_head);
            d_top.add_scaled(&d, 1.0)?;
        }

        if let Some(gm) = grad_masks {
            let (head, masks) = match (&self.params.mi_head, &trace.output.masks) {
                (Some(h), Some(m)) => (h, m),
                _ => return Err(Error::invalid("mask gradient supplied to a network without an MI head")),
            };
            let n = cfg.n_speakers;
            if gm.len() != n || gm.iter().any(|g| g.shape() != (frames, bins)) {
                return Err(Error::shape("mask gradient", format!("{n} x {frames} x {bins}"), gm.len()));
            }
            let mut dlogits = Matrix::zeros(frames, bins * n);
            for (i, out) in dlogits.as_mut_slice().chunks_exact_mut(n).enumerate() {
                let mean: f64 = (0..n).map(|s| masks[s].as_slice()[i] * gm[s].as_slice()[i]).sum();
                for (s, o) in out.iter_mut().enumerate() {
                    let p = masks[s].as_slice()[i];
                    *o = p * (gm[s].as_slice()[i] - mean);
                }
            }
            let grad_head = grads.mi_head.as_mut().expect("mirrors params");
            let d = head.backward(top, &dlogits, grad_head);
            d_top.add_scaled(&d, 1.0)?;
        }

        let mut upstream = d_top;
        for l in (0..self.params.trunk.len()).rev() {
            let out = &trace.hidden[l];
            for (u, &y) in upstream.as_mut_slice().iter_mut().zip(out.as_slice()) {
                *u *= cfg.activation.derivative_from_output(y);
            }
            let input = if l == 0 { &trace.input } else { &trace.hidden[l - 1] };
            upstream = self.params.trunk[l].backward(input, &upstream, &mut grads.trunk[l]);
        }
        Ok(grads)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.config;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let put = |out: &mut Vec<u8>, x: usize| out.extend_from_slice(&(x as u32).to_le_bytes());
        put(&mut out, c.input_dim);
        put(&mut out, c.context);
        put(&mut out, c.hidden.len());
        for &h in &c.hidden {
            put(&mut out, h);
        }
        put(&mut out, c.embedding_dim);
        put(&mut out, c.n_speakers);
        out.push(u8::from(c.with_mi_head));
        out.push(match c.activation {
            Activation::Tanh => 0,
            Activation::Relu => 1,
        });
        out.extend_from_slice(&c.seed.to_le_bytes());
        for t in self.params.tensors() {
            for x in t {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err("bad magic".into());
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(format!("unsupported version {version}"));
        }
        let input_dim = r.u32()? as usize;
        let context = r.u32()? as usize;
        let n_hidden = r.u32()? as usize;
        if n_hidden > 1024 {
            return Err(format!("implausible hidden layer count {n_hidden}"));
        }
        let hidden = (0..n_hidden).map(|_| r.u32().map(|h| h as usize)).collect::<std::result::Result<_, _>>()?;
        let embedding_dim = r.u32()? as usize;
        let n_speakers = r.u32()? as usize;
        let with_mi_head = match r.take(1)?[0] {
            0 => false,
            1 => true,
            b => return Err(format!("bad head flag {b}")),
        };
        let activation = match r.take(1)?[0] {
            0 => Activation::Tanh,
            1 => Activation::Relu,
            b => return Err(format!("bad activation tag {b}")),
        };
        let seed = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
        let config = NetworkConfig {
            input_dim,
            context,
            hidden,
            embedding_dim,
            n_speakers,
            with_mi_head,
            activation,
            seed,
        };
        config.validate().map_err(|e| e.to_string())?;
        let expected = checkpoint_param_count(&config);
        if r.remaining() != expected * 8 {
            return Err(format!(
                "expected {} bytes of parameters, found {}",
                expected * 8,
                r.remaining()
            ));
        }
        let mut params = NetworkParams::init(&config).map_err(|e| e.to_string())?;
        for t in params.tensors_mut() {
            for x in t.iter_mut() {
                *x = f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
            }
        }
        Ok(Self { config, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|message| Error::Format {
            path: path.to_path_buf(),
            message,
        })
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SPXE";
pub const CHECKPOINT_VERSION: u32 = 1;

fn checkpoint_param_count(c: &NetworkConfig) -> usize {
    let mut width = c.feature_dim();
    let mut total = 0;
    for &h in &c.hidden {
        total += width * h + h;
        width = h;
    }
    total += width * c.input_dim * c.embedding_dim + c.input_dim * c.embedding_dim;
    if c.with_mi_head {
        total += width * c.input_dim * c.n_speakers + c.input_dim * c.n_speakers;
    }
    total
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos + n;
        let out = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| format!("truncated at byte {}", self.pos))?;
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objective::{affinity_gradient_raw, affinity_loss_raw, TargetMatrix};
    use crate::simplex::TargetMode;

    fn small_config(with_mi_head: bool) -> NetworkConfig {
        NetworkConfig {
            input_dim: 6,
            context: 3,
            hidden: vec![7, 5],
            embedding_dim: 3,
            n_speakers: 2,
            with_mi_head,
            activation: Activation::Tanh,
            seed: 17,
        }
    }

    fn features(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * cols).map(|_| rng.random_range(-1.5..1.5)).collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    #[test]
    fn outputs_are_normalized() {
        let net = Network::new(small_config(true)).unwrap();
        let out = net.forward(&features(4, 18, 1)).unwrap();
        assert_eq!(out.embeddings.rows(), 24);
        for row in out.embeddings.matrix().iter_rows() {
            assert!((norm(row) - 1.0).abs() < 1e-12);
        }
        let masks = out.masks.unwrap();
        for i in 0..24 {
            let s: f64 = masks.iter().map(|m| m.as_slice()[i]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_head_weights_give_constant_embedding() {
        let mut net = Network::new(small_config(false)).unwrap();
        net.params.dc_head.weights = Matrix::zeros(5, 18);
        let b = [0.3, -1.2, 2.0];
        for chunk in net.params.dc_head.bias.chunks_exact_mut(3) {
            chunk.copy_from_slice(&b);
        }
        let nb = norm(&b);
        let out = net.forward(&features(3, 18, 2)).unwrap();
        for row in out.embeddings.matrix().iter_rows() {
            for (x, y) in row.iter().zip(&b) {
                assert!((x - y / nb).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_bad_shapes_and_configs() {
        let net = Network::new(small_config(false)).unwrap();
        assert!(net.forward(&features(3, 17, 0)).is_err());
        let trace = net.forward_trace(&features(3, 18, 0)).unwrap();
        assert!(net.backward(&trace, Some(&Matrix::zeros(2, 3)), None).is_err());
        assert!(net.backward(&trace, None, Some(&[Matrix::zeros(3, 6), Matrix::zeros(3, 6)])).is_err());
        let mut c = small_config(false);
        c.context = 2;
        assert!(Network::new(c).is_err());
        let mut c = small_config(false);
        c.embedding_dim = 1;
        c.n_speakers = 3;
        assert!(Network::new(c).is_err());
    }

    #[test]
    fn radial_and_zero_upstream_give_zero_gradients() {
        let net = Network::new(small_config(true)).unwrap();
        let trace = net.forward_trace(&features(4, 18, 3)).unwrap();
        let mut radial = trace.output.embeddings.matrix().clone();
        radial.scale(2.5);
        let g = net.backward(&trace, Some(&radial), None).unwrap();
        let max = g.tensors().iter().flat_map(|t| t.iter()).fold(0.0f64, |m, x| m.max(x.abs()));
        assert!(max < 1e-12, "{max}");

        let zeros = Matrix::zeros(24, 3);
        let zm = vec![Matrix::zeros(4, 6); 2];
        let g = net.backward(&trace, Some(&zeros), Some(&zm)).unwrap();
        assert!(g.tensors().iter().all(|t| t.iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn affinity_gradient_matches_finite_differences() {
        for activation in [Activation::Tanh, Activation::Relu] {
            let mut cfg = small_config(false);
            cfg.activation = activation;
            let net = Network::new(cfg).unwrap();
            let x = features(4, 18, 4);
            let labels: Vec<usize> = (0..24).map(|i| (i * 7 / 5) % 2).collect();
            let y = TargetMatrix::from_labels(&labels, 2, TargetMode::Simplex).unwrap();
            let loss = |n: &Network| {
                let v = n.forward(&x).unwrap().embeddings;
                affinity_loss_raw(v.matrix(), y.matrix()).unwrap()
            };
            let trace = net.forward_trace(&x).unwrap();
            let gv = affinity_gradient_raw(trace.output.embeddings.matrix(), y.matrix()).unwrap();
            let grads = net.backward(&trace, Some(&gv), None).unwrap();
            let h = 1e-5;
            let mut rng = ChaCha8Rng::seed_from_u64(8);
            for _ in 0..40 {
                let idx = rng.random_range(0..net.params.n_params());
                let mut p = net.clone();
                let base = p.params.get(idx);
                p.params.set(idx, base + h);
                let lp = loss(&p);
                p.params.set(idx, base - h);
                let lm = loss(&p);
                let fd = (lp - lm) / (2.0 * h);
                let a = grads.get(idx);
                let rel = (fd - a).abs() / fd.abs().max(a.abs()).max(1e-6);
                assert!(rel < 1e-5, "{activation}: idx {idx} fd {fd} analytic {a}");
            }
        }
    }

    #[test]
    fn scaling_invariance_of_normalization() {
        let net = Network::new(small_config(false)).unwrap();
        let x = features(2, 18, 5);
        let a = net.forward(&x).unwrap();
        let mut scaled = net.clone();
        scaled.params.dc_head.weights.scale(3.0);
        scaled.params.dc_head.bias.iter_mut().for_each(|b| *b *= 3.0);
        let b = scaled.forward(&x).unwrap();
        assert!(a.embeddings.matrix().max_abs_diff(b.embeddings.matrix()) < 1e-12);
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut net = Network::new(small_config(true)).unwrap();
        net.params.set(3, 0.125);
        let bytes = net.to_bytes();
        assert_eq!(&bytes[..4], b"SPXE");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(Network::from_bytes(&bytes).unwrap(), net);

        assert!(Network::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Network::from_bytes(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(Network::from_bytes(&extra).is_err());
    }

    #[test]
    fn deterministic_per_seed() {
        let a = Network::new(small_config(true)).unwrap();
        let b = Network::new(small_config(true)).unwrap();
        assert_eq!(a, b);
        let mut c = small_config(true);
        c.seed = 18;
        assert_ne!(Network::new(c).unwrap().params, a.params);
    }
}
