//! A small convolutional segmentation network.
//!
//! Stack of 3x3 convolutions with tanh activations (two of them strided, so
//! the feature grid is the image at 1/4 resolution), followed by a 1x1
//! classifier conv. Parameters live on the host in [`NetworkParams`] and are
//! inserted into a fresh [`Graph`] every forward pass, which keeps the tape
//! single-use and the optimizer independent of the graph.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::TensorError;
use crate::scalar::Scalar;
use crate::tensor::{Graph, Var};

/// Feature convolutions are 3x3; the classifier is 1x1.
const FEATURE_KERNEL: usize = 3;

// ── architecture ────────────────────────────────────────────────────────────

/// Channel/stride plan. `channels[0]` is the image depth; each consecutive
/// pair is one conv layer with the matching stride.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchConfig {
    pub channels: Vec<usize>,
    pub strides: Vec<usize>,
    pub num_classes: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            channels: vec![3, 16, 16, 16, 16],
            strides: vec![1, 2, 2, 1],
            num_classes: 4,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<(), TensorError> {
        if self.channels.len() < 2 {
            return Err(TensorError::invalid(
                "arch",
                "need at least one conv layer (two channel entries)",
            ));
        }
        if self.strides.len() != self.channels.len() - 1 {
            return Err(TensorError::invalid(
                "arch",
                format!(
                    "{} strides for {} layers",
                    self.strides.len(),
                    self.channels.len() - 1
                ),
            ));
        }
        if self.channels.iter().any(|&c| c == 0) {
            return Err(TensorError::invalid("arch", "zero-width layer"));
        }
        if self.strides.iter().any(|&s| s != 1 && s != 2) {
            return Err(TensorError::invalid("arch", "strides must be 1 or 2"));
        }
        if self.num_classes < 2 {
            return Err(TensorError::invalid("arch", "need at least two classes"));
        }
        Ok(())
    }

    pub fn num_layers(&self) -> usize {
        self.channels.len() - 1
    }

    /// Downsampling factor from image to feature grid.
    pub fn total_stride(&self) -> usize {
        self.strides.iter().product()
    }

    /// Feature channel width fed to the classifier.
    pub fn feature_channels(&self) -> usize {
        *self.channels.last().unwrap()
    }
}

// ── parameters ──────────────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct LayerParams<S> {
    pub weight: Vec<S>,
    pub bias: Vec<S>,
}

/// Host-side parameter storage, in the order the optimizer visits tensors.
#[derive(Clone, Debug)]
pub struct NetworkParams<S> {
    pub arch: ArchConfig,
    pub layers: Vec<LayerParams<S>>,
    pub classifier: LayerParams<S>,
}

impl<S: Scalar> NetworkParams<S> {
    /// Uniform init in +-sqrt(1/fan_in), biases zero, fully determined by
    /// the seed.
    pub fn init(arch: ArchConfig, seed: u64) -> Result<Self, TensorError> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(arch.num_layers());
        for l in 0..arch.num_layers() {
            let (cin, cout) = (arch.channels[l], arch.channels[l + 1]);
            layers.push(init_layer(&mut rng, cout, cin, FEATURE_KERNEL));
        }
        let classifier = init_layer(&mut rng, arch.num_classes, arch.feature_channels(), 1);
        Ok(NetworkParams {
            arch,
            layers,
            classifier,
        })
    }

    /// (name, shape, values) for every tensor, in optimizer order.
    pub fn tensors(&self) -> Vec<(String, Vec<usize>, &[S])> {
        let mut out = Vec::new();
        for (l, lp) in self.layers.iter().enumerate() {
            let (cin, cout) = (self.arch.channels[l], self.arch.channels[l + 1]);
            out.push((
                format!("layer{l}.weight"),
                vec![cout, cin, FEATURE_KERNEL, FEATURE_KERNEL],
                lp.weight.as_slice(),
            ));
            out.push((format!("layer{l}.bias"), vec![cout], lp.bias.as_slice()));
        }
        out.push((
            "classifier.weight".to_string(),
            vec![self.arch.num_classes, self.arch.feature_channels(), 1, 1],
            self.classifier.weight.as_slice(),
        ));
        out.push((
            "classifier.bias".to_string(),
            vec![self.arch.num_classes],
            self.classifier.bias.as_slice(),
        ));
        out
    }

    /// Mutable values in the same order as [`Self::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<S>> {
        let mut out = Vec::new();
        for lp in &mut self.layers {
            out.push(&mut lp.weight);
            out.push(&mut lp.bias);
        }
        out.push(&mut self.classifier.weight);
        out.push(&mut self.classifier.bias);
        out
    }
}

fn init_layer<S: Scalar>(
    rng: &mut ChaCha8Rng,
    cout: usize,
    cin: usize,
    k: usize,
) -> LayerParams<S> {
    let fan_in = cin * k * k;
    let bound = (1.0 / fan_in as f64).sqrt();
    let weight = (0..cout * cin * k * k)
        .map(|_| S::lit((rng.gen::<f64>() * 2.0 - 1.0) * bound))
        .collect();
    LayerParams {
        weight,
        bias: vec![S::zero(); cout],
    }
}

// ── graph insertion and forward pass ────────────────────────────────────────

/// Parameter tensors registered on one tape.
#[derive(Clone, Debug)]
pub struct ParamVars {
    pub layers: Vec<(Var, Var)>,
    pub classifier: (Var, Var),
    strides: Vec<usize>,
}

impl ParamVars {
    /// All parameter vars in the same order as [`NetworkParams::tensors`].
    pub fn all(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for &(w, b) in &self.layers {
            out.push(w);
            out.push(b);
        }
        out.push(self.classifier.0);
        out.push(self.classifier.1);
        out
    }
}

/// Registers every parameter tensor as a leaf. With `trainable` false the
/// leaves take no gradients (inference / frozen evaluation).
pub fn insert_params<S: Scalar>(
    g: &mut Graph<S>,
    params: &NetworkParams<S>,
    trainable: bool,
) -> Result<ParamVars, TensorError> {
    let mut layers = Vec::with_capacity(params.layers.len());
    let mut it = params.tensors().into_iter();
    for _ in 0..params.layers.len() {
        let (_, ws, wv) = it.next().unwrap();
        let (_, bs, bv) = it.next().unwrap();
        let w = g.leaf(&ws, wv.to_vec(), trainable)?;
        let b = g.leaf(&bs, bv.to_vec(), trainable)?;
        layers.push((w, b));
    }
    let (_, ws, wv) = it.next().unwrap();
    let (_, bs, bv) = it.next().unwrap();
    let cw = g.leaf(&ws, wv.to_vec(), trainable)?;
    let cb = g.leaf(&bs, bv.to_vec(), trainable)?;
    Ok(ParamVars {
        layers,
        classifier: (cw, cb),
        strides: params.arch.strides.clone(),
    })
}

/// Everything downstream code needs from one image.
#[derive(Clone, Copy, Debug)]
pub struct NetOutput {
    /// [C, h, w] tanh feature map.
    pub features: Var,
    /// The same features as [C, h*w] pixel columns.
    pub feature_cols: Var,
    /// [M, h, w] classifier logits.
    pub logits: Var,
    /// [M, h*w]; every column is a class distribution.
    pub probs: Var,
    /// Feature grid (h, w).
    pub grid: (usize, usize),
}

/// Full forward pass on an [3, H, W] image (values expected in [0, 1]).
pub fn forward<S: Scalar>(
    g: &mut Graph<S>,
    pv: &ParamVars,
    image: Var,
) -> Result<NetOutput, TensorError> {
    let mut x = image;
    for (&(w, b), &s) in pv.layers.iter().zip(&pv.strides) {
        let y = g.conv2d(x, w, Some(b), s)?;
        x = g.tanh(y)?;
    }
    let features = x;
    let logits = g.conv2d(features, pv.classifier.0, Some(pv.classifier.1), 1)?;
    let shp = g.shape(logits).to_vec();
    let (h, w) = (shp[1], shp[2]);
    let feature_cols = {
        let c = g.shape(features)[0];
        g.reshape(features, &[c, h * w])?
    };
    let probs = probs_from_logits(g, logits)?;
    Ok(NetOutput {
        features,
        feature_cols,
        logits,
        probs,
        grid: (h, w),
    })
}

/// [M, h, w] logits -> [M, h*w] with softmax over classes per pixel.
pub fn probs_from_logits<S: Scalar>(g: &mut Graph<S>, logits: Var) -> Result<Var, TensorError> {
    let shp = g.shape(logits).to_vec();
    if shp.len() != 3 {
        return Err(TensorError::invalid(
            "probs_from_logits",
            format!("expected [M, h, w] logits, got rank {}", shp.len()),
        ));
    }
    let (m, n) = (shp[0], shp[1] * shp[2]);
    let flat = g.reshape(logits, &[m, n])?;
    let t = g.transpose(flat)?; // [n, m], one pixel per row
    let sm = g.softmax_rows(t)?;
    g.transpose(sm) // back to [m, n]
}
