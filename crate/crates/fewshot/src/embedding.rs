//! Small differentiable embedding models: identity, a single linear layer,
//! and an MLP with ReLU or leaky-ReLU hidden activations.
//!
//! There is no autodiff graph. `forward` records the per-layer inputs and
//! pre-activations on a tape, and `vjp` replays them with hand-derived
//! reverse-mode rules. Layer `l` computes `Y = X W_l' + b_l` with `W_l`
//! stored as `out x in`, so `dL/dW = dL_dY' X` and `dL/dX = dL_dY W`.

use std::path::Path;

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::FewshotError;

/// Negative-side slope of the leaky activation. The subgradient at exactly
/// zero takes this branch, deterministically.
pub const LEAKY_SLOPE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    LeakyRelu,
}

impl Activation {
    fn apply(&self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    x
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu => {
                if x > 0.0 {
                    x
                } else {
                    LEAKY_SLOPE * x
                }
            }
        }
    }

    fn slope_at(&self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu => {
                if x > 0.0 {
                    1.0
                } else {
                    LEAKY_SLOPE
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingKind {
    Identity,
    Linear,
    Mlp,
}

/// Architecture of the embedding map from `input_dim` to `output_dim`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbeddingSpec {
    pub kind: EmbeddingKind,
    pub input_dim: usize,
    pub output_dim: usize,
    /// Hidden layer widths; used by `mlp` only.
    #[serde(default)]
    pub hidden: Vec<usize>,
    #[serde(default = "default_activation")]
    pub activation: Activation,
}

fn default_activation() -> Activation {
    Activation::LeakyRelu
}

impl EmbeddingSpec {
    pub fn identity(dim: usize) -> Self {
        Self {
            kind: EmbeddingKind::Identity,
            input_dim: dim,
            output_dim: dim,
            hidden: Vec::new(),
            activation: default_activation(),
        }
    }

    pub fn linear(input_dim: usize, output_dim: usize) -> Self {
        Self {
            kind: EmbeddingKind::Linear,
            input_dim,
            output_dim,
            hidden: Vec::new(),
            activation: default_activation(),
        }
    }

    pub fn mlp(input_dim: usize, hidden: Vec<usize>, output_dim: usize) -> Self {
        Self {
            kind: EmbeddingKind::Mlp,
            input_dim,
            output_dim,
            hidden,
            activation: default_activation(),
        }
    }

    pub fn validate(&self) -> Result<(), FewshotError> {
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(FewshotError::InvalidConfig(
                "embedding dims must be at least 1".into(),
            ));
        }
        match self.kind {
            EmbeddingKind::Identity if self.input_dim != self.output_dim => {
                Err(FewshotError::InvalidConfig(format!(
                    "identity embedding needs input_dim = output_dim, got {} and {}",
                    self.input_dim, self.output_dim
                )))
            }
            EmbeddingKind::Mlp if self.hidden.iter().any(|&w| w == 0) => Err(
                FewshotError::InvalidConfig("hidden widths must be at least 1".into()),
            ),
            _ => Ok(()),
        }
    }

    /// Layer widths from input to output; empty for the identity map.
    fn layer_dims(&self) -> Vec<(usize, usize)> {
        match self.kind {
            EmbeddingKind::Identity => Vec::new(),
            EmbeddingKind::Linear => vec![(self.input_dim, self.output_dim)],
            EmbeddingKind::Mlp => {
                let mut widths = vec![self.input_dim];
                widths.extend_from_slice(&self.hidden);
                widths.push(self.output_dim);
                widths.windows(2).map(|w| (w[0], w[1])).collect()
            }
        }
    }
}

/// Named parameter tensors in a fixed order: `layerL.weight` (out x in)
/// followed by `layerL.bias` (1 x out) for each layer L.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterStore {
    entries: Vec<(String, DMatrix<f64>)>,
}

impl ParameterStore {
    pub fn new(entries: Vec<(String, DMatrix<f64>)>) -> Self {
        Self { entries }
    }

    pub fn empty() -> Self {
        Self {
            entries: Vec::new(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&DMatrix<f64>> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut DMatrix<f64>> {
        self.entries
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &DMatrix<f64>)> {
        self.entries.iter().map(|(n, v)| (n.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut DMatrix<f64>)> {
        self.entries.iter_mut().map(|(n, v)| (n.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar parameter count.
    pub fn param_count(&self) -> usize {
        self.entries.iter().map(|(_, v)| v.len()).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|(n, v)| (n.clone(), DMatrix::zeros(v.nrows(), v.ncols())))
                .collect(),
        }
    }

    /// `self += scale * other`, matched entry by entry.
    pub fn axpy(&mut self, scale: f64, other: &ParameterStore) {
        assert_eq!(self.entries.len(), other.entries.len());
        for ((name, value), (other_name, other_value)) in
            self.entries.iter_mut().zip(&other.entries)
        {
            assert_eq!(name, other_name);
            value.zip_apply(other_value, |v, o| *v += scale * o);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for (_, value) in self.entries.iter_mut() {
            *value *= factor;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.entries
            .iter()
            .all(|(_, v)| v.iter().all(|x| x.is_finite()))
    }

    fn matches_spec(&self, spec: &EmbeddingSpec) -> bool {
        let dims = spec.layer_dims();
        if self.entries.len() != 2 * dims.len() {
            return false;
        }
        dims.iter().enumerate().all(|(l, &(input, output))| {
            self.get(&format!("layer{l}.weight"))
                .map(|w| w.shape() == (output, input))
                .unwrap_or(false)
                && self
                    .get(&format!("layer{l}.bias"))
                    .map(|b| b.shape() == (1, output))
                    .unwrap_or(false)
        })
    }
}

/// Activation record from one `forward`, consumed by `vjp`.
///
/// The tape snapshots the parameters it was built with, so a later parameter
/// update cannot silently skew the backward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    spec: EmbeddingSpec,
    params: ParameterStore,
    /// Input to each layer; `layer_inputs[0]` is the raw input matrix.
    layer_inputs: Vec<DMatrix<f64>>,
    /// Pre-activation output of each hidden layer.
    pre_activations: Vec<DMatrix<f64>>,
    output_shape: (usize, usize),
}

/// Kaiming-style uniform init: weights from `U(-b, b)` with
/// `b = sqrt(6 / fan_in)` so the entry variance is `2 / fan_in`; zero biases.
pub fn init_params<R: Rng + ?Sized>(spec: &EmbeddingSpec, rng: &mut R) -> ParameterStore {
    let mut entries = Vec::new();
    for (l, (input, output)) in spec.layer_dims().into_iter().enumerate() {
        let bound = (6.0 / input as f64).sqrt();
        let weight = DMatrix::from_fn(output, input, |_, _| rng.gen_range(-bound..bound));
        entries.push((format!("layer{l}.weight"), weight));
        entries.push((format!("layer{l}.bias"), DMatrix::zeros(1, output)));
    }
    ParameterStore { entries }
}

/// Apply the embedding to a batch of row vectors, returning features and the
/// tape needed for the backward pass.
pub fn forward(
    spec: &EmbeddingSpec,
    params: &ParameterStore,
    inputs: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, Tape), FewshotError> {
    spec.validate()?;
    if inputs.ncols() != spec.input_dim {
        return Err(FewshotError::ShapeMismatch(format!(
            "inputs have dim {} but the spec expects {}",
            inputs.ncols(),
            spec.input_dim
        )));
    }
    if inputs.iter().any(|x| !x.is_finite()) {
        return Err(FewshotError::NonFiniteInput(
            "embedding inputs contain a non-finite value".into(),
        ));
    }
    if !params.matches_spec(spec) {
        return Err(FewshotError::ShapeMismatch(
            "parameter store does not match the embedding spec".into(),
        ));
    }

    let dims = spec.layer_dims();
    let mut layer_inputs = vec![inputs.clone()];
    let mut pre_activations = Vec::new();
    let mut current = inputs.clone();
    for (l, _) in dims.iter().enumerate() {
        let weight = params.get(&format!("layer{l}.weight")).unwrap();
        let bias = params.get(&format!("layer{l}.bias")).unwrap();
        let mut pre = &current * weight.transpose();
        for mut row in pre.row_iter_mut() {
            row += bias.row(0);
        }
        let last = l + 1 == dims.len();
        if last {
            current = pre;
        } else {
            pre_activations.push(pre.clone());
            pre.apply(|x| *x = spec.activation.apply(*x));
            current = pre.clone();
            layer_inputs.push(pre);
        }
    }
    let tape = Tape {
        spec: spec.clone(),
        params: params.clone(),
        layer_inputs,
        pre_activations,
        output_shape: current.shape(),
    };
    Ok((current, tape))
}

/// Reverse-mode gradients for one recorded forward: returns
/// `(dL/d params, dL/d inputs)` for the given `dL/d features`.
pub fn vjp(
    tape: &Tape,
    dl_dfeatures: &DMatrix<f64>,
) -> Result<(ParameterStore, DMatrix<f64>), FewshotError> {
    if dl_dfeatures.shape() != tape.output_shape {
        return Err(FewshotError::StaleTape(format!(
            "dl_dfeatures is {:?} but this tape produced {:?}",
            dl_dfeatures.shape(),
            tape.output_shape
        )));
    }
    let dims = tape.spec.layer_dims();
    let mut grads = tape.params.zeros_like();
    let mut upstream = dl_dfeatures.clone();
    for l in (0..dims.len()).rev() {
        let last = l + 1 == dims.len();
        if !last {
            // Undo the activation: scale by its slope at the pre-activation.
            let pre = &tape.pre_activations[l];
            upstream
                .zip_apply(pre, |g, p| *g *= tape.spec.activation.slope_at(p));
        }
        let input = &tape.layer_inputs[l];
        let weight = tape.params.get(&format!("layer{l}.weight")).unwrap();
        let dl_dw = upstream.transpose() * input;
        let mut dl_db = DMatrix::zeros(1, upstream.ncols());
        for r in 0..upstream.nrows() {
            for c in 0..upstream.ncols() {
                dl_db[(0, c)] += upstream[(r, c)];
            }
        }
        set_grad(&mut grads, &format!("layer{l}.weight"), dl_dw);
        set_grad(&mut grads, &format!("layer{l}.bias"), dl_db);
        upstream = &upstream * weight;
    }
    Ok((grads, upstream))
}

fn set_grad(grads: &mut ParameterStore, name: &str, value: DMatrix<f64>) {
    for (entry_name, entry) in grads.entries.iter_mut() {
        if entry_name == name {
            *entry = value;
            return;
        }
    }
    unreachable!("gradient entry {name} missing from a store built by zeros_like");
}

/// On-disk checkpoint: spec, seed, scale parameter, and named tensors in a
/// versioned JSON container. Round-trips exactly (JSON floats are printed
/// with shortest-exact formatting).
#[derive(Debug, Serialize, Deserialize)]
struct CheckpointFile {
    version: u32,
    seed: u64,
    gamma: f64,
    spec: EmbeddingSpec,
    tensors: Vec<TensorRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

pub const CHECKPOINT_VERSION: u32 = 1;

pub fn save_checkpoint(
    path: &Path,
    spec: &EmbeddingSpec,
    params: &ParameterStore,
    gamma: f64,
    seed: u64,
) -> Result<(), FewshotError> {
    let file = CheckpointFile {
        version: CHECKPOINT_VERSION,
        seed,
        gamma,
        spec: spec.clone(),
        tensors: params
            .iter()
            .map(|(name, value)| TensorRecord {
                name: name.to_string(),
                rows: value.nrows(),
                cols: value.ncols(),
                data: value.as_slice().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_string_pretty(&file).map_err(|e| FewshotError::ParseError {
        location: path.display().to_string(),
        message: e.to_string(),
    })?;
    std::fs::write(path, json)?;
    Ok(())
}

pub fn load_checkpoint(
    path: &Path,
) -> Result<(EmbeddingSpec, ParameterStore, f64, u64), FewshotError> {
    let text = std::fs::read_to_string(path)?;
    let file: CheckpointFile =
        serde_json::from_str(&text).map_err(|e| FewshotError::ParseError {
            location: path.display().to_string(),
            message: e.to_string(),
        })?;
    if file.version != CHECKPOINT_VERSION {
        return Err(FewshotError::ParseError {
            location: path.display().to_string(),
            message: format!("unsupported checkpoint version {}", file.version),
        });
    }
    let mut entries = Vec::new();
    for tensor in file.tensors {
        if tensor.data.len() != tensor.rows * tensor.cols {
            return Err(FewshotError::ParseError {
                location: path.display().to_string(),
                message: format!(
                    "tensor {} claims {}x{} but holds {} values",
                    tensor.name,
                    tensor.rows,
                    tensor.cols,
                    tensor.data.len()
                ),
            });
        }
        entries.push((
            tensor.name,
            DMatrix::from_column_slice(tensor.rows, tensor.cols, &tensor.data),
        ));
    }
    let params = ParameterStore { entries };
    if !params.matches_spec(&file.spec) {
        return Err(FewshotError::ParseError {
            location: path.display().to_string(),
            message: "tensors do not match the embedding spec".into(),
        });
    }
    Ok((file.spec, params, file.gamma, file.seed))
}
