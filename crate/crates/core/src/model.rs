//! The MIL network: a ReLU projector stack with a dropout hook after every
//! activation, an attention (or gated attention) pooling aggregator, and a
//! logistic bag classifier. Backward passes are derived by hand; dropout
//! masks sampled in the forward pass are replayed as constants.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::baselines::{attention_multiplier, spatial_multiplier, vanilla_multiplier};
use crate::data::Bag;
use crate::error::{MilError, Result};
use crate::numerics::{
    dot, matmul, matmul_transa, matmul_transb, sigmoid, softplus, stable_softmax, Matrix, Rng,
};
use crate::pdl::{pdl_forward_with_rate, AttentionMap, Interpolation, Mode, PdlLayerState};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AggregatorKind {
    /// `α = softmax(w1ᵀ tanh(W2 vᵀ))`
    Attention,
    /// `α = softmax(w1ᵀ (tanh(W2 vᵀ) ⊙ σ(U2 vᵀ)))`
    Gated,
}

impl fmt::Display for AggregatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Attention => "abmil",
            Self::Gated => "gated",
        })
    }
}

impl FromStr for AggregatorKind {
    type Err = MilError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "abmil" | "attention" => Ok(Self::Attention),
            "gated" | "abmil-gated" | "abmil_gated" => Ok(Self::Gated),
            other => Err(MilError::Config(format!("unknown aggregator {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    /// Widths of the projector layers; empty means instances feed the
    /// aggregator directly.
    pub projector_dims: Vec<usize>,
    /// Hidden size `D` of the attention network.
    pub attention_dim: usize,
    pub aggregator: AggregatorKind,
}

impl ModelConfig {
    pub fn new(input_dim: usize) -> Self {
        Self {
            input_dim,
            projector_dims: vec![256, 128, 64],
            attention_dim: 128,
            aggregator: AggregatorKind::Attention,
        }
    }

    pub fn embedding_dim(&self) -> usize {
        self.projector_dims
            .last()
            .copied()
            .unwrap_or(self.input_dim)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.attention_dim == 0 || self.projector_dims.contains(&0) {
            return Err(MilError::Config("model dimensions must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    /// `out × in`
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl DenseLayer {
    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }
}

/// Instance-level projector: dense layers, each followed by ReLU.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectorParams {
    pub layers: Vec<DenseLayer>,
}

impl ProjectorParams {
    pub fn validate(&self) -> Result<()> {
        for (i, pair) in self.layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(MilError::Shape(format!(
                    "projector layer {i} outputs {} but layer {} expects {}",
                    pair[0].out_dim(),
                    i + 1,
                    pair[1].in_dim()
                )));
            }
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.bias.len() != l.out_dim() {
                return Err(MilError::Shape(format!("projector layer {i} bias length")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AggregatorParams {
    /// `D × 1`
    pub w1: Matrix,
    /// `D × L`
    pub w2: Matrix,
    /// `D × L` gate weights; present only for the gated aggregator.
    pub u2: Option<Matrix>,
    pub classifier_weight: Vec<f64>,
    pub classifier_bias: f64,
}

impl AggregatorParams {
    pub fn kind(&self) -> AggregatorKind {
        if self.u2.is_some() {
            AggregatorKind::Gated
        } else {
            AggregatorKind::Attention
        }
    }

    pub fn embedding_dim(&self) -> usize {
        self.w2.cols()
    }

    pub fn validate(&self) -> Result<()> {
        let (d, l) = self.w2.shape();
        if d == 0 || l == 0 {
            return Err(MilError::Shape(
                "attention dimensions must be positive".into(),
            ));
        }
        if self.w1.shape() != (d, 1) {
            return Err(MilError::Shape(format!(
                "w1 is {:?}, expected ({d}, 1)",
                self.w1.shape()
            )));
        }
        if let Some(u2) = &self.u2 {
            if u2.shape() != (d, l) {
                return Err(MilError::Shape(format!(
                    "u2 is {:?}, expected ({d}, {l})",
                    u2.shape()
                )));
            }
        }
        if self.classifier_weight.len() != l {
            return Err(MilError::Shape(
                "classifier width differs from embedding width".into(),
            ));
        }
        Ok(())
    }
}

/// All trainable parameters. Gradients use the same type.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub projector: ProjectorParams,
    pub aggregator: AggregatorParams,
}

fn he_matrix(rng: &mut Rng, rows: usize, cols: usize, fan_in: usize) -> Matrix {
    rng.gaussian_matrix(rows, cols, (2.0 / fan_in as f64).sqrt())
}

impl ModelParams {
    /// Gaussian weights with std `sqrt(2 / fan_in)`, zero biases.
    pub fn init(config: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut layers = Vec::with_capacity(config.projector_dims.len());
        let mut fan_in = config.input_dim;
        for &out in &config.projector_dims {
            layers.push(DenseLayer {
                weight: he_matrix(rng, out, fan_in, fan_in),
                bias: vec![0.0; out],
            });
            fan_in = out;
        }
        let l = config.embedding_dim();
        let d = config.attention_dim;
        let w2 = he_matrix(rng, d, l, l);
        let u2 = match config.aggregator {
            AggregatorKind::Gated => Some(he_matrix(rng, d, l, l)),
            AggregatorKind::Attention => None,
        };
        let w1 = he_matrix(rng, d, 1, d);
        let classifier_weight = he_matrix(rng, 1, l, l).into_vec();
        let params = Self {
            projector: ProjectorParams { layers },
            aggregator: AggregatorParams {
                w1,
                w2,
                u2,
                classifier_weight,
                classifier_bias: 0.0,
            },
        };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        self.projector.validate()?;
        self.aggregator.validate()?;
        if let Some(last) = self.projector.layers.last() {
            if last.out_dim() != self.aggregator.embedding_dim() {
                return Err(MilError::Shape(format!(
                    "projector emits {} features, aggregator expects {}",
                    last.out_dim(),
                    self.aggregator.embedding_dim()
                )));
            }
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.projector
            .layers
            .first()
            .map_or(self.aggregator.embedding_dim(), DenseLayer::in_dim)
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for s in z.slices_mut() {
            s.fill(0.0);
        }
        z
    }

    /// Parameter buffers in a fixed order: per projector layer weight then
    /// bias, then `w1`, `w2`, `u2` (gated only), classifier weight and bias.
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for l in &self.projector.layers {
            out.push(l.weight.as_slice());
            out.push(&l.bias);
        }
        let a = &self.aggregator;
        out.push(a.w1.as_slice());
        out.push(a.w2.as_slice());
        if let Some(u2) = &a.u2 {
            out.push(u2.as_slice());
        }
        out.push(&a.classifier_weight);
        out.push(std::slice::from_ref(&a.classifier_bias));
        out
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for l in &mut self.projector.layers {
            out.push(l.weight.as_mut_slice());
            out.push(&mut l.bias);
        }
        let a = &mut self.aggregator;
        out.push(a.w1.as_mut_slice());
        out.push(a.w2.as_mut_slice());
        if let Some(u2) = &mut a.u2 {
            out.push(u2.as_mut_slice());
        }
        out.push(&mut a.classifier_weight);
        out.push(std::slice::from_mut(&mut a.classifier_bias));
        out
    }

    pub fn num_params(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.slices().concat()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(MilError::Shape(format!(
                "{} values for {} parameters",
                flat.len(),
                self.num_params()
            )));
        }
        let mut offset = 0;
        for s in self.slices_mut() {
            s.copy_from_slice(&flat[offset..offset + s.len()]);
            offset += s.len();
        }
        Ok(())
    }
}

/// What to do with a layer's activations after its ReLU.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerHook {
    Identity,
    /// Progressive dropout at the given global rate `P(t)`.
    Pdl {
        global_rate: f64,
        interp: Interpolation,
    },
    Vanilla {
        rate: f64,
    },
    Spatial {
        rate: f64,
    },
    AttentionDrop {
        threshold: f64,
    },
    /// Replays a fixed multiplier, e.g. a mask captured from an earlier pass.
    Frozen(Matrix),
}

/// One projector layer's retained intermediates.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerTrace {
    pub pre_activation: Matrix,
    pub activation: Matrix,
    /// Multiplier applied to `activation` in train mode; `None` is identity.
    pub multiplier: Option<Matrix>,
    pub output: Matrix,
    pub pdl: Option<PdlLayerState>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace {
    pub input: Matrix,
    pub layers: Vec<LayerTrace>,
    /// `tanh(V W2ᵀ)`, `K × D`.
    pub attention_hidden: Matrix,
    /// `σ(V U2ᵀ)` for the gated aggregator.
    pub gate: Option<Matrix>,
    pub scores: Vec<f64>,
    pub alpha: AttentionMap,
    pub bag_embedding: Vec<f64>,
    pub logit: f64,
    pub probability: f64,
}

impl ForwardTrace {
    pub fn embeddings(&self) -> &Matrix {
        self.layers.last().map_or(&self.input, |l| &l.output)
    }

    /// Frozen hooks reproducing this pass's dropout masks.
    pub fn frozen_hooks(&self) -> Vec<LayerHook> {
        self.layers
            .iter()
            .map(|l| match &l.multiplier {
                Some(m) => LayerHook::Frozen(m.clone()),
                None => LayerHook::Identity,
            })
            .collect()
    }
}

fn apply_hook(
    hook: &LayerHook,
    activation: &Matrix,
    rng: &mut Rng,
) -> Result<(Option<Matrix>, Option<PdlLayerState>)> {
    let (k, c) = activation.shape();
    Ok(match hook {
        LayerHook::Identity => (None, None),
        LayerHook::Pdl {
            global_rate,
            interp,
        } => {
            let (_, state) = pdl_forward_with_rate(activation, *global_rate, interp, rng)?;
            let mut m = Matrix::zeros(k, c);
            for (i, &s) in state.mask.scale.iter().enumerate() {
                m.row_mut(i).fill(s);
            }
            (Some(m), Some(state))
        }
        LayerHook::Vanilla { rate } => (Some(vanilla_multiplier(k, c, *rate, rng)?), None),
        LayerHook::Spatial { rate } => (Some(spatial_multiplier(k, c, *rate, rng)?), None),
        LayerHook::AttentionDrop { threshold } => {
            (Some(attention_multiplier(activation, *threshold)?), None)
        }
        LayerHook::Frozen(m) => {
            if m.shape() != (k, c) {
                return Err(MilError::Shape(format!(
                    "frozen mask {:?} for activations {:?}",
                    m.shape(),
                    (k, c)
                )));
            }
            (Some(m.clone()), None)
        }
    })
}

fn project_traced(
    instances: &Matrix,
    params: &ProjectorParams,
    hooks: &[LayerHook],
    mode: Mode,
    rng: &mut Rng,
) -> Result<Vec<LayerTrace>> {
    if instances.rows() == 0 {
        return Err(MilError::Empty("bag"));
    }
    if hooks.len() > params.layers.len() {
        return Err(MilError::Config(format!(
            "{} hooks for {} projector layers",
            hooks.len(),
            params.layers.len()
        )));
    }
    let mut traces: Vec<LayerTrace> = Vec::with_capacity(params.layers.len());
    for (i, layer) in params.layers.iter().enumerate() {
        let input = traces.last().map_or(instances, |t| &t.output);
        let mut pre = matmul_transb(input, &layer.weight)?;
        for row in 0..pre.rows() {
            for (v, b) in pre.row_mut(row).iter_mut().zip(&layer.bias) {
                *v += b;
            }
        }
        let activation = pre.map(|v| v.max(0.0));
        let (multiplier, pdl) = match (mode, hooks.get(i)) {
            (Mode::Train, Some(hook)) => apply_hook(hook, &activation, rng)?,
            _ => (None, None),
        };
        let output = match &multiplier {
            Some(m) => activation.hadamard(m)?,
            None => activation.clone(),
        };
        traces.push(LayerTrace {
            pre_activation: pre,
            activation,
            multiplier,
            output,
            pdl,
        });
    }
    Ok(traces)
}

/// Per-layer embeddings of a bag (post-hook in train mode).
pub fn project(
    bag: &Bag,
    params: &ProjectorParams,
    hooks: &[LayerHook],
    mode: Mode,
    rng: &mut Rng,
) -> Result<Vec<Matrix>> {
    Ok(project_traced(&bag.instances, params, hooks, mode, rng)?
        .into_iter()
        .map(|t| t.output)
        .collect())
}

struct PoolTrace {
    hidden: Matrix,
    gate: Option<Matrix>,
    scores: Vec<f64>,
    alpha: Vec<f64>,
    embedding: Vec<f64>,
}

fn pool_traced(embeddings: &Matrix, params: &AggregatorParams) -> Result<PoolTrace> {
    if embeddings.rows() == 0 {
        return Err(MilError::Empty("bag"));
    }
    if embeddings.cols() != params.embedding_dim() {
        return Err(MilError::Shape(format!(
            "aggregator expects {} features, got {}",
            params.embedding_dim(),
            embeddings.cols()
        )));
    }
    let hidden = matmul_transb(embeddings, &params.w2)?.map(f64::tanh);
    let gate = match &params.u2 {
        Some(u2) => Some(matmul_transb(embeddings, u2)?.map(sigmoid)),
        None => None,
    };
    let w1 = params.w1.as_slice();
    let scores: Vec<f64> = (0..embeddings.rows())
        .map(|k| match &gate {
            Some(g) => hidden
                .row(k)
                .iter()
                .zip(g.row(k))
                .zip(w1)
                .map(|((t, s), w)| t * s * w)
                .sum(),
            None => dot(hidden.row(k), w1),
        })
        .collect();
    let alpha = stable_softmax(&scores)?;
    let mut embedding = vec![0.0; embeddings.cols()];
    for (k, &a) in alpha.iter().enumerate() {
        for (z, v) in embedding.iter_mut().zip(embeddings.row(k)) {
            *z += a * v;
        }
    }
    Ok(PoolTrace {
        hidden,
        gate,
        scores,
        alpha,
        embedding,
    })
}

/// Attention pooling; returns the bag embedding `Σ α_k v_k` and `α`.
///
/// Dispatches on the aggregator: with gate weights present this is the
/// gated variant.
pub fn pool(embeddings: &Matrix, params: &AggregatorParams) -> Result<(Vec<f64>, AttentionMap)> {
    let t = pool_traced(embeddings, params)?;
    Ok((t.embedding, AttentionMap::new(t.alpha)?))
}

/// `α_k = softmax_k(w1ᵀ tanh(W2 v_kᵀ))`.
pub fn attention_pool(
    embeddings: &Matrix,
    params: &AggregatorParams,
) -> Result<(Vec<f64>, AttentionMap)> {
    if params.u2.is_some() {
        return Err(MilError::Config(
            "gate weights given to the plain attention pool".into(),
        ));
    }
    pool(embeddings, params)
}

/// `α_k = softmax_k(w1ᵀ (tanh(W2 v_kᵀ) ⊙ σ(U2 v_kᵀ)))`.
pub fn gated_attention_pool(
    embeddings: &Matrix,
    params: &AggregatorParams,
) -> Result<(Vec<f64>, AttentionMap)> {
    if params.u2.is_none() {
        return Err(MilError::Config("gated pool requires gate weights".into()));
    }
    pool(embeddings, params)
}

/// Full forward pass keeping every intermediate needed by [`backward`].
pub fn forward(
    bag: &Bag,
    params: &ModelParams,
    hooks: &[LayerHook],
    mode: Mode,
    rng: &mut Rng,
) -> Result<ForwardTrace> {
    if bag.feature_dim() != params.input_dim() {
        return Err(MilError::Shape(format!(
            "bag {} has {} features, model expects {}",
            bag.id,
            bag.feature_dim(),
            params.input_dim()
        )));
    }
    let layers = project_traced(&bag.instances, &params.projector, hooks, mode, rng)?;
    let embeddings = layers.last().map_or(&bag.instances, |l| &l.output);
    let pooled = pool_traced(embeddings, &params.aggregator)?;
    let a = &params.aggregator;
    let logit = dot(&a.classifier_weight, &pooled.embedding) + a.classifier_bias;
    if !logit.is_finite() {
        return Err(MilError::NonFinite(format!("logit of bag {}", bag.id)));
    }
    Ok(ForwardTrace {
        input: bag.instances.clone(),
        layers,
        attention_hidden: pooled.hidden,
        gate: pooled.gate,
        scores: pooled.scores,
        alpha: AttentionMap::new(pooled.alpha)?,
        bag_embedding: pooled.embedding,
        logit,
        probability: sigmoid(logit),
    })
}

/// Binary cross-entropy of `sigmoid(logit)` against `label`.
pub fn bce_from_logit(logit: f64, label: bool) -> f64 {
    if label {
        softplus(-logit)
    } else {
        softplus(logit)
    }
}

/// Gradient of the binary cross-entropy loss with respect to every
/// parameter, treating all dropout multipliers in `trace` as constants.
pub fn backward(trace: &ForwardTrace, params: &ModelParams, label: bool) -> Result<ModelParams> {
    if trace.layers.len() != params.projector.layers.len() {
        return Err(MilError::Trace("one layer record per projector layer"));
    }
    let v = trace.embeddings();
    let (k, l) = v.shape();
    let a = &params.aggregator;
    if trace.alpha.len() != k
        || trace.attention_hidden.rows() != k
        || trace.bag_embedding.len() != l
    {
        return Err(MilError::Trace("attention intermediates matching the bag"));
    }
    if a.u2.is_some() != trace.gate.is_some() {
        return Err(MilError::Trace("gate activations for the gated aggregator"));
    }
    let mut grads = params.zeros_like();

    let dlogit = trace.probability - if label { 1.0 } else { 0.0 };
    let ga = &mut grads.aggregator;
    ga.classifier_bias = dlogit;
    for (g, z) in ga.classifier_weight.iter_mut().zip(&trace.bag_embedding) {
        *g = dlogit * z;
    }
    let dz: Vec<f64> = a.classifier_weight.iter().map(|w| dlogit * w).collect();

    let alpha = trace.alpha.weights();
    let mut dv = Matrix::zeros(k, l);
    let dalpha: Vec<f64> = (0..k).map(|i| dot(v.row(i), &dz)).collect();
    for i in 0..k {
        for (d, z) in dv.row_mut(i).iter_mut().zip(&dz) {
            *d = alpha[i] * z;
        }
    }
    let weighted: f64 = alpha.iter().zip(&dalpha).map(|(p, d)| p * d).sum();
    let dscore: Vec<f64> = alpha
        .iter()
        .zip(&dalpha)
        .map(|(p, d)| p * (d - weighted))
        .collect();

    let hidden = &trace.attention_hidden;
    let dim = hidden.cols();
    let w1 = a.w1.as_slice();
    let gw1 = ga.w1.as_mut_slice();
    let mut dpre_t = Matrix::zeros(k, dim);
    match (&trace.gate, &a.u2) {
        (None, None) => {
            for i in 0..k {
                let h = hidden.row(i);
                for j in 0..dim {
                    gw1[j] += dscore[i] * h[j];
                    dpre_t[(i, j)] = dscore[i] * w1[j] * (1.0 - h[j] * h[j]);
                }
            }
        }
        (Some(gate), Some(u2)) => {
            let mut dpre_s = Matrix::zeros(k, dim);
            for i in 0..k {
                let t = hidden.row(i);
                let s = gate.row(i);
                for j in 0..dim {
                    gw1[j] += dscore[i] * t[j] * s[j];
                    let dm = dscore[i] * w1[j];
                    dpre_t[(i, j)] = dm * s[j] * (1.0 - t[j] * t[j]);
                    dpre_s[(i, j)] = dm * t[j] * s[j] * (1.0 - s[j]);
                }
            }
            ga.u2 = Some(matmul_transa(&dpre_s, v)?);
            let back = matmul(&dpre_s, u2)?;
            for (d, b) in dv.as_mut_slice().iter_mut().zip(back.as_slice()) {
                *d += b;
            }
        }
        _ => unreachable!("gate presence checked above"),
    }
    ga.w2 = matmul_transa(&dpre_t, v)?;
    let back = matmul(&dpre_t, &a.w2)?;
    for (d, b) in dv.as_mut_slice().iter_mut().zip(back.as_slice()) {
        *d += b;
    }

    let mut dout = dv;
    for idx in (0..trace.layers.len()).rev() {
        let lt = &trace.layers[idx];
        let layer = &params.projector.layers[idx];
        let mut dpre = match &lt.multiplier {
            Some(m) => dout.hadamard(m)?,
            None => dout,
        };
        for (d, &p) in dpre
            .as_mut_slice()
            .iter_mut()
            .zip(lt.pre_activation.as_slice())
        {
            if p <= 0.0 {
                *d = 0.0;
            }
        }
        let input = if idx == 0 {
            &trace.input
        } else {
            &trace.layers[idx - 1].output
        };
        let gl = &mut grads.projector.layers[idx];
        gl.weight = matmul_transa(&dpre, input)?;
        gl.bias.fill(0.0);
        for row in dpre.row_iter() {
            for (b, d) in gl.bias.iter_mut().zip(row) {
                *b += d;
            }
        }
        dout = if idx > 0 {
            matmul(&dpre, &layer.weight)?
        } else {
            Matrix::zeros(0, 0)
        };
    }
    Ok(grads)
}

/// Loss of the model on one bag with fixed hooks; eval-equivalent when the
/// hooks are identities or frozen masks.
pub fn loss_with_hooks(bag: &Bag, params: &ModelParams, hooks: &[LayerHook]) -> Result<f64> {
    // frozen and identity hooks draw nothing, so any stream works here
    let mut rng = Rng::new(0);
    let trace = forward(bag, params, hooks, Mode::Train, &mut rng)?;
    Ok(bce_from_logit(trace.logit, bag.label))
}
