//! Base and auxiliary encoders, feature augmentation and the loss terms.
//!
//! An encoder is a stack of dependency-refined graph convolutions followed by
//! temporal pooling and a mean over joints. The auxiliary encoder's class
//! probabilities `y~` are concatenated onto the base feature `z` to form
//! `z^ = [z, y~]`, which feeds the base classifier and the HSIC term. The
//! auxiliary side acts as a teacher: by default it only learns from its own
//! cross-entropy, and everything the base model consumes from it is
//! stop-gradient.
//!
//! Two forward paths exist. [`base_encode`] / [`aux_predict`] go through the
//! reference loops in [`crate::refinement`]; [`Model::forward`] records the
//! same computation on a [`Tape`] for training. Tests keep them in agreement.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax_rows, Tape, Var};
use crate::error::{Error, Result};
use crate::kernel::{center, hsic, kernel_matrix, label_kernel, MaternParams};
use crate::refinement::{
    dependency_tensor, graph_conv, refine_adjacency, refined_graph_conv, temporal_mean, Activation,
    DependencyParams, GaussianWidth,
};
use crate::skeleton::{center_on_root, self_loop_degrees, MotionSequence, SkeletonGraph};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TemporalPool {
    Mean,
    #[default]
    Max,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub hidden_channels: Vec<usize>,
    pub temporal_pool: TemporalPool,
    pub delta: GaussianWidth,
    pub use_refinement: bool,
}

impl EncoderSpec {
    pub fn new(hidden_channels: Vec<usize>, delta: f64) -> Result<Self> {
        let spec = Self {
            hidden_channels,
            temporal_pool: TemporalPool::Max,
            delta: GaussianWidth::new(delta)?,
            use_refinement: true,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn num_blocks(&self) -> usize {
        self.hidden_channels.len()
    }

    pub fn output_dim(&self) -> usize {
        *self.hidden_channels.last().expect("validated")
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_channels.is_empty() {
            return Err(Error::InvalidParameter(
                "encoder needs at least one block".into(),
            ));
        }
        if self.hidden_channels.contains(&0) {
            return Err(Error::InvalidParameter(
                "hidden channel counts must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Base,
    Auxiliary,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Base => "base",
            Role::Auxiliary => "aux",
        }
    }
}

/// `phi` and the per-channel scales of one block. Bias and scales are stored
/// as `1 x C'` rows so every parameter is a matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct RefinementParams {
    pub phi_weights: Array2<f64>,
    pub phi_bias: Array2<f64>,
    pub channel_scale: Array2<f64>,
}

impl RefinementParams {
    pub fn as_dependency_params(&self) -> DependencyParams {
        DependencyParams {
            phi_weights: self.phi_weights.clone(),
            phi_bias: self.phi_bias.row(0).to_owned(),
            channel_scale: self.channel_scale.row(0).to_owned(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub weight: Array2<f64>,
    pub refinement: Option<RefinementParams>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub role: Role,
    pub spec: EncoderSpec,
    pub blocks: Vec<BlockParams>,
    pub classifier_weight: Array2<f64>,
    pub classifier_bias: Array2<f64>,
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, bound: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-bound..bound))
}

impl ModelParams {
    /// Fan-in uniform initialization; refinement scales and all biases start
    /// at zero, so a fresh encoder is exactly the plain graph convolution.
    pub fn init(
        role: Role,
        spec: EncoderSpec,
        in_channels: usize,
        classifier_in: usize,
        num_classes: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        spec.validate()?;
        let mut blocks = Vec::with_capacity(spec.num_blocks());
        let mut c_in = in_channels;
        for &c_out in &spec.hidden_channels {
            let bound = 1.0 / (c_in as f64).sqrt();
            let weight = uniform(rng, c_in, c_out, bound);
            let refinement = spec.use_refinement.then(|| RefinementParams {
                phi_weights: uniform(rng, c_in, c_out, bound),
                phi_bias: Array2::zeros((1, c_out)),
                channel_scale: Array2::zeros((1, c_out)),
            });
            blocks.push(BlockParams { weight, refinement });
            c_in = c_out;
        }
        let bound = 1.0 / (classifier_in as f64).sqrt();
        Ok(Self {
            role,
            spec,
            blocks,
            classifier_weight: uniform(rng, classifier_in, num_classes, bound),
            classifier_bias: Array2::zeros((1, num_classes)),
        })
    }

    pub fn num_classes(&self) -> usize {
        self.classifier_weight.ncols()
    }

    /// Parameter arrays in declaration order, with qualified names.
    pub fn arrays(&self) -> Vec<(String, &Array2<f64>)> {
        let prefix = self.role.as_str();
        let mut out = Vec::new();
        for (b, block) in self.blocks.iter().enumerate() {
            out.push((format!("{prefix}.block{b}.weight"), &block.weight));
            if let Some(r) = &block.refinement {
                out.push((format!("{prefix}.block{b}.phi_weights"), &r.phi_weights));
                out.push((format!("{prefix}.block{b}.phi_bias"), &r.phi_bias));
                out.push((format!("{prefix}.block{b}.channel_scale"), &r.channel_scale));
            }
        }
        out.push((
            format!("{prefix}.classifier.weight"),
            &self.classifier_weight,
        ));
        out.push((format!("{prefix}.classifier.bias"), &self.classifier_bias));
        out
    }

    pub fn arrays_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut out = Vec::new();
        for block in &mut self.blocks {
            out.push(&mut block.weight);
            if let Some(r) = &mut block.refinement {
                out.push(&mut r.phi_weights);
                out.push(&mut r.phi_bias);
                out.push(&mut r.channel_scale);
            }
        }
        out.push(&mut self.classifier_weight);
        out.push(&mut self.classifier_bias);
        out
    }

    pub fn is_finite(&self) -> bool {
        self.arrays()
            .iter()
            .all(|(_, a)| a.iter().all(|v| v.is_finite()))
    }
}

/// Plain graph-constant pieces shared by every block of a forward pass.
struct GraphTerms {
    joints: usize,
    /// Row `i*N + j`: `(A + I)_ij / sqrt(d_i d_j)`.
    static_norm: Vec<f64>,
    /// Row `i*N + j`: `1 / sqrt(d_i d_j)`.
    inv_sqrt: Vec<f64>,
}

impl GraphTerms {
    fn new(graph: &SkeletonGraph) -> Self {
        let n = graph.num_joints();
        let a = graph.adjacency();
        let d = self_loop_degrees(a);
        let mut static_norm = Vec::with_capacity(n * n);
        let mut inv_sqrt = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                let s = (d[i] * d[j]).sqrt();
                let self_loop = if i == j { 1.0 } else { 0.0 };
                static_norm.push((a[[i, j]] + self_loop) / s);
                inv_sqrt.push(1.0 / s);
            }
        }
        Self {
            joints: n,
            static_norm,
            inv_sqrt,
        }
    }

    fn broadcast(&self, channels: usize) -> Array2<f64> {
        let n2 = self.joints * self.joints;
        Array2::from_shape_fn((n2, channels), |(r, _)| self.static_norm[r])
    }
}

fn check_sequence(seq: &MotionSequence, graph: &SkeletonGraph, in_channels: usize) -> Result<()> {
    if seq.num_joints() != graph.num_joints() {
        return Err(Error::Shape(format!(
            "sequence has {} joints, skeleton has {}",
            seq.num_joints(),
            graph.num_joints()
        )));
    }
    if seq.channels() != in_channels {
        return Err(Error::Shape(format!(
            "sequence has {} channels, model expects {in_channels}",
            seq.channels()
        )));
    }
    Ok(())
}

fn in_channels(params: &ModelParams) -> usize {
    params.blocks[0].weight.nrows()
}

/// Encoder feature through the reference (tape-free) path.
pub fn encode(
    seq: &MotionSequence,
    params: &ModelParams,
    graph: &SkeletonGraph,
) -> Result<Array1<f64>> {
    check_sequence(seq, graph, in_channels(params))?;
    let a = graph.adjacency();
    let mut x = seq.data().clone();
    for block in &params.blocks {
        x = match &block.refinement {
            Some(r) => {
                let dp = r.as_dependency_params();
                let features = temporal_mean(&x);
                let dep = dependency_tensor(&features, params.spec.delta, &dp)?;
                let refined = refine_adjacency(a, &dep, &dp)?;
                refined_graph_conv(&x, &refined, &block.weight, Activation::Relu)?
            }
            None => graph_conv(&x, a, &block.weight, Activation::Relu)?,
        };
    }
    let pooled = match params.spec.temporal_pool {
        TemporalPool::Mean => temporal_mean(&x),
        TemporalPool::Max => x.fold_axis(Axis(0), f64::NEG_INFINITY, |m, &v| m.max(v)),
    };
    let z = pooled.mean_axis(Axis(0)).expect("non-empty joints");
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("encoder output".into()));
    }
    Ok(z)
}

/// Base feature `z` (reference path).
pub fn base_encode(
    seq: &MotionSequence,
    params: &ModelParams,
    graph: &SkeletonGraph,
) -> Result<Array1<f64>> {
    encode(seq, params, graph)
}

/// `(z~, y~, logits)` of the auxiliary model (reference path).
pub fn aux_predict(
    seq: &MotionSequence,
    params: &ModelParams,
    graph: &SkeletonGraph,
) -> Result<(Array1<f64>, Array1<f64>, Array1<f64>)> {
    let z = encode(seq, params, graph)?;
    let logits = z.dot(&params.classifier_weight) + params.classifier_bias.row(0);
    let probs = softmax_rows(&logits.clone().insert_axis(Axis(0)))
        .row(0)
        .to_owned();
    Ok((z, probs, logits))
}

pub fn augment(z: &Array1<f64>, y_tilde: &Array1<f64>) -> Array1<f64> {
    ndarray::concatenate(Axis(0), &[z.view(), y_tilde.view()]).expect("1-d concatenation")
}

fn check_labels(labels: &[usize], num_classes: usize) -> Result<()> {
    if let Some(&label) = labels.iter().find(|&&l| l >= num_classes) {
        return Err(Error::LabelOutOfRange { label, num_classes });
    }
    Ok(())
}

fn log_sum_exp(row: ndarray::ArrayView1<f64>) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Mean cross-entropy of row-wise logits.
pub fn classification_loss(logits: &Array2<f64>, labels: &[usize]) -> Result<f64> {
    if logits.nrows() == 0 {
        return Err(Error::Empty("logit batch".into()));
    }
    if logits.nrows() != labels.len() {
        return Err(Error::Shape(format!(
            "{} logit rows for {} labels",
            logits.nrows(),
            labels.len()
        )));
    }
    check_labels(labels, logits.ncols())?;
    let total: f64 = logits
        .rows()
        .into_iter()
        .zip(labels)
        .map(|(row, &y)| log_sum_exp(row) - row[y])
        .sum();
    Ok(total / labels.len() as f64)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "i64", into = "i64")]
pub enum HsicSign {
    Plus,
    /// Rewards feature/label dependence when the total is minimized.
    #[default]
    Minus,
}

impl HsicSign {
    pub fn as_f64(self) -> f64 {
        match self {
            HsicSign::Plus => 1.0,
            HsicSign::Minus => -1.0,
        }
    }
}

impl TryFrom<i64> for HsicSign {
    type Error = Error;

    fn try_from(v: i64) -> Result<Self> {
        match v {
            1 => Ok(HsicSign::Plus),
            -1 => Ok(HsicSign::Minus),
            other => Err(Error::InvalidParameter(format!(
                "HSIC sign must be +1 or -1, got {other}"
            ))),
        }
    }
}

impl From<HsicSign> for i64 {
    fn from(s: HsicSign) -> i64 {
        s.as_f64() as i64
    }
}

impl FromStr for HsicSign {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "+1" | "1" | "+" => Ok(HsicSign::Plus),
            "-1" | "-" => Ok(HsicSign::Minus),
            other => Err(Error::InvalidParameter(format!(
                "HSIC sign must be +1 or -1, got '{other}'"
            ))),
        }
    }
}

impl fmt::Display for HsicSign {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HsicSign::Plus => "+1",
            HsicSign::Minus => "-1",
        })
    }
}

/// `sign * weight * HSIC(K(z^), K_y)`.
pub fn hsic_objective(
    z_hat: &Array2<f64>,
    labels: &[usize],
    num_classes: usize,
    matern: &MaternParams,
    sign: HsicSign,
    weight: f64,
) -> Result<f64> {
    if z_hat.nrows() != labels.len() {
        return Err(Error::Shape(format!(
            "{} feature rows for {} labels",
            z_hat.nrows(),
            labels.len()
        )));
    }
    let kz = kernel_matrix(z_hat.view(), matern)?;
    let ky = label_kernel(labels, num_classes)?;
    Ok(sign.as_f64() * weight * hsic(&kz, &ky)?)
}

fn check_temperature(temperature: f64) -> Result<()> {
    if temperature > 0.0 && temperature.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!(
            "temperature must be positive, got {temperature}"
        )))
    }
}

/// Batch mean of `KL(softmax(base / P) || softmax(aux / P))`.
pub fn distillation_loss(
    base_logits: &Array2<f64>,
    aux_logits: &Array2<f64>,
    temperature: f64,
) -> Result<f64> {
    check_temperature(temperature)?;
    if base_logits.dim() != aux_logits.dim() {
        return Err(Error::Shape(format!(
            "logit shapes differ: {:?} vs {:?}",
            base_logits.dim(),
            aux_logits.dim()
        )));
    }
    if base_logits.nrows() == 0 {
        return Err(Error::Empty("logit batch".into()));
    }
    let mut total = 0.0;
    for (p_row, q_row) in base_logits.rows().into_iter().zip(aux_logits.rows()) {
        let p_row = p_row.mapv(|v| v / temperature);
        let q_row = q_row.mapv(|v| v / temperature);
        let lp = log_sum_exp(p_row.view());
        let lq = log_sum_exp(q_row.view());
        for (a, b) in p_row.iter().zip(&q_row) {
            let log_p = a - lp;
            total += log_p.exp() * (log_p - (b - lq));
        }
    }
    // Rounding can leave a tiny negative value for identical distributions.
    Ok((total / base_logits.nrows() as f64).max(0.0))
}

/// Loss terms of one batch; `total = (l_cls + sign*weight*hsic_term) + l_ce_aux + l_d`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_cls: f64,
    pub hsic_term: f64,
    pub l_ce_aux: f64,
    pub l_d: f64,
    pub total: f64,
    pub hsic_sign: f64,
    pub hsic_weight: f64,
}

impl LossBreakdown {
    pub fn new(
        l_cls: f64,
        hsic_term: f64,
        l_ce_aux: f64,
        l_d: f64,
        sign: HsicSign,
        weight: f64,
    ) -> Self {
        let s = sign.as_f64();
        Self {
            l_cls,
            hsic_term,
            l_ce_aux,
            l_d,
            total: (l_cls + s * weight * hsic_term) + l_ce_aux + l_d,
            hsic_sign: s,
            hsic_weight: weight,
        }
    }

    pub fn zero(sign: HsicSign, weight: f64) -> Self {
        Self::new(0.0, 0.0, 0.0, 0.0, sign, weight)
    }

    /// Running sum, used to average over the batches of an epoch.
    pub fn accumulate(&mut self, other: &LossBreakdown, weight: f64) {
        self.l_cls += weight * other.l_cls;
        self.hsic_term += weight * other.hsic_term;
        self.l_ce_aux += weight * other.l_ce_aux;
        self.l_d += weight * other.l_d;
        self.total += weight * other.total;
    }
}

/// Which loss terms enter the objective, and how.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub hsic_sign: HsicSign,
    pub hsic_weight: f64,
    pub use_hsic: bool,
    pub use_distill: bool,
    pub temperature: f64,
    pub matern: MaternParams,
    /// Treat everything the base model reads from the auxiliary model as a
    /// constant.
    pub detach_teacher: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            hsic_sign: HsicSign::Minus,
            hsic_weight: 1.0,
            use_hsic: true,
            use_distill: true,
            temperature: 1.0,
            matern: MaternParams::default(),
            detach_teacher: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        check_temperature(self.temperature)?;
        self.matern.validate()?;
        if !self.hsic_weight.is_finite() || self.hsic_weight < 0.0 {
            return Err(Error::InvalidParameter(format!(
                "HSIC weight must be non-negative, got {}",
                self.hsic_weight
            )));
        }
        Ok(())
    }
}

/// Restricts the differentiated objective to a subset of terms. The
/// breakdown always reports every enabled term.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TermMask {
    pub cls: bool,
    pub hsic: bool,
    pub ce_aux: bool,
    pub distill: bool,
}

impl TermMask {
    pub const ALL: TermMask = TermMask {
        cls: true,
        hsic: true,
        ce_aux: true,
        distill: true,
    };

    pub fn only_cls() -> Self {
        Self {
            cls: true,
            hsic: false,
            ce_aux: false,
            distill: false,
        }
    }

    pub fn only_hsic() -> Self {
        Self {
            cls: false,
            hsic: true,
            ce_aux: false,
            distill: false,
        }
    }

    pub fn only_ce_aux() -> Self {
        Self {
            cls: false,
            hsic: false,
            ce_aux: true,
            distill: false,
        }
    }

    pub fn only_distill() -> Self {
        Self {
            cls: false,
            hsic: false,
            ce_aux: false,
            distill: true,
        }
    }
}

/// Teacher outputs held fixed, for finite-difference checks of the
/// stop-gradient objective.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenTeacher {
    pub y_tilde: Array2<f64>,
    pub aux_logits: Array2<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TeacherMode {
    /// Gradients flow from the base objective into the auxiliary model.
    Live,
    Detached,
}

#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub l_cls: Var,
    pub hsic_term: Option<Var>,
    pub l_ce_aux: Option<Var>,
    pub l_d: Option<Var>,
    /// The differentiated objective under the requested mask.
    pub objective: Var,
}

/// One batch recorded on a tape.
pub struct ForwardPass {
    pub tape: Tape,
    /// One leaf per parameter array, in [`Model::arrays`] order.
    pub params: Vec<Var>,
    pub z: Var,
    pub z_tilde: Option<Var>,
    pub y_tilde: Option<Var>,
    pub z_hat: Var,
    pub base_logits: Var,
    pub aux_logits: Option<Var>,
    /// Aux logits as seen by the distillation term.
    teacher_logits: Option<Var>,
}

struct BlockVars {
    weight: Var,
    refinement: Option<(Var, Var, Var)>,
}

struct EncoderVars {
    blocks: Vec<BlockVars>,
    classifier_weight: Var,
    classifier_bias: Var,
}

fn leaves(tape: &mut Tape, params: &ModelParams, out: &mut Vec<Var>) -> EncoderVars {
    let mut blocks = Vec::with_capacity(params.blocks.len());
    for block in &params.blocks {
        let weight = tape.leaf(block.weight.clone());
        out.push(weight);
        let refinement = block.refinement.as_ref().map(|r| {
            let vars = (
                tape.leaf(r.phi_weights.clone()),
                tape.leaf(r.phi_bias.clone()),
                tape.leaf(r.channel_scale.clone()),
            );
            out.extend([vars.0, vars.1, vars.2]);
            vars
        });
        blocks.push(BlockVars { weight, refinement });
    }
    let classifier_weight = tape.leaf(params.classifier_weight.clone());
    let classifier_bias = tape.leaf(params.classifier_bias.clone());
    out.extend([classifier_weight, classifier_bias]);
    EncoderVars {
        blocks,
        classifier_weight,
        classifier_bias,
    }
}

fn encode_on_tape(
    tape: &mut Tape,
    graph: &GraphTerms,
    spec: &EncoderSpec,
    vars: &EncoderVars,
    static_adj: &[Option<Var>],
    input: Array2<f64>,
) -> Var {
    let n = graph.joints;
    let frames = input.nrows() / n;
    let mut x = tape.leaf(input);
    for (b, block) in vars.blocks.iter().enumerate() {
        let adj = match block.refinement {
            Some((phi_w, phi_b, scale)) => {
                let features = tape.group_mean(x, frames);
                let corr = tape.pairwise_gauss(features, spec.delta.get());
                let r = tape.matmul(corr, phi_w);
                let r = tape.add_row(r, phi_b);
                let r = tape.mul_row(r, scale);
                tape.affine_rows(r, graph.inv_sqrt.clone(), &graph.static_norm)
            }
            None => static_adj[b].expect("static adjacency for unrefined block"),
        };
        let h = tape.matmul(x, block.weight);
        let h = tape.propagate(adj, h, n);
        x = tape.relu(h);
    }
    let pooled = match spec.temporal_pool {
        TemporalPool::Mean => tape.group_mean(x, frames),
        TemporalPool::Max => tape.group_max(x, frames),
    };
    tape.mean_rows(pooled)
}

fn encode_batch(
    tape: &mut Tape,
    graph: &GraphTerms,
    params: &ModelParams,
    vars: &EncoderVars,
    inputs: &[Array2<f64>],
) -> Var {
    let static_adj: Vec<Option<Var>> = params
        .blocks
        .iter()
        .zip(&params.spec.hidden_channels)
        .map(|(block, &c)| {
            block
                .refinement
                .is_none()
                .then(|| tape.leaf(graph.broadcast(c)))
        })
        .collect();
    let rows: Vec<Var> = inputs
        .iter()
        .map(|x| encode_on_tape(tape, graph, &params.spec, vars, &static_adj, x.clone()))
        .collect();
    tape.stack_rows(rows)
}

fn classify(tape: &mut Tape, features: Var, vars: &EncoderVars) -> Var {
    let logits = tape.matmul(features, vars.classifier_weight);
    tape.add_row(logits, vars.classifier_bias)
}

/// Per-sample features; `z_tilde`/`y_tilde` are absent without an auxiliary model.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBundle {
    pub z: Array1<f64>,
    pub z_tilde: Option<Array1<f64>>,
    pub y_tilde: Option<Array1<f64>>,
    pub z_hat: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub graph: SkeletonGraph,
    pub num_classes: usize,
    pub in_channels: usize,
    /// Subtract the first root position of each sequence before encoding.
    pub center_inputs: bool,
    pub base: ModelParams,
    pub aux: Option<ModelParams>,
}

impl Model {
    pub fn init(
        graph: SkeletonGraph,
        num_classes: usize,
        in_channels: usize,
        base_spec: EncoderSpec,
        aux_spec: Option<EncoderSpec>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::InvalidParameter(format!(
                "need at least 2 classes, got {num_classes}"
            )));
        }
        if in_channels == 0 {
            return Err(Error::InvalidParameter(
                "input channels must be positive".into(),
            ));
        }
        let z_dim = base_spec.output_dim();
        let base_in = z_dim + if aux_spec.is_some() { num_classes } else { 0 };
        let base = ModelParams::init(
            Role::Base,
            base_spec,
            in_channels,
            base_in,
            num_classes,
            rng,
        )?;
        let aux = match aux_spec {
            Some(spec) => {
                let dim = spec.output_dim();
                Some(ModelParams::init(
                    Role::Auxiliary,
                    spec,
                    in_channels,
                    dim,
                    num_classes,
                    rng,
                )?)
            }
            None => None,
        };
        Ok(Self {
            graph,
            num_classes,
            in_channels,
            center_inputs: false,
            base,
            aux,
        })
    }

    pub fn arrays(&self) -> Vec<(String, &Array2<f64>)> {
        let mut out = self.base.arrays();
        if let Some(aux) = &self.aux {
            out.extend(aux.arrays());
        }
        out
    }

    pub fn arrays_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut out = self.base.arrays_mut();
        if let Some(aux) = &mut self.aux {
            out.extend(aux.arrays_mut());
        }
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.arrays().iter().map(|(_, a)| a.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.base.is_finite() && self.aux.as_ref().is_none_or(|a| a.is_finite())
    }

    fn prepare(&self, seq: &MotionSequence) -> Result<Array2<f64>> {
        check_sequence(seq, &self.graph, self.in_channels)?;
        if self.center_inputs {
            Ok(center_on_root(seq, &self.graph)?.as_matrix())
        } else {
            Ok(seq.as_matrix())
        }
    }

    /// Records a batch on a fresh tape. With `frozen`, the auxiliary outputs
    /// consumed by the base model are replaced by the given constants.
    pub fn forward(
        &self,
        batch: &[&MotionSequence],
        mode: TeacherMode,
        frozen: Option<&FrozenTeacher>,
    ) -> Result<ForwardPass> {
        if batch.is_empty() {
            return Err(Error::Empty("batch".into()));
        }
        let inputs = batch
            .iter()
            .map(|s| self.prepare(s))
            .collect::<Result<Vec<_>>>()?;
        let graph = GraphTerms::new(&self.graph);
        let mut tape = Tape::new();
        let mut params = Vec::new();
        let base_vars = leaves(&mut tape, &self.base, &mut params);
        let aux_vars = self
            .aux
            .as_ref()
            .map(|aux| leaves(&mut tape, aux, &mut params));

        let z = encode_batch(&mut tape, &graph, &self.base, &base_vars, &inputs);
        let (z_tilde, y_tilde, aux_logits, z_hat, teacher_logits) = match (&self.aux, &aux_vars) {
            (Some(aux), Some(vars)) => {
                let z_tilde = encode_batch(&mut tape, &graph, aux, vars, &inputs);
                let aux_logits = classify(&mut tape, z_tilde, vars);
                let y_tilde = tape.softmax(aux_logits);
                let (y_in, teacher) = match (frozen, mode) {
                    (Some(f), _) => {
                        if f.y_tilde.nrows() != batch.len() || f.aux_logits.nrows() != batch.len() {
                            return Err(Error::Shape("frozen teacher does not match batch".into()));
                        }
                        (
                            tape.leaf(f.y_tilde.clone()),
                            tape.leaf(f.aux_logits.clone()),
                        )
                    }
                    (None, TeacherMode::Detached) => {
                        (tape.detach(y_tilde), tape.detach(aux_logits))
                    }
                    (None, TeacherMode::Live) => (y_tilde, aux_logits),
                };
                let z_hat = tape.concat_cols(z, y_in);
                (
                    Some(z_tilde),
                    Some(y_tilde),
                    Some(aux_logits),
                    z_hat,
                    Some(teacher),
                )
            }
            _ => (None, None, None, z, None),
        };
        let base_logits = classify(&mut tape, z_hat, &base_vars);
        if tape.value(base_logits).iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("base logits".into()));
        }
        Ok(ForwardPass {
            tape,
            params,
            z,
            z_tilde,
            y_tilde,
            z_hat,
            base_logits,
            aux_logits,
            teacher_logits,
        })
    }

    /// Teacher outputs at the current parameters.
    pub fn frozen_teacher(&self, batch: &[&MotionSequence]) -> Result<Option<FrozenTeacher>> {
        let fp = self.forward(batch, TeacherMode::Detached, None)?;
        Ok(match (fp.y_tilde, fp.aux_logits) {
            (Some(y), Some(l)) => Some(FrozenTeacher {
                y_tilde: fp.tape.value(y).clone(),
                aux_logits: fp.tape.value(l).clone(),
            }),
            _ => None,
        })
    }

    /// Adds the loss terms to a recorded batch.
    pub fn attach_losses(
        &self,
        fp: &mut ForwardPass,
        labels: &[usize],
        config: &LossConfig,
        mask: TermMask,
    ) -> Result<(LossVars, LossBreakdown)> {
        config.validate()?;
        let n = fp.tape.value(fp.base_logits).nrows();
        if labels.len() != n {
            return Err(Error::Shape(format!(
                "{n} samples for {} labels",
                labels.len()
            )));
        }
        check_labels(labels, self.num_classes)?;
        let tape = &mut fp.tape;
        let l_cls = tape.cross_entropy(fp.base_logits, labels);
        let hsic_term = if config.use_hsic {
            if n < 2 {
                return Err(Error::InvalidParameter(
                    "HSIC needs a batch of at least 2".into(),
                ));
            }
            let ky = center(&label_kernel(labels, self.num_classes)?.values);
            Some(tape.hsic(fp.z_hat, ky, config.matern))
        } else {
            None
        };
        let l_ce_aux = fp.aux_logits.map(|l| tape.cross_entropy(l, labels));
        let l_d = match (config.use_distill, fp.teacher_logits) {
            (true, Some(teacher)) => Some(tape.kl_div(fp.base_logits, teacher, config.temperature)),
            _ => None,
        };

        let s = config.hsic_sign.as_f64() * config.hsic_weight;
        let mut terms = Vec::new();
        if mask.cls {
            terms.push((l_cls, 1.0));
        }
        if let (true, Some(h)) = (mask.hsic, hsic_term) {
            terms.push((h, s));
        }
        if let (true, Some(c)) = (mask.ce_aux, l_ce_aux) {
            terms.push((c, 1.0));
        }
        if let (true, Some(d)) = (mask.distill, l_d) {
            terms.push((d, 1.0));
        }
        let objective = tape.weighted_sum(terms);

        let value = |v: Option<Var>| v.map_or(0.0, |v| tape.scalar_value(v));
        let breakdown = LossBreakdown::new(
            tape.scalar_value(l_cls),
            value(hsic_term),
            value(l_ce_aux),
            value(l_d),
            config.hsic_sign,
            config.hsic_weight,
        );
        if !breakdown.total.is_finite() {
            return Err(Error::NonFinite("training objective".into()));
        }
        Ok((
            LossVars {
                l_cls,
                hsic_term,
                l_ce_aux,
                l_d,
                objective,
            },
            breakdown,
        ))
    }

    /// Loss breakdown of a batch at the current parameters.
    pub fn total_loss(
        &self,
        batch: &[&MotionSequence],
        labels: &[usize],
        config: &LossConfig,
    ) -> Result<LossBreakdown> {
        let mut fp = self.forward(batch, TeacherMode::Detached, None)?;
        Ok(self
            .attach_losses(&mut fp, labels, config, TermMask::ALL)?
            .1)
    }

    /// Per-sample features through the tape path.
    pub fn features(&self, batch: &[&MotionSequence]) -> Result<Vec<FeatureBundle>> {
        let fp = self.forward(batch, TeacherMode::Detached, None)?;
        let t = &fp.tape;
        let row = |v: Option<Var>, i: usize| v.map(|v| t.value(v).row(i).to_owned());
        Ok((0..batch.len())
            .map(|i| FeatureBundle {
                z: t.value(fp.z).row(i).to_owned(),
                z_tilde: row(fp.z_tilde, i),
                y_tilde: row(fp.y_tilde, i),
                z_hat: t.value(fp.z_hat).row(i).to_owned(),
            })
            .collect())
    }

    /// Softmax scores of the base classifier, one row per sequence.
    pub fn predict_scores(&self, seqs: &[&MotionSequence], chunk: usize) -> Result<Array2<f64>> {
        let mut rows = Vec::with_capacity(seqs.len());
        for part in seqs.chunks(chunk.max(1)) {
            let fp = self.forward(part, TeacherMode::Detached, None)?;
            rows.push(softmax_rows(fp.tape.value(fp.base_logits)));
        }
        if rows.is_empty() {
            return Ok(Array2::zeros((0, self.num_classes)));
        }
        let views: Vec<_> = rows.iter().map(|r| r.view()).collect();
        Ok(ndarray::concatenate(Axis(0), &views).expect("equal widths"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{generate_synthetic, SynthesisSpec};
    use ndarray::{array, Array3};
    use proptest::prelude::{any, prop_assert, prop_assert_eq, proptest, ProptestConfig};
    use rand::SeedableRng;

    fn tiny_model(seed: u64, refine: bool, aux: bool) -> Model {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let graph = SkeletonGraph::binary_tree(3).unwrap();
        let mut base = EncoderSpec::new(vec![4, 5], 1.0).unwrap();
        base.use_refinement = refine;
        let aux_spec = aux.then(|| EncoderSpec::new(vec![3], 1.0).unwrap());
        let mut model = Model::init(graph, 3, 2, base, aux_spec, &mut rng).unwrap();
        for a in model.arrays_mut() {
            a.mapv_inplace(|_| rng.random_range(-0.8..0.8));
        }
        model
    }

    fn random_seq(rng: &mut ChaCha8Rng, t: usize, n: usize, c: usize) -> MotionSequence {
        MotionSequence::new(
            Array3::from_shape_fn((t, n, c), |_| rng.random_range(-1.0..1.0)),
            Some(0),
        )
        .unwrap()
    }

    /// Dense composition: normalize, per-channel matmul, weight matmul, ReLU.
    fn dense_block(
        x: &Array3<f64>,
        a: &Array2<f64>,
        w: &Array2<f64>,
        r: Option<&RefinementParams>,
        delta: f64,
    ) -> Array3<f64> {
        let (t, n, c) = x.dim();
        let c_out = w.ncols();
        let mut v = Array2::<f64>::zeros((n, c));
        for f in 0..t {
            for j in 0..n {
                for k in 0..c {
                    v[[j, k]] += x[[f, j, k]] / t as f64;
                }
            }
        }
        let d: Vec<f64> = (0..n).map(|i| 1.0 + a.row(i).sum()).collect();
        let mut out = Array3::zeros((t, n, c_out));
        for ch in 0..c_out {
            let mut m = Array2::<f64>::zeros((n, n));
            for i in 0..n {
                for j in 0..n {
                    let mut aij = a[[i, j]] + if i == j { 1.0 } else { 0.0 };
                    if let Some(r) = r {
                        let mut rij = r.phi_bias[[0, ch]];
                        for k in 0..c {
                            let diff = v[[i, k]] - v[[j, k]];
                            rij += r.phi_weights[[k, ch]]
                                * (-diff * diff / (2.0 * delta * delta)).exp();
                        }
                        aij += r.channel_scale[[0, ch]] * rij;
                    }
                    m[[i, j]] = aij / (d[i] * d[j]).sqrt();
                }
            }
            for f in 0..t {
                let xt = x.index_axis(Axis(0), f);
                let h = xt.dot(w);
                let y = m.dot(&h.column(ch));
                for i in 0..n {
                    out[[f, i, ch]] = y[i].max(0.0);
                }
            }
        }
        out
    }

    #[test]
    fn zero_input_gives_zero_feature() {
        let model = tiny_model(1, true, false);
        let mut base = model.base.clone();
        for b in &mut base.blocks {
            if let Some(r) = &mut b.refinement {
                r.phi_bias.fill(0.0);
            }
        }
        let seq = MotionSequence::new(Array3::zeros((2, 3, 2)), None).unwrap();
        let z = base_encode(&seq, &base, &model.graph).unwrap();
        assert!(z.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn frame_permutation_leaves_pooled_feature() {
        for pool in [TemporalPool::Mean, TemporalPool::Max] {
            let mut model = tiny_model(2, true, false);
            model.base.spec.temporal_pool = pool;
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let seq = random_seq(&mut rng, 5, 3, 2);
            let z = base_encode(&seq, &model.base, &model.graph).unwrap();
            let zp = base_encode(
                &seq.permute_frames(&[3, 0, 4, 2, 1]),
                &model.base,
                &model.graph,
            )
            .unwrap();
            for (a, b) in z.iter().zip(&zp) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_block_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let graph = SkeletonGraph::binary_tree(3).unwrap();
        let mut spec = EncoderSpec::new(vec![3], 1.3).unwrap();
        spec.temporal_pool = TemporalPool::Mean;
        let mut params = ModelParams::init(Role::Base, spec, 2, 3, 2, &mut rng).unwrap();
        for a in params.arrays_mut() {
            a.mapv_inplace(|_| rng.random_range(-1.0..1.0));
        }
        let seq = random_seq(&mut rng, 2, 3, 2);
        let out = dense_block(
            seq.data(),
            graph.adjacency(),
            &params.blocks[0].weight,
            params.blocks[0].refinement.as_ref(),
            1.3,
        );
        let oracle = out.mean_axis(Axis(0)).unwrap().mean_axis(Axis(0)).unwrap();
        let z = base_encode(&seq, &params, &graph).unwrap();
        for (a, b) in z.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn tape_path_matches_reference_path() {
        for (refine, pool) in [
            (true, TemporalPool::Mean),
            (false, TemporalPool::Mean),
            (true, TemporalPool::Max),
        ] {
            let mut model = tiny_model(5, refine, true);
            model.base.spec.temporal_pool = pool;
            let mut rng = ChaCha8Rng::seed_from_u64(6);
            let seqs: Vec<_> = (0..3).map(|_| random_seq(&mut rng, 4, 3, 2)).collect();
            let refs: Vec<_> = seqs.iter().collect();
            let bundles = model.features(&refs).unwrap();
            for (seq, bundle) in seqs.iter().zip(&bundles) {
                let z = base_encode(seq, &model.base, &model.graph).unwrap();
                let (zt, yt, _) =
                    aux_predict(seq, model.aux.as_ref().unwrap(), &model.graph).unwrap();
                for (a, b) in z.iter().zip(&bundle.z) {
                    assert!((a - b).abs() < 1e-12);
                }
                for (a, b) in zt.iter().zip(bundle.z_tilde.as_ref().unwrap()) {
                    assert!((a - b).abs() < 1e-12);
                }
                let expected = augment(&z, &yt);
                for (a, b) in expected.iter().zip(&bundle.z_hat) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn joint_relabeling_leaves_feature() {
        let model = tiny_model(7, true, false);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let seq = random_seq(&mut rng, 3, 3, 2);
        let perm = [2, 0, 1];
        let graph = model.graph.permuted(&perm).unwrap();
        let z = base_encode(&seq, &model.base, &model.graph).unwrap();
        let zp = base_encode(&seq.permute_joints(&perm), &model.base, &graph).unwrap();
        for (a, b) in z.iter().zip(&zp) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn aux_softmax_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let graph = SkeletonGraph::binary_tree(3).unwrap();
        let spec = EncoderSpec::new(vec![2], 1.0).unwrap();
        let mut params = ModelParams::init(Role::Auxiliary, spec, 2, 2, 3, &mut rng).unwrap();
        let seq = random_seq(&mut rng, 2, 3, 2);

        params.classifier_weight.fill(0.0);
        let (_, y, _) = aux_predict(&seq, &params, &graph).unwrap();
        assert!(y.iter().all(|&p| (p - 1.0 / 3.0).abs() < 1e-15));

        params.classifier_bias = array![[0.0, 1e3, 0.0]];
        let (_, y, _) = aux_predict(&seq, &params, &graph).unwrap();
        assert!((y[1] - 1.0).abs() < 1e-9 && y[0] < 1e-9);

        params.classifier_bias.fill(0.0);
        params.classifier_weight = Array2::from_shape_fn((2, 3), |_| rng.random_range(-2.0..2.0));
        let (_, y, logits) = aux_predict(&seq, &params, &graph).unwrap();
        let denom: f64 = logits.iter().map(|l| l.exp()).sum();
        for (p, l) in y.iter().zip(&logits) {
            assert!((p - l.exp() / denom).abs() < 1e-12);
        }
    }

    #[test]
    fn augment_concatenates() {
        assert_eq!(
            augment(&array![1.0, 2.0], &array![0.3, 0.7]),
            array![1.0, 2.0, 0.3, 0.7]
        );
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        assert!(Model::init(
            SkeletonGraph::binary_tree(2).unwrap(),
            1,
            3,
            EncoderSpec::new(vec![2], 1.0).unwrap(),
            None,
            &mut rng
        )
        .is_err());
    }

    #[test]
    fn cross_entropy_cases() {
        let logits = array![[50.0, 0.0, 0.0], [0.0, 0.0, 50.0]];
        assert!(classification_loss(&logits, &[0, 2]).unwrap() < 1e-6);
        let uniform = Array2::zeros((4, 5));
        assert!((classification_loss(&uniform, &[0, 1, 2, 3]).unwrap() - 5f64.ln()).abs() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let logits: Array2<f64> = Array2::from_shape_fn((6, 4), |_| rng.random_range(-3.0..3.0));
        let labels = [0, 3, 1, 1, 2, 0];
        let oracle: f64 = logits
            .rows()
            .into_iter()
            .zip(&labels)
            .map(|(r, &y)| -(r[y].exp() / r.iter().map(|v| v.exp()).sum::<f64>()).ln())
            .sum::<f64>()
            / 6.0;
        assert!((classification_loss(&logits, &labels).unwrap() - oracle).abs() < 1e-10);
        assert!(matches!(
            classification_loss(&logits, &[0, 0, 0, 0, 0, 4]),
            Err(Error::LabelOutOfRange { .. })
        ));
    }

    #[test]
    fn hsic_objective_cases() {
        let m = MaternParams::default();
        let flat = Array2::from_elem((4, 3), 0.7);
        for sign in [HsicSign::Plus, HsicSign::Minus] {
            assert_eq!(
                hsic_objective(&flat, &[0, 1, 0, 1], 2, &m, sign, 1.0)
                    .unwrap()
                    .abs(),
                0.0
            );
        }
        let z = array![[0.0, 0.0], [0.1, 0.0], [5.0, 5.0], [5.1, 5.0]];
        let labels = [0, 0, 1, 1];
        let v = hsic_objective(&z, &labels, 2, &m, HsicSign::Plus, 1.0).unwrap();
        // tr(K H L H) / (n-1)^2 with explicit H.
        let n = 4;
        let k = Array2::from_shape_fn((n, n), |(i, j)| {
            let r = ((z[[i, 0]] - z[[j, 0]]).powi(2) + (z[[i, 1]] - z[[j, 1]]).powi(2)).sqrt();
            let s = 3f64.sqrt() * r;
            (1.0 + s) * (-s).exp()
        });
        let l = Array2::from_shape_fn((n, n), |(i, j)| f64::from(labels[i] == labels[j]));
        let h = Array2::from_shape_fn((n, n), |(i, j)| f64::from(i == j) - 1.0 / n as f64);
        let oracle = k.dot(&h).dot(&l).dot(&h).diag().sum() / 9.0;
        assert!(v > 0.0);
        assert!((v - oracle).abs() < 1e-12);
        let neg = hsic_objective(&z, &labels, 2, &m, HsicSign::Minus, 2.0).unwrap();
        assert!((neg + 2.0 * v).abs() < 1e-15);
        assert!(hsic_objective(
            &z.slice(ndarray::s![..1, ..]).to_owned(),
            &[0],
            2,
            &m,
            HsicSign::Plus,
            1.0
        )
        .is_err());
    }

    #[test]
    fn distillation_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let a = Array2::from_shape_fn((5, 4), |_| rng.random_range(-3.0..3.0));
        assert_eq!(distillation_loss(&a, &a, 1.0).unwrap(), 0.0);
        let b = Array2::from_shape_fn((5, 4), |_| rng.random_range(-3.0..3.0));
        assert!(distillation_loss(&a, &b, 1e4).unwrap() < 1e-6);
        let oracle: f64 = a
            .rows()
            .into_iter()
            .zip(b.rows())
            .map(|(x, y)| {
                let zx: f64 = x.iter().map(|v| v.exp()).sum();
                let zy: f64 = y.iter().map(|v| v.exp()).sum();
                x.iter()
                    .zip(&y)
                    .map(|(u, w)| {
                        let p = u.exp() / zx;
                        let q = w.exp() / zy;
                        p * (p / q).ln()
                    })
                    .sum::<f64>()
            })
            .sum::<f64>()
            / 5.0;
        assert!((distillation_loss(&a, &b, 1.0).unwrap() - oracle).abs() < 1e-10);
        assert!(distillation_loss(&a, &b, 0.0).is_err());
    }

    fn labelled_batch() -> (Vec<MotionSequence>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let labels = vec![0, 1, 2, 1];
        let seqs = labels
            .iter()
            .map(|&l| {
                let mut s = random_seq(&mut rng, 2, 3, 2);
                s.label = Some(l);
                s
            })
            .collect();
        (seqs, labels)
    }

    #[test]
    fn breakdown_matches_independent_terms() {
        let model = tiny_model(14, true, true);
        let (seqs, labels) = labelled_batch();
        let refs: Vec<_> = seqs.iter().collect();
        let cfg = LossConfig::default();
        let bd = model.total_loss(&refs, &labels, &cfg).unwrap();

        let bundles = model.features(&refs).unwrap();
        let z_hat =
            Array2::from_shape_fn((4, bundles[0].z_hat.len()), |(i, j)| bundles[i].z_hat[j]);
        let base_logits = z_hat.dot(&model.base.classifier_weight) + &model.base.classifier_bias;
        let aux = model.aux.as_ref().unwrap();
        let z_t = Array2::from_shape_fn((4, 3), |(i, j)| bundles[i].z_tilde.as_ref().unwrap()[j]);
        let aux_logits = z_t.dot(&aux.classifier_weight) + &aux.classifier_bias;

        let l_cls = classification_loss(&base_logits, &labels).unwrap();
        let h = hsic_objective(&z_hat, &labels, 3, &cfg.matern, HsicSign::Plus, 1.0).unwrap();
        let l_ce = classification_loss(&aux_logits, &labels).unwrap();
        let l_d = distillation_loss(&base_logits, &aux_logits, 1.0).unwrap();
        assert!((bd.l_cls - l_cls).abs() < 1e-12);
        assert!((bd.hsic_term - h).abs() < 1e-12);
        assert!((bd.l_ce_aux - l_ce).abs() < 1e-12);
        assert!((bd.l_d - l_d).abs() < 1e-12);
        assert!((bd.total - (l_cls - h + l_ce + l_d)).abs() < 1e-12);
    }

    #[test]
    fn disabled_terms_are_exactly_zero() {
        let model = tiny_model(15, true, true);
        let (seqs, labels) = labelled_batch();
        let refs: Vec<_> = seqs.iter().collect();
        let cfg = LossConfig {
            use_hsic: false,
            use_distill: false,
            ..Default::default()
        };
        let bd = model.total_loss(&refs, &labels, &cfg).unwrap();
        assert_eq!(bd.hsic_term, 0.0);
        assert_eq!(bd.l_d, 0.0);
        assert_eq!(bd.total, bd.l_cls + bd.l_ce_aux);
    }

    #[test]
    fn total_is_linear_in_hsic_weight() {
        let model = tiny_model(16, true, true);
        let (seqs, labels) = labelled_batch();
        let refs: Vec<_> = seqs.iter().collect();
        for sign in [HsicSign::Plus, HsicSign::Minus] {
            let at = |w: f64| {
                let cfg = LossConfig {
                    hsic_sign: sign,
                    hsic_weight: w,
                    ..Default::default()
                };
                model.total_loss(&refs, &labels, &cfg).unwrap()
            };
            let (b0, b1) = (at(0.0), at(1.0));
            // Equal up to the rounding of a four-term sum.
            assert!((b1.total - b0.total - sign.as_f64() * b1.hsic_term).abs() < 1e-12);
            assert_eq!(b0.hsic_term, b1.hsic_term);
        }
    }

    #[test]
    fn degenerate_batch_has_zero_total() {
        let mut model = tiny_model(17, false, false);
        for b in &mut model.base.blocks {
            b.weight.fill(0.0);
        }
        model.base.classifier_weight.fill(0.0);
        model.base.classifier_bias = array![[200.0, 0.0, 0.0]];
        let seqs: Vec<_> = (0..3)
            .map(|_| MotionSequence::new(Array3::from_elem((2, 3, 2), 0.5), Some(0)).unwrap())
            .collect();
        let refs: Vec<_> = seqs.iter().collect();
        let bd = model
            .total_loss(&refs, &[0, 0, 0], &LossConfig::default())
            .unwrap();
        assert_eq!(bd.total, 0.0);
    }

    #[test]
    fn hsic_sign_parsing() {
        assert_eq!("+1".parse::<HsicSign>().unwrap(), HsicSign::Plus);
        assert_eq!("-1".parse::<HsicSign>().unwrap(), HsicSign::Minus);
        assert!("0".parse::<HsicSign>().is_err());
        assert_eq!(HsicSign::Minus.to_string(), "-1");
    }

    #[test]
    fn predictions_are_probabilities() {
        let spec = SynthesisSpec {
            samples_per_class: 3,
            num_joints: 4,
            num_frames: 4,
            ..Default::default()
        };
        let data = generate_synthetic(&spec, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let model = Model::init(
            data.graph.clone(),
            3,
            3,
            EncoderSpec::new(vec![4], 1.0).unwrap(),
            Some(EncoderSpec::new(vec![3], 1.0).unwrap()),
            &mut rng,
        )
        .unwrap();
        let refs: Vec<_> = data.sequences.iter().collect();
        let scores = model.predict_scores(&refs, 4).unwrap();
        assert_eq!(scores.dim(), (9, 3));
        for row in scores.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn cross_entropy_shift_invariant(seed in any::<u64>(), shift in -50.0f64..50.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let logits = Array2::from_shape_fn((3, 4), |_| rng.random_range(-3.0..3.0));
            let labels = [1, 0, 3];
            let a = classification_loss(&logits, &labels).unwrap();
            let b = classification_loss(&(&logits + shift), &labels).unwrap();
            prop_assert!((a - b).abs() < 1e-10);
        }

        #[test]
        fn distillation_self_is_zero(seed in any::<u64>(), p in 0.01f64..100.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = Array2::from_shape_fn((3, 5), |_| rng.random_range(-10.0..10.0));
            prop_assert_eq!(distillation_loss(&a, &a, p).unwrap(), 0.0);
        }

        #[test]
        fn hsic_objective_sample_permutation(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let z = Array2::from_shape_fn((6, 3), |_| rng.random_range(-2.0..2.0));
            let labels = [0, 1, 2, 0, 1, 1];
            let perm = [4, 2, 5, 0, 3, 1];
            let zp = z.select(Axis(0), &perm);
            let lp: Vec<usize> = perm.iter().map(|&i| labels[i]).collect();
            let m = MaternParams::default();
            let a = hsic_objective(&z, &labels, 3, &m, HsicSign::Minus, 1.0).unwrap();
            let b = hsic_objective(&zp, &lp, 3, &m, HsicSign::Minus, 1.0).unwrap();
            prop_assert!((a - b).abs() < 1e-10);
        }
    }
}
