//! Optimizer, learning-rate schedule, training loop, evaluation and
//! finite-difference gradient verification.

use std::fmt::Write as _;
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::MaternParams;
use crate::model::{
    EncoderSpec, FrozenTeacher, HsicSign, LossBreakdown, LossConfig, Model, TeacherMode,
    TemporalPool, TermMask,
};
use crate::refinement::GaussianWidth;
use crate::skeleton::{Dataset, MotionSequence};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub base_lr: f64,
    pub lr_decay: f64,
    pub decay_every: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Global L2 norm above which a step's gradient is rescaled; `0` disables.
    pub grad_clip_norm: f64,
    pub batch_size: usize,
    pub temperature: f64,
    pub delta: f64,
    pub hsic_sign: HsicSign,
    pub hsic_weight: f64,
    pub use_hsic: bool,
    pub use_distill: bool,
    pub use_auxiliary: bool,
    pub detach_teacher: bool,
    pub use_refinement: bool,
    pub base_channels: Vec<usize>,
    pub aux_channels: Vec<usize>,
    pub temporal_pool: TemporalPool,
    pub matern: MaternParams,
    pub center_inputs: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 120,
            warmup_epochs: 5,
            base_lr: 0.1,
            lr_decay: 0.1,
            decay_every: 50,
            momentum: 0.9,
            weight_decay: 0.0,
            grad_clip_norm: 5.0,
            batch_size: 128,
            temperature: 1.0,
            delta: 1.0,
            hsic_sign: HsicSign::Minus,
            hsic_weight: 1.0,
            use_hsic: true,
            use_distill: true,
            use_auxiliary: true,
            detach_teacher: true,
            use_refinement: true,
            base_channels: vec![16, 32],
            aux_channels: vec![16],
            temporal_pool: TemporalPool::Max,
            matern: MaternParams::default(),
            center_inputs: true,
            seed: 0,
        }
    }
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!(
            "{name} must be positive, got {v}"
        )))
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        positive("base_lr", self.base_lr)?;
        positive("lr_decay", self.lr_decay)?;
        positive("temperature", self.temperature)?;
        positive("delta", self.delta)?;
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidParameter(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::InvalidParameter(
                "weight_decay must be non-negative".into(),
            ));
        }
        if !(self.grad_clip_norm >= 0.0 && self.grad_clip_norm.is_finite()) {
            return Err(Error::InvalidParameter(
                "grad_clip_norm must be non-negative".into(),
            ));
        }
        if self.batch_size == 0 || self.decay_every == 0 {
            return Err(Error::InvalidParameter(
                "batch_size and decay_every must be positive".into(),
            ));
        }
        if self.epochs > 0 && self.warmup_epochs >= self.epochs {
            return Err(Error::InvalidParameter(format!(
                "warmup_epochs ({}) must be below epochs ({})",
                self.warmup_epochs, self.epochs
            )));
        }
        self.loss_config().validate()?;
        self.encoder_spec(&self.base_channels)?;
        if self.use_auxiliary {
            self.encoder_spec(&self.aux_channels)?;
        }
        Ok(())
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            hsic_sign: self.hsic_sign,
            hsic_weight: self.hsic_weight,
            use_hsic: self.use_hsic,
            use_distill: self.use_distill && self.use_auxiliary,
            temperature: self.temperature,
            matern: self.matern,
            detach_teacher: self.detach_teacher,
        }
    }

    pub fn teacher_mode(&self) -> TeacherMode {
        if self.detach_teacher {
            TeacherMode::Detached
        } else {
            TeacherMode::Live
        }
    }

    fn encoder_spec(&self, channels: &[usize]) -> Result<EncoderSpec> {
        let spec = EncoderSpec {
            hidden_channels: channels.to_vec(),
            temporal_pool: self.temporal_pool,
            delta: GaussianWidth::new(self.delta)?,
            use_refinement: self.use_refinement,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Seeded initial model for `data`'s skeleton, classes and channels.
    pub fn init_model(&self, data: &Dataset) -> Result<Model> {
        let channels = data
            .sequences
            .first()
            .ok_or_else(|| Error::Empty("training set".into()))?
            .channels();
        let base = self.encoder_spec(&self.base_channels)?;
        let aux = if self.use_auxiliary {
            Some(self.encoder_spec(&self.aux_channels)?)
        } else {
            None
        };
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut model = Model::init(
            data.graph.clone(),
            data.num_classes,
            channels,
            base,
            aux,
            &mut rng,
        )?;
        model.center_inputs = self.center_inputs;
        Ok(model)
    }
}

/// Linear warm-up to `base_lr`, then step decay.
pub fn lr_at(epoch: usize, config: &TrainConfig) -> Result<f64> {
    if epoch >= config.epochs {
        return Err(Error::InvalidParameter(format!(
            "epoch {epoch} outside 0..{}",
            config.epochs
        )));
    }
    if epoch < config.warmup_epochs {
        return Ok(config.base_lr * (epoch + 1) as f64 / config.warmup_epochs as f64);
    }
    let steps = (epoch - config.warmup_epochs) / config.decay_every;
    Ok(config.base_lr * config.lr_decay.powi(steps as i32))
}

/// Gradients of the training objective, one array per parameter in
/// [`Model::arrays`] order.
pub fn compute_gradients(
    model: &Model,
    batch: &[&MotionSequence],
    labels: &[usize],
    config: &LossConfig,
    mode: TeacherMode,
) -> Result<(Vec<Array2<f64>>, LossBreakdown)> {
    objective_gradients(model, batch, labels, config, mode, None, TermMask::ALL)
}

fn objective_gradients(
    model: &Model,
    batch: &[&MotionSequence],
    labels: &[usize],
    config: &LossConfig,
    mode: TeacherMode,
    frozen: Option<&FrozenTeacher>,
    mask: TermMask,
) -> Result<(Vec<Array2<f64>>, LossBreakdown)> {
    let mut fp = model.forward(batch, mode, frozen)?;
    let (vars, breakdown) = model.attach_losses(&mut fp, labels, config, mask)?;
    let grads = fp.tape.backward(vars.objective);
    let out = fp
        .params
        .iter()
        .map(|&p| {
            grads
                .get(p)
                .cloned()
                .unwrap_or_else(|| Array2::zeros(fp.tape.value(p).dim()))
        })
        .collect();
    Ok((out, breakdown))
}

fn objective_value(
    model: &Model,
    batch: &[&MotionSequence],
    labels: &[usize],
    config: &LossConfig,
    mode: TeacherMode,
    frozen: Option<&FrozenTeacher>,
    mask: TermMask,
) -> Result<f64> {
    let mut fp = model.forward(batch, mode, frozen)?;
    let (vars, _) = model.attach_losses(&mut fp, labels, config, mask)?;
    Ok(fp.tape.scalar_value(vars.objective))
}

/// One Nesterov step: `v <- mu v - lr g`, `p <- p + mu v - lr g`.
pub fn sgd_nesterov_step(
    params: &mut [&mut Array2<f64>],
    grads: &[Array2<f64>],
    velocity: &mut [Array2<f64>],
    lr: f64,
    momentum: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(Error::Shape(format!(
            "{} parameters, {} gradients, {} velocities",
            params.len(),
            grads.len(),
            velocity.len()
        )));
    }
    for ((p, g), v) in params.iter().zip(grads).zip(velocity.iter()) {
        if p.dim() != g.dim() || p.dim() != v.dim() {
            return Err(Error::Shape(format!(
                "parameter {:?}, gradient {:?}, velocity {:?}",
                p.dim(),
                g.dim(),
                v.dim()
            )));
        }
    }
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        ndarray::Zip::from(&mut **p)
            .and(g)
            .and(&mut *v)
            .for_each(|p, &g, v| {
                *v = momentum * *v - lr * g;
                *p += momentum * *v - lr * g;
            });
        if p.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("parameter after update".into()));
        }
    }
    Ok(())
}

/// Rescales all gradients together so their joint L2 norm is at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Array2<f64>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .map(|g| g.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            g.mapv_inplace(|v| v * scale);
        }
    }
    norm
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub loss: LossBreakdown,
    pub train_accuracy: f64,
    pub test_accuracy: Option<f64>,
    pub lr: f64,
    pub wall_seconds: f64,
}

pub const METRICS_HEADER: &str =
    "epoch,l_cls,hsic,l_ce,l_d,total,train_acc,test_acc,lr,wall_seconds";

/// Metrics CSV; `wall_seconds` is the only non-deterministic column.
pub fn metrics_csv(records: &[MetricsRecord]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in records {
        let test = r.test_accuracy.map_or_else(String::new, |a| a.to_string());
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{:.3}",
            r.epoch,
            r.loss.l_cls,
            r.loss.hsic_term,
            r.loss.l_ce_aux,
            r.loss.l_d,
            r.loss.total,
            r.train_accuracy,
            test,
            r.lr,
            r.wall_seconds
        )
        .unwrap();
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Divergence {
    pub epoch: usize,
    pub step: usize,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    /// The final model, or the last finite one if training diverged.
    pub model: Model,
    pub metrics: Vec<MetricsRecord>,
    pub steps: usize,
    pub diverged: Option<Divergence>,
}

fn labels_of(data: &Dataset) -> Result<Vec<usize>> {
    data.labels()
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(row: ndarray::ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Trains a fresh model on `train`; `test` (if given) is scored every epoch.
pub fn fit(train: &Dataset, test: Option<&Dataset>, config: &TrainConfig) -> Result<FitResult> {
    let model = config.init_model(train)?;
    fit_from(model, train, test, config)
}

pub fn fit_from(
    mut model: Model,
    train: &Dataset,
    test: Option<&Dataset>,
    config: &TrainConfig,
) -> Result<FitResult> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("training set".into()));
    }
    if train.num_classes < 2 {
        return Err(Error::InvalidParameter(
            "training needs at least 2 classes".into(),
        ));
    }
    let labels = labels_of(train)?;
    let loss_cfg = config.loss_config();
    let mode = config.teacher_mode();
    let mut velocity: Vec<Array2<f64>> = model
        .arrays()
        .iter()
        .map(|(_, a)| Array2::zeros(a.dim()))
        .collect();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5851_f42d_4c95_7f2d);
    let start = Instant::now();
    let mut metrics = Vec::with_capacity(config.epochs);
    let mut steps = 0;

    for epoch in 0..config.epochs {
        let lr = lr_at(epoch, config)?;
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = LossBreakdown::zero(config.hsic_sign, config.hsic_weight);
        let mut correct = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&MotionSequence> = chunk.iter().map(|&i| &train.sequences[i]).collect();
            let batch_labels: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            // A single leftover sample has no HSIC (the estimator needs n >= 2).
            let cfg = LossConfig {
                use_hsic: loss_cfg.use_hsic && batch.len() >= 2,
                ..loss_cfg
            };
            let step_result = objective_gradients(
                &model,
                &batch,
                &batch_labels,
                &cfg,
                mode,
                None,
                TermMask::ALL,
            )
            .and_then(|(mut grads, breakdown)| {
                if config.weight_decay > 0.0 {
                    for (g, (_, p)) in grads.iter_mut().zip(model.arrays()) {
                        g.scaled_add(config.weight_decay, p);
                    }
                }
                clip_global_norm(&mut grads, config.grad_clip_norm);
                let mut next = model.clone();
                let mut arrays = next.arrays_mut();
                sgd_nesterov_step(&mut arrays, &grads, &mut velocity, lr, config.momentum)?;
                Ok((next, breakdown))
            });
            match step_result {
                Ok((next, breakdown)) => {
                    let fp_correct = count_correct(&model, &batch, &batch_labels)?;
                    correct += fp_correct;
                    epoch_loss.accumulate(&breakdown, batch.len() as f64 / train.len() as f64);
                    model = next;
                    steps += 1;
                }
                Err(e @ (Error::NonFinite(_) | Error::Degenerate(_))) => {
                    log::warn!("training diverged at epoch {epoch}, step {steps}: {e}");
                    return Ok(FitResult {
                        model,
                        metrics,
                        steps,
                        diverged: Some(Divergence {
                            epoch,
                            step: steps,
                            reason: e.to_string(),
                        }),
                    });
                }
                Err(e) => return Err(e),
            }
        }
        let test_accuracy = match test {
            Some(t) => Some(evaluate(&model, t)?.accuracy),
            None => None,
        };
        let record = MetricsRecord {
            epoch,
            loss: epoch_loss,
            train_accuracy: correct as f64 / train.len() as f64,
            test_accuracy,
            lr,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: total {:.5} train {:.4} test {:?} lr {lr}",
            record.loss.total,
            record.train_accuracy,
            record.test_accuracy
        );
        metrics.push(record);
    }
    Ok(FitResult {
        model,
        metrics,
        steps,
        diverged: None,
    })
}

/// Correct predictions of the pre-update model on a batch. Recomputed with a
/// plain forward so the count is independent of the loss configuration.
fn count_correct(model: &Model, batch: &[&MotionSequence], labels: &[usize]) -> Result<usize> {
    let scores = model.predict_scores(batch, batch.len())?;
    Ok(scores
        .rows()
        .into_iter()
        .zip(labels)
        .filter(|(row, &y)| argmax(row.view()) == y)
        .count())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    /// `None` for classes without test samples.
    pub per_class: Vec<Option<f64>>,
    pub scores: Array2<f64>,
    pub predictions: Vec<usize>,
    pub labels: Vec<usize>,
}

/// Top-1 accuracy and per-class accuracy of a score table.
pub fn score_accuracy(scores: &Array2<f64>, labels: &[usize]) -> Result<Evaluation> {
    if scores.nrows() == 0 {
        return Err(Error::Empty("evaluation set".into()));
    }
    if scores.nrows() != labels.len() {
        return Err(Error::Shape(format!(
            "{} score rows for {} labels",
            scores.nrows(),
            labels.len()
        )));
    }
    let k = scores.ncols();
    if let Some(&label) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::LabelOutOfRange {
            label,
            num_classes: k,
        });
    }
    let predictions: Vec<usize> = scores.rows().into_iter().map(argmax).collect();
    let mut hits = vec![0usize; k];
    let mut totals = vec![0usize; k];
    for (&p, &y) in predictions.iter().zip(labels) {
        totals[y] += 1;
        if p == y {
            hits[y] += 1;
        }
    }
    let correct: usize = hits.iter().sum();
    Ok(Evaluation {
        accuracy: correct as f64 / labels.len() as f64,
        per_class: hits
            .iter()
            .zip(&totals)
            .map(|(&h, &t)| (t > 0).then(|| h as f64 / t as f64))
            .collect(),
        scores: scores.clone(),
        predictions,
        labels: labels.to_vec(),
    })
}

const EVAL_CHUNK: usize = 256;

pub fn evaluate(model: &Model, data: &Dataset) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::Empty("evaluation set".into()));
    }
    if data.num_classes != model.num_classes {
        return Err(Error::InvalidParameter(format!(
            "dataset has {} classes, model has {}",
            data.num_classes, model.num_classes
        )));
    }
    let labels = labels_of(data)?;
    let refs: Vec<&MotionSequence> = data.sequences.iter().collect();
    let scores = model.predict_scores(&refs, EVAL_CHUNK)?;
    score_accuracy(&scores, &labels)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParameterCheck {
    pub name: String,
    pub max_relative_error: f64,
    pub max_abs_analytic: f64,
    pub coordinates: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradientReport {
    pub parameters: Vec<ParameterCheck>,
    pub max_relative_error: f64,
    pub threshold: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientCheckOptions {
    pub step: f64,
    pub threshold: f64,
    /// Coordinates checked per parameter array; `None` checks all of them.
    pub max_coordinates: Option<usize>,
    pub mask: TermMask,
    pub seed: u64,
}

impl Default for GradientCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            threshold: 1e-4,
            max_coordinates: None,
            mask: TermMask::ALL,
            seed: 0,
        }
    }
}

/// `|a - n| / max(|a|, |n|, 1e-6)`; the floor keeps gradients that are zero
/// up to rounding from producing huge ratios.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Compares tape gradients with central differences.
///
/// With a detached teacher the analytic gradient is that of an objective in
/// which the teacher outputs read by the base model are constants; the
/// finite differences are taken of exactly that objective, with the
/// constants fixed at the unperturbed parameters.
pub fn gradient_check(
    model: &Model,
    batch: &[&MotionSequence],
    labels: &[usize],
    config: &LossConfig,
    mode: TeacherMode,
    options: &GradientCheckOptions,
) -> Result<GradientReport> {
    let frozen = match mode {
        TeacherMode::Detached => model.frozen_teacher(batch)?,
        TeacherMode::Live => None,
    };
    let frozen = frozen.as_ref();
    let (analytic, _) =
        objective_gradients(model, batch, labels, config, mode, frozen, options.mask)?;
    let names: Vec<String> = model.arrays().into_iter().map(|(n, _)| n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut probe = model.clone();
    let h = options.step;
    let mut parameters = Vec::with_capacity(names.len());

    for (idx, name) in names.into_iter().enumerate() {
        let len = analytic[idx].len();
        let coords: Vec<usize> = match options.max_coordinates {
            Some(m) if m < len => (0..m).map(|_| rng.random_range(0..len)).collect(),
            _ => (0..len).collect(),
        };
        let mut worst = 0.0f64;
        for &c in &coords {
            let original = probe.arrays()[idx].1.as_slice().expect("standard layout")[c];
            let mut eval_at = |v: f64| -> Result<f64> {
                probe.arrays_mut()[idx]
                    .as_slice_mut()
                    .expect("standard layout")[c] = v;
                objective_value(&probe, batch, labels, config, mode, frozen, options.mask)
            };
            let plus = eval_at(original + h)?;
            let minus = eval_at(original - h)?;
            eval_at(original)?;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[idx].as_slice().expect("standard layout")[c];
            worst = worst.max(relative_error(a, numeric));
        }
        parameters.push(ParameterCheck {
            name,
            max_relative_error: worst,
            max_abs_analytic: analytic[idx].iter().fold(0.0, |m, v| m.max(v.abs())),
            coordinates: coords.len(),
        });
    }
    let max_relative_error = parameters
        .iter()
        .fold(0.0f64, |m, p| m.max(p.max_relative_error));
    Ok(GradientReport {
        parameters,
        max_relative_error,
        threshold: options.threshold,
        passed: max_relative_error <= options.threshold,
    })
}
