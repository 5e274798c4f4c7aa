//! Mean-teacher adaptation of the detection head on an unlabeled stream.
//!
//! Each epoch the teacher re-scores the stream, its predictions are linked
//! into clusters and refined into pseudo-labels, the student takes one
//! gradient step per frame on the supervised + contrastive + KL loss, and the
//! teacher moves toward the student by EMA. Models trained with different
//! merge thresholds are fused by parameter averaging.

pub mod gradcheck;
pub mod loss;
pub mod model;

use std::thread;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assoc::build_clusters;
use crate::cluster::{
    merge_clusters, per_frame_pseudo_labels, refine_pseudo_labels, ClusterError, ClusterSet, FrameLabels,
};
use crate::detstream::{Detection, DetectionStream, Frame};
use crate::numeric::{argmax, softmax};

pub use loss::{
    augment, contrastive_loss, example_loss, infonce_loss, kl_loss, sample_negatives, supervised_loss, total_loss, Augment,
    AugmentMode, ClusterContext, ContrastiveBatch, ContrastiveConfig, LossOutput, LossTerms, StepInputs,
    SupervisedConfig, TotalLoss,
};
pub use model::{decode_box, encode_box, forward, HeadShape, ModelParams, StageParams};

#[derive(Debug, Error)]
pub enum AdaptError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid model file: {0}")]
    Format(String),
    #[error("i/o error on {0}: {1}")]
    Io(String, #[source] std::io::Error),
    #[error("contrastive batch has no positives")]
    EmptyPositives,
    #[error("cannot fuse an empty model list")]
    NoModels,
    #[error("stream has no frames")]
    EmptyStream,
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
}

impl PartialEq for AdaptError {
    fn eq(&self, other: &Self) -> bool {
        self.to_string() == other.to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    /// Plain gradient descent with decoupled weight decay.
    #[default]
    Sgd,
    /// Adam with decoupled weight decay.
    Adam,
}

/// Which pseudo-labels and loss terms drive adaptation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Clustered pseudo-labels with contrastive and KL terms.
    #[default]
    Full,
    /// Clustered pseudo-labels, supervised loss only.
    InstanceCluster,
    /// Per-frame thresholded pseudo-labels, supervised loss only.
    MeanTeacher,
}

impl Method {
    pub fn uses_clusters(self) -> bool {
        !matches!(self, Method::MeanTeacher)
    }

    pub fn terms(self) -> LossTerms {
        match self {
            Method::Full => LossTerms::ALL,
            _ => LossTerms::SUPERVISED_ONLY,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptConfig {
    pub alpha1: f64,
    pub beta: f64,
    pub tau1: f64,
    pub tau2_list: Vec<f64>,
    pub conf_threshold: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub negatives_per_query: usize,
    pub stages: usize,
    pub strong_noise: f64,
    pub strong_dropout: f64,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    pub method: Method,
    pub eps: f64,
    pub negative_iou_bound: f64,
    pub proposal_match_iou: f64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            alpha1: 0.99,
            beta: 0.1,
            tau1: crate::assoc::DEFAULT_TAU1,
            tau2_list: vec![0.8, 0.85, 0.9],
            conf_threshold: 0.5,
            learning_rate: 0.00017,
            weight_decay: 0.0001,
            epochs: 15,
            negatives_per_query: 5,
            stages: 3,
            strong_noise: 0.1,
            strong_dropout: 0.1,
            seed: 0,
            optimizer: OptimizerKind::Sgd,
            method: Method::Full,
            eps: crate::assoc::DEFAULT_EPS,
            negative_iou_bound: 0.05,
            proposal_match_iou: 0.5,
        }
    }
}

impl AdaptConfig {
    /// Checks every field; the message names the offending field.
    pub fn validate(&self) -> Result<(), AdaptError> {
        let bad = |field: &str, why: &str| Err(AdaptError::Config(format!("{field}: {why}")));
        if !(0.0..=1.0).contains(&self.alpha1) {
            return bad("alpha1", "must lie in [0, 1]");
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return bad("beta", "must be positive");
        }
        if !(self.tau1 > 0.0) {
            return bad("tau1", "must be positive");
        }
        if self.tau2_list.is_empty() {
            return bad("tau2_list", "must not be empty");
        }
        if self.tau2_list.iter().any(|t| !(*t > 0.0 && *t <= 1.0)) {
            return bad("tau2_list", "entries must lie in (0, 1]");
        }
        if !(0.0..1.0).contains(&self.conf_threshold) {
            return bad("conf_threshold", "must lie in [0, 1)");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate", "must be non-negative");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay", "must be non-negative");
        }
        if self.stages == 0 {
            return bad("stages", "must be positive");
        }
        if !(self.strong_noise >= 0.0) {
            return bad("strong_noise", "must be non-negative");
        }
        if !(0.0..1.0).contains(&self.strong_dropout) {
            return bad("strong_dropout", "must lie in [0, 1)");
        }
        if !(self.eps > 0.0) {
            return bad("eps", "must be positive");
        }
        if !(self.negative_iou_bound > 0.0) {
            return bad("negative_iou_bound", "must be positive");
        }
        if !(self.proposal_match_iou > 0.0 && self.proposal_match_iou <= 1.0) {
            return bad("proposal_match_iou", "must lie in (0, 1]");
        }
        Ok(())
    }

    pub fn strong_augment(&self) -> Augment {
        Augment { noise_std: self.strong_noise, dropout: self.strong_dropout }
    }

    pub fn supervised(&self) -> SupervisedConfig {
        SupervisedConfig { augment: self.strong_augment(), proposal_match_iou: self.proposal_match_iou }
    }

    pub fn contrastive(&self) -> ContrastiveConfig {
        ContrastiveConfig {
            beta: self.beta,
            negatives_per_query: self.negatives_per_query,
            negative_iou_bound: self.negative_iou_bound,
            augment: self.strong_augment(),
        }
    }
}

/// `θ_T ← α·θ_T + (1 − α)·θ_S` for every parameter.
pub fn ema_update(teacher: &ModelParams, student: &ModelParams, alpha1: f64) -> Result<ModelParams, AdaptError> {
    if !teacher.same_shape(student) {
        return Err(AdaptError::Shape("teacher and student differ".into()));
    }
    let mut out = teacher.clone();
    out.iter_mut().zip(student.iter()).for_each(|(t, s)| *t = alpha1 * *t + (1.0 - alpha1) * s);
    Ok(out)
}

/// Element-wise mean of the parameters of `models`.
///
/// Uses a running mean so that averaging identical values returns them
/// exactly.
pub fn fuse_models(models: &[ModelParams]) -> Result<ModelParams, AdaptError> {
    let first = models.first().ok_or(AdaptError::NoModels)?;
    let mut out = first.clone();
    for (i, m) in models.iter().enumerate().skip(1) {
        if !m.same_shape(first) {
            return Err(AdaptError::Shape(format!("model {i} differs in shape from model 0")));
        }
        let k = (i + 1) as f64;
        out.iter_mut().zip(m.iter()).for_each(|(acc, v)| *acc += (v - *acc) / k);
    }
    Ok(out)
}

/// First-order optimizer with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    weight_decay: f64,
    m: Option<ModelParams>,
    v: Option<ModelParams>,
    t: i32,
}

impl Optimizer {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    pub fn new(kind: OptimizerKind, lr: f64, weight_decay: f64) -> Self {
        Self { kind, lr, weight_decay, m: None, v: None, t: 0 }
    }

    pub fn step(&mut self, params: &mut ModelParams, grad: &ModelParams) {
        let (lr, wd) = (self.lr, self.weight_decay);
        match self.kind {
            OptimizerKind::Sgd => {
                params.iter_mut().zip(grad.iter()).for_each(|(p, g)| *p -= lr * (g + wd * *p));
            }
            OptimizerKind::Adam => {
                self.t += 1;
                let m = self.m.get_or_insert_with(|| params.zeros_like());
                let v = self.v.get_or_insert_with(|| params.zeros_like());
                let c1 = 1.0 - Self::BETA1.powi(self.t);
                let c2 = 1.0 - Self::BETA2.powi(self.t);
                for (((p, g), mi), vi) in params.iter_mut().zip(grad.iter()).zip(m.iter_mut()).zip(v.iter_mut()) {
                    *mi = Self::BETA1 * *mi + (1.0 - Self::BETA1) * g;
                    *vi = Self::BETA2 * *vi + (1.0 - Self::BETA2) * g * g;
                    let update = (*mi / c1) / ((*vi / c2).sqrt() + Self::EPS);
                    *p -= lr * (update + wd * *p);
                }
            }
        }
    }
}

fn check_stream_shape(model: &ModelParams, stream: &DetectionStream) -> Result<HeadShape, AdaptError> {
    let shape = model.validate()?;
    if shape.feature_dim != stream.header.feature_dim || shape.num_classes != stream.header.num_classes {
        return Err(AdaptError::Shape(format!(
            "model expects D={} C={} but stream has D={} C={}",
            shape.feature_dim, shape.num_classes, stream.header.feature_dim, stream.header.num_classes
        )));
    }
    Ok(shape)
}

/// Re-scores every stream detection with `model`: logits become the
/// foreground part of the stage-averaged head output, boxes are refined by
/// the predicted deltas, and the score is the top foreground probability.
pub fn teacher_inference(model: &ModelParams, stream: &DetectionStream) -> DetectionStream {
    let c = stream.header.num_classes;
    let frames = stream
        .frames
        .iter()
        .map(|f| Frame {
            frame_id: f.frame_id,
            detections: f
                .detections
                .iter()
                .map(|d| {
                    let (logits, deltas) = model.predict(&d.region_feature);
                    let fg = logits[..c].to_vec();
                    let probs = softmax(&fg);
                    Detection {
                        det_id: d.det_id,
                        bbox: decode_box(&d.bbox, &deltas),
                        score: probs[argmax(&fg)],
                        logits: fg,
                        region_feature: d.region_feature.clone(),
                    }
                })
                .collect(),
            proposals: f.proposals.clone(),
        })
        .collect();
    DetectionStream { header: stream.header.clone(), frames }
}

/// Pseudo-labels (and, for clustered methods, the cluster context) produced
/// from one teacher pass.
pub struct PseudoLabelPass {
    pub labels: Vec<FrameLabels>,
    pub clusters: Option<ClusterSet>,
    pub context: Option<ClusterContext>,
}

pub fn pseudo_label_pass(
    teacher: &ModelParams,
    stream: &DetectionStream,
    tau2: f64,
    config: &AdaptConfig,
) -> Result<PseudoLabelPass, AdaptError> {
    let scored = teacher_inference(teacher, stream);
    if !config.method.uses_clusters() {
        return Ok(PseudoLabelPass {
            labels: per_frame_pseudo_labels(&scored, config.conf_threshold),
            clusters: None,
            context: None,
        });
    }
    let initial = ClusterSet::new(build_clusters(&scored, config.tau1, config.eps), stream.header.num_classes);
    let merged = merge_clusters(&initial, tau2);
    let labels = refine_pseudo_labels(&scored, &merged, config.conf_threshold)?;
    let context = config.method.terms().contrastive.then(|| ClusterContext::new(stream, &merged, teacher));
    Ok(PseudoLabelPass { labels, clusters: Some(merged), context })
}

/// Per-epoch summary of an adaptation run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub clusters: Option<usize>,
    pub pseudo_labels: usize,
    pub supervised: f64,
    pub contrastive: f64,
    pub kl: f64,
}

/// One pass over the frames in order, one optimizer step per frame.
/// The teacher is only read.
pub fn train_epoch(
    student: &mut ModelParams,
    teacher: &ModelParams,
    stream: &DetectionStream,
    pass: &PseudoLabelPass,
    config: &AdaptConfig,
    optimizer: &mut Optimizer,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, f64, f64), AdaptError> {
    let sup_cfg = config.supervised();
    let cl_cfg = config.contrastive();
    let terms = config.method.terms();
    let (mut sup, mut cl, mut kl) = (0.0, 0.0, 0.0);
    for (frame, labels) in stream.frames.iter().zip(&pass.labels) {
        let inputs = StepInputs { frame, labels: &labels.labels, clusters: pass.context.as_ref() };
        let loss = total_loss(student, teacher, &inputs, terms, &sup_cfg, &cl_cfg, rng)?;
        sup += loss.supervised;
        cl += loss.contrastive;
        kl += loss.kl;
        optimizer.step(student, &loss.grad);
    }
    let n = stream.frames.len().max(1) as f64;
    Ok((sup / n, cl / n, kl / n))
}

/// Adapts `source` to `stream` with a single merge threshold and returns the
/// final teacher.
pub fn adapt_stream(
    source: &ModelParams,
    stream: &DetectionStream,
    tau2: f64,
    config: &AdaptConfig,
) -> Result<ModelParams, AdaptError> {
    adapt_stream_traced(source, stream, tau2, config).map(|(m, _)| m)
}

pub fn adapt_stream_traced(
    source: &ModelParams,
    stream: &DetectionStream,
    tau2: f64,
    config: &AdaptConfig,
) -> Result<(ModelParams, Vec<EpochStats>), AdaptError> {
    config.validate()?;
    check_stream_shape(source, stream)?;
    if stream.frames.is_empty() {
        return Err(AdaptError::EmptyStream);
    }
    let mut student = source.clone();
    let mut teacher = source.clone();
    let mut optimizer = Optimizer::new(config.optimizer, config.learning_rate, config.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut trace = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let pass = pseudo_label_pass(&teacher, stream, tau2, config)?;
        let (sup, cl, kl) = train_epoch(&mut student, &teacher, stream, &pass, config, &mut optimizer, &mut rng)?;
        teacher = ema_update(&teacher, &student, config.alpha1)?;
        trace.push(EpochStats {
            epoch,
            clusters: pass.clusters.as_ref().map(ClusterSet::len),
            pseudo_labels: pass.labels.iter().map(|f| f.labels.len()).sum(),
            supervised: sup,
            contrastive: cl,
            kl,
        });
    }
    Ok((teacher, trace))
}

/// Models adapted with each merge threshold and their parameter average.
#[derive(Debug, Clone)]
pub struct FusedAdaptation {
    pub singles: Vec<(f64, ModelParams)>,
    pub fused: ModelParams,
}

/// Runs [`adapt_stream`] once per entry of `config.tau2_list` on up to
/// `max_threads` threads and fuses the results in list order.
pub fn adapt_fused(
    source: &ModelParams,
    stream: &DetectionStream,
    config: &AdaptConfig,
    max_threads: usize,
) -> Result<FusedAdaptation, AdaptError> {
    config.validate()?;
    let taus = &config.tau2_list;
    let width = max_threads.clamp(1, taus.len());
    let mut results: Vec<Option<Result<ModelParams, AdaptError>>> = (0..taus.len()).map(|_| None).collect();
    for (chunk_idx, chunk) in taus.chunks(width).enumerate() {
        let outs: Vec<Result<ModelParams, AdaptError>> = thread::scope(|scope| {
            let handles: Vec<_> = chunk
                .iter()
                .map(|&tau2| scope.spawn(move || adapt_stream(source, stream, tau2, config)))
                .collect();
            handles.into_iter().map(|h| h.join().expect("adaptation thread panicked")).collect()
        });
        for (i, r) in outs.into_iter().enumerate() {
            results[chunk_idx * width + i] = Some(r);
        }
    }
    let singles = taus
        .iter()
        .zip(results)
        .map(|(&t, r)| r.expect("every threshold ran").map(|m| (t, m)))
        .collect::<Result<Vec<_>, _>>()?;
    let models: Vec<ModelParams> = singles.iter().map(|(_, m)| m.clone()).collect();
    let fused = fuse_models(&models)?;
    Ok(FusedAdaptation { singles, fused })
}

/// Adapts with the configured method: fused over all thresholds for the
/// clustered methods, a single run for the per-frame baseline.
pub fn adapt_with_method(
    source: &ModelParams,
    stream: &DetectionStream,
    config: &AdaptConfig,
    max_threads: usize,
) -> Result<ModelParams, AdaptError> {
    if config.method.uses_clusters() {
        Ok(adapt_fused(source, stream, config, max_threads)?.fused)
    } else {
        adapt_stream(source, stream, config.tau2_list[0], config)
    }
}
