//! Central finite-difference verification of the analytic loss gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::loss::{
    contrastive_loss, kl_loss, supervised_loss, total_loss, Augment, ClusterContext, ContrastiveConfig, LossTerms,
    StepInputs, SupervisedConfig,
};
use super::model::{HeadShape, ModelParams};
use crate::assoc::Cluster;
use crate::cluster::{refine_pseudo_labels, ClusterSet, FrameLabels};
use crate::detstream::{BoundingBox, Detection, DetectionStream, Frame, Proposal, StreamHeader};

/// Pass/fail bound on the relative error.
pub const TOLERANCE: f64 = 1e-4;
/// Default finite-difference step.
pub const DEFAULT_STEP: f64 = 1e-5;
/// Gradient magnitudes below this are compared in absolute terms.
pub const MAGNITUDE_FLOOR: f64 = 1e-5;

/// `|a − n| / max(|a|, |n|, MAGNITUDE_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(MAGNITUDE_FLOOR);
    (analytic - numeric).abs() / scale
}

/// Compares `analytic` with `(f(θ+h) − f(θ−h)) / 2h` on the given
/// coordinates (all of them when `coords` is `None`) and returns the largest
/// relative error.
pub fn grad_check(
    mut loss: impl FnMut(&[f64]) -> f64,
    params: &[f64],
    analytic: &[f64],
    h: f64,
    coords: Option<&[usize]>,
) -> f64 {
    let all: Vec<usize>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = (0..params.len()).collect();
            &all
        }
    };
    let mut theta = params.to_vec();
    let mut worst = 0.0f64;
    for &i in coords {
        let orig = theta[i];
        theta[i] = orig + h;
        let plus = loss(&theta);
        theta[i] = orig - h;
        let minus = loss(&theta);
        theta[i] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    worst
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SuiteDims {
    pub feature_dim: usize,
    pub proj_dim: usize,
    pub num_classes: usize,
    pub stages: usize,
}

impl Default for SuiteDims {
    fn default() -> Self {
        Self { feature_dim: 8, proj_dim: 6, num_classes: 5, stages: 3 }
    }
}

impl SuiteDims {
    fn shape(&self) -> HeadShape {
        HeadShape {
            stages: self.stages,
            feature_dim: self.feature_dim,
            proj_dim: self.proj_dim,
            num_classes: self.num_classes,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Classification,
    Regression,
    Contrastive,
    Kl,
    Total,
}

impl LossKind {
    pub const ALL: [LossKind; 5] =
        [LossKind::Classification, LossKind::Regression, LossKind::Contrastive, LossKind::Kl, LossKind::Total];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Classification => "cls",
            LossKind::Regression => "reg",
            LossKind::Contrastive => "contrastive",
            LossKind::Kl => "kl",
            LossKind::Total => "total",
        }
    }
}

/// A random student/teacher pair with a three-frame clustered stream.
/// Losses are evaluated on the middle frame.
pub struct GradCase {
    pub student: ModelParams,
    pub teacher: ModelParams,
    pub stream: DetectionStream,
    pub labels: Vec<FrameLabels>,
    pub context: ClusterContext,
}

const CASE_FRAME: usize = 1;

fn gaussian_vec(n: usize, std: f64, rng: &mut impl Rng) -> Vec<f64> {
    (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Builds one random instance. Each object is a cluster spanning all frames;
/// every detection has an overlapping proposal and every frame has far-away
/// distractor proposals to serve as negatives.
pub fn random_case(dims: SuiteDims, rng: &mut impl Rng) -> GradCase {
    let shape = dims.shape();
    let student = ModelParams::random(&shape, rng);
    let mut teacher = student.clone();
    teacher.iter_mut().for_each(|p| *p += 0.3 * rng.sample::<f64, _>(StandardNormal));

    let objects = rng.random_range(2..=3usize);
    let mut frames = Vec::new();
    let mut det_id = 0;
    for f in 0..3u64 {
        let mut detections = Vec::new();
        let mut proposals = Vec::new();
        for j in 0..objects {
            let x = 20.0 + 120.0 * j as f64 + rng.random_range(-3.0..3.0);
            let y = 40.0 + rng.random_range(-3.0..3.0);
            let bbox = BoundingBox::new(x, y, x + 60.0, y + 50.0);
            detections.push(Detection {
                det_id,
                bbox,
                score: 0.9,
                logits: gaussian_vec(dims.num_classes, 1.0, rng),
                region_feature: gaussian_vec(dims.feature_dim, 1.0, rng),
            });
            det_id += 1;
            let jitter = rng.random_range(-4.0..4.0);
            proposals.push(Proposal {
                bbox: BoundingBox::new(x + jitter, y, x + 60.0 + jitter, y + 50.0),
                region_feature: gaussian_vec(dims.feature_dim, 1.0, rng),
            });
        }
        for k in 0..4 {
            let x = 450.0 + 40.0 * k as f64;
            proposals.push(Proposal {
                bbox: BoundingBox::new(x, 300.0, x + 30.0, 330.0),
                region_feature: gaussian_vec(dims.feature_dim, 1.0, rng),
            });
        }
        frames.push(Frame { frame_id: f, detections, proposals });
    }
    let stream = DetectionStream { header: StreamHeader::new(dims.num_classes, dims.feature_dim), frames };

    let clusters = (0..objects)
        .map(|j| {
            let mut c = Cluster::singleton(0, &stream.frames[0].detections[j]);
            for f in 1..3 {
                c.push(f as u64, &stream.frames[f].detections[j]);
            }
            c
        })
        .collect();
    let cs = ClusterSet::new(clusters, dims.num_classes);
    let labels = refine_pseudo_labels(&stream, &cs, 0.0).expect("every detection is clustered");
    let context = ClusterContext::new(&stream, &cs, &teacher);
    GradCase { student, teacher, stream, labels, context }
}

fn suite_configs() -> (SupervisedConfig, ContrastiveConfig) {
    let augment = Augment { noise_std: 0.1, dropout: 0.1 };
    (
        SupervisedConfig { augment, proposal_match_iou: 0.5 },
        ContrastiveConfig { beta: 0.1, negatives_per_query: 5, negative_iou_bound: 0.05, augment },
    )
}

/// Value and analytic gradient of one loss at `student`. The augmentation
/// and sampling stream restarts from `noise_seed` on every call.
pub fn evaluate(case: &GradCase, kind: LossKind, student: &ModelParams, noise_seed: u64) -> (f64, ModelParams) {
    let (sup_cfg, cl_cfg) = suite_configs();
    let frame = &case.stream.frames[CASE_FRAME];
    let labels = &case.labels[CASE_FRAME].labels;
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    match kind {
        LossKind::Classification => {
            let out = supervised_loss(student, frame, labels, &sup_cfg, &mut rng);
            (out.cls, out.cls_grad)
        }
        LossKind::Regression => {
            let out = supervised_loss(student, frame, labels, &sup_cfg, &mut rng);
            (out.reg, out.reg_grad)
        }
        LossKind::Contrastive => {
            let out = contrastive_loss(student, &case.teacher, frame, &case.context, &cl_cfg, &mut rng)
                .expect("positives are never empty");
            (out.value, out.grad)
        }
        LossKind::Kl => {
            let out = kl_loss(student, &case.teacher, frame);
            (out.value, out.grad)
        }
        LossKind::Total => {
            let inputs = StepInputs { frame, labels, clusters: Some(&case.context) };
            let out = total_loss(student, &case.teacher, &inputs, LossTerms::ALL, &sup_cfg, &cl_cfg, &mut rng)
                .expect("positives are never empty");
            (out.value(), out.grad)
        }
    }
}

/// Largest relative error of one loss on one instance. `corrupt` scales the
/// analytic gradient by 1.01 as a negative control.
pub fn check_case(case: &GradCase, kind: LossKind, noise_seed: u64, corrupt: bool) -> f64 {
    let (_, grad) = evaluate(case, kind, &case.student, noise_seed);
    let mut analytic = grad.to_flat();
    if corrupt {
        analytic.iter_mut().for_each(|g| *g *= 1.01);
    }
    let mut probe = case.student.clone();
    let loss = |theta: &[f64]| {
        probe.set_flat(theta);
        evaluate(case, kind, &probe, noise_seed).0
    };
    grad_check(loss, &case.student.to_flat(), &analytic, DEFAULT_STEP, None)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteResult {
    pub kind: LossKind,
    pub instances: usize,
    pub max_rel_error: f64,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

/// Checks every loss on `instances` random instances drawn from `seed`.
pub fn gradient_suite(seed: u64, dims: SuiteDims, instances: usize, corrupt: bool) -> Vec<SuiteResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cases: Vec<(GradCase, u64)> = (0..instances).map(|_| (random_case(dims, &mut rng), rng.random())).collect();
    LossKind::ALL
        .iter()
        .map(|&kind| SuiteResult {
            kind,
            instances,
            max_rel_error: cases
                .iter()
                .map(|(case, noise)| check_case(case, kind, *noise, corrupt))
                .fold(0.0, f64::max),
        })
        .collect()
}
