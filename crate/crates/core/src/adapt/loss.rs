//! Training losses of the student head and their analytic gradients.
//!
//! Every loss returns its value together with a gradient laid out like
//! [`ModelParams`]. Teacher outputs are constants: no gradient reaches the
//! teacher.

use std::collections::HashMap;

use rand::seq::index;
use rand::Rng;
use rand_distr::StandardNormal;

use super::model::{encode_box, ModelParams, StageParams};
use super::AdaptError;
use crate::assoc::iou;
use crate::cluster::{ClusterSet, PseudoLabel};
use crate::detstream::{BoundingBox, DetectionStream, Frame, Proposal};
use crate::numeric::{dot, log_softmax, log_sum_exp, smooth_l1, softmax};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AugmentMode {
    Weak,
    Strong,
}

/// Strong augmentation: additive Gaussian noise then inverted dropout.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Augment {
    pub noise_std: f64,
    pub dropout: f64,
}

impl Augment {
    pub const NONE: Augment = Augment { noise_std: 0.0, dropout: 0.0 };
}

pub fn augment(feature: &[f64], mode: AugmentMode, aug: &Augment, rng: &mut impl Rng) -> Vec<f64> {
    match mode {
        AugmentMode::Weak => feature.to_vec(),
        AugmentMode::Strong => {
            let keep = 1.0 - aug.dropout;
            feature
                .iter()
                .map(|&x| {
                    let z: f64 = rng.sample(StandardNormal);
                    let noisy = x + aug.noise_std * z;
                    let dropped = aug.dropout > 0.0 && rng.random::<f64>() < aug.dropout;
                    if dropped {
                        0.0
                    } else if aug.dropout > 0.0 {
                        noisy / keep
                    } else {
                        noisy
                    }
                })
                .collect()
        }
    }
}

/// Loss value and gradient with respect to the student parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    pub grad: ModelParams,
}

impl LossOutput {
    pub fn zero(model: &ModelParams) -> Self {
        Self { value: 0.0, grad: model.zeros_like() }
    }
}

/// Accumulates gradients of one stage given upstream derivatives.
///
/// `x` is the stage input, `proj` its projection. Any of the upstream terms
/// may be absent.
fn backprop_stage(
    params: &StageParams,
    grad: &mut StageParams,
    x: &[f64],
    proj: &[f64],
    dlogits: Option<&[f64]>,
    ddeltas: Option<&[f64]>,
    dproj_extra: Option<&[f64]>,
) {
    let mut dproj = vec![0.0; proj.len()];
    if let Some(dl) = dlogits {
        grad.classifier.add_outer(proj, dl);
        grad.cls_bias.iter_mut().zip(dl).for_each(|(g, d)| *g += d);
        dproj.iter_mut().zip(params.classifier.mul(dl)).for_each(|(a, b)| *a += b);
    }
    if let Some(dd) = ddeltas {
        grad.regressor.add_outer(proj, dd);
        grad.reg_bias.iter_mut().zip(dd).for_each(|(g, d)| *g += d);
        dproj.iter_mut().zip(params.regressor.mul(dd)).for_each(|(a, b)| *a += b);
    }
    if let Some(extra) = dproj_extra {
        dproj.iter_mut().zip(extra).for_each(|(a, b)| *a += b);
    }
    grad.projection.add_outer(x, &dproj);
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SupervisedConfig {
    pub augment: Augment,
    /// Minimum IoU for a proposal to stand in for a label box.
    pub proposal_match_iou: f64,
}

/// Classification and regression parts of the supervised loss.
#[derive(Debug, Clone, PartialEq)]
pub struct SupervisedOutput {
    pub cls: f64,
    pub reg: f64,
    pub cls_grad: ModelParams,
    pub reg_grad: ModelParams,
}

impl SupervisedOutput {
    pub fn value(&self) -> f64 {
        self.cls + self.reg
    }

    pub fn grad(&self) -> ModelParams {
        let mut g = self.cls_grad.clone();
        g.add_scaled(&self.reg_grad, 1.0);
        g
    }
}

/// Training input for one pseudo-label: the region feature and the box the
/// regression deltas are measured from.
fn label_input<'a>(frame: &'a Frame, label: &PseudoLabel, match_iou: f64) -> Option<(&'a [f64], BoundingBox)> {
    let mut best: Option<(f64, &Proposal)> = None;
    for p in &frame.proposals {
        let v = iou(&p.bbox, &label.bbox);
        if v >= match_iou && best.is_none_or(|(b, _)| v > b) {
            best = Some((v, p));
        }
    }
    if let Some((_, p)) = best {
        return Some((&p.region_feature, p.bbox));
    }
    frame
        .detections
        .iter()
        .find(|d| d.det_id == label.det_id)
        .map(|d| (d.region_feature.as_slice(), d.bbox))
}

/// Sum over stages of mean cross-entropy plus mean smooth-L1 box loss over
/// the frame's pseudo-labels, on strongly augmented inputs.
pub fn supervised_loss(
    model: &ModelParams,
    frame: &Frame,
    labels: &[PseudoLabel],
    cfg: &SupervisedConfig,
    rng: &mut impl Rng,
) -> SupervisedOutput {
    let cls_grad = model.zeros_like();
    let reg_grad = model.zeros_like();
    let inputs: Vec<(Vec<f64>, [f64; 4], usize)> = labels
        .iter()
        .filter_map(|l| {
            let (x, reference) = label_input(frame, l, cfg.proposal_match_iou)?;
            let target = encode_box(&reference, &l.bbox);
            Some((augment(x, AugmentMode::Strong, &cfg.augment, rng), target, l.class_id))
        })
        .collect();
    if inputs.is_empty() {
        return SupervisedOutput { cls: 0.0, reg: 0.0, cls_grad, reg_grad };
    }
    let weight = 1.0 / inputs.len() as f64;
    let mut out = SupervisedOutput { cls: 0.0, reg: 0.0, cls_grad, reg_grad };
    for (x, target, class_id) in &inputs {
        accumulate_example(model, x, *class_id, Some(target), weight, &mut out);
    }
    out
}

/// Adds `weight` times the stage-summed cross-entropy (and smooth-L1 box
/// loss, when `target` is given) of one example to `out`.
pub fn accumulate_example(
    model: &ModelParams,
    x: &[f64],
    class_id: usize,
    target: Option<&[f64; 4]>,
    weight: f64,
    out: &mut SupervisedOutput,
) {
    for (k, stage) in model.stages.iter().enumerate() {
        let fwd = stage.forward(x);
        let lsm = log_softmax(&fwd.logits);
        out.cls -= weight * lsm[class_id];
        let mut dlogits: Vec<f64> = lsm.iter().map(|v| weight * v.exp()).collect();
        dlogits[class_id] -= weight;
        backprop_stage(stage, &mut out.cls_grad.stages[k], x, &fwd.proj, Some(&dlogits), None, None);

        if let Some(target) = target {
            let mut ddeltas = [0.0; 4];
            for (c, (pred, t)) in fwd.deltas.iter().zip(target).enumerate() {
                let (v, d) = smooth_l1(pred - t);
                out.reg += weight * v;
                ddeltas[c] = weight * d;
            }
            backprop_stage(stage, &mut out.reg_grad.stages[k], x, &fwd.proj, None, Some(&ddeltas), None);
        }
    }
}

/// Stage-summed loss of a single labeled example, unscaled.
pub fn example_loss(model: &ModelParams, x: &[f64], class_id: usize, target: Option<&[f64; 4]>) -> SupervisedOutput {
    let mut out =
        SupervisedOutput { cls: 0.0, reg: 0.0, cls_grad: model.zeros_like(), reg_grad: model.zeros_like() };
    accumulate_example(model, x, class_id, target, 1.0, &mut out);
    out
}

/// No proposal qualified as a negative for a query.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NoNegatives;

/// Draws up to `n` distinct proposals whose IoU with `query` is below
/// `iou_bound`, uniformly without replacement. Returns proposal indices.
pub fn sample_negatives(
    query: &BoundingBox,
    proposals: &[Proposal],
    n: usize,
    iou_bound: f64,
    rng: &mut impl Rng,
) -> Result<Vec<usize>, NoNegatives> {
    let pool: Vec<usize> =
        (0..proposals.len()).filter(|&i| iou(query, &proposals[i].bbox) < iou_bound).collect();
    if pool.is_empty() {
        return Err(NoNegatives);
    }
    if pool.len() <= n {
        return Ok(pool);
    }
    Ok(index::sample(rng, pool.len(), n).into_iter().map(|i| pool[i]).collect())
}

/// One query with its positive and negative keys.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveBatch {
    pub query: Vec<f64>,
    pub positives: Vec<Vec<f64>>,
    pub negatives: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InfoNceOutput {
    pub value: f64,
    pub grad_query: Vec<f64>,
    pub grad_positives: Vec<Vec<f64>>,
    pub grad_negatives: Vec<Vec<f64>>,
}

/// Multi-positive InfoNCE with dot-product similarity and temperature `beta`:
///
/// `L = -log( Σ_P exp(q·p/β) / (Σ_P exp(q·p/β) + Σ_N exp(q·n/β)) )`
pub fn infonce_loss(batch: &ContrastiveBatch, beta: f64) -> Result<InfoNceOutput, AdaptError> {
    if batch.positives.is_empty() {
        return Err(AdaptError::EmptyPositives);
    }
    let q = &batch.query;
    let zeros = |v: &[Vec<f64>]| v.iter().map(|x| vec![0.0; x.len()]).collect::<Vec<_>>();
    if batch.negatives.is_empty() {
        return Ok(InfoNceOutput {
            value: 0.0,
            grad_query: vec![0.0; q.len()],
            grad_positives: zeros(&batch.positives),
            grad_negatives: Vec::new(),
        });
    }
    let sp: Vec<f64> = batch.positives.iter().map(|p| dot(q, p) / beta).collect();
    let sn: Vec<f64> = batch.negatives.iter().map(|n| dot(q, n) / beta).collect();
    let all: Vec<f64> = sp.iter().chain(&sn).copied().collect();
    let lse_pos = log_sum_exp(&sp);
    let lse_all = log_sum_exp(&all);
    let value = (lse_all - lse_pos).max(0.0);

    // dL/ds for positives: softmax over all minus softmax over positives.
    let wp: Vec<f64> = sp.iter().map(|s| (s - lse_all).exp() - (s - lse_pos).exp()).collect();
    let wn: Vec<f64> = sn.iter().map(|s| (s - lse_all).exp()).collect();

    let mut grad_query = vec![0.0; q.len()];
    for (w, p) in wp.iter().zip(&batch.positives) {
        grad_query.iter_mut().zip(p).for_each(|(g, x)| *g += w * x / beta);
    }
    for (w, n) in wn.iter().zip(&batch.negatives) {
        grad_query.iter_mut().zip(n).for_each(|(g, x)| *g += w * x / beta);
    }
    let scale_q = |w: f64| q.iter().map(|x| w * x / beta).collect::<Vec<_>>();
    Ok(InfoNceOutput {
        value,
        grad_query,
        grad_positives: wp.iter().map(|&w| scale_q(w)).collect(),
        grad_negatives: wn.iter().map(|&w| scale_q(w)).collect(),
    })
}

/// Cluster membership of a stream plus cached teacher projections of every
/// detection, per stage.
#[derive(Debug, Clone, Default)]
pub struct ClusterContext {
    member_of: HashMap<u64, usize>,
    clusters: Vec<Vec<u64>>,
    teacher_proj: HashMap<u64, Vec<Vec<f64>>>,
}

impl ClusterContext {
    pub fn new(stream: &DetectionStream, cs: &ClusterSet, teacher: &ModelParams) -> Self {
        let teacher_proj = stream
            .detections()
            .map(|(_, d)| {
                let per_stage = teacher.stages.iter().map(|s| s.project(&d.region_feature)).collect();
                (d.det_id, per_stage)
            })
            .collect();
        Self {
            member_of: cs.membership(),
            clusters: cs.clusters.iter().map(|c| c.det_ids().collect()).collect(),
            teacher_proj,
        }
    }

    /// Other members of the detection's cluster.
    pub fn mates(&self, det_id: u64) -> impl Iterator<Item = u64> + '_ {
        self.member_of
            .get(&det_id)
            .into_iter()
            .flat_map(move |&ci| self.clusters[ci].iter().copied().filter(move |&d| d != det_id))
    }

    fn teacher_projection(&self, det_id: u64, stage: usize) -> Option<&[f64]> {
        self.teacher_proj.get(&det_id).map(|v| v[stage].as_slice())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContrastiveConfig {
    pub beta: f64,
    pub negatives_per_query: usize,
    pub negative_iou_bound: f64,
    pub augment: Augment,
}

/// Stage-averaged, query-averaged multi-positive InfoNCE for one frame.
///
/// Query: teacher projection of a teacher detection. Positives: the student
/// projection of the same (strongly augmented) feature and the teacher
/// projections of its cluster-mates. Negatives: teacher and student
/// projections of sampled non-overlapping proposals.
pub fn contrastive_loss(
    student: &ModelParams,
    teacher: &ModelParams,
    frame: &Frame,
    ctx: &ClusterContext,
    cfg: &ContrastiveConfig,
    rng: &mut impl Rng,
) -> Result<LossOutput, AdaptError> {
    let mut out = LossOutput::zero(student);
    let n_queries = frame.detections.len();
    if n_queries == 0 {
        return Ok(out);
    }
    let k_stages = student.stages.len();
    let norm = 1.0 / (k_stages as f64 * n_queries as f64);

    for det in &frame.detections {
        let x_aug = augment(&det.region_feature, AugmentMode::Strong, &cfg.augment, rng);
        let Ok(neg_idx) =
            sample_negatives(&det.bbox, &frame.proposals, cfg.negatives_per_query, cfg.negative_iou_bound, rng)
        else {
            continue;
        };
        let mates: Vec<u64> = ctx.mates(det.det_id).collect();

        for (k, (s_stage, t_stage)) in student.stages.iter().zip(&teacher.stages).enumerate() {
            let query = t_stage.project(&det.region_feature);
            let student_pos = s_stage.project(&x_aug);
            let mut positives = vec![student_pos.clone()];
            for &m in &mates {
                if let Some(p) = ctx.teacher_projection(m, k) {
                    positives.push(p.to_vec());
                }
            }
            let mut negatives = Vec::with_capacity(2 * neg_idx.len());
            let mut student_negs = Vec::with_capacity(neg_idx.len());
            for &b in &neg_idx {
                let xb = &frame.proposals[b].region_feature;
                negatives.push(t_stage.project(xb));
                let sp = s_stage.project(xb);
                negatives.push(sp.clone());
                student_negs.push((b, sp));
            }
            let batch = ContrastiveBatch { query, positives, negatives };
            let r = infonce_loss(&batch, cfg.beta)?;
            out.value += norm * r.value;

            let g = &mut out.grad.stages[k];
            let dpos: Vec<f64> = r.grad_positives[0].iter().map(|v| v * norm).collect();
            g.projection.add_outer(&x_aug, &dpos);
            // Student negatives sit at odd positions.
            for (slot, (b, _)) in student_negs.iter().enumerate() {
                let dneg: Vec<f64> = r.grad_negatives[2 * slot + 1].iter().map(|v| v * norm).collect();
                g.projection.add_outer(&frame.proposals[*b].region_feature, &dneg);
            }
        }
    }
    Ok(out)
}

/// Sum over stages of the mean-over-proposals `KL(teacher ‖ student)` of the
/// classification distributions.
pub fn kl_loss(student: &ModelParams, teacher: &ModelParams, frame: &Frame) -> LossOutput {
    let mut out = LossOutput::zero(student);
    let n = frame.proposals.len();
    if n == 0 {
        return out;
    }
    let inv = 1.0 / n as f64;
    for (k, (s_stage, t_stage)) in student.stages.iter().zip(&teacher.stages).enumerate() {
        for p in &frame.proposals {
            let x = &p.region_feature;
            let t_log = log_softmax(&t_stage.forward(x).logits);
            let s_out = s_stage.forward(x);
            let s_log = log_softmax(&s_out.logits);
            let t_prob: Vec<f64> = t_log.iter().map(|v| v.exp()).collect();
            let kl: f64 = t_prob
                .iter()
                .zip(t_log.iter().zip(&s_log))
                .filter(|(pt, _)| **pt > 0.0)
                .map(|(pt, (lt, ls))| pt * (lt - ls))
                .sum();
            out.value += inv * kl.max(0.0);
            let s_prob = softmax(&s_out.logits);
            let dlogits: Vec<f64> = s_prob.iter().zip(&t_prob).map(|(ps, pt)| inv * (ps - pt)).collect();
            backprop_stage(s_stage, &mut out.grad.stages[k], x, &s_out.proj, Some(&dlogits), None, None);
        }
    }
    out
}

/// Which optional terms enter the total loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LossTerms {
    pub contrastive: bool,
    pub kl: bool,
}

impl LossTerms {
    pub const ALL: LossTerms = LossTerms { contrastive: true, kl: true };
    pub const SUPERVISED_ONLY: LossTerms = LossTerms { contrastive: false, kl: false };
}

#[derive(Debug, Clone, PartialEq)]
pub struct TotalLoss {
    pub supervised: f64,
    pub contrastive: f64,
    pub kl: f64,
    pub grad: ModelParams,
}

impl TotalLoss {
    pub fn value(&self) -> f64 {
        self.supervised + self.contrastive + self.kl
    }
}

/// Inputs shared by every loss term of one training step.
pub struct StepInputs<'a> {
    pub frame: &'a Frame,
    pub labels: &'a [PseudoLabel],
    pub clusters: Option<&'a ClusterContext>,
}

/// Unweighted sum of the supervised, contrastive and KL terms.
pub fn total_loss(
    student: &ModelParams,
    teacher: &ModelParams,
    inputs: &StepInputs<'_>,
    terms: LossTerms,
    sup_cfg: &SupervisedConfig,
    cl_cfg: &ContrastiveConfig,
    rng: &mut impl Rng,
) -> Result<TotalLoss, AdaptError> {
    let sup = supervised_loss(student, inputs.frame, inputs.labels, sup_cfg, rng);
    let mut grad = sup.grad();
    let mut total = TotalLoss { supervised: sup.value(), contrastive: 0.0, kl: 0.0, grad: student.zeros_like() };
    if terms.contrastive {
        let empty = ClusterContext::default();
        let ctx = inputs.clusters.unwrap_or(&empty);
        let cl = contrastive_loss(student, teacher, inputs.frame, ctx, cl_cfg, rng)?;
        total.contrastive = cl.value;
        grad.add_scaled(&cl.grad, 1.0);
    }
    if terms.kl {
        let kl = kl_loss(student, teacher, inputs.frame);
        total.kl = kl.value;
        grad.add_scaled(&kl.grad, 1.0);
    }
    total.grad = grad;
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapt::model::HeadShape;
    use crate::detstream::Detection;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn weak_and_degenerate_strong_are_identity() {
        let x = vec![0.5, -1.25, 3.0];
        let mut r = rng(0);
        assert_eq!(augment(&x, AugmentMode::Weak, &Augment { noise_std: 1.0, dropout: 0.5 }, &mut r), x);
        assert_eq!(augment(&x, AugmentMode::Strong, &Augment::NONE, &mut r), x);
    }

    #[test]
    fn strong_augment_is_seeded() {
        let x = vec![0.5; 16];
        let a = Augment { noise_std: 0.3, dropout: 0.2 };
        let one = augment(&x, AugmentMode::Strong, &a, &mut rng(9));
        let two = augment(&x, AugmentMode::Strong, &a, &mut rng(9));
        assert_eq!(one, two);
        assert_ne!(one, x);
    }

    #[test]
    fn infonce_closed_forms() {
        let b = ContrastiveBatch { query: vec![1.0, 0.0], positives: vec![vec![1.0, 0.0]], negatives: vec![vec![0.0, 1.0]] };
        let v = infonce_loss(&b, 0.1).unwrap().value;
        let expected = -(10f64.exp() / (10f64.exp() + 1.0)).ln();
        assert!((v - expected).abs() < 1e-15);
        assert!((v - 4.54e-5).abs() < 1e-7);

        let b = ContrastiveBatch { query: vec![1.0, 1.0], positives: vec![vec![0.3, 0.2]], negatives: vec![vec![0.2, 0.3]] };
        assert!((infonce_loss(&b, 0.1).unwrap().value - 2f64.ln()).abs() < 1e-12);

        let b = ContrastiveBatch { query: vec![1.0], positives: vec![vec![2.0]], negatives: vec![] };
        assert_eq!(infonce_loss(&b, 0.1).unwrap().value, 0.0);

        let b = ContrastiveBatch { query: vec![1.0], positives: vec![], negatives: vec![vec![1.0]] };
        assert_eq!(infonce_loss(&b, 0.1), Err(AdaptError::EmptyPositives));
    }

    #[test]
    fn infonce_survives_huge_logits() {
        let b = ContrastiveBatch {
            query: vec![100.0],
            positives: vec![vec![100.0]],
            negatives: vec![vec![99.0], vec![-100.0]],
        };
        let r = infonce_loss(&b, 0.1).unwrap();
        assert!(r.value.is_finite() && r.value >= 0.0);
        assert!(r.grad_query.iter().all(|g| g.is_finite()));
    }

    fn props(boxes: &[[f64; 4]]) -> Vec<Proposal> {
        boxes.iter().map(|b| Proposal { bbox: (*b).into(), region_feature: vec![0.0] }).collect()
    }

    #[test]
    fn negative_sampling_rules() {
        let q = BoundingBox::new(0.0, 0.0, 10.0, 10.0);
        let disjoint: Vec<[f64; 4]> =
            (0..10).map(|i| [20.0 + 15.0 * i as f64, 0.0, 30.0 + 15.0 * i as f64, 10.0]).collect();
        let ps = props(&disjoint);
        let picked = sample_negatives(&q, &ps, 5, 0.05, &mut rng(1)).unwrap();
        assert_eq!(picked.len(), 5);
        let mut uniq = picked.clone();
        uniq.sort_unstable();
        uniq.dedup();
        assert_eq!(uniq.len(), 5);
        assert!(picked.iter().all(|&i| iou(&q, &ps[i].bbox) == 0.0));

        let mut mixed = disjoint[..3].to_vec();
        mixed.extend([[1.0, 1.0, 9.0, 9.0], [0.0, 0.0, 10.0, 10.0]]);
        let picked = sample_negatives(&q, &props(&mixed), 5, 0.05, &mut rng(1)).unwrap();
        assert_eq!(picked, vec![0, 1, 2]);

        let overlapping = props(&[[0.0, 0.0, 9.0, 9.0], [2.0, 2.0, 12.0, 12.0]]);
        assert_eq!(sample_negatives(&q, &overlapping, 5, 0.05, &mut rng(1)), Err(NoNegatives));
    }

    fn small_model(seed: u64, stages: usize) -> ModelParams {
        let shape = HeadShape { stages, feature_dim: 4, proj_dim: 3, num_classes: 2 };
        ModelParams::random(&shape, &mut rng(seed))
    }

    #[test]
    fn kl_is_zero_for_identical_models_and_scales_with_stages() {
        let m = small_model(2, 3);
        let frame = Frame {
            frame_id: 0,
            detections: vec![],
            proposals: (0..4)
                .map(|i| Proposal {
                    bbox: BoundingBox::new(0.0, 0.0, 1.0 + i as f64, 1.0),
                    region_feature: vec![0.1 * i as f64, -0.5, 1.0, 0.3],
                })
                .collect(),
        };
        let out = kl_loss(&m, &m, &frame);
        assert!(out.value.abs() < 1e-15);
        assert!(out.grad.iter().all(|g| g.abs() < 1e-15));

        // Three copies of one stage give exactly three times the one-stage value.
        let t1 = small_model(3, 1);
        let s1 = small_model(4, 1);
        let t3 = ModelParams { stages: vec![t1.stages[0].clone(); 3] };
        let s3 = ModelParams { stages: vec![s1.stages[0].clone(); 3] };
        let one = kl_loss(&s1, &t1, &frame).value;
        let three = kl_loss(&s3, &t3, &frame).value;
        assert!(one > 0.0);
        assert!((three - 3.0 * one).abs() < 1e-12);
    }

    fn label(det_id: u64, bbox: BoundingBox, class_id: usize) -> PseudoLabel {
        PseudoLabel {
            frame_id: 0,
            det_id,
            bbox,
            refined_logits: vec![0.0, 0.0],
            refined_score: 1.0,
            class_id,
            cluster_id: 0,
        }
    }

    #[test]
    fn supervised_loss_perfect_fit_and_empty() {
        // One stage, identity-like projection, huge logit margin for class 0.
        let shape = HeadShape { stages: 1, feature_dim: 2, proj_dim: 2, num_classes: 2 };
        let mut m = ModelParams::zeros(&shape);
        m.stages[0].projection.set(0, 0, 1.0);
        m.stages[0].classifier.set(0, 0, 50.0);
        let b = BoundingBox::new(0.0, 0.0, 10.0, 10.0);
        let frame = Frame {
            frame_id: 0,
            detections: vec![Detection { det_id: 7, bbox: b, score: 1.0, logits: vec![1.0, 0.0], region_feature: vec![1.0, 0.0] }],
            proposals: vec![],
        };
        let cfg = SupervisedConfig { augment: Augment::NONE, proposal_match_iou: 0.5 };
        let out = supervised_loss(&m, &frame, &[label(7, b, 0)], &cfg, &mut rng(0));
        assert!(out.cls < 1e-15);
        assert_eq!(out.reg, 0.0);

        let out = supervised_loss(&m, &frame, &[], &cfg, &mut rng(0));
        assert_eq!(out.value(), 0.0);
        assert!(out.grad().iter().all(|g| *g == 0.0));
    }

    #[test]
    fn contrastive_trivial_cases() {
        let m = small_model(5, 2);
        let cfg = ContrastiveConfig {
            beta: 0.1,
            negatives_per_query: 5,
            negative_iou_bound: 0.05,
            augment: Augment { noise_std: 0.1, dropout: 0.0 },
        };
        let empty = Frame::default();
        let out = contrastive_loss(&m, &m, &empty, &ClusterContext::default(), &cfg, &mut rng(0)).unwrap();
        assert_eq!(out.value, 0.0);

        let b = BoundingBox::new(0.0, 0.0, 10.0, 10.0);
        let frame = Frame {
            frame_id: 0,
            detections: vec![Detection { det_id: 1, bbox: b, score: 1.0, logits: vec![0.0, 0.0], region_feature: vec![1.0, 0.5, -0.5, 0.2] }],
            proposals: vec![Proposal { bbox: b, region_feature: vec![0.0; 4] }],
        };
        let out = contrastive_loss(&m, &m, &frame, &ClusterContext::default(), &cfg, &mut rng(0)).unwrap();
        assert_eq!(out.value, 0.0);
        assert!(out.grad.iter().all(|g| *g == 0.0));
    }
}
