//! AP50 scoring, cluster quality against oracle tracks, and the Same / Next /
//! Continual evaluation protocols.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapt::{adapt_with_method, decode_box, AdaptConfig, AdaptError, Method, ModelParams};
use crate::assoc::{build_clusters, iou, Cluster};
use crate::cluster::{merge_clusters, ClusterSet};
use crate::detstream::{BoundingBox, DetectionStream};
use crate::numeric::{argmax, softmax};
use crate::simenv::{OracleTrack, ScenarioBundle};

/// IoU a prediction needs with a ground-truth box to count as a hit.
pub const AP_IOU: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredBox {
    pub class_id: usize,
    pub score: f64,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FramePredictions {
    pub frame_id: u64,
    pub boxes: Vec<ScoredBox>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabeledBox {
    pub class_id: usize,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FrameTruth {
    pub frame_id: u64,
    pub boxes: Vec<LabeledBox>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApResult {
    /// `None` for classes without ground truth.
    pub per_class: Vec<Option<f64>>,
    /// Mean over classes with ground truth; 0 when there are none.
    pub map: f64,
}

fn box_key(b: &BoundingBox) -> [f64; 4] {
    b.as_array()
}

/// Orders by descending score, then ascending box coordinates, then frame.
fn prediction_order(a: &(f64, u64, BoundingBox), b: &(f64, u64, BoundingBox)) -> Ordering {
    b.0.total_cmp(&a.0)
        .then_with(|| {
            box_key(&a.2)
                .iter()
                .zip(box_key(&b.2).iter())
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(Ordering::Equal)
        })
        .then_with(|| a.1.cmp(&b.1))
}

/// All-point interpolated area under a precision/recall sequence.
fn all_point_ap(hits: &[bool], n_gt: usize) -> f64 {
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut recall = Vec::with_capacity(hits.len());
    let mut precision = Vec::with_capacity(hits.len());
    for &h in hits {
        if h {
            tp += 1;
        } else {
            fp += 1;
        }
        recall.push(tp as f64 / n_gt as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        ap += (r - prev_recall) * p;
        prev_recall = *r;
    }
    ap
}

/// Per-class AP at IoU 0.5 with greedy one-to-one matching by descending
/// score and all-point interpolation.
pub fn ap50(predictions: &[FramePredictions], truth: &[FrameTruth], num_classes: usize) -> ApResult {
    let mut per_class = Vec::with_capacity(num_classes);
    for c in 0..num_classes {
        let mut gt: HashMap<u64, Vec<(BoundingBox, bool)>> = HashMap::new();
        let mut n_gt = 0;
        for f in truth {
            for b in f.boxes.iter().filter(|b| b.class_id == c) {
                gt.entry(f.frame_id).or_default().push((b.bbox, false));
                n_gt += 1;
            }
        }
        if n_gt == 0 {
            per_class.push(None);
            continue;
        }
        let mut preds: Vec<(f64, u64, BoundingBox)> = predictions
            .iter()
            .flat_map(|f| f.boxes.iter().filter(|b| b.class_id == c).map(move |b| (b.score, f.frame_id, b.bbox)))
            .collect();
        preds.sort_by(prediction_order);
        let hits: Vec<bool> = preds
            .iter()
            .map(|(_, frame, bbox)| {
                let Some(cands) = gt.get_mut(frame) else { return false };
                let best = cands
                    .iter()
                    .enumerate()
                    .filter(|(_, (_, used))| !used)
                    .map(|(i, (g, _))| (i, iou(bbox, g)))
                    .filter(|&(_, v)| v >= AP_IOU)
                    .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
                match best {
                    Some((i, _)) => {
                        cands[i].1 = true;
                        true
                    }
                    None => false,
                }
            })
            .collect();
        per_class.push(Some(all_point_ap(&hits, n_gt)));
    }
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let map = if present.is_empty() { 0.0 } else { present.iter().sum::<f64>() / present.len() as f64 };
    ApResult { per_class, map }
}

/// Pair-counting agreement between clusters and oracle tracks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairMetrics {
    pub precision: f64,
    pub recall: f64,
    pub clustered_pairs: u64,
    pub same_track_pairs: u64,
}

/// Best-IoU oracle track of every stream detection, if it clears `iou_gate`.
pub fn attribute_detections(
    stream: &DetectionStream,
    tracks: &[OracleTrack],
    iou_gate: f64,
) -> HashMap<u64, Option<u64>> {
    let mut by_frame: HashMap<u64, Vec<(u64, BoundingBox)>> = HashMap::new();
    for t in tracks {
        for e in t.entries.iter().filter(|e| e.visible) {
            by_frame.entry(e.frame_id).or_default().push((t.track_id, e.bbox));
        }
    }
    stream
        .detections()
        .map(|(frame_id, d)| {
            let best = by_frame
                .get(&frame_id)
                .into_iter()
                .flatten()
                .map(|(id, b)| (*id, iou(&d.bbox, b)))
                .filter(|&(_, v)| v >= iou_gate)
                .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
            (d.det_id, best.map(|(id, _)| id))
        })
        .collect()
}

/// Precision: share of intra-cluster pairs whose detections belong to the
/// same oracle track (1.0 when there are no such pairs). Recall: share of
/// same-track pairs that share a cluster (1.0 when there are none).
/// Detections with no track above `iou_gate` never agree with anything.
pub fn cluster_pair_metrics(
    clusters: &[Cluster],
    stream: &DetectionStream,
    tracks: &[OracleTrack],
    iou_gate: f64,
) -> PairMetrics {
    let track_of = attribute_detections(stream, tracks, iou_gate);
    let mut clustered = 0u64;
    let mut correct = 0u64;
    for c in clusters {
        let labels: Vec<Option<u64>> = c.det_ids().map(|d| track_of.get(&d).copied().flatten()).collect();
        for i in 0..labels.len() {
            for j in i + 1..labels.len() {
                clustered += 1;
                if labels[i].is_some() && labels[i] == labels[j] {
                    correct += 1;
                }
            }
        }
    }
    let mut per_track: HashMap<u64, u64> = HashMap::new();
    for t in track_of.values().flatten() {
        *per_track.entry(*t).or_default() += 1;
    }
    let same_track: u64 = per_track.values().map(|n| n * (n.saturating_sub(1)) / 2).sum();
    PairMetrics {
        precision: if clustered == 0 { 1.0 } else { correct as f64 / clustered as f64 },
        recall: if same_track == 0 { 1.0 } else { correct as f64 / same_track as f64 },
        clustered_pairs: clustered,
        same_track_pairs: same_track,
    }
}

/// The stream's own detections as predictions: class is the logit argmax,
/// score the stream confidence.
pub fn stream_predictions(stream: &DetectionStream) -> Vec<FramePredictions> {
    stream
        .frames
        .iter()
        .map(|f| FramePredictions {
            frame_id: f.frame_id,
            boxes: f
                .detections
                .iter()
                .map(|d| ScoredBox { class_id: argmax(&d.logits), score: d.score, bbox: d.bbox })
                .collect(),
        })
        .collect()
}

/// Re-scores stream detections with `model`. The class is the best
/// foreground logit, the score its probability under the full softmax
/// (background included), and the box is refined by the predicted deltas.
pub fn model_predictions(model: &ModelParams, stream: &DetectionStream) -> Vec<FramePredictions> {
    let c = stream.header.num_classes;
    stream
        .frames
        .iter()
        .map(|f| FramePredictions {
            frame_id: f.frame_id,
            boxes: f
                .detections
                .iter()
                .map(|d| {
                    let (logits, deltas) = model.predict(&d.region_feature);
                    let class_id = argmax(&logits[..c]);
                    ScoredBox { class_id, score: softmax(&logits)[class_id], bbox: decode_box(&d.bbox, &deltas) }
                })
                .collect(),
        })
        .collect()
}

/// Ground truth used as predictions with score 1.
pub fn oracle_predictions(truth: &[FrameTruth]) -> Vec<FramePredictions> {
    truth
        .iter()
        .map(|f| FramePredictions {
            frame_id: f.frame_id,
            boxes: f.boxes.iter().map(|b| ScoredBox { class_id: b.class_id, score: 1.0, bbox: b.bbox }).collect(),
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    /// Adapt on a layout and evaluate on the same layout.
    #[default]
    Same,
    /// Adapt on layout i and evaluate, without updates, on layout i + 1.
    Next,
    /// Adapt through all layouts in order, then evaluate on every layout.
    Cl,
}

impl Protocol {
    pub fn name(self) -> &'static str {
        match self {
            Protocol::Same => "same",
            Protocol::Next => "next",
            Protocol::Cl => "cl",
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Protocol {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "same" => Ok(Protocol::Same),
            "next" => Ok(Protocol::Next),
            "cl" => Ok(Protocol::Cl),
            other => Err(format!("unknown protocol `{other}` (expected same, next or cl)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Adapted,
    SourceOnly,
    Oracle,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Adapted => "adapted",
            Variant::SourceOnly => "source_only",
            Variant::Oracle => "oracle",
        }
    }
}

/// One evaluated cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    /// Layout the model is evaluated on.
    pub layout: usize,
    pub protocol: Protocol,
    pub variant: Variant,
    /// Layouts the evaluated model was adapted on, in order.
    pub adapted_on: Vec<usize>,
    pub map50: f64,
    pub per_class_ap50: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterQuality {
    pub layout: usize,
    pub tau2: f64,
    pub clusters: usize,
    pub metrics: PairMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub seed: u64,
    pub protocol: Protocol,
    pub method: Method,
    pub config: AdaptConfig,
    pub rows: Vec<ReportRow>,
    /// Clustering of each raw stream against its oracle tracks.
    pub cluster_quality: Vec<ClusterQuality>,
    /// Set by the next-layout protocol: parameters were bit-identical before
    /// and after every evaluation.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub parameters_unchanged: Option<bool>,
}

impl EvalReport {
    pub fn rows_for(&self, variant: Variant) -> impl Iterator<Item = &ReportRow> {
        self.rows.iter().filter(move |r| r.variant == variant)
    }

    /// Mean mAP50 over the rows of one variant.
    pub fn mean_map(&self, variant: Variant) -> f64 {
        let v: Vec<f64> = self.rows_for(variant).map(|r| r.map50).collect();
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    }

    pub fn write_json(&self, path: &Path) -> std::io::Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(std::io::Error::other)?;
        std::fs::write(path, text + "\n")
    }

    pub fn write_csv<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        writeln!(w, "layout,protocol,variant,map50")?;
        for r in &self.rows {
            writeln!(w, "{},{},{},{}", r.layout, r.protocol, r.variant.name(), r.map50)?;
        }
        Ok(())
    }

    /// Human-readable table of the rows.
    pub fn table(&self) -> String {
        let mut out = format!("{:<8}{:<10}{:<14}{:<14}{:>8}\n", "layout", "protocol", "variant", "adapted_on", "mAP50");
        for r in &self.rows {
            let on: Vec<String> = r.adapted_on.iter().map(usize::to_string).collect();
            let on = if on.is_empty() { "-".to_string() } else { on.join(">") };
            out += &format!(
                "{:<8}{:<10}{:<14}{:<14}{:>8.4}\n",
                r.layout,
                r.protocol.name(),
                r.variant.name(),
                on,
                r.map50
            );
        }
        out
    }
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("protocol `{protocol}` needs at least 2 layouts, bundle has {layouts}")]
    TooFewLayouts { protocol: Protocol, layouts: usize },
    #[error("model parameters changed during evaluation of layout {layout}")]
    ParametersChanged { layout: usize },
    #[error(transparent)]
    Adapt(#[from] AdaptError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProtocolOptions {
    /// Upper bound on concurrent threshold runs.
    pub max_threads: usize,
    /// Score ground truth as predictions instead of running any model.
    pub oracle_predictions: bool,
}

impl Default for ProtocolOptions {
    fn default() -> Self {
        Self { max_threads: 1, oracle_predictions: false }
    }
}

struct Evaluator<'a> {
    bundle: &'a ScenarioBundle,
    truth: Vec<Vec<FrameTruth>>,
    protocol: Protocol,
    oracle: bool,
}

impl Evaluator<'_> {
    fn row(&self, model: &ModelParams, layout: usize, variant: Variant, adapted_on: Vec<usize>) -> ReportRow {
        let stream = &self.bundle.target_streams[layout];
        let (preds, variant) = if self.oracle {
            (oracle_predictions(&self.truth[layout]), Variant::Oracle)
        } else {
            (model_predictions(model, stream), variant)
        };
        let ap = ap50(&preds, &self.truth[layout], stream.header.num_classes);
        ReportRow { layout, protocol: self.protocol, variant, adapted_on, map50: ap.map, per_class_ap50: ap.per_class }
    }
}

/// Runs one evaluation protocol over every layout of `bundle`, starting
/// adaptation from `source`. Source-only rows accompany every adapted row.
pub fn run_protocol(
    protocol: Protocol,
    bundle: &ScenarioBundle,
    source: &ModelParams,
    config: &AdaptConfig,
    options: ProtocolOptions,
) -> Result<EvalReport, EvalError> {
    config.validate()?;
    let r = bundle.target_streams.len();
    if protocol != Protocol::Same && r < 2 {
        return Err(EvalError::TooFewLayouts { protocol, layouts: r });
    }
    let ev = Evaluator {
        bundle,
        truth: (0..r).map(|l| bundle.ground_truth(l)).collect(),
        protocol,
        oracle: options.oracle_predictions,
    };
    let adapt = |from: &ModelParams, layout: usize| -> Result<ModelParams, AdaptError> {
        if ev.oracle {
            return Ok(from.clone());
        }
        adapt_with_method(from, &bundle.target_streams[layout], config, options.max_threads)
    };

    let mut rows = Vec::new();
    let mut parameters_unchanged = None;
    match protocol {
        Protocol::Same => {
            for l in 0..r {
                let adapted = adapt(source, l)?;
                rows.push(ev.row(&adapted, l, Variant::Adapted, vec![l]));
                rows.push(ev.row(source, l, Variant::SourceOnly, vec![]));
            }
        }
        Protocol::Next => {
            for l in 0..r - 1 {
                let adapted = adapt(source, l)?;
                let before = adapted.clone();
                rows.push(ev.row(&adapted, l + 1, Variant::Adapted, vec![l]));
                if adapted != before {
                    return Err(EvalError::ParametersChanged { layout: l + 1 });
                }
                rows.push(ev.row(source, l + 1, Variant::SourceOnly, vec![]));
            }
            parameters_unchanged = Some(true);
        }
        Protocol::Cl => {
            let mut model = source.clone();
            for l in 0..r {
                model = adapt(&model, l)?;
            }
            let order: Vec<usize> = (0..r).collect();
            for l in 0..r {
                rows.push(ev.row(&model, l, Variant::Adapted, order.clone()));
            }
            for l in 0..r {
                rows.push(ev.row(source, l, Variant::SourceOnly, vec![]));
            }
        }
    }

    let mut cluster_quality = Vec::new();
    for (l, stream) in bundle.target_streams.iter().enumerate() {
        let initial = ClusterSet::new(build_clusters(stream, config.tau1, config.eps), stream.header.num_classes);
        for &tau2 in &config.tau2_list {
            let merged = merge_clusters(&initial, tau2);
            cluster_quality.push(ClusterQuality {
                layout: l,
                tau2,
                clusters: merged.len(),
                metrics: cluster_pair_metrics(&merged.clusters, stream, &bundle.oracle[l], AP_IOU),
            });
        }
    }

    Ok(EvalReport {
        seed: bundle.config.seed,
        protocol,
        method: config.method,
        config: config.clone(),
        rows,
        cluster_quality,
        parameters_unchanged,
    })
}

/// Mean mAP50 of each variant, keyed by variant name.
pub fn summarize(report: &EvalReport) -> BTreeMap<&'static str, f64> {
    [Variant::Adapted, Variant::SourceOnly, Variant::Oracle]
        .into_iter()
        .filter(|v| report.rows_for(*v).next().is_some())
        .map(|v| (v.name(), report.mean_map(v)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BoundingBox {
        BoundingBox::new(x1, y1, x2, y2)
    }

    fn truth(boxes: &[(u64, usize, BoundingBox)]) -> Vec<FrameTruth> {
        let mut frames: BTreeMap<u64, FrameTruth> = BTreeMap::new();
        for &(f, c, b) in boxes {
            frames.entry(f).or_insert(FrameTruth { frame_id: f, boxes: vec![] }).boxes.push(LabeledBox {
                class_id: c,
                bbox: b,
            });
        }
        frames.into_values().collect()
    }

    fn preds(boxes: &[(u64, usize, f64, BoundingBox)]) -> Vec<FramePredictions> {
        let mut frames: BTreeMap<u64, FramePredictions> = BTreeMap::new();
        for &(f, c, s, b) in boxes {
            frames.entry(f).or_insert(FramePredictions { frame_id: f, boxes: vec![] }).boxes.push(ScoredBox {
                class_id: c,
                score: s,
                bbox: b,
            });
        }
        frames.into_values().collect()
    }

    #[test]
    fn perfect_and_empty() {
        let gt = truth(&[(0, 0, bx(0.0, 0.0, 10.0, 10.0)), (1, 1, bx(5.0, 5.0, 20.0, 20.0))]);
        assert_eq!(ap50(&oracle_predictions(&gt), &gt, 2).map, 1.0);
        assert_eq!(ap50(&[], &gt, 2).map, 0.0);
    }

    #[test]
    fn hand_computed_pr_curve() {
        let g1 = bx(0.0, 0.0, 10.0, 10.0);
        let g2 = bx(50.0, 50.0, 60.0, 60.0);
        let gt = truth(&[(0, 0, g1), (0, 0, g2)]);
        let p = preds(&[(0, 0, 0.9, g1), (0, 0, 0.8, bx(100.0, 100.0, 110.0, 110.0))]);
        let r = ap50(&p, &gt, 1);
        assert!((r.map - 0.5).abs() < 1e-15);

        // FP first, then TP: points (0, 0), (0.5, 0.5) -> 0.25.
        let p = preds(&[(0, 0, 0.95, bx(100.0, 100.0, 110.0, 110.0)), (0, 0, 0.9, g1)]);
        assert!((ap50(&p, &gt, 1).map - 0.25).abs() < 1e-15);
    }

    #[test]
    fn duplicates_count_once_and_absent_classes_are_skipped() {
        let g = bx(0.0, 0.0, 10.0, 10.0);
        let gt = truth(&[(0, 1, g)]);
        let p = preds(&[(0, 1, 0.9, g), (0, 1, 0.8, g)]);
        let r = ap50(&p, &gt, 3);
        assert_eq!(r.per_class, vec![None, Some(1.0), None]);
        assert_eq!(r.map, 1.0);
    }

    #[test]
    fn iou_threshold_is_inclusive() {
        // [0,0,10,10] vs [0,0,10,5]: IoU exactly 0.5.
        let gt = truth(&[(0, 0, bx(0.0, 0.0, 10.0, 10.0))]);
        let p = preds(&[(0, 0, 0.7, bx(0.0, 0.0, 10.0, 5.0))]);
        assert_eq!(ap50(&p, &gt, 1).map, 1.0);
    }

    fn track(id: u64, boxes: &[(u64, BoundingBox)]) -> OracleTrack {
        OracleTrack {
            track_id: id,
            category: 0,
            entries: boxes
                .iter()
                .map(|&(f, b)| crate::simenv::OracleEntry { frame_id: f, bbox: b, visible: true })
                .collect(),
        }
    }

    fn stream_of(dets: &[(u64, u64, BoundingBox)]) -> DetectionStream {
        use crate::detstream::{Detection, Frame, StreamHeader};
        let mut s = DetectionStream::new(StreamHeader::new(1, 1));
        for &(f, id, b) in dets {
            if s.frames.last().is_none_or(|fr| fr.frame_id != f) {
                s.frames.push(Frame { frame_id: f, ..Default::default() });
            }
            s.frames.last_mut().unwrap().detections.push(Detection {
                det_id: id,
                bbox: b,
                score: 1.0,
                logits: vec![0.0],
                region_feature: vec![0.0],
            });
        }
        s
    }

    fn cluster(members: &[(u64, u64)]) -> Cluster {
        Cluster { members: members.to_vec(), logit_features: vec![vec![0.0]; members.len()] }
    }

    #[test]
    fn pair_metric_examples() {
        let a = bx(0.0, 0.0, 10.0, 10.0);
        let b = bx(50.0, 0.0, 60.0, 10.0);
        let stream = stream_of(&[(0, 0, a), (0, 1, b), (1, 2, a), (1, 3, b)]);
        let tracks = vec![track(0, &[(0, a), (1, a)]), track(1, &[(0, b), (1, b)])];

        let exact = [cluster(&[(0, 0), (1, 2)]), cluster(&[(0, 1), (1, 3)])];
        let m = cluster_pair_metrics(&exact, &stream, &tracks, 0.5);
        assert_eq!((m.precision, m.recall), (1.0, 1.0));

        let singles: Vec<Cluster> = (0..4).map(|i| cluster(&[(i / 2, i)])).collect();
        let m = cluster_pair_metrics(&singles, &stream, &tracks, 0.5);
        assert_eq!((m.precision, m.recall), (1.0, 0.0));

        let mixed = [cluster(&[(0, 0), (0, 1), (1, 2), (1, 3)])];
        let m = cluster_pair_metrics(&mixed, &stream, &tracks, 0.5);
        assert_eq!(m.clustered_pairs, 6);
        assert!((m.precision - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(m.recall, 1.0);
    }

    #[test]
    fn unmatched_detections_never_agree() {
        let a = bx(0.0, 0.0, 10.0, 10.0);
        let far = bx(200.0, 200.0, 210.0, 210.0);
        let stream = stream_of(&[(0, 0, far), (1, 1, far)]);
        let tracks = vec![track(0, &[(0, a), (1, a)])];
        let m = cluster_pair_metrics(&[cluster(&[(0, 0), (1, 1)])], &stream, &tracks, 0.5);
        assert_eq!(m.precision, 0.0);
    }

    #[test]
    fn protocol_parsing_and_csv() {
        assert_eq!("cl".parse::<Protocol>(), Ok(Protocol::Cl));
        assert!("both".parse::<Protocol>().is_err());
        let report = EvalReport {
            seed: 1,
            protocol: Protocol::Same,
            method: Method::Full,
            config: AdaptConfig::default(),
            rows: vec![ReportRow {
                layout: 0,
                protocol: Protocol::Same,
                variant: Variant::SourceOnly,
                adapted_on: vec![],
                map50: 0.25,
                per_class_ap50: vec![Some(0.25)],
            }],
            cluster_quality: vec![],
            parameters_unchanged: None,
        };
        let mut buf = Vec::new();
        report.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "layout,protocol,variant,map50\n0,same,source_only,0.25\n");
    }
}
