//! Long-term cluster merging and pseudo-label refinement.
//!
//! Clusters broken by occlusion or by the object leaving the view are joined
//! when the last logits of one cluster and the first logits of a later one
//! have cosine similarity above `tau2`. Each detection's logits are then
//! replaced by the mean logits of its cluster.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assoc::Cluster;
use crate::detstream::{BoundingBox, DetectionStream};
use crate::numeric::{argmax, softmax};

/// File extension of the cluster dump.
pub const CLUSTER_EXTENSION: &str = "clusters.jsonl";

#[derive(Debug, Error, PartialEq)]
pub enum ClusterError {
    #[error("cosine similarity of a zero-norm vector")]
    DegenerateVector,
    #[error("vector lengths differ ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("cluster has no members")]
    EmptyCluster,
    #[error("detection {det_id} in frame {frame_id} belongs to no cluster")]
    Unclustered { frame_id: u64, det_id: u64 },
}

/// Clusters of one stream, pairwise disjoint in detection ids.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterSet {
    pub clusters: Vec<Cluster>,
    pub num_classes: usize,
}

impl ClusterSet {
    pub fn new(clusters: Vec<Cluster>, num_classes: usize) -> Self {
        Self { clusters, num_classes }
    }

    pub fn len(&self) -> usize {
        self.clusters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clusters.is_empty()
    }

    /// Maps every det_id to its cluster index.
    pub fn membership(&self) -> HashMap<u64, usize> {
        self.clusters
            .iter()
            .enumerate()
            .flat_map(|(ci, c)| c.det_ids().map(move |d| (d, ci)))
            .collect()
    }
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64, ClusterError> {
    if a.len() != b.len() {
        return Err(ClusterError::LengthMismatch(a.len(), b.len()));
    }
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(ClusterError::DegenerateVector);
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// One merge performed by [`merge_clusters_logged`]: the det_id ending the
/// earlier cluster and the det_id starting the later one.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MergeEvent {
    pub tail_det: u64,
    pub head_det: u64,
    pub similarity: f64,
}

pub fn merge_clusters(cs: &ClusterSet, tau2: f64) -> ClusterSet {
    merge_clusters_logged(cs, tau2).0
}

/// Greedy fixed-point merging: repeatedly joins the eligible pair with the
/// highest similarity above `tau2` (ties go to the lowest index pair).
/// A pair `(a, b)` is eligible only when `a` ends strictly before `b` starts.
pub fn merge_clusters_logged(cs: &ClusterSet, tau2: f64) -> (ClusterSet, Vec<MergeEvent>) {
    let mut clusters: Vec<Option<Cluster>> = cs.clusters.iter().cloned().map(Some).collect();
    let n = clusters.len();

    let link = |a: &Cluster, b: &Cluster| -> Option<f64> {
        let (_, a_last) = a.frame_span()?;
        let (b_first, _) = b.frame_span()?;
        if a_last >= b_first {
            return None;
        }
        cosine_similarity(a.logit_features.last()?, b.logit_features.first()?).ok()
    };

    // sim[a][b]: similarity of a's tail to b's head, when eligible.
    let mut sim: Vec<Vec<Option<f64>>> = (0..n)
        .map(|a| {
            (0..n)
                .map(|b| {
                    let (ca, cb) = (clusters[a].as_ref()?, clusters[b].as_ref()?);
                    if a == b {
                        None
                    } else {
                        link(ca, cb)
                    }
                })
                .collect()
        })
        .collect();

    let mut log = Vec::new();
    loop {
        let mut best: Option<(f64, usize, usize)> = None;
        for (a, row) in sim.iter().enumerate() {
            for (b, s) in row.iter().enumerate() {
                if let Some(s) = *s {
                    if s > tau2 && best.is_none_or(|(bs, _, _)| s > bs) {
                        best = Some((s, a, b));
                    }
                }
            }
        }
        let Some((s, a, b)) = best else { break };

        let tail = clusters[b].take().expect("live cluster");
        let head = clusters[a].as_mut().expect("live cluster");
        log.push(MergeEvent {
            tail_det: head.members.last().expect("nonempty").1,
            head_det: tail.members[0].1,
            similarity: s,
        });
        head.members.extend(tail.members);
        head.logit_features.extend(tail.logit_features);

        // a's tail is now b's tail; a's head is unchanged.
        let merged = clusters[a].as_ref().expect("live cluster");
        for x in 0..n {
            sim[b][x] = None;
            sim[x][b] = None;
        }
        for x in 0..n {
            sim[a][x] = match &clusters[x] {
                Some(cx) if x != a => link(merged, cx),
                _ => None,
            };
            sim[x][a] = match &clusters[x] {
                Some(cx) if x != a => link(cx, merged),
                _ => None,
            };
        }
    }

    let merged = ClusterSet {
        clusters: clusters.into_iter().flatten().collect(),
        num_classes: cs.num_classes,
    };
    (merged, log)
}

/// Element-wise mean of the member logits.
pub fn average_logits(c: &Cluster) -> Result<Vec<f64>, ClusterError> {
    let first = c.logit_features.first().ok_or(ClusterError::EmptyCluster)?;
    let mut acc = vec![0.0; first.len()];
    for l in &c.logit_features {
        for (a, v) in acc.iter_mut().zip(l) {
            *a += v;
        }
    }
    let n = c.logit_features.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Ok(acc)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabel {
    pub frame_id: u64,
    pub det_id: u64,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub refined_logits: Vec<f64>,
    pub refined_score: f64,
    pub class_id: usize,
    pub cluster_id: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FrameLabels {
    pub frame_id: u64,
    pub labels: Vec<PseudoLabel>,
}

/// Builds a label from refined logits; score is the max softmax probability.
pub fn make_label(
    frame_id: u64,
    det_id: u64,
    bbox: BoundingBox,
    logits: Vec<f64>,
    cluster_id: usize,
) -> PseudoLabel {
    let probs = softmax(&logits);
    let class_id = argmax(&logits);
    PseudoLabel {
        frame_id,
        det_id,
        bbox,
        refined_score: probs[class_id],
        refined_logits: logits,
        class_id,
        cluster_id,
    }
}

/// Replaces each detection's logits with its cluster mean and keeps labels
/// whose refined score is strictly above `conf_threshold`. Returns one entry
/// per stream frame, in order.
pub fn refine_pseudo_labels(
    stream: &DetectionStream,
    cs: &ClusterSet,
    conf_threshold: f64,
) -> Result<Vec<FrameLabels>, ClusterError> {
    let membership = cs.membership();
    let means = cs.clusters.iter().map(average_logits).collect::<Result<Vec<_>, _>>()?;
    stream
        .frames
        .iter()
        .map(|frame| {
            let mut labels = Vec::new();
            for det in &frame.detections {
                let &ci = membership.get(&det.det_id).ok_or(ClusterError::Unclustered {
                    frame_id: frame.frame_id,
                    det_id: det.det_id,
                })?;
                let label = make_label(frame.frame_id, det.det_id, det.bbox, means[ci].clone(), ci);
                if label.refined_score > conf_threshold {
                    labels.push(label);
                }
            }
            Ok(FrameLabels { frame_id: frame.frame_id, labels })
        })
        .collect()
}

/// Per-frame labels without any clustering: each detection's own logits,
/// gated by the same confidence rule. Used by the plain mean-teacher variant.
pub fn per_frame_pseudo_labels(stream: &DetectionStream, conf_threshold: f64) -> Vec<FrameLabels> {
    let mut next = 0usize;
    stream
        .frames
        .iter()
        .map(|frame| {
            let labels = frame
                .detections
                .iter()
                .filter_map(|det| {
                    let id = next;
                    next += 1;
                    let l = make_label(frame.frame_id, det.det_id, det.bbox, det.logits.clone(), id);
                    (l.refined_score > conf_threshold).then_some(l)
                })
                .collect();
            FrameLabels { frame_id: frame.frame_id, labels }
        })
        .collect()
}

/// One line of the cluster dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterRecord {
    pub cluster_id: usize,
    pub members: Vec<(u64, u64)>,
    pub refined_logits: Vec<f64>,
}

pub fn cluster_records(cs: &ClusterSet) -> Result<Vec<ClusterRecord>, ClusterError> {
    cs.clusters
        .iter()
        .enumerate()
        .map(|(i, c)| {
            Ok(ClusterRecord { cluster_id: i, members: c.members.clone(), refined_logits: average_logits(c)? })
        })
        .collect()
}

pub fn write_cluster_records<W: Write>(records: &[ClusterRecord], w: &mut W) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut *w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_cluster_records<R: BufRead>(r: R) -> std::io::Result<Vec<ClusterRecord>> {
    r.lines()
        .filter(|l| l.as_ref().map_or(true, |l| !l.trim().is_empty()))
        .map(|l| serde_json::from_str(&l?).map_err(std::io::Error::other))
        .collect()
}
