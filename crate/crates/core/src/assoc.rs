//! Frame-to-frame association of detections.
//!
//! Consecutive frames are linked by a similarity that mixes box overlap and
//! logit agreement, `s = IoU / (‖l_prev − l_curr‖ + eps)`. Its reciprocal is
//! the assignment cost; zero-overlap pairs get an infinite cost. An optimal
//! assignment is gated by `tau1` to decide which detections continue an
//! existing cluster and which open a new one.

use serde::{Deserialize, Serialize};

use crate::detstream::{BoundingBox, Detection, DetectionStream};

/// Default `eps` in the similarity denominator.
pub const DEFAULT_EPS: f64 = 1e-6;

/// Default matching gate on the inverse-similarity distance.
pub const DEFAULT_TAU1: f64 = 1.5;

/// Intersection over union of two boxes; 0 when they do not overlap.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let iw = a.x2.min(b.x2) - a.x1.max(b.x1);
    let ih = a.y2.min(b.y2) - a.y1.max(b.y1);
    if iw <= 0.0 || ih <= 0.0 {
        return 0.0;
    }
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Dense row-major matrix used for both similarity and distance tables.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Table {
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    /// Builds from nested rows. Panics if rows are ragged.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        Self::from_fn(rows.len(), cols, |i, j| rows[i][j])
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0 || self.cols == 0
    }
}

/// `s[i][j] = IoU(prev_i, curr_j) / (E(l_prev_i, l_curr_j) + eps)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix(pub Table);

/// Reciprocal of [`SimilarityMatrix`]; `f64::INFINITY` where similarity is 0.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix(pub Table);

pub fn similarity_matrix(prev: &[Detection], curr: &[Detection], eps: f64) -> SimilarityMatrix {
    SimilarityMatrix(Table::from_fn(prev.len(), curr.len(), |i, j| {
        let overlap = iou(&prev[i].bbox, &curr[j].bbox);
        if overlap == 0.0 {
            0.0
        } else {
            overlap / (euclidean(&prev[i].logits, &curr[j].logits) + eps)
        }
    }))
}

pub fn distance_matrix(s: &SimilarityMatrix) -> DistanceMatrix {
    let t = &s.0;
    DistanceMatrix(Table::from_fn(t.rows(), t.cols(), |i, j| {
        let v = t.get(i, j);
        if v != 0.0 {
            1.0 / v
        } else {
            f64::INFINITY
        }
    }))
}

/// Partial injection of rows into columns.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Assignment {
    pub pairs: Vec<(usize, usize)>,
}

impl Assignment {
    pub fn cost(&self, d: &DistanceMatrix) -> f64 {
        self.pairs.iter().map(|&(i, j)| d.0.get(i, j)).sum()
    }
}

/// Minimum-cost perfect matching on a square matrix of finite costs.
/// Returns `col_of[row]`.
///
/// Shortest augmenting paths with dual potentials, O(n³).
fn solve_square(n: usize, cost: impl Fn(usize, usize) -> f64) -> Vec<usize> {
    const NONE: usize = usize::MAX;
    // 1-based internally; index 0 is the virtual root column.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut row_of = vec![NONE; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == NONE {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut col_of = vec![NONE; n];
    for j in 1..=n {
        if row_of[j] != NONE {
            col_of[row_of[j] - 1] = j - 1;
        }
    }
    col_of
}

/// Minimum-cost assignment of size `min(rows, cols)` on a finite cost table.
/// Rectangular inputs are padded to square with zero-cost dummy cells.
pub fn solve_assignment(costs: &Table) -> Vec<(usize, usize)> {
    if costs.is_empty() {
        return Vec::new();
    }
    let n = costs.rows().max(costs.cols());
    let col_of = solve_square(n, |i, j| {
        if i < costs.rows() && j < costs.cols() {
            costs.get(i, j)
        } else {
            0.0
        }
    });
    col_of
        .into_iter()
        .enumerate()
        .filter(|&(i, j)| i < costs.rows() && j < costs.cols())
        .collect()
}

/// Finite stand-in for an infinite distance.
///
/// Large enough that any assignment with fewer infinite cells beats one with
/// more, no matter the finite costs, yet close enough to the finite scale
/// that potentials keep full precision on the finite cells.
fn sentinel_pad(d: &Table) -> f64 {
    let max_finite = d.data.iter().copied().filter(|v| v.is_finite()).fold(0.0f64, f64::max);
    let k = d.rows().min(d.cols()) as f64;
    (2.0 * k * max_finite + 1.0).max(1.0)
}

/// Optimal assignment on a distance matrix. Pairs that land on an infinite
/// cell are dropped from the result.
pub fn hungarian_assign(d: &DistanceMatrix) -> Assignment {
    let t = &d.0;
    if t.is_empty() {
        return Assignment::default();
    }
    let pad = sentinel_pad(t);
    let finite = Table::from_fn(t.rows(), t.cols(), |i, j| {
        let v = t.get(i, j);
        if v.is_finite() {
            v
        } else {
            pad
        }
    });
    let pairs = solve_assignment(&finite)
        .into_iter()
        .filter(|&(i, j)| t.get(i, j).is_finite())
        .collect();
    Assignment { pairs }
}

/// One tracked object: detections linked across frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cluster {
    /// `(frame_id, det_id)` in strictly increasing frame order.
    pub members: Vec<(u64, u64)>,
    /// Logits of each member, aligned with `members`.
    pub logit_features: Vec<Vec<f64>>,
}

impl Cluster {
    pub fn singleton(frame_id: u64, det: &Detection) -> Self {
        Self { members: vec![(frame_id, det.det_id)], logit_features: vec![det.logits.clone()] }
    }

    pub fn push(&mut self, frame_id: u64, det: &Detection) {
        debug_assert!(self.members.last().is_none_or(|&(f, _)| f < frame_id));
        self.members.push((frame_id, det.det_id));
        self.logit_features.push(det.logits.clone());
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// `(first_frame, last_frame)`; `None` for an empty cluster.
    pub fn frame_span(&self) -> Option<(u64, u64)> {
        Some((self.members.first()?.0, self.members.last()?.0))
    }

    pub fn det_ids(&self) -> impl Iterator<Item = u64> + '_ {
        self.members.iter().map(|&(_, d)| d)
    }
}

/// Result of linking one frame to the clusters open at the previous frame.
#[derive(Debug, Clone, Default)]
pub struct FrameMatch {
    /// Extended clusters, each paired with its newest member.
    pub continuations: Vec<(Cluster, Detection)>,
    /// Previously open clusters that found no accepted match.
    pub closed: Vec<Cluster>,
    /// Current detections that start new clusters.
    pub fresh: Vec<Detection>,
}

/// For each previous detection, the index of the current detection it is
/// linked to (assignment accepted by the `tau1` gate), if any.
pub fn link_frames(prev: &[Detection], curr: &[Detection], tau1: f64, eps: f64) -> Vec<Option<usize>> {
    let mut target = vec![None; prev.len()];
    if prev.is_empty() || curr.is_empty() {
        return target;
    }
    let dist = distance_matrix(&similarity_matrix(prev, curr, eps));
    for (i, j) in hungarian_assign(&dist).pairs {
        if dist.0.get(i, j) <= tau1 {
            target[i] = Some(j);
        }
    }
    target
}

pub fn match_frames(
    prev_open: Vec<(Cluster, Detection)>,
    frame_id: u64,
    curr: &[Detection],
    tau1: f64,
    eps: f64,
) -> FrameMatch {
    let prev_dets: Vec<Detection> = prev_open.iter().map(|(_, d)| d.clone()).collect();
    let target = link_frames(&prev_dets, curr, tau1, eps);
    let mut taken = vec![false; curr.len()];
    let mut out = FrameMatch::default();
    for ((mut cluster, _), t) in prev_open.into_iter().zip(target) {
        match t {
            Some(j) => {
                taken[j] = true;
                cluster.push(frame_id, &curr[j]);
                out.continuations.push((cluster, curr[j].clone()));
            }
            None => out.closed.push(cluster),
        }
    }
    out.fresh = curr.iter().zip(&taken).filter(|(_, &t)| !t).map(|(d, _)| d.clone()).collect();
    out
}

/// Links every detection of `stream` into clusters, frame by frame.
///
/// Output order is creation order: clusters seeded earlier come first, and
/// clusters seeded in the same frame follow detection order.
pub fn build_clusters(stream: &DetectionStream, tau1: f64, eps: f64) -> Vec<Cluster> {
    let mut clusters: Vec<Cluster> = Vec::new();
    // (cluster index, index of its newest member within the previous frame)
    let mut open: Vec<(usize, usize)> = Vec::new();
    let mut prev_dets: &[Detection] = &[];

    for frame in &stream.frames {
        let curr = &frame.detections;
        let open_dets: Vec<Detection> = open.iter().map(|&(_, k)| prev_dets[k].clone()).collect();
        let target = link_frames(&open_dets, curr, tau1, eps);

        let mut owner: Vec<Option<usize>> = vec![None; curr.len()];
        for (&(ci, _), t) in open.iter().zip(&target) {
            if let Some(j) = *t {
                owner[j] = Some(ci);
            }
        }
        open.clear();
        for (j, det) in curr.iter().enumerate() {
            let ci = match owner[j] {
                Some(ci) => {
                    clusters[ci].push(frame.frame_id, det);
                    ci
                }
                None => {
                    clusters.push(Cluster::singleton(frame.frame_id, det));
                    clusters.len() - 1
                }
            };
            open.push((ci, j));
        }
        prev_dets = curr;
    }
    clusters
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detstream::{Frame, StreamHeader};

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BoundingBox {
        BoundingBox::new(x1, y1, x2, y2)
    }

    fn det(id: u64, b: BoundingBox, logits: Vec<f64>) -> Detection {
        Detection { det_id: id, bbox: b, score: 0.9, logits, region_feature: vec![0.0] }
    }

    #[test]
    fn iou_examples() {
        let a = bx(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&bx(0.0, 0.0, 1.0, 1.0), &bx(2.0, 2.0, 3.0, 3.0)), 0.0);
        let v = iou(&bx(0.0, 0.0, 2.0, 2.0), &bx(1.0, 1.0, 3.0, 3.0));
        assert!((v - 1.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn similarity_examples() {
        // IoU 0.5: [0,0,2,1] vs [0,0,1,1]; logits one unit apart.
        let p = det(0, bx(0.0, 0.0, 2.0, 1.0), vec![0.0, 0.0]);
        let c = det(1, bx(0.0, 0.0, 1.0, 1.0), vec![1.0, 0.0]);
        let s = similarity_matrix(&[p.clone()], &[c], 1e-6);
        assert!((s.0.get(0, 0) - 0.5 / (1.0 + 1e-6)).abs() < 1e-15);
        assert!((s.0.get(0, 0) - 0.4999995).abs() < 1e-12);

        let far = det(2, bx(5.0, 5.0, 6.0, 6.0), vec![0.0, 0.0]);
        assert_eq!(similarity_matrix(&[p.clone()], &[far], 1e-6).0.get(0, 0), 0.0);

        let same = similarity_matrix(&[p.clone()], &[p], 1e-6);
        assert!((same.0.get(0, 0) - 1e6).abs() < 1e-6);
    }

    #[test]
    fn distance_examples() {
        let s = SimilarityMatrix(Table::from_rows(&[vec![0.5, 0.0, 1e6]]));
        let d = distance_matrix(&s);
        assert_eq!(d.0.get(0, 0), 2.0);
        assert!(d.0.get(0, 1).is_infinite());
        assert!((d.0.get(0, 2) - 1e-6).abs() < 1e-20);
    }

    #[test]
    fn hungarian_examples() {
        let d = DistanceMatrix(Table::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]));
        let a = hungarian_assign(&d);
        assert_eq!(a.pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(a.cost(&d), 2.0);

        let d = DistanceMatrix(Table::from_rows(&[vec![5.0]]));
        assert_eq!(hungarian_assign(&d).pairs, vec![(0, 0)]);

        let d = DistanceMatrix(Table::from_rows(&[vec![1.0, 9.0, 9.0], vec![9.0, 1.0, 9.0]]));
        assert_eq!(hungarian_assign(&d).pairs, vec![(0, 0), (1, 1)]);

        let d = DistanceMatrix(Table::from_rows(&[vec![9.0, 1.0], vec![1.0, 9.0], vec![4.0, 4.0]]));
        assert_eq!(hungarian_assign(&d).pairs, vec![(0, 1), (1, 0)]);

        assert!(hungarian_assign(&DistanceMatrix(Table::from_rows(&[]))).pairs.is_empty());
    }

    #[test]
    fn infinite_cells_are_avoided_and_dropped() {
        let inf = f64::INFINITY;
        // The only way to avoid infinity in row 0 is col 1, forcing row 1 to col 0.
        let d = DistanceMatrix(Table::from_rows(&[vec![inf, 100.0], vec![0.001, 0.002]]));
        assert_eq!(hungarian_assign(&d).pairs, vec![(0, 1), (1, 0)]);
        // An all-infinite row matches nothing.
        let d = DistanceMatrix(Table::from_rows(&[vec![inf, inf], vec![1.0, 2.0]]));
        assert_eq!(hungarian_assign(&d).pairs, vec![(1, 0)]);
    }

    fn pair_with_distance(d: f64) -> (Vec<(Cluster, Detection)>, Vec<Detection>) {
        // Identical boxes (IoU 1), logits `d` apart with eps 0 so distance == d.
        let prev = det(0, bx(0.0, 0.0, 4.0, 4.0), vec![0.0]);
        let curr = det(1, bx(0.0, 0.0, 4.0, 4.0), vec![d]);
        (vec![(Cluster::singleton(0, &prev), prev)], vec![curr])
    }

    #[test]
    fn gate_accepts_and_rejects() {
        let (open, curr) = pair_with_distance(1.2);
        let m = match_frames(open, 1, &curr, 1.5, 0.0);
        assert_eq!(m.continuations.len(), 1);
        assert!(m.fresh.is_empty());
        assert_eq!(m.continuations[0].0.members, vec![(0, 0), (1, 1)]);

        let (open, curr) = pair_with_distance(1.6);
        let m = match_frames(open, 1, &curr, 1.5, 0.0);
        assert!(m.continuations.is_empty());
        assert_eq!(m.fresh.len(), 1);
        assert_eq!(m.closed.len(), 1);

        let m = match_frames(Vec::new(), 1, &curr, 1.5, 0.0);
        assert_eq!(m.fresh.len(), 1);
    }

    fn stream_from(frames: Vec<Vec<Detection>>) -> DetectionStream {
        let mut s = DetectionStream::new(StreamHeader::new(2, 1));
        for (i, dets) in frames.into_iter().enumerate() {
            s.frames.push(Frame { frame_id: i as u64, detections: dets, proposals: vec![] });
        }
        s
    }

    #[test]
    fn static_object_forms_one_cluster() {
        let frames = (0..5)
            .map(|t| vec![det(t, bx(0.0, 0.0, 5.0, 5.0), vec![1.0, -1.0])])
            .collect();
        let clusters = build_clusters(&stream_from(frames), DEFAULT_TAU1, DEFAULT_EPS);
        assert_eq!(clusters.len(), 1);
        assert_eq!(clusters[0].len(), 5);
        assert_eq!(clusters[0].frame_span(), Some((0, 4)));
    }

    #[test]
    fn disjoint_objects_form_two_clusters() {
        let frames = (0..5)
            .map(|t| {
                vec![
                    det(2 * t, bx(0.0, 0.0, 5.0, 5.0), vec![1.0, 0.0]),
                    det(2 * t + 1, bx(50.0, 50.0, 55.0, 55.0), vec![1.0, 0.0]),
                ]
            })
            .collect();
        let clusters = build_clusters(&stream_from(frames), DEFAULT_TAU1, DEFAULT_EPS);
        assert_eq!(clusters.len(), 2);
        assert!(clusters.iter().all(|c| c.len() == 5));
        assert!(clusters[0].det_ids().all(|d| d % 2 == 0));
    }

    #[test]
    fn empty_frame_breaks_clusters() {
        let o = |id| vec![det(id, bx(0.0, 0.0, 5.0, 5.0), vec![1.0, 0.0])];
        let frames = vec![o(0), o(1), vec![], o(2)];
        let clusters = build_clusters(&stream_from(frames), DEFAULT_TAU1, DEFAULT_EPS);
        assert_eq!(clusters.len(), 2);
        assert_eq!(clusters[0].members, vec![(0, 0), (1, 1)]);
        assert_eq!(clusters[1].members, vec![(3, 2)]);
    }

    #[test]
    fn empty_stream_has_no_clusters() {
        assert!(build_clusters(&stream_from(vec![]), 1.5, 1e-6).is_empty());
    }
}
