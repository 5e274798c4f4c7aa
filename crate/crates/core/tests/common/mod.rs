//! Seeded random detection streams shared by the integration tests.

#![allow(dead_code)]

use edaod::detstream::{BoundingBox, Detection, DetectionStream, Frame, Proposal, StreamHeader};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const CLASSES: usize = 3;
pub const FEATURES: usize = 4;

pub fn gaussian(rng: &mut impl Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// A few slowly drifting objects with noisy logits, random dropouts and
/// occasional empty frames, so that links, gaps and merges all occur.
pub fn random_stream(seed: u64) -> DetectionStream {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let objects = rng.random_range(1..=4usize);
    let frames = rng.random_range(1..=10usize);
    let base: Vec<(f64, f64, Vec<f64>)> = (0..objects)
        .map(|_| {
            let logits = (0..CLASSES).map(|_| 2.0 * gaussian(&mut rng)).collect();
            (rng.random_range(0.0..400.0), rng.random_range(0.0..300.0), logits)
        })
        .collect();
    let mut det_id = 0;
    let mut out = Vec::with_capacity(frames);
    for t in 0..frames {
        let mut detections = Vec::new();
        if !rng.random_bool(0.1) {
            for (x, y, logits) in &base {
                if rng.random_bool(0.2) {
                    continue;
                }
                let x1 = x + 4.0 * t as f64 + rng.random_range(-3.0..3.0);
                let y1 = y + rng.random_range(-3.0..3.0);
                detections.push(Detection {
                    det_id,
                    bbox: BoundingBox::new(x1, y1, x1 + 60.0, y1 + 40.0),
                    score: rng.random_range(0.0..=1.0),
                    logits: logits.iter().map(|l| l + 0.5 * gaussian(&mut rng)).collect(),
                    region_feature: (0..FEATURES).map(|_| gaussian(&mut rng)).collect(),
                });
                det_id += 1;
            }
        }
        let proposals = (0..rng.random_range(0..4usize))
            .map(|_| {
                let x1 = rng.random_range(0.0..500.0);
                Proposal {
                    bbox: BoundingBox::new(x1, 10.0, x1 + 30.0, 50.0),
                    region_feature: (0..FEATURES).map(|_| gaussian(&mut rng)).collect(),
                }
            })
            .collect();
        out.push(Frame { frame_id: t as u64 * rng.random_range(1..=2u64) + t as u64, detections, proposals });
    }
    // Frame ids must increase strictly.
    let mut last = None;
    for f in &mut out {
        if let Some(l) = last {
            if f.frame_id <= l {
                f.frame_id = l + 1;
            }
        }
        last = Some(f.frame_id);
    }
    DetectionStream { header: StreamHeader::new(CLASSES, FEATURES), frames: out }
}

/// Exhaustive minimum over all maximal injections, summing each candidate's
/// pairs in row order.
pub fn brute_force_min(costs: &[Vec<f64>]) -> f64 {
    let rows = costs.len();
    let cols = costs.first().map_or(0, Vec::len);
    let k = rows.min(cols);
    let mut best = f64::INFINITY;
    let mut used = vec![false; cols];
    fn rec(
        costs: &[Vec<f64>],
        row: usize,
        chosen: usize,
        k: usize,
        used: &mut [bool],
        pairs: &mut Vec<(usize, usize)>,
        best: &mut f64,
    ) {
        if chosen == k {
            let total: f64 = pairs.iter().map(|&(i, j)| costs[i][j]).sum();
            *best = best.min(total);
            return;
        }
        if row == costs.len() || costs.len() - row < k - chosen {
            return;
        }
        for j in 0..used.len() {
            if !used[j] {
                used[j] = true;
                pairs.push((row, j));
                rec(costs, row + 1, chosen + 1, k, used, pairs, best);
                pairs.pop();
                used[j] = false;
            }
        }
        // Leave this row unassigned.
        rec(costs, row + 1, chosen, k, used, pairs, best);
    }
    rec(costs, 0, 0, k, &mut used, &mut Vec::new(), &mut best);
    if k == 0 {
        0.0
    } else {
        best
    }
}
