//! Deterministic synthetic scenes for an embodied detector.
//!
//! A room holds a handful of object instances. Each layout rearranges them
//! and applies its own lighting-style shift to region features. An agent
//! sweeps sideways through the room; objects are projected into a 640x480
//! image, and a simulated frozen detector emits jittered boxes, misses,
//! short-lived false positives and noisy class logits. A labeled,
//! shift-free source set is produced for pretraining the detection head.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapt::{decode_box, encode_box, example_loss, AdaptError, HeadShape, ModelParams, Optimizer, OptimizerKind};
use crate::detstream::{
    parse_stream, write_stream, BoundingBox, Detection, DetectionStream, Frame, Proposal, StreamError, StreamHeader,
};
use crate::eval::{ap50, FramePredictions, FrameTruth, LabeledBox, ScoredBox};
use crate::numeric::{argmax, dot, softmax};

pub const IMAGE_WIDTH: f64 = 640.0;
pub const IMAGE_HEIGHT: f64 = 480.0;
pub const FOCAL_LENGTH: f64 = 400.0;

pub const ORACLE_FILE: &str = "oracle.jsonl";
pub const SOURCE_SET_FILE: &str = "source_set.jsonl";
pub const SCENARIO_FILE: &str = "scenario.json";

/// Lateral sweep amplitude of the agent, metres.
const AGENT_SWEEP: f64 = 1.5;
const OCCLUSION_PROBABILITY: f64 = 0.3;
/// Relative jitter of proposals drawn around a ground-truth box.
const PROPOSAL_JITTER: f64 = 0.1;
const PROPOSALS_PER_OBJECT: usize = 3;
/// Viewing angles of source examples are drawn from ±this, radians.

/// How strongly one layout departs from the source domain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Severity {
    /// Norm of the additive feature shift shared by the whole layout.
    pub lighting_offset: f64,
    /// Feature gain is drawn from `1 ± lighting_gain`.
    pub lighting_gain: f64,
    /// Per-frame Gaussian noise on region features.
    pub appearance_noise: f64,
    /// Gaussian noise on the detector's class logits.
    pub logit_noise: f64,
    /// Box noise relative to box size.
    pub box_jitter: f64,
    /// Probability a visible object goes undetected in a frame.
    pub miss_rate: f64,
    /// Probability a frame spawns a false-positive track.
    pub fp_rate: f64,
    /// Amplitude of the view-dependent part of instance appearance.
    pub view_variation: f64,
}

impl Severity {
    pub const ZERO: Severity = Severity {
        lighting_offset: 0.0,
        lighting_gain: 0.0,
        appearance_noise: 0.0,
        logit_noise: 0.0,
        box_jitter: 0.0,
        miss_rate: 0.0,
        fp_rate: 0.0,
        view_variation: 0.0,
    };

    pub const MEDIUM: Severity = Severity {
        lighting_offset: 4.0,
        lighting_gain: 0.2,
        appearance_noise: 0.1,
        logit_noise: 0.15,
        box_jitter: 0.05,
        miss_rate: 0.1,
        fp_rate: 0.3,
        view_variation: 2.5,
    };
}

impl Default for Severity {
    fn default() -> Self {
        Severity::ZERO
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub stages: usize,
    pub proj_dim: usize,
    pub holdout_fraction: f64,
    /// Minimum held-out AP50 a pretrained model must reach.
    pub sanity_ap50: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { epochs: 20, learning_rate: 0.01, weight_decay: 0.05, stages: 3, proj_dim: 8, holdout_fraction: 0.25, sanity_ap50: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub num_classes: usize,
    pub feature_dim: usize,
    pub objects_per_layout: usize,
    pub layouts: usize,
    pub frames: usize,
    pub proposals_per_frame: usize,
    /// One entry for all layouts, or one per layout.
    pub severity: Vec<Severity>,
    /// Norm of each category prototype.
    pub prototype_scale: f64,
    /// Std of the per-instance offset from its category prototype.
    pub instance_spread: f64,
    /// Multiplier of prototype similarity in the detector's logits.
    pub logit_scale: f64,
    /// Appearance cycles per radian of viewing angle.
    pub view_frequency: f64,
    pub source_examples_per_class: usize,
    pub source_background_examples: usize,
    /// Feature noise of source-domain examples.
    pub source_noise: f64,
    pub pretrain: PretrainConfig,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            num_classes: 6,
            feature_dim: 16,
            objects_per_layout: 5,
            layouts: 5,
            frames: 40,
            proposals_per_frame: 64,
            severity: vec![Severity::MEDIUM],
            prototype_scale: 3.0,
            instance_spread: 0.4,
            logit_scale: 1.0,
            view_frequency: 3.0,
            source_examples_per_class: 60,
            source_background_examples: 120,
            source_noise: 0.3,
            pretrain: PretrainConfig::default(),
            seed: 42,
        }
    }
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scenario config: {0}")]
    Config(String),
    #[error("source set is empty")]
    EmptySourceSet,
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: line {line}: {message}")]
    Format { path: PathBuf, line: usize, message: String },
    #[error(transparent)]
    Stream(#[from] StreamError),
    #[error(transparent)]
    Adapt(#[from] AdaptError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SimError + '_ {
    move |source| SimError::Io { path: path.to_path_buf(), source }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |field: &str, why: &str| Err(SimError::Config(format!("{field}: {why}")));
        for (field, v) in [
            ("num_classes", self.num_classes),
            ("feature_dim", self.feature_dim),
            ("objects_per_layout", self.objects_per_layout),
            ("layouts", self.layouts),
            ("frames", self.frames),
            ("proposals_per_frame", self.proposals_per_frame),
            ("source_examples_per_class", self.source_examples_per_class),
            ("pretrain.stages", self.pretrain.stages),
            ("pretrain.proj_dim", self.pretrain.proj_dim),
        ] {
            if v == 0 {
                return bad(field, "must be positive");
            }
        }
        if self.feature_dim <= self.num_classes {
            return bad("feature_dim", "must exceed num_classes (one prototype direction per class plus background)");
        }
        if self.severity.len() != 1 && self.severity.len() != self.layouts {
            return bad("severity", "needs one entry or one per layout");
        }
        for s in &self.severity {
            for (field, v) in [("severity.miss_rate", s.miss_rate), ("severity.fp_rate", s.fp_rate)] {
                if !(0.0..=1.0).contains(&v) {
                    return bad(field, "must lie in [0, 1]");
                }
            }
            for (field, v) in [
                ("severity.lighting_offset", s.lighting_offset),
                ("severity.appearance_noise", s.appearance_noise),
                ("severity.logit_noise", s.logit_noise),
                ("severity.view_variation", s.view_variation),
                ("severity.box_jitter", s.box_jitter),
            ] {
                if !(v >= 0.0 && v.is_finite()) {
                    return bad(field, "must be finite and non-negative");
                }
            }
            if !(0.0..1.0).contains(&s.lighting_gain) {
                return bad("severity.lighting_gain", "must lie in [0, 1)");
            }
        }
        for (field, v) in [
            ("prototype_scale", self.prototype_scale),
            ("instance_spread", self.instance_spread),
            ("logit_scale", self.logit_scale),
            ("view_frequency", self.view_frequency),
            ("source_noise", self.source_noise),
            ("pretrain.learning_rate", self.pretrain.learning_rate),
            ("pretrain.weight_decay", self.pretrain.weight_decay),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(field, "must be finite and non-negative");
            }
        }
        if !(0.0..1.0).contains(&self.pretrain.holdout_fraction) {
            return bad("pretrain.holdout_fraction", "must lie in [0, 1)");
        }
        Ok(())
    }

    pub fn severity_of(&self, layout: usize) -> Severity {
        if self.severity.len() == 1 {
            self.severity[0]
        } else {
            self.severity[layout]
        }
    }

    pub fn head_shape(&self) -> HeadShape {
        HeadShape {
            stages: self.pretrain.stages,
            feature_dim: self.feature_dim,
            proj_dim: self.pretrain.proj_dim,
            num_classes: self.num_classes,
        }
    }

    /// Parses a JSON config; errors name the offending field.
    pub fn from_json(text: &str) -> Result<Self, SimError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: ScenarioConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            SimError::Config(format!("{path}: {}", e.into_inner()))
        })?;
        Ok(cfg)
    }
}

/// Ground truth of one object instance in one layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleTrack {
    pub track_id: u64,
    pub category: usize,
    /// One entry per frame, in frame order.
    pub entries: Vec<OracleEntry>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleEntry {
    pub frame_id: u64,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    /// Fully inside the image and not occluded.
    pub visible: bool,
}

/// A labeled source-domain region. `category == num_classes` marks
/// background.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceExample {
    pub feature: Vec<f64>,
    pub category: usize,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub proposal_box: BoundingBox,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioBundle {
    pub config: ScenarioConfig,
    pub source_set: Vec<SourceExample>,
    pub target_streams: Vec<DetectionStream>,
    pub oracle: Vec<Vec<OracleTrack>>,
}

impl ScenarioBundle {
    /// Visible oracle boxes of one layout, per stream frame.
    pub fn ground_truth(&self, layout: usize) -> Vec<FrameTruth> {
        let stream = &self.target_streams[layout];
        let mut frames: Vec<FrameTruth> =
            stream.frames.iter().map(|f| FrameTruth { frame_id: f.frame_id, boxes: vec![] }).collect();
        for t in &self.oracle[layout] {
            for e in t.entries.iter().filter(|e| e.visible) {
                if let Ok(i) = frames.binary_search_by_key(&e.frame_id, |f| f.frame_id) {
                    frames[i].boxes.push(LabeledBox { class_id: t.category, bbox: e.bbox });
                }
            }
        }
        frames
    }
}

fn gaussian(rng: &mut impl Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn gaussian_vec(n: usize, std: f64, rng: &mut impl Rng) -> Vec<f64> {
    (0..n).map(|_| std * gaussian(rng)).collect()
}

/// `k` orthonormal vectors in `R^d` (Gram-Schmidt on Gaussian draws), scaled.
fn orthonormal(k: usize, d: usize, scale: f64, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(k);
    while basis.len() < k {
        let mut v = gaussian_vec(d, 1.0, rng);
        for b in &basis {
            let p = dot(&v, b);
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
        }
        let n = dot(&v, &v).sqrt();
        if n > 1e-6 {
            basis.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    basis.into_iter().map(|v| v.into_iter().map(|x| x * scale).collect()).collect()
}

fn random_axes(d: usize, rng: &mut impl Rng) -> [Vec<f64>; 2] {
    let mut axes = orthonormal(2, d, 1.0, rng).into_iter();
    [axes.next().expect("two axes"), axes.next().expect("two axes")]
}


fn box_from_center(cx: f64, cy: f64, w: f64, h: f64) -> BoundingBox {
    BoundingBox::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
}

fn inside_image(b: &BoundingBox) -> bool {
    b.x1 >= 0.0 && b.y1 >= 0.0 && b.x2 <= IMAGE_WIDTH && b.y2 <= IMAGE_HEIGHT
}

/// Center and size jitter relative to the box size; zero jitter returns the
/// box unchanged.
fn jitter_box(b: &BoundingBox, rel: f64, rng: &mut impl Rng) -> BoundingBox {
    if rel == 0.0 {
        return *b;
    }
    let (cx, cy) = b.center();
    let (w, h) = (b.width(), b.height());
    box_from_center(
        cx + rel * w * gaussian(rng),
        cy + rel * h * gaussian(rng),
        w * (rel * gaussian(rng)).exp(),
        h * (rel * gaussian(rng)).exp(),
    )
}

fn random_image_box(min: f64, max: f64, rng: &mut impl Rng) -> BoundingBox {
    let w = rng.random_range(min..max);
    let h = rng.random_range(min..max);
    let x = rng.random_range(0.0..IMAGE_WIDTH - w);
    let y = rng.random_range(0.0..IMAGE_HEIGHT - h);
    BoundingBox::new(x, y, x + w, y + h)
}

/// Category geometry shared by every layout of the room.
struct World {
    /// `num_classes` category prototypes followed by the background one.
    prototypes: Vec<Vec<f64>>,
    instances: Vec<Instance>,
}

struct Instance {
    category: usize,
    offset: Vec<f64>,
    /// Two unit directions spanning the view-dependent appearance.
    view_axes: [Vec<f64>; 2],
    /// Physical width and height, metres.
    size: (f64, f64),
}

impl World {
    fn new(cfg: &ScenarioConfig, rng: &mut impl Rng) -> Self {
        let c = cfg.num_classes;
        let prototypes = orthonormal(c + 1, cfg.feature_dim, cfg.prototype_scale, rng);
        // Distinct categories while they last.
        let mut categories: Vec<usize> =
            index::sample(rng, c, cfg.objects_per_layout.min(c)).into_iter().collect();
        while categories.len() < cfg.objects_per_layout {
            categories.push(rng.random_range(0..c));
        }
        let instances = categories
            .into_iter()
            .map(|category| Instance {
                category,
                offset: gaussian_vec(cfg.feature_dim, cfg.instance_spread, rng),
                view_axes: random_axes(cfg.feature_dim, rng),
                size: (rng.random_range(0.4..1.0), rng.random_range(0.4..1.0)),
            })
            .collect();
        Self { prototypes, instances }
    }

    /// Appearance of instance `j` seen from angle `theta`, before lighting.
    fn appearance(&self, j: usize, theta: f64, frequency: f64, amplitude: f64) -> Vec<f64> {
        let inst = &self.instances[j];
        let phase = frequency * theta;
        let (a, b) = (amplitude * phase.cos(), amplitude * phase.sin());
        let [u, v] = &inst.view_axes;
        let proto = &self.prototypes[inst.category];
        (0..proto.len()).map(|i| proto[i] + inst.offset[i] + a * u[i] + b * v[i]).collect()
    }

    fn background(&self) -> &[f64] {
        self.prototypes.last().expect("background prototype")
    }

    fn class_logits(&self, cfg: &ScenarioConfig, x: &[f64], noise: f64, rng: &mut impl Rng) -> Vec<f64> {
        let inv = 1.0 / cfg.prototype_scale.max(f64::MIN_POSITIVE);
        self.prototypes[..cfg.num_classes]
            .iter()
            .map(|mu| cfg.logit_scale * dot(x, mu) * inv + noise * gaussian(rng))
            .collect()
    }
}

/// Feature transform of one layout: `gain * base + shift + noise`.
struct Lighting {
    gain: f64,
    shift: Vec<f64>,
    noise: f64,
}

impl Lighting {
    fn new(cfg: &ScenarioConfig, sev: &Severity, rng: &mut impl Rng) -> Self {
        let dir = gaussian_vec(cfg.feature_dim, 1.0, rng);
        let n = dot(&dir, &dir).sqrt();
        let shift = dir.iter().map(|x| sev.lighting_offset * x / n).collect();
        let gain = 1.0 + sev.lighting_gain * rng.random_range(-1.0..=1.0);
        Self { gain, shift, noise: sev.appearance_noise }
    }

    fn apply(&self, base: &[f64], rng: &mut impl Rng) -> Vec<f64> {
        base.iter()
            .zip(&self.shift)
            .map(|(b, s)| {
                let e = if self.noise > 0.0 { self.noise * gaussian(rng) } else { 0.0 };
                self.gain * b + s + e
            })
            .collect()
    }
}

struct Placement {
    x: f64,
    depth: f64,
    height: f64,
    occluded: Option<(usize, usize)>,
}

fn agent_position(t: usize, frames: usize, phase: f64) -> f64 {
    AGENT_SWEEP * (std::f64::consts::TAU * t as f64 / frames as f64 + phase).sin()
}

/// Horizontal angle between the optical axis and the ray to the object.
fn viewing_angle(p: &Placement, agent_x: f64) -> f64 {
    ((p.x - agent_x) / p.depth).atan()
}

fn project(inst: &Instance, p: &Placement, agent_x: f64) -> BoundingBox {
    let cx = 0.5 * IMAGE_WIDTH + FOCAL_LENGTH * (p.x - agent_x) / p.depth;
    let cy = 0.5 * IMAGE_HEIGHT + FOCAL_LENGTH * p.height / p.depth;
    box_from_center(cx, cy, FOCAL_LENGTH * inst.size.0 / p.depth, FOCAL_LENGTH * inst.size.1 / p.depth)
}

struct FalsePositive {
    bbox: BoundingBox,
    base: Vec<f64>,
    remaining: usize,
}

fn generate_layout(
    cfg: &ScenarioConfig,
    world: &World,
    layout: usize,
    rng: &mut ChaCha8Rng,
) -> (DetectionStream, Vec<OracleTrack>) {
    let sev = cfg.severity_of(layout);
    let lighting = Lighting::new(cfg, &sev, rng);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let placements: Vec<Placement> = world
        .instances
        .iter()
        .map(|_| Placement {
            x: rng.random_range(-3.0..3.0),
            depth: rng.random_range(3.0..8.0),
            height: rng.random_range(-0.4..0.4),
            occluded: rng.random_bool(OCCLUSION_PROBABILITY).then(|| {
                let len = rng.random_range(2..=5usize);
                let start = rng.random_range(0..cfg.frames);
                (start, start + len)
            }),
        })
        .collect();

    let mut tracks: Vec<OracleTrack> = world
        .instances
        .iter()
        .enumerate()
        .map(|(j, inst)| OracleTrack { track_id: j as u64, category: inst.category, entries: vec![] })
        .collect();
    let mut frames = Vec::with_capacity(cfg.frames);
    let mut fps: Vec<FalsePositive> = Vec::new();
    let mut next_det = 0u64;

    for t in 0..cfg.frames {
        let agent_x = agent_position(t, cfg.frames, phase);
        let mut detections = Vec::new();
        let mut proposals = Vec::new();
        for (j, (inst, p)) in world.instances.iter().zip(&placements).enumerate() {
            let gt = project(inst, p, agent_x);
            let occluded = p.occluded.is_some_and(|(a, b)| (a..b).contains(&t));
            let visible = inside_image(&gt) && !occluded;
            tracks[j].entries.push(OracleEntry { frame_id: t as u64, bbox: gt, visible });
            if !visible {
                continue;
            }
            let base = world.appearance(j, viewing_angle(p, agent_x), cfg.view_frequency, sev.view_variation);
            for _ in 0..PROPOSALS_PER_OBJECT {
                proposals.push(Proposal {
                    bbox: jitter_box(&gt, PROPOSAL_JITTER, rng),
                    region_feature: lighting.apply(&base, rng),
                });
            }
            if sev.miss_rate > 0.0 && rng.random_bool(sev.miss_rate) {
                continue;
            }
            let feature = lighting.apply(&base, rng);
            let logits = world.class_logits(cfg, &feature, sev.logit_noise, rng);
            detections.push(Detection {
                det_id: next_det,
                bbox: jitter_box(&gt, sev.box_jitter, rng),
                score: softmax(&logits)[argmax(&logits)],
                logits,
                region_feature: feature,
            });
            next_det += 1;
        }

        if sev.fp_rate > 0.0 && rng.random_bool(sev.fp_rate) {
            let lookalike = rng.random_range(0..cfg.num_classes);
            let offset = gaussian_vec(cfg.feature_dim, cfg.instance_spread, rng);
            let base = world
                .background()
                .iter()
                .zip(&world.prototypes[lookalike])
                .zip(&offset)
                .map(|((b, m), o)| 0.5 * b + 0.5 * m + o)
                .collect();
            fps.push(FalsePositive { bbox: random_image_box(30.0, 120.0, rng), base, remaining: rng.random_range(1..=3) });
        }
        for fp in &mut fps {
            // Low-consistency appearance: extra noise on top of the layout's.
            let mut feature = lighting.apply(&fp.base, rng);
            let extra = cfg.instance_spread.max(sev.appearance_noise);
            feature.iter_mut().for_each(|x| *x += extra * gaussian(rng));
            let logits = world.class_logits(cfg, &feature, sev.logit_noise, rng);
            detections.push(Detection {
                det_id: next_det,
                bbox: fp.bbox,
                score: softmax(&logits)[argmax(&logits)],
                logits,
                region_feature: feature,
            });
            next_det += 1;
            fp.remaining -= 1;
        }
        fps.retain(|fp| fp.remaining > 0);

        proposals.truncate(cfg.proposals_per_frame);
        while proposals.len() < cfg.proposals_per_frame {
            let offset = gaussian_vec(cfg.feature_dim, cfg.instance_spread, rng);
            let base: Vec<f64> = world.background().iter().zip(&offset).map(|(b, o)| b + o).collect();
            proposals.push(Proposal {
                bbox: random_image_box(20.0, 120.0, rng),
                region_feature: lighting.apply(&base, rng),
            });
        }
        frames.push(Frame { frame_id: t as u64, detections, proposals });
    }
    let stream = DetectionStream { header: StreamHeader::new(cfg.num_classes, cfg.feature_dim), frames };
    (stream, tracks)
}

fn generate_source_set(cfg: &ScenarioConfig, world: &World, rng: &mut impl Rng) -> Vec<SourceExample> {
    let mut out = Vec::new();
    let noisy = |base: &[f64], rng: &mut dyn FnMut() -> f64| -> Vec<f64> {
        base.iter().map(|b| b + cfg.source_noise * rng()).collect()
    };
    for c in 0..cfg.num_classes {
        for _ in 0..cfg.source_examples_per_class {
            // A fresh instance in its canonical appearance.
            let offset = gaussian_vec(cfg.feature_dim, cfg.instance_spread, rng);
            let base: Vec<f64> = world.prototypes[c].iter().zip(&offset).map(|(p, o)| p + o).collect();
            let bbox = random_image_box(30.0, 150.0, rng);
            let proposal_box = jitter_box(&bbox, PROPOSAL_JITTER, rng);
            let feature = noisy(&base, &mut || gaussian(rng));
            out.push(SourceExample { feature, category: c, bbox, proposal_box });
        }
    }
    for _ in 0..cfg.source_background_examples {
        let offset = gaussian_vec(cfg.feature_dim, cfg.instance_spread, rng);
        let base: Vec<f64> = world.background().iter().zip(&offset).map(|(b, o)| b + o).collect();
        let bbox = random_image_box(20.0, 120.0, rng);
        let feature = noisy(&base, &mut || gaussian(rng));
        out.push(SourceExample { feature, category: cfg.num_classes, bbox, proposal_box: bbox });
    }
    out
}

/// Builds the whole bundle. Output depends only on `(config, seed)`; each
/// layout draws from its own random stream.
pub fn generate_scenario(config: &ScenarioConfig, seed: u64) -> Result<ScenarioBundle, SimError> {
    config.validate()?;
    let mut shared = ChaCha8Rng::seed_from_u64(seed);
    let world = World::new(config, &mut shared);
    let source_set = generate_source_set(config, &world, &mut shared);
    let mut target_streams = Vec::with_capacity(config.layouts);
    let mut oracle = Vec::with_capacity(config.layouts);
    for l in 0..config.layouts {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(l as u64 + 1);
        let (stream, tracks) = generate_layout(config, &world, l, &mut rng);
        target_streams.push(stream);
        oracle.push(tracks);
    }
    let config = ScenarioConfig { seed, ..config.clone() };
    Ok(ScenarioBundle { config, source_set, target_streams, oracle })
}

/// Held-out quality of a pretrained head.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub train_examples: usize,
    pub holdout_examples: usize,
    pub holdout_accuracy: f64,
    pub holdout_ap50: f64,
}

impl PretrainReport {
    pub fn passes(&self, sanity_ap50: f64) -> bool {
        self.holdout_ap50 >= sanity_ap50
    }
}

/// Accuracy (over all `C + 1` classes) and AP50 (foreground only, one
/// image per example) of `model` on `examples`.
pub fn source_metrics(model: &ModelParams, examples: &[SourceExample], num_classes: usize) -> (f64, f64) {
    if examples.is_empty() {
        return (0.0, 0.0);
    }
    let mut correct = 0usize;
    let mut preds = Vec::with_capacity(examples.len());
    let mut truth = Vec::with_capacity(examples.len());
    for (i, ex) in examples.iter().enumerate() {
        let (logits, deltas) = model.predict(&ex.feature);
        if argmax(&logits) == ex.category {
            correct += 1;
        }
        let class_id = argmax(&logits[..num_classes]);
        preds.push(FramePredictions {
            frame_id: i as u64,
            boxes: vec![ScoredBox {
                class_id,
                score: softmax(&logits)[class_id],
                bbox: decode_box(&ex.proposal_box, &deltas),
            }],
        });
        let boxes = if ex.category < num_classes {
            vec![LabeledBox { class_id: ex.category, bbox: ex.bbox }]
        } else {
            vec![]
        };
        truth.push(FrameTruth { frame_id: i as u64, boxes });
    }
    (correct as f64 / examples.len() as f64, ap50(&preds, &truth, num_classes).map)
}

/// Supervised training of a fresh head on the source set with Adam, batch 1.
/// A seeded shuffle splits off `holdout_fraction` of the examples for the
/// returned report.
pub fn pretrain_source(
    source_set: &[SourceExample],
    shape: &HeadShape,
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<(ModelParams, PretrainReport), SimError> {
    if source_set.is_empty() {
        return Err(SimError::EmptySourceSet);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..source_set.len()).collect();
    for i in (1..order.len()).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    let n_hold = ((source_set.len() as f64) * cfg.holdout_fraction).round() as usize;
    let n_hold = n_hold.min(source_set.len() - 1);
    let (hold, train) = order.split_at(n_hold);
    let mut train = train.to_vec();

    let mut model = ModelParams::random(shape, &mut rng);
    let mut opt = Optimizer::new(OptimizerKind::Adam, cfg.learning_rate, cfg.weight_decay);
    for _ in 0..cfg.epochs {
        for i in (1..train.len()).rev() {
            train.swap(i, rng.random_range(0..=i));
        }
        for &i in &train {
            let ex = &source_set[i];
            if ex.feature.len() != shape.feature_dim || ex.category > shape.num_classes {
                return Err(SimError::Config(format!("source example {i} does not fit the head shape")));
            }
            let target = (ex.category < shape.num_classes).then(|| encode_box(&ex.proposal_box, &ex.bbox));
            let out = example_loss(&model, &ex.feature, ex.category, target.as_ref());
            opt.step(&mut model, &out.grad());
        }
    }
    let held: Vec<SourceExample> = hold.iter().map(|&i| source_set[i].clone()).collect();
    let (acc, ap) = source_metrics(&model, &held, shape.num_classes);
    let report = PretrainReport {
        train_examples: train.len(),
        holdout_examples: held.len(),
        holdout_accuracy: acc,
        holdout_ap50: ap,
    };
    Ok((model, report))
}

/// File name of layout `l`'s stream inside a bundle directory.
pub fn stream_file_name(layout: usize) -> String {
    format!("layout_{layout}.{}", crate::detstream::STREAM_EXTENSION)
}

#[derive(Serialize, Deserialize)]
struct OracleRecord {
    layout: usize,
    #[serde(flatten)]
    track: OracleTrack,
}

fn write_jsonl<T: Serialize>(path: &Path, items: impl IntoIterator<Item = T>) -> Result<(), SimError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for item in items {
        let line = serde_json::to_string(&item).map_err(|e| SimError::Io { path: path.into(), source: e.into() })?;
        writeln!(w, "{line}").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, SimError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line).map_err(|e| SimError::Format {
            path: path.into(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(item);
    }
    Ok(out)
}

/// Writes `scenario.json`, one stream per layout, `oracle.jsonl` and
/// `source_set.jsonl` into `dir`, creating it if needed.
pub fn write_bundle(bundle: &ScenarioBundle, dir: &Path) -> Result<(), SimError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let cfg_path = dir.join(SCENARIO_FILE);
    let text = serde_json::to_string_pretty(&bundle.config).expect("config serializes");
    fs::write(&cfg_path, text + "\n").map_err(io_err(&cfg_path))?;
    for (l, s) in bundle.target_streams.iter().enumerate() {
        write_stream(s, dir.join(stream_file_name(l)))?;
    }
    let records = bundle
        .oracle
        .iter()
        .enumerate()
        .flat_map(|(layout, tracks)| tracks.iter().map(move |t| OracleRecord { layout, track: t.clone() }));
    write_jsonl(&dir.join(ORACLE_FILE), records)?;
    write_jsonl(&dir.join(SOURCE_SET_FILE), &bundle.source_set)
}

pub fn read_bundle(dir: &Path) -> Result<ScenarioBundle, SimError> {
    let cfg_path = dir.join(SCENARIO_FILE);
    let text = fs::read_to_string(&cfg_path).map_err(io_err(&cfg_path))?;
    let config = ScenarioConfig::from_json(&text)?;
    let mut target_streams = Vec::with_capacity(config.layouts);
    for l in 0..config.layouts {
        target_streams.push(parse_stream(dir.join(stream_file_name(l)))?);
    }
    let mut oracle = vec![Vec::new(); config.layouts];
    let oracle_path = dir.join(ORACLE_FILE);
    for (i, rec) in read_jsonl::<OracleRecord>(&oracle_path)?.into_iter().enumerate() {
        let slot = oracle.get_mut(rec.layout).ok_or_else(|| SimError::Format {
            path: oracle_path.clone(),
            line: i + 1,
            message: format!("layout {} out of range", rec.layout),
        })?;
        slot.push(rec.track);
    }
    let source_set = read_jsonl(&dir.join(SOURCE_SET_FILE))?;
    Ok(ScenarioBundle { config, source_set, target_streams, oracle })
}
