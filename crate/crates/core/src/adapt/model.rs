//! Multi-stage linear detection head.
//!
//! Every stage maps a region feature `x ∈ R^D` through its own projection to
//! `R^{D'}`, then to `C + 1` class logits (column `C` is background) and to
//! four box deltas. Stages share nothing; inference averages them.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::AdaptError;
use crate::detstream::BoundingBox;

/// File extension of a serialized model.
pub const MODEL_EXTENSION: &str = "model.json";

/// Row-major dense matrix, serialized as nested rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self, AdaptError> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(AdaptError::Shape("ragged matrix rows".into()));
        }
        let n = rows.len();
        Ok(Self { rows: n, cols, data: rows.into_iter().flatten().collect() })
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.data.chunks(self.cols.max(1)).take(self.rows).map(<[f64]>::to_vec).collect()
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

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// `y = Mᵀ x` for `x` of length `rows`.
    pub fn transpose_mul(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.cols];
        for (i, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            let row = &self.data[i * self.cols..(i + 1) * self.cols];
            for (yj, m) in y.iter_mut().zip(row) {
                *yj += xi * m;
            }
        }
        y
    }

    /// `y = M g` for `g` of length `cols`.
    pub fn mul(&self, g: &[f64]) -> Vec<f64> {
        self.data.chunks(self.cols.max(1)).take(self.rows).map(|row| crate::numeric::dot(row, g)).collect()
    }

    /// `M += a ⊗ b` (outer product).
    pub fn add_outer(&mut self, a: &[f64], b: &[f64]) {
        for (i, &ai) in a.iter().enumerate() {
            if ai == 0.0 {
                continue;
            }
            let row = &mut self.data[i * self.cols..(i + 1) * self.cols];
            for (m, bj) in row.iter_mut().zip(b) {
                *m += ai * bj;
            }
        }
    }

    fn random(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Self {
        let normal = Normal::new(0.0, std).expect("finite std");
        Self { rows, cols, data: (0..rows * cols).map(|_| normal.sample(rng)).collect() }
    }
}

/// Output of one stage for one region feature.
#[derive(Debug, Clone, PartialEq)]
pub struct StageOutput {
    pub proj: Vec<f64>,
    pub logits: Vec<f64>,
    pub deltas: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageParams {
    /// `D × D'`
    pub projection: Matrix,
    /// `D' × (C + 1)`
    pub classifier: Matrix,
    pub cls_bias: Vec<f64>,
    /// `D' × 4`
    pub regressor: Matrix,
    pub reg_bias: Vec<f64>,
}

impl StageParams {
    pub fn zeros(shape: &HeadShape) -> Self {
        Self {
            projection: Matrix::zeros(shape.feature_dim, shape.proj_dim),
            classifier: Matrix::zeros(shape.proj_dim, shape.num_classes + 1),
            cls_bias: vec![0.0; shape.num_classes + 1],
            regressor: Matrix::zeros(shape.proj_dim, 4),
            reg_bias: vec![0.0; 4],
        }
    }

    pub fn project(&self, x: &[f64]) -> Vec<f64> {
        self.projection.transpose_mul(x)
    }

    pub fn forward(&self, x: &[f64]) -> StageOutput {
        let proj = self.project(x);
        let logits = self.head_logits(&proj);
        let mut deltas = self.regressor.transpose_mul(&proj);
        deltas.iter_mut().zip(&self.reg_bias).for_each(|(d, b)| *d += b);
        StageOutput { proj, logits, deltas }
    }

    pub fn head_logits(&self, proj: &[f64]) -> Vec<f64> {
        let mut logits = self.classifier.transpose_mul(proj);
        logits.iter_mut().zip(&self.cls_bias).for_each(|(l, b)| *l += b);
        logits
    }

    fn slices(&self) -> [&[f64]; 5] {
        [
            self.projection.as_slice(),
            self.classifier.as_slice(),
            &self.cls_bias,
            self.regressor.as_slice(),
            &self.reg_bias,
        ]
    }

    fn slices_mut(&mut self) -> [&mut [f64]; 5] {
        [
            self.projection.as_mut_slice(),
            self.classifier.as_mut_slice(),
            &mut self.cls_bias,
            self.regressor.as_mut_slice(),
            &mut self.reg_bias,
        ]
    }
}

/// Dimensions of a head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadShape {
    pub stages: usize,
    pub feature_dim: usize,
    pub proj_dim: usize,
    pub num_classes: usize,
}

impl HeadShape {
    pub fn num_params(&self) -> usize {
        let (d, p, c) = (self.feature_dim, self.proj_dim, self.num_classes + 1);
        self.stages * (d * p + p * c + c + p * 4 + 4)
    }
}

/// Parameters of the whole head. Also used as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub stages: Vec<StageParams>,
}

impl ModelParams {
    pub fn zeros(shape: &HeadShape) -> Self {
        Self { stages: (0..shape.stages).map(|_| StageParams::zeros(shape)).collect() }
    }

    /// Gaussian initialization scaled by fan-in.
    pub fn random(shape: &HeadShape, rng: &mut impl Rng) -> Self {
        let stages = (0..shape.stages)
            .map(|_| StageParams {
                projection: Matrix::random(
                    shape.feature_dim,
                    shape.proj_dim,
                    1.0 / (shape.feature_dim as f64).sqrt(),
                    rng,
                ),
                classifier: Matrix::random(
                    shape.proj_dim,
                    shape.num_classes + 1,
                    1.0 / (shape.proj_dim as f64).sqrt(),
                    rng,
                ),
                cls_bias: vec![0.0; shape.num_classes + 1],
                regressor: Matrix::random(shape.proj_dim, 4, 0.01, rng),
                reg_bias: vec![0.0; 4],
            })
            .collect();
        Self { stages }
    }

    pub fn shape(&self) -> HeadShape {
        let s = &self.stages[0];
        HeadShape {
            stages: self.stages.len(),
            feature_dim: s.projection.rows(),
            proj_dim: s.projection.cols(),
            num_classes: s.cls_bias.len() - 1,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.shape())
    }

    /// Checks internal consistency of every stage.
    pub fn validate(&self) -> Result<HeadShape, AdaptError> {
        let first = self.stages.first().ok_or_else(|| AdaptError::Shape("model has no stages".into()))?;
        if first.cls_bias.is_empty() {
            return Err(AdaptError::Shape("classifier has no columns".into()));
        }
        let shape = self.shape();
        for (k, s) in self.stages.iter().enumerate() {
            let ok = s.projection.rows() == shape.feature_dim
                && s.projection.cols() == shape.proj_dim
                && s.classifier.rows() == shape.proj_dim
                && s.classifier.cols() == shape.num_classes + 1
                && s.cls_bias.len() == shape.num_classes + 1
                && s.regressor.rows() == shape.proj_dim
                && s.regressor.cols() == 4
                && s.reg_bias.len() == 4;
            if !ok {
                return Err(AdaptError::Shape(format!("stage {k} dimensions differ from stage 0")));
            }
            if s.slices().iter().any(|p| p.iter().any(|v| !v.is_finite())) {
                return Err(AdaptError::Shape(format!("stage {k} has non-finite parameters")));
            }
        }
        Ok(shape)
    }

    pub fn num_params(&self) -> usize {
        self.stages.iter().map(|s| s.slices().iter().map(|p| p.len()).sum::<usize>()).sum()
    }

    /// Parameters in a fixed order: per stage, projection, classifier,
    /// classifier bias, regressor, regressor bias.
    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.stages.iter().flat_map(|s| s.slices().into_iter().flat_map(|p| p.iter()))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.stages.iter_mut().flat_map(|s| s.slices_mut().into_iter().flat_map(|p| p.iter_mut()))
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.iter().copied().collect()
    }

    /// Overwrites all parameters from `flat` (same order as [`Self::iter`]).
    pub fn set_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.num_params(), "flat parameter length");
        self.iter_mut().zip(flat).for_each(|(p, v)| *p = *v);
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.stages.len() == other.stages.len()
            && self.stages.iter().zip(&other.stages).all(|(a, b)| {
                a.slices().iter().zip(b.slices().iter()).all(|(x, y)| x.len() == y.len())
            }) && self.shape() == other.shape()
    }

    /// `self += a * other`
    pub fn add_scaled(&mut self, other: &Self, a: f64) {
        self.iter_mut().zip(other.iter()).for_each(|(p, g)| *p += a * g);
    }

    pub fn scale(&mut self, a: f64) {
        self.iter_mut().for_each(|p| *p *= a);
    }

    /// Mean-over-stages logits (length `C + 1`) and box deltas.
    pub fn predict(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let shape = self.shape();
        let mut logits = vec![0.0; shape.num_classes + 1];
        let mut deltas = vec![0.0; 4];
        for s in &self.stages {
            let out = s.forward(x);
            logits.iter_mut().zip(&out.logits).for_each(|(a, b)| *a += b);
            deltas.iter_mut().zip(&out.deltas).for_each(|(a, b)| *a += b);
        }
        let k = self.stages.len() as f64;
        logits.iter_mut().for_each(|v| *v /= k);
        deltas.iter_mut().for_each(|v| *v /= k);
        (logits, deltas)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&ModelFile::from(self)).expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, AdaptError> {
        let file: ModelFile = serde_json::from_str(text).map_err(|e| AdaptError::Format(e.to_string()))?;
        file.try_into()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), AdaptError> {
        let path = path.as_ref();
        fs::write(path, self.to_json()).map_err(|e| AdaptError::Io(path.display().to_string(), e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, AdaptError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| AdaptError::Io(path.display().to_string(), e))?;
        Self::from_json(&text)
    }
}

/// Forward a stage by index, with dimension checking.
pub fn forward(model: &ModelParams, feature: &[f64], stage: usize) -> Result<StageOutput, AdaptError> {
    let s = model
        .stages
        .get(stage)
        .ok_or_else(|| AdaptError::Shape(format!("stage {stage} out of range")))?;
    if feature.len() != s.projection.rows() {
        return Err(AdaptError::Shape(format!(
            "feature length {} but head expects {}",
            feature.len(),
            s.projection.rows()
        )));
    }
    Ok(s.forward(feature))
}

#[derive(Serialize, Deserialize)]
struct StageFile {
    projection: Vec<Vec<f64>>,
    classifier: Vec<Vec<f64>>,
    cls_bias: Vec<f64>,
    regressor: Vec<Vec<f64>>,
    reg_bias: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    #[serde(rename = "K")]
    k: usize,
    #[serde(rename = "D")]
    d: usize,
    #[serde(rename = "Dp")]
    dp: usize,
    #[serde(rename = "C")]
    c: usize,
    stages: Vec<StageFile>,
}

impl From<&ModelParams> for ModelFile {
    fn from(m: &ModelParams) -> Self {
        let shape = m.shape();
        Self {
            k: shape.stages,
            d: shape.feature_dim,
            dp: shape.proj_dim,
            c: shape.num_classes,
            stages: m
                .stages
                .iter()
                .map(|s| StageFile {
                    projection: s.projection.to_rows(),
                    classifier: s.classifier.to_rows(),
                    cls_bias: s.cls_bias.clone(),
                    regressor: s.regressor.to_rows(),
                    reg_bias: s.reg_bias.clone(),
                })
                .collect(),
        }
    }
}

impl TryFrom<ModelFile> for ModelParams {
    type Error = AdaptError;

    fn try_from(f: ModelFile) -> Result<Self, AdaptError> {
        let stages = f
            .stages
            .into_iter()
            .map(|s| {
                Ok(StageParams {
                    projection: Matrix::from_rows(s.projection)?,
                    classifier: Matrix::from_rows(s.classifier)?,
                    cls_bias: s.cls_bias,
                    regressor: Matrix::from_rows(s.regressor)?,
                    reg_bias: s.reg_bias,
                })
            })
            .collect::<Result<Vec<_>, AdaptError>>()?;
        let model = ModelParams { stages };
        let shape = model.validate()?;
        let declared = HeadShape { stages: f.k, feature_dim: f.d, proj_dim: f.dp, num_classes: f.c };
        if shape != declared {
            return Err(AdaptError::Shape(format!("declared {declared:?} but stages give {shape:?}")));
        }
        Ok(model)
    }
}

/// Standard box-delta encoding of `target` relative to `reference`.
pub fn encode_box(reference: &BoundingBox, target: &BoundingBox) -> [f64; 4] {
    let (px, py) = reference.center();
    let (pw, ph) = (reference.width(), reference.height());
    let (gx, gy) = target.center();
    [(gx - px) / pw, (gy - py) / ph, (target.width() / pw).ln(), (target.height() / ph).ln()]
}

pub fn decode_box(reference: &BoundingBox, deltas: &[f64]) -> BoundingBox {
    let (px, py) = reference.center();
    let (pw, ph) = (reference.width(), reference.height());
    // Clamp log-scale deltas so a wild regressor cannot produce inf boxes.
    let dw = deltas[2].clamp(-4.0, 4.0);
    let dh = deltas[3].clamp(-4.0, 4.0);
    let cx = px + deltas[0] * pw;
    let cy = py + deltas[1] * ph;
    let w = pw * dw.exp();
    let h = ph * dh.exp();
    BoundingBox::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn shape() -> HeadShape {
        HeadShape { stages: 2, feature_dim: 3, proj_dim: 2, num_classes: 2 }
    }

    #[test]
    fn zero_feature_gives_biases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut m = ModelParams::random(&shape(), &mut rng);
        m.stages[1].cls_bias = vec![0.5, -1.0, 2.0];
        m.stages[1].reg_bias = vec![0.1, 0.2, 0.3, 0.4];
        let out = forward(&m, &[0.0; 3], 1).unwrap();
        assert_eq!(out.logits, vec![0.5, -1.0, 2.0]);
        assert_eq!(out.deltas, vec![0.1, 0.2, 0.3, 0.4]);
    }

    #[test]
    fn identity_projection_selects_column() {
        let s = HeadShape { stages: 1, feature_dim: 3, proj_dim: 3, num_classes: 1 };
        let mut m = ModelParams::zeros(&s);
        for i in 0..3 {
            m.stages[0].projection.set(i, i, 1.0);
        }
        let out = forward(&m, &[0.0, 1.0, 0.0], 0).unwrap();
        assert_eq!(out.proj, vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn forward_matches_hand_multiplication() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let m = ModelParams::random(&shape(), &mut rng);
        let x = [0.3, -1.2, 2.0];
        let s = &m.stages[0];
        let out = forward(&m, &x, 0).unwrap();
        for j in 0..2 {
            let mut p = 0.0;
            for i in 0..3 {
                p += s.projection.get(i, j) * x[i];
            }
            assert!((out.proj[j] - p).abs() < 1e-14);
        }
        for c in 0..3 {
            let mut l = s.cls_bias[c];
            for j in 0..2 {
                l += s.classifier.get(j, c) * out.proj[j];
            }
            assert!((out.logits[c] - l).abs() < 1e-14);
        }
        assert!(forward(&m, &[1.0], 0).is_err());
        assert!(forward(&m, &x, 5).is_err());
    }

    #[test]
    fn json_roundtrip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = ModelParams::random(&shape(), &mut rng);
        let text = m.to_json();
        assert!(text.starts_with(r#"{"K":2,"D":3,"Dp":2,"C":2,"stages":[{"projection":[["#));
        let back = ModelParams::from_json(&text).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_json(), text);
    }

    #[test]
    fn mismatched_header_is_rejected() {
        let m = ModelParams::zeros(&shape());
        let text = m.to_json().replace(r#""C":2"#, r#""C":3"#);
        assert!(ModelParams::from_json(&text).is_err());
    }

    #[test]
    fn flat_roundtrip_and_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = ModelParams::random(&shape(), &mut rng);
        assert_eq!(m.num_params(), shape().num_params());
        let mut z = m.zeros_like();
        z.set_flat(&m.to_flat());
        assert_eq!(z, m);
    }

    #[test]
    fn box_coding_inverts() {
        let r = BoundingBox::new(10.0, 20.0, 50.0, 100.0);
        let t = BoundingBox::new(12.0, 18.0, 55.0, 90.0);
        let back = decode_box(&r, &encode_box(&r, &t));
        for (a, b) in back.as_array().iter().zip(t.as_array()) {
            assert!((a - b).abs() < 1e-9);
        }
        assert_eq!(encode_box(&r, &r), [0.0, 0.0, 0.0, 0.0]);
    }
}
