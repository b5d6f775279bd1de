//! One-vs-rest linear SVM trained with Pegasos-style stochastic subgradient
//! steps on the L2-regularized hinge loss.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::corpus::LabelSchema;
use crate::features::SparseVector;

#[derive(Debug, Error)]
pub enum SvmError {
    #[error("class {0} has no training examples")]
    ClassAbsent(&'static str),
    #[error("feature dimension {found} does not match model dimension {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("{features} feature vectors but {labels} labels")]
    LengthMismatch { features: usize, labels: usize },
    #[error("label index {0} outside the schema")]
    BadLabel(usize),
    #[error("regularization strength must be positive, got {0}")]
    BadLambda(f64),
    #[error("malformed svm file: {0}")]
    Format(String),
    #[error("svm i/o: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, SvmError>;

/// Anything the trainer can take a dot product with and add into a weight
/// vector: sparse TF-IDF rows and dense pooled embeddings alike.
pub trait FeatureVector {
    fn dim(&self) -> usize;
    fn dot(&self, w: &[f64]) -> f64;
    /// `w += scale * self`
    fn add_scaled_to(&self, scale: f64, w: &mut [f64]);
}

impl FeatureVector for SparseVector {
    fn dim(&self) -> usize {
        self.dim
    }

    fn dot(&self, w: &[f64]) -> f64 {
        self.entries.iter().map(|&(i, v)| w[i] * v).sum()
    }

    fn add_scaled_to(&self, scale: f64, w: &mut [f64]) {
        for &(i, v) in &self.entries {
            w[i] += scale * v;
        }
    }
}

impl FeatureVector for [f64] {
    fn dim(&self) -> usize {
        self.len()
    }

    fn dot(&self, w: &[f64]) -> f64 {
        self.iter().zip(w).map(|(a, b)| a * b).sum()
    }

    fn add_scaled_to(&self, scale: f64, w: &mut [f64]) {
        for (wi, xi) in w.iter_mut().zip(self) {
            *wi += scale * xi;
        }
    }
}

impl FeatureVector for Vec<f64> {
    fn dim(&self) -> usize {
        self.len()
    }

    fn dot(&self, w: &[f64]) -> f64 {
        self.as_slice().dot(w)
    }

    fn add_scaled_to(&self, scale: f64, w: &mut [f64]) {
        self.as_slice().add_scaled_to(scale, w)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SvmParams {
    pub lambda: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for SvmParams {
    fn default() -> Self {
        Self {
            lambda: 1e-4,
            epochs: 20,
            seed: 13,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    pub schema: LabelSchema,
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

impl LinearModel {
    pub fn zeros(schema: LabelSchema, dim: usize) -> Self {
        Self {
            schema,
            weights: vec![vec![0.0; dim]; schema.len()],
            bias: vec![0.0; schema.len()],
        }
    }

    pub fn dim(&self) -> usize {
        self.weights.first().map_or(0, Vec::len)
    }

    pub fn scores<V: FeatureVector + ?Sized>(&self, x: &V) -> Result<Vec<f64>> {
        if x.dim() != self.dim() {
            return Err(SvmError::DimensionMismatch {
                expected: self.dim(),
                found: x.dim(),
            });
        }
        Ok(self
            .weights
            .iter()
            .zip(&self.bias)
            .map(|(w, b)| x.dot(w) + b)
            .collect())
    }

    /// Argmax over class scores; the earliest class wins ties.
    pub fn predict<V: FeatureVector + ?Sized>(&self, x: &V) -> Result<usize> {
        Ok(argmax(&self.scores(x)?))
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        for (c, (w, b)) in self.weights.iter().zip(&self.bias).enumerate() {
            s.push_str(self.schema.name(c));
            for v in w {
                write!(s, "\t{v:?}").unwrap();
            }
            writeln!(s, "\t{b:?}").unwrap();
        }
        s
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let bad = |m: String| SvmError::Format(m);
        let rows: Vec<Vec<&str>> = text
            .lines()
            .filter(|l| !l.is_empty())
            .map(|l| l.split('\t').collect())
            .collect();
        let names: Vec<&str> = rows.iter().map(|r| r[0]).collect();
        let schema = [LabelSchema::TASK_A, LabelSchema::TASK_B]
            .into_iter()
            .find(|s| s.classes == names.as_slice())
            .ok_or_else(|| bad(format!("class list {names:?} matches no schema")))?;
        let mut weights = Vec::new();
        let mut bias = Vec::new();
        for r in &rows {
            if r.len() < 2 {
                return Err(bad(format!("row for {} has no bias", r[0])));
            }
            let nums = r[1..]
                .iter()
                .map(|v| v.parse::<f64>().map_err(|_| bad(format!("bad number `{v}`"))))
                .collect::<Result<Vec<_>>>()?;
            let (b, w) = nums.split_last().unwrap();
            weights.push(w.to_vec());
            bias.push(*b);
        }
        if weights.iter().any(|w| w.len() != weights[0].len()) {
            return Err(bad("ragged weight rows".into()));
        }
        Ok(Self { schema, weights, bias })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_tsv())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_tsv(&fs::read_to_string(path)?)
    }
}

pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

pub fn train_svm<V: FeatureVector>(
    features: &[V],
    labels: &[usize],
    schema: LabelSchema,
    dim: usize,
    params: &SvmParams,
) -> Result<LinearModel> {
    if features.len() != labels.len() {
        return Err(SvmError::LengthMismatch {
            features: features.len(),
            labels: labels.len(),
        });
    }
    if !(params.lambda > 0.0) {
        return Err(SvmError::BadLambda(params.lambda));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= schema.len()) {
        return Err(SvmError::BadLabel(bad));
    }
    for c in 0..schema.len() {
        if !labels.contains(&c) {
            return Err(SvmError::ClassAbsent(schema.name(c)));
        }
    }
    if let Some(x) = features.iter().find(|x| x.dim() != dim) {
        return Err(SvmError::DimensionMismatch {
            expected: dim,
            found: x.dim(),
        });
    }

    let mut model = LinearModel::zeros(schema, dim);
    for class in 0..schema.len() {
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed.wrapping_add(class as u64));
        let (w, b) = pegasos_binary(features, labels, class, params, &mut rng);
        model.weights[class] = w;
        model.bias[class] = b;
    }
    Ok(model)
}

/// Binary run for `class` vs rest. The weight vector is stored as
/// `scale * v` so the per-step shrink costs O(1) on sparse inputs.
fn pegasos_binary<V: FeatureVector>(
    features: &[V],
    labels: &[usize],
    class: usize,
    params: &SvmParams,
    rng: &mut ChaCha8Rng,
) -> (Vec<f64>, f64) {
    let dim = features.first().map_or(0, |x| x.dim());
    let mut v = vec![0.0; dim];
    let mut scale = 1.0f64;
    let mut bias = 0.0f64;
    let mut order: Vec<usize> = (0..features.len()).collect();
    let mut t = 0u64;
    for _ in 0..params.epochs {
        order.shuffle(rng);
        for &i in &order {
            t += 1;
            let eta = 1.0 / (params.lambda * t as f64);
            let y = if labels[i] == class { 1.0 } else { -1.0 };
            let x = &features[i];
            let margin = y * (scale * x.dot(&v) + bias);
            let shrink = 1.0 - eta * params.lambda;
            if shrink <= 0.0 {
                v.iter_mut().for_each(|e| *e = 0.0);
                scale = 1.0;
            } else {
                scale *= shrink;
            }
            if margin < 1.0 {
                x.add_scaled_to(eta * y / scale, &mut v);
                // The bias is outside the regularizer, so nothing pulls it
                // back: a 1/(lambda t) step would leave it dominated by the
                // first few updates. It takes a plain 1/sqrt(t) step.
                bias += y / (t as f64).sqrt();
            }
            if scale < 1e-9 {
                v.iter_mut().for_each(|e| *e *= scale);
                scale = 1.0;
            }
        }
    }
    v.iter_mut().for_each(|e| *e *= scale);
    (v, bias)
}

/// `lambda/2 * sum_c |w_c|^2 + mean_{i,c} max(0, 1 - y_ic * score_ic)`
pub fn hinge_objective<V: FeatureVector>(
    model: &LinearModel,
    features: &[V],
    labels: &[usize],
    lambda: f64,
) -> Result<f64> {
    let reg: f64 = model
        .weights
        .iter()
        .map(|w| w.iter().map(|x| x * x).sum::<f64>())
        .sum::<f64>()
        * lambda
        / 2.0;
    if features.is_empty() {
        return Ok(reg);
    }
    let mut loss = 0.0;
    for (x, &l) in features.iter().zip(labels) {
        for (c, s) in model.scores(x)?.into_iter().enumerate() {
            let y = if c == l { 1.0 } else { -1.0 };
            loss += (1.0 - y * s).max(0.0);
        }
    }
    Ok(reg + loss / (features.len() * model.schema.len()) as f64)
}
