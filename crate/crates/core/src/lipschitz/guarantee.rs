//! Distortion-radius guarantee for Lipschitz classifiers, and an exactly
//! Lipschitz synthetic classifier to check it against.
//!
//! If `f` is `L`-Lipschitz and `f(x)` is a label `y`, any distortion with
//! `‖d‖ < ρ / L` keeps `f(x + d)` strictly within `ρ` of `y`, where `ρ` is
//! half the smallest distance between two labels. The nearest label to
//! `f(x + d)` is therefore still `y`.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::LipschitzParams;
use crate::error::{Error, Result};
use crate::rng::Rng;

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// `l` one-hot vectors in `R^l`.
pub fn one_hot_labels(l: usize) -> Vec<Vec<f64>> {
    (0..l)
        .map(|i| {
            let mut v = vec![0.0; l];
            v[i] = 1.0;
            v
        })
        .collect()
}

/// Half the minimum pairwise distance between distinct label vectors,
/// by exhaustive scan. Exact duplicates are dropped first.
pub fn compute_rho(labels: &[Vec<f64>]) -> Result<f64> {
    let dim = labels.first().map_or(0, Vec::len);
    if labels.iter().any(|l| l.len() != dim) {
        return Err(Error::InvalidParam("label vectors have differing lengths".into()));
    }
    let mut distinct: Vec<&Vec<f64>> = Vec::new();
    for l in labels {
        if !distinct.contains(&l) {
            distinct.push(l);
        }
    }
    if distinct.len() < 2 {
        return Err(Error::InvalidParam(format!(
            "need at least 2 distinct labels, got {}",
            distinct.len()
        )));
    }
    let mut min = f64::INFINITY;
    for i in 0..distinct.len() {
        for j in i + 1..distinct.len() {
            min = min.min(distance(distinct[i], distinct[j]));
        }
    }
    Ok(min / 2.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuaranteeReport {
    pub rho: f64,
    pub l_n: f64,
    /// `rho / l_n`.
    pub radius: f64,
    pub label_set_size: usize,
    pub note: String,
}

const CONDITIONAL_NOTE: &str = "radius holds only if the network is actually l_n-Lipschitz; \
     as l_n grows without bound the radius tends to 0";

pub fn guarantee_for(l_n: f64, labels: &[Vec<f64>]) -> Result<GuaranteeReport> {
    if !(l_n > 0.0) {
        return Err(Error::InvalidParam(format!("l_n must be positive, got {l_n}")));
    }
    let rho = compute_rho(labels)?;
    let mut sizes: Vec<&Vec<f64>> = Vec::new();
    for l in labels {
        if !sizes.contains(&l) {
            sizes.push(l);
        }
    }
    Ok(GuaranteeReport {
        rho,
        l_n,
        radius: rho / l_n,
        label_set_size: sizes.len(),
        note: CONDITIONAL_NOTE.into(),
    })
}

pub fn guarantee(params: &LipschitzParams, labels: &[Vec<f64>]) -> Result<GuaranteeReport> {
    guarantee_for(params.l_n, labels)
}

/// A classifier whose continuous output has a known Lipschitz constant.
pub trait LipschitzClassifier {
    fn input_dim(&self) -> usize;
    fn labels(&self) -> &[Vec<f64>];
    fn lipschitz_constant(&self) -> f64;
    fn output(&self, x: &[f64]) -> Vec<f64>;
    /// Draws a point whose output is exactly one of the labels.
    fn sample_labelled_point(&self, rng: &mut Rng) -> Vec<f64>;

    /// Index of the nearest label; ties go to the lowest index.
    fn classify(&self, x: &[f64]) -> usize {
        let y = self.output(x);
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, l) in self.labels().iter().enumerate() {
            let d = distance(&y, l);
            if d < best_d {
                best = i;
                best_d = d;
            }
        }
        best
    }
}

/// Piecewise-linear classifier along the first input coordinate: plateaus
/// that output label `j` exactly, joined by linear ramps towards label
/// `j + 1` whose width makes the slope exactly `L`. Other coordinates are
/// ignored, so the map is `L`-Lipschitz on all of `R^dim`.
#[derive(Clone, Debug)]
pub struct RampClassifier {
    labels: Vec<Vec<f64>>,
    slope: f64,
    plateau: f64,
    dim: usize,
    /// Start of each plateau along the first coordinate.
    starts: Vec<f64>,
}

impl RampClassifier {
    pub fn new(labels: Vec<Vec<f64>>, slope: f64, plateau: f64, dim: usize) -> Result<Self> {
        if !(slope > 0.0) || !(plateau > 0.0) || dim == 0 {
            return Err(Error::InvalidParam("slope, plateau and dim must be positive".into()));
        }
        compute_rho(&labels)?;
        let mut starts = vec![0.0];
        for pair in labels.windows(2) {
            let width = distance(&pair[0], &pair[1]) / slope;
            let prev = *starts.last().expect("non-empty");
            starts.push(prev + plateau + width);
        }
        Ok(Self {
            labels,
            slope,
            plateau,
            dim,
            starts,
        })
    }

    /// One-hot labels in `R^classes`, inputs in `R^dim`.
    pub fn one_hot(classes: usize, slope: f64, dim: usize) -> Result<Self> {
        Self::new(one_hot_labels(classes), slope, 1.0, dim)
    }

    /// Right edge of plateau `j`: the last point that outputs label `j`
    /// before the ramp towards `j + 1`.
    pub fn plateau_end(&self, j: usize) -> f64 {
        self.starts[j] + self.plateau
    }
}

impl LipschitzClassifier for RampClassifier {
    fn input_dim(&self) -> usize {
        self.dim
    }

    fn labels(&self) -> &[Vec<f64>] {
        &self.labels
    }

    fn lipschitz_constant(&self) -> f64 {
        self.slope
    }

    fn output(&self, x: &[f64]) -> Vec<f64> {
        let t = x[0];
        let last = self.labels.len() - 1;
        for j in 0..last {
            let end = self.plateau_end(j);
            if t <= end {
                return self.labels[j].clone();
            }
            if t < self.starts[j + 1] {
                let s = (t - end) / (self.starts[j + 1] - end);
                return self.labels[j]
                    .iter()
                    .zip(&self.labels[j + 1])
                    .map(|(a, b)| a + s * (b - a))
                    .collect();
            }
        }
        self.labels[last].clone()
    }

    fn sample_labelled_point(&self, rng: &mut Rng) -> Vec<f64> {
        let j = rng.random_range(0..self.labels.len());
        let mut x: Vec<f64> = (0..self.dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        x[0] = self.starts[j] + self.plateau * rng.random::<f64>();
        x
    }
}

/// Uniform draw from the open ball of the given radius.
fn sample_in_ball(dim: usize, radius: f64, rng: &mut Rng) -> Vec<f64> {
    loop {
        let dir: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        // u in [0, 1) keeps the draw strictly inside
        let r = radius * rng.random::<f64>().powf(1.0 / dim as f64);
        return dir.into_iter().map(|v| v * r / norm).collect();
    }
}

/// Counts label changes under distortions drawn uniformly from the open
/// ball of radius `ρ / L` around labelled base points.
pub fn verify_radius_synthetic<C: LipschitzClassifier>(oracle: &C, n_trials: usize, rng: &mut Rng) -> Result<usize> {
    let radius = compute_rho(oracle.labels())? / oracle.lipschitz_constant();
    let mut violations = 0;
    for _ in 0..n_trials {
        let x = oracle.sample_labelled_point(rng);
        let d = sample_in_ball(oracle.input_dim(), radius, rng);
        let moved: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + b).collect();
        if oracle.classify(&x) != oracle.classify(&moved) {
            violations += 1;
        }
    }
    Ok(violations)
}

/// Pushes base points sitting on a plateau edge towards the neighbouring
/// label by `factor · ρ / L` and counts label changes. With `factor > 1`
/// this finds violations, showing the radius is not vacuous.
pub fn probe_outside_radius(oracle: &RampClassifier, factor: f64, n_trials: usize, rng: &mut Rng) -> Result<usize> {
    let radius = compute_rho(oracle.labels())? / oracle.lipschitz_constant();
    let mut violations = 0;
    for _ in 0..n_trials {
        let j = rng.random_range(0..oracle.labels().len() - 1);
        let mut x: Vec<f64> = (0..oracle.input_dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
        x[0] = oracle.plateau_end(j);
        let mut moved = x.clone();
        moved[0] += factor * radius;
        if oracle.classify(&x) != oracle.classify(&moved) {
            violations += 1;
        }
    }
    Ok(violations)
}
