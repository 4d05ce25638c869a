//! Loss-landscape cartography: direction pairs spanning a plane through an
//! anchor point, grid evaluation over that plane, and projection of weight
//! snapshots back onto it.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::RaggedTensor;

pub const DEFAULT_CLIP: f64 = 1e6;
pub const PCA_TOLERANCE: f64 = 1e-10;
pub const PCA_MAX_ITERATIONS: usize = 1000;

const DEGENERATE_RELATIVE: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Each direction component has the norm of the matching anchor component.
    FilterNorm,
    /// Each direction has dual-norm 1.
    Unit,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DirectionPair {
    pub d1: RaggedTensor,
    pub d2: RaggedTensor,
    pub normalization: Normalization,
    pub seed: u64,
}

/// Two independent standard-normal directions shaped like `anchor`.
///
/// Under filter normalization a component whose anchor norm is zero gets a
/// zero direction component.
pub fn random_directions(anchor: &RaggedTensor, mode: Normalization, seed: u64) -> Result<DirectionPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = || -> Result<RaggedTensor> {
        let samples: Vec<f64> = (0..anchor.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
        let mut d = anchor.with_flat_values(&samples)?;
        match mode {
            Normalization::Unit => d = d.unit()?,
            Normalization::FilterNorm => {
                for (dc, ac) in d.components_mut().iter_mut().zip(anchor.components()) {
                    let target = ac.norm();
                    let current = dc.norm();
                    let factor = if current > 0.0 { target / current } else { 0.0 };
                    dc.values_mut().iter_mut().for_each(|v| *v *= factor);
                }
            }
        }
        Ok(d)
    };
    let d1 = draw()?;
    let d2 = draw()?;
    Ok(DirectionPair {
        d1,
        d2,
        normalization: mode,
        seed,
    })
}

/// `anchor + alpha * d1 + beta * d2`; the anchor is left untouched.
pub fn slice_params(anchor: &RaggedTensor, pair: &DirectionPair, alpha: f64, beta: f64) -> Result<RaggedTensor> {
    let offset = pair.d1.zip_with(&pair.d2, |x, y| alpha * x + beta * y)?;
    anchor.add(&offset)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LandscapeGrid {
    pub alphas: Vec<f64>,
    pub betas: Vec<f64>,
    /// Indexed `[alpha, beta]`.
    pub train_loss: Array2<f64>,
    pub test_loss: Option<Array2<f64>>,
    /// Set where any loss at the cell was non-finite or above the ceiling.
    pub clipped: Array2<bool>,
    pub clip_ceiling: f64,
    pub anchor_meta: BTreeMap<String, String>,
}

impl LandscapeGrid {
    pub fn shape(&self) -> (usize, usize) {
        (self.alphas.len(), self.betas.len())
    }

    pub fn any_clipped(&self) -> bool {
        self.clipped.iter().any(|&c| c)
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.train_loss
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }
}

/// `n` evenly spaced points over `[lo, hi]`; a single point sits at the midpoint.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![(lo + hi) / 2.0],
        _ => (0..n)
            .map(|i| {
                if i == n - 1 {
                    hi
                } else {
                    lo + (hi - lo) * i as f64 / (n - 1) as f64
                }
            })
            .collect(),
    }
}

fn check_axis(axis: &[f64], name: &str) -> Result<()> {
    if axis.is_empty() {
        return Err(Error::InvalidConfig(format!("{name} axis is empty")));
    }
    if axis.iter().any(|v| !v.is_finite()) || axis.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::InvalidConfig(format!("{name} axis must be finite and sorted")));
    }
    Ok(())
}

fn clip(value: f64, ceiling: f64) -> (f64, bool) {
    if value.is_finite() && value <= ceiling {
        (value, false)
    } else {
        (ceiling, true)
    }
}

/// Evaluates the loss closures at every `(alpha, beta)` cell, in parallel.
/// Results are merged by index, so the output does not depend on scheduling.
pub fn evaluate_grid<F, G>(
    anchor: &RaggedTensor,
    pair: &DirectionPair,
    alphas: &[f64],
    betas: &[f64],
    train_loss: F,
    test_loss: Option<G>,
    clip_ceiling: f64,
) -> Result<LandscapeGrid>
where
    F: Fn(&RaggedTensor) -> Result<f64> + Sync,
    G: Fn(&RaggedTensor) -> Result<f64> + Sync,
{
    check_axis(alphas, "alpha")?;
    check_axis(betas, "beta")?;
    if !anchor.is_congruent(&pair.d1) || !anchor.is_congruent(&pair.d2) {
        return Err(Error::ShapeMismatch("direction pair is not congruent to the anchor".into()));
    }
    let (na, nb) = (alphas.len(), betas.len());
    let cells: Vec<(f64, Option<f64>, bool)> = (0..na * nb)
        .into_par_iter()
        .map(|k| {
            let w = slice_params(anchor, pair, alphas[k / nb], betas[k % nb])?;
            let (train, mut flagged) = clip(train_loss(&w)?, clip_ceiling);
            let test = match &test_loss {
                Some(f) => {
                    let (v, c) = clip(f(&w)?, clip_ceiling);
                    flagged |= c;
                    Some(v)
                }
                None => None,
            };
            Ok((train, test, flagged))
        })
        .collect::<Result<_>>()?;

    let train = Array2::from_shape_fn((na, nb), |(i, j)| cells[i * nb + j].0);
    let test = test_loss
        .as_ref()
        .map(|_| Array2::from_shape_fn((na, nb), |(i, j)| cells[i * nb + j].1.unwrap_or(f64::NAN)));
    let clipped = Array2::from_shape_fn((na, nb), |(i, j)| cells[i * nb + j].2);
    Ok(LandscapeGrid {
        alphas: alphas.to_vec(),
        betas: betas.to_vec(),
        train_loss: train,
        test_loss: test,
        clipped,
        clip_ceiling,
        anchor_meta: BTreeMap::new(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub step: u64,
    pub alpha: f64,
    pub beta: f64,
    pub train_loss: f64,
    pub test_loss: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub optimizer_name: String,
    pub sample_stride: u64,
    pub points: Vec<TrajectoryPoint>,
}

impl Trajectory {
    pub fn new(optimizer_name: impl Into<String>, sample_stride: u64) -> Result<Self> {
        if sample_stride == 0 {
            return Err(Error::InvalidConfig("sample stride must be >= 1".into()));
        }
        Ok(Self {
            optimizer_name: optimizer_name.into(),
            sample_stride,
            points: Vec::new(),
        })
    }

    pub fn push(&mut self, point: TrajectoryPoint) -> Result<()> {
        if let Some(last) = self.points.last() {
            if point.step <= last.step {
                return Err(Error::InvariantViolation(format!(
                    "trajectory steps must increase: {} after {}",
                    point.step, last.step
                )));
            }
        }
        self.points.push(point);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Least-squares projection onto the plane `anchor + span(d1, d2)`.
#[derive(Clone, Debug)]
pub struct Plane<'a> {
    anchor: &'a RaggedTensor,
    pair: &'a DirectionPair,
    g11: f64,
    g12: f64,
    g22: f64,
    det: f64,
}

impl<'a> Plane<'a> {
    pub fn new(anchor: &'a RaggedTensor, pair: &'a DirectionPair) -> Result<Self> {
        let g11 = pair.d1.dot(&pair.d1)?;
        let g12 = pair.d1.dot(&pair.d2)?;
        let g22 = pair.d2.dot(&pair.d2)?;
        if !anchor.is_congruent(&pair.d1) {
            return Err(Error::ShapeMismatch("direction pair is not congruent to the anchor".into()));
        }
        let det = g11 * g22 - g12 * g12;
        if !(det > DEGENERATE_RELATIVE * g11 * g22) || g11 == 0.0 || g22 == 0.0 {
            return Err(Error::DegenerateBasis { det });
        }
        Ok(Self {
            anchor,
            pair,
            g11,
            g12,
            g22,
            det,
        })
    }

    /// The `(alpha, beta)` minimizing `||w - anchor - alpha d1 - beta d2||`.
    pub fn project(&self, w: &RaggedTensor) -> Result<(f64, f64)> {
        let r = w.sub(self.anchor)?;
        let b1 = r.dot(&self.pair.d1)?;
        let b2 = r.dot(&self.pair.d2)?;
        let alpha = (self.g22 * b1 - self.g12 * b2) / self.det;
        let beta = (self.g11 * b2 - self.g12 * b1) / self.det;
        Ok((alpha, beta))
    }
}

pub fn project_trajectory(
    snapshots: &[RaggedTensor],
    anchor: &RaggedTensor,
    pair: &DirectionPair,
) -> Result<Vec<(f64, f64)>> {
    let plane = Plane::new(anchor, pair)?;
    snapshots.iter().map(|w| plane.project(w)).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct PcaDirections {
    pub pair: DirectionPair,
    /// Top two eigenvalues of the centered snapshot covariance `X^T X`.
    pub eigenvalues: [f64; 2],
}

/// Top-two principal directions of the anchor-centered snapshots.
///
/// Power iteration with deflation runs on the small snapshot Gram matrix
/// `X X^T`; each eigenvector maps back to weight space as `X^T u`. Iteration
/// stops once the eigenvalue estimate changes by at most the tolerance
/// (relative). The returned pair is orthonormal under the dual-norm inner
/// product. When the path is rank one, `d2` is an arbitrary unit direction
/// orthogonal to `d1` and its eigenvalue is reported as 0.
pub fn pca_directions(snapshots: &[RaggedTensor], anchor: &RaggedTensor) -> Result<PcaDirections> {
    if snapshots.len() < 3 {
        return Err(Error::InvalidConfig(format!(
            "principal directions need at least 3 snapshots, got {}",
            snapshots.len()
        )));
    }
    let centered: Vec<RaggedTensor> = snapshots.iter().map(|w| w.sub(anchor)).collect::<Result<_>>()?;
    let n = centered.len();
    let mut gram = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i..n {
            let v = centered[i].dot(&centered[j])?;
            gram[i][j] = v;
            gram[j][i] = v;
        }
    }

    let start: Vec<f64> = (0..n).map(|i| 1.0 + i as f64 / n as f64).collect();
    let (u1, l1) = power_iteration(&gram, start.clone(), None)?;
    if !(l1 > 0.0) {
        return Err(Error::DegenerateBasis { det: 0.0 });
    }
    let d1 = combine(&centered, &u1)?.unit()?;

    let (u2, l2) = power_iteration(&gram, start, Some(&u1))?;
    let (d2, l2) = if l2 > PCA_TOLERANCE * l1 {
        (orthonormalize(combine(&centered, &u2)?, &d1)?, l2)
    } else {
        (arbitrary_orthogonal(&d1)?, 0.0)
    };

    Ok(PcaDirections {
        pair: DirectionPair {
            d1,
            d2,
            normalization: Normalization::Unit,
            seed: 0,
        },
        eigenvalues: [l1, l2],
    })
}

fn mat_vec(m: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    m.iter().map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum()).collect()
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

fn deflate(v: &mut [f64], against: Option<&[f64]>) {
    if let Some(u) = against {
        let p: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
        v.iter_mut().zip(u).for_each(|(a, b)| *a -= p * b);
    }
}

/// Dominant eigenpair of a symmetric PSD matrix, restricted to the
/// orthogonal complement of `against` when given.
fn power_iteration(m: &[Vec<f64>], mut v: Vec<f64>, against: Option<&[f64]>) -> Result<(Vec<f64>, f64)> {
    deflate(&mut v, against);
    if normalize(&mut v) == 0.0 {
        v = (0..m.len()).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        deflate(&mut v, against);
        normalize(&mut v);
    }
    let mut lambda = 0.0;
    for _ in 0..PCA_MAX_ITERATIONS {
        let mut next = mat_vec(m, &v);
        deflate(&mut next, against);
        let new_lambda = normalize(&mut next);
        if new_lambda == 0.0 {
            return Ok((v, 0.0));
        }
        v = next;
        if (new_lambda - lambda).abs() <= PCA_TOLERANCE * new_lambda {
            return Ok((v, new_lambda));
        }
        lambda = new_lambda;
    }
    Err(Error::ConvergenceFailure {
        iterations: PCA_MAX_ITERATIONS,
    })
}

fn combine(rows: &[RaggedTensor], weights: &[f64]) -> Result<RaggedTensor> {
    let mut out = rows[0].zeros_like();
    for (r, &w) in rows.iter().zip(weights) {
        out.add_scaled(r, w)?;
    }
    Ok(out)
}

fn orthonormalize(v: RaggedTensor, basis: &RaggedTensor) -> Result<RaggedTensor> {
    let mut v = v;
    let p = v.dot(basis)?;
    v.add_scaled(basis, -p)?;
    let v = v.unit()?;
    // one more pass removes what cancellation left behind
    let mut v2 = v.clone();
    let p = v2.dot(basis)?;
    v2.add_scaled(basis, -p)?;
    v2.unit()
}

/// A unit tensor orthogonal to `d1`, chosen deterministically.
fn arbitrary_orthogonal(d1: &RaggedTensor) -> Result<RaggedTensor> {
    let flat = d1.flatten();
    // the coordinate axis least aligned with d1
    let k = flat
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
        .map(|(i, _)| i)
        .unwrap_or(0);
    let mut e = vec![0.0; flat.len()];
    e[k] = 1.0;
    orthonormalize(d1.with_flat_values(&e)?, d1)
}
