//! Hidden layers whose weights are built from pairs of data points.
//!
//! For a pair `(h1, h2)` a neuron gets
//!
//! ```text
//! w = s1 (h2 - h1) / ‖h2 - h1‖²,    b = -⟨w, h1⟩ + s2
//! ```
//!
//! so its pre-activation is exactly `s2` at `h1` and `s1 + s2` at `h2`.
//! Pairs are drawn uniformly or with probability proportional to the
//! finite-difference gradient `‖t2 - t1‖ / ‖h2 - h1‖` of a target map.

use alloc::collections::BTreeSet;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::linalg::ensure_finite;

/// Pools larger than this many points are subsampled instead of enumerated.
pub const ENUMERATION_LIMIT: usize = 1024;
/// Candidate pairs drawn per neuron when the pool is subsampled.
pub const POOL_PAIRS_PER_NEURON: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Tanh => libm::tanh(v),
            Activation::Relu => v.max(0.0),
            Activation::Identity => v,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
            Activation::Identity => "identity",
        }
    }
}

/// How pairs of data points are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Density {
    Uniform,
    GradientWeighted,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub width: usize,
    pub density: Density,
    pub s1: f64,
    pub s2: f64,
    pub min_pair_distance: f64,
    pub activation: Activation,
}

impl SamplingConfig {
    pub fn new(width: usize, activation: Activation, density: Density) -> Self {
        Self {
            width,
            density,
            s1: 1.0,
            s2: 0.0,
            min_pair_distance: 1e-10,
            activation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 {
            return Err(Error::InvalidArgument("layer width must be at least 1".into()));
        }
        if !(self.min_pair_distance > 0.0) {
            return Err(Error::InvalidArgument(
                "min_pair_distance must be positive".into(),
            ));
        }
        if !self.s1.is_finite() || !self.s2.is_finite() || self.s1 == 0.0 {
            return Err(Error::InvalidArgument(
                "s1 must be finite and nonzero, s2 finite".into(),
            ));
        }
        Ok(())
    }
}

/// The data pair a neuron was built from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampledPair {
    pub i: usize,
    pub j: usize,
    pub from: Vec<f64>,
    pub to: Vec<f64>,
}

/// One dense hidden layer `x ↦ σ(W x + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledLayer {
    weights: DMatrix<f64>,
    biases: DVector<f64>,
    activation: Activation,
    provenance: Option<Vec<SampledPair>>,
}

impl SampledLayer {
    pub fn from_parts(
        weights: DMatrix<f64>,
        biases: DVector<f64>,
        activation: Activation,
    ) -> Result<Self> {
        check_dim("layer bias length", weights.nrows(), biases.len())?;
        ensure_finite(&weights, "layer weights")?;
        if biases.iter().any(|b| !b.is_finite()) {
            return Err(Error::NonFinite("layer biases"));
        }
        Ok(Self {
            weights,
            biases,
            activation,
            provenance: None,
        })
    }

    /// `x ↦ x`, used where a dictionary is replaced by the raw coordinates.
    pub fn identity(dim: usize) -> Self {
        Self {
            weights: DMatrix::identity(dim, dim),
            biases: DVector::zeros(dim),
            activation: Activation::Identity,
            provenance: None,
        }
    }

    pub fn with_provenance(mut self, pairs: Vec<SampledPair>) -> Result<Self> {
        check_dim("provenance length", self.width(), pairs.len())?;
        self.provenance = Some(pairs);
        Ok(self)
    }

    pub fn weights(&self) -> &DMatrix<f64> {
        &self.weights
    }

    pub fn biases(&self) -> &DVector<f64> {
        &self.biases
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    /// Pairs behind each neuron; `None` for layers not built from data.
    pub fn provenance(&self) -> Option<&[SampledPair]> {
        self.provenance.as_deref()
    }

    pub fn width(&self) -> usize {
        self.weights.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.weights.ncols()
    }

    /// Evaluate on one point.
    pub fn apply_into(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        check_dim("layer input", self.input_dim(), x.len())?;
        check_dim("layer output", self.width(), out.len())?;
        let d = self.input_dim();
        for (m, o) in out.iter_mut().enumerate() {
            let mut acc = self.biases[m];
            for (k, xk) in x.iter().enumerate().take(d) {
                acc += self.weights[(m, k)] * xk;
            }
            *o = self.activation.apply(acc);
        }
        Ok(())
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut out = alloc::vec![0.0; self.width()];
        self.apply_into(x, &mut out)?;
        Ok(out)
    }

    /// Evaluate row-wise: `points` is `* × d`, the result `* × M`.
    pub fn apply_rows(&self, points: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_dim("layer input columns", self.input_dim(), points.ncols())?;
        let mut pre = points * self.weights.transpose();
        for (mut col, b) in pre.column_iter_mut().zip(self.biases.iter()) {
            let act = self.activation;
            col.iter_mut().for_each(|v| *v = act.apply(*v + b));
        }
        Ok(pre)
    }

    /// Feature matrix in dictionary-major layout: `points` is `d × N`
    /// (one snapshot per column), the result `M × N`.
    pub fn apply_columns(&self, points: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_dim("layer input rows", self.input_dim(), points.nrows())?;
        let mut pre = &self.weights * points;
        for mut col in pre.column_iter_mut() {
            for (v, b) in col.iter_mut().zip(self.biases.iter()) {
                *v = self.activation.apply(*v + b);
            }
        }
        Ok(pre)
    }
}

fn row_distance(points: &DMatrix<f64>, i: usize, j: usize) -> f64 {
    let mut acc = 0.0;
    for c in 0..points.ncols() {
        let d = points[(j, c)] - points[(i, c)];
        acc += d * d;
    }
    libm::sqrt(acc)
}

fn random_pair<R: Rng + ?Sized>(n: usize, rng: &mut R) -> (usize, usize) {
    let i = rng.random_range(0..n);
    let mut j = rng.random_range(0..n - 1);
    if j >= i {
        j += 1;
    }
    if i < j {
        (i, j)
    } else {
        (j, i)
    }
}

fn all_admissible_pairs(points: &DMatrix<f64>, min_distance: f64) -> Vec<(usize, usize)> {
    let n = points.nrows();
    let mut pairs = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            if row_distance(points, i, j) >= min_distance {
                pairs.push((i, j));
            }
        }
    }
    pairs
}

/// Distinct admissible pairs drawn uniformly from `n` points; used as the
/// candidate pool when full enumeration is too large.
fn random_pool<R: Rng + ?Sized>(
    points: &DMatrix<f64>,
    size: usize,
    min_distance: f64,
    rng: &mut R,
) -> Result<Vec<(usize, usize)>> {
    let n = points.nrows();
    let mut pool = Vec::with_capacity(size);
    let max_attempts = 4 * size + 10_000;
    let mut attempts = 0;
    while pool.len() < size && attempts < max_attempts {
        attempts += 1;
        let (i, j) = random_pair(n, rng);
        if row_distance(points, i, j) >= min_distance {
            pool.push((i, j));
        }
    }
    if pool.is_empty() {
        return Err(Error::DegeneratePairs { min_distance });
    }
    pool.sort_unstable();
    pool.dedup();
    Ok(pool)
}

fn choose_uniform<R: Rng + ?Sized>(
    mut pool: Vec<(usize, usize)>,
    count: usize,
    rng: &mut R,
) -> Vec<(usize, usize)> {
    // Partial Fisher–Yates.
    for k in 0..count {
        let pick = rng.random_range(k..pool.len());
        pool.swap(k, pick);
    }
    pool.truncate(count);
    pool
}

/// Draw `count` distinct unordered pairs `(i, j)`, `i < j`, of rows of `points`
/// (`N × d`) whose distance is at least `min_distance`.
///
/// Under [`Density::GradientWeighted`] the probability of a pair is
/// proportional to `‖t_j − t_i‖ / ‖p_j − p_i‖` for the rows `t` of `targets`;
/// pairs are drawn without replacement from a candidate pool holding all
/// pairs when `N ≤ 1024` and `1024 · count` uniformly drawn pairs otherwise.
/// If every weight in the pool is zero the draw falls back to uniform.
pub fn sample_pairs<R: Rng + ?Sized>(
    points: &DMatrix<f64>,
    targets: Option<&DMatrix<f64>>,
    count: usize,
    density: Density,
    min_distance: f64,
    rng: &mut R,
) -> Result<Vec<(usize, usize)>> {
    let n = points.nrows();
    if n < 2 {
        return Err(Error::InvalidArgument(alloc::format!(
            "pair sampling needs at least two points, got {n}"
        )));
    }
    ensure_finite(points, "sampling points")?;
    let targets = match (density, targets) {
        (Density::GradientWeighted, None) => return Err(Error::MissingTargets),
        (_, Some(t)) => {
            check_dim("target rows", n, t.nrows())?;
            ensure_finite(t, "sampling targets")?;
            Some(t)
        }
        (Density::Uniform, None) => None,
    };
    if count == 0 {
        return Ok(Vec::new());
    }

    let enumerate = n <= ENUMERATION_LIMIT;
    if density == Density::Uniform && !enumerate {
        return sample_uniform_rejection(points, count, min_distance, rng);
    }

    let pool = if enumerate {
        all_admissible_pairs(points, min_distance)
    } else {
        random_pool(points, POOL_PAIRS_PER_NEURON * count, min_distance, rng)?
    };
    if pool.is_empty() {
        return Err(Error::DegeneratePairs { min_distance });
    }
    if pool.len() < count {
        return Err(Error::InsufficientPairs {
            requested: count,
            available: pool.len(),
        });
    }

    match (density, targets) {
        (Density::GradientWeighted, Some(t)) => {
            let mut weights: Vec<f64> = pool
                .iter()
                .map(|&(i, j)| row_distance(t, i, j) / row_distance(points, i, j))
                .collect();
            Ok(choose_weighted(&pool, &mut weights, count, rng))
        }
        _ => Ok(choose_uniform(pool, count, rng)),
    }
}

fn sample_uniform_rejection<R: Rng + ?Sized>(
    points: &DMatrix<f64>,
    count: usize,
    min_distance: f64,
    rng: &mut R,
) -> Result<Vec<(usize, usize)>> {
    let n = points.nrows();
    let available = n * (n - 1) / 2;
    if available < count {
        return Err(Error::InsufficientPairs {
            requested: count,
            available,
        });
    }
    let mut seen = BTreeSet::new();
    let mut pairs = Vec::with_capacity(count);
    let max_attempts = 100 * count + 10_000;
    let mut attempts = 0;
    while pairs.len() < count {
        if attempts == max_attempts {
            return Err(if pairs.is_empty() {
                Error::DegeneratePairs { min_distance }
            } else {
                Error::InsufficientPairs {
                    requested: count,
                    available: pairs.len(),
                }
            });
        }
        attempts += 1;
        let pair = random_pair(n, rng);
        if row_distance(points, pair.0, pair.1) >= min_distance && seen.insert(pair) {
            pairs.push(pair);
        }
    }
    Ok(pairs)
}

/// Categorical draws without replacement; zero-weight pairs are only used
/// once the positive mass is exhausted.
fn choose_weighted<R: Rng + ?Sized>(
    pool: &[(usize, usize)],
    weights: &mut [f64],
    count: usize,
    rng: &mut R,
) -> Vec<(usize, usize)> {
    let mut taken = alloc::vec![false; pool.len()];
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let total: f64 = weights.iter().sum();
        let idx = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = None;
            for (k, w) in weights.iter().enumerate() {
                if *w <= 0.0 {
                    continue;
                }
                acc += w;
                chosen = Some(k);
                if acc > target {
                    break;
                }
            }
            chosen.expect("positive total weight")
        } else {
            let free: Vec<usize> = (0..pool.len()).filter(|&k| !taken[k]).collect();
            free[rng.random_range(0..free.len())]
        };
        taken[idx] = true;
        weights[idx] = 0.0;
        out.push(pool[idx]);
    }
    out
}

/// Build one neuron per pair from rows of `points` (`N × d`).
pub fn construct_layer(
    points: &DMatrix<f64>,
    pairs: &[(usize, usize)],
    config: &SamplingConfig,
) -> Result<SampledLayer> {
    config.validate()?;
    let (n, d) = points.shape();
    let mut weights = DMatrix::zeros(pairs.len(), d);
    let mut biases = DVector::zeros(pairs.len());
    let mut provenance = Vec::with_capacity(pairs.len());
    for (m, &(i, j)) in pairs.iter().enumerate() {
        if i >= n || j >= n {
            return Err(Error::InvalidArgument(alloc::format!(
                "pair ({i}, {j}) out of range for {n} points"
            )));
        }
        let from: Vec<f64> = points.row(i).iter().copied().collect();
        let to: Vec<f64> = points.row(j).iter().copied().collect();
        let dist_sq: f64 = from.iter().zip(&to).map(|(a, b)| (b - a) * (b - a)).sum();
        if libm::sqrt(dist_sq) < config.min_pair_distance {
            return Err(Error::DegeneratePairs {
                min_distance: config.min_pair_distance,
            });
        }
        let mut dot = 0.0;
        for k in 0..d {
            let w = config.s1 * (to[k] - from[k]) / dist_sq;
            weights[(m, k)] = w;
            dot += w * from[k];
        }
        biases[m] = -dot + config.s2;
        provenance.push(SampledPair { i, j, from, to });
    }
    Ok(SampledLayer {
        weights,
        biases,
        activation: config.activation,
        provenance: Some(provenance),
    })
}

/// Sample pairs and construct the layer in one go.
pub fn swim_layer<R: Rng + ?Sized>(
    points: &DMatrix<f64>,
    targets: Option<&DMatrix<f64>>,
    config: &SamplingConfig,
    rng: &mut R,
) -> Result<SampledLayer> {
    config.validate()?;
    let pairs = sample_pairs(
        points,
        targets,
        config.width,
        config.density,
        config.min_pair_distance,
        rng,
    )?;
    construct_layer(points, &pairs, config)
}

/// Data-agnostic baseline: weights i.i.d. standard normal, biases i.i.d.
/// uniform on `[-1, 1]`.
pub fn gaussian_layer<R: Rng + ?Sized>(
    input_dim: usize,
    width: usize,
    activation: Activation,
    rng: &mut R,
) -> Result<SampledLayer> {
    if input_dim == 0 || width == 0 {
        return Err(Error::InvalidArgument(
            "gaussian layer needs positive input dimension and width".into(),
        ));
    }
    let mut weights = DMatrix::zeros(width, input_dim);
    for m in 0..width {
        for k in 0..input_dim {
            weights[(m, k)] = StandardNormal.sample(rng);
        }
    }
    let bias_law = Uniform::new_inclusive(-1.0, 1.0).expect("valid bounds");
    let biases = DVector::from_fn(width, |_, _| bias_law.sample(rng));
    Ok(SampledLayer {
        weights,
        biases,
        activation,
        provenance: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};
    use approx::assert_relative_eq;
    use nalgebra::dmatrix;

    fn rng() -> crate::rng::Rng {
        stream(11, Stream::Custom(0))
    }

    #[test]
    fn single_pair_is_returned() {
        let pts = dmatrix![0.0; 1.0];
        let pairs = sample_pairs(&pts, None, 1, Density::Uniform, 1e-10, &mut rng()).unwrap();
        assert_eq!(pairs, [(0, 1)]);
    }

    #[test]
    fn duplicate_points_are_never_paired() {
        let pts = dmatrix![0.0; 0.0; 1.0];
        let mut r = rng();
        for _ in 0..200 {
            let pairs = sample_pairs(&pts, None, 2, Density::Uniform, 1e-10, &mut r).unwrap();
            assert!(!pairs.contains(&(0, 1)));
        }
        assert!(matches!(
            sample_pairs(&pts, None, 3, Density::Uniform, 1e-10, &mut r),
            Err(Error::InsufficientPairs { requested: 3, available: 2 })
        ));
    }

    #[test]
    fn sampling_errors() {
        let same = DMatrix::from_element(5, 2, 1.5);
        assert!(matches!(
            sample_pairs(&same, None, 1, Density::Uniform, 1e-10, &mut rng()),
            Err(Error::DegeneratePairs { .. })
        ));
        let pts = dmatrix![0.0; 1.0];
        assert_eq!(
            sample_pairs(&pts, None, 1, Density::GradientWeighted, 1e-10, &mut rng()),
            Err(Error::MissingTargets)
        );
        let big_same = DMatrix::from_element(2000, 1, 0.25);
        assert!(matches!(
            sample_pairs(&big_same, None, 3, Density::Uniform, 1e-10, &mut rng()),
            Err(Error::DegeneratePairs { .. })
        ));
    }

    #[test]
    fn zero_gradient_pairs_are_skipped_until_exhausted() {
        let pts = dmatrix![0.0; 1.0; 2.0];
        let targets = dmatrix![0.0; 0.0; 10.0];
        let mut r = rng();
        for _ in 0..100 {
            let pairs =
                sample_pairs(&pts, Some(&targets), 2, Density::GradientWeighted, 1e-10, &mut r)
                    .unwrap();
            assert!(!pairs.contains(&(0, 1)));
        }
        let all =
            sample_pairs(&pts, Some(&targets), 3, Density::GradientWeighted, 1e-10, &mut r).unwrap();
        assert_eq!(all.len(), 3);
    }

    #[test]
    fn constant_targets_fall_back_to_uniform() {
        let pts = dmatrix![0.0; 1.0; 2.0];
        let targets = dmatrix![4.0; 4.0; 4.0];
        let pairs =
            sample_pairs(&pts, Some(&targets), 3, Density::GradientWeighted, 1e-10, &mut rng())
                .unwrap();
        let mut sorted = pairs.clone();
        sorted.sort();
        assert_eq!(sorted, [(0, 1), (0, 2), (1, 2)]);
    }

    #[test]
    fn large_pools_are_subsampled() {
        let pts = DMatrix::from_fn(3000, 2, |i, j| (i as f64 * 0.01 + j as f64).sin());
        let targets = pts.map(|v| v * v);
        let mut r = rng();
        let uniform = sample_pairs(&pts, None, 50, Density::Uniform, 1e-10, &mut r).unwrap();
        let weighted =
            sample_pairs(&pts, Some(&targets), 50, Density::GradientWeighted, 1e-10, &mut r)
                .unwrap();
        for pairs in [uniform, weighted] {
            let set: BTreeSet<_> = pairs.iter().copied().collect();
            assert_eq!(set.len(), 50);
            assert!(pairs.iter().all(|&(i, j)| i < j && j < 3000));
        }
    }

    #[test]
    fn construct_examples() {
        let cfg = SamplingConfig::new(1, Activation::Tanh, Density::Uniform);
        let layer = construct_layer(&dmatrix![0.0, 0.0; 2.0, 0.0], &[(0, 1)], &cfg).unwrap();
        assert_relative_eq!(layer.weights()[(0, 0)], 0.5);
        assert_relative_eq!(layer.weights()[(0, 1)], 0.0);
        assert_relative_eq!(layer.biases()[0], 0.0);
        assert_eq!(layer.apply(&[0.0, 0.0]).unwrap(), [0.0]);

        let layer = construct_layer(&dmatrix![1.0, 1.0; 1.0, 3.0], &[(0, 1)], &cfg).unwrap();
        assert_relative_eq!(layer.weights()[(0, 0)], 0.0);
        assert_relative_eq!(layer.weights()[(0, 1)], 0.5);
        assert_relative_eq!(layer.biases()[0], -0.5);
        assert_eq!(layer.apply(&[1.0, 1.0]).unwrap(), [0.0]);

        let prov = layer.provenance().unwrap();
        assert_eq!(prov[0].from, [1.0, 1.0]);
        assert_eq!(prov[0].to, [1.0, 3.0]);
    }

    #[test]
    fn construct_rejects_degenerate_pair() {
        let cfg = SamplingConfig::new(1, Activation::Tanh, Density::Uniform);
        assert!(matches!(
            construct_layer(&dmatrix![1.0; 1.0], &[(0, 1)], &cfg),
            Err(Error::DegeneratePairs { .. })
        ));
        assert!(construct_layer(&dmatrix![1.0; 2.0], &[(0, 5)], &cfg).is_err());
    }

    #[test]
    fn gaussian_layer_statistics() {
        let layer = gaussian_layer(2, 1000, Activation::Tanh, &mut rng()).unwrap();
        let w = layer.weights();
        let n = w.len() as f64;
        let mean = w.iter().sum::<f64>() / n;
        let var = w.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        assert!(mean.abs() <= 0.1, "mean {mean}");
        assert!((var - 1.0).abs() <= 0.15, "variance {var}");
        assert!(layer.biases().iter().all(|b| (-1.0..=1.0).contains(b)));
        assert!(layer.provenance().is_none());

        let again = gaussian_layer(2, 1000, Activation::Tanh, &mut rng()).unwrap();
        assert_eq!(layer, again);
        assert!(gaussian_layer(0, 3, Activation::Tanh, &mut rng()).is_err());
    }

    #[test]
    fn apply_examples() {
        let pts = dmatrix![1.0, -2.0; 0.5, 3.0];
        let id = SampledLayer::identity(2);
        assert_eq!(id.apply_rows(&pts).unwrap(), pts);

        let zero = SampledLayer::from_parts(DMatrix::zeros(3, 2), DVector::zeros(3), Activation::Tanh)
            .unwrap();
        assert!(zero.apply_rows(&pts).unwrap().iter().all(|v| *v == 0.0));

        let one = SampledLayer::from_parts(dmatrix![0.5, 0.0], DVector::zeros(1), Activation::Tanh)
            .unwrap();
        assert_relative_eq!(one.apply(&[2.0, 0.0]).unwrap()[0], 0.761594, epsilon = 1e-6);
        assert!(one.apply(&[1.0]).is_err());
        assert!(one.apply_rows(&DMatrix::zeros(2, 3)).is_err());

        let cols = one.apply_columns(&pts.transpose()).unwrap();
        let rows = one.apply_rows(&pts).unwrap();
        assert_eq!(cols, rows.transpose());
    }

    #[test]
    fn relu_clips_negative_preactivations() {
        let layer =
            SampledLayer::from_parts(dmatrix![1.0; -1.0], DVector::zeros(2), Activation::Relu)
                .unwrap();
        assert_eq!(layer.apply(&[2.0]).unwrap(), [2.0, 0.0]);
    }
}
