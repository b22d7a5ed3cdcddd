//! Wasserstein distances between per-domain feature sets and the choice of the
//! central domain (the one with the smallest summed distance to all others).
//!
//! High-dimensional distances use sliced W₁: the average of exact 1-D W₁ over
//! random unit directions, rescaled by `1 / E|⟨u, e₁⟩|` for the dimension so
//! that a pure translation by `v` is estimated as `‖v‖`. In one dimension the
//! rescaling factor is exactly 1 and the estimator reduces to the exact value.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Exact W₁ between two empirical distributions on the line.
///
/// Computed as the quantile-function integral on the common grid of
/// multiples of `1/(n·m)`; the per-segment contributions are summed in
/// sorted order so the result does not depend on input order or sign flips.
pub fn exact_wasserstein_1d(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.is_empty() || ys.is_empty() {
        return Err(Error::InvalidArgument("Wasserstein distance of an empty sample".into()));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("Wasserstein input contains NaN or infinity".into()));
    }
    let mut x = xs.to_vec();
    let mut y = ys.to_vec();
    x.sort_by(f64::total_cmp);
    y.sort_by(f64::total_cmp);
    let (n, m) = (x.len() as u64, y.len() as u64);

    // each x carries m grid cells, each y carries n grid cells
    let mut pieces: Vec<(f64, u64)> = Vec::with_capacity(x.len() + y.len());
    let (mut i, mut j) = (0usize, 0usize);
    let (mut rx, mut ry) = (m, n);
    while i < x.len() && j < y.len() {
        let w = rx.min(ry);
        pieces.push(((x[i] - y[j]).abs(), w));
        rx -= w;
        ry -= w;
        if rx == 0 {
            i += 1;
            rx = m;
        }
        if ry == 0 {
            j += 1;
            ry = n;
        }
    }
    pieces.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let total: f64 = pieces.iter().map(|&(d, w)| d * w as f64).sum();
    Ok(total / (n * m) as f64)
}

/// `E|⟨u, e₁⟩|` for `u` uniform on the unit sphere in `dim` dimensions.
pub fn mean_abs_projection(dim: usize) -> f64 {
    assert!(dim >= 1);
    // c₁ = 1, c₂ = 2/π, c_{d+2} = c_d · d / (d + 1)
    let (mut c, mut d) = if dim % 2 == 1 {
        (1.0, 1)
    } else {
        (2.0 / std::f64::consts::PI, 2)
    };
    while d < dim {
        c *= d as f64 / (d + 1) as f64;
        d += 2;
    }
    c
}

/// `num_projections` unit directions drawn from a seeded Gaussian.
pub fn projection_directions(dim: usize, num_projections: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dirs = Array2::<f64>::zeros((num_projections, dim));
    for mut row in dirs.rows_mut() {
        loop {
            row.mapv_inplace(|_| StandardNormal.sample(&mut rng));
            let norm = row.dot(&row).sqrt();
            if norm > 1e-12 {
                row /= norm;
                break;
            }
        }
    }
    dirs
}

/// Sliced W₁ between the rows of `a` and the rows of `b`.
pub fn sliced_wasserstein(a: ArrayView2<f64>, b: ArrayView2<f64>, num_projections: usize, seed: u64) -> Result<f64> {
    if a.ncols() != b.ncols() {
        return Err(Error::Shape(format!(
            "feature sets have dimensions {} and {}",
            a.ncols(),
            b.ncols()
        )));
    }
    if a.nrows() == 0 || b.nrows() == 0 {
        return Err(Error::InvalidArgument("sliced Wasserstein of an empty sample".into()));
    }
    if num_projections == 0 || a.ncols() == 0 {
        return Err(Error::InvalidArgument("need at least one projection and one dimension".into()));
    }
    let dirs = projection_directions(a.ncols(), num_projections, seed);
    let pa = a.dot(&dirs.t());
    let pb = b.dot(&dirs.t());
    let mut mean = 0.0;
    for (p, (col_a, col_b)) in pa.columns().into_iter().zip(pb.columns()).enumerate() {
        let w = exact_wasserstein_1d(&col_a.to_vec(), &col_b.to_vec())?;
        mean += (w - mean) / (p + 1) as f64;
    }
    Ok(mean / mean_abs_projection(a.ncols()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimatorConfig {
    pub num_projections: usize,
    pub seed: u64,
    /// Per-domain row cap; larger sets are subsampled with `seed`.
    pub max_rows: usize,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            num_projections: 128,
            seed: 0,
            max_rows: 2000,
        }
    }
}

/// Symmetric matrix of estimated distances, rows/columns in `domains` order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainDistanceMatrix {
    pub domains: Vec<u32>,
    pub distances: Array2<f64>,
    pub estimator: EstimatorConfig,
}

impl DomainDistanceMatrix {
    /// Wraps a precomputed matrix after checking symmetry, zero diagonal and
    /// non-negativity.
    pub fn from_matrix(domains: Vec<u32>, distances: Array2<f64>, estimator: EstimatorConfig) -> Result<Self> {
        let k = domains.len();
        if distances.dim() != (k, k) {
            return Err(Error::Shape(format!("{k} domains but a {:?} matrix", distances.dim())));
        }
        for i in 0..k {
            if distances[[i, i]] != 0.0 {
                return Err(Error::InvalidArgument(format!("non-zero diagonal at domain {}", domains[i])));
            }
            for j in 0..k {
                let (a, b) = (distances[[i, j]], distances[[j, i]]);
                if !(a >= 0.0) || (a - b).abs() > 1e-9 {
                    return Err(Error::InvalidArgument(format!(
                        "entry ({i}, {j}) = {a} breaks symmetry or non-negativity"
                    )));
                }
            }
        }
        Ok(Self {
            domains,
            distances,
            estimator,
        })
    }

    /// Σ_{i≠c} d(c, i) for every row.
    pub fn row_sums(&self) -> Array1<f64> {
        self.distances.sum_axis(Axis(1))
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("domain");
        for d in &self.domains {
            let _ = write!(out, "\t{d}");
        }
        out.push_str("\tsum\n");
        let sums = self.row_sums();
        for (i, d) in self.domains.iter().enumerate() {
            let _ = write!(out, "{d}");
            for v in self.distances.row(i) {
                let _ = write!(out, "\t{v:.6}");
            }
            let _ = writeln!(out, "\t{:.6}", sums[i]);
        }
        out
    }
}

fn subsample(rows: &Array2<f64>, cap: usize, seed: u64, domain: u32) -> Array2<f64> {
    if rows.nrows() <= cap {
        return rows.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(crate::data_synth::derive_seed(seed, &[domain as u64]));
    let mut keep = index::sample(&mut rng, rows.nrows(), cap).into_vec();
    keep.sort_unstable();
    rows.select(Axis(0), &keep)
}

/// Distances between every pair of domains, computed once per unordered pair.
pub fn pairwise_domain_distances(features: &BTreeMap<u32, Array2<f64>>, config: &EstimatorConfig) -> Result<DomainDistanceMatrix> {
    if features.len() < 2 {
        return Err(Error::InvalidArgument("need features from at least two domains".into()));
    }
    if let Some((d, _)) = features.iter().find(|(_, f)| f.nrows() == 0) {
        return Err(Error::Data(format!("domain {d} has no feature rows")));
    }
    let domains: Vec<u32> = features.keys().copied().collect();
    let capped: Vec<Array2<f64>> = features
        .iter()
        .map(|(&d, f)| subsample(f, config.max_rows.max(1), config.seed, d))
        .collect();
    let k = domains.len();
    let pairs: Vec<(usize, usize)> = (0..k).flat_map(|i| ((i + 1)..k).map(move |j| (i, j))).collect();
    let values = pairs
        .par_iter()
        .map(|&(i, j)| sliced_wasserstein(capped[i].view(), capped[j].view(), config.num_projections, config.seed))
        .collect::<Result<Vec<f64>>>()?;
    let mut distances = Array2::<f64>::zeros((k, k));
    for (&(i, j), v) in pairs.iter().zip(values) {
        distances[[i, j]] = v;
        distances[[j, i]] = v;
    }
    Ok(DomainDistanceMatrix {
        domains,
        distances,
        estimator: *config,
    })
}

/// The domain minimizing its summed distance to all other domains; ties go to
/// the smallest domain id.
pub fn central_domain_select(matrix: &DomainDistanceMatrix) -> Result<u32> {
    if matrix.domains.len() < 2 {
        return Err(Error::InvalidArgument("central domain needs at least two domains".into()));
    }
    let sums = matrix.row_sums();
    let mut best: Option<(u32, f64)> = None;
    for (&d, &s) in matrix.domains.iter().zip(sums.iter()) {
        let better = match best {
            None => true,
            Some((bd, bs)) => s < bs || (s == bs && d < bd),
        };
        if better {
            best = Some((d, s));
        }
    }
    Ok(best.expect("non-empty").0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array};
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn one_dimensional_examples() {
        assert_eq!(exact_wasserstein_1d(&[3.0, 1.0, 2.0], &[2.0, 3.0, 1.0]).unwrap(), 0.0);
        assert_eq!(exact_wasserstein_1d(&[0.0], &[1.0]).unwrap(), 1.0);
        assert_eq!(exact_wasserstein_1d(&[0.0, 1.0], &[0.0, 3.0]).unwrap(), 1.0);
        // unequal sizes: {0} vs {0, 2} moves half the mass by 2
        assert_eq!(exact_wasserstein_1d(&[0.0], &[0.0, 2.0]).unwrap(), 1.0);
        assert!(exact_wasserstein_1d(&[], &[1.0]).is_err());
    }

    #[test]
    fn mean_abs_projection_values() {
        assert_eq!(mean_abs_projection(1), 1.0);
        assert!((mean_abs_projection(2) - 2.0 / std::f64::consts::PI).abs() < 1e-15);
        assert!((mean_abs_projection(3) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn translation_is_recovered_in_three_dims() {
        let a = array![[0.0, 0.0, 0.0], [1.0, 0.5, -0.2]];
        let shift = array![0.3, -0.4, 1.2];
        let b = &a + &shift;
        let sw = sliced_wasserstein(a.view(), b.view(), 4096, 3).unwrap();
        let norm = shift.dot(&shift).sqrt();
        assert!((sw - norm).abs() / norm < 0.05, "{sw} vs {norm}");
    }

    #[test]
    fn sliced_identity_and_1d_equality() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = Array::from_shape_fn((6, 4), |_| rng.random_range(-1.0..1.0));
        assert_eq!(sliced_wasserstein(a.view(), a.view(), 64, 1).unwrap(), 0.0);

        let x = array![[0.1], [2.0], [-0.5]];
        let y = array![[1.0], [0.3]];
        let exact = exact_wasserstein_1d(&[0.1, 2.0, -0.5], &[1.0, 0.3]).unwrap();
        for p in [1, 7, 128] {
            assert_eq!(sliced_wasserstein(x.view(), y.view(), p, 5).unwrap(), exact);
        }
        assert!(sliced_wasserstein(x.view(), a.view(), 4, 0).is_err());
    }

    #[test]
    fn table_of_source_domains_selects_the_minimum_row() {
        let d = array![
            [0.0, 0.69, 1.61, 1.37, 0.87],
            [0.69, 0.0, 1.58, 1.44, 0.72],
            [1.61, 1.58, 0.0, 1.69, 1.20],
            [1.37, 1.44, 1.69, 0.0, 1.10],
            [0.87, 0.72, 1.20, 1.10, 0.0],
        ];
        let m = DomainDistanceMatrix::from_matrix(vec![0, 1, 2, 3, 4], d, EstimatorConfig::default()).unwrap();
        assert_eq!(central_domain_select(&m).unwrap(), 4);
    }

    #[test]
    fn ties_go_to_lowest_id() {
        let d = Array2::from_shape_fn((4, 4), |(i, j)| if i == j { 0.0 } else { 0.5 });
        let m = DomainDistanceMatrix::from_matrix(vec![3, 5, 7, 9], d, EstimatorConfig::default()).unwrap();
        assert_eq!(central_domain_select(&m).unwrap(), 3);
        let two = DomainDistanceMatrix::from_matrix(vec![2, 1], array![[0.0, 0.4], [0.4, 0.0]], EstimatorConfig::default()).unwrap();
        assert_eq!(central_domain_select(&two).unwrap(), 1);
        let one = DomainDistanceMatrix::from_matrix(vec![0], array![[0.0]], EstimatorConfig::default()).unwrap();
        assert!(central_domain_select(&one).is_err());
    }

    #[test]
    fn pairwise_matches_direct_calls() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut features = BTreeMap::new();
        for d in 0..3u32 {
            features.insert(d, Array::from_shape_fn((5, 3), |_| rng.random_range(-1.0..1.0) + d as f64));
        }
        let cfg = EstimatorConfig {
            num_projections: 32,
            seed: 4,
            max_rows: 100,
        };
        let m = pairwise_domain_distances(&features, &cfg).unwrap();
        for i in 0..3u32 {
            for j in 0..3u32 {
                let expect = if i == j {
                    0.0
                } else {
                    sliced_wasserstein(features[&i].view(), features[&j].view(), 32, 4).unwrap()
                };
                assert_eq!(m.distances[[i as usize, j as usize]], expect);
            }
        }
        DomainDistanceMatrix::from_matrix(m.domains.clone(), m.distances.clone(), cfg).unwrap();
    }

    #[test]
    fn duplicated_domains_are_at_distance_zero() {
        let a = array![[0.0, 1.0], [2.0, 0.5], [1.0, 1.0]];
        let b = array![[5.0, 1.0], [3.0, 0.0]];
        let features: BTreeMap<u32, Array2<f64>> = [(0, a.clone()), (1, a), (2, b)].into_iter().collect();
        let m = pairwise_domain_distances(&features, &EstimatorConfig::default()).unwrap();
        assert_eq!(m.distances[[0, 1]], 0.0);
        assert!(m.distances[[0, 2]] > 0.0);
        assert!(pairwise_domain_distances(&features.into_iter().take(1).collect(), &EstimatorConfig::default()).is_err());
    }

    #[test]
    fn scaling_the_matrix_keeps_the_argmin() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let k = 5;
            let mut d = Array2::<f64>::zeros((k, k));
            for i in 0..k {
                for j in (i + 1)..k {
                    let v = rng.random_range(0.1..2.0);
                    d[[i, j]] = v;
                    d[[j, i]] = v;
                }
            }
            let ids: Vec<u32> = (0..k as u32).collect();
            let base = central_domain_select(&DomainDistanceMatrix::from_matrix(ids.clone(), d.clone(), EstimatorConfig::default()).unwrap()).unwrap();
            let scaled = central_domain_select(&DomainDistanceMatrix::from_matrix(ids, d * 3.5, EstimatorConfig::default()).unwrap()).unwrap();
            assert_eq!(base, scaled);
        }
    }

    #[test]
    fn estimator_variance_shrinks_with_more_projections() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let a = Array::from_shape_fn((30, 8), |_| rng.random_range(-1.0..1.0));
        let b = Array::from_shape_fn((30, 8), |_| rng.random_range(-1.0..1.0) * 1.5 + 0.2);
        let var = |p: usize| {
            let v: Vec<f64> = (0..20).map(|s| sliced_wasserstein(a.view(), b.view(), p, s).unwrap()).collect();
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (v.len() - 1) as f64
        };
        assert!(var(512) < var(8));
    }

    fn cloud(rows: usize, dim: usize) -> impl Strategy<Value = Array2<f64>> {
        proptest::collection::vec(-3.0f64..3.0, rows * dim).prop_map(move |v| Array2::from_shape_vec((rows, dim), v).unwrap())
    }

    proptest! {
        #[test]
        fn sliced_is_symmetric_and_triangular(a in cloud(5, 3), b in cloud(4, 3), c in cloud(6, 3), seed in 0u64..100) {
            let ab = sliced_wasserstein(a.view(), b.view(), 32, seed).unwrap();
            let ba = sliced_wasserstein(b.view(), a.view(), 32, seed).unwrap();
            prop_assert_eq!(ab, ba);
            let bc = sliced_wasserstein(b.view(), c.view(), 32, seed).unwrap();
            let ac = sliced_wasserstein(a.view(), c.view(), 32, seed).unwrap();
            prop_assert!(ac <= ab + bc + 1e-9);
        }

        #[test]
        fn one_dim_translation(xs in proptest::collection::vec(-5.0f64..5.0, 1..10), ys in proptest::collection::vec(-5.0f64..5.0, 1..10), c in -3.0f64..3.0) {
            let base = exact_wasserstein_1d(&xs, &ys).unwrap();
            let xs_c: Vec<f64> = xs.iter().map(|v| v + c).collect();
            let ys_c: Vec<f64> = ys.iter().map(|v| v + c).collect();
            prop_assert!((exact_wasserstein_1d(&xs_c, &ys_c).unwrap() - base).abs() < 1e-9);
            let shifted = exact_wasserstein_1d(&xs_c, &ys).unwrap();
            prop_assert!((shifted - base).abs() <= c.abs() + 1e-9);
            prop_assert!((exact_wasserstein_1d(&xs, &xs_c).unwrap() - c.abs()).abs() < 1e-9);
        }
    }
}
