//! RBF kernel feature maps over sampled anchor points.
//!
//! Every modality is first zero-centered, then mapped into an `M`-dimensional
//! feature space `κ(x) = [exp(-‖x - a_1‖² / σ), …, exp(-‖x - a_M‖² / σ)]ᵀ`
//! where the anchors `a_i` are training samples of that modality and `σ` is
//! the mean squared pairwise distance of the training set.

use nalgebra::{DMatrix, DVector, DVectorView};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// One modality's feature matrix: `d_m` rows (features) by `n` columns (samples).
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityMatrix {
    features: DMatrix<f64>,
    modality: usize,
}

impl ModalityMatrix {
    /// Wraps an already centered matrix. Use [`center_features`] for raw data.
    pub fn new(features: DMatrix<f64>, modality: usize) -> Result<Self> {
        check_matrix(&features)?;
        Ok(Self { features, modality })
    }

    pub fn features(&self) -> &DMatrix<f64> {
        &self.features
    }

    pub fn modality(&self) -> usize {
        self.modality
    }

    pub fn dim(&self) -> usize {
        self.features.nrows()
    }

    pub fn len(&self) -> usize {
        self.features.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.features.ncols() == 0
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.features
    }
}

fn check_matrix(x: &DMatrix<f64>) -> Result<()> {
    if x.nrows() == 0 || x.ncols() == 0 {
        return Err(Error::InvalidData(format!(
            "feature matrix must be non-empty, got {}x{}",
            x.nrows(),
            x.ncols()
        )));
    }
    if let Some(pos) = x.iter().position(|v| !v.is_finite()) {
        return Err(Error::InvalidData(format!(
            "non-finite entry at feature {}, sample {}",
            pos % x.nrows(),
            pos / x.nrows()
        )));
    }
    Ok(())
}

/// Subtracts the per-feature mean from every sample and returns the mean so
/// that unseen queries can be centered the same way.
pub fn center_features(x: &DMatrix<f64>, modality: usize) -> Result<(ModalityMatrix, DVector<f64>)> {
    check_matrix(x)?;
    let mean = x.column_mean();
    let mut centered = x.clone();
    for mut col in centered.column_iter_mut() {
        col -= &mean;
    }
    Ok((
        ModalityMatrix {
            features: centered,
            modality,
        },
        mean,
    ))
}

/// Kernel width: the mean squared Euclidean distance over all `n²` ordered
/// sample pairs, zero-distance diagonal included.
///
/// Computed exactly in `O(nd)` through
/// `(1/n²) Σ_{i,j} ‖x_i - x_j‖² = (2/n) Σ_i ‖x_i - x̄‖²`.
pub fn estimate_sigma(x: &ModalityMatrix) -> Result<f64> {
    let n = x.len();
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "kernel width needs at least 2 samples, got {n}"
        )));
    }
    let mean = x.features.column_mean();
    let spread: f64 = x.features.column_iter().map(|c| (c - &mean).norm_squared()).sum();
    let sigma = 2.0 * spread / n as f64;
    if !sigma.is_finite() || sigma <= 0.0 {
        return Err(Error::DegenerateKernel(
            "all samples are identical, kernel width would be zero".into(),
        ));
    }
    Ok(sigma)
}

/// Anchor set and width defining one modality's kernel feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelMap {
    anchors: DMatrix<f64>,
    sigma: f64,
    modality: usize,
}

impl KernelMap {
    pub fn new(anchors: DMatrix<f64>, sigma: f64, modality: usize) -> Result<Self> {
        if anchors.ncols() == 0 || anchors.nrows() == 0 {
            return Err(Error::InvalidArgument("kernel map needs at least one anchor".into()));
        }
        if !sigma.is_finite() || sigma <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "kernel width must be positive, got {sigma}"
            )));
        }
        check_matrix(&anchors)?;
        Ok(Self {
            anchors,
            sigma,
            modality,
        })
    }

    /// `d_m × M`, one anchor per column.
    pub fn anchors(&self) -> &DMatrix<f64> {
        &self.anchors
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn modality(&self) -> usize {
        self.modality
    }

    pub fn num_anchors(&self) -> usize {
        self.anchors.ncols()
    }

    pub fn dim(&self) -> usize {
        self.anchors.nrows()
    }

    /// Kernel vector of a single (already centered) sample.
    pub fn features_of(&self, x: DVectorView<'_, f64>) -> Result<DVector<f64>> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch(format!(
                "sample has {} features, kernel map expects {}",
                x.len(),
                self.dim()
            )));
        }
        Ok(DVector::from_iterator(
            self.num_anchors(),
            self.anchors.column_iter().map(|a| rbf(a.iter(), x.iter(), self.sigma)),
        ))
    }
}

#[inline]
fn rbf<'a>(a: impl IntoIterator<Item = &'a f64>, x: impl IntoIterator<Item = &'a f64>, sigma: f64) -> f64 {
    let dist: f64 = a.into_iter().zip(x).map(|(a, x)| (x - a) * (x - a)).sum();
    (-dist / sigma).exp()
}

/// Picks `m` distinct samples uniformly without replacement as anchors and
/// fills in the kernel width from the whole matrix.
pub fn sample_anchors(x: &ModalityMatrix, m: usize, seed: u64) -> Result<KernelMap> {
    let indices = sample_anchor_indices(x.len(), m, seed)?;
    let anchors = x.features.select_columns(indices.iter());
    let sigma = estimate_sigma(x)?;
    KernelMap::new(anchors, sigma, x.modality)
}

/// Column indices chosen by [`sample_anchors`] for a set of `n` samples.
pub fn sample_anchor_indices(n: usize, m: usize, seed: u64) -> Result<Vec<usize>> {
    if m == 0 || m > n {
        return Err(Error::InvalidArgument(format!(
            "anchor count must be in 1..={n}, got {m}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(rand::seq::index::sample(&mut rng, n, m).into_vec())
}

/// `M × n` matrix with entry `(i, j) = exp(-‖x_j - a_i‖² / σ)`.
pub fn kernel_features(map: &KernelMap, x: &ModalityMatrix) -> Result<DMatrix<f64>> {
    if x.dim() != map.dim() {
        return Err(Error::DimensionMismatch(format!(
            "modality {} has {} features, kernel map expects {}",
            x.modality,
            x.dim(),
            map.dim()
        )));
    }
    let m = map.num_anchors();
    let mut out = DMatrix::zeros(m, x.len());
    for (j, sample) in x.features.column_iter().enumerate() {
        for (i, anchor) in map.anchors.column_iter().enumerate() {
            out[(i, j)] = rbf(anchor.iter(), sample.iter(), map.sigma);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn modality(cols: &[&[f64]]) -> ModalityMatrix {
        let d = cols[0].len();
        let data: Vec<f64> = cols.iter().flat_map(|c| c.iter().copied()).collect();
        ModalityMatrix::new(DMatrix::from_column_slice(d, cols.len(), &data), 0).unwrap()
    }

    fn brute_sigma(x: &DMatrix<f64>) -> f64 {
        let n = x.ncols();
        let mut total = 0.0;
        for i in 0..n {
            for j in 0..n {
                for k in 0..x.nrows() {
                    let d = x[(k, i)] - x[(k, j)];
                    total += d * d;
                }
            }
        }
        total / (n * n) as f64
    }

    #[test]
    fn centering_small_case() {
        let x = DMatrix::from_row_slice(2, 2, &[1.0, 3.0, 2.0, 2.0]);
        let (c, mean) = center_features(&x, 0).unwrap();
        assert_eq!(c.features(), &DMatrix::from_row_slice(2, 2, &[-1.0, 1.0, 0.0, 0.0]));
        assert_eq!(mean.as_slice(), &[2.0, 2.0]);
    }

    #[test]
    fn centering_zero_mean_is_identity() {
        let x = DMatrix::from_row_slice(2, 3, &[1.0, -1.0, 0.0, 0.5, 0.5, -1.0]);
        let (c, mean) = center_features(&x, 1).unwrap();
        assert_eq!(c.features(), &x);
        assert!(mean.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn centered_rows_sum_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = DMatrix::from_fn(5, 20, |_, _| rng.random_range(-10.0..10.0));
        let (c, _) = center_features(&x, 0).unwrap();
        for row in c.features().row_iter() {
            let s: f64 = row.iter().sum();
            assert!(s.abs() < 1e-12, "row sum {s}");
        }
    }

    #[test]
    fn centering_rejects_non_finite() {
        let x = DMatrix::from_row_slice(1, 2, &[1.0, f64::NAN]);
        assert!(matches!(center_features(&x, 0), Err(Error::InvalidData(_))));
    }

    #[test]
    fn sigma_two_points() {
        assert_eq!(estimate_sigma(&modality(&[&[0.0], &[2.0]])).unwrap(), 2.0);
    }

    #[test]
    fn sigma_three_points() {
        // ordered pairs: 2·(1 + 4 + 1) / 9
        let x = modality(&[&[0.0], &[1.0], &[2.0]]);
        assert_eq!(brute_sigma(x.features()), 12.0 / 9.0);
        assert!((estimate_sigma(&x).unwrap() - 4.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn sigma_identical_samples_is_degenerate() {
        let err = estimate_sigma(&modality(&[&[3.0, 1.0], &[3.0, 1.0]])).unwrap_err();
        assert!(matches!(err, Error::DegenerateKernel(_)));
    }

    #[test]
    fn sigma_needs_two_samples() {
        assert!(estimate_sigma(&modality(&[&[1.0]])).is_err());
    }

    #[test]
    fn anchors_full_draw_is_a_permutation() {
        let mut idx = sample_anchor_indices(9, 9, 3).unwrap();
        idx.sort_unstable();
        assert_eq!(idx, (0..9).collect::<Vec<_>>());
    }

    #[test]
    fn anchors_are_deterministic_and_distinct() {
        let a = sample_anchor_indices(2100, 100, 11).unwrap();
        assert_eq!(a, sample_anchor_indices(2100, 100, 11).unwrap());
        let mut seen = std::collections::HashSet::new();
        assert!(a.iter().all(|i| *i < 2100 && seen.insert(*i)));
        assert_eq!(seen.len(), 100);
    }

    #[test]
    fn anchors_out_of_range() {
        let x = modality(&[&[0.0], &[1.0]]);
        assert!(matches!(sample_anchors(&x, 3, 0), Err(Error::InvalidArgument(_))));
        assert!(matches!(sample_anchors(&x, 0, 0), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn anchors_are_columns_of_x() {
        let x = modality(&[&[0.0, 1.0], &[2.0, 3.0], &[4.0, 5.0], &[6.0, 8.0]]);
        let map = sample_anchors(&x, 2, 5).unwrap();
        for a in map.anchors().column_iter() {
            assert!(x.features().column_iter().any(|c| c == a));
        }
        assert_eq!(map.sigma(), estimate_sigma(&x).unwrap());
    }

    #[test]
    fn kernel_scalar_values() {
        let map = KernelMap::new(DMatrix::from_element(1, 1, 0.0), 1.0, 0).unwrap();
        let k = kernel_features(&map, &modality(&[&[1.0], &[0.0]])).unwrap();
        assert!((k[(0, 0)] - 0.367_879_441_171_442_3).abs() < 1e-15);
        assert_eq!(k[(0, 1)], 1.0);
    }

    #[test]
    fn kernel_dimension_mismatch() {
        let map = KernelMap::new(DMatrix::zeros(2, 1), 1.0, 0).unwrap();
        assert!(matches!(
            kernel_features(&map, &modality(&[&[1.0]])),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn kernel_monotone_in_distance() {
        let map = KernelMap::new(DMatrix::zeros(1, 1), 2.0, 0).unwrap();
        let k = kernel_features(&map, &modality(&[&[0.5], &[1.0], &[-1.5], &[3.0]])).unwrap();
        for w in k.row(0).iter().collect::<Vec<_>>().windows(2) {
            assert!(w[0] > w[1]);
        }
    }

    fn matrix_strategy() -> impl Strategy<Value = DMatrix<f64>> {
        (1usize..5, 2usize..12).prop_flat_map(|(d, n)| {
            proptest::collection::vec(-5.0f64..5.0, d * n).prop_map(move |v| DMatrix::from_vec(d, n, v))
        })
    }

    proptest! {
        #[test]
        fn sigma_matches_pair_enumeration(x in matrix_strategy()) {
            let brute = brute_sigma(&x);
            prop_assume!(brute > 1e-9);
            let s = estimate_sigma(&ModalityMatrix::new(x, 0).unwrap()).unwrap();
            prop_assert!((s - brute).abs() <= 1e-10 * brute.max(1.0));
        }

        #[test]
        fn sigma_translation_and_scale(x in matrix_strategy(), shift in -50.0f64..50.0, c in 0.1f64..10.0) {
            let base = ModalityMatrix::new(x.clone(), 0).unwrap();
            let Ok(s) = estimate_sigma(&base) else { return Ok(()) };
            prop_assume!(s > 1e-6);
            let shifted = ModalityMatrix::new(x.add_scalar(shift), 0).unwrap();
            let scaled = ModalityMatrix::new(&x * c, 0).unwrap();
            prop_assert!((estimate_sigma(&shifted).unwrap() - s).abs() <= 1e-9 * s.max(1.0) * (1.0 + shift.abs()));
            prop_assert!((estimate_sigma(&scaled).unwrap() - c * c * s).abs() <= 1e-10 * c * c * s.max(1.0));
        }

        #[test]
        fn kernel_entries_in_unit_interval_and_equivariant(x in matrix_strategy(), seed in 0u64..1000) {
            let base = ModalityMatrix::new(x.clone(), 0).unwrap();
            prop_assume!(estimate_sigma(&base).is_ok());
            let map = sample_anchors(&base, 1 + (seed as usize) % base.len(), seed).unwrap();
            let k = kernel_features(&map, &base).unwrap();
            prop_assert!(k.iter().all(|&v| v > 0.0 && v <= 1.0));
            for (i, a) in map.anchors().column_iter().enumerate() {
                for (j, s) in base.features().column_iter().enumerate() {
                    prop_assert_eq!(k[(i, j)] == 1.0, a == s);
                }
            }
            let n = base.len();
            let perm: Vec<usize> = (0..n).map(|j| (j * 7 + seed as usize) % n).collect();
            prop_assume!({ let mut p = perm.clone(); p.sort_unstable(); p.dedup(); p.len() == n });
            let permuted = ModalityMatrix::new(x.select_columns(perm.iter()), 0).unwrap();
            let kp = kernel_features(&map, &permuted).unwrap();
            prop_assert_eq!(kp, k.select_columns(perm.iter()));
        }
    }
}
