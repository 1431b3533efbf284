//! Similarity metrics and probability functionals on density fields.
//!
//! All integrals use the midpoint rule on the finite-volume cells, so they
//! operate directly on cell masses with no resampling.

use crate::error::{Error, Result};
use crate::fp::DensityField;

/// Direction of a tail probability query.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TailDirection {
    Below,
    Above,
}

/// Bundle of the standard density comparisons.
#[derive(Debug, Clone)]
pub struct MetricReport {
    pub bhattacharyya: f64,
    pub hellinger: f64,
    pub mean: f64,
    pub variance: f64,
}

/// Overlap coefficient `sum_i sqrt(p_i q_i)` in `[0, 1]`.
///
/// One when the densities are identical, zero when they do not overlap.
pub fn bhattacharyya(p: &DensityField, q: &DensityField) -> Result<f64> {
    check_grids(p, q)?;
    let sum: f64 = p
        .masses()
        .iter()
        .zip(q.masses())
        .map(|(a, b)| (a * b).sqrt())
        .sum();
    Ok(sum.clamp(0.0, 1.0))
}

/// Hellinger distance `sqrt(1 - bhattacharyya)` in `[0, 1]`.
pub fn hellinger(p: &DensityField, q: &DensityField) -> Result<f64> {
    Ok((1.0 - bhattacharyya(p, q)?).max(0.0).sqrt())
}

/// Tail probability with linear sub-cell splitting of the cell containing
/// the threshold (the finite-volume density is uniform within a cell).
#[derive(Debug, Clone, Copy)]
pub struct TailProbability {
    pub probability: f64,
    /// Threshold fell outside the grid; the probability was clamped to 0 or 1.
    pub clamped: bool,
}

pub fn tail_probability(p: &DensityField, threshold: f64, direction: TailDirection) -> TailProbability {
    let grid = p.grid();
    let below = if threshold <= grid.lower {
        return clamp_result(0.0, direction);
    } else if threshold >= grid.upper {
        return clamp_result(1.0, direction);
    } else {
        let cell = grid.cell_containing(threshold);
        let whole: f64 = p.masses()[..cell].iter().sum();
        let fraction = (threshold - grid.face(cell)) / grid.dx();
        whole + p.masses()[cell] * fraction
    };
    let probability = match direction {
        TailDirection::Below => below,
        TailDirection::Above => 1.0 - below,
    };
    TailProbability { probability: probability.clamp(0.0, 1.0), clamped: false }
}

fn clamp_result(below: f64, direction: TailDirection) -> TailProbability {
    let probability = match direction {
        TailDirection::Below => below,
        TailDirection::Above => 1.0 - below,
    };
    TailProbability { probability, clamped: true }
}

/// Midpoint-quadrature mean and central variance.
pub fn moments(p: &DensityField) -> (f64, f64) {
    (p.mean(), p.variance())
}

/// Full comparison report for two densities on the same grid.
pub fn metric_report(p: &DensityField, q: &DensityField) -> Result<MetricReport> {
    let b = bhattacharyya(p, q)?;
    let (mean, variance) = moments(p);
    Ok(MetricReport { bhattacharyya: b, hellinger: (1.0 - b).max(0.0).sqrt(), mean, variance })
}

fn check_grids(p: &DensityField, q: &DensityField) -> Result<()> {
    if p.grid() != q.grid() {
        return Err(Error::Metric(format!(
            "grid mismatch: [{}, {}]/{} vs [{}, {}]/{}",
            p.grid().lower,
            p.grid().upper,
            p.grid().n_cells,
            q.grid().lower,
            q.grid().upper,
            q.grid().n_cells
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fp::{density_from_normal, DensityField, Grid1D};
    use proptest::prelude::*;

    fn grid(n: usize) -> Grid1D {
        Grid1D::new(0.0, 2.0, n).unwrap()
    }

    fn uniform(n: usize) -> DensityField {
        DensityField::from_masses(grid(n), vec![1.0; n]).unwrap()
    }

    #[test]
    fn identical_densities_overlap_fully() {
        let p = density_from_normal(0.8, 1e-2, grid(200)).unwrap().field;
        let b = bhattacharyya(&p, &p).unwrap();
        assert!((b - 1.0).abs() <= 1e-12);
        assert!(hellinger(&p, &p).unwrap() <= 1e-6);
    }

    #[test]
    fn disjoint_densities_do_not_overlap() {
        let g = grid(200);
        let mut left = vec![0.0; 200];
        let mut right = vec![0.0; 200];
        for i in 0..50 {
            left[i] = 1.0;
            right[150 + i] = 1.0;
        }
        let p = DensityField::from_masses(g, left).unwrap();
        let q = DensityField::from_masses(g, right).unwrap();
        assert!(bhattacharyya(&p, &q).unwrap() <= 1e-12);
        assert!((hellinger(&p, &q).unwrap() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn gaussian_pair_matches_closed_form() {
        // equal-variance Gaussians: B = exp(-(dmu)^2 / (8 s^2))
        let g = Grid1D::new(0.0, 2.0, 2000).unwrap();
        let p = density_from_normal(0.5, 1e-2, g).unwrap().field;
        let q = density_from_normal(0.6, 1e-2, g).unwrap().field;
        let b = bhattacharyya(&p, &q).unwrap();
        let closed = (-0.125f64).exp(); // 0.8824969025845953
        assert!((b - closed).abs() < 1e-3, "B = {b} vs {closed}");
        let h = hellinger(&p, &q).unwrap();
        assert!((h - 0.3427872480349942).abs() < 1e-3);
    }

    #[test]
    fn grid_mismatch_is_an_error() {
        let p = uniform(100);
        let q = uniform(200);
        assert!(bhattacharyya(&p, &q).is_err());
    }

    #[test]
    fn uniform_tail_below_threshold() {
        let p = uniform(200);
        let t = tail_probability(&p, 0.53, TailDirection::Below);
        assert!(!t.clamped);
        assert!((t.probability - 0.265).abs() < 1e-12);
    }

    #[test]
    fn tail_at_lower_edge_is_zero() {
        let p = uniform(200);
        let t = tail_probability(&p, 0.0, TailDirection::Below);
        assert_eq!(t.probability, 0.0);
        assert!(t.clamped);
    }

    #[test]
    fn tail_outside_grid_clamps_with_flag() {
        let p = uniform(200);
        let t = tail_probability(&p, 2.5, TailDirection::Below);
        assert_eq!(t.probability, 1.0);
        assert!(t.clamped);
        let t = tail_probability(&p, -0.5, TailDirection::Above);
        assert_eq!(t.probability, 1.0);
        assert!(t.clamped);
    }

    #[test]
    fn gaussian_tail_matches_normal_cdf() {
        // P{X <= 0.53} for N(0.57, 4e-4): Phi(-2) = 0.022750131948179195
        let p = density_from_normal(0.57, 4e-4, grid(200)).unwrap().field;
        let t = tail_probability(&p, 0.53, TailDirection::Below);
        assert!((t.probability - 0.022750131948179195).abs() < 5e-4);
    }

    #[test]
    fn moments_of_discretized_normal() {
        let p = density_from_normal(0.57, 4e-4, grid(200)).unwrap().field;
        let (mean, var) = moments(&p);
        assert!((mean - 0.57).abs() < 1e-3);
        assert!((var - 4e-4).abs() < 0.1 * 4e-4);
    }

    #[test]
    fn single_cell_mass_has_zero_variance() {
        let mut masses = vec![0.0; 200];
        masses[77] = 1.0;
        let p = DensityField::from_masses(grid(200), masses).unwrap();
        let (mean, var) = moments(&p);
        assert!((mean - p.grid().center(77)).abs() < 1e-12);
        assert_eq!(var, 0.0);
    }

    #[test]
    fn report_ties_hellinger_to_bhattacharyya() {
        let p = density_from_normal(0.5, 1e-2, grid(200)).unwrap().field;
        let q = density_from_normal(0.7, 2e-2, grid(200)).unwrap().field;
        let r = metric_report(&p, &q).unwrap();
        assert!((r.hellinger - (1.0 - r.bhattacharyya).sqrt()).abs() <= 1e-12);
        assert!(r.variance >= 0.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn overlap_is_symmetric_and_bounded(
            seed_p in prop::collection::vec(0.0f64..1.0, 64),
            seed_q in prop::collection::vec(0.0f64..1.0, 64),
        ) {
            prop_assume!(seed_p.iter().sum::<f64>() > 0.0);
            prop_assume!(seed_q.iter().sum::<f64>() > 0.0);
            let g = Grid1D::new(0.0, 2.0, 64).unwrap();
            let p = DensityField::from_masses(g, seed_p).unwrap();
            let q = DensityField::from_masses(g, seed_q).unwrap();
            let pq = bhattacharyya(&p, &q).unwrap();
            let qp = bhattacharyya(&q, &p).unwrap();
            prop_assert_eq!(pq, qp);
            prop_assert!((0.0..=1.0).contains(&pq));
            let h = hellinger(&p, &q).unwrap();
            prop_assert!((0.0..=1.0).contains(&h));
            // zero distance exactly when the mass vectors agree
            if h == 0.0 {
                for (a, b) in p.masses().iter().zip(q.masses()) {
                    prop_assert!((a - b).abs() < 1e-9);
                }
            }
        }

        #[test]
        fn tails_partition_unity(
            seed in prop::collection::vec(0.0f64..1.0, 64),
            threshold in 0.01f64..1.99,
        ) {
            prop_assume!(seed.iter().sum::<f64>() > 0.0);
            let g = Grid1D::new(0.0, 2.0, 64).unwrap();
            let p = DensityField::from_masses(g, seed).unwrap();
            let below = tail_probability(&p, threshold, TailDirection::Below).probability;
            let above = tail_probability(&p, threshold, TailDirection::Above).probability;
            prop_assert!((below + above - 1.0).abs() <= 1e-12);
        }
    }
}
