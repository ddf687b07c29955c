//! Cross-module invariants that need full solves: stability of the solution
//! in the driver metric, and the elliptic lower bound on the reduced
//! Malliavin matrix.

use nalgebra::{DMatrix, DVector};
use roughsde::fields::{FieldForm, VectorField, VectorFieldSet};
use roughsde::grid::{generate_brownian, generate_fbm, TimeGrid};
use roughsde::malliavin::{reduced_malliavin_matrix, solve_flows, symmetric_eigenvalues_ascending};
use roughsde::rough::{canonical_lift, rough_distance};
use roughsde::rsde::solve_rsde;

// Replacing the driver by a finer piecewise-linear approximation of the same
// sample shrinks the solution gap proportionally to the rough distance
// (within a factor 3).
#[test]
fn solution_gap_tracks_rough_distance() {
    let n = 1 << 10;
    let grid = TimeGrid::new(1.0, n).unwrap();
    // The distance between a dyadic approximation and the finest lift decays
    // like block^{H - alpha}; alpha well below H keeps that rate visible.
    let alpha = 0.25;
    let hurst = 0.45;
    let vf = VectorFieldSet::new(
        VectorField::analytic(FieldForm::SigmoidMix {
            amplitude: DVector::from_element(1, 0.3),
            weights: DMatrix::from_element(1, 1, 0.9),
            phase: DVector::from_element(1, 0.2),
        })
        .unwrap(),
        vec![VectorField::analytic(FieldForm::SineMix {
            amplitude: DVector::from_element(1, 0.4),
            weights: DMatrix::from_element(1, 1, 0.8),
            phase: DVector::from_element(1, 0.4),
        })
        .unwrap()],
        vec![VectorField::analytic(FieldForm::SigmoidMix {
            amplitude: DVector::from_element(1, 0.6),
            weights: DMatrix::from_element(1, 1, 1.1),
            phase: DVector::zeros(1),
        })
        .unwrap()],
    )
    .unwrap();

    let z_sample = generate_fbm(grid, 1, hurst, 99).unwrap();
    let finest = canonical_lift(&z_sample, hurst);
    let trials = 16;
    let x0 = DVector::from_element(1, 0.4);

    let mut rows = Vec::new();
    for level in [4usize, 9] {
        let block = n >> level;
        let approx = z_sample.piecewise_linear_coarse_approximation(block).unwrap();
        let lift = canonical_lift(&approx, hurst);
        let rho = rough_distance(&lift, &finest, alpha).unwrap();
        let mut acc = 0.0;
        for trial in 0..trials {
            let b = generate_brownian(grid, 1, 40_000 + trial).unwrap();
            let exact = solve_rsde(&vf, &x0, &b, &finest).unwrap();
            let approx_sol = solve_rsde(&vf, &x0, &b, &lift).unwrap();
            acc += (exact.terminal() - approx_sol.terminal()).norm_squared();
        }
        rows.push((rho, (acc / trials as f64).sqrt()));
    }

    let (rho_coarse, gap_coarse) = rows[0];
    let (rho_fine, gap_fine) = rows[1];
    let distance_ratio = rho_fine / rho_coarse;
    assert!(
        (0.3..=0.7).contains(&distance_ratio),
        "expected the finer approximation to roughly halve the distance: {rows:?}"
    );
    let gap_ratio = gap_fine / gap_coarse;
    assert!(
        gap_ratio <= 3.0 * distance_ratio,
        "gap ratio {gap_ratio:.3} vs 3x distance ratio {:.3} ({rows:?})",
        3.0 * distance_ratio
    );
}

// Uniformly elliptic diffusion (sigma sigma^T >= c Id with c = 1): the
// smallest eigenvalue of C_t stays above c t / 2 across an ensemble.
#[test]
fn elliptic_reduced_matrix_lower_bound() {
    let n = 1 << 10;
    let grid = TimeGrid::new(1.0, n).unwrap();
    let vf = VectorFieldSet::new(
        VectorField::analytic(FieldForm::SigmoidMix {
            amplitude: DVector::from_element(1, 0.3),
            weights: DMatrix::from_element(1, 1, 0.9),
            phase: DVector::from_element(1, 0.1),
        })
        .unwrap(),
        vec![VectorField::constant(DVector::from_element(1, 1.0))],
        vec![VectorField::zero(1)],
    )
    .unwrap();
    let z = canonical_lift(&generate_brownian(grid, 1, 7).unwrap(), 0.45);
    let x0 = DVector::from_element(1, 0.2);

    for trial in 0..100u64 {
        let b = generate_brownian(grid, 1, 50_000 + trial).unwrap();
        let sol = solve_rsde(&vf, &x0, &b, &z).unwrap();
        let flows = solve_flows(&vf, &sol, &b, &z).unwrap();
        for t_idx in [256usize, 512, n] {
            let c = reduced_malliavin_matrix(&flows, &vf, &sol, t_idx).unwrap();
            let min_eig = symmetric_eigenvalues_ascending(&c)[0];
            let t = grid.node(t_idx);
            assert!(
                min_eig >= 0.5 * t,
                "trial {trial}, t {t}: min eigenvalue {min_eig} < {}",
                0.5 * t
            );
        }
    }
}
