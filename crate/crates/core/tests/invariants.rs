//! Property tests for the structural invariants: marginal identities of
//! calibrated matrices, tweak mass conservation, posterior simplex
//! preservation, projection membership and serialization round-trips.

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use randthin::calibrate::{iterative_scaling, CalibrationSettings};
use randthin::dynamics::{bayes_update_weights, InfoProcessParams};
use randthin::io;
use randthin::marking::{min_eigenvalue, project_orthogonal, project_psd};
use randthin::sensitivity::tweak_name;
use randthin::tail::{pmf_to_tail, tail_to_pmf};
use randthin::tdmatrix::{conditional_to_joint, joint_to_conditional, TdMatrixSet};
use randthin::tail::TailCurve;
use randthin::MaturityGrid;

fn simplexish(n: usize) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(0.05f64..1.0, n).prop_map(|v| {
        let s: f64 = v.iter().sum();
        v.into_iter().map(|x| x / s).collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pmf_recumulation_recovers_tail(mut w in proptest::collection::vec(0.0f64..1.0, 2..12)) {
        // Sort decreasing and prepend the structural 1.
        w.sort_by(|a, b| b.total_cmp(a));
        let mut row = vec![1.0];
        row.extend(w);
        let rho = tail_to_pmf(&row).unwrap();
        prop_assert!((rho.sum() - 1.0).abs() < 1e-12);
        let back = pmf_to_tail(&rho);
        for (a, b) in row.iter().zip(back.iter()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn scaling_preserves_support_and_column_sums(
        dw in proptest::collection::vec(0.001f64..0.05, 4..10),
        raw_q in proptest::collection::vec(0.05f64..1.0, 4..10),
        prior_seed in proptest::collection::vec(0.01f64..1.0, 100),
    ) {
        let n = dw.len().min(raw_q.len());
        let dw = DVector::from_iterator(n, dw.into_iter().take(n));
        let raw = DVector::from_iterator(n, raw_q.into_iter().take(n));
        let dq = &raw * (dw.sum() / raw.sum());
        let mut prior = DMatrix::from_fn(n, n, |i, j| prior_seed[(i * n + j) % prior_seed.len()]);
        prior[(0, 1.min(n - 1))] = 0.0;
        let out = iterative_scaling(&prior, &dq, &dw, &CalibrationSettings::default()).unwrap();
        prop_assert_eq!(out.matrix[(0, 1.min(n - 1))], 0.0);
        prop_assert!(out.matrix.iter().all(|&v| v >= 0.0));
        for j in 0..n {
            prop_assert!((out.matrix.column(j).sum() - 1.0).abs() < 1e-10);
        }
        // Row constraints at the solver tolerance.
        for i in 0..n {
            let achieved: f64 = (0..n).map(|j| out.matrix[(i, j)] * dw[j]).sum();
            prop_assert!((achieved - dq[i]).abs() / dq[i].max(1e-12) < 1e-8);
        }
    }

    #[test]
    fn conditional_joint_round_trip(
        cols in proptest::collection::vec(0.05f64..1.0, 9),
        incs in proptest::collection::vec(0.001f64..0.3, 3),
    ) {
        let n = 3;
        let mut p = DMatrix::from_fn(n, n, |i, j| cols[i * n + j]);
        for j in 0..n {
            let s = p.column(j).sum();
            p.column_mut(j).scale_mut(1.0 / s);
        }
        let dw = DVector::from_vec(incs);
        let joint = conditional_to_joint(&p, &dw).unwrap();
        let back = joint_to_conditional(&joint, &dw).unwrap();
        prop_assert!((&back - &p).abs().max() < 1e-12);
        // Column marginals of the joint matrix are the increments.
        for j in 0..n {
            prop_assert!((joint.column(j).sum() - dw[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn tweak_conserves_mass_and_first_order_identity(
        cols in proptest::collection::vec(0.05f64..1.0, 16),
        eps in 0.0001f64..0.1,
    ) {
        let n = 4;
        let mut p = DMatrix::from_fn(n, n, |i, j| cols[i * n + j]);
        for j in 0..n {
            let s = p.column(j).sum();
            p.column_mut(j).scale_mut(1.0 / s);
        }
        let mut rows = DMatrix::zeros(1, n + 1);
        rows[(0, 0)] = 1.0;
        for j in 1..=n {
            rows[(0, j)] = 0.4 * 0.5f64.powi(j as i32 - 1);
        }
        let grid = MaturityGrid::new(vec![0.0, 1.0]).unwrap();
        let tails = TailCurve::new(rows, grid).unwrap();
        let names = (0..n).map(|i| format!("P{i}")).collect();
        let set = TdMatrixSet::from_conditional(names, vec![p], tails).unwrap();
        for name in 0..n {
            let tw = tweak_name(&set, name, eps, 1).unwrap();
            prop_assert!((tw.delta_q - tw.delta_w.sum()).abs() < 1e-14);
            // dP = w dp + p dw entrywise on the tweaked row.
            let cond = set.conditional(1);
            let joint = set.joint(1);
            let dw_row = set.tails().increments(1);
            for j in 0..n {
                let lhs = eps * joint[(name, j)];
                let rhs = dw_row[j] * tw.delta_p[(name, j)] + cond[(name, j)] * tw.delta_w[j];
                prop_assert!((lhs - rhs).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn bayes_update_stays_on_simplex(
        pi in simplexish(5),
        dx in proptest::collection::vec(-0.5f64..0.5, 5),
        zero_at in 0usize..5,
    ) {
        let n = 5;
        let mut pi = DVector::from_vec(pi);
        pi[zero_at] = 0.0;
        let s = pi.sum();
        pi.scale_mut(1.0 / s);
        let params = InfoProcessParams::new(DMatrix::identity(n, n), 1.0 / 52.0, None).unwrap();
        let dx = DVector::from_vec(dx);
        bayes_update_weights(&mut pi, &dx, 1.0 / 52.0, &params).unwrap();
        prop_assert!((pi.sum() - 1.0).abs() < 1e-10);
        prop_assert!(pi.iter().all(|&v| v >= 0.0));
        prop_assert_eq!(pi[zero_at], 0.0);
    }

    #[test]
    fn projections_land_in_their_sets(
        entries in proptest::collection::vec(-1.0f64..1.0, 36),
        pi in simplexish(6),
    ) {
        let n = 6;
        let a = DMatrix::from_fn(n, n, |i, j| entries[i * n + j]);
        let c = (&a + a.transpose()) * 0.5;
        let pi = DVector::from_vec(pi);
        let orth = project_orthogonal(&c, &pi);
        prop_assert!((&orth * &pi).norm() < 1e-12);
        prop_assert!((pi.transpose() * &orth).norm() < 1e-12);
        let psd = project_psd(&c).unwrap();
        prop_assert!(min_eigenvalue(&psd).unwrap() > -1e-10);
    }

    #[test]
    fn matrix_serialization_round_trips(entries in proptest::collection::vec(-1e3f64..1e3, 12)) {
        let m = DMatrix::from_fn(3, 4, |i, j| entries[i * 4 + j]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.txt");
        io::write_matrix(&path, &m).unwrap();
        let back = io::read_matrix(&path).unwrap();
        prop_assert_eq!(back, m);
    }
}
