//! Independent oracle for the analytic log-determinant: build the full
//! Jacobian of the flow by central finite differences and compare its exact
//! log|det| (closed-form 2x2 / 3x3 determinants) with the value returned by
//! the forward pass.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use flowgmm_core::flow::FlowModel;
use flowgmm_core::tensor::Matrix;

fn numeric_jacobian(model: &FlowModel, x: &[f64], h: f64) -> Vec<Vec<f64>> {
    let d = x.len();
    let mut jac = vec![vec![0.0; d]; d];
    for j in 0..d {
        let mut plus = x.to_vec();
        plus[j] += h;
        let mut minus = x.to_vec();
        minus[j] -= h;
        let fp = model.forward(&Matrix::row_matrix(&plus)).unwrap();
        let fm = model.forward(&Matrix::row_matrix(&minus)).unwrap();
        for i in 0..d {
            jac[i][j] = (fp.z.get(0, i) - fm.z.get(0, i)) / (2.0 * h);
        }
    }
    jac
}

fn det(jac: &[Vec<f64>]) -> f64 {
    match jac.len() {
        2 => jac[0][0] * jac[1][1] - jac[0][1] * jac[1][0],
        3 => {
            jac[0][0] * (jac[1][1] * jac[2][2] - jac[1][2] * jac[2][1])
                - jac[0][1] * (jac[1][0] * jac[2][2] - jac[1][2] * jac[2][0])
                + jac[0][2] * (jac[1][0] * jac[2][1] - jac[1][1] * jac[2][0])
        }
        n => panic!("no closed-form determinant for {n}x{n}"),
    }
}

#[test]
fn analytic_logdet_matches_finite_difference_jacobian() {
    let mut rng = ChaCha20Rng::seed_from_u64(42);
    let mut worst: f64 = 0.0;
    for case in 0..40 {
        let d = if case % 2 == 0 { 2 } else { 3 };
        let layers = 2 + case % 3;
        let mut model = FlowModel::new(d, layers, 8, case as u64).unwrap();
        model.randomize(1000 + case as u64, 0.6);
        let x: Vec<f64> = (0..d).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();

        let fwd = model.forward(&Matrix::row_matrix(&x)).unwrap();
        let jac = numeric_jacobian(&model, &x, 1e-6);
        let numeric = det(&jac).abs().ln();
        let err = (fwd.logdet[0] - numeric).abs();
        worst = worst.max(err);
        assert!(
            err < 1e-4,
            "case {case}: analytic {} vs numeric {numeric}",
            fwd.logdet[0]
        );
    }
    assert!(worst < 1e-4, "worst discrepancy {worst}");
}

#[test]
fn jacobian_is_triangular_under_the_coupling_mask() {
    // A single coupling layer leaves pass-through coordinates untouched, so
    // rows of the Jacobian for those coordinates are unit vectors.
    let mut model = FlowModel::new(3, 1, 8, 7).unwrap();
    model.randomize(8, 0.6);
    let x = [0.4, -0.3, 0.9];
    let jac = numeric_jacobian(&model, &x, 1e-6);
    let mask = &model.layers[0].mask;
    for i in 0..3 {
        if mask[i] == 1.0 {
            for j in 0..3 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((jac[i][j] - expect).abs() < 1e-8, "row {i}, col {j}");
            }
        }
    }
}
