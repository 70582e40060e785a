//! Shared test oracles, written against the problem definitions rather than
//! the library's solver or operator internals, so agreement between the two
//! paths is evidence rather than tautology.

#![allow(dead_code)]

use flipad::lasso::LassoProblem;
use flipad::linop::{ConvSpec, DenseMatrix, LinearOp};
use flipad::rng::Prng;
use flipad::tensor::Tensor;

/// Plain proximal gradient (no momentum) on the anchored lasso, with the
/// textbook-safe step `1 / (2.1 * ||G||^2)`. Converges slowly, so callers
/// hand it a generous iteration budget and treat the result as the
/// convergence oracle.
pub fn ista_solve(problem: &LassoProblem, iters: usize) -> (Tensor, f64) {
    let op = &problem.operator;
    let norm_sq = op.norm_sq_estimate(200, 777).max(1e-300);
    let step = 1.0 / (2.1 * norm_sq);
    let anchor = problem
        .anchor
        .clone()
        .reshape(op.in_shape())
        .expect("shape");
    let target = problem
        .target
        .clone()
        .reshape(op.out_shape())
        .expect("shape");
    let theta = step * problem.lambda;
    let mut z = anchor.clone();
    for _ in 0..iters {
        let r = op.apply(&z).unwrap().sub(&target);
        let g = op.adjoint(&r).unwrap().scale(2.0 * step);
        let v = z.sub(&g);
        let mut next = Vec::with_capacity(v.len());
        for (vv, av) in v.data().iter().zip(anchor.data()) {
            let d = vv - av;
            let m = d.abs() - theta;
            next.push(av + if m > 0.0 { m * d.signum() } else { 0.0 });
        }
        z = Tensor::new(v.shape().to_vec(), next).unwrap();
    }
    let obj = flipad::lasso::objective(problem, &z).unwrap();
    (z, obj)
}

/// Cyclic proximal coordinate descent on the anchored lasso for dense
/// operators. Independent of both the accelerated solver and the
/// shift-to-standard reduction, since it handles the anchor in closed form
/// per coordinate.
#[allow(clippy::needless_range_loop)] // straight-line oracle, no iterator tricks
pub fn coordinate_descent(matrix: &DenseMatrix, target: &[f64], anchor: &[f64], lambda: f64, sweeps: usize) -> Vec<f64> {
    let (rows, cols) = (matrix.rows(), matrix.cols());
    let col_norm_sq: Vec<f64> = (0..cols)
        .map(|j| (0..rows).map(|i| matrix.at(i, j) * matrix.at(i, j)).sum())
        .collect();
    let mut z = anchor.to_vec();
    // residual r = target - A z
    let mut r: Vec<f64> = (0..rows)
        .map(|i| target[i] - (0..cols).map(|j| matrix.at(i, j) * z[j]).sum::<f64>())
        .collect();
    for _ in 0..sweeps {
        for j in 0..cols {
            let a = col_norm_sq[j];
            if a == 0.0 {
                continue;
            }
            // rho = A_j^T r + a * z_j  (partial residual fit)
            let rho: f64 =
                (0..rows).map(|i| matrix.at(i, j) * r[i]).sum::<f64>() + a * z[j];
            // minimize a w^2 + 2 (a*anchor_j - rho) w + lambda |w| over w = z_j - anchor_j
            let u = rho / a - anchor[j];
            let thresh = lambda / (2.0 * a);
            let w = {
                let m = u.abs() - thresh;
                if m > 0.0 {
                    m * u.signum()
                } else {
                    0.0
                }
            };
            let z_new = anchor[j] + w;
            let delta = z_new - z[j];
            if delta != 0.0 {
                for i in 0..rows {
                    r[i] -= matrix.at(i, j) * delta;
                }
                z[j] = z_new;
            }
        }
    }
    z
}

/// Objective of the anchored lasso evaluated from raw parts.
pub fn dense_objective(matrix: &DenseMatrix, target: &[f64], anchor: &[f64], lambda: f64, z: &[f64]) -> f64 {
    let az = matrix.matvec(z);
    let res: f64 = az
        .iter()
        .zip(target)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    let l1: f64 = z
        .iter()
        .zip(anchor)
        .map(|(a, b)| (a - b).abs())
        .sum();
    res + lambda * l1
}

/// Random dense matrix with standard-normal entries.
pub fn random_dense(rows: usize, cols: usize, rng: &mut Prng) -> DenseMatrix {
    let mut m = DenseMatrix::zeros(rows, cols);
    for r in 0..rows {
        for c in 0..cols {
            m.set(r, c, rng.normal());
        }
    }
    m
}

/// A random conv spec drawn from the test grid; `in_shape` is chosen so the
/// spec conforms.
pub struct GridSpec {
    pub spec: ConvSpec,
    pub in_shape: [usize; 3],
}

/// Enumerate the randomized spec grid: stride x padding x dilation x
/// channels x transposed, with normal kernels.
pub fn spec_grid(seed: u64) -> Vec<GridSpec> {
    let mut out = Vec::new();
    let mut rng = Prng::seed_from_u64(seed);
    for &stride in &[1usize, 2] {
        for &pad in &[0usize, 1] {
            for &dil in &[1usize, 2] {
                for &(in_c, out_c) in &[(1usize, 1usize), (2, 3), (4, 2)] {
                    for &transposed in &[false, true] {
                        let k = 3;
                        let kernel = Tensor::new(
                            vec![out_c, in_c, k, k],
                            rng.normal_vec(out_c * in_c * k * k),
                        )
                        .unwrap();
                        let mut spec = ConvSpec::new(kernel)
                            .with_stride((stride, stride))
                            .with_padding((pad, pad))
                            .with_dilation((dil, dil));
                        if transposed {
                            spec = spec.transposed();
                        }
                        // pick spatial dims that conform for this geometry
                        let base = if transposed { 5 } else { 8 };
                        let mut h = base;
                        let shape = loop {
                            let candidate = [in_c, h, h];
                            if spec.output_shape(&candidate).is_ok() {
                                break candidate;
                            }
                            h += 1;
                            assert!(h < 32, "no conforming shape found");
                        };
                        out.push(GridSpec {
                            spec,
                            in_shape: shape,
                        });
                    }
                }
            }
        }
    }
    out
}

/// Largest eigenvalue of `M^T M` via a dense symmetric eigendecomposition.
pub fn dense_top_eigenvalue(m: &DenseMatrix) -> f64 {
    let a = m.to_nalgebra();
    let gram = a.transpose() * &a;
    let eig = nalgebra::SymmetricEigen::new(gram);
    eig.eigenvalues.iter().fold(0.0f64, |acc, &v| acc.max(v))
}

/// Least-squares residual `min_z ||M z - b||` via SVD.
pub fn dense_lstsq_residual(m: &DenseMatrix, b: &[f64]) -> f64 {
    let a = m.to_nalgebra();
    let rhs = nalgebra::DVector::from_column_slice(b);
    let svd = a.clone().svd(true, true);
    let sol = svd.solve(&rhs, 1e-12).expect("svd solve");
    (a * sol - rhs).norm()
}

/// Convenience constructor for a conv-backed operator.
pub fn conv_op(spec: &ConvSpec, in_shape: [usize; 3]) -> LinearOp {
    LinearOp::conv(spec.clone(), in_shape).expect("conforming spec")
}
