//! Dot-product class posteriors with a separate softmax temperature for
//! labeled rows.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{argmax, dot, softmax_in_place, Matrix};
use crate::parallel;

#[derive(Debug, Clone, PartialEq)]
pub struct BatchProbabilities {
    /// Row-stochastic `B x (S+N)`.
    pub probs: Matrix,
    pub pseudo_labels: Vec<usize>,
    pub confidences: Vec<f64>,
}

impl BatchProbabilities {
    pub fn from_probs(probs: Matrix) -> Self {
        let pseudo_labels = probs.iter_rows().map(argmax).collect::<Vec<_>>();
        let confidences = probs
            .iter_rows()
            .zip(&pseudo_labels)
            .map(|(r, &j)| r[j])
            .collect();
        Self {
            probs,
            pseudo_labels,
            confidences,
        }
    }

    pub fn rows(&self) -> usize {
        self.probs.rows()
    }
}

fn temperature(labeled: bool, epsilon: f64) -> f64 {
    if labeled {
        epsilon
    } else {
        1.0
    }
}

fn check(z: &Matrix, centers: &Matrix, is_labeled: &[bool], epsilon: f64) -> Result<()> {
    if !(epsilon > 0.0) {
        return Err(Error::InvalidArgument(format!("epsilon must be positive, got {epsilon}")));
    }
    if z.cols() != centers.cols() {
        return Err(Error::Shape(format!(
            "embeddings have d={}, centers d={}",
            z.cols(),
            centers.cols()
        )));
    }
    if is_labeled.len() != z.rows() {
        return Err(Error::Shape(format!(
            "{} labeled flags for {} rows",
            is_labeled.len(),
            z.rows()
        )));
    }
    Ok(())
}

/// `softmax(z · centersᵀ / T)` per row, `T = epsilon` on labeled rows and 1
/// elsewhere.
pub fn predict_probs(z: &Matrix, centers: &Matrix, is_labeled: &[bool], epsilon: f64) -> Result<BatchProbabilities> {
    check(z, centers, is_labeled, epsilon)?;
    let mut logits = z.matmul_t(centers)?;
    if !logits.is_finite() {
        return Err(Error::Numerical("non-finite classifier logits".into()));
    }
    let k = logits.cols();
    parallel::for_each_row(logits.data_mut(), k, |i, row| {
        softmax_in_place(row, temperature(is_labeled[i], epsilon))
    });
    Ok(BatchProbabilities::from_probs(logits))
}

/// Backward of [`predict_probs`]: returns `(dZ, dCenters)` for an upstream
/// gradient `dP`.
pub fn probs_backward(
    probs: &BatchProbabilities,
    d_probs: &Matrix,
    z: &Matrix,
    centers: &Matrix,
    epsilon: f64,
    is_labeled: &[bool],
) -> Result<(Matrix, Matrix)> {
    check(z, centers, is_labeled, epsilon)?;
    if d_probs.shape() != probs.probs.shape() || z.rows() != probs.rows() {
        return Err(Error::Shape("probability gradient shape mismatch".into()));
    }
    let mut d_logits = d_probs.clone();
    let k = d_logits.cols();
    let p = &probs.probs;
    parallel::for_each_row(d_logits.data_mut(), k, |i, row| {
        let pi = p.row(i);
        let inner = dot(row, pi);
        let t = temperature(is_labeled[i], epsilon);
        for (g, &pv) in row.iter_mut().zip(pi) {
            *g = pv * (*g - inner) / t;
        }
    });
    let d_z = d_logits.matmul(centers)?;
    let d_centers = d_logits.t_matmul(z)?;
    Ok((d_z, d_centers))
}

/// Batch-independent prediction against stored centers.
pub fn infer(z: &Matrix, centers: &Matrix) -> Result<Vec<usize>> {
    Ok(infer_with_confidence(z, centers)?.into_iter().map(|p| p.0).collect())
}

/// Predicted class and its softmax confidence for every row.
pub fn infer_with_confidence(z: &Matrix, centers: &Matrix) -> Result<Vec<(usize, f64)>> {
    if z.cols() != centers.cols() {
        return Err(Error::Shape(format!(
            "embeddings have d={}, centers d={}",
            z.cols(),
            centers.cols()
        )));
    }
    Ok(parallel::map_indices(z.rows(), |i| {
        let mut row: Vec<f64> = centers.iter_rows().map(|c| dot(z.row(i), c)).collect();
        let j = argmax(&row);
        softmax_in_place(&mut row, 1.0);
        (j, row[j])
    }))
}

/// Writes `index,predicted_class,confidence` lines.
pub fn write_predictions(path: &Path, predictions: &[(usize, f64)]) -> Result<()> {
    let mut out = String::new();
    for (i, (class, conf)) in predictions.iter().enumerate() {
        writeln!(out, "{i},{class},{conf:.6}").unwrap();
    }
    std::fs::write(path, out).map_err(|e| Error::Io {
        path: path.into(),
        source: e,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn orthogonal_embedding_is_uniform() {
        let p = predict_probs(&m(&[&[0.0, 0.0, 1.0]]), &m(&[&[1.0, 0.0, 0.0], &[0.0, 2.0, 0.0]]), &[false], 2.0).unwrap();
        assert_eq!(p.probs.row(0), &[0.5, 0.5]);
        assert_eq!(p.pseudo_labels, vec![0]);
    }

    #[test]
    fn temperature_split() {
        // logits [ln 2, 0]
        let z = m(&[&[2f64.ln()], &[2f64.ln()]]);
        let c = m(&[&[1.0], &[0.0]]);
        let p = predict_probs(&z, &c, &[false, true], 2.0).unwrap();
        assert!((p.probs[(0, 0)] - 2.0 / 3.0).abs() < 1e-12);
        assert!((p.probs[(1, 0)] - 0.58579).abs() < 1e-4);
        assert!((p.probs[(1, 1)] - 0.41421).abs() < 1e-4);
        assert!((p.confidences[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!(predict_probs(&z, &c, &[false, true], 0.0).is_err());
    }

    #[test]
    fn zero_upstream_zero_grads() {
        let z = m(&[&[1.0, 2.0]]);
        let c = m(&[&[0.5, 0.1], &[-1.0, 0.3]]);
        let p = predict_probs(&z, &c, &[true], 2.0).unwrap();
        let (dz, dc) = probs_backward(&p, &Matrix::zeros(1, 2), &z, &c, 2.0, &[true]).unwrap();
        assert_eq!(dz.max_abs() + dc.max_abs(), 0.0);
    }

    #[test]
    fn cross_entropy_identity() {
        // loss = -log P[0]  =>  dlogits = P - onehot(0)
        let z = m(&[&[0.7, -0.2, 1.1]]);
        let c = m(&[&[1.0, 0.0, 0.5], &[0.2, 1.0, -0.3], &[-0.4, 0.6, 0.9]]);
        let p = predict_probs(&z, &c, &[false], 1.0).unwrap();
        let mut dp = Matrix::zeros(1, 3);
        dp[(0, 0)] = -1.0 / p.probs[(0, 0)];
        let (dz, _) = probs_backward(&p, &dp, &z, &c, 1.0, &[false]).unwrap();
        let mut dlogits = p.probs.clone();
        dlogits[(0, 0)] -= 1.0;
        let want = dlogits.matmul(&c).unwrap();
        for (a, b) in dz.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        // central differences on z
        let loss = |z: &Matrix| -predict_probs(z, &c, &[false], 1.0).unwrap().probs[(0, 0)].ln();
        for i in 0..3 {
            let (mut zp, mut zm) = (z.clone(), z.clone());
            zp.data_mut()[i] += 1e-5;
            zm.data_mut()[i] -= 1e-5;
            let num = (loss(&zp) - loss(&zm)) / 2e-5;
            assert!((num - dz.data()[i]).abs() / num.abs().max(1e-6) < 1e-6);
        }
    }

    #[test]
    fn unit_epsilon_removes_the_split() {
        let z = m(&[&[0.3, 0.4]]);
        let c = m(&[&[1.0, -1.0], &[0.5, 2.0]]);
        let dp = m(&[&[0.2, -0.7]]);
        let run = |labeled: bool| {
            let p = predict_probs(&z, &c, &[labeled], 1.0).unwrap();
            probs_backward(&p, &dp, &z, &c, 1.0, &[labeled]).unwrap()
        };
        let (a, b) = (run(true), run(false));
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn centers_gradient_matches_finite_differences() {
        let z = m(&[&[0.3, 0.4], &[-1.0, 0.2], &[0.8, -0.6]]);
        let c = m(&[&[1.0, -1.0], &[0.5, 2.0], &[0.1, 0.1]]);
        let labeled = [true, false, true];
        let w = m(&[&[0.2, -0.7, 0.1], &[1.0, 0.3, -0.5], &[0.0, 0.4, 0.9]]);
        let loss = |c: &Matrix| dot(predict_probs(&z, c, &labeled, 2.0).unwrap().probs.data(), w.data());
        let p = predict_probs(&z, &c, &labeled, 2.0).unwrap();
        let (_, dc) = probs_backward(&p, &w, &z, &c, 2.0, &labeled).unwrap();
        for i in 0..6 {
            let (mut cp, mut cm) = (c.clone(), c.clone());
            cp.data_mut()[i] += 1e-5;
            cm.data_mut()[i] -= 1e-5;
            let num = (loss(&cp) - loss(&cm)) / 2e-5;
            assert!((num - dc.data()[i]).abs() / num.abs().max(1e-6) < 1e-6);
        }
    }

    #[test]
    fn infer_examples() {
        let mut c = Matrix::zeros(5, 5);
        for i in 0..5 {
            c[(i, i)] = if i == 3 { 2.0 } else { 1.0 };
        }
        assert_eq!(infer(&m(&[&[0.0, 0.0, 0.0, 2.0, 0.0]]), &c).unwrap(), vec![3]);
        let same = m(&[&[1.0, 1.0], &[1.0, 1.0], &[1.0, 1.0]]);
        assert_eq!(infer(&m(&[&[0.3, -2.0], &[5.0, 1.0]]), &same).unwrap(), vec![0, 0]);
    }

    #[test]
    fn argmax_invariant_to_temperature_and_equivariant_to_center_order() {
        let z = m(&[&[0.3, 0.4], &[-1.0, 0.2]]);
        let c = m(&[&[1.0, -1.0], &[0.5, 2.0], &[0.1, 0.1]]);
        let sharp = predict_probs(&z, &c, &[true, true], 0.5).unwrap();
        let flat = predict_probs(&z, &c, &[true, true], 5.0).unwrap();
        assert_eq!(sharp.pseudo_labels, flat.pseudo_labels);
        let perm = [2, 0, 1];
        let pc = predict_probs(&z, &c.select_rows(&perm), &[false, false], 1.0).unwrap();
        let base = predict_probs(&z, &c, &[false, false], 1.0).unwrap();
        for r in 0..2 {
            for (new_col, &old_col) in perm.iter().enumerate() {
                assert!((pc.probs[(r, new_col)] - base.probs[(r, old_col)]).abs() < 1e-15);
            }
        }
    }
}
