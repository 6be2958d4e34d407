//! Open-world evaluation: Hungarian label alignment, seen/novel/all accuracy
//! and NMI.

use std::fmt;

use crate::error::{Error, Result};
use crate::numerics::Matrix;

#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// `columns[row]` is the column matched to `row`.
    pub columns: Vec<usize>,
    pub total_weight: f64,
}

/// Maximum-weight perfect matching. Rectangular inputs are zero-padded to
/// square; matches to padding columns are reported as indices past
/// `weights.cols()`.
///
/// Shortest augmenting paths with row/column potentials, `O(n³)`.
pub fn hungarian(weights: &Matrix) -> Result<Assignment> {
    if !weights.is_finite() {
        return Err(Error::InvalidArgument("assignment weights must be finite".into()));
    }
    let n = weights.rows().max(weights.cols());
    if n == 0 {
        return Ok(Assignment {
            columns: Vec::new(),
            total_weight: 0.0,
        });
    }
    let cost = |i: usize, j: usize| -> f64 {
        if i < weights.rows() && j < weights.cols() {
            -weights[(i, j)]
        } else {
            0.0
        }
    };

    // 1-based potentials; index 0 is the virtual root
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut col_owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for row in 1..=n {
        col_owner[0] = row;
        let mut j0 = 0;
        let mut min_to = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = col_owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let reduced = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if reduced < min_to[j] {
                    min_to[j] = reduced;
                    way[j] = j0;
                }
                if min_to[j] < delta {
                    delta = min_to[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[col_owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    min_to[j] -= delta;
                }
            }
            j0 = j1;
            if col_owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            col_owner[j0] = col_owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut columns = vec![0; n];
    for j in 1..=n {
        columns[col_owner[j] - 1] = j - 1;
    }
    columns.truncate(weights.rows());
    let total_weight = columns
        .iter()
        .enumerate()
        .filter(|&(_, &j)| j < weights.cols())
        .map(|(i, &j)| weights[(i, j)])
        .sum();
    Ok(Assignment {
        columns,
        total_weight,
    })
}

fn confusion(pred: &[usize], truth: &[usize], pred_classes: usize, truth_classes: usize) -> Matrix {
    let mut c = Matrix::zeros(pred_classes, truth_classes);
    for (&p, &t) in pred.iter().zip(truth) {
        c[(p, t)] += 1.0;
    }
    c
}

/// Accuracy after the best one-to-one relabeling of `pred` onto `truth`.
pub fn aligned_accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::Shape("prediction and truth lengths differ".into()));
    }
    if pred.is_empty() {
        return Err(Error::InvalidArgument("empty evaluation set".into()));
    }
    let pk = pred.iter().max().unwrap() + 1;
    let tk = truth.iter().max().unwrap() + 1;
    let a = hungarian(&confusion(pred, truth, pk, tk))?;
    Ok(a.total_weight / pred.len() as f64)
}

/// Which predicted classes novel ground-truth classes may align to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NovelAlignment {
    #[default]
    AnyPredicted,
    NovelPredictedOnly,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalReport {
    pub seen_acc: Option<f64>,
    pub novel_acc: Option<f64>,
    pub all_acc: f64,
    pub novel_nmi: Option<f64>,
}

impl EvalReport {
    pub const CSV_HEADER: &'static str = "seen_acc,novel_acc,all_acc,novel_nmi";

    pub fn csv_row(&self) -> String {
        let f = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        format!(
            "{},{},{:.6},{}",
            f(self.seen_acc),
            f(self.novel_acc),
            self.all_acc,
            f(self.novel_nmi)
        )
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let pct = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{:.2}%", 100.0 * x));
        writeln!(f, "seen accuracy   {}", pct(self.seen_acc))?;
        writeln!(f, "novel accuracy  {}", pct(self.novel_acc))?;
        writeln!(f, "all accuracy    {}", pct(Some(self.all_acc)))?;
        write!(f, "novel NMI       {}", self.novel_nmi.map_or("n/a".to_string(), |x| format!("{x:.4}")))
    }
}

pub fn evaluate(predictions: &[usize], truth: &[usize], known_classes: usize) -> Result<EvalReport> {
    evaluate_with(predictions, truth, known_classes, NovelAlignment::default())
}

/// Seen accuracy is read directly; novel and overall accuracy go through
/// Hungarian alignment; NMI is computed on novel-class samples.
pub fn evaluate_with(
    predictions: &[usize],
    truth: &[usize],
    known_classes: usize,
    novel_alignment: NovelAlignment,
) -> Result<EvalReport> {
    if predictions.len() != truth.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} ground-truth labels",
            predictions.len(),
            truth.len()
        )));
    }
    if truth.is_empty() {
        return Err(Error::InvalidArgument("empty evaluation set".into()));
    }
    let classes = predictions
        .iter()
        .chain(truth)
        .max()
        .map_or(0, |m| m + 1)
        .max(known_classes);

    let seen: Vec<usize> = (0..truth.len()).filter(|&i| truth[i] < known_classes).collect();
    let novel: Vec<usize> = (0..truth.len()).filter(|&i| truth[i] >= known_classes).collect();

    let seen_acc = (!seen.is_empty()).then(|| {
        seen.iter().filter(|&&i| predictions[i] == truth[i]).count() as f64 / seen.len() as f64
    });

    let all = hungarian(&confusion(predictions, truth, classes, classes))?;
    let all_acc = all.total_weight / truth.len() as f64;

    let (novel_acc, novel_nmi) = if novel.is_empty() {
        (None, None)
    } else {
        let novel_classes = classes - known_classes;
        let mut c = Matrix::zeros(classes, novel_classes);
        for &i in &novel {
            c[(predictions[i], truth[i] - known_classes)] += 1.0;
        }
        if novel_alignment == NovelAlignment::NovelPredictedOnly {
            for p in 0..known_classes {
                c.row_mut(p).fill(0.0);
            }
        }
        let a = hungarian(&c)?;
        let pn: Vec<usize> = novel.iter().map(|&i| predictions[i]).collect();
        let tn: Vec<usize> = novel.iter().map(|&i| truth[i]).collect();
        (Some(a.total_weight / novel.len() as f64), Some(nmi(&pn, &tn)?))
    };

    Ok(EvalReport {
        seen_acc,
        novel_acc,
        all_acc,
        novel_nmi,
    })
}

fn entropy(counts: &[f64], n: f64) -> f64 {
    counts
        .iter()
        .filter(|&&c| c > 0.0)
        .map(|&c| {
            let p = c / n;
            -p * p.ln()
        })
        .sum()
}

/// Mutual information normalized by the arithmetic mean of the two
/// entropies. Two single-cluster labelings score 1.
pub fn nmi(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("label lengths {} and {}", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(Error::InvalidArgument("nmi of empty labelings".into()));
    }
    let ka = a.iter().max().unwrap() + 1;
    let kb = b.iter().max().unwrap() + 1;
    let joint = confusion(a, b, ka, kb);
    let n = a.len() as f64;
    let row_sums: Vec<f64> = joint.iter_rows().map(|r| r.iter().sum()).collect();
    let col_sums: Vec<f64> = (0..kb).map(|j| (0..ka).map(|i| joint[(i, j)]).sum()).collect();
    let (ha, hb) = (entropy(&row_sums, n), entropy(&col_sums, n));
    if ha == 0.0 && hb == 0.0 {
        return Ok(1.0);
    }
    let mut mi = 0.0;
    for i in 0..ka {
        for j in 0..kb {
            let c = joint[(i, j)];
            if c > 0.0 {
                mi += c / n * (c * n / (row_sums[i] * col_sums[j])).ln();
            }
        }
    }
    Ok((mi / (0.5 * (ha + hb))).clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hungarian_examples() {
        let w = Matrix::from_rows(&[[5.0, 1.0], [1.0, 5.0]]).unwrap();
        let a = hungarian(&w).unwrap();
        assert_eq!(a.columns, vec![0, 1]);
        assert_eq!(a.total_weight, 10.0);

        let w = Matrix::from_rows(&[[1.0, 2.0], [2.0, 1.0]]).unwrap();
        let a = hungarian(&w).unwrap();
        assert_eq!(a.columns, vec![1, 0]);
        assert_eq!(a.total_weight, 4.0);
    }

    #[test]
    fn hungarian_pads_rectangles() {
        let w = Matrix::from_rows(&[[1.0, 9.0, 2.0]]).unwrap();
        let a = hungarian(&w).unwrap();
        assert_eq!(a.columns, vec![1]);
        assert_eq!(a.total_weight, 9.0);
        let tall = w.transpose();
        assert_eq!(hungarian(&tall).unwrap().total_weight, 9.0);
        assert!(hungarian(&Matrix::from_rows(&[[f64::NAN]]).unwrap()).is_err());
    }

    #[test]
    fn evaluate_identity_and_relabeling() {
        let truth = vec![0, 1, 2, 3, 4, 2, 3, 4, 0, 1];
        let r = evaluate(&truth, &truth, 2).unwrap();
        assert_eq!((r.seen_acc, r.novel_acc, r.all_acc, r.novel_nmi), (Some(1.0), Some(1.0), 1.0, Some(1.0)));

        let cyc: Vec<usize> = truth.iter().map(|&t| if t >= 2 { 2 + (t - 2 + 1) % 3 } else { t }).collect();
        let r = evaluate(&cyc, &truth, 2).unwrap();
        assert_eq!(r.seen_acc, Some(1.0));
        assert_eq!(r.novel_acc, Some(1.0));
        assert!((r.novel_nmi.unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(r.all_acc, 1.0);
    }

    #[test]
    fn evaluate_errors_and_absent_fields() {
        assert!(evaluate(&[], &[], 2).is_err());
        assert!(evaluate(&[0], &[0, 1], 2).is_err());
        let r = evaluate(&[0, 1, 1], &[0, 1, 1], 2).unwrap();
        assert_eq!(r.novel_acc, None);
        assert_eq!(r.novel_nmi, None);
        assert_eq!(r.csv_row(), "1.000000,,1.000000,");
    }

    #[test]
    fn restricted_alignment_excludes_seen_columns() {
        // every novel sample predicted as seen class 0
        let truth = [0, 2, 2, 3];
        let pred = [0, 0, 0, 0];
        let open = evaluate_with(&pred, &truth, 2, NovelAlignment::AnyPredicted).unwrap();
        assert_eq!(open.novel_acc, Some(2.0 / 3.0));
        let strict = evaluate_with(&pred, &truth, 2, NovelAlignment::NovelPredictedOnly).unwrap();
        assert_eq!(strict.novel_acc, Some(0.0));
    }

    #[test]
    fn nmi_examples() {
        assert!((nmi(&[0, 1, 2, 1], &[0, 1, 2, 1]).unwrap() - 1.0).abs() < 1e-12);
        assert!((nmi(&[0, 0, 1, 1], &[1, 1, 0, 0]).unwrap() - 1.0).abs() < 1e-12);
        assert!(nmi(&[0, 0, 1, 1], &[0, 1, 0, 1]).unwrap().abs() < 1e-12);
        assert_eq!(nmi(&[3, 3], &[0, 0]).unwrap(), 1.0);
        assert_eq!(nmi(&[0, 1], &[0, 0]).unwrap(), 0.0);
        assert!(nmi(&[0], &[0, 1]).is_err());
    }
}
