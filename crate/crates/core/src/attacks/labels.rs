use crate::error::{Error, Result};
use crate::model::GradientSnapshot;
use crate::scalar::Scalar;

const TIE: f64 = 1e-12;

/// Index of the classifier-gradient row whose inner product with every other
/// row is non-positive. Several such rows (within `1e-12`) are resolved by
/// the smallest row sum.
pub fn extract_label_idlg<S: Scalar>(snapshot: &GradientSnapshot<S>) -> Result<usize> {
    let g = snapshot.head_grad()?;
    let (k, n) = (g.rows(), g.cols());
    let row = |i: usize| &g.data()[i * n..(i + 1) * n];
    let dot = |i: usize, j: usize| -> f64 {
        row(i)
            .iter()
            .zip(row(j))
            .map(|(a, b)| a.to_f64_lossy() * b.to_f64_lossy())
            .sum()
    };
    let candidates: Vec<usize> = (0..k)
        .filter(|&i| (0..k).filter(|&j| j != i).all(|j| dot(i, j) < TIE))
        .collect();
    match candidates.as_slice() {
        [] => Err(Error::AmbiguousLabel { candidates }),
        [only] => Ok(*only),
        _ => {
            let sum = |i: usize| row(i).iter().map(|v| v.to_f64_lossy()).sum::<f64>();
            let best = candidates.iter().map(|&i| sum(i)).fold(f64::INFINITY, f64::min);
            let at_best: Vec<usize> = candidates.iter().copied().filter(|&i| sum(i) - best < TIE).collect();
            match at_best.as_slice() {
                [only] => Ok(*only),
                _ => Err(Error::AmbiguousLabel { candidates: at_best }),
            }
        }
    }
}

/// The `batch_size` classes with the most negative classifier-bias gradient,
/// in ascending class order. Each class can be reported at most once.
pub fn restore_batch_labels<S: Scalar>(snapshot: &GradientSnapshot<S>, batch_size: usize) -> Result<Vec<usize>> {
    if batch_size == 0 {
        return Err(Error::InvalidConfig("batch size must be at least 1".into()));
    }
    let g = snapshot.head_grad()?;
    let bias = g.cols() - 1;
    let mut negative: Vec<(usize, S)> = (0..g.rows())
        .map(|i| (i, g.at(i, bias)))
        .filter(|&(_, v)| v < S::zero())
        .collect();
    if negative.len() < batch_size {
        return Err(Error::DuplicateLabelsUnsupported {
            batch_size,
            distinct: negative.len(),
        });
    }
    negative.sort_by(|a, b| a.1.partial_cmp(&b.1).expect("finite gradients"));
    let mut labels: Vec<usize> = negative[..batch_size].iter().map(|&(i, _)| i).collect();
    labels.sort_unstable();
    Ok(labels)
}
