//! Parameter-free cross-view re-weighting of patch features.
//!
//! For each image, `S = f1 · f2ᵀ` scores every (view-1 patch, view-2 patch)
//! pair. View 2 is re-read through the row softmax of `S`, view 1 through the
//! softmax of `Sᵀ` (the column softmax of `S`):
//!
//! ```text
//! refined1[k] = Σ_j colsoftmax(S)[j, k] · f1[j]
//! refined2[k] = Σ_j rowsoftmax(S)[k, j] · f2[j]
//! ```

use crate::autodiff::{ReduceKind, Var};
use crate::error::{Result, WchError};
use crate::tensor::Real;

const NORM_EPS: Real = 1e-12;

/// Refined views plus the similarity they were derived from.
#[derive(Debug, Clone, Copy)]
pub struct MaResult<'t> {
    /// `bs × n × d_m`
    pub refined_view1: Var<'t>,
    /// `bs × n × d_m`
    pub refined_view2: Var<'t>,
    /// `bs × n × n`; absent for the mean ablation.
    pub similarity: Option<Var<'t>>,
}

fn check_pair(f1: Var<'_>, f2: Var<'_>, op: &'static str) -> Result<()> {
    let (a, b) = (f1.shape(), f2.shape());
    if a.len() != 3 || a != b {
        return Err(WchError::dim(op, &a, &b));
    }
    Ok(())
}

/// Mutual attention between two views. With `unit_normalize` the similarity
/// is computed on unit-length features; the mixed features stay unscaled.
pub fn mutual_attend<'t>(f1: Var<'t>, f2: Var<'t>, unit_normalize: bool) -> Result<MaResult<'t>> {
    check_pair(f1, f2, "mutual_attend")?;
    let (q1, q2) = if unit_normalize {
        (f1.unit_normalize(NORM_EPS)?, f2.unit_normalize(NORM_EPS)?)
    } else {
        (f1, f2)
    };
    let sim = q1.matmul_t(q2, false, true)?;
    let to_view1 = sim.transpose()?.softmax(1.0)?;
    let to_view2 = sim.softmax(1.0)?;
    Ok(MaResult {
        refined_view1: to_view1.matmul(f1)?,
        refined_view2: to_view2.matmul(f2)?,
        similarity: Some(sim),
    })
}

/// Ablation: every patch of a view is replaced by that view's patch mean.
pub fn ma_ablation_mean<'t>(f1: Var<'t>, f2: Var<'t>) -> Result<MaResult<'t>> {
    check_pair(f1, f2, "ma_ablation_mean")?;
    let n = f1.shape()[1];
    let spread = |f: Var<'t>| f.reduce(1, ReduceKind::Mean)?.expand(1, n);
    Ok(MaResult {
        refined_view1: spread(f1)?,
        refined_view2: spread(f2)?,
        similarity: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::tensor::Tensor;

    #[test]
    fn single_patch_is_copied_through() {
        let tape = Tape::new();
        let f1 = tape.constant(Tensor::new(&[2, 1, 3], vec![1.0, 2.0, 3.0, -1.0, 0.5, 0.0]).unwrap());
        let f2 = tape.constant(Tensor::new(&[2, 1, 3], vec![4.0, 5.0, 6.0, 0.0, 0.0, 9.0]).unwrap());
        let r = mutual_attend(f1, f2, false).unwrap();
        assert_eq!(*r.refined_view1.value(), *f1.value());
        assert_eq!(*r.refined_view2.value(), *f2.value());
    }

    #[test]
    fn sharp_similarity_selects_matching_patch() {
        // orthogonal unit patches scaled so S = 100·I
        let tape = Tape::new();
        let mut data = vec![0.0; 3 * 3];
        for k in 0..3 {
            data[k * 3 + k] = 10.0;
        }
        let f = tape.constant(Tensor::new(&[1, 3, 3], data).unwrap());
        let r = mutual_attend(f, f, false).unwrap();
        assert!(r.refined_view2.value().max_abs_diff(&f.value()) < 1e-6 * 10.0);
        assert!(r.refined_view1.value().max_abs_diff(&f.value()) < 1e-6 * 10.0);
    }

    #[test]
    fn mean_ablation_rows_are_equal() {
        let tape = Tape::new();
        let data: Vec<Real> = (0..24).map(|v| (v as Real).sin()).collect();
        let f1 = tape.constant(Tensor::new(&[2, 3, 4], data.clone()).unwrap());
        let f2 = tape.constant(Tensor::new(&[2, 3, 4], data.iter().map(|v| v * 2.0).collect()).unwrap());
        let r = ma_ablation_mean(f1, f2).unwrap();
        for img in r.refined_view1.value().data().chunks(12) {
            assert_eq!(img[..4], img[4..8]);
            assert_eq!(img[..4], img[8..]);
        }
        assert!(r.similarity.is_none());
    }

    #[test]
    fn constant_features_match_full_attention() {
        let tape = Tape::new();
        let f1 = tape.constant(Tensor::full(&[2, 3, 4], 0.7));
        let f2 = tape.constant(Tensor::full(&[2, 3, 4], -0.2));
        let a = mutual_attend(f1, f2, false).unwrap();
        let m = ma_ablation_mean(f1, f2).unwrap();
        assert!(a.refined_view1.value().max_abs_diff(&m.refined_view1.value()) < 1e-15);
        assert!(a.refined_view2.value().max_abs_diff(&m.refined_view2.value()) < 1e-15);
    }

    #[test]
    fn mismatched_views_are_rejected() {
        let tape = Tape::new();
        let f1 = tape.constant(Tensor::zeros(&[2, 3, 4]));
        let f2 = tape.constant(Tensor::zeros(&[2, 4, 4]));
        assert!(matches!(mutual_attend(f1, f2, false), Err(WchError::Dimension { .. })));
        assert!(matches!(ma_ablation_mean(f1, f2), Err(WchError::Dimension { .. })));
    }
}
