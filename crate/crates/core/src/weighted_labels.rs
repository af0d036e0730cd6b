//! Batch-level soft similarity targets built from patch-to-patch maxima.
//!
//! For images `i` and `j`, `G[i][j][k][t] = ⟨f1[i][k], f2[j][t]⟩`. The raw
//! weight `W[i][j]` is the mean over `k` of `max_t G[i][j][k][t]`; it is then
//! row-softmaxed with temperature `tau_w` and every row is divided by its
//! diagonal entry so that each anchor's own augmented view weighs exactly 1.

use crate::autodiff::{ReduceKind, Var};
use crate::error::{Result, WchError};
use crate::tensor::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelStage {
    /// Means of per-row patch maxima.
    Raw,
    /// Row softmax with temperature applied; rows sum to 1.
    Softmaxed,
    /// Rows divided by their diagonal; diagonal is exactly 1.
    Scaled,
}

/// `bs × bs` weighted-label matrix.
#[derive(Debug, Clone, Copy)]
pub struct WeightMatrix<'t> {
    pub w: Var<'t>,
    pub tau_w: Option<Real>,
    pub stage: LabelStage,
}

/// Patch-pair similarities `bs × bs × n × n` between view-1 and view-2 features.
pub fn patch_cross_similarity<'t>(f1: Var<'t>, f2: Var<'t>) -> Result<Var<'t>> {
    let (a, b) = (f1.shape(), f2.shape());
    if a.len() != 3 || a != b {
        return Err(WchError::dim("patch_cross_similarity", &a, &b));
    }
    let (bs, n, d) = (a[0], a[1], a[2]);
    let flat1 = f1.reshape(&[bs * n, d])?;
    let flat2 = f2.reshape(&[bs * n, d])?;
    flat1
        .matmul_t(flat2, false, true)?
        .reshape(&[bs, n, bs, n])?
        .permute(&[0, 2, 1, 3])
}

/// Max over the view-2 patch axis, mean over the view-1 patch axis.
pub fn aggregate<'t>(g: Var<'t>) -> Result<WeightMatrix<'t>> {
    let sh = g.shape();
    if sh.len() != 4 || sh[0] != sh[1] || sh[2] != sh[3] {
        return Err(WchError::dim("aggregate", &sh, &[sh[0], sh[0], sh[2], sh[2]]));
    }
    let w = g.reduce(3, ReduceKind::Max)?.reduce(2, ReduceKind::Mean)?;
    Ok(WeightMatrix {
        w,
        tau_w: None,
        stage: LabelStage::Raw,
    })
}

/// Row softmax of `raw / tau_w`.
pub fn softmax_stage<'t>(raw: WeightMatrix<'t>, tau_w: Real) -> Result<WeightMatrix<'t>> {
    if !(tau_w > 0.0) {
        return Err(WchError::Parameter(format!("tau_w must be positive, got {tau_w}")));
    }
    if raw.stage != LabelStage::Raw {
        return Err(WchError::Parameter(format!(
            "softmax expects raw weights, got {:?}",
            raw.stage
        )));
    }
    Ok(WeightMatrix {
        w: raw.w.softmax(tau_w)?,
        tau_w: Some(tau_w),
        stage: LabelStage::Softmaxed,
    })
}

/// Row softmax followed by division of each row by its diagonal entry.
pub fn normalize<'t>(raw: WeightMatrix<'t>, tau_w: Real) -> Result<WeightMatrix<'t>> {
    let soft = softmax_stage(raw, tau_w)?;
    Ok(WeightMatrix {
        w: soft.w.diag_normalize()?,
        stage: LabelStage::Scaled,
        ..soft
    })
}

/// Same values, excluded from gradient propagation.
pub fn detach_targets(w: WeightMatrix<'_>) -> WeightMatrix<'_> {
    WeightMatrix { w: w.w.detach(), ..w }
}

/// Norm floor for [`prepare_features`].
pub const UNIT_EPS: Real = 1e-12;

/// Subtract the mean patch feature over both views and the whole batch.
pub fn center_pair<'t>(f1: Var<'t>, f2: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
    let (a, b) = (f1.shape(), f2.shape());
    if a.len() != 3 || a != b {
        return Err(WchError::dim("center_pair", &a, &b));
    }
    let (rows, d) = (a[0] * a[1], a[2]);
    let m1 = f1.reshape(&[rows, d])?.reduce(0, ReduceKind::Mean)?;
    let m2 = f2.reshape(&[rows, d])?.reduce(0, ReduceKind::Mean)?;
    let neg_mean = m1.add(m2)?.scale(-0.5)?;
    Ok((f1.add_broadcast(neg_mean)?, f2.add_broadcast(neg_mean)?))
}

/// Optional centering then optional unit-normalization of every patch
/// feature, applied before the patch similarities are taken.
pub fn prepare_features<'t>(f1: Var<'t>, f2: Var<'t>, center: bool, unit: bool) -> Result<(Var<'t>, Var<'t>)> {
    let (g1, g2) = if center { center_pair(f1, f2)? } else { (f1, f2) };
    if unit {
        Ok((g1.unit_normalize(UNIT_EPS)?, g2.unit_normalize(UNIT_EPS)?))
    } else {
        Ok((g1, g2))
    }
}

/// Full target construction from refined features.
pub fn weighted_labels<'t>(f1: Var<'t>, f2: Var<'t>, tau_w: Real) -> Result<WeightMatrix<'t>> {
    normalize(aggregate(patch_cross_similarity(f1, f2)?)?, tau_w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::tensor::Tensor;

    #[test]
    fn identical_unit_patches_give_all_ones() {
        let tape = Tape::new();
        let mut data = vec![0.0; 3 * 2 * 4];
        for p in data.chunks_mut(4) {
            p[1] = 1.0;
        }
        let f = tape.constant(Tensor::new(&[3, 2, 4], data).unwrap());
        let g = patch_cross_similarity(f, f).unwrap();
        assert_eq!(g.shape(), vec![3, 3, 2, 2]);
        assert!(g.value().data().iter().all(|&v| v == 1.0));
        let w = aggregate(g).unwrap();
        assert!(w.w.value().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn aggregate_row_max_then_mean() {
        let tape = Tape::new();
        let g = tape.constant(Tensor::new(&[1, 1, 2, 2], vec![1.0, 5.0, 2.0, 0.0]).unwrap());
        assert_eq!(aggregate(g).unwrap().w.value().item(), 3.5);
    }

    #[test]
    fn uniform_raw_weights_scale_to_ones() {
        let tape = Tape::new();
        let raw = WeightMatrix {
            w: tape.constant(Tensor::full(&[4, 4], 0.37)),
            tau_w: None,
            stage: LabelStage::Raw,
        };
        let soft = softmax_stage(raw, 0.2).unwrap();
        assert!(soft.w.value().data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let scaled = normalize(raw, 0.2).unwrap();
        assert!(scaled.w.value().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn single_item_batch_is_one() {
        let tape = Tape::new();
        let f = tape.constant(Tensor::new(&[1, 2, 2], vec![0.3, -0.1, 2.0, 0.5]).unwrap());
        let w = weighted_labels(f, f, 0.2).unwrap();
        assert_eq!(w.w.value().data(), &[1.0]);
        assert_eq!(w.stage, LabelStage::Scaled);
    }

    #[test]
    fn rejects_nonpositive_tau_w() {
        let tape = Tape::new();
        let raw = WeightMatrix {
            w: tape.constant(Tensor::eye(2)),
            tau_w: None,
            stage: LabelStage::Raw,
        };
        assert!(matches!(normalize(raw, 0.0), Err(WchError::Parameter(_))));
        assert!(matches!(normalize(raw, -0.5), Err(WchError::Parameter(_))));
    }

    #[test]
    fn detach_keeps_values_and_drops_gradient() {
        let tape = Tape::new();
        let f = tape.param(Tensor::new(&[2, 2, 2], vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8]).unwrap());
        let w = weighted_labels(f, f, 0.5).unwrap();
        let d = detach_targets(w);
        assert_eq!(*d.w.value(), *w.w.value());
        assert!(w.w.requires_grad());
        assert!(!d.w.requires_grad());
    }
}
