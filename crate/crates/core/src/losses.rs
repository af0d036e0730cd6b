//! Weighted contrastive objective and code regularizers.

use serde::{Deserialize, Serialize};

use crate::autodiff::{ReduceKind, Var};
use crate::error::{Result, WchError};
use crate::tensor::Real;
use crate::weighted_labels::WeightMatrix;

/// Scalar loss components of one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: Real,
    pub wce: Real,
    pub quantization: Real,
    pub bit_balance: Real,
    pub tau: Real,
}

/// Differentiable parts of the objective; `total` is already weighted.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms<'t> {
    pub total: Var<'t>,
    pub wce: Var<'t>,
    /// Weighted by `lambda_q`.
    pub quantization: Var<'t>,
    /// Weighted by `lambda_b`.
    pub bit_balance: Var<'t>,
    pub tau: Real,
}

impl LossTerms<'_> {
    pub fn report(&self) -> LossReport {
        LossReport {
            total: self.total.value().item(),
            wce: self.wce.value().item(),
            quantization: self.quantization.value().item(),
            bit_balance: self.bit_balance.value().item(),
            tau: self.tau,
        }
    }
}

/// `-(1/bs) Σ_i Σ_j W_ij · log_softmax_j(b1_i · b2_j / l / tau)`.
pub fn weighted_contrastive<'t>(b1: Var<'t>, b2: Var<'t>, w: &WeightMatrix<'t>, tau: Real) -> Result<Var<'t>> {
    if !(tau > 0.0) {
        return Err(WchError::Parameter(format!("tau must be positive, got {tau}")));
    }
    let (s1, s2) = (b1.shape(), b2.shape());
    if s1.len() != 2 || s1 != s2 {
        return Err(WchError::dim("weighted_contrastive", &s1, &s2));
    }
    let (bs, l) = (s1[0], s1[1]);
    let ws = w.w.shape();
    if ws != [bs, bs] {
        return Err(WchError::dim("weighted_contrastive targets", &ws, &[bs, bs]));
    }
    let logits = b1.matmul_t(b2, false, true)?.scale(1.0 / (l as Real * tau))?;
    let logp = logits.log_softmax()?;
    logp.mul(w.w)?.sum_all()?.scale(-1.0 / bs as Real)
}

/// `(mean((|p| - 1)²), mean_bits(mean_batch(p)²))`, unweighted.
pub fn regularizers<'t>(pre_codes: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
    let sh = pre_codes.shape();
    if sh.len() != 2 {
        return Err(WchError::dim("regularizers", &sh, &[0, 0]));
    }
    let quant = pre_codes.abs()?.add_scalar(-1.0)?.square()?.mean_all()?;
    let balance = pre_codes.reduce(0, ReduceKind::Mean)?.square()?.mean_all()?;
    Ok((quant, balance))
}

/// Weighted objective over both views' codes. Regularizers are averaged over
/// the two views.
pub fn total_loss<'t>(
    views: [(Var<'t>, Var<'t>); 2],
    w: &WeightMatrix<'t>,
    tau: Real,
    lambda_q: Real,
    lambda_b: Real,
) -> Result<LossTerms<'t>> {
    let [(b1, p1), (b2, p2)] = views;
    let wce = weighted_contrastive(b1, b2, w, tau)?;
    let (q1, bb1) = regularizers(p1)?;
    let (q2, bb2) = regularizers(p2)?;
    let quantization = q1.add(q2)?.scale(0.5 * lambda_q)?;
    let bit_balance = bb1.add(bb2)?.scale(0.5 * lambda_b)?;
    let total = wce.add(quantization)?.add(bit_balance)?;
    Ok(LossTerms {
        total,
        wce,
        quantization,
        bit_balance,
        tau,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::tensor::Tensor;
    use crate::weighted_labels::LabelStage;

    fn eye_targets(tape: &Tape, n: usize) -> WeightMatrix<'_> {
        WeightMatrix {
            w: tape.constant(Tensor::eye(n)),
            tau_w: None,
            stage: LabelStage::Scaled,
        }
    }

    #[test]
    fn orthogonal_pair_matches_scalar_evaluation() {
        let tape = Tape::new();
        let b = tape.constant(Tensor::from_rows(&[vec![1.0, 1.0, -1.0, -1.0], vec![1.0, -1.0, 1.0, -1.0]]).unwrap());
        let loss = weighted_contrastive(b, b, &eye_targets(&tape, 2), 1.0).unwrap();
        let expected = -(1.0 as Real).exp().ln() + (1.0 as Real).exp().ln_1p();
        assert!((loss.value().item() - expected).abs() < 1e-14);
    }

    #[test]
    fn flipping_both_code_matrices_is_invariant() {
        let tape = Tape::new();
        let rows = vec![vec![1.0, -1.0, 1.0], vec![-1.0, -1.0, 1.0], vec![1.0, 1.0, 1.0]];
        let b1 = tape.constant(Tensor::from_rows(&rows).unwrap());
        let b2 = tape.constant(Tensor::from_rows(&[rows[2].clone(), rows[0].clone(), rows[1].clone()]).unwrap());
        let w = WeightMatrix {
            w: tape
                .constant(Tensor::from_rows(&[vec![1.0, 0.3, 0.2], vec![0.5, 1.0, 0.1], vec![0.7, 0.9, 1.0]]).unwrap()),
            tau_w: Some(0.2),
            stage: LabelStage::Scaled,
        };
        let a = weighted_contrastive(b1, b2, &w, 0.5).unwrap().value().item();
        let b = weighted_contrastive(b1.scale(-1.0).unwrap(), b2.scale(-1.0).unwrap(), &w, 0.5)
            .unwrap()
            .value()
            .item();
        assert_eq!(a, b);
    }

    #[test]
    fn half_pre_code_regularizers() {
        let tape = Tape::new();
        let p = tape.constant(Tensor::new(&[1, 1], vec![0.5]).unwrap());
        let (q, b) = regularizers(p).unwrap();
        assert_eq!(q.value().item(), 0.25);
        assert_eq!(b.value().item(), 0.25);
    }

    #[test]
    fn saturated_and_balanced_codes_cost_nothing() {
        let tape = Tape::new();
        let p = tape.constant(Tensor::from_rows(&[vec![1.0, -1.0], vec![-1.0, 1.0]]).unwrap());
        let (q, b) = regularizers(p).unwrap();
        assert_eq!(q.value().item(), 0.0);
        assert_eq!(b.value().item(), 0.0);
    }

    #[test]
    fn rejects_bad_tau_and_shapes() {
        let tape = Tape::new();
        let b = tape.constant(Tensor::full(&[2, 4], 1.0));
        let w = eye_targets(&tape, 2);
        assert!(matches!(
            weighted_contrastive(b, b, &w, 0.0),
            Err(WchError::Parameter(_))
        ));
        let c = tape.constant(Tensor::full(&[3, 4], 1.0));
        assert!(matches!(
            weighted_contrastive(b, c, &w, 0.5),
            Err(WchError::Dimension { .. })
        ));
        assert!(matches!(
            weighted_contrastive(c, c, &w, 0.5),
            Err(WchError::Dimension { .. })
        ));
    }

    #[test]
    fn report_total_is_sum_of_parts() {
        let tape = Tape::new();
        let p1 = tape.constant(Tensor::from_rows(&[vec![0.3, -0.8], vec![0.9, 0.2]]).unwrap());
        let p2 = tape.constant(Tensor::from_rows(&[vec![-0.4, 0.6], vec![0.1, -0.7]]).unwrap());
        let b1 = p1.ste_sign(true).unwrap();
        let b2 = p2.ste_sign(true).unwrap();
        let terms = total_loss([(b1, p1), (b2, p2)], &eye_targets(&tape, 2), 0.5, 0.1, 0.1).unwrap();
        let r = terms.report();
        assert!((r.total - (r.wce + r.quantization + r.bit_balance)).abs() < 1e-12);
    }
}
