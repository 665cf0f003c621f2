use crate::error::{Error, Result};
use crate::params::ParamVector;

/// One local step: the iterate, the data-loss gradient and the proximal
/// objective gradient evaluated there.
#[derive(Clone, Debug, PartialEq)]
pub struct GradSample {
    pub w: ParamVector,
    pub loss_grad: ParamVector,
    pub prox_grad: ParamVector,
}

/// Gradient observations collected during a run.
///
/// `local` feeds the gradient-norm bounds. `objective` holds
/// `(w, grad F(w))` pairs of the full empirical objective and feeds the
/// smoothness estimate.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradientTrace {
    pub local: Vec<GradSample>,
    pub objective: Vec<(ParamVector, ParamVector)>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AssumptionEstimates {
    /// Largest observed `|grad l|^2`.
    pub b1_sq_hat: Option<f64>,
    /// Largest observed `|grad g|^2`.
    pub b2_sq_hat: Option<f64>,
    /// Largest observed secant ratio `|grad F(v) - grad F(u)| / |v - u|`.
    pub l_hat: Option<f64>,
}

/// Empirical stand-ins for the bounded-gradient and smoothness constants.
/// Reported only; nothing downstream enforces them.
pub fn estimate_assumption_constants(trace: &GradientTrace) -> Result<AssumptionEstimates> {
    if trace.local.is_empty() && trace.objective.is_empty() {
        return Err(Error::Empty("gradient trace"));
    }
    let max_of = |it: &mut dyn Iterator<Item = f64>| {
        it.fold(None, |m: Option<f64>, v| Some(m.map_or(v, |m| m.max(v))))
    };
    let b1_sq_hat = max_of(&mut trace.local.iter().map(|s| s.loss_grad.norm_sq()));
    let b2_sq_hat = max_of(&mut trace.local.iter().map(|s| s.prox_grad.norm_sq()));

    let mut l_hat: Option<f64> = None;
    for (i, (u, gu)) in trace.objective.iter().enumerate() {
        for (v, gv) in &trace.objective[i + 1..] {
            let dw = v.distance(u)?;
            if dw == 0.0 {
                continue;
            }
            let ratio = gv.distance(gu)? / dw;
            l_hat = Some(l_hat.map_or(ratio, |m| m.max(ratio)));
        }
    }
    Ok(AssumptionEstimates {
        b1_sq_hat,
        b2_sq_hat,
        l_hat,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pv(v: &[f64]) -> ParamVector {
        ParamVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn empty_trace_is_an_error() {
        assert!(matches!(
            estimate_assumption_constants(&GradientTrace::default()),
            Err(Error::Empty(_))
        ));
    }

    #[test]
    fn constant_gradient_bound() {
        let g = pv(&[3.0, 4.0]);
        let local = (0..5)
            .map(|i| GradSample {
                w: pv(&[i as f64, 0.0]),
                loss_grad: g.clone(),
                prox_grad: g.clone(),
            })
            .collect();
        let est = estimate_assumption_constants(&GradientTrace {
            local,
            objective: vec![],
        })
        .unwrap();
        assert_eq!(est.b1_sq_hat, Some(25.0));
        assert_eq!(est.b2_sq_hat, Some(25.0));
        assert_eq!(est.l_hat, None);
    }

    #[test]
    fn quadratic_smoothness_is_exact() {
        // f(w) = c/2 |w|^2 has grad c*w, so every secant ratio is c.
        let c = 2.75;
        let points = [
            [1.0, -2.0, 0.5],
            [0.0, 0.0, 3.0],
            [-4.0, 1.0, 1.0],
            [0.1, 0.2, 0.3],
        ];
        let objective = points
            .iter()
            .map(|p| (pv(p), pv(&p.map(|x| c * x))))
            .collect();
        let est = estimate_assumption_constants(&GradientTrace {
            local: vec![],
            objective,
        })
        .unwrap();
        assert!((est.l_hat.unwrap() - c).abs() < 1e-9);
        assert_eq!(est.b1_sq_hat, None);
    }
}
