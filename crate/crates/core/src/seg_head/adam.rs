use ndarray::Zip;

use super::{HeadParams, TrainConfig};
use crate::error::{Error, Result};

/// First and second moment estimates, one per head parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: HeadParams<f64>,
    pub v: HeadParams<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(p: &HeadParams) -> Self {
        let zeros = HeadParams::<f64>::zeros(p.c(), p.d(), p.h_hidden());
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// One bias-corrected Adam update. A non-finite gradient aborts the step
/// without touching the parameters.
pub fn adam_step(
    mut p: HeadParams,
    g: &HeadParams,
    mut s: AdamState,
    cfg: &TrainConfig,
) -> Result<(HeadParams, AdamState)> {
    let dims = (p.c(), p.d(), p.h_hidden());
    if (g.c(), g.d(), g.h_hidden()) != dims || (s.m.c(), s.m.d(), s.m.h_hidden()) != dims {
        return Err(Error::Shape("gradient or optimizer state does not match parameters".into()));
    }
    if let Some(pos) = g.to_flat().iter().position(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!(
            "non-finite gradient at flat parameter {pos} (step {})",
            s.t + 1
        )));
    }
    s.t += 1;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let correct1 = 1.0 - b1.powi(s.t as i32);
    let correct2 = 1.0 - b2.powi(s.t as i32);
    let (lr, eps) = (cfg.learning_rate, cfg.eps);
    let parts = p
        .parts_mut()
        .into_iter()
        .zip(g.parts())
        .zip(s.m.parts_mut())
        .zip(s.v.parts_mut());
    for (((theta, grad), m), v) in parts {
        Zip::from(theta)
            .and(&grad)
            .and(m)
            .and(v)
            .for_each(|theta, &grad, m, v| {
                let grad = grad as f64;
                *m = b1 * *m + (1.0 - b1) * grad;
                *v = b2 * *v + (1.0 - b2) * grad * grad;
                let m_hat = *m / correct1;
                let v_hat = *v / correct2;
                *theta = (*theta as f64 - lr * m_hat / (v_hat.sqrt() + eps)) as f32;
            });
    }
    Ok((p, s))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seg_head::init_head;

    #[test]
    fn zero_gradient_is_identity() {
        let p = init_head(4, 2, 3, 1).unwrap();
        let s = AdamState::new(&p);
        let g = p.zeros_like();
        let (q, s2) = adam_step(p.clone(), &g, s, &TrainConfig::default()).unwrap();
        assert_eq!(p, q);
        assert_eq!(s2.t, 1);
    }

    #[test]
    fn zero_learning_rate_updates_moments_only() {
        let p = init_head(4, 2, 3, 1).unwrap();
        let mut g = p.zeros_like();
        g.b_lin.fill(0.5);
        let cfg = TrainConfig { learning_rate: 0.0, ..TrainConfig::default() };
        let (q, s) = adam_step(p.clone(), &g, AdamState::new(&p), &cfg).unwrap();
        assert_eq!(p, q);
        assert!((s.m.b_lin[0] - 0.05).abs() < 1e-12);
        assert!((s.v.b_lin[0] - 0.00025).abs() < 1e-12);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m_hat = v_hat = 1 at t = 1, so the step is lr / (1 + eps).
        let p = HeadParams::zeros(1, 1, 1);
        let mut g = p.zeros_like();
        g.w_lin.fill(1.0);
        let cfg = TrainConfig::default();
        let (q, s) = adam_step(p.clone(), &g, AdamState::new(&p), &cfg).unwrap();
        let expected = -cfg.learning_rate / (1.0 + cfg.eps);
        assert!((q.w_lin[[0, 0]] as f64 - expected).abs() <= 1e-9);
        assert!((q.w_lin[[0, 0]] as f64 + 1e-4).abs() <= 1e-9);
        assert_eq!(q.b_lin[0], 0.0);
        assert!(s.v.w_lin.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn counter_increments_by_one() {
        let p = init_head(3, 2, 2, 0).unwrap();
        let mut g = p.zeros_like();
        g.w1.fill(-0.2);
        let cfg = TrainConfig::default();
        let mut state = AdamState::new(&p);
        let mut params = p;
        for step in 1..=5 {
            (params, state) = adam_step(params, &g, state, &cfg).unwrap();
            assert_eq!(state.t, step);
        }
    }

    #[test]
    fn non_finite_gradient_is_numeric_error() {
        let p = init_head(3, 2, 2, 0).unwrap();
        let mut g = p.zeros_like();
        g.b2[1] = f32::INFINITY;
        let err = adam_step(p.clone(), &g, AdamState::new(&p), &TrainConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
    }
}
