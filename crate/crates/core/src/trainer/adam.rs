//! Adam with decoupled weight decay.

use super::OptimConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// First and second moments for each parameter tensor, in canonical order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    /// Steps taken so far.
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &[&Tensor]) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// One bias-corrected Adam step. Tensors flagged in `decay` additionally
/// shrink by `lr·wd·θ`, computed from the pre-step value.
pub fn adam_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    decay: &[bool],
    state: &mut AdamState,
    cfg: &OptimConfig,
    lr: f64,
) -> Result<()> {
    let n = params.len();
    if grads.len() != n || decay.len() != n || state.m.len() != n || state.v.len() != n {
        return Err(Error::shape(format!(
            "adam step over {n} parameters got {} grads, {} decay flags, {} moments",
            grads.len(),
            decay.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() || p.shape() != state.v[i].shape() {
            return Err(Error::shape(format!(
                "parameter {i} has shape {:?} but gradient {:?}",
                p.shape(),
                g.shape()
            )));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..n {
        let wd = if decay[i] { cfg.weight_decay } else { 0.0 };
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        let g = grads[i].data();
        for (j, theta) in params[i].data_mut().iter_mut().enumerate() {
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            let old = *theta;
            *theta = old - lr * m_hat / (v_hat.sqrt() + cfg.eps) - lr * wd * old;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(wd: f64) -> OptimConfig {
        OptimConfig {
            weight_decay: wd,
            ..OptimConfig::default()
        }
    }

    fn step(theta: f64, g: f64, wd: f64, lr: f64) -> f64 {
        let mut p = vec![Tensor::from_vec(vec![theta])];
        let mut s = AdamState::new(&[&p[0]]);
        adam_step(&mut p, &[Tensor::from_vec(vec![g])], &[true], &mut s, &cfg(wd), lr).unwrap();
        assert_eq!(s.t, 1);
        p[0].data()[0]
    }

    #[test]
    fn first_step_moves_by_lr() {
        let theta = step(1.0, 1.0, 0.0, 1e-3);
        assert!((theta - (1.0 - 1e-3 / (1.0 + 1e-8))).abs() < 1e-15);
        assert!((theta - 0.999).abs() < 1e-10);
    }

    #[test]
    fn zero_gradient_without_decay_is_identity() {
        assert_eq!(step(0.7, 0.0, 0.0, 1e-3), 0.7);
    }

    #[test]
    fn zero_gradient_with_decay_shrinks() {
        let theta = step(2.0, 0.0, 4e-3, 1e-2);
        assert_eq!(theta, 2.0 - 1e-2 * 4e-3 * 2.0);
    }

    #[test]
    fn decay_flag_is_respected() {
        let mut p = vec![Tensor::from_vec(vec![2.0]), Tensor::from_vec(vec![2.0])];
        let mut s = AdamState::new(&[&p[0], &p[1]]);
        let g = [Tensor::from_vec(vec![0.0]), Tensor::from_vec(vec![0.0])];
        adam_step(&mut p, &g, &[true, false], &mut s, &cfg(0.5), 0.1).unwrap();
        assert_eq!(p[0].data()[0], 2.0 - 0.1 * 0.5 * 2.0);
        assert_eq!(p[1].data()[0], 2.0);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = vec![Tensor::from_vec(vec![1.0, 2.0])];
        let mut s = AdamState::new(&[&p[0]]);
        let err = adam_step(&mut p, &[Tensor::from_vec(vec![1.0])], &[false], &mut s, &cfg(0.0), 1e-3);
        assert!(err.is_err());
        assert_eq!(s.t, 0);
    }
}
