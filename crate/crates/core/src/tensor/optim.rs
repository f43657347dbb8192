use super::{ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update of `param` in place. `step` is the
/// 1-based index of this update.
pub fn adam_update<S: Scalar>(
    param: &mut [S],
    grad: &[S],
    m: &mut [S],
    v: &mut [S],
    step: u64,
    cfg: &AdamConfig,
) -> Result<()> {
    if grad.len() != param.len() || m.len() != param.len() || v.len() != param.len() {
        return Err(Error::shape(format!(
            "adam: param {} grad {} moments {}/{}",
            param.len(),
            grad.len(),
            m.len(),
            v.len()
        )));
    }
    let b1 = S::lit(cfg.beta1);
    let b2 = S::lit(cfg.beta2);
    let lr = S::lit(cfg.lr);
    let eps = S::lit(cfg.eps);
    let bc1 = S::one() - S::lit(cfg.beta1.powf(step as f64));
    let bc2 = S::one() - S::lit(cfg.beta2.powf(step as f64));
    for i in 0..param.len() {
        let g = grad[i];
        m[i] = b1 * m[i] + (S::one() - b1) * g;
        v[i] = b2 * v[i] + (S::one() - b2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        param[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// Adam over a fixed subset of a store's parameters.
#[derive(Debug, Clone)]
pub struct Adam<S> {
    pub config: AdamConfig,
    params: Vec<ParamId>,
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
    step: u64,
}

impl<S: Scalar> Adam<S> {
    pub fn new(store: &ParamStore<S>, params: Vec<ParamId>, config: AdamConfig) -> Self {
        let m: Vec<Vec<S>> = params
            .iter()
            .map(|&id| vec![S::zero(); store.value(id).len()])
            .collect();
        let v = m.clone();
        Self {
            config,
            params,
            m,
            v,
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn params(&self) -> &[ParamId] {
        &self.params
    }

    pub fn owns(&self, id: ParamId) -> bool {
        self.params.contains(&id)
    }

    pub fn moment_shapes_match(&self, store: &ParamStore<S>) -> bool {
        self.params.iter().enumerate().all(|(i, &id)| {
            let n = store.value(id).len();
            self.m[i].len() == n && self.v[i].len() == n
        })
    }

    /// Applies one update from the accumulated gradients of the owned
    /// parameters, then clears those gradients.
    pub fn step(&mut self, store: &mut ParamStore<S>) -> Result<()> {
        for g in self.params.iter().flat_map(|&id| store.get(id).grad.iter()) {
            if !g.is_finite() {
                return Err(Error::BadConfig("non-finite gradient".into()));
            }
        }
        self.step += 1;
        for (i, &id) in self.params.iter().enumerate() {
            let p = store.get_mut(id);
            let grad = std::mem::take(&mut p.grad);
            adam_update(
                p.value.data_mut(),
                &grad,
                &mut self.m[i],
                &mut self.v[i],
                self.step,
                &self.config,
            )?;
            p.grad = grad;
            p.grad.iter_mut().for_each(|g| *g = S::zero());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut p = [0.5f64, -1.0];
        let (mut m, mut v) = ([0.0; 2], [0.0; 2]);
        adam_update(&mut p, &[0.0, 0.0], &mut m, &mut v, 1, &AdamConfig::default()).unwrap();
        assert_eq!(p, [0.5, -1.0]);
    }

    #[test]
    fn first_step_moves_by_lr_against_sign() {
        let cfg = AdamConfig::default();
        let mut p = [0.0f64, 0.0, 0.0];
        let (mut m, mut v) = ([0.0; 3], [0.0; 3]);
        adam_update(&mut p, &[3.0, -0.2, 1e-3], &mut m, &mut v, 1, &cfg).unwrap();
        // m_hat = g, v_hat = g², so the step is lr·g/(|g|+eps)
        assert!((p[0] + cfg.lr).abs() < 1e-9);
        assert!((p[1] - cfg.lr).abs() < 1e-9);
        assert!((p[2] + cfg.lr).abs() < 1e-7);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = [0.0f64; 2];
        let (mut m, mut v) = ([0.0; 2], [0.0; 2]);
        let r = adam_update(&mut p, &[1.0], &mut m, &mut v, 1, &AdamConfig::default());
        assert!(matches!(r, Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn optimizer_tracks_steps_and_shapes() {
        let mut store = ParamStore::<f64>::new();
        let a = store.add("a", Tensor::zeros(&[2, 3]), true);
        let b = store.add("b", Tensor::zeros(&[4]), true);
        let mut opt = Adam::new(&store, vec![a], AdamConfig::default());
        store.get_mut(a).grad.iter_mut().for_each(|g| *g = 1.0);
        store.get_mut(b).grad.iter_mut().for_each(|g| *g = 1.0);
        opt.step(&mut store).unwrap();
        opt.step(&mut store).unwrap();
        assert_eq!(opt.step_count(), 2);
        assert!(opt.moment_shapes_match(&store));
        assert!(store.value(b).data().iter().all(|&x| x == 0.0));
        assert!(store.get(a).grad.iter().all(|&g| g == 0.0));
    }
}
