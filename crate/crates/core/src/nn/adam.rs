use ndarray::{Array2, Zip};

use super::{round_to_f32, ParamStore};
use crate::{Error, Result};

/// Adam with optional global gradient-norm clipping.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: Option<f64>,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64, clip_norm: Option<f64>) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm,
            m: store.iter().map(|(_, p)| Array2::zeros(p.raw_dim())).collect(),
            v: store.iter().map(|(_, p)| Array2::zeros(p.raw_dim())).collect(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update and returns the pre-clipping gradient norm.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Array2<f64>>]) -> Result<f64> {
        let norm = grads
            .iter()
            .flatten()
            .map(|g| g.iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        if !norm.is_finite() {
            let bad: Vec<&str> = grads
                .iter()
                .enumerate()
                .filter(|(_, g)| g.as_ref().is_some_and(|g| g.iter().any(|x| !x.is_finite())))
                .map(|(i, _)| store.name(i))
                .collect();
            return Err(Error::Diverged(format!(
                "non-finite gradient in {}",
                bad.join(", ")
            )));
        }
        let scale = match self.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let (lr, eps) = (self.lr, self.eps);
        for (id, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let p = store.get_mut(id);
            Zip::from(&mut *p)
                .and(&mut self.m[id])
                .and(&mut self.v[id])
                .and(g)
                .for_each(|p, m, v, &g| {
                    let g = g * scale;
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                });
            round_to_f32(p);
        }
        Ok(norm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimises_a_quadratic() {
        let mut ps = ParamStore::new();
        let id = ps.add("x", Array2::from_elem((1, 2), 3.0));
        let mut opt = Adam::new(&ps, 0.1, Some(1.0));
        for _ in 0..500 {
            let g = ps.get(id).mapv(|x| 2.0 * (x - 1.0));
            opt.step(&mut ps, &[Some(g)]).unwrap();
        }
        assert!(ps.get(id).iter().all(|&x| (x - 1.0).abs() < 1e-2));
    }

    #[test]
    fn zero_lr_is_identity_and_nan_aborts() {
        let mut ps = ParamStore::new();
        let id = ps.add("x", Array2::from_elem((1, 1), 0.3));
        let before = ps.clone();
        let mut opt = Adam::new(&ps, 0.0, None);
        opt.step(&mut ps, &[Some(Array2::from_elem((1, 1), 5.0))]).unwrap();
        assert_eq!(ps, before);
        let err = opt.step(&mut ps, &[Some(Array2::from_elem((1, 1), f64::NAN))]);
        assert!(matches!(err, Err(Error::Diverged(m)) if m.contains('x')));
        let _ = id;
    }
}
