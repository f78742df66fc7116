use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::backprop::GradStore;
use candle_core::{Device, Tensor};

use crate::error::{Error, Result};
use crate::nn::ParamStore;

/// Adam with optional L2 weight decay folded into the gradient.
#[derive(Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update of every parameter that received a gradient.
    pub fn step(&mut self, store: &ParamStore, grads: &GradStore) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, var) in store.params() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let mut g = g.detach();
            if self.weight_decay != 0.0 {
                g = (g + (var.as_tensor() * self.weight_decay)?)?;
            }
            let (m, v) = match self.moments.get(name) {
                Some((m, v)) => (m.clone(), v.clone()),
                None => (g.zeros_like()?, g.zeros_like()?),
            };
            let m = ((m * self.beta1)? + (&g * (1.0 - self.beta1))?)?.detach();
            let v = ((v * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?.detach();
            let denom = ((&v / c2)?.sqrt()? + self.eps)?;
            let update = ((&m / c1)? / denom)?;
            var.set(&(var.as_tensor() - (update * self.lr)?)?.detach())?;
            self.moments.insert(name.clone(), (m, v));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tensors = HashMap::new();
        for (name, (m, v)) in &self.moments {
            tensors.insert(format!("m.{name}"), m.clone());
            tensors.insert(format!("v.{name}"), v.clone());
        }
        candle_core::safetensors::save(&tensors, path)?;
        Ok(())
    }

    /// Restore moment estimates saved after `step` updates.
    pub fn load(&mut self, path: &Path, step: u64, store: &ParamStore) -> Result<()> {
        let loaded = candle_core::safetensors::load(path, &Device::Cpu)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        let mut moments = BTreeMap::new();
        for (name, var) in store.params() {
            match (loaded.get(&format!("m.{name}")), loaded.get(&format!("v.{name}"))) {
                (Some(m), Some(v)) if m.dims() == var.dims() && v.dims() == var.dims() => {
                    moments.insert(name.clone(), (m.to_dtype(var.dtype())?, v.to_dtype(var.dtype())?));
                }
                (None, None) => {}
                _ => return Err(Error::Checkpoint(format!("optimizer state for {name} is inconsistent"))),
            }
        }
        if moments.len() * 2 != loaded.len() {
            return Err(Error::Checkpoint("optimizer state names parameters the model lacks".into()));
        }
        self.moments = moments;
        self.step = step;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamBuilder;
    use candle_core::DType;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut b = ParamBuilder::new(0, DType::F64);
        b.constant("w", &[3], 1.0).unwrap();
        let store = b.finish();
        let w = store.get("w").unwrap().clone();
        let loss = (w.as_tensor() * 2.0).unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        let mut adam = Adam::new(0.1, 0.9, 0.999, 1e-8, 0.0);
        adam.step(&store, &grads).unwrap();
        for v in w.as_tensor().to_vec1::<f64>().unwrap() {
            assert!((v - 0.9).abs() < 1e-6, "{v}");
        }
    }

    #[test]
    fn minimises_quadratic() {
        let mut b = ParamBuilder::new(0, DType::F64);
        b.constant("w", &[2], 3.0).unwrap();
        let store = b.finish();
        let w = store.get("w").unwrap().clone();
        let mut adam = Adam::new(0.05, 0.9, 0.999, 1e-8, 0.0);
        for _ in 0..500 {
            let loss = w.as_tensor().sqr().unwrap().sum_all().unwrap();
            adam.step(&store, &loss.backward().unwrap()).unwrap();
        }
        for v in w.as_tensor().to_vec1::<f64>().unwrap() {
            assert!(v.abs() < 0.05, "{v}");
        }
    }

    #[test]
    fn state_holds_no_graph() {
        let mut b = ParamBuilder::new(0, DType::F64);
        b.constant("w", &[2], 1.0).unwrap();
        let store = b.finish();
        let w = store.get("w").unwrap().clone();
        let mut adam = Adam::new(0.1, 0.9, 0.999, 1e-8, 0.0);
        for _ in 0..2 {
            let loss = w.as_tensor().sqr().unwrap().sum_all().unwrap();
            adam.step(&store, &loss.backward().unwrap()).unwrap();
        }
        let (m, v) = &adam.moments["w"];
        assert!(!m.track_op() && !v.track_op());
    }
}
