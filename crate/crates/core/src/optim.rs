//! Adam with externally visible moments so optimizer state can be checkpointed.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};

use crate::error::{Error, Result};
use crate::nn::ParamStore;

#[derive(Debug)]
struct Slot {
    name: String,
    var: Var,
    m: Tensor,
    v: Tensor,
}

#[derive(Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    slots: Vec<Slot>,
}

impl Adam {
    /// Optimizes every parameter of the given stores; names are prefixed with
    /// the paired label to stay unique across networks.
    pub fn new(stores: &[(&str, &ParamStore)], lr: f64, betas: (f64, f64)) -> Result<Self> {
        let mut slots = Vec::new();
        for (label, store) in stores {
            for (k, var) in store.params() {
                slots.push(Slot {
                    name: format!("{label}/{k}"),
                    var: var.clone(),
                    m: var.zeros_like()?,
                    v: var.zeros_like()?,
                });
            }
        }
        Ok(Self {
            lr,
            beta1: betas.0,
            beta2: betas.1,
            eps: 1e-8,
            step: 0,
            slots,
        })
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update. Parameters without a gradient are left alone.
    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for s in &mut self.slots {
            let Some(g) = grads.get(s.var.as_tensor()) else {
                continue;
            };
            s.m = ((&s.m * self.beta1)? + (g * (1.0 - self.beta1))?)?;
            s.v = ((&s.v * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?;
            let denom = ((&s.v / c2)?.sqrt()? + self.eps)?;
            let delta = ((&s.m / c1)? / denom)?;
            s.var.set(&s.var.as_tensor().sub(&(delta * self.lr)?)?)?;
        }
        Ok(())
    }

    /// Moments keyed `<prefix>/m/<name>` and `<prefix>/v/<name>`, plus the step count.
    pub fn state(&self, prefix: &str) -> Result<Vec<(String, Tensor)>> {
        let mut out = Vec::with_capacity(2 * self.slots.len() + 1);
        for s in &self.slots {
            out.push((format!("{prefix}/m/{}", s.name), s.m.clone()));
            out.push((format!("{prefix}/v/{}", s.name), s.v.clone()));
        }
        out.push((
            format!("{prefix}/step"),
            Tensor::new(&[self.step as f64], &candle_core::Device::Cpu)?,
        ));
        Ok(out)
    }

    pub fn load_state(&mut self, prefix: &str, entries: &BTreeMap<String, Tensor>) -> Result<()> {
        let get = |k: String| {
            entries
                .get(&k)
                .cloned()
                .ok_or_else(|| Error::Checkpoint(format!("missing optimizer tensor `{k}`")))
        };
        for s in &mut self.slots {
            let m = get(format!("{prefix}/m/{}", s.name))?;
            let v = get(format!("{prefix}/v/{}", s.name))?;
            if m.dims() != s.m.dims() || v.dims() != s.v.dims() {
                return Err(Error::Checkpoint(format!("optimizer shape mismatch for `{}`", s.name)));
            }
            s.m = m.to_dtype(s.m.dtype())?;
            s.v = v.to_dtype(s.v.dtype())?;
        }
        let step = get(format!("{prefix}/step"))?.flatten_all()?.to_vec1::<f64>()?;
        self.step = *step
            .first()
            .ok_or_else(|| Error::Checkpoint("empty optimizer step".into()))? as u64;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn quadratic_store() -> ParamStore {
        let mut s = ParamStore::new();
        s.param("w", Tensor::new(&[3.0f32, -2.0], &Device::Cpu).unwrap()).unwrap();
        s
    }

    #[test]
    fn first_step_moves_by_lr_against_the_gradient_sign() {
        let s = quadratic_store();
        let w = s.params()["w"].clone();
        let mut opt = Adam::new(&[("net", &s)], 0.1, (0.5, 0.999)).unwrap();
        let loss = w.as_tensor().sqr().unwrap().sum_all().unwrap();
        opt.step(&loss.backward().unwrap()).unwrap();
        let v = w.as_tensor().to_vec1::<f32>().unwrap();
        assert!((v[0] - 2.9).abs() < 1e-5 && (v[1] + 1.9).abs() < 1e-5, "{v:?}");
    }

    #[test]
    fn converges_on_a_quadratic() {
        let s = quadratic_store();
        let w = s.params()["w"].clone();
        let mut opt = Adam::new(&[("net", &s)], 0.05, (0.5, 0.999)).unwrap();
        for _ in 0..400 {
            let loss = w.as_tensor().sqr().unwrap().sum_all().unwrap();
            opt.step(&loss.backward().unwrap()).unwrap();
        }
        let v = w.as_tensor().to_vec1::<f32>().unwrap();
        assert!(v.iter().all(|x| x.abs() < 0.05), "{v:?}");
    }

    #[test]
    fn state_roundtrip_resumes_identically() {
        let run = |split: Option<usize>| {
            let s = quadratic_store();
            let w = s.params()["w"].clone();
            let mut opt = Adam::new(&[("net", &s)], 0.05, (0.5, 0.999)).unwrap();
            for i in 0..10 {
                if Some(i) == split {
                    let state: BTreeMap<_, _> = opt.state("opt").unwrap().into_iter().collect();
                    opt = Adam::new(&[("net", &s)], 0.05, (0.5, 0.999)).unwrap();
                    opt.load_state("opt", &state).unwrap();
                }
                let loss = w.as_tensor().sqr().unwrap().sum_all().unwrap();
                opt.step(&loss.backward().unwrap()).unwrap();
            }
            w.as_tensor().to_vec1::<f32>().unwrap()
        };
        assert_eq!(run(None), run(Some(4)));
    }
}
