//! Adam with named parameter groups and double-precision moment state.

use indexmap::IndexMap;
use ndarray::ArrayD;

use crate::params::ParamMap;

/// One optimizer group: a learning rate applied to a fixed set of named
/// parameters, with first/second moment estimates kept in f64.
#[derive(Debug, Clone)]
pub struct AdamGroup {
    pub name: String,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: IndexMap<String, ArrayD<f64>>,
    pub v: IndexMap<String, ArrayD<f64>>,
}

impl AdamGroup {
    pub fn new(
        name: impl Into<String>,
        lr: f64,
        beta1: f64,
        beta2: f64,
        param_names: Vec<String>,
        params: &ParamMap<f32>,
    ) -> Self {
        let mut m = IndexMap::new();
        let mut v = IndexMap::new();
        for n in param_names {
            let shape = params.get(&n).raw_dim();
            m.insert(n.clone(), ArrayD::zeros(shape.clone()));
            v.insert(n, ArrayD::zeros(shape));
        }
        AdamGroup {
            name: name.into(),
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            t: 0,
            m,
            v,
        }
    }

    pub fn param_names(&self) -> Vec<String> {
        self.m.keys().cloned().collect()
    }

    /// One update over all grouped parameters. Gradients missing from `grads`
    /// (unreached paths) count as zero. Per-tensor updates are independent and
    /// may run in parallel; the result never depends on scheduling.
    pub fn step(&mut self, params: &mut ParamMap<f32>, grads: &IndexMap<String, ArrayD<f32>>) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);

        // Collect disjoint mutable views of the grouped tensors, then update
        // each tensor in place, in parallel.
        let mut p_refs: IndexMap<&str, &mut ArrayD<f32>> = IndexMap::new();
        let member: std::collections::HashSet<&str> =
            self.m.keys().map(|s| s.as_str()).collect();
        for (name, p) in params.iter_mut() {
            if member.contains(name.as_str()) {
                p_refs.insert(name.as_str(), &mut p.value);
            }
        }
        let v_map = &mut self.v;
        let mut v_refs: IndexMap<&str, &mut ArrayD<f64>> = IndexMap::new();
        for (name, v) in v_map.iter_mut() {
            v_refs.insert(name.as_str(), v);
        }
        let mut work: Vec<(&String, &mut ArrayD<f64>, &mut ArrayD<f64>, &mut ArrayD<f32>)> =
            Vec::new();
        for (name, m) in self.m.iter_mut() {
            let v = v_refs.swap_remove(name.as_str()).unwrap();
            let p = p_refs
                .swap_remove(name.as_str())
                .unwrap_or_else(|| panic!("parameter {name} missing from the map"));
            work.push((name, m, v, p));
        }
        crate::threads::maybe_par_map(work, |(name, m, v, p)| {
            let ms = m.as_slice_mut().unwrap();
            let vs = v.as_slice_mut().unwrap();
            let ps = p.as_slice_mut().unwrap();
            match grads.get(name.as_str()) {
                Some(g) => {
                    let gs = g.as_slice().expect("contiguous gradient");
                    debug_assert_eq!(gs.len(), ms.len(), "gradient length for {name}");
                    for i in 0..ms.len() {
                        let gd = gs[i] as f64;
                        ms[i] = b1 * ms[i] + (1.0 - b1) * gd;
                        vs[i] = b2 * vs[i] + (1.0 - b2) * gd * gd;
                        let update = lr * (ms[i] / bc1) / ((vs[i] / bc2).sqrt() + eps);
                        ps[i] = (ps[i] as f64 - update) as f32;
                    }
                }
                None => {
                    for i in 0..ms.len() {
                        ms[i] *= b1;
                        vs[i] *= b2;
                        let update = lr * (ms[i] / bc1) / ((vs[i] / bc2).sqrt() + eps);
                        ps[i] = (ps[i] as f64 - update) as f32;
                    }
                }
            }
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    #[test]
    fn adam_descends_a_quadratic() {
        // Minimize f(x) = x^2 from x = 1.
        let mut params = ParamMap::new();
        params.insert("x", ArrayD::from_elem(IxDyn(&[1]), 1.0f32), true);
        let mut group = AdamGroup::new("g", 0.1, 0.9, 0.999, vec!["x".into()], &params);
        for _ in 0..200 {
            let x = params.get("x")[[0]];
            let mut grads = IndexMap::new();
            grads.insert(
                "x".to_string(),
                ArrayD::from_elem(IxDyn(&[1]), 2.0 * x),
            );
            group.step(&mut params, &grads);
        }
        assert!(params.get("x")[[0]].abs() < 1e-2);
        assert_eq!(group.t, 200);
    }

    #[test]
    fn update_magnitude_tracks_learning_rate() {
        // With Adam's normalization, the first-step update is ~lr exactly.
        for lr in [2e-4f64, 1e-6, 1e-7] {
            let mut params = ParamMap::new();
            params.insert("x", ArrayD::from_elem(IxDyn(&[1]), 1e-3f32), true);
            let mut group = AdamGroup::new("g", lr, 0.5, 0.999, vec!["x".into()], &params);
            let mut grads = IndexMap::new();
            grads.insert("x".to_string(), ArrayD::from_elem(IxDyn(&[1]), 0.3f32));
            let before = params.get("x")[[0]] as f64;
            group.step(&mut params, &grads);
            let delta = (params.get("x")[[0]] as f64 - before).abs();
            assert!((delta - lr).abs() < lr * 0.01, "lr {lr}: delta {delta}");
        }
    }
}
