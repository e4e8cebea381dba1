use std::collections::BTreeMap;

use accut_tensor::{Float, Grads};

use crate::networks::{Module, Networks, ParamGroup};

const EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
}

/// First and second moment estimates of one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments<T> {
    pub first: Vec<T>,
    pub second: Vec<T>,
}

/// Adam over a fixed set of parameter groups. Moments are keyed by parameter name.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub groups: Vec<ParamGroup>,
    pub steps: u64,
    pub moments: BTreeMap<String, Moments<T>>,
}

impl<T: Float> Adam<T> {
    pub fn new(groups: &[ParamGroup]) -> Self {
        Self {
            groups: groups.to_vec(),
            steps: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn owns(&self, name: &str) -> bool {
        ParamGroup::of(name).is_some_and(|g| self.groups.contains(&g))
    }

    /// One update of every owned parameter that received a gradient.
    pub fn step(&mut self, nets: &mut Networks<T>, grads: &Grads<T>, hp: AdamHyper) {
        let groups = self.groups.clone();
        self.step_only(nets, grads, hp, &groups);
    }

    /// Like [`Adam::step`], restricted to the owned groups listed in `only`.
    pub fn step_only(&mut self, nets: &mut Networks<T>, grads: &Grads<T>, hp: AdamHyper, only: &[ParamGroup]) {
        let groups = self.groups.clone();
        self.update(nets, grads, hp, &|name| {
            ParamGroup::of(name).is_some_and(|g| groups.contains(&g) && only.contains(&g))
        });
    }

    /// Updates every parameter of `module` that received a gradient, ignoring groups.
    pub fn step_module(&mut self, module: &mut impl Module<T>, grads: &Grads<T>, hp: AdamHyper) {
        self.update(module, grads, hp, &|_| true);
    }

    fn update<M: Module<T> + ?Sized>(
        &mut self,
        module: &mut M,
        grads: &Grads<T>,
        hp: AdamHyper,
        selected: &dyn Fn(&str) -> bool,
    ) {
        self.steps += 1;
        let t = self.steps as i32;
        let bc1 = 1.0 - hp.beta1.powi(t);
        let bc2 = 1.0 - hp.beta2.powi(t);
        let (b1, b2) = (T::from_f64(hp.beta1), T::from_f64(hp.beta2));
        let (c1, c2) = (T::from_f64(1.0 - hp.beta1), T::from_f64(1.0 - hp.beta2));
        let step_size = T::from_f64(hp.lr / bc1);
        let inv_sqrt_bc2 = T::from_f64(1.0 / bc2.sqrt());
        let eps = T::from_f64(EPS);
        let moments = &mut self.moments;
        module.visit_mut("", &mut |name, p| {
            if !selected(name) {
                return;
            }
            let Some(g) = grads.get(p) else { return };
            let n = g.len();
            let mom = moments.entry(name.to_string()).or_insert_with(|| Moments {
                first: vec![T::zero(); n],
                second: vec![T::zero(); n],
            });
            let values = p.value_mut().data_mut();
            for i in 0..n {
                let gi = g.data()[i];
                let m = b1 * mom.first[i] + c1 * gi;
                let v = b2 * mom.second[i] + c2 * gi * gi;
                mom.first[i] = m;
                mom.second[i] = v;
                values[i] -= step_size * m / (v.sqrt() * inv_sqrt_bc2 + eps);
            }
        });
    }
}
