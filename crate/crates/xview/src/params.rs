//! Named parameter storage, per-step graph binding, and the AdamW update.

use std::cell::RefCell;
use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

/// How a parameter is initialized at registration time.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// Uniform in ±1/sqrt(fan_in); fan_in is the first extent for matrices
    /// and the length for vectors.
    UniformFanIn,
    Zeros,
    Ones,
    Const(f64),
}

/// All learnable tensors of a model, in registration order. Registration
/// order is part of the model's identity: it fixes both the RNG draw order
/// at init and the checkpoint layout.
#[derive(Default, Clone)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn register(
        &mut self,
        name: &str,
        shape: &[usize],
        init: Init,
        rng: &mut ChaCha12Rng,
    ) -> ParamId {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter name: {name}"
        );
        let numel: usize = shape.iter().product();
        let data = match init {
            Init::UniformFanIn => {
                let fan_in = shape[0].max(1) as f64;
                let bound = 1.0 / fan_in.sqrt();
                (0..numel)
                    .map(|_| (rng.gen::<f64>() * 2.0 - 1.0) * bound)
                    .collect()
            }
            Init::Zeros => vec![0.0; numel],
            Init::Ones => vec![1.0; numel],
            Init::Const(v) => vec![v; numel],
        };
        let id = self.tensors.len();
        self.names.push(name.to_string());
        self.tensors
            .push(Tensor::new(shape.to_vec(), data).expect("param shape"));
        self.by_name.insert(name.to_string(), id);
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    /// Id of the i-th registered parameter.
    pub fn id_at(&self, i: usize) -> ParamId {
        assert!(i < self.tensors.len());
        ParamId(i)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names
            .iter()
            .map(|n| n.as_str())
            .zip(self.tensors.iter())
    }

    /// Overwrite a parameter (e.g. when loading a checkpoint).
    pub fn set(&mut self, id: ParamId, t: Tensor) -> Result<()> {
        if t.shape() != self.tensors[id.0].shape() {
            return Err(Error::Shape(format!(
                "parameter '{}': shape {:?} vs {:?}",
                self.names[id.0],
                t.shape(),
                self.tensors[id.0].shape()
            )));
        }
        self.tensors[id.0] = t;
        Ok(())
    }
}

/// One forward/backward pass: owns the graph and lazily binds parameters
/// as leaves the first time they are used.
pub struct Session<'a> {
    pub g: Graph,
    store: &'a ParamStore,
    bound: RefCell<Vec<Option<Var>>>,
    trainable: bool,
}

impl<'a> Session<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Session {
            g: Graph::new(),
            store,
            bound: RefCell::new(vec![None; store.len()]),
            trainable: true,
        }
    }

    /// A session whose parameter leaves do not require gradients
    /// (inference / probes).
    pub fn frozen(store: &'a ParamStore) -> Self {
        let mut s = Session::new(store);
        s.trainable = false;
        s
    }

    /// Bind a parameter into the graph (idempotent per session).
    pub fn p(&self, id: ParamId) -> Result<Var> {
        if let Some(v) = self.bound.borrow()[id.0] {
            return Ok(v);
        }
        let v = self.g.leaf(self.store.get(id).clone(), self.trainable)?;
        self.bound.borrow_mut()[id.0] = Some(v);
        Ok(v)
    }

    /// Run backward from a scalar loss and collect gradients for every
    /// registered parameter (zeros for parameters the loss never touched).
    pub fn grads(&self, loss: Var) -> Result<Vec<Tensor>> {
        let grads = self.g.backward(loss)?;
        let bound = self.bound.borrow();
        Ok((0..self.store.len())
            .map(|i| match bound[i] {
                Some(v) => grads.get(v),
                None => Tensor::zeros(self.store.get(ParamId(i)).shape()),
            })
            .collect())
    }
}

/// AdamW with decoupled weight decay and global-norm gradient clipping.
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(store: &ParamStore, lr: f64, weight_decay: f64, grad_clip: f64) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            grad_clip,
            step: 0,
            m: store.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect(),
            v: store.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn state(&self) -> (u64, &[Tensor], &[Tensor]) {
        (self.step, &self.m, &self.v)
    }

    pub fn restore_state(&mut self, step: u64, m: Vec<Tensor>, v: Vec<Tensor>) {
        self.step = step;
        self.m = m;
        self.v = v;
    }

    pub fn update(&mut self, store: &mut ParamStore, grads: &[Tensor]) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::Shape("optimizer: gradient count mismatch".into()));
        }
        for g in grads {
            if !g.all_finite() {
                return Err(Error::NonFinite("gradient passed to optimizer".into()));
            }
        }
        let mut scale = 1.0;
        if self.grad_clip > 0.0 {
            let norm_sq: f64 = grads
                .iter()
                .flat_map(|g| g.data().iter())
                .map(|v| v * v)
                .sum();
            let norm = norm_sq.sqrt();
            if norm > self.grad_clip {
                scale = self.grad_clip / norm;
            }
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..grads.len() {
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = store.get_mut(ParamId(i)).data_mut();
            let g = grads[i].data();
            for e in 0..g.len() {
                let ge = g[e] * scale;
                m[e] = self.beta1 * m[e] + (1.0 - self.beta1) * ge;
                v[e] = self.beta2 * v[e] + (1.0 - self.beta2) * ge * ge;
                let mhat = m[e] / bc1;
                let vhat = v[e] / bc2;
                p[e] -= self.lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * p[e]);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn init_is_seed_deterministic() {
        let build = || {
            let mut rng = ChaCha12Rng::seed_from_u64(7);
            let mut s = ParamStore::new();
            s.register("w", &[4, 3], Init::UniformFanIn, &mut rng);
            s.register("b", &[3], Init::Zeros, &mut rng);
            s
        };
        let a = build();
        let b = build();
        assert_eq!(a.get(a.lookup("w").unwrap()), b.get(b.lookup("w").unwrap()));
    }

    #[test]
    fn init_respects_fan_in_bound() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let mut s = ParamStore::new();
        let w = s.register("w", &[16, 8], Init::UniformFanIn, &mut rng);
        let bound = 1.0 / 4.0;
        assert!(s.get(w).data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn adamw_decreases_a_quadratic() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let w = store.register("w", &[4], Init::UniformFanIn, &mut rng);
        let mut opt = AdamW::new(&store, 0.05, 0.0, 0.0);
        let loss_of = |store: &ParamStore| -> f64 {
            store.get(w).data().iter().map(|v| (v - 1.0) * (v - 1.0)).sum()
        };
        let l0 = loss_of(&store);
        for _ in 0..100 {
            let s = Session::new(&store);
            let wv = s.p(w).unwrap();
            let ones = s.g.constant(Tensor::full(&[4], 1.0)).unwrap();
            let diff = s.g.sub(wv, ones).unwrap();
            let sq = s.g.mul(diff, diff).unwrap();
            let loss = s.g.sum_all(sq).unwrap();
            let grads = s.grads(loss).unwrap();
            opt.update(&mut store, &grads).unwrap();
        }
        assert!(loss_of(&store) < l0 * 0.01);
    }

    #[test]
    fn unused_param_gets_zero_grad() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let a = store.register("a", &[2], Init::UniformFanIn, &mut rng);
        let b = store.register("b", &[2], Init::UniformFanIn, &mut rng);
        let s = Session::new(&store);
        let av = s.p(a).unwrap();
        let loss = s.g.sum_all(s.g.mul(av, av).unwrap()).unwrap();
        let grads = s.grads(loss).unwrap();
        assert!(grads[1].data().iter().all(|&v| v == 0.0));
        let _ = b;
    }
}
