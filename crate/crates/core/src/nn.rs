//! Neural-network building blocks on top of the [`crate::ad`] tape:
//! a named parameter store, dense/convolution/batch-norm layers, and the
//! Adam optimizer.
//!
//! Parameters live in a [`ParamSet`] owned by the model between steps. Each
//! forward pass opens a [`Graph`], which lazily copies the parameters it
//! touches onto a fresh tape; after `backward`, gradients are read back per
//! parameter through the same handles.

use crate::ad::{Gradients, Scalar, Tape, Var};
use ndarray::{Array1, ArrayD, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Handle to one named tensor in a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

struct ParamEntry<T: Scalar> {
    name: String,
    value: ArrayD<T>,
    trainable: bool,
}

/// Named collection of model tensors (trainable weights plus batch-norm
/// running statistics).
pub struct ParamSet<T: Scalar> {
    entries: Vec<ParamEntry<T>>,
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet { entries: Vec::new() }
    }

    pub fn add(&mut self, name: &str, value: ArrayD<T>) -> ParamId {
        self.add_with(name, value, true)
    }

    pub fn add_buffer(&mut self, name: &str, value: ArrayD<T>) -> ParamId {
        self.add_with(name, value, false)
    }

    fn add_with(&mut self, name: &str, value: ArrayD<T>, trainable: bool) -> ParamId {
        assert!(
            self.entries.iter().all(|e| e.name != name),
            "duplicate parameter name {name}"
        );
        self.entries.push(ParamEntry {
            name: name.to_string(),
            value,
            trainable,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &ArrayD<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ArrayD<T> {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }
}

/// One forward pass: a tape plus the parameter bindings made on it.
pub struct Graph<'p, T: Scalar> {
    pub tape: Tape<T>,
    params: &'p ParamSet<T>,
    bound: Vec<Option<Var>>,
    /// Batch statistics observed by batch-norm layers this pass, to fold
    /// into running statistics after the step.
    bn_observed: Vec<(ParamId, ParamId, Array1<T>, Array1<T>)>,
}

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new(params: &'p ParamSet<T>) -> Self {
        Graph {
            tape: Tape::new(),
            params,
            bound: vec![None; params.len()],
            bn_observed: Vec::new(),
        }
    }

    /// Read-only view of the parameter set this graph is bound to.
    pub fn params_ref(&self) -> &'p ParamSet<T> {
        self.params
    }

    /// Tape variable for a parameter, created on first use.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.tape.leaf(self.params.get(id).clone());
        self.bound[id.0] = Some(v);
        v
    }

    /// Gradient for a parameter after `backward`, if it was used.
    pub fn grad<'g>(&self, grads: &'g Gradients<T>, id: ParamId) -> Option<&'g ArrayD<T>> {
        self.bound[id.0].and_then(|v| grads.get(v))
    }

    /// Consumes the graph, extracting per-parameter gradients and observed
    /// batch-norm statistics so the parameter set can be mutated afterwards.
    pub fn collect(self, grads: &Gradients<T>) -> StepResult<T> {
        let per_param = self
            .bound
            .iter()
            .map(|b| b.and_then(|v| grads.get(v).cloned()))
            .collect();
        StepResult {
            grads: per_param,
            bn_observed: self.bn_observed,
        }
    }
}

/// Gradients and batch-norm statistics of one completed forward/backward
/// pass, detached from the tape.
pub struct StepResult<T: Scalar> {
    grads: Vec<Option<ArrayD<T>>>,
    bn_observed: Vec<(ParamId, ParamId, Array1<T>, Array1<T>)>,
}

impl<T: Scalar> StepResult<T> {
    pub fn grad(&self, id: ParamId) -> Option<&ArrayD<T>> {
        self.grads[id.0].as_ref()
    }

    /// Momentum-folds observed batch statistics into running mean/var.
    pub fn apply_bn_updates(&self, params: &mut ParamSet<T>, momentum: T) {
        let one_m = T::one() - momentum;
        for (mid, vid, mean, var) in &self.bn_observed {
            for (slot, &m) in params.get_mut(*mid).iter_mut().zip(mean.iter()) {
                *slot = one_m * *slot + momentum * m;
            }
            for (slot, &v) in params.get_mut(*vid).iter_mut().zip(var.iter()) {
                *slot = one_m * *slot + momentum * v;
            }
        }
    }
}

/// Whether a pass uses batch statistics (training) or running statistics
/// (inference) in batch-norm layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// He-normal weight init for a layer with the given fan-in.
pub fn he_normal<T: Scalar, R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> ArrayD<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).unwrap();
    ArrayD::from_shape_fn(IxDyn(shape), |_| {
        <T as Scalar>::from_f64(dist.sample(rng))
    })
}

/// Fully connected layer: y = x·W + b, W of shape [in, out].
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
}

impl Dense {
    pub fn new<T: Scalar, R: Rng>(
        params: &mut ParamSet<T>,
        rng: &mut R,
        name: &str,
        n_in: usize,
        n_out: usize,
    ) -> Self {
        let w = params.add(&format!("{name}.w"), he_normal(rng, &[n_in, n_out], n_in));
        let b = params.add(&format!("{name}.b"), ArrayD::zeros(IxDyn(&[n_out])));
        Dense { w, b }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let w = g.param(self.w);
        let b = g.param(self.b);
        let y = g.tape.matmul(x, w);
        g.tape.add_bias(y, b)
    }
}

/// 3×3 convolution layer (stride 1, padding 1).
pub struct Conv3x3 {
    pub w: ParamId,
    pub b: ParamId,
}

impl Conv3x3 {
    pub fn new<T: Scalar, R: Rng>(
        params: &mut ParamSet<T>,
        rng: &mut R,
        name: &str,
        c_in: usize,
        c_out: usize,
    ) -> Self {
        let w = params.add(
            &format!("{name}.w"),
            he_normal(rng, &[c_out, c_in, 3, 3], c_in * 9),
        );
        let b = params.add(&format!("{name}.b"), ArrayD::zeros(IxDyn(&[c_out])));
        Conv3x3 { w, b }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let w = g.param(self.w);
        let b = g.param(self.b);
        g.tape.conv3x3(x, w, b)
    }
}

/// Batch normalization over axis 1 (works for [N,F] and [B,C,H,W] inputs).
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new<T: Scalar>(params: &mut ParamSet<T>, name: &str, n_chan: usize) -> Self {
        let gamma = params.add(
            &format!("{name}.gamma"),
            ArrayD::from_elem(IxDyn(&[n_chan]), T::one()),
        );
        let beta = params.add(&format!("{name}.beta"), ArrayD::zeros(IxDyn(&[n_chan])));
        let running_mean =
            params.add_buffer(&format!("{name}.running_mean"), ArrayD::zeros(IxDyn(&[n_chan])));
        let running_var = params.add_buffer(
            &format!("{name}.running_var"),
            ArrayD::from_elem(IxDyn(&[n_chan]), T::one()),
        );
        BatchNorm {
            gamma,
            beta,
            running_mean,
            running_var,
            eps: 1e-5,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var, mode: Mode) -> Var {
        match mode {
            Mode::Train => {
                let gamma = g.param(self.gamma);
                let beta = g.param(self.beta);
                let y = g
                    .tape
                    .batch_norm(x, gamma, beta, <T as Scalar>::from_f64(self.eps));
                let (mean, var) = g.tape.batch_stats(y).unwrap();
                let (mean, var) = (mean.clone(), var.clone());
                g.bn_observed
                    .push((self.running_mean, self.running_var, mean, var));
                y
            }
            Mode::Eval => {
                // y = gamma*(x - mu)/sqrt(var+eps) + beta as a fixed affine
                let eps = <T as Scalar>::from_f64(self.eps);
                let gam = g.params.get(self.gamma).iter().copied().collect::<Vec<_>>();
                let bet = g.params.get(self.beta).iter().copied().collect::<Vec<_>>();
                let mu = g
                    .params
                    .get(self.running_mean)
                    .iter()
                    .copied()
                    .collect::<Vec<_>>();
                let var = g
                    .params
                    .get(self.running_var)
                    .iter()
                    .copied()
                    .collect::<Vec<_>>();
                let mut a = Vec::with_capacity(gam.len());
                let mut b = Vec::with_capacity(gam.len());
                for i in 0..gam.len() {
                    let inv = (var[i] + eps).sqrt().recip();
                    a.push(gam[i] * inv);
                    b.push(bet[i] - gam[i] * mu[i] * inv);
                }
                g.tape.affine_chan(x, a, b)
            }
        }
    }
}

/// Stack of dense layers with ReLU between (not after the last).
pub struct Mlp {
    pub layers: Vec<Dense>,
}

impl Mlp {
    /// `dims` lists every layer width including input and output, e.g.
    /// `[in, hidden, hidden, out]`.
    pub fn new<T: Scalar, R: Rng>(
        params: &mut ParamSet<T>,
        rng: &mut R,
        name: &str,
        dims: &[usize],
    ) -> Self {
        assert!(dims.len() >= 2);
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Dense::new(params, rng, &format!("{name}.{i}"), w[0], w[1]))
            .collect();
        Mlp { layers }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let n = self.layers.len();
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, h);
            if i + 1 < n {
                h = g.tape.relu(h);
            }
        }
        h
    }
}

/// Adam optimizer over the trainable entries of a [`ParamSet`].
pub struct Adam<T: Scalar> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<ArrayD<T>>,
    v: Vec<ArrayD<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: &ParamSet<T>, lr: f64) -> Self {
        let m = params
            .ids()
            .map(|id| ArrayD::zeros(params.get(id).raw_dim()))
            .collect::<Vec<_>>();
        let v = m.clone();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m,
            v,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// Applies one update. `frozen` can exclude parameters by name (e.g. the
    /// conformation head during pose-only warm-up); frozen or gradient-free
    /// parameters keep their moment buffers untouched.
    pub fn step(
        &mut self,
        params: &mut ParamSet<T>,
        step: &StepResult<T>,
        frozen: &dyn Fn(&str) -> bool,
    ) {
        self.t += 1;
        let b1 = <T as Scalar>::from_f64(self.beta1);
        let b2 = <T as Scalar>::from_f64(self.beta2);
        let one = T::one();
        let bc1 = <T as Scalar>::from_f64(1.0 - self.beta1.powi(self.t as i32));
        let bc2 = <T as Scalar>::from_f64(1.0 - self.beta2.powi(self.t as i32));
        let lr = <T as Scalar>::from_f64(self.lr);
        let eps = <T as Scalar>::from_f64(self.eps);

        for id in params.ids() {
            if !params.is_trainable(id) || frozen(params.name(id)) {
                continue;
            }
            let g = match step.grad(id) {
                Some(g) => g,
                None => continue,
            };
            let m = &mut self.m[id.0];
            let v = &mut self.v[id.0];
            let p = params.get_mut(id);
            for ((pv, gv), (mv, vv)) in p
                .iter_mut()
                .zip(g.iter())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mv = b1 * *mv + (one - b1) * *gv;
                *vv = b2 * *vv + (one - b2) * *gv * *gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv = *pv - lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }

    /// Serializes optimizer state (step count then m/v buffers in id order).
    pub fn state_arrays(&self) -> (u64, &[ArrayD<T>], &[ArrayD<T>]) {
        (self.t, &self.m, &self.v)
    }

    pub fn restore_state(&mut self, t: u64, m: Vec<ArrayD<T>>, v: Vec<ArrayD<T>>) {
        assert_eq!(m.len(), self.m.len());
        assert_eq!(v.len(), self.v.len());
        self.t = t;
        self.m = m;
        self.v = v;
    }
}
