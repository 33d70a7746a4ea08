//! Parameter storage and the handful of layers the try-on networks use.

use std::cell::RefCell;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Gradients, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
struct Entry {
    name: String,
    value: Arc<Tensor>,
    trainable: bool,
}

/// Named tensors owned by one network. Buffers (e.g. batch-norm running
/// statistics) live here too but are never touched by the optimizer.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.push(name.into(), value, true)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.push(name.into(), value, false)
    }

    fn push(&mut self, name: String, value: Tensor, trainable: bool) -> ParamId {
        assert!(
            self.entries.iter().all(|e| e.name != name),
            "duplicate parameter name {name}"
        );
        self.entries.push(Entry {
            name,
            value: Arc::new(value),
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

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
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

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) {
        let entry = &mut self.entries[id.0];
        assert_eq!(
            entry.value.shape(),
            value.shape(),
            "shape change for {}",
            entry.name
        );
        entry.value = Arc::new(value);
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        Arc::make_mut(&mut self.entries[id.0].value)
    }

    /// Total number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.len())
            .sum()
    }

    pub fn named_tensors(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|e| (e.name.as_str(), &*e.value))
    }

    /// Record every tensor on `tape`. Trainable tensors become gradient
    /// leaves when `track_grads` is set; buffers are always constants.
    pub fn bind<'t>(&self, tape: &'t Tape, mode: Mode, track_grads: bool, seed: u64) -> Bound<'t> {
        let vars = self
            .entries
            .iter()
            .map(|e| tape.leaf_shared(e.value.clone(), track_grads && e.trainable))
            .collect();
        Bound {
            vars,
            mode,
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(seed)),
            stat_updates: RefCell::new(Vec::new()),
        }
    }

    /// Apply running-statistic updates collected during a training forward.
    pub fn apply_updates(&mut self, updates: Vec<(ParamId, Tensor)>) {
        for (id, value) in updates {
            self.set(id, value);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A [`ParamStore`] recorded on a tape for one forward pass.
pub struct Bound<'t> {
    vars: Vec<Var<'t>>,
    mode: Mode,
    rng: RefCell<ChaCha8Rng>,
    stat_updates: RefCell<Vec<(ParamId, Tensor)>>,
}

impl<'t> Bound<'t> {
    pub fn var(&self, id: ParamId) -> Var<'t> {
        self.vars[id.0]
    }

    pub fn training(&self) -> bool {
        self.mode == Mode::Train
    }

    /// Gradients for every entry of the bound store, aligned with its ids.
    pub fn grads(&self, grads: &Gradients) -> Vec<Option<Tensor>> {
        self.vars.iter().map(|&v| grads.get(v).cloned()).collect()
    }

    pub fn take_updates(&self) -> Vec<(ParamId, Tensor)> {
        std::mem::take(&mut *self.stat_updates.borrow_mut())
    }

    fn keep_mask(&self, shape: &[usize], drop_prob: f32) -> Tensor {
        let keep = 1.0 - drop_prob;
        let len: usize = shape.iter().product();
        let mut rng = self.rng.borrow_mut();
        Tensor::new(
            shape,
            (0..len)
                .map(|_| if rng.random::<f32>() < keep { 1.0 / keep } else { 0.0 })
                .collect(),
        )
    }
}

fn uniform(rng: &mut impl Rng, shape: &[usize], bound: f32) -> Tensor {
    let len: usize = shape.iter().product();
    Tensor::new(shape, (0..len).map(|_| rng.random_range(-bound..bound)).collect())
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    weight: ParamId,
    bias: Option<ParamId>,
    stride: usize,
    pad: usize,
}

impl Conv2d {
    /// He-uniform initialised convolution with "same"-style padding `k / 2`.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self::with_options(store, name, cin, cout, kernel, stride, kernel / 2, true, 1.0, rng)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn with_options(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        init_gain: f32,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = (cin * kernel * kernel) as f32;
        let bound = init_gain * (6.0 / fan_in).sqrt();
        let weight = store.add(
            format!("{name}.weight"),
            uniform(rng, &[cout, cin, kernel, kernel], bound),
        );
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[cout])));
        Self {
            weight,
            bias,
            stride,
            pad,
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Var<'t> {
        x.conv2d(p.var(self.weight), self.bias.map(|b| p.var(b)), self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    weight: ParamId,
    bias: ParamId,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        init_gain: f32,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = init_gain * (6.0 / input as f32).sqrt();
        Self {
            weight: store.add(format!("{name}.weight"), uniform(rng, &[input, output], bound)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[output])),
        }
    }

    /// `[N, in] -> [N, out]`
    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Var<'t> {
        x.matmul(p.var(self.weight)).add_row_bias(p.var(self.bias))
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    gamma: ParamId,
    beta: ParamId,
    running_mean: ParamId,
    running_var: ParamId,
    momentum: f32,
    eps: f32,
}

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[channels])),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels])),
            running_mean: store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(&[channels])),
            running_var: store.add_buffer(format!("{name}.running_var"), Tensor::ones(&[channels])),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Var<'t> {
        let tape = x.tape();
        let normed = if p.training() {
            let (normed, mean, var) = x.batch_norm_stats(self.eps);
            let (n, _, h, w) = x.with_value(Tensor::dims4);
            let count = (n * h * w) as f32;
            let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
            let m = self.momentum;
            let rm = p.var(self.running_mean).value();
            let rv = p.var(self.running_var).value();
            let new_mean: Vec<f32> = rm
                .data()
                .iter()
                .zip(&mean)
                .map(|(&r, &b)| (1.0 - m) * r + m * b)
                .collect();
            let new_var: Vec<f32> = rv
                .data()
                .iter()
                .zip(&var)
                .map(|(&r, &b)| (1.0 - m) * r + m * b * unbias)
                .collect();
            let mut updates = p.stat_updates.borrow_mut();
            updates.push((self.running_mean, Tensor::new(rm.shape(), new_mean)));
            updates.push((self.running_var, Tensor::new(rv.shape(), new_var)));
            normed
        } else {
            let rm = p.var(self.running_mean).value();
            let rv = p.var(self.running_var).value();
            let scale: Vec<f32> = rv.data().iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
            let shift: Vec<f32> = rm.data().iter().zip(&scale).map(|(m, s)| -m * s).collect();
            let c = scale.len();
            x.channel_affine(
                tape.constant(Tensor::new(&[c], scale)),
                tape.constant(Tensor::new(&[c], shift)),
            )
        };
        normed.channel_affine(p.var(self.gamma), p.var(self.beta))
    }
}

/// Inverted dropout; identity in eval mode.
#[derive(Clone, Copy, Debug)]
pub struct Dropout(pub f32);

impl Dropout {
    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Var<'t> {
        if !p.training() || self.0 <= 0.0 {
            return x;
        }
        let mask = p.keep_mask(&x.shape(), self.0);
        x.mul(x.tape().constant(mask))
    }
}
