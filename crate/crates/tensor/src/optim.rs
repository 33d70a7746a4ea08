use crate::nn::ParamStore;
use crate::Tensor;

/// Adam with optional L2 weight decay folded into the gradient.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    first: Vec<Vec<f32>>,
    second: Vec<Vec<f32>>,
    steps: i32,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f32, betas: (f32, f32)) -> Self {
        let shapes = store.ids().map(|id| store.get(id).len());
        let first: Vec<Vec<f32>> = shapes.map(|n| vec![0.0; n]).collect();
        Self {
            lr,
            beta1: betas.0,
            beta2: betas.1,
            eps: 1e-8,
            weight_decay: 0.0,
            second: first.clone(),
            first,
            steps: 0,
        }
    }

    pub fn with_weight_decay(mut self, weight_decay: f32) -> Self {
        self.weight_decay = weight_decay;
        self
    }

    pub fn steps(&self) -> i32 {
        self.steps
    }

    /// One update of every trainable entry that received a gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>]) {
        assert_eq!(grads.len(), store.len(), "gradient list does not match store");
        self.steps += 1;
        let bc1 = 1.0 - self.beta1.powi(self.steps);
        let bc2 = 1.0 - self.beta2.powi(self.steps);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let Some(grad) = &grads[id.index()] else {
                continue;
            };
            if !store.is_trainable(id) {
                continue;
            }
            let m = &mut self.first[id.index()];
            let v = &mut self.second[id.index()];
            let param = store.get_mut(id);
            for (((p, &g), m), v) in param
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                let g = g + self.weight_decay * *p;
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *p -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}
