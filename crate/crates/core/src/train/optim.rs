use crate::model::ModelParams;
use crate::nn::Parameters;

/// Adam with L2 weight decay folded into the gradient.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(params: &ModelParams, lr: f64, weight_decay: f64) -> Self {
        let n = params.parameter_count();
        Adam {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Updates `params` in place, then rounds them to `f32`.
    pub fn step(&mut self, params: &mut ModelParams, grads: &ModelParams) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let mut i = 0;
        let gs = grads.named_tensors();
        for ((_, p), (_, g)) in params.named_tensors_mut().into_iter().zip(gs) {
            for (w, &gv) in p.data.iter_mut().zip(&g.data) {
                let gv = gv + self.weight_decay * *w;
                self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * gv;
                self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * gv * gv;
                let mh = self.m[i] / c1;
                let vh = self.v[i] / c2;
                *w -= self.lr * mh / (vh.sqrt() + self.eps);
                i += 1;
            }
        }
        params.quantize();
    }
}
