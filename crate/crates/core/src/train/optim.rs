use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// SGD with momentum, optional Nesterov correction and L2 weight decay:
///
/// ```text
/// g ← ∇ + λ p;  b ← μ b + g;  d ← nesterov ? g + μ b : b;  p ← p − lr d
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    pub nesterov: bool,
    buffers: Vec<Option<Tensor>>,
}

impl Sgd {
    pub fn new(n_params: usize, momentum: f64, weight_decay: f64, nesterov: bool) -> Self {
        Sgd { momentum, weight_decay, nesterov, buffers: vec![None; n_params] }
    }

    pub fn buffer(&self, id: ParamId) -> Option<&Tensor> {
        self.buffers.get(id.0).and_then(Option::as_ref)
    }

    pub fn set_buffer(&mut self, id: ParamId, t: Tensor) {
        self.buffers[id.0] = Some(t);
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &[(ParamId, Tensor)], lr: f64) {
        let (mu, wd) = (self.momentum, self.weight_decay);
        for (id, grad) in grads {
            let p = params.get_mut(*id);
            let buf = self.buffers[id.0].get_or_insert_with(|| Tensor::zeros(grad.shape()));
            for ((w, &g), b) in p.data_mut().iter_mut().zip(grad.data()).zip(buf.data_mut()) {
                let g = g + wd * *w;
                *b = mu * *b + g;
                let d = if self.nesterov { g + mu * *b } else { *b };
                *w -= lr * d;
            }
        }
    }
}
