//! Parameterized layers shared by every block of the network.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, NodeId, StatUpdate};
use crate::kernels::ConvGeom;
use crate::params::{init_tensor, Init, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Declares named parameters into a [`ParamStore`].
///
/// In dry mode every tensor is zero-initialized without touching the RNG,
/// which is enough to count parameters or to allocate a store that a
/// checkpoint will overwrite.
pub struct Builder<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
    prefix: String,
    dry: bool,
}

impl<'a> Builder<'a> {
    pub fn new(store: &'a mut ParamStore, seed: u64) -> Self {
        Builder {
            store,
            rng: ChaCha8Rng::seed_from_u64(seed),
            prefix: String::new(),
            dry: false,
        }
    }

    pub fn dry(store: &'a mut ParamStore) -> Self {
        Builder {
            store,
            rng: ChaCha8Rng::seed_from_u64(0),
            prefix: String::new(),
            dry: true,
        }
    }

    /// Run `f` with `name` appended to the parameter-name prefix.
    pub fn scoped<T>(&mut self, name: &str, f: impl FnOnce(&mut Builder<'a>) -> T) -> T {
        let saved = self.prefix.clone();
        self.prefix = if saved.is_empty() {
            name.to_string()
        } else {
            format!("{saved}.{name}")
        };
        let out = f(self);
        self.prefix = saved;
        out
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    fn make(&mut self, shape: &[usize], init: Init) -> Tensor {
        if self.dry {
            Tensor::zeros(shape)
        } else {
            init_tensor(shape, init, &mut self.rng)
        }
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> ParamId {
        let t = self.make(shape, init);
        let full = self.full_name(name);
        self.store.add_param(full, t)
    }

    pub fn buffer(&mut self, name: &str, shape: &[usize], init: Init) -> ParamId {
        let t = match init {
            Init::Ones => Tensor::full(shape, 1.0),
            _ => Tensor::zeros(shape),
        };
        let full = self.full_name(name);
        self.store.add_buffer(full, t)
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub geom: ConvGeom,
}

impl Conv2d {
    pub fn new(
        b: &mut Builder,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: (usize, usize),
        geom: ConvGeom,
        bias: bool,
    ) -> Self {
        assert!(cin % geom.groups == 0 && cout % geom.groups == 0, "{name}: channels not divisible by groups");
        let fan_in = cin / geom.groups * kernel.0 * kernel.1;
        b.scoped(name, |b| Conv2d {
            weight: b.param(
                "weight",
                &[cout, cin / geom.groups, kernel.0, kernel.1],
                Init::KaimingUniform { fan_in },
            ),
            bias: bias.then(|| b.param("bias", &[cout], Init::Zeros)),
            geom,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        g.conv2d(x, w, b, self.geom)
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm {
    pub fn new(b: &mut Builder, name: &str, channels: usize, eps: f64) -> Self {
        b.scoped(name, |b| BatchNorm {
            gamma: b.param("weight", &[channels], Init::Ones),
            beta: b.param("bias", &[channels], Init::Zeros),
            running_mean: b.buffer("running_mean", &[channels], Init::Zeros),
            running_var: b.buffer("running_var", &[channels], Init::Ones),
            eps,
            momentum: 0.1,
        })
    }

    /// Batch statistics in training mode, running statistics otherwise.
    pub fn forward(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        if g.training() {
            let (out, mean, var) = g.batch_norm_train(x, gamma, beta, self.eps);
            g.record_stats(StatUpdate {
                running_mean: self.running_mean,
                running_var: self.running_var,
                momentum: self.momentum,
                batch_mean: mean,
                batch_var: var,
            });
            out
        } else {
            let mean = g.param_tensor(self.running_mean).data();
            let var = g.param_tensor(self.running_var).data();
            g.batch_norm_eval(x, gamma, beta, mean, var, self.eps)
        }
    }
}

/// Convolution without bias, batch norm, then ReLU.
#[derive(Debug, Clone)]
pub struct ConvBnRelu {
    pub conv: Conv2d,
    pub bn: BatchNorm,
}

impl ConvBnRelu {
    pub fn new(
        b: &mut Builder,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: (usize, usize),
        geom: ConvGeom,
        eps: f64,
    ) -> Self {
        b.scoped(name, |b| ConvBnRelu {
            conv: Conv2d::new(b, "conv", cin, cout, kernel, geom, false),
            bn: BatchNorm::new(b, "bn", cout, eps),
        })
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let y = self.conv.forward(g, x);
        let y = self.bn.forward(g, y);
        g.relu(y)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(b: &mut Builder, name: &str, din: usize, dout: usize, bias: bool) -> Self {
        b.scoped(name, |b| Linear {
            weight: b.param("weight", &[dout, din], Init::KaimingUniform { fan_in: din }),
            bias: bias.then(|| b.param("bias", &[dout], Init::Zeros)),
        })
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        g.linear(x, w, b)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(b: &mut Builder, name: &str, dim: usize, eps: f64) -> Self {
        b.scoped(name, |b| LayerNorm {
            gamma: b.param("weight", &[dim], Init::Ones),
            beta: b.param("bias", &[dim], Init::Zeros),
            eps,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.layer_norm(x, gamma, beta, self.eps)
    }
}

/// Fold recorded batch statistics into the running buffers.
pub fn apply_stat_updates(store: &mut ParamStore, updates: &[StatUpdate]) {
    for u in updates {
        let m = u.momentum;
        for (r, &b) in store.get_mut(u.running_mean).data_mut().iter_mut().zip(&u.batch_mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, &b) in store
            .get_mut(u.running_var)
            .data_mut()
            .iter_mut()
            .zip(&u.batch_var)
        {
            *r = (1.0 - m) * *r + m * b;
        }
    }
}
