//! The gating network: per-scalar embedders feeding a ReLU trunk that ends in
//! two logits, read as `(log λ, log(1 − λ))` after a log-softmax.
//!
//! Parameters live in one flat `f64` vector so the optimizer, checkpointing
//! and gradient checks treat them uniformly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Result};

/// Architecture of an [`AdaptorNet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NetShape {
    /// Length of the context-vector input; 0 when that feature is off.
    pub ctx_dim: usize,
    /// Number of scalar inputs, each with its own embedder.
    pub scalars: usize,
    /// Output width of every scalar embedder.
    pub embed_dim: usize,
    pub hidden_layers: usize,
    pub hidden_width: usize,
}

impl NetShape {
    pub fn trunk_input(&self) -> usize {
        self.ctx_dim + self.scalars * self.embed_dim
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Linear {
    w: usize,
    b: usize,
    n_in: usize,
    n_out: usize,
}

impl Linear {
    fn size(&self) -> usize {
        self.n_out * (self.n_in + 1)
    }

    fn forward(&self, p: &[f64], x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        let w = &p[self.w..self.w + self.n_in * self.n_out];
        for (o, row) in w.chunks_exact(self.n_in).enumerate() {
            let s: f64 = row.iter().zip(x).map(|(a, b)| a * b).sum();
            out.push(s + p[self.b + o]);
        }
    }

    /// Accumulates parameter gradients and returns `dL/dx`.
    fn backward(&self, p: &[f64], x: &[f64], dy: &[f64], grad: &mut [f64]) -> Vec<f64> {
        let mut dx = vec![0.0; self.n_in];
        for (o, &g) in dy.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grad[self.b + o] += g;
            let row = self.w + o * self.n_in;
            for i in 0..self.n_in {
                grad[row + i] += g * x[i];
                dx[i] += g * p[row + i];
            }
        }
        dx
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    embed: Vec<(Linear, Linear)>,
    trunk: Vec<Linear>,
    out: Linear,
    total: usize,
}

impl Layout {
    fn new(shape: &NetShape) -> Self {
        let mut next = 0;
        let mut linear = |n_in: usize, n_out: usize| {
            let l = Linear {
                w: next,
                b: next + n_in * n_out,
                n_in,
                n_out,
            };
            next += l.size();
            l
        };
        let embed = (0..shape.scalars)
            .map(|_| (linear(1, shape.embed_dim), linear(shape.embed_dim, shape.embed_dim)))
            .collect();
        let mut trunk = Vec::with_capacity(shape.hidden_layers);
        let mut width = shape.trunk_input();
        for _ in 0..shape.hidden_layers {
            trunk.push(linear(width, shape.hidden_width));
            width = shape.hidden_width;
        }
        let out = linear(width, 2);
        Self {
            embed,
            trunk,
            out,
            total: next,
        }
    }
}

/// Intermediate values of one forward pass, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct Trace {
    embed_pre: Vec<Vec<f64>>,
    embed_act: Vec<Vec<f64>>,
    /// Trunk input followed by each hidden layer's output after dropout.
    acts: Vec<Vec<f64>>,
    /// Pre-activations of each hidden layer.
    pre: Vec<Vec<f64>>,
    /// Dropout multipliers per hidden layer (0 or 1/(1-p)); empty in eval mode.
    masks: Vec<Vec<f64>>,
    pub logits: [f64; 2],
}

impl Trace {
    /// Which ReLU units are active; the network is smooth in its parameters
    /// wherever this pattern is constant.
    pub fn active_units(&self) -> Vec<bool> {
        self.embed_pre.iter().chain(&self.pre).flatten().map(|&v| v > 0.0).collect()
    }

    /// `(log λ, log(1 − λ))`.
    pub fn log_lambdas(&self) -> (f64, f64) {
        log_softmax(self.logits)
    }

    pub fn lambda(&self) -> f64 {
        self.log_lambdas().0.exp()
    }
}

/// Numerically stable two-way log-softmax.
pub fn log_softmax(z: [f64; 2]) -> (f64, f64) {
    let m = z[0].max(z[1]);
    let lse = m + ((z[0] - m).exp() + (z[1] - m).exp()).ln();
    (z[0] - lse, z[1] - lse)
}

/// Dropout applied to trunk activations during training.
pub struct Dropout<'a> {
    pub rate: f64,
    pub rng: &'a mut ChaCha8Rng,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptorNet {
    shape: NetShape,
    layout: Layout,
    params: Vec<f64>,
}

impl AdaptorNet {
    /// Weights uniform in `±1/√fan_in`, biases zero.
    pub fn new(shape: NetShape, seed: u64) -> Result<Self> {
        if shape.hidden_width == 0 || shape.embed_dim == 0 && shape.scalars > 0 {
            return invalid("adaptor layers must have positive width");
        }
        if shape.trunk_input() == 0 {
            return invalid("adaptor has no active input features");
        }
        let layout = Layout::new(&shape);
        let mut params = vec![0.0; layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = |l: &Linear| {
            let bound = 1.0 / (l.n_in as f64).sqrt();
            for p in &mut params[l.w..l.w + l.n_in * l.n_out] {
                *p = rng.random_range(-bound..bound);
            }
        };
        for (a, b) in &layout.embed {
            init(a);
            init(b);
        }
        for l in &layout.trunk {
            init(l);
        }
        init(&layout.out);
        Ok(Self {
            shape,
            layout,
            params,
        })
    }

    pub fn from_params(shape: NetShape, params: Vec<f64>) -> Result<Self> {
        let layout = Layout::new(&shape);
        if params.len() != layout.total {
            return invalid(format!(
                "expected {} adaptor parameters, got {}",
                layout.total,
                params.len()
            ));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return invalid("adaptor parameters must be finite");
        }
        Ok(Self {
            shape,
            layout,
            params,
        })
    }

    pub fn shape(&self) -> &NetShape {
        &self.shape
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Set the output layer to zero so that λ = 0.5 for every input.
    pub fn zero_output_layer(&mut self) {
        let l = self.layout.out;
        self.params[l.w..l.w + l.size()].fill(0.0);
    }

    fn check_input(&self, ctx: &[f64], scalars: &[f64]) -> Result<()> {
        if ctx.len() != self.shape.ctx_dim || scalars.len() != self.shape.scalars {
            return invalid(format!(
                "adaptor expects {} context and {} scalar inputs, got {} and {}",
                self.shape.ctx_dim,
                self.shape.scalars,
                ctx.len(),
                scalars.len()
            ));
        }
        if ctx.iter().chain(scalars).any(|v| !v.is_finite()) {
            return invalid("adaptor features must be finite");
        }
        Ok(())
    }

    /// Forward pass; dropout is active only when `dropout` is given.
    pub fn forward(&self, ctx: &[f64], scalars: &[f64], mut dropout: Option<Dropout<'_>>) -> Result<Trace> {
        self.check_input(ctx, scalars)?;
        let p = &self.params;
        let mut embed_pre = Vec::with_capacity(self.shape.scalars);
        let mut embed_act = Vec::with_capacity(self.shape.scalars);
        let mut x0 = Vec::with_capacity(self.shape.trunk_input());
        x0.extend_from_slice(ctx);
        let mut buf = Vec::new();
        for ((first, second), &s) in self.layout.embed.iter().zip(scalars) {
            first.forward(p, &[s], &mut buf);
            let pre = buf.clone();
            let act: Vec<f64> = pre.iter().map(|v| v.max(0.0)).collect();
            second.forward(p, &act, &mut buf);
            x0.extend_from_slice(&buf);
            embed_pre.push(pre);
            embed_act.push(act);
        }
        let mut acts = vec![x0];
        let mut pre = Vec::with_capacity(self.layout.trunk.len());
        let mut masks = Vec::new();
        for l in &self.layout.trunk {
            l.forward(p, acts.last().unwrap(), &mut buf);
            let mut a: Vec<f64> = buf.iter().map(|v| v.max(0.0)).collect();
            if let Some(d) = dropout.as_mut() {
                let keep = 1.0 - d.rate;
                let mask: Vec<f64> = (0..a.len())
                    .map(|_| if d.rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
                    .collect();
                for (v, m) in a.iter_mut().zip(&mask) {
                    *v *= m;
                }
                masks.push(mask);
            }
            pre.push(buf.clone());
            acts.push(a);
        }
        self.layout.out.forward(p, acts.last().unwrap(), &mut buf);
        Ok(Trace {
            embed_pre,
            embed_act,
            acts,
            pre,
            masks,
            logits: [buf[0], buf[1]],
        })
    }

    /// Backpropagate `dL/dlogits` through `trace`, adding into `grad`.
    pub fn backward(&self, trace: &Trace, scalars: &[f64], dlogits: [f64; 2], grad: &mut [f64]) {
        let p = &self.params;
        let mut dy = self
            .layout
            .out
            .backward(p, trace.acts.last().unwrap(), &dlogits, grad);
        for (li, l) in self.layout.trunk.iter().enumerate().rev() {
            for (j, g) in dy.iter_mut().enumerate() {
                if trace.pre[li][j] <= 0.0 {
                    *g = 0.0;
                } else if let Some(mask) = trace.masks.get(li) {
                    *g *= mask[j];
                }
            }
            dy = l.backward(p, &trace.acts[li], &dy, grad);
        }
        let m = self.shape.embed_dim;
        let offset = self.shape.ctx_dim;
        for (e, (first, second)) in self.layout.embed.iter().enumerate() {
            let de = &dy[offset + e * m..offset + (e + 1) * m];
            let mut da = second.backward(p, &trace.embed_act[e], de, grad);
            for (g, &z) in da.iter_mut().zip(&trace.embed_pre[e]) {
                if z <= 0.0 {
                    *g = 0.0;
                }
            }
            first.backward(p, &[scalars[e]], &da, grad);
        }
    }

    /// Round every parameter to the nearest `f32`.
    pub fn round_to_f32(&mut self) {
        for p in &mut self.params {
            *p = *p as f32 as f64;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shape() -> NetShape {
        NetShape {
            ctx_dim: 3,
            scalars: 2,
            embed_dim: 4,
            hidden_layers: 2,
            hidden_width: 5,
        }
    }

    #[test]
    fn zero_output_gives_half() {
        let mut net = AdaptorNet::new(shape(), 1).unwrap();
        net.zero_output_layer();
        let t = net.forward(&[0.1, 0.2, 0.3], &[1.0, -1.0], None).unwrap();
        assert_eq!(t.lambda(), 0.5);
    }

    #[test]
    fn eval_mode_is_deterministic_and_valid() {
        let net = AdaptorNet::new(shape(), 2).unwrap();
        let a = net.forward(&[0.5, -0.2, 0.3], &[0.3, 2.0], None).unwrap();
        let b = net.forward(&[0.5, -0.2, 0.3], &[0.3, 2.0], None).unwrap();
        assert_eq!(a.logits, b.logits);
        let (l, m) = a.log_lambdas();
        assert!((l.exp() + m.exp() - 1.0).abs() < 1e-12);
        assert!(net.forward(&[0.0; 3], &[f64::NAN, 0.0], None).is_err());
        assert!(net.forward(&[0.0; 2], &[0.0, 0.0], None).is_err());
    }

    #[test]
    fn param_count() {
        let net = AdaptorNet::new(shape(), 0).unwrap();
        let embed = 2 * ((4 + 4) + (4 * 4 + 4));
        let trunk = (11 * 5 + 5) + (5 * 5 + 5) + (5 * 2 + 2);
        assert_eq!(net.num_params(), embed + trunk);
    }
}
