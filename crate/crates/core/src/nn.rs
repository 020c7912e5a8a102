//! Parameterized layers built on [`crate::tensor`].
//!
//! Parameters live in a [`ParamStore`] outside of any graph. Each forward
//! pass binds the store into a fresh [`Graph`] (see [`Bound`]) and layers
//! look their weights up by [`ParamId`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Graph, Tensor, TensorError, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

/// Ordered, named collection of parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            value,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Scalar count over parameters whose name starts with `prefix`.
    pub fn numel_with_prefix(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|p| p.name.starts_with(prefix))
            .map(|p| p.value.numel())
            .sum()
    }

    /// Sets every parameter whose name starts with `prefix` to zero.
    pub fn zero_prefix(&mut self, prefix: &str) {
        for p in self
            .params
            .iter_mut()
            .filter(|p| p.name.starts_with(prefix))
        {
            p.value.data_mut().fill(0.0);
        }
    }

    /// Euclidean distance between two stores with identical layout.
    pub fn l2_distance(&self, other: &ParamStore) -> f64 {
        self.params
            .iter()
            .zip(&other.params)
            .flat_map(|(a, b)| a.value.data().iter().zip(b.value.data()))
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
    }
}

/// A [`ParamStore`] entered into one graph. Trainable bindings become
/// gradient-carrying leaves, frozen ones become constants.
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn new(g: &mut Graph, store: &ParamStore, trainable: bool) -> Self {
        let vars = store
            .params
            .iter()
            .map(|p| {
                if trainable {
                    g.leaf(p.value.clone())
                } else {
                    g.constant(p.value.clone())
                }
            })
            .collect();
        Self { vars }
    }

    /// Uses already-created graph nodes as the parameters, in store order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Gradient buffers aligned with a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    bufs: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            bufs: store
                .params
                .iter()
                .map(|p| vec![0.0; p.value.numel()])
                .collect(),
        }
    }

    /// Adds the gradients a finished backward pass left on `bound`.
    /// Parameters that did not take part in the graph are left alone.
    pub fn accumulate(&mut self, g: &Graph, bound: &Bound) {
        for (buf, &v) in self.bufs.iter_mut().zip(&bound.vars) {
            if let Some(gr) = g.grad(v) {
                for (b, x) in buf.iter_mut().zip(gr) {
                    *b += x;
                }
            }
        }
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.bufs[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.bufs[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.bufs.iter().map(Vec::as_slice)
    }

    pub fn scale(&mut self, factor: f64) {
        for b in &mut self.bufs {
            for v in b.iter_mut() {
                *v *= factor;
            }
        }
    }

    pub fn zero(&mut self) {
        for b in &mut self.bufs {
            b.fill(0.0);
        }
    }
}

/// Seeded parameter initializer.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Xavier-uniform values in `±sqrt(6 / (fan_in + fan_out))`.
    pub fn xavier(&mut self, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| self.rng.random_range(-bound..bound))
            .collect();
        Tensor::new(shape.to_vec(), data).expect("shape product matches")
    }
}

fn check_dims(what: &str, dims: &[usize]) -> Result<(), TensorError> {
    if dims.contains(&0) {
        return Err(TensorError::InvalidArgument(format!(
            "{what}: dimensions must be positive, got {dims:?}"
        )));
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Result<Self, TensorError> {
        check_dims(name, &[in_dim, out_dim])?;
        let weight = store.add(
            format!("{name}.weight"),
            init.xavier(&[in_dim, out_dim], in_dim, out_dim),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim]));
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var, TensorError> {
        let y = g.matmul(x, p.var(self.weight))?;
        g.add(y, p.var(self.bias))
    }

    pub fn param_count(&self) -> usize {
        self.in_dim * self.out_dim + self.out_dim
    }
}

/// Same-length temporal convolution (stride 1, padding `kernel / 2`).
#[derive(Clone, Debug)]
pub struct Conv1dLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub kernel: usize,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Conv1dLayer {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        kernel: usize,
        in_dim: usize,
        out_dim: usize,
    ) -> Result<Self, TensorError> {
        check_dims(name, &[kernel, in_dim, out_dim])?;
        if kernel % 2 == 0 {
            return Err(TensorError::InvalidArgument(format!(
                "{name}: kernel size {kernel} must be odd"
            )));
        }
        let weight = store.add(
            format!("{name}.weight"),
            init.xavier(
                &[kernel, in_dim, out_dim],
                kernel * in_dim,
                kernel * out_dim,
            ),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim]));
        Ok(Self {
            weight,
            bias,
            kernel,
            in_dim,
            out_dim,
        })
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var, TensorError> {
        g.conv1d(x, p.var(self.weight), p.var(self.bias), 1, self.kernel / 2)
    }

    pub fn param_count(&self) -> usize {
        self.kernel * self.in_dim * self.out_dim + self.out_dim
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self, TensorError> {
        check_dims(name, &[dim])?;
        Ok(Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[dim], 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim])),
            dim,
        })
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var, TensorError> {
        g.layer_norm(x, p.var(self.gamma), p.var(self.beta), Self::EPS)
    }
}

/// Pre-norm transformer encoder block:
/// `x + MHSA(LN(x))`, then `+ FFN(LN(.))` with a GELU feed-forward.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub ln_attn: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub ln_ffn: LayerNorm,
    pub ff_in: Linear,
    pub ff_out: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl TransformerBlock {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        dim: usize,
        heads: usize,
        ffn_mult: usize,
    ) -> Result<Self, TensorError> {
        check_dims(name, &[dim, heads, ffn_mult])?;
        if dim % heads != 0 {
            return Err(TensorError::InvalidArgument(format!(
                "{name}: model dim {dim} not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            ln_attn: LayerNorm::new(store, &format!("{name}.ln_attn"), dim)?,
            q: Linear::new(store, init, &format!("{name}.attn.q"), dim, dim)?,
            k: Linear::new(store, init, &format!("{name}.attn.k"), dim, dim)?,
            v: Linear::new(store, init, &format!("{name}.attn.v"), dim, dim)?,
            o: Linear::new(store, init, &format!("{name}.attn.o"), dim, dim)?,
            ln_ffn: LayerNorm::new(store, &format!("{name}.ln_ffn"), dim)?,
            ff_in: Linear::new(store, init, &format!("{name}.ffn.in"), dim, dim * ffn_mult)?,
            ff_out: Linear::new(store, init, &format!("{name}.ffn.out"), dim * ffn_mult, dim)?,
            heads,
            dim,
        })
    }

    fn attention(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var, TensorError> {
        let q = self.q.forward(g, p, x)?;
        let k = self.k.forward(g, p, x)?;
        let v = self.v.forward(g, p, x)?;
        let dk = self.dim / self.heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * dk, dk)?;
            let kh = g.slice_cols(k, h * dk, dk)?;
            let vh = g.slice_cols(v, h * dk, dk)?;
            let kt = g.transpose(kh)?;
            let scores = g.matmul(qh, kt)?;
            let scores = g.scale(scores, scale);
            let attn = g.softmax(scores, 1)?;
            outs.push(g.matmul(attn, vh)?);
        }
        let merged = if outs.len() == 1 {
            outs[0]
        } else {
            g.concat(&outs)?
        };
        self.o.forward(g, p, merged)
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var, TensorError> {
        let (_, d) = g.value(x).dims2()?;
        if d != self.dim {
            return Err(TensorError::Shape {
                op: "transformer block",
                left: g.shape(x).to_vec(),
                right: vec![self.dim],
            });
        }
        let n1 = self.ln_attn.forward(g, p, x)?;
        let a = self.attention(g, p, n1)?;
        let x = g.add(x, a)?;
        let n2 = self.ln_ffn.forward(g, p, x)?;
        let h = self.ff_in.forward(g, p, n2)?;
        let h = g.gelu(h)?;
        let f = self.ff_out.forward(g, p, h)?;
        g.add(x, f)
    }

    /// Zeroes the two projections that feed the residual stream, turning the
    /// block into the identity map.
    pub fn zero_residual_branches(&self, store: &mut ParamStore) {
        for id in [
            self.o.weight,
            self.o.bias,
            self.ff_out.weight,
            self.ff_out.bias,
        ] {
            store.value_mut(id).data_mut().fill(0.0);
        }
    }
}

/// Sinusoidal position table of shape `[t, dim]`.
pub fn sinusoidal_positions(t: usize, dim: usize) -> Tensor {
    let mut data = Vec::with_capacity(t * dim);
    for pos in 0..t {
        for i in 0..dim {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / dim as f64);
            data.push(if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    Tensor::new(vec![t, dim], data).expect("shape product matches")
}
