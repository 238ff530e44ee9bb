use super::graph::{Gradients, Graph, Var};
use super::rng::RngStream;
use super::tensor::Tensor;

/// Ordered, named collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) -> usize {
        self.entries.push((name.into(), t));
        self.entries.len() - 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, i: usize) -> &Tensor {
        &self.entries[i].1
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.entries[i].1
    }

    pub fn name(&self, i: usize) -> &str {
        &self.entries[i].0
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|(n, _)| n == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|(_, t)| t.is_finite())
    }

    /// Registers every tensor as a trainable leaf.
    pub fn bind<'a>(&'a self, g: &mut Graph<'a>) -> Vec<Var> {
        self.entries.iter().map(|(_, t)| g.param(t)).collect()
    }

    /// Registers every tensor as a constant leaf (no adjoints are computed).
    pub fn bind_frozen<'a>(&'a self, g: &mut Graph<'a>) -> Vec<Var> {
        self.entries
            .iter()
            .map(|(_, t)| g.constant_ref(t))
            .collect()
    }

    /// Gradient tensors in parameter order.
    pub fn collect_grads(grads: &mut Gradients, vars: &[Var]) -> Vec<Tensor> {
        vars.iter().map(|&v| grads.take(v)).collect()
    }
}

/// Dense layer `y = x·W + b` with `W: [in, out]`, addressed by index into a
/// [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub w: usize,
    pub b: usize,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    /// Weights drawn `N(0, gain²/fan_in)`, zero bias.
    pub fn init(
        params: &mut ParamSet,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        gain: f64,
        rng: &mut RngStream,
    ) -> Self {
        let std = gain / (fan_in as f64).sqrt();
        let w = rng
            .gaussian(&[fan_in, fan_out])
            .expect("positive extents")
            .scale(std);
        let w = params.push(format!("{name}.w"), w);
        let b = params.push(format!("{name}.b"), Tensor::zeros(&[fan_out]));
        Self {
            w,
            b,
            fan_in,
            fan_out,
        }
    }

    /// All-zero layer (used for output heads that must start silent).
    pub fn zeros(params: &mut ParamSet, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let w = params.push(format!("{name}.w"), Tensor::zeros(&[fan_in, fan_out]));
        let b = params.push(format!("{name}.b"), Tensor::zeros(&[fan_out]));
        Self {
            w,
            b,
            fan_in,
            fan_out,
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, vars: &[Var], x: Var) -> Var {
        let h = g.matmul(x, vars[self.w]);
        g.add_row(h, vars[self.b])
    }
}

/// Stack of [`Linear`] layers with SiLU between them and a linear output.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `dims = [in, hidden…, out]`.
    pub fn init(params: &mut ParamSet, name: &str, dims: &[usize], rng: &mut RngStream) -> Self {
        assert!(dims.len() >= 2, "an MLP needs input and output widths");
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::init(params, &format!("{name}.{i}"), w[0], w[1], 1.0, rng))
            .collect();
        Self { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").fan_out
    }

    /// Activations after every layer; hidden entries are post-SiLU.
    pub fn forward_all(&self, g: &mut Graph<'_>, vars: &[Var], x: Var) -> Vec<Var> {
        let mut out = Vec::with_capacity(self.layers.len());
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, vars, h);
            if i + 1 < self.layers.len() {
                h = g.silu(h);
            }
            out.push(h);
        }
        out
    }

    pub fn forward(&self, g: &mut Graph<'_>, vars: &[Var], x: Var) -> Var {
        *self.forward_all(g, vars, x).last().expect("non-empty")
    }
}
