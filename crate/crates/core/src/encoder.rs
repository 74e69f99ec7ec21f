//! SampleCNN-style excerpt encoder, projection head, embedding map and tag
//! head.
//!
//! The encoder consumes excerpts of `3^levels` samples: a stride-3 stem
//! convolution followed by `levels - 1` blocks of `[conv k=3 (same padding),
//! ReLU, max-pool 3]`, which reduce the temporal axis to a single step whose
//! channels form `h`.

use rand::Rng;

use crate::audio::AudioBuffer;
use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{input_err, shape_err, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const L2_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderConfig {
    /// Excerpts hold `3^levels` samples.
    pub levels: u32,
    pub base_channels: usize,
    /// Dimension `D` of `h` and of the embedding.
    pub embed_dim: usize,
    pub proj_dim: usize,
    pub tag_count: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            levels: 7,
            base_channels: 16,
            embed_dim: 64,
            proj_dim: 64,
            tag_count: 8,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels < 3 || self.levels > 12 {
            return Err(input_err!("levels must lie in [3, 12], got {}", self.levels));
        }
        if self.base_channels == 0 || self.embed_dim == 0 || self.proj_dim == 0 || self.tag_count == 0 {
            return Err(input_err!("channel counts and dimensions must be positive"));
        }
        Ok(())
    }

    pub fn excerpt_len(&self) -> usize {
        3usize.pow(self.levels)
    }

    /// Output channels of the stem followed by each block.
    pub fn channel_plan(&self) -> Vec<usize> {
        let blocks = self.levels as usize - 1;
        let mut plan = vec![self.base_channels.min(self.embed_dim)];
        for i in 1..=blocks {
            let c = if i == blocks {
                self.embed_dim
            } else {
                (self.base_channels << (i / 2)).min(self.embed_dim)
            };
            plan.push(c);
        }
        plan
    }

    /// Temporal length after the stem and after each block.
    pub fn length_plan(&self) -> Vec<usize> {
        (0..self.levels).rev().map(|p| 3usize.pow(p)).collect()
    }
}

/// All learnable tensors, in a fixed order with stable names.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    config: EncoderConfig,
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

fn uniform(shape: Vec<usize>, bound: f64, rng: &mut impl Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound) as f32 as f64).collect();
    Tensor::new(shape, data).expect("consistent shape")
}

impl ModelParams {
    /// Fan-in scaled uniform initialization; values are `f32`-representable.
    pub fn init(config: EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        let plan = config.channel_plan();
        let mut c_in = 1;
        for (i, &c_out) in plan.iter().enumerate() {
            let prefix = if i == 0 {
                "stem".to_string()
            } else {
                format!("block{i}")
            };
            let fan_in = (c_in * 3) as f64;
            names.push(format!("{prefix}.weight"));
            tensors.push(uniform(vec![c_out, c_in, 3], (6.0 / fan_in).sqrt(), rng));
            names.push(format!("{prefix}.bias"));
            tensors.push(Tensor::zeros(vec![c_out]));
            c_in = c_out;
        }
        let d = config.embed_dim;
        let p = config.proj_dim;
        names.push("ln.gain".into());
        tensors.push(Tensor::filled(vec![d], 1.0));
        names.push("ln.bias".into());
        tensors.push(Tensor::zeros(vec![d]));
        names.push("proj.w1".into());
        tensors.push(uniform(vec![p, d], (6.0 / d as f64).sqrt(), rng));
        names.push("proj.w2".into());
        tensors.push(uniform(vec![p, p], (3.0 / p as f64).sqrt(), rng));
        names.push("tag.weight".into());
        tensors.push(uniform(vec![config.tag_count, d], (3.0 / d as f64).sqrt(), rng));
        Ok(Self { config, names, tensors })
    }

    /// Rebuilds parameters from named tensors, checking every shape against
    /// what `config` requires.
    pub fn from_named(config: EncoderConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        let template = Self::init(config, &mut rand::rngs::mock::StepRng::new(0, 0))?;
        if named.len() != template.names.len() {
            return Err(shape_err!(
                "expected {} parameter tensors, found {}",
                template.names.len(),
                named.len()
            ));
        }
        let mut tensors = Vec::with_capacity(named.len());
        for (name, expected) in template.names.iter().zip(&template.tensors) {
            let (_, t) = named
                .iter()
                .find(|(n, _)| n == name)
                .ok_or_else(|| shape_err!("missing parameter {name}"))?;
            if t.shape() != expected.shape() {
                return Err(shape_err!(
                    "parameter {name} has shape {:?}, config needs {:?}",
                    t.shape(),
                    expected.shape()
                ));
            }
            tensors.push(t.clone());
        }
        Ok(Self {
            config,
            names: template.names,
            tensors,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn named(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &mut self.tensors[i])
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.tensors.iter().map(Tensor::numel).collect()
    }

    /// Adds every tensor to `g` as a gradient-tracking leaf.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        self.bind_with(g, true)
    }

    pub fn bind_with(&self, g: &mut Graph, requires_grad: bool) -> Bound {
        Bound {
            config: self.config,
            vars: self.tensors.iter().map(|t| g.leaf(t.clone(), requires_grad)).collect(),
        }
    }
}

/// Parameters placed on a graph, in [`ModelParams`] order.
#[derive(Debug, Clone)]
pub struct Bound {
    config: EncoderConfig,
    vars: Vec<Var>,
}

impl Bound {
    /// Wraps variables already on a graph, e.g. leaves made by the caller.
    pub fn from_vars(config: EncoderConfig, vars: Vec<Var>) -> Result<Self> {
        let expected = 2 * config.levels as usize + 5;
        if vars.len() != expected {
            return Err(shape_err!("{} variables for {expected} parameter tensors", vars.len()));
        }
        Ok(Self { config, vars })
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    fn conv(&self, i: usize) -> (Var, Var) {
        (self.vars[2 * i], self.vars[2 * i + 1])
    }

    fn head_base(&self) -> usize {
        2 * self.config.levels as usize
    }

    pub fn ln(&self) -> (Var, Var) {
        let b = self.head_base();
        (self.vars[b], self.vars[b + 1])
    }

    pub fn projection(&self) -> (Var, Var) {
        let b = self.head_base();
        (self.vars[b + 2], self.vars[b + 3])
    }

    pub fn tag_weight(&self) -> Var {
        self.vars[self.head_base() + 4]
    }
}

/// Stacks excerpts into a `[batch, len]` tensor.
pub fn excerpts_to_tensor(excerpts: &[AudioBuffer], expected_len: usize) -> Result<Tensor> {
    if excerpts.is_empty() {
        return Err(input_err!("empty excerpt batch"));
    }
    let mut data = Vec::with_capacity(excerpts.len() * expected_len);
    for (i, e) in excerpts.iter().enumerate() {
        if e.len() != expected_len {
            return Err(shape_err!(
                "excerpt {i} has {} samples, encoder needs {expected_len}",
                e.len()
            ));
        }
        data.extend(e.samples().iter().map(|&v| v as f64));
    }
    Tensor::new(vec![excerpts.len(), expected_len], data)
}

/// `h = f(x)` for `x: [batch, 3^levels]`, giving `[batch, D]`.
pub fn encode(g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
    let cfg = p.config;
    let shape = g.shape(x).to_vec();
    if shape.len() != 2 || shape[1] != cfg.excerpt_len() {
        return Err(shape_err!(
            "encoder needs [batch, {}] input, got {shape:?}",
            cfg.excerpt_len()
        ));
    }
    let batch = shape[0];
    let mut a = g.reshape(x, vec![batch, 1, shape[1]])?;
    let (w, b) = p.conv(0);
    a = g.conv1d(a, w, Some(b), 3, 0)?;
    a = g.relu(a)?;
    for i in 1..cfg.levels as usize {
        let (w, b) = p.conv(i);
        a = g.conv1d(a, w, Some(b), 1, 1)?;
        a = g.relu(a)?;
        a = g.max_pool1d(a, 3)?;
    }
    g.reshape(a, vec![batch, cfg.embed_dim])
}

/// `o = W2 relu(W1 h)`, both maps bias-free.
pub fn project(g: &mut Graph, p: &Bound, h: Var) -> Result<Var> {
    let (w1, w2) = p.projection();
    let a = g.linear(h, w1, None)?;
    let a = g.relu(a)?;
    g.linear(a, w2, None)
}

/// `z = LN(h) / ||LN(h)||` row-wise.
pub fn embed(g: &mut Graph, p: &Bound, h: Var) -> Result<Var> {
    let (gain, bias) = p.ln();
    let a = g.layer_norm(h, gain, bias, LAYER_NORM_EPS)?;
    g.l2_normalize(a, L2_EPS)
}

/// `y_hat = sigmoid(W z)`.
pub fn tag_probs(g: &mut Graph, p: &Bound, z: Var) -> Result<Var> {
    let logits = g.linear(z, p.tag_weight(), None)?;
    g.sigmoid(logits)
}

/// Embeddings and tag probabilities for a batch of excerpts without
/// gradient tracking, evaluated in chunks of `chunk` excerpts.
pub fn infer(params: &ModelParams, excerpts: &[AudioBuffer], chunk: usize) -> Result<(Tensor, Tensor)> {
    let cfg = params.config;
    let mut z_all = Vec::with_capacity(excerpts.len() * cfg.embed_dim);
    let mut y_all = Vec::with_capacity(excerpts.len() * cfg.tag_count);
    for part in excerpts.chunks(chunk.max(1)) {
        let mut g = Graph::new();
        let bound = params.bind_with(&mut g, false);
        let x = g.constant(excerpts_to_tensor(part, cfg.excerpt_len())?);
        let h = encode(&mut g, &bound, x)?;
        let z = embed(&mut g, &bound, h)?;
        let y = tag_probs(&mut g, &bound, z)?;
        z_all.extend_from_slice(g.value(z).data());
        y_all.extend_from_slice(g.value(y).data());
    }
    Ok((
        Tensor::new(vec![excerpts.len(), cfg.embed_dim], z_all)?,
        Tensor::new(vec![excerpts.len(), cfg.tag_count], y_all)?,
    ))
}
