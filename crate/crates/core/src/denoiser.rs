//! The time-conditioned denoiser: a small 2D U-Net over the image with the
//! two scalar variables supplied as constant input planes, an image noise
//! head on the decoder and two scalar heads on the bottleneck.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{invalid, Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    pub image_side: usize,
    pub base_width: usize,
    pub depth: usize,
    pub time_dim: usize,
    pub categories: usize,
    pub norm_groups: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            image_side: 16,
            base_width: 32,
            depth: 2,
            time_dim: 64,
            categories: 2,
            norm_groups: 8,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_width == 0 || self.time_dim == 0 || self.image_side == 0 {
            return Err(invalid("denoiser widths must be positive"));
        }
        if self.depth == 0 || self.image_side % (1 << self.depth) != 0 {
            return Err(invalid(format!(
                "image side {} not divisible by 2^{}",
                self.image_side, self.depth
            )));
        }
        if self.time_dim % 2 != 0 {
            return Err(invalid("time embedding dimension must be even"));
        }
        if self.categories < 2 {
            return Err(invalid("need at least two categories"));
        }
        if self.norm_groups == 0 || self.base_width % self.norm_groups != 0 {
            return Err(invalid(format!(
                "{} norm groups do not divide base width {}",
                self.norm_groups, self.base_width
            )));
        }
        Ok(())
    }

    fn level_width(&self, level: usize) -> usize {
        self.base_width << level
    }

    fn bottleneck_width(&self) -> usize {
        self.level_width(self.depth - 1)
    }

    pub fn pixels(&self) -> usize {
        self.image_side * self.image_side
    }
}

/// Sinusoidal embedding: `[sin(t w_0), cos(t w_0), sin(t w_1), ...]` with
/// `w_i = 10000^(-2i / dim)`.
pub fn time_embedding(t: usize, dim: usize) -> Result<Vec<f64>> {
    if dim % 2 != 0 {
        return Err(invalid(format!("time embedding dimension {dim} is odd")));
    }
    let mut out = Vec::with_capacity(dim);
    for i in 0..dim / 2 {
        let freq = 10000f64.powf(-(2.0 * i as f64) / dim as f64);
        let arg = t as f64 * freq;
        out.push(arg.sin());
        out.push(arg.cos());
    }
    Ok(out)
}

/// Named parameter tensors in insertion order.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: BTreeMap<String, usize>,
}

impl<T: Real> Default for Params<T> {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            index: BTreeMap::new(),
        }
    }
}

impl<T: Real> Params<T> {
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(invalid(format!("duplicate parameter {name}")));
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn cast<U: Real>(&self) -> Params<U> {
        Params {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    /// Adds every tensor to `graph` as a leaf (differentiable if `trainable`).
    pub fn bind(&self, graph: &mut Graph<T>, trainable: bool) -> BoundParams {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    graph.param(t.clone())
                } else {
                    graph.constant(t.clone())
                }
            })
            .collect();
        BoundParams {
            vars,
            index: self.index.clone(),
        }
    }

    /// Same parameter set over existing graph variables (one per tensor, in order).
    pub fn bind_vars(&self, vars: &[Var]) -> Result<BoundParams> {
        if vars.len() != self.len() {
            return Err(invalid("variable count does not match parameter count"));
        }
        Ok(BoundParams {
            vars: vars.to_vec(),
            index: self.index.clone(),
        })
    }
}

/// Parameters registered in a particular graph.
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: Vec<Var>,
    index: BTreeMap<String, usize>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| invalid(format!("missing parameter {name}")))
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// How head output layers are initialised.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadInit {
    Zero,
    Random,
}

struct Initializer<'a, R: Rng, T: Real> {
    rng: &'a mut R,
    params: Params<T>,
}

impl<R: Rng, T: Real> Initializer<'_, R, T> {
    fn normal(&mut self, name: &str, shape: Vec<usize>, fan_in: usize) -> Result<()> {
        let std = (1.0 / fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(self.rng);
                T::from_f64_lossy(z * std)
            })
            .collect();
        self.params.insert(name, Tensor::new(shape, data)?)
    }

    fn fill(&mut self, name: &str, shape: Vec<usize>, v: f64) -> Result<()> {
        self.params.insert(name, Tensor::full(shape, T::from_f64_lossy(v)))
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, zero: bool) -> Result<()> {
        if zero {
            self.fill(&format!("{name}.w"), vec![cout, cin, k, k], 0.0)?;
        } else {
            self.normal(&format!("{name}.w"), vec![cout, cin, k, k], cin * k * k)?;
        }
        self.fill(&format!("{name}.b"), vec![cout], 0.0)
    }

    fn linear(&mut self, name: &str, din: usize, dout: usize) -> Result<()> {
        self.normal(&format!("{name}.w"), vec![din, dout], din)?;
        self.fill(&format!("{name}.b"), vec![1, dout], 0.0)
    }

    fn norm(&mut self, name: &str, c: usize) -> Result<()> {
        self.fill(&format!("{name}.gamma"), vec![c], 1.0)?;
        self.fill(&format!("{name}.beta"), vec![c], 0.0)
    }

    fn resblock(&mut self, name: &str, cin: usize, cout: usize, tdim: usize) -> Result<()> {
        self.norm(&format!("{name}.norm1"), cin)?;
        self.conv(&format!("{name}.conv1"), cin, cout, 3, false)?;
        self.linear(&format!("{name}.time"), tdim, cout)?;
        self.norm(&format!("{name}.norm2"), cout)?;
        self.conv(&format!("{name}.conv2"), cout, cout, 3, false)?;
        if cin != cout {
            self.conv(&format!("{name}.skip"), cin, cout, 1, false)?;
        }
        Ok(())
    }

    fn scalar_head(&mut self, name: &str, c: usize, out: usize, zero: bool) -> Result<()> {
        self.norm(&format!("{name}.norm1"), c)?;
        self.conv(&format!("{name}.conv1"), c, c, 3, false)?;
        self.norm(&format!("{name}.norm2"), c)?;
        self.conv(&format!("{name}.conv2"), c, out, 3, zero)
    }
}

/// Fan-in scaled normal weights, unit/zero norm affines, zero biases; the
/// final layer of every head is zero when `heads == HeadInit::Zero`.
pub fn init_params<T: Real, R: Rng>(cfg: &DenoiserConfig, heads: HeadInit, rng: &mut R) -> Result<Params<T>> {
    cfg.validate()?;
    let zero = heads == HeadInit::Zero;
    let mut init = Initializer {
        rng,
        params: Params::default(),
    };
    let td = cfg.time_dim;
    init.linear("time.lin1", td, td)?;
    init.linear("time.lin2", td, td)?;
    init.conv("conv_in", INPUT_CHANNELS, cfg.base_width, 3, false)?;
    let mut ch = cfg.base_width;
    for level in 0..cfg.depth {
        let out = cfg.level_width(level);
        init.resblock(&format!("down{level}"), ch, out, td)?;
        ch = out;
    }
    init.resblock("mid", ch, ch, td)?;
    for level in (0..cfg.depth).rev() {
        let out = cfg.level_width(level);
        init.resblock(&format!("up{level}"), ch + out, out, td)?;
        ch = out;
    }
    init.norm("image_head.norm", ch)?;
    init.conv("image_head.conv", ch, 1, 3, zero)?;
    let cb = cfg.bottleneck_width();
    init.scalar_head("age_head", cb, 1, zero)?;
    init.scalar_head("sex_head", cb, cfg.categories, zero)?;
    Ok(init.params)
}

const INPUT_CHANNELS: usize = 3;

/// Inputs for one forward pass over a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserInput {
    /// `B * side * side` row-major noisy images.
    pub images: Vec<f64>,
    /// Noisy encoded scalar per sample.
    pub ages: Vec<f64>,
    /// Current categorical state per sample.
    pub classes: Vec<usize>,
    /// Diffusion step per sample.
    pub steps: Vec<usize>,
}

impl DenoiserInput {
    pub fn batch(&self) -> usize {
        self.ages.len()
    }
}

/// Value of the categorical input plane: class index mapped onto [-1, 1].
pub fn class_plane_value(class: usize, categories: usize) -> f64 {
    2.0 * class as f64 / (categories - 1) as f64 - 1.0
}

/// Graph handles of the three predictions.
#[derive(Debug, Clone, Copy)]
pub struct DenoiserVars {
    /// `[B, 1, side, side]`
    pub eps_image: Var,
    /// `[B, 1]`
    pub eps_age: Var,
    /// `[B, K]`
    pub sex_logits: Var,
}

/// Plain-value predictions for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserOutput {
    pub eps_image: Vec<f64>,
    pub eps_age: f64,
    pub sex_logits: Vec<f64>,
}

/// Builds the input tensors as graph constants: `[B, 3, side, side]` and the
/// sinusoidal embeddings `[B, time_dim]`.
pub fn input_constants<T: Real>(
    graph: &mut Graph<T>,
    cfg: &DenoiserConfig,
    input: &DenoiserInput,
) -> Result<(Var, Var)> {
    let b = input.batch();
    let px = cfg.pixels();
    if input.images.len() != b * px || input.classes.len() != b || input.steps.len() != b {
        return Err(Error::ShapeMismatch {
            expected: vec![b, px],
            actual: vec![input.images.len() / px.max(1), input.classes.len(), input.steps.len()],
        });
    }
    let mut x = Vec::with_capacity(b * INPUT_CHANNELS * px);
    let mut temb = Vec::with_capacity(b * cfg.time_dim);
    for i in 0..b {
        if input.classes[i] >= cfg.categories {
            return Err(invalid(format!("class {} out of range", input.classes[i])));
        }
        x.extend(input.images[i * px..(i + 1) * px].iter().map(|&v| T::from_f64_lossy(v)));
        x.extend(std::iter::repeat_n(T::from_f64_lossy(input.ages[i]), px));
        let s = class_plane_value(input.classes[i], cfg.categories);
        x.extend(std::iter::repeat_n(T::from_f64_lossy(s), px));
        temb.extend(time_embedding(input.steps[i], cfg.time_dim)?.into_iter().map(T::from_f64_lossy));
    }
    let side = cfg.image_side;
    let xv = graph.constant(Tensor::new(vec![b, INPUT_CHANNELS, side, side], x)?);
    let tv = graph.constant(Tensor::new(vec![b, cfg.time_dim], temb)?);
    Ok((xv, tv))
}

struct Net<'a, T> {
    g: &'a mut Graph<T>,
    p: &'a BoundParams,
    cfg: &'a DenoiserConfig,
    stage: usize,
}

impl<T: Real> Net<'_, T> {
    fn checked(&mut self, v: Var) -> Result<Var> {
        self.stage += 1;
        if !self.g.value(v).is_finite() {
            return Err(Error::NonFinite(format!("denoiser activations at stage {}", self.stage)));
        }
        Ok(v)
    }

    fn linear(&mut self, name: &str, x: Var) -> Result<Var> {
        let w = self.p.var(&format!("{name}.w"))?;
        let b = self.p.var(&format!("{name}.b"))?;
        let y = self.g.matmul(x, w)?;
        let shape = self.g.shape(y).to_vec();
        let bb = self.g.broadcast(b, shape)?;
        self.g.add(y, bb)
    }

    fn conv(&mut self, name: &str, x: Var) -> Result<Var> {
        let w = self.p.var(&format!("{name}.w"))?;
        let b = self.p.var(&format!("{name}.b"))?;
        self.g.conv2d(x, w, Some(b))
    }

    fn groups(&self, channels: usize) -> usize {
        let mut g = self.cfg.norm_groups.min(channels);
        while channels % g != 0 {
            g -= 1;
        }
        g
    }

    fn norm_act(&mut self, name: &str, x: Var) -> Result<Var> {
        let gamma = self.p.var(&format!("{name}.gamma"))?;
        let beta = self.p.var(&format!("{name}.beta"))?;
        let groups = self.groups(self.g.shape(x)[1]);
        let h = self.g.group_norm(x, gamma, beta, groups)?;
        self.g.silu(h)
    }

    fn resblock(&mut self, name: &str, x: Var, temb: Var) -> Result<Var> {
        let h = self.norm_act(&format!("{name}.norm1"), x)?;
        let h = self.conv(&format!("{name}.conv1"), h)?;
        let shape = self.g.shape(h).to_vec();
        let tp = self.linear(&format!("{name}.time"), temb)?;
        let tp = self.g.reshape(tp, vec![shape[0], shape[1], 1, 1])?;
        let tp = self.g.broadcast(tp, shape)?;
        let h = self.g.add(h, tp)?;
        let h = self.norm_act(&format!("{name}.norm2"), h)?;
        let h = self.conv(&format!("{name}.conv2"), h)?;
        let skip = if self.g.shape(x)[1] != self.g.shape(h)[1] {
            self.conv(&format!("{name}.skip"), x)?
        } else {
            x
        };
        let out = self.g.add(h, skip)?;
        self.checked(out)
    }

    /// Two norm-act-conv blocks, the first wrapped in a residual, then global pooling.
    fn scalar_head(&mut self, name: &str, x: Var) -> Result<Var> {
        let h = self.norm_act(&format!("{name}.norm1"), x)?;
        let h = self.conv(&format!("{name}.conv1"), h)?;
        let h = self.g.add(h, x)?;
        let h = self.norm_act(&format!("{name}.norm2"), h)?;
        let h = self.conv(&format!("{name}.conv2"), h)?;
        let out = self.g.global_avg_pool(h)?;
        self.checked(out)
    }
}

/// Runs the network on graph-resident inputs `x: [B, 3, side, side]`,
/// `temb_in: [B, time_dim]`.
pub fn forward_vars<T: Real>(
    graph: &mut Graph<T>,
    params: &BoundParams,
    cfg: &DenoiserConfig,
    x: Var,
    temb_in: Var,
) -> Result<DenoiserVars> {
    let mut net = Net {
        g: graph,
        p: params,
        cfg,
        stage: 0,
    };
    let t = net.linear("time.lin1", temb_in)?;
    let t = net.g.silu(t)?;
    let temb = net.linear("time.lin2", t)?;
    let temb = net.g.silu(temb)?;

    let mut h = net.conv("conv_in", x)?;
    h = net.checked(h)?;
    let mut skips = Vec::with_capacity(cfg.depth);
    for level in 0..cfg.depth {
        h = net.resblock(&format!("down{level}"), h, temb)?;
        skips.push(h);
        h = net.g.avg_pool2(h)?;
    }
    h = net.resblock("mid", h, temb)?;
    let bottleneck = h;
    for level in (0..cfg.depth).rev() {
        h = net.g.upsample2(h)?;
        h = net.g.concat_channels(h, skips[level])?;
        h = net.resblock(&format!("up{level}"), h, temb)?;
    }
    let h = net.norm_act("image_head.norm", h)?;
    let eps_image = net.conv("image_head.conv", h)?;
    let eps_image = net.checked(eps_image)?;
    let eps_age = net.scalar_head("age_head", bottleneck)?;
    let sex_logits = net.scalar_head("sex_head", bottleneck)?;
    Ok(DenoiserVars {
        eps_image,
        eps_age,
        sex_logits,
    })
}

/// Builds the inputs and runs the network inside `graph`.
pub fn forward<T: Real>(
    graph: &mut Graph<T>,
    params: &BoundParams,
    cfg: &DenoiserConfig,
    input: &DenoiserInput,
) -> Result<DenoiserVars> {
    let (x, temb) = input_constants(graph, cfg, input)?;
    forward_vars(graph, params, cfg, x, temb)
}

/// Inference-only forward pass returning plain values per sample.
pub fn predict<T: Real>(params: &Params<T>, cfg: &DenoiserConfig, input: &DenoiserInput) -> Result<Vec<DenoiserOutput>> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g, false);
    let out = forward(&mut g, &bound, cfg, input)?;
    let px = cfg.pixels();
    let k = cfg.categories;
    let img = g.value(out.eps_image).data();
    let age = g.value(out.eps_age).data();
    let logits = g.value(out.sex_logits).data();
    let f = |v: &T| v.to_f64().unwrap();
    Ok((0..input.batch())
        .map(|i| DenoiserOutput {
            eps_image: img[i * px..(i + 1) * px].iter().map(f).collect(),
            eps_age: f(&age[i]),
            sex_logits: logits[i * k..(i + 1) * k].iter().map(f).collect(),
        })
        .collect())
}
