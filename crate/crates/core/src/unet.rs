//! Encoder/decoder U-Net producing per-pixel landmark scores.
//!
//! Each resolution level holds a stack of blocks; a block is two
//! (conv 3×3 → batch-norm → LeakyReLU) units. The encoder max-pools between
//! levels, the decoder upsamples ×2 and concatenates the matching encoder
//! output before its blocks. A final 3×3 conv with bias maps to class scores.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchNormState, Graph, Mode, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub num_layers: usize,
    pub blocks_per_layer: Vec<usize>,
    pub base_filters: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub leaky_slope: f64,
}

impl ArchConfig {
    /// Four levels at 32 base filters, the full-size configuration.
    pub fn full_size() -> Self {
        Self {
            num_layers: 4,
            blocks_per_layer: vec![3, 3, 4, 4],
            base_filters: 32,
            in_channels: 1,
            out_channels: 4,
            leaky_slope: 0.01,
        }
    }

    /// Four levels at 8 base filters, one block each; trains on a CPU in minutes.
    pub fn desk() -> Self {
        Self { blocks_per_layer: vec![1; 4], base_filters: 8, ..Self::full_size() }
    }

    /// Smallest useful net, for gradient checks and smoke tests.
    pub fn tiny() -> Self {
        Self { num_layers: 2, blocks_per_layer: vec![1, 1], base_filters: 2, ..Self::full_size() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_layers < 2 {
            return bad(format!("num_layers must be ≥ 2, got {}", self.num_layers));
        }
        if self.blocks_per_layer.len() != self.num_layers {
            return bad(format!(
                "blocks_per_layer has {} entries for {} layers",
                self.blocks_per_layer.len(),
                self.num_layers
            ));
        }
        if self.blocks_per_layer.iter().any(|&b| b == 0) {
            return bad("every layer needs at least one block".into());
        }
        if self.base_filters == 0 || self.in_channels == 0 {
            return bad("base_filters and in_channels must be positive".into());
        }
        if self.out_channels < 2 {
            return bad("out_channels must include background plus at least one landmark".into());
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return bad(format!("leaky_slope must lie in (0,1), got {}", self.leaky_slope));
        }
        Ok(())
    }

    /// Filter count at resolution level `level` (0 = full resolution).
    pub fn filters(&self, level: usize) -> usize {
        self.base_filters << level
    }

    /// Input extents must be divisible by this.
    pub fn required_divisor(&self) -> usize {
        1 << (self.num_layers - 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Init {
    /// He normal with the given fan-in.
    He(usize),
    Ones,
    Zeros,
}

#[derive(Debug, Clone)]
pub(crate) struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

#[derive(Debug, Clone, Copy)]
struct Unit {
    weight: usize,
    gamma: usize,
    beta: usize,
    norm: usize,
}

#[derive(Debug, Clone)]
struct Plan {
    encoder: Vec<Vec<[Unit; 2]>>,
    /// Indexed by level; the bottleneck level has no decoder stage.
    decoder: Vec<Vec<[Unit; 2]>>,
    head_weight: usize,
    head_bias: usize,
    params: Vec<ParamSpec>,
    norms: Vec<(String, usize)>,
}

impl Plan {
    fn new(arch: &ArchConfig) -> Self {
        let mut params = Vec::new();
        let mut norms = Vec::new();
        let mut unit = |prefix: &str, cin: usize, cout: usize, params: &mut Vec<ParamSpec>| {
            let mut add = |suffix: &str, shape: Vec<usize>, init| {
                params.push(ParamSpec { name: format!("{prefix}.{suffix}"), shape, init });
                params.len() - 1
            };
            let weight = add("conv.weight", vec![cout, cin, 3, 3], Init::He(cin * 9));
            let gamma = add("bn.gamma", vec![cout], Init::Ones);
            let beta = add("bn.beta", vec![cout], Init::Zeros);
            norms.push((format!("{prefix}.bn"), cout));
            Unit { weight, gamma, beta, norm: norms.len() - 1 }
        };
        let mut stack = |tag: &str, level: usize, cin: usize, params: &mut Vec<ParamSpec>| {
            let f = arch.filters(level);
            (0..arch.blocks_per_layer[level])
                .map(|k| {
                    let first_in = if k == 0 { cin } else { f };
                    [
                        unit(&format!("{tag}{level}.block{k}.unit0"), first_in, f, params),
                        unit(&format!("{tag}{level}.block{k}.unit1"), f, f, params),
                    ]
                })
                .collect::<Vec<_>>()
        };

        let mut encoder = Vec::with_capacity(arch.num_layers);
        for level in 0..arch.num_layers {
            let cin = if level == 0 { arch.in_channels } else { arch.filters(level - 1) };
            encoder.push(stack("enc", level, cin, &mut params));
        }
        let mut decoder = vec![Vec::new(); arch.num_layers];
        for level in (0..arch.num_layers - 1).rev() {
            let cin = arch.filters(level + 1) + arch.filters(level);
            decoder[level] = stack("dec", level, cin, &mut params);
        }
        params.push(ParamSpec {
            name: "head.weight".into(),
            shape: vec![arch.out_channels, arch.filters(0), 3, 3],
            init: Init::He(arch.filters(0) * 9),
        });
        let head_weight = params.len() - 1;
        params.push(ParamSpec { name: "head.bias".into(), shape: vec![arch.out_channels], init: Init::Zeros });
        let head_bias = params.len() - 1;
        Plan { encoder, decoder, head_weight, head_bias, params, norms }
    }
}

/// Names and shapes of every learnable tensor `arch` implies, in canonical order.
pub fn param_layout(arch: &ArchConfig) -> Result<Vec<(String, Vec<usize>)>> {
    arch.validate()?;
    Ok(Plan::new(arch).params.into_iter().map(|p| (p.name, p.shape)).collect())
}

/// Names and channel counts of every batch-norm layer, in canonical order.
pub fn norm_layout(arch: &ArchConfig) -> Result<Vec<(String, usize)>> {
    arch.validate()?;
    Ok(Plan::new(arch).norms)
}

/// Scores plus the spatial extents visited on the way down.
pub struct ForwardTrace {
    pub scores: Var,
    pub resolutions: Vec<(usize, usize)>,
}

#[derive(Debug, Clone)]
pub struct UNet<T: Scalar = f32> {
    arch: ArchConfig,
    plan: Plan,
    params: Vec<Tensor<T>>,
    norms: Vec<BatchNormState<T>>,
}

impl<T: Scalar> UNet<T> {
    /// Deterministic initialization from `seed`.
    pub fn build(arch: ArchConfig, seed: u64) -> Result<Self> {
        arch.validate()?;
        let plan = Plan::new(&arch);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = plan
            .params
            .iter()
            .map(|spec| {
                let n: usize = spec.shape.iter().product();
                let data = match spec.init {
                    Init::He(fan_in) => {
                        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
                        (0..n).map(|_| T::from_f64(normal.sample(&mut rng))).collect()
                    }
                    Init::Ones => vec![T::ONE; n],
                    Init::Zeros => vec![T::ZERO; n],
                };
                Tensor::new(&spec.shape, data)
            })
            .collect::<Result<Vec<_>>>()?;
        let norms = plan.norms.iter().map(|(_, c)| BatchNormState::new(*c)).collect();
        Ok(Self { arch, plan, params, norms })
    }

    /// Assemble from stored tensors, checking names and shapes against `arch`.
    pub fn from_parts(arch: ArchConfig, params: Vec<Tensor<T>>, norms: Vec<BatchNormState<T>>) -> Result<Self> {
        arch.validate()?;
        let plan = Plan::new(&arch);
        if params.len() != plan.params.len() || norms.len() != plan.norms.len() {
            return Err(Error::Config(format!(
                "architecture needs {} parameter tensors and {} norm layers, got {} and {}",
                plan.params.len(),
                plan.norms.len(),
                params.len(),
                norms.len()
            )));
        }
        for (spec, t) in plan.params.iter().zip(&params) {
            if t.shape() != spec.shape.as_slice() {
                return Err(Error::Config(format!("{} has shape {:?}, expected {:?}", spec.name, t.shape(), spec.shape)));
            }
        }
        for ((name, c), st) in plan.norms.iter().zip(&norms) {
            if st.channels() != *c || st.running_var.len() != *c {
                return Err(Error::Config(format!("{name} tracks {} channels, expected {c}", st.channels())));
            }
        }
        Ok(Self { arch, plan, params, norms })
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.plan.params.iter().map(|p| p.name.as_str())
    }

    pub fn norms(&self) -> &[BatchNormState<T>] {
        &self.norms
    }

    pub fn norm_names(&self) -> impl Iterator<Item = &str> {
        self.plan.norms.iter().map(|(n, _)| n.as_str())
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    /// Same network at another numeric width.
    pub fn cast<U: Scalar>(&self) -> UNet<U> {
        UNet {
            arch: self.arch.clone(),
            plan: self.plan.clone(),
            params: self.params.iter().map(|t| t.cast()).collect(),
            norms: self
                .norms
                .iter()
                .map(|s| BatchNormState {
                    running_mean: s.running_mean.iter().map(|v| U::from_f64(v.to_f64())).collect(),
                    running_var: s.running_var.iter().map(|v| U::from_f64(v.to_f64())).collect(),
                    batches_tracked: s.batches_tracked,
                })
                .collect(),
        }
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let [_, c, h, w] = match shape {
            &[b, c, h, w] => [b, c, h, w],
            _ => return Err(Error::Config(format!("network input must be [B,C,H,W], got {shape:?}"))),
        };
        if c != self.arch.in_channels {
            return Err(Error::Config(format!("network expects {} input channels, got {c}", self.arch.in_channels)));
        }
        let d = self.arch.required_divisor();
        if h % d != 0 || w % d != 0 || h == 0 || w == 0 {
            return Err(Error::Config(format!(
                "input extents {h}×{w} must be divisible by {d} for a {}-level network",
                self.arch.num_layers
            )));
        }
        Ok(())
    }

    /// Record the network on `g`. `params` are the graph handles of
    /// [`Self::params`] in order; train mode updates the running statistics.
    pub fn forward_graph(&mut self, g: &mut Graph<T>, input: Var, params: &[Var], mode: Mode) -> Result<ForwardTrace> {
        let norms = &mut self.norms;
        forward_impl(&self.plan, &self.arch, norms, g, input, params, mode)
    }

    /// Add parameter leaves to `g` (all requiring grad) and return their handles.
    pub fn register_params(&self, g: &mut Graph<T>) -> Vec<Var> {
        self.params.iter().map(|p| g.leaf(p.clone().with_grad())).collect()
    }

    /// Plain forward pass returning `[B, out_channels, H, W]` scores.
    pub fn forward(&mut self, batch: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        self.check_input(batch.shape())?;
        let mut g = Graph::new();
        let params: Vec<Var> = self.params.iter().map(|p| g.leaf(p.clone())).collect();
        let x = g.leaf(batch.clone());
        let trace = self.forward_graph(&mut g, x, &params, mode)?;
        Ok(g.value(trace.scores).clone())
    }

    /// Eval-mode forward that leaves the model untouched.
    pub fn infer(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.infer_traced(batch)?.0)
    }

    /// Eval-mode forward also reporting the per-level resolutions.
    pub fn infer_traced(&self, batch: &Tensor<T>) -> Result<(Tensor<T>, Vec<(usize, usize)>)> {
        self.check_input(batch.shape())?;
        let mut g = Graph::new();
        let params: Vec<Var> = self.params.iter().map(|p| g.leaf(p.clone())).collect();
        let x = g.leaf(batch.clone());
        let mut norms = self.norms.clone();
        let trace = forward_impl(&self.plan, &self.arch, &mut norms, &mut g, x, &params, Mode::Eval)?;
        Ok((g.value(trace.scores).clone(), trace.resolutions))
    }
}

fn forward_impl<T: Scalar>(
    plan: &Plan,
    arch: &ArchConfig,
    norms: &mut [BatchNormState<T>],
    g: &mut Graph<T>,
    input: Var,
    params: &[Var],
    mode: Mode,
) -> Result<ForwardTrace> {
    if params.len() != plan.params.len() {
        return Err(Error::Config(format!("expected {} parameter handles, got {}", plan.params.len(), params.len())));
    }
    let slope = T::from_f64(arch.leaky_slope);
    let mut run_stack = |g: &mut Graph<T>, mut x: Var, blocks: &[[Unit; 2]]| -> Result<Var> {
        for block in blocks {
            for u in block {
                let y = g.conv2d(x, params[u.weight], None)?;
                let y = g.batch_norm(y, params[u.gamma], params[u.beta], &mut norms[u.norm], mode)?;
                x = g.leaky_relu(y, slope)?;
            }
        }
        Ok(x)
    };

    let mut resolutions = Vec::with_capacity(arch.num_layers);
    let mut skips = Vec::with_capacity(arch.num_layers);
    let mut x = input;
    for level in 0..arch.num_layers {
        if level > 0 {
            x = g.max_pool2(x)?;
        }
        let [_, _, h, w] = g.value(x).dims4()?;
        resolutions.push((h, w));
        x = run_stack(g, x, &plan.encoder[level])?;
        skips.push(x);
    }
    for level in (0..arch.num_layers - 1).rev() {
        let up = g.upsample2(x)?;
        let cat = g.concat_channels(up, skips[level])?;
        x = run_stack(g, cat, &plan.decoder[level])?;
    }
    let scores = g.conv2d(x, params[plan.head_weight], Some(params[plan.head_bias]))?;
    Ok(ForwardTrace { scores, resolutions })
}
