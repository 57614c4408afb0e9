//! Domain-conditioned mixture-of-experts convolution blocks.
//!
//! A block holds `e` expert kernels of identical shape and a linear gate
//! `g = softmax(W_g c + b_g)` over the domain token `c`. The output is
//! `Σ g_i E_i(f)` followed by the block's shared instance norm and leaky ReLU.
//!
//! Every expert is a linear operator in its kernel, so the weighted sum of
//! expert outputs equals one convolution with the gate-mixed kernel
//! `Σ g_i K_i` (and mixed bias). Forward and backward run on the mixed kernel;
//! expert and gate gradients are recovered from the mixed-kernel gradient.

use rand::Rng;

use crate::domain::DomainToken;
use crate::error::{ensure, Result};
use crate::nn::{self, Conv3Cache, NormCache};
use crate::params::{ParamLayout, ParamRef};
use crate::tensor::FeatureMap;

/// Gate parameters: `w` is row-major `[e, token_len]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GateParams {
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub experts: usize,
    pub token_len: usize,
}

impl GateParams {
    pub fn new(w: Vec<f64>, b: Vec<f64>, token_len: usize) -> Result<Self> {
        let experts = b.len();
        ensure!(experts >= 1, "gate needs at least one expert");
        ensure!(
            w.len() == experts * token_len,
            "gate weight has {} entries, expected {} x {}",
            w.len(),
            experts,
            token_len
        );
        ensure!(
            w.iter().chain(&b).all(|v| v.is_finite()),
            "gate parameters must be finite"
        );
        Ok(Self {
            w,
            b,
            experts,
            token_len,
        })
    }
}

/// Softmax of `W c + b`.
pub(crate) fn gate_softmax(w: &[f64], b: &[f64], token: &[f64]) -> Vec<f64> {
    let t = token.len();
    let logits: Vec<f64> = b
        .iter()
        .enumerate()
        .map(|(i, &bi)| bi + w[i * t..(i + 1) * t].iter().zip(token).map(|(a, c)| a * c).sum::<f64>())
        .collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Gating weights for a token; a point on the `e`-simplex.
pub fn gate_weights(token: &DomainToken, gate: &GateParams) -> Result<Vec<f64>> {
    ensure!(
        token.len() == gate.token_len,
        "token length {} does not match gate input {}",
        token.len(),
        gate.token_len
    );
    Ok(gate_softmax(&gate.w, &gate.b, &token.as_f64()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExpertOp {
    /// 3x3x3, stride 1, padding 1.
    Conv3,
    /// 2x2x2 transposed convolution, stride 2.
    UpConv2,
}

impl ExpertOp {
    fn taps(self) -> usize {
        match self {
            ExpertOp::Conv3 => 27,
            ExpertOp::UpConv2 => 8,
        }
    }

    fn kernel_shape(self, out: usize, inp: usize) -> Vec<usize> {
        match self {
            ExpertOp::Conv3 => vec![out, inp, 3, 3, 3],
            ExpertOp::UpConv2 => vec![out, inp, 2, 2, 2],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MoeBlockConfig {
    pub op: ExpertOp,
    pub in_channels: usize,
    pub out_channels: usize,
    pub experts: usize,
    pub token_len: usize,
    /// Shared instance norm + leaky ReLU after aggregation. Experts carry no
    /// bias when this is on (the norm would cancel it).
    pub norm: bool,
}

#[derive(Debug, Clone)]
pub struct MoeBlock {
    pub config: MoeBlockConfig,
    kernels: Vec<ParamRef>,
    biases: Vec<ParamRef>,
    gate_w: ParamRef,
    gate_b: ParamRef,
    norm: Option<(ParamRef, ParamRef)>,
}

pub struct MoeCache {
    input: Option<FeatureMap>,
    conv: Option<Conv3Cache>,
    gates: Vec<f64>,
    token: Vec<f64>,
    mixed_kernel: Vec<f64>,
    norm: Option<NormCache>,
    output: Option<FeatureMap>,
}

impl MoeCache {
    pub fn gates(&self) -> &[f64] {
        &self.gates
    }
}

impl MoeBlock {
    /// Registers the block's tensors under `prefix` (e.g. `enc0.block1`).
    pub fn register(layout: &mut ParamLayout, prefix: &str, config: MoeBlockConfig) -> Self {
        let shape = config.op.kernel_shape(config.out_channels, config.in_channels);
        let mut kernels = Vec::with_capacity(config.experts);
        let mut biases = Vec::new();
        for i in 0..config.experts {
            kernels.push(layout.add(format!("{prefix}.expert{i}.kernel"), &shape));
            if !config.norm {
                biases.push(layout.add(format!("{prefix}.expert{i}.bias"), &[config.out_channels]));
            }
        }
        let gate_w = layout.add(format!("{prefix}.gate.W"), &[config.experts, config.token_len]);
        let gate_b = layout.add(format!("{prefix}.gate.b"), &[config.experts]);
        let norm = config.norm.then(|| {
            (
                layout.add(format!("{prefix}.norm.gamma"), &[config.out_channels]),
                layout.add(format!("{prefix}.norm.beta"), &[config.out_channels]),
            )
        });
        Self {
            config,
            kernels,
            biases,
            gate_w,
            gate_b,
            norm,
        }
    }

    /// A block that owns a freshly initialized parameter vector.
    pub fn standalone<R: Rng + ?Sized>(config: MoeBlockConfig, gate_init: f64, rng: &mut R) -> (Self, Vec<f64>) {
        let mut layout = ParamLayout::default();
        let block = Self::register(&mut layout, "block", config);
        let mut params = vec![0.0; layout.total()];
        block.init(&mut params, gate_init, rng);
        (block, params)
    }

    pub fn init<R: Rng + ?Sized>(&self, params: &mut [f64], gate_init: f64, rng: &mut R) {
        let fan_in = (self.config.in_channels * self.config.op.taps()) as f64;
        let bound = if self.config.norm {
            (6.0 / fan_in).sqrt()
        } else {
            (3.0 / fan_in).sqrt()
        };
        for k in &self.kernels {
            k.get_mut(params).iter_mut().for_each(|v| *v = rng.gen_range(-bound..bound));
        }
        for b in &self.biases {
            b.get_mut(params).iter_mut().for_each(|v| *v = 0.0);
        }
        if gate_init > 0.0 {
            self.gate_w
                .get_mut(params)
                .iter_mut()
                .for_each(|v| *v = rng.gen_range(-gate_init..gate_init));
        }
        self.gate_b.get_mut(params).iter_mut().for_each(|v| *v = 0.0);
        if let Some((g, b)) = self.norm {
            g.get_mut(params).iter_mut().for_each(|v| *v = 1.0);
            b.get_mut(params).iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn gate_params(&self, params: &[f64]) -> GateParams {
        GateParams {
            w: self.gate_w.get(params).to_vec(),
            b: self.gate_b.get(params).to_vec(),
            experts: self.config.experts,
            token_len: self.config.token_len,
        }
    }

    pub fn kernel_ref(&self, expert: usize) -> ParamRef {
        self.kernels[expert]
    }

    pub fn bias_ref(&self, expert: usize) -> Option<ParamRef> {
        self.biases.get(expert).copied()
    }

    pub fn gate_refs(&self) -> (ParamRef, ParamRef) {
        (self.gate_w, self.gate_b)
    }

    pub fn gates(&self, params: &[f64], token: &[f64]) -> Vec<f64> {
        gate_softmax(self.gate_w.get(params), self.gate_b.get(params), token)
    }

    fn mix(&self, params: &[f64], gates: &[f64], refs: &[ParamRef]) -> Vec<f64> {
        let mut mixed = vec![0.0; refs[0].len];
        for (r, &g) in refs.iter().zip(gates) {
            for (m, v) in mixed.iter_mut().zip(r.get(params)) {
                *m += g * v;
            }
        }
        mixed
    }

    /// Applies the selected expert operator with an explicit kernel/bias.
    pub(crate) fn apply_op(&self, x: &FeatureMap, kernel: &[f64], bias: Option<&[f64]>) -> (FeatureMap, Option<Conv3Cache>) {
        match self.config.op {
            ExpertOp::Conv3 => {
                let (y, c) = nn::conv3_forward(x, kernel, bias, self.config.out_channels);
                (y, Some(c))
            }
            ExpertOp::UpConv2 => (nn::upconv2_forward(x, kernel, bias, self.config.out_channels), None),
        }
    }

    fn check_input(&self, x: &FeatureMap, token: &[f64]) -> Result<()> {
        ensure!(
            x.channels == self.config.in_channels,
            "MoE block expects {} input channels, got {}",
            self.config.in_channels,
            x.channels
        );
        ensure!(
            token.len() == self.config.token_len,
            "MoE block expects token length {}, got {}",
            self.config.token_len,
            token.len()
        );
        Ok(())
    }

    /// Gate-weighted sum of expert outputs, before norm/activation.
    pub fn aggregate(&self, params: &[f64], x: &FeatureMap, token: &[f64]) -> Result<FeatureMap> {
        self.check_input(x, token)?;
        let gates = self.gates(params, token);
        let kernel = self.mix(params, &gates, &self.kernels);
        let bias = (!self.biases.is_empty()).then(|| self.mix(params, &gates, &self.biases));
        Ok(self.apply_op(x, &kernel, bias.as_deref()).0)
    }

    pub fn forward(&self, params: &[f64], x: &FeatureMap, token: &[f64]) -> Result<(FeatureMap, MoeCache)> {
        self.check_input(x, token)?;
        let gates = self.gates(params, token);
        let kernel = self.mix(params, &gates, &self.kernels);
        let bias = (!self.biases.is_empty()).then(|| self.mix(params, &gates, &self.biases));
        let (agg, conv) = self.apply_op(x, &kernel, bias.as_deref());
        let input = match self.config.op {
            ExpertOp::UpConv2 => Some(x.clone()),
            ExpertOp::Conv3 => None,
        };
        let (out, norm_cache, output) = match self.norm {
            Some((g, b)) => {
                let (mut y, nc) = nn::instance_norm_forward(&agg, g.get(params), b.get(params));
                nn::leaky_relu_inplace(&mut y);
                (y.clone(), Some(nc), Some(y))
            }
            None => (agg, None, None),
        };
        Ok((
            out,
            MoeCache {
                input,
                conv,
                gates,
                token: token.to_vec(),
                mixed_kernel: kernel,
                norm: norm_cache,
                output,
            },
        ))
    }

    /// Accumulates parameter gradients into `grads` and returns the input gradient.
    pub fn backward(&self, params: &[f64], cache: &MoeCache, dy: FeatureMap, grads: &mut [f64]) -> FeatureMap {
        let mut d_agg = dy;
        if let Some((g, b)) = self.norm {
            let out = cache.output.as_ref().expect("norm output cached");
            nn::leaky_relu_backward_inplace(out, &mut d_agg);
            let mut dgamma = vec![0.0; g.len];
            let mut dbeta = vec![0.0; b.len];
            d_agg = nn::instance_norm_backward(
                cache.norm.as_ref().expect("norm cache"),
                g.get(params),
                &d_agg,
                &mut dgamma,
                &mut dbeta,
            );
            add_into(g.get_mut(grads), &dgamma);
            add_into(b.get_mut(grads), &dbeta);
        }

        let mut dkernel = vec![0.0; cache.mixed_kernel.len()];
        let mut dbias = vec![0.0; self.config.out_channels];
        let has_bias = !self.biases.is_empty();
        let dx = match self.config.op {
            ExpertOp::Conv3 => nn::conv3_backward(
                cache.conv.as_ref().expect("conv cache"),
                &cache.mixed_kernel,
                &d_agg,
                &mut dkernel,
                has_bias.then_some(&mut dbias[..]),
            ),
            ExpertOp::UpConv2 => nn::upconv2_backward(
                cache.input.as_ref().expect("input cached"),
                &cache.mixed_kernel,
                &d_agg,
                &mut dkernel,
                has_bias.then_some(&mut dbias[..]),
            ),
        };

        // d/dg_i of <dK, Σ g K> is <dK, K_i>; expert grads are g_i * dK.
        let e = self.config.experts;
        let mut dgates = vec![0.0; e];
        for i in 0..e {
            let gi = cache.gates[i];
            let k = self.kernels[i];
            dgates[i] = dot(k.get(params), &dkernel);
            for (acc, d) in k.get_mut(grads).iter_mut().zip(&dkernel) {
                *acc += gi * d;
            }
            if has_bias {
                let b = self.biases[i];
                dgates[i] += dot(b.get(params), &dbias);
                for (acc, d) in b.get_mut(grads).iter_mut().zip(&dbias) {
                    *acc += gi * d;
                }
            }
        }
        let mean: f64 = cache.gates.iter().zip(&dgates).map(|(g, d)| g * d).sum();
        let t = self.config.token_len;
        let gw = self.gate_w.get_mut(grads);
        for j in 0..e {
            let dz = cache.gates[j] * (dgates[j] - mean);
            for (acc, c) in gw[j * t..(j + 1) * t].iter_mut().zip(&cache.token) {
                *acc += dz * c;
            }
        }
        let gb = self.gate_b.get_mut(grads);
        for j in 0..e {
            gb[j] += cache.gates[j] * (dgates[j] - mean);
        }
        dx
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
