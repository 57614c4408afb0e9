//! Compact 3D UNet whose convolutions are all domain-conditioned MoE blocks.
//!
//! Layout for `widths = [w0, .., wL-1]`:
//!
//! ```text
//! enc0: block0 (m -> w0), block1 (w0 -> w0)
//! encl: maxpool, block0 (w(l-1) -> wl), block1 (wl -> wl)      l = 1..L-1
//! decl: up (MoE transposed conv w(l+1) -> wl), concat skip,
//!       block0 (2 wl -> wl), block1 (wl -> wl)                  l = L-2..0
//! head: plain 1x1x1 conv w0 -> 2
//! ```
//!
//! The output of the deepest encoder stage is the bottleneck used for latent
//! distillation, flattened in C order.

use std::collections::HashMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use safetensors::tensor::{Dtype, TensorView};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::moe::{ExpertOp, MoeBlock, MoeBlockConfig, MoeCache};
use crate::nn;
use crate::params::{ParamLayout, ParamRef};
use crate::synthdata::VolumeSample;
use crate::tensor::{Dims, FeatureMap};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Must equal the universe's modality count `m`.
    pub in_channels: usize,
    #[serde(default = "two")]
    pub out_channels: usize,
    /// Channel width per resolution level; its length is the UNet depth.
    pub widths: Vec<usize>,
    /// Experts per MoE block (`e`).
    pub experts: usize,
    /// Token length `m + d`.
    pub token_len: usize,
    /// Half-width of the uniform gate weight initialization.
    #[serde(default = "default_gate_init")]
    pub gate_init: f64,
}

fn two() -> usize {
    2
}

fn default_gate_init() -> f64 {
    0.1
}

impl ModelConfig {
    pub fn new(in_channels: usize, token_len: usize) -> Self {
        Self {
            in_channels,
            out_channels: 2,
            widths: vec![8, 16, 32],
            experts: 4,
            token_len,
            gate_init: default_gate_init(),
        }
    }

    pub fn depth(&self) -> usize {
        self.widths.len()
    }

    /// Every spatial dim of an input must be a multiple of this.
    pub fn spatial_multiple(&self) -> usize {
        1 << (self.depth() - 1)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.in_channels >= 1, "in_channels must be >= 1");
        ensure!(self.out_channels == 2, "out_channels must be 2 (background/lesion)");
        ensure!(!self.widths.is_empty(), "widths must be non-empty");
        ensure!(self.widths.iter().all(|&w| w > 0), "widths must be positive");
        ensure!(self.experts >= 1, "experts must be >= 1");
        ensure!(self.token_len >= 1, "token_len must be >= 1");
        ensure!(self.gate_init >= 0.0, "gate_init must be >= 0");
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    /// `[2, D, H, W]` background/lesion logits.
    pub logits: FeatureMap,
    /// Flattened deepest encoder feature map.
    pub bottleneck: Vec<f64>,
}

#[derive(Debug, Clone)]
struct DecoderStage {
    up: MoeBlock,
    blocks: [MoeBlock; 2],
}

#[derive(Debug, Clone)]
pub struct MoeUNet {
    config: ModelConfig,
    layout: ParamLayout,
    encoder: Vec<[MoeBlock; 2]>,
    decoder: Vec<DecoderStage>,
    head_kernel: ParamRef,
    head_bias: ParamRef,
}

/// Everything the backward pass needs from one training forward pass.
pub struct UNetCache {
    enc: Vec<[MoeCache; 2]>,
    pool_args: Vec<Vec<usize>>,
    pool_in_dims: Vec<Dims>,
    dec: Vec<(MoeCache, [MoeCache; 2])>,
    head_input: FeatureMap,
}

impl MoeUNet {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut layout = ParamLayout::default();
        let w = &config.widths;
        let block = |op, i, o, norm| MoeBlockConfig {
            op,
            in_channels: i,
            out_channels: o,
            experts: config.experts,
            token_len: config.token_len,
            norm,
        };
        let mut encoder = Vec::new();
        for l in 0..w.len() {
            let cin = if l == 0 { config.in_channels } else { w[l - 1] };
            encoder.push([
                MoeBlock::register(&mut layout, &format!("enc{l}.block0"), block(ExpertOp::Conv3, cin, w[l], true)),
                MoeBlock::register(&mut layout, &format!("enc{l}.block1"), block(ExpertOp::Conv3, w[l], w[l], true)),
            ]);
        }
        let mut decoder = Vec::new();
        for l in (0..w.len() - 1).rev() {
            decoder.push(DecoderStage {
                up: MoeBlock::register(&mut layout, &format!("dec{l}.up"), block(ExpertOp::UpConv2, w[l + 1], w[l], false)),
                blocks: [
                    MoeBlock::register(&mut layout, &format!("dec{l}.block0"), block(ExpertOp::Conv3, 2 * w[l], w[l], true)),
                    MoeBlock::register(&mut layout, &format!("dec{l}.block1"), block(ExpertOp::Conv3, w[l], w[l], true)),
                ],
            });
        }
        let head_kernel = layout.add("head.kernel", &[config.out_channels, w[0], 1, 1, 1]);
        let head_bias = layout.add("head.bias", &[config.out_channels]);
        Ok(Self {
            config,
            layout,
            encoder,
            decoder,
            head_kernel,
            head_bias,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn num_params(&self) -> usize {
        self.layout.total()
    }

    /// Every MoE block with its hierarchical prefix, encoder first.
    pub fn blocks(&self) -> Vec<(String, &MoeBlock)> {
        let mut out = Vec::new();
        for (l, stage) in self.encoder.iter().enumerate() {
            for (b, blk) in stage.iter().enumerate() {
                out.push((format!("enc{l}.block{b}"), blk));
            }
        }
        let depth = self.config.depth();
        for (i, stage) in self.decoder.iter().enumerate() {
            let l = depth - 2 - i;
            out.push((format!("dec{l}.up"), &stage.up));
            for (b, blk) in stage.blocks.iter().enumerate() {
                out.push((format!("dec{l}.block{b}"), blk));
            }
        }
        out
    }

    pub fn init_params(&self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = vec![0.0; self.layout.total()];
        for stage in &self.encoder {
            for b in stage {
                b.init(&mut params, self.config.gate_init, &mut rng);
            }
        }
        for stage in &self.decoder {
            stage.up.init(&mut params, self.config.gate_init, &mut rng);
            for b in &stage.blocks {
                b.init(&mut params, self.config.gate_init, &mut rng);
            }
        }
        let bound = (3.0 / self.config.widths[0] as f64).sqrt();
        use rand::Rng;
        self.head_kernel
            .get_mut(&mut params)
            .iter_mut()
            .for_each(|v| *v = rng.gen_range(-bound..bound));
        params
    }

    pub fn check_input(&self, input: &FeatureMap, token: &[f64]) -> Result<()> {
        ensure!(
            input.channels == self.config.in_channels,
            "model expects {} input channels, got {}",
            self.config.in_channels,
            input.channels
        );
        ensure!(
            token.len() == self.config.token_len,
            "model expects token length {}, got {}",
            self.config.token_len,
            token.len()
        );
        let mult = self.config.spatial_multiple();
        ensure!(
            input.dims.iter().all(|&d| d > 0 && d % mult == 0),
            "spatial dims {:?} must be multiples of {} for depth {}",
            input.dims,
            mult,
            self.config.depth()
        );
        Ok(())
    }

    /// Evaluation-mode forward pass.
    pub fn forward(&self, params: &[f64], input: &FeatureMap, token: &[f64]) -> Result<ForwardOutput> {
        self.forward_train(params, input, token).map(|(o, _)| o)
    }

    pub fn forward_train(&self, params: &[f64], input: &FeatureMap, token: &[f64]) -> Result<(ForwardOutput, UNetCache)> {
        ensure!(params.len() == self.layout.total(), "parameter vector length mismatch");
        self.check_input(input, token)?;
        let depth = self.config.depth();
        let mut skips: Vec<FeatureMap> = Vec::with_capacity(depth);
        let mut enc_caches = Vec::with_capacity(depth);
        let mut pool_args = Vec::new();
        let mut pool_in_dims = Vec::new();
        for (l, stage) in self.encoder.iter().enumerate() {
            let h = if l == 0 {
                input.clone()
            } else {
                let prev = &skips[l - 1];
                pool_in_dims.push(prev.dims);
                let (p, arg) = nn::maxpool2_forward(prev);
                pool_args.push(arg);
                p
            };
            let (h, c0) = stage[0].forward(params, &h, token)?;
            let (h, c1) = stage[1].forward(params, &h, token)?;
            enc_caches.push([c0, c1]);
            skips.push(h);
        }
        let bottleneck = skips[depth - 1].data.clone();
        let mut h = skips.pop().expect("depth >= 1");
        let mut dec_caches = Vec::with_capacity(depth - 1);
        for stage in &self.decoder {
            let skip = skips.pop().expect("one skip per decoder stage");
            let (u, cu) = stage.up.forward(params, &h, token)?;
            let cat = FeatureMap::concat(&u, &skip);
            let (x, c0) = stage.blocks[0].forward(params, &cat, token)?;
            let (x, c1) = stage.blocks[1].forward(params, &x, token)?;
            dec_caches.push((cu, [c0, c1]));
            h = x;
        }
        let logits = nn::pointwise_forward(
            &h,
            self.head_kernel.get(params),
            self.head_bias.get(params),
            self.config.out_channels,
        );
        Ok((
            ForwardOutput { logits, bottleneck },
            UNetCache {
                enc: enc_caches,
                pool_args,
                pool_in_dims,
                dec: dec_caches,
                head_input: h,
            },
        ))
    }

    /// Backpropagates `dlogits` (and optionally a bottleneck gradient),
    /// accumulating into `grads`.
    pub fn backward(
        &self,
        params: &[f64],
        cache: UNetCache,
        dlogits: &FeatureMap,
        dbottleneck: Option<&[f64]>,
        grads: &mut [f64],
    ) {
        let UNetCache {
            enc,
            pool_args,
            pool_in_dims,
            dec,
            head_input,
        } = cache;
        let depth = self.config.depth();
        let mut dkernel = vec![0.0; self.head_kernel.len];
        let mut dbias = vec![0.0; self.head_bias.len];
        let mut dh = nn::pointwise_backward(&head_input, self.head_kernel.get(params), dlogits, &mut dkernel, &mut dbias);
        add_into(self.head_kernel.get_mut(grads), &dkernel);
        add_into(self.head_bias.get_mut(grads), &dbias);

        // decoder stages were run from deepest to shallowest
        let mut dskips: Vec<Option<FeatureMap>> = vec![None; depth];
        for (i, (stage, (cu, [c0, c1]))) in self.decoder.iter().zip(dec).enumerate().rev() {
            let l = depth - 2 - i;
            let d = stage.blocks[1].backward(params, &c1, dh, grads);
            let dcat = stage.blocks[0].backward(params, &c0, d, grads);
            let (du, dskip) = dcat.split(stage.up.config.out_channels);
            dskips[l] = Some(dskip);
            dh = stage.up.backward(params, &cu, du, grads);
        }
        if let Some(db) = dbottleneck {
            for (a, b) in dh.data.iter_mut().zip(db) {
                *a += b;
            }
        }
        let mut d = dh;
        for (l, (stage, [c0, c1])) in self.encoder.iter().zip(enc).enumerate().rev() {
            if l < depth - 1 {
                if let Some(s) = dskips[l].take() {
                    d.add_assign(&s);
                }
            }
            let x = stage[1].backward(params, &c1, d, grads);
            let x = stage[0].backward(params, &c0, x, grads);
            d = if l > 0 {
                nn::maxpool2_backward(&pool_args[l - 1], &x, pool_in_dims[l - 1])
            } else {
                x
            };
        }
    }

    /// Writes a safetensors archive: one F64 tensor per layout entry plus the
    /// config JSON under the `config` metadata key.
    pub fn save_checkpoint(&self, params: &[f64], path: &Path) -> Result<()> {
        ensure!(params.len() == self.layout.total(), "parameter vector length mismatch");
        let bytes: Vec<(String, Vec<usize>, Vec<u8>)> = self
            .layout
            .specs()
            .iter()
            .map(|s| {
                let data: Vec<u8> = params[s.offset..s.offset + s.len()]
                    .iter()
                    .flat_map(|v| v.to_le_bytes())
                    .collect();
                (s.name.clone(), s.shape.clone(), data)
            })
            .collect();
        let views = bytes
            .iter()
            .map(|(n, shape, data)| {
                TensorView::new(Dtype::F64, shape.clone(), data)
                    .map(|v| (n.clone(), v))
                    .map_err(|e| Error::Checkpoint(e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut meta = HashMap::new();
        meta.insert("config".to_string(), serde_json::to_string(&self.config)?);
        meta.insert("format".to_string(), "braincl-moe-unet-v1".to_string());
        safetensors::serialize_to_file(views, Some(meta), path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
    }

    pub fn load_checkpoint(path: &Path) -> Result<(Self, Vec<f64>)> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let (_, meta) = safetensors::SafeTensors::read_metadata(&bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let config_json = meta
            .metadata()
            .as_ref()
            .and_then(|m| m.get("config"))
            .ok_or_else(|| Error::Checkpoint("missing config metadata".into()))?;
        let config: ModelConfig = serde_json::from_str(config_json)?;
        let net = Self::new(config)?;
        let st = safetensors::SafeTensors::deserialize(&bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut params = vec![0.0; net.layout.total()];
        for s in net.layout.specs() {
            let t = st
                .tensor(&s.name)
                .map_err(|e| Error::Checkpoint(format!("{}: {e}", s.name)))?;
            ensure!(t.dtype() == Dtype::F64, "{}: expected F64", s.name);
            ensure!(t.shape() == s.shape.as_slice(), "{}: shape mismatch", s.name);
            for (dst, c) in params[s.offset..s.offset + s.len()].iter_mut().zip(t.data().chunks_exact(8)) {
                *dst = f64::from_le_bytes(c.try_into().expect("8 bytes"));
            }
        }
        Ok((net, params))
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Converts a packed sample into the model's input map.
pub fn input_from_sample(sample: &VolumeSample) -> FeatureMap {
    FeatureMap {
        channels: sample.channels(),
        dims: sample.dims,
        data: sample.packed.iter().map(|&v| v as f64).collect(),
    }
}
