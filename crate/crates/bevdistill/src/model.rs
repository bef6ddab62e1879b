//! Toy teacher and student networks plus the distillation modules'
//! parameter registry.
//!
//! Both networks are three-layer per-cell MLPs with a linear
//! classification head: the teacher consumes per-voxel `(x, y, z, i)`
//! means, the student per-pillar `(x, y, i)` means (the BEV projection
//! costs it the height channel). They stand in for the full voxel and
//! BEV architectures while exposing the same distillation surfaces:
//! per-layer sparse features on one side, pillar features on the other.

use rand::Rng;

use crate::compress::ZConvParams;
use crate::config::{TrainConfig, NUM_LAYERS};
use crate::error::Result;
use crate::lwd::HeightEmbedding;
use crate::store::{bias_init, linear_init, Binder, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::vpd::{CrossAttentionParams, DomainTransferParams};

/// Teacher input width: per-voxel mean of `(x, y, z, intensity)`.
pub const TEACHER_INPUT_WIDTH: usize = 4;
/// Student input width: per-pillar mean of `(x, y, intensity)`.
pub const STUDENT_INPUT_WIDTH: usize = 3;

/// A linear layer held as parameter names into the store.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: String,
    pub b: String,
}

impl Linear {
    fn new(prefix: &str) -> Self {
        Linear {
            w: format!("{prefix}.w"),
            b: format!("{prefix}.b"),
        }
    }

    fn init(&self, store: &mut ParamStore, rng: &mut impl Rng, fan_in: usize, fan_out: usize) {
        store.insert(&self.w, linear_init(rng, fan_in, fan_out));
        store.insert(&self.b, bias_init(rng, fan_out));
    }

    fn init_head(&self, store: &mut ParamStore, rng: &mut impl Rng, fan_in: usize, fan_out: usize) {
        store.insert(&self.w, linear_init(rng, fan_in, fan_out));
        store.insert(&self.b, Tensor::zeros(vec![fan_out]));
    }

    pub fn forward(&self, tape: &Tape, binder: &Binder, x: Var) -> Result<Var> {
        tape.add_rowvec(tape.matmul(x, binder.var(&self.w))?, binder.var(&self.b))
    }
}

/// Per-cell MLP: `NUM_LAYERS` hidden layers with ReLU, then a linear
/// classification head. Layer features are the post-ReLU activations.
#[derive(Debug, Clone)]
pub struct ToyNet {
    pub enc: Vec<Linear>,
    pub head: Linear,
}

impl ToyNet {
    pub fn new(prefix: &str) -> Self {
        ToyNet {
            enc: (1..=NUM_LAYERS)
                .map(|l| Linear::new(&format!("{prefix}.enc{l}")))
                .collect(),
            head: Linear::new(&format!("{prefix}.head")),
        }
    }

    pub fn init(
        &self,
        store: &mut ParamStore,
        rng: &mut impl Rng,
        input_width: usize,
        hidden: usize,
        num_classes: usize,
    ) {
        let mut fan_in = input_width;
        for layer in &self.enc {
            layer.init(store, rng, fan_in, hidden);
            fan_in = hidden;
        }
        self.head.init_head(store, rng, fan_in, num_classes);
    }

    /// Returns the per-layer features and the classification logits, one
    /// row per input cell.
    pub fn forward(
        &self,
        tape: &Tape,
        binder: &Binder,
        input: Var,
    ) -> Result<(Vec<Var>, Var)> {
        let mut feats = Vec::with_capacity(self.enc.len());
        let mut x = input;
        for layer in &self.enc {
            x = tape.relu(layer.forward(tape, binder, x)?);
            feats.push(x);
        }
        let logits = self.head.forward(tape, binder, x)?;
        Ok((feats, logits))
    }
}

pub fn teacher_net() -> ToyNet {
    ToyNet::new("teacher")
}

pub fn student_net() -> ToyNet {
    ToyNet::new("student")
}

/// Parameter names of one distilled layer's voxel-to-pillar path.
/// Components absent under the ablation flags hold no names.
#[derive(Debug, Clone)]
pub struct VpdLayerModule {
    pub layer: usize,
    pub compress: Option<(String, String)>,
    pub transfer: Option<[String; 6]>,
    pub attention: Option<[String; 3]>,
}

impl VpdLayerModule {
    pub fn compress_params(&self, binder: &Binder, nz: usize) -> Option<ZConvParams> {
        self.compress.as_ref().map(|(w, b)| ZConvParams {
            weight: binder.var(w),
            bias: binder.var(b),
            nz,
        })
    }

    pub fn transfer_params(&self, binder: &Binder) -> Option<DomainTransferParams> {
        self.transfer.as_ref().map(|names| DomainTransferParams {
            w1: binder.var(&names[0]),
            b1: binder.var(&names[1]),
            gamma: binder.var(&names[2]),
            beta: binder.var(&names[3]),
            w2: binder.var(&names[4]),
            b2: binder.var(&names[5]),
        })
    }

    pub fn attention_params(&self, binder: &Binder) -> Option<CrossAttentionParams> {
        self.attention.as_ref().map(|names| CrossAttentionParams {
            wq: binder.var(&names[0]),
            wk: binder.var(&names[1]),
            wv: binder.var(&names[2]),
        })
    }
}

/// Parameter names of the label-weight distillation path.
#[derive(Debug, Clone)]
pub struct LwdModule {
    pub table: String,
    pub stage1: (String, String),
    pub stage2: (String, String),
}

impl LwdModule {
    pub fn embedding(&self, binder: &Binder) -> HeightEmbedding {
        HeightEmbedding {
            table: binder.var(&self.table),
        }
    }

    pub fn stage_params(&self, binder: &Binder, nz: usize) -> crate::lwd::TwoStageParams {
        crate::lwd::TwoStageParams {
            stage1: ZConvParams {
                weight: binder.var(&self.stage1.0),
                bias: binder.var(&self.stage1.1),
                nz,
            },
            stage2: ZConvParams {
                weight: binder.var(&self.stage2.0),
                bias: binder.var(&self.stage2.1),
                nz,
            },
        }
    }
}

/// All distillation-side modules the config enables.
#[derive(Debug, Clone, Default)]
pub struct DistillModel {
    pub vpd: Vec<VpdLayerModule>,
    pub lwd: Option<LwdModule>,
}

impl DistillModel {
    pub fn new(config: &TrainConfig) -> Self {
        let mut vpd = Vec::new();
        if config.ablation.vpd {
            let mut layers = config.vpd_layers.clone();
            layers.sort_unstable();
            for l in layers {
                let p = format!("vpd.l{l}");
                vpd.push(VpdLayerModule {
                    layer: l,
                    compress: (config.ablation.compression_mode
                        == crate::compress::ZCompressMode::ZConv)
                        .then(|| (format!("{p}.compress.w"), format!("{p}.compress.b"))),
                    transfer: config.ablation.domain_transfer.then(|| {
                        [
                            format!("{p}.transfer.w1"),
                            format!("{p}.transfer.b1"),
                            format!("{p}.transfer.gamma"),
                            format!("{p}.transfer.beta"),
                            format!("{p}.transfer.w2"),
                            format!("{p}.transfer.b2"),
                        ]
                    }),
                    attention: config.ablation.cross_attention.then(|| {
                        [
                            format!("{p}.attn.wq"),
                            format!("{p}.attn.wk"),
                            format!("{p}.attn.wv"),
                        ]
                    }),
                });
            }
        }
        let lwd = config.lwd.enabled.then(|| LwdModule {
            table: "lwd.embed.table".into(),
            stage1: ("lwd.stage1.w".into(), "lwd.stage1.b".into()),
            stage2: ("lwd.stage2.w".into(), "lwd.stage2.b".into()),
        });
        DistillModel { vpd, lwd }
    }

    /// Registers every enabled parameter. The domain-transfer MLP starts
    /// identity-like (weights identity, affine pass-through) so early
    /// training approximates a pass-through of the compressed teacher
    /// features; the height-embedding table starts at zero.
    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng, config: &TrainConfig) {
        let (c_v, c_b) = (config.c_v, config.c_b);
        let nz = config.grid.z_bins;
        for module in &self.vpd {
            if let Some((w, b)) = &module.compress {
                store.insert(w, linear_init(rng, nz * c_v, c_b));
                store.insert(b, bias_init(rng, c_b));
            }
            if let Some(names) = &module.transfer {
                store.insert(&names[0], Tensor::identity(c_b));
                store.insert(&names[1], Tensor::zeros(vec![c_b]));
                store.insert(&names[2], Tensor::new(vec![c_b], vec![1.0; c_b]));
                store.insert(&names[3], bias_init(rng, c_b));
                store.insert(&names[4], Tensor::identity(c_b));
                store.insert(&names[5], Tensor::zeros(vec![c_b]));
            }
            if let Some(names) = &module.attention {
                store.insert(&names[0], linear_init(rng, c_b, c_b));
                store.insert(&names[1], linear_init(rng, c_b, c_b));
                store.insert(&names[2], linear_init(rng, c_b, c_b));
            }
        }
        if let Some(lwd) = &self.lwd {
            store.insert(&lwd.table, Tensor::zeros(vec![nz, c_v]));
            store.insert(&lwd.stage1.0, linear_init(rng, nz * c_v, c_v));
            store.insert(&lwd.stage1.1, bias_init(rng, c_v));
            store.insert(&lwd.stage2.0, linear_init(rng, nz * c_v, c_b));
            store.insert(&lwd.stage2.1, bias_init(rng, c_b));
        }
    }
}
