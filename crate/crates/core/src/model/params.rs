//! Parameter naming, shapes, initialization and storage.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::rng::SeedStream;
use crate::shortcuts::{ShortcutKind, Side, Site};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
    Xavier,
    Normal {
        std: f64,
    },
    Zeros,
    Ones,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

/// How an attention block builds keys and values, as parameter indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KvIndex {
    Plain {
        wk: usize,
        wv: usize,
    },
    Gated {
        wk: usize,
        wv: usize,
        wk_sc: usize,
        wv_sc: usize,
        bk: usize,
        bv: usize,
    },
    Fused {
        wk: usize,
        wv: usize,
        bk: usize,
        bv: usize,
    },
    Residual {
        wk: usize,
        wv: usize,
        wk_sc: usize,
        wv_sc: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionIndex {
    pub wq: usize,
    pub wo: usize,
    pub kv: KvIndex,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NormIndex {
    pub gain: usize,
    pub bias: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FfnIndex {
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderLayerIndex {
    pub self_attn: AttentionIndex,
    pub norm1: NormIndex,
    pub ffn: FfnIndex,
    pub norm2: NormIndex,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecoderLayerIndex {
    pub self_attn: AttentionIndex,
    pub norm1: NormIndex,
    pub cross_attn: AttentionIndex,
    pub norm2: NormIndex,
    pub ffn: FfnIndex,
    pub norm3: NormIndex,
}

/// Every parameter of a configuration, in a fixed order, plus the indices
/// the forward pass needs.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub specs: Vec<ParamSpec>,
    pub embed: usize,
    pub out_proj: Option<usize>,
    pub encoder: Vec<EncoderLayerIndex>,
    pub decoder: Vec<DecoderLayerIndex>,
}

struct Builder {
    specs: Vec<ParamSpec>,
}

impl Builder {
    fn push(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        self.specs.push(ParamSpec { name, shape, init });
        self.specs.len() - 1
    }

    fn matrix(&mut self, name: String, rows: usize, cols: usize) -> usize {
        self.push(name, vec![rows, cols], Init::Xavier)
    }

    fn vector(&mut self, name: String, len: usize, init: Init) -> usize {
        self.push(name, vec![len], init)
    }

    fn norm(&mut self, prefix: &str, d: usize) -> NormIndex {
        NormIndex {
            gain: self.vector(format!("{prefix}.g"), d, Init::Ones),
            bias: self.vector(format!("{prefix}.b"), d, Init::Zeros),
        }
    }

    fn ffn(&mut self, prefix: &str, d: usize, d_ff: usize) -> FfnIndex {
        FfnIndex {
            w1: self.matrix(format!("{prefix}.w1"), d, d_ff),
            b1: self.vector(format!("{prefix}.b1"), d_ff, Init::Zeros),
            w2: self.matrix(format!("{prefix}.w2"), d_ff, d),
            b2: self.vector(format!("{prefix}.b2"), d, Init::Zeros),
        }
    }

    fn attention(&mut self, prefix: &str, d: usize, shortcut: ShortcutShape) -> AttentionIndex {
        let wq = self.matrix(format!("{prefix}.wq"), d, d);
        let kv = match shortcut {
            ShortcutShape::Fused => KvIndex::Fused {
                wk: self.matrix(format!("{prefix}.fuse.wk"), 2 * d, 2 * d),
                wv: self.matrix(format!("{prefix}.fuse.wv"), 2 * d, 2 * d),
                bk: self.vector(format!("{prefix}.fuse.bk"), d, Init::Zeros),
                bv: self.vector(format!("{prefix}.fuse.bv"), d, Init::Zeros),
            },
            other => {
                let wk = self.matrix(format!("{prefix}.wk"), d, d);
                let wv = self.matrix(format!("{prefix}.wv"), d, d);
                match other {
                    ShortcutShape::None => KvIndex::Plain { wk, wv },
                    ShortcutShape::Gated => KvIndex::Gated {
                        wk,
                        wv,
                        wk_sc: self.matrix(format!("{prefix}.sc.wk"), d, d),
                        wv_sc: self.matrix(format!("{prefix}.sc.wv"), d, d),
                        bk: self.vector(format!("{prefix}.sc.bk"), d, Init::Zeros),
                        bv: self.vector(format!("{prefix}.sc.bv"), d, Init::Zeros),
                    },
                    ShortcutShape::Residual => KvIndex::Residual {
                        wk,
                        wv,
                        wk_sc: self.matrix(format!("{prefix}.sc.wk"), d, d),
                        wv_sc: self.matrix(format!("{prefix}.sc.wv"), d, d),
                    },
                    ShortcutShape::Fused => unreachable!(),
                }
            }
        };
        let wo = self.matrix(format!("{prefix}.wo"), d, d);
        AttentionIndex { wq, wo, kv }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ShortcutShape {
    None,
    Gated,
    Fused,
    Residual,
}

fn shortcut_shape(config: &ModelConfig, side: Side, site: Site) -> ShortcutShape {
    if !config.variant.shortcut_at(side, site) {
        ShortcutShape::None
    } else if config.variant.kind == ShortcutKind::LexicalFusion {
        ShortcutShape::Fused
    } else if config.gated {
        ShortcutShape::Gated
    } else {
        ShortcutShape::Residual
    }
}

impl Layout {
    pub fn new(config: &ModelConfig) -> Self {
        let (d, d_ff) = (config.d_model, config.d_ff);
        let mut b = Builder { specs: Vec::new() };
        let embed = b.push(
            "embed".into(),
            vec![config.vocab_size, d],
            Init::Normal {
                std: (d as f64).powf(-0.5),
            },
        );
        let out_proj = (!config.tie_embeddings).then(|| b.matrix("out_proj".into(), config.vocab_size, d));
        let encoder = (1..=config.n_layers)
            .map(|l| {
                let p = format!("enc.{l}");
                EncoderLayerIndex {
                    self_attn: b.attention(
                        &format!("{p}.self"),
                        d,
                        shortcut_shape(config, Side::Encoder, Site::SelfAttention),
                    ),
                    norm1: b.norm(&format!("{p}.ln1"), d),
                    ffn: b.ffn(&format!("{p}.ffn"), d, d_ff),
                    norm2: b.norm(&format!("{p}.ln2"), d),
                }
            })
            .collect();
        let decoder = (1..=config.n_layers)
            .map(|l| {
                let p = format!("dec.{l}");
                DecoderLayerIndex {
                    self_attn: b.attention(
                        &format!("{p}.self"),
                        d,
                        shortcut_shape(config, Side::Decoder, Site::SelfAttention),
                    ),
                    norm1: b.norm(&format!("{p}.ln1"), d),
                    cross_attn: b.attention(
                        &format!("{p}.cross"),
                        d,
                        shortcut_shape(config, Side::Decoder, Site::CrossAttention),
                    ),
                    norm2: b.norm(&format!("{p}.ln2"), d),
                    ffn: b.ffn(&format!("{p}.ffn"), d, d_ff),
                    norm3: b.norm(&format!("{p}.ln3"), d),
                }
            })
            .collect();
        Self {
            specs: b.specs,
            embed,
            out_proj,
            encoder,
            decoder,
        }
    }

    pub fn param_count(&self) -> usize {
        self.specs.iter().map(|s| s.shape.iter().product::<usize>()).sum()
    }

    /// Index of the output projection (the embedding table when tied).
    pub fn output_projection(&self) -> usize {
        self.out_proj.unwrap_or(self.embed)
    }
}

/// Named tensors in layout order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> ParamStore<T> {
    pub fn new(entries: Vec<(String, Tensor<T>)>) -> Result<Self> {
        let mut index = HashMap::with_capacity(entries.len());
        let (mut names, mut tensors) = (Vec::new(), Vec::new());
        for (i, (name, tensor)) in entries.into_iter().enumerate() {
            if index.insert(name.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate parameter {name}")));
            }
            names.push(name);
            tensors.push(tensor);
        }
        Ok(Self { names, tensors, index })
    }

    /// Fresh parameters for `layout`, each drawn from its own named stream.
    pub fn initialize(layout: &Layout, seeds: &SeedStream) -> Self {
        Self::from_specs(&layout.specs, seeds)
    }

    /// Fresh parameters for arbitrary specs; names must be unique.
    pub fn from_specs(specs: &[ParamSpec], seeds: &SeedStream) -> Self {
        let entries = specs
            .iter()
            .map(|spec| {
                let mut rng = seeds.split(&spec.name).rng();
                let n: usize = spec.shape.iter().product();
                let data: Vec<T> = match spec.init {
                    Init::Zeros => vec![T::zero(); n],
                    Init::Ones => vec![T::one(); n],
                    Init::Xavier => {
                        let (fan_in, fan_out) = (spec.shape[0], spec.shape[1]);
                        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                        (0..n).map(|_| T::of(rng.gen_range(-limit..limit))).collect()
                    }
                    Init::Normal { std } => {
                        let normal = Normal::new(0.0, std).expect("positive std");
                        (0..n).map(|_| T::of(normal.sample(&mut rng))).collect()
                    }
                };
                let tensor = Tensor::new(spec.shape.clone(), data).expect("spec shape is non-empty");
                (spec.name.clone(), tensor)
            })
            .collect();
        Self::new(entries).expect("parameter names are unique")
    }

    /// Checks names and shapes against `layout`, in order.
    pub fn check_layout(&self, layout: &Layout) -> Result<()> {
        if self.len() != layout.specs.len() {
            return Err(Error::Data(format!(
                "expected {} parameters, found {}",
                layout.specs.len(),
                self.len()
            )));
        }
        for (i, spec) in layout.specs.iter().enumerate() {
            if self.names[i] != spec.name || self.tensors[i].shape() != spec.shape.as_slice() {
                return Err(Error::Data(format!(
                    "parameter {i} is {} {:?}, expected {} {:?}",
                    self.names[i],
                    self.tensors[i].shape(),
                    spec.name,
                    spec.shape
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.position(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.position(name).map(move |i| &mut self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Order-sensitive digest of every value, for "unchanged" assertions.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for t in &self.tensors {
            for v in t.data() {
                h ^= v.widen().to_bits();
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }
}
