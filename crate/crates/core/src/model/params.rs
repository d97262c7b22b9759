//! Flat parameter storage with a named layout.
//!
//! Every tensor lives in one contiguous `Vec<f64>`; the layout records each
//! tensor's name, shape and offset. Gradients and optimizer moments share the
//! same layout, so element-wise updates are plain slice loops.

use std::sync::Arc;

use ndarray::{ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::ModelConfig;
use crate::error::{bail, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Normal(f64),
    /// Sine/cosine position table (rows = positions) with the given amplitude.
    Sinusoid(f64),
    Ones,
    Zeros,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub init: Init,
}

impl ParamEntry {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.numel()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Id(usize);

#[derive(Debug, Clone, Copy)]
pub struct NormIds {
    pub gain: Id,
    pub bias: Id,
}

#[derive(Debug, Clone, Copy)]
pub struct AttnIds {
    pub wq: Id,
    pub wk: Id,
    pub wv: Id,
    pub wo: Id,
}

#[derive(Debug, Clone, Copy)]
pub struct FfnIds {
    pub w1: Id,
    pub b1: Id,
    pub w2: Id,
    pub b2: Id,
}

#[derive(Debug, Clone, Copy)]
pub struct EncoderLayerIds {
    pub ln_attn: NormIds,
    pub attn: AttnIds,
    pub ln_ffn: NormIds,
    pub ffn: FfnIds,
}

#[derive(Debug, Clone, Copy)]
pub struct DecoderLayerIds {
    pub ln_self: NormIds,
    pub self_attn: AttnIds,
    pub ln_cross: NormIds,
    pub cross_attn: AttnIds,
    pub ln_ffn: NormIds,
    pub ffn: FfnIds,
}

/// Names, shapes and offsets of all tensors for one [`ModelConfig`].
#[derive(Debug, Clone)]
pub struct Layout {
    pub entries: Vec<ParamEntry>,
    pub total: usize,
    /// Shared token embedding, also the output projection.
    pub embed: Id,
    pub enc_pos: Id,
    pub dec_pos: Id,
    pub encoder: Vec<EncoderLayerIds>,
    pub enc_norm: NormIds,
    pub decoder: Vec<DecoderLayerIds>,
    pub dec_norm: NormIds,
}

struct Builder {
    entries: Vec<ParamEntry>,
    total: usize,
}

impl Builder {
    fn add(&mut self, name: String, shape: Vec<usize>, init: Init) -> Id {
        let e = ParamEntry {
            name,
            shape,
            offset: self.total,
            init,
        };
        self.total += e.numel();
        self.entries.push(e);
        Id(self.entries.len() - 1)
    }

    fn norm(&mut self, prefix: &str, d: usize) -> NormIds {
        NormIds {
            gain: self.add(format!("{prefix}.gain"), vec![d], Init::Ones),
            bias: self.add(format!("{prefix}.bias"), vec![d], Init::Zeros),
        }
    }

    fn attn(&mut self, prefix: &str, d: usize) -> AttnIds {
        let std = 1.0 / (d as f64).sqrt();
        AttnIds {
            wq: self.add(format!("{prefix}.wq"), vec![d, d], Init::Normal(std)),
            wk: self.add(format!("{prefix}.wk"), vec![d, d], Init::Normal(std)),
            wv: self.add(format!("{prefix}.wv"), vec![d, d], Init::Normal(std)),
            wo: self.add(format!("{prefix}.wo"), vec![d, d], Init::Normal(std)),
        }
    }

    fn ffn(&mut self, prefix: &str, d: usize, dff: usize) -> FfnIds {
        FfnIds {
            w1: self.add(format!("{prefix}.w1"), vec![d, dff], Init::Normal(1.0 / (d as f64).sqrt())),
            b1: self.add(format!("{prefix}.b1"), vec![dff], Init::Zeros),
            w2: self.add(format!("{prefix}.w2"), vec![dff, d], Init::Normal(1.0 / (dff as f64).sqrt())),
            b2: self.add(format!("{prefix}.b2"), vec![d], Init::Zeros),
        }
    }
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let emb_std = 1.0 / (d as f64).sqrt();
        let pos_amp = emb_std * std::f64::consts::SQRT_2;
        let mut b = Builder {
            entries: Vec::new(),
            total: 0,
        };
        let embed = b.add("embed".into(), vec![cfg.vocab_size, d], Init::Normal(emb_std));
        let enc_pos = b.add("enc_pos".into(), vec![cfg.max_len, d], Init::Sinusoid(pos_amp));
        let dec_pos = b.add("dec_pos".into(), vec![cfg.max_len, d], Init::Sinusoid(pos_amp));
        let encoder = (0..cfg.n_layers_enc)
            .map(|l| EncoderLayerIds {
                ln_attn: b.norm(&format!("encoder.{l}.ln_attn"), d),
                attn: b.attn(&format!("encoder.{l}.attn"), d),
                ln_ffn: b.norm(&format!("encoder.{l}.ln_ffn"), d),
                ffn: b.ffn(&format!("encoder.{l}.ffn"), d, cfg.d_ff),
            })
            .collect();
        let enc_norm = b.norm("encoder.final_norm", d);
        let decoder = (0..cfg.n_layers_dec)
            .map(|l| DecoderLayerIds {
                ln_self: b.norm(&format!("decoder.{l}.ln_self"), d),
                self_attn: b.attn(&format!("decoder.{l}.self_attn"), d),
                ln_cross: b.norm(&format!("decoder.{l}.ln_cross"), d),
                cross_attn: b.attn(&format!("decoder.{l}.cross_attn"), d),
                ln_ffn: b.norm(&format!("decoder.{l}.ln_ffn"), d),
                ffn: b.ffn(&format!("decoder.{l}.ffn"), d, cfg.d_ff),
            })
            .collect();
        let dec_norm = b.norm("decoder.final_norm", d);
        Layout {
            entries: b.entries,
            total: b.total,
            embed,
            enc_pos,
            dec_pos,
            encoder,
            enc_norm,
            decoder,
            dec_norm,
        }
    }

    pub fn entry(&self, id: Id) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn find(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.iter().find(|e| e.name == name)
    }
}

/// All model weights (or gradients, or optimizer moments) for one config.
#[derive(Debug, Clone)]
pub struct ParameterSet {
    cfg: ModelConfig,
    layout: Arc<Layout>,
    data: Vec<f64>,
}

impl PartialEq for ParameterSet {
    fn eq(&self, other: &Self) -> bool {
        self.cfg == other.cfg && self.data == other.data
    }
}

fn fill_sinusoid(table: &mut [f64], d: usize, amp: f64) {
    for (pos, row) in table.chunks_mut(d).enumerate() {
        for (k, x) in row.iter_mut().enumerate() {
            let freq = 10_000f64.powf(-((k / 2 * 2) as f64) / d as f64);
            let a = pos as f64 * freq;
            *x = amp * if k % 2 == 0 { a.sin() } else { a.cos() };
        }
    }
}

impl ParameterSet {
    pub fn zeros(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let layout = Arc::new(Layout::new(cfg));
        let data = vec![0.0; layout.total];
        Ok(Self {
            cfg: cfg.clone(),
            layout,
            data,
        })
    }

    /// Deterministic initialization: scaled normals for embeddings and
    /// projections, ones/zeros for norm gains/biases and FFN biases.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(cfg)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layout = Arc::clone(&p.layout);
        for e in &layout.entries {
            let slice = &mut p.data[e.range()];
            match e.init {
                Init::Ones => slice.fill(1.0),
                Init::Zeros => slice.fill(0.0),
                Init::Sinusoid(amp) => fill_sinusoid(slice, e.shape[1], amp),
                Init::Normal(std) => {
                    let dist = Normal::new(0.0, std).expect("positive std");
                    for x in slice {
                        *x = dist.sample(&mut rng);
                    }
                }
            }
        }
        Ok(p)
    }

    pub fn from_data(cfg: &ModelConfig, data: Vec<f64>) -> Result<Self> {
        let mut p = Self::zeros(cfg)?;
        if data.len() != p.data.len() {
            bail!(
                Format,
                "parameter data has {} values, config needs {}",
                data.len(),
                p.data.len()
            );
        }
        p.data = data;
        Ok(p)
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            cfg: self.cfg.clone(),
            layout: Arc::clone(&self.layout),
            data: vec![0.0; self.data.len()],
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        self.layout.find(name).map(|e| &self.data[e.range()])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let r = self.layout.find(name)?.range();
        Some(&mut self.data[r])
    }

    pub fn mat(&self, id: Id) -> ArrayView2<'_, f64> {
        let e = self.layout.entry(id);
        ArrayView2::from_shape((e.shape[0], e.shape[1]), &self.data[e.range()]).expect("layout shape")
    }

    pub fn mat_mut(&mut self, id: Id) -> ArrayViewMut2<'_, f64> {
        let e = self.layout.entry(id);
        let shape = (e.shape[0], e.shape[1]);
        let r = e.range();
        ArrayViewMut2::from_shape(shape, &mut self.data[r]).expect("layout shape")
    }

    pub fn vec(&self, id: Id) -> ArrayView1<'_, f64> {
        let e = self.layout.entry(id);
        ArrayView1::from(&self.data[e.range()])
    }

    pub fn vec_mut(&mut self, id: Id) -> ArrayViewMut1<'_, f64> {
        let r = self.layout.entry(id).range();
        ArrayViewMut1::from(&mut self.data[r])
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Euclidean norm over every element.
    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        for x in &mut self.data {
            *x *= s;
        }
    }

    /// `self += other`, element-wise in index order.
    pub fn add_assign(&mut self, other: &ParameterSet) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}
