//! Compact decoder-only transformer with frozen base weights and low-rank
//! adapters on every attention and feed-forward projection.
//!
//! Weight matrices are stored `[out x in]`, so a projection computes
//! `x W^T` and an adapter adds `(alpha / r) * (x A^T) B^T`, i.e. the
//! effective weight is `W + (alpha / r) B A` with `B: [out x r]` and
//! `A: [r x in]`.

mod decode;
mod forward;

use std::fs;
use std::path::Path;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::seed;

pub use decode::{
    forward_logits, forward_logits_base, generate, generate_batch, generate_greedy, sequence_logprobs,
    sequence_logprobs_batch, Decode, Generation,
};
pub(crate) use forward::{forward_batch, register};
pub use forward::{DropoutMode, Trainable};

pub const SNAPSHOT_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub lora_dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: crate::tasks::vocab::VOCAB_SIZE,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 128,
            max_seq_len: 64,
            lora_rank: 8,
            lora_alpha: 16.0,
            lora_dropout: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("max_seq_len", self.max_seq_len),
            ("lora_rank", self.lora_rank),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("{name} must be positive")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::config(format!(
                "n_heads {} does not divide d_model {}",
                self.n_heads, self.d_model
            )));
        }
        if self.lora_rank > self.d_model.min(self.d_ff) {
            return Err(Error::config(format!(
                "lora_rank {} exceeds the smallest adapted dimension",
                self.lora_rank
            )));
        }
        if !(self.lora_alpha > 0.0 && self.lora_alpha.is_finite()) {
            return Err(Error::config("lora_alpha must be positive"));
        }
        if !(0.0..1.0).contains(&self.lora_dropout) {
            return Err(Error::config("lora_dropout must lie in [0, 1)"));
        }
        Ok(())
    }

    pub fn lora_scale(&self) -> f64 {
        self.lora_alpha / self.lora_rank as f64
    }

    /// `[out, in]` of an adapted matrix.
    pub fn matrix_shape(&self, kind: MatrixKind) -> [usize; 2] {
        match kind {
            MatrixKind::Query | MatrixKind::Key | MatrixKind::Value | MatrixKind::Output => [self.d_model, self.d_model],
            MatrixKind::FfnUp => [self.d_ff, self.d_model],
            MatrixKind::FfnDown => [self.d_model, self.d_ff],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatrixKind {
    Query,
    Key,
    Value,
    Output,
    FfnUp,
    FfnDown,
}

impl MatrixKind {
    pub const ALL: [MatrixKind; 6] = [
        MatrixKind::Query,
        MatrixKind::Key,
        MatrixKind::Value,
        MatrixKind::Output,
        MatrixKind::FfnUp,
        MatrixKind::FfnDown,
    ];
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct AdapterTarget {
    pub layer: usize,
    pub matrix: MatrixKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerWeights {
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    /// `[d_ff x d_model]`
    pub w_up: Tensor,
    /// `[d_model x d_ff]`
    pub w_down: Tensor,
}

impl LayerWeights {
    pub fn matrix(&self, kind: MatrixKind) -> &Tensor {
        match kind {
            MatrixKind::Query => &self.w_q,
            MatrixKind::Key => &self.w_k,
            MatrixKind::Value => &self.w_v,
            MatrixKind::Output => &self.w_o,
            MatrixKind::FfnUp => &self.w_up,
            MatrixKind::FfnDown => &self.w_down,
        }
    }

    fn tensors(&self) -> [&Tensor; 10] {
        [
            &self.ln1_gain,
            &self.ln1_bias,
            &self.w_q,
            &self.w_k,
            &self.w_v,
            &self.w_o,
            &self.ln2_gain,
            &self.ln2_bias,
            &self.w_up,
            &self.w_down,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 10] {
        [
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.w_q,
            &mut self.w_k,
            &mut self.w_v,
            &mut self.w_o,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
            &mut self.w_up,
            &mut self.w_down,
        ]
    }
}

/// Frozen weights. The output projection is tied to `token_embedding`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaseWeights {
    pub token_embedding: Tensor,
    pub position_embedding: Tensor,
    pub layers: Vec<LayerWeights>,
    pub final_ln_gain: Tensor,
    pub final_ln_bias: Tensor,
}

impl BaseWeights {
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut stream = 0u64;
        let mut gaussian = |shape: &[usize], std: f64| {
            stream += 1;
            let mut rng = seed::rng(seed::derive_path(seed, &[seed::stream::BASE_INIT, stream]));
            let normal = Normal::new(0.0, std).expect("positive std");
            let n = shape.iter().product();
            Tensor::new(shape.to_vec(), (0..n).map(|_| normal.sample(&mut rng)).collect()).expect("sized")
        };
        let d = config.d_model;
        let resid = 1.0 / (2.0 * config.n_layers as f64).sqrt();
        let layers = (0..config.n_layers)
            .map(|_| LayerWeights {
                ln1_gain: Tensor::filled(&[d], 1.0),
                ln1_bias: Tensor::zeros(&[d]),
                w_q: gaussian(&[d, d], 1.0 / (d as f64).sqrt()),
                w_k: gaussian(&[d, d], 1.0 / (d as f64).sqrt()),
                w_v: gaussian(&[d, d], 1.0 / (d as f64).sqrt()),
                w_o: gaussian(&[d, d], resid / (d as f64).sqrt()),
                ln2_gain: Tensor::filled(&[d], 1.0),
                ln2_bias: Tensor::zeros(&[d]),
                w_up: gaussian(&[config.d_ff, d], 1.0 / (d as f64).sqrt()),
                w_down: gaussian(&[d, config.d_ff], resid / (config.d_ff as f64).sqrt()),
            })
            .collect();
        Ok(BaseWeights {
            token_embedding: gaussian(&[config.vocab_size, d], 0.1),
            position_embedding: gaussian(&[config.max_seq_len, d], 0.1),
            layers,
            final_ln_gain: Tensor::filled(&[d], 1.0),
            final_ln_bias: Tensor::zeros(&[d]),
        })
    }

    /// Every tensor in a fixed order.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.token_embedding, &self.position_embedding];
        for l in &self.layers {
            out.extend(l.tensors());
        }
        out.push(&self.final_ln_gain);
        out.push(&self.final_ln_bias);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.token_embedding, &mut self.position_embedding];
        for l in &mut self.layers {
            out.extend(l.tensors_mut());
        }
        out.push(&mut self.final_ln_gain);
        out.push(&mut self.final_ln_bias);
        out
    }

    /// SHA-256 over shapes and raw `f64` bits.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for t in self.tensors() {
            for &s in t.shape() {
                h.update((s as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraAdapter {
    pub target: AdapterTarget,
    /// `[r x in]`
    pub a: Tensor,
    /// `[out x r]`
    pub b: Tensor,
    pub alpha: f64,
    pub rank: usize,
    pub dropout: f64,
}

impl LoraAdapter {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    /// `(alpha / r) B A`.
    pub fn delta(&self) -> Result<Tensor> {
        let mut d = self.b.matmul(&self.a)?;
        let s = self.scale();
        d.data_mut().iter_mut().for_each(|v| *v *= s);
        Ok(d)
    }
}

/// One adapter per `(layer, matrix)`: `A ~ N(0, 1/r)`, `B = 0`.
pub fn init_adapters(config: &ModelConfig, seed: u64) -> Result<Vec<LoraAdapter>> {
    config.validate()?;
    let r = config.lora_rank;
    let normal = Normal::new(0.0, 1.0 / (r as f64).sqrt()).expect("positive std");
    let mut out = Vec::with_capacity(config.n_layers * MatrixKind::ALL.len());
    for layer in 0..config.n_layers {
        for (m, &matrix) in MatrixKind::ALL.iter().enumerate() {
            let [d_out, d_in] = config.matrix_shape(matrix);
            let mut rng = seed::rng(seed::derive_path(
                seed,
                &[seed::stream::ADAPTER_INIT, layer as u64, m as u64],
            ));
            let a = Tensor::new(vec![r, d_in], (0..r * d_in).map(|_| normal.sample(&mut rng)).collect())?;
            out.push(LoraAdapter {
                target: AdapterTarget { layer, matrix },
                a,
                b: Tensor::zeros(&[d_out, r]),
                alpha: config.lora_alpha,
                rank: r,
                dropout: config.lora_dropout,
            });
        }
    }
    Ok(out)
}

/// `base_w + (alpha / r) B A`.
pub fn effective_weight(base_w: &Tensor, adapter: &LoraAdapter) -> Result<Tensor> {
    let delta = adapter.delta()?;
    if delta.shape() != base_w.shape() {
        return Err(Error::Shape {
            op: "effective_weight",
            left: base_w.shape().to_vec(),
            right: delta.shape().to_vec(),
        });
    }
    let data = base_w.data().iter().zip(delta.data()).map(|(w, d)| w + d).collect();
    Tensor::new(base_w.shape().to_vec(), data)
}

/// Frozen base plus the current adapter set.
///
/// `snapshot_id` 0 is the untuned base (all `B` zero); each training call
/// returns a new snapshot with the id incremented.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSnapshot {
    pub config: ModelConfig,
    pub base: BaseWeights,
    pub adapters: Vec<LoraAdapter>,
    pub snapshot_id: u64,
}

#[derive(Serialize, Deserialize)]
struct SnapshotFile {
    format_version: u32,
    #[serde(flatten)]
    snapshot: ModelSnapshot,
}

impl ModelSnapshot {
    /// Fresh base weights and fresh adapters.
    pub fn init(config: ModelConfig, base_seed: u64, adapter_seed: u64) -> Result<Self> {
        let base = BaseWeights::init(&config, base_seed)?;
        let adapters = init_adapters(&config, adapter_seed)?;
        ModelSnapshot::new(config, base, adapters, 0)
    }

    pub fn new(config: ModelConfig, base: BaseWeights, adapters: Vec<LoraAdapter>, snapshot_id: u64) -> Result<Self> {
        let s = ModelSnapshot {
            config,
            base,
            adapters,
            snapshot_id,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.config;
        c.validate()?;
        let d = c.d_model;
        let check = |t: &Tensor, shape: &[usize], what: &str| -> Result<()> {
            if t.shape() != shape {
                return Err(Error::Shape {
                    op: "snapshot",
                    left: shape.to_vec(),
                    right: t.shape().to_vec(),
                })
                .map_err(|e| Error::config(format!("{what}: {e}")));
            }
            t.check_finite(what)
        };
        check(&self.base.token_embedding, &[c.vocab_size, d], "token_embedding")?;
        check(&self.base.position_embedding, &[c.max_seq_len, d], "position_embedding")?;
        if self.base.layers.len() != c.n_layers {
            return Err(Error::config("layer count does not match n_layers"));
        }
        for l in &self.base.layers {
            for g in [&l.ln1_gain, &l.ln1_bias, &l.ln2_gain, &l.ln2_bias] {
                check(g, &[d], "layer norm")?;
            }
            for kind in MatrixKind::ALL {
                check(l.matrix(kind), &c.matrix_shape(kind), "projection")?;
            }
        }
        check(&self.base.final_ln_gain, &[d], "final_ln_gain")?;
        check(&self.base.final_ln_bias, &[d], "final_ln_bias")?;

        if self.adapters.len() != c.n_layers * MatrixKind::ALL.len() {
            return Err(Error::config(format!(
                "expected {} adapters, found {}",
                c.n_layers * MatrixKind::ALL.len(),
                self.adapters.len()
            )));
        }
        for (i, ad) in self.adapters.iter().enumerate() {
            let want = AdapterTarget {
                layer: i / MatrixKind::ALL.len(),
                matrix: MatrixKind::ALL[i % MatrixKind::ALL.len()],
            };
            if ad.target != want {
                return Err(Error::config(format!("adapter {i} targets {:?}, expected {want:?}", ad.target)));
            }
            let [d_out, d_in] = c.matrix_shape(ad.target.matrix);
            check(&ad.a, &[ad.rank, d_in], "adapter A")?;
            check(&ad.b, &[d_out, ad.rank], "adapter B")?;
        }
        Ok(())
    }

    pub fn adapter(&self, target: AdapterTarget) -> &LoraAdapter {
        &self.adapters[target.layer * MatrixKind::ALL.len() + target.matrix as usize]
    }

    /// Same base, adapters replaced by a fresh initialization, id reset to 0.
    pub fn with_fresh_adapters(&self, seed: u64) -> Result<Self> {
        ModelSnapshot::new(self.config.clone(), self.base.clone(), init_adapters(&self.config, seed)?, 0)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&SnapshotFile {
            format_version: SNAPSHOT_FORMAT_VERSION,
            snapshot: self.clone(),
        })?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: SnapshotFile = serde_json::from_str(text)?;
        if file.format_version != SNAPSHOT_FORMAT_VERSION {
            return Err(Error::config(format!(
                "snapshot format version {} is not supported (expected {SNAPSHOT_FORMAT_VERSION})",
                file.format_version
            )));
        }
        file.snapshot.validate()?;
        Ok(file.snapshot)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        ModelSnapshot::from_json(&fs::read_to_string(path)?)
    }
}

/// Hand-built snapshots whose output distribution is fixed regardless of input.
pub mod fixed {
    use super::*;

    /// Every position emits exactly `logits` (length `vocab_size`).
    ///
    /// Works by zeroing the final layer-norm gain so the output depends only
    /// on its bias, which selects column 0 of the tied embedding.
    pub fn constant_logits(config: &ModelConfig, logits: &[f64]) -> Result<ModelSnapshot> {
        if logits.len() != config.vocab_size {
            return Err(Error::Shape {
                op: "constant_logits",
                left: vec![config.vocab_size],
                right: vec![logits.len()],
            });
        }
        let mut snap = ModelSnapshot::init(config.clone(), 0, 0)?;
        let d = config.d_model;
        let emb = snap.base.token_embedding.data_mut();
        emb.fill(0.0);
        for (t, &l) in logits.iter().enumerate() {
            emb[t * d] = l;
        }
        snap.base.final_ln_gain = Tensor::zeros(&[d]);
        let mut bias = vec![0.0; d];
        bias[0] = 1.0;
        snap.base.final_ln_bias = Tensor::new(vec![d], bias)?;
        snap.validate()?;
        Ok(snap)
    }
}
