//! LLaMA-style decoder: configuration, canonical tensor naming, the `OWLC`
//! checkpoint container and the reference forward pass.

use std::borrow::Cow;
use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{OwlError, Result};
use crate::numkernel::{dot, matmul, matmul_transposed, Matrix, SeededRng};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"OWLC";
pub const CHECKPOINT_VERSION: u32 = 1;
const PAYLOAD_ALIGN: usize = 64;

/// Suffixes of the two factors that replace a projection after SVD
/// compression.
pub const SVD_P_SUFFIX: &str = ".svd_p";
pub const SVD_Q_SUFFIX: &str = ".svd_q";

fn default_rope_theta() -> f64 {
    10000.0
}

fn default_rms_eps() -> f64 {
    1e-5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    #[serde(default = "default_rope_theta")]
    pub rope_theta: f64,
    #[serde(default = "default_rms_eps")]
    pub rms_eps: f64,
    #[serde(default)]
    pub tied_embeddings: bool,
}

impl ModelConfig {
    pub fn new(d_model: usize, n_layers: usize, n_heads: usize, d_ff: usize, vocab_size: usize) -> Self {
        Self {
            d_model,
            n_layers,
            n_heads,
            d_ff,
            vocab_size,
            rope_theta: default_rope_theta(),
            rms_eps: default_rms_eps(),
            tied_embeddings: false,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(OwlError::InvalidCheckpoint(format!("{name} must be >= 1")));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(OwlError::InvalidCheckpoint(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        // rotary embeddings rotate (i, i + head_dim/2) pairs
        if !self.head_dim().is_multiple_of(2) {
            return Err(OwlError::InvalidCheckpoint(format!(
                "head_dim {} must be even",
                self.head_dim()
            )));
        }
        if !(self.rope_theta.is_finite() && self.rope_theta > 0.0) {
            return Err(OwlError::InvalidCheckpoint("rope_theta must be positive".into()));
        }
        if !(self.rms_eps.is_finite() && self.rms_eps >= 0.0) {
            return Err(OwlError::InvalidCheckpoint("rms_eps must be non-negative".into()));
        }
        Ok(())
    }
}

/// The seven prunable projections of a block, in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Projection {
    QProj,
    KProj,
    VProj,
    OProj,
    GateProj,
    UpProj,
    DownProj,
}

impl Projection {
    pub const ALL: [Projection; 7] = [
        Projection::QProj,
        Projection::KProj,
        Projection::VProj,
        Projection::OProj,
        Projection::GateProj,
        Projection::UpProj,
        Projection::DownProj,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Projection::QProj => "q_proj",
            Projection::KProj => "k_proj",
            Projection::VProj => "v_proj",
            Projection::OProj => "o_proj",
            Projection::GateProj => "gate_proj",
            Projection::UpProj => "up_proj",
            Projection::DownProj => "down_proj",
        }
    }

    fn module(self) -> &'static str {
        match self {
            Projection::QProj | Projection::KProj | Projection::VProj | Projection::OProj => "attn",
            _ => "mlp",
        }
    }

    /// `(C_out, C_in)` for this projection under `cfg`.
    pub fn shape(self, cfg: &ModelConfig) -> (usize, usize) {
        match self {
            Projection::QProj | Projection::KProj | Projection::VProj | Projection::OProj => {
                (cfg.d_model, cfg.d_model)
            }
            Projection::GateProj | Projection::UpProj => (cfg.d_ff, cfg.d_model),
            Projection::DownProj => (cfg.d_model, cfg.d_ff),
        }
    }
}

/// A prunable linear layer: block index plus projection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LayerId {
    pub block: usize,
    pub proj: Projection,
}

impl LayerId {
    pub fn new(block: usize, proj: Projection) -> Self {
        Self { block, proj }
    }

    /// Canonical tensor name, e.g. `blocks.3.mlp.down_proj`.
    pub fn tensor_name(&self) -> String {
        format!("blocks.{}.{}.{}", self.block, self.proj.module(), self.proj.name())
    }

    pub fn block_name(&self) -> String {
        block_unit_name(self.block)
    }
}

pub fn block_unit_name(block: usize) -> String {
    format!("blocks.{block}")
}

impl fmt::Display for LayerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.tensor_name())
    }
}

impl FromStr for LayerId {
    type Err = OwlError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || OwlError::Format(format!("not a layer name: {s}"));
        let mut parts = s.split('.');
        if parts.next() != Some("blocks") {
            return Err(bad());
        }
        let block: usize = parts.next().and_then(|b| b.parse().ok()).ok_or_else(bad)?;
        let module = parts.next().ok_or_else(bad)?;
        let name = parts.next().ok_or_else(bad)?;
        if parts.next().is_some() {
            return Err(bad());
        }
        let proj = Projection::ALL
            .into_iter()
            .find(|p| p.name() == name && p.module() == module)
            .ok_or_else(bad)?;
        Ok(LayerId { block, proj })
    }
}

impl Serialize for LayerId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.tensor_name())
    }
}

impl<'de> Deserialize<'de> for LayerId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// How a projection is currently stored.
#[derive(Debug, Clone, Copy)]
pub enum Linear<'a> {
    Dense(&'a Matrix),
    /// `W ≈ p · q`
    Factorized { p: &'a Matrix, q: &'a Matrix },
}

impl Linear<'_> {
    /// `x · Wᵀ`
    pub fn apply(&self, x: &Matrix) -> Result<Matrix> {
        match self {
            Linear::Dense(w) => matmul_transposed(x, w),
            Linear::Factorized { p, q } => {
                let inner = matmul_transposed(x, q)?;
                matmul_transposed(&inner, p)
            }
        }
    }

    pub fn to_dense(&self) -> Result<Cow<'_, Matrix>> {
        match self {
            Linear::Dense(w) => Ok(Cow::Borrowed(*w)),
            Linear::Factorized { p, q } => Ok(Cow::Owned(matmul(p, q)?)),
        }
    }
}

/// Weights-only checkpoint: config plus named tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    tensors: BTreeMap<String, Matrix>,
}

impl Checkpoint {
    /// Builds and validates a checkpoint.
    pub fn new(config: ModelConfig, tensors: BTreeMap<String, Matrix>) -> Result<Self> {
        let ckpt = Self { config, tensors };
        ckpt.validate()?;
        Ok(ckpt)
    }

    /// Random model with `N(0, std²)` projections, unit norms and
    /// `N(0, 1)` embeddings.
    pub fn random(config: ModelConfig, std: f32, rng: &mut SeededRng) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let mut tensors = BTreeMap::new();
        tensors.insert(
            "embed".to_string(),
            Matrix::random_normal(config.vocab_size, d, 1.0, rng),
        );
        for b in 0..config.n_layers {
            for proj in Projection::ALL {
                let (r, c) = proj.shape(&config);
                tensors.insert(
                    LayerId::new(b, proj).tensor_name(),
                    Matrix::random_normal(r, c, std, rng),
                );
            }
            tensors.insert(format!("blocks.{b}.attn_norm"), Matrix::from_fn(1, d, |_, _| 1.0));
            tensors.insert(format!("blocks.{b}.mlp_norm"), Matrix::from_fn(1, d, |_, _| 1.0));
        }
        tensors.insert("final_norm".to_string(), Matrix::from_fn(1, d, |_, _| 1.0));
        if !config.tied_embeddings {
            tensors.insert(
                "lm_head".to_string(),
                Matrix::random_normal(config.vocab_size, d, std, rng),
            );
        }
        Self::new(config, tensors)
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = &self.config;
        cfg.validate()?;
        let d = cfg.d_model;
        let expect = |name: &str, shape: (usize, usize)| -> Result<()> {
            let t = self
                .tensors
                .get(name)
                .ok_or_else(|| OwlError::InvalidCheckpoint(format!("missing tensor {name}")))?;
            if t.shape() != shape {
                return Err(OwlError::InvalidCheckpoint(format!(
                    "{name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            Ok(())
        };
        let mut known: Vec<String> = Vec::new();
        expect("embed", (cfg.vocab_size, d))?;
        expect("final_norm", (1, d))?;
        known.extend(["embed".to_string(), "final_norm".to_string()]);
        if cfg.tied_embeddings {
            if self.tensors.contains_key("lm_head") {
                return Err(OwlError::InvalidCheckpoint(
                    "lm_head present although embeddings are tied".into(),
                ));
            }
        } else {
            expect("lm_head", (cfg.vocab_size, d))?;
            known.push("lm_head".to_string());
        }
        for b in 0..cfg.n_layers {
            for norm in ["attn_norm", "mlp_norm"] {
                let name = format!("blocks.{b}.{norm}");
                expect(&name, (1, d))?;
                known.push(name);
            }
            for proj in Projection::ALL {
                let id = LayerId::new(b, proj);
                let name = id.tensor_name();
                let (rows, cols) = proj.shape(cfg);
                let pn = format!("{name}{SVD_P_SUFFIX}");
                let qn = format!("{name}{SVD_Q_SUFFIX}");
                match (
                    self.tensors.get(&name),
                    self.tensors.get(&pn),
                    self.tensors.get(&qn),
                ) {
                    (Some(_), None, None) => {
                        expect(&name, (rows, cols))?;
                        known.push(name);
                    }
                    (None, Some(p), Some(q)) => {
                        let r = p.cols();
                        if p.rows() != rows || q.shape() != (r, cols) || r == 0 || r > rows.min(cols) {
                            return Err(OwlError::InvalidCheckpoint(format!(
                                "factor pair for {name} has shapes {:?} and {:?}",
                                p.shape(),
                                q.shape()
                            )));
                        }
                        known.push(pn);
                        known.push(qn);
                    }
                    _ => {
                        return Err(OwlError::InvalidCheckpoint(format!(
                            "{name} must be stored either dense or as a complete svd factor pair"
                        )))
                    }
                }
            }
        }
        if known.len() != self.tensors.len() {
            known.sort();
            let extra: Vec<&String> = self
                .tensors
                .keys()
                .filter(|k| known.binary_search(k).is_err())
                .collect();
            return Err(OwlError::InvalidCheckpoint(format!("unexpected tensors {extra:?}")));
        }
        if let Some((name, _)) = self.tensors.iter().find(|(_, t)| !t.is_finite()) {
            return Err(OwlError::NonFinite(format!("tensor {name}")));
        }
        Ok(())
    }

    pub fn tensors(&self) -> &BTreeMap<String, Matrix> {
        &self.tensors
    }

    pub fn tensor(&self, name: &str) -> Result<&Matrix> {
        self.tensors
            .get(name)
            .ok_or_else(|| OwlError::InvalidCheckpoint(format!("missing tensor {name}")))
    }

    /// All prunable layers, block-major in projection order.
    pub fn layer_ids(&self) -> Vec<LayerId> {
        (0..self.config.n_layers)
            .flat_map(|b| Projection::ALL.into_iter().map(move |p| LayerId::new(b, p)))
            .collect()
    }

    pub fn layer_shape(&self, id: LayerId) -> (usize, usize) {
        id.proj.shape(&self.config)
    }

    pub fn linear(&self, id: LayerId) -> Result<Linear<'_>> {
        let name = id.tensor_name();
        if let Some(w) = self.tensors.get(&name) {
            return Ok(Linear::Dense(w));
        }
        let p = self.tensor(&format!("{name}{SVD_P_SUFFIX}"))?;
        let q = self.tensor(&format!("{name}{SVD_Q_SUFFIX}"))?;
        Ok(Linear::Factorized { p, q })
    }

    /// Dense weight of a layer, reconstructing factorized layers.
    pub fn weight(&self, id: LayerId) -> Result<Cow<'_, Matrix>> {
        match self.linear(id)? {
            Linear::Dense(w) => Ok(Cow::Borrowed(w)),
            Linear::Factorized { p, q } => Ok(Cow::Owned(matmul(p, q)?)),
        }
    }

    pub fn is_factorized(&self, id: LayerId) -> bool {
        !self.tensors.contains_key(&id.tensor_name())
    }

    /// Replaces a layer with a dense weight of the same shape.
    pub fn set_weight(&mut self, id: LayerId, w: Matrix) -> Result<()> {
        let shape = self.layer_shape(id);
        if w.shape() != shape {
            return Err(OwlError::DimensionMismatch(format!(
                "{id}: weight {:?}, expected {shape:?}",
                w.shape()
            )));
        }
        if !w.is_finite() {
            return Err(OwlError::NonFinite(format!("tensor {id}")));
        }
        let name = id.tensor_name();
        self.tensors.remove(&format!("{name}{SVD_P_SUFFIX}"));
        self.tensors.remove(&format!("{name}{SVD_Q_SUFFIX}"));
        self.tensors.insert(name, w);
        Ok(())
    }

    /// Replaces a layer with factors `p · q`.
    pub fn set_factorized(&mut self, id: LayerId, p: Matrix, q: Matrix) -> Result<()> {
        let (rows, cols) = self.layer_shape(id);
        let r = p.cols();
        if p.rows() != rows || q.shape() != (r, cols) || r == 0 || r > rows.min(cols) {
            return Err(OwlError::DimensionMismatch(format!(
                "{id}: factors {:?} and {:?} for a {rows}x{cols} layer",
                p.shape(),
                q.shape()
            )));
        }
        let name = id.tensor_name();
        self.tensors.remove(&name);
        self.tensors.insert(format!("{name}{SVD_P_SUFFIX}"), p);
        self.tensors.insert(format!("{name}{SVD_Q_SUFFIX}"), q);
        Ok(())
    }

    /// Mutable access to an arbitrary tensor; shape must be preserved.
    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        self.tensors.get_mut(name)
    }

    pub fn lm_head(&self) -> Result<&Matrix> {
        if self.config.tied_embeddings {
            self.tensor("embed")
        } else {
            self.tensor("lm_head")
        }
    }

    pub fn num_prunable_params(&self) -> usize {
        self.layer_ids()
            .iter()
            .map(|&id| {
                let (r, c) = self.layer_shape(id);
                r * c
            })
            .sum()
    }

    /// Serialises to the `OWLC` container. Output is a pure function of the
    /// checkpoint contents.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut entries = BTreeMap::new();
        let mut offset = 0usize;
        for (name, t) in &self.tensors {
            offset = offset.next_multiple_of(PAYLOAD_ALIGN);
            let nbytes = t.len() * 4;
            entries.insert(
                name.clone(),
                TensorEntry {
                    dtype: "f32".to_string(),
                    shape: [t.rows(), t.cols()],
                    offset: offset as u64,
                    nbytes: nbytes as u64,
                },
            );
            offset += nbytes;
        }
        let header = ContainerHeader {
            config: self.config.clone(),
            tensors: entries,
        };
        let mut json = serde_json::to_vec(&header)?;
        // Pad with JSON whitespace so the payload starts on an aligned offset.
        let pad = (16 + json.len()).next_multiple_of(PAYLOAD_ALIGN) - (16 + json.len());
        json.extend(std::iter::repeat_n(b' ', pad));

        let mut out = Vec::with_capacity(16 + json.len() + offset);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        let payload_start = out.len();
        for (name, t) in &self.tensors {
            let at = payload_start + header.tensors[name].offset as usize;
            out.resize(at, 0);
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 {
            return Err(OwlError::Truncated("container shorter than its preamble".into()));
        }
        if &bytes[0..4] != CHECKPOINT_MAGIC {
            return Err(OwlError::Format("bad checkpoint magic".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(OwlError::Format(format!("unsupported checkpoint version {version}")));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let header_end = 16usize
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| OwlError::Truncated("header runs past end of file".into()))?;
        let header: ContainerHeader = serde_json::from_slice(&bytes[16..header_end])
            .map_err(|e| OwlError::Format(format!("bad header json: {e}")))?;
        let payload = &bytes[header_end..];
        let mut tensors = BTreeMap::new();
        for (name, entry) in header.tensors {
            if entry.dtype != "f32" {
                return Err(OwlError::Format(format!("{name}: unsupported dtype {}", entry.dtype)));
            }
            let [rows, cols] = entry.shape;
            if entry.nbytes != (rows * cols * 4) as u64 {
                return Err(OwlError::Format(format!(
                    "{name}: shape {rows}x{cols} disagrees with nbytes {}",
                    entry.nbytes
                )));
            }
            if entry.offset % PAYLOAD_ALIGN as u64 != 0 {
                return Err(OwlError::Format(format!("{name}: misaligned offset {}", entry.offset)));
            }
            let start = entry.offset as usize;
            let end = start
                .checked_add(entry.nbytes as usize)
                .filter(|&e| e <= payload.len())
                .ok_or_else(|| {
                    OwlError::Truncated(format!(
                        "{name} needs bytes {start}..{} of a {}-byte payload",
                        start + entry.nbytes as usize,
                        payload.len()
                    ))
                })?;
            let data: Vec<f32> = payload[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            tensors.insert(name.clone(), Matrix::new(rows, cols, data).map_err(|e| match e {
                OwlError::NonFinite(_) => OwlError::NonFinite(format!("tensor {name}")),
                other => other,
            })?);
        }
        Self::new(header.config, tensors)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let bytes = self.to_bytes()?;
        std::fs::write(path, bytes)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes)
    }

    /// SHA-256 of the serialised container, hex encoded.
    pub fn content_hash(&self) -> Result<String> {
        Ok(format!("{:x}", Sha256::digest(self.to_bytes()?)))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ContainerHeader {
    config: ModelConfig,
    tensors: BTreeMap<String, TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    dtype: String,
    shape: [usize; 2],
    offset: u64,
    nbytes: u64,
}

/// Source of projection products during a forward pass.
pub trait LinearOp: Sync {
    /// `x · W_idᵀ`
    fn apply(&self, id: LayerId, x: &Matrix) -> Result<Matrix>;
}

impl LinearOp for Checkpoint {
    fn apply(&self, id: LayerId, x: &Matrix) -> Result<Matrix> {
        self.linear(id)?.apply(x)
    }
}

/// Sees the exact input matrix handed to each projection
/// (`seq_len × C_in`).
pub trait ActivationObserver {
    fn observe(&mut self, id: LayerId, input: &Matrix);
}

/// RMSNorm over each row, then elementwise gain.
pub fn rms_norm(x: &Matrix, gain: &[f32], eps: f64) -> Matrix {
    let mut out = x.clone();
    for r in 0..x.rows() {
        let row = out.row_mut(r);
        let ms = row.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>() / row.len() as f64;
        let inv = 1.0 / (ms + eps).sqrt();
        for (v, g) in row.iter_mut().zip(gain) {
            *v = (f64::from(*v) * inv) as f32 * g;
        }
    }
    out
}

/// Rotary embedding in place on a `seq × d_model` matrix, rotating
/// `(i, i + head_dim/2)` pairs inside each head.
pub fn apply_rope(x: &mut Matrix, n_heads: usize, theta: f64) {
    let d = x.cols();
    let hd = d / n_heads;
    let half = hd / 2;
    let inv_freq: Vec<f64> = (0..half)
        .map(|i| theta.powf(-(2.0 * i as f64) / hd as f64))
        .collect();
    for t in 0..x.rows() {
        let row = x.row_mut(t);
        for h in 0..n_heads {
            let base = h * hd;
            for (i, f) in inv_freq.iter().enumerate() {
                let (sin, cos) = (t as f64 * f).sin_cos();
                let a = f64::from(row[base + i]);
                let b = f64::from(row[base + i + half]);
                row[base + i] = (a * cos - b * sin) as f32;
                row[base + i + half] = (a * sin + b * cos) as f32;
            }
        }
    }
}

fn silu(x: f32) -> f32 {
    let x = f64::from(x);
    (x / (1.0 + (-x).exp())) as f32
}

/// Causal multi-head attention over already-projected q, k, v.
fn causal_attention(q: &Matrix, k: &Matrix, v: &Matrix, n_heads: usize) -> Matrix {
    let (seq, d) = q.shape();
    let hd = d / n_heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut out = Matrix::zeros(seq, d);
    let mut weights = vec![0.0f64; seq];
    let mut acc = vec![0.0f64; hd];
    for h in 0..n_heads {
        let cols = h * hd..(h + 1) * hd;
        for t in 0..seq {
            let qt = &q.row(t)[cols.clone()];
            let mut max = f64::NEG_INFINITY;
            for (s, w) in weights.iter_mut().enumerate().take(t + 1) {
                *w = f64::from(dot(qt, &k.row(s)[cols.clone()])) * scale;
                max = max.max(*w);
            }
            let mut z = 0.0;
            for w in weights.iter_mut().take(t + 1) {
                *w = (*w - max).exp();
                z += *w;
            }
            acc.iter_mut().for_each(|a| *a = 0.0);
            for (s, w) in weights.iter().enumerate().take(t + 1) {
                let p = w / z;
                for (a, &vv) in acc.iter_mut().zip(&v.row(s)[cols.clone()]) {
                    *a += p * f64::from(vv);
                }
            }
            for (o, a) in out.row_mut(t)[cols.clone()].iter_mut().zip(&acc) {
                *o = *a as f32;
            }
        }
    }
    out
}

fn add_in_place(x: &mut Matrix, y: &Matrix) {
    for (a, b) in x.data_mut().iter_mut().zip(y.data()) {
        *a += b;
    }
}

/// Logits `seq_len × vocab_size` for a token sequence.
pub fn forward_logits(ckpt: &Checkpoint, tokens: &[u32]) -> Result<Matrix> {
    forward_with(ckpt, ckpt, tokens, None)
}

/// Forward pass with projections supplied by `linears` (the checkpoint
/// itself, or e.g. a sparse re-encoding of it) and an optional observer of
/// every projection input.
pub fn forward_with(
    ckpt: &Checkpoint,
    linears: &dyn LinearOp,
    tokens: &[u32],
    mut observer: Option<&mut dyn ActivationObserver>,
) -> Result<Matrix> {
    let cfg = &ckpt.config;
    if tokens.is_empty() {
        return Err(OwlError::Empty("token sequence".into()));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
        return Err(OwlError::OutOfRange(format!(
            "token id {bad} >= vocab size {}",
            cfg.vocab_size
        )));
    }
    let embed = ckpt.tensor("embed")?;
    let d = cfg.d_model;
    let mut x = Matrix::zeros(tokens.len(), d);
    for (t, &tok) in tokens.iter().enumerate() {
        x.row_mut(t).copy_from_slice(embed.row(tok as usize));
    }
    let linear = |id: LayerId, input: &Matrix, obs: &mut Option<&mut dyn ActivationObserver>| {
        if let Some(o) = obs.as_deref_mut() {
            o.observe(id, input);
        }
        linears.apply(id, input)
    };
    for b in 0..cfg.n_layers {
        let h = rms_norm(&x, ckpt.tensor(&format!("blocks.{b}.attn_norm"))?.data(), cfg.rms_eps);
        let mut q = linear(LayerId::new(b, Projection::QProj), &h, &mut observer)?;
        let mut k = linear(LayerId::new(b, Projection::KProj), &h, &mut observer)?;
        let v = linear(LayerId::new(b, Projection::VProj), &h, &mut observer)?;
        apply_rope(&mut q, cfg.n_heads, cfg.rope_theta);
        apply_rope(&mut k, cfg.n_heads, cfg.rope_theta);
        let attn = causal_attention(&q, &k, &v, cfg.n_heads);
        let o = linear(LayerId::new(b, Projection::OProj), &attn, &mut observer)?;
        add_in_place(&mut x, &o);

        let h = rms_norm(&x, ckpt.tensor(&format!("blocks.{b}.mlp_norm"))?.data(), cfg.rms_eps);
        let gate = linear(LayerId::new(b, Projection::GateProj), &h, &mut observer)?;
        let up = linear(LayerId::new(b, Projection::UpProj), &h, &mut observer)?;
        let mut act = gate;
        for (a, u) in act.data_mut().iter_mut().zip(up.data()) {
            *a = silu(*a) * u;
        }
        let down = linear(LayerId::new(b, Projection::DownProj), &act, &mut observer)?;
        add_in_place(&mut x, &down);
    }
    let h = rms_norm(&x, ckpt.tensor("final_norm")?.data(), cfg.rms_eps);
    matmul_transposed(&h, ckpt.lm_head()?)
}
