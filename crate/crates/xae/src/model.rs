//! Exclusive-autoencoder parameters and forward passes.
//!
//! The hidden layer is one weight matrix `W` of shape M×N whose columns
//! are grouped into per-segment blocks. The encoder always computes the
//! full hidden vector `z = act_enc(Wᵀx + b_enc)`; the decoder is
//! partially connected and reconstructs through the segments active for
//! the presented source group only: `y = act_dec(Σ_{j active} W^(j) z^(j)
//! + b_dec)`. Encoder and decoder share the same `W` (tied weights).

use std::fs::File;
use std::io::{BufReader, BufWriter, Write as _};
use std::path::Path;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine as _;
use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2};
use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cost::Hyperparams;
use crate::error::{Result, XaeError};
use crate::labels::{LabelSet, PartitionSpec};

/// Activation functions used by encoder and decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActFn {
    Sigmoid,
    Linear,
}

impl ActFn {
    #[inline]
    pub fn apply(self, u: f64) -> f64 {
        match self {
            ActFn::Sigmoid => 1.0 / (1.0 + (-u).exp()),
            ActFn::Linear => u,
        }
    }

    /// Derivative expressed through the *output* value, which both
    /// supported activations admit: σ' = y(1−y), linear' = 1.
    #[inline]
    pub fn deriv_from_output(self, y: f64) -> f64 {
        match self {
            ActFn::Sigmoid => y * (1.0 - y),
            ActFn::Linear => 1.0,
        }
    }
}

/// Hidden activation vector with per-segment views.
#[derive(Debug, Clone, PartialEq)]
pub struct Activation {
    values: Array1<f64>,
}

impl Activation {
    pub(crate) fn new(values: Array1<f64>) -> Self {
        Activation { values }
    }

    /// Full hidden vector; concatenation of the segment views.
    pub fn values(&self) -> &Array1<f64> {
        &self.values
    }

    pub fn into_values(self) -> Array1<f64> {
        self.values
    }

    /// View of segment j under the given partition.
    pub fn segment(&self, spec: &PartitionSpec, j: usize) -> ArrayView1<'_, f64> {
        self.values.slice(s![spec.segment_range(j)])
    }
}

/// XAE parameter store: block weight matrix, biases, activation tags.
#[derive(Debug, Clone)]
pub struct XaeModel {
    spec: PartitionSpec,
    input_dim: usize,
    act_enc: ActFn,
    act_dec: ActFn,
    /// M×N; columns of segment j occupy `spec.segment_range(j)`.
    pub(crate) weights: Array2<f64>,
    pub(crate) b_enc: Array1<f64>,
    pub(crate) b_dec: Array1<f64>,
}

impl XaeModel {
    /// Seeded initialization: W uniform on [−r, r] with r = √(6/(M+N)),
    /// biases zero, sigmoid encoder and linear decoder.
    pub fn init(spec: PartitionSpec, input_dim: usize, seed: u64) -> Result<Self> {
        Self::init_with_activations(spec, input_dim, seed, ActFn::Sigmoid, ActFn::Linear)
    }

    pub fn init_with_activations(
        spec: PartitionSpec,
        input_dim: usize,
        seed: u64,
        act_enc: ActFn,
        act_dec: ActFn,
    ) -> Result<Self> {
        if input_dim == 0 {
            return Err(XaeError::InvalidConfig(
                "model input dimension must be positive".into(),
            ));
        }
        let n = spec.total_width();
        let r = (6.0 / (input_dim + n) as f64).sqrt();
        let dist = Uniform::new_inclusive(-r, r);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Array2::zeros((input_dim, n));
        // Entries are drawn in row-major order so a seed pins the exact
        // parameter values across runs and platforms.
        for w in weights.iter_mut() {
            *w = dist.sample(&mut rng);
        }
        Ok(XaeModel {
            spec,
            input_dim,
            act_enc,
            act_dec,
            weights,
            b_enc: Array1::zeros(n),
            b_dec: Array1::zeros(input_dim),
        })
    }

    /// Assemble a model from explicit parameters (used by tests and by
    /// the model-file loader); shapes must match the spec.
    pub fn from_parts(
        spec: PartitionSpec,
        weights: Array2<f64>,
        b_enc: Array1<f64>,
        b_dec: Array1<f64>,
        act_enc: ActFn,
        act_dec: ActFn,
    ) -> Result<Self> {
        let n = spec.total_width();
        let input_dim = weights.nrows();
        if input_dim == 0 {
            return Err(XaeError::InvalidConfig(
                "model input dimension must be positive".into(),
            ));
        }
        if weights.ncols() != n {
            return Err(XaeError::DimMismatch {
                expected: n,
                got: weights.ncols(),
            });
        }
        if b_enc.len() != n {
            return Err(XaeError::DimMismatch {
                expected: n,
                got: b_enc.len(),
            });
        }
        if b_dec.len() != input_dim {
            return Err(XaeError::DimMismatch {
                expected: input_dim,
                got: b_dec.len(),
            });
        }
        if weights.iter().any(|w| !w.is_finite())
            || b_enc.iter().any(|b| !b.is_finite())
            || b_dec.iter().any(|b| !b.is_finite())
        {
            return Err(XaeError::Numeric("non-finite model parameter".into()));
        }
        Ok(XaeModel {
            spec,
            input_dim,
            act_enc,
            act_dec,
            weights,
            b_enc,
            b_dec,
        })
    }

    pub fn spec(&self) -> &PartitionSpec {
        &self.spec
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hidden_dim(&self) -> usize {
        self.spec.total_width()
    }

    pub fn act_enc(&self) -> ActFn {
        self.act_enc
    }

    pub fn act_dec(&self) -> ActFn {
        self.act_dec
    }

    pub fn weights(&self) -> ArrayView2<'_, f64> {
        self.weights.view()
    }

    pub fn b_enc(&self) -> ArrayView1<'_, f64> {
        self.b_enc.view()
    }

    pub fn b_dec(&self) -> ArrayView1<'_, f64> {
        self.b_dec.view()
    }

    /// Weight block W^(T_j): the columns of segment j.
    pub fn block(&self, j: usize) -> ArrayView2<'_, f64> {
        self.weights.slice(s![.., self.spec.segment_range(j)])
    }

    /// Encoder: z = act_enc(Wᵀx + b_enc).
    pub fn encode(&self, x: ArrayView1<'_, f64>) -> Result<Activation> {
        if x.len() != self.input_dim {
            return Err(XaeError::DimMismatch {
                expected: self.input_dim,
                got: x.len(),
            });
        }
        let mut u = self.weights.t().dot(&x);
        u += &self.b_enc;
        Ok(Activation::new(u.mapv(|v| self.act_enc.apply(v))))
    }

    /// Encoder over a batch of row vectors: returns K×N activations.
    /// Row k is bit-identical to `encode` of row k (same kernel), so
    /// batched and one-at-a-time flows agree exactly.
    pub fn encode_batch(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.input_dim {
            return Err(XaeError::DimMismatch {
                expected: self.input_dim,
                got: x.ncols(),
            });
        }
        let mut z = Array2::zeros((x.nrows(), self.spec.total_width()));
        for (k, row) in x.rows().into_iter().enumerate() {
            let act = self.encode(row)?;
            z.row_mut(k).assign(&act.values());
        }
        Ok(z)
    }

    /// 0/1 column mask selecting the units of the given segments.
    pub(crate) fn segment_mask(&self, active: &[usize]) -> Array1<f64> {
        let mut mask = Array1::zeros(self.spec.total_width());
        for &j in active {
            mask.slice_mut(s![self.spec.segment_range(j)]).fill(1.0);
        }
        mask
    }

    /// Decoder through an explicit unit mask (all computation the
    /// partially connected decoder ever does).
    pub(crate) fn decode_masked(&self, z: ArrayView1<'_, f64>, mask: &Array1<f64>) -> Array1<f64> {
        let masked = &z.to_owned() * mask;
        let mut c = self.weights.dot(&masked);
        c += &self.b_dec;
        c.mapv(|v| self.act_dec.apply(v))
    }

    /// Partially connected decoder for source group `s`: inactive
    /// segments contribute nothing regardless of their z values.
    pub fn decode(&self, z: &Activation, s: &LabelSet) -> Result<Array1<f64>> {
        if z.values().len() != self.spec.total_width() {
            return Err(XaeError::DimMismatch {
                expected: self.spec.total_width(),
                got: z.values().len(),
            });
        }
        let active = self.spec.active_segments(s)?;
        Ok(self.decode_masked(z.values().view(), &self.segment_mask(&active)))
    }

    /// Encode then decode for source group `s`.
    pub fn reconstruct(&self, x: ArrayView1<'_, f64>, s: &LabelSet) -> Result<Array1<f64>> {
        let z = self.encode(x)?;
        self.decode(&z, s)
    }

    /// Write the model file: a versioned JSON document holding the
    /// partition, activation tags, per-segment weight blocks as base64
    /// little-endian f32 (column-major within each block), biases, and
    /// the hyperparameters the model was trained with.
    pub fn save(&self, hp: &Hyperparams, path: &Path) -> Result<()> {
        let mut blocks = Vec::with_capacity(self.spec.segments().len());
        for j in 0..self.spec.segments().len() {
            let block = self.block(j);
            let mut bytes = Vec::with_capacity(block.len() * 4);
            for col in block.columns() {
                for &v in col.iter() {
                    bytes.extend_from_slice(&(v as f32).to_le_bytes());
                }
            }
            blocks.push(BASE64.encode(&bytes));
        }
        let doc = ModelFile {
            format_version: 1,
            input_dim: self.input_dim,
            act_enc: self.act_enc,
            act_dec: self.act_dec,
            spec: self.spec.clone(),
            blocks,
            b_enc: BASE64.encode(f32_bytes(&self.b_enc)),
            b_dec: BASE64.encode(f32_bytes(&self.b_dec)),
            hyperparams: hp.clone(),
        };
        let file = File::create(path).map_err(|e| XaeError::io(path, e))?;
        let mut w = BufWriter::new(file);
        serde_json::to_writer_pretty(&mut w, &doc)
            .map_err(|e| XaeError::io(path, e.into()))?;
        w.write_all(b"\n").map_err(|e| XaeError::io(path, e))?;
        w.flush().map_err(|e| XaeError::io(path, e))?;
        Ok(())
    }

    /// Load a model file written by [`XaeModel::save`]; parameters are
    /// reproduced exactly at 32-bit precision.
    pub fn load(path: &Path) -> Result<(XaeModel, Hyperparams)> {
        let file = File::open(path).map_err(|e| XaeError::io(path, e))?;
        let doc: ModelFile = serde_json::from_reader(BufReader::new(file)).map_err(|e| {
            XaeError::MalformedFile {
                path: path.into(),
                reason: format!("model file parse error: {e}"),
            }
        })?;
        if doc.format_version != 1 {
            return Err(XaeError::MalformedFile {
                path: path.into(),
                reason: format!("unsupported model format version {}", doc.format_version),
            });
        }
        let malformed = |reason: String| XaeError::MalformedFile {
            path: path.into(),
            reason,
        };
        let n = doc.spec.total_width();
        if doc.blocks.len() != doc.spec.segments().len() {
            return Err(malformed(format!(
                "expected {} weight blocks, found {}",
                doc.spec.segments().len(),
                doc.blocks.len()
            )));
        }
        let mut weights = Array2::zeros((doc.input_dim, n));
        for (j, enc) in doc.blocks.iter().enumerate() {
            let floats = decode_f32s(enc).map_err(&malformed)?;
            let width = doc.spec.segments()[j].width;
            if floats.len() != doc.input_dim * width {
                return Err(malformed(format!(
                    "weight block {j}: expected {} values, found {}",
                    doc.input_dim * width,
                    floats.len()
                )));
            }
            let offset = doc.spec.segment_offset(j);
            for (c, col) in floats.chunks_exact(doc.input_dim).enumerate() {
                for (r, &v) in col.iter().enumerate() {
                    weights[[r, offset + c]] = v as f64;
                }
            }
        }
        let b_enc = decode_f32s(&doc.b_enc).map_err(&malformed)?;
        let b_dec = decode_f32s(&doc.b_dec).map_err(&malformed)?;
        if b_enc.len() != n || b_dec.len() != doc.input_dim {
            return Err(malformed("bias length does not match geometry".into()));
        }
        let model = XaeModel::from_parts(
            doc.spec,
            weights,
            Array1::from_iter(b_enc.into_iter().map(f64::from)),
            Array1::from_iter(b_dec.into_iter().map(f64::from)),
            doc.act_enc,
            doc.act_dec,
        )?;
        Ok((model, doc.hyperparams))
    }
}

/// On-disk JSON layout of a model file.
#[derive(Serialize, Deserialize)]
struct ModelFile {
    format_version: u32,
    input_dim: usize,
    act_enc: ActFn,
    act_dec: ActFn,
    spec: PartitionSpec,
    blocks: Vec<String>,
    b_enc: String,
    b_dec: String,
    hyperparams: Hyperparams,
}

fn f32_bytes(v: &Array1<f64>) -> Vec<u8> {
    let mut bytes = Vec::with_capacity(v.len() * 4);
    for &x in v.iter() {
        bytes.extend_from_slice(&(x as f32).to_le_bytes());
    }
    bytes
}

fn decode_f32s(encoded: &str) -> std::result::Result<Vec<f32>, String> {
    let bytes = BASE64
        .decode(encoded)
        .map_err(|e| format!("bad base64 parameter block: {e}"))?;
    if bytes.len() % 4 != 0 {
        return Err("parameter block length is not a multiple of 4".into());
    }
    let floats: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    if floats.iter().any(|v| !v.is_finite()) {
        return Err("non-finite value in parameter block".into());
    }
    Ok(floats)
}
