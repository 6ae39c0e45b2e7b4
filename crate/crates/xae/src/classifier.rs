//! Classifier heads over frozen encoder features: a small
//! fully-connected network (sigmoid hidden layers, softmax output;
//! zero hidden layers gives plain softmax regression), feature
//! extraction, stratified k-fold cross-validation of the whole
//! feature-learning + classification pipeline, and model file I/O.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write as _};
use std::path::Path;
use std::time::Instant;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::distributions::{Distribution, Uniform};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cost::Hyperparams;
use crate::data::{assemble_groups, PatchDataset};
use crate::error::{Result, XaeError};
use crate::labels::PartitionSpec;
use crate::metrics::{evaluate_scores, EvalReport};
use crate::model::{ActFn, XaeModel};
use crate::trainer::{
    merged_spec_like, train as train_xae, train_ae_emulation, StopReason, TrainConfig,
};

/// Feature rows with class indices into a fixed class-name list.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledFeatures {
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
}

impl LabeledFeatures {
    pub fn validate(&self) -> Result<()> {
        let c = self.class_names.len();
        if c < 2 {
            return Err(XaeError::InvalidData(format!(
                "labeled features need at least 2 classes, got {c}"
            )));
        }
        if self.labels.len() != self.features.nrows() {
            return Err(XaeError::CountMismatch {
                images: self.features.nrows(),
                labels: self.labels.len(),
            });
        }
        if let Some(&l) = self.labels.iter().find(|&&l| l >= c) {
            return Err(XaeError::InvalidData(format!(
                "class index {l} out of range for {c} classes"
            )));
        }
        if self.features.iter().any(|v| !v.is_finite()) {
            return Err(XaeError::Numeric("non-finite feature value".into()));
        }
        Ok(())
    }

    /// Distinct class indices present, ascending.
    pub fn present_classes(&self) -> Vec<usize> {
        let mut present: Vec<usize> = self.labels.clone();
        present.sort_unstable();
        present.dedup();
        present
    }

    /// One row per sample: class_index,class_name,f0,…,f{N−1}.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| XaeError::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io_err = |e| XaeError::io(path, e);
        let header: Vec<String> = (0..self.features.ncols()).map(|i| format!("f{i}")).collect();
        writeln!(w, "class_index,class_name,{}", header.join(",")).map_err(io_err)?;
        for (k, &l) in self.labels.iter().enumerate() {
            let vals: Vec<String> = self.features.row(k).iter().map(|v| v.to_string()).collect();
            writeln!(w, "{l},{},{}", self.class_names[l], vals.join(",")).map_err(io_err)?;
        }
        w.flush().map_err(io_err)?;
        Ok(())
    }
}

/// Run every record through the frozen encoder; the classifier sees
/// the full hidden vector, no segment masking. Class indices follow
/// the dataset's label table in ascending id order, so they are stable
/// across subsets that share a table.
pub fn extract_features(xae: &XaeModel, ds: &PatchDataset) -> Result<LabeledFeatures> {
    if ds.is_empty() {
        return Err(XaeError::InvalidData(
            "no records to extract features from".into(),
        ));
    }
    if ds.dim() != xae.input_dim() {
        return Err(XaeError::DimMismatch {
            expected: xae.input_dim(),
            got: ds.dim(),
        });
    }
    let ids = ds.label_ids();
    let class_names: Vec<String> = ids
        .iter()
        .map(|id| ds.name_of(*id).expect("table key").to_string())
        .collect();
    let all: Vec<usize> = (0..ds.len()).collect();
    let x = ds.to_rows_f64(&all);
    let z = xae.encode_batch(x.view())?;
    let labels = (0..ds.len())
        .map(|k| {
            ids.binary_search(&ds.label_of(k))
                .expect("record labels are in the table")
        })
        .collect();
    Ok(LabeledFeatures {
        features: z,
        labels,
        class_names,
    })
}

/// One dense layer, weights stored input×output.
#[derive(Debug, Clone, PartialEq)]
struct DenseLayer {
    w: Array2<f64>,
    b: Array1<f64>,
}

/// Fully-connected classifier: sigmoid hidden layers, softmax output.
#[derive(Debug, Clone, PartialEq)]
pub struct FcnModel {
    input_dim: usize,
    class_names: Vec<String>,
    layers: Vec<DenseLayer>,
}

fn sigmoid(u: f64) -> f64 {
    1.0 / (1.0 + (-u).exp())
}

fn softmax_rows(mut logits: Array2<f64>) -> Array2<f64> {
    for mut row in logits.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    logits
}

impl FcnModel {
    /// Seeded uniform init on ±√(6/(fan_in+fan_out)) per layer (drawn
    /// row-major, layers in order), zero biases.
    pub fn init(
        input_dim: usize,
        hidden: &[usize],
        class_names: Vec<String>,
        seed: u64,
    ) -> Result<FcnModel> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::init_from_rng(input_dim, hidden, class_names, &mut rng)
    }

    fn init_from_rng(
        input_dim: usize,
        hidden: &[usize],
        class_names: Vec<String>,
        rng: &mut ChaCha8Rng,
    ) -> Result<FcnModel> {
        let mut model = Self::zeros(input_dim, hidden, class_names)?;
        for layer in &mut model.layers {
            let (rows, cols) = layer.w.dim();
            let r = (6.0 / (rows + cols) as f64).sqrt();
            let dist = Uniform::new_inclusive(-r, r);
            for i in 0..rows {
                for j in 0..cols {
                    layer.w[[i, j]] = dist.sample(rng);
                }
            }
        }
        Ok(model)
    }

    /// All-zero parameters (predicts the uniform distribution).
    pub fn zeros(input_dim: usize, hidden: &[usize], class_names: Vec<String>) -> Result<FcnModel> {
        let c = class_names.len();
        if c < 2 {
            return Err(XaeError::InvalidConfig(format!(
                "classifier needs at least 2 classes, got {c}"
            )));
        }
        if input_dim == 0 || hidden.contains(&0) {
            return Err(XaeError::InvalidConfig(
                "classifier layer widths must be positive".into(),
            ));
        }
        let mut widths = vec![input_dim];
        widths.extend_from_slice(hidden);
        widths.push(c);
        let layers = widths
            .windows(2)
            .map(|pair| DenseLayer {
                w: Array2::zeros((pair[0], pair[1])),
                b: Array1::zeros(pair[1]),
            })
            .collect();
        Ok(FcnModel {
            input_dim,
            class_names,
            layers,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn class_count(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    /// Widths of the hidden layers only.
    pub fn hidden_widths(&self) -> Vec<usize> {
        self.layers[..self.layers.len() - 1]
            .iter()
            .map(|l| l.w.ncols())
            .collect()
    }

    /// Per-layer inputs (index l feeds layer l) plus the softmax output.
    fn forward_batch(&self, x: ArrayView2<f64>) -> (Vec<Array2<f64>>, Array2<f64>) {
        let mut acts: Vec<Array2<f64>> = vec![x.to_owned()];
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let u = acts[l].dot(&layer.w) + &layer.b;
            if l < last {
                acts.push(u.mapv(sigmoid));
            } else {
                return (acts, softmax_rows(u));
            }
        }
        unreachable!("at least one layer");
    }

    /// Class probabilities for a feature batch (rows sum to 1).
    pub fn predict_proba_batch(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.input_dim {
            return Err(XaeError::DimMismatch {
                expected: self.input_dim,
                got: x.ncols(),
            });
        }
        Ok(self.forward_batch(x).1)
    }

    /// Class probabilities for one feature vector.
    pub fn predict_proba(&self, x: ArrayView1<f64>) -> Result<Array1<f64>> {
        let row = x.insert_axis(Axis(0));
        let probs = self.predict_proba_batch(row)?;
        Ok(probs.row(0).to_owned())
    }

    /// Write the classifier as a versioned JSON document (f64 values
    /// base64-encoded column-major per layer). Byte-stable.
    pub fn save(&self, path: &Path) -> Result<()> {
        let layers = self
            .layers
            .iter()
            .map(|l| {
                let mut vals = Vec::with_capacity(l.w.len());
                for j in 0..l.w.ncols() {
                    for i in 0..l.w.nrows() {
                        vals.push(l.w[[i, j]]);
                    }
                }
                LayerFile {
                    rows: l.w.nrows(),
                    cols: l.w.ncols(),
                    w: B64.encode(f64_bytes(&vals)),
                    b: B64.encode(f64_bytes(l.b.as_slice().expect("contiguous"))),
                }
            })
            .collect();
        let doc = ClfFile {
            format_version: 1,
            input_dim: self.input_dim,
            class_names: self.class_names.clone(),
            layers,
        };
        let file = File::create(path).map_err(|e| XaeError::io(path, e))?;
        let mut w = BufWriter::new(file);
        serde_json::to_writer_pretty(&mut w, &doc)
            .map_err(|e| XaeError::MalformedFile {
                path: path.into(),
                reason: e.to_string(),
            })?;
        w.write_all(b"\n").map_err(|e| XaeError::io(path, e))?;
        w.flush().map_err(|e| XaeError::io(path, e))?;
        Ok(())
    }

    /// Read a classifier written by [`FcnModel::save`].
    pub fn load(path: &Path) -> Result<FcnModel> {
        let file = File::open(path).map_err(|e| XaeError::io(path, e))?;
        let doc: ClfFile = serde_json::from_reader(BufReader::new(file)).map_err(|e| {
            XaeError::MalformedFile {
                path: path.into(),
                reason: e.to_string(),
            }
        })?;
        let malformed = |reason: String| XaeError::MalformedFile {
            path: path.into(),
            reason,
        };
        if doc.format_version != 1 {
            return Err(malformed(format!(
                "unsupported format version {}",
                doc.format_version
            )));
        }
        if doc.class_names.len() < 2 || doc.layers.is_empty() {
            return Err(malformed("degenerate classifier".into()));
        }
        let mut layers = Vec::with_capacity(doc.layers.len());
        let mut expect_in = doc.input_dim;
        for (l, lf) in doc.layers.iter().enumerate() {
            if lf.rows != expect_in {
                return Err(malformed(format!(
                    "layer {l}: expected {expect_in} input rows, found {}",
                    lf.rows
                )));
            }
            let wv = decode_f64s(&lf.w).map_err(|r| malformed(format!("layer {l}: {r}")))?;
            let bv = decode_f64s(&lf.b).map_err(|r| malformed(format!("layer {l}: {r}")))?;
            if wv.len() != lf.rows * lf.cols || bv.len() != lf.cols {
                return Err(malformed(format!("layer {l}: value count mismatch")));
            }
            if wv.iter().chain(bv.iter()).any(|v| !v.is_finite()) {
                return Err(malformed(format!("layer {l}: non-finite parameter")));
            }
            let mut w = Array2::zeros((lf.rows, lf.cols));
            let mut it = wv.into_iter();
            for j in 0..lf.cols {
                for i in 0..lf.rows {
                    w[[i, j]] = it.next().expect("length checked");
                }
            }
            layers.push(DenseLayer {
                w,
                b: Array1::from_vec(bv),
            });
            expect_in = lf.cols;
        }
        if expect_in != doc.class_names.len() {
            return Err(malformed(format!(
                "output width {expect_in} does not match {} classes",
                doc.class_names.len()
            )));
        }
        Ok(FcnModel {
            input_dim: doc.input_dim,
            class_names: doc.class_names,
            layers,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct LayerFile {
    rows: usize,
    cols: usize,
    w: String,
    b: String,
}

#[derive(Serialize, Deserialize)]
struct ClfFile {
    format_version: u32,
    input_dim: usize,
    class_names: Vec<String>,
    layers: Vec<LayerFile>,
}

fn f64_bytes(vals: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(vals.len() * 8);
    for v in vals {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn decode_f64s(b64: &str) -> std::result::Result<Vec<f64>, String> {
    let bytes = B64.decode(b64).map_err(|e| format!("bad base64: {e}"))?;
    if bytes.len() % 8 != 0 {
        return Err("byte count not a multiple of 8".into());
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]))
        .collect())
}

/// Classifier training trace: per-epoch mean cross-entropy on the full
/// training set.
#[derive(Debug, Clone, PartialEq)]
pub struct ClfTrainReport {
    pub history: Vec<f64>,
    pub epoch_seconds: Vec<f64>,
    pub stop: StopReason,
}

impl ClfTrainReport {
    /// Columns: epoch,cross_entropy. Wall-clock timings stay out of the
    /// file so reruns are byte-identical.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| XaeError::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io_err = |e| XaeError::io(path, e);
        writeln!(w, "epoch,cross_entropy").map_err(io_err)?;
        for (e, ce) in self.history.iter().enumerate() {
            writeln!(w, "{e},{ce}").map_err(io_err)?;
        }
        w.flush().map_err(io_err)?;
        Ok(())
    }
}

/// Mean cross-entropy of the model on (x, labels).
fn mean_cross_entropy(model: &FcnModel, x: ArrayView2<f64>, labels: &[usize]) -> f64 {
    let probs = model.forward_batch(x).1;
    let k = labels.len() as f64;
    labels
        .iter()
        .enumerate()
        .map(|(i, &l)| -(probs[[i, l]].max(f64::MIN_POSITIVE)).ln())
        .sum::<f64>()
        / k
}

/// Continue training `model` on `data` by minibatch gradient descent on
/// mean cross-entropy. Honors epochs/batch/learning-rate/seed and early
/// stopping from `cfg`; group scheduling and snapshots do not apply to
/// the classifier head.
pub fn fit(model: &mut FcnModel, data: &LabeledFeatures, cfg: &TrainConfig) -> Result<ClfTrainReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    fit_from_rng(model, data, cfg, &mut rng)
}

fn fit_from_rng(
    model: &mut FcnModel,
    data: &LabeledFeatures,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<ClfTrainReport> {
    cfg.validate()?;
    data.validate()?;
    if data.class_names != model.class_names {
        return Err(XaeError::InvalidConfig(
            "feature classes do not match the classifier's classes".into(),
        ));
    }
    if data.features.ncols() != model.input_dim {
        return Err(XaeError::DimMismatch {
            expected: model.input_dim,
            got: data.features.ncols(),
        });
    }
    if data.present_classes().len() < 2 {
        return Err(XaeError::InvalidData(
            "classifier training needs at least 2 classes present".into(),
        ));
    }

    let n = data.labels.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = Vec::new();
    let mut epoch_seconds = Vec::new();
    let mut best = f64::INFINITY;
    let mut streak = 0usize;
    let mut stop = StopReason::CompletedEpochs;
    let last = model.layers.len() - 1;

    for epoch in 0..cfg.epochs {
        let t0 = Instant::now();
        order.shuffle(rng);
        let mut start = 0;
        while start < n {
            let end = (start + cfg.batch_size).min(n);
            let batch = &order[start..end];
            let k = batch.len() as f64;
            let x = data.features.select(Axis(0), batch);
            let (acts, probs) = model.forward_batch(x.view());
            // δ at the softmax output of mean cross-entropy.
            let mut delta = probs;
            for (row, &idx) in batch.iter().enumerate() {
                delta[[row, data.labels[idx]]] -= 1.0;
            }
            delta.mapv_inplace(|v| v / k);
            for l in (0..=last).rev() {
                let dw = acts[l].t().dot(&delta);
                let db = delta.sum_axis(Axis(0));
                if l > 0 {
                    // Propagate through the pre-update weights, then
                    // gate by the sigmoid derivative a(1−a).
                    let mut prev = delta.dot(&model.layers[l].w.t());
                    prev.zip_mut_with(&acts[l], |d, a| *d *= a * (1.0 - a));
                    delta = prev;
                }
                let eta = cfg.learning_rate;
                model.layers[l].w.zip_mut_with(&dw, |w, g| *w -= eta * g);
                model.layers[l].b.zip_mut_with(&db, |b, g| *b -= eta * g);
            }
            start = end;
        }
        let ce = mean_cross_entropy(model, data.features.view(), &data.labels);
        if !ce.is_finite() {
            return Err(XaeError::Diverged {
                term: "cross-entropy",
                epoch,
            });
        }
        epoch_seconds.push(t0.elapsed().as_secs_f64());
        history.push(ce);
        if let Some(es) = &cfg.early_stop {
            if best.is_finite() {
                let improve = (best - ce) / best.abs().max(1e-12);
                if improve >= es.min_rel_improvement {
                    best = ce;
                    streak = 0;
                } else {
                    streak += 1;
                    if streak >= es.patience {
                        stop = StopReason::EarlyStopped { epoch };
                        break;
                    }
                }
            } else {
                best = ce;
            }
        }
    }
    Ok(ClfTrainReport {
        history,
        epoch_seconds,
        stop,
    })
}

/// Train a fresh classifier with the given hidden widths.
pub fn train_classifier(
    data: &LabeledFeatures,
    hidden: &[usize],
    cfg: &TrainConfig,
) -> Result<(FcnModel, ClfTrainReport)> {
    data.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = FcnModel::init_from_rng(
        data.features.ncols(),
        hidden,
        data.class_names.clone(),
        &mut rng,
    )?;
    let report = fit_from_rng(&mut model, data, cfg, &mut rng)?;
    Ok((model, report))
}

/// Evaluate a classifier on labeled features; `positive` designates a
/// detection task's positive class for the headline F₁.
pub fn evaluate(
    clf: &FcnModel,
    data: &LabeledFeatures,
    positive: Option<usize>,
) -> Result<EvalReport> {
    data.validate()?;
    if data.class_names != clf.class_names {
        return Err(XaeError::InvalidConfig(
            "feature classes do not match the classifier's classes".into(),
        ));
    }
    let probs = clf.predict_proba_batch(data.features.view())?;
    evaluate_scores(&data.labels, probs.view(), &clf.class_names, positive)
}

/// Deterministic per-purpose seed derivation (splitmix64 finalizer).
pub fn mix_seed(base: u64, stream: u64) -> u64 {
    let mut z = base.wrapping_add(0x9E3779B97F4A7C15u64.wrapping_mul(stream.wrapping_add(1)));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Stratified fold assignment: per class (ascending), a seeded shuffle
/// is dealt round-robin starting at a rolling offset, so per-class
/// proportions carry into every fold and global fold sizes differ by at
/// most one. Every class needs at least 2 records so each training
/// split keeps every class.
pub fn stratified_folds(
    labels: &[usize],
    class_names: &[String],
    k: usize,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    if k < 2 {
        return Err(XaeError::InvalidConfig(format!(
            "k-fold needs k >= 2, got {k}"
        )));
    }
    if labels.len() < k {
        return Err(XaeError::InvalidConfig(format!(
            "k = {k} exceeds the dataset size {}",
            labels.len()
        )));
    }
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); class_names.len()];
    for (i, &l) in labels.iter().enumerate() {
        if l >= class_names.len() {
            return Err(XaeError::InvalidData(format!(
                "class index {l} out of range for {} classes",
                class_names.len()
            )));
        }
        per_class[l].push(i);
    }
    for (c, members) in per_class.iter().enumerate() {
        if !members.is_empty() && members.len() < 2 {
            return Err(XaeError::InvalidData(format!(
                "class {:?} has only {} record(s); stratified folds need at least 2 per class",
                class_names[c],
                members.len()
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut folds: Vec<Vec<usize>> = vec![Vec::new(); k];
    let mut start = 0usize;
    for members in per_class.iter_mut() {
        members.shuffle(&mut rng);
        for (t, &rec) in members.iter().enumerate() {
            folds[(start + t) % k].push(rec);
        }
        start = (start + members.len()) % k;
    }
    for fold in &mut folds {
        fold.sort_unstable();
    }
    Ok(folds)
}

/// Which feature learner the cross-validated pipeline uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureMode {
    /// Label-aware training on the configured partition.
    Exclusive,
    /// Conventional sparse-autoencoder baseline of equal capacity.
    MergedAe,
}

impl FeatureMode {
    pub fn name(self) -> &'static str {
        match self {
            FeatureMode::Exclusive => "xae",
            FeatureMode::MergedAe => "ae",
        }
    }
}

/// Everything needed to run the two-stage pipeline on a training split.
#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub spec: PartitionSpec,
    pub hp: Hyperparams,
    pub xae: TrainConfig,
    pub act_enc: ActFn,
    pub act_dec: ActFn,
    pub hidden: Vec<usize>,
    pub clf: TrainConfig,
}

/// Train features + classifier on `train_ds`, evaluate on `test_ds`.
/// The four seed streams (encoder init, group assembly, encoder
/// shuffles, classifier) derive from `seed`.
pub fn run_pipeline(
    train_ds: &PatchDataset,
    test_ds: &PatchDataset,
    pipe: &PipelineConfig,
    mode: FeatureMode,
    seed: u64,
) -> Result<EvalReport> {
    let spec = match mode {
        FeatureMode::Exclusive => pipe.spec.clone(),
        FeatureMode::MergedAe => merged_spec_like(&pipe.spec)?,
    };
    let model = XaeModel::init_with_activations(
        spec.clone(),
        train_ds.dim(),
        mix_seed(seed, 0),
        pipe.act_enc,
        pipe.act_dec,
    )?;
    let xae_cfg = TrainConfig {
        seed: mix_seed(seed, 2),
        ..pipe.xae.clone()
    };
    let (trained, _) = match mode {
        FeatureMode::Exclusive => {
            let grouped = assemble_groups(train_ds.clone(), &spec, mix_seed(seed, 1))?;
            train_xae(model, &grouped, &pipe.hp, &xae_cfg)?
        }
        FeatureMode::MergedAe => train_ae_emulation(model, train_ds, &pipe.hp, &xae_cfg)?,
    };
    let train_feat = extract_features(&trained, train_ds)?;
    let test_feat = extract_features(&trained, test_ds)?;
    let clf_cfg = TrainConfig {
        seed: mix_seed(seed, 3),
        ..pipe.clf.clone()
    };
    let (clf, _) = train_classifier(&train_feat, &pipe.hidden, &clf_cfg)?;
    evaluate(&clf, &test_feat, None)
}

/// Scalar scores of one cross-validation fold.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldScores {
    pub weighted_f: f64,
    pub accuracy: f64,
    pub macro_auc: Option<f64>,
}

/// Mean/spread of fold scores (std is the sample standard deviation).
#[derive(Debug, Clone, PartialEq)]
pub struct CrossvalReport {
    pub k: usize,
    pub per_fold: Vec<FoldScores>,
    pub mean_weighted_f: f64,
    pub std_weighted_f: f64,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub mean_macro_auc: Option<f64>,
}

fn mean_std(vals: &[f64]) -> (f64, f64) {
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    if vals.len() < 2 {
        return (mean, 0.0);
    }
    let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl CrossvalReport {
    /// Columns: fold,weighted_f,accuracy,macro_auc (macro_auc blank
    /// when undefined), then a summary row labeled `mean` and `std`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| XaeError::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io_err = |e| XaeError::io(path, e);
        writeln!(w, "fold,weighted_f,accuracy,macro_auc").map_err(io_err)?;
        let fmt_auc = |a: Option<f64>| a.map(|v| v.to_string()).unwrap_or_default();
        for (i, f) in self.per_fold.iter().enumerate() {
            writeln!(
                w,
                "{i},{},{},{}",
                f.weighted_f,
                f.accuracy,
                fmt_auc(f.macro_auc)
            )
            .map_err(io_err)?;
        }
        writeln!(
            w,
            "mean,{},{},{}",
            self.mean_weighted_f,
            self.mean_accuracy,
            fmt_auc(self.mean_macro_auc)
        )
        .map_err(io_err)?;
        writeln!(w, "std,{},{},", self.std_weighted_f, self.std_accuracy).map_err(io_err)?;
        w.flush().map_err(io_err)?;
        Ok(())
    }
}

/// Stratified k-fold cross-validation of the full pipeline. Folds are
/// deterministic per seed; per-fold training seeds derive from the same
/// seed, so the whole run is reproducible bit-for-bit.
pub fn kfold_crossval(
    dataset: &PatchDataset,
    pipe: &PipelineConfig,
    k: usize,
    seed: u64,
    mode: FeatureMode,
) -> Result<CrossvalReport> {
    let ids = dataset.label_ids();
    let class_names: Vec<String> = ids
        .iter()
        .map(|id| dataset.name_of(*id).expect("table key").to_string())
        .collect();
    let labels: Vec<usize> = (0..dataset.len())
        .map(|r| ids.binary_search(&dataset.label_of(r)).expect("in table"))
        .collect();
    let folds = stratified_folds(&labels, &class_names, k, mix_seed(seed, 0xF01D))?;
    let mut per_fold = Vec::with_capacity(k);
    for (f, test_idx) in folds.iter().enumerate() {
        let in_test: std::collections::BTreeSet<usize> = test_idx.iter().copied().collect();
        let train_idx: Vec<usize> = (0..dataset.len()).filter(|i| !in_test.contains(i)).collect();
        let train_ds = dataset.subset(&train_idx)?;
        let test_ds = dataset.subset(test_idx)?;
        let report = run_pipeline(&train_ds, &test_ds, pipe, mode, mix_seed(seed, f as u64))?;
        per_fold.push(FoldScores {
            weighted_f: report.weighted_f,
            accuracy: report.accuracy,
            macro_auc: report.macro_auc,
        });
    }
    let (mean_weighted_f, std_weighted_f) =
        mean_std(&per_fold.iter().map(|f| f.weighted_f).collect::<Vec<_>>());
    let (mean_accuracy, std_accuracy) =
        mean_std(&per_fold.iter().map(|f| f.accuracy).collect::<Vec<_>>());
    let aucs: Vec<f64> = per_fold.iter().filter_map(|f| f.macro_auc).collect();
    let mean_macro_auc = (aucs.len() == per_fold.len()).then(|| mean_std(&aucs).0);
    Ok(CrossvalReport {
        k,
        per_fold,
        mean_weighted_f,
        std_weighted_f,
        mean_accuracy,
        std_accuracy,
        mean_macro_auc,
    })
}
