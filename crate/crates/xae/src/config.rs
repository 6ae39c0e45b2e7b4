//! Experiment configuration: one TOML file drives every CLI verb.
//! Label references use the human-readable names from the dataset's
//! label table and are resolved at load time; unknown keys and unknown
//! names are rejected with the offending identifier in the message.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use sha2::{Digest, Sha256};

use crate::classifier::{mix_seed, PipelineConfig};
use crate::cost::{GVariant, Hyperparams};
use crate::data::{self, PatchDataset};
use crate::error::{Result, XaeError};
use crate::labels::{LabelSet, PartitionSpec, SegmentSpec};
use crate::model::ActFn;
use crate::trainer::{default_hyperparams, EarlyStop, Profile, TrainConfig};

/// On-disk dataset container formats.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataFormat {
    /// Big-endian image/label pair files.
    Idx,
    /// Single packed patch file.
    Xpd,
}

/// `[data]`: where the dataset lives and how to thin it.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub format: DataFormat,
    /// Image file (`format = "idx"` only).
    pub images: Option<PathBuf>,
    /// Label file (`format = "idx"` only).
    pub labels: Option<PathBuf>,
    /// Patch file (`format = "xpd"` only).
    pub path: Option<PathBuf>,
    /// Keep only these labels (by table name); others are dropped.
    pub keep_labels: Option<Vec<String>>,
    /// Cap records per label after filtering.
    pub per_label_cap: Option<usize>,
    /// Seed for the per-label cap draw; defaults to the training seed.
    pub subsample_seed: Option<u64>,
}

/// One `[[partition.segments]]` entry, labels given by table name.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentSection {
    pub labels: Vec<String>,
    pub width: usize,
}

/// `[partition]`: universe, source groups, and hidden-layer segments.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionSection {
    pub universe: Vec<String>,
    pub source_groups: Vec<Vec<String>>,
    pub segments: Vec<SegmentSection>,
}

/// `[hyperparams]`: a named profile plus per-field overrides.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HpSection {
    /// Profile name; defaults to `mnist_toy`.
    pub profile: Option<String>,
    pub lambda: Option<f64>,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub gamma: Option<f64>,
    pub rho: Option<f64>,
    pub a: Option<f64>,
    pub b: Option<f64>,
    pub sigma: Option<f64>,
    pub g_variant: Option<GVariant>,
}

impl HpSection {
    /// Profile defaults with overrides applied, then validated.
    pub fn resolve(&self) -> Result<Hyperparams> {
        let profile: Profile = match &self.profile {
            None => Profile::MnistToy,
            Some(s) => s.parse()?,
        };
        let mut hp = default_hyperparams(profile);
        if let Some(v) = self.lambda {
            hp.lambda = v;
        }
        if let Some(v) = self.alpha {
            hp.alpha = v;
        }
        if let Some(v) = self.beta {
            hp.beta = v;
        }
        if let Some(v) = self.gamma {
            hp.gamma = v;
        }
        if let Some(v) = self.rho {
            hp.rho = v;
        }
        if let Some(v) = self.a {
            hp.a = v;
        }
        if let Some(v) = self.b {
            hp.b = v;
        }
        if let Some(v) = self.sigma {
            hp.sigma = v;
        }
        if let Some(v) = self.g_variant {
            hp.g_variant = v;
        }
        hp.validate()?;
        Ok(hp)
    }
}

/// `[model]`: encoder/decoder activations.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub act_enc: ActFn,
    pub act_dec: ActFn,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            act_enc: ActFn::Sigmoid,
            act_dec: ActFn::Linear,
        }
    }
}

/// `[classifier]`: head layout and its own training knobs.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierSection {
    pub hidden: Vec<usize>,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Defaults to a stream derived from the training seed.
    pub seed: Option<u64>,
    pub early_stop: Option<EarlyStop>,
}

impl Default for ClassifierSection {
    fn default() -> Self {
        ClassifierSection {
            hidden: vec![32],
            learning_rate: 0.5,
            epochs: 200,
            batch_size: 32,
            seed: None,
            early_stop: None,
        }
    }
}

/// `[output]`: where artifacts go. Commands write only inside this dir.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            dir: PathBuf::from("out"),
        }
    }
}

/// The whole experiment file. Unknown keys anywhere are rejected.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataSection,
    pub partition: PartitionSection,
    #[serde(default)]
    pub hyperparams: HpSection,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub classifier: ClassifierSection,
    #[serde(default)]
    pub output: OutputSection,
}

/// A parsed config plus its on-disk identity (directory for relative
/// paths, SHA-256 of the raw bytes for provenance columns).
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub cfg: ExperimentConfig,
    pub base_dir: PathBuf,
    pub sha256_hex: String,
}

/// Lowercase hex SHA-256 digest of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(64);
    for b in digest {
        write!(out, "{b:02x}").expect("string write");
    }
    out
}

impl LoadedConfig {
    /// Parse and validate `path`; data paths inside the file resolve
    /// relative to the file's own directory.
    pub fn load(path: &Path) -> Result<LoadedConfig> {
        let bytes = std::fs::read(path).map_err(|e| XaeError::io(path, e))?;
        let text = std::str::from_utf8(&bytes).map_err(|_| {
            XaeError::InvalidConfig(format!("{}: not valid UTF-8", path.display()))
        })?;
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| {
            XaeError::InvalidConfig(format!("{}: {}", path.display(), e.message()))
        })?;
        cfg.validate()?;
        Ok(LoadedConfig {
            cfg,
            base_dir: path
                .parent()
                .filter(|p| !p.as_os_str().is_empty())
                .unwrap_or_else(|| Path::new("."))
                .to_path_buf(),
            sha256_hex: sha256_hex(&bytes),
        })
    }

    fn data_path(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Load, filter, and cap the dataset. `train_seed` feeds the cap
    /// draw when `subsample_seed` is absent.
    pub fn load_dataset(&self, train_seed: u64) -> Result<PatchDataset> {
        let d = &self.cfg.data;
        let mut ds = match d.format {
            DataFormat::Idx => data::load_idx(
                &self.data_path(d.images.as_ref().expect("validated")),
                &self.data_path(d.labels.as_ref().expect("validated")),
            )?,
            DataFormat::Xpd => {
                data::load_patches(&self.data_path(d.path.as_ref().expect("validated")))?
            }
        };
        if let Some(names) = &d.keep_labels {
            let mut ids = Vec::with_capacity(names.len());
            for n in names {
                ids.push(resolve_name(ds.table(), n, "data.keep_labels")?);
            }
            ds = ds.filter_labels(&LabelSet::new(ids))?;
        }
        if let Some(cap) = d.per_label_cap {
            ds = ds.subsample_per_label(cap, d.subsample_seed.unwrap_or(train_seed))?;
        }
        Ok(ds)
    }

    /// Resolve the partition's label names against `ds`'s table.
    pub fn partition_spec(&self, ds: &PatchDataset) -> Result<PartitionSpec> {
        let p = &self.cfg.partition;
        let set = |names: &[String], ctx: &str| -> Result<LabelSet> {
            let mut ids = Vec::with_capacity(names.len());
            for n in names {
                ids.push(resolve_name(ds.table(), n, ctx)?);
            }
            Ok(LabelSet::new(ids))
        };
        let universe = set(&p.universe, "partition.universe")?;
        let groups = p
            .source_groups
            .iter()
            .map(|g| set(g, "partition.source_groups"))
            .collect::<Result<Vec<_>>>()?;
        let segments = p
            .segments
            .iter()
            .map(|s| {
                Ok(SegmentSpec {
                    labels: set(&s.labels, "partition.segments")?,
                    width: s.width,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        PartitionSpec::new(universe, groups, segments)
    }

    /// Training config with an optional seed override applied.
    pub fn train_config(&self, seed_override: Option<u64>) -> Result<TrainConfig> {
        let mut t = self.cfg.train.clone();
        if let Some(s) = seed_override {
            t.seed = s;
        }
        t.validate()?;
        Ok(t)
    }

    /// Classifier training config; an unset seed derives from the
    /// training seed so the two stages never share a stream.
    pub fn clf_config(&self, train_seed: u64) -> Result<TrainConfig> {
        let c = &self.cfg.classifier;
        let t = TrainConfig {
            learning_rate: c.learning_rate,
            epochs: c.epochs,
            batch_size: c.batch_size,
            seed: c.seed.unwrap_or_else(|| mix_seed(train_seed, 0xC1F)),
            early_stop: c.early_stop,
            snapshot_every: None,
            ..TrainConfig::default()
        };
        t.validate()?;
        Ok(t)
    }

    /// Assemble the full two-stage pipeline description.
    pub fn pipeline(&self, ds: &PatchDataset, seed_override: Option<u64>) -> Result<PipelineConfig> {
        let xae = self.train_config(seed_override)?;
        let clf = self.clf_config(xae.seed)?;
        Ok(PipelineConfig {
            spec: self.partition_spec(ds)?,
            hp: self.cfg.hyperparams.resolve()?,
            xae,
            act_enc: self.cfg.model.act_enc,
            act_dec: self.cfg.model.act_dec,
            hidden: self.cfg.classifier.hidden.clone(),
            clf,
        })
    }

    /// Output directory, CLI override winning over the file.
    pub fn output_dir(&self, over: Option<&Path>) -> PathBuf {
        over.map(Path::to_path_buf)
            .unwrap_or_else(|| self.cfg.output.dir.clone())
    }
}

impl ExperimentConfig {
    /// Cross-field checks that serde cannot express.
    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        match d.format {
            DataFormat::Idx => {
                if d.images.is_none() || d.labels.is_none() {
                    return Err(XaeError::InvalidConfig(
                        "format = \"idx\" requires data.images and data.labels".into(),
                    ));
                }
                if d.path.is_some() {
                    return Err(XaeError::InvalidConfig(
                        "data.path is only valid for format = \"xpd\"".into(),
                    ));
                }
            }
            DataFormat::Xpd => {
                if d.path.is_none() {
                    return Err(XaeError::InvalidConfig(
                        "format = \"xpd\" requires data.path".into(),
                    ));
                }
                if d.images.is_some() || d.labels.is_some() {
                    return Err(XaeError::InvalidConfig(
                        "data.images/data.labels are only valid for format = \"idx\"".into(),
                    ));
                }
            }
        }
        self.hyperparams.resolve()?;
        self.train.validate()?;
        Ok(())
    }
}

fn resolve_name(table: &BTreeMap<u32, String>, name: &str, ctx: &str) -> Result<u32> {
    table
        .iter()
        .find(|(_, n)| n.as_str() == name)
        .map(|(id, _)| *id)
        .ok_or_else(|| {
            XaeError::InvalidConfig(format!("{ctx} references unknown label name \"{name}\""))
        })
}
