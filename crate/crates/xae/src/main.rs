//! Command-line driver: train the label-aware autoencoder, verify its
//! gradient, extract features, train/evaluate the classifier head,
//! render feature grids, slide a detector over images, benchmark
//! against a plain autoencoder, and import image patches.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error,
//! 4 numeric failure, 5 verification failure.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ndarray::Array2;

use xae::classifier::{
    evaluate, extract_features, kfold_crossval, mix_seed, train_classifier, FcnModel, FeatureMode,
};
use xae::config::LoadedConfig;
use xae::cost::{run_grad_check, Hyperparams};
use xae::data;
use xae::error::{Result, XaeError};
use xae::featgrid::render_feature_grid;
use xae::metrics::from_confusion;
use xae::model::XaeModel;
use xae::netpbm;
use xae::trainer::{self, StopReason, TrainObserver};

const XAE_MODEL: &str = "xae-model.json";
const XAE_LOSS: &str = "xae-loss.csv";
const FEATURES: &str = "features.csv";
const CLF_MODEL: &str = "clf-model.json";
const CLF_LOSS: &str = "clf-loss.csv";
const METRICS: &str = "metrics.csv";
const ROC: &str = "roc.csv";
const CONFUSION: &str = "confusion.csv";
const CROSSVAL: &str = "crossval.csv";
const FEATURE_GRID: &str = "feature-grid.pgm";
const DETECT_MAP: &str = "detect-map.pgm";
const DETECT_PEAK: &str = "detect-peak.txt";
const BENCH: &str = "bench.csv";

#[derive(Parser)]
#[command(
    name = "xae",
    version,
    about = "Label-aware autoencoder: training, evaluation, and detection tools"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

/// Flags shared by every config-driven verb.
#[derive(Args)]
struct CommonOpts {
    /// Experiment config file (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override the training seed from the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the output directory from the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train the label-aware autoencoder; writes the model and a loss curve.
    TrainXae(CommonOpts),
    /// Verify the analytic gradient against central finite differences.
    GradCheck {
        /// Random instances to test.
        #[arg(long, default_value_t = 20)]
        instances: usize,
        /// Seed for instance generation.
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Largest acceptable relative error.
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        /// Self-test hook: corrupt one derivative and expect FAIL.
        #[arg(long, hide = true)]
        inject_error: bool,
    },
    /// Encode the configured dataset into a feature CSV.
    Extract(CommonOpts),
    /// Train the classifier head on features from the stored encoder.
    TrainClf(CommonOpts),
    /// Score the classifier: metrics, ROC, and confusion files.
    Eval {
        #[command(flatten)]
        common: CommonOpts,
        /// Run stratified k-fold cross-validation instead of a single pass.
        #[arg(long, conflicts_with = "predictions")]
        kfold: Option<usize>,
        /// Score a stored true,pred file instead of running the models.
        #[arg(long)]
        predictions: Option<PathBuf>,
        /// Class name reported as the detection-style F score.
        #[arg(long)]
        positive: Option<String>,
    },
    /// Render the encoder's weight columns as a tiled grayscale image.
    FeatureGrid(CommonOpts),
    /// Slide encoder+classifier over an image; write a probability map.
    DetectMap {
        #[command(flatten)]
        common: CommonOpts,
        /// Image to scan (PGM/PPM).
        #[arg(long)]
        image: PathBuf,
        /// Class whose probability fills the map.
        #[arg(long)]
        positive: String,
        /// Window step in pixels.
        #[arg(long, default_value_t = 1)]
        stride: usize,
    },
    /// Cross-validated comparison against a plain autoencoder baseline.
    BenchAeVsXae {
        #[command(flatten)]
        common: CommonOpts,
        /// Folds for both arms.
        #[arg(long, default_value_t = 10)]
        kfold: usize,
    },
    /// Pack images listed in a path,label manifest into a patch file.
    ImportPatches {
        /// Manifest CSV; image paths resolve relative to it.
        #[arg(long)]
        manifest: PathBuf,
        /// Destination patch file.
        #[arg(long)]
        out_file: PathBuf,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::TrainXae(c) => cmd_train_xae(&Ctx::new(&c)?),
        Cmd::GradCheck {
            instances,
            seed,
            tolerance,
            inject_error,
        } => cmd_grad_check(instances, seed, tolerance, inject_error),
        Cmd::Extract(c) => cmd_extract(&Ctx::new(&c)?),
        Cmd::TrainClf(c) => cmd_train_clf(&Ctx::new(&c)?),
        Cmd::Eval {
            common,
            kfold,
            predictions,
            positive,
        } => cmd_eval(&Ctx::new(&common)?, kfold, predictions.as_deref(), positive.as_deref()),
        Cmd::FeatureGrid(c) => cmd_feature_grid(&Ctx::new(&c)?),
        Cmd::DetectMap {
            common,
            image,
            positive,
            stride,
        } => cmd_detect_map(&Ctx::new(&common)?, &image, &positive, stride),
        Cmd::BenchAeVsXae { common, kfold } => cmd_bench(&Ctx::new(&common)?, kfold),
        Cmd::ImportPatches { manifest, out_file } => cmd_import(&manifest, &out_file),
    }
}

/// Loaded config plus resolved output directory and seed override.
struct Ctx {
    loaded: LoadedConfig,
    seed: Option<u64>,
    out: PathBuf,
}

impl Ctx {
    fn new(common: &CommonOpts) -> Result<Ctx> {
        let loaded = LoadedConfig::load(&common.config)?;
        let out = loaded.output_dir(common.out.as_deref());
        std::fs::create_dir_all(&out).map_err(|e| XaeError::io(&out, e))?;
        Ok(Ctx {
            loaded,
            seed: common.seed,
            out,
        })
    }

    fn art(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }
}

/// Writes periodic model snapshots during training.
struct SnapshotWriter<'a> {
    dir: &'a Path,
    hp: &'a Hyperparams,
}

impl TrainObserver for SnapshotWriter<'_> {
    fn on_epoch_end(
        &mut self,
        _: usize,
        _: &XaeModel,
        _: &xae::cost::CostBreakdown,
    ) -> Result<()> {
        Ok(())
    }

    fn on_snapshot(&mut self, epoch: usize, model: &XaeModel) -> Result<()> {
        model.save(self.hp, &self.dir.join(format!("xae-model-epoch{epoch}.json")))
    }
}

fn cmd_train_xae(ctx: &Ctx) -> Result<()> {
    let tc = ctx.loaded.train_config(ctx.seed)?;
    let ds = ctx.loaded.load_dataset(tc.seed)?;
    let spec = ctx.loaded.partition_spec(&ds)?;
    let hp = ctx.loaded.cfg.hyperparams.resolve()?;
    let model = XaeModel::init_with_activations(
        spec.clone(),
        ds.dim(),
        mix_seed(tc.seed, 0),
        ctx.loaded.cfg.model.act_enc,
        ctx.loaded.cfg.model.act_dec,
    )?;
    let grouped = data::assemble_groups(ds, &spec, mix_seed(tc.seed, 1))?;
    let run_cfg = trainer::TrainConfig {
        seed: mix_seed(tc.seed, 2),
        ..tc
    };
    let mut snapshots = SnapshotWriter {
        dir: &ctx.out,
        hp: &hp,
    };
    let (trained, report) =
        trainer::train_with_observer(model, &grouped, &hp, &run_cfg, &mut snapshots)?;
    trained.save(&hp, &ctx.art(XAE_MODEL))?;
    report.write_csv(&ctx.art(XAE_LOSS))?;
    let last = report.history.last().expect("at least one epoch");
    println!("epochs={}", report.history.len());
    println!("final_total={}", last.total);
    match report.stop {
        StopReason::CompletedEpochs => println!("stop=completed"),
        StopReason::EarlyStopped { epoch } => println!("stop=early_stopped epoch={epoch}"),
    }
    println!("model={}", ctx.art(XAE_MODEL).display());
    Ok(())
}

fn cmd_grad_check(instances: usize, seed: u64, tolerance: f64, inject: bool) -> Result<()> {
    let report = run_grad_check(instances, seed, tolerance, inject)?;
    println!("instances={}", report.instances);
    println!("step={:e}", report.step);
    for (name, err) in &report.per_term {
        println!("{name}={err:.3e}");
    }
    println!("tolerance={:e}", report.tolerance);
    println!("result={}", if report.passed() { "PASS" } else { "FAIL" });
    if report.passed() {
        Ok(())
    } else {
        Err(XaeError::Verification(format!(
            "analytic gradient disagrees with finite differences: worst relative error {:.3e} exceeds {:e}",
            report.worst, report.tolerance
        )))
    }
}

fn cmd_extract(ctx: &Ctx) -> Result<()> {
    let tc = ctx.loaded.train_config(ctx.seed)?;
    let ds = ctx.loaded.load_dataset(tc.seed)?;
    let (model, _) = XaeModel::load(&ctx.art(XAE_MODEL))?;
    let feats = extract_features(&model, &ds)?;
    feats.write_csv(&ctx.art(FEATURES))?;
    println!("records={}", ds.len());
    println!("features={}", model.hidden_dim());
    println!("features_file={}", ctx.art(FEATURES).display());
    Ok(())
}

fn cmd_train_clf(ctx: &Ctx) -> Result<()> {
    let tc = ctx.loaded.train_config(ctx.seed)?;
    let ds = ctx.loaded.load_dataset(tc.seed)?;
    let (model, _) = XaeModel::load(&ctx.art(XAE_MODEL))?;
    let feats = extract_features(&model, &ds)?;
    let clf_cfg = ctx.loaded.clf_config(tc.seed)?;
    let (clf, report) = train_classifier(&feats, &ctx.loaded.cfg.classifier.hidden, &clf_cfg)?;
    clf.save(&ctx.art(CLF_MODEL))?;
    report.write_csv(&ctx.art(CLF_LOSS))?;
    println!("epochs={}", report.history.len());
    println!(
        "final_cross_entropy={}",
        report.history.last().expect("at least one epoch")
    );
    println!("model={}", ctx.art(CLF_MODEL).display());
    Ok(())
}

fn cmd_eval(
    ctx: &Ctx,
    kfold: Option<usize>,
    predictions: Option<&Path>,
    positive: Option<&str>,
) -> Result<()> {
    if let Some(k) = kfold {
        let tc = ctx.loaded.train_config(ctx.seed)?;
        let ds = ctx.loaded.load_dataset(tc.seed)?;
        let pipe = ctx.loaded.pipeline(&ds, ctx.seed)?;
        let report = kfold_crossval(&ds, &pipe, k, tc.seed, FeatureMode::Exclusive)?;
        report.write_csv(&ctx.art(CROSSVAL))?;
        println!("folds={k}");
        println!(
            "weighted_f = {:.4} ± {:.4}",
            report.mean_weighted_f, report.std_weighted_f
        );
        println!(
            "accuracy = {:.4} ± {:.4}",
            report.mean_accuracy, report.std_accuracy
        );
        println!("crossval_file={}", ctx.art(CROSSVAL).display());
        return Ok(());
    }

    let report = if let Some(pred_path) = predictions {
        let (names, pairs) = read_predictions(pred_path)?;
        let mut confusion = Array2::<usize>::zeros((names.len(), names.len()));
        for (t, p) in &pairs {
            confusion[[*t, *p]] += 1;
        }
        let positive_idx = resolve_positive(&names, positive)?;
        from_confusion(confusion, &names, positive_idx)?
    } else {
        let tc = ctx.loaded.train_config(ctx.seed)?;
        let ds = ctx.loaded.load_dataset(tc.seed)?;
        let (model, _) = XaeModel::load(&ctx.art(XAE_MODEL))?;
        let clf = FcnModel::load(&ctx.art(CLF_MODEL))?;
        let feats = extract_features(&model, &ds)?;
        let positive_idx = resolve_positive(clf.class_names(), positive)?;
        evaluate(&clf, &feats, positive_idx)?
    };
    report.write_metrics_csv(&ctx.art(METRICS))?;
    report.write_roc_csv(&ctx.art(ROC))?;
    report.write_confusion_csv(&ctx.art(CONFUSION))?;
    println!("samples={}", report.sample_count());
    println!("accuracy={:.6}", report.accuracy);
    println!("weighted_f={:.6}", report.weighted_f);
    println!("primary_f={:.6}", report.primary_f);
    println!("metrics_file={}", ctx.art(METRICS).display());
    Ok(())
}

/// `--positive NAME` to a class index, or None when absent.
fn resolve_positive(names: &[String], positive: Option<&str>) -> Result<Option<usize>> {
    match positive {
        None => Ok(None),
        Some(p) => names
            .iter()
            .position(|n| n == p)
            .map(Some)
            .ok_or_else(|| {
                XaeError::InvalidConfig(format!("no class named {p:?} among {names:?}"))
            }),
    }
}

/// Read a stored predictions file: a `true,pred` header then one
/// `true_name,pred_name` pair per line. Classes are the sorted distinct
/// names seen in the file.
fn read_predictions(path: &Path) -> Result<(Vec<String>, Vec<(usize, usize)>)> {
    let text = std::fs::read_to_string(path).map_err(|e| XaeError::io(path, e))?;
    let mut raw: Vec<(String, String)> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || line == "true,pred" {
            continue;
        }
        let (t, p) = line.split_once(',').ok_or_else(|| XaeError::MalformedFile {
            path: path.into(),
            reason: format!("line {}: expected true,pred", lineno + 1),
        })?;
        raw.push((t.trim().to_string(), p.trim().to_string()));
    }
    if raw.is_empty() {
        return Err(XaeError::InvalidData(format!(
            "{}: no prediction rows",
            path.display()
        )));
    }
    let mut names: Vec<String> = raw
        .iter()
        .flat_map(|(t, p)| [t.clone(), p.clone()])
        .collect();
    names.sort();
    names.dedup();
    let idx: BTreeMap<&str, usize> = names
        .iter()
        .enumerate()
        .map(|(i, n)| (n.as_str(), i))
        .collect();
    let pairs = raw
        .iter()
        .map(|(t, p)| (idx[t.as_str()], idx[p.as_str()]))
        .collect();
    Ok((names, pairs))
}

fn cmd_feature_grid(ctx: &Ctx) -> Result<()> {
    let tc = ctx.loaded.train_config(ctx.seed)?;
    let ds = ctx.loaded.load_dataset(tc.seed)?;
    let (model, _) = XaeModel::load(&ctx.art(XAE_MODEL))?;
    let (c, h, w) = ds.geometry();
    let (px_w, px_h, pixels) = render_feature_grid(&model, c, h, w)?;
    netpbm::write_pgm(&ctx.art(FEATURE_GRID), px_w, px_h, &pixels)?;
    println!("grid={px_w}x{px_h}");
    println!("grid_file={}", ctx.art(FEATURE_GRID).display());
    Ok(())
}

fn cmd_detect_map(ctx: &Ctx, image_path: &Path, positive: &str, stride: usize) -> Result<()> {
    let tc = ctx.loaded.train_config(ctx.seed)?;
    let ds = ctx.loaded.load_dataset(tc.seed)?;
    let (_, patch_h, patch_w) = ds.geometry();
    let (model, _) = XaeModel::load(&ctx.art(XAE_MODEL))?;
    let clf = FcnModel::load(&ctx.art(CLF_MODEL))?;
    let positive_idx = resolve_positive(clf.class_names(), Some(positive))?.expect("required");
    let pnm = netpbm::read_pnm(image_path)?;
    let image = data::Image::from_pnm(&pnm);
    let map = data::probability_map(&image, &model, &clf, positive_idx, patch_h, patch_w, stride)?;
    let bytes = netpbm::probabilities_to_bytes(&map);
    netpbm::write_pgm(&ctx.art(DETECT_MAP), map.ncols(), map.nrows(), &bytes)?;

    let mut peak = (0usize, 0usize, f64::NEG_INFINITY);
    for ((r, c), &v) in map.indexed_iter() {
        if v > peak.2 {
            peak = (r, c, v);
        }
    }
    let peak_path = ctx.art(DETECT_PEAK);
    let mut f = std::fs::File::create(&peak_path).map_err(|e| XaeError::io(&peak_path, e))?;
    writeln!(f, "row,col,value").map_err(|e| XaeError::io(&peak_path, e))?;
    writeln!(f, "{},{},{:.6}", peak.0 * stride, peak.1 * stride, peak.2)
        .map_err(|e| XaeError::io(&peak_path, e))?;
    println!("map={}x{}", map.ncols(), map.nrows());
    println!(
        "peak: row={} col={} p={:.6}",
        peak.0 * stride,
        peak.1 * stride,
        peak.2
    );
    println!("map_file={}", ctx.art(DETECT_MAP).display());
    Ok(())
}

fn cmd_bench(ctx: &Ctx, k: usize) -> Result<()> {
    let tc = ctx.loaded.train_config(ctx.seed)?;
    let ds = ctx.loaded.load_dataset(tc.seed)?;
    let pipe = ctx.loaded.pipeline(&ds, ctx.seed)?;
    let bench_path = ctx.art(BENCH);
    let mut f = std::fs::File::create(&bench_path).map_err(|e| XaeError::io(&bench_path, e))?;
    let io_err = |e| XaeError::io(&bench_path, e);
    writeln!(
        f,
        "method,k,mean_weighted_f,std_weighted_f,mean_accuracy,std_accuracy,config_sha256"
    )
    .map_err(io_err)?;
    for mode in [FeatureMode::Exclusive, FeatureMode::MergedAe] {
        let report = kfold_crossval(&ds, &pipe, k, tc.seed, mode)?;
        writeln!(
            f,
            "{},{k},{},{},{},{},{}",
            mode.name(),
            report.mean_weighted_f,
            report.std_weighted_f,
            report.mean_accuracy,
            report.std_accuracy,
            ctx.loaded.sha256_hex
        )
        .map_err(io_err)?;
        println!(
            "{}: weighted_f = {:.4} ± {:.4}, accuracy = {:.4} ± {:.4}",
            mode.name(),
            report.mean_weighted_f,
            report.std_weighted_f,
            report.mean_accuracy,
            report.std_accuracy
        );
    }
    println!("bench_file={}", bench_path.display());
    Ok(())
}

fn cmd_import(manifest: &Path, out_file: &Path) -> Result<()> {
    let ds = data::import_patches(manifest)?;
    data::save_patches(&ds, out_file)?;
    let (c, h, w) = ds.geometry();
    println!("records={}", ds.len());
    println!("labels={}", ds.table().len());
    println!("geometry={c}x{h}x{w}");
    println!("patch_file={}", out_file.display());
    Ok(())
}
