//! The `mtseg` command line.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::{
    from_toml_str, load_toml, to_toml_string, DataSource, DatasetSource, ExternalSource, RunConfig,
};
use crate::data::io::{
    read_rgb_png, write_dataset, write_mask_png, write_rgb_png, DatasetManifest, ManifestEntry,
};
use crate::data::{
    generate_synthetic, load_annotation, rasterize_polygons, DatasetSplit, LabelBudget, Mode,
};
use crate::error::{Error, Result};
use crate::experiment::{run_experiment, ExperimentSpec};
use crate::metrics::evaluate;
use crate::tensor::FeatureMap;
use crate::trainer::{predict, train, Checkpoint, RunOutput};

#[derive(Debug, Parser)]
#[command(
    name = "mtseg",
    version,
    about = "Mean Teacher segmentation with an scSE U-Net"
)]
pub struct Cli {
    /// More log output (-v debug, -vv trace).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Replace an existing, non-empty output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Default, Args)]
pub struct DataArgs {
    /// Dataset directory written by `generate-data`.
    #[arg(long, conflicts_with_all = ["images", "masks", "annotations"])]
    pub data: Option<PathBuf>,
    /// Directory of RGB PNG frames named `<patient>_<frame>.png`.
    #[arg(long)]
    pub images: Option<PathBuf>,
    /// Directory of mask PNGs matching the frame names.
    #[arg(long, requires = "images")]
    pub masks: Option<PathBuf>,
    /// Directory of polygon annotation JSON files matching the frame names.
    #[arg(long, requires = "images", conflicts_with = "masks")]
    pub annotations: Option<PathBuf>,
    /// Patients held out for validation (external data only).
    #[arg(long, value_delimiter = ',')]
    pub val_patients: Vec<String>,
}

impl DataArgs {
    fn source(&self) -> Option<DataSource> {
        if let Some(dir) = &self.data {
            return Some(DataSource::Dataset(DatasetSource { dir: dir.clone() }));
        }
        self.images.as_ref().map(|images| {
            DataSource::External(ExternalSource {
                images: images.clone(),
                masks: self.masks.clone(),
                annotations: self.annotations.clone(),
                val_patients: self.val_patients.clone(),
            })
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Val,
    Train,
    All,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset (images, masks, manifest).
    GenerateData {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 7)]
        patients: usize,
        /// The last this-many patients form the validation split.
        #[arg(long, default_value_t = 2)]
        val_patients: usize,
        #[arg(long, default_value_t = 40)]
        images_per_patient: usize,
        #[arg(long, default_value_t = 64)]
        side: usize,
    },
    /// Train a student/teacher pair and save the checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        mode: Option<Mode>,
        /// Label budget: a count or "all".
        #[arg(long)]
        labels: Option<LabelBudget>,
        #[arg(long)]
        iterations: Option<usize>,
    },
    /// Score the teacher of a checkpoint; writes metrics.csv.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Val)]
        split: SplitArg,
    },
    /// Segment PNG frames with the teacher of a checkpoint.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// A PNG file or a directory of PNGs.
        #[arg(long)]
        input: PathBuf,
        /// Also write `<name>_overlay.png` with the mask tinted red.
        #[arg(long)]
        overlay: bool,
    },
    /// Run a label-budget experiment matrix.
    Experiment {
        #[command(flatten)]
        common: Common,
        /// Run cells concurrently.
        #[arg(long)]
        parallel: bool,
    },
    /// Convert polygon annotation JSON to mask PNGs.
    Rasterize {
        #[command(flatten)]
        common: Common,
        /// An annotation file or a directory of them.
        #[arg(long)]
        annotation: PathBuf,
    },
}

/// Maps an error to the process exit code.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) => 1,
        _ => 2,
    }
}

fn prepare_out(dir: &Path, force: bool) -> Result<()> {
    let non_empty = dir.is_dir()
        && fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .next()
            .is_some();
    if non_empty {
        if !force {
            return Err(Error::InvalidArgument(format!(
                "output directory {} is not empty; pass --force to replace it",
                dir.display()
            )));
        }
        fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn load_config<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        Some(p) => load_toml(p),
        None => from_toml_str(""),
    }
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn png_inputs(input: &Path) -> Result<Vec<PathBuf>> {
    if input.is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    if !input.is_dir() {
        return Err(Error::InvalidArgument(format!(
            "input not found: {}",
            input.display()
        )));
    }
    let mut v: Vec<PathBuf> = fs::read_dir(input)
        .map_err(|e| Error::io(input, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    v.sort();
    Ok(v)
}

fn stem(p: &Path) -> String {
    p.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Red tint over foreground pixels.
pub fn overlay(image: &FeatureMap<f32>, mask: &crate::data::BinaryMask) -> FeatureMap<f32> {
    let mut out = image.clone();
    let plane = image.plane();
    for (i, &m) in mask.values().iter().enumerate() {
        if m == 1 {
            for (ch, tint) in [1.0f32, 0.0, 0.0].iter().enumerate() {
                let v = &mut out.data[ch * plane + i];
                *v = 0.5 * *v + 0.5 * tint;
            }
        }
    }
    out
}

fn generate_data(
    common: &Common,
    patients: usize,
    val_patients: usize,
    images_per_patient: usize,
    side: usize,
) -> Result<i32> {
    if val_patients > patients {
        return Err(Error::InvalidArgument(format!(
            "{val_patients} validation patients requested out of {patients}"
        )));
    }
    let seed = common.seed.unwrap_or(0);
    let params = crate::data::SyntheticParams {
        seed,
        n_patients: patients,
        images_per_patient,
        side,
    };
    let samples = generate_synthetic(seed, patients, images_per_patient, side)?;
    prepare_out(&common.out, common.force)?;
    let ids: Vec<String> = (0..patients).map(|p| format!("p{p}")).collect();
    let (train_ids, val_ids) = ids.split_at(patients - val_patients);
    let manifest = DatasetManifest {
        version: DatasetManifest::VERSION,
        generator: Some(params),
        train_patients: train_ids.to_vec(),
        val_patients: val_ids.to_vec(),
        samples: samples
            .iter()
            .map(|s| ManifestEntry {
                id: s.id.clone(),
                patient_id: s.patient_id.clone(),
            })
            .collect(),
    };
    write_dataset(&common.out, &samples, &manifest)?;
    log::info!("wrote {} frames to {}", samples.len(), common.out.display());
    Ok(0)
}

fn resolve_run_config(
    common: &Common,
    data: &DataArgs,
    mode: Option<Mode>,
    labels: Option<LabelBudget>,
    iterations: Option<usize>,
) -> Result<RunConfig> {
    let mut cfg: RunConfig = load_config(common.config.as_deref())?;
    if let Some(s) = common.seed {
        cfg.train.seed = s;
    }
    if let Some(m) = mode {
        cfg.train.mode = m;
    }
    if let Some(l) = labels {
        cfg.train.label_budget = l;
    }
    if let Some(i) = iterations {
        cfg.train.total_iterations = i;
    }
    if let Some(src) = data.source() {
        cfg.data = src;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_train(
    common: &Common,
    data: &DataArgs,
    mode: Option<Mode>,
    labels: Option<LabelBudget>,
    iterations: Option<usize>,
) -> Result<i32> {
    let cfg = resolve_run_config(common, data, mode, labels, iterations)?;
    let loaded = cfg.data.load()?;
    prepare_out(&common.out, common.force)?;
    write_file(&common.out.join("config.toml"), to_toml_string(&cfg)?)?;
    let outcome = train(
        &cfg.model,
        &cfg.train,
        &loaded.split.train,
        RunOutput {
            dir: Some(&common.out),
            data_hash: loaded.data_hash.as_deref(),
        },
    )?;
    if let Some(last) = outcome.log.last() {
        log::info!(
            "final loss {:.4} after {} iterations",
            last.total,
            outcome.log.len()
        );
    }
    Ok(0)
}

fn select_split(split: DatasetSplit, which: SplitArg) -> Vec<crate::data::ImageSample> {
    match which {
        SplitArg::Val => split.val,
        SplitArg::Train => split.train,
        SplitArg::All => split.train.into_iter().chain(split.val).collect(),
    }
}

fn cmd_evaluate(
    common: &Common,
    data: &DataArgs,
    checkpoint: &Path,
    split: SplitArg,
) -> Result<i32> {
    let ck = Checkpoint::load(checkpoint)?;
    let cfg: RunConfig = load_config(common.config.as_deref())?;
    let source = data.source().unwrap_or(cfg.data);
    let loaded = source.load()?;
    match (&ck.data_hash, &loaded.data_hash) {
        (Some(a), Some(b)) if a != b => {
            log::warn!("checkpoint was trained on different data (hash {a:.12} vs {b:.12})")
        }
        _ => {}
    }
    let samples = select_split(loaded.split, split);
    if samples.is_empty() {
        return Err(Error::InvalidArgument("no frames to evaluate".into()));
    }
    let report = evaluate(&ck, &samples)?;
    fs::create_dir_all(&common.out).map_err(|e| Error::io(&common.out, e))?;
    write_file(&common.out.join("metrics.csv"), report.to_csv())?;
    let a = &report.aggregate;
    println!(
        "dice {:.4}  miou {:.4}  sensitivity {:.4}  precision {:.4}  hd {}",
        a.dice,
        a.miou,
        a.sensitivity,
        a.precision,
        a.hd.map_or("NA".into(), |h| format!("{h:.3}"))
    );
    Ok(0)
}

fn cmd_predict(
    common: &Common,
    checkpoint: &Path,
    input: &Path,
    with_overlay: bool,
) -> Result<i32> {
    let ck = Checkpoint::load(checkpoint)?;
    let inputs = png_inputs(input)?;
    fs::create_dir_all(&common.out).map_err(|e| Error::io(&common.out, e))?;
    for p in inputs {
        let img = read_rgb_png(&p)?;
        ck.model
            .check_input(img.height, img.width)
            .map_err(|e| Error::InvalidArgument(format!("{}: {e}", p.display())))?;
        let mask = predict(&ck, &img)?;
        let name = stem(&p);
        write_mask_png(&common.out.join(format!("{name}.png")), &mask)?;
        if with_overlay {
            write_rgb_png(
                &common.out.join(format!("{name}_overlay.png")),
                &overlay(&img, &mask),
            )?;
        }
    }
    Ok(0)
}

fn cmd_experiment(common: &Common, parallel: bool) -> Result<i32> {
    let path = common
        .config
        .as_deref()
        .ok_or_else(|| Error::InvalidArgument("experiment needs --config".into()))?;
    let mut spec: ExperimentSpec = load_toml(path)?;
    if let Some(s) = common.seed {
        spec.seeds = vec![s];
    }
    spec.parallel |= parallel;
    spec.validate()?;
    prepare_out(&common.out, common.force)?;
    let result = run_experiment(&spec, Some(&common.out))?;
    print!("{}", result.summary_markdown(&spec.name));
    Ok(if result.failures.is_empty() { 0 } else { 2 })
}

fn cmd_rasterize(common: &Common, annotation: &Path) -> Result<i32> {
    let files: Vec<PathBuf> = if annotation.is_dir() {
        let mut v: Vec<PathBuf> = fs::read_dir(annotation)
            .map_err(|e| Error::io(annotation, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        v.sort();
        v
    } else {
        vec![annotation.to_path_buf()]
    };
    fs::create_dir_all(&common.out).map_err(|e| Error::io(&common.out, e))?;
    let mut seen = BTreeSet::new();
    for f in files {
        let text = fs::read_to_string(&f).map_err(|e| Error::io(&f, e))?;
        let ann = load_annotation(&text).map_err(|e| match e {
            Error::Annotation { path, message } => Error::InvalidArgument(format!(
                "{}: invalid annotation at {path}: {message}",
                f.display()
            )),
            other => other,
        })?;
        if !seen.insert(ann.image_id.clone()) {
            return Err(Error::InvalidArgument(format!(
                "duplicate image_id {}",
                ann.image_id
            )));
        }
        let mask = rasterize_polygons(&ann)?;
        write_mask_png(&common.out.join(format!("{}.png", ann.image_id)), &mask)?;
    }
    Ok(0)
}

/// Runs a parsed command line and returns the exit code.
pub fn run(cli: Cli) -> Result<i32> {
    match &cli.command {
        Command::GenerateData {
            common,
            patients,
            val_patients,
            images_per_patient,
            side,
        } => generate_data(common, *patients, *val_patients, *images_per_patient, *side),
        Command::Train {
            common,
            data,
            mode,
            labels,
            iterations,
        } => cmd_train(common, data, *mode, *labels, *iterations),
        Command::Evaluate {
            common,
            data,
            checkpoint,
            split,
        } => cmd_evaluate(common, data, checkpoint, *split),
        Command::Predict {
            common,
            checkpoint,
            input,
            overlay,
        } => cmd_predict(common, checkpoint, input, *overlay),
        Command::Experiment { common, parallel } => cmd_experiment(common, *parallel),
        Command::Rasterize { common, annotation } => cmd_rasterize(common, annotation),
    }
}

/// Parses `args`, runs, and reports errors on stderr.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .try_init();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
