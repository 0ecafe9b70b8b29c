//! Command-line front end. Every command reads an optional JSON run config;
//! explicit flags take precedence over it.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::correct::{InferenceParams, correct_layout, predict_layout, uncertainty_mask};
use crate::error::{Error, Result};
use crate::fabsim::{FabParams, fabricate};
use crate::metrics::{ReductionFactor, diff_map, error_pixels, reduction_factor};
use crate::patterns::{PatternSpec, generate_corpus};
use crate::raster::{Bitmap, read_pgm, write_pgm};
use crate::training::{
    Dataset, DatasetOptions, Ensemble, Split, TrainConfig, TrainReport, Trainer, tandem_bce,
    train_ensemble_with_progress, write_history_csv,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_DIVERGED: i32 = 4;
pub const EXIT_INTERNAL: i32 = 1;

const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub data_dir: PathBuf,
    pub model_dir: PathBuf,
    pub output_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            data_dir: "data".into(),
            model_dir: "models".into(),
            output_dir: "out".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub pattern: PatternSpec,
    pub n_patterns: usize,
    pub fab: FabParams,
    /// Fabrication noise realizations per pattern.
    pub fab_runs: usize,
    pub train: TrainConfig,
    pub inference: InferenceParams,
    pub paths: Paths,
    /// Physical pixel pitch, carried through as metadata only.
    pub nm_per_pixel: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            pattern: PatternSpec::default(),
            n_patterns: 30,
            fab: FabParams::default(),
            fab_runs: 1,
            train: TrainConfig::default(),
            inference: InferenceParams::default(),
            paths: Paths::default(),
            nm_per_pixel: 1.0,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_slice(&bytes).map_err(|e| json_error(path, &e))
    }

    pub fn validate(&self) -> Result<()> {
        self.pattern.validate()?;
        self.fab.validate()?;
        self.train.validate()?;
        self.inference.validate(self.train.architecture.side)?;
        if self.n_patterns == 0 || self.fab_runs == 0 {
            return Err(Error::Parameter(
                "n_patterns and fab_runs must be >= 1".into(),
            ));
        }
        if !(self.nm_per_pixel > 0.0 && self.nm_per_pixel.is_finite()) {
            return Err(Error::Parameter(format!(
                "nm_per_pixel must be > 0, got {}",
                self.nm_per_pixel
            )));
        }
        Ok(())
    }
}

fn json_error(path: &Path, e: &serde_json::Error) -> Error {
    Error::format(
        e.column() as u64,
        format!("{}: line {}: {e}", path.display(), e.line()),
    )
}

#[derive(Debug, Parser)]
#[command(
    name = "fabfix",
    version,
    about = "Predict and correct lithographic fabrication deviations"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Default)]
pub struct Overrides {
    /// JSON run config; flags override its fields.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args, Default)]
pub struct TrainOverrides {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub ensemble_size: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    /// Suppress per-epoch progress on stderr.
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Args, Default)]
pub struct InferenceOverrides {
    #[arg(long)]
    pub stride: Option<usize>,
    #[arg(long)]
    pub threshold: Option<f32>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum CorrectorMode {
    Tandem,
    Independent,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate layouts, fabricate them and write a dataset manifest.
    GenData {
        #[command(flatten)]
        common: Overrides,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        n_patterns: Option<usize>,
    },
    /// Train the forward (layout to fabricated) ensemble.
    TrainForward {
        #[command(flatten)]
        common: Overrides,
        #[command(flatten)]
        train: TrainOverrides,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the corrector ensemble, through a frozen forward ensemble in tandem mode.
    TrainCorrector {
        #[command(flatten)]
        common: Overrides,
        #[command(flatten)]
        train: TrainOverrides,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Forward ensemble directory; required in tandem mode.
        #[arg(long)]
        forward: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "tandem")]
        mode: CorrectorMode,
    },
    /// Predict the fabricated outcome of a layout.
    Predict {
        #[command(flatten)]
        common: Overrides,
        #[command(flatten)]
        inference: InferenceOverrides,
        #[arg(long)]
        layout: PathBuf,
        #[arg(long)]
        forward: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Correct a nominal layout.
    Correct {
        #[command(flatten)]
        common: Overrides,
        #[command(flatten)]
        inference: InferenceOverrides,
        #[arg(long)]
        layout: PathBuf,
        #[arg(long)]
        corrector: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare a candidate bitmap against the nominal.
    Evaluate {
        #[command(flatten)]
        common: Overrides,
        #[arg(long)]
        nominal: PathBuf,
        #[arg(long)]
        candidate: PathBuf,
        /// Uncorrected outcome; adds a reduction-factor row against the candidate.
        #[arg(long)]
        baseline: Option<PathBuf>,
        /// Extra reduction-factor rows as UNCORRECTED:CORRECTED counts.
        #[arg(long = "pair", value_parser = parse_pair)]
        pairs: Vec<(usize, usize)>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_pair(s: &str) -> std::result::Result<(usize, usize), String> {
    let (a, b) = s
        .split_once(':')
        .ok_or_else(|| format!("expected UNCORRECTED:CORRECTED, got `{s}`"))?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("`{v}`: {e}"));
    Ok((parse(a)?, parse(b)?))
}

/// Exit code for a library error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Parameter(_) => EXIT_USAGE,
        Error::Bounds(_)
        | Error::Shape(_)
        | Error::Size(_)
        | Error::Format { .. }
        | Error::Io { .. }
        | Error::Generation(_) => EXIT_DATA,
        Error::Diverged { .. } | Error::Optimizer { .. } => EXIT_DIVERGED,
        Error::Invariant(_) => EXIT_INTERNAL,
    }
}

/// One-line JSON error record.
pub fn error_line(e: &Error) -> String {
    let kind = match e {
        Error::Bounds(_) => "bounds",
        Error::Parameter(_) => "parameter",
        Error::Shape(_) => "shape",
        Error::Size(_) => "size",
        Error::Format { .. } => "format",
        Error::Io { .. } => "io",
        Error::Generation(_) => "generation",
        Error::Optimizer { .. } => "optimizer",
        Error::Diverged { .. } => "diverged",
        Error::Invariant(_) => "invariant",
    };
    serde_json::json!({ "error": kind, "exit_code": exit_code(e), "message": e.to_string() })
        .to_string()
}

fn load_config(common: &Overrides) -> Result<RunConfig> {
    let mut config = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        config.pattern.seed = seed;
        config.fab.seed = seed;
        config.train.seed = seed;
    }
    Ok(config)
}

fn apply_train(config: &mut RunConfig, o: &TrainOverrides) {
    let t = &mut config.train;
    t.max_epochs = o.epochs.unwrap_or(t.max_epochs);
    t.ensemble_size = o.ensemble_size.unwrap_or(t.ensemble_size);
    t.batch_size = o.batch_size.unwrap_or(t.batch_size);
    t.patience = o.patience.unwrap_or(t.patience);
}

fn apply_inference(config: &mut RunConfig, o: &InferenceOverrides) {
    let p = &mut config.inference;
    p.stride = o.stride.unwrap_or(p.stride);
    p.binarize_threshold = o.threshold.unwrap_or(p.binarize_threshold);
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FabricatedEntry {
    pub layout: usize,
    pub run: usize,
    pub file: String,
    pub pairs: usize,
}

/// Contents of a generated data directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataManifest {
    pub layouts: Vec<String>,
    pub fabricated: Vec<FabricatedEntry>,
    pub patch_size: usize,
    pub stride: usize,
    pub split_seed: u64,
    pub pairs: usize,
    pub train_pairs: usize,
    pub test_pairs: usize,
    pub pattern: PatternSpec,
    pub fab: FabParams,
    pub nm_per_pixel: f64,
}

impl DataManifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_slice(&bytes).map_err(|e| json_error(&path, &e))
    }

    /// Rebuilds the dataset from the rasters on disk.
    pub fn dataset(&self, dir: &Path) -> Result<Dataset> {
        let layouts = self
            .layouts
            .iter()
            .map(|f| read_pgm(dir.join(f)))
            .collect::<Result<Vec<_>>>()?;
        let fabricated = self
            .fabricated
            .iter()
            .map(|e| read_pgm(dir.join(&e.file)).map(|b| (e.layout, b)))
            .collect::<Result<Vec<_>>>()?;
        let options = DatasetOptions {
            patch_size: self.patch_size,
            stride: self.stride,
            split_seed: self.split_seed,
            fab_runs: 1,
        };
        let ds = Dataset::from_parts(layouts, fabricated, &options)?;
        if ds.len() != self.pairs {
            return Err(Error::Invariant(format!(
                "manifest lists {} pairs, rasters give {}",
                self.pairs,
                ds.len()
            )));
        }
        Ok(ds)
    }
}

fn gen_data(config: &RunConfig, out: &Path) -> Result<String> {
    config.validate()?;
    create_dir(out)?;
    let corpus = generate_corpus(&config.pattern, config.n_patterns)?;
    let mut layouts = Vec::new();
    let mut fabricated = Vec::new();
    let mut fab_bitmaps = Vec::new();
    for (i, layout) in corpus.iter().enumerate() {
        let name = format!("layout_{i:03}.pgm");
        write_pgm(layout, out.join(&name))?;
        layouts.push(name);
    }
    for run in 0..config.fab_runs {
        let params = config
            .fab
            .with_seed(config.fab.seed.wrapping_add(run as u64));
        for (i, layout) in corpus.iter().enumerate() {
            let fab = fabricate(layout, &params)?;
            let file = format!("fabricated_{i:03}_run{run}.pgm");
            write_pgm(&fab, out.join(&file))?;
            fabricated.push(FabricatedEntry {
                layout: i,
                run,
                file,
                pairs: 0,
            });
            fab_bitmaps.push((i, fab));
        }
    }
    let options = DatasetOptions {
        patch_size: config.train.architecture.side,
        stride: config.train.dataset_stride,
        split_seed: config.fab.seed,
        fab_runs: 1,
    };
    let ds = Dataset::from_parts(corpus, fab_bitmaps, &options)?;
    for (k, entry) in fabricated.iter_mut().enumerate() {
        entry.pairs = (0..ds.len()).filter(|&i| ds.source(i) == k).count();
    }
    let manifest = DataManifest {
        layouts,
        fabricated,
        patch_size: options.patch_size,
        stride: options.stride,
        split_seed: options.split_seed,
        pairs: ds.len(),
        train_pairs: ds.indices(Split::Train).len(),
        test_pairs: ds.indices(Split::Test).len(),
        pattern: config.pattern.clone(),
        fab: config.fab,
        nm_per_pixel: config.nm_per_pixel,
    };
    write_file(
        &out.join(MANIFEST_FILE),
        serde_json::to_vec_pretty(&manifest).expect("manifest serializes"),
    )?;
    Ok(format!(
        "pairs={} train={} test={}",
        manifest.pairs, manifest.train_pairs, manifest.test_pairs
    ))
}

fn train_members(
    trainer: Trainer<'_>,
    ds: &Dataset,
    config: &RunConfig,
    quiet: bool,
    out: &Path,
) -> Result<(Ensemble, Vec<TrainReport>)> {
    create_dir(out)?;
    let progress = |m: usize, r: &crate::training::EpochRecord| {
        if !quiet {
            eprintln!(
                "member={m} epoch={} train_bce={:.5} test_bce={:.5}",
                r.epoch, r.train_bce, r.test_bce
            );
        }
    };
    let result = train_ensemble_with_progress(trainer, ds, &config.train, &progress)?;
    let metadata: Vec<serde_json::Value> = result
        .reports
        .iter()
        .map(|r| {
            serde_json::json!({
                "role": trainer.role().as_str(),
                "seed": r.seed,
                "best_epoch": r.best_epoch,
                "best_test_bce": r.best_test_bce,
                "nm_per_pixel": config.nm_per_pixel,
            })
        })
        .collect();
    result.ensemble.save_dir(out, &metadata)?;
    write_history_csv(&result.reports, out.join("history.csv"))?;
    Ok((result.ensemble, result.reports))
}

fn summarize(reports: &[TrainReport]) -> String {
    let best: Vec<String> = reports
        .iter()
        .map(|r| format!("{:.5}", r.best_test_bce))
        .collect();
    format!("members={} best_test_bce={}", reports.len(), best.join(","))
}

fn write_field_outputs(
    out: &Path,
    stem: &str,
    bits: &Bitmap,
    field: &crate::raster::Field,
    band: (f32, f32),
) -> Result<()> {
    create_dir(out)?;
    write_pgm(field, out.join(format!("{stem}_field.pgm")))?;
    write_pgm(bits, out.join(format!("{stem}.pgm")))?;
    write_pgm(
        &uncertainty_mask(field, band)?,
        out.join(format!("{stem}_uncertainty.pgm")),
    )
}

fn reduction_row(label: &str, r: &ReductionFactor) -> String {
    let ratio = r
        .ratio()
        .map_or_else(|| "inf".to_string(), |v| format!("{v:.6}"));
    format!("{label},{},{},{ratio},{r}\n", r.uncorrected, r.corrected)
}

fn evaluate(
    nominal: &Path,
    candidate: &Path,
    baseline: Option<&Path>,
    pairs: &[(usize, usize)],
    out: &Path,
) -> Result<String> {
    let nominal = read_pgm(nominal)?;
    let candidate = read_pgm(candidate)?;
    let errors = error_pixels(&nominal, &candidate)?;
    let diff = diff_map(&nominal, &candidate)?;
    let counts = diff.counts();
    create_dir(out)?;
    diff.write_ppm(out.join("diff.ppm"))?;
    write_file(
        &out.join("summary.csv"),
        format!(
            "error_pixels,loss,gain,unchanged\n{errors},{},{},{}\n",
            counts.loss, counts.gain, counts.unchanged
        ),
    )?;
    let mut rows = String::from("label,uncorrected,corrected,ratio,reported\n");
    let mut message = format!("error_pixels={errors}");
    if let Some(b) = baseline {
        let uncorrected = error_pixels(&nominal, &read_pgm(b)?)?;
        let r = reduction_factor(uncorrected, errors);
        rows.push_str(&reduction_row("baseline", &r));
        message.push_str(&format!(" reduction_factor={r}"));
    }
    for (i, &(u, c)) in pairs.iter().enumerate() {
        rows.push_str(&reduction_row(&format!("pair{i}"), &reduction_factor(u, c)));
    }
    write_file(&out.join("reduction.csv"), rows)?;
    Ok(message)
}

/// Runs one parsed command and returns its one-line summary.
pub fn run(cli: Cli) -> Result<String> {
    match cli.command {
        Command::GenData {
            common,
            out,
            n_patterns,
        } => {
            let mut config = load_config(&common)?;
            config.n_patterns = n_patterns.unwrap_or(config.n_patterns);
            let out = out.unwrap_or_else(|| config.paths.data_dir.clone());
            gen_data(&config, &out)
        }
        Command::TrainForward {
            common,
            train,
            data,
            out,
        } => {
            let mut config = load_config(&common)?;
            apply_train(&mut config, &train);
            config.validate()?;
            let data = data.unwrap_or_else(|| config.paths.data_dir.clone());
            let out = out.unwrap_or_else(|| config.paths.model_dir.join("forward"));
            let ds = DataManifest::load(&data)?.dataset(&data)?;
            let (_, reports) = train_members(Trainer::Forward, &ds, &config, train.quiet, &out)?;
            Ok(summarize(&reports))
        }
        Command::TrainCorrector {
            common,
            train,
            data,
            forward,
            out,
            mode,
        } => {
            let mut config = load_config(&common)?;
            apply_train(&mut config, &train);
            config.validate()?;
            let data = data.unwrap_or_else(|| config.paths.data_dir.clone());
            let out = out.unwrap_or_else(|| config.paths.model_dir.join("corrector"));
            let ds = DataManifest::load(&data)?.dataset(&data)?;
            match mode {
                CorrectorMode::Independent => {
                    let (_, reports) = train_members(
                        Trainer::InverseIndependent,
                        &ds,
                        &config,
                        train.quiet,
                        &out,
                    )?;
                    Ok(summarize(&reports))
                }
                CorrectorMode::Tandem => {
                    let dir = forward.unwrap_or_else(|| config.paths.model_dir.join("forward"));
                    let fwd = Ensemble::load_dir(&dir)?;
                    let (corrector, reports) = train_members(
                        Trainer::InverseTandem(&fwd),
                        &ds,
                        &config,
                        train.quiet,
                        &out,
                    )?;
                    let held_out = ds.indices(Split::Test);
                    let tandem = if held_out.is_empty() {
                        f64::NAN
                    } else {
                        tandem_bce(&corrector, &fwd, &ds, held_out)?
                    };
                    Ok(format!(
                        "{} ensemble_tandem_bce={tandem:.5}",
                        summarize(&reports)
                    ))
                }
            }
        }
        Command::Predict {
            common,
            inference,
            layout,
            forward,
            out,
        } => {
            let mut config = load_config(&common)?;
            apply_inference(&mut config, &inference);
            let out = out.unwrap_or_else(|| config.paths.output_dir.clone());
            let fwd = Ensemble::load_dir(&forward)?;
            let (bits, field) = predict_layout(&read_pgm(&layout)?, &fwd, &config.inference)?;
            write_field_outputs(
                &out,
                "prediction",
                &bits,
                &field,
                config.inference.uncertainty_band,
            )?;
            Ok(format!("foreground={}", bits.count_foreground()))
        }
        Command::Correct {
            common,
            inference,
            layout,
            corrector,
            out,
        } => {
            let mut config = load_config(&common)?;
            apply_inference(&mut config, &inference);
            let out = out.unwrap_or_else(|| config.paths.output_dir.clone());
            let ens = Ensemble::load_dir(&corrector)?;
            let nominal = read_pgm(&layout)?;
            let (bits, field) = correct_layout(&nominal, &ens, &config.inference)?;
            write_field_outputs(
                &out,
                "correction",
                &bits,
                &field,
                config.inference.uncertainty_band,
            )?;
            Ok(format!("changed_pixels={}", error_pixels(&nominal, &bits)?))
        }
        Command::Evaluate {
            common,
            nominal,
            candidate,
            baseline,
            pairs,
            out,
        } => {
            let config = load_config(&common)?;
            let out = out.unwrap_or_else(|| config.paths.output_dir.clone());
            evaluate(&nominal, &candidate, baseline.as_deref(), &pairs, &out)
        }
    }
}
