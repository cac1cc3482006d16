//! Experiment configs and the `ptq-bench` command set.
//!
//! A run is described by an [`ExperimentConfig`], read from TOML and
//! adjusted by command-line flags. Every command writes its outputs plus a
//! `manifest.json` (resolved config, SHA-256 of each output, tool version)
//! into the output directory. Passing a manifest back through `--config`
//! replays the run.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::archive::{load_dataset, load_model, save_dataset, save_model};
use crate::calibrate::{MetricKind, SearchConfig};
use crate::calibset::{CalibSpec, ClassBias};
use crate::engine::{evaluate, PerClassAccuracy};
use crate::error::{Error, Result};
use crate::harness::{
    boxplot_csv, calibrate_trial, run_benchmark, table_csv, BitWidths, ReliabilityReport, TrialSettings, Workload,
};
use crate::model::{LabeledDataset, ModelGraph};
use crate::reference::ReferenceWorkload;

pub const TOOL_NAME: &str = "ptq-bench";
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Bit-width that disables quantization when given for both weights and activations.
pub const PASSTHROUGH_BITS: u8 = 32;

pub const CONFIG_SCHEMA: &str = r#"Experiment config (TOML). Every key is optional; defaults shown.

model = "reference"     # "reference" or path to a model archive
train = "reference"     # calibration pool: "reference" or dataset archive
test = "reference"      # evaluation split: "reference" or dataset archive
metric = "mse"          # minmax | mse | cosine | kl
wbits = 4               # 2..=8; wbits = abits = 32 runs full precision
abits = 4
trials = 50
base_seed = 0
workers = 1
out = "ptq-out"

[calib]
size = 32
noise_fraction = 0.0
# bias = { class = 3, p = 0.5 }

[search]
candidate_count = 100
kl_bins = 2048

[reference]             # used wherever a source is "reference"
data_seed = 0
[reference.synthetic]
class_count = 10
noise_sigma = 0.5
train_size = 5000
test_size = 10000
[reference.training]
hidden = [64, 64]
epochs = 12
learning_rate = 0.05
batch_size = 32
seed = 0
"#;

/// Where a model or dataset comes from.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(from = "String", into = "String")]
pub enum Source {
    #[default]
    Reference,
    Archive(PathBuf),
}

impl From<String> for Source {
    fn from(s: String) -> Self {
        if s == "reference" {
            Source::Reference
        } else {
            Source::Archive(s.into())
        }
    }
}

impl From<Source> for String {
    fn from(s: Source) -> Self {
        s.to_string()
    }
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Source::Reference => f.write_str("reference"),
            Source::Archive(p) => write!(f, "{}", p.display()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: Source,
    pub train: Source,
    pub test: Source,
    pub metric: MetricKind,
    pub wbits: u8,
    pub abits: u8,
    pub calib: CalibSpec,
    pub search: SearchConfig,
    pub trials: usize,
    pub base_seed: u64,
    pub workers: usize,
    pub out: PathBuf,
    pub reference: ReferenceWorkload,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: Source::Reference,
            train: Source::Reference,
            test: Source::Reference,
            metric: MetricKind::Mse,
            wbits: 4,
            abits: 4,
            calib: CalibSpec::default(),
            search: SearchConfig::default(),
            trials: 50,
            base_seed: 0,
            workers: 1,
            out: PathBuf::from("ptq-out"),
            reference: ReferenceWorkload::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    /// Reads a TOML config, or the config recorded in a `manifest.json`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        if path.extension().is_some_and(|e| e == "json") {
            let manifest: Manifest = serde_json::from_str(&text)?;
            return Ok(manifest.config);
        }
        Self::from_toml(&text)
    }

    /// `None` means full precision.
    pub fn bit_widths(&self) -> Result<Option<BitWidths>> {
        match (self.wbits, self.abits) {
            (PASSTHROUGH_BITS, PASSTHROUGH_BITS) => Ok(None),
            (PASSTHROUGH_BITS, _) | (_, PASSTHROUGH_BITS) => Err(Error::InvalidConfig(
                "wbits and abits must both be 32 to disable quantization".into(),
            )),
            (w, a) => BitWidths::new(w, a).map(Some),
        }
    }

    pub fn settings(&self) -> Result<TrialSettings> {
        Ok(TrialSettings {
            metric: self.metric,
            bits: self.bit_widths()?,
            calib: self.calib.clone(),
            search: self.search,
        })
    }

    /// Checks everything that can be checked before any work starts.
    pub fn validate(&self) -> Result<()> {
        self.bit_widths()?;
        self.calib.validate()?;
        self.reference.synthetic.validate()?;
        self.reference.training.validate()?;
        if self.trials == 0 {
            return Err(Error::InvalidConfig("trials must be at least 1".into()));
        }
        if self.workers == 0 {
            return Err(Error::InvalidConfig("workers must be at least 1".into()));
        }
        if self.search.candidate_count == 0 || self.search.kl_bins == 0 {
            return Err(Error::InvalidConfig("candidate_count and kl_bins must be positive".into()));
        }
        for source in [&self.model, &self.train, &self.test] {
            if let Source::Archive(p) = source {
                if !p.is_file() {
                    return Err(Error::InvalidConfig(format!("no such archive: {}", p.display())));
                }
            }
        }
        Ok(())
    }

    fn uses_reference(&self) -> bool {
        [&self.model, &self.train, &self.test].contains(&&Source::Reference)
    }
}

/// Model and splits resolved from an [`ExperimentConfig`].
#[derive(Debug, Clone)]
pub struct LoadedWorkload {
    pub model: ModelGraph,
    pub train: LabeledDataset,
    pub test: LabeledDataset,
}

impl LoadedWorkload {
    pub fn load(config: &ExperimentConfig) -> Result<Self> {
        let reference = if config.uses_reference() {
            Some(config.reference.build()?)
        } else {
            None
        };
        let dataset = |source: &Source, pick: fn(&crate::reference::ReferenceArtifacts) -> &LabeledDataset| match source {
            Source::Reference => Ok(pick(reference.as_ref().expect("reference built")).clone()),
            Source::Archive(p) => load_dataset(p),
        };
        let model = match &config.model {
            Source::Reference => reference.as_ref().expect("reference built").model.clone(),
            Source::Archive(p) => load_model(p)?,
        };
        Ok(Self {
            train: dataset(&config.train, |r| &r.train)?,
            test: dataset(&config.test, |r| &r.test)?,
            model,
        })
    }

    pub fn workload(&self) -> Workload<'_> {
        Workload {
            model: &self.model,
            train: &self.train,
            test: &self.test,
        }
    }
}

/// Written next to every command's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config: ExperimentConfig,
    /// SHA-256 of every input archive, by config key.
    pub inputs: BTreeMap<String, String>,
    /// SHA-256 of every output file, by file name.
    pub artifacts: BTreeMap<String, String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Accuracy of one model/config pair, as written by `evaluate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub label: String,
    pub seed: Option<u64>,
    pub config_digest: Option<String>,
    pub accuracy: PerClassAccuracy,
}

/// FP accuracy and loss curve written by `train-reference`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub accuracy: PerClassAccuracy,
    pub epoch_losses: Vec<f64>,
}

#[derive(Debug, Parser)]
#[command(name = TOOL_NAME, version, about = "Post-training quantization reliability benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train the reference MLP and write model and dataset archives.
    TrainReference(Overrides),
    /// Calibrate once and write the QuantConfig JSON.
    Calibrate(Overrides),
    /// FP or quantized per-class accuracy for one seed.
    Evaluate(Overrides),
    /// Run the multi-seed benchmark.
    Bench(Overrides),
    /// Render stored report JSON files to CSV.
    Report {
        /// report.json files written by `bench`.
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        /// Output directory [default: .].
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
struct Overrides {
    /// TOML config, or a manifest.json to replay.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Number of seeded trials.
    #[arg(long)]
    trials: Option<usize>,
    /// Base seed; trial i uses base + i.
    #[arg(long)]
    seed: Option<u64>,
    /// minmax, mse, cosine or kl.
    #[arg(long)]
    metric: Option<MetricKind>,
    /// Weight bits (2..=8, or 32 with --abits 32).
    #[arg(long)]
    wbits: Option<u8>,
    /// Activation bits.
    #[arg(long)]
    abits: Option<u8>,
    /// Fraction of calibration samples replaced by noise.
    #[arg(long)]
    noise: Option<f64>,
    /// Oversample this class in calibration sets.
    #[arg(long)]
    bias_class: Option<usize>,
    /// Probability of drawing the biased class [default: 0.5].
    #[arg(long, requires = "bias_class")]
    bias_p: Option<f64>,
    /// Calibration samples per trial.
    #[arg(long)]
    calib_size: Option<usize>,
    /// Worker threads for trials.
    #[arg(long)]
    workers: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Overrides {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut c = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(v) = self.trials {
            c.trials = v;
        }
        if let Some(v) = self.seed {
            c.base_seed = v;
        }
        if let Some(v) = self.metric {
            c.metric = v;
        }
        if let Some(v) = self.wbits {
            c.wbits = v;
        }
        if let Some(v) = self.abits {
            c.abits = v;
        }
        if let Some(v) = self.noise {
            c.calib.noise_fraction = v;
        }
        if let Some(class) = self.bias_class {
            c.calib.bias = Some(ClassBias {
                class,
                p: self.bias_p.unwrap_or(0.5),
            });
        }
        if let Some(v) = self.calib_size {
            c.calib.size = v;
        }
        if let Some(v) = self.workers {
            c.workers = v;
        }
        if let Some(v) = &self.out {
            c.out = v.clone();
        }
        c.validate()?;
        Ok(c)
    }
}

enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

/// Runs the command line and returns the process exit code:
/// 0 on success, 1 on usage errors, 2 on runtime errors.
pub fn cli_main<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return 0;
        }
        Err(e) => {
            let _ = e.print();
            eprintln!("\n{CONFIG_SCHEMA}");
            return 1;
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}\n\n{CONFIG_SCHEMA}");
            1
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn config_of(o: &Overrides) -> std::result::Result<ExperimentConfig, Failure> {
    o.resolve().map_err(|e| Failure::Usage(e.to_string()))
}

fn run(command: Command) -> std::result::Result<(), Failure> {
    match command {
        Command::TrainReference(o) => {
            let c = config_of(&o)?;
            let mut out = Outputs::new(&c.out)?;
            let r = c.reference.build()?;
            let accuracy = evaluate(&r.model, &r.test, None)?;
            println!("fp average accuracy {}", accuracy.average);
            let model_path = c.out.join("model.ptq");
            save_model(&r.model, &model_path)?;
            out.record_file("model.ptq")?;
            save_dataset(&r.train, c.out.join("train.ptq"))?;
            out.record_file("train.ptq")?;
            save_dataset(&r.test, c.out.join("test.ptq"))?;
            out.record_file("test.ptq")?;
            let summary = TrainingSummary {
                accuracy,
                epoch_losses: r.epoch_losses,
            };
            out.write("fp_accuracy.json", &json_pretty(&summary)?)?;
            out.finish("train-reference", &c)
        }
        Command::Calibrate(o) => {
            let c = config_of(&o)?;
            let settings = c.settings().map_err(|e| Failure::Usage(e.to_string()))?;
            if settings.bits.is_none() {
                return Err(Failure::Usage("calibrate needs quantized bit-widths".into()));
            }
            let mut out = Outputs::new(&c.out)?;
            let w = LoadedWorkload::load(&c)?;
            let q = calibrate_trial(w.workload(), &settings, c.base_seed)?.expect("quantized settings");
            println!("{}", q.digest());
            out.write("quant_config.json", &q.to_json()?)?;
            out.finish("calibrate", &c)
        }
        Command::Evaluate(o) => {
            let c = config_of(&o)?;
            let settings = c.settings().map_err(|e| Failure::Usage(e.to_string()))?;
            let mut out = Outputs::new(&c.out)?;
            let w = LoadedWorkload::load(&c)?;
            let quant = calibrate_trial(w.workload(), &settings, c.base_seed)?;
            let accuracy = evaluate(&w.model, &w.test, quant.as_ref())?;
            println!("{} average accuracy {}", settings.label(), accuracy.average);
            let result = Evaluation {
                label: settings.label(),
                seed: quant.as_ref().map(|_| c.base_seed),
                config_digest: quant.as_ref().map(|q| q.digest()),
                accuracy,
            };
            out.write("evaluation.json", &json_pretty(&result)?)?;
            out.finish("evaluate", &c)
        }
        Command::Bench(o) => {
            let c = config_of(&o)?;
            let settings = c.settings().map_err(|e| Failure::Usage(e.to_string()))?;
            let mut out = Outputs::new(&c.out)?;
            let w = LoadedWorkload::load(&c)?;
            let report = run_benchmark(w.workload(), &settings, c.trials, c.base_seed, c.workers)?;
            println!(
                "{} average {:.4} ± {:.4} over {} trials",
                report.label, report.average.mean, report.average.std, report.trial_count
            );
            out.write("report.json", &report.to_json()?)?;
            out.write("report.csv", &table_csv(&[&report]))?;
            out.write("boxplot.csv", &boxplot_csv(&report))?;
            out.finish("bench", &c)
        }
        Command::Report { reports, out } => {
            let dir = out.unwrap_or_else(|| PathBuf::from("."));
            let mut loaded = Vec::with_capacity(reports.len());
            for p in &reports {
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                loaded.push(ReliabilityReport::from_json(&text)?);
            }
            let first = &loaded[0];
            if loaded.iter().any(|r| r.classes.len() != first.classes.len()) {
                return Err(Failure::Usage("reports have different class counts".into()));
            }
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let refs: Vec<&ReliabilityReport> = loaded.iter().collect();
            write_file(&dir.join("report.csv"), &table_csv(&refs))?;
            if loaded.len() == 1 {
                write_file(&dir.join("boxplot.csv"), &boxplot_csv(first))?;
            } else {
                for (i, r) in loaded.iter().enumerate() {
                    write_file(&dir.join(format!("boxplot-{i}.csv")), &boxplot_csv(r))?;
                }
            }
            Ok(())
        }
    }
}

fn json_pretty<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Output directory plus the hashes collected for the manifest.
struct Outputs {
    dir: PathBuf,
    artifacts: BTreeMap<String, String>,
}

impl Outputs {
    fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            artifacts: BTreeMap::new(),
        })
    }

    fn write(&mut self, name: &str, contents: &str) -> Result<()> {
        write_file(&self.dir.join(name), contents)?;
        self.artifacts.insert(name.into(), sha256_hex(contents.as_bytes()));
        Ok(())
    }

    fn record_file(&mut self, name: &str) -> Result<()> {
        let path = self.dir.join(name);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        self.artifacts.insert(name.into(), sha256_hex(&bytes));
        Ok(())
    }

    fn finish(self, command: &str, config: &ExperimentConfig) -> std::result::Result<(), Failure> {
        let mut inputs = BTreeMap::new();
        for (key, source) in [("model", &config.model), ("train", &config.train), ("test", &config.test)] {
            if let Source::Archive(p) = source {
                let bytes = fs::read(p).map_err(|e| Error::io(p, e))?;
                inputs.insert(key.to_string(), sha256_hex(&bytes));
            }
        }
        let manifest = Manifest {
            tool: TOOL_NAME.into(),
            version: TOOL_VERSION.into(),
            command: command.into(),
            config: config.clone(),
            inputs,
            artifacts: self.artifacts,
        };
        write_file(&self.dir.join("manifest.json"), &json_pretty(&manifest)?)?;
        Ok(())
    }
}
