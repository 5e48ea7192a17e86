//! Command-line front end. `run` parses argv, merges an optional config
//! file under the flags, and maps each subcommand onto library calls.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::parser::ValueSource;
use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};

use crate::data::{load_any, normalize, synth_generate, write_any, DatasetManifest, SkeletonSequence, SplitKey};
use crate::error::{Error, Result};
use crate::frequency::{band_energies, map_partition, FrequencyAxis, FrequencyConfig};
use crate::model::{
    count_parameters, forward_sample, gradcheck_model, init_params, load_model, ModelConfig, OperatorMode,
};
use crate::training::{
    argmax, ensemble_fuse, evaluate, predict, prepare, train_loop, Example, Modality, ScheduleConfig, TrainConfig,
};
use crate::Tensor;

#[derive(Parser, Debug)]
#[command(name = "freqmix", version, about = "Frequency-aware mixed transformer for skeleton sequences")]
#[command(arg_required_else_help = true)]
struct Cli {
    /// Line-oriented key=value file; flags on the command line take precedence
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset with class-specific temporal frequencies
    GenerateSynth(SynthArgs),
    /// Train a model and checkpoint the best test accuracy
    Train(TrainArgs),
    /// Top-1 accuracy of a checkpoint on a dataset split
    Eval(EvalArgs),
    /// Finite-difference gradient check of the tiny model
    Gradcheck(GradcheckArgs),
    /// Per-joint low/high band energy of one sequence, as CSV
    InspectDct(InspectArgs),
    /// Parameter counts of the configured model and its earlier-style counterpart
    CountParams(CountArgs),
    /// Fuse per-stream score files and report the fused accuracy
    Ensemble(EnsembleArgs),
    /// Train over a range of partitions or operator pairs and tabulate test accuracy
    Sweep(SweepArgs),
    /// Write every attention map of a checkpoint on chosen samples as CSV matrices
    DumpAttention(DumpArgs),
}

#[derive(Args, Debug, Clone)]
struct SynthArgs {
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 250)]
    per_class: usize,
    #[arg(long, default_value_t = 25)]
    joints: usize,
    #[arg(long, default_value_t = 64)]
    frames: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
    /// Output path; `.skl`/`.bin` write SKL1, anything else JSONL
    #[arg(long, default_value = "synth.jsonl")]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum AxisArg {
    Temporal,
    Joint,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum OperatorArg {
    HighLow,
    Uniform,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum ModalityArg {
    Joint,
    Bone,
    JointMotion,
    BoneMotion,
}

impl From<ModalityArg> for Modality {
    fn from(m: ModalityArg) -> Modality {
        match m {
            ModalityArg::Joint => Modality::Joint,
            ModalityArg::Bone => Modality::Bone,
            ModalityArg::JointMotion => Modality::JointMotion,
            ModalityArg::BoneMotion => Modality::BoneMotion,
        }
    }
}

#[derive(Args, Debug, Clone)]
struct ModelArgs {
    #[arg(long, default_value_t = 36)]
    embed_channels: usize,
    #[arg(long, default_value_t = 18)]
    attn_dim: usize,
    #[arg(long, default_value_t = 2)]
    n_hfab: usize,
    #[arg(long, default_value_t = 2)]
    n_lfab: usize,
    #[arg(long, default_value_t = 1)]
    n_sab: usize,
    #[arg(long, default_value_t = 1)]
    n_tab: usize,
    /// Low/high split, quoted against 25 coefficients and rescaled to the transform axis
    #[arg(long, default_value_t = 13)]
    partition: usize,
    /// Low-band operator
    #[arg(long, default_value_t = 0.2)]
    ell: f64,
    /// High-band operator
    #[arg(long, default_value_t = 1.2)]
    high: f64,
    #[arg(long, value_enum, default_value_t = AxisArg::Temporal)]
    freq_axis: AxisArg,
    #[arg(long, value_enum, default_value_t = OperatorArg::HighLow)]
    operator: OperatorArg,
    /// Channel-transform groups in temporal attention
    #[arg(long, default_value_t = 4)]
    ct_groups: usize,
}

impl ModelArgs {
    fn config(
        &self,
        joints: usize,
        in_channels: usize,
        frames: usize,
        classes: usize,
        seed: u64,
    ) -> Result<ModelConfig> {
        let axis = match self.freq_axis {
            AxisArg::Temporal => FrequencyAxis::Temporal,
            AxisArg::Joint => FrequencyAxis::Joint,
        };
        let len = match axis {
            FrequencyAxis::Temporal => frames,
            FrequencyAxis::Joint => joints,
        };
        let cfg = ModelConfig {
            joints,
            in_channels,
            frames,
            embed_channels: self.embed_channels,
            attn_dim: self.attn_dim,
            n_hfab: self.n_hfab,
            n_lfab: self.n_lfab,
            n_sab: self.n_sab,
            n_tab: self.n_tab,
            num_classes: classes,
            freq: FrequencyConfig::new(map_partition(self.partition, len)?, self.ell, self.high, axis),
            ct_groups: self.ct_groups,
            seed,
            operator: match self.operator {
                OperatorArg::HighLow => OperatorMode::HighLow,
                OperatorArg::Uniform => OperatorMode::Uniform,
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Debug, Clone)]
struct OptimArgs {
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.1)]
    lr: f64,
    #[arg(long, default_value_t = 5)]
    warmup: usize,
    #[arg(long, value_delimiter = ',', default_value = "35,55,75")]
    decay_epochs: Vec<usize>,
    #[arg(long, default_value_t = 0.1)]
    decay_factor: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 0.0005)]
    weight_decay: f64,
    /// Also decay biases and embedding tables
    #[arg(long, default_value_t = false, action = clap::ArgAction::Set)]
    decay_all: bool,
    /// Seeds both the initial weights and the shuffling
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

impl OptimArgs {
    fn config(&self, checkpoint: Option<PathBuf>) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed: self.seed,
            schedule: ScheduleConfig {
                base_lr: self.lr,
                warmup_epochs: self.warmup,
                decay_epochs: self.decay_epochs.clone(),
                decay_factor: self.decay_factor,
            },
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            decay_all: self.decay_all,
            threads: self.threads.max(1),
            checkpoint,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum SplitKeyArg {
    Subject,
    View,
}

#[derive(Args, Debug, Clone)]
struct DataArgs {
    /// Dataset file (JSONL or SKL1); the synthetic default dataset when omitted
    #[arg(long, value_name = "PATH")]
    data: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = SplitKeyArg::Subject)]
    split_key: SplitKeyArg,
    /// Subject or view ids held out for testing
    #[arg(long, value_delimiter = ',', default_value = "8,9")]
    test_ids: Vec<u32>,
    /// Frames every sequence is resampled to
    #[arg(long, default_value_t = 64)]
    frames: usize,
    #[arg(long, value_enum, default_value_t = ModalityArg::Joint)]
    modality: ModalityArg,
}

struct Splits {
    train: Vec<Example>,
    test: Vec<Example>,
    joints: usize,
    channels: usize,
    classes: usize,
}

impl DataArgs {
    fn sequences(&self, seed: u64) -> Result<Vec<SkeletonSequence>> {
        match &self.data {
            Some(p) => load_any(p),
            None => synth_generate(4, 250, 25, 64, seed, 0.05),
        }
    }

    fn splits(&self, seed: u64) -> Result<Splits> {
        let seqs = self.sequences(seed)?;
        let first = seqs.first().ok_or_else(|| Error::Contract("dataset is empty".into()))?;
        let (joints, channels) = (first.joints, first.channels);
        if let Some((i, s)) = seqs.iter().enumerate().find(|(_, s)| s.joints != joints || s.channels != channels) {
            return Err(Error::dim(
                "dataset",
                format!("sequence {i} is {}×{}, the first is {joints}×{channels}", s.joints, s.channels),
            ));
        }
        let classes = seqs.iter().map(|s| s.label).max().unwrap_or(0) + 1;
        let names = (0..classes).map(|k| format!("class{k}")).collect();
        let key = match self.split_key {
            SplitKeyArg::Subject => SplitKey::Subject,
            SplitKeyArg::View => SplitKey::View,
        };
        let manifest = DatasetManifest::build(&seqs, names, key, &self.test_ids)?;
        let pick = |idx: &[usize]| idx.iter().map(|&i| seqs[i].clone()).collect::<Vec<_>>();
        let modality = Modality::from(self.modality);
        Ok(Splits {
            train: prepare(&pick(&manifest.train), self.frames, modality)?,
            test: prepare(&pick(&manifest.test), self.frames, modality)?,
            joints,
            channels,
            classes,
        })
    }
}

#[derive(Args, Debug, Clone)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    optim: OptimArgs,
    /// Checkpoint path for the best test accuracy
    #[arg(long, default_value = "model.fmv2")]
    out: PathBuf,
    /// Also write the per-epoch metric lines here
    #[arg(long, value_name = "PATH")]
    metrics: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    Train,
    Test,
    All,
}

#[derive(Args, Debug, Clone)]
struct EvalArgs {
    #[arg(long, default_value = "model.fmv2")]
    model: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
    /// Seed of the synthetic default dataset when no data file is given
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Write per-sample scores as CSV for `ensemble`
    #[arg(long, value_name = "PATH")]
    scores: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Args, Debug, Clone)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-5)]
    eps: f64,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    /// Samples in the probe batch
    #[arg(long, default_value_t = 2)]
    batch: usize,
    /// Entries probed per parameter tensor; 0 probes all
    #[arg(long, default_value_t = 0)]
    per_tensor: usize,
}

#[derive(Args, Debug, Clone)]
struct InspectArgs {
    #[arg(long, value_name = "PATH")]
    data: PathBuf,
    /// Sequence index within the file
    #[arg(long, default_value_t = 0)]
    index: usize,
    #[arg(long, default_value_t = 64)]
    frames: usize,
    /// Low/high split, quoted against 25 coefficients
    #[arg(long, default_value_t = 13)]
    partition: usize,
}

#[derive(Args, Debug, Clone)]
struct CountArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 25)]
    joints: usize,
    #[arg(long, default_value_t = 3)]
    in_channels: usize,
    #[arg(long, default_value_t = 64)]
    frames: usize,
    #[arg(long, default_value_t = 4)]
    classes: usize,
}

#[derive(Args, Debug, Clone)]
struct EnsembleArgs {
    /// Score CSVs written by `eval --scores`, one per stream
    #[arg(long, value_delimiter = ',', required = true)]
    scores: Vec<PathBuf>,
    /// Stream weights; all ones when omitted
    #[arg(long, value_delimiter = ',')]
    weights: Vec<f64>,
    /// Write `index,prediction,label` rows here
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum SweepMode {
    Partition,
    Operators,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum GridArg {
    /// i-th ell with i-th h
    Zip,
    /// every ell with every h
    Product,
}

#[derive(Args, Debug, Clone)]
struct SweepArgs {
    #[arg(long, value_enum, default_value_t = SweepMode::Partition)]
    mode: SweepMode,
    #[arg(long, value_delimiter = ',', default_value = "1,3,5,7,9,11,13,15,17")]
    partitions: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9")]
    ells: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "1.1,1.2,1.3,1.4,1.5,1.6,1.7,1.8,1.9")]
    highs: Vec<f64>,
    #[arg(long, value_enum, default_value_t = GridArg::Zip)]
    grid: GridArg,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    optim: OptimArgs,
    /// CSV table path; stdout when omitted
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
struct DumpArgs {
    #[arg(long, default_value = "model.fmv2")]
    model: PathBuf,
    #[arg(long, value_name = "PATH")]
    data: PathBuf,
    /// Sequence indices within the file
    #[arg(long, value_delimiter = ',', default_value = "0")]
    samples: Vec<usize>,
    #[arg(long, value_enum, default_value_t = ModalityArg::Joint)]
    modality: ModalityArg,
    #[arg(long, default_value = "attention")]
    out_dir: PathBuf,
}

/// Parse `argv` (program name first), run, and return the exit code:
/// 0 on success, 1 on a runtime failure, 2 on a usage error.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match parse(&argv) {
        Ok(cli) => cli,
        Err(Parsed::Clap(e)) => {
            let _ = e.print();
            return e.exit_code();
        }
        Err(Parsed::Config(msg)) => {
            eprintln!("error: {msg}");
            eprintln!("{}", Cli::command().render_usage());
            return 2;
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

enum Parsed {
    Clap(clap::Error),
    Config(String),
}

// Parse once to find the subcommand and the config file, then append every
// file entry the command line did not set and parse again.
fn parse(argv: &[OsString]) -> std::result::Result<Cli, Parsed> {
    let cmd = Cli::command();
    let matches = cmd.clone().try_get_matches_from(argv).map_err(Parsed::Clap)?;
    let Some(path) = matches.get_one::<PathBuf>("config").cloned() else {
        return Cli::from_arg_matches(&matches).map_err(Parsed::Clap);
    };
    let (sub_name, sub_matches) = matches.subcommand().expect("a subcommand is required");
    let sub_cmd = cmd.find_subcommand(sub_name).expect("parsed subcommand exists");
    let text = fs::read_to_string(&path).map_err(|e| Parsed::Config(format!("{}: {e}", path.display())))?;
    let mut extra = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Parsed::Config(format!("{}:{}: expected key=value", path.display(), n + 1)))?;
        let id = key.trim().trim_start_matches("--").replace('-', "_");
        if id == "config" || !sub_cmd.get_arguments().any(|a| a.get_id().as_str() == id) {
            return Err(Parsed::Config(format!(
                "{}:{}: {sub_name} has no option {:?}",
                path.display(),
                n + 1,
                key.trim()
            )));
        }
        if sub_matches.value_source(&id) != Some(ValueSource::CommandLine) {
            extra.push(OsString::from(format!("--{}={}", id.replace('_', "-"), value.trim())));
        }
    }
    let mut full = argv.to_vec();
    full.extend(extra);
    let matches = cmd.try_get_matches_from(&full).map_err(Parsed::Clap)?;
    Cli::from_arg_matches(&matches).map_err(Parsed::Clap)
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::GenerateSynth(a) => generate_synth(&a),
        Command::Train(a) => train(&a),
        Command::Eval(a) => eval(&a),
        Command::Gradcheck(a) => gradcheck(&a),
        Command::InspectDct(a) => inspect_dct(&a),
        Command::CountParams(a) => count_params(&a),
        Command::Ensemble(a) => ensemble(&a),
        Command::Sweep(a) => sweep(&a),
        Command::DumpAttention(a) => dump_attention(&a),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn generate_synth(a: &SynthArgs) -> Result<()> {
    let seqs = synth_generate(a.classes, a.per_class, a.joints, a.frames, a.seed, a.noise)?;
    write_any(&a.out, &seqs)?;
    println!("wrote {} sequences to {}", seqs.len(), a.out.display());
    Ok(())
}

fn train(a: &TrainArgs) -> Result<()> {
    let s = a.data.splits(a.optim.seed)?;
    let mc = a.model.config(s.joints, s.channels, a.data.frames, s.classes, a.optim.seed)?;
    let tc = a.optim.config(Some(a.out.clone()));
    let mut log = String::new();
    let outcome = train_loop(&s.train, &s.test, &mc, &tc, |m| {
        let line = m.line();
        println!("{line}");
        log.push_str(&line);
        log.push('\n');
    })?;
    if let Some(p) = &a.metrics {
        write_text(p, &log)?;
    }
    match (outcome.best_epoch, outcome.metrics.last()) {
        (Some(e), _) => println!(
            "best_epoch={e} best_test_acc={:.4} checkpoint={}",
            outcome.metrics[e].test_acc.unwrap_or(0.0),
            a.out.display()
        ),
        (None, _) => println!("checkpoint={}", a.out.display()),
    }
    Ok(())
}

fn eval(a: &EvalArgs) -> Result<()> {
    let (mc, params) = load_model(&a.model)?;
    let s = a.data.splits(a.seed)?;
    let examples: Vec<Example> = match a.split {
        SplitArg::Train => s.train,
        SplitArg::Test => s.test,
        SplitArg::All => s.train.into_iter().chain(s.test).collect(),
    };
    if examples.is_empty() {
        return Err(Error::Contract("the selected split is empty".into()));
    }
    let params = params.detached();
    let scores = predict(&params, &mc, &examples, a.threads)?;
    let labels: Vec<usize> = examples.iter().map(|e| e.label).collect();
    if let Some(p) = &a.scores {
        write_text(p, &scores_csv(&scores, &labels))?;
    }
    let acc = crate::training::top1_accuracy(&scores, &labels)?;
    println!("accuracy={acc:.4} samples={}", examples.len());
    Ok(())
}

fn scores_csv(scores: &[Vec<f64>], labels: &[usize]) -> String {
    let k = scores.first().map_or(0, Vec::len);
    let mut out = String::from("label");
    for c in 0..k {
        let _ = write!(out, ",score_{c}");
    }
    out.push('\n');
    for (row, label) in scores.iter().zip(labels) {
        let _ = write!(out, "{label}");
        for v in row {
            // shortest round-trip form, so fusing the files is exact
            let _ = write!(out, ",{v:?}");
        }
        out.push('\n');
    }
    out
}

fn read_scores(path: &Path) -> Result<(Vec<usize>, Vec<Vec<f64>>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let parse_err =
        |line: usize, column: usize, message: String| Error::Parse { path: path.to_path_buf(), line, column, message };
    let (mut labels, mut rows) = (Vec::new(), Vec::new());
    for (n, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let label = fields.next().unwrap_or("");
        labels.push(label.trim().parse().map_err(|e| parse_err(n + 1, 1, format!("label {label:?}: {e}")))?);
        let row = fields
            .enumerate()
            .map(|(i, f)| f.trim().parse::<f64>().map_err(|e| parse_err(n + 1, i + 2, format!("score {f:?}: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    Ok((labels, rows))
}

fn gradcheck(a: &GradcheckArgs) -> Result<()> {
    let cfg = ModelConfig::tiny();
    let report = gradcheck_model(&cfg, a.seed, a.batch, a.eps, a.tol, a.per_tensor)?;
    let mut worst: Vec<(String, f64, usize)> = Vec::new();
    for e in &report.entries {
        match worst.last_mut() {
            Some((name, err, n)) if *name == e.param => {
                *err = err.max(e.rel_error);
                *n += 1;
            }
            _ => worst.push((e.param.clone(), e.rel_error, 1)),
        }
    }
    for (name, err, n) in &worst {
        println!("{name}: entries={n} max_rel_error={err:.3e}");
    }
    let failures = report.failures().count();
    println!(
        "checked={} max_rel_error={:.3e} tol={:e} failures={failures}",
        report.entries.len(),
        report.max_rel_error(),
        report.tol
    );
    if failures > 0 {
        return Err(Error::Contract(format!("{failures} gradient entries exceed tolerance {}", a.tol)));
    }
    Ok(())
}

fn inspect_dct(a: &InspectArgs) -> Result<()> {
    let seqs = load_any(&a.data)?;
    let s = seqs
        .get(a.index)
        .ok_or_else(|| Error::Contract(format!("index {} but the file holds {} sequences", a.index, seqs.len())))?;
    let x = normalize(s, a.frames)?.tensor;
    let partition = map_partition(a.partition, a.frames)?;
    let mut out = String::from("joint_index,low_band_energy,high_band_energy,ratio\n");
    for b in band_energies(x.data(), s.joints, s.channels, a.frames, partition)? {
        let _ = writeln!(out, "{},{:.6e},{:.6e},{:.6}", b.joint, b.low, b.high, b.ratio());
    }
    print!("{out}");
    Ok(())
}

// Rows of the last axis; leading axes become blank-line separated blocks.
fn matrix_csv(t: &Tensor) -> String {
    let cols = t.shape().last().copied().unwrap_or(1).max(1);
    let rows_per_block = if t.rank() >= 2 { t.shape()[t.rank() - 2] } else { 1 };
    let mut out = String::new();
    for (r, row) in t.data().chunks(cols).enumerate() {
        if r > 0 && r % rows_per_block == 0 {
            out.push('\n');
        }
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.9e}")).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

fn dump_attention(a: &DumpArgs) -> Result<()> {
    let (mc, params) = load_model(&a.model)?;
    let params = params.detached();
    let seqs = load_any(&a.data)?;
    fs::create_dir_all(&a.out_dir).map_err(|e| Error::io(&a.out_dir, e))?;
    let mut files = 0;
    for &i in &a.samples {
        let s = seqs
            .get(i)
            .ok_or_else(|| Error::Contract(format!("sample {i} but the file holds {} sequences", seqs.len())))?;
        let x = &prepare(std::slice::from_ref(s), mc.frames, Modality::from(a.modality))?[0].x;
        let trace = forward_sample(x, &params, &mc)?;
        let mut maps: Vec<(String, &Tensor)> = Vec::new();
        for (b, m) in &trace.branch_maps {
            maps.push((format!("{}_self", b.name()), &m.self_map));
            maps.push((format!("{}_mix", b.name()), &m.mix_map));
            maps.push((format!("{}_fused", b.name()), &m.fused));
        }
        for (k, t) in trace.temporal_maps.iter().enumerate() {
            maps.push((format!("tab{k}"), t));
        }
        for (name, t) in maps {
            write_text(&a.out_dir.join(format!("sample{i}_{name}.csv")), &matrix_csv(t))?;
            files += 1;
        }
    }
    println!("wrote {files} maps to {}", a.out_dir.display());
    Ok(())
}

fn count_params(a: &CountArgs) -> Result<()> {
    let v2 = a.model.config(a.joints, a.in_channels, a.frames, a.classes, 0)?;
    let v1 = v2.v1_style();
    let (n2, n1) = (count_parameters(&v2), count_parameters(&v1));
    let (e2, e1) = (init_params(&v2, 0)?.num_parameters(), init_params(&v1, 0)?.num_parameters());
    if (n2, n1) != (e2, e1) {
        return Err(Error::Contract(format!("closed-form counts {n2}/{n1} disagree with enumeration {e2}/{e1}")));
    }
    println!("v2_parameters={n2}");
    println!("v1_style_parameters={n1}");
    println!("ratio={:.4}", n2 as f64 / n1 as f64);
    Ok(())
}

fn ensemble(a: &EnsembleArgs) -> Result<()> {
    let mut labels: Option<Vec<usize>> = None;
    let mut sets = Vec::new();
    for p in &a.scores {
        let (l, rows) = read_scores(p)?;
        match &labels {
            Some(prev) if *prev != l => {
                return Err(Error::Contract(format!("{} lists different labels from the first file", p.display())))
            }
            Some(_) => {}
            None => labels = Some(l),
        }
        sets.push(rows);
    }
    let labels = labels.unwrap_or_default();
    let weights = if a.weights.is_empty() { vec![1.0; sets.len()] } else { a.weights.clone() };
    let preds = ensemble_fuse(&sets, &weights)?;
    if let Some(p) = &a.out {
        let mut out = String::from("index,prediction,label\n");
        for (i, (pr, l)) in preds.iter().zip(&labels).enumerate() {
            let _ = writeln!(out, "{i},{pr},{l}");
        }
        write_text(p, &out)?;
    }
    let hits = preds.iter().zip(&labels).filter(|(p, l)| p == l).count();
    let per_stream: Vec<String> = sets
        .iter()
        .map(|rows| {
            let h = rows.iter().zip(&labels).filter(|(r, &l)| argmax(r) == l).count();
            format!("{:.4}", h as f64 / labels.len().max(1) as f64)
        })
        .collect();
    println!("streams={} stream_accuracy={}", sets.len(), per_stream.join(","));
    println!("fused_accuracy={:.4} samples={}", hits as f64 / labels.len().max(1) as f64, labels.len());
    Ok(())
}

fn sweep(a: &SweepArgs) -> Result<()> {
    let s = a.data.splits(a.optim.seed)?;
    if s.test.is_empty() {
        return Err(Error::Contract("sweep needs a non-empty test split".into()));
    }
    let tc = a.optim.config(None);
    let run_one = |m: &ModelArgs| -> Result<Option<f64>> {
        let mc = match m.config(s.joints, s.channels, a.data.frames, s.classes, a.optim.seed) {
            Ok(mc) => mc,
            Err(Error::Config(msg)) => {
                eprintln!("skipping: {msg}");
                return Ok(None);
            }
            Err(e) => return Err(e),
        };
        let out = train_loop(&s.train, &s.test, &mc, &tc, |_| {})?;
        Ok(Some(evaluate(&out.params.detached(), &mc, &s.test, tc.threads)?))
    };
    let fmt = |acc: Option<f64>| acc.map_or("invalid".to_string(), |v| format!("{v:.4}"));
    let mut table = String::new();
    match a.mode {
        SweepMode::Partition => {
            table.push_str("partition,test_accuracy\n");
            for &n in &a.partitions {
                let acc = run_one(&ModelArgs { partition: n, ..a.model.clone() })?;
                let _ = writeln!(table, "{n},{}", fmt(acc));
            }
        }
        SweepMode::Operators => {
            table.push_str("ell,h,test_accuracy\n");
            let pairs: Vec<(f64, f64)> = match a.grid {
                GridArg::Zip => {
                    if a.ells.len() != a.highs.len() {
                        return Err(Error::Config(format!(
                            "zip grid needs as many ell values ({}) as h values ({})",
                            a.ells.len(),
                            a.highs.len()
                        )));
                    }
                    a.ells.iter().copied().zip(a.highs.iter().copied()).collect()
                }
                GridArg::Product => a.ells.iter().flat_map(|&l| a.highs.iter().map(move |&h| (l, h))).collect(),
            };
            for (ell, high) in pairs {
                let acc = run_one(&ModelArgs { ell, high, ..a.model.clone() })?;
                let _ = writeln!(table, "{ell},{high},{}", fmt(acc));
            }
        }
    }
    match &a.out {
        Some(p) => write_text(p, &table),
        None => {
            print!("{table}");
            Ok(())
        }
    }
}
