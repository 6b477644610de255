//! Command implementations behind the `fastflow` binary.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde::{Deserialize, Serialize};

use fastflow_core::augment::{augment_flow, simulate_disorder, stream_rng, AugmentMode, AugmentParams, DisorderParams};
use fastflow_core::eval::{
    cdf_csv, evaluate_system, fixed_input_baseline, make_splits, parallel_map, reports_csv, summarize, summary_csv,
    BaselineConfig, MetricsReport, SplitSpec, SummaryRow, TestDisorder,
};
use fastflow_core::pipeline::{augment_training_set, train_classifier, train_system, SystemConfig};
use fastflow_core::representation::Granularity;
use fastflow_core::selection::{run_flow, FlowSystem, FusionMode};
use fastflow_core::synth::{generate_dataset, SynthConfig};
use fastflow_core::trace::{read_flows, write_trace, FlowTrace};
use fastflow_core::{load_checkpoint, save_checkpoint};

pub const PACKET_MODEL: &str = "packet.ffm";
pub const SLOT_MODEL: &str = "slot.ffm";
pub const RUN_CONFIG: &str = "run_config.json";
pub const TEST_SET: &str = "test.jsonl";

/// Everything that determines a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub workers: usize,
    pub system: SystemConfig,
    pub split: SplitSpec,
    pub disorder: DisorderParams,
    pub synth: SynthConfig,
    pub baseline: BaselineConfig,
    /// Fixed input lengths for the packet and slot baselines.
    pub baseline_lengths: Vec<usize>,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            workers: 1,
            system: SystemConfig::default(),
            split: SplitSpec::default(),
            disorder: DisorderParams::default(),
            synth: SynthConfig::default(),
            baseline: BaselineConfig::default(),
            baseline_lengths: vec![5],
            paths: Paths::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub input: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub models: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("invalid config {}", path.display()))
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.system;
        s.packet_decider.validate().context("system.packet_decider")?;
        s.slot_decider.validate().context("system.slot_decider")?;
        s.rewards.validate().context("system.rewards")?;
        s.train.validate().context("system.train")?;
        s.selection.validate().context("system.selection")?;
        if s.features.slot_width.is_nan() || s.features.slot_width <= 0.0 {
            bail!("system.features.slot_width must be positive");
        }
        if s.features.mtu == 0 {
            bail!("system.features.mtu must be positive");
        }
        if self.workers == 0 {
            bail!("workers must be at least 1");
        }
        Ok(())
    }

    fn write_snapshot(&self, dir: &Path) -> Result<()> {
        write_json(&dir.join(RUN_CONFIG), self)
    }
}

#[derive(Parser, Debug)]
#[command(name = "fastflow", version, about = "Early flow classification from packet and slot sequences")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// JSON run configuration; flags take precedence over it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    #[arg(long, global = true)]
    pub input: Option<PathBuf>,
    #[arg(long, global = true)]
    pub output: Option<PathBuf>,
    #[arg(long, global = true)]
    pub models: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Parse a packet trace and write it back grouped and normalized.
    Ingest,
    /// Write an augmented or disordered copy of a trace.
    Augment {
        #[arg(long, value_enum)]
        mode: AugmentKind,
    },
    /// Generate the synthetic labeled dataset.
    Synth {
        #[arg(long)]
        flows_per_class: Option<usize>,
    },
    /// Train packet and/or slot classifiers on the first split.
    Train {
        #[arg(long, value_enum, default_value_t = GranularityArg::Both)]
        granularity: GranularityArg,
    },
    /// Evaluate trained classifiers on a labeled trace.
    Evaluate {
        #[arg(long, value_enum, default_value_t = DisorderArg::None)]
        disorder: DisorderArg,
    },
    /// Classify every flow of a trace, one JSON line per flow.
    Classify,
    /// Run every split iteration with baselines and write summary tables.
    Experiment,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum AugmentKind {
    Strong,
    Weak,
    Disorder,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum GranularityArg {
    Packet,
    Slot,
    Both,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum DisorderArg {
    Default,
    None,
}

/// Resolves the run configuration: flags over file over defaults.
pub fn resolve_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(w) = common.workers {
        cfg.workers = w;
    }
    if common.input.is_some() {
        cfg.paths.input.clone_from(&common.input);
    }
    if common.output.is_some() {
        cfg.paths.output.clone_from(&common.output);
    }
    if common.models.is_some() {
        cfg.paths.models.clone_from(&common.models);
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn run(cli: Cli) -> Result<()> {
    let cfg = resolve_config(&cli.common)?;
    match cli.command {
        Command::Ingest => cmd_ingest(&cfg),
        Command::Augment { mode } => cmd_augment(&cfg, mode),
        Command::Synth { flows_per_class } => {
            let mut cfg = cfg;
            if let Some(n) = flows_per_class {
                cfg.synth.flows_per_class = n;
            }
            cmd_synth(&cfg)
        }
        Command::Train { granularity } => cmd_train(&cfg, granularity),
        Command::Evaluate { disorder } => cmd_evaluate(&cfg, disorder),
        Command::Classify => cmd_classify(&cfg),
        Command::Experiment => cmd_experiment(&cfg),
    }
}

fn required<'a>(path: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    match path {
        Some(p) => Ok(p),
        None => bail!("missing --{flag} (or paths.{flag} in the config)"),
    }
}

pub fn load_flows(path: &Path, mtu: u32) -> Result<Vec<FlowTrace>> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    read_flows(BufReader::new(file), mtu).with_context(|| format!("reading {}", path.display()))
}

pub fn save_flows(path: &Path, flows: &[FlowTrace]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    write_trace(flows, BufWriter::new(file))?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn output_dir(cfg: &RunConfig) -> Result<&Path> {
    let dir = required(&cfg.paths.output, "output")?;
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

pub fn cmd_ingest(cfg: &RunConfig) -> Result<()> {
    let flows = load_flows(required(&cfg.paths.input, "input")?, cfg.system.features.mtu)?;
    save_flows(required(&cfg.paths.output, "output")?, &flows)?;
    info!("ingested {} flows", flows.len());
    Ok(())
}

pub fn cmd_augment(cfg: &RunConfig, kind: AugmentKind) -> Result<()> {
    let mtu = cfg.system.features.mtu;
    let flows = load_flows(required(&cfg.paths.input, "input")?, mtu)?;
    let out: Vec<FlowTrace> = flows
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let mut rng = stream_rng(cfg.seed, i as u64);
            match kind {
                AugmentKind::Strong => augment_flow(f, &AugmentParams { mtu, ..AugmentParams::new(AugmentMode::StrongUnknown) }, &mut rng),
                AugmentKind::Weak => augment_flow(f, &AugmentParams { mtu, ..AugmentParams::new(AugmentMode::WeakBalance) }, &mut rng),
                AugmentKind::Disorder => simulate_disorder(f, &cfg.disorder, &mut rng),
            }
        })
        .collect();
    save_flows(required(&cfg.paths.output, "output")?, &out)
}

pub fn cmd_synth(cfg: &RunConfig) -> Result<()> {
    let flows = generate_dataset(&cfg.synth, cfg.seed);
    save_flows(required(&cfg.paths.output, "output")?, &flows)?;
    info!("wrote {} synthetic flows", flows.len());
    Ok(())
}

pub fn cmd_train(cfg: &RunConfig, granularity: GranularityArg) -> Result<()> {
    let flows = load_flows(required(&cfg.paths.input, "input")?, cfg.system.features.mtu)?;
    let dir = output_dir(cfg)?;
    let spec = SplitSpec {
        iteration_count: 1,
        ..cfg.split.clone()
    };
    let split = make_splits(&flows, &spec)?.remove(0);
    info!("excluded from training: {:?}", split.excluded);
    save_flows(&dir.join(TEST_SET), &split.test)?;
    let grans: Vec<Granularity> = match granularity {
        GranularityArg::Packet => vec![Granularity::Packet],
        GranularityArg::Slot => vec![Granularity::Slot],
        GranularityArg::Both => vec![Granularity::Packet, Granularity::Slot],
    };
    let augmented = augment_training_set(&split.train, &cfg.system.augment, cfg.system.features.mtu, cfg.seed);
    let trained = parallel_map(&grans, cfg.workers, |_, &g| {
        train_classifier(g, &split.train, &augmented, &cfg.system, model_seed(cfg.seed, g))
    });
    for (g, result) in grans.iter().zip(trained) {
        let (ckpt, log) = result?;
        let name = match g {
            Granularity::Packet => PACKET_MODEL,
            Granularity::Slot => SLOT_MODEL,
        };
        save_checkpoint(&ckpt, &dir.join(name))?;
        write_json(&dir.join(format!("{}_training.json", g.as_str())), &log)?;
        println!("{} threshold {:.6}", g.as_str(), ckpt.threshold.unwrap_or(f64::NAN));
    }
    cfg.write_snapshot(dir)
}

/// Per-granularity training seed, shared with [`train_system`].
fn model_seed(seed: u64, g: Granularity) -> u64 {
    match g {
        Granularity::Packet => seed.wrapping_add(1),
        Granularity::Slot => seed.wrapping_add(2),
    }
}

pub fn load_system(cfg: &RunConfig) -> Result<FlowSystem> {
    let dir = required(&cfg.paths.models, "models")?;
    let load = |name: &str| load_checkpoint(&dir.join(name)).with_context(|| format!("loading {}", dir.join(name).display()));
    Ok(FlowSystem::new(load(PACKET_MODEL)?, load(SLOT_MODEL)?, cfg.system.selection)?)
}

/// Fused, packet-only and slot-only reports, each clean and optionally
/// under disorder.
pub fn evaluate_all(system: &FlowSystem, test: &[FlowTrace], disorder: Option<&TestDisorder>, workers: usize) -> Result<Vec<MetricsReport>> {
    let mut reports = Vec::new();
    for (name, mode) in [
        ("fastflow", FusionMode::Fused),
        ("packet-only", FusionMode::PacketOnly),
        ("slot-only", FusionMode::SlotOnly),
    ] {
        reports.push(evaluate_system(name, system, test, None, mode, workers)?);
        if let Some(d) = disorder {
            reports.push(evaluate_system(&format!("{name}+disorder"), system, test, Some(d), mode, workers)?);
        }
    }
    Ok(reports)
}

fn write_reports(dir: &Path, reports: &[MetricsReport]) -> Result<()> {
    write_json(&dir.join("report.json"), &reports)?;
    fs::write(dir.join("report.csv"), reports_csv(reports))?;
    for r in reports {
        fs::write(dir.join(format!("cdf_{}.csv", r.method)), cdf_csv(r))?;
    }
    Ok(())
}

pub fn cmd_evaluate(cfg: &RunConfig, disorder: DisorderArg) -> Result<()> {
    let system = load_system(cfg)?;
    let input = match &cfg.paths.input {
        Some(p) => p.clone(),
        None => required(&cfg.paths.models, "models")?.join(TEST_SET),
    };
    let test = load_flows(&input, cfg.system.features.mtu)?;
    let dir = output_dir(cfg)?;
    let disorder = match disorder {
        DisorderArg::Default => Some(TestDisorder {
            params: cfg.disorder,
            seed: cfg.seed,
        }),
        DisorderArg::None => None,
    };
    let reports = evaluate_all(&system, &test, disorder.as_ref(), cfg.workers)?;
    for r in &reports {
        println!(
            "{:<24} acc {:6.2}  f1 {:6.2}  packets {:5.2}  time {:.3}s",
            r.method, r.accuracy, r.macro_f1, r.packets_mean, r.time_mean
        );
    }
    write_reports(dir, &reports)?;
    cfg.write_snapshot(dir)
}

#[derive(Serialize)]
struct ClassifyRecord<'a> {
    flow_key: String,
    label: &'a str,
    confidence: f64,
    source: &'a str,
    decided_at: f64,
    packets_consumed: usize,
}

pub fn cmd_classify(cfg: &RunConfig) -> Result<()> {
    let system = load_system(cfg)?;
    let flows = load_flows(required(&cfg.paths.input, "input")?, cfg.system.features.mtu)?;
    let results = parallel_map(&flows, cfg.workers, |_, f| run_flow(f, &system, FusionMode::Fused));
    let mut out: Box<dyn Write> = match &cfg.paths.output {
        Some(p) => Box::new(BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?)),
        None => Box::new(BufWriter::new(std::io::stdout().lock())),
    };
    for (f, r) in flows.iter().zip(results) {
        let r = r?;
        let rec = ClassifyRecord {
            flow_key: f.key.to_string(),
            label: &r.label,
            confidence: r.confidence,
            source: r.source.as_str(),
            decided_at: r.decided_at,
            packets_consumed: r.packets_consumed,
        };
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn cmd_experiment(cfg: &RunConfig) -> Result<()> {
    let flows = load_flows(required(&cfg.paths.input, "input")?, cfg.system.features.mtu)?;
    let dir = output_dir(cfg)?;
    let splits = make_splits(&flows, &cfg.split)?;
    let mut all: Vec<MetricsReport> = Vec::new();
    for split in &splits {
        info!("iteration {}: excluding {:?}", split.iteration, split.excluded);
        let seed = cfg.seed.wrapping_add(1000 * split.iteration as u64);
        let trained = train_system(&split.train, &cfg.system, seed, cfg.workers)?;
        let disorder = TestDisorder {
            params: cfg.disorder,
            seed,
        };
        let mut reports = evaluate_all(&trained.system, &split.test, Some(&disorder), cfg.workers)?;
        for &n in &cfg.baseline_lengths {
            for g in [Granularity::Packet, Granularity::Slot] {
                reports.push(fixed_input_baseline(g, n, &split.train, &split.test, &cfg.system.features, &cfg.baseline, seed)?);
            }
        }
        let iter_dir = dir.join(format!("iteration_{:02}", split.iteration));
        fs::create_dir_all(&iter_dir)?;
        write_reports(&iter_dir, &reports)?;
        all.extend(reports);
    }
    let mut methods: Vec<String> = Vec::new();
    for r in &all {
        if !methods.contains(&r.method) {
            methods.push(r.method.clone());
        }
    }
    let rows: Vec<SummaryRow> = methods
        .iter()
        .map(|m| summarize(m, &all.iter().filter(|r| &r.method == m).collect::<Vec<_>>()))
        .collect();
    write_json(&dir.join("summary.json"), &rows)?;
    fs::write(dir.join("summary.csv"), summary_csv(&rows))?;
    print!("{}", summary_csv(&rows));
    cfg.write_snapshot(dir)
}

/// Reads a line-delimited JSON file into values, for tests and tooling.
pub fn read_json_lines(path: &Path) -> Result<Vec<serde_json::Value>> {
    BufReader::new(File::open(path)?)
        .lines()
        .filter(|l| l.as_ref().map_or(true, |l| !l.trim().is_empty()))
        .map(|l| Ok(serde_json::from_str(&l?)?))
        .collect()
}
