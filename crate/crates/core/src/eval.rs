//! Split protocols, metrics and report export.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{simulate_disorder, stream_rng, DisorderParams};
use crate::error::{Error, Result};
use crate::model::grad::{backward_batch, forward_batch, Injection};
use crate::model::{argmax, cast, soft_confidence, SeqClassifier};
use crate::optim::Adam;
use crate::representation::{featurize, FeatureConfig, Granularity};
use crate::selection::{run_flow, FlowSystem, FusionMode};
use crate::trace::{FlowTrace, UNKNOWN_LABEL};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    pub train_fraction: f64,
    /// Classes held out of training in every iteration. When empty, one
    /// class per iteration is held out in rotation.
    pub excluded_types: Vec<String>,
    pub iteration_count: usize,
    pub seed: u64,
    /// Split flows already labeled unknown between train and test, so they
    /// supplement the pseudo-unknowns. When false they are test-only.
    pub train_on_labeled_unknowns: bool,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train_fraction: 0.7,
            excluded_types: Vec::new(),
            iteration_count: 10,
            seed: 0,
            train_on_labeled_unknowns: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub iteration: usize,
    pub excluded: Vec<String>,
    pub train: Vec<FlowTrace>,
    /// Test flows; excluded classes are relabeled unknown.
    pub test: Vec<FlowTrace>,
}

/// Builds one train/test partition per iteration. Unlabeled flows are
/// test-only and scored as unknown.
pub fn make_splits(flows: &[FlowTrace], spec: &SplitSpec) -> Result<Vec<Split>> {
    if !(spec.train_fraction > 0.0 && spec.train_fraction < 1.0) {
        return Err(Error::Config("train_fraction must lie in (0, 1)".into()));
    }
    let mut by_class: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    let mut always_test = Vec::new();
    let mut labeled_unknown = Vec::new();
    for (i, f) in flows.iter().enumerate() {
        match f.label.as_deref() {
            Some(UNKNOWN_LABEL) if spec.train_on_labeled_unknowns => labeled_unknown.push(i),
            Some(l) if l != UNKNOWN_LABEL => by_class.entry(l).or_default().push(i),
            _ => always_test.push(i),
        }
    }
    if let Some((class, idx)) = by_class.iter().find(|(_, v)| v.len() < 2) {
        return Err(Error::TooFewFlows {
            class: class.to_string(),
            count: idx.len(),
        });
    }
    let classes: Vec<&str> = by_class.keys().copied().collect();

    let mut splits = Vec::with_capacity(spec.iteration_count);
    for it in 0..spec.iteration_count {
        let excluded: BTreeSet<&str> = if spec.excluded_types.is_empty() {
            std::iter::once(classes[it % classes.len()]).collect()
        } else {
            spec.excluded_types.iter().map(String::as_str).collect()
        };
        let kept = classes.iter().filter(|c| !excluded.contains(*c)).count();
        if kept < 2 {
            return Err(Error::TooFewClasses(kept));
        }
        let mut rng = stream_rng(spec.seed, it as u64);
        let mut train_idx: Vec<usize> = Vec::new();
        let mut test_idx = always_test.clone();
        let split_group = |idx: &[usize], rng: &mut ChaCha8Rng, train: &mut Vec<usize>, test: &mut Vec<usize>| {
            let mut idx = idx.to_vec();
            idx.shuffle(rng);
            let n_train = ((idx.len() as f64 * spec.train_fraction).round() as usize).clamp(1, idx.len() - 1);
            train.extend(&idx[..n_train]);
            test.extend(&idx[n_train..]);
        };
        for (class, idx) in &by_class {
            if excluded.contains(class) {
                test_idx.extend(idx);
            } else {
                split_group(idx, &mut rng, &mut train_idx, &mut test_idx);
            }
        }
        if labeled_unknown.len() >= 2 {
            split_group(&labeled_unknown, &mut rng, &mut train_idx, &mut test_idx);
        } else {
            test_idx.extend(&labeled_unknown);
        }
        train_idx.sort_unstable();
        test_idx.sort_unstable();
        let test = test_idx
            .iter()
            .map(|&i| {
                let mut f = flows[i].clone();
                if f.label.as_deref().is_none_or(|l| excluded.contains(l)) {
                    f.label = Some(UNKNOWN_LABEL.to_string());
                }
                f
            })
            .collect();
        splits.push(Split {
            iteration: it,
            excluded: excluded.iter().map(|s| s.to_string()).collect(),
            train: train_idx.iter().map(|&i| flows[i].clone()).collect(),
            test,
        });
    }
    Ok(splits)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl ClassCounts {
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Unweighted mean of per-class F1, as a percent.
pub fn macro_f1(counts: &[ClassCounts]) -> f64 {
    assert!(!counts.is_empty(), "macro F1 needs at least one class");
    100.0 * counts.iter().map(ClassCounts::f1).sum::<f64>() / counts.len() as f64
}

/// Per-class counts over known-type flows. Predictions outside `classes`
/// (including unknown) are misses with no false positive.
pub fn class_counts(classes: &[String], pairs: &[(String, String)]) -> Vec<ClassCounts> {
    let mut counts = vec![ClassCounts::default(); classes.len()];
    let index = |l: &str| classes.iter().position(|c| c == l);
    for (truth, pred) in pairs {
        let Some(t) = index(truth) else { continue };
        if truth == pred {
            counts[t].tp += 1;
        } else {
            counts[t].fn_ += 1;
            if let Some(p) = index(pred) {
                counts[p].fp += 1;
            }
        }
    }
    counts
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

/// One test flow's outcome, kept for CDF export.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub truth: String,
    pub predicted: String,
    pub packets: usize,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub method: String,
    pub macro_f1: f64,
    pub accuracy: f64,
    pub packets_mean: f64,
    pub packets_std: f64,
    pub time_mean: f64,
    pub time_std: f64,
    pub time_p50: f64,
    pub time_p90: f64,
    /// Percent of true-unknown flows given a known label.
    pub unknown_fpr: Option<f64>,
    /// Percent of true-unknown flows labeled unknown.
    pub unknown_tpr: Option<f64>,
    pub known_flows: usize,
    pub unknown_flows: usize,
    pub per_class: Vec<ClassMetrics>,
    pub decisions: Vec<DecisionRecord>,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn percentile(values: &[f64], q: f64) -> f64 {
    crate::rl::nearest_rank(values, q).unwrap_or(0.0)
}

impl MetricsReport {
    /// Builds a report from per-flow outcomes. `report_unknown` is false for
    /// methods without an unknown class.
    pub fn from_decisions(method: &str, classes: &[String], decisions: Vec<DecisionRecord>, report_unknown: bool) -> Self {
        let known: Vec<&DecisionRecord> = decisions.iter().filter(|d| d.truth != UNKNOWN_LABEL).collect();
        let unknown: Vec<&DecisionRecord> = decisions.iter().filter(|d| d.truth == UNKNOWN_LABEL).collect();
        let pairs: Vec<(String, String)> = known.iter().map(|d| (d.truth.clone(), d.predicted.clone())).collect();
        let counts = class_counts(classes, &pairs);
        let correct = known.iter().filter(|d| d.truth == d.predicted).count();
        let packets: Vec<f64> = known.iter().map(|d| d.packets as f64).collect();
        let seconds: Vec<f64> = known.iter().map(|d| d.seconds).collect();
        let (packets_mean, packets_std) = mean_std(&packets);
        let (time_mean, time_std) = mean_std(&seconds);
        let unknown_hits = unknown.iter().filter(|d| d.predicted == UNKNOWN_LABEL).count();
        let (fpr, tpr) = if report_unknown && !unknown.is_empty() {
            let tpr = 100.0 * unknown_hits as f64 / unknown.len() as f64;
            (Some(100.0 - tpr), Some(tpr))
        } else {
            (None, None)
        };
        let per_class = classes
            .iter()
            .zip(&counts)
            .map(|(class, c)| ClassMetrics {
                class: class.clone(),
                precision: 100.0 * c.precision(),
                recall: 100.0 * c.recall(),
                f1: 100.0 * c.f1(),
                support: c.tp + c.fn_,
            })
            .collect();
        MetricsReport {
            method: method.to_string(),
            macro_f1: if classes.is_empty() { 0.0 } else { macro_f1(&counts) },
            accuracy: 100.0 * ratio(correct, known.len()),
            packets_mean,
            packets_std,
            time_mean,
            time_std,
            time_p50: percentile(&seconds, 0.5),
            time_p90: percentile(&seconds, 0.9),
            unknown_fpr: fpr,
            unknown_tpr: tpr,
            known_flows: known.len(),
            unknown_flows: unknown.len(),
            per_class,
            decisions,
        }
    }
}

/// Runs `f` over `items` on up to `workers` threads, keeping input order.
pub fn parallel_map<T: Sync, U: Send>(items: &[T], workers: usize, f: impl Fn(usize, &T) -> U + Sync) -> Vec<U> {
    let workers = workers.max(1).min(items.len().max(1));
    if workers == 1 {
        return items.iter().enumerate().map(|(i, x)| f(i, x)).collect();
    }
    let chunk = items.len().div_ceil(workers);
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .enumerate()
            .map(|(c, part)| {
                let f = &f;
                s.spawn(move || part.iter().enumerate().map(|(i, x)| f(c * chunk + i, x)).collect::<Vec<_>>())
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
    })
}

/// Disorder applied to test flows: parameters plus the seed of its RNG
/// streams (one per flow).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestDisorder {
    pub params: DisorderParams,
    pub seed: u64,
}

/// Perturbed copies of `flows`.
pub fn disordered(flows: &[FlowTrace], disorder: &TestDisorder) -> Vec<FlowTrace> {
    flows
        .iter()
        .enumerate()
        .map(|(i, f)| simulate_disorder(f, &disorder.params, &mut stream_rng(disorder.seed, i as u64)))
        .collect()
}

pub fn evaluate_system(
    method: &str,
    system: &FlowSystem,
    test: &[FlowTrace],
    disorder: Option<&TestDisorder>,
    mode: FusionMode,
    workers: usize,
) -> Result<MetricsReport> {
    let perturbed;
    let flows = match disorder {
        Some(d) => {
            perturbed = disordered(test, d);
            &perturbed
        }
        None => test,
    };
    let decisions = parallel_map(flows, workers, |_, f| {
        run_flow(f, system, mode).map(|sel| DecisionRecord {
            truth: truth_label(f, system.class_names()),
            predicted: sel.label,
            packets: sel.packets_consumed,
            seconds: sel.decided_at,
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(MetricsReport::from_decisions(method, system.class_names(), decisions, true))
}

fn truth_label(flow: &FlowTrace, classes: &[String]) -> String {
    match flow.label.as_deref() {
        Some(l) if classes.iter().any(|c| c == l) => l.to_string(),
        _ => UNKNOWN_LABEL.to_string(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    pub hidden_dim: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            hidden_dim: 128,
            learning_rate: 3e-3,
            epochs: 20,
            batch_size: 32,
        }
    }
}

/// Supervised recurrent classifier reading exactly `n` data points (or the
/// whole flow when shorter). Its unknown output is never trained or used.
pub fn train_fixed_input(
    granularity: Granularity,
    n: usize,
    train: &[FlowTrace],
    features: &FeatureConfig,
    cfg: &BaselineConfig,
    seed: u64,
) -> Result<SeqClassifier<f32>> {
    if n == 0 {
        return Err(Error::Config("fixed input length must be at least 1".into()));
    }
    let classes = crate::rl::TrainingSet::known_classes(train);
    if classes.len() < 2 {
        return Err(Error::TooFewClasses(classes.len()));
    }
    let data = crate::rl::TrainingSet::with_classes(train, classes.clone(), granularity, features, n)?;
    let items: Vec<_> = data.items.iter().filter(|i| i.label < classes.len() && !i.seq.is_empty()).collect();
    let k = classes.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = SeqClassifier::<f32>::init(granularity, cfg.hidden_dim, classes, &mut rng);
    let mut adam = Adam::new(&model, cfg.learning_rate);
    let mut order: Vec<usize> = (0..items.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let rows: Vec<&[Vec<f64>]> = chunk.iter().map(|&i| items[i].seq.rows.as_slice()).collect();
            let lens: Vec<usize> = rows.iter().map(|r| r.len()).collect();
            let fwd = forward_batch(&model, &rows, &lens);
            let scale = 1.0 / chunk.len() as f64;
            let injections: Vec<Injection<f32>> = chunk
                .iter()
                .enumerate()
                .map(|(row, &i)| {
                    let scores = fwd.scores(&model, row, lens[row]);
                    let p = soft_confidence(&scores[..k]);
                    let mut d = vec![0.0f32; k + 1];
                    for c in 0..k {
                        let target = if c == items[i].label { 1.0 } else { 0.0 };
                        d[c] = cast((p[c] - target) * scale);
                    }
                    Injection {
                        row,
                        step: lens[row],
                        d_scores: d,
                    }
                })
                .collect();
            let grads = backward_batch(&model, &fwd, &injections);
            adam.step(&mut model, &grads);
        }
    }
    Ok(model)
}

/// Evaluates a fixed-input classifier; cost columns report the data read.
pub fn evaluate_fixed_input(
    method: &str,
    model: &SeqClassifier<f32>,
    n: usize,
    test: &[FlowTrace],
    features: &FeatureConfig,
) -> Result<MetricsReport> {
    let k = model.num_classes();
    let mut decisions = Vec::with_capacity(test.len());
    for f in test {
        let seq = featurize(f, model.granularity, features, n)?;
        if seq.is_empty() {
            return Err(Error::EmptyFlow);
        }
        let mut session = crate::model::ClassifierSession::new(model, crate::model::DeciderConfig { t_unk: 0.5, c_unk: usize::MAX });
        let mut scores = Vec::new();
        for x in &seq.rows {
            scores = session.step_scores(x)?;
        }
        let last = seq.len() - 1;
        decisions.push(DecisionRecord {
            truth: truth_label(f, &model.class_names),
            predicted: model.label_of(argmax(&scores[..k])).to_string(),
            packets: seq.packets[last],
            seconds: seq.times[last],
        });
    }
    Ok(MetricsReport::from_decisions(method, &model.class_names, decisions, false))
}

pub fn fixed_input_baseline(
    granularity: Granularity,
    n: usize,
    train: &[FlowTrace],
    test: &[FlowTrace],
    features: &FeatureConfig,
    cfg: &BaselineConfig,
    seed: u64,
) -> Result<MetricsReport> {
    let model = train_fixed_input(granularity, n, train, features, cfg, seed)?;
    let prefix = match granularity {
        Granularity::Packet => "pkt",
        Granularity::Slot => "slot",
    };
    evaluate_fixed_input(&format!("{prefix}-{n}"), &model, n, test, features)
}

/// Mean and standard deviation of one metric across iterations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub iterations: usize,
    pub macro_f1: MeanStd,
    pub accuracy: MeanStd,
    pub packets: MeanStd,
    pub time: MeanStd,
    pub unknown_fpr: Option<MeanStd>,
    pub unknown_tpr: Option<MeanStd>,
}

/// Averages reports of the same method across iterations.
pub fn summarize(method: &str, reports: &[&MetricsReport]) -> SummaryRow {
    let stat = |f: &dyn Fn(&MetricsReport) -> f64| {
        let v: Vec<f64> = reports.iter().map(|r| f(r)).collect();
        let (mean, std) = mean_std(&v);
        MeanStd { mean, std }
    };
    let opt = |f: &dyn Fn(&MetricsReport) -> Option<f64>| {
        let v: Option<Vec<f64>> = reports.iter().map(|r| f(r)).collect();
        v.filter(|v| !v.is_empty()).map(|v| {
            let (mean, std) = mean_std(&v);
            MeanStd { mean, std }
        })
    };
    SummaryRow {
        method: method.to_string(),
        iterations: reports.len(),
        macro_f1: stat(&|r| r.macro_f1),
        accuracy: stat(&|r| r.accuracy),
        packets: stat(&|r| r.packets_mean),
        time: stat(&|r| r.time_mean),
        unknown_fpr: opt(&|r| r.unknown_fpr),
        unknown_tpr: opt(&|r| r.unknown_tpr),
    }
}

fn opt_cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"))
}

pub const REPORT_CSV_HEADER: &str = "method,macro_f1,accuracy,packets_mean,packets_std,time_mean,time_std,unknown_fpr,unknown_tpr";

/// One row per report, columns as in [`REPORT_CSV_HEADER`]. Absent unknown
/// metrics are written as `-`.
pub fn reports_csv(reports: &[MetricsReport]) -> String {
    let mut out = String::from(REPORT_CSV_HEADER);
    out.push('\n');
    for r in reports {
        let _ = writeln!(
            out,
            "{},{:.4},{:.4},{:.4},{:.4},{:.6},{:.6},{},{}",
            r.method,
            r.macro_f1,
            r.accuracy,
            r.packets_mean,
            r.packets_std,
            r.time_mean,
            r.time_std,
            opt_cell(r.unknown_fpr),
            opt_cell(r.unknown_tpr)
        );
    }
    out
}

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut out = String::from(
        "method,iterations,macro_f1_mean,macro_f1_std,accuracy_mean,accuracy_std,packets_mean,packets_std,time_mean,time_std,unknown_fpr_mean,unknown_fpr_std,unknown_tpr_mean,unknown_tpr_std\n",
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4},{:.6},{:.6},{},{},{},{}",
            r.method,
            r.iterations,
            r.macro_f1.mean,
            r.macro_f1.std,
            r.accuracy.mean,
            r.accuracy.std,
            r.packets.mean,
            r.packets.std,
            r.time.mean,
            r.time.std,
            opt_cell(r.unknown_fpr.map(|m| m.mean)),
            opt_cell(r.unknown_fpr.map(|m| m.std)),
            opt_cell(r.unknown_tpr.map(|m| m.mean)),
            opt_cell(r.unknown_tpr.map(|m| m.std)),
        );
    }
    out
}

/// Empirical CDF of decision cost per true class: `class,packets,seconds,fraction`.
pub fn cdf_csv(report: &MetricsReport) -> String {
    let mut by_class: BTreeMap<&str, Vec<&DecisionRecord>> = BTreeMap::new();
    for d in &report.decisions {
        by_class.entry(&d.truth).or_default().push(d);
    }
    let mut out = String::from("class,packets,seconds,fraction\n");
    for (class, mut ds) in by_class {
        ds.sort_by(|a, b| a.seconds.total_cmp(&b.seconds).then(a.packets.cmp(&b.packets)));
        let n = ds.len() as f64;
        for (i, d) in ds.iter().enumerate() {
            let _ = writeln!(out, "{},{},{:.6},{:.6}", class, d.packets, d.seconds, (i + 1) as f64 / n);
        }
    }
    out
}
