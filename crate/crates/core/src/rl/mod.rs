//! Reinforcement-learning trainer for [`SeqClassifier`].
//!
//! Each flow is an episode. At every step the agent either commits to one of
//! the `k` known classes (terminal) or takes the wait action `k`. Transitions
//! are stored lazily as `(flow, prefix length)` and the encoder is re-run over
//! the prefix when a batch is drawn.

mod replay;

pub use replay::{priority_sample, ReplayBuffer, MIN_PRIORITY};

use std::collections::BTreeSet;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::grad::{backward_batch, forward_batch, Gradients, Injection};
use crate::model::{argmax, cast, classify_sequence, decide, soft_confidence, ClassifierSession, Decision, DeciderConfig, Real, SeqClassifier, DEFAULT_HIDDEN_DIM};
use crate::optim::Adam;
use crate::representation::{featurize, FeatureConfig, FeatureSequence, Granularity};
use crate::trace::{FlowTrace, UNKNOWN_LABEL};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardConfig {
    pub positive_reward: f64,
    pub negative_reward: f64,
    pub wait_penalty: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            positive_reward: 1.0,
            negative_reward: -1.0,
            wait_penalty: -0.03,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.wait_penalty < 0.0 && self.positive_reward > 0.0 && self.negative_reward < 0.0) {
            return Err(Error::Config("rewards need wait_penalty < 0 < positive_reward and negative_reward < 0".into()));
        }
        Ok(())
    }

    /// Reward for a wait still pending when the episode is forced to end:
    /// waiting on an unknown flow was the right call.
    pub fn forced_terminal(&self, true_label: usize, k: usize) -> f64 {
        if true_label == k {
            self.positive_reward
        } else {
            self.negative_reward
        }
    }
}

/// Reward for `action` (index `k` is wait) given the true class (`k` for
/// unknown).
pub fn reward(action: usize, true_label: usize, k: usize, cfg: &RewardConfig) -> f64 {
    if action == k {
        cfg.wait_penalty
    } else if action == true_label {
        cfg.positive_reward
    } else {
        cfg.negative_reward
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub flow: usize,
    /// Prefix length of the state (1-based); the next state is one longer.
    pub step: usize,
    pub granularity: Granularity,
    pub action: usize,
    pub reward: f64,
    pub terminal: bool,
}

/// A featurized flow with its class index (`k` for unknown).
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSequence {
    pub seq: FeatureSequence,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSet {
    pub granularity: Granularity,
    pub class_names: Vec<String>,
    pub items: Vec<LabeledSequence>,
}

impl TrainingSet {
    /// Known classes sorted by name, excluding `unknown`.
    pub fn known_classes(flows: &[FlowTrace]) -> Vec<String> {
        flows
            .iter()
            .filter_map(|f| f.label.as_deref())
            .filter(|l| *l != UNKNOWN_LABEL)
            .map(str::to_string)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    pub fn from_flows(flows: &[FlowTrace], granularity: Granularity, features: &FeatureConfig, max_steps: usize) -> Result<Self> {
        Self::with_classes(flows, Self::known_classes(flows), granularity, features, max_steps)
    }

    /// Featurizes `flows` against a fixed class list. Labels outside the list
    /// count as unknown.
    pub fn with_classes(flows: &[FlowTrace], class_names: Vec<String>, granularity: Granularity, features: &FeatureConfig, max_steps: usize) -> Result<Self> {
        let k = class_names.len();
        let items = flows
            .iter()
            .map(|f| {
                let label = f
                    .label
                    .as_deref()
                    .and_then(|l| class_names.iter().position(|c| c == l))
                    .unwrap_or(k);
                Ok(LabeledSequence {
                    seq: featurize(f, granularity, features, max_steps)?,
                    label,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(TrainingSet {
            granularity,
            class_names,
            items,
        })
    }

    pub fn k(&self) -> usize {
        self.class_names.len()
    }
}

/// Rolls out one episode. `eps` is the probability of a uniformly random
/// action. At `c_unk` the action is forced to wait/unknown.
pub fn run_episode<F: Real, R: Rng + ?Sized>(
    model: &SeqClassifier<F>,
    flow_id: usize,
    item: &LabeledSequence,
    eps: f64,
    decider: &DeciderConfig,
    rewards: &RewardConfig,
    rng: &mut R,
) -> Result<Vec<Transition>> {
    let k = model.num_classes();
    let last = item.seq.len().min(decider.c_unk);
    if last == 0 {
        return Err(Error::EmptyFlow);
    }
    let mut session = ClassifierSession::new(model, *decider);
    let mut out = Vec::new();
    for step in 1..=last {
        let q = session.step_scores(&item.seq.rows[step - 1])?;
        let explore = rng.random::<f64>() < eps;
        let (action, r, terminal) = if step == decider.c_unk {
            (k, rewards.forced_terminal(item.label, k), true)
        } else {
            let action = if explore { rng.random_range(0..=k) } else { argmax(&q) };
            if action < k {
                (action, reward(action, item.label, k, rewards), true)
            } else if step == last {
                // data ran out while waiting
                (k, rewards.forced_terminal(item.label, k), true)
            } else {
                (k, rewards.wait_penalty, false)
            }
        };
        out.push(Transition {
            flow: flow_id,
            step,
            granularity: model.granularity,
            action,
            reward: r,
            terminal,
        });
        if terminal {
            break;
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Huber,
    Squared,
}

impl LossKind {
    fn value_and_slope(self, td: f64) -> (f64, f64) {
        match self {
            LossKind::Huber if td.abs() > 1.0 => (td.abs() - 0.5, td.signum()),
            LossKind::Huber | LossKind::Squared => (0.5 * td * td, td),
        }
    }
}

pub struct LossOutput<F> {
    pub loss: f64,
    pub td_errors: Vec<f64>,
    pub grads: Gradients<F>,
}

/// Importance-weighted double-Q loss over a batch and its gradient with
/// respect to `online`. Target values are treated as constants.
#[allow(clippy::too_many_arguments)]
pub fn double_q_loss<F: Real>(
    online: &SeqClassifier<F>,
    target: &SeqClassifier<F>,
    sequences: &[&[Vec<f64>]],
    batch: &[Transition],
    weights: &[f64],
    gamma: f64,
    c_unk: usize,
    kind: LossKind,
) -> LossOutput<F> {
    assert!(!batch.is_empty(), "empty batch");
    assert_eq!(batch.len(), weights.len());
    let k = online.num_classes();
    let n = batch.len() as f64;

    let rows: Vec<&[Vec<f64>]> = batch.iter().map(|t| sequences[t.flow]).collect();
    let lens: Vec<usize> = batch.iter().map(|t| t.step + usize::from(!t.terminal)).collect();
    let fwd = forward_batch(online, &rows, &lens);

    let boot: Vec<usize> = (0..batch.len()).filter(|&i| !batch[i].terminal).collect();
    let boot_rows: Vec<&[Vec<f64>]> = boot.iter().map(|&i| rows[i]).collect();
    let boot_lens: Vec<usize> = boot.iter().map(|&i| lens[i]).collect();
    let tgt = forward_batch(target, &boot_rows, &boot_lens);

    let mut y = batch.iter().map(|t| t.reward).collect::<Vec<_>>();
    for (j, &i) in boot.iter().enumerate() {
        let next = batch[i].step + 1;
        let best = if next >= c_unk {
            k
        } else {
            argmax(&fwd.scores(online, i, next))
        };
        y[i] += gamma * tgt.scores(target, j, next)[best];
    }

    let mut loss = 0.0;
    let mut td_errors = Vec::with_capacity(batch.len());
    let mut injections = Vec::with_capacity(batch.len());
    for (i, t) in batch.iter().enumerate() {
        let q = fwd.scores(online, i, t.step)[t.action];
        let td = y[i] - q;
        let (value, slope) = kind.value_and_slope(td);
        loss += weights[i] * value / n;
        td_errors.push(td);
        let mut d_scores = vec![F::zero(); k + 1];
        d_scores[t.action] = cast(-weights[i] * slope / n);
        injections.push(Injection {
            row: i,
            step: t.step,
            d_scores,
        });
    }
    let grads = backward_batch(online, &fwd, &injections);
    LossOutput { loss, td_errors, grads }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub hidden_dim: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    /// Episodes rolled out per epoch.
    pub episodes_per_epoch: usize,
    /// Episodes between gradient steps.
    pub train_every: usize,
    pub batch_size: usize,
    pub gamma: f64,
    pub target_sync_interval: usize,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    /// Fraction of training over which epsilon decays linearly.
    pub epsilon_decay_fraction: f64,
    pub replay_capacity: usize,
    pub priority_exponent: f64,
    pub importance_start: f64,
    pub importance_end: f64,
    pub max_grad_norm: f64,
    pub loss: LossKind,
    /// Training flows used for the per-epoch greedy accuracy.
    pub eval_flows: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            hidden_dim: DEFAULT_HIDDEN_DIM,
            learning_rate: 3e-4,
            max_epochs: 200,
            episodes_per_epoch: 256,
            train_every: 2,
            batch_size: 64,
            gamma: 1.0,
            target_sync_interval: 500,
            epsilon_start: 1.0,
            epsilon_end: 0.05,
            epsilon_decay_fraction: 0.5,
            replay_capacity: 100_000,
            priority_exponent: 0.6,
            importance_start: 0.4,
            importance_end: 1.0,
            max_grad_norm: 10.0,
            loss: LossKind::Huber,
            eval_flows: 256,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let checks = [
            (self.learning_rate > 0.0, "learning_rate must be positive"),
            (self.max_epochs >= 1, "max_epochs must be at least 1"),
            (self.episodes_per_epoch >= 1, "episodes_per_epoch must be at least 1"),
            (self.train_every >= 1, "train_every must be at least 1"),
            (self.batch_size >= 1, "batch_size must be at least 1"),
            (self.hidden_dim >= 1, "hidden_dim must be at least 1"),
            (self.replay_capacity >= 1, "replay_capacity must be at least 1"),
            (self.target_sync_interval >= 1, "target_sync_interval must be at least 1"),
        ];
        match checks.iter().find(|(ok, _)| !ok) {
            Some((_, msg)) => Err(Error::Config((*msg).into())),
            None => Ok(()),
        }
    }

    pub fn epsilon(&self, progress: f64) -> f64 {
        let frac = if self.epsilon_decay_fraction > 0.0 {
            (progress / self.epsilon_decay_fraction).min(1.0)
        } else {
            1.0
        };
        self.epsilon_start + (self.epsilon_end - self.epsilon_start) * frac
    }

    pub fn importance(&self, progress: f64) -> f64 {
        self.importance_start + (self.importance_end - self.importance_start) * progress.clamp(0.0, 1.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_reward: f64,
    pub mean_loss: f64,
    pub eval_accuracy: f64,
}

pub struct TrainOutcome {
    pub model: SeqClassifier<f32>,
    pub log: Vec<EpochLog>,
}

/// Greedy accuracy of `model` on `items` (unknown flows count as correct when
/// the decider ends on unknown).
pub fn greedy_accuracy<F: Real>(model: &SeqClassifier<F>, items: &[LabeledSequence], decider: &DeciderConfig) -> Result<f64> {
    if items.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0;
    for item in items {
        if classify_sequence(model, &item.seq, decider)?.class_index == item.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / items.len() as f64)
}

/// Trains a classifier with prioritized double Q-learning.
pub fn train(data: &TrainingSet, cfg: &TrainConfig, decider: &DeciderConfig, rewards: &RewardConfig, seed: u64) -> Result<TrainOutcome> {
    train_with_callback(data, cfg, decider, rewards, seed, |_| {})
}

pub fn train_with_callback(
    data: &TrainingSet,
    cfg: &TrainConfig,
    decider: &DeciderConfig,
    rewards: &RewardConfig,
    seed: u64,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    decider.validate()?;
    rewards.validate()?;
    let k = data.k();
    let present: BTreeSet<usize> = data.items.iter().map(|i| i.label).filter(|&l| l < k).collect();
    if k < 2 || present.len() < 2 {
        return Err(Error::TooFewClasses(present.len()));
    }
    if data.items.iter().any(|i| i.seq.is_empty()) {
        return Err(Error::EmptyFlow);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = SeqClassifier::<f32>::init(data.granularity, cfg.hidden_dim, data.class_names.clone(), &mut rng);
    let mut target = model.clone();
    let mut adam = Adam::new(&model, cfg.learning_rate);
    let mut replay = ReplayBuffer::new(cfg.replay_capacity, cfg.priority_exponent);
    let sequences: Vec<&[Vec<f64>]> = data.items.iter().map(|i| i.seq.rows.as_slice()).collect();

    let mut eval_idx: Vec<usize> = (0..data.items.len()).collect();
    eval_idx.shuffle(&mut rng);
    eval_idx.truncate(cfg.eval_flows);
    eval_idx.sort_unstable();
    let eval_items: Vec<LabeledSequence> = eval_idx.iter().map(|&i| data.items[i].clone()).collect();

    let total = (cfg.max_epochs * cfg.episodes_per_epoch) as f64;
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut episode = 0usize;
    let mut grad_steps = 0usize;
    let mut log = Vec::with_capacity(cfg.max_epochs);

    for epoch in 0..cfg.max_epochs {
        let mut reward_sum = 0.0;
        let mut loss_sum = 0.0;
        let mut loss_count = 0usize;
        for _ in 0..cfg.episodes_per_epoch {
            if cursor == order.len() {
                order = (0..data.items.len()).collect();
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let flow = order[cursor];
            cursor += 1;
            let progress = episode as f64 / total;
            let eps = cfg.epsilon(progress);
            let transitions = run_episode(&model, flow, &data.items[flow], eps, decider, rewards, &mut rng)?;
            reward_sum += transitions.iter().map(|t| t.reward).sum::<f64>();
            for t in transitions {
                replay.push(t);
            }
            episode += 1;

            if episode.is_multiple_of(cfg.train_every) && replay.len() >= cfg.batch_size {
                let (indices, weights) = priority_sample(&replay, cfg.batch_size, cfg.importance(progress), &mut rng);
                let batch: Vec<Transition> = indices.iter().map(|&i| *replay.get(i)).collect();
                let mut out = double_q_loss(&model, &target, &sequences, &batch, &weights, cfg.gamma, decider.c_unk, cfg.loss);
                out.grads.clip_norm(cfg.max_grad_norm);
                adam.step(&mut model, &out.grads);
                replay.update_priorities(&indices, &out.td_errors);
                loss_sum += out.loss;
                loss_count += 1;
                grad_steps += 1;
                if grad_steps.is_multiple_of(cfg.target_sync_interval) {
                    target = model.clone();
                }
            }
        }
        let entry = EpochLog {
            epoch: epoch + 1,
            mean_reward: reward_sum / cfg.episodes_per_epoch as f64,
            mean_loss: if loss_count > 0 { loss_sum / loss_count as f64 } else { 0.0 },
            eval_accuracy: greedy_accuracy(&model, &eval_items, decider)?,
        };
        debug!(
            "{} epoch {}: reward {:.4} loss {:.5} acc {:.3}",
            data.granularity.as_str(),
            entry.epoch,
            entry.mean_reward,
            entry.mean_loss,
            entry.eval_accuracy
        );
        on_epoch(&entry);
        log.push(entry);
    }
    info!(
        "trained {} classifier: {} episodes, {} gradient steps",
        data.granularity.as_str(),
        episode,
        grad_steps
    );
    Ok(TrainOutcome { model, log })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibrationMode {
    /// Confidence of each flow's final emitted known-class prediction.
    #[default]
    FinalEmission,
    /// Every per-step decider confidence.
    PerStep,
}

/// Nearest-rank percentile (`q` in `(0, 1]`) of `values`.
pub fn nearest_rank(values: &[f64], q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    Some(sorted[rank - 1])
}

/// Confidence values that feed threshold calibration.
pub fn calibration_confidences<F: Real>(model: &SeqClassifier<F>, items: &[LabeledSequence], decider: &DeciderConfig, mode: CalibrationMode) -> Result<Vec<f64>> {
    let k = model.num_classes();
    let mut values = Vec::new();
    for item in items {
        match mode {
            CalibrationMode::FinalEmission => {
                let r = classify_sequence(model, &item.seq, decider)?;
                if r.is_final && r.class_index < k {
                    values.push(r.confidence);
                }
            }
            CalibrationMode::PerStep => {
                let mut session = ClassifierSession::new(model, *decider);
                for (t, x) in item.seq.rows.iter().enumerate() {
                    let conf = soft_confidence(&session.step_scores(x)?);
                    match decide(&conf, t + 1, decider) {
                        Decision::Emit { confidence, .. } => {
                            values.push(confidence);
                            break;
                        }
                        Decision::Wait { p_unknown } => values.push(p_unknown),
                    }
                }
            }
        }
    }
    Ok(values)
}

/// 90th-percentile acceptance threshold over training-time confidences.
pub fn calibrate_threshold<F: Real>(model: &SeqClassifier<F>, items: &[LabeledSequence], decider: &DeciderConfig, mode: CalibrationMode) -> Result<f64> {
    let values = calibration_confidences(model, items, decider, mode)?;
    nearest_rank(&values, 0.9).ok_or(Error::NoCalibrationData)
}
