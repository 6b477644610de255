//! Sequential-decision recurrent classifier.
//!
//! An LSTM cell consumes one data point per step; a linear head maps the new
//! hidden vector to `k + 1` scores, where index `k` is the unknown/wait
//! class. [`decide`] turns the softmax of those scores into either an emitted
//! label or a request for the next data point.

pub mod grad;
pub mod io;

use ndarray::{s, Array1, Array2, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::representation::{FeatureSequence, Granularity};
use crate::trace::UNKNOWN_LABEL;

pub const DEFAULT_HIDDEN_DIM: usize = 128;

/// Scalar type the classifier can be instantiated with.
pub trait Real: ndarray::NdFloat + Default {}

impl<T: ndarray::NdFloat + Default> Real for T {}

pub(crate) fn cast<F: Real>(v: f64) -> F {
    F::from(v).expect("finite value")
}

#[inline]
pub(crate) fn sigmoid<F: Real>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeqClassifier<F = f32> {
    pub granularity: Granularity,
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub class_names: Vec<String>,
    /// Gate weights `[input; forget; cell; output]`, shape `(4H, I + H)`.
    pub w: Array2<F>,
    pub b: Array1<F>,
    /// Head weights, shape `(k + 1, H)`.
    pub head_w: Array2<F>,
    pub head_b: Array1<F>,
}

impl<F: Real> SeqClassifier<F> {
    /// All-zero parameters.
    pub fn zeros(granularity: Granularity, hidden_dim: usize, class_names: Vec<String>) -> Self {
        let input_dim = granularity.input_dim();
        let outputs = class_names.len() + 1;
        SeqClassifier {
            granularity,
            input_dim,
            hidden_dim,
            class_names,
            w: Array2::zeros((4 * hidden_dim, input_dim + hidden_dim)),
            b: Array1::zeros(4 * hidden_dim),
            head_w: Array2::zeros((outputs, hidden_dim)),
            head_b: Array1::zeros(outputs),
        }
    }

    /// Xavier-uniform weights, zero biases except a unit forget-gate bias.
    pub fn init<R: Rng + ?Sized>(granularity: Granularity, hidden_dim: usize, class_names: Vec<String>, rng: &mut R) -> Self {
        let mut m = Self::zeros(granularity, hidden_dim, class_names);
        let fan = (m.input_dim + hidden_dim + 4 * hidden_dim) as f64;
        let limit = (6.0 / fan).sqrt();
        m.w.mapv_inplace(|_| cast(rng.random_range(-limit..limit)));
        m.b.slice_mut(s![hidden_dim..2 * hidden_dim]).fill(F::one());
        let limit = (6.0 / (hidden_dim + m.num_outputs()) as f64).sqrt();
        m.head_w.mapv_inplace(|_| cast(rng.random_range(-limit..limit)));
        m
    }

    /// Number of known classes `k`.
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// `k + 1`.
    pub fn num_outputs(&self) -> usize {
        self.class_names.len() + 1
    }

    pub fn unknown_index(&self) -> usize {
        self.class_names.len()
    }

    pub fn label_of(&self, index: usize) -> &str {
        self.class_names
            .get(index)
            .map_or(UNKNOWN_LABEL, String::as_str)
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        if label == UNKNOWN_LABEL {
            return Some(self.unknown_index());
        }
        self.class_names.iter().position(|c| c == label)
    }

    pub fn initial_state(&self) -> RecurrentState<F> {
        RecurrentState::zeros(self.hidden_dim)
    }

    pub fn validate(&self) -> Result<()> {
        let h = self.hidden_dim;
        let shapes = [
            (self.w.dim(), (4 * h, self.input_dim + h)),
            (self.head_w.dim(), (self.num_outputs(), h)),
        ];
        for (actual, expected) in shapes {
            if actual != expected {
                return Err(Error::Format(format!("tensor shape {actual:?}, expected {expected:?}")));
            }
        }
        if self.b.len() != 4 * h || self.head_b.len() != self.num_outputs() {
            return Err(Error::Format("bias length mismatch".into()));
        }
        if self.input_dim != self.granularity.input_dim() {
            return Err(Error::Dimension {
                expected: self.granularity.input_dim(),
                actual: self.input_dim,
            });
        }
        let finite = |a: &[F]| a.iter().all(|v| v.is_finite());
        let all_finite = [
            self.w.as_slice(),
            self.b.as_slice(),
            self.head_w.as_slice(),
            self.head_b.as_slice(),
        ]
        .into_iter()
        .all(|t| t.is_some_and(finite));
        if !all_finite {
            return Err(Error::Format("non-finite or non-contiguous parameters".into()));
        }
        Ok(())
    }

    /// Flat mutable views of every parameter tensor, in file order.
    pub fn params_mut(&mut self) -> [&mut [F]; 4] {
        [
            self.w.as_slice_mut().expect("contiguous"),
            self.b.as_slice_mut().expect("contiguous"),
            self.head_w.as_slice_mut().expect("contiguous"),
            self.head_b.as_slice_mut().expect("contiguous"),
        ]
    }

    pub fn params(&self) -> [&[F]; 4] {
        [
            self.w.as_slice().expect("contiguous"),
            self.b.as_slice().expect("contiguous"),
            self.head_w.as_slice().expect("contiguous"),
            self.head_b.as_slice().expect("contiguous"),
        ]
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Converts parameters to another scalar type.
    pub fn cast<G: Real>(&self) -> SeqClassifier<G> {
        let conv = |v: &F| cast::<G>(v.to_f64().expect("finite"));
        SeqClassifier {
            granularity: self.granularity,
            input_dim: self.input_dim,
            hidden_dim: self.hidden_dim,
            class_names: self.class_names.clone(),
            w: self.w.map(conv),
            b: self.b.map(conv),
            head_w: self.head_w.map(conv),
            head_b: self.head_b.map(conv),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RecurrentState<F = f32> {
    pub hidden: Array1<F>,
    pub cell: Array1<F>,
}

impl<F: Real> RecurrentState<F> {
    pub fn zeros(hidden_dim: usize) -> Self {
        RecurrentState {
            hidden: Array1::zeros(hidden_dim),
            cell: Array1::zeros(hidden_dim),
        }
    }
}

/// One LSTM update. Returns the new state; its hidden vector doubles as the
/// step's feature vector.
pub fn recurrent_step<F: Real>(model: &SeqClassifier<F>, state: &RecurrentState<F>, x: &[f64]) -> Result<RecurrentState<F>> {
    if x.len() != model.input_dim {
        return Err(Error::Dimension {
            expected: model.input_dim,
            actual: x.len(),
        });
    }
    let h = model.hidden_dim;
    if state.hidden.len() != h || state.cell.len() != h {
        return Err(Error::Dimension {
            expected: h,
            actual: state.hidden.len(),
        });
    }
    let mut xh = Array1::<F>::zeros(model.input_dim + h);
    for (dst, &v) in xh.iter_mut().zip(x) {
        *dst = cast(v);
    }
    xh.slice_mut(s![model.input_dim..]).assign(&state.hidden);
    let z = model.w.dot(&xh) + &model.b;

    let mut next = RecurrentState::zeros(h);
    Zip::indexed(&mut next.cell)
        .and(&mut next.hidden)
        .and(&state.cell)
        .for_each(|j, c, hid, &c_prev| {
            let i = sigmoid(z[j]);
            let f = sigmoid(z[h + j]);
            let g = z[2 * h + j].tanh();
            let o = sigmoid(z[3 * h + j]);
            *c = f * c_prev + i * g;
            *hid = o * c.tanh();
        });
    Ok(next)
}

/// Affine head: `head_w * features + head_b`.
pub fn score<F: Real>(model: &SeqClassifier<F>, features: &Array1<F>) -> Result<Array1<F>> {
    if features.len() != model.hidden_dim {
        return Err(Error::Dimension {
            expected: model.hidden_dim,
            actual: features.len(),
        });
    }
    Ok(model.head_w.dot(features) + &model.head_b)
}

/// Numerically stable softmax.
pub fn soft_confidence(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeciderConfig {
    pub t_unk: f64,
    pub c_unk: usize,
}

impl Default for DeciderConfig {
    fn default() -> Self {
        DeciderConfig { t_unk: 0.8, c_unk: 20 }
    }
}

impl DeciderConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.t_unk > 0.0 && self.t_unk < 1.0) {
            return Err(Error::Config(format!("t_unk must lie in (0, 1), got {}", self.t_unk)));
        }
        if self.c_unk < 1 {
            return Err(Error::Config("c_unk must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Decision {
    /// Output `class` (index `k` is unknown) with its confidence.
    Emit { class: usize, confidence: f64 },
    /// Keep reading; carries the unknown-class confidence.
    Wait { p_unknown: f64 },
}

/// One step of the dynamic decider over `k + 1` confidences at step `t`
/// (1-based).
pub fn decide(conf: &[f64], t: usize, cfg: &DeciderConfig) -> Decision {
    let k = conf.len() - 1;
    if t >= cfg.c_unk {
        return Decision::Emit {
            class: k,
            confidence: conf[k],
        };
    }
    let best = argmax(conf);
    if conf[k] >= cfg.t_unk || best == k {
        Decision::Wait { p_unknown: conf[k] }
    } else {
        Decision::Emit {
            class: best,
            confidence: conf[best],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationResult {
    pub label: String,
    pub class_index: usize,
    pub confidence: f64,
    pub steps_used: usize,
    /// Flow time of the last data point consumed.
    pub elapsed: f64,
    /// True once the decider terminated.
    pub is_final: bool,
}

/// Resumable per-flow classification state.
#[derive(Clone, Debug)]
pub struct ClassifierSession<'m, F: Real = f32> {
    model: &'m SeqClassifier<F>,
    cfg: DeciderConfig,
    state: RecurrentState<F>,
    steps: usize,
}

impl<'m, F: Real> ClassifierSession<'m, F> {
    pub fn new(model: &'m SeqClassifier<F>, cfg: DeciderConfig) -> Self {
        ClassifierSession {
            model,
            cfg,
            state: model.initial_state(),
            steps: 0,
        }
    }

    pub fn model(&self) -> &'m SeqClassifier<F> {
        self.model
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn exhausted(&self) -> bool {
        self.steps >= self.cfg.c_unk
    }

    pub fn state(&self) -> &RecurrentState<F> {
        &self.state
    }

    /// Consumes one data point and returns the raw scores.
    pub fn step_scores(&mut self, x: &[f64]) -> Result<Vec<f64>> {
        self.state = recurrent_step(self.model, &self.state, x)?;
        self.steps += 1;
        let scores = score(self.model, &self.state.hidden)?;
        Ok(scores.iter().map(|v| v.to_f64().expect("finite")).collect())
    }

    /// Consumes one data point and applies the decider. Returns `None` once
    /// `c_unk` steps have been taken.
    pub fn push(&mut self, x: &[f64]) -> Result<Option<Decision>> {
        if self.exhausted() {
            return Ok(None);
        }
        let scores = self.step_scores(x)?;
        Ok(Some(decide(&soft_confidence(&scores), self.steps, &self.cfg)))
    }
}

/// Runs the decider over `seq`, stopping at the first emission.
pub fn classify_sequence<F: Real>(model: &SeqClassifier<F>, seq: &FeatureSequence, cfg: &DeciderConfig) -> Result<ClassificationResult> {
    if seq.is_empty() {
        return Err(Error::EmptyFlow);
    }
    let mut session = ClassifierSession::new(model, *cfg);
    let mut last_wait = 0.0;
    for (i, x) in seq.rows.iter().enumerate() {
        match session.push(x)? {
            Some(Decision::Emit { class, confidence }) => {
                return Ok(ClassificationResult {
                    label: model.label_of(class).to_string(),
                    class_index: class,
                    confidence,
                    steps_used: i + 1,
                    elapsed: seq.times[i],
                    is_final: true,
                })
            }
            Some(Decision::Wait { p_unknown }) => last_wait = p_unknown,
            None => break,
        }
    }
    let used = session.steps();
    Ok(ClassificationResult {
        label: UNKNOWN_LABEL.to_string(),
        class_index: model.unknown_index(),
        confidence: last_wait,
        steps_used: used,
        elapsed: seq.times[used - 1],
        is_final: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn classes(k: usize) -> Vec<String> {
        (0..k).map(|i| format!("c{i}")).collect()
    }

    #[test]
    fn zero_model_gives_zero_hidden() {
        let m = SeqClassifier::<f64>::zeros(Granularity::Packet, 8, classes(2));
        let st = recurrent_step(&m, &m.initial_state(), &[1.0, 0.5, 3.0]).unwrap();
        assert!(st.hidden.iter().all(|&v| v == 0.0));
        assert!(st.cell.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_unit_cell_matches_hand_evaluation() {
        // hidden 2, input 3; weights chosen so each gate row is easy to evaluate.
        let mut m = SeqClassifier::<f64>::zeros(Granularity::Packet, 2, classes(1));
        for r in 0..8 {
            m.w[[r, 0]] = 0.1 * (r as f64 + 1.0);
            m.w[[r, 3]] = -0.05 * r as f64;
            m.b[r] = 0.01 * r as f64;
        }
        let x = [1.0, 0.5, 0.25];
        let prev = RecurrentState {
            hidden: array![0.2, -0.4],
            cell: array![0.3, -0.1],
        };
        let st = recurrent_step(&m, &prev, &x).unwrap();
        // z_r = 0.1(r+1)*1 - 0.05 r * 0.2 + 0.01 r
        let z = |r: usize| 0.1 * (r as f64 + 1.0) - 0.05 * r as f64 * 0.2 + 0.01 * r as f64;
        let sg = |v: f64| 1.0 / (1.0 + (-v).exp());
        for j in 0..2 {
            let c = sg(z(2 + j)) * prev.cell[j] + sg(z(j)) * z(4 + j).tanh();
            let h = sg(z(6 + j)) * c.tanh();
            assert!((st.cell[j] - c).abs() < 1e-15);
            assert!((st.hidden[j] - h).abs() < 1e-15);
        }
        let again = recurrent_step(&m, &prev, &x).unwrap();
        assert_eq!(st, again);
    }

    #[test]
    fn dimension_errors() {
        let m = SeqClassifier::<f32>::zeros(Granularity::Slot, 4, classes(2));
        assert!(matches!(
            recurrent_step(&m, &m.initial_state(), &[1.0, 2.0]),
            Err(Error::Dimension { expected: 5, actual: 2 })
        ));
        assert!(score(&m, &Array1::zeros(3)).is_err());
    }

    #[test]
    fn head_is_affine() {
        let mut m = SeqClassifier::<f64>::zeros(Granularity::Packet, 3, classes(2));
        m.head_b = array![1.0, 2.0, 3.0];
        assert_eq!(score(&m, &array![0.4, 0.5, 0.6]).unwrap(), array![1.0, 2.0, 3.0]);
        m.head_w = array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let f = array![0.4, -0.5, 0.6];
        let got = score(&m, &f).unwrap();
        for r in 0..3 {
            let oracle: f64 = (0..3).map(|c| m.head_w[[r, c]] * f[c]).sum::<f64>() + m.head_b[r];
            assert_eq!(got[r], oracle);
        }
    }

    #[test]
    fn softmax_examples() {
        let c = soft_confidence(&[0.0, 0.0, 0.0]);
        for v in &c {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let c = soft_confidence(&[1000.0, 0.0]);
        assert!(c.iter().all(|v| v.is_finite()));
        assert!((c[0] - 1.0).abs() < 1e-12 && c[1] < 1e-300);
    }

    #[test]
    fn decide_examples() {
        let cfg = DeciderConfig { t_unk: 0.8, c_unk: 20 };
        assert_eq!(decide(&[0.1, 0.1, 0.1, 0.7], 3, &cfg), Decision::Wait { p_unknown: 0.7 });
        assert_eq!(
            decide(&[0.85, 0.05, 0.05, 0.05], 3, &cfg),
            Decision::Emit { class: 0, confidence: 0.85 }
        );
        assert_eq!(
            decide(&[0.85, 0.05, 0.05, 0.05], 20, &cfg),
            Decision::Emit { class: 3, confidence: 0.05 }
        );
        // unknown at exactly t_unk waits even when a known class is the argmax
        let cfg = DeciderConfig { t_unk: 0.4, c_unk: 5 };
        assert_eq!(decide(&[0.6, 0.0, 0.4], 1, &cfg), Decision::Wait { p_unknown: 0.4 });
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[0.3, 0.3, 0.2]), 0);
        assert_eq!(argmax(&[0.1, 0.45, 0.45]), 1);
    }

    fn seq_of(n: usize, dim: usize) -> FeatureSequence {
        FeatureSequence {
            rows: (0..n).map(|i| vec![i as f64 * 0.1; dim]).collect(),
            times: (0..n).map(|i| i as f64 * 0.01).collect(),
            packets: (1..=n).collect(),
        }
    }

    #[test]
    fn classify_emits_immediately_when_head_prefers_a_class() {
        let mut m = SeqClassifier::<f32>::zeros(Granularity::Packet, 4, classes(2));
        m.head_b = array![5.0, 0.0, 0.0];
        let r = classify_sequence(&m, &seq_of(10, 3), &DeciderConfig::default()).unwrap();
        assert_eq!((r.label.as_str(), r.steps_used, r.is_final), ("c0", 1, true));
        assert_eq!(r.elapsed, 0.0);
    }

    #[test]
    fn always_waiting_model_hits_the_cap() {
        let mut m = SeqClassifier::<f32>::zeros(Granularity::Packet, 4, classes(2));
        m.head_b = array![0.0, 0.0, 5.0];
        let cfg = DeciderConfig { t_unk: 0.8, c_unk: 6 };
        let r = classify_sequence(&m, &seq_of(6, 3), &cfg).unwrap();
        assert_eq!((r.label.as_str(), r.steps_used, r.is_final), (UNKNOWN_LABEL, 6, true));

        let r = classify_sequence(&m, &seq_of(4, 3), &cfg).unwrap();
        assert_eq!((r.steps_used, r.is_final), (4, false));
        assert!(r.confidence > 0.9);
        assert!(classify_sequence(&m, &seq_of(0, 3), &cfg).is_err());
    }

    #[test]
    fn session_stops_at_cap() {
        let m = SeqClassifier::<f32>::zeros(Granularity::Packet, 4, classes(2));
        let mut s = ClassifierSession::new(&m, DeciderConfig { t_unk: 0.8, c_unk: 2 });
        assert!(s.push(&[0.0; 3]).unwrap().is_some());
        assert!(matches!(s.push(&[0.0; 3]).unwrap(), Some(Decision::Emit { class: 2, .. })));
        assert!(s.push(&[0.0; 3]).unwrap().is_none());
    }

    #[test]
    fn cast_round_trips_shapes() {
        let m = SeqClassifier::<f32>::init(Granularity::Slot, 6, classes(3), &mut crate::augment::stream_rng(5, 0));
        let d: SeqClassifier<f64> = m.cast();
        assert!(d.validate().is_ok());
        assert_eq!(d.cast::<f32>(), m);
    }
}
