//! Batched forward pass and backpropagation through time.
//!
//! Rows of different lengths run in lockstep: rows are ordered by length,
//! so the rows still active at step `t` are always a prefix of the batch and
//! every step is a single matrix product. Gradients enter as score-space
//! derivatives injected at arbitrary `(row, step)` positions.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView1, Axis};

use super::{cast, sigmoid, Real, SeqClassifier};

/// Parameter-shaped gradient buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<F> {
    pub w: Array2<F>,
    pub b: Array1<F>,
    pub head_w: Array2<F>,
    pub head_b: Array1<F>,
}

impl<F: Real> Gradients<F> {
    pub fn zeros_like(model: &SeqClassifier<F>) -> Self {
        Gradients {
            w: Array2::zeros(model.w.dim()),
            b: Array1::zeros(model.b.len()),
            head_w: Array2::zeros(model.head_w.dim()),
            head_b: Array1::zeros(model.head_b.len()),
        }
    }

    pub fn tensors(&self) -> [&[F]; 4] {
        [
            self.w.as_slice().expect("contiguous"),
            self.b.as_slice().expect("contiguous"),
            self.head_w.as_slice().expect("contiguous"),
            self.head_b.as_slice().expect("contiguous"),
        ]
    }

    pub fn norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.iter())
            .map(|v| {
                let v = v.to_f64().unwrap_or(0.0);
                v * v
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: F) {
        self.w.mapv_inplace(|v| v * factor);
        self.b.mapv_inplace(|v| v * factor);
        self.head_w.mapv_inplace(|v| v * factor);
        self.head_b.mapv_inplace(|v| v * factor);
    }

    /// Rescales so the global L2 norm is at most `max_norm`.
    pub fn clip_norm(&mut self, max_norm: f64) {
        let norm = self.norm();
        if norm > max_norm && norm > 0.0 {
            self.scale(cast(max_norm / norm));
        }
    }
}

struct StepCache<F> {
    xh: Array2<F>,
    /// Post-activation gates `[i, f, g, o]`.
    gates: Array2<F>,
    c: Array2<F>,
    tanh_c: Array2<F>,
    h: Array2<F>,
}

/// Activations of a batched forward pass.
pub struct BatchForward<F> {
    pos: Vec<usize>,
    lens: Vec<usize>,
    active: Vec<usize>,
    steps: Vec<StepCache<F>>,
}

impl<F: Real> BatchForward<F> {
    pub fn len(&self, row: usize) -> usize {
        self.lens[row]
    }

    /// Hidden vector of `row` after `step` data points (1-based).
    pub fn hidden(&self, row: usize, step: usize) -> ArrayView1<'_, F> {
        assert!(step >= 1 && step <= self.lens[row], "step {step} outside row length {}", self.lens[row]);
        self.steps[step - 1].h.row(self.pos[row])
    }

    pub fn scores(&self, model: &SeqClassifier<F>, row: usize, step: usize) -> Vec<f64> {
        let h = self.hidden(row, step);
        (model.head_w.dot(&h) + &model.head_b)
            .iter()
            .map(|v| v.to_f64().expect("finite"))
            .collect()
    }
}

/// Runs `model` over each row's first `lens[row]` data points.
pub fn forward_batch<F: Real>(model: &SeqClassifier<F>, rows: &[&[Vec<f64>]], lens: &[usize]) -> BatchForward<F> {
    assert_eq!(rows.len(), lens.len());
    let hd = model.hidden_dim;
    let id = model.input_dim;
    let mut order: Vec<usize> = (0..rows.len()).collect();
    order.sort_by(|&a, &b| lens[b].cmp(&lens[a]).then(a.cmp(&b)));
    let mut pos = vec![0; rows.len()];
    for (p, &r) in order.iter().enumerate() {
        pos[r] = p;
        assert!(lens[r] <= rows[r].len(), "row {r} shorter than requested length");
    }
    let max_len = order.first().map_or(0, |&r| lens[r]);
    let active: Vec<usize> = (0..max_len)
        .map(|t| order.iter().take_while(|&&r| lens[r] > t).count())
        .collect();

    let wt = model.w.t();
    let mut steps: Vec<StepCache<F>> = Vec::with_capacity(max_len);
    for (t, &n) in active.iter().enumerate() {
        let mut xh = Array2::<F>::zeros((n, id + hd));
        for (p, &r) in order.iter().take(n).enumerate() {
            for (j, &v) in rows[r][t].iter().enumerate() {
                xh[[p, j]] = cast(v);
            }
        }
        if t > 0 {
            xh.slice_mut(s![.., id..])
                .assign(&steps[t - 1].h.slice(s![..n, ..]));
        }
        let mut gates = Array2::<F>::zeros((n, 4 * hd));
        gates.assign(&model.b.broadcast((n, 4 * hd)).expect("bias broadcast"));
        general_mat_mul(F::one(), &xh, &wt, F::one(), &mut gates);

        let mut c = Array2::<F>::zeros((n, hd));
        let mut tanh_c = Array2::<F>::zeros((n, hd));
        let mut h = Array2::<F>::zeros((n, hd));
        for p in 0..n {
            let g = gates.row_mut(p).into_slice().expect("contiguous");
            for j in 0..hd {
                g[j] = sigmoid(g[j]);
                g[hd + j] = sigmoid(g[hd + j]);
                g[2 * hd + j] = g[2 * hd + j].tanh();
                g[3 * hd + j] = sigmoid(g[3 * hd + j]);
                let c_prev = if t > 0 { steps[t - 1].c[[p, j]] } else { F::zero() };
                let cv = g[hd + j] * c_prev + g[j] * g[2 * hd + j];
                let tc = cv.tanh();
                c[[p, j]] = cv;
                tanh_c[[p, j]] = tc;
                h[[p, j]] = g[3 * hd + j] * tc;
            }
        }
        steps.push(StepCache { xh, gates, c, tanh_c, h });
    }

    BatchForward {
        pos,
        lens: lens.to_vec(),
        active,
        steps,
    }
}

/// One score-space gradient: `d loss / d scores` for `row` at `step`.
pub struct Injection<F> {
    pub row: usize,
    pub step: usize,
    pub d_scores: Vec<F>,
}

/// Backpropagates injected score gradients through the cached forward pass.
pub fn backward_batch<F: Real>(model: &SeqClassifier<F>, fwd: &BatchForward<F>, injections: &[Injection<F>]) -> Gradients<F> {
    let hd = model.hidden_dim;
    let id = model.input_dim;
    let mut grads = Gradients::zeros_like(model);
    let Some(&batch) = fwd.active.first() else {
        return grads;
    };

    let mut by_step: Vec<Vec<&Injection<F>>> = vec![Vec::new(); fwd.steps.len()];
    for inj in injections {
        assert!(inj.step >= 1 && inj.step <= fwd.lens[inj.row], "injection outside row");
        by_step[inj.step - 1].push(inj);
    }

    let mut dh = Array2::<F>::zeros((batch, hd));
    let mut dc = Array2::<F>::zeros((batch, hd));
    for t in (0..fwd.steps.len()).rev() {
        let n = fwd.active[t];
        let cache = &fwd.steps[t];

        for inj in &by_step[t] {
            let p = fwd.pos[inj.row];
            let ds = ArrayView1::from(&inj.d_scores[..]);
            let h = cache.h.row(p);
            dh.row_mut(p).scaled_add(F::one(), &model.head_w.t().dot(&ds));
            for (o, &d) in inj.d_scores.iter().enumerate() {
                grads.head_w.row_mut(o).scaled_add(d, &h);
                grads.head_b[o] += d;
            }
        }

        let mut da = Array2::<F>::zeros((n, 4 * hd));
        for p in 0..n {
            let g = cache.gates.row(p);
            let a = da.row_mut(p).into_slice().expect("contiguous");
            for j in 0..hd {
                let (i, f, gg, o) = (g[j], g[hd + j], g[2 * hd + j], g[3 * hd + j]);
                let tc = cache.tanh_c[[p, j]];
                let c_prev = if t > 0 { fwd.steps[t - 1].c[[p, j]] } else { F::zero() };
                let dh_pj = dh[[p, j]];
                let dc_pj = dc[[p, j]] + dh_pj * o * (F::one() - tc * tc);
                a[j] = dc_pj * gg * i * (F::one() - i);
                a[hd + j] = dc_pj * c_prev * f * (F::one() - f);
                a[2 * hd + j] = dc_pj * i * (F::one() - gg * gg);
                a[3 * hd + j] = dh_pj * tc * o * (F::one() - o);
                dc[[p, j]] = dc_pj * f;
            }
        }

        general_mat_mul(F::one(), &da.t(), &cache.xh, F::one(), &mut grads.w);
        grads.b += &da.sum_axis(Axis(0));
        let dxh = da.dot(&model.w);
        dh.slice_mut(s![..n, ..]).assign(&dxh.slice(s![.., id..]));
    }
    grads
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::stream_rng;
    use crate::model::{recurrent_step, score};
    use crate::representation::Granularity;
    use rand::Rng;

    fn random_rows(n: usize, len: usize, dim: usize, seed: u64) -> Vec<Vec<Vec<f64>>> {
        let mut rng = stream_rng(seed, 0);
        (0..n)
            .map(|_| (0..len).map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()).collect())
            .collect()
    }

    #[test]
    fn batched_forward_matches_single_steps() {
        let mut rng = stream_rng(11, 0);
        let m = SeqClassifier::<f64>::init(Granularity::Packet, 5, vec!["a".into(), "b".into()], &mut rng);
        let data = random_rows(4, 6, 3, 12);
        let rows: Vec<&[Vec<f64>]> = data.iter().map(|r| r.as_slice()).collect();
        let lens = [3, 6, 1, 4];
        let fwd = forward_batch(&m, &rows, &lens);
        for (r, &len) in lens.iter().enumerate() {
            let mut st = m.initial_state();
            for (t, x) in data[r][..len].iter().enumerate() {
                st = recurrent_step(&m, &st, x).unwrap();
                let h = fwd.hidden(r, t + 1);
                for j in 0..5 {
                    assert!((h[j] - st.hidden[j]).abs() < 1e-12);
                }
                let s1 = fwd.scores(&m, r, t + 1);
                let s2 = score(&m, &st.hidden).unwrap();
                for o in 0..3 {
                    assert!((s1[o] - s2[o]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = stream_rng(21, 0);
        let mut m = SeqClassifier::<f64>::init(Granularity::Slot, 3, vec!["a".into()], &mut rng);
        let data = random_rows(3, 5, 5, 22);
        let rows: Vec<&[Vec<f64>]> = data.iter().map(|r| r.as_slice()).collect();
        let lens = [5, 2, 4];
        // loss = sum over injections of <d, scores(row, step)>
        let inj_spec: Vec<(usize, usize, Vec<f64>)> = vec![
            (0, 5, vec![0.3, -0.7]),
            (0, 2, vec![1.0, 0.5]),
            (1, 2, vec![-0.2, 0.9]),
            (2, 3, vec![0.4, 0.4]),
        ];
        let loss = |m: &SeqClassifier<f64>| -> f64 {
            let fwd = forward_batch(m, &rows, &lens);
            inj_spec
                .iter()
                .map(|(r, t, d)| fwd.scores(m, *r, *t).iter().zip(d).map(|(s, d)| s * d).sum::<f64>())
                .sum()
        };
        let fwd = forward_batch(&m, &rows, &lens);
        let injections: Vec<Injection<f64>> = inj_spec
            .iter()
            .map(|(r, t, d)| Injection {
                row: *r,
                step: *t,
                d_scores: d.clone(),
            })
            .collect();
        let grads = backward_batch(&m, &fwd, &injections);
        let analytic: Vec<f64> = grads.tensors().iter().flat_map(|t| t.to_vec()).collect();

        let eps = 1e-6;
        let mut idx = 0;
        for tensor in 0..4 {
            let n = m.params()[tensor].len();
            for i in 0..n {
                let orig = m.params()[tensor][i];
                m.params_mut()[tensor][i] = orig + eps;
                let up = loss(&m);
                m.params_mut()[tensor][i] = orig - eps;
                let down = loss(&m);
                m.params_mut()[tensor][i] = orig;
                let fd = (up - down) / (2.0 * eps);
                let a = analytic[idx];
                assert!((a - fd).abs() <= 1e-7 + 1e-5 * a.abs().max(fd.abs()), "tensor {tensor} idx {i}: {a} vs {fd}");
                idx += 1;
            }
        }
    }

    #[test]
    fn clip_norm_bounds_gradient() {
        let m = SeqClassifier::<f64>::zeros(Granularity::Packet, 2, vec!["a".into()]);
        let mut g = Gradients::zeros_like(&m);
        g.b.fill(3.0);
        g.clip_norm(1.0);
        assert!((g.norm() - 1.0).abs() < 1e-12);
    }
}
