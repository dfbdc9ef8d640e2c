//! Bidirectional LSTM with hand-written backpropagation through time.
//!
//! Inputs are time-major: row `t * batch + b` holds step `t` of sequence `b`.
//! Gate order inside the `4H` axis is input, forget, cell, output.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, ArrayView1, ArrayView2, ArrayViewMut1, Axis};
use rand_chacha::ChaCha8Rng;

use super::layers::{view2, view2_mut};
use super::params::{Init, ParamStore, Slot};

#[derive(Clone, Debug)]
struct Direction {
    w_ih: Slot,
    w_hh: Slot,
    bias: Slot,
    reverse: bool,
}

#[derive(Clone, Debug)]
pub struct BiLstm {
    fwd: Direction,
    bwd: Direction,
    pub input_dim: usize,
    pub hidden: usize,
}

#[derive(Clone, Debug)]
struct DirCache {
    gates: Array2<f64>,
    c: Array2<f64>,
    tanh_c: Array2<f64>,
    h: Array2<f64>,
}

#[derive(Clone, Debug)]
pub struct LstmCache {
    steps: usize,
    batch: usize,
    fwd: DirCache,
    bwd: DirCache,
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl BiLstm {
    pub fn new(store: &mut ParamStore, name: &str, input_dim: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        let mut dir = |suffix: &str, reverse: bool| Direction {
            w_ih: store.add(&format!("{name}.{suffix}.w_ih"), &[4 * hidden, input_dim], Init::Uniform(bound), rng),
            w_hh: store.add(&format!("{name}.{suffix}.w_hh"), &[4 * hidden, hidden], Init::Uniform(bound), rng),
            bias: store.add(&format!("{name}.{suffix}.bias"), &[4 * hidden], Init::Uniform(bound), rng),
            reverse,
        };
        let fwd = dir("fwd", false);
        let bwd = dir("bwd", true);
        BiLstm {
            fwd,
            bwd,
            input_dim,
            hidden,
        }
    }

    pub fn output_dim(&self) -> usize {
        2 * self.hidden
    }

    /// `x` is `(steps * batch) × input_dim`; the output is `(steps * batch) × 2H`
    /// with forward states in the first `H` columns.
    pub fn forward(&self, p: &[f64], x: ArrayView2<f64>, steps: usize, batch: usize) -> (Array2<f64>, LstmCache) {
        debug_assert_eq!(x.nrows(), steps * batch);
        let fwd = self.dir_forward(&self.fwd, p, x, steps, batch);
        let bwd = self.dir_forward(&self.bwd, p, x, steps, batch);
        let h = self.hidden;
        let mut out = Array2::zeros((steps * batch, 2 * h));
        out.slice_mut(s![.., ..h]).assign(&fwd.h);
        out.slice_mut(s![.., h..]).assign(&bwd.h);
        (
            out,
            LstmCache {
                steps,
                batch,
                fwd,
                bwd,
            },
        )
    }

    fn dir_forward(&self, d: &Direction, p: &[f64], x: ArrayView2<f64>, steps: usize, batch: usize) -> DirCache {
        let h = self.hidden;
        let w_ih = view2(d.w_ih.of(p), 4 * h, self.input_dim);
        let w_hh = view2(d.w_hh.of(p), 4 * h, h);
        let mut gates = x.dot(&w_ih.t());
        gates += &ArrayView1::from(d.bias.of(p));
        let rows = steps * batch;
        let mut c = Array2::<f64>::zeros((rows, h));
        let mut tanh_c = Array2::<f64>::zeros((rows, h));
        let mut hs = Array2::<f64>::zeros((rows, h));
        for step in 0..steps {
            let t = if d.reverse { steps - 1 - step } else { step };
            let cur = t * batch..(t + 1) * batch;
            let prev = if step == 0 {
                None
            } else if d.reverse {
                Some((t + 1) * batch..(t + 2) * batch)
            } else {
                Some((t - 1) * batch..t * batch)
            };
            if let Some(prev) = prev.clone() {
                let hp = hs.slice(s![prev, ..]);
                let mut gt = gates.slice_mut(s![cur.clone(), ..]);
                general_mat_mul(1.0, &hp, &w_hh.t(), 1.0, &mut gt);
            }
            for b in 0..batch {
                let r = t * batch + b;
                let pr = prev.as_ref().map(|p| p.start + b);
                let gate = gates.row_mut(r).into_slice().expect("standard layout");
                for j in 0..h {
                    gate[j] = sigmoid(gate[j]);
                    gate[h + j] = sigmoid(gate[h + j]);
                    gate[2 * h + j] = gate[2 * h + j].tanh();
                    gate[3 * h + j] = sigmoid(gate[3 * h + j]);
                }
                for j in 0..h {
                    let c_prev = pr.map_or(0.0, |pr| c[[pr, j]]);
                    let cv = gate[h + j] * c_prev + gate[j] * gate[2 * h + j];
                    let tc = cv.tanh();
                    c[[r, j]] = cv;
                    tanh_c[[r, j]] = tc;
                    hs[[r, j]] = gate[3 * h + j] * tc;
                }
            }
        }
        DirCache {
            gates,
            c,
            tanh_c,
            h: hs,
        }
    }

    /// Accumulates parameter gradients and returns `dL/dx`.
    pub fn backward(&self, p: &[f64], g: &mut [f64], x: ArrayView2<f64>, cache: &LstmCache, dout: ArrayView2<f64>) -> Array2<f64> {
        let h = self.hidden;
        let mut dx = self.dir_backward(&self.fwd, p, g, x, cache, &cache.fwd, dout.slice(s![.., ..h]));
        dx += &self.dir_backward(&self.bwd, p, g, x, cache, &cache.bwd, dout.slice(s![.., h..]));
        dx
    }

    #[allow(clippy::too_many_arguments)]
    fn dir_backward(
        &self,
        d: &Direction,
        p: &[f64],
        g: &mut [f64],
        x: ArrayView2<f64>,
        cache: &LstmCache,
        dc: &DirCache,
        dh_out: ArrayView2<f64>,
    ) -> Array2<f64> {
        let h = self.hidden;
        let (steps, batch) = (cache.steps, cache.batch);
        let rows = steps * batch;
        let w_hh = view2(d.w_hh.of(p), 4 * h, h);
        let mut dgates = Array2::<f64>::zeros((rows, 4 * h));
        // h_{t-1} aligned with step t (zero at the first processed step)
        let mut h_prev = Array2::<f64>::zeros((rows, h));
        let mut dh_next = Array2::<f64>::zeros((batch, h));
        let mut dc_next = Array2::<f64>::zeros((batch, h));
        for step in (0..steps).rev() {
            let t = if d.reverse { steps - 1 - step } else { step };
            let prev_t = if step == 0 {
                None
            } else if d.reverse {
                Some(t + 1)
            } else {
                Some(t - 1)
            };
            for b in 0..batch {
                let r = t * batch + b;
                let pr = prev_t.map(|pt| pt * batch + b);
                let gate = dc.gates.row(r);
                let dg = dgates.row_mut(r).into_slice().expect("standard layout");
                for j in 0..h {
                    let (i_g, f_g, c_g, o_g) = (gate[j], gate[h + j], gate[2 * h + j], gate[3 * h + j]);
                    let dh = dh_out[[r, j]] + dh_next[[b, j]];
                    let tc = dc.tanh_c[[r, j]];
                    let d_o = dh * tc;
                    let dcell = dh * o_g * (1.0 - tc * tc) + dc_next[[b, j]];
                    let c_prev = pr.map_or(0.0, |pr| dc.c[[pr, j]]);
                    dg[j] = dcell * c_g * i_g * (1.0 - i_g);
                    dg[h + j] = dcell * c_prev * f_g * (1.0 - f_g);
                    dg[2 * h + j] = dcell * i_g * (1.0 - c_g * c_g);
                    dg[3 * h + j] = d_o * o_g * (1.0 - o_g);
                    dc_next[[b, j]] = dcell * f_g;
                }
                if let Some(pr) = pr {
                    h_prev.row_mut(r).assign(&dc.h.row(pr));
                }
            }
            if prev_t.is_some() {
                let dgt = dgates.slice(s![t * batch..(t + 1) * batch, ..]);
                general_mat_mul(1.0, &dgt, &w_hh, 0.0, &mut dh_next);
            }
        }
        {
            let mut gw = view2_mut(d.w_hh.of_mut(g), 4 * h, h);
            general_mat_mul(1.0, &dgates.t(), &h_prev, 1.0, &mut gw);
        }
        {
            let mut gw = view2_mut(d.w_ih.of_mut(g), 4 * h, self.input_dim);
            general_mat_mul(1.0, &dgates.t(), &x, 1.0, &mut gw);
        }
        {
            let mut gb = ArrayViewMut1::from(d.bias.of_mut(g));
            gb += &dgates.sum_axis(Axis(0));
        }
        let w_ih = view2(d.w_ih.of(p), 4 * h, self.input_dim);
        dgates.dot(&w_ih)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn gradients_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let lstm = BiLstm::new(&mut store, "l", 3, 4, &mut rng);
        let (steps, batch) = (5, 2);
        let x = Array2::from_shape_fn((steps * batch, 3), |_| rng.random_range(-1.0..1.0));
        let probe = Array2::from_shape_fn((steps * batch, 8), |_| rng.random_range(-1.0..1.0));
        let loss = |p: &[f64], x: &Array2<f64>| (lstm.forward(p, x.view(), steps, batch).0 * &probe).sum();
        let (_, cache) = lstm.forward(store.data(), x.view(), steps, batch);
        let mut grads = store.zeros_like();
        let dx = lstm.backward(store.data(), &mut grads, x.view(), &cache, probe.view());
        let h = 1e-6;
        for i in 0..store.len() {
            let orig = store.data()[i];
            store.data_mut()[i] = orig + h;
            let lp = loss(store.data(), &x);
            store.data_mut()[i] = orig - h;
            let lm = loss(store.data(), &x);
            store.data_mut()[i] = orig;
            let fd = (lp - lm) / (2.0 * h);
            assert!((fd - grads[i]).abs() <= 1e-6 * (1.0 + fd.abs()), "param {i}: {fd} vs {}", grads[i]);
        }
        for r in 0..x.nrows() {
            for c in 0..x.ncols() {
                let mut xp = x.clone();
                xp[[r, c]] += h;
                let mut xm = x.clone();
                xm[[r, c]] -= h;
                let fd = (loss(store.data(), &xp) - loss(store.data(), &xm)) / (2.0 * h);
                assert!((fd - dx[[r, c]]).abs() <= 1e-6 * (1.0 + fd.abs()));
            }
        }
    }

    #[test]
    fn sequences_in_a_batch_are_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::new();
        let lstm = BiLstm::new(&mut store, "l", 2, 3, &mut rng);
        let x = Array2::from_shape_fn((8, 2), |_| rng.random_range(-1.0..1.0));
        let (full, _) = lstm.forward(store.data(), x.view(), 4, 2);
        // sequence 1 alone: rows 1, 3, 5, 7
        let x1 = Array2::from_shape_fn((4, 2), |(t, c)| x[[2 * t + 1, c]]);
        let (single, _) = lstm.forward(store.data(), x1.view(), 4, 1);
        for t in 0..4 {
            for j in 0..6 {
                assert!((full[[2 * t + 1, j]] - single[[t, j]]).abs() < 1e-14);
            }
        }
    }
}
