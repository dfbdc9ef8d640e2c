use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis};
use rand_chacha::ChaCha8Rng;

use super::params::{Init, ParamStore, Slot};

pub(crate) fn view2(buf: &[f64], rows: usize, cols: usize) -> ArrayView2<'_, f64> {
    ArrayView2::from_shape((rows, cols), buf).expect("parameter slot shape")
}

pub(crate) fn view2_mut(buf: &mut [f64], rows: usize, cols: usize) -> ArrayViewMut2<'_, f64> {
    ArrayViewMut2::from_shape((rows, cols), buf).expect("parameter slot shape")
}

/// Row-wise affine map `y = x Wᵀ + b`, `W` is `out × in`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Slot,
    pub bias: Option<Slot>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, bias: bool, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = store.add(&format!("{name}.weight"), &[out_dim, in_dim], Init::Uniform(bound), rng);
        let bias = bias.then(|| store.add(&format!("{name}.bias"), &[out_dim], Init::Uniform(bound), rng));
        Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, p: &[f64], x: ArrayView2<f64>) -> Array2<f64> {
        let w = view2(self.weight.of(p), self.out_dim, self.in_dim);
        let mut y = x.dot(&w.t());
        if let Some(b) = self.bias {
            y += &ArrayView1::from(b.of(p));
        }
        y
    }

    /// Accumulates parameter gradients into `g` and returns `dL/dx`.
    pub fn backward(&self, p: &[f64], g: &mut [f64], x: ArrayView2<f64>, dy: ArrayView2<f64>) -> Array2<f64> {
        {
            let mut gw = view2_mut(self.weight.of_mut(g), self.out_dim, self.in_dim);
            general_mat_mul(1.0, &dy.t(), &x, 1.0, &mut gw);
        }
        if let Some(b) = self.bias {
            let mut gb = ArrayViewMut1::from(b.of_mut(g));
            gb += &dy.sum_axis(Axis(0));
        }
        let w = view2(self.weight.of(p), self.out_dim, self.in_dim);
        dy.dot(&w)
    }
}

/// Parametric ReLU with one learnable slope for the whole tensor.
#[derive(Clone, Debug)]
pub struct PRelu {
    pub slope: Slot,
}

impl PRelu {
    pub fn new(store: &mut ParamStore, name: &str, rng: &mut ChaCha8Rng) -> Self {
        PRelu {
            slope: store.add(&format!("{name}.slope"), &[1], Init::Constant(0.25), rng),
        }
    }

    pub fn forward(&self, p: &[f64], x: ArrayView2<f64>) -> Array2<f64> {
        let a = self.slope.of(p)[0];
        x.mapv(|v| if v > 0.0 { v } else { a * v })
    }

    pub fn backward(&self, p: &[f64], g: &mut [f64], x: ArrayView2<f64>, dy: ArrayView2<f64>) -> Array2<f64> {
        let a = self.slope.of(p)[0];
        let mut da = 0.0;
        let mut dx = Array2::zeros(x.raw_dim());
        ndarray::Zip::from(&mut dx).and(&x).and(&dy).for_each(|d, &v, &gy| {
            if v > 0.0 {
                *d = gy;
            } else {
                *d = a * gy;
                da += gy * v;
            }
        });
        self.slope.of_mut(g)[0] += da;
        dx
    }
}

/// Global layer normalization: statistics over every element of the
/// (frames × features) tensor, per-feature gain and bias.
#[derive(Clone, Debug)]
pub struct GlobalLayerNorm {
    pub gain: Slot,
    pub bias: Slot,
    pub dim: usize,
}

pub const GLN_EPS: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct NormCache {
    xhat: Array2<f64>,
    inv_std: f64,
}

impl GlobalLayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        GlobalLayerNorm {
            gain: store.add(&format!("{name}.gain"), &[dim], Init::Constant(1.0), rng),
            bias: store.add(&format!("{name}.bias"), &[dim], Init::Zeros, rng),
            dim,
        }
    }

    pub fn forward(&self, p: &[f64], x: ArrayView2<f64>) -> (Array2<f64>, NormCache) {
        let n = x.len() as f64;
        let mean = x.sum() / n;
        let var = x.fold(0.0, |acc, v| acc + (v - mean) * (v - mean)) / n;
        let inv_std = 1.0 / (var + GLN_EPS).sqrt();
        let xhat = x.mapv(|v| (v - mean) * inv_std);
        let gain = ArrayView1::from(self.gain.of(p));
        let bias = ArrayView1::from(self.bias.of(p));
        let y = &xhat * &gain + bias;
        (y, NormCache { xhat, inv_std })
    }

    pub fn backward(&self, p: &[f64], g: &mut [f64], cache: &NormCache, dy: ArrayView2<f64>) -> Array2<f64> {
        let gain = ArrayView1::from(self.gain.of(p));
        {
            let mut gg = ArrayViewMut1::from(self.gain.of_mut(g));
            gg += &(&dy * &cache.xhat).sum_axis(Axis(0));
        }
        {
            let mut gb = ArrayViewMut1::from(self.bias.of_mut(g));
            gb += &dy.sum_axis(Axis(0));
        }
        let dxhat = &dy * &gain;
        let n = dxhat.len() as f64;
        let mean_d = dxhat.sum() / n;
        let mean_dx = (&dxhat * &cache.xhat).sum() / n;
        let mut dx = dxhat;
        ndarray::Zip::from(&mut dx).and(&cache.xhat).for_each(|d, &xh| {
            *d = cache.inv_std * (*d - mean_d - xh * mean_dx);
        });
        dx
    }
}
