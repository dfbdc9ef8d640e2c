//! Dual-path blocks: a bidirectional recurrent pass inside each chunk, then
//! one across chunks, each followed by a projection, global layer norm and a
//! residual connection.

use ndarray::{Array2, ArrayView2};
use rand_chacha::ChaCha8Rng;

use super::chunk::ChunkLayout;
use super::layers::{GlobalLayerNorm, Linear, NormCache};
use super::lstm::{BiLstm, LstmCache};
use super::params::ParamStore;

/// Reorders rows between chunk-major `[s][k]` and position-major `[k][s]`.
fn transpose_rows(x: ArrayView2<f64>, outer: usize, inner: usize) -> Array2<f64> {
    let mut out = Array2::zeros(x.raw_dim());
    for a in 0..outer {
        for b in 0..inner {
            out.row_mut(b * outer + a).assign(&x.row(a * inner + b));
        }
    }
    out
}

#[derive(Clone, Debug)]
struct Path {
    rnn: BiLstm,
    proj: Linear,
    norm: GlobalLayerNorm,
}

struct PathCache {
    input: Array2<f64>,
    rnn: LstmCache,
    rnn_out: Array2<f64>,
    norm: NormCache,
}

impl Path {
    fn new(store: &mut ParamStore, name: &str, dim: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let rnn = BiLstm::new(store, &format!("{name}.rnn"), dim, hidden, rng);
        let proj = Linear::new(store, &format!("{name}.proj"), 2 * hidden, dim, true, rng);
        let norm = GlobalLayerNorm::new(store, &format!("{name}.norm"), dim, rng);
        Path { rnn, proj, norm }
    }

    /// `x` is time-major; returns the normalized branch output (no residual).
    fn forward(&self, p: &[f64], x: Array2<f64>, steps: usize, batch: usize) -> (Array2<f64>, PathCache) {
        let (rnn_out, rnn) = self.rnn.forward(p, x.view(), steps, batch);
        let projected = self.proj.forward(p, rnn_out.view());
        let (y, norm) = self.norm.forward(p, projected.view());
        (
            y,
            PathCache {
                input: x,
                rnn,
                rnn_out,
                norm,
            },
        )
    }

    fn backward(&self, p: &[f64], g: &mut [f64], cache: &PathCache, dy: ArrayView2<f64>) -> Array2<f64> {
        let dproj = self.norm.backward(p, g, &cache.norm, dy);
        let drnn = self.proj.backward(p, g, cache.rnn_out.view(), dproj.view());
        self.rnn.backward(p, g, cache.input.view(), &cache.rnn, drnn.view())
    }
}

#[derive(Clone, Debug)]
pub struct DualPathBlock {
    intra: Path,
    inter: Path,
    pub dim: usize,
}

pub struct BlockCache {
    intra: PathCache,
    inter: PathCache,
}

impl DualPathBlock {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        DualPathBlock {
            intra: Path::new(store, &format!("{name}.intra"), dim, hidden, rng),
            inter: Path::new(store, &format!("{name}.inter"), dim, hidden, rng),
            dim,
        }
    }

    /// `z` holds `layout.rows()` rows in chunk-major order; shape is preserved.
    pub fn forward(&self, p: &[f64], z: ArrayView2<f64>, layout: &ChunkLayout) -> (Array2<f64>, BlockCache) {
        let (s, k) = (layout.num_chunks, layout.size);
        // intra: time runs over positions within a chunk, batch over chunks
        let (branch, intra) = self.intra.forward(p, transpose_rows(z, s, k), k, s);
        let z1 = &z + &transpose_rows(branch.view(), k, s);
        // inter: time runs over chunks, batch over positions (native layout)
        let (branch, inter) = self.inter.forward(p, z1.clone(), s, k);
        let z2 = z1 + branch;
        (z2, BlockCache { intra, inter })
    }

    pub fn backward(&self, p: &[f64], g: &mut [f64], cache: &BlockCache, dz2: ArrayView2<f64>, layout: &ChunkLayout) -> Array2<f64> {
        let (s, k) = (layout.num_chunks, layout.size);
        let dz1 = &dz2 + &self.inter.backward(p, g, &cache.inter, dz2);
        let dbranch = transpose_rows(dz1.view(), s, k);
        let dz_t = self.intra.backward(p, g, &cache.intra, dbranch.view());
        dz1 + transpose_rows(dz_t.view(), k, s)
    }
}

/// A stack of dual-path blocks, optionally multiplying the running
/// representation by a conditioning tensor on entry to selected blocks.
#[derive(Clone, Debug)]
pub struct DualPathStack {
    pub blocks: Vec<DualPathBlock>,
    /// 0-based indices of conditioned blocks.
    pub conditioned: Vec<usize>,
}

pub struct StackCache {
    /// Input of each block, after conditioning.
    inputs: Vec<Array2<f64>>,
    /// Pre-conditioning representation for conditioned blocks.
    pre_condition: Vec<Option<Array2<f64>>>,
    blocks: Vec<BlockCache>,
}

/// Elementwise product of the running representation with the cue representation.
pub fn condition(features: ArrayView2<f64>, cue: ArrayView2<f64>) -> Array2<f64> {
    &features * &cue
}

impl DualPathStack {
    pub fn new(store: &mut ParamStore, name: &str, num_blocks: usize, dim: usize, hidden: usize, conditioned: Vec<usize>, rng: &mut ChaCha8Rng) -> Self {
        let blocks = (0..num_blocks)
            .map(|b| DualPathBlock::new(store, &format!("{name}.{b}"), dim, hidden, rng))
            .collect();
        DualPathStack { blocks, conditioned }
    }

    pub fn forward(&self, p: &[f64], z: Array2<f64>, cond: Option<ArrayView2<f64>>, layout: &ChunkLayout) -> (Array2<f64>, StackCache) {
        let mut z = z;
        let mut cache = StackCache {
            inputs: Vec::with_capacity(self.blocks.len()),
            pre_condition: Vec::with_capacity(self.blocks.len()),
            blocks: Vec::with_capacity(self.blocks.len()),
        };
        for (b, block) in self.blocks.iter().enumerate() {
            match cond {
                Some(c) if self.conditioned.contains(&b) => {
                    let conditioned = condition(z.view(), c);
                    cache.pre_condition.push(Some(z));
                    z = conditioned;
                }
                _ => cache.pre_condition.push(None),
            }
            let (out, bc) = block.forward(p, z.view(), layout);
            cache.inputs.push(z);
            cache.blocks.push(bc);
            z = out;
        }
        (z, cache)
    }

    /// Returns `(dL/dz, dL/dcond)`; the latter is zero without conditioning.
    pub fn backward(&self, p: &[f64], g: &mut [f64], cache: &StackCache, dout: Array2<f64>, cond: Option<ArrayView2<f64>>, layout: &ChunkLayout) -> (Array2<f64>, Array2<f64>) {
        let mut dz = dout;
        let mut dcond = Array2::zeros(dz.raw_dim());
        for b in (0..self.blocks.len()).rev() {
            dz = self.blocks[b].backward(p, g, &cache.blocks[b], dz.view(), layout);
            if let (Some(pre), Some(c)) = (&cache.pre_condition[b], cond) {
                dcond += &(&dz * pre);
                dz = &dz * &c;
            }
        }
        (dz, dcond)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn zero_projections_make_the_block_an_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let block = DualPathBlock::new(&mut store, "b", 4, 3, &mut rng);
        for path in [&block.intra, &block.inter] {
            path.proj.weight.of_mut(store.data_mut()).fill(0.0);
            path.proj.bias.unwrap().of_mut(store.data_mut()).fill(0.0);
        }
        let layout = ChunkLayout::new(13, 4).unwrap();
        let z = Array2::from_shape_fn((layout.rows(), 4), |_| rng.random_range(-1.0..1.0));
        let (out, _) = block.forward(store.data(), z.view(), &layout);
        assert_eq!(out, z);
    }

    #[test]
    fn block_gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let stack = DualPathStack::new(&mut store, "s", 2, 3, 2, vec![0], &mut rng);
        let layout = ChunkLayout::new(7, 4).unwrap();
        let z = Array2::from_shape_fn((layout.rows(), 3), |_| rng.random_range(-1.0..1.0));
        let c = Array2::from_shape_fn((layout.rows(), 3), |_| rng.random_range(0.5..1.5));
        let probe = Array2::from_shape_fn((layout.rows(), 3), |_| rng.random_range(-1.0..1.0));
        let loss = |p: &[f64], z: &Array2<f64>, c: &Array2<f64>| {
            (stack.forward(p, z.clone(), Some(c.view()), &layout).0 * &probe).sum()
        };
        let (_, cache) = stack.forward(store.data(), z.clone(), Some(c.view()), &layout);
        let mut grads = store.zeros_like();
        let (dz, dc) = stack.backward(store.data(), &mut grads, &cache, probe.clone(), Some(c.view()), &layout);
        let h = 1e-6;
        let rel = |fd: f64, an: f64| (fd - an).abs() <= 1e-5 * (1.0 + fd.abs());
        for i in (0..store.len()).step_by(3) {
            let orig = store.data()[i];
            store.data_mut()[i] = orig + h;
            let lp = loss(store.data(), &z, &c);
            store.data_mut()[i] = orig - h;
            let lm = loss(store.data(), &z, &c);
            store.data_mut()[i] = orig;
            let fd = (lp - lm) / (2.0 * h);
            assert!(rel(fd, grads[i]), "param {i}: {fd} vs {}", grads[i]);
        }
        for idx in (0..z.len()).step_by(2) {
            let (r, col) = (idx / 3, idx % 3);
            let mut zp = z.clone();
            zp[[r, col]] += h;
            let mut zm = z.clone();
            zm[[r, col]] -= h;
            let fd = (loss(store.data(), &zp, &c) - loss(store.data(), &zm, &c)) / (2.0 * h);
            assert!(rel(fd, dz[[r, col]]), "z {idx}: {fd} vs {}", dz[[r, col]]);
            let mut cp = c.clone();
            cp[[r, col]] += h;
            let mut cm = c.clone();
            cm[[r, col]] -= h;
            let fd = (loss(store.data(), &z, &cp) - loss(store.data(), &z, &cm)) / (2.0 * h);
            assert!(rel(fd, dc[[r, col]]), "c {idx}: {fd} vs {}", dc[[r, col]]);
        }
    }

    #[test]
    fn condition_is_elementwise_product() {
        let f = Array2::from_shape_fn((3, 2), |(i, j)| (i + 2 * j) as f64 - 1.5);
        assert_eq!(condition(f.view(), Array2::ones((3, 2)).view()), f);
        assert!(condition(f.view(), Array2::zeros((3, 2)).view()).iter().all(|&v| v == 0.0));
    }
}
