//! Segmentation of a frame sequence into half-overlapping chunks.
//!
//! With hop `K/2`, a sequence of `T` frames becomes `⌈T/hop⌉` chunks; the
//! tail is zero padded. Merging averages every frame over the chunks that
//! cover it, so `merge_chunks(chunk(f)) == f` exactly.

use ndarray::{Array2, Array3, ArrayView2};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Chunks {
    /// `num_chunks × chunk_size × dim`.
    pub values: Array3<f64>,
    /// Frame count before padding.
    pub frames: usize,
}

impl Chunks {
    pub fn num_chunks(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn chunk_size(&self) -> usize {
        self.values.shape()[1]
    }
}

/// Geometry of a chunked sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ChunkLayout {
    pub frames: usize,
    pub size: usize,
    pub num_chunks: usize,
}

impl ChunkLayout {
    pub fn new(frames: usize, size: usize) -> Result<Self> {
        if size < 2 || !size.is_multiple_of(2) {
            return Err(Error::Config(format!("chunk size must be even and ≥ 2, got {size}")));
        }
        if frames == 0 {
            return Err(Error::EmptyInput);
        }
        Ok(ChunkLayout {
            frames,
            size,
            num_chunks: frames.div_ceil(size / 2),
        })
    }

    pub fn hop(&self) -> usize {
        self.size / 2
    }

    pub fn rows(&self) -> usize {
        self.num_chunks * self.size
    }

    /// Source frame of chunk row `s * size + k`, if it is not padding.
    #[inline]
    pub fn frame_of(&self, s: usize, k: usize) -> Option<usize> {
        let t = s * self.hop() + k;
        (t < self.frames).then_some(t)
    }

    fn coverage(&self) -> Vec<f64> {
        let mut count = vec![0.0; self.frames];
        for s in 0..self.num_chunks {
            for k in 0..self.size {
                if let Some(t) = self.frame_of(s, k) {
                    count[t] += 1.0;
                }
            }
        }
        count
    }

    /// `(frames × dim)` → `(num_chunks·size × dim)`, rows ordered chunk-major.
    pub fn split(&self, f: ArrayView2<f64>) -> Array2<f64> {
        let dim = f.ncols();
        let mut out = Array2::zeros((self.rows(), dim));
        for s in 0..self.num_chunks {
            for k in 0..self.size {
                if let Some(t) = self.frame_of(s, k) {
                    out.row_mut(s * self.size + k).assign(&f.row(t));
                }
            }
        }
        out
    }

    /// Adjoint of [`split`](Self::split): sums chunk rows back onto frames.
    pub fn split_adjoint(&self, d: ArrayView2<f64>) -> Array2<f64> {
        let mut out = Array2::zeros((self.frames, d.ncols()));
        for s in 0..self.num_chunks {
            for k in 0..self.size {
                if let Some(t) = self.frame_of(s, k) {
                    let mut row = out.row_mut(t);
                    row += &d.row(s * self.size + k);
                }
            }
        }
        out
    }

    /// Overlap-add with averaging.
    pub fn merge(&self, c: ArrayView2<f64>) -> Array2<f64> {
        let mut out = self.split_adjoint(c);
        for (mut row, n) in out.rows_mut().into_iter().zip(self.coverage()) {
            row /= n;
        }
        out
    }

    /// Adjoint of [`merge`](Self::merge).
    pub fn merge_adjoint(&self, d: ArrayView2<f64>) -> Array2<f64> {
        let count = self.coverage();
        let mut scaled = d.to_owned();
        for (mut row, n) in scaled.rows_mut().into_iter().zip(count) {
            row /= n;
        }
        self.split(scaled.view())
    }
}

pub fn chunk(f: ArrayView2<f64>, chunk_size: usize) -> Result<Chunks> {
    let layout = ChunkLayout::new(f.nrows(), chunk_size)?;
    let flat = layout.split(f);
    let values = flat
        .into_shape_with_order((layout.num_chunks, chunk_size, f.ncols()))
        .expect("contiguous chunk buffer");
    Ok(Chunks {
        values,
        frames: layout.frames,
    })
}

pub fn merge_chunks(c: &Chunks) -> Result<Array2<f64>> {
    let layout = ChunkLayout::new(c.frames, c.chunk_size())?;
    if layout.num_chunks != c.num_chunks() {
        return Err(Error::SizeMismatch(format!(
            "{} chunks cannot cover {} frames at size {}",
            c.num_chunks(),
            c.frames,
            c.chunk_size()
        )));
    }
    let dim = c.values.shape()[2];
    let flat = c
        .values
        .view()
        .into_shape_with_order((layout.rows(), dim))
        .map_err(|e| Error::SizeMismatch(e.to_string()))?;
    Ok(layout.merge(flat))
}
