//! Rotary position embedding over adjacent coordinate pairs.

use crate::error::{Error, Result};
use crate::real::Real;

pub const DEFAULT_BASE: f64 = 10_000.0;

/// Precomputed `cos`/`sin` of `theta[p][j] = p * base^(-2j/head_dim)`.
#[derive(Clone, Debug)]
pub struct RopeTable {
    max_len: usize,
    head_dim: usize,
    cos: Vec<f64>,
    sin: Vec<f64>,
}

impl RopeTable {
    pub fn new(max_len: usize, head_dim: usize) -> Result<Self> {
        Self::with_base(max_len, head_dim, DEFAULT_BASE)
    }

    pub fn with_base(max_len: usize, head_dim: usize, base: f64) -> Result<Self> {
        if !head_dim.is_multiple_of(2) {
            return Err(Error::dim(format!("rope needs an even head_dim, got {head_dim}")));
        }
        let half = head_dim / 2;
        let mut cos = Vec::with_capacity(max_len * half);
        let mut sin = Vec::with_capacity(max_len * half);
        for p in 0..max_len {
            for j in 0..half {
                let theta = p as f64 * base.powf(-2.0 * j as f64 / head_dim as f64);
                cos.push(theta.cos());
                sin.push(theta.sin());
            }
        }
        Ok(Self {
            max_len,
            head_dim,
            cos,
            sin,
        })
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    /// Rotation angle for position `p`, pair `j`.
    pub fn angle(&self, p: usize, j: usize) -> f64 {
        let half = self.head_dim / 2;
        self.sin[p * half + j].atan2(self.cos[p * half + j])
    }

    /// Rotates one head vector in place by position `p` (or by `-p` when
    /// `inverse`).
    #[inline]
    pub fn rotate_vec<T: Real>(&self, x: &mut [T], p: usize, inverse: bool) {
        let half = self.head_dim / 2;
        let (cs, sn) = (&self.cos[p * half..(p + 1) * half], &self.sin[p * half..(p + 1) * half]);
        for j in 0..half {
            let (c, mut s) = (T::c(cs[j]), T::c(sn[j]));
            if inverse {
                s = -s;
            }
            let (a, b) = (x[2 * j], x[2 * j + 1]);
            x[2 * j] = a * c - b * s;
            x[2 * j + 1] = a * s + b * c;
        }
    }

    /// Rotates an `N x head_dim` block whose first row is position 0.
    pub fn rotate<T: Real>(&self, x: &mut [T], n: usize) -> Result<()> {
        self.check_len(n)?;
        if x.len() != n * self.head_dim {
            return Err(Error::dim("rope: block size mismatch"));
        }
        for (p, row) in x.chunks_mut(self.head_dim).enumerate() {
            self.rotate_vec(row, p, false);
        }
        Ok(())
    }

    /// Rotates a stacked `[rows x n_heads*head_dim]` buffer where row `r`
    /// sits at position `r % seq_len`.
    pub fn rotate_rows(&self, data: &mut [f64], n_heads: usize, seq_len: usize, inverse: bool) -> Result<()> {
        self.check_len(seq_len)?;
        let d = n_heads * self.head_dim;
        if d == 0 || !data.len().is_multiple_of(d) {
            return Err(Error::dim(format!(
                "rope: buffer of {} values is not rows of {d}",
                data.len()
            )));
        }
        for (r, row) in data.chunks_mut(d).enumerate() {
            let p = r % seq_len;
            for head in row.chunks_mut(self.head_dim) {
                self.rotate_vec(head, p, inverse);
            }
        }
        Ok(())
    }

    fn check_len(&self, n: usize) -> Result<()> {
        if n > self.max_len {
            return Err(Error::dim(format!(
                "sequence length {n} exceeds rope table length {}",
                self.max_len
            )));
        }
        Ok(())
    }
}

/// Applies rotary embedding to an `N x h` block (positions `0..N`).
pub fn rope_rotate<T: Real>(x: &[T], n: usize, table: &RopeTable) -> Result<Vec<T>> {
    if !table.head_dim().is_multiple_of(2) || x.len() != n * table.head_dim() {
        return Err(Error::dim("rope_rotate: shape mismatch"));
    }
    let mut out = x.to_vec();
    table.rotate(&mut out, n)?;
    Ok(out)
}
