use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::min_sym_eigenvalue;

/// Smallest admissible eigenvalue of `F + Fᵀ`.
pub const MIN_LCP_CURVATURE: f64 = 1e-10;

/// `F = G·Gᵀ + H − Hᵀ`. The symmetric part is `G·Gᵀ`, so `F + Fᵀ` is PSD for any `G`.
pub fn make_f(g: &DMatrix<f64>, h: &DMatrix<f64>) -> DMatrix<f64> {
    g * g.transpose() + h - h.transpose()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct LcsDims {
    /// state dimension
    pub n: usize,
    /// input dimension
    pub m: usize,
    /// complementarity dimension
    pub r: usize,
}

impl LcsDims {
    pub fn new(n: usize, m: usize, r: usize) -> Self {
        Self { n, m, r }
    }

    /// Total number of free entries in (A, B, C, d, D, E, G, H, c).
    pub fn num_params(&self) -> usize {
        Block::ALL.iter().map(|b| b.len(*self)).sum()
    }
}

/// Named parameter blocks, in flattening order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Block {
    A,
    B,
    C,
    LowerD,
    D,
    E,
    G,
    H,
    LowerC,
}

impl Block {
    pub const ALL: [Block; 9] = [
        Block::A,
        Block::B,
        Block::C,
        Block::LowerD,
        Block::D,
        Block::E,
        Block::G,
        Block::H,
        Block::LowerC,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Block::A => "A",
            Block::B => "B",
            Block::C => "C",
            Block::LowerD => "d",
            Block::D => "D",
            Block::E => "E",
            Block::G => "G",
            Block::H => "H",
            Block::LowerC => "c",
        }
    }

    pub fn shape(self, dims: LcsDims) -> (usize, usize) {
        let LcsDims { n, m, r } = dims;
        match self {
            Block::A => (n, n),
            Block::B => (n, m),
            Block::C => (n, r),
            Block::LowerD => (n, 1),
            Block::D => (r, n),
            Block::E => (r, m),
            Block::G | Block::H => (r, r),
            Block::LowerC => (r, 1),
        }
    }

    pub fn len(self, dims: LcsDims) -> usize {
        let (rows, cols) = self.shape(dims);
        rows * cols
    }
}

/// Raw parameter tuple; validated by [`LcsParams::new`].
#[derive(Debug, Clone, PartialEq)]
pub struct LcsParts {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub d: DVector<f64>,
    pub lcp_d: DMatrix<f64>,
    pub lcp_e: DMatrix<f64>,
    pub g: DMatrix<f64>,
    pub h: DMatrix<f64>,
    pub lcp_c: DVector<f64>,
}

impl LcsParts {
    pub fn zeros(dims: LcsDims) -> Self {
        let LcsDims { n, m, r } = dims;
        Self {
            a: DMatrix::zeros(n, n),
            b: DMatrix::zeros(n, m),
            c: DMatrix::zeros(n, r),
            d: DVector::zeros(n),
            lcp_d: DMatrix::zeros(r, n),
            lcp_e: DMatrix::zeros(r, m),
            g: DMatrix::zeros(r, r),
            h: DMatrix::zeros(r, r),
            lcp_c: DVector::zeros(r),
        }
    }

    fn block(&self, b: Block) -> &[f64] {
        match b {
            Block::A => self.a.as_slice(),
            Block::B => self.b.as_slice(),
            Block::C => self.c.as_slice(),
            Block::LowerD => self.d.as_slice(),
            Block::D => self.lcp_d.as_slice(),
            Block::E => self.lcp_e.as_slice(),
            Block::G => self.g.as_slice(),
            Block::H => self.h.as_slice(),
            Block::LowerC => self.lcp_c.as_slice(),
        }
    }

    /// Row-major entries of one block.
    pub fn block_row_major(&self, b: Block, dims: LcsDims) -> Vec<f64> {
        let (rows, cols) = b.shape(dims);
        let col_major = self.block(b);
        let mut out = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                out.push(col_major[j * rows + i]);
            }
        }
        out
    }

    /// All blocks flattened in [`Block::ALL`] order, each row-major.
    pub fn flatten(&self, dims: LcsDims) -> Vec<f64> {
        let mut out = Vec::with_capacity(dims.num_params());
        for b in Block::ALL {
            out.extend(self.block_row_major(b, dims));
        }
        out
    }

    pub fn unflatten(dims: LcsDims, flat: &[f64]) -> Self {
        assert_eq!(flat.len(), dims.num_params(), "flat parameter length");
        let mut parts = LcsParts::zeros(dims);
        let mut k = 0;
        for b in Block::ALL {
            let len = b.len(dims);
            parts.set_block_row_major(b, dims, &flat[k..k + len]);
            k += len;
        }
        parts
    }

    pub fn set_block_row_major(&mut self, b: Block, dims: LcsDims, data: &[f64]) {
        let (rows, cols) = b.shape(dims);
        let m = DMatrix::from_row_slice(rows, cols, data);
        match b {
            Block::A => self.a = m,
            Block::B => self.b = m,
            Block::C => self.c = m,
            Block::LowerD => self.d = m.column(0).into_owned(),
            Block::D => self.lcp_d = m,
            Block::E => self.lcp_e = m,
            Block::G => self.g = m,
            Block::H => self.h = m,
            Block::LowerC => self.lcp_c = m.column(0).into_owned(),
        }
    }
}

/// A discrete-time linear complementarity system
///
/// ```text
/// x⁺ = A x + B u + C λ + d
/// 0 ≤ λ ⊥ D x + E u + F λ + c ≥ 0,   F = G Gᵀ + H − Hᵀ
/// ```
///
/// Immutable after construction; `F` and `γ = λ_min(F + Fᵀ)` are cached.
#[derive(Debug, Clone, PartialEq)]
pub struct LcsParams {
    parts: LcsParts,
    dims: LcsDims,
    f: DMatrix<f64>,
    gamma: f64,
}

impl LcsParams {
    pub fn new(parts: LcsParts) -> Result<Self> {
        let n = parts.a.nrows();
        let m = parts.b.ncols();
        let r = parts.g.nrows();
        let dims = LcsDims { n, m, r };
        for block in Block::ALL {
            let (rows, cols) = block.shape(dims);
            let (got_rows, got_cols) = match block {
                Block::A => parts.a.shape(),
                Block::B => parts.b.shape(),
                Block::C => parts.c.shape(),
                Block::LowerD => (parts.d.len(), 1),
                Block::D => parts.lcp_d.shape(),
                Block::E => parts.lcp_e.shape(),
                Block::G => parts.g.shape(),
                Block::H => parts.h.shape(),
                Block::LowerC => (parts.lcp_c.len(), 1),
            };
            if (rows, cols) != (got_rows, got_cols) {
                return Err(Error::InvalidParams(format!(
                    "block {} has shape {got_rows}x{got_cols}, expected {rows}x{cols}",
                    block.name()
                )));
            }
            if parts.block(block).iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidParams(format!("block {} has non-finite entries", block.name())));
            }
        }
        if n == 0 || m == 0 {
            return Err(Error::InvalidParams("state and input dimensions must be positive".into()));
        }
        let f = make_f(&parts.g, &parts.h);
        let gamma = if r == 0 { f64::INFINITY } else { 2.0 * min_sym_eigenvalue(&f) };
        if r > 0 && !(gamma > MIN_LCP_CURVATURE) {
            return Err(Error::InvalidParams(format!(
                "F + Fᵀ is not positive definite (smallest eigenvalue {gamma:.3e}); G must have full rank"
            )));
        }
        Ok(Self { parts, dims, f, gamma })
    }

    pub fn dims(&self) -> LcsDims {
        self.dims
    }
    pub fn parts(&self) -> &LcsParts {
        &self.parts
    }
    pub fn into_parts(self) -> LcsParts {
        self.parts
    }
    pub fn a(&self) -> &DMatrix<f64> {
        &self.parts.a
    }
    pub fn b(&self) -> &DMatrix<f64> {
        &self.parts.b
    }
    pub fn c(&self) -> &DMatrix<f64> {
        &self.parts.c
    }
    pub fn d(&self) -> &DVector<f64> {
        &self.parts.d
    }
    pub fn lcp_d(&self) -> &DMatrix<f64> {
        &self.parts.lcp_d
    }
    pub fn lcp_e(&self) -> &DMatrix<f64> {
        &self.parts.lcp_e
    }
    pub fn g(&self) -> &DMatrix<f64> {
        &self.parts.g
    }
    pub fn h(&self) -> &DMatrix<f64> {
        &self.parts.h
    }
    pub fn lcp_c(&self) -> &DVector<f64> {
        &self.parts.lcp_c
    }
    pub fn f(&self) -> &DMatrix<f64> {
        &self.f
    }

    /// `λ_min(F + Fᵀ)`, positive by construction.
    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// Affine part of the dynamics, `A x + B u + d`.
    pub fn affine_next(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.parts.a * x + &self.parts.b * u + &self.parts.d
    }

    /// LCP offset `q = D x + E u + c`.
    pub fn lcp_offset(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.parts.lcp_d * x + &self.parts.lcp_e * u + &self.parts.lcp_c
    }

    /// Flatten (A, B, C, d, D, E, G, H, c), each block row-major.
    pub fn to_flat(&self) -> Vec<f64> {
        self.parts.flatten(self.dims)
    }

    pub fn from_flat(dims: LcsDims, flat: &[f64]) -> Result<Self> {
        if flat.len() != dims.num_params() {
            return Err(Error::Dimension {
                what: "flat LCS parameters",
                expected: dims.num_params(),
                got: flat.len(),
            });
        }
        Self::new(LcsParts::unflatten(dims, flat))
    }
}
