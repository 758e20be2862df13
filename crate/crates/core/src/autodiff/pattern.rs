use crate::error::{BamError, Result};

/// Boolean keep-mask over an `m × n` matrix (`true` = entry participates).
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    rows: usize,
    cols: usize,
    allowed: Vec<bool>,
}

impl Mask {
    pub fn new(rows: usize, cols: usize, allowed: Vec<bool>) -> Result<Self> {
        if allowed.len() != rows * cols {
            return Err(BamError::Shape(format!(
                "mask {rows}x{cols} needs {} entries, got {}",
                rows * cols,
                allowed.len()
            )));
        }
        Ok(Mask {
            rows,
            cols,
            allowed,
        })
    }

    pub fn full(rows: usize, cols: usize) -> Self {
        Mask {
            rows,
            cols,
            allowed: vec![true; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn allowed(&self, row: usize, col: usize) -> bool {
        self.allowed[row * self.cols + col]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.allowed
    }
}

/// Row-compressed sparsity pattern of an `m × n` matrix.
///
/// Entries are sorted row-major and unique, so iterating the pattern visits
/// the unmasked entries of the equivalent dense mask in the same order.
#[derive(Clone, Debug, PartialEq)]
pub struct Pattern {
    m: usize,
    n: usize,
    row_ptr: Vec<usize>,
    rows: Vec<usize>,
    cols: Vec<usize>,
}

impl Pattern {
    /// Builds a pattern from `(row, col)` pairs; duplicates are merged.
    pub fn from_entries(
        m: usize,
        n: usize,
        entries: impl IntoIterator<Item = (usize, usize)>,
    ) -> Result<Self> {
        let mut pairs: Vec<(usize, usize)> = entries.into_iter().collect();
        if let Some(&(r, c)) = pairs.iter().find(|&&(r, c)| r >= m || c >= n) {
            return Err(BamError::Dimension(format!(
                "entry ({r}, {c}) outside a {m}x{n} pattern"
            )));
        }
        pairs.sort_unstable();
        pairs.dedup();
        let mut row_ptr = vec![0; m + 1];
        for &(r, _) in &pairs {
            row_ptr[r + 1] += 1;
        }
        for i in 0..m {
            row_ptr[i + 1] += row_ptr[i];
        }
        let (rows, cols) = pairs.into_iter().unzip();
        Ok(Pattern {
            m,
            n,
            row_ptr,
            rows,
            cols,
        })
    }

    pub fn from_mask(mask: &Mask) -> Self {
        let entries = (0..mask.rows)
            .flat_map(|i| (0..mask.cols).map(move |j| (i, j)))
            .filter(|&(i, j)| mask.allowed(i, j));
        Pattern::from_entries(mask.rows, mask.cols, entries).expect("mask entries are in range")
    }

    pub fn full(m: usize, n: usize) -> Self {
        Pattern::from_mask(&Mask::full(m, n))
    }

    pub fn to_mask(&self) -> Mask {
        let mut allowed = vec![false; self.m * self.n];
        for (&r, &c) in self.rows.iter().zip(&self.cols) {
            allowed[r * self.n + c] = true;
        }
        Mask {
            rows: self.m,
            cols: self.n,
            allowed,
        }
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.cols.len()
    }

    pub fn row_ids(&self) -> &[usize] {
        &self.rows
    }

    pub fn col_ids(&self) -> &[usize] {
        &self.cols
    }

    pub fn row_range(&self, row: usize) -> std::ops::Range<usize> {
        self.row_ptr[row]..self.row_ptr[row + 1]
    }

    /// Flat row-major offsets of every entry inside the dense `m × n` matrix.
    pub fn flat_indices(&self) -> Vec<usize> {
        self.rows
            .iter()
            .zip(&self.cols)
            .map(|(&r, &c)| r * self.n + c)
            .collect()
    }

    pub fn ensure_rows_nonempty(&self) -> Result<()> {
        match (0..self.m).find(|&r| self.row_range(r).is_empty()) {
            Some(row) => Err(BamError::DegenerateRow { row }),
            None => Ok(()),
        }
    }
}
