//! Sparse observed-entry storage, factor matrices, and the loss/RMSE
//! evaluations shared by every solver.
//!
//! Indices are 0-based throughout the library. The 1-based convention used
//! by the text formats is converted at the I/O boundary (see [`crate::io`]).

use std::fmt;

use crate::error::{Error, Result};

/// One observed tensor cell.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorEntry {
    pub indices: Vec<usize>,
    pub value: f64,
}

impl TensorEntry {
    pub fn new(indices: Vec<usize>, value: f64) -> Self {
        TensorEntry { indices, value }
    }
}

/// Row buckets for one mode: `row(i)` lists the positions (into the shared
/// entry array) whose index in this mode equals `i`, in ascending order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModeIndex {
    offsets: Vec<usize>,
    positions: Vec<usize>,
}

impl ModeIndex {
    fn build(order: usize, mode: usize, length: usize, indices: &[usize]) -> Self {
        let nnz = if order == 0 { 0 } else { indices.len() / order };
        let mut counts = vec![0usize; length + 1];
        for p in 0..nnz {
            counts[indices[p * order + mode] + 1] += 1;
        }
        for i in 0..length {
            counts[i + 1] += counts[i];
        }
        let offsets = counts.clone();
        let mut cursor = counts;
        let mut positions = vec![0usize; nnz];
        // positions are visited in ascending order, so every bucket stays sorted
        for p in 0..nnz {
            let row = indices[p * order + mode];
            positions[cursor[row]] = p;
            cursor[row] += 1;
        }
        ModeIndex { offsets, positions }
    }

    pub fn rows(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.positions[self.offsets[i]..self.offsets[i + 1]]
    }

    pub fn row_len(&self, i: usize) -> usize {
        self.offsets[i + 1] - self.offsets[i]
    }

    /// All positions grouped by ascending row.
    pub fn grouped_positions(&self) -> &[usize] {
        &self.positions
    }
}

/// Immutable COO store of the observed set, sorted lexicographically by
/// index tuple, with one [`ModeIndex`] per mode.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseTensorStore {
    dims: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
    mode_index: Vec<ModeIndex>,
}

impl SparseTensorStore {
    /// Validates and sorts `entries`. Rejects out-of-range indices and
    /// duplicate index tuples.
    pub fn build(mut entries: Vec<TensorEntry>, dims: &[usize]) -> Result<Self> {
        let order = dims.len();
        if order == 0 {
            return Err(Error::param("tensor must have at least one mode"));
        }
        for (position, e) in entries.iter().enumerate() {
            if e.indices.len() != order {
                return Err(Error::DimensionMismatch {
                    position,
                    expected: order,
                    found: e.indices.len(),
                });
            }
            for (mode, (&index, &length)) in e.indices.iter().zip(dims).enumerate() {
                if index >= length {
                    return Err(Error::IndexOutOfRange {
                        position,
                        mode,
                        index,
                        length,
                    });
                }
            }
        }
        entries.sort_by(|a, b| a.indices.cmp(&b.indices));
        if let Some(w) = entries.windows(2).find(|w| w[0].indices == w[1].indices) {
            return Err(Error::DuplicateEntry {
                indices: w[0].indices.clone(),
            });
        }
        let mut indices = Vec::with_capacity(entries.len() * order);
        let mut values = Vec::with_capacity(entries.len());
        for e in entries {
            indices.extend_from_slice(&e.indices);
            values.push(e.value);
        }
        Ok(Self::from_sorted_parts(dims.to_vec(), indices, values))
    }

    fn from_sorted_parts(dims: Vec<usize>, indices: Vec<usize>, values: Vec<f64>) -> Self {
        let order = dims.len();
        let mode_index = (0..order)
            .map(|n| ModeIndex::build(order, n, dims[n], &indices))
            .collect();
        SparseTensorStore {
            dims,
            indices,
            values,
            mode_index,
        }
    }

    /// Store holding only the given positions (ascending), keeping the mode
    /// lengths. Canonical order is preserved.
    pub fn restrict(&self, positions: &[usize]) -> SparseTensorStore {
        debug_assert!(positions.windows(2).all(|w| w[0] < w[1]));
        let order = self.order();
        let mut indices = Vec::with_capacity(positions.len() * order);
        let mut values = Vec::with_capacity(positions.len());
        for &p in positions {
            indices.extend_from_slice(self.index(p));
            values.push(self.values[p]);
        }
        Self::from_sorted_parts(self.dims.clone(), indices, values)
    }

    /// Number of modes N.
    pub fn order(&self) -> usize {
        self.dims.len()
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    /// Number of observed entries |Ω|.
    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn index(&self, position: usize) -> &[usize] {
        let n = self.order();
        &self.indices[position * n..(position + 1) * n]
    }

    pub fn value(&self, position: usize) -> f64 {
        self.values[position]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn mode_index(&self, mode: usize) -> &ModeIndex {
        &self.mode_index[mode]
    }

    /// |Ω^(n)_i|
    pub fn row_count(&self, mode: usize, row: usize) -> usize {
        self.mode_index[mode].row_len(row)
    }

    pub fn entry(&self, position: usize) -> TensorEntry {
        TensorEntry::new(self.index(position).to_vec(), self.values[position])
    }

    pub fn entries(&self) -> impl Iterator<Item = TensorEntry> + '_ {
        (0..self.nnz()).map(|p| self.entry(p))
    }

    pub fn max_abs_value(&self) -> f64 {
        self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

/// Dense row-major `rows × cols` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct FactorMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl FactorMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        FactorMatrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::param(format!(
                "matrix data has {} values, expected {rows}x{cols}",
                data.len()
            )));
        }
        Ok(FactorMatrix { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.data[row * self.cols + col] = value;
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.data[row * self.cols..(row + 1) * self.cols]
    }

    pub fn row_mut(&mut self, row: usize) -> &mut [f64] {
        &mut self.data[row * self.cols..(row + 1) * self.cols]
    }

    pub fn column(&self, col: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, col)).collect()
    }

    pub fn set_column(&mut self, col: usize, values: &[f64]) {
        assert_eq!(values.len(), self.rows);
        for (i, &v) in values.iter().enumerate() {
            self.set(i, col, v);
        }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }
}

/// How the ridge penalty of a row is scaled.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Regularization {
    /// λ for every row.
    #[default]
    Plain,
    /// λ·|Ω^(n)_i| for row i of mode n (weighted-λ-regularization).
    Weighted,
}

impl Regularization {
    /// Effective penalty for row `row` of mode `mode`.
    pub fn row_lambda(self, lambda: f64, store: &SparseTensorStore, mode: usize, row: usize) -> f64 {
        match self {
            Regularization::Plain => lambda,
            Regularization::Weighted => lambda * store.row_count(mode, row) as f64,
        }
    }
}

impl fmt::Display for Regularization {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Regularization::Plain => f.write_str("plain"),
            Regularization::Weighted => f.write_str("weighted"),
        }
    }
}

/// CP model: one `I_n × K` factor matrix per mode, plus the penalty weight.
#[derive(Clone, Debug, PartialEq)]
pub struct FactorModel {
    rank: usize,
    lambda: f64,
    factors: Vec<FactorMatrix>,
}

impl FactorModel {
    pub fn zeros(dims: &[usize], rank: usize, lambda: f64) -> Self {
        FactorModel {
            rank,
            lambda,
            factors: dims.iter().map(|&d| FactorMatrix::zeros(d, rank)).collect(),
        }
    }

    pub fn from_factors(factors: Vec<FactorMatrix>, lambda: f64) -> Result<Self> {
        let rank = factors.first().map(|f| f.cols()).unwrap_or(0);
        if factors.iter().any(|f| f.cols() != rank) {
            return Err(Error::param("factor matrices disagree on rank"));
        }
        if !(lambda >= 0.0) {
            return Err(Error::param("lambda must be nonnegative"));
        }
        Ok(FactorModel {
            rank,
            lambda,
            factors,
        })
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn order(&self) -> usize {
        self.factors.len()
    }

    pub fn dims(&self) -> Vec<usize> {
        self.factors.iter().map(|f| f.rows()).collect()
    }

    pub fn factor(&self, mode: usize) -> &FactorMatrix {
        &self.factors[mode]
    }

    pub fn factor_mut(&mut self, mode: usize) -> &mut FactorMatrix {
        &mut self.factors[mode]
    }

    pub fn factors(&self) -> &[FactorMatrix] {
        &self.factors
    }

    pub fn into_factors(self) -> Vec<FactorMatrix> {
        self.factors
    }

    pub fn is_finite(&self) -> bool {
        self.factors
            .iter()
            .all(|f| f.as_slice().iter().all(|v| v.is_finite()))
    }

    /// Σ_k Π_n a^(n)_{i_n k}
    pub fn reconstruct(&self, indices: &[usize]) -> f64 {
        let mut sum = 0.0;
        for k in 0..self.rank {
            sum += self.column_product(indices, k);
        }
        sum
    }

    /// Π_n a^(n)_{i_n k}
    #[inline]
    pub fn column_product(&self, indices: &[usize], k: usize) -> f64 {
        let mut prod = 1.0;
        for (f, &i) in self.factors.iter().zip(indices) {
            prod *= f.get(i, k);
        }
        prod
    }

    /// Checks that the model matches the tensor shape.
    pub fn check_compatible(&self, dims: &[usize]) -> Result<()> {
        if self.dims() != dims {
            return Err(Error::param(format!(
                "model shape {:?} does not match tensor shape {:?}",
                self.dims(),
                dims
            )));
        }
        Ok(())
    }

    /// Σ_n Σ_i λ'_{n,i} ‖a^(n)_i‖²
    pub fn penalty(&self, store: &SparseTensorStore, reg: Regularization) -> f64 {
        let mut total = 0.0;
        for (n, f) in self.factors.iter().enumerate() {
            match reg {
                Regularization::Plain => total += self.lambda * f.frobenius_sq(),
                Regularization::Weighted => {
                    for i in 0..f.rows() {
                        let sq: f64 = f.row(i).iter().map(|v| v * v).sum();
                        total += reg.row_lambda(self.lambda, store, n, i) * sq;
                    }
                }
            }
        }
        total
    }
}

/// Σ_Ω (x − x̃)² + λ Σ_n ‖A^(n)‖²_F
pub fn loss(model: &FactorModel, store: &SparseTensorStore) -> f64 {
    loss_with(model, store, Regularization::Plain)
}

/// Loss with the penalty scaled per `reg`.
pub fn loss_with(model: &FactorModel, store: &SparseTensorStore, reg: Regularization) -> f64 {
    let mut sse = 0.0;
    for p in 0..store.nnz() {
        let d = store.value(p) - model.reconstruct(store.index(p));
        sse += d * d;
    }
    sse + model.penalty(store, reg)
}

/// Root mean squared error over held-out entries.
pub fn rmse(model: &FactorModel, test: &[TensorEntry]) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::param("RMSE requires a non-empty test set"));
    }
    let dims = model.dims();
    let mut sse = 0.0;
    for (position, e) in test.iter().enumerate() {
        if e.indices.len() != dims.len() {
            return Err(Error::DimensionMismatch {
                position,
                expected: dims.len(),
                found: e.indices.len(),
            });
        }
        for (mode, (&index, &length)) in e.indices.iter().zip(&dims).enumerate() {
            if index >= length {
                return Err(Error::IndexOutOfRange {
                    position,
                    mode,
                    index,
                    length,
                });
            }
        }
        let d = e.value - model.reconstruct(&e.indices);
        sse += d * d;
    }
    Ok((sse / test.len() as f64).sqrt())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ResidualKind {
    /// r = x − Σ_k Π_n a
    Residual,
    /// r̂ = r + Σ_{c} Π_n a over the listed columns
    Augmented { columns: Vec<usize> },
}

/// Per-entry residual values aligned with the store's entry array.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualState {
    pub values: Vec<f64>,
    pub kind: ResidualKind,
}

impl ResidualState {
    /// Residual of a zero reconstruction: r = x.
    pub fn from_store(store: &SparseTensorStore) -> Self {
        ResidualState {
            values: store.values().to_vec(),
            kind: ResidualKind::Residual,
        }
    }

    /// Residual recomputed from scratch.
    pub fn compute(store: &SparseTensorStore, model: &FactorModel) -> Self {
        let values = (0..store.nnz())
            .map(|p| store.value(p) - model.reconstruct(store.index(p)))
            .collect();
        ResidualState {
            values,
            kind: ResidualKind::Residual,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn sum_sq(&self) -> f64 {
        self.values.iter().map(|r| r * r).sum()
    }
}

/// max_p |r_p − (x_p − x̃_p)|
pub fn verify_residual(residual: &ResidualState, store: &SparseTensorStore, model: &FactorModel) -> f64 {
    debug_assert_eq!(residual.kind, ResidualKind::Residual);
    residual
        .values
        .iter()
        .enumerate()
        .map(|(p, r)| (r - (store.value(p) - model.reconstruct(store.index(p)))).abs())
        .fold(0.0, f64::max)
}
