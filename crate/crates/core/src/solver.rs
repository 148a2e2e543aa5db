//! Subset alternating least squares.
//!
//! Each outer iteration splits the K columns into ⌈K/C⌉ subsets. For each
//! subset the residual is augmented with the subset's contribution (R̂), the
//! subset columns of every factor matrix are refit row by row `inner_iters`
//! times by solving a C×C ridge system, and the residual is written back.
//! Coordinate descent (C = 1) and ALS (C = K, one inner iteration) are
//! parameterizations of the same loop.

use std::ops::ControlFlow;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::cholesky_solve;
use crate::tensor::{
    rmse, FactorModel, Regularization, ResidualKind, ResidualState, SparseTensorStore, TensorEntry,
};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ColumnOrder {
    /// Fresh seeded permutation of the columns every outer iteration.
    #[default]
    RandomPerOuter,
    /// Columns 0..K in order, chunked by C.
    Fixed,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolverParams {
    pub rank: usize,
    /// Columns updated jointly (C).
    pub columns: usize,
    pub outer_iters: usize,
    pub inner_iters: usize,
    pub lambda: f64,
    pub regularization: Regularization,
    pub column_order: ColumnOrder,
    pub seed: u64,
}

impl SolverParams {
    pub fn new(rank: usize, columns: usize) -> Self {
        SolverParams {
            rank,
            columns,
            outer_iters: 10,
            inner_iters: 1,
            lambda: 0.1,
            regularization: Regularization::Plain,
            column_order: ColumnOrder::RandomPerOuter,
            seed: 0,
        }
    }

    /// Coordinate descent: one column at a time in fixed order.
    pub fn cdtf(rank: usize) -> Self {
        SolverParams {
            column_order: ColumnOrder::Fixed,
            ..Self::new(rank, 1)
        }
    }

    /// ALS: all columns at once, one inner iteration.
    pub fn als(rank: usize) -> Self {
        Self::new(rank, rank)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::param("rank must be at least 1"));
        }
        if self.columns == 0 || self.columns > self.rank {
            return Err(Error::param(format!(
                "columns per subset must be in [1, {}], got {}",
                self.rank, self.columns
            )));
        }
        if self.outer_iters == 0 {
            return Err(Error::param("outer iterations must be at least 1"));
        }
        if self.inner_iters == 0 {
            return Err(Error::param("inner iterations must be at least 1"));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::param("lambda must be finite and nonnegative"));
        }
        Ok(())
    }

    pub fn subsets_per_outer(&self) -> usize {
        self.rank.div_ceil(self.columns)
    }
}

/// Instrumentation shared by the serial, distributed, and streaming paths.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Counters {
    /// Multiply-add operations in the numerical kernels.
    pub madds: u64,
    /// Number of R̂ arrays allocated.
    pub rhat_buffers: u64,
    /// Row updates skipped because the system was singular.
    pub skipped_rows: u64,
}

impl Counters {
    pub fn merge(&mut self, other: &Counters) {
        self.madds += other.madds;
        self.rhat_buffers += other.rhat_buffers;
        self.skipped_rows += other.skipped_rows;
    }
}

/// Seeded initial model: mode 0 zero, other modes uniform in [0, 1).
/// The residual therefore equals the data.
pub fn init_model(store: &SparseTensorStore, params: &SolverParams) -> (FactorModel, ResidualState) {
    let model = init_factors(store.dims(), params.rank, params.lambda, params.seed);
    (model, ResidualState::from_store(store))
}

pub(crate) fn init_factors(dims: &[usize], rank: usize, lambda: f64, seed: u64) -> FactorModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0);
    let mut model = FactorModel::zeros(dims, rank, lambda);
    for n in 1..dims.len() {
        for v in model.factor_mut(n).as_mut_slice() {
            *v = rng.random::<f64>();
        }
    }
    model
}

/// Column subsets for outer iteration `outer` (0-based). Each subset is
/// sorted; the sequence of subsets covers 0..K exactly once.
pub fn choose_columns(params: &SolverParams, outer: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..params.rank).collect();
    if params.column_order == ColumnOrder::RandomPerOuter {
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        rng.set_stream(outer as u64 + 1);
        order.shuffle(&mut rng);
    }
    order
        .chunks(params.columns.max(1))
        .map(|c| {
            let mut c = c.to_vec();
            c.sort_unstable();
            c
        })
        .collect()
}

/// Read access to the C active columns of every factor matrix.
pub trait ColumnSource {
    fn order(&self) -> usize;
    /// Number of active columns.
    fn width(&self) -> usize;
    /// Value of row `row` of mode `mode` in active column `slot`.
    fn value(&self, mode: usize, row: usize, slot: usize) -> f64;
}

/// Active columns viewed through a full model.
#[derive(Clone, Copy)]
pub struct ModelColumns<'a> {
    pub model: &'a FactorModel,
    pub columns: &'a [usize],
}

impl ColumnSource for ModelColumns<'_> {
    fn order(&self) -> usize {
        self.model.order()
    }
    fn width(&self) -> usize {
        self.columns.len()
    }
    #[inline]
    fn value(&self, mode: usize, row: usize, slot: usize) -> f64 {
        self.model.factor(mode).get(row, self.columns[slot])
    }
}

/// Σ_c Π_n a^(n)_{i_n k_c}
#[inline]
pub(crate) fn subset_contribution<S: ColumnSource>(src: &S, indices: &[usize], madds: &mut u64) -> f64 {
    let order = src.order();
    let mut sum = 0.0;
    for c in 0..src.width() {
        let mut prod = 1.0;
        for (l, &i) in indices.iter().enumerate().take(order) {
            prod *= src.value(l, i, c);
        }
        sum += prod;
    }
    *madds += (src.width() * (order + 1)) as u64;
    sum
}

/// out[c] = Π_{l≠mode} a^(l)_{i_l k_c}
#[inline]
pub(crate) fn partial_products<S: ColumnSource>(
    src: &S,
    indices: &[usize],
    mode: usize,
    out: &mut [f64],
    madds: &mut u64,
) {
    let order = src.order();
    for (c, o) in out.iter_mut().enumerate() {
        let mut prod = 1.0;
        for (l, &i) in indices.iter().enumerate().take(order) {
            if l != mode {
                prod *= src.value(l, i, c);
            }
        }
        *o = prod;
    }
    *madds += (out.len() * (order - 1)) as u64;
}

/// B (C×C, row-major, symmetric) and c (C) of one row's ridge system.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalEq {
    pub b: Vec<f64>,
    pub c: Vec<f64>,
}

impl NormalEq {
    pub fn zeros(width: usize) -> Self {
        NormalEq {
            b: vec![0.0; width * width],
            c: vec![0.0; width],
        }
    }

    pub fn width(&self) -> usize {
        self.c.len()
    }

    /// Adds one entry's contribution: B += π πᵀ, c += r̂ π.
    #[inline]
    pub fn accumulate(&mut self, products: &[f64], rhat: f64, madds: &mut u64) {
        let w = self.c.len();
        for c1 in 0..w {
            let p1 = products[c1];
            for c2 in 0..w {
                self.b[c1 * w + c2] += p1 * products[c2];
            }
            self.c[c1] += rhat * p1;
        }
        *madds += (w * w + w) as u64;
    }
}

/// r̂_p = r_p + Σ_c Π_n a^(n)_{i_n k_c}; the input residual is left untouched.
pub fn compute_rhat(
    residual: &ResidualState,
    store: &SparseTensorStore,
    model: &FactorModel,
    columns: &[usize],
    counters: &mut Counters,
) -> ResidualState {
    debug_assert_eq!(residual.kind, ResidualKind::Residual);
    counters.rhat_buffers += 1;
    let src = ModelColumns { model, columns };
    let values = residual
        .values
        .iter()
        .enumerate()
        .map(|(p, r)| r + subset_contribution(&src, store.index(p), &mut counters.madds))
        .collect();
    ResidualState {
        values,
        kind: ResidualKind::Augmented {
            columns: columns.to_vec(),
        },
    }
}

/// Row system accumulated over Ω^(mode)_row in canonical entry order.
pub fn build_normal_eq(
    rhat: &ResidualState,
    store: &SparseTensorStore,
    model: &FactorModel,
    mode: usize,
    row: usize,
    columns: &[usize],
    counters: &mut Counters,
) -> NormalEq {
    let src = ModelColumns { model, columns };
    accumulate_row(&src, store, &rhat.values, mode, row, &mut counters.madds)
}

pub(crate) fn accumulate_row<S: ColumnSource>(
    src: &S,
    store: &SparseTensorStore,
    rhat: &[f64],
    mode: usize,
    row: usize,
    madds: &mut u64,
) -> NormalEq {
    let w = src.width();
    let mut neq = NormalEq::zeros(w);
    let mut products = vec![0.0; w];
    for &p in store.mode_index(mode).row(row) {
        partial_products(src, store.index(p), mode, &mut products, madds);
        neq.accumulate(&products, rhat[p], madds);
    }
    neq
}

/// Result of one row solve.
#[derive(Clone, Debug, PartialEq)]
pub struct RowSolution {
    pub values: Vec<f64>,
    /// True when (B + λ'I) was singular; `values` is then all zeros.
    pub skipped: bool,
}

/// Solves (B + λ'·I) a = c by Cholesky.
pub fn solve_row(neq: &NormalEq, lambda_eff: f64) -> Result<RowSolution> {
    let mut madds = 0;
    solve_row_counted(neq, lambda_eff, &mut madds)
}

pub(crate) fn solve_row_counted(neq: &NormalEq, lambda_eff: f64, madds: &mut u64) -> Result<RowSolution> {
    if !lambda_eff.is_finite() || lambda_eff < 0.0 {
        return Err(Error::Numerical(format!("invalid row penalty {lambda_eff}")));
    }
    if neq.b.iter().chain(&neq.c).any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite normal equations".into()));
    }
    match cholesky_solve(&neq.b, &neq.c, lambda_eff, madds) {
        Some(values) => Ok(RowSolution {
            values,
            skipped: false,
        }),
        None => Ok(RowSolution {
            values: vec![0.0; neq.width()],
            skipped: true,
        }),
    }
}

/// Refits the active columns of every row of `mode`.
pub fn update_mode(
    rhat: &ResidualState,
    store: &SparseTensorStore,
    model: &mut FactorModel,
    mode: usize,
    columns: &[usize],
    reg: Regularization,
    counters: &mut Counters,
) -> Result<()> {
    let rows = 0..store.dims()[mode];
    update_rows(rhat, store, model, mode, columns, reg, rows, counters)
}

/// Refits the active columns of the given rows of `mode`. Rows are
/// independent, so any subset may be processed in any order.
#[allow(clippy::too_many_arguments)]
pub fn update_rows(
    rhat: &ResidualState,
    store: &SparseTensorStore,
    model: &mut FactorModel,
    mode: usize,
    columns: &[usize],
    reg: Regularization,
    rows: impl IntoIterator<Item = usize>,
    counters: &mut Counters,
) -> Result<()> {
    let lambda = model.lambda();
    for row in rows {
        let neq = {
            let src = ModelColumns {
                model: &*model,
                columns,
            };
            accumulate_row(&src, store, &rhat.values, mode, row, &mut counters.madds)
        };
        let sol = solve_row_counted(&neq, reg.row_lambda(lambda, store, mode, row), &mut counters.madds)?;
        if sol.skipped {
            counters.skipped_rows += 1;
            continue;
        }
        let f = model.factor_mut(mode);
        for (slot, &k) in columns.iter().enumerate() {
            f.set(row, k, sol.values[slot]);
        }
    }
    Ok(())
}

/// r_p = r̂_p − Σ_c Π_n a^(n)_{i_n k_c}, reusing the R̂ buffer.
pub fn update_residual(
    rhat: ResidualState,
    store: &SparseTensorStore,
    model: &FactorModel,
    columns: &[usize],
    counters: &mut Counters,
) -> ResidualState {
    let src = ModelColumns { model, columns };
    let mut values = rhat.values;
    for (p, v) in values.iter_mut().enumerate() {
        *v -= subset_contribution(&src, store.index(p), &mut counters.madds);
    }
    ResidualState {
        values,
        kind: ResidualKind::Residual,
    }
}

/// Training loss from the maintained residual plus the penalty.
pub fn residual_loss(
    residual: &ResidualState,
    store: &SparseTensorStore,
    model: &FactorModel,
    reg: Regularization,
) -> f64 {
    residual.sum_sq() + model.penalty(store, reg)
}

/// Per outer iteration progress.
#[derive(Clone, Debug, PartialEq)]
pub struct IterationRecord {
    /// 1-based outer iteration.
    pub iteration: usize,
    /// Solver time so far, excluding evaluation.
    pub elapsed: Duration,
    pub train_loss: f64,
    pub test_rmse: Option<f64>,
    pub params_sent: u64,
    pub params_received: u64,
    pub flops: u64,
}

type Callback<'a> = Box<dyn FnMut(&IterationRecord) -> ControlFlow<()> + 'a>;

/// Optional test set and per-iteration callback. Returning
/// `ControlFlow::Break` from the callback stops the run after that iteration.
#[derive(Default)]
pub struct Monitor<'a> {
    test: Option<&'a [TensorEntry]>,
    callback: Option<Callback<'a>>,
}

impl<'a> Monitor<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_test(mut self, test: &'a [TensorEntry]) -> Self {
        if !test.is_empty() {
            self.test = Some(test);
        }
        self
    }

    pub fn on_iteration(mut self, f: impl FnMut(&IterationRecord) -> ControlFlow<()> + 'a) -> Self {
        self.callback = Some(Box::new(f));
        self
    }

    pub(crate) fn test_set(&self) -> Option<&'a [TensorEntry]> {
        self.test
    }

    pub(crate) fn test_rmse(&self, model: &FactorModel) -> Result<Option<f64>> {
        self.test.map(|t| rmse(model, t)).transpose()
    }

    pub(crate) fn emit(&mut self, record: &IterationRecord) -> ControlFlow<()> {
        match self.callback.as_mut() {
            Some(f) => f(record),
            None => ControlFlow::Continue(()),
        }
    }
}

/// Everything a run produces.
#[derive(Clone, Debug)]
pub struct FitOutcome {
    pub model: FactorModel,
    pub residual: ResidualState,
    pub counters: Counters,
    pub history: Vec<IterationRecord>,
}

/// Serial SALS. Returns the final model.
pub fn factorize(store: &SparseTensorStore, params: &SolverParams, monitor: Monitor<'_>) -> Result<FactorModel> {
    factorize_detailed(store, params, monitor).map(|o| o.model)
}

pub fn factorize_detailed(
    store: &SparseTensorStore,
    params: &SolverParams,
    mut monitor: Monitor<'_>,
) -> Result<FitOutcome> {
    params.validate()?;
    let (mut model, mut residual) = init_model(store, params);
    let mut counters = Counters::default();
    let mut history = Vec::with_capacity(params.outer_iters);
    let mut elapsed = Duration::ZERO;

    for outer in 0..params.outer_iters {
        let start = Instant::now();
        let before = counters.madds;
        for columns in choose_columns(params, outer) {
            let rhat = compute_rhat(&residual, store, &model, &columns, &mut counters);
            for _ in 0..params.inner_iters {
                for mode in 0..store.order() {
                    update_mode(&rhat, store, &mut model, mode, &columns, params.regularization, &mut counters)?;
                }
            }
            residual = update_residual(rhat, store, &model, &columns, &mut counters);
        }
        elapsed += start.elapsed();
        let record = IterationRecord {
            iteration: outer + 1,
            elapsed,
            train_loss: residual_loss(&residual, store, &model, params.regularization),
            test_rmse: monitor.test_rmse(&model)?,
            params_sent: 0,
            params_received: 0,
            flops: counters.madds - before,
        };
        let flow = monitor.emit(&record);
        history.push(record);
        if flow.is_break() {
            break;
        }
    }
    if !model.is_finite() {
        return Err(Error::Numerical("factor matrices contain non-finite values".into()));
    }
    Ok(FitOutcome {
        model,
        residual,
        counters,
        history,
    })
}

/// Coordinate descent (C = 1, fixed column order) with R̂ fused into the
/// row-update passes: no R̂ array is materialized.
pub fn factorize_cdtf(store: &SparseTensorStore, params: &SolverParams, monitor: Monitor<'_>) -> Result<FactorModel> {
    factorize_cdtf_detailed(store, params, monitor).map(|o| o.model)
}

pub fn factorize_cdtf_detailed(
    store: &SparseTensorStore,
    params: &SolverParams,
    mut monitor: Monitor<'_>,
) -> Result<FitOutcome> {
    params.validate()?;
    if params.columns != 1 {
        return Err(Error::param("coordinate descent requires one column per subset"));
    }
    let (mut model, mut residual) = init_model(store, params);
    let mut counters = Counters::default();
    let mut history = Vec::with_capacity(params.outer_iters);
    let mut elapsed = Duration::ZERO;
    let order = store.order();
    let lambda = model.lambda();

    for outer in 0..params.outer_iters {
        let start = Instant::now();
        let before = counters.madds;
        for k in 0..params.rank {
            for _ in 0..params.inner_iters {
                for mode in 0..order {
                    for row in 0..store.dims()[mode] {
                        let bucket = store.mode_index(mode).row(row);
                        let current = model.factor(mode).get(row, k);
                        let (mut b, mut c) = (0.0, 0.0);
                        for &p in bucket {
                            let pi = cdtf_partial(&model, store.index(p), mode, k);
                            let rhat = residual.values[p] + current * pi;
                            b += pi * pi;
                            c += rhat * pi;
                        }
                        counters.madds += (bucket.len() * (order + 2)) as u64;
                        let neq = NormalEq { b: vec![b], c: vec![c] };
                        let lambda_eff = params.regularization.row_lambda(lambda, store, mode, row);
                        let sol = solve_row_counted(&neq, lambda_eff, &mut counters.madds)?;
                        if sol.skipped {
                            counters.skipped_rows += 1;
                            continue;
                        }
                        let updated = sol.values[0];
                        for &p in bucket {
                            let pi = cdtf_partial(&model, store.index(p), mode, k);
                            let rhat = residual.values[p] + current * pi;
                            residual.values[p] = rhat - updated * pi;
                        }
                        counters.madds += (bucket.len() * (order + 1)) as u64;
                        model.factor_mut(mode).set(row, k, updated);
                    }
                }
            }
        }
        elapsed += start.elapsed();
        let record = IterationRecord {
            iteration: outer + 1,
            elapsed,
            train_loss: residual_loss(&residual, store, &model, params.regularization),
            test_rmse: monitor.test_rmse(&model)?,
            params_sent: 0,
            params_received: 0,
            flops: counters.madds - before,
        };
        let flow = monitor.emit(&record);
        history.push(record);
        if flow.is_break() {
            break;
        }
    }
    if !model.is_finite() {
        return Err(Error::Numerical("factor matrices contain non-finite values".into()));
    }
    Ok(FitOutcome {
        model,
        residual,
        counters,
        history,
    })
}

#[inline]
fn cdtf_partial(model: &FactorModel, indices: &[usize], mode: usize, k: usize) -> f64 {
    let mut prod = 1.0;
    for (l, &i) in indices.iter().enumerate() {
        if l != mode {
            prod *= model.factor(l).get(i, k);
        }
    }
    prod
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{loss_with, verify_residual, FactorMatrix};

    fn e(idx: &[usize], v: f64) -> TensorEntry {
        TensorEntry::new(idx.to_vec(), v)
    }

    fn random_store(dims: &[usize], nnz: usize, seed: u64) -> SparseTensorStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut set = std::collections::BTreeSet::new();
        while set.len() < nnz {
            set.insert(dims.iter().map(|&d| rng.random_range(0..d)).collect::<Vec<_>>());
        }
        let entries = set
            .into_iter()
            .map(|i| TensorEntry::new(i, rng.random_range(-1.0..3.0)))
            .collect();
        SparseTensorStore::build(entries, dims).unwrap()
    }

    #[test]
    fn init_zeroes_first_factor() {
        let store = random_store(&[5, 6, 7], 40, 1);
        let params = SolverParams::new(3, 1);
        let (model, residual) = init_model(&store, &params);
        assert!(model.factor(0).as_slice().iter().all(|&v| v == 0.0));
        for n in 1..3 {
            assert!(model.factor(n).as_slice().iter().all(|&v| (0.0..1.0).contains(&v)));
        }
        assert_eq!(verify_residual(&residual, &store, &model), 0.0);
        let (again, _) = init_model(&store, &params);
        assert_eq!(model, again);
    }

    #[test]
    fn column_subsets() {
        let mut p = SolverParams::new(4, 2);
        p.column_order = ColumnOrder::Fixed;
        assert_eq!(choose_columns(&p, 0), vec![vec![0, 1], vec![2, 3]]);
        assert_eq!(choose_columns(&p, 7), vec![vec![0, 1], vec![2, 3]]);
        let p = SolverParams::new(5, 2);
        let sizes: Vec<_> = choose_columns(&p, 0).iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![2, 2, 1]);
    }

    #[test]
    fn random_subsets_partition_and_reproduce() {
        let p = SolverParams::new(100, 10);
        for outer in 0..5 {
            let subsets = choose_columns(&p, outer);
            assert_eq!(subsets.len(), 10);
            let mut all: Vec<usize> = subsets.iter().flatten().copied().collect();
            all.sort();
            assert_eq!(all, (0..100).collect::<Vec<_>>());
            assert_eq!(subsets, choose_columns(&p, outer));
        }
        assert_ne!(choose_columns(&p, 0), choose_columns(&p, 1));
    }

    #[test]
    fn rhat_single_entry() {
        let store = SparseTensorStore::build(vec![e(&[0, 0], 7.0)], &[1, 1]).unwrap();
        let a = FactorMatrix::from_vec(1, 1, vec![2.0]).unwrap();
        let b = FactorMatrix::from_vec(1, 1, vec![3.0]).unwrap();
        let model = FactorModel::from_factors(vec![a, b], 0.0).unwrap();
        let r = ResidualState {
            values: vec![1.0],
            kind: ResidualKind::Residual,
        };
        let mut cnt = Counters::default();
        let rhat = compute_rhat(&r, &store, &model, &[0], &mut cnt);
        assert_eq!(rhat.values, vec![7.0]);
        assert_eq!(r.values, vec![1.0]);
        assert_eq!(cnt.rhat_buffers, 1);
    }

    #[test]
    fn rhat_zero_columns_and_full_rank() {
        let store = random_store(&[6, 5, 4], 60, 3);
        let params = SolverParams::new(3, 3);
        let (model, residual) = init_model(&store, &params);
        let mut cnt = Counters::default();
        // A^(1) is zero so every column contributes nothing
        let rhat = compute_rhat(&residual, &store, &model, &[0, 2], &mut cnt);
        assert_eq!(rhat.values, residual.values);

        let mut model = model;
        for v in model.factor_mut(0).as_mut_slice() {
            *v = 0.3;
        }
        let residual = ResidualState::compute(&store, &model);
        let rhat = compute_rhat(&residual, &store, &model, &[0, 1, 2], &mut cnt);
        for (p, v) in rhat.values.iter().enumerate() {
            assert!((v - store.value(p)).abs() <= 1e-9);
        }
    }

    #[test]
    fn normal_eq_single_term_and_empty_row() {
        let store = SparseTensorStore::build(vec![e(&[0, 0], 6.0)], &[2, 1]).unwrap();
        let a = FactorMatrix::from_vec(2, 1, vec![0.0, 0.0]).unwrap();
        let b = FactorMatrix::from_vec(1, 1, vec![3.0]).unwrap();
        let model = FactorModel::from_factors(vec![a, b], 0.0).unwrap();
        let rhat = ResidualState {
            values: vec![6.0],
            kind: ResidualKind::Augmented { columns: vec![0] },
        };
        let mut cnt = Counters::default();
        let neq = build_normal_eq(&rhat, &store, &model, 0, 0, &[0], &mut cnt);
        assert_eq!(neq.b, vec![9.0]);
        assert_eq!(neq.c, vec![18.0]);
        let neq = build_normal_eq(&rhat, &store, &model, 0, 1, &[0], &mut cnt);
        assert_eq!(neq.b, vec![0.0]);
        assert_eq!(neq.c, vec![0.0]);
    }

    #[test]
    fn solve_row_cases() {
        let neq = NormalEq {
            b: vec![1.0, 0.0, 0.0, 1.0],
            c: vec![0.0, 0.0],
        };
        assert_eq!(solve_row(&neq, 0.0).unwrap().values, vec![0.0, 0.0]);
        let neq = NormalEq { b: vec![1.0], c: vec![1.0] };
        assert_eq!(solve_row(&neq, 1.0).unwrap().values, vec![0.5]);
        let singular = NormalEq { b: vec![0.0], c: vec![0.0] };
        let sol = solve_row(&singular, 0.0).unwrap();
        assert!(sol.skipped);
        assert_eq!(sol.values, vec![0.0]);
        let bad = NormalEq {
            b: vec![f64::NAN],
            c: vec![1.0],
        };
        assert!(solve_row(&bad, 1.0).is_err());
        assert!(solve_row(&neq, f64::INFINITY).is_err());
    }

    #[test]
    fn single_entry_exact_fit() {
        let store = SparseTensorStore::build(vec![e(&[0, 0], 2.0)], &[1, 1]).unwrap();
        let mut params = SolverParams::new(1, 1);
        params.lambda = 0.0;
        let (mut model, residual) = init_model(&store, &params);
        model.factor_mut(1).set(0, 0, 3.0);
        let mut cnt = Counters::default();
        let rhat = compute_rhat(&residual, &store, &model, &[0], &mut cnt);
        update_mode(&rhat, &store, &mut model, 0, &[0], Regularization::Plain, &mut cnt).unwrap();
        assert!((model.factor(0).get(0, 0) - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn huge_lambda_shrinks_to_zero() {
        let store = random_store(&[4, 4], 10, 2);
        let mut params = SolverParams::new(2, 2);
        params.lambda = 1e12;
        let (mut model, residual) = init_model(&store, &params);
        let mut cnt = Counters::default();
        let rhat = compute_rhat(&residual, &store, &model, &[0, 1], &mut cnt);
        update_mode(&rhat, &store, &mut model, 1, &[0, 1], Regularization::Plain, &mut cnt).unwrap();
        assert!(model.factor(1).as_slice().iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn singular_rows_are_skipped_and_kept() {
        // row 1 of mode 0 has no entries; λ = 0 makes its system singular
        let store = SparseTensorStore::build(vec![e(&[0, 0], 1.0), e(&[0, 1], 2.0)], &[2, 2]).unwrap();
        let mut params = SolverParams::new(1, 1);
        params.lambda = 0.0;
        let (mut model, residual) = init_model(&store, &params);
        model.factor_mut(0).set(1, 0, 0.25);
        let mut cnt = Counters::default();
        let rhat = compute_rhat(&residual, &store, &model, &[0], &mut cnt);
        update_mode(&rhat, &store, &mut model, 0, &[0], Regularization::Plain, &mut cnt).unwrap();
        assert_eq!(cnt.skipped_rows, 1);
        assert_eq!(model.factor(0).get(1, 0), 0.25);
        assert!(model.is_finite());
    }

    #[test]
    fn rhat_residual_round_trip() {
        let store = random_store(&[5, 5, 5], 50, 4);
        let params = SolverParams::new(4, 2);
        let (mut model, _) = init_model(&store, &params);
        for v in model.factor_mut(0).as_mut_slice() {
            *v = 0.7;
        }
        let residual = ResidualState::compute(&store, &model);
        let mut cnt = Counters::default();
        let rhat = compute_rhat(&residual, &store, &model, &[1, 3], &mut cnt);
        let back = update_residual(rhat, &store, &model, &[1, 3], &mut cnt);
        for (a, b) in back.values.iter().zip(&residual.values) {
            assert!((a - b).abs() <= 1e-12);
        }
        let rhat = compute_rhat(&residual, &store, &model, &[], &mut cnt);
        let back = update_residual(rhat, &store, &model, &[], &mut cnt);
        assert_eq!(back.values, residual.values);
    }

    #[test]
    fn residual_stays_consistent() {
        let store = random_store(&[6, 7, 5], 120, 5);
        let mut params = SolverParams::new(4, 2);
        params.inner_iters = 2;
        params.outer_iters = 3;
        let out = factorize_detailed(&store, &params, Monitor::new()).unwrap();
        assert!(verify_residual(&out.residual, &store, &out.model) <= 1e-9 * store.max_abs_value());
    }

    #[test]
    fn zero_outer_iterations_rejected() {
        let store = random_store(&[3, 3], 4, 6);
        let mut params = SolverParams::new(2, 2);
        params.outer_iters = 0;
        assert!(factorize(&store, &params, Monitor::new()).is_err());
        let mut params = SolverParams::new(2, 3);
        params.outer_iters = 1;
        assert!(factorize(&store, &params, Monitor::new()).is_err());
    }

    #[test]
    fn one_als_step_reduces_loss() {
        let store = random_store(&[4, 5], 12, 7);
        let mut params = SolverParams::als(2);
        params.outer_iters = 1;
        let (init, _) = init_model(&store, &params);
        let before = loss_with(&init, &store, params.regularization);
        let model = factorize(&store, &params, Monitor::new()).unwrap();
        assert!(loss_with(&model, &store, params.regularization) <= before);
    }

    #[test]
    fn cdtf_matches_general_path() {
        let store = random_store(&[8, 6, 7], 150, 8);
        for (rank, inner) in [(1, 1), (3, 1), (3, 2)] {
            let mut params = SolverParams::cdtf(rank);
            params.inner_iters = inner;
            params.outer_iters = 4;
            let general = factorize_detailed(&store, &params, Monitor::new()).unwrap();
            let fused = factorize_cdtf_detailed(&store, &params, Monitor::new()).unwrap();
            assert_eq!(fused.counters.rhat_buffers, 0);
            assert!(general.counters.rhat_buffers > 0);
            for n in 0..3 {
                for (a, b) in general.model.factor(n).as_slice().iter().zip(fused.model.factor(n).as_slice()) {
                    assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn runs_are_bitwise_deterministic() {
        let store = random_store(&[8, 9, 7], 200, 9);
        let mut params = SolverParams::new(5, 2);
        params.outer_iters = 3;
        params.regularization = Regularization::Weighted;
        let a = factorize(&store, &params, Monitor::new()).unwrap();
        let b = factorize(&store, &params, Monitor::new()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn monitor_records_and_can_stop() {
        let store = random_store(&[6, 6], 20, 10);
        let mut params = SolverParams::new(2, 1);
        params.outer_iters = 5;
        let test = vec![e(&[0, 0], 1.0)];
        let mut seen = Vec::new();
        let out = factorize_detailed(
            &store,
            &params,
            Monitor::new().with_test(&test).on_iteration(|r| {
                seen.push(r.iteration);
                if r.iteration == 2 {
                    ControlFlow::Break(())
                } else {
                    ControlFlow::Continue(())
                }
            }),
        )
        .unwrap();
        assert_eq!(seen, vec![1, 2]);
        assert_eq!(out.history.len(), 2);
        assert!(out.history[0].test_rmse.is_some());
        assert!(out.history[0].flops > 0);
    }
}
