//! Parallelized SGD baseline: entries are split into M random shards, each
//! shard runs plain SGD on a private copy of the model, and the copies are
//! averaged after every epoch.

use std::ops::ControlFlow;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::solver::{init_factors, IterationRecord, Monitor};
use crate::tensor::{loss, FactorModel, SparseTensorStore};

#[derive(Clone, Debug, PartialEq)]
pub struct SgdParams {
    pub rank: usize,
    pub lambda: f64,
    /// Initial learning rate η₀.
    pub eta0: f64,
    pub outer_iters: usize,
    /// Number of shards (machines).
    pub shards: usize,
    pub seed: u64,
}

impl SgdParams {
    pub fn new(rank: usize) -> Self {
        SgdParams {
            rank,
            lambda: 0.1,
            eta0: 0.01,
            outer_iters: 10,
            shards: 1,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::param("rank must be at least 1"));
        }
        if !(self.eta0 > 0.0) || !self.eta0.is_finite() {
            return Err(Error::param("initial learning rate must be positive"));
        }
        if self.shards == 0 {
            return Err(Error::param("shard count must be at least 1"));
        }
        if self.outer_iters == 0 {
            return Err(Error::param("outer iterations must be at least 1"));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::param("lambda must be nonnegative"));
        }
        Ok(())
    }
}

/// Learning rate of epoch `t` (0-based): 2η₀ / (1 + t).
pub fn learning_rate(eta0: f64, epoch: usize) -> f64 {
    2.0 * eta0 / (1.0 + epoch as f64)
}

/// Applies one SGD step for a single observed entry to all NK parameters
/// touching it. `residual` is x − x̃ evaluated before the step; every
/// parameter sees the pre-step values of the others.
pub fn sgd_update_entry(
    model: &mut FactorModel,
    store: &SparseTensorStore,
    indices: &[usize],
    residual: f64,
    eta: f64,
    lambda: f64,
) {
    let order = model.order();
    let rank = model.rank();
    let mut partials = vec![0.0; order * rank];
    for k in 0..rank {
        let full = model.column_product(indices, k);
        for n in 0..order {
            let a = model.factor(n).get(indices[n], k);
            partials[n * rank + k] = if a != 0.0 {
                full / a
            } else {
                let mut prod = 1.0;
                for (l, &i) in indices.iter().enumerate() {
                    if l != n {
                        prod *= model.factor(l).get(i, k);
                    }
                }
                prod
            };
        }
    }
    for n in 0..order {
        let row = indices[n];
        let count = store.row_count(n, row).max(1) as f64;
        let values = model.factor_mut(n).row_mut(row);
        for k in 0..rank {
            let a = values[k];
            values[k] = a - 2.0 * eta * (lambda * a / count - residual * partials[n * rank + k]);
        }
    }
}

/// Sequential SGD over `positions` in the given order.
pub fn sgd_pass(store: &SparseTensorStore, model: &mut FactorModel, positions: &[usize], eta: f64) {
    let lambda = model.lambda();
    for &p in positions {
        let idx = store.index(p);
        let r = store.value(p) - model.reconstruct(idx);
        sgd_update_entry(model, store, idx, r, eta, lambda);
    }
}

/// Entrywise mean of the models, summed in slice order.
pub fn average_models(models: &[FactorModel]) -> Result<FactorModel> {
    let first = models.first().ok_or_else(|| Error::param("nothing to average"))?;
    let mut acc = first.clone();
    for m in &models[1..] {
        if m.dims() != acc.dims() || m.rank() != acc.rank() {
            return Err(Error::param("cannot average models of different shapes"));
        }
        for n in 0..acc.order() {
            for (a, b) in acc.factor_mut(n).as_mut_slice().iter_mut().zip(m.factor(n).as_slice()) {
                *a += b;
            }
        }
    }
    let scale = models.len() as f64;
    if models.len() > 1 {
        for n in 0..acc.order() {
            for a in acc.factor_mut(n).as_mut_slice() {
                *a /= scale;
            }
        }
    }
    Ok(acc)
}

/// Seeded split of all entry positions into `shards` shuffled shards.
pub fn shard_positions(nnz: usize, shards: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut positions: Vec<usize> = (0..nnz).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    positions.shuffle(&mut rng);
    let base = nnz / shards;
    let extra = nnz % shards;
    let mut out = Vec::with_capacity(shards);
    let mut start = 0;
    for s in 0..shards {
        let len = base + usize::from(s < extra);
        out.push(positions[start..start + len].to_vec());
        start += len;
    }
    out
}

/// Runs every shard from a private copy of `model` and averages the results.
pub fn run_shards(
    store: &SparseTensorStore,
    model: &FactorModel,
    shards: &[Vec<usize>],
    eta: f64,
) -> Result<FactorModel> {
    let results: Vec<FactorModel> = if shards.len() == 1 {
        let mut m = model.clone();
        sgd_pass(store, &mut m, &shards[0], eta);
        vec![m]
    } else {
        std::thread::scope(|scope| {
            let handles: Vec<_> = shards
                .iter()
                .map(|positions| {
                    scope.spawn(move || {
                        let mut m = model.clone();
                        sgd_pass(store, &mut m, positions, eta);
                        m
                    })
                })
                .collect();
            handles
                .into_iter()
                .enumerate()
                .map(|(worker, h)| {
                    h.join().map_err(|_| Error::Worker {
                        worker,
                        message: "SGD shard panicked".into(),
                    })
                })
                .collect::<Result<Vec<_>>>()
        })?
    };
    average_models(&results)
}

/// One PSGD epoch with learning rate 2η₀/(1+t).
pub fn psgd_epoch(
    store: &SparseTensorStore,
    model: &FactorModel,
    params: &SgdParams,
    epoch: usize,
) -> Result<FactorModel> {
    let shards = shard_positions(store.nnz(), params.shards, params.seed, epoch);
    run_shards(store, model, &shards, learning_rate(params.eta0, epoch))
}

/// Full PSGD run from the same seeded initialization as the SALS family.
pub fn psgd(store: &SparseTensorStore, params: &SgdParams, mut monitor: Monitor<'_>) -> Result<(FactorModel, Vec<IterationRecord>)> {
    params.validate()?;
    let mut model = init_factors(store.dims(), params.rank, params.lambda, params.seed);
    let mut history = Vec::new();
    let mut elapsed = Duration::ZERO;
    let dims_sum: usize = store.dims().iter().sum();
    let exchanged = if params.shards > 1 {
        (params.rank * dims_sum) as u64
    } else {
        0
    };
    for epoch in 0..params.outer_iters {
        let start = Instant::now();
        model = psgd_epoch(store, &model, params, epoch)?;
        elapsed += start.elapsed();
        if !model.is_finite() {
            return Err(Error::Numerical(format!(
                "SGD diverged in epoch {}; lower the learning rate",
                epoch + 1
            )));
        }
        let record = IterationRecord {
            iteration: epoch + 1,
            elapsed,
            train_loss: loss(&model, store),
            test_rmse: monitor.test_rmse(&model)?,
            params_sent: exchanged * params.shards as u64,
            params_received: exchanged * params.shards as u64,
            flops: (store.nnz() * store.order() * params.rank * 3) as u64,
        };
        let flow = monitor.emit(&record);
        history.push(record);
        if flow == ControlFlow::Break(()) {
            break;
        }
    }
    Ok((model, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{FactorMatrix, TensorEntry};
    use rand::Rng;

    fn random_store(dims: &[usize], nnz: usize, seed: u64) -> SparseTensorStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut set = std::collections::BTreeSet::new();
        while set.len() < nnz {
            set.insert(dims.iter().map(|&d| rng.random_range(0..d)).collect::<Vec<_>>());
        }
        let entries = set
            .into_iter()
            .map(|i| TensorEntry::new(i, rng.random_range(0.0..2.0)))
            .collect();
        SparseTensorStore::build(entries, dims).unwrap()
    }

    fn random_model(dims: &[usize], rank: usize, lambda: f64, seed: u64) -> FactorModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let factors = dims
            .iter()
            .map(|&d| {
                FactorMatrix::from_vec(d, rank, (0..d * rank).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
            })
            .collect();
        FactorModel::from_factors(factors, lambda).unwrap()
    }

    #[test]
    fn zero_gradient_leaves_model() {
        let store = random_store(&[3, 3], 4, 1);
        let mut m = random_model(&[3, 3], 2, 0.0, 2);
        let before = m.clone();
        sgd_update_entry(&mut m, &store, store.index(0), 0.0, 0.1, 0.0);
        assert_eq!(m, before);

        let store = SparseTensorStore::build(vec![TensorEntry::new(vec![0, 0], 1.0)], &[1, 1]).unwrap();
        let ones = FactorMatrix::from_vec(1, 1, vec![1.0]).unwrap();
        let mut m = FactorModel::from_factors(vec![ones.clone(), ones], 0.0).unwrap();
        let before = m.clone();
        sgd_pass(&store, &mut m, &[0], 0.5);
        assert_eq!(m, before);
    }

    /// f(θ) = (x − x̃)² + Σ_n λ/|Ω^(n)_{i_n}| Σ_k a²; the step must equal −η ∇f.
    #[test]
    fn step_matches_finite_difference_gradient() {
        let dims = [4, 3, 5];
        let store = random_store(&dims, 20, 3);
        let lambda = 0.3;
        let model = random_model(&dims, 2, lambda, 4);
        let p = 7;
        let idx = store.index(p).to_vec();
        let x = store.value(p);
        let term = |m: &FactorModel| {
            let mut f = (x - m.reconstruct(&idx)).powi(2);
            for n in 0..3 {
                let cnt = store.row_count(n, idx[n]) as f64;
                f += lambda / cnt * m.factor(n).row(idx[n]).iter().map(|v| v * v).sum::<f64>();
            }
            f
        };
        let eta = 1e-3;
        let mut stepped = model.clone();
        let r = x - model.reconstruct(&idx);
        sgd_update_entry(&mut stepped, &store, &idx, r, eta, lambda);
        let h = 1e-6;
        for n in 0..3 {
            for k in 0..2 {
                let mut plus = model.clone();
                let mut minus = model.clone();
                let a = model.factor(n).get(idx[n], k);
                plus.factor_mut(n).set(idx[n], k, a + h);
                minus.factor_mut(n).set(idx[n], k, a - h);
                let grad = (term(&plus) - term(&minus)) / (2.0 * h);
                let implied = (a - stepped.factor(n).get(idx[n], k)) / eta;
                assert!((grad - implied).abs() <= 1e-6, "mode {n} col {k}: {grad} vs {implied}");
            }
        }
    }

    #[test]
    fn zero_parameter_uses_direct_product() {
        let store = SparseTensorStore::build(vec![TensorEntry::new(vec![0, 0], 2.0)], &[1, 1]).unwrap();
        let zero = FactorMatrix::from_vec(1, 1, vec![0.0]).unwrap();
        let b = FactorMatrix::from_vec(1, 1, vec![3.0]).unwrap();
        let mut m = FactorModel::from_factors(vec![zero, b], 0.0).unwrap();
        sgd_update_entry(&mut m, &store, &[0, 0], 2.0, 0.1, 0.0);
        // a ← 0 − 0.2·(−2·3) = 1.2 ; b unchanged since its partner was 0
        assert!((m.factor(0).get(0, 0) - 1.2).abs() < 1e-15);
        assert_eq!(m.factor(1).get(0, 0), 3.0);
        assert!(m.is_finite());
    }

    #[test]
    fn learning_rate_schedule() {
        assert_eq!(learning_rate(0.05, 0), 0.1);
        for t in 0..20 {
            assert!(learning_rate(0.05, t + 1) < learning_rate(0.05, t));
        }
    }

    #[test]
    fn single_shard_is_sequential_sgd() {
        let store = random_store(&[6, 5, 4], 60, 5);
        let mut params = SgdParams::new(3);
        params.seed = 11;
        let model = init_factors(store.dims(), 3, params.lambda, params.seed);
        let epoch = psgd_epoch(&store, &model, &params, 2).unwrap();

        // straight-line reference
        let mut positions: Vec<usize> = (0..store.nnz()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        rng.set_stream(3);
        positions.shuffle(&mut rng);
        let mut reference = model.clone();
        let eta = 2.0 * params.eta0 / 3.0;
        for &p in &positions {
            let idx = store.index(p);
            let r = store.value(p) - reference.reconstruct(idx);
            sgd_update_entry(&mut reference, &store, idx, r, eta, params.lambda);
        }
        assert_eq!(epoch, reference);
    }

    #[test]
    fn tiny_learning_rate_is_a_no_op() {
        let store = random_store(&[5, 5], 15, 6);
        let mut params = SgdParams::new(2);
        params.eta0 = 1e-300;
        params.shards = 3;
        let model = random_model(&[5, 5], 2, params.lambda, 7);
        let out = psgd_epoch(&store, &model, &params, 0).unwrap();
        for n in 0..2 {
            for (a, b) in out.factor(n).as_slice().iter().zip(model.factor(n).as_slice()) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn identical_shards_average_to_either() {
        let store = random_store(&[5, 4, 3], 30, 8);
        let model = random_model(&[5, 4, 3], 2, 0.1, 9);
        let half: Vec<usize> = (0..store.nnz()).rev().collect();
        let avg = run_shards(&store, &model, &[half.clone(), half.clone()], 0.01).unwrap();
        let mut single = model.clone();
        sgd_pass(&store, &mut single, &half, 0.01);
        for n in 0..3 {
            for (a, b) in avg.factor(n).as_slice().iter().zip(single.factor(n).as_slice()) {
                assert!((a - b).abs() <= 1e-15 * b.abs().max(1.0));
            }
        }
    }

    #[test]
    fn shards_cover_everything() {
        let shards = shard_positions(103, 4, 1, 0);
        let mut all: Vec<usize> = shards.concat();
        all.sort();
        assert_eq!(all, (0..103).collect::<Vec<_>>());
        assert!(shards.iter().all(|s| s.len() == 25 || s.len() == 26));
    }

    #[test]
    fn psgd_reduces_loss_and_stays_finite() {
        let store = random_store(&[10, 10, 10], 300, 10);
        let mut params = SgdParams::new(3);
        params.shards = 4;
        params.outer_iters = 5;
        params.eta0 = 0.02;
        let init = init_factors(store.dims(), 3, params.lambda, params.seed);
        let (model, history) = psgd(&store, &params, Monitor::new()).unwrap();
        assert!(model.is_finite());
        assert_eq!(history.len(), 5);
        assert!(loss(&model, &store) < loss(&init, &store));
        assert!(psgd(&store, &SgdParams { shards: 0, ..params }, Monitor::new()).is_err());
    }
}
