//! Seeded synthetic tensors from known low-rank factors.
//!
//! Ground-truth factor entries are uniform in [0, 1), the observed set is a
//! uniform sample of the index space without replacement, and each value is
//! the exact reconstruction plus Gaussian noise.

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{FactorModel, SparseTensorStore, TensorEntry};

/// Largest |Ω| considered comfortable on a single workstation.
pub const DESK_SCALE_MAX_ENTRIES: usize = 20_000_000;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub dims: Vec<usize>,
    pub nnz: usize,
    pub rank: usize,
    pub noise_sigma: f64,
    /// Fraction of Ω held out, in [0, 1).
    pub test_fraction: f64,
    pub seed: u64,
}

impl SyntheticConfig {
    /// Every mode of length `len`.
    pub fn cubic(order: usize, len: usize, nnz: usize, rank: usize) -> Self {
        SyntheticConfig {
            dims: vec![len; order],
            nnz,
            rank,
            noise_sigma: 0.0,
            test_fraction: 0.0,
            seed: 0,
        }
    }

    /// Benchmark shapes S1 (smallest) to S4 (`scale` in 1..=4).
    pub fn preset(scale: usize) -> Option<Self> {
        let (order, len, nnz, rank) = match scale {
            1 => (2, 300_000, 30_000_000, 30),
            2 => (3, 1_000_000, 100_000_000, 100),
            3 => (4, 3_000_000, 300_000_000, 300),
            4 => (5, 10_000_000, 1_000_000_000, 1000),
            _ => return None,
        };
        Some(Self::cubic(order, len, nnz, rank))
    }

    fn index_space(&self) -> Option<u128> {
        self.dims.iter().try_fold(1u128, |acc, &d| acc.checked_mul(d as u128))
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.is_empty() || self.dims.contains(&0) {
            return Err(Error::param("every mode needs a positive length"));
        }
        if self.rank == 0 {
            return Err(Error::param("ground-truth rank must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(Error::param("test fraction must be in [0, 1)"));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return Err(Error::param("noise sigma must be finite and nonnegative"));
        }
        match self.index_space() {
            Some(space) if (self.nnz as u128) <= space => Ok(()),
            Some(space) => Err(Error::param(format!(
                "cannot sample {} distinct entries from {space} cells",
                self.nnz
            ))),
            None => Err(Error::param("index space overflows")),
        }
    }

    /// False for shapes too large to generate in memory on one machine.
    pub fn is_desk_scale(&self) -> bool {
        let params: usize = self.dims.iter().sum::<usize>().saturating_mul(self.rank);
        self.nnz <= DESK_SCALE_MAX_ENTRIES && params <= DESK_SCALE_MAX_ENTRIES
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticData {
    pub train: SparseTensorStore,
    pub test: Vec<TensorEntry>,
    pub truth: FactorModel,
}

pub fn generate_synthetic(config: &SyntheticConfig) -> Result<SyntheticData> {
    config.validate()?;
    let space = config.index_space().expect("validated");
    let space = usize::try_from(space).map_err(|_| Error::param("index space exceeds the address width"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let mut truth = FactorModel::zeros(&config.dims, config.rank, 0.0);
    for n in 0..config.dims.len() {
        for v in truth.factor_mut(n).as_mut_slice() {
            *v = rng.random::<f64>();
        }
    }

    let mut cells = index::sample(&mut rng, space, config.nnz).into_vec();
    // row-major linear order is the canonical lexicographic order
    cells.sort_unstable();
    let noise = Normal::new(0.0, config.noise_sigma).map_err(|e| Error::param(e.to_string()))?;
    let mut entries: Vec<TensorEntry> = cells
        .into_iter()
        .map(|cell| {
            let mut rem = cell;
            let mut indices = vec![0usize; config.dims.len()];
            for (n, &d) in config.dims.iter().enumerate().rev() {
                indices[n] = rem % d;
                rem /= d;
            }
            let mut value = truth.reconstruct(&indices);
            if config.noise_sigma > 0.0 {
                value += noise.sample(&mut rng);
            }
            TensorEntry::new(indices, value)
        })
        .collect();

    let test_count = (config.test_fraction * config.nnz as f64).floor() as usize;
    let mut order: Vec<usize> = (0..entries.len()).collect();
    order.shuffle(&mut rng);
    let mut is_test = vec![false; entries.len()];
    for &p in &order[..test_count] {
        is_test[p] = true;
    }
    let mut test = Vec::with_capacity(test_count);
    let mut train = Vec::with_capacity(entries.len() - test_count);
    for (p, e) in entries.drain(..).enumerate() {
        if is_test[p] {
            test.push(e);
        } else {
            train.push(e);
        }
    }
    let train = SparseTensorStore::build(train, &config.dims)?;
    Ok(SyntheticData { train, test, truth })
}
