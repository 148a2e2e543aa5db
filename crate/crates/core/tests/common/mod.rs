#![allow(dead_code)]

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Zipf};
use sals_core::{SparseTensorStore, TensorEntry};

/// Uniformly sampled distinct cells with values in [-1, 1).
pub fn uniform_store(dims: &[usize], nnz: usize, seed: u64) -> SparseTensorStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = HashSet::new();
    let mut entries = Vec::with_capacity(nnz);
    while entries.len() < nnz {
        let idx: Vec<usize> = dims.iter().map(|&d| rng.random_range(0..d)).collect();
        if seen.insert(idx.clone()) {
            entries.push(TensorEntry::new(idx, rng.random_range(-1.0..1.0)));
        }
    }
    SparseTensorStore::build(entries, dims).unwrap()
}

/// Distinct cells whose indices are Zipf(`exponent`) distributed in every
/// mode; index 0 is the heaviest row.
pub fn zipf_store(order: usize, len: usize, nnz: usize, exponent: f64, seed: u64) -> SparseTensorStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let zipf = Zipf::new(len as f64, exponent).unwrap();
    let mut seen = HashSet::new();
    let mut entries = Vec::with_capacity(nnz);
    while entries.len() < nnz {
        let idx: Vec<usize> = (0..order).map(|_| zipf.sample(&mut rng) as usize - 1).collect();
        if seen.insert(idx.clone()) {
            entries.push(TensorEntry::new(idx, rng.random_range(0.0..1.0)));
        }
    }
    SparseTensorStore::build(entries, &vec![len; order]).unwrap()
}

/// Inverse by Gauss-Jordan elimination with partial pivoting.
pub fn gauss_jordan_inverse(a: &[f64], n: usize) -> Vec<f64> {
    let mut m = a.to_vec();
    let mut inv = vec![0.0; n * n];
    for i in 0..n {
        inv[i * n + i] = 1.0;
    }
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&x, &y| m[x * n + col].abs().total_cmp(&m[y * n + col].abs()))
            .unwrap();
        for j in 0..n {
            m.swap(col * n + j, pivot * n + j);
            inv.swap(col * n + j, pivot * n + j);
        }
        let d = m[col * n + col];
        for j in 0..n {
            m[col * n + j] /= d;
            inv[col * n + j] /= d;
        }
        for r in 0..n {
            if r != col {
                let f = m[r * n + col];
                for j in 0..n {
                    m[r * n + j] -= f * m[col * n + j];
                    inv[r * n + j] -= f * inv[col * n + j];
                }
            }
        }
    }
    inv
}

pub fn mat_vec(a: &[f64], x: &[f64]) -> Vec<f64> {
    let n = x.len();
    (0..n).map(|i| (0..n).map(|j| a[i * n + j] * x[j]).sum()).collect()
}
