//! Out-of-core execution: residuals live in fixed-width binary cache files
//! and every solver pass streams them once, front to back.
//!
//! File layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "SALSCACH"
//! version  u32      1
//! order    u32      N
//! records  u64      record count
//! records  records × (N × u64 index, f64 value)
//! checksum u32      CRC-32 of the record bytes
//! ```
//!
//! A cache directory holds one file per (worker, mode) with the entries of
//! that worker's rows of that mode, grouped by ascending row and in
//! canonical order within a row, plus a `manifest.txt` listing every file
//! with its record count and checksum.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::partition::RowAssignment;
use crate::solver::{
    choose_columns, partial_products, solve_row_counted, subset_contribution, ColumnSource, Counters,
    IterationRecord, Monitor, NormalEq, SolverParams,
};
use crate::tensor::{FactorMatrix, FactorModel, Regularization, SparseTensorStore, TensorEntry};

pub const MAGIC: &[u8; 8] = b"SALSCACH";
pub const VERSION: u32 = 1;
const HEADER_LEN: u64 = 8 + 4 + 4 + 8;
const MANIFEST: &str = "manifest.txt";

fn cache_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Cache {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

/// Bytes per record for an order-`order` tensor.
pub fn record_len(order: usize) -> usize {
    order * 8 + 8
}

/// Appends records to a new cache file; `finish` writes the checksum and
/// patches the record count.
pub struct CacheWriter {
    path: PathBuf,
    out: BufWriter<File>,
    order: usize,
    records: u64,
    hasher: crc32fast::Hasher,
    buf: Vec<u8>,
}

impl CacheWriter {
    pub fn create(path: &Path, order: usize) -> Result<Self> {
        let mut out = BufWriter::new(File::create(path)?);
        out.write_all(MAGIC)?;
        out.write_all(&VERSION.to_le_bytes())?;
        out.write_all(&(order as u32).to_le_bytes())?;
        out.write_all(&0u64.to_le_bytes())?;
        Ok(CacheWriter {
            path: path.to_path_buf(),
            out,
            order,
            records: 0,
            hasher: crc32fast::Hasher::new(),
            buf: Vec::with_capacity(record_len(order)),
        })
    }

    pub fn push(&mut self, indices: &[usize], value: f64) -> Result<()> {
        debug_assert_eq!(indices.len(), self.order);
        self.buf.clear();
        for &i in indices {
            self.buf.extend_from_slice(&(i as u64).to_le_bytes());
        }
        self.buf.extend_from_slice(&value.to_le_bytes());
        self.hasher.update(&self.buf);
        self.out.write_all(&self.buf)?;
        self.records += 1;
        Ok(())
    }

    pub fn finish(self) -> Result<CacheFile> {
        let checksum = self.hasher.finalize();
        let mut out = self.out;
        out.write_all(&checksum.to_le_bytes())?;
        let mut file = out.into_inner().map_err(|e| e.into_error())?;
        file.seek(SeekFrom::Start(16))?;
        file.write_all(&self.records.to_le_bytes())?;
        file.sync_data()?;
        Ok(CacheFile {
            path: self.path,
            order: self.order,
            records: self.records,
            checksum,
        })
    }
}

/// A validated cache file header.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CacheFile {
    pub path: PathBuf,
    pub order: usize,
    pub records: u64,
    pub checksum: u32,
}

impl CacheFile {
    /// Reads the header and trailer and checks the file length. The record
    /// checksum itself is verified by [`stream_pass`].
    pub fn open(path: &Path) -> Result<Self> {
        let mut f = File::open(path)?;
        let mut header = [0u8; HEADER_LEN as usize];
        f.read_exact(&mut header).map_err(|_| cache_err(path, "truncated header"))?;
        if &header[..8] != MAGIC {
            return Err(cache_err(path, "bad magic"));
        }
        let version = u32::from_le_bytes(header[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(cache_err(path, format!("unsupported version {version}")));
        }
        let order = u32::from_le_bytes(header[12..16].try_into().unwrap()) as usize;
        let records = u64::from_le_bytes(header[16..24].try_into().unwrap());
        let expected = HEADER_LEN + records * record_len(order) as u64 + 4;
        let actual = f.metadata()?.len();
        if actual != expected {
            return Err(cache_err(path, format!("length {actual}, expected {expected}")));
        }
        f.seek(SeekFrom::End(-4))?;
        let mut tail = [0u8; 4];
        f.read_exact(&mut tail)?;
        Ok(CacheFile {
            path: path.to_path_buf(),
            order,
            records,
            checksum: u32::from_le_bytes(tail),
        })
    }
}

/// Visits every record in stored order exactly once. Fails if the
/// record bytes do not match the trailing checksum; in that case the
/// visitor has already seen the (corrupt) records and its results must be
/// discarded.
pub fn stream_pass(file: &CacheFile, mut visitor: impl FnMut(&[usize], f64)) -> Result<u64> {
    let mut input = BufReader::with_capacity(1 << 16, File::open(&file.path)?);
    input.seek(SeekFrom::Start(HEADER_LEN))?;
    let len = record_len(file.order);
    let mut buf = vec![0u8; len];
    let mut indices = vec![0usize; file.order];
    let mut hasher = crc32fast::Hasher::new();
    for _ in 0..file.records {
        input.read_exact(&mut buf)?;
        hasher.update(&buf);
        for (n, i) in indices.iter_mut().enumerate() {
            *i = u64::from_le_bytes(buf[n * 8..n * 8 + 8].try_into().unwrap()) as usize;
        }
        let value = f64::from_le_bytes(buf[len - 8..].try_into().unwrap());
        visitor(&indices, value);
    }
    let mut tail = [0u8; 4];
    input.read_exact(&mut tail)?;
    let stored = u32::from_le_bytes(tail);
    if hasher.finalize() != stored || stored != file.checksum {
        return Err(cache_err(&file.path, "checksum mismatch"));
    }
    Ok(file.records)
}

/// Streams `src` into a new file at `dst`, replacing each value by
/// `map(indices, value)`.
pub fn rewrite_pass(src: &CacheFile, dst: &Path, mut map: impl FnMut(&[usize], f64) -> f64) -> Result<CacheFile> {
    let mut writer = CacheWriter::create(dst, src.order)?;
    let mut failure = None;
    stream_pass(src, |idx, v| {
        if failure.is_none() {
            if let Err(e) = writer.push(idx, map(idx, v)) {
                failure = Some(e);
            }
        }
    })?;
    if let Some(e) = failure {
        return Err(e);
    }
    writer.finish()
}

/// The per-(worker, mode) residual cache of one tensor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StreamingCache {
    pub dir: PathBuf,
    pub order: usize,
    pub dims: Vec<usize>,
    /// files[worker][mode]
    pub files: Vec<Vec<CacheFile>>,
}

fn cache_name(worker: usize, mode: usize) -> String {
    format!("w{}_mode{}.bin", worker + 1, mode + 1)
}

impl StreamingCache {
    /// Writes one file per (worker, mode) holding the entries of that
    /// worker's rows, initial values equal to the data.
    pub fn build(dir: &Path, store: &SparseTensorStore, assignment: &RowAssignment) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let order = store.order();
        let mut files = Vec::with_capacity(assignment.machines());
        for m in 0..assignment.machines() {
            let mut per_mode = Vec::with_capacity(order);
            for n in 0..order {
                let mut w = CacheWriter::create(&dir.join(cache_name(m, n)), order)?;
                for &row in assignment.rows(m, n) {
                    for &p in store.mode_index(n).row(row) {
                        w.push(store.index(p), store.value(p))?;
                    }
                }
                per_mode.push(w.finish()?);
            }
            files.push(per_mode);
        }
        let cache = StreamingCache {
            dir: dir.to_path_buf(),
            order,
            dims: store.dims().to_vec(),
            files,
        };
        cache.write_manifest()?;
        Ok(cache)
    }

    fn write_manifest(&self) -> Result<()> {
        let mut w = BufWriter::new(File::create(self.dir.join(MANIFEST))?);
        let dims: Vec<String> = self.dims.iter().map(|d| d.to_string()).collect();
        writeln!(w, "dims {}", dims.join(" "))?;
        for (m, per_mode) in self.files.iter().enumerate() {
            for (n, f) in per_mode.iter().enumerate() {
                let name = f.path.file_name().and_then(|s| s.to_str()).unwrap_or_default();
                writeln!(w, "{} {} {} {} {:08x}", m + 1, n + 1, name, f.records, f.checksum)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Re-opens a cache directory, checking every file against the manifest.
    pub fn open(dir: &Path) -> Result<Self> {
        let manifest = dir.join(MANIFEST);
        let text = BufReader::new(File::open(&manifest)?);
        let mut dims = Vec::new();
        let mut files: Vec<Vec<CacheFile>> = Vec::new();
        for line in text.lines() {
            let line = line?;
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.first() == Some(&"dims") {
                dims = fields[1..]
                    .iter()
                    .map(|f| f.parse::<usize>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| cache_err(&manifest, "bad dims line"))?;
                continue;
            }
            if fields.len() != 5 {
                return Err(cache_err(&manifest, format!("malformed line '{line}'")));
            }
            let parse = |s: &str| s.parse::<usize>().map_err(|_| cache_err(&manifest, format!("bad number '{s}'")));
            let (m, n) = (parse(fields[0])? - 1, parse(fields[1])? - 1);
            let records: u64 = fields[3].parse().map_err(|_| cache_err(&manifest, "bad record count"))?;
            let checksum = u32::from_str_radix(fields[4], 16).map_err(|_| cache_err(&manifest, "bad checksum"))?;
            let file = CacheFile::open(&dir.join(fields[2]))?;
            if file.records != records || file.checksum != checksum {
                return Err(cache_err(&file.path, "does not match manifest"));
            }
            if files.len() <= m {
                files.resize_with(m + 1, Vec::new);
            }
            if files[m].len() != n {
                return Err(cache_err(&manifest, "files out of order"));
            }
            files[m].push(file);
        }
        let order = dims.len();
        if order == 0 || files.iter().any(|f| f.len() != order) {
            return Err(cache_err(&manifest, "incomplete manifest"));
        }
        Ok(StreamingCache {
            dir: dir.to_path_buf(),
            order,
            dims,
            files,
        })
    }
}

/// Tracks how many factor values are held in memory.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ResidentCounter {
    pub current: usize,
    pub peak: usize,
}

impl ResidentCounter {
    fn acquire(&mut self, values: usize) {
        self.current += values;
        self.peak = self.peak.max(self.current);
    }

    fn release(&mut self, values: usize) {
        self.current -= values;
    }
}

/// Factor matrices kept on disk, one row-major f64 file per mode. Only
/// column subsets are ever brought into memory.
struct FactorStore {
    paths: Vec<PathBuf>,
    dims: Vec<usize>,
    rank: usize,
}

impl FactorStore {
    /// Same values as [`crate::solver::init_model`], written row by row.
    fn initialize(dir: &Path, dims: &[usize], rank: usize, seed: u64, resident: &mut ResidentCounter) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(0);
        let mut paths = Vec::with_capacity(dims.len());
        resident.acquire(rank);
        for (n, &len) in dims.iter().enumerate() {
            let path = dir.join(format!("factor_mode{}.bin", n + 1));
            let mut w = BufWriter::new(File::create(&path)?);
            for _ in 0..len {
                for _ in 0..rank {
                    let v = if n == 0 { 0.0 } else { rng.random::<f64>() };
                    w.write_all(&v.to_le_bytes())?;
                }
            }
            w.flush()?;
            paths.push(path);
        }
        resident.release(rank);
        Ok(FactorStore {
            paths,
            dims: dims.to_vec(),
            rank,
        })
    }

    /// Streams every row of `mode`, `K` values at a time.
    fn for_each_row(&self, mode: usize, resident: &mut ResidentCounter, mut f: impl FnMut(usize, &[f64])) -> Result<()> {
        let mut input = BufReader::new(File::open(&self.paths[mode])?);
        resident.acquire(self.rank);
        let mut bytes = vec![0u8; self.rank * 8];
        let mut row = vec![0.0; self.rank];
        for i in 0..self.dims[mode] {
            input.read_exact(&mut bytes)?;
            for (k, v) in row.iter_mut().enumerate() {
                *v = f64::from_le_bytes(bytes[k * 8..k * 8 + 8].try_into().unwrap());
            }
            f(i, &row);
        }
        resident.release(self.rank);
        Ok(())
    }

    fn load(&self, columns: &[usize], resident: &mut ResidentCounter) -> Result<ColumnBlock> {
        let total: usize = self.dims.iter().sum::<usize>() * columns.len();
        resident.acquire(total);
        let mut values = Vec::with_capacity(self.dims.len());
        for n in 0..self.dims.len() {
            let mut block = vec![0.0; self.dims[n] * columns.len()];
            self.for_each_row(n, resident, |i, row| {
                for (slot, &k) in columns.iter().enumerate() {
                    block[i * columns.len() + slot] = row[k];
                }
            })?;
            values.push(block);
        }
        Ok(ColumnBlock {
            width: columns.len(),
            values,
        })
    }

    /// Writes the block back and releases it.
    fn store(&self, block: ColumnBlock, columns: &[usize], resident: &mut ResidentCounter) -> Result<()> {
        for (n, path) in self.paths.iter().enumerate() {
            let tmp = path.with_extension("tmp");
            {
                let mut w = BufWriter::new(File::create(&tmp)?);
                let mut failure = None;
                self.for_each_row(n, resident, |i, row| {
                    let mut row = row.to_vec();
                    for (slot, &k) in columns.iter().enumerate() {
                        row[k] = block.values[n][i * block.width + slot];
                    }
                    for v in row {
                        if let Err(e) = w.write_all(&v.to_le_bytes()) {
                            failure.get_or_insert(e);
                        }
                    }
                })?;
                if let Some(e) = failure {
                    return Err(e.into());
                }
                w.flush()?;
            }
            fs::rename(&tmp, path)?;
        }
        resident.release(self.dims.iter().sum::<usize>() * block.width);
        Ok(())
    }

    fn into_model(self, lambda: f64) -> Result<FactorModel> {
        let mut factors = Vec::with_capacity(self.dims.len());
        for (n, path) in self.paths.iter().enumerate() {
            let bytes = fs::read(path)?;
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            factors.push(FactorMatrix::from_vec(self.dims[n], self.rank, data)?);
        }
        FactorModel::from_factors(factors, lambda)
    }
}

/// The C active columns of every mode, row-major per mode.
struct ColumnBlock {
    width: usize,
    values: Vec<Vec<f64>>,
}

impl ColumnSource for ColumnBlock {
    fn order(&self) -> usize {
        self.values.len()
    }
    fn width(&self) -> usize {
        self.width
    }
    #[inline]
    fn value(&self, mode: usize, row: usize, slot: usize) -> f64 {
        self.values[mode][row * self.width + slot]
    }
}

impl ColumnBlock {
    fn set(&mut self, mode: usize, row: usize, slot: usize, v: f64) {
        self.values[mode][row * self.width + slot] = v;
    }
}

#[derive(Clone, Debug)]
pub struct StreamingOutcome {
    pub model: FactorModel,
    pub counters: Counters,
    pub history: Vec<IterationRecord>,
    /// Peak number of factor values held in memory during the run.
    pub peak_resident: usize,
}

/// Serial SALS over a single-worker cache. `row_counts[n][i]` = |Ω^(n)_i|
/// (needed for weighted regularization).
pub fn factorize_streaming(
    cache: &StreamingCache,
    row_counts: &[Vec<usize>],
    params: &SolverParams,
    mut monitor: Monitor<'_>,
) -> Result<StreamingOutcome> {
    params.validate()?;
    if cache.files.len() != 1 {
        return Err(Error::param("streaming execution expects a single-worker cache"));
    }
    let order = cache.order;
    let dims = cache.dims.clone();
    let mut resident = ResidentCounter::default();
    let mut counters = Counters::default();
    let work = cache.dir.join("work");
    fs::create_dir_all(&work)?;
    let factors = FactorStore::initialize(&work, &dims, params.rank, params.seed, &mut resident)?;
    let mut residual_files = cache.files[0].clone();
    let rhat_paths: Vec<PathBuf> = (0..order).map(|n| work.join(format!("rhat_mode{}.bin", n + 1))).collect();
    let res_paths: Vec<PathBuf> = (0..order).map(|n| work.join(format!("r_mode{}.bin", n + 1))).collect();
    let lambda_of = |mode: usize, row: usize| match params.regularization {
        Regularization::Plain => params.lambda,
        Regularization::Weighted => params.lambda * row_counts[mode][row] as f64,
    };

    if let Some(test) = monitor.test_set() {
        if let Some(e) = test.iter().find(|e| e.indices.len() != order || e.indices.iter().zip(&dims).any(|(i, d)| i >= d)) {
            return Err(Error::param(format!("test entry {:?} lies outside the tensor", e.indices)));
        }
    }
    let mut history = Vec::with_capacity(params.outer_iters);
    let mut elapsed = Duration::ZERO;
    for outer in 0..params.outer_iters {
        let start = Instant::now();
        let before = counters.madds;
        for columns in choose_columns(params, outer) {
            let mut block = factors.load(&columns, &mut resident)?;
            counters.rhat_buffers += 1;

            let mut rhat_files = Vec::with_capacity(order);
            for (n, f) in residual_files.iter().enumerate() {
                rhat_files.push(rewrite_pass(f, &rhat_paths[n], |idx, r| {
                    r + subset_contribution(&block, idx, &mut counters.madds)
                })?);
            }

            for _ in 0..params.inner_iters {
                for (mode, rhat) in rhat_files.iter().enumerate() {
                    update_mode_streaming(rhat, &mut block, mode, dims[mode], &lambda_of, &mut counters)?;
                }
            }

            let mut next = Vec::with_capacity(order);
            for (n, f) in rhat_files.iter().enumerate() {
                next.push(rewrite_pass(f, &res_paths[n], |idx, rh| {
                    rh - subset_contribution(&block, idx, &mut counters.madds)
                })?);
            }
            for (n, f) in next.into_iter().enumerate() {
                // keep the residual under the cache's own file name
                let target = &cache.files[0][n].path;
                fs::rename(&f.path, target)?;
                residual_files[n] = CacheFile {
                    path: target.clone(),
                    ..f
                };
            }
            factors.store(block, &columns, &mut resident)?;
        }
        elapsed += start.elapsed();

        let mut sse = 0.0;
        stream_pass(&residual_files[0], |_, r| sse += r * r)?;
        let mut penalty = 0.0;
        for n in 0..order {
            factors.for_each_row(n, &mut resident, |i, row| {
                penalty += lambda_of(n, i) * row.iter().map(|v| v * v).sum::<f64>();
            })?;
        }
        let test_rmse = match monitor.test_set() {
            Some(test) => Some(streaming_rmse(&factors, params, test, &mut resident)?),
            None => None,
        };
        let record = IterationRecord {
            iteration: outer + 1,
            elapsed,
            train_loss: sse + penalty,
            test_rmse,
            params_sent: 0,
            params_received: 0,
            flops: counters.madds - before,
        };
        let flow = monitor.emit(&record);
        history.push(record);
        if flow == ControlFlow::Break(()) {
            break;
        }
    }
    // persist the final residual state in the manifest
    let updated = StreamingCache {
        files: vec![residual_files],
        ..cache.clone()
    };
    updated.write_manifest()?;
    for p in rhat_paths {
        let _ = fs::remove_file(p);
    }
    let model = factors.into_model(params.lambda)?;
    let _ = fs::remove_dir_all(&work);
    Ok(StreamingOutcome {
        model,
        counters,
        history,
        peak_resident: resident.peak,
    })
}

/// One pass over the mode's R̂ file: rows arrive in ascending order, so each
/// row's system is complete when the next row starts.
fn update_mode_streaming(
    rhat: &CacheFile,
    block: &mut ColumnBlock,
    mode: usize,
    rows: usize,
    lambda_of: &impl Fn(usize, usize) -> f64,
    counters: &mut Counters,
) -> Result<()> {
    let width = block.width;
    let mut current = 0usize;
    let mut neq = NormalEq::zeros(width);
    let mut products = vec![0.0; width];
    let mut failure = None;

    let mut finish_row = |row: usize, neq: &mut NormalEq, counters: &mut Counters, out: &mut Vec<(usize, Vec<f64>)>| {
        match solve_row_counted(neq, lambda_of(mode, row), &mut counters.madds) {
            Ok(sol) if sol.skipped => counters.skipped_rows += 1,
            Ok(sol) => out.push((row, sol.values)),
            Err(e) => {
                failure.get_or_insert(e);
            }
        }
        *neq = NormalEq::zeros(width);
    };

    // rows of one mode never read each other, so solutions are applied
    // after the pass
    let mut solutions = Vec::new();
    let blk: &ColumnBlock = block;
    stream_pass(rhat, |idx, value| {
        let row = idx[mode];
        while current < row {
            finish_row(current, &mut neq, counters, &mut solutions);
            current += 1;
        }
        partial_products(blk, idx, mode, &mut products, &mut counters.madds);
        neq.accumulate(&products, value, &mut counters.madds);
    })?;
    while current < rows {
        finish_row(current, &mut neq, counters, &mut solutions);
        current += 1;
    }
    if let Some(e) = failure {
        return Err(e);
    }
    for (row, values) in solutions {
        for (slot, v) in values.into_iter().enumerate() {
            block.set(mode, row, slot, v);
        }
    }
    Ok(())
}

fn streaming_rmse(
    factors: &FactorStore,
    params: &SolverParams,
    test: &[TensorEntry],
    resident: &mut ResidentCounter,
) -> Result<f64> {
    let mut predictions = vec![0.0; test.len()];
    let fixed = SolverParams {
        column_order: crate::solver::ColumnOrder::Fixed,
        ..params.clone()
    };
    for columns in choose_columns(&fixed, 0) {
        let block = factors.load(&columns, resident)?;
        let mut madds = 0;
        for (p, e) in predictions.iter_mut().zip(test) {
            *p += subset_contribution(&block, &e.indices, &mut madds);
        }
        resident.release(factors.dims.iter().sum::<usize>() * block.width);
    }
    let sse: f64 = predictions.iter().zip(test).map(|(p, e)| (e.value - p).powi(2)).sum();
    Ok((sse / test.len() as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::partition::greedy_assign;
    use crate::solver::factorize_detailed;
    use crate::synth::{generate_synthetic, SyntheticConfig};

    fn store() -> SparseTensorStore {
        let mut cfg = SyntheticConfig::cubic(3, 12, 400, 3);
        cfg.noise_sigma = 0.1;
        cfg.seed = 4;
        generate_synthetic(&cfg).unwrap().train
    }

    fn row_counts(store: &SparseTensorStore) -> Vec<Vec<usize>> {
        (0..store.order())
            .map(|n| (0..store.dims()[n]).map(|i| store.row_count(n, i)).collect())
            .collect()
    }

    #[test]
    fn header_layout_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bin");
        let mut w = CacheWriter::create(&path, 2).unwrap();
        w.push(&[1, 2], 0.5).unwrap();
        let f = w.finish().unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!(&bytes[..8], b"SALSCACH");
        assert_eq!(&bytes[8..12], &1u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &2u32.to_le_bytes());
        assert_eq!(&bytes[16..24], &1u64.to_le_bytes());
        assert_eq!(&bytes[24..32], &1u64.to_le_bytes());
        assert_eq!(&bytes[32..40], &2u64.to_le_bytes());
        assert_eq!(&bytes[40..48], &0.5f64.to_le_bytes());
        assert_eq!(&bytes[48..52], &crc32fast::hash(&bytes[24..48]).to_le_bytes());
        assert_eq!(bytes.len(), 52);
        assert_eq!(CacheFile::open(&path).unwrap(), f);
    }

    #[test]
    fn empty_cache_never_visits() {
        let dir = tempfile::tempdir().unwrap();
        let f = CacheWriter::create(&dir.path().join("e.bin"), 3).unwrap().finish().unwrap();
        let mut visits = 0;
        assert_eq!(stream_pass(&f, |_, _| visits += 1).unwrap(), 0);
        assert_eq!(visits, 0);
    }

    #[test]
    fn corruption_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bin");
        let mut w = CacheWriter::create(&path, 1).unwrap();
        for i in 0..10 {
            w.push(&[i], i as f64).unwrap();
        }
        let f = w.finish().unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[30] ^= 0x40;
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(stream_pass(&f, |_, _| {}), Err(Error::Cache { .. })));
        bytes.truncate(40);
        fs::write(&path, &bytes).unwrap();
        assert!(CacheFile::open(&path).is_err());
    }

    #[test]
    fn cache_groups_rows_and_reopens() {
        let store = store();
        let dir = tempfile::tempdir().unwrap();
        let a = greedy_assign(&store, 2).unwrap();
        let cache = StreamingCache::build(dir.path(), &store, &a).unwrap();
        for m in 0..2 {
            for n in 0..3 {
                let f = &cache.files[m][n];
                assert_eq!(f.records as usize, a.mode_load(m, n));
                let mut seen = Vec::new();
                stream_pass(f, |idx, _| seen.push(idx.to_vec())).unwrap();
                // grouped by owned row, canonical inside a row
                let mut expected = Vec::new();
                for &row in a.rows(m, n) {
                    for &p in store.mode_index(n).row(row) {
                        expected.push(store.index(p).to_vec());
                    }
                }
                assert_eq!(seen, expected);
            }
        }
        assert_eq!(StreamingCache::open(dir.path()).unwrap(), cache);
        fs::write(dir.path().join(MANIFEST), "dims 12 12 12\n1 1 w1_mode1.bin 3 00000000\n").unwrap();
        assert!(StreamingCache::open(dir.path()).is_err());
    }

    #[test]
    fn streaming_matches_in_memory() {
        let store = store();
        for (columns, reg) in [(2, Regularization::Plain), (1, Regularization::Weighted), (3, Regularization::Plain)] {
            let dir = tempfile::tempdir().unwrap();
            let mut params = SolverParams::new(3, columns);
            params.outer_iters = 2;
            params.inner_iters = 2;
            params.regularization = reg;
            let memory = factorize_detailed(&store, &params, Monitor::new()).unwrap();
            let a = greedy_assign(&store, 1).unwrap();
            let cache = StreamingCache::build(dir.path(), &store, &a).unwrap();
            let out = factorize_streaming(&cache, &row_counts(&store), &params, Monitor::new()).unwrap();
            assert_eq!(out.model, memory.model);
            let bound = columns * store.dims().iter().sum::<usize>() + 1024;
            assert!(out.peak_resident <= bound, "{} > {bound}", out.peak_resident);
            for (s, m) in out.history.iter().zip(&memory.history) {
                assert!((s.train_loss - m.train_loss).abs() <= 1e-9 * m.train_loss);
            }
            // the cache now holds the final residuals
            let reopened = StreamingCache::open(dir.path()).unwrap();
            let mut values = Vec::new();
            stream_pass(&reopened.files[0][0], |_, v| values.push(v)).unwrap();
            assert_eq!(values.len(), store.nnz());
        }
    }
}
