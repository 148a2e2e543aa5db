//! In-process simulation of distributed SALS.
//!
//! Every simulated machine runs on its own thread and owns a private replica
//! of the entries its rows touch (mΩ), the residuals of those entries, and a
//! full copy of the factor matrices. After updating its rows of a mode a
//! worker broadcasts the new values; nobody starts the next step until it
//! has received every other worker's broadcast for the current one. Messages
//! carry step stamps and receivers reject anything out of order.
//!
//! All kernels are shared with the serial solver and accumulate in canonical
//! entry order, so the result is bitwise identical to [`crate::solver::factorize`].

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::ops::ControlFlow;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use crossbeam_channel::{unbounded, Receiver, Sender};

use crate::error::{Error, Result};
use crate::partition::RowAssignment;
use crate::solver::{
    choose_columns, compute_rhat, init_factors, update_residual, update_rows, Counters, IterationRecord, Monitor,
    SolverParams,
};
use crate::tensor::{FactorMatrix, FactorModel, ResidualState, SparseTensorStore};

/// Data held by one machine.
#[derive(Clone, Debug)]
pub struct WorkerState {
    pub machine: usize,
    /// mS_n for every mode.
    pub owned_rows: Vec<Vec<usize>>,
    /// Positions of the mΩ entries in the global store, ascending.
    pub global_positions: Vec<usize>,
    /// The mΩ entries with the global mode lengths.
    pub store: SparseTensorStore,
    /// Private residual replica, aligned with `store`.
    pub residual: ResidualState,
}

/// Hands each machine the entries any of its rows touch. An entry is
/// replicated on every machine that owns one of its row indices.
pub fn distribute(store: &SparseTensorStore, assignment: &RowAssignment) -> Result<Vec<WorkerState>> {
    if assignment.order() != store.order() {
        return Err(Error::param("assignment and tensor disagree on the number of modes"));
    }
    let mut workers = Vec::with_capacity(assignment.machines());
    let mut mark = vec![false; store.nnz()];
    for m in 0..assignment.machines() {
        mark.iter_mut().for_each(|v| *v = false);
        let mut owned_rows = Vec::with_capacity(store.order());
        for n in 0..store.order() {
            let rows = assignment.rows(m, n).to_vec();
            for &i in &rows {
                if i >= store.dims()[n] {
                    return Err(Error::param(format!("assignment row {i} exceeds mode {n} length")));
                }
                for &p in store.mode_index(n).row(i) {
                    mark[p] = true;
                }
            }
            owned_rows.push(rows);
        }
        let global_positions: Vec<usize> = (0..store.nnz()).filter(|&p| mark[p]).collect();
        let sub = store.restrict(&global_positions);
        let residual = ResidualState::from_store(&sub);
        workers.push(WorkerState {
            machine: m,
            owned_rows,
            global_positions,
            store: sub,
            residual,
        });
    }
    Ok(workers)
}

/// Step coordinates; ordered lexicographically.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct Stamp {
    pub outer: usize,
    pub subset: usize,
    /// 0 for the barrier after R̂, 1 for row-update broadcasts.
    pub phase: u8,
    pub inner: usize,
    pub mode: usize,
}

#[derive(Debug)]
enum Message {
    Broadcast {
        from: usize,
        stamp: Stamp,
        rows: Vec<usize>,
        /// rows.len() × C, row-major
        values: Vec<f64>,
    },
    Barrier {
        from: usize,
        stamp: Stamp,
    },
    /// `origin` is the worker that first failed.
    Abort {
        origin: usize,
        reason: String,
    },
}

/// One worker's endpoint on the broadcast bus.
struct Bus {
    id: usize,
    peers: Vec<Option<Sender<Message>>>,
    inbox: Receiver<Message>,
    pending: VecDeque<Message>,
    last_seen: Vec<Option<Stamp>>,
}

impl Bus {
    fn others(&self) -> usize {
        self.peers.iter().filter(|p| p.is_some()).count()
    }

    fn send_all(&self, make: impl Fn() -> Message) {
        for tx in self.peers.iter().flatten() {
            // a closed peer has already aborted; its own error is reported
            let _ = tx.send(make());
        }
    }

    fn abort(&self, error: &Error) {
        let (origin, reason) = match error {
            Error::Worker { worker, message } => (*worker, message.clone()),
            other => (self.id, other.to_string()),
        };
        self.send_all(|| Message::Abort {
            origin,
            reason: reason.clone(),
        });
    }

    fn check_order(&mut self, from: usize, stamp: Stamp) -> Result<()> {
        if let Some(prev) = self.last_seen[from] {
            if stamp <= prev {
                return Err(Error::Worker {
                    worker: self.id,
                    message: format!("stamp {stamp:?} from worker {from} after {prev:?}"),
                });
            }
        }
        self.last_seen[from] = Some(stamp);
        Ok(())
    }

    /// Waits for one message per peer stamped `stamp`. Later-stamped
    /// messages are held back; earlier ones are a protocol violation.
    fn gather(&mut self, stamp: Stamp) -> Result<Vec<Message>> {
        let want = self.others();
        let mut got = Vec::with_capacity(want);
        let mut held = VecDeque::new();
        let mut queue = std::mem::take(&mut self.pending);
        while got.len() < want {
            let msg = match queue.pop_front() {
                Some(m) => m,
                None => self.inbox.recv().map_err(|_| Error::Worker {
                    worker: self.id,
                    message: "bus closed".into(),
                })?,
            };
            let (from, s) = match &msg {
                Message::Broadcast { from, stamp, .. } | Message::Barrier { from, stamp } => (*from, *stamp),
                Message::Abort { origin, reason } => {
                    return Err(Error::Worker {
                        worker: *origin,
                        message: reason.clone(),
                    })
                }
            };
            if s == stamp {
                got.push(msg);
            } else if s > stamp {
                held.push_back(msg);
            } else {
                return Err(Error::Worker {
                    worker: self.id,
                    message: format!("stale message {s:?} from worker {from} while at {stamp:?}"),
                });
            }
        }
        held.extend(queue);
        self.pending = held;
        Ok(got)
    }
}

/// Per worker, per outer iteration communication and work counters.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct WorkerIterStats {
    /// 1-based outer iteration.
    pub iteration: usize,
    pub worker: usize,
    /// Parameter values broadcast (each counted once regardless of fan-out).
    pub sent: u64,
    pub received: u64,
    pub broadcasts: u64,
    pub flops: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CommLog {
    pub machines: usize,
    pub records: Vec<WorkerIterStats>,
}

impl CommLog {
    pub fn iterations(&self) -> usize {
        self.records.iter().map(|r| r.iteration).max().unwrap_or(0)
    }

    pub fn for_iteration(&self, iteration: usize) -> impl Iterator<Item = &WorkerIterStats> {
        self.records.iter().filter(move |r| r.iteration == iteration)
    }

    pub fn sent_in(&self, iteration: usize) -> u64 {
        self.for_iteration(iteration).map(|r| r.sent).sum()
    }

    pub fn received_in(&self, iteration: usize) -> u64 {
        self.for_iteration(iteration).map(|r| r.received).sum()
    }

    pub fn flops_in(&self, iteration: usize) -> u64 {
        self.for_iteration(iteration).map(|r| r.flops).sum()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,worker,sent,received,flops\n");
        for r in &self.records {
            let _ = writeln!(out, "{},{},{},{},{}", r.iteration, r.worker + 1, r.sent, r.received, r.flops);
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CommReportRow {
    pub iteration: usize,
    /// Σ over workers of values broadcast.
    pub total_sent: u64,
    /// sent + received for each worker.
    pub exchanged: Vec<u64>,
    /// K·T_in·Σ_n I_n, or 0 with a single machine.
    pub predicted: u64,
}

impl CommReportRow {
    pub fn matches(&self) -> bool {
        self.total_sent == self.predicted && self.exchanged.iter().all(|&e| e == self.predicted)
    }
}

/// Measured traffic per outer iteration next to the closed-form prediction.
pub fn comm_report(log: &CommLog, params: &SolverParams, dims: &[usize]) -> Vec<CommReportRow> {
    let predicted = if log.machines > 1 {
        (params.rank * params.inner_iters * dims.iter().sum::<usize>()) as u64
    } else {
        0
    };
    (1..=log.iterations())
        .map(|it| {
            let mut exchanged = vec![0u64; log.machines];
            for r in log.for_iteration(it) {
                exchanged[r.worker] += r.sent + r.received;
            }
            CommReportRow {
                iteration: it,
                total_sent: log.sent_in(it),
                exchanged,
                predicted,
            }
        })
        .collect()
}

/// Everything a simulated run returns.
#[derive(Clone, Debug)]
pub struct DistributedOutcome {
    /// Assembled from each worker's owned rows.
    pub model: FactorModel,
    pub log: CommLog,
    pub history: Vec<IterationRecord>,
    /// Each worker's full factor replica after the last step.
    pub replicas: Vec<FactorModel>,
    /// Each worker's residual replica with its global positions.
    pub residuals: Vec<(Vec<usize>, ResidualState)>,
    pub counters: Counters,
}

/// Sent by workers to the coordinator after each outer iteration.
struct Progress {
    worker: usize,
    stats: WorkerIterStats,
    /// Owned rows of every mode with all K columns.
    rows: Vec<(Vec<usize>, Vec<f64>)>,
    sse: f64,
    penalty: f64,
}

enum Report {
    Progress(Box<Progress>),
    Done {
        worker: usize,
        replica: FactorModel,
        residual: ResidualState,
        counters: Counters,
    },
    Failed(Error),
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Control {
    Continue,
    Stop,
}

/// Runs distributed SALS over `assignment.machines()` simulated machines.
pub fn run_distributed(
    store: &SparseTensorStore,
    params: &SolverParams,
    assignment: &RowAssignment,
    monitor: Monitor<'_>,
) -> Result<DistributedOutcome> {
    run_with_fault(store, params, assignment, monitor, None)
}

fn run_with_fault(
    store: &SparseTensorStore,
    params: &SolverParams,
    assignment: &RowAssignment,
    mut monitor: Monitor<'_>,
    fault: Option<(usize, usize)>,
) -> Result<DistributedOutcome> {
    params.validate()?;
    let workers = distribute(store, assignment)?;
    let machines = workers.len();
    let positions: Vec<Vec<usize>> = workers.iter().map(|w| w.global_positions.clone()).collect();

    let (txs, rxs): (Vec<_>, Vec<_>) = (0..machines).map(|_| unbounded::<Message>()).unzip();
    let (report_tx, report_rx) = unbounded::<Report>();
    let (control_txs, control_rxs): (Vec<_>, Vec<_>) = (0..machines).map(|_| unbounded::<Control>()).unzip();

    let dims = store.dims().to_vec();
    let mut log = CommLog {
        machines,
        records: Vec::new(),
    };
    let mut history = Vec::new();
    let mut assembled = FactorModel::zeros(&dims, params.rank, params.lambda);
    let mut replicas: Vec<Option<FactorModel>> = vec![None; machines];
    let mut residuals: Vec<Option<ResidualState>> = vec![None; machines];
    let mut counters = Counters::default();
    let mut failure: Option<Error> = None;

    std::thread::scope(|scope| {
        for (worker, inbox) in workers.into_iter().zip(rxs) {
            let id = worker.machine;
            let peers = txs
                .iter()
                .enumerate()
                .map(|(m, tx)| (m != id).then(|| tx.clone()))
                .collect();
            let mut bus = Bus {
                id,
                peers,
                inbox,
                pending: VecDeque::new(),
                last_seen: vec![None; machines],
            };
            let report = report_tx.clone();
            let control = control_rxs[id].clone();
            let dims = dims.clone();
            scope.spawn(move || {
                let outcome = catch_unwind(AssertUnwindSafe(|| {
                    worker_main(worker, &mut bus, params, &dims, &report, &control, fault)
                }));
                let error = match outcome {
                    Ok(Ok((replica, residual, counters))) => {
                        let _ = report.send(Report::Done {
                            worker: id,
                            replica,
                            residual,
                            counters,
                        });
                        return;
                    }
                    Ok(Err(e)) => e,
                    Err(panic) => Error::Worker {
                        worker: id,
                        message: panic
                            .downcast_ref::<&str>()
                            .map(|s| s.to_string())
                            .or_else(|| panic.downcast_ref::<String>().cloned())
                            .unwrap_or_else(|| "panic".into()),
                    },
                };
                bus.abort(&error);
                let _ = report.send(Report::Failed(error));
            });
        }
        drop(report_tx);

        let mut elapsed = Duration::ZERO;
        let mut clock = Instant::now();
        let mut pending: Vec<Vec<Progress>> = Vec::new();
        let mut finished = 0;
        let mut stopping = false;
        while finished < machines {
            let Ok(report) = report_rx.recv() else { break };
            match report {
                Report::Progress(p) => {
                    let it = p.stats.iteration;
                    if pending.len() < it {
                        pending.resize_with(it, Vec::new);
                    }
                    pending[it - 1].push(*p);
                    if pending[it - 1].len() < machines {
                        continue;
                    }
                    elapsed += clock.elapsed();
                    let mut parts = std::mem::take(&mut pending[it - 1]);
                    parts.sort_by_key(|p| p.worker);
                    let (mut sse, mut penalty) = (0.0, 0.0);
                    let (mut sent, mut received, mut flops) = (0, 0, 0);
                    for p in &parts {
                        for (n, (rows, values)) in p.rows.iter().enumerate() {
                            let f = assembled.factor_mut(n);
                            for (j, &i) in rows.iter().enumerate() {
                                f.row_mut(i).copy_from_slice(&values[j * params.rank..(j + 1) * params.rank]);
                            }
                        }
                        sse += p.sse;
                        penalty += p.penalty;
                        sent += p.stats.sent;
                        received += p.stats.received;
                        flops += p.stats.flops;
                        log.records.push(p.stats.clone());
                    }
                    let test_rmse = match monitor.test_rmse(&assembled) {
                        Ok(v) => v,
                        Err(e) => {
                            failure.get_or_insert(e);
                            None
                        }
                    };
                    let record = IterationRecord {
                        iteration: it,
                        elapsed,
                        train_loss: sse + penalty,
                        test_rmse,
                        params_sent: sent,
                        params_received: received,
                        flops,
                    };
                    let flow = monitor.emit(&record);
                    history.push(record);
                    let stop = flow == ControlFlow::Break(()) || it == params.outer_iters || failure.is_some();
                    stopping |= stop;
                    for tx in &control_txs {
                        let _ = tx.send(if stop { Control::Stop } else { Control::Continue });
                    }
                    clock = Instant::now();
                }
                Report::Done {
                    worker,
                    replica,
                    residual,
                    counters: c,
                } => {
                    finished += 1;
                    counters.merge(&c);
                    residuals[worker] = Some(residual);
                    replicas[worker] = Some(replica);
                }
                Report::Failed(error) => {
                    finished += 1;
                    failure.get_or_insert(error);
                    if !stopping {
                        stopping = true;
                        for tx in &control_txs {
                            let _ = tx.send(Control::Stop);
                        }
                    }
                }
            }
        }
    });

    if let Some(e) = failure {
        return Err(e);
    }
    let residuals = positions
        .into_iter()
        .zip(residuals)
        .map(|(p, r)| (p, r.expect("every worker reported")))
        .collect();
    Ok(DistributedOutcome {
        model: assembled,
        log,
        history,
        replicas: replicas.into_iter().map(|r| r.expect("every worker reported")).collect(),
        residuals,
        counters,
    })
}

fn worker_main(
    worker: WorkerState,
    bus: &mut Bus,
    params: &SolverParams,
    dims: &[usize],
    report: &Sender<Report>,
    control: &Receiver<Control>,
    fault: Option<(usize, usize)>,
) -> Result<(FactorModel, ResidualState, Counters)> {
    let WorkerState {
        machine,
        owned_rows,
        store,
        mut residual,
        ..
    } = worker;
    let order = dims.len();
    let mut model = init_factors(dims, params.rank, params.lambda, params.seed);
    let mut counters = Counters::default();

    // entries whose mode-0 row this worker owns, for the loss report
    let mut owns_first = vec![false; dims[0]];
    for &i in &owned_rows[0] {
        owns_first[i] = true;
    }

    for outer in 0..params.outer_iters {
        if fault == Some((machine, outer)) {
            panic!("injected fault");
        }
        let mut stats = WorkerIterStats {
            iteration: outer + 1,
            worker: machine,
            ..Default::default()
        };
        let flops_before = counters.madds;
        for (subset, columns) in choose_columns(params, outer).into_iter().enumerate() {
            let rhat = compute_rhat(&residual, &store, &model, &columns, &mut counters);
            let stamp = Stamp {
                outer,
                subset,
                phase: 0,
                inner: 0,
                mode: 0,
            };
            if bus.others() > 0 {
                bus.send_all(|| Message::Barrier { from: machine, stamp });
                for msg in bus.gather(stamp)? {
                    if let Message::Barrier { from, stamp } = msg {
                        bus.check_order(from, stamp)?;
                    }
                }
            }
            for inner in 0..params.inner_iters {
                for mode in 0..order {
                    update_rows(
                        &rhat,
                        &store,
                        &mut model,
                        mode,
                        &columns,
                        params.regularization,
                        owned_rows[mode].iter().copied(),
                        &mut counters,
                    )?;
                    if bus.others() == 0 {
                        continue;
                    }
                    let stamp = Stamp {
                        outer,
                        subset,
                        phase: 1,
                        inner,
                        mode,
                    };
                    let rows = owned_rows[mode].clone();
                    let mut values = Vec::with_capacity(rows.len() * columns.len());
                    for &i in &rows {
                        for &k in &columns {
                            values.push(model.factor(mode).get(i, k));
                        }
                    }
                    stats.sent += values.len() as u64;
                    stats.broadcasts += 1;
                    bus.send_all(|| Message::Broadcast {
                        from: machine,
                        stamp,
                        rows: rows.clone(),
                        values: values.clone(),
                    });
                    for msg in bus.gather(stamp)? {
                        let Message::Broadcast {
                            from,
                            stamp,
                            rows,
                            values,
                        } = msg
                        else {
                            continue;
                        };
                        bus.check_order(from, stamp)?;
                        if values.len() != rows.len() * columns.len() {
                            return Err(Error::Worker {
                                worker: machine,
                                message: format!("malformed broadcast from worker {from}"),
                            });
                        }
                        let f = model.factor_mut(mode);
                        for (j, &i) in rows.iter().enumerate() {
                            for (slot, &k) in columns.iter().enumerate() {
                                f.set(i, k, values[j * columns.len() + slot]);
                            }
                        }
                        stats.received += values.len() as u64;
                    }
                }
            }
            residual = update_residual(rhat, &store, &model, &columns, &mut counters);
        }
        stats.flops = counters.madds - flops_before;

        let mut sse = 0.0;
        for (p, r) in residual.values.iter().enumerate() {
            if owns_first[store.index(p)[0]] {
                sse += r * r;
            }
        }
        let mut penalty = 0.0;
        let mut rows = Vec::with_capacity(order);
        for (n, owned) in owned_rows.iter().enumerate() {
            let f: &FactorMatrix = model.factor(n);
            let mut values = Vec::with_capacity(owned.len() * params.rank);
            for &i in owned {
                let row = f.row(i);
                let sq: f64 = row.iter().map(|v| v * v).sum();
                penalty += params.regularization.row_lambda(params.lambda, &store, n, i) * sq;
                values.extend_from_slice(row);
            }
            rows.push((owned.clone(), values));
        }
        let _ = report.send(Report::Progress(Box::new(Progress {
            worker: machine,
            stats,
            rows,
            sse,
            penalty,
        })));
        match control.recv() {
            Ok(Control::Continue) => {}
            Ok(Control::Stop) | Err(_) => break,
        }
    }
    Ok((model, residual, counters))
}
