//! A 1-D mesh of in-process virtual devices.
//!
//! Each device is an OS thread during [`DeviceMesh::run_spmd`], with a
//! private [`DeviceLedger`] that is charged for every tensor buffer the
//! thread allocates and credited when the buffer is freed. Collectives are
//! the only synchronization points between workers and act as full
//! barriers.

mod collective;
mod ledger;
pub mod parallel;

use std::panic::{self, AssertUnwindSafe};
use std::sync::Arc;
use std::thread;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ops, with_tracker, Tensor};

pub use collective::Worker;
pub use ledger::{DeviceLedger, LedgerEntry};

use collective::Exchange;

/// How a logical tensor is laid out over the mesh.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ShardSpec {
    /// Every device holds a full copy.
    Replicated,
    /// Split into equal contiguous blocks along this axis, in device order.
    Partitioned(usize),
}

pub struct DeviceMesh {
    ledgers: Vec<Arc<DeviceLedger>>,
}

impl DeviceMesh {
    pub fn new(device_count: usize) -> Result<Self> {
        if device_count == 0 {
            return Err(Error::InvalidConfig("a mesh needs at least one device".into()));
        }
        Ok(DeviceMesh {
            ledgers: (0..device_count).map(|d| Arc::new(DeviceLedger::new(d))).collect(),
        })
    }

    pub fn device_count(&self) -> usize {
        self.ledgers.len()
    }

    pub fn ledger(&self, device: usize) -> &Arc<DeviceLedger> {
        &self.ledgers[device]
    }

    pub fn ledger_report(&self) -> Vec<LedgerEntry> {
        self.ledgers.iter().map(|l| l.snapshot()).collect()
    }

    pub fn reset_peaks(&self) {
        for l in &self.ledgers {
            l.reset_peak();
        }
    }

    /// Runs `f` with allocations charged to `device`.
    pub fn on_device<R>(&self, device: usize, f: impl FnOnce() -> R) -> R {
        with_tracker(self.ledgers[device].clone(), f)
    }

    /// Copies `t` into `device`'s memory.
    pub fn place(&self, device: usize, t: &Tensor) -> Tensor {
        self.on_device(device, || t.deep_copy())
    }

    /// Runs `f` once per device, each on its own thread with its own state.
    ///
    /// If a worker fails, the others are released from any collective they
    /// are blocked in. The first failing worker's own error is returned in
    /// preference to the aborts it caused; panics are re-raised.
    pub fn run_spmd<S, R, F>(&self, states: &mut [S], f: F) -> Result<Vec<R>>
    where
        S: Send,
        R: Send,
        F: Fn(&Worker, &mut S) -> Result<R> + Sync,
    {
        let n = self.device_count();
        assert_eq!(states.len(), n, "one state per device");
        let exchange = Arc::new(Exchange::new(n));
        let outcomes: Vec<thread::Result<Result<R>>> = thread::scope(|scope| {
            let handles: Vec<_> = states
                .iter_mut()
                .enumerate()
                .map(|(device, state)| {
                    let worker = Worker::new(device, exchange.clone(), self.ledgers[device].clone());
                    let exchange = exchange.clone();
                    let f = &f;
                    scope.spawn(move || {
                        let out = panic::catch_unwind(AssertUnwindSafe(|| {
                            with_tracker(worker.ledger().clone(), || f(&worker, state))
                        }));
                        match &out {
                            Ok(Err(e)) => exchange.abort(format!("device {device}: {e}")),
                            Err(_) => exchange.abort(format!("device {device} panicked")),
                            Ok(Ok(_)) => {}
                        }
                        out
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("worker thread")).collect()
        });

        let mut results = Vec::with_capacity(n);
        let mut first_err = None;
        for out in outcomes {
            match out {
                Err(payload) => panic::resume_unwind(payload),
                Ok(Ok(r)) => results.push(r),
                Ok(Err(e)) => {
                    let is_abort = matches!(e, Error::CollectiveAborted(_));
                    match &first_err {
                        None => first_err = Some(e),
                        Some(Error::CollectiveAborted(_)) if !is_abort => first_err = Some(e),
                        _ => {}
                    }
                }
            }
        }
        match first_err {
            Some(e) => Err(e),
            None => Ok(results),
        }
    }

    /// [`run_spmd`](Self::run_spmd) without per-device state.
    pub fn run<R, F>(&self, f: F) -> Result<Vec<R>>
    where
        R: Send,
        F: Fn(&Worker) -> Result<R> + Sync,
    {
        let mut units = vec![(); self.device_count()];
        self.run_spmd(&mut units, |w, _| f(w))
    }

    /// Sums per-device tensors; every device receives the total.
    pub fn all_reduce_sum(&self, per_device: &[Tensor]) -> Result<Vec<Tensor>> {
        self.check_per_device(per_device)?;
        self.run(|w| w.all_reduce_sum(&per_device[w.device()]))
    }

    /// Concatenates per-device tensors along `axis`; every device receives
    /// the result.
    pub fn all_gather(&self, per_device: &[Tensor], axis: usize) -> Result<Vec<Tensor>> {
        self.check_per_device(per_device)?;
        self.run(|w| w.all_gather(&per_device[w.device()], axis))
    }

    fn check_per_device(&self, per_device: &[Tensor]) -> Result<()> {
        if per_device.len() != self.device_count() {
            return Err(Error::InvalidConfig(format!(
                "expected {} per-device tensors, got {}",
                self.device_count(),
                per_device.len()
            )));
        }
        Ok(())
    }
}

/// A logical tensor realized as one shard per device.
#[derive(Debug, Clone)]
pub struct ShardedTensor {
    logical_shape: Vec<usize>,
    spec: ShardSpec,
    shards: Vec<Tensor>,
}

impl ShardedTensor {
    pub fn logical_shape(&self) -> &[usize] {
        &self.logical_shape
    }

    pub fn spec(&self) -> ShardSpec {
        self.spec
    }

    pub fn shards(&self) -> &[Tensor] {
        &self.shards
    }

    pub fn into_shards(self) -> Vec<Tensor> {
        self.shards
    }

    pub fn shard(&self, device: usize) -> &Tensor {
        &self.shards[device]
    }

    /// Reassembles the logical tensor from the shards.
    pub fn gather(&self) -> Result<Tensor> {
        match self.spec {
            ShardSpec::Replicated => Ok(self.shards[0].clone()),
            ShardSpec::Partitioned(axis) => {
                let refs: Vec<&Tensor> = self.shards.iter().collect();
                ops::concat(&refs, axis)
            }
        }
    }
}

/// Bytes one device holds for a tensor of `shape` laid out by `spec`.
pub fn shard_bytes(shape: &[usize], spec: ShardSpec, devices: usize) -> Result<u64> {
    let total = 4 * shape.iter().product::<usize>() as u64;
    match spec {
        ShardSpec::Replicated => Ok(total),
        ShardSpec::Partitioned(axis) => {
            check_divisible(shape, axis, devices)?;
            Ok(total / devices as u64)
        }
    }
}

fn check_divisible(shape: &[usize], axis: usize, devices: usize) -> Result<()> {
    let extent = *shape.get(axis).ok_or(Error::IndexOutOfRange {
        what: "partition axis",
        index: axis,
        limit: shape.len(),
    })?;
    if extent % devices != 0 {
        return Err(Error::Divisibility {
            axis,
            extent,
            devices,
        });
    }
    Ok(())
}

/// Splits (or copies) `t` across the mesh, charging each shard to its device.
pub fn shard(t: &Tensor, spec: ShardSpec, mesh: &DeviceMesh) -> Result<ShardedTensor> {
    let n = mesh.device_count();
    if let ShardSpec::Partitioned(axis) = spec {
        check_divisible(t.shape(), axis, n)?;
    }
    let shards = (0..n)
        .map(|d| {
            mesh.on_device(d, || match spec {
                ShardSpec::Replicated => Ok(t.deep_copy()),
                ShardSpec::Partitioned(axis) => ops::split_block(t, axis, n, d),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ShardedTensor {
        logical_shape: t.shape().to_vec(),
        spec,
        shards,
    })
}
