//! Blocking collectives between the workers of one mesh.
//!
//! Each collective deposits the caller's tensor in a per-device slot, waits
//! on a barrier until every worker has deposited, then reads all slots in
//! device order. A second barrier keeps slots alive until everyone has
//! read. Every worker computes the result from the same inputs in the same
//! order, so results are bit-identical across devices.

use std::sync::{Arc, Condvar, Mutex};

use crate::error::{Error, Result};
use crate::mesh::ledger::DeviceLedger;
use crate::tensor::{ops, Tensor};

pub(crate) struct Exchange {
    devices: usize,
    state: Mutex<ExchangeState>,
    cv: Condvar,
}

struct ExchangeState {
    slots: Vec<Option<Tensor>>,
    arrived: usize,
    generation: u64,
    aborted: Option<String>,
}

impl Exchange {
    pub(crate) fn new(devices: usize) -> Self {
        Exchange {
            devices,
            state: Mutex::new(ExchangeState {
                slots: vec![None; devices],
                arrived: 0,
                generation: 0,
                aborted: None,
            }),
            cv: Condvar::new(),
        }
    }

    /// Wakes every waiting worker with an error; later collectives fail fast.
    pub(crate) fn abort(&self, reason: String) {
        let mut st = self.state.lock().unwrap();
        st.aborted.get_or_insert(reason);
        self.cv.notify_all();
    }

    fn barrier(&self) -> Result<()> {
        let mut st = self.state.lock().unwrap();
        if let Some(reason) = &st.aborted {
            return Err(Error::CollectiveAborted(reason.clone()));
        }
        let generation = st.generation;
        st.arrived += 1;
        if st.arrived == self.devices {
            st.arrived = 0;
            st.generation += 1;
            self.cv.notify_all();
            return Ok(());
        }
        while st.generation == generation {
            if let Some(reason) = &st.aborted {
                return Err(Error::CollectiveAborted(reason.clone()));
            }
            st = self.cv.wait(st).unwrap();
        }
        Ok(())
    }

    fn exchange(&self, device: usize, t: &Tensor) -> Result<Vec<Tensor>> {
        self.state.lock().unwrap().slots[device] = Some(t.clone());
        self.barrier()?;
        let parts = {
            let st = self.state.lock().unwrap();
            st.slots
                .iter()
                .map(|s| s.clone().expect("slot filled before barrier"))
                .collect()
        };
        self.barrier()?;
        self.state.lock().unwrap().slots[device] = None;
        Ok(parts)
    }
}

/// A worker's view of the mesh: its device id and access to collectives.
#[derive(Clone)]
pub struct Worker {
    device: usize,
    exchange: Arc<Exchange>,
    ledger: Arc<DeviceLedger>,
}

impl Worker {
    pub(crate) fn new(device: usize, exchange: Arc<Exchange>, ledger: Arc<DeviceLedger>) -> Self {
        Worker {
            device,
            exchange,
            ledger,
        }
    }

    /// A single-device context on the calling thread. Collectives are
    /// identities and nothing is ledgered unless the caller installs the
    /// ledger.
    pub fn local() -> Self {
        Worker::new(0, Arc::new(Exchange::new(1)), Arc::new(DeviceLedger::new(0)))
    }

    pub fn device(&self) -> usize {
        self.device
    }

    pub fn device_count(&self) -> usize {
        self.exchange.devices
    }

    pub fn ledger(&self) -> &Arc<DeviceLedger> {
        &self.ledger
    }

    pub fn barrier(&self) -> Result<()> {
        self.exchange.barrier()
    }

    /// Elementwise sum over devices, accumulated in device-id order.
    pub fn all_reduce_sum(&self, x: &Tensor) -> Result<Tensor> {
        let parts = self.exchange.exchange(self.device, x)?;
        for p in &parts {
            if p.shape() != parts[0].shape() {
                return Err(Error::shape("all_reduce_sum", parts[0].shape(), p.shape()));
            }
        }
        let mut acc = parts[0].to_vec();
        for p in &parts[1..] {
            for (a, &v) in acc.iter_mut().zip(p.data()) {
                *a += v;
            }
        }
        Tensor::new(parts[0].shape(), acc)
    }

    /// Device-order concatenation along `axis`.
    pub fn all_gather(&self, x: &Tensor, axis: usize) -> Result<Tensor> {
        let parts = self.exchange.exchange(self.device, x)?;
        let refs: Vec<&Tensor> = parts.iter().collect();
        ops::concat(&refs, axis).map_err(|e| match e {
            Error::ShapeMismatch { left, right, .. } => Error::ShapeMismatch {
                op: "all_gather",
                left,
                right,
            },
            other => other,
        })
    }
}
