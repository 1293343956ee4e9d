use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::tensor::AllocationTracker;

/// Live and peak tensor bytes attributed to one virtual device.
#[derive(Debug)]
pub struct DeviceLedger {
    device: usize,
    state: Mutex<LedgerState>,
}

#[derive(Debug, Default, Clone, Copy)]
struct LedgerState {
    current: u64,
    peak: u64,
}

/// One row of a ledger report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub device: usize,
    pub current_bytes: u64,
    pub peak_bytes: u64,
}

impl DeviceLedger {
    pub fn new(device: usize) -> Self {
        DeviceLedger {
            device,
            state: Mutex::new(LedgerState::default()),
        }
    }

    pub fn device(&self) -> usize {
        self.device
    }

    pub fn snapshot(&self) -> LedgerEntry {
        let s = *self.state.lock().unwrap();
        LedgerEntry {
            device: self.device,
            current_bytes: s.current,
            peak_bytes: s.peak,
        }
    }

    /// Drops the recorded peak down to the current live bytes.
    pub fn reset_peak(&self) {
        let mut s = self.state.lock().unwrap();
        s.peak = s.current;
    }
}

impl AllocationTracker for DeviceLedger {
    fn allocate(&self, bytes: usize) {
        let mut s = self.state.lock().unwrap();
        s.current += bytes as u64;
        s.peak = s.peak.max(s.current);
    }

    fn release(&self, bytes: usize) {
        let mut s = self.state.lock().unwrap();
        s.current = s
            .current
            .checked_sub(bytes as u64)
            .expect("ledger released more bytes than it holds");
    }
}
