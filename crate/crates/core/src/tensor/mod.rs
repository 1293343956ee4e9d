//! Dense row-major f32 tensors and the reverse-mode tape built on them.
//!
//! A [`Tensor`] is immutable once built and cheap to clone (the buffer is
//! shared). Every buffer allocation is reported to the allocation tracker
//! installed on the current thread, if any; the mesh uses this to keep a
//! per-device ledger of live bytes.

pub mod ops;
pub mod tape;

use std::cell::RefCell;
use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};

pub use tape::{CustomOp, Gradients, Loss, Tape, Var};

/// Receives allocation and release events for tensor buffers.
pub trait AllocationTracker: Send + Sync {
    fn allocate(&self, bytes: usize);
    fn release(&self, bytes: usize);
}

thread_local! {
    static TRACKER: RefCell<Option<Arc<dyn AllocationTracker>>> = const { RefCell::new(None) };
}

/// Runs `f` with `tracker` receiving every buffer allocated on this thread.
/// The previous tracker is restored afterwards, including on unwind.
pub fn with_tracker<R>(tracker: Arc<dyn AllocationTracker>, f: impl FnOnce() -> R) -> R {
    struct Restore(Option<Arc<dyn AllocationTracker>>);
    impl Drop for Restore {
        fn drop(&mut self) {
            let prev = self.0.take();
            TRACKER.with(|t| *t.borrow_mut() = prev);
        }
    }
    let prev = TRACKER.with(|t| t.borrow_mut().replace(tracker));
    let _restore = Restore(prev);
    f()
}

fn current_tracker() -> Option<Arc<dyn AllocationTracker>> {
    TRACKER.with(|t| t.borrow().clone())
}

struct Storage {
    data: Vec<f32>,
    tracker: Option<Arc<dyn AllocationTracker>>,
}

impl Storage {
    fn new(data: Vec<f32>) -> Self {
        let tracker = current_tracker();
        if let Some(t) = &tracker {
            t.allocate(data.len() * 4);
        }
        Storage { data, tracker }
    }
}

impl Drop for Storage {
    fn drop(&mut self) {
        if let Some(t) = &self.tracker {
            t.release(self.data.len() * 4);
        }
    }
}

#[derive(Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    storage: Arc<Storage>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::InvalidShape {
                op: "tensor",
                reason: format!(
                    "shape {shape:?} holds {expected} elements but {} were given",
                    data.len()
                ),
            });
        }
        Ok(Self::from_parts(shape.to_vec(), data))
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            shape,
            storage: Arc::new(Storage::new(data)),
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![value; n])
    }

    pub fn scalar(value: f32) -> Self {
        Self::from_parts(Vec::new(), vec![value])
    }

    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> f32) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), (0..n).map(f).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.storage.data.len()
    }

    /// Size of the buffer in bytes (4 per element).
    pub fn bytes(&self) -> usize {
        self.numel() * 4
    }

    pub fn data(&self) -> &[f32] {
        &self.storage.data
    }

    pub fn to_vec(&self) -> Vec<f32> {
        self.storage.data.clone()
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1 && self.shape.iter().all(|&d| d == 1)
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f32> {
        if self.numel() != 1 {
            return Err(Error::NotScalar(self.shape.clone()));
        }
        Ok(self.storage.data[0])
    }

    /// Number of rows and columns of a 2-D tensor.
    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::InvalidShape {
                op,
                reason: format!("expected a 2-D tensor, got shape {:?}", self.shape),
            }),
        }
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.numel() {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            storage: Arc::clone(&self.storage),
        })
    }

    /// Copies the buffer. The copy is charged to the current thread's tracker.
    pub fn deep_copy(&self) -> Self {
        Self::from_parts(self.shape.clone(), self.to_vec())
    }

    /// Same shape and the same bit pattern in every element.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data()
                .iter()
                .zip(other.data())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f32> {
        if self.shape != other.shape {
            return Err(Error::shape("max_abs_diff", &self.shape, &other.shape));
        }
        Ok(self
            .data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max))
    }

    pub fn all_finite(&self) -> bool {
        self.data().iter().all(|v| v.is_finite())
    }
}

impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data() == other.data()
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 8;
        let data = self.data();
        write!(f, "Tensor{:?} [", self.shape)?;
        for (i, v) in data.iter().take(SHOWN).enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{v}")?;
        }
        if data.len() > SHOWN {
            write!(f, ", …")?;
        }
        write!(f, "]")
    }
}
