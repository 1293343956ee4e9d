//! Tape operations that cross the tensor-parallel boundary.
//!
//! - [`copy_to_parallel`]: identity forward, all-reduce of the gradient
//!   backward. Placed where a replicated activation enters sharded compute.
//! - [`reduce_from_parallel`]: all-reduce forward, identity backward.
//!   Combines the partial sums of a row-parallel product.
//! - [`gather_from_parallel`]: all-gather forward; backward keeps this
//!   device's block of the (replicated) gradient.

use std::sync::Arc;

use crate::error::Result;
use crate::mesh::Worker;
use crate::tensor::{ops, CustomOp, Tape, Tensor, Var};

struct CopyToParallel(Worker);

impl CustomOp for CopyToParallel {
    fn name(&self) -> &'static str {
        "CopyToParallel"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        Ok(inputs[0].clone())
    }

    fn backward(&self, _: &[&Tensor], _: &Tensor, grad: &Tensor) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![Some(self.0.all_reduce_sum(grad)?)])
    }
}

struct ReduceFromParallel(Worker);

impl CustomOp for ReduceFromParallel {
    fn name(&self) -> &'static str {
        "ReduceFromParallel"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        self.0.all_reduce_sum(inputs[0])
    }

    fn backward(&self, _: &[&Tensor], _: &Tensor, grad: &Tensor) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![Some(grad.clone())])
    }
}

struct GatherFromParallel {
    worker: Worker,
    axis: usize,
}

impl CustomOp for GatherFromParallel {
    fn name(&self) -> &'static str {
        "GatherFromParallel"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        self.worker.all_gather(inputs[0], self.axis)
    }

    fn backward(&self, _: &[&Tensor], _: &Tensor, grad: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let block = ops::split_block(grad, self.axis, self.worker.device_count(), self.worker.device())?;
        Ok(vec![Some(block)])
    }
}

pub fn copy_to_parallel(tape: &mut Tape, worker: &Worker, x: Var) -> Result<Var> {
    tape.custom(Arc::new(CopyToParallel(worker.clone())), &[x])
}

pub fn reduce_from_parallel(tape: &mut Tape, worker: &Worker, x: Var) -> Result<Var> {
    tape.custom(Arc::new(ReduceFromParallel(worker.clone())), &[x])
}

pub fn gather_from_parallel(tape: &mut Tape, worker: &Worker, x: Var, axis: usize) -> Result<Var> {
    tape.custom(
        Arc::new(GatherFromParallel {
            worker: worker.clone(),
            axis,
        }),
        &[x],
    )
}
