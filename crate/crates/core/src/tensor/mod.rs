//! Dense arrays, reverse-mode differentiation, AdamW and checkpoints.

mod array;
pub mod checkpoint;
pub mod optim;
mod tape;

use std::collections::HashMap;

pub use array::{DenseArray, Scalar};
pub use checkpoint::{Checkpoint, TensorRecord};
pub use optim::{cosine_lr, AdamWConfig, OptimizerState};
pub use tape::{row_nll, Reduction, Tape, Var};

use crate::error::{Error, Result};

/// Mutable view of named parameters, in a stable order.
pub type ParamRefs<'a> = Vec<(String, &'a mut DenseArray)>;

/// Adds the gradients of every named leaf on `tape` into the matching
/// parameter buffers.
pub fn accumulate_grads(params: &mut ParamRefs<'_>, tape: &Tape) -> Result<()> {
    let index: HashMap<&str, usize> = params
        .iter()
        .enumerate()
        .map(|(i, (n, _))| (n.as_str(), i))
        .collect();
    let mut updates = Vec::new();
    for (name, grad) in tape.param_grads() {
        let i = *index
            .get(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_owned()))?;
        updates.push((i, grad));
    }
    for (i, grad) in updates {
        params[i].1.accumulate_grad(grad)?;
    }
    Ok(())
}

/// Hex SHA-256 over each name followed by its little-endian values.
pub fn digest<'a, I>(params: I) -> String
where
    I: IntoIterator<Item = (String, &'a DenseArray)>,
{
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    for (name, p) in params {
        h.update(name.as_bytes());
        h.update([0u8]);
        h.update(p.to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}
