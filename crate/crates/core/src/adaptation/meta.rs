use std::collections::BTreeSet;

use crate::base_lm::shifted_targets;
use crate::error::{Error, Result};
use crate::pnn::{GraphOptions, ParamSnapshot, ProgressiveNetwork};
use crate::tensor::{DenseArray, Reduction, Tape};

/// Parameters a training call on `task_id` may update: the task's column
/// and its incoming adapters while that column is trainable, otherwise the
/// unfrozen LoRA factors on it.
pub fn active_trainable(net: &ProgressiveNetwork, task_id: u32) -> Result<BTreeSet<String>> {
    let column = net.task_column(task_id)?;
    let col = net.column(column)?;
    let trainable = net.trainable_names();
    let names: BTreeSet<String> = if !col.is_frozen() {
        let col_prefix = format!("col{column}/");
        let adapter_suffix = format!("->{column}");
        trainable
            .into_iter()
            .filter(|n| n.starts_with(&col_prefix) || (n.starts_with("adapter/") && n.ends_with(&adapter_suffix)))
            .collect()
    } else {
        net.lora_on_column(column)
            .filter(|l| !l.is_frozen())
            .flat_map(|l| [l.a_name(), l.b_name()])
            .collect()
    };
    if names.is_empty() {
        return Err(Error::FrozenParameter(format!("col{column}/w1")));
    }
    Ok(names)
}

/// Mean next-token cross-entropy of `batch` along `task_id`'s path and its
/// gradient with respect to `names`.
pub fn loss_and_grads(
    net: &ProgressiveNetwork,
    task_id: u32,
    batch: &[Vec<u32>],
    names: &BTreeSet<String>,
) -> Result<(f64, ParamSnapshot)> {
    if batch.is_empty() {
        return Err(Error::Empty("support set"));
    }
    let column = net.task_column(task_id)?;
    let (h, l) = net.stacked_features(batch)?;
    let mut tape = Tape::new();
    let hv = tape.constant(&h);
    let lv = tape.constant(&l);
    let opts = GraphOptions {
        grad: Some(names),
        materialize_lora: false,
    };
    let graph = net.task_graph(&mut tape, hv, lv, column, opts)?;
    let loss = tape.cross_entropy(graph.logits, &shifted_targets(batch), Reduction::Mean)?;
    tape.backward(loss)?;
    let value = f64::from(tape.scalar(loss));

    let current = net.snapshot(names)?;
    let mut grads: ParamSnapshot = current
        .iter()
        .map(|(n, p)| (n.clone(), DenseArray::zeros(p.shape())))
        .collect();
    for (name, g) in tape.param_grads() {
        if let Some(acc) = grads.get_mut(name) {
            for (a, &x) in acc.values_mut().iter_mut().zip(g) {
                *a += x;
            }
        }
    }
    Ok((value, grads))
}

/// Plain gradient descent from `start`. Returns the final parameters and the
/// loss observed before each step.
pub fn inner_loop<F>(start: &ParamSnapshot, steps: usize, lr: f64, mut loss_and_grad: F) -> Result<(ParamSnapshot, Vec<f64>)>
where
    F: FnMut(&ParamSnapshot) -> Result<(f64, ParamSnapshot)>,
{
    let mut theta = start.clone();
    let mut losses = Vec::with_capacity(steps);
    for _ in 0..steps {
        let (loss, grads) = loss_and_grad(&theta)?;
        losses.push(loss);
        for (name, p) in theta.iter_mut() {
            let g = grads.get(name).ok_or_else(|| Error::MissingGradient(name.clone()))?;
            for (v, &d) in p.values_mut().iter_mut().zip(g.values()) {
                *v = (f64::from(*v) - lr * f64::from(d)) as f32;
            }
        }
    }
    Ok((theta, losses))
}

/// Task-specific inner loop on `support`, run on a copy of `net`.
pub fn meta_adapt(
    net: &ProgressiveNetwork,
    task_id: u32,
    support: &[Vec<u32>],
    inner_steps: usize,
    inner_lr: f64,
) -> Result<ParamSnapshot> {
    Ok(meta_adapt_trace(net, task_id, support, inner_steps, inner_lr)?.0)
}

/// [`meta_adapt`] that also returns the support loss before each step.
pub fn meta_adapt_trace(
    net: &ProgressiveNetwork,
    task_id: u32,
    support: &[Vec<u32>],
    inner_steps: usize,
    inner_lr: f64,
) -> Result<(ParamSnapshot, Vec<f64>)> {
    if support.is_empty() {
        return Err(Error::Empty("support set"));
    }
    let names = active_trainable(net, task_id)?;
    let start = net.snapshot(&names)?;
    let mut work = net.clone();
    inner_loop(&start, inner_steps, inner_lr, |theta| {
        work.load_snapshot(theta)?;
        loss_and_grads(&work, task_id, support, &names)
    })
}

/// `theta += lr * mean_j(theta'_j - theta)` over the snapshot entries.
pub fn outer_update(current: &mut ParamSnapshot, snapshots: &[ParamSnapshot], outer_lr: f64) -> Result<()> {
    if snapshots.is_empty() {
        return Err(Error::Empty("adapted snapshots"));
    }
    for s in snapshots {
        if s.len() != current.len() {
            return Err(Error::CountMismatch {
                what: "snapshot parameters",
                expected: current.len(),
                got: s.len(),
            });
        }
    }
    let n = snapshots.len() as f64;
    for (name, theta) in current.iter_mut() {
        let mut delta = vec![0.0f64; theta.len()];
        for s in snapshots {
            let adapted = s.get(name).ok_or_else(|| Error::UnknownParameter(name.clone()))?;
            if adapted.shape() != theta.shape() {
                return Err(Error::ShapeMismatch {
                    op: "meta_outer_step",
                    lhs: theta.shape().to_vec(),
                    rhs: adapted.shape().to_vec(),
                });
            }
            for ((d, &a), &t) in delta.iter_mut().zip(adapted.values()).zip(theta.values()) {
                *d += f64::from(a) - f64::from(t);
            }
        }
        for (t, d) in theta.values_mut().iter_mut().zip(delta) {
            *t = (f64::from(*t) + outer_lr * d / n) as f32;
        }
    }
    Ok(())
}

/// First-order outer update applied to the network's current parameters.
pub fn meta_outer_step(net: &mut ProgressiveNetwork, snapshots: &[ParamSnapshot], outer_lr: f64) -> Result<()> {
    let first = snapshots.first().ok_or(Error::Empty("adapted snapshots"))?;
    let names: BTreeSet<String> = first.keys().cloned().collect();
    let mut current = net.snapshot(&names)?;
    outer_update(&mut current, snapshots, outer_lr)?;
    net.load_snapshot(&current)
}

/// Gradient-descent steps on `support` until the loss is at most
/// `threshold`; `None` if `max_steps` are not enough.
pub fn steps_to_threshold(
    net: &ProgressiveNetwork,
    task_id: u32,
    support: &[Vec<u32>],
    lr: f64,
    threshold: f64,
    max_steps: usize,
) -> Result<Option<usize>> {
    let names = active_trainable(net, task_id)?;
    let mut work = net.clone();
    let mut theta = work.snapshot(&names)?;
    for step in 0..=max_steps {
        work.load_snapshot(&theta)?;
        let (loss, grads) = loss_and_grads(&work, task_id, support, &names)?;
        if loss <= threshold {
            return Ok(Some(step));
        }
        if step == max_steps {
            break;
        }
        theta = inner_loop(&theta, 1, lr, |_| Ok((loss, grads.clone())))?.0;
    }
    Ok(None)
}
