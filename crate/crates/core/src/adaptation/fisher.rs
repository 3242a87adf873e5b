use std::collections::BTreeSet;

use crate::base_lm::shifted_targets;
use crate::error::{Error, Result};
use crate::pnn::{GraphOptions, ParamSnapshot, ProgressiveNetwork};
use crate::tensor::{Checkpoint, DenseArray, Reduction, Tape, Var};

/// Diagonal Fisher estimate with the parameter values it was taken at.
#[derive(Clone, Debug, PartialEq)]
pub struct FisherInfo {
    pub fisher: ParamSnapshot,
    pub anchor: ParamSnapshot,
    pub sample_count: usize,
}

impl FisherInfo {
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.fisher.keys().map(String::as_str)
    }

    /// Stores `F` and `theta*` under `{prefix}{name}/f` and `/anchor`.
    pub fn write_to(&self, ck: &mut Checkpoint, prefix: &str) {
        for (name, f) in &self.fisher {
            ck.insert(format!("{prefix}{name}/f"), f);
            ck.insert(format!("{prefix}{name}/anchor"), &self.anchor[name]);
        }
        ck.insert(
            format!("{prefix}sample_count"),
            &DenseArray::scalar(self.sample_count as f32),
        );
    }

    pub fn read_from(ck: &Checkpoint, prefix: &str) -> Result<Self> {
        let mut fisher = ParamSnapshot::new();
        let mut anchor = ParamSnapshot::new();
        for (rest, arr) in ck.with_prefix(prefix) {
            if let Some(name) = rest.strip_suffix("/f") {
                fisher.insert(name.to_owned(), arr.detached());
            } else if let Some(name) = rest.strip_suffix("/anchor") {
                anchor.insert(name.to_owned(), arr.detached());
            }
        }
        if fisher.keys().ne(anchor.keys()) {
            return Err(Error::Checkpoint(format!("fisher entries under `{prefix}` are incomplete")));
        }
        let sample_count = ck.get(&format!("{prefix}sample_count"))?.values()[0] as usize;
        Ok(Self {
            fisher,
            anchor,
            sample_count,
        })
    }
}

/// Mean over the first `n_samples` sequences of the squared gradient of the
/// sequence log-likelihood with respect to each effective parameter in
/// `params`, evaluated along `task_id`'s path.
pub fn estimate_fisher(
    net: &ProgressiveNetwork,
    params: &BTreeSet<String>,
    task_id: u32,
    data: &[Vec<u32>],
    n_samples: usize,
) -> Result<FisherInfo> {
    if data.is_empty() {
        return Err(Error::Empty("fisher data"));
    }
    if n_samples == 0 {
        return Err(Error::Config("n_samples must be at least 1".into()));
    }
    if params.is_empty() {
        return Err(Error::Empty("fisher parameter set"));
    }
    let column = net.task_column(task_id)?;
    let used = &data[..n_samples.min(data.len())];
    let mut sums: Vec<(String, Vec<f64>)> = Vec::new();
    let mut anchor = ParamSnapshot::new();
    for name in params {
        let w = net.effective_weight(name)?;
        sums.push((name.clone(), vec![0.0; w.len()]));
        anchor.insert(name.clone(), w);
    }
    let opts = GraphOptions {
        grad: Some(params),
        materialize_lora: true,
    };
    for seq in used {
        let (h, l) = net.stacked_features(&[seq])?;
        let mut tape = Tape::new();
        let hv = tape.constant(&h);
        let lv = tape.constant(&l);
        let graph = net.task_graph(&mut tape, hv, lv, column, opts)?;
        let nll = tape.cross_entropy(graph.logits, &shifted_targets(&[seq]), Reduction::Sum)?;
        tape.backward(nll)?;
        for (name, acc) in &mut sums {
            // A parameter off this task's path has zero gradient.
            if let Some(&v) = graph.effective.get(name) {
                if let Some(g) = tape.grad(v) {
                    for (a, &x) in acc.iter_mut().zip(g) {
                        *a += f64::from(x) * f64::from(x);
                    }
                }
            }
        }
    }
    let n = used.len() as f64;
    let fisher = sums
        .into_iter()
        .map(|(name, acc)| {
            let shape = anchor[&name].shape().to_vec();
            let values = acc.into_iter().map(|v| (v / n) as f32).collect();
            Ok((name, DenseArray::new(shape, values)?))
        })
        .collect::<Result<_>>()?;
    Ok(FisherInfo {
        fisher,
        anchor,
        sample_count: used.len(),
    })
}

/// `(lambda / 2) * sum_i F_i (theta_i - theta*_i)^2` over `params`, in 64-bit.
pub fn ewc_penalty(params: &ParamSnapshot, fisher: &FisherInfo, lambda: f64) -> Result<f64> {
    let mut total = 0.0f64;
    for (name, theta) in params {
        let (f, anchor) = match (fisher.fisher.get(name), fisher.anchor.get(name)) {
            (Some(f), Some(a)) => (f, a),
            _ => return Err(Error::UntrackedParameter(name.clone())),
        };
        if theta.shape() != anchor.shape() {
            return Err(Error::ShapeMismatch {
                op: "ewc_penalty",
                lhs: theta.shape().to_vec(),
                rhs: anchor.shape().to_vec(),
            });
        }
        for ((&t, &a), &fi) in theta.values().iter().zip(anchor.values()).zip(f.values()) {
            let d = f64::from(t) - f64::from(a);
            total += f64::from(fi) * d * d;
        }
    }
    Ok(0.5 * lambda * total)
}

/// Differentiable penalty over every parameter `fisher` tracks, bound from
/// `net` with `opts`. `None` when nothing is tracked.
pub fn ewc_penalty_on_tape(
    tape: &mut Tape,
    net: &ProgressiveNetwork,
    fisher: &FisherInfo,
    lambda: f64,
    opts: GraphOptions<'_>,
) -> Result<Option<Var>> {
    let mut total: Option<Var> = None;
    for (name, f) in &fisher.fisher {
        let theta = net.bind_named(tape, name, opts)?;
        let anchor = tape.constant(&fisher.anchor[name]);
        let fv = tape.constant(f);
        let d = tape.sub(theta, anchor)?;
        let sq = tape.mul(d, d)?;
        let weighted = tape.mul(sq, fv)?;
        let s = tape.sum(weighted);
        total = Some(match total {
            None => s,
            Some(t) => tape.add(t, s)?,
        });
    }
    Ok(total.map(|t| tape.scale(t, 0.5 * lambda)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn info(f: &[f32], anchor: &[f32]) -> FisherInfo {
        let mut fisher = ParamSnapshot::new();
        let mut anch = ParamSnapshot::new();
        fisher.insert("p".into(), DenseArray::vector(f.to_vec()).unwrap());
        anch.insert("p".into(), DenseArray::vector(anchor.to_vec()).unwrap());
        FisherInfo {
            fisher,
            anchor: anch,
            sample_count: 1,
        }
    }

    #[test]
    fn closed_form_single_parameter() {
        let fi = info(&[2.0], &[0.0]);
        let mut p = ParamSnapshot::new();
        p.insert("p".into(), DenseArray::vector(vec![3.0]).unwrap());
        assert_eq!(ewc_penalty(&p, &fi, 1.0).unwrap(), 9.0);
        p.insert("p".into(), DenseArray::vector(vec![0.0]).unwrap());
        assert_eq!(ewc_penalty(&p, &fi, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn untracked_parameter_is_named() {
        let fi = info(&[1.0], &[0.0]);
        let mut p = ParamSnapshot::new();
        p.insert("col3/w1".into(), DenseArray::vector(vec![1.0]).unwrap());
        let err = ewc_penalty(&p, &fi, 1.0).unwrap_err();
        assert!(err.to_string().contains("col3/w1"));
    }

    #[test]
    fn checkpoint_round_trip() {
        let fi = info(&[1.5, 0.25], &[0.1, -0.2]);
        let mut ck = Checkpoint::new();
        fi.write_to(&mut ck, "fisher/0/");
        assert_eq!(FisherInfo::read_from(&ck, "fisher/0/").unwrap(), fi);
    }
}
