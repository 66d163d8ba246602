//! Post-hoc analysis: max-activating input retrieval, per-block linear
//! probes over a fine-tuning run, and block activation norm ratios.

use crate::harness::dataset::Dataset;
use crate::layers::{concat_forward, dense_backward, dense_forward, softmax_rows, DenseParams};
use crate::network::{from_bytes, LayerKind, NetworkGraph};
use crate::numerics::{Matrix, Rng};
use crate::train::{argmax_rows, BlockCurves};
use crate::{Error, Result};

/// Top-k samples by activation of one unit at one node, descending, ties
/// broken by ascending sample index. `k` larger than the set returns the
/// full ranking.
pub fn max_activating(
    net: &NetworkGraph,
    node: &str,
    unit: usize,
    ds: &Dataset,
    k: usize,
) -> Result<Vec<(usize, f64)>> {
    let width = net.width_of(node)?;
    if unit >= width {
        return Err(Error::Config(format!(
            "unit {unit} out of range for node {node:?} of width {width}"
        )));
    }
    if ds.width() != net.input_width() {
        return Err(Error::Config(format!(
            "dataset width {} does not match net input {}",
            ds.width(),
            net.input_width()
        )));
    }
    let mut activations: Vec<(usize, f64)> = Vec::with_capacity(ds.len());
    let indices: Vec<usize> = (0..ds.len()).collect();
    for chunk in indices.chunks(512) {
        let (features, _) = ds.gather(chunk);
        let (cache, _) = net.forward(&features, None)?;
        let out = cache.output(node)?;
        for (local, &sample) in chunk.iter().enumerate() {
            activations.push((sample, out.get(local, unit)));
        }
    }
    activations.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    activations.truncate(k);
    Ok(activations)
}

fn macro_accuracy(preds: &[usize], labels: &[usize], classes: usize) -> f64 {
    let mut correct = vec![0usize; classes];
    let mut totals = vec![0usize; classes];
    for (p, &l) in preds.iter().zip(labels) {
        totals[l] += 1;
        if *p == l {
            correct[l] += 1;
        }
    }
    let mut sum = 0.0;
    let mut present = 0;
    for (c, t) in correct.iter().zip(&totals) {
        if *t > 0 {
            sum += *c as f64 / *t as f64;
            present += 1;
        }
    }
    sum / present as f64
}

/// Deterministic linear probe: zero-init softmax regression fit with 200
/// full-batch gradient steps at rate 0.1 (no momentum, no decay), scored as
/// macro accuracy on the eval features.
fn probe_accuracy(
    fit_x: &Matrix,
    fit_y: &[usize],
    eval_x: &Matrix,
    eval_y: &[usize],
    classes: usize,
) -> Result<f64> {
    let mut probe = DenseParams::gaussian(&mut Rng::new(0), classes, fit_x.cols(), 0.0);
    let inv_n = 1.0 / fit_x.rows() as f64;
    for _ in 0..200 {
        let logits = dense_forward(&probe, fit_x)?;
        let mut d = softmax_rows(&logits);
        for (row, &y) in fit_y.iter().enumerate() {
            let r = d.row_mut(row);
            r[y] -= 1.0;
            for v in r.iter_mut() {
                *v *= inv_n;
            }
        }
        let grads = dense_backward(&probe, fit_x, &d)?;
        let w = probe.weights.data_mut();
        for (wi, gi) in w.iter_mut().zip(grads.d_weights.data()) {
            *wi -= 0.1 * gi;
        }
    }
    let logits = dense_forward(&probe, eval_x)?;
    Ok(macro_accuracy(&argmax_rows(&logits), eval_y, classes))
}

/// The concat node a grown classifier reads, with its old-block head and
/// new-block tail inputs.
fn concat_blocks(net: &NetworkGraph) -> Result<(String, String, Vec<String>)> {
    let feat = net.feature_output().to_string();
    match net.node(&feat) {
        Some(node) if matches!(node.kind, LayerKind::Concat) => Ok((
            feat,
            node.inputs[0].clone(),
            node.inputs[1..].to_vec(),
        )),
        Some(_) => Err(Error::Config(
            "block analysis needs a width-augmented net (classifier on a concat)".into(),
        )),
        None => Err(Error::Config(format!("feature output {feat:?} missing"))),
    }
}

/// Forward `ds` and return (old block, new blocks joined, full concat)
/// activations as consumed by the classifier.
fn block_activations(net: &NetworkGraph, ds: &Dataset) -> Result<(Matrix, Matrix, Matrix)> {
    let (concat, old, new) = concat_blocks(net)?;
    let indices: Vec<usize> = (0..ds.len()).collect();
    let (features, _) = ds.gather(&indices);
    let (cache, _) = net.forward(&features, None)?;
    let old_m = cache.output(&old)?.clone();
    let new_parts: Vec<&Matrix> = new
        .iter()
        .map(|n| cache.output(n))
        .collect::<Result<_>>()?;
    let new_m = concat_forward(&new_parts)?;
    let combined = cache.output(&concat)?.clone();
    Ok((old_m, new_m, combined))
}

/// Per-epoch linear-probe accuracy of the old block, the new block, and
/// their concatenation, over retained training snapshots. Probes are fit on
/// `fit` and scored on `eval`.
pub fn block_learning_curves(
    history: &[Vec<u8>],
    fit: &Dataset,
    eval: &Dataset,
) -> Result<BlockCurves> {
    if history.is_empty() {
        return Err(Error::Config("no snapshots to probe".into()));
    }
    if fit.class_count != eval.class_count {
        return Err(Error::Config(format!(
            "probe fit set has {} classes, eval set {}",
            fit.class_count, eval.class_count
        )));
    }
    let classes = fit.class_count;
    let mut curves = BlockCurves {
        old_block: Vec::with_capacity(history.len()),
        new_block: Vec::with_capacity(history.len()),
        combined: Vec::with_capacity(history.len()),
    };
    for snapshot in history {
        let net = from_bytes(snapshot)?;
        let (fit_old, fit_new, fit_all) = block_activations(&net, fit)?;
        let (ev_old, ev_new, ev_all) = block_activations(&net, eval)?;
        curves
            .old_block
            .push(probe_accuracy(&fit_old, &fit.labels, &ev_old, &eval.labels, classes)?);
        curves
            .new_block
            .push(probe_accuracy(&fit_new, &fit.labels, &ev_new, &eval.labels, classes)?);
        curves
            .combined
            .push(probe_accuracy(&fit_all, &fit.labels, &ev_all, &eval.labels, classes)?);
    }
    Ok(curves)
}

/// Mean row norm of the new blocks over mean row norm of the old block, both
/// as consumed by the classifier's concat. Near 1 when scaling does its job;
/// far from 1 when raw fresh activations sit next to trained ones.
pub fn block_norm_ratio(net: &NetworkGraph, ds: &Dataset) -> Result<f64> {
    let (old, new, _) = block_activations(net, ds)?;
    let mean_norm = |m: &Matrix| -> f64 {
        (0..m.rows())
            .map(|r| m.row(r).iter().map(|v| v * v).sum::<f64>().sqrt())
            .sum::<f64>()
            / m.rows() as f64
    };
    let old_norm = mean_norm(&old);
    if old_norm == 0.0 {
        return Err(Error::Domain("old block is silent on this data".into()));
    }
    Ok(mean_norm(&new) / old_norm)
}
