use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::metrics::Operator;
use crate::error::{Error, Result};
use crate::model::{cv_squared, GateDecision, ModelConfig, ModelParams};
use crate::tensor::Tensor;

/// Smoothing added to centroid entries before taking logarithms.
pub const CENTROID_DELTA: f64 = 1e-8;

/// Token-averaged routing probabilities of one sample, one vector over the
/// routed experts per block.
#[derive(Debug, Clone, PartialEq)]
pub struct GateSignature {
    pub blocks: Vec<Vec<f64>>,
}

/// Which block signatures feed the classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockSel {
    One(usize),
    /// Every block, cross-entropies summed (equivalent to concatenating the
    /// per-block distributions).
    All,
}

impl BlockSel {
    fn blocks(self, n_blocks: usize) -> Result<std::ops::Range<usize>> {
        match self {
            BlockSel::One(b) if b < n_blocks => Ok(b..b + 1),
            BlockSel::One(b) => Err(Error::contract(format!("block {b} out of range for {n_blocks} blocks"))),
            BlockSel::All => Ok(0..n_blocks),
        }
    }
}

/// Splits a batch's routing into per-sample signatures.
pub fn signatures_from_gates(gates: &[GateDecision], batch: usize) -> Result<Vec<GateSignature>> {
    let tokens = gates.first().map_or(0, |g| g.tokens());
    if batch == 0 || tokens % batch != 0 {
        return Err(Error::contract(format!("{tokens} tokens do not split into {batch} samples")));
    }
    let n = tokens / batch;
    Ok((0..batch)
        .map(|b| GateSignature { blocks: gates.iter().map(|g| g.mean_weights(b * n..(b + 1) * n)).collect() })
        .collect())
}

/// Signatures of many `[T, C, H, W]` samples, in input order.
pub fn gate_signatures(params: &ModelParams, cfg: &ModelConfig, inputs: &[&Tensor]) -> Result<Vec<GateSignature>> {
    let mut out = Vec::with_capacity(inputs.len());
    for (preds, gates) in Operator::new(params, cfg).run_chunks(inputs)? {
        out.extend(signatures_from_gates(&gates, preds.len())?);
    }
    Ok(out)
}

pub fn gate_signature(params: &ModelParams, cfg: &ModelConfig, input: &Tensor) -> Result<GateSignature> {
    Ok(gate_signatures(params, cfg, &[input])?.remove(0))
}

/// Per-dataset mean signatures.
#[derive(Debug, Clone, PartialEq)]
pub struct Centroids {
    /// `[dataset][block][expert]`
    pub means: Vec<Vec<Vec<f64>>>,
    pub counts: Vec<usize>,
}

pub fn build_centroids(per_dataset: &[Vec<GateSignature>]) -> Result<Centroids> {
    let mut means = Vec::with_capacity(per_dataset.len());
    let mut counts = Vec::with_capacity(per_dataset.len());
    for (i, sigs) in per_dataset.iter().enumerate() {
        let first = sigs.first().ok_or_else(|| Error::contract(format!("dataset {i} has no calibration samples")))?;
        let mut acc: Vec<Vec<f64>> = first.blocks.iter().map(|b| vec![0.0; b.len()]).collect();
        for s in sigs {
            if s.blocks.len() != acc.len() {
                return Err(Error::contract("signatures disagree on block count"));
            }
            for (a, b) in acc.iter_mut().zip(&s.blocks) {
                a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
            }
        }
        let inv = 1.0 / sigs.len() as f64;
        acc.iter_mut().flatten().for_each(|v| *v *= inv);
        means.push(acc);
        counts.push(sigs.len());
    }
    Ok(Centroids { means, counts })
}

/// `(Y + δ) / (1 + N_r·δ)`
pub fn smooth(y: &[f64]) -> Vec<f64> {
    let den = 1.0 + y.len() as f64 * CENTROID_DELTA;
    y.iter().map(|v| (v + CENTROID_DELTA) / den).collect()
}

/// `−Σ_k I_k log Y_k` against a smoothed centroid.
pub fn cross_entropy(i0: &[f64], centroid: &[f64]) -> f64 {
    -i0.iter().zip(smooth(centroid)).map(|(p, q)| p * q.ln()).sum::<f64>()
}

/// Index of the centroid with the lowest score; ties go to the lowest index.
fn argmin(scores: impl IntoIterator<Item = f64>) -> usize {
    let mut best = (0, f64::INFINITY);
    for (i, s) in scores.into_iter().enumerate() {
        if s < best.1 {
            best = (i, s);
        }
    }
    best.0
}

/// Dataset whose centroid has the lowest cross-entropy against `i0`.
pub fn classify_vector(i0: &[f64], centroids: &[&[f64]]) -> usize {
    argmin(centroids.iter().map(|c| cross_entropy(i0, c)))
}

pub fn classify_dataset(sig: &GateSignature, centroids: &Centroids, sel: BlockSel) -> Result<usize> {
    let blocks = sel.blocks(sig.blocks.len())?;
    if centroids.means.iter().any(|m| m.len() != sig.blocks.len()) {
        return Err(Error::contract("signature and centroids disagree on block count"));
    }
    Ok(argmin(centroids.means.iter().map(|m| blocks.clone().map(|b| cross_entropy(&sig.blocks[b], &m[b])).sum())))
}

/// Overall accuracy and the accuracy within each dataset. `test[i]` holds
/// the signatures of dataset `i`.
pub fn classification_accuracy(
    centroids: &Centroids,
    test: &[Vec<GateSignature>],
    sel: BlockSel,
) -> Result<(f64, Vec<f64>)> {
    if test.len() != centroids.means.len() {
        return Err(Error::contract(format!("{} test sets for {} centroids", test.len(), centroids.means.len())));
    }
    let (mut hits, mut total) = (0usize, 0usize);
    let mut per = Vec::with_capacity(test.len());
    for (i, sigs) in test.iter().enumerate() {
        let mut h = 0;
        for s in sigs {
            h += (classify_dataset(s, centroids, sel)? == i) as usize;
        }
        per.push(if sigs.is_empty() { f64::NAN } else { h as f64 / sigs.len() as f64 });
        hits += h;
        total += sigs.len();
    }
    if total == 0 {
        return Err(Error::contract("no test samples"));
    }
    Ok((hits as f64 / total as f64, per))
}

/// Seeded 50/50 split of trajectory indices into calibration and test
/// halves; the calibration half gets the extra one when the count is odd.
pub fn calibration_split(trajectories: &[usize], seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut order = trajectories.to_vec();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let test = order.split_off(order.len().div_ceil(2));
    order.sort_unstable();
    let mut test = test;
    test.sort_unstable();
    (order, test)
}

/// Fraction of tokens selecting each routed expert, pooled over decisions
/// of the same block. Sums to `K`.
pub fn expert_usage(gates: &[&GateDecision]) -> Result<Vec<f64>> {
    let first = gates.first().ok_or_else(|| Error::contract("no routing decisions"))?;
    let mut counts = vec![0usize; first.n_experts()];
    let mut tokens = 0;
    for g in gates {
        if g.n_experts() != counts.len() {
            return Err(Error::contract("routing decisions disagree on expert count"));
        }
        for (e, rows) in g.rows_per_expert().iter().enumerate() {
            counts[e] += rows.len();
        }
        tokens += g.tokens();
    }
    if tokens == 0 {
        return Err(Error::contract("no tokens"));
    }
    Ok(counts.iter().map(|&c| c as f64 / tokens as f64).collect())
}

/// Coefficient of variation of one block's Importance.
pub fn importance_cv(gate: &GateDecision) -> f64 {
    cv_squared(&gate.importance()).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_is_disjoint_and_seeded() {
        let all: Vec<usize> = (50..57).collect();
        let (a, b) = calibration_split(&all, 3);
        assert_eq!((a.len(), b.len()), (4, 3));
        let mut joined = [a.clone(), b.clone()].concat();
        joined.sort_unstable();
        assert_eq!(joined, all);
        assert_eq!(calibration_split(&all, 3), (a, b));
    }

    #[test]
    fn smoothing_keeps_a_distribution() {
        let s = smooth(&[1.0, 0.0, 0.0]);
        assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!(s.iter().all(|&v| v > 0.0));
    }
}
