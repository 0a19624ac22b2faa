//! Routing records, Top-K selection and the load-balancing statistic.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Routing of every token at one block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateDecision {
    pub block: usize,
    n_experts: usize,
    k: usize,
    /// Row-major `[tokens, N_r]` softmax weights.
    full_weights: Vec<f64>,
    /// Row-major `[tokens, K]` `(expert, weight)` pairs, heaviest first.
    selected: Vec<(usize, f64)>,
}

/// The `k` largest entries, ties broken by the lowest index, heaviest first.
pub fn select_top_k(weights: &[f64], k: usize) -> Vec<(usize, f64)> {
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| weights[b].total_cmp(&weights[a]).then(a.cmp(&b)));
    order.into_iter().take(k).map(|i| (i, weights[i])).collect()
}

/// Numerically stable softmax of one logit row.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|v| (v - mx).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

impl GateDecision {
    /// Builds the record from row-major softmax weights `[tokens, n_experts]`.
    pub fn from_probs(block: usize, probs: &[f64], n_experts: usize, k: usize) -> Result<Self> {
        if n_experts == 0 || k == 0 || k > n_experts || probs.len() % n_experts != 0 {
            return Err(Error::contract(format!(
                "cannot route {} weights over {n_experts} experts with K = {k}",
                probs.len()
            )));
        }
        let selected = probs.chunks_exact(n_experts).flat_map(|row| select_top_k(row, k)).collect();
        Ok(GateDecision { block, n_experts, k, full_weights: probs.to_vec(), selected })
    }

    pub fn n_experts(&self) -> usize {
        self.n_experts
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn tokens(&self) -> usize {
        self.full_weights.len() / self.n_experts
    }

    pub fn weights(&self, token: usize) -> &[f64] {
        &self.full_weights[token * self.n_experts..(token + 1) * self.n_experts]
    }

    pub fn selected(&self, token: usize) -> &[(usize, f64)] {
        &self.selected[token * self.k..(token + 1) * self.k]
    }

    pub fn full_weights(&self) -> &[f64] {
        &self.full_weights
    }

    /// Token rows routed to each expert, ascending.
    pub fn rows_per_expert(&self) -> Vec<Vec<usize>> {
        let mut rows = vec![Vec::new(); self.n_experts];
        for t in 0..self.tokens() {
            for &(e, _) in self.selected(t) {
                rows[e].push(t);
            }
        }
        rows
    }

    /// Sum of full weights over tokens, per expert.
    pub fn importance(&self) -> Vec<f64> {
        let mut imp = vec![0.0; self.n_experts];
        for row in self.full_weights.chunks_exact(self.n_experts) {
            for (a, v) in imp.iter_mut().zip(row) {
                *a += v;
            }
        }
        imp
    }

    /// Mean full weight vector over a token range.
    pub fn mean_weights(&self, tokens: std::ops::Range<usize>) -> Vec<f64> {
        let count = tokens.len() as f64;
        let mut acc = vec![0.0; self.n_experts];
        for t in tokens {
            for (a, v) in acc.iter_mut().zip(self.weights(t)) {
                *a += v;
            }
        }
        acc.iter_mut().for_each(|a| *a /= count);
        acc
    }
}

/// Per-expert evaluation counters of one MoE layer.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MoeStats {
    /// Token rows at which each routed expert's output was computed.
    pub routed_rows: Vec<usize>,
    /// Token rows at which shared experts were evaluated, summed over them.
    pub shared_rows: usize,
}

impl MoeStats {
    pub fn new(n_routed: usize) -> Self {
        MoeStats { routed_rows: vec![0; n_routed], shared_rows: 0 }
    }

    pub fn routed_total(&self) -> usize {
        self.routed_rows.iter().sum()
    }
}

/// Squared coefficient of variation, population standard deviation over mean.
pub fn cv_squared(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    var / (mean * mean)
}

/// `w_bal · CV²(Importance)` with Importance summed over every token of
/// every decision given (all samples of a batch at one block).
pub fn balance_loss(gates: &[&GateDecision], w_bal: f64) -> Result<f64> {
    let first = gates.first().ok_or_else(|| Error::contract("balance loss needs at least one gate"))?;
    let mut imp = vec![0.0; first.n_experts()];
    for g in gates {
        if g.n_experts() != imp.len() {
            return Err(Error::contract("gates disagree on the expert count"));
        }
        for (a, v) in imp.iter_mut().zip(g.importance()) {
            *a += v;
        }
    }
    Ok(w_bal * cv_squared(&imp))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_of_descending_logits() {
        let w = softmax(&[2.0, 1.0, 0.0, -1.0]);
        let want = [0.6439, 0.2369, 0.0871, 0.0321];
        for (a, b) in w.iter().zip(want) {
            assert!((a - b).abs() < 5e-5, "{w:?}");
        }
        let g = GateDecision::from_probs(0, &w, 4, 2).unwrap();
        assert_eq!(g.selected(0).iter().map(|s| s.0).collect::<Vec<_>>(), vec![0, 1]);
        assert_eq!(g.selected(0)[0].1, w[0]);
    }

    #[test]
    fn ties_prefer_lower_indices() {
        let w = softmax(&[0.3; 4]);
        assert!(w.iter().all(|v| (v - 0.25).abs() < 1e-15));
        let sel = select_top_k(&w, 2);
        assert_eq!(sel.iter().map(|s| s.0).collect::<Vec<_>>(), vec![0, 1]);
        assert_eq!(select_top_k(&[0.1, 0.4, 0.1, 0.4], 3).iter().map(|s| s.0).collect::<Vec<_>>(), vec![1, 3, 0]);
    }

    #[test]
    fn shift_invariance() {
        let a = softmax(&[0.5, -1.0, 2.0]);
        let b = softmax(&[10.5, 9.0, 12.0]);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn collapse_closed_forms() {
        let mut collapsed = vec![0.0; 16];
        collapsed[3] = 7.0;
        assert!((cv_squared(&collapsed) - 15.0).abs() < 1e-12);
        let g = GateDecision::from_probs(0, &[1.0, 0.0, 0.0, 0.0], 4, 2).unwrap();
        assert!((balance_loss(&[&g], 0.1).unwrap() - 0.3).abs() < 1e-12);
        let u = GateDecision::from_probs(0, &[0.25; 8], 4, 1).unwrap();
        assert_eq!(balance_loss(&[&u], 0.1).unwrap(), 0.0);
    }

    #[test]
    fn rows_per_expert_partition_selections() {
        let probs = [0.5, 0.3, 0.2, 0.1, 0.1, 0.8];
        let g = GateDecision::from_probs(1, &probs, 3, 2).unwrap();
        assert_eq!(g.rows_per_expert(), vec![vec![0, 1], vec![0], vec![1]]);
        for (a, b) in g.importance().iter().zip([0.6, 0.4, 1.0]) {
            assert!((a - b).abs() < 1e-15);
        }
    }
}
