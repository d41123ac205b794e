use crate::error::{Error, Result};
use crate::losses::boxes::{giou, BBox};
use crate::tensor::Tensor;

/// Query-to-target pairs, sorted by query index.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MatchAssignment {
    pub pairs: Vec<(usize, usize)>,
    pub num_queries: usize,
}

impl MatchAssignment {
    /// Target index for each query; `None` marks background.
    pub fn target_of(&self) -> Vec<Option<usize>> {
        let mut out = vec![None; self.num_queries];
        for &(q, t) in &self.pairs {
            out[q] = Some(t);
        }
        out
    }

    pub fn total_cost(&self, cost: &Tensor) -> f64 {
        let b = cost.shape()[1];
        self.pairs.iter().map(|&(q, t)| cost.data()[q * b + t]).sum()
    }
}

/// Minimum-cost injective assignment of `B` targets to `N ≥ B` queries.
///
/// `cost` is `[N, B]`. Shortest augmenting paths with dual potentials,
/// `O(B²N)`. Equal-cost alternatives resolve to the first candidate in
/// index order, so results are deterministic.
pub fn hungarian_match(cost: &Tensor) -> Result<MatchAssignment> {
    let (n, b) = match cost.shape() {
        [n, b] => (*n, *b),
        s => return Err(Error::shape("hungarian_match", format!("cost must be [N, B], got {s:?}"))),
    };
    if n < b {
        return Err(Error::Invalid(format!("{n} queries cannot cover {b} targets")));
    }
    if !cost.is_finite() {
        return Err(Error::NonFinite("matching cost".into()));
    }
    let c = |t: usize, q: usize| cost.data()[q * b + t];
    // rows = targets (1-based), cols = queries (1-based); index 0 is the virtual source
    let mut u = vec![0.0; b + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for row in 1..=b {
        owner[0] = row;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let reduced = c(i0 - 1, j - 1) - u[i0] - v[j];
                if reduced < minv[j] {
                    minv[j] = reduced;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let pairs = (1..=n).filter(|&j| owner[j] != 0).map(|j| (j - 1, owner[j] - 1)).collect();
    Ok(MatchAssignment { pairs, num_queries: n })
}

/// Weights of the three matching-cost terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CostWeights {
    pub class: f64,
    pub l1: f64,
    pub giou: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        CostWeights { class: 2.0, l1: 5.0, giou: 2.0 }
    }
}

/// `[N, B]` cost `w_cls·(−p_class) + w_L1·‖b̂−b‖₁ + w_giou·(1−GIoU)`.
///
/// `probs` is `[N, K]`, `boxes` the `N` predicted boxes.
pub fn matching_cost(
    probs: &Tensor,
    boxes: &[BBox],
    target_boxes: &[BBox],
    target_classes: &[usize],
    weights: CostWeights,
) -> Result<Tensor> {
    let (n, k) = match probs.shape() {
        [n, k] => (*n, *k),
        s => return Err(Error::shape("matching_cost", format!("probabilities must be [N, K], got {s:?}"))),
    };
    if boxes.len() != n || target_boxes.len() != target_classes.len() {
        return Err(Error::shape("matching_cost", "prediction or target counts disagree".to_string()));
    }
    if let Some(&cls) = target_classes.iter().find(|&&c| c >= k) {
        return Err(Error::Invalid(format!("target class {cls} out of range for {k} classes")));
    }
    let b = target_boxes.len();
    if b == 0 {
        return Err(Error::Invalid("matching cost needs at least one target".into()));
    }
    let mut data = Vec::with_capacity(n * b);
    for (q, pb) in boxes.iter().enumerate() {
        for (tb, &cls) in target_boxes.iter().zip(target_classes) {
            let l1: f64 = pb.as_array().iter().zip(tb.as_array()).map(|(a, b)| (a - b).abs()).sum();
            data.push(weights.class * -probs.data()[q * k + cls] + weights.l1 * l1 + weights.giou * (1.0 - giou(pb, tb)));
        }
    }
    Tensor::new(&[n, b], data)
}
