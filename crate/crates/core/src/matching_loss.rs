//! Label assignment and the 3D detection loss.

use serde::{Deserialize, Serialize};

use crate::autodiff::{focal_term, sigmoid, Graph, NodeId};
use crate::decoder::{Prediction3D, REG_DIMS};
use crate::error::{Error, Result};
use crate::simulator::Box3D;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssignmentResult {
    /// `(prediction, ground truth)` pairs sorted by prediction index.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched: Vec<usize>,
    pub total_cost: f64,
}

/// Minimum-cost one-to-one assignment of `min(n, m)` pairs on an `n × m`
/// cost matrix (row-major).
pub fn hungarian_assign(cost: &[f64], n: usize, m: usize) -> Result<AssignmentResult> {
    if cost.len() != n * m {
        return Err(Error::Shape(format!("cost has {} entries, expected {n}×{m}", cost.len())));
    }
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(Error::Numeric("assignment cost".into()));
    }
    if n == 0 || m == 0 {
        return Ok(AssignmentResult {
            pairs: Vec::new(),
            unmatched: (0..n).collect(),
            total_cost: 0.0,
        });
    }
    // the solver wants rows <= cols
    let transposed = n > m;
    let (rows, cols) = if transposed { (m, n) } else { (n, m) };
    let at = |i: usize, j: usize| if transposed { cost[j * m + i] } else { cost[i * m + j] };

    // shortest augmenting paths with potentials, 1-based with a virtual column 0
    let mut u = vec![0.0; rows + 1];
    let mut v = vec![0.0; cols + 1];
    let mut owner = vec![0usize; cols + 1];
    let mut way = vec![0usize; cols + 1];
    for i in 1..=rows {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; cols + 1];
        let mut used = vec![false; cols + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=cols {
                if used[j] {
                    continue;
                }
                let cur = at(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=cols {
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

    let mut pairs: Vec<(usize, usize)> = (1..=cols)
        .filter(|&j| owner[j] != 0)
        .map(|j| {
            let (r, c) = (owner[j] - 1, j - 1);
            if transposed {
                (c, r)
            } else {
                (r, c)
            }
        })
        .collect();
    pairs.sort_unstable();
    let total_cost = pairs.iter().map(|&(i, j)| cost[i * m + j]).sum();
    let unmatched = (0..n).filter(|i| !pairs.iter().any(|p| p.0 == *i)).collect();
    Ok(AssignmentResult {
        pairs,
        unmatched,
        total_cost,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_cls: f64,
    pub lambda_3d: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_cls: 2.0,
            lambda_3d: 0.1,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_cls, self.lambda_3d, self.focal_alpha, self.focal_gamma];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) || self.focal_alpha > 1.0 {
            return Err(Error::Config(format!("invalid loss weights {self:?}")));
        }
        Ok(())
    }
}

/// Mean sigmoid focal loss over all entries; targets are 0 or 1.
pub fn focal_loss(logits: &[f64], targets: &[f64], alpha: f64, gamma: f64) -> Result<f64> {
    if logits.len() != targets.len() {
        return Err(Error::Shape("focal logits and targets differ in length".into()));
    }
    if logits.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = logits
        .iter()
        .zip(targets)
        .map(|(&x, &t)| focal_term(x, t, alpha, gamma).0)
        .sum();
    Ok(total / logits.len() as f64)
}

/// Mean absolute difference over the regression entries.
pub fn box_l1_loss(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::Shape(format!(
            "regression lengths {} and {}",
            pred.len(),
            target.len()
        )));
    }
    Ok(pred.iter().zip(target).map(|(a, b)| (a - b).abs()).sum::<f64>() / pred.len() as f64)
}

/// Ground truth in the regression layout of the heads: absolute centre,
/// log sizes, sin/cos yaw, velocity. Comparing absolute centres is the same
/// as comparing offsets from a shared reference point.
pub fn encode_box_target(b: &Box3D) -> [f64; REG_DIMS] {
    [
        b.center[0],
        b.center[1],
        b.center[2],
        b.size[0].ln(),
        b.size[1].ln(),
        b.size[2].ln(),
        b.yaw.sin(),
        b.yaw.cos(),
        b.velocity[0],
        b.velocity[1],
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_cls: f64,
    pub l_reg: f64,
    pub l_3d: f64,
    pub assignment: AssignmentResult,
}

/// Matching cost between every prediction and every ground truth.
fn matching_cost(logits: &Tensor, regression: &Tensor, gts: &[Box3D], w: &LossWeights) -> Result<Vec<f64>> {
    let (n, k) = (logits.rows(), logits.cols());
    let mut cost = Vec::with_capacity(n * gts.len());
    for i in 0..n {
        for gt in gts {
            if gt.class_id >= k {
                return Err(Error::Config(format!("class {} outside {k} logits", gt.class_id)));
            }
            let p = sigmoid(logits.at(i, gt.class_id));
            let l1 = box_l1_loss(regression.row(i), &encode_box_target(gt))?;
            cost.push(-w.lambda_cls * p + l1);
        }
    }
    Ok(cost)
}

/// Builds `L_3d` on the tape; the assignment is held fixed.
///
/// `logits` is `n × K`, `regression` is `n × 10` in the layout of
/// [`encode_box_target`].
pub fn detection_loss_graph(
    g: &mut Graph,
    logits: NodeId,
    regression: NodeId,
    gts: &[Box3D],
    w: &LossWeights,
) -> Result<(NodeId, LossBreakdown)> {
    w.validate()?;
    let (lv, rv) = (g.value(logits).clone(), g.value(regression).clone());
    if lv.rows() != rv.rows() || rv.cols() != REG_DIMS {
        return Err(Error::Shape("logits and regression rows differ".into()));
    }
    let n = lv.rows();
    let cost = matching_cost(&lv, &rv, gts, w)?;
    let assignment = hungarian_assign(&cost, n, gts.len())?;

    let mut targets = Tensor::zeros(&lv.shape);
    for &(i, j) in &assignment.pairs {
        targets.set(i, gts[j].class_id, 1.0);
    }
    let l_cls = g.focal_loss(logits, targets, w.focal_alpha, w.focal_gamma);
    let cls_term = g.scale(l_cls, w.lambda_cls);

    let (root, l_reg) = if assignment.pairs.is_empty() {
        (cls_term, 0.0)
    } else {
        let rows: Vec<NodeId> = assignment
            .pairs
            .iter()
            .map(|&(i, _)| g.slice_rows(regression, i, i + 1))
            .collect();
        let pred = if rows.len() == 1 { rows[0] } else { g.concat_rows(&rows) };
        let tgt: Vec<f64> = assignment
            .pairs
            .iter()
            .flat_map(|&(_, j)| encode_box_target(&gts[j]))
            .collect();
        let tgt = g.leaf(Tensor::matrix(assignment.pairs.len(), REG_DIMS, tgt));
        let diff = g.sub(pred, tgt);
        let diff = g.abs(diff);
        let l_reg = g.mean(diff);
        let v = g.scalar(l_reg);
        (g.add(cls_term, l_reg), v)
    };
    let breakdown = LossBreakdown {
        l_cls: g.scalar(l_cls),
        l_reg,
        l_3d: g.scalar(root),
        assignment,
    };
    Ok((root, breakdown))
}

/// `L_3d = λ_cls · L_cls + L_reg` for decoded predictions.
pub fn detection_loss(preds: &[Prediction3D], gts: &[Box3D], w: &LossWeights) -> Result<LossBreakdown> {
    let k = preds.first().map_or(0, |p| p.logits.len());
    if preds.iter().any(|p| p.logits.len() != k || p.regression.len() != REG_DIMS) {
        return Err(Error::Shape("predictions have inconsistent widths".into()));
    }
    let mut g = Graph::new();
    let logits = g.leaf(Tensor::matrix(preds.len(), k, preds.iter().flat_map(|p| p.logits.clone()).collect()));
    let reg = g.leaf(Tensor::matrix(
        preds.len(),
        REG_DIMS,
        preds.iter().flat_map(|p| p.regression.clone()).collect(),
    ));
    Ok(detection_loss_graph(&mut g, logits, reg, gts, w)?.1)
}

/// `L = L_2d + λ_3d · L_3d`.
pub fn total_loss(l_2d: f64, l_3d: f64, lambda_3d: f64) -> f64 {
    l_2d + lambda_3d * l_3d
}
