//! Matching cost and Hungarian loss for the keypoint estimator.
//!
//! `cost(q, t) = −λ_cls · p_q(class_t) + λ_kp · meanL1(kp_q, kp_t)`.
//! The loss under the optimal assignment is
//! `λ_cls_loss · class + λ_kp_loss · keypoint`, where `class` averages
//! cross-entropy over all `Q` queries (unmatched ones target no-entity with
//! weight `w_noentity`) and `keypoint` averages meanL1 over matched pairs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{QueryPredictionSet, FIRST_OBJECT_CLASS, LEFT_CLASS, RIGHT_CLASS};
use crate::graph::{Graph, Var};
use crate::hungarian::{solve_assignment, Assignment, CostMatrix};
use crate::scene::{FramePose, ENTITY_DIM};
use crate::tensor::{log_sum_exp, softmax, Tensor};

/// One ground-truth entity.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetEntity {
    pub class_id: usize,
    pub keypoints: Vec<f64>,
}

/// Left hand, right hand, object, in that order.
pub fn targets_from_pose(pose: &FramePose) -> Vec<TargetEntity> {
    let flat = pose.to_flat();
    vec![
        TargetEntity {
            class_id: LEFT_CLASS,
            keypoints: flat[..ENTITY_DIM].to_vec(),
        },
        TargetEntity {
            class_id: RIGHT_CLASS,
            keypoints: flat[ENTITY_DIM..2 * ENTITY_DIM].to_vec(),
        },
        TargetEntity {
            class_id: FIRST_OBJECT_CLASS + pose.object.class_id,
            keypoints: flat[2 * ENTITY_DIM..].to_vec(),
        },
    ]
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriterionWeights {
    pub match_class: f64,
    pub match_keypoint: f64,
    pub loss_class: f64,
    pub loss_keypoint: f64,
    pub no_entity: f64,
}

impl Default for CriterionWeights {
    fn default() -> Self {
        CriterionWeights {
            match_class: 1.0,
            match_keypoint: 5.0,
            loss_class: 1.0,
            loss_keypoint: 5.0,
            no_entity: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown {
    pub class_loss: f64,
    pub keypoint_loss: f64,
    pub total: f64,
    pub assignment: Assignment,
}

pub fn mean_l1(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

fn check(preds: &QueryPredictionSet, targets: &[TargetEntity]) -> Result<usize> {
    if preds.is_empty() {
        return Err(Error::Empty("query predictions"));
    }
    if targets.len() > preds.len() {
        return Err(Error::InvalidArgument(format!(
            "{} targets for {} queries",
            targets.len(),
            preds.len()
        )));
    }
    let n_classes = preds.predictions[0].class_logits.len();
    for p in &preds.predictions {
        if p.class_logits.len() != n_classes || p.keypoints.len() != ENTITY_DIM {
            return Err(Error::Shape("ragged query predictions".into()));
        }
    }
    for t in targets {
        if t.class_id + 1 >= n_classes || t.keypoints.len() != ENTITY_DIM {
            return Err(Error::InvalidArgument(format!(
                "target class {} with {} keypoint values",
                t.class_id,
                t.keypoints.len()
            )));
        }
    }
    Ok(n_classes)
}

/// `Q × |targets|` matching cost.
pub fn matching_cost(
    preds: &QueryPredictionSet,
    targets: &[TargetEntity],
    lambda_class: f64,
    lambda_keypoint: f64,
) -> Result<CostMatrix> {
    check(preds, targets)?;
    if targets.is_empty() {
        return Err(Error::Empty("targets"));
    }
    let mut costs = Vec::with_capacity(preds.len() * targets.len());
    for p in &preds.predictions {
        let prob = softmax(&p.class_logits)?;
        for t in targets {
            costs.push(-lambda_class * prob[t.class_id] + lambda_keypoint * mean_l1(&p.keypoints, &t.keypoints));
        }
    }
    CostMatrix::new(preds.len(), targets.len(), costs)
}

/// Per-query class targets and weights under `assignment`.
fn class_targets(
    q: usize,
    n_classes: usize,
    targets: &[TargetEntity],
    assignment: &Assignment,
    no_entity_weight: f64,
) -> (Vec<usize>, Vec<f64>) {
    let mut cls = vec![n_classes - 1; q];
    let mut w = vec![no_entity_weight; q];
    for &(row, col) in &assignment.pairs {
        cls[row] = targets[col].class_id;
        w[row] = 1.0;
    }
    (cls, w)
}

fn assign(preds: &QueryPredictionSet, targets: &[TargetEntity], weights: &CriterionWeights) -> Result<Assignment> {
    if targets.is_empty() {
        return Ok(Assignment {
            pairs: Vec::new(),
            total_cost: 0.0,
        });
    }
    let cost = matching_cost(preds, targets, weights.match_class, weights.match_keypoint)?;
    Ok(solve_assignment(&cost))
}

/// Loss value without gradients.
pub fn hungarian_loss(
    preds: &QueryPredictionSet,
    targets: &[TargetEntity],
    weights: &CriterionWeights,
) -> Result<LossBreakdown> {
    let n_classes = check(preds, targets)?;
    let assignment = assign(preds, targets, weights)?;
    let q = preds.len();
    let (cls, w) = class_targets(q, n_classes, targets, &assignment, weights.no_entity);
    let class_loss = preds
        .predictions
        .iter()
        .enumerate()
        .map(|(i, p)| w[i] * (log_sum_exp(&p.class_logits) - p.class_logits[cls[i]]))
        .sum::<f64>()
        / q as f64;
    let keypoint_loss = if assignment.pairs.is_empty() {
        0.0
    } else {
        assignment
            .pairs
            .iter()
            .map(|&(r, c)| mean_l1(&preds.predictions[r].keypoints, &targets[c].keypoints))
            .sum::<f64>()
            / assignment.pairs.len() as f64
    };
    Ok(LossBreakdown {
        class_loss,
        keypoint_loss,
        total: weights.loss_class * class_loss + weights.loss_keypoint * keypoint_loss,
        assignment,
    })
}

/// Loss on graph outputs (`Q × C` logits, `Q × 63` keypoints). Matching uses
/// the current values; gradients flow through the loss only.
pub fn hungarian_loss_graph(
    g: &mut Graph,
    logits: Var,
    keypoints: Var,
    targets: &[TargetEntity],
    weights: &CriterionWeights,
) -> Result<(Var, LossBreakdown)> {
    let preds = QueryPredictionSet::from_values(g.value(logits), g.value(keypoints));
    let n_classes = check(&preds, targets)?;
    let assignment = assign(&preds, targets, weights)?;
    let q = preds.len();
    let (cls, w) = class_targets(q, n_classes, targets, &assignment, weights.no_entity);
    let class_term = g.cross_entropy(logits, &cls, &w, q as f64)?;
    let class_loss = g.value(class_term).item();
    let scaled_class = g.scale(class_term, weights.loss_class);
    let (total, keypoint_loss) = if assignment.pairs.is_empty() {
        (scaled_class, 0.0)
    } else {
        let rows: Vec<usize> = assignment.pairs.iter().map(|&(r, _)| r).collect();
        let picked = g.select_rows(keypoints, &rows)?;
        let mut tgt = Vec::with_capacity(rows.len() * ENTITY_DIM);
        for &(_, c) in &assignment.pairs {
            tgt.extend_from_slice(&targets[c].keypoints);
        }
        let tgt = g.constant(Tensor::matrix(rows.len(), ENTITY_DIM, tgt)?);
        let diff = g.sub(picked, tgt)?;
        let abs = g.abs(diff);
        let kp = g.mean(abs);
        let kp_value = g.value(kp).item();
        let scaled_kp = g.scale(kp, weights.loss_keypoint);
        (g.add(scaled_class, scaled_kp)?, kp_value)
    };
    let breakdown = LossBreakdown {
        class_loss,
        keypoint_loss,
        total: g.value(total).item(),
        assignment,
    };
    Ok((total, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimator::QueryPrediction;

    fn pred(class: Option<usize>, kp: f64) -> QueryPrediction {
        let mut logits = vec![0.0; 7];
        if let Some(c) = class {
            logits[c] = 40.0;
        }
        QueryPrediction {
            class_logits: logits,
            keypoints: vec![kp; ENTITY_DIM],
        }
    }

    fn target(class: usize, kp: f64) -> TargetEntity {
        TargetEntity {
            class_id: class,
            keypoints: vec![kp; ENTITY_DIM],
        }
    }

    #[test]
    fn cost_examples() {
        let preds = QueryPredictionSet {
            predictions: vec![pred(Some(0), 0.3), pred(None, 0.3)],
        };
        let c = matching_cost(&preds, &[target(0, 0.3), target(0, 0.4)], 1.0, 5.0).unwrap();
        assert!((c.get(0, 0) + 1.0).abs() < 1e-15);
        assert!((c.get(1, 0) + 1.0 / 7.0).abs() < 1e-15);
        assert!((c.get(0, 1) - (-1.0 + 0.5)).abs() < 1e-12);
    }

    #[test]
    fn too_many_targets() {
        let preds = QueryPredictionSet {
            predictions: vec![pred(Some(0), 0.3)],
        };
        assert!(matching_cost(&preds, &[target(0, 0.3), target(1, 0.3)], 1.0, 5.0).is_err());
        assert!(hungarian_loss(&preds, &[target(0, 0.3), target(1, 0.3)], &CriterionWeights::default()).is_err());
    }

    #[test]
    fn perfect_predictions_have_zero_loss() {
        let targets = [target(0, 0.2), target(1, 0.5), target(4, 0.7)];
        let three = QueryPredictionSet {
            predictions: vec![pred(Some(4), 0.7), pred(Some(0), 0.2), pred(Some(1), 0.5)],
        };
        let w = CriterionWeights::default();
        let l3 = hungarian_loss(&three, &targets, &w).unwrap();
        assert!(l3.class_loss < 1e-6 && l3.keypoint_loss == 0.0);
        let mut four = three.clone();
        four.predictions.push(pred(Some(6), 0.9));
        let l4 = hungarian_loss(&four, &targets, &w).unwrap();
        assert!((l4.total - l3.total).abs() < 1e-6);
        assert_eq!(l4.assignment.pairs, vec![(0, 2), (1, 0), (2, 1)]);
    }

    #[test]
    fn graph_loss_matches_plain_loss() {
        let preds = QueryPredictionSet {
            predictions: (0..5)
                .map(|i| QueryPrediction {
                    class_logits: (0..7).map(|c| ((i * 7 + c) as f64 * 0.37).sin()).collect(),
                    keypoints: (0..ENTITY_DIM).map(|k| 0.5 + 0.4 * ((i * 63 + k) as f64).cos()).collect(),
                })
                .collect(),
        };
        let targets = [target(0, 0.2), target(1, 0.5), target(3, 0.7)];
        let w = CriterionWeights::default();
        let plain = hungarian_loss(&preds, &targets, &w).unwrap();
        let mut g = Graph::new();
        let logits = g.leaf(Tensor::from_rows(&preds.predictions.iter().map(|p| p.class_logits.clone()).collect::<Vec<_>>()).unwrap().with_requires_grad(true));
        let kps = g.leaf(Tensor::from_rows(&preds.predictions.iter().map(|p| p.keypoints.clone()).collect::<Vec<_>>()).unwrap().with_requires_grad(true));
        let (loss, b) = hungarian_loss_graph(&mut g, logits, kps, &targets, &w).unwrap();
        assert!((b.total - plain.total).abs() < 1e-12);
        assert_eq!(b.assignment, plain.assignment);
        // unmatched queries get no keypoint gradient
        let grads = g.backward(loss).unwrap();
        let gk = grads.get(kps).unwrap();
        for q in 0..5 {
            let matched = b.assignment.pairs.iter().any(|&(r, _)| r == q);
            let row = &gk[q * ENTITY_DIM..(q + 1) * ENTITY_DIM];
            assert_eq!(row.iter().any(|v| *v != 0.0), matched);
        }
    }

    #[test]
    fn duplicated_targets_any_optimum_same_loss() {
        let preds = QueryPredictionSet {
            predictions: vec![pred(Some(0), 0.3), pred(Some(0), 0.3), pred(None, 0.9)],
        };
        let targets = [target(0, 0.3), target(0, 0.3)];
        let w = CriterionWeights::default();
        let l = hungarian_loss(&preds, &targets, &w).unwrap();
        let swapped = [targets[1].clone(), targets[0].clone()];
        let l2 = hungarian_loss(&preds, &swapped, &w).unwrap();
        assert_eq!(l.total, l2.total);
    }
}
