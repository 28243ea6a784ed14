//! Evaluation metrics and the mean-pose baseline.

use crate::error::{Error, Result};
use crate::scene::{FramePose, POSE_DIM};

/// Fraction of exact matches.
pub fn evaluate_top1(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::Empty("predictions"));
    }
    if predictions.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / predictions.len() as f64)
}

/// `confusion[true][predicted]` counts.
pub fn confusion_matrix(predictions: &[usize], labels: &[usize], n_classes: usize) -> Result<Vec<Vec<usize>>> {
    if predictions.len() != labels.len() {
        return Err(Error::Shape("confusion inputs differ in length".into()));
    }
    let mut m = vec![vec![0; n_classes]; n_classes];
    for (&p, &l) in predictions.iter().zip(labels) {
        if p >= n_classes || l >= n_classes {
            return Err(Error::OutOfBounds(format!("class {} of {n_classes}", p.max(l))));
        }
        m[l][p] += 1;
    }
    Ok(m)
}

/// Mean Euclidean distance over the 63 points of one frame.
pub fn frame_mpjpe(pred: &FramePose, gt: &FramePose) -> f64 {
    pred.all_points()
        .zip(gt.all_points())
        .map(|(a, b)| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt())
        .sum::<f64>()
        / 63.0
}

/// Per-frame MPJPE averaged over frames.
pub fn evaluate_mpjpe(pred: &[FramePose], gt: &[FramePose]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!(
            "{} predicted frames for {} ground-truth frames",
            pred.len(),
            gt.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::Empty("frames"));
    }
    Ok(pred.iter().zip(gt).map(|(p, g)| frame_mpjpe(p, g)).sum::<f64>() / pred.len() as f64)
}

/// Coordinate-wise mean of `poses`; the object class is the most frequent
/// one, lowest id on ties.
pub fn mean_pose(poses: &[FramePose]) -> Result<FramePose> {
    if poses.is_empty() {
        return Err(Error::Empty("poses"));
    }
    let mut acc = vec![0.0; POSE_DIM];
    let mut counts = Vec::new();
    for p in poses {
        for (a, v) in acc.iter_mut().zip(p.to_flat()) {
            *a += v;
        }
        let c = p.object.class_id;
        if counts.len() <= c {
            counts.resize(c + 1, 0usize);
        }
        counts[c] += 1;
    }
    let n = poses.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    let class = (0..counts.len()).fold(0, |best, c| if counts[c] > counts[best] { c } else { best });
    FramePose::from_flat(&acc, class)
}
