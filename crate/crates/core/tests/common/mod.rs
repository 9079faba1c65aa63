//! Brute-force oracles shared by the integration tests.
#![allow(dead_code)]

use csou::eval::{DELTAS, EXTRACTION_THRESHOLD};
use csou::grid::HighResGrid;
use csou::scene::{cell_center, SceneConfig, SparseScene};
use nalgebra::{DMatrix, DVector};

/// Best `k`-column least-squares fit of `y`, by enumerating every subset.
/// Returns the sorted support and its residual norm.
pub fn best_subset(a: &DMatrix<f64>, y: &[f64], k: usize) -> (Vec<usize>, f64) {
    let n = a.ncols();
    let y = DVector::from_column_slice(y);
    let mut best = (Vec::new(), f64::INFINITY);
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        let sub = DMatrix::from_fn(a.nrows(), k, |r, c| a[(r, idx[c])]);
        let svd = sub.clone().svd(true, true);
        if let Ok(x) = svd.solve(&y, 1e-12) {
            let res = (&sub * x - &y).norm();
            if res < best.1 {
                best = (idx.clone(), res);
            }
        }
        // next combination in lexicographic order
        let mut i = k;
        loop {
            if i == 0 {
                return best;
            }
            i -= 1;
            if idx[i] < n - k + i {
                break;
            }
        }
        idx[i] += 1;
        for j in i + 1..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

/// A prediction as the brute-force evaluator sees it.
#[derive(Debug, Clone, Copy)]
pub struct Peak {
    pub x: f64,
    pub y: f64,
    pub confidence: f64,
}

/// Cells above the threshold that strictly exceed all eight neighbours.
/// Fixtures are built without plateaus, so no tie rule is needed.
pub fn peaks(recon: &HighResGrid, cfg: &SceneConfig) -> Vec<Peak> {
    let (n1, n2) = recon.dims();
    let mut out = Vec::new();
    for r in 0..n1 {
        for c in 0..n2 {
            let v = recon.get(r, c);
            if v <= EXTRACTION_THRESHOLD {
                continue;
            }
            let mut is_max = true;
            for dr in -1i64..=1 {
                for dc in -1i64..=1 {
                    let (rr, cc) = (r as i64 + dr, c as i64 + dc);
                    if (dr, dc) == (0, 0) || rr < 0 || cc < 0 || rr >= n1 as i64 || cc >= n2 as i64
                    {
                        continue;
                    }
                    if recon.get(rr as usize, cc as usize) >= v {
                        is_max = false;
                    }
                }
            }
            if is_max {
                let (x, y) = cell_center(r, c, cfg.ratio);
                out.push(Peak {
                    x,
                    y,
                    confidence: v,
                });
            }
        }
    }
    out
}

/// `(confidence, is_tp)` labels from greedy confidence-ordered matching.
pub fn label(peaks: &[Peak], truth: &SparseScene, delta: f64) -> Vec<(f64, bool)> {
    let mut order: Vec<usize> = (0..peaks.len()).collect();
    order.sort_by(|&a, &b| {
        peaks[b]
            .confidence
            .total_cmp(&peaks[a].confidence)
            .then(a.cmp(&b))
    });
    let mut used = vec![false; truth.targets.len()];
    let mut out = Vec::new();
    for i in order {
        let p = peaks[i];
        let mut best: Option<(f64, usize)> = None;
        for (j, t) in truth.targets.iter().enumerate() {
            let d = ((p.x - t.x).powi(2) + (p.y - t.y).powi(2)).sqrt();
            if !used[j] && d <= delta && best.is_none_or(|(bd, _)| d < bd) {
                best = Some((d, j));
            }
        }
        if let Some((_, j)) = best {
            used[j] = true;
        }
        out.push((p.confidence, best.is_some()));
    }
    out
}

/// Area under the PR curve from an explicit sweep over every distinct
/// confidence, recounting from scratch at each threshold.
pub fn swept_ap(labels: &[(f64, bool)], total: usize) -> f64 {
    if total == 0 {
        return if labels.is_empty() { 1.0 } else { 0.0 };
    }
    let mut thresholds: Vec<f64> = labels.iter().map(|l| l.0).collect();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for t in thresholds {
        let kept: Vec<&(f64, bool)> = labels.iter().filter(|l| l.0 >= t).collect();
        let tp = kept.iter().filter(|l| l.1).count();
        let precision = tp as f64 / kept.len() as f64;
        let recall = tp as f64 / total as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    ap
}

/// Brute-force CSO-mAP over a set of reconstructions.
pub fn brute_force_map(
    recons: &[HighResGrid],
    truths: &[SparseScene],
    cfg: &SceneConfig,
) -> Vec<f64> {
    let total: usize = truths.iter().map(|t| t.targets.len()).sum();
    DELTAS
        .iter()
        .map(|&d| {
            let mut labels = Vec::new();
            for (r, t) in recons.iter().zip(truths) {
                labels.extend(label(&peaks(r, cfg), t, d));
            }
            swept_ap(&labels, total)
        })
        .collect()
}
