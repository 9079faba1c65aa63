//! Target extraction, prediction matching, average precision and CSO-mAP.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::HighResGrid;
use crate::scene::{cell_center, reproject, SceneConfig, SparseScene};

/// Sub-pixel values must exceed this to count as a detection.
pub const EXTRACTION_THRESHOLD: f64 = 50.0;

/// Localization tolerances in observed pixels.
pub const DELTAS: [f64; 5] = [0.05, 0.10, 0.15, 0.20, 0.25];

/// `0.05, 0.10, …, 0.50`.
pub fn extended_deltas() -> Vec<f64> {
    (1..=10).map(|i| i as f64 * 0.05).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Prediction {
    /// Column coordinate of the cell center, observed pixels.
    pub x: f64,
    /// Row coordinate of the cell center, observed pixels.
    pub y: f64,
    /// Sub-pixel cell.
    pub cell: (usize, usize),
    /// Observed pixel the cell re-projects to.
    pub pixel: (usize, usize),
    pub intensity: f64,
    pub confidence: f64,
}

/// Every sub-pixel value above the threshold that is a maximum of its 3x3
/// neighbourhood. On plateaus only the first cell in raster order survives.
pub fn extract_targets(recon: &HighResGrid, cfg: &SceneConfig) -> Result<Vec<Prediction>> {
    let (n1, n2) = cfg.high_res_dims();
    if recon.dims() != (n1, n2) {
        return Err(Error::DimensionMismatch(format!(
            "reconstruction is {:?}, expected {n1}x{n2}",
            recon.dims()
        )));
    }
    let mut out = Vec::new();
    for r in 0..n1 {
        for c in 0..n2 {
            let v = recon.get(r, c);
            if !(v > EXTRACTION_THRESHOLD) || !is_peak(recon, r, c) {
                continue;
            }
            let (x, y) = cell_center(r, c, cfg.ratio);
            out.push(Prediction {
                x,
                y,
                cell: (r, c),
                pixel: reproject(r, c, cfg),
                intensity: v,
                confidence: v,
            });
        }
    }
    Ok(out)
}

fn is_peak(g: &HighResGrid, r: usize, c: usize) -> bool {
    let v = g.get(r, c);
    for dr in -1i64..=1 {
        for dc in -1i64..=1 {
            if dr == 0 && dc == 0 {
                continue;
            }
            let (rr, cc) = (r as i64 + dr, c as i64 + dc);
            if rr < 0 || cc < 0 || rr >= g.rows() as i64 || cc >= g.cols() as i64 {
                continue;
            }
            let n = g.get(rr as usize, cc as usize);
            let earlier = dr < 0 || (dr == 0 && dc < 0);
            if n > v || (earlier && n == v) {
                return false;
            }
        }
    }
    true
}

/// Outcome of matching one sample's predictions against its truths.
#[derive(Debug, Clone, PartialEq)]
pub struct Matching {
    /// `(confidence, is_true_positive)` per prediction, in input order.
    pub labels: Vec<(f64, bool)>,
    /// `(prediction, truth)` index pairs.
    pub pairs: Vec<(usize, usize)>,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

/// Greedy matching: predictions in descending confidence each take the
/// nearest still-unmatched truth within `delta`.
pub fn match_predictions(
    preds: &[Prediction],
    truth: &SparseScene,
    delta: f64,
) -> Result<Matching> {
    if !(delta > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "match tolerance must be > 0, got {delta}"
        )));
    }
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].confidence.total_cmp(&preds[a].confidence));
    let mut taken = vec![false; truth.len()];
    let mut labels: Vec<(f64, bool)> = preds.iter().map(|p| (p.confidence, false)).collect();
    let mut pairs = Vec::new();
    for &i in &order {
        let p = &preds[i];
        let mut best: Option<(usize, f64)> = None;
        for (j, t) in truth.targets.iter().enumerate() {
            if taken[j] {
                continue;
            }
            let d = (p.x - t.x).hypot(p.y - t.y);
            if d <= delta && best.is_none_or(|(_, bd)| d < bd) {
                best = Some((j, d));
            }
        }
        if let Some((j, _)) = best {
            taken[j] = true;
            labels[i].1 = true;
            pairs.push((i, j));
        }
    }
    let tp = pairs.len();
    Ok(Matching {
        labels,
        pairs,
        tp,
        fp: preds.len() - tp,
        fn_: truth.len() - tp,
    })
}

/// Non-interpolated area under the precision-recall curve, sweeping the
/// confidence threshold over every distinct value.
pub fn average_precision(labels: &[(f64, bool)], total_truths: usize) -> f64 {
    if total_truths == 0 {
        return if labels.is_empty() { 1.0 } else { 0.0 };
    }
    let mut sorted = labels.to_vec();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    let t = total_truths as f64;
    let (mut tp, mut n) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let conf = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == conf {
            tp += sorted[i].1 as usize;
            n += 1;
            i += 1;
        }
        let recall = tp as f64 / t;
        ap += (tp as f64 / n as f64) * (recall - prev_recall);
        prev_recall = recall;
    }
    ap
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ApRow {
    pub delta: f64,
    pub ap: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ApReport {
    pub rows: Vec<ApRow>,
    pub cso_map: f64,
}

impl ApReport {
    /// AP never decreases as the tolerance grows.
    pub fn is_monotone(&self) -> bool {
        let mut rows: Vec<&ApRow> = self.rows.iter().collect();
        rows.sort_by(|a, b| a.delta.total_cmp(&b.delta));
        rows.windows(2).all(|w| w[1].ap >= w[0].ap)
    }
}

/// AP per tolerance over a whole set, predictions pooled across samples
/// after per-sample matching; CSO-mAP is their mean.
pub fn cso_map(
    recons: &[HighResGrid],
    truths: &[SparseScene],
    cfg: &SceneConfig,
    deltas: &[f64],
) -> Result<ApReport> {
    if deltas.is_empty() {
        return Err(Error::InvalidParameter("empty tolerance set".into()));
    }
    if recons.len() != truths.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} reconstructions for {} truths",
            recons.len(),
            truths.len()
        )));
    }
    let preds = recons
        .iter()
        .map(|r| extract_targets(r, cfg))
        .collect::<Result<Vec<_>>>()?;
    let total: usize = truths.iter().map(|t| t.len()).sum();
    let mut rows = Vec::with_capacity(deltas.len());
    for &delta in deltas {
        let mut labels = Vec::new();
        let (mut tp, mut fp) = (0, 0);
        for (p, t) in preds.iter().zip(truths) {
            let m = match_predictions(p, t, delta)?;
            tp += m.tp;
            fp += m.fp;
            labels.extend(m.labels);
        }
        rows.push(ApRow {
            delta,
            ap: average_precision(&labels, total),
            tp,
            fp,
            fn_: total - tp,
        });
    }
    let cso_map = rows.iter().map(|r| r.ap).sum::<f64>() / rows.len() as f64;
    Ok(ApReport { rows, cso_map })
}

/// `method,delta,ap,tp,fp,fn,cso_map`, one row per method and tolerance.
pub fn report_csv(reports: &[(String, ApReport)]) -> String {
    let mut s = String::from("method,delta,ap,tp,fp,fn,cso_map\n");
    for (method, rep) in reports {
        for r in &rep.rows {
            s.push_str(&format!(
                "{method},{},{},{},{},{},{}\n",
                r.delta, r.ap, r.tp, r.fp, r.fn_, rep.cso_map
            ));
        }
    }
    s
}

pub fn report_json(reports: &[(String, ApReport)]) -> String {
    #[derive(Serialize)]
    struct Entry<'a> {
        method: &'a str,
        #[serde(flatten)]
        report: &'a ApReport,
    }
    let entries: Vec<Entry> = reports
        .iter()
        .map(|(m, r)| Entry {
            method: m,
            report: r,
        })
        .collect();
    let mut s = serde_json::to_string_pretty(&entries).expect("report serializes");
    s.push('\n');
    s
}

/// Aligned table with one row per method, APs in percent.
pub fn report_table(reports: &[(String, ApReport)]) -> String {
    let Some((_, first)) = reports.first() else {
        return String::new();
    };
    let width = reports
        .iter()
        .map(|(m, _)| m.len())
        .max()
        .unwrap_or(6)
        .max(6);
    let mut s = format!("{:<width$}", "method");
    for r in &first.rows {
        s.push_str(&format!(
            " {:>8}",
            format!("AP_{:02}", (r.delta * 100.0).round() as u32)
        ));
    }
    s.push_str(&format!(" {:>8}\n", "CSO-mAP"));
    for (m, rep) in reports {
        s.push_str(&format!("{m:<width$}"));
        for r in &rep.rows {
            s.push_str(&format!(" {:>8.2}", r.ap * 100.0));
        }
        s.push_str(&format!(" {:>8.2}\n", rep.cso_map * 100.0));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::Target;

    fn cfg() -> SceneConfig {
        SceneConfig::default()
    }

    fn pred(x: f64, y: f64, conf: f64) -> Prediction {
        Prediction {
            x,
            y,
            cell: (0, 0),
            pixel: (0, 0),
            intensity: conf,
            confidence: conf,
        }
    }

    fn scene(pts: &[(f64, f64)]) -> SparseScene {
        SparseScene::new(
            pts.iter()
                .map(|&(x, y)| Target { x, y, s: 100.0 })
                .collect(),
        )
    }

    #[test]
    fn single_bright_pixel() {
        let mut g = HighResGrid::zeros(33, 33);
        g.set(22, 13, 100.0);
        let p = extract_targets(&g, &cfg()).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!((p[0].x, p[0].y, p[0].intensity), (4.0, 7.0, 100.0));
        assert_eq!(p[0].pixel, (7, 4));
    }

    #[test]
    fn below_threshold_and_two_peaks() {
        let mut g = HighResGrid::zeros(33, 33);
        g.set(5, 5, 49.0);
        assert!(extract_targets(&g, &cfg()).unwrap().is_empty());
        g.set(5, 5, 60.0);
        g.set(20, 20, 70.0);
        assert_eq!(extract_targets(&g, &cfg()).unwrap().len(), 2);
    }

    #[test]
    fn plateau_keeps_first_cell_only() {
        let mut g = HighResGrid::zeros(33, 33);
        g.set(10, 10, 80.0);
        g.set(10, 11, 80.0);
        g.set(11, 10, 80.0);
        let p = extract_targets(&g, &cfg()).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!(p[0].cell, (10, 10));
    }

    #[test]
    fn match_examples() {
        let m = match_predictions(&[pred(3.0, 3.0, 1.0)], &scene(&[(3.0, 3.0)]), 0.05).unwrap();
        assert_eq!((m.tp, m.fp, m.fn_), (1, 0, 0));
        let m = match_predictions(&[pred(3.0, 3.0, 1.0)], &scene(&[]), 0.05).unwrap();
        assert_eq!((m.tp, m.fp, m.fn_), (0, 1, 0));
        let preds = [pred(3.0, 3.0, 0.5), pred(3.05, 3.0, 0.9)];
        let m = match_predictions(&preds, &scene(&[(3.0, 3.0)]), 0.1).unwrap();
        assert_eq!((m.tp, m.fp), (1, 1));
        assert_eq!(m.labels, vec![(0.5, false), (0.9, true)]);
        assert!(match_predictions(&preds, &scene(&[]), 0.0).is_err());
    }

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision(&[(0.9, true), (0.5, true)], 2), 1.0);
        assert_eq!(average_precision(&[(0.9, false), (0.5, false)], 2), 0.0);
        let ap = average_precision(&[(0.9, true), (0.8, false), (0.7, true)], 2);
        assert!((ap - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-15);
        assert_eq!(average_precision(&[], 0), 1.0);
        assert_eq!(average_precision(&[(0.3, false)], 0), 0.0);
        assert_eq!(average_precision(&[], 3), 0.0);
    }

    #[test]
    fn tied_confidences_form_one_threshold_step() {
        // both at 0.5: a single PR point (P = 1/2, R = 1/2)
        let ap = average_precision(&[(0.5, true), (0.5, false)], 2);
        assert_eq!(ap, 0.25);
    }

    #[test]
    fn perfect_and_empty_sets() {
        let c = cfg();
        let truths = vec![scene(&[(4.0, 7.0), (6.0, 5.0)]), scene(&[(3.0, 3.0)])];
        let mut recons = Vec::new();
        for t in &truths {
            let mut s = t.clone();
            s.targets.iter_mut().for_each(|t| t.s = 120.0);
            recons.push(crate::scene::embed_scene(&s, &c).unwrap());
        }
        let rep = cso_map(&recons, &truths, &c, &DELTAS).unwrap();
        assert!(rep.rows.iter().all(|r| r.ap == 1.0));
        assert_eq!(rep.cso_map, 1.0);
        let empty = vec![HighResGrid::zeros(33, 33); 2];
        let rep = cso_map(&empty, &truths, &c, &DELTAS).unwrap();
        assert!(rep.rows.iter().all(|r| r.ap == 0.0 && r.fn_ == 3));
    }

    #[test]
    fn csv_and_table_layout() {
        let rep = ApReport {
            rows: vec![ApRow {
                delta: 0.05,
                ap: 0.5,
                tp: 1,
                fp: 1,
                fn_: 1,
            }],
            cso_map: 0.5,
        };
        let reports = vec![("admm".to_string(), rep)];
        assert_eq!(
            report_csv(&reports),
            "method,delta,ap,tp,fp,fn,cso_map\nadmm,0.05,0.5,1,1,1,0.5\n"
        );
        assert!(report_table(&reports).contains("AP_05"));
        assert!(report_json(&reports).contains("\"fn\": 1"));
    }
}
