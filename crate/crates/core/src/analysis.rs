//! Decisive boxes and score differences over recorded candidates.

use std::cmp::Ordering;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{input_err, Error, Result};
use crate::geometry::{iou, BBox};
use crate::tracker::{Candidate, FrameRecord};

/// Overlap at which a candidate counts as positive.
pub const DECISIVE_OVERLAP: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameDiagnostics {
    pub p_bbox: Option<BBox>,
    pub n_bbox: Option<BBox>,
    pub p_c: f64,
    pub n_c: f64,
    pub p_o: f64,
    pub n_o: f64,
    pub d: f64,
    /// Overlap of the tracker's output with the ground truth, when known.
    pub pred_overlap: Option<f64>,
}

/// Order on candidates that does not depend on their position in a list.
fn rank(a: &Candidate, b: &Candidate) -> Ordering {
    a.score
        .total_cmp(&b.score)
        .then(b.bbox.x().total_cmp(&a.bbox.x()))
        .then(b.bbox.y().total_cmp(&a.bbox.y()))
        .then(b.bbox.w().total_cmp(&a.bbox.w()))
        .then(b.bbox.h().total_cmp(&a.bbox.h()))
}

pub fn score_difference(p_c: f64, n_c: f64) -> f64 {
    p_c - n_c
}

/// Highest-scoring candidate overlapping the ground truth by at least 0.5
/// (P-bbox) and highest-scoring one of the rest (N-bbox).
///
/// Without a positive candidate both scores are 0; without a negative
/// candidate `N_c` is 0.
pub fn decisive_boxes(candidates: &[Candidate], gt: &BBox) -> Result<FrameDiagnostics> {
    if candidates.is_empty() {
        return input_err("decisive boxes need at least one candidate");
    }
    if candidates.iter().any(|c| !(0.0..=1.0).contains(&c.score)) {
        return input_err("candidate scores must lie in [0, 1]");
    }
    let mut pos: Option<&Candidate> = None;
    let mut neg: Option<&Candidate> = None;
    for c in candidates {
        let slot = if iou(&c.bbox, gt) >= DECISIVE_OVERLAP { &mut pos } else { &mut neg };
        if slot.is_none_or(|s| rank(c, s) == Ordering::Greater) {
            *slot = Some(c);
        }
    }
    let (p_c, n_c) = match (pos, neg) {
        (None, _) => (0.0, 0.0),
        (Some(p), None) => (p.score, 0.0),
        (Some(p), Some(n)) => (p.score, n.score),
    };
    Ok(FrameDiagnostics {
        p_bbox: pos.map(|c| c.bbox),
        n_bbox: neg.map(|c| c.bbox),
        p_c,
        n_c,
        p_o: pos.map_or(0.0, |c| iou(&c.bbox, gt)),
        n_o: neg.map_or(0.0, |c| iou(&c.bbox, gt)),
        d: score_difference(p_c, n_c),
        pred_overlap: None,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub frame: usize,
    pub p_c: f64,
    pub n_c: f64,
    pub d: f64,
    pub overlap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceReport {
    pub rows: Vec<ReportRow>,
    pub mean_d: f64,
    /// Frames with `D < 0`.
    pub faults: usize,
}

/// Per-frame diagnostics of a tracked sequence.
///
/// Every reported frame needs its candidate dump; the first frame is
/// reported only when `include_first` is set.
pub fn sequence_report(records: &[FrameRecord], gt: &[BBox], include_first: bool) -> Result<SequenceReport> {
    if records.len() != gt.len() {
        return Err(Error::Report(format!("{} records for {} ground-truth boxes", records.len(), gt.len())));
    }
    let start = usize::from(!include_first);
    let mut rows = Vec::with_capacity(records.len().saturating_sub(start));
    for (r, g) in records.iter().zip(gt).skip(start) {
        let cands =
            r.candidates.as_ref().ok_or_else(|| Error::Report(format!("frame {} has no candidate dump", r.frame)))?;
        let diag = decisive_boxes(cands, g)?;
        rows.push(ReportRow { frame: r.frame, p_c: diag.p_c, n_c: diag.n_c, d: diag.d, overlap: iou(&r.bbox()?, g) });
    }
    let mean_d = if rows.is_empty() { 0.0 } else { rows.iter().map(|r| r.d).sum::<f64>() / rows.len() as f64 };
    let faults = rows.iter().filter(|r| r.d < 0.0).count();
    Ok(SequenceReport { rows, mean_d, faults })
}

/// Writes `frame,p_c,n_c,d,overlap` rows.
pub fn write_report_csv(report: &SequenceReport, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in &report.rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cand(x: f64, score: f64) -> Candidate {
        Candidate { bbox: BBox::new(x, 0.0, 10.0, 10.0).unwrap(), score }
    }

    fn gt() -> BBox {
        BBox::new(0.0, 0.0, 10.0, 10.0).unwrap()
    }

    #[test]
    fn picks_decisive_pair() {
        let c = [cand(0.0, 0.6), cand(1.0, 0.8), cand(30.0, 0.3), cand(8.0, 0.5)];
        let d = decisive_boxes(&c, &gt()).unwrap();
        assert_eq!(d.p_c, 0.8);
        assert_eq!(d.n_c, 0.5);
        assert!((d.d - 0.3).abs() < 1e-12);
        assert_eq!(d.p_bbox.unwrap().x(), 1.0);
    }

    #[test]
    fn empty_sets() {
        let none = decisive_boxes(&[cand(30.0, 0.9), cand(50.0, 0.1)], &gt()).unwrap();
        assert_eq!((none.p_c, none.n_c, none.d), (0.0, 0.0, 0.0));
        let all = decisive_boxes(&[cand(0.0, 0.9), cand(1.0, 0.1)], &gt()).unwrap();
        assert_eq!((all.p_c, all.n_c, all.d), (0.9, 0.0, 0.9));
        assert!(decisive_boxes(&[], &gt()).is_err());
    }

    #[test]
    fn score_difference_values() {
        assert_eq!(score_difference(0.8, 0.3), 0.5);
        assert_eq!(score_difference(0.4, 0.4), 0.0);
    }

    #[test]
    fn report_needs_dumps() {
        let rec = FrameRecord {
            frame: 1,
            x: 0.0,
            y: 0.0,
            w: 10.0,
            h: 10.0,
            score: 0.9,
            eta: None,
            updated: false,
            candidates: None,
        };
        let first = FrameRecord { frame: 0, ..rec.clone() };
        assert!(matches!(sequence_report(&[first.clone(), rec.clone()], &[gt(), gt()], false), Err(Error::Report(_))));
        let dumped = FrameRecord { candidates: Some(vec![cand(0.0, 0.9), cand(40.0, 0.2)]), ..rec };
        let r = sequence_report(&[first, dumped], &[gt(), gt()], false).unwrap();
        assert_eq!(r.rows.len(), 1);
        assert_eq!(r.faults, 0);
        assert_eq!(r.rows[0].overlap, 1.0);
    }

    #[test]
    fn perfect_tracker_rows() {
        // The best candidate always sits on the ground truth.
        let recs: Vec<FrameRecord> = (0..4)
            .map(|i| FrameRecord {
                frame: i,
                x: 0.0,
                y: 0.0,
                w: 10.0,
                h: 10.0,
                score: 0.9,
                eta: None,
                updated: false,
                candidates: Some(vec![cand(0.0, 0.9), cand(1.0, 0.7), cand(25.0, 0.4 - 0.1 * i as f64)]),
            })
            .collect();
        let g = vec![gt(); 4];
        let r = sequence_report(&recs, &g, false).unwrap();
        assert_eq!(r.rows.len(), 3);
        assert!(r.rows.iter().all(|row| row.d >= 0.0));
        assert_eq!(r.faults, 0);
        assert_eq!(sequence_report(&recs, &g, true).unwrap().rows.len(), 4);
        assert!(matches!(sequence_report(&recs[..3], &g, true), Err(Error::Report(_))));
    }

    fn arb_cands() -> impl Strategy<Value = Vec<Candidate>> {
        prop::collection::vec((-20.0f64..20.0, 0.0f64..1.0), 1..20)
            .prop_map(|v| v.into_iter().map(|(x, s)| cand(x, s)).collect())
    }

    proptest! {
        #[test]
        fn order_invariant_and_bounded(c in arb_cands(), rot in 0usize..20) {
            let a = decisive_boxes(&c, &gt()).unwrap();
            let mut r = c.clone();
            r.rotate_left(rot % c.len());
            r.reverse();
            let b = decisive_boxes(&r, &gt()).unwrap();
            prop_assert_eq!(&a, &b);
            prop_assert!((-1.0..=1.0).contains(&a.d));
        }

        #[test]
        fn difference_is_antisymmetric(a in 0.0f64..1.0, b in 0.0f64..1.0) {
            prop_assert_eq!(score_difference(a, b), -score_difference(b, a));
        }

        #[test]
        fn raising_a_positive_never_lowers_p_c(c in arb_cands(), bump in 0.0f64..1.0) {
            let a = decisive_boxes(&c, &gt()).unwrap();
            let mut r = c.clone();
            for x in r.iter_mut() {
                if iou(&x.bbox, &gt()) >= DECISIVE_OVERLAP {
                    x.score = (x.score + bump).min(1.0);
                    break;
                }
            }
            prop_assert!(decisive_boxes(&r, &gt()).unwrap().p_c >= a.p_c);
        }
    }
}
