//! Evaluation protocol: greedy TP/FP labeling at a tIoU threshold,
//! 101-point interpolated AUPRC per class, the mean over thresholds, and
//! standalone average tIoU for localization quality.

use crate::types::{EventClass, EventPrediction, GroundTruthEvent};
use crate::warn;

pub const TIOU_THRESHOLDS: [f64; 3] = [0.3, 0.5, 0.7];

/// Greedy TP/FP labeling against the ground truth of one video.
///
/// Only predictions whose predicted class equals `positive` enter the
/// ranking (other-class predictions can never be true positives and do not
/// pollute this class's precision). Walking predictions by descending
/// confidence, a prediction is a TP iff some not-yet-consumed positive-class
/// ground-truth event overlaps it at tIoU >= threshold; the best-overlap
/// event is consumed. Returns (confidence, is_tp) pairs in ranking order
/// plus P, the number of positive-class ground-truth events.
pub fn label_predictions(
    preds: &[EventPrediction],
    gts: &[GroundTruthEvent],
    tiou_threshold: f64,
    positive: EventClass,
) -> (Vec<(f64, bool)>, usize) {
    let positive_gt: Vec<&GroundTruthEvent> = gts
        .iter()
        .filter(|g| (g.error && positive == EventClass::Error) || (!g.error && positive == EventClass::Correct))
        .collect();
    let p = positive_gt.len();

    let mut ranked: Vec<&EventPrediction> = preds
        .iter()
        .filter(|pr| pr.predicted_class() == positive)
        .collect();
    ranked.sort_by(|a, b| {
        b.fg_score
            .partial_cmp(&a.fg_score)
            .expect("finite confidence")
            .then(a.query_index.cmp(&b.query_index))
    });

    let mut consumed = vec![false; positive_gt.len()];
    let mut out = Vec::with_capacity(ranked.len());
    for pred in ranked {
        let mut best: Option<(usize, f64)> = None;
        for (j, gt) in positive_gt.iter().enumerate() {
            if consumed[j] {
                continue;
            }
            let t = pred.span.tiou(&gt.span);
            if t >= tiou_threshold && best.map_or(true, |(_, bt)| t > bt) {
                best = Some((j, t));
            }
        }
        match best {
            Some((j, _)) => {
                consumed[j] = true;
                out.push((pred.fg_score, true));
            }
            None => out.push((pred.fg_score, false)),
        }
    }
    (out, p)
}

/// 101-point interpolated average precision.
///
/// Sorts by descending score, accumulates TP/FP counts, monotonizes the
/// precision envelope from right to left, then averages the interpolated
/// precision at recall points j/100 (zero where the recall is never
/// reached). P = 0 or an empty ranking yields 0.
pub fn auprc(scored: &[(f64, bool)], p: usize) -> f64 {
    if p == 0 {
        warn("auprc: no positive ground-truth instances; reporting 0");
        return 0.0;
    }
    if scored.is_empty() {
        return 0.0;
    }
    let mut ranked = scored.to_vec();
    ranked.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("finite scores"));
    let n = ranked.len();
    let mut precision = vec![0.0; n];
    let mut recall = vec![0.0; n];
    let (mut tp, mut fp) = (0usize, 0usize);
    for (k, &(_, is_tp)) in ranked.iter().enumerate() {
        if is_tp {
            tp += 1;
        } else {
            fp += 1;
        }
        precision[k] = tp as f64 / (tp + fp).max(1) as f64;
        recall[k] = tp as f64 / p.max(1) as f64;
    }
    for k in (0..n - 1).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut ap = 0.0;
    for j in 0..=100 {
        let r = j as f64 / 100.0;
        // recall is non-decreasing: binary search for the first k reaching r
        let k = recall.partition_point(|&v| v < r);
        if k < n {
            ap += precision[k];
        }
    }
    ap / 101.0
}

/// Localization quality: mean over ground-truth events of the best tIoU any
/// prediction achieves (class-agnostic). None when there is no ground truth.
pub fn avg_tiou(preds: &[EventPrediction], gts: &[GroundTruthEvent]) -> Option<f64> {
    if gts.is_empty() {
        return None;
    }
    let total: f64 = gts
        .iter()
        .map(|gt| {
            preds
                .iter()
                .map(|p| p.span.tiou(&gt.span))
                .fold(0.0f64, f64::max)
        })
        .sum();
    Some(total / gts.len() as f64)
}

/// Prediction-side variant (mean over predictions of their best ground-truth
/// overlap), exposed behind a flag for protocol comparisons.
pub fn avg_tiou_pred_side(preds: &[EventPrediction], gts: &[GroundTruthEvent]) -> Option<f64> {
    if preds.is_empty() || gts.is_empty() {
        return None;
    }
    let total: f64 = preds
        .iter()
        .map(|p| {
            gts.iter()
                .map(|gt| p.span.tiou(&gt.span))
                .fold(0.0f64, f64::max)
        })
        .sum();
    Some(total / preds.len() as f64)
}

#[derive(Debug, Clone, Default)]
pub struct ClassEval {
    pub auprc_by_threshold: [f64; 3],
    pub mean_auprc: f64,
}

#[derive(Debug, Clone, Default)]
pub struct EvalReport {
    pub error: ClassEval,
    pub correct: ClassEval,
    pub avg_tiou: Option<f64>,
    /// AP of a random-ranking detector, approximated by the positive-class
    /// (error) prevalence among ground-truth events.
    pub no_skill: f64,
    pub num_videos: usize,
    pub num_gt: usize,
}

/// Pool per-video labelings into dataset-level PR curves at each threshold
/// and class, and compute the class-agnostic localization score.
pub fn evaluate_dataset(per_video: &[(Vec<EventPrediction>, Vec<GroundTruthEvent>)]) -> EvalReport {
    let mut report = EvalReport {
        num_videos: per_video.len(),
        ..Default::default()
    };
    let total_gt: usize = per_video.iter().map(|(_, g)| g.len()).sum();
    let error_gt: usize = per_video
        .iter()
        .map(|(_, g)| g.iter().filter(|e| e.error).count())
        .sum();
    report.num_gt = total_gt;
    report.no_skill = if total_gt == 0 {
        0.0
    } else {
        error_gt as f64 / total_gt as f64
    };

    for class in [EventClass::Error, EventClass::Correct] {
        let mut by_threshold = [0.0; 3];
        for (ti, &threshold) in TIOU_THRESHOLDS.iter().enumerate() {
            let mut pooled = Vec::new();
            let mut p_total = 0usize;
            for (preds, gts) in per_video {
                let (scored, p) = label_predictions(preds, gts, threshold, class);
                pooled.extend(scored);
                p_total += p;
            }
            by_threshold[ti] = if p_total == 0 && total_gt > 0 {
                // a class absent from the ground truth scores 0 without noise
                0.0
            } else {
                auprc(&pooled, p_total)
            };
        }
        let eval = ClassEval {
            auprc_by_threshold: by_threshold,
            mean_auprc: by_threshold.iter().sum::<f64>() / by_threshold.len() as f64,
        };
        match class {
            EventClass::Error => report.error = eval,
            EventClass::Correct => report.correct = eval,
        }
    }

    // localization: GT-side best overlap, averaged over every event in the set
    let mut tiou_sum = 0.0;
    let mut tiou_count = 0usize;
    for (preds, gts) in per_video {
        for gt in gts {
            let best = preds
                .iter()
                .map(|p| p.span.tiou(&gt.span))
                .fold(0.0f64, f64::max);
            tiou_sum += best;
            tiou_count += 1;
        }
    }
    report.avg_tiou = if tiou_count == 0 {
        None
    } else {
        Some(tiou_sum / tiou_count as f64)
    };
    report
}

impl EvalReport {
    /// Human-readable `key: value` rendering.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut push = |k: &str, v: String| {
            out.push_str(k);
            out.push_str(": ");
            out.push_str(&v);
            out.push('\n');
        };
        push("videos", self.num_videos.to_string());
        push("gt_events", self.num_gt.to_string());
        push("no_skill_auprc", format!("{:.6}", self.no_skill));
        for (class, eval) in [("error", &self.error), ("correct", &self.correct)] {
            for (ti, &t) in TIOU_THRESHOLDS.iter().enumerate() {
                push(
                    &format!("auprc_{class}_at_{t:.1}"),
                    format!("{:.6}", eval.auprc_by_threshold[ti]),
                );
            }
            push(&format!("mean_auprc_{class}"), format!("{:.6}", eval.mean_auprc));
        }
        push(
            "avg_tiou",
            match self.avg_tiou {
                Some(v) => format!("{v:.6}"),
                None => "null".to_string(),
            },
        );
        out
    }

    /// Machine-readable rows: threshold, class, auprc, avg_tiou.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("threshold,class,auprc,avg_tiou\n");
        let tiou = self
            .avg_tiou
            .map(|v| format!("{v:.6}"))
            .unwrap_or_else(|| "null".to_string());
        for (class, eval) in [("error", &self.error), ("correct", &self.correct)] {
            for (ti, &t) in TIOU_THRESHOLDS.iter().enumerate() {
                out.push_str(&format!(
                    "{t:.1},{class},{:.6},{tiou}\n",
                    eval.auprc_by_threshold[ti]
                ));
            }
            out.push_str(&format!("mean,{class},{:.6},{tiou}\n", eval.mean_auprc));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::Span;
    use proptest::prelude::*;

    fn pred(span: (f64, f64), fg: f64, err: f64, idx: usize) -> EventPrediction {
        EventPrediction {
            span: Span::new(span.0, span.1),
            fg_score: fg,
            error_prob: err,
            query_index: idx,
            caption: None,
        }
    }

    fn gt(span: (f64, f64), error: bool) -> GroundTruthEvent {
        GroundTruthEvent { span: Span::new(span.0, span.1), error }
    }

    /// Independent exhaustive PR evaluator: for each recall point, the best
    /// precision over every ranking prefix that reaches it.
    fn exhaustive_ap(scored: &[(f64, bool)], p: usize) -> f64 {
        if p == 0 || scored.is_empty() {
            return 0.0;
        }
        let mut ranked = scored.to_vec();
        ranked.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
        let mut ap = 0.0;
        for j in 0..=100 {
            let r = j as f64 / 100.0;
            let mut best: Option<f64> = None;
            let (mut tp, mut fp) = (0usize, 0usize);
            for &(_, is_tp) in &ranked {
                if is_tp {
                    tp += 1;
                } else {
                    fp += 1;
                }
                let recall = tp as f64 / p.max(1) as f64;
                let precision = tp as f64 / (tp + fp).max(1) as f64;
                if recall >= r {
                    best = Some(best.map_or(precision, |b: f64| b.max(precision)));
                }
            }
            ap += best.unwrap_or(0.0);
        }
        ap / 101.0
    }

    #[test]
    fn single_true_positive_is_perfect() {
        assert_eq!(auprc(&[(0.9, true)], 1), 1.0);
    }

    #[test]
    fn fp_above_tp_halves_the_score() {
        // ranking (FP, TP) with P = 1: monotonized precision 0.5 everywhere
        let v = auprc(&[(0.9, false), (0.8, true)], 1);
        assert!((v - 0.5).abs() < 1e-12, "{v}");
    }

    #[test]
    fn empty_predictions_score_zero() {
        assert_eq!(auprc(&[], 1), 0.0);
        assert_eq!(auprc(&[(0.5, true)], 0), 0.0);
    }

    #[test]
    fn matches_exhaustive_oracle_on_all_patterns() {
        // every TP/FP pattern of 6 predictions with fixed distinct scores
        let scores = [0.91, 0.83, 0.77, 0.6, 0.42, 0.13];
        for pattern in 0..(1 << 6) {
            let scored: Vec<(f64, bool)> = scores
                .iter()
                .enumerate()
                .map(|(i, &s)| (s, pattern & (1 << i) != 0))
                .collect();
            let p = scored.iter().filter(|(_, t)| *t).count().max(1);
            let fast = auprc(&scored, p);
            let slow = exhaustive_ap(&scored, p);
            assert_eq!(fast, slow, "pattern {pattern:06b}");
        }
    }

    #[test]
    fn promoting_a_tp_never_hurts() {
        // enumerated 4-prediction sets: raising a TP above all FPs
        let base = [(0.8, false), (0.6, true), (0.4, false), (0.2, true)];
        for p in [1usize, 2, 3] {
            let before = auprc(&base, p);
            // promote the first TP to the top
            let promoted = [(0.95, true), (0.8, false), (0.4, false), (0.2, true)];
            let after = auprc(&promoted, p);
            assert!(
                after >= before - 1e-12,
                "promotion lowered AP at P={p}: {before} -> {after}"
            );
        }
    }

    #[test]
    fn invariant_to_monotone_confidence_transforms() {
        let scored = [(0.9, true), (0.7, false), (0.5, true), (0.2, false)];
        let transformed: Vec<(f64, bool)> =
            scored.iter().map(|&(s, t)| (s * 3.0 + 1.0, t)).collect();
        let exp: Vec<(f64, bool)> = scored.iter().map(|&(s, t)| (s.exp(), t)).collect();
        let base = auprc(&scored, 2);
        assert_eq!(base, auprc(&transformed, 2));
        assert_eq!(base, auprc(&exp, 2));
    }

    #[test]
    fn labeling_exact_cover() {
        let preds = vec![pred((0.2, 0.5), 0.9, 0.9, 0)];
        let gts = vec![gt((0.2, 0.5), true)];
        let (scored, p) = label_predictions(&preds, &gts, 0.5, EventClass::Error);
        assert_eq!(p, 1);
        assert_eq!(scored, vec![(0.9, true)]);
    }

    #[test]
    fn double_counting_is_guarded() {
        // two predictions on one GT: the higher-confidence one wins
        let preds = vec![
            pred((0.2, 0.5), 0.7, 0.9, 0),
            pred((0.21, 0.5), 0.9, 0.9, 1),
        ];
        let gts = vec![gt((0.2, 0.5), true)];
        let (scored, _) = label_predictions(&preds, &gts, 0.5, EventClass::Error);
        assert_eq!(scored.len(), 2);
        assert_eq!(scored[0], (0.9, true));
        assert!(!scored[1].1, "second hit on a consumed GT must be FP");
    }

    #[test]
    fn threshold_boundary() {
        // tIoU 0.4 at threshold 0.5 -> FP
        let preds = vec![pred((0.0, 0.4), 0.9, 0.9, 0)];
        let gts = vec![gt((0.15, 0.4), true)]; // tIoU = 0.25/0.4 = 0.625? pick spans for 0.4
        let t = preds[0].span.tiou(&gts[0].span);
        assert!(t > 0.5, "sanity: {t}");
        let far = vec![gt((0.3, 1.0), true)]; // tIoU = 0.1/1.0 = 0.1
        let (scored, _) = label_predictions(&preds, &far, 0.5, EventClass::Error);
        assert!(!scored[0].1);
    }

    #[test]
    fn other_class_predictions_are_excluded() {
        let preds = vec![
            pred((0.2, 0.5), 0.99, 0.1, 0), // predicted correct
            pred((0.2, 0.5), 0.5, 0.9, 1),  // predicted error
        ];
        let gts = vec![gt((0.2, 0.5), true)];
        let (scored, p) = label_predictions(&preds, &gts, 0.5, EventClass::Error);
        assert_eq!(p, 1);
        assert_eq!(scored.len(), 1, "only error-class predictions are ranked");
        assert_eq!(scored[0], (0.5, true));
    }

    #[test]
    fn avg_tiou_hand_cases() {
        let gts = vec![gt((0.0, 0.5), false)];
        let perfect = vec![pred((0.0, 0.5), 0.9, 0.1, 0)];
        assert_eq!(avg_tiou(&perfect, &gts), Some(1.0));

        let halves = vec![pred((0.0, 0.25), 0.9, 0.1, 0), pred((0.25, 0.5), 0.8, 0.1, 1)];
        let v = avg_tiou(&halves, &gts).unwrap();
        assert!((v - 0.5).abs() < 1e-12, "best overlap is IoU 1/2: {v}");

        assert_eq!(avg_tiou(&perfect, &[]), None);
    }

    #[test]
    fn dataset_report_means_thresholds() {
        let video = (
            vec![pred((0.2, 0.5), 0.9, 0.9, 0), pred((0.6, 0.8), 0.8, 0.1, 1)],
            vec![gt((0.2, 0.5), true), gt((0.6, 0.8), false)],
        );
        let report = evaluate_dataset(&[video]);
        let e = &report.error;
        let expected_mean = e.auprc_by_threshold.iter().sum::<f64>() / 3.0;
        assert!((e.mean_auprc - expected_mean).abs() < 1e-15);
        assert!((report.no_skill - 0.5).abs() < 1e-12);
        assert_eq!(report.avg_tiou, Some(1.0));
        // perfect detector: every threshold clean
        for &v in &e.auprc_by_threshold {
            assert_eq!(v, 1.0);
        }
        assert_eq!(report.correct.mean_auprc, 1.0);
    }

    proptest! {
        #[test]
        fn auprc_stays_in_unit_interval(
            labels in proptest::collection::vec(any::<bool>(), 1..12),
            seed in 0u64..1000
        ) {
            let scored: Vec<(f64, bool)> = labels
                .iter()
                .enumerate()
                .map(|(i, &l)| ((seed as f64 + i as f64 * 17.3) % 101.0, l))
                .collect();
            let p = scored.iter().filter(|(_, t)| *t).count().max(1);
            let v = auprc(&scored, p);
            prop_assert!((0.0..=1.0).contains(&v));
        }

        #[test]
        fn avg_tiou_stays_in_unit_interval(
            spans in proptest::collection::vec((0.0f64..0.9, 0.01f64..0.1), 1..6)
        ) {
            let preds: Vec<EventPrediction> = spans
                .iter()
                .enumerate()
                .map(|(i, &(s, l))| pred((s, (s + l).min(1.0)), 0.5, 0.5, i))
                .collect();
            let gts = vec![gt((0.3, 0.6), true)];
            if let Some(v) = avg_tiou(&preds, &gts) {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }
    }
}
