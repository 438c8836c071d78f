//! Group-detection average precision per group-size bucket and their mean.
//!
//! Every scene contributes scored predicted groups and a ground-truth
//! partition. Predictions are matched greedily by descending confidence to
//! unmatched ground-truth groups by member-set IoU. A prediction is listed in
//! the bucket of its own size and counts as a true positive there only if its
//! matched ground-truth group falls in the same bucket; recall is counted
//! against ground-truth groups per bucket.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::clustering::Partition;
use crate::error::{Error, Result};
use crate::tracks::TrackId;

pub const REPORT_FORMAT: &str = "trackgroup-metrics/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SizeBucket {
    G1,
    G2,
    G3,
    G4,
    G5Plus,
}

impl SizeBucket {
    pub const ALL: [SizeBucket; 5] = [Self::G1, Self::G2, Self::G3, Self::G4, Self::G5Plus];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn label(self) -> &'static str {
        match self {
            Self::G1 => "G1",
            Self::G2 => "G2",
            Self::G3 => "G3",
            Self::G4 => "G4",
            Self::G5Plus => "G5+",
        }
    }
}

/// Which sizes the last bucket holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LargeGroupRule {
    /// Sizes 5 and up; the five buckets partition all sizes.
    #[default]
    AtLeastFive,
    /// Sizes 6 and up; groups of exactly five are not evaluated.
    MoreThanFive,
}

impl LargeGroupRule {
    pub fn bucket(self, size: usize) -> Option<SizeBucket> {
        match (size, self) {
            (0, _) => None,
            (1, _) => Some(SizeBucket::G1),
            (2, _) => Some(SizeBucket::G2),
            (3, _) => Some(SizeBucket::G3),
            (4, _) => Some(SizeBucket::G4),
            (5, Self::MoreThanFive) => None,
            _ => Some(SizeBucket::G5Plus),
        }
    }
}

impl fmt::Display for LargeGroupRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::AtLeastFive => "at-least-five",
            Self::MoreThanFive => "more-than-five",
        })
    }
}

impl FromStr for LargeGroupRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "at-least-five" => Ok(Self::AtLeastFive),
            "more-than-five" => Ok(Self::MoreThanFive),
            other => Err(Error::Config(format!("unknown large-group rule `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredGroup {
    pub members: BTreeSet<TrackId>,
    pub confidence: f64,
}

impl ScoredGroup {
    pub fn new(members: impl IntoIterator<Item = TrackId>, confidence: f64) -> Self {
        Self {
            members: members.into_iter().collect(),
            confidence,
        }
    }
}

/// Ranking score of a predicted group from the soft adjacency `y`
/// (indices into `y`). Groups of two or more score the mean affinity over
/// their member pairs; a singleton scores one minus its strongest affinity to
/// anyone else (1 when alone in the scene).
pub fn group_confidence(members: &[usize], y: &DMatrix<f64>) -> f64 {
    match members {
        [] => 0.0,
        &[only] => {
            let strongest = (0..y.nrows()).filter(|&j| j != only).map(|j| y[(only, j)]).fold(0.0, f64::max);
            1.0 - strongest
        }
        _ => {
            let mut total = 0.0;
            let mut pairs = 0usize;
            for (a, &i) in members.iter().enumerate() {
                for &j in &members[a + 1..] {
                    total += y[(i, j)];
                    pairs += 1;
                }
            }
            total / pairs as f64
        }
    }
}

/// Member-set IoU.
pub fn set_iou(a: &BTreeSet<TrackId>, b: &BTreeSet<TrackId>) -> f64 {
    let inter = a.intersection(b).count();
    let union = a.len() + b.len() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// For each prediction (in input order), the index of the ground-truth group
/// it claims, if any. Predictions are visited by descending confidence (input
/// order on ties) and take the unmatched ground-truth group of highest IoU
/// when that IoU reaches `iou_thresh`.
pub fn match_groups(pred: &[ScoredGroup], gt: &Partition, iou_thresh: f64) -> Vec<Option<usize>> {
    let gt_sets: Vec<BTreeSet<TrackId>> = gt.groups().iter().map(|g| g.iter().copied().collect()).collect();
    let mut order: Vec<usize> = (0..pred.len()).collect();
    order.sort_by(|&a, &b| pred[b].confidence.total_cmp(&pred[a].confidence).then(a.cmp(&b)));
    let mut taken = vec![false; gt_sets.len()];
    let mut result = vec![None; pred.len()];
    for p in order {
        let best = gt_sets
            .iter()
            .enumerate()
            .filter(|(g, _)| !taken[*g])
            .map(|(g, set)| (g, set_iou(&pred[p].members, set)))
            .fold(None, |best: Option<(usize, f64)>, cand| match best {
                Some(b) if b.1 >= cand.1 => Some(b),
                _ => Some(cand),
            });
        if let Some((g, iou)) = best {
            if iou >= iou_thresh {
                taken[g] = true;
                result[p] = Some(g);
            }
        }
    }
    result
}

/// All-points interpolated AP of ranked detections `(confidence, is_tp)`
/// against `n_gt` ground-truth objects; `None` when `n_gt == 0`.
///
/// Equal confidences are ranked false-positive first, which makes the value
/// independent of input order.
pub fn average_precision(detections: &[(f64, bool)], n_gt: usize) -> Option<f64> {
    if n_gt == 0 {
        return None;
    }
    let mut ranked = detections.to_vec();
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut tp = 0usize;
    let mut points = Vec::with_capacity(ranked.len());
    for (k, &(_, hit)) in ranked.iter().enumerate() {
        tp += usize::from(hit);
        points.push((tp as f64 / n_gt as f64, tp as f64 / (k + 1) as f64));
    }
    // precision envelope from the right
    let mut envelope = 0.0f64;
    for p in points.iter_mut().rev() {
        envelope = envelope.max(p.1);
        p.1 = envelope;
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (recall, precision) in points {
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Some(ap)
}

/// Unweighted mean of the defined bucket APs.
pub fn group_map(aps: &[Option<f64>]) -> Option<f64> {
    let defined: Vec<f64> = aps.iter().flatten().copied().collect();
    (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub iou_thresh: f64,
    pub large_group_rule: LargeGroupRule,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_thresh: 0.5,
            large_group_rule: LargeGroupRule::AtLeastFive,
        }
    }
}

/// Dataset-wide accumulator; add scenes in any order, then [`finish`](Self::finish).
#[derive(Debug, Clone)]
pub struct GroupEvaluator {
    cfg: EvalConfig,
    detections: [Vec<(f64, bool)>; 5],
    gt_counts: [usize; 5],
    scenes: usize,
}

impl GroupEvaluator {
    pub fn new(cfg: EvalConfig) -> Self {
        Self {
            cfg,
            detections: Default::default(),
            gt_counts: [0; 5],
            scenes: 0,
        }
    }

    pub fn add_scene(&mut self, pred: &[ScoredGroup], gt: &Partition) {
        let rule = self.cfg.large_group_rule;
        let gt_buckets: Vec<Option<SizeBucket>> = gt.groups().iter().map(|g| rule.bucket(g.len())).collect();
        for b in gt_buckets.iter().flatten() {
            self.gt_counts[b.index()] += 1;
        }
        let matches = match_groups(pred, gt, self.cfg.iou_thresh);
        for (p, m) in pred.iter().zip(matches) {
            let Some(bucket) = rule.bucket(p.members.len()) else { continue };
            let tp = m.is_some_and(|g| gt_buckets[g] == Some(bucket));
            self.detections[bucket.index()].push((p.confidence, tp));
        }
        self.scenes += 1;
    }

    pub fn finish(&self) -> MetricsReport {
        let buckets = SizeBucket::ALL
            .iter()
            .map(|&b| {
                let dets = &self.detections[b.index()];
                let ap = average_precision(dets, self.gt_counts[b.index()]);
                if ap.is_none() {
                    log::warn!("no ground-truth groups in bucket {}; AP undefined and excluded from mAP", b.label());
                }
                BucketStats {
                    bucket: b,
                    ap,
                    ground_truth: self.gt_counts[b.index()],
                    detections: dets.len(),
                    true_positives: dets.iter().filter(|d| d.1).count(),
                }
            })
            .collect::<Vec<_>>();
        let map = group_map(&buckets.iter().map(|b| b.ap).collect::<Vec<_>>());
        MetricsReport {
            iou_thresh: self.cfg.iou_thresh,
            large_group_rule: self.cfg.large_group_rule,
            scenes: self.scenes,
            buckets,
            map,
            config_hash: String::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BucketStats {
    pub bucket: SizeBucket,
    pub ap: Option<f64>,
    pub ground_truth: usize,
    pub detections: usize,
    pub true_positives: usize,
}

/// Evaluation summary. Text form, one `key = value` per line after a format
/// tag:
///
/// ```text
/// # trackgroup-metrics/1
/// iou_thresh = 0.5
/// large_group_rule = at-least-five
/// config_hash = 3f2a9c0d1e4b5a67
/// scenes = 50
/// G1.ap = 0.9375
/// G1.ground_truth = 16
/// G1.detections = 18
/// G1.true_positives = 15
/// ...
/// mAP = 0.9012
/// ```
///
/// An undefined AP is written as `undefined`.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub iou_thresh: f64,
    pub large_group_rule: LargeGroupRule,
    pub scenes: usize,
    pub buckets: Vec<BucketStats>,
    pub map: Option<f64>,
    pub config_hash: String,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |x| x.to_string())
}

impl MetricsReport {
    pub fn bucket(&self, b: SizeBucket) -> &BucketStats {
        &self.buckets[b.index()]
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("# {REPORT_FORMAT}\n");
        let _ = writeln!(out, "iou_thresh = {}", self.iou_thresh);
        let _ = writeln!(out, "large_group_rule = {}", self.large_group_rule);
        let _ = writeln!(out, "config_hash = {}", self.config_hash);
        let _ = writeln!(out, "scenes = {}", self.scenes);
        for b in &self.buckets {
            let l = b.bucket.label();
            let _ = writeln!(out, "{l}.ap = {}", fmt_opt(b.ap));
            let _ = writeln!(out, "{l}.ground_truth = {}", b.ground_truth);
            let _ = writeln!(out, "{l}.detections = {}", b.detections);
            let _ = writeln!(out, "{l}.true_positives = {}", b.true_positives);
        }
        let _ = writeln!(out, "mAP = {}", fmt_opt(self.map));
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let bad = |line: usize, msg: String| Error::Parse {
            path: "<metrics>".into(),
            line,
            msg,
        };
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, l)) if l.trim() == format!("# {REPORT_FORMAT}") => {}
            _ => return Err(bad(1, format!("missing `# {REPORT_FORMAT}` tag"))),
        }
        let mut kv = BTreeMap::new();
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| bad(i + 1, format!("expected `key = value`, got `{line}`")))?;
            kv.insert(k.trim().to_string(), (i + 1, v.trim().to_string()));
        }
        let get = |k: &str| kv.get(k).ok_or_else(|| bad(0, format!("missing key `{k}`")));
        fn num<T: FromStr>(v: &(usize, String), bad: &dyn Fn(usize, String) -> Error) -> Result<T> {
            v.1.parse().map_err(|_| bad(v.0, format!("cannot parse `{}`", v.1)))
        }
        let opt = |v: &(usize, String)| -> Result<Option<f64>> {
            if v.1 == "undefined" {
                Ok(None)
            } else {
                num(v, &bad).map(Some)
            }
        };
        let buckets = SizeBucket::ALL
            .iter()
            .map(|&b| {
                let l = b.label();
                Ok(BucketStats {
                    bucket: b,
                    ap: opt(get(&format!("{l}.ap"))?)?,
                    ground_truth: num(get(&format!("{l}.ground_truth"))?, &bad)?,
                    detections: num(get(&format!("{l}.detections"))?, &bad)?,
                    true_positives: num(get(&format!("{l}.true_positives"))?, &bad)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            iou_thresh: num(get("iou_thresh")?, &bad)?,
            large_group_rule: get("large_group_rule")?.1.parse()?,
            scenes: num(get("scenes")?, &bad)?,
            buckets,
            map: opt(get("mAP")?)?,
            config_hash: get("config_hash")?.1.clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn partition(groups: &[&[TrackId]]) -> Partition {
        Partition::new(groups.iter().map(|g| g.to_vec()).collect()).unwrap()
    }

    #[test]
    fn confidence_examples() {
        let mut y = DMatrix::from_element(4, 4, 0.1);
        y[(0, 1)] = 0.9;
        y[(1, 0)] = 0.9;
        assert_eq!(group_confidence(&[0, 1], &y), 0.9);
        let mut y2 = DMatrix::from_element(3, 3, 0.0);
        y2[(0, 2)] = 0.2;
        y2[(2, 0)] = 0.2;
        assert!((group_confidence(&[0], &y2) - 0.8).abs() < 1e-15);
        y[(0, 2)] = 0.5;
        y[(2, 0)] = 0.5;
        y[(1, 2)] = 0.7;
        y[(2, 1)] = 0.7;
        // pairs (0,1), (0,2), (1,2)
        assert!((group_confidence(&[0, 1, 2], &y) - (0.9 + 0.5 + 0.7) / 3.0).abs() < 1e-15);
        assert_eq!(group_confidence(&[0], &DMatrix::from_element(1, 1, 1.0)), 1.0);
    }

    #[test]
    fn matching_examples() {
        let gt = partition(&[&[1, 2], &[3]]);
        let perfect = [ScoredGroup::new([1, 2], 0.9), ScoredGroup::new([3], 0.8)];
        for t in [0.1, 0.5, 1.0] {
            assert_eq!(match_groups(&perfect, &gt, t), vec![Some(0), Some(1)]);
        }
        let superset = [ScoredGroup::new([1, 2, 3], 0.9)];
        let gt2 = partition(&[&[1, 2], &[3, 4]]);
        assert_eq!(match_groups(&superset, &gt2, 0.5), vec![Some(0)]);
        assert_eq!(match_groups(&superset, &gt2, 1.0), vec![None]);

        let rivals = [ScoredGroup::new([1, 2], 0.4), ScoredGroup::new([1, 2], 0.7)];
        assert_eq!(match_groups(&rivals, &gt, 0.5), vec![None, Some(0)]);
    }

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision(&[(0.9, true), (0.8, true)], 2), Some(1.0));
        assert_eq!(average_precision(&[(0.9, false)], 2), Some(0.0));
        assert_eq!(average_precision(&[], 3), Some(0.0));
        assert_eq!(average_precision(&[(0.9, false)], 0), None);
        // ranks: TP (r .5, p 1), FP (r .5, p .5), TP (r 1, p 2/3)
        let ap = average_precision(&[(0.9, true), (0.8, false), (0.7, true)], 2).unwrap();
        assert!((ap - (0.5 * 1.0 + 0.5 * 2.0 / 3.0)).abs() < 1e-15);
    }

    #[test]
    fn map_examples() {
        assert_eq!(group_map(&[Some(1.0); 5]), Some(1.0));
        assert_eq!(group_map(&[None, Some(0.5), Some(1.0), None, None]), Some(0.75));
        assert_eq!(group_map(&[None; 5]), None);
    }

    #[test]
    fn bucket_rules() {
        assert_eq!(LargeGroupRule::AtLeastFive.bucket(5), Some(SizeBucket::G5Plus));
        assert_eq!(LargeGroupRule::MoreThanFive.bucket(5), None);
        assert_eq!(LargeGroupRule::MoreThanFive.bucket(6), Some(SizeBucket::G5Plus));
    }

    #[test]
    fn perfect_predictor_scores_one() {
        let mut ev = GroupEvaluator::new(EvalConfig::default());
        for gt in [partition(&[&[1], &[2, 3], &[4, 5, 6]]), partition(&[&[1, 2, 3, 4], &[5, 6, 7, 8, 9]])] {
            let pred: Vec<ScoredGroup> = gt.groups().iter().map(|g| ScoredGroup::new(g.clone(), 0.9)).collect();
            ev.add_scene(&pred, &gt);
        }
        let report = ev.finish();
        assert_eq!(report.map, Some(1.0));
        assert!(report.buckets.iter().all(|b| b.ap == Some(1.0)));
    }

    #[test]
    fn report_text_round_trip() {
        let mut ev = GroupEvaluator::new(EvalConfig::default());
        ev.add_scene(&[ScoredGroup::new([1, 2], 0.6), ScoredGroup::new([3], 0.3)], &partition(&[&[1, 2, 3]]));
        let mut report = ev.finish();
        report.config_hash = "abc123".into();
        let text = report.to_text();
        assert!(text.contains("G1.ap = undefined"));
        assert_eq!(MetricsReport::parse(&text).unwrap(), report);
    }
}
