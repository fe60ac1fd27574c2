//! Top-k mean average precision for short-term anticipation: Noun, Noun+Verb,
//! Noun+TTC and All.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::detection::{BBox, Detection, GroundTruth};
use crate::error::{Result, StaError};

/// Intersection over union; 0 when either box has zero area.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if a.area() <= 0.0 || b.area() <= 0.0 || union <= 0.0 {
        return 0.0;
    }
    inter / union
}

/// Ground truth grouped by image. Images may have no annotations.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GroundTruthSet {
    images: BTreeMap<String, Vec<GroundTruth>>,
}

impl GroundTruthSet {
    pub fn from_records(records: Vec<GroundTruth>) -> Self {
        let mut set = Self::default();
        for r in records {
            set.push(r);
        }
        set
    }

    pub fn push(&mut self, gt: GroundTruth) {
        self.images.entry(gt.uid.clone()).or_default().push(gt);
    }

    pub fn add_image(&mut self, uid: &str) {
        self.images.entry(uid.to_string()).or_default();
    }

    pub fn image_count(&self) -> usize {
        self.images.len()
    }

    /// Number of annotations.
    pub fn len(&self) -> usize {
        self.images.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains_image(&self, uid: &str) -> bool {
        self.images.contains_key(uid)
    }

    pub fn image(&self, uid: &str) -> &[GroundTruth] {
        self.images.get(uid).map_or(&[], Vec::as_slice)
    }

    pub fn images(&self) -> impl Iterator<Item = (&str, &[GroundTruth])> {
        self.images.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub iou_threshold: f64,
    /// Allowed `|ttc_pred − ttc_gt|` in seconds.
    pub ttc_tolerance: f64,
    /// Detections kept per image, highest scores first.
    pub top_k: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { iou_threshold: 0.5, ttc_tolerance: 0.25, top_k: 5 }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.iou_threshold > 0.0 && self.iou_threshold < 1.0) {
            return Err(StaError::invalid("iou", format!("must lie in (0, 1), got {}", self.iou_threshold)));
        }
        if !(self.ttc_tolerance > 0.0) || !self.ttc_tolerance.is_finite() {
            return Err(StaError::invalid("ttc-tol", format!("must be > 0, got {}", self.ttc_tolerance)));
        }
        if self.top_k == 0 {
            return Err(StaError::invalid("topk", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Noun,
    NounVerb,
    NounTtc,
    All,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::Noun, Metric::NounVerb, Metric::NounTtc, Metric::All];

    pub fn label(self) -> &'static str {
        match self {
            Metric::Noun => "N",
            Metric::NounVerb => "N+V",
            Metric::NounTtc => "N+δ",
            Metric::All => "All",
        }
    }
}

/// One value per metric.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricValues {
    pub noun: f64,
    pub noun_verb: f64,
    pub noun_ttc: f64,
    pub all: f64,
}

impl MetricValues {
    pub fn get(&self, m: Metric) -> f64 {
        match m {
            Metric::Noun => self.noun,
            Metric::NounVerb => self.noun_verb,
            Metric::NounTtc => self.noun_ttc,
            Metric::All => self.all,
        }
    }

    fn set(&mut self, m: Metric, v: f64) {
        match m {
            Metric::Noun => self.noun = v,
            Metric::NounVerb => self.noun_verb = v,
            Metric::NounTtc => self.noun_ttc = v,
            Metric::All => self.all = v,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub noun: usize,
    pub ground_truth: usize,
    pub predictions: usize,
    pub ap: MetricValues,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct EvalCounts {
    pub images: usize,
    pub ground_truth: usize,
    pub predictions: usize,
    pub predictions_kept: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config: EvalConfig,
    pub map: MetricValues,
    pub per_class: Vec<ClassAp>,
    pub counts: EvalCounts,
}

/// Area under the precision-recall curve with precision made monotone from
/// the right. `tp` is in rank order.
pub fn average_precision(tp: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut precision = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (i, &t) in tp.iter().enumerate() {
        hits += usize::from(t);
        precision.push(hits as f64 / (i + 1) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    // each true positive raises recall by exactly 1/n_gt
    let total: f64 = precision.iter().zip(tp).filter(|(_, t)| **t).map(|(p, _)| p).sum();
    total / n_gt as f64
}

/// Indices of the detections kept after the per-image top-k filter, in
/// input order. Score ties keep input order.
fn top_k_per_image(dets: &[Detection], k: usize) -> Vec<usize> {
    let mut by_image: HashMap<&str, Vec<usize>> = HashMap::new();
    for (i, d) in dets.iter().enumerate() {
        by_image.entry(d.uid.as_str()).or_default().push(i);
    }
    let mut kept: Vec<usize> = by_image
        .into_values()
        .flat_map(|mut idx| {
            idx.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
            idx.truncate(k);
            idx
        })
        .collect();
    kept.sort_unstable();
    kept
}

/// Scores detections against ground truth under all four metrics.
///
/// Each image keeps its `top_k` highest-scored detections. Within each noun
/// class, kept detections are visited in descending score order and matched
/// to the unmatched same-image, same-noun annotation of highest IoU, provided
/// it reaches the threshold. A match is a true positive for N; for the other
/// metrics the matched annotation must also agree on verb and/or
/// time-to-contact. Matching once and grading the match keeps the metrics
/// nested: All ≤ N+V ≤ N and All ≤ N+δ ≤ N.
pub fn evaluate(dets: &[Detection], gts: &GroundTruthSet, config: &EvalConfig) -> Result<EvalReport> {
    config.validate()?;
    if gts.is_empty() {
        return Err(StaError::EmptyGroundTruth);
    }
    if let Some(d) = dets.iter().find(|d| !gts.contains_image(&d.uid)) {
        return Err(StaError::InvalidValue(format!(
            "detection for `{}` refers to an image absent from the ground truth",
            d.uid
        )));
    }
    let kept = top_k_per_image(dets, config.top_k);

    let mut classes: BTreeMap<usize, (Vec<usize>, usize)> = BTreeMap::new();
    for (_, image) in gts.images() {
        for g in image {
            classes.entry(g.noun).or_default().1 += 1;
        }
    }
    for &i in &kept {
        if let Some(c) = classes.get_mut(&dets[i].noun) {
            c.0.push(i);
        }
    }

    let mut used: HashMap<(&str, usize), bool> = HashMap::new();
    let mut per_class = Vec::with_capacity(classes.len());
    for (&noun, (members, n_gt)) in classes.iter_mut() {
        members.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
        let mut hits: [Vec<bool>; 4] = Default::default();
        for &i in members.iter() {
            let d = &dets[i];
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in gts.image(&d.uid).iter().enumerate() {
                if g.noun != noun || used.get(&(d.uid.as_str(), j)).copied().unwrap_or(false) {
                    continue;
                }
                let o = iou(&d.bbox, &g.bbox);
                if o >= config.iou_threshold && best.is_none_or(|(_, b)| o > b) {
                    best = Some((j, o));
                }
            }
            let grade = match best {
                Some((j, _)) => {
                    used.insert((d.uid.as_str(), j), true);
                    let g = &gts.image(&d.uid)[j];
                    let verb = d.verb == g.verb;
                    let ttc = (d.ttc - g.ttc).abs() <= config.ttc_tolerance;
                    [true, verb, ttc, verb && ttc]
                }
                None => [false; 4],
            };
            for (h, g) in hits.iter_mut().zip(grade) {
                h.push(g);
            }
        }
        let mut ap = MetricValues::default();
        for (m, h) in Metric::ALL.iter().zip(&hits) {
            ap.set(*m, average_precision(h, *n_gt));
        }
        per_class.push(ClassAp { noun, ground_truth: *n_gt, predictions: members.len(), ap });
    }

    let mut map = MetricValues::default();
    for m in Metric::ALL {
        let total: f64 = per_class.iter().map(|c| c.ap.get(m)).sum();
        map.set(m, total / per_class.len() as f64);
    }
    Ok(EvalReport {
        config: *config,
        map,
        per_class,
        counts: EvalCounts {
            images: gts.image_count(),
            ground_truth: gts.len(),
            predictions: dets.len(),
            predictions_kept: kept.len(),
        },
    })
}

/// `100 · (x − y) / y`; `None` when `y` is 0.
pub fn relative_gain(x: f64, y: f64) -> Option<f64> {
    (y != 0.0).then(|| 100.0 * (x - y) / y)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricDiff {
    pub metric: Metric,
    pub x: f64,
    pub y: f64,
    pub delta: f64,
    /// Percent; absent when the baseline is 0.
    pub relative_gain: Option<f64>,
}

/// Per-metric deltas of `x` against baseline `y`.
pub fn diff_reports(x: &EvalReport, y: &EvalReport) -> Result<Vec<MetricDiff>> {
    if x.config != y.config {
        return Err(StaError::InvalidValue("reports were computed with different settings".into()));
    }
    Ok(diff_values(&x.map, &y.map))
}

pub fn diff_values(x: &MetricValues, y: &MetricValues) -> Vec<MetricDiff> {
    Metric::ALL
        .iter()
        .map(|&m| {
            let (a, b) = (x.get(m), y.get(m));
            MetricDiff { metric: m, x: a, y: b, delta: a - b, relative_gain: relative_gain(a, b) }
        })
        .collect()
}
