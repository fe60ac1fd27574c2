//! Environment-affordance database: zones of similar frames, KNN retrieval
//! over zone descriptors and the noun/verb distributions derived from it.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::detection::{Detection, Validate};
use crate::error::{Result, StaError};

/// One clip of the database, with externally computed descriptors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipRecord {
    pub clip_id: String,
    pub video_id: String,
    pub frame: u64,
    pub visual: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<Vec<f64>>,
    #[serde(default)]
    pub nouns: BTreeSet<usize>,
    #[serde(default)]
    pub verbs: BTreeSet<usize>,
}

impl Validate for ClipRecord {
    fn validate(&self) -> std::result::Result<(), (&'static str, String)> {
        if self.visual.is_empty() {
            return Err(("visual", "descriptor is empty".into()));
        }
        if self.visual.iter().any(|v| !v.is_finite()) {
            return Err(("visual", "descriptor has non-finite entries".into()));
        }
        if let Some(t) = &self.text {
            if t.is_empty() || t.iter().any(|v| !v.is_finite()) {
                return Err(("text", "descriptor is empty or non-finite".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Zone {
    pub id: usize,
    pub video_id: String,
    pub members: Vec<String>,
    pub nouns: BTreeSet<usize>,
    pub verbs: BTreeSet<usize>,
    pub visual: Vec<f64>,
    pub text: Vec<f64>,
}

impl Zone {
    pub fn labels(&self, kind: LabelKind) -> &BTreeSet<usize> {
        match kind {
            LabelKind::Noun => &self.nouns,
            LabelKind::Verb => &self.verbs,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZoneParams {
    pub theta: f64,
    /// Number of most recent member frames a candidate is compared against.
    #[serde(rename = "M")]
    pub recent: usize,
}

impl Default for ZoneParams {
    fn default() -> Self {
        Self { theta: 0.5, recent: 5 }
    }
}

impl ZoneParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.theta) {
            return Err(StaError::invalid("theta", format!("must lie in [0, 1], got {}", self.theta)));
        }
        if self.recent == 0 {
            return Err(StaError::invalid("M", "must be at least 1"));
        }
        Ok(())
    }
}

/// Pairwise "same zone" score in `[0, 1]`.
pub trait FrameSimilarity {
    fn similarity(&self, a: &ClipRecord, b: &ClipRecord) -> f64;
}

impl<F: Fn(&ClipRecord, &ClipRecord) -> f64> FrameSimilarity for F {
    fn similarity(&self, a: &ClipRecord, b: &ClipRecord) -> f64 {
        self(a, b)
    }
}

/// Cosine of the visual descriptors, clamped below at 0.
#[derive(Debug, Clone, Copy, Default)]
pub struct VisualCosine;

impl FrameSimilarity for VisualCosine {
    fn similarity(&self, a: &ClipRecord, b: &ClipRecord) -> f64 {
        cosine(&a.visual, &b.visual).unwrap_or(0.0).clamp(0.0, 1.0)
    }
}

/// Explicit symmetric similarity table keyed by clip id; absent pairs score 0.
#[derive(Debug, Clone, Default)]
pub struct PairTable {
    pairs: HashMap<(String, String), f64>,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
pub struct PairRecord {
    pub a: String,
    pub b: String,
    pub similarity: f64,
}

impl PairTable {
    pub fn new(records: &[PairRecord]) -> Self {
        let pairs = records
            .iter()
            .map(|r| {
                let key = if r.a <= r.b { (r.a.clone(), r.b.clone()) } else { (r.b.clone(), r.a.clone()) };
                (key, r.similarity)
            })
            .collect();
        Self { pairs }
    }
}

impl FrameSimilarity for PairTable {
    fn similarity(&self, a: &ClipRecord, b: &ClipRecord) -> f64 {
        if a.clip_id == b.clip_id {
            return 1.0;
        }
        let (x, y) = if a.clip_id <= b.clip_id { (&a.clip_id, &b.clip_id) } else { (&b.clip_id, &a.clip_id) };
        self.pairs.get(&(x.clone(), y.clone())).copied().unwrap_or(0.0)
    }
}

fn check_lengths(clips: &[ClipRecord]) -> Result<()> {
    let Some(first) = clips.first() else { return Ok(()) };
    let dv = first.visual.len();
    let dt = clips.iter().find_map(|c| c.text.as_ref().map(Vec::len));
    for c in clips {
        if c.visual.len() != dv {
            return Err(StaError::LengthMismatch { what: "visual descriptor", expected: dv, actual: c.visual.len() });
        }
        if let (Some(t), Some(dt)) = (&c.text, dt) {
            if t.len() != dt {
                return Err(StaError::LengthMismatch { what: "text descriptor", expected: dt, actual: t.len() });
            }
        }
    }
    Ok(())
}

/// Sequential zone discovery. Clips are taken in input order; each joins the
/// zone of its video whose last `M` members have the highest mean similarity
/// to it, provided that mean reaches `theta`, and otherwise opens a new zone.
/// Ties go to the earliest zone. Zone ids are creation indices.
pub fn build_zones(clips: &[ClipRecord], sim: &impl FrameSimilarity, params: &ZoneParams) -> Result<Vec<Zone>> {
    params.validate()?;
    check_lengths(clips)?;
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut by_video: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, clip) in clips.iter().enumerate() {
        let candidates = by_video.entry(clip.video_id.as_str()).or_default();
        let mut best: Option<(usize, f64)> = None;
        for &z in candidates.iter() {
            let members = &groups[z];
            let recent = &members[members.len().saturating_sub(params.recent)..];
            let mut total = 0.0;
            for &m in recent {
                let s = sim.similarity(clip, &clips[m]);
                if !(0.0..=1.0).contains(&s) {
                    return Err(StaError::InvalidValue(format!(
                        "similarity between `{}` and `{}` is {s}, outside [0, 1]",
                        clip.clip_id, clips[m].clip_id
                    )));
                }
                total += s;
            }
            let mean = total / recent.len() as f64;
            if best.is_none_or(|(_, b)| mean > b) {
                best = Some((z, mean));
            }
        }
        match best {
            Some((z, mean)) if mean >= params.theta => groups[z].push(i),
            _ => {
                candidates.push(groups.len());
                groups.push(vec![i]);
            }
        }
    }
    groups
        .iter()
        .enumerate()
        .map(|(id, members)| {
            let recs: Vec<&ClipRecord> = members.iter().map(|&m| &clips[m]).collect();
            let (visual, text) = zone_descriptors(&recs)?;
            Ok(Zone {
                id,
                video_id: recs[0].video_id.clone(),
                members: recs.iter().map(|c| c.clip_id.clone()).collect(),
                nouns: recs.iter().flat_map(|c| c.nouns.iter().copied()).collect(),
                verbs: recs.iter().flat_map(|c| c.verbs.iter().copied()).collect(),
                visual,
                text,
            })
        })
        .collect()
}

/// Arithmetic means of member visual and text descriptors.
pub fn zone_descriptors(members: &[&ClipRecord]) -> Result<(Vec<f64>, Vec<f64>)> {
    let first = members.first().ok_or_else(|| StaError::invalid("members", "zone has no members"))?;
    let n = members.len() as f64;
    let mut visual = vec![0.0; first.visual.len()];
    let mut text: Option<Vec<f64>> = None;
    for m in members {
        if m.visual.len() != visual.len() {
            return Err(StaError::LengthMismatch {
                what: "visual descriptor",
                expected: visual.len(),
                actual: m.visual.len(),
            });
        }
        for (acc, v) in visual.iter_mut().zip(&m.visual) {
            *acc += v;
        }
        let t =
            m.text.as_ref().ok_or_else(|| StaError::Missing(format!("text descriptor for clip `{}`", m.clip_id)))?;
        let acc = text.get_or_insert_with(|| vec![0.0; t.len()]);
        if acc.len() != t.len() {
            return Err(StaError::LengthMismatch { what: "text descriptor", expected: acc.len(), actual: t.len() });
        }
        for (a, v) in acc.iter_mut().zip(t) {
            *a += v;
        }
    }
    let mean = |v: Vec<f64>| v.into_iter().map(|x| x / n).collect::<Vec<_>>();
    Ok((mean(visual), mean(text.unwrap_or_default())))
}

/// Cosine similarity; 0 when either vector has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(StaError::LengthMismatch { what: "cosine operands", expected: a.len(), actual: b.len() });
    }
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    Visual,
    Text,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KnnEntry {
    pub zone: usize,
    pub similarity: f64,
    pub channel: Channel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnnResult {
    pub k: usize,
    pub entries: Vec<KnnEntry>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    #[default]
    Weighted,
    Unweighted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelKind {
    Noun,
    Verb,
}

/// Query-time settings. The default is the operating point K = 4 with
/// similarity weighting and raw cosines.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffordanceConfig {
    pub k: usize,
    pub weighting: Weighting,
    /// Map each cosine to `(1 + cos) / 2` before use.
    pub rescale: bool,
}

impl Default for AffordanceConfig {
    fn default() -> Self {
        Self { k: 4, weighting: Weighting::Weighted, rescale: false }
    }
}

/// Top-`k` zones by visual-visual cosine followed by top-`k` by visual-text
/// cosine. Ties keep zone order.
pub fn knn_query(query: &[f64], zones: &[Zone], k: usize, rescale: bool) -> Result<KnnResult> {
    if k == 0 {
        return Err(StaError::invalid("k", "must be at least 1"));
    }
    if zones.is_empty() {
        return Err(StaError::invalid("zones", "database is empty"));
    }
    if k > zones.len() {
        return Err(StaError::invalid("k", format!("{k} exceeds the number of zones ({})", zones.len())));
    }
    let mut entries = Vec::with_capacity(2 * k);
    for channel in [Channel::Visual, Channel::Text] {
        let mut scored = zones
            .iter()
            .map(|z| {
                let target = match channel {
                    Channel::Visual => &z.visual,
                    Channel::Text => &z.text,
                };
                let c = cosine(query, target)?;
                Ok((z.id, if rescale { 0.5 * (1.0 + c) } else { c }))
            })
            .collect::<Result<Vec<_>>>()?;
        scored.sort_by(|a, b| b.1.total_cmp(&a.1));
        entries.extend(scored.into_iter().take(k).map(|(zone, similarity)| KnnEntry { zone, similarity, channel }));
    }
    Ok(KnnResult { k, entries })
}

/// Probability vector over a label vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "DistributionRepr")]
pub struct CategoricalDistribution {
    probs: Vec<f64>,
}

#[derive(Deserialize)]
struct DistributionRepr {
    probs: Vec<f64>,
}

impl TryFrom<DistributionRepr> for CategoricalDistribution {
    type Error = StaError;

    fn try_from(r: DistributionRepr) -> Result<Self> {
        Self::new(r.probs)
    }
}

pub const DISTRIBUTION_TOLERANCE: f64 = 1e-9;

impl CategoricalDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(StaError::invalid("probs", "vocabulary is empty"));
        }
        if let Some(i) = probs.iter().position(|p| !p.is_finite() || *p < 0.0) {
            return Err(StaError::InvalidValue(format!("probability {i} is {}", probs[i])));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > DISTRIBUTION_TOLERANCE {
            return Err(StaError::InvalidValue(format!("probabilities sum to {sum}, not 1")));
        }
        Ok(Self { probs })
    }

    /// Normalizes non-negative weights.
    pub fn from_weights(weights: Vec<f64>) -> Result<Self> {
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(StaError::InvalidValue("weights must be finite and non-negative".into()));
        }
        let sum: f64 = weights.iter().sum();
        if sum == 0.0 {
            return Err(StaError::DisjointSupport);
        }
        Self::new(weights.into_iter().map(|w| w / sum).collect())
    }

    pub fn uniform(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(StaError::invalid("vocabulary", "is empty"));
        }
        Ok(Self { probs: vec![1.0 / n as f64; n] })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Index of the largest probability; the lowest index wins ties.
    pub fn argmax(&self) -> usize {
        argmax(&self.probs)
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, p) in v.iter().enumerate() {
        if *p > v[best] {
            best = i;
        }
    }
    best
}

/// `p(ℓ) ∝ exp(Σ S_i · [ℓ ∈ labels(Z_i)])` over the retrieved zones.
pub fn affordance_distribution(
    knn: &KnnResult,
    zones: &[Zone],
    vocab_size: usize,
    kind: LabelKind,
    weighting: Weighting,
) -> Result<CategoricalDistribution> {
    if vocab_size == 0 {
        return Err(StaError::invalid("vocabulary", "is empty"));
    }
    let by_id: HashMap<usize, &Zone> = zones.iter().map(|z| (z.id, z)).collect();
    let mut exponent = vec![0.0; vocab_size];
    for e in &knn.entries {
        let zone = by_id.get(&e.zone).ok_or_else(|| StaError::Missing(format!("zone {}", e.zone)))?;
        let s = match weighting {
            Weighting::Weighted => e.similarity,
            Weighting::Unweighted => 1.0,
        };
        for &label in zone.labels(kind) {
            let slot = exponent.get_mut(label).ok_or_else(|| {
                StaError::InvalidValue(format!("label {label} outside vocabulary of size {vocab_size}"))
            })?;
            *slot += s;
        }
    }
    let max = exponent.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    CategoricalDistribution::from_weights(exponent.iter().map(|x| (x - max).exp()).collect())
}

/// Product of the two distributions, renormalized.
pub fn fuse_distributions(
    affordance: &CategoricalDistribution,
    sta: &CategoricalDistribution,
) -> Result<CategoricalDistribution> {
    if affordance.len() != sta.len() {
        return Err(StaError::LengthMismatch {
            what: "fused distributions",
            expected: affordance.len(),
            actual: sta.len(),
        });
    }
    CategoricalDistribution::from_weights(affordance.probs.iter().zip(&sta.probs).map(|(a, b)| a * b).collect())
}

/// Fuses every detection's class probabilities with the affordance priors
/// and re-derives its noun and verb labels. Scores are left alone.
pub fn apply_affordance_to_detections(
    dets: &[Detection],
    nouns: &CategoricalDistribution,
    verbs: &CategoricalDistribution,
) -> Result<Vec<Detection>> {
    dets.iter()
        .map(|d| {
            let fuse = |probs: &Option<Vec<f64>>, prior: &CategoricalDistribution, what: &str| {
                let p = probs
                    .as_ref()
                    .ok_or_else(|| StaError::Missing(format!("{what} probabilities for detection `{}`", d.uid)))?;
                fuse_distributions(prior, &CategoricalDistribution::from_weights(p.clone())?)
            };
            let n = fuse(&d.noun_probs, nouns, "noun")?;
            let v = fuse(&d.verb_probs, verbs, "verb")?;
            Ok(Detection {
                noun: n.argmax(),
                verb: v.argmax(),
                noun_probs: Some(n.probs),
                verb_probs: Some(v.probs),
                ..d.clone()
            })
        })
        .collect()
}

/// Serialized database document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffordanceDb {
    pub zones: Vec<Zone>,
    pub noun_vocab: Vec<String>,
    pub verb_vocab: Vec<String>,
    pub params: ZoneParams,
}

impl AffordanceDb {
    /// Builds zones and fills in vocabularies. Missing vocabularies become
    /// the decimal label ids up to the largest id seen.
    pub fn build(
        clips: &[ClipRecord],
        sim: &impl FrameSimilarity,
        params: ZoneParams,
        noun_vocab: Option<Vec<String>>,
        verb_vocab: Option<Vec<String>>,
    ) -> Result<Self> {
        let zones = build_zones(clips, sim, &params)?;
        let ids = |f: fn(&ClipRecord) -> &BTreeSet<usize>| -> Vec<String> {
            let n = clips.iter().filter_map(|c| f(c).last().copied()).max().map_or(0, |m| m + 1);
            (0..n).map(|i| i.to_string()).collect()
        };
        let db = Self {
            noun_vocab: noun_vocab.unwrap_or_else(|| ids(|c| &c.nouns)),
            verb_vocab: verb_vocab.unwrap_or_else(|| ids(|c| &c.verbs)),
            zones,
            params,
        };
        db.validate()?;
        Ok(db)
    }

    pub fn vocab_size(&self, kind: LabelKind) -> usize {
        match kind {
            LabelKind::Noun => self.noun_vocab.len(),
            LabelKind::Verb => self.verb_vocab.len(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        for z in &self.zones {
            if z.members.is_empty() {
                return Err(StaError::InvalidValue(format!("zone {} has no members", z.id)));
            }
            for kind in [LabelKind::Noun, LabelKind::Verb] {
                if let Some(&l) = z.labels(kind).last() {
                    if l >= self.vocab_size(kind) {
                        return Err(StaError::InvalidValue(format!(
                            "zone {} uses label {l} outside the {kind:?} vocabulary",
                            z.id
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// KNN retrieval followed by the noun and verb distributions.
    pub fn query(&self, query: &[f64], config: &AffordanceConfig) -> Result<AffordanceQuery> {
        let knn = knn_query(query, &self.zones, config.k, config.rescale)?;
        let dist = |kind| affordance_distribution(&knn, &self.zones, self.vocab_size(kind), kind, config.weighting);
        Ok(AffordanceQuery { nouns: dist(LabelKind::Noun)?, verbs: dist(LabelKind::Verb)?, knn })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffordanceQuery {
    pub knn: KnnResult,
    pub nouns: CategoricalDistribution,
    pub verbs: CategoricalDistribution,
}
