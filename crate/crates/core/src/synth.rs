//! Seeded synthetic scenario exercising the whole pipeline: clips and zones,
//! frames with ground truth, noisy detections, query descriptors and coarse
//! hotspot maps.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::affordance::{
    apply_affordance_to_detections, AffordanceConfig, AffordanceDb, ClipRecord, VisualCosine, ZoneParams,
};
use crate::detection::{BBox, Detection, GroundTruth};
use crate::error::{Result, StaError};
use crate::eval::{diff_values, evaluate, EvalConfig, EvalReport, GroundTruthSet, MetricDiff};
use crate::hotspot::{index_maps, reweight, synth_gaussian_map, HotspotMap, ReweightOptions};

pub const NOUNS: usize = 6;
pub const VERBS: usize = 4;
const DIM: usize = 8;
const FRAME: (usize, usize) = (48, 64);
const MAP: (usize, usize) = (12, 16);

/// Activity prototype: a descriptor direction with the labels seen near it.
#[derive(Debug, Clone)]
struct Activity {
    visual: Vec<f64>,
    nouns: Vec<usize>,
    verbs: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Scenario {
    pub clips: Vec<ClipRecord>,
    pub ground_truth: Vec<GroundTruth>,
    pub detections: Vec<Detection>,
    /// Visual query descriptor per frame uid.
    pub queries: Vec<(String, Vec<f64>)>,
    pub maps: Vec<HotspotMap>,
}

fn jitter(rng: &mut ChaCha8Rng, v: &[f64], amount: f64) -> Vec<f64> {
    v.iter().map(|x| x + rng.gen_range(-amount..amount)).collect()
}

fn noisy_probs(rng: &mut ChaCha8Rng, n: usize, favored: usize, strength: f64) -> Vec<f64> {
    let mut w: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
    w[favored] += strength;
    let s: f64 = w.iter().sum();
    w.iter().map(|x| x / s).collect()
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

pub fn generate(seed: u64) -> Result<Scenario> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut nouns: Vec<usize> = (0..NOUNS).collect();
    let activities: Vec<Activity> = (0..3)
        .map(|a| {
            nouns.shuffle(&mut rng);
            Activity {
                visual: (0..DIM).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                nouns: nouns[..2].to_vec(),
                verbs: vec![a % VERBS, (a + 1) % VERBS],
            }
        })
        .collect();

    let mut clips = Vec::new();
    for video in 0..3 {
        for frame in 0..6u64 {
            let act = &activities[(video + frame as usize / 3) % activities.len()];
            let visual = jitter(&mut rng, &act.visual, 0.2);
            let text = jitter(&mut rng, &act.visual, 0.3);
            clips.push(ClipRecord {
                clip_id: format!("v{video}_c{frame}"),
                video_id: format!("v{video}"),
                frame: frame * 16,
                visual,
                text: Some(text),
                nouns: act.nouns.iter().copied().collect(),
                verbs: act.verbs.iter().copied().collect(),
            });
        }
    }

    let (fh, fw) = (FRAME.0 as f64, FRAME.1 as f64);
    let mut ground_truth = Vec::new();
    let mut detections = Vec::new();
    let mut queries = Vec::new();
    let mut maps = Vec::new();
    for image in 0..10 {
        let uid = format!("demo_{image:03}");
        let act = &activities[rng.gen_range(0..activities.len())];
        queries.push((uid.clone(), jitter(&mut rng, &act.visual, 0.2)));
        let mut centers = Vec::new();
        for obj in 0..2 {
            let w = rng.gen_range(8.0..16.0);
            let h = rng.gen_range(8.0..16.0);
            let x1 = rng.gen_range(0.0..fw - w);
            let y1 = rng.gen_range(0.0..fh - h);
            let bbox = BBox::new(x1, y1, x1 + w, y1 + h)?;
            let noun = act.nouns[obj];
            let verb = act.verbs[rng.gen_range(0..act.verbs.len())];
            let ttc = rng.gen_range(0.2..2.0);
            ground_truth.push(GroundTruth { uid: uid.clone(), bbox, noun, verb, ttc });
            let (cx, cy) = bbox.center();
            centers.push((cx * MAP.1 as f64 / fw, cy * MAP.0 as f64 / fh, 1.5));

            let dx = rng.gen_range(-0.15..0.15) * w;
            let dy = rng.gen_range(-0.15..0.15) * h;
            // a third of the detections lean toward a label absent from the scene
            let confuser = rng.gen_bool(1.0 / 3.0);
            let noun_target = if confuser { (noun + 1 + rng.gen_range(0..NOUNS - 1)) % NOUNS } else { noun };
            let strength = rng.gen_range(0.3..1.5);
            let mut noun_probs = noisy_probs(&mut rng, NOUNS, noun_target, strength);
            if confuser {
                noun_probs[noun] += 0.15;
                let s: f64 = noun_probs.iter().sum();
                noun_probs.iter_mut().for_each(|p| *p /= s);
            }
            let strength = rng.gen_range(0.2..1.2);
            let verb_probs = noisy_probs(&mut rng, VERBS, verb, strength);
            detections.push(Detection {
                uid: uid.clone(),
                bbox: BBox::new(x1 + dx, y1 + dy, x1 + dx + w, y1 + dy + h)?,
                noun: argmax(&noun_probs),
                verb: argmax(&verb_probs),
                ttc: (ttc + rng.gen_range(-0.4..0.4)).max(0.05),
                score: rng.gen_range(0.3..1.0),
                noun_probs: Some(noun_probs),
                verb_probs: Some(verb_probs),
            });
        }
        for _ in 0..3 {
            let w = rng.gen_range(6.0..14.0);
            let h = rng.gen_range(6.0..14.0);
            let x1 = rng.gen_range(0.0..fw - w);
            let y1 = rng.gen_range(0.0..fh - h);
            let (n, v) = (rng.gen_range(0..NOUNS), rng.gen_range(0..VERBS));
            let noun_probs = noisy_probs(&mut rng, NOUNS, n, 0.5);
            let verb_probs = noisy_probs(&mut rng, VERBS, v, 0.5);
            detections.push(Detection {
                uid: uid.clone(),
                bbox: BBox::new(x1, y1, x1 + w, y1 + h)?,
                noun: argmax(&noun_probs),
                verb: argmax(&verb_probs),
                ttc: rng.gen_range(0.2..2.0),
                score: rng.gen_range(0.3..1.0),
                noun_probs: Some(noun_probs),
                verb_probs: Some(verb_probs),
            });
        }
        maps.push(synth_gaussian_map(uid, MAP.0, MAP.1, &centers)?);
    }
    Ok(Scenario { clips, ground_truth, detections, queries, maps })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Composition {
    /// Class-probability fusion, then hotspot re-weighting.
    #[default]
    FuseFirst,
    HotspotFirst,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DemoOutcome {
    pub seed: u64,
    pub baseline: EvalReport,
    pub report: EvalReport,
    pub gains: Vec<MetricDiff>,
}

/// Runs affordance fusion and hotspot re-weighting on a scenario and scores
/// the result against the unrefined detections.
pub fn run_pipeline(
    scenario: &Scenario,
    db: &AffordanceDb,
    afford: &AffordanceConfig,
    eval: &EvalConfig,
    order: Composition,
) -> Result<(Vec<Detection>, EvalReport, EvalReport)> {
    let gts = GroundTruthSet::from_records(scenario.ground_truth.clone());
    let baseline = evaluate(&scenario.detections, &gts, eval)?;
    let maps = index_maps(scenario.maps.clone())?;
    let opts = ReweightOptions { frame_size: Some(FRAME), ..Default::default() };
    let mut priors = HashMap::new();
    for (uid, q) in &scenario.queries {
        priors.insert(uid.as_str(), db.query(q, afford)?);
    }
    let fuse = |dets: &[Detection]| -> Result<Vec<Detection>> {
        dets.iter()
            .map(|d| {
                let p = priors
                    .get(d.uid.as_str())
                    .ok_or_else(|| StaError::Missing(format!("query descriptor for `{}`", d.uid)))?;
                Ok(apply_affordance_to_detections(std::slice::from_ref(d), &p.nouns, &p.verbs)?.remove(0))
            })
            .collect()
    };
    let refined = match order {
        Composition::FuseFirst => reweight(&fuse(&scenario.detections)?, &maps, &opts)?,
        Composition::HotspotFirst => fuse(&reweight(&scenario.detections, &maps, &opts)?)?,
    };
    let report = evaluate(&refined, &gts, eval)?;
    Ok((refined, baseline, report))
}

pub fn build_db(scenario: &Scenario, params: ZoneParams) -> Result<AffordanceDb> {
    AffordanceDb::build(
        &scenario.clips,
        &VisualCosine,
        params,
        Some((0..NOUNS).map(|i| format!("noun{i}")).collect()),
        Some((0..VERBS).map(|i| format!("verb{i}")).collect()),
    )
}

pub fn demo(
    seed: u64,
    zones: ZoneParams,
    afford: &AffordanceConfig,
    eval: &EvalConfig,
    order: Composition,
) -> Result<DemoOutcome> {
    let scenario = generate(seed)?;
    let db = build_db(&scenario, zones)?;
    let (_, baseline, report) = run_pipeline(&scenario, &db, afford, eval, order)?;
    Ok(DemoOutcome { seed, gains: diff_values(&report.map, &baseline.map), baseline, report })
}
