use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use log::info;
use sta_core::affordance::{
    apply_affordance_to_detections, fuse_distributions, AffordanceDb, AffordanceQuery, CategoricalDistribution,
    ClipRecord, PairRecord, PairTable, VisualCosine,
};
use sta_core::attention::{grad_check, random_case, GradCheckDims, OpId, Tensors};
use sta_core::curation::{curate, ActionSegment, BoxAnnotation};
use sta_core::detection::Detection;
use sta_core::eval::{diff_reports, evaluate, EvalReport};
use sta_core::hotspot::{index_maps, reweight, HotspotMap, ReweightOptions, Sampling};
use sta_core::synth::{self, Composition};
use sta_core::{io, StaError};

use crate::args::*;
use crate::config::RunConfig;

pub fn run(cli: Cli) -> Result<()> {
    let cfg = RunConfig::load(cli.config.as_deref())?;
    let jobs = cfg.jobs(cli.jobs)?;
    rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global().context("configuring the worker pool")?;
    match cli.command {
        Command::Zones(ZonesCmd::Build(a)) => zones_build(&cfg, a),
        Command::Afford(AffordCmd::Query(a)) => afford_query(&cfg, a),
        Command::Afford(AffordCmd::Fuse(a)) => afford_fuse(a),
        Command::Afford(AffordCmd::Apply(a)) => afford_apply(a),
        Command::Hotspot(HotspotCmd::Reweight(a)) => hotspot_reweight(&cfg, a),
        Command::Eval(EvalCmd::Sta(a)) => eval_sta(&cfg, a),
        Command::Eval(EvalCmd::Diff(a)) => eval_diff(a),
        Command::Curate(CurateCmd::Ek(a)) => curate_ek(&cfg, a),
        Command::Attn(AttnCmd::CheckGrad(a)) => check_grad(&cfg, a),
        Command::Demo(DemoCmd::Synth(a)) => demo_synth(&cfg, a),
    }
}

/// Writes `text` to `path`, or to stdout when no path is given.
fn emit(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{text}"),
    }
    Ok(())
}

fn zones_build(cfg: &RunConfig, a: ZonesBuild) -> Result<()> {
    let params = cfg.zones(a.theta, a.m)?;
    let clips: Vec<ClipRecord> = io::read_jsonl_validated(&a.clips)?;
    let nouns: Option<Vec<String>> = a.noun_vocab.as_deref().map(io::read_json).transpose()?;
    let verbs: Option<Vec<String>> = a.verb_vocab.as_deref().map(io::read_json).transpose()?;
    let db = match &a.pairs {
        Some(p) => {
            let pairs: Vec<PairRecord> = io::read_jsonl(p)?;
            AffordanceDb::build(&clips, &PairTable::new(&pairs), params, nouns, verbs)?
        }
        None => AffordanceDb::build(&clips, &VisualCosine, params, nouns, verbs)?,
    };
    info!("{} clips grouped into {} zones", clips.len(), db.zones.len());
    io::write_json(&a.out, &db)?;
    Ok(())
}

fn afford_query(cfg: &RunConfig, a: AffordQuery) -> Result<()> {
    let config = cfg.affordance(a.k, a.weighted, a.rescale)?;
    let db: AffordanceDb = io::read_json(&a.zones)?;
    db.validate()?;
    let desc: Vec<f64> = io::read_json(&a.desc)?;
    let q = db.query(&desc, &config)?;
    emit(a.out.as_deref(), &io::to_json_string(&q)?)
}

fn afford_fuse(a: AffordFuse) -> Result<()> {
    let aff: CategoricalDistribution = io::read_json(&a.aff)?;
    let sta: CategoricalDistribution = io::read_json(&a.sta)?;
    emit(a.out.as_deref(), &io::to_json_string(&fuse_distributions(&aff, &sta)?)?)
}

fn afford_apply(a: AffordApply) -> Result<()> {
    let q: AffordanceQuery = io::read_json(&a.aff)?;
    let dets: Vec<Detection> = io::read_jsonl_validated(&a.dets)?;
    io::write_jsonl(&a.out, &apply_affordance_to_detections(&dets, &q.nouns, &q.verbs)?)?;
    Ok(())
}

fn parse_frame_size(s: &str) -> Result<(usize, usize), StaError> {
    let bad = || StaError::InvalidParameter { name: "frame-size", reason: format!("expected HEIGHTxWIDTH, got `{s}`") };
    let (h, w) = s.split_once('x').ok_or_else(bad)?;
    let (h, w) = (h.trim().parse().map_err(|_| bad())?, w.trim().parse().map_err(|_| bad())?);
    if h == 0 || w == 0 {
        return Err(bad());
    }
    Ok((h, w))
}

fn hotspot_reweight(cfg: &RunConfig, a: HotspotReweight) -> Result<()> {
    let sampling = match a.sampling {
        Some(SamplingArg::Nearest) => Sampling::Nearest,
        Some(SamplingArg::Bilinear) => Sampling::Bilinear,
        None => cfg.sampling.unwrap_or_default(),
    };
    let opts = ReweightOptions { sampling, frame_size: a.frame_size.as_deref().map(parse_frame_size).transpose()? };
    let dets: Vec<Detection> = io::read_jsonl_validated(&a.dets)?;
    let maps: Vec<HotspotMap> = io::read_jsonl(&a.maps)?;
    io::write_jsonl(&a.out, &reweight(&dets, &index_maps(maps)?, &opts)?)?;
    Ok(())
}

fn eval_sta(cfg: &RunConfig, a: EvalSta) -> Result<()> {
    let config = cfg.eval(a.iou, a.ttc_tol, a.topk)?;
    let dets: Vec<Detection> = io::read_jsonl_validated(&a.dets)?;
    let gts = io::read_ground_truth(&a.gt)?;
    let report = evaluate(&dets, &gts, &config)?;
    let text = io::to_json_string(&report)?;
    if let Some(p) = &a.report {
        emit(Some(p), &text)?;
    }
    emit(None, &text)
}

fn eval_diff(a: EvalDiff) -> Result<()> {
    let x: EvalReport = io::read_json(&a.x)?;
    let y: EvalReport = io::read_json(&a.y)?;
    emit(None, &io::to_json_string(&diff_reports(&x, &y)?)?)
}

fn curate_ek(cfg: &RunConfig, a: CurateEk) -> Result<()> {
    let params = cfg.curation(a.fps, a.gap, a.split)?;
    let boxes: Vec<BoxAnnotation> = io::read_csv_validated(&a.boxes)?;
    let segments: Vec<ActionSegment> = io::read_csv_validated(&a.segments)?;
    let records = curate(&boxes, &segments, &params)?;
    info!("{} boxes, {} segments, {} records", boxes.len(), segments.len(), records.len());
    io::write_jsonl(&a.out, &records)?;
    Ok(())
}

fn check_grad(cfg: &RunConfig, a: CheckGrad) -> Result<()> {
    let op: OpId = a.op.parse()?;
    let eps = a.eps.or(cfg.eps).unwrap_or(1e-5);
    let tensors: Tensors = match &a.tensors {
        Some(p) => io::read_json(p)?,
        None => {
            let mut dims = GradCheckDims::default();
            if let Some(d) = a.d_model {
                dims.d_model = d;
            }
            if let Some(h) = a.heads {
                dims.heads = h;
            }
            if dims.heads == 0 || dims.d_model % dims.heads != 0 {
                return Err(StaError::InvalidParameter {
                    name: "heads",
                    reason: format!("{} heads do not divide d_model {}", dims.heads, dims.d_model),
                }
                .into());
            }
            dims.d_head = dims.d_model / dims.heads;
            dims.mlp_width = 4 * dims.d_model;
            random_case(op, a.seed.or(cfg.seed).unwrap_or(0), dims)
        }
    };
    emit(None, &io::to_json_string(&grad_check(op, &tensors, eps)?)?)
}

fn demo_synth(cfg: &RunConfig, a: DemoSynth) -> Result<()> {
    let seed = a.seed.or(cfg.seed).unwrap_or(0);
    let afford = cfg.affordance(a.k, a.weighted, None)?;
    let eval = cfg.eval(None, None, None)?;
    let order = match a.order {
        Some(OrderArg::FuseFirst) => Composition::FuseFirst,
        Some(OrderArg::HotspotFirst) => Composition::HotspotFirst,
        None => cfg.order.unwrap_or_default(),
    };
    let zones = cfg.zones(None, None)?;
    let outcome = synth::demo(seed, zones, &afford, &eval, order)?;
    if let Some(dir) = &a.out_dir {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let scenario = synth::generate(seed)?;
        let db = synth::build_db(&scenario, zones)?;
        let (refined, _, _) = synth::run_pipeline(&scenario, &db, &afford, &eval, order)?;
        io::write_jsonl(&dir.join("clips.jsonl"), &scenario.clips)?;
        io::write_json(&dir.join("zones.json"), &db)?;
        io::write_jsonl(&dir.join("detections.jsonl"), &scenario.detections)?;
        io::write_jsonl(&dir.join("maps.jsonl"), &scenario.maps)?;
        io::write_jsonl(&dir.join("gt.jsonl"), &scenario.ground_truth)?;
        io::write_jsonl(&dir.join("refined.jsonl"), &refined)?;
        io::write_json(&dir.join("report.json"), &outcome.report)?;
    }
    emit(None, &io::to_json_string(&outcome)?)
}
