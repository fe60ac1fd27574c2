use std::path::Path;

use serde::Deserialize;
use sta_core::affordance::{AffordanceConfig, Weighting, ZoneParams};
use sta_core::curation::CurationParams;
use sta_core::eval::EvalConfig;
use sta_core::hotspot::Sampling;
use sta_core::synth::Composition;
use sta_core::{io, Result, StaError};

/// Settings read from `--config`. Every key is optional.
#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub k: Option<usize>,
    pub weighted: Option<bool>,
    pub rescale: Option<bool>,
    pub theta: Option<f64>,
    #[serde(rename = "M", alias = "m")]
    pub m: Option<usize>,
    pub topk: Option<usize>,
    pub iou: Option<f64>,
    pub ttc_tol: Option<f64>,
    pub seed: Option<u64>,
    pub eps: Option<f64>,
    pub fps: Option<f64>,
    pub gap: Option<u64>,
    pub split: Option<String>,
    pub jobs: Option<usize>,
    pub sampling: Option<Sampling>,
    pub order: Option<Composition>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => io::read_json(p),
            None => Ok(Self::default()),
        }
    }

    pub fn affordance(
        &self,
        k: Option<usize>,
        weighted: Option<bool>,
        rescale: Option<bool>,
    ) -> Result<AffordanceConfig> {
        let d = AffordanceConfig::default();
        let k = k.or(self.k).unwrap_or(d.k);
        if k == 0 {
            return Err(StaError::InvalidParameter { name: "k", reason: "must be at least 1".into() });
        }
        let weighted = weighted.or(self.weighted).unwrap_or(d.weighting == Weighting::Weighted);
        Ok(AffordanceConfig {
            k,
            weighting: if weighted { Weighting::Weighted } else { Weighting::Unweighted },
            rescale: rescale.or(self.rescale).unwrap_or(d.rescale),
        })
    }

    pub fn zones(&self, theta: Option<f64>, m: Option<usize>) -> Result<ZoneParams> {
        let d = ZoneParams::default();
        let p = ZoneParams { theta: theta.or(self.theta).unwrap_or(d.theta), recent: m.or(self.m).unwrap_or(d.recent) };
        p.validate()?;
        Ok(p)
    }

    pub fn eval(&self, iou: Option<f64>, ttc_tol: Option<f64>, topk: Option<usize>) -> Result<EvalConfig> {
        let d = EvalConfig::default();
        let c = EvalConfig {
            iou_threshold: iou.or(self.iou).unwrap_or(d.iou_threshold),
            ttc_tolerance: ttc_tol.or(self.ttc_tol).unwrap_or(d.ttc_tolerance),
            top_k: topk.or(self.topk).unwrap_or(d.top_k),
        };
        c.validate()?;
        Ok(c)
    }

    pub fn curation(&self, fps: Option<f64>, gap: Option<u64>, split: Option<String>) -> Result<CurationParams> {
        let d = CurationParams::default();
        let p = CurationParams {
            fps: fps.or(self.fps).unwrap_or(d.fps),
            gap: gap.or(self.gap).unwrap_or(d.gap),
            split: split.or_else(|| self.split.clone()).unwrap_or(d.split),
        };
        if !(p.fps > 0.0) || !p.fps.is_finite() {
            return Err(StaError::InvalidParameter { name: "fps", reason: format!("must be > 0, got {}", p.fps) });
        }
        Ok(p)
    }

    pub fn jobs(&self, jobs: Option<usize>) -> Result<usize> {
        let j = jobs.or(self.jobs).unwrap_or(1);
        if j == 0 {
            return Err(StaError::InvalidParameter { name: "jobs", reason: "must be at least 1".into() });
        }
        Ok(j)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_win_over_file() {
        let c: RunConfig = serde_json::from_str(r#"{"k": 2, "weighted": false, "iou": 0.3}"#).unwrap();
        let a = c.affordance(Some(3), None, None).unwrap();
        assert_eq!((a.k, a.weighting), (3, Weighting::Unweighted));
        assert_eq!(c.eval(None, None, None).unwrap().iou_threshold, 0.3);
        assert_eq!(c.eval(Some(0.7), None, None).unwrap().iou_threshold, 0.7);
    }

    #[test]
    fn defaults_without_file() {
        let a = RunConfig::default().affordance(None, None, None).unwrap();
        assert_eq!(a, AffordanceConfig::default());
        assert!(RunConfig::default().eval(Some(1.5), None, None).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"kay": 2}"#).is_err());
    }
}
