//! Interaction-hotspot maps and hotspot-based re-weighting of detection scores.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detection::Detection;
use crate::error::{Result, StaError};
use crate::tensor::{bilinear_resize, Grid};

pub const MAP_SUM_TOLERANCE: f64 = 1e-6;

/// Probability grid over the pixels of frame `uid`, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MapRepr")]
pub struct HotspotMap {
    uid: String,
    h: usize,
    w: usize,
    p: Vec<f64>,
}

#[derive(Deserialize)]
struct MapRepr {
    uid: String,
    h: usize,
    w: usize,
    p: Vec<f64>,
}

impl TryFrom<MapRepr> for HotspotMap {
    type Error = StaError;

    fn try_from(r: MapRepr) -> Result<Self> {
        Self::new(r.uid, r.h, r.w, r.p)
    }
}

impl HotspotMap {
    pub fn new(uid: impl Into<String>, h: usize, w: usize, p: Vec<f64>) -> Result<Self> {
        if h == 0 || w == 0 {
            return Err(StaError::invalid("map size", "height and width must be positive"));
        }
        if p.len() != h * w {
            return Err(StaError::LengthMismatch { what: "hotspot map", expected: h * w, actual: p.len() });
        }
        if let Some(i) = p.iter().position(|v| !v.is_finite() || *v < 0.0) {
            return Err(StaError::InvalidValue(format!("map cell {i} is {}", p[i])));
        }
        let sum: f64 = p.iter().sum();
        if (sum - 1.0).abs() > MAP_SUM_TOLERANCE {
            return Err(StaError::InvalidValue(format!("map sums to {sum}, not 1")));
        }
        Ok(Self { uid: uid.into(), h, w, p })
    }

    pub fn uniform(uid: impl Into<String>, h: usize, w: usize) -> Result<Self> {
        Self::new(uid, h, w, vec![1.0 / (h * w) as f64; h * w])
    }

    /// Normalizes non-negative weights; an all-zero grid becomes uniform.
    pub fn from_weights(uid: impl Into<String>, h: usize, w: usize, weights: Vec<f64>) -> Result<Self> {
        let sum: f64 = weights.iter().sum();
        if sum > 0.0 && sum.is_finite() {
            Self::new(uid, h, w, weights.into_iter().map(|v| v / sum).collect())
        } else {
            Self::uniform(uid, h, w)
        }
    }

    pub fn uid(&self) -> &str {
        &self.uid
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn probs(&self) -> &[f64] {
        &self.p
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.p[row * self.w + col]
    }

    /// Bilinear resize to `h × w`, renormalized to sum 1.
    pub fn resample(&self, h: usize, w: usize) -> Result<Self> {
        if (h, w) == (self.h, self.w) {
            return Ok(self.clone());
        }
        let g = Grid::new(self.h, self.w, 1, self.p.clone())?;
        let r = bilinear_resize(&g, h, w)?;
        Self::from_weights(self.uid.clone(), h, w, r.data().to_vec())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    #[default]
    Nearest,
    Bilinear,
}

/// Map value at pixel coordinates `(x, y)`, clamped to the grid.
pub fn sample_at(map: &HotspotMap, x: f64, y: f64, mode: Sampling) -> f64 {
    let cell = |v: f64, n: usize| (v.floor().max(0.0) as usize).min(n - 1);
    match mode {
        Sampling::Nearest => map.get(cell(y, map.h), cell(x, map.w)),
        Sampling::Bilinear => {
            let axis = |v: f64, n: usize| {
                let s = (v - 0.5).clamp(0.0, (n - 1) as f64);
                let i0 = s.floor() as usize;
                (i0, (i0 + 1).min(n - 1), s - i0 as f64)
            };
            let (y0, y1, ty) = axis(y, map.h);
            let (x0, x1, tx) = axis(x, map.w);
            let top = map.get(y0, x0) + (map.get(y0, x1) - map.get(y0, x0)) * tx;
            let bottom = map.get(y1, x0) + (map.get(y1, x1) - map.get(y1, x0)) * tx;
            top + (bottom - top) * ty
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ReweightOptions {
    pub sampling: Sampling,
    /// Frame size `(height, width)` in pixels; maps of another size are
    /// resampled to it first.
    pub frame_size: Option<(usize, usize)>,
}

/// Multiplies each detection score by the map value at its box center.
pub fn reweight(
    dets: &[Detection],
    maps: &HashMap<String, HotspotMap>,
    opts: &ReweightOptions,
) -> Result<Vec<Detection>> {
    let resized: HashMap<&str, HotspotMap> = match opts.frame_size {
        Some((h, w)) => maps.par_iter().map(|(k, m)| Ok((k.as_str(), m.resample(h, w)?))).collect::<Result<_>>()?,
        None => HashMap::new(),
    };
    dets.par_iter()
        .map(|d| {
            let map = resized
                .get(d.uid.as_str())
                .or_else(|| maps.get(&d.uid))
                .ok_or_else(|| StaError::Missing(format!("hotspot map for `{}`", d.uid)))?;
            let (cx, cy) = d.bbox.center();
            Ok(Detection { score: d.score * sample_at(map, cx, cy, opts.sampling), ..d.clone() })
        })
        .collect()
}

/// Indexes maps by uid; a repeated uid is an error.
pub fn index_maps(maps: Vec<HotspotMap>) -> Result<HashMap<String, HotspotMap>> {
    let mut out = HashMap::with_capacity(maps.len());
    for m in maps {
        let uid = m.uid.clone();
        if out.insert(uid.clone(), m).is_some() {
            return Err(StaError::InvalidValue(format!("duplicate hotspot map for `{uid}`")));
        }
    }
    Ok(out)
}

/// Normalized sum of isotropic Gaussians `(x, y, σ)` evaluated at cell
/// centers. No centers gives the uniform map.
pub fn synth_gaussian_map(
    uid: impl Into<String>,
    h: usize,
    w: usize,
    centers: &[(f64, f64, f64)],
) -> Result<HotspotMap> {
    if let Some(&(_, _, s)) = centers.iter().find(|c| !(c.2 > 0.0) || !c.2.is_finite()) {
        return Err(StaError::invalid("sigma", format!("must be > 0, got {s}")));
    }
    let mut weights = vec![0.0; h * w];
    for (i, row) in weights.chunks_mut(w.max(1)).enumerate() {
        let py = i as f64 + 0.5;
        for (j, v) in row.iter_mut().enumerate() {
            let px = j as f64 + 0.5;
            *v = centers.iter().map(|&(x, y, s)| (-((px - x).powi(2) + (py - y).powi(2)) / (2.0 * s * s)).exp()).sum();
        }
    }
    HotspotMap::from_weights(uid, h, w, weights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detection::BBox;
    use proptest::prelude::*;

    fn det(uid: &str, b: [f64; 4], score: f64) -> Detection {
        Detection {
            uid: uid.into(),
            bbox: BBox::from(b),
            noun: 0,
            verb: 0,
            ttc: 1.0,
            score,
            noun_probs: None,
            verb_probs: None,
        }
    }

    #[test]
    fn uniform_sampling() {
        let m = HotspotMap::uniform("f", 3, 5).unwrap();
        for (x, y) in [(0.0, 0.0), (4.9, 2.9), (-3.0, 100.0)] {
            assert_eq!(sample_at(&m, x, y, Sampling::Nearest), 1.0 / 15.0);
            assert!((sample_at(&m, x, y, Sampling::Bilinear) - 1.0 / 15.0).abs() < 1e-15);
        }
    }

    #[test]
    fn one_hot_sampling() {
        let mut p = vec![0.0; 20];
        p[2 * 5 + 3] = 1.0;
        let m = HotspotMap::new("f", 4, 5, p).unwrap();
        assert_eq!(sample_at(&m, 3.5, 2.5, Sampling::Nearest), 1.0);
        assert_eq!(sample_at(&m, 2.5, 2.5, Sampling::Nearest), 0.0);
        assert_eq!(sample_at(&m, 3.5, 2.5, Sampling::Bilinear), 1.0);
    }

    #[test]
    fn cell_lookup_two_by_two() {
        let m = HotspotMap::new("f", 2, 2, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        assert_eq!(sample_at(&m, 1.5, 1.5, Sampling::Nearest), 0.4);
        assert_eq!(sample_at(&m, 0.5, 1.5, Sampling::Nearest), 0.3);
        assert_eq!(sample_at(&m, 9.0, -9.0, Sampling::Nearest), 0.2);
        // midway between all four centers
        assert!((sample_at(&m, 1.0, 1.0, Sampling::Bilinear) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn reweight_examples() {
        let mut p = vec![0.98 / 3.0; 4];
        p[0] = 0.02;
        let m = HotspotMap::new("f", 2, 2, p).unwrap();
        let maps = index_maps(vec![m]).unwrap();
        let out = reweight(&[det("f", [0.0, 0.0, 1.0, 1.0], 0.8)], &maps, &ReweightOptions::default()).unwrap();
        assert_eq!(out[0].score, 0.8 * 0.02);
        assert!((out[0].score - 0.016).abs() < 1e-15);

        let zero = index_maps(vec![HotspotMap::new("g", 1, 2, vec![0.0, 1.0]).unwrap()]).unwrap();
        let out = reweight(&[det("g", [0.0, 0.0, 1.0, 1.0], 0.9)], &zero, &ReweightOptions::default()).unwrap();
        assert_eq!(out[0].score, 0.0);

        assert!(reweight(&[det("h", [0.0, 0.0, 1.0, 1.0], 0.9)], &zero, &ReweightOptions::default()).is_err());
    }

    #[test]
    fn coarse_maps_are_upsampled() {
        let m = HotspotMap::new("f", 2, 2, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let maps = index_maps(vec![m]).unwrap();
        let opts = ReweightOptions { sampling: Sampling::Nearest, frame_size: Some((4, 4)) };
        let out = reweight(&[det("f", [3.0, 3.0, 4.0, 4.0], 1.0)], &maps, &opts).unwrap();
        // corner cell keeps 0.4, renormalized over the 4×4 grid (sum 16·0.25)
        assert!((out[0].score - 0.1).abs() < 1e-15);
    }

    #[test]
    fn gaussian_fixtures() {
        let u = synth_gaussian_map("f", 3, 4, &[]).unwrap();
        assert!(u.probs().iter().all(|&v| v == 1.0 / 12.0));
        assert!(synth_gaussian_map("f", 3, 4, &[(1.0, 1.0, 0.0)]).is_err());

        let m = synth_gaussian_map("f", 4, 4, &[(2.0, 2.0, 1.0)]).unwrap();
        let a = (-0.125f64).exp();
        let b = (-1.125f64).exp();
        let axis = [b, a, a, b];
        let z = (2.0 * a + 2.0 * b).powi(2);
        for i in 0..4 {
            for j in 0..4 {
                assert!((m.get(i, j) - axis[i] * axis[j] / z).abs() < 1e-15);
            }
        }

        let s = synth_gaussian_map("f", 5, 6, &[(3.0, 1.7, 0.8)]).unwrap();
        for i in 0..5 {
            for j in 0..6 {
                assert!((s.get(i, j) - s.get(i, 5 - j)).abs() < 1e-9);
            }
        }

        // far-away center underflows everywhere
        let far = synth_gaussian_map("f", 2, 2, &[(1e6, 1e6, 1.0)]).unwrap();
        assert_eq!(far.probs(), &[0.25; 4]);
    }

    #[test]
    fn map_validation() {
        assert!(HotspotMap::new("f", 2, 2, vec![0.5, 0.5, 0.5, 0.5]).is_err());
        assert!(HotspotMap::new("f", 1, 2, vec![1.5, -0.5]).is_err());
        assert!(HotspotMap::new("f", 1, 2, vec![1.0]).is_err());
        assert!(serde_json::from_str::<HotspotMap>(r#"{"uid":"f","h":1,"w":2,"p":[0.25,0.25]}"#).is_err());
        let ok: HotspotMap = serde_json::from_str(r#"{"uid":"f","h":1,"w":2,"p":[0.25,0.75]}"#).unwrap();
        assert_eq!(serde_json::to_string(&ok).unwrap(), r#"{"uid":"f","h":1,"w":2,"p":[0.25,0.75]}"#);
    }

    fn argsort(scores: &[f64]) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..scores.len()).collect();
        idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
        idx
    }

    fn dets_strategy() -> impl Strategy<Value = Vec<Detection>> {
        prop::collection::vec((0.0f64..7.0, 0.0f64..5.0, 0.1f64..3.0, 0.0f64..=1.0), 1..30)
            .prop_map(|v| v.into_iter().map(|(x, y, s, score)| det("f", [x, y, x + s, y + s], score)).collect())
    }

    fn map_strategy(uid: &'static str) -> impl Strategy<Value = HotspotMap> {
        prop::collection::vec(0.01f64..1.0, 6 * 8).prop_map(move |w| HotspotMap::from_weights(uid, 6, 8, w).unwrap())
    }

    proptest! {
        #[test]
        fn uniform_map_preserves_ranking(dets in dets_strategy()) {
            let maps = index_maps(vec![HotspotMap::uniform("f", 6, 8).unwrap()]).unwrap();
            let out = reweight(&dets, &maps, &ReweightOptions::default()).unwrap();
            let before: Vec<f64> = dets.iter().map(|d| d.score).collect();
            let after: Vec<f64> = out.iter().map(|d| d.score).collect();
            prop_assert_eq!(argsort(&before), argsort(&after));
        }

        #[test]
        fn scores_never_grow_and_other_fields_survive(dets in dets_strategy(), m in map_strategy("f")) {
            let maps = index_maps(vec![m]).unwrap();
            let out = reweight(&dets, &maps, &ReweightOptions::default()).unwrap();
            for (a, b) in dets.iter().zip(&out) {
                prop_assert!(b.score <= a.score);
                prop_assert_eq!(&Detection { score: a.score, ..b.clone() }, a);
            }
        }

        #[test]
        fn sequential_reweighting_matches_product_map(
            dets in dets_strategy(),
            m1 in map_strategy("f"),
            m2 in map_strategy("f"),
        ) {
            let opts = ReweightOptions::default();
            let twice = reweight(&reweight(&dets, &index_maps(vec![m1.clone()]).unwrap(), &opts).unwrap(),
                &index_maps(vec![m2.clone()]).unwrap(), &opts).unwrap();
            let product: Vec<f64> = m1.probs().iter().zip(m2.probs()).map(|(a, b)| a * b).collect();
            let pm = HotspotMap::from_weights("f", 6, 8, product).unwrap();
            let once = reweight(&dets, &index_maps(vec![pm]).unwrap(), &opts).unwrap();
            let a: Vec<f64> = twice.iter().map(|d| d.score).collect();
            let b: Vec<f64> = once.iter().map(|d| d.score).collect();
            // equal up to one positive constant
            let ratio: Vec<f64> = a.iter().zip(&b).filter(|(_, y)| **y > 0.0).map(|(x, y)| x / y).collect();
            if let Some(r0) = ratio.first() {
                prop_assert!(ratio.iter().all(|r| (r - r0).abs() <= 1e-9 * r0));
            }
        }
    }
}
