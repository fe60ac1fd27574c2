//! Conversion of active-object box annotations and action segments into
//! short-term anticipation records.
//!
//! Boxes are chained into per-object tracks, tracks with several instances of
//! their noun in one frame are dropped, each remaining track is tied to the
//! next action segment on the same noun, truncated at the segment start, and
//! every surviving frame becomes one record whose time to contact is the
//! distance to the segment start.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::detection::{BBox, Validate};
use crate::error::{Result, StaError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxAnnotation {
    pub video_id: String,
    pub frame: u64,
    pub noun: usize,
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BoxAnnotation {
    pub fn bbox(&self) -> BBox {
        BBox::from([self.x1, self.y1, self.x2, self.y2])
    }
}

impl Validate for BoxAnnotation {
    fn validate(&self) -> std::result::Result<(), (&'static str, String)> {
        self.bbox().check().map_err(|e| ("x1", e))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionSegment {
    pub video_id: String,
    pub start: u64,
    pub stop: u64,
    pub verb: usize,
    pub noun: usize,
}

impl Validate for ActionSegment {
    fn validate(&self) -> std::result::Result<(), (&'static str, String)> {
        if self.start >= self.stop {
            return Err(("stop", format!("segment stop {} is not after start {}", self.stop, self.start)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectTrack {
    pub id: usize,
    pub video_id: String,
    pub noun: usize,
    /// Strictly increasing frames.
    pub frames: Vec<(u64, BBox)>,
    pub segment: Option<ActionSegment>,
}

impl ObjectTrack {
    pub fn first_frame(&self) -> Option<u64> {
        self.frames.first().map(|f| f.0)
    }
}

/// Chains boxes of the same video and noun while consecutive frames are at
/// most `gap` apart. A frame annotated twice contributes its first box.
/// Track ids follow (video, noun, first frame) order.
pub fn build_tracks(boxes: &[BoxAnnotation], gap: u64) -> Vec<ObjectTrack> {
    let mut groups: BTreeMap<(&str, usize), Vec<&BoxAnnotation>> = BTreeMap::new();
    for b in boxes {
        groups.entry((b.video_id.as_str(), b.noun)).or_default().push(b);
    }
    let mut tracks: Vec<ObjectTrack> = Vec::new();
    for ((video, noun), mut anns) in groups {
        anns.sort_by_key(|a| a.frame);
        let mut frames: Vec<(u64, BBox)> = Vec::new();
        let flush = |frames: &mut Vec<(u64, BBox)>, tracks: &mut Vec<ObjectTrack>| {
            if !frames.is_empty() {
                tracks.push(ObjectTrack {
                    id: tracks.len(),
                    video_id: video.to_string(),
                    noun,
                    frames: std::mem::take(frames),
                    segment: None,
                });
            }
        };
        for a in anns {
            match frames.last() {
                Some(&(f, _)) if a.frame == f => continue,
                Some(&(f, _)) if a.frame - f > gap => flush(&mut frames, &mut tracks),
                _ => {}
            }
            frames.push((a.frame, a.bbox()));
        }
        flush(&mut frames, &mut tracks);
    }
    tracks
}

/// Removes every track that covers a frame where its video has two or more
/// boxes of the track's noun.
pub fn drop_ambiguous_tracks(tracks: Vec<ObjectTrack>, boxes: &[BoxAnnotation]) -> Vec<ObjectTrack> {
    let mut counts: HashMap<(&str, u64, usize), usize> = HashMap::new();
    for b in boxes {
        *counts.entry((b.video_id.as_str(), b.frame, b.noun)).or_default() += 1;
    }
    tracks
        .into_iter()
        .filter(|t| {
            t.frames.iter().all(|(f, _)| counts.get(&(t.video_id.as_str(), *f, t.noun)).copied().unwrap_or(0) < 2)
        })
        .collect()
}

/// Attaches the earliest-starting segment of the same video and noun that
/// starts at or after the track's first frame. Equal starts keep input order.
pub fn match_track_to_segment(mut track: ObjectTrack, segments: &[ActionSegment]) -> ObjectTrack {
    let first = track.first_frame();
    track.segment = first.and_then(|first| {
        segments
            .iter()
            .filter(|s| s.video_id == track.video_id && s.noun == track.noun && s.start >= first)
            .min_by_key(|s| s.start)
            .cloned()
    });
    track
}

/// Drops frames at or after the matched segment's start. Returns `None` when
/// nothing is left or the track is unmatched.
pub fn truncate_track(mut track: ObjectTrack) -> Option<ObjectTrack> {
    let start = track.segment.as_ref()?.start;
    track.frames.retain(|(f, _)| *f < start);
    (!track.frames.is_empty()).then_some(track)
}

/// Ground-truth record, readable as evaluation ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StaRecord {
    pub uid: String,
    pub video_id: String,
    pub frame: u64,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub noun: usize,
    pub verb: usize,
    pub ttc: f64,
    pub split: String,
}

pub fn frame_uid(video: &str, frame: u64) -> String {
    format!("{video}_{frame}")
}

/// One record per remaining frame with `ttc = (start − frame) / fps`.
pub fn emit_sta_records(track: &ObjectTrack, fps: f64, split: &str) -> Result<Vec<StaRecord>> {
    if !(fps > 0.0) || !fps.is_finite() {
        return Err(StaError::invalid("fps", format!("must be > 0, got {fps}")));
    }
    let seg = track.segment.as_ref().ok_or_else(|| StaError::Missing(format!("segment for track {}", track.id)))?;
    track
        .frames
        .iter()
        .map(|&(frame, bbox)| {
            if frame >= seg.start {
                return Err(StaError::InvalidValue(format!(
                    "frame {frame} of track {} is not before its segment start {}",
                    track.id, seg.start
                )));
            }
            Ok(StaRecord {
                uid: frame_uid(&track.video_id, frame),
                video_id: track.video_id.clone(),
                frame,
                bbox,
                noun: track.noun,
                verb: seg.verb,
                ttc: (seg.start - frame) as f64 / fps,
                split: split.to_string(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurationParams {
    pub fps: f64,
    /// Largest frame gap bridged within one track.
    pub gap: u64,
    pub split: String,
}

impl Default for CurationParams {
    fn default() -> Self {
        Self { fps: 30.0, gap: 30, split: "train".into() }
    }
}

/// Full pipeline; records are sorted by (video, frame, noun).
pub fn curate(boxes: &[BoxAnnotation], segments: &[ActionSegment], params: &CurationParams) -> Result<Vec<StaRecord>> {
    if !(params.fps > 0.0) || !params.fps.is_finite() {
        return Err(StaError::invalid("fps", format!("must be > 0, got {}", params.fps)));
    }
    let tracks = drop_ambiguous_tracks(build_tracks(boxes, params.gap), boxes);
    let mut records = Vec::new();
    for t in tracks {
        if let Some(t) = truncate_track(match_track_to_segment(t, segments)) {
            records.extend(emit_sta_records(&t, params.fps, &params.split)?);
        }
    }
    records.sort_by(|a, b| (&a.video_id, a.frame, a.noun).cmp(&(&b.video_id, b.frame, b.noun)));
    Ok(records)
}
