//! JSON-lines interchange for ground truth and detections.
//!
//! One frame per line:
//! `{"frame":0,"boxes":[{"cx":..,"cy":..,"w":..,"h":..,"class":..,"score":..,"object_id":..}]}`.
//! `score` is present for detections, `object_id` for ground truth.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{GroundTruthFrame, GtBox};
use crate::error::{Error, Result};
use crate::geom::{BBox, Detection};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxRecord {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub class: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub object_id: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameRecord {
    pub frame: u32,
    pub boxes: Vec<BoxRecord>,
}

impl From<&GroundTruthFrame> for FrameRecord {
    fn from(g: &GroundTruthFrame) -> Self {
        FrameRecord {
            frame: g.frame,
            boxes: g
                .boxes
                .iter()
                .map(|b| BoxRecord {
                    cx: b.bbox.x,
                    cy: b.bbox.y,
                    w: b.bbox.w,
                    h: b.bbox.h,
                    class: b.class_id,
                    score: None,
                    object_id: Some(b.object_id),
                })
                .collect(),
        }
    }
}

impl FrameRecord {
    pub fn from_detections(frame: u32, dets: &[Detection]) -> Self {
        FrameRecord {
            frame,
            boxes: dets
                .iter()
                .map(|d| BoxRecord {
                    cx: d.bbox.x,
                    cy: d.bbox.y,
                    w: d.bbox.w,
                    h: d.bbox.h,
                    class: d.class_id,
                    score: Some(d.score),
                    object_id: None,
                })
                .collect(),
        }
    }

    /// Ground truth view; boxes without `object_id` are numbered by position.
    pub fn to_ground_truth(&self) -> GroundTruthFrame {
        GroundTruthFrame {
            frame: self.frame,
            boxes: self
                .boxes
                .iter()
                .enumerate()
                .map(|(i, b)| GtBox {
                    bbox: BBox::new(b.cx, b.cy, b.w, b.h),
                    class_id: b.class,
                    object_id: b.object_id.unwrap_or(i as u32),
                })
                .collect(),
        }
    }

    /// Detection view; missing scores default to 1.
    pub fn to_detections(&self) -> Vec<Detection> {
        self.boxes
            .iter()
            .map(|b| Detection::new(BBox::new(b.cx, b.cy, b.w, b.h), b.class, b.score.unwrap_or(1.0)))
            .collect()
    }
}

pub fn to_string(records: &[FrameRecord]) -> String {
    let mut out = String::new();
    for r in records {
        let line = serde_json::to_string(r).expect("records serialize");
        let _ = writeln!(out, "{line}");
    }
    out
}

pub fn parse(text: &str) -> Result<Vec<FrameRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::parse(format!("jsonl line {}", i + 1), e))
        })
        .collect()
}

pub fn write(path: impl AsRef<Path>, records: &[FrameRecord]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_string(records)).map_err(|e| Error::io(path, e))
}

pub fn read(path: impl AsRef<Path>) -> Result<Vec<FrameRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse(&text)
}

/// Ground truth indexed by frame for a clip of `n_frames`; frames absent from
/// the records are empty.
pub fn ground_truth_by_frame(records: &[FrameRecord], n_frames: u32) -> Vec<GroundTruthFrame> {
    let mut out: Vec<GroundTruthFrame> = (0..n_frames)
        .map(|frame| GroundTruthFrame {
            frame,
            boxes: Vec::new(),
        })
        .collect();
    for r in records {
        if let Some(slot) = out.get_mut(r.frame as usize) {
            slot.boxes.extend(r.to_ground_truth().boxes);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn line_format() {
        let rec = FrameRecord::from_detections(
            4,
            &[Detection::new(BBox::new(1.0, 2.0, 3.0, 4.0), 2, 0.5)],
        );
        assert_eq!(
            to_string(&[rec.clone()]),
            "{\"frame\":4,\"boxes\":[{\"cx\":1.0,\"cy\":2.0,\"w\":3.0,\"h\":4.0,\"class\":2,\"score\":0.5}]}\n"
        );
        assert_eq!(parse(&to_string(&[rec.clone()])).unwrap(), vec![rec]);
    }

    #[test]
    fn ground_truth_roundtrip() {
        let g = GroundTruthFrame {
            frame: 1,
            boxes: vec![GtBox {
                bbox: BBox::new(5.0, 6.0, 7.0, 8.0),
                class_id: 0,
                object_id: 9,
            }],
        };
        let rec = FrameRecord::from(&g);
        assert_eq!(rec.to_ground_truth(), g);
        let by_frame = ground_truth_by_frame(&[rec], 3);
        assert_eq!(by_frame[1], g);
        assert!(by_frame[0].boxes.is_empty());
    }

    #[test]
    fn malformed_lines_report_position() {
        let err = parse("{\"frame\":0,\"boxes\":[]}\nnot json\n").unwrap_err();
        assert!(err.to_string().contains("line 2"));
    }
}
