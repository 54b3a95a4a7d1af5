//! Frame manifests, the I-frame momentum sweep and anchor/window selection.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{self, detect_keypoints, MatchConfig};
use crate::imagecore::{load_image, Image};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FrameKind {
    I,
    P,
    B,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub index: usize,
    pub path: PathBuf,
    pub kind: FrameKind,
    #[serde(rename = "gop")]
    pub gop_id: usize,
    #[serde(default)]
    pub rotate180: bool,
}

impl FrameRecord {
    pub fn is_intra(&self) -> bool {
        self.kind == FrameKind::I
    }
}

/// Checks ordering and GOP structure.
pub fn validate_manifest(records: &[FrameRecord]) -> Result<()> {
    let first = records
        .first()
        .ok_or_else(|| Error::Manifest("manifest is empty".into()))?;
    if !first.is_intra() {
        return Err(Error::Manifest(format!(
            "frame {} opens GOP {} but is not an I-frame",
            first.index, first.gop_id
        )));
    }
    for pair in records.windows(2) {
        let (a, b) = (&pair[0], &pair[1]);
        if b.index == a.index {
            return Err(Error::Manifest(format!("duplicate frame index {}", b.index)));
        }
        if b.index < a.index {
            return Err(Error::Manifest(format!(
                "frame index {} follows {}; indices must increase",
                b.index, a.index
            )));
        }
        if b.gop_id < a.gop_id {
            return Err(Error::Manifest(format!(
                "GOP {} of frame {} follows GOP {}",
                b.gop_id, b.index, a.gop_id
            )));
        }
        if b.gop_id != a.gop_id && !b.is_intra() {
            return Err(Error::Manifest(format!(
                "frame {} opens GOP {} but is not an I-frame",
                b.index, b.gop_id
            )));
        }
    }
    Ok(())
}

/// Parses a JSON manifest; relative frame paths resolve against its directory.
pub fn parse_manifest(path: impl AsRef<Path>) -> Result<Vec<FrameRecord>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut records: Vec<FrameRecord> = serde_json::from_str(&text)
        .map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
    validate_manifest(&records)?;
    let base = path.parent().unwrap_or(Path::new(""));
    for r in &mut records {
        if r.path.is_relative() {
            r.path = base.join(&r.path);
        }
    }
    Ok(records)
}

pub fn write_manifest(records: &[FrameRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(records)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Supplies decoded, correctly oriented luminance frames.
pub trait FrameSource: Sync {
    fn load(&self, record: &FrameRecord) -> Result<Image>;
}

/// Reads frame files from disk, applying the manifest's 180° flag.
#[derive(Debug, Default, Clone, Copy)]
pub struct FileSource;

impl FrameSource for FileSource {
    fn load(&self, record: &FrameRecord) -> Result<Image> {
        let img = load_image(&record.path)?;
        Ok(if record.rotate180 { img.rotate180() } else { img })
    }
}

/// Frames held in memory, keyed by frame index.
#[derive(Debug, Default, Clone)]
pub struct MemorySource {
    frames: HashMap<usize, Image>,
}

impl MemorySource {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, index: usize, img: Image) {
        self.frames.insert(index, img);
    }

    pub fn from_frames(records: &[FrameRecord], frames: Vec<Image>) -> Self {
        Self {
            frames: records.iter().map(|r| r.index).zip(frames).collect(),
        }
    }
}

impl FrameSource for MemorySource {
    fn load(&self, record: &FrameRecord) -> Result<Image> {
        let img = self
            .frames
            .get(&record.index)
            .cloned()
            .ok_or_else(|| Error::Manifest(format!("no frame with index {}", record.index)))?;
        Ok(if record.rotate180 { img.rotate180() } else { img })
    }
}

/// Momentum between two consecutive I-frames.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairMomentum {
    pub from: usize,
    pub to: usize,
    pub momentum: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnchorSelection {
    /// Frame index of the anchor I-frame.
    pub anchor_index: usize,
    pub anchor_gop: usize,
    pub momenta: Vec<PairMomentum>,
    /// True when no momentum was defined and the first I-frame was taken.
    pub fallback: bool,
    pub window: Vec<FrameRecord>,
}

/// Frames from the anchor through the next I-frame, or to the stream end.
pub fn window_from(records: &[FrameRecord], anchor_pos: usize) -> Vec<FrameRecord> {
    let mut out = vec![records[anchor_pos].clone()];
    for r in &records[anchor_pos + 1..] {
        out.push(r.clone());
        if r.is_intra() {
            break;
        }
    }
    out
}

/// Picks the I-frame whose following I-frame pair has the smallest
/// momentum; ties go to the earlier frame.
pub fn select_anchor(
    records: &[FrameRecord],
    source: &dyn FrameSource,
    sanitize_threshold: Option<f64>,
    cfg: &MatchConfig,
) -> Result<AnchorSelection> {
    validate_manifest(records)?;
    let intra: Vec<usize> = (0..records.len()).filter(|&i| records[i].is_intra()).collect();

    let mut momenta = Vec::new();
    if intra.len() >= 2 {
        let detected = intra
            .par_iter()
            .map(|&i| -> Result<(usize, usize, Vec<features::Keypoint>)> {
                let img = source.load(&records[i])?;
                let (h, w) = img.dims();
                Ok((h, w, detect_keypoints(&img, &cfg.sift)?))
            })
            .collect::<Result<Vec<_>>>()?;
        let (h, w) = (detected[0].0, detected[0].1);
        if detected.iter().any(|d| (d.0, d.1) != (h, w)) {
            return Err(Error::InvalidDimensions("I-frames differ in size".into()));
        }
        let thr = sanitize_threshold.unwrap_or_else(|| features::default_sanitize_threshold(h, w));
        momenta = (0..intra.len() - 1)
            .into_par_iter()
            .map(|u| {
                let set = features::match_keypoints(&detected[u].2, &detected[u + 1].2, cfg);
                PairMomentum {
                    from: records[intra[u]].index,
                    to: records[intra[u + 1]].index,
                    momentum: features::momentum_of(&set, thr),
                }
            })
            .collect();
    }

    let mut best: Option<(usize, f64)> = None;
    for (u, m) in momenta.iter().enumerate() {
        if let Some(v) = m.momentum {
            if best.is_none_or(|(_, b)| v < b) {
                best = Some((u, v));
            }
        }
    }
    let fallback = best.is_none();
    let pos = intra[best.map_or(0, |(u, _)| u)];
    Ok(AnchorSelection {
        anchor_index: records[pos].index,
        anchor_gop: records[pos].gop_id,
        momenta,
        fallback,
        window: window_from(records, pos),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(index: usize, kind: FrameKind, gop: usize) -> FrameRecord {
        FrameRecord {
            index,
            path: PathBuf::from(format!("f{index}.png")),
            kind,
            gop_id: gop,
            rotate180: false,
        }
    }

    fn gop_manifest(n: usize, gop: usize) -> Vec<FrameRecord> {
        (0..n)
            .map(|i| rec(i, if i % gop == 0 { FrameKind::I } else { FrameKind::P }, i / gop))
            .collect()
    }

    #[test]
    fn manifest_validation() {
        assert!(validate_manifest(&[]).is_err());
        assert!(validate_manifest(&[rec(0, FrameKind::I, 0)]).is_ok());
        assert!(validate_manifest(&[rec(0, FrameKind::P, 0)]).is_err());
        let dup = [rec(0, FrameKind::I, 0), rec(0, FrameKind::P, 0)];
        assert!(validate_manifest(&dup).is_err());
        let order = [rec(1, FrameKind::I, 0), rec(0, FrameKind::P, 0)];
        assert!(validate_manifest(&order).is_err());
        let open = [rec(0, FrameKind::I, 0), rec(1, FrameKind::P, 1)];
        assert!(validate_manifest(&open).is_err());
    }

    #[test]
    fn parse_resolves_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        std::fs::write(
            &p,
            r#"[{"index":0,"path":"a.png","kind":"I","gop":0,"rotate180":true}]"#,
        )
        .unwrap();
        let recs = parse_manifest(&p).unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].path, dir.path().join("a.png"));
        assert!(recs[0].rotate180);
        std::fs::write(&p, "[{").unwrap();
        assert!(matches!(parse_manifest(&p), Err(Error::Manifest(_))));
    }

    #[test]
    fn thirty_frame_gop_window() {
        let mut recs = gop_manifest(31, 30);
        recs[30].kind = FrameKind::I;
        let w = window_from(&recs, 0);
        assert_eq!(w.len(), 31);
        assert_eq!(w.iter().filter(|r| r.kind == FrameKind::P).count(), 29);
        assert!(w.last().unwrap().is_intra());
    }

    #[test]
    fn window_runs_to_stream_end_without_closing_intra() {
        let recs = gop_manifest(5, 10);
        assert_eq!(window_from(&recs, 0).len(), 5);
    }

    #[test]
    fn single_gop_and_flat_video_anchor_on_first_intra() {
        let recs = gop_manifest(4, 2);
        let src = MemorySource::from_frames(&recs, vec![Image::filled(64, 64, 90.0); 4]);
        let sel = select_anchor(&recs, &src, None, &MatchConfig::default()).unwrap();
        assert_eq!(sel.anchor_index, 0);
        assert!(sel.fallback);
        assert_eq!(sel.momenta.len(), 1);
        assert_eq!(sel.window.len(), 3);

        let one = gop_manifest(3, 10);
        let src = MemorySource::from_frames(&one, vec![Image::filled(64, 64, 1.0); 3]);
        let sel = select_anchor(&one, &src, None, &MatchConfig::default()).unwrap();
        assert_eq!(sel.anchor_index, 0);
        assert!(sel.momenta.is_empty());
    }
}
