//! On-disk form of a generated split: one tensor container with images and
//! per-pixel segment ids, plus a JSON file with the segment tables.

use std::path::Path;

use anyhow::{Context, Result};
use pmt_core::data::container::{EntryData, TensorContainer};
use pmt_core::data::synth::ImageSample;
use pmt_core::metrics::panoptic::SegmentInfo;

/// Writes `<dir>/<name>.pmtc` and `<dir>/<name>_segments.json`. `groups` is
/// one image per group for image splits and one clip per group for video.
pub fn write_split(dir: &Path, name: &str, groups: &[&[ImageSample]]) -> Result<()> {
    let first = groups.iter().find_map(|g| g.first()).context("empty split")?;
    let (h, w) = (first.panoptic.height, first.panoptic.width);
    let frames = groups[0].len();
    let mut pixels = Vec::new();
    let mut ids = Vec::new();
    let mut tables: Vec<Vec<Vec<SegmentInfo>>> = Vec::new();
    for g in groups {
        anyhow::ensure!(g.len() == frames, "clips of unequal length");
        tables.push(g.iter().map(|s| s.panoptic.segments.clone()).collect());
        for s in g.iter() {
            pixels.extend_from_slice(s.image.data());
            ids.extend_from_slice(&s.panoptic.ids);
        }
    }
    let n = groups.len();
    let mut c = TensorContainer::new();
    c.push("images", &[n, frames, 3, h, w], EntryData::F32(pixels))?;
    c.push("ids", &[n, frames, h, w], EntryData::U32(ids))?;
    let path = dir.join(format!("{name}.pmtc"));
    c.save(&path).with_context(|| format!("writing {}", path.display()))?;
    let seg_path = dir.join(format!("{name}_segments.json"));
    std::fs::write(&seg_path, serde_json::to_string(&tables)?).with_context(|| format!("writing {}", seg_path.display()))?;
    Ok(())
}
