//! Per-image inference, refinement and evaluation, shared by the command-line
//! subcommands and the in-process end-to-end path.

use std::collections::HashMap;
use std::path::Path;

use rayon::prelude::*;

use crate::cam::{Cam, REFINED_SCALE_ID};
use crate::error::{Error, Result};
use crate::io::image::{decode_image, write_image};
use crate::io::manifest::{format_manifest, ManifestEntry};
use crate::io::RunConfig;
use crate::localize::{localize, EvalRecord};
use crate::multiscale::{combine_scores, fuse_all, run_scales, top_k, MultiscaleParams, PyramidConfig};
use crate::numerics::{bilinear_resize, Tensor};
use crate::refine::{refine_channels, RefineParams};
use crate::segmenter::{segment_image, DpcConfig, SegmentMap, SlicParams};
use crate::synth::SynthExample;
use crate::trainer::LabeledExample;

pub const TOP_K: usize = 5;

#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    /// One CAM per pyramid level, `Nᵢ×Nᵢ×C`.
    pub branch_cams: Vec<Cam>,
    /// Fused maps on the finest grid.
    pub combined: Cam,
    /// Mean of the branch class distributions.
    pub probs: Tensor,
    /// Up to [`TOP_K`] classes, most probable first.
    pub top5: Vec<usize>,
}

pub fn infer_image(image: &Tensor, params: &MultiscaleParams, pcfg: &PyramidConfig) -> Result<Inference> {
    let outs = run_scales(image, params, pcfg)?;
    let scores: Vec<Tensor> = outs.iter().map(|o| o.scores.clone()).collect();
    let probs = combine_scores(&scores)?;
    let top5 = top_k(&probs, TOP_K);
    let branch_cams: Vec<Cam> = outs.into_iter().map(|o| o.cam).collect();
    let combined = fuse_all(&branch_cams, pcfg.fusion)?;
    Ok(Inference {
        branch_cams,
        combined,
        probs,
        top5,
    })
}

/// `cam` resized to `h×w×C` (identity when it already has that extent).
pub fn cam_at_image_size(cam: &Cam, h: usize, w: usize) -> Result<Tensor> {
    bilinear_resize(&cam.map, h, w)
}

/// Segment `image` and refine every class channel of `cam` (resized to the
/// image) with the segmentation.
pub fn refine_image(
    image: &Tensor,
    cam: &Cam,
    slic: &SlicParams,
    dpc: &DpcConfig,
    refine: RefineParams,
) -> Result<(SegmentMap, Cam)> {
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let seg = segment_image(image, slic, dpc)?;
    let up = cam_at_image_size(cam, h, w)?;
    let map = refine_channels(&up, &seg, refine)?;
    Ok((
        seg,
        Cam {
            map,
            scale_id: REFINED_SCALE_ID,
        },
    ))
}

/// Localize on the top-1 channel (and on the ground-truth channel when it
/// differs) at image resolution.
#[allow(clippy::too_many_arguments)]
pub fn make_record(
    image_id: &str,
    cam: &Cam,
    h: usize,
    w: usize,
    top5: &[usize],
    gt_class: usize,
    gt_boxes: &[crate::localize::BBox],
    tau: f64,
) -> Result<EvalRecord> {
    let up = cam_at_image_size(cam, h, w)?;
    let classes = up.shape()[2];
    if gt_class >= classes {
        return Err(Error::param(format!(
            "{image_id}: class {gt_class} outside the {classes}-class map"
        )));
    }
    let top1 = *top5
        .first()
        .ok_or_else(|| Error::param(format!("{image_id}: empty top-5 list")))?;
    let pred_box = localize(&up.channel(top1)?, tau)?;
    let gt_class_box = if top1 == gt_class {
        None
    } else {
        Some(localize(&up.channel(gt_class)?, tau)?)
    };
    EvalRecord::new(image_id, top5.to_vec(), pred_box, gt_class_box, gt_class, gt_boxes.to_vec())
}

/// Probabilities and top-5 per image id.
pub type ScoreTable = HashMap<String, (Vec<f64>, Vec<usize>)>;

/// One line per image: `image_id <TAB> p₀,p₁,… <TAB> top-5`. Probabilities
/// use the shortest round-trip decimal form.
pub fn format_scores_line(image_id: &str, inf: &Inference) -> String {
    let join = |v: Vec<String>| v.join(",");
    format!(
        "{image_id}\t{}\t{}\n",
        join(inf.probs.data().iter().map(|p| p.to_string()).collect()),
        join(inf.top5.iter().map(|k| k.to_string()).collect())
    )
}

pub fn parse_scores(text: &str, source: &str) -> Result<ScoreTable> {
    let mut out = ScoreTable::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let loc = format!("{source}:{}", i + 1);
        let f: Vec<&str> = line.split('\t').collect();
        let [id, probs, top] = f[..] else {
            return Err(Error::parse(loc, "expected `image_id<TAB>probs<TAB>top5`"));
        };
        let probs = probs
            .split(',')
            .map(|s| s.parse::<f64>().map_err(|_| Error::parse(&loc, format!("bad probability `{s}`"))))
            .collect::<Result<Vec<_>>>()?;
        let top = top
            .split(',')
            .map(|s| s.parse::<usize>().map_err(|_| Error::parse(&loc, format!("bad class `{s}`"))))
            .collect::<Result<Vec<_>>>()?;
        if out.insert(id.to_string(), (probs, top)).is_some() {
            return Err(Error::parse(loc, format!("duplicate image id `{id}`")));
        }
    }
    Ok(out)
}

pub fn read_scores(path: &Path) -> Result<ScoreTable> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_scores(&text, &path.display().to_string())
}

/// Everything one image contributes to an end-to-end run.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageResult {
    pub image_id: String,
    pub inference: Inference,
    pub refined: Option<(SegmentMap, Cam)>,
    pub record: EvalRecord,
}

/// Infer, optionally refine, and localize one manifest entry.
pub fn process_entry(
    entry: &ManifestEntry,
    params: &MultiscaleParams,
    cfg: &RunConfig,
    refine: bool,
) -> Result<ImageResult> {
    let image = decode_image(&entry.image_path)?;
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let pcfg = cfg.pyramid()?;
    let inference = infer_image(&image, params, &pcfg)?;
    let refined = if refine {
        Some(refine_image(&image, &inference.combined, &cfg.slic, &cfg.dpc_config(), cfg.refine)?)
    } else {
        None
    };
    let cam = refined.as_ref().map_or(&inference.combined, |(_, c)| c);
    let image_id = entry.image_id();
    let record = make_record(&image_id, cam, h, w, &inference.top5, entry.class_id, &entry.gt_boxes, cfg.tau)?;
    Ok(ImageResult {
        image_id,
        inference,
        refined,
        record,
    })
}

/// [`process_entry`] over a manifest, images in parallel, results in
/// manifest order.
pub fn run_end_to_end(
    entries: &[ManifestEntry],
    params: &MultiscaleParams,
    cfg: &RunConfig,
    refine: bool,
) -> Result<Vec<ImageResult>> {
    entries
        .par_iter()
        .map(|e| process_entry(e, params, cfg, refine))
        .collect()
}

/// Decode every manifest image for training, in manifest order.
pub fn load_labeled(entries: &[ManifestEntry]) -> Result<Vec<LabeledExample>> {
    entries
        .par_iter()
        .map(|e| {
            Ok(LabeledExample {
                image: decode_image(&e.image_path)?,
                class_id: e.class_id,
            })
        })
        .collect()
}

/// Write `examples` as `<prefix>_<index>.ppm` files under `dir` and return
/// their manifest entries together with the manifest text (paths relative to
/// `dir`).
pub fn write_corpus(dir: &Path, prefix: &str, examples: &[SynthExample]) -> Result<(Vec<ManifestEntry>, String)> {
    let entries = examples
        .iter()
        .enumerate()
        .map(|(i, ex)| {
            let path = dir.join(format!("{prefix}_{i:05}.ppm"));
            write_image(&path, &ex.image)?;
            Ok(ManifestEntry {
                image_path: path,
                class_id: ex.class_id,
                gt_boxes: vec![ex.gt_box],
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let text = format_manifest(&entries, dir);
    Ok((entries, text))
}
