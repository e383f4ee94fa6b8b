//! Metric reports, per-image CSV and the evaluation records file.
//!
//! Records file: one tab-separated line per image —
//! `image_id  gt_class  top5  pred_box  gt_class_box  gt_boxes`, where `top5`
//! is a comma list, boxes are `x0,y0,x1,y1`, `gt_class_box` is `-` when
//! absent and `gt_boxes` is a `;`-separated box list.

use std::path::Path;

use crate::error::{Error, Result};
use crate::io::manifest::{format_box, parse_box};
use crate::localize::{classification_accuracy, evaluate, EvalRecord};

/// `metric=<name> value=<real> n=<count>` lines for Top-1, Top-5, GT-known
/// localization and classification accuracy.
pub fn format_metrics(records: &[EvalRecord]) -> Result<String> {
    let m = evaluate(records)?;
    let n = m.count;
    Ok([
        ("top1_loc", m.top1),
        ("top5_loc", m.top5),
        ("gt_known_loc", m.gt_known),
        ("top1_cls", classification_accuracy(records)),
    ]
    .iter()
    .map(|(name, v)| format!("metric={name} value={v:.6} n={n}\n"))
    .collect())
}

/// Per-image CSV with a header row.
pub fn format_per_image_csv(records: &[EvalRecord]) -> String {
    let mut out = String::from("image_id,gt_class,top1,pred_box,best_iou,localized,top1_hit,top5_hit\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},\"{}\",{:.6},{},{},{}\n",
            r.image_id,
            r.gt_class,
            r.top5[0],
            format_box(&r.pred_box),
            r.best_iou,
            r.localized() as u8,
            r.top1_hit() as u8,
            r.top5_hit() as u8
        ));
    }
    out
}

pub fn format_records(records: &[EvalRecord]) -> String {
    let mut out = String::new();
    for r in records {
        let top5 = r.top5.iter().map(ToString::to_string).collect::<Vec<_>>().join(",");
        let gcb = r.gt_class_box.as_ref().map_or("-".to_string(), format_box);
        let gts = r.gt_boxes.iter().map(format_box).collect::<Vec<_>>().join(";");
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\n",
            r.image_id,
            r.gt_class,
            top5,
            format_box(&r.pred_box),
            gcb,
            gts
        ));
    }
    out
}

pub fn parse_records(text: &str, source: &str) -> Result<Vec<EvalRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let loc = format!("{source}:{}", i + 1);
        let f: Vec<&str> = line.split('\t').collect();
        let [id, gt_class, top5, pred, gcb, gts] = f[..] else {
            return Err(Error::parse(loc, format!("expected 6 tab-separated fields, found {}", f.len())));
        };
        let int = |s: &str| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| Error::parse(&loc, format!("`{s}` is not a non-negative integer")))
        };
        let bx = |s: &str| parse_box(s.trim()).map_err(|m| Error::parse(&loc, m));
        let top5 = top5.split(',').map(int).collect::<Result<Vec<_>>>()?;
        let gt_class_box = if gcb.trim() == "-" { None } else { Some(bx(gcb)?) };
        let gt_boxes = gts.split(';').map(bx).collect::<Result<Vec<_>>>()?;
        let rec = EvalRecord::new(id, top5, bx(pred)?, gt_class_box, int(gt_class)?, gt_boxes)
            .map_err(|e| Error::parse(&loc, e.to_string()))?;
        out.push(rec);
    }
    Ok(out)
}

pub fn read_records(path: &Path) -> Result<Vec<EvalRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_records(&text, &path.display().to_string())
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
