//! Tab-separated dataset manifest: `path <TAB> class_id [<TAB> x0,y0,x1,y1]*`.
//!
//! Blank lines and lines starting with `#` are ignored. Relative paths are
//! resolved against the manifest's directory.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::io::image::image_dims;
use crate::localize::BBox;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub image_path: PathBuf,
    pub class_id: usize,
    pub gt_boxes: Vec<BBox>,
}

impl ManifestEntry {
    /// File stem, used to key every per-image output.
    pub fn image_id(&self) -> String {
        self.image_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    }
}

pub fn parse_box(token: &str) -> std::result::Result<BBox, String> {
    let parts: Vec<&str> = token.split(',').collect();
    let [x0, y0, x1, y1] = parts[..] else {
        return Err(format!("box `{token}` must have four comma-separated integers"));
    };
    let num = |s: &str| s.trim().parse::<usize>().map_err(|_| format!("box `{token}`: `{s}` is not a non-negative integer"));
    let (x0, y0, x1, y1) = (num(x0)?, num(y0)?, num(x1)?, num(y1)?);
    if x1 <= x0 || y1 <= y0 {
        return Err(format!("box `{token}` needs x0 < x1 and y0 < y1"));
    }
    Ok(BBox { x0, y0, x1, y1 })
}

pub fn format_box(b: &BBox) -> String {
    format!("{},{},{},{}", b.x0, b.y0, b.x1, b.y1)
}

/// Parse manifest text without touching the file system. `source` names the
/// manifest in error locations.
pub fn parse_manifest(text: &str, source: &str, base: &Path) -> Result<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let loc = format!("{source}:{}", i + 1);
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < 2 {
            return Err(Error::parse(loc, "expected `path<TAB>class_id[<TAB>box…]`"));
        }
        let path = fields[0].trim();
        if path.is_empty() {
            return Err(Error::parse(loc, "empty image path"));
        }
        let class_id = fields[1]
            .trim()
            .parse()
            .map_err(|_| Error::parse(&loc, format!("class id `{}` is not a non-negative integer", fields[1])))?;
        let gt_boxes = fields[2..]
            .iter()
            .filter(|t| !t.trim().is_empty())
            .map(|t| parse_box(t.trim()).map_err(|m| Error::parse(&loc, m)))
            .collect::<Result<_>>()?;
        let p = Path::new(path);
        out.push(ManifestEntry {
            image_path: if p.is_absolute() { p.to_path_buf() } else { base.join(p) },
            class_id,
            gt_boxes,
        });
    }
    Ok(out)
}

/// Parse and validate: images exist and every box lies inside its image;
/// image ids are unique.
pub fn load_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let source = path.display().to_string();
    let entries = parse_manifest(&text, &source, base)?;
    let mut ids = HashSet::new();
    // line numbers of the non-comment entries, for error locations
    let lines: Vec<usize> = text
        .lines()
        .enumerate()
        .filter(|(_, l)| {
            let l = l.trim_end_matches('\r');
            !(l.trim().is_empty() || l.starts_with('#'))
        })
        .map(|(i, _)| i + 1)
        .collect();
    for (e, line) in entries.iter().zip(lines) {
        let loc = format!("{source}:{line}");
        if !ids.insert(e.image_id()) {
            return Err(Error::parse(loc, format!("duplicate image id `{}`", e.image_id())));
        }
        if !e.gt_boxes.is_empty() {
            let (h, w) = image_dims(&e.image_path).map_err(|err| Error::parse(&loc, err.to_string()))?;
            if let Some(b) = e.gt_boxes.iter().find(|b| !b.fits(h, w)) {
                return Err(Error::parse(
                    loc,
                    format!("box {} outside the {w}×{h} image", format_box(b)),
                ));
            }
        } else if !e.image_path.exists() {
            return Err(Error::parse(loc, format!("image {} not found", e.image_path.display())));
        }
    }
    Ok(entries)
}

/// Inverse of [`parse_manifest`] for paths relative to `base`.
pub fn format_manifest(entries: &[ManifestEntry], base: &Path) -> String {
    let mut out = String::new();
    for e in entries {
        let p = e.image_path.strip_prefix(base).unwrap_or(&e.image_path);
        out.push_str(&format!("{}\t{}", p.display(), e.class_id));
        for b in &e.gt_boxes {
            out.push('\t');
            out.push_str(&format_box(b));
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_and_single() {
        assert!(parse_manifest("", "m", Path::new("/d")).unwrap().is_empty());
        let e = parse_manifest("a.ppm\t1\t0,0,4,5\n", "m", Path::new("/d")).unwrap();
        assert_eq!(
            e,
            vec![ManifestEntry {
                image_path: PathBuf::from("/d/a.ppm"),
                class_id: 1,
                gt_boxes: vec![BBox::new(0, 0, 4, 5).unwrap()],
            }]
        );
        assert_eq!(e[0].image_id(), "a");
    }

    #[test]
    fn degenerate_box_names_line() {
        let err = parse_manifest("a.ppm\t0\t5,0,5,2", "m.tsv", Path::new(".")).unwrap_err();
        match err {
            Error::Parse { location, .. } => assert_eq!(location, "m.tsv:1"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn malformed_lines() {
        for bad in ["a.ppm", "a.ppm\tx", "a.ppm\t1\t1,2,3", "\t1"] {
            assert!(matches!(
                parse_manifest(bad, "m", Path::new(".")),
                Err(Error::Parse { .. })
            ));
        }
    }

    #[test]
    fn comments_skipped_and_format_round_trips() {
        let text = "# header\n\nx/a.ppm\t0\t0,0,2,2\t1,1,3,3\nb.ppm\t1\n";
        let e = parse_manifest(text, "m", Path::new("/r")).unwrap();
        assert_eq!(e.len(), 2);
        let again = parse_manifest(&format_manifest(&e, Path::new("/r")), "m", Path::new("/r")).unwrap();
        assert_eq!(again, e);
    }
}
