//! Simple linear iterative clustering in joint RGB/position space.

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::segmenter::{neighbours, SegmentMap};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SlicParams {
    pub target_segments: usize,
    pub compactness: f64,
    pub iterations: usize,
}

impl Default for SlicParams {
    fn default() -> Self {
        Self {
            target_segments: 100,
            compactness: 10.0,
            iterations: 10,
        }
    }
}

impl SlicParams {
    pub fn validate(&self) -> Result<()> {
        if self.target_segments == 0 {
            return Err(Error::param("SLIC needs at least one segment"));
        }
        if !(self.compactness > 0.0 && self.compactness.is_finite()) {
            return Err(Error::param(format!("compactness must be positive, got {}", self.compactness)));
        }
        if self.iterations == 0 {
            return Err(Error::param("SLIC needs at least one iteration"));
        }
        Ok(())
    }
}

/// Colors are compared in 8-bit units so the conventional compactness range
/// (around 10) balances color against position.
const COLOR_SCALE: f64 = 255.0;

#[derive(Clone, Copy, Debug)]
struct Center {
    y: f64,
    x: f64,
    rgb: [f64; 3],
}

/// Seed grid `ny × nx` with `ny·nx ≤ k`, spacing as square as possible.
fn seed_grid(h: usize, w: usize, k: usize) -> (usize, usize) {
    let s = ((h * w) as f64 / k as f64).sqrt();
    let mut nx = ((w as f64 / s).round() as usize).clamp(1, w);
    let mut ny = ((h as f64 / s).round() as usize).clamp(1, h);
    while nx * ny > k {
        if w as f64 / nx as f64 <= h as f64 / ny as f64 && nx > 1 {
            nx -= 1;
        } else if ny > 1 {
            ny -= 1;
        } else {
            nx -= 1;
        }
    }
    loop {
        let grow_x = (nx + 1) * ny <= k && nx < w;
        let grow_y = nx * (ny + 1) <= k && ny < h;
        match (grow_x, grow_y) {
            (true, true) => {
                if w as f64 / nx as f64 >= h as f64 / ny as f64 {
                    nx += 1;
                } else {
                    ny += 1;
                }
            }
            (true, false) => nx += 1,
            (false, true) => ny += 1,
            (false, false) => break,
        }
    }
    (ny, nx)
}

fn pixel(image: &Tensor, p: usize) -> [f64; 3] {
    let d = &image.data()[p * 3..p * 3 + 3];
    [d[0] * COLOR_SCALE, d[1] * COLOR_SCALE, d[2] * COLOR_SCALE]
}

/// Superpixels with at most `target_segments` labels, each 4-connected.
pub fn slic_superpixels(image: &Tensor, p: &SlicParams) -> Result<SegmentMap> {
    p.validate()?;
    let [h, w, 3] = *image.shape() else {
        return Err(Error::dim(format!("SLIC expects h×w×3, got {:?}", image.shape())));
    };
    if p.target_segments > h * w {
        return Err(Error::param(format!(
            "{} segments requested for {} pixels",
            p.target_segments,
            h * w
        )));
    }
    let (ny, nx) = seed_grid(h, w, p.target_segments);
    let (sy, sx) = (h as f64 / ny as f64, w as f64 / nx as f64);
    let mut centers: Vec<Center> = (0..ny * nx)
        .map(|i| {
            let y = ((i / nx) as f64 + 0.5) * sy;
            let x = ((i % nx) as f64 + 0.5) * sx;
            let (py, px) = ((y as usize).min(h - 1), (x as usize).min(w - 1));
            Center {
                y,
                x,
                rgb: pixel(image, py * w + px),
            }
        })
        .collect();

    let s = ((h * w) as f64 / p.target_segments as f64).sqrt();
    let spatial_weight = (p.compactness / s).powi(2);
    let reach = s.max(sy).max(sx).ceil() as isize;
    let mut labels = vec![u32::MAX; h * w];
    let mut dist = vec![f64::INFINITY; h * w];

    for _ in 0..p.iterations {
        dist.fill(f64::INFINITY);
        for (k, c) in centers.iter().enumerate() {
            let (cy, cx) = (c.y.round() as isize, c.x.round() as isize);
            let ys = (cy - reach).max(0) as usize..((cy + reach + 1).min(h as isize)) as usize;
            for y in ys {
                let xs = (cx - reach).max(0) as usize..((cx + reach + 1).min(w as isize)) as usize;
                for x in xs {
                    let q = y * w + x;
                    let rgb = pixel(image, q);
                    let dc: f64 = (0..3).map(|i| (rgb[i] - c.rgb[i]).powi(2)).sum();
                    let ds = (y as f64 - c.y).powi(2) + (x as f64 - c.x).powi(2);
                    let d = dc + ds * spatial_weight;
                    if d < dist[q] {
                        dist[q] = d;
                        labels[q] = k as u32;
                    }
                }
            }
        }
        let mut acc = vec![[0.0f64; 6]; centers.len()];
        for (q, &l) in labels.iter().enumerate() {
            if l == u32::MAX {
                continue;
            }
            let rgb = pixel(image, q);
            let a = &mut acc[l as usize];
            a[0] += (q / w) as f64;
            a[1] += (q % w) as f64;
            a[2] += rgb[0];
            a[3] += rgb[1];
            a[4] += rgb[2];
            a[5] += 1.0;
        }
        for (c, a) in centers.iter_mut().zip(&acc) {
            if a[5] > 0.0 {
                c.y = a[0] / a[5];
                c.x = a[1] / a[5];
                c.rgb = [a[2] / a[5], a[3] / a[5], a[4] / a[5]];
            }
        }
    }
    debug_assert!(labels.iter().all(|&l| l != u32::MAX));
    let merged = enforce_connectivity(h, w, &labels);
    SegmentMap::from_labels(h, w, merged)
}

/// Keep the largest 4-connected piece of every label and merge each other
/// piece into the neighbouring region it shares the longest border with.
fn enforce_connectivity(h: usize, w: usize, labels: &[u32]) -> Vec<u32> {
    // connected components
    let mut comp = vec![usize::MAX; h * w];
    let mut pixels: Vec<Vec<usize>> = Vec::new();
    let mut comp_label = Vec::new();
    let mut stack = Vec::new();
    for start in 0..h * w {
        if comp[start] != usize::MAX {
            continue;
        }
        let id = pixels.len();
        let l = labels[start];
        let mut members = Vec::new();
        comp[start] = id;
        stack.push(start);
        while let Some(p) = stack.pop() {
            members.push(p);
            for q in neighbours(p, h, w) {
                if comp[q] == usize::MAX && labels[q] == l {
                    comp[q] = id;
                    stack.push(q);
                }
            }
        }
        pixels.push(members);
        comp_label.push(l);
    }
    let n = pixels.len();
    let mut kept = vec![false; n];
    let mut largest: std::collections::HashMap<u32, usize> = std::collections::HashMap::new();
    for id in 0..n {
        let e = largest.entry(comp_label[id]).or_insert(id);
        if pixels[id].len() > pixels[*e].len() {
            *e = id;
        }
    }
    for &id in largest.values() {
        kept[id] = true;
    }

    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut a: usize) -> usize {
        while parent[a] != a {
            parent[a] = parent[parent[a]];
            a = parent[a];
        }
        a
    }
    let mut fragments: Vec<usize> = (0..n).filter(|&i| !kept[i]).collect();
    fragments.sort_by_key(|&i| (pixels[i].len(), i));
    for f in fragments {
        let root_f = find(&mut parent, f);
        let mut border: std::collections::BTreeMap<usize, usize> = Default::default();
        for &p in &pixels[f] {
            for q in neighbours(p, h, w) {
                let r = find(&mut parent, comp[q]);
                if r != root_f {
                    *border.entry(r).or_default() += 1;
                }
            }
        }
        // longest border wins, lowest id on ties
        if let Some((&target, _)) = border.iter().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0))) {
            parent[root_f] = target;
        }
    }
    (0..h * w)
        .map(|p| comp_label[find(&mut parent, comp[p])])
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_grid_shapes() {
        assert_eq!(seed_grid(20, 20, 2), (1, 2));
        assert_eq!(seed_grid(20, 20, 4), (2, 2));
        assert_eq!(seed_grid(64, 64, 100), (10, 10));
        assert_eq!(seed_grid(10, 40, 4), (1, 4));
        assert_eq!(seed_grid(5, 5, 1), (1, 1));
        for k in 1..60 {
            let (a, b) = seed_grid(17, 23, k);
            assert!(a * b <= k);
        }
    }

    #[test]
    fn constant_image_quarters() {
        let img = Tensor::full(&[20, 24, 3], 0.4);
        let p = SlicParams {
            target_segments: 4,
            ..Default::default()
        };
        let s = slic_superpixels(&img, &p).unwrap();
        assert_eq!(s.num_segments, 4);
        let quarter = (20 * 24) as f64 / 4.0;
        for size in s.segment_sizes() {
            assert!((size as f64 - quarter).abs() <= 0.2 * quarter, "{size}");
        }
        assert!(s.is_connected());
    }

    #[test]
    fn single_segment() {
        let img = Tensor::from_fn(&[7, 9, 3], |i| (i % 5) as f64 / 5.0);
        let p = SlicParams {
            target_segments: 1,
            ..Default::default()
        };
        let s = slic_superpixels(&img, &p).unwrap();
        assert_eq!(s.num_segments, 1);
    }

    #[test]
    fn too_many_segments_rejected() {
        let img = Tensor::full(&[2, 2, 3], 0.0);
        let p = SlicParams {
            target_segments: 5,
            ..Default::default()
        };
        assert!(matches!(slic_superpixels(&img, &p), Err(Error::Parameter(_))));
    }

    #[test]
    fn connectivity_merges_fragments() {
        // label 0 split in two pieces; the right one is smaller
        let labels = vec![
            0, 1, 1, 0, //
            0, 1, 1, 1,
        ];
        let out = enforce_connectivity(2, 4, &labels);
        assert_eq!(out, vec![0, 1, 1, 1, 0, 1, 1, 1]);
    }
}
