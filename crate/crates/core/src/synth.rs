//! Seeded toy localization corpus: one colored rectangle (class 0) or disc
//! (class 1) on textured noise, with its tight bounding box.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::localize::BBox;
use crate::numerics::Tensor;

pub const RECTANGLE: usize = 0;
pub const DISC: usize = 1;
pub const NUM_SHAPES: usize = 2;
/// Hue band of each class. Disjoint bands make the class visible in every
/// object patch, not only along the outline.
const HUE_BANDS: [(f64, f64); NUM_SHAPES] = [(0.0, 0.4), (0.5, 0.9)];

#[derive(Clone, Debug, PartialEq)]
pub struct SynthExample {
    pub image: Tensor,
    pub class_id: usize,
    pub gt_box: BBox,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthConfig {
    pub count: usize,
    pub side: usize,
    pub seed: u64,
    /// Object extent as a fraction of the side, `[min, max]`.
    pub extent: (f64, f64),
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            count: 500,
            side: 64,
            seed: 0,
            extent: (0.5, 0.8),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.extent;
        if self.count == 0 || self.side < 8 {
            return Err(Error::param(format!(
                "need a positive count and side ≥ 8, got {} and {}",
                self.count, self.side
            )));
        }
        if !(0.0 < lo && lo <= hi && hi < 1.0) {
            return Err(Error::param(format!("extent range ({lo}, {hi}) outside (0,1)")));
        }
        Ok(())
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let c = v * s;
    let x = c * (1.0 - (h6 % 2.0 - 1.0).abs());
    let (r, g, b) = match h6 as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Gray base, two random low-frequency gratings and per-pixel noise.
fn background(side: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let base = rng.random_range(0.35..0.65);
    let waves: Vec<(f64, f64, f64, f64)> = (0..2)
        .map(|_| {
            let theta = rng.random_range(0.0..std::f64::consts::PI);
            let freq = rng.random_range(1.0..4.0) * std::f64::consts::TAU / side as f64;
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            let amp = rng.random_range(0.01..0.03);
            (theta, freq, phase, amp)
        })
        .collect();
    let mut out = vec![0.0; side * side * 3];
    for y in 0..side {
        for x in 0..side {
            let mut v = base;
            for &(theta, freq, phase, amp) in &waves {
                let t = x as f64 * theta.cos() + y as f64 * theta.sin();
                v += amp * (freq * t + phase).sin();
            }
            for c in 0..3 {
                let n = rng.random_range(-0.03..0.03);
                out[(y * side + x) * 3 + c] = (v + n).clamp(0.0, 1.0);
            }
        }
    }
    out
}

fn one_example(side: usize, extent: (f64, f64), class_id: usize, rng: &mut ChaCha8Rng) -> Result<SynthExample> {
    let mut pixels = background(side, rng);
    let (h0, h1) = HUE_BANDS[class_id];
    let color = hsv_to_rgb(
        rng.random_range(h0..h1),
        rng.random_range(0.7..1.0),
        rng.random_range(0.75..1.0),
    );
    let s = side as f64;
    let (lo, hi) = extent;
    let inside: Box<dyn Fn(f64, f64) -> bool>;
    let gt_box = if class_id == RECTANGLE {
        let bw = ((rng.random_range(lo..=hi) * s).round() as usize).max(2);
        let bh = ((rng.random_range(lo..=hi) * s).round() as usize).max(2);
        let x0 = rng.random_range(0..=side - bw);
        let y0 = rng.random_range(0..=side - bh);
        let (fx0, fy0, fx1, fy1) = (x0 as f64, y0 as f64, (x0 + bw) as f64, (y0 + bh) as f64);
        inside = Box::new(move |x, y| x >= fx0 && x < fx1 && y >= fy0 && y < fy1);
        BBox::new(x0, y0, x0 + bw, y0 + bh)?
    } else {
        let d = (rng.random_range(lo..=hi) * s).round().max(3.0);
        let r = d / 2.0;
        let cx = rng.random_range(r..=s - r);
        let cy = rng.random_range(r..=s - r);
        inside = Box::new(move |x, y| (x + 0.5 - cx).powi(2) + (y + 0.5 - cy).powi(2) <= r * r);
        // tight box of the rasterized disc
        let (mut x0, mut y0, mut x1, mut y1) = (side, side, 0, 0);
        for y in 0..side {
            for x in 0..side {
                if inside(x as f64, y as f64) {
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x + 1);
                    y1 = y1.max(y + 1);
                }
            }
        }
        BBox::new(x0, y0, x1, y1)?
    };
    for y in 0..side {
        for x in 0..side {
            if inside(x as f64, y as f64) {
                for c in 0..3 {
                    let n = rng.random_range(-0.04..0.04);
                    pixels[(y * side + x) * 3 + c] = (color[c] + n).clamp(0.0, 1.0);
                }
            }
        }
    }
    Ok(SynthExample {
        image: Tensor::new(vec![side, side, 3], pixels)?,
        class_id,
        gt_box,
    })
}

/// Classes alternate so every prefix is balanced; shapes, colors and
/// textures are drawn from one seeded stream.
pub fn synth_corpus(cfg: &SynthConfig) -> Result<Vec<SynthExample>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    (0..cfg.count)
        .map(|i| one_example(cfg.side, cfg.extent, i % NUM_SHAPES, &mut rng))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corpus_is_seeded_and_balanced() {
        let cfg = SynthConfig {
            count: 6,
            side: 24,
            seed: 5,
            ..Default::default()
        };
        let a = synth_corpus(&cfg).unwrap();
        assert_eq!(a, synth_corpus(&cfg).unwrap());
        assert_eq!(a.iter().filter(|e| e.class_id == DISC).count(), 3);
        for e in &a {
            assert_eq!(e.image.shape(), &[24, 24, 3]);
            assert!(e.gt_box.fits(24, 24));
            assert!(e.image.min() >= 0.0 && e.image.max() <= 1.0);
        }
    }

    #[test]
    fn rectangle_box_is_tight() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let e = one_example(32, (0.3, 0.5), RECTANGLE, &mut rng).unwrap();
        let b = e.gt_box;
        // the box interior differs from the noise outside along every edge
        let px = |x: usize, y: usize| e.image.at(&[y, x, 0]);
        let inner = px(b.x0, b.y0);
        assert!((px(b.x1 - 1, b.y1 - 1) - inner).abs() < 0.1);
    }

    #[test]
    fn hsv_primaries() {
        assert_eq!(hsv_to_rgb(0.0, 1.0, 1.0), [1.0, 0.0, 0.0]);
        let g = hsv_to_rgb(1.0 / 3.0, 1.0, 1.0);
        assert!((g[1] - 1.0).abs() < 1e-12 && g[0].abs() < 1e-12);
    }
}
