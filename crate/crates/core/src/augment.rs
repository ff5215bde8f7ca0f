//! Two-view augmentation with exact, invertible geometry.
//!
//! A view is produced from a square source image in two steps: a square crop
//! is resized (nearest neighbour) to the output size, giving the *canonical*
//! frame, and an element of the dihedral group (horizontal flip followed by
//! quarter turns) maps the canonical frame onto the view. All maps act on
//! integer pixel indices, so no interpolation is involved anywhere.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::{Grid, Mask, RgbImage};

/// Square crop in source pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropBox {
    pub x0: usize,
    pub y0: usize,
    pub side: usize,
}

impl CropBox {
    pub fn area(&self) -> usize {
        self.side * self.side
    }

    pub fn intersection(&self, other: &CropBox) -> usize {
        let span = |a0: usize, a1: usize, b0: usize, b1: usize| a1.min(b1).saturating_sub(a0.max(b0));
        span(self.x0, self.x0 + self.side, other.x0, other.x0 + other.side)
            * span(self.y0, self.y0 + self.side, other.y0, other.y0 + other.side)
    }

    /// Intersection area over the smaller crop area.
    pub fn overlap(&self, other: &CropBox) -> f64 {
        self.intersection(other) as f64 / self.area().min(other.area()) as f64
    }

    fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x < self.x0 + self.side && y >= self.y0 && y < self.y0 + self.side
    }
}

/// `p ↦ R^quarter_turns · F^flip · p` on an `S × S` grid, where `F` mirrors
/// horizontally and `R` rotates by 90° clockwise.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct Orientation {
    pub flip: bool,
    pub quarter_turns: u8,
}

impl Orientation {
    pub const IDENTITY: Orientation = Orientation { flip: false, quarter_turns: 0 };

    pub fn new(flip: bool, quarter_turns: u8) -> Self {
        Orientation { flip, quarter_turns: quarter_turns % 4 }
    }

    pub fn apply(self, x: usize, y: usize, size: usize) -> (usize, usize) {
        let (mut x, mut y) = (x, y);
        if self.flip {
            x = size - 1 - x;
        }
        for _ in 0..self.quarter_turns {
            (x, y) = (size - 1 - y, x);
        }
        (x, y)
    }

    /// `self` applied after `first`.
    pub fn after(self, first: Orientation) -> Orientation {
        if self.flip {
            Orientation::new(!first.flip, (self.quarter_turns + 4 - first.quarter_turns) % 4)
        } else {
            Orientation::new(first.flip, self.quarter_turns + first.quarter_turns)
        }
    }

    pub fn inverse(self) -> Orientation {
        if self.flip {
            self
        } else {
            Orientation::new(false, 4 - self.quarter_turns)
        }
    }
}

/// How one view was cut from its source.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Geometry {
    pub crop: CropBox,
    pub orientation: Orientation,
    /// Side of the view in pixels.
    pub size: usize,
}

impl Geometry {
    pub fn identity(size: usize) -> Self {
        Geometry { crop: CropBox { x0: 0, y0: 0, side: size }, orientation: Orientation::IDENTITY, size }
    }

    /// Source coordinate of canonical index `c` along one axis with crop origin `origin`.
    fn source_axis(&self, origin: usize, c: usize) -> usize {
        origin + (2 * c + 1) * self.crop.side / (2 * self.size)
    }

    fn canonical_to_source(&self, cx: usize, cy: usize) -> (usize, usize) {
        (self.source_axis(self.crop.x0, cx), self.source_axis(self.crop.y0, cy))
    }

    /// Source pixel shown at view pixel `(x, y)`.
    pub fn view_to_source(&self, x: usize, y: usize) -> (usize, usize) {
        let (cx, cy) = self.orientation.inverse().apply(x, y, self.size);
        self.canonical_to_source(cx, cy)
    }

    /// Canonical index along one axis whose source pixel is `s`, choosing the one
    /// nearest to the continuous position `target` (in units of `2·S` per crop side).
    fn canonical_for(&self, origin: usize, s: usize, target_num: usize, target_den: usize) -> usize {
        // canonical center c + 1/2 sits at source position origin + (2c+1)·side/(2S)
        let guess = ((target_num as f64 / target_den as f64 - origin as f64) * self.size as f64 / self.crop.side as f64)
            .floor()
            .clamp(0.0, (self.size - 1) as f64) as usize;
        let lo = guess.saturating_sub(2);
        let hi = (guess + 2).min(self.size - 1);
        (lo..=hi)
            .filter(|&c| self.source_axis(origin, c) == s)
            .min_by_key(|&c| {
                let num = (2 * c + 1) * self.crop.side * target_den + 2 * self.size * origin * target_den;
                let t = target_num * 2 * self.size;
                num.abs_diff(t)
            })
            .or_else(|| (0..self.size).find(|&c| self.source_axis(origin, c) == s))
            .expect("every source pixel inside the crop has a canonical preimage")
    }

    pub fn render<P: Copy>(&self, source: &Grid<P>) -> Grid<P> {
        Grid::from_fn(self.size, self.size, |x, y| {
            let (sx, sy) = self.view_to_source(x, y);
            source.get(sx, sy)
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugConfig {
    /// Master switch; when false both views are the source resized to `out_size`.
    pub enabled: bool,
    /// Range of crop area over source area.
    pub crop_scale: (f64, f64),
    pub flip_prob: f64,
    /// Allowed rotations in quarter turns.
    pub rotations: Vec<u8>,
    /// Minimum crop overlap (intersection over the smaller crop).
    pub min_overlap: f64,
    pub out_size: usize,
}

impl AugConfig {
    pub fn new(out_size: usize) -> Self {
        AugConfig { enabled: true, crop_scale: (0.5, 1.0), flip_prob: 0.5, rotations: vec![0, 1, 2, 3], min_overlap: 0.4, out_size }
    }

    pub fn disabled(out_size: usize) -> Self {
        AugConfig { enabled: false, ..Self::new(out_size) }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViewPair {
    pub view_u: RgbImage,
    pub view_v: RgbImage,
    pub geom_u: Geometry,
    pub geom_v: Geometry,
}

pub const MAX_RESAMPLES: usize = 100;

fn sample_geometry(rng: &mut ChaCha8Rng, src: usize, cfg: &AugConfig) -> Geometry {
    let lo = ((cfg.crop_scale.0.max(0.0).sqrt() * src as f64).ceil() as usize).clamp(1, src);
    let hi = ((cfg.crop_scale.1.max(0.0).sqrt() * src as f64).floor() as usize).clamp(lo, src);
    let side = rng.random_range(lo..=hi);
    let x0 = rng.random_range(0..=src - side);
    let y0 = rng.random_range(0..=src - side);
    let flip = rng.random_bool(cfg.flip_prob.clamp(0.0, 1.0));
    let turns = if cfg.rotations.is_empty() { 0 } else { cfg.rotations[rng.random_range(0..cfg.rotations.len())] };
    Geometry { crop: CropBox { x0, y0, side }, orientation: Orientation::new(flip, turns), size: cfg.out_size }
}

/// Samples two views of a square `source` whose crops overlap by at least `min_overlap`.
pub fn augment_two_views(source: &RgbImage, seed: u64, cfg: &AugConfig) -> Result<ViewPair> {
    let src = source.width();
    if source.height() != src || src == 0 {
        return Err(Error::Augmentation("source image must be square".into()));
    }
    if cfg.out_size == 0 {
        return Err(Error::Augmentation("output size must be positive".into()));
    }
    if cfg.out_size < src && cfg.enabled {
        return Err(Error::Augmentation(format!("views of {} px cannot be upsampled crops of a {src} px source", cfg.out_size)));
    }
    let (geom_u, geom_v) = if !cfg.enabled {
        let g = Geometry { crop: CropBox { x0: 0, y0: 0, side: src }, orientation: Orientation::IDENTITY, size: cfg.out_size };
        (g, g)
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut found = None;
        for _ in 0..MAX_RESAMPLES {
            let u = sample_geometry(&mut rng, src, cfg);
            let v = sample_geometry(&mut rng, src, cfg);
            if u.crop.overlap(&v.crop) >= cfg.min_overlap {
                found = Some((u, v));
                break;
            }
        }
        found.ok_or_else(|| {
            Error::Augmentation(format!("no crop pair with overlap ≥ {} after {MAX_RESAMPLES} draws", cfg.min_overlap))
        })?
    };
    Ok(ViewPair { view_u: geom_u.render(source), view_v: geom_v.render(source), geom_u, geom_v })
}

/// Transfers a per-pixel map from view A to view B through source coordinates.
///
/// Pixel `b` of view B shows source pixel `s`; if `s` lies in A's crop, the
/// value is read from the view-A pixel showing `s` whose center is closest to
/// `b`'s center. Returns the warped map and a 0/1 validity mask.
pub fn warp_mask(mask: &Mask, a: &Geometry, b: &Geometry) -> (Mask, Mask) {
    let n = b.size;
    let mut out = Mask::new(n, n, 0);
    let mut valid = Mask::new(n, n, 0);
    for y in 0..n {
        for x in 0..n {
            let (cx, cy) = b.orientation.inverse().apply(x, y, n);
            let (sx, sy) = b.canonical_to_source(cx, cy);
            if !a.crop.contains(sx, sy) {
                continue;
            }
            // continuous source position of b's center: origin + (2c+1)·side / (2S)
            let den = 2 * b.size;
            let tx = b.crop.x0 * den + (2 * cx + 1) * b.crop.side;
            let ty = b.crop.y0 * den + (2 * cy + 1) * b.crop.side;
            let ax = a.canonical_for(a.crop.x0, sx, tx, den);
            let ay = a.canonical_for(a.crop.y0, sy, ty, den);
            let (vx, vy) = a.orientation.apply(ax, ay, a.size);
            out.set(x, y, mask.get(vx, vy));
            valid.set(x, y, 1);
        }
    }
    (out, valid)
}
