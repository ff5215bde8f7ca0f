//! Synthetic image–caption corpus with exact segmentation masks.
//!
//! Each scene holds one or two non-overlapping shapes of the same class on a
//! textured background. Captions read `a <color> <class> on <background>`.
//! Mask ids are `class index + 1`, with 0 for background.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::{read_pgm, read_ppm, write_pgm, write_ppm, Mask, RgbImage};
use crate::tensor_file::write_atomic;

/// Shape kinds the rasterizer knows; class names must come from this list.
pub const SHAPE_KINDS: [&str; 4] = ["circle", "square", "triangle", "diamond"];
pub const DEFAULT_CLASSES: [&str; 3] = ["circle", "square", "triangle"];

pub const COLORS: [(&str, [u8; 3]); 6] = [
    ("red", [220, 40, 40]),
    ("green", [40, 180, 60]),
    ("blue", [50, 80, 220]),
    ("yellow", [230, 210, 40]),
    ("purple", [150, 60, 190]),
    ("orange", [240, 140, 30]),
];

pub const BACKGROUNDS: [(&str, [u8; 3]); 4] = [
    ("gray", [128, 128, 128]),
    ("sand", [196, 182, 150]),
    ("slate", [70, 80, 92]),
    ("snow", [232, 234, 238]),
];

/// Smallest canvas on which two shapes still fit.
pub const MIN_CANVAS: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct Shape {
    /// Index into the class list the scene was generated with.
    pub class: usize,
    pub center: (f64, f64),
    /// Radius for circles, half-extent for the polygons.
    pub size: f64,
    pub color: usize,
}

impl Shape {
    /// Whether the pixel whose center is `(px, py)` lies inside the shape.
    pub fn contains(&self, kind: &str, px: f64, py: f64) -> bool {
        let (dx, dy) = (px - self.center.0, py - self.center.1);
        let s = self.size;
        match kind {
            "circle" => dx * dx + dy * dy <= s * s,
            "square" => dx.abs() <= s && dy.abs() <= s,
            "diamond" => dx.abs() + dy.abs() <= s,
            "triangle" => dy >= -s && dy <= s && dx.abs() <= (dy + s) / 2.0,
            _ => false,
        }
    }

    fn bounds(&self) -> (f64, f64, f64, f64) {
        let (cx, cy) = self.center;
        (cx - self.size, cy - self.size, cx + self.size, cy + self.size)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub image: RgbImage,
    pub mask: Mask,
    pub shapes: Vec<Shape>,
    pub background: usize,
    pub caption: String,
}

fn check_classes(classes: &[String]) -> Result<()> {
    if classes.is_empty() {
        return Err(Error::config("class set is empty"));
    }
    if classes.len() > 254 {
        return Err(Error::config("at most 254 classes fit an 8-bit mask"));
    }
    for (i, c) in classes.iter().enumerate() {
        if !SHAPE_KINDS.contains(&c.as_str()) {
            return Err(Error::config(format!("unknown shape class '{c}' (known: {})", SHAPE_KINDS.join(", "))));
        }
        if classes[..i].contains(c) {
            return Err(Error::config(format!("class '{c}' listed twice")));
        }
    }
    Ok(())
}

fn texture(bg: usize, x: usize, y: usize, rng: &mut impl Rng) -> [u8; 3] {
    let base = BACKGROUNDS[bg].1;
    let pattern: i32 = match bg {
        2 => if (x + y) / 3 % 2 == 0 { 14 } else { -14 },
        3 => if x % 4 == 1 && y % 4 == 1 { -40 } else { 0 },
        _ => 0,
    };
    let noise: i32 = rng.random_range(-12..=12);
    base.map(|c| (c as i32 + pattern + noise).clamp(0, 255) as u8)
}

/// Generates one scene on a `canvas × canvas` grid, fully determined by `seed`.
pub fn gen_scene(seed: u64, classes: &[String], canvas: usize) -> Result<Scene> {
    check_classes(classes)?;
    if canvas < MIN_CANVAS {
        return Err(Error::config(format!("canvas {canvas} smaller than {MIN_CANVAS}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = canvas as f64;
    let class = rng.random_range(0..classes.len());
    let background = rng.random_range(0..BACKGROUNDS.len());

    let place = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| {
        let size = rng.random_range(lo..hi);
        let cx = rng.random_range(size + 1.0..n - size - 1.0);
        let cy = rng.random_range(size + 1.0..n - size - 1.0);
        (size, (cx, cy))
    };
    let (size, center) = place(&mut rng, 0.2 * n, 0.3 * n);
    let mut shapes = vec![Shape { class, center, size, color: rng.random_range(0..COLORS.len()) }];
    if rng.random_bool(0.5) {
        for _ in 0..20 {
            let (size, center) = place(&mut rng, 0.12 * n, 0.2 * n);
            let cand = Shape { class, center, size, color: rng.random_range(0..COLORS.len()) };
            let (a, b) = (shapes[0].bounds(), cand.bounds());
            let apart = a.2 + 1.0 < b.0 || b.2 + 1.0 < a.0 || a.3 + 1.0 < b.1 || b.3 + 1.0 < a.1;
            if apart {
                shapes.push(cand);
                break;
            }
        }
    }

    let mut image = RgbImage::new(canvas, canvas, [0; 3]);
    let mut mask = Mask::new(canvas, canvas, 0);
    for y in 0..canvas {
        for x in 0..canvas {
            let mut px = texture(background, x, y, &mut rng);
            for s in &shapes {
                if s.contains(&classes[s.class], x as f64 + 0.5, y as f64 + 0.5) {
                    px = COLORS[s.color].1;
                    mask.set(x, y, (s.class + 1) as u8);
                }
            }
            image.set(x, y, px);
        }
    }
    let caption = format!(
        "a {} {} on {}",
        COLORS[shapes[0].color].0, classes[class], BACKGROUNDS[background].0
    );
    Ok(Scene { image, mask, shapes, background, caption })
}

/// Per-pair seed derived from the corpus seed (SplitMix64 finalizer).
pub fn pair_seed(corpus_seed: u64, index: u64) -> u64 {
    let mut z = corpus_seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub seed: u64,
    pub class: String,
}

pub const MANIFEST: &str = "manifest.tsv";
pub const CLASSES_FILE: &str = "classes.txt";

/// Writes `size` pairs under `root` together with `manifest.tsv` and `classes.txt`.
pub fn write_dataset(root: &Path, size: usize, seed: u64, classes: &[String], canvas: usize) -> Result<Vec<ManifestEntry>> {
    check_classes(classes)?;
    fs::create_dir_all(root.join("pairs"))?;
    let entries = (0..size)
        .into_par_iter()
        .map(|i| {
            let id = format!("{i:06}");
            let seed = pair_seed(seed, i as u64);
            let scene = gen_scene(seed, classes, canvas)?;
            let dir = root.join("pairs").join(&id);
            fs::create_dir_all(&dir)?;
            write_ppm(&dir.join("image.ppm"), &scene.image)?;
            write_pgm(&dir.join("mask.pgm"), &scene.mask)?;
            write_atomic(&dir.join("caption.txt"), format!("{}\n", scene.caption).as_bytes())?;
            Ok(ManifestEntry { id, seed, class: classes[scene.shapes[0].class].clone() })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut manifest = String::new();
    for e in &entries {
        writeln!(manifest, "{}\t{}\t{}", e.id, e.seed, e.class).expect("write to string");
    }
    write_atomic(&root.join(MANIFEST), manifest.as_bytes())?;
    write_atomic(&root.join(CLASSES_FILE), format!("{}\n", classes.join("\n")).as_bytes())?;
    Ok(entries)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Pair {
    pub id: String,
    pub image: RgbImage,
    pub mask: Mask,
    pub caption: String,
}

/// A dataset directory as written by [`write_dataset`].
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub classes: Vec<String>,
    pub entries: Vec<ManifestEntry>,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let manifest = root.join(MANIFEST);
        if !manifest.is_file() {
            return Err(Error::DatasetNotFound(root.to_path_buf()));
        }
        let mut entries = Vec::new();
        for (n, line) in fs::read_to_string(&manifest)?.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            let bad = || Error::Format(format!("{}:{}: expected id<TAB>seed<TAB>class", manifest.display(), n + 1));
            if cols.len() != 3 {
                return Err(bad());
            }
            let seed = cols[1].parse().map_err(|_| bad())?;
            entries.push(ManifestEntry { id: cols[0].to_string(), seed, class: cols[2].to_string() });
        }
        let classes_path = root.join(CLASSES_FILE);
        let classes: Vec<String> = if classes_path.is_file() {
            fs::read_to_string(classes_path)?.lines().filter(|l| !l.is_empty()).map(str::to_string).collect()
        } else {
            DEFAULT_CLASSES.iter().map(|s| s.to_string()).collect()
        };
        Ok(Dataset { root: root.to_path_buf(), classes, entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn load(&self, index: usize) -> Result<Pair> {
        let id = self.entries[index].id.clone();
        let dir = self.root.join("pairs").join(&id);
        Ok(Pair {
            image: read_ppm(&dir.join("image.ppm"))?,
            mask: read_pgm(&dir.join("mask.pgm"))?,
            caption: fs::read_to_string(dir.join("caption.txt"))?.trim().to_string(),
            id,
        })
    }

    pub fn load_all(&self) -> Result<Vec<Pair>> {
        (0..self.len()).into_par_iter().map(|i| self.load(i)).collect()
    }
}
