//! Pseudo-anomaly generators. Every generator returns the corrupted image
//! together with the exact set of pixels whose value changed.

use rand::seq::index;
use rand::Rng;
use rcad_tensor::Tensor;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AnomalyKind {
    ColorBlock,
    CopyPaste,
    Lines,
    None,
}

impl AnomalyKind {
    pub const GENERATED: [AnomalyKind; 3] =
        [AnomalyKind::ColorBlock, AnomalyKind::CopyPaste, AnomalyKind::Lines];

    pub fn name(self) -> &'static str {
        match self {
            AnomalyKind::ColorBlock => "color_block",
            AnomalyKind::CopyPaste => "copy_paste",
            AnomalyKind::Lines => "lines",
            AnomalyKind::None => "none",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PseudoAnomaly {
    /// C×H×W, values in [0,1].
    pub corrupted: Tensor,
    /// 1×H×W, 1 where any channel differs from the original.
    pub mask: Tensor,
    pub kind: AnomalyKind,
}

impl PseudoAnomaly {
    pub fn mask_pixels(&self) -> usize {
        self.mask.data().iter().filter(|&&m| m > 0.0).count()
    }
}

/// Sizes are given for `reference_resolution`-pixel-high images and scaled
/// linearly to the actual height.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    pub block_sizes: Vec<usize>,
    pub reference_resolution: usize,
    /// Fraction of block pixels recolored, drawn uniformly from this range.
    pub coverage: (f32, f32),
    pub line_count: (usize, usize),
    pub line_length: (f32, f32),
    pub line_width: (usize, usize),
    pub clean_probability: f32,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            block_sizes: vec![32, 64, 128],
            reference_resolution: 1024,
            coverage: (0.0, 1.0),
            line_count: (1, 4),
            line_length: (50.0, 150.0),
            line_width: (1, 3),
            clean_probability: 0.0,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("augment: {m}")));
        if self.block_sizes.is_empty() || self.block_sizes.contains(&0) {
            return bad("block sizes must be non-empty and positive");
        }
        if self.reference_resolution == 0 {
            return bad("reference resolution must be positive");
        }
        let (c0, c1) = self.coverage;
        if !(0.0..=1.0).contains(&c0) || !(0.0..=1.0).contains(&c1) || c0 > c1 {
            return bad("coverage must be an ordered range inside [0,1]");
        }
        if self.line_count.0 == 0 || self.line_count.0 > self.line_count.1 {
            return bad("line count must be an ordered positive range");
        }
        if !(self.line_length.0 > 0.0 && self.line_length.0 <= self.line_length.1) {
            return bad("line length must be an ordered positive range");
        }
        if self.line_width.0 == 0 || self.line_width.0 > self.line_width.1 {
            return bad("line width must be an ordered positive range");
        }
        if !(0.0..=1.0).contains(&self.clean_probability) {
            return bad("clean probability must lie in [0,1]");
        }
        Ok(())
    }

    fn scale(&self, height: usize) -> f32 {
        height as f32 / self.reference_resolution as f32
    }

    /// Block sizes in pixels for an image of the given height (at least 2).
    pub fn scaled_block_sizes(&self, height: usize) -> Vec<usize> {
        let s = self.scale(height);
        self.block_sizes
            .iter()
            .map(|&b| ((b as f32 * s).round() as usize).max(2))
            .collect()
    }

    pub fn scaled_line_length(&self, height: usize) -> (f32, f32) {
        let s = self.scale(height);
        (
            (self.line_length.0 * s).max(2.0),
            (self.line_length.1 * s).max(2.0),
        )
    }
}

fn dims(img: &Tensor) -> Result<(usize, usize, usize)> {
    match *img.shape() {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(Error::Usage(format!("expected a C×H×W image, got {:?}", img.shape()))),
    }
}

fn finish(original: &Tensor, corrupted: Tensor, kind: AnomalyKind) -> Result<PseudoAnomaly> {
    let mask = diff_mask(original, &corrupted)?;
    Ok(PseudoAnomaly {
        corrupted,
        mask,
        kind,
    })
}

/// 1×H×W mask of pixels where any channel of `a` and `b` differs.
pub fn diff_mask(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (c, h, w) = dims(a)?;
    if a.shape() != b.shape() {
        return Err(Error::Usage(format!("diff of {:?} and {:?}", a.shape(), b.shape())));
    }
    let plane = h * w;
    let mut m = vec![0.0f32; plane];
    for ch in 0..c {
        let (pa, pb) = (&a.data()[ch * plane..][..plane], &b.data()[ch * plane..][..plane]);
        for (i, mi) in m.iter_mut().enumerate() {
            if pa[i] != pb[i] {
                *mi = 1.0;
            }
        }
    }
    Ok(Tensor::new(&[1, h, w], m)?)
}

fn quantized<R: Rng + ?Sized>(rng: &mut R) -> f32 {
    rng.gen_range(0..=255u32) as f32 / 255.0
}

/// Axis-aligned square `size × size` with top-left corner `(y, x)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rect {
    pub y: usize,
    pub x: usize,
    pub size: usize,
}

impl Rect {
    pub fn overlaps(&self, o: &Rect) -> bool {
        self.y < o.y + o.size && o.y < self.y + self.size && self.x < o.x + o.size && o.x < self.x + self.size
    }
}

fn random_rect<R: Rng + ?Sized>(rng: &mut R, h: usize, w: usize, size: usize) -> Rect {
    Rect {
        y: rng.gen_range(0..=h - size),
        x: rng.gen_range(0..=w - size),
        size,
    }
}

/// Recolors a `coverage` fraction of the pixels of one random block with a
/// single random color.
pub fn inject_color_block<R: Rng + ?Sized>(img: &Tensor, rng: &mut R, cfg: &AugmentConfig) -> Result<PseudoAnomaly> {
    let (c, h, w) = dims(img)?;
    let sizes = cfg.scaled_block_sizes(h);
    let size = sizes[rng.gen_range(0..sizes.len())].min(h).min(w);
    let rect = random_rect(rng, h, w, size);
    let coverage = rng.gen_range(cfg.coverage.0..=cfg.coverage.1);
    let count = (coverage * (size * size) as f32).round() as usize;
    let color: Vec<f32> = (0..c).map(|_| quantized(rng)).collect();
    let mut out = img.clone();
    let data = out.data_mut();
    for k in index::sample(rng, size * size, count.min(size * size)) {
        let (y, x) = (rect.y + k / size, rect.x + k % size);
        for (ch, &v) in color.iter().enumerate() {
            data[(ch * h + y) * w + x] = v;
        }
    }
    finish(img, out, AnomalyKind::ColorBlock)
}

/// Picks disjoint source and destination squares of side `size`. The size
/// is capped at a third of the shorter side so a disjoint pair always exists.
pub fn copy_paste_regions<R: Rng + ?Sized>(rng: &mut R, h: usize, w: usize, size: usize) -> (Rect, Rect) {
    let size = size.min(h.min(w) / 3).max(1);
    let src = random_rect(rng, h, w, size);
    loop {
        let dst = random_rect(rng, h, w, size);
        if !src.overlaps(&dst) {
            return (src, dst);
        }
    }
}

/// Copies a random patch onto a disjoint location of the same image.
pub fn inject_copy_paste<R: Rng + ?Sized>(img: &Tensor, rng: &mut R, cfg: &AugmentConfig) -> Result<PseudoAnomaly> {
    let (c, h, w) = dims(img)?;
    if h < 3 || w < 3 {
        return Err(Error::Usage(format!("copy-paste needs at least 3×3 pixels, got {h}×{w}")));
    }
    let sizes = cfg.scaled_block_sizes(h);
    let size = sizes[rng.gen_range(0..sizes.len())];
    let (src, dst) = copy_paste_regions(rng, h, w, size);
    let mut out = img.clone();
    let (from, to) = (img.data(), out.data_mut());
    for ch in 0..c {
        for dy in 0..src.size {
            let s = (ch * h + src.y + dy) * w + src.x;
            let d = (ch * h + dst.y + dy) * w + dst.x;
            to[d..d + src.size].copy_from_slice(&from[s..s + src.size]);
        }
    }
    finish(img, out, AnomalyKind::CopyPaste)
}

/// A crack-like polyline of unit-length steps.
#[derive(Clone, Debug, PartialEq)]
pub struct Stroke {
    /// (y, x) vertices.
    pub points: Vec<(f32, f32)>,
    pub width: usize,
    pub intensity: f32,
}

impl Stroke {
    pub fn length(&self) -> f32 {
        self.points
            .windows(2)
            .map(|p| ((p[1].0 - p[0].0).powi(2) + (p[1].1 - p[0].1).powi(2)).sqrt())
            .sum()
    }
}

/// Random-walk stroke that turns slightly at every step and bounces off the
/// image border, so its length is never cut short by clipping.
pub fn sample_stroke<R: Rng + ?Sized>(rng: &mut R, cfg: &AugmentConfig, h: usize, w: usize) -> Stroke {
    let (lo, hi) = cfg.scaled_line_length(h);
    let length = if lo < hi { rng.gen_range(lo..=hi) } else { lo };
    let width = rng.gen_range(cfg.line_width.0..=cfg.line_width.1);
    let intensity = if rng.gen_bool(0.5) {
        rng.gen_range(0..=38u32) as f32 / 255.0
    } else {
        rng.gen_range(217..=255u32) as f32 / 255.0
    };
    let (ymax, xmax) = ((h - 1) as f32, (w - 1) as f32);
    let mut p = (rng.gen_range(0.0..=ymax), rng.gen_range(0.0..=xmax));
    let mut theta = rng.gen_range(0.0..std::f32::consts::TAU);
    let mut points = vec![p];
    let mut remaining = length;
    while remaining > 1e-4 {
        let step = remaining.min(1.0);
        theta += rng.gen_range(-0.35..0.35);
        let (mut dy, mut dx) = (theta.sin() * step, theta.cos() * step);
        let flip_y = !(0.0..=ymax).contains(&(p.0 + dy));
        let flip_x = !(0.0..=xmax).contains(&(p.1 + dx));
        if flip_y {
            dy = -dy;
        }
        if flip_x {
            dx = -dx;
        }
        if flip_y || flip_x {
            theta = dy.atan2(dx);
        }
        p = ((p.0 + dy).clamp(0.0, ymax), (p.1 + dx).clamp(0.0, xmax));
        points.push(p);
        remaining -= step;
    }
    Stroke {
        points,
        width,
        intensity,
    }
}

fn draw_stroke(data: &mut [f32], c: usize, h: usize, w: usize, stroke: &Stroke) {
    let lo = -((stroke.width as isize - 1) / 2);
    let hi = stroke.width as isize / 2;
    for pair in stroke.points.windows(2) {
        // Half-pixel sampling keeps diagonal steps connected.
        for t in [0.0f32, 0.5] {
            let y = pair[0].0 + t * (pair[1].0 - pair[0].0);
            let x = pair[0].1 + t * (pair[1].1 - pair[0].1);
            stamp(data, c, h, w, y.round() as isize, x.round() as isize, lo, hi, stroke.intensity);
        }
    }
    if let Some(&(y, x)) = stroke.points.last() {
        stamp(data, c, h, w, y.round() as isize, x.round() as isize, lo, hi, stroke.intensity);
    }
}

#[allow(clippy::too_many_arguments)]
fn stamp(data: &mut [f32], c: usize, h: usize, w: usize, cy: isize, cx: isize, lo: isize, hi: isize, v: f32) {
    for y in (cy + lo)..=(cy + hi) {
        for x in (cx + lo)..=(cx + hi) {
            if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                continue;
            }
            for ch in 0..c {
                data[(ch * h + y as usize) * w + x as usize] = v;
            }
        }
    }
}

/// Draws 1–4 dark or light strokes.
pub fn inject_lines<R: Rng + ?Sized>(img: &Tensor, rng: &mut R, cfg: &AugmentConfig) -> Result<PseudoAnomaly> {
    let (c, h, w) = dims(img)?;
    let count = rng.gen_range(cfg.line_count.0..=cfg.line_count.1);
    let mut out = img.clone();
    for _ in 0..count {
        let stroke = sample_stroke(rng, cfg, h, w);
        draw_stroke(out.data_mut(), c, h, w, &stroke);
    }
    finish(img, out, AnomalyKind::Lines)
}

/// Returns the image untouched with probability `clean_probability`,
/// otherwise applies one of the three generators chosen uniformly.
pub fn sample<R: Rng + ?Sized>(img: &Tensor, rng: &mut R, cfg: &AugmentConfig) -> Result<PseudoAnomaly> {
    if cfg.clean_probability > 0.0 && rng.gen::<f32>() < cfg.clean_probability {
        return finish(img, img.clone(), AnomalyKind::None);
    }
    match AnomalyKind::GENERATED[rng.gen_range(0..3)] {
        AnomalyKind::ColorBlock => inject_color_block(img, rng, cfg),
        AnomalyKind::CopyPaste => inject_copy_paste(img, rng, cfg),
        _ => inject_lines(img, rng, cfg),
    }
}
