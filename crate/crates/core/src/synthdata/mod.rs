//! Procedurally generated toy poster samples.
//!
//! A sample couples a target poster with its three control inputs: a
//! background-style image (same two-color gradient palette as the poster,
//! different layout), a subject image/mask (a solid shape), and a glyph
//! image (text stamped from the 3x5 font) with per-character crops.
//! Generation is a pure function of `(seed, GenSpec)`.

mod font;
mod io;

pub use font::{FontTable, CELL_H, CELL_W, CHARSET};
pub use io::{
    dataset_dir_files, read_dataset, read_manifest, read_pgm, read_ppm, write_dataset, write_pgm,
    write_ppm, DatasetManifest, ManifestEntry,
};

use serde::{Deserialize, Serialize};

use crate::arraymath::RngState;
use crate::error::{Error, Result};

/// Interleaved RGB image, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub h: usize,
    pub w: usize,
    /// len == 3*h*w
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            data: vec![0; 3 * h * w],
        }
    }

    #[inline]
    pub fn px(&self, y: usize, x: usize) -> [u8; 3] {
        let i = 3 * (y * self.w + x);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_px(&mut self, y: usize, x: usize, c: [u8; 3]) {
        let i = 3 * (y * self.w + x);
        self.data[i..i + 3].copy_from_slice(&c);
    }
}

/// Single-channel binary image; values are 0 or 1 in memory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinImage {
    pub h: usize,
    pub w: usize,
    pub data: Vec<u8>,
}

impl BinImage {
    pub fn new(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            data: vec![0; h * w],
        }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.w + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: u8) {
        self.data[y * self.w + x] = v;
    }

    pub fn foreground_fraction(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().filter(|&&v| v != 0).count() as f64 / self.data.len() as f64
    }
}

/// One character cut out of the glyph image.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GlyphCrop {
    /// Crop-local binary bitmap, row-major, extents (h, w) = bbox (h, w).
    pub bitmap: Vec<u8>,
    /// (x, y, w, h) in glyph-image pixels.
    pub bbox: (usize, usize, usize, usize),
    /// Index of the stamp scale in the generation spec's scale list.
    pub font_size_class: usize,
    pub char_id: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

impl ShapeKind {
    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
        }
    }
}

/// Generation recipe; every sample is a pure function of (seed, spec).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenSpec {
    pub height: usize,
    pub width: usize,
    /// Number of candidate palette colors (gradient endpoints, shape fill).
    pub palette_size: usize,
    pub palette_seed: u64,
    /// Gradient quantization levels; both poster and style realize all of them.
    pub quant_levels: usize,
    pub shapes: Vec<ShapeKind>,
    pub text_len_min: usize,
    pub text_len_max: usize,
    /// Allowed stamp scales; index into this list is the font-size class.
    pub scales: Vec<usize>,
    pub text_color: [u8; 3],
}

impl Default for GenSpec {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            palette_size: 6,
            palette_seed: 99,
            quant_levels: 8,
            shapes: vec![ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle],
            text_len_min: 2,
            text_len_max: 4,
            scales: vec![1, 2],
            text_color: [255, 255, 255],
        }
    }
}

// Palette channels stay inside this band so the text color (outside the
// band on at least one channel) can never collide with a background or
// shape pixel.
const PALETTE_LO: u8 = 40;
const PALETTE_HI: u8 = 215;

impl GenSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |field: &str, why: String| {
            Err(Error::contract(format!("generation spec field `{field}`: {why}")))
        };
        if self.height < 8 || self.width < 8 {
            return fail("height/width", "extents must be at least 8".into());
        }
        if self.palette_size < 3 {
            return fail("palette_size", "need at least 3 colors".into());
        }
        if self.quant_levels < 2 {
            return fail("quant_levels", "need at least 2 levels".into());
        }
        if self.shapes.is_empty() {
            return fail("shapes", "must list at least one shape".into());
        }
        if self.text_len_min == 0 || self.text_len_min > self.text_len_max {
            return fail("text_len_min", "need 1 <= min <= max".into());
        }
        if self.scales.is_empty() {
            return fail("scales", "must list at least one scale".into());
        }
        for &s in &self.scales {
            if s == 0 {
                return fail("scales", "scale 0 is not drawable".into());
            }
        }
        let s_min = *self.scales.iter().min().unwrap();
        if (4 * self.text_len_min - 1) * s_min + 2 > self.width
            || font::CELL_H * s_min + 2 > self.height
        {
            return fail(
                "text_len_min",
                format!("minimum text cannot fit a {}x{} canvas", self.height, self.width),
            );
        }
        let tc = self.text_color;
        if (PALETTE_LO..=PALETTE_HI).contains(&tc[0])
            && (PALETTE_LO..=PALETTE_HI).contains(&tc[1])
            && (PALETTE_LO..=PALETTE_HI).contains(&tc[2])
        {
            return fail(
                "text_color",
                format!("must leave the palette band [{PALETTE_LO}, {PALETTE_HI}] on some channel"),
            );
        }
        Ok(())
    }

    /// Candidate colors, deterministic in `palette_seed`.
    pub fn palette(&self) -> Vec<[u8; 3]> {
        let base = RngState::new(self.palette_seed);
        (0..self.palette_size)
            .map(|k| {
                let mut r = base.fork(k as u64);
                let span = (PALETTE_HI - PALETTE_LO) as usize + 1;
                [
                    PALETTE_LO + r.range(span) as u8,
                    PALETTE_LO + r.range(span) as u8,
                    PALETTE_LO + r.range(span) as u8,
                ]
            })
            .collect()
    }

    /// Words the prompt generator can emit; used by the tokenizer's
    /// exhaustive distinctness check.
    pub fn vocabulary(&self) -> Vec<String> {
        let mut v: Vec<String> = ["poster", "shape", "text", "scale"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        for s in &self.shapes {
            v.push(s.name().to_string());
        }
        for c in CHARSET.chars() {
            v.push(c.to_string());
        }
        for &s in &self.scales {
            v.push(s.to_string());
        }
        v.sort();
        v.dedup();
        v
    }
}

/// A complete training sample.
#[derive(Clone, Debug, PartialEq)]
pub struct PosterSample {
    pub poster: RgbImage,
    pub style_image: RgbImage,
    pub subject_image: RgbImage,
    pub subject_mask: BinImage,
    pub glyph_image: BinImage,
    pub crops: Vec<GlyphCrop>,
    pub prompt: String,
    pub seed: u64,
}

impl PosterSample {
    /// Structural invariants: shared extents, crop/bitmap agreement,
    /// subject mask coverage in [0.05, 0.40].
    pub fn validate(&self) -> Result<()> {
        let (h, w) = (self.poster.h, self.poster.w);
        for (name, ih, iw) in [
            ("style_image", self.style_image.h, self.style_image.w),
            ("subject_image", self.subject_image.h, self.subject_image.w),
            ("subject_mask", self.subject_mask.h, self.subject_mask.w),
            ("glyph_image", self.glyph_image.h, self.glyph_image.w),
        ] {
            if (ih, iw) != (h, w) {
                return Err(Error::contract(format!(
                    "sample {}: {name} is {}x{}, poster is {}x{}",
                    self.seed, ih, iw, h, w
                )));
            }
        }
        let frac = self.subject_mask.foreground_fraction();
        if !(0.05..=0.40).contains(&frac) {
            return Err(Error::contract(format!(
                "sample {}: subject mask covers {frac:.3}, outside [0.05, 0.40]",
                self.seed
            )));
        }
        for (i, crop) in self.crops.iter().enumerate() {
            let (x, y, cw, ch) = crop.bbox;
            if x + cw > w || y + ch > h {
                return Err(Error::contract(format!(
                    "sample {}: crop {i} bbox out of bounds",
                    self.seed
                )));
            }
            if crop.bitmap.len() != cw * ch {
                return Err(Error::contract(format!(
                    "sample {}: crop {i} bitmap length {} != {}x{}",
                    self.seed,
                    crop.bitmap.len(),
                    cw,
                    ch
                )));
            }
            for dy in 0..ch {
                for dx in 0..cw {
                    if self.glyph_image.get(y + dy, x + dx) != crop.bitmap[dy * cw + dx] {
                        return Err(Error::contract(format!(
                            "sample {}: crop {i} disagrees with glyph image at ({dx},{dy})",
                            self.seed
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Stamps `text` onto a fresh binary canvas at `origin` with the given
/// nearest-neighbor scale and a one-scale inter-character gap. Returns the
/// glyph image and one crop per character.
pub fn render_glyph_string(
    text: &str,
    origin: (usize, usize),
    scale: usize,
    canvas: (usize, usize),
    scales: &[usize],
) -> Result<(BinImage, Vec<GlyphCrop>)> {
    let font = FontTable::new();
    let (h, w) = canvas;
    let mut img = BinImage::new(h, w);
    let mut crops = Vec::new();
    if text.is_empty() {
        return Ok((img, crops));
    }
    if scale == 0 {
        return Err(Error::contract("glyph scale must be positive"));
    }
    let class = scales
        .iter()
        .position(|&s| s == scale)
        .ok_or_else(|| Error::contract(format!("scale {scale} not in spec scale list")))?;
    let (ox, oy) = origin;
    let cw = CELL_W * scale;
    let ch = CELL_H * scale;
    let advance = (CELL_W + 1) * scale;
    for (i, c) in text.chars().enumerate() {
        let id = font
            .char_id(c)
            .ok_or_else(|| Error::contract(format!("character {c:?} not in font table")))?;
        let x = ox + i * advance;
        if x + cw > w || oy + ch > h {
            return Err(Error::contract(format!(
                "glyph {c:?} at ({x},{oy}) scale {scale} leaves the {h}x{w} canvas"
            )));
        }
        let cell = font.cell(id);
        let mut bitmap = vec![0u8; cw * ch];
        for ry in 0..CELL_H {
            for rx in 0..CELL_W {
                if cell[ry * CELL_W + rx] == 1 {
                    for sy in 0..scale {
                        for sx in 0..scale {
                            let py = ry * scale + sy;
                            let px = rx * scale + sx;
                            bitmap[py * cw + px] = 1;
                            img.set(oy + py, x + px, 1);
                        }
                    }
                }
            }
        }
        crops.push(GlyphCrop {
            bitmap,
            bbox: (x, oy, cw, ch),
            font_size_class: class,
            char_id: id,
        });
    }
    Ok((img, crops))
}

/// Quantized two-color gradient along an integer direction.
fn gradient_image(
    h: usize,
    w: usize,
    c0: [u8; 3],
    c1: [u8; 3],
    dir: (i64, i64),
    levels: usize,
) -> RgbImage {
    let (dx, dy) = dir;
    let mut gmin = i64::MAX;
    let mut gmax = i64::MIN;
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let g = dx * x + dy * y;
            gmin = gmin.min(g);
            gmax = gmax.max(g);
        }
    }
    let range = (gmax - gmin).max(1);
    let lm1 = (levels - 1) as i64;
    let mut img = RgbImage::new(h, w);
    for y in 0..h {
        for x in 0..w {
            let g = dx * x as i64 + dy * y as i64 - gmin;
            // round-half-up integer quantization
            let level = (g * lm1 + range / 2) / range;
            let t = level as f64 / lm1 as f64;
            let mut c = [0u8; 3];
            for ch in 0..3 {
                c[ch] = (c0[ch] as f64 + (c1[ch] as f64 - c0[ch] as f64) * t).round() as u8;
            }
            img.set_px(y, x, c);
        }
    }
    img
}

fn pick_direction(rng: &mut RngState) -> (i64, i64) {
    loop {
        let dx = rng.range(7) as i64 - 3;
        let dy = rng.range(7) as i64 - 3;
        if dx != 0 || dy != 0 {
            return (dx, dy);
        }
    }
}

fn draw_shape(mask: &mut BinImage, kind: ShapeKind, cx: f64, cy: f64, size: f64) {
    let (h, w) = (mask.h, mask.w);
    for y in 0..h {
        for x in 0..w {
            let fx = x as f64 + 0.5;
            let fy = y as f64 + 0.5;
            let inside = match kind {
                ShapeKind::Circle => {
                    let d2 = (fx - cx) * (fx - cx) + (fy - cy) * (fy - cy);
                    d2 <= size * size
                }
                ShapeKind::Square => (fx - cx).abs() <= size && (fy - cy).abs() <= size,
                ShapeKind::Triangle => {
                    // upright isoceles: apex at (cx, cy - size), base at cy + size
                    let t = (fy - (cy - size)) / (2.0 * size);
                    (0.0..=1.0).contains(&t) && (fx - cx).abs() <= t * size
                }
            };
            if inside {
                mask.set(y, x, 1);
            }
        }
    }
}

/// Generates one sample. Pure in (seed, spec).
pub fn generate_sample(seed: u64, spec: &GenSpec) -> Result<PosterSample> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let base = RngState::new(seed);
    let mut r_pal = base.fork(1);
    let mut r_style = base.fork(2);
    let mut r_layout = base.fork(3);
    let mut r_shape = base.fork(4);
    let mut r_text = base.fork(5);

    let palette = spec.palette();
    let k = palette.len();
    let i0 = r_pal.range(k);
    let mut i1 = r_pal.range(k - 1);
    if i1 >= i0 {
        i1 += 1;
    }
    let mut i2 = r_pal.range(k);
    while i2 == i0 || i2 == i1 {
        i2 = (i2 + 1) % k;
    }
    let (c0, c1, shape_color) = (palette[i0], palette[i1], palette[i2]);

    // Style and poster share the palette but not the layout.
    let style_dir = pick_direction(&mut r_style);
    let mut poster_dir = pick_direction(&mut r_layout);
    while poster_dir == style_dir {
        poster_dir = pick_direction(&mut r_layout);
    }
    let style_image = gradient_image(h, w, c0, c1, style_dir, spec.quant_levels);
    let mut poster = gradient_image(h, w, c0, c1, poster_dir, spec.quant_levels);

    // Subject shape: solid, bounded extent so no gradient stripe is fully
    // covered, mask fraction kept inside [0.05, 0.40].
    let kind = spec.shapes[r_shape.range(spec.shapes.len())];
    let area = (h * w) as f64;
    let max_extent = 0.75 * h.min(w) as f64;
    let mut subject_mask = BinImage::new(h, w);
    let mut placed = false;
    for _ in 0..32 {
        let target = 0.08 + 0.24 * r_shape.uniform();
        let size = match kind {
            ShapeKind::Circle => (target * area / std::f64::consts::PI).sqrt(),
            ShapeKind::Square => (target * area).sqrt() / 2.0,
            // triangle area = 2 * size^2 (base 2*size, height 2*size)
            ShapeKind::Triangle => (target * area / 2.0).sqrt(),
        };
        let extent = match kind {
            ShapeKind::Circle | ShapeKind::Triangle => 2.0 * size,
            ShapeKind::Square => 2.0 * size,
        };
        if extent > max_extent {
            continue;
        }
        let half = extent / 2.0 + 1.0;
        let cx = half + r_shape.uniform() * (w as f64 - 2.0 * half);
        let cy = half + r_shape.uniform() * (h as f64 - 2.0 * half);
        let mut candidate = BinImage::new(h, w);
        draw_shape(&mut candidate, kind, cx, cy, size);
        let frac = candidate.foreground_fraction();
        if (0.05..=0.40).contains(&frac) {
            subject_mask = candidate;
            placed = true;
            break;
        }
    }
    if !placed {
        return Err(Error::contract(format!(
            "seed {seed}: could not place a subject shape within coverage bounds"
        )));
    }
    for y in 0..h {
        for x in 0..w {
            if subject_mask.get(y, x) == 1 {
                poster.set_px(y, x, shape_color);
            }
        }
    }

    // Text: pick a scale, then a length that fits, then a feasible origin.
    let scale = spec.scales[r_text.range(spec.scales.len())];
    let max_fit = {
        let cap_w = (w - 2) / scale; // width budget in cells
        let n = (cap_w + 1) / 4; // (4n - 1) cells <= cap_w
        if CELL_H * scale + 2 > h {
            0
        } else {
            n
        }
    };
    if max_fit < spec.text_len_min {
        return Err(Error::contract(format!(
            "seed {seed}: text of length {} at scale {scale} cannot fit",
            spec.text_len_min
        )));
    }
    let hi = spec.text_len_max.min(max_fit);
    let n = spec.text_len_min + r_text.range(hi - spec.text_len_min + 1);
    let font = FontTable::new();
    let text: String = (0..n)
        .map(|_| font.char_at(r_text.range(font.len())))
        .collect();
    let tw = (4 * n - 1) * scale;
    let th = CELL_H * scale;
    let ox = 1 + r_text.range(w - 1 - tw - 1 + 1);
    let oy = 1 + r_text.range(h - 1 - th - 1 + 1);
    let (glyph_image, crops) = render_glyph_string(&text, (ox, oy), scale, (h, w), &spec.scales)?;
    for y in 0..h {
        for x in 0..w {
            if glyph_image.get(y, x) == 1 {
                poster.set_px(y, x, spec.text_color);
            }
        }
    }

    let mut subject_image = RgbImage::new(h, w);
    for y in 0..h {
        for x in 0..w {
            if subject_mask.get(y, x) == 1 {
                subject_image.set_px(y, x, poster.px(y, x));
            }
        }
    }

    let spaced: String = text
        .chars()
        .map(|c| c.to_string())
        .collect::<Vec<_>>()
        .join(" ");
    let prompt = format!("poster shape {} text {} scale {}", kind.name(), spaced, scale);

    let sample = PosterSample {
        poster,
        style_image,
        subject_image,
        subject_mask,
        glyph_image,
        crops,
        prompt,
        seed,
    };
    sample.validate()?;
    Ok(sample)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    #[test]
    fn render_single_char_bbox_is_cell_sized() {
        let (_, crops) =
            render_glyph_string("A", (1, 1), 1, (16, 16), &[1, 2]).unwrap();
        assert_eq!(crops.len(), 1);
        assert_eq!(crops[0].bbox, (1, 1, 3, 5));
        assert_eq!(crops[0].font_size_class, 0);
    }

    #[test]
    fn render_empty_string_is_empty() {
        let (img, crops) = render_glyph_string("", (0, 0), 1, (8, 8), &[1]).unwrap();
        assert!(crops.is_empty());
        assert!(img.data.iter().all(|&v| v == 0));
    }

    #[test]
    fn render_two_chars_advance_is_four_cells() {
        // layout arithmetic: advance = (3 + 1) * scale = 8 at scale 2
        let (_, crops) = render_glyph_string("AB", (2, 2), 2, (20, 24), &[2]).unwrap();
        assert_eq!(crops.len(), 2);
        assert_eq!(crops[1].bbox.0, crops[0].bbox.0 + 8);
        assert_eq!(crops[0].bbox.2, 6);
        assert_eq!(crops[0].bbox.3, 10);
        // non-overlap
        assert!(crops[0].bbox.0 + crops[0].bbox.2 <= crops[1].bbox.0);
    }

    #[test]
    fn render_rejects_unknown_and_overflow() {
        assert!(render_glyph_string("a", (0, 0), 1, (16, 16), &[1]).is_err());
        assert!(render_glyph_string("AAAAAA", (0, 0), 2, (16, 16), &[2]).is_err());
    }

    #[test]
    fn generate_is_deterministic() {
        let spec = GenSpec::default();
        let a = generate_sample(7, &spec).unwrap();
        let b = generate_sample(7, &spec).unwrap();
        assert_eq!(a, b);
        let c = generate_sample(8, &spec).unwrap();
        assert_ne!(a.poster, c.poster);
    }

    #[test]
    fn glyph_pixels_carry_exactly_the_text_color() {
        let spec = GenSpec::default();
        for seed in 0..24u64 {
            let s = generate_sample(seed, &spec).unwrap();
            for y in 0..spec.height {
                for x in 0..spec.width {
                    let is_text = s.poster.px(y, x) == spec.text_color;
                    assert_eq!(
                        s.glyph_image.get(y, x) == 1,
                        is_text,
                        "seed {seed} at ({x},{y})"
                    );
                }
            }
        }
    }

    #[test]
    fn style_and_poster_share_palettes() {
        let spec = GenSpec::default();
        for seed in 0..24u64 {
            let s = generate_sample(seed, &spec).unwrap();
            let style_colors: BTreeSet<[u8; 3]> = (0..spec.height)
                .flat_map(|y| (0..spec.width).map(move |x| (y, x)))
                .map(|(y, x)| s.style_image.px(y, x))
                .collect();
            let poster_colors: BTreeSet<[u8; 3]> = (0..spec.height)
                .flat_map(|y| (0..spec.width).map(move |x| (y, x)))
                .filter(|&(y, x)| s.subject_mask.get(y, x) == 0 && s.glyph_image.get(y, x) == 0)
                .map(|(y, x)| s.poster.px(y, x))
                .collect();
            assert_eq!(style_colors, poster_colors, "seed {seed}");
        }
    }

    #[test]
    fn crops_rerender_exactly() {
        let spec = GenSpec::default();
        let s = generate_sample(3, &spec).unwrap();
        let font = FontTable::new();
        for crop in &s.crops {
            let scale = spec.scales[crop.font_size_class];
            let (img, redone) = render_glyph_string(
                &font.char_at(crop.char_id).to_string(),
                (0, 0),
                scale,
                (crop.bbox.3, crop.bbox.2),
                &spec.scales,
            )
            .unwrap();
            assert_eq!(redone[0].bitmap, crop.bitmap);
            assert_eq!(img.data, crop.bitmap);
        }
    }

    #[test]
    fn infeasible_spec_is_rejected() {
        let spec = GenSpec {
            width: 8,
            height: 8,
            text_len_min: 4,
            text_len_max: 4,
            scales: vec![2],
            ..GenSpec::default()
        };
        assert!(spec.validate().is_err());
    }
}
