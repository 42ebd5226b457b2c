//! Procedural desk-scale benchmark: a source domain of rendered glyph
//! classes plus target domains made by leveled corruptions and style
//! shifts. Every generator is a pure function of (spec, seed); outputs are
//! quantized to 1/1024 steps so involutive transforms round-trip bitwise.

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor4;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const IMG_C: usize = 3;
pub const IMG_H: usize = 24;
pub const IMG_W: usize = 24;
pub const CLASSES: usize = 10;

/// Noise std per corruption level 1..=5.
pub const GAUSSIAN_SIGMA: [f32; 5] = [0.04, 0.08, 0.12, 0.18, 0.26];
/// Fraction of pixels hit by salt/pepper impulses.
pub const IMPULSE_FRACTION: [f32; 5] = [0.03, 0.07, 0.11, 0.15, 0.20];
/// Box filter side length.
pub const BLUR_KERNEL: [usize; 5] = [3, 5, 7, 9, 11];
/// Contrast compression factor toward mid-gray.
pub const CONTRAST_FACTOR: [f32; 5] = [0.65, 0.50, 0.38, 0.27, 0.18];
/// Additive brightness shift (clipped at 1).
pub const BRIGHTNESS_SHIFT: [f32; 5] = [0.12, 0.21, 0.30, 0.38, 0.45];
/// Downsample block size for pixelation.
pub const PIXELATE_BLOCK: [usize; 5] = [2, 3, 4, 6, 8];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionType {
    GaussianNoise,
    ImpulseNoise,
    BoxBlur,
    Contrast,
    Brightness,
    Pixelate,
}

impl CorruptionType {
    pub const ALL: [CorruptionType; 6] = [
        CorruptionType::GaussianNoise,
        CorruptionType::ImpulseNoise,
        CorruptionType::BoxBlur,
        CorruptionType::Contrast,
        CorruptionType::Brightness,
        CorruptionType::Pixelate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CorruptionType::GaussianNoise => "gaussian_noise",
            CorruptionType::ImpulseNoise => "impulse_noise",
            CorruptionType::BoxBlur => "box_blur",
            CorruptionType::Contrast => "contrast",
            CorruptionType::Brightness => "brightness",
            CorruptionType::Pixelate => "pixelate",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == name)
            .ok_or_else(|| Error::invalid(format!("unknown corruption type {name}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StyleKind {
    Invert,
    TextureBg,
    Dilate,
}

impl StyleKind {
    pub const ALL: [StyleKind; 3] = [StyleKind::Invert, StyleKind::TextureBg, StyleKind::Dilate];

    pub fn name(self) -> &'static str {
        match self {
            StyleKind::Invert => "invert",
            StyleKind::TextureBg => "texture_bg",
            StyleKind::Dilate => "dilate",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|s| s.name() == name)
            .ok_or_else(|| Error::invalid(format!("unknown style {name}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainKind {
    Source,
    Corruption { ctype: CorruptionType, level: u8 },
    Style { style: StyleKind },
}

/// One synthetic evaluation or training domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub kind: DomainKind,
    pub seed: u64,
}

impl DomainSpec {
    pub fn source(seed: u64) -> Self {
        DomainSpec { kind: DomainKind::Source, seed }
    }

    pub fn corruption(ctype: CorruptionType, level: u8, seed: u64) -> Result<Self> {
        if !(1..=5).contains(&level) {
            return Err(Error::invalid(format!("corruption level {level} outside 1..=5")));
        }
        Ok(DomainSpec { kind: DomainKind::Corruption { ctype, level }, seed })
    }

    pub fn style(style: StyleKind, seed: u64) -> Self {
        DomainSpec { kind: DomainKind::Style { style }, seed }
    }

    /// Parse "source", "corruption:<type>:<level>", or "style:<name>".
    pub fn parse(text: &str, seed: u64) -> Result<Self> {
        let parts: Vec<&str> = text.split(':').collect();
        match parts.as_slice() {
            ["source"] => Ok(Self::source(seed)),
            ["corruption", ty, level] => {
                let ctype = CorruptionType::from_name(ty)?;
                let level: u8 = level
                    .parse()
                    .map_err(|_| Error::invalid(format!("bad corruption level {level}")))?;
                Self::corruption(ctype, level, seed)
            }
            ["style", name] => Ok(Self::style(StyleKind::from_name(name)?, seed)),
            _ => Err(Error::invalid(format!("unrecognized domain spec \"{text}\""))),
        }
    }

    pub fn domain_name(&self) -> String {
        match &self.kind {
            DomainKind::Source => "source".to_string(),
            DomainKind::Corruption { ctype, .. } => ctype.name().to_string(),
            DomainKind::Style { style } => format!("style_{}", style.name()),
        }
    }

    pub fn level(&self) -> u8 {
        match &self.kind {
            DomainKind::Corruption { level, .. } => *level,
            _ => 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub domain: String,
    pub level: u32,
    pub seed: u64,
    pub classes: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor4,
    pub labels: Vec<u32>,
    pub manifest: Manifest,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

// ---------------------------------------------------------------------
// Glyph rendering
// ---------------------------------------------------------------------

/// Stroke templates in unit coordinates, one per class. Kept to simple
/// segment sets so classes stay separable under pose jitter.
const GLYPH_SEGMENTS: [&[(f32, f32, f32, f32)]; CLASSES] = [
    // square outline
    &[(0.2, 0.2, 0.8, 0.2), (0.8, 0.2, 0.8, 0.8), (0.8, 0.8, 0.2, 0.8), (0.2, 0.8, 0.2, 0.2)],
    // vertical bar
    &[(0.5, 0.15, 0.5, 0.85)],
    // zigzag
    &[(0.2, 0.2, 0.8, 0.2), (0.8, 0.2, 0.2, 0.8), (0.2, 0.8, 0.8, 0.8)],
    // diagonal cross
    &[(0.2, 0.2, 0.8, 0.8), (0.8, 0.2, 0.2, 0.8)],
    // upright cross
    &[(0.5, 0.15, 0.5, 0.85), (0.15, 0.5, 0.85, 0.5)],
    // corner
    &[(0.25, 0.15, 0.25, 0.85), (0.25, 0.85, 0.8, 0.85)],
    // tee
    &[(0.15, 0.2, 0.85, 0.2), (0.5, 0.2, 0.5, 0.85)],
    // triangle
    &[(0.5, 0.15, 0.85, 0.8), (0.85, 0.8, 0.15, 0.8), (0.15, 0.8, 0.5, 0.15)],
    // zed-bar
    &[(0.25, 0.85, 0.25, 0.15), (0.25, 0.15, 0.75, 0.85), (0.75, 0.85, 0.75, 0.15)],
    // horizontal bar
    &[(0.15, 0.5, 0.85, 0.5)],
];

/// Snap to 1/1024 steps. Keeps every stored pixel exactly representable,
/// which makes 1-x an exact involution.
#[inline]
fn quantize(v: f32) -> f32 {
    (v * 1024.0).round() / 1024.0
}

fn quantize_all(data: &mut [f32]) {
    for v in data {
        *v = quantize(*v);
    }
}

fn dist_to_segment(px: f32, py: f32, seg: (f32, f32, f32, f32)) -> f32 {
    let (x0, y0, x1, y1) = seg;
    let dx = x1 - x0;
    let dy = y1 - y0;
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 { 0.0 } else { ((px - x0) * dx + (py - y0) * dy) / len2 };
    let t = t.clamp(0.0, 1.0);
    let cx = x0 + t * dx;
    let cy = y0 + t * dy;
    ((px - cx) * (px - cx) + (py - cy) * (py - cy)).sqrt()
}

/// Render one glyph with pose jitter into a (C,H,W) slice; grayscale
/// replicated across channels.
fn render_glyph(class: usize, rng: &mut impl Rng, out: &mut [f32]) {
    let segs = GLYPH_SEGMENTS[class];
    let angle = (rng.random::<f32>() - 0.5) * 0.36;
    let scale = 0.85 + rng.random::<f32>() * 0.25;
    let dx = (rng.random::<f32>() - 0.5) * 0.16;
    let dy = (rng.random::<f32>() - 0.5) * 0.16;
    let half_width = 0.05 + rng.random::<f32>() * 0.04;

    let (sin, cos) = angle.sin_cos();
    let moved: Vec<(f32, f32, f32, f32)> = segs
        .iter()
        .map(|&(x0, y0, x1, y1)| {
            let tx = |x: f32, y: f32| {
                let (cx, cy) = (x - 0.5, y - 0.5);
                (0.5 + dx + scale * (cx * cos - cy * sin), 0.5 + dy + scale * (cx * sin + cy * cos))
            };
            let (ax, ay) = tx(x0, y0);
            let (bx, by) = tx(x1, y1);
            (ax, ay, bx, by)
        })
        .collect();

    let aa = 0.75 / IMG_W as f32;
    for py in 0..IMG_H {
        for px in 0..IMG_W {
            let ux = (px as f32 + 0.5) / IMG_W as f32;
            let uy = (py as f32 + 0.5) / IMG_H as f32;
            let mut d = f32::MAX;
            for &seg in &moved {
                d = d.min(dist_to_segment(ux, uy, seg));
            }
            let v = ((half_width + aa - d) / aa).clamp(0.0, 1.0);
            let at = py * IMG_W + px;
            for c in 0..IMG_C {
                out[c * IMG_H * IMG_W + at] = v;
            }
        }
    }
}

/// Generate the source domain: n glyph images with class i % K, balanced
/// per class, pixel range [0,1].
pub fn gen_source(seed: u64, n: usize, k: usize) -> Result<Dataset> {
    if k == 0 || k > CLASSES {
        return Err(Error::invalid(format!("class count {k} outside 1..={CLASSES}")));
    }
    if n < k {
        return Err(Error::invalid(format!("need at least {k} images for {k} classes, got {n}")));
    }
    let mut images = Tensor4::zeros(n, IMG_C, IMG_H, IMG_W);
    let mut labels = Vec::with_capacity(n);
    let stride = IMG_C * IMG_H * IMG_W;
    for i in 0..n {
        let class = i % k;
        let mut r = rng::stream(seed, i as u64);
        render_glyph(class, &mut r, &mut images.data[i * stride..(i + 1) * stride]);
        labels.push(class as u32);
    }
    quantize_all(&mut images.data);
    Ok(Dataset {
        images,
        labels,
        manifest: Manifest { domain: "source".into(), level: 0, seed, classes: k as u32 },
    })
}

// ---------------------------------------------------------------------
// Corruptions
// ---------------------------------------------------------------------

fn box_blur_channel(src: &[f32], dst: &mut [f32], h: usize, w: usize, k: usize) {
    let r = (k / 2) as isize;
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut acc = 0.0f32;
            for oy in -r..=r {
                for ox in -r..=r {
                    let sy = (y + oy).clamp(0, h as isize - 1) as usize;
                    let sx = (x + ox).clamp(0, w as isize - 1) as usize;
                    acc += src[sy * w + sx];
                }
            }
            dst[y as usize * w + x as usize] = acc / (k * k) as f32;
        }
    }
}

fn pixelate_channel(src: &[f32], dst: &mut [f32], h: usize, w: usize, block: usize) {
    let mut by = 0;
    while by < h {
        let bh = block.min(h - by);
        let mut bx = 0;
        while bx < w {
            let bw = block.min(w - bx);
            let mut acc = 0.0f32;
            for y in by..by + bh {
                for x in bx..bx + bw {
                    acc += src[y * w + x];
                }
            }
            let mean = acc / (bh * bw) as f32;
            for y in by..by + bh {
                for x in bx..bx + bw {
                    dst[y * w + x] = mean;
                }
            }
            bx += block;
        }
        by += block;
    }
}

/// Standard-normal sample by the Box-Muller transform, deterministic given
/// the generator state.
fn normal(rng: &mut impl Rng) -> f32 {
    let u1: f32 = rng.random::<f32>().max(1e-12);
    let u2: f32 = rng.random::<f32>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f32::consts::PI * u2).cos()
}

/// Apply one corruption at the given level; level 0 is the identity.
/// Gaussian noise is left unclipped so its measured deviation matches the
/// table; all other types stay inside [0,1] for in-range input.
pub fn apply_corruption(
    images: &Tensor4,
    ctype: CorruptionType,
    level: u8,
    seed: u64,
) -> Result<Tensor4> {
    if level == 0 {
        return Ok(images.clone());
    }
    if level > 5 {
        return Err(Error::invalid(format!("corruption level {level} outside 0..=5")));
    }
    let li = (level - 1) as usize;
    let (n, c, h, w) = images.dims();
    let mut out = images.clone();
    let stride = c * h * w;
    for i in 0..n {
        let mut r = rng::stream(seed, i as u64);
        let img = &mut out.data[i * stride..(i + 1) * stride];
        match ctype {
            CorruptionType::GaussianNoise => {
                let sigma = GAUSSIAN_SIGMA[li];
                for v in img.iter_mut() {
                    *v += sigma * normal(&mut r);
                }
            }
            CorruptionType::ImpulseNoise => {
                let p = IMPULSE_FRACTION[li];
                for v in img.iter_mut() {
                    if r.random::<f32>() < p {
                        *v = if r.random::<f32>() < 0.5 { 0.0 } else { 1.0 };
                    }
                }
            }
            CorruptionType::BoxBlur => {
                let k = BLUR_KERNEL[li];
                let src = img.to_vec();
                for ci in 0..c {
                    box_blur_channel(&src[ci * h * w..(ci + 1) * h * w], &mut img[ci * h * w..(ci + 1) * h * w], h, w, k);
                }
            }
            CorruptionType::Contrast => {
                let f = CONTRAST_FACTOR[li];
                for v in img.iter_mut() {
                    *v = (*v - 0.5) * f + 0.5;
                }
            }
            CorruptionType::Brightness => {
                let b = BRIGHTNESS_SHIFT[li];
                for v in img.iter_mut() {
                    *v = (*v + b).min(1.0);
                }
            }
            CorruptionType::Pixelate => {
                let block = PIXELATE_BLOCK[li];
                let src = img.to_vec();
                for ci in 0..c {
                    pixelate_channel(&src[ci * h * w..(ci + 1) * h * w], &mut img[ci * h * w..(ci + 1) * h * w], h, w, block);
                }
            }
        }
    }
    quantize_all(&mut out.data);
    Ok(out)
}

// ---------------------------------------------------------------------
// Styles
// ---------------------------------------------------------------------

/// Apply one style shift; labels and dims are untouched.
pub fn apply_style(images: &Tensor4, style: StyleKind, seed: u64) -> Result<Tensor4> {
    let (n, c, h, w) = images.dims();
    let mut out = images.clone();
    let stride = c * h * w;
    for i in 0..n {
        let img = &mut out.data[i * stride..(i + 1) * stride];
        match style {
            StyleKind::Invert => {
                for v in img.iter_mut() {
                    *v = 1.0 - *v;
                }
            }
            StyleKind::TextureBg => {
                // Glyph intensity doubles as alpha over a blurred noise field.
                let mut r = rng::stream(seed, i as u64);
                let mut noise = vec![0.0f32; h * w];
                for v in noise.iter_mut() {
                    *v = 0.15 + 0.45 * r.random::<f32>();
                }
                let mut tex = vec![0.0f32; h * w];
                box_blur_channel(&noise, &mut tex, h, w, 3);
                for ci in 0..c {
                    let ch = &mut img[ci * h * w..(ci + 1) * h * w];
                    for (v, &t) in ch.iter_mut().zip(&tex) {
                        *v = *v + (1.0 - *v) * t;
                    }
                }
            }
            StyleKind::Dilate => {
                let src = img.to_vec();
                for ci in 0..c {
                    let s = &src[ci * h * w..(ci + 1) * h * w];
                    let d = &mut img[ci * h * w..(ci + 1) * h * w];
                    for y in 0..h as isize {
                        for x in 0..w as isize {
                            let mut best = 0.0f32;
                            for oy in -1..=1 {
                                for ox in -1..=1 {
                                    let sy = (y + oy).clamp(0, h as isize - 1) as usize;
                                    let sx = (x + ox).clamp(0, w as isize - 1) as usize;
                                    best = best.max(s[sy * w + sx]);
                                }
                            }
                            d[y as usize * w + x as usize] = best;
                        }
                    }
                }
            }
        }
    }
    if style != StyleKind::Invert {
        // Inversion of quantized values is already exact; requantizing the
        // others keeps every stored pixel on the 1/1024 grid.
        quantize_all(&mut out.data);
    }
    Ok(out)
}

/// Materialize a domain: generate the source images for `spec.seed` and run
/// them through the spec's transform. Corruption/style randomness uses a
/// stream derived from the spec seed and the transform identity.
pub fn realize(spec: &DomainSpec, n: usize, k: usize) -> Result<Dataset> {
    let base = gen_source(spec.seed, n, k)?;
    let (images, level) = match &spec.kind {
        DomainKind::Source => (base.images, 0u32),
        DomainKind::Corruption { ctype, level } => {
            let tag = 0x1000 + (*ctype as u64) * 8 + *level as u64;
            (apply_corruption(&base.images, *ctype, *level, rng::mix(spec.seed, tag))?, *level as u32)
        }
        DomainKind::Style { style } => {
            let tag = 0x2000 + (*style as u64);
            (apply_style(&base.images, *style, rng::mix(spec.seed, tag))?, 0)
        }
    };
    Ok(Dataset {
        images,
        labels: base.labels,
        manifest: Manifest { domain: spec.domain_name(), level, seed: spec.seed, classes: k as u32 },
    })
}

// ---------------------------------------------------------------------
// File format
// ---------------------------------------------------------------------

const MAGIC: &[u8; 4] = b"NSDS";
const VERSION: u32 = 1;

pub fn write_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let manifest = serde_json::to_vec(&ds.manifest)
        .map_err(|e| Error::format(format!("manifest encode: {e}")))?;
    w.write_all(&(manifest.len() as u32).to_le_bytes())?;
    w.write_all(&manifest)?;
    let (n, c, h, wd) = ds.images.dims();
    if ds.labels.len() != n {
        return Err(Error::shape(format!("{} labels for {n} images", ds.labels.len())));
    }
    for d in [n, c, h, wd] {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for &v in &ds.images.data {
        w.write_all(&v.to_le_bytes())?;
    }
    for &l in &ds.labels {
        w.write_all(&l.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let file = File::open(path)?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| Error::format("truncated dataset file"))?;
    if &magic != MAGIC {
        return Err(Error::format("bad magic: not a dataset file"));
    }
    let mut u32buf = [0u8; 4];
    let mut read_u32 = |r: &mut BufReader<File>| -> Result<u32> {
        r.read_exact(&mut u32buf).map_err(|_| Error::format("truncated dataset file"))?;
        Ok(u32::from_le_bytes(u32buf))
    };
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::format(format!("unsupported dataset version {version}")));
    }
    let manifest_len = read_u32(&mut r)? as usize;
    let mut manifest_bytes = vec![0u8; manifest_len];
    r.read_exact(&mut manifest_bytes).map_err(|_| Error::format("truncated dataset file"))?;
    let manifest: Manifest = serde_json::from_slice(&manifest_bytes)
        .map_err(|e| Error::format(format!("manifest decode: {e}")))?;
    let n = read_u32(&mut r)? as usize;
    let c = read_u32(&mut r)? as usize;
    let h = read_u32(&mut r)? as usize;
    let w = read_u32(&mut r)? as usize;
    let mut data = vec![0.0f32; n * c * h * w];
    let mut fbuf = [0u8; 4];
    for v in data.iter_mut() {
        r.read_exact(&mut fbuf).map_err(|_| Error::format("truncated image payload"))?;
        *v = f32::from_le_bytes(fbuf);
    }
    let mut labels = vec![0u32; n];
    for l in labels.iter_mut() {
        r.read_exact(&mut fbuf).map_err(|_| Error::format("truncated label payload"))?;
        *l = u32::from_le_bytes(fbuf);
    }
    Ok(Dataset { images: Tensor4::from_vec(n, c, h, w, data)?, labels, manifest })
}
