//! Image patches, integer label maps and the synthetic texture dataset.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng as _;
use thiserror::Error;

use crate::rng::{self, Rng};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ImageError {
    #[error("image dimensions {height}x{width} do not match {len} values")]
    BadLength {
        height: usize,
        width: usize,
        len: usize,
    },
    #[error("image value {value} at index {index} is outside [0, 1]")]
    OutOfRange { index: usize, value: f64 },
    #[error("label map dimensions {height}x{width} do not match {len} labels")]
    BadLabels {
        height: usize,
        width: usize,
        len: usize,
    },
    #[error("synthetic dataset: {0}")]
    BadSynthConfig(&'static str),
    #[error("images in a batch must share one size")]
    MixedSizes,
}

/// RGB image with values in `[0, 1]`, stored row-major with interleaved
/// channels (`(row * width + col) * 3 + channel`).
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePatch {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl ImagePatch {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self, ImageError> {
        if height == 0 || width == 0 || values.len() != height * width * 3 {
            return Err(ImageError::BadLength {
                height,
                width,
                len: values.len(),
            });
        }
        if let Some((index, &value)) = values
            .iter()
            .enumerate()
            .find(|(_, v)| !(0.0..=1.0).contains(*v))
        {
            return Err(ImageError::OutOfRange { index, value });
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    /// Builds an image from values that are clamped into `[0, 1]`.
    pub fn from_clamped(height: usize, width: usize, mut values: Vec<f64>) -> Self {
        assert_eq!(values.len(), height * width * 3);
        values.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        Self {
            height,
            width,
            values,
        }
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let mut values = Vec::with_capacity(height * width * 3);
        for _ in 0..height * width {
            values.extend_from_slice(&rgb);
        }
        Self::from_clamped(height, width, values)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn pixel(&self, row: usize, col: usize) -> [f64; 3] {
        let i = (row * self.width + col) * 3;
        [self.values[i], self.values[i + 1], self.values[i + 2]]
    }

    /// Bilinear sample at continuous pixel coordinates (pixel centres at
    /// integer + 0.5), clamped to the image border.
    pub fn sample_bilinear(&self, x: f64, y: f64) -> [f64; 3] {
        let fx = (x - 0.5).clamp(0.0, (self.width - 1) as f64);
        let fy = (y - 0.5).clamp(0.0, (self.height - 1) as f64);
        let x0 = libm::floor(fx) as usize;
        let y0 = libm::floor(fy) as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let ax = fx - x0 as f64;
        let ay = fy - y0 as f64;
        let (p00, p01, p10, p11) = (
            self.pixel(y0, x0),
            self.pixel(y0, x1),
            self.pixel(y1, x0),
            self.pixel(y1, x1),
        );
        let mut out = [0.0; 3];
        for c in 0..3 {
            let top = p00[c] + (p01[c] - p00[c]) * ax;
            let bot = p10[c] + (p11[c] - p10[c]) * ax;
            out[c] = top + (bot - top) * ay;
        }
        out
    }

    /// Bilinear resize (half-pixel centres, border clamped).
    pub fn resize_bilinear(&self, height: usize, width: usize) -> Self {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        let mut values = Vec::with_capacity(height * width * 3);
        for r in 0..height {
            for c in 0..width {
                let p = self.sample_bilinear((c as f64 + 0.5) * sx, (r as f64 + 0.5) * sy);
                values.extend_from_slice(&p);
            }
        }
        Self::from_clamped(height, width, values)
    }

    /// Planar `[3, H, W]` copy of the pixel data.
    pub fn to_planar(&self) -> Vec<f64> {
        let hw = self.height * self.width;
        let mut out = vec![0.0; 3 * hw];
        for i in 0..hw {
            for c in 0..3 {
                out[c * hw + i] = self.values[i * 3 + c];
            }
        }
        out
    }
}

/// Stacks equally-sized images into an `[N, 3, H, W]` tensor.
pub fn images_to_tensor(images: &[&ImagePatch]) -> Result<Tensor, ImageError> {
    let first = images.first().ok_or(ImageError::MixedSizes)?;
    let (h, w) = (first.height, first.width);
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for im in images {
        if im.height != h || im.width != w {
            return Err(ImageError::MixedSizes);
        }
        data.extend(im.to_planar());
    }
    Ok(Tensor::new(&[images.len(), 3, h, w], data).expect("consistent image tensor"))
}

/// Integer label per pixel, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u32>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, labels: Vec<u32>) -> Result<Self, ImageError> {
        if labels.len() != height * width || height == 0 || width == 0 {
            return Err(ImageError::BadLabels {
                height,
                width,
                len: labels.len(),
            });
        }
        Ok(Self {
            height,
            width,
            labels,
        })
    }

    pub fn get(&self, row: usize, col: usize) -> u32 {
        self.labels[row * self.width + col]
    }

    /// Nearest-neighbour resample of the sub-rectangle
    /// `[x0, x0 + w) x [y0, y0 + h)` (pixel units) onto an `out_h x out_w`
    /// grid, sampling at output pixel centres.
    pub fn crop_nearest(&self, x0: f64, y0: f64, w: f64, h: f64, out_h: usize, out_w: usize) -> Self {
        let mut labels = Vec::with_capacity(out_h * out_w);
        for r in 0..out_h {
            let sy = y0 + (r as f64 + 0.5) * h / out_h as f64;
            let row = (libm::floor(sy) as isize).clamp(0, self.height as isize - 1) as usize;
            for c in 0..out_w {
                let sx = x0 + (c as f64 + 0.5) * w / out_w as f64;
                let col = (libm::floor(sx) as isize).clamp(0, self.width as isize - 1) as usize;
                labels.push(self.get(row, col));
            }
        }
        Self {
            height: out_h,
            width: out_w,
            labels,
        }
    }

    pub fn resize_nearest(&self, out_h: usize, out_w: usize) -> Self {
        self.crop_nearest(0.0, 0.0, self.width as f64, self.height as f64, out_h, out_w)
    }

    /// Distinct labels, ascending.
    pub fn distinct(&self) -> Vec<u32> {
        let mut v = self.labels.clone();
        v.sort_unstable();
        v.dedup();
        v
    }
}

/// Synthetic image with its ground-truth region map.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledPatch {
    pub image: ImagePatch,
    /// Region index per pixel, in `[0, n_regions)`.
    pub gt_labels: LabelMap,
    pub n_regions: usize,
    /// Texture id of each region; texture ids are consistent across images.
    pub region_texture: Vec<u32>,
}

impl LabeledPatch {
    /// Per-pixel texture id, the class map used by dense evaluation.
    pub fn class_map(&self) -> LabelMap {
        LabelMap {
            height: self.gt_labels.height,
            width: self.gt_labels.width,
            labels: self
                .gt_labels
                .labels
                .iter()
                .map(|&r| self.region_texture[r as usize])
                .collect(),
        }
    }

    /// Texture covering the most pixels (ties to the smaller id).
    pub fn dominant_texture(&self) -> u32 {
        let mut counts = vec![0usize; self.n_regions];
        for &r in &self.gt_labels.labels {
            counts[r as usize] += 1;
        }
        let mut best = (0usize, u32::MAX);
        for (r, &cnt) in counts.iter().enumerate() {
            let t = self.region_texture[r];
            if cnt > best.0 || (cnt == best.0 && t < best.1) {
                best = (cnt, t);
            }
        }
        best.1
    }
}

/// Anything the trainer can consume: an image plus optional ground truth.
pub trait DataItem {
    fn image(&self) -> &ImagePatch;
    fn ground_truth(&self) -> Option<&LabelMap> {
        None
    }
}

impl DataItem for ImagePatch {
    fn image(&self) -> &ImagePatch {
        self
    }
}

impl DataItem for LabeledPatch {
    fn image(&self) -> &ImagePatch {
        &self.image
    }
    fn ground_truth(&self) -> Option<&LabelMap> {
        Some(&self.gt_labels)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_images: usize,
    pub size: usize,
    pub n_regions: usize,
    pub n_textures: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_images: 640,
            size: 64,
            n_regions: 6,
            n_textures: 12,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Pattern {
    /// Oriented sinusoid grating.
    Grating,
    /// Two superimposed orthogonal gratings.
    Plaid,
    /// Smoothly interpolated lattice noise.
    Noise,
}

/// Procedural texture shared by every image of a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct Texture {
    pattern: Pattern,
    /// Cycles per pixel.
    frequency: f64,
    orientation: f64,
    palette: [[f64; 3]; 2],
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = (h - libm::floor(h)) * 6.0;
    let i = libm::floor(h) as u32 % 6;
    let f = h - libm::floor(h);
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Texture bank for a dataset seed. Texture `t` gets a hue spread around the
/// colour wheel, one of three pattern families and its own frequency and
/// orientation.
pub fn texture_bank(seed: u64, n_textures: usize) -> Vec<Texture> {
    let mut rng = rng::stream(seed, rng::domain::SYNTH, u64::MAX, 0);
    let offset: f64 = rng.random();
    (0..n_textures)
        .map(|t| {
            let hue = offset + t as f64 * 0.618_033_988_75;
            let sat = rng.random_range(0.45..0.85);
            let val = rng.random_range(0.55..0.9);
            let base = hsv_to_rgb(hue, sat, val);
            let dark = hsv_to_rgb(hue + rng.random_range(-0.04..0.04), sat, val * rng.random_range(0.35..0.6));
            let pattern = match t % 3 {
                0 => Pattern::Grating,
                1 => Pattern::Plaid,
                _ => Pattern::Noise,
            };
            Texture {
                pattern,
                frequency: rng.random_range(0.06..0.22),
                orientation: rng.random_range(0.0..core::f64::consts::PI),
                palette: [base, dark],
            }
        })
        .collect()
}

struct LatticeNoise {
    cells: usize,
    values: Vec<f64>,
}

impl LatticeNoise {
    fn new(rng: &mut Rng, cells: usize) -> Self {
        let n = cells + 2;
        Self {
            cells,
            values: (0..n * n).map(|_| rng.random::<f64>()).collect(),
        }
    }

    fn at(&self, u: f64, v: f64) -> f64 {
        let n = self.cells + 2;
        let x = u * self.cells as f64;
        let y = v * self.cells as f64;
        let (xi, yi) = (libm::floor(x) as usize, libm::floor(y) as usize);
        let (xi, yi) = (xi.min(self.cells), yi.min(self.cells));
        let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
        let (ax, ay) = (smooth(x - xi as f64), smooth(y - yi as f64));
        let g = |r: usize, c: usize| self.values[r * n + c];
        let top = g(yi, xi) + (g(yi, xi + 1) - g(yi, xi)) * ax;
        let bot = g(yi + 1, xi) + (g(yi + 1, xi + 1) - g(yi + 1, xi)) * ax;
        top + (bot - top) * ay
    }
}

fn render_texture(tex: &Texture, rng: &mut Rng, size: usize) -> impl Fn(usize, usize) -> [f64; 3] {
    let phase: f64 = rng.random_range(0.0..core::f64::consts::TAU);
    let phase2: f64 = rng.random_range(0.0..core::f64::consts::TAU);
    let cells = ((tex.frequency * size as f64) as usize).max(2);
    let noise = LatticeNoise::new(rng, cells);
    let tex = tex.clone();
    move |r, c| {
        let (x, y) = (c as f64, r as f64);
        let (cs, sn) = (libm::cos(tex.orientation), libm::sin(tex.orientation));
        let w = core::f64::consts::TAU * tex.frequency;
        let t = match tex.pattern {
            Pattern::Grating => 0.5 + 0.5 * libm::sin(w * (x * cs + y * sn) + phase),
            Pattern::Plaid => {
                0.5 + 0.25 * libm::sin(w * (x * cs + y * sn) + phase)
                    + 0.25 * libm::sin(w * (-x * sn + y * cs) + phase2)
            }
            Pattern::Noise => noise.at(x / size as f64, y / size as f64),
        };
        let [a, b] = tex.palette;
        [
            a[0] + (b[0] - a[0]) * t,
            a[1] + (b[1] - a[1]) * t,
            a[2] + (b[2] - a[2]) * t,
        ]
    }
}

/// One Voronoi-partitioned textured image. Deterministic in `(cfg.seed, index)`.
pub fn synth_image(cfg: &SynthConfig, bank: &[Texture], index: usize) -> LabeledPatch {
    let size = cfg.size;
    let mut rng = rng::stream(cfg.seed, rng::domain::SYNTH, index as u64, 0);
    let min_sep = size as f64 / (2.0 * libm::sqrt(cfg.n_regions as f64));
    let labels = loop {
        let mut seeds: Vec<(f64, f64)> = Vec::with_capacity(cfg.n_regions);
        let mut guard = 0;
        while seeds.len() < cfg.n_regions {
            let p = (
                rng.random_range(0.0..size as f64),
                rng.random_range(0.0..size as f64),
            );
            guard += 1;
            let far = seeds.iter().all(|s| {
                let (dx, dy) = (s.0 - p.0, s.1 - p.1);
                dx * dx + dy * dy >= min_sep * min_sep
            });
            if far || guard > 1000 {
                seeds.push(p);
            }
        }
        let mut labels = vec![0u32; size * size];
        for r in 0..size {
            for c in 0..size {
                let (x, y) = (c as f64 + 0.5, r as f64 + 0.5);
                let mut best = (f64::INFINITY, 0u32);
                for (i, s) in seeds.iter().enumerate() {
                    let d = (s.0 - x) * (s.0 - x) + (s.1 - y) * (s.1 - y);
                    if d < best.0 {
                        best = (d, i as u32);
                    }
                }
                labels[r * size + c] = best.1;
            }
        }
        let mut seen = vec![false; cfg.n_regions];
        labels.iter().for_each(|&l| seen[l as usize] = true);
        if seen.iter().all(|&s| s) {
            break labels;
        }
    };
    let mut ids: Vec<u32> = (0..bank.len() as u32).collect();
    ids.shuffle(&mut rng);
    ids.truncate(cfg.n_regions);
    let renderers: Vec<_> = ids
        .iter()
        .map(|&t| render_texture(&bank[t as usize], &mut rng, size))
        .collect();
    let mut values = Vec::with_capacity(size * size * 3);
    for r in 0..size {
        for c in 0..size {
            let px = renderers[labels[r * size + c] as usize](r, c);
            values.extend_from_slice(&px);
        }
    }
    LabeledPatch {
        image: ImagePatch::from_clamped(size, size, values),
        gt_labels: LabelMap {
            height: size,
            width: size,
            labels,
        },
        n_regions: cfg.n_regions,
        region_texture: ids,
    }
}

/// Synthetic textured dataset: Voronoi partitions of `n_regions` cells, each
/// cell filled with a distinct texture drawn from a bank of `n_textures`.
pub fn synth_dataset(cfg: &SynthConfig) -> Result<Vec<LabeledPatch>, ImageError> {
    if !(2..=16).contains(&cfg.n_regions) {
        return Err(ImageError::BadSynthConfig("n_regions must lie in [2, 16]"));
    }
    if cfg.n_textures < cfg.n_regions {
        return Err(ImageError::BadSynthConfig("n_textures must be at least n_regions"));
    }
    if cfg.size < 8 {
        return Err(ImageError::BadSynthConfig("size must be at least 8"));
    }
    let bank = texture_bank(cfg.seed, cfg.n_textures);
    Ok((0..cfg.n_images).map(|i| synth_image(cfg, &bank, i)).collect())
}
