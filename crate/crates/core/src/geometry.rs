//! Query/key/reference view sampling and concept-mask restoration.
//!
//! All rectangles live in source-image pixel coordinates. A view is a crop
//! `(x0, y0, w, h)` resized to `out_size x out_size`, optionally mirrored
//! left-right. The reference view is the smallest axis-aligned rectangle
//! containing both views and is never mirrored or photometrically altered.

use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng as _;
use thiserror::Error;

use crate::concepts::ConceptMask;
use crate::image::ImagePatch;
use crate::rng::Rng;

/// Label of a restored cell whose centre falls outside the reference mask.
pub const ABSENT: u32 = u32::MAX;
/// Smallest crop extent, in source pixels.
pub const MIN_CROP: usize = 8;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("image {height}x{width} is smaller than the {out_size}px view size")]
    ImageTooSmall {
        height: usize,
        width: usize,
        out_size: usize,
    },
    #[error("view {view:?} is not contained in reference {reference:?}")]
    NotContained {
        view: (usize, usize, usize, usize),
        reference: (usize, usize, usize, usize),
    },
    #[error("restored cell ({row}, {col}) maps outside the reference mask")]
    OutsideReference { row: usize, col: usize },
    #[error("invalid view configuration: {0}")]
    BadConfig(&'static str),
}

/// A crop of the source image and how it is presented.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct CropSpec {
    pub x0: usize,
    pub y0: usize,
    pub w: usize,
    pub h: usize,
    pub hflip: bool,
    pub out_size: usize,
}

impl CropSpec {
    pub fn full(width: usize, height: usize, out_size: usize) -> Self {
        Self {
            x0: 0,
            y0: 0,
            w: width,
            h: height,
            hflip: false,
            out_size,
        }
    }

    pub fn rect(&self) -> (usize, usize, usize, usize) {
        (self.x0, self.y0, self.w, self.h)
    }

    pub fn area(&self) -> usize {
        self.w * self.h
    }

    pub fn contains(&self, other: &CropSpec) -> bool {
        other.x0 >= self.x0
            && other.y0 >= self.y0
            && other.x0 + other.w <= self.x0 + self.w
            && other.y0 + other.h <= self.y0 + self.h
    }

    pub fn intersection_area(&self, other: &CropSpec) -> usize {
        let x0 = self.x0.max(other.x0);
        let y0 = self.y0.max(other.y0);
        let x1 = (self.x0 + self.w).min(other.x0 + other.w);
        let y1 = (self.y0 + self.h).min(other.y0 + other.h);
        x1.saturating_sub(x0) * y1.saturating_sub(y0)
    }

    /// Smallest unflipped rectangle containing both crops.
    pub fn union(&self, other: &CropSpec) -> CropSpec {
        let x0 = self.x0.min(other.x0);
        let y0 = self.y0.min(other.y0);
        let x1 = (self.x0 + self.w).max(other.x0 + other.w);
        let y1 = (self.y0 + self.h).max(other.y0 + other.h);
        CropSpec {
            x0,
            y0,
            w: x1 - x0,
            h: y1 - y0,
            hflip: false,
            out_size: self.out_size,
        }
    }

    /// Source-pixel coordinates of a normalised view position `(u, v)` in
    /// `[0, 1]^2`, honouring the mirror flag.
    pub fn view_to_source(&self, u: f64, v: f64) -> (f64, f64) {
        let u = if self.hflip { 1.0 - u } else { u };
        (self.x0 as f64 + u * self.w as f64, self.y0 as f64 + v * self.h as f64)
    }
}

/// Cuts `spec` out of `image` and resizes it bilinearly to
/// `out_size x out_size`, mirrored if `spec.hflip`.
pub fn crop_resize(image: &ImagePatch, spec: &CropSpec) -> ImagePatch {
    let n = spec.out_size;
    let mut values = Vec::with_capacity(n * n * 3);
    for r in 0..n {
        for c in 0..n {
            let (x, y) = spec.view_to_source((c as f64 + 0.5) / n as f64, (r as f64 + 0.5) / n as f64);
            values.extend_from_slice(&image.sample_bilinear(x, y));
        }
    }
    ImagePatch::from_clamped(n, n, values)
}

fn mirror(image: &ImagePatch) -> ImagePatch {
    let (h, w) = (image.height(), image.width());
    let mut values = Vec::with_capacity(h * w * 3);
    for r in 0..h {
        for c in (0..w).rev() {
            values.extend_from_slice(&image.pixel(r, c));
        }
    }
    ImagePatch::from_clamped(h, w, values)
}

/// Photometric and flip augmentation probabilities and strengths.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PhotometricConfig {
    pub jitter_prob: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
    pub grayscale_prob: f64,
    pub blur_prob: f64,
    /// Blur standard deviation range, in output pixels.
    pub blur_sigma: (f64, f64),
    pub flip_prob: f64,
}

impl Default for PhotometricConfig {
    fn default() -> Self {
        Self {
            jitter_prob: 0.8,
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.4,
            hue: 0.1,
            grayscale_prob: 0.2,
            blur_prob: 0.5,
            // [0.1, 2.0] at 224 px, scaled to the 64 px desk default.
            blur_sigma: (0.1 * 64.0 / 224.0, 2.0 * 64.0 / 224.0),
            flip_prob: 0.5,
        }
    }
}

impl PhotometricConfig {
    pub fn identity() -> Self {
        Self {
            jitter_prob: 0.0,
            grayscale_prob: 0.0,
            blur_prob: 0.0,
            flip_prob: 0.0,
            ..Self::default()
        }
    }
}

/// View-pair sampling parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ViewConfig {
    pub scale_range: (f64, f64),
    pub ratio_range: (f64, f64),
    pub out_size: usize,
    pub max_tries: usize,
    pub min_overlap: f64,
    pub photometric: PhotometricConfig,
}

impl Default for ViewConfig {
    fn default() -> Self {
        Self {
            scale_range: (0.2, 1.0),
            ratio_range: (3.0 / 4.0, 4.0 / 3.0),
            out_size: 64,
            max_tries: 10,
            min_overlap: 0.05,
            photometric: PhotometricConfig::default(),
        }
    }
}

/// Two augmented views and the reference view they share.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewPair {
    pub x_q: ImagePatch,
    pub x_k: ImagePatch,
    pub x_r: ImagePatch,
    pub spec_q: CropSpec,
    pub spec_k: CropSpec,
    pub spec_r: CropSpec,
}

/// Random-resized-crop rectangle: area fraction from `scale_range`,
/// log-uniform aspect ratio from `ratio_range`, ten attempts, then a
/// ratio-clamped centre crop.
pub fn random_resized_crop(rng: &mut Rng, width: usize, height: usize, cfg: &ViewConfig) -> CropSpec {
    let area = (width * height) as f64;
    let (lr0, lr1) = (libm::log(cfg.ratio_range.0), libm::log(cfg.ratio_range.1));
    for _ in 0..10 {
        let s = if cfg.scale_range.0 < cfg.scale_range.1 {
            rng.random_range(cfg.scale_range.0..=cfg.scale_range.1)
        } else {
            cfg.scale_range.0
        };
        let lr = if lr0 < lr1 { rng.random_range(lr0..=lr1) } else { lr0 };
        let ratio = libm::exp(lr);
        let target = s * area;
        let w = libm::round(libm::sqrt(target * ratio)) as usize;
        let h = libm::round(libm::sqrt(target / ratio)) as usize;
        if w >= MIN_CROP && h >= MIN_CROP && w <= width && h <= height {
            let x0 = rng.random_range(0..=width - w);
            let y0 = rng.random_range(0..=height - h);
            return CropSpec {
                x0,
                y0,
                w,
                h,
                hflip: false,
                out_size: cfg.out_size,
            };
        }
    }
    let in_ratio = width as f64 / height as f64;
    let (w, h) = if in_ratio < cfg.ratio_range.0 {
        (width, libm::round(width as f64 / cfg.ratio_range.0) as usize)
    } else if in_ratio > cfg.ratio_range.1 {
        (libm::round(height as f64 * cfg.ratio_range.1) as usize, height)
    } else {
        (width, height)
    };
    let (w, h) = (w.clamp(1, width), h.clamp(1, height));
    CropSpec {
        x0: (width - w) / 2,
        y0: (height - h) / 2,
        w,
        h,
        hflip: false,
        out_size: cfg.out_size,
    }
}

/// Overlap as a fraction of the smaller crop's area.
pub fn overlap_ratio(a: &CropSpec, b: &CropSpec) -> f64 {
    a.intersection_area(b) as f64 / a.area().min(b.area()) as f64
}

/// Moves `k` so it is centred on `q`'s centre (clamped to the image); the
/// result always contains `q`'s centre pixel.
pub fn recenter(q: &CropSpec, k: &CropSpec, width: usize, height: usize) -> CropSpec {
    let cx = q.x0 + q.w / 2;
    let cy = q.y0 + q.h / 2;
    let x0 = (cx as isize - (k.w / 2) as isize).clamp(0, (width - k.w) as isize) as usize;
    let y0 = (cy as isize - (k.h / 2) as isize).clamp(0, (height - k.h) as isize) as usize;
    CropSpec { x0, y0, ..*k }
}

/// Samples a query/key pair with guaranteed overlap plus their reference.
pub fn sample_view_pair(rng: &mut Rng, image: &ImagePatch, cfg: &ViewConfig) -> Result<ViewPair, GeometryError> {
    let (w, h) = (image.width(), image.height());
    if w < cfg.out_size || h < cfg.out_size || w < MIN_CROP || h < MIN_CROP {
        return Err(GeometryError::ImageTooSmall {
            height: h,
            width: w,
            out_size: cfg.out_size,
        });
    }
    if cfg.max_tries == 0 || !(cfg.scale_range.0 > 0.0 && cfg.scale_range.0 <= cfg.scale_range.1) {
        return Err(GeometryError::BadConfig("need max_tries >= 1 and 0 < scale_lo <= scale_hi"));
    }
    let mut pair = None;
    for _ in 0..cfg.max_tries {
        let q = random_resized_crop(rng, w, h, cfg);
        let k = random_resized_crop(rng, w, h, cfg);
        let ok = overlap_ratio(&q, &k) >= cfg.min_overlap && q.intersection_area(&k) > 0;
        pair = Some((q, k));
        if ok {
            break;
        }
    }
    let (spec_q, mut spec_k) = pair.expect("max_tries >= 1");
    if overlap_ratio(&spec_q, &spec_k) < cfg.min_overlap || spec_q.intersection_area(&spec_k) == 0 {
        spec_k = recenter(&spec_q, &spec_k, w, h);
    }
    let spec_r = spec_q.union(&spec_k);
    let mut spec_q = spec_q;
    let x_q = photometric_augment(rng, &crop_resize(image, &spec_q), &mut spec_q, &cfg.photometric);
    let x_k = photometric_augment(rng, &crop_resize(image, &spec_k), &mut spec_k, &cfg.photometric);
    let x_r = crop_resize(image, &spec_r);
    Ok(ViewPair {
        x_q,
        x_k,
        x_r,
        spec_q,
        spec_k,
        spec_r,
    })
}

fn luma(p: [f64; 3]) -> f64 {
    0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]
}

fn rgb_to_hsv(p: [f64; 3]) -> [f64; 3] {
    let mx = p[0].max(p[1]).max(p[2]);
    let mn = p[0].min(p[1]).min(p[2]);
    let d = mx - mn;
    let h = if d == 0.0 {
        0.0
    } else if mx == p[0] {
        let t = (p[1] - p[2]) / d;
        (if t < 0.0 { t + 6.0 } else { t }) / 6.0
    } else if mx == p[1] {
        ((p[2] - p[0]) / d + 2.0) / 6.0
    } else {
        ((p[0] - p[1]) / d + 4.0) / 6.0
    };
    let s = if mx == 0.0 { 0.0 } else { d / mx };
    [h, s, mx]
}

fn hsv_to_rgb(c: [f64; 3]) -> [f64; 3] {
    let [h, s, v] = c;
    let h6 = (h - libm::floor(h)) * 6.0;
    let i = libm::floor(h6);
    let f = h6 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as u32 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn map_pixels(values: &mut [f64], f: impl Fn([f64; 3]) -> [f64; 3]) {
    for px in values.chunks_exact_mut(3) {
        let out = f([px[0], px[1], px[2]]);
        for c in 0..3 {
            px[c] = out[c].clamp(0.0, 1.0);
        }
    }
}

fn gaussian_blur(values: &[f64], h: usize, w: usize, sigma: f64) -> alloc::vec::Vec<f64> {
    let radius = (libm::ceil(3.0 * sigma) as usize).max(1);
    let kernel: Vec<f64> = {
        let raw: Vec<f64> = (0..=2 * radius)
            .map(|i| {
                let d = i as f64 - radius as f64;
                libm::exp(-d * d / (2.0 * sigma * sigma))
            })
            .collect();
        let s: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / s).collect()
    };
    let clampi = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let mut tmp = alloc::vec![0.0; values.len()];
    for r in 0..h {
        for c in 0..w {
            for ch in 0..3 {
                let mut acc = 0.0;
                for (k, kv) in kernel.iter().enumerate() {
                    let cc = clampi(c as isize + k as isize - radius as isize, w);
                    acc += kv * values[(r * w + cc) * 3 + ch];
                }
                tmp[(r * w + c) * 3 + ch] = acc;
            }
        }
    }
    let mut out = alloc::vec![0.0; values.len()];
    for r in 0..h {
        for c in 0..w {
            for ch in 0..3 {
                let mut acc = 0.0;
                for (k, kv) in kernel.iter().enumerate() {
                    let rr = clampi(r as isize + k as isize - radius as isize, h);
                    acc += kv * tmp[(rr * w + c) * 3 + ch];
                }
                out[(r * w + c) * 3 + ch] = acc;
            }
        }
    }
    out
}

/// Colour jitter (random order), grayscale, Gaussian blur and horizontal
/// flip. Values stay in `[0, 1]`; a flip is recorded in `spec.hflip` since
/// it is geometric and concept masks must follow it.
pub fn photometric_augment(
    rng: &mut Rng,
    view: &ImagePatch,
    spec: &mut CropSpec,
    cfg: &PhotometricConfig,
) -> ImagePatch {
    let (h, w) = (view.height(), view.width());
    let mut values = view.values().to_vec();
    if rng.random_bool(cfg.jitter_prob.clamp(0.0, 1.0)) {
        let mut order = [0u8, 1, 2, 3];
        order.shuffle(rng);
        let factor = |rng: &mut Rng, s: f64| if s > 0.0 { rng.random_range((1.0 - s).max(0.0)..=1.0 + s) } else { 1.0 };
        for op in order {
            match op {
                0 => {
                    let f = factor(rng, cfg.brightness);
                    map_pixels(&mut values, |p| [p[0] * f, p[1] * f, p[2] * f]);
                }
                1 => {
                    let f = factor(rng, cfg.contrast);
                    let n = (h * w) as f64;
                    let mean = values.chunks_exact(3).map(|p| luma([p[0], p[1], p[2]])).sum::<f64>() / n;
                    map_pixels(&mut values, |p| {
                        [mean + f * (p[0] - mean), mean + f * (p[1] - mean), mean + f * (p[2] - mean)]
                    });
                }
                2 => {
                    let f = factor(rng, cfg.saturation);
                    map_pixels(&mut values, |p| {
                        let g = luma(p);
                        [g + f * (p[0] - g), g + f * (p[1] - g), g + f * (p[2] - g)]
                    });
                }
                _ => {
                    let d = if cfg.hue > 0.0 { rng.random_range(-cfg.hue..=cfg.hue) } else { 0.0 };
                    map_pixels(&mut values, |p| {
                        let mut hsv = rgb_to_hsv(p);
                        hsv[0] += d;
                        hsv_to_rgb(hsv)
                    });
                }
            }
        }
    }
    if rng.random_bool(cfg.grayscale_prob.clamp(0.0, 1.0)) {
        map_pixels(&mut values, |p| {
            let g = luma(p);
            [g, g, g]
        });
    }
    if rng.random_bool(cfg.blur_prob.clamp(0.0, 1.0)) {
        let sigma = rng.random_range(cfg.blur_sigma.0..=cfg.blur_sigma.1);
        values = gaussian_blur(&values, h, w, sigma);
        map_pixels(&mut values, |p| p);
    }
    let out = ImagePatch::from_clamped(h, w, values);
    if rng.random_bool(cfg.flip_prob.clamp(0.0, 1.0)) {
        spec.hflip = !spec.hflip;
        mirror(&out)
    } else {
        out
    }
}

/// Reference-frame concept labels sampled at a view's feature cells.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RestoredMask {
    pub featres: usize,
    /// Row-major `featres x featres` labels.
    pub labels: Vec<u32>,
    /// Labels with at least one cell, ascending.
    pub present: Vec<u32>,
}

impl RestoredMask {
    /// Raster indices of cells carrying `label`, ascending.
    pub fn cells_of(&self, label: u32) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == label)
            .map(|(i, _)| i)
            .collect()
    }

    /// Restored mask with every cell labelled `0`.
    pub fn full(featres: usize) -> Self {
        Self {
            featres,
            labels: alloc::vec![0; featres * featres],
            present: alloc::vec![0],
        }
    }
}

/// Restores a reference-view concept mask into view `spec_v` at
/// `featres x featres`: each cell centre is mapped view -> source ->
/// reference and takes the label of the mask pixel containing it. The
/// mapping is done in integer arithmetic, so points on pixel borders fall
/// to the right/lower pixel exactly.
pub fn restore_mask(
    mask: &ConceptMask,
    spec_r: &CropSpec,
    spec_v: &CropSpec,
    featres: usize,
) -> Result<RestoredMask, GeometryError> {
    if !spec_r.contains(spec_v) {
        return Err(GeometryError::NotContained {
            view: spec_v.rect(),
            reference: spec_r.rect(),
        });
    }
    let (mh, mw) = (mask.height, mask.width);
    let f2 = 2 * featres;
    // Cell centre offsets from the reference origin, in units of 1/(2F)
    // source pixels, scaled to mask pixels.
    let to_mask = |offset: usize, extent: usize, cell: usize, ref_extent: usize, mask_extent: usize| {
        let num = offset * f2 + (2 * cell + 1) * extent;
        (num * mask_extent) / (f2 * ref_extent)
    };
    let mut labels = Vec::with_capacity(featres * featres);
    for i in 0..featres {
        let row = to_mask(spec_v.y0 - spec_r.y0, spec_v.h, i, spec_r.h, mh);
        for j in 0..featres {
            let jj = if spec_v.hflip { featres - 1 - j } else { j };
            let col = to_mask(spec_v.x0 - spec_r.x0, spec_v.w, jj, spec_r.w, mw);
            if row >= mh || col >= mw {
                return Err(GeometryError::OutsideReference { row: i, col: j });
            }
            labels.push(mask.labels[row * mw + col]);
        }
    }
    debug_assert!(!labels.contains(&ABSENT));
    let mut present = labels.clone();
    present.sort_unstable();
    present.dedup();
    Ok(RestoredMask {
        featres,
        labels,
        present,
    })
}

/// Labels present in both restored masks, ascending.
pub fn shared_concepts(m_q: &RestoredMask, m_k: &RestoredMask) -> Vec<u32> {
    let (mut i, mut j) = (0, 0);
    let mut out = Vec::new();
    while i < m_q.present.len() && j < m_k.present.len() {
        match m_q.present[i].cmp(&m_k.present[j]) {
            core::cmp::Ordering::Less => i += 1,
            core::cmp::Ordering::Greater => j += 1,
            core::cmp::Ordering::Equal => {
                out.push(m_q.present[i]);
                i += 1;
                j += 1;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::concepts::grid_concepts;
    use crate::rng;

    fn noise_image(seed: u64, size: usize) -> ImagePatch {
        let mut r = rng::stream(seed, 42, 0, 0);
        ImagePatch::new(size, size, (0..size * size * 3).map(|_| r.random::<f64>()).collect()).unwrap()
    }

    #[test]
    fn union_arithmetic() {
        let q = CropSpec { x0: 0, y0: 0, w: 32, h: 32, hflip: false, out_size: 64 };
        let k = CropSpec { x0: 16, y0: 16, w: 32, h: 32, hflip: true, out_size: 64 };
        let r = q.union(&k);
        assert_eq!(r.rect(), (0, 0, 48, 48));
        assert!(!r.hflip);
    }

    #[test]
    fn degenerate_scale_gives_full_image() {
        let cfg = ViewConfig {
            scale_range: (1.0, 1.0),
            ratio_range: (1.0, 1.0),
            photometric: PhotometricConfig::identity(),
            ..ViewConfig::default()
        };
        let im = noise_image(1, 64);
        let vp = sample_view_pair(&mut rng::stream(1, 0, 0, 0), &im, &cfg).unwrap();
        let full = CropSpec::full(64, 64, 64);
        assert_eq!(vp.spec_q, full);
        assert_eq!(vp.spec_k, full);
        assert_eq!(vp.spec_r, full);
        assert_eq!(vp.x_r, vp.x_q);
    }

    #[test]
    fn too_small_image_rejected() {
        let im = noise_image(1, 32);
        assert!(sample_view_pair(&mut rng::stream(1, 0, 0, 0), &im, &ViewConfig::default()).is_err());
    }

    #[test]
    fn identity_augment() {
        let im = noise_image(2, 16);
        let mut spec = CropSpec::full(16, 16, 16);
        let out = photometric_augment(&mut rng::stream(2, 0, 0, 0), &im, &mut spec, &PhotometricConfig::identity());
        assert_eq!(out, im);
        assert!(!spec.hflip);
    }

    #[test]
    fn grayscale_equalises_channels() {
        let cfg = PhotometricConfig { grayscale_prob: 1.0, ..PhotometricConfig::identity() };
        let im = noise_image(3, 16);
        let mut spec = CropSpec::full(16, 16, 16);
        let out = photometric_augment(&mut rng::stream(3, 0, 0, 0), &im, &mut spec, &cfg);
        for p in out.values().chunks(3) {
            assert_eq!(p[0], p[1]);
            assert_eq!(p[1], p[2]);
        }
    }

    #[test]
    fn flip_is_recorded() {
        let cfg = PhotometricConfig { flip_prob: 1.0, ..PhotometricConfig::identity() };
        let im = noise_image(4, 8);
        let mut spec = CropSpec::full(8, 8, 8);
        let out = photometric_augment(&mut rng::stream(4, 0, 0, 0), &im, &mut spec, &cfg);
        assert!(spec.hflip);
        assert_eq!(out.pixel(2, 0), im.pixel(2, 7));
        // A mirrored crop equals cropping with the flag set.
        assert_eq!(crop_resize(&im, &spec), out);
    }

    #[test]
    fn restore_identity_and_flip() {
        let m = grid_concepts(4, 16).unwrap();
        let r = CropSpec::full(16, 16, 16);
        let id = restore_mask(&m, &r, &r, 16).unwrap();
        assert_eq!(id.labels, m.labels);
        let flipped = restore_mask(&m, &r, &CropSpec { hflip: true, ..r }, 16).unwrap();
        for row in 0..16 {
            for col in 0..16 {
                assert_eq!(flipped.labels[row * 16 + col], m.labels[row * 16 + 15 - col]);
            }
        }
    }

    #[test]
    fn restore_rejects_uncontained_view() {
        let m = grid_concepts(2, 8).unwrap();
        let r = CropSpec { x0: 4, y0: 4, w: 20, h: 20, hflip: false, out_size: 8 };
        let v = CropSpec { x0: 0, y0: 4, w: 10, h: 10, hflip: false, out_size: 8 };
        assert!(matches!(restore_mask(&m, &r, &v, 2), Err(GeometryError::NotContained { .. })));
    }

    #[test]
    fn shared_concepts_cases() {
        let a = RestoredMask { featres: 2, labels: alloc::vec![0, 1, 2, 2], present: alloc::vec![0, 1, 2] };
        assert_eq!(shared_concepts(&a, &a), alloc::vec![0, 1, 2]);
        let b = RestoredMask { featres: 2, labels: alloc::vec![3, 3, 4, 4], present: alloc::vec![3, 4] };
        assert!(shared_concepts(&a, &b).is_empty());
    }
}
