//! Image and label-map files: binary PPM/PGM and 8-bit PNG.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use concl_core::image::{ImagePatch, LabelMap};

#[derive(Debug, thiserror::Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {message}")]
    Format { path: String, message: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn fmt_err(path: &Path, message: impl Into<String>) -> IoError {
    IoError::Format {
        path: path.display().to_string(),
        message: message.into(),
    }
}

/// Splits a binary PNM into magic, width, height, maxval and pixel bytes.
fn parse_pnm<'a>(path: &Path, bytes: &'a [u8]) -> Result<(&'a [u8], usize, usize, usize, &'a [u8]), IoError> {
    let mut pos = 0;
    let mut fields: Vec<&[u8]> = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(fmt_err(path, "truncated header"));
        }
        fields.push(&bytes[start..pos]);
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let num = |f: &[u8], what: &str| -> Result<usize, IoError> {
        std::str::from_utf8(f)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| fmt_err(path, format!("bad {what}")))
    };
    let (w, h, maxval) = (num(fields[1], "width")?, num(fields[2], "height")?, num(fields[3], "maxval")?);
    if maxval == 0 || maxval > 255 {
        return Err(fmt_err(path, format!("unsupported maxval {maxval} (only 8-bit files)")));
    }
    Ok((fields[0], w, h, maxval, bytes.get(pos..).unwrap_or(&[])))
}

/// Reads a binary PPM (P6) or PGM (P5); gray images are replicated to RGB.
pub fn read_pnm(path: &Path) -> Result<ImagePatch, IoError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let (magic, w, h, maxval, raster) = parse_pnm(path, &bytes)?;
    let channels = match magic {
        b"P6" => 3,
        b"P5" => 1,
        _ => return Err(fmt_err(path, "not a binary PPM/PGM")),
    };
    if raster.len() < w * h * channels {
        return Err(fmt_err(path, format!("raster holds {} bytes, expected {}", raster.len(), w * h * channels)));
    }
    let scale = maxval as f64;
    let values = raster[..w * h * channels]
        .chunks_exact(channels)
        .flat_map(|p| {
            let rgb = if channels == 3 { [p[0], p[1], p[2]] } else { [p[0]; 3] };
            rgb.map(|v| v as f64 / scale)
        })
        .collect();
    ImagePatch::new(h, w, values).map_err(|e| fmt_err(path, e.to_string()))
}

/// Reads a PGM (P5) as raw integer labels.
pub fn read_pgm_labels(path: &Path) -> Result<LabelMap, IoError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let (magic, w, h, _, raster) = parse_pnm(path, &bytes)?;
    if magic != b"P5" {
        return Err(fmt_err(path, "not a binary PGM"));
    }
    if raster.len() < w * h {
        return Err(fmt_err(path, "truncated raster"));
    }
    LabelMap::new(h, w, raster[..w * h].iter().map(|&v| v as u32).collect()).map_err(|e| fmt_err(path, e.to_string()))
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn write_bytes(path: &Path, header: String, raster: &[u8]) -> Result<(), IoError> {
    let mut f = BufWriter::new(File::create(path).map_err(io_err(path))?);
    f.write_all(header.as_bytes()).map_err(io_err(path))?;
    f.write_all(raster).map_err(io_err(path))?;
    f.flush().map_err(io_err(path))
}

pub fn write_ppm(path: &Path, image: &ImagePatch) -> Result<(), IoError> {
    let raster: Vec<u8> = image.values().iter().map(|&v| quantize(v)).collect();
    write_bytes(path, format!("P6\n{} {}\n255\n", image.width(), image.height()), &raster)
}

/// Writes 8-bit gray levels.
pub fn write_pgm(path: &Path, height: usize, width: usize, gray: &[u8]) -> Result<(), IoError> {
    write_bytes(path, format!("P5\n{width} {height}\n255\n"), gray)
}

/// Reads an 8-bit gray, gray-alpha, RGB or RGBA PNG; alpha is dropped.
pub fn read_png(path: &Path) -> Result<ImagePatch, IoError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info().map_err(|e| fmt_err(path, e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| fmt_err(path, "image too large"))?];
    let info = reader.next_frame(&mut buf).map_err(|e| fmt_err(path, e.to_string()))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => return Err(fmt_err(path, "palette not expanded")),
    };
    let values = buf[..info.buffer_size()]
        .chunks_exact(channels)
        .flat_map(|p| {
            let rgb = if channels >= 3 { [p[0], p[1], p[2]] } else { [p[0]; 3] };
            rgb.map(|v| v as f64 / 255.0)
        })
        .collect();
    ImagePatch::new(h, w, values).map_err(|e| fmt_err(path, e.to_string()))
}

/// Reads any supported image by extension.
pub fn read_image(path: &Path) -> Result<ImagePatch, IoError> {
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("png") => read_png(path),
        Some("ppm" | "pgm" | "pnm") => read_pnm(path),
        _ => Err(fmt_err(path, "unsupported extension (expected png, ppm or pgm)")),
    }
}

fn is_image(p: &Path) -> bool {
    matches!(
        p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("png" | "ppm" | "pgm" | "pnm")
    )
}

/// Loads every image in `dir` (not recursive) in lexicographic file-name
/// order, resized bilinearly to `size x size`. Unreadable files are skipped
/// with a warning.
pub fn load_folder(dir: &Path, size: usize) -> Result<Vec<ImagePatch>, IoError> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_image(p))
        .collect();
    paths.sort();
    let mut out = Vec::with_capacity(paths.len());
    for p in paths {
        match read_image(&p) {
            Ok(im) if im.height() == size && im.width() == size => out.push(im),
            Ok(im) => out.push(im.resize_bilinear(size, size)),
            Err(e) => log::warn!("skipping {e}"),
        }
    }
    Ok(out)
}

/// Reads a whole file.
pub fn read_all(path: &Path) -> Result<Vec<u8>, IoError> {
    let mut v = Vec::new();
    File::open(path).map_err(io_err(path))?.read_to_end(&mut v).map_err(io_err(path))?;
    Ok(v)
}

/// Writes through a temporary sibling and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}
