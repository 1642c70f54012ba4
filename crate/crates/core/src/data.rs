//! Toy dataset generation, binary PPM (P6) images and folder ingestion.
//!
//! Pixel values live in `[−1, 1]`; byte `b` maps to `b/127.5 − 1`.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::rng::{Purpose, RngStream};
use crate::tensor::{Element, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed PPM header: {0}")]
    MalformedHeader(String),
    #[error("unsupported PPM maxval {0} (only 255)")]
    UnsupportedMaxval(u32),
    #[error("no PPM images found in {0}")]
    Empty(PathBuf),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, DataError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Images `[n, h, w, c]` in `[−1, 1]` with optional labels.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub images: Tensor<f32>,
    pub labels: Option<Vec<usize>>,
    pub class_count: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn resolution(&self) -> usize {
        self.images.shape()[1]
    }

    /// Gathers the given examples into a batch.
    pub fn batch<E: Element>(&self, ids: &[usize]) -> std::result::Result<(Tensor<E>, Vec<Option<usize>>), TensorError> {
        let per: usize = self.images.shape()[1..].iter().product();
        let src = self.images.data();
        let mut data = Vec::with_capacity(ids.len() * per);
        for &i in ids {
            data.extend(src[i * per..(i + 1) * per].iter().map(|&v| E::from_f64(v as f64)));
        }
        let mut shape = self.images.shape().to_vec();
        shape[0] = ids.len();
        let labels = ids.iter().map(|&i| self.labels.as_ref().map(|l| l[i])).collect();
        Ok((Tensor::from_vec(data, &shape)?, labels))
    }
}

/// Byte for a pixel value (clamped to `[−1, 1]`).
pub fn quantize(v: f64) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

pub fn dequantize(b: u8) -> f64 {
    b as f64 / 127.5 - 1.0
}

/// Side of the square in which shapes are supersampled for anti-aliasing.
const SUPERSAMPLE: usize = 4;

/// Two classes: filled circles (0) and axis-aligned squares (1) on a dark
/// background, with jittered position, size, colour and background level.
pub fn gen_shapes(n: usize, res: usize, seed: u64) -> Dataset {
    assert!(res >= 16, "shape images need at least 16 pixels per side");
    let mut rng = RngStream::new(seed, Purpose::Data);
    let mut data = Vec::with_capacity(n * res * res * 3);
    let mut labels = Vec::with_capacity(n);
    let r = res as f64;
    for _ in 0..n {
        let class = rng.below(2);
        // equal-area circle and square for a given size draw
        let size = r * (0.18 + 0.12 * rng.uniform());
        let half = if class == 0 { size } else { size * std::f64::consts::PI.sqrt() / 2.0 };
        let margin = half + 1.0;
        let cx = margin + (r - 2.0 * margin) * rng.uniform();
        let cy = margin + (r - 2.0 * margin) * rng.uniform();
        let background = -1.0 + 0.3 * rng.uniform();
        let colour: Vec<f64> = (0..3).map(|_| 0.2 + 0.8 * rng.uniform()).collect();
        for y in 0..res {
            for x in 0..res {
                let mut hits = 0;
                for sy in 0..SUPERSAMPLE {
                    for sx in 0..SUPERSAMPLE {
                        let px = x as f64 + (sx as f64 + 0.5) / SUPERSAMPLE as f64;
                        let py = y as f64 + (sy as f64 + 0.5) / SUPERSAMPLE as f64;
                        let (dx, dy) = (px - cx, py - cy);
                        let inside = if class == 0 {
                            dx * dx + dy * dy <= half * half
                        } else {
                            dx.abs() <= half && dy.abs() <= half
                        };
                        hits += inside as usize;
                    }
                }
                let cover = hits as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
                data.extend(colour.iter().map(|&c| (background + cover * (c - background)) as f32));
            }
        }
        labels.push(class);
    }
    Dataset {
        images: Tensor::from_vec(data, &[n, res, res, 3]).expect("finite pixels"),
        labels: Some(labels),
        class_count: 2,
    }
}

/// Shape statistic: coefficient of variation of the foreground boundary
/// radius along rays cast from the brightness-weighted centroid. Near zero
/// for discs, about 0.1 for squares. `img: [h, w, c]` data, row-major.
pub fn radial_statistic(img: &[f32], h: usize, w: usize, c: usize) -> f64 {
    let lum: Vec<f64> = img.chunks(c).map(|p| p.iter().map(|&v| v as f64).sum::<f64>() / c as f64).collect();
    let (lo, hi) = lum.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if hi - lo < 1e-6 {
        return 0.0;
    }
    let threshold = 0.5 * (lo + hi);
    let weights: Vec<f64> = lum.iter().map(|&v| (v - threshold).max(0.0)).collect();
    let total: f64 = weights.iter().sum();
    let (mut cy, mut cx) = (0.0, 0.0);
    for (i, &wt) in weights.iter().enumerate() {
        cy += wt * ((i / w) as f64 + 0.5);
        cx += wt * ((i % w) as f64 + 0.5);
    }
    let (cy, cx) = (cy / total, cx / total);
    let inside = |y: f64, x: f64| -> bool {
        if y < 0.0 || x < 0.0 || y >= h as f64 || x >= w as f64 {
            return false;
        }
        lum[y as usize * w + x as usize] > threshold
    };
    const RAYS: usize = 64;
    const STEP: f64 = 0.05;
    let limit = (h.max(w) as f64) * 1.5;
    let radii: Vec<f64> = (0..RAYS)
        .map(|k| {
            let a = 2.0 * std::f64::consts::PI * (k as f64 + 0.5) / RAYS as f64;
            let (dy, dx) = (a.sin(), a.cos());
            let mut t = 0.0;
            while t < limit && inside(cy + t * dy, cx + t * dx) {
                t += STEP;
            }
            t
        })
        .collect();
    let mean = radii.iter().sum::<f64>() / RAYS as f64;
    if mean <= 0.0 {
        return 0.0;
    }
    let var = radii.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / RAYS as f64;
    var.sqrt() / mean
}

/// Per-image statistics of a dataset.
pub fn radial_statistics(images: &Tensor<f32>) -> Vec<f64> {
    let &[n, h, w, c] = images.shape() else { return Vec::new() };
    let per = h * w * c;
    (0..n).map(|i| radial_statistic(&images.data()[i * per..(i + 1) * per], h, w, c)).collect()
}

/// Threshold halfway between the mean statistic of circles and of squares.
pub fn calibrate_threshold(ds: &Dataset) -> f64 {
    let stats = radial_statistics(&ds.images);
    let labels = ds.labels.as_ref().expect("labelled dataset");
    let mean_of = |class: usize| {
        let v: Vec<f64> = stats.iter().zip(labels).filter(|(_, &l)| l == class).map(|(s, _)| *s).collect();
        v.iter().sum::<f64>() / v.len().max(1) as f64
    };
    0.5 * (mean_of(0) + mean_of(1))
}

/// 0 = circle, 1 = square.
pub fn classify_shape(stat: f64, threshold: f64) -> usize {
    usize::from(stat > threshold)
}

/// Encodes `[h, w, 3]` pixels as binary PPM.
pub fn encode_ppm(pixels: &[f32], h: usize, w: usize) -> Vec<u8> {
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend(pixels.iter().map(|&v| quantize(v as f64)));
    out
}

/// Decodes binary PPM into `(h, w, pixels)`.
pub fn decode_ppm(bytes: &[u8]) -> Result<(usize, usize, Vec<f32>)> {
    let mut pos = 0;
    let mut token = || -> Result<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() && bytes[pos] != b'#' {
            pos += 1;
        }
        if start == pos {
            return Err(DataError::MalformedHeader("truncated header".into()));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let magic = token()?;
    if magic != "P6" {
        return Err(DataError::MalformedHeader(format!("magic {magic:?}, expected P6")));
    }
    let mut number = |what: &str| -> Result<u32> {
        let t = token()?;
        t.parse().map_err(|_| DataError::MalformedHeader(format!("{what} {t:?} is not a number")))
    };
    let w = number("width")? as usize;
    let h = number("height")? as usize;
    let maxval = number("maxval")?;
    if maxval != 255 {
        return Err(DataError::UnsupportedMaxval(maxval));
    }
    // exactly one whitespace byte separates the header from the payload
    let start = pos + 1;
    let need = w * h * 3;
    if w == 0 || h == 0 || bytes.len() < start + need {
        return Err(DataError::MalformedHeader(format!("{w}×{h} payload truncated")));
    }
    let pixels = bytes[start..start + need].iter().map(|&b| dequantize(b) as f32).collect();
    Ok((h, w, pixels))
}

/// Writes an `[h, w, 3]` tensor (or `[1, h, w, 3]`) as PPM.
pub fn save_image<E: Element>(t: &Tensor<E>, path: &Path) -> Result<()> {
    let (h, w) = match *t.shape() {
        [h, w, 3] | [1, h, w, 3] => (h, w),
        _ => {
            return Err(DataError::Tensor(TensorError::InvalidSpec {
                op: "save_image",
                reason: format!("expected [h, w, 3], got {:?}", t.shape()),
            }))
        }
    };
    let pixels: Vec<f32> = t.data().iter().map(|v| v.as_f64() as f32).collect();
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(&encode_ppm(&pixels, h, w)).map_err(io_err(path))
}

/// Reads a PPM as `[h, w, 3]`.
pub fn load_image(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let (h, w, px) = decode_ppm(&bytes)?;
    Ok(Tensor::from_vec(px, &[h, w, 3])?)
}

/// Center-crops to a square, then nearest-neighbour resizes to `res`.
pub fn crop_and_resize(px: &[f32], h: usize, w: usize, res: usize) -> Vec<f32> {
    let side = h.min(w);
    let (oy, ox) = ((h - side) / 2, (w - side) / 2);
    let mut out = Vec::with_capacity(res * res * 3);
    for y in 0..res {
        let sy = oy + (y * side) / res;
        for x in 0..res {
            let sx = ox + (x * side) / res;
            out.extend_from_slice(&px[(sy * w + sx) * 3..][..3]);
        }
    }
    out
}

fn ppm_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|e| e.eq_ignore_ascii_case("ppm")))
        .collect();
    files.sort();
    Ok(files)
}

/// Loads every `.ppm` in `dir` (unlabelled), or, when `dir` holds
/// subdirectories, one class per subdirectory. Both files and class
/// directories are visited in lexicographic order.
pub fn load_folder(dir: &Path, res: usize) -> Result<Dataset> {
    let mut classes: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    classes.sort();
    let groups: Vec<(Option<usize>, Vec<PathBuf>)> = if classes.is_empty() {
        vec![(None, ppm_files(dir)?)]
    } else {
        classes.iter().enumerate().map(|(i, c)| Ok((Some(i), ppm_files(c)?))).collect::<Result<_>>()?
    };
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (label, files) in &groups {
        for f in files {
            let img = load_image(f)?;
            let (h, w) = (img.shape()[0], img.shape()[1]);
            data.extend(crop_and_resize(img.data(), h, w, res));
            labels.extend(*label);
        }
    }
    let n = data.len() / (res * res * 3);
    if n == 0 {
        return Err(DataError::Empty(dir.to_path_buf()));
    }
    Ok(Dataset {
        images: Tensor::from_vec(data, &[n, res, res, 3])?,
        labels: (!classes.is_empty()).then_some(labels),
        class_count: classes.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantization_is_idempotent() {
        for b in 0..=255u8 {
            assert_eq!(quantize(dequantize(b)), b);
        }
        assert_eq!(quantize(-1.0), 0);
        assert_eq!(quantize(1.0), 255);
    }

    #[test]
    fn known_fixture_decodes() {
        let bytes = b"P6\n# fixture\n2 2\n255\n\x00\x00\x00\xff\xff\xff\x7f\x80\x00\x33\x66\x99";
        let (h, w, px) = decode_ppm(bytes).unwrap();
        assert_eq!((h, w), (2, 2));
        let want = [0.0, 0.0, 0.0, 255.0, 255.0, 255.0, 127.0, 128.0, 0.0, 51.0, 102.0, 153.0];
        for (p, b) in px.iter().zip(want) {
            assert_eq!(*p, (b / 127.5 - 1.0) as f32);
        }
    }

    #[test]
    fn black_image_is_all_zero_bytes() {
        let bytes = encode_ppm(&[-1.0; 12], 2, 2);
        assert!(bytes[bytes.len() - 12..].iter().all(|&b| b == 0));
    }

    #[test]
    fn header_errors() {
        assert!(matches!(decode_ppm(b"P5\n1 1\n255\n\0"), Err(DataError::MalformedHeader(_))));
        assert!(matches!(decode_ppm(b"P6\n1 1\n65535\n\0\0\0\0\0\0"), Err(DataError::UnsupportedMaxval(65535))));
        assert!(matches!(decode_ppm(b"P6\n2 2\n255\n\0"), Err(DataError::MalformedHeader(_))));
    }

    #[test]
    fn shapes_are_deterministic_and_in_range() {
        let a = gen_shapes(8, 16, 3);
        let b = gen_shapes(8, 16, 3);
        assert_eq!(a.images.data(), b.images.data());
        assert!(a.images.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!(a.labels.as_ref().unwrap().iter().all(|&l| l < 2));
    }

    #[test]
    fn circles_have_lower_radial_statistic() {
        let ds = gen_shapes(64, 32, 7);
        let stats = radial_statistics(&ds.images);
        let labels = ds.labels.as_ref().unwrap();
        let threshold = calibrate_threshold(&ds);
        let correct = stats.iter().zip(labels).filter(|(s, &l)| classify_shape(**s, threshold) == l).count();
        assert!(correct >= 62, "{correct}/64");
    }

    #[test]
    fn crop_takes_center() {
        // 1×3 row of distinct pixels → center pixel
        let px = [-1.0, -1.0, -1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        assert_eq!(crop_and_resize(&px, 1, 3, 1), vec![0.0, 0.0, 0.0]);
    }
}
