//! Datasets: the procedural localized-motif generator, the directory loader
//! (binary PPM), and seeded train-time augmentation.
//!
//! Synthetic images carry their class identity in a small glyph stamped at a
//! random position over a smooth random background, so part localization is
//! genuinely informative: raw-pixel nearest-neighbor matching is poor while
//! motif-aligned crops are nearly perfectly separable.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{CsqaError, Result};
use crate::harness::config::DatasetSpec;
use crate::tensor::init::derive_rng;

const GLYPH_GRID: usize = 8;
const TAG_GLYPH: u64 = 0x11;
const TAG_SAMPLE: u64 = 0x22;
const TAG_AUGMENT: u64 = 0x33;
const TAG_SHUFFLE: u64 = 0x44;

#[derive(Debug, Clone)]
pub struct Sample {
    /// Row-major [3, R, R] pixels in [0, 1], quantized to 1/255 steps.
    pub pixels: Vec<f64>,
    pub label: usize,
    /// Ground-truth motif box (x0, y0, x1, y1); known for synthetic data.
    pub motif_box: Option<[f64; 4]>,
}

#[derive(Debug, Clone)]
pub struct LabeledSet {
    pub samples: Vec<Sample>,
    pub classes: usize,
    pub resolution: usize,
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub train: LabeledSet,
    pub test: LabeledSet,
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Class glyph: an 8×8 binary pattern drawn from the (seed, class) stream,
/// re-salted until all pairs differ in at least 12 cells.
fn glyphs(seed: u64, classes: usize) -> Vec<Vec<bool>> {
    let mut out: Vec<Vec<bool>> = Vec::with_capacity(classes);
    for class in 0..classes {
        let mut salt = 0u64;
        loop {
            let mut rng = derive_rng(seed, &[TAG_GLYPH, class as u64, salt]);
            let g: Vec<bool> = (0..GLYPH_GRID * GLYPH_GRID).map(|_| rng.gen_bool(0.5)).collect();
            let distinct = out.iter().all(|other| {
                g.iter().zip(other.iter()).filter(|(a, b)| a != b).count() >= 12
            });
            if distinct {
                out.push(g);
                break;
            }
            salt += 1;
        }
    }
    out
}

/// Smooth per-channel background: a coarse random grid bilinearly upsampled,
/// plus fine pixel noise.
fn background(rng: &mut ChaCha8Rng, r: usize) -> Vec<f64> {
    const COARSE: usize = 4;
    let mut pixels = vec![0.0; 3 * r * r];
    for c in 0..3 {
        let grid: Vec<f64> = (0..COARSE * COARSE).map(|_| rng.gen_range(0.0..1.0)).collect();
        for y in 0..r {
            for x in 0..r {
                let gy = y as f64 / r as f64 * (COARSE - 1) as f64;
                let gx = x as f64 / r as f64 * (COARSE - 1) as f64;
                let (y0, x0) = (gy.floor() as usize, gx.floor() as usize);
                let (y1, x1) = ((y0 + 1).min(COARSE - 1), (x0 + 1).min(COARSE - 1));
                let (fy, fx) = (gy - y0 as f64, gx - x0 as f64);
                let v = grid[y0 * COARSE + x0] * (1.0 - fy) * (1.0 - fx)
                    + grid[y0 * COARSE + x1] * (1.0 - fy) * fx
                    + grid[y1 * COARSE + x0] * fy * (1.0 - fx)
                    + grid[y1 * COARSE + x1] * fy * fx;
                pixels[(c * r + y) * r + x] = v;
            }
        }
    }
    for p in pixels.iter_mut() {
        *p += rng.gen_range(-0.08..0.08);
    }
    pixels
}

fn render_sample(seed: u64, split: u64, class: usize, index: usize, spec: &DatasetSpec, glyph: &[bool]) -> Sample {
    let r = spec.resolution;
    let m = spec.motif_size;
    let mut rng = derive_rng(seed, &[TAG_SAMPLE, split, class as u64, index as u64]);
    let mut pixels = background(&mut rng, r);
    let margin = 2usize;
    let x0 = rng.gen_range(margin..=r - m - margin);
    let y0 = rng.gen_range(margin..=r - m - margin);
    let cell = m as f64 / GLYPH_GRID as f64;
    for y in 0..m {
        for x in 0..m {
            let gy = ((y as f64 / cell) as usize).min(GLYPH_GRID - 1);
            let gx = ((x as f64 / cell) as usize).min(GLYPH_GRID - 1);
            let v = if glyph[gy * GLYPH_GRID + gx] { 0.95 } else { 0.05 };
            for c in 0..3 {
                pixels[(c * r + y0 + y) * r + x0 + x] = v;
            }
        }
    }
    for p in pixels.iter_mut() {
        *p = quantize(*p);
    }
    Sample {
        pixels,
        label: class,
        motif_box: Some([x0 as f64, y0 as f64, (x0 + m) as f64, (y0 + m) as f64]),
    }
}

/// Deterministic synthetic dataset: same seed, bitwise-identical samples.
pub fn generate_synthetic(spec: &DatasetSpec, seed: u64) -> Result<SyntheticData> {
    spec.validate()?;
    let glyphs = glyphs(seed, spec.classes);
    let build = |split: u64, per_class: usize| -> LabeledSet {
        let mut samples = Vec::with_capacity(spec.classes * per_class);
        for class in 0..spec.classes {
            for index in 0..per_class {
                samples.push(render_sample(seed, split, class, index, spec, &glyphs[class]));
            }
        }
        LabeledSet { samples, classes: spec.classes, resolution: spec.resolution }
    };
    Ok(SyntheticData {
        train: build(0, spec.samples_per_class),
        test: build(1, spec.test_samples_per_class),
    })
}

// ── augmentation ──────────────────────────────────────────────────────

/// Training augmentation: zero-pad by 4, take a random R×R crop, flip
/// horizontally with probability 1/2. Integer shifts only, so quantization
/// is preserved. Deterministic in (seed, epoch, index).
pub fn augment(sample: &Sample, resolution: usize, seed: u64, epoch: usize, index: usize) -> Vec<f64> {
    const PAD: usize = 4;
    let r = resolution;
    let mut rng = derive_rng(seed, &[TAG_AUGMENT, epoch as u64, index as u64]);
    let dx = rng.gen_range(0..=2 * PAD);
    let dy = rng.gen_range(0..=2 * PAD);
    let flip = rng.gen_bool(0.5);
    let mut out = vec![0.0; 3 * r * r];
    for c in 0..3 {
        for y in 0..r {
            let sy = y as isize + dy as isize - PAD as isize;
            if sy < 0 || sy >= r as isize {
                continue;
            }
            for x in 0..r {
                let sx0 = x as isize + dx as isize - PAD as isize;
                if sx0 < 0 || sx0 >= r as isize {
                    continue;
                }
                let tx = if flip { r - 1 - x } else { x };
                out[(c * r + y) * r + tx] = sample.pixels[(c * r + sy as usize) * r + sx0 as usize];
            }
        }
    }
    out
}

/// Epoch shuffle order: a pure function of (seed, epoch).
pub fn shuffle_order(len: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = derive_rng(seed, &[TAG_SHUFFLE, epoch as u64]);
    let mut idx: Vec<usize> = (0..len).collect();
    // Fisher-Yates
    for i in (1..len).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
    idx
}

// ── PPM I/O ───────────────────────────────────────────────────────────

pub fn write_ppm(path: &Path, pixels: &[f64], resolution: usize) -> Result<()> {
    let r = resolution;
    let mut buf = Vec::with_capacity(3 * r * r + 32);
    buf.extend_from_slice(format!("P6\n{r} {r}\n255\n").as_bytes());
    for y in 0..r {
        for x in 0..r {
            for c in 0..3 {
                let v = (pixels[(c * r + y) * r + x].clamp(0.0, 1.0) * 255.0).round() as u8;
                buf.push(v);
            }
        }
    }
    std::fs::write(path, buf).map_err(|e| CsqaError::io(path.display().to_string(), e))
}

pub fn read_ppm(path: &Path) -> Result<(Vec<f64>, usize)> {
    let mut file = std::fs::File::open(path).map_err(|e| CsqaError::io(path.display().to_string(), e))?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes).map_err(|e| CsqaError::io(path.display().to_string(), e))?;
    let fmt_err = |detail: &str| CsqaError::Format { path: path.display().to_string(), detail: detail.into() };
    let mut pos = 0usize;
    let mut token = |bytes: &[u8]| -> std::result::Result<String, CsqaError> {
        while pos < bytes.len() && (bytes[pos] as char).is_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            while pos < bytes.len() && (bytes[pos] as char).is_whitespace() {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !(bytes[pos] as char).is_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(CsqaError::Format { path: "<ppm>".into(), detail: "truncated header".into() });
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token(&bytes)? != "P6" {
        return Err(fmt_err("not a binary PPM (P6)"));
    }
    let w: usize = token(&bytes)?.parse().map_err(|_| fmt_err("bad width"))?;
    let h: usize = token(&bytes)?.parse().map_err(|_| fmt_err("bad height"))?;
    let maxval: usize = token(&bytes)?.parse().map_err(|_| fmt_err("bad maxval"))?;
    if w != h {
        return Err(fmt_err("image must be square"));
    }
    if maxval != 255 {
        return Err(fmt_err("maxval must be 255"));
    }
    pos += 1; // single whitespace after maxval
    if bytes.len() < pos + 3 * w * h {
        return Err(fmt_err("truncated pixel data"));
    }
    let mut pixels = vec![0.0; 3 * w * h];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let v = bytes[pos + (y * w + x) * 3 + c] as f64 / 255.0;
                pixels[(c * h + y) * w + x] = v;
            }
        }
    }
    Ok((pixels, w))
}

/// Write a labeled set as one subdirectory per class of PPM images, plus a
/// sidecar listing the ground-truth motif boxes when known.
pub fn write_directory(set: &LabeledSet, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CsqaError::io(dir.display().to_string(), e))?;
    let mut boxes = String::new();
    let mut per_class_counter = vec![0usize; set.classes];
    for sample in &set.samples {
        let class_dir = dir.join(format!("class_{:03}", sample.label));
        std::fs::create_dir_all(&class_dir).map_err(|e| CsqaError::io(class_dir.display().to_string(), e))?;
        let idx = per_class_counter[sample.label];
        per_class_counter[sample.label] += 1;
        let name = format!("img_{idx:04}.ppm");
        write_ppm(&class_dir.join(&name), &sample.pixels, set.resolution)?;
        if let Some(b) = sample.motif_box {
            boxes.push_str(&format!(
                "class_{:03}/{} {} {} {} {}\n",
                sample.label, name, b[0], b[1], b[2], b[3]
            ));
        }
    }
    if !boxes.is_empty() {
        let p = dir.join("motif_boxes.txt");
        let mut f = std::fs::File::create(&p).map_err(|e| CsqaError::io(p.display().to_string(), e))?;
        f.write_all(boxes.as_bytes()).map_err(|e| CsqaError::io(p.display().to_string(), e))?;
    }
    Ok(())
}

/// Load a class-per-subdirectory dataset of PPM images. Classes are the
/// sorted subdirectory names; files sort within each class.
pub fn load_directory(dir: &Path) -> Result<LabeledSet> {
    let mut class_dirs: Vec<std::path::PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| CsqaError::io(dir.display().to_string(), e))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .collect();
    class_dirs.sort();
    if class_dirs.len() < 2 {
        return Err(CsqaError::Format {
            path: dir.display().to_string(),
            detail: format!("need at least 2 class subdirectories, found {}", class_dirs.len()),
        });
    }
    let mut samples = Vec::new();
    let mut resolution = None;
    for (label, cd) in class_dirs.iter().enumerate() {
        let mut files: Vec<std::path::PathBuf> = std::fs::read_dir(cd)
            .map_err(|e| CsqaError::io(cd.display().to_string(), e))?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.extension().map(|e| e == "ppm").unwrap_or(false))
            .collect();
        files.sort();
        for f in files {
            let (pixels, r) = read_ppm(&f)?;
            match resolution {
                None => resolution = Some(r),
                Some(prev) if prev != r => {
                    return Err(CsqaError::Format {
                        path: f.display().to_string(),
                        detail: format!("resolution {r} differs from {prev}"),
                    })
                }
                _ => {}
            }
            samples.push(Sample { pixels, label, motif_box: None });
        }
    }
    let resolution = resolution.ok_or_else(|| CsqaError::Format {
        path: dir.display().to_string(),
        detail: "no .ppm images found".into(),
    })?;
    Ok(LabeledSet { samples, classes: class_dirs.len(), resolution })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::{DataKind, DatasetSpec};

    fn spec() -> DatasetSpec {
        DatasetSpec {
            kind: DataKind::Synthetic,
            classes: 8,
            samples_per_class: 32,
            test_samples_per_class: 8,
            resolution: 64,
            motif_size: 16,
            augment: false,
            path: None,
        }
    }

    #[test]
    fn same_seed_is_bitwise_identical() {
        let a = generate_synthetic(&spec(), 5).unwrap();
        let b = generate_synthetic(&spec(), 5).unwrap();
        assert_eq!(a.train.samples.len(), b.train.samples.len());
        for (x, y) in a.train.samples.iter().zip(b.train.samples.iter()) {
            assert_eq!(x.pixels, y.pixels);
            assert_eq!(x.motif_box, y.motif_box);
        }
    }

    #[test]
    fn counts_match_spec() {
        let d = generate_synthetic(&spec(), 6).unwrap();
        assert_eq!(d.train.samples.len(), 8 * 32, "C = 8 at 32 samples/class");
        assert_eq!(d.test.samples.len(), 8 * 8);
    }

    /// Plain L2 nearest neighbor.
    fn knn_accuracy(train: &LabeledSet, test: &LabeledSet, features: impl Fn(&Sample) -> Vec<f64>) -> f64 {
        let train_feats: Vec<(Vec<f64>, usize)> =
            train.samples.iter().map(|s| (features(s), s.label)).collect();
        let mut correct = 0usize;
        for s in &test.samples {
            let f = features(s);
            let mut best = (f64::INFINITY, 0usize);
            for (tf, label) in &train_feats {
                let d: f64 = f.iter().zip(tf.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
                if d < best.0 {
                    best = (d, *label);
                }
            }
            if best.1 == s.label {
                correct += 1;
            }
        }
        correct as f64 / test.samples.len() as f64
    }

    #[test]
    fn localization_matters_probe() {
        // raw pixels must be weak, motif-aligned crops nearly perfect
        let d = generate_synthetic(&spec(), 7).unwrap();
        let raw = knn_accuracy(&d.train, &d.test, |s| s.pixels.clone());
        assert!(raw < 0.60, "raw-pixel 1-NN too strong: {raw}");
        let crop = knn_accuracy(&d.train, &d.test, |s| {
            let b = s.motif_box.unwrap();
            let r = 64usize;
            let (x0, y0) = (b[0] as usize, b[1] as usize);
            let m = 16usize;
            let mut out = Vec::with_capacity(3 * m * m);
            for c in 0..3 {
                for y in 0..m {
                    for x in 0..m {
                        out.push(s.pixels[(c * r + y0 + y) * r + x0 + x]);
                    }
                }
            }
            out
        });
        assert!(crop > 0.90, "motif crops should separate classes: {crop}");
    }

    #[test]
    fn ppm_roundtrip_is_exact() {
        let d = generate_synthetic(&spec(), 8).unwrap();
        let tmp = tempfile::tempdir().unwrap();
        let p = tmp.path().join("x.ppm");
        let s = &d.train.samples[0];
        write_ppm(&p, &s.pixels, 64).unwrap();
        let (pixels, r) = read_ppm(&p).unwrap();
        assert_eq!(r, 64);
        assert_eq!(pixels, s.pixels, "quantized pixels round-trip bitwise");
    }

    #[test]
    fn directory_roundtrip_preserves_labels_and_order() {
        let mut sp = spec();
        sp.samples_per_class = 3;
        sp.test_samples_per_class = 1;
        let d = generate_synthetic(&sp, 9).unwrap();
        let tmp = tempfile::tempdir().unwrap();
        write_directory(&d.train, tmp.path()).unwrap();
        let loaded = load_directory(tmp.path()).unwrap();
        assert_eq!(loaded.classes, 8);
        assert_eq!(loaded.resolution, 64);
        assert_eq!(loaded.samples.len(), 24);
        for (a, b) in loaded.samples.iter().zip(d.train.samples.iter()) {
            assert_eq!(a.label, b.label);
            assert_eq!(a.pixels, b.pixels);
        }
        assert!(tmp.path().join("motif_boxes.txt").exists());
    }

    #[test]
    fn augmentation_is_deterministic_and_quantized() {
        let d = generate_synthetic(&spec(), 10).unwrap();
        let s = &d.train.samples[0];
        let a = augment(s, 64, 42, 3, 17);
        let b = augment(s, 64, 42, 3, 17);
        assert_eq!(a, b);
        let c = augment(s, 64, 42, 4, 17);
        assert_ne!(a, c, "different epoch stream should differ");
        for v in &a {
            assert_eq!(*v, (v * 255.0).round() / 255.0, "integer shifts preserve quantization");
        }
    }

    #[test]
    fn shuffle_is_a_permutation_and_seeded() {
        let a = shuffle_order(100, 1, 0);
        let b = shuffle_order(100, 1, 0);
        assert_eq!(a, b);
        let mut sorted = a.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..100).collect::<Vec<_>>());
        assert_ne!(a, shuffle_order(100, 1, 1));
    }
}
