use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

/// Labeled images, one row of `pixels` floats in `[0, 1]` per record.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    name: String,
    images: Vec<f64>,
    pixels: usize,
    labels: Vec<usize>,
    num_labels: usize,
    hash: String,
}

impl Dataset {
    pub fn from_parts(
        name: impl Into<String>,
        images: Vec<f64>,
        pixels: usize,
        labels: Vec<usize>,
        num_labels: usize,
    ) -> Result<Self> {
        if pixels == 0 || images.len() != labels.len() * pixels {
            return Err(Error::Dimension {
                expected: labels.len() * pixels,
                found: images.len(),
                context: "dataset images".into(),
            });
        }
        if let Some(p) = images.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::invalid(format!("pixel value {p} outside [0, 1]")));
        }
        if let Some(l) = labels.iter().find(|&&l| l >= num_labels) {
            return Err(Error::invalid(format!("label {l} outside [0, {num_labels})")));
        }
        let hash = content_hash(&images, pixels, &labels, num_labels);
        Ok(Self {
            name: name.into(),
            images,
            pixels,
            labels,
            num_labels,
            hash,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn pixels(&self) -> usize {
        self.pixels
    }

    pub fn num_labels(&self) -> usize {
        self.num_labels
    }

    pub fn image(&self, i: usize) -> &[f64] {
        &self.images[i * self.pixels..(i + 1) * self.pixels]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Hex SHA-256 over dimensions, pixel bits and labels.
    pub fn hash(&self) -> &str {
        &self.hash
    }

    pub fn subset(&self, rows: &[usize], name: impl Into<String>) -> Result<Self> {
        let mut images = Vec::with_capacity(rows.len() * self.pixels);
        let mut labels = Vec::with_capacity(rows.len());
        for &r in rows {
            if r >= self.len() {
                return Err(Error::invalid(format!("row {r} outside dataset of {}", self.len())));
            }
            images.extend_from_slice(self.image(r));
            labels.push(self.labels[r]);
        }
        Self::from_parts(name, images, self.pixels, labels, self.num_labels)
    }

    /// First `round(fraction * N)` records and the rest.
    pub fn split(&self, fraction: f64) -> Result<(Self, Self)> {
        if !(0.0..=1.0).contains(&fraction) {
            return Err(Error::invalid(format!("split fraction {fraction} outside [0, 1]")));
        }
        let k = (fraction * self.len() as f64).round() as usize;
        let head: Vec<usize> = (0..k).collect();
        let tail: Vec<usize> = (k..self.len()).collect();
        Ok((
            self.subset(&head, format!("{}[..{k}]", self.name))?,
            self.subset(&tail, format!("{}[{k}..]", self.name))?,
        ))
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.num_labels];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }
}

fn content_hash(images: &[f64], pixels: usize, labels: &[usize], num_labels: usize) -> String {
    let mut h = Sha256::new();
    h.update((labels.len() as u64).to_le_bytes());
    h.update((pixels as u64).to_le_bytes());
    h.update((num_labels as u64).to_le_bytes());
    for v in images {
        h.update(v.to_bits().to_le_bytes());
    }
    for &l in labels {
        h.update((l as u64).to_le_bytes());
    }
    hex::encode(h.finalize())
}

fn read_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format(format!("{what}: truncated header")))
}

/// Reads an IDX image/label pair. Pixel bytes are scaled by 1/255 and
/// `limit` keeps the first records. The label count `L` is `max label + 1`.
pub fn load_idx(images: &Path, labels: &Path, limit: Option<usize>) -> Result<Dataset> {
    let img = fs::read(images)?;
    let lab = fs::read(labels)?;

    let magic = read_u32(&img, 0, "images")?;
    if magic != IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "{}: image magic {magic:#010x}, expected {IMAGES_MAGIC:#010x}",
            images.display()
        )));
    }
    let magic = read_u32(&lab, 0, "labels")?;
    if magic != LABELS_MAGIC {
        return Err(Error::Format(format!(
            "{}: label magic {magic:#010x}, expected {LABELS_MAGIC:#010x}",
            labels.display()
        )));
    }

    let n_img = read_u32(&img, 4, "images")? as usize;
    let rows = read_u32(&img, 8, "images")? as usize;
    let cols = read_u32(&img, 12, "images")? as usize;
    let n_lab = read_u32(&lab, 4, "labels")? as usize;
    if n_img != n_lab {
        return Err(Error::Format(format!(
            "image count {n_img} does not match label count {n_lab}"
        )));
    }
    let pixels = rows * cols;
    if img.len() != 16 + n_img * pixels {
        return Err(Error::Format(format!(
            "images: {} payload bytes for {n_img} records of {pixels} pixels",
            img.len().saturating_sub(16)
        )));
    }
    if lab.len() != 8 + n_lab {
        return Err(Error::Format(format!(
            "labels: {} payload bytes for {n_lab} records",
            lab.len().saturating_sub(8)
        )));
    }

    let n = limit.map_or(n_img, |l| l.min(n_img));
    let images_f: Vec<f64> = img[16..16 + n * pixels]
        .iter()
        .map(|&b| f64::from(b) / 255.0)
        .collect();
    let labels_v: Vec<usize> = lab[8..8 + n].iter().map(|&b| usize::from(b)).collect();
    let num_labels = labels_v.iter().max().map_or(1, |m| m + 1);
    let name = images
        .file_name()
        .map_or_else(|| "idx".to_string(), |s| s.to_string_lossy().into_owned());
    Dataset::from_parts(name, images_f, pixels, labels_v, num_labels)
}

/// Writes an IDX pair; used to build fixtures.
pub fn write_idx(
    images: &Path,
    labels: &Path,
    pixels: &[u8],
    rows: usize,
    cols: usize,
    label_bytes: &[u8],
) -> Result<()> {
    if pixels.len() != label_bytes.len() * rows * cols {
        return Err(Error::Dimension {
            expected: label_bytes.len() * rows * cols,
            found: pixels.len(),
            context: "idx pixel payload".into(),
        });
    }
    let mut f = fs::File::create(images)?;
    f.write_all(&IMAGES_MAGIC.to_be_bytes())?;
    f.write_all(&(label_bytes.len() as u32).to_be_bytes())?;
    f.write_all(&(rows as u32).to_be_bytes())?;
    f.write_all(&(cols as u32).to_be_bytes())?;
    f.write_all(pixels)?;
    let mut f = fs::File::create(labels)?;
    f.write_all(&LABELS_MAGIC.to_be_bytes())?;
    f.write_all(&(label_bytes.len() as u32).to_be_bytes())?;
    f.write_all(label_bytes)?;
    Ok(())
}

pub const DATA_DIR_ENV: &str = "CL2O_DATA_DIR";

/// Search directory for datasets: explicit argument, then `CL2O_DATA_DIR`,
/// then `./data`.
pub fn data_dir(explicit: Option<&Path>) -> PathBuf {
    if let Some(p) = explicit {
        return p.to_path_buf();
    }
    match std::env::var_os(DATA_DIR_ENV) {
        Some(v) if !v.is_empty() => PathBuf::from(v),
        _ => PathBuf::from("data"),
    }
}

/// MNIST training files inside `dir`, if both exist under either of the
/// common names.
pub fn find_mnist(dir: &Path) -> Option<(PathBuf, PathBuf)> {
    let pairs = [
        ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
        ("train-images.idx3-ubyte", "train-labels.idx1-ubyte"),
    ];
    pairs.iter().find_map(|(i, l)| {
        let (i, l) = (dir.join(i), dir.join(l));
        (i.is_file() && l.is_file()).then_some((i, l))
    })
}

/// One isotropic unit-variance Gaussian blob per class. Centers sit at
/// radius `separation / sqrt(2)` in random directions, so for large `P`
/// two centers are about `separation` apart. Records are
/// class-balanced up to the remainder, shuffled, and affinely rescaled
/// (one global min/max) into `[0, 1]`.
pub fn make_synthetic_classification(
    n: usize,
    pixels: usize,
    num_labels: usize,
    separation: f64,
    seed: u64,
) -> Result<Dataset> {
    if num_labels == 0 || n < num_labels {
        return Err(Error::invalid(format!(
            "synthetic data needs N >= L > 0, got N={n}, L={num_labels}"
        )));
    }
    if pixels == 0 {
        return Err(Error::invalid("synthetic data needs P > 0"));
    }
    let mut rng = rng::rng(seed);
    let radius = separation / std::f64::consts::SQRT_2;
    let centers: Vec<Vec<f64>> = (0..num_labels)
        .map(|_| {
            let g: Vec<f64> = (0..pixels).map(|_| rng.sample(StandardNormal)).collect();
            let norm = crate::linalg::norm(&g).max(f64::MIN_POSITIVE);
            g.iter().map(|v| radius * v / norm).collect()
        })
        .collect();
    let mut labels: Vec<usize> = (0..n).map(|i| i % num_labels).collect();
    labels.shuffle(&mut rng);
    let mut raw = Vec::with_capacity(n * pixels);
    for &l in &labels {
        for c in &centers[l] {
            let e: f64 = rng.sample(StandardNormal);
            raw.push(c + e);
        }
    }
    let lo = raw.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let images = raw.iter().map(|v| ((v - lo) / span).clamp(0.0, 1.0)).collect();
    Dataset::from_parts(
        format!("synthetic-n{n}-p{pixels}-l{num_labels}-s{separation}-seed{seed}"),
        images,
        pixels,
        labels,
        num_labels,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture(dir: &Path) -> (PathBuf, PathBuf) {
        let (i, l) = (dir.join("img"), dir.join("lab"));
        let pixels: Vec<u8> = (0..3 * 4).map(|k| (k * 20) as u8).collect();
        write_idx(&i, &l, &pixels, 2, 2, &[3, 0, 9]).unwrap();
        (i, l)
    }

    #[test]
    fn idx_round_trip_and_limit() {
        let dir = tempfile::tempdir().unwrap();
        let (i, l) = fixture(dir.path());
        let d = load_idx(&i, &l, None).unwrap();
        assert_eq!(d.len(), 3);
        assert_eq!(d.pixels(), 4);
        assert_eq!(d.labels(), &[3, 0, 9]);
        assert_eq!(d.image(1)[0], 80.0 / 255.0);
        assert_eq!(d.num_labels(), 10);
        let one = load_idx(&i, &l, Some(1)).unwrap();
        assert_eq!(one.len(), 1);
        let again = load_idx(&i, &l, None).unwrap();
        assert_eq!(again.hash(), d.hash());
    }

    #[test]
    fn every_mutated_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (i, l) = fixture(dir.path());
        let golden_img = fs::read(&i).unwrap();
        let golden_lab = fs::read(&l).unwrap();
        for (path, golden) in [(&i, &golden_img), (&l, &golden_lab)] {
            for byte in 0..4 {
                for bit in 0..8 {
                    let mut m = golden.clone();
                    m[byte] ^= 1 << bit;
                    fs::write(path, &m).unwrap();
                    assert!(matches!(load_idx(&i, &l, None), Err(Error::Format(_))));
                }
            }
            fs::write(path, golden).unwrap();
        }
        assert!(load_idx(&i, &l, None).is_ok());
    }

    #[test]
    fn count_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (i, l) = fixture(dir.path());
        let mut lab = fs::read(&l).unwrap();
        lab[7] = 2;
        lab.pop();
        fs::write(&l, lab).unwrap();
        assert!(load_idx(&i, &l, None).is_err());
    }

    #[test]
    fn synthetic_is_balanced_bounded_and_seeded() {
        let d = make_synthetic_classification(103, 8, 10, 3.0, 5).unwrap();
        let counts = d.class_counts();
        let (mn, mx) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
        assert!(mx - mn <= 1);
        assert!((0..d.len()).all(|r| d.image(r).iter().all(|p| (0.0..=1.0).contains(p))));
        let again = make_synthetic_classification(103, 8, 10, 3.0, 5).unwrap();
        assert_eq!(d, again);
        assert!(make_synthetic_classification(5, 8, 10, 3.0, 5).is_err());
    }

    #[test]
    fn split_partitions_records() {
        let d = make_synthetic_classification(50, 3, 2, 1.0, 0).unwrap();
        let (a, b) = d.split(0.8).unwrap();
        assert_eq!((a.len(), b.len()), (40, 10));
        assert_eq!(a.image(0), d.image(0));
        assert_eq!(b.image(0), d.image(40));
    }

    #[test]
    fn explicit_data_dir_wins() {
        assert_eq!(data_dir(Some(Path::new("/x"))), PathBuf::from("/x"));
    }
}
