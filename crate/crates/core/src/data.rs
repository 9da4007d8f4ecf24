//! Datasets: synthetic toys, the IDX image format, and split handling.

use std::fs::File;
use std::io::Read;
use std::path::Path;

use crate::error::{Error, Result};
use crate::likelihood::Targets;
use crate::rng::Stream;
use crate::tensor::Tensor;

/// A supervised dataset with a train/validation split over row indices.
#[derive(Debug, Clone)]
pub struct Dataset {
    /// [N x features] design matrix.
    pub inputs: Tensor,
    pub targets: Targets,
    pub train_idx: Vec<usize>,
    pub val_idx: Vec<usize>,
}

impl Dataset {
    /// Deterministically shuffle rows and hold out `val_fraction` of them.
    pub fn new(inputs: Tensor, targets: Targets, val_fraction: f64, seed: u64) -> Self {
        let n = inputs.shape()[0];
        assert!(
            targets.len() == n,
            "{n} input rows but {} targets",
            targets.len()
        );
        assert!(
            (0.0..1.0).contains(&val_fraction),
            "validation fraction must be in [0, 1), got {val_fraction}"
        );
        let mut idx: Vec<usize> = (0..n).collect();
        Stream::new(seed, 0x5B17).shuffle(&mut idx);
        let n_val = (n as f64 * val_fraction).round() as usize;
        let val_idx = idx[..n_val].to_vec();
        let train_idx = idx[n_val..].to_vec();
        Dataset {
            inputs,
            targets,
            train_idx,
            val_idx,
        }
    }

    pub fn len(&self) -> usize {
        self.inputs.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn features(&self) -> usize {
        self.inputs.shape()[1]
    }

    /// Rows of the design matrix at the given indices.
    pub fn select_inputs(&self, idx: &[usize]) -> Tensor {
        let d = self.features();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(&self.inputs.data()[i * d..(i + 1) * d]);
        }
        Tensor::matrix(idx.len(), d, data)
    }

    /// Shift and scale every feature column to zero mean and unit
    /// standard deviation *computed on the training split only*. Returns
    /// the per-column (mean, std) used.
    pub fn standardize(&mut self) -> Vec<(f64, f64)> {
        let d = self.features();
        let n_train = self.train_idx.len();
        assert!(n_train > 0, "cannot standardize with an empty train split");
        let mut stats = Vec::with_capacity(d);
        for j in 0..d {
            let mut mean = 0.0;
            for &i in &self.train_idx {
                mean += self.inputs.data()[i * d + j];
            }
            mean /= n_train as f64;
            let mut var = 0.0;
            for &i in &self.train_idx {
                let x = self.inputs.data()[i * d + j] - mean;
                var += x * x;
            }
            let std = (var / n_train as f64).sqrt().max(1e-12);
            stats.push((mean, std));
        }
        let rows = self.len();
        for i in 0..rows {
            for j in 0..d {
                let v = &mut self.inputs.data_mut()[i * d + j];
                *v = (*v - stats[j].0) / stats[j].1;
            }
        }
        stats
    }
}

/// 1-d regression toy: x ~ U(-3, 3), y = sin(2x) exp(-0.3 x^2) + noise.
pub fn gen_toy1d(n: usize, noise: f64, seed: u64) -> Dataset {
    let mut rng = Stream::new(seed, 0x701D);
    let mut xs = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(n);
    for _ in 0..n {
        let x = rng.uniform_in(-3.0, 3.0);
        let y = (2.0 * x).sin() * (-0.3 * x * x).exp() + noise * rng.normal();
        xs.push(x);
        ys.push(y);
    }
    Dataset::new(Tensor::matrix(n, 1, xs), Targets::Real(ys), 0.1, seed)
}

/// Two interleaved half-circles with Gaussian jitter, binary labels.
pub fn gen_two_moons(n: usize, noise: f64, seed: u64) -> Dataset {
    let mut rng = Stream::new(seed, 0x3002);
    let mut data = Vec::with_capacity(n * 2);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % 2;
        let theta = rng.uniform() * std::f64::consts::PI;
        let (mut x, mut y) = if label == 0 {
            (theta.cos(), theta.sin())
        } else {
            (1.0 - theta.cos(), 0.5 - theta.sin())
        };
        x += noise * rng.normal();
        y += noise * rng.normal();
        data.push(x);
        data.push(y);
        labels.push(label);
    }
    Dataset::new(
        Tensor::matrix(n, 2, data),
        Targets::Class(labels),
        0.1,
        seed,
    )
}

/// The heavy-tail latent toy: two conflicting observations of the weight
/// path at t = 1, scored with a Cauchy likelihood of scale 0.25. The
/// posterior over w_1 is bimodal, which a Gaussian likelihood would
/// collapse.
pub fn cauchy_two_obs() -> Vec<(f64, f64)> {
    vec![(1.0, 2.0), (1.0, -2.0)]
}

/// Scale recommended for the Cauchy two-observation toy.
pub const CAUCHY_TOY_SCALE: f64 = 0.25;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Load an IDX image/label file pair (the MNIST container format).
/// Pixels are scaled to [0, 1]. Malformed files yield `Error::Format`
/// with the byte offset of the problem.
pub fn load_idx(images: &Path, labels: &Path, val_fraction: f64, seed: u64) -> Result<Dataset> {
    let img_bytes = read_all(images)?;
    let lbl_bytes = read_all(labels)?;

    let magic = be_u32(&img_bytes, 0, images)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(format_err(
            images,
            0,
            format!("bad image magic {magic:#010x}"),
        ));
    }
    let n = be_u32(&img_bytes, 4, images)? as usize;
    let rows = be_u32(&img_bytes, 8, images)? as usize;
    let cols = be_u32(&img_bytes, 12, images)? as usize;
    let pixels = n * rows * cols;
    if img_bytes.len() != 16 + pixels {
        return Err(format_err(
            images,
            img_bytes.len().min(16 + pixels) as u64,
            format!(
                "expected {} pixel bytes for {n} x {rows} x {cols}, file has {}",
                pixels,
                img_bytes.len() - 16
            ),
        ));
    }

    let lmagic = be_u32(&lbl_bytes, 0, labels)?;
    if lmagic != IDX_LABELS_MAGIC {
        return Err(format_err(
            labels,
            0,
            format!("bad label magic {lmagic:#010x}"),
        ));
    }
    let ln = be_u32(&lbl_bytes, 4, labels)? as usize;
    if ln != n {
        return Err(format_err(labels, 4, format!("{ln} labels for {n} images")));
    }
    if lbl_bytes.len() != 8 + ln {
        return Err(format_err(
            labels,
            lbl_bytes.len().min(8 + ln) as u64,
            format!(
                "expected {ln} label bytes, file has {}",
                lbl_bytes.len() - 8
            ),
        ));
    }
    let mut classes = Vec::with_capacity(ln);
    for (i, &b) in lbl_bytes[8..].iter().enumerate() {
        if b > 9 {
            return Err(format_err(
                labels,
                (8 + i) as u64,
                format!("label byte {b} out of range 0..=9"),
            ));
        }
        classes.push(b as usize);
    }

    let data: Vec<f64> = img_bytes[16..].iter().map(|&b| b as f64 / 255.0).collect();
    Ok(Dataset::new(
        Tensor::matrix(n, rows * cols, data),
        Targets::Class(classes),
        val_fraction,
        seed,
    ))
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(Error::Io)?;
    Ok(buf)
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    let end = offset + 4;
    if bytes.len() < end {
        return Err(format_err(
            path,
            bytes.len() as u64,
            format!("file truncated before byte {end}"),
        ));
    }
    Ok(u32::from_be_bytes([
        bytes[offset],
        bytes[offset + 1],
        bytes[offset + 2],
        bytes[offset + 3],
    ]))
}

fn format_err(path: &Path, offset: u64, message: String) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        offset,
        message,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn toy1d_is_deterministic_and_bounded() {
        let a = gen_toy1d(50, 0.1, 7);
        let b = gen_toy1d(50, 0.1, 7);
        assert_eq!(a.inputs, b.inputs);
        assert_eq!(a.train_idx, b.train_idx);
        assert!(a.inputs.data().iter().all(|x| (-3.0..3.0).contains(x)));
        assert_eq!(a.train_idx.len() + a.val_idx.len(), 50);
        assert_eq!(a.val_idx.len(), 5);
    }

    #[test]
    fn toy1d_noise_free_points_lie_on_the_curve() {
        let d = gen_toy1d(20, 0.0, 3);
        if let Targets::Real(ys) = &d.targets {
            for (i, &y) in ys.iter().enumerate() {
                let x = d.inputs.data()[i];
                let f = (2.0 * x).sin() * (-0.3 * x * x).exp();
                assert!((y - f).abs() < 1e-12);
            }
        } else {
            panic!("toy1d targets must be real");
        }
    }

    #[test]
    fn two_moons_has_balanced_labels() {
        let d = gen_two_moons(100, 0.05, 1);
        if let Targets::Class(ls) = &d.targets {
            assert_eq!(ls.iter().filter(|&&l| l == 0).count(), 50);
        } else {
            panic!("two moons targets must be classes");
        }
        assert_eq!(d.features(), 2);
    }

    #[test]
    fn split_indices_partition_the_rows() {
        let d = gen_two_moons(40, 0.05, 9);
        let mut all: Vec<usize> = d.train_idx.iter().chain(&d.val_idx).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..40).collect::<Vec<_>>());
    }

    #[test]
    fn standardize_centers_the_train_split() {
        let mut d = gen_toy1d(200, 0.1, 4);
        let stats = d.standardize();
        assert_eq!(stats.len(), 1);
        let mut mean = 0.0;
        for &i in &d.train_idx {
            mean += d.inputs.data()[i];
        }
        mean /= d.train_idx.len() as f64;
        assert!(mean.abs() < 1e-10);
    }

    #[test]
    fn cauchy_toy_observations_conflict_symmetrically() {
        let obs = cauchy_two_obs();
        assert_eq!(obs, vec![(1.0, 2.0), (1.0, -2.0)]);
    }

    fn write_idx_pair(
        dir: &Path,
        n: usize,
        rows: usize,
        cols: usize,
    ) -> (std::path::PathBuf, std::path::PathBuf) {
        let img_path = dir.join("imgs.idx");
        let lbl_path = dir.join("lbls.idx");
        let mut img = Vec::new();
        img.extend_from_slice(&0x0803u32.to_be_bytes());
        img.extend_from_slice(&(n as u32).to_be_bytes());
        img.extend_from_slice(&(rows as u32).to_be_bytes());
        img.extend_from_slice(&(cols as u32).to_be_bytes());
        img.extend((0..n * rows * cols).map(|i| (i % 256) as u8));
        let mut lbl = Vec::new();
        lbl.extend_from_slice(&0x0801u32.to_be_bytes());
        lbl.extend_from_slice(&(n as u32).to_be_bytes());
        lbl.extend((0..n).map(|i| (i % 10) as u8));
        File::create(&img_path).unwrap().write_all(&img).unwrap();
        File::create(&lbl_path).unwrap().write_all(&lbl).unwrap();
        (img_path, lbl_path)
    }

    #[test]
    fn idx_roundtrip_and_pixel_scaling() {
        let dir = tempfile::tempdir().unwrap();
        let (img, lbl) = write_idx_pair(dir.path(), 10, 4, 3);
        let d = load_idx(&img, &lbl, 0.1, 0).unwrap();
        assert_eq!(d.len(), 10);
        assert_eq!(d.features(), 12);
        assert!(d.inputs.data().iter().all(|&p| (0.0..=1.0).contains(&p)));
        assert_eq!(d.inputs.data()[1], 1.0 / 255.0);
    }

    #[test]
    fn idx_bad_magic_reports_offset_zero() {
        let dir = tempfile::tempdir().unwrap();
        let (img, lbl) = write_idx_pair(dir.path(), 2, 2, 2);
        let mut bytes = std::fs::read(&img).unwrap();
        bytes[3] = 0x99;
        std::fs::write(&img, bytes).unwrap();
        match load_idx(&img, &lbl, 0.0, 0) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn idx_truncated_pixels_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let (img, lbl) = write_idx_pair(dir.path(), 2, 2, 2);
        let bytes = std::fs::read(&img).unwrap();
        std::fs::write(&img, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(
            load_idx(&img, &lbl, 0.0, 0),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn idx_label_count_mismatch_is_reported_against_the_label_file() {
        let dir = tempfile::tempdir().unwrap();
        let (img, lbl) = write_idx_pair(dir.path(), 3, 2, 2);
        let mut lbytes = std::fs::read(&lbl).unwrap();
        lbytes[7] = 9; // claim 9 labels
        std::fs::write(&lbl, lbytes).unwrap();
        match load_idx(&img, &lbl, 0.0, 0) {
            Err(Error::Format { path, offset, .. }) => {
                assert!(path.ends_with("lbls.idx"));
                assert_eq!(offset, 4);
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn missing_file_is_an_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("nope.idx");
        assert!(matches!(
            load_idx(&missing, &missing, 0.0, 0),
            Err(Error::Io(_))
        ));
    }
}
