//! Dataset ingestion and generation: Gaussian blob sets, CSV feature files,
//! IDX image files, and deterministic stratified splits. All features live
//! in [0,1]; loaders reject out-of-range values instead of clamping.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone)]
pub struct Dataset {
    pub samples: Vec<(Tensor, usize)>,
    pub n_classes: usize,
    pub feature_dim: usize,
}

impl Dataset {
    pub fn new(samples: Vec<(Tensor, usize)>, n_classes: usize) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let feature_dim = samples[0].0.len();
        for (idx, (x, label)) in samples.iter().enumerate() {
            if x.len() != feature_dim {
                return Err(Error::ShapeMismatch {
                    expected: format!("feature dim {}", feature_dim),
                    got: format!("{} at sample {}", x.len(), idx),
                });
            }
            if *label >= n_classes {
                return Err(Error::LabelOutOfRange {
                    label: *label,
                    n_classes,
                });
            }
            for (i, v) in x.data().iter().enumerate() {
                if !(0.0..=1.0).contains(v) {
                    return Err(Error::InputOutOfRange { index: i, value: *v });
                }
            }
        }
        Ok(Dataset {
            samples,
            n_classes,
            feature_dim,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Indices of samples with the given label, in dataset order.
    pub fn class_indices(&self, label: usize) -> Vec<usize> {
        self.samples
            .iter()
            .enumerate()
            .filter(|(_, (_, l))| *l == label)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for (x, label) in &self.samples {
            for v in x.data() {
                out.push_str(&format!("{},", v));
            }
            out.push_str(&format!("{}\n", label));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SplitSpec {
    /// (train, val, test) fractions; all positive, summing to 1.
    pub fractions: (f64, f64, f64),
    pub seed: u64,
}

/// Synthetic blobs: class centers placed uniformly in [0.2, 0.8]^d, samples
/// drawn around them with Gaussian noise of std `spread`, clipped to [0,1].
pub fn gen_blobs(
    n_classes: usize,
    per_class: usize,
    feature_dim: usize,
    spread: f64,
    seed: u64,
) -> Result<Dataset> {
    if n_classes == 0 || per_class == 0 || feature_dim == 0 {
        return Err(Error::InvalidConfig {
            reason: "blob parameters must be positive".to_string(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<Vec<f64>> = (0..n_classes)
        .map(|_| (0..feature_dim).map(|_| rng.gen_range(0.2..0.8)).collect())
        .collect();
    let mut samples = Vec::with_capacity(n_classes * per_class);
    for (label, center) in centers.iter().enumerate() {
        for _ in 0..per_class {
            let data: Vec<f64> = center
                .iter()
                .map(|c| {
                    let noise: f64 = StandardNormal.sample(&mut rng);
                    (c + spread * noise).clamp(0.0, 1.0)
                })
                .collect();
            samples.push((Tensor::new(vec![feature_dim], data)?, label));
        }
    }
    Dataset::new(samples, n_classes)
}

/// CSV rows: feature values then the label, no header. Features must
/// already be in [0,1].
pub fn load_csv(path: &Path, n_classes: usize) -> Result<Dataset> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut samples = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').map(|c| c.trim()).collect();
        if cells.len() < 2 {
            return Err(Error::Parse {
                line: lineno + 1,
                reason: "need at least one feature and a label".to_string(),
            });
        }
        let (feat_cells, label_cell) = cells.split_at(cells.len() - 1);
        let mut features = Vec::with_capacity(feat_cells.len());
        for cell in feat_cells {
            let v: f64 = cell.parse().map_err(|_| Error::Parse {
                line: lineno + 1,
                reason: format!("bad feature {:?}", cell),
            })?;
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Parse {
                    line: lineno + 1,
                    reason: format!("feature {} outside [0,1]", v),
                });
            }
            features.push(v);
        }
        let label: usize = label_cell[0].parse().map_err(|_| Error::Parse {
            line: lineno + 1,
            reason: format!("bad label {:?}", label_cell[0]),
        })?;
        let dim = features.len();
        samples.push((Tensor::new(vec![dim], features)?, label));
    }
    Dataset::new(samples, n_classes)
}

const IDX_LABEL_MAGIC: u32 = 0x0000_0801;
const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;

fn read_u32_be(bytes: &[u8], offset: usize, path: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::InvalidConfig {
            reason: format!("{}: truncated header", path),
        })
}

/// Loads an IDX image/label file pair (big-endian headers, magic
/// 0x00000803 / 0x00000801). Pixels are scaled by 1/255. When
/// `downsample_to` is given, each image is reduced to that side length by
/// area averaging; the source side must be a multiple of the target side.
pub fn load_idx(
    images_path: &Path,
    labels_path: &Path,
    downsample_to: Option<usize>,
) -> Result<Dataset> {
    let img_bytes =
        std::fs::read(images_path).map_err(|e| Error::io(images_path.display().to_string(), e))?;
    let lbl_bytes =
        std::fs::read(labels_path).map_err(|e| Error::io(labels_path.display().to_string(), e))?;
    let ip = images_path.display().to_string();
    let lp = labels_path.display().to_string();

    let img_magic = read_u32_be(&img_bytes, 0, &ip)?;
    if img_magic != IDX_IMAGE_MAGIC {
        return Err(Error::InvalidConfig {
            reason: format!("{}: bad image magic {:#010x}", ip, img_magic),
        });
    }
    let lbl_magic = read_u32_be(&lbl_bytes, 0, &lp)?;
    if lbl_magic != IDX_LABEL_MAGIC {
        return Err(Error::InvalidConfig {
            reason: format!("{}: bad label magic {:#010x}", lp, lbl_magic),
        });
    }
    let count = read_u32_be(&img_bytes, 4, &ip)? as usize;
    let rows = read_u32_be(&img_bytes, 8, &ip)? as usize;
    let cols = read_u32_be(&img_bytes, 12, &ip)? as usize;
    let lbl_count = read_u32_be(&lbl_bytes, 4, &lp)? as usize;
    if count != lbl_count {
        return Err(Error::InvalidConfig {
            reason: format!("image count {} != label count {}", count, lbl_count),
        });
    }
    let pixels = &img_bytes[16..];
    if pixels.len() < count * rows * cols {
        return Err(Error::InvalidConfig {
            reason: format!("{}: truncated pixel data", ip),
        });
    }
    let labels = &lbl_bytes[8..];
    if labels.len() < count {
        return Err(Error::InvalidConfig {
            reason: format!("{}: truncated label data", lp),
        });
    }

    if let Some(side) = downsample_to {
        if side == 0 || rows % side != 0 || cols % side != 0 {
            return Err(Error::InvalidConfig {
                reason: format!(
                    "cannot downsample {}x{} to side {}",
                    rows, cols, side
                ),
            });
        }
    }

    let mut samples = Vec::with_capacity(count);
    let mut max_label = 0usize;
    for k in 0..count {
        let img = &pixels[k * rows * cols..(k + 1) * rows * cols];
        let data: Vec<f64> = match downsample_to {
            None => img.iter().map(|b| *b as f64 / 255.0).collect(),
            Some(side) => {
                let br = rows / side;
                let bc = cols / side;
                let mut out = Vec::with_capacity(side * side);
                for r in 0..side {
                    for c in 0..side {
                        let mut acc = 0.0;
                        for dr in 0..br {
                            for dc in 0..bc {
                                acc += img[(r * br + dr) * cols + (c * bc + dc)] as f64;
                            }
                        }
                        out.push(acc / (br * bc) as f64 / 255.0);
                    }
                }
                out
            }
        };
        let label = labels[k] as usize;
        max_label = max_label.max(label);
        let dim = data.len();
        samples.push((Tensor::new(vec![dim], data)?, label));
    }
    Dataset::new(samples, max_label + 1)
}

/// Stratified deterministic split into (train, val, test). Each class is
/// shuffled by the split seed and partitioned by the fractions with
/// largest-remainder rounding.
pub fn split(dataset: &Dataset, spec: &SplitSpec) -> Result<(Dataset, Dataset, Dataset)> {
    let (ft, fv, fs) = spec.fractions;
    if ft <= 0.0 || fv <= 0.0 || fs <= 0.0 {
        return Err(Error::InvalidConfig {
            reason: "split fractions must be positive".to_string(),
        });
    }
    if (ft + fv + fs - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidConfig {
            reason: format!("split fractions sum to {}", ft + fv + fs),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut train = Vec::new();
    let mut val = Vec::new();
    let mut test = Vec::new();
    for class in 0..dataset.n_classes {
        let mut idx = dataset.class_indices(class);
        if idx.len() < 3 {
            return Err(Error::ClassTooSmall {
                class,
                count: idx.len(),
            });
        }
        idx.shuffle(&mut rng);
        let c = idx.len();
        let raw = [ft * c as f64, fv * c as f64, fs * c as f64];
        let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
        let mut rem: usize = c - counts.iter().sum::<usize>();
        // Largest fractional remainder gets the leftovers; ties go in order.
        let mut order: Vec<usize> = (0..3).collect();
        order.sort_by(|a, b| {
            let ra = raw[*a] - raw[*a].floor();
            let rb = raw[*b] - raw[*b].floor();
            rb.partial_cmp(&ra).unwrap().then(a.cmp(b))
        });
        for part in order {
            if rem == 0 {
                break;
            }
            counts[part] += 1;
            rem -= 1;
        }
        let (a, rest) = idx.split_at(counts[0]);
        let (b, cpart) = rest.split_at(counts[1]);
        train.extend(a.iter().map(|i| dataset.samples[*i].clone()));
        val.extend(b.iter().map(|i| dataset.samples[*i].clone()));
        test.extend(cpart.iter().map(|i| dataset.samples[*i].clone()));
    }
    Ok((
        Dataset::new(train, dataset.n_classes)?,
        Dataset::new(val, dataset.n_classes)?,
        Dataset::new(test, dataset.n_classes)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blobs_cardinality_and_determinism() {
        let a = gen_blobs(3, 10, 4, 0.1, 5).unwrap();
        assert_eq!(a.len(), 30);
        for class in 0..3 {
            assert_eq!(a.class_indices(class).len(), 10);
        }
        let b = gen_blobs(3, 10, 4, 0.1, 5).unwrap();
        for ((x, l), (y, m)) in a.samples.iter().zip(&b.samples) {
            assert_eq!(x.data(), y.data());
            assert_eq!(l, m);
        }
    }

    #[test]
    fn blobs_zero_spread_collapses_to_centers() {
        let d = gen_blobs(2, 5, 3, 0.0, 7).unwrap();
        let first = d.samples[0].0.data().to_vec();
        for (x, label) in &d.samples[..5] {
            assert_eq!(*label, 0);
            assert_eq!(x.data(), &first[..]);
        }
    }

    #[test]
    fn csv_round_trip() {
        let d = gen_blobs(2, 5, 3, 0.1, 7).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.csv");
        std::fs::write(&path, d.to_csv()).unwrap();
        let back = load_csv(&path, 2).unwrap();
        assert_eq!(d.len(), back.len());
        for ((x, l), (y, m)) in d.samples.iter().zip(&back.samples) {
            assert_eq!(x.data(), y.data());
            assert_eq!(l, m);
        }
    }

    #[test]
    fn csv_rejects_out_of_range_feature() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "0.5,0.5,0\n1.5,0.5,1\n").unwrap();
        let err = load_csv(&path, 2).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{}", err);
    }

    fn write_idx(dir: &Path, images: &[Vec<u8>], rows: usize, cols: usize, labels: &[u8]) -> (std::path::PathBuf, std::path::PathBuf) {
        let mut img = Vec::new();
        img.extend_from_slice(&IDX_IMAGE_MAGIC.to_be_bytes());
        img.extend_from_slice(&(images.len() as u32).to_be_bytes());
        img.extend_from_slice(&(rows as u32).to_be_bytes());
        img.extend_from_slice(&(cols as u32).to_be_bytes());
        for im in images {
            img.extend_from_slice(im);
        }
        let mut lbl = Vec::new();
        lbl.extend_from_slice(&IDX_LABEL_MAGIC.to_be_bytes());
        lbl.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        lbl.extend_from_slice(labels);
        let ip = dir.join("images.idx");
        let lp = dir.join("labels.idx");
        std::fs::write(&ip, img).unwrap();
        std::fs::write(&lp, lbl).unwrap();
        (ip, lp)
    }

    #[test]
    fn idx_load_and_scaling() {
        let dir = tempfile::tempdir().unwrap();
        let img0 = vec![255u8; 16];
        let img1 = vec![0u8; 16];
        let (ip, lp) = write_idx(dir.path(), &[img0, img1], 4, 4, &[1, 0]);
        let d = load_idx(&ip, &lp, None).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.feature_dim, 16);
        assert_eq!(d.samples[0].0.data()[0], 1.0);
        assert_eq!(d.samples[1].0.data()[0], 0.0);
        assert_eq!(d.samples[0].1, 1);
    }

    #[test]
    fn idx_rejects_bad_magic_and_count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = write_idx(dir.path(), &[vec![0u8; 16]], 4, 4, &[0, 1]);
        assert!(load_idx(&ip, &lp, None).is_err());
        let bad = dir.path().join("bad.idx");
        std::fs::write(&bad, [0u8; 16]).unwrap();
        let (_, lp2) = write_idx(dir.path(), &[vec![0u8; 16]], 4, 4, &[0]);
        assert!(load_idx(&bad, &lp2, None).is_err());
    }

    #[test]
    fn idx_area_downsample_matches_hand_means() {
        // 4x4 image downsampled to 2x2 by 2x2 block means.
        let img: Vec<u8> = vec![
            0, 4, 8, 12, //
            2, 6, 10, 14, //
            100, 104, 108, 112, //
            102, 106, 110, 114,
        ];
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = write_idx(dir.path(), &[img], 4, 4, &[0]);
        let d = load_idx(&ip, &lp, Some(2)).unwrap();
        let got = d.samples[0].0.data();
        let expect = [3.0, 11.0, 103.0, 111.0].map(|v: f64| v / 255.0);
        for (g, e) in got.iter().zip(expect) {
            assert!((g - e).abs() < 1e-12);
        }
    }

    #[test]
    fn split_is_stratified_partition() {
        let d = gen_blobs(3, 20, 4, 0.1, 1).unwrap();
        let spec = SplitSpec {
            fractions: (0.8, 0.1, 0.1),
            seed: 3,
        };
        let (tr, va, te) = split(&d, &spec).unwrap();
        assert_eq!(tr.len(), 48);
        assert_eq!(va.len(), 6);
        assert_eq!(te.len(), 6);
        // multiset equality of the union with the original
        let mut all: Vec<String> = tr
            .samples
            .iter()
            .chain(&va.samples)
            .chain(&te.samples)
            .map(|(x, l)| format!("{:?}:{}", x.data(), l))
            .collect();
        let mut orig: Vec<String> = d
            .samples
            .iter()
            .map(|(x, l)| format!("{:?}:{}", x.data(), l))
            .collect();
        all.sort();
        orig.sort();
        assert_eq!(all, orig);
        // determinism
        let (tr2, _, _) = split(&d, &spec).unwrap();
        for ((x, _), (y, _)) in tr.samples.iter().zip(&tr2.samples) {
            assert_eq!(x.data(), y.data());
        }
    }

    #[test]
    fn split_rejects_tiny_class_and_bad_fractions() {
        let d = gen_blobs(2, 2, 3, 0.1, 1).unwrap();
        let spec = SplitSpec {
            fractions: (0.8, 0.1, 0.1),
            seed: 0,
        };
        assert!(split(&d, &spec).is_err());
        let d2 = gen_blobs(2, 10, 3, 0.1, 1).unwrap();
        let bad = SplitSpec {
            fractions: (1.0, 0.0, 0.0),
            seed: 0,
        };
        assert!(split(&d2, &bad).is_err());
    }
}
