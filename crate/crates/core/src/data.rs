//! Synthetic classification datasets in the unit cube.
//!
//! Labels are stored 0-based; CSV files use 1-based labels.

use std::fmt::Write as _;
use std::path::Path;

use crate::diffcore::{RngState, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Full,
    Train,
    Test,
}

/// Labelled inputs with every feature in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub split: Split,
    /// Per-feature affine map from raw coordinates: `x = (raw − offset)·scale`.
    pub offset: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn d_in(&self) -> usize {
        self.inputs.cols()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    pub fn subset(&self, idx: &[usize], split: Split) -> Dataset {
        Dataset {
            inputs: self.inputs.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
            split,
            offset: self.offset.clone(),
            scale: self.scale.clone(),
        }
    }

    /// Writes `x1..xd,label` rows (labels 1-based).
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, samples_csv(&self.inputs, Some(&self.labels)))?;
        Ok(())
    }

    /// Reads a file produced by [`Dataset::write_csv`]. The affine map is not
    /// stored in the file and comes back as the identity.
    pub fn read_csv(path: &Path, classes: usize, split: Split) -> Result<Dataset> {
        let text = std::fs::read_to_string(path)?;
        let parse_err = |line: usize, detail: String| Error::Parse {
            path: path.to_path_buf(),
            detail: format!("line {line}: {detail}"),
        };
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| parse_err(1, "empty file".into()))?;
        let cols: Vec<&str> = header.split(',').collect();
        if cols.last() != Some(&"label") || cols.len() < 2 {
            return Err(parse_err(1, "header must be x1..xd,label".into()));
        }
        let d = cols.len() - 1;
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for (i, line) in lines.enumerate() {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != d + 1 {
                return Err(parse_err(i + 2, format!("expected {} fields", d + 1)));
            }
            for f in &fields[..d] {
                data.push(f.trim().parse::<f64>().map_err(|e| parse_err(i + 2, e.to_string()))?);
            }
            let y: usize = fields[d]
                .trim()
                .parse()
                .map_err(|e: std::num::ParseIntError| parse_err(i + 2, e.to_string()))?;
            if y == 0 || y > classes {
                return Err(parse_err(i + 2, format!("label {y} outside 1..={classes}")));
            }
            labels.push(y - 1);
        }
        Ok(Dataset {
            inputs: Tensor::matrix(labels.len(), d, data)?,
            labels,
            classes,
            split,
            offset: vec![0.0; d],
            scale: vec![1.0; d],
        })
    }
}

/// CSV text with header `x1..xd[,label]`; labels are written 1-based.
pub fn samples_csv(x: &Tensor, labels: Option<&[usize]>) -> String {
    let d = x.cols();
    let mut out = String::new();
    let header: Vec<String> = (1..=d).map(|i| format!("x{i}")).collect();
    out.push_str(&header.join(","));
    if labels.is_some() {
        out.push_str(",label");
    }
    out.push('\n');
    for i in 0..x.rows() {
        let row: Vec<String> = x.row(i).iter().map(|v| format!("{v:?}")).collect();
        out.push_str(&row.join(","));
        if let Some(l) = labels {
            let _ = write!(out, ",{}", l[i] + 1);
        }
        out.push('\n');
    }
    out
}

/// Maps every feature of `raw` onto `[0, 1]` by its min and max.
fn normalize(raw: Vec<f64>, n: usize, d: usize) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
    let mut lo = vec![f64::INFINITY; d];
    let mut hi = vec![f64::NEG_INFINITY; d];
    for row in raw.chunks(d) {
        for j in 0..d {
            lo[j] = lo[j].min(row[j]);
            hi[j] = hi[j].max(row[j]);
        }
    }
    let scale: Vec<f64> = lo
        .iter()
        .zip(&hi)
        .map(|(l, h)| if h > l { 1.0 / (h - l) } else { 1.0 })
        .collect();
    let data = raw
        .chunks(d)
        .flat_map(|row| {
            row.iter()
                .enumerate()
                .map(|(j, v)| ((v - lo[j]) * scale[j]).clamp(0.0, 1.0))
                .collect::<Vec<_>>()
        })
        .collect();
    Ok((Tensor::matrix(n, d, data)?, lo, scale))
}

/// Lattice coordinates of cluster `c`: the base-`k` digits of `c`.
fn lattice_point(c: usize, k: usize, d: usize) -> Vec<f64> {
    let mut rest = c;
    (0..d)
        .map(|_| {
            let digit = rest % k;
            rest /= k;
            digit as f64
        })
        .collect()
}

/// `C` Gaussian clusters of standard deviation `spread` around points of a
/// unit-spaced lattice with `⌈C^(1/d)⌉` points per axis, rescaled into the
/// unit cube.
pub fn make_blobs(
    classes: usize,
    per_class: usize,
    d_in: usize,
    spread: f64,
    rng: &mut RngState,
) -> Result<Dataset> {
    if classes < 2 || per_class < 2 || d_in == 0 {
        return Err(Error::config("blobs need at least 2 classes, 2 samples per class and 1 feature"));
    }
    if !(spread > 0.0) {
        return Err(Error::config(format!("blob spread must be > 0, got {spread}")));
    }
    let mut k: usize = 1;
    while k.pow(d_in as u32) < classes {
        k += 1;
    }
    let mut raw = Vec::with_capacity(classes * per_class * d_in);
    let mut labels = Vec::with_capacity(classes * per_class);
    for c in 0..classes {
        let center = lattice_point(c, k, d_in);
        for _ in 0..per_class {
            for &m in &center {
                raw.push(m + spread * rng.normal());
            }
            labels.push(c);
        }
    }
    let n = labels.len();
    let (inputs, offset, scale) = normalize(raw, n, d_in)?;
    Ok(Dataset {
        inputs,
        labels,
        classes,
        split: Split::Full,
        offset,
        scale,
    })
}

/// Concentric 2-D annuli: class `c` has radius `c + 1` with radial noise of
/// standard deviation 0.1, rescaled into the unit square.
pub fn make_rings(classes: usize, per_class: usize, rng: &mut RngState) -> Result<Dataset> {
    if classes < 2 || per_class < 2 {
        return Err(Error::config("rings need at least 2 classes and 2 samples per class"));
    }
    let mut raw = Vec::with_capacity(classes * per_class * 2);
    let mut labels = Vec::with_capacity(classes * per_class);
    for c in 0..classes {
        for _ in 0..per_class {
            let r = ring_radius(c) + 0.1 * rng.normal();
            let phi = rng.uniform(0.0, std::f64::consts::TAU);
            raw.push(r * phi.cos());
            raw.push(r * phi.sin());
            labels.push(c);
        }
    }
    let n = labels.len();
    let (inputs, offset, scale) = normalize(raw, n, 2)?;
    Ok(Dataset {
        inputs,
        labels,
        classes,
        split: Split::Full,
        offset,
        scale,
    })
}

pub fn ring_radius(class: usize) -> f64 {
    (class + 1) as f64
}

/// Stratified split; each class contributes `round(n_c·fraction)` test
/// samples, clamped so both sides keep at least one.
pub fn split(ds: &Dataset, test_fraction: f64, rng: &mut RngState) -> Result<(Dataset, Dataset)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::config(format!("test fraction must lie in (0, 1), got {test_fraction}")));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.classes];
    for (i, &y) in ds.labels.iter().enumerate() {
        by_class[y].push(i);
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (c, mut idx) in by_class.into_iter().enumerate() {
        if idx.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "class {} has {} samples; splitting needs at least 2",
                c + 1,
                idx.len()
            )));
        }
        rng.shuffle(&mut idx);
        let n_test = ((idx.len() as f64 * test_fraction).round() as usize).clamp(1, idx.len() - 1);
        test.extend_from_slice(&idx[..n_test]);
        train.extend_from_slice(&idx[n_test..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((ds.subset(&train, Split::Train), ds.subset(&test, Split::Test)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Stream;

    fn rng(seed: u64) -> RngState {
        RngState::new(seed, Stream::Data)
    }

    fn nearest_centroid_accuracy(ds: &Dataset) -> f64 {
        let d = ds.d_in();
        let mut sums = vec![vec![0.0; d]; ds.classes];
        let counts = ds.class_counts();
        for (row, &y) in ds.inputs.iter_rows().zip(&ds.labels) {
            for j in 0..d {
                sums[y][j] += row[j];
            }
        }
        for (s, &n) in sums.iter_mut().zip(&counts) {
            s.iter_mut().for_each(|v| *v /= n as f64);
        }
        let mut correct = 0;
        for (row, &y) in ds.inputs.iter_rows().zip(&ds.labels) {
            let dist = |c: &Vec<f64>| c.iter().zip(row).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            let best = (0..ds.classes)
                .min_by(|&a, &b| dist(&sums[a]).total_cmp(&dist(&sums[b])))
                .unwrap();
            correct += (best == y) as usize;
        }
        correct as f64 / ds.len() as f64
    }

    #[test]
    fn blobs_shape_and_range() {
        let ds = make_blobs(8, 50, 2, 0.06, &mut rng(1)).unwrap();
        assert_eq!(ds.inputs.shape(), &[400, 2]);
        assert_eq!(ds.class_counts(), vec![50; 8]);
        assert!(ds.inputs.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn tight_blobs_are_separable() {
        let ds = make_blobs(8, 30, 3, 1e-4, &mut rng(2)).unwrap();
        assert_eq!(nearest_centroid_accuracy(&ds), 1.0);
    }

    #[test]
    fn blobs_are_deterministic() {
        let a = make_blobs(4, 10, 2, 0.1, &mut rng(5)).unwrap();
        let b = make_blobs(4, 10, 2, 0.1, &mut rng(5)).unwrap();
        assert_eq!(a, b);
        assert!(make_blobs(4, 10, 2, 0.0, &mut rng(5)).is_err());
    }

    #[test]
    fn rings_are_deterministic_with_increasing_radii() {
        let a = make_rings(4, 40, &mut rng(3)).unwrap();
        assert_eq!(a, make_rings(4, 40, &mut rng(3)).unwrap());
        let radii: Vec<f64> = (0..4).map(ring_radius).collect();
        assert!(radii.windows(2).all(|w| w[0] < w[1]));
        assert!(a.inputs.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn split_is_stratified_and_disjoint() {
        let ds = make_blobs(8, 500, 2, 0.06, &mut rng(4)).unwrap();
        let (train, test) = split(&ds, 0.2, &mut rng(9)).unwrap();
        assert_eq!(test.class_counts(), vec![100; 8]);
        assert_eq!(train.len() + test.len(), ds.len());
        assert_eq!((train.split, test.split), (Split::Train, Split::Test));
        let (train2, test2) = split(&ds, 0.2, &mut rng(9)).unwrap();
        assert_eq!((train, test), (train2, test2));
        assert!(split(&ds, 1.0, &mut rng(9)).is_err());
    }

    #[test]
    fn split_rejects_singleton_class() {
        let mut ds = make_blobs(2, 3, 2, 0.1, &mut rng(4)).unwrap();
        ds.labels = vec![0, 0, 0, 0, 0, 1];
        assert!(split(&ds, 0.5, &mut rng(1)).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let ds = make_blobs(3, 4, 2, 0.1, &mut rng(6)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        ds.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("x1,x2,label\n"));
        let back = Dataset::read_csv(&path, 3, Split::Full).unwrap();
        assert_eq!(back.inputs, ds.inputs);
        assert_eq!(back.labels, ds.labels);
    }
}
