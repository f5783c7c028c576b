//! Datasets: synthetic Gaussian clusters and CSV files.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Batch;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_classes: usize,
    pub input_dim: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Noise scale around each class center; centers are standard normal.
    pub cluster_std: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Batch,
    pub test: Batch,
    pub n_classes: usize,
}

impl Dataset {
    pub fn input_dim(&self) -> usize {
        self.train.inputs.first().map_or(0, Vec::len)
    }
}

pub fn synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    if spec.n_classes < 2 || spec.input_dim == 0 || spec.train_per_class == 0 || spec.test_per_class == 0 {
        return Err(Error::Config(
            "synthetic data needs >= 2 classes and non-empty dimensions and splits".into(),
        ));
    }
    if !(spec.cluster_std >= 0.0) {
        return Err(Error::Config("cluster_std must be >= 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut gauss = |n: usize| -> Vec<f64> { (0..n).map(|_| StandardNormal.sample(&mut rng)).collect() };
    let centers: Vec<Vec<f64>> = (0..spec.n_classes).map(|_| gauss(spec.input_dim)).collect();
    let mut draw = |per_class: usize| {
        let mut inputs = Vec::with_capacity(per_class * spec.n_classes);
        let mut labels = Vec::with_capacity(per_class * spec.n_classes);
        for (label, c) in centers.iter().enumerate() {
            for _ in 0..per_class {
                let noise = gauss(spec.input_dim);
                inputs.push(c.iter().zip(noise).map(|(m, z)| m + spec.cluster_std * z).collect());
                labels.push(label);
            }
        }
        (inputs, labels)
    };
    let (train_x, train_y) = draw(spec.train_per_class);
    let (test_x, test_y) = draw(spec.test_per_class);
    let mut ds = Dataset {
        train: Batch::new(train_x, train_y, spec.n_classes)?,
        test: Batch::new(test_x, test_y, spec.n_classes)?,
        n_classes: spec.n_classes,
    };
    normalize(&mut ds);
    Ok(ds)
}

/// Reads a CSV with a header row. Every column except `label_column` is a
/// numeric feature; distinct labels are numbered in sorted order.
pub fn load_csv(path: &Path, label_column: &str, n_classes: Option<usize>, seed: u64) -> Result<Dataset> {
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?
        .clone();
    let label_at = headers
        .iter()
        .position(|h| h == label_column)
        .ok_or_else(|| Error::Dataset(format!("no label column {label_column:?} in header")))?;
    let mut rows = Vec::new();
    let mut raw_labels = Vec::new();
    for (i, record) in reader.records().enumerate() {
        // line 1 is the header
        let line = i + 2;
        let record = record.map_err(|e| Error::Dataset(format!("line {line}: {e}")))?;
        let mut features = Vec::with_capacity(record.len().saturating_sub(1));
        for (col, field) in record.iter().enumerate() {
            if col == label_at {
                raw_labels.push(field.trim().to_string());
                continue;
            }
            let v: f64 = field.trim().parse().map_err(|_| {
                Error::Dataset(format!("line {line}, column {:?}: not a number: {field:?}", &headers[col]))
            })?;
            if !v.is_finite() {
                return Err(Error::Dataset(format!("line {line}: non-finite value")));
            }
            features.push(v);
        }
        rows.push(features);
    }
    if rows.is_empty() {
        return Err(Error::Dataset(format!("{}: no data rows", path.display())));
    }
    let ids: BTreeMap<&str, usize> = {
        let mut distinct: Vec<&str> = raw_labels.iter().map(String::as_str).collect();
        distinct.sort_by(|a, b| natural_cmp(a, b));
        distinct.dedup();
        distinct.into_iter().enumerate().map(|(i, l)| (l, i)).collect()
    };
    let found = ids.len();
    if let Some(n) = n_classes {
        if n != found {
            return Err(Error::Dataset(format!("expected {n} classes, found {found}")));
        }
    }
    if found < 2 {
        return Err(Error::Dataset("need at least 2 distinct labels".into()));
    }
    let labels: Vec<usize> = raw_labels.iter().map(|l| ids[l.as_str()]).collect();
    let (train_idx, test_idx) = stratified_split(&labels, 0.8, seed);
    let pick = |idx: &[usize]| -> Result<Batch> {
        Batch::new(
            idx.iter().map(|&i| rows[i].clone()).collect(),
            idx.iter().map(|&i| labels[i]).collect(),
            found,
        )
    };
    let mut ds = Dataset {
        train: pick(&train_idx)?,
        test: pick(&test_idx)?,
        n_classes: found,
    };
    normalize(&mut ds);
    Ok(ds)
}

/// Numeric labels compare as numbers, anything else lexically.
fn natural_cmp(a: &str, b: &str) -> std::cmp::Ordering {
    match (a.parse::<f64>(), b.parse::<f64>()) {
        (Ok(x), Ok(y)) => x.total_cmp(&y),
        _ => a.cmp(b),
    }
}

/// Per class, the first round(fraction * count) shuffled members go to train.
pub fn stratified_split(labels: &[usize], fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for members in by_class.values_mut() {
        members.shuffle(&mut rng);
        let cut = (fraction * members.len() as f64).round() as usize;
        train.extend_from_slice(&members[..cut]);
        test.extend_from_slice(&members[cut..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

/// Z-scores every feature with the training mean and standard deviation.
/// Constant features are centered only.
pub fn normalize(ds: &mut Dataset) {
    let dim = ds.input_dim();
    let n = ds.train.len() as f64;
    let mut mean = vec![0.0; dim];
    for x in &ds.train.inputs {
        mean.iter_mut().zip(x).for_each(|(m, v)| *m += v / n);
    }
    let mut var = vec![0.0; dim];
    for x in &ds.train.inputs {
        var.iter_mut().zip(x).zip(&mean).for_each(|((s, v), m)| *s += (v - m) * (v - m) / n);
    }
    let scale: Vec<f64> = var.iter().map(|v| if *v > 0.0 { 1.0 / v.sqrt() } else { 1.0 }).collect();
    for x in ds.train.inputs.iter_mut().chain(ds.test.inputs.iter_mut()) {
        for ((v, m), s) in x.iter_mut().zip(&mean).zip(&scale) {
            *v = (*v - m) * s;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn spec() -> SyntheticSpec {
        SyntheticSpec {
            n_classes: 5,
            input_dim: 4,
            train_per_class: 10,
            test_per_class: 3,
            cluster_std: 0.5,
            seed: 3,
        }
    }

    #[test]
    fn synthetic_is_deterministic() {
        let a = synthetic(&spec()).unwrap();
        assert_eq!(a, synthetic(&spec()).unwrap());
        assert_eq!(a.train.len(), 50);
        assert_eq!(a.test.len(), 15);
        let other = synthetic(&SyntheticSpec { seed: 4, ..spec() }).unwrap();
        assert_ne!(a.train.inputs, other.train.inputs);
    }

    #[test]
    fn normalized_train_statistics() {
        let ds = synthetic(&spec()).unwrap();
        for j in 0..4 {
            let col: Vec<f64> = ds.train.inputs.iter().map(|x| x[j]).collect();
            let mean = col.iter().sum::<f64>() / col.len() as f64;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / col.len() as f64;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn split_is_stratified() {
        let labels: Vec<usize> = (0..103).map(|i| i % 4).collect();
        let (train, test) = stratified_split(&labels, 0.8, 1);
        assert_eq!(train.len() + test.len(), 103);
        for class in 0..4 {
            let total = labels.iter().filter(|&&l| l == class).count() as f64;
            let in_train = train.iter().filter(|&&i| labels[i] == class).count() as f64;
            assert!((in_train - 0.8 * total).abs() <= 1.0);
        }
        assert_eq!(stratified_split(&labels, 0.8, 1), (train, test));
    }

    fn write_csv(body: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(body.as_bytes()).unwrap();
        f
    }

    #[test]
    fn csv_loads_and_infers_classes() {
        let mut body = String::from("a,y,b\n");
        for i in 0..20 {
            body.push_str(&format!("{},{},{}\n", i, ["10", "2", "cat"][i % 3], i * 2));
        }
        let f = write_csv(&body);
        let ds = load_csv(f.path(), "y", None, 0).unwrap();
        assert_eq!(ds.n_classes, 3);
        assert_eq!(ds.input_dim(), 2);
        assert_eq!(ds.train.len() + ds.test.len(), 20);
        assert!(matches!(load_csv(f.path(), "y", Some(4), 0), Err(Error::Dataset(_))));
        assert!(load_csv(f.path(), "label", None, 0).is_err());
    }

    #[test]
    fn csv_errors_name_the_line() {
        let f = write_csv("x,y\n1,0\n2,1\noops,0\n");
        let msg = load_csv(f.path(), "y", None, 0).unwrap_err().to_string();
        assert!(msg.contains("line 4"), "{msg}");
    }
}
