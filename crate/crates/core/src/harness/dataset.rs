//! In-memory labeled datasets and stratified splitting.

use crate::numerics::{Matrix, Rng};
use crate::{Error, Result};

/// A fixed design matrix with one class label per row.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub class_count: usize,
    pub name: String,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        features: Matrix,
        labels: Vec<usize>,
        class_count: usize,
    ) -> Result<Dataset> {
        if labels.len() != features.rows() {
            return Err(Error::Config(format!(
                "{} labels for {} feature rows",
                labels.len(),
                features.rows()
            )));
        }
        if class_count == 0 {
            return Err(Error::Config("class_count must be positive".into()));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::Config(format!(
                "label {bad} outside [0, {class_count})"
            )));
        }
        Ok(Dataset {
            features,
            labels,
            class_count,
            name: name.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn width(&self) -> usize {
        self.features.cols()
    }

    /// Rows and labels at `indices`, in that order. For minibatch assembly;
    /// indices must be in range.
    pub fn gather(&self, indices: &[usize]) -> (Matrix, Vec<usize>) {
        let mut features = Matrix::zeros(indices.len(), self.width());
        let mut labels = Vec::with_capacity(indices.len());
        for (r, &i) in indices.iter().enumerate() {
            features.row_mut(r).copy_from_slice(self.features.row(i));
            labels.push(self.labels[i]);
        }
        (features, labels)
    }

    /// New dataset holding the rows at `indices`, in that order.
    pub fn subset(&self, indices: &[usize], name: impl Into<String>) -> Result<Dataset> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::Config(format!(
                "subset index {bad} outside dataset of {} rows",
                self.len()
            )));
        }
        let (features, labels) = self.gather(indices);
        Dataset::new(name, features, labels, self.class_count)
    }

    /// Samples per class, indexed by class.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.class_count];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Keeps only the listed classes and relabels them by list position, so
    /// `restrict_classes(&[5, 9], ..)` maps old label 5 to 0 and 9 to 1.
    pub fn restrict_classes(&self, classes: &[usize], name: impl Into<String>) -> Result<Dataset> {
        if classes.is_empty() {
            return Err(Error::Config("restrict_classes needs at least one class".into()));
        }
        let mut map = vec![None; self.class_count];
        for (new, &old) in classes.iter().enumerate() {
            if old >= self.class_count {
                return Err(Error::Config(format!(
                    "class {old} outside [0, {})",
                    self.class_count
                )));
            }
            if map[old].is_some() {
                return Err(Error::Config(format!("class {old} listed twice")));
            }
            map[old] = Some(new);
        }
        let indices: Vec<usize> = (0..self.len())
            .filter(|&i| map[self.labels[i]].is_some())
            .collect();
        let (features, old_labels) = self.gather(&indices);
        let labels = old_labels.into_iter().map(|l| map[l].unwrap()).collect();
        Dataset::new(name, features, labels, classes.len())
    }

    /// A seeded choice of exactly `per_class` samples from every class,
    /// keeping original row order. Models scarce training data.
    pub fn take_per_class(
        &self,
        per_class: usize,
        seed: u64,
        name: impl Into<String>,
    ) -> Result<Dataset> {
        let mut rng = Rng::new(seed);
        let mut keep = Vec::new();
        for c in 0..self.class_count {
            let mut idx: Vec<usize> = (0..self.len()).filter(|&i| self.labels[i] == c).collect();
            if idx.len() < per_class {
                return Err(Error::Config(format!(
                    "class {c} has {} samples, cannot take {per_class}",
                    idx.len()
                )));
            }
            rng.shuffle(&mut idx);
            keep.extend_from_slice(&idx[..per_class]);
        }
        keep.sort_unstable();
        self.subset(&keep, name)
    }
}

/// Stratified train/val/test split. Each class is shuffled and cut
/// independently with floor counts; the ≤2 leftover samples per class go to
/// train, then val, then test.
pub fn split(
    ds: &Dataset,
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<(Dataset, Dataset, Dataset)> {
    let (f_train, f_val, f_test) = fractions;
    for f in [f_train, f_val, f_test] {
        if !(f > 0.0 && f.is_finite()) {
            return Err(Error::Config(format!(
                "split fractions must be positive, got {fractions:?}"
            )));
        }
    }
    if (f_train + f_val + f_test - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split fractions must sum to 1, got {fractions:?}"
        )));
    }
    for (c, n) in ds.class_counts().iter().enumerate() {
        if *n < 3 {
            return Err(Error::Config(format!(
                "class {c} has {n} samples; splitting needs at least 3"
            )));
        }
    }
    let mut rng = Rng::new(seed);
    let mut parts: [Vec<usize>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for c in 0..ds.class_count {
        let mut idx: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels[i] == c).collect();
        rng.shuffle(&mut idx);
        let n = idx.len();
        let mut counts = [
            (f_train * n as f64).floor() as usize,
            (f_val * n as f64).floor() as usize,
            (f_test * n as f64).floor() as usize,
        ];
        let mut leftover = n - counts.iter().sum::<usize>();
        for count in counts.iter_mut() {
            if leftover == 0 {
                break;
            }
            *count += 1;
            leftover -= 1;
        }
        let mut at = 0;
        for (part, &count) in parts.iter_mut().zip(&counts) {
            part.extend_from_slice(&idx[at..at + count]);
            at += count;
        }
    }
    Ok((
        ds.subset(&parts[0], format!("{}/train", ds.name))?,
        ds.subset(&parts[1], format!("{}/val", ds.name))?,
        ds.subset(&parts[2], format!("{}/test", ds.name))?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// `n` samples per class, feature = label value in every column.
    fn toy(classes: usize, per_class: usize, width: usize) -> Dataset {
        let n = classes * per_class;
        let mut features = Matrix::zeros(n, width);
        let mut labels = Vec::new();
        for i in 0..n {
            let c = i % classes;
            features.row_mut(i).fill(c as f64);
            labels.push(c);
        }
        Dataset::new("toy", features, labels, classes).unwrap()
    }

    #[test]
    fn validates_labels_and_shapes() {
        let m = Matrix::zeros(3, 2);
        assert!(Dataset::new("x", m.clone(), vec![0, 1], 2).is_err());
        assert!(Dataset::new("x", m.clone(), vec![0, 1, 2], 2).is_err());
        assert!(Dataset::new("x", m, vec![0, 1, 0], 2).is_ok());
    }

    #[test]
    fn canonical_split_is_exactly_stratified() {
        let ds = toy(2, 50, 3);
        let (train, val, test) = split(&ds, (0.5, 0.1, 0.4), 7).unwrap();
        assert_eq!((train.len(), val.len(), test.len()), (50, 10, 40));
        assert_eq!(train.class_counts(), [25, 25]);
        assert_eq!(val.class_counts(), [5, 5]);
        assert_eq!(test.class_counts(), [20, 20]);
        assert_eq!(train.name, "toy/train");
    }

    #[test]
    fn split_rejects_degenerate_fractions() {
        let ds = toy(2, 50, 3);
        assert!(split(&ds, (1.0, 0.0, 0.0), 7).is_err());
        assert!(split(&ds, (0.5, 0.2, 0.4), 7).is_err());
        assert!(split(&ds, (0.5, -0.1, 0.6), 7).is_err());
    }

    #[test]
    fn split_rejects_tiny_classes() {
        let ds = toy(3, 2, 2);
        let err = split(&ds, (0.5, 0.1, 0.4), 7).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn split_same_seed_same_partition() {
        let ds = toy(3, 17, 2);
        let (a1, b1, c1) = split(&ds, (0.5, 0.1, 0.4), 42).unwrap();
        let (a2, b2, c2) = split(&ds, (0.5, 0.1, 0.4), 42).unwrap();
        assert!(a1.features.bits_eq(&a2.features));
        assert!(b1.features.bits_eq(&b2.features));
        assert!(c1.features.bits_eq(&c2.features));
        assert_eq!(a1.labels, a2.labels);
    }

    #[test]
    fn restrict_classes_relabels_in_order() {
        let ds = toy(5, 4, 2);
        let sub = ds.restrict_classes(&[3, 1], "sub").unwrap();
        assert_eq!(sub.class_count, 2);
        assert_eq!(sub.len(), 8);
        // Old class 3 becomes 0, old class 1 becomes 1.
        for i in 0..sub.len() {
            let feature = sub.features.get(i, 0);
            let expected = if sub.labels[i] == 0 { 3.0 } else { 1.0 };
            assert_eq!(feature, expected);
        }
        assert!(ds.restrict_classes(&[1, 1], "dup").is_err());
        assert!(ds.restrict_classes(&[9], "oob").is_err());
    }

    #[test]
    fn take_per_class_is_exact_and_seeded() {
        let ds = toy(3, 10, 2);
        let a = ds.take_per_class(4, 5, "a").unwrap();
        let b = ds.take_per_class(4, 5, "b").unwrap();
        assert_eq!(a.class_counts(), [4, 4, 4]);
        assert!(a.features.bits_eq(&b.features));
        assert!(ds.take_per_class(11, 5, "x").is_err());
    }

    #[test]
    fn gather_respects_order() {
        let ds = toy(2, 2, 2);
        let (m, l) = ds.gather(&[3, 0]);
        assert_eq!(l, [ds.labels[3], ds.labels[0]]);
        assert_eq!(m.row(0), ds.features.row(3));
        assert_eq!(m.row(1), ds.features.row(0));
    }
}
