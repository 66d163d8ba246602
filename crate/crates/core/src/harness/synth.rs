//! Synthetic transfer tasks: Gaussian class clusters on a low-dimensional
//! manifold embedded in a high-dimensional ambient space.
//!
//! The source task lives on an orthonormal basis U. A target task lives on a
//! mixed basis W_k = sqrt(overlap)*U_k + sqrt(1-overlap)*V_k with V
//! orthogonal to U, so `overlap` smoothly interpolates between "same
//! manifold, new clusters" (1.0) and "entirely new directions" (0.0).
//! Isotropic ambient noise buries whatever off-manifold signal a frozen
//! feature extractor might otherwise pick up for free, so low overlap really
//! does require new capacity or deeper fine-tuning.

use crate::harness::dataset::Dataset;
use crate::numerics::{derive_seed, Matrix, Rng};
use crate::{Error, Result};

#[derive(Clone, Debug)]
pub struct SynthSpec {
    pub source_classes: usize,
    pub target_classes: usize,
    /// Ambient dimension; must be at least twice the latent dimension.
    pub dim: usize,
    /// Manifold dimension.
    pub latent: usize,
    pub source_per_class: usize,
    pub target_per_class: usize,
    /// Shared-basis fraction between source and target manifolds, in [0,1].
    pub overlap: f64,
    /// Scale of latent cluster centers.
    pub separation: f64,
    /// Within-cluster latent stddev.
    pub cluster_stddev: f64,
    /// Ambient isotropic noise stddev.
    pub noise: f64,
    /// Reuse the source's latent centers for the target, under a seeded
    /// label permutation (requires equal class counts). With overlap 1 the
    /// target is then the source task with shuffled labels.
    pub permute_source_centers: bool,
}

/// The default is the calibrated desk-scale transfer benchmark: an easy
/// 5-class source, a richer 15-class target on entirely fresh manifold
/// directions (overlap 0), and enough ambient noise that scarce target data
/// does not trivially identify the new directions.
impl Default for SynthSpec {
    fn default() -> SynthSpec {
        SynthSpec {
            source_classes: 5,
            target_classes: 15,
            dim: 784,
            latent: 32,
            source_per_class: 120,
            target_per_class: 150,
            overlap: 0.0,
            separation: 1.75,
            cluster_stddev: 1.25,
            noise: 1.1,
            permute_source_centers: false,
        }
    }
}

impl SynthSpec {
    fn validate(&self) -> Result<()> {
        if self.source_classes < 2 || self.target_classes < 2 {
            return Err(Error::Config("tasks need at least 2 classes".into()));
        }
        if self.latent == 0 || self.dim < 2 * self.latent {
            return Err(Error::Config(format!(
                "ambient dim {} must be at least twice the latent dim {}",
                self.dim, self.latent
            )));
        }
        if self.source_per_class == 0 || self.target_per_class == 0 {
            return Err(Error::Config("per-class sample counts must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.overlap) {
            return Err(Error::Config(format!(
                "overlap must lie in [0,1], got {}",
                self.overlap
            )));
        }
        for (what, v) in [
            ("separation", self.separation),
            ("cluster_stddev", self.cluster_stddev),
            ("noise", self.noise),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{what} must be nonnegative, got {v}")));
            }
        }
        if self.separation <= 0.0 {
            return Err(Error::Config("separation must be positive".into()));
        }
        if self.permute_source_centers && self.source_classes != self.target_classes {
            return Err(Error::Config(
                "permuted centers need equal source/target class counts".into(),
            ));
        }
        Ok(())
    }
}

/// Orthonormal columns (each `dim` long) via Gram-Schmidt on Gaussian draws.
fn orthonormal_columns(rng: &mut Rng, dim: usize, count: usize) -> Vec<Vec<f64>> {
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(count);
    while cols.len() < count {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.next_gaussian()).collect();
        for u in &cols {
            let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            for (vi, ui) in v.iter_mut().zip(u) {
                *vi -= dot * ui;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        // Degenerate draw; essentially impossible for dim >> count, but
        // redraw rather than divide by ~0.
        if norm < 1e-6 {
            continue;
        }
        for vi in v.iter_mut() {
            *vi /= norm;
        }
        cols.push(v);
    }
    cols
}

fn mixed_basis(u: &[Vec<f64>], v: &[Vec<f64>], overlap: f64) -> Vec<Vec<f64>> {
    let a = overlap.sqrt();
    let b = (1.0 - overlap).sqrt();
    u.iter()
        .zip(v)
        .map(|(uc, vc)| uc.iter().zip(vc).map(|(x, y)| a * x + b * y).collect())
        .collect()
}

/// Class centers on the sphere of radius `separation * sqrt(latent)`. Equal
/// radii make class identity purely directional, so sample magnitude carries
/// no label information; expected pairwise distances match what unnormalized
/// Gaussian draws at scale `separation` would give.
fn latent_centers(rng: &mut Rng, classes: usize, latent: usize, separation: f64) -> Vec<Vec<f64>> {
    let radius = separation * (latent as f64).sqrt();
    let mut centers = Vec::with_capacity(classes);
    while centers.len() < classes {
        let v: Vec<f64> = (0..latent).map(|_| rng.next_gaussian()).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-6 {
            continue;
        }
        centers.push(v.into_iter().map(|x| radius * x / norm).collect());
    }
    centers
}

/// One task: `per_class` samples around each center, embedded through
/// `basis`, plus ambient noise. Sample loop order is class-major, so draws
/// are reproducible.
fn sample_task(
    name: &str,
    basis: &[Vec<f64>],
    centers: &[Vec<f64>],
    per_class: usize,
    cluster_stddev: f64,
    noise: f64,
    dim: usize,
    rng: &mut Rng,
) -> Result<Dataset> {
    let n = centers.len() * per_class;
    let mut features = Matrix::zeros(n, dim);
    let mut labels = Vec::with_capacity(n);
    let mut row = 0;
    for (class, center) in centers.iter().enumerate() {
        for _ in 0..per_class {
            let z: Vec<f64> = center
                .iter()
                .map(|c| c + cluster_stddev * rng.next_gaussian())
                .collect();
            let out = features.row_mut(row);
            for (k, zk) in z.iter().enumerate() {
                for (o, bk) in out.iter_mut().zip(&basis[k]) {
                    *o += zk * bk;
                }
            }
            for o in out.iter_mut() {
                *o += noise * rng.next_gaussian();
            }
            labels.push(class);
            row += 1;
        }
    }
    Dataset::new(name, features, labels, centers.len())
}

/// Builds a (source, target) pair sharing `spec.overlap` of their manifold
/// basis. Deterministic in `seed`.
pub fn synth_transfer_tasks(seed: u64, spec: &SynthSpec) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    let mut basis_rng = Rng::new(derive_seed(seed, "basis"));
    let cols = orthonormal_columns(&mut basis_rng, spec.dim, 2 * spec.latent);
    let (u, v) = cols.split_at(spec.latent);

    let mut source_rng = Rng::new(derive_seed(seed, "source"));
    let source_centers = latent_centers(
        &mut source_rng,
        spec.source_classes,
        spec.latent,
        spec.separation,
    );
    let source = sample_task(
        "synth-source",
        u,
        &source_centers,
        spec.source_per_class,
        spec.cluster_stddev,
        spec.noise,
        spec.dim,
        &mut source_rng,
    )?;

    let mut target_rng = Rng::new(derive_seed(seed, "target"));
    let target_centers = if spec.permute_source_centers {
        let mut order: Vec<usize> = (0..spec.source_classes).collect();
        target_rng.shuffle(&mut order);
        order.into_iter().map(|i| source_centers[i].clone()).collect()
    } else {
        latent_centers(
            &mut target_rng,
            spec.target_classes,
            spec.latent,
            spec.separation,
        )
    };
    let w = mixed_basis(u, v, spec.overlap);
    let target = sample_task(
        "synth-target",
        &w,
        &target_centers,
        spec.target_per_class,
        spec.cluster_stddev,
        spec.noise,
        spec.dim,
        &mut target_rng,
    )?;
    Ok((source, target))
}

/// A sequence of related tasks for continual growth. Task 0 uses the source
/// class/sample counts on the pure basis U; later tasks use the target
/// counts on bases that drift linearly from U toward the final mix
/// `spec.overlap`, so each hop is a short step but the endpoints are far
/// apart. Fresh centers per task.
pub fn synth_task_chain(seed: u64, spec: &SynthSpec, n_tasks: usize) -> Result<Vec<Dataset>> {
    spec.validate()?;
    if n_tasks < 2 {
        return Err(Error::Config(format!(
            "a task chain needs at least 2 tasks, got {n_tasks}"
        )));
    }
    let mut basis_rng = Rng::new(derive_seed(seed, "basis"));
    let cols = orthonormal_columns(&mut basis_rng, spec.dim, 2 * spec.latent);
    let (u, v) = cols.split_at(spec.latent);

    let mut tasks = Vec::with_capacity(n_tasks);
    for i in 0..n_tasks {
        let frac = i as f64 / (n_tasks - 1) as f64;
        let alpha = 1.0 - frac * (1.0 - spec.overlap);
        let basis = mixed_basis(u, v, alpha);
        let (classes, per_class) = if i == 0 {
            (spec.source_classes, spec.source_per_class)
        } else {
            (spec.target_classes, spec.target_per_class)
        };
        let mut rng = Rng::new(derive_seed(seed, &format!("task{i}")));
        let centers = latent_centers(&mut rng, classes, spec.latent, spec.separation);
        tasks.push(sample_task(
            &format!("synth-task{i}"),
            &basis,
            &centers,
            per_class,
            spec.cluster_stddev,
            spec.noise,
            spec.dim,
            &mut rng,
        )?);
    }
    Ok(tasks)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> SynthSpec {
        SynthSpec {
            source_classes: 3,
            target_classes: 4,
            dim: 20,
            latent: 4,
            source_per_class: 10,
            target_per_class: 8,
            overlap: 0.5,
            separation: 3.0,
            cluster_stddev: 1.0,
            noise: 0.0,
            permute_source_centers: false,
        }
    }

    fn basis_for(seed: u64, spec: &SynthSpec) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let mut rng = Rng::new(derive_seed(seed, "basis"));
        let cols = orthonormal_columns(&mut rng, spec.dim, 2 * spec.latent);
        let (u, v) = cols.split_at(spec.latent);
        (u.to_vec(), v.to_vec())
    }

    fn energy_in(basis: &[Vec<f64>], x: &[f64]) -> f64 {
        basis
            .iter()
            .map(|col| x.iter().zip(col).map(|(a, b)| a * b).sum::<f64>().powi(2))
            .sum()
    }

    #[test]
    fn basis_is_orthonormal() {
        let mut rng = Rng::new(5);
        let cols = orthonormal_columns(&mut rng, 30, 8);
        for (i, a) in cols.iter().enumerate() {
            for (j, b) in cols.iter().enumerate() {
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-10, "col {i} . col {j} = {dot}");
            }
        }
    }

    #[test]
    fn same_seed_is_bitwise_identical() {
        let spec = SynthSpec {
            noise: 0.5,
            ..small_spec()
        };
        let (s1, t1) = synth_transfer_tasks(9, &spec).unwrap();
        let (s2, t2) = synth_transfer_tasks(9, &spec).unwrap();
        assert!(s1.features.bits_eq(&s2.features));
        assert!(t1.features.bits_eq(&t2.features));
        assert_eq!(s1.labels, s2.labels);
        assert_eq!(t1.labels, t2.labels);
        let (s3, _) = synth_transfer_tasks(10, &spec).unwrap();
        assert!(!s1.features.bits_eq(&s3.features));
    }

    #[test]
    fn overlap_controls_shared_energy() {
        for overlap in [0.0, 0.3, 1.0] {
            let spec = SynthSpec {
                overlap,
                ..small_spec()
            };
            let (source, target) = synth_transfer_tasks(3, &spec).unwrap();
            let (u, _) = basis_for(3, &spec);
            // Noise-free samples lie exactly on their manifold, so the
            // U-energy fraction of every target row equals the overlap.
            for i in 0..source.len() {
                let x = source.features.row(i);
                let total: f64 = x.iter().map(|a| a * a).sum();
                assert!((energy_in(&u, x) - total).abs() < 1e-9 * total.max(1.0));
            }
            for i in 0..target.len() {
                let x = target.features.row(i);
                let total: f64 = x.iter().map(|a| a * a).sum();
                let shared = energy_in(&u, x);
                assert!(
                    (shared - overlap * total).abs() < 1e-9 * total.max(1.0),
                    "overlap {overlap}: shared {shared} of {total}"
                );
            }
        }
    }

    #[test]
    fn permuted_centers_reuse_source_clusters() {
        let spec = SynthSpec {
            target_classes: 3,
            overlap: 1.0,
            cluster_stddev: 0.0,
            permute_source_centers: true,
            ..small_spec()
        };
        let (source, target) = synth_transfer_tasks(4, &spec).unwrap();
        // With zero spread every sample equals its class center, and the
        // target centers are the source centers under a permutation.
        for i in 0..target.len() {
            let trow = target.features.row(i);
            let hit = (0..source.len()).any(|j| {
                source
                    .features
                    .row(j)
                    .iter()
                    .zip(trow)
                    .all(|(a, b)| a.to_bits() == b.to_bits())
            });
            assert!(hit, "target row {i} matches no source center");
        }
    }

    #[test]
    fn chain_interpolates_toward_final_overlap() {
        let spec = SynthSpec {
            overlap: 0.2,
            ..small_spec()
        };
        let tasks = synth_task_chain(8, &spec, 3).unwrap();
        assert_eq!(tasks.len(), 3);
        assert_eq!(tasks[0].class_count, 3);
        assert_eq!(tasks[1].class_count, 4);
        let (u, _) = basis_for(8, &spec);
        let mut fractions = Vec::new();
        for task in &tasks {
            let x = task.features.row(0);
            let total: f64 = x.iter().map(|a| a * a).sum();
            fractions.push(energy_in(&u, x) / total);
        }
        assert!((fractions[0] - 1.0).abs() < 1e-9);
        assert!((fractions[1] - 0.6).abs() < 1e-9);
        assert!((fractions[2] - 0.2).abs() < 1e-9);
    }

    #[test]
    fn degenerate_specs_are_rejected() {
        let mut bad = small_spec();
        bad.overlap = 1.5;
        assert!(synth_transfer_tasks(1, &bad).is_err());
        let mut bad = small_spec();
        bad.dim = 7;
        assert!(synth_transfer_tasks(1, &bad).is_err());
        let mut bad = small_spec();
        bad.source_classes = 1;
        assert!(synth_transfer_tasks(1, &bad).is_err());
        let mut bad = small_spec();
        bad.permute_source_centers = true;
        assert!(synth_transfer_tasks(1, &bad).is_err(), "class counts differ");
        assert!(synth_task_chain(1, &small_spec(), 1).is_err());
    }
}
