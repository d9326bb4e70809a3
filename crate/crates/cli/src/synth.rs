//! Synthetic head-like volumes: smooth Gaussian blobs inside an ellipsoid,
//! wrapped in a bright shell.

use std::path::Path;

use edmsr::volume::{Dims, Domain, Volume};
use edmsr::{Error, Result};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub seed: u64,
    pub dims: [usize; 3],
    pub train: Vec<String>,
    pub test: Vec<String>,
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST);
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Invalid(e.to_string()))?;
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn subjects(&self) -> impl Iterator<Item = &String> {
        self.train.iter().chain(&self.test)
    }
}

pub fn subject_id(i: usize) -> String {
    format!("sub-{i:03}")
}

struct Blob {
    center: [f64; 3],
    width: f64,
    amplitude: f64,
}

fn smooth_step(edge: f64, x: f64, width: f64) -> f64 {
    1.0 / (1.0 + (-(x - edge) / width).exp())
}

/// One raw-intensity subject. Voxel `(z, y, x)` is mapped to `[-1, 1]^3`.
pub fn generate_subject(dims: Dims, rng: &mut ChaCha8Rng) -> Result<Volume> {
    let radii: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.75..0.95));
    let centre: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.05..0.05));
    let n_blobs = rng.random_range(10..16);
    let blobs: Vec<Blob> = (0..n_blobs)
        .map(|_| Blob {
            center: std::array::from_fn(|a| centre[a] + radii[a] * rng.random_range(-0.7..0.7)),
            // In voxels of the largest axis, so blobs stay band-limited.
            width: rng.random_range(2.0..5.0),
            amplitude: rng.random_range(-150.0..250.0),
        })
        .collect();
    let base = rng.random_range(250.0..350.0);
    let shell = rng.random_range(550.0..700.0);
    let extent = [dims.d, dims.h, dims.w];
    let voxel = 2.0 / *extent.iter().max().expect("three axes") as f64;
    let coord = |i: usize, n: usize| (i as f64 + 0.5) / n as f64 * 2.0 - 1.0;

    let mut out = Vec::with_capacity(dims.len());
    for z in 0..dims.d {
        for y in 0..dims.h {
            for x in 0..dims.w {
                let p = [coord(z, dims.d), coord(y, dims.h), coord(x, dims.w)];
                let r = (0..3)
                    .map(|a| ((p[a] - centre[a]) / radii[a]).powi(2))
                    .sum::<f64>()
                    .sqrt();
                let mut tissue = base;
                for b in &blobs {
                    let d2: f64 = (0..3)
                        .map(|a| ((p[a] - b.center[a]) * extent[a] as f64 / 2.0 * voxel).powi(2))
                        .sum();
                    let w = b.width * voxel;
                    tissue += b.amplitude * (-d2 / (2.0 * w * w)).exp();
                }
                let inside = 1.0 - smooth_step(0.82, r, 0.03);
                let in_shell = smooth_step(0.84, r, 0.02) * (1.0 - smooth_step(1.0, r, 0.02));
                out.push((inside * tissue.max(0.0) + in_shell * shell).max(0.0));
            }
        }
    }
    Volume::new(dims, out, Domain::Raw)
}

/// Subject-level split: `max(1, n / 8)` held-out subjects chosen by a
/// seeded shuffle.
pub fn split_subjects(n: usize, seed: u64) -> Result<(Vec<String>, Vec<String>)> {
    if n < 2 {
        return Err(Error::Config(format!("need at least 2 subjects to split, got {n}")));
    }
    let mut ids: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    ids.shuffle(&mut rng);
    let n_test = (n / 8).max(1);
    let mut test: Vec<usize> = ids[..n_test].to_vec();
    let mut train: Vec<usize> = ids[n_test..].to_vec();
    test.sort_unstable();
    train.sort_unstable();
    Ok((
        train.into_iter().map(subject_id).collect(),
        test.into_iter().map(subject_id).collect(),
    ))
}

/// Generates `n` subjects and their manifest. Subject `i` draws from
/// stream `i` of the seed, so the set is independent of generation order.
pub fn synthesize(n: usize, dims: Dims, seed: u64) -> Result<(Manifest, Vec<(String, Volume)>)> {
    if dims.d < 16 || dims.h < 16 || dims.w < 16 {
        return Err(Error::Dims(format!("synthetic volumes need at least 16^3, got {dims}")));
    }
    let (train, test) = split_subjects(n, seed)?;
    let volumes = (0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            Ok((subject_id(i), generate_subject(dims, &mut rng)?))
        })
        .collect::<Result<_>>()?;
    let manifest = Manifest {
        seed,
        dims: dims.as_array(),
        train,
        test,
    };
    Ok((manifest, volumes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_counts_and_disjointness() {
        let (train, test) = split_subjects(4, 3).unwrap();
        assert_eq!((train.len(), test.len()), (3, 1));
        assert!(test.iter().all(|t| !train.contains(t)));
        let (train, test) = split_subjects(8, 3).unwrap();
        assert_eq!((train.len(), test.len()), (7, 1));
        assert!(split_subjects(1, 0).is_err());
    }

    #[test]
    fn subjects_are_deterministic_and_distinct() {
        let dims = Dims::new(16, 16, 16);
        let (_, a) = synthesize(3, dims, 5).unwrap();
        let (_, b) = synthesize(3, dims, 5).unwrap();
        assert_eq!(a, b);
        assert_ne!(a[0].1, a[1].1);
    }

    #[test]
    fn has_contrast() {
        let (_, v) = synthesize(2, Dims::new(16, 32, 32), 1).unwrap();
        let vox = v[0].1.voxels();
        let max = vox.iter().copied().fold(f64::MIN, f64::max);
        let min = vox.iter().copied().fold(f64::MAX, f64::min);
        assert!(min >= 0.0 && max > 300.0);
    }

    #[test]
    fn too_small_rejected() {
        assert!(synthesize(2, Dims::new(8, 16, 16), 0).is_err());
    }
}
