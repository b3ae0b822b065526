//! Activation records, the GACT file format, dataset partitioning and the
//! synthetic benchmark generator.

pub mod gact;
pub mod synthetic;

use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use rand::RngCore;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{FormatError, OodError, Result};
use crate::gram::FeatureMap;

pub use gact::{
    read_activations, read_all, write_activations, ActivationReader, ActivationWriter, GactHeader, GactLayout,
};

/// One example: the network's predicted class and a feature map per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationRecord {
    pub predicted_class: usize,
    pub layers: Vec<FeatureMap>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetRole {
    Train,
    Validation,
    IdTest,
    OodTest,
}

/// An activation file on disk with its validated header.
#[derive(Debug, Clone)]
pub struct DatasetHandle {
    pub path: PathBuf,
    pub header: GactHeader,
    pub role: DatasetRole,
}

impl DatasetHandle {
    /// Opens `path` and checks that the file length agrees with the header's
    /// record count.
    pub fn open(path: impl AsRef<Path>, role: DatasetRole) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let file = File::open(&path)?;
        let len = file.metadata()?.len();
        let header = gact::read_header(&mut BufReader::new(file))?;
        let expected = header.layout.header_bytes() as u64 + header.record_count * header.layout.record_bytes() as u64;
        if len < expected {
            return Err(FormatError::Truncated {
                context: format!("{}: {len} bytes, header implies {expected}", path.display()),
            }
            .into());
        }
        if len > expected {
            return Err(FormatError::TrailingData {
                records: header.record_count,
            }
            .into());
        }
        Ok(Self { path, header, role })
    }

    pub fn len(&self) -> usize {
        self.header.record_count as usize
    }

    pub fn is_empty(&self) -> bool {
        self.header.record_count == 0
    }

    pub fn records(&self) -> Result<ActivationReader<BufReader<File>>> {
        read_activations(&self.path)
    }
}

/// ChaCha8 keyed by the little-endian seed in the first eight key bytes,
/// remaining key bytes zero, stream `stream`.
pub fn seeded_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(stream);
    rng
}

/// Uniform integer in `[0, bound)` by rejection on raw 64-bit draws.
fn uniform_below(rng: &mut impl RngCore, bound: u64) -> u64 {
    debug_assert!(bound > 0);
    let limit = u64::MAX - u64::MAX % bound;
    loop {
        let x = rng.next_u64();
        if x < limit {
            return x % bound;
        }
    }
}

/// Fisher–Yates permutation of `0..n`, walking from the last index down.
pub fn shuffled_indices(n: usize, rng: &mut impl RngCore) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = uniform_below(rng, i as u64 + 1) as usize;
        idx.swap(i, j);
    }
    idx
}

/// Disjoint index sets; each list is sorted ascending so downstream passes
/// see records in file order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidationSplit {
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

impl ValidationSplit {
    pub fn select<T: Clone>(&self, items: &[T]) -> (Vec<T>, Vec<T>) {
        let pick = |ix: &[usize]| ix.iter().map(|&i| items[i].clone()).collect();
        (pick(&self.validation), pick(&self.test))
    }
}

/// Seeded random split of `n` items: the first `⌊fraction·n⌋` positions of a
/// Fisher–Yates permutation become validation.
pub fn split_indices(n: usize, fraction: f64, seed: u64) -> Result<ValidationSplit> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(OodError::InvalidArgument(format!(
            "validation fraction must be in (0, 1), got {fraction}"
        )));
    }
    let n_val = (fraction * n as f64).floor() as usize;
    if n_val == 0 || n_val == n {
        return Err(OodError::TooFewValues {
            needed: (1.0 / fraction).ceil() as usize,
            got: n,
        });
    }
    let perm = shuffled_indices(n, &mut seeded_rng(seed, 0));
    let mut validation = perm[..n_val].to_vec();
    let mut test = perm[n_val..].to_vec();
    validation.sort_unstable();
    test.sort_unstable();
    Ok(ValidationSplit { validation, test })
}

/// Splits a dataset handle into validation and remaining test indices.
pub fn split_validation(dataset: &DatasetHandle, fraction: f64, seed: u64) -> Result<ValidationSplit> {
    split_indices(dataset.len(), fraction, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_sizes_and_determinism() {
        let a = split_indices(100, 0.1, 42).unwrap();
        assert_eq!(a.validation.len(), 10);
        assert_eq!(a.test.len(), 90);
        assert_eq!(a, split_indices(100, 0.1, 42).unwrap());
        let mut all: Vec<usize> = a.validation.iter().chain(&a.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn different_seeds_differ() {
        for s in 0..10u64 {
            let a = split_indices(100, 0.1, 2 * s).unwrap();
            let b = split_indices(100, 0.1, 2 * s + 1).unwrap();
            assert_ne!(a.validation, b.validation, "seeds {} and {}", 2 * s, 2 * s + 1);
        }
    }

    #[test]
    fn floor_rule() {
        let s = split_indices(3, 0.5, 0).unwrap();
        assert_eq!((s.validation.len(), s.test.len()), (1, 2));
    }

    #[test]
    fn too_small_or_bad_fraction() {
        assert!(matches!(split_indices(9, 0.1, 0), Err(OodError::TooFewValues { .. })));
        assert!(split_indices(100, 0.0, 0).is_err());
        assert!(split_indices(100, 1.0, 0).is_err());
    }

    #[test]
    fn fisher_yates_is_a_permutation() {
        let mut rng = seeded_rng(7, 3);
        let mut p = shuffled_indices(257, &mut rng);
        assert_ne!(p, (0..257).collect::<Vec<_>>());
        p.sort_unstable();
        assert_eq!(p, (0..257).collect::<Vec<_>>());
    }

    #[test]
    fn rng_streams_are_independent() {
        let a = seeded_rng(1, 0).next_u64();
        let b = seeded_rng(1, 1).next_u64();
        let c = seeded_rng(1, 0).next_u64();
        assert_ne!(a, b);
        assert_eq!(a, c);
    }
}
