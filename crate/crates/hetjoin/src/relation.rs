//! Columnar relations, synthetic data generation, and the binary on-disk
//! format.
//!
//! A relation is a pair of `u32` columns: record ids and key values. The
//! generators are pure functions of their parameters and a 64-bit seed
//! (ChaCha12 keystream), so datasets are reproducible. Keys produced by the
//! default generators stay below [`PROBE_KEY_FLOOR`]; the upper half of the
//! key domain is reserved for probe tuples that must never match a build
//! tuple, which lets `gen_probe` hit an exact match count without rejection
//! sampling.

use std::collections::HashSet;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use thiserror::Error;

/// First four bytes of the binary relation format.
pub const FORMAT_MAGIC: [u8; 4] = *b"HJRL";
/// Current version of the binary relation format.
pub const FORMAT_VERSION: u32 = 1;

/// Keys at or above this value are reserved for never-matching probe tuples.
pub const PROBE_KEY_FLOOR: u32 = 1 << 31;

/// Inclusive key domain used by the generators unless overridden.
pub const DEFAULT_KEY_RANGE: (u32, u32) = (0, PROBE_KEY_FLOOR - 1);

#[derive(Debug, Error)]
pub enum RelationError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic: expected \"HJRL\", got {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {0}")]
    BadVersion(u32),
    #[error("length mismatch: header says {expected} tuples, file holds {got}")]
    LengthMismatch { expected: u64, got: u64 },
    #[error("probe generation with selectivity > 0 requires a non-empty build relation")]
    EmptyBuild,
}

/// Columnar pair of record ids and keys.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Relation {
    rids: Vec<u32>,
    keys: Vec<u32>,
}

impl Relation {
    /// Builds a relation from parallel columns. Panics if lengths differ.
    pub fn from_columns(rids: Vec<u32>, keys: Vec<u32>) -> Self {
        assert_eq!(rids.len(), keys.len(), "rid and key columns must align");
        Relation { rids, keys }
    }

    pub fn empty() -> Self {
        Relation { rids: Vec::new(), keys: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn rids(&self) -> &[u32] {
        &self.rids
    }

    pub fn keys(&self) -> &[u32] {
        &self.keys
    }

    pub fn rid(&self, i: usize) -> u32 {
        self.rids[i]
    }

    pub fn key(&self, i: usize) -> u32 {
        self.keys[i]
    }

    /// Iterates `(key, rid)` pairs in tuple order.
    pub fn pairs(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        self.keys.iter().copied().zip(self.rids.iter().copied())
    }
}

/// Distribution requested from the generators.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Distribution {
    Uniform,
    /// `s_percent` of the tuples duplicate the key of one distinct partner
    /// tuple, so duplicated keys have multiplicity exactly two.
    Skewed { s_percent: u32 },
}

/// Full description of a synthetic dataset.
#[derive(Clone, Debug)]
pub struct GenSpec {
    pub n: usize,
    pub distribution: Distribution,
    /// Inclusive key domain.
    pub key_range: (u32, u32),
    pub seed: u64,
    /// Fraction of probe tuples that must match the build side.
    pub selectivity: Option<f64>,
}

impl GenSpec {
    pub fn uniform(n: usize, seed: u64) -> Self {
        GenSpec {
            n,
            distribution: Distribution::Uniform,
            key_range: DEFAULT_KEY_RANGE,
            seed,
            selectivity: None,
        }
    }

    pub fn skewed(n: usize, s_percent: u32, seed: u64) -> Self {
        GenSpec {
            n,
            distribution: Distribution::Skewed { s_percent },
            key_range: DEFAULT_KEY_RANGE,
            seed,
            selectivity: None,
        }
    }

    pub fn generate(&self) -> Relation {
        match self.distribution {
            Distribution::Uniform => gen_uniform(self.n, self.key_range, self.seed),
            Distribution::Skewed { s_percent } => gen_skewed(self.n, s_percent, self.seed),
        }
    }
}

/// Generates `n` tuples with keys drawn independently and uniformly from the
/// inclusive `key_range`. Record ids are `0..n`.
pub fn gen_uniform(n: usize, key_range: (u32, u32), seed: u64) -> Relation {
    let (lo, hi) = key_range;
    assert!(lo <= hi, "key range must be non-empty");
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let keys = (0..n).map(|_| rng.random_range(lo..=hi)).collect();
    Relation { rids: (0..n as u32).collect(), keys }
}

/// Generates `n` tuples where exactly `floor(n*s/100)` tuples duplicate the
/// key of one distinct partner tuple. Every other key is unique, so the key
/// multiplicity histogram holds exactly `floor(n*s/100)` entries of
/// multiplicity two. Values of `s` above 50 saturate at `n/2` pairs because
/// every duplicate consumes one partner.
pub fn gen_skewed(n: usize, s_percent: u32, seed: u64) -> Relation {
    assert!(s_percent <= 100, "skew percentage must be in 0..=100");
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let (lo, hi) = DEFAULT_KEY_RANGE;

    // Distinct base keys; the domain is vastly larger than n, so rejection
    // is cheap.
    let mut seen = HashSet::with_capacity(n * 2);
    let mut keys: Vec<u32> = Vec::with_capacity(n);
    while keys.len() < n {
        let k = rng.random_range(lo..=hi);
        if seen.insert(k) {
            keys.push(k);
        }
    }

    let dup_count = (n * s_percent as usize / 100).min(n / 2);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    for i in 0..dup_count {
        let partner = order[i];
        let dup = order[dup_count + i];
        keys[dup] = keys[partner];
    }

    Relation { rids: (0..n as u32).collect(), keys }
}

/// Generates a probe relation of `n` tuples where exactly
/// `floor(n*selectivity)` tuples carry a key sampled from `build` and the
/// rest carry keys guaranteed absent from `build` (drawn from the reserved
/// upper key range). Positions of matching tuples are shuffled.
pub fn gen_probe(
    build: &Relation,
    n: usize,
    selectivity: f64,
    seed: u64,
) -> Result<Relation, RelationError> {
    assert!((0.0..=1.0).contains(&selectivity), "selectivity must be in [0,1]");
    let matches = (n as f64 * selectivity).floor() as usize;
    if matches > 0 && build.is_empty() {
        return Err(RelationError::EmptyBuild);
    }

    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let build_keys: HashSet<u32> = build.keys().iter().copied().collect();

    let mut keys = Vec::with_capacity(n);
    for _ in 0..matches {
        let idx = rng.random_range(0..build.len());
        keys.push(build.key(idx));
    }
    while keys.len() < n {
        let k = rng.random_range(PROBE_KEY_FLOOR..=u32::MAX);
        // Build keys normally live below PROBE_KEY_FLOOR; the check keeps the
        // guarantee when a caller generated the build side over a custom range.
        if !build_keys.contains(&k) {
            keys.push(k);
        }
    }
    keys.shuffle(&mut rng);

    Ok(Relation { rids: (0..n as u32).collect(), keys })
}

/// Writes the relation in the binary format: magic "HJRL", version u32,
/// tuple count u64, rid column, key column, all little-endian.
pub fn write_bin(path: &Path, rel: &Relation) -> Result<(), RelationError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&FORMAT_MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(rel.len() as u64).to_le_bytes())?;
    for col in [&rel.rids, &rel.keys] {
        for v in col.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a relation previously written by [`write_bin`].
pub fn read_bin(path: &Path) -> Result<Relation, RelationError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != FORMAT_MAGIC {
        return Err(RelationError::BadMagic(magic));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != FORMAT_VERSION {
        return Err(RelationError::BadVersion(version));
    }
    let mut qword = [0u8; 8];
    r.read_exact(&mut qword)?;
    let len = u64::from_le_bytes(qword) as usize;

    let read_column = |r: &mut BufReader<File>| -> Result<Vec<u32>, RelationError> {
        let mut bytes = vec![0u8; len * 4];
        let mut filled = 0;
        while filled < bytes.len() {
            match r.read(&mut bytes[filled..])? {
                0 => {
                    return Err(RelationError::LengthMismatch {
                        expected: len as u64,
                        got: (filled / 4) as u64,
                    })
                }
                k => filled += k,
            }
        }
        Ok(bytes.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect())
    };

    let rids = read_column(&mut r)?;
    let keys = read_column(&mut r)?;
    Ok(Relation { rids, keys })
}
