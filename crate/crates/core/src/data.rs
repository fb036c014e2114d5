//! LIBSVM-format dataset parsing, agent sharding, and mini-batch sampling.

use nalgebra::DVector;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::protocol::{derive_stream, stream_id};

/// One labeled sample. Labels are normalized to {0, 1}.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub features: DVector<f64>,
    pub label: f64,
}

/// The slice of the dataset owned by one agent.
#[derive(Clone, Debug)]
pub struct AgentShard {
    pub agent: usize,
    pub samples: Vec<Sample>,
}

impl AgentShard {
    /// Local sample count.
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

fn normalize_label(raw: f64) -> Option<f64> {
    if raw == -1.0 || raw == 0.0 {
        Some(0.0)
    } else if raw == 1.0 {
        Some(1.0)
    } else {
        None
    }
}

/// Parse a LIBSVM text file (`label idx:val idx:val ...`) into dense
/// `d`-dimensional samples. File indices are 1-based; labels in {-1, +1}
/// map to {0, 1}.
pub fn parse_libsvm<P: AsRef<Path>>(path: P, d: usize) -> Result<Vec<Sample>> {
    let name = path.as_ref().display().to_string();
    let text = fs::read_to_string(&path)?;
    parse_libsvm_text(&text, d, &name)
}

pub fn parse_libsvm_text(text: &str, d: usize, name: &str) -> Result<Vec<Sample>> {
    let mut samples = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: name.to_string(),
            line: lineno + 1,
            msg,
        };
        let mut tokens = line.split_whitespace();
        let label_tok = tokens.next().ok_or_else(|| err("missing label".into()))?;
        let raw: f64 = label_tok
            .parse()
            .map_err(|_| err(format!("bad label {label_tok:?}")))?;
        let label =
            normalize_label(raw).ok_or_else(|| err(format!("label {raw} is not in {{-1,0,+1}}")))?;
        let mut features = DVector::zeros(d);
        let mut seen = vec![false; d];
        for tok in tokens {
            let (idx_s, val_s) = tok
                .split_once(':')
                .ok_or_else(|| err(format!("bad feature token {tok:?}")))?;
            let idx: usize = idx_s
                .parse()
                .map_err(|_| err(format!("bad feature index {idx_s:?}")))?;
            if idx == 0 || idx > d {
                return Err(err(format!("feature index {idx} outside 1..={d}")));
            }
            if seen[idx - 1] {
                return Err(err(format!("duplicate feature index {idx}")));
            }
            seen[idx - 1] = true;
            features[idx - 1] = val_s
                .parse()
                .map_err(|_| err(format!("bad feature value {val_s:?}")))?;
        }
        samples.push(Sample { features, label });
    }
    Ok(samples)
}

/// Render a sample back to one LIBSVM line (zero features are dropped,
/// indices are 1-based). Round-trips exactly through `parse_libsvm_text`.
pub fn format_libsvm(sample: &Sample) -> String {
    let mut line = if sample.label == 1.0 {
        String::from("1")
    } else {
        String::from("0")
    };
    for (k, &v) in sample.features.iter().enumerate() {
        if v != 0.0 {
            line.push_str(&format!(" {}:{}", k + 1, v));
        }
    }
    line
}

pub fn write_libsvm<P: AsRef<Path>>(path: P, samples: &[Sample]) -> Result<()> {
    let mut text = String::new();
    for s in samples {
        text.push_str(&format_libsvm(s));
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

/// How samples are assigned to agents.
#[derive(Clone, Copy, Debug)]
pub enum PartitionStrategy {
    /// Consecutive slices in file order.
    Contiguous,
    /// A seeded shuffle first, then consecutive slices. The seed expands on
    /// the dedicated partition stream.
    Shuffled(u64),
}

/// Split samples across `n` agents into shards of size `floor(N/n)` or
/// `ceil(N/n)` (the first `N mod n` shards get the extra sample).
pub fn partition(
    samples: Vec<Sample>,
    n: usize,
    strategy: PartitionStrategy,
) -> Result<Vec<AgentShard>> {
    let total = samples.len();
    if n == 0 {
        return Err(Error::InvalidArgument("cannot partition over zero agents".into()));
    }
    if n > total {
        return Err(Error::InvalidArgument(format!(
            "cannot split {total} samples across {n} agents"
        )));
    }
    let order: Vec<usize> = match strategy {
        PartitionStrategy::Contiguous => (0..total).collect(),
        PartitionStrategy::Shuffled(seed) => {
            let mut rng = derive_stream(seed, stream_id::PARTITION);
            let mut order: Vec<usize> = (0..total).collect();
            // Fisher-Yates on the index vector.
            for i in (1..total).rev() {
                let j = rng.random_range(0..=i);
                order.swap(i, j);
            }
            order
        }
    };
    let base = total / n;
    let extra = total % n;
    let mut slots: Vec<Option<Sample>> = samples.into_iter().map(Some).collect();
    let mut shards = Vec::with_capacity(n);
    let mut cursor = 0;
    for agent in 0..n {
        let size = base + usize::from(agent < extra);
        let mut local = Vec::with_capacity(size);
        for &idx in &order[cursor..cursor + size] {
            local.push(slots[idx].take().expect("index used twice"));
        }
        cursor += size;
        shards.push(AgentShard {
            agent,
            samples: local,
        });
    }
    Ok(shards)
}

/// Uniform sample of `size` distinct indices from the shard, returned in
/// ascending order so downstream sums are order-independent.
pub fn sample_batch<R: Rng>(shard: &AgentShard, size: usize, rng: &mut R) -> Result<Vec<usize>> {
    if size == 0 || size > shard.len() {
        return Err(Error::InvalidArgument(format!(
            "batch size {size} invalid for a shard of {} samples",
            shard.len()
        )));
    }
    let mut idx = rand::seq::index::sample(rng, shard.len(), size).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

/// Synthetic logistic-regression data used as a stand-in benchmark: bounded
/// correlated features with a low effective rank plus a constant intercept
/// attribute (as in real encoded attribute data), labels consistent with a
/// ground-truth affine classifier separated by a margin band. This keeps
/// mini-batch unit-step Newton in its stable regime while the problem stays
/// genuinely nonquadratic.
pub fn synthesize_logistic(n_samples: usize, d: usize, seed: u64) -> Vec<Sample> {
    synthesize_logistic_with(n_samples, d, seed, 0.3, 0.25, d.min(5))
}

/// Generator with explicit knobs: the half-width of the empty margin band,
/// the class-balance bias, and the latent feature rank. The mixing has
/// orthonormal columns (uniformly conditioned), and the last coordinate is a
/// constant intercept attribute so the affine separator is realizable.
pub fn synthesize_logistic_with(
    n_samples: usize,
    d: usize,
    seed: u64,
    gap: f64,
    bias: f64,
    rank: usize,
) -> Vec<Sample> {
    let latent_dim = d.saturating_sub(1).max(1);
    let rank = rank.clamp(1, latent_dim);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Orthonormal mixing columns: latent directions map to feature space
    // with one common gain, so no direction is nearly invisible.
    let mixing_scale = 0.85;
    let gaussian = nalgebra::DMatrix::from_fn(latent_dim, rank, |_, _| {
        let z: f64 = StandardNormal.sample(&mut rng);
        z
    });
    let mixing = gaussian.qr().q() * mixing_scale;
    let mut separator = DVector::from_fn(rank, |_, _| {
        let z: f64 = StandardNormal.sample(&mut rng);
        z
    });
    let norm = separator.norm();
    if norm > 0.0 {
        separator /= norm;
    }
    (0..n_samples)
        .map(|_| {
            let (latent, m) = loop {
                let candidate = DVector::from_fn(rank, |_, _| rng.random_range(-1.0..1.0));
                let m = separator.dot(&candidate) - bias;
                if m.abs() >= gap {
                    break (candidate, m);
                }
            };
            let mut features = DVector::zeros(d);
            if d > 1 {
                let mixed = &mixing * &latent;
                for k in 0..latent_dim {
                    // The orthonormal mixing keeps coordinates well inside
                    // [-1, 1]; clamp guards the rare tail.
                    features[k] = mixed[k].clamp(-1.0, 1.0);
                }
            }
            features[d - 1] = 0.25;
            let label = if m > 0.0 { 1.0 } else { 0.0 };
            Sample { features, label }
        })
        .collect()
}
