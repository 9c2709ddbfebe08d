//! Synthetic "phone"-like corpus: a first-order Markov chain over latent states with
//! geometric dwell times; each state emits a fixed smooth envelope plus Gaussian noise.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use super::{write_features, Manifest, ManifestEntry, Split, MANIFEST_NAME};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Every `EVAL_STRIDE`-th sequence goes to the eval split (a 95/5 split).
pub const EVAL_STRIDE: usize = 20;
/// Number of successor states each state may transition to.
const BRANCHING: usize = 4;
/// Minimum envelope distance per unit of `sqrt(feature_dim)`.
const MIN_SEPARATION: f64 = 0.5;
const MAX_TRIES: usize = 2000;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub n_states: usize,
    pub feature_dim: usize,
    /// Mean dwell length in frames.
    pub frames_per_state: f64,
    pub n_sequences: usize,
    pub seq_len_min: usize,
    pub seq_len_max: usize,
    pub noise_std: f64,
    pub seed: u64,
}

/// The defaults are the reference corpus the trend checks are calibrated on.
impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_states: 64,
            feature_dim: 8,
            frames_per_state: 2.0,
            n_sequences: 8000,
            seq_len_min: 256,
            seq_len_max: 768,
            noise_std: 0.5,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.n_states < 2 {
            return bad(format!("n_states must be >= 2, got {}", self.n_states));
        }
        if self.feature_dim == 0 {
            return bad("feature_dim must be positive".into());
        }
        if !self.frames_per_state.is_finite() || self.frames_per_state < 1.0 {
            return bad(format!("frames_per_state must be >= 1, got {}", self.frames_per_state));
        }
        if self.seq_len_min == 0 || self.seq_len_min > self.seq_len_max {
            return bad(format!(
                "need 1 <= seq_len_min <= seq_len_max, got {}..{}",
                self.seq_len_min, self.seq_len_max
            ));
        }
        if !self.noise_std.is_finite() || self.noise_std < 0.0 {
            return bad(format!("noise_std must be >= 0, got {}", self.noise_std));
        }
        if self.n_sequences == 0 {
            return bad("n_sequences must be positive".into());
        }
        Ok(())
    }

    pub fn split_of(&self, i: usize) -> Split {
        let stride_eval = i % EVAL_STRIDE == EVAL_STRIDE - 1;
        let fallback = self.n_sequences < EVAL_STRIDE && self.n_sequences > 1 && i == self.n_sequences - 1;
        if stride_eval || fallback {
            Split::Eval
        } else {
            Split::Train
        }
    }
}

#[derive(Clone, Debug)]
pub struct SynthSequence {
    /// `[T, feature_dim]`, values already rounded to float32.
    pub frames: Tensor,
    pub states: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct SynthCorpus {
    /// `[n_states, feature_dim]`, rounded to float32.
    pub envelopes: Tensor,
    pub sequences: Vec<SynthSequence>,
}

fn round32(v: f64) -> f64 {
    v as f32 as f64
}

/// Random smooth vector with unit RMS: Gaussian draws under a [1/4, 1/2, 1/4] filter.
fn smooth_envelope(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let raw: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
    let at = |i: isize| raw[i.clamp(0, dim as isize - 1) as usize];
    let smooth: Vec<f64> = (0..dim as isize)
        .map(|i| 0.25 * at(i - 1) + 0.5 * at(i) + 0.25 * at(i + 1))
        .collect();
    let rms = (smooth.iter().map(|v| v * v).sum::<f64>() / dim as f64).sqrt().max(1e-12);
    smooth.into_iter().map(|v| round32(v / rms)).collect()
}

/// Transition table built from `BRANCHING` random derangements mixed with
/// weights shared by all states. The matrix is doubly stochastic, so every
/// state is equally frequent in the long run. Returns successor lists and the
/// shared cumulative weights.
fn transitions(n: usize, rng: &mut ChaCha8Rng) -> (Vec<Vec<usize>>, Vec<f64>) {
    let perms: Vec<Vec<usize>> = (0..BRANCHING)
        .map(|_| {
            let mut p: Vec<usize> = (0..n).collect();
            // Rejection keeps the draw uniform over derangements.
            loop {
                p.shuffle(rng);
                if p.iter().enumerate().all(|(i, &j)| i != j) {
                    return p;
                }
            }
        })
        .collect();
    let succ = (0..n).map(|s| perms.iter().map(|p| p[s]).collect()).collect();
    let w: Vec<f64> = (0..BRANCHING).map(|_| rng.random_range(0.2..1.0)).collect();
    let total: f64 = w.iter().sum();
    let cdf = w
        .iter()
        .scan(0.0, |acc, x| {
            *acc += x / total;
            Some(*acc)
        })
        .collect();
    (succ, cdf)
}

/// Envelopes drawn one at a time, rejecting candidates closer than
/// `MIN_SEPARATION * sqrt(dim)` to an earlier one. After `MAX_TRIES` the
/// farthest candidate seen is kept.
fn envelopes(n: usize, dim: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let min_dist = MIN_SEPARATION * (dim as f64).sqrt();
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(n);
    for _ in 0..n {
        let mut best: Option<(f64, Vec<f64>)> = None;
        for _ in 0..MAX_TRIES {
            let cand = smooth_envelope(dim, rng);
            let nearest = out.iter().map(|e| dist(e, &cand)).fold(f64::INFINITY, f64::min);
            if nearest >= min_dist {
                best = Some((nearest, cand));
                break;
            }
            if best.as_ref().is_none_or(|(d, _)| nearest > *d) {
                best = Some((nearest, cand));
            }
        }
        out.push(best.expect("at least one try").1);
    }
    out
}

/// Generates the corpus in memory; a pure function of `cfg`.
pub fn synthesize(cfg: &SynthConfig) -> Result<SynthCorpus> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let dim = cfg.feature_dim;
    let env_rows = envelopes(cfg.n_states, dim, &mut rng);
    let envelopes = Tensor::from_rows(&env_rows)?;
    let (succ, cdf) = transitions(cfg.n_states, &mut rng);
    let noise = Normal::new(0.0, cfg.noise_std).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let p_leave = 1.0 / cfg.frames_per_state;

    let mut sequences = Vec::with_capacity(cfg.n_sequences);
    for _ in 0..cfg.n_sequences {
        let len = rng.random_range(cfg.seq_len_min..=cfg.seq_len_max);
        let mut state = rng.random_range(0..cfg.n_states);
        let mut data = Vec::with_capacity(len * dim);
        let mut states = Vec::with_capacity(len);
        for _ in 0..len {
            states.push(state);
            for &e in &env_rows[state] {
                let n = if cfg.noise_std > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                data.push(round32(e + n));
            }
            if rng.random::<f64>() < p_leave {
                let u: f64 = rng.random();
                let pick = cdf.iter().position(|&c| u < c).unwrap_or(BRANCHING - 1);
                state = succ[state][pick];
            }
        }
        sequences.push(SynthSequence {
            frames: Tensor::matrix(len, dim, data)?,
            states,
        });
    }
    Ok(SynthCorpus { envelopes, sequences })
}

pub fn sequence_file_name(i: usize) -> String {
    format!("seq_{i:05}.pqvf")
}

/// Writes the corpus as feature files plus `manifest.tsv` into `out_dir`
/// (created if missing; its parent must exist).
pub fn gen_synthetic_corpus(cfg: &SynthConfig, out_dir: &Path) -> Result<Manifest> {
    let corpus = synthesize(cfg)?;
    if !out_dir.is_dir() {
        fs::create_dir(out_dir).map_err(|e| Error::io(out_dir, e))?;
    }
    let mut entries = Vec::with_capacity(corpus.sequences.len());
    for (i, seq) in corpus.sequences.iter().enumerate() {
        let name = sequence_file_name(i);
        write_features(&out_dir.join(&name), &seq.frames)?;
        entries.push(ManifestEntry {
            path: name,
            split: cfg.split_of(i),
            frames: seq.frames.rows(),
        });
    }
    let manifest = Manifest {
        root: out_dir.to_path_buf(),
        entries,
    };
    manifest.write(&out_dir.join(MANIFEST_NAME))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            n_states: 8,
            feature_dim: 6,
            n_sequences: 25,
            seq_len_min: 8,
            seq_len_max: 40,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn noiseless_frames_equal_envelopes() {
        let cfg = SynthConfig { noise_std: 0.0, ..small() };
        let c = synthesize(&cfg).unwrap();
        for seq in &c.sequences {
            for (t, &s) in seq.states.iter().enumerate() {
                assert_eq!(seq.frames.row(t), c.envelopes.row(s));
            }
        }
    }

    #[test]
    fn lengths_and_splits() {
        let cfg = small();
        let c = synthesize(&cfg).unwrap();
        assert_eq!(c.sequences.len(), 25);
        assert!(c.sequences.iter().all(|s| (8..=40).contains(&s.frames.rows())));
        let evals: Vec<usize> = (0..25).filter(|&i| cfg.split_of(i) == Split::Eval).collect();
        assert_eq!(evals, vec![19]);
        let tiny = SynthConfig { n_sequences: 3, ..small() };
        assert_eq!(tiny.split_of(2), Split::Eval);
    }

    #[test]
    fn dwell_is_geometric_in_mean() {
        let cfg = SynthConfig {
            frames_per_state: 5.0,
            n_sequences: 40,
            seq_len_min: 500,
            seq_len_max: 500,
            ..small()
        };
        let c = synthesize(&cfg).unwrap();
        let (mut runs, mut frames) = (0usize, 0usize);
        for s in &c.sequences {
            frames += s.states.len();
            runs += 1 + s.states.windows(2).filter(|w| w[0] != w[1]).count();
        }
        let mean = frames as f64 / runs as f64;
        assert!((mean - 5.0).abs() < 0.5, "mean dwell {mean}");
    }

    #[test]
    fn rejects_bad_config() {
        assert!(synthesize(&SynthConfig { n_states: 1, ..small() }).is_err());
        assert!(synthesize(&SynthConfig { seq_len_min: 50, ..small() }).is_err());
    }
}
