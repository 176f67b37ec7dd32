//! Seeded random streams and ancestral sampling from a [`TabularLM`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{Alphabet, Seq, TabularLM, EOS_TOKEN};

/// The generator used throughout the crate.
pub type StreamRng = ChaCha8Rng;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Seed of the `index`-th child stream of `base`. Distinct indices give
/// statistically independent streams.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    splitmix64(splitmix64(base) ^ splitmix64(index.wrapping_add(0x632B_E59B_D9B4_E019)))
}

/// Random stream seeded directly from `seed`.
pub fn stream(seed: u64) -> StreamRng {
    StreamRng::seed_from_u64(seed)
}

/// Random stream for child `index` of `base`.
pub fn child_stream(base: u64, index: u64) -> StreamRng {
    stream(derive_seed(base, index))
}

/// Sequences drawn from one model together with their per-step
/// log-probabilities under that model.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleBatch {
    seqs: Vec<Seq>,
    step_logprobs: Vec<Vec<f64>>,
    sampler: String,
}

impl SampleBatch {
    /// Batch over fixed sequences, with caches computed under `sampler_model`.
    pub fn from_seqs(sampler_model: &TabularLM, seqs: Vec<Seq>) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let step_logprobs = seqs
            .iter()
            .map(|s| sampler_model.step_logprobs(s))
            .collect::<Result<_>>()?;
        Ok(SampleBatch {
            seqs,
            step_logprobs,
            sampler: "p".into(),
        })
    }

    pub fn with_sampler_id(mut self, id: impl Into<String>) -> Self {
        self.sampler = id.into();
        self
    }

    pub fn seqs(&self) -> &[Seq] {
        &self.seqs
    }

    pub fn len(&self) -> usize {
        self.seqs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seqs.is_empty()
    }

    pub fn sampler_id(&self) -> &str {
        &self.sampler
    }

    /// Cached `log p(ȳ_n | ȳ_{<n})` for `n = 1..=|y|+1` under the sampling model.
    pub fn step_logprobs(&self, index: usize) -> &[f64] {
        &self.step_logprobs[index]
    }

    /// Cached `log p(y)` under the sampling model.
    pub fn logprob(&self, index: usize) -> f64 {
        self.step_logprobs[index].iter().sum()
    }

    /// Concatenation of two batches from the same sampler.
    pub fn concat(mut self, other: SampleBatch) -> Self {
        self.seqs.extend(other.seqs);
        self.step_logprobs.extend(other.step_logprobs);
        self
    }

    /// One sequence per line, symbols separated by spaces, terminated by `<eos>`.
    pub fn dump(&self, alphabet: &Alphabet) -> String {
        dump_seqs(alphabet, &self.seqs)
    }
}

pub fn dump_seqs(alphabet: &Alphabet, seqs: &[Seq]) -> String {
    let mut out = String::new();
    for s in seqs {
        for &t in s.tokens() {
            out.push_str(alphabet.symbol(t));
            out.push(' ');
        }
        out.push_str(EOS_TOKEN);
        out.push('\n');
    }
    out
}

/// Parses the format written by [`dump_seqs`].
pub fn parse_dump(alphabet: &Alphabet, text: &str) -> Result<Vec<Seq>> {
    let mut seqs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut tokens = Vec::new();
        let mut terminated = false;
        for word in line.split_whitespace() {
            if terminated {
                return Err(Error::parse(i + 1, "symbols after <eos>"));
            }
            if word == EOS_TOKEN {
                terminated = true;
            } else {
                let t = alphabet
                    .index_of(word)
                    .ok_or_else(|| Error::parse(i + 1, format!("unknown symbol `{word}`")))?;
                tokens.push(t);
            }
        }
        if !terminated {
            return Err(Error::parse(i + 1, "missing <eos> terminator"));
        }
        seqs.push(Seq::new(tokens));
    }
    Ok(seqs)
}

/// Draws one string by ancestral sampling.
pub fn sample_one<R: Rng + ?Sized>(model: &TabularLM, rng: &mut R) -> (Seq, Vec<f64>) {
    let mut seq = Seq::empty();
    let mut steps = Vec::new();
    loop {
        let dist = model
            .next_dist(seq.tokens())
            .expect("ancestral sampling never passes the horizon");
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut chosen = None;
        for (i, &p) in dist.probs().iter().enumerate() {
            acc += p;
            if u < acc && p > 0.0 {
                chosen = Some(i);
                break;
            }
        }
        // Rounding can leave `acc` a hair below 1; fall back to the last
        // outcome with positive mass.
        let sym = chosen.unwrap_or_else(|| {
            dist.probs()
                .iter()
                .rposition(|&p| p > 0.0)
                .expect("distribution has positive mass")
        });
        steps.push(dist.log_prob(sym));
        if sym == dist.eos() {
            return (seq, steps);
        }
        seq.push(sym);
    }
}

/// `count` independent ancestral samples from `model`.
pub fn sample<R: Rng + ?Sized>(model: &TabularLM, rng: &mut R, count: usize) -> Result<SampleBatch> {
    if count == 0 {
        return Err(Error::EmptyBatch);
    }
    let mut seqs = Vec::with_capacity(count);
    let mut step_logprobs = Vec::with_capacity(count);
    for _ in 0..count {
        let (s, steps) = sample_one(model, rng);
        seqs.push(s);
        step_logprobs.push(steps);
    }
    Ok(SampleBatch {
        seqs,
        step_logprobs,
        sampler: "p".into(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_batch() {
        let m = TabularLM::geometric(0.3, 3).unwrap();
        let a = sample(&m, &mut stream(42), 3).unwrap();
        let b = sample(&m, &mut stream(42), 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn point_mass_model_emits_empty_strings() {
        let m = TabularLM::new(Alphabet::from_chars("a").unwrap(), 0, 3, vec![-800.0, 0.0]).unwrap();
        let batch = sample(&m, &mut stream(1), 5).unwrap();
        assert!(batch.seqs().iter().all(Seq::is_empty));
    }

    #[test]
    fn empty_batch_rejected() {
        let m = TabularLM::geometric(0.3, 3).unwrap();
        assert!(matches!(sample(&m, &mut stream(0), 0), Err(Error::EmptyBatch)));
        assert!(matches!(SampleBatch::from_seqs(&m, vec![]), Err(Error::EmptyBatch)));
    }

    #[test]
    fn empirical_eos_frequency_matches_binomial() {
        let m = TabularLM::geometric(0.3, 3).unwrap();
        let n = 100_000;
        let batch = sample(&m, &mut stream(2024), n).unwrap();
        let hits = batch.seqs().iter().filter(|s| s.is_empty()).count() as f64 / n as f64;
        let se = (0.7f64 * 0.3 / n as f64).sqrt();
        assert!((hits - 0.7).abs() < 5.0 * se, "P(len=0) = {hits}");
    }

    #[test]
    fn caches_agree_with_seq_logprob() {
        let m = TabularLM::geometric(0.4, 4).unwrap();
        let batch = sample(&m, &mut stream(9), 50).unwrap();
        for (i, s) in batch.seqs().iter().enumerate() {
            assert!(s.len() <= 4);
            assert!((batch.logprob(i) - m.seq_logprob(s).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn derived_seeds_differ() {
        let seeds: Vec<u64> = (0..1000).map(|r| derive_seed(7, r)).collect();
        let mut sorted = seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), seeds.len());
        assert_ne!(derive_seed(7, 0), derive_seed(8, 0));
    }

    #[test]
    fn dump_round_trip() {
        let ab = Alphabet::from_chars("ab").unwrap();
        let seqs = vec![Seq::empty(), Seq::new(vec![0, 1, 1])];
        let text = dump_seqs(&ab, &seqs);
        assert_eq!(text, "<eos>\na b b <eos>\n");
        assert_eq!(parse_dump(&ab, &text).unwrap(), seqs);
        assert!(parse_dump(&ab, "a b\n").is_err());
        assert!(parse_dump(&ab, "a <eos> b\n").is_err());
    }
}
