//! Alphabets, sequences and the tabular softmax language model.
//!
//! A [`TabularLM`] conditions on the last `k` emitted symbols (left-padded
//! with a begin-of-string marker for short prefixes) and reads a softmax row
//! over `Σ ∪ {EOS}` from its logit table. Any prefix that has reached
//! `max_len` emits EOS with probability one regardless of the table, so the
//! model's support is the finite set of strings of length at most `max_len`.

use std::fmt;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};

/// Literal used for the end-of-string symbol in text formats.
pub const EOS_TOKEN: &str = "<eos>";
/// Literal used for the begin-of-string pad inside context strings.
pub const BOS_TOKEN: &str = "<bos>";
/// Context string of the single context of an order-0 model.
pub const EMPTY_CONTEXT: &str = "-";

/// Ordered set of symbol names. EOS is implicit and gets index `len()`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Alphabet {
    symbols: Vec<String>,
}

impl Alphabet {
    pub fn new<I, S>(symbols: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let symbols: Vec<String> = symbols.into_iter().map(Into::into).collect();
        if symbols.is_empty() {
            return Err(Error::InvalidArgument("alphabet must be non-empty".into()));
        }
        for (i, s) in symbols.iter().enumerate() {
            if s.is_empty()
                || s.contains(|c: char| c.is_whitespace() || c == ',' || c == '=')
                || s == EOS_TOKEN
                || s == BOS_TOKEN
                || s == EMPTY_CONTEXT
            {
                return Err(Error::InvalidArgument(format!("invalid symbol name `{s}`")));
            }
            if symbols[..i].contains(s) {
                return Err(Error::InvalidArgument(format!("duplicate symbol `{s}`")));
            }
        }
        Ok(Alphabet { symbols })
    }

    /// Alphabet of single-character symbols, e.g. `Alphabet::from_chars("abc")`.
    pub fn from_chars(chars: &str) -> Result<Self> {
        Alphabet::new(chars.chars().map(String::from))
    }

    /// Number of real symbols, `|Σ|`.
    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    /// `|Σ| + 1`, the size of every next-symbol distribution.
    pub fn extended_len(&self) -> usize {
        self.symbols.len() + 1
    }

    /// Index of EOS inside a [`NextDist`].
    pub fn eos(&self) -> usize {
        self.symbols.len()
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    pub fn symbol(&self, index: usize) -> &str {
        if index == self.eos() {
            EOS_TOKEN
        } else {
            &self.symbols[index]
        }
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.symbols.iter().position(|s| s == name)
    }

    fn single_char(&self) -> bool {
        self.symbols.iter().all(|s| s.chars().count() == 1)
    }

    /// Human-readable form of a sequence: concatenated when every symbol is a
    /// single character, space-separated otherwise. The empty string renders
    /// as `""`.
    pub fn render(&self, seq: &Seq) -> String {
        let sep = if self.single_char() { "" } else { " " };
        seq.tokens()
            .iter()
            .map(|&t| self.symbols[t].as_str())
            .collect::<Vec<_>>()
            .join(sep)
    }

    /// Inverse of [`Alphabet::render`].
    pub fn parse_seq(&self, text: &str) -> Result<Seq> {
        let lookup = |s: &str| {
            self.index_of(s)
                .ok_or_else(|| Error::InvalidArgument(format!("unknown symbol `{s}`")))
        };
        let tokens = if self.single_char() {
            text.chars()
                .filter(|c| !c.is_whitespace())
                .map(|c| lookup(&c.to_string()))
                .collect::<Result<Vec<_>>>()?
        } else {
            text.split_whitespace().map(lookup).collect::<Result<Vec<_>>>()?
        };
        Ok(Seq::new(tokens))
    }
}

/// A finite string over `Σ`, stored as symbol indices. EOS never appears inside.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Seq(Vec<usize>);

impl Seq {
    pub fn new(tokens: Vec<usize>) -> Self {
        Seq(tokens)
    }

    pub fn empty() -> Self {
        Seq(Vec::new())
    }

    pub fn tokens(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn push(&mut self, symbol: usize) {
        self.0.push(symbol);
    }

    pub fn into_tokens(self) -> Vec<usize> {
        self.0
    }
}

impl From<Vec<usize>> for Seq {
    fn from(tokens: Vec<usize>) -> Self {
        Seq(tokens)
    }
}

/// A sequence followed by infinitely many EOS symbols.
///
/// Positions are 1-based: position `n` holds the `n`-th symbol, position
/// `len + 1` holds the emitted EOS and every later position reads as EOS.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PaddedSeq {
    base: Seq,
}

impl PaddedSeq {
    pub fn new(base: Seq) -> Self {
        PaddedSeq { base }
    }

    pub fn base(&self) -> &Seq {
        &self.base
    }

    /// Symbol at position `n`; `None` stands for EOS.
    pub fn symbol_at(&self, n: usize) -> Option<usize> {
        assert!(n >= 1, "padded positions are 1-based");
        self.base.tokens().get(n - 1).copied()
    }

    /// The prefix `ȳ_{<n}` when it contains no EOS, `None` once it does.
    pub fn prefix(&self, n: usize) -> Option<&[usize]> {
        assert!(n >= 1, "padded positions are 1-based");
        let end = n - 1;
        (end <= self.base.len()).then(|| &self.base.tokens()[..end])
    }
}

/// Distribution over `Σ ∪ {EOS}` kept in both linear and log space. EOS is the last slot.
#[derive(Debug, Clone, PartialEq)]
pub struct NextDist {
    probs: Vec<f64>,
    log_probs: Vec<f64>,
}

impl NextDist {
    /// Softmax of a logit row, evaluated through log-sum-exp.
    pub fn softmax(logits: &[f64]) -> Self {
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|&l| (l - max).exp()).sum::<f64>().ln();
        let mut log_probs: Vec<f64> = logits.iter().map(|&l| l - lse).collect();
        let probs: Vec<f64> = log_probs.iter().map(|&l| l.exp()).collect();
        // Underflowed outcomes are impossible in both representations.
        for (lp, &p) in log_probs.iter_mut().zip(&probs) {
            if p == 0.0 {
                *lp = f64::NEG_INFINITY;
            }
        }
        NextDist { probs, log_probs }
    }

    /// Point mass on EOS over a support of `size` outcomes.
    pub fn eos_point_mass(size: usize) -> Self {
        let mut probs = vec![0.0; size];
        let mut log_probs = vec![f64::NEG_INFINITY; size];
        probs[size - 1] = 1.0;
        log_probs[size - 1] = 0.0;
        NextDist { probs, log_probs }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn log_probs(&self) -> &[f64] {
        &self.log_probs
    }

    pub fn prob(&self, symbol: usize) -> f64 {
        self.probs[symbol]
    }

    pub fn log_prob(&self, symbol: usize) -> f64 {
        self.log_probs[symbol]
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn eos(&self) -> usize {
        self.probs.len() - 1
    }

    /// `KL(self ‖ other)` in nats. Outcomes with zero probability under
    /// `self` contribute zero; an outcome that `self` can emit but `other`
    /// cannot is a support violation.
    ///
    /// Summed as `Σ_{p>0} p (r − 1 − ln r) + Σ_{p=0} q` with `r = q/p`, which
    /// equals the usual sum and keeps every term non-negative in floating point.
    pub fn kl_to(&self, other: &NextDist) -> Result<f64> {
        let mut kl = 0.0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p == 0.0 {
                kl += other.probs[i];
                continue;
            }
            if other.probs[i] == 0.0 {
                return Err(Error::SupportViolation(format!(
                    "next-symbol outcome {i} has p={p} but q=0"
                )));
            }
            let d = other.log_probs[i] - self.log_probs[i];
            kl += p * (d.exp_m1() - d);
        }
        Ok(kl)
    }
}

/// Bounded-context softmax language model with a forced-EOS horizon.
///
/// The parameter vector θ is the row-major logit table of shape
/// `num_contexts() × alphabet.extended_len()`.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularLM {
    alphabet: Alphabet,
    order: usize,
    max_len: usize,
    logits: Vec<f64>,
}

impl TabularLM {
    pub fn new(alphabet: Alphabet, order: usize, max_len: usize, logits: Vec<f64>) -> Result<Self> {
        if max_len == 0 {
            return Err(Error::InvalidArgument("max_len must be at least 1".into()));
        }
        let contexts = num_contexts(&alphabet, order)?;
        let expected = contexts * alphabet.extended_len();
        if logits.len() != expected {
            return Err(Error::InvalidArgument(format!(
                "expected {expected} logits, got {}",
                logits.len()
            )));
        }
        if let Some(i) = logits.iter().position(|l| !l.is_finite()) {
            return Err(Error::NonFinite(format!("logit {i} is {}", logits[i])));
        }
        Ok(TabularLM {
            alphabet,
            order,
            max_len,
            logits,
        })
    }

    /// All-zero logits: every non-horizon distribution is uniform over `Σ ∪ {EOS}`.
    pub fn uniform(alphabet: Alphabet, order: usize, max_len: usize) -> Result<Self> {
        let n = num_contexts(&alphabet, order)? * alphabet.extended_len();
        TabularLM::new(alphabet, order, max_len, vec![0.0; n])
    }

    /// One-symbol model over `{a}` emitting `a` with probability `p_a` at every
    /// step before the horizon.
    pub fn geometric(p_a: f64, max_len: usize) -> Result<Self> {
        if !(p_a > 0.0 && p_a < 1.0) {
            return Err(Error::InvalidArgument(format!("p_a={p_a} must lie in (0, 1)")));
        }
        let alphabet = Alphabet::from_chars("a")?;
        TabularLM::new(alphabet, 0, max_len, vec![p_a.ln(), (1.0 - p_a).ln()])
    }

    /// Logits drawn i.i.d. uniform in `[-scale, scale]`.
    pub fn random<R: Rng + ?Sized>(
        alphabet: Alphabet,
        order: usize,
        max_len: usize,
        scale: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::InvalidArgument(format!("scale={scale} must be positive")));
        }
        let n = num_contexts(&alphabet, order)? * alphabet.extended_len();
        let logits = (0..n).map(|_| rng.gen_range(-scale..=scale)).collect();
        TabularLM::new(alphabet, order, max_len, logits)
    }

    pub fn alphabet(&self) -> &Alphabet {
        &self.alphabet
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn num_params(&self) -> usize {
        self.logits.len()
    }

    pub fn num_contexts(&self) -> usize {
        self.logits.len() / self.row_len()
    }

    /// Length of one logit row, `|Σ| + 1`.
    pub fn row_len(&self) -> usize {
        self.alphabet.extended_len()
    }

    /// Copy of the model with a different parameter vector.
    pub fn with_logits(&self, logits: Vec<f64>) -> Result<Self> {
        TabularLM::new(self.alphabet.clone(), self.order, self.max_len, logits)
    }

    pub fn set_logits(&mut self, logits: Vec<f64>) -> Result<()> {
        *self = self.with_logits(logits)?;
        Ok(())
    }

    /// Errors unless both models share alphabet and horizon.
    pub fn check_compatible(&self, other: &TabularLM) -> Result<()> {
        if self.alphabet != other.alphabet {
            return Err(Error::IncompatibleModels("alphabets differ".into()));
        }
        if self.max_len != other.max_len {
            return Err(Error::IncompatibleModels(format!(
                "max_len {} vs {}",
                self.max_len, other.max_len
            )));
        }
        Ok(())
    }

    /// Row index of the context selected by `prefix`.
    pub fn context_index(&self, prefix: &[usize]) -> usize {
        let base = self.alphabet.len() + 1;
        let bos = self.alphabet.len();
        let mut index = 0;
        for i in 0..self.order {
            let back = self.order - i;
            let sym = if back <= prefix.len() {
                prefix[prefix.len() - back]
            } else {
                bos
            };
            index = index * base + sym;
        }
        index
    }

    /// Logit row of a context.
    pub fn row(&self, context: usize) -> &[f64] {
        let w = self.row_len();
        &self.logits[context * w..(context + 1) * w]
    }

    /// Whether `prefix` sits at the horizon, where EOS is forced.
    pub fn at_horizon(&self, prefix: &[usize]) -> bool {
        prefix.len() >= self.max_len
    }

    /// `p(· | prefix)` over `Σ ∪ {EOS}`.
    pub fn next_dist(&self, prefix: &[usize]) -> Result<NextDist> {
        if prefix.len() > self.max_len {
            return Err(Error::HorizonViolation {
                len: prefix.len(),
                max_len: self.max_len,
            });
        }
        if prefix.len() == self.max_len {
            return Ok(NextDist::eos_point_mass(self.row_len()));
        }
        Ok(NextDist::softmax(self.row(self.context_index(prefix))))
    }

    /// Next-symbol distribution at 1-based padded position `n`.
    pub fn padded_next_dist(&self, padded: &PaddedSeq, n: usize) -> Result<NextDist> {
        if n == 0 {
            return Err(Error::InvalidArgument("padded positions are 1-based".into()));
        }
        match padded.prefix(n) {
            Some(prefix) => self.next_dist(prefix),
            None => Ok(NextDist::eos_point_mass(self.row_len())),
        }
    }

    /// `log p(y)` in nats, including the EOS step. Returns `-inf` when some
    /// step has probability zero.
    pub fn seq_logprob(&self, seq: &Seq) -> Result<f64> {
        let mut total = self.prefix_logprob(seq.tokens())?;
        let dist = self.next_dist(seq.tokens())?;
        total += dist.log_prob(dist.eos());
        Ok(total)
    }

    /// Log prefix probability `log π(prefix)`: the sum of the step
    /// log-probabilities of the prefix symbols, without the EOS step.
    pub fn prefix_logprob(&self, prefix: &[usize]) -> Result<f64> {
        if prefix.len() > self.max_len {
            return Err(Error::HorizonViolation {
                len: prefix.len(),
                max_len: self.max_len,
            });
        }
        let mut total = 0.0;
        for n in 0..prefix.len() {
            let dist = self.next_dist(&prefix[..n])?;
            total += dist.log_prob(prefix[n]);
        }
        Ok(total)
    }

    /// Per-position log-probabilities `log p(ȳ_n | ȳ_{<n})` for `n = 1..=|y|+1`.
    pub fn step_logprobs(&self, seq: &Seq) -> Result<Vec<f64>> {
        let tokens = seq.tokens();
        let mut out = Vec::with_capacity(tokens.len() + 1);
        for n in 0..=tokens.len() {
            let dist = self.next_dist(&tokens[..n])?;
            let sym = tokens.get(n).copied().unwrap_or(dist.eos());
            out.push(dist.log_prob(sym));
        }
        Ok(out)
    }

    fn context_string(&self, context: usize) -> String {
        if self.order == 0 {
            return EMPTY_CONTEXT.to_string();
        }
        let base = self.alphabet.len() + 1;
        let mut digits = vec![0; self.order];
        let mut rest = context;
        for d in digits.iter_mut().rev() {
            *d = rest % base;
            rest /= base;
        }
        digits
            .iter()
            .map(|&d| {
                if d == self.alphabet.len() {
                    BOS_TOKEN
                } else {
                    self.alphabet.symbols[d].as_str()
                }
            })
            .collect::<Vec<_>>()
            .join(",")
    }

    /// Line-oriented text serialization; logits use 17 significant digits so
    /// the table round-trips exactly.
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "alphabet={} k={} max_len={}\n",
            self.alphabet.symbols.join(","),
            self.order,
            self.max_len
        );
        for c in 0..self.num_contexts() {
            out.push_str(&self.context_string(c));
            for l in self.row(c) {
                out.push_str(&format!(" {l:.16e}"));
            }
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty());
        let (hline, header) = lines.next().ok_or_else(|| Error::parse(1, "empty model file"))?;
        let mut alphabet = None;
        let mut order = None;
        let mut max_len = None;
        for field in header.split_whitespace() {
            let (key, value) = field
                .split_once('=')
                .ok_or_else(|| Error::parse(hline, format!("malformed header field `{field}`")))?;
            let bad = |e: std::num::ParseIntError| Error::parse(hline, format!("{key}: {e}"));
            match key {
                "alphabet" => {
                    alphabet = Some(
                        Alphabet::new(value.split(','))
                            .map_err(|e| Error::parse(hline, e.to_string()))?,
                    )
                }
                "k" => order = Some(value.parse::<usize>().map_err(bad)?),
                "max_len" => max_len = Some(value.parse::<usize>().map_err(bad)?),
                other => return Err(Error::parse(hline, format!("unknown header key `{other}`"))),
            }
        }
        let missing = |k: &str| Error::parse(hline, format!("header is missing `{k}`"));
        let alphabet = alphabet.ok_or_else(|| missing("alphabet"))?;
        let order = order.ok_or_else(|| missing("k"))?;
        let max_len = max_len.ok_or_else(|| missing("max_len"))?;

        let skeleton = TabularLM::uniform(alphabet, order, max_len)
            .map_err(|e| Error::parse(hline, e.to_string()))?;
        let mut logits = Vec::with_capacity(skeleton.num_params());
        for c in 0..skeleton.num_contexts() {
            let (ln, line) = lines
                .next()
                .ok_or_else(|| Error::parse(hline, format!("missing row for context {c}")))?;
            let mut parts = line.split_whitespace();
            let ctx = parts.next().unwrap_or_default();
            let expected = skeleton.context_string(c);
            if ctx != expected {
                return Err(Error::parse(ln, format!("expected context `{expected}`, found `{ctx}`")));
            }
            let row: Vec<f64> = parts
                .map(|v| v.parse::<f64>().map_err(|e| Error::parse(ln, format!("`{v}`: {e}"))))
                .collect::<Result<_>>()?;
            if row.len() != skeleton.row_len() {
                return Err(Error::parse(
                    ln,
                    format!("expected {} logits, found {}", skeleton.row_len(), row.len()),
                ));
            }
            logits.extend(row);
        }
        if let Some((ln, _)) = lines.next() {
            return Err(Error::parse(ln, "trailing content after the last context row"));
        }
        skeleton.with_logits(logits)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        TabularLM::from_text(&std::fs::read_to_string(path)?)
    }
}

impl fmt::Display for TabularLM {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_text())
    }
}

fn num_contexts(alphabet: &Alphabet, order: usize) -> Result<usize> {
    u32::try_from(order)
        .ok()
        .and_then(|o| (alphabet.len() + 1).checked_pow(o))
        .filter(|&c| c.checked_mul(alphabet.extended_len()).is_some())
        .ok_or_else(|| Error::InvalidArgument(format!("context order {order} is too large")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn g(p: f64) -> TabularLM {
        TabularLM::geometric(p, 3).unwrap()
    }

    fn a(n: usize) -> Seq {
        Seq::new(vec![0; n])
    }

    #[test]
    fn geometric_next_dist() {
        let d = g(0.3).next_dist(&[]).unwrap();
        assert!((d.prob(0) - 0.3).abs() < 1e-15);
        assert!((d.prob(1) - 0.7).abs() < 1e-15);
    }

    #[test]
    fn horizon_forces_eos() {
        let m = g(0.3);
        let d = m.next_dist(&[0, 0, 0]).unwrap();
        assert_eq!(d.probs(), &[0.0, 1.0]);
        assert!(matches!(
            m.next_dist(&[0, 0, 0, 0]),
            Err(Error::HorizonViolation { len: 4, max_len: 3 })
        ));
    }

    #[test]
    fn constant_logits_give_uniform_rows() {
        let ab = Alphabet::from_chars("abc").unwrap();
        let m = TabularLM::uniform(ab, 2, 4).unwrap();
        for prefix in [&[][..], &[0], &[2, 1], &[1, 1, 0]] {
            for &p in m.next_dist(prefix).unwrap().probs() {
                assert!((p - 0.25).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn padded_positions() {
        let m = g(0.3);
        let y = PaddedSeq::new(a(1));
        let d1 = m.padded_next_dist(&y, 1).unwrap();
        let d2 = m.padded_next_dist(&y, 2).unwrap();
        assert!((d1.prob(0) - 0.3).abs() < 1e-15);
        assert!((d2.prob(0) - 0.3).abs() < 1e-15);
        assert_eq!(m.padded_next_dist(&y, 3).unwrap().probs(), &[0.0, 1.0]);
        assert_eq!(m.padded_next_dist(&y, 50).unwrap().probs(), &[0.0, 1.0]);
        assert_eq!(y.symbol_at(1), Some(0));
        assert_eq!(y.symbol_at(2), None);
    }

    #[test]
    fn seq_logprob_examples() {
        let m = g(0.3);
        assert!((m.seq_logprob(&a(1)).unwrap() - (0.3f64 * 0.7).ln()).abs() < 1e-14);
        assert!((m.seq_logprob(&a(1)).unwrap() + 1.560648).abs() < 1e-6);
        assert!((m.seq_logprob(&Seq::empty()).unwrap() + 0.356675).abs() < 1e-6);
        assert!((m.seq_logprob(&a(3)).unwrap() - 0.027f64.ln()).abs() < 1e-14);
        assert!(m.seq_logprob(&a(4)).is_err());
    }

    #[test]
    fn seq_logprob_is_sum_of_padded_steps() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = TabularLM::random(Alphabet::from_chars("ab").unwrap(), 1, 4, 2.0, &mut rng).unwrap();
        let y = Seq::new(vec![1, 0, 0]);
        let padded = PaddedSeq::new(y.clone());
        let mut total = 0.0;
        for n in 1..=y.len() + 1 {
            let d = m.padded_next_dist(&padded, n).unwrap();
            total += d.log_prob(padded.symbol_at(n).unwrap_or(d.eos()));
        }
        assert_eq!(total, m.seq_logprob(&y).unwrap());
        assert_eq!(m.step_logprobs(&y).unwrap().iter().sum::<f64>(), total);
    }

    #[test]
    fn context_index_pads_with_bos() {
        let ab = Alphabet::from_chars("ab").unwrap();
        let m = TabularLM::uniform(ab, 2, 5).unwrap();
        // base 3, bos = 2
        assert_eq!(m.context_index(&[]), 2 * 3 + 2);
        assert_eq!(m.context_index(&[1]), 2 * 3 + 1);
        assert_eq!(m.context_index(&[0, 1, 1]), 3 + 1);
        assert_eq!(m.num_contexts(), 9);
    }

    #[test]
    fn random_model_determinism() {
        let ab = Alphabet::from_chars("abc").unwrap();
        let make = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            TabularLM::random(ab.clone(), 1, 3, 1.5, &mut rng).unwrap()
        };
        assert_eq!(make(7), make(7));
        assert_ne!(make(7).logits(), make(8).logits());
        assert!(make(7).logits().iter().all(|l| l.abs() <= 1.5));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let tiny = TabularLM::random(ab.clone(), 1, 3, 1e-300, &mut rng).unwrap();
        for &p in tiny.next_dist(&[1]).unwrap().probs() {
            assert!((p - 0.25).abs() < 1e-15);
        }
        assert!(TabularLM::random(ab, 1, 3, 0.0, &mut rng).is_err());
    }

    #[test]
    fn text_round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let ab = Alphabet::new(["x", "yy", "z"]).unwrap();
        let m = TabularLM::random(ab, 2, 4, 3.0, &mut rng).unwrap();
        let text = m.to_text();
        assert!(text.starts_with("alphabet=x,yy,z k=2 max_len=4\n"));
        assert!(text.contains("\n<bos>,<bos> "));
        let back = TabularLM::from_text(&text).unwrap();
        assert_eq!(back, m);
        let g = TabularLM::geometric(0.3, 3).unwrap();
        assert_eq!(TabularLM::from_text(&g.to_text()).unwrap(), g);
    }

    #[test]
    fn text_parse_errors() {
        assert!(TabularLM::from_text("").is_err());
        assert!(TabularLM::from_text("alphabet=a k=0\n- 0 0\n").is_err());
        assert!(TabularLM::from_text("alphabet=a k=0 max_len=2\n- 0\n").is_err());
        assert!(TabularLM::from_text("alphabet=a k=0 max_len=2\nx 0 0\n").is_err());
        assert!(TabularLM::from_text("alphabet=a k=0 max_len=2\n- 0 nan\n").is_err());
        assert!(TabularLM::from_text("alphabet=a k=0 max_len=2\n- 0 0\n- 1 1\n").is_err());
    }

    #[test]
    fn alphabet_validation_and_rendering() {
        assert!(Alphabet::new(Vec::<String>::new()).is_err());
        assert!(Alphabet::new(["a", "a"]).is_err());
        assert!(Alphabet::new(["a b"]).is_err());
        assert!(Alphabet::new(["<eos>"]).is_err());
        let ab = Alphabet::from_chars("ab").unwrap();
        let y = Seq::new(vec![0, 1, 1]);
        assert_eq!(ab.render(&y), "abb");
        assert_eq!(ab.parse_seq("abb").unwrap(), y);
        let words = Alphabet::new(["hi", "yo"]).unwrap();
        assert_eq!(words.render(&y), "hi yo yo");
        assert_eq!(words.parse_seq("hi yo yo").unwrap(), y);
        assert_eq!(ab.symbol(2), EOS_TOKEN);
    }

    #[test]
    fn local_kl_conventions() {
        let p = NextDist::eos_point_mass(3);
        let q = NextDist::softmax(&[0.0, 1.0, 2.0]);
        assert!(p.kl_to(&q).unwrap() > 0.0);
        assert!(q.kl_to(&p).is_err());
        assert_eq!(p.kl_to(&p).unwrap(), 0.0);
    }
}
