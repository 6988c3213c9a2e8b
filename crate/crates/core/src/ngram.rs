//! Interpolated Modified Kneser-Ney n-gram models.
//!
//! The highest order uses raw counts; lower orders use continuation counts,
//! the number of distinct left neighbours of an n-gram, where the start of a
//! file counts as one extra neighbour type. Each order has three discounts
//! estimated from its counts-of-counts. n-grams never cross file boundaries.

use std::collections::{HashMap, HashSet};
use std::io::{self, BufRead, Write};

use thiserror::Error;

use crate::par::{self, Execution};

/// Fallback discount when counts-of-counts are degenerate.
pub const FALLBACK_DISCOUNT: f64 = 0.75;

const FILE_START: u32 = u32::MAX;

#[derive(Debug, Error)]
pub enum NgramError {
    #[error("n-gram order must be at least 2, got {0}")]
    BadOrder(usize),
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("token id {id} outside vocabulary of size {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },
    #[error("malformed model file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Default)]
struct ContextStats {
    /// (token, count) sorted by token.
    followers: Vec<(u32, u64)>,
    total: u64,
    /// Number of followers with count 1, 2 and 3+.
    n: [u64; 3],
}

impl ContextStats {
    fn count(&self, w: u32) -> u64 {
        self.followers
            .binary_search_by_key(&w, |&(t, _)| t)
            .map(|i| self.followers[i].1)
            .unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq)]
struct OrderTable {
    contexts: HashMap<Vec<u32>, ContextStats>,
    /// Counts-of-counts n1..n4.
    count_of_counts: [u64; 4],
    discounts: [f64; 3],
}

impl OrderTable {
    fn from_counts(grams: HashMap<Vec<u32>, u64>) -> Self {
        let mut coc = [0u64; 4];
        let mut contexts: HashMap<Vec<u32>, ContextStats> = HashMap::new();
        for (g, c) in grams {
            if (1..=4).contains(&c) {
                coc[c as usize - 1] += 1;
            }
            let (w, ctx) = g.split_last().expect("non-empty gram");
            let st = contexts.entry(ctx.to_vec()).or_default();
            st.followers.push((*w, c));
            st.total += c;
            st.n[(c.min(3) - 1) as usize] += 1;
        }
        for st in contexts.values_mut() {
            st.followers.sort_unstable();
        }
        OrderTable { contexts, count_of_counts: coc, discounts: estimate_discounts(coc) }
    }

    fn discount(&self, c: u64) -> f64 {
        match c {
            0 => 0.0,
            1 => self.discounts[0],
            2 => self.discounts[1],
            _ => self.discounts[2],
        }
    }
}

/// `D_k = k − (k+1)·Y·n_{k+1}/n_k` with `Y = n1/(n1 + 2·n2)`, clamped to
/// [0, 1]. Falls back to [`FALLBACK_DISCOUNT`] when a needed count is zero.
pub fn estimate_discounts(n: [u64; 4]) -> [f64; 3] {
    let mut d = [FALLBACK_DISCOUNT; 3];
    if n[0] == 0 || n[1] == 0 {
        return d;
    }
    let y = n[0] as f64 / (n[0] as f64 + 2.0 * n[1] as f64);
    for k in 1..=3 {
        let (nk, nk1) = (n[k - 1], n[k]);
        if nk > 0 && nk1 > 0 {
            let v = k as f64 - (k as f64 + 1.0) * y * nk1 as f64 / nk as f64;
            d[k - 1] = v.clamp(0.0, 1.0);
        }
    }
    d
}

/// A trained model of order `n`. Read-only after training.
#[derive(Debug, Clone, PartialEq)]
pub struct NgramModel {
    order: usize,
    vocab_size: usize,
    /// `tables[k-1]` holds the k-grams.
    tables: Vec<OrderTable>,
}

/// Counts n-grams of all orders up to `order` and estimates discounts.
pub fn train_mkn(
    files: &[Vec<u32>],
    order: usize,
    vocab_size: usize,
    exec: Execution,
) -> Result<NgramModel, NgramError> {
    if order < 2 {
        return Err(NgramError::BadOrder(order));
    }
    if files.iter().all(|f| f.is_empty()) {
        return Err(NgramError::EmptyCorpus);
    }
    if let Some(&id) = files.iter().flatten().find(|&&id| id as usize >= vocab_size) {
        return Err(NgramError::TokenOutOfRange { id, vocab: vocab_size });
    }
    let tables = par::map_range(exec, order, |k0| {
        let k = k0 + 1;
        let grams = if k == order { raw_counts(files, k) } else { continuation_counts(files, k) };
        OrderTable::from_counts(grams)
    });
    Ok(NgramModel { order, vocab_size, tables })
}

fn raw_counts(files: &[Vec<u32>], k: usize) -> HashMap<Vec<u32>, u64> {
    let mut m: HashMap<Vec<u32>, u64> = HashMap::new();
    for f in files {
        for g in f.windows(k) {
            *m.entry(g.to_vec()).or_default() += 1;
        }
    }
    m
}

fn continuation_counts(files: &[Vec<u32>], k: usize) -> HashMap<Vec<u32>, u64> {
    let mut seen: HashSet<(&[u32], u32)> = HashSet::new();
    for f in files {
        for (start, g) in f.windows(k).enumerate() {
            let left = if start == 0 { FILE_START } else { f[start - 1] };
            seen.insert((g, left));
        }
    }
    let mut m: HashMap<Vec<u32>, u64> = HashMap::new();
    for (g, _) in seen {
        *m.entry(g.to_vec()).or_default() += 1;
    }
    m
}

impl NgramModel {
    pub fn order(&self) -> usize {
        self.order
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    /// Discounts (D1, D2, D3+) of order `k` (1-based).
    pub fn discounts(&self, k: usize) -> [f64; 3] {
        self.tables[k - 1].discounts
    }

    pub fn count_of_counts(&self, k: usize) -> [u64; 4] {
        self.tables[k - 1].count_of_counts
    }

    /// Count used at order `k` for the gram `context ++ [w]`.
    pub fn gram_count(&self, context: &[u32], w: u32) -> u64 {
        self.tables[context.len()]
            .contexts
            .get(context)
            .map_or(0, |s| s.count(w))
    }

    fn usable_context<'a>(&self, context: &'a [u32]) -> &'a [u32] {
        &context[context.len().saturating_sub(self.order - 1)..]
    }

    /// Probability of `w` after `context`. Only the last n−1 ids are used.
    pub fn prob(&self, context: &[u32], w: u32) -> f64 {
        let ctx = self.usable_context(context);
        let mut p = 1.0 / self.vocab_size as f64;
        for k in 1..=ctx.len() + 1 {
            let h = &ctx[ctx.len() + 1 - k..];
            let t = &self.tables[k - 1];
            if let Some(st) = t.contexts.get(h) {
                let c = st.count(w);
                let total = st.total as f64;
                let gamma = (0..3).map(|j| t.discounts[j] * st.n[j] as f64).sum::<f64>() / total;
                p = (c as f64 - t.discount(c)).max(0.0) / total + gamma * p;
            }
        }
        p
    }

    pub fn logprob(&self, context: &[u32], w: u32) -> f64 {
        self.prob(context, w).ln()
    }

    /// Full next-token distribution after `context`.
    pub fn distribution(&self, context: &[u32]) -> Vec<f64> {
        let ctx = self.usable_context(context);
        let mut p = vec![1.0 / self.vocab_size as f64; self.vocab_size];
        for k in 1..=ctx.len() + 1 {
            let h = &ctx[ctx.len() + 1 - k..];
            let t = &self.tables[k - 1];
            if let Some(st) = t.contexts.get(h) {
                let total = st.total as f64;
                let gamma = (0..3).map(|j| t.discounts[j] * st.n[j] as f64).sum::<f64>() / total;
                for x in p.iter_mut() {
                    *x *= gamma;
                }
                for &(w, c) in &st.followers {
                    p[w as usize] += (c as f64 - t.discount(c)).max(0.0) / total;
                }
            }
        }
        p
    }

    /// Sum of log-probabilities and number of scored tokens. Every token but
    /// the first of each file is scored.
    pub fn score(&self, files: &[Vec<u32>], exec: Execution) -> (f64, usize) {
        let parts = par::map(exec, files, |f| {
            let mut lp = 0.0;
            for i in 1..f.len() {
                lp += self.logprob(&f[..i], f[i]);
            }
            (lp, f.len().saturating_sub(1))
        });
        parts.into_iter().fold((0.0, 0), |(a, n), (b, m)| (a + b, n + m))
    }

    pub fn perplexity(&self, files: &[Vec<u32>], exec: Execution) -> f64 {
        let (lp, n) = self.score(files, exec);
        (-lp / n.max(1) as f64).exp()
    }

    /// Text dump: a header with order, vocabulary size and discounts, then
    /// one `context<TAB>token<TAB>count` line per gram, context ids
    /// space-separated.
    pub fn write<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "mkn-ngram v1")?;
        writeln!(w, "order {}", self.order)?;
        writeln!(w, "vocab {}", self.vocab_size)?;
        for (k0, t) in self.tables.iter().enumerate() {
            let d = t.discounts;
            writeln!(w, "discounts {} {} {} {}", k0 + 1, d[0], d[1], d[2])?;
        }
        for (k0, t) in self.tables.iter().enumerate() {
            let mut keys: Vec<&Vec<u32>> = t.contexts.keys().collect();
            keys.sort_unstable();
            let grams: usize = t.contexts.values().map(|s| s.followers.len()).sum();
            writeln!(w, "table {} {}", k0 + 1, grams)?;
            for ctx in keys {
                let cs: Vec<String> = ctx.iter().map(|i| i.to_string()).collect();
                let cs = cs.join(" ");
                for &(tok, c) in &t.contexts[ctx].followers {
                    writeln!(w, "{cs}\t{tok}\t{c}")?;
                }
            }
        }
        Ok(())
    }

    pub fn read<R: BufRead>(r: R) -> Result<Self, NgramError> {
        let bad = |s: &str| NgramError::Format(s.to_string());
        let mut lines = r.lines();
        let mut next = || -> Result<String, NgramError> {
            lines.next().ok_or_else(|| bad("unexpected end of file"))?.map_err(NgramError::from)
        };
        if next()? != "mkn-ngram v1" {
            return Err(bad("bad magic line"));
        }
        let field = |line: String, key: &str| -> Result<usize, NgramError> {
            line.strip_prefix(key)
                .and_then(|v| v.trim().parse().ok())
                .ok_or_else(|| bad(&line))
        };
        let order = field(next()?, "order")?;
        let vocab_size = field(next()?, "vocab")?;
        if order < 2 {
            return Err(NgramError::BadOrder(order));
        }
        let mut discounts = Vec::with_capacity(order);
        for k in 1..=order {
            let line = next()?;
            let parts: Vec<&str> = line.split(' ').collect();
            if parts.len() != 5 || parts[0] != "discounts" || parts[1] != k.to_string() {
                return Err(bad(&line));
            }
            let mut d = [0.0; 3];
            for j in 0..3 {
                d[j] = parts[2 + j].parse().map_err(|_| bad(&line))?;
            }
            discounts.push(d);
        }
        let mut tables = Vec::with_capacity(order);
        for k in 1..=order {
            let line = next()?;
            let parts: Vec<&str> = line.split(' ').collect();
            if parts.len() != 3 || parts[0] != "table" || parts[1] != k.to_string() {
                return Err(bad(&line));
            }
            let n: usize = parts[2].parse().map_err(|_| bad(&line))?;
            let mut grams = HashMap::with_capacity(n);
            for _ in 0..n {
                let line = next()?;
                let f: Vec<&str> = line.split('\t').collect();
                if f.len() != 3 {
                    return Err(bad(&line));
                }
                let mut g: Vec<u32> = f[0]
                    .split_ascii_whitespace()
                    .map(|s| s.parse().map_err(|_| bad(&line)))
                    .collect::<Result<_, _>>()?;
                g.push(f[1].parse().map_err(|_| bad(&line))?);
                if g.len() != k || g.iter().any(|&i| i as usize >= vocab_size) {
                    return Err(bad(&line));
                }
                grams.insert(g, f[2].parse().map_err(|_| bad(&line))?);
            }
            let mut t = OrderTable::from_counts(grams);
            t.discounts = discounts[k - 1];
            tables.push(t);
        }
        Ok(NgramModel { order, vocab_size, tables })
    }
}
