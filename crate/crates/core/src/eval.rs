//! Perplexity and top-k accuracy, split into identifier and other targets.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::EncodedFile;
use crate::ngram::NgramModel;
use crate::par::{self, Execution};

/// Anything that yields a next-token distribution for every position of a
/// file after the first.
pub trait LanguageModel: Sync {
    fn vocab_size(&self) -> usize;

    /// Calls `f(i, p)` for `i` in `1..len`, with `p` the distribution over
    /// `file.ids[i]` given the preceding tokens.
    fn predict_file(&self, file: &EncodedFile, f: &mut dyn FnMut(usize, &[f64]));
}

impl LanguageModel for NgramModel {
    fn vocab_size(&self) -> usize {
        NgramModel::vocab_size(self)
    }

    fn predict_file(&self, file: &EncodedFile, f: &mut dyn FnMut(usize, &[f64])) {
        for i in 1..file.len() {
            f(i, &self.distribution(&file.ids[..i]));
        }
    }
}

/// Number of ids ranked ahead of `target`: higher probability, or equal
/// probability and a smaller id.
pub fn rank_of(dist: &[f64], target: u32) -> usize {
    let pt = dist[target as usize];
    dist.iter()
        .enumerate()
        .filter(|&(i, &p)| p > pt || (p == pt && (i as u32) < target))
        .count()
}

/// The `k` most probable ids, by descending probability then ascending id.
pub fn top_k(dist: &[f64], k: usize) -> Vec<(u32, f64)> {
    let mut best: Vec<(u32, f64)> = Vec::with_capacity(k + 1);
    for (i, &p) in dist.iter().enumerate() {
        if best.len() == k && best.last().is_some_and(|&(_, q)| p <= q) {
            continue;
        }
        let pos = best.partition_point(|&(_, q)| q >= p);
        best.insert(pos, (i as u32, p));
        best.truncate(k);
    }
    best
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Bucket {
    pub tokens: usize,
    pub hits1: usize,
    pub hits5: usize,
}

impl Bucket {
    fn add(&mut self, o: &Bucket) {
        self.tokens += o.tokens;
        self.hits1 += o.hits1;
        self.hits5 += o.hits5;
    }

    fn record(&mut self, rank: usize) {
        self.tokens += 1;
        self.hits1 += (rank < 1) as usize;
        self.hits5 += (rank < 5) as usize;
    }
}

/// Raw sums from which every metric is derived.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Tally {
    pub log_likelihood: f64,
    pub ids: Bucket,
    pub other: Bucket,
}

impl Tally {
    pub fn merge(&mut self, o: &Tally) {
        self.log_likelihood += o.log_likelihood;
        self.ids.add(&o.ids);
        self.other.add(&o.other);
    }

    pub fn all(&self) -> Bucket {
        let mut b = self.ids;
        b.add(&self.other);
        b
    }

    pub fn perplexity(&self) -> f64 {
        (-self.log_likelihood / self.all().tokens.max(1) as f64).exp()
    }
}

/// Scores every target of every file; files are processed in parallel and
/// merged in input order.
pub fn tally<M: LanguageModel + ?Sized>(model: &M, files: &[EncodedFile], exec: Execution) -> Tally {
    let parts = par::map(exec, files, |file| {
        let mut t = Tally::default();
        model.predict_file(file, &mut |i, dist| {
            let target = file.ids[i];
            t.log_likelihood += dist[target as usize].ln();
            let rank = rank_of(dist, target);
            if file.ident[i] {
                t.ids.record(rank);
            } else {
                t.other.record(rank);
            }
        });
        t
    });
    let mut total = Tally::default();
    for p in &parts {
        total.merge(p);
    }
    total
}

pub fn perplexity<M: LanguageModel + ?Sized>(model: &M, files: &[EncodedFile], exec: Execution) -> f64 {
    tally(model, files, exec).perplexity()
}

/// Values for All / IDs / Other. `None` where the bucket is empty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub all: Option<f64>,
    pub ids: Option<f64>,
    pub other: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenCounts {
    pub all: usize,
    pub ids: usize,
    pub other: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub model: String,
    pub split: String,
    pub perplexity: f64,
    /// Top-1 accuracy in percent.
    pub acc: Split,
    /// Top-5 accuracy in percent.
    pub acc5: Split,
    pub tokens: TokenCounts,
}

fn pct(hits: usize, n: usize) -> Option<f64> {
    (n > 0).then(|| 100.0 * hits as f64 / n as f64)
}

impl MetricsRow {
    pub fn from_tally(model: &str, split: &str, t: &Tally) -> Self {
        let all = t.all();
        MetricsRow {
            model: model.to_string(),
            split: split.to_string(),
            perplexity: t.perplexity(),
            acc: Split {
                all: pct(all.hits1, all.tokens),
                ids: pct(t.ids.hits1, t.ids.tokens),
                other: pct(t.other.hits1, t.other.tokens),
            },
            acc5: Split {
                all: pct(all.hits5, all.tokens),
                ids: pct(t.ids.hits5, t.ids.tokens),
                other: pct(t.other.hits5, t.other.tokens),
            },
            tokens: TokenCounts { all: all.tokens, ids: t.ids.tokens, other: t.other.tokens },
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rows: Vec<MetricsRow>,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable report")
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }

    /// Fixed-width table: PP, then Acc and Acc@5 for All, IDs and Other.
    pub fn render_table(&self) -> String {
        let cell = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.2}"));
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<24} {:<6} {:>9} | {:>7} {:>7} {:>7} | {:>7} {:>7} {:>7}",
            "Model", "Split", "PP", "Acc", "IDs", "Other", "Acc@5", "IDs", "Other"
        );
        let _ = writeln!(s, "{}", "-".repeat(24 + 1 + 6 + 1 + 9 + 3 + 23 + 3 + 23));
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<24} {:<6} {:>9.2} | {:>7} {:>7} {:>7} | {:>7} {:>7} {:>7}",
                r.model,
                r.split,
                r.perplexity,
                cell(r.acc.all),
                cell(r.acc.ids),
                cell(r.acc.other),
                cell(r.acc5.all),
                cell(r.acc5.ids),
                cell(r.acc5.other)
            );
        }
        s
    }
}
