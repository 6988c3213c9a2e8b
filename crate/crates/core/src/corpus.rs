//! Vocabulary, project splits, encoding and TBPTT batch streams.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::io::{self, BufRead, Write};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::par::{self, Execution};
use crate::pylex::{escape_field, unescape_field, SourceToken, TokenKind};
use crate::pynorm::{NormalizedFile, NUM_TOKEN};

pub const OOV_TOKEN: &str = "$OOV$";
pub const NEWLINE_SYMBOL: &str = "$NEWLINE$";
pub const INDENT_SYMBOL: &str = "$INDENT$";
pub const DEDENT_SYMBOL: &str = "$DEDENT$";
pub const DEFAULT_MIN_COUNT: u64 = 5;
pub const DEFAULT_UNROLL: usize = 50;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("too few projects ({projects}) for a three-way split with ratios {ratios:?}")]
    TooFewProjects { projects: usize, ratios: [f64; 3] },
    #[error("split ratios {0:?} must be non-negative and sum to 1")]
    BadRatios([f64; 3]),
    #[error("min_count must be at least 1")]
    BadMinCount,
    #[error("vocabulary cap must be at least 3")]
    BadCap,
    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

fn format_err(what: &'static str, detail: impl Into<String>) -> CorpusError {
    CorpusError::Format { what, detail: detail.into() }
}

/// The string a token contributes to the model vocabulary, if any.
pub fn model_symbol(tok: &SourceToken) -> Option<&str> {
    match tok.kind {
        TokenKind::Newline => Some(NEWLINE_SYMBOL),
        TokenKind::Indent => Some(INDENT_SYMBOL),
        TokenKind::Dedent => Some(DEDENT_SYMBOL),
        TokenKind::EndMarker | TokenKind::Comment => None,
        _ => Some(tok.text.as_str()),
    }
}

/// A normalized file as model symbols with introduction flags.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SymbolFile {
    pub symbols: Vec<String>,
    pub intro: Vec<bool>,
}

impl SymbolFile {
    pub fn from_normalized(file: &NormalizedFile) -> Self {
        let mut symbols = Vec::with_capacity(file.tokens.len());
        let mut intro = Vec::with_capacity(file.tokens.len());
        for (i, tok) in file.tokens.iter().enumerate() {
            if let Some(sym) = model_symbol(tok) {
                symbols.push(sym.to_string());
                intro.push(file.intro_positions.contains(&i));
            }
        }
        SymbolFile { symbols, intro }
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }
}

/// A file as vocabulary ids. `ident[i]` marks tokens that are anonymous
/// identifiers of this file (the texts found at introduction positions).
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct EncodedFile {
    pub ids: Vec<u32>,
    pub intro: Vec<bool>,
    pub ident: Vec<bool>,
}

impl EncodedFile {
    pub fn new(ids: Vec<u32>, intro: Vec<bool>, oov_id: u32) -> Self {
        assert_eq!(ids.len(), intro.len(), "ids and intro flags differ in length");
        let names: HashSet<u32> = ids
            .iter()
            .zip(&intro)
            .filter(|(&id, &f)| f && id != oov_id)
            .map(|(&id, _)| id)
            .collect();
        let ident = ids.iter().map(|id| names.contains(id)).collect();
        EncodedFile { ids, intro, ident }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn intro_positions(&self) -> Vec<usize> {
        self.intro
            .iter()
            .enumerate()
            .filter_map(|(i, &f)| f.then_some(i))
            .collect()
    }

    /// Number of predicted positions (every token but the first).
    pub fn num_targets(&self) -> usize {
        self.ids.len().saturating_sub(1)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    counts: Vec<u64>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    /// Builds a vocabulary from symbol sequences. Tokens seen fewer than
    /// `min_count` times are folded into `$OOV$`. Ids are ordered by
    /// descending count, ties broken by token text.
    pub fn build<S: AsRef<str> + Sync>(
        files: &[Vec<S>],
        min_count: u64,
        exec: Execution,
    ) -> Result<Self, CorpusError> {
        Self::build_capped(files, min_count, None, exec)
    }

    /// Like [`Vocabulary::build`], additionally keeping at most `cap` ids in
    /// total (specials included). The least frequent tokens are folded
    /// into `$OOV$` first.
    pub fn build_capped<S: AsRef<str> + Sync>(
        files: &[Vec<S>],
        min_count: u64,
        cap: Option<usize>,
        exec: Execution,
    ) -> Result<Self, CorpusError> {
        if cap.is_some_and(|c| c < 3) {
            return Err(CorpusError::BadCap);
        }
        if min_count == 0 {
            return Err(CorpusError::BadMinCount);
        }
        let partial: Vec<HashMap<&str, u64>> = par::map(exec, files, |f| {
            let mut m: HashMap<&str, u64> = HashMap::new();
            for s in f {
                *m.entry(s.as_ref()).or_default() += 1;
            }
            m
        });
        let mut counts: HashMap<&str, u64> = HashMap::new();
        for m in partial {
            for (k, v) in m {
                *counts.entry(k).or_default() += v;
            }
        }
        if counts.is_empty() {
            return Err(CorpusError::EmptyCorpus);
        }
        let mut oov = 0u64;
        let mut kept: Vec<(String, u64)> = Vec::new();
        let mut num_count = 0u64;
        for (tok, c) in counts {
            if tok == OOV_TOKEN {
                oov += c;
            } else if tok == NUM_TOKEN {
                num_count = c;
            } else if c >= min_count {
                kept.push((tok.to_string(), c));
            } else {
                oov += c;
            }
        }
        if let Some(cap) = cap {
            kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
            for (_, c) in kept.drain((cap - 2).min(kept.len())..) {
                oov += c;
            }
        }
        kept.push((OOV_TOKEN.to_string(), oov));
        kept.push((NUM_TOKEN.to_string(), num_count));
        Ok(Self::from_counts(kept))
    }

    fn from_counts(mut entries: Vec<(String, u64)>) -> Self {
        entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mut v = Vocabulary { tokens: Vec::new(), counts: Vec::new(), index: HashMap::new() };
        for (t, c) in entries {
            v.index.insert(t.clone(), v.tokens.len() as u32);
            v.tokens.push(t);
            v.counts.push(c);
        }
        v
    }

    /// Vocabulary over the given tokens in order, with the special tokens
    /// appended when missing. Counts are zero.
    pub fn from_tokens<S: AsRef<str>>(tokens: &[S]) -> Self {
        let mut v = Vocabulary { tokens: Vec::new(), counts: Vec::new(), index: HashMap::new() };
        let specials = [OOV_TOKEN, NUM_TOKEN];
        for t in tokens.iter().map(|t| t.as_ref()).chain(specials) {
            if !v.index.contains_key(t) {
                v.index.insert(t.to_string(), v.tokens.len() as u32);
                v.tokens.push(t.to_string());
                v.counts.push(0);
            }
        }
        v
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn get(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    /// Id of `token`, or of `$OOV$` when unknown.
    pub fn id(&self, token: &str) -> u32 {
        self.get(token).unwrap_or_else(|| self.oov_id())
    }

    pub fn oov_id(&self) -> u32 {
        self.index[OOV_TOKEN]
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn count(&self, id: u32) -> u64 {
        self.counts[id as usize]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, file: &SymbolFile) -> EncodedFile {
        let ids = file.symbols.iter().map(|s| self.id(s)).collect();
        EncodedFile::new(ids, file.intro.clone(), self.oov_id())
    }

    pub fn decode(&self, ids: &[u32]) -> Vec<&str> {
        ids.iter().map(|&i| self.token(i)).collect()
    }

    /// Hex SHA-256 over the id-ordered token list.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update([0u8]);
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// `token<TAB>id<TAB>count` per line, in id order.
    pub fn write<W: Write>(&self, mut w: W) -> io::Result<()> {
        for (i, (t, c)) in self.tokens.iter().zip(&self.counts).enumerate() {
            writeln!(w, "{}\t{}\t{}", escape_field(t), i, c)?;
        }
        Ok(())
    }

    pub fn read<R: BufRead>(r: R) -> Result<Self, CorpusError> {
        let mut v = Vocabulary { tokens: Vec::new(), counts: Vec::new(), index: HashMap::new() };
        for line in r.lines() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 3 {
                return Err(format_err("vocabulary", format!("expected 3 fields in {line:?}")));
            }
            let tok = unescape_field(f[0]).map_err(|e| format_err("vocabulary", e.to_string()))?;
            let id: usize = f[1].parse().map_err(|_| format_err("vocabulary", f[1]))?;
            let count: u64 = f[2].parse().map_err(|_| format_err("vocabulary", f[2]))?;
            if id != v.tokens.len() || v.index.contains_key(&tok) {
                return Err(format_err("vocabulary", format!("ids must be dense and unique ({line:?})")));
            }
            v.index.insert(tok.clone(), id as u32);
            v.tokens.push(tok);
            v.counts.push(count);
        }
        if !v.index.contains_key(OOV_TOKEN) || !v.index.contains_key(NUM_TOKEN) {
            return Err(format_err("vocabulary", "special tokens missing"));
        }
        Ok(v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Part {
    Train,
    Dev,
    Test,
}

impl Part {
    pub fn as_str(self) -> &'static str {
        match self {
            Part::Train => "train",
            Part::Dev => "dev",
            Part::Test => "test",
        }
    }
}

impl fmt::Display for Part {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Part {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Part::Train),
            "dev" => Ok(Part::Dev),
            "test" => Ok(Part::Test),
            _ => Err(format_err("split", format!("unknown part {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProjectSplit {
    pub assignment: BTreeMap<String, Part>,
}

impl ProjectSplit {
    pub fn part_of(&self, project: &str) -> Option<Part> {
        self.assignment.get(project).copied()
    }

    pub fn projects(&self, part: Part) -> Vec<&str> {
        self.assignment
            .iter()
            .filter(|(_, &p)| p == part)
            .map(|(k, _)| k.as_str())
            .collect()
    }

    pub fn write<W: Write>(&self, mut w: W) -> io::Result<()> {
        for (proj, part) in &self.assignment {
            writeln!(w, "{}\t{}", escape_field(proj), part)?;
        }
        Ok(())
    }

    pub fn read<R: BufRead>(r: R) -> Result<Self, CorpusError> {
        let mut assignment = BTreeMap::new();
        for line in r.lines() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let (proj, part) = line
                .split_once('\t')
                .ok_or_else(|| format_err("split", line.clone()))?;
            let proj = unescape_field(proj).map_err(|e| format_err("split", e.to_string()))?;
            assignment.insert(proj, part.parse()?);
        }
        Ok(ProjectSplit { assignment })
    }
}

/// Assigns whole projects to train/dev/test. Deterministic for a given seed
/// and independent of the input order.
pub fn split_projects<S: AsRef<str>>(
    projects: &[S],
    ratios: [f64; 3],
    seed: u64,
) -> Result<ProjectSplit, CorpusError> {
    if ratios.iter().any(|r| !(*r >= 0.0)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(CorpusError::BadRatios(ratios));
    }
    let mut names: Vec<&str> = projects.iter().map(|p| p.as_ref()).collect();
    names.sort_unstable();
    names.dedup();
    let n = names.len();
    let n_train = (n as f64 * ratios[0]).round() as usize;
    let n_dev = (n as f64 * ratios[1]).round() as usize;
    if n_train == 0 || n_dev == 0 || n_train + n_dev >= n {
        return Err(CorpusError::TooFewProjects { projects: n, ratios });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    names.shuffle(&mut rng);
    let assignment = names
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let part = if i < n_train {
                Part::Train
            } else if i < n_train + n_dev {
                Part::Dev
            } else {
                Part::Test
            };
            (p.to_string(), part)
        })
        .collect();
    Ok(ProjectSplit { assignment })
}

/// Encoded corpus file: a header `count<TAB>p1,p2,...` with the intro
/// positions, then the ids separated by spaces.
pub fn write_encoded<W: Write>(mut w: W, file: &EncodedFile) -> io::Result<()> {
    let intro: Vec<String> = file.intro_positions().iter().map(|p| p.to_string()).collect();
    writeln!(w, "{}\t{}", file.len(), intro.join(","))?;
    let ids: Vec<String> = file.ids.iter().map(|i| i.to_string()).collect();
    writeln!(w, "{}", ids.join(" "))
}

pub fn read_encoded<R: BufRead>(r: R, oov_id: u32) -> Result<EncodedFile, CorpusError> {
    let mut lines = r.lines();
    let header = lines.next().ok_or_else(|| format_err("encoded file", "missing header"))??;
    let (count, intro) = header
        .split_once('\t')
        .ok_or_else(|| format_err("encoded file", header.clone()))?;
    let count: usize = count.parse().map_err(|_| format_err("encoded file", count))?;
    let body = lines.next().transpose()?.unwrap_or_default();
    let ids: Vec<u32> = body
        .split_ascii_whitespace()
        .map(|s| s.parse().map_err(|_| format_err("encoded file", s)))
        .collect::<Result<_, _>>()?;
    if ids.len() != count {
        return Err(format_err("encoded file", format!("header says {count} ids, found {}", ids.len())));
    }
    let mut flags = vec![false; count];
    for p in intro.split(',').filter(|s| !s.is_empty()) {
        let p: usize = p.parse().map_err(|_| format_err("encoded file", p))?;
        *flags
            .get_mut(p)
            .ok_or_else(|| format_err("encoded file", format!("intro position {p} out of range")))? = true;
    }
    Ok(EncodedFile::new(ids, flags, oov_id))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
struct Position {
    input: u32,
    target: Option<u32>,
    reset: bool,
    intro: bool,
    target_ident: bool,
}

/// One `[lanes × len]` slice of the stream, row-major by lane.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub lanes: usize,
    pub len: usize,
    pub inputs: Vec<u32>,
    /// Next token within the same file; meaningless where `mask` is false.
    pub targets: Vec<u32>,
    /// Positions that contribute to the loss.
    pub mask: Vec<bool>,
    /// First token of a file: recurrent state and memory are cleared first.
    pub reset: Vec<bool>,
    pub intro: Vec<bool>,
    /// Input id where `intro` is set, else 0.
    pub intro_ids: Vec<u32>,
    /// Whether the target is an anonymous identifier.
    pub target_ident: Vec<bool>,
    /// Past the end of the lane's data; nothing to compute.
    pub pad: Vec<bool>,
}

impl Batch {
    pub fn at(&self, lane: usize, t: usize) -> usize {
        lane * self.len + t
    }
}

/// Whole files packed into `lanes` parallel streams, cut into segments of
/// at most `unroll` positions.
#[derive(Debug, Clone)]
pub struct BatchStream {
    lanes: Vec<Vec<Position>>,
    unroll: usize,
    steps: usize,
}

impl BatchStream {
    pub fn new(files: &[EncodedFile], batch_size: usize, unroll: usize) -> Self {
        assert!(batch_size >= 1 && unroll >= 1, "batch size and unroll must be positive");
        let mut order: Vec<usize> = (0..files.len()).filter(|&i| !files[i].is_empty()).collect();
        order.sort_by(|&a, &b| files[b].len().cmp(&files[a].len()).then(a.cmp(&b)));
        let mut lanes: Vec<Vec<Position>> = vec![Vec::new(); batch_size];
        for fi in order {
            let lane = (0..batch_size)
                .min_by_key(|&l| (lanes[l].len(), l))
                .expect("at least one lane");
            let f = &files[fi];
            for i in 0..f.len() {
                let target = f.ids.get(i + 1).copied();
                lanes[lane].push(Position {
                    input: f.ids[i],
                    target,
                    reset: i == 0,
                    intro: f.intro[i],
                    target_ident: target.is_some() && f.ident[i + 1],
                });
            }
        }
        let steps = lanes.iter().map(Vec::len).max().unwrap_or(0);
        BatchStream { lanes, unroll, steps }
    }

    pub fn lanes(&self) -> usize {
        self.lanes.len()
    }

    pub fn num_batches(&self) -> usize {
        self.steps.div_ceil(self.unroll)
    }

    pub fn batch(&self, index: usize) -> Batch {
        let start = index * self.unroll;
        let len = self.unroll.min(self.steps - start);
        let n = self.lanes.len() * len;
        let mut b = Batch {
            lanes: self.lanes.len(),
            len,
            inputs: vec![0; n],
            targets: vec![0; n],
            mask: vec![false; n],
            reset: vec![false; n],
            intro: vec![false; n],
            intro_ids: vec![0; n],
            target_ident: vec![false; n],
            pad: vec![true; n],
        };
        for (l, lane) in self.lanes.iter().enumerate() {
            for t in 0..len {
                let Some(p) = lane.get(start + t) else { break };
                let k = l * len + t;
                b.inputs[k] = p.input;
                b.targets[k] = p.target.unwrap_or(0);
                b.mask[k] = p.target.is_some();
                b.reset[k] = p.reset;
                b.intro[k] = p.intro;
                b.intro_ids[k] = if p.intro { p.input } else { 0 };
                b.target_ident[k] = p.target_ident;
                b.pad[k] = false;
            }
        }
        b
    }

    pub fn iter(&self) -> impl Iterator<Item = Batch> + '_ {
        (0..self.num_batches()).map(|i| self.batch(i))
    }

    /// Total number of positions in each lane.
    pub fn lane_lengths(&self) -> Vec<usize> {
        self.lanes.iter().map(Vec::len).collect()
    }
}

pub fn make_batches(files: &[EncodedFile], batch_size: usize, unroll: usize) -> BatchStream {
    BatchStream::new(files, batch_size, unroll)
}
