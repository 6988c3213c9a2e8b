//! Synthetic corpus with planted long-range identifier re-use.
//!
//! Each file introduces live variables on lines `cue ( varN )`, with a call
//! name `cue` unique to each within the file, and distractor variables on
//! lines `varM = $NUM$` that are never used again. Every live variable is
//! re-used on a line with its cue a fixed number of tokens after its
//! previous occurrence, with random filler in between. The filler never
//! contains a cue or `(`.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::pylex::{SourceToken, TokenKind};
use crate::pynorm::{Binding, IdentifierGroup, NormalizedFile, NUM_TOKEN};

pub const CUES: &[&str] = &["os", "sys", "re", "json", "math", "time", "random", "logging"];

const FILLER_NAMES: &[&str] =
    &["self", "print", "len", "range", "str", "int", "list", "dict", "append", "format", "items", "key", "value"];
const FILLER_KEYWORDS: &[&str] = &["if", "for", "in", "return", "not", "and", "or", "None", "True", "pass", "else"];
const FILLER_OPS: &[&str] = &["=", "+", "-", "*", ".", ",", ":", "[", "]", "==", "<"];

/// Longest occurrence line: cue, `(`, name, `)`, NEWLINE.
const EVENT_LEN: usize = 5;
/// Offset of the name within a live occurrence line.
const NAME_OFFSET: usize = 2;

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("distance range {0}..={1} must lie within 20..=200, span at least {2} tokens and start above {3}")]
    BadRange(usize, usize, usize, usize),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub num_files: usize,
    pub files_per_project: usize,
    pub min_distance: usize,
    pub max_distance: usize,
    /// Live identifiers per file, inclusive range.
    pub identifiers: (usize, usize),
    /// Distractor identifiers per file, inclusive range.
    pub distractors: (usize, usize),
    /// Re-uses per live identifier after its introduction.
    pub reuses: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_files: 200,
            files_per_project: 10,
            min_distance: 60,
            max_distance: 100,
            identifiers: (1, 1),
            distractors: (1, 2),
            reuses: 4,
            seed: 1,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let (lo, hi) = self.identifiers;
        if lo == 0 || lo > hi || hi > CUES.len() {
            return Err(SynthError::Invalid(format!("live identifiers per file must be within 1..={}", CUES.len())));
        }
        let (dlo, dhi) = self.distractors;
        if dlo > dhi || hi + dhi > 99 {
            return Err(SynthError::Invalid("bad distractor range".into()));
        }
        if self.num_files == 0 || self.files_per_project == 0 || self.reuses == 0 {
            return Err(SynthError::Invalid("num_files, files_per_project and reuses must be positive".into()));
        }
        let n = hi + dhi;
        let slack = EVENT_LEN * (n - 1);
        let floor = EVENT_LEN * n + NAME_OFFSET;
        let (a, b) = (self.min_distance, self.max_distance);
        if a < 20 || b > 200 || a > b || b - a < slack || a <= floor {
            return Err(SynthError::BadRange(a, b, slack, floor));
        }
        Ok(())
    }
}

/// One identifier occurrence in a generated file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Occurrence {
    pub position: usize,
    pub symbol: usize,
    pub intro: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthFile {
    pub project: String,
    pub name: String,
    pub file: NormalizedFile,
    pub occurrences: Vec<Occurrence>,
}

impl SynthFile {
    /// Token distance from each re-use back to the previous occurrence of
    /// the same identifier.
    pub fn reuse_distances(&self) -> Vec<usize> {
        let mut last = vec![None; self.file.symbols.len()];
        let mut out = Vec::new();
        for o in &self.occurrences {
            if let Some(p) = last[o.symbol] {
                out.push(o.position - p);
            }
            last[o.symbol] = Some(o.position);
        }
        out
    }
}

struct Builder {
    tokens: Vec<SourceToken>,
    line: usize,
    col: usize,
}

impl Builder {
    fn push(&mut self, kind: TokenKind, text: &str) {
        self.tokens.push(SourceToken::new(kind, text, self.line, self.col));
        if kind == TokenKind::Newline {
            self.line += 1;
            self.col = 0;
        } else {
            self.col += text.chars().count() + 1;
        }
    }

    fn len(&self) -> usize {
        self.tokens.len()
    }

    fn filler_token(&mut self, rng: &mut ChaCha8Rng) {
        match rng.gen_range(0..4) {
            0 => self.push(TokenKind::Name, FILLER_NAMES.choose(rng).unwrap()),
            1 => self.push(TokenKind::Keyword, FILLER_KEYWORDS.choose(rng).unwrap()),
            2 => self.push(TokenKind::Operator, FILLER_OPS.choose(rng).unwrap()),
            _ => self.push(TokenKind::Number, NUM_TOKEN),
        }
    }

    /// Appends exactly `n` filler tokens as short lines.
    fn filler(&mut self, mut n: usize, rng: &mut ChaCha8Rng) {
        while n > 0 {
            let len = if n <= 9 { n } else { rng.gen_range(3..=8) };
            for _ in 1..len {
                self.filler_token(rng);
            }
            self.push(TokenKind::Newline, "");
            n -= len;
        }
    }

    /// Emits an occurrence line and returns the position of the name.
    fn occurrence(&mut self, cue: Option<&str>, name: &str) -> usize {
        let pos;
        match cue {
            Some(cue) => {
                self.push(TokenKind::Name, cue);
                self.push(TokenKind::Operator, "(");
                pos = self.len();
                self.push(TokenKind::Name, name);
                self.push(TokenKind::Operator, ")");
            }
            None => {
                pos = self.len();
                self.push(TokenKind::Name, name);
                self.push(TokenKind::Operator, "=");
                self.push(TokenKind::Number, NUM_TOKEN);
            }
        }
        self.push(TokenKind::Newline, "");
        pos
    }
}

fn generate_file(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> (NormalizedFile, Vec<Occurrence>) {
    let live = rng.gen_range(cfg.identifiers.0..=cfg.identifiers.1);
    let n = live + rng.gen_range(cfg.distractors.0..=cfg.distractors.1);
    let mut cues: Vec<Option<&str>> = CUES.choose_multiple(rng, live).copied().map(Some).collect();
    cues.resize(n, None);
    cues.shuffle(rng);
    let numbers = rand::seq::index::sample(rng, 99, n);
    let names: Vec<String> = numbers.iter().map(|k| format!("{}{}", IdentifierGroup::Variable.prefix(), k + 1)).collect();
    // Shorter sampled gaps leave room for lines that collide and are pushed back.
    let hi = cfg.max_distance - EVENT_LEN * (n - 1);

    let mut b = Builder { tokens: Vec::new(), line: 1, col: 0 };
    let mut intro_at = vec![0; n];
    let mut occurrences = Vec::new();
    let mut left: Vec<usize> = cues.iter().map(|c| if c.is_some() { cfg.reuses + 1 } else { 1 }).collect();
    // Every identifier has at most one pending occurrence: first its
    // introduction, then each re-use. The earliest due one is emitted next.
    let mut due = Vec::with_capacity(n);
    let mut at = rng.gen_range(3..=10) + NAME_OFFSET;
    for _ in 0..n {
        due.push(at);
        at += EVENT_LEN + rng.gen_range(2..=12);
    }

    while let Some(j) = (0..n).filter(|&j| left[j] > 0).min_by_key(|&j| (due[j], j)) {
        let offset = if cues[j].is_some() { NAME_OFFSET } else { 0 };
        let gap = (due[j] - offset).saturating_sub(b.len());
        b.filler(gap, rng);
        let pos = b.occurrence(cues[j], &names[j]);
        let intro = occurrences.iter().all(|o: &Occurrence| o.symbol != j);
        if intro {
            intro_at[j] = pos;
        }
        occurrences.push(Occurrence { position: pos, symbol: j, intro });
        left[j] -= 1;
        due[j] = pos + rng.gen_range(cfg.min_distance..=hi);
    }
    b.filler(rng.gen_range(3..=10), rng);
    b.push(TokenKind::EndMarker, "");
    let symbols = (0..n)
        .map(|j| Binding {
            original_name: names[j].clone(),
            group: IdentifierGroup::Variable,
            scope_id: 0,
            anon_name: names[j].clone(),
            intro_index: intro_at[j],
        })
        .collect();
    (NormalizedFile::from_parts(b.tokens, symbols), occurrences)
}

/// Generates the corpus. Files are named `synth_NNNNN` and grouped into
/// projects `projNNN`.
pub fn generate(cfg: &SynthConfig) -> Result<Vec<SynthFile>, SynthError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    Ok((0..cfg.num_files)
        .map(|i| {
            let (file, occurrences) = generate_file(cfg, &mut rng);
            SynthFile {
                project: format!("proj{:03}", i / cfg.files_per_project),
                name: format!("synth_{i:05}"),
                file,
                occurrences,
            }
        })
        .collect())
}
