//! Identifier normalization.
//!
//! A structural pass over the token stream (no AST) finds identifiers that a
//! file introduces itself: functions, classes, parameters, assignment / `for`
//! / `with ... as` targets, and `<receiver>.<name> = ...` attributes inside
//! methods. Each such binding gets an anonymous name made of its group and a
//! number unique within its scope. Imported and otherwise unresolved names are
//! left untouched. Numbers become `$NUM$` and comments are dropped.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::io::{self, BufRead, Write};
use std::str::FromStr;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pylex::{SourceToken, TokenKind};

pub const NUM_TOKEN: &str = "$NUM$";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum IdentifierGroup {
    Class,
    Variable,
    Argument,
    Attribute,
    Function,
}

impl IdentifierGroup {
    pub const ALL: [IdentifierGroup; 5] = [
        IdentifierGroup::Class,
        IdentifierGroup::Variable,
        IdentifierGroup::Argument,
        IdentifierGroup::Attribute,
        IdentifierGroup::Function,
    ];

    /// Prefix of anonymous names in this group.
    pub fn prefix(self) -> &'static str {
        match self {
            IdentifierGroup::Class => "class",
            IdentifierGroup::Variable => "var",
            IdentifierGroup::Argument => "arg",
            IdentifierGroup::Attribute => "attribute",
            IdentifierGroup::Function => "function",
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            IdentifierGroup::Class => "Class",
            IdentifierGroup::Variable => "Variable",
            IdentifierGroup::Argument => "Argument",
            IdentifierGroup::Attribute => "Attribute",
            IdentifierGroup::Function => "Function",
        }
    }
}

impl fmt::Display for IdentifierGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for IdentifierGroup {
    type Err = NormError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        IdentifierGroup::ALL
            .into_iter()
            .find(|g| g.as_str() == s)
            .ok_or_else(|| NormError::Format(format!("unknown identifier group {s:?}")))
    }
}

/// True for names shaped like an anonymous identifier, e.g. `var3`.
pub fn looks_anonymous(name: &str) -> bool {
    IdentifierGroup::ALL.iter().any(|g| {
        name.strip_prefix(g.prefix())
            .is_some_and(|rest| !rest.is_empty() && rest.bytes().all(|b| b.is_ascii_digit()))
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Binding {
    /// Empty when loaded from a symbol table file.
    pub original_name: String,
    pub group: IdentifierGroup,
    pub scope_id: usize,
    pub anon_name: String,
    pub intro_index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScopeKind {
    Module,
    Class,
    Function,
    Comprehension,
}

#[derive(Debug, Clone)]
pub struct Scope {
    pub id: usize,
    pub kind: ScopeKind,
    pub parent: Option<usize>,
    /// Receiver parameter name (`self`, `cls`) for methods.
    pub receiver: Option<String>,
    globals: HashSet<String>,
}

/// Output of [`analyze_scopes`].
#[derive(Debug, Clone)]
pub struct ScopeAnalysis {
    pub scopes: Vec<Scope>,
    pub bindings: Vec<Binding>,
    /// Binding index of every token that refers to a binding.
    pub resolution: Vec<Option<usize>>,
    /// Innermost scope of every token.
    pub scope_of: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Numbering {
    /// `var1`, `var2`, ... in order of first occurrence within each scope.
    #[default]
    Sequential,
    /// Distinct random numbers per scope and group, reproducible from the seed.
    SeededRandom(u64),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NormalizedFile {
    pub tokens: Vec<SourceToken>,
    pub symbols: Vec<Binding>,
    pub intro_positions: BTreeSet<usize>,
}

impl NormalizedFile {
    pub fn identifier_names(&self) -> HashSet<&str> {
        self.symbols.iter().map(|b| b.anon_name.as_str()).collect()
    }
}

#[derive(Debug, Error)]
pub enum NormError {
    #[error("malformed symbol table: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub fn analyze_scopes(tokens: &[SourceToken]) -> ScopeAnalysis {
    Analyzer::new(tokens).run(Numbering::Sequential)
}

pub fn normalize(tokens: &[SourceToken], numbering: Numbering) -> NormalizedFile {
    let kept: Vec<SourceToken> = tokens
        .iter()
        .filter(|t| t.kind != TokenKind::Comment)
        .cloned()
        .collect();
    let analysis = Analyzer::new(&kept).run(numbering);
    let mut out = kept;
    for (tok, res) in out.iter_mut().zip(&analysis.resolution) {
        if let Some(b) = res {
            tok.text.clone_from(&analysis.bindings[*b].anon_name);
        } else if tok.kind == TokenKind::Number {
            tok.text = NUM_TOKEN.to_string();
        }
    }
    let intro_positions = analysis.bindings.iter().map(|b| b.intro_index).collect();
    NormalizedFile { tokens: out, symbols: analysis.bindings, intro_positions }
}

/// Whether `token` is one of the anonymous identifiers of `file`.
pub fn is_identifier_target(token: &SourceToken, file: &NormalizedFile) -> bool {
    token.kind == TokenKind::Name && file.symbols.iter().any(|b| b.anon_name == token.text)
}

fn is_dunder(name: &str) -> bool {
    name.len() > 4 && name.starts_with("__") && name.ends_with("__")
}

const COMPOUND_KEYWORDS: [&str; 9] =
    ["if", "elif", "else", "while", "for", "try", "except", "finally", "with"];

struct Analyzer<'a> {
    /// Non-comment tokens.
    toks: Vec<&'a SourceToken>,
    /// Original index of each entry of `toks`.
    orig: Vec<usize>,
    total: usize,
    scopes: Vec<Scope>,
    bindings: Vec<Binding>,
    // first binding site per binding, in compact indices
    sites: Vec<usize>,
    table: HashMap<(usize, String), usize>,
    site_binding: Vec<Option<usize>>,
    scope_at: Vec<usize>,
    static_next: bool,
}

impl<'a> Analyzer<'a> {
    fn new(tokens: &'a [SourceToken]) -> Self {
        let mut toks = Vec::new();
        let mut orig = Vec::new();
        for (i, t) in tokens.iter().enumerate() {
            if t.kind != TokenKind::Comment {
                toks.push(t);
                orig.push(i);
            }
        }
        let n = toks.len();
        Analyzer {
            toks,
            orig,
            total: tokens.len(),
            scopes: vec![Scope {
                id: 0,
                kind: ScopeKind::Module,
                parent: None,
                receiver: None,
                globals: HashSet::new(),
            }],
            bindings: Vec::new(),
            sites: Vec::new(),
            table: HashMap::new(),
            site_binding: vec![None; n],
            scope_at: vec![0; n],
            static_next: false,
        }
    }

    fn run(mut self, numbering: Numbering) -> ScopeAnalysis {
        self.structure();
        let resolution_compact = self.resolve();
        let mut resolution = vec![None; self.total];
        let mut scope_of = vec![0; self.total];
        let mut intro: Vec<usize> = vec![usize::MAX; self.bindings.len()];
        for (ci, res) in resolution_compact.iter().enumerate() {
            let oi = self.orig[ci];
            scope_of[oi] = self.scope_at[ci];
            if let Some(b) = *res {
                resolution[oi] = Some(b);
                intro[b] = intro[b].min(oi);
            }
        }
        // comments inherit the scope of the preceding token
        let mut kept = vec![false; self.total];
        for &oi in &self.orig {
            kept[oi] = true;
        }
        for i in 1..self.total {
            if !kept[i] {
                scope_of[i] = scope_of[i - 1];
            }
        }
        for (b, first) in self.bindings.iter_mut().zip(intro) {
            b.intro_index = first;
        }
        assign_names(&mut self.bindings, numbering);
        ScopeAnalysis { scopes: self.scopes, bindings: self.bindings, resolution, scope_of }
    }

    fn tok(&self, i: usize) -> &'a SourceToken {
        self.toks[i]
    }

    fn new_scope(&mut self, kind: ScopeKind, parent: usize) -> usize {
        let id = self.scopes.len();
        self.scopes.push(Scope { id, kind, parent: Some(parent), receiver: None, globals: HashSet::new() });
        id
    }

    fn bind(&mut self, scope: usize, site: usize, group: IdentifierGroup) {
        let name = &self.tok(site).text;
        if is_dunder(name) {
            return;
        }
        if group != IdentifierGroup::Attribute && self.scopes[scope].globals.contains(name) {
            return;
        }
        let key = (scope, name.clone());
        let b = match self.table.get(&key) {
            Some(&b) => b,
            None => {
                let b = self.bindings.len();
                self.bindings.push(Binding {
                    original_name: name.clone(),
                    group,
                    scope_id: scope,
                    anon_name: String::new(),
                    intro_index: 0,
                });
                self.sites.push(site);
                self.table.insert(key, b);
                b
            }
        };
        self.site_binding[site] = Some(b);
    }

    /// Index of the bracket closing the one opened at `open`, or `limit`.
    fn matching(&self, open: usize, limit: usize) -> usize {
        let mut depth = 0usize;
        for i in open..limit {
            let t = self.tok(i);
            if t.kind != TokenKind::Operator {
                continue;
            }
            match t.text.as_str() {
                "(" | "[" | "{" => depth += 1,
                ")" | "]" | "}" => {
                    depth -= 1;
                    if depth == 0 {
                        return i;
                    }
                }
                _ => {}
            }
        }
        limit
    }

    /// Positions in `[a, b)` at bracket depth zero matching `pred`.
    fn top_level(&self, a: usize, b: usize, pred: impl Fn(&SourceToken) -> bool) -> Vec<usize> {
        let mut depth = 0i32;
        let mut out = Vec::new();
        for i in a..b {
            let t = self.tok(i);
            if t.kind == TokenKind::Operator {
                match t.text.as_str() {
                    "(" | "[" | "{" => {
                        depth += 1;
                        continue;
                    }
                    ")" | "]" | "}" => {
                        depth -= 1;
                        continue;
                    }
                    _ => {}
                }
            }
            if depth == 0 && pred(t) {
                out.push(i);
            }
        }
        out
    }

    fn split_top(&self, a: usize, b: usize, sep: &str) -> Vec<(usize, usize)> {
        let mut parts = Vec::new();
        let mut start = a;
        for p in self.top_level(a, b, |t| t.is_op(sep)) {
            parts.push((start, p));
            start = p + 1;
        }
        parts.push((start, b));
        parts
    }

    /// First pass: scopes, binding sites and the scope of every token.
    fn structure(&mut self) {
        let n = self.toks.len();
        // (scope, body indentation depth); module body has depth 0
        let mut frames: Vec<(usize, usize)> = vec![(0, 0)];
        let mut depth = 0usize;
        let mut pending: Option<usize> = None;
        let mut i = 0;
        while i < n {
            let cur = frames.last().expect("module frame").0;
            match self.tok(i).kind {
                TokenKind::Indent => {
                    depth += 1;
                    if let Some(s) = pending.take() {
                        frames.push((s, depth));
                    }
                    self.scope_at[i] = frames.last().expect("frame").0;
                    i += 1;
                }
                TokenKind::Dedent => {
                    depth = depth.saturating_sub(1);
                    while frames.len() > 1 && frames.last().expect("frame").1 > depth {
                        frames.pop();
                    }
                    self.scope_at[i] = frames.last().expect("frame").0;
                    i += 1;
                }
                TokenKind::Newline | TokenKind::EndMarker => {
                    self.scope_at[i] = cur;
                    i += 1;
                }
                _ => {
                    let mut end = i;
                    while end < n && self.tok(end).kind != TokenKind::Newline {
                        end += 1;
                    }
                    for s in &mut self.scope_at[i..end] {
                        *s = cur;
                    }
                    if end < n {
                        self.scope_at[end] = cur;
                    }
                    pending = self.logical_line(i, end, cur);
                    i = end + 1;
                }
            }
        }
    }

    /// Handles one logical line; returns the scope opened by a `def`/`class`
    /// header whose body starts on the next line.
    fn logical_line(&mut self, start: usize, end: usize, scope: usize) -> Option<usize> {
        let mut a = start;
        if self.tok(a).is_op("@") {
            if end - start == 2 && self.tok(a + 1).text == "staticmethod" {
                self.static_next = true;
            }
            return None;
        }
        if self.tok(a).is_keyword("async") && a + 1 < end {
            a += 1;
        }
        let first = self.tok(a);
        if first.is_keyword("def") || first.is_keyword("class") {
            let (new_scope, colon) = if first.is_keyword("def") {
                self.def_header(a, end, scope)
            } else {
                self.class_header(a, end, scope)
            };
            self.static_next = false;
            let Some(new_scope) = new_scope else {
                return None;
            };
            if colon + 1 >= end {
                return Some(new_scope);
            }
            for s in &mut self.scope_at[colon + 1..end] {
                *s = new_scope;
            }
            self.simple_statements(colon + 1, end, new_scope);
            return None;
        }
        if first.kind == TokenKind::Keyword && COMPOUND_KEYWORDS.contains(&first.text.as_str()) {
            let colon = self
                .top_level(a, end, |t| t.is_op(":"))
                .first()
                .copied()
                .unwrap_or(end);
            self.comprehensions(a, colon, scope);
            match first.text.as_str() {
                "for" => {
                    let stop = self.top_level(a + 1, colon, |t| t.is_keyword("in"));
                    let stop = stop.first().copied().unwrap_or(colon);
                    self.targets(a + 1, stop, scope, IdentifierGroup::Variable);
                }
                "with" => {
                    for (x, y) in self.split_top(a + 1, colon, ",") {
                        if let Some(&as_pos) = self.top_level(x, y, |t| t.is_keyword("as")).first() {
                            self.targets(as_pos + 1, y, scope, IdentifierGroup::Variable);
                        }
                    }
                }
                _ => {}
            }
            if colon + 1 < end {
                self.simple_statements(colon + 1, end, scope);
            }
            return None;
        }
        self.simple_statements(start, end, scope);
        None
    }

    fn def_header(&mut self, d: usize, end: usize, scope: usize) -> (Option<usize>, usize) {
        let name = d + 1;
        if name >= end || self.tok(name).kind != TokenKind::Name {
            return (None, end);
        }
        self.bind(scope, name, IdentifierGroup::Function);
        let fscope = self.new_scope(ScopeKind::Function, scope);
        let is_method = self.scopes[scope].kind == ScopeKind::Class && !self.static_next;
        let open = name + 1;
        if open >= end || !self.tok(open).is_op("(") {
            return (Some(fscope), end);
        }
        let close = self.matching(open, end);
        let mut first_param = true;
        for (x, y) in self.split_top(open + 1, close, ",") {
            let mut p = x;
            while p < y && (self.tok(p).is_op("*") || self.tok(p).is_op("**")) {
                p += 1;
            }
            if p >= y || self.tok(p).kind != TokenKind::Name {
                continue;
            }
            if first_param && is_method {
                self.scopes[fscope].receiver = Some(self.tok(p).text.clone());
            } else {
                self.scope_at[p] = fscope;
                self.bind(fscope, p, IdentifierGroup::Argument);
            }
            first_param = false;
        }
        let colon = self
            .top_level(close.min(end), end, |t| t.is_op(":"))
            .first()
            .copied()
            .unwrap_or(end);
        (Some(fscope), colon)
    }

    fn class_header(&mut self, c: usize, end: usize, scope: usize) -> (Option<usize>, usize) {
        let name = c + 1;
        if name >= end || self.tok(name).kind != TokenKind::Name {
            return (None, end);
        }
        self.bind(scope, name, IdentifierGroup::Class);
        let cscope = self.new_scope(ScopeKind::Class, scope);
        let colon = self
            .top_level(name, end, |t| t.is_op(":"))
            .first()
            .copied()
            .unwrap_or(end);
        (Some(cscope), colon)
    }

    fn simple_statements(&mut self, a: usize, b: usize, scope: usize) {
        for (x, y) in self.split_top(a, b, ";") {
            if x >= y {
                continue;
            }
            self.comprehensions(x, y, scope);
            let first = self.tok(x);
            if first.is_keyword("import") || first.is_keyword("from") {
                continue;
            }
            if first.is_keyword("global") || first.is_keyword("nonlocal") {
                for i in x + 1..y {
                    if self.tok(i).kind == TokenKind::Name {
                        let name = self.tok(i).text.clone();
                        self.scopes[scope].globals.insert(name);
                    }
                }
                continue;
            }
            let eqs = self.top_level(x, y, |t| t.is_op("="));
            let mut seg_start = x;
            for eq in eqs {
                let annot = self.top_level(seg_start, eq, |t| t.is_op(":"));
                let seg_end = annot.first().copied().unwrap_or(eq);
                self.targets(seg_start, seg_end, scope, IdentifierGroup::Variable);
                seg_start = eq + 1;
            }
        }
    }

    /// Binds the assignment-target list `[a, b)`.
    fn targets(&mut self, a: usize, b: usize, scope: usize, group: IdentifierGroup) {
        for (x, y) in self.split_top(a, b, ",") {
            let mut x = x;
            while x < y && self.tok(x).is_op("*") {
                x += 1;
            }
            if x >= y {
                continue;
            }
            let t = self.tok(x);
            if y - x == 1 && t.kind == TokenKind::Name {
                self.bind(scope, x, group);
            } else if (t.is_op("(") || t.is_op("[")) && self.matching(x, y) == y - 1 {
                self.targets(x + 1, y - 1, scope, group);
            } else if y - x == 3
                && t.kind == TokenKind::Name
                && self.tok(x + 1).is_op(".")
                && self.tok(x + 2).kind == TokenKind::Name
            {
                if let Some((recv, class_scope)) = self.receiver_of(scope) {
                    if recv == t.text {
                        self.bind(class_scope, x + 2, IdentifierGroup::Attribute);
                    }
                }
            }
        }
    }

    /// Comprehension scopes for every bracketed `for` in `[a, b)`.
    fn comprehensions(&mut self, a: usize, b: usize, _scope: usize) {
        let mut stack: Vec<(usize, Option<usize>)> = Vec::new();
        let mut i = a;
        while i < b {
            let t = self.tok(i);
            if t.kind == TokenKind::Operator {
                match t.text.as_str() {
                    "(" | "[" | "{" => stack.push((i, None)),
                    ")" | "]" | "}" => {
                        stack.pop();
                    }
                    _ => {}
                }
            } else if t.is_keyword("for") && !stack.is_empty() {
                let (open, existing) = *stack.last().expect("non-empty");
                let close = self.matching(open, b);
                let comp = match existing {
                    Some(s) => s,
                    None => {
                        let parent = self.scope_at[open];
                        let s = self.new_scope(ScopeKind::Comprehension, parent);
                        for sa in &mut self.scope_at[open + 1..close] {
                            *sa = s;
                        }
                        stack.last_mut().expect("non-empty").1 = Some(s);
                        s
                    }
                };
                let in_pos = self
                    .top_level(i + 1, close, |t| t.is_keyword("in"))
                    .first()
                    .copied()
                    .unwrap_or(close);
                self.targets(i + 1, in_pos, comp, IdentifierGroup::Variable);
            }
            i += 1;
        }
    }

    /// Receiver name and class scope of the method enclosing `scope`.
    fn receiver_of(&self, scope: usize) -> Option<(String, usize)> {
        let mut s = scope;
        loop {
            let sc = &self.scopes[s];
            match sc.kind {
                ScopeKind::Function | ScopeKind::Comprehension => {
                    if let Some(r) = &sc.receiver {
                        return sc.parent.map(|p| (r.clone(), p));
                    }
                    s = sc.parent?;
                }
                _ => return None,
            }
        }
    }

    fn resolve(&self) -> Vec<Option<usize>> {
        let n = self.toks.len();
        let mut out = vec![None; n];
        let mut brackets: Vec<&str> = Vec::new();
        for i in 0..n {
            let t = self.tok(i);
            match t.kind {
                TokenKind::Newline => brackets.clear(),
                TokenKind::Operator => match t.text.as_str() {
                    "(" | "[" | "{" => brackets.push(t.text.as_str()),
                    ")" | "]" | "}" => {
                        brackets.pop();
                    }
                    _ => {}
                },
                _ => {}
            }
            if t.kind != TokenKind::Name {
                continue;
            }
            if let Some(b) = self.site_binding[i] {
                out[i] = Some(b);
                continue;
            }
            if i > 0 && self.tok(i - 1).is_op(".") {
                out[i] = self.resolve_member(i);
                continue;
            }
            let keyword_arg = i > 0
                && i + 1 < n
                && self.tok(i + 1).is_op("=")
                && (self.tok(i - 1).is_op("(") || self.tok(i - 1).is_op(","))
                && brackets.last() == Some(&"(");
            if keyword_arg {
                continue;
            }
            out[i] = self.lookup(i);
        }
        out
    }

    fn resolve_member(&self, i: usize) -> Option<usize> {
        if i < 2 {
            return None;
        }
        let recv = self.tok(i - 2);
        if recv.kind != TokenKind::Name || (i >= 3 && self.tok(i - 3).is_op(".")) {
            return None;
        }
        let (name, class_scope) = self.receiver_of(self.scope_at[i - 2])?;
        if name != recv.text {
            return None;
        }
        self.table.get(&(class_scope, self.tok(i).text.clone())).copied()
    }

    fn lookup(&self, i: usize) -> Option<usize> {
        let name = &self.tok(i).text;
        let mut s = self.scope_at[i];
        let mut innermost = true;
        loop {
            let sc = &self.scopes[s];
            let skip = (!innermost && sc.kind == ScopeKind::Class) || sc.globals.contains(name);
            if !skip {
                if let Some(&b) = self.table.get(&(s, name.clone())) {
                    if sc.kind == ScopeKind::Comprehension || self.sites[b] <= i {
                        return Some(b);
                    }
                }
            }
            innermost = false;
            s = sc.parent?;
        }
    }
}

fn assign_names(bindings: &mut [Binding], numbering: Numbering) {
    let mut groups: HashMap<(usize, IdentifierGroup), Vec<usize>> = HashMap::new();
    for (i, b) in bindings.iter().enumerate() {
        groups.entry((b.scope_id, b.group)).or_default().push(i);
    }
    for ((scope, group), mut members) in groups {
        members.sort_by_key(|&i| bindings[i].intro_index);
        let numbers: Vec<usize> = match numbering {
            Numbering::Sequential => (1..=members.len()).collect(),
            Numbering::SeededRandom(seed) => {
                let mix = seed
                    ^ (scope as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
                    ^ (group as u64 + 1).wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
                let mut rng = ChaCha8Rng::seed_from_u64(mix);
                let range = members.len().max(99);
                sample(&mut rng, range, members.len()).into_iter().map(|k| k + 1).collect()
            }
        };
        for (i, num) in members.into_iter().zip(numbers) {
            bindings[i].anon_name = format!("{}{}", group.prefix(), num);
        }
    }
}

/// Symbol table sidecar: `anon_name<TAB>group<TAB>scope_id<TAB>intro_index`.
pub fn write_symbols<W: Write>(mut w: W, symbols: &[Binding]) -> io::Result<()> {
    for b in symbols {
        writeln!(w, "{}\t{}\t{}\t{}", b.anon_name, b.group, b.scope_id, b.intro_index)?;
    }
    Ok(())
}

pub fn read_symbols<R: BufRead>(r: R) -> Result<Vec<Binding>, NormError> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 4 {
            return Err(NormError::Format(format!("expected 4 fields in {line:?}")));
        }
        let num = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| NormError::Format(format!("bad integer {s:?}")))
        };
        out.push(Binding {
            original_name: String::new(),
            group: f[1].parse()?,
            scope_id: num(f[2])?,
            anon_name: f[0].to_string(),
            intro_index: num(f[3])?,
        });
    }
    Ok(out)
}

impl NormalizedFile {
    /// Rebuilds a file from its token stream and symbol sidecar.
    pub fn from_parts(tokens: Vec<SourceToken>, symbols: Vec<Binding>) -> Self {
        let intro_positions = symbols.iter().map(|b| b.intro_index).collect();
        NormalizedFile { tokens, symbols, intro_positions }
    }
}
