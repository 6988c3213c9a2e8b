//! Fixtures shared by the integration tests and the acceptance runner.
#![allow(dead_code)]

use std::collections::{HashMap, HashSet};

use codesuggest::pylex::{render_flat, tokenize, TokenKind};
use codesuggest::pynorm::{analyze_scopes, normalize, IdentifierGroup, Numbering};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// (name, source, expected flat rendering after normalization).
pub const GOLDEN: [(&str, &str, &str); 20] = [
    (
        "function",
        "def load(path):\n    return path\n",
        "def function1 ( arg1 ) : NEWLINE INDENT return arg1 NEWLINE DEDENT",
    ),
    ("number", "y = 42\n", "var1 = $NUM$ NEWLINE"),
    (
        "class_init_attribute",
        "class A:\n    def __init__(self):\n        self.size = 0\n",
        "class class1 : NEWLINE INDENT def __init__ ( self ) : NEWLINE INDENT \
         self . attribute1 = $NUM$ NEWLINE DEDENT DEDENT",
    ),
    (
        "import",
        "import os\nx = os.getcwd()\n",
        "import os NEWLINE var1 = os . getcwd ( ) NEWLINE",
    ),
    (
        "import_alias",
        "from a.b import c as d\nd(1)\n",
        "from a . b import c as d NEWLINE d ( $NUM$ ) NEWLINE",
    ),
    (
        "comments",
        "# header\nx = 1  # one\nprint(x)\n",
        "var1 = $NUM$ NEWLINE print ( var1 ) NEWLINE",
    ),
    (
        "argument_shadows_global",
        "x = 1\ndef f(x):\n    return x\nprint(x)\n",
        "var1 = $NUM$ NEWLINE def function1 ( arg1 ) : NEWLINE INDENT return arg1 NEWLINE DEDENT \
         print ( var1 ) NEWLINE",
    ),
    (
        "local_shadows_global",
        "n = 0\ndef g():\n    n = 5\n    return n\nn = n + 1\n",
        "var1 = $NUM$ NEWLINE def function1 ( ) : NEWLINE INDENT var1 = $NUM$ NEWLINE \
         return var1 NEWLINE DEDENT var1 = var1 + $NUM$ NEWLINE",
    ),
    (
        "global_statement",
        "count = 0\ndef bump():\n    global count\n    count = count + 1\n",
        "var1 = $NUM$ NEWLINE def function1 ( ) : NEWLINE INDENT global var1 NEWLINE \
         var1 = var1 + $NUM$ NEWLINE DEDENT",
    ),
    (
        "tuple_for_target",
        "for i, v in enumerate(items):\n    total = i * v\n",
        "for var1 , var2 in enumerate ( items ) : NEWLINE INDENT var3 = var1 * var2 NEWLINE DEDENT",
    ),
    (
        "with_as",
        "with open(p) as fh:\n    data = fh.read()\n",
        "with open ( p ) as var1 : NEWLINE INDENT var2 = var1 . read ( ) NEWLINE DEDENT",
    ),
    (
        "attribute_across_methods",
        "class Point:\n    def __init__(self, x):\n        self.x = x\n    def norm(self):\n        return self.x * 2.5\n",
        "class class1 : NEWLINE INDENT def __init__ ( self , arg1 ) : NEWLINE INDENT \
         self . attribute1 = arg1 NEWLINE DEDENT def function1 ( self ) : NEWLINE INDENT \
         return self . attribute1 * $NUM$ NEWLINE DEDENT DEDENT",
    ),
    (
        "keyword_arguments",
        "def f(a, b=1):\n    return a\nf(a=2, b=3)\n",
        "def function1 ( arg1 , arg2 = $NUM$ ) : NEWLINE INDENT return arg1 NEWLINE DEDENT \
         function1 ( a = $NUM$ , b = $NUM$ ) NEWLINE",
    ),
    (
        "nested_functions",
        "def outer(a):\n    def inner(a):\n        return a\n    return inner(a)\n",
        "def function1 ( arg1 ) : NEWLINE INDENT def function1 ( arg1 ) : NEWLINE INDENT \
         return arg1 NEWLINE DEDENT return function1 ( arg1 ) NEWLINE DEDENT",
    ),
    (
        "forward_reference",
        "def a():\n    return b()\ndef b():\n    return 1\n",
        "def function1 ( ) : NEWLINE INDENT return b ( ) NEWLINE DEDENT \
         def function2 ( ) : NEWLINE INDENT return $NUM$ NEWLINE DEDENT",
    ),
    ("dunder", "__all__ = ['x']\n", "__all__ = [ 'x' ] NEWLINE"),
    (
        "number_forms",
        "z = 0x1F + 1e-3 + 3j + 1_000\n",
        "var1 = $NUM$ + $NUM$ + $NUM$ + $NUM$ NEWLINE",
    ),
    (
        "comprehension",
        "squares = [k * k for k in range(10)]\n",
        "var1 = [ var1 * var1 for var1 in range ( $NUM$ ) ] NEWLINE",
    ),
    (
        "classmethod_receiver",
        "class Config:\n    debug = False\n    @classmethod\n    def make(cls, level):\n        cls.level = level\n        return cls()\n",
        "class class1 : NEWLINE INDENT var1 = False NEWLINE @ classmethod NEWLINE \
         def function1 ( cls , arg1 ) : NEWLINE INDENT cls . attribute1 = arg1 NEWLINE \
         return cls ( ) NEWLINE DEDENT DEDENT",
    ),
    (
        "foreign_attribute",
        "import json\ncfg = json.loads(s)\ncfg.name = 'a'\nprint(cfg.name)\n",
        "import json NEWLINE var1 = json . loads ( s ) NEWLINE var1 . name = 'a' NEWLINE \
         print ( var1 . name ) NEWLINE",
    ),
];

/// Normalizes `source` with sequential numbering and renders it flat.
pub fn normalized_flat(source: &str) -> Result<String, String> {
    let toks = tokenize(source, true).map_err(|e| e.to_string())?;
    Ok(render_flat(&normalize(&toks, Numbering::Sequential).tokens))
}

/// Golden cases whose output differs, as `(name, got)`.
pub fn golden_failures() -> Vec<(&'static str, String)> {
    GOLDEN
        .iter()
        .filter_map(|&(name, src, want)| match normalized_flat(src) {
            Ok(got) if got == want => None,
            Ok(got) => Some((name, got)),
            Err(e) => Some((name, e)),
        })
        .collect()
}

const VAR_POOL: [&str; 6] = ["a", "b", "n", "item", "data", "total"];
const FUNC_POOL: [&str; 4] = ["f", "helper", "run", "build"];
const CLASS_POOL: [&str; 3] = ["Node", "Cache", "Store"];
const ATTR_POOL: [&str; 3] = ["size", "parent", "value"];
const BUILTINS: [&str; 3] = ["print", "len", "abs"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Module,
    Function,
    Class,
}

#[derive(Debug)]
struct GenScope {
    parent: Option<usize>,
    kind: Kind,
    bound: Vec<String>,
}

/// A generated file with the binding every NAME token must resolve to.
#[derive(Debug)]
pub struct Fuzzed {
    pub source: String,
    /// One entry per NAME token: its text and the generator scope it is
    /// bound in, or `None` when it must stay untouched.
    pub names: Vec<(String, Option<usize>)>,
    pub groups: HashMap<(usize, String), IdentifierGroup>,
}

struct Generator {
    rng: ChaCha8Rng,
    out: String,
    names: Vec<(String, Option<usize>)>,
    scopes: Vec<GenScope>,
    groups: HashMap<(usize, String), IdentifierGroup>,
}

impl Generator {
    fn indent(&mut self, depth: usize) {
        for _ in 0..depth {
            self.out.push_str("    ");
        }
    }

    fn word(&mut self, s: &str) {
        self.out.push_str(s);
    }

    fn name(&mut self, s: &str, scope: Option<usize>) {
        self.out.push_str(s);
        self.names.push((s.to_string(), scope));
    }

    fn bind(&mut self, scope: usize, name: &str, group: IdentifierGroup) {
        if !self.scopes[scope].bound.iter().any(|b| b == name) {
            self.scopes[scope].bound.push(name.to_string());
        }
        self.groups.entry((scope, name.to_string())).or_insert(group);
        self.name(name, Some(scope));
    }

    fn new_scope(&mut self, parent: usize, kind: Kind) -> usize {
        self.scopes.push(GenScope { parent: Some(parent), kind, bound: Vec::new() });
        self.scopes.len() - 1
    }

    /// Names visible from `scope`, each with the scope it resolves to.
    /// Class scopes are only searched when innermost.
    fn visible(&self, scope: usize) -> Vec<(String, usize)> {
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        let mut s = Some(scope);
        let mut innermost = true;
        while let Some(i) = s {
            let sc = &self.scopes[i];
            if innermost || sc.kind != Kind::Class {
                for n in &sc.bound {
                    if seen.insert(n.clone()) {
                        out.push((n.clone(), i));
                    }
                }
            }
            innermost = false;
            s = sc.parent;
        }
        out
    }

    fn expr(&mut self, scope: usize, exclude: &str, receiver: Option<(&str, usize)>) {
        let terms = self.rng.gen_range(1..=3);
        for t in 0..terms {
            if t > 0 {
                let op = *["+", "-", "*"].choose(&mut self.rng).unwrap();
                self.word(&format!(" {op} "));
            }
            let vis: Vec<(String, usize)> =
                self.visible(scope).into_iter().filter(|(n, _)| n != exclude).collect();
            let attrs: Vec<String> = receiver
                .map(|(_, cls)| {
                    self.scopes[cls]
                        .bound
                        .iter()
                        .filter(|n| ATTR_POOL.contains(&n.as_str()))
                        .cloned()
                        .collect()
                })
                .unwrap_or_default();
            match self.rng.gen_range(0..10) {
                0..=2 => {
                    let n = self.rng.gen_range(0..100);
                    self.word(&n.to_string());
                }
                3 => {
                    let b = *BUILTINS.choose(&mut self.rng).unwrap();
                    self.name(b, None);
                    self.word("(");
                    let n = self.rng.gen_range(0..9);
                    self.word(&format!("{n})"));
                }
                4 if !attrs.is_empty() => {
                    let (recv, cls) = receiver.unwrap();
                    let a = attrs.choose(&mut self.rng).unwrap().clone();
                    self.name(recv, None);
                    self.word(".");
                    self.name(&a, Some(cls));
                }
                _ if !vis.is_empty() => {
                    let (n, s) = vis.choose(&mut self.rng).unwrap().clone();
                    self.name(&n, Some(s));
                }
                _ => self.word("0"),
            }
        }
    }

    fn block(&mut self, scope: usize, depth: usize, receiver: Option<(&str, usize)>) {
        let n = self.rng.gen_range(1..=4);
        for _ in 0..n {
            self.statement(scope, depth, receiver);
        }
    }

    fn statement(&mut self, scope: usize, depth: usize, receiver: Option<(&str, usize)>) {
        let kind = self.scopes[scope].kind;
        let nested = depth < 3;
        self.indent(depth);
        match self.rng.gen_range(0..10) {
            0 | 1 if nested => {
                let f = *FUNC_POOL.choose(&mut self.rng).unwrap();
                self.word("def ");
                self.bind(scope, f, IdentifierGroup::Function);
                let inner = self.new_scope(scope, Kind::Function);
                self.word("(");
                let mut args: Vec<&str> = VAR_POOL.to_vec();
                args.shuffle(&mut self.rng);
                let k = self.rng.gen_range(0..=2);
                for (j, a) in args[..k].iter().enumerate() {
                    if j > 0 {
                        self.word(", ");
                    }
                    self.bind(inner, a, IdentifierGroup::Argument);
                }
                self.word("):\n");
                self.block(inner, depth + 1, None);
                self.indent(depth + 1);
                self.word("return ");
                self.expr(inner, "", None);
                self.word("\n");
            }
            2 if nested && kind == Kind::Module => self.class(scope, depth),
            3 if nested => {
                let v = *VAR_POOL.choose(&mut self.rng).unwrap();
                let fresh = !self.scopes[scope].bound.iter().any(|b| b == v);
                self.word("for ");
                self.bind(scope, v, IdentifierGroup::Variable);
                self.word(" in ");
                self.name("range", None);
                self.word("(");
                self.expr(scope, if fresh { v } else { "" }, receiver);
                self.word("):\n");
                self.block(scope, depth + 1, receiver);
            }
            4 if receiver.is_some() => {
                let (recv, cls) = receiver.unwrap();
                let a = *ATTR_POOL.choose(&mut self.rng).unwrap();
                self.name(recv, None);
                self.word(".");
                if !self.scopes[cls].bound.iter().any(|b| b == a) {
                    self.scopes[cls].bound.push(a.to_string());
                }
                self.groups.entry((cls, a.to_string())).or_insert(IdentifierGroup::Attribute);
                self.name(a, Some(cls));
                self.word(" = ");
                self.expr(scope, "", receiver);
                self.word("\n");
            }
            _ => {
                let v = *VAR_POOL.choose(&mut self.rng).unwrap();
                let fresh = !self.scopes[scope].bound.iter().any(|b| b == v);
                self.bind(scope, v, IdentifierGroup::Variable);
                self.word(" = ");
                self.expr(scope, if fresh { v } else { "" }, receiver);
                self.word("\n");
            }
        }
    }

    fn class(&mut self, scope: usize, depth: usize) {
        let c = *CLASS_POOL.choose(&mut self.rng).unwrap();
        self.word("class ");
        self.bind(scope, c, IdentifierGroup::Class);
        self.word(":\n");
        let cls = self.new_scope(scope, Kind::Class);
        let methods = self.rng.gen_range(1..=3);
        for _ in 0..methods {
            self.indent(depth + 1);
            let m = *FUNC_POOL.choose(&mut self.rng).unwrap();
            self.word("def ");
            self.bind(cls, m, IdentifierGroup::Function);
            let inner = self.new_scope(cls, Kind::Function);
            self.word("(");
            self.name("self", None);
            if self.rng.gen_bool(0.5) {
                let a = *VAR_POOL.choose(&mut self.rng).unwrap();
                self.word(", ");
                self.bind(inner, a, IdentifierGroup::Argument);
            }
            self.word("):\n");
            self.block(inner, depth + 2, Some(("self", cls)));
        }
    }
}

/// Random Python-like file over small name pools, so shadowing and reuse are
/// frequent.
pub fn fuzz_file(seed: u64) -> Fuzzed {
    let mut g = Generator {
        rng: ChaCha8Rng::seed_from_u64(seed),
        out: String::new(),
        names: Vec::new(),
        scopes: vec![GenScope { parent: None, kind: Kind::Module, bound: Vec::new() }],
        groups: HashMap::new(),
    };
    let n = g.rng.gen_range(3..=8);
    for _ in 0..n {
        g.statement(0, 0, None);
    }
    Fuzzed { source: g.out, names: g.names, groups: g.groups }
}

/// Checks alpha-consistency, shadowing, groups and per-scope uniqueness of
/// one generated file against the generator's ground truth.
pub fn check_fuzzed(f: &Fuzzed) -> Result<(), String> {
    let toks = tokenize(&f.source, false).map_err(|e| format!("lex: {e}"))?;
    let analysis = analyze_scopes(&toks);
    let norm = normalize(&toks, Numbering::Sequential);
    let positions: Vec<usize> = (0..toks.len()).filter(|&i| toks[i].kind == TokenKind::Name).collect();
    if positions.len() != f.names.len() {
        return Err(format!("{} NAME tokens, generator emitted {}", positions.len(), f.names.len()));
    }
    let mut label_to_binding: HashMap<(usize, &str), usize> = HashMap::new();
    let mut binding_to_label: HashMap<usize, (usize, &str)> = HashMap::new();
    for (&i, (name, scope)) in positions.iter().zip(&f.names) {
        if toks[i].text != *name {
            return Err(format!("token {i}: {:?} vs generated {name:?}", toks[i].text));
        }
        let res = analysis.resolution[i];
        match (scope, res) {
            (None, None) => {
                if norm.tokens[i].text != *name {
                    return Err(format!("unbound {name} rewritten to {}", norm.tokens[i].text));
                }
            }
            (None, Some(b)) => return Err(format!("{name} at {i} resolved to {:?}", analysis.bindings[b])),
            (Some(s), None) => return Err(format!("{name} at {i} (scope {s}) unresolved")),
            (Some(s), Some(b)) => {
                let binding = &analysis.bindings[b];
                if norm.tokens[i].text != binding.anon_name || binding.original_name != *name {
                    return Err(format!("{name} at {i} rendered as {}", norm.tokens[i].text));
                }
                let want = f.groups[&(*s, name.clone())];
                if binding.group != want {
                    return Err(format!("{name}: group {} expected {want}", binding.group));
                }
                let label = (*s, name.as_str());
                if *label_to_binding.entry(label).or_insert(b) != b {
                    return Err(format!("alpha-consistency: {label:?} maps to two bindings"));
                }
                if *binding_to_label.entry(b).or_insert(label) != label {
                    return Err(format!("shadowing: binding {b} shared by {label:?} and {:?}", binding_to_label[&b]));
                }
            }
        }
    }
    let mut per_scope: HashSet<(usize, &str)> = HashSet::new();
    for b in &analysis.bindings {
        if !per_scope.insert((b.scope_id, b.anon_name.as_str())) {
            return Err(format!("{} not unique in scope {}", b.anon_name, b.scope_id));
        }
    }
    Ok(())
}

/// Brute-force interpolated Modified Kneser-Ney, recomputing every count by
/// scanning the corpus. Grams of the model order use raw counts, shorter
/// grams count distinct left neighbours with the file start as a neighbour.
pub struct MknOracle<'a> {
    files: &'a [Vec<u32>],
    order: usize,
    vocab: usize,
    /// `discounts[k-1]` for k-grams.
    discounts: Vec<[f64; 3]>,
}

impl<'a> MknOracle<'a> {
    pub fn new(files: &'a [Vec<u32>], order: usize, vocab: usize) -> Self {
        let mut o = MknOracle { files, order, vocab, discounts: Vec::new() };
        o.discounts = (1..=order).map(|k| o.estimate(k)).collect();
        o
    }

    fn count(&self, gram: &[u32]) -> u64 {
        let k = gram.len();
        if k == self.order {
            return self.files.iter().map(|f| f.windows(k).filter(|w| *w == gram).count() as u64).sum();
        }
        let mut left: HashSet<Option<u32>> = HashSet::new();
        for f in self.files {
            for s in 0..f.len().saturating_sub(k - 1) {
                if &f[s..s + k] == gram {
                    left.insert(if s == 0 { None } else { Some(f[s - 1]) });
                }
            }
        }
        left.len() as u64
    }

    fn estimate(&self, k: usize) -> [f64; 3] {
        let grams: HashSet<&[u32]> = self.files.iter().flat_map(|f| f.windows(k)).collect();
        let mut n = [0f64; 4];
        for g in grams {
            let c = self.count(g);
            if (1..=4).contains(&c) {
                n[c as usize - 1] += 1.0;
            }
        }
        if n[0] == 0.0 || n[1] == 0.0 {
            return [0.75; 3];
        }
        let y = n[0] / (n[0] + 2.0 * n[1]);
        let d1 = if n[1] > 0.0 { 1.0 - 2.0 * y * n[1] / n[0] } else { 0.75 };
        let d2 = if n[2] > 0.0 { 2.0 - 3.0 * y * n[2] / n[1] } else { 0.75 };
        let d3 = if n[2] > 0.0 && n[3] > 0.0 { 3.0 - 4.0 * y * n[3] / n[2] } else { 0.75 };
        [d1.clamp(0.0, 1.0), d2.clamp(0.0, 1.0), d3.clamp(0.0, 1.0)]
    }

    pub fn prob(&self, context: &[u32], w: u32) -> f64 {
        let h = &context[context.len().saturating_sub(self.order - 1)..];
        let lower = if h.is_empty() { 1.0 / self.vocab as f64 } else { self.prob(&h[1..], w) };
        let d = self.discounts[h.len()];
        let disc = |c: u64| match c {
            0 => 0.0,
            1 => d[0],
            2 => d[1],
            _ => d[2],
        };
        let mut gram = h.to_vec();
        gram.push(0);
        let counts: Vec<u64> = (0..self.vocab as u32)
            .map(|v| {
                *gram.last_mut().unwrap() = v;
                self.count(&gram)
            })
            .collect();
        let total: u64 = counts.iter().sum();
        if total == 0 {
            return lower;
        }
        let t = total as f64;
        let c = counts[w as usize];
        let gamma: f64 = counts.iter().map(|&c| disc(c)).sum::<f64>() / t;
        (c as f64 - disc(c)).max(0.0) / t + gamma * lower
    }

    /// Perplexity over every token but the first of each file.
    pub fn perplexity(&self, eval: &[Vec<u32>]) -> f64 {
        let (mut lp, mut n) = (0.0, 0usize);
        for f in eval {
            for i in 1..f.len() {
                lp += self.prob(&f[..i], f[i]).ln();
                n += 1;
            }
        }
        (-lp / n as f64).exp()
    }
}

/// A small corpus with local structure: `n` tokens over `vocab` ids, cut
/// into files.
pub fn toy_corpus(n: usize, vocab: u32, seed: u64) -> Vec<Vec<u32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut files = Vec::new();
    let mut left = n;
    while left > 0 {
        let len = rng.gen_range(20..=60).min(left);
        let mut f = Vec::with_capacity(len);
        let mut prev = rng.gen_range(0..vocab);
        for _ in 0..len {
            let next = if rng.gen_bool(0.6) { (prev * 3 + 1) % vocab } else { rng.gen_range(0..vocab) };
            f.push(next);
            prev = next;
        }
        files.push(f);
        left -= len;
    }
    files
}
