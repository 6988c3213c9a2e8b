//! Reading and writing normalized corpora on disk.
//!
//! A normalized corpus is a directory tree of `<project>/<path>.norm` token
//! files, each with a `<path>.sym` symbol table next to it.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use codesuggest::corpus::{EncodedFile, Part, ProjectSplit, SymbolFile, Vocabulary};
use codesuggest::par::{self, Execution};
use codesuggest::pylex::{read_tokens, write_tokens};
use codesuggest::pynorm::{read_symbols, write_symbols, NormalizedFile};
use walkdir::WalkDir;

pub const TOKEN_EXT: &str = "norm";
pub const SYMBOL_EXT: &str = "sym";

pub struct CorpusFile {
    pub project: String,
    pub symbols: SymbolFile,
}

/// Project of a relative path: its first component, or the file stem for
/// files at the root.
pub fn project_of(rel: &Path) -> String {
    let mut comps = rel.components();
    let first = comps.next().map(|c| c.as_os_str().to_string_lossy().into_owned()).unwrap_or_default();
    if comps.next().is_some() {
        first
    } else {
        rel.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or(first)
    }
}

/// Files under `root` with extension `ext`, sorted, with their paths
/// relative to `root`.
pub fn list_files(root: &Path, ext: &str) -> Result<Vec<(PathBuf, PathBuf)>> {
    if !root.is_dir() {
        bail!("{} is not a directory", root.display());
    }
    let mut out = Vec::new();
    for entry in WalkDir::new(root).sort_by_file_name() {
        let entry = entry?;
        let path = entry.path();
        if entry.file_type().is_file() && path.extension().is_some_and(|e| e == ext) {
            let rel = path.strip_prefix(root)?.to_path_buf();
            out.push((path.to_path_buf(), rel));
        }
    }
    Ok(out)
}

pub fn read_normalized(token_path: &Path) -> Result<NormalizedFile> {
    let tokens = read_tokens(BufReader::new(File::open(token_path)?))
        .with_context(|| format!("reading {}", token_path.display()))?;
    let sym_path = token_path.with_extension(SYMBOL_EXT);
    let symbols = read_symbols(BufReader::new(
        File::open(&sym_path).with_context(|| format!("opening {}", sym_path.display()))?,
    ))
    .with_context(|| format!("reading {}", sym_path.display()))?;
    Ok(NormalizedFile::from_parts(tokens, symbols))
}

/// Writes `<base>.norm` and `<base>.sym`, creating parent directories.
pub fn write_normalized(base: &Path, file: &NormalizedFile) -> Result<()> {
    if let Some(dir) = base.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(File::create(base.with_extension(TOKEN_EXT))?);
    write_tokens(&mut w, &file.tokens)?;
    w.flush()?;
    let mut w = BufWriter::new(File::create(base.with_extension(SYMBOL_EXT))?);
    write_symbols(&mut w, &file.symbols)?;
    w.flush()?;
    Ok(())
}

pub fn load_corpus(root: &Path, exec: Execution) -> Result<Vec<CorpusFile>> {
    let files = list_files(root, TOKEN_EXT)?;
    if files.is_empty() {
        bail!("no .{TOKEN_EXT} files under {}", root.display());
    }
    par::map(exec, &files, |(path, rel)| {
        let nf = read_normalized(path)?;
        Ok(CorpusFile {
            project: project_of(rel),
            symbols: SymbolFile::from_normalized(&nf),
        })
    })
    .into_iter()
    .collect()
}

pub fn projects(files: &[CorpusFile]) -> Vec<String> {
    let mut p: Vec<String> = files.iter().map(|f| f.project.clone()).collect();
    p.sort();
    p.dedup();
    p
}

/// Files of `part`, or every file when there is no split.
pub fn select<'a>(files: &'a [CorpusFile], split: Option<&ProjectSplit>, part: Part) -> Vec<&'a CorpusFile> {
    files
        .iter()
        .filter(|f| split.is_none_or(|s| s.part_of(&f.project) == Some(part)))
        .collect()
}

pub fn encode(vocab: &Vocabulary, files: &[&CorpusFile]) -> Vec<EncodedFile> {
    files.iter().map(|f| vocab.encode(&f.symbols)).collect()
}

pub fn read_vocab(path: &Path) -> Result<Vocabulary> {
    let f = File::open(path).with_context(|| format!("opening vocabulary {}", path.display()))?;
    Vocabulary::read(BufReader::new(f)).with_context(|| format!("reading vocabulary {}", path.display()))
}

pub fn read_split(path: &Path) -> Result<ProjectSplit> {
    let f = File::open(path).with_context(|| format!("opening split {}", path.display()))?;
    ProjectSplit::read(BufReader::new(f)).with_context(|| format!("reading split {}", path.display()))
}

pub fn write_with<F>(path: &Path, f: F) -> Result<()>
where
    F: FnOnce(&mut BufWriter<File>) -> std::io::Result<()>,
{
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    f(&mut w)?;
    w.flush()?;
    Ok(())
}
