//! Line-oriented interactive suggestion session.

use std::io::{self, BufRead, Write};

use codesuggest::corpus::Vocabulary;
use codesuggest::neural::Session;

const HELP: &str = "enter tokens separated by spaces; :suggest [M] [beam], :reset, :quit";

/// Reads tokens line by line, feeding each to the session, and prints the
/// top five next tokens (and λ for pointer models) after every line.
pub fn run<R: BufRead, W: Write>(
    session: &mut Session<'_, f32>,
    vocab: &Vocabulary,
    input: R,
    mut out: W,
    m: usize,
    beam: usize,
) -> io::Result<()> {
    writeln!(out, "{HELP}")?;
    for line in input.lines() {
        let line = line?;
        let line = line.trim();
        match line.split_whitespace().next() {
            None => continue,
            Some(":quit") | Some(":q") => break,
            Some(":reset") => {
                session.reset();
                writeln!(out, "state cleared")?;
                continue;
            }
            Some(":suggest") => {
                let mut args = line.split_whitespace().skip(1).map(|v| v.parse::<usize>());
                let m = args.next().and_then(Result::ok).unwrap_or(m).max(1);
                let beam = args.next().and_then(Result::ok).unwrap_or(beam).max(1);
                match session.suggest(m, beam) {
                    Ok(s) => writeln!(out, "{}  (log p = {:.4})", vocab.decode(&s.tokens).join(" "), s.logprob)?,
                    Err(e) => writeln!(out, "{e}")?,
                }
                continue;
            }
            Some(cmd) if cmd.starts_with(':') => {
                writeln!(out, "unknown command {cmd}; {HELP}")?;
                continue;
            }
            Some(_) => {}
        }
        for tok in line.split_whitespace() {
            let id = match vocab.get(tok) {
                Some(id) => id,
                None => {
                    log::warn!("unknown token {tok:?} read as $OOV$");
                    writeln!(out, "warning: unknown token {tok:?} read as $OOV$")?;
                    vocab.oov_id()
                }
            };
            session.feed(id);
        }
        for (rank, (id, p)) in session.top_k(5).into_iter().enumerate() {
            writeln!(out, "{:>2}. {:<20} {:.4}", rank + 1, vocab.token(id), p)?;
        }
        if let Some(ptr) = session.last().and_then(|o| o.pointer.as_ref()) {
            writeln!(out, "lambda: lm {:.4} pointer {:.4}", ptr.lambda[0], ptr.lambda[1])?;
        }
        out.flush()?;
    }
    Ok(())
}
