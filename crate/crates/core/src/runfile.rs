//! TREC-style run files: `query_id Q0 doc_id rank score tag`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RunEntry {
    pub query_id: String,
    pub doc_id: String,
    pub rank: usize,
    pub score: f64,
    pub tag: String,
}

impl RunEntry {
    pub fn to_line(&self) -> String {
        format!(
            "{} Q0 {} {} {} {}",
            self.query_id, self.doc_id, self.rank, self.score, self.tag
        )
    }
}

pub fn write_run(path: &Path, entries: &[RunEntry]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for e in entries {
        writeln!(w, "{}", e.to_line())?;
    }
    w.flush()?;
    Ok(())
}

pub fn parse_run_line(line: &str) -> std::result::Result<RunEntry, String> {
    let fields: Vec<&str> = line.split_whitespace().collect();
    if fields.len() != 6 {
        return Err(format!("expected 6 fields, found {}", fields.len()));
    }
    let rank = fields[3]
        .parse()
        .map_err(|_| format!("bad rank '{}'", fields[3]))?;
    let score = fields[4]
        .parse()
        .map_err(|_| format!("bad score '{}'", fields[4]))?;
    Ok(RunEntry {
        query_id: fields[0].to_owned(),
        doc_id: fields[2].to_owned(),
        rank,
        score,
        tag: fields[5].to_owned(),
    })
}

pub fn read_run(path: &Path) -> Result<Vec<RunEntry>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_run_line(&line).map_err(|message| Error::Malformed {
            path: PathBuf::from(path),
            line: i + 1,
            message,
        })?);
    }
    Ok(out)
}
