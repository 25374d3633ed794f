use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Behavior {
    pub pic_id: u64,
    pub category: u32,
}

/// Everything the model sees for one impression. Behaviors run oldest to newest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Impression {
    pub user_id: u64,
    pub context_ids: Vec<u64>,
    pub item_id: u64,
    pub pic_id: u64,
    pub category: u32,
    pub behaviors: Vec<Behavior>,
}

impl Impression {
    /// The most recent `limit` behaviors.
    pub fn recent_behaviors(&self, limit: usize) -> &[Behavior] {
        let start = self.behaviors.len().saturating_sub(limit);
        &self.behaviors[start..]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    #[serde(flatten)]
    pub impression: Impression,
    pub label: u8,
}

impl Sample {
    pub fn label_f64(&self) -> f64 {
        f64::from(self.label)
    }
}

pub fn write_jsonl(path: &Path, samples: &[Sample]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for s in samples {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<Sample>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let s: Sample = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), i + 1)))?;
        if s.label > 1 {
            return Err(Error::Format(format!(
                "{}:{}: label must be 0 or 1",
                path.display(),
                i + 1
            )));
        }
        out.push(s);
    }
    Ok(out)
}
