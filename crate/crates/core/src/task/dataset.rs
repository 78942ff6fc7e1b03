use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::atomic::AtomicUsize;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::example::{make_example, ExampleTriple, Split};
use super::rule::Family;
use super::vocab::{Vocab, VOCAB_SIZE};
use crate::error::{Error, Result};
use crate::model::TokenId;

const FORMAT: &str = "rge-dataset";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub examples: Vec<ExampleTriple>,
}

impl Dataset {
    pub fn new(examples: Vec<ExampleTriple>) -> Self {
        Self { examples }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Attaches a fresh counter of oracle-rationale reads to every example.
    pub fn attach_probe(&mut self) -> Arc<AtomicUsize> {
        let probe = Arc::new(AtomicUsize::new(0));
        for ex in &mut self.examples {
            ex.set_probe(Some(probe.clone()));
        }
        probe
    }

    pub fn detach_probe(&mut self) {
        for ex in &mut self.examples {
            ex.set_probe(None);
        }
    }
}

/// Generation settings for the train and eval splits.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub seed: u64,
    pub n_train: usize,
    pub n_eval: usize,
    pub families: Vec<Family>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_train: 20_000,
            n_eval: 2_000,
            families: Family::ALL.to_vec(),
        }
    }
}

/// Train ids are `0..n_train`, eval ids follow; families rotate by id.
pub fn generate_split(cfg: &DataConfig, split: Split) -> Result<Dataset> {
    if cfg.families.is_empty() {
        return Err(Error::Config("no task families selected".into()));
    }
    let ids = match split {
        Split::Train => 0..cfg.n_train as u64,
        Split::Eval => cfg.n_train as u64..(cfg.n_train + cfg.n_eval) as u64,
    };
    let examples = ids
        .into_par_iter()
        .map(|id| {
            let family = cfg.families[(id % cfg.families.len() as u64) as usize];
            make_example(family, cfg.seed, id, split)
        })
        .collect();
    Ok(Dataset::new(examples))
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
    vocab_fingerprint: String,
    n_examples: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    example_id: u64,
    task_family: Family,
    split: Split,
    query: Vec<TokenId>,
    target: Vec<TokenId>,
    oracle_rationale: Vec<TokenId>,
}

/// One header line, then one JSON record per example.
pub fn write_jsonl(dataset: &Dataset, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let header = Header {
        format: FORMAT.into(),
        version: FORMAT_VERSION,
        vocab_fingerprint: Vocab::new().fingerprint(),
        n_examples: dataset.len(),
    };
    let io = |e| Error::io(path, e);
    serde_json::to_writer(&mut w, &header).map_err(|e| Error::Format(e.to_string()))?;
    w.write_all(b"\n").map_err(io)?;
    for ex in &dataset.examples {
        let rec = Record {
            example_id: ex.example_id,
            task_family: ex.family,
            split: ex.split,
            query: ex.query.clone(),
            target: ex.target.clone(),
            oracle_rationale: ex.rationale_unprobed().to_vec(),
        };
        serde_json::to_writer(&mut w, &rec).map_err(|e| Error::Format(e.to_string()))?;
        w.write_all(b"\n").map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_jsonl(path: &Path) -> Result<Dataset> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines().enumerate();
    let parse_err = |line: usize, msg: String| Error::Parse {
        line: line + 1,
        msg: format!("{}: {msg}", path.display()),
    };
    let (_, first) = lines
        .next()
        .ok_or_else(|| Error::Format(format!("{}: missing header line", path.display())))?;
    let first = first.map_err(|e| Error::io(path, e))?;
    let header: Header = serde_json::from_str(&first).map_err(|e| parse_err(0, e.to_string()))?;
    if header.format != FORMAT || header.version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "{}: unsupported dataset format {} v{}",
            path.display(),
            header.format,
            header.version
        )));
    }
    let expected = Vocab::new().fingerprint();
    if header.vocab_fingerprint != expected {
        return Err(Error::Format(format!(
            "{}: vocabulary fingerprint {} does not match {expected}",
            path.display(),
            header.vocab_fingerprint
        )));
    }
    let mut examples = Vec::with_capacity(header.n_examples);
    for (i, line) in lines {
        let line = line.map_err(|e| Error::io(path, e))?;
        let rec: Record = serde_json::from_str(&line).map_err(|e| parse_err(i, e.to_string()))?;
        for seq in [&rec.query, &rec.target, &rec.oracle_rationale] {
            if let Some(&t) = seq
                .iter()
                .find(|&&t| t as usize >= VOCAB_SIZE || Vocab::is_special(t))
            {
                return Err(parse_err(
                    i,
                    format!("token {t} is not allowed in a record body"),
                ));
            }
        }
        examples.push(ExampleTriple::new(
            rec.example_id,
            rec.task_family,
            rec.split,
            rec.query,
            rec.target,
            rec.oracle_rationale,
        ));
    }
    if examples.len() != header.n_examples {
        return Err(Error::Format(format!(
            "{}: header announces {} examples, found {}",
            path.display(),
            header.n_examples,
            examples.len()
        )));
    }
    Ok(Dataset::new(examples))
}
