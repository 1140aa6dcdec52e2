//! On-disk corpus: `corpus.jsonl` (a header line, then one record per
//! utterance) and `features.bin` (frames in the checkpoint layout, one entry
//! per utterance id). The header carries the record count and a SHA-256 over
//! both payloads, so truncation and tampering are detected on load.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::models::Split;
use crate::params::{checkpoint_bytes, read_checkpoint, ParamSet};
use crate::vocab::{TokenBlock, Vocab};

use super::language::{LangId, Utterance};
use super::taskset::{Corpus, DataConfig, Role, Task, TaskSet};

pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const FEATURES_FILE: &str = "features.bin";
const FORMAT: &str = "mtl-corpus";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    records: usize,
    sha256: String,
    config: DataConfig,
    languages: Vec<String>,
    blocks: Vec<TokenBlock>,
    tasks: Vec<TaskHeader>,
}

#[derive(Serialize, Deserialize)]
struct TaskHeader {
    name: String,
    role: Role,
    corpus: Corpus,
}

#[derive(Serialize, Deserialize)]
struct Record {
    task: String,
    split: Split,
    id: u64,
    tokens: Vec<u32>,
    lang_tags: Vec<LangId>,
}

fn digest(records: &[u8], features: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(records);
    h.update(features);
    format!("{:x}", h.finalize())
}

/// Writes `set` (generated from `cfg`) into `dir`.
pub fn dump_corpus(set: &TaskSet, cfg: &DataConfig, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut body = Vec::new();
    let mut feats = ParamSet::new();
    let mut records = 0usize;
    for t in &set.tasks {
        for split in [Split::Train, Split::Val, Split::Test] {
            for u in t.split(split) {
                let rec = Record {
                    task: t.name.clone(),
                    split,
                    id: u.id,
                    tokens: u.tokens.clone(),
                    lang_tags: u.lang_tags.clone(),
                };
                serde_json::to_writer(&mut body, &rec)?;
                body.push(b'\n');
                records += 1;
                if let Some(f) = &u.features {
                    feats.insert(u.id.to_string(), f.clone())?;
                }
            }
        }
    }
    let fbytes = checkpoint_bytes(&feats);
    let header = Header {
        format: FORMAT.into(),
        version: VERSION,
        records,
        sha256: digest(&body, &fbytes),
        config: cfg.clone(),
        languages: set.languages.clone(),
        blocks: set.vocab.blocks.clone(),
        tasks: set
            .tasks
            .iter()
            .map(|t| TaskHeader {
                name: t.name.clone(),
                role: t.role,
                corpus: t.corpus,
            })
            .collect(),
    };
    let mut out = fs::File::create(dir.join(CORPUS_FILE))?;
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n")?;
    out.write_all(&body)?;
    out.sync_all()?;
    fs::write(dir.join(FEATURES_FILE), fbytes)?;
    Ok(())
}

/// Reads a corpus written by [`dump_corpus`], verifying count and digest.
pub fn load_corpus(dir: &Path) -> Result<(TaskSet, DataConfig)> {
    let path = dir.join(CORPUS_FILE);
    let mut reader = BufReader::new(fs::File::open(&path)?);
    let mut first = String::new();
    reader.read_line(&mut first)?;
    let header: Header = serde_json::from_str(first.trim_end())
        .map_err(|e| Error::Corruption(format!("{}: bad header: {e}", path.display())))?;
    if header.format != FORMAT || header.version != VERSION {
        return Err(Error::Corruption(format!(
            "{}: unsupported format {} v{}",
            path.display(),
            header.format,
            header.version
        )));
    }
    let mut body = Vec::new();
    std::io::Read::read_to_end(&mut reader, &mut body)?;
    let fbytes = fs::read(dir.join(FEATURES_FILE))?;
    if digest(&body, &fbytes) != header.sha256 {
        return Err(Error::Corruption(format!("{}: checksum mismatch", dir.display())));
    }
    let feats = read_checkpoint(fbytes.as_slice())?;

    let mut tasks: Vec<Task> = header
        .tasks
        .iter()
        .map(|h| Task {
            name: h.name.clone(),
            role: h.role,
            corpus: h.corpus,
            train: vec![],
            val: vec![],
            test: vec![],
        })
        .collect();
    let mut count = 0usize;
    for (lineno, line) in body.split(|&b| b == b'\n').enumerate() {
        if line.is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_slice(line)
            .map_err(|e| Error::Corruption(format!("record {}: {e}", lineno + 1)))?;
        let task = tasks
            .iter_mut()
            .find(|t| t.name == rec.task)
            .ok_or_else(|| Error::Corruption(format!("record {} names unknown task {}", lineno + 1, rec.task)))?;
        let utt = Utterance {
            id: rec.id,
            tokens: rec.tokens,
            lang_tags: rec.lang_tags,
            features: feats.get(&rec.id.to_string()).cloned(),
        };
        match rec.split {
            Split::Train => task.train.push(utt),
            Split::Val => task.val.push(utt),
            Split::Test => task.test.push(utt),
        }
        count += 1;
    }
    if count != header.records {
        return Err(Error::Corruption(format!(
            "expected {} records, found {count}",
            header.records
        )));
    }
    let set = TaskSet {
        tasks,
        vocab: Vocab::new(header.blocks),
        languages: header.languages,
        feat_dim: header.config.feat_dim,
    };
    set.validate()?;
    Ok((set, header.config))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> DataConfig {
        DataConfig {
            mono_train: 8,
            mono_val: 2,
            mono_test: 2,
            cs_train: 6,
            cs_val: 2,
            cs_test: 2,
            ..DataConfig::default()
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let set = TaskSet::generate(&cfg()).unwrap();
        dump_corpus(&set, &cfg(), dir.path()).unwrap();
        let (back, c) = load_corpus(dir.path()).unwrap();
        assert_eq!(back, set);
        assert_eq!(c, cfg());
    }

    #[test]
    fn truncated_corpus_is_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let set = TaskSet::generate(&cfg()).unwrap();
        dump_corpus(&set, &cfg(), dir.path()).unwrap();
        let p = dir.path().join(CORPUS_FILE);
        let text = fs::read(&p).unwrap();
        fs::write(&p, &text[..text.len() - 40]).unwrap();
        assert!(matches!(load_corpus(dir.path()), Err(Error::Corruption(_))));
    }

    #[test]
    fn flipped_feature_byte_is_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let set = TaskSet::generate(&cfg()).unwrap();
        dump_corpus(&set, &cfg(), dir.path()).unwrap();
        let p = dir.path().join(FEATURES_FILE);
        let mut bytes = fs::read(&p).unwrap();
        let n = bytes.len();
        bytes[n - 3] ^= 0x40;
        fs::write(&p, bytes).unwrap();
        assert!(matches!(load_corpus(dir.path()), Err(Error::Corruption(_))));
    }
}
