//! On-disk artifacts of a run: checkpoints, metrics and bank-event streams,
//! and target-domain embeddings.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use dfa_core::datasets::SSDAEpisode;
use dfa_core::membank::{BankRecord, DynamicBank, IntermediateBank};
use dfa_core::model::{Mlp, Model};
use dfa_core::trainer::{MetricsRecord, TrainState};
use dfa_core::Matrix;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "dfa-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Model parameters and bank state at one iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    /// Hash of the resolved config that produced the run.
    pub config_hash: String,
    pub seed: u64,
    pub iteration: usize,
    pub model: Model<Mlp>,
    pub bank: DynamicBank,
    pub intermediate: IntermediateBank,
}

impl Checkpoint {
    pub fn capture(state: &TrainState, config_hash: &str, seed: u64) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config_hash: config_hash.into(),
            seed,
            iteration: state.iteration,
            model: state.model.clone(),
            bank: state.bank.clone(),
            intermediate: state.intermediate.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint =
            serde_json::from_str(&text).map_err(|e| Error::Json { path: path.into(), message: e.to_string() })?;
        let bad = |message: String| Error::Json { path: path.into(), message };
        if ck.format != CHECKPOINT_FORMAT {
            return Err(bad(format!("not a checkpoint (format `{}`)", ck.format)));
        }
        if ck.version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported checkpoint version {}", ck.version)));
        }
        let shapes_ok = ck.model.backbone.layers.iter().all(|l| consistent(&l.weight) && l.bias.len() == l.weight.rows())
            && consistent(&ck.model.classifier.weight)
            && consistent(ck.bank.prototypes_ref())
            && ck.model.backbone.layers.windows(2).all(|w| w[1].weight.cols() == w[0].weight.rows())
            && ck.model.classifier.weight.cols() == ck.model.feature_dim();
        if !shapes_ok {
            return Err(bad("checkpoint tensors have inconsistent shapes".into()));
        }
        Ok(ck)
    }
}

fn consistent(m: &Matrix) -> bool {
    m.as_slice().len() == m.rows() * m.cols()
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Json { path: path.into(), message: e.to_string() })
}

/// Append-only writer of one JSON object per line.
#[derive(Debug)]
pub struct JsonlWriter {
    out: BufWriter<File>,
    path: std::path::PathBuf,
}

impl JsonlWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(JsonlWriter { out: BufWriter::new(f), path: path.into() })
    }

    pub fn push<T: Serialize>(&mut self, value: &T) -> Result<()> {
        serde_json::to_writer(&mut self.out, value).expect("serializable");
        self.out.write_all(b"\n").map_err(|e| Error::io(&self.path, e))
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let v = serde_json::from_str(&line)
            .map_err(|e| Error::Format { path: path.into(), line: i + 1, message: e.to_string() })?;
        out.push(v);
    }
    Ok(out)
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    read_jsonl(path)
}

pub fn read_bank_log(path: &Path) -> Result<Vec<BankRecord>> {
    read_jsonl(path)
}

/// One exported target sample.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRecord {
    /// `labeled` or `unlabeled`.
    pub split: String,
    pub id: usize,
    /// True label; hidden from training for unlabeled samples.
    pub label: usize,
    pub input: Vec<f64>,
    pub feature: Vec<f64>,
}

/// Features of every target sample, labeled first.
pub fn embeddings(model: &Model<Mlp>, ep: &SSDAEpisode) -> Result<Vec<EmbeddingRecord>> {
    let labeled = ep.target_labeled();
    let xl = Matrix::from_rows(ep.dim(), labeled.iter().map(|e| e.x.as_slice()));
    let fl = model.forward(&xl)?.features;
    let fu = model.forward(ep.unlabeled_inputs())?.features;
    let mut out = Vec::with_capacity(labeled.len() + fu.rows());
    for (i, ex) in labeled.iter().enumerate() {
        out.push(EmbeddingRecord {
            split: "labeled".into(),
            id: ex.id,
            label: ex.y,
            input: ex.x.clone(),
            feature: fl.row(i).to_vec(),
        });
    }
    for i in 0..fu.rows() {
        out.push(EmbeddingRecord {
            split: "unlabeled".into(),
            id: ep.unlabeled_ids()[i],
            label: ep.hidden_labels()[i],
            input: ep.unlabeled_inputs().row(i).to_vec(),
            feature: fu.row(i).to_vec(),
        });
    }
    Ok(out)
}

/// Tab-separated: `split id label x0.. m0..`, with a header row.
pub fn embeddings_to_string(records: &[EmbeddingRecord]) -> String {
    let (din, dm) = records.first().map_or((0, 0), |r| (r.input.len(), r.feature.len()));
    let mut out = String::from("split\tid\tlabel");
    (0..din).for_each(|i| write!(out, "\tx{i}").unwrap());
    (0..dm).for_each(|i| write!(out, "\tm{i}").unwrap());
    out.push('\n');
    for r in records {
        write!(out, "{}\t{}\t{}", r.split, r.id, r.label).unwrap();
        for v in r.input.iter().chain(&r.feature) {
            write!(out, "\t{v}").unwrap();
        }
        out.push('\n');
    }
    out
}

pub fn write_embeddings(records: &[EmbeddingRecord], path: &Path) -> Result<()> {
    std::fs::write(path, embeddings_to_string(records)).map_err(|e| Error::io(path, e))
}

pub fn read_embeddings(path: &Path) -> Result<Vec<EmbeddingRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let err = |line: usize, message: String| Error::Format { path: path.into(), line, message };
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().ok_or_else(|| err(1, "empty file".into()))?.split('\t').collect();
    let din = header.iter().filter(|h| h.starts_with('x')).count();
    let dm = header.iter().filter(|h| h.starts_with('m')).count();
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let n = i + 2;
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 + din + dm {
            return Err(err(n, format!("expected {} columns, found {}", 3 + din + dm, cols.len())));
        }
        let nums = cols[3..]
            .iter()
            .map(|s| s.parse::<f64>().map_err(|_| err(n, format!("bad value `{s}`"))))
            .collect::<Result<Vec<f64>>>()?;
        out.push(EmbeddingRecord {
            split: cols[0].to_string(),
            id: cols[1].parse().map_err(|_| err(n, "bad id".into()))?,
            label: cols[2].parse().map_err(|_| err(n, "bad label".into()))?,
            input: nums[..din].to_vec(),
            feature: nums[din..].to_vec(),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::load_str;
    use crate::dataset::build_episode;
    use dfa_core::trainer::TrainState;

    fn setup() -> (SSDAEpisode, TrainState) {
        let c = load_str("[dataset]\nn_classes = 3\nn_source = 30\nn_unlabeled = 20\nshots = 2\n", "t", &[]).unwrap();
        let ep = build_episode(&c, 1).unwrap();
        let state = TrainState::new(&ep, &c.train_config(1)).unwrap();
        (ep, state)
    }

    #[test]
    fn checkpoint_round_trips_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let (_, state) = setup();
        let ck = Checkpoint::capture(&state, "abc", 1);
        let p = dir.path().join("ck.json");
        ck.save(&p).unwrap();
        let back = Checkpoint::load(&p).unwrap();
        assert_eq!(back, ck);
        let a: Vec<u64> = ck.model.params().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u64> = back.model.params().iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn checkpoint_rejects_foreign_files() {
        let dir = tempfile::tempdir().unwrap();
        let (_, state) = setup();
        let mut ck = Checkpoint::capture(&state, "abc", 1);
        ck.version = 99;
        let p = dir.path().join("ck.json");
        ck.save(&p).unwrap();
        assert!(Checkpoint::load(&p).unwrap_err().to_string().contains("version"));
        std::fs::write(&p, "{}").unwrap();
        assert!(Checkpoint::load(&p).is_err());
    }

    #[test]
    fn embeddings_are_complete_and_unit_norm() {
        let (ep, state) = setup();
        let recs = embeddings(&state.model, &ep).unwrap();
        assert_eq!(recs.len(), ep.target_labeled().len() + ep.n_unlabeled());
        for r in &recs {
            let n: f64 = r.feature.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("emb.tsv");
        write_embeddings(&recs, &p).unwrap();
        assert_eq!(read_embeddings(&p).unwrap(), recs);
    }

    #[test]
    fn jsonl_reports_bad_lines() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        std::fs::write(&p, "{\"a\":1}\nnot json\n").unwrap();
        let err = read_jsonl::<serde_json::Value>(&p).unwrap_err().to_string();
        assert!(err.contains(":2:"), "{err}");
    }
}
