//! Episode generation from a config and the flat episode file.
//!
//! The file is tab separated. Lines starting with `#` are comments, except
//! the `# dfa-episode` header which carries `n_classes`, `shots` and `dim`.
//! Every other line after the column header is one sample:
//!
//! ```text
//! domain  split      id  label  x0  x1 ...
//! source  source     0   2      ...
//! target  labeled    17  0      ...
//! target  unlabeled  3   4      ...
//! ```
//!
//! For `unlabeled` rows the label column holds the hidden label.

use std::fmt::Write as _;
use std::path::Path;

use dfa_core::datasets::{make_synthetic_episode, make_two_moons_episode, Domain, LabeledExample, MixtureSpec, SSDAEpisode};
use dfa_core::Matrix;

use crate::config::{DatasetKind, ExperimentConfig};
use crate::error::{Error, Result};

const MAGIC: &str = "# dfa-episode v1";
const COLUMNS: &str = "domain\tsplit\tid\tlabel";

/// The episode a run with seed `seed` trains on.
pub fn build_episode(config: &ExperimentConfig, seed: u64) -> Result<SSDAEpisode> {
    let ds = &config.dataset;
    let seed = config.episode_seed(seed);
    let ep = match ds.kind {
        DatasetKind::GaussianMixture => {
            let spec = MixtureSpec {
                n_classes: ds.n_classes,
                dim: ds.dim,
                n_source: ds.n_source,
                n_unlabeled: ds.n_unlabeled,
                shots: ds.shots,
                radius: ds.radius,
                cluster_std: ds.cluster_std,
            };
            make_synthetic_episode(seed, &spec, &config.shift())?
        }
        DatasetKind::TwoMoons => {
            make_two_moons_episode(seed, ds.n_source, ds.n_unlabeled, ds.shots, ds.moon_noise, &config.shift())?
        }
    };
    Ok(ep)
}

fn push_row(out: &mut String, domain: &str, split: &str, id: usize, label: usize, x: &[f64]) {
    write!(out, "{domain}\t{split}\t{id}\t{label}").unwrap();
    for v in x {
        write!(out, "\t{v}").unwrap();
    }
    out.push('\n');
}

/// Renders an episode in the flat format. Floats use the shortest
/// representation that parses back to the same value.
pub fn episode_to_string(ep: &SSDAEpisode) -> String {
    let mut out = String::new();
    writeln!(out, "{MAGIC} n_classes={} shots={} dim={}", ep.n_classes(), ep.shots(), ep.dim()).unwrap();
    let xs: String = (0..ep.dim()).map(|i| format!("\tx{i}")).collect();
    writeln!(out, "{COLUMNS}{xs}").unwrap();
    for ex in ep.source() {
        push_row(&mut out, "source", "source", ex.id, ex.y, &ex.x);
    }
    for ex in ep.target_labeled() {
        push_row(&mut out, "target", "labeled", ex.id, ex.y, &ex.x);
    }
    let u = ep.unlabeled_inputs();
    for i in 0..u.rows() {
        push_row(&mut out, "target", "unlabeled", ep.unlabeled_ids()[i], ep.hidden_labels()[i], u.row(i));
    }
    out
}

pub fn write_episode(ep: &SSDAEpisode, path: &Path) -> Result<()> {
    std::fs::write(path, episode_to_string(ep)).map_err(|e| Error::io(path, e))
}

fn header_field(header: &str, name: &str) -> Option<usize> {
    header.split_whitespace().find_map(|tok| tok.strip_prefix(name)?.strip_prefix('=')?.parse().ok())
}

/// Parses the flat format; `path` is only used in error messages.
pub fn parse_episode(text: &str, path: &Path) -> Result<SSDAEpisode> {
    let err = |line: usize, message: String| Error::Format { path: path.to_path_buf(), line, message };
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| err(1, "empty file".into()))?;
    if !header.starts_with(MAGIC) {
        return Err(err(1, format!("expected `{MAGIC}` header")));
    }
    let field = |name: &str| header_field(header, name).ok_or_else(|| err(1, format!("header lacks `{name}=`")));
    let (n_classes, shots, dim) = (field("n_classes")?, field("shots")?, field("dim")?);

    let mut source = Vec::new();
    let mut labeled = Vec::new();
    let mut unlabeled = Vec::new();
    let mut ids = Vec::new();
    let mut hidden = Vec::new();
    for (i, line) in lines {
        let n = i + 1;
        if line.trim().is_empty() || line.starts_with('#') || line.starts_with(COLUMNS) {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 4 + dim {
            return Err(err(n, format!("expected {} columns, found {}", 4 + dim, cols.len())));
        }
        let id: usize = cols[2].parse().map_err(|_| err(n, format!("bad id `{}`", cols[2])))?;
        let label: usize = cols[3].parse().map_err(|_| err(n, format!("bad label `{}`", cols[3])))?;
        let x = cols[4..]
            .iter()
            .map(|s| s.parse::<f64>().map_err(|_| err(n, format!("bad value `{s}`"))))
            .collect::<Result<Vec<f64>>>()?;
        match (cols[0], cols[1]) {
            ("source", "source") => source.push(LabeledExample { x, y: label, domain: Domain::Source, id }),
            ("target", "labeled") => labeled.push(LabeledExample { x, y: label, domain: Domain::Target, id }),
            ("target", "unlabeled") => {
                unlabeled.extend(x);
                ids.push(id);
                hidden.push(label);
            }
            (d, s) => return Err(err(n, format!("unknown domain/split `{d}/{s}`"))),
        }
    }
    let u = Matrix::from_vec(ids.len(), dim, unlabeled);
    SSDAEpisode::from_parts(n_classes, shots, source, labeled, u, ids, hidden)
        .map_err(|e| err(0, format!("inconsistent episode: {e}")))
}

pub fn read_episode(path: &Path) -> Result<SSDAEpisode> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_episode(&text, path)
}
