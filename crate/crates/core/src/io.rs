//! File formats: graph files, flat JSON configs, checkpoints, history CSVs.
//!
//! Graph files are line-oriented UTF-8:
//!
//! ```text
//! N M D C
//! u v                      (M lines, 0-indexed)
//! label k i1:v1 ... ik:vk  (N lines; label -1 when C = 0)
//! ```
//!
//! Feature indices on a node line are strictly increasing and below `D`.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::diff::Matrix;
use crate::encoder::{EncoderParams, PARAM_NAMES};
use crate::error::{Error, Result};
use crate::graph::AttributedGraph;
use crate::trainer::{EpochRecord, TrainConfig, TrainHistory};

struct Lines<R> {
    inner: std::io::Lines<BufReader<R>>,
    path: PathBuf,
    line: usize,
}

impl<R: Read> Lines<R> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.clone(),
            line: self.line,
            msg: msg.into(),
        }
    }

    /// Next non-blank line, or an error naming `what` at end of input.
    fn next(&mut self, what: &str) -> Result<String> {
        loop {
            self.line += 1;
            match self.inner.next() {
                None => return Err(self.err(format!("unexpected end of file, expected {what}"))),
                Some(Err(e)) => return Err(self.err(e.to_string())),
                Some(Ok(l)) if l.trim().is_empty() => continue,
                Some(Ok(l)) => return Ok(l),
            }
        }
    }

    fn rest_is_blank(&mut self) -> Result<()> {
        for l in self.inner.by_ref() {
            self.line += 1;
            let l = l.map_err(|e| Error::Parse {
                path: self.path.clone(),
                line: self.line,
                msg: e.to_string(),
            })?;
            if !l.trim().is_empty() {
                return Err(self.err("trailing content after the last node line"));
            }
        }
        Ok(())
    }
}

fn parse_num<T: std::str::FromStr>(lines: &Lines<impl Read>, tok: &str, what: &str) -> Result<T> {
    tok.parse()
        .map_err(|_| lines.err(format!("bad {what} {tok:?}")))
}

/// Parses a graph from `reader`; `path` only labels error messages.
pub fn parse_graph(reader: impl Read, path: &Path) -> Result<AttributedGraph> {
    let mut lines = Lines {
        inner: BufReader::new(reader).lines(),
        path: path.to_path_buf(),
        line: 0,
    };
    let header = lines.next("header")?;
    let h: Vec<&str> = header.split_whitespace().collect();
    if h.len() != 4 {
        return Err(lines.err(format!("header needs 4 fields `N M D C`, got {}", h.len())));
    }
    let n: usize = parse_num(&lines, h[0], "node count")?;
    let m: usize = parse_num(&lines, h[1], "edge count")?;
    let d: usize = parse_num(&lines, h[2], "feature dim")?;
    let c: usize = parse_num(&lines, h[3], "class count")?;

    let mut edges = Vec::with_capacity(m);
    let mut seen = std::collections::HashSet::with_capacity(m);
    for _ in 0..m {
        let l = lines.next("edge line")?;
        let t: Vec<&str> = l.split_whitespace().collect();
        if t.len() != 2 {
            return Err(lines.err("edge line needs `u v`"));
        }
        let u: usize = parse_num(&lines, t[0], "endpoint")?;
        let v: usize = parse_num(&lines, t[1], "endpoint")?;
        if u >= n || v >= n {
            return Err(lines.err(format!("endpoint {} out of range for {n} nodes", u.max(v))));
        }
        if u == v {
            return Err(lines.err(format!("self-loop on node {u}")));
        }
        if !seen.insert((u.min(v), u.max(v))) {
            return Err(lines.err(format!("duplicate edge {u} {v}")));
        }
        edges.push((u, v));
    }

    let mut features = Matrix::zeros(n, d);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let l = lines.next("node line")?;
        let mut t = l.split_whitespace();
        let label: i64 = parse_num(&lines, t.next().unwrap_or(""), "label")?;
        match (c, label) {
            (0, -1) => {}
            (0, _) => return Err(lines.err("label must be -1 when the class count is 0")),
            (_, l) if l < 0 || l as usize >= c => {
                return Err(lines.err(format!("label {l} outside 0..{c}")))
            }
            (_, l) => labels.push(l as usize),
        }
        let k: usize = parse_num(&lines, t.next().unwrap_or(""), "feature count")?;
        let mut prev: Option<usize> = None;
        let mut count = 0;
        for tok in t {
            let (j, v) = tok
                .split_once(':')
                .ok_or_else(|| lines.err(format!("malformed feature token {tok:?}")))?;
            let j: usize = parse_num(&lines, j, "feature index")?;
            let v: f64 = parse_num(&lines, v, "feature value")?;
            if j >= d {
                return Err(lines.err(format!("feature index {j} >= dim {d}")));
            }
            if prev.is_some_and(|p| j <= p) {
                return Err(lines.err(format!("feature index {j} not strictly increasing")));
            }
            if !v.is_finite() {
                return Err(lines.err(format!("non-finite feature value {v}")));
            }
            prev = Some(j);
            features[(i, j)] = v;
            count += 1;
        }
        if count != k {
            return Err(lines.err(format!("declared {k} feature tokens, found {count}")));
        }
    }
    lines.rest_is_blank()?;

    let g = AttributedGraph::new(n, edges, features, (c > 0).then_some(labels))?;
    if c > 0 {
        g.with_num_classes(c)
    } else {
        Ok(g)
    }
}

pub fn load_graph_file(path: &Path) -> Result<AttributedGraph> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_graph(f, path)
}

/// Serialises `g`; only nonzero features are written.
pub fn format_graph(g: &AttributedGraph) -> String {
    let c = if g.labels().is_some() {
        g.num_classes()
    } else {
        0
    };
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{} {} {} {}",
        g.num_nodes(),
        g.num_edges(),
        g.feature_dim(),
        c
    );
    for &(u, v) in g.edges() {
        let _ = writeln!(s, "{u} {v}");
    }
    let x = g.features();
    for i in 0..g.num_nodes() {
        let label = g.labels().map_or(-1, |l| l[i] as i64);
        let nz: Vec<(usize, f64)> = x
            .row(i)
            .iter()
            .copied()
            .enumerate()
            .filter(|&(_, v)| v != 0.0)
            .collect();
        let _ = write!(s, "{label} {}", nz.len());
        for (j, v) in nz {
            let _ = write!(s, " {j}:{v}");
        }
        s.push('\n');
    }
    s
}

pub fn write_graph_file(path: &Path, g: &AttributedGraph) -> Result<()> {
    write_atomic(path, format_graph(g).as_bytes())
}

/// Writes through a sibling temporary file and a rename, so readers never
/// observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        msg: e.to_string(),
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

/// Loads and validates a flat JSON training config.
pub fn load_config(path: &Path) -> Result<TrainConfig> {
    let cfg: TrainConfig = read_json(path).map_err(|e| match e {
        Error::Parse { msg, .. } => Error::InvalidConfig(format!("{}: {msg}", path.display())),
        other => other,
    })?;
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NamedTensor {
    name: String,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile {
    format: String,
    version: u32,
    config: TrainConfig,
    epochs_completed: usize,
    tensors: Vec<NamedTensor>,
}

const CHECKPOINT_FORMAT: &str = "rgib-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub epochs_completed: usize,
    pub params: EncoderParams,
}

/// JSON checkpoint; floats round-trip exactly.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let tensors = PARAM_NAMES
        .iter()
        .zip(ckpt.params.tensors())
        .map(|(name, m)| NamedTensor {
            name: name.to_string(),
            rows: m.rows(),
            cols: m.cols(),
            data: m.as_slice().to_vec(),
        })
        .collect();
    write_json(
        path,
        &CheckpointFile {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: ckpt.config.clone(),
            epochs_completed: ckpt.epochs_completed,
            tensors,
        },
    )
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let f: CheckpointFile = read_json(path)?;
    let bad = |msg: String| Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        msg,
    };
    if f.format != CHECKPOINT_FORMAT || f.version != CHECKPOINT_VERSION {
        return Err(bad(format!(
            "unsupported checkpoint {} v{}",
            f.format, f.version
        )));
    }
    let names: Vec<&str> = f.tensors.iter().map(|t| t.name.as_str()).collect();
    if names != PARAM_NAMES {
        return Err(bad(format!(
            "expected tensors {PARAM_NAMES:?}, found {names:?}"
        )));
    }
    let tensors = f
        .tensors
        .into_iter()
        .map(|t| Matrix::from_vec(t.rows, t.cols, t.data))
        .collect::<Result<Vec<_>>>()?;
    Ok(Checkpoint {
        config: f.config,
        epochs_completed: f.epochs_completed,
        params: EncoderParams::from_tensors(tensors)?,
    })
}

pub const HISTORY_HEADER: [&str; 7] = [
    "epoch",
    "mi_adv",
    "mi_benign",
    "kl",
    "objective",
    "attack_loss_drop",
    "seconds",
];

pub fn format_history(h: &TrainHistory) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(Vec::new());
    w.write_record(HISTORY_HEADER)?;
    for r in &h.records {
        w.serialize(r)?;
    }
    w.into_inner()
        .map_err(|e| Error::InvalidArgument(e.to_string()))
}

pub fn write_history(path: &Path, h: &TrainHistory) -> Result<()> {
    write_atomic(path, &format_history(h)?)
}

pub fn read_history(path: &Path) -> Result<TrainHistory> {
    let mut r = csv::Reader::from_path(path)?;
    let records = r
        .deserialize::<EpochRecord>()
        .collect::<std::result::Result<_, _>>()?;
    Ok(TrainHistory { records })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: &str) -> Result<AttributedGraph> {
        parse_graph(s.as_bytes(), Path::new("mem"))
    }

    fn line_of(e: Error) -> usize {
        match e {
            Error::Parse { line, .. } => line,
            other => panic!("expected parse error, got {other}"),
        }
    }

    #[test]
    fn single_node() {
        let g = parse("1 0 2 1\n0 1 1:0.5\n").unwrap();
        assert_eq!(g.num_nodes(), 1);
        assert_eq!(g.feature_dim(), 2);
        assert_eq!(g.features().row(0), &[0.0, 0.5]);
        assert_eq!(g.labels(), Some(&[0usize][..]));
    }

    #[test]
    fn errors_carry_line_numbers() {
        assert_eq!(line_of(parse("3 1 1 0\n5 1\n").unwrap_err()), 2);
        assert_eq!(line_of(parse("3 2 1 0\n0 1\n1 0\n").unwrap_err()), 3);
        assert_eq!(line_of(parse("1 0 2 0\n-1 1 1x0.5\n").unwrap_err()), 2);
        assert_eq!(line_of(parse("1 0 3 0\n-1 2 2:1 1:1\n").unwrap_err()), 2);
        assert_eq!(line_of(parse("1 0 2\n").unwrap_err()), 1);
        assert_eq!(line_of(parse("1 0 2 0\n-1 2 0:1\n").unwrap_err()), 2);
        assert_eq!(line_of(parse("2 0 1 2\n0 0\n").unwrap_err()), 3);
        assert_eq!(line_of(parse("1 0 1 2\n2 0\n").unwrap_err()), 2);
    }

    #[test]
    fn graph_round_trip() {
        let x =
            Matrix::from_rows(&[vec![0.1, 0.0], vec![0.0, -2.5e-7], vec![1.0 / 3.0, 4.0]]).unwrap();
        for labels in [Some(vec![0, 2, 1]), None] {
            let g = AttributedGraph::new(3, vec![(2, 0), (0, 1)], x.clone(), labels).unwrap();
            assert_eq!(parse(&format_graph(&g)).unwrap(), g);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        let ckpt = Checkpoint {
            config: TrainConfig {
                alpha: 0.3,
                ..TrainConfig::default()
            },
            epochs_completed: 7,
            params: EncoderParams::init(3, 4, 2, 11).unwrap(),
        };
        save_checkpoint(&path, &ckpt).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), ckpt);
        assert!(!dir.path().join("ckpt.json.tmp").exists());
    }

    #[test]
    fn config_rejects_unknown_keys() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        fs::write(&path, r#"{"alpha": 0.2, "epochz": 3}"#).unwrap();
        assert!(matches!(load_config(&path), Err(Error::InvalidConfig(_))));
        fs::write(&path, r#"{"alpha": 0.2, "epochs": 3}"#).unwrap();
        assert_eq!(load_config(&path).unwrap().epochs, 3);
    }

    #[test]
    fn history_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.csv");
        let h = TrainHistory {
            records: vec![
                EpochRecord {
                    epoch: 0,
                    mi_adv: -1.25,
                    mi_benign: -1.0,
                    kl: Some(0.1),
                    objective: 0.3,
                    attack_loss_drop: 0.0,
                    seconds: 0.5,
                },
                EpochRecord {
                    epoch: 1,
                    mi_adv: 0.1,
                    mi_benign: 0.2,
                    kl: None,
                    objective: 1.0 / 3.0,
                    attack_loss_drop: 1e-9,
                    seconds: 1.0,
                },
            ],
        };
        write_history(&path, &h).unwrap();
        assert_eq!(read_history(&path).unwrap(), h);
    }
}
