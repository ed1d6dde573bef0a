use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{stratified_masks, Graph, Masks};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// On-disk graph layouts accepted by [`load_graph`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "format", rename_all = "snake_case")]
pub enum GraphFormat {
    /// `u,v` edge rows plus `node_id,label,f1,..,fd` feature rows. Headers are
    /// optional. Without a mask file the split is stratified 10/20/70.
    Csv {
        edges: PathBuf,
        features: PathBuf,
        #[serde(default)]
        masks: Option<PathBuf>,
        #[serde(default)]
        n_classes: Option<usize>,
    },
    /// Single JSON document, see [`Bundle`].
    Json { path: PathBuf },
    /// Raw `cora.content` / `cora.cites` pair in `dir`.
    CoraRaw { dir: PathBuf },
}

/// Counts gathered while loading, before canonicalization.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadReport {
    pub edge_rows: usize,
    pub self_loops_dropped: usize,
    pub duplicates_dropped: usize,
    pub rows_rescaled: usize,
}

#[derive(Serialize, Deserialize)]
struct Bundle {
    n_nodes: usize,
    n_classes: usize,
    features: Vec<Vec<f64>>,
    labels: Vec<usize>,
    edges: Vec<(usize, usize)>,
    #[serde(default)]
    train: Vec<usize>,
    #[serde(default)]
    val: Vec<usize>,
    #[serde(default)]
    test: Vec<usize>,
}

const DEFAULT_SPLIT_SEED: u64 = 0;

pub fn load_graph(format: &GraphFormat) -> Result<(Graph, LoadReport)> {
    match format {
        GraphFormat::Csv { edges, features, masks, n_classes } => load_csv(edges, features, masks.as_deref(), *n_classes),
        GraphFormat::Json { path } => load_bundle(path),
        GraphFormat::CoraRaw { dir } => load_cora(dir),
    }
}

/// Writes the JSON bundle layout.
pub fn save_graph(g: &Graph, path: &Path) -> Result<()> {
    let n = g.n_nodes();
    let bundle = Bundle {
        n_nodes: n,
        n_classes: g.n_classes(),
        features: (0..n).map(|i| g.feature(i).to_vec()).collect(),
        labels: g.labels().to_vec(),
        edges: g.edges().to_vec(),
        train: g.masks().train.clone(),
        val: g.masks().val.clone(),
        test: g.masks().test.clone(),
    };
    let text = serde_json::to_string(&bundle)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse { path: path.to_path_buf(), line, msg: msg.into() }
}

/// Non-empty, trimmed lines with 1-based line numbers. A first line that does
/// not start with a digit or sign is taken as a header.
fn data_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(k, l)| (k + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty())
        .filter(|&(k, l)| !(k == 1 && !l.starts_with(|c: char| c.is_ascii_digit() || c == '-' || c == '+')))
}

fn finish(
    report: &mut LoadReport,
    features: Tensor,
    labels: Vec<usize>,
    n_classes: usize,
    edges: Vec<(usize, usize)>,
    masks: Masks,
) -> Result<Graph> {
    report.edge_rows = edges.len();
    report.self_loops_dropped = edges.iter().filter(|(u, v)| u == v).count();
    report.rows_rescaled = (0..features.rows())
        .filter(|&r| features.row_slice(r).iter().map(|v| v * v).sum::<f64>() > 1.0)
        .count();
    let g = Graph::new(features, labels, n_classes, edges, masks)?;
    report.duplicates_dropped = report.edge_rows - report.self_loops_dropped - g.n_edges();
    Ok(g)
}

fn load_csv(
    edge_path: &Path,
    feat_path: &Path,
    mask_path: Option<&Path>,
    n_classes: Option<usize>,
) -> Result<(Graph, LoadReport)> {
    let text = read(feat_path)?;
    let mut rows: Vec<(usize, usize, Vec<f64>)> = Vec::new();
    let mut line_of = Vec::new();
    for (line, l) in data_lines(&text) {
        let mut parts = l.split(',').map(str::trim);
        let id = parts.next().and_then(|s| s.parse::<usize>().ok());
        let label = parts.next().and_then(|s| s.parse::<usize>().ok());
        let (Some(id), Some(label)) = (id, label) else {
            return Err(parse_err(feat_path, line, "expected node_id,label,f1,..,fd"));
        };
        let feats: std::result::Result<Vec<f64>, _> = parts.map(str::parse::<f64>).collect();
        let feats = feats.map_err(|e| parse_err(feat_path, line, format!("bad feature value: {e}")))?;
        if let Some((_, _, first)) = rows.first() {
            if first.len() != feats.len() {
                return Err(parse_err(
                    feat_path,
                    line,
                    format!("expected {} features, found {}", first.len(), feats.len()),
                ));
            }
        }
        if feats.iter().any(|v| !v.is_finite()) {
            return Err(parse_err(feat_path, line, "non-finite feature value"));
        }
        rows.push((id, label, feats));
        line_of.push(line);
    }
    let n = rows.len();
    let d = rows.first().map_or(0, |r| r.2.len());
    let classes = match n_classes {
        Some(c) => c,
        None => rows.iter().map(|r| r.1 + 1).max().unwrap_or(0),
    };
    let mut features = Tensor::zeros(n, d);
    let mut labels = vec![usize::MAX; n];
    for ((id, label, feats), &line) in rows.into_iter().zip(&line_of) {
        if id >= n {
            return Err(parse_err(feat_path, line, format!("node id {id} outside 0..{n}")));
        }
        if labels[id] != usize::MAX {
            return Err(parse_err(feat_path, line, format!("node id {id} repeated")));
        }
        if label >= classes {
            return Err(parse_err(feat_path, line, format!("label {label} out of range for {classes} classes")));
        }
        labels[id] = label;
        features.data_mut()[id * d..(id + 1) * d].copy_from_slice(&feats);
    }

    let text = read(edge_path)?;
    let mut edges = Vec::new();
    for (line, l) in data_lines(&text) {
        let mut parts = l.split(',').map(str::trim);
        let u = parts.next().and_then(|s| s.parse::<usize>().ok());
        let v = parts.next().and_then(|s| s.parse::<usize>().ok());
        let (Some(u), Some(v), None) = (u, v, parts.next()) else {
            return Err(parse_err(edge_path, line, "expected u,v"));
        };
        if u >= n || v >= n {
            return Err(parse_err(edge_path, line, format!("edge ({u}, {v}) has an endpoint outside 0..{n}")));
        }
        edges.push((u, v));
    }

    let masks = match mask_path {
        Some(p) => serde_json::from_str(&read(p)?).map_err(|e| parse_err(p, e.line(), e.to_string()))?,
        None => stratified_masks(&labels, classes, DEFAULT_SPLIT_SEED),
    };
    let mut report = LoadReport::default();
    let g = finish(&mut report, features, labels, classes, edges, masks)?;
    Ok((g, report))
}

fn load_bundle(path: &Path) -> Result<(Graph, LoadReport)> {
    let b: Bundle = serde_json::from_str(&read(path)?).map_err(|e| parse_err(path, e.line(), e.to_string()))?;
    if b.features.len() != b.n_nodes || b.labels.len() != b.n_nodes {
        return Err(parse_err(path, 1, "features/labels length differs from n_nodes"));
    }
    if let Some((u, v)) = b.edges.iter().find(|(u, v)| *u >= b.n_nodes || *v >= b.n_nodes) {
        return Err(parse_err(path, 1, format!("edge ({u}, {v}) has an endpoint outside 0..{}", b.n_nodes)));
    }
    let features = Tensor::from_rows(&b.features)?;
    let masks = if b.train.is_empty() && b.val.is_empty() && b.test.is_empty() {
        stratified_masks(&b.labels, b.n_classes, DEFAULT_SPLIT_SEED)
    } else {
        Masks { train: b.train, val: b.val, test: b.test }
    };
    let mut report = LoadReport::default();
    let g = finish(&mut report, features, b.labels, b.n_classes, b.edges, masks)?;
    Ok((g, report))
}

/// `cora.content`: `paper_id word_0 .. word_{d-1} class_name`, whitespace
/// separated. `cora.cites`: `cited citing`. Class ids follow sorted class names.
fn load_cora(dir: &Path) -> Result<(Graph, LoadReport)> {
    let content_path = dir.join("cora.content");
    let cites_path = dir.join("cora.cites");
    let text = read(&content_path)?;
    let mut ids = HashMap::new();
    let mut rows = Vec::new();
    let mut names = Vec::new();
    for (line, l) in text.lines().enumerate().map(|(k, l)| (k + 1, l.trim())) {
        if l.is_empty() {
            continue;
        }
        let toks: Vec<&str> = l.split_whitespace().collect();
        if toks.len() < 3 {
            return Err(parse_err(&content_path, line, "expected id, features, class"));
        }
        let feats: std::result::Result<Vec<f64>, _> = toks[1..toks.len() - 1].iter().map(|s| s.parse::<f64>()).collect();
        let feats = feats.map_err(|e| parse_err(&content_path, line, e.to_string()))?;
        if ids.insert(toks[0].to_string(), rows.len()).is_some() {
            return Err(parse_err(&content_path, line, format!("paper {} repeated", toks[0])));
        }
        names.push(toks[toks.len() - 1].to_string());
        rows.push(feats);
    }
    let mut classes: Vec<&String> = names.iter().collect();
    classes.sort();
    classes.dedup();
    let labels: Vec<usize> = names.iter().map(|nm| classes.binary_search(&nm).expect("present")).collect();
    let n_classes = classes.len();

    let text = read(&cites_path)?;
    let mut edges = Vec::new();
    for (line, l) in text.lines().enumerate().map(|(k, l)| (k + 1, l.trim())) {
        if l.is_empty() {
            continue;
        }
        let toks: Vec<&str> = l.split_whitespace().collect();
        if toks.len() != 2 {
            return Err(parse_err(&cites_path, line, "expected two paper ids"));
        }
        match (ids.get(toks[0]), ids.get(toks[1])) {
            (Some(&u), Some(&v)) => edges.push((u, v)),
            _ => return Err(parse_err(&cites_path, line, "citation references an unknown paper")),
        }
    }
    let features = Tensor::from_rows(&rows).map_err(|_| parse_err(&content_path, 1, "ragged feature rows"))?;
    let masks = stratified_masks(&labels, n_classes, DEFAULT_SPLIT_SEED);
    let mut report = LoadReport::default();
    let g = finish(&mut report, features, labels, n_classes, edges, masks)?;
    Ok((g, report))
}
