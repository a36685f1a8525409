//! Dataset bundles on disk and the stochastic block model generator.
//!
//! A bundle is a directory with four files:
//!
//! | file          | content                                             |
//! |---------------|-----------------------------------------------------|
//! | `edges.tsv`   | `u<TAB>v` per line, one undirected edge             |
//! | `features.tsv`| tab-separated reals, one node per line              |
//! | `labels.txt`  | one integer class id per line                       |
//! | `splits.json` | `{"train": [...], "val": [...], "test": [...]}`     |
//!
//! Node `i` is line `i` of the features and labels files. Blank lines and
//! lines starting with `#` are ignored in the edges file only.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::compute::Tensor;
use crate::graph::{AttributedGraph, ClassSplits, EdgeDirection, GraphError};

pub const EDGES_FILE: &str = "edges.tsv";
pub const FEATURES_FILE: &str = "features.tsv";
pub const LABELS_FILE: &str = "labels.txt";
pub const SPLITS_FILE: &str = "splits.json";

/// Largest accepted class id.
pub const MAX_CLASS_ID: usize = 1 << 20;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("missing dataset file {0}")]
    MissingFile(PathBuf),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{file}:{line}: {message}")]
    Malformed {
        file: &'static str,
        line: usize,
        message: String,
    },
    #[error("inconsistent dataset: {0}")]
    Inconsistent(String),
    #[error("invalid graph: {0}")]
    Graph(#[from] GraphError),
    #[error("invalid SBM spec: {0}")]
    InvalidSpec(String),
}

fn malformed(file: &'static str, line: usize, message: impl Into<String>) -> DataError {
    DataError::Malformed {
        file,
        line,
        message: message.into(),
    }
}

/// Parses the edges file. With `num_nodes`, ids must lie below it.
pub fn parse_edges(text: &str, num_nodes: Option<usize>) -> Result<Vec<(usize, usize)>, DataError> {
    let mut edges = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split('\t').map(str::trim).collect();
        if fields.len() != 2 {
            return Err(malformed(
                EDGES_FILE,
                line,
                format!("expected 2 tab-separated columns, found {}", fields.len()),
            ));
        }
        let mut ids = [0usize; 2];
        for (slot, f) in ids.iter_mut().zip(&fields) {
            *slot = f
                .parse()
                .map_err(|_| malformed(EDGES_FILE, line, format!("'{f}' is not a node id")))?;
            if let Some(n) = num_nodes {
                if *slot >= n {
                    return Err(malformed(
                        EDGES_FILE,
                        line,
                        format!("node id {slot} out of range for {n} nodes"),
                    ));
                }
            }
        }
        edges.push((ids[0], ids[1]));
    }
    Ok(edges)
}

/// Parses the features file into an `n x d` matrix.
pub fn parse_features(text: &str) -> Result<Tensor<f64>, DataError> {
    let mut data = Vec::new();
    let mut dim = None;
    let mut rows = 0;
    for (i, raw) in text.trim_end().lines().enumerate() {
        let line = i + 1;
        let raw = raw.trim_end_matches('\r');
        if raw.trim().is_empty() {
            return Err(malformed(FEATURES_FILE, line, "empty line"));
        }
        let start = data.len();
        for f in raw.split('\t') {
            let f = f.trim();
            let v: f64 = f
                .parse()
                .map_err(|_| malformed(FEATURES_FILE, line, format!("'{f}' is not a number")))?;
            if !v.is_finite() {
                return Err(malformed(FEATURES_FILE, line, format!("non-finite value '{f}'")));
            }
            data.push(v);
        }
        let width = data.len() - start;
        match dim {
            None => dim = Some(width),
            Some(d) if d != width => {
                return Err(malformed(
                    FEATURES_FILE,
                    line,
                    format!("expected {d} columns, found {width}"),
                ))
            }
            _ => {}
        }
        rows += 1;
    }
    let dim = dim.ok_or_else(|| malformed(FEATURES_FILE, 1, "no nodes"))?;
    Ok(Tensor::from_vec(rows, dim, data).expect("row widths checked"))
}

pub fn parse_labels(text: &str) -> Result<Vec<usize>, DataError> {
    text.trim_end()
        .lines()
        .enumerate()
        .map(|(i, raw)| {
            let f = raw.trim();
            let c: usize = f
                .parse()
                .map_err(|_| malformed(LABELS_FILE, i + 1, format!("'{f}' is not a class id")))?;
            if c > MAX_CLASS_ID {
                return Err(malformed(LABELS_FILE, i + 1, format!("class id {c} exceeds {MAX_CLASS_ID}")));
            }
            Ok(c)
        })
        .collect()
}

pub fn parse_splits(text: &str) -> Result<ClassSplits, DataError> {
    serde_json::from_str(text).map_err(|e| malformed(SPLITS_FILE, e.line(), e.to_string()))
}

/// Counts reported after loading, comparable to published dataset tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub nodes: usize,
    pub edges: usize,
    pub attributes: usize,
    pub labels: usize,
}

impl DatasetStats {
    pub fn of(g: &AttributedGraph) -> Self {
        Self {
            nodes: g.num_nodes(),
            edges: g.num_edges(),
            attributes: g.feature_dim(),
            labels: (0..g.num_classes()).filter(|&c| !g.class_members(c).is_empty()).count(),
        }
    }
}

/// In-memory contents of a dataset directory.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBundle {
    pub edges: Vec<(usize, usize)>,
    pub features: Tensor<f64>,
    pub labels: Vec<usize>,
    pub splits: ClassSplits,
}

fn read_file(dir: &Path, name: &str) -> Result<String, DataError> {
    let path = dir.join(name);
    if !path.exists() {
        return Err(DataError::MissingFile(path));
    }
    fs::read_to_string(&path).map_err(|source| DataError::Io { path, source })
}

impl DatasetBundle {
    /// Parses the four text files of a bundle.
    pub fn parse(edges: &str, features: &str, labels: &str, splits: &str) -> Result<Self, DataError> {
        let features = parse_features(features)?;
        let labels = parse_labels(labels)?;
        if labels.len() != features.rows() {
            return Err(DataError::Inconsistent(format!(
                "{} has {} lines but {} has {}",
                LABELS_FILE,
                labels.len(),
                FEATURES_FILE,
                features.rows()
            )));
        }
        let edges = parse_edges(edges, Some(features.rows()))?;
        let splits = parse_splits(splits)?;
        Ok(Self {
            edges,
            features,
            labels,
            splits,
        })
    }

    pub fn read(dir: &Path) -> Result<Self, DataError> {
        let edges = read_file(dir, EDGES_FILE)?;
        let features = read_file(dir, FEATURES_FILE)?;
        let labels = read_file(dir, LABELS_FILE)?;
        let splits = read_file(dir, SPLITS_FILE)?;
        Self::parse(&edges, &features, &labels, &splits)
    }

    /// File contents as `(name, text)` pairs.
    pub fn render(&self) -> [(&'static str, String); 4] {
        let mut edges = String::new();
        for &(u, v) in &self.edges {
            let _ = writeln!(edges, "{u}\t{v}");
        }
        let mut features = String::new();
        for r in 0..self.features.rows() {
            for (j, v) in self.features.row(r).iter().enumerate() {
                if j > 0 {
                    features.push('\t');
                }
                // shortest representation that parses back to the same f64
                let _ = write!(features, "{v}");
            }
            features.push('\n');
        }
        let mut labels = String::new();
        for l in &self.labels {
            let _ = writeln!(labels, "{l}");
        }
        let splits = serde_json::to_string_pretty(&self.splits).expect("splits serialise") + "\n";
        [
            (EDGES_FILE, edges),
            (FEATURES_FILE, features),
            (LABELS_FILE, labels),
            (SPLITS_FILE, splits),
        ]
    }

    pub fn write(&self, dir: &Path) -> Result<(), DataError> {
        fs::create_dir_all(dir).map_err(|source| DataError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        for (name, text) in self.render() {
            let path = dir.join(name);
            fs::write(&path, text).map_err(|source| DataError::Io { path, source })?;
        }
        Ok(())
    }

    pub fn to_graph(&self, direction: EdgeDirection) -> Result<AttributedGraph, DataError> {
        Ok(AttributedGraph::build_with(
            &self.edges,
            self.features.clone(),
            self.labels.clone(),
            self.splits.clone(),
            direction,
        )?)
    }
}

/// Reads a bundle directory and builds the graph.
pub fn load_dataset(dir: &Path, direction: EdgeDirection) -> Result<(AttributedGraph, DatasetStats), DataError> {
    let g = DatasetBundle::read(dir)?.to_graph(direction)?;
    let stats = DatasetStats::of(&g);
    if g.dropped_self_loops() > 0 {
        log::warn!("{}: ignored {} self-loop(s)", dir.display(), g.dropped_self_loops());
    }
    Ok((g, stats))
}

/// Stochastic block model with Gaussian class-centroid features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SbmSpec {
    pub num_classes: usize,
    pub nodes_per_class: usize,
    /// Edge probability within a class.
    pub p_in: f64,
    /// Edge probability across classes.
    pub p_out: f64,
    pub feature_dim: usize,
    /// Norm of every class centroid.
    pub class_mean_scale: f64,
    pub noise_std: f64,
    pub train_classes: usize,
    pub val_classes: usize,
    pub test_classes: usize,
    pub seed: u64,
}

impl Default for SbmSpec {
    fn default() -> Self {
        Self {
            num_classes: 10,
            nodes_per_class: 60,
            p_in: 0.1,
            p_out: 0.005,
            feature_dim: 32,
            class_mean_scale: 1.0,
            noise_std: 0.5,
            train_classes: 5,
            val_classes: 2,
            test_classes: 3,
            seed: 0,
        }
    }
}

impl SbmSpec {
    /// Default spec with `num_classes` classes split 50/20/30 (rounded,
    /// train absorbing the remainder).
    pub fn with_classes(num_classes: usize) -> Self {
        let val = (num_classes * 2 + 5) / 10;
        let test = (num_classes * 3 + 5) / 10;
        Self {
            num_classes,
            train_classes: num_classes.saturating_sub(val + test),
            val_classes: val,
            test_classes: test,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::InvalidSpec(m));
        if self.num_classes == 0 || self.nodes_per_class == 0 {
            return bad("need at least one class and one node per class".into());
        }
        if self.feature_dim == 0 {
            return bad("feature_dim must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.p_in) || !(0.0..=self.p_in).contains(&self.p_out) {
            return bad(format!(
                "require 0 <= p_out <= p_in <= 1, got p_in={} p_out={}",
                self.p_in, self.p_out
            ));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) || !self.class_mean_scale.is_finite() {
            return bad("noise_std and class_mean_scale must be finite, noise_std >= 0".into());
        }
        if self.train_classes + self.val_classes + self.test_classes != self.num_classes {
            return bad(format!(
                "split counts {}+{}+{} do not sum to {} classes",
                self.train_classes, self.val_classes, self.test_classes, self.num_classes
            ));
        }
        Ok(())
    }

    pub fn num_nodes(&self) -> usize {
        self.num_classes * self.nodes_per_class
    }
}

/// Generates a bundle: node `i` belongs to class `i / nodes_per_class`,
/// classes `0..train` form the train split, then validation, then test.
pub fn generate_sbm(spec: &SbmSpec) -> Result<DatasetBundle, DataError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.num_nodes();
    let d = spec.feature_dim;

    let centroids: Vec<Vec<f64>> = (0..spec.num_classes)
        .map(|_| random_direction(d, &mut rng).into_iter().map(|x| x * spec.class_mean_scale).collect())
        .collect();
    let noise = Normal::new(0.0, spec.noise_std).expect("validated noise_std");
    let labels: Vec<usize> = (0..n).map(|i| i / spec.nodes_per_class).collect();
    let mut features = Tensor::zeros(n, d);
    for (i, &c) in labels.iter().enumerate() {
        for (f, &mu) in features.row_mut(i).iter_mut().zip(&centroids[c]) {
            *f = mu + noise.sample(&mut rng);
        }
    }

    let mut edges = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            let p = if labels[u] == labels[v] { spec.p_in } else { spec.p_out };
            if rng.random::<f64>() < p {
                edges.push((u, v));
            }
        }
    }

    let (t, v) = (spec.train_classes, spec.val_classes);
    let splits = ClassSplits::new(
        (0..t).collect(),
        (t..t + v).collect(),
        (t + v..spec.num_classes).collect(),
    );
    Ok(DatasetBundle {
        edges,
        features,
        labels,
        splits,
    })
}

fn random_direction<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const TOY_EDGES: &str = "0\t1\n1\t2\n";
    const TOY_FEATURES: &str = "1.0\t0.0\n0.5\t0.5\n0.0\t1.0\n";
    const TOY_LABELS: &str = "0\n0\n1\n";
    const TOY_SPLITS: &str = r#"{"train": [0], "val": [], "test": [1]}"#;

    #[test]
    fn toy_bundle_loads() {
        let b = DatasetBundle::parse(TOY_EDGES, TOY_FEATURES, TOY_LABELS, TOY_SPLITS).unwrap();
        let g = b.to_graph(EdgeDirection::Undirected).unwrap();
        let s = DatasetStats::of(&g);
        assert_eq!(
            s,
            DatasetStats {
                nodes: 3,
                edges: 2,
                attributes: 2,
                labels: 2
            }
        );
    }

    #[test]
    fn out_of_range_edge_names_the_line() {
        let err = DatasetBundle::parse("0\t1\n\n2\t3\n", TOY_FEATURES, TOY_LABELS, TOY_SPLITS).unwrap_err();
        match err {
            DataError::Malformed { file, line, .. } => assert_eq!((file, line), (EDGES_FILE, 3)),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn malformed_inputs() {
        assert!(matches!(parse_edges("0 1\n", None), Err(DataError::Malformed { line: 1, .. })));
        assert!(matches!(parse_edges("0\tx\n", None), Err(DataError::Malformed { .. })));
        assert!(matches!(parse_features("1\t2\n3\n"), Err(DataError::Malformed { line: 2, .. })));
        assert!(matches!(parse_features("1\n\n2\n"), Err(DataError::Malformed { line: 2, .. })));
        assert!(matches!(parse_features("1\tNaN\n"), Err(DataError::Malformed { .. })));
        assert!(matches!(parse_features(""), Err(DataError::Malformed { .. })));
        assert!(matches!(parse_labels("0\n-1\n"), Err(DataError::Malformed { line: 2, .. })));
        assert!(matches!(parse_labels("99999999999\n"), Err(DataError::Malformed { .. })));
        assert!(matches!(parse_splits("{\"train\": [0]}"), Err(DataError::Malformed { .. })));
        assert!(matches!(
            DatasetBundle::parse(TOY_EDGES, TOY_FEATURES, "0\n1\n", TOY_SPLITS),
            Err(DataError::Inconsistent(_))
        ));
    }

    #[test]
    fn comments_and_crlf_are_tolerated() {
        assert_eq!(parse_edges("# header\r\n0\t1\r\n", None).unwrap(), vec![(0, 1)]);
        assert_eq!(parse_features("1\t2\r\n").unwrap().as_slice(), &[1.0, 2.0]);
        assert_eq!(parse_labels("3\r\n").unwrap(), vec![3]);
    }

    #[test]
    fn sbm_extremes() {
        let spec = SbmSpec {
            num_classes: 3,
            nodes_per_class: 5,
            p_in: 1.0,
            p_out: 0.0,
            train_classes: 1,
            val_classes: 1,
            test_classes: 1,
            ..Default::default()
        };
        let g = generate_sbm(&spec).unwrap().to_graph(EdgeDirection::Undirected).unwrap();
        assert!(g.degree().iter().all(|&d| d == 4));
        assert!(g.edges().iter().all(|&(u, v)| g.labels()[u] == g.labels()[v]));

        let empty = SbmSpec {
            p_in: 0.0,
            ..spec.clone()
        };
        assert!(generate_sbm(&empty).unwrap().edges.is_empty());
    }

    #[test]
    fn sbm_rejects_degenerate_specs() {
        for bad in [
            SbmSpec { num_classes: 0, ..Default::default() },
            SbmSpec { nodes_per_class: 0, ..Default::default() },
            SbmSpec { p_out: 0.2, ..Default::default() },
            SbmSpec { p_in: 1.5, ..Default::default() },
            SbmSpec { test_classes: 4, ..Default::default() },
            SbmSpec { noise_std: -1.0, ..Default::default() },
        ] {
            assert!(matches!(generate_sbm(&bad), Err(DataError::InvalidSpec(_))), "{bad:?}");
        }
    }

    #[test]
    fn class_count_helper_splits() {
        let s = SbmSpec::with_classes(10);
        assert_eq!((s.train_classes, s.val_classes, s.test_classes), (5, 2, 3));
        let s = SbmSpec::with_classes(20);
        assert_eq!((s.train_classes, s.val_classes, s.test_classes), (10, 4, 6));
        assert!(SbmSpec::with_classes(15).validate().is_ok());
    }
}
