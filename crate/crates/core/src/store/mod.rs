//! Dense features for graphs, dataset persistence and corpus statistics.

pub mod cgfb;
mod embed;

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use embed::{cosine, embed_text, subtokens};

use crate::cpg::{CodePropertyGraph, EdgeClass};
use crate::error::{Error, Result};

pub const GRAPHS_FILE: &str = "graphs.jsonl";
pub const NODE_FEATURES_FILE: &str = "node_features.cgfb";
pub const EDGE_FEATURES_FILE: &str = "edge_features.cgfb";

/// Row-major f32 matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    fn from_rows<'a>(rows: impl Iterator<Item = &'a [f64]>, cols: usize) -> Self {
        let mut data = Vec::new();
        let mut n = 0;
        for r in rows {
            data.extend(r.iter().map(|&x| x as f32));
            n += 1;
        }
        Matrix { rows: n, cols, data }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeaturedGraph {
    pub graph: CodePropertyGraph,
    pub node_features: Matrix,
    pub edge_features: Matrix,
    pub feature_dim: usize,
}

impl FeaturedGraph {
    /// Pair a graph with externally computed features (e.g. a pretrained
    /// code encoder's sidecar output).
    pub fn new(graph: CodePropertyGraph, node_features: Matrix, edge_features: Matrix) -> Result<Self> {
        let dim = node_features.cols;
        let check = |what: &str, m: &Matrix, rows: usize| {
            if m.rows != rows || m.cols != dim {
                return Err(Error::DimensionMismatch {
                    expected: format!("{rows}x{dim} {what} features"),
                    found: format!("{}x{}", m.rows, m.cols),
                });
            }
            if m.data.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidGraph(format!("non-finite {what} feature")));
            }
            Ok(())
        };
        check("node", &node_features, graph.nodes.len())?;
        check("edge", &edge_features, graph.edges.len())?;
        Ok(FeaturedGraph {
            graph,
            node_features,
            edge_features,
            feature_dim: dim,
        })
    }

    /// Replace node features with a single-block sidecar file; edge features
    /// keep the hashed attribute embedding at the sidecar's dimension.
    pub fn with_node_sidecar(graph: CodePropertyGraph, sidecar: &Path) -> Result<Self> {
        let nodes = cgfb::read_single(&mut BufReader::new(File::open(sidecar)?))?;
        if nodes.cols == 0 {
            return Err(Error::DimensionMismatch {
                expected: "positive feature dimension".into(),
                found: "0".into(),
            });
        }
        let edges = edge_matrix(&graph, nodes.cols);
        FeaturedGraph::new(graph, nodes, edges)
    }
}

fn edge_matrix(graph: &CodePropertyGraph, dim: usize) -> Matrix {
    let rows: Vec<Vec<f64>> = graph.edges.iter().map(|e| embed_text(e.attr.as_str(), dim)).collect();
    Matrix::from_rows(rows.iter().map(Vec::as_slice), dim)
}

/// Hash-embed `"<node_type> <text>"` for nodes and the attribute name for
/// edges.
pub fn encode_features(graph: &CodePropertyGraph, dim: usize) -> FeaturedGraph {
    let rows: Vec<Vec<f64>> = graph
        .nodes
        .iter()
        .map(|n| embed_text(&format!("{} {}", n.node_type, n.text), dim))
        .collect();
    FeaturedGraph {
        node_features: Matrix::from_rows(rows.iter().map(Vec::as_slice), dim),
        edge_features: edge_matrix(graph, dim),
        graph: graph.clone(),
        feature_dim: dim,
    }
}

pub fn write_graphs_jsonl<'a, W: Write>(
    w: &mut W,
    graphs: impl IntoIterator<Item = &'a CodePropertyGraph>,
) -> Result<()> {
    for g in graphs {
        serde_json::to_writer(&mut *w, g)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_graphs_jsonl(path: &Path) -> Result<Vec<CodePropertyGraph>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let g: CodePropertyGraph = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), i + 1)))?;
        g.validate()?;
        out.push(g);
    }
    Ok(out)
}

/// Write `graphs.jsonl` plus stacked node and edge feature blocks into `dir`.
pub fn persist_dataset(graphs: &[FeaturedGraph], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let dim = graphs.first().map_or(0, |g| g.feature_dim);
    if let Some(g) = graphs.iter().find(|g| g.feature_dim != dim) {
        return Err(Error::DimensionMismatch {
            expected: format!("feature dim {dim}"),
            found: format!("{} in graph `{}`", g.feature_dim, g.graph.source_id),
        });
    }
    let mut w = BufWriter::new(File::create(dir.join(GRAPHS_FILE))?);
    write_graphs_jsonl(&mut w, graphs.iter().map(|g| &g.graph))?;
    w.flush()?;
    for (file, pick) in [
        (NODE_FEATURES_FILE, (|g: &FeaturedGraph| &g.node_features) as fn(&FeaturedGraph) -> &Matrix),
        (EDGE_FEATURES_FILE, |g: &FeaturedGraph| &g.edge_features),
    ] {
        let mut stacked = Matrix::zeros(0, dim);
        for g in graphs {
            let m = pick(g);
            stacked.data.extend_from_slice(&m.data);
            stacked.rows += m.rows;
        }
        let mut w = BufWriter::new(File::create(dir.join(file))?);
        cgfb::write_block(&mut w, &stacked)?;
        w.flush()?;
    }
    Ok(())
}

fn split_rows(stacked: &Matrix, counts: &[usize], what: &str) -> Result<Vec<Matrix>> {
    let total: usize = counts.iter().sum();
    if stacked.rows != total {
        return Err(Error::Format(format!(
            "{what} feature block has {} rows, graphs need {total}",
            stacked.rows
        )));
    }
    let mut out = Vec::with_capacity(counts.len());
    let mut at = 0;
    for &n in counts {
        let data = stacked.data[at * stacked.cols..(at + n) * stacked.cols].to_vec();
        out.push(Matrix::new(n, stacked.cols, data)?);
        at += n;
    }
    Ok(out)
}

pub fn load_dataset(dir: &Path) -> Result<Vec<FeaturedGraph>> {
    let graphs = read_graphs_jsonl(&dir.join(GRAPHS_FILE))?;
    let read = |f: &str| -> Result<Matrix> { cgfb::read_single(&mut BufReader::new(File::open(dir.join(f))?)) };
    let (nodes, edges) = (read(NODE_FEATURES_FILE)?, read(EDGE_FEATURES_FILE)?);
    if nodes.cols != edges.cols {
        return Err(Error::Format(format!(
            "node features are {}-dimensional, edge features {}",
            nodes.cols, edges.cols
        )));
    }
    let node_counts: Vec<_> = graphs.iter().map(|g| g.nodes.len()).collect();
    let edge_counts: Vec<_> = graphs.iter().map(|g| g.edges.len()).collect();
    let node_rows = split_rows(&nodes, &node_counts, "node")?;
    let edge_rows = split_rows(&edges, &edge_counts, "edge")?;
    graphs
        .into_iter()
        .zip(node_rows.into_iter().zip(edge_rows))
        .map(|(g, (n, e))| FeaturedGraph::new(g, n, e))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub total_samples: usize,
    pub avg_nodes: f64,
    pub avg_ast_edges: f64,
    pub avg_cfg_edges: f64,
    pub avg_dfg_edges: f64,
}

pub fn stats_of<'a>(graphs: impl IntoIterator<Item = &'a CodePropertyGraph>) -> DatasetStats {
    let mut sums = [0usize; 4];
    let mut n = 0;
    for g in graphs {
        n += 1;
        sums[0] += g.nodes.len();
        sums[1] += g.count_edges(EdgeClass::Ast);
        sums[2] += g.count_edges(EdgeClass::Cfg);
        sums[3] += g.count_edges(EdgeClass::Dfg);
    }
    let avg = |s: usize| if n == 0 { 0.0 } else { s as f64 / n as f64 };
    DatasetStats {
        total_samples: n,
        avg_nodes: avg(sums[0]),
        avg_ast_edges: avg(sums[1]),
        avg_cfg_edges: avg(sums[2]),
        avg_dfg_edges: avg(sums[3]),
    }
}

/// Statistics for a dataset directory or a bare `graphs.jsonl` file.
pub fn dataset_stats(path: &Path) -> Result<DatasetStats> {
    let file: PathBuf = if path.is_dir() { path.join(GRAPHS_FILE) } else { path.to_path_buf() };
    Ok(stats_of(&read_graphs_jsonl(&file)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cpg::{extract, SourceUnit};

    fn graph(code: &str) -> CodePropertyGraph {
        extract(&SourceUnit::python("t", code).unwrap()).unwrap()
    }

    #[test]
    fn feature_shapes() {
        let g = crate::cpg::build_ast_graph(
            &crate::cpg::parse_source(&SourceUnit::python("t", "x = 1").unwrap()).unwrap(),
            &SourceUnit::python("t", "x = 1").unwrap(),
        )
        .unwrap();
        let fg = encode_features(&g, 16);
        assert_eq!((fg.node_features.rows, fg.node_features.cols), (5, 16));
        assert_eq!((fg.edge_features.rows, fg.edge_features.cols), (4, 16));
        // module->expression_statement and expression_statement->assignment are both `contains`
        let contains: Vec<_> = (0..4)
            .filter(|&i| fg.graph.edges[i].attr == crate::cpg::EdgeAttr::Contains)
            .collect();
        assert_eq!(contains.len(), 2);
        assert_eq!(fg.edge_features.row(contains[0]), fg.edge_features.row(contains[1]));
    }

    #[test]
    fn sidecar_row_mismatch() {
        let g = graph("x = 1");
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("side.cgfb");
        let mut f = File::create(&p).unwrap();
        cgfb::write_block(&mut f, &Matrix::zeros(4, 8)).unwrap();
        drop(f);
        assert!(matches!(
            FeaturedGraph::with_node_sidecar(g.clone(), &p),
            Err(Error::DimensionMismatch { .. })
        ));
        let mut f = File::create(&p).unwrap();
        cgfb::write_block(&mut f, &Matrix::zeros(5, 8)).unwrap();
        drop(f);
        let fg = FeaturedGraph::with_node_sidecar(g, &p).unwrap();
        assert_eq!(fg.feature_dim, 8);
    }

    #[test]
    fn stats_of_single_graph() {
        let g = graph("a = 1\nb = a\n");
        let s = stats_of([&g]);
        assert_eq!(s.total_samples, 1);
        assert_eq!(s.avg_ast_edges, s.avg_nodes - 1.0);
        assert_eq!(s.avg_cfg_edges, 1.0);
        assert_eq!(s.avg_dfg_edges, 2.0);
    }
}
