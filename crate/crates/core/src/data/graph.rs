use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Csr;
use crate::util::rng;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TagNode {
    pub id: usize,
    pub text: String,
    pub label: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

impl Splits {
    pub fn validate(&self, n_nodes: usize) -> Result<()> {
        let mut seen = BTreeSet::new();
        for &i in self.train.iter().chain(&self.valid).chain(&self.test) {
            if i >= n_nodes {
                return Err(Error::Index {
                    index: i,
                    len: n_nodes,
                });
            }
            if !seen.insert(i) {
                return Err(Error::contract(format!("node {i} appears in two splits")));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }
}

/// Text-attributed graph: node texts, undirected adjacency, labels, splits.
#[derive(Clone, Debug, PartialEq)]
pub struct TagGraph {
    nodes: Vec<TagNode>,
    adjacency: Vec<Vec<usize>>,
    pub splits: Option<Splits>,
}

impl TagGraph {
    /// Builds a graph from nodes with dense ids and an undirected edge list.
    /// Edges are symmetrized and deduplicated; self-loops are rejected.
    pub fn new(nodes: Vec<TagNode>, edges: &[(usize, usize)]) -> Result<Self> {
        let n = nodes.len();
        for (i, node) in nodes.iter().enumerate() {
            if node.id != i {
                return Err(Error::contract(format!(
                    "node ids must be dense 0..{n}; position {i} has id {}",
                    node.id
                )));
            }
        }
        let mut sets = vec![BTreeSet::new(); n];
        for &(u, v) in edges {
            if u >= n || v >= n {
                return Err(Error::Index {
                    index: u.max(v),
                    len: n,
                });
            }
            if u == v {
                return Err(Error::contract(format!("self-loop on node {u}")));
            }
            sets[u].insert(v);
            sets[v].insert(u);
        }
        let adjacency = sets.into_iter().map(|s| s.into_iter().collect()).collect();
        Ok(TagGraph {
            nodes,
            adjacency,
            splits: None,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn nodes(&self) -> &[TagNode] {
        &self.nodes
    }

    pub fn node(&self, i: usize) -> &TagNode {
        &self.nodes[i]
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.adjacency[i]
    }

    pub fn adjacency(&self) -> &[Vec<usize>] {
        &self.adjacency
    }

    /// Number of undirected edges.
    pub fn n_edges(&self) -> usize {
        self.adjacency.iter().map(Vec::len).sum::<usize>() / 2
    }

    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (u, nb) in self.adjacency.iter().enumerate() {
            out.extend(nb.iter().filter(|&&v| v > u).map(|&v| (u, v)));
        }
        out
    }

    pub fn csr(&self) -> Arc<Csr> {
        Arc::new(Csr::from_lists(&self.adjacency))
    }

    pub fn labels(&self) -> Vec<Option<usize>> {
        self.nodes.iter().map(|n| n.label).collect()
    }

    pub fn n_classes(&self) -> usize {
        self.nodes
            .iter()
            .filter_map(|n| n.label)
            .max()
            .map_or(0, |m| m + 1)
    }

    pub fn splits(&self) -> Result<&Splits> {
        self.splits
            .as_ref()
            .ok_or_else(|| Error::contract("graph has no splits"))
    }

    pub fn set_splits(&mut self, splits: Splits) -> Result<()> {
        splits.validate(self.n_nodes())?;
        self.splits = Some(splits);
        Ok(())
    }

    /// Checks symmetry, sortedness, no duplicates and no self-loops.
    pub fn validate(&self) -> Result<()> {
        for (u, nb) in self.adjacency.iter().enumerate() {
            if nb.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::contract(format!("neighbors of {u} not strictly sorted")));
            }
            for &v in nb {
                if v == u {
                    return Err(Error::contract(format!("self-loop on {u}")));
                }
                if self.adjacency[v].binary_search(&u).is_err() {
                    return Err(Error::contract(format!("edge {u}-{v} not symmetric")));
                }
            }
        }
        if let Some(s) = &self.splits {
            s.validate(self.n_nodes())?;
        }
        Ok(())
    }

    /// Relabels node `i` as `perm[i]`, carrying texts, labels, edges and splits.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let n = self.n_nodes();
        if perm.len() != n || perm.iter().collect::<BTreeSet<_>>().len() != n {
            return Err(Error::contract("not a permutation"));
        }
        let mut nodes = self.nodes.clone();
        for (old, node) in self.nodes.iter().enumerate() {
            nodes[perm[old]] = TagNode {
                id: perm[old],
                ..node.clone()
            };
        }
        let edges: Vec<_> = self.edges().iter().map(|&(u, v)| (perm[u], perm[v])).collect();
        let mut g = TagGraph::new(nodes, &edges)?;
        if let Some(s) = &self.splits {
            let map = |v: &Vec<usize>| v.iter().map(|&i| perm[i]).collect();
            g.splits = Some(Splits {
                train: map(&s.train),
                valid: map(&s.valid),
                test: map(&s.test),
            });
        }
        Ok(g)
    }

    /// Seeded shuffle followed by a contiguous train/valid/test partition.
    pub fn make_splits(&mut self, ratios: [f64; 3], seed: u64) -> Result<Splits> {
        let splits = make_splits(self.n_nodes(), ratios, seed)?;
        self.splits = Some(splits.clone());
        Ok(splits)
    }

    /// Writes the JSON-lines node file and the edge-list file.
    pub fn save(&self, nodes_path: &Path, edges_path: &Path) -> Result<()> {
        let mut nodes = String::new();
        for n in &self.nodes {
            nodes.push_str(&serde_json::to_string(n)?);
            nodes.push('\n');
        }
        fs::write(nodes_path, nodes)?;
        let mut edges = String::from("# u v\n");
        for (u, v) in self.edges() {
            edges.push_str(&format!("{u} {v}\n"));
        }
        fs::write(edges_path, edges)?;
        Ok(())
    }
}

pub fn make_splits(n: usize, ratios: [f64; 3], seed: u64) -> Result<Splits> {
    let sum: f64 = ratios.iter().sum();
    if (sum - 1.0).abs() > 1e-9 || ratios.iter().any(|r| *r < 0.0) {
        return Err(Error::config(format!(
            "split ratios must be non-negative and sum to 1, got {ratios:?}"
        )));
    }
    let mut ids: Vec<usize> = (0..n).collect();
    ids.shuffle(&mut rng(seed, "splits"));
    let n_train = ((ratios[0] * n as f64).round() as usize).min(n);
    let n_valid = ((ratios[1] * n as f64).round() as usize).min(n - n_train);
    let mut train = ids[..n_train].to_vec();
    let mut valid = ids[n_train..n_train + n_valid].to_vec();
    let mut test = ids[n_train + n_valid..].to_vec();
    train.sort_unstable();
    valid.sort_unstable();
    test.sort_unstable();
    Ok(Splits { train, valid, test })
}

#[derive(Deserialize)]
struct NodeRecord {
    id: i64,
    text: String,
    label: Option<i64>,
}

/// Reads a JSON-lines node file and a whitespace edge-list file.
pub fn load_tag(nodes_path: &Path, edges_path: &Path) -> Result<TagGraph> {
    let nodes_name = nodes_path.display().to_string();
    let edges_name = edges_path.display().to_string();
    let parse_err = |file: &str, line: usize, msg: String| Error::Parse {
        file: file.to_string(),
        line,
        msg,
    };

    let mut records: Vec<(usize, TagNode)> = Vec::new();
    for (lineno, line) in fs::read_to_string(nodes_path)?.lines().enumerate() {
        let line_no = lineno + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: NodeRecord = serde_json::from_str(line)
            .map_err(|e| parse_err(&nodes_name, line_no, e.to_string()))?;
        let id = usize::try_from(rec.id)
            .map_err(|_| parse_err(&nodes_name, line_no, format!("negative id {}", rec.id)))?;
        let label = match rec.label {
            None => None,
            Some(l) => Some(usize::try_from(l).map_err(|_| {
                parse_err(&nodes_name, line_no, format!("negative label {l}"))
            })?),
        };
        records.push((
            line_no,
            TagNode {
                id,
                text: rec.text,
                label,
            },
        ));
    }
    records.sort_by_key(|(_, n)| n.id);
    for (pos, (line_no, node)) in records.iter().enumerate() {
        if node.id != pos {
            return Err(parse_err(
                &nodes_name,
                *line_no,
                format!("node ids are not dense: expected {pos}, found {}", node.id),
            ));
        }
    }
    let n = records.len();
    let nodes: Vec<TagNode> = records.into_iter().map(|(_, n)| n).collect();

    let mut edges = Vec::new();
    for (lineno, line) in fs::read_to_string(edges_path)?.lines().enumerate() {
        let line_no = lineno + 1;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let parts: Vec<&str> = t.split_whitespace().collect();
        if parts.len() != 2 {
            return Err(parse_err(&edges_name, line_no, format!("expected \"u v\", got {t:?}")));
        }
        let mut ends = [0usize; 2];
        for (k, p) in parts.iter().enumerate() {
            ends[k] = p
                .parse()
                .map_err(|_| parse_err(&edges_name, line_no, format!("bad node id {p:?}")))?;
            if ends[k] >= n {
                return Err(parse_err(
                    &edges_name,
                    line_no,
                    format!("edge endpoint {} not among {n} nodes", ends[k]),
                ));
            }
        }
        if ends[0] == ends[1] {
            return Err(parse_err(&edges_name, line_no, format!("self-loop on {}", ends[0])));
        }
        edges.push((ends[0], ends[1]));
    }
    TagGraph::new(nodes, &edges)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, nodes: &str, edges: &str) -> (std::path::PathBuf, std::path::PathBuf) {
        let np = dir.join("nodes.jsonl");
        let ep = dir.join("edges.txt");
        fs::write(&np, nodes).unwrap();
        fs::write(&ep, edges).unwrap();
        (np, ep)
    }

    const TWO: &str = "{\"id\":0,\"text\":\"a b\",\"label\":0}\n{\"id\":1,\"text\":\"\",\"label\":null}\n";
    const THREE: &str = "{\"id\":0,\"text\":\"a\",\"label\":0}\n{\"id\":1,\"text\":\"b\",\"label\":1}\n{\"id\":2,\"text\":\"c\",\"label\":0}\n";

    #[test]
    fn single_edge_is_symmetric() {
        let dir = tempfile::tempdir().unwrap();
        let (np, ep) = write(dir.path(), TWO, "0 1\n");
        let g = load_tag(&np, &ep).unwrap();
        assert_eq!(g.neighbors(0), &[1]);
        assert_eq!(g.neighbors(1), &[0]);
        assert_eq!(g.node(1).label, None);
        g.validate().unwrap();
    }

    #[test]
    fn duplicate_edges_collapse() {
        let dir = tempfile::tempdir().unwrap();
        let (np, ep) = write(dir.path(), TWO, "# comment\n0 1\n1 0\n0 1\n\n");
        let g = load_tag(&np, &ep).unwrap();
        assert_eq!(g.n_edges(), 1);
    }

    #[test]
    fn dangling_endpoint_names_line() {
        let dir = tempfile::tempdir().unwrap();
        let (np, ep) = write(dir.path(), THREE, "0 1\n1 7\n");
        match load_tag(&np, &ep) {
            Err(Error::Parse { line, msg, .. }) => {
                assert_eq!(line, 2);
                assert!(msg.contains('7'));
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn self_loops_and_malformed_lines_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (np, ep) = write(dir.path(), THREE, "2 2\n");
        assert!(matches!(load_tag(&np, &ep), Err(Error::Parse { line: 1, .. })));
        let (np, ep) = write(dir.path(), THREE, "0 1 2\n");
        assert!(matches!(load_tag(&np, &ep), Err(Error::Parse { line: 1, .. })));
        let (np, ep) = write(dir.path(), "{\"id\":0,\"text\":\"a\",\"label\":0}\n{\"id\":2,\"text\":\"b\",\"label\":0}\n", "");
        assert!(matches!(load_tag(&np, &ep), Err(Error::Parse { line: 2, .. })));
        let (np, ep) = write(dir.path(), "{\"id\":0,\"text\":\n", "");
        assert!(matches!(load_tag(&np, &ep), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn splits_match_reference_ratios() {
        let s = make_splits(100, [0.54, 0.18, 0.28], 3).unwrap();
        assert_eq!((s.train.len(), s.valid.len(), s.test.len()), (54, 18, 28));
        s.validate(100).unwrap();
        let all = make_splits(10, [1.0, 0.0, 0.0], 3).unwrap();
        assert_eq!(all.train.len(), 10);
        assert_eq!(make_splits(100, [0.54, 0.18, 0.28], 3).unwrap(), s);
        assert!(make_splits(10, [0.5, 0.2, 0.2], 3).is_err());
    }

    #[test]
    fn save_then_load_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let nodes = vec![
            TagNode { id: 0, text: "x y".into(), label: Some(1) },
            TagNode { id: 1, text: "".into(), label: None },
            TagNode { id: 2, text: "z".into(), label: Some(0) },
        ];
        let g = TagGraph::new(nodes, &[(0, 2), (2, 1)]).unwrap();
        let (np, ep) = (dir.path().join("n.jsonl"), dir.path().join("e.txt"));
        g.save(&np, &ep).unwrap();
        assert_eq!(load_tag(&np, &ep).unwrap(), g);
    }

    #[test]
    fn permutation_carries_structure() {
        let nodes = (0..3)
            .map(|i| TagNode { id: i, text: format!("t{i}"), label: Some(i % 2) })
            .collect();
        let g = TagGraph::new(nodes, &[(0, 1)]).unwrap();
        let p = g.permuted(&[2, 0, 1]).unwrap();
        assert_eq!(p.neighbors(2), &[0]);
        assert_eq!(p.node(2).text, "t0");
    }
}
