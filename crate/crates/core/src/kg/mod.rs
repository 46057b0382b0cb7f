//! Heterogeneous directed multigraph over biomedical entities.
//!
//! A [`KnowledgeGraph`] is immutable once built. Nodes are stored sorted by
//! `node_id`, so node indices order exactly like node ids; path enumeration
//! relies on this to produce lexicographic output without re-sorting.

mod load;
mod paths;

use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::text::normalize_label;

pub use load::{load_graph, ColumnMap, LoadReport};
pub use paths::{Orientation, PathQuery, PathStep, ReasoningPath};

#[derive(Debug, thiserror::Error)]
pub enum KgError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed table {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("{path}: missing column {column:?}")]
    MissingColumn { path: PathBuf, column: String },
    #[error("duplicate node_id {node_id:?} (line {line})")]
    DuplicateNode { node_id: String, line: u64 },
    #[error("node {node_id:?} has an empty node_name (line {line})")]
    EmptyName { node_id: String, line: u64 },
    #[error("edge table references unknown node(s): {}", format_unknown(.rows))]
    UnknownNodes { rows: Vec<(u64, String)> },
    #[error("unknown node {0:?}")]
    UnknownNode(String),
    #[error("source and target are the same node {0:?}; a zero-length path carries no relational evidence")]
    SameEndpoints(String),
    #[error("max_hops and max_paths must be at least 1")]
    InvalidBound,
    #[error("invalid path: {0}")]
    InvalidPath(String),
}

fn format_unknown(rows: &[(u64, String)]) -> String {
    let mut parts: Vec<String> = rows
        .iter()
        .take(20)
        .map(|(line, id)| format!("{id:?} (line {line})"))
        .collect();
    if rows.len() > 20 {
        parts.push(format!("... {} more", rows.len() - 20));
    }
    parts.join(", ")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KgNode {
    pub node_id: String,
    pub node_type: String,
    pub node_name: String,
    pub source: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KgEdge {
    pub src: String,
    pub dst: String,
    pub relation: String,
    pub display_relation: String,
}

#[derive(Debug, Clone)]
struct EdgeSlot {
    src: usize,
    dst: usize,
    edge: KgEdge,
}

#[derive(Debug, Clone, Default)]
pub struct KnowledgeGraph {
    nodes: Vec<KgNode>,
    ids: HashMap<String, usize>,
    edges: Vec<EdgeSlot>,
    out_index: Vec<Vec<usize>>,
    in_index: Vec<Vec<usize>>,
    /// Distinct successor / predecessor / either-direction neighbours, sorted.
    out_adj: Vec<Vec<usize>>,
    in_adj: Vec<Vec<usize>>,
    any_adj: Vec<Vec<usize>>,
    name_index: BTreeMap<String, Vec<usize>>,
}

impl KnowledgeGraph {
    /// Build a graph from node and edge lists.
    ///
    /// Duplicate `(src, dst, relation)` edges are dropped (first wins); the number
    /// dropped is returned alongside the graph. Parallel edges that differ in
    /// relation are kept.
    pub fn new(nodes: Vec<KgNode>, edges: Vec<KgEdge>) -> Result<(Self, usize), KgError> {
        let mut nodes = nodes;
        for (i, node) in nodes.iter().enumerate() {
            if node.node_name.trim().is_empty() {
                return Err(KgError::EmptyName {
                    node_id: node.node_id.clone(),
                    line: i as u64 + 1,
                });
            }
        }
        nodes.sort_by(|a, b| a.node_id.cmp(&b.node_id));
        let mut ids = HashMap::with_capacity(nodes.len());
        for (i, node) in nodes.iter().enumerate() {
            if ids.insert(node.node_id.clone(), i).is_some() {
                return Err(KgError::DuplicateNode {
                    node_id: node.node_id.clone(),
                    line: 0,
                });
            }
        }

        let mut unknown = Vec::new();
        let mut seen = std::collections::HashSet::new();
        let mut slots = Vec::with_capacity(edges.len());
        let mut dropped = 0;
        for (i, edge) in edges.into_iter().enumerate() {
            let src = ids.get(&edge.src).copied();
            let dst = ids.get(&edge.dst).copied();
            match (src, dst) {
                (Some(src), Some(dst)) => {
                    if seen.insert((src, dst, edge.relation.clone())) {
                        slots.push(EdgeSlot { src, dst, edge });
                    } else {
                        dropped += 1;
                    }
                }
                _ => {
                    for id in [&edge.src, &edge.dst] {
                        if !ids.contains_key(id) {
                            unknown.push((i as u64 + 1, id.clone()));
                        }
                    }
                }
            }
        }
        if !unknown.is_empty() {
            return Err(KgError::UnknownNodes { rows: unknown });
        }

        let n = nodes.len();
        let mut out_index = vec![Vec::new(); n];
        let mut in_index = vec![Vec::new(); n];
        for (e, slot) in slots.iter().enumerate() {
            out_index[slot.src].push(e);
            in_index[slot.dst].push(e);
        }
        let neighbours = |index: &Vec<Vec<usize>>, pick: fn(&EdgeSlot) -> usize| -> Vec<Vec<usize>> {
            index
                .iter()
                .map(|es| {
                    let mut v: Vec<usize> = es.iter().map(|&e| pick(&slots[e])).collect();
                    v.sort_unstable();
                    v.dedup();
                    v
                })
                .collect()
        };
        let out_adj = neighbours(&out_index, |s| s.dst);
        let in_adj = neighbours(&in_index, |s| s.src);
        let any_adj = out_adj
            .iter()
            .zip(&in_adj)
            .map(|(o, i)| {
                let mut v: Vec<usize> = o.iter().chain(i).copied().collect();
                v.sort_unstable();
                v.dedup();
                v
            })
            .collect();

        let mut name_index: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, node) in nodes.iter().enumerate() {
            name_index.entry(normalize_label(&node.node_name)).or_default().push(i);
        }

        Ok((
            KnowledgeGraph {
                nodes,
                ids,
                edges: slots,
                out_index,
                in_index,
                out_adj,
                in_adj,
                any_adj,
                name_index,
            },
            dropped,
        ))
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Nodes in ascending `node_id` order.
    pub fn nodes(&self) -> impl Iterator<Item = &KgNode> {
        self.nodes.iter()
    }

    /// Edges in load order (after deduplication).
    pub fn edges(&self) -> impl Iterator<Item = &KgEdge> {
        self.edges.iter().map(|s| &s.edge)
    }

    pub fn node(&self, node_id: &str) -> Option<&KgNode> {
        self.ids.get(node_id).map(|&i| &self.nodes[i])
    }

    pub fn contains(&self, node_id: &str) -> bool {
        self.ids.contains_key(node_id)
    }

    pub fn out_degree(&self, node_id: &str) -> Option<usize> {
        self.ids.get(node_id).map(|&i| self.out_index[i].len())
    }

    pub fn in_degree(&self, node_id: &str) -> Option<usize> {
        self.ids.get(node_id).map(|&i| self.in_index[i].len())
    }

    /// Outgoing edges of a node.
    pub fn out_edges(&self, node_id: &str) -> Vec<&KgEdge> {
        self.ids
            .get(node_id)
            .map(|&i| self.out_index[i].iter().map(|&e| &self.edges[e].edge).collect())
            .unwrap_or_default()
    }

    /// Incoming edges of a node.
    pub fn in_edges(&self, node_id: &str) -> Vec<&KgEdge> {
        self.ids
            .get(node_id)
            .map(|&i| self.in_index[i].iter().map(|&e| &self.edges[e].edge).collect())
            .unwrap_or_default()
    }

    /// Nodes whose normalized name equals the normalized `label`, in `node_id` order.
    pub fn nodes_named(&self, label: &str) -> Vec<&KgNode> {
        self.name_index
            .get(&normalize_label(label))
            .map(|ix| ix.iter().map(|&i| &self.nodes[i]).collect())
            .unwrap_or_default()
    }

    pub fn name_index_len(&self) -> usize {
        self.name_index.values().map(Vec::len).sum()
    }

    /// Union of the nodes and traversed edges of `paths`, as a fresh graph.
    ///
    /// Each step contributes every edge between its endpoints in the recorded
    /// orientation whose relation is among the step's folded relations.
    pub fn subgraph_for(&self, paths: &[ReasoningPath]) -> Result<KnowledgeGraph, KgError> {
        let mut node_ix = std::collections::BTreeSet::new();
        let mut edge_ix = std::collections::BTreeSet::new();
        for path in paths {
            path.check_shape()?;
            let ix: Vec<usize> = path
                .nodes
                .iter()
                .map(|id| self.index_of(id))
                .collect::<Result<_, _>>()?;
            node_ix.extend(ix.iter().copied());
            for (hop, step) in ix.windows(2).zip(&path.steps) {
                let (from, to) = match step.orientation {
                    Orientation::Forward => (hop[0], hop[1]),
                    Orientation::Reverse => (hop[1], hop[0]),
                };
                let mut matched = false;
                for &e in &self.out_index[from] {
                    let slot = &self.edges[e];
                    if slot.dst == to && step.relations().any(|r| r == slot.edge.relation) {
                        edge_ix.insert(e);
                        matched = true;
                    }
                }
                if !matched {
                    return Err(KgError::InvalidPath(format!(
                        "no {:?} edge {} -[{}]- {}",
                        step.orientation, self.nodes[hop[0]].node_id, step.relation, self.nodes[hop[1]].node_id
                    )));
                }
            }
        }
        let nodes = node_ix.into_iter().map(|i| self.nodes[i].clone()).collect();
        let edges = edge_ix.into_iter().map(|e| self.edges[e].edge.clone()).collect();
        KnowledgeGraph::new(nodes, edges).map(|(g, _)| g)
    }

    fn index_of(&self, node_id: &str) -> Result<usize, KgError> {
        self.ids
            .get(node_id)
            .copied()
            .ok_or_else(|| KgError::UnknownNode(node_id.to_string()))
    }
}
