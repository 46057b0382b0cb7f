//! Hop-bounded enumeration of all minimum-length paths.

use serde::{Deserialize, Serialize};

use super::{KgError, KnowledgeGraph};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Orientation {
    /// The hop follows a stored edge `from -> to`.
    Forward,
    /// The hop walks a stored edge `to -> from` backwards.
    Reverse,
}

/// One hop of a path. Parallel edges between the same endpoints (in the chosen
/// orientation) are folded: `relation` is the lexicographically smallest, and
/// `relations` lists all of them when there is more than one.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PathStep {
    pub relation: String,
    pub display_relation: String,
    pub orientation: Orientation,
    #[serde(default, skip_serializing_if = "at_most_one")]
    pub relations: Vec<String>,
}

fn at_most_one(v: &[String]) -> bool {
    v.len() <= 1
}

impl PathStep {
    pub fn single(relation: &str, display_relation: &str, orientation: Orientation) -> Self {
        PathStep {
            relation: relation.to_string(),
            display_relation: display_relation.to_string(),
            orientation,
            relations: vec![relation.to_string()],
        }
    }

    /// Every relation folded into this hop.
    pub fn relations(&self) -> impl Iterator<Item = &str> {
        let folded: &[String] = if self.relations.is_empty() {
            std::slice::from_ref(&self.relation)
        } else {
            &self.relations
        };
        folded.iter().map(String::as_str)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReasoningPath {
    pub nodes: Vec<String>,
    pub steps: Vec<PathStep>,
}

impl ReasoningPath {
    /// Hop count.
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn first(&self) -> Option<&str> {
        self.nodes.first().map(String::as_str)
    }

    pub fn last(&self) -> Option<&str> {
        self.nodes.last().map(String::as_str)
    }

    pub(super) fn check_shape(&self) -> Result<(), KgError> {
        if self.nodes.len() != self.steps.len() + 1 {
            return Err(KgError::InvalidPath(format!(
                "{} nodes but {} steps",
                self.nodes.len(),
                self.steps.len()
            )));
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = self.nodes.iter().find(|n| !seen.insert(n.as_str())) {
            return Err(KgError::InvalidPath(format!("node {dup:?} repeats")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PathQuery {
    pub max_hops: usize,
    pub max_paths: usize,
    /// Only walk edges in their stored direction.
    pub directed: bool,
}

impl PathQuery {
    pub fn new(max_hops: usize, max_paths: usize) -> Self {
        PathQuery {
            max_hops,
            max_paths,
            directed: false,
        }
    }

    pub fn directed(mut self, directed: bool) -> Self {
        self.directed = directed;
        self
    }
}

impl Default for PathQuery {
    fn default() -> Self {
        PathQuery::new(5, 64)
    }
}

const UNSEEN: u32 = u32::MAX;

impl KnowledgeGraph {
    /// All distinct minimum-length node sequences from `src` to `dst` with at
    /// most `max_hops` hops, in lexicographic node-id order, truncated to
    /// `max_paths`. Empty when `dst` is farther than `max_hops`.
    pub fn all_shortest_paths(
        &self,
        src: &str,
        dst: &str,
        query: &PathQuery,
    ) -> Result<Vec<ReasoningPath>, KgError> {
        if query.max_hops == 0 || query.max_paths == 0 {
            return Err(KgError::InvalidBound);
        }
        let s = self.index_of(src)?;
        let t = self.index_of(dst)?;
        if s == t {
            return Err(KgError::SameEndpoints(src.to_string()));
        }
        let (fwd, back) = if query.directed {
            (&self.out_adj, &self.in_adj)
        } else {
            (&self.any_adj, &self.any_adj)
        };

        let from_src = bfs(fwd, s, query.max_hops, Some(t));
        let dist = from_src[t];
        if dist == UNSEEN {
            return Ok(Vec::new());
        }
        let to_dst = bfs(back, t, dist as usize, None);

        // Forward DFS restricted to nodes exactly one hop closer to `dst`;
        // neighbour lists are sorted, so sequences come out in lexicographic order.
        let mut out = Vec::new();
        let mut trail = vec![s];
        let mut stack: Vec<(usize, usize)> = vec![(s, 0)];
        while let Some(&mut (u, ref mut next)) = stack.last_mut() {
            if u == t {
                out.push(self.materialize(&trail, query.directed));
                if out.len() == query.max_paths {
                    break;
                }
                stack.pop();
                trail.pop();
                continue;
            }
            let remaining = to_dst[u];
            let adj = &fwd[u];
            let found = adj[*next..]
                .iter()
                .position(|&v| to_dst[v] != UNSEEN && to_dst[v] + 1 == remaining);
            match found {
                Some(off) => {
                    let v = adj[*next + off];
                    *next += off + 1;
                    stack.push((v, 0));
                    trail.push(v);
                }
                None => {
                    stack.pop();
                    trail.pop();
                }
            }
        }
        Ok(out)
    }

    fn materialize(&self, trail: &[usize], directed: bool) -> ReasoningPath {
        let nodes = trail.iter().map(|&i| self.nodes[i].node_id.clone()).collect();
        let steps = trail
            .windows(2)
            .map(|hop| self.fold_step(hop[0], hop[1], directed))
            .collect();
        ReasoningPath { nodes, steps }
    }

    fn fold_step(&self, u: usize, v: usize, directed: bool) -> PathStep {
        let between = |from: usize, to: usize| -> Vec<(&str, &str)> {
            let mut rels: Vec<(&str, &str)> = self.out_index[from]
                .iter()
                .map(|&e| &self.edges[e])
                .filter(|slot| slot.dst == to)
                .map(|slot| (slot.edge.relation.as_str(), slot.edge.display_relation.as_str()))
                .collect();
            rels.sort();
            rels
        };
        let forward = between(u, v);
        let (rels, orientation) = if !forward.is_empty() || directed {
            (forward, Orientation::Forward)
        } else {
            (between(v, u), Orientation::Reverse)
        };
        let (relation, display) = rels[0];
        PathStep {
            relation: relation.to_string(),
            display_relation: display.to_string(),
            orientation,
            relations: rels.iter().map(|(r, _)| r.to_string()).collect(),
        }
    }
}

/// Breadth-first hop distances from `start`, not expanding beyond `limit` hops.
/// Stops early once `stop_at` is settled.
fn bfs(adj: &[Vec<usize>], start: usize, limit: usize, stop_at: Option<usize>) -> Vec<u32> {
    let mut dist = vec![UNSEEN; adj.len()];
    dist[start] = 0;
    let mut frontier = vec![start];
    let mut depth = 0u32;
    while !frontier.is_empty() && (depth as usize) < limit {
        if stop_at.is_some_and(|t| dist[t] != UNSEEN) {
            break;
        }
        depth += 1;
        let mut next = Vec::new();
        for &u in &frontier {
            for &v in &adj[u] {
                if dist[v] == UNSEEN {
                    dist[v] = depth;
                    next.push(v);
                }
            }
        }
        frontier = next;
    }
    dist
}
