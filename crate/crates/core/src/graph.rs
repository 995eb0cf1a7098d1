//! Directed street topology with precomputed all-pairs shortest paths.
//!
//! Nodes are 0-based (`0..node_count`) everywhere inside the crate. Text
//! formats (edge lists, request logs, model files, traces) use 1-based node
//! indices; the conversion happens only in the readers and writers.

use std::collections::{BTreeSet, VecDeque};
use std::io::BufRead;

use crate::error::{Error, Result};

/// Intersection index, 0-based.
pub type Node = usize;

const UNREACHABLE: u32 = u32::MAX;

/// Directed intersection graph with unit-minute edges.
///
/// Immutable after construction. `dist` and `next_hop` are dense
/// `node_count x node_count` row-major tables.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StreetGraph {
    node_count: usize,
    edges: Vec<(Node, Node)>,
    adjacency: Vec<Vec<Node>>,
    dist: Vec<u32>,
    next_hop: Vec<u32>,
}

impl StreetGraph {
    /// Builds the graph from 0-based directed edges.
    ///
    /// Duplicate edges are dropped with a warning; self-loops and graphs that
    /// are not strongly connected are rejected.
    pub fn from_edges(node_count: usize, edges: &[(Node, Node)]) -> Result<Self> {
        if node_count == 0 || edges.is_empty() {
            return Err(Error::InvalidGraph("graph needs at least one edge".into()));
        }
        let mut unique = BTreeSet::new();
        for &(i, j) in edges {
            if i >= node_count || j >= node_count {
                return Err(Error::NodeOutOfRange { node: i.max(j) + 1, node_count });
            }
            if i == j {
                return Err(Error::SelfLoop(i + 1));
            }
            if !unique.insert((i, j)) {
                log::warn!("duplicate edge {} {} ignored", i + 1, j + 1);
            }
        }
        let edges: Vec<(Node, Node)> = unique.into_iter().collect();
        let mut adjacency = vec![Vec::new(); node_count];
        for &(i, j) in &edges {
            adjacency[i].push(j);
        }
        for nbrs in &mut adjacency {
            nbrs.sort_unstable();
        }

        let n = node_count;
        let mut dist = vec![UNREACHABLE; n * n];
        let mut queue = VecDeque::with_capacity(n);
        for src in 0..n {
            let row = &mut dist[src * n..(src + 1) * n];
            row[src] = 0;
            queue.clear();
            queue.push_back(src);
            while let Some(u) = queue.pop_front() {
                let du = row[u];
                for &v in &adjacency[u] {
                    if row[v] == UNREACHABLE {
                        row[v] = du + 1;
                        queue.push_back(v);
                    }
                }
            }
            if let Some(dst) = row.iter().position(|&d| d == UNREACHABLE) {
                return Err(Error::NotStronglyConnected { from: src + 1, to: dst + 1 });
            }
        }

        let mut next_hop = vec![0u32; n * n];
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    next_hop[i * n + j] = i as u32;
                    continue;
                }
                let target = dist[i * n + j] - 1;
                // Adjacency is sorted, so the first match is the lowest index.
                let hop = adjacency[i]
                    .iter()
                    .copied()
                    .find(|&u| dist[u * n + j] == target)
                    .expect("BFS distances admit a predecessor on every shortest path");
                next_hop[i * n + j] = hop as u32;
            }
        }

        Ok(Self { node_count, edges, adjacency, dist, next_hop })
    }

    /// Bidirectional `width x height` grid, row-major node numbering.
    pub fn grid(width: usize, height: usize) -> Result<Self> {
        let mut edges = Vec::new();
        for r in 0..height {
            for c in 0..width {
                let v = r * width + c;
                if c + 1 < width {
                    edges.push((v, v + 1));
                    edges.push((v + 1, v));
                }
                if r + 1 < height {
                    edges.push((v, v + width));
                    edges.push((v + width, v));
                }
            }
        }
        Self::from_edges(width * height, &edges)
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn edges(&self) -> &[(Node, Node)] {
        &self.edges
    }

    /// Out-neighbors of `node`, ascending.
    #[inline]
    pub fn neighbors(&self, node: Node) -> &[Node] {
        &self.adjacency[node]
    }

    pub fn has_edge(&self, from: Node, to: Node) -> bool {
        self.adjacency[from].binary_search(&to).is_ok()
    }

    /// Shortest-path travel time in minutes. Panics on out-of-range nodes;
    /// use [`StreetGraph::shortest_path_distance`] for a checked lookup.
    #[inline]
    pub fn dist(&self, from: Node, to: Node) -> u32 {
        self.dist[from * self.node_count + to]
    }

    /// First node on the canonical shortest path from `from` to `to`
    /// (`from` itself when they coincide).
    #[inline]
    pub fn next_hop(&self, from: Node, to: Node) -> Node {
        self.next_hop[from * self.node_count + to] as Node
    }

    pub fn shortest_path_distance(&self, from: Node, to: Node) -> Result<u32> {
        self.check_node(from)?;
        self.check_node(to)?;
        Ok(self.dist(from, to))
    }

    pub fn check_node(&self, node: Node) -> Result<()> {
        if node < self.node_count {
            Ok(())
        } else {
            Err(Error::NodeOutOfRange { node: node + 1, node_count: self.node_count })
        }
    }

    /// Longest shortest path.
    pub fn diameter(&self) -> u32 {
        self.dist.iter().copied().max().unwrap_or(0)
    }

    /// Writes the edge list in the 1-based text format.
    pub fn to_edge_list(&self) -> String {
        let mut out = String::new();
        for &(i, j) in &self.edges {
            out.push_str(&format!("{} {}\n", i + 1, j + 1));
        }
        out
    }
}

/// Reads a whitespace-separated, 1-based `i j` edge list. Blank lines and
/// lines starting with `#` are skipped. The node count is the largest index.
pub fn load_graph<R: BufRead>(reader: R) -> Result<StreetGraph> {
    let mut edges = Vec::new();
    let mut max_node = 0usize;
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let mut parts = trimmed.split_whitespace();
        let parse = |tok: Option<&str>| -> Result<usize> {
            let tok = tok.ok_or_else(|| Error::parse(lineno + 1, "expected two node indices"))?;
            let v: usize = tok
                .parse()
                .map_err(|_| Error::parse(lineno + 1, format!("bad node index {tok:?}")))?;
            if v == 0 {
                return Err(Error::parse(lineno + 1, "node indices start at 1"));
            }
            Ok(v)
        };
        let i = parse(parts.next())?;
        let j = parse(parts.next())?;
        if parts.next().is_some() {
            return Err(Error::parse(lineno + 1, "expected exactly two node indices"));
        }
        max_node = max_node.max(i).max(j);
        edges.push((i - 1, j - 1));
    }
    StreetGraph::from_edges(max_node, &edges)
}

pub fn load_graph_str(text: &str) -> Result<StreetGraph> {
    load_graph(text.as_bytes())
}
