use std::collections::HashMap;
use std::path::Path;

use petgraph::algo::dijkstra;
use petgraph::graph::{NodeIndex, UnGraph};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// On-disk taxonomy description.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaxonomySpec {
    pub nodes: Vec<String>,
    pub edges: Vec<[String; 2]>,
    pub root: String,
}

/// Connected, undirected taxonomy with cached hop distances.
#[derive(Clone, Debug)]
pub struct TaxonomyGraph {
    spec: TaxonomySpec,
    index: HashMap<String, usize>,
    dist: Vec<Vec<usize>>,
}

impl TaxonomyGraph {
    pub fn new(spec: TaxonomySpec) -> Result<Self> {
        let mut index = HashMap::new();
        for (i, n) in spec.nodes.iter().enumerate() {
            if index.insert(n.clone(), i).is_some() {
                return Err(Error::Format(format!("duplicate taxonomy node `{n}`")));
            }
        }
        if spec.nodes.is_empty() {
            return Err(Error::Format("taxonomy has no nodes".into()));
        }
        if !index.contains_key(&spec.root) {
            return Err(Error::UnknownNode(spec.root.clone()));
        }
        let mut g = UnGraph::<(), ()>::new_undirected();
        let ids: Vec<NodeIndex> = spec.nodes.iter().map(|_| g.add_node(())).collect();
        for [a, b] in &spec.edges {
            let ia = *index.get(a).ok_or_else(|| Error::UnknownNode(a.clone()))?;
            let ib = *index.get(b).ok_or_else(|| Error::UnknownNode(b.clone()))?;
            g.add_edge(ids[ia], ids[ib], ());
        }
        let n = spec.nodes.len();
        let mut dist = vec![vec![0; n]; n];
        for i in 0..n {
            let d = dijkstra(&g, ids[i], None, |_| 1usize);
            if d.len() != n {
                return Err(Error::Format("taxonomy graph is not connected".into()));
            }
            for (node, v) in d {
                dist[i][node.index()] = v;
            }
        }
        Ok(Self { spec, index, dist })
    }

    /// Complete binary tree with `depth` levels; nodes are named by their path
    /// (`root`, `root.0`, `root.1`, `root.0.0`, ...).
    pub fn binary_tree(depth: usize) -> Self {
        let mut nodes = vec!["root".to_string()];
        let mut edges = Vec::new();
        let mut level = vec!["root".to_string()];
        for _ in 1..depth {
            let mut next = Vec::new();
            for p in &level {
                for c in 0..2 {
                    let name = format!("{p}.{c}");
                    edges.push([p.clone(), name.clone()]);
                    nodes.push(name.clone());
                    next.push(name);
                }
            }
            level = next;
        }
        Self::new(TaxonomySpec { nodes, edges, root: "root".into() }).expect("tree is valid")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = super::io::read_text(path)?;
        Self::new(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(&self.spec)?)?;
        Ok(())
    }

    pub fn spec(&self) -> &TaxonomySpec {
        &self.spec
    }

    pub fn root(&self) -> &str {
        &self.spec.root
    }

    pub fn nodes(&self) -> &[String] {
        &self.spec.nodes
    }

    pub fn contains(&self, node: &str) -> bool {
        self.index.contains_key(node)
    }

    pub fn node_index(&self, node: &str) -> Result<usize> {
        self.index.get(node).copied().ok_or_else(|| Error::UnknownNode(node.into()))
    }

    /// Nodes of degree one other than the root.
    pub fn leaves(&self) -> Vec<String> {
        let n = self.spec.nodes.len();
        self.spec
            .nodes
            .iter()
            .enumerate()
            .filter(|(i, name)| {
                *name != &self.spec.root && (0..n).filter(|j| self.dist[*i][*j] == 1).count() == 1
            })
            .map(|(_, name)| name.clone())
            .collect()
    }

    /// Parent of `node` on the shortest path to the root.
    pub fn parent(&self, node: &str) -> Result<Option<String>> {
        let i = self.node_index(node)?;
        let r = self.node_index(&self.spec.root)?;
        if i == r {
            return Ok(None);
        }
        let n = self.spec.nodes.len();
        Ok((0..n)
            .find(|&j| self.dist[i][j] == 1 && self.dist[r][j] + 1 == self.dist[r][i])
            .map(|j| self.spec.nodes[j].clone()))
    }

    pub fn depth(&self, node: &str) -> Result<usize> {
        Ok(self.dist[self.node_index(&self.spec.root)?][self.node_index(node)?])
    }
}

/// Unit-weight shortest-path hop count between two nodes.
pub fn graph_distance(graph: &TaxonomyGraph, a: &str, b: &str) -> Result<usize> {
    Ok(graph.dist[graph.node_index(a)?][graph.node_index(b)?])
}
