use serde::{Deserialize, Serialize};

use crate::numerics::{Real, Tape, Tensor, Var};
use crate::{Error, Result};

/// A rooted aggregation tree. Leaves are bottom-level series; every other
/// node aggregates (sums) the leaves below it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HierarchyTree {
    parent: Vec<Option<usize>>,
    /// Bottom-series index of each leaf node, `None` for internal nodes.
    leaf: Vec<Option<usize>>,
}

impl HierarchyTree {
    pub fn new(parent: Vec<Option<usize>>, leaf: Vec<Option<usize>>) -> Result<Self> {
        let n = parent.len();
        if n == 0 || leaf.len() != n {
            return Err(Error::Structure("tree needs matching, non-empty parent and leaf lists".into()));
        }
        let roots = parent.iter().filter(|p| p.is_none()).count();
        if roots != 1 {
            return Err(Error::Structure(format!("tree has {roots} roots")));
        }
        if parent.iter().flatten().any(|&p| p >= n) {
            return Err(Error::Structure("parent index out of range".into()));
        }
        // every node must reach the root without revisiting a node
        for start in 0..n {
            let (mut node, mut steps) = (start, 0);
            while let Some(p) = parent[node] {
                node = p;
                steps += 1;
                if steps > n {
                    return Err(Error::Structure("cycle in parent links".into()));
                }
            }
        }
        let mut has_child = vec![false; n];
        for &p in parent.iter().flatten() {
            has_child[p] = true;
        }
        let mut seen = Vec::new();
        for i in 0..n {
            match (has_child[i], leaf[i]) {
                (false, Some(b)) => seen.push(b),
                (false, None) => return Err(Error::Structure(format!("leaf node {i} has no series"))),
                (true, Some(_)) => return Err(Error::Structure(format!("internal node {i} marked as a leaf"))),
                (true, None) => {}
            }
        }
        seen.sort_unstable();
        if seen.iter().enumerate().any(|(i, &b)| i != b) {
            return Err(Error::Structure("leaf series indices must be 0..n_leaves, each once".into()));
        }
        Ok(HierarchyTree { parent, leaf })
    }

    /// Complete tree with `fanouts[l]` children per node at depth `l`,
    /// numbered breadth-first so the root is node 0 and the leaves come last,
    /// in bottom-series order.
    pub fn from_fanouts(fanouts: &[usize]) -> Result<Self> {
        if fanouts.contains(&0) {
            return Err(Error::Structure("fan-out must be positive".into()));
        }
        let mut parent = vec![None];
        let mut frontier = vec![0usize];
        for &f in fanouts {
            let mut next = Vec::new();
            for &p in &frontier {
                for _ in 0..f {
                    parent.push(Some(p));
                    next.push(parent.len() - 1);
                }
            }
            frontier = next;
        }
        let mut leaf = vec![None; parent.len()];
        for (b, &node) in frontier.iter().enumerate() {
            leaf[node] = Some(b);
        }
        Self::new(parent, leaf)
    }

    pub fn n_nodes(&self) -> usize {
        self.parent.len()
    }

    pub fn n_leaves(&self) -> usize {
        self.leaf.iter().flatten().count()
    }

    pub fn parent(&self, node: usize) -> Option<usize> {
        self.parent[node]
    }

    pub fn leaf_series(&self, node: usize) -> Option<usize> {
        self.leaf[node]
    }

    pub fn depth(&self, node: usize) -> usize {
        let (mut d, mut n) = (0, node);
        while let Some(p) = self.parent[n] {
            d += 1;
            n = p;
        }
        d
    }

    pub fn depths(&self) -> Vec<usize> {
        (0..self.n_nodes()).map(|i| self.depth(i)).collect()
    }

    pub fn n_levels(&self) -> usize {
        self.depths().into_iter().max().unwrap_or(0) + 1
    }

    /// Ancestor of `node` at depth `depth` (the node itself when already
    /// that shallow).
    pub fn ancestor_at(&self, node: usize, depth: usize) -> usize {
        let mut n = node;
        while self.depth(n) > depth {
            n = self.parent[n].expect("non-root has a parent");
        }
        n
    }

    /// Bottom-series indices under `node`, ascending.
    pub fn descendant_leaves(&self, node: usize) -> Vec<usize> {
        let mut out: Vec<usize> = (0..self.n_nodes())
            .filter(|&i| self.leaf[i].is_some())
            .filter(|&i| {
                let mut n = i;
                loop {
                    if n == node {
                        return true;
                    }
                    match self.parent[n] {
                        Some(p) => n = p,
                        None => return false,
                    }
                }
            })
            .filter_map(|i| self.leaf[i])
            .collect();
        out.sort_unstable();
        out
    }

    /// For every node, the leaves it sums.
    pub fn aggregation_groups(&self) -> Vec<Vec<usize>> {
        (0..self.n_nodes()).map(|i| self.descendant_leaves(i)).collect()
    }

    /// Sums rows of a bottom-level tensor `[S_bottom, ...]` into one row
    /// per node, leaves added in ascending order.
    pub fn aggregate_tensor<F: Real>(&self, bottom: &Tensor<F>) -> Result<Tensor<F>> {
        let s = bottom.shape();
        let n = *s.first().ok_or_else(|| Error::shape("aggregate", "rank 0"))?;
        let row = bottom.len() / n.max(1);
        let groups = self.aggregation_groups();
        let mut out = vec![F::zero(); groups.len() * row];
        for (g, members) in groups.iter().enumerate() {
            for &i in members {
                if i >= n {
                    return Err(Error::Structure(format!("leaf series {i} but only {n} rows")));
                }
                for (o, &v) in out[g * row..(g + 1) * row].iter_mut().zip(&bottom.data()[i * row..(i + 1) * row]) {
                    *o += v;
                }
            }
        }
        let mut shape = s.to_vec();
        shape[0] = groups.len();
        Tensor::new(shape, out)
    }
}

/// Features of every tree node: aggregate nodes get the exact sum of their
/// descendant leaves' features; output rows follow node order.
pub fn aggregate_features<F: Real>(tape: &mut Tape<F>, z_bottom: Var, tree: &HierarchyTree) -> Result<Var> {
    let n = tape.shape(z_bottom).first().copied().unwrap_or(0);
    if tree.n_leaves() > n {
        return Err(Error::Structure(format!(
            "tree has {} leaves but features cover {n} series",
            tree.n_leaves()
        )));
    }
    tape.segment_sum(z_bottom, &tree.aggregation_groups())
}
