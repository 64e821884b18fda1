//! Latent dependency DAG with topological order and a synthetic root.
//!
//! Node 0 is a synthetic root of dimension 0. It carries no value and exists
//! only to drive the recursive solvers: every real node without a real parent
//! is attached as a child of the root, so a single recursion started at the
//! root visits the whole graph.

use std::fmt;

/// Index of one latent vector. 0 is reserved for the synthetic root.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub usize);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum GraphError {
    #[error("directed cycle detected in latent dependency graph")]
    CycleDetected,
    #[error("edge ({0}, {1}) references a node out of range")]
    DanglingEdge(usize, usize),
}

/// DAG of latent nodes. Immutable after construction.
#[derive(Debug, Clone)]
pub struct LatentGraph {
    /// Real node count plus the synthetic root.
    node_count: usize,
    /// Per-node latent dimension; the root has dimension 0.
    latent_dims: Vec<usize>,
    /// Children per node, sorted by topological position.
    children: Vec<Vec<NodeId>>,
    /// Real parents per node (the root is not listed as a parent).
    parents: Vec<Vec<NodeId>>,
    /// Real nodes 1..=N in topological order.
    topo_order: Vec<NodeId>,
    /// topo_position[i] is the position of node i in `topo_order` (+1 so the
    /// root sorts first).
    topo_position: Vec<usize>,
}

impl LatentGraph {
    /// Builds a validated graph from per-node dimensions and parent->child
    /// edges over nodes 1..=N. Ties in the topological order are broken by
    /// ascending node index so traversals are deterministic.
    pub fn build(node_dims: &[usize], edges: &[(usize, usize)]) -> Result<Self, GraphError> {
        let real = node_dims.len();
        let count = real + 1;
        for &(a, b) in edges {
            if a == 0 || b == 0 || a > real || b > real {
                return Err(GraphError::DanglingEdge(a, b));
            }
        }

        let mut parents: Vec<Vec<NodeId>> = vec![Vec::new(); count];
        let mut raw_children: Vec<Vec<usize>> = vec![Vec::new(); count];
        let mut indegree = vec![0usize; count];
        for &(a, b) in edges {
            if !raw_children[a].contains(&b) {
                raw_children[a].push(b);
                parents[b].push(NodeId(a));
                indegree[b] += 1;
            }
        }
        for p in parents.iter_mut() {
            p.sort();
        }

        // Kahn's algorithm with a sorted frontier for deterministic ties.
        let mut topo_order = Vec::with_capacity(real);
        let mut frontier: Vec<usize> = (1..count).filter(|&i| indegree[i] == 0).collect();
        frontier.sort_unstable();
        let mut remaining = indegree.clone();
        while let Some(&next) = frontier.first() {
            frontier.remove(0);
            topo_order.push(NodeId(next));
            for &c in &raw_children[next] {
                remaining[c] -= 1;
                if remaining[c] == 0 {
                    let pos = frontier.partition_point(|&x| x < c);
                    frontier.insert(pos, c);
                }
            }
        }
        if topo_order.len() != real {
            return Err(GraphError::CycleDetected);
        }

        let mut topo_position = vec![0usize; count];
        for (pos, &NodeId(i)) in topo_order.iter().enumerate() {
            topo_position[i] = pos + 1;
        }

        // Root adopts every node without a real parent.
        for i in 1..count {
            if indegree[i] == 0 {
                raw_children[0].push(i);
            }
        }
        let mut children: Vec<Vec<NodeId>> = raw_children
            .into_iter()
            .map(|c| c.into_iter().map(NodeId).collect::<Vec<_>>())
            .collect();
        for c in children.iter_mut() {
            c.sort_by_key(|n| topo_position[n.0]);
        }

        let mut latent_dims = Vec::with_capacity(count);
        latent_dims.push(0);
        latent_dims.extend_from_slice(node_dims);

        Ok(Self {
            node_count: count,
            latent_dims,
            children,
            parents,
            topo_order,
            topo_position,
        })
    }

    /// Convenience constructor for the chain 1 -> 2 -> ... -> N.
    pub fn chain(n: usize, dim: usize) -> Self {
        let edges: Vec<(usize, usize)> = (1..n).map(|i| (i, i + 1)).collect();
        Self::build(&vec![dim; n], &edges).expect("chain is acyclic")
    }

    /// Convenience constructor for the diamond 1 -> {2, 3} -> 4.
    pub fn diamond(dim: usize) -> Self {
        Self::build(&[dim; 4], &[(1, 2), (1, 3), (2, 4), (3, 4)]).expect("diamond is acyclic")
    }

    /// Real node count plus the synthetic root.
    pub fn node_count(&self) -> usize {
        self.node_count
    }

    /// Number of real nodes.
    pub fn real_count(&self) -> usize {
        self.node_count - 1
    }

    pub fn latent_dim(&self, i: NodeId) -> usize {
        self.latent_dims[i.0]
    }

    /// Children of `i`, sorted by topological position. Stable across calls.
    pub fn children(&self, i: NodeId) -> &[NodeId] {
        &self.children[i.0]
    }

    /// Real parents of `i` in ascending index order. Empty for root children.
    pub fn parents(&self, i: NodeId) -> &[NodeId] {
        &self.parents[i.0]
    }

    /// Real nodes in topological order.
    pub fn topo_order(&self) -> &[NodeId] {
        &self.topo_order
    }

    /// Position key in the topological order; the root sorts before node 1.
    pub fn topo_position(&self, i: NodeId) -> usize {
        self.topo_position[i.0]
    }

    /// Transitive closure of `children(i)`, topologically ordered.
    pub fn descendants(&self, i: NodeId) -> Vec<NodeId> {
        let mut seen = vec![false; self.node_count];
        let mut stack = vec![i];
        while let Some(n) = stack.pop() {
            for &c in self.children(n) {
                if !seen[c.0] {
                    seen[c.0] = true;
                    stack.push(c);
                }
            }
        }
        let mut out: Vec<NodeId> = (1..self.node_count)
            .map(NodeId)
            .filter(|n| seen[n.0])
            .collect();
        out.sort_by_key(|&n| self.topo_position(n));
        out
    }

    /// True if the graph is a 2-node chain (the accurate 2-level setting).
    pub fn is_two_level(&self) -> bool {
        self.real_count() == 2 && self.parents(NodeId(2)) == [NodeId(1)]
    }
}

impl From<usize> for NodeId {
    fn from(i: usize) -> Self {
        NodeId(i)
    }
}
