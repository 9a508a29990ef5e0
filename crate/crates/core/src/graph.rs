//! Leader-follower communication topology.
//!
//! Node indices are 0-based. `adjacency[(i, j)] > 0` means node `i` receives
//! information from node `j`; `pinning[i] > 0` means the leader talks to `i`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Digraph {
    adjacency: DMatrix<f64>,
    pinning: DVector<f64>,
}

impl Digraph {
    /// Checks the structural invariants only (square, no self-loops,
    /// non-negative weights). Leader reachability and strong connectivity
    /// are checked by [`Digraph::validate_tracking_topology`].
    pub fn new(adjacency: DMatrix<f64>, pinning: DVector<f64>) -> Result<Self> {
        if !adjacency.is_square() || adjacency.nrows() == 0 {
            return Err(Error::InvalidGraph(format!(
                "adjacency must be square and non-empty, got {}x{}",
                adjacency.nrows(),
                adjacency.ncols()
            )));
        }
        let n = adjacency.nrows();
        if pinning.len() != n {
            return Err(Error::dims("pinning gains", n, pinning.len()));
        }
        for i in 0..n {
            if adjacency[(i, i)] != 0.0 {
                return Err(Error::InvalidGraph(format!("self-loop at node {i}")));
            }
        }
        if adjacency.iter().chain(pinning.iter()).any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::InvalidGraph("weights must be finite and non-negative".into()));
        }
        Ok(Self { adjacency, pinning })
    }

    /// Directed ring `0 -> 1 -> ... -> n-1 -> 0` with unit weights.
    pub fn ring(n: usize, pinning: DVector<f64>) -> Result<Self> {
        let mut adjacency = DMatrix::zeros(n, n);
        if n > 1 {
            for i in 0..n {
                adjacency[(i, (i + n - 1) % n)] = 1.0;
            }
        }
        Self::new(adjacency, pinning)
    }

    /// The conditions under which tracking errors can be driven to zero:
    /// some follower is pinned and the follower graph is strongly connected.
    pub fn validate_tracking_topology(&self) -> Result<()> {
        if !self.pinning.iter().any(|b| *b > 0.0) {
            return Err(Error::InvalidGraph("no leader pinning".into()));
        }
        if !self.is_strongly_connected() {
            return Err(Error::InvalidGraph("follower graph is not strongly connected".into()));
        }
        Ok(())
    }

    pub fn node_count(&self) -> usize {
        self.adjacency.nrows()
    }

    pub fn adjacency(&self) -> &DMatrix<f64> {
        &self.adjacency
    }

    pub fn pinning_gains(&self) -> &DVector<f64> {
        &self.pinning
    }

    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.adjacency[(i, j)]
    }

    pub fn pinning(&self, i: usize) -> Result<f64> {
        self.check(i)?;
        Ok(self.pinning[i])
    }

    fn check(&self, i: usize) -> Result<()> {
        if i >= self.node_count() {
            return Err(Error::IndexOutOfRange {
                index: i,
                count: self.node_count(),
            });
        }
        Ok(())
    }

    pub fn in_degree(&self, i: usize) -> Result<f64> {
        self.check(i)?;
        Ok(self.adjacency.row(i).sum())
    }

    pub fn laplacian(&self) -> DMatrix<f64> {
        let n = self.node_count();
        let mut l = -self.adjacency.clone();
        for i in 0..n {
            l[(i, i)] = self.adjacency.row(i).sum();
        }
        l
    }

    /// In-neighbors of `i` in ascending index order. Every stacked vector
    /// and kernel block layout in the crate follows this order.
    pub fn neighbors(&self, i: usize) -> Result<Vec<usize>> {
        self.check(i)?;
        Ok((0..self.node_count())
            .filter(|&j| self.adjacency[(i, j)] > 0.0)
            .collect())
    }

    pub fn is_strongly_connected(&self) -> bool {
        let n = self.node_count();
        // Edge j -> i exists iff a_ij > 0.
        let forward = self.reach_from(0, |from, to| self.adjacency[(to, from)] > 0.0);
        let backward = self.reach_from(0, |from, to| self.adjacency[(from, to)] > 0.0);
        forward.iter().filter(|r| **r).count() == n && backward.iter().filter(|r| **r).count() == n
    }

    fn reach_from(&self, start: usize, edge: impl Fn(usize, usize) -> bool) -> Vec<bool> {
        let n = self.node_count();
        let mut seen = vec![false; n];
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(v) = stack.pop() {
            for w in 0..n {
                if !seen[w] && edge(v, w) {
                    seen[w] = true;
                    stack.push(w);
                }
            }
        }
        seen
    }
}
