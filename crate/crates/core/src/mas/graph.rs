//! Communication graph, Metropolis weights and centralized consensus.

use super::MasError;

#[derive(Debug, Clone, PartialEq)]
pub struct AgentGraph {
    n: usize,
    adjacency: Vec<Vec<bool>>,
    weights: Vec<Vec<f64>>,
}

impl AgentGraph {
    pub fn from_adjacency(adjacency: Vec<Vec<bool>>) -> Result<Self, MasError> {
        let weights = metropolis_weights(&adjacency)?;
        Ok(Self {
            n: adjacency.len(),
            adjacency,
            weights,
        })
    }

    /// `edges` are 0-based, undirected, each listed once.
    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Result<Self, MasError> {
        let mut adj = vec![vec![false; n]; n];
        for &(a, b) in edges {
            if a >= n || b >= n {
                return Err(MasError::InvalidGraph(format!("edge {a}-{b} outside 0..{n}")));
            }
            if a == b {
                return Err(MasError::InvalidGraph(format!("self-loop at {a}")));
            }
            adj[a][b] = true;
            adj[b][a] = true;
        }
        Self::from_adjacency(adj)
    }

    pub fn ring(n: usize) -> Result<Self, MasError> {
        if n <= 2 {
            return Self::path(n);
        }
        let edges: Vec<_> = (0..n).map(|i| (i, (i + 1) % n)).collect();
        Self::from_edges(n, &edges)
    }

    pub fn path(n: usize) -> Result<Self, MasError> {
        let edges: Vec<_> = (1..n).map(|i| (i - 1, i)).collect();
        Self::from_edges(n, &edges)
    }

    pub fn complete(n: usize) -> Result<Self, MasError> {
        let edges: Vec<_> = (0..n)
            .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
            .collect();
        Self::from_edges(n, &edges)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn adjacency(&self) -> &[Vec<bool>] {
        &self.adjacency
    }

    pub fn weights(&self) -> &[Vec<f64>] {
        &self.weights
    }

    /// Ascending neighbor indices.
    pub fn neighbors(&self, i: usize) -> Vec<usize> {
        (0..self.n).filter(|&j| self.adjacency[i][j]).collect()
    }

    pub fn degree(&self, i: usize) -> usize {
        self.adjacency[i].iter().filter(|&&a| a).count()
    }

    pub fn edges(&self) -> Vec<(usize, usize)> {
        (0..self.n)
            .flat_map(|i| (i + 1..self.n).map(move |j| (i, j)))
            .filter(|&(i, j)| self.adjacency[i][j])
            .collect()
    }
}

fn connected(adj: &[Vec<bool>]) -> bool {
    let n = adj.len();
    if n == 0 {
        return false;
    }
    let mut seen = vec![false; n];
    let mut stack = vec![0];
    seen[0] = true;
    while let Some(i) = stack.pop() {
        for j in 0..n {
            if adj[i][j] && !seen[j] {
                seen[j] = true;
                stack.push(j);
            }
        }
    }
    seen.into_iter().all(|s| s)
}

/// `w_ij = 1 / (1 + max(d_i, d_j))` on edges, `w_ii = 1 - sum_j w_ij`.
pub fn metropolis_weights(adj: &[Vec<bool>]) -> Result<Vec<Vec<f64>>, MasError> {
    let n = adj.len();
    for (i, row) in adj.iter().enumerate() {
        if row.len() != n {
            return Err(MasError::InvalidGraph(format!("row {i} has {} entries, want {n}", row.len())));
        }
        if row[i] {
            return Err(MasError::InvalidGraph(format!("self-loop at {i}")));
        }
        for j in 0..n {
            if row[j] != adj[j][i] {
                return Err(MasError::InvalidGraph(format!("asymmetric entry {i},{j}")));
            }
        }
    }
    if !connected(adj) {
        return Err(MasError::DisconnectedGraph);
    }
    let deg: Vec<usize> = adj.iter().map(|r| r.iter().filter(|&&a| a).count()).collect();
    let mut w = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            if adj[i][j] {
                w[i][j] = 1.0 / (1.0 + deg[i].max(deg[j]) as f64);
            }
        }
        let off: f64 = w[i].iter().sum();
        w[i][i] = 1.0 - off;
    }
    Ok(w)
}

/// One synchronous round: each agent mixes its own value with its
/// neighbors' values only.
pub fn consensus_round(x: &[f64], w: &[Vec<f64>]) -> Result<Vec<f64>, MasError> {
    if w.len() != x.len() {
        return Err(MasError::DimensionMismatch {
            expected: w.len(),
            got: x.len(),
        });
    }
    Ok(w
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let mut acc = row[i] * x[i];
            for (j, &wij) in row.iter().enumerate() {
                if j != i && wij != 0.0 {
                    acc += wij * x[j];
                }
            }
            acc
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvergenceCriterion {
    pub eps: f64,
    pub r: u32,
    pub max_iter: u64,
}

impl Default for ConvergenceCriterion {
    fn default() -> Self {
        Self {
            eps: 1e-6,
            r: 3,
            max_iter: 500,
        }
    }
}

impl ConvergenceCriterion {
    pub fn validate(&self) -> Result<(), MasError> {
        if !(self.eps > 0.0) {
            return Err(MasError::InvalidCriterion("eps must be > 0".into()));
        }
        if self.r < 1 {
            return Err(MasError::InvalidCriterion("r must be >= 1".into()));
        }
        if self.max_iter < self.r as u64 {
            return Err(MasError::InvalidCriterion("max_iter must be >= r".into()));
        }
        Ok(())
    }
}

/// Iterates rounds until every agent has seen `r` consecutive changes below
/// `eps`. Returns the mean of the final values and the number of rounds.
pub fn run_consensus(
    x0: &[f64],
    w: &[Vec<f64>],
    crit: &ConvergenceCriterion,
) -> Result<(f64, u64), MasError> {
    crit.validate()?;
    let mut x = x0.to_vec();
    let mut small = vec![0u32; x.len()];
    for iter in 1..=crit.max_iter {
        let next = consensus_round(&x, w)?;
        for i in 0..x.len() {
            small[i] = if (next[i] - x[i]).abs() < crit.eps {
                small[i] + 1
            } else {
                0
            };
        }
        x = next;
        if small.iter().all(|&s| s >= crit.r) {
            return Ok((x.iter().sum::<f64>() / x.len() as f64, iter));
        }
    }
    Err(MasError::NoConvergence {
        max_iter: crit.max_iter,
    })
}

/// `u + k_s * x_bar`.
pub fn secondary_update(u: f64, x_bar: f64, k_s: f64) -> f64 {
    u + k_s * x_bar
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    #[test]
    fn ring_weights() {
        let g = AgentGraph::ring(4).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let want = if i == j || g.adjacency()[i][j] { 1.0 / 3.0 } else { 0.0 };
                assert!(close(g.weights()[i][j], want));
            }
        }
    }

    #[test]
    fn path_of_two() {
        let g = AgentGraph::path(2).unwrap();
        assert_eq!(g.weights(), &[vec![0.5, 0.5], vec![0.5, 0.5]]);
        assert_eq!(AgentGraph::ring(2).unwrap(), g);
    }

    #[test]
    fn disconnected_rejected() {
        assert_eq!(
            AgentGraph::from_edges(4, &[(0, 1), (2, 3)]),
            Err(MasError::DisconnectedGraph)
        );
        assert!(matches!(
            AgentGraph::from_edges(2, &[(0, 0)]),
            Err(MasError::InvalidGraph(_))
        ));
    }

    #[test]
    fn ring_round_example() {
        let g = AgentGraph::ring(4).unwrap();
        let x = consensus_round(&[1.0, 2.0, 3.0, 4.0], g.weights()).unwrap();
        let want = [7.0 / 3.0, 2.0, 3.0, 8.0 / 3.0];
        assert!(x.iter().zip(want).all(|(a, b)| close(*a, b)), "{x:?}");
        assert!(close(x.iter().sum(), 10.0));
        let same = consensus_round(&[0.3; 4], g.weights()).unwrap();
        assert!(same.iter().all(|v| close(*v, 0.3)));
    }

    #[test]
    fn run_consensus_examples() {
        let g = AgentGraph::ring(4).unwrap();
        let crit = ConvergenceCriterion {
            eps: 1e-9,
            r: 3,
            max_iter: 500,
        };
        let (xb, _) = run_consensus(&[1.0, 2.0, 3.0, 4.0], g.weights(), &crit).unwrap();
        assert!((xb - 2.5).abs() < 1e-8);
        let (xb, iters) = run_consensus(&[0.004; 4], g.weights(), &crit).unwrap();
        assert!(iters <= 3);
        assert!(close(xb, 0.004));
    }

    #[test]
    fn no_convergence_reported() {
        let g = AgentGraph::path(6).unwrap();
        let crit = ConvergenceCriterion {
            eps: 1e-12,
            r: 3,
            max_iter: 5,
        };
        assert_eq!(
            run_consensus(&[0.0, 0.0, 0.0, 0.0, 0.0, 1.0], g.weights(), &crit),
            Err(MasError::NoConvergence { max_iter: 5 })
        );
    }

    #[test]
    fn secondary_examples() {
        assert!(close(secondary_update(0.001, 0.004, 1.0), 0.005));
        assert_eq!(secondary_update(0.001, 0.0, 1.0), 0.001);
        assert!(close(secondary_update(0.0, 0.01, 0.5), 0.005));
    }

    #[test]
    fn criterion_checks() {
        assert!(ConvergenceCriterion::default().validate().is_ok());
        let bad = ConvergenceCriterion {
            eps: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = ConvergenceCriterion {
            max_iter: 2,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
