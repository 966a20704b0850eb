//! Neighbor-only secondary frequency control: one agent per storage unit,
//! average consensus on the frequency deviation, setpoints released on
//! convergence.

pub mod agent;
pub mod graph;

use std::collections::VecDeque;

use thiserror::Error;

use crate::hub::{encode_frame, parse_frame, Frame};
use crate::node::NodeIo;

pub use agent::{AgentConfig, AgentNode, ConsensusEvent, CycleOutcome, Transport};
pub use graph::{
    consensus_round, metropolis_weights, run_consensus, secondary_update, AgentGraph,
    ConvergenceCriterion,
};

#[derive(Debug, Error, PartialEq)]
pub enum MasError {
    #[error("agent graph is disconnected")]
    DisconnectedGraph,
    #[error("invalid agent graph: {0}")]
    InvalidGraph(String),
    #[error("invalid convergence criterion: {0}")]
    InvalidCriterion(String),
    #[error("consensus did not converge within {max_iter} rounds")]
    NoConvergence { max_iter: u64 },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
}

/// Runs one consensus cycle of real agents over zero-delay point-to-point
/// channels. Every frame goes through the wire encoding. Returns the agents
/// once no message is in flight.
pub fn simulate_direct(
    graph: &AgentGraph,
    x0: &[f64],
    crit: ConvergenceCriterion,
) -> Result<Vec<AgentNode>, MasError> {
    if x0.len() != graph.n() {
        return Err(MasError::DimensionMismatch {
            expected: graph.n(),
            got: x0.len(),
        });
    }
    let cfg = AgentConfig {
        crit,
        transport: Transport::Direct,
        ..AgentConfig::default()
    };
    let mut agents = (0..graph.n())
        .map(|i| AgentNode::new(i, graph, cfg))
        .collect::<Result<Vec<_>, _>>()?;
    let mut queue: VecDeque<(usize, Vec<u8>)> = VecDeque::new();
    let mut io = NodeIo::default();
    let flush = |io: &mut NodeIo, queue: &mut VecDeque<(usize, Vec<u8>)>| {
        for (to, f) in io.to_peers.drain(..) {
            queue.push_back((to, encode_frame(&f)));
        }
        io.clear();
    };
    for (i, a) in agents.iter_mut().enumerate() {
        a.begin_cycle(0, x0[i], 0, &mut io);
        flush(&mut io, &mut queue);
    }
    while let Some((to, bytes)) = queue.pop_front() {
        let frame: Frame = parse_frame(&bytes).expect("agents emit well-formed frames");
        crate::node::Node::on_frame(&mut agents[to], 0, frame, &mut io)
            .expect("agents never fail on frames");
        flush(&mut io, &mut queue);
    }
    Ok(agents)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn direct_agents_match_centralized_rounds() {
        let g = AgentGraph::ring(4).unwrap();
        let x0 = [1.0, 2.0, 3.0, 4.0];
        let crit = ConvergenceCriterion {
            eps: 1e-9,
            r: 3,
            max_iter: 500,
        };
        let agents = simulate_direct(&g, &x0, crit).unwrap();
        let mut x = x0.to_vec();
        for k in 1..=5 {
            x = consensus_round(&x, g.weights()).unwrap();
            for (i, a) in agents.iter().enumerate() {
                assert!((a.x_history()[k] - x[i]).abs() < 1e-15);
            }
        }
        for a in &agents {
            let last = *a.x_history().last().unwrap();
            assert!((last - 2.5).abs() < 1e-8, "{last}");
            assert_eq!(a.events().len(), 1);
            assert_eq!(a.events()[0].outcome, CycleOutcome::Converged);
            assert_eq!(a.setpoints_sent(), 1);
        }
    }

    #[test]
    fn length_mismatch() {
        let g = AgentGraph::ring(3).unwrap();
        assert!(matches!(
            simulate_direct(&g, &[1.0], ConvergenceCriterion::default()),
            Err(MasError::DimensionMismatch { .. })
        ));
    }
}
