use std::collections::VecDeque;

use nalgebra::{DMatrix, SymmetricEigen};
use proptest::prelude::*;

use gridloop::hub::{encode_frame, parse_frame, Frame};
use gridloop::mas::{
    consensus_round, AgentConfig, AgentGraph, AgentNode, ConvergenceCriterion, CycleOutcome, Transport,
};
use gridloop::microgrid::{ess_setpoint_topic, steady_state_frequency, EssParams, MicrogridState};
use gridloop::node::{Node, NodeIo};

fn graph(kind: u8, n: usize) -> AgentGraph {
    match kind % 3 {
        0 => AgentGraph::ring(n),
        1 => AgentGraph::path(n),
        _ => AgentGraph::complete(n),
    }
    .unwrap()
}

/// Second largest eigenvalue modulus of the (symmetric) weight matrix.
fn lambda2(g: &AgentGraph) -> f64 {
    let n = g.n();
    let w = DMatrix::from_fn(n, n, |i, j| g.weights()[i][j]);
    let mut mods: Vec<f64> = SymmetricEigen::new(w).eigenvalues.iter().map(|l| l.abs()).collect();
    mods.sort_by(|a, b| b.total_cmp(a));
    assert!((mods[0] - 1.0).abs() < 1e-12);
    mods.get(1).copied().unwrap_or(0.0)
}

fn inputs() -> impl Strategy<Value = (u8, Vec<f64>)> {
    (any::<u8>(), prop::collection::vec(-10.0..10.0f64, 2..=6))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn rounds_conserve_the_sum((kind, x0) in inputs()) {
        let g = graph(kind, x0.len());
        let s0: f64 = x0.iter().sum();
        let mut x = x0.clone();
        for _ in 0..50 {
            x = consensus_round(&x, g.weights()).unwrap();
            prop_assert!((x.iter().sum::<f64>() - s0).abs() < 1e-12);
        }
    }

    #[test]
    fn disagreement_contracts_by_lambda2((kind, x0) in inputs()) {
        let g = graph(kind, x0.len());
        let n = x0.len() as f64;
        let mean = x0.iter().sum::<f64>() / n;
        let l2 = lambda2(&g);
        let dev = |x: &[f64]| x.iter().map(|v| (v - mean).abs()).fold(0.0, f64::max);
        let dev2 = |x: &[f64]| x.iter().map(|v| (v - mean).powi(2)).sum::<f64>().sqrt();
        let (e0, e0_2) = (dev(&x0), dev2(&x0));
        let mut x = x0.clone();
        for k in 1..=40 {
            x = consensus_round(&x, g.weights()).unwrap();
            let bound = l2.powi(k);
            // Euclidean form holds for any symmetric doubly stochastic W.
            prop_assert!(dev2(&x) <= bound * e0_2 + 1e-12);
            prop_assert!(dev(&x) <= bound * e0 * n.sqrt() + 1e-12);
        }
    }

    #[test]
    fn agents_follow_the_matrix_iteration((kind, x0) in inputs(), k in 1usize..40) {
        let g = graph(kind, x0.len());
        let hold = ConvergenceCriterion { eps: 1e-300, r: 60, max_iter: 60 };
        let agents = gridloop::mas::simulate_direct(&g, &x0, hold).unwrap();
        let mut x = x0.clone();
        for _ in 0..k {
            x = consensus_round(&x, g.weights()).unwrap();
        }
        for (i, a) in agents.iter().enumerate() {
            prop_assert!((a.x_history()[k] - x[i]).abs() <= 1e-12);
        }
    }
}

/// Runs cycles of persistent direct-transport agents; returns, per cycle,
/// each agent's setpoint publications alongside its converged events.
struct Fleet {
    agents: Vec<AgentNode>,
}

impl Fleet {
    fn new(g: &AgentGraph, k_s: f64) -> Self {
        let cfg = AgentConfig {
            crit: ConvergenceCriterion { eps: 1e-12, r: 3, max_iter: 2000 },
            k_s,
            transport: Transport::Direct,
            ..AgentConfig::default()
        };
        Self {
            agents: (0..g.n()).map(|i| AgentNode::new(i, g, cfg).unwrap()).collect(),
        }
    }

    /// Returns true if a setpoint ever appeared in a step that did not also
    /// log a converged event for the same agent.
    fn cycle(&mut self, id: u64, x0: &[f64]) -> bool {
        let mut queue: VecDeque<(usize, Vec<u8>)> = VecDeque::new();
        let mut io = NodeIo::default();
        let mut ungated = false;
        let mut check = |a: &AgentNode, before: usize, io: &mut NodeIo, queue: &mut VecDeque<(usize, Vec<u8>)>| {
            let setpoints = io
                .to_hub
                .iter()
                .filter(|f| matches!(f, Frame::Pub(t) if t.topic == ess_setpoint_topic(a.index() + 1)))
                .count();
            let converged = a.events()[before..].iter().filter(|e| e.outcome == CycleOutcome::Converged).count();
            ungated |= setpoints > converged;
            for (to, f) in io.to_peers.drain(..) {
                queue.push_back((to, encode_frame(&f)));
            }
            io.clear();
        };
        for (i, a) in self.agents.iter_mut().enumerate() {
            let before = a.events().len();
            a.begin_cycle(id, x0[i], id, &mut io);
            check(a, before, &mut io, &mut queue);
        }
        while let Some((to, bytes)) = queue.pop_front() {
            let a = &mut self.agents[to];
            let before = a.events().len();
            a.on_frame(id, parse_frame(&bytes).unwrap(), &mut io).unwrap();
            check(a, before, &mut io, &mut queue);
        }
        ungated
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn setpoints_only_at_convergence(kind in any::<u8>(), n in 2usize..=6, seeds in prop::collection::vec(-0.05..0.05f64, 1..6)) {
        let g = graph(kind, n);
        let mut fleet = Fleet::new(&g, 1.0);
        let mut sent = 0;
        for (c, &dev) in seeds.iter().enumerate() {
            // Alternate between a real deviation and none at all.
            let x0 = vec![if c % 2 == 0 { dev } else { 0.0 }; n];
            prop_assert!(!fleet.cycle(c as u64 + 1, &x0));
            let now: u64 = fleet.agents.iter().map(|a| a.setpoints_sent()).sum();
            if c % 2 == 1 {
                prop_assert_eq!(now, sent, "zero deviation moved a setpoint");
            }
            sent = now;
        }
    }

    /// Measure, agree, correct: the loop drives the steady-state frequency
    /// to nominal within ten cycles for any load the fleet can carry.
    #[test]
    fn closed_loop_restores_frequency(kind in any::<u8>(), n in 2usize..=6, load in -0.9..0.9f64, m in 0.1..2.0f64) {
        let g = graph(kind, n);
        let mut fleet = Fleet::new(&g, 1.0);
        let mut grid = MicrogridState::new((1..=n).map(|i| EssParams::new(i, m)).collect());
        grid.breakers.load2 = true;
        grid.p_load2 = load * n as f64;
        let mut f = steady_state_frequency(&grid).unwrap();
        let mut cycles = 0;
        while (f - grid.f_nom).abs() >= 1e-3 {
            cycles += 1;
            prop_assert!(cycles <= 10, "still {f} after 10 cycles");
            let x0 = vec![grid.f_nom - f; n];
            fleet.cycle(cycles, &x0);
            for (e, a) in grid.ess.iter_mut().zip(&fleet.agents) {
                e.params.u = a.u();
            }
            f = steady_state_frequency(&grid).unwrap();
        }
    }
}
