//! Common shape of every component attached to the hub.
//!
//! A node is a state machine driven by three inputs: start, its own timer,
//! and incoming frames. It never touches a clock or a socket itself, so the
//! same code runs under the virtual-time scheduler and the wall-clock
//! driver.

use thiserror::Error;

use crate::gateway::GatewayError;
use crate::hub::Frame;
use crate::mas::MasError;
use crate::microgrid::MicrogridError;

/// Index of a directly reachable peer (agent-to-agent channels).
pub type PeerId = usize;

#[derive(Debug, Default)]
pub struct NodeIo {
    pub to_hub: Vec<Frame>,
    pub to_peers: Vec<(PeerId, Frame)>,
    /// Requested wake-up; replaces any earlier request.
    pub wake_at: Option<u64>,
}

impl NodeIo {
    pub fn clear(&mut self) {
        self.to_hub.clear();
        self.to_peers.clear();
        self.wake_at = None;
    }
}

#[derive(Debug, Error)]
pub enum NodeError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Microgrid(#[from] MicrogridError),
    #[error(transparent)]
    Mas(#[from] MasError),
}

pub trait Node: Send {
    fn name(&self) -> String;
    fn start(&mut self, now_us: u64, io: &mut NodeIo) -> Result<(), NodeError>;
    fn on_timer(&mut self, now_us: u64, io: &mut NodeIo) -> Result<(), NodeError>;
    fn on_frame(&mut self, now_us: u64, frame: Frame, io: &mut NodeIo) -> Result<(), NodeError>;
}
