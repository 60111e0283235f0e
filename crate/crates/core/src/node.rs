use std::fmt;

use serde::{Deserialize, Serialize};

/// Identity of a simulated node.
///
/// `Host` is the single node of the monolithic comparison mode, which runs
/// encoder and decoder together and has no consensus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum NodeId {
    Device(usize),
    Server(usize),
    Host,
}

impl NodeId {
    pub fn is_server(self) -> bool {
        matches!(self, NodeId::Server(_))
    }

    /// Devices and the monolithic host both count as user-side hardware.
    pub fn is_user_side(self) -> bool {
        !self.is_server()
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NodeId::Device(i) => write!(f, "device-{i}"),
            NodeId::Server(i) => write!(f, "server-{i}"),
            NodeId::Host => f.write_str("host"),
        }
    }
}
