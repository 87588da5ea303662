//! Cycle-approximate model of a CPU + integrated accelerator SoC sharing one
//! memory controller, and the write-drain covert channel that runs on it.

pub mod addrmap;
pub mod agents;
pub mod cache;
pub mod config;
pub mod covert;
pub mod dram;
pub mod gf2;
pub mod memctrl;
pub mod recover;
pub mod simcore;
pub mod system;

pub use addrmap::{AddressMapping, DramCoord, PhysAddr, XorFunction};
pub use config::SocConfig;
pub use memctrl::{AccessKind, ControllerPolicy, Origin};
pub use simcore::{ClockDomain, SimTime};
pub use system::{KernelRecord, System};
