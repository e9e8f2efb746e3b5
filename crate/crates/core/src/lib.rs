//! Power-minimizing multicast of multi-quality tiled 360° video over a MIMO-OFDMA downlink.

pub mod allocation;
pub mod beamforming;
pub mod channel;
pub mod dcsolver;
pub mod geometry;
pub mod harness;
pub mod numerics;
pub mod realization;
pub mod transcoding;
