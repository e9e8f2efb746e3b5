//! System parameters, user profiles, quality ladder and seeded Rayleigh fading draws.

use nalgebra::DVector;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::C64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ChannelError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SystemParams {
    pub antennas: usize,
    pub subcarriers: usize,
    pub bandwidth_hz: f64,
    pub noise_w: f64,
    pub alpha: f64,
}

impl SystemParams {
    pub fn validate(&self) -> Result<(), ChannelError> {
        let bad = |what: &str| Err(ChannelError::InvalidParameter(what.to_string()));
        if self.antennas == 0 {
            return bad("antennas must be positive");
        }
        if self.subcarriers == 0 {
            return bad("subcarriers must be positive");
        }
        if !(self.bandwidth_hz > 0.0 && self.bandwidth_hz.is_finite()) {
            return bad("bandwidth_hz must be positive");
        }
        if !(self.noise_w > 0.0 && self.noise_w.is_finite()) {
            return bad("noise_w must be positive");
        }
        if !(self.alpha >= 1.0 && self.alpha.is_finite()) {
            return bad("alpha must be at least 1");
        }
        Ok(())
    }
}

impl Default for SystemParams {
    fn default() -> Self {
        Self { antennas: 4, subcarriers: 64, bandwidth_hz: 39e3, noise_w: 1e-9, alpha: 1.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UserProfile {
    /// Large-scale power gain.
    pub beta: f64,
    /// Required quality level, 1-based.
    pub level: usize,
    /// Transcoding power per tile per level step, W.
    pub transcode_w: f64,
}

impl UserProfile {
    pub fn validate(&self, levels: usize) -> Result<(), ChannelError> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(ChannelError::InvalidParameter("beta must be positive".into()));
        }
        if self.level == 0 || self.level > levels {
            return Err(ChannelError::InvalidParameter(format!("level {} outside 1..={levels}", self.level)));
        }
        if !(self.transcode_w >= 0.0 && self.transcode_w.is_finite()) {
            return Err(ChannelError::InvalidParameter("transcode_w must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Per-tile encoding rates, strictly ascending; level `l` is 1-based.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QualityLadder {
    pub rates_bps: Vec<f64>,
}

impl QualityLadder {
    pub fn new(rates_bps: Vec<f64>) -> Result<Self, ChannelError> {
        let ladder = Self { rates_bps };
        ladder.validate()?;
        Ok(ladder)
    }

    pub fn validate(&self) -> Result<(), ChannelError> {
        if self.rates_bps.is_empty() {
            return Err(ChannelError::InvalidParameter("ladder needs at least one level".into()));
        }
        if self.rates_bps.iter().any(|r| !(*r > 0.0 && r.is_finite())) {
            return Err(ChannelError::InvalidParameter("ladder rates must be positive".into()));
        }
        if self.rates_bps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(ChannelError::InvalidParameter("ladder rates must be strictly ascending".into()));
        }
        Ok(())
    }

    pub fn levels(&self) -> usize {
        self.rates_bps.len()
    }

    pub fn rate(&self, level: usize) -> f64 {
        self.rates_bps[level - 1]
    }
}

/// Fading vectors for every (subcarrier, user) pair of one draw.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelRealization {
    pub seed: u64,
    pub draw_index: u64,
    antennas: usize,
    subcarriers: usize,
    users: usize,
    h: Vec<DVector<C64>>,
}

impl ChannelRealization {
    /// Builds a realization from explicit vectors indexed `[n][k]`.
    pub fn from_vectors(h: Vec<Vec<DVector<C64>>>) -> Result<Self, ChannelError> {
        let subcarriers = h.len();
        let users = h.first().map_or(0, |r| r.len());
        let antennas = h.first().and_then(|r| r.first()).map_or(0, |v| v.len());
        if subcarriers == 0 || users == 0 || antennas == 0 {
            return Err(ChannelError::InvalidParameter("empty channel".into()));
        }
        if h.iter().any(|r| r.len() != users || r.iter().any(|v| v.len() != antennas)) {
            return Err(ChannelError::InvalidParameter("ragged channel dimensions".into()));
        }
        if h.iter().flatten().flat_map(|v| v.iter()).any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(ChannelError::InvalidParameter("non-finite channel entry".into()));
        }
        Ok(Self { seed: 0, draw_index: 0, antennas, subcarriers, users, h: h.into_iter().flatten().collect() })
    }

    pub fn antennas(&self) -> usize {
        self.antennas
    }

    pub fn subcarriers(&self) -> usize {
        self.subcarriers
    }

    pub fn users(&self) -> usize {
        self.users
    }

    pub fn h(&self, n: usize, k: usize) -> &DVector<C64> {
        &self.h[n * self.users + k]
    }

    /// Keeps users in `keep` order, renumbering them from zero.
    pub fn select_users(&self, keep: &[usize]) -> Self {
        let h = (0..self.subcarriers)
            .flat_map(|n| keep.iter().map(move |&k| (n, k)))
            .map(|(n, k)| self.h(n, k).clone())
            .collect();
        Self { users: keep.len(), h, ..self.clone() }
    }
}

const KEY_TAG: u64 = 0x7663_6173_745f_6368;

fn stream_key(seed: u64, draw_index: u64) -> [u8; 32] {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&draw_index.to_le_bytes());
    key[16..24].copy_from_slice(&KEY_TAG.to_le_bytes());
    key
}

fn unit_open_closed(x: u64) -> f64 {
    1.0 - (x >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

fn unit_closed_open(x: u64) -> f64 {
    (x >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// `m` i.i.d. CN(0, 1) entries.
pub fn complex_gaussian<R: RngCore>(rng: &mut R, m: usize) -> DVector<C64> {
    DVector::from_fn(m, |_, _| {
        let radius = (-unit_open_closed(rng.next_u64()).ln()).sqrt();
        let phase = std::f64::consts::TAU * unit_closed_open(rng.next_u64());
        C64::new(radius * phase.cos(), radius * phase.sin())
    })
}

/// Circularly-symmetric CN(0, 1) entries; each (n, k) vector comes from its own cipher stream,
/// so output is independent of evaluation order and of the other dimensions.
pub fn sample_channel(seed: u64, draw_index: u64, params: &SystemParams, users: usize) -> ChannelRealization {
    let key = stream_key(seed, draw_index);
    let mut h = Vec::with_capacity(params.subcarriers * users);
    for n in 0..params.subcarriers {
        for k in 0..users {
            let mut rng = ChaCha8Rng::from_seed(key);
            rng.set_stream(((n as u64) << 32) | k as u64);
            h.push(complex_gaussian(&mut rng, params.antennas));
        }
    }
    ChannelRealization { seed, draw_index, antennas: params.antennas, subcarriers: params.subcarriers, users, h }
}
