//! One channel draw: beams for every (message, subcarrier) block, then subcarrier and power allocation.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::allocation::{assemble_solution, solve_allocation, AllocError, AllocationSolution, Message, MessageDemand};
use crate::beamforming::{
    asymptotic_beamformer, mrt_beamformer, solve_qos_sdr, BeamError, BeamInstance, BeamSolution, BeamStatus, MrtMode,
};
use crate::channel::{ChannelRealization, SystemParams};
use crate::dcsolver::{solve_general, DcError, DcProblem, DcSettings};
use crate::geometry::UserSet;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RealizationError {
    #[error(transparent)]
    Beam(#[from] BeamError),
    #[error(transparent)]
    Allocation(#[from] AllocError),
    #[error(transparent)]
    Dc(#[from] DcError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BeamDesign {
    /// Relaxation with rank reduction; groups above three users go to the DC solver.
    Relaxation,
    Asymptotic,
    /// Per-user maximum ratio; every group must be a single user.
    UnicastMrt,
    GroupMrt,
    /// Joint DC solve of beams and allocation.
    Dc,
}

/// Largest group the relaxation path accepts before deferring to the DC solver.
pub const RELAXATION_MAX_GROUP: usize = 3;

#[derive(Clone, Debug)]
pub struct RealizationOutcome {
    pub solution: AllocationSolution,
    /// Design actually used; differs from the request only on DC fallback.
    pub design: BeamDesign,
    /// Blocks whose rank reduction stalled; their beams are feasible but not certified optimal.
    pub rank_gt_one: usize,
    pub ties: usize,
    pub converged: bool,
}

/// Beams for one draw keyed by receiving users and subcarrier; reusable across message sets.
#[derive(Default)]
pub struct BeamCache {
    beams: HashMap<(BeamDesign, UserSet, usize), BeamSolution>,
}

impl BeamCache {
    pub fn len(&self) -> usize {
        self.beams.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beams.is_empty()
    }
}

fn block_beam(
    channel: &ChannelRealization,
    members: &[usize],
    betas: &[f64],
    params: &SystemParams,
    design: BeamDesign,
    n: usize,
) -> Result<BeamSolution, BeamError> {
    let users = members.iter().map(|&k| (channel.h(n, k).clone(), betas[k])).collect();
    let inst = BeamInstance::new(users, params.antennas, params.noise_w)?;
    match design {
        BeamDesign::Relaxation => solve_qos_sdr(&inst),
        BeamDesign::Asymptotic => asymptotic_beamformer(&inst),
        BeamDesign::UnicastMrt => mrt_beamformer(&inst, MrtMode::PerUser),
        BeamDesign::GroupMrt => mrt_beamformer(&inst, MrtMode::Group),
        BeamDesign::Dc => Err(BeamError::InvalidInput("DC beams come from the joint solve".into())),
    }
}

fn dc_outcome(
    channel: &ChannelRealization,
    messages: &[Message],
    betas: &[f64],
    params: &SystemParams,
    dc: &DcSettings,
) -> Result<RealizationOutcome, RealizationError> {
    let problem = DcProblem { messages: messages.to_vec(), channel, betas: betas.to_vec(), params: *params };
    let r = solve_general(&problem, dc)?;
    Ok(RealizationOutcome {
        ties: r.ties,
        converged: r.converged,
        solution: r.solution,
        design: BeamDesign::Dc,
        rank_gt_one: 0,
    })
}

/// Solves one draw for `messages` (keys strictly increasing, zero demand allowed).
pub fn solve_realization(
    channel: &ChannelRealization,
    messages: &[Message],
    betas: &[f64],
    params: &SystemParams,
    design: BeamDesign,
    dc: &DcSettings,
    cache: Option<&mut BeamCache>,
) -> Result<RealizationOutcome, RealizationError> {
    let active = |m: &&Message| m.demand_bps > 0.0;
    let needs_dc = design == BeamDesign::Dc
        || (design == BeamDesign::Relaxation
            && messages.iter().filter(active).any(|m| m.members.len() > RELAXATION_MAX_GROUP));
    if needs_dc {
        return dc_outcome(channel, messages, betas, params, dc);
    }
    let mut local = BeamCache::default();
    let cache = cache.unwrap_or(&mut local);
    let subcarriers = params.subcarriers;
    let mut demands = Vec::with_capacity(messages.len());
    let mut beams = Vec::with_capacity(messages.len());
    let mut rank_gt_one = 0;
    for m in messages {
        if m.demand_bps <= 0.0 {
            demands.push(MessageDemand { key: m.key, demand_bps: 0.0, q: vec![1.0; subcarriers] });
            beams.push(vec![]);
            continue;
        }
        let set = UserSet::from_members(m.members.iter().copied());
        let mut row = Vec::with_capacity(subcarriers);
        for n in 0..subcarriers {
            let key = (design, set, n);
            let beam = match cache.beams.get(&key) {
                Some(b) => b.clone(),
                None => {
                    let b = block_beam(channel, &m.members, betas, params, design, n)?;
                    cache.beams.insert(key, b.clone());
                    b
                }
            };
            rank_gt_one += usize::from(beam.status == BeamStatus::RankGtOne);
            row.push(beam);
        }
        demands.push(MessageDemand { key: m.key, demand_bps: m.demand_bps, q: row.iter().map(|b| b.q).collect() });
        beams.push(row);
    }
    let alloc = solve_allocation(&demands, params.bandwidth_hz)?;
    let solution = assemble_solution(&demands, &alloc, &beams, params.antennas)?;
    Ok(RealizationOutcome { ties: alloc.ties, converged: alloc.dual_converged, solution, design, rank_gt_one })
}
