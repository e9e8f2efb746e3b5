//! Tile grid, FoV-to-tile mapping, multicast partition and per-level groups.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("direction file: {0}")]
    Csv(String),
}

const EDGE_SLACK: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileGrid {
    u_h: u32,
    u_v: u32,
}

impl TileGrid {
    pub fn new(u_h: u32, u_v: u32) -> Result<Self, GeometryError> {
        if u_h == 0 || u_v == 0 {
            return Err(GeometryError::InvalidInput(format!("grid {u_h}x{u_v} must have positive dimensions")));
        }
        Ok(Self { u_h, u_v })
    }

    pub fn u_h(&self) -> u32 {
        self.u_h
    }

    pub fn u_v(&self) -> u32 {
        self.u_v
    }

    pub fn tile_count(&self) -> usize {
        (self.u_h * self.u_v) as usize
    }

    pub fn all_tiles(&self) -> TileSet {
        (1..=self.u_h).flat_map(|h| (1..=self.u_v).map(move |v| Tile { h, v })).collect()
    }

    /// Yaw interval `[lo, hi]` in degrees covered by column `h`.
    pub fn yaw_span(&self, h: u32) -> (f64, f64) {
        let w = 360.0 / self.u_h as f64;
        ((h - 1) as f64 * w, h as f64 * w)
    }

    /// Pitch interval `[lo, hi]` covered by row `v`; row 1 touches the upper pole.
    pub fn pitch_span(&self, v: u32) -> (f64, f64) {
        let w = 180.0 / self.u_v as f64;
        (90.0 - v as f64 * w, 90.0 - (v - 1) as f64 * w)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewingDirection {
    yaw: f64,
    pitch: f64,
}

impl ViewingDirection {
    /// Yaw is wrapped into `[0, 360)`; pitch must lie in `[-90, 90]`.
    pub fn new(yaw: f64, pitch: f64) -> Result<Self, GeometryError> {
        if !yaw.is_finite() || !pitch.is_finite() || !(-90.0..=90.0).contains(&pitch) {
            return Err(GeometryError::InvalidInput(format!("direction ({yaw}, {pitch}) out of range")));
        }
        Ok(Self { yaw: yaw.rem_euclid(360.0), pitch })
    }

    pub fn yaw(&self) -> f64 {
        self.yaw
    }

    pub fn pitch(&self) -> f64 {
        self.pitch
    }

    pub fn shifted_yaw(&self, delta: f64) -> Self {
        Self { yaw: (self.yaw + delta).rem_euclid(360.0), pitch: self.pitch }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FovSpec {
    f_h: f64,
    f_v: f64,
    margin: f64,
}

impl FovSpec {
    pub fn new(f_h: f64, f_v: f64, margin: f64) -> Result<Self, GeometryError> {
        let ok = f_h > 0.0 && f_h <= 360.0 && f_v > 0.0 && f_v <= 180.0 && margin >= 0.0 && margin.is_finite();
        if !ok {
            return Err(GeometryError::InvalidInput(format!("fov {f_h}x{f_v} margin {margin} out of range")));
        }
        Ok(Self { f_h, f_v, margin })
    }

    pub fn f_h(&self) -> f64 {
        self.f_h
    }

    pub fn f_v(&self) -> f64 {
        self.f_v
    }

    pub fn margin(&self) -> f64 {
        self.margin
    }
}

/// 1-based tile index: `h` counts columns along yaw, `v` counts rows along pitch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Tile {
    pub h: u32,
    pub v: u32,
}

pub type TileSet = BTreeSet<Tile>;

fn circular_overlap(a: (f64, f64), lo: f64, hi: f64) -> bool {
    [-360.0, 0.0, 360.0].iter().any(|shift| a.0 + shift <= hi + EDGE_SLACK && a.1 + shift >= lo - EDGE_SLACK)
}

/// Tiles whose closed angular rectangle meets the FoV rectangle widened by the margin.
pub fn tiles_for_fov(dir: ViewingDirection, fov: FovSpec, grid: TileGrid) -> TileSet {
    let half_h = fov.f_h / 2.0 + fov.margin;
    let half_v = fov.f_v / 2.0 + fov.margin;
    let (ylo, yhi) = (dir.yaw - half_h, dir.yaw + half_h);
    let raw_plo = dir.pitch - half_v;
    let raw_phi = dir.pitch + half_v;
    let (plo, phi) = (raw_plo.max(-90.0), raw_phi.min(90.0));
    let full_yaw = 2.0 * half_h >= 360.0;
    let full_pitch = 2.0 * half_v >= 180.0;

    let columns: Vec<u32> =
        (1..=grid.u_h).filter(|&h| full_yaw || circular_overlap(grid.yaw_span(h), ylo, yhi)).collect();
    let mut out = TileSet::new();
    for v in 1..=grid.u_v {
        let (rlo, rhi) = grid.pitch_span(v);
        if !full_pitch && (rlo > phi + EDGE_SLACK || rhi < plo - EDGE_SLACK) {
            continue;
        }
        let at_pole = (v == 1 && phi >= 90.0 - EDGE_SLACK) || (v == grid.u_v && plo <= -90.0 + EDGE_SLACK);
        if at_pole {
            out.extend((1..=grid.u_h).map(|h| Tile { h, v }));
        } else {
            out.extend(columns.iter().map(|&h| Tile { h, v }));
        }
    }
    out
}

/// Set of users as a bitmask; ordered lexicographically by sorted member list.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct UserSet(u64);

impl UserSet {
    pub const MAX_USERS: usize = 64;

    pub fn empty() -> Self {
        Self(0)
    }

    pub fn singleton(k: usize) -> Self {
        Self(1u64 << k)
    }

    pub fn from_members(members: impl IntoIterator<Item = usize>) -> Self {
        Self(members.into_iter().fold(0u64, |acc, k| acc | (1u64 << k)))
    }

    pub fn bits(&self) -> u64 {
        self.0
    }

    pub fn insert(&mut self, k: usize) {
        self.0 |= 1u64 << k;
    }

    pub fn contains(&self, k: usize) -> bool {
        self.0 & (1u64 << k) != 0
    }

    pub fn len(&self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(&self) -> bool {
        self.0 == 0
    }

    /// Zero-based members in ascending order.
    pub fn members(&self) -> impl Iterator<Item = usize> + '_ {
        (0..64).filter(move |k| self.contains(*k))
    }

    pub fn member_vec(&self) -> Vec<usize> {
        self.members().collect()
    }
}

impl Ord for UserSet {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.members().cmp(other.members())
    }
}

impl PartialOrd for UserSet {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for UserSet {
    /// One-based member list, e.g. `{1,3}`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.members().map(|k| (k + 1).to_string()).collect();
        write!(f, "{{{}}}", parts.join(","))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Partition {
    /// Subsets with a nonempty cell, canonically ordered.
    pub index_family: Vec<UserSet>,
    pub parts: BTreeMap<UserSet, TileSet>,
    /// Subsets containing each user, canonically ordered.
    pub per_user: Vec<Vec<UserSet>>,
}

impl Partition {
    pub fn user_count(&self) -> usize {
        self.per_user.len()
    }

    pub fn cell_size(&self, s: &UserSet) -> usize {
        self.parts.get(s).map_or(0, |t| t.len())
    }
}

pub fn compute_partition(tile_sets: &[TileSet]) -> Result<Partition, GeometryError> {
    if tile_sets.is_empty() {
        return Err(GeometryError::InvalidInput("no users".into()));
    }
    if tile_sets.len() > UserSet::MAX_USERS {
        return Err(GeometryError::InvalidInput(format!("at most {} users supported", UserSet::MAX_USERS)));
    }
    if let Some(k) = tile_sets.iter().position(|g| g.is_empty()) {
        return Err(GeometryError::InvalidInput(format!("user {} has no tiles", k + 1)));
    }
    let mut owners: BTreeMap<Tile, UserSet> = BTreeMap::new();
    for (k, g) in tile_sets.iter().enumerate() {
        for t in g {
            owners.entry(*t).or_default().insert(k);
        }
    }
    let mut parts: BTreeMap<UserSet, TileSet> = BTreeMap::new();
    for (t, s) in owners {
        parts.entry(s).or_default().insert(t);
    }
    let index_family: Vec<UserSet> = parts.keys().copied().collect();
    let per_user =
        (0..tile_sets.len()).map(|k| index_family.iter().copied().filter(|s| s.contains(k)).collect()).collect();
    Ok(Partition { index_family, parts, per_user })
}

/// `(S, l) -> {k ∈ S : r_k = l}` with empty groups omitted. Levels are 1-based.
pub fn natural_groups(p: &Partition, levels: &[usize]) -> BTreeMap<(UserSet, usize), UserSet> {
    let mut out = BTreeMap::new();
    for s in &p.index_family {
        for k in s.members() {
            let entry: &mut UserSet = out.entry((*s, levels[k])).or_default();
            entry.insert(k);
        }
    }
    out
}

#[derive(Debug, Deserialize)]
struct DirectionRow {
    user_id: u64,
    yaw_deg: f64,
    pitch_deg: f64,
}

/// Reads `user_id,yaw_deg,pitch_deg` rows; output is ordered by `user_id`.
pub fn load_directions_csv(path: &Path) -> Result<Vec<(u64, ViewingDirection)>, GeometryError> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| GeometryError::Csv(format!("{}: {e}", path.display())))?;
    let mut rows = Vec::new();
    for (i, rec) in reader.deserialize::<DirectionRow>().enumerate() {
        let row = rec.map_err(|e| GeometryError::Csv(format!("{} row {}: {e}", path.display(), i + 2)))?;
        rows.push((row.user_id, ViewingDirection::new(row.yaw_deg, row.pitch_deg)?));
    }
    rows.sort_by_key(|r| r.0);
    if rows.windows(2).any(|w| w[0].0 == w[1].0) {
        return Err(GeometryError::Csv(format!("{}: duplicate user_id", path.display())));
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::circular_overlap;

    #[test]
    fn overlap_wraps_at_the_seam() {
        assert!(circular_overlap((350.0, 360.0), -5.0, 5.0));
        assert!(circular_overlap((0.0, 12.0), 355.0, 365.0));
        assert!(circular_overlap((12.0, 24.0), 24.0, 30.0));
        assert!(!circular_overlap((12.0, 24.0), 25.0, 30.0));
        assert!(!circular_overlap((180.0, 192.0), -5.0, 5.0));
    }
}
