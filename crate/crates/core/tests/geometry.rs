use std::collections::BTreeSet;

use proptest::prelude::*;
use vrcast::geometry::*;

fn rect(h: std::ops::RangeInclusive<u32>, v: std::ops::RangeInclusive<u32>) -> TileSet {
    h.flat_map(|a| v.clone().map(move |b| Tile { h: a, v: b })).collect()
}

fn tiles(list: &[(u32, u32)]) -> TileSet {
    list.iter().map(|&(h, v)| Tile { h, v }).collect()
}

fn three_view_sets() -> Vec<TileSet> {
    vec![rect(2..=5, 1..=3), rect(2..=5, 2..=4), rect(4..=7, 2..=4)]
}

/// Center-distance test: a column meets the FoV iff the circular distance between centers
/// is at most the sum of half widths.
fn oracle_tiles(dir: ViewingDirection, fov: FovSpec, grid: TileGrid) -> TileSet {
    let mut out = TileSet::new();
    let cw = 360.0 / grid.u_h() as f64;
    let rw = 180.0 / grid.u_v() as f64;
    let fh = fov.f_h() / 2.0 + fov.margin();
    let fv = fov.f_v() / 2.0 + fov.margin();
    let top = dir.pitch() + fv;
    let bottom = dir.pitch() - fv;
    for h in 1..=grid.u_h() {
        let center = (h as f64 - 0.5) * cw;
        let d = (center - dir.yaw()).rem_euclid(360.0);
        let d = d.min(360.0 - d);
        let yaw_hit = fh * 2.0 >= 360.0 || d <= cw / 2.0 + fh + 1e-9;
        for v in 1..=grid.u_v() {
            let pc = 90.0 - (v as f64 - 0.5) * rw;
            let pitch_hit = fv * 2.0 >= 180.0 || (pc - dir.pitch()).abs() <= rw / 2.0 + fv + 1e-9;
            let pole = (v == 1 && top >= 90.0) || (v == grid.u_v() && bottom <= -90.0);
            if pitch_hit && (yaw_hit || pole) {
                out.insert(Tile { h, v });
            }
        }
    }
    out
}

#[test]
fn full_sphere_fov_covers_every_tile() {
    let grid = TileGrid::new(8, 4).unwrap();
    let fov = FovSpec::new(360.0, 180.0, 0.0).unwrap();
    for (y, p) in [(0.0, 0.0), (123.0, 45.0), (359.0, -80.0)] {
        let t = tiles_for_fov(ViewingDirection::new(y, p).unwrap(), fov, grid);
        assert_eq!(t.len(), 32);
    }
}

#[test]
fn narrow_fov_at_origin_matches_oracle() {
    let grid = TileGrid::new(8, 4).unwrap();
    let eps = 1e-6;
    let fov = FovSpec::new(45.0 - eps, 45.0 - eps, 0.0).unwrap();
    let dir = ViewingDirection::new(0.0, 0.0).unwrap();
    let t = tiles_for_fov(dir, fov, grid);
    assert_eq!(t, oracle_tiles(dir, fov, grid));
    assert_eq!(t, tiles(&[(1, 2), (1, 3), (8, 2), (8, 3)]));
}

#[test]
fn margin_only_grows_the_set() {
    let grid = TileGrid::new(30, 15).unwrap();
    let dir = ViewingDirection::new(180.0, 0.0).unwrap();
    let a = tiles_for_fov(dir, FovSpec::new(100.0, 100.0, 0.0).unwrap(), grid);
    let b = tiles_for_fov(dir, FovSpec::new(100.0, 100.0, 15.0).unwrap(), grid);
    assert!(a.is_subset(&b));
    assert!(b.len() > a.len());
}

#[test]
fn yaw_wraps_across_zero() {
    let grid = TileGrid::new(8, 4).unwrap();
    let fov = FovSpec::new(60.0, 30.0, 0.0).unwrap();
    let t = tiles_for_fov(ViewingDirection::new(350.0, 10.0).unwrap(), fov, grid);
    let cols: BTreeSet<u32> = t.iter().map(|x| x.h).collect();
    assert_eq!(cols, [1, 8].into_iter().collect());
}

#[test]
fn pole_row_is_taken_whole() {
    let grid = TileGrid::new(8, 4).unwrap();
    let fov = FovSpec::new(45.0, 90.0, 0.0).unwrap();
    let t = tiles_for_fov(ViewingDirection::new(100.0, 60.0).unwrap(), fov, grid);
    assert_eq!(t.iter().filter(|x| x.v == 1).count(), 8);
}

#[test]
fn three_view_partition() {
    let p = compute_partition(&three_view_sets()).unwrap();
    let s = |m: &[usize]| UserSet::from_members(m.iter().map(|k| k - 1));
    assert_eq!(p.parts[&s(&[1])], tiles(&[(2, 1), (3, 1), (4, 1), (5, 1)]));
    assert_eq!(p.parts[&s(&[2])], tiles(&[(2, 4), (3, 4)]));
    assert_eq!(p.parts[&s(&[3])], tiles(&[(6, 2), (6, 3), (6, 4), (7, 2), (7, 3), (7, 4)]));
    assert_eq!(p.parts[&s(&[1, 2])], tiles(&[(2, 2), (2, 3), (3, 2), (3, 3)]));
    assert_eq!(p.parts[&s(&[2, 3])], tiles(&[(4, 4), (5, 4)]));
    assert_eq!(p.parts[&s(&[1, 2, 3])], tiles(&[(4, 2), (4, 3), (5, 2), (5, 3)]));
    assert_eq!(p.index_family.len(), 6);
    assert!(!p.parts.contains_key(&s(&[1, 3])));
    let order: Vec<String> = p.index_family.iter().map(|u| u.to_string()).collect();
    assert_eq!(order, ["{1}", "{1,2}", "{1,2,3}", "{2}", "{2,3}", "{3}"]);
}

#[test]
fn three_view_groups() {
    let p = compute_partition(&three_view_sets()).unwrap();
    let g = natural_groups(&p, &[1, 1, 2]);
    let s = |m: &[usize]| UserSet::from_members(m.iter().map(|k| k - 1));
    assert_eq!(g[&(s(&[1]), 1)], s(&[1]));
    assert_eq!(g[&(s(&[1, 2]), 1)], s(&[1, 2]));
    assert_eq!(g[&(s(&[2]), 1)], s(&[2]));
    assert_eq!(g[&(s(&[3]), 2)], s(&[3]));
    assert_eq!(g[&(s(&[1, 2, 3]), 1)], s(&[1, 2]));
    assert_eq!(g[&(s(&[1, 2, 3]), 2)], s(&[3]));
    assert_eq!(g[&(s(&[2, 3]), 1)], s(&[2]));
    assert_eq!(g[&(s(&[2, 3]), 2)], s(&[3]));
}

#[test]
fn single_user_partition() {
    let g = rect(1..=3, 1..=2);
    let p = compute_partition(std::slice::from_ref(&g)).unwrap();
    assert_eq!(p.index_family, vec![UserSet::singleton(0)]);
    assert_eq!(p.parts[&UserSet::singleton(0)], g);
}

#[test]
fn disjoint_users_give_singletons() {
    let sets = vec![rect(1..=2, 1..=1), rect(3..=4, 1..=1), rect(5..=6, 2..=2)];
    let p = compute_partition(&sets).unwrap();
    for (k, g) in sets.iter().enumerate() {
        assert_eq!(&p.parts[&UserSet::singleton(k)], g);
    }
    let groups = natural_groups(&p, &[1, 2, 3]);
    assert!(groups.values().all(|u| u.len() == 1));
}

#[test]
fn homogeneous_levels_group_whole_subsets() {
    let p = compute_partition(&three_view_sets()).unwrap();
    let g = natural_groups(&p, &[4, 4, 4]);
    for s in &p.index_family {
        assert_eq!(g[&(*s, 4)], *s);
    }
    assert_eq!(g.len(), p.index_family.len());
}

#[test]
fn empty_user_rejected() {
    assert!(compute_partition(&[rect(1..=1, 1..=1), TileSet::new()]).is_err());
}

#[test]
fn csv_directions_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.csv");
    std::fs::write(&path, "user_id,yaw_deg,pitch_deg\n2, 370.0, -10\n1,15.5,20\n").unwrap();
    let rows = load_directions_csv(&path).unwrap();
    assert_eq!(rows[0].0, 1);
    assert!((rows[1].1.yaw() - 10.0).abs() < 1e-12);
    std::fs::write(&path, "user_id,yaw_deg,pitch_deg\n1,0,95\n").unwrap();
    assert!(load_directions_csv(&path).is_err());
}

fn arb_sets() -> impl Strategy<Value = Vec<TileSet>> {
    proptest::collection::vec(
        (1u32..=6, 1u32..=6, 1u32..=4, 1u32..=4).prop_map(|(h, v, w, d)| rect(h..=(h + w).min(8), v..=(v + d).min(6))),
        1..6,
    )
}

proptest! {
    #[test]
    fn partition_covers_and_reconstructs(sets in arb_sets()) {
        let p = compute_partition(&sets).unwrap();
        let union: TileSet = sets.iter().flatten().copied().collect();
        let total: usize = p.parts.values().map(|t| t.len()).sum();
        prop_assert_eq!(total, union.len());
        for (k, g) in sets.iter().enumerate() {
            let rebuilt: TileSet = p.per_user[k].iter().flat_map(|s| p.parts[s].iter().copied()).collect();
            prop_assert_eq!(&rebuilt, g);
        }
        prop_assert!(p.parts.values().all(|t| !t.is_empty()));
        let mut sorted = p.index_family.clone();
        sorted.sort();
        prop_assert_eq!(sorted, p.index_family.clone());
    }

    #[test]
    fn fov_matches_oracle_and_is_monotone(yaw in 0.0f64..360.0, pitch in -90.0f64..90.0,
                                           fh in 5.0f64..200.0, fv in 5.0f64..120.0, margin in 0.0f64..30.0) {
        let grid = TileGrid::new(30, 15).unwrap();
        let dir = ViewingDirection::new(yaw, pitch).unwrap();
        let fov = FovSpec::new(fh, fv, margin).unwrap();
        let t = tiles_for_fov(dir, fov, grid);
        prop_assert!(!t.is_empty());
        prop_assert_eq!(&t, &oracle_tiles(dir, fov, grid));
        let wider = tiles_for_fov(dir, FovSpec::new((fh + 10.0).min(360.0), (fv + 10.0).min(180.0), margin + 1.0).unwrap(), grid);
        prop_assert!(t.is_subset(&wider));
    }
}
