use std::collections::BTreeSet;
use std::f64::consts::LN_2;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vrcast::allocation::MessageKey;
use vrcast::channel::{sample_channel, ChannelRealization, QualityLadder, SystemParams, UserProfile};
use vrcast::geometry::{compute_partition, natural_groups, Tile, TileSet, UserSet};
use vrcast::realization::{solve_realization, BeamDesign};
use vrcast::transcoding::*;

/// Full-frame ladder spread over a 30×15 grid.
fn tile_ladder() -> QualityLadder {
    QualityLadder::new([2.5e6, 5e6, 8e6, 12e6, 16e6].iter().map(|r| r / 450.0).collect()).unwrap()
}

fn tiles(range: std::ops::Range<u32>) -> TileSet {
    range.map(|h| Tile { h, v: 0 }).collect()
}

fn instance(sets: Vec<TileSet>, levels: &[usize], transcode_w: f64, params: SystemParams) -> TranscodeInstance {
    let partition = compute_partition(&sets).unwrap();
    let users = levels.iter().map(|&level| UserProfile { beta: 1.0, level, transcode_w }).collect();
    TranscodeInstance { partition, users, ladder: tile_ladder(), params }
}

fn small_params() -> SystemParams {
    SystemParams { antennas: 4, subcarriers: 8, ..SystemParams::default() }
}

fn draws(inst: &TranscodeInstance, seed: u64, count: u64) -> Vec<ChannelRealization> {
    (0..count).map(|d| sample_channel(seed, d, &inst.params, inst.users.len())).collect()
}

/// Users 2 and 3 (1-based) share exactly a two-tile cell; user 1 is elsewhere.
fn shared_pair(r2: usize, r3: usize, e: f64) -> TranscodeInstance {
    instance(vec![tiles(0..3), tiles(5..7), tiles(5..7)], &[1, r2, r3], e, small_params())
}

/// Overlapping cells with loads heavy enough that merging levels can pay off.
fn random_instance(seed: u64, users: usize, levels: usize) -> TranscodeInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sets = (0..users)
        .map(|_| {
            let a = rng.gen_range(0..10);
            tiles(a..a + rng.gen_range(4..16))
        })
        .collect();
    let required: Vec<usize> = (0..users).map(|_| rng.gen_range(1..=levels)).collect();
    let e = [0.0, 1e-11, 1e-10, 1e-9][rng.gen_range(0..4)];
    let mut inst = instance(sets, &required, e, small_params());
    inst.ladder = QualityLadder::new(tile_ladder().rates_bps[..levels].to_vec()).unwrap();
    for u in &mut inst.users {
        u.beta = rng.gen_range(0.5..2.0);
    }
    inst
}

#[test]
fn transcoding_power_examples() {
    let inst = shared_pair(1, 2, 1e-6);
    let natural = QualitySelection::natural(&inst);
    assert_eq!(transcoding_power(&natural, &inst.partition, &inst.users), 0.0);
    let s = UserSet::from_members([1, 2]);
    assert_eq!(inst.partition.cell_size(&s), 2);
    let mut choices = natural.choices().to_vec();
    for c in choices.iter_mut().filter(|c| c.set == s) {
        c.level = 2;
    }
    let x = QualitySelection::from_choices(choices);
    x.validate(&inst, true).unwrap();
    assert!((transcoding_power(&x, &inst.partition, &inst.users) - 2e-6).abs() < 1e-18);
    let doubled: Vec<UserProfile> =
        inst.users.iter().map(|u| UserProfile { transcode_w: 2.0 * u.transcode_w, ..*u }).collect();
    assert!((transcoding_power(&x, &inst.partition, &doubled) - 4e-6).abs() < 1e-18);
}

#[test]
fn enumeration_examples() {
    let single = instance(vec![tiles(0..4)], &[3], 1e-6, small_params());
    assert_eq!(enumerate_selections(&single, true, DEFAULT_ENUMERATION_CAP).unwrap().len(), 1);
    let inst = shared_pair(1, 2, 1e-6);
    let all = enumerate_selections(&inst, true, DEFAULT_ENUMERATION_CAP).unwrap();
    assert_eq!(all.len(), 2);
    assert_eq!(all[0], QualitySelection::natural(&inst));
    let s = UserSet::from_members([1, 2]);
    assert!(all.iter().all(|x| x.level(&s, 2) == Some(2)));
    assert_eq!(all[1].level(&s, 1), Some(2));
}

#[test]
fn enumeration_count_matches_combinatorial_oracle() {
    for seed in 0..40 {
        let inst = random_instance(seed, 2 + seed as usize % 3, 5);
        let levels = inst.required_levels();
        let mut restricted = 1u128;
        let mut free = 1u128;
        for s in inst.partition.parts.keys() {
            let members: Vec<usize> = s.members().collect();
            let cell_levels: BTreeSet<usize> = members.iter().map(|&k| levels[k]).collect();
            for &k in &members {
                restricted *= cell_levels.iter().filter(|&&l| l >= levels[k]).count() as u128;
                free *= (inst.ladder.levels() - levels[k] + 1) as u128;
            }
        }
        assert_eq!(selection_count(&inst, true), restricted);
        assert_eq!(selection_count(&inst, false), free);
        if restricted <= 5000 {
            let all = enumerate_selections(&inst, true, DEFAULT_ENUMERATION_CAP).unwrap();
            assert_eq!(all.len() as u128, restricted);
            let distinct: BTreeSet<Vec<Choice>> = all.iter().map(|x| x.choices().to_vec()).collect();
            assert_eq!(distinct.len(), all.len());
            for x in &all {
                x.validate(&inst, true).unwrap();
            }
        }
    }
}

#[test]
fn enumeration_refuses_above_cap() {
    let inst = random_instance(3, 4, 5);
    let count = selection_count(&inst, false);
    assert!(count > 1);
    match enumerate_selections(&inst, false, count - 1) {
        Err(TranscodeError::CapExceeded { count: c, cap }) => assert_eq!((c, cap), (count, count - 1)),
        other => panic!("expected cap error, got {other:?}"),
    }
}

#[test]
fn natural_messages_are_the_natural_groups() {
    for seed in 0..20 {
        let inst = random_instance(50 + seed, 4, 3);
        let msgs = QualitySelection::natural(&inst).messages(&inst);
        let groups = natural_groups(&inst.partition, &inst.required_levels());
        assert_eq!(msgs.len(), groups.len());
        for (m, ((s, l), g)) in msgs.iter().zip(&groups) {
            assert_eq!(m.key, MessageKey { set: *s, level: *l });
            assert_eq!(m.members, g.member_vec());
            assert_eq!(m.demand_bps, inst.partition.cell_size(s) as f64 * inst.ladder.rate(*l));
        }
    }
}

#[test]
fn merging_levels_removes_one_message() {
    let inst = shared_pair(1, 2, 1e-6);
    let all = enumerate_selections(&inst, true, DEFAULT_ENUMERATION_CAP).unwrap();
    let (natural, merged) = (all[0].messages(&inst), all[1].messages(&inst));
    assert_eq!(merged.len() + 1, natural.len());
    let s = UserSet::from_members([1, 2]);
    let m = merged.iter().find(|m| m.key.set == s).unwrap();
    assert_eq!(m.members, vec![1, 2]);
    assert_eq!(m.demand_bps, 2.0 * inst.ladder.rate(2));
}

#[test]
fn natural_selection_matches_no_transcoding_solve() {
    let inst = random_instance(7, 3, 3);
    let natural = QualitySelection::natural(&inst);
    let solver = InnerSolver::default();
    for h in draws(&inst, 11, 3) {
        let a = solve_with_transcoding(&inst, &natural, &h, &solver).unwrap();
        let msgs = natural.messages(&inst);
        let b = solve_realization(&h, &msgs, &inst.betas(), &inst.params, BeamDesign::Relaxation, &solver.dc, None)
            .unwrap();
        assert_eq!(a.solution.objective_w, b.solution.objective_w);
        assert_eq!(a.solution.messages, b.solution.messages);
    }
}

#[test]
fn exhaustive_prefers_natural_under_heavy_penalty() {
    let inst = shared_pair(1, 2, 10.0);
    let all = enumerate_selections(&inst, true, DEFAULT_ENUMERATION_CAP).unwrap();
    let r = solve_exhaustive(&inst, &all, &draws(&inst, 1, 10), &InnerSolver::default()).unwrap();
    assert_eq!(r.best.x, QualitySelection::natural(&inst));
    assert_eq!(r.best.transcode_power, 0.0);
}

#[test]
fn exhaustive_picks_measured_argmin() {
    let inst = shared_pair(1, 2, 0.0);
    let all = enumerate_selections(&inst, true, DEFAULT_ENUMERATION_CAP).unwrap();
    let hs = draws(&inst, 2, 20);
    let solver = InnerSolver::default();
    let r = solve_exhaustive(&inst, &all, &hs, &solver).unwrap();
    let direct: Vec<f64> =
        all.iter().map(|x| evaluate_selection(&inst, x, &hs, &solver).unwrap().weighted_objective).collect();
    for (a, b) in r.objectives.iter().zip(&direct) {
        assert!((a - b).abs() <= 1e-12 * b, "{a} vs {b}");
    }
    let min = direct.iter().copied().fold(f64::INFINITY, f64::min);
    assert_eq!(r.best.weighted_objective, min);
    assert!(
        (r.best.weighted_objective - r.best.avg_tx_power - inst.params.alpha * r.best.transcode_power).abs() < 1e-18
    );
}

#[test]
fn single_user_is_plain_multicast_objective() {
    let inst = instance(vec![tiles(0..5)], &[2], 1e-6, small_params());
    let all = enumerate_selections(&inst, true, DEFAULT_ENUMERATION_CAP).unwrap();
    let hs = draws(&inst, 5, 5);
    let r = solve_exhaustive(&inst, &all, &hs, &InnerSolver::default()).unwrap();
    assert_eq!(r.best.transcode_power, 0.0);
    let per_draw: Vec<f64> = hs
        .iter()
        .map(|h| solve_with_transcoding(&inst, &all[0], h, &InnerSolver::default()).unwrap().solution.objective_w)
        .collect();
    assert_eq!(r.best.per_draw_tx_power, per_draw);
}

#[test]
fn exhaustive_never_worse_than_natural_and_restriction_is_lossless() {
    let mut checked = 0;
    let mut transcoded = 0;
    for seed in 0..200 {
        let mut inst = random_instance(90 + seed, 2 + seed as usize % 2, 3);
        // Scarce spectrum and free transcoding, so merging levels is worth checking.
        inst.params.subcarriers = 6;
        inst.users.iter_mut().for_each(|u| u.transcode_w = 0.0);
        let natural_x = QualitySelection::natural(&inst);
        if selection_count(&inst, false) > 64
            || selection_count(&inst, true) < 2
            || natural_x.messages(&inst).len() > inst.params.subcarriers
        {
            continue;
        }
        let hs = draws(&inst, seed, 8);
        let solver = InnerSolver::default();
        let restricted =
            solve_exhaustive(&inst, &enumerate_selections(&inst, true, 64).unwrap(), &hs, &solver).unwrap();
        let free = solve_exhaustive(&inst, &enumerate_selections(&inst, false, 64).unwrap(), &hs, &solver).unwrap();
        let natural = evaluate_selection(&inst, &QualitySelection::natural(&inst), &hs, &solver).unwrap();
        assert!(restricted.best.weighted_objective <= natural.weighted_objective);
        assert_eq!(restricted.best.weighted_objective, free.best.weighted_objective, "seed {seed}");
        checked += 1;
        transcoded +=
            usize::from(restricted.best.transcode_power > 0.0 || restricted.best.x != QualitySelection::natural(&inst));
        if checked == 10 {
            break;
        }
    }
    assert_eq!(checked, 10);
    assert!(transcoded > 0, "no instance chose to transcode");
}

#[test]
fn qbar_examples() {
    assert_eq!(qbar(1e-9, 1.0), 1e-9);
    assert_eq!(qbar(1e-9, 2.0), 0.5e-9);
}

/// Random per-subcarrier point meeting every rate with equality.
fn random_point(rng: &mut ChaCha8Rng, messages: usize, subcarriers: usize) -> (SubcarrierShares, Vec<f64>) {
    let mut shares = vec![vec![0.0; subcarriers]; messages];
    for n in 0..subcarriers {
        let w: Vec<f64> = (0..messages).map(|_| rng.gen_range(0.05..1.0)).collect();
        let t: f64 = w.iter().sum();
        for j in 0..messages {
            shares[j][n] = w[j] / t;
        }
    }
    let powers = shares.iter().map(|r| r.iter().map(|&s| s * rng.gen_range(1e-9..1e-7)).collect()).collect();
    let qs = (0..messages).map(|_| rng.gen_range(0.5e-9..2e-9)).collect();
    let keys = (0..messages).map(|j| MessageKey { set: UserSet::singleton(j), level: 1 }).collect();
    (SubcarrierShares { messages: keys, shares, powers_w: powers }, qs)
}

#[test]
fn reduce_and_expand_preserve_objective_and_rates() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let b = 39e3;
    for _ in 0..100 {
        let (j, n) = (rng.gen_range(1..5), rng.gen_range(1..9));
        let (point, qs) = random_point(&mut rng, j, n);
        let bar = reduce_to_bar(&point);
        let total_n: f64 = bar.shares.iter().sum();
        assert!((total_n - n as f64).abs() < 1e-12);
        let per_n_power: f64 = point.powers_w.iter().flatten().sum();
        assert!((bar.powers_w.iter().sum::<f64>() - per_n_power).abs() <= 1e-15 * per_n_power);
        for m in 0..j {
            let summed: f64 = (0..n).map(|k| share_rate(point.shares[m][k], point.powers_w[m][k], qs[m], b)).sum();
            assert!(share_rate(bar.shares[m], bar.powers_w[m], qs[m], b) >= summed * (1.0 - 1e-12));
        }
        let back = expand(&bar, n);
        for m in 0..j {
            let spread: f64 = (0..n).map(|k| share_rate(back.shares[m][k], back.powers_w[m][k], qs[m], b)).sum();
            let agg = share_rate(bar.shares[m], bar.powers_w[m], qs[m], b);
            assert!((spread - agg).abs() <= 1e-9 * agg);
        }
        let again = reduce_to_bar(&back);
        for m in 0..j {
            assert!((again.shares[m] - bar.shares[m]).abs() <= 1e-12 * bar.shares[m]);
            assert!((again.powers_w[m] - bar.powers_w[m]).abs() <= 1e-12 * bar.powers_w[m]);
        }
    }
}

#[test]
fn bar_solution_matches_split_search() {
    let inst = shared_pair(1, 2, 1e-7);
    for x in enumerate_selections(&inst, true, DEFAULT_ENUMERATION_CAP).unwrap() {
        let sol = solve_bar(&inst, &x);
        let msgs = x.messages(&inst);
        let b = inst.params.bandwidth_hz;
        let n = inst.params.subcarriers as f64;
        assert!((sol.allocation.shares.iter().sum::<f64>() - n).abs() < 1e-9);
        for (j, m) in msgs.iter().enumerate() {
            let rate = share_rate(sol.allocation.shares[j], sol.allocation.powers_w[j], 1e-9, b);
            assert!((rate - m.demand_bps).abs() <= 1e-9 * m.demand_bps);
        }
        // Independent search over share vectors on a fine simplex grid.
        let cost = |j: usize, s: f64| 1e-9 * s * ((msgs[j].demand_bps / (b * s) * LN_2).exp() - 1.0);
        let mut best = f64::INFINITY;
        let steps = 4000;
        match msgs.len() {
            2 => {
                for i in 1..steps {
                    let s = n * i as f64 / steps as f64;
                    best = best.min(cost(0, s) + cost(1, n - s));
                }
            }
            3 => {
                let g = 300;
                for i in 1..g {
                    for k in 1..g - i {
                        let (s0, s1) = (n * i as f64 / g as f64, n * k as f64 / g as f64);
                        best = best.min(cost(0, s0) + cost(1, s1) + cost(2, n - s0 - s1));
                    }
                }
            }
            _ => unreachable!(),
        }
        let got = sol.tx_power * inst.params.antennas as f64;
        assert!(got <= best * (1.0 + 1e-9), "{got} vs grid {best}");
        assert!(got >= best * (1.0 - 1e-3), "{got} vs grid {best}");
    }
}

fn bar_brute_force(inst: &TranscodeInstance) -> f64 {
    enumerate_selections(inst, true, DEFAULT_ENUMERATION_CAP)
        .unwrap()
        .iter()
        .map(|x| solve_bar(inst, x).objective)
        .fold(f64::INFINITY, f64::min)
}

#[test]
fn approx_returns_natural_under_heavy_penalty() {
    let inst = random_instance(12, 4, 5);
    let inst = TranscodeInstance {
        users: inst.users.iter().map(|u| UserProfile { transcode_w: 10.0, ..*u }).collect(),
        ..inst
    };
    let r = approx_quality_selection(&inst, &PenaltySettings::default()).unwrap();
    assert_eq!(r.x, QualitySelection::natural(&inst));
}

#[test]
fn approx_single_group_matches_bar_brute_force() {
    for e in [0.0, 1e-9, 1e-8, 1e-7] {
        let inst = instance(vec![tiles(0..6), tiles(0..6)], &[1, 2], e, small_params());
        let r = approx_quality_selection(&inst, &PenaltySettings::default()).unwrap();
        let best = bar_brute_force(&inst);
        assert!(r.bar.objective <= best * 1.01, "E={e}: {} vs {best}", r.bar.objective);
        assert!(r.bar.objective >= best * (1.0 - 1e-12));
    }
}

#[test]
fn approx_is_feasible_and_descends() {
    for seed in 0..12 {
        let inst = random_instance(300 + seed, 2 + seed as usize % 3, 3 + seed as usize % 3);
        let r = approx_quality_selection(&inst, &PenaltySettings::default()).unwrap();
        r.x.validate(&inst, true).unwrap();
        assert!(r.bar.objective >= bar_brute_force(&inst) * (1.0 - 1e-12));
        assert!(r.bar.objective <= r.rounded_objective * (1.0 + 1e-12));
        for w in r.history.windows(2) {
            if w[0].0 == w[1].0 {
                assert!(w[1].1 <= w[0].1 * (1.0 + 1e-9) + 1e-30, "seed {seed}: {:?} -> {:?}", w[0], w[1]);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn enumerated_selections_are_valid(seed in 0u64..10_000) {
        let inst = random_instance(seed, 3, 4);
        prop_assume!(selection_count(&inst, true) <= 256);
        for x in enumerate_selections(&inst, true, 256).unwrap() {
            prop_assert!(x.validate(&inst, true).is_ok());
            prop_assert!(transcoding_power(&x, &inst.partition, &inst.users) >= 0.0);
        }
    }

    #[test]
    fn expand_then_reduce_is_identity(shares in prop::collection::vec(0.01f64..10.0, 1..6), n in 1usize..64) {
        let powers: Vec<f64> = shares.iter().map(|s| s * 1e-8).collect();
        let keys = (0..shares.len()).map(|j| MessageKey { set: UserSet::singleton(j), level: 1 }).collect();
        let bar = BarAllocation { messages: keys, shares: shares.clone(), powers_w: powers.clone() };
        let back = reduce_to_bar(&expand(&bar, n));
        for j in 0..shares.len() {
            prop_assert!((back.shares[j] - shares[j]).abs() <= 1e-12 * shares[j]);
            prop_assert!((back.powers_w[j] - powers[j]).abs() <= 1e-12 * powers[j]);
        }
    }
}

#[test]
fn pruned_search_matches_full_enumeration() {
    let mut compared = 0;
    let mut skipped_any = false;
    for seed in 0..40 {
        let inst = random_instance(300 + seed, 2 + seed as usize % 2, 3);
        if selection_count(&inst, true) > 48
            || QualitySelection::natural(&inst).messages(&inst).len() > inst.params.subcarriers
        {
            continue;
        }
        let all = enumerate_selections(&inst, true, 48).unwrap();
        let hs = draws(&inst, seed, 4);
        let solver = InnerSolver::default();
        let full = solve_exhaustive(&inst, &all, &hs, &solver).unwrap();
        let pruned = solve_exhaustive_pruned(&inst, &all, &hs, &solver).unwrap();
        assert_eq!(pruned.best_index, full.best_index, "seed {seed}");
        assert_eq!(pruned.best.weighted_objective, full.best.weighted_objective);
        assert_eq!(pruned.best.per_draw_tx_power, full.best.per_draw_tx_power);
        skipped_any |= pruned.pruned > 0;
        compared += 1;
    }
    assert!(compared >= 10, "only {compared} instances compared");
    assert!(skipped_any);
}
