//! End-to-end acceptance checks. Each test prints one verdict line and then asserts it.
//! Run with `cargo test --test acceptance -- --nocapture` to see the lines.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vrcast::allocation::{assemble_solution, audit_solution, solve_allocation, MessageDemand, MessageKey};
use vrcast::beamforming::{asymptotic_beamformer, rank_reduce, solve_qos_sdr, BeamInstance, BeamStatus};
use vrcast::channel::{sample_channel, ChannelRealization, QualityLadder, SystemParams, UserProfile};
use vrcast::dcsolver::{solve_general, DcProblem, DcSettings};
use vrcast::geometry::{compute_partition, Tile, TileSet, UserSet};
use vrcast::harness::config::{ExperimentConfig, Scenario, Scheme, Sweep, SweepParam};
use vrcast::harness::experiment::{base_directions, build_instance, sample_draws, sweep_setups};
use vrcast::harness::{run_experiment, ExperimentRecord};
use vrcast::numerics::{solve_sdp, SdpProblem, SdpStatus};
use vrcast::transcoding::{
    enumerate_selections, expand, reduce_to_bar, selection_count, share_rate, solve_exhaustive, InnerSolver,
    QualitySelection, SubcarrierShares, TranscodeInstance,
};

fn verdict(label: &str, ok: bool, detail: String) {
    println!("[acceptance] {label}: {} {detail}", if ok { "PASS" } else { "FAIL" });
    assert!(ok, "{label}: {detail}");
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

/// Rayleigh channels for `users` on one subcarrier with random gains.
fn beam_instance(seed: u64, antennas: usize, users: usize) -> BeamInstance {
    let params = SystemParams { antennas, subcarriers: 1, ..SystemParams::default() };
    let ch = sample_channel(seed, 0, &params, users);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xbeef);
    let list = (0..users).map(|k| (ch.h(0, k).clone(), rng.gen_range(0.5..2.0))).collect();
    BeamInstance::new(list, antennas, params.noise_w).unwrap()
}

#[test]
fn a01_relaxation_is_tight() {
    let start = std::time::Instant::now();
    let mut worst_gap = 0.0f64;
    let mut bad = vec![];
    for i in 0..1000u64 {
        let m = [2, 4, 8][(i % 3) as usize];
        let g = 1 + (i / 3 % 3) as usize;
        let inst = beam_instance(10_000 + i, m, g);
        let mats = inst.constraint_matrices();
        let sdp =
            solve_sdp(&SdpProblem::trace_min(mats.iter().map(|a| (a.clone(), 1.0)).collect()).unwrap(), 1e-10).unwrap();
        let reduced = rank_reduce(&sdp.x, &mats).unwrap();
        let beam = solve_qos_sdr(&inst).unwrap();
        let gap = rel(beam.q, sdp.objective_value);
        worst_gap = worst_gap.max(gap);
        let feasible = inst.snr(&beam.v).iter().all(|s| *s >= 1.0 - 1e-6);
        if sdp.status != SdpStatus::Optimal
            || reduced.rank != 1
            || beam.status != BeamStatus::RankOne
            || gap > 1e-6
            || !feasible
        {
            bad.push((i, m, g, reduced.rank, gap));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        "relaxation tightness",
        bad.is_empty(),
        format!(
            "1000 instances, worst relative gap {worst_gap:.2e}, {secs:.1}s, failures {:?}",
            &bad[..bad.len().min(5)]
        ),
    );
}

#[test]
fn a02_single_user_closed_form() {
    let mut worst_q = 0.0f64;
    let mut worst_angle = 0.0f64;
    for i in 0..100u64 {
        let m = [2, 4, 8, 16][(i % 4) as usize];
        let inst = beam_instance(20_000 + i, m, 1);
        let (h, beta) = inst.users()[0].clone();
        let expect = m as f64 * inst.noise_w() / (beta * h.norm_squared());
        for sol in [solve_qos_sdr(&inst).unwrap(), asymptotic_beamformer(&inst).unwrap()] {
            worst_q = worst_q.max(rel(sol.q, expect));
            // |<v, h>| = |v| |h| exactly when the two are collinear.
            worst_angle = worst_angle.max(1.0 - sol.v.dotc(&h).norm() / (sol.v.norm() * h.norm()));
        }
    }
    verdict(
        "single-user analytics",
        worst_q <= 1e-9 && worst_angle <= 1e-9,
        format!("100 draws, worst power error {worst_q:.2e}, worst collinearity defect {worst_angle:.2e}"),
    );
}

#[test]
fn a03_asymptotic_ratio() {
    let mut means = vec![];
    for &m in &[4usize, 16, 64] {
        let ratios: Vec<f64> = (0..100u64)
            .map(|i| {
                let inst = beam_instance(30_000 + i, m, 2);
                asymptotic_beamformer(&inst).unwrap().q / solve_qos_sdr(&inst).unwrap().q
            })
            .collect();
        means.push(ratios.iter().sum::<f64>() / ratios.len() as f64);
    }
    let monotone = means.windows(2).all(|w| w[1] <= w[0]);
    verdict(
        "asymptotic beamformer ratio",
        means[2] <= 1.05 && monotone,
        format!(
            "mean ratio at M=4,16,64: {:.4}, {:.4}, {:.4} (need <= 1.05 at 64 and nonincreasing)",
            means[0], means[1], means[2]
        ),
    );
}

#[test]
fn a04_allocation_matches_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    let b = 39e3;
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let demands: Vec<MessageDemand> = (0..2)
            .map(|k| MessageDemand {
                key: MessageKey { set: UserSet::singleton(k), level: 1 },
                demand_bps: rng.gen_range(0.2..6.0) * b,
                q: (0..2).map(|_| rng.gen_range(1e-10..1e-8)).collect(),
            })
            .collect();
        // Each message owns one subcarrier; a lone subcarrier needs q (2^(d/B) - 1).
        let cost = |j: usize, n: usize| demands[j].q[n] * ((demands[j].demand_bps / b).exp2() - 1.0);
        let oracle = (cost(0, 0) + cost(1, 1)).min(cost(0, 1) + cost(1, 0));
        let a = solve_allocation(&demands, b).unwrap();
        worst = worst.max(rel(a.total_power, oracle));
    }
    verdict("allocation oracle", worst <= 1e-4, format!("200 instances, worst relative error {worst:.2e}"));
}

fn default_cfg(scenario: Scenario, schemes: Vec<Scheme>) -> ExperimentConfig {
    ExperimentConfig::standard(scenario, schemes)
}

fn plain_instance(cfg: &ExperimentConfig) -> TranscodeInstance {
    let base = base_directions(cfg).unwrap();
    build_instance(cfg, &sweep_setups(cfg, &base)[0]).unwrap()
}

/// Per-subcarrier minimum beam powers; the relaxed value when `relaxed` is set.
fn beam_powers(
    inst: &TranscodeInstance,
    members: &[usize],
    h: &ChannelRealization,
    relaxed: bool,
) -> Vec<vrcast::beamforming::BeamSolution> {
    let betas = inst.betas();
    (0..inst.params.subcarriers)
        .map(|n| {
            let users = members.iter().map(|&k| (h.h(n, k).clone(), betas[k])).collect();
            let mut s =
                solve_qos_sdr(&BeamInstance::new(users, inst.params.antennas, inst.params.noise_w).unwrap()).unwrap();
            if relaxed {
                s.q = s.relaxed_value.unwrap();
            }
            s
        })
        .collect()
}

#[test]
fn a05_assembled_solution_audit() {
    let cfg = default_cfg(Scenario::NoTranscode, vec![Scheme::OptimalSmallGroups]);
    let inst = plain_instance(&cfg);
    let messages = QualitySelection::natural(&inst).messages(&inst);
    let groups: Vec<Vec<usize>> = messages.iter().map(|m| m.members.clone()).collect();
    let draws = sample_draws(cfg.seed, 100, &inst.params, inst.users.len());
    let m = inst.params.antennas as f64;
    let mut worst_rate = 0.0f64;
    let mut exact = true;
    let mut structural = true;
    for h in &draws {
        let beams: Vec<_> = messages.iter().map(|msg| beam_powers(&inst, &msg.members, h, false)).collect();
        let demands: Vec<MessageDemand> = messages
            .iter()
            .zip(&beams)
            .map(|(msg, row)| MessageDemand {
                key: msg.key,
                demand_bps: msg.demand_bps,
                q: row.iter().map(|b| b.q).collect(),
            })
            .collect();
        let a = solve_allocation(&demands, inst.params.bandwidth_hz).unwrap();
        let sol = assemble_solution(&demands, &a, &beams, inst.params.antennas).unwrap();
        let audit = audit_solution(&sol, &groups, &inst.betas(), h, inst.params.noise_w, inst.params.bandwidth_hz);
        worst_rate = worst_rate.max(audit.rate_excess).max(audit.demand_shortfall);
        exact &= sol.objective_w == a.total_power / m && audit.objective_error == 0.0;
        structural &= !audit.assignment_error && !audit.negative_power && audit.max_beam_norm_error < 1e-9;
    }
    verdict(
        "assembled solution audit",
        worst_rate < 1e-3 && exact && structural,
        format!("100 draws, {} messages, worst rate residual {worst_rate:.2e}, objective exact {exact}, structure ok {structural}", messages.len()),
    );
}

#[test]
fn a06_dc_descent_and_quality() {
    let mut cfg = default_cfg(Scenario::NoTranscode, vec![Scheme::DcGeneral]);
    cfg.users.truncate(3);
    let inst = plain_instance(&cfg);
    let messages = QualitySelection::natural(&inst).messages(&inst);
    assert!(messages.iter().all(|m| m.members.len() <= 3));
    let draws = sample_draws(cfg.seed, 50, &inst.params, inst.users.len());
    let m = inst.params.antennas;
    let mut worst_rise = 0.0f64;
    let mut ratios = vec![];
    let mut below_bound = 0;
    for h in &draws {
        let p = DcProblem { messages: messages.clone(), channel: h, betas: inst.betas(), params: inst.params };
        let r = solve_general(&p, &DcSettings::default()).unwrap();
        for w in r.history.windows(2) {
            worst_rise = worst_rise.max((w[1] - w[0]) / w[0]);
        }
        let demands = |relaxed: bool| -> Vec<MessageDemand> {
            messages
                .iter()
                .map(|msg| MessageDemand {
                    key: msg.key,
                    demand_bps: msg.demand_bps,
                    q: beam_powers(&inst, &msg.members, h, relaxed).iter().map(|b| b.q).collect(),
                })
                .collect()
        };
        let opt = solve_allocation(&demands(false), inst.params.bandwidth_hz).unwrap().objective(m);
        let bound = solve_allocation(&demands(true), inst.params.bandwidth_hz).unwrap().dual_bound / m as f64;
        let got = r.solution.objective_w;
        below_bound += usize::from(got < bound);
        ratios.push(got / opt);
    }
    let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
    verdict(
        "difference-of-convex descent",
        worst_rise <= 1e-9 && mean <= 1.05 && below_bound == 0,
        format!(
            "50 draws, {} messages, worst relative rise {worst_rise:.2e}, mean ratio to optimum {mean:.4}, draws below bound {below_bound}",
            messages.len()
        ),
    );
}

fn per_draw(records: &[ExperimentRecord], scheme: Scheme) -> &[f64] {
    &records.iter().find(|r| r.scheme == scheme).unwrap().metadata.per_draw_w
}

#[test]
fn a07_scheme_ordering() {
    let mut plain =
        default_cfg(Scenario::NoTranscode, vec![Scheme::OptimalSmallGroups, Scheme::Baseline2, Scheme::Baseline1]);
    plain.users.truncate(3);
    plain.system.antennas = 4;
    let mut trans = plain.clone();
    trans.scenario = Scenario::Transcode;
    trans.scheme = vec![Scheme::OptimalSmallGroups, Scheme::Baseline3];
    let a = run_experiment(&plain).unwrap();
    let b = run_experiment(&trans).unwrap();
    let (opt, b2, b1) =
        (per_draw(&a, Scheme::OptimalSmallGroups), per_draw(&a, Scheme::Baseline2), per_draw(&a, Scheme::Baseline1));
    let (ex, b3) = (per_draw(&b, Scheme::OptimalSmallGroups), per_draw(&b, Scheme::Baseline3));
    assert!([opt, b2, b1, ex, b3].iter().all(|v| v.len() == 100));
    let mut violations = vec![];
    for d in 0..100 {
        if !(opt[d] <= b2[d] && b2[d] <= b1[d]) {
            violations
                .push(format!("draw {d}: optimal {:.4e} baseline2 {:.4e} baseline1 {:.4e}", opt[d], b2[d], b1[d]));
        }
        if ex[d] > opt[d].min(b3[d]) {
            violations
                .push(format!("draw {d}: transcode {:.4e} vs optimal {:.4e} baseline3 {:.4e}", ex[d], opt[d], b3[d]));
        }
    }
    verdict(
        "scheme ordering",
        violations.is_empty(),
        format!("100 draws at K=3, M=4, {} violations {:?}", violations.len(), &violations[..violations.len().min(3)]),
    );
}

fn sweep_means(mut cfg: ExperimentConfig, param: SweepParam, values: &[f64]) -> Vec<(Scheme, Vec<f64>)> {
    cfg.sweep = Sweep { param, values: values.to_vec() };
    let records = run_experiment(&cfg).unwrap();
    cfg.scheme.iter().map(|&s| (s, records.iter().filter(|r| r.scheme == s).map(|r| r.avg_power_w).collect())).collect()
}

#[test]
fn a08_trends_at_default_parameters() {
    let no_tc =
        vec![Scheme::OptimalSmallGroups, Scheme::Asymptotic, Scheme::DcGeneral, Scheme::Baseline1, Scheme::Baseline2];
    let tc = vec![Scheme::OptimalSmallGroups, Scheme::Asymptotic, Scheme::DcGeneral, Scheme::Baseline3];
    let multicast = vec![Scheme::OptimalSmallGroups, Scheme::Asymptotic, Scheme::DcGeneral, Scheme::Baseline2];
    let strictly_up = |v: &[f64]| v.windows(2).all(|w| w[1] > w[0]);
    let strictly_down = |v: &[f64]| v.windows(2).all(|w| w[1] < w[0]);
    let not_up = |v: &[f64]| v.windows(2).all(|w| w[1] <= w[0]);

    let mut checks: Vec<(String, bool, Vec<f64>)> = vec![];
    let mut add = |tag: &str, scenario: Scenario, rows: Vec<(Scheme, Vec<f64>)>, rule: &dyn Fn(&[f64]) -> bool| {
        for (s, v) in rows {
            let ok = rule(&v);
            let shown: Vec<String> = v.iter().map(|x| format!("{x:.4e}")).collect();
            println!("  {tag} {scenario:?} {s}: [{}] {}", shown.join(", "), if ok { "ok" } else { "violated" });
            checks.push((format!("{tag}/{s}/{scenario:?}"), ok, v));
        }
    };

    let mut k_plain = default_cfg(Scenario::NoTranscode, no_tc.clone());
    k_plain.users.truncate(3);
    add("K", Scenario::NoTranscode, sweep_means(k_plain.clone(), SweepParam::K, &[1.0, 2.0, 3.0]), &strictly_up);
    let k_tc = ExperimentConfig { scenario: Scenario::Transcode, scheme: tc.clone(), ..k_plain };
    add("K", Scenario::Transcode, sweep_means(k_tc, SweepParam::K, &[1.0, 2.0, 3.0]), &strictly_up);

    let mut m_cfg = default_cfg(Scenario::NoTranscode, no_tc);
    m_cfg.users.truncate(4);
    for (u, r) in m_cfg.users.iter_mut().zip([2, 3, 3, 4]) {
        u.level = r;
    }
    add("M", Scenario::NoTranscode, sweep_means(m_cfg, SweepParam::M, &[2.0, 4.0, 8.0]), &strictly_down);

    let tau_plain = default_cfg(Scenario::NoTranscode, multicast.clone());
    add("tau", Scenario::NoTranscode, sweep_means(tau_plain, SweepParam::Tau, &[1.0, 2.0, 3.0]), &not_up);
    let tau_tc = default_cfg(Scenario::Transcode, vec![Scheme::DcGeneral, Scheme::Baseline3]);
    add("tau", Scenario::Transcode, sweep_means(tau_tc, SweepParam::Tau, &[1.0, 2.0, 3.0]), &not_up);

    let delta = default_cfg(Scenario::NoTranscode, multicast);
    add("delta", Scenario::NoTranscode, sweep_means(delta, SweepParam::Delta, &[1.0, 2.0, 3.0, 4.0, 5.0]), &not_up);

    let failed: Vec<&String> = checks.iter().filter(|c| !c.1).map(|c| &c.0).collect();
    verdict(
        "trends at default parameters",
        failed.is_empty(),
        format!("{} curves checked, violated: {failed:?}", checks.len()),
    );
}

/// Random per-subcarrier point that splits every subcarrier among the messages.
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
fn a09_forward_backward_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(90);
    let b = 39e3;
    let mut objective_exact = true;
    let mut worst_rate = 0.0f64;
    let mut worst_trip = 0.0f64;
    let mut worst_back_objective = 0.0f64;
    for _ in 0..100 {
        let (j, n) = (rng.gen_range(1..6), rng.gen_range(1..65));
        let (point, qs) = random_point(&mut rng, j, n);
        let bar = reduce_to_bar(&point);
        // Same summation order on both sides, so the totals must agree bit for bit.
        let per_message: Vec<f64> = point.powers_w.iter().map(|r| r.iter().sum()).collect();
        objective_exact &= bar.powers_w.iter().sum::<f64>() == per_message.iter().sum::<f64>();
        for m in 0..j {
            let spread: f64 = (0..n).map(|k| share_rate(point.shares[m][k], point.powers_w[m][k], qs[m], b)).sum();
            let agg = share_rate(bar.shares[m], bar.powers_w[m], qs[m], b);
            // The aggregate never loses rate; concavity may add some.
            worst_rate = worst_rate.max((spread - agg) / spread);
        }
        let back = expand(&bar, n);
        let back_total: f64 = back.powers_w.iter().flatten().sum();
        worst_back_objective = worst_back_objective.max(rel(back_total, bar.powers_w.iter().sum()));
        for m in 0..j {
            let spread: f64 = (0..n).map(|k| share_rate(back.shares[m][k], back.powers_w[m][k], qs[m], b)).sum();
            worst_rate = worst_rate.max(rel(spread, share_rate(bar.shares[m], bar.powers_w[m], qs[m], b)));
        }
        let again = reduce_to_bar(&back);
        for m in 0..j {
            worst_trip =
                worst_trip.max(rel(again.shares[m], bar.shares[m])).max(rel(again.powers_w[m], bar.powers_w[m]));
        }
    }
    let ok = objective_exact && worst_back_objective <= 1e-12 && worst_rate <= 1e-9 && worst_trip <= 1e-12;
    verdict(
        "forward/backward constructions",
        ok,
        format!(
            "100 points, forward objective exact {objective_exact}, backward objective drift {worst_back_objective:.1e}, rate drift {worst_rate:.1e}, round trip drift {worst_trip:.1e}"
        ),
    );
}

fn row(range: std::ops::Range<u32>) -> TileSet {
    range.map(|h| Tile { h, v: 0 }).collect()
}

/// Overlapping views with cheap transcoding so merging levels is worth checking.
fn merge_instance(seed: u64) -> TranscodeInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let users = 2 + (seed % 2) as usize;
    let sets: Vec<TileSet> = (0..users)
        .map(|_| {
            let a = rng.gen_range(0..10);
            row(a..a + rng.gen_range(4..16))
        })
        .collect();
    let ladder = QualityLadder::new([2.5e6, 5e6, 8e6].iter().map(|r| r / 450.0).collect()).unwrap();
    TranscodeInstance {
        partition: compute_partition(&sets).unwrap(),
        users: (0..users)
            .map(|_| UserProfile { beta: rng.gen_range(0.5..2.0), level: rng.gen_range(1..=3), transcode_w: 0.0 })
            .collect(),
        ladder,
        params: SystemParams { antennas: 4, subcarriers: 6, ..SystemParams::default() },
    }
}

#[test]
fn a10_restriction_is_lossless() {
    let mut checked = 0;
    let mut mismatches = vec![];
    for seed in 0..400u64 {
        let inst = merge_instance(5_000 + seed);
        if selection_count(&inst, false) > 64
            || selection_count(&inst, true) < 2
            || QualitySelection::natural(&inst).messages(&inst).len() > inst.params.subcarriers
        {
            continue;
        }
        let hs: Vec<_> = (0..8).map(|d| sample_channel(seed, d, &inst.params, inst.users.len())).collect();
        let solver = InnerSolver::default();
        let restricted =
            solve_exhaustive(&inst, &enumerate_selections(&inst, true, 64).unwrap(), &hs, &solver).unwrap();
        let free = solve_exhaustive(&inst, &enumerate_selections(&inst, false, 64).unwrap(), &hs, &solver).unwrap();
        if restricted.best.weighted_objective != free.best.weighted_objective {
            mismatches.push((seed, restricted.best.weighted_objective, free.best.weighted_objective));
        }
        checked += 1;
        if checked == 20 {
            break;
        }
    }
    verdict(
        "restricted selections are lossless",
        checked == 20 && mismatches.is_empty(),
        format!("{checked} instances with at most 64 selections, mismatches {mismatches:?}"),
    );
}
