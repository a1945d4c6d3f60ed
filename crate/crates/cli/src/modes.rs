use std::time::Instant;

use anyhow::{bail, Context as _};
use octofmm::generate::{receivers, sources, subsample};
use octofmm::lists::{build_level_directory, build_neighbor_table, build_translation_stencils};
use octofmm::multinode::{plan_cluster, ClusterSetup};
use octofmm::pseudosort::pseudo_sort;
use octofmm::verify::{
    box_types_by_predicate, check_coverage, check_neighbor_table, check_sorted_set, check_stencils, max_relative,
    relative_rms,
};
use octofmm::{
    build_all, classify, direct_sum, evaluate, evaluate_distributed, BoxType, ChargedPoint, ClassifyOptions,
    ClusterConfig, Depth, EvalOptions, FmmStructures, Point3, SortConfig,
};

use crate::report::{Context, Report};
use crate::{Args, Mode};

/// Above this many points the direct-sum oracle uses a receiver subsample.
const FULL_ORACLE_LIMIT: usize = 1 << 15;
const ORACLE_SUBSAMPLE: usize = 4096;
/// Receiver boxes sampled by the coverage oracle when it is not exhaustive.
const COVERAGE_SAMPLE: usize = 512;
/// Largest `8^l_max` for which coverage is checked exhaustively.
const EXHAUSTIVE_BOXES: u64 = 1 << 12;
/// Box-pair budget for the all-pairs list oracles.
const ALL_PAIRS_LIMIT: u64 = 1 << 34;
const EQUIVALENCE_TOLERANCE: f64 = 1e-10;
const LINEAR_RATIO_LIMIT: f64 = 2.6;

struct Workload {
    sources: Vec<ChargedPoint>,
    receivers: Vec<Point3>,
}

fn workload(args: &Args, n: usize, m: usize) -> Workload {
    Workload { sources: sources(args.dist.into(), n, args.seed), receivers: receivers(args.dist.into(), m, args.seed) }
}

fn sort_config(args: &Args) -> SortConfig {
    if args.deterministic {
        SortConfig::deterministic()
    } else {
        SortConfig::default()
    }
}

fn cluster_config(args: &Args, nodes: usize, depth: Depth) -> ClusterConfig {
    let mut cfg = ClusterConfig::new(nodes, args.units_per_node, depth, args.p);
    cfg.record_trace = args.trace.is_some();
    cfg
}

fn context(args: &Args, mode: &'static str, n: usize, m: usize, l_max: u32, nodes: usize) -> Context {
    Context { mode, n_sources: n, n_receivers: m, l_max, p: args.p, nodes, units_per_node: args.units_per_node }
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, f64) {
    let start = Instant::now();
    let v = f();
    (v, start.elapsed().as_secs_f64())
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

pub fn run(args: &Args) -> anyhow::Result<Report> {
    if args.nodes == 0 || args.units_per_node == 0 {
        bail!("--nodes and --units-per-node must be positive");
    }
    match args.mode {
        Mode::Build => build(args),
        Mode::Verify => verify(args),
        Mode::Evaluate => evaluate_mode(args),
        Mode::Bench => bench(args),
    }
}

fn structure_counts(report: &mut Report, ctx: &Context, s: &FmmStructures) {
    report.count(ctx, "source_boxes", s.sources.box_count());
    report.count(ctx, "receiver_boxes", s.receivers.box_count());
    report.count(ctx, "near_pairs", s.neighbors.list.len());
    report.count(ctx, "m2l_pairs", s.stencils.pair_count());
}

fn cluster_counts(report: &mut Report, ctx: &Context, setup: &ClusterSetup) {
    let plan = &setup.plan;
    report.count(ctx, "l_par", plan.l_par as usize);
    report.count(ctx, "l_crit", plan.l_crit as usize);
    report.metric(ctx, "load_max_over_mean", plan.max_over_mean, "");
    report.count(ctx, "setup_bytes", setup.setup_bytes as usize);
    for ty in [BoxType::Export, BoxType::Import, BoxType::Root] {
        let n: usize =
            setup.typed.iter().map(|t| (plan.l_crit..=plan.l_max).map(|l| t.count(l, ty)).sum::<usize>()).sum();
        report.count(ctx, &format!("{ty:?}_boxes").to_lowercase(), n);
    }
}

fn build(args: &Args) -> anyhow::Result<Report> {
    let (n, m) = (args.n_sources, args.n_receivers());
    let l_max = args.depth().resolve(n.max(m))?;
    let config = sort_config(args);
    let mut report = Report::default();
    let ctx = context(args, "build", n, m, l_max, args.nodes);

    let (w, t_gen) = timed(|| workload(args, n, m));
    report.timing(&ctx, "generate", t_gen);
    let start = Instant::now();
    let (sorted, t) = timed(|| pseudo_sort(&w.sources, l_max, &config));
    let (src, src_marks) = sorted?;
    report.timing(&ctx, "sort_sources", t);
    let (recv, t) = timed(|| pseudo_sort(&w.receivers, l_max, &config));
    let (recv, _) = recv?;
    report.timing(&ctx, "sort_receivers", t);
    let (neighbors, t) = timed(|| build_neighbor_table(&src_marks, &recv.non_empty_index, l_max));
    let neighbors = neighbors?;
    report.timing(&ctx, "neighbor_table", t);
    let (directory, t) = timed(|| build_level_directory(&src.non_empty_index, &recv.non_empty_index, l_max));
    let directory = directory?;
    report.timing(&ctx, "level_directory", t);
    let (stencils, t) = timed(|| build_translation_stencils(&directory));
    let stencils = stencils?;
    report.timing(&ctx, "translation_stencils", t);
    report.timing(&ctx, "total", start.elapsed().as_secs_f64());

    let s = FmmStructures { l_max, sources: src, receivers: recv, neighbors, directory, stencils };
    structure_counts(&mut report, &ctx, &s);

    let setup = if args.nodes > 1 {
        let (setup, t) =
            timed(|| plan_cluster(&w.sources, &w.receivers, &cluster_config(args, args.nodes, Depth::Level(l_max))));
        let setup = setup?;
        report.timing(&ctx, "plan_cluster", t);
        cluster_counts(&mut report, &ctx, &setup);
        Some(setup)
    } else {
        None
    };
    if let Some(path) = &args.container {
        let (plan, typed) = match &setup {
            Some(s) => (Some(&s.plan), s.typed.as_slice()),
            None => (None, &[][..]),
        };
        octofmm::io::save(path, &s, plan, typed).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(report)
}

fn verify(args: &Args) -> anyhow::Result<Report> {
    let (n, m) = (args.n_sources, args.n_receivers());
    let w = workload(args, n, m);
    let s = build_all(&w.sources, &w.receivers, args.depth(), &sort_config(args))?;
    let l_max = s.l_max;
    let pairs = s.sources.box_count() as u64 * s.receivers.box_count() as u64;
    if pairs > ALL_PAIRS_LIMIT {
        bail!("{pairs} box pairs at l_max={l_max} is too many for the all-pairs oracles; use a smaller instance");
    }
    let mut report = Report::default();
    let ctx = context(args, "verify", n, m, l_max, args.nodes);
    let add = |report: &mut Report, name: &str, c: octofmm::verify::Check| {
        report.check(&ctx, name, c.passed, c.failures as f64, c.detail);
    };
    add(&mut report, "source_sort", check_sorted_set(&s.sources, &w.sources));
    add(&mut report, "receiver_sort", check_sorted_set(&s.receivers, &w.receivers));
    add(&mut report, "neighbor_table", check_neighbor_table(&s));
    add(&mut report, "translation_stencils", check_stencils(&s));
    let exhaustive = 8u64.checked_pow(l_max).is_some_and(|b| b <= EXHAUSTIVE_BOXES);
    add(
        &mut report,
        "single_count_coverage",
        check_coverage(&s, if exhaustive { usize::MAX } else { COVERAGE_SAMPLE }, args.seed),
    );

    if args.nodes > 1 {
        let cfg = cluster_config(args, args.nodes, Depth::Level(l_max));
        let setup = plan_cluster(&w.sources, &w.receivers, &cfg)?;
        let (mut mismatched, mut shuffled) = (0, 0);
        for (j, typed) in setup.typed.iter().enumerate() {
            let oracle = box_types_by_predicate(j, &w.sources, &w.receivers, &setup.plan);
            mismatched += (2..=l_max).filter(|&l| typed.levels[l as usize] != oracle[l as usize]).count();
            let again = classify(j, &setup.directory, &setup.plan, &ClassifyOptions { shuffle_seed: Some(args.seed) })?;
            shuffled += (again != *typed) as usize;
        }
        report.check(
            &ctx,
            "box_types_vs_predicate",
            mismatched == 0,
            mismatched as f64,
            format!("{mismatched} node-levels differ"),
        );
        report.check(
            &ctx,
            "box_types_shuffle_invariant",
            shuffled == 0,
            shuffled as f64,
            format!("{shuffled} nodes differ"),
        );
        distributed_checks(args, &mut report, &ctx, &w, l_max, &s)?;
    }
    Ok(report)
}

/// Runs the cluster and checks it against single-node evaluation.
fn distributed_checks(
    args: &Args,
    report: &mut Report,
    ctx: &Context,
    w: &Workload,
    l_max: u32,
    s: &FmmStructures,
) -> anyhow::Result<()> {
    let single = evaluate(s, &EvalOptions::new(args.p))?;
    let cfg = cluster_config(args, args.nodes, Depth::Level(l_max));
    let (run, t) = timed(|| evaluate_distributed(&w.sources, &w.receivers, &cfg));
    let run = run?;
    report.timing(ctx, "distributed_evaluate", t);
    let diff = max_relative(&run.potentials, &single);
    report.check(
        ctx,
        "distributed_matches_single_node",
        diff <= EQUIVALENCE_TOLERANCE,
        diff,
        format!("max relative difference {diff:.3e}"),
    );
    let (dup, miss) = (run.tally.duplicates(), run.tally.missing());
    report.check(
        ctx,
        "translated_exactly_once",
        dup + miss == 0,
        (dup + miss) as f64,
        format!("{dup} duplicates, {miss} missing"),
    );
    report.check(ctx, "traffic_conserved", run.ledger.is_conserved(), 0.0, String::new());
    report.count(ctx, "exchange_bytes", run.ledger.total_bytes() as usize);
    report.count(ctx, "exported_boxes_l_max", run.ledger.exported_at(l_max) as usize);
    report.count(ctx, "merged_roots", run.ledger.merged_roots as usize);
    report.count(ctx, "scatter_moved_points", run.scatter_moved_points as usize);
    report.count(ctx, "halo_copies", run.halo_copies as usize);
    if let Some(path) = &args.trace {
        let mut out = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
        out.write_record(["phase", "from", "to", "level", "box", "bytes"])?;
        for t in &run.trace {
            out.write_record([
                t.phase,
                &t.from,
                &t.to,
                &t.level.to_string(),
                &t.box_index.to_string(),
                &t.bytes.to_string(),
            ])?;
        }
        out.flush()?;
    }
    Ok(())
}

fn evaluate_mode(args: &Args) -> anyhow::Result<Report> {
    let (n, m) = (args.n_sources, args.n_receivers());
    let w = workload(args, n, m);
    let (s, t_build) = timed(|| build_all(&w.sources, &w.receivers, args.depth(), &sort_config(args)));
    let s = s?;
    let mut report = Report::default();
    let ctx = context(args, "evaluate", n, m, s.l_max, args.nodes);
    report.timing(&ctx, "build", t_build);
    let (phi, t) = timed(|| evaluate(&s, &EvalOptions::new(args.p)));
    let phi = phi?;
    report.timing(&ctx, "evaluate", t);

    let picks = if n.max(m) > FULL_ORACLE_LIMIT { subsample(m, ORACLE_SUBSAMPLE, args.seed) } else { (0..m).collect() };
    let targets: Vec<Point3> = picks.iter().map(|&i| w.receivers[i]).collect();
    let (exact, t) = timed(|| direct_sum(&w.sources, &targets));
    report.timing(&ctx, "direct_sum", t);
    let approx: Vec<f64> = picks.iter().map(|&i| phi[i]).collect();
    report.count(&ctx, "oracle_receivers", picks.len());
    report.metric(&ctx, "relative_rms_error", relative_rms(&approx, &exact), "");
    report.metric(&ctx, "max_relative_error", max_relative(&approx, &exact), "");

    if args.nodes > 1 {
        distributed_checks(args, &mut report, &ctx, &w, s.l_max, &s)?;
    }
    Ok(report)
}

fn bench(args: &Args) -> anyhow::Result<Report> {
    if args.repeats == 0 {
        bail!("--repeats must be positive");
    }
    if args.nodes > 1 {
        bench_nodes(args)
    } else {
        bench_sizes(args)
    }
}

/// Build time over `N/4, N/2, N` at the level chosen for the largest size.
fn bench_sizes(args: &Args) -> anyhow::Result<Report> {
    let (n, m) = (args.n_sources, args.n_receivers());
    let l_max = args.depth().resolve(n.max(m))?;
    let config = sort_config(args);
    let mut report = Report::default();
    let mut prev: Option<(usize, f64)> = None;
    for k in [4, 2, 1] {
        let (nk, mk) = (n / k, m / k);
        let ctx = context(args, "bench", nk, mk, l_max, 1);
        let w = workload(args, nk, mk);
        // untimed warm-up
        drop(build_all(&w.sources, &w.receivers, Depth::Level(l_max), &config)?);
        let mut times = Vec::with_capacity(args.repeats);
        for _ in 0..args.repeats {
            let (s, t) = timed(|| build_all(&w.sources, &w.receivers, Depth::Level(l_max), &config));
            drop(s?);
            times.push(t);
        }
        let t = median(times);
        report.timing(&ctx, "build_median", t);
        if let Some((pn, pt)) = prev {
            let ratio = t / pt;
            report.check(
                &ctx,
                "build_time_ratio",
                ratio <= LINEAR_RATIO_LIMIT,
                ratio,
                format!("time({nk}) / time({pn}) against limit {LINEAR_RATIO_LIMIT}"),
            );
        }
        prev = Some((nk, t));
    }
    Ok(report)
}

/// Distributed evaluation over `P = 1, 2, 4, ...` up to `--nodes`.
fn bench_nodes(args: &Args) -> anyhow::Result<Report> {
    let (n, m) = (args.n_sources, args.n_receivers());
    let l_max = args.depth().resolve(n.max(m))?;
    let w = workload(args, n, m);
    let mut report = Report::default();
    let counts: Vec<usize> = std::iter::successors(Some(1usize), |&p| Some(p * 2))
        .take_while(|&p| p < args.nodes)
        .chain(std::iter::once(args.nodes))
        .collect();
    let mut base: Option<Vec<f64>> = None;
    for nodes in counts {
        let ctx = context(args, "bench", n, m, l_max, nodes);
        let cfg = cluster_config(args, nodes, Depth::Level(l_max));
        let mut times = Vec::with_capacity(args.repeats);
        let mut last = None;
        for _ in 0..args.repeats {
            let (run, t) = timed(|| evaluate_distributed(&w.sources, &w.receivers, &cfg));
            last = Some(run?);
            times.push(t);
        }
        let run = last.expect("repeats is positive");
        report.timing(&ctx, "distributed_evaluate_median", median(times));
        report.count(&ctx, "exchange_bytes", run.ledger.total_bytes() as usize);
        report.count(&ctx, "exported_boxes_l_max", run.ledger.exported_at(l_max) as usize);
        match &base {
            None => base = Some(run.potentials),
            Some(b) => {
                let diff = max_relative(&run.potentials, b);
                report.check(
                    &ctx,
                    "matches_one_node",
                    diff <= EQUIVALENCE_TOLERANCE,
                    diff,
                    format!("max relative difference {diff:.3e}"),
                );
            }
        }
    }
    Ok(report)
}
