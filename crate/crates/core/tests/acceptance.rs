//! End-to-end acceptance checks. Every criterion prints one PASS/FAIL line
//! to stderr (uncaptured) and the test fails if any criterion fails.

mod common;

use std::io::Write as _;
use std::path::Path;
use std::time::{Duration, Instant};

use qlip_core::config::{RunConfig, Stage};
use qlip_core::diffusion::{sample_batch, SampleJob, StepGroups};
use qlip_core::eval::{compute_fab, rank_correlation};
use qlip_core::par::Parallelism;
use qlip_core::pipeline::{ablation_configs, Axis, Pipeline};
use qlip_core::qlip::{merge_bit_plans, BitPlan, Q2BParams, Variant};
use qlip_core::quant::{make_quantizer, BitMenu};
use qlip_core::rng::StreamKey;
use qlip_core::synth::generate_dataset;

type Outcome = Result<String, String>;

fn report(id: u32, name: &str, outcome: &Outcome) {
    let line = match outcome {
        Ok(d) => format!("criterion {id:>2} PASS  {name}: {d}"),
        Err(d) => format!("criterion {id:>2} FAIL  {name}: {d}"),
    };
    let _ = writeln!(std::io::stderr(), "{line}");
}

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    format!("error: {e}")
}

fn random_params(rng: &mut qlip_core::rng::Stream, variant: Variant) -> Q2BParams {
    let k = 1 + rng.below(8);
    let steps = 2 + rng.below(100);
    let m = 1 + rng.below(steps);
    let forced = rng.below(steps / 2 + 1);
    let groups = StepGroups::new(steps, m).unwrap();
    let mut p = Q2BParams::new(k, groups, forced, common::menu_6_8_10(), variant).unwrap();
    for v in p.s.iter_mut().chain(p.o.iter_mut()) {
        *v = 6.0 * rng.normal();
    }
    for v in p
        .u_m
        .data_mut()
        .iter_mut()
        .chain(p.u_h.data_mut().iter_mut())
    {
        *v = 6.0 * rng.normal();
    }
    p
}

fn c1_simplex() -> Outcome {
    let start = Instant::now();
    let mut rng = StreamKey::new(1, "acceptance-simplex").rng();
    let mut worst = 0.0f64;
    let mut outside = 0;
    for i in 0..10_000 {
        let p = random_params(&mut rng, Variant::ALL[i % 4]);
        let q = rng.uniform();
        let t = 1 + rng.below(p.steps());
        let pr = p.probs(q, t).map_err(err)?;
        for l in 0..p.layers() {
            let (a, b, c) = (pr.low[l], pr.med[l], pr.high[l]);
            worst = worst.max((a + b + c - 1.0).abs());
            outside += [a, b, c]
                .iter()
                .filter(|x| !(0.0..=1.0).contains(*x))
                .count();
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(
        worst < 1e-12 && outside == 0 && secs < 5.0,
        format!("max |sum-1| = {worst:.1e}, {outside} components outside [0,1], {secs:.2}s"),
    )
}

fn c2_gradients() -> Outcome {
    let start = Instant::now();
    let worst = (0..50).map(common::gradient_check).fold(0.0, f64::max);
    let secs = start.elapsed().as_secs_f64();
    ensure(
        worst < 1e-4 && secs < 120.0,
        format!("max relative error {worst:.2e} over 50 seeds, {secs:.1}s"),
    )
}

fn c3_quantizer_laws() -> Outcome {
    let mut rng = StreamKey::new(3, "acceptance-quantizer").rng();
    let mut bad = 0;
    for _ in 0..10_000 {
        let lo = 10.0 * rng.normal();
        let hi = lo + 1e-3 + 20.0 * rng.uniform();
        let spec = make_quantizer((lo, hi), 2 + rng.below(15) as u32).map_err(err)?;
        let x = 30.0 * rng.normal();
        let y = 30.0 * rng.normal();
        let q = spec.apply(x);
        bad += usize::from(spec.apply(q).to_bits() != q.to_bits());
        bad += usize::from(spec.passes(x) && (q - x).abs() > spec.scale / 2.0 + 1e-12);
        let (a, b) = if x <= y { (x, y) } else { (y, x) };
        bad += usize::from(spec.apply(a) > spec.apply(b));
    }
    ensure(bad == 0, format!("{bad} violations over 10^4 specs"))
}

fn c4_identity() -> Outcome {
    let menu = BitMenu::new(32, 32, 32, 32).map_err(err)?;
    let mut mismatched = 0;
    for seed in 0..20 {
        let r = common::rig(seed, common::small_shape(), 20, 4, menu);
        let data = generate_dataset(&r.world, 4, StreamKey::new(seed, "identity")).map_err(err)?;
        let plan = BitPlan::filled(r.model.shape().quant_layers, 20, 32);
        let jobs = |plan: Option<&BitPlan>| -> Vec<(Vec<f64>, StreamKey, Option<BitPlan>)> {
            data.iter()
                .enumerate()
                .map(|(i, (p, _))| {
                    (
                        p.z.clone(),
                        StreamKey::new(seed, "draw").child(i as u64),
                        plan.cloned(),
                    )
                })
                .collect()
        };
        let run = |owned: &[(Vec<f64>, StreamKey, Option<BitPlan>)], quant: bool| {
            let jobs: Vec<SampleJob<'_>> = owned
                .iter()
                .map(|(z, key, plan)| SampleJob {
                    z,
                    key: *key,
                    plan: plan.as_ref(),
                })
                .collect();
            let q = quant.then_some(&r.quantized);
            sample_batch(
                &r.model,
                q,
                &r.schedule,
                r.groups,
                &jobs,
                Parallelism::default(),
            )
        };
        let full = run(&jobs(None), false).map_err(err)?;
        let quant = run(&jobs(Some(&plan)), true).map_err(err)?;
        for (a, b) in full.iter().zip(&quant) {
            let same =
                a.x0.iter()
                    .zip(&b.x0)
                    .all(|(x, y)| x.to_bits() == y.to_bits());
            mismatched += usize::from(!same);
        }
    }
    ensure(
        mismatched == 0,
        format!("{mismatched} of 80 samples differ across 20 seeds"),
    )
}

fn c6_group_sharing() -> Outcome {
    let mut rng = StreamKey::new(6, "acceptance-groups").rng();
    let mut bad = 0;
    for i in 0..500 {
        let p = random_params(&mut rng, Variant::ALL[i % 4]);
        let q = rng.uniform();
        let m = p.groups.group_size();
        for g in 0..p.groups.groups() {
            let steps: Vec<usize> = (g * m + 1..=((g + 1) * m).min(p.steps())).collect();
            // Steps inside the forced window override p_q, so rows are
            // compared within the forced and unforced parts separately.
            for forced in [true, false] {
                let rows: Vec<_> = steps
                    .iter()
                    .filter(|&&t| p.is_forced(t) == forced)
                    .map(|&t| p.probs(q, t).unwrap())
                    .collect();
                bad += rows.windows(2).filter(|w| w[0] != w[1]).count();
            }
        }
    }
    ensure(
        bad == 0,
        format!("{bad} differing rows within groups over 500 allocators"),
    )
}

fn c7_parameter_count() -> Outcome {
    let mut rng = StreamKey::new(7, "acceptance-count").rng();
    for _ in 0..1000 {
        let p = random_params(&mut rng, Variant::Full);
        let k = p.layers();
        let expect = 2 * k + 2 * k * p.steps().div_ceil(p.groups.group_size());
        if p.parameter_count() != expect {
            return Err(format!(
                "K={k} T={} M={}: {} != {expect}",
                p.steps(),
                p.groups.group_size(),
                p.parameter_count()
            ));
        }
    }
    let c = RunConfig::default();
    let p = Q2BParams::new(
        6,
        c.step_groups().map_err(err)?,
        c.forced_steps(),
        c.menu,
        Variant::Full,
    )
    .map_err(err)?;
    ensure(
        p.parameter_count() == 72,
        format!("default K=6, T=100, M=20 gives {}", p.parameter_count()),
    )
}

/// The runs the pipeline-level criteria read from.
struct Runs {
    base: Pipeline,
    t2q_secs: f64,
    full_secs: f64,
    lambdas: Vec<(f64, Pipeline)>,
    variants: Vec<(Variant, Pipeline)>,
    repeat: Pipeline,
}

fn setup(root_a: &Path, root_b: &Path) -> Result<Runs, String> {
    let cfg = RunConfig::default();
    let base = Pipeline::with_root(cfg.clone(), root_a.to_path_buf(), false);
    let start = Instant::now();
    base.run_stages(&[Stage::Calibrate, Stage::TrainT2q])
        .map_err(err)?;
    let t2q_secs = start.elapsed().as_secs_f64();
    base.run_all().map_err(err)?;
    let full_secs = start.elapsed().as_secs_f64();
    let mut lambdas = Vec::new();
    for (_, c) in ablation_configs(&cfg, Axis::LambdaBit).map_err(err)? {
        let p = Pipeline::with_root(c.clone(), root_a.to_path_buf(), false);
        p.run_all().map_err(err)?;
        lambdas.push((c.q2b.lambda_bit, p));
    }
    let mut variants = Vec::new();
    for (_, c) in ablation_configs(&cfg, Axis::Variant).map_err(err)? {
        let p = Pipeline::with_root(c.clone(), root_a.to_path_buf(), false);
        p.run_all().map_err(err)?;
        variants.push((c.q2b.variant, p));
    }
    let repeat = Pipeline::with_root(cfg, root_b.to_path_buf(), false);
    repeat.run_all().map_err(err)?;
    Ok(Runs {
        base,
        t2q_secs,
        full_secs,
        lambdas,
        variants,
        repeat,
    })
}

fn read(p: &Pipeline, name: &str) -> Result<String, String> {
    let dir = p.completed(Stage::Evaluate).map_err(err)?;
    std::fs::read_to_string(dir.join(name)).map_err(err)
}

fn qlip_plans(p: &Pipeline) -> Result<(Vec<BitPlan>, Vec<BitPlan>), String> {
    let s = p.load_samples().map_err(err)?;
    let (arms, per_sample) = (s.arms, s.per_sample);
    let arm = arms
        .into_iter()
        .find(|a| a.name == "qlip")
        .and_then(|a| a.plans)
        .ok_or("no qlip arm")?;
    Ok((arm, per_sample))
}

fn arm_metric(p: &Pipeline, arm: &str, key: &str) -> Result<f64, String> {
    let m = p.manifest(Stage::Evaluate).map_err(err)?;
    m.summary["arms"][arm][key]
        .as_f64()
        .ok_or_else(|| format!("no {key} for arm {arm}"))
}

fn c5_forced_window(runs: &Runs) -> Outcome {
    let all = std::iter::once(&runs.base)
        .chain(runs.lambdas.iter().map(|(_, p)| p))
        .chain(runs.variants.iter().map(|(_, p)| p));
    let (mut plans_checked, mut violations) = (0usize, 0usize);
    for p in all {
        let m = p.config.forced_steps();
        let low = p.config.menu.low;
        let (arm, per_sample) = qlip_plans(p)?;
        for plan in arm.iter().chain(&per_sample) {
            plans_checked += 1;
            for t in 0..m {
                violations += plan.column(t).iter().filter(|&&b| b == low).count();
            }
        }
    }
    ensure(
        violations == 0 && plans_checked > 0,
        format!("{violations} low-width entries at t <= m across {plans_checked} emitted plans"),
    )
}

fn c8_t2q(runs: &Runs) -> Outcome {
    let m = runs.base.manifest(Stage::TrainT2q).map_err(err)?;
    let srocc = m.summary["srocc"].as_f64().ok_or("no SROCC")?;
    let plcc = m.summary["plcc"].as_f64().ok_or("no PLCC")?;
    let c = &runs.base.config.t2q;
    ensure(
        srocc >= 0.5
            && plcc >= 0.5
            && runs.t2q_secs < 300.0
            && c.dataset_size == 2000
            && c.val_fraction == 0.2,
        format!(
            "SROCC {srocc:.4}, PLCC {plcc:.4} on 400 held-out prompts, {:.0}s",
            runs.t2q_secs
        ),
    )
}

fn c9_tradeoff(runs: &Runs) -> Outcome {
    let c = &runs.base.config;
    let setting = c.menu.bits() == [6, 8, 10]
        && c.menu.weight_bits == 8
        && c.schedule.steps == 100
        && c.model.quant_layers == 6
        && c.sample.count == 500;
    let fab = arm_metric(&runs.base, "qlip", "fab")?;
    let mmd = arm_metric(&runs.base, "qlip", "mmd2")?;
    let u8 = arm_metric(&runs.base, "uniform-8", "mmd2")?;
    let u6 = arm_metric(&runs.base, "uniform-6", "mmd2")?;
    ensure(
        setting && fab <= 8.0 && mmd <= 1.10 * u8 && mmd < u6 && runs.full_secs < 1800.0,
        format!(
            "FAB {fab:.3}; MMD² {mmd:.6} vs uniform-8 {u8:.6} (ratio {:.3}) and uniform-6 {u6:.6}; {:.0}s",
            mmd / u8,
            runs.full_secs
        ),
    )
}

fn c10_richness(runs: &Runs) -> Outcome {
    let csv = read(&runs.base, "fab_by_level.csv")?;
    let fab: Vec<f64> = csv
        .lines()
        .skip(1)
        .map(|l| {
            l.split(',')
                .nth(1)
                .and_then(|v| v.parse().ok())
                .ok_or("bad fab_by_level.csv")
        })
        .collect::<Result<_, _>>()?;
    let levels: Vec<f64> = (0..fab.len()).map(|l| l as f64).collect();
    let (rho, _) = rank_correlation(&levels, &fab).map_err(err)?;
    let m = runs.base.manifest(Stage::TrainT2q).map_err(err)?;
    let labels: Vec<f64> = serde_json_values(&m.summary["label_mean_by_level"]);
    let monotone = labels.windows(2).all(|w| w[1] > w[0]);
    ensure(
        rho >= 0.8 && monotone,
        format!("FAB by level {fab:.3?}, Spearman {rho:.2}; label means {labels:.3?}"),
    )
}

fn serde_json_values(v: &serde_json::Value) -> Vec<f64> {
    v.as_array()
        .map(|a| a.iter().filter_map(|x| x.as_f64()).collect())
        .unwrap_or_default()
}

fn c11_lambda(runs: &Runs) -> Outcome {
    let fabs: Vec<(f64, f64)> = runs
        .lambdas
        .iter()
        .map(|(l, p)| arm_metric(p, "qlip", "fab").map(|f| (*l, f)))
        .collect::<Result<_, _>>()?;
    let [(_, lo), (_, mid), (_, hi)] = fabs[..] else {
        return Err(format!("expected three lambda runs, got {}", fabs.len()));
    };
    let (min, max) = (lo.min(hi), lo.max(hi));
    ensure(
        lo > hi && mid >= min - 0.3 && mid <= max + 0.3,
        format!("FAB at lambda 0.1 / 1 / 10: {lo:.3} / {mid:.3} / {hi:.3}"),
    )
}

fn c12_batch(runs: &Runs) -> Outcome {
    let (_, per_sample) = qlip_plans(&runs.base)?;
    let mut mismatched = 0usize;
    for b in [4, 16] {
        for chunk in per_sample.chunks(b) {
            let merged = merge_bit_plans(chunk).map_err(err)?;
            for l in 0..merged.layers() {
                for t in 0..merged.steps() {
                    let max = chunk.iter().map(|p| p.get(l, t)).max().unwrap_or(0);
                    mismatched += usize::from(merged.get(l, t) != max);
                }
            }
        }
    }
    let csv = read(&runs.base, "batch_fab.csv")?;
    let sweep: Vec<(usize, f64)> = csv
        .lines()
        .skip(1)
        .map(|l| {
            let mut it = l.split(',');
            let b = it.next().and_then(|v| v.parse().ok());
            let f = it.next().and_then(|v| v.parse().ok());
            b.zip(f).ok_or("bad batch_fab.csv")
        })
        .collect::<Result<_, _>>()?;
    let sizes: Vec<usize> = sweep.iter().map(|s| s.0).collect();
    let nondecreasing = sweep.windows(2).all(|w| w[1].1 >= w[0].1);
    let fab1 = compute_fab(&per_sample).map_err(err)?;
    ensure(
        mismatched == 0 && nondecreasing && sizes == [1, 4, 16] && (fab1 - sweep[0].1).abs() < 1e-6,
        format!("{mismatched} merge mismatches; batch FAB {sweep:.3?}"),
    )
}

fn c13_variants(runs: &Runs) -> Outcome {
    let mut parts = Vec::new();
    let mut ok = runs.variants.len() == 4;
    for (v, p) in &runs.variants {
        let (plans, _) = qlip_plans(p)?;
        let mut widths: Vec<u32> = plans.iter().flat_map(|p| p.entries().to_vec()).collect();
        widths.sort_unstable();
        widths.dedup();
        if *v == Variant::QOnly {
            let menu = p.config.menu;
            ok &= widths.iter().all(|&b| b == menu.low || b == menu.high);
        }
        let fab = arm_metric(p, "qlip", "fab")?;
        parts.push(format!("{} FAB {fab:.3} widths {widths:?}", v.name()));
    }
    ensure(ok, parts.join("; "))
}

fn c14_determinism(runs: &Runs) -> Outcome {
    let a = read(&runs.base, "metrics.csv")?;
    let b = read(&runs.repeat, "metrics.csv")?;
    ensure(
        a == b && !a.is_empty(),
        format!("metrics.csv {} bytes, identical: {}", a.len(), a == b),
    )
}

#[test]
fn acceptance() {
    let started = Instant::now();
    let mut failed = Vec::new();
    let mut record = |id: u32, name: &str, outcome: Outcome| {
        report(id, name, &outcome);
        if outcome.is_err() {
            failed.push(id);
        }
    };
    record(1, "simplex identity", c1_simplex());
    record(2, "gradient exactness", c2_gradients());
    record(3, "quantizer laws", c3_quantizer_laws());
    record(4, "identity passthrough", c4_identity());

    let (root_a, root_b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let runs = setup(root_a.path(), root_b.path());
    let pipeline = |f: fn(&Runs) -> Outcome| match &runs {
        Ok(r) => f(r),
        Err(e) => Err(format!("pipeline setup failed: {e}")),
    };
    record(5, "forced-high window", pipeline(c5_forced_window));
    record(6, "group sharing", c6_group_sharing());
    record(7, "parameter count", c7_parameter_count());
    record(8, "T2Q fit", pipeline(c8_t2q));
    record(9, "efficiency/quality trade", pipeline(c9_tradeoff));
    record(10, "prompt-richness trend", pipeline(c10_richness));
    record(11, "lambda_bit trend", pipeline(c11_lambda));
    record(12, "batch merge", pipeline(c12_batch));
    record(13, "ablation matrix", pipeline(c13_variants));
    record(14, "determinism", pipeline(c14_determinism));
    let _ = writeln!(
        std::io::stderr(),
        "acceptance finished in {:.0?}",
        Duration::from_secs(started.elapsed().as_secs())
    );
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
