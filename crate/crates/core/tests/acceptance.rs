//! Acceptance checks. Prints one PASS/FAIL/SKIP line per criterion and exits
//! non-zero if any check fails.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use promptwatt::clock::SimulatedClock;
use promptwatt::config::ExperimentConfig;
use promptwatt::corpus::TaskRecord;
use promptwatt::gateway::{parse_mock_table, Gateway, GenerationConfig, MockEndpoint};
use promptwatt::meter::{BatchLabel, EnergyMeter, MeterBackendConfig};
use promptwatt::metrics::{check_identities, derive, score_rows, PrimaryAggregate};
use promptwatt::pipeline::{self, AnalyzeOptions, RunManifest, MANIFEST_FILE};
use promptwatt::report::{emit_summary, ReportContext, SqMode, SummaryFormat};
use promptwatt::sandbox::RecordedSandbox;
use promptwatt::strategy::{render_plan, select_consensus, StrategyId, StrategyParams, TemplateSet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

type Outcome = Result<String, String>;
type Check = (u32, &'static str, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
}

fn random_aggregate(rng: &mut ChaCha8Rng, model: &str, strategy: StrategyId) -> PrimaryAggregate {
    PrimaryAggregate {
        model: model.to_string(),
        strategy,
        t: rng.random_range(1..5_000_000),
        tau: rng.random_range(1e-3..1e5),
        co2: rng.random_range(1e-8..10.0),
        e_cpu: rng.random_range(1e-9..5.0),
        e_gpu: rng.random_range(0.0..5.0),
        e_ram: rng.random_range(0.0..1.0),
        q: Some(rng.random_range(0.01..=1.0)),
    }
}

fn metric_identities() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut worst = 0.0f64;
    for i in 0..1000 {
        let a = random_aggregate(&mut rng, "m", StrategyId::ALL[i % 7]);
        let r = derive(&a).map_err(|e| e.to_string())?;
        // Oracle recomputed from the raw aggregate.
        let e_tot = a.e_cpu + a.e_gpu + a.e_ram;
        let tok_rate = a.t as f64 / (a.tau / 3600.0);
        let q1k = 1000.0 * a.q.unwrap() / a.t as f64;
        ensure!(
            rel(r.tok_rate, tok_rate) <= 1e-12,
            "row {i}: TokRate {} vs oracle {tok_rate}",
            r.tok_rate
        );
        let checks = [
            (r.tok_rate * r.sec_per_1k_tok, 3.6e6),
            (r.q_per_kwh.unwrap() * r.e_per_1k_tok, q1k),
            (r.q_per_co2.unwrap() * r.co2_per_1k_tok, q1k),
            (r.e_tot, e_tot),
        ];
        for (got, want) in checks {
            let d = rel(got, want);
            ensure!(d <= 1e-9, "row {i}: {got} vs {want} (rel {d:e})");
            worst = worst.max(d);
        }
        check_identities(&r).map_err(|e| format!("row {i}: {e}"))?;
    }
    let took = start.elapsed();
    ensure!(took < Duration::from_secs(1), "took {took:?}");
    Ok(format!("1000 rows, worst rel err {worst:.1e}, {took:.2?}"))
}

fn pair_consistency() -> Outcome {
    let mut notes = Vec::new();
    for (label, rate, sec) in [
        ("DeepSeek Zeroshot", 75_299.25, 47.81),
        ("DeepSeek Fewshot", 121_733.04, 29.57),
    ] {
        let t = 1_000_000u64;
        let tau = t as f64 / rate * 3600.0;
        let r = derive(&PrimaryAggregate {
            model: "deepseek".into(),
            strategy: StrategyId::Zeroshot,
            t,
            tau,
            co2: 1.0,
            e_cpu: 1.0,
            e_gpu: 1.0,
            e_ram: 1.0,
            q: None,
        })
        .map_err(|e| e.to_string())?;
        ensure!(rel(r.tok_rate, rate) <= 1e-9, "{label}: TokRate {}", r.tok_rate);
        let d = rel(r.sec_per_1k_tok, sec);
        ensure!(
            d <= 1e-3,
            "{label}: SecPer1KTok {} vs {sec} (rel {d:.2e})",
            r.sec_per_1k_tok
        );
        notes.push(format!("{label} {:.2} s", r.sec_per_1k_tok));
    }
    Ok(notes.join(", "))
}

fn literal_linearity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let aggs: Vec<_> = (0..200)
        .map(|i| random_aggregate(&mut rng, &format!("m{}", i / 7), StrategyId::ALL[i % 7]))
        .collect();
    let rows = score_rows(&aggs, &[0.5, 2.0]).map_err(|e| e.to_string())?;
    for r in &rows {
        let lo = r.sq_at(0.5).and_then(|e| e.literal).ok_or("missing alpha 0.5")?;
        let hi = r.sq_at(2.0).and_then(|e| e.literal).ok_or("missing alpha 2.0")?;
        ensure!(hi / lo == 4.0, "{}/{}: ratio {}", r.model, r.strategy, hi / lo);
    }
    Ok(format!("{} rows, ratio exactly 4.0", rows.len()))
}

fn normalized_ratio() -> Outcome {
    let cases = [
        ("DeepSeek Zeroshot", 0.88, 0.38 / 0.46),
        ("DeepSeek LtM", 0.92, 0.42 / 0.48),
        ("DeepSeek Fewshot", 0.97, 0.50 / 0.52),
        ("Mistral Zeroshot", 0.85, 0.33 / 0.42),
        ("Mistral LtM", 0.80, 0.36 / 0.50),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for (label, q, reported) in cases {
        // The row sits inside a seven-strategy group with varied costs.
        let mut group: Vec<_> = StrategyId::ALL
            .iter()
            .map(|&s| random_aggregate(&mut rng, "m", s))
            .collect();
        group[0].q = Some(q);
        let rows = score_rows(&group, &[0.5, 2.0]).map_err(|e| e.to_string())?;
        let row = rows
            .iter()
            .find(|r| r.strategy == StrategyId::ALL[0])
            .ok_or("row missing")?;
        let ratio = row.sq_at(2.0).and_then(|e| e.normalized).ok_or("no score")?
            / row.sq_at(0.5).and_then(|e| e.normalized).ok_or("no score")?;
        ensure!(
            rel(ratio, q.powf(1.5)) <= 1e-12,
            "{label}: ratio {ratio} vs Q^1.5 {}",
            q.powf(1.5)
        );
        let d = (ratio - reported).abs();
        ensure!(d <= 0.02, "{label}: ratio {ratio:.4} vs reported {reported:.4}");
        worst = worst.max(d);
    }
    Ok(format!("5 pairs, worst |diff| {worst:.4}"))
}

fn data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data")
}

/// Digest of everything a run writes except the timestamp column and the
/// output location.
fn run_digest(root: &Path) -> Result<String, String> {
    let mut h = Sha256::new();
    for (sub, ext) in [("logs", "csv"), ("coverage", "jsonl"), ("traces", "jsonl")] {
        let mut files: Vec<_> = fs::read_dir(root.join(sub))
            .map_err(|e| e.to_string())?
            .map(|e| e.unwrap().path())
            .filter(|p| p.extension().is_some_and(|x| x == ext))
            .collect();
        files.sort();
        for f in files {
            h.update(f.file_name().unwrap().as_encoded_bytes());
            for line in fs::read_to_string(&f).map_err(|e| e.to_string())?.lines() {
                let line = if ext == "csv" {
                    line.split_once(',').map_or(line, |x| x.1)
                } else {
                    line
                };
                h.update(line.as_bytes());
                h.update(b"\n");
            }
        }
    }
    let raw = fs::read_to_string(root.join(MANIFEST_FILE)).map_err(|e| e.to_string())?;
    let mut manifest: RunManifest = serde_json::from_str(&raw).map_err(|e| e.to_string())?;
    manifest.config.output_dir = PathBuf::new();
    h.update(serde_json::to_vec(&manifest).unwrap());
    Ok(hex::encode(h.finalize()))
}

fn count_lines(dir: &Path) -> Result<Vec<usize>, String> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).map_err(|e| e.to_string())? {
        let text = fs::read_to_string(e.unwrap().path()).map_err(|e| e.to_string())?;
        out.push(text.lines().filter(|l| !l.trim().is_empty()).count());
    }
    Ok(out)
}

fn end_to_end() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut cfg = ExperimentConfig::load(&data_dir().join("desk.toml")).map_err(|e| e.to_string())?;
    ensure!(
        cfg.models.len() == 1 && cfg.strategies.len() == 7,
        "desk config is not 1 x 7"
    );
    ensure!((cfg.n_batches, cfg.batch_size) == (3, 2), "desk config is not 3 x 2");
    ensure!(cfg.meter.is_simulated(), "desk meter is not simulated");

    let start = Instant::now();
    let mut digests = Vec::new();
    for name in ["a", "b"] {
        cfg.output_dir = tmp.path().join(name);
        let r = pipeline::run(&cfg, false).map_err(|e| e.to_string())?;
        ensure!(r.failures.is_empty(), "failures: {:?}", r.failures);
        digests.push(run_digest(&cfg.output_dir)?);
    }
    let took = start.elapsed();
    ensure!(took < Duration::from_secs(60), "two runs took {took:?}");

    let root = tmp.path().join("a");
    let logs = count_lines(&root.join("logs"))?;
    ensure!(
        logs.len() == 7 && logs.iter().all(|&n| n == 4),
        "log files/lines: {logs:?}"
    );
    let cov = count_lines(&root.join("coverage"))?;
    ensure!(
        cov.iter().sum::<usize>() == 42,
        "coverage records: {}",
        cov.iter().sum::<usize>()
    );

    let opts = AnalyzeOptions {
        alphas: vec![0.5, 1.0, 2.0],
        mode: SqMode::Both,
        out_dir: root.join("analysis"),
    };
    let rep = pipeline::analyze(&root.join("logs"), &root.join("coverage"), &opts).map_err(|e| e.to_string())?;
    ensure!(rep.rows.len() == 7, "summary rows: {}", rep.rows.len());
    for r in &rep.rows {
        check_identities(r).map_err(|e| format!("{}/{}: {e}", r.model, r.strategy))?;
        ensure!(r.q.is_some(), "{}: Q missing", r.strategy);
    }
    ensure!(
        digests[0] == digests[1],
        "rerun digests differ: {} vs {}",
        digests[0],
        digests[1]
    );
    Ok(format!(
        "21 batches, 42 records, 7 rows, digest {}, {took:.2?}",
        &digests[0][..12]
    ))
}

fn energy_physics() -> Outcome {
    let label = |b| BatchLabel {
        run_id: "r".into(),
        batch_id: b,
        model: "m".into(),
        strategy: StrategyId::Zeroshot,
    };
    let clock = Arc::new(SimulatedClock::new());
    let mut cfg = MeterBackendConfig::simulated(100.0, 0.0, 0.0);
    cfg.carbon_intensity = 0.475;
    let meter = EnergyMeter::new(cfg, clock.clone()).map_err(|e| e.to_string())?;
    let measure = |secs: f64, b| -> Result<_, String> {
        let s = meter.open_session(label(b)).map_err(|e| e.to_string())?;
        clock.advance(secs);
        s.close(Default::default(), 1).map_err(|e| e.to_string())
    };
    let m = measure(3600.0, 0)?;
    ensure!(rel(m.cpu_energy, 0.1) <= 1e-9, "cpu_energy {}", m.cpu_energy);
    ensure!(
        rel(m.emissions, m.energy_consumed * 0.475) <= 1e-12,
        "emissions {}",
        m.emissions
    );

    let clock2 = Arc::new(SimulatedClock::new());
    let meter2 = EnergyMeter::new(MeterBackendConfig::simulated(45.0, 120.0, 16.0), clock2.clone())
        .map_err(|e| e.to_string())?;
    let mut runs = Vec::new();
    for (b, secs) in [(1, 360.0), (2, 720.0)] {
        let s = meter2.open_session(label(b)).map_err(|e| e.to_string())?;
        clock2.advance(secs);
        runs.push(s.close(Default::default(), 1).map_err(|e| e.to_string())?);
    }
    let (a, b) = (&runs[0], &runs[1]);
    for (name, x, y) in [
        ("cpu", a.cpu_energy, b.cpu_energy),
        ("gpu", a.gpu_energy, b.gpu_energy),
        ("ram", a.ram_energy, b.ram_energy),
        ("total", a.energy_consumed, b.energy_consumed),
        ("emissions", a.emissions, b.emissions),
    ] {
        ensure!(y == 2.0 * x, "{name}: {y} != 2 x {x}");
    }
    Ok(format!(
        "cpu_energy {:.6} kWh, emissions {:.6} kg",
        m.cpu_energy, m.emissions
    ))
}

fn summary_round_trip() -> Outcome {
    // Reverse-engineered from Q = 0.98, E_1K = 0.0012, C_1K = 0.00057 at T = 100,000.
    let t = 100_000u64;
    let e_tot = 0.0012 * t as f64 / 1000.0;
    let agg = PrimaryAggregate {
        model: "Meta-Llama-3-8B-Instruct".into(),
        strategy: StrategyId::Fewshot,
        t,
        tau: 3600.0,
        co2: 0.00057 * t as f64 / 1000.0,
        e_cpu: e_tot * 0.3,
        e_gpu: e_tot * 0.6,
        e_ram: e_tot * 0.1,
        q: Some(0.98),
    };
    let rows = score_rows(&[agg], &[1.0]).map_err(|e| e.to_string())?;
    let table = emit_summary(&rows, SummaryFormat::Table, SqMode::Both, &ReportContext::default())
        .map_err(|e| e.to_string())?;
    let line = table
        .lines()
        .find(|l| l.contains("Fewshot"))
        .ok_or_else(|| format!("no Fewshot row in\n{table}"))?;
    let cells: Vec<&str> = line.split_whitespace().collect();
    ensure!(
        cells.get(2..5) == Some(&["0.98", "0.0012", "0.00057"][..]),
        "row printed as {line:?}"
    );
    Ok(format!("printed Q={} E_1K={} C_1K={}", cells[2], cells[3], cells[4]))
}

fn task() -> TaskRecord {
    TaskRecord {
        task_id: 11,
        text: "Write a function that doubles a number.".into(),
        code: "def double(x):\n    return 2 * x".into(),
        test_list: vec!["assert double(2) == 4".into()],
        test_setup_code: String::new(),
        challenge_test_list: Vec::new(),
    }
}

fn oracle_consensus(cands: &[&str]) -> usize {
    let sets: Vec<HashSet<String>> = cands
        .iter()
        .map(|c| {
            c.lines()
                .map(str::trim)
                .filter(|l| l.starts_with("assert"))
                .map(String::from)
                .collect()
        })
        .collect();
    let mut best = (0, -1.0);
    for i in 0..sets.len() {
        let mut score = 0.0;
        for j in 0..sets.len() {
            if i != j {
                let inter = sets[i].iter().filter(|x| sets[j].contains(*x)).count();
                let uni = sets[i].len() + sets[j].len() - inter;
                score += if uni == 0 { 1.0 } else { inter as f64 / uni as f64 };
            }
        }
        if score > best.1 {
            best = (i, score);
        }
    }
    best.0
}

fn strategy_shapes() -> Outcome {
    const A: &str = "```python\nassert double(1) == 2\nassert double(2) == 4\n```";
    const B: &str = "```python\nassert double(0) == 0\n```";
    let table = format!(
        "{}\n{}\n{}\n{}\n",
        serde_json::json!({"strategy": "SC_COT", "sample": 0, "text": A, "usage": {"prompt_tokens": 100, "completion_tokens": 200}}),
        serde_json::json!({"strategy": "SC_COT", "sample": 1, "text": A, "usage": {"prompt_tokens": 100, "completion_tokens": 200}}),
        serde_json::json!({"strategy": "SC_COT", "sample": 2, "text": B, "usage": {"prompt_tokens": 100, "completion_tokens": 200}}),
        serde_json::json!({"strategy": "REACT", "text": A, "usage": {"prompt_tokens": 50, "completion_tokens": 60}}),
    );
    let clock = Arc::new(SimulatedClock::new());
    let entries = parse_mock_table(Path::new("inline"), &table).map_err(|e| e.to_string())?;
    let ep = MockEndpoint::new("mock", entries, clock.clone());
    let gw = Gateway::new(clock);
    let templates = TemplateSet::builtin();
    let params = StrategyParams {
        sc_samples: 3,
        react_max_rounds: 3,
        ..StrategyParams::default()
    };
    let gen = GenerationConfig::default();
    let pass = RecordedSandbox::parse(
        Path::new("pass"),
        r#"{"syntax_ok":true,"tests_run":2,"tests_passed":2,"tests_failed":0,"tests_errored":0,"coverage_percent":90.0}"#,
    )
    .map_err(|e| e.to_string())?;
    let fail = RecordedSandbox::parse(
        Path::new("fail"),
        r#"{"syntax_ok":true,"tests_run":2,"tests_passed":1,"tests_failed":1,"tests_errored":0,"coverage_percent":50.0}"#,
    )
    .map_err(|e| e.to_string())?;

    let plan = render_plan(StrategyId::ScCot, &task(), &[], &params, &templates).map_err(|e| e.to_string())?;
    let tr = gw
        .run_trace(&plan, &task(), &gen, &ep, &pass)
        .map_err(|e| e.to_string())?;
    let s = &tr.token_stats;
    ensure!(tr.completions.len() == 3, "{} samples", tr.completions.len());
    ensure!(
        (s.input_tokens, s.output_tokens, s.total_tokens) == (300, 600, 900),
        "SC_COT tokens ({}, {}, {})",
        s.input_tokens,
        s.output_tokens,
        s.total_tokens
    );
    let (idx, _) = select_consensus(&[A, A, B]).map_err(|e| e.to_string())?;
    let oracle = oracle_consensus(&[A, A, B]);
    ensure!(idx == 0 && oracle == 0, "consensus {idx}, oracle {oracle}");
    ensure!(
        tr.selected_completion == Some(0),
        "trace selected {:?}",
        tr.selected_completion
    );
    let oracle_bb = oracle_consensus(&[B, A, A]);
    let (idx_bb, _) = select_consensus(&[B, A, A]).map_err(|e| e.to_string())?;
    ensure!(
        idx_bb == oracle_bb && idx_bb == 1,
        "consensus over B,A,A picked {idx_bb}, oracle {oracle_bb}"
    );

    let plan = render_plan(StrategyId::React, &task(), &[], &params, &templates).map_err(|e| e.to_string())?;
    let early = gw
        .run_trace(&plan, &task(), &gen, &ep, &pass)
        .map_err(|e| e.to_string())?;
    let full = gw
        .run_trace(&plan, &task(), &gen, &ep, &fail)
        .map_err(|e| e.to_string())?;
    ensure!(
        early.rounds_executed == 1,
        "REACT ran {} rounds on all-pass",
        early.rounds_executed
    );
    ensure!(
        full.rounds_executed == 3,
        "REACT ran {} rounds on failures",
        full.rounds_executed
    );
    Ok(format!(
        "SC_COT (300, 600, 900), consensus index 0, REACT stops after 1 of 3 rounds ({} on failure)",
        full.rounds_executed
    ))
}

fn main() -> ExitCode {
    let checks: [Check; 8] = [
        (1, "metric identities", metric_identities),
        (2, "throughput/latency pair consistency", pair_consistency),
        (3, "literal SQ linearity in alpha", literal_linearity),
        (4, "normalized SQ alpha ratio", normalized_ratio),
        (5, "end-to-end dry run", end_to_end),
        (6, "energy physics", energy_physics),
        (7, "summary round-trip (Meta-Llama Fewshot)", summary_round_trip),
        (9, "strategy shapes", strategy_shapes),
    ];
    let mut failed = 0;
    for (id, name, f) in checks {
        if id == 9 {
            println!("SKIP  [8] coverage shim oracle: secondary component, not built here");
        }
        match f() {
            Ok(detail) => println!("PASS  [{id}] {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL  [{id}] {name}: {why}");
            }
        }
    }
    println!("{} passed, {failed} failed, 1 skipped", checks.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
