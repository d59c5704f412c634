use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use qnet_core::repeater::{run_simulation_with_workers, Scenario};
use qnet_sim::{parse_config, parse_config_str, resolve, CliOverrides, ResolvedConfig};
use serde_json::Value;
use tempfile::TempDir;

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_qnet-sim"));
    cmd.env_remove("RUST_LOG").env_remove("QNET_SIM_WORKERS");
    cmd
}

fn run(args: &[&str], cwd: &Path) -> Output {
    bin().args(args).current_dir(cwd).output().expect("binary runs")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn shipped(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs").join(name)
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

fn resolved(text: &str, scenario: Scenario) -> ResolvedConfig {
    resolve(&parse_config_str(text).unwrap(), scenario, &CliOverrides::default()).unwrap()
}

#[test]
fn minimal_herald_config_echoes_defaults() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(tmp.path(), "c.json", r#"{"scenario": "herald-one-link", "seed": 3}"#);
    let out = run(&["herald", "--config", cfg.to_str().unwrap(), "--stdout"], tmp.path());
    assert!(out.status.success(), "{}", stderr(&out));
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    let echo = &report["config"];
    assert_eq!(echo["seed"], 3);
    assert_eq!(echo["preset"], "fabry-perot");
    assert_eq!(echo["protocol"]["repetitions"], 100);
    assert_eq!(echo["protocol"]["max_trials"], 10_000_000);
    assert_eq!(echo["protocol"]["attempt_period"], 1e-6);
    assert_eq!(echo["output"]["format"], "json");
    let nodes = echo["topology"]["nodes"].as_array().unwrap();
    assert_eq!(nodes.len(), 3);
    assert_eq!(nodes[0]["kind"]["params"]["p_excite"], 0.01);
    assert_eq!(report["tool"], "qnet-sim");
    assert_eq!(report["summary"]["seed"], 3);
}

#[test]
fn seed_is_required() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(tmp.path(), "c.json", r#"{"scenario": "herald-one-link"}"#);
    let out = run(&["herald", "--config", cfg.to_str().unwrap(), "--stdout"], tmp.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("seed"), "{}", stderr(&out));
    assert!(out.stdout.is_empty());
    // --seed alone is enough
    let out = run(&["herald", "--seed", "5", "--stdout"], tmp.path());
    assert!(out.status.success(), "{}", stderr(&out));
}

#[test]
fn misspelled_key_is_named() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(tmp.path(), "c.json", r#"{"seed": 1, "protocol": {"repetition": 3}}"#);
    let out = run(&["herald", "--config", cfg.to_str().unwrap()], tmp.path());
    assert_eq!(out.status.code(), Some(1));
    let msg = stderr(&out);
    assert!(msg.contains("repetition") && msg.contains("protocol"), "{msg}");

    let err =
        parse_config_str(r#"{"layout": {"link": {"length": 1, "attenuation": 0, "phase_jiter_std": 0}}}"#).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("phase_jiter_std") && msg.contains("layout.link"), "{msg}");
    assert_eq!(err.exit_code(), 1);
}

#[test]
fn unknown_scenario_and_preset_are_config_errors() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(tmp.path(), "a.json", r#"{"scenario": "teleport", "seed": 1}"#);
    let out = run(&["herald", "--config", cfg.to_str().unwrap()], tmp.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("teleport"));

    let cfg = write(tmp.path(), "b.json", r#"{"seed": 1, "preset": "bottle"}"#);
    let out = run(&["herald", "--config", cfg.to_str().unwrap()], tmp.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("fabry-perot"), "known presets are listed");

    // config written for another subcommand
    let out = run(
        &["hybrid", "--config", shipped("swap-chain.json").to_str().unwrap()],
        tmp.path(),
    );
    assert_eq!(out.status.code(), Some(1));

    let out = run(&["teleport"], tmp.path());
    assert_eq!(out.status.code(), Some(1));
    let out = run(
        &["herald", "--config", tmp.path().join("missing.json").to_str().unwrap()],
        tmp.path(),
    );
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn protocol_failure_exits_with_two() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(
        tmp.path(),
        "c.json",
        r#"{"seed": 1, "overrides": {"p_excite": 1e-9}, "protocol": {"max_trials": 1, "repetitions": 1}}"#,
    );
    let out = run(&["herald", "--config", cfg.to_str().unwrap(), "--stdout"], tmp.path());
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    assert!(out.stdout.is_empty());
}

#[test]
fn microtoroid_critical_numbers() {
    let tmp = TempDir::new().unwrap();
    let out = run(&["calc", "critical-numbers", "--preset", "microtoroid"], tmp.path());
    assert!(out.status.success(), "{}", stderr(&out));
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    let (n0, big_n0) = (v["n0"].as_f64().unwrap(), v["N0"].as_f64().unwrap());
    let factor = |x: f64, y: f64| (x / y).max(y / x);
    assert!(factor(n0, 2e-5) <= 3.0, "n0 = {n0}");
    assert!(factor(big_n0, 1e-6) <= 3.0, "N0 = {big_n0}");
    // independent of the library: n0 = γ²/g², N0 = κγ/g²
    let (g, k, y) = (
        v["g"].as_f64().unwrap(),
        v["kappa"].as_f64().unwrap(),
        v["gamma"].as_f64().unwrap(),
    );
    assert!((n0 / (y * y / (g * g)) - 1.0).abs() < 1e-12);
    assert!((big_n0 / (k * y / (g * g)) - 1.0).abs() < 1e-12);
}

#[test]
fn fixed_seed_herald_is_byte_identical() {
    let cfg = shipped("herald-one-link.json");
    // separate working directories, same relative --out
    let roots = [TempDir::new().unwrap(), TempDir::new().unwrap()];
    let dirs = [roots[0].path().join("o"), roots[1].path().join("o")];
    for (root, workers) in roots.iter().zip(["1", "4"]) {
        let out = bin()
            .args([
                "herald",
                "--config",
                cfg.to_str().unwrap(),
                "--format",
                "csv",
                "--out",
                "o",
            ])
            .env("QNET_SIM_WORKERS", workers)
            .current_dir(root.path())
            .output()
            .unwrap();
        assert!(out.status.success(), "{}", stderr(&out));
    }
    for name in ["summary.json", "trials.csv", "metrics.csv", "links.csv", "events.csv"] {
        let a = std::fs::read(dirs[0].join(name)).unwrap();
        let b = std::fs::read(dirs[1].join(name)).unwrap();
        assert!(!a.is_empty(), "{name} is empty");
        assert_eq!(a, b, "{name} differs between runs");
    }
    let trials = std::fs::read_to_string(dirs[0].join("trials.csv")).unwrap();
    assert_eq!(
        trials.lines().next().unwrap(),
        "repetition,link,time,outcome,cumulative_trials"
    );
    // each repetition ends on its herald
    let summary = read_json(&dirs[0].join("summary.json"));
    let heralds = trials
        .lines()
        .filter(|l| l.contains(",d1,") || l.contains(",d2,"))
        .count() as u64;
    assert_eq!(heralds, summary["summary"]["repetitions"].as_u64().unwrap());
    // wall-clock lives beside the summary, not in it
    let timing = read_json(&dirs[0].join("timing.json"));
    assert_eq!(timing["config_hash"], summary["config_hash"]);
    assert!(timing["wall_clock_seconds"].as_f64().unwrap() >= 0.0);
    assert!(!std::fs::read_to_string(dirs[0].join("summary.json"))
        .unwrap()
        .contains("wall_clock"));
}

#[test]
fn concurrence_of_a_serialized_bell_state() {
    let tmp = TempDir::new().unwrap();
    let state = write(tmp.path(), "bell.json", r#"{"bell": "psi-plus"}"#);
    let out = run(
        &["verify", "concurrence", "--state", state.to_str().unwrap()],
        tmp.path(),
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!((v["concurrence"].as_f64().unwrap() - 1.0).abs() < 1e-12);

    // same state as an explicit matrix
    let m = r#"{"re": [[0,0,0,0],[0,0.5,0.5,0],[0,0.5,0.5,0],[0,0,0,0]]}"#;
    let state = write(tmp.path(), "m.json", m);
    let out = run(&["verify", "chsh", "--state", state.to_str().unwrap()], tmp.path());
    assert!(out.status.success(), "{}", stderr(&out));
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!((v["max_chsh"].as_f64().unwrap() - 2.0 * 2f64.sqrt()).abs() < 1e-9);

    // the canonical angles passed back explicitly give the same value
    let list: Vec<String> = v["angles"].as_array().unwrap().iter().map(|a| a.to_string()).collect();
    let joined = list.join(",");
    let explicit = run(
        &[
            "verify",
            "chsh",
            "--state",
            state.to_str().unwrap(),
            "--angles",
            &joined,
        ],
        tmp.path(),
    );
    assert!(explicit.status.success(), "{}", stderr(&explicit));
    let e: Value = serde_json::from_slice(&explicit.stdout).unwrap();
    assert!((e["chsh"].as_f64().unwrap() - v["chsh"].as_f64().unwrap()).abs() < 1e-12);
    let three = run(
        &[
            "verify",
            "chsh",
            "--state",
            state.to_str().unwrap(),
            "--angles",
            "0,-0.5,1",
        ],
        tmp.path(),
    );
    assert_eq!(three.status.code(), Some(1));

    let bad = write(tmp.path(), "bad.json", r#"{"re": [[1, 0], [0, 0]]}"#);
    let out = run(&["verify", "concurrence", "--state", bad.to_str().unwrap()], tmp.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn swap_chain_summary_matches_the_library_report() {
    let tmp = TempDir::new().unwrap();
    let cfg = shipped("swap-chain.json");
    let out = run(
        &[
            "swap-chain",
            "--config",
            cfg.to_str().unwrap(),
            "--format",
            "csv",
            "--out",
            "o",
        ],
        tmp.path(),
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let summary = read_json(&tmp.path().join("o/summary.json"));

    let cli = CliOverrides {
        format: Some(qnet_sim::Format::Csv),
        out: Some("o".into()),
        ..Default::default()
    };
    let config = resolve(&parse_config(&cfg).unwrap(), Scenario::SwapChain, &cli).unwrap();
    assert_eq!(summary["config"], serde_json::to_value(config.echo()).unwrap());
    let report = run_simulation_with_workers(&config.topology, &config.protocol, Some(1)).unwrap();
    let direct = serde_json::to_value(&report).unwrap();
    assert_eq!(summary["summary"], direct);
    assert!(!report.stages.is_empty());

    let mut rows = csv::Reader::from_path(tmp.path().join("o/stages.csv")).unwrap();
    let headers = rows.headers().unwrap().clone();
    let got: Vec<csv::StringRecord> = rows.records().map(Result::unwrap).collect();
    assert_eq!(got.len(), report.stages.len());
    for (row, stage) in got.iter().zip(&report.stages) {
        let field = |name: &str| row.get(headers.iter().position(|h| h == name).unwrap()).unwrap();
        assert_eq!(field("node"), stage.node);
        assert_eq!(field("attempts").parse::<u64>().unwrap(), stage.attempts);
        assert_eq!(field("successes").parse::<u64>().unwrap(), stage.successes);
        assert_eq!(
            field("analytic_success_probability").parse::<f64>().unwrap(),
            stage.analytic_success_probability
        );
        assert_eq!(
            field("mean_success_probability").parse::<f64>().unwrap(),
            stage.mean_success_probability
        );
    }
}

#[test]
fn echo_round_trip_is_idempotent() {
    for (name, scenario) in [
        ("herald-one-link.json", Scenario::HeraldOneLink),
        ("node-pair-bell.json", Scenario::NodePairBell),
        ("swap-chain.json", Scenario::SwapChain),
        ("hybrid.json", Scenario::Hybrid),
        ("cavity-transfer.json", Scenario::CavityTransfer),
    ] {
        let file = parse_config(&shipped(name)).unwrap();
        let first = resolve(&file, scenario, &CliOverrides::default()).unwrap();
        let text = serde_json::to_string_pretty(&first.echo()).unwrap();
        let again = resolve(&parse_config_str(&text).unwrap(), scenario, &CliOverrides::default()).unwrap();
        assert_eq!(first, again, "{name}");
        assert_eq!(text, serde_json::to_string_pretty(&again.echo()).unwrap(), "{name}");
        assert_eq!(first.hash(), again.hash(), "{name}");
    }
}

#[test]
fn config_hash_names_the_computation() {
    let a = resolved(
        r#"{"seed": 7, "protocol": {"repetitions": 3}}"#,
        Scenario::HeraldOneLink,
    );
    // key order, whitespace and explicit defaults do not matter
    let b = resolved(
        r#"{ "protocol": {"repetitions": 3, "max_trials": 10000000}, "preset": "fabry-perot", "seed": 7 }"#,
        Scenario::HeraldOneLink,
    );
    assert_eq!(a.hash(), b.hash());
    // where the results go does not matter either
    let c = resolved(
        r#"{"seed": 7, "protocol": {"repetitions": 3}, "output": {"dir": "x"}}"#,
        Scenario::HeraldOneLink,
    );
    assert_eq!(a.hash(), c.hash());
    let d = resolved(
        r#"{"seed": 8, "protocol": {"repetitions": 3}}"#,
        Scenario::HeraldOneLink,
    );
    assert_ne!(a.hash(), d.hash());
    assert_eq!(a.hash().len(), 64);
    assert!(a.hash().chars().all(|ch| ch.is_ascii_hexdigit()));
}

#[test]
fn stdout_carries_only_data() {
    let tmp = TempDir::new().unwrap();
    let out = bin()
        .args(["herald", "--seed", "2", "--stdout"])
        .env("RUST_LOG", "info")
        .current_dir(tmp.path())
        .output()
        .unwrap();
    assert!(out.status.success());
    let v: Value = serde_json::from_slice(&out.stdout).expect("stdout is one JSON document");
    assert_eq!(v["summary"]["scenario"], "herald-one-link");
    assert_eq!(
        std::fs::read_dir(tmp.path()).unwrap().count(),
        0,
        "no files without --out"
    );

    let out = run(&["herald", "--seed", "2", "--stdout", "--format", "csv"], tmp.path());
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "metric,mean,std,min,max,count");
    assert!(lines.all(|l| l.split(',').count() == 6));

    // without --stdout nothing is printed and files land in the working directory
    let out = run(&["herald", "--seed", "2"], tmp.path());
    assert!(out.status.success());
    assert!(out.stdout.is_empty());
    assert!(tmp.path().join("summary.json").exists());
}

#[test]
fn calc_commands() {
    let tmp = TempDir::new().unwrap();
    let out = run(&["calc", "dimension", "--nodes", "2", "--qubits", "3"], tmp.path());
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(
        (v["classical"].as_str(), v["quantum"].as_str()),
        (Some("16"), Some("64"))
    );

    // g = μ √(ω / 2ħε₀V), worked by hand
    let (mu, lambda, volume) = (2.69e-29f64, 852e-9f64, 1e-15f64);
    let omega = 2.0 * std::f64::consts::PI * 299_792_458.0 / lambda;
    let g = mu * (omega / (2.0 * 1.054_571_817e-34 * 8.854_187_812_8e-12 * volume)).sqrt();
    let out = run(
        &[
            "calc",
            "g",
            "--dipole",
            "2.69e-29",
            "--wavelength",
            "852e-9",
            "--volume",
            "1e-15",
        ],
        tmp.path(),
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!((v["g"].as_f64().unwrap() / g - 1.0).abs() < 1e-6);

    let out = run(&["calc", "g", "--dipole", "1e-29", "--volume", "1e-15"], tmp.path());
    assert_eq!(out.status.code(), Some(1));
}

/// Checks `value` against the subset of JSON Schema used by the shipped
/// schema: $ref, oneOf, const, enum, type, properties, required,
/// additionalProperties, prefixItems, items, minimum, maximum.
fn schema_errors(value: &Value, schema: &Value, root: &Value, path: &str) -> Vec<String> {
    if let Some(r) = schema["$ref"].as_str() {
        let name = r.trim_start_matches("#/$defs/");
        return schema_errors(value, &root["$defs"][name], root, path);
    }
    if let Some(options) = schema["oneOf"].as_array() {
        let matching = options
            .iter()
            .filter(|o| schema_errors(value, o, root, path).is_empty())
            .count();
        return if matching == 1 {
            vec![]
        } else {
            vec![format!("{path}: {matching} oneOf branches match")]
        };
    }
    let mut errs = Vec::new();
    if let Some(c) = schema.get("const") {
        if c != value {
            errs.push(format!("{path}: expected {c}"));
        }
    }
    if let Some(options) = schema["enum"].as_array() {
        if !options.contains(value) {
            errs.push(format!("{path}: {value} not allowed"));
        }
    }
    if let Some(x) = value.as_f64() {
        if schema["minimum"].as_f64().is_some_and(|m| x < m) || schema["maximum"].as_f64().is_some_and(|m| x > m) {
            errs.push(format!("{path}: {x} out of range"));
        }
    }
    match value {
        Value::Object(map) => {
            if schema["additionalProperties"] == Value::Bool(false) {
                for k in map.keys() {
                    if schema["properties"].get(k).is_none() {
                        errs.push(format!("{path}: unexpected key {k}"));
                    }
                }
            }
            for k in schema["required"].as_array().into_iter().flatten() {
                if !map.contains_key(k.as_str().unwrap()) {
                    errs.push(format!("{path}: missing {k}"));
                }
            }
            for (k, v) in map {
                if let Some(sub) = schema["properties"].get(k) {
                    errs.extend(schema_errors(v, sub, root, &format!("{path}.{k}")));
                }
            }
        }
        Value::Array(items) => {
            for (i, v) in items.iter().enumerate() {
                let sub = schema["prefixItems"].get(i).or(schema.get("items"));
                if let Some(sub) = sub {
                    errs.extend(schema_errors(v, sub, root, &format!("{path}[{i}]")));
                }
            }
        }
        _ => {}
    }
    errs
}

#[test]
fn shipped_configs_and_echoes_follow_the_schema() {
    let schema = read_json(&Path::new(env!("CARGO_MANIFEST_DIR")).join("schema/run-config.schema.json"));
    for (name, scenario) in [
        ("herald-one-link.json", Scenario::HeraldOneLink),
        ("node-pair-bell.json", Scenario::NodePairBell),
        ("swap-chain.json", Scenario::SwapChain),
        ("hybrid.json", Scenario::Hybrid),
        ("cavity-transfer.json", Scenario::CavityTransfer),
    ] {
        let raw = read_json(&shipped(name));
        let errs = schema_errors(&raw, &schema, &schema, "$");
        assert!(errs.is_empty(), "{name}: {errs:?}");
        let config = resolve(
            &parse_config(&shipped(name)).unwrap(),
            scenario,
            &CliOverrides::default(),
        )
        .unwrap();
        let echo = serde_json::to_value(config.echo()).unwrap();
        let errs = schema_errors(&echo, &schema, &schema, "$");
        assert!(errs.is_empty(), "{name} echo: {errs:?}");
    }
    // the schema rejects what the parser rejects
    let typo: Value = serde_json::from_str(r#"{"seed": 1, "protocol": {"repetition": 3}}"#).unwrap();
    assert!(!schema_errors(&typo, &schema, &schema, "$").is_empty());
}

#[test]
fn resolve_rules() {
    let err =
        |text: &str, s: Scenario| resolve(&parse_config_str(text).unwrap(), s, &CliOverrides::default()).unwrap_err();
    let topo = serde_json::to_string(&resolved(r#"{"seed": 1}"#, Scenario::HeraldOneLink).topology).unwrap();
    let both = format!(r#"{{"seed": 1, "topology": {topo}, "layout": {{"chain_links": 3}}}}"#);
    assert!(err(&both, Scenario::SwapChain).to_string().contains("not both"));
    assert!(
        err(r#"{"seed": 1, "layout": {"chain_links": 3}}"#, Scenario::HeraldOneLink)
            .to_string()
            .contains("chain_links")
    );
    // a herald topology cannot drive a swap chain
    let mismatched = format!(r#"{{"seed": 1, "topology": {topo}}}"#);
    let r = resolve(
        &parse_config_str(&mismatched).unwrap(),
        Scenario::SwapChain,
        &CliOverrides::default(),
    )
    .unwrap();
    let e = run_simulation_with_workers(&r.topology, &r.protocol, Some(1)).unwrap_err();
    assert_eq!(qnet_sim::CliError::from(e).exit_code(), 1);

    let chain = resolved(r#"{"seed": 1, "layout": {"chain_links": 4}}"#, Scenario::SwapChain);
    assert_eq!(chain.topology.stations().unwrap().len(), 4);
    assert!(chain.protocol.compare_direct);
    assert!(!chain.protocol.record_trials);

    // command-line values win over the file
    let cli = CliOverrides {
        seed: Some(99),
        format: Some(qnet_sim::Format::Csv),
        out: Some("elsewhere".into()),
    };
    let file = parse_config_str(r#"{"seed": 1, "output": {"dir": "here", "format": "json"}}"#).unwrap();
    let r = resolve(&file, Scenario::HeraldOneLink, &cli).unwrap();
    assert_eq!(r.seed(), 99);
    assert_eq!(r.format(), qnet_sim::Format::Csv);
    assert_eq!(r.output.dir.as_deref(), Some("elsewhere"));
    assert!(r.protocol.record_trials);
}

#[test]
fn tomography_from_a_counts_file() {
    use qnet_core::verify::{pauli_settings, simulate_counts, BellState};
    let tmp = TempDir::new().unwrap();
    let mut rng = qnet_core::RngStream::new(4);
    let table = simulate_counts(&BellState::PsiPlus.density(), &pauli_settings(), 20_000, &mut rng).unwrap();
    let path = write(tmp.path(), "counts.json", &serde_json::to_string(&table).unwrap());
    let out = run(
        &["verify", "tomography", "--counts", path.to_str().unwrap(), "--out", "t"],
        tmp.path(),
    );
    assert!(out.status.success(), "{}", stderr(&out));
    // with --out the result goes to a file only
    assert!(out.stdout.is_empty());
    let v = read_json(&tmp.path().join("t/tomography.json"));
    assert!(v["concurrence"].as_f64().unwrap() > 0.95);
    assert!(v["max_chsh"].as_f64().unwrap() > 2.7);
    let re = &v["state"]["re"];
    assert!((re[1][2].as_f64().unwrap() - 0.5).abs() < 0.02);
}
