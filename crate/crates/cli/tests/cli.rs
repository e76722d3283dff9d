use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use lipscope_cli::config::{keys_help, parse_config, Config, KEYS};
use proptest::prelude::*;

const SMALL: &str =
    "family = scsa\ndepth = 2\nwidth = 8\nheads = 2\ninput_height = 2\ninput_width = 2\n\
[estimator]\nbase_points = 2\nperturbations = 3\n";

struct Outcome {
    code: i32,
    stdout: String,
    stderr: String,
}

fn lipscope(args: &[&str]) -> Outcome {
    lipscope_env(args, &[])
}

fn lipscope_env(args: &[&str], env: &[(&str, &str)]) -> Outcome {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_lipscope"));
    cmd.args(args).env_remove("LIPSCOPE_THREADS");
    for (k, v) in env {
        cmd.env(k, v);
    }
    let out = cmd.output().expect("binary runs");
    Outcome {
        code: out.status.code().expect("exit code"),
        stdout: String::from_utf8(out.stdout).unwrap(),
        stderr: String::from_utf8(out.stderr).unwrap(),
    }
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn estimate_writes_a_lipschitz_estimate() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "net.cfg", SMALL);
    let out = dir.path().join("k.json");
    let r = lipscope(&[
        "estimate",
        "--config",
        s(&cfg),
        "--seed",
        "7",
        "--out",
        s(&out),
    ]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    assert!(r.stderr.is_empty());
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    for key in [
        "value",
        "norm",
        "epsilon",
        "num_base_points",
        "num_perturbations",
        "seed",
        "argmax_sample",
        "overflow",
    ] {
        assert!(v.get(key).is_some(), "missing {key}");
    }
    assert_eq!(v["seed"], 7);
    assert_eq!(v["num_perturbations"], 3);
    assert!(v["value"].as_f64().unwrap() > 0.0);
}

#[test]
fn seed_flag_is_honored() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "net.cfg", SMALL);
    let a = lipscope(&["estimate", "--config", s(&cfg), "--seed", "1"]);
    let b = lipscope(&["estimate", "--config", s(&cfg), "--seed", "1"]);
    let c = lipscope(&["estimate", "--config", s(&cfg), "--seed", "2"]);
    assert_eq!(a.stdout, b.stdout);
    assert_ne!(a.stdout, c.stdout);
}

#[test]
fn dpa_bound_is_infinite_with_caveat() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "dpa.cfg", &SMALL.replace("scsa", "dpa"));
    let r = lipscope(&["bound", "--config", s(&cfg)]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    assert!(r.stdout.contains("K_u = inf"), "{}", r.stdout);
    assert!(r.stdout.contains("DotProductAttention"), "{}", r.stdout);

    let cfg = write_config(dir.path(), "scsa.cfg", SMALL);
    let r = lipscope(&["bound", "--config", s(&cfg)]);
    assert!(!r.stdout.contains("inf"), "{}", r.stdout);
}

#[test]
fn missing_config_fails_without_output() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("k.json");
    let missing = dir.path().join("absent.cfg");
    let r = lipscope(&["estimate", "--config", s(&missing), "--out", s(&out)]);
    assert_eq!(r.code, 1);
    assert!(!out.exists());
    assert!(r.stderr.contains("not found"), "{}", r.stderr);

    let r = lipscope(&["estimate", "--out", s(&out)]);
    assert_eq!(r.code, 1);
    assert!(!out.exists());
}

#[test]
fn invalid_configs_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    for (name, text) in [
        ("eps.cfg", format!("{SMALL}epsilon = 0\n")),
        ("typo.cfg", format!("{SMALL}perturbatons = 3\n")),
        ("type.cfg", "depth = many\n".to_string()),
        ("heads.cfg", SMALL.replace("heads = 2", "heads = 3")),
    ] {
        let cfg = write_config(dir.path(), name, &text);
        let r = lipscope(&["estimate", "--config", s(&cfg)]);
        assert_eq!(r.code, 1, "{name}: {}", r.stderr);
        assert!(r.stdout.is_empty());
    }
    let cfg = write_config(dir.path(), "type.cfg", "depth = many\n");
    let r = lipscope(&["bound", "--config", s(&cfg)]);
    assert!(r.stderr.contains("line 1"), "{}", r.stderr);
}

#[test]
fn lenient_mode_skips_unknown_keys_quietly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "x.cfg", &format!("{SMALL}colour = blue\n"));
    assert_eq!(lipscope(&["bound", "--config", s(&cfg)]).code, 1);
    let r = lipscope(&["bound", "--config", s(&cfg), "--lenient"]);
    assert_eq!(r.code, 0);
    assert!(r.stderr.is_empty());
}

#[test]
fn unknown_flag_names_nearest_flag() {
    let r = lipscope(&["estimate", "--sed", "3"]);
    assert_eq!(r.code, 1);
    assert!(r.stderr.contains("--sed"), "{}", r.stderr);
    assert!(r.stderr.contains("--seed"), "{}", r.stderr);
}

#[test]
fn json_errors_are_machine_readable() {
    let r = lipscope(&["bound", "--json-errors", "--config", "/nonexistent/net.cfg"]);
    assert_eq!(r.code, 1);
    let v: serde_json::Value = serde_json::from_str(r.stderr.trim()).unwrap();
    assert_eq!(v["error"]["code"], 1);
    assert_eq!(v["error"]["kind"], "validation");
    assert!(v["error"]["message"].as_str().unwrap().contains("net.cfg"));
}

#[test]
fn runtime_failures_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "net.cfg", SMALL);
    let out = dir.path().join("no_such_dir").join("k.json");
    let r = lipscope(&[
        "estimate",
        "--config",
        s(&cfg),
        "--out",
        s(&out),
        "--json-errors",
    ]);
    assert_eq!(r.code, 2, "{}", r.stderr);
    let v: serde_json::Value = serde_json::from_str(r.stderr.trim()).unwrap();
    assert_eq!(v["error"]["kind"], "runtime");
}

#[test]
fn thread_cap_is_validated() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "net.cfg", SMALL);
    let bad = lipscope_env(
        &["bound", "--config", s(&cfg)],
        &[("LIPSCOPE_THREADS", "0")],
    );
    assert_eq!(bad.code, 1);
    let one = lipscope_env(
        &["estimate", "--config", s(&cfg)],
        &[("LIPSCOPE_THREADS", "1")],
    );
    let all = lipscope(&["estimate", "--config", s(&cfg)]);
    assert_eq!(one.code, 0);
    assert_eq!(one.stdout, all.stdout);
}

#[test]
fn help_documents_exactly_the_accepted_keys() {
    let r = lipscope(&["--help"]);
    assert_eq!(r.code, 0);
    assert!(r.stderr.is_empty());
    assert!(r
        .stdout
        .contains(&keys_help().lines().nth(1).unwrap().to_string()));

    let mut documented = BTreeSet::new();
    for line in r.stdout.lines() {
        let Some((lhs, default)) = line.strip_prefix("  ").and_then(|l| l.split_once(" = ")) else {
            continue;
        };
        let Some((sec, key)) = lhs.split_once('.') else {
            continue;
        };
        // The documented default must be accepted as a value for that key.
        let text = format!("[{sec}]\n{key} = {default}\n");
        let (cfg, warnings) = parse_config(&text, false).unwrap_or_else(|e| panic!("{lhs}: {e}"));
        assert!(warnings.is_empty());
        assert_eq!(cfg, Config::default(), "{lhs}");
        documented.insert((sec.to_string(), key.to_string()));
    }
    let accepted: BTreeSet<(String, String)> = KEYS
        .iter()
        .map(|(s, k, _)| (s.to_string(), k.to_string()))
        .collect();
    assert_eq!(documented, accepted);
    assert!(parse_config("[network]\nnot_a_key = 1\n", false).is_err());
}

#[test]
fn canonical_form_round_trips() {
    let text = "family=transformer_scsa depth=3 width=16\n[estimator]\nepsilon = 1e-3 # comment\n\
[sweep]\ngrid = 1, 2, 4\nspectrum_sizes = 8x16\n[optimizer]\nclip = 2.5\n";
    let (cfg, _) = parse_config(text, false).unwrap();
    let canon = cfg.to_canonical();
    let (again, _) = parse_config(&canon, false).unwrap();
    assert_eq!(again, cfg);
    assert_eq!(again.to_canonical(), canon);
    assert!(canon.contains("family = scsa"));
    assert!(canon.contains("grid = 1.0,2.0,4.0"));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn canonical_round_trip_for_random_values(
        family in prop::sample::select(vec!["resnet", "dpa", "scsa", "l2a", "transformer_dpa"]),
        depth in 1usize..64,
        gain in 1e-3f64..1e3,
        epsilon in 1e-12f64..10.0,
        seeds in prop::collection::vec(any::<u64>(), 1..4),
        clip in prop::option::of(1e-3f64..1e3),
    ) {
        let seeds: Vec<String> = seeds.iter().map(u64::to_string).collect();
        let clip = clip.map_or("none".to_string(), |c| c.to_string());
        let text = format!(
            "family = {family}\ndepth = {depth}\ngain = {gain}\n[estimator]\nepsilon = {epsilon}\n\
             [sweep]\nseeds = {}\n[optimizer]\nclip = {clip}\n",
            seeds.join(",")
        );
        let (cfg, _) = parse_config(&text, false).unwrap();
        prop_assert_eq!(cfg.network.init.gain, gain);
        prop_assert_eq!(cfg.estimator.epsilon, epsilon);
        let canon = cfg.to_canonical();
        let (again, _) = parse_config(&canon, false).unwrap();
        prop_assert_eq!(&again, &cfg);
        prop_assert_eq!(again.to_canonical(), canon);
    }
}

#[test]
fn every_subcommand_succeeds_quietly() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!(
        "{SMALL}[sweep]\nexperiment = gain\ngrid = 0.5,2\n[optimizer]\nsteps = 3\n\
         [init_stats]\nn_in = 16\nn_out = 8\nbins = 4\n"
    );
    let cfg = write_config(dir.path(), "all.cfg", &text);
    let figs = dir.path().join("figs");
    for args in [
        vec!["estimate"],
        vec!["bound"],
        vec!["jacobian-check"],
        vec!["sweep"],
        vec!["init-stats"],
        vec!["principles"],
        vec!["figures", "--scale", "smoke", "--out", s(&figs)],
    ] {
        let mut full = args.clone();
        full.extend(["--config", s(&cfg), "--seed", "3"]);
        let r = lipscope(&full);
        assert_eq!(r.code, 0, "{args:?}: {}", r.stderr);
        assert!(r.stderr.is_empty(), "{args:?}: {}", r.stderr);
        assert!(!r.stdout.is_empty(), "{args:?}");
    }
    assert!(figs.join("manifest.json").exists());

    // Toy training backpropagates through dot-product attention only.
    let dpa = write_config(dir.path(), "dpa.cfg", &text.replace("scsa", "dpa"));
    let r = lipscope(&["optim-sim", "--config", s(&dpa), "--seed", "3"]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    assert!(r.stderr.is_empty());
    let steps: BTreeSet<&str> = r
        .stdout
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap())
        .collect();
    assert_eq!(steps, BTreeSet::from(["0", "1", "2", "3"]));
    let r = lipscope(&["optim-sim", "--config", s(&cfg)]);
    assert_eq!(r.code, 1);
}

#[test]
fn jacobian_check_passes_for_sampled_layers() {
    let r = lipscope(&["jacobian-check", "--seed", "5"]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let v: serde_json::Value = serde_json::from_str(&r.stdout).unwrap();
    assert!(v.as_array().unwrap().len() >= 15);
}

#[test]
fn unknown_scale_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let r = lipscope(&["figures", "--scale", "huge", "--out", s(dir.path())]);
    assert_eq!(r.code, 1);
    let r = lipscope(&["figures", "--scale", "smoke"]);
    assert_eq!(r.code, 1);
}
