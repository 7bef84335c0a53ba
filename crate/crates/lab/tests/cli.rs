//! Contracts of the `lco-lab` binary: exit codes, file layouts, determinism.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lco_lab::config::ExperimentConfig;
use lco_lab::svg;
use lco_lab::tables::DYNAMICS_HEADER;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_lco-lab"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

const MINIMAL: &str = "\
[run]
seed = 4

[env]
vocab = 3
horizon = 2
target = 1 2

[model]
family = TABULAR
init = uniform
init_scale = 0.5

[trainer]
objective = LCO_KLD
learning_rate = 0.5
steps = 40
temperature = 1.0
top_p = 1.0
";

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

#[test]
fn verify_lists_every_suite_and_exit_code_matches() {
    let o = run(&["verify"]);
    let out = stdout(&o);
    for name in lco_lab::suites::suite_names() {
        assert!(
            out.lines()
                .any(|l| l.split_whitespace().nth(1) == Some(name)),
            "{name} missing:\n{out}"
        );
    }
    let any_fail = out.lines().any(|l| l.starts_with("FAIL"));
    assert_eq!(code(&o), if any_fail { 1 } else { 0 }, "{out}");
}

#[test]
fn verify_filter_runs_only_the_group() {
    let o = run(&["verify", "--suite", "hessian"]);
    let names: Vec<String> = stdout(&o)
        .lines()
        .filter(|l| l.starts_with("PASS") || l.starts_with("FAIL"))
        .map(|l| l.split_whitespace().nth(1).unwrap().to_string())
        .collect();
    assert_eq!(names, ["hessian-psd", "hessian-ppo", "hessian-agreement"]);

    let g = run(&["verify", "--suite", "gradient"]);
    assert_eq!(code(&g), 0, "{}", stdout(&g));
    assert!(stdout(&g).starts_with("PASS  gradient"));

    assert_eq!(code(&run(&["verify", "--suite", "no-such-suite"])), 2);
}

#[test]
fn sft_sign_flip_is_caught() {
    let o = run(&[
        "verify",
        "--suite",
        "gradient",
        "--inject-fault",
        "sft-sign",
    ]);
    assert_eq!(code(&o), 1);
    let out = stdout(&o);
    assert!(out.starts_with("FAIL  gradient"), "{out}");
    assert!(out
        .lines()
        .any(|l| l.contains("FAIL") && l.contains("SFT analytic")));
}

#[test]
fn train_writes_schema_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "min.cfg", MINIMAL);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(
        code(&run(&["train", "--config", s(&cfg), "--out", s(&a)])),
        0
    );
    assert_eq!(
        code(&run(&["train", "--config", s(&cfg), "--out", s(&b)])),
        0
    );

    let csv_a = fs::read(a.join("dynamics.csv")).unwrap();
    assert_eq!(csv_a, fs::read(b.join("dynamics.csv")).unwrap());
    let text = String::from_utf8(csv_a).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), DYNAMICS_HEADER.join(","));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 40);
    for (i, row) in rows.iter().enumerate() {
        let cells: Vec<&str> = row.split(',').collect();
        assert_eq!(cells.len(), 9);
        assert_eq!(cells[0], (i + 1).to_string());
        // 17 significant digits
        assert_eq!(
            cells[1]
                .split('e')
                .next()
                .unwrap()
                .trim_start_matches('-')
                .len(),
            18,
            "{}",
            cells[1]
        );
        assert!(cells[7] == "positive" || cells[7] == "negative");
        assert!(!cells[8].is_empty());
    }

    let model = fs::read_to_string(a.join("model.txt")).unwrap();
    let mut ml = model.lines();
    assert!(ml
        .next()
        .unwrap()
        .starts_with("# family=TABULAR vocab=3 horizon=2 params=12"));
    assert_eq!(ml.filter(|l| l.parse::<f64>().is_ok()).count(), 12);
    assert_eq!(model, fs::read_to_string(b.join("model.txt")).unwrap());
}

#[test]
fn config_errors_exit_2_with_location() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write_config(
        dir.path(),
        "bad.cfg",
        &MINIMAL.replace("learning_rate = 0.5", "learning_rate = fast"),
    );
    let o = run(&[
        "train",
        "--config",
        s(&bad),
        "--out",
        s(&dir.path().join("o")),
    ]);
    assert_eq!(code(&o), 2);
    let err = stderr(&o);
    assert!(
        err.contains("bad.cfg:16") && err.contains("trainer.learning_rate"),
        "{err}"
    );
    assert!(!dir.path().join("o").exists());

    let missing = run(&[
        "train",
        "--config",
        s(&dir.path().join("nope.cfg")),
        "--out",
        s(&dir.path().join("o")),
    ]);
    assert_eq!(code(&missing), 2);

    let no_trainer = write_config(
        dir.path(),
        "short.cfg",
        "[env]\nvocab = 2\nhorizon = 1\ntarget = 0\n",
    );
    let o = run(&[
        "train",
        "--config",
        s(&no_trainer),
        "--out",
        s(&dir.path().join("o")),
    ]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("[model]"));
}

#[test]
fn ppo_on_negative_task_rises_then_clips() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&[
        "train",
        "--config",
        s(&configs().join("negative_advantage.cfg")),
        "--out",
        s(dir.path()),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let cols = lco_lab::tables::CsvColumns::read(&dir.path().join("dynamics.csv")).unwrap();
    let g = cols.column("grad_norm_param").unwrap();
    let rise = g
        .iter()
        .position(|&x| x > g[0])
        .expect("gradient norm rises above its first value");
    assert!(g[rise..].contains(&0.0), "no clipped step after the rise");
    assert!(dir.path().join("dynamics.svg").exists());
}

#[test]
fn dynamics_pair_envelopes() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&[
        "dynamics",
        "--config",
        s(&configs().join("negative_advantage.cfg")),
        "--out",
        s(dir.path()),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let violations = |file: &str| {
        let c = lco_lab::tables::CsvColumns::read(&dir.path().join(file)).unwrap();
        let g = c.column("grad_norm_param").unwrap();
        let b = c.column("bound").unwrap();
        g.iter().zip(&b).filter(|(g, b)| **g > **b + 1e-9).count()
    };
    assert_eq!(violations("dynamics_lco_kld.csv"), 0);
    assert!(violations("dynamics_ppo.csv") >= 1);
    let summary = fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 3);
    assert!(summary.lines().nth(1).unwrap().starts_with("PPO,2000,"));
}

#[test]
fn converge_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&[
        "converge",
        "--config",
        s(&configs().join("converge_mse.cfg")),
        "--out",
        s(dir.path()),
    ]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    let table = fs::read_to_string(dir.path().join("converge.csv")).unwrap();
    assert_eq!(
        table.lines().next().unwrap(),
        "k,loss,bound,rho,residual_inf,asserted"
    );
    assert_eq!(table.lines().count(), 502);

    // tabular MSE with |V| = 4: ρ = |1 − η/2|, so η = 4.02 gives 1.01
    let text = fs::read_to_string(configs().join("converge_mse.cfg"))
        .unwrap()
        .replace("learning_rate = 0.1", "learning_rate = 4.02");
    let cfg = write_config(dir.path(), "big.cfg", &text);
    let o = run(&[
        "converge",
        "--config",
        s(&cfg),
        "--out",
        s(&dir.path().join("big")),
    ]);
    assert_eq!(code(&o), 3);
    let err = stderr(&o);
    let rho: f64 = err
        .split("spectral radius ")
        .nth(1)
        .and_then(|r| r.split_whitespace().next())
        .and_then(|r| r.parse().ok())
        .unwrap_or_else(|| panic!("no radius in {err}"));
    assert!((rho - 1.01).abs() < 1e-12, "{err}");
}

fn write_csv(dir: &Path, name: &str, rows: &[(f64, f64)]) -> PathBuf {
    let mut text = DYNAMICS_HEADER.join(",");
    text.push('\n');
    for (x, y) in rows {
        text.push_str(&format!("{x},1,{y},0,0,0,0,positive,\n"));
    }
    write_config(dir, name, &text)
}

#[test]
fn plot_contracts() {
    let dir = tempfile::tempdir().unwrap();
    let empty = write_csv(dir.path(), "empty.csv", &[]);
    let out = dir.path().join("empty.svg");
    assert_eq!(
        code(&run(&["plot", "--csv", s(&empty), "--out", s(&out)])),
        0
    );
    let svg_text = fs::read_to_string(&out).unwrap();
    assert!(svg_text.starts_with("<?xml") && svg_text.contains(r#"width="800" height="500""#));
    assert!(!svg_text.contains("<polyline"));

    let two = write_csv(dir.path(), "two.csv", &[(0.0, 0.0), (1.0, 1.0)]);
    let out = dir.path().join("two.svg");
    assert_eq!(code(&run(&["plot", "--csv", s(&two), "--out", s(&out)])), 0);
    let svg_text = fs::read_to_string(&out).unwrap();
    let (l, t, r, b) = svg::frame();
    let expected = format!(r#"<polyline points="{l:.3},{b:.3} {r:.3},{t:.3}""#);
    assert_eq!(svg_text.matches("<polyline").count(), 1);
    assert!(svg_text.contains(&expected), "{svg_text}");

    let again = dir.path().join("again.svg");
    assert_eq!(
        code(&run(&["plot", "--csv", s(&two), "--out", s(&again)])),
        0
    );
    assert_eq!(fs::read(&out).unwrap(), fs::read(&again).unwrap());

    let both = dir.path().join("both.svg");
    assert_eq!(
        code(&run(&[
            "plot",
            "--csv",
            s(&two),
            "--csv",
            s(&empty),
            "--out",
            s(&both)
        ])),
        0
    );
    assert!(fs::read_to_string(&both)
        .unwrap()
        .contains("two:grad_norm_param"));

    let o = run(&[
        "plot",
        "--csv",
        s(&two),
        "--column",
        "entropyy",
        "--out",
        s(&dir.path().join("x.svg")),
    ]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("entropyy"));
    let schema = write_config(dir.path(), "other.csv", "k,loss\n0,1\n");
    let o = run(&[
        "plot",
        "--csv",
        s(&schema),
        "--out",
        s(&dir.path().join("y.svg")),
    ]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("`step`"));
}

#[test]
fn shipped_configs_parse() {
    let mut n = 0;
    for entry in fs::read_dir(configs()).unwrap() {
        let p = entry.unwrap().path();
        if p.extension().is_some_and(|e| e == "cfg") {
            ExperimentConfig::load(&p).unwrap_or_else(|e| panic!("{e}"));
            n += 1;
        }
    }
    assert!(n >= 6);
}
