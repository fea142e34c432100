use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_dpgen"));
    c.env_remove("DPGEN_SEED");
    c
}

fn run_ok(args: &[&str]) -> Output {
    let out = bin().args(args).output().unwrap();
    assert!(
        out.status.success(),
        "dpgen {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn run_err(args: &[&str], code: i32) -> String {
    let out = bin().args(args).output().unwrap();
    assert_eq!(
        out.status.code(),
        Some(code),
        "dpgen {args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.lines().count(), 1, "stderr must be one line: {err:?}");
    let line = err.trim_end();
    let prefix = format!("dpgen: error code={code} kind=");
    assert!(line.starts_with(&prefix), "{line}");
    let msg = line.split_once(" message=").unwrap().1;
    serde_json::from_str::<String>(msg).expect("message is a JSON string")
}

fn schema(name: &str) -> jsonschema::Validator {
    let path = Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("schemas")
        .join(name);
    let s: Value = serde_json::from_slice(&fs::read(path).unwrap()).unwrap();
    jsonschema::validator_for(&s).unwrap()
}

fn assert_valid(schema_name: &str, path: &Path) {
    let v: Value = serde_json::from_slice(&fs::read(path).unwrap()).unwrap();
    let errors: Vec<String> = schema(schema_name)
        .iter_errors(&v)
        .map(|e| e.to_string())
        .collect();
    assert!(
        errors.is_empty(),
        "{} vs {schema_name}: {errors:?}",
        path.display()
    );
}

fn check_manifest(dir: &Path) -> Value {
    let path = dir.join("manifest.json");
    assert_valid("manifest.schema.json", &path);
    let m: Value = serde_json::from_slice(&fs::read(&path).unwrap()).unwrap();
    for d in m["inputs"]
        .as_array()
        .unwrap()
        .iter()
        .chain(m["outputs"].as_array().unwrap())
    {
        let bytes = fs::read(d["path"].as_str().unwrap()).unwrap();
        assert_eq!(
            d["sha256"].as_str().unwrap(),
            dpgen_cli::manifest::sha256_hex(&bytes)
        );
        assert_eq!(d["bytes"].as_u64().unwrap(), bytes.len() as u64);
    }
    m
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

struct Prepared {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Prepared {
    fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }
}

fn prepare() -> Prepared {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let data = root.join("data");
    run_ok(&[
        "synth",
        "--grid-side",
        "10",
        "--genes",
        "25",
        "--split",
        "0.5",
        "--seed",
        "4",
        "--out",
        p(&data),
    ]);
    run_ok(&[
        "preprocess",
        "--expr",
        p(&data.join("train/expression.csv")),
        "--coords",
        p(&data.join("train/coords.csv")),
        "--hvg",
        "20",
        "--pca",
        "6",
        "--out",
        p(&root.join("pre_train")),
    ]);
    run_ok(&[
        "preprocess",
        "--expr",
        p(&data.join("test/expression.csv")),
        "--coords",
        p(&data.join("test/coords.csv")),
        "--pipeline",
        p(&root.join("pre_train/pca_model.bin")),
        "--out",
        p(&root.join("pre_test")),
    ]);
    Prepared { _dir: dir, root }
}

fn train_args<'a>(pr: &'a Prepared, out: &'a Path, extra: &[&'a str]) -> Vec<String> {
    let mut v: Vec<String> = vec![
        "train".into(),
        "--features".into(),
        p(&pr.path("pre_train/features.bin")).into(),
        "--coords".into(),
        p(&pr.path("data/train/coords.csv")).into(),
        "--max-epochs".into(),
        "15".into(),
        "--hidden".into(),
        "16".into(),
        "--out".into(),
        p(out).into(),
    ];
    v.extend(extra.iter().map(|s| s.to_string()));
    v
}

fn run_strings(args: &[String]) -> Output {
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    run_ok(&refs)
}

#[test]
fn full_pipeline_emits_valid_artifacts() {
    let pr = prepare();
    check_manifest(&pr.path("data"));
    check_manifest(&pr.path("pre_train"));
    check_manifest(&pr.path("pre_test"));

    let run = pr.path("run");
    run_strings(&train_args(&pr, &run, &["--seed", "2", "--alpha", "20"]));
    let m = check_manifest(&run);
    assert_eq!(m["seed"], 2);
    let cfg_path = pr.path("train_config.json");
    fs::write(
        &cfg_path,
        serde_json::to_vec(&m["config"]["train"]).unwrap(),
    )
    .unwrap();
    assert_valid("train_config.schema.json", &cfg_path);
    let history = fs::read_to_string(run.join("history.csv")).unwrap();
    assert!(history.starts_with("epoch,loss,recon,kl,distortion,lambda,seconds\n"));

    let eval = pr.path("eval");
    run_ok(&[
        "evaluate",
        "--checkpoint",
        p(&run.join("checkpoint.bin")),
        "--features",
        p(&pr.path("pre_test/features.bin")),
        "--coords",
        p(&pr.path("data/test/coords.csv")),
        "--out",
        p(&eval),
    ]);
    check_manifest(&eval);
    assert_valid("metrics.schema.json", &eval.join("metrics.json"));
    let latent = fs::read_to_string(eval.join("latent.csv")).unwrap();
    assert_eq!(
        latent.lines().next().unwrap(),
        "spot_id,mu_0,mu_1,mu_2,mu_3"
    );
    assert_eq!(latent.lines().count(), 51);

    let bound = pr.path("bound");
    let out = run_ok(&[
        "verify-bound",
        "--checkpoint",
        p(&run.join("checkpoint.bin")),
        "--features",
        p(&pr.path("pre_test/features.bin")),
        "--coords",
        p(&pr.path("data/test/coords.csv")),
        "--draws",
        "4",
        "--out",
        p(&bound),
    ]);
    check_manifest(&bound);
    assert_valid("bound_report.schema.json", &bound.join("bound_report.json"));
    assert_eq!(
        out.stdout,
        fs::read(bound.join("bound_report.json")).unwrap()
    );
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    if report["lower_bound_coverage_met"].as_bool().unwrap() {
        let holds = report["l_hat"].as_f64().unwrap() <= report["l_bound"].as_f64().unwrap();
        assert_eq!(report["bound_holds"].as_bool(), Some(holds));
    } else {
        assert!(report["l_hat"].is_null() && report["bound_holds"].is_null());
    }
}

#[test]
fn synth_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["a", "b"] {
        run_ok(&[
            "synth",
            "--grid-side",
            "6",
            "--genes",
            "8",
            "--seed",
            "9",
            "--split",
            "0.5",
            "--out",
            p(&dir.path().join(name)),
        ]);
    }
    for f in [
        "expression.csv",
        "coords.csv",
        "train/expression.csv",
        "test/coords.csv",
    ] {
        assert_eq!(
            fs::read(dir.path().join("a").join(f)).unwrap(),
            fs::read(dir.path().join("b").join(f)).unwrap(),
            "{f}"
        );
    }
    let cfg = dir.path().join("synth.json");
    fs::write(
        &cfg,
        r#"{"grid_side": 5, "n_genes": 6, "n_patterns": 2, "seed": 1}"#,
    )
    .unwrap();
    assert_valid("synth_config.schema.json", &cfg);
    run_ok(&[
        "synth",
        "--config",
        p(&cfg),
        "--out",
        p(&dir.path().join("c")),
    ]);
    let m = check_manifest(&dir.path().join("c"));
    assert_eq!(m["config"]["synth"]["grid_side"], 5);
}

#[test]
fn seed_precedence_flag_env_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("synth.json");
    fs::write(
        &cfg,
        r#"{"grid_side": 4, "n_genes": 3, "n_patterns": 1, "seed": 11}"#,
    )
    .unwrap();
    let seed_of = |name: &str, env: Option<&str>, flag: Option<&str>| {
        let out = dir.path().join(name);
        let mut c = bin();
        c.args(["synth", "--config", p(&cfg), "--out", p(&out)]);
        if let Some(s) = flag {
            c.args(["--seed", s]);
        }
        if let Some(e) = env {
            c.env("DPGEN_SEED", e);
        }
        assert!(c.status().unwrap().success());
        check_manifest(&out)["seed"].as_u64().unwrap()
    };
    assert_eq!(seed_of("cfg", None, None), 11);
    assert_eq!(seed_of("env", Some("22"), None), 22);
    assert_eq!(seed_of("flag", Some("22"), Some("33")), 33);
}

#[test]
fn train_config_file_with_flag_override() {
    let pr = prepare();
    let cfg = pr.path("cfg.json");
    fs::write(
        &cfg,
        r#"{"alpha": 7.5, "latent_dim": 3, "seed": 5, "max_epochs": 4}"#,
    )
    .unwrap();
    assert_valid("train_config.schema.json", &cfg);
    let out = pr.path("run");
    run_ok(&[
        "train",
        "--features",
        p(&pr.path("pre_train/features.bin")),
        "--coords",
        p(&pr.path("data/train/coords.csv")),
        "--config",
        p(&cfg),
        "--latent",
        "2",
        "--out",
        p(&out),
    ]);
    let m = check_manifest(&out);
    assert_eq!(m["config"]["train"]["alpha"], 7.5);
    assert_eq!(m["config"]["train"]["latent_dim"], 2);
    assert_eq!(m["seed"], 5);
    let ck = dpgen::io::load_checkpoint(&out.join("checkpoint.bin")).unwrap();
    assert_eq!(ck.params.dims.latent_dim, 2);
    assert_eq!(ck.config.seed, 5);
}

#[test]
fn exit_codes_and_stderr_format() {
    let pr = prepare();
    let msg = run_err(&["train", "--bogus"], 2);
    assert!(msg.contains("--bogus"));
    run_err(&["frobnicate"], 2);
    run_err(
        &[
            "train",
            "--features",
            "f",
            "--coords",
            "c",
            "--alpha",
            "-3",
            "--out",
            "o",
        ],
        2,
    );

    let msg = run_err(
        &[
            "evaluate",
            "--checkpoint",
            p(&pr.path("missing.bin")),
            "--features",
            "f",
            "--coords",
            "c",
            "--out",
            "o",
        ],
        3,
    );
    assert!(msg.contains("missing.bin"));

    // features of the wrong container kind
    run_err(
        &[
            "train",
            "--features",
            p(&pr.path("pre_train/pca_model.bin")),
            "--coords",
            p(&pr.path("data/train/coords.csv")),
            "--out",
            p(&pr.path("x")),
        ],
        3,
    );

    // coordinates lacking a spot
    let coords = fs::read_to_string(pr.path("data/train/coords.csv")).unwrap();
    let mut lines: Vec<&str> = coords.lines().collect();
    let dropped = lines.remove(3).split(',').next().unwrap().to_string();
    let short = pr.path("short.csv");
    fs::write(&short, lines.join("\n") + "\n").unwrap();
    let msg = run_err(
        &[
            "train",
            "--features",
            p(&pr.path("pre_train/features.bin")),
            "--coords",
            p(&short),
            "--out",
            p(&pr.path("y")),
        ],
        3,
    );
    assert!(msg.contains(&dropped), "{msg}");

    // a diverging learning rate is a numeric failure
    let msg = run_err(
        &[
            "train",
            "--features",
            p(&pr.path("pre_train/features.bin")),
            "--coords",
            p(&pr.path("data/train/coords.csv")),
            "--lr",
            "1e300",
            "--out",
            p(&pr.path("z")),
        ],
        4,
    );
    assert!(msg.contains("epoch"), "{msg}");

    // evaluating features whose width differs from the checkpoint
    let run = pr.path("run");
    run_strings(&train_args(&pr, &run, &[]));
    let other = pr.path("pre_other");
    run_ok(&[
        "preprocess",
        "--expr",
        p(&pr.path("data/test/expression.csv")),
        "--coords",
        p(&pr.path("data/test/coords.csv")),
        "--hvg",
        "20",
        "--pca",
        "4",
        "--out",
        p(&other),
    ]);
    run_err(
        &[
            "evaluate",
            "--checkpoint",
            p(&run.join("checkpoint.bin")),
            "--features",
            p(&other.join("features.bin")),
            "--coords",
            p(&pr.path("data/test/coords.csv")),
            "--out",
            p(&pr.path("e")),
        ],
        3,
    );

    let bad_env = bin()
        .args(["synth", "--out", p(&pr.path("s"))])
        .env("DPGEN_SEED", "x")
        .output()
        .unwrap();
    assert_eq!(bad_env.status.code(), Some(2));
}

#[test]
fn help_exits_zero() {
    let out = bin().arg("--help").output().unwrap();
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("verify-bound"));
}

#[test]
fn sweep_is_independent_of_job_count() {
    let pr = prepare();
    let mut outputs = Vec::new();
    for jobs in ["1", "3"] {
        let out = pr.path(&format!("sweep{jobs}"));
        run_ok(&[
            "sweep",
            "--features",
            p(&pr.path("pre_train/features.bin")),
            "--coords",
            p(&pr.path("data/train/coords.csv")),
            "--test-features",
            p(&pr.path("pre_test/features.bin")),
            "--test-coords",
            p(&pr.path("data/test/coords.csv")),
            "--alphas",
            "0,25",
            "--seeds",
            "2",
            "--max-epochs",
            "6",
            "--hidden",
            "8",
            "--jobs",
            jobs,
            "--out",
            p(&out),
        ]);
        check_manifest(&out);
        outputs.push(out);
    }
    let a = fs::read_to_string(outputs[0].join("sweep.csv")).unwrap();
    assert_eq!(a, fs::read_to_string(outputs[1].join("sweep.csv")).unwrap());
    assert_eq!(a.lines().count(), 5);
    assert!(a.starts_with("alpha,seed,epochs,best_epoch,lambda,mse,morans_i,gearys_c\n"));
    let summary = fs::read_to_string(outputs[0].join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 3);
    for run in ["alpha_0_seed_0", "alpha_25_seed_1"] {
        assert_valid(
            "metrics.schema.json",
            &outputs[0].join(run).join("metrics.json"),
        );
        assert_eq!(
            fs::read(outputs[0].join(run).join("checkpoint.bin")).unwrap(),
            fs::read(outputs[1].join(run).join("checkpoint.bin")).unwrap()
        );
    }
}

#[test]
fn matrix_market_input_matches_csv_features() {
    let pr = prepare();
    let x = dpgen::io::read_expression_csv(&pr.path("data/train/expression.csv")).unwrap();
    let mtx_dir = pr.path("mtx");
    fs::create_dir_all(&mtx_dir).unwrap();
    let mut body = String::new();
    let mut nnz = 0;
    for i in 0..x.n_spots() {
        for j in 0..x.n_genes() {
            let v = x.values.get(i, j);
            if v != 0.0 {
                body.push_str(&format!("{} {} {v}\n", j + 1, i + 1));
                nnz += 1;
            }
        }
    }
    fs::write(
        mtx_dir.join("matrix.mtx"),
        format!(
            "%%MatrixMarket matrix coordinate integer general\n{} {} {nnz}\n{body}",
            x.n_genes(),
            x.n_spots()
        ),
    )
    .unwrap();
    fs::write(mtx_dir.join("genes.txt"), x.gene_ids.join("\n")).unwrap();
    fs::write(mtx_dir.join("spots.txt"), x.spot_ids.join("\n")).unwrap();
    run_ok(&[
        "preprocess",
        "--expr",
        p(&mtx_dir.join("matrix.mtx")),
        "--coords",
        p(&pr.path("data/train/coords.csv")),
        "--hvg",
        "20",
        "--pca",
        "6",
        "--out",
        p(&pr.path("pre_mtx")),
    ]);
    assert_eq!(
        fs::read(pr.path("pre_mtx/features.bin")).unwrap(),
        fs::read(pr.path("pre_train/features.bin")).unwrap()
    );
}
