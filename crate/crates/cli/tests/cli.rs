use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use drlora_cli::{run, CHECKPOINT_FILE, MANIFEST_FILE, RANKEVO_DIR, RUNLOG_FILE, SUMMARY_FILE};

const SMALL: &str = r#"
[train]
batch_size = 16
eval_interval = 50
eval_samples = 64
pinned_samples = 16

[train.model]
layers = 2
experts = 4
top_k = 2
d_model = 8
d_expert = 16
d_task = 4

[train.ranks]
r_init = 2
r_target = 4
r_max = 8

[train.schedule]
total_steps = 200
warmup_ratio = 0.05
t_grow = 20
tail_guard = 40
p_grow = 0.5
"#;

fn config(dir: &Path, name: &str, extra: &str) -> PathBuf {
    let path = dir.join(format!("{name}.toml"));
    fs::write(&path, format!("name = \"{name}\"\n{extra}\n{SMALL}")).unwrap();
    path
}

fn train(cfg: &Path, out: &Path, flags: &[&str]) -> i32 {
    let mut args = vec![
        "drlora".to_owned(),
        "train".into(),
        "--config".into(),
        cfg.display().to_string(),
        "--out".into(),
        out.display().to_string(),
    ];
    args.extend(flags.iter().map(|s| s.to_string()));
    run(args)
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_drlora"))
}

fn subdirs(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_dir())
        .collect();
    v.sort();
    v
}

#[test]
fn missing_name_exits_2_naming_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, SMALL).unwrap();
    let out = bin()
        .args(["train", "--config", cfg.to_str().unwrap(), "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("`name`"), "{stderr}");
}

#[test]
fn unknown_analysis_is_a_usage_error() {
    let out = bin().args(["analyze", "entropy", "."]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(run(["drlora", "analyze", "entropy"]), 2);
    assert_eq!(run(["drlora", "frobnicate"]), 2);
}

#[test]
fn missing_run_dir_is_an_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nothing");
    assert_eq!(run(["drlora", "analyze", "gini", missing.to_str().unwrap()]), 3);
    assert_eq!(run(["drlora", "analyze", "gini", dir.path().to_str().unwrap()]), 2);
}

#[test]
fn seed_sweep_writes_one_run_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "seeds", "");
    assert_eq!(train(&cfg, dir.path(), &["--seeds", "3,4,5"]), 0);
    let runs = subdirs(&dir.path().join("seeds"));
    assert_eq!(runs.len(), 3);
    let mut seeds = Vec::new();
    for r in &runs {
        for f in [RUNLOG_FILE, MANIFEST_FILE, SUMMARY_FILE, CHECKPOINT_FILE] {
            assert!(r.join(f).is_file(), "{} missing {f}", r.display());
        }
        let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(r.join(MANIFEST_FILE)).unwrap()).unwrap();
        seeds.push(m["seed"].as_u64().unwrap());
        assert!(fs::read_to_string(r.join(SUMMARY_FILE)).unwrap().contains("budget check   pass"));
    }
    assert_eq!(seeds, vec![3, 4, 5]);
    assert!(dir.path().join("seeds/summary.tsv").is_file());
}

#[test]
fn outputs_are_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "rep", "");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(train(&cfg, &a, &["--strategy", "random"]), 0);
    assert_eq!(train(&cfg, &b, &["--strategy", "random"]), 0);
    let run_a = subdirs(&a.join("rep"));
    let run_b = subdirs(&b.join("rep"));
    assert_eq!(run_a.len(), 1);
    for f in [RUNLOG_FILE, MANIFEST_FILE, SUMMARY_FILE, CHECKPOINT_FILE] {
        assert_eq!(fs::read(run_a[0].join(f)).unwrap(), fs::read(run_b[0].join(f)).unwrap(), "{f}");
    }
    assert_eq!(fs::read(a.join("rep/summary.tsv")).unwrap(), fs::read(b.join("rep/summary.tsv")).unwrap());
}

#[test]
fn env_var_sets_default_output_root() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "envrun", "");
    let root = dir.path().join("from-env");
    let out = bin()
        .args(["train", "--config", cfg.to_str().unwrap(), "--strategy", "fixed-lora"])
        .env("DRLORA_OUT", &root)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(subdirs(&root.join("envrun")).len(), 1);
}

#[test]
fn flops_olmoe_preset() {
    let out = bin().args(["analyze", "flops", "--preset", "table12"]).output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("No LoRA\t4398.0\t0.0\t4398.0\t1.000"), "{text}");
    assert!(text.contains("LoRA (r=32)\t4398.0\t137.4\t4535.5\t1.031"), "{text}");
    assert!(text.contains("DR-LoRA\t4398.0\t137.4\t4535.5\t1.031"), "{text}");
}

#[test]
fn analyses_on_trained_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "an", "");
    assert_eq!(train(&cfg, dir.path(), &["--strategy", "fixed-lora,dr-lora"]), 0);
    let exp = dir.path().join("an");
    let fixed = exp.join("fixed-lora_s0");
    let dr = exp.join("dr-lora_g1.2_r2_s0");

    let out = bin().args(["analyze", "gini"]).arg(&fixed).output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("gini 0.00"));

    let reports = dir.path().join("reports");
    assert_eq!(
        run(["drlora", "analyze", "rankevo", dr.to_str().unwrap(), "--out", reports.to_str().unwrap()]),
        0
    );
    let log = drlora_cli::load_log(&dr).unwrap();
    let files = fs::read_dir(reports.join("dr-lora_g1.2_r2_s0").join(RANKEVO_DIR)).unwrap().count();
    assert_eq!(files, log.events().len());
    assert!(files > 0);

    assert_eq!(run(["drlora", "analyze", "covgap", exp.to_str().unwrap()]), 0);
    assert!(dr.join("covgap.tsv").is_file() && fixed.join("covgap.tsv").is_file());
    assert_eq!(run(["drlora", "analyze", "masking", dr.to_str().unwrap(), "--samples", "64"]), 0);
    let masking = fs::read_to_string(dr.join("masking.tsv")).unwrap();
    assert_eq!(masking.lines().count(), 1 + 9);
}

#[test]
fn compare_identical_and_mismatched_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "cmp", "");
    assert_eq!(train(&cfg, dir.path(), &["--strategy", "dr-lora"]), 0);
    let run_dir = subdirs(&dir.path().join("cmp")).remove(0);
    let table = drlora_cli::cmd_compare(&drlora_cli::CompareArgs {
        dirs: vec![run_dir.clone(), run_dir.clone()],
        out: None,
    })
    .unwrap();
    let row = table.lines().nth(1).unwrap();
    assert!(row.contains("\t+0.000000\t"), "{row}");

    let other = dir.path().join("other.toml");
    fs::write(&other, format!("name = \"wide\"\n{}", SMALL.replace("d_model = 8", "d_model = 12"))).unwrap();
    assert_eq!(train(&other, dir.path(), &[]), 0);
    let wide = subdirs(&dir.path().join("wide")).remove(0);
    let out = bin().arg("compare").arg(&run_dir).arg(&wide).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("`model`"));
}

#[test]
fn compare_groups_strategies() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "strat", "");
    assert_eq!(train(&cfg, dir.path(), &["--strategy", "dr-lora,random", "--seeds", "0,1"]), 0);
    let table = drlora_cli::cmd_compare(&drlora_cli::CompareArgs {
        dirs: vec![dir.path().join("strat")],
        out: Some(dir.path().join("cmp-out")),
    })
    .unwrap();
    assert_eq!(table.lines().count(), 3, "{table}");
    assert!(table.contains("dr-lora\t1.2\t2\t"));
    assert!(table.contains("random\t1.2\t2\t"));
    assert!(dir.path().join("cmp-out/compare.tsv").is_file());
}

#[test]
fn default_config_run_passes_budget_check() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("default.toml");
    fs::write(&cfg, "name = \"default\"\n").unwrap();
    assert_eq!(train(&cfg, dir.path(), &[]), 0);
    let runs = subdirs(&dir.path().join("default"));
    assert_eq!(runs.len(), 1);
    let log = drlora_cli::load_log(&runs[0]).unwrap();
    let f = log.final_record().unwrap();
    for layer in f.ranks {
        assert_eq!(layer.iter().sum::<usize>(), 8 * 16);
    }
}
