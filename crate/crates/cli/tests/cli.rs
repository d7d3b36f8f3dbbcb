use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
schema_version = 1
seed = 3

[model]
input = [4, 16, 16]
patch = [2, 4, 4]
dims = [8, 16]
blocks = [2, 1]
heads = [2, 2]
window = [2, 2, 2]
ffn_ratio = 2

[petl]
mechanisms = ["adapter_parallel", "patt"]
d_bottle = 2

[dataset]
n_classes = 3
per_class = 2
eval_per_class = 1

[optimizer]
steps = 3
batch_size = 3

[ablation]
sites = ["KV", "QKV"]
"#;

fn petl_lab(args: &[&str], env_out: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_petl-lab"));
    cmd.args(args).env_remove("PETL_LAB_OUT");
    if let Some(dir) = env_out {
        cmd.env("PETL_LAB_OUT", dir);
    }
    cmd.output().unwrap()
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("exp.toml");
    std::fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn run_then_plot() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), TINY);
    let out = dir.path().join("out");
    let status = petl_lab(&["run", "--config", &config, "--out", out.to_str().unwrap(), "--quiet"], None);
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
    assert!(status.stdout.is_empty() && status.stderr.is_empty());
    let report = std::fs::read_to_string(out.join("report.csv")).unwrap();
    assert_eq!(report.lines().count(), 3);
    assert!(report.contains(",KV,") && report.contains(",QKV,"));

    let plot = petl_lab(&["plot", "--report", out.join("report.csv").to_str().unwrap()], None);
    assert!(plot.status.success());
    let scatter = std::fs::read_to_string(out.join("tradeoff.csv")).unwrap();
    assert!(scatter.starts_with("mechanism,count_millions,top1\n"));
    assert_eq!(scatter.lines().count(), 3);
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), TINY);
    let mut reports = Vec::new();
    for sub in ["a", "b"] {
        let out = dir.path().join(sub);
        assert!(petl_lab(&["run", "--config", &config, "--out", out.to_str().unwrap(), "--quiet"], None).status.success());
        reports.push(std::fs::read(out.join("report.csv")).unwrap());
    }
    assert_eq!(reports[0], reports[1]);
}

#[test]
fn seed_flag_shifts_run_seeds() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), TINY);
    let out = dir.path().join("o");
    let args = ["run", "--config", &config, "--out", out.to_str().unwrap(), "--seed", "40", "--quiet"];
    assert!(petl_lab(&args, None).status.success());
    let report = std::fs::read_to_string(out.join("report.csv")).unwrap();
    let seeds: Vec<&str> = report.lines().skip(1).map(|l| l.rsplit(',').next().unwrap()).collect();
    assert_eq!(seeds, ["40", "41"]);
}

#[test]
fn env_sets_output_dir_and_flag_overrides_it() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), TINY);
    let env_dir = dir.path().join("env");
    assert!(petl_lab(&["count", "--config", &config, "--quiet"], Some(&env_dir)).status.success());
    assert!(env_dir.join("counts.csv").is_file());
    assert!(env_dir.join("positional.csv").is_file());

    let flag_dir = dir.path().join("flag");
    let args = ["count", "--config", &config, "--out", flag_dir.to_str().unwrap(), "--quiet"];
    assert!(petl_lab(&args, Some(&dir.path().join("unused"))).status.success());
    assert!(flag_dir.join("counts.csv").is_file());
    assert!(!dir.path().join("unused").exists());
}

#[test]
fn count_prints_published_comparison() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        "schema_version = 1\n[model]\npreset = \"swin-b\"\nnum_classes = 174\n",
    );
    let out = dir.path().join("c");
    let res = petl_lab(&["count", "--config", &config, "--out", out.to_str().unwrap()], None);
    assert!(res.status.success());
    let stdout = String::from_utf8(res.stdout).unwrap();
    assert!(stdout.contains("trainable=178350 (0.18M) published=0.18M"), "{stdout}");
    let positional = std::fs::read_to_string(out.join("positional.csv")).unwrap();
    assert!(positional.contains("\"Attn, QKV\",24687688,24.69\n"));
}

#[test]
fn gradcheck_passes_and_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), TINY);
    let out = dir.path().join("g");
    let res = petl_lab(&["gradcheck", "--config", &config, "--out", out.to_str().unwrap(), "--samples", "1"], None);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("gradcheck.json")).unwrap()).unwrap();
    assert!(json["max_rel_err"].as_f64().unwrap() < 1e-4);
    assert!(json["checked"].as_u64().unwrap() > 0);
}

#[test]
fn errors_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.toml");
    let res = petl_lab(&["run", "--config", missing.to_str().unwrap()], None);
    assert!(!res.status.success());

    let unknown = write_config(dir.path(), "schema_version = 1\n[model]\ndepth = 2\n");
    let res = petl_lab(&["count", "--config", &unknown], None);
    assert!(!res.status.success());
    let stderr = String::from_utf8(res.stderr).unwrap();
    assert!(stderr.contains("depth") && stderr.contains("line 3"), "{stderr}");

    let bad_axis = write_config(dir.path(), &format!("{TINY}d_bottle = []\n"));
    let res = petl_lab(&["count", "--config", &bad_axis], None);
    assert!(!res.status.success());
    assert!(String::from_utf8(res.stderr).unwrap().contains("d_bottle"));

    let empty = dir.path().join("empty.csv");
    std::fs::write(&empty, "").unwrap();
    assert!(!petl_lab(&["plot", "--report", empty.to_str().unwrap()], None).status.success());
    assert!(!petl_lab(&["bogus"], None).status.success());
    let res = petl_lab(&["gradcheck", "--config", &write_config(dir.path(), TINY), "--tol", "0"], None);
    assert!(!res.status.success());
}

#[test]
fn shipped_configs_validate() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for name in ["toy_bapat.toml", "site_ablation.toml", "swin_b_counts.toml"] {
        let dir = tempfile::tempdir().unwrap();
        let path = root.join(name);
        let res = petl_lab(&["count", "--config", path.to_str().unwrap(), "--out", dir.path().to_str().unwrap(), "--quiet"], None);
        assert!(res.status.success(), "{name}: {}", String::from_utf8_lossy(&res.stderr));
    }
}
