//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails. Pass criterion numbers as arguments to
//! run a subset, e.g. `cargo test --test acceptance -- 1 2 3`.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use common::{max_abs_diff, random_clip, randomize_petl, Oracle, Rows};
use petl_lab::backbone::geometry::patch_grid;
use petl_lab::backbone::window_partition;
use petl_lab::experiment::{run_config, run_experiment, ExperimentConfig, RunOptions};
use petl_lab::harness::{grad_check, train, DatasetSpec, OptimizerConfig, SyntheticVideoDataset};
use petl_lab::registry::counting::{count_full_swin_b, full_count, head_count, millions, mlp_total, Position};
use petl_lab::registry::{CountFilter, Group};
use petl_lab::tensor::fault;
use petl_lab::tensor::OpKind;
use petl_lab::{Mechanism, ModelConfig, Network, ParameterRegistry, PetlSpec, Sites, SwinModel, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn rel(got: f64, want: f64) -> f64 {
    (got / want - 1.0).abs()
}

fn fc_head_counts() -> Outcome {
    let (ssv2, hmdb) = (head_count(1024, 174), head_count(1024, 51));
    ensure!(ssv2 == 178_350 && millions(ssv2) == "0.18M", "174-class head {ssv2}");
    ensure!(hmdb == 52_275 && millions(hmdb) == "0.05M", "51-class head {hmdb}");
    let gap = count_full_swin_b(174) - count_full_swin_b(51);
    ensure!(ssv2 - hmdb == 126_075 && gap == 126_075, "head gap {} vs full-model gap {gap}", ssv2 - hmdb);
    // 87.82M - 87.69M at two-decimal rounding
    ensure!((0.125e6..0.135e6).contains(&(gap as f64)), "gap {gap} outside the published rounding window");
    Ok(format!("heads {ssv2} / {hmdb}, gap {gap}"))
}

fn swin_b_counts() -> Outcome {
    let cfg = ModelConfig::swin_b(174);
    let full = full_count(&cfg);
    ensure!(rel(full as f64, 87.82e6) < 0.005, "full {full}");
    let qkv = Position::AttnQkv.count(&cfg);
    ensure!(rel(qkv as f64, 24.69e6) < 0.02, "QKV {qkv}");
    let mlp = mlp_total(&cfg);
    ensure!(rel(mlp as f64, 61.42e6) < 0.02, "MLP {mlp}");
    Ok(format!(
        "full {full} ({:+.3}%), QKV {qkv} ({:+.3}%), MLP {mlp} ({:+.3}%)",
        100.0 * (full as f64 / 87.82e6 - 1.0),
        100.0 * (qkv as f64 / 24.69e6 - 1.0),
        100.0 * (mlp as f64 / 61.42e6 - 1.0)
    ))
}

fn window_geometry() -> Outcome {
    let grid = patch_grid([8, 224, 224], [2, 4, 4]).map_err(|e| e.to_string())?;
    ensure!(grid == [4, 56, 56], "grid {grid:?}");
    let plain = window_partition(grid, [8, 7, 7], false).map_err(|e| e.to_string())?;
    let shifted = window_partition(grid, [8, 7, 7], true).map_err(|e| e.to_string())?;
    ensure!(plain.num_windows() == 64, "unshifted {}", plain.num_windows());
    ensure!(shifted.shift == [4, 3, 3], "shift {:?}", shifted.shift);
    ensure!(shifted.num_windows() == 81, "shifted {}", shifted.num_windows());
    Ok(format!("grid {grid:?}, {} and {} windows", plain.num_windows(), shifted.num_windows()))
}

fn spec_of(mechanisms: &[Mechanism]) -> PetlSpec {
    PetlSpec { mechanisms: mechanisms.to_vec(), ..PetlSpec::default() }
}

fn zero_neutrality() -> Outcome {
    use Mechanism::*;
    let cfg = ModelConfig::swin_micro(4);
    let inputs: Vec<Tensor> = (0..10).map(|i| random_clip(&cfg, 100 + i)).collect();
    let base = SwinModel::build(&cfg, &PetlSpec::head_only(), 9).map_err(|e| e.to_string())?;
    let expect: Vec<Tensor> = inputs.iter().map(|x| base.forward_clip(x).unwrap()).collect();
    let cases: Vec<(&str, PetlSpec, bool)> = vec![
        ("prefix d_token=0", PetlSpec { d_token: 0, ..spec_of(&[Prefix]) }, false),
        ("prompt d_prompt=0", PetlSpec { d_prompt: 0, ..spec_of(&[Prompt]) }, false),
        ("parallel adapter W_up=0", spec_of(&[AdapterParallel]), false),
        ("sequential adapter W_up=0", spec_of(&[AdapterSequential]), false),
        ("PATT W_up=0", PetlSpec { patt_sites: Sites::QKV, ..spec_of(&[Patt]) }, false),
        ("parallel adapter s=0", PetlSpec { s_adapter: 0.0, ..spec_of(&[AdapterParallel]) }, true),
        ("sequential adapter s=0", PetlSpec { s_adapter: 0.0, ..spec_of(&[AdapterSequential]) }, true),
        ("PATT s=0", PetlSpec { s_patt: 0.0, patt_sites: Sites::QKV, ..spec_of(&[Patt]) }, true),
        ("BAPAT s=0", PetlSpec::swin_bapat(8, 0.0), true),
    ];
    for (name, spec, randomize_up) in &cases {
        let mut model = SwinModel::build(&cfg, spec, 9).map_err(|e| e.to_string())?;
        if *randomize_up {
            randomize_petl(model.registry_mut(), 5, 0.5);
        }
        for (i, (x, e)) in inputs.iter().zip(&expect).enumerate() {
            let got = model.forward_clip(x).map_err(|e| e.to_string())?;
            ensure!(got.bitwise_eq(e), "{name}: input {i} differs by {:e}", got.max_abs_diff(e));
        }
    }
    Ok(format!("{} zero settings x {} inputs bitwise equal", cases.len(), inputs.len()))
}

fn randomize_all_petl(reg: &mut ParameterRegistry, seed: u64, std: f64) {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    for p in reg.iter_mut() {
        if matches!(p.group(), Group::Petl(_)) {
            let fresh = Tensor::randn(p.shape(), std, &mut r);
            p.tensor_mut().data_mut().copy_from_slice(fresh.data());
        }
    }
}

fn gradient_check() -> Outcome {
    use Mechanism::*;
    let cfg = ModelConfig::swin_micro(4);
    let spec = PetlSpec {
        mechanisms: vec![Prefix, AdapterParallel, Prompt, Patt],
        d_bottle: 4,
        d_token: 2,
        d_prompt: 2,
        ..PetlSpec::default()
    };
    let mut model = SwinModel::build(&cfg, &spec, 11).map_err(|e| e.to_string())?;
    randomize_all_petl(model.registry_mut(), 12, 0.2);
    for m in [Prefix, AdapterParallel, Prompt, Patt] {
        ensure!(model.registry().iter().any(|p| p.group() == Group::Petl(m)), "{m} not attached");
    }
    let clip = random_clip(&cfg, 13);
    let [t, h, w] = cfg.input;
    let batch = clip.reshape(&[1, t, h, w, 3]).map_err(|e| e.to_string())?;
    let labels = [2];
    let clean = grad_check(&model, &batch, &labels, 1e-5).map_err(|e| e.to_string())?;
    ensure!(
        clean.checked as u64 == model.registry().trainable_count(),
        "checked {} of {}",
        clean.checked,
        model.registry().trainable_count()
    );
    ensure!(
        clean.max_rel_err < 1e-4,
        "max relative error {:e} at {}[{}]",
        clean.max_rel_err,
        clean.worst_path,
        clean.worst_index
    );
    let faulty = {
        let _guard = fault::inject(OpKind::Tanh, 1.5);
        grad_check(&model, &batch, &labels, 1e-5).map_err(|e| e.to_string())?
    };
    ensure!(faulty.max_rel_err >= 1e-4, "fault went undetected: {:e}", faulty.max_rel_err);
    Ok(format!(
        "{} entries, max rel err {:.2e}; faulty Tanh backward gives {:.2e} at {}",
        clean.checked, clean.max_rel_err, faulty.max_rel_err, faulty.worst_path
    ))
}

fn freeze_invariant() -> Outcome {
    let cfg = ModelConfig::swin_micro(4);
    let ds = SyntheticVideoDataset::generate(4, 8, cfg.input, 3, 0.1).map_err(|e| e.to_string())?;
    let mut model = SwinModel::build(&cfg, &PetlSpec::swin_bapat(8, 0.8), 4).map_err(|e| e.to_string())?;
    let before = model.registry().frozen_snapshot();
    let head_before = model.registry().by_path("head.weight").unwrap().tensor().clone();
    let opt = OptimizerConfig { steps: 10, batch_size: 8, ..OptimizerConfig::default() };
    let history = train(&mut model, &ds, &opt, 5).map_err(|e| e.to_string())?;
    ensure!(history.steps() == 10, "ran {} steps", history.steps());
    let after = model.registry().frozen_snapshot();
    ensure!(before.len() == after.len(), "frozen set changed size");
    for ((path, a), (_, b)) in before.iter().zip(&after) {
        ensure!(a.bitwise_eq(b), "{path} changed");
    }
    ensure!(!model.registry().by_path("head.weight").unwrap().tensor().bitwise_eq(&head_before), "head did not train");
    let reg = model.registry();
    let (trainable, frozen, total) = (reg.trainable_count(), reg.count(&CountFilter::Frozen), reg.total_count());
    ensure!(trainable + frozen == total, "{trainable} + {frozen} != {total}");
    Ok(format!("{} frozen tensors unchanged, {trainable} + {frozen} = {total}", before.len()))
}

fn small_config(rng: &mut ChaCha8Rng) -> ModelConfig {
    let heads = rng.random_range(1..=2);
    ModelConfig {
        input: [4, 16, 16],
        patch: [2, 4, 4],
        dims: vec![4 * heads, 8 * heads],
        blocks: vec![rng.random_range(1..=2), 1],
        heads: vec![heads, heads],
        window: [2, 2, 2],
        ffn_ratio: 2,
        num_classes: 3,
        ln_eps: 1e-5,
    }
}

fn prompt_prefix_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut worst = 0.0_f64;
    for inst in 0..10u64 {
        let cfg = small_config(&mut rng);
        let n = rng.random_range(1..=4);
        let prompt_spec = PetlSpec { d_prompt: n, ..spec_of(&[Mechanism::Prompt]) };
        let prefix_spec = PetlSpec { d_token: n, prefix_transform: false, ..spec_of(&[Mechanism::Prefix]) };
        let mut prompt = SwinModel::build(&cfg, &prompt_spec, 200 + inst).map_err(|e| e.to_string())?;
        randomize_all_petl(prompt.registry_mut(), 300 + inst, 1.0);
        let mut prefix = SwinModel::build(&cfg, &prefix_spec, 200 + inst).map_err(|e| e.to_string())?;

        let blocks: Vec<(String, usize)> = prompt
            .registry()
            .iter()
            .filter(|p| p.path().ends_with(".prompt.tokens"))
            .map(|p| (p.path().trim_end_matches(".prompt.tokens").to_string(), p.shape()[1]))
            .collect();
        ensure!(!blocks.is_empty(), "no prompt tokens registered");
        for (block, d) in blocks {
            // the projections the block applies to its own tokens
            let (k, v) = {
                let oracle = Oracle::new(prompt.registry(), &cfg, &prompt_spec);
                let tokens: Rows = oracle.w(&format!("{block}.prompt.tokens")).chunks(d).map(<[f64]>::to_vec).collect();
                let proj = |part: usize| -> Rows {
                    tokens
                        .iter()
                        .map(|r| {
                            let normed = oracle.ln_row(r, &format!("{block}.norm1"));
                            oracle.linear_row(&normed, &format!("{block}.attn.qkv"), 3 * d, true)[part * d..(part + 1) * d]
                                .to_vec()
                        })
                        .collect()
                };
                (proj(1), proj(2))
            };
            for (name, rows) in [("p_k", k), ("p_v", v)] {
                let p = prefix.registry_mut().by_path_mut(&format!("{block}.prefix.{name}")).ok_or("missing prefix")?;
                p.tensor_mut().data_mut().copy_from_slice(&rows.concat());
            }
        }
        let clip = random_clip(&cfg, 400 + inst);
        let a = prompt.forward_clip(&clip).map_err(|e| e.to_string())?;
        let b = prefix.forward_clip(&clip).map_err(|e| e.to_string())?;
        let diff = max_abs_diff(a.data(), b.data());
        ensure!(diff < 1e-10, "instance {inst}: max abs diff {diff:e}");
        worst = worst.max(diff);
    }
    Ok(format!("10 instances, max abs diff {worst:.2e}"))
}

fn toy_fine_tuning() -> Outcome {
    let cfg = ModelConfig::swin_micro(4);
    // stage 0 is 16 wide, too narrow for a 16-wide bottleneck
    let spec = PetlSpec { attach: vec![false, true, true, true], ..PetlSpec::swin_bapat(16, 0.8) };
    let data = DatasetSpec { clip: cfg.input, ..DatasetSpec::default() };
    let ds = SyntheticVideoDataset::from_spec(&data).map_err(|e| e.to_string())?;
    let mut model = SwinModel::build(&cfg, &spec, 0).map_err(|e| e.to_string())?;
    let frozen = model.registry().frozen_snapshot();
    let opt = OptimizerConfig { steps: 200, batch_size: 16, ..OptimizerConfig::default() };
    let history = train(&mut model, &ds, &opt, 0).map_err(|e| e.to_string())?;
    ensure!(history.steps() <= 200, "{} steps", history.steps());
    ensure!(model.registry().frozen_snapshot() == frozen, "backbone moved");
    let top1 = history.final_train_top1().ok_or("no evaluation recorded")?;
    ensure!(top1 >= 0.95, "final train top-1 {top1}");
    let trainable = model.registry().trainable_count();
    let full = full_count(&cfg);
    ensure!((trainable as f64) < 0.1 * full as f64, "trainable {trainable} of {full}");
    Ok(format!(
        "train top-1 {top1:.4} after {} steps, {trainable} of {full} parameters trainable ({:.2}%), {:.0}s",
        history.steps(),
        100.0 * trainable as f64 / full as f64,
        history.wall_seconds
    ))
}

const TINY_EXPERIMENT: &str = r#"
schema_version = 1
name = "acceptance"
seed = 5

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
d_bottle = 4

[dataset]
n_classes = 3
per_class = 4
eval_per_class = 2

[optimizer]
steps = 8
batch_size = 4
"#;

fn quiet(out: &Path) -> RunOptions {
    RunOptions { out: out.to_path_buf(), seed: None, quiet: true, parallel: false }
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("exp.toml");
    let text = format!("{TINY_EXPERIMENT}\n[ablation]\nd_bottle = [2, 4]\ns = [0.5, 1.0]\n");
    std::fs::write(&path, text).map_err(|e| e.to_string())?;
    let mut reports = Vec::new();
    for (sub, parallel) in [("a", false), ("b", false), ("c", true)] {
        let opts = RunOptions { parallel, ..quiet(&dir.path().join(sub)) };
        run_experiment(&path, &opts).map_err(|e| e.to_string())?;
        reports.push(std::fs::read(dir.path().join(sub).join("report.csv")).map_err(|e| e.to_string())?);
    }
    ensure!(reports[0] == reports[1], "sequential reruns differ");
    ensure!(reports[0] == reports[2], "parallel run differs");
    let lines = reports[0].iter().filter(|&&b| b == b'\n').count();
    ensure!(lines == 5, "{lines} report lines");
    Ok(format!("3 runs of a 4-point sweep, {} identical bytes each", reports[0].len()))
}

fn site_ablation() -> Outcome {
    println!("       note: published top-1 accuracies need pre-trained full-size models and full datasets;");
    println!("       they are not reproduced here, and no accuracy ordering between sites is asserted");
    let text = format!("{TINY_EXPERIMENT}\n[ablation]\nsites = [\"QK\", \"KV\", \"QV\", \"QKV\"]\n");
    let cfg = ExperimentConfig::parse(&text, Path::new("sites.toml")).map_err(|e| e.to_string())?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let rows = run_config(&cfg, &quiet(dir.path())).map_err(|e| e.to_string())?.rows;
    let sites: Vec<&str> = rows.iter().map(|r| r.row.sites.as_str()).collect();
    ensure!(sites == ["QK", "KV", "QV", "QKV"], "sites {sites:?}");
    let count = |s: &str| rows.iter().find(|r| r.row.sites == s).unwrap().row.trainable_count;
    ensure!(count("QKV") > count("KV"), "QKV {} <= KV {}", count("QKV"), count("KV"));
    let b = ModelConfig::swin_b(174);
    let kv = petl_lab::registry::counting::trainable_count(&b, &PetlSpec::swin_bapat(128, 0.8));
    let qkv = petl_lab::registry::counting::trainable_count(
        &b,
        &PetlSpec { patt_sites: Sites::QKV, ..PetlSpec::swin_bapat(128, 0.8) },
    );
    ensure!(qkv > kv, "full-size QKV {qkv} <= KV {kv}");
    Ok(format!(
        "4 site variants trained; counts QK {} KV {} QV {} QKV {}; full-size KV {} < QKV {}",
        count("QK"),
        count("KV"),
        count("QV"),
        count("QKV"),
        millions(kv),
        millions(qkv)
    ))
}

fn main() -> ExitCode {
    let criteria: [(u32, &str, fn() -> Outcome); 10] = [
        (1, "FC-head counts", fc_head_counts),
        (2, "full-size closed-form counts", swin_b_counts),
        (3, "window geometry", window_geometry),
        (4, "zero-neutrality", zero_neutrality),
        (5, "gradient check", gradient_check),
        (6, "freeze invariant", freeze_invariant),
        (7, "prompt/prefix equivalence", prompt_prefix_equivalence),
        (8, "toy fine-tuning", toy_fine_tuning),
        (9, "determinism", determinism),
        (10, "site ablation", site_ablation),
    ];
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (id, name, check) in criteria {
        if !wanted.is_empty() && !wanted.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS criterion {id:>2} {name}: {detail} [{secs:.1}s]"),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {id:>2} {name}: {detail} [{secs:.1}s]");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
