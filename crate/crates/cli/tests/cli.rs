use std::path::Path;
use std::process::{Command, Output};

use ibed_cli::output::{self, read_manifest};
use ibed_cli::{posterior_pipeline, ExperimentConfig};

fn ibed(dir: &Path, config: &str, args: &[&str]) -> Output {
    let cfg_path = dir.join("experiment.toml");
    std::fs::write(&cfg_path, config).unwrap();
    Command::new(env!("CARGO_BIN_EXE_ibed"))
        .args(args)
        .arg("--config")
        .arg(&cfg_path)
        .arg("--out")
        .arg(dir.join("out"))
        .arg("--threads")
        .arg("1")
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(o: Output) -> Output {
    assert!(
        o.status.success(),
        "exit {:?}\nstderr: {}",
        o.status.code(),
        String::from_utf8_lossy(&o.stderr)
    );
    o
}

const SMALL_LINEAR: &str = r#"
seed = 11

[model]
name = "linear"
design_dim = 2

[network]
hidden = [16]

[train]
epochs = 40
batch_size = 400
lr_psi = 1e-3
lr_design = 1e-2

[validation]
n_sets = 3

[posterior]
theta_true = [2.0, 5.0]
prior_samples = 2000
samples = 500
"#;

#[test]
fn zero_epochs_gives_header_only_trace_and_initial_design() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = r#"
[model]
name = "linear"
design_dim = 3

[train]
epochs = 0
batch_size = 100
initial_design = [-1.5, 0.0, 7.25]
"#;
    ok(ibed(dir.path(), cfg, &["train"]));
    let out = dir.path().join("out");
    let trace = std::fs::read_to_string(out.join(output::TRACE_FILE)).unwrap();
    assert_eq!(trace, "epoch,mi_raw,mi_smoothed,d_0,d_1,d_2\n");
    assert_eq!(output::read_design(&out.join(output::DESIGN_FILE)).unwrap(), vec![-1.5, 0.0, 7.25]);
}

#[test]
fn reference_on_gaussian_linear_matches_closed_form() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = r#"
[model]
name = "gaussian-linear"
design_dim = 1

[reference]
n_outer = 2000
n_inner = 20000
design = [10.0]
"#;
    ok(ibed(dir.path(), cfg, &["reference-mi"]));
    let r = output::read_reference(&dir.path().join("out").join(output::REFERENCE_FILE)).unwrap();
    let exact = 0.5 * 910f64.ln();
    assert!((r.analytic.unwrap() - exact).abs() < 1e-12);
    assert!((r.value - exact).abs() / exact < 0.03, "nested MC {} vs {exact}", r.value);
    assert_eq!((r.n_outer, r.n_inner), (2000, 20000));
}

#[test]
fn every_output_parses_with_its_reader() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = format!(
        "{SMALL_LINEAR}\n[reference]\nn_outer = 200\nn_inner = 100\n\n[grid]\nhidden = [[8], [16]]\nlr_psi = [1e-3]\n"
    );
    let out = dir.path().join("out");
    for cmd in ["train", "validate", "posterior", "reference-mi", "grid-search"] {
        ok(ibed(dir.path(), &cfg, &[cmd]));
        let manifest = read_manifest(&out.join(output::MANIFEST_FILE)).unwrap();
        assert_eq!(manifest.command, cmd);
        assert_eq!(manifest.seed, 11);
        assert_eq!(manifest.threads, 1);
        for f in &manifest.files {
            let bytes = std::fs::read(out.join(&f.name)).unwrap();
            assert_eq!(bytes.len() as u64, f.bytes, "{}", f.name);
        }
    }
    let trace = output::read_trace(&out.join(output::TRACE_FILE)).unwrap();
    assert_eq!(trace.len(), 40);
    assert!(trace.iter().all(|r| r.design.len() == 2));
    output::read_network(&out.join(output::NETWORK_FILE)).unwrap();
    let v = output::read_validation(&out.join(output::VALIDATION_FILE)).unwrap();
    assert_eq!(v.n_sets, 3);
    let samples = output::read_samples(&out.join(output::SAMPLES_FILE)).unwrap();
    assert_eq!(samples.len(), 500);
    assert!(samples.iter().all(|s| s.len() == 2));
    let summary = output::read_summary(&out.join(output::SUMMARY_FILE)).unwrap();
    assert_eq!(summary.len(), 2);
    assert!(summary.iter().all(|s| s.lower <= s.mean + s.std && s.upper >= s.mean - s.std));
    let weights = output::read_weights(&out.join(output::WEIGHTS_FILE)).unwrap();
    assert!((weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    let reference = output::read_reference(&out.join(output::REFERENCE_FILE)).unwrap();
    assert!(reference.value.is_finite() && reference.analytic.is_none());
    let grid = output::read_grid(&out.join(output::GRID_FILE)).unwrap();
    assert_eq!(grid.len(), 2);
    assert!(grid[0].mean >= grid[1].mean);
}

#[test]
fn bo_outputs_parse_and_respect_the_budget() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = r#"
seed = 4

[model]
name = "oscillatory"
design_dim = 1
gradient_free = true

[network]
hidden = [8]

[train]
epochs = 20
batch_size = 200
lr_psi = 1e-3
lr_design = 0.0

[bo]
initial_probe_count = 3
budget = 5
acquisition_restarts = 4
gp_restarts = 2
validation_sets = 2
"#;
    ok(ibed(dir.path(), cfg, &["bo"]));
    let out = dir.path().join("out");
    let probes = output::read_probes(&out.join(output::PROBES_FILE)).unwrap();
    assert_eq!(probes.len(), 5);
    assert_eq!(probes.iter().filter(|p| p.initial).count(), 3);
    let best = probes.iter().filter_map(|p| p.value).fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(probes.last().unwrap().best_so_far, best);
    let design = output::read_design(&out.join(output::DESIGN_FILE)).unwrap();
    assert!(probes.iter().any(|p| p.value == Some(best) && p.design == design));
    let gp: output::GpSummary = output::read_json(&out.join(output::GP_SUMMARY_FILE)).unwrap();
    assert!(gp.lengthscale > 0.0 && gp.noise_var > 0.0);
    output::read_network(&out.join(output::NETWORK_FILE)).unwrap();
}

#[test]
fn posterior_from_files_matches_in_process_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    ok(ibed(dir.path(), SMALL_LINEAR, &["train"]));
    ok(ibed(dir.path(), SMALL_LINEAR, &["posterior"]));
    let out = dir.path().join("out");

    let cfg = ExperimentConfig::from_toml(SMALL_LINEAR).unwrap();
    let model = cfg.build_model().unwrap().simulator(false);
    let net = output::read_network(&out.join(output::NETWORK_FILE)).unwrap();
    let design = output::read_design(&out.join(output::DESIGN_FILE)).unwrap();
    let run = posterior_pipeline(&cfg, model.as_ref(), &net, &design).unwrap();

    let from_file = output::read_weights(&out.join(output::WEIGHTS_FILE)).unwrap();
    assert_eq!(from_file, run.estimate.normalized_weights());
    assert_eq!(output::read_samples(&out.join(output::SAMPLES_FILE)).unwrap(), run.samples);
}

#[test]
fn identical_runs_write_identical_csvs() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for dir in [&a, &b] {
        ok(ibed(dir.path(), SMALL_LINEAR, &["train"]));
        ok(ibed(dir.path(), SMALL_LINEAR, &["posterior"]));
    }
    let ma = read_manifest(&a.path().join("out").join(output::MANIFEST_FILE)).unwrap();
    let mb = read_manifest(&b.path().join("out").join(output::MANIFEST_FILE)).unwrap();
    assert_eq!(ma.config, mb.config);
    assert_eq!(ma.files, mb.files);
    for name in [output::TRACE_FILE, output::DESIGN_FILE, output::NETWORK_FILE, output::SAMPLES_FILE] {
        let fa = std::fs::read(a.path().join("out").join(name)).unwrap();
        let fb = std::fs::read(b.path().join("out").join(name)).unwrap();
        assert_eq!(fa, fb, "{name} differs");
    }
}

#[test]
fn seed_flag_changes_the_run() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    ok(ibed(a.path(), SMALL_LINEAR, &["train"]));
    ok(ibed(b.path(), SMALL_LINEAR, &["train", "--seed", "12"]));
    let ta = std::fs::read(a.path().join("out").join(output::TRACE_FILE)).unwrap();
    let tb = std::fs::read(b.path().join("out").join(output::TRACE_FILE)).unwrap();
    assert_ne!(ta, tb);
    let mb = read_manifest(&b.path().join("out").join(output::MANIFEST_FILE)).unwrap();
    assert_eq!(mb.seed, 12);
}

#[test]
fn failures_map_to_documented_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let unknown = "[model]\nname = \"fluid\"\ndesign_dim = 2\n";
    assert_eq!(ibed(dir.path(), unknown, &["train"]).status.code(), Some(2));

    let malformed = "[model]\nname = \"linear\"\ndesign_dim = 1\nwidth = 3\n";
    assert_eq!(ibed(dir.path(), malformed, &["train"]).status.code(), Some(3));
    let not_toml = "[model\nname = ";
    assert_eq!(ibed(dir.path(), not_toml, &["train"]).status.code(), Some(3));

    let fresh = tempfile::tempdir().unwrap();
    let o = ibed(fresh.path(), SMALL_LINEAR, &["posterior"]);
    assert_eq!(o.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&o.stderr).contains("network.json"));
}
