use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn pfm(stage: &str, config: &Path, out: &Path, seed: Option<u64>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_pfm"));
    cmd.arg(stage).arg("--config").arg(config).arg("--out").arg(out);
    if let Some(s) = seed {
        cmd.arg("--seed").arg(s.to_string());
    }
    cmd.env("RUST_LOG", "warn").env("PFM_THREADS", "1");
    cmd.output().expect("pfm runs")
}

fn ok(stage: &str, config: &Path, out: &Path) {
    let o = pfm(stage, config, out, None);
    assert!(
        o.status.success(),
        "{stage} failed:\n{}",
        String::from_utf8_lossy(&o.stderr)
    );
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let p = dir.join("experiment.toml");
    std::fs::write(&p, body).unwrap();
    p
}

const SMALL_ARCH: &str = r#"
name = "small_arch"
seed = 3

[dataset]
kind = "arch"
n = 80
noise = 0.1

[metric]
kind = "isomap"
k = 5

[isometry]
epochs = 4
warmup_epochs = 1
batch_size = 16
hidden = 16
hidden_layers = 2
n_steps = 4

[flow]
mode = "dprime_pfm"
n_samples = 16
n_frames = 3

[flow.train]
epochs = 3
hidden = 8
hidden_layers = 2
n_simulation_steps = 4

[evaluation]
interpolation = ["data", "latent", "submanifold"]
n_pairs = 5
"#;

fn read(p: impl AsRef<Path>) -> Vec<u8> {
    std::fs::read(p.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", p.as_ref().display()))
}

#[test]
fn make_dataset_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "name = \"a\"\n[dataset]\nkind = \"arch\"\nn = 500\nnoise = 0.1\n",
    );
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = pfm("make-dataset", &cfg, out, Some(0));
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(read(a.join("points.csv")), read(b.join("points.csv")));
    assert_eq!(read(a.join("manifest_make-dataset.json")), read(b.join("manifest_make-dataset.json")));
}

#[test]
fn negative_stability_weight_is_rejected_before_any_work() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "name = \"a\"\n[dataset]\nkind = \"arch\"\nn = 50\nnoise = 0.1\n[isometry]\nalpha4 = -0.5\n",
    );
    let out = dir.path().join("run");
    let o = pfm("make-dataset", &cfg, &out, None);
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("alpha4"), "{err}");
    assert!(err.contains("make-dataset"), "{err}");
    assert!(!out.join("points.csv").exists());
}

#[test]
fn missing_inputs_name_the_stage() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL_ARCH);
    let o = pfm("train-isometry", &cfg, &dir.path().join("empty"), None);
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("stage train-isometry failed"), "{err}");
}

#[test]
fn small_arch_pipeline_runs_end_to_end_and_reproduces() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL_ARCH);
    let stages = ["make-dataset", "distances", "train-isometry", "train-flow", "generate", "evaluate"];
    let runs = [dir.path().join("r1"), dir.path().join("r2")];
    for out in &runs {
        for s in stages {
            ok(s, &cfg, out);
        }
    }
    let eval: serde_json::Value = serde_json::from_slice(&read(runs[0].join("evaluation.json"))).unwrap();
    for key in ["eps_inv", "eps_ld", "eps_iso"] {
        assert!(eval["ablation"][key].as_f64().unwrap().is_finite(), "{key}");
    }
    assert_eq!(eval["interpolation"].as_array().unwrap().len(), 3);
    let acc = eval["generation"]["one_nn_accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    assert!(runs[0].join("trajectory/frame_002.csv").exists());

    let files = [
        "points.csv",
        "distances.bin",
        "diffeo.json",
        "isometry_history.csv",
        "flow.json",
        "flow_history.csv",
        "samples.csv",
        "trajectory/frame_001.csv",
        "evaluation.json",
        "interpolation.csv",
        "manifest_evaluate.json",
    ];
    for f in files {
        assert_eq!(read(runs[0].join(f)), read(runs[1].join(f)), "{f} differs between reruns");
    }
}

#[test]
fn stages_do_not_modify_their_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL_ARCH);
    let out = dir.path().join("run");
    ok("make-dataset", &cfg, &out);
    let points = read(out.join("points.csv"));
    ok("distances", &cfg, &out);
    ok("train-isometry", &cfg, &out);
    assert_eq!(points, read(out.join("points.csv")));
    let diffeo = read(out.join("diffeo.json"));
    ok("evaluate", &cfg, &out);
    assert_eq!(diffeo, read(out.join("diffeo.json")));
}

#[test]
fn sequence_pipeline_runs_analogue_stage() {
    let dir = tempfile::tempdir().unwrap();
    let props = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/properties.json");
    let cfg = write_config(
        dir.path(),
        &format!(
            r#"
name = "seq"
seed = 1

[dataset]
kind = "sequence_corpus"

[dataset.corpus]
n = 40
alphabet = ["A", "E", "K", "L"]
min_len = 4
max_len = 8
families = 3
mutation_rate = 0.2

[dataset.codec]
embed_dim = 3

[metric]
kind = "sequence"
properties = {props:?}

[isometry]
epochs = 2
warmup_epochs = 1
batch_size = 16
hidden = 8
hidden_layers = 2
n_steps = 3
d_prime = 4
train_embedding = true

[evaluation]
interpolation = []

[analogue]
taus = [0.01, 0.5]
"#
        ),
    );
    let out = dir.path().join("run");
    for s in ["make-dataset", "distances", "train-isometry", "evaluate", "analogue"] {
        ok(s, &cfg, &out);
    }
    assert!(out.join("codec_trained.json").exists());
    let rep: serde_json::Value = serde_json::from_slice(&read(out.join("analogue.json"))).unwrap();
    assert_eq!(rep.as_array().unwrap().len(), 2);
    assert!(out.join("analogues_tau_0.5.csv").exists());
}
