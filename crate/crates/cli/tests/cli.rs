use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = r#"
name = "tiny"
seed = 4
analyses = ["accuracy", "norms"]

[dataset]
kind = "synth"
size = 8
classes = 2
train_per_class = 10
test_per_class = 5
textures = [{ alpha = 1.0, amplitude = 0.2 }]
noise = { alpha = 1.0, amplitude = 0.05 }

[[inject]]
name = "ring"
mode = "ring"
r_lo = 0.5
r_hi = 1.0
epsilon = 1.0
seed = 1

[train]
lr = 0.1
batch_size = 5
epochs = 2

[[models]]
arch = "preset"
family = "fwc"

[[attacks]]
norm = "linf"
epsilon = 0.1
rate = 0.2
steps = 3

[settings]
attack_examples = 4
"#;

fn freqbias(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_freqbias"))
        .args(args)
        .current_dir(dir)
        .env_remove("FREQBIAS_ARTIFACTS")
        .output()
        .unwrap()
}

fn setup() -> tempfile::TempDir {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("tiny.toml"), CONFIG).unwrap();
    tmp
}

#[test]
fn experiment_then_report() {
    let tmp = setup();
    let out = freqbias(&["experiment", "tiny.toml", "--trials", "2", "--out", "run"], tmp.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(tmp.path().join("run/report.csv")).unwrap();
    assert!(csv.starts_with("model,trial,metric,value,std\n"));
    assert!(csv.contains("ring/fwc,mean,test_accuracy,"));

    let out = freqbias(&["report", "run"], tmp.path());
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(std::fs::read_to_string(tmp.path().join("run/report.csv")).unwrap(), csv);

    std::fs::remove_file(tmp.path().join("run/units/ring/fwc/trial1/metrics.json")).unwrap();
    let out = freqbias(&["report", "run"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bad_config_exits_with_one() {
    let tmp = setup();
    std::fs::write(tmp.path().join("bad.toml"), CONFIG.replace("epochs = 2", "epochs = \"two\"")).unwrap();
    assert_eq!(freqbias(&["experiment", "bad.toml"], tmp.path()).status.code(), Some(1));
    assert_eq!(freqbias(&["experiment", "missing.toml"], tmp.path()).status.code(), Some(1));
    assert!(!tmp.path().join("artifacts").exists());
}

#[test]
fn train_attack_beta_spectrum_inject() {
    let tmp = setup();
    let run = |args: &[&str]| {
        let out = freqbias(args, tmp.path());
        assert_eq!(out.status.code(), Some(0), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    };
    run(&["train", "tiny.toml", "--out", "models"]);
    assert!(tmp.path().join("models/fwc.fbt").is_file());
    run(&["attack", "--model", "models/fwc", "--config", "tiny.toml", "--norm", "l2", "--epsilon", "0.5", "--out", "atk/l2"]);
    assert!(tmp.path().join("atk/l2.json").is_file());
    run(&["spectrum", "atk/l2.fbt", "--out", "spec"]);
    assert!(tmp.path().join("spec/radial.csv").is_file());
    run(&["beta", "--model", "models/fwc", "--out", "beta"]);
    assert!(tmp.path().join("beta/spectrum.pgm").is_file());
    run(&["inject", "tiny.toml", "--variant", "ring", "--out", "data"]);
    let train = std::fs::read(tmp.path().join("data/train.bin")).unwrap();
    assert_eq!(train.len(), 20 * (1 + 64));

    assert_eq!(freqbias(&["train", "tiny.toml", "--model", "nope", "--out", "m"], tmp.path()).status.code(), Some(1));
    assert_eq!(freqbias(&["inject", "tiny.toml", "--variant", "nope", "--out", "d"], tmp.path()).status.code(), Some(1));
}
