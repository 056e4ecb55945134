use std::path::Path;
use std::process::{Command, Output};

fn videdit(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_videdit"))
        .args(args)
        .current_dir(dir)
        .env_remove("VIDEDIT_OUTPUT_ROOT")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const TINY: &str = r#"
[schedule]
sampler_steps = 4

[pretrain]
steps = 3
batch = 2
corpus_size = 8

[pretrain.model]
channels = 4
size = 8
base_channels = 8
coarse_channels = 8
heads = 2
text_dim = 8
max_tokens = 4
vocab_size = 32
time_features = 8
time_dim = 8
attention_blocks = ["down1", "mid"]

[finetune]
steps = 2

[nti]
inner_iters = 1

[sdedit]
start_step = 2

[paths]
weights = "image.safetensors"
video = "data"
output = "out"
"#;

fn tiny_workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
    let o = videdit(&["make-data", "--out", "data", "--seed", "1", "--frames", "3", "--size", "8"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let o = videdit(&["pretrain", "-c", "tiny.toml"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    dir
}

#[test]
fn make_data_writes_a_loadable_scene() {
    let dir = tempfile::tempdir().unwrap();
    let o = videdit(&["make-data", "--out", "scene", "--seed", "4"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("moving"));
    for f in ["video.safetensors", "scene.json", "frames/manifest.json", "masks/mask_007.png"] {
        assert!(dir.path().join("scene").join(f).is_file(), "{f}");
    }
}

#[test]
fn edit_prints_the_report_and_repeats_exactly() {
    let dir = tiny_workspace();
    let args = ["edit", "-c", "tiny.toml", "--target", "a blue square moving left"];
    let first = videdit(&args, dir.path());
    assert!(first.status.success(), "{}", stderr(&first));
    let stdout = String::from_utf8_lossy(&first.stdout).into_owned();
    assert!(stdout.starts_with("method,"), "{stdout}");
    assert!(stdout.contains("\nedit,"));
    let latent = std::fs::read(dir.path().join("out/edit/latent.safetensors")).unwrap();
    let second = videdit(&args, dir.path());
    assert!(second.status.success());
    assert_eq!(first.stdout, second.stdout);
    assert_eq!(std::fs::read(dir.path().join("out/edit/latent.safetensors")).unwrap(), latent);
}

#[test]
fn flags_override_the_file() {
    let dir = tiny_workspace();
    let o = videdit(
        &["reconstruct", "-c", "tiny.toml", "--out", "elsewhere", "--set", "guidance=3.0"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let written = std::fs::read_to_string(dir.path().join("elsewhere/config.toml")).unwrap();
    assert!(written.contains("guidance = 3.0"), "{written}");
    assert!(written.contains("mode = \"reconstruct\""));
}

#[test]
fn evaluate_scores_saved_frames() {
    let dir = tiny_workspace();
    let o = videdit(&["baseline-sdedit", "-c", "tiny.toml", "--target", "a red ring moving up"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let o = videdit(
        &[
            "evaluate",
            "--reference",
            "data",
            "--prompt",
            "a red ring moving up",
            "--video",
            "sdedit=out/sdedit/frames",
            "--out",
            "scores",
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("\nsdedit,"));
    assert!(dir.path().join("scores/grid.png").is_file());
}

#[test]
fn configuration_problems_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.toml"), "[nti]\nsurprise = 1\n").unwrap();
    let cases: [&[&str]; 4] = [
        &["edit", "-c", "bad.toml", "--target", "a red ring"],
        &["edit", "--set", "mode=sideways", "--target", "a red ring"],
        &["edit", "--weights", "missing.safetensors", "--target", "a red ring"],
        &["edit"],
    ];
    for args in cases {
        let o = videdit(args, dir.path());
        assert_eq!(o.status.code(), Some(2), "{args:?}: {}", stderr(&o));
        assert!(stderr(&o).starts_with("error:"), "{args:?}");
    }
    assert_eq!(videdit(&["edit", "--no-such-flag"], dir.path()).status.code(), Some(2));
}

#[test]
fn numerical_failure_exits_with_three() {
    let dir = tiny_workspace();
    let o = videdit(
        &["edit", "-c", "tiny.toml", "--target", "a red ring", "--set", "finetune.learning_rate=1e300"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}
