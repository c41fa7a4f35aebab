use std::path::Path;
use std::process::Command;

const TINY: &str = r#"
[defense]
t_star = 0.3
sigma_smooth = 1.0
dilate_radius = 1
min_area = 2
inpaint_steps = 2

[schedule]
steps = 100
beta_max = 0.05

[data]
image_size = 16
classes = 2
train_images = 48
val_images = 48

[denoiser]
base_channels = 4
emb_dim = 8
train_steps = 4
batch_size = 8

[classifier]
width = 4
epochs = 2

[attack]
iters = 2

[tuning]
n_ctx = 4
steps = 2
shots = 2

[eval]
n_images = 3
"#;

fn patchdiff(args: &[&str], dir: &Path) -> std::process::Output {
    let out = Command::new(env!("CARGO_BIN_EXE_patchdiff"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs");
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

#[test]
fn eval_twice_gives_identical_csv_and_other_verbs_run() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
    let common = ["--config", "tiny.toml", "--seed", "3", "--cache", "cache"];
    let run_eval = |out: &str| {
        let mut args = vec!["eval"];
        args.extend(common);
        args.extend(["--out", out, "--defenses", "undefended,aap-zero-fill,aap-inpaint", "--attacks", "advp", "--n", "1"]);
        patchdiff(&args, dir.path());
        std::fs::read(dir.path().join(out).join("results.csv")).unwrap()
    };
    let a = run_eval("a");
    let b = run_eval("b");
    assert_eq!(a, b);
    let text = String::from_utf8(a).unwrap();
    assert!(text.starts_with("defense,attack,classifier,clean_acc,robust_acc,n,seed,config_hash\n"));
    assert_eq!(text.lines().count(), 4);
    assert!(dir.path().join("a/robust_acc.png").exists());

    for verb in [
        vec!["train-toy"],
        vec!["attack", "--n", "1"],
        vec!["defend", "--n", "1"],
        vec!["tune"],
        vec!["ablate", "--kind", "no_restore", "--n", "1"],
        vec!["sweep-tstar", "--n", "1", "--grid", "0.1,0.5"],
    ] {
        let mut args = verb.clone();
        args.extend(common);
        args.extend(["--out", "v"]);
        patchdiff(&args, dir.path());
    }
    assert!(dir.path().join("v/prompt_l.safetensors").exists());
    assert!(dir.path().join("v/sweep_tstar.json").exists());
}

#[test]
fn bad_arguments_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_patchdiff"))
        .args(["ablate", "--kind", "nonsense", "--config", "missing.toml"])
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
}
