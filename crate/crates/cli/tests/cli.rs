use std::process::Command;

fn dcmpc(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_dcmpc"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

const TINY: &str = r#"
env = "pointmass"
episodes = 3
random_episodes = 2
batch_size = 8
max_episode_steps = 10
latent_dim = 2
eval_interval = 3
eval_episodes = 1
world_model.encoder_hidden = [8]
world_model.mlp_hidden = [8]
td.mlp_hidden = [8]
mppi.population = 16
mppi.prior_population = 2
mppi.elites = 4
mppi.iterations = 2
"#;

#[test]
fn dump_codebook_lists_fifteen_codes() {
    let out = dcmpc(&["dump-codebook", "--levels", "5,3"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 16);
    assert_eq!(lines[0], "index,symbol_1,symbol_2");
    assert_eq!(lines[15], "14,1,1");
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "env = \"cartpole\"\n").unwrap();
    assert_eq!(dcmpc(&["train", "--config", bad.to_str().unwrap()]).status.code(), Some(2));
    std::fs::write(&bad, "no_such_key = 1\n").unwrap();
    assert_eq!(dcmpc(&["train", "--config", bad.to_str().unwrap()]).status.code(), Some(2));
    assert_eq!(dcmpc(&["dump-codebook", "--levels", "1,3"]).status.code(), Some(2));
}

#[test]
fn train_eval_plot_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let out = dir.path().join("run");
    let o = out.to_str().unwrap();
    let train = dcmpc(&["train", "--config", cfg.to_str().unwrap(), "--seed", "4", "--out", o]);
    assert!(train.status.success(), "{}", String::from_utf8_lossy(&train.stderr));
    for f in ["metrics.csv", "timing.csv", "checkpoint.ckpt"] {
        assert!(out.join(f).exists(), "{f}");
    }

    let ckpt = out.join("checkpoint.ckpt");
    let trace = dir.path().join("trace.csv");
    let args = ["eval", "--checkpoint", ckpt.to_str().unwrap(), "--episodes", "2", "--trace", trace.to_str().unwrap()];
    let first = dcmpc(&args);
    assert!(first.status.success(), "{}", String::from_utf8_lossy(&first.stderr));
    assert_eq!(first.stdout, dcmpc(&args).stdout);
    let trace = std::fs::read_to_string(trace).unwrap();
    assert!(trace.starts_with("step,iteration,best_phi,mean_phi,mu0_0,mu0_1"));

    let plot = dcmpc(&["plot", "--metrics", out.join("metrics.csv").to_str().unwrap()]);
    assert!(plot.status.success());
    assert!(out.join("return.svg").exists() && out.join("active_codes.svg").exists());

    std::fs::write(&ckpt, b"not a checkpoint\n").unwrap();
    assert_eq!(dcmpc(&["eval", "--checkpoint", ckpt.to_str().unwrap()]).status.code(), Some(1));
}
