use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = r#"
seed = 5
variant = "nd"
[scenario]
array_rows = 2
array_cols = 2
subcarriers = 8
bandwidth = 400000.0
n_train = 60
n_val = 32
n_test = 12
[model]
latent = 4
channels = 2
nd_p = 0.3
[train]
batch_size = 20
max_epochs = 2
"#;

fn csiq(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_csiq"))
        .current_dir(dir)
        .args(args)
        .env_remove("CSIQ_SEED")
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = csiq(dir, args);
    assert!(out.status.success(), "{:?}: {}", args, String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn stepwise_subcommands() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    std::fs::write(d.join("c.toml"), CONFIG).unwrap();
    ok(d, &["gen-data", "--config", "c.toml", "--out", "d.csid"]);
    ok(d, &["train", "--variant", "nd", "--data", "d.csid", "--config", "c.toml", "--out", "m.csim"]);
    ok(d, &["allocate", "--model", "m.csim", "--data", "d.csid", "--bits", "8", "--out", "b.csiq"]);
    ok(d, &["quantize", "--model", "m.csim", "--books", "b.csiq", "--data", "d.csid", "--out", "f.csif"]);
    ok(d, &["dequantize", "--books", "b.csiq", "--feedback", "f.csif", "--out", "z.csv"]);
    let latents = std::fs::read_to_string(d.join("z.csv")).unwrap();
    assert_eq!(latents.lines().filter(|l| !l.is_empty()).count() - 1, 12);
    ok(d, &["eval", "--model", "m.csim", "--books", "b.csiq", "--data", "d.csid", "--out", "ev"]);
    assert!(d.join("ev/metrics.csv").exists() && d.join("ev/cdf.csv").exists());
    ok(d, &["flops", "--model", "m.csim", "--csv", "f.csv"]);
    assert!(std::fs::read_to_string(d.join("f.csv")).unwrap().contains("flops"));
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    std::fs::write(d.join("bad.toml"), "seed = 1\nunknown_key = 2\n").unwrap();
    assert_eq!(csiq(d, &["gen-data", "--config", "bad.toml", "--out", "x"]).status.code(), Some(2));
    std::fs::write(d.join("junk.csim"), b"NOPE0000").unwrap();
    assert_eq!(csiq(d, &["flops", "--model", "junk.csim"]).status.code(), Some(4));
    std::fs::write(d.join("c.toml"), CONFIG).unwrap();
    let seeded = Command::new(env!("CARGO_BIN_EXE_csiq"))
        .current_dir(d)
        .args(["gen-data", "--config", "c.toml", "--out", "d.csid"])
        .env("CSIQ_SEED", "not-a-number")
        .output()
        .unwrap();
    assert_eq!(seeded.status.code(), Some(2));
}
