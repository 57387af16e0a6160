use std::path::Path;

use jointdiff_cli::config::RunConfig;
use jointdiff_cli::{run, CHECKPOINT_FILE, DATASET_FILE, LOSS_LOG_FILE, METRICS_FILE, PREDICTIONS_FILE};

const TINY: &str = r#"
[data]
subjects = 30
split = [0.6, 0.2, 0.2]

[data.generator]
image_side = 8
radius_min = 1.0
radius_max = 3.0

[train]
epochs = 2
batch_size = 8
validation_draws = 2

[train.denoiser]
image_side = 8
base_width = 4
depth = 1
time_dim = 4
norm_groups = 2

[sampler]
continuous_steps = 5
discrete_steps = 2
"#;

fn jd(args: &[&str]) -> Result<String, String> {
    let mut out = Vec::new();
    let argv = std::iter::once("jointdiff").chain(args.iter().copied());
    match run(argv, &mut out) {
        Ok(()) => Ok(String::from_utf8(out).unwrap()),
        Err(e) => Err(e.line()),
    }
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn full_pipeline_on_tiny_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let data = dir.path().join("data");
    let model = dir.path().join("model");

    let out = jd(&["--config", p(&cfg), "gen-data", "--out-dir", p(&data)]).unwrap();
    assert!(out.contains("wrote 30 subjects (train 18, validation 6, test 6)"), "{out}");
    let ds = data.join(DATASET_FILE);

    let out = jd(&["--config", p(&cfg), "train", "--data", p(&ds), "--out-dir", p(&model)]).unwrap();
    assert!(out.contains("best epoch"));
    let log = std::fs::read_to_string(model.join(LOSS_LOG_FILE)).unwrap();
    assert_eq!(log.lines().count(), 3);
    let ck = model.join(CHECKPOINT_FILE);
    assert!(ck.exists());

    let samples = dir.path().join("samples");
    let out = jd(&["--config", p(&cfg), "sample", "--checkpoint", p(&ck), "--out-dir", p(&samples)]).unwrap();
    assert_eq!(out.lines().count(), 5);
    let pgms = std::fs::read_dir(&samples)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "pgm"))
        .count();
    assert_eq!(pgms, 4);
    let table = std::fs::read_to_string(samples.join("samples.tsv")).unwrap();
    assert_eq!(table.lines().count(), 5);

    let age = dir.path().join("age");
    let report = jd(&[
        "--config", p(&cfg), "infer-age", "--checkpoint", p(&ck), "--data", p(&ds), "--out-dir", p(&age), "--known",
        "image+sex",
    ])
    .unwrap();
    assert!(report.contains("population-mean"));
    let preds = age.join(PREDICTIONS_FILE);
    let text = std::fs::read_to_string(&preds).unwrap();
    assert!(text.starts_with("#kind\tregression\tknown\timage+sex\n"));
    assert_eq!(text.lines().count(), 2 + 6);
    let again = jd(&["eval", "--predictions", p(&preds)]).unwrap();
    let jd_row = |s: &str| s.lines().find(|l| l.starts_with("jointdiff")).unwrap().to_string();
    assert_eq!(jd_row(&again), jd_row(&report));
    assert!(age.join(METRICS_FILE).exists());

    let sex = dir.path().join("sex");
    let report = jd(&[
        "--config", p(&cfg), "infer-sex", "--checkpoint", p(&ck), "--data", p(&ds), "--out-dir", p(&sex), "--known",
        "age", "--limit", "3",
    ])
    .unwrap();
    let text = std::fs::read_to_string(sex.join(PREDICTIONS_FILE)).unwrap();
    assert!(text.starts_with("#kind\tclassification\tknown\tage\n"));
    assert_eq!(text.lines().count(), 2 + 3);
    let again = jd(&["eval", "--predictions", p(&sex.join(PREDICTIONS_FILE))]).unwrap();
    assert_eq!(jd_row(&again), jd_row(&report));

    let inp = dir.path().join("inpaint");
    let out = jd(&[
        "--config", p(&cfg), "inpaint", "--checkpoint", p(&ck), "--data", p(&ds), "--out-dir", p(&inp), "-n", "2",
    ])
    .unwrap();
    let rows: Vec<&str> = out.lines().skip(1).collect();
    assert_eq!(rows.len(), 2);
    for r in rows {
        assert_eq!(r.split('\t').nth(1), Some("0"));
    }

    for d in [&data, &model, &samples, &age, &sex, &inp] {
        let echo = RunConfig::load(d.join("config.toml")).unwrap();
        assert_eq!(echo.train.denoiser.image_side, 8);
        assert_eq!(echo.sampler.continuous_steps, 5);
    }
}

#[test]
fn training_is_reproducible_from_the_cli() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let data = dir.path().join("data");
    jd(&["--config", p(&cfg), "gen-data", "--out-dir", p(&data)]).unwrap();
    let ds = data.join(DATASET_FILE);
    let mut bytes = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        jd(&["--config", p(&cfg), "train", "--data", p(&ds), "--out-dir", p(&out), "--epochs", "1"]).unwrap();
        bytes.push(std::fs::read(out.join(CHECKPOINT_FILE)).unwrap());
    }
    assert_eq!(bytes[0], bytes[1]);
}

#[test]
fn default_echo_surfaces_protocol_constants() {
    let dir = tempfile::tempdir().unwrap();
    jd(&["gen-data", "--out-dir", p(dir.path()), "--subjects", "5"]).unwrap();
    let echo = std::fs::read_to_string(dir.path().join("config.toml")).unwrap();
    for needle in ["steps = 1000", "continuous_steps = 50", "discrete_steps = 20", "inference_samples = 3"] {
        assert!(echo.contains(needle), "missing {needle}");
    }
    let mut want = RunConfig::default();
    want.data.subjects = 5;
    assert_eq!(RunConfig::from_toml(&echo).unwrap(), want);
}

#[test]
fn errors_are_single_tagged_lines() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.jdif");
    let e = jd(&["sample", "--checkpoint", p(&missing), "--out-dir", p(dir.path())]).unwrap_err();
    assert!(e.starts_with("error\tio\t"), "{e}");
    assert!(!e.contains('\n'));

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[train]\nepochz = 3\n").unwrap();
    let e = jd(&["--config", p(&bad), "check"]).unwrap_err();
    assert!(e.starts_with("error\t"), "{e}");
    assert!(!e.contains('\n'));

    let e = jd(&["infer-age", "--known", "age"]).unwrap_err();
    assert!(e.starts_with("error\tusage\t"), "{e}");
}

#[test]
fn check_command_passes() {
    let out = jd(&["check"]).unwrap();
    assert!(out.lines().count() > 10);
    assert!(out.lines().all(|l| l.starts_with("PASS\t")), "{out}");
}

#[test]
fn binary_reports_errors_on_stderr_with_failure_status() {
    let out = std::process::Command::new(env!("CARGO_BIN_EXE_jointdiff"))
        .args(["eval", "--predictions", "/nonexistent/predictions.tsv"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.lines().count(), 1);
    assert!(err.starts_with("error\tio\t"), "{err}");
}
