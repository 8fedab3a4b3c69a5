//! End-to-end runs of the `amcf` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const BIN: &str = env!("CARGO_BIN_EXE_amcf");

fn amcf(args: &[&str]) -> Output {
    Command::new(BIN).args(args).env_remove("AMCF_DATA_ROOT").output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

/// Genre flags for item `i`: item 1 has exactly three genres, every fifth
/// item none.
fn genres(i: u32) -> Vec<u8> {
    (0..18u32)
        .map(|k| match i {
            1 => u8::from(matches!(k, 0 | 4 | 7)),
            _ if i % 5 == 0 => 0,
            _ => u8::from((i + k) % 4 == 0),
        })
        .collect()
}

/// Writes an ML-100K-format dataset with 30 users and 40 items.
fn write_fixture(dir: &Path) {
    fs::create_dir_all(dir).unwrap();
    let mut ratings = String::new();
    for u in 1..=30u32 {
        for i in 1..=40u32 {
            if (u * 7 + i * 3) % 3 == 0 || i == 1 {
                let liked = genres(i)[(u % 18) as usize] == 1;
                let r = if liked { 5 } else { 1 + (u + i) % 4 };
                ratings.push_str(&format!("{u}\t{i}\t{r}\t{}\n", 880000000 + u * 100 + i));
            }
        }
    }
    let items: String = (1..=40u32)
        .map(|i| {
            let flags: String = genres(i).iter().map(|f| format!("|{f}")).collect();
            format!("{i}|Movie {i} (1995)|01-Jan-1995||http://example.org/{i}|0{flags}\n")
        })
        .collect();
    fs::write(dir.join("u.data"), ratings).unwrap();
    fs::write(dir.join("u.item"), items).unwrap();
}

const FAST_TRAIN: &str = "[model]\ndim = 8\n\n[train]\nmax_epochs = 8\nbatch_size = 32\n";

struct Run {
    _tmp: TempDir,
    root: PathBuf,
    config: PathBuf,
}

impl Run {
    fn out(&self) -> PathBuf {
        self.root.join("out")
    }

    fn checkpoint(&self) -> String {
        self.out().join("model.json").display().to_string()
    }

    fn config(&self) -> &str {
        self.config.to_str().unwrap()
    }
}

/// A temp directory with a fixture dataset under `data/` and `run.toml`
/// pointing at it through a relative path.
fn setup(extra: &str) -> Run {
    let tmp = TempDir::new().unwrap();
    let root = tmp.path().to_path_buf();
    write_fixture(&root.join("data"));
    let config = root.join("run.toml");
    fs::write(&config, format!("[dataset]\nkind = \"ml100k\"\npath = \"data\"\n\n[output]\ndir = \"out\"\n\n{extra}")).unwrap();
    Run { _tmp: tmp, root, config }
}

fn trained(extra: &str) -> Run {
    let run = setup(extra);
    let out = amcf(&["train", "--config", run.config()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    run
}

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn train_writes_checkpoint_history_and_manifest() {
    let run = trained(FAST_TRAIN);
    let out = run.out();
    for f in ["model.json", "history.csv", "manifest.json"] {
        assert!(out.join(f).is_file(), "{f} missing");
    }
    let history = fs::read_to_string(out.join("history.csv")).unwrap();
    assert!(history.starts_with("epoch,l_pred,l_int,total,val_rmse\n"));
    let m = manifest(&out);
    assert_eq!(m["seed"], 42);
    assert_eq!(m["stats"]["users"], 30);
    assert_eq!(m["stats"]["items"], 40);
    assert_eq!(m["stats"]["aspects"], 18);
    assert_eq!(m["config_hash"].as_str().unwrap().len(), 64);
    assert!(m["created_unix"].as_u64().unwrap() > 0);
}

#[test]
fn missing_item_file_is_a_data_error_naming_the_path() {
    let run = setup(FAST_TRAIN);
    let item = run.root.join("data").join("u.item");
    fs::remove_file(&item).unwrap();
    let out = amcf(&["train", "--config", run.config()]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains(&item.display().to_string()), "{}", stderr(&out));
}

#[test]
fn malformed_ratings_are_a_data_error() {
    let run = setup(FAST_TRAIN);
    fs::write(run.root.join("data").join("u.data"), "1\t2\tfive\t0\n").unwrap();
    let out = amcf(&["train", "--config", run.config()]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("u.data:1"), "{}", stderr(&out));
}

#[test]
fn negative_lambda_is_a_config_error_naming_the_field() {
    let run = setup("[train]\nlambda = -0.5\n");
    let out = amcf(&["train", "--config", run.config()]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("train.lambda"), "{}", stderr(&out));

    let run = setup(FAST_TRAIN);
    let out = amcf(&["train", "--config", run.config(), "--lambda=-0.5"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("train.lambda"), "{}", stderr(&out));
    assert!(!run.out().exists(), "nothing is written on a config error");
}

#[test]
fn unknown_config_key_is_an_error() {
    let run = setup("[train]\nlearning_rate = 0.1\n");
    let out = amcf(&["train", "--config", run.config()]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("learning_rate"), "{}", stderr(&out));
}

#[test]
fn dataset_path_needs_a_root_when_omitted() {
    let run = setup("");
    fs::write(&run.config, "[dataset]\nkind = \"ml100k\"\n\n[output]\ndir = \"out\"\n").unwrap();
    let out = amcf(&["train", "--config", run.config()]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("AMCF_DATA_ROOT"), "{}", stderr(&out));

    let with_root = Command::new(BIN)
        .args(["train", "--config", run.config(), "--dim", "4"])
        .env("AMCF_DATA_ROOT", &run.root)
        .output()
        .unwrap();
    // resolves to <root>/ml-100k, which the fixture does not have
    assert_eq!(code(&with_root), 2);
    assert!(stderr(&with_root).contains("ml-100k"), "{}", stderr(&with_root));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&amcf(&["train"])), 1);
    assert_eq!(code(&amcf(&["frobnicate"])), 1);
    assert_eq!(code(&amcf(&["train", "--config", "x.toml", "--attn-mode", "cubic"])), 1);
    assert_eq!(code(&amcf(&["--help"])), 0);
}

#[test]
fn training_is_byte_identical_across_runs() {
    let run = trained(FAST_TRAIN);
    let other = run.root.join("again");
    let out = amcf(&["train", "--config", run.config(), "--out", other.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    for f in ["model.json", "history.csv"] {
        assert_eq!(fs::read(run.out().join(f)).unwrap(), fs::read(other.join(f)).unwrap(), "{f}");
    }
    let (mut a, mut b) = (manifest(&run.out()), manifest(&other));
    for m in [&mut a, &mut b] {
        let obj = m.as_object_mut().unwrap();
        obj.remove("created_unix");
        obj.remove("config");
    }
    assert_eq!(a, b);
}

#[test]
fn embedded_config_reproduces_the_run() {
    let run = trained(FAST_TRAIN);
    let embedded = manifest(&run.out())["config"].as_str().unwrap().to_string();
    let replay = run.root.join("replay.toml");
    fs::write(&replay, embedded.replace(&run.out().display().to_string(), &run.root.join("replay").display().to_string()))
        .unwrap();
    let out = amcf(&["train", "--config", replay.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(
        fs::read(run.out().join("model.json")).unwrap(),
        fs::read(run.root.join("replay").join("model.json")).unwrap()
    );
    assert_eq!(manifest(&run.out())["config_hash"], manifest(&run.root.join("replay"))["config_hash"]);
}

#[test]
fn overrides_change_the_run_and_its_hash() {
    let run = trained(FAST_TRAIN);
    let other = run.root.join("seeded");
    let out = amcf(&["train", "--config", run.config(), "--seed", "7", "--no-shield", "--out", other.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let m = manifest(&other);
    assert_eq!(m["seed"], 7);
    assert_ne!(m["config_hash"], manifest(&run.out())["config_hash"]);
    let embedded = m["config"].as_str().unwrap();
    assert!(embedded.contains("shield = false"), "{embedded}");
}

#[test]
fn evaluate_writes_reports_for_three_rows() {
    let run = trained(FAST_TRAIN);
    let out = amcf(&["evaluate", "--config", run.config(), "--checkpoint", &run.checkpoint()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stdout(&out).contains("agreement"));
    let reports: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.out().join("eval.json")).unwrap()).unwrap();
    let models: Vec<&str> = reports.as_array().unwrap().iter().map(|r| r["model"].as_str().unwrap()).collect();
    assert_eq!(models, ["amcf", "lr", "random"]);
    assert_eq!(reports[0]["config"]["train"]["lambda"], 0.05);

    let mut csv = csv::Reader::from_path(run.out().join("eval.csv")).unwrap();
    let header: Vec<String> = csv.headers().unwrap().iter().map(String::from).collect();
    for col in ["model", "rmse", "T1@3", "B1@3", "T3@5", "B3@5", "score_s", "seed", "config_hash"] {
        assert!(header.iter().any(|h| h == col), "{col} missing from {header:?}");
    }
    assert_eq!(csv.records().count(), 3);

    let first = fs::read(run.out().join("eval.csv")).unwrap();
    let again = amcf(&["evaluate", "--config", run.config(), "--checkpoint", &run.checkpoint()]);
    assert_eq!(code(&again), 0);
    assert_eq!(first, fs::read(run.out().join("eval.csv")).unwrap());
}

#[test]
fn evaluate_rejects_mismatched_config_or_checkpoint() {
    let run = trained(FAST_TRAIN);
    let ckpt = run.checkpoint();
    let out = amcf(&["evaluate", "--config", run.config(), "--checkpoint", &ckpt, "--lambda", "0.3"]);
    assert_eq!(code(&out), 4, "{}", stderr(&out));

    // eval-only settings are outside the hash
    fs::write(&run.config, format!("{}\n[eval]\nlr_ridge = 1.0\n", fs::read_to_string(&run.config).unwrap())).unwrap();
    let out = amcf(&["evaluate", "--config", run.config(), "--checkpoint", &ckpt]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));

    let mut bytes = fs::read(&ckpt).unwrap();
    let pos = bytes.iter().position(|&b| b == b'1').unwrap();
    bytes[pos] = b'2';
    fs::write(&ckpt, &bytes).unwrap();
    let out = amcf(&["evaluate", "--config", run.config(), "--checkpoint", &ckpt]);
    assert_eq!(code(&out), 4, "{}", stderr(&out));

    fs::remove_file(run.out().join("manifest.json")).unwrap();
    let out = amcf(&["evaluate", "--config", run.config(), "--checkpoint", &ckpt]);
    assert_eq!(code(&out), 4, "{}", stderr(&out));
}

#[test]
fn evaluate_rejects_changed_dataset() {
    let run = trained(FAST_TRAIN);
    let data = run.root.join("data").join("u.data");
    let mut text = fs::read_to_string(&data).unwrap();
    text.push_str("31\t2\t3\t0\n");
    fs::write(&data, text).unwrap();
    let out = amcf(&["evaluate", "--config", run.config(), "--checkpoint", &run.checkpoint()]);
    assert_eq!(code(&out), 4, "{}", stderr(&out));
}

fn parse_rows(text: &str) -> Vec<(String, f64)> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    assert_eq!(r.headers().unwrap(), vec!["aspect", "value"]);
    r.records()
        .map(|rec| {
            let rec = rec.unwrap();
            (rec[0].to_string(), rec[1].parse().unwrap())
        })
        .collect()
}

#[test]
fn explain_general_prints_every_aspect_l1_normalized() {
    let run = trained(FAST_TRAIN);
    let out = amcf(&["explain", "--checkpoint", &run.checkpoint(), "--user", "3"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let rows = parse_rows(&stdout(&out));
    assert_eq!(rows.len(), 18);
    let l1: f64 = rows.iter().map(|r| r.1.abs()).sum();
    assert!((l1 - 1.0).abs() < 1e-9, "{l1}");
    assert!(rows.windows(2).all(|w| w[0].1 >= w[1].1));
}

#[test]
fn explain_item_restricts_to_its_aspects() {
    let run = trained(FAST_TRAIN);
    let out = amcf(&["explain", "--checkpoint", &run.checkpoint(), "--user", "3", "--item", "1"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let rows = parse_rows(&stdout(&out));
    let (aspects, rating) = rows.split_at(rows.len() - 1);
    assert_eq!(aspects.len(), 3);
    assert!(aspects.iter().all(|r| r.1 != 0.0));
    let mut names: Vec<&str> = aspects.iter().map(|r| r.0.as_str()).collect();
    names.sort();
    assert_eq!(names, ["Action", "Comedy", "Drama"]);
    assert_eq!(rating[0].0, "predicted_rating");
    assert!((1.0..=5.0).contains(&rating[0].1));
}

#[test]
fn explain_unknown_ids_exit_five() {
    let run = trained(FAST_TRAIN);
    let ckpt = run.checkpoint();
    assert_eq!(code(&amcf(&["explain", "--checkpoint", &ckpt, "--user", "999"])), 5);
    assert_eq!(code(&amcf(&["explain", "--checkpoint", &ckpt, "--user", "3", "--item", "999"])), 5);
    assert_eq!(code(&amcf(&["explain", "--checkpoint", "/nonexistent/model.json", "--user", "3"])), 4);
}

#[test]
fn report_merges_runs_and_appends_means() {
    let run = trained(FAST_TRAIN);
    let ckpt = run.checkpoint();
    let out = amcf(&["evaluate", "--config", run.config(), "--checkpoint", &ckpt]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let first = run.root.join("first.csv");
    fs::copy(run.out().join("eval.csv"), &first).unwrap();
    let merged = run.root.join("merged.csv");
    let out = amcf(&[
        "report",
        first.to_str().unwrap(),
        run.out().join("eval.csv").to_str().unwrap(),
        "--out",
        merged.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let mut r = csv::Reader::from_path(&merged).unwrap();
    let rmse_col = r.headers().unwrap().iter().position(|h| h == "rmse").unwrap();
    let rows: Vec<csv::StringRecord> = r.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 6 + 3);
    let amcf_rmse: f64 = rows[0][rmse_col].parse().unwrap();
    let mean = rows.iter().find(|r| r[0].starts_with("amcf (mean")).unwrap();
    assert_eq!(mean[rmse_col].parse::<f64>().unwrap(), amcf_rmse);

    fs::write(&first, "model,other\nx,1\n").unwrap();
    let out = amcf(&["report", first.to_str().unwrap(), merged.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
}

fn ml100k_dir() -> Option<PathBuf> {
    let dir = std::env::var_os("AMCF_DATA_ROOT")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data"))
        .join("ml-100k");
    dir.join("u.data").is_file().then_some(dir)
}

#[test]
fn ml100k_short_run_reports_all_columns() {
    let Some(data) = ml100k_dir() else {
        eprintln!("ml-100k not found; run scripts/fetch_movielens_100k.py");
        return;
    };
    let tmp = TempDir::new().unwrap();
    let config = tmp.path().join("run.toml");
    fs::write(
        &config,
        format!(
            "[dataset]\nkind = \"ml100k\"\npath = {:?}\n\n[model]\ndim = 20\n\n[train]\nmax_epochs = 3\n\n[output]\ndir = \"out\"\n",
            data.display().to_string()
        ),
    )
    .unwrap();
    let cfg = config.to_str().unwrap();
    let out = amcf(&["train", "--config", cfg]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let m = manifest(&tmp.path().join("out"));
    assert_eq!((m["stats"]["ratings"].as_u64(), m["stats"]["users"].as_u64()), (Some(100_000), Some(943)));
    let ckpt = tmp.path().join("out").join("model.json");
    let out = amcf(&["evaluate", "--config", cfg, "--checkpoint", ckpt.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));

    let reports: Vec<serde_json::Value> =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("out").join("eval.json")).unwrap()).unwrap();
    for r in &reports[..2] {
        assert!(r["rmse"].as_f64().unwrap().is_finite());
        for key in ["T1@3", "T3@5"] {
            assert!(r["tmk"][key].as_f64().is_some(), "{key}");
        }
        for key in ["B1@3", "B3@5"] {
            assert!(r["bmk"][key].as_f64().is_some(), "{key}");
        }
        assert!(r["score_s"].as_f64().is_some());
    }
    let random = &reports[2];
    assert_eq!(random["model"], "random");
    assert!((random["tmk"]["T1@3"].as_f64().unwrap() - 0.167).abs() < 5e-4);
    assert!((random["bmk"]["B3@5"].as_f64().unwrap() - 0.278).abs() < 5e-4);

    // two users who both rated Star Wars (item 50) highly
    let ckpt = ckpt.to_str().unwrap();
    for user in ["1", "2"] {
        let out = amcf(&["explain", "--checkpoint", ckpt, "--user", user, "--item", "50"]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        let rows = parse_rows(&stdout(&out));
        // Action, Adventure, Romance, Sci-Fi, War
        assert_eq!(rows.len(), 5 + 1);
    }
}
