use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use amcf::data::{self, DatasetStats, RatingData};
use amcf::eval::{self, EvalReport};
use amcf::model::{AmcfModel, Recommender};
use amcf::training::{history_csv, train_model, StepInfo, TrainError};
use amcf::data::split;
use amcf::fit_lr_baseline;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{DatasetKind, RunConfig};
use crate::CliError;

pub const CHECKPOINT_FILE: &str = "model.json";
pub const HISTORY_FILE: &str = "history.csv";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const EVAL_JSON_FILE: &str = "eval.json";
pub const EVAL_CSV_FILE: &str = "eval.csv";

const MANIFEST_FORMAT: &str = "amcf-run-manifest/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub seed: u64,
    pub config_hash: String,
    /// Effective configuration, overrides applied and paths resolved.
    pub config: String,
    pub stats: DatasetStats,
    pub checkpoint_sha256: String,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub rejitters: usize,
    /// Seconds since the Unix epoch. The only non-deterministic field.
    pub created_unix: u64,
}

fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::Io(format!("cannot read {}: {e}", path.display())))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn write(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::Io(format!("cannot write {}: {e}", path.display())))
}

pub fn load_dataset(cfg: &RunConfig) -> Result<RatingData, CliError> {
    let dir = cfg.dataset_dir();
    let (ratings, meta) = cfg.dataset.kind.files();
    let (ratings, meta) = (dir.join(ratings), dir.join(meta));
    for p in [&ratings, &meta] {
        if !p.is_file() {
            return Err(CliError::Data(format!("missing data file {}", p.display())));
        }
    }
    let parsed = match cfg.dataset.kind {
        DatasetKind::Ml100k => data::parse_ml100k(&ratings, &meta),
        DatasetKind::Ml1m => data::parse_ml1m(&ratings, &meta),
    };
    let data = parsed.map_err(|e| CliError::Data(e.to_string()))?;
    let top = data.max_observed_rating();
    if top > cfg.model.max_rating {
        return Err(CliError::Data(format!(
            "{}: rating {top} exceeds model.max_rating {}",
            ratings.display(),
            cfg.model.max_rating
        )));
    }
    Ok(data)
}

fn train_error(e: TrainError) -> CliError {
    match e {
        TrainError::NonFiniteGradient { .. } => CliError::TrainAbort(e.to_string()),
        TrainError::InvalidConfig { field, message } => CliError::Config(format!("train.{field}: {message}")),
        TrainError::EmptyTrain => CliError::Data(e.to_string()),
        TrainError::Model(m) => CliError::Config(m.to_string()),
    }
}

pub fn train(cfg: &RunConfig) -> Result<(), CliError> {
    let data = load_dataset(cfg)?;
    let split = split(&data.interactions, cfg.fractions()?, cfg.split.seed);
    let model = AmcfModel::new(
        cfg.hyper(data.catalog.aspect_count()),
        data.catalog.clone(),
        data.users.clone(),
        data.items.clone(),
        &split.train,
        cfg.train.init_std,
        cfg.train.seed,
    )
    .map_err(|e| CliError::Config(e.to_string()))?;
    let stats = data.stats();
    eprintln!(
        "{} ratings, {} users, {} items, {} aspects; split {}/{}/{}",
        stats.ratings,
        stats.users,
        stats.items,
        stats.aspects,
        split.train.len(),
        split.validation.len(),
        split.test.len()
    );
    let mut last_epoch = 0;
    let outcome = train_model(model, &split, &cfg.train, &mut |info: StepInfo, _: &AmcfModel| {
        if info.epoch != last_epoch {
            last_epoch = info.epoch;
            eprintln!("epoch {}", info.epoch);
        }
    })
    .map_err(train_error)?;
    if let Some(r) = outcome.history.last() {
        eprintln!(
            "stopped after {} epochs, best {} (last l_pred {:.4}, l_int {:.4})",
            r.epoch, outcome.best_epoch, r.l_pred, r.l_int
        );
    }

    let out = &cfg.output.dir;
    fs::create_dir_all(out).map_err(|e| CliError::Io(format!("cannot create {}: {e}", out.display())))?;
    let ckpt = out.join(CHECKPOINT_FILE);
    write(&ckpt, &outcome.model.to_json())?;
    write(&out.join(HISTORY_FILE), &history_csv(&outcome.history))?;
    let manifest = Manifest {
        format: MANIFEST_FORMAT.into(),
        seed: cfg.train.seed,
        config_hash: cfg.training_hash(),
        config: cfg.to_toml(),
        stats,
        checkpoint_sha256: sha256_file(&ckpt)?,
        best_epoch: outcome.best_epoch,
        epochs_run: outcome.history.len(),
        rejitters: outcome.rejitters,
        created_unix: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write(&out.join(MANIFEST_FILE), &text)?;
    println!("{}", ckpt.display());
    Ok(())
}

fn manifest_path(checkpoint: &Path) -> PathBuf {
    checkpoint.parent().map(Path::to_path_buf).unwrap_or_default().join(MANIFEST_FILE)
}

pub fn read_manifest(checkpoint: &Path) -> Result<Manifest, CliError> {
    let path = manifest_path(checkpoint);
    let text = fs::read_to_string(&path)
        .map_err(|e| CliError::Mismatch(format!("cannot read manifest {}: {e}", path.display())))?;
    let m: Manifest = serde_json::from_str(&text)
        .map_err(|e| CliError::Mismatch(format!("malformed manifest {}: {e}", path.display())))?;
    if m.format != MANIFEST_FORMAT {
        return Err(CliError::Mismatch(format!("{}: unsupported format {:?}", path.display(), m.format)));
    }
    Ok(m)
}

fn load_checkpoint(path: &Path) -> Result<AmcfModel, CliError> {
    AmcfModel::load(path).map_err(|e| CliError::Mismatch(e.to_string()))
}

/// Config columns appended to every evaluation CSV row.
const CONFIG_COLUMNS: [&str; 7] = ["seed", "lambda", "dim", "attn_mode", "mask_mode", "shield", "config_hash"];

fn mode_name<T: Serialize>(v: &T) -> String {
    serde_json::to_value(v).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default()
}

fn config_cells(cfg: &RunConfig) -> Vec<String> {
    vec![
        cfg.train.seed.to_string(),
        cfg.train.lambda.to_string(),
        cfg.model.dim.to_string(),
        mode_name(&cfg.model.attn_mode),
        mode_name(&cfg.model.mask_mode),
        cfg.train.shield.to_string(),
        cfg.training_hash(),
    ]
}

pub fn evaluate(cfg: &RunConfig, checkpoint: &Path) -> Result<(), CliError> {
    let manifest = read_manifest(checkpoint)?;
    let hash = cfg.training_hash();
    if manifest.config_hash != hash {
        return Err(CliError::Mismatch(format!(
            "config hash {hash} does not match manifest {} ({})",
            manifest.config_hash,
            manifest_path(checkpoint).display()
        )));
    }
    let sha = sha256_file(checkpoint).map_err(|e| CliError::Mismatch(e.to_string()))?;
    if sha != manifest.checkpoint_sha256 {
        return Err(CliError::Mismatch(format!("{} differs from the checkpoint recorded in its manifest", checkpoint.display())));
    }
    let model = load_checkpoint(checkpoint)?;
    let data = load_dataset(cfg)?;
    if data.stats() != manifest.stats {
        return Err(CliError::Mismatch(format!(
            "dataset stats {:?} differ from manifest {:?}",
            data.stats(),
            manifest.stats
        )));
    }
    let split = split(&data.interactions, cfg.fractions()?, cfg.split.seed);
    let max_rating = cfg.model.max_rating;
    let truth = eval::surrogate_truth(&split.train, &data.catalog, data.users.len(), max_rating);
    let lr = fit_lr_baseline(&split.train, &data.catalog, data.users.len(), cfg.eval.lr_ridge, max_rating)
        .map_err(|e| CliError::Config(format!("eval.lr_ridge: {e}")))?;
    let provenance = serde_json::to_value(cfg).expect("config serializes");
    let pairs = &cfg.eval.pairs;
    let bad_pairs = |e: eval::EvalError| CliError::Config(format!("eval.pairs: {e}"));
    let reports = vec![
        EvalReport::evaluate("amcf", &model, &truth, &split.test, pairs, provenance.clone()).map_err(bad_pairs)?,
        EvalReport::evaluate("lr", &lr, &truth, &split.test, pairs, provenance.clone()).map_err(bad_pairs)?,
        EvalReport::random(data.catalog.aspect_count(), pairs, provenance),
    ];

    let out = &cfg.output.dir;
    fs::create_dir_all(out).map_err(|e| CliError::Io(format!("cannot create {}: {e}", out.display())))?;
    let json = serde_json::to_string_pretty(&reports).expect("reports serialize");
    write(&out.join(EVAL_JSON_FILE), &(json + "\n"))?;

    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = EvalReport::csv_header(pairs);
    header.extend(CONFIG_COLUMNS.map(String::from));
    w.write_record(&header).map_err(csv_err)?;
    let cells = config_cells(cfg);
    for r in &reports {
        let mut row = r.csv_row(pairs);
        row.extend(cells.iter().cloned());
        w.write_record(&row).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Io(e.to_string()))?;
    write(&out.join(EVAL_CSV_FILE), &String::from_utf8(bytes).expect("csv is utf-8"))?;

    for r in &reports {
        let rmse = r.rmse.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into());
        let recalls: Vec<String> = header[2..2 + 2 * pairs.len()]
            .iter()
            .map(|k| format!("{k} {:.3}", r.recall(k).unwrap_or(f64::NAN)))
            .collect();
        println!("{:<6} rmse {rmse}  {}  score_s {:.3}", r.model, recalls.join("  "), r.score_s);
    }
    println!(
        "lr/amcf general preference agreement (mean cosine) {:.3}",
        eval::preference_agreement(&model, &lr, data.users.len())
    );
    Ok(())
}

fn csv_err(e: csv::Error) -> CliError {
    CliError::Io(e.to_string())
}

/// `(aspect name, value)` rows as printed by `explain`.
pub fn explanation(model: &AmcfModel, user_raw: u64, item_raw: Option<u64>) -> Result<Vec<(String, f64)>, CliError> {
    let user = model
        .users
        .index_of(user_raw)
        .ok_or_else(|| CliError::UnknownId(format!("unknown user id {user_raw}")))?;
    if model.is_cold_user(user) {
        return Err(CliError::UnknownId(format!("user {user_raw} has no training ratings")));
    }
    let names = model.catalog.aspect_names();
    let mut rows: Vec<(String, f64)> = match item_raw {
        None => {
            let p = model.general_preference(user).l1_normalized();
            names.iter().cloned().zip(p).collect()
        }
        Some(raw) => {
            let item = model
                .items
                .index_of(raw)
                .ok_or_else(|| CliError::UnknownId(format!("unknown item id {raw}")))?;
            if model.is_cold_item(item) {
                return Err(CliError::UnknownId(format!("item {raw} has no training ratings")));
            }
            let p = model.specific_preference(user, item).l1_normalized();
            model.attended_aspects(item).into_iter().map(|k| (names[k].clone(), p[k])).collect()
        }
    };
    rows.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Ok(rows)
}

pub fn explain(checkpoint: &Path, user_raw: u64, item_raw: Option<u64>) -> Result<(), CliError> {
    let model = load_checkpoint(checkpoint)?;
    let rows = explanation(&model, user_raw, item_raw)?;
    let mut w = csv::Writer::from_writer(std::io::stdout().lock());
    w.write_record(["aspect", "value"]).map_err(csv_err)?;
    for (name, value) in &rows {
        w.write_record([name.as_str(), &value.to_string()]).map_err(csv_err)?;
    }
    if let Some(raw) = item_raw {
        let user = model.users.index_of(user_raw).expect("checked above");
        let item = model.items.index_of(raw).expect("checked above");
        w.write_record(["predicted_rating", &model.predict_clamped(user, item).to_string()])
            .map_err(csv_err)?;
    }
    w.flush().map_err(|e| CliError::Io(e.to_string()))
}

/// Merges evaluation CSVs with identical headers and appends one mean row
/// per model over the metric columns.
pub fn report(inputs: &[PathBuf], out: Option<&Path>) -> Result<(), CliError> {
    let mut header: Option<csv::StringRecord> = None;
    let mut rows: Vec<csv::StringRecord> = Vec::new();
    for path in inputs {
        let mut r = csv::Reader::from_path(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        let h = r.headers().map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?.clone();
        match &header {
            None => header = Some(h),
            Some(first) if *first != h => {
                return Err(CliError::Data(format!("{}: header differs from {}", path.display(), inputs[0].display())));
            }
            Some(_) => {}
        }
        for rec in r.records() {
            rows.push(rec.map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?);
        }
    }
    let header = header.ok_or_else(|| CliError::Config("report needs at least one input".into()))?;
    let metric_end = header.iter().position(|h| h == "degenerate_users").map_or(header.len(), |i| i + 1);

    let mut by_model: BTreeMap<String, Vec<&csv::StringRecord>> = BTreeMap::new();
    for r in &rows {
        by_model.entry(r.get(0).unwrap_or_default().to_string()).or_default().push(r);
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(&header).map_err(csv_err)?;
    for r in &rows {
        w.write_record(r).map_err(csv_err)?;
    }
    for (model, group) in &by_model {
        let mut mean = vec![format!("{model} (mean of {})", group.len())];
        for col in 1..header.len() {
            let cell = if col < metric_end {
                let vals: Option<Vec<f64>> = group.iter().map(|r| r.get(col).and_then(|s| s.parse().ok())).collect();
                vals.map(|v| (v.iter().sum::<f64>() / v.len() as f64).to_string()).unwrap_or_default()
            } else {
                String::new()
            };
            mean.push(cell);
        }
        w.write_record(&mean).map_err(csv_err)?;
    }
    let text = String::from_utf8(w.into_inner().map_err(|e| CliError::Io(e.to_string()))?).expect("csv is utf-8");
    match out {
        Some(p) => write(p, &text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}
