//! Rating logs, item aspect metadata, and train/validation/test splits.
//!
//! Two MovieLens wire formats are supported:
//!
//! * ML-100K: `u.data` (`user\titem\trating\ttimestamp`) and `u.item`
//!   (`id|title|release|video release|url|19 genre flags`). The first genre
//!   flag is `unknown`; it is dropped, so an item flagged only `unknown` gets
//!   an all-zero aspect vector.
//! * ML-1M: `ratings.dat` (`UserID::MovieID::Rating::Timestamp`) and
//!   `movies.dat` (`MovieID::Title::Genre1|Genre2|...`).
//!
//! Raw ids are remapped to dense 0-based indices in ascending raw-id order.
//! Only items that occur in the rating log get an index.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, Read};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// The 18 MovieLens genres, in the datasets' canonical order.
pub const MOVIELENS_GENRES: [&str; 18] = [
    "Action",
    "Adventure",
    "Animation",
    "Children's",
    "Comedy",
    "Crime",
    "Documentary",
    "Drama",
    "Fantasy",
    "Film-Noir",
    "Horror",
    "Musical",
    "Mystery",
    "Romance",
    "Sci-Fi",
    "Thriller",
    "War",
    "Western",
];

/// Environment variable naming the directory that holds `ml-100k/`, `ml-1m/`, ...
pub const DATA_ROOT_ENV: &str = "AMCF_DATA_ROOT";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{file}:{line}: {message}")]
    Format {
        file: String,
        line: usize,
        message: String,
    },
    #[error("{file}:{line}: unknown genre {name:?}")]
    UnknownGenre {
        file: String,
        line: usize,
        name: String,
    },
    #[error("rating log is empty")]
    Empty,
    #[error("split fractions {0:?} must be non-negative, finite and sum to 1")]
    InvalidFractions([f64; 3]),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// One `(user, item, rating)` observation, with dense indices.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interaction {
    pub user: u32,
    pub item: u32,
    pub rating: f64,
    /// Seconds since the epoch. Kept for provenance; the model ignores it.
    pub timestamp: i64,
}

/// Sorted raw ids; the position of a raw id is its dense index.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdMap {
    raw: Vec<u64>,
}

impl IdMap {
    pub fn from_raw(mut raw: Vec<u64>) -> Self {
        raw.sort_unstable();
        raw.dedup();
        Self { raw }
    }

    pub fn index_of(&self, raw: u64) -> Option<usize> {
        self.raw.binary_search(&raw).ok()
    }

    pub fn raw_id(&self, index: usize) -> Option<u64> {
        self.raw.get(index).copied()
    }

    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }
}

/// Aspect names plus one multi-hot vector per dense item index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AspectCatalog {
    aspect_names: Vec<String>,
    item_aspects: Vec<Vec<u8>>,
}

impl AspectCatalog {
    /// Panics if any row has the wrong length or a non-binary entry.
    pub fn new(aspect_names: Vec<String>, item_aspects: Vec<Vec<u8>>) -> Self {
        let m = aspect_names.len();
        for (item, row) in item_aspects.iter().enumerate() {
            assert_eq!(row.len(), m, "item {item} has {} aspect flags, expected {m}", row.len());
            assert!(row.iter().all(|&x| x <= 1), "item {item} has a non-binary aspect flag");
        }
        Self {
            aspect_names,
            item_aspects,
        }
    }

    pub fn aspect_count(&self) -> usize {
        self.aspect_names.len()
    }

    pub fn item_count(&self) -> usize {
        self.item_aspects.len()
    }

    pub fn aspect_names(&self) -> &[String] {
        &self.aspect_names
    }

    pub fn multi_hot(&self, item: usize) -> &[u8] {
        &self.item_aspects[item]
    }

    /// Multi-hot vector as reals, or `None` for an index outside the catalog.
    pub fn multi_hot_f64(&self, item: usize) -> Option<Vec<f64>> {
        self.item_aspects
            .get(item)
            .map(|row| row.iter().map(|&x| f64::from(x)).collect())
    }

    /// Indices of the aspects item `item` has.
    pub fn active(&self, item: usize) -> Vec<usize> {
        self.item_aspects[item]
            .iter()
            .enumerate()
            .filter(|(_, &x)| x == 1)
            .map(|(k, _)| k)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub ratings: usize,
    pub users: usize,
    pub items: usize,
    pub aspects: usize,
}

/// A parsed rating log with its catalog and id maps.
#[derive(Debug, Clone)]
pub struct RatingData {
    pub interactions: Vec<Interaction>,
    pub catalog: AspectCatalog,
    pub users: IdMap,
    pub items: IdMap,
    /// Rated items that had no metadata row; they were given all-zero aspects.
    pub missing_items: usize,
}

impl RatingData {
    pub fn stats(&self) -> DatasetStats {
        DatasetStats {
            ratings: self.interactions.len(),
            users: self.users.len(),
            items: self.items.len(),
            aspects: self.catalog.aspect_count(),
        }
    }

    pub fn max_observed_rating(&self) -> f64 {
        self.interactions
            .iter()
            .map(|x| x.rating)
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

struct RawRating {
    user: u64,
    item: u64,
    rating: f64,
    timestamp: i64,
}

fn open(path: &Path) -> Result<String> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|source| DataError::Io {
            path: path.to_path_buf(),
            source,
        })?;
    Ok(String::from_utf8_lossy(&bytes).into_owned())
}

fn file_label(path: &Path) -> String {
    path.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

fn format_err(file: &str, line: usize, message: impl Into<String>) -> DataError {
    DataError::Format {
        file: file.to_string(),
        line,
        message: message.into(),
    }
}

fn parse_field<T: std::str::FromStr>(raw: &str, what: &str, file: &str, line: usize) -> Result<T> {
    raw.trim()
        .parse()
        .map_err(|_| format_err(file, line, format!("bad {what} {raw:?}")))
}

fn parse_ratings(text: &str, file: &str, delimiter: &str) -> Result<Vec<RawRating>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate().map(|(i, l)| (i + 1, l)) {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(delimiter).collect();
        if fields.len() != 4 {
            return Err(format_err(
                file,
                lineno,
                format!("expected 4 fields, found {}", fields.len()),
            ));
        }
        let rating: f64 = parse_field(fields[2], "rating", file, lineno)?;
        if !rating.is_finite() || rating < 1.0 {
            return Err(format_err(file, lineno, format!("rating {rating} below 1")));
        }
        out.push(RawRating {
            user: parse_field(fields[0], "user id", file, lineno)?,
            item: parse_field(fields[1], "item id", file, lineno)?,
            rating,
            timestamp: parse_field(fields[3], "timestamp", file, lineno)?,
        });
    }
    if out.is_empty() {
        return Err(DataError::Empty);
    }
    Ok(out)
}

fn assemble(ratings: Vec<RawRating>, metadata: HashMap<u64, Vec<u8>>, aspect_names: Vec<String>) -> RatingData {
    let users = IdMap::from_raw(ratings.iter().map(|r| r.user).collect());
    let items = IdMap::from_raw(ratings.iter().map(|r| r.item).collect());
    let m = aspect_names.len();
    let mut missing_items = 0;
    let item_aspects = items
        .raw
        .iter()
        .map(|raw| match metadata.get(raw) {
            Some(row) => row.clone(),
            None => {
                missing_items += 1;
                vec![0; m]
            }
        })
        .collect();
    let interactions = ratings
        .iter()
        .map(|r| Interaction {
            user: users.index_of(r.user).expect("user indexed") as u32,
            item: items.index_of(r.item).expect("item indexed") as u32,
            rating: r.rating,
            timestamp: r.timestamp,
        })
        .collect();
    RatingData {
        interactions,
        catalog: AspectCatalog::new(aspect_names, item_aspects),
        users,
        items,
        missing_items,
    }
}

fn genre_names() -> Vec<String> {
    MOVIELENS_GENRES.iter().map(|s| s.to_string()).collect()
}

/// Parses ML-100K from the contents of `u.data` and `u.item`.
pub fn parse_ml100k_str(ratings: &str, items: &str) -> Result<RatingData> {
    let ratings = parse_ratings(ratings, "u.data", "\t")?;
    let mut metadata = HashMap::new();
    for (lineno, line) in items.lines().enumerate().map(|(i, l)| (i + 1, l)) {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('|').collect();
        if fields.len() < 5 + 19 {
            return Err(format_err(
                "u.item",
                lineno,
                format!("expected at least 24 fields, found {}", fields.len()),
            ));
        }
        let id: u64 = parse_field(fields[0], "item id", "u.item", lineno)?;
        let flags = &fields[fields.len() - 19..];
        let mut row = Vec::with_capacity(18);
        // flags[0] is "unknown"
        for flag in &flags[1..] {
            match flag.trim() {
                "0" => row.push(0),
                "1" => row.push(1),
                other => {
                    return Err(format_err("u.item", lineno, format!("bad genre flag {other:?}")));
                }
            }
        }
        metadata.insert(id, row);
    }
    Ok(assemble(ratings, metadata, genre_names()))
}

/// Parses ML-100K `u.data` / `u.item` files.
pub fn parse_ml100k(ratings_path: &Path, items_path: &Path) -> Result<RatingData> {
    let ratings = open(ratings_path)?;
    let items = open(items_path)?;
    parse_ml100k_str(&ratings, &items).map_err(|e| relabel(e, ratings_path, items_path))
}

/// Parses ML-1M from the contents of `ratings.dat` and `movies.dat`.
pub fn parse_ml1m_str(ratings: &str, movies: &str) -> Result<RatingData> {
    let ratings = parse_ratings(ratings, "ratings.dat", "::")?;
    let names = genre_names();
    let mut metadata = HashMap::new();
    for (lineno, line) in movies.lines().enumerate().map(|(i, l)| (i + 1, l)) {
        if line.trim().is_empty() {
            continue;
        }
        let (id, rest) = line
            .split_once("::")
            .ok_or_else(|| format_err("movies.dat", lineno, "missing '::' separator"))?;
        let (_, genres) = rest
            .rsplit_once("::")
            .ok_or_else(|| format_err("movies.dat", lineno, "expected MovieID::Title::Genres"))?;
        let id: u64 = parse_field(id, "movie id", "movies.dat", lineno)?;
        let mut row = vec![0u8; names.len()];
        for genre in genres.trim().split('|').filter(|g| !g.is_empty()) {
            let k = names
                .iter()
                .position(|n| n == genre)
                .ok_or_else(|| DataError::UnknownGenre {
                    file: "movies.dat".into(),
                    line: lineno,
                    name: genre.to_string(),
                })?;
            row[k] = 1;
        }
        metadata.insert(id, row);
    }
    Ok(assemble(ratings, metadata, names))
}

/// Parses ML-1M `ratings.dat` / `movies.dat` files.
pub fn parse_ml1m(ratings_path: &Path, movies_path: &Path) -> Result<RatingData> {
    let ratings = open(ratings_path)?;
    let movies = open(movies_path)?;
    parse_ml1m_str(&ratings, &movies).map_err(|e| relabel(e, ratings_path, movies_path))
}

/// Swap the bare file labels used by the `_str` parsers for full paths.
fn relabel(err: DataError, ratings: &Path, meta: &Path) -> DataError {
    let full = |file: String| {
        if file == file_label(ratings) {
            ratings.display().to_string()
        } else if file == file_label(meta) {
            meta.display().to_string()
        } else {
            file
        }
    };
    match err {
        DataError::Format { file, line, message } => DataError::Format {
            file: full(file),
            line,
            message,
        },
        DataError::UnknownGenre { file, line, name } => DataError::UnknownGenre {
            file: full(file),
            line,
            name,
        },
        other => other,
    }
}

/// Reads every line of `reader`, for callers holding something other than a path.
pub fn read_all(mut reader: impl BufRead) -> std::io::Result<String> {
    let mut bytes = Vec::new();
    reader.read_to_end(&mut bytes)?;
    Ok(String::from_utf8_lossy(&bytes).into_owned())
}

/// Directory named by `AMCF_DATA_ROOT`, if set.
pub fn data_root() -> Option<PathBuf> {
    std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from)
}

/// Train / validation / test fractions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

impl SplitFractions {
    pub fn new(train: f64, validation: f64, test: f64) -> Result<Self> {
        let f = [train, validation, test];
        let ok = f.iter().all(|x| x.is_finite() && *x >= 0.0) && (f.iter().sum::<f64>() - 1.0).abs() < 1e-9;
        if !ok {
            return Err(DataError::InvalidFractions(f));
        }
        Ok(Self {
            train,
            validation,
            test,
        })
    }
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.85,
            validation: 0.05,
            test: 0.10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<Interaction>,
    pub validation: Vec<Interaction>,
    pub test: Vec<Interaction>,
    pub seed: u64,
    pub fractions: SplitFractions,
}

/// Assigns each interaction independently to train, validation or test with
/// one uniform draw from a ChaCha8 stream seeded by `seed`. Log order is kept
/// within each part.
pub fn split(interactions: &[Interaction], fractions: SplitFractions, seed: u64) -> DatasetSplit {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cut_train = fractions.train;
    let cut_val = fractions.train + fractions.validation;
    let mut out = DatasetSplit {
        train: Vec::new(),
        validation: Vec::new(),
        test: Vec::new(),
        seed,
        fractions,
    };
    for x in interactions {
        let draw: f64 = rng.random();
        if draw < cut_train || fractions.validation + fractions.test == 0.0 {
            out.train.push(*x);
        } else if draw < cut_val || fractions.test == 0.0 {
            out.validation.push(*x);
        } else {
            out.test.push(*x);
        }
    }
    out
}
