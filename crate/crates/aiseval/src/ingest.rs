//! Loading test pools from disk.
//!
//! CSV pools carry a header row. Recognized columns:
//!
//! | column              | meaning                                          |
//! |---------------------|--------------------------------------------------|
//! | `id`                | unique item id (required)                        |
//! | `score`             | binary pools: score for the positive class       |
//! | `score_0..score_C`  | multi-class scores (probabilities or logits)     |
//! | `label`             | ground-truth label (experiments only)            |
//! | `weight`            | unnormalized marginal `p(x)` (uniform if absent) |
//! | `display`           | text shown to annotators                         |
//!
//! Rows that are not already distributions go through a softmax; all rows
//! are floored so every class keeps some prior mass. JSON pools are the
//! serialized [`TestPool`].

use std::fs;
use std::path::{Path, PathBuf};

use aiseval_core::measures::{Measure, MeasureSpec};
use aiseval_core::pool::{binary_scores, normalize_scores, PoolItem, TestPool};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{io_err, Error, Result};

#[derive(Clone, Copy, Debug, Default)]
pub struct CsvOptions {
    /// Treat scores as logits even when they already look like
    /// probabilities.
    pub force_softmax: bool,
}

pub fn load_pool(path: &Path) -> Result<TestPool> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("json") => {
            let text = fs::read_to_string(path).map_err(io_err(path))?;
            Ok(serde_json::from_str(&text)?)
        }
        _ => load_csv_pool(path, CsvOptions::default()),
    }
}

/// Saves as CSV for a `.csv` extension, JSON otherwise.
pub fn save_pool(pool: &TestPool, path: &Path) -> Result<()> {
    if path.extension().and_then(|e| e.to_str()) == Some("csv") {
        let file = fs::File::create(path).map_err(io_err(path))?;
        return write_csv_pool(pool, std::io::BufWriter::new(file));
    }
    let text = serde_json::to_string(pool)?;
    fs::write(path, text).map_err(io_err(path))
}

/// Writes a pool as CSV (`id`, scores, `label`, `weight` when nonuniform,
/// `display`),
/// readable by [`read_csv_pool`].
pub fn write_csv_pool<W: std::io::Write>(pool: &TestPool, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let c = pool.n_classes();
    let mut header = vec!["id".to_string()];
    if c == 2 {
        header.push("score".into());
    } else {
        header.extend((0..c).map(|k| format!("score_{k}")));
    }
    let weighted = !pool.has_uniform_marginal();
    header.push("label".into());
    if weighted {
        header.push("weight".into());
    }
    header.push("display".into());
    w.write_record(&header)?;
    for (i, item) in pool.items().iter().enumerate() {
        let mut row = vec![item.id.clone()];
        if c == 2 {
            row.push(item.scores[1].to_string());
        } else {
            row.extend(item.scores.iter().map(f64::to_string));
        }
        row.push(item.true_label.map(|y| y.to_string()).unwrap_or_default());
        if weighted {
            row.push(pool.marginal(i).to_string());
        }
        row.push(item.display.clone().unwrap_or_default());
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::Format(e.to_string()))
}

pub fn load_csv_pool(path: &Path, options: CsvOptions) -> Result<TestPool> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    read_csv_pool(file, options)
}

pub fn read_csv_pool<R: std::io::Read>(reader: R, options: CsvOptions) -> Result<TestPool> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let id_col = col("id").ok_or_else(|| Error::Format("missing `id` column".into()))?;
    let label_col = col("label");
    let weight_col = col("weight");
    let display_col = col("display");
    let multi: Vec<usize> = (0..)
        .map_while(|c| col(&format!("score_{c}")))
        .collect();
    let single = col("score");
    let n_classes = match (single, multi.len()) {
        (Some(_), 0) => 2,
        (None, c) if c >= 2 => c,
        (Some(_), _) => return Err(Error::Format("use either `score` or `score_<c>` columns, not both".into())),
        _ => return Err(Error::Format("need a `score` column or at least two `score_<c>` columns".into())),
    };
    let mut items = Vec::new();
    let mut weights = Vec::new();
    for (row, record) in rdr.records().enumerate() {
        let record = record?;
        let field = |c: usize| record.get(c).unwrap_or("");
        let num = |c: usize, what: &str| -> Result<f64> {
            field(c)
                .parse::<f64>()
                .map_err(|_| Error::Format(format!("row {}: bad {what} `{}`", row + 1, field(c))))
        };
        let (scores, raw_score) = match single {
            Some(c) => {
                let s = num(c, "score")?;
                (binary_scores(s, options.force_softmax), s)
            }
            None => {
                let raw: Vec<f64> = multi.iter().map(|&c| num(c, "score")).collect::<Result<_>>()?;
                let scores = normalize_scores(&raw, options.force_softmax);
                // positive-class score for binary pools, top score otherwise
                let top = if n_classes == 2 {
                    scores[1]
                } else {
                    scores.iter().copied().fold(0.0, f64::max)
                };
                (scores, top)
            }
        };
        let true_label = match label_col.map(field) {
            None | Some("") => None,
            Some(s) => Some(
                s.parse::<usize>()
                    .map_err(|_| Error::Format(format!("row {}: bad label `{s}`", row + 1)))?,
            ),
        };
        if let Some(c) = weight_col {
            weights.push(num(c, "weight")?);
        }
        items.push(PoolItem {
            id: field(id_col).to_string(),
            display: display_col.map(|c| field(c).to_string()).filter(|s| !s.is_empty()),
            scores,
            raw_score,
            true_label,
        });
    }
    let pool = TestPool::new(n_classes, items)?;
    Ok(if weight_col.is_some() {
        pool.with_marginal(weights)?
    } else {
        pool
    })
}

/// SHA-256 of a file, hex encoded.
pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExactMeasure {
    pub pool_hash: String,
    pub measure: MeasureSpec,
    pub risk: Vec<f64>,
    pub value: Vec<Option<f64>>,
}

fn cache_path(pool_path: &Path) -> PathBuf {
    let mut name = pool_path.file_name().unwrap_or_default().to_os_string();
    name.push(".exact.json");
    pool_path.with_file_name(name)
}

/// The exact pool measure, cached next to the pool file keyed by its hash.
pub fn exact_measure_cached(
    pool_path: &Path,
    pool: &TestPool,
    spec: &MeasureSpec,
    measure: &Measure,
) -> Result<ExactMeasure> {
    let hash = file_hash(pool_path)?;
    let cache = cache_path(pool_path);
    if let Ok(text) = fs::read_to_string(&cache) {
        if let Ok(entries) = serde_json::from_str::<Vec<ExactMeasure>>(&text) {
            if let Some(hit) = entries.iter().find(|e| e.pool_hash == hash && &e.measure == spec) {
                return Ok(hit.clone());
            }
        }
    }
    let exact = exact_measure(pool, spec, measure, hash)?;
    let mut entries: Vec<ExactMeasure> = fs::read_to_string(&cache)
        .ok()
        .and_then(|t| serde_json::from_str(&t).ok())
        .unwrap_or_default();
    entries.retain(|e| e.pool_hash == exact.pool_hash && &e.measure != spec);
    entries.push(exact.clone());
    // a read-only pool directory only costs the cache
    let _ = fs::write(&cache, serde_json::to_string_pretty(&entries)?);
    Ok(exact)
}

pub fn exact_measure(pool: &TestPool, spec: &MeasureSpec, measure: &Measure, pool_hash: String) -> Result<ExactMeasure> {
    let labels = pool.true_labels()?;
    let (risk, value) = aiseval_core::measures::pool_measure(measure, &labels, &pool.marginal_vec());
    Ok(ExactMeasure {
        pool_hash,
        measure: spec.clone(),
        value,
        risk,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binary_csv() {
        let text = "id,score,label,display\na,0.9,1,first\nb,0.2,0,\n";
        let pool = read_csv_pool(text.as_bytes(), CsvOptions::default()).unwrap();
        assert_eq!(pool.len(), 2);
        assert_eq!(pool.n_classes(), 2);
        assert!((pool.item(0).scores[1] - 0.9).abs() < 1e-9);
        assert_eq!(pool.item(0).display.as_deref(), Some("first"));
        assert_eq!(pool.item(1).display, None);
        assert_eq!(pool.true_labels().unwrap(), vec![1, 0]);
    }

    #[test]
    fn logits_are_softmaxed() {
        let text = "id,score_0,score_1,score_2\na,2.0,-1.0,0.5\n";
        let pool = read_csv_pool(text.as_bytes(), CsvOptions::default()).unwrap();
        let s = &pool.item(0).scores;
        assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(s[0] > s[2] && s[2] > s[1]);
        assert!(pool.true_labels().is_err());
    }

    #[test]
    fn weights_become_marginal() {
        let text = "id,score,weight\na,0.9,1\nb,0.2,3\n";
        let pool = read_csv_pool(text.as_bytes(), CsvOptions::default()).unwrap();
        assert_eq!(pool.marginal_vec(), vec![0.25, 0.75]);
    }

    #[test]
    fn csv_round_trip() {
        let text = "id,score,label,weight,display\na,0.9,1,1,first\nb,0.2,0,3,\n";
        let pool = read_csv_pool(text.as_bytes(), CsvOptions::default()).unwrap();
        let mut out = Vec::new();
        write_csv_pool(&pool, &mut out).unwrap();
        let back = read_csv_pool(out.as_slice(), CsvOptions::default()).unwrap();
        assert_eq!(back.true_labels().unwrap(), vec![1, 0]);
        assert_eq!(back.marginal_vec(), pool.marginal_vec());
        assert_eq!(back.item(0).display.as_deref(), Some("first"));
        assert!((back.item(0).scores[1] - 0.9).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_rows() {
        assert!(read_csv_pool("id,score\na,x\n".as_bytes(), CsvOptions::default()).is_err());
        assert!(read_csv_pool("name,score\na,0.1\n".as_bytes(), CsvOptions::default()).is_err());
        assert!(read_csv_pool("id,score\na,0.1\na,0.2\n".as_bytes(), CsvOptions::default()).is_err());
    }
}
