//! Output files. Every writer overwrites its target and is a pure function
//! of its inputs, so reruns with the same seed produce identical bytes.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::metrics::{ewma, DailyMetrics};
use crate::training::EpochTrace;

use super::config::ExperimentConfig;
use super::search::Trial;
use super::slide::{SlideDay, SlideRow};
use super::sweep::SweepRow;

/// An output directory, created on open.
#[derive(Clone, Debug)]
pub struct OutDir {
    root: PathBuf,
}

impl OutDir {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        std::fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        Ok(OutDir { root })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn csv_writer(&self, name: &str) -> Result<(csv::Writer<std::fs::File>, PathBuf)> {
        let path = self.path(name);
        let file = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        Ok((csv::Writer::from_writer(file), path))
    }

    pub fn write_rows<T: Serialize>(&self, name: &str, rows: &[T]) -> Result<PathBuf> {
        let (mut w, path) = self.csv_writer(name)?;
        for r in rows {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn write_sweep(&self, rows: &[SweepRow]) -> Result<PathBuf> {
        self.write_rows("sweep.csv", rows)
    }

    pub fn write_slide(&self, rows: &[SlideRow]) -> Result<PathBuf> {
        self.write_rows("slide.csv", rows)
    }

    pub fn write_search(&self, trials: &[Trial]) -> Result<PathBuf> {
        self.write_rows("search.csv", trials)
    }

    pub fn write_slide_days(&self, days: &[SlideDay]) -> Result<PathBuf> {
        let (mut w, path) = self.csv_writer("slide_days.csv")?;
        w.write_record([
            "model",
            "day",
            "train_first_day",
            "train_last_day",
            "map_u",
            "map_i",
            "map_sym",
        ])?;
        for d in days {
            w.write_record([
                d.model.tag().to_owned(),
                d.day.to_string(),
                d.train_days.0.to_string(),
                d.train_days.1.to_string(),
                d.map_u.to_string(),
                d.map_i.to_string(),
                d.map_sym.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    /// Daily series with the EWMA of the symmetrized mAP. With one unlabeled
    /// series the columns are `day,map_u,map_i,map_sym,ewma_map_sym`; labeled
    /// series get leading `model,series` columns.
    pub fn write_daily(&self, series: &[DailySeries], alpha: f64) -> Result<PathBuf> {
        let (mut w, path) = self.csv_writer("daily.csv")?;
        let labeled = !(series.len() == 1 && series[0].model.is_empty());
        let mut header = vec!["day", "map_u", "map_i", "map_sym", "ewma_map_sym"];
        if labeled {
            header.splice(0..0, ["model", "series"]);
        }
        w.write_record(&header)?;
        for s in series {
            let sym: Vec<f64> = s.days.iter().map(|d| d.map_sym).collect();
            for (d, smooth) in s.days.iter().zip(ewma(&sym, alpha)) {
                let mut record = vec![
                    d.day.to_string(),
                    d.map_u.to_string(),
                    d.map_i.to_string(),
                    d.map_sym.to_string(),
                    smooth.to_string(),
                ];
                if labeled {
                    record.splice(0..0, [s.model.clone(), s.series.clone()]);
                }
                w.write_record(&record)?;
            }
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    /// Per-epoch training trace; labeled traces get leading `model,window_days` columns.
    pub fn write_trace(&self, traces: &[LabeledTrace]) -> Result<PathBuf> {
        let (mut w, path) = self.csv_writer("trace.csv")?;
        let labeled = !(traces.len() == 1 && traces[0].model.is_empty());
        let mut header = vec![
            "epoch",
            "train_loss",
            "valid_map_u",
            "valid_map_i",
            "valid_map_sym",
            "seconds",
        ];
        if labeled {
            header.splice(0..0, ["model", "window_days"]);
        }
        w.write_record(&header)?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for t in traces {
            for e in &t.epochs {
                let mut record = vec![
                    e.epoch.to_string(),
                    e.train_loss.to_string(),
                    opt(e.valid_map_u),
                    opt(e.valid_map_i),
                    opt(e.valid_map_sym),
                    e.seconds.to_string(),
                ];
                if labeled {
                    record.splice(0..0, [t.model.clone(), t.window_days.to_string()]);
                }
                w.write_record(&record)?;
            }
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<PathBuf> {
        let path = self.path(name);
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    /// Writes `manifest.json` listing `outputs` (file names inside this directory).
    pub fn write_manifest(&self, command: &str, cfg: &ExperimentConfig, outputs: &[PathBuf]) -> Result<PathBuf> {
        let mut files: Vec<String> = outputs
            .iter()
            .filter_map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
            .collect();
        files.sort();
        files.dedup();
        let manifest = Manifest {
            command: command.to_owned(),
            seed: cfg.seed,
            input_hash: content_hash(&cfg.input_bytes()?),
            outputs: files,
            config: cfg.clone(),
        };
        self.write_json("manifest.json", &manifest)
    }
}

/// A daily metric series; `model` empty for a single unlabeled series.
#[derive(Clone, Debug, Default)]
pub struct DailySeries {
    pub model: String,
    pub series: String,
    pub days: Vec<DailyMetrics>,
}

#[derive(Clone, Debug, Default)]
pub struct LabeledTrace {
    pub model: String,
    pub window_days: u32,
    pub epochs: Vec<EpochTrace>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub command: String,
    pub seed: u64,
    /// Git-style object hash of the input data.
    pub input_hash: String,
    pub outputs: Vec<String>,
    pub config: ExperimentConfig,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// `sha256:` followed by the hex SHA-256 of `blob <len>\0<bytes>`, as git computes object ids.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    let hex: String = h.finalize().iter().map(|b| format!("{b:02x}")).collect();
    format!("sha256:{hex}")
}
