//! Panel ingestion, synthetic market generation, normalization and windowing.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::relations::RelationTensor;
use crate::tensor::Rng;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("unknown indicator {name} in {file}")]
    UnknownIndicator { name: String, file: String },
    #[error("no dates common to all input files")]
    EmptyDateIntersection,
    #[error("{file}:{line}: {reason}")]
    BadRow {
        file: String,
        line: usize,
        reason: String,
    },
    #[error("leading gap in {file}: column {column} has no value before {date}")]
    LeadingGap {
        file: String,
        column: String,
        date: String,
    },
    #[error("io error on {file}: {source}")]
    Io {
        file: String,
        #[source]
        source: std::io::Error,
    },
    #[error("series too short: T={t} but L={l} and horizon={horizon} require at least {min}")]
    EmptyDataset {
        t: usize,
        l: usize,
        horizon: usize,
        min: usize,
    },
    #[error("{0}")]
    Invalid(String),
}

/// Indicator tensor for N stocks x P indicators x T trading days, row-major
/// with time as the fastest axis.
#[derive(Debug, Clone)]
pub struct FeaturePanel {
    pub symbols: Vec<String>,
    pub indicators: Vec<String>,
    pub values: Vec<f64>,
    pub timestamps: Vec<String>,
}

impl FeaturePanel {
    pub fn n(&self) -> usize {
        self.symbols.len()
    }

    pub fn p(&self) -> usize {
        self.indicators.len()
    }

    pub fn t(&self) -> usize {
        self.timestamps.len()
    }

    pub fn value(&self, n: usize, p: usize, t: usize) -> f64 {
        self.values[(n * self.p() + p) * self.t() + t]
    }

    /// Contiguous time series of one indicator for one stock.
    pub fn series(&self, n: usize, p: usize) -> &[f64] {
        let t = self.t();
        let off = (n * self.p() + p) * t;
        &self.values[off..off + t]
    }

    pub fn indicator_index(&self, name: &str) -> Option<usize> {
        self.indicators.iter().position(|i| i == name)
    }
}

/// One training window: clean history plus the target that extends it by the
/// prediction horizon, with a mask marking the future positions.
#[derive(Debug, Clone)]
pub struct TrainingInstance {
    pub start: usize,
    pub n: usize,
    pub p: usize,
    pub l: usize,
    pub horizon: usize,
    /// (N, P, L) slice of the panel.
    pub history: Vec<f64>,
    /// (N, P, L + horizon): history plus the future steps.
    pub target: Vec<f64>,
    /// Length L + horizon, trailing `horizon` entries set.
    pub future_mask: Vec<u8>,
}

impl TrainingInstance {
    pub fn target_len(&self) -> usize {
        self.l + self.horizon
    }

    /// Target with future positions zeroed (the conditioning input).
    pub fn masked_target(&self) -> Vec<f64> {
        let lp = self.target_len();
        let mut out = self.target.clone();
        for np in 0..self.n * self.p {
            for t in 0..lp {
                if self.future_mask[t] != 0 {
                    out[np * lp + t] = 0.0;
                }
            }
        }
        out
    }
}

// ---- CSV ingestion ----

/// Reads one CSV per symbol (`date,<ind1>,<ind2>,...`), aligns all files on
/// the intersection of their dates and forward-fills gaps per column.
pub fn ingest_csv(paths: &[PathBuf], indicator_spec: &[String]) -> Result<FeaturePanel, DataError> {
    if paths.is_empty() {
        return Err(DataError::Invalid("no input files".into()));
    }
    struct FileData {
        symbol: String,
        rows: BTreeMap<String, Vec<f64>>,
    }
    let mut files = Vec::new();
    for path in paths {
        let fname = path.display().to_string();
        let symbol = path
            .file_stem()
            .map(|s| s.to_string_lossy().to_string())
            .unwrap_or_else(|| fname.clone());
        let mut rdr = csv::Reader::from_path(path).map_err(|e| DataError::Io {
            file: fname.clone(),
            source: std::io::Error::new(std::io::ErrorKind::Other, e),
        })?;
        let headers: Vec<String> = rdr
            .headers()
            .map_err(|e| DataError::BadRow {
                file: fname.clone(),
                line: 1,
                reason: e.to_string(),
            })?
            .iter()
            .map(|h| h.trim().to_string())
            .collect();
        let mut col_of = Vec::with_capacity(indicator_spec.len());
        for ind in indicator_spec {
            match headers.iter().position(|h| h == ind) {
                Some(i) => col_of.push(i),
                None => {
                    return Err(DataError::UnknownIndicator {
                        name: ind.clone(),
                        file: fname.clone(),
                    })
                }
            }
        }
        let mut rows: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        let mut last: Vec<Option<f64>> = vec![None; indicator_spec.len()];
        for (ri, rec) in rdr.records().enumerate() {
            let line = ri + 2; // header is line 1
            let rec = rec.map_err(|e| DataError::BadRow {
                file: fname.clone(),
                line,
                reason: e.to_string(),
            })?;
            let date = rec
                .get(0)
                .ok_or_else(|| DataError::BadRow {
                    file: fname.clone(),
                    line,
                    reason: "missing date column".into(),
                })?
                .trim()
                .to_string();
            let mut vals = Vec::with_capacity(indicator_spec.len());
            for (k, &ci) in col_of.iter().enumerate() {
                let raw = rec.get(ci).unwrap_or("").trim();
                let v = if raw.is_empty() {
                    match last[k] {
                        Some(v) => v,
                        None => {
                            return Err(DataError::LeadingGap {
                                file: fname.clone(),
                                column: indicator_spec[k].clone(),
                                date,
                            })
                        }
                    }
                } else {
                    raw.parse::<f64>().map_err(|_| DataError::BadRow {
                        file: fname.clone(),
                        line,
                        reason: format!("cannot parse {:?} as a number", raw),
                    })?
                };
                last[k] = Some(v);
                vals.push(v);
            }
            rows.insert(date, vals);
        }
        files.push(FileData { symbol, rows });
    }

    // intersection of dates across all files, chronological (ISO-8601 sorts)
    let mut dates: Vec<String> = files[0].rows.keys().cloned().collect();
    for f in &files[1..] {
        dates.retain(|d| f.rows.contains_key(d));
    }
    if dates.is_empty() {
        return Err(DataError::EmptyDateIntersection);
    }

    let n = files.len();
    let p = indicator_spec.len();
    let t = dates.len();
    let mut values = vec![0.0; n * p * t];
    for (ni, f) in files.iter().enumerate() {
        for (ti, d) in dates.iter().enumerate() {
            let row = &f.rows[d];
            for pi in 0..p {
                values[(ni * p + pi) * t + ti] = row[pi];
            }
        }
    }
    Ok(FeaturePanel {
        symbols: files.into_iter().map(|f| f.symbol).collect(),
        indicators: indicator_spec.to_vec(),
        values,
        timestamps: dates,
    })
}

// ---- synthetic market ----

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthParams {
    pub n_indicators: usize,
    /// Weight of the shared cluster factor in each stock's log return.
    pub factor_weight: f64,
    /// Scale of the idiosyncratic log-return component.
    pub idio_weight: f64,
    /// AR(1) momentum of the cluster factor's drift.
    pub momentum: f64,
    /// Per-step volatility of log returns.
    pub vol: f64,
    /// If > 0, non-leader stocks in each cluster echo the cluster leader's
    /// previous return with this weight, adding a lead-lag relation.
    pub follower_coupling: f64,
    /// Count of extra random sparse relation edges (third relation slice).
    pub random_edges: usize,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            n_indicators: 3,
            factor_weight: 0.8,
            idio_weight: 1.0,
            momentum: 0.6,
            vol: 0.02,
            follower_coupling: 0.0,
            random_edges: 0,
        }
    }
}

fn indicator_names(p: usize) -> Vec<String> {
    let base = ["close", "open", "high", "low", "volume"];
    (0..p)
        .map(|i| {
            base.get(i)
                .map(|s| s.to_string())
                .unwrap_or_else(|| format!("ind{i}"))
        })
        .collect()
}

/// Generates a clustered market: each cluster shares a momentum-driven latent
/// factor, each stock mixes the factor with its own walk. Returns the panel,
/// the ground-truth cluster labels and the relation tensor (same-cluster,
/// plus lead-lag and random relations when enabled).
pub fn synth_market(
    n_stocks: usize,
    n_clusters: usize,
    length: usize,
    rng: &mut Rng,
    params: &SynthParams,
) -> Result<(FeaturePanel, Vec<usize>, RelationTensor), DataError> {
    if n_clusters == 0 || n_stocks < n_clusters {
        return Err(DataError::Invalid(format!(
            "need n_stocks >= n_clusters >= 1, got {n_stocks} and {n_clusters}"
        )));
    }
    let labels: Vec<usize> = (0..n_stocks).map(|i| i % n_clusters).collect();
    let p = params.n_indicators.max(1);

    // cluster factor log returns with AR(1) momentum
    let mut factor_rets = vec![vec![0.0; length]; n_clusters];
    for c in 0..n_clusters {
        let mut drift = 0.0;
        for t in 0..length {
            drift = params.momentum * drift + params.vol * rng.normal();
            factor_rets[c][t] = drift;
        }
    }

    // per-stock log returns
    let w = params.factor_weight;
    let mut rets = vec![vec![0.0; length]; n_stocks];
    for s in 0..n_stocks {
        let c = labels[s];
        let leader = labels.iter().position(|&l| l == c).unwrap();
        for t in 0..length {
            let idio = params.idio_weight * params.vol * rng.normal();
            let mut r = w * factor_rets[c][t] + (1.0 - w) * idio;
            if params.follower_coupling > 0.0 && s != leader && t > 0 {
                r = (1.0 - params.follower_coupling) * r
                    + params.follower_coupling * rets[leader][t - 1];
            }
            rets[s][t] = r;
        }
    }

    // prices and derived indicators
    let mut values = vec![0.0; n_stocks * p * length];
    for s in 0..n_stocks {
        let base = 50.0 + 10.0 * (s as f64 + 1.0);
        let mut logp = 0.0;
        let mut closes = Vec::with_capacity(length);
        for t in 0..length {
            logp += rets[s][t];
            closes.push(base * logp.exp());
        }
        for pi in 0..p {
            for t in 0..length {
                let v = match pi {
                    0 => closes[t],
                    1 => {
                        // open: previous close
                        if t == 0 {
                            closes[0]
                        } else {
                            closes[t - 1]
                        }
                    }
                    _ => {
                        // auxiliary channels: small deterministic transforms of close
                        let lag = pi.min(t);
                        0.5 * (closes[t] + closes[t - lag])
                    }
                };
                values[(s * p + pi) * length + t] = v;
            }
        }
    }

    let timestamps: Vec<String> = (0..length).map(|t| format!("d{t:05}")).collect();
    let panel = FeaturePanel {
        symbols: (0..n_stocks).map(|i| format!("S{i:02}")).collect(),
        indicators: indicator_names(p),
        values,
        timestamps,
    };

    // relations
    let mut names = vec!["same-cluster".to_string()];
    if params.follower_coupling > 0.0 {
        names.push("follows-leader".to_string());
    }
    if params.random_edges > 0 {
        names.push("random".to_string());
    }
    let mut rel = RelationTensor::new(n_stocks, names);
    for i in 0..n_stocks {
        for j in 0..n_stocks {
            if i != j && labels[i] == labels[j] {
                rel.set(0, i, j);
            }
        }
    }
    if params.follower_coupling > 0.0 {
        for s in 0..n_stocks {
            let c = labels[s];
            let leader = labels.iter().position(|&l| l == c).unwrap();
            if s != leader {
                rel.set(1, s, leader);
                rel.set(1, leader, s);
            }
        }
    }
    if params.random_edges > 0 {
        let g = rel.g() - 1;
        for _ in 0..params.random_edges {
            let i = rng.index(n_stocks);
            let j = rng.index(n_stocks);
            if i != j {
                rel.set(g, i, j);
                rel.set(g, j, i);
            }
        }
    }
    Ok((panel, labels, rel))
}

// ---- normalization ----

/// Per-stock, per-indicator z-score statistics fitted on the training range.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NormStats {
    pub n: usize,
    pub p: usize,
    pub train_end: usize,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn denormalize_value(&self, n: usize, p: usize, v: f64) -> f64 {
        v * self.std[n * self.p + p] + self.mean[n * self.p + p]
    }
}

/// Z-scores every (stock, indicator) series using statistics from
/// `t < train_end` only. Zero-variance series get a unit divisor.
pub fn normalize(panel: &FeaturePanel, train_end: usize) -> Result<(FeaturePanel, NormStats), DataError> {
    let (n, p, t) = (panel.n(), panel.p(), panel.t());
    if train_end == 0 || train_end > t {
        return Err(DataError::Invalid(format!(
            "train_end {train_end} out of range for T={t}"
        )));
    }
    let mut mean = vec![0.0; n * p];
    let mut std = vec![0.0; n * p];
    let mut out = panel.clone();
    for ni in 0..n {
        for pi in 0..p {
            let series = panel.series(ni, pi);
            let train = &series[..train_end];
            let mu = train.iter().sum::<f64>() / train_end as f64;
            let var = train.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / train_end as f64;
            let mut sd = var.sqrt();
            if sd == 0.0 {
                log::warn!(
                    "zero-variance indicator {}/{} in training range; using unit divisor",
                    panel.symbols[ni],
                    panel.indicators[pi]
                );
                sd = 1.0;
            }
            mean[ni * p + pi] = mu;
            std[ni * p + pi] = sd;
            let off = (ni * p + pi) * t;
            for ti in 0..t {
                out.values[off + ti] = (series[ti] - mu) / sd;
            }
        }
    }
    Ok((
        out,
        NormStats {
            n,
            p,
            train_end,
            mean,
            std,
        },
    ))
}

/// Inverse of [`normalize`] for a full (N, P, T') value block.
pub fn denormalize(values: &[f64], t_len: usize, stats: &NormStats) -> Vec<f64> {
    let mut out = values.to_vec();
    for ni in 0..stats.n {
        for pi in 0..stats.p {
            let off = (ni * stats.p + pi) * t_len;
            for ti in 0..t_len {
                out[off + ti] = stats.denormalize_value(ni, pi, out[off + ti]);
            }
        }
    }
    out
}

// ---- windowing ----

/// Sliding windows of L history steps plus `horizon` future steps.
pub fn make_windows(
    panel: &FeaturePanel,
    l: usize,
    horizon: usize,
    stride: usize,
) -> Result<Vec<TrainingInstance>, DataError> {
    if l == 0 || horizon == 0 || stride == 0 {
        return Err(DataError::Invalid(
            "window length, horizon and stride must all be >= 1".into(),
        ));
    }
    let (n, p, t) = (panel.n(), panel.p(), panel.t());
    if t < l + horizon {
        return Err(DataError::EmptyDataset {
            t,
            l,
            horizon,
            min: l + horizon,
        });
    }
    let lp = l + horizon;
    let mut out = Vec::new();
    let mut start = 0;
    while start + lp <= t {
        let mut history = vec![0.0; n * p * l];
        let mut target = vec![0.0; n * p * lp];
        for ni in 0..n {
            for pi in 0..p {
                let series = panel.series(ni, pi);
                history[(ni * p + pi) * l..(ni * p + pi + 1) * l]
                    .copy_from_slice(&series[start..start + l]);
                target[(ni * p + pi) * lp..(ni * p + pi + 1) * lp]
                    .copy_from_slice(&series[start..start + lp]);
            }
        }
        let mut future_mask = vec![0u8; lp];
        for m in future_mask.iter_mut().skip(l) {
            *m = 1;
        }
        out.push(TrainingInstance {
            start,
            n,
            p,
            l,
            horizon,
            history,
            target,
            future_mask,
        });
        start += stride;
    }
    Ok(out)
}

/// Chronological split by target end index: windows ending at or before
/// `train_cut` train, at or before `val_cut` validate, the rest test.
pub fn chronological_split(
    windows: Vec<TrainingInstance>,
    train_cut: usize,
    val_cut: usize,
) -> (Vec<TrainingInstance>, Vec<TrainingInstance>, Vec<TrainingInstance>) {
    let mut train = Vec::new();
    let mut val = Vec::new();
    let mut test = Vec::new();
    for w in windows {
        let end = w.start + w.target_len();
        if end <= train_cut {
            train.push(w);
        } else if end <= val_cut {
            val.push(w);
        } else {
            test.push(w);
        }
    }
    (train, val, test)
}

/// Movement label between the last observed close and a next close value:
/// up (`true`) on any non-negative change (documented tie rule), with an
/// optional symmetric dead zone in relative terms that returns `None`.
pub fn movement_label(last_close: f64, next_close: f64, dead_zone: f64) -> Option<bool> {
    let ret = (next_close - last_close) / last_close.abs().max(1e-12);
    if dead_zone > 0.0 && ret.abs() < dead_zone {
        None
    } else {
        Some(ret >= 0.0)
    }
}

// CSV export helpers used by the CLI and tests.

pub fn write_panel_csvs(panel: &FeaturePanel, dir: &Path) -> Result<Vec<PathBuf>, DataError> {
    std::fs::create_dir_all(dir).map_err(|e| DataError::Io {
        file: dir.display().to_string(),
        source: e,
    })?;
    let mut paths = Vec::new();
    for (ni, sym) in panel.symbols.iter().enumerate() {
        let path = dir.join(format!("{sym}.csv"));
        let mut w = csv::Writer::from_path(&path).map_err(|e| DataError::Io {
            file: path.display().to_string(),
            source: std::io::Error::new(std::io::ErrorKind::Other, e),
        })?;
        let mut header = vec!["date".to_string()];
        header.extend(panel.indicators.iter().cloned());
        w.write_record(&header).ok();
        for ti in 0..panel.t() {
            let mut rec = vec![panel.timestamps[ti].clone()];
            for pi in 0..panel.p() {
                rec.push(format!("{:.10}", panel.value(ni, pi, ti)));
            }
            w.write_record(&rec).ok();
        }
        w.flush().map_err(|e| DataError::Io {
            file: path.display().to_string(),
            source: e,
        })?;
        paths.push(path);
    }
    Ok(paths)
}
