//! Forecast evaluation: movement classification metrics, probabilistic
//! sharpness via CRPS, and a daily top-k portfolio backtest.

use std::io::Write;
use std::path::Path;

use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("evaluation: {0}")]
    Invalid(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, EvalError>;

#[derive(Debug, Clone, Copy, Serialize)]
pub struct MovementMetrics {
    pub accuracy: f64,
    pub f1: f64,
    pub mcc: f64,
    pub n: usize,
}

/// Binary up/down metrics. Any zero denominator yields 0 for that metric
/// rather than NaN.
pub fn movement_metrics(predicted: &[bool], actual: &[bool]) -> Result<MovementMetrics> {
    if predicted.len() != actual.len() {
        return Err(EvalError::Invalid(format!(
            "{} predictions for {} outcomes",
            predicted.len(),
            actual.len()
        )));
    }
    if predicted.is_empty() {
        return Err(EvalError::Invalid("no predictions".into()));
    }
    let (mut tp, mut tn, mut fp, mut fn_) = (0f64, 0f64, 0f64, 0f64);
    for (&p, &a) in predicted.iter().zip(actual) {
        match (p, a) {
            (true, true) => tp += 1.0,
            (false, false) => tn += 1.0,
            (true, false) => fp += 1.0,
            (false, true) => fn_ += 1.0,
        }
    }
    let n = predicted.len() as f64;
    let accuracy = (tp + tn) / n;
    let f1_den = 2.0 * tp + fp + fn_;
    let f1 = if f1_den == 0.0 { 0.0 } else { 2.0 * tp / f1_den };
    let mcc_den = ((tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_)).sqrt();
    let mcc = if mcc_den == 0.0 {
        0.0
    } else {
        (tp * tn - fp * fn_) / mcc_den
    };
    Ok(MovementMetrics {
        accuracy,
        f1,
        mcc,
        n: predicted.len(),
    })
}

/// Empirical CRPS of a sample ensemble against the realised value:
/// mean |X - y| - 1/2 mean |X - X'|, computed in O(n log n) from the sorted
/// samples.
pub fn crps(samples: &[f64], y: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(EvalError::Invalid("CRPS needs at least one sample".into()));
    }
    if samples.iter().any(|v| !v.is_finite()) || !y.is_finite() {
        return Err(EvalError::Invalid("CRPS inputs must be finite".into()));
    }
    let n = samples.len() as f64;
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let term1: f64 = sorted.iter().map(|x| (x - y).abs()).sum::<f64>() / n;
    // sum over all ordered pairs of |x_i - x_j| collapses to a weighted sum
    // of the order statistics
    let pair_sum: f64 = sorted
        .iter()
        .enumerate()
        .map(|(i, x)| (2.0 * i as f64 - n + 1.0) * x)
        .sum::<f64>()
        * 2.0;
    Ok(term1 - pair_sum / (2.0 * n * n))
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct SharpeResult {
    pub value: f64,
    /// True when the return series had zero variance and the ratio is NaN.
    pub degenerate: bool,
}

/// Annualised Sharpe ratio: mean / population standard deviation * sqrt(252).
pub fn sharpe(daily_returns: &[f64]) -> Result<SharpeResult> {
    if daily_returns.len() < 2 {
        return Err(EvalError::Invalid(format!(
            "Sharpe needs at least 2 observations, got {}",
            daily_returns.len()
        )));
    }
    let n = daily_returns.len() as f64;
    let mean = daily_returns.iter().sum::<f64>() / n;
    let var = daily_returns.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    if var == 0.0 {
        log::warn!("sharpe: zero-variance return series, ratio is undefined");
        return Ok(SharpeResult {
            value: f64::NAN,
            degenerate: true,
        });
    }
    Ok(SharpeResult {
        value: mean / var.sqrt() * 252f64.sqrt(),
        degenerate: false,
    })
}

/// Compounded return over the series: prod(1 + r) - 1.
pub fn cumulative_return(daily_returns: &[f64]) -> f64 {
    daily_returns.iter().fold(1.0, |acc, r| acc * (1.0 + r)) - 1.0
}

#[derive(Debug, Clone, Serialize)]
pub struct DayRecord {
    pub day: usize,
    pub selected: Vec<usize>,
    pub entered: Vec<usize>,
    pub exited: Vec<usize>,
    pub gross: f64,
    pub cost: f64,
    pub net: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct BacktestLedger {
    pub days: Vec<DayRecord>,
    pub daily_returns: Vec<f64>,
    pub k: usize,
    pub cost_rate: f64,
}

impl BacktestLedger {
    pub fn write_trades_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        writeln!(f, "day,selected,entered,exited,gross,cost,net")?;
        let join = |v: &[usize]| {
            v.iter()
                .map(|s| s.to_string())
                .collect::<Vec<_>>()
                .join(" ")
        };
        for d in &self.days {
            writeln!(
                f,
                "{},{},{},{},{:.8},{:.8},{:.8}",
                d.day,
                join(&d.selected),
                join(&d.entered),
                join(&d.exited),
                d.gross,
                d.cost,
                d.net
            )?;
        }
        Ok(())
    }
}

/// Daily long-only top-k strategy: each day hold the k symbols with the
/// highest forecast return, equal weighted, breaking ties by symbol order.
/// Entering or exiting a position costs `cost_bps` basis points of its
/// weight; held positions trade nothing.
pub fn backtest(
    forecast: &[Vec<f64>],
    realized: &[Vec<f64>],
    k: usize,
    cost_bps: f64,
) -> Result<BacktestLedger> {
    if forecast.len() != realized.len() {
        return Err(EvalError::Invalid(format!(
            "{} forecast days vs {} realised days",
            forecast.len(),
            realized.len()
        )));
    }
    if forecast.is_empty() {
        return Err(EvalError::Invalid("backtest needs at least one day".into()));
    }
    let n = forecast[0].len();
    if k == 0 || k > n {
        return Err(EvalError::Invalid(format!(
            "portfolio size k={k} outside 1..={n}"
        )));
    }
    let cost_rate = cost_bps / 1e4;
    let mut days = Vec::with_capacity(forecast.len());
    let mut daily_returns = Vec::with_capacity(forecast.len());
    let mut held: Vec<usize> = Vec::new();
    for (day, (f, r)) in forecast.iter().zip(realized).enumerate() {
        if f.len() != n || r.len() != n {
            return Err(EvalError::Invalid(format!(
                "day {day}: expected {n} symbols"
            )));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| f[b].partial_cmp(&f[a]).unwrap().then(a.cmp(&b)));
        let mut selected: Vec<usize> = order[..k].to_vec();
        selected.sort_unstable();
        let entered: Vec<usize> = selected.iter().copied().filter(|s| !held.contains(s)).collect();
        let exited: Vec<usize> = held.iter().copied().filter(|s| !selected.contains(s)).collect();
        let gross = selected.iter().map(|&s| r[s]).sum::<f64>() / k as f64;
        let cost = cost_rate * (entered.len() + exited.len()) as f64 / k as f64;
        let net = gross - cost;
        daily_returns.push(net);
        days.push(DayRecord {
            day,
            selected: selected.clone(),
            entered,
            exited,
            gross,
            cost,
            net,
        });
        held = selected;
    }
    Ok(BacktestLedger {
        days,
        daily_returns,
        k,
        cost_rate,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct MetricReport {
    pub accuracy: f64,
    pub f1: f64,
    pub mcc: f64,
    pub crps: f64,
    pub sharpe: f64,
    pub irr: f64,
    pub n_days: usize,
    pub k: usize,
}

pub fn write_report(report: &MetricReport, path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(report)
        .map_err(|e| EvalError::Invalid(e.to_string()))?;
    std::fs::write(path, json)?;
    Ok(())
}
