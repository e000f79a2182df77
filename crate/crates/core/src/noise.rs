//! Adaptive noise schedule: local variance, DTW-based intra-cluster
//! influence, the integrated significance score, and the per-timepoint
//! forward-corruption schedule built from it.

use crate::data::FeaturePanel;
use crate::tensor::TensorError;

pub const BETA_BASE_MIN: f64 = 1e-4;
pub const BETA_CLIP_LO: f64 = 1e-5;
pub const BETA_CLIP_HI: f64 = 0.999;

/// Per-stock, per-timepoint significance in [0, 1].
#[derive(Debug, Clone)]
pub struct SignificanceScore {
    pub n: usize,
    pub t: usize,
    /// Row-major (N, T) grid, min-max normalized to [0, 1].
    pub values: Vec<f64>,
    pub alpha: f64,
    pub window: usize,
}

impl SignificanceScore {
    /// Stock-averaged significance for one timepoint.
    pub fn timepoint_mean(&self, t: usize) -> f64 {
        (0..self.n).map(|i| self.values[i * self.t + t]).sum::<f64>() / self.n as f64
    }

    /// A flat score (every timepoint equally significant); the schedule built
    /// from it reduces to a vanilla DDPM schedule.
    pub fn uniform(n: usize, t: usize) -> Self {
        SignificanceScore {
            n,
            t,
            values: vec![0.5; n * t],
            alpha: 0.5,
            window: 1,
        }
    }

    /// Column slice [t0, t1) of the grid.
    pub fn slice(&self, t0: usize, t1: usize) -> SignificanceScore {
        let width = t1 - t0;
        let mut values = vec![0.0; self.n * width];
        for i in 0..self.n {
            values[i * width..(i + 1) * width]
                .copy_from_slice(&self.values[i * self.t + t0..i * self.t + t1]);
        }
        SignificanceScore {
            n: self.n,
            t: width,
            values,
            alpha: self.alpha,
            window: self.window,
        }
    }
}

/// Per-step, per-timepoint corruption schedule.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    pub k: usize,
    pub t: usize,
    /// (K, T) row-major: beta[k-1][t].
    pub beta: Vec<f64>,
    /// (K, T): cumulative product of (1 - beta) down each column.
    pub alpha_bar: Vec<f64>,
    pub beta_base_max: f64,
    pub gamma: f64,
}

impl NoiseSchedule {
    pub fn beta_at(&self, k: usize, t: usize) -> f64 {
        self.beta[(k - 1) * self.t + t]
    }

    pub fn alpha_bar_at(&self, k: usize, t: usize) -> f64 {
        self.alpha_bar[(k - 1) * self.t + t]
    }

    pub fn export_csv(&self, path: &std::path::Path) -> std::io::Result<()> {
        let mut out = String::new();
        let header: Vec<String> = (1..=self.k).map(|k| format!("beta_k{k}")).collect();
        out.push_str(&format!("t,{}\n", header.join(",")));
        for t in 0..self.t {
            let row: Vec<String> = (1..=self.k)
                .map(|k| format!("{:.12}", self.beta_at(k, t)))
                .collect();
            out.push_str(&format!("{t},{}\n", row.join(",")));
        }
        std::fs::write(path, out)
    }
}

/// Local variance around each timepoint: the mean squared deviation of the
/// window [t-w, t+w] from the value at t, truncated at the series ends with
/// the divisor equal to the actual window size.
pub fn local_variance(series: &[f64], w: usize) -> Result<Vec<f64>, TensorError> {
    if series.is_empty() {
        return Err(TensorError::Contract {
            op: "local_variance",
            reason: "empty series".into(),
        });
    }
    let t_len = series.len();
    let mut out = vec![0.0; t_len];
    for t in 0..t_len {
        let lo = t.saturating_sub(w);
        let hi = (t + w).min(t_len - 1);
        let mut acc = 0.0;
        for i in lo..=hi {
            let d = series[t] - series[i];
            acc += d * d;
        }
        out[t] = acc / (hi - lo + 1) as f64;
    }
    Ok(out)
}

/// Divides by the max so the largest entry is exactly 1; an all-zero input
/// stays all zero.
pub fn normalize_variance(v: &[f64]) -> Vec<f64> {
    let mx = v.iter().cloned().fold(0.0f64, f64::max);
    if mx == 0.0 {
        return vec![0.0; v.len()];
    }
    v.iter().map(|x| x / mx).collect()
}

/// Classic dynamic-time-warping distance with squared-difference local cost,
/// unconstrained band and boundary-anchored path.
pub fn dtw(a: &[f64], b: &[f64]) -> Result<f64, TensorError> {
    if a.is_empty() || b.is_empty() {
        return Err(TensorError::Contract {
            op: "dtw",
            reason: "both series must be non-empty".into(),
        });
    }
    let (la, lb) = (a.len(), b.len());
    let mut prev = vec![f64::INFINITY; lb + 1];
    let mut cur = vec![f64::INFINITY; lb + 1];
    prev[0] = 0.0;
    for i in 1..=la {
        cur[0] = f64::INFINITY;
        for j in 1..=lb {
            let d = a[i - 1] - b[j - 1];
            let cost = d * d;
            cur[j] = cost + prev[j].min(cur[j - 1]).min(prev[j - 1]);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    Ok(prev[lb])
}

/// Mean close-channel series over the cluster members other than `stock`.
fn cluster_mean_of_others(
    panel: &FeaturePanel,
    labels: &[usize],
    stock: usize,
    close_idx: usize,
) -> Option<Vec<f64>> {
    let others: Vec<usize> = (0..panel.n())
        .filter(|&j| j != stock && labels[j] == labels[stock])
        .collect();
    if others.is_empty() {
        return None;
    }
    let t = panel.t();
    let mut mean = vec![0.0; t];
    for &j in &others {
        for (m, v) in mean.iter_mut().zip(panel.series(j, close_idx)) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= others.len() as f64;
    }
    Some(mean)
}

/// Influence of a stock inside its cluster: 1 / (1 + DTW to the mean series
/// of the other members). Singleton clusters get the neutral value 1.
pub fn intra_cluster_influence(
    panel: &FeaturePanel,
    labels: &[usize],
    stock: usize,
    close_idx: usize,
) -> Result<f64, TensorError> {
    match cluster_mean_of_others(panel, labels, stock, close_idx) {
        None => Ok(1.0),
        Some(mean) => {
            let d = dtw(panel.series(stock, close_idx), &mean)?;
            Ok(1.0 / (1.0 + d))
        }
    }
}

/// Integrated significance: per stock, `alpha` times its normalized local
/// variance plus `(1 - alpha)` times its intra-cluster influence scaled by
/// the normalized variance of its cluster-mean series, min-max normalized
/// over the whole grid.
pub fn integrated_score(
    panel: &FeaturePanel,
    labels: &[usize],
    alpha: f64,
    w: usize,
    close_idx: usize,
) -> Result<SignificanceScore, TensorError> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(TensorError::Contract {
            op: "integrated_score",
            reason: format!("alpha must lie in [0, 1], got {alpha}"),
        });
    }
    let (n, t) = (panel.n(), panel.t());
    let mut raw = vec![0.0; n * t];
    for s in 0..n {
        let own = normalize_variance(&local_variance(panel.series(s, close_idx), w)?);
        let (influence, cluster_vnorm) =
            match cluster_mean_of_others(panel, labels, s, close_idx) {
                None => (1.0, own.clone()),
                Some(mean) => {
                    let infl = 1.0 / (1.0 + dtw(panel.series(s, close_idx), &mean)?);
                    (infl, normalize_variance(&local_variance(&mean, w)?))
                }
            };
        for ti in 0..t {
            raw[s * t + ti] = alpha * own[ti] + (1.0 - alpha) * influence * cluster_vnorm[ti];
        }
    }
    // final min-max normalization over the full grid
    let mx = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mn = raw.iter().cloned().fold(f64::INFINITY, f64::min);
    let values = if mx > mn {
        raw.iter().map(|v| (v - mn) / (mx - mn)).collect()
    } else if mx > 0.0 {
        vec![1.0; n * t]
    } else {
        vec![0.0; n * t]
    };
    Ok(SignificanceScore {
        n,
        t,
        values,
        alpha,
        window: w,
    })
}

/// Builds the adaptive schedule: a linear base schedule modulated per
/// timepoint by the stock-averaged significance, with modulation strength
/// `gamma` (0 reduces to the vanilla linear schedule).
pub fn build_schedule(
    score: &SignificanceScore,
    k: usize,
    beta_base_max: f64,
    gamma: f64,
) -> Result<NoiseSchedule, TensorError> {
    if k == 0 {
        return Err(TensorError::Contract {
            op: "build_schedule",
            reason: "K must be >= 1".into(),
        });
    }
    if !(beta_base_max > 0.0 && beta_base_max < 1.0) {
        return Err(TensorError::Contract {
            op: "build_schedule",
            reason: format!("beta_base_max must lie in (0, 1), got {beta_base_max}"),
        });
    }
    if !(0.0..=1.0).contains(&gamma) {
        return Err(TensorError::Contract {
            op: "build_schedule",
            reason: format!("gamma must lie in [0, 1], got {gamma}"),
        });
    }
    let t = score.t;
    let mut beta = vec![0.0; k * t];
    let mut alpha_bar = vec![0.0; k * t];
    for ti in 0..t {
        let modulation = 1.0 - gamma + 2.0 * gamma * score.timepoint_mean(ti);
        let mut cum = 1.0;
        for ki in 0..k {
            let base =
                BETA_BASE_MIN + (beta_base_max - BETA_BASE_MIN) * ((ki + 1) as f64 / k as f64);
            let b = (base * modulation).clamp(BETA_CLIP_LO, BETA_CLIP_HI);
            beta[ki * t + ti] = b;
            cum *= 1.0 - b;
            alpha_bar[ki * t + ti] = cum;
        }
    }
    Ok(NoiseSchedule {
        k,
        t,
        beta,
        alpha_bar,
        beta_base_max,
        gamma,
    })
}

/// Per-timepoint loss weights 1 + gamma * I(t) for the loss-weighting
/// variant of adaptive noise.
pub fn loss_weights(score: &SignificanceScore, gamma: f64) -> Vec<f64> {
    (0..score.t)
        .map(|t| 1.0 + gamma * score.timepoint_mean(t))
        .collect()
}
