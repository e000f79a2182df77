//! Command-line surface: data generation, training, sampling, evaluation,
//! backtesting and model description.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or config error. Errors
//! print a single `error: ...` line to stderr.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use stockdiff::config::{ConfigError, RunConfig};
use stockdiff::data::{
    chronological_split, ingest_csv, make_windows, movement_label, normalize, synth_market,
    write_panel_csvs, FeaturePanel, NormStats, SynthParams, TrainingInstance,
};
use stockdiff::denoiser::{DenoiserConfig, DenoiserNet};
use stockdiff::diffusion::{sample_many, training_loss_given, ConditioningBundle};
use stockdiff::eval::{backtest, crps, cumulative_return, movement_metrics, sharpe, MetricReport};
use stockdiff::noise::{build_schedule, integrated_score, loss_weights, NoiseSchedule};
use stockdiff::relations::{clusters_from_relations, group_relations, HeadMaskSet, RelationTensor};
use stockdiff::tensor::{load_checkpoint, save_checkpoint, Adam, Rng};

const REPORT_DIR_ENV: &str = "STOCKDIFF_REPORT_DIR";

enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => m,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<stockdiff::Error> for CliError {
    fn from(e: stockdiff::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<stockdiff::tensor::TensorError> for CliError {
    fn from(e: stockdiff::tensor::TensorError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<stockdiff::tensor::CheckpointError> for CliError {
    fn from(e: stockdiff::tensor::CheckpointError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<stockdiff::data::DataError> for CliError {
    fn from(e: stockdiff::data::DataError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<stockdiff::eval::EvalError> for CliError {
    fn from(e: stockdiff::eval::EvalError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(format!("io error: {e}"))
    }
}

type CliResult<T> = Result<T, CliError>;

const USAGE: &str = "usage: stockdiff <gen-data|train|sample|eval|backtest|describe> [--config FILE] [--key value]...";

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args: Vec<String> = std::env::args().skip(1).collect();
    match run(&args) {
        Ok(()) => {}
        Err(e) => {
            let line = e.message().replace('\n', " ");
            eprintln!("error: {line}");
            std::process::exit(e.code());
        }
    }
}

fn parse_config(args: &[String]) -> CliResult<RunConfig> {
    let mut cfg = RunConfig::default();
    let mut i = 0;
    while i < args.len() {
        let key = args[i]
            .strip_prefix("--")
            .ok_or_else(|| CliError::Usage(format!("expected --key, got `{}`; {USAGE}", args[i])))?;
        let value = args
            .get(i + 1)
            .ok_or_else(|| CliError::Usage(format!("missing value for --{key}")))?;
        if key == "config" {
            cfg.merge_file(Path::new(value))?;
        } else {
            cfg.set(key, value)?;
        }
        i += 2;
    }
    if let Ok(dir) = std::env::var(REPORT_DIR_ENV) {
        if !dir.is_empty() {
            cfg.set("out_dir", &dir)?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(args: &[String]) -> CliResult<()> {
    let Some(cmd) = args.first() else {
        return Err(CliError::Usage(USAGE.to_string()));
    };
    if cmd == "--help" || cmd == "-h" || cmd == "help" {
        println!("{USAGE}");
        return Ok(());
    }
    let cfg = parse_config(&args[1..])?;
    match cmd.as_str() {
        "gen-data" => cmd_gen_data(&cfg),
        "train" => cmd_train(&cfg),
        "sample" => cmd_sample(&cfg),
        "eval" => cmd_eval(&cfg),
        "backtest" => cmd_backtest(&cfg),
        "describe" => cmd_describe(&cfg),
        other => Err(CliError::Usage(format!("unknown command `{other}`; {USAGE}"))),
    }
}

fn write_manifest(cfg: &RunConfig, command: &str) -> CliResult<()> {
    std::fs::create_dir_all(&cfg.out_dir)?;
    let mut hasher = Sha256::new();
    hasher.update(cfg.canonical_string().as_bytes());
    let hash = hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect::<String>();
    let manifest = serde_json::json!({
        "command": command,
        "config_hash": hash,
        "seed": cfg.seed,
        "version": env!("CARGO_PKG_VERSION"),
    });
    std::fs::write(
        Path::new(&cfg.out_dir).join("manifest.json"),
        serde_json::to_string_pretty(&manifest).unwrap(),
    )?;
    Ok(())
}

// ---- shared pipeline state ----

struct Prepared {
    panel: FeaturePanel,
    stats: NormStats,
    masks: HeadMaskSet,
    schedule: NoiseSchedule,
    weights: Vec<f64>,
    train: Vec<TrainingInstance>,
    val: Vec<TrainingInstance>,
    test: Vec<TrainingInstance>,
    close_idx: usize,
}

fn list_data_files(cfg: &RunConfig) -> CliResult<Vec<PathBuf>> {
    let dir = Path::new(&cfg.data_dir);
    if !dir.is_dir() {
        return Err(CliError::Usage(format!(
            "data directory `{}` does not exist (run gen-data or point data_dir at your CSVs)",
            cfg.data_dir
        )));
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().map(|x| x == "csv").unwrap_or(false))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(CliError::Usage(format!(
            "no CSV files in data directory `{}`",
            cfg.data_dir
        )));
    }
    Ok(files)
}

fn prepare(cfg: &RunConfig) -> CliResult<Prepared> {
    let files = list_data_files(cfg)?;
    let panel = ingest_csv(&files, &cfg.indicator_names())?;
    let rel_path = Path::new(&cfg.relations_file);
    if !rel_path.is_file() {
        return Err(CliError::Usage(format!(
            "relations file `{}` does not exist",
            cfg.relations_file
        )));
    }
    let relations = RelationTensor::from_file(rel_path, &panel.symbols)?;
    let t = panel.t();
    let train_end = ((t as f64 * cfg.train_frac) as usize).clamp(1, t);
    let val_end = ((t as f64 * (cfg.train_frac + cfg.val_frac)) as usize).clamp(train_end, t);
    let (panel, stats) = normalize(&panel, train_end)?;
    let close_idx = panel.indicator_index("close").unwrap_or(0);
    let all_relations: Vec<usize> = (0..relations.g()).collect();
    let labels = clusters_from_relations(&relations, &all_relations);
    let score = integrated_score(&panel, &labels, cfg.alpha, cfg.var_window, close_idx)?;
    let schedule = build_schedule(&score, cfg.k_steps, cfg.beta_base_max, cfg.gamma)?;
    let weights = loss_weights(&score, cfg.gamma);
    let masks = group_relations(&relations, cfg.n_masked_heads, cfg.n_unmasked_heads);
    let windows = make_windows(&panel, cfg.window, cfg.horizon, 1)?;
    let (train, val, test) = chronological_split(windows, train_end, val_end);
    Ok(Prepared {
        panel,
        stats,
        masks,
        schedule,
        weights,
        train,
        val,
        test,
        close_idx,
    })
}

fn denoiser_config(cfg: &RunConfig, panel: &FeaturePanel) -> CliResult<DenoiserConfig> {
    let dcfg = DenoiserConfig {
        n_stocks: panel.n(),
        n_indicators: panel.p(),
        window: cfg.window,
        horizon: cfg.horizon,
        d_model: cfg.d_model,
        n_masked_heads: cfg.n_masked_heads,
        n_unmasked_heads: cfg.n_unmasked_heads,
        n_encoder_layers: cfg.n_encoder_layers,
        conv_kernel: cfg.conv_kernel,
        dilations: cfg.parsed_dilations()?,
        ff_dim: cfg.ff_dim,
        k_steps: cfg.k_steps,
        emb_dim: cfg.emb_dim,
        emb_base: cfg.emb_base,
        head_dim: cfg.head_dim,
    };
    dcfg.validate()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(dcfg)
}

fn checkpoint_path(cfg: &RunConfig) -> PathBuf {
    if cfg.checkpoint.is_empty() {
        Path::new(&cfg.out_dir).join("best.ckpt")
    } else {
        PathBuf::from(&cfg.checkpoint)
    }
}

fn load_net(cfg: &RunConfig, prep: &Prepared) -> CliResult<DenoiserNet> {
    let path = checkpoint_path(cfg);
    if !path.is_file() {
        return Err(CliError::Usage(format!(
            "checkpoint `{}` does not exist (train first or set --checkpoint)",
            path.display()
        )));
    }
    let dcfg = denoiser_config(cfg, &prep.panel)?;
    let mut rng = Rng::stream(cfg.seed, "init");
    let net = DenoiserNet::new(dcfg, &mut rng)?;
    let entries = load_checkpoint(&path)?;
    net.load_state(&entries)?;
    Ok(net)
}

// ---- commands ----

fn cmd_gen_data(cfg: &RunConfig) -> CliResult<()> {
    let params = SynthParams {
        n_indicators: cfg.indicator_names().len(),
        factor_weight: cfg.factor_weight,
        vol: cfg.vol,
        follower_coupling: cfg.follower_coupling,
        random_edges: cfg.random_edges,
        ..SynthParams::default()
    };
    let mut rng = Rng::stream(cfg.seed, "gen-data");
    let (panel, labels, relations) =
        synth_market(cfg.n_stocks, cfg.n_clusters, cfg.t_len, &mut rng, &params)?;
    let files = write_panel_csvs(&panel, Path::new(&cfg.data_dir))?;
    if let Some(parent) = Path::new(&cfg.relations_file).parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    relations.to_file(Path::new(&cfg.relations_file), &panel.symbols)?;
    write_manifest(cfg, "gen-data")?;
    let n_clusters = labels.iter().max().map(|m| m + 1).unwrap_or(0);
    println!(
        "gen-data: wrote {} symbol files to {} and {} relations ({} clusters)",
        files.len(),
        cfg.data_dir,
        relations.g(),
        n_clusters
    );
    Ok(())
}

fn cmd_train(cfg: &RunConfig) -> CliResult<()> {
    let prep = prepare(cfg)?;
    if prep.train.is_empty() {
        return Err(CliError::Runtime(
            "no training windows; lower window/horizon or raise t_len".to_string(),
        ));
    }
    let dcfg = denoiser_config(cfg, &prep.panel)?;
    let mut init_rng = Rng::stream(cfg.seed, "init");
    let net = DenoiserNet::new(dcfg, &mut init_rng)?;
    let mut opt = Adam::new(cfg.lr);
    let mut train_rng = Rng::stream(cfg.seed, "train");
    let out_dir = Path::new(&cfg.out_dir);
    std::fs::create_dir_all(out_dir)?;
    let mut log_file = std::fs::File::create(out_dir.join("train_log.jsonl"))?;

    let bundles: Vec<ConditioningBundle> = prep
        .train
        .iter()
        .map(|inst| ConditioningBundle::from_instance(inst, Some(prep.masks.clone())))
        .collect::<Result<_, _>>()?;
    let val_bundles: Vec<ConditioningBundle> = prep
        .val
        .iter()
        .map(|inst| ConditioningBundle::from_instance(inst, Some(prep.masks.clone())))
        .collect::<Result<_, _>>()?;

    let mut step = 0usize;
    let mut best_val = f64::INFINITY;
    let mut lr = cfg.lr;
    'outer: for epoch in 0..cfg.epochs {
        let mut epoch_loss = 0.0;
        let mut epoch_batches = 0usize;
        for chunk in prep.train.chunks(cfg.batch_size) {
            let offset = epoch_batches * cfg.batch_size;
            let mut total: Option<stockdiff::tensor::Tensor> = None;
            let mut k_hist: BTreeMap<usize, usize> = BTreeMap::new();
            for (bi, inst) in chunk.iter().enumerate() {
                let bundle = &bundles[offset + bi];
                let k = train_rng.diffusion_step(prep.schedule.k);
                *k_hist.entry(k).or_insert(0) += 1;
                let mut eps = vec![0.0; inst.target.len()];
                train_rng.fill_normal(&mut eps);
                let w = instance_weights(cfg, &prep, inst);
                let loss = training_loss_given(
                    &net,
                    inst,
                    bundle,
                    &prep.schedule,
                    k,
                    &eps,
                    w.as_deref(),
                )?;
                total = Some(match total {
                    None => loss,
                    Some(t) => t.add(&loss)?,
                });
            }
            let total = total.unwrap().scale(1.0 / chunk.len() as f64)?;
            let loss_val = total.item();
            if !loss_val.is_finite() {
                return Err(CliError::Runtime(format!(
                    "training diverged at step {step} (non-finite loss)"
                )));
            }
            opt.zero_grad(net.named_params());
            total.backward()?;
            opt.step(net.named_params());
            step += 1;
            epoch_loss += loss_val;
            epoch_batches += 1;
            let k_hist_json: BTreeMap<String, usize> =
                k_hist.into_iter().map(|(k, v)| (k.to_string(), v)).collect();
            let line = serde_json::json!({
                "step": step,
                "epoch": epoch,
                "loss": loss_val,
                "lr": lr,
                "k_hist": k_hist_json,
            });
            writeln!(log_file, "{line}")?;
            if cfg.max_steps > 0 && step >= cfg.max_steps {
                save_checkpoint(&out_dir.join(format!("epoch_{epoch}.ckpt")), net.named_params())?;
                save_checkpoint(&out_dir.join("best.ckpt"), net.named_params())?;
                println!(
                    "train: stopped at max_steps={} (epoch {epoch}, loss {loss_val:.6})",
                    cfg.max_steps
                );
                break 'outer;
            }
        }
        let train_avg = epoch_loss / epoch_batches.max(1) as f64;
        let val_loss = if val_bundles.is_empty() {
            train_avg
        } else {
            validation_loss(cfg, &net, &prep, &val_bundles)?
        };
        save_checkpoint(&out_dir.join(format!("epoch_{epoch}.ckpt")), net.named_params())?;
        if val_loss < best_val {
            best_val = val_loss;
            save_checkpoint(&out_dir.join("best.ckpt"), net.named_params())?;
        }
        println!("epoch {epoch}: train_loss {train_avg:.6} val_loss {val_loss:.6} lr {lr:.2e}");
        opt.decay_lr(cfg.lr_decay);
        lr *= cfg.lr_decay;
    }
    write_manifest(cfg, "train")?;
    Ok(())
}

fn instance_weights(cfg: &RunConfig, prep: &Prepared, inst: &TrainingInstance) -> Option<Vec<f64>> {
    if !cfg.loss_weighting {
        return None;
    }
    let lp = inst.target_len();
    Some(prep.weights[inst.start..inst.start + lp].to_vec())
}

fn validation_loss(
    cfg: &RunConfig,
    net: &DenoiserNet,
    prep: &Prepared,
    bundles: &[ConditioningBundle],
) -> CliResult<f64> {
    // fixed stream so every epoch sees the same noise draws
    let mut rng = Rng::stream(cfg.seed, "val");
    let mut total = 0.0;
    for (inst, bundle) in prep.val.iter().zip(bundles) {
        let k = rng.diffusion_step(prep.schedule.k);
        let mut eps = vec![0.0; inst.target.len()];
        rng.fill_normal(&mut eps);
        let w = instance_weights(cfg, prep, inst);
        let loss = training_loss_given(net, inst, bundle, &prep.schedule, k, &eps, w.as_deref())?;
        total += loss.item();
    }
    Ok(total / prep.val.len() as f64)
}

// ---- forecasts ----

#[derive(Serialize, Deserialize)]
struct StockForecast {
    symbol: String,
    last_close: f64,
    realized_close: Vec<f64>,
    /// Per sample: the forecast close path over the horizon.
    sampled_close: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct WindowForecast {
    start: usize,
    stocks: Vec<StockForecast>,
}

#[derive(Serialize, Deserialize)]
struct ForecastFile {
    horizon: usize,
    n_samples: usize,
    windows: Vec<WindowForecast>,
}

fn forecasts_path(cfg: &RunConfig) -> PathBuf {
    Path::new(&cfg.out_dir).join("forecasts.json")
}

fn generate_forecasts(cfg: &RunConfig, prep: &Prepared, net: &DenoiserNet) -> CliResult<ForecastFile> {
    if prep.test.is_empty() {
        return Err(CliError::Runtime(
            "no held-out test windows; lower train_frac/val_frac or raise t_len".to_string(),
        ));
    }
    let mut rng = Rng::stream(cfg.seed, "sample");
    let l = cfg.window;
    let lp = l + cfg.horizon;
    let close = prep.close_idx;
    let p = prep.panel.p();
    let mut windows = Vec::with_capacity(prep.test.len());
    for inst in &prep.test {
        let bundle = ConditioningBundle::from_instance(inst, Some(prep.masks.clone()))?;
        let draws = sample_many(net, &bundle, &prep.schedule, cfg.n_samples, &mut rng)?;
        let mut stocks = Vec::with_capacity(prep.panel.n());
        for (s, symbol) in prep.panel.symbols.iter().enumerate() {
            let row = s * p + close;
            let denorm = |v: f64| prep.stats.denormalize_value(s, close, v);
            let last_close = denorm(inst.target[row * lp + l - 1]);
            let realized_close: Vec<f64> = (l..lp)
                .map(|t| denorm(inst.target[row * lp + t]))
                .collect();
            let sampled_close: Vec<Vec<f64>> = draws
                .iter()
                .map(|d| (l..lp).map(|t| denorm(d[row * lp + t])).collect())
                .collect();
            stocks.push(StockForecast {
                symbol: symbol.clone(),
                last_close,
                realized_close,
                sampled_close,
            });
        }
        windows.push(WindowForecast {
            start: inst.start,
            stocks,
        });
    }
    Ok(ForecastFile {
        horizon: cfg.horizon,
        n_samples: cfg.n_samples,
        windows,
    })
}

fn load_or_generate_forecasts(cfg: &RunConfig) -> CliResult<ForecastFile> {
    let path = forecasts_path(cfg);
    if path.is_file() {
        let text = std::fs::read_to_string(&path)?;
        return serde_json::from_str(&text).map_err(|e| {
            CliError::Runtime(format!("corrupt forecasts file {}: {e}", path.display()))
        });
    }
    let prep = prepare(cfg)?;
    let net = load_net(cfg, &prep)?;
    generate_forecasts(cfg, &prep, &net)
}

fn cmd_sample(cfg: &RunConfig) -> CliResult<()> {
    let prep = prepare(cfg)?;
    let net = load_net(cfg, &prep)?;
    let forecasts = generate_forecasts(cfg, &prep, &net)?;
    let out_dir = Path::new(&cfg.out_dir);
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(
        forecasts_path(cfg),
        serde_json::to_string(&forecasts).unwrap(),
    )?;
    // one CSV per stock: window start, sample index, step ahead, close value
    let samples_dir = out_dir.join("samples");
    std::fs::create_dir_all(&samples_dir)?;
    for (si, symbol) in prep.panel.symbols.iter().enumerate() {
        let mut body = String::from("window_start,sample,step_ahead,close\n");
        for w in &forecasts.windows {
            let stock = &w.stocks[si];
            for (sample_i, path) in stock.sampled_close.iter().enumerate() {
                for (h, v) in path.iter().enumerate() {
                    body.push_str(&format!("{},{},{},{:.10}\n", w.start, sample_i, h + 1, v));
                }
            }
        }
        std::fs::write(samples_dir.join(format!("{symbol}.csv")), body)?;
    }
    write_manifest(cfg, "sample")?;
    println!(
        "sample: {} windows x {} samples written to {}",
        forecasts.windows.len(),
        forecasts.n_samples,
        out_dir.display()
    );
    Ok(())
}

struct ScoredForecasts {
    predicted: Vec<bool>,
    actual: Vec<bool>,
    crps_mean: f64,
    forecast_returns: Vec<Vec<f64>>,
    realized_returns: Vec<Vec<f64>>,
}

fn score_forecasts(cfg: &RunConfig, forecasts: &ForecastFile) -> CliResult<ScoredForecasts> {
    let mut predicted = Vec::new();
    let mut actual = Vec::new();
    let mut crps_sum = 0.0;
    let mut crps_n = 0usize;
    let mut forecast_returns = Vec::new();
    let mut realized_returns = Vec::new();
    for w in &forecasts.windows {
        let mut f_day = Vec::with_capacity(w.stocks.len());
        let mut r_day = Vec::with_capacity(w.stocks.len());
        for s in &w.stocks {
            // next-step ensemble on the close channel
            let next: Vec<f64> = s.sampled_close.iter().map(|p| p[0]).collect();
            let mut sorted = next.clone();
            sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let m = sorted.len();
            let median = if m % 2 == 1 {
                sorted[m / 2]
            } else {
                0.5 * (sorted[m / 2 - 1] + sorted[m / 2])
            };
            let realized = s.realized_close[0];
            crps_sum += crps(&next, realized)?;
            crps_n += 1;
            let pred = movement_label(s.last_close, median, 0.0).unwrap_or(true);
            if let Some(act) = movement_label(s.last_close, realized, cfg.dead_zone) {
                predicted.push(pred);
                actual.push(act);
            }
            f_day.push(median / s.last_close - 1.0);
            r_day.push(realized / s.last_close - 1.0);
        }
        forecast_returns.push(f_day);
        realized_returns.push(r_day);
    }
    Ok(ScoredForecasts {
        predicted,
        actual,
        crps_mean: crps_sum / crps_n.max(1) as f64,
        forecast_returns,
        realized_returns,
    })
}

fn cmd_eval(cfg: &RunConfig) -> CliResult<()> {
    let forecasts = load_or_generate_forecasts(cfg)?;
    let scored = score_forecasts(cfg, &forecasts)?;
    let metrics = movement_metrics(&scored.predicted, &scored.actual)?;
    let ledger = backtest(
        &scored.forecast_returns,
        &scored.realized_returns,
        cfg.portfolio_k.min(scored.forecast_returns[0].len()),
        cfg.cost_bps,
    )?;
    let sharpe_val = if ledger.daily_returns.len() >= 2 {
        sharpe(&ledger.daily_returns)?.value
    } else {
        f64::NAN
    };
    let report = MetricReport {
        accuracy: metrics.accuracy,
        f1: metrics.f1,
        mcc: metrics.mcc,
        crps: scored.crps_mean,
        sharpe: sharpe_val,
        irr: cumulative_return(&ledger.daily_returns),
        n_days: ledger.daily_returns.len(),
        k: ledger.k,
    };
    std::fs::create_dir_all(&cfg.out_dir)?;
    let path = Path::new(&cfg.out_dir).join("metrics.json");
    stockdiff::eval::write_report(&report, &path)?;
    write_manifest(cfg, "eval")?;
    println!("{}", serde_json::to_string(&report).unwrap());
    Ok(())
}

fn cmd_backtest(cfg: &RunConfig) -> CliResult<()> {
    let forecasts = load_or_generate_forecasts(cfg)?;
    let scored = score_forecasts(cfg, &forecasts)?;
    let ledger = backtest(
        &scored.forecast_returns,
        &scored.realized_returns,
        cfg.portfolio_k.min(scored.forecast_returns[0].len()),
        cfg.cost_bps,
    )?;
    let out_dir = Path::new(&cfg.out_dir);
    std::fs::create_dir_all(out_dir)?;
    ledger.write_trades_csv(&out_dir.join("trades.csv"))?;
    std::fs::write(
        out_dir.join("ledger.json"),
        serde_json::to_string_pretty(&ledger).unwrap(),
    )?;
    write_manifest(cfg, "backtest")?;
    let sharpe_str = if ledger.daily_returns.len() >= 2 {
        format!("{:.4}", sharpe(&ledger.daily_returns)?.value)
    } else {
        "n/a".to_string()
    };
    println!(
        "backtest: {} days, k={}, irr {:.6}, sharpe {}",
        ledger.daily_returns.len(),
        ledger.k,
        cumulative_return(&ledger.daily_returns),
        sharpe_str
    );
    Ok(())
}

fn cmd_describe(cfg: &RunConfig) -> CliResult<()> {
    // describe works without data on disk: it reports the model implied by
    // the config alone
    let dcfg = DenoiserConfig {
        n_stocks: cfg.n_stocks,
        n_indicators: cfg.indicator_names().len(),
        window: cfg.window,
        horizon: cfg.horizon,
        d_model: cfg.d_model,
        n_masked_heads: cfg.n_masked_heads,
        n_unmasked_heads: cfg.n_unmasked_heads,
        n_encoder_layers: cfg.n_encoder_layers,
        conv_kernel: cfg.conv_kernel,
        dilations: cfg.parsed_dilations()?,
        ff_dim: cfg.ff_dim,
        k_steps: cfg.k_steps,
        emb_dim: cfg.emb_dim,
        emb_base: cfg.emb_base,
        head_dim: cfg.head_dim,
    };
    dcfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let mut rng = Rng::stream(cfg.seed, "init");
    let net = DenoiserNet::new(dcfg.clone(), &mut rng)?;
    let describe = serde_json::json!({
        "params_by_module": net.describe(),
        "params_total": net.param_count(),
        "n_stocks": dcfg.n_stocks,
        "n_indicators": dcfg.n_indicators,
        "window": dcfg.window,
        "horizon": dcfg.horizon,
        "d_model": dcfg.d_model,
        "heads": {
            "masked": dcfg.n_masked_heads,
            "unmasked": dcfg.n_unmasked_heads,
            "head_dim": dcfg.effective_head_dim(),
        },
        "k_steps": dcfg.k_steps,
    });
    println!("{}", serde_json::to_string_pretty(&describe).unwrap());
    Ok(())
}
