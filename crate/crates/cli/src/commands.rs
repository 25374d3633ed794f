use std::fs;
use std::io::{self, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use hccm::ablation::run_ablation;
use hccm::cache::FeatureMapCache;
use hccm::data::{gen_dataset, Dataset};
use hccm::io::write_atomic;
use hccm::model::{toy_gradcheck, HccmModel, Variant, VisualInput};
use hccm::serving::{Predictor, RepresentationTable};
use hccm::train::{evaluate, train};
use serde::Serialize;

use crate::config::{ConfigError, RunConfig};
use crate::{Command, Common, Format};

/// Maximum relative error accepted by `gradcheck`.
const GRADCHECK_TOL: f64 = 1e-4;

fn load_config(common: &Common, seed_is_data: bool) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(common.config.as_deref(), &common.sets)?;
    if let Some(seed) = common.seed {
        if seed_is_data {
            cfg.data.seed = seed;
        } else {
            cfg.train.seed = seed;
        }
    }
    Ok(cfg)
}

fn emit<T: Serialize>(format: Format, value: &T, text: impl FnOnce() -> String) -> Result<()> {
    let out = match format {
        Format::Json => serde_json::to_string_pretty(value)? + "\n",
        Format::Text => text(),
    };
    io::stdout().write_all(out.as_bytes())?;
    Ok(())
}

fn load_data(dir: &Path) -> Result<Dataset> {
    Dataset::load(dir).with_context(|| format!("loading dataset from {}", dir.display()))
}

fn load_model(path: &Path) -> Result<HccmModel> {
    HccmModel::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

/// Feature maps from the cache file when one is configured, else computed
/// once in memory. `None` for DIN, which has no visual path.
fn feature_maps(model: &HccmModel, data: &Dataset, cache: Option<&Path>) -> Result<Option<FeatureMapCache>> {
    if !model.variant().has_visual() {
        return Ok(None);
    }
    let maps = match cache {
        Some(path) => FeatureMapCache::load(path, model).with_context(|| format!("loading cache {}", path.display()))?,
        None => FeatureMapCache::precompute(model, &data.catalog)?,
    };
    Ok(Some(maps))
}

fn pick_cache(flag: Option<PathBuf>, cfg: &RunConfig) -> Option<PathBuf> {
    flag.or_else(|| cfg.cache.path.clone())
}

pub fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::GenData { out, common } => {
            let cfg = load_config(&common, true)?;
            let ds = gen_dataset(&cfg.data)?;
            ds.save(&out)?;
            #[derive(Serialize)]
            struct Summary {
                train: usize,
                test: usize,
                images: usize,
                train_ctr: f64,
            }
            let clicks = ds.train.iter().filter(|s| s.label == 1).count();
            let summary = Summary {
                train: ds.train.len(),
                test: ds.test.len(),
                images: ds.catalog.len(),
                train_ctr: clicks as f64 / ds.train.len().max(1) as f64,
            };
            emit(common.format, &summary, || {
                format!(
                    "train {}  test {}  images {}  train ctr {:.4}\n",
                    summary.train, summary.test, summary.images, summary.train_ctr
                )
            })?;
        }
        Command::Precompute { data, out, common } => {
            let cfg = load_config(&common, false)?;
            let ds = load_data(&data)?;
            let model = HccmModel::new(cfg.model, Variant::DinFixedCnn, cfg.train.seed)?;
            let cache = FeatureMapCache::precompute(&model, &ds.catalog)?;
            cache.save(&out)?;
            let checksum = format!("{:016x}", cache.checksum());
            emit(
                common.format,
                &serde_json::json!({ "entries": cache.len(), "checksum": checksum }),
                || format!("{} feature maps, fixed checksum {checksum}\n", cache.len()),
            )?;
        }
        Command::Train {
            data,
            out,
            variant,
            cache,
            report,
            common,
        } => {
            let mut cfg = load_config(&common, false)?;
            if let Some(v) = variant {
                cfg.train.variant = v;
            }
            let ds = load_data(&data)?;
            let mut model = HccmModel::new(cfg.model.clone(), cfg.train.variant, cfg.train.seed)?;
            let maps = feature_maps(&model, &ds, pick_cache(cache, &cfg).as_deref())?;
            let visual = maps.as_ref().map(|m| VisualInput::Maps(m));
            let metrics = train(&mut model, &ds.train, Some(&ds.test), &cfg.train, visual)?;
            model.save(&out)?;
            if let Some(path) = report {
                write_atomic(&path, (serde_json::to_string_pretty(&metrics)? + "\n").as_bytes())?;
            }
            eprintln!("wall clock {:.2}s", metrics.wall_clock_secs);
            emit(common.format, &metrics, || metrics.to_table())?;
        }
        Command::Eval {
            data,
            model,
            cache,
            common,
        } => {
            let cfg = load_config(&common, false)?;
            let ds = load_data(&data)?;
            let model = load_model(&model)?;
            let maps = feature_maps(&model, &ds, pick_cache(cache, &cfg).as_deref())?;
            let ev = evaluate(&model, &ds.test, maps.as_ref().map(|m| VisualInput::Maps(m)), cfg.train.eval_batch_size)?;
            let summary = serde_json::json!({
                "variant": model.variant(),
                "test_samples": ds.test.len(),
                "test_auc": ev.auc,
                "test_logloss": ev.logloss,
                "param_checksum": format!("{:016x}", model.checksum()),
            });
            emit(common.format, &summary, || {
                let auc = ev.auc.map_or("undefined".to_string(), |a| format!("{a:.4}"));
                format!(
                    "variant        {}\ntest samples   {}\ntest AUC       {auc}\ntest logloss   {:.6}\n",
                    model.variant(),
                    ds.test.len(),
                    ev.logloss
                )
            })?;
        }
        Command::ExportTable {
            data,
            model,
            out,
            cache,
            common,
        } => {
            let cfg = load_config(&common, false)?;
            let ds = load_data(&data)?;
            let model = load_model(&model)?;
            if !model.variant().has_visual() {
                return Err(hccm::Error::UnsupportedVariant("DIN has no visual representation".into()).into());
            }
            let maps = feature_maps(&model, &ds, pick_cache(cache, &cfg).as_deref())?.expect("visual variant");
            let table = RepresentationTable::export(&model, &ds.catalog, &maps)?;
            table.save(&out)?;
            let checksum = format!("{:016x}", table.checksum());
            emit(
                common.format,
                &serde_json::json!({ "entries": table.len(), "table_checksum": checksum }),
                || format!("{} representations, table checksum {checksum}\n", table.len()),
            )?;
        }
        Command::Serve {
            table,
            model,
            http,
            replay,
            out,
            common,
        } => {
            let cfg = load_config(&common, false)?;
            let predictor = Predictor::new(load_model(&model)?, RepresentationTable::load(&table)?)?;
            let replay = replay.or(if http.is_none() { cfg.serve.replay.clone() } else { None });
            let port = http.or(cfg.serve.http_port);
            match (replay, port) {
                (Some(path), _) => {
                    let input = BufReader::new(fs::File::open(&path).with_context(|| format!("opening {}", path.display()))?);
                    let (ok, rejected) = match out {
                        Some(out) => {
                            let mut buf = Vec::new();
                            let counts = predictor.replay(input, &mut buf)?;
                            write_atomic(&out, &buf)?;
                            counts
                        }
                        None => predictor.replay(input, io::stdout().lock())?,
                    };
                    eprintln!("answered {ok}, rejected {rejected}");
                }
                (None, Some(port)) => crate::http::serve(predictor, &cfg.serve.host, port)?,
                (None, None) => {
                    return Err(ConfigError {
                        path: "serve".into(),
                        message: "pass --http PORT or --replay FILE".into(),
                    }
                    .into())
                }
            }
        }
        Command::Gradcheck { variant, common } => {
            let cfg = load_config(&common, false)?;
            let started = Instant::now();
            let report = toy_gradcheck(variant, cfg.train.seed)?;
            let passed = report.max_rel_err <= GRADCHECK_TOL && report.frozen_untouched;
            let summary = serde_json::json!({
                "variant": variant,
                "max_rel_err": report.max_rel_err,
                "worst_param": report.worst_param,
                "coordinates": report.coordinates,
                "frozen_untouched": report.frozen_untouched,
                "passed": passed,
            });
            eprintln!("wall clock {:.2}s", started.elapsed().as_secs_f64());
            emit(common.format, &summary, || {
                format!(
                    "variant            {variant}\nmax relative error {:.3e} ({})\ncoordinates        {}\nfrozen untouched   {}\nresult             {}\n",
                    report.max_rel_err,
                    report.worst_param,
                    report.coordinates,
                    report.frozen_untouched,
                    if passed { "PASS" } else { "FAIL" }
                )
            })?;
            if !passed {
                return Ok(ExitCode::from(1));
            }
        }
        Command::Ablation {
            data,
            seeds,
            report,
            common,
        } => {
            let cfg = load_config(&common, false)?;
            if seeds == 0 {
                return Err(ConfigError {
                    path: "--seeds".into(),
                    message: "must be at least 1".into(),
                }
                .into());
            }
            let ds = match data {
                Some(dir) => load_data(&dir)?,
                None => gen_dataset(&cfg.data)?,
            };
            let seeds: Vec<u64> = (0..seeds).map(|i| cfg.train.seed + i).collect();
            let started = Instant::now();
            let result = run_ablation(&ds, &cfg.model, &cfg.train, &seeds, |r| {
                log::info!("{} seed {} test AUC {:?}", r.variant, r.seed, r.test_auc);
            })?;
            if let Some(path) = report {
                write_atomic(&path, (serde_json::to_string_pretty(&result)? + "\n").as_bytes())?;
            }
            eprintln!("wall clock {:.2}s", started.elapsed().as_secs_f64());
            emit(common.format, &result, || result.to_table())?;
        }
    }
    Ok(ExitCode::SUCCESS)
}
