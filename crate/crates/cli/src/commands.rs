use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::Serialize;

use cogload::data::{generate_synthetic, load_trialset, Cohort, Montage, RegionId, SynthConfig, TrialSet};
use cogload::estimators::{load_model, save_model, EstimatorKind, Hyper};
use cogload::explain::{aggregate_relevance, read_relevance_json, render_topomap, write_relevance_csv, Baseline, GroupBy};
use cogload::features::write_emb1;
use cogload::harness::{
    attribute_trials, default_increments, longitudinal_report, run_nested_cv, run_sweep, ExplainConfig, ExplainMode,
    FeatureExtractor, FeatureSource, PipelineConfig,
};

use crate::error::CliError;
use crate::{Common, ExplainArgs, PipelineArgs, SynthArgs};

fn parse<T: FromStr>(flag: &str, s: &str) -> Result<T, CliError>
where
    T::Err: Display,
{
    s.parse().map_err(|e| CliError::config(format!("--{flag}: {e}")))
}

fn required<'a>(flag: &str, v: &'a Option<PathBuf>) -> Result<&'a Path, CliError> {
    v.as_deref().ok_or_else(|| CliError::config(format!("--{flag} is required")))
}

/// Fails unless every target is absent or `force` is set.
fn guard(dir: &Path, names: &[&str], force: bool) -> Result<(), CliError> {
    if force {
        return Ok(());
    }
    for n in names {
        let p = dir.join(n);
        if p.exists() {
            return Err(CliError::data(format!("{} exists (use --force to overwrite)", p.display())));
        }
    }
    Ok(())
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("serializable") + "\n"
}

fn load_config(path: &Path) -> Result<PipelineConfig, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))
}

fn cohorts(flag: &str, s: &str) -> Result<Vec<Cohort>, CliError> {
    s.split(',').map(|c| parse(flag, c.trim())).collect()
}

/// Config file, then flags.
pub fn pipeline_config(common: &Common, p: &PipelineArgs) -> Result<PipelineConfig, CliError> {
    let mut cfg = match &common.config {
        Some(path) => load_config(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = &p.features {
        cfg.features = parse("features", s)?;
    }
    if let Some(s) = &p.spatial {
        cfg.spatial = parse("spatial", s)?;
    }
    if let Some(s) = &p.temporal {
        cfg.temporal = parse("temporal", s)?;
    }
    if let Some(s) = &p.estimator {
        let kind: EstimatorKind = parse("estimator", s)?;
        if kind != cfg.estimator && p.grid.is_none() {
            cfg.grid = None;
        }
        cfg.estimator = kind;
    }
    if let Some(s) = &p.grid {
        let grid = s
            .split(',')
            .map(|v| {
                let v = v.trim();
                match cfg.estimator {
                    EstimatorKind::Svr if v == "fixed" => Ok(Hyper::Fixed),
                    EstimatorKind::Svr => Err(CliError::config("--grid: the svm grid is 'fixed'")),
                    EstimatorKind::Linear => parse("grid", v).map(Hyper::Lambda),
                    EstimatorKind::Dnn => parse("grid", v).map(Hyper::Lr),
                }
            })
            .collect::<Result<Vec<_>, _>>()?;
        cfg.grid = Some(grid);
    }
    if p.allow_custom_grid {
        cfg.allow_custom_grid = true;
    }
    if let Some(e) = p.epochs {
        cfg.dnn.epochs = e;
    }
    if let Some(b) = p.batch_size {
        cfg.dnn.batch_size = b;
    }
    if let Some(s) = &p.eval_cohort {
        cfg.eval_cohort = parse("eval-cohort", s)?;
    }
    if let Some(s) = &p.train_cohorts {
        cfg.train_cohorts = cohorts("train-cohorts", s)?;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_set(common: &Common) -> Result<TrialSet, CliError> {
    Ok(load_trialset(required("manifest", &common.manifest)?)?)
}

fn montage_arg(s: &str) -> Result<Montage, CliError> {
    match Montage::shipped(s) {
        Some(m) => Ok(m),
        None => Ok(Montage::load(Path::new(s))?),
    }
}

pub fn gen_synth(common: &Common, a: &SynthArgs) -> Result<(), CliError> {
    let out = required("out", &common.out)?;
    let mut cfg = SynthConfig {
        n_participants: a.n_participants,
        n_days: a.n_days,
        trials_per_day: a.trials_per_day,
        n_channels: a.n_channels,
        fs: a.fs,
        duration_s: a.duration_s,
        noise_sigma: a.noise_sigma,
        ..SynthConfig::default()
    };
    if let Some(r) = &a.planted_region {
        cfg.planted_region = parse::<RegionId>("planted-region", r)?;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate().map_err(|e| {
        let mut msg = e.to_string();
        for field in ["n_participants", "n_days", "trials_per_day", "n_channels", "duration_s", "noise_sigma", "planted_band"] {
            msg = msg.replace(field, &format!("--{}", field.replace('_', "-")));
        }
        msg = msg.replace("fs must", "--fs must");
        CliError::config(msg)
    })?;
    if !common.force && out.read_dir().map(|mut d| d.next().is_some()).unwrap_or(false) {
        return Err(CliError::data(format!(
            "{} is not empty (use --force to overwrite)",
            out.display()
        )));
    }
    let (synth, manifest) = generate_synthetic(&cfg, out)?;
    log::info!("generated {} trials", synth.set.trials.len());
    println!("{}", manifest.display());
    Ok(())
}

#[derive(Serialize)]
struct PreprocessEntry {
    trial: String,
    cropped: bool,
    padded: bool,
}

pub fn preprocess(common: &Common, p: &PipelineArgs) -> Result<(), CliError> {
    let cfg = pipeline_config(common, p)?;
    let out = required("out", &common.out)?;
    if matches!(cfg.features, FeatureSource::Psd) {
        return Err(CliError::config("--features: psd features are computed on the fly and cannot be stored"));
    }
    let set = load_set(common)?;
    guard(out, &["embeddings.emb1", "preprocess.json"], common.force)?;
    let ex = FeatureExtractor::open(&cfg.features)?.uncached();
    let mut records = Vec::with_capacity(set.trials.len());
    let mut summary = Vec::with_capacity(set.trials.len());
    for t in &set.trials {
        let h = ex.tensor(t)?;
        summary.push(PreprocessEntry {
            trial: t.key.to_string(),
            cropped: h.provenance.cropped,
            padded: h.provenance.padded,
        });
        records.push((t.key.clone(), h.data.clone()));
    }
    create_dir(out)?;
    let emb = out.join("embeddings.emb1");
    write_emb1(&emb, &records)?;
    write(&out.join("preprocess.json"), &to_json(&summary))?;
    println!("{}", emb.display());
    Ok(())
}

#[derive(Serialize)]
struct RunMeta<'a> {
    command: &'a str,
    finished_unix_s: u64,
    wall_s: f64,
    timing: &'a cogload::harness::StageTiming,
    threads: usize,
    os: &'a str,
    arch: &'a str,
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

pub fn eval(common: &Common, p: &PipelineArgs) -> Result<(), CliError> {
    let cfg = pipeline_config(common, p)?;
    let out = required("out", &common.out)?;
    let set = load_set(common)?;
    let names = ["cv_report.json", "cv_report.csv", "run_meta.json", "model.mdl", "pipeline.json"];
    guard(out, &names, common.force)?;
    let ex = FeatureExtractor::open(&cfg.features)?;
    let start = Instant::now();
    let run = run_nested_cv(&set, &cfg, &ex)?;
    let r = &run.report;
    create_dir(out)?;
    write(&out.join("cv_report.json"), &r.to_json())?;
    let csv_path = out.join("cv_report.csv");
    {
        let mut w = csv::Writer::from_path(&csv_path).map_err(|e| CliError::io(&csv_path, e))?;
        w.write_record(["fold", "test", "validation", "chosen", "validation_pearson", "test_pearson", "test_mse", "failed"])
            .map_err(|e| CliError::io(&csv_path, e))?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for f in &r.folds {
            w.write_record([
                f.fold.to_string(),
                f.test.clone(),
                f.validation.clone(),
                f.chosen.map(|h| h.to_string()).unwrap_or_default(),
                opt(f.validation_pearson),
                opt(f.test_pearson),
                opt(f.test_mse),
                f.failed.clone().unwrap_or_default(),
            ])
            .map_err(|e| CliError::io(&csv_path, e))?;
        }
        w.flush().map_err(|e| CliError::io(&csv_path, e))?;
    }
    let meta = RunMeta {
        command: "eval",
        finished_unix_s: unix_now(),
        wall_s: start.elapsed().as_secs_f64(),
        timing: &r.timing,
        threads: rayon::current_num_threads(),
        os: std::env::consts::OS,
        arch: std::env::consts::ARCH,
    };
    write(&out.join("run_meta.json"), &to_json(&meta))?;
    for f in &r.folds {
        match (&f.failed, f.test_pearson) {
            (Some(reason), _) => println!("fold {:2} test={} val={} failed: {reason}", f.fold, f.test, f.validation),
            (None, Some(tp)) => println!(
                "fold {:2} test={} val={} chosen={} test_pearson={tp:.4}",
                f.fold,
                f.test,
                f.validation,
                f.chosen.map(|h| h.to_string()).unwrap_or_default()
            ),
            (None, None) => {}
        }
    }
    let model = run
        .final_model
        .as_ref()
        .ok_or_else(|| CliError::numeric(format!("all {} folds failed; no model was trained", r.n_folds)))?;
    save_model(model, &out.join("model.mdl"))?;
    write(&out.join("pipeline.json"), &to_json(&cfg))?;
    let mean = r
        .mean_test_pearson
        .ok_or_else(|| CliError::numeric("no fold produced a test correlation"))?;
    if r.n_failed > 0 {
        println!("failed_folds={}", r.n_failed);
    }
    println!("mean_pearson={mean}");
    Ok(())
}

fn parse_increments(s: &str) -> Vec<Vec<String>> {
    s.split(';')
        .map(|g| g.split(',').map(|p| p.trim().to_string()).filter(|p| !p.is_empty()).collect())
        .collect()
}

pub fn sweep(common: &Common, p: &PipelineArgs, increments: Option<&str>) -> Result<(), CliError> {
    let cfg = pipeline_config(common, p)?;
    let out = required("out", &common.out)?;
    let set = load_set(common)?;
    guard(out, &["sweep.json", "sweep.csv"], common.force)?;
    let inc = match increments {
        Some(s) => parse_increments(s),
        None => default_increments(&set, &cfg),
    };
    let known = set.participants();
    if let Some(p) = inc.iter().flatten().find(|p| !known.contains(p)) {
        return Err(CliError::config(format!("--increments: unknown participant {p}")));
    }
    let ex = FeatureExtractor::open(&cfg.features)?;
    let report = run_sweep(&set, &cfg, &ex, &inc)?;
    create_dir(out)?;
    write(&out.join("sweep.json"), &report.to_json())?;
    let csv_path = out.join("sweep.csv");
    {
        let mut w = csv::Writer::from_path(&csv_path).map_err(|e| CliError::io(&csv_path, e))?;
        w.write_record(["fraction", "n_trials", "mean", "ci_low", "ci_high", "n_failed"])
            .map_err(|e| CliError::io(&csv_path, e))?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for pt in &report.points {
            w.write_record([
                pt.fraction.to_string(),
                pt.n_trials.to_string(),
                opt(pt.mean),
                opt(pt.ci_low),
                opt(pt.ci_high),
                pt.n_failed.to_string(),
            ])
            .map_err(|e| CliError::io(&csv_path, e))?;
        }
        w.flush().map_err(|e| CliError::io(&csv_path, e))?;
    }
    for pt in &report.points {
        println!(
            "fraction={:.2} mean={} ci=[{}, {}]",
            pt.fraction,
            pt.mean.map(|m| format!("{m:.4}")).unwrap_or_else(|| "nan".into()),
            pt.ci_low.map(|m| format!("{m:.4}")).unwrap_or_else(|| "nan".into()),
            pt.ci_high.map(|m| format!("{m:.4}")).unwrap_or_else(|| "nan".into()),
        );
    }
    Ok(())
}

fn pipeline_beside(model: &Path, explicit: &Option<PathBuf>) -> PathBuf {
    explicit
        .clone()
        .unwrap_or_else(|| model.parent().unwrap_or(Path::new(".")).join("pipeline.json"))
}

pub fn explain(common: &Common, a: &ExplainArgs) -> Result<(), CliError> {
    let out = required("out", &common.out)?;
    let mut cfg = load_config(&pipeline_beside(&a.model, &a.pipeline))?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    let group_by = match a.group_by.as_str() {
        "global" => GroupBy::Global,
        "participant" => GroupBy::Participant,
        "day" => GroupBy::Day,
        other => return Err(CliError::config(format!("--group-by: unknown grouping '{other}' (global, participant, day)"))),
    };
    let baseline: Baseline = parse("baseline", &a.baseline)?;
    let mode = match a.permutations {
        Some(0) => return Err(CliError::config("--permutations must be at least 1")),
        Some(n) => ExplainMode::Sampled {
            n_permutations: n,
            seed: cfg.seed,
        },
        None => ExplainMode::Exact,
    };
    let set = load_set(common)?;
    let model = load_model(&a.model)?;
    let mut idx: Vec<usize> = match a.trials.as_str() {
        "eval" => (0..set.trials.len()).filter(|&i| set.trials[i].cohort == cfg.eval_cohort).collect(),
        "all" => (0..set.trials.len()).collect(),
        other => return Err(CliError::config(format!("--trials: expected eval or all, got '{other}'"))),
    };
    if let Some(n) = a.limit {
        idx.truncate(n);
    }
    if idx.is_empty() {
        return Err(CliError::data("no trials to explain"));
    }
    let ex = FeatureExtractor::open(&cfg.features)?;
    let explain_cfg = ExplainConfig { baseline, mode };
    let attributions = attribute_trials(&set, &idx, &model, &cfg, &ex, &explain_cfg)?;
    let maps = aggregate_relevance(&attributions, &set.montage, group_by)?;
    let mut names: Vec<String> = maps
        .iter()
        .flat_map(|m| [format!("relevance_{}.json", m.group), format!("relevance_{}.svg", m.group)])
        .collect();
    names.push("relevance.csv".into());
    if a.daily {
        names.push("daily_report.json".into());
    }
    guard(out, &names.iter().map(String::as_str).collect::<Vec<_>>(), common.force)?;
    create_dir(out)?;
    for m in &maps {
        let (json, _) = render_topomap(m, Some(&set.montage), &out.join(format!("relevance_{}", m.group)))?;
        println!("{}", json.display());
    }
    write_relevance_csv(&maps, &out.join("relevance.csv"))?;
    if a.daily {
        let report = longitudinal_report(&set, &idx, &model, &cfg, &ex, &attributions, out)?;
        for d in &report.days {
            println!(
                "day={} trials={} predicted={:.4} truth={:.4}",
                d.day, d.n_trials, d.mean_predicted, d.mean_truth
            );
        }
    }
    Ok(())
}

pub fn topomap(common: &Common, relevance: &Path, montage: Option<&str>) -> Result<(), CliError> {
    let out = required("out", &common.out)?;
    let map = read_relevance_json(relevance).map_err(|e| CliError::data(e.to_string()))?;
    let montage = montage.map(montage_arg).transpose()?;
    let stem = relevance
        .file_stem()
        .ok_or_else(|| CliError::config("--relevance has no file name"))?
        .to_string_lossy()
        .into_owned();
    let json_name = format!("{stem}.json");
    let svg_name = format!("{stem}.svg");
    let same_file = out.join(&json_name).canonicalize().ok() == relevance.canonicalize().ok();
    guard(out, &[svg_name.as_str()], common.force)?;
    if !same_file {
        guard(out, &[json_name.as_str()], common.force)?;
    }
    create_dir(out)?;
    let (_, svg) = render_topomap(&map, montage.as_ref(), &out.join(&stem))?;
    println!("{}", svg.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        fs::write(&path, r#"{"spatial": "intersection", "temporal": "mean", "seed": 3}"#).unwrap();
        let common = Common {
            config: Some(path),
            seed: Some(9),
            ..Default::default()
        };
        let p = PipelineArgs {
            temporal: Some("global".into()),
            ..Default::default()
        };
        let cfg = pipeline_config(&common, &p).unwrap();
        assert_eq!(cfg.spatial, cogload::features::SpatialMode::Intersection);
        assert_eq!(cfg.temporal, cogload::features::TemporalMode::Global);
        assert_eq!(cfg.seed, 9);
    }

    #[test]
    fn grid_flag_follows_estimator() {
        let p = PipelineArgs {
            estimator: Some("dnn".into()),
            grid: Some("1e-4,5e-5".into()),
            ..Default::default()
        };
        let cfg = pipeline_config(&Common::default(), &p).unwrap();
        assert_eq!(cfg.grid, Some(vec![Hyper::Lr(1e-4), Hyper::Lr(5e-5)]));
        let bad = PipelineArgs {
            grid: Some("0.25".into()),
            ..Default::default()
        };
        assert_eq!(pipeline_config(&Common::default(), &bad).unwrap_err().code, 2);
    }

    #[test]
    fn unknown_config_keys_are_config_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        fs::write(&path, r#"{"spatail": "intersection"}"#).unwrap();
        let common = Common {
            config: Some(path),
            ..Default::default()
        };
        assert_eq!(pipeline_config(&common, &PipelineArgs::default()).unwrap_err().code, 2);
    }

    #[test]
    fn increments_parse() {
        assert_eq!(
            parse_increments("P01, P02;P03"),
            vec![vec!["P01".to_string(), "P02".to_string()], vec!["P03".to_string()]]
        );
    }
}
