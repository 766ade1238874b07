use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use anyhow::Context;
use lipnet::data::LabeledDataset;
use lipnet::lipschitz::{
    audit_empirical_k, guarantee_for, one_hot_labels, probe_outside_radius, verify_radius_synthetic, GuaranteeReport,
    RampClassifier,
};
use lipnet::nn::ModelBuilder;
use lipnet::report::{svg_line_chart, table_to_csv, to_csv, to_json, write_atomic, EvalReport};
use lipnet::rng::{self, streams};
use lipnet::train::{self, run_train_sweep, training_subset, RatioRow};
use lipnet::{LipschitzParams, Model, ModelRegistry, CODE_VERSION};
use serde::{Deserialize, Serialize};

use crate::config::{Cell, ResolvedConfig, RunConfig};
use crate::Failure;

pub const CHECKPOINT_FILE: &str = "checkpoint.lipn";
const DONE_FILE: &str = "done.json";

fn out_dir(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir.clone().expect("out_dir resolved before dispatch")
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    write_atomic(path, bytes)
        .with_context(|| format!("writing {}", path.display()))
        .map_err(Failure::Run)
}

fn write_resolved(dir: &Path, command: &str, method: &str, cfg: &RunConfig) -> Result<(), Failure> {
    let resolved = ResolvedConfig {
        command,
        method,
        code_version: CODE_VERSION,
        config: cfg,
    };
    write(&dir.join("resolved_config.json"), &to_json(&resolved)?)
}

fn builder(cfg: &RunConfig) -> Result<ModelBuilder, Failure> {
    ModelRegistry::default()
        .get(&cfg.model_name())
        .map_err(|e| Failure::Usage(e.to_string()))
}

fn load_model(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<Model, Failure> {
    let path = checkpoint.ok_or_else(|| Failure::Usage("--checkpoint is required".into()))?;
    let mut model = builder(cfg)?(0)?;
    let file = std::fs::File::open(path)
        .map_err(|e| Failure::Usage(format!("cannot open checkpoint {}: {e}", path.display())))?;
    model
        .load_checkpoint(std::io::BufReader::new(file))
        .with_context(|| format!("loading {}", path.display()))
        .map_err(Failure::Run)?;
    Ok(model)
}

#[derive(Serialize)]
struct EpochRow {
    epoch: usize,
    lr: f64,
    train_acc: f64,
}

fn write_training(dir: &Path, model: &Model, record: &train::TrainRecord) -> Result<(), Failure> {
    write(&dir.join(CHECKPOINT_FILE), &model.to_checkpoint_bytes())?;
    write(&dir.join("train_record.csv"), &to_csv(&record.steps)?)?;
    let epochs: Vec<EpochRow> = record
        .epochs
        .iter()
        .map(|e| EpochRow {
            epoch: e.epoch,
            lr: e.lr,
            train_acc: e.train_acc,
        })
        .collect();
    write(&dir.join("train_epochs.csv"), &to_csv(&epochs)?)
}

fn write_eval(dir: &Path, report: &EvalReport) -> Result<(), Failure> {
    write(&dir.join("eval_report.csv"), &to_csv(&report.rows)?)?;
    write(&dir.join("eval_report.json"), &to_json(report)?)?;
    let header = vec!["sigma_test".to_string(), "accuracy".to_string()];
    let rows: Vec<Vec<String>> = report
        .plot_series()
        .iter()
        .map(|(x, y)| vec![x.to_string(), y.to_string()])
        .collect();
    write(&dir.join("plot_series.csv"), &table_to_csv(&header, &rows)?)?;
    let svg = svg_line_chart(
        "accuracy under test noise",
        "sigma_test",
        "accuracy",
        &[(report.metadata.model.clone(), report.plot_series())],
    );
    write(&dir.join("eval_plot.svg"), svg.as_bytes())
}

pub fn train(cfg: &RunConfig) -> Result<(), Failure> {
    let lip = cfg.single()?;
    let hp = cfg.hyperparams(lip, cfg.seed()?);
    hp.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let build = builder(cfg)?;
    let (train_ds, _) = cfg.load_data()?;
    let dir = out_dir(cfg);
    let data = training_subset(&train_ds, &hp)?;
    eprintln!("training {} on {} samples ({} epochs)", cfg.model_name(), data.len(), hp.epochs);
    let (model, record) = train::train(build(hp.seed)?, &data, &hp)?;
    write_training(&dir, &model, &record)?;
    let method = Cell { lip, seed: hp.seed }.method();
    write_resolved(&dir, "train", method, cfg)?;
    eprintln!("wrote {}", dir.display());
    Ok(())
}

pub fn sweep(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<(), Failure> {
    cfg.check_sigmas()?;
    let model = load_model(cfg, checkpoint)?;
    let (_, test) = cfg.load_data()?;
    let report = train::sweep(&model, &test, &cfg.sigmas, cfg.corruption_seed, cfg.k_space, None)?;
    let dir = out_dir(cfg);
    write_eval(&dir, &report)?;
    write_resolved(&dir, "sweep", "evaluation", cfg)?;
    for r in &report.rows {
        println!("sigma_test={} accuracy={} mean_confidence_correct={}", r.sigma_test, r.accuracy, r.mean_confidence_correct);
    }
    Ok(())
}

/// Written last into a finished grid cell; its presence marks the cell done.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CellSummary {
    method: String,
    sigma_train: f64,
    beta: f64,
    l_n: f64,
    seed: u64,
    sigmas: Vec<f64>,
    accuracies: Vec<f64>,
}

fn cell_summary(cell: &Cell, report: &EvalReport) -> CellSummary {
    CellSummary {
        method: cell.method().into(),
        sigma_train: cell.lip.sigma_train,
        beta: cell.lip.beta,
        l_n: cell.lip.l_n,
        seed: cell.seed,
        sigmas: report.rows.iter().map(|r| r.sigma_test).collect(),
        accuracies: report.rows.iter().map(|r| r.accuracy).collect(),
    }
}

fn sorted_sigmas(cfg: &RunConfig) -> Vec<f64> {
    let mut s = cfg.sigmas.clone();
    s.sort_by(f64::total_cmp);
    s.dedup();
    s
}

fn finished_cell(dir: &Path, sigmas: &[f64]) -> Option<CellSummary> {
    let bytes = std::fs::read(dir.join(DONE_FILE)).ok()?;
    let s: CellSummary = serde_json::from_slice(&bytes).ok()?;
    (s.sigmas == sigmas && dir.join(CHECKPOINT_FILE).exists()).then_some(s)
}

fn run_cell(
    cfg: &RunConfig,
    build: ModelBuilder,
    cell: &Cell,
    dir: &Path,
    train_ds: &LabeledDataset,
    test: &LabeledDataset,
) -> Result<CellSummary, Failure> {
    let hp = cfg.hyperparams(cell.lip, cell.seed);
    let out = run_train_sweep(build, cell.seed, train_ds, test, &hp, &cfg.sigmas, cfg.corruption_seed)?;
    write_training(dir, &out.model, &out.record)?;
    write_eval(dir, &out.report)?;
    let mut cell_cfg = cfg.clone();
    cell_cfg.out_dir = Some(dir.to_path_buf());
    cell_cfg.seeds = vec![cell.seed];
    (cell_cfg.sigma_train, cell_cfg.beta, cell_cfg.l_n) = if cell.lip.is_standard() {
        (Vec::new(), Vec::new(), Vec::new())
    } else {
        (vec![cell.lip.sigma_train], vec![cell.lip.beta], vec![cell.lip.l_n])
    };
    write_resolved(dir, "grid", cell.method(), &cell_cfg)?;
    let summary = cell_summary(cell, &out.report);
    write(&dir.join(DONE_FILE), &to_json(&summary)?)?;
    Ok(summary)
}

pub fn grid(cfg: &RunConfig) -> Result<(), Failure> {
    cfg.check_sigmas()?;
    let lips = cfg.grid()?;
    if cfg.seeds.is_empty() {
        return Err(Failure::Usage("seeds is empty".into()));
    }
    for lip in &lips {
        cfg.hyperparams(*lip, 0)
            .validate()
            .map_err(|e| Failure::Usage(e.to_string()))?;
    }
    let build = builder(cfg)?;
    let cells: Vec<Cell> = lips
        .iter()
        .flat_map(|&lip| cfg.seeds.iter().map(move |&seed| Cell { lip, seed }))
        .collect();
    let (train_ds, test) = cfg.load_data()?;
    let root = out_dir(cfg);
    let sigmas = sorted_sigmas(cfg);

    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<CellSummary, String>>>> = Mutex::new(vec![None; cells.len()]);
    let worker = || loop {
        let i = next.fetch_add(1, Ordering::SeqCst);
        let Some(cell) = cells.get(i) else { break };
        let dir = root.join("cells").join(cell.dir_name());
        let result = match finished_cell(&dir, &sigmas) {
            Some(done) => {
                eprintln!("[{}/{}] {} already complete", i + 1, cells.len(), cell.dir_name());
                Ok(done)
            }
            None => {
                eprintln!("[{}/{}] {} running", i + 1, cells.len(), cell.dir_name());
                run_cell(cfg, build, cell, &dir, &train_ds, &test).map_err(|f| match f {
                    Failure::Usage(m) => m,
                    Failure::Run(e) => format!("{e:#}"),
                })
            }
        };
        if let Err(e) = &result {
            eprintln!("[{}/{}] {} failed: {e}", i + 1, cells.len(), cell.dir_name());
        }
        results.lock().expect("results lock")[i] = Some(result);
    };
    std::thread::scope(|s| {
        for _ in 0..cfg.workers.min(cells.len()) {
            s.spawn(worker);
        }
    });
    let results: Vec<Result<CellSummary, String>> = results
        .into_inner()
        .expect("results lock")
        .into_iter()
        .map(|r| r.expect("every cell visited"))
        .collect();

    let mut header: Vec<String> = ["method", "sigma_train", "beta", "l_n", "seed"].map(String::from).to_vec();
    header.extend(sigmas.iter().map(|s| format!("acc_sigma_{s}")));
    header.push("status".into());
    let mut rows = Vec::new();
    let mut series = Vec::new();
    let mut failures = Vec::new();
    for (cell, result) in cells.iter().zip(&results) {
        let mut row = vec![
            cell.method().to_string(),
            cell.lip.sigma_train.to_string(),
            cell.lip.beta.to_string(),
            cell.lip.l_n.to_string(),
            cell.seed.to_string(),
        ];
        match result {
            Ok(s) => {
                row.extend(s.accuracies.iter().map(f64::to_string));
                row.push("ok".into());
                series.push((cell.dir_name(), s.sigmas.iter().copied().zip(s.accuracies.iter().copied()).collect()));
            }
            Err(e) => {
                row.extend(sigmas.iter().map(|_| String::new()));
                row.push("failed".into());
                failures.push(serde_json::json!({ "cell": cell.dir_name(), "error": e }));
            }
        }
        rows.push(row);
    }
    write(&root.join("grid_table.csv"), &table_to_csv(&header, &rows)?)?;
    write(
        &root.join("grid_plot.svg"),
        svg_line_chart("accuracy under test noise", "sigma_test", "accuracy", &series).as_bytes(),
    )?;
    write(&root.join("grid_failures.json"), &to_json(&failures)?)?;
    write_resolved(&root, "grid", "grid", cfg)?;
    if failures.is_empty() {
        eprintln!("grid complete: {} cells, table at {}", cells.len(), root.join("grid_table.csv").display());
        Ok(())
    } else {
        Err(Failure::Run(anyhow::anyhow!(
            "{} of {} grid cells failed; see grid_failures.json",
            failures.len(),
            cells.len()
        )))
    }
}

pub fn sensitivity(cfg: &RunConfig) -> Result<(), Failure> {
    let deltas = cfg
        .sensitivity
        .ok_or_else(|| Failure::Usage("sensitivity needs a `sensitivity` object with sigma_train/beta/l_n deltas".into()))?;
    if deltas.sigma_train.is_none() && deltas.beta.is_none() && deltas.l_n.is_none() {
        return Err(Failure::Usage("sensitivity deltas are all empty".into()));
    }
    let hp = cfg.hyperparams(cfg.single()?, cfg.seed()?);
    hp.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let build = builder(cfg)?;
    let (train_ds, test) = cfg.load_data()?;
    let report = train::sensitivity(
        build,
        hp.seed,
        &hp,
        deltas,
        &train_ds,
        &test,
        cfg.sigma_eval,
        cfg.corruption_seed,
    )?;
    let dir = out_dir(cfg);
    write(&dir.join("sensitivity_report.json"), &to_json(&report)?)?;
    write_resolved(&dir, "sensitivity", Cell { lip: hp.lip, seed: hp.seed }.method(), cfg)?;
    for e in &report.entries {
        println!("{} delta={} sensitivity={}", e.param, e.delta, e.sensitivity);
    }
    Ok(())
}

#[derive(Serialize)]
struct RadiusEntry {
    l_n: f64,
    radius: f64,
    /// Share of audited samples whose quotient is at most `l_n`.
    fraction_within: Option<f64>,
}

#[derive(Serialize)]
struct AuditSummary {
    sigma: f64,
    samples: usize,
    mean_k: f64,
    max_k: f64,
}

#[derive(Serialize)]
struct SyntheticSummary {
    lipschitz_constant: f64,
    trials_per_seed: usize,
    seeds: Vec<u64>,
    violations: usize,
    label_changes_beyond_radius: usize,
}

#[derive(Serialize)]
struct GuaranteeFile {
    classes: usize,
    rho: f64,
    entries: Vec<RadiusEntry>,
    audit: Option<AuditSummary>,
    synthetic: Option<SyntheticSummary>,
    note: String,
    code_version: String,
}

pub fn guarantee(cfg: &RunConfig, checkpoint: Option<&Path>, synthetic: bool) -> Result<(), Failure> {
    if cfg.l_n.is_empty() {
        return Err(Failure::Usage(
            "guarantee requires key l_n (list of positive reals); optional keys: classes, audit_sigma, audit_samples, synthetic_trials".into(),
        ));
    }
    let model = match checkpoint {
        Some(_) => Some(load_model(cfg, checkpoint)?),
        None => None,
    };
    let classes = match (cfg.classes, &model) {
        (Some(c), _) => c,
        (None, Some(m)) => m.num_classes(),
        (None, None) => builder(cfg)?(0)?.num_classes(),
    };
    let labels = one_hot_labels(classes);
    let reports: Vec<GuaranteeReport> = cfg
        .l_n
        .iter()
        .map(|&l| guarantee_for(l, &labels).map_err(|e| Failure::Usage(e.to_string())))
        .collect::<Result<_, _>>()?;

    let mut audit = None;
    let mut within: Vec<Option<f64>> = vec![None; reports.len()];
    if let Some(model) = &model {
        let (_, test) = cfg.load_data()?;
        let seed = cfg.seed()?;
        let stats = audit_empirical_k(model, &test.images, cfg.audit_sigma, cfg.audit_samples, cfg.l_n[0], cfg.k_space, seed)?;
        let n = stats.per_sample_k.len();
        for (w, &l) in within.iter_mut().zip(&cfg.l_n) {
            *w = Some(stats.per_sample_k.iter().filter(|&&k| k <= l).count() as f64 / n as f64);
        }
        audit = Some(AuditSummary {
            sigma: cfg.audit_sigma,
            samples: n,
            mean_k: stats.mean,
            max_k: stats.max,
        });
    }

    let synthetic = if synthetic {
        let oracle = RampClassifier::one_hot(classes, 1.0, 2)?;
        let mut violations = 0;
        let mut beyond = 0;
        for &s in &cfg.seeds {
            violations += verify_radius_synthetic(&oracle, cfg.synthetic_trials, &mut rng::stream(s, streams::AUDIT))?;
            beyond += probe_outside_radius(&oracle, 1.5, 100, &mut rng::stream(s, streams::AUDIT))?;
        }
        Some(SyntheticSummary {
            lipschitz_constant: 1.0,
            trials_per_seed: cfg.synthetic_trials,
            seeds: cfg.seeds.clone(),
            violations,
            label_changes_beyond_radius: beyond,
        })
    } else {
        None
    };

    let file = GuaranteeFile {
        classes,
        rho: reports[0].rho,
        entries: reports
            .iter()
            .zip(within)
            .map(|(r, w)| RadiusEntry {
                l_n: r.l_n,
                radius: r.radius,
                fraction_within: w,
            })
            .collect(),
        audit,
        synthetic,
        note: reports[0].note.clone(),
        code_version: CODE_VERSION.into(),
    };
    let dir = out_dir(cfg);
    write(&dir.join("guarantee_report.json"), &to_json(&file)?)?;
    write_resolved(&dir, "guarantee", "guarantee", cfg)?;
    println!("rho={}", file.rho);
    for e in &file.entries {
        println!("l_n={} radius={}", e.l_n, e.radius);
    }
    if let Some(s) = &file.synthetic {
        println!("synthetic violations={} label_changes_beyond_radius={}", s.violations, s.label_changes_beyond_radius);
    }
    Ok(())
}

#[derive(Serialize)]
struct SeededRatioRow {
    seed: u64,
    ratio: f64,
    sigma_test: f64,
    accuracy: f64,
}

pub fn ratio_study(cfg: &RunConfig) -> Result<(), Failure> {
    cfg.check_sigmas()?;
    if cfg.ratios.is_empty() {
        return Err(Failure::Usage("ratios is empty".into()));
    }
    if let Some(r) = cfg.ratios.iter().find(|r| !(**r > 0.0 && **r <= 1.0)) {
        return Err(Failure::Usage(format!("ratio {r} outside (0, 1]")));
    }
    let lip: LipschitzParams = cfg.single()?;
    if cfg.seeds.is_empty() {
        return Err(Failure::Usage("seeds is empty".into()));
    }
    let build = builder(cfg)?;
    let (train_ds, test) = cfg.load_data()?;
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        let hp = cfg.hyperparams(lip, seed);
        hp.validate().map_err(|e| Failure::Usage(e.to_string()))?;
        eprintln!("ratio study seed {seed}: {} ratios", cfg.ratios.len());
        let table = train::ratio_study(
            build,
            seed,
            &train_ds,
            &test,
            &cfg.ratios,
            &hp,
            &cfg.sigmas,
            cfg.corruption_seed,
        )?;
        rows.extend(table.into_iter().map(|r: RatioRow| SeededRatioRow {
            seed,
            ratio: r.ratio,
            sigma_test: r.sigma_test,
            accuracy: r.accuracy,
        }));
    }
    let series: Vec<(String, Vec<(f64, f64)>)> = sorted_sigmas(cfg)
        .iter()
        .map(|&s| {
            let points = cfg
                .ratios
                .iter()
                .map(|&r| {
                    let accs: Vec<f64> = rows
                        .iter()
                        .filter(|x| x.ratio == r && x.sigma_test == s)
                        .map(|x| x.accuracy)
                        .collect();
                    (r, accs.iter().sum::<f64>() / accs.len() as f64)
                })
                .collect();
            (format!("sigma_test {s}"), points)
        })
        .collect();
    let dir = out_dir(cfg);
    write(&dir.join("ratio_study.csv"), &to_csv(&rows)?)?;
    write(
        &dir.join("ratio_plot.svg"),
        svg_line_chart("accuracy against training data", "ratio", "accuracy", &series).as_bytes(),
    )?;
    write_resolved(&dir, "ratio-study", Cell { lip, seed: cfg.seed()? }.method(), cfg)?;
    Ok(())
}
