//! End-to-end acceptance checks on MNIST. Prints one line per criterion and
//! a summary. Failures are reported but only change the exit status when
//! `LIPNET_ACCEPTANCE_STRICT=1` is set.
//!
//! The dataset is read from `LIPNET_DATA_DIR`, falling back to
//! `<workspace>/data/mnist`.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use lipnet::data::{load_mnist_dir, LabeledDataset, MNIST_TRAIN_SPLIT};
use lipnet::gradcheck::{gradcheck, GradcheckOptions};
use lipnet::graph::Graph;
use lipnet::lipschitz::{
    aggregated_loss, audit_empirical_k, compute_rho, one_hot_labels, probe_outside_radius, verify_radius_synthetic,
    AggregatedLoss, KSpace, RampClassifier,
};
use lipnet::nn::{build_mnist_model, BoundParams, Model};
use lipnet::report::{table_to_csv, to_csv, write_atomic};
use lipnet::rng::{self, Rng};
use rand::Rng as _;
use lipnet::train::{ratio_study, run_train_sweep, train, train_with, Objective, TrainRecord};
use lipnet::{HyperParams, LipschitzParams, Tensor};

const SEEDS: [u64; 3] = [0, 1, 2];
const SIGMAS: [f64; 3] = [0.0, 0.5, 1.0];
const CORRUPTION_SEED: u64 = 2024;
/// The (σ_train, L_n) grid at β = 10.
const GRID: [(f64, f64); 4] = [(0.5, 0.005), (0.5, 0.01), (0.75, 0.005), (0.75, 0.01)];
const BETA: f64 = 10.0;

struct Run {
    acc: [f64; 3],
    model: Model,
    record: TrainRecord,
    secs: f64,
}

struct Outcome {
    id: u32,
    name: &'static str,
    pass: bool,
    detail: String,
}

fn data_dir() -> PathBuf {
    std::env::var_os("LIPNET_DATA_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"))
}

fn run(train_ds: &LabeledDataset, test: &LabeledDataset, lip: LipschitzParams, seed: u64) -> Run {
    let started = Instant::now();
    let hp = HyperParams::mnist(lip, seed);
    let out = run_train_sweep(build_mnist_model, seed, train_ds, test, &hp, &SIGMAS, CORRUPTION_SEED)
        .expect("training run");
    let acc = [0.0, 0.5, 1.0].map(|s| out.report.accuracy_at(s).expect("swept sigma"));
    let secs = started.elapsed().as_secs_f64();
    eprintln!(
        "  run σ_train={} β={} L_n={} seed={seed}: {:.4} / {:.4} / {:.4} ({secs:.0}s)",
        lip.sigma_train, lip.beta, lip.l_n, acc[0], acc[1], acc[2]
    );
    Run {
        acc,
        model: out.model,
        record: out.record,
        secs,
    }
}

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.into_iter().collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn within(value: f64, target: f64, tol: f64) -> bool {
    (value - target).abs() <= tol
}

/// Reference accuracy magnitudes, averaged over seeds.
fn criterion_1(standard: &[Run], proposed: &[Run]) -> Outcome {
    let s = [0, 1, 2].map(|i| mean(standard.iter().map(|r| r.acc[i])));
    let p = [0, 1, 2].map(|i| mean(proposed.iter().map(|r| r.acc[i])));
    let std_ok = [(0.97, 0.02), (0.92, 0.04), (0.65, 0.08)]
        .iter()
        .zip(&s)
        .map(|(&(t, tol), &v)| within(v, t, tol))
        .collect::<Vec<_>>();
    let prop_ok = [(0.98, 0.02), (0.96, 0.03), (0.78, 0.08)]
        .iter()
        .zip(&p)
        .map(|(&(t, tol), &v)| within(v, t, tol))
        .collect::<Vec<_>>();
    let secs = standard[0].secs + proposed[0].secs;
    let pass = std_ok.iter().chain(&prop_ok).all(|&b| b) && secs < 15.0 * 60.0;
    Outcome {
        id: 1,
        name: "MNIST accuracy magnitudes",
        pass,
        detail: format!(
            "standard {:.4}/{:.4}/{:.4} (targets 0.97±0.02 0.92±0.04 0.65±0.08, ok {std_ok:?}); \
             proposed {:.4}/{:.4}/{:.4} (targets 0.98±0.02 0.96±0.03 0.78±0.08, ok {prop_ok:?}); \
             one standard + one proposed run {secs:.0}s",
            s[0], s[1], s[2], p[0], p[1], p[2]
        ),
    }
}

fn criterion_2(standard: &[Run], grid: &[Vec<Run>]) -> Outcome {
    let mut failures = Vec::new();
    for (cell, runs) in GRID.iter().zip(grid) {
        for si in [1, 2] {
            let wins = runs.iter().zip(standard).filter(|(p, s)| p.acc[si] > s.acc[si]).count();
            if wins < 2 {
                failures.push(format!("cell {cell:?} σ_test={} wins {wins}/3", SIGMAS[si]));
            }
        }
    }
    Outcome {
        id: 2,
        name: "every grid cell beats standard under noise",
        pass: failures.is_empty(),
        detail: if failures.is_empty() {
            "all 4 cells win the majority of seeds at σ_test 0.5 and 1.0".into()
        } else {
            failures.join("; ")
        },
    }
}

fn criterion_3(grid: &[Vec<Run>]) -> Outcome {
    let at = |cell: (f64, f64)| -> f64 {
        let i = GRID.iter().position(|&c| c == cell).expect("grid cell");
        mean(grid[i].iter().map(|r| r.acc[2]))
    };
    let low = at((0.75, 0.005));
    let high = at((0.75, 0.01));
    Outcome {
        id: 3,
        name: "raising L_n does not help at σ_test=1.0",
        pass: high <= low + 0.03,
        detail: format!("acc(L_n=0.01) {high:.4} vs acc(L_n=0.005) {low:.4} + 0.03"),
    }
}

fn criterion_4() -> Outcome {
    let started = Instant::now();
    let oracle = RampClassifier::one_hot(10, 1.0, 2).expect("oracle");
    let violations: usize = (0..5)
        .map(|s| verify_radius_synthetic(&oracle, 10_000, &mut rng::stream(s, rng::streams::AUDIT)).expect("verify"))
        .sum();
    let outside = probe_outside_radius(&oracle, 1.5, 1000, &mut rng::stream(0, rng::streams::AUDIT)).expect("probe");
    let secs = started.elapsed().as_secs_f64();
    Outcome {
        id: 4,
        name: "distortion radius on an exactly Lipschitz oracle",
        pass: violations == 0 && outside >= 1 && secs < 5.0,
        detail: format!("{violations} violations in 5×10⁴ trials, {outside} outside the radius, {secs:.2}s"),
    }
}

fn criterion_5() -> Outcome {
    let labels = one_hot_labels(10);
    let rho = compute_rho(&labels).expect("rho");
    let mut brute = f64::INFINITY;
    for i in 0..labels.len() {
        for j in 0..labels.len() {
            if i != j {
                let d: f64 = labels[i].iter().zip(&labels[j]).map(|(a, b)| (a - b) * (a - b)).sum();
                brute = brute.min(d.sqrt() / 2.0);
            }
        }
    }
    let expected = std::f64::consts::SQRT_2 / 2.0;
    Outcome {
        id: 5,
        name: "label-separation radius of 10 one-hot labels",
        pass: (rho - expected).abs() <= 1e-12 && (rho - brute).abs() <= 1e-12,
        detail: format!("rho {rho:.15}, brute force {brute:.15}, √2/2 {expected:.15}"),
    }
}

fn criterion_6(test: &LabeledDataset) -> Outcome {
    let started = Instant::now();
    let mut model = build_mnist_model(5).expect("model");
    // zero biases on zero background pixels sit exactly on the ReLU kink
    let mut jitter = rng::stream(6, rng::streams::INIT);
    for p in model.params_mut().iter_mut().filter(|p| p.name.ends_with("bias")) {
        p.tensor.data_mut().iter_mut().for_each(|b| *b = jitter.random_range(-0.05..0.05));
    }
    let x = test.take(2).expect("two images");
    let labels = x.labels.clone();
    let lip = LipschitzParams::new(0.75, BETA, 1e-4);
    let mut active = true;
    let opts = GradcheckOptions {
        max_entries_per_tensor: Some(40),
        seed: 6,
        ..GradcheckOptions::new(1e-4)
    };
    let report = gradcheck(
        &model,
        |m, g, p, input| {
            let parts = aggregated_loss(m, g, p, input, &labels, &lip, &mut rng::stream(7, rng::streams::NOISE))?;
            active &= parts.lipschitz > 0.0;
            Ok(parts.total)
        },
        &x.images,
        &opts,
    )
    .expect("gradcheck");
    let secs = started.elapsed().as_secs_f64();
    let checked: usize = report.tensors.iter().map(|t| t.checked).sum();
    Outcome {
        id: 6,
        name: "gradients of the full MNIST loss",
        pass: report.passed && active && secs < 60.0,
        detail: format!(
            "max rel error {:.2e} over {checked} entries, hinge active {active}, {secs:.1}s",
            report.max_rel_error
        ),
    }
}

fn criterion_7(test: &LabeledDataset, standard: &[Run], proposed: &[Run]) -> Outcome {
    let k = |m: &Model, seed: u64| {
        audit_empirical_k(m, &test.images, 0.5, 1000, 0.005, KSpace::Probabilities, seed)
            .expect("audit")
            .mean
    };
    let pairs: Vec<(f64, f64)> = SEEDS
        .iter()
        .zip(standard.iter().zip(proposed))
        .map(|(&s, (a, b))| (k(&b.model, s), k(&a.model, s)))
        .collect();
    Outcome {
        id: 7,
        name: "regularized models have lower empirical k",
        pass: pairs.iter().all(|(p, s)| p < s),
        detail: pairs
            .iter()
            .map(|(p, s)| format!("{p:.5} < {s:.5}"))
            .collect::<Vec<_>>()
            .join(", "),
    }
}

struct CrossEntropyOnly;

impl Objective for CrossEntropyOnly {
    fn loss(
        &mut self,
        model: &Model,
        graph: &mut Graph,
        params: &BoundParams,
        images: &Tensor,
        labels: &[usize],
        _rng: &mut Rng,
    ) -> lipnet::Result<AggregatedLoss> {
        let x = graph.constant(images.clone());
        let clean = model.forward(graph, params, x)?;
        let ce = graph.cross_entropy(clean.probs, labels)?;
        Ok(AggregatedLoss {
            total: ce,
            usual: graph.item(ce)?,
            lipschitz: 0.0,
            clean,
            k: None,
            perturbed_passes: 0,
        })
    }
}

fn criterion_8(train_ds: &LabeledDataset, standard: &[Run]) -> Outcome {
    let subset = train_ds.take(3000).expect("subset");
    let mut hp = HyperParams::mnist(LipschitzParams::standard(), 11);
    hp.epochs = 2;
    let (a, ra) = train(build_mnist_model(11).expect("model"), &subset, &hp).expect("train");
    let (b, rb) = train_with(build_mnist_model(11).expect("model"), &subset, &hp, &mut CrossEntropyOnly).expect("train");
    let bits = |r: &TrainRecord| r.steps.iter().map(|s| s.loss.to_bits()).collect::<Vec<_>>();
    let identical = bits(&ra) == bits(&rb) && a.to_checkpoint_bytes() == b.to_checkpoint_bytes();
    let passes: u64 = standard.iter().map(|r| r.record.perturbed_passes).sum::<u64>() + ra.perturbed_passes;
    Outcome {
        id: 8,
        name: "standard training is plain cross-entropy",
        pass: identical && passes == 0,
        detail: format!(
            "{} steps bit-identical to a regularizer-free objective: {identical}; perturbed passes {passes}",
            ra.steps.len()
        ),
    }
}

fn criterion_9(train_ds: &LabeledDataset, test: &LabeledDataset) -> Outcome {
    let once = || -> (Vec<u8>, Vec<u8>, Vec<u8>) {
        let mut hp = HyperParams::mnist(LipschitzParams::new(0.75, BETA, 0.005), 13);
        hp.epochs = 1;
        hp.train_ratio = 0.05;
        let out = run_train_sweep(build_mnist_model, 13, train_ds, &test.take(1000).expect("subset"), &hp, &SIGMAS, CORRUPTION_SEED)
            .expect("run");
        (
            out.model.to_checkpoint_bytes(),
            to_csv(&out.record.steps).expect("csv"),
            to_csv(&out.report.rows).expect("csv"),
        )
    };
    let a = once();
    let b = once();
    Outcome {
        id: 9,
        name: "identical config and seed give identical bytes",
        pass: a == b,
        detail: format!(
            "checkpoint {} B equal {}, train csv equal {}, eval csv equal {}",
            a.0.len(),
            a.0 == b.0,
            a.1 == b.1,
            a.2 == b.2
        ),
    }
}

fn criterion_10(train_ds: &LabeledDataset, test: &LabeledDataset) -> Outcome {
    let mut wins = 0;
    let mut parts = Vec::new();
    for seed in SEEDS {
        let acc = |lip| {
            let hp = HyperParams::mnist(lip, seed);
            ratio_study(build_mnist_model, seed, train_ds, test, &[0.3], &hp, &[0.5], CORRUPTION_SEED).expect("ratio study")[0]
                .accuracy
        };
        let s = acc(LipschitzParams::standard());
        let p = acc(LipschitzParams::new(0.75, BETA, 0.005));
        eprintln!("  ratio 0.3 seed {seed}: proposed {p:.4} standard {s:.4}");
        wins += usize::from(p > s);
        parts.push(format!("{p:.4} vs {s:.4}"));
    }
    Outcome {
        id: 10,
        name: "regularizer wins with 30% of the training data",
        pass: wins >= 2,
        detail: format!("{wins}/3 seeds ({})", parts.join(", ")),
    }
}

fn write_table(standard: &[Run], grid: &[Vec<Run>]) {
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    if std::fs::create_dir_all(&dir).is_err() {
        return;
    }
    let header: Vec<String> = ["method", "sigma_train", "beta", "l_n", "seed", "acc_0.0", "acc_0.5", "acc_1.0"]
        .map(String::from)
        .to_vec();
    let mut rows = Vec::new();
    let mut push = |method: &str, st: f64, b: f64, l: f64, runs: &[Run]| {
        for (seed, r) in SEEDS.iter().zip(runs) {
            let mut row = vec![method.to_string(), st.to_string(), b.to_string(), l.to_string(), seed.to_string()];
            row.extend(r.acc.iter().map(f64::to_string));
            rows.push(row);
        }
    };
    push("standard", 0.0, 0.0, 1.0, standard);
    for (&(st, l), runs) in GRID.iter().zip(grid) {
        push("lipschitz", st, BETA, l, runs);
    }
    if let Ok(bytes) = table_to_csv(&header, &rows) {
        let path = dir.join("accuracy_grid.csv");
        if write_atomic(&path, &bytes).is_ok() {
            eprintln!("  accuracy table written to {}", path.display());
        }
    }
}

fn main() -> ExitCode {
    let started = Instant::now();
    let mut outcomes = vec![criterion_4(), criterion_5()];

    match load_mnist_dir(data_dir()) {
        Ok((full_train, test)) => {
            let train_ds = full_train.take(MNIST_TRAIN_SPLIT).expect("training split");
            outcomes.push(criterion_6(&test));
            outcomes.push(criterion_9(&train_ds, &test));

            eprintln!("training {} standard and {} regularized MNIST models", SEEDS.len(), SEEDS.len() * GRID.len());
            let standard: Vec<Run> = SEEDS
                .iter()
                .map(|&s| run(&train_ds, &test, LipschitzParams::standard(), s))
                .collect();
            let grid: Vec<Vec<Run>> = GRID
                .iter()
                .map(|&(st, l)| {
                    SEEDS
                        .iter()
                        .map(|&s| run(&train_ds, &test, LipschitzParams::new(st, BETA, l), s))
                        .collect()
                })
                .collect();
            write_table(&standard, &grid);
            let proposed = &grid[GRID.iter().position(|&c| c == (0.75, 0.005)).expect("cell")];

            outcomes.push(criterion_1(&standard, proposed));
            outcomes.push(criterion_2(&standard, &grid));
            outcomes.push(criterion_3(&grid));
            outcomes.push(criterion_7(&test, &standard, proposed));
            outcomes.push(criterion_8(&train_ds, &standard));
            outcomes.push(criterion_10(&train_ds, &test));
        }
        Err(e) => {
            for (id, name) in [
                (1, "MNIST accuracy magnitudes"),
                (2, "every grid cell beats standard under noise"),
                (3, "raising L_n does not help at σ_test=1.0"),
                (6, "gradients of the full MNIST loss"),
                (7, "regularized models have lower empirical k"),
                (8, "standard training is plain cross-entropy"),
                (9, "identical config and seed give identical bytes"),
                (10, "regularizer wins with 30% of the training data"),
            ] {
                outcomes.push(Outcome {
                    id,
                    name,
                    pass: false,
                    detail: format!("MNIST unavailable under {}: {e}", data_dir().display()),
                });
            }
        }
    }

    outcomes.sort_by_key(|o| o.id);
    println!();
    for o in &outcomes {
        println!(
            "{} criterion {:>2}: {}: {}",
            if o.pass { "PASS" } else { "FAIL" },
            o.id,
            o.name,
            o.detail
        );
    }
    let failed = outcomes.iter().filter(|o| !o.pass).count();
    println!(
        "acceptance: {} passed, {failed} failed in {:.0}s",
        outcomes.len() - failed,
        started.elapsed().as_secs_f64()
    );
    let strict = std::env::var("LIPNET_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    if failed == 0 || !strict {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
