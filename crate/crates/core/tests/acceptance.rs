//! Acceptance suite. Runs every criterion in sequence, prints one PASS/FAIL
//! line each and exits nonzero if any failed. Sequential on purpose: several
//! criteria carry wall-clock limits.

use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use ssm_zsl::autodiff::{finite_diff_check_many, ReduceKind, Tape, Var};
use ssm_zsl::checkpoint::{encode_checkpoint, load_checkpoint, save_checkpoint};
use ssm_zsl::data::{gen_synthetic, GenConfig, SplitSpec, ZslDataset};
use ssm_zsl::error::Result;
use ssm_zsl::head::EvalMode;
use ssm_zsl::rng::Rng64;
use ssm_zsl::ssm::discretize_zoh;
use ssm_zsl::tensor::Tensor;
use ssm_zsl::train::{
    best_row, evaluate, gradcheck, gradcheck_spec, harmonic_mean, restore, scan_equiv, score_table,
    sweep, train, Metrics, ScoreTable, TrainConfig, Trained,
};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn report(results: &mut Vec<bool>, n: usize, name: &str, o: Outcome) {
    println!("[{}] {n} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    results.push(o.pass);
}

fn scan_forms() -> Outcome {
    let t0 = Instant::now();
    let r = scan_equiv(1000, 64, 0).expect("scan_equiv");
    let secs = t0.elapsed().as_secs_f64();
    let pass = r.trials == 1000 && r.max_deviation <= 1e-10 && secs < 10.0;
    outcome(
        pass,
        format!("max |y_rec - y_conv| = {:.2e} over {} systems (L <= 64) in {secs:.2} s", r.max_deviation, r.trials),
    )
}

fn zoh() -> Outcome {
    let mut worst: f64 = 0.0;
    let closed = |a: f64, b: f64, d: f64| {
        let z = a * d;
        (z.exp(), z.exp_m1() / z * d * b)
    };
    for &(a, b, d) in &[(-1.0, 2.0, 0.5), (-0.3, -1.1, 2.0), (-5.0, 0.4, 0.01), (-std::f64::consts::LN_2, 1.0, 1.0)] {
        let (ab, bb) = discretize_zoh::<f64>(a, b, d).unwrap();
        let (ea, eb) = closed(a, b, d);
        worst = worst.max((ab - ea).abs()).max((bb - eb).abs());
    }
    let (ab, bb) = discretize_zoh::<f64>(-1.0, 2.0, 0.5).unwrap();
    let printed = (ab - 0.606531).abs() < 5e-7 && (bb - 0.786939).abs() < 5e-7;
    let half = (discretize_zoh::<f64>(-std::f64::consts::LN_2, 1.0, 1.0).unwrap().0 - 0.5).abs() < 1e-12;

    // Branch switch at |delta a| = 1e-4, approached from both sides.
    let mut jump: f64 = 0.0;
    for (a, d) in [(-1e-4, 1.0), (-2e-4, 0.5), (1e-4, 1.0)] {
        let (_, at) = discretize_zoh::<f64>(a, 1.3, d).unwrap();
        let (_, inside) = discretize_zoh::<f64>(a * (1.0 - 1e-12), 1.3, d).unwrap();
        let (_, outside) = discretize_zoh::<f64>(a * (1.0 + 1e-12), 1.3, d).unwrap();
        let (_, direct) = closed(a, 1.3, d);
        jump = jump.max((at - direct).abs()).max((inside - outside).abs());
    }
    // B_bar -> delta b as a -> 0: exact at a = 0, within 1e-12 once the
    // first-order term |delta a / 2| delta b is below it, and shrinking
    // linearly in a on the way there.
    let mut limit: f64 = 0.0;
    for a in [0.0, -1e-13, -1e-300] {
        let (_, bb) = discretize_zoh::<f64>(a, 1.7, 0.3).unwrap();
        limit = limit.max((bb - 0.3 * 1.7).abs());
    }
    let mut linear = true;
    for a in [-1e-2, -1e-4, -1e-6, -1e-8] {
        let (_, bb) = discretize_zoh::<f64>(a, 1.7, 0.3).unwrap();
        linear &= (bb - 0.3 * 1.7).abs() <= (0.3 * a).abs() * 0.3 * 1.7;
    }
    let pass = worst < 1e-12 && printed && half && jump < 1e-12 && limit < 1e-12 && linear;
    outcome(
        pass,
        format!("closed form {worst:.1e}, branch continuity {jump:.1e}, small-step limit {limit:.1e}"),
    )
}

fn rand_t(rng: &mut Rng64, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.uniform_in(lo, hi)).collect()).unwrap()
}

/// Magnitudes in `[0.2, 1)` with random signs, away from kinks at zero.
fn away(rng: &mut Rng64, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.uniform_in(0.2, 1.0);
            if rng.uniform() < 0.5 { -m } else { m }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

type OpFn = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

/// Worst relative error over a finite-difference check of every tape op.
fn op_suite() -> (usize, f64) {
    let mut rng = Rng64::new(2024);
    let a = rand_t(&mut rng, &[3, 4], -1.0, 1.0);
    let b = rand_t(&mut rng, &[3, 4], -1.0, 1.0);
    let s = rand_t(&mut rng, &[], -1.0, 1.0);
    let k = away(&mut rng, &[3, 4]);
    let m2 = rand_t(&mut rng, &[4, 2], -1.0, 1.0);
    let bias2 = rand_t(&mut rng, &[2], -1.0, 1.0);
    let w = rand_t(&mut rng, &[5, 3], -1.0, 1.0);
    let bias5 = rand_t(&mut rng, &[5], -1.0, 1.0);
    let x3 = rand_t(&mut rng, &[3, 4, 2], -1.0, 1.0);
    let u = rand_t(&mut rng, &[5], -1.0, 1.0);
    let v = rand_t(&mut rng, &[5], -1.0, 1.0);
    let (l, d, n) = (3, 2, 2);
    let delta = rand_t(&mut rng, &[l, d], 0.1, 0.5);
    let adiag = rand_t(&mut rng, &[d, n], -2.0, -1.0);
    let bs = rand_t(&mut rng, &[l, n], -1.0, 1.0);
    let cs = rand_t(&mut rng, &[l, n], -1.0, 1.0);
    let xs = rand_t(&mut rng, &[l, d], -1.0, 1.0);
    let idx: Arc<[usize]> = vec![3, 0, 0, 11, 5, 7].into();

    let mut cases: Vec<(Vec<Tensor<f64>>, OpFn)> = vec![
        (vec![a.clone(), b.clone()], Box::new(|t, p| t.add(p[0], p[1]))),
        (vec![a.clone(), b.clone()], Box::new(|t, p| t.sub(p[0], p[1]))),
        (vec![a.clone(), b.clone()], Box::new(|t, p| t.mul(p[0], p[1]))),
        (vec![a.clone(), s.clone()], Box::new(|t, p| t.mul(p[0], p[1]))),
        (vec![s.clone(), a.clone()], Box::new(|t, p| t.sub(p[0], p[1]))),
        (vec![a.clone()], Box::new(|t, p| t.exp(p[0]))),
        (vec![a.clone()], Box::new(|t, p| t.softplus(p[0]))),
        (vec![a.clone()], Box::new(|t, p| t.scale(p[0], -2.5))),
        (vec![k.clone()], Box::new(|t, p| t.relu(p[0]))),
        (vec![k.clone()], Box::new(|t, p| t.abs(p[0]))),
        (vec![a.clone(), m2.clone()], Box::new(|t, p| t.matmul(p[0], p[1]))),
        (vec![a.clone(), m2, bias2], Box::new(|t, p| t.linear_rows(p[0], p[1], Some(p[2])))),
        (vec![w, a.clone(), bias5], Box::new(|t, p| t.linear_channels(p[0], p[1], Some(p[2])))),
        (vec![x3.clone()], Box::new(|t, p| t.sum_all(p[0]))),
        (vec![x3.clone()], Box::new(|t, p| t.mean_all(p[0]))),
        (vec![u.clone()], Box::new(|t, p| t.l2_normalize(p[0], 1e-12))),
        (vec![u.clone(), v.clone()], Box::new(|t, p| t.cosine_similarity(p[0], p[1], 1e-12))),
        (vec![u.clone()], Box::new(|t, p| t.cross_entropy(p[0], 3))),
        (vec![u, v], Box::new(|t, p| t.concat(&[p[0], p[1], p[0]]))),
        (vec![a.clone()], Box::new(|t, p| t.transpose(p[0]))),
        (vec![a.clone()], Box::new(|t, p| t.reshape(p[0], &[2, 6]))),
        (vec![a.clone()], Box::new(move |t, p| t.gather(p[0], idx.clone(), &[2, 3]))),
        (vec![delta.clone(), adiag.clone()], Box::new(|t, p| t.zoh_decay(p[0], p[1]))),
        (
            vec![delta.clone(), adiag.clone(), bs.clone(), xs.clone()],
            Box::new(|t, p| t.zoh_input(p[0], p[1], p[2], p[3], true)),
        ),
        (
            vec![delta.clone(), adiag.clone(), bs.clone(), xs.clone()],
            Box::new(|t, p| t.zoh_input(p[0], p[1], p[2], p[3], false)),
        ),
        (
            vec![delta, adiag, bs, xs, cs],
            Box::new(move |t, p| {
                let decay = t.zoh_decay(p[0], p[1])?;
                let input = t.zoh_input(p[0], p[1], p[2], p[3], true)?;
                let mut states = Vec::new();
                let mut prev = None;
                for step in 0..l {
                    let h = t.scan_step(decay, input, prev, step)?;
                    states.push(h);
                    prev = Some(h);
                }
                t.readout(&states, p[4])
            }),
        ),
    ];
    for axis in 0..3 {
        let len = x3.shape()[axis];
        let vv = rand_t(&mut rng, &[len], -1.0, 1.0);
        let g = rand_t(&mut rng, &[len], -1.0, 1.0);
        let bb = rand_t(&mut rng, &[len], -1.0, 1.0);
        cases.push((vec![x3.clone(), vv.clone()], Box::new(move |t, p| t.add_along(p[0], p[1], axis))));
        cases.push((vec![x3.clone(), vv], Box::new(move |t, p| t.mul_along(p[0], p[1], axis))));
        cases.push((vec![x3.clone()], Box::new(move |t, p| t.softmax(p[0], axis))));
        for kind in [ReduceKind::Sum, ReduceKind::Mean, ReduceKind::L2Norm] {
            cases.push((vec![x3.clone()], Box::new(move |t, p| t.reduce(kind, p[0], axis))));
        }
        cases.push((vec![x3.clone(), g, bb], Box::new(move |t, p| t.layernorm(p[0], axis, p[1], p[2], 1e-5))));
    }

    let mut worst: f64 = 0.0;
    for (i, (inputs, f)) in cases.iter().enumerate() {
        let wrng = Rng64::new(i as u64);
        let checks = finite_diff_check_many(
            |t, p| {
                let out = f(t, p)?;
                let wt = rand_t(&mut wrng.clone(), t.shape(out), -1.0, 1.0);
                let wv = t.constant(wt);
                let prod = t.mul(out, wv)?;
                t.sum_all(prod)
            },
            inputs,
            1e-5,
        )
        .expect("finite differences");
        for c in checks {
            worst = worst.max(c.max_rel_error);
        }
    }
    (cases.len(), worst)
}

fn gradients() -> Outcome {
    let t0 = Instant::now();
    let (ops, op_worst) = op_suite();
    let groups = gradcheck(&gradcheck_spec(), 0, 1e-5, None).expect("gradcheck");
    let e2e = groups.iter().map(|g| g.max_rel_error).fold(0.0, f64::max);
    let secs = t0.elapsed().as_secs_f64();
    let pass = op_worst < 1e-4 && e2e < 1e-4 && secs < 60.0;
    outcome(
        pass,
        format!(
            "{ops} op checks max rel err {op_worst:.1e}; full loss over {} parameter groups max rel err {e2e:.1e}; {secs:.1} s",
            groups.len()
        ),
    )
}

fn metric_oracle() -> Outcome {
    let h = Metrics::gzsl(76.4, 72.1).h.unwrap();
    // Two unseen classes of unequal size: class 0 always right, class 1
    // always wrong.
    let table = ScoreTable {
        unseen: vec![true, true],
        seen_rows: Vec::new(),
        unseen_rows: vec![
            (0, vec![0.9, 0.1]),
            (0, vec![0.8, 0.3]),
            (0, vec![0.7, 0.2]),
            (1, vec![0.6, 0.5]),
        ],
    };
    let acc = table.metrics(EvalMode::Czsl, 0.0).unwrap().acc.unwrap();
    let pass = (h - 74.2).abs() <= 0.05 && acc == 50.0 && harmonic_mean(60.0, 60.0) == 60.0;
    outcome(pass, format!("H(76.4, 72.1) = {h:.4}; two-class per-class accuracy = {acc}"))
}

fn calibration(trained: &Trained<f32>, ds: &ZslDataset, split: &SplitSpec) -> Outcome {
    let table = score_table(&trained.model, &trained.params, ds, split).unwrap();
    let grid: Vec<f64> = (0..=40).map(|i| i as f64 * 0.025).collect();
    let rows = sweep(&table, &grid).unwrap();
    let violations = rows
        .windows(2)
        .filter(|w| w[1].u < w[0].u || w[1].s > w[0].s)
        .count();
    outcome(
        violations == 0,
        format!(
            "{} grid points 0..1: {violations} violations (S {:.1} -> {:.1}, U {:.1} -> {:.1})",
            rows.len(),
            rows[0].s,
            rows[rows.len() - 1].s,
            rows[0].u,
            rows[rows.len() - 1].u
        ),
    )
}

/// Configuration for the end-to-end and ablation runs.
fn run_cfg(seed: u64, lambda_sc: f64) -> TrainConfig {
    TrainConfig {
        seed,
        lambda_sc,
        temperature: 10.0,
        epochs: 30,
        ..TrainConfig::default()
    }
}

fn best_h(t: &Trained<f32>, ds: &ZslDataset, split: &SplitSpec, grid: &[f64]) -> f64 {
    let table = score_table(&t.model, &t.params, ds, split).unwrap();
    best_row(&sweep(&table, grid).unwrap()).unwrap().h
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn ablation(first: &Trained<f32>, ds: &ZslDataset, split: &SplitSpec) -> Outcome {
    let grid: Vec<f64> = (0..=20).map(|i| i as f64 * 0.025).collect();
    let (mut with, mut without) = (Vec::new(), Vec::new());
    for seed in 0..5 {
        let h1 = if seed == 0 {
            best_h(first, ds, split, &grid)
        } else {
            best_h(&train::<f32>(ds, split, &run_cfg(seed, 1.0), |_| {}).unwrap(), ds, split, &grid)
        };
        let h0 = best_h(&train::<f32>(ds, split, &run_cfg(seed, 0.0), |_| {}).unwrap(), ds, split, &grid);
        with.push(h1);
        without.push(h0);
    }
    let fmt = |v: &[f64]| v.iter().map(|h| format!("{h:.1}")).collect::<Vec<_>>().join(" ");
    let detail = format!(
        "best-H median {:.1} with the constraint [{}] vs {:.1} without [{}]",
        median(with.clone()),
        fmt(&with),
        median(without.clone()),
        fmt(&without)
    );
    outcome(median(with) > median(without), detail)
}

fn determinism(trained: &Trained<f32>, ds: &ZslDataset, split: &SplitSpec) -> Outcome {
    let (small, small_split) = gen_synthetic(&GenConfig {
        images_per_class: 5,
        side: 16,
        ..GenConfig::default()
    })
    .unwrap();
    let cfg = TrainConfig {
        epochs: 2,
        ..run_cfg(3, 1.0)
    };
    let a = train::<f32>(&small, &small_split, &cfg, |_| {}).unwrap();
    let b = train::<f32>(&small, &small_split, &cfg, |_| {}).unwrap();
    let same_bytes = encode_checkpoint(&a.params) == encode_checkpoint(&b.params);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("checkpoint.zmba");
    save_checkpoint(&path, &trained.params).unwrap();
    let (model, params) = restore(&trained.model.spec, load_checkpoint::<f32>(&path).unwrap()).unwrap();
    let bitwise = encode_checkpoint(&params) == encode_checkpoint(&trained.params);
    let mut same_metrics = true;
    for (mode, lam) in [(EvalMode::Czsl, 0.0), (EvalMode::Gzsl, 0.0), (EvalMode::Gzsl, 0.3)] {
        let before = evaluate(&trained.model, &trained.params, ds, split, mode, lam).unwrap();
        let after = evaluate(&model, &params, ds, split, mode, lam).unwrap();
        same_metrics &= before == after;
    }
    outcome(
        same_bytes && bitwise && same_metrics,
        format!("repeat-run checkpoints identical: {same_bytes}; reload bitwise: {bitwise}; metrics identical after reload: {same_metrics}"),
    )
}

fn main() -> ExitCode {
    let mut results = Vec::new();
    report(&mut results, 1, "scan-form equivalence", scan_forms());
    report(&mut results, 2, "zero-order hold", zoh());
    report(&mut results, 3, "gradient suite", gradients());
    report(&mut results, 4, "metric oracle", metric_oracle());

    let t0 = Instant::now();
    let (ds, split) = gen_synthetic(&GenConfig::default()).expect("default dataset");
    let trained = train::<f32>(&ds, &split, &run_cfg(0, 1.0), |_| {}).expect("training");
    let acc = evaluate(&trained.model, &trained.params, &ds, &split, EvalMode::Czsl, 0.0)
        .unwrap()
        .acc
        .unwrap();
    let secs = t0.elapsed().as_secs_f64();

    report(&mut results, 5, "calibration monotonicity", calibration(&trained, &ds, &split));
    report(
        &mut results,
        6,
        "synthetic end-to-end",
        outcome(
            acc >= 60.0 && secs < 300.0,
            format!("unseen per-class accuracy {acc:.1}% (chance 20%), train + eval {secs:.0} s"),
        ),
    );
    report(&mut results, 7, "semantic constraint ablation", ablation(&trained, &ds, &split));
    report(&mut results, 8, "determinism and round trip", determinism(&trained, &ds, &split));

    let passed = results.iter().filter(|&&p| p).count();
    println!("{passed}/{} criteria passed", results.len());
    if passed == results.len() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
