//! Acceptance suite: one test per criterion, each printing a single
//! `criterion N [PASS|FAIL]` line to stderr (outside the test harness's
//! output capture, so the lines survive in the plain `cargo test` log).

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use modalsig::agreement::{
    adjusted_rand, contingency, fowlkes_mallows, jaccard, true_positive_rate, ContingencyTable,
};
use modalsig::dataset::{
    load_csv, sample_mixture, Dataset, LabelColumn, MixtureComponent, MixtureSpec,
};
use modalsig::kde::{normal_scale_bandwidth, DensityModel};
use modalsig::modal::{count_modes, MeanShiftConfig};
use modalsig::seed::{derive, rng};
use modalsig::varselect::{ise_statistic, ise_test, select_variables, VarSelectConfig};
use modalsig_cli::config::{PipelineConfig, SynthConfig};
use modalsig_cli::pipeline::{
    cmd_detect, cmd_synth, RunOptions, RunSummary, LABELS_FILE, REPORT_FILE,
};
use modalsig_cli::report::Outcome;
use rand::Rng;

fn verdict(id: u32, name: &str, pass: bool, detail: &str, elapsed: Duration) {
    let tag = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(
        std::io::stderr(),
        "criterion {id:>2} [{tag}] {name}: {detail} ({:.2?})",
        elapsed
    );
    assert!(pass, "criterion {id} ({name}) failed: {detail}");
}

fn identity(d: usize) -> Vec<Vec<f64>> {
    (0..d)
        .map(|i| (0..d).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect()
}

fn scaled_identity(d: usize, v: f64) -> Vec<Vec<f64>> {
    identity(d)
        .into_iter()
        .map(|r| r.into_iter().map(|x| x * v).collect())
        .collect()
}

fn random_data(r: &mut impl Rng, n: usize, d: usize, spread: f64) -> Dataset {
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..d).map(|_| r.gen_range(-spread..spread)).collect())
        .collect();
    Dataset::from_rows(&rows).unwrap()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let norm = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    if norm == 0.0 {
        diff
    } else {
        diff / norm
    }
}

// ---------------------------------------------------------------------------
// planted-signal scenario shared by criteria 6, 7 and 10

/// Background N(0, I_2); signal N((4, 4), 0.25 I_2).
fn planted_mixture(signal_fraction: f64) -> MixtureSpec {
    MixtureSpec {
        components: vec![
            MixtureComponent {
                weight: 0.5,
                mean: vec![0.0, 0.0],
                cov: identity(2),
            },
            MixtureComponent {
                weight: 0.5,
                mean: vec![4.0, 4.0],
                cov: scaled_identity(2, 0.25),
            },
        ],
        signal_fraction,
        signal: vec![1],
    }
}

/// Writes the two samples into `dir` and returns a detect configuration
/// reading them (experimental n = 2000, half held out for the mode test).
fn scenario(dir: &Path, signal_fraction: f64, seed: u64) -> PipelineConfig {
    let data = dir.join("data");
    let synth = PipelineConfig {
        seed,
        synth: Some(SynthConfig {
            background_n: 2000,
            experimental_n: 2000,
            mixture: planted_mixture(signal_fraction),
            background_file: "background.csv".into(),
            experimental_file: "experimental.csv".into(),
            label_column: "label".into(),
        }),
        ..PipelineConfig::default()
    };
    let opts = RunOptions {
        out_dir: Some(data.clone()),
        canonical: true,
        ..RunOptions::default()
    };
    let s = cmd_synth(synth, &opts).unwrap();
    assert_eq!(s.outcome, Outcome::Written);
    let mut cfg = PipelineConfig {
        seed,
        ..PipelineConfig::default()
    };
    cfg.data.background = Some(data.join("background.csv"));
    cfg.data.experimental = Some(data.join("experimental.csv"));
    cfg.data.label_column = Some("label".into());
    cfg.data.test_fraction = 0.5;
    cfg.validate().unwrap();
    cfg
}

fn detect(cfg: &PipelineConfig, out: PathBuf) -> RunSummary {
    let opts = RunOptions {
        out_dir: Some(out),
        canonical: true,
        ..RunOptions::default()
    };
    cmd_detect(cfg.clone(), &opts).unwrap()
}

// ---------------------------------------------------------------------------

#[test]
fn criterion_01_index_arithmetic() {
    // fastest of repeated evaluations, so scheduler noise is not timed
    let mut elapsed = Duration::MAX;
    let (mut fm, mut tpr) = (f64::NAN, f64::NAN);
    for _ in 0..100 {
        let t0 = Instant::now();
        let t = ContingencyTable::from_counts(vec![vec![6582, 441], vec![604, 2373]]).unwrap();
        fm = fowlkes_mallows(&t).unwrap();
        tpr = true_positive_rate(&t, 1, 1).unwrap();
        elapsed = elapsed.min(t0.elapsed());
    }
    let pass = (fm - 0.841).abs() <= 0.005
        && (tpr - 0.797).abs() <= 0.005
        && elapsed < Duration::from_millis(1);
    verdict(
        1,
        "index arithmetic",
        pass,
        &format!("FMI = {fm:.4} (0.841 ± 0.005), TPR = {tpr:.4} (0.797 ± 0.005)"),
        elapsed,
    );
}

#[test]
fn criterion_02_kde_oracle() {
    let t0 = Instant::now();
    let mut r = rng(2);
    let mut worst = 0.0f64;
    let mut worst_fd = 0.0f64;
    for _ in 0..100 {
        let n = r.gen_range(1..=50);
        let d = r.gen_range(1..=3);
        let h = r.gen_range(0.2..2.0);
        let data = random_data(&mut r, n, d, 2.0);
        let x: Vec<f64> = (0..d).map(|_| r.gen_range(-2.5..2.5)).collect();
        let model = DensityModel::new(&data, h).unwrap();

        // direct sums over the sample
        let norm = (2.0 * std::f64::consts::PI).powf(-(d as f64) / 2.0) / n as f64;
        let mut f = 0.0;
        let mut g = vec![0.0; d];
        let mut hess = vec![0.0; d * d];
        for row in data.rows() {
            let u: Vec<f64> = x.iter().zip(row).map(|(a, b)| (a - b) / h).collect();
            let k = norm * (-0.5 * u.iter().map(|v| v * v).sum::<f64>()).exp();
            f += k / h.powi(d as i32);
            for a in 0..d {
                g[a] -= k * u[a] / h.powi(d as i32 + 1);
                for b in 0..d {
                    let delta = if a == b { 1.0 } else { 0.0 };
                    hess[a * d + b] += k * (u[a] * u[b] - delta) / h.powi(d as i32 + 2);
                }
            }
        }
        let fm = model.density(&x).unwrap();
        let gm = model.gradient(&x).unwrap();
        let hm = model.hessian(&x).unwrap();
        let hm: Vec<f64> = (0..d)
            .flat_map(|a| (0..d).map(move |b| (a, b)))
            .map(|(a, b)| hm[(a, b)])
            .collect();
        worst = worst
            .max(rel_err(&[fm], &[f]))
            .max(rel_err(&gm, &g))
            .max(rel_err(&hm, &hess));

        // central differences of the density
        let step = 1e-5 * h;
        let fd: Vec<f64> = (0..d)
            .map(|a| {
                let mut p = x.clone();
                let mut m = x.clone();
                p[a] += step;
                m[a] -= step;
                (model.density(&p).unwrap() - model.density(&m).unwrap()) / (2.0 * step)
            })
            .collect();
        let scale = gm.iter().map(|v| v * v).sum::<f64>().sqrt().max(f / h);
        let err = fd
            .iter()
            .zip(&gm)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
            / scale;
        worst_fd = worst_fd.max(err);
    }
    let elapsed = t0.elapsed();
    let pass = worst <= 1e-12 && worst_fd <= 1e-6 && elapsed < Duration::from_secs(5);
    verdict(
        2,
        "KDE oracle equivalence",
        pass,
        &format!("100 instances, max relative error {worst:.1e} (≤ 1e-12), finite differences {worst_fd:.1e} (≤ 1e-6)"),
        elapsed,
    );
}

#[test]
fn criterion_03_ise_oracle() {
    let t0 = Instant::now();
    let mut r = rng(3);
    let mut worst = 0.0f64;
    let mut identical = 0.0f64;
    for _ in 0..20 {
        let nb = r.gen_range(5..=50);
        let ns = r.gen_range(5..=50);
        let h = r.gen_range(0.2..1.5);
        let shift = r.gen_range(0.0..1.5);
        let b: Vec<f64> = (0..nb).map(|_| r.gen_range(-2.0..2.0)).collect();
        let s: Vec<f64> = (0..ns).map(|_| r.gen_range(-2.0..2.0) + shift).collect();
        let xb = Dataset::from_rows(&b.iter().map(|&v| vec![v]).collect::<Vec<_>>()).unwrap();
        let xs = Dataset::from_rows(&s.iter().map(|&v| vec![v]).collect::<Vec<_>>()).unwrap();
        let closed = ise_statistic(&xb, &xs, h).unwrap();

        // trapezoid quadrature of the squared density difference
        let kde = |pts: &[f64], x: f64| {
            pts.iter()
                .map(|p| (-0.5 * ((x - p) / h).powi(2)).exp())
                .sum::<f64>()
                / (pts.len() as f64 * h * (2.0 * std::f64::consts::PI).sqrt())
        };
        let lo = -2.0 - 12.0 * h;
        let hi = 3.5 + 12.0 * h;
        let steps = ((hi - lo) / (h / 40.0)).ceil() as usize;
        let dx = (hi - lo) / steps as f64;
        let quad: f64 = (0..=steps)
            .map(|i| {
                let x = lo + i as f64 * dx;
                let w = if i == 0 || i == steps { 0.5 } else { 1.0 };
                w * (kde(&b, x) - kde(&s, x)).powi(2)
            })
            .sum::<f64>()
            * dx;
        worst = worst.max((closed - quad).abs() / quad);
        identical = identical.max(ise_statistic(&xb, &xb, h).unwrap().abs());
    }
    let elapsed = t0.elapsed();
    let pass = worst <= 1e-6 && identical == 0.0 && elapsed < Duration::from_secs(10);
    verdict(
        3,
        "ISE oracle equivalence",
        pass,
        &format!("20 instances, max relative error {worst:.1e} (≤ 1e-6), identical samples {identical:e}"),
        elapsed,
    );
}

#[test]
fn criterion_04_agreement_oracle() {
    let t0 = Instant::now();
    let mut r = rng(4);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let n = r.gen_range(20..=300);
        let ka = r.gen_range(2..=6);
        let kb = r.gen_range(2..=6);
        let a: Vec<usize> = (0..n).map(|_| r.gen_range(0..ka)).collect();
        let b: Vec<usize> = (0..n).map(|_| r.gen_range(0..kb)).collect();
        let (mut tp, mut p, mut q) = (0u64, 0u64, 0u64);
        for i in 0..n {
            for j in i + 1..n {
                let sa = a[i] == a[j];
                let sb = b[i] == b[j];
                tp += u64::from(sa && sb);
                p += u64::from(sa);
                q += u64::from(sb);
            }
        }
        let (tp, p, q) = (tp as f64, p as f64, q as f64);
        let pairs = (n * (n - 1) / 2) as f64;
        let fm = tp / (p * q).sqrt();
        let jac = tp / (p + q - tp);
        let expected = p * q / pairs;
        let ari = (tp - expected) / ((p + q) / 2.0 - expected);
        let t = contingency(&a, &b).unwrap();
        for (got, want) in [
            (fowlkes_mallows(&t).unwrap(), fm),
            (adjusted_rand(&t), ari),
            (jaccard(&t), jac),
        ] {
            worst = worst.max((got - want).abs());
        }
    }
    let elapsed = t0.elapsed();
    let pass = worst <= 1e-12 && elapsed < Duration::from_secs(5);
    verdict(
        4,
        "agreement oracle equivalence",
        pass,
        &format!("50 partition pairs, max |index - pair-count oracle| = {worst:.1e}"),
        elapsed,
    );
}

#[test]
fn criterion_05_mode_monotonicity() {
    let t0 = Instant::now();
    let cfg = MeanShiftConfig::default();
    let spec = MixtureSpec {
        components: vec![
            MixtureComponent {
                weight: 0.6,
                mean: vec![0.0],
                cov: vec![vec![1.0]],
            },
            MixtureComponent {
                weight: 0.4,
                mean: vec![3.0],
                cov: vec![vec![0.25]],
            },
        ],
        signal_fraction: 0.0,
        signal: vec![],
    };
    let grid: Vec<f64> = (0..25)
        .map(|i| (0.05f64.ln() + i as f64 * (2.0f64.ln() - 0.05f64.ln()) / 24.0).exp())
        .collect();
    let mut monotone = 0;
    let mut example = String::new();
    for seed in 0..20 {
        let data = sample_mixture(&spec, 150, derive(5, seed)).unwrap();
        let counts: Vec<usize> = grid
            .iter()
            .map(|&h| count_modes(&DensityModel::new(&data, h).unwrap(), &cfg).unwrap())
            .collect();
        if counts.windows(2).all(|w| w[1] <= w[0]) {
            monotone += 1;
        } else if example.is_empty() {
            example = format!("; seed {seed} counts {counts:?}");
        }
    }
    let elapsed = t0.elapsed();
    let pass = monotone == 20 && elapsed < Duration::from_secs(30);
    verdict(
        5,
        "mode-count monotonicity",
        pass,
        &format!("{monotone}/20 models non-increasing over a 25-point sweep{example}"),
        elapsed,
    );
}

#[test]
fn criterion_06_planted_signal() {
    let t0 = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let cfg = scenario(dir.path(), 0.3, 42);
    let run = detect(&cfg, dir.path().join("run"));
    let elapsed = t0.elapsed();
    let rep = &run.report;
    let bw = rep.bandwidth.as_ref().unwrap();
    let mt = rep.mode_test.as_ref().unwrap();
    let ev = rep.evaluation.as_ref().unwrap();

    // (a) selected bandwidth has one mode more than the background
    let a = bw.background_modes == 1 && bw.selected_modes == Some(2);
    // (b) a plateau of at least five grid points at M_bs = 2
    let plateau = bw.plateau;
    let b = plateau.as_ref().is_some_and(|p| p.len >= 5);
    // (c) the extra mode is significant at alpha = 0.001
    let c = run.outcome == Outcome::SignalClaim && mt.alpha == 0.001 && mt.claim;
    // (d) signal recovery against truth
    let tpr = ev.true_positive_rate.unwrap_or(0.0);
    let fm = ev.fowlkes_mallows.unwrap_or(0.0);
    let d = tpr >= 0.7 && fm >= 0.8;

    // the report's FMI agrees with the one recomputed from the labels file
    let labels: Vec<(usize, usize)> = std::fs::read_to_string(run.out_dir.join(LABELS_FILE))
        .unwrap()
        .lines()
        .skip(1)
        .map(|line| {
            let mut f = line.split(',');
            let row = f.next().unwrap().parse().unwrap();
            (row, f.next().unwrap().parse().unwrap())
        })
        .collect();
    let exp = load_csv(
        cfg.data.experimental.as_ref().unwrap(),
        Some(&LabelColumn::new("label")),
    )
    .unwrap();
    let truth = exp.truth().unwrap();
    let classes: Vec<usize> = labels.iter().map(|&(r, _)| truth[r] as usize).collect();
    let clusters: Vec<usize> = labels.iter().map(|&(_, c)| c).collect();
    let refit = fowlkes_mallows(&contingency(&classes, &clusters).unwrap()).unwrap();
    let consistent = (refit - fm).abs() <= 1e-12;

    let pass = a && b && c && d && consistent && elapsed < Duration::from_secs(300);
    verdict(
        6,
        "planted-signal end-to-end",
        pass,
        &format!(
            "M_b = {}, h = {:.3} with M_bs = {:?}; plateau {:?}; claim {}; TPR {tpr:.3} (≥ 0.7), FMI {fm:.3} (≥ 0.8), labels-file FMI {refit:.3}",
            bw.background_modes,
            bw.selected_h.unwrap_or(f64::NAN),
            bw.selected_modes,
            plateau.map(|p| (p.len, p.max_index)),
            mt.claim,
        ),
        elapsed,
    );
}

#[test]
fn criterion_07_no_signal_control() {
    let t0 = Instant::now();
    let mut negative = 0;
    let mut claims = Vec::new();
    for seed in 0..20u64 {
        let dir = tempfile::tempdir().unwrap();
        let cfg = scenario(dir.path(), 0.0, 700 + seed);
        let run = detect(&cfg, dir.path().join("run"));
        match run.outcome {
            Outcome::NoCandidateBandwidth | Outcome::NoSignalEvidence => negative += 1,
            other => claims.push((700 + seed, other)),
        }
    }
    let elapsed = t0.elapsed();
    let pass = negative >= 18 && elapsed < Duration::from_secs(1200);
    verdict(
        7,
        "no-signal control",
        pass,
        &format!("{negative}/20 runs without a claim (≥ 18); other outcomes {claims:?}"),
        elapsed,
    );
}

#[test]
fn criterion_08_variable_selection() {
    let t0 = Instant::now();
    let d = 10;
    let mut shifted = vec![0.0; d];
    shifted[1] = 3.0;
    shifted[2] = 3.0;
    let spec = MixtureSpec {
        components: vec![
            MixtureComponent {
                weight: 0.5,
                mean: vec![0.0; d],
                cov: identity(d),
            },
            MixtureComponent {
                weight: 0.5,
                mean: shifted,
                cov: identity(d),
            },
        ],
        signal_fraction: 0.3,
        signal: vec![1],
    };
    let cfg = VarSelectConfig {
        iterations: 300,
        k: 3,
        ..VarSelectConfig::default()
    };
    let (mut exact, mut empty) = (0, 0);
    for seed in 0..20u64 {
        let xbs = sample_mixture(&spec, 300, derive(8, 2 * seed)).unwrap();
        let xb = sample_mixture(
            &spec.with_signal_fraction(0.0),
            300,
            derive(8, 2 * seed + 1),
        )
        .unwrap();
        let sel = select_variables(&xb, &xbs, &cfg, derive(80, seed)).unwrap();
        exact += usize::from(sel.selected == [1, 2]);
        let control = select_variables(&xb, &xb, &cfg, derive(80, seed)).unwrap();
        empty += usize::from(control.selected.is_empty());
    }
    let elapsed = t0.elapsed();
    let pass = exact >= 18 && empty >= 18 && elapsed < Duration::from_secs(1200);
    verdict(
        8,
        "variable-selection recovery",
        pass,
        &format!("selected exactly dims {{1, 2}} in {exact}/20 runs, empty control selection in {empty}/20 runs (≥ 18 each)"),
        elapsed,
    );
}

#[test]
fn criterion_09_permutation_calibration() {
    let t0 = Instant::now();
    let spec = MixtureSpec {
        components: vec![MixtureComponent {
            weight: 1.0,
            mean: vec![0.0],
            cov: vec![vec![1.0]],
        }],
        signal_fraction: 0.0,
        signal: vec![],
    };
    let mut rejections = 0;
    for seed in 0..200u64 {
        let xb = sample_mixture(&spec, 200, derive(9, 3 * seed)).unwrap();
        let xbs = sample_mixture(&spec, 200, derive(9, 3 * seed + 1)).unwrap();
        let h = normal_scale_bandwidth(&xb).unwrap();
        let out = ise_test(&xb, &xbs, h, 199, derive(9, 3 * seed + 2)).unwrap();
        rejections += usize::from(out.p_value <= 0.05);
    }
    let rate = rejections as f64 / 200.0;
    let elapsed = t0.elapsed();
    let pass = (0.01..=0.10).contains(&rate) && elapsed < Duration::from_secs(600);
    verdict(
        9,
        "permutation-test calibration",
        pass,
        &format!("null rejection rate at 0.05: {rejections}/200 = {rate:.3} (in [0.01, 0.10])"),
        elapsed,
    );
}

#[test]
fn criterion_10_determinism() {
    let t0 = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let cfg = scenario(dir.path(), 0.3, 42);
    let first = detect(&cfg, dir.path().join("first"));
    let second = detect(&cfg, dir.path().join("second"));
    let elapsed = t0.elapsed();
    let read = |run: &RunSummary, name: &str| std::fs::read(run.out_dir.join(name)).unwrap();
    let same_report = read(&first, REPORT_FILE) == read(&second, REPORT_FILE);
    let same_outputs = first.report.outputs == second.report.outputs
        && first
            .report
            .outputs
            .iter()
            .all(|name| read(&first, name) == read(&second, name));
    let pass = same_report && same_outputs;
    verdict(
        10,
        "determinism",
        pass,
        &format!(
            "two runs with seed 42: canonical report byte-identical = {same_report}, all outputs identical = {same_outputs} ({} files)",
            first.report.outputs.len()
        ),
        elapsed,
    );
}
