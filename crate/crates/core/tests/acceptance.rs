//! Acceptance suite. Each test prints one `PASS` or `FAIL` line to stderr
//! (outside the test harness capture) and fails when its criterion does.
//!
//! Criteria 6 to 10 and 12 share two executions of the bundled sweep, run
//! once per process.

mod common;

use std::collections::BTreeMap;
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use common::grad::{linear_probe_worst, lora_worst, mlp_worst, regularizers_worst};
use common::{gaussian, gram, jacobi_eigenvalues, rng, to_rows};
use nmtune::harness::{read_results, EvalResult};
use nmtune::io::{decode_fmat, encode_fmat, fmat_len};
use nmtune::linalg::{svd, Matrix};
use nmtune::loss::{nmtune_total, NmTuneConfig};
use nmtune::nn::{cross_entropy, train, FeatureSource, FeatureTap, LoraModel, Mode, TrainConfig};
use nmtune::noise::{flip_asymmetric, flip_symmetric, swap_pairs};
use nmtune::sim::{ExtractorSpec, ToyExtractor};
use nmtune::spectrum::{lsvr, sve};
use rand::Rng;

// tolerances
const METRIC_TOL: f64 = 1e-9;
const SVD_REL_TOL: f64 = 1e-8;
const GRAD_TOL: f64 = 1e-4;
const GRAD_SVD_TOL: f64 = 1e-3;
const TREND_A_SLACK: f64 = 0.002;
const TREND_B_STEP: f64 = 0.005;
const LSVR_STEP: f64 = 0.01;
const MIN_SEEDS: usize = 10;

// runtime budgets
const METRIC_BUDGET: Duration = Duration::from_secs(1);
const SVD_BUDGET: Duration = Duration::from_secs(10);
const GRAD_BUDGET: Duration = Duration::from_secs(30);
const NOISE_BUDGET: Duration = Duration::from_secs(5);
const SWEEP_BUDGET: Duration = Duration::from_secs(15 * 60);

const GAMMAS: [f64; 5] = [0.0, 0.05, 0.1, 0.2, 0.3];

type Outcome = Result<String, String>;

/// Runs `check`, prints the verdict line, then fails the test on `FAIL`.
/// A panic inside `check` counts as a failure with its message.
fn criterion(id: u32, title: &str, budget: Option<Duration>, check: impl FnOnce() -> Outcome) {
    let start = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panic".into());
        Err(msg)
    });
    let elapsed = start.elapsed();
    let outcome = match (outcome, budget) {
        (Ok(_), Some(b)) if elapsed > b => Err(format!("took {elapsed:.2?}, budget {b:?}")),
        (o, _) => o,
    };
    let timing = match budget {
        Some(b) => format!("{:.2} s, budget {} s", elapsed.as_secs_f64(), b.as_secs()),
        None => format!("{:.2} s", elapsed.as_secs_f64()),
    };
    let (verdict, detail) = match &outcome {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    let line = format!("[acceptance] criterion {id:>2} {title}: {verdict} ({detail}; {timing})");
    let _ = writeln!(std::io::stderr().lock(), "{line}");
    assert!(outcome.is_ok(), "{line}");
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

#[test]
fn criterion_01_analytic_metrics() {
    criterion(1, "analytic sve/lsvr", Some(METRIC_BUDGET), || {
        let ln4 = 4f64.ln();
        let h31 = -(0.75f64 * 0.75f64.ln() + 0.25 * 0.25f64.ln());
        let l31 = -(0.75f64.ln());
        let cases: [(&[f64], f64, f64); 3] = [
            (&[1.0, 1.0, 1.0, 1.0], ln4, ln4),
            (&[5.0, 0.0, 0.0], 0.0, 0.0),
            (&[3.0, 1.0], h31, l31),
        ];
        let mut worst: f64 = 0.0;
        for (sigma, h, l) in cases {
            worst = worst.max((sve(sigma).unwrap() - h).abs());
            worst = worst.max((lsvr(sigma).unwrap() - l).abs());
        }
        ensure(worst < METRIC_TOL, || format!("error {worst:e}"))?;
        Ok(format!("max error {worst:.1e} < {METRIC_TOL:e}"))
    });
}

fn orthonormality_error(m: &Matrix) -> f64 {
    let g = m.matmul_tn(m).unwrap();
    let mut worst: f64 = 0.0;
    for i in 0..g.rows() {
        for j in 0..g.cols() {
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((g.get(i, j) - target).abs());
        }
    }
    worst
}

#[test]
fn criterion_02_svd_oracle() {
    criterion(2, "svd against eigen oracle", Some(SVD_BUDGET), || {
        let (mut sigma_err, mut rec_err, mut orth_err) = (0.0f64, 0.0f64, 0.0f64);
        for seed in 0..50u64 {
            let mut r = rng(1_000 + seed);
            let (rows, cols) = (r.random_range(1..=16), r.random_range(1..=12));
            let f = gaussian(rows, cols, seed);
            let dec = svd(&f).unwrap();
            let want: Vec<f64> = jacobi_eigenvalues(gram(&to_rows(&f)))
                .into_iter()
                .take(rows.min(cols))
                .map(|l| l.max(0.0).sqrt())
                .collect();
            ensure(dec.sigma.len() == want.len(), || format!("seed {seed}: length"))?;
            for (got, exp) in dec.sigma.iter().zip(&want) {
                sigma_err = sigma_err.max((got - exp).abs() / exp.max(1e-6 * want[0]));
            }
            let rec = dec.reconstruct().sub(&f).unwrap().frobenius_norm();
            rec_err = rec_err.max(rec / f.frobenius_norm().max(1.0));
            orth_err = orth_err
                .max(orthonormality_error(&dec.u))
                .max(orthonormality_error(&dec.vt.transpose()));
        }
        ensure(sigma_err < SVD_REL_TOL, || format!("sigma relative error {sigma_err:e}"))?;
        ensure(rec_err <= 1e-8, || format!("reconstruction {rec_err:e}"))?;
        ensure(orth_err < 1e-10, || format!("orthonormality {orth_err:e}"))?;
        Ok(format!(
            "50 matrices, sigma {sigma_err:.1e}, reconstruction {rec_err:.1e}, orthonormality {orth_err:.1e}"
        ))
    });
}

#[test]
fn criterion_03_gradient_suite() {
    criterion(3, "finite-difference gradients", Some(GRAD_BUDGET), || {
        let half = NmTuneConfig {
            lambda: 0.5,
            ..NmTuneConfig::default()
        };
        let [mse, cov, sv, ce] = regularizers_worst();
        let checks = [
            ("mse", mse, GRAD_TOL),
            ("cov", cov, GRAD_TOL),
            ("svd", sv, GRAD_SVD_TOL),
            ("ce", ce, GRAD_TOL),
            ("lp", linear_probe_worst(), GRAD_TOL),
            ("mlp", mlp_worst(FeatureTap::PostRelu, None), GRAD_TOL),
            ("mlp+nmtune", mlp_worst(FeatureTap::PostRelu, Some(&half)), GRAD_TOL),
            ("lora", lora_worst(None), GRAD_TOL),
            ("lora+nmtune", lora_worst(Some(&half)), GRAD_TOL),
        ];
        let mut parts = Vec::new();
        for (name, err, tol) in checks {
            ensure(err < tol, || format!("{name} error {err:e} >= {tol:e}"))?;
            parts.push(format!("{name} {err:.1e}"));
        }
        Ok(format!("20 instances each, {}", parts.join(", ")))
    });
}

fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor() as usize
}

#[test]
fn criterion_04_noise_exactness() {
    criterion(4, "noise injection counts", Some(NOISE_BUDGET), || {
        let mut gammas = GAMMAS.to_vec();
        gammas.extend([0.5, 1.0]);
        let mut cells = 0;
        for &n in &[1usize, 9, 50, 101, 1000] {
            for &c in &[2usize, 5, 10] {
                let labels: Vec<usize> = (0..n).map(|i| (i * 7) % c).collect();
                for &g in &gammas {
                    for seed in 0..3 {
                        let out = flip_symmetric(&labels, c, g, seed).unwrap();
                        let k = labels.iter().zip(&out.labels).filter(|(a, b)| a != b).count();
                        let want = round_half_up(g * n as f64);
                        ensure(k == want, || format!("symmetric n={n} c={c} g={g}: {k} != {want}"))?;
                        let subset: Vec<usize> =
                            if c < 4 { (0..c).collect() } else { (0..c).step_by(2).collect() };
                        let eligible = labels.iter().filter(|l| subset.contains(l)).count();
                        let out = flip_asymmetric(&labels, c, g, &subset, seed).unwrap();
                        let k = labels.iter().zip(&out.labels).filter(|(a, b)| a != b).count();
                        let want = round_half_up(g * eligible as f64);
                        ensure(k == want, || format!("asymmetric n={n} c={c} g={g}: {k} != {want}"))?;
                        if n >= 2 {
                            let perm = swap_pairs(n, g, seed).unwrap();
                            ensure((0..n).all(|i| perm[perm[i]] == i), || format!("swap n={n} g={g}"))?;
                        }
                        cells += 1;
                    }
                }
            }
        }
        for seed in 0..5 {
            let labels: Vec<usize> = (0..500).map(|i| i % 6).collect();
            let out = flip_symmetric(&labels, 6, 1.0, seed).unwrap();
            ensure(labels.iter().zip(&out.labels).all(|(a, b)| a != b), || "fixed label at gamma 1".into())?;
        }
        Ok(format!("{cells} grid cells exact, gamma 1 moves every label, swaps are involutions"))
    });
}

#[test]
fn criterion_05_degenerate_equivalences() {
    criterion(5, "degenerate configurations", None, || {
        let x = gaussian(60, 6, 3);
        let mut r = rng(4);
        let y: Vec<usize> = (0..60).map(|_| r.random_range(0..3)).collect();
        let source = FeatureSource::Features(&x);
        let mut mlp = TrainConfig::for_mode(Mode::Mlp).with_seed(11);
        mlp.epochs = 5;
        let nm = TrainConfig {
            mode: Mode::NmtuneMlp,
            nmtune: Some(NmTuneConfig {
                lambda: 0.0,
                ..NmTuneConfig::default()
            }),
            ..mlp.clone()
        };
        let (a, ta) = train(&source, &y, 3, &mlp).unwrap();
        let (b, tb) = train(&source, &y, 3, &nm).unwrap();
        ensure(a == b && ta.epochs == tb.epochs, || "lambda 0 differs from MLP".into())?;

        for seed in 0..5 {
            let mut r = rng(seed);
            let spec = ExtractorSpec {
                hidden_dim: 10,
                feature_dim: 4,
            };
            let base = ToyExtractor::init(6, spec, &mut r);
            let base = ToyExtractor::from_layers(base.layers().to_vec()).unwrap();
            let model = LoraModel::new(base.clone(), 3, 2, 1.0, &mut r);
            let xs = gaussian(7, 6, 50 + seed);
            let fwd = model.forward(&xs).unwrap();
            let frozen = base.forward_layers(&xs).unwrap();
            ensure(fwd.outputs == frozen, || "LoRA at init moved a layer output".into())?;
        }

        let logits = gaussian(8, 4, 1);
        let yl = vec![0, 1, 2, 3, 0, 1, 2, 3];
        let ce = cross_entropy(&logits, &yl).unwrap();
        let zero = NmTuneConfig {
            lambda: 0.7,
            w_mse: 0.0,
            w_cov: 0.0,
            w_svd: 0.0,
            ..NmTuneConfig::default()
        };
        let t = nmtune_total(ce.value, &ce.grad_z, &gaussian(8, 4, 2), &gaussian(8, 4, 3), &zero)
            .unwrap();
        ensure(
            t.value.to_bits() == ce.value.to_bits() && t.grad_z == ce.grad_z,
            || "zero weights differ from cross-entropy".into(),
        )?;
        Ok("lambda 0 equals MLP bitwise, LoRA init equals frozen, zero weights equal CE".into())
    });
}

/// (plan, task, mode, gamma, eta), the float parts scaled to integers.
type CellKey = (String, String, String, u64, u64);

/// Accuracy and LSVR sums per cell, with seed counts.
struct Table {
    cells: BTreeMap<CellKey, (f64, f64, usize)>,
}

fn key_f(x: f64) -> u64 {
    (x * 1e6).round() as u64
}

impl Table {
    fn new(results: &[EvalResult]) -> Self {
        let mut cells: BTreeMap<_, (f64, f64, usize)> = BTreeMap::new();
        for r in results {
            let k = (
                r.plan.clone(),
                r.task_id.clone(),
                r.mode.as_str().to_string(),
                key_f(r.gamma),
                key_f(r.eta),
            );
            let e = cells.entry(k).or_default();
            e.0 += r.accuracy;
            e.1 += r.lsvr;
            e.2 += 1;
        }
        Self { cells }
    }

    fn get(&self, plan: &str, task: &str, mode: &str, gamma: f64, eta: f64) -> Result<(f64, f64), String> {
        let k = (plan.into(), task.into(), mode.into(), key_f(gamma), key_f(eta));
        let &(acc, l, n) = self
            .cells
            .get(&k)
            .ok_or_else(|| format!("no results for {plan}/{task}/{mode} g={gamma} e={eta}"))?;
        ensure(n >= MIN_SEEDS, || format!("{plan}/{task}/{mode} g={gamma}: {n} seeds"))?;
        Ok((acc / n as f64, l / n as f64))
    }

    fn acc_curve(&self, plan: &str, task: &str, mode: &str, eta: f64) -> Result<Vec<f64>, String> {
        GAMMAS.iter().map(|&g| self.get(plan, task, mode, g, eta).map(|v| v.0)).collect()
    }
}

fn fmt_curve(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.4}")).collect();
    format!("[{}]", parts.join(", "))
}

struct SweepRun {
    elapsed: Duration,
    identical: Result<usize, String>,
    failures: usize,
    table: Result<Table, String>,
}

fn bundled_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.json")
}

fn files_under(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_path_buf();
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

fn sweep_into(dir: &Path) -> Result<String, String> {
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let config = bundled_config();
    let args = ["nmtune", "--out", dir.to_str().unwrap(), "sweep", "--config", config.to_str().unwrap()];
    let code = nmtune::cli::run(args, &mut out, &mut err);
    let stderr = String::from_utf8_lossy(&err).to_string();
    if code != 0 {
        return Err(format!("sweep exited {code}: {stderr}"));
    }
    Ok(stderr)
}

fn sweep() -> &'static SweepRun {
    static RUN: OnceLock<SweepRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let start = Instant::now();
        let first = sweep_into(a.path());
        let elapsed = start.elapsed();
        let second = sweep_into(b.path());
        let (failures, identical) = match (&first, &second) {
            (Ok(warn), Ok(_)) => {
                let (fa, fb) = (files_under(a.path()), files_under(b.path()));
                let same = if fa.is_empty() {
                    Err("empty results directory".into())
                } else if fa == fb {
                    Ok(fa.len())
                } else {
                    let diff = fa
                        .keys()
                        .chain(fb.keys())
                        .find(|k| fa.get(*k) != fb.get(*k))
                        .map(|k| k.display().to_string())
                        .unwrap_or_default();
                    Err(format!("directories differ at {diff}"))
                };
                (warn.lines().count(), same)
            }
            (Err(e), _) | (_, Err(e)) => (0, Err(e.clone())),
        };
        let table = first
            .and_then(|_| read_results(a.path()).map_err(|e| e.to_string()))
            .map(|r| Table::new(&r));
        SweepRun {
            elapsed,
            identical,
            failures,
            table,
        }
    })
}

fn with_table(f: impl FnOnce(&Table) -> Outcome) -> Outcome {
    let run = sweep();
    ensure(run.failures == 0, || format!("{} cells failed", run.failures))?;
    let table = run.table.as_ref().map_err(Clone::clone)?;
    f(table)
}

const PRE: &str = "pretrain-noise";
const DOWN: &str = "downstream-noise";

#[test]
fn criterion_06_trend_a_id_linear_probe() {
    criterion(6, "ID LP trend over gamma", None, || {
        let run = sweep();
        ensure(run.elapsed <= SWEEP_BUDGET, || format!("sweep took {:.1?}", run.elapsed))?;
        with_table(|t| {
            let acc = t.acc_curve(PRE, "id", "LP", 0.0)?;
            ensure(acc[1] >= acc[0] - TREND_A_SLACK, || format!("acc(.05) too low: {}", fmt_curve(&acc)))?;
            ensure(acc[4] < acc[0], || format!("acc(.3) not below acc(0): {}", fmt_curve(&acc)))?;
            Ok(format!(
                "acc {} over gamma {GAMMAS:?}, sweep {:.0} s of {} s",
                fmt_curve(&acc),
                run.elapsed.as_secs_f64(),
                SWEEP_BUDGET.as_secs()
            ))
        })
    });
}

#[test]
fn criterion_07_trend_b_ood_linear_probe() {
    criterion(7, "OOD LP trend over gamma", None, || {
        with_table(|t| {
            let acc = t.acc_curve(PRE, "ood", "LP", 0.0)?;
            for w in acc.windows(2) {
                ensure(w[1] <= w[0] + TREND_B_STEP, || format!("step up: {}", fmt_curve(&acc)))?;
            }
            ensure(acc[4] < acc[0], || format!("acc(.3) not below acc(0): {}", fmt_curve(&acc)))?;
            Ok(format!("acc {}", fmt_curve(&acc)))
        })
    });
}

#[test]
fn criterion_08_ood_lsvr_grows() {
    criterion(8, "OOD frozen-feature LSVR over gamma", None, || {
        with_table(|t| {
            let l: Vec<f64> = GAMMAS
                .iter()
                .map(|&g| t.get(PRE, "ood", "LP", g, 0.0).map(|v| v.1))
                .collect::<Result<_, _>>()?;
            for w in l.windows(2) {
                ensure(w[1] >= w[0] - LSVR_STEP, || format!("LSVR drops: {}", fmt_curve(&l)))?;
            }
            Ok(format!("lsvr {}", fmt_curve(&l)))
        })
    });
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// How far the best noisy gamma sits above the clean one.
fn noisy_advantage(curve: &[f64]) -> f64 {
    curve[1..].iter().copied().fold(f64::NEG_INFINITY, f64::max) - curve[0]
}

#[test]
fn criterion_09_nmtune_over_mlp() {
    criterion(9, "NMTune versus MLP and rectification", None, || {
        with_table(|t| {
            let mut parts = Vec::new();
            for task in ["id", "ood"] {
                let nm = mean(&t.acc_curve(PRE, task, "NMTUNE_MLP", 0.0)?);
                let mlp = mean(&t.acc_curve(PRE, task, "MLP", 0.0)?);
                ensure(nm >= mlp, || format!("{task}: NMTune {nm:.4} < MLP {mlp:.4}"))?;
                parts.push(format!("{task} NMTune {nm:.4} vs MLP {mlp:.4}"));
            }
            let lp = noisy_advantage(&t.acc_curve(PRE, "id", "LP", 0.0)?);
            let nm = noisy_advantage(&t.acc_curve(PRE, "id", "NMTUNE_MLP", 0.0)?);
            ensure(nm <= lp, || format!("noisy advantage grew: NMTune {nm:+.4} > LP {lp:+.4}"))?;
            parts.push(format!("noisy advantage LP {lp:+.4}, NMTune {nm:+.4}"));
            Ok(parts.join(", "))
        })
    });
}

#[test]
fn criterion_10_downstream_noise_grid() {
    criterion(10, "downstream-noise grid", None, || {
        with_table(|t| {
            let mut parts = Vec::new();
            let mut failed = Vec::new();
            for eta in [0.0, 0.1, 0.2, 0.3] {
                let nm = mean(&t.acc_curve(DOWN, "id", "NMTUNE_MLP", eta)?);
                let lp = mean(&t.acc_curve(DOWN, "id", "LP", eta)?);
                parts.push(format!("eta {eta}: NMTune {nm:.4} LP {lp:.4}"));
                if nm < lp {
                    failed.push(format!("eta {eta}"));
                }
            }
            for eta in [0.4, 0.5] {
                let curve = t.acc_curve(DOWN, "id", "NMTUNE_MLP", eta)?;
                let best = (0..curve.len()).fold(0, |b, i| if curve[i] > curve[b] { i } else { b });
                parts.push(format!("eta {eta}: NMTune {} best gamma {}", fmt_curve(&curve), GAMMAS[best]));
                if best != 0 {
                    failed.push(format!("eta {eta} best gamma {}", GAMMAS[best]));
                }
            }
            let detail = parts.join("; ");
            if failed.is_empty() {
                Ok(detail)
            } else {
                Err(format!("failing at {}; {detail}", failed.join(", ")))
            }
        })
    });
}

#[test]
fn criterion_11_fmat_round_trips() {
    criterion(11, "FMAT round trips and corruption", None, || {
        let mut r = rng(2024);
        let specials = [0.0, -0.0, f64::MIN_POSITIVE, 5e-324, f64::MAX, -f64::MAX, f64::INFINITY, f64::NAN];
        let mut corrupted = 0;
        for i in 0..1000 {
            let (rows, cols) = (r.random_range(0..24), r.random_range(0..24));
            let data: Vec<f64> = (0..rows * cols)
                .map(|_| {
                    if r.random_bool(0.1) {
                        specials[r.random_range(0..specials.len())]
                    } else {
                        f64::from_bits(r.random())
                    }
                })
                .collect();
            let m = Matrix::from_vec(rows, cols, data).unwrap();
            let bytes = encode_fmat(&m);
            ensure(bytes.len() == fmat_len(rows, cols), || format!("trip {i}: length"))?;
            let back = decode_fmat(&bytes).map_err(|e| format!("trip {i}: {e}"))?;
            let bits = |m: &Matrix| m.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            ensure(back.shape() == m.shape() && bits(&back) == bits(&m), || format!("trip {i}: not bit-exact"))?;
            if rows * cols > 0 {
                let mut bad = bytes.clone();
                let at = r.random_range(0..bad.len());
                bad[at] ^= r.random_range(1..=255u8);
                ensure(decode_fmat(&bad).is_err(), || format!("trip {i}: corruption at byte {at} missed"))?;
                corrupted += 1;
            }
        }
        Ok(format!("1000 bit-exact round trips, {corrupted} corruptions detected"))
    });
}

#[test]
fn criterion_12_sweep_determinism() {
    criterion(12, "byte-identical sweeps", None, || {
        let run = sweep();
        let files = run.identical.clone()?;
        Ok(format!("{files} files identical across two executions"))
    });
}
