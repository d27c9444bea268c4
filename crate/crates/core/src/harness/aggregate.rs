use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::EvalResult;
use crate::nn::Mode;
use crate::sim::TaskKind;

/// Mean and population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Self {
            mean,
            std: var.sqrt(),
        }
    }
}

/// One (plan, task, mode, gamma, eta, fraction) cell across seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub plan: String,
    pub task_id: String,
    pub task_kind: TaskKind,
    pub mode: Mode,
    pub gamma: f64,
    pub eta: f64,
    pub fraction: f64,
    pub seeds: usize,
    pub accuracy: Stat,
    pub macro_f1: Stat,
    pub sve: Stat,
    pub lsvr: Stat,
    /// Mean accuracy minus the LP mean of the same cell.
    pub accuracy_delta_vs_lp: Option<f64>,
    pub macro_f1_delta_vs_lp: Option<f64>,
}

/// Unweighted average of per-task means over all tasks of one kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KindRow {
    pub plan: String,
    pub task_kind: TaskKind,
    pub mode: Mode,
    pub gamma: f64,
    pub eta: f64,
    pub fraction: f64,
    pub tasks: usize,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub sve: f64,
    pub lsvr: f64,
    pub accuracy_delta_vs_lp: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Summary {
    pub rows: Vec<SummaryRow>,
    pub by_kind: Vec<KindRow>,
}

type CellKey = (String, String, u8, u64, u64, u64);

fn key(plan: &str, task: &str, mode: Mode, g: f64, e: f64, f: f64) -> CellKey {
    (
        plan.to_string(),
        task.to_string(),
        mode as u8,
        ordered(g),
        ordered(e),
        ordered(f),
    )
}

/// Bit pattern that sorts like the (nonnegative) float.
fn ordered(x: f64) -> u64 {
    x.to_bits()
}

pub fn aggregate(results: &[EvalResult]) -> Summary {
    let mut groups: BTreeMap<CellKey, Vec<&EvalResult>> = BTreeMap::new();
    for r in results {
        groups
            .entry(key(&r.plan, &r.task_id, r.mode, r.gamma, r.eta, r.fraction))
            .or_default()
            .push(r);
    }
    let mut rows: Vec<SummaryRow> = groups
        .values()
        .map(|g| {
            let first = g[0];
            let stat = |f: fn(&EvalResult) -> f64| Stat::of(&g.iter().map(|r| f(r)).collect::<Vec<_>>());
            SummaryRow {
                plan: first.plan.clone(),
                task_id: first.task_id.clone(),
                task_kind: first.task_kind,
                mode: first.mode,
                gamma: first.gamma,
                eta: first.eta,
                fraction: first.fraction,
                seeds: g.len(),
                accuracy: stat(|r| r.accuracy),
                macro_f1: stat(|r| r.macro_f1),
                sve: stat(|r| r.sve),
                lsvr: stat(|r| r.lsvr),
                accuracy_delta_vs_lp: None,
                macro_f1_delta_vs_lp: None,
            }
        })
        .collect();
    let lp: BTreeMap<CellKey, (f64, f64)> = rows
        .iter()
        .filter(|r| r.mode == Mode::Lp)
        .map(|r| {
            (
                key(&r.plan, &r.task_id, Mode::Lp, r.gamma, r.eta, r.fraction),
                (r.accuracy.mean, r.macro_f1.mean),
            )
        })
        .collect();
    for r in &mut rows {
        if let Some(&(acc, f1)) = lp.get(&key(&r.plan, &r.task_id, Mode::Lp, r.gamma, r.eta, r.fraction)) {
            r.accuracy_delta_vs_lp = Some(r.accuracy.mean - acc);
            r.macro_f1_delta_vs_lp = Some(r.macro_f1.mean - f1);
        }
    }

    let mut kinds: BTreeMap<(String, TaskKind, u8, u64, u64, u64), Vec<&SummaryRow>> = BTreeMap::new();
    for r in &rows {
        kinds
            .entry((
                r.plan.clone(),
                r.task_kind,
                r.mode as u8,
                ordered(r.gamma),
                ordered(r.eta),
                ordered(r.fraction),
            ))
            .or_default()
            .push(r);
    }
    let by_kind = kinds
        .values()
        .map(|g| {
            let n = g.len() as f64;
            let mean = |f: fn(&SummaryRow) -> f64| g.iter().map(|r| f(r)).sum::<f64>() / n;
            let first = g[0];
            let delta = if g.iter().all(|r| r.accuracy_delta_vs_lp.is_some()) {
                Some(g.iter().filter_map(|r| r.accuracy_delta_vs_lp).sum::<f64>() / n)
            } else {
                None
            };
            KindRow {
                plan: first.plan.clone(),
                task_kind: first.task_kind,
                mode: first.mode,
                gamma: first.gamma,
                eta: first.eta,
                fraction: first.fraction,
                tasks: g.len(),
                accuracy: mean(|r| r.accuracy.mean),
                macro_f1: mean(|r| r.macro_f1.mean),
                sve: mean(|r| r.sve.mean),
                lsvr: mean(|r| r.lsvr.mean),
                accuracy_delta_vs_lp: delta,
            }
        })
        .collect();
    Summary { rows, by_kind }
}

/// Plot-ready series: one line per summary row, sorted by gamma within each
/// (plan, task, mode, eta, fraction) curve.
pub fn series_csv(summary: &Summary) -> String {
    let mut rows: Vec<&SummaryRow> = summary.rows.iter().collect();
    rows.sort_by(|a, b| {
        (&a.plan, &a.task_id, a.mode as u8)
            .cmp(&(&b.plan, &b.task_id, b.mode as u8))
            .then(a.eta.total_cmp(&b.eta))
            .then(a.fraction.total_cmp(&b.fraction))
            .then(a.gamma.total_cmp(&b.gamma))
    });
    let mut out = String::from(
        "plan,task,kind,mode,eta,fraction,gamma,seeds,accuracy_mean,accuracy_std,macro_f1_mean,macro_f1_std,sve_mean,sve_std,lsvr_mean,lsvr_std,accuracy_delta_vs_lp\n",
    );
    for r in rows {
        let kind = match r.task_kind {
            TaskKind::Id => "ID",
            TaskKind::Ood => "OOD",
        };
        let delta = r.accuracy_delta_vs_lp.map_or(String::new(), |d| d.to_string());
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            r.plan,
            r.task_id,
            kind,
            r.mode,
            r.eta,
            r.fraction,
            r.gamma,
            r.seeds,
            r.accuracy.mean,
            r.accuracy.std,
            r.macro_f1.mean,
            r.macro_f1.std,
            r.sve.mean,
            r.sve.std,
            r.lsvr.mean,
            r.lsvr.std,
            delta
        ));
    }
    out
}

/// Human-readable table of the per-kind averages.
pub fn kind_table(summary: &Summary) -> String {
    let mut out = format!(
        "{:<12} {:<4} {:<12} {:>6} {:>6} {:>6} {:>8} {:>8} {:>8} {:>8} {:>9}\n",
        "plan", "kind", "mode", "gamma", "eta", "frac", "acc", "f1", "sve", "lsvr", "d_acc_lp"
    );
    for r in &summary.by_kind {
        let kind = match r.task_kind {
            TaskKind::Id => "ID",
            TaskKind::Ood => "OOD",
        };
        out.push_str(&format!(
            "{:<12} {:<4} {:<12} {:>6.2} {:>6.2} {:>6.2} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>9}\n",
            r.plan,
            kind,
            r.mode.as_str(),
            r.gamma,
            r.eta,
            r.fraction,
            r.accuracy,
            r.macro_f1,
            r.sve,
            r.lsvr,
            r.accuracy_delta_vs_lp
                .map_or("-".to_string(), |d| format!("{d:+.4}"))
        ));
    }
    out
}
