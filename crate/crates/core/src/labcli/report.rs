use std::fmt::Write as _;
use std::path::PathBuf;

use serde::Serialize;

use super::config::ORIGIN;
use super::pipeline::{CellResult, Domain, Lab, TimingRow};
use crate::error::Result;
use crate::evalkit::MetricSeries;

fn num(x: f64) -> String {
    format!("{x:.6}")
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Median over seeds.
pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        (s[n / 2 - 1] + s[n / 2]) / 2.0
    }
}

/// Final-epoch metrics of one strategy averaged over its seeds.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StrategySummary {
    pub strategy: String,
    pub layers: String,
    pub trainable: usize,
    pub total: usize,
    pub transformer_total: usize,
    pub transformer_trainable: usize,
    pub seeds: usize,
    pub ss: f64,
    pub ers: f64,
    pub ter_target: f64,
    pub ter_source: f64,
}

fn layers_label(c: &CellResult) -> String {
    match c.lora_rank {
        Some(r) => format!("lora-r{r}"),
        None if c.strategy == ORIGIN => "-".into(),
        None => c.layers_1based.iter().map(|l| l.to_string()).collect::<Vec<_>>().join(";"),
    }
}

pub fn summarize(strategy: &str, cells: &[&CellResult]) -> Option<StrategySummary> {
    let first = cells.first()?;
    let pick = |f: fn(&CellResult) -> f64| mean(&cells.iter().map(|c| f(c)).collect::<Vec<_>>());
    Some(StrategySummary {
        strategy: strategy.to_string(),
        layers: layers_label(first),
        trainable: first.trainable,
        total: first.total,
        transformer_total: first.transformer_total,
        transformer_trainable: first.transformer_trainable,
        seeds: cells.len(),
        ss: pick(|c| c.last().ss),
        ers: pick(|c| c.last().ers),
        ter_target: pick(|c| c.last().ter_target),
        ter_source: pick(|c| c.last().ter_source),
    })
}

pub fn report_dir(lab: &Lab, domain: Domain) -> PathBuf {
    match domain {
        Domain::Target => lab.path("report"),
        Domain::Transfer => lab.path("transfer/report"),
    }
}

fn strategies(lab: &Lab, domain: Domain) -> &[String] {
    match domain {
        Domain::Target => &lab.cfg.strategies,
        Domain::Transfer => &lab.cfg.transfer_strategies,
    }
}

/// All finished cells of a domain in config order, plus the missing
/// `(strategy, seed)` pairs.
pub fn collect_cells(lab: &Lab, domain: Domain) -> Result<(Vec<CellResult>, Vec<(String, u64)>)> {
    let mut cells = Vec::new();
    let mut missing = Vec::new();
    for s in strategies(lab, domain) {
        for &seed in &lab.cfg.seeds {
            match lab.load_cell(domain, s, seed)? {
                Some(c) => cells.push(c),
                None => missing.push((s.clone(), seed)),
            }
        }
    }
    Ok((cells, missing))
}

const CSV_HEADER: &str = "strategy,seed,epoch,ss,ers,ter_target,ter_source,trainable_params,total_params";

pub fn report_csv(cells: &[CellResult], missing: &[(String, u64)]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for c in cells {
        for e in &c.epochs {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                c.strategy,
                c.seed,
                e.epoch,
                num(e.ss),
                num(e.ers),
                num(e.ter_target),
                num(e.ter_source),
                c.trainable,
                c.total
            );
        }
    }
    for (s, seed) in missing {
        let _ = writeln!(out, "{s},{seed},,,,,,,");
    }
    out
}

/// One row per strategy with the final-epoch means; `best` names the
/// metrics on which a fine-tuned strategy leads.
pub fn table2_csv(summaries: &[Option<StrategySummary>], names: &[String]) -> String {
    let trained: Vec<&StrategySummary> = summaries.iter().flatten().filter(|s| s.strategy != ORIGIN).collect();
    let best = |f: fn(&StrategySummary) -> f64, high: bool| {
        trained.iter().map(|s| f(s)).fold(if high { f64::NEG_INFINITY } else { f64::INFINITY }, |a, b| if high { a.max(b) } else { a.min(b) })
    };
    let (bss, bers, bter) = (best(|s| s.ss, true), best(|s| s.ers, true), best(|s| s.ter_target, false));
    let mut out = String::from(
        "strategy,layers,trainable_params,total_params,param_fraction,transformer_fraction,ss,ers,ter_target,ter_source,seeds,best\n",
    );
    for (name, s) in names.iter().zip(summaries) {
        let Some(s) = s else {
            let _ = writeln!(out, "{name},,,,,,,,,,0,missing");
            continue;
        };
        let mut flags = Vec::new();
        if s.strategy != ORIGIN {
            if s.ss == bss {
                flags.push("ss");
            }
            if s.ers == bers {
                flags.push("ers");
            }
            if s.ter_target == bter {
                flags.push("ter");
            }
        }
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            s.strategy,
            s.layers,
            s.trainable,
            s.total,
            num(s.trainable as f64 / s.total as f64),
            num(s.transformer_trainable as f64 / s.transformer_total as f64),
            num(s.ss),
            num(s.ers),
            num(s.ter_target),
            num(s.ter_source),
            s.seeds,
            flags.join(";")
        );
    }
    out
}

/// Raw and min-max normalized per-epoch curves of every cell.
pub fn curves(cells: &[CellResult]) -> Result<Vec<MetricSeries>> {
    let mut out = Vec::new();
    for c in cells {
        let col = |f: fn(&super::pipeline::EpochRow) -> f64| c.epochs.iter().map(f).collect::<Vec<_>>();
        out.push(MetricSeries::new("ss", &c.strategy, c.seed, col(|e| e.ss))?);
        out.push(MetricSeries::new("ers", &c.strategy, c.seed, col(|e| e.ers))?);
        out.push(MetricSeries::new("ter_target", &c.strategy, c.seed, col(|e| e.ter_target))?);
        out.push(MetricSeries::new("ter_source", &c.strategy, c.seed, col(|e| e.ter_source))?);
    }
    Ok(out)
}

/// Seconds per 100 steps and the speed-up over full fine-tuning.
pub fn timing_csv(rows: &[TimingRow]) -> String {
    let full = rows.iter().find(|r| r.strategy == "full").map(|r| r.sec_per_100_steps);
    let mut out = String::from("strategy,trainable_params,total_params,steps,sec_per_100_steps,steps_per_sec,speedup_vs_full\n");
    for r in rows {
        let speedup = full.map(|f| format!("{:.2}", f / r.sec_per_100_steps)).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{},{},{:.3},{:.3},{}",
            r.strategy, r.trainable, r.total, r.steps, r.sec_per_100_steps, r.steps_per_sec, speedup
        );
    }
    out
}

fn is_ablation(s: &str) -> bool {
    s.starts_with("csp_plus:") || s.starts_with("rank_min:") || s.starts_with("rank_max:")
}

/// csp next to its widened and rank-swapped variants.
pub fn ablation_csv(summaries: &[Option<StrategySummary>]) -> Option<String> {
    let rows: Vec<&StrategySummary> = summaries
        .iter()
        .flatten()
        .filter(|s| s.strategy == "csp" || is_ablation(&s.strategy))
        .collect();
    if !rows.iter().any(|s| is_ablation(&s.strategy)) {
        return None;
    }
    let mut out = String::from("strategy,layers,trainable_params,ss,ers,ter_target,ter_source\n");
    for s in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            s.strategy,
            s.layers,
            s.trainable,
            num(s.ss),
            num(s.ers),
            num(s.ter_target),
            num(s.ter_source)
        );
    }
    Some(out)
}

/// Writes `report.csv`, `table2.csv`, `curves.json`, plus `timing.csv` and
/// `ablations.csv` when their inputs exist. Returns `false` (after writing
/// a partial report) when cells are missing.
pub fn write_report(lab: &Lab, domain: Domain) -> Result<bool> {
    lab.stage(&match domain {
        Domain::Target => lab.dir.clone(),
        Domain::Transfer => lab.path("transfer"),
    }, "report")?;
    let dir = report_dir(lab, domain);
    std::fs::create_dir_all(&dir)?;
    let (cells, missing) = collect_cells(lab, domain)?;
    let names = strategies(lab, domain).to_vec();
    let summaries: Vec<Option<StrategySummary>> = names
        .iter()
        .map(|n| summarize(n, &cells.iter().filter(|c| &c.strategy == n).collect::<Vec<_>>()))
        .collect();
    std::fs::write(dir.join("report.csv"), report_csv(&cells, &missing))?;
    std::fs::write(dir.join("table2.csv"), table2_csv(&summaries, &names))?;
    std::fs::write(dir.join("curves.json"), serde_json::to_string_pretty(&curves(&cells)?)? + "\n")?;
    std::fs::write(dir.join("meta.json"), format!("{{\n  \"config_hash\": \"{}\"\n}}\n", lab.hash))?;
    if domain == Domain::Target {
        if let Some(t) = lab.load_timing()? {
            std::fs::write(dir.join("timing.csv"), timing_csv(&t))?;
        }
    }
    if let Some(a) = ablation_csv(&summaries) {
        std::fs::write(dir.join("ablations.csv"), a)?;
    }
    if !missing.is_empty() {
        log::warn!("report for {} is missing {} cells", domain.name(), missing.len());
    }
    Ok(missing.is_empty())
}
