//! Plain-text result tables printed to stdout.

use glitchlab::detect::{Metrics, SweepRow};
use glitchlab::repair::RepairReport;

fn pct(x: f64) -> String {
    format!("{:.2}%", 100.0 * x)
}

pub fn detection_table(rows: &[(&str, Option<Metrics>, usize)]) -> String {
    let mut s = format!("{:<14} {:>6} {:>10} {:>10} {:>8} {:>13}\n", "Method", "TP", "Precision", "Recall", "F1", "Oracle calls");
    for (name, m, calls) in rows {
        match m {
            Some(m) => s += &format!(
                "{:<14} {:>6} {:>10} {:>10} {:>8.4} {:>13}\n",
                name,
                m.tp,
                pct(m.precision),
                pct(m.recall),
                m.f1,
                calls
            ),
            None => s += &format!("{:<14} {:>6} {:>10} {:>10} {:>8} {:>13}\n", name, "-", "-", "-", "-", calls),
        }
    }
    s
}

pub fn repair_table(rows: &[(&str, &RepairReport)]) -> String {
    let mut s = format!("{:<14} {:>8} {:>8} {:>8} {:>8} {:>12}\n", "Method", "alpha", "beta", "Repaired", "Total", "Repair rate");
    for (name, r) in rows {
        s += &format!(
            "{:<14} {:>8.3} {:>8.3} {:>8} {:>8} {:>12}\n",
            name,
            r.factors.alpha,
            r.factors.beta,
            r.repaired_tokens,
            r.total_glitch,
            r.repair_rate.map_or("n/a".to_string(), pct)
        );
    }
    s
}

pub fn sweep_table(rows: &[SweepRow]) -> String {
    let mut s = format!("{:<36} {:>7} {:>6} {:>10} {:>12}\n", "Sites", "C", "Degree", "F1", "F1 (raw)");
    for r in rows {
        let sites: Vec<&str> = r.sites.iter().map(|s| s.as_str()).collect();
        s += &format!(
            "{:<36} {:>7} {:>6} {:>10.4} {:>12.4}\n",
            sites.join("+"),
            r.c,
            r.degree,
            r.f1_validated,
            r.f1_unvalidated
        );
    }
    s
}
