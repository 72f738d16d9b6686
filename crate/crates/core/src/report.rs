//! Plain-text tables rendered from run and ablation reports.

use std::collections::BTreeMap;
use std::fmt::Write;

use crate::synth::{CLASS_NAMES, NUM_CLASSES};
use crate::trainer::{AblationReport, Arm, RunReport, WeightMode};

fn pct(x: f64) -> String {
    format!("{:.1}", 100.0 * x)
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn seeds<'a>(it: impl Iterator<Item = &'a u64>) -> String {
    let mut s: Vec<u64> = it.copied().collect();
    s.sort_unstable();
    s.dedup();
    s.iter().map(u64::to_string).collect::<Vec<_>>().join(",")
}

fn table(header: &[String], rows: &[Vec<String>]) -> String {
    let mut width: Vec<usize> = header.iter().map(String::len).collect();
    for r in rows {
        for (w, c) in width.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let line = |cells: &[String]| {
        let mut out = String::new();
        for (i, (c, w)) in cells.iter().zip(&width).enumerate() {
            if i == 0 {
                write!(out, "{c:<w$}").unwrap();
            } else {
                write!(out, "  {c:>w$}").unwrap();
            }
        }
        out.trim_end().to_string() + "\n"
    };
    let mut out = line(header);
    out.push_str(&"-".repeat(width.iter().sum::<usize>() + 2 * (width.len() - 1)));
    out.push('\n');
    rows.iter().for_each(|r| out.push_str(&line(r)));
    out
}

/// Per-class AP table and metadata of a single run.
pub fn render_run(r: &RunReport) -> String {
    let mut out = String::new();
    writeln!(out, "arm: {}", r.arm).unwrap();
    writeln!(out, "seed: {}", r.seed).unwrap();
    writeln!(out, "config hash: {}", r.config_hash).unwrap();
    writeln!(out, "AP protocol: {}", r.ap_protocol).unwrap();
    for s in &r.stages {
        writeln!(
            out,
            "stage {}: labeled {} ({} scenes), unlabeled {} ({} scenes), {} iterations, weights {}, detector {}, discriminator {}",
            s.name,
            s.labeled_domains,
            s.labeled_samples,
            if s.unlabeled_domain.is_empty() { "-" } else { &s.unlabeled_domain },
            s.unlabeled_samples,
            s.iterations,
            s.weight_mode,
            s.detector_init,
            s.discriminator_init
        )
        .unwrap();
    }
    if let Some(w) = &r.intermediate_weights {
        writeln!(out, "intermediate weights: n={} mean={:.4} min={:.4} max={:.4}", w.count, w.mean, w.min, w.max).unwrap();
    }
    out.push('\n');
    let header: Vec<String> = ["split", "class", "AP", "GT", "TP", "FP"].map(String::from).to_vec();
    let mut rows = Vec::new();
    for (split, e) in [("eval_T", &r.eval_target), ("eval_S", &r.eval_source)] {
        for c in &e.classes {
            rows.push(vec![
                split.to_string(),
                CLASS_NAMES[c.class].to_string(),
                pct(c.ap),
                c.num_gt.to_string(),
                c.tp.to_string(),
                c.fp.to_string(),
            ]);
        }
        rows.push(vec![split.to_string(), "mAP".into(), pct(e.map), String::new(), String::new(), String::new()]);
    }
    out.push_str(&table(&header, &rows));
    out
}

/// Arms as rows, target-eval per-class AP and mAP as columns, averaged over
/// the seeds present. Values are percentages.
pub fn render_arm_table(reports: &[RunReport]) -> String {
    let mut by_arm: BTreeMap<usize, Vec<&RunReport>> = BTreeMap::new();
    for r in reports {
        let idx = Arm::ALL.iter().position(|a| *a == r.arm).unwrap_or(usize::MAX);
        by_arm.entry(idx).or_default().push(r);
    }
    let mut header = vec!["method".to_string()];
    header.extend(CLASS_NAMES.iter().map(|c| format!("AP {c}")));
    header.extend(["mAP".to_string(), "seeds".to_string()]);
    let mut rows = Vec::new();
    for runs in by_arm.values() {
        let mut row = vec![runs[0].arm.to_string()];
        for c in 0..NUM_CLASSES {
            let aps: Vec<f64> = runs.iter().filter_map(|r| r.eval_target.ap(c)).collect();
            row.push(if aps.is_empty() { "-".into() } else { pct(mean(&aps)) });
        }
        let maps: Vec<f64> = runs.iter().map(|r| r.eval_target.map).collect();
        row.push(pct(mean(&maps)));
        row.push(seeds(runs.iter().map(|r| &r.seed)));
        rows.push(row);
    }
    let mut out = String::from("Target-domain AP (%) by method\n");
    out.push_str(&table(&header, &rows));
    if let Some(r) = reports.first() {
        writeln!(out, "AP protocol: {}", r.ap_protocol).unwrap();
    }
    out
}

/// Weight settings as columns, target mAP per seed and the mean as rows.
pub fn render_ablation_table(reports: &[AblationReport]) -> String {
    let Some(first) = reports.first() else {
        return String::from("no ablation reports\n");
    };
    let modes: Vec<WeightMode> = first.rows.iter().map(|r| r.weight_mode).collect();
    let label = |m: &WeightMode| match m {
        WeightMode::Fixed(c) => format!("w={c}"),
        WeightMode::Dynamic => "dynamic".to_string(),
        WeightMode::None => "w=1 (none)".to_string(),
    };
    let mut header = vec!["seed".to_string()];
    header.extend(modes.iter().map(label));
    let mut rows = Vec::new();
    let mut cols: Vec<Vec<f64>> = vec![Vec::new(); modes.len()];
    for rep in reports {
        let mut row = vec![rep.seed.to_string()];
        for (i, m) in modes.iter().enumerate() {
            match rep.rows.iter().find(|r| r.weight_mode == *m) {
                Some(r) => {
                    cols[i].push(r.map);
                    row.push(pct(r.map));
                }
                None => row.push("-".into()),
            }
        }
        rows.push(row);
    }
    let mut row = vec!["mean".to_string()];
    row.extend(cols.iter().map(|c| if c.is_empty() { "-".into() } else { pct(mean(c)) }));
    rows.push(row);
    let mut out = String::from("Target-domain mAP (%) by intermediate-domain weight\n");
    out.push_str(&table(&header, &rows));
    if let Some(d) = first.dynamic() {
        writeln!(out, "mean dynamic weight (seed {}): {:.3}", first.seed, d.mean_weight).unwrap();
    }
    writeln!(out, "AP protocol: {}", first.ap_protocol).unwrap();
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_aligns_columns() {
        let t = table(
            &["a".into(), "bb".into()],
            &[vec!["xyz".into(), "1".into()], vec!["q".into(), "22.5".into()]],
        );
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines[0], "a      bb");
        assert_eq!(lines[1], "---------");
        assert_eq!(lines[2], "xyz     1");
        assert_eq!(lines[3], "q    22.5");
    }
}
