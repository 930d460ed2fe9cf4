use std::fmt::Write as _;

use anyhow::Result;
use parsestack::metrics::MetricsReport;
use parsestack::training::{AblationTable, TrainLog};

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

fn finish(w: csv::Writer<Vec<u8>>) -> Result<String> {
    Ok(String::from_utf8(w.into_inner()?)?)
}

/// One row per step; wall time goes to [`timing_csv`] so this file stays
/// reproducible.
pub fn train_log_csv(log: &TrainLog, level_names: &[String]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["step".to_string(), "epoch".into(), "lr".into()];
    header.extend(level_names.iter().map(|l| format!("loss_{l}")));
    header.push("total".into());
    w.write_record(&header)?;
    for r in &log.steps {
        let mut row = vec![r.step.to_string(), r.epoch.to_string(), r.lr.to_string()];
        row.extend(r.level_losses.iter().map(|l| l.to_string()));
        row.push(r.total.to_string());
        w.write_record(&row)?;
    }
    finish(w)
}

pub fn timing_csv(log: &TrainLog) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["step", "wall_time_s"])?;
    for r in &log.steps {
        w.write_record([r.step.to_string(), format!("{:.6}", r.wall_time_s)])?;
    }
    finish(w)
}

pub fn metrics_csv(report: &MetricsReport) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "level",
        "miou",
        "pixel_accuracy",
        "fg_accuracy",
        "avg_precision",
        "avg_recall",
        "avg_f1",
        "consistency",
    ])?;
    for l in &report.levels {
        w.write_record([
            l.level.clone(),
            l.miou.to_string(),
            l.atr.accuracy.to_string(),
            opt(l.atr.fg_accuracy),
            opt(l.atr.avg_precision),
            opt(l.atr.avg_recall),
            opt(l.atr.avg_f1),
            if report.consistency.is_nan() {
                String::new()
            } else {
                report.consistency.to_string()
            },
        ])?;
    }
    finish(w)
}

pub fn consistency_csv(table: &AblationTable) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["strategy", "consistency"])?;
    for r in &table.rows {
        w.write_record([r.strategy.name().to_string(), r.consistency.to_string()])?;
    }
    finish(w)
}

pub fn metrics_table(report: &MetricsReport) -> String {
    let mut s = format!(
        "{:<12} {:>8} {:>9} {:>9} {:>8}\n",
        "level", "mIoU", "accuracy", "fg_acc", "F1"
    );
    let cell = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
    for l in &report.levels {
        let _ = writeln!(
            s,
            "{:<12} {:>8.4} {:>9.4} {:>9} {:>8}",
            l.level,
            l.miou,
            l.atr.accuracy,
            cell(l.atr.fg_accuracy),
            cell(l.atr.avg_f1)
        );
    }
    if !report.consistency.is_nan() {
        let _ = writeln!(s, "consistency  {:.4}", report.consistency);
    }
    s
}

const PALETTE: [&str; 4] = ["#8c8c8c", "#4c72b0", "#dd8452", "#55a868"];

/// Grouped bar chart: one group per level, one bar per strategy.
pub fn ablation_svg(table: &AblationTable) -> String {
    let (width, height) = (640.0, 360.0);
    let (left, right, top, bottom) = (50.0, 150.0, 30.0, 40.0);
    let plot_w = width - left - right;
    let plot_h = height - top - bottom;
    let groups = table.levels.len().max(1) as f64;
    let bars = table.rows.len().max(1) as f64;
    let group_w = plot_w / groups;
    let bar_w = group_w * 0.8 / bars;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{width}" height="{height}" fill="white"/>"#);
    for tick in 0..=5 {
        let v = tick as f64 / 5.0;
        let y = top + plot_h * (1.0 - v);
        let _ = writeln!(
            s,
            r##"<line x1="{left}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#dddddd"/><text x="{:.1}" y="{:.1}" text-anchor="end">{v:.1}</text>"##,
            left + plot_w,
            left - 6.0,
            y + 4.0
        );
    }
    for (g, level) in table.levels.iter().enumerate() {
        let gx = left + g as f64 * group_w + group_w * 0.1;
        for (b, row) in table.rows.iter().enumerate() {
            let v = row.miou.get(g).copied().unwrap_or(0.0).clamp(0.0, 1.0);
            let h = plot_h * v;
            let _ = writeln!(
                s,
                r#"<rect x="{:.1}" y="{:.1}" width="{:.1}" height="{h:.1}" fill="{}"><title>{} {level}: {v:.4}</title></rect>"#,
                gx + b as f64 * bar_w,
                top + plot_h - h,
                bar_w,
                PALETTE[b % PALETTE.len()],
                row.strategy
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{level}</text>"#,
            gx + group_w * 0.4,
            top + plot_h + 20.0
        );
    }
    for (b, row) in table.rows.iter().enumerate() {
        let y = top + 10.0 + b as f64 * 20.0;
        let x = width - right + 15.0;
        let _ = writeln!(
            s,
            r#"<rect x="{x}" y="{:.1}" width="12" height="12" fill="{}"/><text x="{:.1}" y="{y:.1}">{}</text>"#,
            y - 10.0,
            PALETTE[b % PALETTE.len()],
            x + 18.0,
            row.strategy
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{left}" y="18">mean IoU by level</text>"#
    );
    s.push_str("</svg>\n");
    s
}
