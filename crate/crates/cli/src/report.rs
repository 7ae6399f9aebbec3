//! Comparison table, forgetting curves and confusion heatmaps as CSV + SVG.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::results::ResultsDoc;
use crate::Failure;

pub const TABLE_CSV: &str = "table.csv";
pub const TABLE_SVG: &str = "table.svg";
pub const CURVE_CSV: &str = "forgetting_curve.csv";
pub const CURVE_SVG: &str = "forgetting_curve.svg";
pub const CONFUSION_DIR: &str = "confusion";

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Label of the `i`-th (0-based) results file: `r1_ours`, `r2_naive_finetune`, ...
pub fn run_label(i: usize, doc: &ResultsDoc) -> String {
    format!("r{}_{}", i + 1, doc.method.as_str())
}

pub fn table_csv(docs: &[(String, &ResultsDoc)]) -> String {
    let mut s = String::from("run,method,run_id,acc_avg,last_acc,M1,M2,incomplete\n");
    for (label, d) in docs {
        let _ = writeln!(
            s,
            "{label},{},{},{},{},{},{},{}",
            d.method.as_str(),
            d.run_id,
            opt(d.acc_avg),
            opt(d.last_acc),
            opt(d.m1),
            opt(d.m2),
            d.incomplete
        );
    }
    s
}

fn table_svg(docs: &[(String, &ResultsDoc)]) -> String {
    let cols = ["run", "Acc_avg (%)", "last (%)", "M1", "M2"];
    let (cw, rh) = (130.0, 24.0);
    let w = cw * cols.len() as f64;
    let h = rh * (docs.len() + 1) as f64 + 8.0;
    let mut s = svg_open(w, h);
    for (j, c) in cols.iter().enumerate() {
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-weight="bold">{}</text>"#,
            j as f64 * cw + 6.0,
            rh - 6.0,
            escape(c)
        );
    }
    let pct = |v: Option<f64>| v.map(|x| format!("{:.2}", 100.0 * x)).unwrap_or_else(|| "-".into());
    let num = |v: Option<f64>, p: usize| v.map(|x| format!("{x:.p$}")).unwrap_or_else(|| "-".into());
    for (i, (label, d)) in docs.iter().enumerate() {
        let y = rh * (i + 2) as f64 - 6.0;
        let cells = [label.clone(), pct(d.acc_avg), pct(d.last_acc), num(d.m1, 2), num(d.m2, 4)];
        for (j, c) in cells.iter().enumerate() {
            let _ = writeln!(s, r#"<text x="{}" y="{y}">{}</text>"#, j as f64 * cw + 6.0, escape(c));
        }
    }
    s.push_str("</svg>\n");
    s
}

fn svg_open(w: f64, h: f64) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\" font-family=\"sans-serif\" font-size=\"12\">\n<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n"
    )
}

/// One row per run and stage; `acc` is the pooled stage accuracy exactly as
/// stored in the results.
pub fn curve_csv(docs: &[(String, &ResultsDoc)]) -> String {
    let mut s = String::from("run,method,t,acc\n");
    for (label, d) in docs {
        for st in &d.per_stage {
            let _ = writeln!(s, "{label},{},{},{}", d.method.as_str(), st.t, st.acc);
        }
    }
    s
}

fn curve_svg(docs: &[(String, &ResultsDoc)]) -> String {
    let (w, h) = (560.0, 360.0);
    let (l, r, t, b) = (56.0, 150.0, 20.0, 44.0);
    let stages = docs.iter().map(|(_, d)| d.per_stage.len()).max().unwrap_or(1).max(1);
    let x_of = |i: usize| -> f64 {
        if stages == 1 {
            l + (w - l - r) / 2.0
        } else {
            l + (i - 1) as f64 * (w - l - r) / (stages - 1) as f64
        }
    };
    let y_of = |acc: f64| h - b - acc * (h - t - b);
    let mut s = svg_open(w, h);
    let _ = writeln!(
        s,
        r##"<line x1="{l}" y1="{}" x2="{}" y2="{}" stroke="#333"/><line x1="{l}" y1="{t}" x2="{l}" y2="{}" stroke="#333"/>"##,
        h - b,
        w - r,
        h - b,
        h - b
    );
    for k in 0..=5 {
        let acc = k as f64 / 5.0;
        let y = y_of(acc);
        let _ = writeln!(
            s,
            r##"<line x1="{}" y1="{y}" x2="{l}" y2="{y}" stroke="#333"/><text x="{}" y="{}" text-anchor="end">{}</text>"##,
            l - 4.0,
            l - 6.0,
            y + 4.0,
            (acc * 100.0).round()
        );
    }
    for i in 1..=stages {
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{i}</text>"#, x_of(i), h - b + 16.0);
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">incremental stage</text>"#,
        l + (w - l - r) / 2.0,
        h - 8.0
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{}" transform="rotate(-90 14 {})" text-anchor="middle">Top-1 accuracy (%)</text>"#,
        t + (h - t - b) / 2.0,
        t + (h - t - b) / 2.0
    );
    for (k, (label, d)) in docs.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let pts: Vec<String> = d.per_stage.iter().map(|st| format!("{},{}", x_of(st.t), y_of(st.acc))).collect();
        if pts.len() > 1 {
            let _ = writeln!(
                s,
                r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
                pts.join(" ")
            );
        }
        for p in &pts {
            let (x, y) = p.split_once(',').expect("point");
            let _ = writeln!(s, r#"<circle cx="{x}" cy="{y}" r="3" fill="{color}"/>"#);
        }
        let ly = t + 16.0 * k as f64 + 8.0;
        let _ = writeln!(
            s,
            r#"<rect x="{}" y="{}" width="12" height="3" fill="{color}"/><text x="{}" y="{}">{}</text>"#,
            w - r + 12.0,
            ly - 4.0,
            w - r + 30.0,
            ly,
            escape(label)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Counts with true classes as rows and predictions as columns.
pub fn confusion_csv(doc: &ResultsDoc, stage: usize) -> String {
    let c = &doc.confusion[stage];
    let names: Vec<String> = c.classes.iter().map(|&id| doc.class_name(id)).collect();
    let mut s = String::from("true\\pred");
    for n in &names {
        let _ = write!(s, ",{n}");
    }
    s.push('\n');
    for (n, row) in names.iter().zip(&c.counts) {
        s.push_str(n);
        for v in row {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    s
}

fn confusion_svg(doc: &ResultsDoc, stage: usize, title: &str) -> String {
    let c = &doc.confusion[stage];
    let k = c.classes.len();
    let cell = (320.0 / k as f64).clamp(14.0, 48.0);
    let (l, t) = (90.0, 100.0);
    let w = l + cell * k as f64 + 20.0;
    let h = t + cell * k as f64 + 20.0;
    let mut s = svg_open(w, h);
    let _ = writeln!(s, r#"<text x="8" y="18" font-weight="bold">{}</text>"#, escape(title));
    let names: Vec<String> = c.classes.iter().map(|&id| doc.class_name(id)).collect();
    for (i, n) in names.iter().enumerate() {
        let cy = t + cell * (i as f64 + 0.5) + 4.0;
        let _ = writeln!(s, r#"<text x="{}" y="{cy}" text-anchor="end">{}</text>"#, l - 4.0, escape(n));
        let cx = l + cell * (i as f64 + 0.5);
        let _ = writeln!(
            s,
            r#"<text x="{cx}" y="{}" transform="rotate(-60 {cx} {})">{}</text>"#,
            t - 4.0,
            t - 4.0,
            escape(n)
        );
    }
    for (i, row) in c.counts.iter().enumerate() {
        let total: u64 = row.iter().sum();
        for (j, &v) in row.iter().enumerate() {
            let frac = if total > 0 { v as f64 / total as f64 } else { 0.0 };
            let shade = (255.0 * (1.0 - frac)).round() as u8;
            let (x, y) = (l + cell * j as f64, t + cell * i as f64);
            let _ = writeln!(
                s,
                r##"<rect x="{x}" y="{y}" width="{cell}" height="{cell}" fill="rgb({shade},{shade},255)" stroke="#ccc"/>"##
            );
            if cell >= 20.0 {
                let fg = if frac > 0.5 { "white" } else { "black" };
                let _ = writeln!(
                    s,
                    r#"<text x="{}" y="{}" text-anchor="middle" fill="{fg}" font-size="10">{v}</text>"#,
                    x + cell / 2.0,
                    y + cell / 2.0 + 3.0
                );
            }
        }
    }
    s.push_str("</svg>\n");
    s
}

fn write(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text).map_err(|e| Failure::runtime(format!("{}: {e}", path.display())))
}

/// Reads every results file, then writes all reports into `out`.
pub fn write_reports(results: &[PathBuf], out: &Path) -> Result<(), Failure> {
    if results.is_empty() {
        return Err(Failure::usage("report needs at least one results file"));
    }
    let docs: Vec<ResultsDoc> = results.iter().map(|p| ResultsDoc::read(p)).collect::<Result<_, _>>()?;
    for (d, p) in docs.iter().zip(results) {
        if d.confusion.len() != d.per_stage.len() || d.confusion.iter().any(|c| c.counts.len() != c.classes.len()) {
            return Err(Failure::usage(format!("{}: malformed results: confusion does not match stages", p.display())));
        }
    }
    let labeled: Vec<(String, &ResultsDoc)> = docs.iter().enumerate().map(|(i, d)| (run_label(i, d), d)).collect();
    let conf_dir = out.join(CONFUSION_DIR);
    fs::create_dir_all(&conf_dir).map_err(|e| Failure::runtime(format!("{}: {e}", conf_dir.display())))?;
    write(&out.join(TABLE_CSV), &table_csv(&labeled))?;
    write(&out.join(TABLE_SVG), &table_svg(&labeled))?;
    write(&out.join(CURVE_CSV), &curve_csv(&labeled))?;
    write(&out.join(CURVE_SVG), &curve_svg(&labeled))?;
    for (label, d) in &labeled {
        for (stage, c) in d.confusion.iter().enumerate() {
            let stem = format!("{label}_t{}", c.t);
            write(&conf_dir.join(format!("{stem}.csv")), &confusion_csv(d, stage))?;
            let title = format!("{label} after task {}", c.t);
            write(&conf_dir.join(format!("{stem}.svg")), &confusion_svg(d, stage, &title))?;
        }
    }
    Ok(())
}
