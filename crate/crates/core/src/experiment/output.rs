use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ExperimentError;
use crate::analytics::{FairnessReport, GroupMetrics, Metric};
use crate::model::{GroupId, PolicyPair};
use crate::solver::IterationRecord;

pub const METRICS_HEADER: [&str; 13] = [
    "method",
    "split",
    "group",
    "m_res",
    "m_par",
    "m_fpr",
    "m_fnr",
    "m_ppv",
    "m_npv",
    "err_rate",
    "epr",
    "violation_inf",
    "seed",
];

/// Seventeen significant digits.
pub(crate) fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(fmt_f64).unwrap_or_default()
}

fn parse_opt(field: &str) -> Result<Option<f64>, String> {
    if field.is_empty() {
        Ok(None)
    } else {
        field
            .parse()
            .map(Some)
            .map_err(|e| format!("bad number {field:?}: {e}"))
    }
}

/// One line of `metrics.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub method: String,
    pub split: String,
    pub group: GroupId,
    pub metrics: GroupMetrics,
    pub violation_inf: f64,
    pub seed: u64,
}

impl MetricsRow {
    fn record(&self) -> Vec<String> {
        let m = &self.metrics;
        vec![
            self.method.clone(),
            self.split.clone(),
            self.group.as_str().to_string(),
            fmt_f64(m.res),
            fmt_f64(m.par),
            fmt_opt(m.fpr),
            fmt_opt(m.fnr),
            fmt_opt(m.ppv),
            fmt_opt(m.npv),
            fmt_f64(m.err),
            fmt_f64(m.epr),
            fmt_f64(self.violation_inf),
            self.seed.to_string(),
        ]
    }
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>, ExperimentError> {
    csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .map_err(|e| ExperimentError::io(path, e))
}

/// Writes a header and rows of preformatted fields.
pub(crate) fn write_table(
    path: &Path,
    header: &[String],
    rows: impl IntoIterator<Item = Vec<String>>,
) -> Result<(), ExperimentError> {
    let mut w = csv_writer(path)?;
    w.write_record(header)
        .map_err(|e| ExperimentError::io(path, e))?;
    for r in rows {
        w.write_record(&r)
            .map_err(|e| ExperimentError::io(path, e))?;
    }
    w.flush().map_err(|e| ExperimentError::io(path, e))
}

pub(crate) fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> Result<(), ExperimentError> {
    let header: Vec<String> = METRICS_HEADER.iter().map(|s| s.to_string()).collect();
    write_table(path, &header, rows.iter().map(MetricsRow::record))
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRow>, ExperimentError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| ExperimentError::io(path, e))?;
    let header = r
        .headers()
        .map_err(|e| ExperimentError::io(path, e))?
        .clone();
    if header.iter().ne(METRICS_HEADER) {
        return Err(ExperimentError::io(path, "unexpected metrics header"));
    }
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| ExperimentError::io(path, e))?;
        let num = |i: usize| parse_opt(&rec[i]).map_err(|e| ExperimentError::io(path, e));
        let req = |i: usize| {
            num(i)?
                .ok_or_else(|| ExperimentError::io(path, format!("missing {}", METRICS_HEADER[i])))
        };
        let group = match &rec[2] {
            "A" => GroupId::A,
            "D" => GroupId::D,
            g => return Err(ExperimentError::io(path, format!("unknown group {g:?}"))),
        };
        rows.push(MetricsRow {
            method: rec[0].to_string(),
            split: rec[1].to_string(),
            group,
            metrics: GroupMetrics {
                res: req(3)?,
                par: req(4)?,
                fpr: num(5)?,
                fnr: num(6)?,
                ppv: num(7)?,
                npv: num(8)?,
                err: req(9)?,
                epr: req(10)?,
            },
            violation_inf: req(11)?,
            seed: rec[12].parse().map_err(|e| ExperimentError::io(path, e))?,
        });
    }
    Ok(rows)
}

pub(crate) fn write_trace_csv(
    path: &Path,
    trace: &[IterationRecord<PolicyPair>],
) -> Result<(), ExperimentError> {
    let k = trace.first().map_or(0, |r| r.lambda.len());
    let mut header: Vec<String> = [
        "t",
        "violation",
        "epr",
        "primal_gap",
        "dual_gap",
        "best_gap",
    ]
    .map(String::from)
    .to_vec();
    header.extend((1..=k).map(|j| format!("lambda_{j}")));
    let rows = trace.iter().map(|r| {
        let mut row = vec![
            r.t.to_string(),
            fmt_f64(r.violation),
            fmt_f64(r.epr),
            fmt_opt(r.primal_gap),
            fmt_opt(r.dual_gap),
            fmt_opt(r.best_gap),
        ];
        row.extend(r.lambda.iter().map(|&l| fmt_f64(l)));
        row
    });
    write_table(path, &header, rows)
}

/// The four quantities of each figure panel, as absolute group gaps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PanelGaps {
    pub ppv: Option<f64>,
    pub npv: Option<f64>,
    pub fpr: Option<f64>,
    pub fnr: Option<f64>,
    pub response: f64,
    pub error: f64,
}

fn max_opt(a: Option<f64>, b: Option<f64>) -> Option<f64> {
    Some(a?.max(b?))
}

impl PanelGaps {
    pub fn from_report(report: &FairnessReport) -> Self {
        Self {
            ppv: report.gap(Metric::Ppv),
            npv: report.gap(Metric::Npv),
            fpr: report.gap(Metric::Fpr),
            fnr: report.gap(Metric::Fnr),
            response: report.gap(Metric::Res).expect("always defined"),
            error: report.gap(Metric::Err).expect("always defined"),
        }
    }

    /// Gaps from the two group rows of one method and split.
    pub fn from_rows(a: &GroupMetrics, d: &GroupMetrics) -> Self {
        let gap = |x: Option<f64>, y: Option<f64>| Some((x? - y?).abs());
        Self {
            ppv: gap(a.ppv, d.ppv),
            npv: gap(a.npv, d.npv),
            fpr: gap(a.fpr, d.fpr),
            fnr: gap(a.fnr, d.fnr),
            response: (a.res - d.res).abs(),
            error: (a.err - d.err).abs(),
        }
    }

    /// Larger of the PPV and NPV gaps.
    pub fn sufficiency(&self) -> Option<f64> {
        max_opt(self.ppv, self.npv)
    }

    /// Larger of the FPR and FNR gaps.
    pub fn separation(&self) -> Option<f64> {
        max_opt(self.fpr, self.fnr)
    }
}

const PALETTE: [&str; 6] = [
    "#1b5e9c", "#d9822b", "#3c8d40", "#b33a3a", "#7b5aa6", "#6d6d6d",
];

/// Four-panel bar chart of test-split gaps per method: sufficiency,
/// separation, response and error rate.
pub fn render_figure(methods: &[(String, PanelGaps)]) -> String {
    let panels: [(&str, Vec<(&str, fn(&PanelGaps) -> Option<f64>)>); 4] = [
        (
            "(a) sufficiency gaps",
            vec![("PPV", |g| g.ppv), ("NPV", |g| g.npv)],
        ),
        (
            "(b) separation gaps",
            vec![("FPR", |g| g.fpr), ("FNR", |g| g.fnr)],
        ),
        ("(c) response gap", vec![("response", |g| Some(g.response))]),
        ("(d) error-rate gap", vec![("error", |g| Some(g.error))]),
    ];
    let (pw, ph) = (360.0, 260.0);
    let (ml, mt, mb) = (50.0, 30.0, 60.0);
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{}" font-family="sans-serif" font-size="11">"#,
        2.0 * pw,
        2.0 * ph + 30.0
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for (pi, (title, series)) in panels.iter().enumerate() {
        let ox = (pi % 2) as f64 * pw;
        let oy = (pi / 2) as f64 * ph;
        let values: Vec<Vec<Option<f64>>> = methods
            .iter()
            .map(|(_, g)| series.iter().map(|(_, f)| f(g)).collect())
            .collect();
        let top = values
            .iter()
            .flatten()
            .flatten()
            .fold(0.0f64, |m, &v| m.max(v));
        let top = if top > 0.0 { top * 1.1 } else { 1.0 };
        let (w, h) = (pw - ml - 15.0, ph - mt - mb);
        let (x0, y0) = (ox + ml, oy + mt);
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" font-weight="bold">{title}</text>"#,
            x0,
            oy + 18.0
        );
        let _ = writeln!(
            svg,
            r#"<line x1="{x0}" y1="{}" x2="{}" y2="{}" stroke="black"/><line x1="{x0}" y1="{y0}" x2="{x0}" y2="{}" stroke="black"/>"#,
            y0 + h,
            x0 + w,
            y0 + h,
            y0 + h
        );
        for k in 0..=4 {
            let v = top * k as f64 / 4.0;
            let y = y0 + h - h * k as f64 / 4.0;
            let _ = writeln!(
                svg,
                r##"<text x="{}" y="{}" text-anchor="end">{v:.3}</text><line x1="{}" y1="{y}" x2="{x0}" y2="{y}" stroke="#999"/>"##,
                x0 - 6.0,
                y + 4.0,
                x0 - 3.0
            );
        }
        let slot = w / methods.len().max(1) as f64;
        let bar = slot * 0.8 / series.len() as f64;
        for (mi, (name, _)) in methods.iter().enumerate() {
            let sx = x0 + slot * mi as f64 + slot * 0.1;
            for (si, v) in values[mi].iter().enumerate() {
                if let Some(v) = v {
                    let bh = h * v / top;
                    let _ = writeln!(
                        svg,
                        r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="{}"/>"#,
                        sx + bar * si as f64,
                        y0 + h - bh,
                        bar,
                        bh,
                        PALETTE[si % PALETTE.len()]
                    );
                }
            }
            let _ = writeln!(
                svg,
                r#"<text x="{:.2}" y="{:.2}" text-anchor="end" transform="rotate(-35 {:.2} {:.2})">{name}</text>"#,
                sx + slot * 0.4,
                y0 + h + 14.0,
                sx + slot * 0.4,
                y0 + h + 14.0
            );
        }
        if series.len() > 1 {
            for (si, (label, _)) in series.iter().enumerate() {
                let lx = x0 + w - 70.0;
                let ly = y0 + 12.0 * si as f64;
                let _ = writeln!(
                    svg,
                    r#"<rect x="{lx}" y="{}" width="9" height="9" fill="{}"/><text x="{}" y="{}">{label}</text>"#,
                    ly,
                    PALETTE[si % PALETTE.len()],
                    lx + 13.0,
                    ly + 8.0
                );
            }
        }
    }
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;

    fn metrics(x: f64) -> GroupMetrics {
        GroupMetrics {
            res: x,
            par: 0.5,
            fpr: Some(0.1),
            fnr: None,
            ppv: Some(x),
            npv: Some(0.25),
            err: 0.3,
            epr: 0.4,
        }
    }

    #[test]
    fn metrics_csv_round_trips_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let rows = vec![MetricsRow {
            method: "alg1".into(),
            split: "test".into(),
            group: GroupId::D,
            metrics: metrics(0.1 + 0.2),
            violation_inf: -1e-300,
            seed: 1,
        }];
        write_metrics_csv(&path, &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("method,split,group,m_res,"));
        assert!(text.contains(",,"));
        assert!(!text.contains('\r'));
        assert_eq!(read_metrics_csv(&path).unwrap(), rows);
    }

    #[test]
    fn panel_gaps_take_the_larger_pair_member() {
        let g = PanelGaps::from_rows(&metrics(0.9), &metrics(0.2));
        assert!((g.sufficiency().unwrap() - 0.7).abs() < 1e-15);
        assert_eq!(g.separation(), None);
        assert!((g.response - 0.7).abs() < 1e-15);
    }

    #[test]
    fn figure_has_four_panels() {
        let g = PanelGaps::from_rows(&metrics(0.9), &metrics(0.2));
        let svg = render_figure(&[("alg1".into(), g), ("exante_dp".into(), g)]);
        assert!(svg.starts_with("<svg"));
        assert_eq!(svg.matches("font-weight=\"bold\"").count(), 4);
    }
}
