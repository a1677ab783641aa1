//! Tab-separated metric reports with a summary block.

use reasonedit_core::eval::{MetricReport, MetricRow};
use reasonedit_core::microworld::EditKind;

use crate::{Error, Result};

pub const HEADER: [&str; 13] = [
    "index",
    "kind",
    "template",
    "hops",
    "clip_sim_pct",
    "l2_bg_pct",
    "edit_accuracy_pct",
    "nll_per_cell",
    "plausibility_pct",
    "composite_score",
    "mask_iou",
    "external_score",
    "passthrough",
];

/// Columns averaged in the summary block.
pub const SUMMARY_COLUMNS: [&str; 8] = [
    "clip_sim_pct",
    "l2_bg_pct",
    "edit_accuracy_pct",
    "nll_per_cell",
    "plausibility_pct",
    "composite_score",
    "mask_iou",
    "external_score",
];

const SUMMARY_MARK: &str = "# summary";

fn fmt(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x}"),
        None => "NA".into(),
    }
}

fn parse_opt(s: &str) -> Result<Option<f64>> {
    if s == "NA" {
        return Ok(None);
    }
    s.parse::<f64>()
        .map(Some)
        .map_err(|_| Error::Format(format!("bad number {s:?} in report")))
}

/// Rows then the summary block. Numbers use the shortest exact decimal
/// form so values read back bit-identically.
pub fn render(report: &MetricReport) -> String {
    let mut out = HEADER.join("\t");
    out.push('\n');
    for r in &report.rows {
        let fields = [
            r.index.to_string(),
            r.kind.name().to_string(),
            r.template.clone(),
            r.hops.to_string(),
            fmt(r.clip_sim_pct),
            fmt(r.l2_bg_pct),
            fmt(r.edit_accuracy_pct),
            fmt(r.nll_per_cell),
            fmt(r.plausibility_pct),
            fmt(r.composite_score),
            fmt(r.mask_iou),
            fmt(r.external_score),
            (r.passthrough as u8).to_string(),
        ];
        out.push_str(&fields.join("\t"));
        out.push('\n');
    }
    out.push('\n');
    out.push_str(SUMMARY_MARK);
    out.push('\n');
    out.push_str("scope\tmetric\tmean\n");
    let scopes: [(&str, Option<EditKind>); 3] = [
        ("all", None),
        ("atomic", Some(EditKind::Atomic)),
        ("composite", Some(EditKind::Composite)),
    ];
    for (name, kind) in scopes {
        for c in SUMMARY_COLUMNS {
            let v = match kind {
                None => report.aggregate(c),
                Some(k) => report.aggregate_kind(c, k),
            };
            out.push_str(&format!("{name}\t{c}\t{}\n", fmt(v)));
        }
    }
    out.push_str(&format!("all\tsamples\t{}\n", report.rows.len()));
    out.push_str(&format!("all\tpassthrough\t{}\n", report.passthrough_count()));
    out
}

/// Parsed report: rows plus the `(scope, metric, value)` summary lines.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedReport {
    pub report: MetricReport,
    pub summary: Vec<(String, String, Option<f64>)>,
}

pub fn parse(text: &str) -> Result<ParsedReport> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Format("empty report".into()))?;
    if header.split('\t').collect::<Vec<_>>() != HEADER {
        return Err(Error::Format("report header does not match the schema".into()));
    }
    let mut report = MetricReport::default();
    for line in lines.by_ref() {
        if line.is_empty() {
            break;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != HEADER.len() {
            return Err(Error::Format(format!("report row has {} fields", f.len())));
        }
        let int = |s: &str| s.parse::<usize>().map_err(|_| Error::Format(format!("bad integer {s:?}")));
        report.rows.push(MetricRow {
            index: int(f[0])?,
            kind: EditKind::parse(f[1]).ok_or_else(|| Error::Format(format!("bad kind {:?}", f[1])))?,
            template: f[2].to_string(),
            hops: int(f[3])?,
            clip_sim_pct: parse_opt(f[4])?,
            l2_bg_pct: parse_opt(f[5])?,
            edit_accuracy_pct: parse_opt(f[6])?,
            nll_per_cell: parse_opt(f[7])?,
            plausibility_pct: parse_opt(f[8])?,
            composite_score: parse_opt(f[9])?,
            mask_iou: parse_opt(f[10])?,
            external_score: parse_opt(f[11])?,
            passthrough: f[12] == "1",
        });
    }
    if lines.next() != Some(SUMMARY_MARK) || lines.next() != Some("scope\tmetric\tmean") {
        return Err(Error::Format("report lacks a summary block".into()));
    }
    let mut summary = Vec::new();
    for line in lines {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 3 {
            return Err(Error::Format("bad summary line".into()));
        }
        summary.push((f[0].to_string(), f[1].to_string(), parse_opt(f[2])?));
    }
    Ok(ParsedReport { report, summary })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(i: usize, kind: EditKind, acc: Option<f64>) -> MetricRow {
        MetricRow {
            index: i,
            kind,
            template: "recolor".into(),
            hops: 1,
            clip_sim_pct: Some(61.25),
            l2_bg_pct: Some(0.0),
            edit_accuracy_pct: acc,
            nll_per_cell: Some(0.1),
            plausibility_pct: Some(100.0 * (-0.1f64).exp()),
            composite_score: None,
            mask_iou: None,
            external_score: None,
            passthrough: i == 2,
        }
    }

    #[test]
    fn render_parse_round_trip_and_summary_replay() {
        let r = MetricReport {
            rows: vec![
                row(0, EditKind::Atomic, Some(1.0 / 3.0)),
                row(1, EditKind::Composite, Some(75.0)),
                row(2, EditKind::Composite, None),
            ],
        };
        let text = render(&r);
        let back = parse(&text).unwrap();
        assert_eq!(back.report, r);
        for (scope, metric, v) in &back.summary {
            if metric == "samples" || metric == "passthrough" {
                continue;
            }
            let want = match scope.as_str() {
                "all" => back.report.aggregate(metric),
                "atomic" => back.report.aggregate_kind(metric, EditKind::Atomic),
                _ => back.report.aggregate_kind(metric, EditKind::Composite),
            };
            assert_eq!(*v, want, "{scope} {metric}");
        }
        assert!(text.contains("all\tpassthrough\t1"));
    }

    #[test]
    fn wrong_header_is_rejected() {
        assert!(parse("index\tkind\n").is_err());
    }
}
