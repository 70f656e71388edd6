//! Rendering of diagnosis tables, mitigation grids and score histograms.

use std::fmt::Write;

use crate::data::{Gender, Label, Trial};
use crate::diagnosis::{CheckId, DiagnosisReport};
use crate::metrics::{self, FairnessReport, MetricsError};

fn row(cells: &[&str]) -> String {
    format!("| {} |\n", cells.join(" | "))
}

fn escape(s: &str) -> String {
    s.replace('|', "\\|")
}

/// Three-level diagnosis table with recommendations and warnings.
pub fn diagnosis_markdown(report: &DiagnosisReport) -> String {
    let mut out = String::from("# Bias source diagnosis\n\n");
    out.push_str(&row(&["Level", "Source", "Statistic", "Status"]));
    out.push_str("|---|---|---|---|\n");
    for c in &report.checks {
        out.push_str(&row(&[
            &c.check.level().to_string(),
            c.check.title(),
            &escape(&c.evidence),
            &c.status.to_string(),
        ]));
    }
    out.push_str("\n## Recommendations\n\n");
    if report.recommendations.is_empty() {
        out.push_str("No source confirmed.\n");
    } else {
        for (check, set) in &report.recommendations {
            let names: Vec<&str> = set.iter().map(|m| m.name()).collect();
            let list = if names.is_empty() { "none".to_string() } else { names.join(", ") };
            let _ = writeln!(out, "- {}: {list}", check.title());
        }
    }
    if !report.warnings.is_empty() {
        out.push_str("\n## Warnings\n\n");
        for w in &report.warnings {
            let _ = writeln!(out, "- {w}");
        }
    }
    if report
        .checks
        .iter()
        .any(|c| c.check == CheckId::LeakageLocalisation)
    {
        out.push_str("\nLocalised means the top three dimensions carry at least half of the probe attribution mass.\n");
    }
    out
}

pub const EVALUATION_COLUMNS: [&str; 9] = [
    "Strategy", "EER F%", "EER M%", "EER Gap", "d_FPR", "SPD", "EOP", "PPD", "TED",
];

/// Percent with two decimals, as in `0.0355 → "3.55"`.
pub fn percent(x: f64) -> String {
    format!("{:.2}", x * 100.0)
}

/// Signed value with three decimals; non-finite values render as
/// `undefined`.
pub fn signed(x: f64) -> String {
    if x.is_finite() {
        let s = format!("{x:+.3}");
        if s == "-0.000" {
            "+0.000".to_string()
        } else {
            s
        }
    } else {
        "undefined".to_string()
    }
}

pub fn evaluation_row(name: &str, r: &FairnessReport) -> Vec<String> {
    vec![
        name.to_string(),
        percent(r.eer_f),
        percent(r.eer_m),
        percent(r.eer_gap),
        signed(r.d_fpr),
        signed(r.spd),
        signed(r.eop),
        signed(r.ppd),
        signed(r.ted),
    ]
}

/// Mitigation grid, one row per strategy.
pub fn evaluation_markdown(rows: &[(String, FairnessReport)]) -> String {
    let mut out = String::from("# Gender fairness mitigation\n\n");
    out.push_str(&row(&EVALUATION_COLUMNS));
    out.push_str(&format!("|{}\n", "---|".repeat(EVALUATION_COLUMNS.len())));
    for (name, r) in rows {
        let cells = evaluation_row(name, r);
        let refs: Vec<&str> = cells.iter().map(String::as_str).collect();
        out.push_str(&row(&refs));
    }
    out
}

const PANEL_W: f64 = 360.0;
const PANEL_H: f64 = 220.0;
const MARGIN: f64 = 30.0;

fn colour(gender: Gender, label: Label, by_label: bool) -> &'static str {
    match (by_label, gender, label) {
        (false, _, Label::Bonafide) => "#2b8cbe",
        (false, _, Label::Spoof) => "#e34a33",
        (true, Gender::F, _) => "#8856a7",
        (true, Gender::M, _) => "#31a354",
    }
}

/// Self-contained SVG with four panels: each gender's bonafide/spoof
/// overlay on the top row, each label's female/male overlay on the bottom.
/// Bins are shared by every panel.
pub fn histogram_svg(trials: &[Trial], bins: usize) -> Result<String, MetricsError> {
    let summary = metrics::score_summary(trials, bins)?;
    let n_bins = summary.edges.len() - 1;
    let peak = summary
        .groups
        .iter()
        .flat_map(|g| g.histogram.iter().copied())
        .max()
        .unwrap_or(0)
        .max(1) as f64;
    let total_w = 2.0 * PANEL_W + 3.0 * MARGIN;
    let total_h = 2.0 * PANEL_H + 3.0 * MARGIN;
    let mut out = String::new();
    let _ = writeln!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {total_w} {total_h}\" width=\"{total_w}\" height=\"{total_h}\">"
    );
    out.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");

    let panels = [
        ("Female", false, [(Gender::F, Label::Bonafide), (Gender::F, Label::Spoof)]),
        ("Male", false, [(Gender::M, Label::Bonafide), (Gender::M, Label::Spoof)]),
        ("Bonafide", true, [(Gender::F, Label::Bonafide), (Gender::M, Label::Bonafide)]),
        ("Spoof", true, [(Gender::F, Label::Spoof), (Gender::M, Label::Spoof)]),
    ];
    let bar_w = PANEL_W / n_bins as f64;
    for (p, (title, by_label, series)) in panels.iter().enumerate() {
        let x0 = MARGIN + (p % 2) as f64 * (PANEL_W + MARGIN);
        let y0 = MARGIN + (p / 2) as f64 * (PANEL_H + MARGIN);
        let _ = writeln!(out, "<g transform=\"translate({x0},{y0})\">");
        let _ = writeln!(
            out,
            "<rect width=\"{PANEL_W}\" height=\"{PANEL_H}\" fill=\"none\" stroke=\"#444\"/>"
        );
        let _ = writeln!(
            out,
            "<text x=\"4\" y=\"-6\" font-family=\"sans-serif\" font-size=\"12\">{title}</text>"
        );
        for &(g, l) in series {
            let group = summary.group(g, l).expect("all four groups summarised");
            let fill = colour(g, l, *by_label);
            for (b, &count) in group.histogram.iter().enumerate() {
                if count == 0 {
                    continue;
                }
                let h = PANEL_H * count as f64 / peak;
                let _ = writeln!(
                    out,
                    "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"{fill}\" fill-opacity=\"0.5\"/>",
                    b as f64 * bar_w,
                    PANEL_H - h,
                    bar_w,
                    h
                );
            }
        }
        let lo = summary.edges[0];
        let hi = summary.edges[n_bins];
        let _ = writeln!(
            out,
            "<text x=\"0\" y=\"{:.0}\" font-family=\"sans-serif\" font-size=\"10\">{lo:.3}</text>",
            PANEL_H + 12.0
        );
        let _ = writeln!(
            out,
            "<text x=\"{PANEL_W}\" y=\"{:.0}\" font-family=\"sans-serif\" font-size=\"10\" text-anchor=\"end\">{hi:.3}</text>",
            PANEL_H + 12.0
        );
        out.push_str("</g>\n");
    }
    out.push_str("</svg>\n");
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Split;

    #[test]
    fn number_formats() {
        assert_eq!(percent(0.0355), "3.55");
        assert_eq!(percent(0.2492), "24.92");
        assert_eq!(signed(-0.016), "-0.016");
        assert_eq!(signed(0.05), "+0.050");
        assert_eq!(signed(-0.0), "+0.000");
        assert_eq!(signed(f64::INFINITY), "undefined");
    }

    fn t(id: &str, score: f64, l: Label, g: Gender) -> Trial {
        Trial {
            utt_id: id.into(),
            score,
            label: l,
            gender: g,
            attack_id: (l == Label::Spoof).then(|| "A01".into()),
            split: Split::Eval,
        }
    }

    #[test]
    fn constant_scores_fill_one_bin_per_panel() {
        let ts: Vec<Trial> = [Gender::F, Gender::M]
            .into_iter()
            .flat_map(|g| {
                [Label::Bonafide, Label::Spoof]
                    .into_iter()
                    .map(move |l| t(&format!("{g}{l}"), 1.0, l, g))
            })
            .collect();
        let svg = histogram_svg(&ts, 40).unwrap();
        assert_eq!(svg.matches("fill-opacity").count(), 8);
        assert!(svg.starts_with("<svg"));
    }

    #[test]
    fn empty_gender_is_error() {
        let ts = vec![t("a", 1.0, Label::Bonafide, Gender::M)];
        assert_eq!(histogram_svg(&ts, 40), Err(MetricsError::EmptyGroup(Gender::F)));
    }
}
