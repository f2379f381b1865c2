//! CSV, Markdown and bar-plot rendering of a [`SweepReport`].

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::{Aggregate, SweepReport};
use crate::error::{MagError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ReportFormat {
    Csv,
    Markdown,
    /// Bar plots: mean Dice per subset, and per-class Dice for each subset.
    Png,
}

impl ReportFormat {
    /// Parses a comma-separated list such as `csv,md`; duplicates collapse.
    pub fn parse_list(list: &str) -> Result<Vec<Self>> {
        let mut out: Vec<Self> = list
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(str::parse)
            .collect::<Result<_>>()?;
        out.sort();
        out.dedup();
        if out.is_empty() {
            return Err(MagError::Usage("no report format given".into()));
        }
        Ok(out)
    }
}

impl FromStr for ReportFormat {
    type Err = MagError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(Self::Csv),
            "md" | "markdown" => Ok(Self::Markdown),
            "png" | "plot" => Ok(Self::Png),
            other => Err(MagError::Usage(format!(
                "unknown report format {other:?} (expected csv, md or png)"
            ))),
        }
    }
}

fn fmt6(v: f64) -> String {
    format!("{v:.6}")
}

/// One line per (subset, metric): label, one 0/1 column per modality, metric
/// name, mean, std and the number of subjects aggregated. Undefined HD95
/// leaves mean and std empty.
pub fn render_csv(report: &SweepReport) -> String {
    let mut out = String::from("subset");
    for m in &report.modalities {
        let _ = write!(out, ",{m}");
    }
    out.push_str(",metric,mean,std,n\n");
    for row in &report.rows {
        let flags: String = row
            .available
            .iter()
            .map(|&a| if a { ",1" } else { ",0" })
            .collect();
        let _ = writeln!(
            out,
            "{}{flags},dice,{},{},{}",
            row.label,
            fmt6(row.dice.mean),
            fmt6(row.dice.std),
            row.dice.n
        );
        match &row.hd95 {
            Some(h) => {
                let _ = writeln!(
                    out,
                    "{}{flags},hd95,{},{},{}",
                    row.label,
                    fmt6(h.mean),
                    fmt6(h.std),
                    h.n
                );
            }
            None => {
                let _ = writeln!(out, "{}{flags},hd95,,,0", row.label);
            }
        }
    }
    out
}

fn pm(a: &Aggregate) -> String {
    format!("{:.3} ± {:.3}", a.mean, a.std)
}

/// Table with a •/○ availability column per modality, then Dice and HD95
/// (mean ± standard deviation over test subjects).
pub fn render_markdown(report: &SweepReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "Arm: {}  ", report.arm);
    let _ = writeln!(out, "Checkpoint: {}  ", report.checkpoint);
    let _ = writeln!(out, "Config: {}  ", report.config_hash);
    let _ = writeln!(out, "Test subjects: {}", report.test_subjects.len());
    out.push('\n');
    out.push('|');
    for m in &report.modalities {
        let _ = write!(out, " {m} |");
    }
    out.push_str(" Dice (mean ± std) | HD95 (mean ± std) |\n|");
    for _ in &report.modalities {
        out.push_str(":-:|");
    }
    out.push_str("--:|--:|\n");
    for row in &report.rows {
        out.push('|');
        for &a in &row.available {
            out.push_str(if a { " • |" } else { " ○ |" });
        }
        let hd = row
            .hd95
            .as_ref()
            .map(pm)
            .unwrap_or_else(|| "undefined".to_string());
        let _ = writeln!(out, " {} | {} |", pm(&row.dice), hd);
    }
    out
}

const BG: [u8; 3] = [255, 255, 255];
const AXIS: [u8; 3] = [40, 40, 40];
const GRID: [u8; 3] = [225, 225, 225];
const PALETTE: [[u8; 3]; 6] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
];

struct Canvas {
    width: usize,
    height: usize,
    rgb: Vec<u8>,
}

impl Canvas {
    fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            rgb: BG
                .iter()
                .copied()
                .cycle()
                .take(width * height * 3)
                .collect(),
        }
    }

    fn fill(&mut self, x0: usize, y0: usize, x1: usize, y1: usize, color: [u8; 3]) {
        for y in y0.min(self.height)..y1.min(self.height) {
            for x in x0.min(self.width)..x1.min(self.width) {
                let i = (y * self.width + x) * 3;
                self.rgb[i..i + 3].copy_from_slice(&color);
            }
        }
    }

    fn encode(&self) -> Vec<u8> {
        let mut bytes = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut bytes, self.width as u32, self.height as u32);
            enc.set_color(png::ColorType::Rgb);
            enc.set_depth(png::BitDepth::Eight);
            let mut w = enc.write_header().expect("in-memory png header");
            w.write_image_data(&self.rgb).expect("in-memory png data");
        }
        bytes
    }
}

const PLOT_H: usize = 200;
const MARGIN: usize = 10;

/// Bars of height `value` in `[0, 1]` grouped as given; each group's bars use
/// the palette in order. Horizontal grid lines mark 0.25 steps.
fn bar_plot(groups: &[Vec<f64>]) -> Vec<u8> {
    let bar_w = 12;
    let gap = 10;
    let widths: Vec<usize> = groups.iter().map(|g| g.len().max(1) * bar_w).collect();
    let width =
        2 * MARGIN + widths.iter().sum::<usize>() + gap * groups.len().saturating_sub(1) + 2;
    let height = PLOT_H + 2 * MARGIN;
    let mut c = Canvas::new(width, height);
    let base = MARGIN + PLOT_H;
    for q in 1..=4 {
        let y = base - PLOT_H * q / 4;
        c.fill(MARGIN, y, width - MARGIN, y + 1, GRID);
    }
    let mut x = MARGIN + 2;
    for (group, w) in groups.iter().zip(&widths) {
        for (k, &v) in group.iter().enumerate() {
            let h = (v.clamp(0.0, 1.0) * PLOT_H as f64).round() as usize;
            let bx = x + k * bar_w;
            c.fill(
                bx + 1,
                base - h,
                bx + bar_w - 1,
                base,
                PALETTE[k % PALETTE.len()],
            );
        }
        x += w + gap;
    }
    c.fill(MARGIN, MARGIN, MARGIN + 1, base + 1, AXIS);
    c.fill(MARGIN, base, width - MARGIN, base + 1, AXIS);
    c.encode()
}

fn file_stem(label: &str) -> String {
    label
        .chars()
        .map(|ch| if ch.is_ascii_alphanumeric() { ch } else { '_' })
        .collect()
}

/// Rendered artifacts as `(file name, bytes)` pairs. Output is a pure
/// function of the report.
pub fn render_report(report: &SweepReport, format: ReportFormat) -> Result<Vec<(String, Vec<u8>)>> {
    if report.rows.is_empty() {
        return Err(MagError::Precondition("report has no rows".into()));
    }
    Ok(match format {
        ReportFormat::Csv => vec![("sweep.csv".into(), render_csv(report).into_bytes())],
        ReportFormat::Markdown => vec![("sweep.md".into(), render_markdown(report).into_bytes())],
        ReportFormat::Png => {
            let mut files = Vec::with_capacity(report.rows.len() + 1);
            let overall: Vec<Vec<f64>> = report.rows.iter().map(|r| vec![r.dice.mean]).collect();
            files.push(("dice_by_subset.png".to_string(), bar_plot(&overall)));
            for (i, row) in report.rows.iter().enumerate() {
                let per_class = vec![row.per_class_dice.iter().map(|a| a.mean).collect()];
                files.push((
                    format!("subset_{:02}_{}.png", i, file_stem(&row.label)),
                    bar_plot(&per_class),
                ));
            }
            files
        }
    })
}

/// Writes every requested format into `dir` and returns the written paths.
pub fn write_report(
    report: &SweepReport,
    formats: &[ReportFormat],
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| MagError::io(dir, e))?;
    let json = dir.join("sweep.json");
    let text = serde_json::to_string_pretty(report)?;
    fs::write(&json, text).map_err(|e| MagError::io(&json, e))?;
    let mut written = vec![json];
    for &f in formats {
        for (name, bytes) in render_report(report, f)? {
            let path = dir.join(name);
            fs::write(&path, bytes).map_err(|e| MagError::io(&path, e))?;
            written.push(path);
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::SweepRow;

    fn agg(mean: f64, std: f64, n: usize) -> Aggregate {
        Aggregate { mean, std, n }
    }

    fn report(n_subjects: usize) -> SweepReport {
        let names = ["T1", "T2"];
        let rows = [vec![0], vec![1], vec![0, 1]]
            .into_iter()
            .enumerate()
            .map(|(i, subset)| SweepRow {
                label: subset
                    .iter()
                    .map(|&k| names[k])
                    .collect::<Vec<_>>()
                    .join("+"),
                available: (0..2).map(|k| subset.contains(&k)).collect(),
                subset,
                dice: agg(
                    0.5 + 0.1234567 * i as f64,
                    if n_subjects > 1 { 0.01 } else { 0.0 },
                    n_subjects,
                ),
                hd95: (i > 0).then(|| agg(2.25, 0.5, n_subjects)),
                per_class_dice: vec![agg(0.4, 0.0, n_subjects), agg(0.9, 0.0, n_subjects)],
                per_class_hd95: vec![None, Some(agg(1.0, 0.0, n_subjects))],
            })
            .collect();
        SweepReport {
            modalities: names.iter().map(|s| s.to_string()).collect(),
            arm: "magms".into(),
            rows,
            checkpoint: "abc".into(),
            config_hash: "def".into(),
            test_subjects: (0..n_subjects).map(|i| format!("s{i}")).collect(),
            parameter_updates: 0,
        }
    }

    #[test]
    fn markdown_uses_markers_and_zero_std() {
        let md = render_markdown(&report(1));
        assert!(md.contains("| T1 | T2 | Dice (mean ± std) | HD95 (mean ± std) |"));
        assert!(md.contains("| • | ○ | 0.500 ± 0.000 | undefined |"), "{md}");
        assert!(md.contains("| • | • |"));
    }

    #[test]
    fn csv_round_trips_to_six_decimals() {
        let r = report(3);
        let csv = render_csv(&r);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "subset,T1,T2,metric,mean,std,n");
        assert_eq!(lines.len(), 1 + 2 * r.rows.len());
        for (row, pair) in r.rows.iter().zip(lines[1..].chunks(2)) {
            let f: Vec<&str> = pair[0].split(',').collect();
            assert_eq!(f[3], "dice");
            let mean: f64 = f[4].parse().unwrap();
            assert!((mean - row.dice.mean).abs() <= 5e-7);
        }
        assert_eq!(lines[2], "T1,1,0,hd95,,,0");
    }

    #[test]
    fn rendering_is_deterministic_and_formats_parse() {
        let r = report(2);
        for f in [ReportFormat::Csv, ReportFormat::Markdown, ReportFormat::Png] {
            assert_eq!(render_report(&r, f).unwrap(), render_report(&r, f).unwrap());
        }
        let pngs = render_report(&r, ReportFormat::Png).unwrap();
        assert_eq!(pngs.len(), 4);
        assert!(pngs.iter().all(|(_, b)| b.starts_with(b"\x89PNG")));
        assert_eq!(
            ReportFormat::parse_list("csv,md").unwrap(),
            vec![ReportFormat::Csv, ReportFormat::Markdown]
        );
        assert!(matches!(
            "xlsx".parse::<ReportFormat>(),
            Err(MagError::Usage(_))
        ));
    }
}
