//! Report emission: a machine-readable results table, a human-readable
//! summary and a deception-rate-vs-queries plot with a log-scaled query
//! axis.
//!
//! The CSV column order is fixed by the `MetricsReport` field order:
//! attack, budget, epsilon, seed, n_eval, n_clean_errors, clean_top1,
//! adv_top1, asr, dr, asr_lo, asr_hi, dr_lo, dr_hi, mean_queries_success,
//! mean_l1, mean_linf, mean_basis_resets, total_queries, config_hash.
//! Floats are written in shortest round-trip form, so parsing the table
//! back reproduces every numeric field exactly.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use plotters::prelude::*;

use crate::error::{Error, Result};
use crate::metrics::MetricsReport;

/// Serializes reports to CSV bytes.
pub fn results_csv_bytes(reports: &[MetricsReport]) -> Result<Vec<u8>> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    for report in reports {
        writer
            .serialize(report)
            .map_err(|e| Error::Format(format!("results encode failed: {e}")))?;
    }
    writer
        .into_inner()
        .map_err(|e| Error::Format(format!("results encode failed: {e}")))
}

/// Parses a results table produced by [`results_csv_bytes`]. Treats the
/// input as untrusted.
pub fn parse_results_csv(bytes: &[u8]) -> Result<Vec<MetricsReport>> {
    if bytes.len() > (1 << 26) {
        return Err(Error::Format("results table exceeds size limit".into()));
    }
    let mut reader = csv::Reader::from_reader(bytes);
    let mut rows = Vec::new();
    for record in reader.deserialize::<MetricsReport>() {
        let row = record.map_err(|e| Error::Format(format!("results parse failed: {e}")))?;
        if rows.len() >= 1_000_000 {
            return Err(Error::Format("results table has too many rows".into()));
        }
        rows.push(row);
    }
    Ok(rows)
}

fn write_summary(reports: &[MetricsReport], path: &Path) -> Result<()> {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<24} {:>7} {:>6} {:>7} {:>7} {:>7} {:>19} {:>10}\n",
        "attack", "budget", "eps", "clean", "asr", "dr", "dr 95% interval", "mean q"
    ));
    for r in reports {
        let mq = r
            .mean_queries_success
            .map(|q| format!("{q:.1}"))
            .unwrap_or_else(|| "-".into());
        out.push_str(&format!(
            "{:<24} {:>7} {:>6.4} {:>7.4} {:>7.4} {:>7.4} [{:>7.4}, {:>7.4}] {:>10}\n",
            r.attack, r.budget, r.epsilon, r.clean_top1, r.asr, r.dr, r.dr_lo, r.dr_hi, mq
        ));
    }
    if let Some(first) = reports.first() {
        out.push_str(&format!(
            "\nn_eval={} clean_errors={} seed={} config={}\n",
            first.n_eval, first.n_clean_errors, first.seed, first.config_hash
        ));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

static FONT_LOADED: OnceLock<bool> = OnceLock::new();

/// Registers a system TTF for plot text once; returns false when no font is
/// available (the plot is then drawn without labels).
fn ensure_font() -> bool {
    *FONT_LOADED.get_or_init(|| {
        let candidates = [
            std::env::var("VRA_FONT").unwrap_or_default(),
            "/usr/share/fonts/truetype/dejavu/DejaVuSans.ttf".into(),
            "/usr/share/fonts/TTF/DejaVuSans.ttf".into(),
            "/usr/share/fonts/dejavu/DejaVuSans.ttf".into(),
        ];
        for path in candidates.iter().filter(|p| !p.is_empty()) {
            if let Ok(bytes) = fs::read(path) {
                let leaked: &'static [u8] = Box::leak(bytes.into_boxed_slice());
                if plotters::style::register_font(
                    "sans-serif",
                    plotters::style::FontStyle::Normal,
                    leaked,
                )
                .is_ok()
                {
                    return true;
                }
            }
        }
        false
    })
}

/// Renders deception rate against query budget, one series per attack,
/// queries on a log axis.
pub fn render_dr_plot(reports: &[MetricsReport], path: &Path) -> Result<()> {
    let has_font = ensure_font();
    let plot_err = |e: String| Error::Format(format!("plot: {e}"));

    let mut by_attack: BTreeMap<&str, Vec<(f64, f64)>> = BTreeMap::new();
    for r in reports {
        by_attack
            .entry(r.attack.as_str())
            .or_default()
            .push((r.budget as f64, r.dr));
    }
    for series in by_attack.values_mut() {
        series.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("budgets are finite"));
    }
    let x_max = reports.iter().map(|r| r.budget).max().unwrap_or(1).max(2) as f64;
    let y_max = reports
        .iter()
        .map(|r| r.dr_hi)
        .fold(0.05_f64, f64::max)
        .min(1.0);

    let root = BitMapBackend::new(path, (900, 600)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(e.to_string()))?;

    let mut builder = ChartBuilder::on(&root);
    builder
        .margin(24)
        .x_label_area_size(48)
        .y_label_area_size(64);
    if has_font {
        builder.caption("Deception rate vs query budget", ("sans-serif", 24));
    }
    let mut chart = builder
        .build_cartesian_2d((1.0..x_max).log_scale(), 0.0..(y_max * 1.05))
        .map_err(|e| plot_err(e.to_string()))?;

    let mut mesh = chart.configure_mesh();
    if has_font {
        mesh.x_desc("oracle queries (log scale)").y_desc("deception rate");
    } else {
        mesh.disable_x_axis().disable_y_axis();
    }
    mesh.draw().map_err(|e| plot_err(e.to_string()))?;

    let palette = [
        &full_palette::RED_700,
        &full_palette::BLUE_700,
        &full_palette::GREEN_700,
        &full_palette::ORANGE_700,
        &full_palette::PURPLE_700,
        &full_palette::TEAL_700,
        &full_palette::BROWN_600,
        &full_palette::PINK_600,
    ];
    for (i, (name, series)) in by_attack.iter().enumerate() {
        let color = palette[i % palette.len()];
        let anno = chart
            .draw_series(LineSeries::new(series.clone(), color.stroke_width(2)))
            .map_err(|e| plot_err(e.to_string()))?;
        if has_font {
            let legend_color = *color;
            anno.label(name.to_string()).legend(move |(x, y)| {
                PathElement::new(vec![(x, y), (x + 18, y)], legend_color.stroke_width(2))
            });
        }
        chart
            .draw_series(
                series
                    .iter()
                    .map(|&(x, y)| Circle::new((x, y), 3, color.filled())),
            )
            .map_err(|e| plot_err(e.to_string()))?;
    }
    if has_font {
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.85))
            .border_style(BLACK)
            .position(SeriesLabelPosition::UpperLeft)
            .draw()
            .map_err(|e| plot_err(e.to_string()))?;
    }
    root.present().map_err(|e| plot_err(e.to_string()))?;
    Ok(())
}

/// Paths written by [`emit_report`].
#[derive(Debug, Clone)]
pub struct EmittedFiles {
    pub results_csv: PathBuf,
    pub summary_txt: PathBuf,
    pub plot_png: PathBuf,
}

/// Writes the results table, summary and plot into `out_dir`.
pub fn emit_report(reports: &[MetricsReport], out_dir: &Path) -> Result<EmittedFiles> {
    if reports.is_empty() {
        return Err(Error::Parameter("no reports to emit".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let files = EmittedFiles {
        results_csv: out_dir.join("results.csv"),
        summary_txt: out_dir.join("summary.txt"),
        plot_png: out_dir.join("dr_vs_queries.png"),
    };
    let csv_bytes = results_csv_bytes(reports)?;
    fs::write(&files.results_csv, csv_bytes).map_err(|e| Error::io(&files.results_csv, e))?;
    write_summary(reports, &files.summary_txt)?;
    render_dr_plot(reports, &files.plot_png)?;
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_report(attack: &str, budget: u64, dr: f64) -> MetricsReport {
        let clean = 0.74;
        let adv = clean * (1.0 - dr);
        MetricsReport {
            attack: attack.into(),
            budget,
            epsilon: 4.0 / 255.0,
            seed: 7,
            n_eval: 200,
            n_clean_errors: 52,
            clean_top1: clean,
            adv_top1: adv,
            asr: 1.0 - adv,
            dr,
            asr_lo: 0.2,
            asr_hi: 0.4,
            dr_lo: dr * 0.7,
            dr_hi: (dr * 1.3).min(1.0),
            mean_queries_success: if dr > 0.0 { Some(12.5) } else { None },
            mean_l1: 250.125,
            mean_linf: 4.0 / 255.0,
            mean_basis_resets: 0.0,
            total_queries: 14000,
            config_hash: "deadbeefdeadbeef".into(),
        }
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let reports = vec![
            sample_report("vra-orthogonal", 1, 0.088),
            sample_report("vra-orthogonal", 100, 0.257),
            sample_report("random-perturbation", 100, 0.0),
        ];
        let bytes = results_csv_bytes(&reports).unwrap();
        let parsed = parse_results_csv(&bytes).unwrap();
        assert_eq!(reports, parsed);
    }

    #[test]
    fn csv_parser_rejects_garbage_without_panicking() {
        assert!(parse_results_csv(b"not,a,results,table\n1,2,3,4").is_err());
        assert!(parse_results_csv(b"\xff\xfe\x00garbage\nrow,row").is_err());
        // Inputs with no data rows parse to an empty table; the header is
        // only validated against rows that exist.
        assert!(parse_results_csv(b"").unwrap().is_empty());
    }

    #[test]
    fn emit_report_writes_three_consistent_files() {
        let dir = tempfile::TempDir::new().unwrap();
        let reports = vec![
            sample_report("vra-orthogonal", 1, 0.088),
            sample_report("vra-orthogonal", 10, 0.189),
            sample_report("vra-orthogonal", 100, 0.257),
            sample_report("random-perturbation", 100, 0.014),
        ];
        let files = emit_report(&reports, dir.path()).unwrap();
        assert!(files.results_csv.is_file());
        assert!(files.summary_txt.is_file());
        assert!(files.plot_png.is_file());

        let parsed = parse_results_csv(&fs::read(&files.results_csv).unwrap()).unwrap();
        assert_eq!(parsed, reports);

        let summary = fs::read_to_string(&files.summary_txt).unwrap();
        assert!(summary.contains("vra-orthogonal"));
        assert!(summary.contains("deadbeefdeadbeef"));

        // The plot must be a decodable, non-empty PNG.
        let png = fs::read(&files.plot_png).unwrap();
        assert!(!png.is_empty());
        let img = image::load_from_memory(&png).unwrap();
        assert!(img.width() > 0 && img.height() > 0);
    }

    #[test]
    fn empty_reports_are_rejected() {
        let dir = tempfile::TempDir::new().unwrap();
        assert!(matches!(
            emit_report(&[], dir.path()),
            Err(Error::Parameter(_))
        ));
    }
}
