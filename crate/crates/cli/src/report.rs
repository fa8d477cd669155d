use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;
use xfer_core::bench::{leaderboard, LeaderboardRow, ScoreMatrix, ScoreReport};

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// `report.json` files written by `run`, one per source.
    #[arg(required = true)]
    pub reports: Vec<PathBuf>,
    /// Directory for `scores.csv` and `scores.svg`.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10_000)]
    pub resamples: usize,
    #[arg(long, default_value_t = 0.95)]
    pub level: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

pub fn write_csv(m: &ScoreMatrix, rows: &[LeaderboardRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["source".to_string()];
    header.extend(m.targets.iter().cloned());
    header.extend(["mean", "ci_lo", "ci_hi"].map(String::from));
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.source.clone()];
        rec.extend(r.per_target.iter().map(|x| x.to_string()));
        rec.push(r.mean.to_string());
        match r.ci {
            Some((lo, hi)) => rec.extend([lo.to_string(), hi.to_string()]),
            None => rec.extend([String::new(), String::new()]),
        }
        w.write_record(&rec)?;
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Bars of mean cross-entropy per source with CI whiskers.
pub fn render_svg(rows: &[LeaderboardRow]) -> String {
    let (bar, gap, left, top, height) = (48.0, 24.0, 64.0, 24.0, 240.0);
    let width = left + rows.len() as f64 * (bar + gap) + gap;
    let hi = rows
        .iter()
        .map(|r| r.ci.map_or(r.mean, |c| c.1.max(r.mean)))
        .fold(f64::MIN, f64::max);
    let lo = rows
        .iter()
        .map(|r| r.ci.map_or(r.mean, |c| c.0.min(r.mean)))
        .fold(f64::MAX, f64::min);
    // Bars start a little below the smallest value so differences are visible.
    let span = (hi - lo).max(hi * 0.05);
    let (y0, y1) = (lo - span * 0.5, hi + span * 0.2);
    let y = |v: f64| top + height * (1.0 - (v - y0) / (y1 - y0));

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{}" font-family="sans-serif" font-size="11">"#,
        top + height + 64.0
    );
    let _ = writeln!(
        s,
        r#"<line x1="{left}" y1="{top}" x2="{left}" y2="{}" stroke="black"/>"#,
        top + height
    );
    for i in 0..=4 {
        let v = y0 + (y1 - y0) * i as f64 / 4.0;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{:.1}" text-anchor="end">{v:.3}</text>"#,
            left - 4.0,
            y(v) + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="12" y="{}" transform="rotate(-90 12 {})" text-anchor="middle">test cross-entropy (nats/token)</text>"#,
        top + height / 2.0,
        top + height / 2.0
    );
    for (i, r) in rows.iter().enumerate() {
        let x = left + gap + i as f64 * (bar + gap);
        let _ = writeln!(
            s,
            r##"<rect x="{x}" y="{:.1}" width="{bar}" height="{:.1}" fill="#4c78a8"><title>{}: {:.4}</title></rect>"##,
            y(r.mean),
            top + height - y(r.mean),
            escape(&r.source),
            r.mean
        );
        if let Some((clo, chi)) = r.ci {
            let cx = x + bar / 2.0;
            let _ = writeln!(
                s,
                r#"<path d="M{cx} {:.1}V{:.1}M{} {:.1}h{}M{} {:.1}h{}" stroke="black"/>"#,
                y(clo),
                y(chi),
                cx - 8.0,
                y(clo),
                16.0,
                cx - 8.0,
                y(chi),
                16.0
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="end" transform="rotate(-40 {} {})">{}</text>"#,
            x + bar / 2.0,
            top + height + 14.0,
            x + bar / 2.0,
            top + height + 14.0,
            escape(&r.source)
        );
    }
    s.push_str("</svg>\n");
    s
}

pub fn report(args: ReportArgs) -> Result<()> {
    let reports = args
        .reports
        .iter()
        .map(ScoreReport::load)
        .collect::<xfer_core::Result<Vec<_>>>()?;
    let m = ScoreMatrix::from_reports(&reports)?;
    if m.sources.len() < 2 || m.targets.len() < 2 {
        log::warn!(
            "{} source(s) over {} target(s): confidence intervals need at least two of each and are omitted",
            m.sources.len(),
            m.targets.len()
        );
    }
    let rows = leaderboard(&m, args.resamples, args.level, args.seed)?;
    let csv = write_csv(&m, &rows)?;
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let csv_path = args.out.join("scores.csv");
    fs::write(&csv_path, &csv).with_context(|| format!("writing {}", csv_path.display()))?;
    let svg_path = args.out.join("scores.svg");
    fs::write(&svg_path, render_svg(&rows)).with_context(|| format!("writing {}", svg_path.display()))?;
    print!("{csv}");
    Ok(())
}
