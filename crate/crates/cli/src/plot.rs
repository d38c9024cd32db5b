//! Deterministic SVG charts of the eval tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde_json::{Map, Value};

use crate::{CliError, PlotArgs, PlotKind};

const W: f64 = 640.0;
const H: f64 = 400.0;
const LEFT: f64 = 64.0;
const RIGHT: f64 = 140.0;
const TOP: f64 = 36.0;
const BOTTOM: f64 = 48.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

impl PlotKind {
    pub fn name(self) -> &'static str {
        match self {
            PlotKind::Margins => "margins",
            PlotKind::Sweep => "sweep",
            PlotKind::Corr => "corr",
            PlotKind::Buckets => "buckets",
        }
    }
}

type Row = Map<String, Value>;

fn read_rows(path: &Path) -> Result<Vec<Row>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| ganpo::Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| match serde_json::from_str::<Value>(l) {
            Ok(Value::Object(m)) => Ok(m),
            Ok(_) => Err(CliError::Schema(format!("{} line {}: expected a JSON object", path.display(), i + 1))),
            Err(e) => Err(CliError::Schema(format!("{} line {}: {e}", path.display(), i + 1))),
        })
        .collect()
}

struct Table<'a> {
    path: &'a Path,
    rows: Vec<Row>,
}

impl Table<'_> {
    fn missing(&self, i: usize, col: &str, what: &str) -> CliError {
        CliError::Schema(format!("{} row {}: {what} column {col:?}", self.path.display(), i + 1))
    }

    fn num(&self, col: &str) -> Result<Vec<f64>, CliError> {
        self.rows
            .iter()
            .enumerate()
            .map(|(i, r)| match r.get(col) {
                None => Err(self.missing(i, col, "missing")),
                Some(v) => v.as_f64().ok_or_else(|| self.missing(i, col, "non-numeric")),
            })
            .collect()
    }

    fn opt_num(&self, col: &str) -> Result<Vec<Option<f64>>, CliError> {
        self.rows
            .iter()
            .enumerate()
            .map(|(i, r)| match r.get(col) {
                None => Err(self.missing(i, col, "missing")),
                Some(Value::Null) => Ok(None),
                Some(v) => v.as_f64().map(Some).ok_or_else(|| self.missing(i, col, "non-numeric")),
            })
            .collect()
    }

    fn text(&self, col: &str) -> Result<Vec<String>, CliError> {
        self.rows
            .iter()
            .enumerate()
            .map(|(i, r)| match r.get(col) {
                None => Err(self.missing(i, col, "missing")),
                Some(v) => v.as_str().map(str::to_string).ok_or_else(|| self.missing(i, col, "non-string")),
            })
            .collect()
    }
}

/// Linear map of a data range onto a pixel range.
#[derive(Clone, Copy)]
struct Scale {
    lo: f64,
    hi: f64,
    a: f64,
    b: f64,
}

impl Scale {
    fn new(values: impl Iterator<Item = f64>, a: f64, b: f64) -> Self {
        let (mut lo, mut hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
        if !lo.is_finite() || !hi.is_finite() {
            (lo, hi) = (0.0, 1.0);
        }
        if hi - lo < 1e-12 {
            (lo, hi) = (lo - 0.5, hi + 0.5);
        }
        let pad = 0.05 * (hi - lo);
        Scale { lo: lo - pad, hi: hi + pad, a, b }
    }

    fn at(&self, v: f64) -> f64 {
        self.a + (v - self.lo) / (self.hi - self.lo) * (self.b - self.a)
    }

    fn ticks(&self) -> Vec<f64> {
        (0..=4).map(|k| self.lo + (self.hi - self.lo) * k as f64 / 4.0).collect()
    }
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn fmt_tick(v: f64) -> String {
    let s = format!("{v:.3}");
    if s == "-0.000" { "0.000".into() } else { s }
}

struct Svg {
    body: String,
    x: Scale,
    y: Scale,
}

impl Svg {
    fn new(title: &str, xlabel: &str, ylabel: &str, x: Scale, y: Scale, x_ticks: bool) -> Self {
        let mut body = String::new();
        let _ = writeln!(body, r#"<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>"#);
        let _ = writeln!(body, r#"<text x="{:.1}" y="22" text-anchor="middle" font-size="15">{}</text>"#, (LEFT + W - RIGHT) / 2.0, esc(title));
        let (x0, x1, y0, y1) = (LEFT, W - RIGHT, H - BOTTOM, TOP);
        let _ = writeln!(body, r#"<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>"#);
        let _ = writeln!(body, r#"<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>"#);
        for t in y.ticks() {
            let py = y.at(t);
            let _ = writeln!(body, r##"<line x1="{x0}" y1="{py:.2}" x2="{x1}" y2="{py:.2}" stroke="#e0e0e0"/>"##);
            let _ = writeln!(body, r#"<text x="{:.1}" y="{:.2}" text-anchor="end" font-size="10">{}</text>"#, x0 - 4.0, py + 3.0, fmt_tick(t));
        }
        if x_ticks {
            for t in x.ticks() {
                let px = x.at(t);
                let _ = writeln!(body, r#"<line x1="{px:.2}" y1="{y0}" x2="{px:.2}" y2="{:.1}" stroke="black"/>"#, y0 + 4.0);
                let _ = writeln!(body, r#"<text x="{px:.2}" y="{:.1}" text-anchor="middle" font-size="10">{}</text>"#, y0 + 16.0, fmt_tick(t));
            }
        }
        let _ = writeln!(body, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="12">{}</text>"#, (x0 + x1) / 2.0, H - 10.0, esc(xlabel));
        let _ = writeln!(
            body,
            r#"<text x="14" y="{:.1}" text-anchor="middle" font-size="12" transform="rotate(-90 14 {:.1})">{}</text>"#,
            (y0 + y1) / 2.0,
            (y0 + y1) / 2.0,
            esc(ylabel)
        );
        Svg { body, x, y }
    }

    fn polyline(&mut self, pts: &[(f64, f64)], color: &str) {
        let coords: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", self.x.at(x), self.y.at(y))).collect();
        let _ = writeln!(self.body, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#, coords.join(" "));
    }

    fn dots(&mut self, pts: &[(f64, f64)], color: &str, r: f64) {
        for &(x, y) in pts {
            let _ = writeln!(self.body, r#"<circle cx="{:.2}" cy="{:.2}" r="{r}" fill="{color}" fill-opacity="0.6"/>"#, self.x.at(x), self.y.at(y));
        }
    }

    fn legend(&mut self, entries: &[(&str, &str)]) {
        for (k, (name, color)) in entries.iter().enumerate() {
            let y = TOP + 12.0 + 18.0 * k as f64;
            let x = W - RIGHT + 12.0;
            let _ = writeln!(self.body, r#"<rect x="{x}" y="{:.1}" width="12" height="12" fill="{color}"/>"#, y - 10.0);
            let _ = writeln!(self.body, r#"<text x="{:.1}" y="{y:.1}" font-size="11">{}</text>"#, x + 18.0, esc(name));
        }
    }

    fn note(&mut self, text: &str) {
        let _ = writeln!(self.body, r#"<text x="{:.1}" y="{:.1}" font-size="12">{}</text>"#, LEFT + 8.0, TOP + 14.0, esc(text));
    }

    fn finish(self) -> String {
        format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\" font-family=\"sans-serif\">\n{}</svg>\n",
            self.body
        )
    }
}

/// Group `(x, y)` points by series, ordered by series name then x.
fn by_series(series: Vec<String>, xs: Vec<f64>, ys: Vec<f64>) -> BTreeMap<String, Vec<(f64, f64)>> {
    let mut groups: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for ((s, x), y) in series.into_iter().zip(xs).zip(ys) {
        groups.entry(s).or_default().push((x, y));
    }
    for pts in groups.values_mut() {
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    }
    groups
}

fn line_chart(groups: BTreeMap<String, Vec<(f64, f64)>>, title: &str, xlabel: &str, ylabel: &str) -> String {
    let all: Vec<(f64, f64)> = groups.values().flatten().copied().collect();
    let x = Scale::new(all.iter().map(|p| p.0), LEFT, W - RIGHT);
    let y = Scale::new(all.iter().map(|p| p.1), H - BOTTOM, TOP);
    let mut svg = Svg::new(title, xlabel, ylabel, x, y, true);
    let mut legend = Vec::new();
    for (k, (name, pts)) in groups.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        svg.polyline(pts, color);
        if pts.len() <= 40 {
            svg.dots(pts, color, 2.5);
        }
        legend.push((name.as_str(), color));
    }
    svg.legend(&legend);
    svg.finish()
}

fn least_squares(pts: &[(f64, f64)]) -> Option<(f64, f64)> {
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    (sxx > 0.0).then(|| (sxy / sxx, my - sxy / sxx * mx))
}

fn corr_chart(t: &Table) -> Result<String, CliError> {
    let (xs, ys) = (t.num("score")?, t.num("reward")?);
    let pts: Vec<(f64, f64)> = xs.iter().copied().zip(ys.iter().copied()).collect();
    let x = Scale::new(xs.iter().copied(), LEFT, W - RIGHT);
    let y = Scale::new(ys.iter().copied(), H - BOTTOM, TOP);
    let mut svg = Svg::new("Discriminator score vs oracle reward", "discriminator score", "oracle reward", x, y, true);
    svg.dots(&pts, PALETTE[0], 2.5);
    match ganpo::evalsuite::pearson(&xs, &ys) {
        Some(r) => {
            if let Some((slope, icpt)) = least_squares(&pts) {
                svg.polyline(&[(x.lo, slope * x.lo + icpt), (x.hi, slope * x.hi + icpt)], PALETTE[1]);
            }
            svg.note(&format!("r = {r:.3} (n = {})", pts.len()));
        }
        None => svg.note(&format!("r undefined: constant column (n = {})", pts.len())),
    }
    Ok(svg.finish())
}

fn bucket_chart(t: &Table) -> Result<String, CliError> {
    let (los, his, wins, ns) = (t.num("lo")?, t.opt_num("hi")?, t.num("win_rate")?, t.num("n")?);
    let k = los.len().max(1) as f64;
    let x = Scale { lo: 0.0, hi: k, a: LEFT, b: W - RIGHT };
    let y = Scale { lo: 0.0, hi: 1.0, a: H - BOTTOM, b: TOP };
    let mut svg = Svg::new("Win rate by response length", "response length bucket", "win rate", x, y, false);
    let _ = writeln!(
        svg.body,
        r##"<line x1="{LEFT}" y1="{:.2}" x2="{}" y2="{:.2}" stroke="#888" stroke-dasharray="4 3"/>"##,
        y.at(0.5),
        W - RIGHT,
        y.at(0.5)
    );
    for (i, ((lo, hi), (w, n))) in los.iter().zip(&his).zip(wins.iter().zip(&ns)).enumerate() {
        let (x0, x1) = (x.at(i as f64 + 0.15), x.at(i as f64 + 0.85));
        let (top, base) = (y.at(w.clamp(0.0, 1.0)), y.at(0.0));
        let _ = writeln!(
            svg.body,
            r#"<rect x="{x0:.2}" y="{top:.2}" width="{:.2}" height="{:.2}" fill="{}"/>"#,
            x1 - x0,
            base - top,
            PALETTE[0]
        );
        let label = match hi {
            Some(h) => format!("[{lo}, {h})"),
            None => format!("[{lo}, inf)"),
        };
        let cx = (x0 + x1) / 2.0;
        let _ = writeln!(svg.body, r#"<text x="{cx:.2}" y="{:.1}" text-anchor="middle" font-size="10">{}</text>"#, H - BOTTOM + 14.0, esc(&label));
        let _ = writeln!(svg.body, r#"<text x="{cx:.2}" y="{:.2}" text-anchor="middle" font-size="10">n={n}</text>"#, top - 4.0);
    }
    Ok(svg.finish())
}

pub fn render(kind: PlotKind, input: &Path, y_col: &str) -> Result<String, CliError> {
    let t = Table { path: input, rows: read_rows(input)? };
    if t.rows.is_empty() {
        return Err(CliError::Schema(format!("{}: no rows to plot", input.display())));
    }
    match kind {
        PlotKind::Margins => Ok(line_chart(
            by_series(t.text("series")?, t.num("step")?, t.num("reward_margin")?),
            "Reward margin during training",
            "step",
            "reward margin",
        )),
        PlotKind::Sweep => {
            if y_col != "mean_reward" && y_col != "win_rate" {
                return Err(CliError::Usage(format!("--y must be mean_reward or win_rate, got {y_col:?}")));
            }
            Ok(line_chart(
                by_series(t.text("series")?, t.num("temperature")?, t.num(y_col)?),
                "Temperature sweep",
                "sampling temperature",
                &y_col.replace('_', " "),
            ))
        }
        PlotKind::Corr => corr_chart(&t),
        PlotKind::Buckets => bucket_chart(&t),
    }
}

pub fn run(a: &PlotArgs, out: &Path) -> Result<(), CliError> {
    let svg = render(a.kind, &a.input, &a.y)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| ganpo::Error::io(dir, e))?;
    }
    std::fs::write(out, svg).map_err(|e| ganpo::Error::io(out, e))?;
    eprintln!("wrote {}", out.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(lines: &str) -> tempfile::NamedTempFile {
        let f = tempfile::NamedTempFile::new().unwrap();
        std::fs::write(f.path(), lines).unwrap();
        f
    }

    #[test]
    fn missing_column_is_named() {
        let f = table("{\"series\":\"a\",\"step\":0}\n");
        let err = render(PlotKind::Margins, f.path(), "mean_reward").unwrap_err();
        assert!(matches!(&err, CliError::Schema(m) if m.contains("reward_margin")), "{err}");
    }

    #[test]
    fn constant_input_still_renders() {
        let f = table("{\"score\":1.0,\"reward\":0.5}\n{\"score\":1.0,\"reward\":0.5}\n");
        let svg = render(PlotKind::Corr, f.path(), "mean_reward").unwrap();
        assert!(svg.contains("r undefined") && !svg.contains("NaN"));
    }

    #[test]
    fn fitted_line_recovers_exact_slope() {
        let (m, c) = least_squares(&[(0.0, 1.0), (1.0, 3.0), (2.0, 5.0)]).unwrap();
        assert!((m - 2.0).abs() < 1e-12 && (c - 1.0).abs() < 1e-12);
    }
}
