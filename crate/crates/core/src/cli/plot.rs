use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::pipeline::{split_dir, CHECKPOINT_FILE, CONFIG_FILE, MANIFEST_FILE, TEST_CSV};
use crate::data::{load_csv, DatasetManifest};
use crate::diffmath::{derive_seed, Tensor};
use crate::error::{Error, Result};
use crate::evaluation::{predictive_moments, predictive_samples};
use crate::network::load_checkpoint;
use crate::summaries::{central_interval, hpd_intervals, mode_estimate};

const PLOT_STREAM: u64 = 6_000;
const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 50.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlotKind {
    Scatter,
    Interval,
    Hpd,
}

impl FromStr for PlotKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scatter" => Ok(PlotKind::Scatter),
            "interval" => Ok(PlotKind::Interval),
            "hpd" => Ok(PlotKind::Hpd),
            other => Err(Error::Config(format!("unknown plot kind `{other}`"))),
        }
    }
}

impl PlotKind {
    fn name(self) -> &'static str {
        match self {
            PlotKind::Scatter => "scatter",
            PlotKind::Interval => "interval",
            PlotKind::Hpd => "hpd",
        }
    }

    pub fn default_level(self) -> f64 {
        match self {
            PlotKind::Hpd => 0.75,
            _ => 0.95,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PlotRequest {
    pub kind: PlotKind,
    pub level: Option<f64>,
    /// Query inputs on an even grid over the held-out input range.
    pub points: usize,
    pub split: usize,
}

impl Default for PlotRequest {
    fn default() -> Self {
        Self {
            kind: PlotKind::Interval,
            level: None,
            points: 100,
            split: 0,
        }
    }
}

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn fit(xs: &[f64], ys: &[f64]) -> Self {
        let span = |v: &[f64]| {
            let lo = v.iter().copied().filter(|x| x.is_finite()).fold(f64::INFINITY, f64::min);
            let hi = v.iter().copied().filter(|x| x.is_finite()).fold(f64::NEG_INFINITY, f64::max);
            if !lo.is_finite() {
                (0.0, 1.0)
            } else if hi - lo < 1e-12 {
                (lo - 0.5, hi + 0.5)
            } else {
                (lo, hi)
            }
        };
        let (x0, x1) = span(xs);
        let (y0, y1) = span(ys);
        let pad = 0.05 * (y1 - y0);
        Self { x0, x1, y0: y0 - pad, y1: y1 + pad }
    }

    fn px(&self, x: f64) -> f64 {
        MARGIN + (x - self.x0) / (self.x1 - self.x0) * (WIDTH - 2.0 * MARGIN)
    }

    fn py(&self, y: f64) -> f64 {
        HEIGHT - MARGIN - (y - self.y0) / (self.y1 - self.y0) * (HEIGHT - 2.0 * MARGIN)
    }
}

struct Svg {
    body: String,
}

impl Svg {
    fn new(frame: &Frame, title: &str) -> Self {
        let mut body = String::new();
        let _ = writeln!(
            body,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
        );
        let _ = writeln!(body, r#"<rect width="100%" height="100%" fill="white"/>"#);
        let _ = writeln!(
            body,
            r#"<text x="{:.2}" y="20" font-family="sans-serif" font-size="14" text-anchor="middle">{title}</text>"#,
            WIDTH / 2.0
        );
        let (l, r, t, b) = (MARGIN, WIDTH - MARGIN, MARGIN, HEIGHT - MARGIN);
        let _ = writeln!(
            body,
            r#"<path d="M{l:.2},{t:.2} L{l:.2},{b:.2} L{r:.2},{b:.2}" stroke="black" fill="none"/>"#
        );
        for i in 0..=4 {
            let fx = frame.x0 + (frame.x1 - frame.x0) * i as f64 / 4.0;
            let fy = frame.y0 + (frame.y1 - frame.y0) * i as f64 / 4.0;
            let _ = writeln!(
                body,
                r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="10" text-anchor="middle">{fx:.2}</text>"#,
                frame.px(fx),
                b + 15.0
            );
            let _ = writeln!(
                body,
                r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="10" text-anchor="end">{fy:.2}</text>"#,
                l - 5.0,
                frame.py(fy) + 3.0
            );
        }
        Self { body }
    }

    fn dot(&mut self, frame: &Frame, x: f64, y: f64, r: f64, color: &str, opacity: f64) {
        if x.is_finite() && y.is_finite() {
            let _ = writeln!(
                self.body,
                r#"<circle cx="{:.2}" cy="{:.2}" r="{r}" fill="{color}" fill-opacity="{opacity}"/>"#,
                frame.px(x),
                frame.py(y)
            );
        }
    }

    fn polyline(&mut self, frame: &Frame, pts: &[(f64, f64)], color: &str) {
        let coords: Vec<String> = pts
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", frame.px(x), frame.py(y)))
            .collect();
        let _ = writeln!(
            self.body,
            r#"<polyline points="{}" stroke="{color}" stroke-width="1.5" fill="none"/>"#,
            coords.join(" ")
        );
    }

    fn band(&mut self, frame: &Frame, xs: &[f64], lo: &[f64], hi: &[f64], color: &str) {
        let mut coords: Vec<String> = xs
            .iter()
            .zip(hi)
            .map(|(&x, &y)| format!("{:.2},{:.2}", frame.px(x), frame.py(y)))
            .collect();
        coords.extend(
            xs.iter()
                .zip(lo)
                .rev()
                .map(|(&x, &y)| format!("{:.2},{:.2}", frame.px(x), frame.py(y))),
        );
        let _ = writeln!(
            self.body,
            r#"<polygon points="{}" fill="{color}" fill-opacity="0.3" stroke="none"/>"#,
            coords.join(" ")
        );
    }

    fn segment(&mut self, frame: &Frame, x: f64, lo: f64, hi: f64, color: &str) {
        let _ = writeln!(
            self.body,
            r#"<line x1="{0:.2}" y1="{1:.2}" x2="{0:.2}" y2="{2:.2}" stroke="{color}" stroke-opacity="0.4" stroke-width="3"/>"#,
            frame.px(x),
            frame.py(lo),
            frame.py(hi)
        );
    }

    fn finish(mut self) -> String {
        self.body.push_str("</svg>\n");
        self.body
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Renders one plot of a trained run into `out` as `plot_<kind>.svg` with
/// the plotted numbers in `plot_<kind>.csv`.
pub fn cmd_plot(run: &Path, req: &PlotRequest, out: &Path) -> Result<(PathBuf, PathBuf)> {
    let read = |p: PathBuf| std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e));
    let cfg: RunConfig = serde_json::from_str(&read(run.join(CONFIG_FILE))?)?;
    let manifest: DatasetManifest = serde_json::from_str(&read(run.join(MANIFEST_FILE))?)?;
    let dir = split_dir(run, req.split);
    let ckpt = load_checkpoint(&dir.join(CHECKPOINT_FILE))?;
    let model = ckpt.model()?;
    let test = load_csv(&dir.join(TEST_CSV), &manifest.target_columns)?;
    if test.input_dim() != 1 || test.output_dim() != 1 {
        return Err(Error::Data("plots need one input and one target column".into()));
    }
    if req.points < 2 {
        return Err(Error::Config("plots need at least 2 query points".into()));
    }
    let level = req.level.unwrap_or(req.kind.default_level());
    let tx = test.x().data();
    let ty = test.y().data();
    let lo = tx.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = tx.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let xs: Vec<f64> = (0..req.points)
        .map(|i| lo + (hi - lo) * i as f64 / (req.points - 1) as f64)
        .collect();
    let raw = Tensor::new(vec![req.points, 1], xs.clone())?;
    let query = match &ckpt.whitening {
        Some(w) => w.apply(&raw)?,
        None => raw,
    };
    let samples = predictive_samples(&model, &query, cfg.eval_m, derive_seed(cfg.seed, PLOT_STREAM))?;
    let m = samples.shape()[1];

    let mut csv = String::new();
    let mut all_y: Vec<f64> = ty.to_vec();
    all_y.extend_from_slice(samples.data());
    let frame = Frame::fit(&xs, &all_y);
    let title = format!("{} ({})", req.kind.name(), manifest.source);
    let mut svg = Svg::new(&frame, &title);

    match req.kind {
        PlotKind::Scatter => {
            csv.push_str("series,x,y\n");
            for (i, &x) in xs.iter().enumerate() {
                for &y in samples.row(i) {
                    let _ = writeln!(csv, "prediction,{x:?},{y:?}");
                    svg.dot(&frame, x, y, 1.0, "steelblue", 0.3);
                }
            }
            for (&x, &y) in tx.iter().zip(ty) {
                let _ = writeln!(csv, "data,{x:?},{y:?}");
                svg.dot(&frame, x, y, 1.5, "darkorange", 0.8);
            }
        }
        PlotKind::Interval => {
            let (mean, _) = predictive_moments(&model, &query)?;
            csv.push_str("x,mean,lo,hi\n");
            let mut los = Vec::new();
            let mut his = Vec::new();
            for (i, &x) in xs.iter().enumerate() {
                let (l, h) = if m >= 2 {
                    central_interval(samples.row(i), level)?
                } else {
                    (samples.row(i)[0], samples.row(i)[0])
                };
                let _ = writeln!(csv, "{x:?},{:?},{l:?},{h:?}", mean.data()[i]);
                los.push(l);
                his.push(h);
            }
            for (&x, &y) in tx.iter().zip(ty) {
                svg.dot(&frame, x, y, 1.5, "darkorange", 0.8);
            }
            svg.band(&frame, &xs, &los, &his, "steelblue");
            let line: Vec<(f64, f64)> = xs.iter().copied().zip(mean.data().iter().copied()).collect();
            svg.polyline(&frame, &line, "navy");
        }
        PlotKind::Hpd => {
            if m < 10 {
                return Err(Error::Config("HPD plots need at least 10 samples per input".into()));
            }
            csv.push_str("x,mode,interval,lo,hi,mass\n");
            for (&x, &y) in tx.iter().zip(ty) {
                svg.dot(&frame, x, y, 1.5, "darkorange", 0.8);
            }
            let mut modes = Vec::new();
            for (i, &x) in xs.iter().enumerate() {
                let set = hpd_intervals(samples.row(i), level, None)?;
                let mode = mode_estimate(samples.row(i), None)?;
                for (j, &(l, h)) in set.intervals.iter().enumerate() {
                    let _ = writeln!(csv, "{x:?},{mode:?},{j},{l:?},{h:?},{:?}", set.achieved_mass);
                    svg.segment(&frame, x, l, h, "steelblue");
                }
                modes.push((x, mode));
            }
            svg.polyline(&frame, &modes, "navy");
        }
    }

    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let svg_path = out.join(format!("plot_{}.svg", req.kind.name()));
    let csv_path = out.join(format!("plot_{}.csv", req.kind.name()));
    write_text(&svg_path, &svg.finish())?;
    write_text(&csv_path, &csv)?;
    Ok((svg_path, csv_path))
}
