//! Line charts of loss curves.
//!
//! Text needs a TrueType font: the file named by `BEDFUSE_FONT`, else the
//! first of a few common system locations. Without one, charts are drawn
//! without labels.

use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use plotters::prelude::*;

use crate::error::{Error, Result};

const FONT_CANDIDATES: &[&str] = &[
    "/usr/share/fonts/truetype/dejavu/DejaVuSans.ttf",
    "/usr/share/fonts/TTF/DejaVuSans.ttf",
    "/usr/share/fonts/dejavu/DejaVuSans.ttf",
    "/Library/Fonts/Arial.ttf",
    "C:\\Windows\\Fonts\\arial.ttf",
];

const FAMILY: &str = "sans-serif";
const WIDTH: u32 = 800;
const HEIGHT: u32 = 500;

fn font_ready() -> bool {
    static READY: OnceLock<bool> = OnceLock::new();
    *READY.get_or_init(|| {
        let env = std::env::var_os("BEDFUSE_FONT").map(PathBuf::from);
        let paths = env
            .into_iter()
            .chain(FONT_CANDIDATES.iter().map(PathBuf::from));
        for p in paths {
            if let Ok(bytes) = std::fs::read(&p) {
                let bytes: &'static [u8] = Box::leak(bytes.into_boxed_slice());
                if plotters::style::register_font(FAMILY, FontStyle::Normal, bytes).is_ok() {
                    return true;
                }
            }
        }
        false
    })
}

/// One named curve of `(x, y)` points.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

/// Reads column `column` of a CSV against its first column.
pub fn read_series(path: &Path, column: &str) -> Result<Series> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines
        .next()
        .ok_or_else(|| Error::Plot(format!("{} is empty", path.display())))?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    let idx = cols
        .iter()
        .position(|c| *c == column)
        .ok_or_else(|| Error::Plot(format!("{} has no `{column}` column", path.display())))?;
    let mut points = Vec::new();
    for (n, line) in lines.enumerate() {
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        let num = |i: usize| {
            f.get(i)
                .and_then(|s| s.parse::<f64>().ok())
                .ok_or_else(|| Error::Plot(format!("{}: bad row {}", path.display(), n + 2)))
        };
        points.push((num(0)?, num(idx)?));
    }
    if points.is_empty() {
        return Err(Error::Plot(format!("{} has no data rows", path.display())));
    }
    let name = path
        .parent()
        .and_then(|p| p.file_name())
        .map_or_else(|| column.to_string(), |d| d.to_string_lossy().into_owned());
    Ok(Series { name, points })
}

/// Draws `series` as lines on shared axes into a PNG at `path`.
pub fn line_chart(
    path: &Path,
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[Series],
) -> Result<()> {
    if series.is_empty() || series.iter().any(|s| s.points.is_empty()) {
        return Err(Error::Plot("nothing to plot".into()));
    }
    let pts = || series.iter().flat_map(|s| s.points.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in pts() {
        if !(x.is_finite() && y.is_finite()) {
            return Err(Error::Plot(format!("non-finite point ({x}, {y})")));
        }
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    let pad = ((y1 - y0) * 0.05).max(1e-9);
    let (y0, y1) = (y0 - pad, y1 + pad);
    let text = font_ready();
    let err = |e: &dyn std::fmt::Display| Error::Plot(format!("{}: {e}", path.display()));

    let mut buf = vec![0u8; WIDTH as usize * HEIGHT as usize * 3];
    {
        let root = BitMapBackend::with_buffer(&mut buf, (WIDTH, HEIGHT)).into_drawing_area();
        root.fill(&WHITE).map_err(|e| err(&e))?;
        let mut builder = ChartBuilder::on(&root);
        builder.margin(20);
        if text {
            builder
                .caption(title, (FAMILY, 24))
                .x_label_area_size(40)
                .y_label_area_size(60);
        }
        let mut chart = builder
            .build_cartesian_2d(x0..x1, y0..y1)
            .map_err(|e| err(&e))?;
        let mut mesh = chart.configure_mesh();
        if text {
            mesh.x_desc(x_label)
                .y_desc(y_label)
                .label_style((FAMILY, 14));
        } else {
            mesh.x_labels(0).y_labels(0);
        }
        mesh.draw().map_err(|e| err(&e))?;
        for (i, s) in series.iter().enumerate() {
            let color = Palette99::pick(i).to_rgba();
            let drawn = chart
                .draw_series(LineSeries::new(
                    s.points.iter().copied(),
                    color.stroke_width(2),
                ))
                .map_err(|e| err(&e))?;
            if text {
                drawn.label(s.name.clone()).legend(move |(x, y)| {
                    PathElement::new(vec![(x, y), (x + 20, y)], color.stroke_width(2))
                });
            }
        }
        if text && series.len() > 1 {
            chart
                .configure_series_labels()
                .background_style(WHITE.mix(0.8))
                .border_style(BLACK)
                .label_font((FAMILY, 14))
                .draw()
                .map_err(|e| err(&e))?;
        }
        root.present().map_err(|e| err(&e))?;
    }
    image::save_buffer(path, &buf, WIDTH, HEIGHT, image::ColorType::Rgb8).map_err(|e| err(&e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_inputs_are_plot_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("losses.csv");
        std::fs::write(&p, "").unwrap();
        assert!(matches!(read_series(&p, "g_l1"), Err(Error::Plot(_))));
        std::fs::write(&p, "epoch,g_l1,g_adv,d_loss\n").unwrap();
        assert!(matches!(read_series(&p, "g_l1"), Err(Error::Plot(_))));
        assert!(matches!(
            line_chart(&dir.path().join("x.png"), "t", "x", "y", &[]),
            Err(Error::Plot(_))
        ));
    }

    #[test]
    fn renders_two_runs() {
        let dir = tempfile::tempdir().unwrap();
        let mk = |name: &str, k: f64| Series {
            name: name.into(),
            points: (1..=200).map(|e| (e as f64, k / e as f64)).collect(),
        };
        let p = dir.path().join("chart.png");
        line_chart(&p, "L1", "epoch", "loss", &[mk("a", 1.0), mk("b", 2.0)]).unwrap();
        let img = image::open(&p).unwrap();
        assert_eq!((img.width(), img.height()), (WIDTH, HEIGHT));
    }
}
