//! Trajectory CSV, key-value reports and velocity plots.

use std::fmt::Write as _;
use std::io::{self, BufRead, Write};
use std::path::Path;

use super::{ExperimentReport, Mode, TrajectoryLog};

pub const CSV_HEADER: &str =
    "t,x,y,theta,v_des,omega_des,v,omega,h_ns_true,h_ns_meas,eps_min,eps_mean,eps_max,loss,n_active";

pub fn write_trajectory_csv<W: Write>(log: &TrajectoryLog, mut w: W) -> io::Result<()> {
    writeln!(w, "{CSV_HEADER}")?;
    for r in &log.records {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.t,
            r.pose.x,
            r.pose.y,
            r.pose.theta,
            r.u_des[0],
            r.u_des[1],
            r.u[0],
            r.u[1],
            r.h_ns_true,
            r.h_ns_meas,
            r.eps_min,
            r.eps_mean,
            r.eps_max,
            r.loss.unwrap_or(f64::NAN),
            r.n_active
        )?;
    }
    Ok(())
}

pub fn format_report(report: &ExperimentReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "mode = {}", report.mode);
    let _ = writeln!(s, "steps = {}", report.steps);
    let _ = writeln!(s, "min_h_ns_true = {}", report.min_h_ns_true);
    let _ = writeln!(s, "final_h_ns_true = {}", report.final_h_ns_true);
    let _ = writeln!(s, "final_standoff = {}", report.final_standoff);
    let _ = writeln!(s, "safety_violated = {}", report.safety_violated);
    let _ = writeln!(s, "steady_state_velocity = {}", report.steady_state_velocity);
    let _ = writeln!(s, "infeasible_steps = {}", report.infeasible_steps);
    s
}

/// `(t, v)` pairs from a trajectory CSV.
pub fn read_velocity_series(path: &Path) -> io::Result<Vec<(f64, f64)>> {
    let f = io::BufReader::new(std::fs::File::open(path)?);
    let mut lines = f.lines();
    let header = lines.next().transpose()?.unwrap_or_default();
    if header != CSV_HEADER {
        return Err(io::Error::new(io::ErrorKind::InvalidData, format!("{}: unexpected header", path.display())));
    }
    let mut out = Vec::new();
    for line in lines {
        let line = line?;
        let cols: Vec<&str> = line.split(',').collect();
        let parse = |i: usize| {
            cols.get(i)
                .and_then(|s| s.parse::<f64>().ok())
                .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidData, format!("{}: bad row `{line}`", path.display())))
        };
        out.push((parse(0)?, parse(6)?));
    }
    Ok(out)
}

/// Writes `trajectory.csv`, `report.txt` and `velocity.png` into `dir`.
pub fn emit_outputs(log: &TrajectoryLog, report: &ExperimentReport, dir: &Path) -> io::Result<()> {
    if log.records.is_empty() {
        return Err(io::Error::new(io::ErrorKind::InvalidInput, "empty trajectory"));
    }
    std::fs::create_dir_all(dir)?;
    let mut csv = io::BufWriter::new(std::fs::File::create(dir.join("trajectory.csv"))?);
    write_trajectory_csv(log, &mut csv)?;
    csv.flush()?;
    std::fs::write(dir.join("report.txt"), format_report(report))?;
    let series: Vec<(f64, f64)> = log.records.iter().map(|r| (r.t, r.u[0])).collect();
    let v_des = log.records[0].u_des[0];
    write_plot(&dir.join("velocity.png"), &[(log.mode.name().to_owned(), series)], Some(v_des))
}

/// Overlays the velocity series of every `root/<mode>/trajectory.csv` present
/// into `root/overlay.png`. Returns the modes plotted.
pub fn emit_overlay(root: &Path) -> io::Result<Vec<Mode>> {
    let mut series = Vec::new();
    let mut modes = Vec::new();
    for mode in Mode::ALL {
        let path = root.join(mode.name()).join("trajectory.csv");
        if path.exists() {
            series.push((mode.name().to_owned(), read_velocity_series(&path)?));
            modes.push(mode);
        }
    }
    if !series.is_empty() {
        write_plot(&root.join("overlay.png"), &series, None)?;
    }
    Ok(modes)
}

const W: usize = 640;
const H: usize = 400;
const LEFT: usize = 70;
const RIGHT: usize = 20;
const TOP: usize = 20;
const BOTTOM: usize = 45;

type Rgb = [u8; 3];

fn color_for(name: &str) -> Rgb {
    match name {
        "naive" => [214, 39, 40],
        "robust-pretrained" => [31, 119, 180],
        "robust-online" => [44, 160, 44],
        "robust-oracle" => [148, 103, 189],
        _ => [80, 80, 80],
    }
}

struct Canvas {
    px: Vec<u8>,
}

impl Canvas {
    fn new() -> Self {
        Self { px: vec![255; W * H * 3] }
    }

    fn set(&mut self, x: i64, y: i64, c: Rgb) {
        if x >= 0 && y >= 0 && (x as usize) < W && (y as usize) < H {
            let i = (y as usize * W + x as usize) * 3;
            self.px[i..i + 3].copy_from_slice(&c);
        }
    }

    fn line(&mut self, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: Rgb, thick: bool) {
        let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
        let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
        let (mut x, mut y, mut err) = (x0, y0, dx + dy);
        loop {
            self.set(x, y, c);
            if thick {
                self.set(x, y + 1, c);
                self.set(x + 1, y, c);
            }
            if x == x1 && y == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x += sx;
            }
            if e2 <= dx {
                err += dx;
                y += sy;
            }
        }
    }

    fn rect(&mut self, x0: i64, y0: i64, w: i64, h: i64, c: Rgb) {
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                self.set(x, y, c);
            }
        }
    }

    fn text(&mut self, x: i64, y: i64, s: &str, c: Rgb) {
        for (k, ch) in s.chars().enumerate() {
            let rows = glyph(ch);
            for (r, bits) in rows.iter().enumerate() {
                for col in 0..5 {
                    if bits & (0x10 >> col) != 0 {
                        self.set(x + (k as i64) * 6 + col, y + r as i64, c);
                    }
                }
            }
        }
    }
}

/// 5x7 bitmap glyphs; each row uses the low five bits, most significant on the left.
fn glyph(ch: char) -> [u8; 7] {
    match ch {
        '0' => [0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E],
        '1' => [0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E],
        '2' => [0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F],
        '3' => [0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E],
        '4' => [0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02],
        '5' => [0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E],
        '6' => [0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E],
        '7' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08],
        '8' => [0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E],
        '9' => [0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C],
        '-' => [0x00, 0x00, 0x00, 0x1F, 0x00, 0x00, 0x00],
        '.' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x0C, 0x0C],
        '/' => [0x00, 0x01, 0x02, 0x04, 0x08, 0x10, 0x00],
        '[' => [0x0E, 0x08, 0x08, 0x08, 0x08, 0x08, 0x0E],
        ']' => [0x0E, 0x02, 0x02, 0x02, 0x02, 0x02, 0x0E],
        ' ' => [0; 7],
        'a' => [0x00, 0x00, 0x0E, 0x01, 0x0F, 0x11, 0x0F],
        'b' => [0x10, 0x10, 0x16, 0x19, 0x11, 0x11, 0x1E],
        'c' => [0x00, 0x00, 0x0E, 0x10, 0x10, 0x11, 0x0E],
        'd' => [0x01, 0x01, 0x0D, 0x13, 0x11, 0x11, 0x0F],
        'e' => [0x00, 0x00, 0x0E, 0x11, 0x1F, 0x10, 0x0E],
        'g' => [0x00, 0x0F, 0x11, 0x11, 0x0F, 0x01, 0x0E],
        'i' => [0x04, 0x00, 0x0C, 0x04, 0x04, 0x04, 0x0E],
        'l' => [0x0C, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E],
        'm' => [0x00, 0x00, 0x1A, 0x15, 0x15, 0x11, 0x11],
        'n' => [0x00, 0x00, 0x16, 0x19, 0x11, 0x11, 0x11],
        'o' => [0x00, 0x00, 0x0E, 0x11, 0x11, 0x11, 0x0E],
        'p' => [0x00, 0x00, 0x1E, 0x11, 0x1E, 0x10, 0x10],
        'r' => [0x00, 0x00, 0x16, 0x19, 0x10, 0x10, 0x10],
        's' => [0x00, 0x00, 0x0E, 0x10, 0x0E, 0x01, 0x1E],
        't' => [0x08, 0x08, 0x1C, 0x08, 0x08, 0x09, 0x06],
        'u' => [0x00, 0x00, 0x11, 0x11, 0x11, 0x13, 0x0D],
        'v' => [0x00, 0x00, 0x11, 0x11, 0x11, 0x0A, 0x04],
        'w' => [0x00, 0x00, 0x11, 0x11, 0x15, 0x15, 0x0A],
        _ => [0x1F, 0x11, 0x11, 0x11, 0x11, 0x11, 0x1F],
    }
}

fn fmt_tick(x: f64) -> String {
    let s = format!("{x:.2}");
    if s == "-0.00" { "0.00".into() } else { s }
}

/// Line plot of `v` against `t` for each named series, with a legend and an
/// optional dashed reference level. Series names are also stored as PNG text.
pub fn write_plot(path: &Path, series: &[(String, Vec<(f64, f64)>)], reference: Option<f64>) -> io::Result<()> {
    let mut canvas = Canvas::new();
    let points = series.iter().flat_map(|(_, s)| s.iter()).filter(|p| p.0.is_finite() && p.1.is_finite());
    let (mut t_max, mut v_lo, mut v_hi) = (0.0f64, 0.0f64, 0.0f64);
    for &(t, v) in points {
        t_max = t_max.max(t);
        v_lo = v_lo.min(v);
        v_hi = v_hi.max(v);
    }
    if let Some(r) = reference {
        v_lo = v_lo.min(r);
        v_hi = v_hi.max(r);
    }
    if t_max <= 0.0 {
        t_max = 1.0;
    }
    let pad = ((v_hi - v_lo) * 0.08).max(0.01);
    let (v_lo, v_hi) = (v_lo - pad, v_hi + pad);
    let (pw, ph) = ((W - LEFT - RIGHT) as f64, (H - TOP - BOTTOM) as f64);
    let map = |t: f64, v: f64| -> (i64, i64) {
        let x = LEFT as f64 + t / t_max * pw;
        let y = TOP as f64 + (v_hi - v) / (v_hi - v_lo) * ph;
        (x.round() as i64, y.round() as i64)
    };

    let axis = [0, 0, 0];
    let grid = [225, 225, 225];
    for k in 0..=5 {
        let v = v_lo + (v_hi - v_lo) * f64::from(k) / 5.0;
        let (_, y) = map(0.0, v);
        canvas.line((LEFT as i64, y), ((W - RIGHT) as i64, y), grid, false);
        canvas.text(4, y - 3, &fmt_tick(v), axis);
        let t = t_max * f64::from(k) / 5.0;
        let (x, _) = map(t, v_lo);
        canvas.line((x, TOP as i64), (x, (H - BOTTOM) as i64), grid, false);
        let label = format!("{t:.0}");
        canvas.text(x - 3 * label.len() as i64, (H - BOTTOM) as i64 + 6, &label, axis);
    }
    let (_, y0) = map(0.0, 0.0);
    canvas.line((LEFT as i64, y0), ((W - RIGHT) as i64, y0), [150, 150, 150], false);
    if let Some(r) = reference {
        let (_, yr) = map(0.0, r);
        let mut x = LEFT as i64;
        while x < (W - RIGHT) as i64 {
            canvas.line((x, yr), ((x + 5).min((W - RIGHT) as i64), yr), [120, 120, 120], false);
            x += 10;
        }
    }
    canvas.line((LEFT as i64, TOP as i64), (LEFT as i64, (H - BOTTOM) as i64), axis, false);
    canvas.line((LEFT as i64, (H - BOTTOM) as i64), ((W - RIGHT) as i64, (H - BOTTOM) as i64), axis, false);
    canvas.text((W / 2) as i64 - 15, (H - 16) as i64, "t [s]", axis);
    canvas.text(4, 6, "v [m/s]", axis);

    for (name, s) in series {
        let c = color_for(name);
        let pts: Vec<(i64, i64)> = s.iter().filter(|p| p.0.is_finite() && p.1.is_finite()).map(|&(t, v)| map(t, v)).collect();
        for pair in pts.windows(2) {
            canvas.line(pair[0], pair[1], c, true);
        }
        if let [only] = pts[..] {
            canvas.rect(only.0 - 1, only.1 - 1, 3, 3, c);
        }
    }
    for (k, (name, _)) in series.iter().enumerate() {
        let x = (W - RIGHT) as i64 - 140;
        let y = TOP as i64 + 8 + 14 * k as i64;
        canvas.rect(x, y, 12, 7, color_for(name));
        canvas.text(x + 18, y, name, axis);
    }

    let file = std::fs::File::create(path)?;
    let mut enc = png::Encoder::new(io::BufWriter::new(file), W as u32, H as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let names: Vec<&str> = series.iter().map(|(n, _)| n.as_str()).collect();
    enc.add_text_chunk("series".into(), names.join(",")).map_err(io::Error::other)?;
    let mut writer = enc.write_header().map_err(io::Error::other)?;
    writer.write_image_data(&canvas.px).map_err(io::Error::other)?;
    writer.finish().map_err(io::Error::other)
}

/// Series names stored in a plot written by [`write_plot`].
pub fn plot_series_names(path: &Path) -> io::Result<Vec<String>> {
    let decoder = png::Decoder::new(io::BufReader::new(std::fs::File::open(path)?));
    let reader = decoder.read_info().map_err(io::Error::other)?;
    let info = reader.info();
    Ok(info
        .uncompressed_latin1_text
        .iter()
        .find(|t| t.keyword == "series")
        .map(|t| t.text.split(',').filter(|s| !s.is_empty()).map(str::to_owned).collect())
        .unwrap_or_default())
}
