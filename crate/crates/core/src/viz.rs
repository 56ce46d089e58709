//! Minimal native SVG rendering for scatter plots, bar charts, and line
//! charts. Output is plain deterministic text: the same data always renders
//! byte-identical files.

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 480.0;
const MARGIN_LEFT: f64 = 70.0;
const MARGIN_RIGHT: f64 = 30.0;
const MARGIN_TOP: f64 = 50.0;
const MARGIN_BOTTOM: f64 = 60.0;

pub const SERIES_COLORS: [&str; 6] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b",
];

/// One named point set of a scatter plot.
pub struct ScatterSeries<'a> {
    pub label: &'a str,
    pub color: &'a str,
    pub points: &'a [(f64, f64)],
}

struct Frame {
    x_min: f64,
    x_max: f64,
    y_min: f64,
    y_max: f64,
}

impl Frame {
    fn from_bounds(x_min: f64, x_max: f64, y_min: f64, y_max: f64) -> Self {
        // Pad degenerate ranges so points never land on the frame edge.
        let (x_min, x_max) = pad_range(x_min, x_max);
        let (y_min, y_max) = pad_range(y_min, y_max);
        Self {
            x_min,
            x_max,
            y_min,
            y_max,
        }
    }

    fn x(&self, v: f64) -> f64 {
        MARGIN_LEFT + (v - self.x_min) / (self.x_max - self.x_min) * (WIDTH - MARGIN_LEFT - MARGIN_RIGHT)
    }

    fn y(&self, v: f64) -> f64 {
        HEIGHT - MARGIN_BOTTOM
            - (v - self.y_min) / (self.y_max - self.y_min) * (HEIGHT - MARGIN_TOP - MARGIN_BOTTOM)
    }
}

fn pad_range(min: f64, max: f64) -> (f64, f64) {
    if min == max {
        (min - 1.0, max + 1.0)
    } else {
        let pad = (max - min) * 0.05;
        (min - pad, max + pad)
    }
}

fn fmt(v: f64) -> String {
    format!("{v:.4}")
}

fn header(title: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" \
         viewBox=\"0 0 {WIDTH} {HEIGHT}\">\n\
         <rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"28\" font-family=\"sans-serif\" font-size=\"16\" \
         text-anchor=\"middle\">{}</text>\n",
        WIDTH / 2.0,
        escape(title)
    )
}

fn axes(out: &mut String, frame: &Frame) {
    out.push_str(&format!(
        "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
        fmt(MARGIN_LEFT),
        fmt(HEIGHT - MARGIN_BOTTOM),
        fmt(WIDTH - MARGIN_RIGHT),
        fmt(HEIGHT - MARGIN_BOTTOM)
    ));
    out.push_str(&format!(
        "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
        fmt(MARGIN_LEFT),
        fmt(MARGIN_TOP),
        fmt(MARGIN_LEFT),
        fmt(HEIGHT - MARGIN_BOTTOM)
    ));
    for i in 0..=4 {
        let t = i as f64 / 4.0;
        let xv = frame.x_min + t * (frame.x_max - frame.x_min);
        let yv = frame.y_min + t * (frame.y_max - frame.y_min);
        out.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"10\" \
             text-anchor=\"middle\">{}</text>\n",
            fmt(frame.x(xv)),
            fmt(HEIGHT - MARGIN_BOTTOM + 16.0),
            fmt(xv)
        ));
        out.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"10\" \
             text-anchor=\"end\">{}</text>\n",
            fmt(MARGIN_LEFT - 6.0),
            fmt(frame.y(yv) + 3.0),
            fmt(yv)
        ));
    }
}

fn legend(out: &mut String, entries: &[(&str, &str)]) {
    let mut y = MARGIN_TOP + 8.0;
    for (label, color) in entries {
        out.push_str(&format!(
            "<circle cx=\"{}\" cy=\"{}\" r=\"4\" fill=\"{color}\"/>\n",
            fmt(WIDTH - MARGIN_RIGHT - 120.0),
            fmt(y)
        ));
        out.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\">{}</text>\n",
            fmt(WIDTH - MARGIN_RIGHT - 110.0),
            fmt(y + 4.0),
            escape(label)
        ));
        y += 18.0;
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Scatter plot of one or more point series with a legend.
pub fn scatter_svg(title: &str, series: &[ScatterSeries<'_>]) -> String {
    let all: Vec<(f64, f64)> = series.iter().flat_map(|s| s.points.iter().copied()).collect();
    let x_min = all.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let x_max = all.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    let y_min = all.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
    let y_max = all.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    let frame = Frame::from_bounds(x_min, x_max, y_min, y_max);
    let mut out = header(title);
    axes(&mut out, &frame);
    for s in series {
        for &(x, y) in s.points {
            out.push_str(&format!(
                "<circle cx=\"{}\" cy=\"{}\" r=\"3\" fill=\"{}\" fill-opacity=\"0.7\"/>\n",
                fmt(frame.x(x)),
                fmt(frame.y(y)),
                s.color
            ));
        }
    }
    legend(
        &mut out,
        &series.iter().map(|s| (s.label, s.color)).collect::<Vec<_>>(),
    );
    out.push_str("</svg>\n");
    out
}

/// Vertical bar chart over labeled categories.
pub fn bar_chart_svg(title: &str, labels: &[String], values: &[f64]) -> String {
    let v_min = values.iter().copied().fold(0.0_f64, f64::min);
    let v_max = values.iter().copied().fold(0.0_f64, f64::max);
    let frame = Frame::from_bounds(0.0, labels.len() as f64, v_min, v_max);
    let mut out = header(title);
    axes(&mut out, &frame);
    let slot = (WIDTH - MARGIN_LEFT - MARGIN_RIGHT) / labels.len() as f64;
    let zero_y = frame.y(0.0);
    for (i, (label, &v)) in labels.iter().zip(values.iter()).enumerate() {
        let x = MARGIN_LEFT + i as f64 * slot + slot * 0.2;
        let y = frame.y(v);
        let (top, height) = if v >= 0.0 {
            (y, zero_y - y)
        } else {
            (zero_y, y - zero_y)
        };
        out.push_str(&format!(
            "<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"{}\"/>\n",
            fmt(x),
            fmt(top),
            fmt(slot * 0.6),
            fmt(height),
            SERIES_COLORS[i % SERIES_COLORS.len()]
        ));
        out.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" \
             text-anchor=\"middle\">{}</text>\n",
            fmt(x + slot * 0.3),
            fmt(HEIGHT - MARGIN_BOTTOM + 32.0),
            escape(label)
        ));
    }
    out.push_str("</svg>\n");
    out
}

/// One polyline of a line chart.
pub struct LineSeries<'a> {
    pub label: &'a str,
    pub values: &'a [f64],
}

/// Line chart over shared x labels, one polyline per series.
pub fn line_chart_svg(title: &str, x_labels: &[String], series: &[LineSeries<'_>]) -> String {
    let all: Vec<f64> = series.iter().flat_map(|s| s.values.iter().copied()).collect();
    let v_min = all.iter().copied().fold(f64::INFINITY, f64::min);
    let v_max = all.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let frame = Frame::from_bounds(0.0, (x_labels.len().max(2) - 1) as f64, v_min, v_max);
    let mut out = header(title);
    axes(&mut out, &frame);
    for (si, s) in series.iter().enumerate() {
        let color = SERIES_COLORS[si % SERIES_COLORS.len()];
        let path: Vec<String> = s
            .values
            .iter()
            .enumerate()
            .map(|(i, &v)| format!("{},{}", fmt(frame.x(i as f64)), fmt(frame.y(v))))
            .collect();
        out.push_str(&format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"2\"/>\n",
            path.join(" ")
        ));
        for (i, &v) in s.values.iter().enumerate() {
            out.push_str(&format!(
                "<circle cx=\"{}\" cy=\"{}\" r=\"3\" fill=\"{color}\"/>\n",
                fmt(frame.x(i as f64)),
                fmt(frame.y(v))
            ));
        }
    }
    for (i, label) in x_labels.iter().enumerate() {
        out.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" \
             text-anchor=\"middle\">{}</text>\n",
            fmt(frame.x(i as f64)),
            fmt(HEIGHT - MARGIN_BOTTOM + 32.0),
            escape(label)
        ));
    }
    legend(
        &mut out,
        &series
            .iter()
            .enumerate()
            .map(|(i, s)| (s.label, SERIES_COLORS[i % SERIES_COLORS.len()]))
            .collect::<Vec<_>>(),
    );
    out.push_str("</svg>\n");
    out
}
