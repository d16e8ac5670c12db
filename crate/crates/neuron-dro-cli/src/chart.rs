//! Self-contained SVG line charts for convergence reports.
//!
//! Hand-rolled on purpose: the report command must not pull in a plotting
//! stack. The output is a single `<svg>` element with a grid, axes, one
//! polyline per series, and a legend. Non-finite points are dropped rather
//! than propagated into coordinates.

/// One labelled curve.
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

const WIDTH: f64 = 880.0;
const HEIGHT: f64 = 560.0;
const LEFT: f64 = 86.0;
const RIGHT: f64 = 30.0;
const TOP: f64 = 54.0;
const BOTTOM: f64 = 64.0;
const TICKS: usize = 5;
const COLORS: [&str; 5] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"];

/// Render a line chart. Ranges are computed over the finite points of every
/// series; degenerate ranges are padded so the mapping stays well defined.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let finite: Vec<(f64, f64)> = series
        .iter()
        .flat_map(|s| s.points.iter().copied())
        .filter(|(x, y)| x.is_finite() && y.is_finite())
        .collect();
    let (x_min, x_max) = padded_range(finite.iter().map(|p| p.0), 0.0);
    let (y_min, y_max) = padded_range(finite.iter().map(|p| p.1), 0.05);
    let plot_w = WIDTH - LEFT - RIGHT;
    let plot_h = HEIGHT - TOP - BOTTOM;
    let map_x = |x: f64| LEFT + (x - x_min) / (x_max - x_min) * plot_w;
    let map_y = |y: f64| TOP + (1.0 - (y - y_min) / (y_max - y_min)) * plot_h;

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {WIDTH} {HEIGHT}\" \
         font-family=\"sans-serif\" font-size=\"13\">\n"
    ));
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"#ffffff\"/>\n");
    svg.push_str(&format!(
        "<text x=\"{:.1}\" y=\"26\" text-anchor=\"middle\" font-size=\"16\">{}</text>\n",
        WIDTH / 2.0,
        xml_escape(title)
    ));

    // Grid and tick labels.
    for t in 0..=TICKS {
        let frac = t as f64 / TICKS as f64;
        let xv = x_min + frac * (x_max - x_min);
        let yv = y_min + frac * (y_max - y_min);
        let px = map_x(xv);
        let py = map_y(yv);
        svg.push_str(&format!(
            "<line x1=\"{px:.1}\" y1=\"{:.1}\" x2=\"{px:.1}\" y2=\"{:.1}\" stroke=\"#dddddd\"/>\n",
            TOP,
            TOP + plot_h
        ));
        svg.push_str(&format!(
            "<line x1=\"{:.1}\" y1=\"{py:.1}\" x2=\"{:.1}\" y2=\"{py:.1}\" stroke=\"#dddddd\"/>\n",
            LEFT,
            LEFT + plot_w
        ));
        svg.push_str(&format!(
            "<text x=\"{px:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>\n",
            TOP + plot_h + 20.0,
            fmt_tick(xv)
        ));
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{}</text>\n",
            LEFT - 8.0,
            py + 4.0,
            fmt_tick(yv)
        ));
    }

    // Axes.
    svg.push_str(&format!(
        "<line x1=\"{LEFT:.1}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"#333333\"/>\n",
        TOP + plot_h,
        LEFT + plot_w,
        TOP + plot_h
    ));
    svg.push_str(&format!(
        "<line x1=\"{LEFT:.1}\" y1=\"{TOP:.1}\" x2=\"{LEFT:.1}\" y2=\"{:.1}\" stroke=\"#333333\"/>\n",
        TOP + plot_h
    ));
    svg.push_str(&format!(
        "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>\n",
        LEFT + plot_w / 2.0,
        HEIGHT - 14.0,
        xml_escape(x_label)
    ));
    svg.push_str(&format!(
        "<text x=\"20\" y=\"{:.1}\" text-anchor=\"middle\" transform=\"rotate(-90 20 {:.1})\">{}</text>\n",
        TOP + plot_h / 2.0,
        TOP + plot_h / 2.0,
        xml_escape(y_label)
    ));

    // Curves.
    for (idx, s) in series.iter().enumerate() {
        let color = COLORS[idx % COLORS.len()];
        let points: Vec<String> = s
            .points
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", map_x(x), map_y(y)))
            .collect();
        if !points.is_empty() {
            svg.push_str(&format!(
                "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.8\" points=\"{}\"/>\n",
                points.join(" ")
            ));
        }
    }

    // Legend.
    for (idx, s) in series.iter().enumerate() {
        let color = COLORS[idx % COLORS.len()];
        let y = TOP + 14.0 + 20.0 * idx as f64;
        let x = LEFT + plot_w - 180.0;
        svg.push_str(&format!(
            "<line x1=\"{x:.1}\" y1=\"{y:.1}\" x2=\"{:.1}\" y2=\"{y:.1}\" stroke=\"{color}\" stroke-width=\"2\"/>\n",
            x + 26.0
        ));
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\">{}</text>\n",
            x + 32.0,
            y + 4.0,
            xml_escape(&s.label)
        ));
    }

    svg.push_str("</svg>\n");
    svg
}

/// Min/max of the finite values, padded by `pad` of the span on both sides.
/// Empty or degenerate inputs map to a unit-ish range so division is safe.
fn padded_range(values: impl Iterator<Item = f64>, pad: f64) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in values {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() || !hi.is_finite() {
        return (0.0, 1.0);
    }
    if lo == hi {
        let span = lo.abs().max(1.0);
        return (lo - 0.05 * span, hi + 0.05 * span);
    }
    let span = hi - lo;
    (lo - pad * span, hi + pad * span)
}

fn fmt_tick(v: f64) -> String {
    if v == 0.0 {
        "0".to_string()
    } else if v.abs() >= 0.001 && v.abs() < 100_000.0 {
        format!("{v:.4}")
    } else {
        format!("{v:.2e}")
    }
}

fn xml_escape(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for c in text.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            _ => out.push(c),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_one_polyline_per_series() {
        let svg = line_chart(
            "convergence",
            "cumulative step",
            "distance",
            &[
                Series {
                    label: "a".into(),
                    points: vec![(0.0, 1.0), (1.0, 0.5), (2.0, 0.25)],
                },
                Series {
                    label: "b".into(),
                    points: vec![(0.0, 0.9), (2.0, 0.1)],
                },
            ],
        );
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.starts_with("<svg "));
        assert!(svg.trim_end().ends_with("</svg>"));
        assert!(svg.contains("convergence"));
        assert!(svg.contains("cumulative step"));
    }

    #[test]
    fn escapes_markup_in_labels() {
        let svg = line_chart("a<b&c>\"d\"", "x", "y", &[]);
        assert!(svg.contains("a&lt;b&amp;c&gt;&quot;d&quot;"));
        assert!(!svg.contains("a<b"));
    }

    #[test]
    fn nonfinite_points_never_reach_the_output() {
        let svg = line_chart(
            "t",
            "x",
            "y",
            &[Series {
                label: "s".into(),
                points: vec![(0.0, f64::NAN), (1.0, 2.0), (f64::INFINITY, 3.0), (2.0, 2.5)],
            }],
        );
        assert!(!svg.contains("NaN"));
        assert!(!svg.contains("inf"));
        assert_eq!(svg.matches("<polyline").count(), 1);
    }

    #[test]
    fn degenerate_ranges_stay_well_defined() {
        let svg = line_chart(
            "t",
            "x",
            "y",
            &[Series {
                label: "point".into(),
                points: vec![(1.0, 1.0)],
            }],
        );
        assert!(!svg.contains("NaN"));
        let empty = line_chart("t", "x", "y", &[]);
        assert!(!empty.contains("NaN"));
    }

    #[test]
    fn tick_formatting_switches_to_scientific() {
        assert_eq!(fmt_tick(0.0), "0");
        assert_eq!(fmt_tick(0.25), "0.2500");
        assert_eq!(fmt_tick(1.0e-7), "1.00e-7");
        assert_eq!(fmt_tick(3.0e6), "3.00e6");
    }
}
