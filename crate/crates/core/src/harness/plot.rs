//! Minimal SVG line charts: series with optional standard-error bands, a
//! dashed horizontal baseline, axes with ticks, and a legend. No drawing
//! dependencies; the output is plain XML text.

/// One plotted line.
#[derive(Debug, Clone)]
pub struct Series {
    pub label: String,
    /// CSS color; defaults from a fixed palette when absent.
    pub color: Option<String>,
    /// (x, y) in data coordinates.
    pub points: Vec<(f64, f64)>,
    /// Optional shaded (x, lo, hi) band around the line.
    pub band: Option<Vec<(f64, f64, f64)>>,
    pub dashed: bool,
}

impl Series {
    pub fn new(label: impl Into<String>, points: Vec<(f64, f64)>) -> Self {
        Self {
            label: label.into(),
            color: None,
            points,
            band: None,
            dashed: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ChartSpec {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
    /// Dashed horizontal reference line with a legend label.
    pub hline: Option<(f64, String)>,
}

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 480.0;
const MARGIN_LEFT: f64 = 72.0;
const MARGIN_RIGHT: f64 = 18.0;
const MARGIN_TOP: f64 = 42.0;
const MARGIN_BOTTOM: f64 = 54.0;
const FALLBACK_PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
];

fn xml_escape(text: &str) -> String {
    text.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn fmt(value: f64) -> String {
    if value.abs() >= 1000.0 || (value != 0.0 && value.abs() < 0.01) {
        format!("{value:.2e}")
    } else if (value - value.round()).abs() < 1e-9 {
        format!("{:.0}", value.round())
    } else {
        format!("{value:.2}")
    }
}

struct Mapper {
    x_min: f64,
    x_max: f64,
    y_min: f64,
    y_max: f64,
}

impl Mapper {
    fn x(&self, x: f64) -> f64 {
        let span = (self.x_max - self.x_min).max(1e-12);
        MARGIN_LEFT + (x - self.x_min) / span * (WIDTH - MARGIN_LEFT - MARGIN_RIGHT)
    }

    fn y(&self, y: f64) -> f64 {
        let span = (self.y_max - self.y_min).max(1e-12);
        HEIGHT - MARGIN_BOTTOM - (y - self.y_min) / span * (HEIGHT - MARGIN_TOP - MARGIN_BOTTOM)
    }
}

/// Renders the chart as a standalone SVG document.
pub fn render_line_chart(spec: &ChartSpec) -> String {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for series in &spec.series {
        for &(x, y) in &series.points {
            xs.push(x);
            ys.push(y);
        }
        if let Some(band) = &series.band {
            for &(x, lo, hi) in band {
                xs.push(x);
                ys.push(lo);
                ys.push(hi);
            }
        }
    }
    if let Some((y, _)) = &spec.hline {
        ys.push(*y);
    }
    if xs.is_empty() {
        xs.push(0.0);
        ys.push(0.0);
    }
    let (x_min, x_max) = bounds(&xs, 0.02);
    let (y_min, y_max) = bounds(&ys, 0.08);
    let map = Mapper {
        x_min,
        x_max,
        y_min,
        y_max,
    };

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" \
         viewBox=\"0 0 {WIDTH} {HEIGHT}\">\n"
    ));
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"24\" font-family=\"sans-serif\" font-size=\"15\" \
         text-anchor=\"middle\">{}</text>\n",
        WIDTH / 2.0,
        xml_escape(&spec.title)
    ));

    // Axes, ticks, grid.
    let plot_bottom = HEIGHT - MARGIN_BOTTOM;
    for i in 0..=4 {
        let frac = i as f64 / 4.0;
        let xv = x_min + frac * (x_max - x_min);
        let yv = y_min + frac * (y_max - y_min);
        let xp = map.x(xv);
        let yp = map.y(yv);
        svg.push_str(&format!(
            "<line x1=\"{xp}\" y1=\"{MARGIN_TOP}\" x2=\"{xp}\" y2=\"{plot_bottom}\" \
             stroke=\"#eeeeee\"/>\n"
        ));
        svg.push_str(&format!(
            "<line x1=\"{MARGIN_LEFT}\" y1=\"{yp}\" x2=\"{}\" y2=\"{yp}\" stroke=\"#eeeeee\"/>\n",
            WIDTH - MARGIN_RIGHT
        ));
        svg.push_str(&format!(
            "<text x=\"{xp}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" \
             text-anchor=\"middle\">{}</text>\n",
            plot_bottom + 16.0,
            fmt(xv)
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" \
             text-anchor=\"end\">{}</text>\n",
            MARGIN_LEFT - 6.0,
            yp + 4.0,
            fmt(yv)
        ));
    }
    svg.push_str(&format!(
        "<line x1=\"{MARGIN_LEFT}\" y1=\"{plot_bottom}\" x2=\"{}\" y2=\"{plot_bottom}\" \
         stroke=\"black\"/>\n",
        WIDTH - MARGIN_RIGHT
    ));
    svg.push_str(&format!(
        "<line x1=\"{MARGIN_LEFT}\" y1=\"{MARGIN_TOP}\" x2=\"{MARGIN_LEFT}\" \
         y2=\"{plot_bottom}\" stroke=\"black\"/>\n"
    ));
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\" \
         text-anchor=\"middle\">{}</text>\n",
        (MARGIN_LEFT + WIDTH - MARGIN_RIGHT) / 2.0,
        HEIGHT - 14.0,
        xml_escape(&spec.x_label)
    ));
    svg.push_str(&format!(
        "<text x=\"18\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\" \
         text-anchor=\"middle\" transform=\"rotate(-90 18 {})\">{}</text>\n",
        (MARGIN_TOP + plot_bottom) / 2.0,
        (MARGIN_TOP + plot_bottom) / 2.0,
        xml_escape(&spec.y_label)
    ));

    // Bands under the lines.
    for (i, series) in spec.series.iter().enumerate() {
        let color = series
            .color
            .clone()
            .unwrap_or_else(|| FALLBACK_PALETTE[i % FALLBACK_PALETTE.len()].to_string());
        if let Some(band) = &series.band {
            if band.len() >= 2 {
                let mut polygon = String::new();
                for &(x, _, hi) in band {
                    polygon.push_str(&format!("{},{} ", map.x(x), map.y(hi)));
                }
                for &(x, lo, _) in band.iter().rev() {
                    polygon.push_str(&format!("{},{} ", map.x(x), map.y(lo)));
                }
                svg.push_str(&format!(
                    "<polygon points=\"{}\" fill=\"{color}\" fill-opacity=\"0.15\" \
                     stroke=\"none\"/>\n",
                    polygon.trim_end()
                ));
            }
        }
    }

    if let Some((y, _)) = &spec.hline {
        let yp = map.y(*y);
        svg.push_str(&format!(
            "<line x1=\"{MARGIN_LEFT}\" y1=\"{yp}\" x2=\"{}\" y2=\"{yp}\" stroke=\"#555555\" \
             stroke-dasharray=\"8,5\"/>\n",
            WIDTH - MARGIN_RIGHT
        ));
    }

    for (i, series) in spec.series.iter().enumerate() {
        let color = series
            .color
            .clone()
            .unwrap_or_else(|| FALLBACK_PALETTE[i % FALLBACK_PALETTE.len()].to_string());
        let dash = if series.dashed {
            " stroke-dasharray=\"5,4\""
        } else {
            ""
        };
        let points: String = series
            .points
            .iter()
            .map(|&(x, y)| format!("{},{}", map.x(x), map.y(y)))
            .collect::<Vec<_>>()
            .join(" ");
        svg.push_str(&format!(
            "<polyline points=\"{points}\" fill=\"none\" stroke=\"{color}\" \
             stroke-width=\"1.8\"{dash}/>\n"
        ));
        for &(x, y) in &series.points {
            svg.push_str(&format!(
                "<circle cx=\"{}\" cy=\"{}\" r=\"2.4\" fill=\"{color}\"/>\n",
                map.x(x),
                map.y(y)
            ));
        }
    }

    // Legend, top-right inside the plot area.
    let mut legend_entries: Vec<(String, String, bool)> = spec
        .series
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let color = s
                .color
                .clone()
                .unwrap_or_else(|| FALLBACK_PALETTE[i % FALLBACK_PALETTE.len()].to_string());
            (s.label.clone(), color, s.dashed)
        })
        .collect();
    if let Some((_, label)) = &spec.hline {
        legend_entries.push((label.clone(), "#555555".to_string(), true));
    }
    let legend_x = WIDTH - MARGIN_RIGHT - 210.0;
    for (i, (label, color, dashed)) in legend_entries.iter().enumerate() {
        let y = MARGIN_TOP + 14.0 + i as f64 * 16.0;
        let dash = if *dashed {
            " stroke-dasharray=\"5,4\""
        } else {
            ""
        };
        svg.push_str(&format!(
            "<line x1=\"{legend_x}\" y1=\"{y}\" x2=\"{}\" y2=\"{y}\" stroke=\"{color}\" \
             stroke-width=\"2\"{dash}/>\n",
            legend_x + 26.0
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\">{}</text>\n",
            legend_x + 32.0,
            y + 4.0,
            xml_escape(label)
        ));
    }

    svg.push_str("</svg>\n");
    svg
}

fn bounds(values: &[f64], pad: f64) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in values {
        if v.is_finite() {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if lo == hi {
        return (lo - 1.0, hi + 1.0);
    }
    let span = hi - lo;
    (lo - pad * span, hi + pad * span)
}

#[cfg(test)]
mod tests {
    use super::super::tests_support::well_formed_xml;
    use super::*;

    fn sample_spec() -> ChartSpec {
        ChartSpec {
            title: "title with <angle> & \"quotes\"".to_string(),
            x_label: "iteration".to_string(),
            y_label: "value".to_string(),
            series: vec![
                Series {
                    band: Some(vec![(1.0, -1.2, -0.8), (2.0, -0.6, -0.2), (3.0, -0.3, 0.1)]),
                    ..Series::new("alpha", vec![(1.0, -1.0), (2.0, -0.4), (3.0, -0.1)])
                },
                Series {
                    dashed: true,
                    ..Series::new("beta", vec![(1.0, -2.0), (2.0, -1.8), (3.0, -1.5)])
                },
            ],
            hline: Some((-1.0, "baseline".to_string())),
        }
    }

    #[test]
    fn chart_is_well_formed_xml_with_all_series() {
        let svg = render_line_chart(&sample_spec());
        assert!(well_formed_xml(&svg), "svg not well-formed:\n{svg}");
        assert!(svg.contains("alpha"));
        assert!(svg.contains("beta"));
        assert!(svg.contains("baseline"));
        assert!(svg.contains("polygon"));
        assert!(svg.contains("&lt;angle&gt;"));
    }

    #[test]
    fn empty_chart_still_renders() {
        let spec = ChartSpec {
            title: "empty".to_string(),
            x_label: "x".to_string(),
            y_label: "y".to_string(),
            series: vec![],
            hline: None,
        };
        let svg = render_line_chart(&spec);
        assert!(well_formed_xml(&svg));
    }

    #[test]
    fn degenerate_ranges_do_not_divide_by_zero() {
        let spec = ChartSpec {
            title: "flat".to_string(),
            x_label: "x".to_string(),
            y_label: "y".to_string(),
            series: vec![Series::new("flat", vec![(1.0, 5.0), (2.0, 5.0)])],
            hline: None,
        };
        let svg = render_line_chart(&spec);
        assert!(well_formed_xml(&svg));
        assert!(!svg.contains("NaN"));
    }
}
