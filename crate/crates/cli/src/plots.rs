//! Hand-rolled SVG charts: a polyline line chart and a grouped bar chart are
//! all the report needs, so there is no plotting dependency.

const W: f64 = 640.0;
const H: f64 = 400.0;
const ML: f64 = 60.0; // left margin (y labels)
const MR: f64 = 20.0;
const MT: f64 = 40.0; // top margin (title)
const MB: f64 = 50.0;

const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
];

fn header(title: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" \
         viewBox=\"0 0 {W} {H}\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">{}</text>\n",
        W / 2.0,
        xml_escape(title)
    )
}

fn axes(x_label: &str, y_label: &str) -> String {
    let base = H - MB;
    let right = W - MR;
    let x_mid = (ML + right) / 2.0;
    let y_mid = (MT + base) / 2.0;
    format!(
        "<line x1=\"{ML}\" y1=\"{MT}\" x2=\"{ML}\" y2=\"{base}\" stroke=\"black\"/>\n\
         <line x1=\"{ML}\" y1=\"{base}\" x2=\"{right}\" y2=\"{base}\" stroke=\"black\"/>\n\
         <text x=\"{x_mid}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n\
         <text x=\"16\" y=\"{y_mid}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {y_mid})\">{}</text>\n",
        H - 14.0,
        xml_escape(x_label),
        xml_escape(y_label),
    )
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn nice_range(lo: f64, hi: f64) -> (f64, f64) {
    if (hi - lo).abs() < 1e-12 {
        (lo - 1.0, hi + 1.0)
    } else {
        let pad = (hi - lo) * 0.05;
        (lo - pad, hi + pad)
    }
}

/// Line chart over (x, y) points; one polyline per named series.
pub fn line_chart(
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[(String, Vec<(f64, f64)>)],
) -> String {
    let points: Vec<(f64, f64)> = series.iter().flat_map(|(_, p)| p.iter().copied()).collect();
    let (x_lo, x_hi) = nice_range(
        points.iter().map(|p| p.0).fold(f64::INFINITY, f64::min),
        points.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max),
    );
    let (y_lo, y_hi) = nice_range(
        points.iter().map(|p| p.1).fold(f64::INFINITY, f64::min),
        points.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max),
    );
    let sx = |x: f64| ML + (x - x_lo) / (x_hi - x_lo) * (W - ML - MR);
    let sy = |y: f64| H - MB - (y - y_lo) / (y_hi - y_lo) * (H - MT - MB);

    let mut svg = header(title) + &axes(x_label, y_label);
    // Min/max tick labels keep the chart readable without a full tick engine.
    svg += &format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{y_hi:.2}</text>\n\
         <text x=\"{0}\" y=\"{}\" text-anchor=\"end\">{y_lo:.2}</text>\n\
         <text x=\"{ML}\" y=\"{}\" text-anchor=\"middle\">{x_lo:.0}</text>\n\
         <text x=\"{}\" y=\"{3}\" text-anchor=\"middle\">{x_hi:.0}</text>\n",
        ML - 6.0,
        MT + 4.0,
        H - MB + 4.0,
        H - MB + 16.0,
        W - MR,
    );
    for (i, (name, pts)) in series.iter().enumerate() {
        if pts.is_empty() {
            continue;
        }
        let color = PALETTE[i % PALETTE.len()];
        let path: Vec<String> = pts
            .iter()
            .map(|(x, y)| format!("{:.2},{:.2}", sx(*x), sy(*y)))
            .collect();
        svg += &format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>\n",
            path.join(" ")
        );
        svg += &format!(
            "<text x=\"{}\" y=\"{}\" fill=\"{color}\">{}</text>\n",
            ML + 8.0,
            MT + 14.0 * (i as f64 + 1.0),
            xml_escape(name)
        );
    }
    svg + "</svg>\n"
}

/// Grouped bar chart: one cluster per label, one colored bar per series.
pub fn bar_chart(
    title: &str,
    y_label: &str,
    labels: &[String],
    series: &[(String, Vec<f64>)],
) -> String {
    let hi = series
        .iter()
        .flat_map(|(_, v)| v.iter().copied())
        .fold(0.0_f64, f64::max);
    let (y_lo, y_hi) = (0.0, if hi <= 0.0 { 1.0 } else { hi * 1.1 });
    let sy = |y: f64| H - MB - (y - y_lo) / (y_hi - y_lo) * (H - MT - MB);

    let n_groups = labels.len().max(1) as f64;
    let n_bars = series.len().max(1) as f64;
    let group_w = (W - ML - MR) / n_groups;
    let bar_w = (group_w * 0.8) / n_bars;

    let mut svg = header(title) + &axes("", y_label);
    svg += &format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{y_hi:.2}</text>\n",
        ML - 6.0,
        MT + 4.0
    );
    for (g, label) in labels.iter().enumerate() {
        let x0 = ML + g as f64 * group_w + group_w * 0.1;
        for (i, (_, values)) in series.iter().enumerate() {
            let v = values.get(g).copied().unwrap_or(0.0);
            let y = sy(v);
            svg += &format!(
                "<rect x=\"{:.2}\" y=\"{y:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"{}\"/>\n",
                x0 + i as f64 * bar_w,
                bar_w * 0.9,
                (H - MB) - y,
                PALETTE[i % PALETTE.len()]
            );
        }
        svg += &format!(
            "<text x=\"{:.2}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n",
            ML + (g as f64 + 0.5) * group_w,
            H - MB + 16.0,
            xml_escape(label)
        );
    }
    for (i, (name, _)) in series.iter().enumerate() {
        svg += &format!(
            "<text x=\"{}\" y=\"{}\" fill=\"{}\">{}</text>\n",
            W - MR - 140.0,
            MT + 14.0 * (i as f64 + 1.0),
            PALETTE[i % PALETTE.len()],
            xml_escape(name)
        );
    }
    svg + "</svg>\n"
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn line_chart_contains_polyline_per_series() {
        let svg = line_chart(
            "t",
            "x",
            "y",
            &[
                ("a".into(), vec![(0.0, 1.0), (1.0, 2.0)]),
                ("b".into(), vec![(0.0, 3.0), (1.0, 0.5)]),
            ],
        );
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.starts_with("<svg"));
        assert!(svg.trim_end().ends_with("</svg>"));
    }

    #[test]
    fn bar_chart_emits_one_rect_per_bar() {
        let svg = bar_chart(
            "t",
            "y",
            &["l1".into(), "l2".into()],
            &[("m1".into(), vec![1.0, 2.0]), ("m2".into(), vec![3.0, 4.0])],
        );
        // One background rect plus 4 bars.
        assert_eq!(svg.matches("<rect").count(), 5);
    }

    #[test]
    fn titles_are_escaped() {
        let svg = line_chart("a<b&c", "x", "y", &[("s".into(), vec![(0.0, 0.0)])]);
        assert!(svg.contains("a&lt;b&amp;c"));
    }
}
