//! Tiny SVG chart writer: text-based output that diffs cleanly in tests.

const COLORS: &[&str] = &["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];
const W: f64 = 640.0;
const H: f64 = 400.0;
const MARGIN: f64 = 50.0;

fn header(title: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n\
         <rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-family=\"monospace\" font-size=\"15\">{}</text>\n",
        W / 2.0,
        xml_escape(title)
    )
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Multi-series line chart; each series is (label, points).
pub fn line_chart(title: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    let mut svg = header(title);
    let pts: Vec<(f64, f64)> = series.iter().flat_map(|(_, p)| p.iter().copied()).collect();
    if pts.is_empty() {
        svg.push_str("</svg>\n");
        return svg;
    }
    let (mut x0, mut x1) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in &pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if (x1 - x0).abs() < 1e-12 {
        x1 = x0 + 1.0;
    }
    if (y1 - y0).abs() < 1e-12 {
        y1 = y0 + 1.0;
    }
    let sx = |x: f64| MARGIN + (x - x0) / (x1 - x0) * (W - 2.0 * MARGIN);
    let sy = |y: f64| H - MARGIN - (y - y0) / (y1 - y0) * (H - 2.0 * MARGIN);
    svg.push_str(&format!(
        "<line x1=\"{m}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <line x1=\"{m}\" y1=\"{t}\" x2=\"{m}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <text x=\"{m}\" y=\"{lab}\" font-family=\"monospace\" font-size=\"11\">{y0:.3} .. {y1:.3}</text>\n",
        m = MARGIN,
        r = W - MARGIN,
        t = MARGIN,
        b = H - MARGIN,
        lab = MARGIN - 8.0,
    ));
    for (i, (label, points)) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let path: Vec<String> = points.iter().map(|&(x, y)| format!("{:.1},{:.1}", sx(x), sy(y))).collect();
        svg.push_str(&format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>\n",
            path.join(" ")
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-family=\"monospace\" font-size=\"12\" fill=\"{color}\">{}</text>\n",
            W - MARGIN - 150.0,
            MARGIN + 16.0 * (i as f64 + 1.0),
            xml_escape(label)
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

/// Grouped bar chart: one group per label, one bar per series.
pub fn bar_chart(title: &str, labels: &[String], series: &[(String, Vec<f64>)]) -> String {
    let mut svg = header(title);
    if labels.is_empty() || series.is_empty() {
        svg.push_str("</svg>\n");
        return svg;
    }
    let max = series
        .iter()
        .flat_map(|(_, v)| v.iter().copied())
        .fold(0.0f64, f64::max)
        .max(1e-9);
    let group_w = (W - 2.0 * MARGIN) / labels.len() as f64;
    let bar_w = (group_w * 0.8) / series.len() as f64;
    for (g, label) in labels.iter().enumerate() {
        let gx = MARGIN + g as f64 * group_w;
        for (s, (_, values)) in series.iter().enumerate() {
            let v = values.get(g).copied().unwrap_or(0.0);
            let h = v / max * (H - 2.0 * MARGIN);
            let x = gx + group_w * 0.1 + s as f64 * bar_w;
            svg.push_str(&format!(
                "<rect x=\"{x:.1}\" y=\"{:.1}\" width=\"{bar_w:.1}\" height=\"{h:.1}\" fill=\"{}\"/>\n",
                H - MARGIN - h,
                COLORS[s % COLORS.len()]
            ));
        }
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{}\" text-anchor=\"middle\" font-family=\"monospace\" font-size=\"11\">{}</text>\n",
            gx + group_w / 2.0,
            H - MARGIN + 16.0,
            xml_escape(label)
        ));
    }
    for (s, (name, _)) in series.iter().enumerate() {
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-family=\"monospace\" font-size=\"12\" fill=\"{}\">{}</text>\n",
            W - MARGIN - 150.0,
            MARGIN + 16.0 * (s as f64 + 1.0),
            COLORS[s % COLORS.len()],
            xml_escape(name)
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn charts_are_valid_svg_and_deterministic() {
        let series = vec![("loss".to_string(), vec![(0.0, 2.0), (1.0, 1.0), (2.0, 0.5)])];
        let a = line_chart("training", &series);
        let b = line_chart("training", &series);
        assert_eq!(a, b);
        assert!(a.starts_with("<svg"));
        assert!(a.ends_with("</svg>\n"));
        assert!(a.contains("polyline"));

        let bars = bar_chart(
            "ap",
            &["AP".into(), "AR".into()],
            &[("baseline".into(), vec![0.4, 0.5]), ("memory".into(), vec![0.6, 0.7])],
        );
        assert!(bars.matches("<rect").count() >= 4);
    }
}
