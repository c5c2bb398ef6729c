//! Self-contained SVG scatter plots of 2-D latent encodings with the
//! configured cluster circles overlaid.
//!
//! The affine mapping from latent coordinates to SVG coordinates is
//! recorded as data attributes on the root element so emitted plots can be
//! parsed back and inverted exactly.

use lscfg::geometry::ClusterConfig;

/// One plotted encoding.
#[derive(Debug, Clone)]
pub struct PlotPoint {
    pub x: f64,
    pub y: f64,
    /// Class index for coloring; unlabeled points draw gray.
    pub class: Option<usize>,
    /// Generalization points draw larger.
    pub large: bool,
}

const PALETTE: [&str; 8] =
    ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#17becf"];
const SIZE: f64 = 640.0;
const PAD: f64 = 48.0;

fn color(class: Option<usize>) -> &'static str {
    match class {
        Some(c) => PALETTE[c % PALETTE.len()],
        None => "#888888",
    }
}

/// Render points and cluster circles; works for any point count including
/// zero (the cluster layout alone is a valid plot).
pub fn render_scatter(points: &[PlotPoint], clusters: &ClusterConfig, title: &str) -> String {
    // Data range covers every point and every cluster circle.
    let mut xmin = f64::INFINITY;
    let mut xmax = f64::NEG_INFINITY;
    let mut ymin = f64::INFINITY;
    let mut ymax = f64::NEG_INFINITY;
    let mut cover = |x: f64, y: f64| {
        xmin = xmin.min(x);
        xmax = xmax.max(x);
        ymin = ymin.min(y);
        ymax = ymax.max(y);
    };
    for i in 0..clusters.n_classes() {
        let c = clusters.center(i);
        let r = clusters.radius(i);
        cover(c[0] - r, c[1] - r);
        cover(c[0] + r, c[1] + r);
    }
    for p in points {
        cover(p.x, p.y);
    }
    let span = (xmax - xmin).max(ymax - ymin).max(1e-9);
    let scale = (SIZE - 2.0 * PAD) / span;

    let sx = |x: f64| PAD + (x - xmin) * scale;
    let sy = |y: f64| SIZE - PAD - (y - ymin) * scale;

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{SIZE}\" height=\"{SIZE}\" \
         viewBox=\"0 0 {SIZE} {SIZE}\" data-xmin=\"{xmin}\" data-ymin=\"{ymin}\" \
         data-scale=\"{scale}\" data-pad=\"{PAD}\" data-size=\"{SIZE}\">\n"
    ));
    svg.push_str(&format!(
        "  <rect width=\"{SIZE}\" height=\"{SIZE}\" fill=\"#ffffff\"/>\n  <text x=\"{}\" y=\"24\" \
         text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"15\">{}</text>\n",
        SIZE / 2.0,
        xml_escape(title)
    ));

    // Axes with end labels in latent units.
    svg.push_str(&format!(
        "  <line x1=\"{PAD}\" y1=\"{0}\" x2=\"{1}\" y2=\"{0}\" stroke=\"#333\" stroke-width=\"1\"/>\n",
        SIZE - PAD,
        SIZE - PAD
    ));
    svg.push_str(&format!(
        "  <line x1=\"{PAD}\" y1=\"{PAD}\" x2=\"{PAD}\" y2=\"{}\" stroke=\"#333\" stroke-width=\"1\"/>\n",
        SIZE - PAD
    ));
    let x_right = xmin + (SIZE - 2.0 * PAD) / scale;
    let y_top = ymin + (SIZE - 2.0 * PAD) / scale;
    svg.push_str(&format!(
        "  <text x=\"{PAD}\" y=\"{0}\" font-family=\"sans-serif\" font-size=\"11\">{xmin:.2}</text>\n\
         \x20 <text x=\"{1}\" y=\"{0}\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">{x_right:.2}</text>\n\
         \x20 <text x=\"{2}\" y=\"{3}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"end\">{ymin:.2}</text>\n\
         \x20 <text x=\"{2}\" y=\"{4}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"end\">{y_top:.2}</text>\n\
         \x20 <text x=\"{5}\" y=\"{6}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">z[0]</text>\n\
         \x20 <text x=\"14\" y=\"{7}\" font-family=\"sans-serif\" font-size=\"12\" transform=\"rotate(-90 14 {7})\">z[1]</text>\n",
        SIZE - PAD + 16.0,
        SIZE - PAD,
        PAD - 6.0,
        SIZE - PAD,
        PAD + 4.0,
        SIZE / 2.0,
        SIZE - 12.0,
        SIZE / 2.0,
    ));

    // Cluster circles and centers.
    for i in 0..clusters.n_classes() {
        let c = clusters.center(i);
        let r = clusters.radius(i);
        svg.push_str(&format!(
            "  <circle class=\"cluster\" cx=\"{}\" cy=\"{}\" r=\"{}\" fill=\"none\" \
             stroke=\"{}\" stroke-width=\"1.5\" stroke-dasharray=\"5 3\"/>\n",
            sx(c[0]),
            sy(c[1]),
            r * scale,
            color(Some(i)),
        ));
        svg.push_str(&format!(
            "  <circle class=\"center\" cx=\"{}\" cy=\"{}\" r=\"2.5\" fill=\"#000000\"/>\n",
            sx(c[0]),
            sy(c[1]),
        ));
    }

    for p in points {
        let (r, class_name) = if p.large { (5.0, "gen") } else { (1.8, "point") };
        svg.push_str(&format!(
            "  <circle class=\"{class_name}\" cx=\"{}\" cy=\"{}\" r=\"{r}\" fill=\"{}\" \
             fill-opacity=\"0.65\"/>\n",
            sx(p.x),
            sy(p.y),
            color(p.class),
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Parse the plot back: the root transform attributes plus every circle of
/// the given class, returning latent coordinates.
#[cfg(test)]
pub fn parse_points(svg: &str, class_name: &str) -> Vec<(f64, f64)> {
    let attr = |hay: &str, name: &str| -> Option<f64> {
        let key = format!("{name}=\"");
        let start = hay.find(&key)? + key.len();
        let end = hay[start..].find('"')? + start;
        hay[start..end].parse().ok()
    };
    let xmin = attr(svg, "data-xmin").expect("plot records its transform");
    let ymin = attr(svg, "data-ymin").expect("plot records its transform");
    let scale = attr(svg, "data-scale").expect("plot records its transform");
    let pad = attr(svg, "data-pad").expect("plot records its transform");
    let size = attr(svg, "data-size").expect("plot records its transform");

    let marker = format!("class=\"{class_name}\"");
    svg.lines()
        .filter(|l| l.contains("<circle") && l.contains(&marker))
        .map(|l| {
            let cx = attr(l, "cx").expect("circle has cx");
            let cy = attr(l, "cy").expect("circle has cy");
            ((cx - pad) / scale + xmin, (size - pad - cy) / scale + ymin)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use lscfg::geometry::texture_cluster_config;

    #[test]
    fn empty_plot_still_draws_clusters() {
        let clusters = texture_cluster_config();
        let svg = render_scatter(&[], &clusters, "layout");
        assert_eq!(svg.matches("class=\"cluster\"").count(), 5);
        assert_eq!(svg.matches("class=\"center\"").count(), 5);
        assert!(svg.contains("z[0]") && svg.contains("z[1]"));
    }

    #[test]
    fn points_invert_back_to_latent_coordinates() {
        let clusters = texture_cluster_config();
        let points = vec![
            PlotPoint { x: 0.85, y: 0.0, class: Some(0), large: false },
            PlotPoint { x: -0.31, y: 0.72, class: Some(2), large: false },
            PlotPoint { x: 1.9, y: -1.4, class: None, large: true },
        ];
        let svg = render_scatter(&points, &clusters, "test");
        let small = parse_points(&svg, "point");
        assert_eq!(small.len(), 2);
        assert!((small[0].0 - 0.85).abs() < 1e-6 && small[0].1.abs() < 1e-6);
        assert!((small[1].0 + 0.31).abs() < 1e-6 && (small[1].1 - 0.72).abs() < 1e-6);
        let large = parse_points(&svg, "gen");
        assert_eq!(large.len(), 1);
        assert!((large[0].0 - 1.9).abs() < 1e-6 && (large[0].1 + 1.4).abs() < 1e-6);
    }
}
