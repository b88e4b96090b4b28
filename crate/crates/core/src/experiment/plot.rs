use std::fmt::Write;

use crate::conditional::Conditional;
use crate::error::{Error, Result};
use crate::metrics::Sampler;
use crate::rng::{derive_index, normal_tensor, rng};
use crate::toy::SyntheticTask;

const PANEL: f64 = 320.0;
const MARGIN: f64 = 24.0;
const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
    "#bcbd22", "#17becf",
];

fn bounds(task: &SyntheticTask) -> Result<(f64, f64, f64, f64)> {
    let mut b = (
        f64::INFINITY,
        f64::NEG_INFINITY,
        f64::INFINITY,
        f64::NEG_INFINITY,
    );
    for c in task.conditionals() {
        let m = task.mean(&c)?;
        b = (b.0.min(m[0]), b.1.max(m[0]), b.2.min(m[1]), b.3.max(m[1]));
    }
    let pad = 0.5;
    Ok((b.0 - pad, b.1 + pad, b.2 - pad, b.3 + pad))
}

/// Side-by-side scatter plots of `n` samples per conditional from each
/// model, with the analytic means marked by crosses.
pub fn plot_panels(
    panels: &[(&str, &dyn Sampler)],
    task: &SyntheticTask,
    conds: &[Conditional],
    n: usize,
    seed: u64,
) -> Result<String> {
    if task.output_dim() != 2 {
        return Err(Error::InvalidArgument(format!(
            "scatter plots need 2-D samples, the task has {}; project the samples first",
            task.output_dim()
        )));
    }
    let (x0, x1, y0, y1) = bounds(task)?;
    let inner = PANEL - 2.0 * MARGIN;
    let sx = |x: f64| MARGIN + (x - x0) / (x1 - x0) * inner;
    let sy = |y: f64| PANEL - MARGIN - (y - y0) / (y1 - y0) * inner;
    let width = PANEL * panels.len().max(1) as f64;
    let mut s = String::new();
    let w = &mut s;
    let _ = writeln!(
        w,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{PANEL}" viewBox="0 0 {width} {PANEL}">"#
    );
    for (p, (title, model)) in panels.iter().enumerate() {
        let dx = PANEL * p as f64;
        let _ = writeln!(w, r#"<g transform="translate({dx} 0)">"#);
        let _ = writeln!(
            w,
            r#"<rect x="{MARGIN}" y="{MARGIN}" width="{inner}" height="{inner}" fill="none" stroke="black"/>"#
        );
        let _ = writeln!(
            w,
            r#"<text x="{}" y="{}" text-anchor="middle" font-size="12">{}</text>"#,
            PANEL / 2.0,
            MARGIN - 8.0,
            escape(title)
        );
        for (k, c) in conds.iter().enumerate() {
            let color = PALETTE[k % PALETTE.len()];
            let mut r = rng(derive_index(seed, k as u64));
            let z = normal_tensor(&mut r, &[n, model.latent_dim()], 1.0);
            let x = model.generate(&vec![c.clone(); n], &z)?;
            let _ = writeln!(
                w,
                r#"<g class="samples" data-conditional="{}" fill="{color}">"#,
                escape(&task.describe(c))
            );
            for i in 0..n {
                let (px, py) = (sx(x.get(i, 0)), sy(x.get(i, 1)));
                if px.is_finite() && py.is_finite() {
                    let _ = writeln!(w, r#"<circle cx="{px:.2}" cy="{py:.2}" r="1.5"/>"#);
                }
            }
            let _ = writeln!(w, "</g>");
            let m = task.mean(c)?;
            let (mx, my) = (sx(m[0]), sy(m[1]));
            let _ = writeln!(
                w,
                r#"<path class="mean" d="M{:.2} {:.2}L{:.2} {:.2}M{:.2} {:.2}L{:.2} {:.2}" stroke="{color}" stroke-width="2"/>"#,
                mx - 5.0,
                my - 5.0,
                mx + 5.0,
                my + 5.0,
                mx - 5.0,
                my + 5.0,
                mx + 5.0,
                my - 5.0
            );
        }
        let _ = writeln!(w, "</g>");
    }
    let _ = writeln!(w, "</svg>");
    Ok(s)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::tests::DataSampler;

    #[test]
    fn empty_conditional_list_gives_axes_only() {
        let task = SyntheticTask::kgon(4).unwrap();
        let d = DataSampler(task.clone());
        let svg = plot_panels(&[("data", &d)], &task, &[], 10, 0).unwrap();
        let doc = roxmltree::Document::parse(&svg).unwrap();
        assert_eq!(
            doc.descendants()
                .filter(|n| n.has_tag_name("circle"))
                .count(),
            0
        );
        assert_eq!(
            doc.descendants().filter(|n| n.has_tag_name("rect")).count(),
            1
        );
    }

    #[test]
    fn panels_and_points_are_counted() {
        let task = SyntheticTask::kgon(4).unwrap();
        let d = DataSampler(task.clone());
        let conds = task.conditionals();
        let svg = plot_panels(
            &[("teacher", &d), ("redacted <G'>", &d)],
            &task,
            &conds,
            7,
            1,
        )
        .unwrap();
        let doc = roxmltree::Document::parse(&svg).unwrap();
        assert_eq!(
            doc.descendants().filter(|n| n.has_tag_name("rect")).count(),
            2
        );
        assert_eq!(
            doc.descendants()
                .filter(|n| n.has_tag_name("circle"))
                .count(),
            2 * 4 * 7
        );
        assert_eq!(
            doc.descendants()
                .filter(|n| n.attribute("class") == Some("mean"))
                .count(),
            8
        );
        assert_eq!(
            svg,
            plot_panels(
                &[("teacher", &d), ("redacted <G'>", &d)],
                &task,
                &conds,
                7,
                1
            )
            .unwrap()
        );
    }

    #[test]
    fn rejects_non_planar_tasks() {
        let task = SyntheticTask::token_attr(4).unwrap();
        let d = DataSampler(task.clone());
        assert!(plot_panels(&[("d", &d)], &task, &[], 1, 0).is_err());
    }
}
