//! Batch SVG overlay renderer: one image per scene, boxes colored by
//! Gaussian-entropy band, with 95% confidence ellipses for the top-left and
//! bottom-right corners drawn from the 2x2 corner marginals.

use std::fmt::Write as _;

use nalgebra::Matrix4;

use crate::error::{Error, Result};
use crate::fusion::FinalDetection;

/// chi-square 0.95 quantile with 2 degrees of freedom: -2 ln(0.05).
fn chi2_2dof_95() -> f64 {
    -2.0 * 0.05f64.ln()
}

const BAND_COLORS: [&str; 3] = ["#008080", "#ff8c00", "#d62728"]; // teal, orange, red

#[derive(Debug, Clone, Copy)]
pub struct RenderOptions {
    pub width: u32,
    pub height: u32,
    /// Gaussian-entropy boundary between the low and middle band.
    pub low_threshold: f64,
    /// Gaussian-entropy boundary between the middle and high band.
    pub high_threshold: f64,
}

impl RenderOptions {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid("render size must be positive"));
        }
        if !(self.low_threshold < self.high_threshold) {
            return Err(Error::invalid(
                "entropy thresholds must satisfy low < high",
            ));
        }
        Ok(())
    }
}

fn band_color(entropy: f64, opts: &RenderOptions) -> &'static str {
    if entropy <= opts.low_threshold {
        BAND_COLORS[0]
    } else if entropy <= opts.high_threshold {
        BAND_COLORS[1]
    } else {
        BAND_COLORS[2]
    }
}

/// 95% ellipse of a 2x2 covariance: semi-axes and rotation in degrees.
fn ellipse_params(a: f64, b: f64, c: f64) -> (f64, f64, f64) {
    // eigenvalues of [[a, b], [b, c]]
    let half_trace = 0.5 * (a + c);
    let disc = (0.25 * (a - c) * (a - c) + b * b).sqrt();
    let l1 = (half_trace + disc).max(0.0);
    let l2 = (half_trace - disc).max(0.0);
    let angle = 0.5 * (2.0 * b).atan2(a - c);
    let scale = chi2_2dof_95().sqrt();
    (scale * l1.sqrt(), scale * l2.sqrt(), angle.to_degrees())
}

fn corner_ellipse(out: &mut String, cx: f64, cy: f64, cov: &Matrix4<f64>, offset: usize, color: &str) {
    let (rx, ry, angle) = ellipse_params(
        cov[(offset, offset)],
        cov[(offset, offset + 1)],
        cov[(offset + 1, offset + 1)],
    );
    let _ = writeln!(
        out,
        r#"  <ellipse cx="{cx:.4}" cy="{cy:.4}" rx="{rx:.4}" ry="{ry:.4}" transform="rotate({angle:.4} {cx:.4} {cy:.4})" fill="{color}" fill-opacity="0.15" stroke="{color}" stroke-width="1"/>"#
    );
}

/// Renders one scene's detections to an SVG document. Output is a pure
/// function of the inputs (fixed float formatting), so repeated runs are
/// byte-identical.
pub fn render_scene_svg(detections: &[FinalDetection], opts: &RenderOptions) -> Result<String> {
    opts.validate()?;
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#,
        w = opts.width,
        h = opts.height
    );
    let _ = writeln!(
        out,
        r#"  <rect width="{w}" height="{h}" fill="white"/>"#,
        w = opts.width,
        h = opts.height
    );
    for det in detections {
        let color = band_color(det.gaussian_entropy, opts);
        let m = det.bbox.mean();
        let (x, y) = (m[0], m[1]);
        let (bw, bh) = (m[2] - m[0], m[3] - m[1]);
        let _ = writeln!(
            out,
            r#"  <rect x="{x:.4}" y="{y:.4}" width="{bw:.4}" height="{bh:.4}" fill="none" stroke="{color}" stroke-width="1.5"/>"#
        );
        corner_ellipse(&mut out, m[0], m[1], det.bbox.cov(), 0, color);
        corner_ellipse(&mut out, m[2], m[3], det.bbox.cov(), 2, color);
        let _ = writeln!(
            out,
            r#"  <text x="{x:.4}" y="{ty:.4}" font-size="10" fill="{color}">{score:.3} | H {entropy:.2}</text>"#,
            ty = y - 2.0,
            score = det.score,
            entropy = det.gaussian_entropy
        );
    }
    out.push_str("</svg>\n");
    Ok(out)
}
