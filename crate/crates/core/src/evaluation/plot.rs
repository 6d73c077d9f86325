use std::fmt::Write;

use super::SeedCurves;

const W: f64 = 640.0;
const H: f64 = 400.0;
const PAD: f64 = 56.0;

/// Line plot of the seed mean with a shaded ±1 std band. Depends only on
/// the curve values, so it can be rebuilt from the CSV export.
pub fn render_svg(curves: &SeedCurves, title: &str) -> String {
    let n = curves.iterations.len();
    let mut s = String::new();
    let _ = write!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    );
    s.push_str(r##"<rect width="100%" height="100%" fill="#ffffff"/>"##);
    let _ = write!(
        s,
        r#"<text x="{}" y="24" text-anchor="middle" font-family="sans-serif" font-size="15">{}</text>"#,
        W / 2.0,
        escape(title)
    );
    if n == 0 {
        s.push_str("</svg>\n");
        return s;
    }
    let lo = (0..n).map(|i| curves.mean[i] - curves.std[i]).fold(f64::INFINITY, f64::min);
    let hi = (0..n).map(|i| curves.mean[i] + curves.std[i]).fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if hi - lo < 1e-9 { (lo - 0.5, hi + 0.5) } else { (lo, hi) };
    let x0 = curves.iterations[0] as f64;
    let x1 = curves.iterations[n - 1] as f64;
    let span = if x1 > x0 { x1 - x0 } else { 1.0 };
    let px = |i: usize| PAD + (curves.iterations[i] as f64 - x0) / span * (W - 2.0 * PAD);
    let py = |v: f64| H - PAD - (v - lo) / (hi - lo) * (H - 2.0 * PAD);

    let _ = write!(
        s,
        r##"<g stroke="#444" stroke-width="1"><line x1="{PAD}" y1="{b}" x2="{r}" y2="{b}"/><line x1="{PAD}" y1="{PAD}" x2="{PAD}" y2="{b}"/></g>"##,
        b = H - PAD,
        r = W - PAD
    );
    let label = |s: &mut String, x: f64, y: f64, anchor: &str, text: String| {
        let _ = write!(
            s,
            r#"<text x="{x:.1}" y="{y:.1}" text-anchor="{anchor}" font-family="sans-serif" font-size="11">{text}</text>"#
        );
    };
    label(&mut s, PAD - 6.0, py(lo) + 4.0, "end", format!("{lo:.3}"));
    label(&mut s, PAD - 6.0, py(hi) + 4.0, "end", format!("{hi:.3}"));
    label(&mut s, px(0), H - PAD + 16.0, "middle", curves.iterations[0].to_string());
    label(&mut s, px(n - 1), H - PAD + 16.0, "middle", curves.iterations[n - 1].to_string());
    label(&mut s, W / 2.0, H - 12.0, "middle", "iteration".into());

    let mut band = String::new();
    for i in 0..n {
        let _ = write!(band, "{:.2},{:.2} ", px(i), py(curves.mean[i] + curves.std[i]));
    }
    for i in (0..n).rev() {
        let _ = write!(band, "{:.2},{:.2} ", px(i), py(curves.mean[i] - curves.std[i]));
    }
    let _ = write!(
        s,
        r##"<polygon points="{}" fill="#1f77b4" fill-opacity="0.25" stroke="none"/>"##,
        band.trim_end()
    );
    let line: Vec<String> = (0..n).map(|i| format!("{:.2},{:.2}", px(i), py(curves.mean[i]))).collect();
    let _ = write!(
        s,
        r##"<polyline points="{}" fill="none" stroke="#1f77b4" stroke-width="2"/>"##,
        line.join(" ")
    );
    let caption = format!(
        "mean ± population std over {} seed(s), EMA α = 0.1",
        curves.seeds.len()
    );
    label(&mut s, W - PAD, PAD - 8.0, "end", escape(&caption));
    s.push_str("</svg>\n");
    s
}

fn escape(t: &str) -> String {
    t.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
