use std::fmt::Write;

use super::DensityProfile;

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 400.0;
const MARGIN_L: f64 = 60.0;
const MARGIN_R: f64 = 150.0;
const MARGIN_T: f64 = 20.0;
const MARGIN_B: f64 = 45.0;
const RATE_COLORS: [&str; 6] = ["#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf"];

/// SVG chart of playback tok/s over musical time: the mean as a solid line,
/// a shaded band of one standard deviation either side, and one dashed
/// horizontal line per generation rate.
pub fn render_density_svg(profile: &DensityProfile, rates: &[(String, f64)]) -> String {
    let x_max = profile.horizon_s.max(1.0);
    let y_max = profile
        .bins
        .iter()
        .map(|b| b.mean_tok_s + b.stdev_tok_s)
        .chain(rates.iter().map(|r| r.1))
        .fold(1.0f64, f64::max)
        * 1.1;
    let pw = WIDTH - MARGIN_L - MARGIN_R;
    let ph = HEIGHT - MARGIN_T - MARGIN_B;
    let x = |t: f64| MARGIN_L + t / x_max * pw;
    let y = |v: f64| MARGIN_T + ph - v / y_max * ph;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);

    // Bin centres.
    let pts: Vec<(f64, f64, f64)> = profile
        .bins
        .iter()
        .map(|b| (b.bin_start_s + profile.bin_s / 2.0, b.mean_tok_s, b.stdev_tok_s))
        .collect();
    if !pts.is_empty() {
        let mut band = String::new();
        for &(t, m, sd) in &pts {
            let _ = write!(band, "{:.2},{:.2} ", x(t), y(m + sd));
        }
        for &(t, m, sd) in pts.iter().rev() {
            let _ = write!(band, "{:.2},{:.2} ", x(t), y((m - sd).max(0.0)));
        }
        let _ = writeln!(
            s,
            r##"<polygon class="stdev-band" points="{}" fill="#1f77b4" fill-opacity="0.25" stroke="none"/>"##,
            band.trim_end()
        );
        let line: Vec<String> = pts
            .iter()
            .map(|&(t, m, _)| format!("{:.2},{:.2}", x(t), y(m)))
            .collect();
        let _ = writeln!(
            s,
            r##"<polyline class="mean" points="{}" fill="none" stroke="#1f77b4" stroke-width="2"/>"##,
            line.join(" ")
        );
    }

    for (i, (label, rate)) in rates.iter().enumerate() {
        let color = RATE_COLORS[i % RATE_COLORS.len()];
        let yy = y(*rate);
        let _ = writeln!(
            s,
            r#"<line class="rate" x1="{:.2}" y1="{yy:.2}" x2="{:.2}" y2="{yy:.2}" stroke="{color}" stroke-width="1.5" stroke-dasharray="6 4"/>"#,
            x(0.0),
            x(x_max)
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" fill="{color}">{} ({rate:.0} tok/s)</text>"#,
            x(x_max) + 6.0,
            yy + 4.0,
            escape(label)
        );
    }

    // Axes and ticks.
    let _ = writeln!(
        s,
        r#"<path d="M{l},{t} L{l},{b} L{r},{b}" fill="none" stroke="black"/>"#,
        l = MARGIN_L,
        t = MARGIN_T,
        b = MARGIN_T + ph,
        r = MARGIN_L + pw
    );
    for i in 0..=5 {
        let v = y_max / 1.1 * i as f64 / 5.0;
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{v:.0}</text>"#,
            MARGIN_L - 6.0,
            y(v) + 4.0
        );
        let t = x_max * i as f64 / 5.0;
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{t:.0}</text>"#,
            x(t),
            MARGIN_T + ph + 16.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">musical time (s)</text>"#,
        MARGIN_L + pw / 2.0,
        HEIGHT - 8.0
    );
    let _ = writeln!(
        s,
        r#"<text transform="translate(14,{:.2}) rotate(-90)" text-anchor="middle">tokens per second</text>"#,
        MARGIN_T + ph / 2.0
    );
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
