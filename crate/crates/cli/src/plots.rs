//! Minimal SVG bar charts comparing two histograms on shared bins.

const W: f64 = 480.0;
const H: f64 = 240.0;
const PAD: f64 = 32.0;

/// Real mass in grey, generated mass in blue, side by side per bin.
pub fn histogram_svg(title: &str, edges: &[f64], real: &[f64], gen: &[f64]) -> String {
    let bins = real.len().max(1);
    let top = real.iter().chain(gen).cloned().fold(0.0, f64::max).max(1e-12);
    let bw = (W - 2.0 * PAD) / bins as f64;
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n\
         <text x=\"{PAD}\" y=\"18\" font-family=\"sans-serif\" font-size=\"12\">{}</text>\n",
        escape(title)
    );
    for (k, (r, g)) in real.iter().zip(gen).enumerate() {
        let x = PAD + k as f64 * bw;
        for (off, m, color) in [(0.0, r, "#999999"), (0.5, g, "#3366cc")] {
            let h = (H - 2.0 * PAD) * m / top;
            s.push_str(&format!(
                "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"{color}\"/>\n",
                x + off * bw,
                H - PAD - h,
                0.5 * bw,
                h
            ));
        }
    }
    if let (Some(lo), Some(hi)) = (edges.first(), edges.last()) {
        s.push_str(&format!(
            "<text x=\"{PAD}\" y=\"{:.0}\" font-family=\"sans-serif\" font-size=\"10\">{lo:.3}</text>\n\
             <text x=\"{:.0}\" y=\"{:.0}\" font-family=\"sans-serif\" font-size=\"10\" text-anchor=\"end\">{hi:.3}</text>\n",
            H - 12.0,
            W - PAD,
            H - 12.0
        ));
    }
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
