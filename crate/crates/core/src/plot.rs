//! SVG line chart of sweep results: mean error against context length, one
//! polyline per model with standard-error bars.
//!
//! Output is a pure function of the rows, so the same CSV always renders to
//! the same bytes.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::experiment::ResultRow;

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 480.0;
const LEFT: f64 = 80.0;
const RIGHT: f64 = 170.0;
const TOP: f64 = 30.0;
const BOTTOM: f64 = 60.0;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

/// Rows grouped by model in order of first appearance, each sorted by `n`.
fn series(rows: &[ResultRow]) -> Result<Vec<(String, Vec<&ResultRow>)>> {
    let mut out: Vec<(String, Vec<&ResultRow>)> = Vec::new();
    for row in rows {
        match out.iter_mut().find(|(m, _)| *m == row.model) {
            Some((_, pts)) => pts.push(row),
            None => out.push((row.model.clone(), vec![row])),
        }
    }
    for (model, pts) in &mut out {
        pts.sort_by_key(|r| r.n_context);
        if pts.windows(2).any(|w| w[0].n_context == w[1].n_context) {
            return Err(Error::invalid(format!(
                "model `{model}` has two rows for the same context length"
            )));
        }
    }
    Ok(out)
}

fn fmt_tick(v: f64) -> String {
    let s = format!("{v:.3}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" {
        "0".into()
    } else {
        s.into()
    }
}

pub fn render_svg(rows: &[ResultRow]) -> Result<String> {
    if rows.is_empty() {
        return Err(Error::invalid(
            "nothing to plot: the result file has no rows",
        ));
    }
    if rows
        .iter()
        .any(|r| !r.mean_err.is_finite() || !r.std_err.is_finite())
    {
        return Err(Error::invalid("cannot plot non-finite errors"));
    }
    let groups = series(rows)?;
    let metric = &rows[0].metric;
    let n_lo = rows.iter().map(|r| r.n_context).min().unwrap_or(0) as f64;
    let n_hi = rows.iter().map(|r| r.n_context).max().unwrap_or(1) as f64;
    let (n_lo, n_hi) = if n_hi > n_lo {
        (n_lo, n_hi)
    } else {
        (n_lo - 1.0, n_hi + 1.0)
    };
    let y_hi = rows
        .iter()
        .map(|r| r.mean_err + r.std_err)
        .fold(0.0f64, f64::max);
    let y_hi = if y_hi > 0.0 { y_hi * 1.05 } else { 1.0 };

    let plot_w = WIDTH - LEFT - RIGHT;
    let plot_h = HEIGHT - TOP - BOTTOM;
    let sx = |n: f64| LEFT + (n - n_lo) / (n_hi - n_lo) * plot_w;
    let sy = |y: f64| TOP + plot_h - y / y_hi * plot_h;

    let mut s = String::new();
    let _ = writeln!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\" font-family=\"sans-serif\" font-size=\"12\">"
    );
    let _ = writeln!(
        s,
        "<rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>"
    );
    // axes
    let (x0, y0, x1, y1) = (LEFT, TOP + plot_h, LEFT + plot_w, TOP);
    let _ = writeln!(
        s,
        "<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x1}\" y2=\"{y0}\" stroke=\"black\"/>"
    );
    let _ = writeln!(
        s,
        "<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x0}\" y2=\"{y1}\" stroke=\"black\"/>"
    );
    for k in 0..=5 {
        let n = n_lo + (n_hi - n_lo) * k as f64 / 5.0;
        let x = sx(n);
        let _ = writeln!(
            s,
            "<line x1=\"{x:.2}\" y1=\"{y0}\" x2=\"{x:.2}\" y2=\"{:.2}\" stroke=\"black\"/>",
            y0 + 5.0
        );
        let _ = writeln!(
            s,
            "<text x=\"{x:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{}</text>",
            y0 + 20.0,
            fmt_tick(n)
        );
        let y = y_hi * k as f64 / 5.0;
        let yy = sy(y);
        let _ = writeln!(
            s,
            "<line x1=\"{:.2}\" y1=\"{yy:.2}\" x2=\"{x0}\" y2=\"{yy:.2}\" stroke=\"black\"/>",
            x0 - 5.0
        );
        let _ = writeln!(
            s,
            "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\">{}</text>",
            x0 - 8.0,
            yy + 4.0,
            fmt_tick(y)
        );
    }
    let _ = writeln!(
        s,
        "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\">context examples N</text>",
        LEFT + plot_w / 2.0,
        HEIGHT - 15.0
    );
    let _ = writeln!(
        s,
        "<text x=\"20\" y=\"{:.2}\" text-anchor=\"middle\" transform=\"rotate(-90 20 {:.2})\">mean test error ({metric})</text>",
        TOP + plot_h / 2.0,
        TOP + plot_h / 2.0
    );

    for (i, (model, pts)) in groups.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let _ = writeln!(s, "<g class=\"series\" data-model=\"{model}\">");
        for r in pts {
            let x = sx(r.n_context as f64);
            let (lo, hi) = (
                sy((r.mean_err - r.std_err).max(0.0)),
                sy(r.mean_err + r.std_err),
            );
            let _ = writeln!(
                s,
                "<line class=\"errorbar\" x1=\"{x:.2}\" y1=\"{lo:.2}\" x2=\"{x:.2}\" y2=\"{hi:.2}\" stroke=\"{color}\"/>"
            );
        }
        let points: Vec<String> = pts
            .iter()
            .map(|r| format!("{:.2},{:.2}", sx(r.n_context as f64), sy(r.mean_err)))
            .collect();
        let _ = writeln!(
            s,
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>",
            points.join(" ")
        );
        let _ = writeln!(s, "</g>");
        let ly = TOP + 10.0 + 20.0 * i as f64;
        let lx = LEFT + plot_w + 15.0;
        let _ = writeln!(
            s,
            "<line x1=\"{lx:.2}\" y1=\"{ly:.2}\" x2=\"{:.2}\" y2=\"{ly:.2}\" stroke=\"{color}\" stroke-width=\"2\"/>",
            lx + 20.0
        );
        let _ = writeln!(
            s,
            "<text x=\"{:.2}\" y=\"{:.2}\">{model}</text>",
            lx + 26.0,
            ly + 4.0
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(model: &str, n: usize, mean: f64) -> ResultRow {
        ResultRow {
            model: model.into(),
            n_context: n,
            d: 4,
            r: 2,
            seed: 0,
            mean_err: mean,
            std_err: 0.01,
            metric: "abs".into(),
        }
    }

    #[test]
    fn one_polyline_per_model() {
        let rows: Vec<ResultRow> = [1, 5, 10]
            .iter()
            .flat_map(|&n| [row("zero", n, 0.8), row("krr_full", n, 0.5 / n as f64)])
            .collect();
        let svg = render_svg(&rows).unwrap();
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert_eq!(svg.matches("class=\"errorbar\"").count(), 6);
        assert_eq!(render_svg(&rows).unwrap(), svg);
    }

    #[test]
    fn empty_and_duplicate_inputs_are_errors() {
        assert!(render_svg(&[]).is_err());
        assert!(render_svg(&[row("zero", 1, 0.5), row("zero", 1, 0.4)]).is_err());
    }
}
