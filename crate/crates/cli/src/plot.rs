//! Minimal SVG rendering of profile overlays, uncertainty traces and
//! attention heatmaps.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use anyhow::{bail, Context};
use etch_core::harness::{AttentionSummary, UncertaintyTrace};
use etch_core::profile::lateral_grid;

const W: f64 = 640.0;
const H: f64 = 420.0;
const MARGIN: f64 = 60.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

pub fn render(inputs: &[std::path::PathBuf], out: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    for input in inputs {
        let name = input.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        let written = match name {
            "profile_overlay.csv" => overlay(input, out)?,
            "trace.json" => {
                let t: UncertaintyTrace = read_json(input)?;
                write(out, "trace.svg", trace_svg(&t))?
            }
            "attention.json" => {
                let a: AttentionSummary = read_json(input)?;
                write(out, "attention.svg", heatmap_svg(&a.matrix))?
            }
            _ => bail!("{}: expected profile_overlay.csv, trace.json or attention.json", input.display()),
        };
        for w in written {
            println!("wrote {}", w);
        }
    }
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write(dir: &Path, name: &str, svg: String) -> anyhow::Result<Vec<String>> {
    let path = dir.join(name);
    std::fs::write(&path, svg).with_context(|| format!("writing {}", path.display()))?;
    Ok(vec![path.display().to_string()])
}

struct Series {
    label: String,
    y: Vec<f64>,
    band: Option<(Vec<f64>, Vec<f64>)>,
}

/// Depth-vs-x chart. Depth increases downward, as in a trench cross-section.
fn line_chart(title: &str, x: &[f64], series: &[Series]) -> String {
    let all = series.iter().flat_map(|s| {
        s.y.iter().chain(s.band.iter().flat_map(|(lo, hi)| lo.iter().chain(hi)))
    });
    let (mut lo, mut hi) = all.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if !(hi > lo) {
        lo -= 0.5;
        hi += 0.5;
    }
    let px = |v: f64| MARGIN + v * (W - 2.0 * MARGIN);
    let py = |d: f64| MARGIN + (d - lo) / (hi - lo) * (H - 2.0 * MARGIN);
    let mut s = header(title);
    let _ = write!(
        s,
        r#"<line x1="{m}" y1="{m}" x2="{m}" y2="{b}" stroke="black"/><line x1="{m}" y1="{m}" x2="{r}" y2="{m}" stroke="black"/>"#,
        m = MARGIN,
        b = H - MARGIN,
        r = W - MARGIN
    );
    let _ = write!(s, r#"<text x="{}" y="{}" text-anchor="middle">x (normalized, centre to edge)</text>"#, W / 2.0, MARGIN - 25.0);
    let _ = write!(s, r#"<text x="15" y="{}" transform="rotate(-90 15 {})" text-anchor="middle">depth (um)</text>"#, H / 2.0, H / 2.0);
    for (t, v) in [(MARGIN, lo), (H - MARGIN, hi)] {
        let _ = write!(s, r#"<text x="{}" y="{t}" text-anchor="end" font-size="11">{v:.3}</text>"#, MARGIN - 4.0);
    }
    for (i, ser) in series.iter().enumerate() {
        let c = COLORS[i % COLORS.len()];
        if let Some((blo, bhi)) = &ser.band {
            let mut pts: Vec<String> = x.iter().zip(blo).map(|(a, b)| format!("{:.2},{:.2}", px(*a), py(*b))).collect();
            pts.extend(x.iter().zip(bhi).rev().map(|(a, b)| format!("{:.2},{:.2}", px(*a), py(*b))));
            let _ = write!(s, r#"<polygon points="{}" fill="{c}" fill-opacity="0.15" stroke="none"/>"#, pts.join(" "));
        }
        let pts: Vec<String> = x.iter().zip(&ser.y).map(|(a, b)| format!("{:.2},{:.2}", px(*a), py(*b))).collect();
        let _ = write!(s, r#"<polyline points="{}" fill="none" stroke="{c}" stroke-width="1.5"/>"#, pts.join(" "));
        let _ = write!(
            s,
            r#"<text x="{}" y="{}" fill="{c}" font-size="12">{}</text>"#,
            W - MARGIN + 5.0,
            MARGIN + 15.0 * i as f64,
            escape(&ser.label)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn header(title: &str) -> String {
    format!(
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif"><rect width="100%" height="100%" fill="white"/><text x="{cx}" y="20" text-anchor="middle" font-size="14">{t}</text>"#,
        w = W + 80.0,
        h = H,
        cx = W / 2.0,
        t = escape(title)
    )
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn overlay(path: &Path, out: &Path) -> anyhow::Result<Vec<String>> {
    let mut rdr = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let headers = rdr.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let (Some(id), Some(x), Some(clean)) = (col("recipe_id"), col("x_norm"), col("clean_um")) else {
        bail!("{}: missing recipe_id, x_norm or clean_um column", path.display());
    };
    let variants: Vec<String> =
        headers.iter().filter_map(|h| h.strip_suffix("_mean_um").map(String::from)).collect();
    let mut by_recipe: BTreeMap<String, Vec<csv::StringRecord>> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        by_recipe.entry(rec[id].to_string()).or_default().push(rec);
    }
    let mut written = Vec::new();
    for (rid, rows) in &by_recipe {
        let num = |r: &csv::StringRecord, c: usize| r[c].parse::<f64>().with_context(|| format!("bad number `{}`", &r[c]));
        let xs = rows.iter().map(|r| num(r, x)).collect::<anyhow::Result<Vec<_>>>()?;
        let mut series = vec![Series { label: "oracle (clean)".into(), y: rows.iter().map(|r| num(r, clean)).collect::<anyhow::Result<_>>()?, band: None }];
        for v in &variants {
            let m = col(&format!("{v}_mean_um")).expect("listed header");
            let s = col(&format!("{v}_sigma_um")).context("missing sigma column")?;
            let mean: Vec<f64> = rows.iter().map(|r| num(r, m)).collect::<anyhow::Result<_>>()?;
            let sig: Vec<f64> = rows.iter().map(|r| num(r, s)).collect::<anyhow::Result<_>>()?;
            let lo = mean.iter().zip(&sig).map(|(a, b)| a - 2.0 * b).collect();
            let hi = mean.iter().zip(&sig).map(|(a, b)| a + 2.0 * b).collect();
            series.push(Series { label: format!("{v} ±2σ"), y: mean, band: Some((lo, hi)) });
        }
        let safe: String = rid.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect();
        written.extend(write(out, &format!("profile_{safe}.svg"), line_chart(&format!("Profile {rid}"), &xs, &series))?);
    }
    Ok(written)
}

fn trace_svg(t: &UncertaintyTrace) -> String {
    let g = t.steps.first().map_or(0, |s| s.mean_um.len());
    let x = lateral_grid(g.max(2));
    let series: Vec<Series> = t
        .steps
        .iter()
        .map(|s| Series {
            label: format!("step {}", s.step),
            y: s.mean_um.clone(),
            band: Some((
                s.mean_um.iter().zip(&s.sigma_um).map(|(m, v)| m - 2.0 * v).collect(),
                s.mean_um.iter().zip(&s.sigma_um).map(|(m, v)| m + 2.0 * v).collect(),
            )),
        })
        .collect();
    line_chart(&format!("Uncertainty trace {}", t.recipe_id), &x[..g.min(x.len())], &series)
}

fn heatmap_svg(matrix: &[Vec<f64>]) -> String {
    let g = matrix.len().max(1);
    let t = matrix.first().map_or(1, Vec::len).max(1);
    let cw = (W - 2.0 * MARGIN) / t as f64;
    let ch = (H - 2.0 * MARGIN) / g as f64;
    let mut s = header("Cross-attention (rows: grid points, columns: steps)");
    for (i, row) in matrix.iter().enumerate() {
        for (j, w) in row.iter().enumerate() {
            let shade = (255.0 * (1.0 - w.clamp(0.0, 1.0))).round() as u8;
            let _ = write!(
                s,
                r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="rgb({shade},{shade},255)"><title>x index {i}, step {}: {w:.3}</title></rect>"#,
                MARGIN + j as f64 * cw,
                MARGIN + i as f64 * ch,
                cw,
                ch,
                j + 1
            );
        }
    }
    let _ = write!(s, r#"<text x="{}" y="{}" text-anchor="middle">step</text>"#, W / 2.0, H - MARGIN + 20.0);
    let _ = write!(s, r#"<text x="15" y="{}" transform="rotate(-90 15 {})" text-anchor="middle">x (centre at top)</text>"#, H / 2.0, H / 2.0);
    s.push_str("</svg>\n");
    s
}
