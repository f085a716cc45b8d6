//! Exact Shapley attributions for the linear verbalizer, a brute-force
//! coalition oracle, per-class unit rankings, and beeswarm exports.
//!
//! For a linear model under an interventional baseline the Shapley value
//! collapses to `φᵢ = wᵢ·(xᵢ − μᵢ)` — exact and O(V). The enumeration
//! oracle exists to prove that, not to be fast.

use crate::error::{Error, Result};
use crate::verbalizer::LearnableVerbalizer;
use serde::Serialize;
use std::io::Write;
use std::path::Path;

/// Mean readout distribution over a reference set (the background μ).
#[derive(Debug, Clone)]
pub struct BackgroundSummary {
    pub mean: Vec<f64>,
    pub n: usize,
}

impl BackgroundSummary {
    pub fn fit(reference: &[Vec<f64>]) -> Result<Self> {
        let n = reference.len();
        if n == 0 {
            return Err(Error::InvalidInput("background: empty reference set".into()));
        }
        let v = reference[0].len();
        let mut mean = vec![0.0; v];
        for row in reference {
            if row.len() != v {
                return Err(Error::InvalidInput("background: ragged reference rows".into()));
            }
            for (m, x) in mean.iter_mut().zip(row) {
                *m += x;
            }
        }
        for m in mean.iter_mut() {
            *m /= n as f64;
        }
        Ok(BackgroundSummary { mean, n })
    }
}

#[derive(Debug, Clone)]
pub struct ShapExplanation {
    pub datapoint: usize,
    pub class: usize,
    pub phi: Vec<f64>,
    pub feature_values: Vec<f64>,
    pub base_value: f64,
}

impl ShapExplanation {
    /// Model output implied by local accuracy: base + Σφ.
    pub fn reconstructed_output(&self) -> f64 {
        self.base_value + self.phi.iter().sum::<f64>()
    }
}

/// Exact SHAP for one class score of the linear verbalizer.
pub fn linear_shap(
    v: &LearnableVerbalizer,
    x: &[f64],
    bg: &BackgroundSummary,
    class: usize,
    datapoint: usize,
) -> Result<ShapExplanation> {
    if x.len() != v.vocab || bg.mean.len() != v.vocab {
        return Err(Error::InvalidInput(format!(
            "linear_shap: input length {} / background length {} vs vocabulary {}",
            x.len(),
            bg.mean.len(),
            v.vocab
        )));
    }
    if class >= v.classes {
        return Err(Error::IndexOutOfRange {
            op: "linear_shap",
            index: class,
            size: v.classes,
            context: Some("class".into()),
        });
    }
    let row = &v.weights.data()[class * v.vocab..(class + 1) * v.vocab];
    let phi: Vec<f64> = row
        .iter()
        .zip(x.iter().zip(&bg.mean))
        .map(|(w, (xi, mu))| w * (xi - mu))
        .collect();
    let base_value =
        row.iter().zip(&bg.mean).map(|(w, mu)| w * mu).sum::<f64>() + v.bias.data()[class];
    Ok(ShapExplanation {
        datapoint,
        class,
        phi,
        feature_values: x.to_vec(),
        base_value,
    })
}

/// Explains one class score across a whole set of readout distributions;
/// datapoints are numbered by position.
pub fn explain_class(
    v: &LearnableVerbalizer,
    dists: &[Vec<f64>],
    bg: &BackgroundSummary,
    class: usize,
) -> Result<Vec<ShapExplanation>> {
    dists
        .iter()
        .enumerate()
        .map(|(i, x)| linear_shap(v, x, bg, class, i))
        .collect()
}

/// Coalition-enumeration Shapley values under the interventional
/// convention: features outside the coalition are pinned to their
/// background means. Exponential in the feature count.
pub fn brute_force_shapley(
    model_fn: &dyn Fn(&[f64]) -> f64,
    x: &[f64],
    mu: &[f64],
) -> Result<Vec<f64>> {
    let n = x.len();
    if n != mu.len() {
        return Err(Error::InvalidInput(format!(
            "brute_force_shapley: input length {n} vs background length {}",
            mu.len()
        )));
    }
    if n == 0 || n > 20 {
        return Err(Error::InvalidInput(format!(
            "brute_force_shapley: feature count {n} outside [1, 20]"
        )));
    }

    // factorial table as f64; n ≤ 20 keeps these exact.
    let mut fact = vec![1.0f64; n + 1];
    for i in 1..=n {
        fact[i] = fact[i - 1] * i as f64;
    }

    let eval = |mask: u32| -> f64 {
        let blended: Vec<f64> = (0..n)
            .map(|i| if mask & (1 << i) != 0 { x[i] } else { mu[i] })
            .collect();
        model_fn(&blended)
    };

    // Cache all 2^n evaluations once.
    let values: Vec<f64> = (0..(1u32 << n)).map(eval).collect();

    let mut phi = vec![0.0; n];
    for i in 0..n {
        let bit = 1u32 << i;
        for mask in 0..(1u32 << n) {
            if mask & bit != 0 {
                continue;
            }
            let s = mask.count_ones() as usize;
            let weight = fact[s] * fact[n - s - 1] / fact[n];
            phi[i] += weight * (values[(mask | bit) as usize] - values[mask as usize]);
        }
    }
    Ok(phi)
}

/// One unit's attribution summary across a set of explanations.
#[derive(Debug, Clone)]
pub struct RankedUnit {
    pub unit: usize,
    pub mean_abs_phi: f64,
    /// (datapoint id, φ, feature value) per explanation, in input order.
    pub points: Vec<(usize, f64, f64)>,
}

#[derive(Debug, Clone)]
pub struct RankedUnits {
    pub class: usize,
    pub units: Vec<RankedUnit>,
}

/// Orders units by descending mean |φ| over the given explanations (ties
/// to the lowest unit id) and keeps the top k.
pub fn rank_units(explanations: &[ShapExplanation], class: usize, k: usize) -> Result<RankedUnits> {
    if explanations.is_empty() {
        return Err(Error::InvalidInput("rank_units: no explanations".into()));
    }
    let vocab = explanations[0].phi.len();
    for e in explanations {
        if e.class != class {
            return Err(Error::InvalidInput(format!(
                "rank_units: explanation for class {} mixed into class {class}",
                e.class
            )));
        }
        if e.phi.len() != vocab {
            return Err(Error::InvalidInput("rank_units: ragged explanations".into()));
        }
    }
    let mut order: Vec<usize> = (0..vocab).collect();
    let mean_abs: Vec<f64> = (0..vocab)
        .map(|u| explanations.iter().map(|e| e.phi[u].abs()).sum::<f64>() / explanations.len() as f64)
        .collect();
    order.sort_by(|&a, &b| {
        mean_abs[b]
            .partial_cmp(&mean_abs[a])
            .expect("finite attributions")
            .then(a.cmp(&b))
    });
    order.truncate(k.min(vocab));

    let units = order
        .into_iter()
        .map(|u| RankedUnit {
            unit: u,
            mean_abs_phi: mean_abs[u],
            points: explanations
                .iter()
                .map(|e| (e.datapoint, e.phi[u], e.feature_values[u]))
                .collect(),
        })
        .collect();
    Ok(RankedUnits { class, units })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExportFormat {
    Ndjson,
    Svg,
}

#[derive(Serialize)]
struct BeeswarmRow {
    unit: usize,
    rank: usize,
    phi: f64,
    feature_value: f64,
    datapoint: usize,
}

/// Writes the ranked attributions as beeswarm data: NDJSON rows or a
/// self-contained SVG with one horizontal band per unit (rank order), point
/// x-position = φ, color blue→red with the feature value.
pub fn export_beeswarm(ranked: &RankedUnits, path: &Path, format: ExportFormat) -> Result<()> {
    if ranked.units.is_empty() {
        return Err(Error::InvalidInput("export_beeswarm: empty ranking".into()));
    }
    let payload = match format {
        ExportFormat::Ndjson => render_ndjson(ranked)?,
        ExportFormat::Svg => render_svg(ranked),
    };
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(payload.as_bytes()).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn render_ndjson(ranked: &RankedUnits) -> Result<String> {
    let mut out = String::new();
    for (rank, unit) in ranked.units.iter().enumerate() {
        for &(datapoint, phi, feature_value) in &unit.points {
            let row = BeeswarmRow {
                unit: unit.unit,
                rank,
                phi,
                feature_value,
                datapoint,
            };
            out.push_str(&serde_json::to_string(&row).expect("plain fields serialize"));
            out.push('\n');
        }
    }
    Ok(out)
}

/// Low-feature-value color (blue) and high (red), matching the usual
/// beeswarm palette.
const COLOR_LO: (u8, u8, u8) = (0x1e, 0x88, 0xe5);
const COLOR_HI: (u8, u8, u8) = (0xff, 0x0d, 0x57);

fn lerp_color(t: f64) -> String {
    let t = t.clamp(0.0, 1.0);
    let mix = |a: u8, b: u8| (a as f64 + (b as f64 - a as f64) * t).round() as u8;
    format!(
        "#{:02x}{:02x}{:02x}",
        mix(COLOR_LO.0, COLOR_HI.0),
        mix(COLOR_LO.1, COLOR_HI.1),
        mix(COLOR_LO.2, COLOR_HI.2)
    )
}

/// Deterministic vertical jitter from the datapoint id, in (−1, 1).
fn jitter(datapoint: usize) -> f64 {
    let mut z = (datapoint as u64).wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^= z >> 31;
    (z as f64 / u64::MAX as f64) * 2.0 - 1.0
}

fn render_svg(ranked: &RankedUnits) -> String {
    const WIDTH: f64 = 640.0;
    const BAND: f64 = 28.0;
    const MARGIN_X: f64 = 70.0;
    const MARGIN_Y: f64 = 24.0;
    let height = MARGIN_Y * 2.0 + BAND * ranked.units.len() as f64;

    let mut phi_max = 0.0f64;
    let mut fv_lo = f64::INFINITY;
    let mut fv_hi = f64::NEG_INFINITY;
    for u in &ranked.units {
        for &(_, phi, fv) in &u.points {
            phi_max = phi_max.max(phi.abs());
            fv_lo = fv_lo.min(fv);
            fv_hi = fv_hi.max(fv);
        }
    }
    if phi_max == 0.0 {
        phi_max = 1.0;
    }
    let fv_span = if fv_hi > fv_lo { fv_hi - fv_lo } else { 1.0 };
    let x_of = |phi: f64| MARGIN_X + (phi / phi_max + 1.0) / 2.0 * (WIDTH - 2.0 * MARGIN_X);

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{height}\" \
         viewBox=\"0 0 {WIDTH} {height}\">\n"
    ));
    svg.push_str(&format!(
        "<rect width=\"{WIDTH}\" height=\"{height}\" fill=\"white\"/>\n"
    ));
    // Zero line.
    let x0 = x_of(0.0);
    svg.push_str(&format!(
        "<line x1=\"{x0}\" y1=\"{MARGIN_Y}\" x2=\"{x0}\" y2=\"{}\" stroke=\"#cccccc\" stroke-width=\"1\"/>\n",
        height - MARGIN_Y
    ));
    for (rank, unit) in ranked.units.iter().enumerate() {
        let y_mid = MARGIN_Y + BAND * (rank as f64 + 0.5);
        svg.push_str(&format!(
            "<text x=\"8\" y=\"{:.2}\" font-family=\"monospace\" font-size=\"11\" \
             dominant-baseline=\"middle\">unit {}</text>\n",
            y_mid, unit.unit
        ));
        for &(datapoint, phi, fv) in &unit.points {
            let cx = x_of(phi);
            let cy = y_mid + jitter(datapoint) * BAND * 0.35;
            let color = lerp_color((fv - fv_lo) / fv_span);
            svg.push_str(&format!(
                "<circle cx=\"{cx:.3}\" cy=\"{cy:.3}\" r=\"2.4\" fill=\"{color}\" fill-opacity=\"0.8\"/>\n"
            ));
        }
    }
    svg.push_str("</svg>\n");
    svg
}

/// Pairwise |top-k ∩ top-k| between ranked unit lists of multiple runs.
pub fn cross_run_overlap(rankings: &[Vec<usize>], k: usize) -> Result<Vec<((usize, usize), usize)>> {
    if k < 1 {
        return Err(Error::InvalidInput("cross_run_overlap: k must be ≥ 1".into()));
    }
    if rankings.len() < 2 {
        return Err(Error::InvalidInput("cross_run_overlap: need ≥ 2 runs".into()));
    }
    let tops: Vec<std::collections::BTreeSet<usize>> = rankings
        .iter()
        .map(|r| r.iter().take(k).copied().collect())
        .collect();
    let mut out = Vec::new();
    for i in 0..tops.len() {
        for j in (i + 1)..tops.len() {
            out.push(((i, j), tops[i].intersection(&tops[j]).count()));
        }
    }
    Ok(out)
}
