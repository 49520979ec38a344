//! Statistics over captured attention traces.

use std::collections::BTreeMap;

use dexlab_numcore::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, input_err, Result};
use crate::metrics::MetricRecord;
use crate::model::HeadTrace;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisConfig {
    /// Sparsity thresholds.
    pub eps: Vec<f64>,
    pub salient_fraction: f64,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            eps: vec![1e-4, 1e-6],
            salient_fraction: 0.05,
        }
    }
}

impl AnalysisConfig {
    pub fn validate(&self) -> Result<()> {
        if self.eps.iter().any(|&e| !(e > 0.0)) {
            return Err(config_err("analysis.eps entries must be positive"));
        }
        if !(self.salient_fraction > 0.0 && self.salient_fraction <= 0.5) {
            return Err(config_err("analysis.salient_fraction must be in (0, 0.5]"));
        }
        Ok(())
    }
}

fn check_pair(op: &str, a: &[f64], b: &[f64], min: usize) -> Result<()> {
    if a.len() != b.len() {
        return Err(input_err(format!("{op}: lengths {} and {} differ", a.len(), b.len())));
    }
    if a.len() < min {
        return Err(input_err(format!("{op}: need at least {min} elements")));
    }
    Ok(())
}

pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    check_pair("pearson", a, b, 2)?;
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(input_err("correlation undefined for constant input"));
    }
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Ranks starting at 1; tied values share their average rank.
pub fn average_ranks(a: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..a.len()).collect();
    idx.sort_by(|&i, &j| a[i].total_cmp(&a[j]));
    let mut ranks = vec![0.0; a.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && a[idx[j + 1]] == a[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    check_pair("spearman", a, b, 2)?;
    pearson(&average_ranks(a), &average_ranks(b))
}

/// Jensen-Shannon divergence in nats; inputs are renormalized.
pub fn js_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    check_pair("js_divergence", p, q, 1)?;
    if p.iter().chain(q).any(|&v| v < 0.0 || !v.is_finite()) {
        return Err(input_err("js_divergence: entries must be finite and non-negative"));
    }
    let sp: f64 = p.iter().sum();
    let sq: f64 = q.iter().sum();
    if sp == 0.0 || sq == 0.0 {
        return Err(input_err("js_divergence: distribution has zero mass"));
    }
    let mut js = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        let (a, b) = (a / sp, b / sq);
        let m = 0.5 * (a + b);
        if a > 0.0 {
            js += 0.5 * a * (a / m).ln();
        }
        if b > 0.0 {
            js += 0.5 * b * (b / m).ln();
        }
    }
    Ok(js.clamp(0.0, std::f64::consts::LN_2))
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    check_pair("cosine", a, b, 1)?;
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(input_err("cosine: zero vector"));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

pub fn cosine_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    Ok(1.0 - cosine_similarity(a, b)?)
}

/// Entropy (nats) of `|row|` renormalized to unit mass.
pub fn row_entropy(row: &[f64]) -> Result<f64> {
    let total: f64 = row.iter().map(|v| v.abs()).sum();
    if total == 0.0 {
        return Err(input_err("entropy undefined for an all-zero row"));
    }
    let mut h = 0.0;
    for &v in row {
        let p = v.abs() / total;
        if p > 0.0 {
            h -= p * p.ln();
        }
    }
    Ok(h.max(0.0))
}

fn visible_len(i: usize, cols: usize, causal: bool) -> usize {
    if causal {
        (i + 1).min(cols)
    } else {
        cols
    }
}

/// Mean over rows of [`row_entropy`] restricted to visible keys.
pub fn mean_row_entropy(scores: &Tensor<f64>, causal: bool) -> Result<f64> {
    let (r, c) = scores.dims2()?;
    let mut acc = 0.0;
    for i in 0..r {
        acc += row_entropy(&scores.row(i)[..visible_len(i, c, causal)])?;
    }
    Ok(acc / r as f64)
}

/// Fraction of causally visible entries with magnitude below `eps`.
pub fn sparsity_ratio(scores: &Tensor<f64>, eps: f64) -> Result<f64> {
    let (r, c) = scores.dims2()?;
    let (mut small, mut total) = (0usize, 0usize);
    for i in 0..r {
        for &v in &scores.row(i)[..visible_len(i, c, true)] {
            total += 1;
            if v.abs() < eps {
                small += 1;
            }
        }
    }
    Ok(small as f64 / total as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct NegativityStats {
    pub prop_pos: f64,
    pub prop_neg: f64,
    pub prop_zero: f64,
    pub mean_mag_pos: f64,
    pub mean_mag_neg: f64,
}

/// Sign statistics over the visible entries of every matrix given.
pub fn negativity_stats<'a>(
    scores: impl IntoIterator<Item = &'a Tensor<f64>>,
) -> Result<NegativityStats> {
    let (mut np, mut nn, mut nz) = (0usize, 0usize, 0usize);
    let (mut mp, mut mn) = (0.0, 0.0);
    for s in scores {
        let (r, c) = s.dims2()?;
        for i in 0..r {
            for &v in &s.row(i)[..visible_len(i, c, true)] {
                if v > 0.0 {
                    np += 1;
                    mp += v;
                } else if v < 0.0 {
                    nn += 1;
                    mn -= v;
                } else {
                    nz += 1;
                }
            }
        }
    }
    let total = (np + nn + nz) as f64;
    if total == 0.0 {
        return Err(input_err("negativity stats over no entries"));
    }
    Ok(NegativityStats {
        prop_pos: np as f64 / total,
        prop_neg: nn as f64 / total,
        prop_zero: nz as f64 / total,
        mean_mag_pos: if np > 0 { mp / np as f64 } else { 0.0 },
        mean_mag_neg: if nn > 0 { mn / nn as f64 } else { 0.0 },
    })
}

/// Visible entries of a causal map, row by row.
pub fn visible_entries(scores: &Tensor<f64>) -> Vec<f64> {
    let (r, c) = scores.dims2().expect("matrix");
    let mut out = Vec::with_capacity(r * (r + 1) / 2);
    for i in 0..r {
        out.extend_from_slice(&scores.row(i)[..visible_len(i, c, true)]);
    }
    out
}

/// Symmetric matrix of cosine distances between flattened head maps.
pub fn pairwise_head_distance(heads: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    if heads.len() < 2 {
        return Err(input_err("pairwise distance needs at least two heads"));
    }
    let n = heads.len();
    let mut d = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let v = cosine_distance(&heads[i], &heads[j])?;
            d[i][j] = v;
            d[j][i] = v;
        }
    }
    Ok(d)
}

/// Mean of the off-diagonal entries of a square block `idx x idx`.
pub fn mean_off_diagonal(m: &[Vec<f64>], idx: &[usize]) -> f64 {
    let mut acc = 0.0;
    let mut cnt = 0usize;
    for &i in idx {
        for &j in idx {
            if i != j {
                acc += m[i][j];
                cnt += 1;
            }
        }
    }
    if cnt == 0 {
        0.0
    } else {
        acc / cnt as f64
    }
}

fn centered_gram_cross(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<Vec<f64>> {
    // Returns (A_c^T B_c) as a p x q row-major block.
    let (n, p) = a.dims2()?;
    let (n2, q) = b.dims2()?;
    if n != n2 {
        return Err(input_err(format!("cka: {n} vs {n2} rows")));
    }
    let mean = |t: &Tensor<f64>, cols: usize| -> Vec<f64> {
        let mut m = vec![0.0; cols];
        for i in 0..n {
            for (mj, v) in m.iter_mut().zip(t.row(i)) {
                *mj += v;
            }
        }
        m.iter_mut().for_each(|v| *v /= n as f64);
        m
    };
    let (ma, mb) = (mean(a, p), mean(b, q));
    let mut out = vec![0.0; p * q];
    for i in 0..n {
        let (ra, rb) = (a.row(i), b.row(i));
        for x in 0..p {
            let va = ra[x] - ma[x];
            for y in 0..q {
                out[x * q + y] += va * (rb[y] - mb[y]);
            }
        }
    }
    Ok(out)
}

/// Linear centered kernel alignment between two feature matrices with
/// matching rows.
pub fn cka_linear(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<f64> {
    let (n, _) = a.dims2()?;
    if n < 2 {
        return Err(input_err("cka needs at least two rows"));
    }
    let fro2 = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>();
    let ab = fro2(&centered_gram_cross(a, b)?);
    let aa = fro2(&centered_gram_cross(a, a)?).sqrt();
    let bb = fro2(&centered_gram_cross(b, b)?).sqrt();
    if aa == 0.0 || bb == 0.0 {
        return Err(input_err("cka undefined for zero-variance features"));
    }
    Ok((ab / (aa * bb)).clamp(0.0, 1.0))
}

/// Each layer's scores divided by its maximum, sorted descending.
pub fn importance_distribution(scores: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    scores
        .iter()
        .enumerate()
        .map(|(l, row)| {
            if row.iter().any(|&v| v < 0.0 || !v.is_finite()) {
                return Err(input_err(format!("layer {l}: importance must be finite and >= 0")));
            }
            let max = row.iter().copied().fold(0.0, f64::max);
            if max == 0.0 {
                return Err(input_err(format!("layer {l}: all importance scores are zero")));
            }
            let mut v: Vec<f64> = row.iter().map(|x| x / max).collect();
            v.sort_by(|a, b| b.total_cmp(a));
            Ok(v)
        })
        .collect()
}

/// Per-row salient key mask: top `ceil(fraction * visible)` keys ranked by
/// the mean of the two group maps, ties to the lower index.
pub fn salient_mask(g1: &Tensor<f64>, g2: &Tensor<f64>, fraction: f64) -> Result<Vec<Vec<bool>>> {
    let (r, c) = g1.dims2()?;
    let mut out = Vec::with_capacity(r);
    for i in 0..r {
        let vis = visible_len(i, c, true);
        let (a, b) = (g1.row(i), g2.row(i));
        let mut idx: Vec<usize> = (0..vis).collect();
        idx.sort_by(|&x, &y| (b[y] + a[y]).total_cmp(&(a[x] + b[x])).then(x.cmp(&y)));
        let top = ((fraction * vis as f64).ceil() as usize).clamp(1, vis);
        let mut m = vec![false; vis];
        for &j in &idx[..top] {
            m[j] = true;
        }
        out.push(m);
    }
    Ok(out)
}

/// Agreement metrics between the two group maps of a diff head, over all
/// visible keys and over the salient and non-salient subsets.
pub fn group_comparison(
    g1: &Tensor<f64>,
    g2: &Tensor<f64>,
    fraction: f64,
) -> Result<Vec<(String, &'static str, f64)>> {
    let mask = salient_mask(g1, g2, fraction)?;
    let mut out = Vec::new();
    for subset in ["all", "salient", "nonsalient"] {
        let keep = |i: usize, j: usize| match subset {
            "all" => true,
            "salient" => mask[i][j],
            _ => !mask[i][j],
        };
        let (mut a, mut b) = (Vec::new(), Vec::new());
        let (mut js, mut js_rows) = (0.0, 0usize);
        for (i, row_mask) in mask.iter().enumerate() {
            let (ra, rb) = (g1.row(i), g2.row(i));
            let (mut pa, mut pb) = (Vec::new(), Vec::new());
            for j in 0..row_mask.len() {
                if keep(i, j) {
                    pa.push(ra[j]);
                    pb.push(rb[j]);
                }
            }
            if pa.iter().sum::<f64>() > 0.0 && pb.iter().sum::<f64>() > 0.0 {
                js += js_divergence(&pa, &pb)?;
                js_rows += 1;
            }
            a.extend(pa);
            b.extend(pb);
        }
        if a.is_empty() {
            continue;
        }
        if let (Ok(p), Ok(s)) = (pearson(&a, &b), spearman(&a, &b)) {
            out.push((subset.to_string(), "pearson", p));
            out.push((subset.to_string(), "spearman", s));
        }
        if let Ok(d) = cosine_distance(&a, &b) {
            out.push((subset.to_string(), "cosine_distance", d));
        }
        if js_rows > 0 {
            out.push((subset.to_string(), "js_divergence", js / js_rows as f64));
        }
    }
    Ok(out)
}

/// Direction and size of the adapter's change: `cos(O, delta)` and
/// `|delta| / |O|` with `delta = O - O'`.
pub fn dex_modification(base: &Tensor<f64>, adapted: &Tensor<f64>) -> Result<(f64, f64)> {
    let delta: Vec<f64> = base
        .data()
        .iter()
        .zip(adapted.data())
        .map(|(a, b)| a - b)
        .collect();
    let no = base.frobenius();
    let nd = delta.iter().map(|v| v * v).sum::<f64>().sqrt();
    if no == 0.0 {
        return Err(input_err("dex modification: zero head output"));
    }
    let cos = if nd == 0.0 { 0.0 } else { cosine_similarity(base.data(), &delta)? };
    Ok((cos, nd / no))
}

/// Concatenates a head's features over samples: `(samples * seq) x width`.
fn stack_rows(parts: &[&Tensor<f64>]) -> Result<Tensor<f64>> {
    let (_, w) = parts[0].dims2()?;
    let mut data = Vec::new();
    let mut rows = 0;
    for p in parts {
        let (r, c) = p.dims2()?;
        if c != w {
            return Err(input_err("feature widths differ"));
        }
        rows += r;
        data.extend_from_slice(p.data());
    }
    Ok(Tensor::new(&[rows, w], data)?)
}

/// Heads keyed `(layer, head)` with their per-sample traces in sample order.
pub fn group_by_head(traces: &[HeadTrace]) -> BTreeMap<(usize, usize), Vec<&HeadTrace>> {
    let mut m: BTreeMap<(usize, usize), Vec<&HeadTrace>> = BTreeMap::new();
    for t in traces {
        m.entry((t.layer, t.head)).or_default().push(t);
    }
    for v in m.values_mut() {
        v.sort_by_key(|t| t.sample);
    }
    m
}

/// Flattened visible entries of each head's maps over the batch. `maps`
/// chooses which matrix of a trace to use.
pub fn head_vectors<'a>(
    heads: &BTreeMap<(usize, usize), Vec<&'a HeadTrace>>,
    maps: impl Fn(&'a HeadTrace) -> Tensor<f64>,
) -> Vec<((usize, usize), Vec<f64>)> {
    heads
        .iter()
        .map(|(&k, ts)| (k, ts.iter().flat_map(|t| visible_entries(&maps(t))).collect()))
        .collect()
}

/// Pairwise distances of the given head vectors, recorded as a flat matrix
/// (`head` = row index, `subset` = `col=<j>`) plus per-layer and global
/// mean off-diagonal summaries.
pub fn head_distance_records(
    vectors: &[((usize, usize), Vec<f64>)],
    phase: &str,
    metric: &str,
) -> Result<Vec<MetricRecord>> {
    let vecs: Vec<Vec<f64>> = vectors.iter().map(|(_, v)| v.clone()).collect();
    let d = pairwise_head_distance(&vecs)?;
    let mut out = Vec::new();
    for (i, row) in d.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            out.push(
                MetricRecord::new(phase, metric, v)
                    .head(i)
                    .subset(format!("col={j}")),
            );
        }
    }
    let mut layers: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, ((l, _), _)) in vectors.iter().enumerate() {
        layers.entry(*l).or_default().push(i);
    }
    for (l, idx) in &layers {
        if idx.len() > 1 {
            out.push(
                MetricRecord::new(phase, &format!("{metric}_layer_mean"), mean_off_diagonal(&d, idx))
                    .layer(*l),
            );
        }
    }
    let all: Vec<usize> = (0..vecs.len()).collect();
    out.push(MetricRecord::new(
        phase,
        &format!("{metric}_mean"),
        mean_off_diagonal(&d, &all),
    ));
    Ok(out)
}

/// Mean pairwise cosine distance between all heads' maps.
pub fn mean_head_distance(traces: &[HeadTrace]) -> Result<f64> {
    let heads = group_by_head(traces);
    let vecs: Vec<Vec<f64>> = head_vectors(&heads, |t| t.scores.clone())
        .into_iter()
        .map(|(_, v)| v)
        .collect();
    let d = pairwise_head_distance(&vecs)?;
    Ok(mean_off_diagonal(&d, &(0..vecs.len()).collect::<Vec<_>>()))
}

/// Every trace-level metric for one model's traces.
pub fn analyze_traces(
    traces: &[HeadTrace],
    cfg: &AnalysisConfig,
    phase: &str,
) -> Result<Vec<MetricRecord>> {
    cfg.validate()?;
    if traces.is_empty() {
        return Err(input_err("no traces to analyze"));
    }
    let heads = group_by_head(traces);
    let mut out = Vec::new();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;

    for (&(l, h), ts) in &heads {
        let rec = |m: &str, v: f64| MetricRecord::new(phase, m, v).layer(l).head(h);
        for &eps in &cfg.eps {
            let s: Vec<f64> = ts
                .iter()
                .map(|t| sparsity_ratio(&t.scores, eps))
                .collect::<Result<_>>()?;
            out.push(rec("sparsity_ratio", mean(&s)).subset(format!("eps={eps:e}")));
        }
        let ent: Vec<f64> = ts
            .iter()
            .map(|t| mean_row_entropy(&t.scores, true))
            .collect::<Result<_>>()?;
        out.push(rec("entropy_abs", mean(&ent)));
        if ts[0].group_scores.is_some() {
            let mut e1 = Vec::new();
            let mut e2 = Vec::new();
            let mut cmp: BTreeMap<(String, &'static str), Vec<f64>> = BTreeMap::new();
            for t in ts {
                let (g1, g2) = t.group_scores.as_ref().expect("diff trace");
                e1.push(mean_row_entropy(g1, true)?);
                e2.push(mean_row_entropy(g2, true)?);
                for (subset, m, v) in group_comparison(g1, g2, cfg.salient_fraction)? {
                    cmp.entry((subset, m)).or_default().push(v);
                }
            }
            out.push(rec("entropy_group1", mean(&e1)));
            out.push(rec("entropy_group2", mean(&e2)));
            for ((subset, m), vs) in cmp {
                out.push(rec(&format!("group_{m}"), mean(&vs)).subset(subset));
            }
            out.push(rec("lambda", ts[0].lambda));
        }
        if ts[0].adapted {
            let mut cs = Vec::new();
            let mut rn = Vec::new();
            for t in ts {
                if let Ok((c, r)) = dex_modification(&t.base_output, &t.head_output) {
                    cs.push(c);
                    rn.push(r);
                }
            }
            if !cs.is_empty() {
                out.push(rec("dex_cosine", mean(&cs)));
                out.push(rec("dex_relative_norm", mean(&rn)));
            }
        }
    }

    let mut per_layer: BTreeMap<usize, Vec<&Tensor<f64>>> = BTreeMap::new();
    for t in traces {
        per_layer.entry(t.layer).or_default().push(&t.scores);
    }
    for (l, s) in per_layer {
        let n = negativity_stats(s)?;
        for (m, v) in [
            ("prop_pos", n.prop_pos),
            ("prop_neg", n.prop_neg),
            ("prop_zero", n.prop_zero),
            ("mean_mag_pos", n.mean_mag_pos),
            ("mean_mag_neg", n.mean_mag_neg),
        ] {
            out.push(MetricRecord::new(phase, m, v).layer(l));
        }
    }

    if heads.len() >= 2 {
        let vectors = head_vectors(&heads, |t| t.scores.clone());
        out.extend(head_distance_records(&vectors, phase, "head_cosine_distance")?);
        out.extend(cka_records(&heads, phase)?);
    }
    Ok(out)
}

/// Pairwise CKA between head output features, flat-matrix encoded like
/// [`head_distance_records`].
pub fn cka_records(
    heads: &BTreeMap<(usize, usize), Vec<&HeadTrace>>,
    phase: &str,
) -> Result<Vec<MetricRecord>> {
    let feats: Vec<((usize, usize), Tensor<f64>)> = heads
        .iter()
        .map(|(&k, ts)| {
            let parts: Vec<&Tensor<f64>> = ts.iter().map(|t| &t.head_output).collect();
            Ok((k, stack_rows(&parts)?))
        })
        .collect::<Result<_>>()?;
    let n = feats.len();
    let mut m = vec![vec![1.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let v = cka_linear(&feats[i].1, &feats[j].1).unwrap_or(0.0);
            m[i][j] = v;
            m[j][i] = v;
        }
    }
    let mut out = Vec::new();
    for (i, row) in m.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            out.push(MetricRecord::new(phase, "head_cka", v).head(i).subset(format!("col={j}")));
        }
    }
    let mut layers: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, ((l, _), _)) in feats.iter().enumerate() {
        layers.entry(*l).or_default().push(i);
    }
    for (l, idx) in &layers {
        if idx.len() > 1 {
            out.push(MetricRecord::new(phase, "head_cka_layer_mean", mean_off_diagonal(&m, idx)).layer(*l));
        }
    }
    Ok(out)
}

/// Correlation between the magnitudes of two models' layer-averaged maps on
/// the same inputs (e.g. `|diff signed scores|` against baseline softmax).
pub fn magnitude_correlation(
    a: &[HeadTrace],
    b: &[HeadTrace],
    phase: &str,
) -> Result<Vec<MetricRecord>> {
    let layer_maps = |ts: &[HeadTrace]| -> BTreeMap<(usize, usize), Vec<f64>> {
        let mut m: BTreeMap<(usize, usize), (Vec<f64>, usize)> = BTreeMap::new();
        for t in ts {
            let v: Vec<f64> = visible_entries(&t.scores).iter().map(|x| x.abs()).collect();
            let e = m.entry((t.layer, t.sample)).or_insert((vec![0.0; v.len()], 0));
            e.0.iter_mut().zip(&v).for_each(|(acc, x)| *acc += x);
            e.1 += 1;
        }
        m.into_iter()
            .map(|(k, (v, n))| (k, v.into_iter().map(|x| x / n as f64).collect()))
            .collect()
    };
    let (ma, mb) = (layer_maps(a), layer_maps(b));
    let mut per_layer: BTreeMap<usize, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for ((l, s), va) in &ma {
        let vb = mb
            .get(&(*l, *s))
            .ok_or_else(|| input_err(format!("layer {l} sample {s} missing in second model")))?;
        if va.len() != vb.len() {
            return Err(input_err("models traced on different sequence lengths"));
        }
        let e = per_layer.entry(*l).or_default();
        e.0.extend_from_slice(va);
        e.1.extend_from_slice(vb);
    }
    let mut out = Vec::new();
    for (l, (va, vb)) in per_layer {
        out.push(MetricRecord::new(phase, "magnitude_pearson", pearson(&va, &vb)?).layer(l));
        out.push(MetricRecord::new(phase, "magnitude_spearman", spearman(&va, &vb)?).layer(l));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b}");
    }

    #[test]
    fn correlation_examples() {
        let a = [1.0, 2.0, 3.0];
        close(pearson(&a, &a).unwrap(), 1.0, 1e-15);
        close(spearman(&a, &[1.0, 3.0, 2.0]).unwrap(), 0.5, 1e-15);
        close(spearman(&a, &[9.0, 4.0, -1.0]).unwrap(), -1.0, 1e-15);
        assert!(pearson(&a, &[2.0, 2.0, 2.0]).is_err());
        assert_eq!(average_ranks(&[5.0, 1.0, 5.0]), vec![2.5, 1.0, 2.5]);
    }

    #[test]
    fn js_examples() {
        close(js_divergence(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0, 1e-15);
        close(js_divergence(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), std::f64::consts::LN_2, 1e-12);
        let m = [0.75, 0.25];
        let want = 0.5 * (0.5 * (0.5f64 / 0.75).ln() + 0.5 * (0.5f64 / 0.25).ln())
            + 0.5 * (1.0f64 / 0.75).ln();
        close(js_divergence(&[0.5, 0.5], &[1.0, 0.0]).unwrap(), want, 1e-15);
        let _ = m;
        assert!(js_divergence(&[-0.1, 1.1], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn cosine_examples() {
        close(cosine_distance(&[1.0, 0.0], &[1.0, 1.0]).unwrap(), 1.0 - 0.5f64.sqrt(), 1e-15);
        close(cosine_distance(&[1.0, 0.0], &[0.0, 2.0]).unwrap(), 1.0, 1e-15);
        assert!(cosine_distance(&[0.0, 0.0], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn entropy_examples() {
        close(row_entropy(&[0.25; 4]).unwrap(), 4f64.ln(), 1e-15);
        close(row_entropy(&[0.0, 1.0, 0.0]).unwrap(), 0.0, 0.0);
        let want = -(0.6f64 * 0.6f64.ln() + 2.0 * 0.2 * 0.2f64.ln());
        close(row_entropy(&[0.6, -0.2, 0.2]).unwrap(), want, 1e-15);
        close(want, 0.9503, 1e-4);
        assert!(row_entropy(&[0.0, 0.0]).is_err());
    }

    #[test]
    fn sparsity_identity_attention() {
        let s = Tensor::<f64>::eye(4);
        close(sparsity_ratio(&s, 1e-4).unwrap(), 0.6, 1e-15);
        let full = Tensor::<f64>::full(&[3, 3], 0.5);
        close(sparsity_ratio(&full, 1e-4).unwrap(), 0.0, 0.0);
    }

    #[test]
    fn negativity_counting() {
        let s = Tensor::from_rows(&[vec![-1.0, 9.0], vec![1.0, 0.0]]).unwrap();
        let n = negativity_stats([&s]).unwrap();
        close(n.prop_neg, 1.0 / 3.0, 1e-15);
        close(n.prop_pos, 1.0 / 3.0, 1e-15);
        close(n.prop_zero, 1.0 / 3.0, 1e-15);
        close(n.mean_mag_neg, 1.0, 0.0);
    }

    #[test]
    fn importance_curve() {
        let d = importance_distribution(&[vec![1.0, 4.0, 2.0]]).unwrap();
        assert_eq!(d[0], vec![1.0, 0.5, 0.25]);
        assert!(importance_distribution(&[vec![0.0, 0.0]]).is_err());
    }

    #[test]
    fn cka_identities() {
        let x = Tensor::from_rows(&[
            vec![1.0, 2.0],
            vec![0.5, -1.0],
            vec![3.0, 0.0],
            vec![-2.0, 1.5],
        ])
        .unwrap();
        close(cka_linear(&x, &x).unwrap(), 1.0, 1e-12);
        close(cka_linear(&x, &x.map(|v| 3.0 * v)).unwrap(), 1.0, 1e-12);
        let (c, s) = (0.6, 0.8);
        let r = Tensor::from_rows(&[vec![c, -s], vec![s, c]]).unwrap();
        let xr = dexlab_numcore::ops::matmul(&x, &r).unwrap();
        close(cka_linear(&x, &xr).unwrap(), 1.0, 1e-12);
    }

    #[test]
    fn salient_partition() {
        let g1 = Tensor::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.2, 0.8, 0.0], vec![0.1, 0.3, 0.6]]).unwrap();
        let m = salient_mask(&g1, &g1, 0.34).unwrap();
        assert_eq!(m[2], vec![false, true, true]);
        let cmp = group_comparison(&g1, &g1, 0.34).unwrap();
        for (_, metric, v) in cmp {
            match metric {
                "pearson" | "spearman" => close(v, 1.0, 1e-12),
                _ => close(v, 0.0, 1e-12),
            }
        }
    }
}
