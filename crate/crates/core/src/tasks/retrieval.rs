//! Synthetic key-value retrieval: needles `KEY SEP VALUE` hidden in filler,
//! followed by queries `QUERY KEY SEP` whose answer is the needle's value.

use std::io::Write;
use std::path::Path;

use dexlab_numcore::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetrievalTaskConfig {
    /// Needles placed in each context.
    pub n_needles: usize,
    /// Needles queried after the context.
    pub n_queries: usize,
    /// Depth of the first queried needle as a fraction of the context.
    pub depths: Vec<f64>,
    /// Full sequence lengths, including the query suffix.
    pub context_lengths: Vec<usize>,
    pub samples_per_cell: usize,
    pub key_base: u32,
    pub value_base: u32,
    pub alphabet: u32,
    pub sep: u32,
    pub query: u32,
    pub seed: u64,
}

impl Default for RetrievalTaskConfig {
    fn default() -> Self {
        Self {
            n_needles: 8,
            n_queries: 1,
            depths: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            context_lengths: vec![128, 256],
            samples_per_cell: 20,
            key_base: 128,
            value_base: 160,
            alphabet: 26,
            sep: 200,
            query: 201,
            seed: 0,
        }
    }
}

/// Filler tokens are ids below this bound.
pub const FILLER_LIMIT: u32 = 128;

impl RetrievalTaskConfig {
    pub fn validate(&self, vocab: usize) -> Result<()> {
        let k = self.key_base..self.key_base + self.alphabet;
        let v = self.value_base..self.value_base + self.alphabet;
        let overlaps = |a: &std::ops::Range<u32>, b: &std::ops::Range<u32>| {
            a.start < b.end && b.start < a.end
        };
        let filler = 0..FILLER_LIMIT;
        let sep = self.sep..self.sep + 1;
        let qm = self.query..self.query + 1;
        let ranges = [&filler, &k, &v, &sep, &qm];
        for i in 0..ranges.len() {
            for j in i + 1..ranges.len() {
                if overlaps(ranges[i], ranges[j]) {
                    return Err(config_err("retrieval token ranges overlap"));
                }
            }
        }
        if [k.end, v.end, sep.end, qm.end].iter().any(|&e| e as usize > vocab) {
            return Err(config_err(format!("retrieval token ids exceed vocab {vocab}")));
        }
        if self.alphabet == 0 || self.n_needles == 0 || self.n_needles > self.alphabet as usize {
            return Err(config_err(format!(
                "n_needles must be in 1..={} (distinct keys)",
                self.alphabet
            )));
        }
        if self.n_queries == 0 || self.n_queries > self.n_needles {
            return Err(config_err("n_queries must be in 1..=n_needles"));
        }
        if self.depths.iter().any(|d| !(0.0..=1.0).contains(d)) {
            return Err(config_err("depths must lie in [0, 1]"));
        }
        for &len in &self.context_lengths {
            self.context_len(len)?;
        }
        Ok(())
    }

    pub fn min_length(&self) -> usize {
        3 * self.n_needles + 4 * self.n_queries
    }

    fn context_len(&self, length: usize) -> Result<usize> {
        if length < self.min_length() {
            return Err(config_err(format!(
                "length {length} cannot hold {} needles and {} queries; minimum length is {}",
                self.n_needles,
                self.n_queries,
                self.min_length()
            )));
        }
        Ok(length - 4 * self.n_queries)
    }

    pub fn is_value(&self, t: u32) -> bool {
        (self.value_base..self.value_base + self.alphabet).contains(&t)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    pub key: u32,
    /// Position of the needle's key token in the context.
    pub needle_pos: usize,
    /// Position of the needle's value token; the answer span is this one token.
    pub answer_pos: usize,
    pub target: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalSample {
    /// Context followed by every query with its answer.
    pub tokens: Vec<u32>,
    pub context_len: usize,
    pub queries: Vec<Query>,
    pub depth: f64,
    pub length: usize,
}

impl RetrievalSample {
    /// Context plus the first `i` answered queries and the `i`-th query's
    /// `QUERY KEY SEP` prefix.
    pub fn prompt(&self, i: usize) -> &[u32] {
        &self.tokens[..self.context_len + 4 * i + 3]
    }

    pub fn answer_span(&self, i: usize) -> (usize, usize) {
        let p = self.queries[i].answer_pos;
        (p, p + 1)
    }
}

/// Random `k` sorted positions for `n` three-token pairs in a region of
/// `len` slots (a uniform composition of the leftover filler into gaps).
fn place_pairs(rng: &mut Rng, len: usize, n: usize) -> Vec<usize> {
    let slots = len - 2 * n;
    let mut picks: Vec<usize> = (0..slots).collect();
    rng.shuffle(&mut picks);
    let mut s: Vec<usize> = picks.into_iter().take(n).collect();
    s.sort_unstable();
    s.iter().enumerate().map(|(i, &p)| p + 2 * i).collect()
}

/// One sample with the first queried needle at `depth` of the context.
pub fn gen_sample(
    cfg: &RetrievalTaskConfig,
    rng: &mut Rng,
    depth: f64,
    length: usize,
    haystack: Option<&[u8]>,
) -> Result<RetrievalSample> {
    let c = cfg.context_len(length)?;
    let n = cfg.n_needles;
    let p = (depth * (c - 3) as f64).round() as usize;
    let lo = (n - 1).saturating_sub((c - p - 3) / 3);
    let hi = (n - 1).min(p / 3);
    if lo > hi {
        return Err(config_err(format!(
            "cannot pack {n} needles around depth {depth} in length {length}; minimum length is {}",
            cfg.min_length() + 6
        )));
    }
    let n_before = (((n - 1) as f64 * depth).round() as usize).clamp(lo, hi);
    let n_after = n - 1 - n_before;
    let mut starts = place_pairs(rng, p, n_before);
    starts.push(p);
    starts.extend(place_pairs(rng, c - p - 3, n_after).into_iter().map(|s| s + p + 3));

    let mut keys: Vec<u32> = (0..cfg.alphabet).map(|i| cfg.key_base + i).collect();
    rng.shuffle(&mut keys);
    let values: Vec<u32> = (0..n)
        .map(|_| cfg.value_base + rng.below(cfg.alphabet as usize) as u32)
        .collect();

    let mut tokens = vec![u32::MAX; c];
    for (i, &s) in starts.iter().enumerate() {
        tokens[s] = keys[i];
        tokens[s + 1] = cfg.sep;
        tokens[s + 2] = values[i];
    }
    let filler_needed = c - 3 * n;
    let mut filler = Vec::with_capacity(filler_needed);
    match haystack.filter(|h| !h.is_empty()) {
        Some(h) => {
            let mut at = rng.below(h.len());
            while filler.len() < filler_needed {
                let b = h[at % h.len()];
                filler.push(if (b as u32) < FILLER_LIMIT { b as u32 } else { b' ' as u32 });
                at += 1;
            }
        }
        None => {
            for _ in 0..filler_needed {
                filler.push(rng.below(FILLER_LIMIT as usize) as u32);
            }
        }
    }
    let mut fi = filler.into_iter();
    for t in tokens.iter_mut().filter(|t| **t == u32::MAX) {
        *t = fi.next().expect("filler count matches free slots");
    }

    let mut order: Vec<usize> = (0..n).filter(|&i| i != n_before).collect();
    rng.shuffle(&mut order);
    let queried = std::iter::once(n_before).chain(order.into_iter().take(cfg.n_queries - 1));
    let mut queries = Vec::with_capacity(cfg.n_queries);
    for i in queried {
        queries.push(Query {
            key: keys[i],
            needle_pos: starts[i],
            answer_pos: starts[i] + 2,
            target: values[i],
        });
    }
    for q in &queries {
        tokens.extend_from_slice(&[cfg.query, q.key, cfg.sep, q.target]);
    }
    Ok(RetrievalSample {
        tokens,
        context_len: c,
        queries,
        depth,
        length,
    })
}

/// `samples_per_cell` samples for every (length, depth) cell, deterministic
/// in the config seed.
pub fn gen_retrieval(
    cfg: &RetrievalTaskConfig,
    haystack: Option<&[u8]>,
) -> Result<Vec<RetrievalSample>> {
    cfg.validate(usize::MAX)?;
    let mut rng = Rng::for_purpose(cfg.seed, "retrieval.eval");
    let mut out = Vec::new();
    for &len in &cfg.context_lengths {
        for &d in &cfg.depths {
            for _ in 0..cfg.samples_per_cell {
                out.push(gen_sample(cfg, &mut rng, d, len, haystack)?);
            }
        }
    }
    Ok(out)
}

pub fn export_jsonl(samples: &[RetrievalSample], path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    for s in samples {
        serde_json::to_writer(&mut buf, s).map_err(|e| crate::error::input_err(e.to_string()))?;
        buf.push(b'\n');
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> RetrievalTaskConfig {
        RetrievalTaskConfig {
            samples_per_cell: 3,
            ..Default::default()
        }
    }

    #[test]
    fn structure_scan() {
        let c = cfg();
        let samples = gen_retrieval(&c, None).unwrap();
        assert_eq!(samples.len(), 2 * 5 * 3);
        for s in &samples {
            assert_eq!(s.tokens.len(), s.length);
            let ctx = &s.tokens[..s.context_len];
            let keys = ctx.iter().filter(|&&t| (128..154).contains(&t)).count();
            let seps = ctx.iter().filter(|&&t| t == c.sep).count();
            assert_eq!((keys, seps), (8, 8));
            assert_eq!(s.queries.len(), 1);
            let q = &s.queries[0];
            assert_eq!(ctx[q.needle_pos], q.key);
            assert_eq!(ctx[q.answer_pos], q.target);
            assert!(c.is_value(q.target));
            assert!(q.answer_pos < s.context_len);
        }
    }

    #[test]
    fn boundary_depths() {
        let c = cfg();
        let mut rng = Rng::for_purpose(1, "t");
        for _ in 0..10 {
            let s = gen_sample(&c, &mut rng, 0.0, 128, None).unwrap();
            assert_eq!(s.queries[0].needle_pos, 0);
            let s = gen_sample(&c, &mut rng, 1.0, 128, None).unwrap();
            assert_eq!(s.queries[0].answer_pos, s.context_len - 1);
        }
    }

    #[test]
    fn deterministic() {
        let c = cfg();
        assert_eq!(gen_retrieval(&c, None).unwrap(), gen_retrieval(&c, None).unwrap());
    }

    #[test]
    fn infeasible_length_names_minimum() {
        let c = RetrievalTaskConfig {
            context_lengths: vec![20],
            ..cfg()
        };
        let e = gen_retrieval(&c, None).unwrap_err().to_string();
        assert!(e.contains("minimum length is 28"), "{e}");
    }

    #[test]
    fn haystack_filler_is_ascii() {
        let c = cfg();
        let mut rng = Rng::for_purpose(2, "t");
        let hay = "héllo wörld ".repeat(10);
        let s = gen_sample(&c, &mut rng, 0.5, 128, Some(hay.as_bytes())).unwrap();
        let ctx = &s.tokens[..s.context_len];
        let filler = ctx.iter().filter(|&&t| t < FILLER_LIMIT).count();
        assert_eq!(filler, s.context_len - 24);
    }
}
