use std::collections::BTreeMap;

use dexlab_numcore::linalg::matmul_f64;
use dexlab_numcore::{Scalar, Tensor};
use serde::Serialize;

use super::retrieval::{RetrievalSample, RetrievalTaskConfig};
use crate::dex::HeadSelection;
use crate::effattn::{effective_projector, effective_scores_optim, Method, DEFAULT_ITERS, DEFAULT_LR, DEFAULT_RCOND};
use crate::error::{input_err, Result};
use crate::metrics::MetricRecord;
use crate::model::{Batch, ForwardOptions, HeadTrace, TransformerModel};

/// Anything that scores the next token after a prompt.
pub trait LanguageModel {
    fn vocab_size(&self) -> usize;
    /// Next-token logits after each prompt. Prompts may differ in length.
    fn last_logits(&self, prompts: &[&[u32]]) -> Result<Vec<Vec<f64>>>;
}

impl<T: Scalar> LanguageModel for TransformerModel<T> {
    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn last_logits(&self, prompts: &[&[u32]]) -> Result<Vec<Vec<f64>>> {
        let mut by_len: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, p) in prompts.iter().enumerate() {
            if p.is_empty() {
                return Err(input_err("empty prompt"));
            }
            by_len.entry(p.len()).or_default().push(i);
        }
        let mut out = vec![Vec::new(); prompts.len()];
        let opts = ForwardOptions {
            no_loss: true,
            ..Default::default()
        };
        for idx in by_len.values() {
            let rows: Vec<Vec<usize>> = idx
                .iter()
                .map(|&i| prompts[i].iter().map(|&t| t as usize).collect())
                .collect();
            let batch = Batch::from_rows(&rows)?;
            let f = self.forward(&batch, &opts)?;
            for (&i, row) in idx.iter().zip(f.last_logits(&batch)) {
                out[i] = row.into_iter().map(|x| x.f64()).collect();
            }
        }
        Ok(out)
    }
}

/// `exp` of the mean next-token cross entropy over `data`, cut into
/// consecutive windows of at most `seq` tokens.
pub fn eval_perplexity<T: Scalar>(
    model: &TransformerModel<T>,
    data: &[u8],
    seq: usize,
    batch_size: usize,
) -> Result<f64> {
    if data.len() < 2 {
        return Err(input_err("perplexity needs at least two tokens"));
    }
    if seq < 2 || batch_size == 0 {
        return Err(input_err("perplexity needs seq >= 2 and batch_size >= 1"));
    }
    let mut windows: Vec<&[u8]> = data.chunks(seq).collect();
    if windows.last().is_some_and(|w| w.len() < 2) {
        windows.pop();
    }
    let mut total = 0.0;
    let mut count = 0usize;
    let mut i = 0;
    while i < windows.len() {
        let len = windows[i].len();
        let mut rows = Vec::new();
        while i < windows.len() && windows[i].len() == len && rows.len() < batch_size {
            rows.push(windows[i].iter().map(|&b| b as usize).collect::<Vec<_>>());
            i += 1;
        }
        let n = rows.len() * (len - 1);
        total += model.loss(&Batch::from_rows(&rows)?)? * n as f64;
        count += n;
    }
    Ok((total / count as f64).exp())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RetrievalReport {
    pub depths: Vec<f64>,
    pub lengths: Vec<usize>,
    /// `accuracy[depth][length]`.
    pub accuracy: Vec<Vec<f64>>,
    pub mean: f64,
}

impl RetrievalReport {
    pub fn records(&self, phase: &str) -> Vec<MetricRecord> {
        let mut out = Vec::new();
        for (di, d) in self.depths.iter().enumerate() {
            for (li, l) in self.lengths.iter().enumerate() {
                out.push(
                    MetricRecord::new(phase, "retrieval_accuracy", self.accuracy[di][li])
                        .subset(format!("depth={d},length={l}")),
                );
            }
        }
        out.push(MetricRecord::new(phase, "retrieval_accuracy_mean", self.mean));
        out
    }
}

fn cell_index(values: &[f64], v: f64) -> usize {
    values.iter().position(|&x| x == v).expect("label present")
}

fn labels(samples: &[RetrievalSample]) -> (Vec<f64>, Vec<usize>) {
    let mut depths: Vec<f64> = Vec::new();
    let mut lengths: Vec<usize> = Vec::new();
    for s in samples {
        if !depths.contains(&s.depth) {
            depths.push(s.depth);
        }
        if !lengths.contains(&s.length) {
            lengths.push(s.length);
        }
    }
    depths.sort_by(f64::total_cmp);
    lengths.sort_unstable();
    (depths, lengths)
}

/// Greedy decoding of every queried value, restricted to the value
/// alphabet. Queries are answered in order, each seeing the earlier
/// queries with their true answers.
pub fn eval_retrieval<M: LanguageModel + ?Sized>(
    model: &M,
    task: &RetrievalTaskConfig,
    samples: &[RetrievalSample],
) -> Result<RetrievalReport> {
    if samples.is_empty() {
        return Err(input_err("no retrieval samples"));
    }
    task.validate(model.vocab_size())?;
    let (depths, lengths) = labels(samples);
    let mut hits = vec![vec![0usize; lengths.len()]; depths.len()];
    let mut totals = vec![vec![0usize; lengths.len()]; depths.len()];
    let r = samples.iter().map(|s| s.queries.len()).max().unwrap_or(0);
    let lo = task.value_base as usize;
    let hi = lo + task.alphabet as usize;
    for qi in 0..r {
        let active: Vec<&RetrievalSample> = samples.iter().filter(|s| qi < s.queries.len()).collect();
        for chunk in active.chunks(16) {
            let prompts: Vec<&[u32]> = chunk.iter().map(|s| s.prompt(qi)).collect();
            let logits = model.last_logits(&prompts)?;
            for (s, row) in chunk.iter().zip(logits) {
                let mut best = lo;
                for t in lo..hi {
                    if row[t] > row[best] {
                        best = t;
                    }
                }
                let (di, li) = (cell_index(&depths, s.depth), lengths.iter().position(|&l| l == s.length).expect("label"));
                totals[di][li] += 1;
                if best as u32 == s.queries[qi].target {
                    hits[di][li] += 1;
                }
            }
        }
    }
    let accuracy: Vec<Vec<f64>> = hits
        .iter()
        .zip(&totals)
        .map(|(h, t)| h.iter().zip(t).map(|(&h, &t)| h as f64 / t.max(1) as f64).collect())
        .collect();
    let mean = hits.iter().flatten().sum::<usize>() as f64 / totals.iter().flatten().sum::<usize>() as f64;
    Ok(RetrievalReport {
        depths,
        lengths,
        accuracy,
        mean,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnswerAttention {
    pub depths: Vec<f64>,
    pub per_depth: Vec<f64>,
    pub mean: f64,
}

impl AnswerAttention {
    pub fn records(&self, phase: &str) -> Vec<MetricRecord> {
        let mut out: Vec<MetricRecord> = self
            .depths
            .iter()
            .zip(&self.per_depth)
            .map(|(d, v)| MetricRecord::new(phase, "attention_to_answer", *v).subset(format!("depth={d}")))
            .collect();
        out.push(MetricRecord::new(phase, "attention_to_answer_mean", self.mean));
        out
    }
}

/// `|row[span]| / |row[..visible]|` with absolute values.
pub fn answer_ratio(row: &[f64], span: (usize, usize), visible: usize) -> Result<f64> {
    if span.0 >= span.1 || span.1 > visible || visible > row.len() {
        return Err(input_err(format!(
            "answer span {:?} empty or outside {visible} visible keys",
            span
        )));
    }
    let total: f64 = row[..visible].iter().map(|x| x.abs()).sum();
    let ans: f64 = row[span.0..span.1].iter().map(|x| x.abs()).sum();
    Ok(if total > 0.0 { ans / total } else { 0.0 })
}

/// Final query row of a head, reconstructed through the adapter when the
/// head is adapted.
fn head_row(t: &HeadTrace, w_d: Option<&Tensor<f64>>, method: Method) -> Result<Vec<f64>> {
    let (n, _) = t.scores.dims2()?;
    let last = t.scores.row(n - 1).to_vec();
    let Some(w_d) = w_d.filter(|_| t.adapted) else {
        return Ok(last);
    };
    match method {
        Method::Pinv => {
            let p = effective_projector(&t.values, w_d, t.lambda, DEFAULT_RCOND)?;
            let a = Tensor::new(&[1, n], last)?;
            Ok(matmul_f64(&a, &p)?.data().to_vec())
        }
        Method::Optim => {
            let r = effective_scores_optim(&t.scores, &t.values, w_d, t.lambda, DEFAULT_ITERS, DEFAULT_LR)?;
            Ok(r.x.row(n - 1).to_vec())
        }
    }
}

/// Share of the final query row's absolute attention mass that lands on
/// the first query's answer token, averaged over heads, layers and samples.
/// `heads` overrides which heads are measured; by default the adapter's
/// selection, or every head without an adapter.
pub fn attention_to_answer<T: Scalar>(
    model: &TransformerModel<T>,
    samples: &[RetrievalSample],
    method: Method,
    heads: Option<&HeadSelection>,
) -> Result<AnswerAttention> {
    if samples.is_empty() {
        return Err(input_err("no retrieval samples"));
    }
    let lay = model.config.layout();
    let all = HeadSelection::first_k(model.config.n_layers, lay.heads);
    let sel = heads
        .or(model.adapter.as_ref().map(|a| &a.selection))
        .unwrap_or(&all);
    sel.validate(model.config.n_layers, lay.heads)?;
    let w_d: BTreeMap<String, Tensor<f64>> = match &model.adapter {
        Some(a) => {
            let mut m = BTreeMap::new();
            for (l, hs) in a.selection.layers.iter().enumerate() {
                for &h in hs {
                    let name = a.w_d_name(l, h);
                    m.insert(name.clone(), model.param(&name)?.cast());
                }
            }
            m
        }
        None => BTreeMap::new(),
    };
    let (depths, _) = labels(samples);
    let mut sums = vec![0.0; depths.len()];
    let mut counts = vec![0usize; depths.len()];
    let opts = ForwardOptions {
        trace: true,
        no_loss: true,
        ..Default::default()
    };
    for s in samples {
        let prompt: Vec<usize> = s.prompt(0).iter().map(|&t| t as usize).collect();
        let visible = prompt.len();
        let f = model.forward(&Batch::from_rows(&[prompt])?, &opts)?;
        let span = s.answer_span(0);
        let mut acc = 0.0;
        let mut n = 0usize;
        for t in f.traces.iter().filter(|t| sel.contains(t.layer, t.head)) {
            let wd = model.adapter.as_ref().and_then(|a| w_d.get(&a.w_d_name(t.layer, t.head)));
            let row = head_row(t, wd, method)?;
            acc += answer_ratio(&row, span, visible)?;
            n += 1;
        }
        if n > 0 {
            let di = cell_index(&depths, s.depth);
            sums[di] += acc / n as f64;
            counts[di] += 1;
        }
    }
    let per_depth: Vec<f64> = sums.iter().zip(&counts).map(|(s, &c)| s / c.max(1) as f64).collect();
    let mean = sums.iter().sum::<f64>() / counts.iter().sum::<usize>().max(1) as f64;
    Ok(AnswerAttention {
        depths,
        per_depth,
        mean,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::retrieval::gen_retrieval;

    /// Looks up the queried key in the prompt and returns its value.
    struct CopyOracle;

    impl LanguageModel for CopyOracle {
        fn vocab_size(&self) -> usize {
            256
        }

        fn last_logits(&self, prompts: &[&[u32]]) -> Result<Vec<Vec<f64>>> {
            Ok(prompts
                .iter()
                .map(|p| {
                    let key = p[p.len() - 2];
                    let pos = p.iter().position(|&t| t == key).unwrap();
                    let mut row = vec![0.0; 256];
                    row[p[pos + 2] as usize] = 1.0;
                    row
                })
                .collect())
        }
    }

    struct RandomLogits(std::cell::RefCell<dexlab_numcore::Rng>);

    impl LanguageModel for RandomLogits {
        fn vocab_size(&self) -> usize {
            256
        }

        fn last_logits(&self, prompts: &[&[u32]]) -> Result<Vec<Vec<f64>>> {
            let mut r = self.0.borrow_mut();
            Ok(prompts.iter().map(|_| (0..256).map(|_| r.normal()).collect()).collect())
        }
    }

    #[test]
    fn oracle_scores_full_marks() {
        let task = RetrievalTaskConfig {
            n_queries: 3,
            ..Default::default()
        };
        let s = gen_retrieval(&task, None).unwrap();
        let rep = eval_retrieval(&CopyOracle, &task, &s).unwrap();
        assert_eq!(rep.accuracy.len(), 5);
        assert_eq!(rep.accuracy[0].len(), 2);
        assert!(rep.accuracy.iter().flatten().all(|&a| a == 1.0));
        assert_eq!(rep.mean, 1.0);
    }

    #[test]
    fn random_logits_near_chance() {
        let task = RetrievalTaskConfig::default();
        let s = gen_retrieval(&task, None).unwrap();
        let m = RandomLogits(std::cell::RefCell::new(dexlab_numcore::Rng::for_purpose(3, "t")));
        let rep = eval_retrieval(&m, &task, &s).unwrap();
        // 200 draws at p = 1/26: 95% interval roughly [0.012, 0.065].
        let p: f64 = 1.0 / 26.0;
        let half = 1.96 * (p * (1.0 - p) / 200.0).sqrt();
        assert!((rep.mean - p).abs() <= half + 0.5 / 200.0, "{}", rep.mean);
    }

    #[test]
    fn order_invariant() {
        let task = RetrievalTaskConfig::default();
        let mut s = gen_retrieval(&task, None).unwrap();
        let model = TransformerModel::<f32>::init(
            crate::model::ModelConfig {
                n_layers: 1,
                d_model: 16,
                n_heads: 2,
                n_kv_heads: 2,
                d_head: 8,
                d_ff: 32,
                ..Default::default()
            },
            0,
        )
        .unwrap();
        let s_small: Vec<_> = s.iter().step_by(10).cloned().collect();
        let a = eval_retrieval(&model, &task, &s_small).unwrap();
        s.reverse();
        let s_small_rev: Vec<_> = s_small.iter().rev().cloned().collect();
        let b = eval_retrieval(&model, &task, &s_small_rev).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn ratio_boundaries() {
        let mut row = vec![0.0; 10];
        row[3] = 0.7;
        assert_eq!(answer_ratio(&row, (3, 4), 10).unwrap(), 1.0);
        let u = vec![0.01; 100];
        assert!((answer_ratio(&u, (10, 12), 100).unwrap() - 0.02).abs() < 1e-12);
        assert!(answer_ratio(&u, (5, 5), 100).is_err());
    }

    #[test]
    fn uniform_model_perplexity_near_vocab() {
        let mut model = TransformerModel::<f32>::init(
            crate::model::ModelConfig {
                n_layers: 1,
                d_model: 16,
                n_heads: 2,
                n_kv_heads: 2,
                d_head: 8,
                d_ff: 32,
                ..Default::default()
            },
            0,
        )
        .unwrap();
        for v in model.param_mut("lm_head").unwrap().data_mut() {
            *v = 0.0;
        }
        let data: Vec<u8> = (0..300).map(|i| (i * 7 % 256) as u8).collect();
        let ppl = eval_perplexity(&model, &data, 64, 4).unwrap();
        assert!((ppl - 256.0).abs() / 256.0 < 0.05, "{ppl}");
    }
}
