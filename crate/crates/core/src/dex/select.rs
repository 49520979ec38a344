use dexlab_numcore::Scalar;
use sha2::{Digest, Sha256};

use super::{HeadSelection, Strategy};
use crate::error::{config_err, input_err, Result};
use crate::model::{Arch, Batch, ForwardOptions, TransformerModel};

/// Hex digest of the token ids of a calibration set.
pub fn calibration_fingerprint(batches: &[Batch]) -> String {
    let mut h = Sha256::new();
    for b in batches {
        h.update((b.batch as u64).to_le_bytes());
        h.update((b.seq as u64).to_le_bytes());
        for &t in &b.tokens {
            h.update((t as u32).to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// First-order Taylor importance `|sum(O * dL/dO)|` of every head, averaged
/// over samples. The batch loss is a mean, so each sample's term is rescaled
/// by the batch size to recover the per-sample loss gradient.
pub fn head_importance<T: Scalar>(
    model: &TransformerModel<T>,
    batches: &[Batch],
) -> Result<Vec<Vec<f64>>> {
    if batches.is_empty() {
        return Err(input_err("head importance needs at least one calibration batch"));
    }
    let mut probe = model.clone();
    probe.set_all_trainable(true);
    let lay = model.config.layout();
    let n_layers = model.config.n_layers;
    let mut acc = vec![vec![0.0f64; lay.heads]; n_layers];
    let mut samples = 0usize;
    let opts = ForwardOptions {
        grad: true,
        retain_head_outputs: true,
        ..Default::default()
    };
    for batch in batches {
        let f = probe.forward(batch, &opts)?;
        let loss = f
            .loss
            .as_ref()
            .ok_or_else(|| input_err("calibration sequences need at least two tokens"))?;
        loss.backward()?;
        let bsz = batch.batch;
        for (idx, o) in f.head_outputs.iter().enumerate() {
            let h = idx % lay.heads;
            let l = idx / (lay.heads * bsz);
            let Some(g) = o.grad() else { continue };
            let dot: f64 = o
                .value()
                .data()
                .iter()
                .zip(&g)
                .map(|(&a, &b)| a.f64() * b.f64())
                .sum();
            acc[l][h] += (dot * bsz as f64).abs();
        }
        samples += bsz;
    }
    for row in &mut acc {
        row.iter_mut().for_each(|v| *v /= samples as f64);
    }
    Ok(acc)
}

/// Mean Shannon entropy (nats) of each head's attention rows.
pub fn head_entropy<T: Scalar>(
    model: &TransformerModel<T>,
    batches: &[Batch],
) -> Result<Vec<Vec<f64>>> {
    if model.config.arch == Arch::Diff {
        return Err(config_err("head entropy is defined on softmax heads only"));
    }
    if batches.is_empty() {
        return Err(input_err("head entropy needs at least one calibration batch"));
    }
    let lay = model.config.layout();
    let mut acc = vec![vec![0.0f64; lay.heads]; model.config.n_layers];
    let mut samples = 0usize;
    let opts = ForwardOptions {
        trace: true,
        no_loss: true,
        ..Default::default()
    };
    for batch in batches {
        let f = model.forward(batch, &opts)?;
        for t in &f.traces {
            acc[t.layer][t.head] += crate::analysis::mean_row_entropy(&t.scores, true)?;
        }
        samples += batch.batch;
    }
    for row in &mut acc {
        row.iter_mut().for_each(|v| *v /= samples as f64);
    }
    Ok(acc)
}

/// Picks `k` heads per layer from the low or high end of the scores; ties
/// go to the lower head index.
pub fn select_heads(scores: &[Vec<f64>], strategy: Strategy, k: usize) -> Result<HeadSelection> {
    let mut layers = Vec::with_capacity(scores.len());
    for (l, row) in scores.iter().enumerate() {
        let heads = row.len();
        if k == 0 || k > heads {
            return Err(config_err(format!("k = {k} must be in 1..={heads}")));
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(input_err(format!("layer {l}: non-finite head score")));
        }
        let mut idx: Vec<usize> = (0..heads).collect();
        let mut chosen: Vec<usize> = match strategy {
            Strategy::All => idx,
            Strategy::FirstK => idx.into_iter().take(k).collect(),
            Strategy::ImportanceLow | Strategy::EntropyLow => {
                idx.sort_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
                idx.into_iter().take(k).collect()
            }
            Strategy::EntropyHigh => {
                idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
                idx.into_iter().take(k).collect()
            }
        };
        chosen.sort_unstable();
        layers.push(chosen);
    }
    Ok(HeadSelection {
        layers,
        strategy,
        fingerprint: String::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sort_oracle() {
        let s = select_heads(&[vec![3.0, 1.0, 2.0, 0.0]], Strategy::ImportanceLow, 2).unwrap();
        assert_eq!(s.layers[0], vec![1, 3]);
        let s = select_heads(&[vec![3.0, 1.0, 2.0, 0.0]], Strategy::EntropyHigh, 2).unwrap();
        assert_eq!(s.layers[0], vec![0, 2]);
    }

    #[test]
    fn ties_prefer_low_index() {
        for st in [Strategy::ImportanceLow, Strategy::EntropyHigh, Strategy::EntropyLow] {
            let s = select_heads(&[vec![1.0; 4]], st, 2).unwrap();
            assert_eq!(s.layers[0], vec![0, 1]);
        }
    }

    #[test]
    fn all_ignores_scores() {
        let s = select_heads(&[vec![5.0, -1.0, 2.0]], Strategy::All, 1).unwrap();
        assert_eq!(s.layers[0], vec![0, 1, 2]);
    }

    #[test]
    fn k_bounds() {
        assert!(select_heads(&[vec![1.0; 4]], Strategy::ImportanceLow, 5).is_err());
        assert!(select_heads(&[vec![1.0; 4]], Strategy::ImportanceLow, 0).is_err());
    }
}
