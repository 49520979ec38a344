use std::collections::BTreeMap;
use std::rc::Rc;

use dexlab_numcore::{Mask, RopeTable, Scalar, Tensor, Var};

use super::{layer_name, Arch, Batch, TransformerModel};
use crate::dex::{apply_dex, DexAdapter};
use crate::error::{input_err, Result};

#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardOptions {
    /// Record the tape for trainable parameters.
    pub grad: bool,
    /// Capture per-head attention maps, values and outputs.
    pub trace: bool,
    /// Keep gradients of the pre-adapter head outputs after `backward`.
    pub retain_head_outputs: bool,
    /// Skip the loss even when the sequence allows one.
    pub no_loss: bool,
}

/// One head of one sample in one layer, in f64.
#[derive(Debug, Clone)]
pub struct HeadTrace {
    pub sample: usize,
    pub layer: usize,
    pub head: usize,
    /// Softmax map, or the signed difference map for diff heads.
    pub scores: Tensor<f64>,
    /// The two softmax maps of a diff head.
    pub group_scores: Option<(Tensor<f64>, Tensor<f64>)>,
    pub values: Tensor<f64>,
    /// Head output before the adapter.
    pub base_output: Tensor<f64>,
    /// Head output as passed to the output projection.
    pub head_output: Tensor<f64>,
    /// Diff lambda of the pair, or the adapter lambda of an adapted head.
    pub lambda: f64,
    pub adapted: bool,
}

pub struct Forward<T: Scalar> {
    /// `(batch * seq) x vocab`.
    pub logits: Var<T>,
    /// Mean next-token cross entropy over the first `seq - 1` positions.
    pub loss: Option<Var<T>>,
    pub params: BTreeMap<String, Var<T>>,
    /// Pre-adapter head outputs indexed `(layer * batch + sample) * heads + head`.
    pub head_outputs: Vec<Var<T>>,
    pub traces: Vec<HeadTrace>,
}

impl<T: Scalar> Forward<T> {
    /// Logits of the last position of each sample.
    pub fn last_logits(&self, batch: &Batch) -> Vec<Vec<T>> {
        let v = self.logits.value();
        (0..batch.batch)
            .map(|b| v.row((b + 1) * batch.seq - 1).to_vec())
            .collect()
    }

    /// Parameter gradients after `backward`; zero tensors for unreached ones.
    pub fn grads(&self) -> BTreeMap<String, Tensor<T>> {
        self.params
            .iter()
            .filter(|(_, v)| v.requires_grad())
            .map(|(n, v)| (n.clone(), v.grad_tensor()))
            .collect()
    }
}

impl<T: Scalar> TransformerModel<T> {
    pub fn forward(&self, batch: &Batch, opts: &ForwardOptions) -> Result<Forward<T>> {
        let c = &self.config;
        let (bsz, n) = (batch.batch, batch.seq);
        if n > c.max_seq {
            return Err(input_err(format!("sequence length {n} exceeds max_seq {}", c.max_seq)));
        }
        if let Some(&bad) = batch.tokens.iter().find(|&&t| t >= c.vocab_size) {
            return Err(input_err(format!("token id {bad} >= vocab size {}", c.vocab_size)));
        }
        let params: BTreeMap<String, Var<T>> = self
            .params
            .iter()
            .map(|(k, p)| (k.clone(), Var::leaf(p.tensor.clone(), opts.grad && p.trainable)))
            .collect();
        let p = |name: &str| -> Result<&Var<T>> {
            params
                .get(name)
                .ok_or_else(|| crate::error::config_err(format!("missing parameter {name}")))
        };
        let lay = c.layout();
        let table = Rc::new(RopeTable::new(lay.qk_dim, n, c.rope_theta, 0)?);
        let q_scale = T::of(1.0 / (lay.qk_dim as f64).sqrt());
        let group = lay.heads / lay.kv_heads;
        let ones = Var::constant(Tensor::ones(&[lay.v_dim]));

        let mut head_outputs = Vec::new();
        let mut traces = Vec::new();
        let mut x = Var::embedding(p("tok_emb")?, &batch.tokens)?;
        for l in 0..c.n_layers {
            let ln = |leaf: &str| layer_name(l, leaf);
            let h = x.rms_norm(p(&ln("attn_norm"))?, c.norm_eps)?;
            let q = h
                .matmul(p(&ln("attn.wq"))?)?
                .rope(&table)?
                .scale(q_scale)?;
            let k = h.matmul(p(&ln("attn.wk"))?)?.rope(&table)?;
            let v = h.matmul(p(&ln("attn.wv"))?)?;

            let diff_lambda = match c.arch {
                Arch::Diff => Some(p(&ln("attn.lambda"))?),
                _ => None,
            };
            let dex = self.dex_layer(l, &params)?;

            let mut grid = Vec::with_capacity(bsz);
            for b in 0..bsz {
                let r0 = b * n;
                let mut k_blocks = Vec::with_capacity(lay.kv_heads * lay.maps);
                let mut v_blocks = Vec::with_capacity(lay.kv_heads);
                for j in 0..lay.kv_heads {
                    for m in 0..lay.maps {
                        let col = (j * lay.maps + m) * lay.qk_dim;
                        k_blocks.push(k.block(r0, n, col, lay.qk_dim)?);
                    }
                    v_blocks.push(v.block(r0, n, j * lay.v_dim, lay.v_dim)?);
                }
                let mut row = Vec::with_capacity(lay.heads);
                for hd in 0..lay.heads {
                    let j = hd / group;
                    let mut maps = Vec::with_capacity(lay.maps);
                    for m in 0..lay.maps {
                        let qb = q.block(r0, n, (hd * lay.maps + m) * lay.qk_dim, lay.qk_dim)?;
                        let scores = qb.matmul_nt(&k_blocks[j * lay.maps + m])?;
                        maps.push(scores.softmax_masked(&Mask::Causal)?);
                    }
                    let vb = &v_blocks[j];
                    let mut lam_val = 0.0;
                    let mut o = maps[0].matmul(vb)?;
                    if let Some(lam) = diff_lambda {
                        let lg = lam.block(0, 1, hd, 1)?;
                        lam_val = lg.value().item().f64();
                        o = o.sub(&maps[1].matmul(vb)?.mul_scalar(&lg)?)?;
                        if c.headwise_norm {
                            let post = 1.0 - c.lambda_init.value(l);
                            o = o.rms_norm(&ones, c.norm_eps)?.scale(T::of(post))?;
                        }
                    }
                    if opts.retain_head_outputs {
                        o.retain_grad();
                    }
                    let base = o.clone();
                    let mut adapted = false;
                    if let Some((adapter, lam_t)) = &dex {
                        if adapter.selection.contains(l, hd) {
                            adapted = true;
                            if let Some(lam_t) = lam_t {
                                lam_val = lam_t.value().item().f64();
                                let w_d = p(&adapter.w_d_name(l, hd))?;
                                o = apply_dex(&o, w_d, lam_t, true)?;
                            }
                        }
                    }
                    if opts.trace {
                        traces.push(trace_head(b, l, hd, &maps, vb, &base, &o, lam_val, adapted));
                    }
                    head_outputs.push(base);
                    row.push(o);
                }
                grid.push(row);
            }
            let attn = Var::concat_grid(&grid)?.matmul(p(&ln("attn.wo"))?)?;
            x = x.add(&attn)?;

            let h = x.rms_norm(p(&ln("ffn_norm"))?, c.norm_eps)?;
            let gate = h.matmul(p(&ln("ffn.w_gate"))?)?.silu()?;
            let up = h.matmul(p(&ln("ffn.w_up"))?)?;
            let ffn = gate.mul(&up)?.matmul(p(&ln("ffn.w_down"))?)?;
            x = x.add(&ffn)?;
        }
        let h = x.rms_norm(p("final_norm")?, c.norm_eps)?;
        let logits = h.matmul(p("lm_head")?)?;
        let loss = if opts.no_loss || n < 2 {
            None
        } else {
            let targets: Vec<Option<usize>> = (0..bsz * n)
                .map(|r| (r % n + 1 < n).then(|| batch.tokens[r + 1]))
                .collect();
            Some(logits.cross_entropy_masked(&targets)?)
        };
        Ok(Forward {
            logits,
            loss,
            params,
            head_outputs,
            traces,
        })
    }

    /// Next-token loss of a batch; sequences must hold at least two tokens.
    pub fn loss(&self, batch: &Batch) -> Result<f64> {
        if batch.seq < 2 {
            return Err(input_err("loss needs at least two tokens per sequence"));
        }
        let f = self.forward(batch, &ForwardOptions::default())?;
        Ok(f.loss.expect("loss for seq >= 2").value().item().f64())
    }

    /// Adapter and the layer's lambda node; the node is absent while the
    /// schedule pins lambda to exactly zero, which keeps step 0 bit-exact.
    #[allow(clippy::type_complexity)]
    fn dex_layer<'a>(
        &'a self,
        l: usize,
        params: &BTreeMap<String, Var<T>>,
    ) -> Result<Option<(&'a DexAdapter, Option<Var<T>>)>> {
        let Some(adapter) = &self.adapter else {
            return Ok(None);
        };
        let (alpha, offset) = adapter.schedule.coefficients(l, self.step);
        if alpha == 0.0 && offset == 0.0 {
            return Ok(Some((adapter, None)));
        }
        let name = DexAdapter::lambda_name(l);
        let learn = params
            .get(&name)
            .ok_or_else(|| crate::error::config_err(format!("missing parameter {name}")))?;
        let lam = learn.affine(T::of(alpha), T::of(offset))?;
        Ok(Some((adapter, Some(lam))))
    }
}

#[allow(clippy::too_many_arguments)]
fn trace_head<T: Scalar>(
    sample: usize,
    layer: usize,
    head: usize,
    maps: &[Var<T>],
    values: &Var<T>,
    base: &Var<T>,
    out: &Var<T>,
    lambda: f64,
    adapted: bool,
) -> HeadTrace {
    let g1: Tensor<f64> = maps[0].value().cast();
    let (scores, group_scores) = if maps.len() == 2 {
        let g2: Tensor<f64> = maps[1].value().cast();
        let signed: Vec<f64> = g1
            .data()
            .iter()
            .zip(g2.data())
            .map(|(&a, &b)| a - lambda * b)
            .collect();
        let s = Tensor::new(g1.shape(), signed).expect("same shape");
        (s, Some((g1, g2)))
    } else {
        (g1, None)
    };
    HeadTrace {
        sample,
        layer,
        head,
        scores,
        group_scores,
        values: values.value().cast(),
        base_output: base.value().cast(),
        head_output: out.value().cast(),
        lambda,
        adapted,
    }
}

impl TransformerModel<f64> {
    /// Tape gradients of the batch loss against central differences over
    /// every trainable parameter element. Returns
    /// `max |analytic - numeric| / max(1, |analytic|)`.
    pub fn loss_grad_check(&self, batch: &Batch, eps: f64) -> Result<f64> {
        let f = self.forward(
            batch,
            &ForwardOptions {
                grad: true,
                ..Default::default()
            },
        )?;
        let loss = f
            .loss
            .as_ref()
            .ok_or_else(|| input_err("loss needs at least two tokens per sequence"))?;
        loss.backward()?;
        let grads = f.grads();
        let mut probe = self.clone();
        let mut worst = 0.0f64;
        for (name, g) in &grads {
            for i in 0..g.numel() {
                let x0 = self.params[name].tensor.data()[i];
                probe.params.get_mut(name).expect("same names").tensor.data_mut()[i] = x0 + eps;
                let up = probe.loss(batch)?;
                probe.params.get_mut(name).expect("same names").tensor.data_mut()[i] = x0 - eps;
                let down = probe.loss(batch)?;
                probe.params.get_mut(name).expect("same names").tensor.data_mut()[i] = x0;
                let numeric = (up - down) / (2.0 * eps);
                let a = g.data()[i];
                worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
            }
        }
        Ok(worst)
    }
}
