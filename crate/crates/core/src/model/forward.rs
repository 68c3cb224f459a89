use std::sync::Arc;

use super::params::ModelParams;
use super::types::{AttentionTrace, LabelDistribution, Prompt, TokenSequence, Verbalizer};
use crate::error::{Error, Result};
use crate::numerics::{softmax_slice, Graph, Tensor, Var};

pub struct LayerVars {
    ln1_g: Var,
    ln1_b: Var,
    wq: Var,
    bq: Var,
    wk: Var,
    bk: Var,
    wv: Var,
    bv: Var,
    wo: Var,
    bo: Var,
    ln2_g: Var,
    ln2_b: Var,
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
}

/// Graph handles for the backbone weights.
pub struct ParamVars {
    pub tok_emb: Var,
    tok_emb_t: Var,
    pos_emb: Var,
    layers: Vec<LayerVars>,
    lnf_g: Var,
    lnf_b: Var,
    out_bias: Var,
    all: Vec<Var>,
}

impl ParamVars {
    /// Backbone weights as constants; no gradient flows into θ.
    pub fn frozen(g: &mut Graph, params: &ModelParams) -> Result<Self> {
        Self::bind(g, params, false)
    }

    /// Backbone weights as trainable leaves (pretraining only).
    pub fn trainable(g: &mut Graph, params: &ModelParams) -> Result<Self> {
        Self::bind(g, params, true)
    }

    fn bind(g: &mut Graph, params: &ModelParams, requires_grad: bool) -> Result<Self> {
        let mut all = Vec::new();
        let mut put = |g: &mut Graph, t: &Arc<Tensor>| {
            let v = g.shared(Arc::clone(t), requires_grad);
            all.push(v);
            v
        };
        let tok_emb = put(g, &params.tok_emb);
        let pos_emb = put(g, &params.pos_emb);
        let layers = params
            .layers
            .iter()
            .map(|l| LayerVars {
                ln1_g: put(g, &l.ln1_g),
                ln1_b: put(g, &l.ln1_b),
                wq: put(g, &l.wq),
                bq: put(g, &l.bq),
                wk: put(g, &l.wk),
                bk: put(g, &l.bk),
                wv: put(g, &l.wv),
                bv: put(g, &l.bv),
                wo: put(g, &l.wo),
                bo: put(g, &l.bo),
                ln2_g: put(g, &l.ln2_g),
                ln2_b: put(g, &l.ln2_b),
                w1: put(g, &l.w1),
                b1: put(g, &l.b1),
                w2: put(g, &l.w2),
                b2: put(g, &l.b2),
            })
            .collect();
        let lnf_g = put(g, &params.lnf_g);
        let lnf_b = put(g, &params.lnf_b);
        let out_bias = put(g, &params.out_bias);
        let tok_emb_t = g.transpose(tok_emb)?;
        Ok(Self {
            tok_emb,
            tok_emb_t,
            pos_emb,
            layers,
            lnf_g,
            lnf_b,
            out_bias,
            all,
        })
    }

    /// Leaves in [`ModelParams::named_tensors`] order.
    pub fn leaves(&self) -> &[Var] {
        &self.all
    }
}

/// Graph handles produced by one forward pass.
pub struct ForwardVars {
    /// `[1, vocab]` logits at the mask position.
    pub logits: Var,
    /// `attention[layer][head]`, each `[seq, seq]`.
    pub attention: Vec<Vec<Var>>,
    /// `[seq, d_model]` final hidden states (after the last layer norm).
    pub hidden: Var,
}

/// Records the encoder on `g`. When `soft` is given it supplies the
/// embedding rows of the prompt span.
pub fn forward_graph(
    g: &mut Graph,
    pv: &ParamVars,
    params: &ModelParams,
    seq: &TokenSequence,
    soft: Option<Var>,
) -> Result<ForwardVars> {
    let cfg = &params.config;
    let n = seq.len();
    if n > cfg.max_seq {
        return Err(Error::SequenceTooLong {
            len: n,
            max: cfg.max_seq,
        });
    }
    let ids = seq.ids();
    let span = seq.prompt_span();

    let emb = match soft {
        None => g.gather_rows(pv.tok_emb, ids)?,
        Some(s) => {
            let rows = g.value(s).rows();
            if rows != span.len() {
                return Err(Error::InvalidArgument(format!(
                    "soft prompt has {rows} rows for a span of {}",
                    span.len()
                )));
            }
            let mut parts = Vec::with_capacity(3);
            if span.start > 0 {
                parts.push(g.gather_rows(pv.tok_emb, &ids[..span.start])?);
            }
            parts.push(s);
            if span.end < n {
                parts.push(g.gather_rows(pv.tok_emb, &ids[span.end..])?);
            }
            g.concat_rows(&parts)?
        }
    };
    let pos = g.slice_rows(pv.pos_emb, 0, n)?;
    let mut x = g.add(emb, pos)?;

    let keep: Vec<bool> = (0..n)
        .map(|j| ids[j] != cfg.pad_token_id || span.contains(&j))
        .collect();
    let mask = if keep.iter().all(|&k| k) {
        None
    } else {
        Some(Arc::new((0..n).flat_map(|_| keep.iter().copied()).collect::<Vec<_>>()))
    };

    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut attention = Vec::with_capacity(cfg.n_layers);
    for lv in &pv.layers {
        let h = g.layer_norm(x, lv.ln1_g, lv.ln1_b)?;
        let q = g.linear(h, lv.wq, lv.bq)?;
        let k = g.linear(h, lv.wk, lv.bk)?;
        let v = g.linear(h, lv.wv, lv.bv)?;
        let mut heads = Vec::with_capacity(cfg.n_heads);
        let mut probs = Vec::with_capacity(cfg.n_heads);
        for head in 0..cfg.n_heads {
            let qh = g.slice_cols(q, head * dh, dh)?;
            let kh = g.slice_cols(k, head * dh, dh)?;
            let vh = g.slice_cols(v, head * dh, dh)?;
            let kt = g.transpose(kh)?;
            let scores = g.matmul(qh, kt)?;
            let scores = g.scale(scores, scale)?;
            let p = g.softmax(scores, mask.clone())?;
            heads.push(g.matmul(p, vh)?);
            probs.push(p);
        }
        let cat = g.concat_cols(&heads)?;
        let o = g.linear(cat, lv.wo, lv.bo)?;
        x = g.add(x, o)?;
        let h2 = g.layer_norm(x, lv.ln2_g, lv.ln2_b)?;
        let f = g.linear(h2, lv.w1, lv.b1)?;
        let f = g.gelu(f)?;
        let f = g.linear(f, lv.w2, lv.b2)?;
        x = g.add(x, f)?;
        attention.push(probs);
    }
    let hidden = g.layer_norm(x, pv.lnf_g, pv.lnf_b)?;
    let at_mask = g.slice_rows(hidden, seq.mask_pos(), 1)?;
    let logits = g.matmul(at_mask, pv.tok_emb_t)?;
    let logits = g.add_row(logits, pv.out_bias)?;
    Ok(ForwardVars {
        logits,
        attention,
        hidden,
    })
}

/// Log-probabilities over labels, renormalized over the verbalizer tokens.
pub fn label_log_probs(g: &mut Graph, logits: Var, verbalizer: &Verbalizer) -> Result<Var> {
    let picked = g.select_cols(logits, verbalizer.token_ids())?;
    g.log_softmax(picked, None)
}

/// Plain values of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub mask_logits: Vec<f64>,
    pub trace: AttentionTrace,
    pub final_hidden: Tensor,
}

fn collect(g: &Graph, fv: &ForwardVars) -> Result<ForwardOutput> {
    let layers = fv
        .attention
        .iter()
        .map(|heads| heads.iter().map(|&p| g.value(p).clone()).collect())
        .collect();
    Ok(ForwardOutput {
        mask_logits: g.value(fv.logits).data().to_vec(),
        trace: AttentionTrace::new(layers)?,
        final_hidden: g.value(fv.hidden).clone(),
    })
}

/// Forward pass returning mask logits, the full attention trace and the
/// final hidden states.
pub fn forward_with_attention(params: &ModelParams, seq: &TokenSequence) -> Result<ForwardOutput> {
    let mut g = Graph::new();
    let pv = ParamVars::frozen(&mut g, params)?;
    let fv = forward_graph(&mut g, &pv, params, seq, None)?;
    collect(&g, &fv)
}

/// Forward pass of `prompt ⊕ input ⊕ [mask]` for either prompt kind.
pub fn forward_prompted(
    params: &ModelParams,
    prompt: &Prompt,
    input: &[usize],
) -> Result<(TokenSequence, ForwardOutput)> {
    let seq = prompt.compose(input, &params.config);
    let mut g = Graph::new();
    let pv = ParamVars::frozen(&mut g, params)?;
    let soft = match prompt {
        Prompt::Tokens(_) => None,
        Prompt::Embeddings(e) => {
            if e.cols() != params.config.d_model {
                return Err(Error::InvalidArgument(format!(
                    "soft prompt width {} differs from d_model {}",
                    e.cols(),
                    params.config.d_model
                )));
            }
            Some(g.leaf(e.clone(), false))
        }
    };
    let fv = forward_graph(&mut g, &pv, params, &seq, soft)?;
    let out = collect(&g, &fv)?;
    Ok((seq, out))
}

/// Softmax over the verbalizer tokens' logits.
pub fn label_distribution(mask_logits: &[f64], verbalizer: &Verbalizer) -> Result<LabelDistribution> {
    let picked: Vec<f64> = verbalizer
        .token_ids()
        .iter()
        .map(|&t| {
            mask_logits
                .get(t)
                .copied()
                .ok_or_else(|| Error::InvalidArgument(format!("verbalizer token {t} outside logits")))
        })
        .collect::<Result<_>>()?;
    LabelDistribution::new(softmax_slice(&picked))
}

pub fn predict_label(params: &ModelParams, seq: &TokenSequence, verbalizer: &Verbalizer) -> Result<LabelDistribution> {
    let out = forward_with_attention(params, seq)?;
    label_distribution(&out.mask_logits, verbalizer)
}

/// Label distribution for `prompt ⊕ input ⊕ [mask]`.
pub fn predict_prompted(
    params: &ModelParams,
    prompt: &Prompt,
    input: &[usize],
    verbalizer: &Verbalizer,
) -> Result<LabelDistribution> {
    let (_, out) = forward_prompted(params, prompt, input)?;
    label_distribution(&out.mask_logits, verbalizer)
}

/// Final hidden state at the mask of the bare `input ⊕ [mask]` sequence.
pub fn encode_state(params: &ModelParams, input: &[usize]) -> Result<Vec<f64>> {
    let seq = TokenSequence::compose(&[], input, params.config.mask_token_id);
    let out = forward_with_attention(params, &seq)?;
    Ok(out.final_hidden.row(seq.mask_pos()).to_vec())
}
