//! Collaborative linear attention (CLA) and the FMLA block around it.
//!
//! Shapes carry a leading batch dim: the token stream `s` is `[B, n, d]`
//! and DCN features are `[B, c_dcn, n]`. Per head `i`:
//!
//! * `F_i`: `[B, C_eff, n]` compression map generated from DCN channel
//!   group `i` by a grouped pointwise convolution;
//! * `V̄_i = F_i · (s·W_i^V)`: `[B, C_eff, d_h]`;
//! * `K̂ = concat_i(V̄_i) · W_key`: `[B, C_eff, d_h]`, one key shared by all
//!   heads, computed row by row;
//! * `Q_i = (s·W̃^Q) ⊙ m_i`: shared query projection, per-head mix vector;
//! * `H̄_i = softmax(Q_i·K̂ᵀ / √d_h) · V̄_i`, `H_i = H̄_i + AvgPool3(Q_i)`.
//!
//! Attention maps are `n × C_eff`, so cost grows linearly in `n`.

use crate::error::{Error, Result};
use crate::mask::{apply_mask, MaskPlacement};
use crate::tensor::{Graph, Var};

/// Graph handles for one CLA block's parameters.
#[derive(Clone, Debug)]
pub struct ClaBlockParams {
    /// Shared query projection `W̃^Q`, `[d, d_h]`.
    pub query: Var,
    /// Mix vectors, row `i` is `m_i`: `[N_h, d_h]`.
    pub mix: Var,
    /// Per-head value projections `W_i^V`, each `[d, d_h]`.
    pub values: Vec<Var>,
    /// Key regeneration conv, `[d_h, N_h·d_h, 1]`.
    pub key_conv: Var,
    /// Grouped pointwise conv producing the maps, `[N_h·C, c_dcn/N_h, 1]`.
    pub comp_gen: Var,
    /// `W_O`, `[d, d]`.
    pub out_proj: Var,
    pub ffn_w1: Var,
    pub ffn_b1: Var,
    pub ffn_w2: Var,
    pub ffn_b2: Var,
    pub ln1_gain: Var,
    pub ln1_bias: Var,
    pub ln2_gain: Var,
    pub ln2_bias: Var,
}

/// Structural switches of a CLA block.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClaOptions {
    pub heads: usize,
    /// Requested compressed length `C`; `C_eff = min(C, n)`.
    pub compressed_len: usize,
    /// Add `AvgPool3(Q_i)` to each head output.
    pub pooling_residual: bool,
    /// Softmax each map row over positions instead of raw weights.
    pub normalize_compression: bool,
    pub mask_placement: MaskPlacement,
}

/// Intermediate values of one attention evaluation.
#[derive(Clone, Debug)]
pub struct AttentionActivations {
    pub q: Vec<Var>,
    pub f: Vec<Var>,
    pub vbar: Vec<Var>,
    pub khat: Var,
    pub a: Vec<Var>,
    pub hbar: Vec<Var>,
}

/// `(B, n, d)` of a token stream.
fn stream_dims(g: &Graph, s: Var) -> Result<(usize, usize, usize)> {
    match *g.value(s).dims() {
        [b, n, d] => Ok((b, n, d)),
        ref dims => Err(Error::dim(format!("token stream must be [B, n, d], got {dims:?}"))),
    }
}

/// Compression maps `F_i` (`[B, C_eff, n]`) from DCN features `[B, c_dcn, n]`.
pub fn gen_compression_maps(
    g: &mut Graph,
    h_dcn: Var,
    comp_gen: Var,
    opts: &ClaOptions,
) -> Result<Vec<Var>> {
    let dims = g.value(h_dcn).dims().to_vec();
    let (c_dcn, n) = match dims[..] {
        [_, c, n] => (c, n),
        _ => return Err(Error::dim(format!("DCN features must be [B, c, n], got {dims:?}"))),
    };
    if c_dcn % opts.heads != 0 {
        return Err(Error::config(format!(
            "DCN channels {c_dcn} not divisible by {} heads",
            opts.heads
        )));
    }
    let all = g.conv1d_same(h_dcn, comp_gen, opts.heads)?;
    let c = opts.compressed_len;
    let c_eff = c.min(n);
    let mut maps = Vec::with_capacity(opts.heads);
    for i in 0..opts.heads {
        let f = g.slice(all, 1, i * c, c_eff)?;
        maps.push(if opts.normalize_compression {
            g.softmax_lastdim(f)
        } else {
            f
        });
    }
    Ok(maps)
}

/// `V̄_i = F_i · (s · W_i^V)`.
pub fn compress_values(g: &mut Graph, s: Var, f: Var, w_v: Var) -> Result<Var> {
    let v = g.matmul(s, w_v)?;
    g.matmul(f, v)
}

/// `K̂ = concat(V̄_1..V̄_{N_h}) · W_keyᵀ`, a pointwise map on each
/// compressed row.
pub fn regenerate_key(g: &mut Graph, vbars: &[Var], key_conv: Var) -> Result<Var> {
    let kd = g.value(key_conv).dims().to_vec();
    let w = match kd[..] {
        [o, i, 1] => g.reshape(key_conv, &[o, i])?,
        [_, _] => key_conv,
        _ => return Err(Error::dim(format!("key conv must be [d_h, N_h·d_h, 1], got {kd:?}"))),
    };
    let cat = g.concat_lastdim(vbars)?;
    g.matmul_t(cat, w)
}

/// Shared query projection `s · W̃^Q`, `[B, n, d_h]`.
pub fn shared_query(g: &mut Graph, s: Var, query: Var) -> Result<Var> {
    g.matmul(s, query)
}

/// One head: returns `(H̄_i, Q_i, A_i)`.
pub fn collab_attention_head(
    g: &mut Graph,
    q_shared: Var,
    mix: Var,
    head: usize,
    khat: Var,
    vbar: Var,
) -> Result<(Var, Var, Var)> {
    let d_h = *g.value(q_shared).dims().last().expect("rank checked");
    let m_i = g.slice(mix, 0, head, 1)?;
    let q = g.mul_bcast(q_shared, m_i)?;
    let logits = g.matmul_t(q, khat)?;
    let logits = g.scale(logits, 1.0 / (d_h as f64).sqrt());
    let a = g.softmax_lastdim(logits);
    let hbar = g.matmul(a, vbar)?;
    Ok((hbar, q, a))
}

/// `concat_i(mask_i(H̄_i + AvgPool(Q_i))) · W_O`.
///
/// `masks[i]` (if any) covers all `B·n` rows of head `i`; with
/// [`MaskPlacement::BlockOutput`] the first mask is applied to the
/// projected output instead.
pub fn merge_heads_residual(
    g: &mut Graph,
    hbars: &[Var],
    qs: &[Var],
    out_proj: Var,
    opts: &ClaOptions,
    masks: &[Option<&[bool]>],
) -> Result<Var> {
    let mut heads = Vec::with_capacity(hbars.len());
    for (i, (&hbar, &q)) in hbars.iter().zip(qs).enumerate() {
        let mut h = if opts.pooling_residual {
            let pooled = g.avg_pool_time(q)?;
            g.add(hbar, pooled)?
        } else {
            hbar
        };
        if opts.mask_placement == MaskPlacement::PerHead {
            if let Some(m) = masks.get(i).copied().flatten() {
                h = apply_mask(g, h, m)?;
            }
        }
        heads.push(h);
    }
    let cat = g.concat_lastdim(&heads)?;
    let out = g.matmul(cat, out_proj)?;
    match (opts.mask_placement, masks.first().copied().flatten()) {
        (MaskPlacement::BlockOutput, Some(m)) => apply_mask(g, out, m),
        _ => Ok(out),
    }
}

/// Multi-head CLA over an already normalized stream given the maps.
pub fn cla_attention(
    g: &mut Graph,
    s_norm: Var,
    maps: &[Var],
    p: &ClaBlockParams,
    opts: &ClaOptions,
    masks: &[Option<&[bool]>],
) -> Result<(Var, AttentionActivations)> {
    let (_, _, d) = stream_dims(g, s_norm)?;
    if d % opts.heads != 0 || maps.len() != opts.heads || p.values.len() != opts.heads {
        return Err(Error::config(format!(
            "model width {d} with {} heads, {} maps, {} value projections",
            opts.heads,
            maps.len(),
            p.values.len()
        )));
    }
    let mut vbar = Vec::with_capacity(opts.heads);
    for (&f, &w_v) in maps.iter().zip(&p.values) {
        vbar.push(compress_values(g, s_norm, f, w_v)?);
    }
    let khat = regenerate_key(g, &vbar, p.key_conv)?;
    let q_shared = shared_query(g, s_norm, p.query)?;
    let (mut q, mut a, mut hbar) = (Vec::new(), Vec::new(), Vec::new());
    for (i, &v) in vbar.iter().enumerate() {
        let (h, qi, ai) = collab_attention_head(g, q_shared, p.mix, i, khat, v)?;
        hbar.push(h);
        q.push(qi);
        a.push(ai);
    }
    let out = merge_heads_residual(g, &hbar, &q, p.out_proj, opts, masks)?;
    Ok((
        out,
        AttentionActivations {
            q,
            f: maps.to_vec(),
            vbar,
            khat,
            a,
            hbar,
        },
    ))
}

/// Position-wise feed-forward: `GELU(x·W1 + b1)·W2 + b2`.
pub fn feed_forward(g: &mut Graph, x: Var, p: &ClaBlockParams) -> Result<Var> {
    let h = g.matmul(x, p.ffn_w1)?;
    let h = g.add_bcast(h, p.ffn_b1)?;
    let h = g.gelu(h);
    let o = g.matmul(h, p.ffn_w2)?;
    g.add_bcast(o, p.ffn_b2)
}

/// Pre-norm block with explicit compression maps:
/// `s' = s + CLA(LN1(s))`, then `s' + FFN(LN2(s'))`.
pub fn fmla_block_with_maps(
    g: &mut Graph,
    s: Var,
    maps: &[Var],
    p: &ClaBlockParams,
    opts: &ClaOptions,
    masks: &[Option<&[bool]>],
) -> Result<Var> {
    let x = g.layer_norm(s, p.ln1_gain, p.ln1_bias)?;
    let (att, _) = cla_attention(g, x, maps, p, opts, masks)?;
    let s1 = g.add(s, att)?;
    let y = g.layer_norm(s1, p.ln2_gain, p.ln2_bias)?;
    let f = feed_forward(g, y, p)?;
    g.add(s1, f)
}

/// One FMLA block guided by the paired DCN block's features.
pub fn fmla_block_forward(
    g: &mut Graph,
    s: Var,
    h_dcn: Var,
    p: &ClaBlockParams,
    opts: &ClaOptions,
    masks: &[Option<&[bool]>],
) -> Result<Var> {
    let (_, n, _) = stream_dims(g, s)?;
    if g.value(h_dcn).dims().last() != Some(&n) {
        return Err(Error::dim(format!(
            "DCN features {:?} do not match sequence length {n}",
            g.value(h_dcn).dims()
        )));
    }
    let maps = gen_compression_maps(g, h_dcn, p.comp_gen, opts)?;
    fmla_block_with_maps(g, s, &maps, p, opts, masks)
}
