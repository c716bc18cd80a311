//! Forward and reverse-mode passes of the toy ViT image encoder.
//!
//! Token layout is `[class, patch_0 .. patch_{N_p-1}]`. Masked patch
//! positions receive the prompt of layer 0 at the token level (before the
//! positional embedding) and are overwritten by the prompt of layer `l`
//! right before block `l` for `1 ≤ l < D`.

use crate::encoder::weights::{EncoderWeights, LayerWeights, PromptStack};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::numerics::kernels::{
    dot, gelu_grad_scalar, gelu_scalar, layernorm_rows, layernorm_rows_backward, mm,
    mm_a_bt, mm_at_b_acc, norm, softmax_in_place, LayerNormCache,
};
use crate::numerics::{Scalar, Tensor};

/// Row-wise mask-prompt replacement: row `j` is `tokens[j]` where the patch
/// is kept and `prompt[j]` where it is masked out.
pub fn apply_mask_prompts<F: Scalar>(
    tokens: &Tensor<F>,
    patch_mask: &[bool],
    prompt: &Tensor<F>,
) -> Result<Tensor<F>> {
    let (n, e) = tokens.dims2()?;
    if prompt.shape() != tokens.shape() || patch_mask.len() != n {
        return Err(Error::Shape(format!(
            "tokens {:?}, prompt {:?}, mask {}",
            tokens.shape(),
            prompt.shape(),
            patch_mask.len()
        )));
    }
    let mut out = tokens.clone();
    for (j, &keep) in patch_mask.iter().enumerate() {
        if !keep {
            out.data_mut()[j * e..(j + 1) * e].copy_from_slice(prompt.row(j));
        }
    }
    Ok(out)
}

/// Cuts an `S×S×3` image into row-major patches of `p·p·3` features each,
/// ordered `(dy, dx, channel)` within a patch.
pub fn patchify<F: Scalar>(pixels: &[f32], side: usize, patch: usize) -> Vec<F> {
    let grid = side / patch;
    let feat = patch * patch * 3;
    let mut out = vec![F::zero(); grid * grid * feat];
    for pr in 0..grid {
        for pc in 0..grid {
            let base = (pr * grid + pc) * feat;
            for dy in 0..patch {
                for dx in 0..patch {
                    let src = ((pr * patch + dy) * side + pc * patch + dx) * 3;
                    let dst = base + (dy * patch + dx) * 3;
                    for ch in 0..3 {
                        out[dst + ch] = F::lit(pixels[src + ch] as f64);
                    }
                }
            }
        }
    }
    out
}

struct LayerCache<F> {
    ln1_out: Vec<F>,
    ln1: LayerNormCache<F>,
    qkv: Vec<F>,
    /// `heads × n × n` attention probabilities.
    attn: Vec<F>,
    /// Concatenated head outputs, `n × E`.
    heads_out: Vec<F>,
    ln2_out: Vec<F>,
    ln2: LayerNormCache<F>,
    fc1_pre: Vec<F>,
    fc1_act: Vec<F>,
}

/// Activations saved by [`forward`] for [`backward`].
pub struct ForwardCache<F> {
    patches: Vec<F>,
    patch_mask: Vec<bool>,
    layers: Vec<LayerCache<F>>,
    post_ln_out: Vec<F>,
    post_ln: LayerNormCache<F>,
    proj_out: Vec<F>,
    proj_norm: F,
    prompted: bool,
}

/// Gradient sinks for [`backward`]; either may be omitted.
pub struct GradSink<'a, F> {
    pub weights: Option<&'a mut EncoderWeights<F>>,
    pub prompts: Option<&'a mut PromptStack<F>>,
}

fn check_inputs<F: Scalar>(
    config: &EncoderConfig,
    weights: &EncoderWeights<F>,
    prompts: Option<&PromptStack<F>>,
    pixels: &[f32],
    patch_mask: &[bool],
) -> Result<()> {
    let s = config.image_side;
    if pixels.len() != s * s * 3 {
        return Err(Error::Config(format!(
            "crop has {} values, encoder expects {s}x{s}x3",
            pixels.len()
        )));
    }
    if patch_mask.len() != config.num_patches() {
        return Err(Error::Config(format!(
            "patch mask has {} entries, encoder expects {}",
            patch_mask.len(),
            config.num_patches()
        )));
    }
    if weights.layers.len() != config.layers
        || weights.patch_proj.shape() != [config.patch_features(), config.dim]
    {
        return Err(Error::Config("weights do not match encoder config".into()));
    }
    if let Some(p) = prompts {
        p.validate(config)?;
    }
    Ok(())
}

fn add_bias_rows<F: Scalar>(x: &mut [F], bias: &[F]) {
    let d = bias.len();
    for row in x.chunks_mut(d) {
        for (v, &b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

fn sum_rows_into<F: Scalar>(x: &[F], d: usize, out: &mut [F]) {
    for row in x.chunks(d) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
}

fn block_forward<F: Scalar>(
    config: &EncoderConfig,
    w: &LayerWeights<F>,
    x: &mut [F],
    n: usize,
) -> LayerCache<F> {
    let e = config.dim;
    let hd = config.mlp_hidden();
    let heads = config.heads;
    let dh = e / heads;
    let scale = F::lit(1.0 / (dh as f64).sqrt());

    let mut ln1_out = vec![F::zero(); n * e];
    let ln1 = layernorm_rows(x, n, e, w.ln1_g.data(), w.ln1_b.data(), &mut ln1_out);
    let mut qkv = vec![F::zero(); n * 3 * e];
    mm(&ln1_out, w.qkv.data(), n, e, 3 * e, &mut qkv);
    add_bias_rows(&mut qkv, w.qkv_b.data());

    let mut attn = vec![F::zero(); heads * n * n];
    let mut heads_out = vec![F::zero(); n * e];
    for h in 0..heads {
        let probs = &mut attn[h * n * n..(h + 1) * n * n];
        for i in 0..n {
            let q = &qkv[i * 3 * e + h * dh..i * 3 * e + (h + 1) * dh];
            let row = &mut probs[i * n..(i + 1) * n];
            for (j, r) in row.iter_mut().enumerate() {
                let k = &qkv[j * 3 * e + e + h * dh..j * 3 * e + e + (h + 1) * dh];
                *r = dot(q, k) * scale;
            }
            softmax_in_place(row);
        }
        for i in 0..n {
            let out = &mut heads_out[i * e + h * dh..i * e + (h + 1) * dh];
            for j in 0..n {
                let a = probs[i * n + j];
                let v = &qkv[j * 3 * e + 2 * e + h * dh..j * 3 * e + 2 * e + (h + 1) * dh];
                for (o, &vv) in out.iter_mut().zip(v) {
                    *o += a * vv;
                }
            }
        }
    }
    let mut attn_proj = vec![F::zero(); n * e];
    mm(&heads_out, w.attn_out.data(), n, e, e, &mut attn_proj);
    add_bias_rows(&mut attn_proj, w.attn_out_b.data());
    for (xv, &a) in x.iter_mut().zip(&attn_proj) {
        *xv += a;
    }

    let mut ln2_out = vec![F::zero(); n * e];
    let ln2 = layernorm_rows(x, n, e, w.ln2_g.data(), w.ln2_b.data(), &mut ln2_out);
    let mut fc1_pre = vec![F::zero(); n * hd];
    mm(&ln2_out, w.fc1.data(), n, e, hd, &mut fc1_pre);
    add_bias_rows(&mut fc1_pre, w.fc1_b.data());
    let fc1_act: Vec<F> = fc1_pre.iter().map(|&v| gelu_scalar(v)).collect();
    let mut fc2_out = vec![F::zero(); n * e];
    mm(&fc1_act, w.fc2.data(), n, hd, e, &mut fc2_out);
    add_bias_rows(&mut fc2_out, w.fc2_b.data());
    for (xv, &m) in x.iter_mut().zip(&fc2_out) {
        *xv += m;
    }

    LayerCache {
        ln1_out,
        ln1,
        qkv,
        attn,
        heads_out,
        ln2_out,
        ln2,
        fc1_pre,
        fc1_act,
    }
}

/// Patch tokens with the layer-0 prompt applied, then class token and
/// position embedding. Returns the patch features and the `(N_p+1) × E`
/// residual stream.
fn input_stream<F: Scalar>(
    config: &EncoderConfig,
    weights: &EncoderWeights<F>,
    prompts: Option<&PromptStack<F>>,
    pixels: &[f32],
    patch_mask: &[bool],
) -> Result<(Vec<F>, Vec<F>)> {
    let e = config.dim;
    let np = config.num_patches();
    let feat = config.patch_features();

    let patches = patchify::<F>(pixels, config.image_side, config.patch_size);
    let mut tokens = vec![F::zero(); np * e];
    mm(&patches, weights.patch_proj.data(), np, feat, e, &mut tokens);
    add_bias_rows(&mut tokens, weights.patch_proj_b.data());

    if let Some(p) = prompts {
        let t = Tensor::new(vec![np, e], tokens)?;
        tokens = apply_mask_prompts(&t, patch_mask, &p.layers[0])?.into_data();
    }

    let mut x = vec![F::zero(); (np + 1) * e];
    x[..e].copy_from_slice(weights.class_token.data());
    x[e..].copy_from_slice(&tokens);
    for (xv, &pv) in x.iter_mut().zip(weights.pos_embed.data()) {
        *xv += pv;
    }
    Ok((patches, x))
}

/// Deep prompts overwrite the masked rows of the stream entering layer `l`.
fn overwrite_masked<F: Scalar>(prompts: Option<&PromptStack<F>>, l: usize, patch_mask: &[bool], x: &mut [F], e: usize) {
    if let Some(p) = prompts {
        if l >= 1 && l < p.depth() {
            for (j, &keep) in patch_mask.iter().enumerate() {
                if !keep {
                    x[(j + 1) * e..(j + 2) * e].copy_from_slice(p.layers[l].row(j));
                }
            }
        }
    }
}

/// The residual stream entering each of the first `upto` layers, before
/// that layer's prompt overwrite.
pub fn layer_inputs<F: Scalar>(
    config: &EncoderConfig,
    weights: &EncoderWeights<F>,
    prompts: Option<&PromptStack<F>>,
    pixels: &[f32],
    patch_mask: &[bool],
    upto: usize,
) -> Result<Vec<Vec<F>>> {
    check_inputs(config, weights, prompts, pixels, patch_mask)?;
    let e = config.dim;
    let n = config.num_patches() + 1;
    let (_, mut x) = input_stream(config, weights, prompts, pixels, patch_mask)?;
    let mut out = Vec::with_capacity(upto);
    for (l, w) in weights.layers.iter().enumerate().take(upto) {
        out.push(x.clone());
        overwrite_masked(prompts, l, patch_mask, &mut x, e);
        block_forward(config, w, &mut x, n);
    }
    Ok(out)
}

/// Runs the encoder on one crop. Returns the unit-norm embedding and the
/// activation cache.
pub fn forward<F: Scalar>(
    config: &EncoderConfig,
    weights: &EncoderWeights<F>,
    prompts: Option<&PromptStack<F>>,
    pixels: &[f32],
    patch_mask: &[bool],
) -> Result<(Vec<F>, ForwardCache<F>)> {
    check_inputs(config, weights, prompts, pixels, patch_mask)?;
    let e = config.dim;
    let n = config.num_patches() + 1;
    let (patches, mut x) = input_stream(config, weights, prompts, pixels, patch_mask)?;

    let mut layers = Vec::with_capacity(config.layers);
    for (l, w) in weights.layers.iter().enumerate() {
        overwrite_masked(prompts, l, patch_mask, &mut x, e);
        layers.push(block_forward(config, w, &mut x, n));
    }

    let mut post_ln_out = vec![F::zero(); e];
    let post_ln = layernorm_rows(
        &x[..e],
        1,
        e,
        weights.ln_post_g.data(),
        weights.ln_post_b.data(),
        &mut post_ln_out,
    );
    let out_dim = weights.proj.shape()[1];
    let mut proj_out = vec![F::zero(); out_dim];
    mm(&post_ln_out, weights.proj.data(), 1, e, out_dim, &mut proj_out);
    let proj_norm = norm(&proj_out);
    if proj_norm == F::zero() || !proj_norm.is_finite() {
        return Err(Error::ZeroVector);
    }
    let embedding = proj_out.iter().map(|&v| v / proj_norm).collect();

    Ok((
        embedding,
        ForwardCache {
            patches,
            patch_mask: patch_mask.to_vec(),
            layers,
            post_ln_out,
            post_ln,
            proj_out,
            proj_norm,
            prompted: prompts.is_some(),
        },
    ))
}

fn block_backward<F: Scalar>(
    config: &EncoderConfig,
    w: &LayerWeights<F>,
    cache: &LayerCache<F>,
    dx: &mut [F],
    n: usize,
    mut gw: Option<&mut LayerWeights<F>>,
) {
    let e = config.dim;
    let hd = config.mlp_hidden();
    let heads = config.heads;
    let dh = e / heads;
    let scale = F::lit(1.0 / (dh as f64).sqrt());

    // MLP branch: dx is the gradient of the block output, which is also the
    // gradient of the residual stream after attention.
    let dfc2 = dx.to_vec();
    let mut dact = vec![F::zero(); n * hd];
    mm_a_bt(&dfc2, w.fc2.data(), n, e, hd, &mut dact);
    let dpre: Vec<F> = dact
        .iter()
        .zip(&cache.fc1_pre)
        .map(|(&g, &p)| g * gelu_grad_scalar(p))
        .collect();
    let mut dln2 = vec![F::zero(); n * e];
    mm_a_bt(&dpre, w.fc1.data(), n, hd, e, &mut dln2);
    if let Some(g) = gw.as_deref_mut() {
        mm_at_b_acc(&cache.fc1_act, &dfc2, n, hd, e, g.fc2.data_mut());
        sum_rows_into(&dfc2, e, g.fc2_b.data_mut());
        mm_at_b_acc(&cache.ln2_out, &dpre, n, e, hd, g.fc1.data_mut());
        sum_rows_into(&dpre, hd, g.fc1_b.data_mut());
    }
    let mut scratch_g = vec![F::zero(); e];
    let mut scratch_b = vec![F::zero(); e];
    {
        let (dg, db) = match gw.as_deref_mut() {
            Some(g) => (g.ln2_g.data_mut(), g.ln2_b.data_mut()),
            None => (&mut scratch_g[..], &mut scratch_b[..]),
        };
        layernorm_rows_backward(&dln2, &cache.ln2, w.ln2_g.data(), n, e, dx, dg, db);
    }

    // Attention branch.
    let dattn = dx.to_vec();
    let mut dheads = vec![F::zero(); n * e];
    mm_a_bt(&dattn, w.attn_out.data(), n, e, e, &mut dheads);
    if let Some(g) = gw.as_deref_mut() {
        mm_at_b_acc(&cache.heads_out, &dattn, n, e, e, g.attn_out.data_mut());
        sum_rows_into(&dattn, e, g.attn_out_b.data_mut());
    }
    let qkv = &cache.qkv;
    let mut dqkv = vec![F::zero(); n * 3 * e];
    let mut dprobs = vec![F::zero(); n];
    for h in 0..heads {
        let probs = &cache.attn[h * n * n..(h + 1) * n * n];
        for i in 0..n {
            let dout = &dheads[i * e + h * dh..i * e + (h + 1) * dh];
            // dV and dA
            for j in 0..n {
                let a = probs[i * n + j];
                let v_off = j * 3 * e + 2 * e + h * dh;
                let v = &qkv[v_off..v_off + dh];
                dprobs[j] = dot(dout, v);
                for (dv, &d) in dqkv[v_off..v_off + dh].iter_mut().zip(dout) {
                    *dv += a * d;
                }
            }
            // softmax backward
            let row = &probs[i * n..(i + 1) * n];
            let inner = dot(&dprobs, row);
            let q_off = i * 3 * e + h * dh;
            for j in 0..n {
                let ds = row[j] * (dprobs[j] - inner) * scale;
                if ds == F::zero() {
                    continue;
                }
                let k_off = j * 3 * e + e + h * dh;
                for t in 0..dh {
                    let kv = qkv[k_off + t];
                    let qv = qkv[q_off + t];
                    dqkv[q_off + t] += ds * kv;
                    dqkv[k_off + t] += ds * qv;
                }
            }
        }
    }
    let mut dln1 = vec![F::zero(); n * e];
    mm_a_bt(&dqkv, w.qkv.data(), n, 3 * e, e, &mut dln1);
    if let Some(g) = gw.as_deref_mut() {
        mm_at_b_acc(&cache.ln1_out, &dqkv, n, e, 3 * e, g.qkv.data_mut());
        sum_rows_into(&dqkv, 3 * e, g.qkv_b.data_mut());
    }
    let (dg, db) = match gw {
        Some(g) => (g.ln1_g.data_mut(), g.ln1_b.data_mut()),
        None => (&mut scratch_g[..], &mut scratch_b[..]),
    };
    layernorm_rows_backward(&dln1, &cache.ln1, w.ln1_g.data(), n, e, dx, dg, db);
}

/// Accumulates gradients of a scalar loss given `d_embedding`, the gradient
/// with respect to the unit-norm output of [`forward`].
pub fn backward<F: Scalar>(
    config: &EncoderConfig,
    weights: &EncoderWeights<F>,
    prompts: Option<&PromptStack<F>>,
    cache: &ForwardCache<F>,
    d_embedding: &[F],
    sink: GradSink<'_, F>,
) -> Result<()> {
    if cache.prompted != prompts.is_some() {
        return Err(Error::Config("prompt presence differs from the forward pass".into()));
    }
    let GradSink {
        weights: mut gw,
        prompts: mut gp,
    } = sink;
    let e = config.dim;
    let np = config.num_patches();
    let n = np + 1;
    let feat = config.patch_features();
    let out_dim = weights.proj.shape()[1];

    // Through the l2 normalization.
    let unit: Vec<F> = cache.proj_out.iter().map(|&v| v / cache.proj_norm).collect();
    let along = dot(&unit, d_embedding);
    let dproj_out: Vec<F> = d_embedding
        .iter()
        .zip(&unit)
        .map(|(&d, &u)| (d - u * along) / cache.proj_norm)
        .collect();
    let mut dpost = vec![F::zero(); e];
    mm_a_bt(&dproj_out, weights.proj.data(), 1, out_dim, e, &mut dpost);
    let mut dx = vec![F::zero(); n * e];
    {
        let mut scratch_g = vec![F::zero(); e];
        let mut scratch_b = vec![F::zero(); e];
        if let Some(g) = gw.as_deref_mut() {
            mm_at_b_acc(&cache.post_ln_out, &dproj_out, 1, e, out_dim, g.proj.data_mut());
        }
        let (dg, db) = match gw.as_deref_mut() {
            Some(g) => (g.ln_post_g.data_mut(), g.ln_post_b.data_mut()),
            None => (&mut scratch_g[..], &mut scratch_b[..]),
        };
        layernorm_rows_backward(
            &dpost,
            &cache.post_ln,
            weights.ln_post_g.data(),
            1,
            e,
            &mut dx[..e],
            dg,
            db,
        );
    }

    for l in (0..config.layers).rev() {
        let layer_grads = gw.as_deref_mut().map(|g| &mut g.layers[l]);
        block_backward(config, &weights.layers[l], &cache.layers[l], &mut dx, n, layer_grads);
        if let Some(p) = prompts {
            if l >= 1 && l < p.depth() {
                for (j, &keep) in cache.patch_mask.iter().enumerate() {
                    if keep {
                        continue;
                    }
                    let row = &mut dx[(j + 1) * e..(j + 2) * e];
                    if let Some(gp) = gp.as_deref_mut() {
                        let dst = &mut gp.layers[l].data_mut()[j * e..(j + 1) * e];
                        for (d, &g) in dst.iter_mut().zip(row.iter()) {
                            *d += g;
                        }
                    }
                    row.iter_mut().for_each(|v| *v = F::zero());
                }
            }
        }
    }

    if let Some(g) = gw.as_deref_mut() {
        for (d, &v) in g.pos_embed.data_mut().iter_mut().zip(&dx) {
            *d += v;
        }
        for (d, &v) in g.class_token.data_mut().iter_mut().zip(&dx[..e]) {
            *d += v;
        }
    }
    let mut dtokens = dx[e..].to_vec();
    if prompts.is_some() {
        for (j, &keep) in cache.patch_mask.iter().enumerate() {
            if keep {
                continue;
            }
            let row = &mut dtokens[j * e..(j + 1) * e];
            if let Some(gp) = gp.as_deref_mut() {
                let dst = &mut gp.layers[0].data_mut()[j * e..(j + 1) * e];
                for (d, &g) in dst.iter_mut().zip(row.iter()) {
                    *d += g;
                }
            }
            row.iter_mut().for_each(|v| *v = F::zero());
        }
    }
    if let Some(g) = gw {
        mm_at_b_acc(&cache.patches, &dtokens, np, feat, e, g.patch_proj.data_mut());
        sum_rows_into(&dtokens, e, g.patch_proj_b.data_mut());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::seeded;

    #[test]
    fn all_ones_mask_returns_tokens_exactly() {
        let mut rng = seeded(1);
        let t = Tensor::<f32>::randn(&[5, 3], 1.0, &mut rng);
        let p = Tensor::<f32>::randn(&[5, 3], 1.0, &mut rng);
        let out = apply_mask_prompts(&t, &[true; 5], &p).unwrap();
        assert_eq!(out.to_le_bytes(), t.to_le_bytes());
        let out = apply_mask_prompts(&t, &[false; 5], &p).unwrap();
        assert_eq!(out.to_le_bytes(), p.to_le_bytes());
    }

    #[test]
    fn mixed_mask_matches_scalar_formula() {
        let mut rng = seeded(2);
        let t = Tensor::<f64>::randn(&[6, 4], 1.0, &mut rng);
        let p = Tensor::<f64>::randn(&[6, 4], 1.0, &mut rng);
        let mask = [true, false, false, true, false, true];
        let out = apply_mask_prompts(&t, &mask, &p).unwrap();
        for j in 0..6 {
            let m = if mask[j] { 1.0 } else { 0.0 };
            for c in 0..4 {
                let expect = t.row(j)[c] * m + p.row(j)[c] * (1.0 - m);
                assert_eq!(out.row(j)[c], expect);
            }
        }
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let t = Tensor::<f32>::zeros(&[4, 3]);
        let p = Tensor::<f32>::zeros(&[4, 2]);
        assert!(apply_mask_prompts(&t, &[true; 4], &p).is_err());
        assert!(apply_mask_prompts(&t, &[true; 3], &t).is_err());
    }

    #[test]
    fn patchify_orders_features_within_patch() {
        // 4x4 image, patch 2: pixel value encodes (row, col, channel)
        let mut px = vec![0.0f32; 4 * 4 * 3];
        for r in 0..4 {
            for c in 0..4 {
                for ch in 0..3 {
                    px[(r * 4 + c) * 3 + ch] = (r * 100 + c * 10 + ch) as f32;
                }
            }
        }
        let p = patchify::<f32>(&px, 4, 2);
        // patch 1 is (row 0, col 1): first feature is pixel (0,2) channel 0
        assert_eq!(p[12], 20.0);
        assert_eq!(p[12 + 3], 30.0); // (0,3)
        assert_eq!(p[12 + 6], 120.0); // (1,2)
    }
}
