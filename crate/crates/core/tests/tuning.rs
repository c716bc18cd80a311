use ovseg::encoder::{EncoderConfig, EncoderState, EncoderWeights, PromptStack};
use ovseg::numerics::rng::seeded;
use ovseg::preprocess::{BBox, BinaryMask, ImageTensor, MaskedCrop};
use ovseg::tuning::{
    grad_prompts, pair_loss, train, GradTargets, PairBatch, TextCache, TrainConfig, TrainMode,
    TrainingPair,
};
use ovseg::Error;
use rand::Rng;

fn crop(side: usize, patch: usize, seed: u64, masked_fraction: f64) -> MaskedCrop {
    let mut rng = seeded(seed);
    let g = side / patch;
    let patch_mask: Vec<bool> = (0..g * g).map(|_| rng.random::<f64>() >= masked_fraction).collect();
    let mut data = vec![0.0f32; side * side * 3];
    for r in 0..side {
        for c in 0..side {
            if patch_mask[(r / patch) * g + c / patch] {
                for ch in 0..3 {
                    data[(r * side + c) * 3 + ch] = rng.random();
                }
            }
        }
    }
    MaskedCrop {
        pixels: ImageTensor::new(side, side, data).unwrap(),
        patch_mask,
        resized_mask: BinaryMask::full(side, side),
        bbox: BBox { row0: 0, col0: 0, row1: side - 1, col1: side - 1 },
    }
}

fn batch_pairs(cfg: &EncoderConfig, masked_fraction: f64) -> Vec<TrainingPair> {
    ["circle", "square", "circle", "star"]
        .iter()
        .enumerate()
        .map(|(i, n)| TrainingPair {
            crop: crop(cfg.image_side, cfg.patch_size, 100 + i as u64, masked_fraction),
            noun: n.to_string(),
        })
        .collect()
}

/// Neutral prompts plus small noise. Tiny prompt rows alone would feed
/// near-zero vectors into layer norm, where finite differences break down.
fn prompted_state(cfg: EncoderConfig, seed: u64) -> EncoderState<f64> {
    let mut s = EncoderState::<f64>::init(cfg, seed).unwrap();
    let sample = batch_pairs(&cfg, 0.5);
    let crops: Vec<&MaskedCrop> = sample.iter().map(|p| &p.crop).collect();
    let mut stack = s.neutral_prompts(cfg.prompt_depth, &crops).unwrap();
    let noise = PromptStack::<f64>::init(&cfg, cfg.prompt_depth, seed + 1).unwrap();
    for (l, n) in stack.layers.iter_mut().zip(&noise.layers) {
        for (v, d) in l.data_mut().iter_mut().zip(n.data()) {
            *v += d;
        }
    }
    s.prompts = Some(stack);
    s
}

// ---------------------------------------------------------------------------
// Plain scalar reference of the whole encoder and loss.

fn ln(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let r = 1.0 / (var + 1e-5).sqrt();
    x.iter().enumerate().map(|(i, v)| (v - mean) * r * g[i] + b[i]).collect()
}

fn affine(x: &[f64], w: &[f64], b: Option<&[f64]>, out: usize) -> Vec<f64> {
    (0..out)
        .map(|o| {
            let s: f64 = x.iter().enumerate().map(|(i, v)| v * w[i * out + o]).sum();
            s + b.map_or(0.0, |b| b[o])
        })
        .collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

fn reference_embedding(
    cfg: &EncoderConfig,
    w: &EncoderWeights<f64>,
    prompts: Option<&PromptStack<f64>>,
    c: &MaskedCrop,
) -> Vec<f64> {
    let (s, p, e) = (cfg.image_side, cfg.patch_size, cfg.dim);
    let g = s / p;
    let px = c.pixels.data();
    let mut x: Vec<Vec<f64>> = vec![w.class_token.data().to_vec()];
    for j in 0..g * g {
        let (pr, pc) = (j / g, j % g);
        let mut feat = Vec::new();
        for dy in 0..p {
            for dx in 0..p {
                for ch in 0..3 {
                    feat.push(px[((pr * p + dy) * s + pc * p + dx) * 3 + ch] as f64);
                }
            }
        }
        let tok = affine(&feat, w.patch_proj.data(), Some(w.patch_proj_b.data()), e);
        x.push(match prompts {
            Some(ps) if !c.patch_mask[j] => ps.layers[0].row(j).to_vec(),
            _ => tok,
        });
    }
    for (i, row) in x.iter_mut().enumerate() {
        for (k, v) in row.iter_mut().enumerate() {
            *v += w.pos_embed.data()[i * e + k];
        }
    }
    let heads = cfg.heads;
    let dh = e / heads;
    for (l, lw) in w.layers.iter().enumerate() {
        if let Some(ps) = prompts {
            if l >= 1 && l < ps.depth() {
                for j in 0..g * g {
                    if !c.patch_mask[j] {
                        x[j + 1] = ps.layers[l].row(j).to_vec();
                    }
                }
            }
        }
        let n = x.len();
        let h: Vec<Vec<f64>> = x.iter().map(|r| ln(r, lw.ln1_g.data(), lw.ln1_b.data())).collect();
        let qkv: Vec<Vec<f64>> =
            h.iter().map(|r| affine(r, lw.qkv.data(), Some(lw.qkv_b.data()), 3 * e)).collect();
        let mut cat = vec![vec![0.0; e]; n];
        for hd in 0..heads {
            for i in 0..n {
                let q = &qkv[i][hd * dh..(hd + 1) * dh];
                let logits: Vec<f64> = (0..n)
                    .map(|j| {
                        let k = &qkv[j][e + hd * dh..e + (hd + 1) * dh];
                        q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() / (dh as f64).sqrt()
                    })
                    .collect();
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = logits.iter().map(|v| (v - m).exp()).sum();
                for j in 0..n {
                    let a = (logits[j] - m).exp() / z;
                    for d in 0..dh {
                        cat[i][hd * dh + d] += a * qkv[j][2 * e + hd * dh + d];
                    }
                }
            }
        }
        for i in 0..n {
            let o = affine(&cat[i], lw.attn_out.data(), Some(lw.attn_out_b.data()), e);
            for k in 0..e {
                x[i][k] += o[k];
            }
            let h2 = ln(&x[i], lw.ln2_g.data(), lw.ln2_b.data());
            let hid: Vec<f64> = affine(&h2, lw.fc1.data(), Some(lw.fc1_b.data()), cfg.mlp_hidden())
                .into_iter()
                .map(gelu)
                .collect();
            let o2 = affine(&hid, lw.fc2.data(), Some(lw.fc2_b.data()), e);
            for k in 0..e {
                x[i][k] += o2[k];
            }
        }
    }
    let post = ln(&x[0], w.ln_post_g.data(), w.ln_post_b.data());
    let out = affine(&post, w.proj.data(), None, e);
    let nrm = out.iter().map(|v| v * v).sum::<f64>().sqrt();
    out.iter().map(|v| v / nrm).collect()
}

fn reference_loss(state: &EncoderState<f64>, pairs: &[TrainingPair], tau: f64) -> f64 {
    let mut nouns: Vec<String> = pairs.iter().map(|p| p.noun.clone()).collect();
    nouns.sort();
    nouns.dedup();
    let mut text = TextCache::<f64>::new(state.config.dim);
    let rows = text.rows(&nouns).unwrap();
    let mut total = 0.0;
    for p in pairs {
        let v = reference_embedding(&state.config, &state.weights, state.prompts.as_ref(), &p.crop);
        let logits: Vec<f64> =
            rows.iter().map(|t| t.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>() / tau).collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
        let target = nouns.iter().position(|n| *n == p.noun).unwrap();
        total += lse - logits[target];
    }
    total / pairs.len() as f64
}

#[test]
fn pair_loss_matches_scalar_reference() {
    let cfg = EncoderConfig::default();
    let state = prompted_state(cfg, 11);
    let pairs = batch_pairs(&cfg, 0.4);
    let batch = PairBatch::new(pairs.iter().collect()).unwrap();
    // Moderate temperature keeps the loss O(1) so the tolerance is meaningful.
    let (loss, probs) = pair_loss(&batch, &state, 0.1).unwrap();
    let reference = reference_loss(&state, &pairs, 0.1);
    assert!((loss - reference).abs() < 1e-6, "{loss} vs {reference}");
    for p in &probs {
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn uniform_probabilities_give_log_u() {
    // A huge temperature flattens the softmax.
    let cfg = EncoderConfig::default();
    let state = EncoderState::<f64>::init(cfg, 2).unwrap();
    let pairs = batch_pairs(&cfg, 0.0);
    let batch = PairBatch::new(pairs.iter().collect()).unwrap();
    let (loss, _) = pair_loss(&batch, &state, 1e12).unwrap();
    assert!((loss - 3f64.ln()).abs() < 1e-9);
}

#[test]
fn degenerate_batches_are_rejected() {
    let p = TrainingPair { crop: crop(32, 4, 1, 0.0), noun: "circle".into() };
    let q = p.clone();
    assert!(matches!(PairBatch::new(vec![&p, &q]), Err(Error::DegenerateBatch(_))));
    assert!(matches!(PairBatch::new(vec![]), Err(Error::DegenerateBatch(_))));
    let blank = TrainingPair { crop: p.crop.clone(), noun: " ".into() };
    assert!(matches!(PairBatch::new(vec![&p, &blank]), Err(Error::DegenerateBatch(_))));
}

// ---------------------------------------------------------------------------
// Finite differences.

const H: f64 = 1e-4;
const TAU: f64 = 0.05;

fn rel_err(a: f64, b: f64) -> f64 {
    let denom = a.abs().max(b.abs());
    if denom < 1e-7 {
        (a - b).abs()
    } else {
        (a - b).abs() / denom
    }
}

fn check_coords(
    state: &EncoderState<f64>,
    pairs: &[TrainingPair],
    analytic: &[f64],
    coords: &[usize],
    perturb: impl Fn(&mut EncoderState<f64>, usize, f64),
    label: &str,
) {
    let batch = PairBatch::new(pairs.iter().collect()).unwrap();
    for &i in coords {
        let mut plus = state.clone();
        perturb(&mut plus, i, H);
        let mut minus = state.clone();
        perturb(&mut minus, i, -H);
        let lp = pair_loss(&batch, &plus, TAU).unwrap().0;
        let lm = pair_loss(&batch, &minus, TAU).unwrap().0;
        let numeric = (lp - lm) / (2.0 * H);
        let err = rel_err(analytic[i], numeric);
        assert!(err < 1e-4, "{label}[{i}]: analytic {} numeric {numeric} err {err}", analytic[i]);
    }
}

fn sample(rng: &mut ovseg::numerics::Rng, pool: &[usize], k: usize) -> Vec<usize> {
    (0..k).map(|_| pool[rng.random_range(0..pool.len())]).collect()
}

#[test]
fn gradients_match_finite_differences() {
    let cfg = EncoderConfig::default();
    let state = prompted_state(cfg, 21);
    let pairs = batch_pairs(&cfg, 0.4);
    let batch = PairBatch::new(pairs.iter().collect()).unwrap();
    let g = grad_prompts(&batch, &state, TAU, GradTargets::BOTH).unwrap();
    let gw = g.weight_grads.unwrap();
    let gp = g.prompt_grads.unwrap();
    let mut rng = seeded(5);

    // Prompts: sample from rows that are masked somewhere in the batch.
    let e = cfg.dim;
    for d in 0..cfg.prompt_depth {
        let rows: Vec<usize> = (0..cfg.num_patches())
            .filter(|&j| pairs.iter().any(|p| !p.crop.patch_mask[j]))
            .flat_map(|j| (j * e..(j + 1) * e).collect::<Vec<_>>())
            .collect();
        let coords = sample(&mut rng, &rows, 10);
        check_coords(
            &state,
            &pairs,
            gp.layers[d].data(),
            &coords,
            |s, i, h| s.prompts.as_mut().unwrap().layers[d].data_mut()[i] += h,
            &format!("prompt.{d}"),
        );
    }

    for name in ["patch_proj.w", "layer1.attn.qkv", "proj"] {
        let analytic = {
            let mut tmp = gw.clone();
            tmp.tensor_by_name_mut(name).unwrap().data().to_vec()
        };
        let pool: Vec<usize> = (0..analytic.len()).collect();
        let coords = sample(&mut rng, &pool, 10);
        check_coords(
            &state,
            &pairs,
            &analytic,
            &coords,
            |s, i, h| s.weights.tensor_by_name_mut(name).unwrap().data_mut()[i] += h,
            name,
        );
    }
}

#[test]
fn prompt_gradient_is_exactly_zero_on_unmasked_positions() {
    let cfg = EncoderConfig::default();
    let state = prompted_state(cfg, 3);
    let all_kept = batch_pairs(&cfg, 0.0);
    let batch = PairBatch::new(all_kept.iter().collect()).unwrap();
    let g = grad_prompts(&batch, &state, TAU, GradTargets::PROMPTS).unwrap();
    for layer in &g.prompt_grads.unwrap().layers {
        assert!(layer.data().iter().all(|&v| v == 0.0));
    }

    let mixed = batch_pairs(&cfg, 0.3);
    let batch = PairBatch::new(mixed.iter().collect()).unwrap();
    let g = grad_prompts(&batch, &state, TAU, GradTargets::PROMPTS).unwrap();
    let gp = g.prompt_grads.unwrap();
    let mut some_nonzero = false;
    for j in 0..cfg.num_patches() {
        let kept_everywhere = mixed.iter().all(|p| p.crop.patch_mask[j]);
        for layer in &gp.layers {
            let row = layer.row(j);
            if kept_everywhere {
                assert!(row.iter().all(|&v| v == 0.0), "row {j}");
            } else {
                some_nonzero |= row.iter().any(|&v| v != 0.0);
            }
        }
    }
    assert!(some_nonzero);
}

#[test]
fn gradients_are_bitwise_reproducible_and_job_independent() {
    let cfg = EncoderConfig::default();
    let state = prompted_state(cfg, 8).cast::<f32>();
    let pairs: Vec<TrainingPair> = batch_pairs(&cfg, 0.3);
    let batch = PairBatch::new(pairs.iter().collect()).unwrap();
    let mut text = TextCache::<f32>::new(cfg.dim);
    let rows = text.rows(&batch.nouns).unwrap();
    let run = |jobs| {
        ovseg::tuning::loss_and_grads(&state, &batch, &rows, 0.01, GradTargets::BOTH, jobs).unwrap()
    };
    let a = run(1);
    let b = run(1);
    let c = run(3);
    for other in [&b, &c] {
        assert_eq!(a.loss.to_bits(), other.loss.to_bits());
        assert_eq!(a.weight_grads, other.weight_grads);
        assert_eq!(a.prompt_grads, other.prompt_grads);
    }
}

// ---------------------------------------------------------------------------
// Training semantics.

fn small_cfg() -> EncoderConfig {
    EncoderConfig {
        image_side: 8,
        patch_size: 4,
        dim: 8,
        layers: 2,
        heads: 2,
        prompt_depth: 2,
        mlp_ratio: 2,
        temperature: 0.1,
    }
}

fn small_dataset() -> Vec<TrainingPair> {
    (0..12)
        .map(|i| TrainingPair {
            crop: crop(8, 4, i, 0.3),
            noun: ["circle", "square", "star"][i as usize % 3].into(),
        })
        .collect()
}

fn quick(mode: TrainMode) -> TrainConfig {
    let mut c = TrainConfig::desk(mode);
    c.batch_size = 4;
    c.mpt.epochs = 2;
    c.ft.epochs = 2;
    c.prompt_depth = 2;
    c
}

#[test]
fn zero_epochs_leave_state_unchanged() {
    let init = EncoderState::<f32>::init(small_cfg(), 1).unwrap();
    for mode in TrainMode::ALL {
        let mut c = quick(mode);
        c.mpt.epochs = 0;
        c.ft.epochs = 0;
        let out = train(&small_dataset(), &c, init.clone()).unwrap();
        assert_eq!(out.state, init);
        assert!(out.log.is_empty());
    }
}

#[test]
fn mpt_freezes_weights_and_ft_never_allocates_prompts() {
    let init = EncoderState::<f32>::init(small_cfg(), 1).unwrap();
    let data = small_dataset();

    let mpt = train(&data, &quick(TrainMode::Mpt), init.clone()).unwrap();
    assert_eq!(mpt.state.weights.fingerprint(), init.weights.fingerprint());
    assert_eq!(mpt.state.prompts.as_ref().unwrap().depth(), 2);
    assert_eq!(mpt.log.len(), 2);

    let ft = train(&data, &quick(TrainMode::Ft), init.clone()).unwrap();
    assert!(ft.state.prompts.is_none());
    assert_ne!(ft.state.weights.fingerprint(), init.weights.fingerprint());

    let both = train(&data, &quick(TrainMode::FtThenMpt), init.clone()).unwrap();
    assert_eq!(both.state.weights, ft.state.weights);
    assert!(both.state.prompts.is_some());
    let phases: Vec<&str> = both.log.iter().map(|m| m.phase.as_str()).collect();
    assert_eq!(phases, ["ft", "ft", "mpt", "mpt"]);

    // Prompts stay frozen during the second phase.
    let rev = train(&data, &quick(TrainMode::MptThenFt), init.clone()).unwrap();
    assert_eq!(rev.state.prompts, mpt.state.prompts);

    let sim = train(&data, &quick(TrainMode::Simultaneous), init.clone()).unwrap();
    assert!(sim.state.prompts.is_some());
    assert_ne!(sim.state.weights.fingerprint(), init.weights.fingerprint());
}

#[test]
fn training_is_deterministic_and_errors_are_typed() {
    let init = EncoderState::<f32>::init(small_cfg(), 1).unwrap();
    let data = small_dataset();
    let a = train(&data, &quick(TrainMode::FtThenMpt), init.clone()).unwrap();
    let b = train(&data, &quick(TrainMode::FtThenMpt), init.clone()).unwrap();
    assert_eq!(a.state, b.state);
    assert_eq!(a.log, b.log);

    assert!(matches!(train(&[], &quick(TrainMode::Mpt), init.clone()), Err(Error::EmptyDataset)));
    assert!("bogus".parse::<TrainMode>().is_err());
    assert_eq!("ft-then-mpt".parse::<TrainMode>().unwrap(), TrainMode::FtThenMpt);
    let mut bad = quick(TrainMode::Mpt);
    bad.batch_size = 0;
    assert!(matches!(train(&data, &bad, init), Err(Error::Config(_))));
}

#[test]
fn training_reduces_loss() {
    let init = EncoderState::<f32>::init(small_cfg(), 4).unwrap();
    let data = small_dataset();
    let mut c = quick(TrainMode::Ft);
    c.ft.epochs = 30;
    let out = train(&data, &c, init).unwrap();
    assert!(out.log.last().unwrap().loss < out.log[0].loss);
}
