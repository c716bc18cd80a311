//! Browser demo. Each export returns a JSON string the page draws from;
//! the same functions run natively, which is how they are tested.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use ovseg::classify::{ensemble, ClassDistribution};
use ovseg::encoder::text::default_templates;
use ovseg::encoder::{EncoderConfig, EncoderState, VocabularyEmbeddings};
use ovseg::pipeline::synth::SHAPES;
use ovseg::pipeline::{render_scene, segment, IouAccumulator, ProposalSet, Scene, SegmentOptions, SegmentationMap, SynthConfig};
use ovseg::preprocess::{crop_resize_mask, CropOptions, ImageTensor};

const SIDE: usize = 64;

const PALETTE: [[u8; 3]; 10] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [170, 110, 40],
];

/// RGBA raster, row-major.
#[derive(Debug, Serialize)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub rgba: Vec<u8>,
}

impl Raster {
    fn from_image(img: &ImageTensor) -> Self {
        let rgba = img
            .data()
            .chunks(3)
            .flat_map(|p| [to_u8(p[0]), to_u8(p[1]), to_u8(p[2]), 255])
            .collect();
        Self { width: img.width(), height: img.height(), rgba }
    }

    fn from_map(map: &SegmentationMap) -> Self {
        let rgba = map
            .data()
            .iter()
            .flat_map(|&c| match PALETTE.get(c as usize) {
                Some(&[r, g, b]) => [r, g, b, 255],
                None => [0, 0, 0, 255],
            })
            .collect();
        Self { width: map.width(), height: map.height(), rgba }
    }
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn scene(seed: u64, index: usize) -> Result<Scene, String> {
    let cfg = SynthConfig { count: index + 1, side: SIDE, seed, ..SynthConfig::default() };
    render_scene(&cfg, index).map_err(|e| e.to_string())
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("serializable")
}

fn error_json(e: String) -> String {
    to_json(&serde_json::json!({ "error": e }))
}

#[derive(Debug, Serialize)]
pub struct CropView {
    pub scene: Raster,
    pub mask: Raster,
    pub crop: Raster,
    /// Row-major keep flags, one per encoder patch.
    pub patch_mask: Vec<bool>,
    pub grid: usize,
    pub proposals: usize,
}

/// The crop the encoder sees for proposal `proposal` of scene `index`.
pub fn crop_view(seed: u64, index: usize, proposal: usize, keep_background: bool) -> Result<CropView, String> {
    let s = scene(seed, index)?;
    let n = s.proposals.len();
    let mask = s.proposals.get(proposal % n.max(1)).ok_or("scene has no proposals")?;
    let enc = EncoderConfig::default();
    let opts = CropOptions::new(enc.image_side, enc.patch_size).keep_background(keep_background);
    let crop = crop_resize_mask(&s.image, mask, opts).map_err(|e| e.to_string())?;
    let mut overlay = Raster::from_image(&s.image);
    for (px, &on) in mask.data().iter().enumerate() {
        let a = &mut overlay.rgba[px * 4..px * 4 + 3];
        if on {
            a.copy_from_slice(&[255, 255, 255]);
        } else {
            a.iter_mut().for_each(|v| *v /= 3);
        }
    }
    Ok(CropView {
        scene: Raster::from_image(&s.image),
        mask: overlay,
        crop: Raster::from_image(&crop.pixels),
        patch_mask: crop.patch_mask,
        grid: enc.grid(),
        proposals: n,
    })
}

#[wasm_bindgen(js_name = cropView)]
pub fn crop_view_js(seed: u32, index: u32, proposal: u32, keep_background: bool) -> String {
    match crop_view(seed as u64, index as usize, proposal as usize, keep_background) {
        Ok(v) => to_json(&v),
        Err(e) => error_json(e),
    }
}

#[derive(Debug, Serialize)]
pub struct EnsembleCurve {
    pub lambdas: Vec<f64>,
    /// `blend[i][k]`: class `k` at `lambdas[i]`, renormalized for display.
    pub blend: Vec<Vec<f64>>,
    pub argmax: Vec<usize>,
}

/// `p^(1-λ)·p̂^λ` over `steps + 1` evenly spaced λ.
pub fn ensemble_curve(p: &[f64], p_hat: &[f64], steps: usize) -> Result<EnsembleCurve, String> {
    let steps = steps.max(1);
    let (p, q) = (ClassDistribution::new(p.to_vec()), ClassDistribution::new(p_hat.to_vec()));
    let mut out = EnsembleCurve { lambdas: Vec::new(), blend: Vec::new(), argmax: Vec::new() };
    for i in 0..=steps {
        let lambda = i as f64 / steps as f64;
        let b = ensemble(&p, &q, lambda).map_err(|e| e.to_string())?;
        out.argmax.push(b.argmax());
        out.blend.push(b.renormalized().probs);
        out.lambdas.push(lambda);
    }
    Ok(out)
}

#[wasm_bindgen(js_name = ensembleCurve)]
pub fn ensemble_curve_js(p: Vec<f64>, p_hat: Vec<f64>, steps: u32) -> String {
    match ensemble_curve(&p, &p_hat, steps as usize) {
        Ok(v) => to_json(&v),
        Err(e) => error_json(e),
    }
}

#[derive(Debug, Serialize)]
pub struct SegmentView {
    pub scene: Raster,
    pub truth: Raster,
    pub prediction: Raster,
    pub miou: f64,
    pub applied_lambda: f64,
    pub classes: Vec<&'static str>,
    pub palette: Vec<[u8; 3]>,
}

/// Segments one scene with an untrained encoder, so the result leans on
/// the proposal embeddings as λ falls.
pub fn segment_view(seed: u64, index: usize, lambda: f64) -> Result<SegmentView, String> {
    let s = scene(seed, index)?;
    let err = |e: ovseg::Error| e.to_string();
    let state = EncoderState::<f32>::init(EncoderConfig::default(), seed).map_err(err)?;
    let names: Vec<String> = SHAPES.iter().map(|s| s.to_string()).collect();
    let vocab = VocabularyEmbeddings::<f32>::build(&names, &default_templates(), state.config.dim)
        .and_then(|v| v.with_default_no_object())
        .map_err(err)?;
    let mut set = ProposalSet::new(s.proposals.clone()).map_err(err)?;
    if let Some(e) = &s.embeddings {
        set = set.with_embeddings(e.clone()).map_err(err)?;
    }
    let opts = SegmentOptions { lambda, ..SegmentOptions::default() };
    let out = segment(&s.image, &set, &vocab, &state, &opts).map_err(err)?;
    let mut acc = IouAccumulator::new(SHAPES.len());
    acc.add(&out.map, &s.gt).map_err(err)?;
    let vocab_meta = ovseg::pipeline::synth::shape_vocabulary();
    Ok(SegmentView {
        scene: Raster::from_image(&s.image),
        truth: Raster::from_map(&s.gt),
        prediction: Raster::from_map(&out.map),
        miou: acc.report(&vocab_meta).map_err(err)?.miou,
        applied_lambda: out.lambda,
        classes: SHAPES.to_vec(),
        palette: PALETTE.to_vec(),
    })
}

#[wasm_bindgen(js_name = segmentView)]
pub fn segment_view_js(seed: u32, index: u32, lambda: f64) -> String {
    match segment_view(seed as u64, index as usize, lambda) {
        Ok(v) => to_json(&v),
        Err(e) => error_json(e),
    }
}
