//! Browser bindings for three small `noisy-dal` operations. Each export is
//! a thin wrapper over a plain function so the logic is testable natively.

use noisy_dal::dataset::{synth_blobs, SynthConfig};
use noisy_dal::noise::NoiseSpec;
use noisy_dal::vit::ViTConfig;
use wasm_bindgen::prelude::*;

/// RGBA pixels (`side * side * 4` bytes) of sample `index` of `class`.
pub fn sample_rgba(
    classes: usize,
    side: usize,
    sigma: f64,
    seed: u64,
    class: usize,
    index: usize,
) -> Result<Vec<u8>, String> {
    if class >= classes {
        return Err(format!("class {class} out of range for {classes} classes"));
    }
    let config = SynthConfig { num_classes: classes, per_class: index + 1, side, sigma, seed };
    let data = synth_blobs(&config).map_err(|e| e.to_string())?;
    let image = data.image(index * classes + class);
    let plane = side * side;
    let mut out = Vec::with_capacity(plane * 4);
    for p in 0..plane {
        out.extend([image[p], image[plane + p], image[2 * plane + p], 255]);
    }
    Ok(out)
}

/// Row-normalized `classes x classes` matrix of observed label given true
/// label over `samples` balanced draws.
pub fn confusion(rate: f64, classes: usize, samples: usize, seed: u64) -> Result<Vec<f64>, String> {
    if classes < 2 || samples == 0 {
        return Err("need at least two classes and one sample".into());
    }
    let spec = NoiseSpec::symmetric(rate, seed).map_err(|e| e.to_string())?;
    let truth: Vec<usize> = (0..samples).map(|i| i % classes).collect();
    let indices: Vec<usize> = (0..samples).collect();
    let (noisy, _) = spec.corrupt_indexed(&indices, &truth, classes).map_err(|e| e.to_string())?;
    let mut table = vec![0.0; classes * classes];
    for (&y, &z) in truth.iter().zip(&noisy) {
        table[y * classes + z] += 1.0;
    }
    for row in table.chunks_mut(classes) {
        let n: f64 = row.iter().sum();
        if n > 0.0 {
            row.iter_mut().for_each(|v| *v /= n);
        }
    }
    Ok(table)
}

/// `[tokens, attention MACs, dense MACs, parameters]` of one forward pass
/// of a preset at the given input side.
pub fn cost(preset: &str, image_size: usize) -> Result<Vec<f64>, String> {
    let mut c = ViTConfig::preset(preset, 10).ok_or_else(|| format!("unknown preset '{preset}'"))?;
    c.image_size = image_size;
    c.validate().map_err(|e| e.to_string())?;
    let (t, e, m, l) = (c.tokens() as f64, c.embed_dim as f64, c.mlp_dim as f64, c.layers as f64);
    let attention = l * 2.0 * t * t * e;
    let dense = c.num_patches() as f64 * c.patch_dim() as f64 * e + l * (4.0 * t * e * e + 2.0 * t * e * m);
    Ok(vec![t, attention, dense, c.param_count() as f64])
}

#[wasm_bindgen(js_name = sampleRgba)]
pub fn sample_rgba_js(
    classes: usize,
    side: usize,
    sigma: f64,
    seed: u32,
    class: usize,
    index: usize,
) -> Result<Vec<u8>, JsValue> {
    sample_rgba(classes, side, sigma, seed as u64, class, index).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen(js_name = noiseConfusion)]
pub fn confusion_js(rate: f64, classes: usize, samples: usize, seed: u32) -> Result<Vec<f64>, JsValue> {
    confusion(rate, classes, samples, seed as u64).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen(js_name = tokenCost)]
pub fn cost_js(preset: &str, image_size: usize) -> Result<Vec<f64>, JsValue> {
    cost(preset, image_size).map_err(|e| JsValue::from_str(&e))
}
