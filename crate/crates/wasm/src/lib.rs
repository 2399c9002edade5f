//! Browser bindings for the demo page in `www/`.

pub mod demo;

use wasm_bindgen::prelude::*;

/// An RGBA frame plus a JSON summary, handed to JavaScript in one object.
#[wasm_bindgen]
pub struct View {
    rgba: Vec<u8>,
    summary: String,
}

#[wasm_bindgen]
impl View {
    /// Copies the pixels into a `Uint8ClampedArray`-compatible buffer.
    pub fn rgba(&self) -> Vec<u8> {
        self.rgba.clone()
    }

    pub fn summary(&self) -> String {
        self.summary.clone()
    }
}

fn view(img: demo::Image, summary: &impl serde::Serialize) -> Result<View, JsError> {
    Ok(View {
        rgba: img.rgba,
        summary: serde_json::to_string(summary)?,
    })
}

#[wasm_bindgen]
pub struct Scene {
    inner: demo::Demo,
}

#[wasm_bindgen]
impl Scene {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32) -> Result<Scene, JsError> {
        let inner = demo::Demo::new(seed as u64).map_err(|e| JsError::new(&e))?;
        Ok(Scene { inner })
    }

    pub fn width(&self) -> usize {
        self.inner.width()
    }

    pub fn height(&self) -> usize {
        self.inner.height()
    }

    pub fn sampson(&self, beta: f64) -> Result<View, JsError> {
        let (img, stats) = self.inner.sampson_view(beta).map_err(|e| JsError::new(&e))?;
        view(img, &stats)
    }

    /// JSON report of depth metrics and the scale/shift-invariant loss.
    pub fn depth(&self, scale: f64, shift: f64, noise: f64, seed: u32) -> Result<String, JsError> {
        let report = self.inner.depth_alignment(scale, shift, noise, seed as u64).map_err(|e| JsError::new(&e))?;
        Ok(serde_json::to_string(&report)?)
    }

    pub fn flow(&self, dx: f64, dy: f64, dz: f64) -> Result<View, JsError> {
        let (img, report) = self.inner.flow_loss([dx, dy, dz]).map_err(|e| JsError::new(&e))?;
        view(img, &report)
    }
}
