//! Browser bindings: each export runs a small experiment and returns JSON
//! for the page in `www/` to plot.

pub mod demo;

use wasm_bindgen::prelude::*;

fn to_js<T: serde::Serialize>(r: Result<T, demo::DemoError>) -> Result<String, JsError> {
    let value = r.map_err(|e| JsError::new(&e.to_string()))?;
    serde_json::to_string(&value).map_err(|e| JsError::new(&e.to_string()))
}

/// Front-queue trajectories of the bounded and traditional controllers.
#[wasm_bindgen]
pub fn queue_comparison(
    arrival_base: f64,
    v_scale: f64,
    slots: u32,
    seed: u32,
) -> Result<String, JsError> {
    to_js(demo::queue_comparison(
        arrival_base,
        v_scale,
        slots as usize,
        seed as u64,
    ))
}

/// Cost breakdown of the bounded controller across the admissible V range.
#[wasm_bindgen]
pub fn v_sweep(points: u32, slots: u32, seed: u32) -> Result<String, JsError> {
    to_js(demo::v_sweep(points as usize, slots as usize, seed as u64))
}

/// Residuals of ADMM on one slot against the central optimum.
#[wasm_bindgen]
pub fn admm_convergence(slot: u32, rho: f64, max_iter: u32, seed: u32) -> Result<String, JsError> {
    to_js(demo::admm_convergence(
        slot as usize,
        rho,
        max_iter as usize,
        seed as u64,
    ))
}
