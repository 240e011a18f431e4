//! Browser bindings over three small pieces of the OMAE core: memory
//! attention for a query, Gaussian smoothing of a frame-score signal, and
//! the frame-level ROC curve with its AUC.
//!
//! Matrices cross the boundary as flat row-major `Vec<f64>`; labels as
//! `0.0` / `1.0`.

use omae::metrics::roc_curve;
use omae::nalgebra::DMatrix;
use omae::network::memory_read;
use omae::postprocess::gaussian_filter;
use wasm_bindgen::prelude::*;

/// Attention of `query` over `items` memory rows.
///
/// Layout: `[weights (items), nearest, second (-1 if none), readout (dim)]`.
pub fn attention(query: &[f64], memory: &[f64], items: usize) -> Result<Vec<f64>, String> {
    if items == 0 || query.is_empty() || memory.len() != items * query.len() {
        return Err(format!(
            "memory has {} values, expected {items} items x {} dims",
            memory.len(),
            query.len()
        ));
    }
    let m = DMatrix::from_row_slice(items, query.len(), memory);
    let r = memory_read(&m, query).map_err(|e| e.to_string())?;
    let mut out = r.weights;
    out.push(r.nearest as f64);
    out.push(r.second.map_or(-1.0, |s| s as f64));
    out.extend(r.readout);
    Ok(out)
}

pub fn smooth(scores: &[f64], sigma: f64) -> Result<Vec<f64>, String> {
    if !(sigma > 0.0 && sigma <= 50.0) {
        return Err(format!("sigma must lie in (0, 50], got {sigma}"));
    }
    Ok(gaussian_filter(scores, sigma))
}

/// Layout: `[auc, fp0, tp0, fp1, tp1, ...]`, starting at the origin.
pub fn roc(scores: &[f64], labels: &[f64]) -> Result<Vec<f64>, String> {
    let labels: Vec<bool> = labels.iter().map(|&l| l >= 0.5).collect();
    let curve = roc_curve(scores, &labels).map_err(|e| e.to_string())?;
    let mut out = vec![curve.auc];
    for p in curve.points {
        out.push(p.fp);
        out.push(p.tp);
    }
    Ok(out)
}

#[wasm_bindgen(js_name = memoryAttention)]
pub fn memory_attention(query: Vec<f64>, memory: Vec<f64>, items: usize) -> Result<Vec<f64>, JsError> {
    attention(&query, &memory, items).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = smoothFrameScores)]
pub fn smooth_frame_scores(scores: Vec<f64>, sigma: f64) -> Result<Vec<f64>, JsError> {
    smooth(&scores, sigma).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = rocCurve)]
pub fn roc_curve_flat(scores: Vec<f64>, labels: Vec<f64>) -> Result<Vec<f64>, JsError> {
    roc(&scores, &labels).map_err(|e| JsError::new(&e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn attention_layout() {
        let out = attention(&[1.0, 0.0], &[2.0, 0.0, 0.0, 1.0, -1.0, 0.0], 3).unwrap();
        assert_eq!(out.len(), 3 + 2 + 2);
        assert!((out[..3].iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(out[3], 0.0);
        assert_eq!(out[4], 1.0);
        let c0 = 2.0 * out[0] - out[2];
        assert!((out[5] - c0).abs() < 1e-12);
        assert!(attention(&[1.0], &[1.0, 2.0, 3.0], 2).is_err());
        let single = attention(&[1.0], &[3.0], 1).unwrap();
        assert_eq!(single, vec![1.0, 0.0, -1.0, 3.0]);
    }

    #[test]
    fn smoothing_keeps_constants() {
        let out = smooth(&[0.25; 9], 3.0).unwrap();
        assert!(out.iter().all(|v| (v - 0.25).abs() < 1e-12));
        assert!(smooth(&[1.0], 0.0).is_err());
    }

    #[test]
    fn roc_layout() {
        let out = roc(&[0.1, 0.4, 0.35, 0.8], &[0.0, 0.0, 1.0, 1.0]).unwrap();
        assert!((out[0] - 0.75).abs() < 1e-12);
        assert_eq!(&out[1..3], &[0.0, 0.0]);
        assert_eq!(&out[out.len() - 2..], &[1.0, 1.0]);
        assert!(roc(&[0.2, 0.3], &[1.0, 1.0]).is_err());
    }
}
