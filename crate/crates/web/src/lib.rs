//! Browser bindings: the size table, the toy trajectory and RandTopk
//! selection frequencies. Every export returns a JSON string.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use wasm_bindgen::prelude::*;

use splitcomm::codec::{select_randtopk, select_topk};
use splitcomm::experiment::{anchor_rows, cmd_size_table};
use splitcomm::toy;

fn to_json<T: Serialize>(value: &T) -> Result<String, JsError> {
    serde_json::to_string(value).map_err(|e| JsError::new(&e.to_string()))
}

fn js(e: splitcomm::Error) -> JsError {
    JsError::new(&e.to_string())
}

#[derive(Serialize)]
struct SizeTable {
    rows: Vec<splitcomm::experiment::SizeRow>,
    anchors: Vec<splitcomm::experiment::SizeRow>,
}

#[wasm_bindgen]
pub fn size_table(d: Vec<u32>, k: Vec<u32>, bits: Vec<u32>, value_bits: u32) -> Result<String, JsError> {
    let d: Vec<usize> = d.into_iter().map(|v| v as usize).collect();
    let k: Vec<usize> = k.into_iter().map(|v| v as usize).collect();
    to_json(&SizeTable {
        rows: cmd_size_table(&d, &k, &bits, value_bits).map_err(js)?,
        anchors: anchor_rows().map_err(js)?,
    })
}

/// Trajectory of `(w1, w2)` and the loss for one alpha.
#[wasm_bindgen]
pub fn toy_trajectory(alpha: f64, steps: u32, lr: f64, seed: u32, record_every: u32) -> Result<String, JsError> {
    let run = toy::run(alpha, steps as usize, lr, seed as u64, record_every.max(1) as usize).map_err(js)?;
    to_json(&run)
}

#[derive(Serialize)]
struct Frequencies {
    top: Vec<usize>,
    empirical: Vec<f64>,
    exact: Vec<f64>,
}

/// Per-index selection frequency over `draws` seeded RandTopk selections,
/// next to the exact inclusion probabilities.
#[wasm_bindgen]
pub fn randtopk_frequencies(values: Vec<f64>, k: u32, alpha: f64, draws: u32, seed: u32) -> Result<String, JsError> {
    let k = k as usize;
    if values.len() > 12 {
        return Err(JsError::new("at most 12 values, the exact enumeration is factorial"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed as u64);
    let mut counts = vec![0u64; values.len()];
    for _ in 0..draws {
        for i in select_randtopk(&values, k, alpha, &mut rng).map_err(js)? {
            counts[i] += 1;
        }
    }
    let top = select_topk(&values, k).map_err(js)?;
    to_json(&Frequencies {
        exact: inclusion_probabilities(values.len(), &top, k, alpha),
        empirical: counts.iter().map(|&c| c as f64 / draws.max(1) as f64).collect(),
        top,
    })
}

/// Probability that each index is among the `k` sequential draws, where a
/// draw takes a remaining top index with total probability `1 - alpha` and a
/// remaining other index with total probability `alpha`, uniformly within the
/// group, and falls back to the other group once one is exhausted.
pub fn inclusion_probabilities(d: usize, top: &[usize], k: usize, alpha: f64) -> Vec<f64> {
    let mut is_top = vec![false; d];
    for &i in top {
        is_top[i] = true;
    }
    let mut out = vec![0.0; d];
    let mut taken = vec![false; d];
    walk(&is_top, k, alpha, 1.0, &mut taken, &mut out);
    out
}

fn walk(is_top: &[bool], left: usize, alpha: f64, p: f64, taken: &mut [bool], out: &mut [f64]) {
    if left == 0 || p == 0.0 {
        for (o, &t) in out.iter_mut().zip(taken.iter()) {
            if t {
                *o += p;
            }
        }
        return;
    }
    let free = |want: bool| (0..is_top.len()).filter(|&i| !taken[i] && is_top[i] == want).count();
    let (n_top, n_rest) = (free(true), free(false));
    let (p_top, p_rest) = match (n_top, n_rest) {
        (0, _) => (0.0, 1.0),
        (_, 0) => (1.0, 0.0),
        _ => (1.0 - alpha, alpha),
    };
    for i in 0..is_top.len() {
        if taken[i] {
            continue;
        }
        let q = if is_top[i] { p_top / n_top as f64 } else { p_rest / n_rest as f64 };
        taken[i] = true;
        walk(is_top, left - 1, alpha, p * q, taken, out);
        taken[i] = false;
    }
}
