//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use eamat_core::RunConfig;

/// Exhaustive `argmax_{s <= e} p_s[s]·p_e[e]`, scanning `s` then `e` ascending and
/// keeping the first strict maximum.
pub fn brute_decode(p_start: &[f64], p_end: &[f64]) -> (usize, usize, f64) {
    let mut best = (0, 0, f64::NEG_INFINITY);
    for s in 0..p_start.len() {
        for e in s..p_end.len() {
            let v = p_start[s] * p_end[e];
            if v > best.2 {
                best = (s, e, v);
            }
        }
    }
    best
}

/// Frame-counting IoU of inclusive spans.
pub fn brute_iou(a: (usize, usize), b: (usize, usize)) -> f64 {
    let hi = a.1.max(b.1);
    let (mut inter, mut union) = (0usize, 0usize);
    for f in 0..=hi {
        let in_a = a.0 <= f && f <= a.1;
        let in_b = b.0 <= f && f <= b.1;
        inter += (in_a && in_b) as usize;
        union += (in_a || in_b) as usize;
    }
    inter as f64 / union as f64
}

pub fn naive_softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

/// Narrow model for fast structural tests.
pub fn small_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.d = 12;
    cfg.d_word = 8;
    cfg.heads = 2;
    cfg.scales = 3;
    cfg.late_blocks = 1;
    cfg.t_min = 10;
    cfg.t_max = 16;
    cfg.span_max = 6;
    cfg
}
