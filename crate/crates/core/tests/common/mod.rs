#![allow(dead_code)]

use std::collections::BTreeMap;

use mv2d::params::ParamStore;
use mv2d::pipeline::{self, PipelineConfig};
use mv2d::tensor::Tensor;

/// Step for central differences; small gradients drown in round-off below it.
pub const FD_STEP: f64 = 1e-4;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Worst relative error over every scalar of `store`, with the entry name.
pub fn check_store_gradients(
    store: &ParamStore,
    grads: &BTreeMap<String, Tensor>,
    loss: impl Fn(&ParamStore) -> f64,
) -> (f64, String) {
    let mut worst = (0.0, String::new());
    for name in store.names() {
        let base = store.get(name).unwrap();
        for i in 0..base.len() {
            let mut s = store.clone();
            s.get_mut(name).unwrap().data[i] = base.data[i] + FD_STEP;
            let plus = loss(&s);
            s.get_mut(name).unwrap().data[i] = base.data[i] - FD_STEP;
            let minus = loss(&s);
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let analytic = grads.get(name).map_or(0.0, |g| g.data[i]);
            let rel = relative_error(analytic, numeric);
            if rel > worst.0 {
                worst = (rel, format!("{name}[{i}]"));
            }
        }
    }
    worst
}

/// A small, fast pipeline configuration.
pub fn tiny_config(seed: u64) -> PipelineConfig {
    PipelineConfig {
        seed,
        n_objects: 3,
        channels: 12,
        layers: 1,
        heads: 2,
        roi_size: 3,
        ..Default::default()
    }
}

pub fn tiny_inputs(cfg: &PipelineConfig) -> (mv2d::simulator::Scene, Vec<mv2d::model::QueryInput>) {
    let scene = pipeline::simulate(cfg).unwrap();
    let dets = pipeline::detect(cfg, &scene).unwrap();
    let fmaps = pipeline::features(cfg, &scene).unwrap();
    let assoc = pipeline::associate(cfg, &scene, &dets).unwrap();
    let inputs = pipeline::query_inputs(cfg, &scene, &dets, &fmaps, &assoc).unwrap();
    (scene, inputs)
}

/// Brute-force minimum summed in row order.
pub fn brute_force_min(cost: &[f64], n: usize, m: usize) -> f64 {
    fn rec(cost: &[f64], m: usize, row: usize, n: usize, used: &mut Vec<bool>, picks: &mut Vec<Option<usize>>, best: &mut f64) {
        if row == n {
            if picks.iter().filter(|p| p.is_some()).count() == n.min(m) {
                let total = picks
                    .iter()
                    .enumerate()
                    .filter_map(|(r, c)| c.map(|c| cost[r * m + c]))
                    .sum::<f64>();
                *best = best.min(total);
            }
            return;
        }
        // rows may go unassigned only when there are more rows than columns
        if n > m {
            picks.push(None);
            rec(cost, m, row + 1, n, used, picks, best);
            picks.pop();
        }
        for c in 0..m {
            if !used[c] {
                used[c] = true;
                picks.push(Some(c));
                rec(cost, m, row + 1, n, used, picks, best);
                picks.pop();
                used[c] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    rec(cost, m, 0, n, &mut vec![false; m], &mut Vec::new(), &mut best);
    best
}
