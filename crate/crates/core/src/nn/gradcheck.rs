//! Finite-difference gradient checks for the differentiable units.
//!
//! Each unit builds a small problem whose inputs are all stored as
//! parameters, computes analytic gradients with the tape, and compares a
//! sample of entries against central differences.

use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{
    apply_shared_attention, cross_attention, init_matrix, lora_linear, tan_modulate, tan_modulate_dual,
    Attention, Init, Layout, TanLayer,
};
use crate::codec::{patchify, unpatchify};
use crate::error::{Result, TideError};
use crate::model::{Latents, ModelConfig, TideModel, Toggles};
use crate::seed;
use crate::tape::{Graph, Mat, ParamId, ParamKind, ParamStore, Var};
use crate::train::Objective;

pub const UNITS: [&str; 8] = [
    "cross_attention",
    "shared_attention",
    "tan",
    "tan_dual",
    "lora_linear",
    "lora_zero_up",
    "patch_embed",
    "joint_loss",
];

const STEP: f64 = 1e-5;
const FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub unit: String,
    pub max_rel_err: f64,
    pub checked: usize,
    pub pass: bool,
}

type LossFn = Box<dyn Fn(&ParamStore) -> Result<(f64, Vec<(ParamId, Mat)>)>>;

struct Problem {
    store: ParamStore,
    loss: LossFn,
    /// Entries sampled per tensor (all entries when the tensor is smaller).
    per_tensor: usize,
}

/// Loss from a graph builder, with gradients for every trainable tensor.
fn graph_loss<F>(build: F) -> LossFn
where
    F: Fn(&mut Graph) -> Result<Var> + 'static,
{
    Box::new(move |store: &ParamStore| {
        let mut g = Graph::new(store);
        let l = build(&mut g)?;
        let value = g.scalar(l);
        let grads = g.backward(l);
        let out = store
            .trainable_ids()
            .into_iter()
            .map(|id| (id, grads.param(id).cloned().unwrap_or_else(|| Mat::zeros(store.get(id).dim()))))
            .collect();
        Ok((value, out))
    })
}

/// Reduces `out` to a scalar with fixed random weights so every output
/// entry influences the loss differently.
fn probe(g: &mut Graph, out: Var, weights: &Mat) -> Var {
    let w = g.constant(weights.clone());
    let m = g.mul(out, w);
    g.mean(m)
}

fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
    init_matrix(rng, r, c, Init::Normal((c as f64).sqrt()))
}

fn add_input(store: &mut ParamStore, name: &str, value: Mat) -> ParamId {
    let id = store.add(name, value, ParamKind::Base);
    store.set_trainable(id, true);
    id
}

fn train_all(store: &mut ParamStore) {
    for id in store.ids().collect::<Vec<_>>() {
        store.set_trainable(id, true);
    }
}

fn attention_problem(rng: &mut ChaCha8Rng, shared: bool) -> Problem {
    let (width, heads, n, l) = (4, 2, 3, 5);
    let mut store = ParamStore::new();
    let att = Attention::new(&mut store, rng, "att", width, heads);
    for p in att.projections() {
        let b = p.bias.unwrap();
        store.set(b, random(rng, 1, width));
    }
    let ctx = add_input(&mut store, "ctx", random(rng, l, width));
    let weights = random(rng, n, width);
    train_all(&mut store);
    let loss = if shared {
        let probs: Vec<ParamId> = (0..heads)
            .map(|h| {
                let logits = random(rng, n, l);
                add_input(&mut store, &format!("probs{h}"), crate::tape::softmax_rows(logits.view()))
            })
            .collect();
        graph_loss(move |g| {
            let layout = Layout { heads: probs.iter().map(|&p| g.param(p)).collect() };
            let c = g.param(ctx);
            let out = apply_shared_attention(g, &layout, c, &att)?;
            Ok(probe(g, out, &weights))
        })
    } else {
        let x = add_input(&mut store, "x", random(rng, n, width));
        graph_loss(move |g| {
            let (xv, c) = (g.param(x), g.param(ctx));
            let (out, _) = cross_attention(g, xv, c, &att)?;
            Ok(probe(g, out, &weights))
        })
    };
    Problem { store, loss, per_tensor: 64 }
}

fn tan_problem(rng: &mut ChaCha8Rng, dual: bool) -> Problem {
    let (width, time_width, n) = (4, 6, 3);
    let mut store = ParamStore::new();
    let layer = TanLayer::new(&mut store, rng, "tan", width, time_width);
    for l in [&layer.gamma_out, &layer.beta_out] {
        store.set(l.weight, random(rng, width, width));
        store.set(l.bias.unwrap(), random(rng, 1, width));
    }
    let x = add_input(&mut store, "x", random(rng, n, width));
    let f1 = add_input(&mut store, "x_f1", random(rng, n, width));
    let f2 = add_input(&mut store, "x_f2", random(rng, n, width));
    let xt = add_input(&mut store, "x_t", random(rng, 1, time_width));
    let weights = random(rng, n, width);
    train_all(&mut store);
    let loss = graph_loss(move |g| {
        let (xv, a, t) = (g.param(x), g.param(f1), g.param(xt));
        let out = if dual {
            let b = g.param(f2);
            tan_modulate_dual(g, xv, a, b, t, &layer)?
        } else {
            tan_modulate(g, xv, a, t, &layer)?
        };
        Ok(probe(g, out, &weights))
    });
    Problem { store, loss, per_tensor: 64 }
}

fn lora_problem(rng: &mut ChaCha8Rng, zero_up: bool) -> Problem {
    let (din, dout, r, n) = (5, 4, 2, 3);
    let mut store = ParamStore::new();
    let x = add_input(&mut store, "x", random(rng, n, din));
    let w = store.add("w", random(rng, dout, din), ParamKind::Base);
    let down = add_input(&mut store, "down", random(rng, r, din));
    let up_value = if zero_up { Mat::zeros((dout, r)) } else { random(rng, dout, r) };
    let up = add_input(&mut store, "up", up_value);
    store.set_trainable(w, !zero_up);
    let weights = random(rng, n, dout);
    let loss = graph_loss(move |g| {
        let (xv, wv, a, b) = (g.param(x), g.param(w), g.param(down), g.param(up));
        let out = lora_linear(g, xv, wv, Some((a, b, 0.5)));
        Ok(probe(g, out, &weights))
    });
    Problem { store, loss, per_tensor: 64 }
}

fn patch_embed_problem(rng: &mut ChaCha8Rng) -> Problem {
    let (h, w, c, patch, width) = (4, 4, 3, 2, 5);
    let mut store = ParamStore::new();
    // the grid is stored as H × (W·C)
    let grid = add_input(&mut store, "grid", random(rng, h, w * c));
    let proj = add_input(&mut store, "projection", random(rng, width, patch * patch * c));
    let weights = random(rng, (h / patch) * (w / patch), width);
    let loss: LossFn = Box::new(move |store: &ParamStore| {
        let g3 = store.get(grid).clone().into_shape_with_order((h, w, c)).map_err(|e| TideError::shape(e.to_string()))?;
        let mut g = Graph::new(store);
        let tokens = g.input(patchify(g3.view(), patch)?);
        let p = g.param(proj);
        let out = g.matmul_t(tokens, p);
        let l = probe(&mut g, out, &weights);
        let value = g.scalar(l);
        let grads = g.backward(l);
        let token_grad = grads.var(tokens).cloned().unwrap_or_else(|| Mat::zeros(g.shape(tokens)));
        let grid_grad = unpatchify(token_grad.view(), h, w, c, patch)?
            .into_shape_with_order((h, w * c))
            .map_err(|e| TideError::shape(e.to_string()))?;
        Ok((value, vec![(grid, grid_grad), (proj, grads.param(proj).cloned().unwrap())]))
    });
    Problem { store, loss, per_tensor: 64 }
}

fn joint_problem(rng: &mut ChaCha8Rng) -> Result<Problem> {
    let cfg = ModelConfig {
        image_size: 4,
        patch: 2,
        width: 4,
        heads: 2,
        ff_mult: 2,
        image_layers: 2,
        mini_layers: 2,
        share_start: 0,
        share_end: 1,
        share_stride: 1,
        lora_ranks: [1, 2, 2],
        max_text_len: 8,
        ..ModelConfig::default()
    };
    let mut model = TideModel::new(cfg, rng)?;
    let randomize: Vec<ParamId> = model
        .store
        .ids()
        .filter(|&id| {
            let name = model.store.name(id);
            name.ends_with("lora_up") || name.contains("_out.") || name.contains("modulation")
        })
        .collect();
    for id in randomize {
        let (r, c) = model.store.get(id).dim();
        model.store.set(id, init_matrix(rng, r, c, Init::Normal(1.0)));
    }
    train_all(&mut model.store);
    let grid = |rng: &mut ChaCha8Rng, ch: usize| {
        ndarray::Array3::from_shape_fn((4, 4, ch), |_| rng.random_range(-1.0..1.0))
    };
    let noisy = Latents { image: grid(rng, 3), depth: grid(rng, 1), mask: grid(rng, 3) };
    let noise = Latents { image: grid(rng, 3), depth: grid(rng, 1), mask: grid(rng, 3) };
    let tokens = vec![0, 3, 4, 1];
    let store = model.store.clone();
    let loss = graph_loss(move |g| {
        let l = model.branch_losses(g, &noisy, &noise, 13, &tokens, Toggles::BOTH)?;
        let (li, ld, lm) = (l[0].unwrap(), l[1].unwrap(), l[2].unwrap());
        let s = g.add(li, ld);
        Ok(g.add(s, lm))
    });
    Ok(Problem { store, loss, per_tensor: 3 })
}

fn problem(unit: &str, rng: &mut ChaCha8Rng) -> Result<Problem> {
    Ok(match unit {
        "cross_attention" => attention_problem(rng, false),
        "shared_attention" => attention_problem(rng, true),
        "tan" => tan_problem(rng, false),
        "tan_dual" => tan_problem(rng, true),
        "lora_linear" => lora_problem(rng, false),
        "lora_zero_up" => lora_problem(rng, true),
        "patch_embed" => patch_embed_problem(rng),
        "joint_loss" => joint_problem(rng)?,
        other => return Err(TideError::invalid(format!("unknown gradcheck unit {other}"))),
    })
}

/// Relative error `|a − n| / max(|a|, |n|, 1e-6)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

pub fn grad_check(unit: &str, seed_value: u64, tol: f64) -> Result<GradReport> {
    let mut rng = seed::stream(seed_value, &[UNITS.iter().position(|u| *u == unit).unwrap_or(99) as u64]);
    let Problem { mut store, loss, per_tensor } = problem(unit, &mut rng)?;
    let (base, analytic) = loss(&store)?;
    if !base.is_finite() {
        return Err(TideError::NonFinite(format!("{unit} loss")));
    }
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for (id, grad) in &analytic {
        let n = grad.len();
        let cols = grad.ncols();
        let picks: Vec<usize> = if n <= per_tensor { (0..n).collect() } else { sample(&mut rng, n, per_tensor).into_vec() };
        for flat in picks {
            let idx = (flat / cols, flat % cols);
            let orig = store.get(*id)[idx];
            store.get_mut(*id)[idx] = orig + STEP;
            let (plus, _) = loss(&store)?;
            store.get_mut(*id)[idx] = orig - STEP;
            let (minus, _) = loss(&store)?;
            store.get_mut(*id)[idx] = orig;
            let numeric = (plus - minus) / (2.0 * STEP);
            let a = grad[idx];
            if !(a.is_finite() && numeric.is_finite()) {
                return Err(TideError::NonFinite(format!("{unit} gradient of {}", store.name(*id))));
            }
            worst = worst.max(rel_err(a, numeric));
            checked += 1;
        }
    }
    if unit == "lora_zero_up" {
        // the down projection must receive an exactly zero gradient
        let down = store.lookup("down").expect("down registered");
        let g = &analytic.iter().find(|(id, _)| *id == down).expect("down is trainable").1;
        if g.iter().any(|&v| v != 0.0) {
            worst = f64::INFINITY;
        }
    }
    Ok(GradReport { unit: unit.to_string(), max_rel_err: worst, checked, pass: worst <= tol })
}

pub fn grad_check_all(seed_value: u64, tol: f64) -> Result<Vec<GradReport>> {
    UNITS.iter().map(|u| grad_check(u, seed_value, tol)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_units_pass() {
        for r in grad_check_all(0, 1e-4).unwrap() {
            assert!(r.pass, "{r:?}");
            assert!(r.checked > 0);
        }
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(rel_err(0.0, 0.0), 0.0);
        assert!((rel_err(1.0, 1.1) - 0.1 / 1.1).abs() < 1e-15);
        assert!(grad_check("nope", 0, 1e-4).is_err());
    }
}
