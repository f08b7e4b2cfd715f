//! Neural building blocks on top of the [`crate::tape`] engine.

mod attention;
pub mod gradcheck;
mod tan;
mod text;

pub use attention::{
    apply_shared_attention, cross_attention, self_attention, Attention, ImplicitLayout, Layout,
};
pub use tan::{tan_combine, tan_modulate, tan_modulate_dual, time_embedding, TanLayer};
pub use text::{tokenize, TextEmbedding, TextEncoder, Vocab, BOS, EOS, UNK};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Result, TideError};
use crate::tape::{Graph, Mat, ParamId, ParamKind, ParamStore, Var};

/// Weight initialization for a fresh projection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Gaussian with standard deviation `gain / √fan_in`.
    Normal(f64),
    Zeros,
}

pub fn init_matrix<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, init: Init) -> Mat {
    match init {
        Init::Zeros => Mat::zeros((rows, cols)),
        Init::Normal(gain) => {
            let std = gain / (cols.max(1) as f64).sqrt();
            Mat::from_shape_simple_fn((rows, cols), || {
                let z: f64 = rng.sample(StandardNormal);
                z * std
            })
        }
    }
}

/// Trainable low-rank delta on a frozen projection.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    /// rank × in
    pub down: ParamId,
    /// out × rank, zero at initialization
    pub up: ParamId,
    pub rank: usize,
    pub scale: f64,
}

/// `y = x·Wᵀ + b`, optionally with a LoRA delta.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub lora: Option<LoraAdapter>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        init: Init,
        kind: ParamKind,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), init_matrix(rng, out_dim, in_dim, init), kind);
        let bias = bias.then(|| store.add(format!("{name}.bias"), Mat::zeros((1, out_dim)), kind));
        Self { weight, bias, lora: None, in_dim, out_dim }
    }

    /// Adds an adapter of `rank` (no-op for rank 0). The up matrix starts at
    /// zero so the layer output is unchanged.
    pub fn attach_lora<R: Rng + ?Sized>(&mut self, store: &mut ParamStore, rng: &mut R, rank: usize, scale: f64) {
        if rank == 0 {
            return;
        }
        let base = store.name(self.weight).trim_end_matches(".weight").to_string();
        let down = store.add(
            format!("{base}.lora_down"),
            init_matrix(rng, rank, self.in_dim, Init::Normal(1.0)),
            ParamKind::Lora,
        );
        let up = store.add(format!("{base}.lora_up"), Mat::zeros((self.out_dim, rank)), ParamKind::Lora);
        self.lora = Some(LoraAdapter { down, up, rank, scale });
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.weight);
        let adapter = self.lora.as_ref().map(|l| (g.param(l.down), g.param(l.up), l.scale));
        let mut y = lora_linear(g, x, w, adapter);
        if let Some(b) = self.bias {
            let bv = g.param(b);
            y = g.add_row(y, bv);
        }
        y
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.weight];
        ids.extend(self.bias);
        if let Some(l) = &self.lora {
            ids.push(l.down);
            ids.push(l.up);
        }
        ids
    }

    pub fn lora_ids(&self) -> Vec<ParamId> {
        self.lora.iter().flat_map(|l| [l.down, l.up]).collect()
    }
}

/// `x·Wᵀ + scale · (x·Aᵀ)·Bᵀ`. Gradients reach `W` only if it is trainable.
pub fn lora_linear(g: &mut Graph, x: Var, weight: Var, adapter: Option<(Var, Var, f64)>) -> Var {
    let base = g.matmul_t(x, weight);
    match adapter {
        None => base,
        Some((down, up, scale)) => {
            let h = g.matmul_t(x, down);
            let d = g.matmul_t(h, up);
            let d = g.scale(d, scale);
            g.add(base, d)
        }
    }
}

/// Checks that `lora_linear` operands line up: x is n × in, W out × in,
/// A r × in and B out × r with r ≤ in.
pub fn check_lora_dims(x: (usize, usize), w: (usize, usize), a: (usize, usize), b: (usize, usize)) -> Result<()> {
    let (r, a_in) = a;
    if x.1 != w.1 || a_in != w.1 || b != (w.0, r) || r > w.1 {
        return Err(TideError::shape(format!("lora dims x{x:?} W{w:?} A{a:?} B{b:?}")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn lora_hand_multiply() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.constant(arr2(&[[3.0, 4.0]]));
        let w = g.constant(Mat::zeros((2, 2)));
        let a = g.constant(arr2(&[[1.0, 0.0]]));
        let b = g.constant(arr2(&[[0.0], [1.0]]));
        let y = lora_linear(&mut g, x, w, Some((a, b, 1.0)));
        assert_eq!(g.to_mat(y), arr2(&[[0.0, 3.0]]));
    }

    #[test]
    fn fresh_adapter_is_exact_passthrough() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let mut lin = Linear::new(&mut store, &mut rng, "p", 5, 4, true, Init::Normal(1.0), ParamKind::Base);
        let x = init_matrix(&mut rng, 3, 5, Init::Normal(1.0));
        let before = {
            let mut g = Graph::new(&store);
            let xv = g.constant(x.clone());
            let y = lin.forward(&mut g, xv);
            g.to_mat(y)
        };
        lin.attach_lora(&mut store, &mut rng, 2, 1.0);
        let mut g = Graph::new(&store);
        let xv = g.constant(x.clone());
        let y = lin.forward(&mut g, xv);
        assert_eq!(g.to_mat(y), before);

        let mut lin0 = lin.clone();
        lin0.lora = None;
        lin0.attach_lora(&mut store, &mut rng, 0, 1.0);
        assert!(lin0.lora.is_none());
    }

    #[test]
    fn frozen_base_gets_no_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let mut lin = Linear::new(&mut store, &mut rng, "p", 3, 3, false, Init::Normal(1.0), ParamKind::Base);
        lin.attach_lora(&mut store, &mut rng, 1, 1.0);
        for id in lin.lora_ids() {
            store.set_trainable(id, true);
        }
        let mut g = Graph::new(&store);
        let x = g.constant(init_matrix(&mut rng, 2, 3, Init::Normal(1.0)));
        let y = lin.forward(&mut g, x);
        let l = g.mean(y);
        let grads = g.backward(l);
        assert!(grads.param(lin.weight).is_none());
        let l = lin.lora.as_ref().unwrap();
        // up is zero so nothing flows back into down
        assert!(grads.param(l.down).unwrap().iter().all(|&v| v == 0.0));
        assert!(grads.param(l.up).unwrap().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn lora_dim_check() {
        assert!(check_lora_dims((1, 4), (3, 4), (2, 4), (3, 2)).is_ok());
        assert!(check_lora_dims((1, 4), (3, 4), (5, 4), (3, 5)).is_err());
        assert!(check_lora_dims((1, 3), (3, 4), (2, 4), (3, 2)).is_err());
    }
}
