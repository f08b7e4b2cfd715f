//! Time adaptive normalization: cross-modal residual modulation gated by time.
//!
//! x* = x + α·(γ ⊙ x + β), with γ and β read from another branch's features
//! and α = sigmoid(linear(x_t)) a single scalar per layer and timestep.

use rand::Rng;

use super::{Init, Linear};
use crate::error::{Result, TideError};
use crate::tape::{Graph, Mat, ParamId, ParamKind, ParamStore, Var};

/// Sinusoidal features of `t`: `[sin(t·f_k)…, cos(t·f_k)…]` with
/// `f_k = 10000^(−k/half)`. An odd width leaves the last entry zero.
pub fn time_embedding(t: f64, width: usize) -> Mat {
    let half = width / 2;
    let mut out = Mat::zeros((1, width));
    for k in 0..half {
        let freq = (-(10000f64.ln()) * k as f64 / half as f64).exp();
        out[[0, k]] = (t * freq).sin();
        out[[0, half + k]] = (t * freq).cos();
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct TanLayer {
    pub gamma_hidden: Linear,
    pub gamma_out: Linear,
    pub beta_hidden: Linear,
    pub beta_out: Linear,
    pub gate: Linear,
    pub width: usize,
}

impl TanLayer {
    /// Output layers of both perceptrons start at zero, so a fresh layer is
    /// the identity map.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        width: usize,
        time_width: usize,
    ) -> Self {
        let mut lin = |n: &str, i: usize, o: usize, init: Init| {
            Linear::new(store, rng, &format!("{name}.{n}"), i, o, true, init, ParamKind::Tan)
        };
        let gamma_hidden = lin("gamma_hidden", width, width, Init::Normal(1.0));
        let gamma_out = lin("gamma_out", width, width, Init::Zeros);
        let beta_hidden = lin("beta_hidden", width, width, Init::Normal(1.0));
        let beta_out = lin("beta_out", width, width, Init::Zeros);
        let gate = lin("gate", time_width, 1, Init::Normal(1.0));
        Self { gamma_hidden, gamma_out, beta_hidden, beta_out, gate, width }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        [&self.gamma_hidden, &self.gamma_out, &self.beta_hidden, &self.beta_out, &self.gate]
            .iter()
            .flat_map(|l| l.param_ids())
            .collect()
    }

    /// (γ, β) from cross-modal features, one row per spatial position.
    pub fn modulation(&self, g: &mut Graph, x_f: Var) -> (Var, Var) {
        let h = self.gamma_hidden.forward(g, x_f);
        let h = g.silu(h);
        let gamma = self.gamma_out.forward(g, h);
        let h = self.beta_hidden.forward(g, x_f);
        let h = g.silu(h);
        let beta = self.beta_out.forward(g, h);
        (gamma, beta)
    }

    /// α ∈ (0, 1) as a 1×1 node.
    pub fn gate(&self, g: &mut Graph, x_t: Var) -> Var {
        let pre = self.gate.forward(g, x_t);
        g.sigmoid(pre)
    }
}

/// x' = α·(γ ⊙ x + β); returns x* = x' + x.
pub fn tan_combine(g: &mut Graph, x: Var, gamma: Var, beta: Var, alpha: Var) -> Var {
    let gx = g.mul(gamma, x);
    let inner = g.add(gx, beta);
    let xp = g.mul_scalar(inner, alpha);
    g.add(xp, x)
}

fn check(g: &Graph, layer: &TanLayer, vars: &[Var], x_t: Var) -> Result<()> {
    let shape = g.shape(vars[0]);
    for &v in vars {
        let s = g.shape(v);
        if s != shape || s.1 != layer.width {
            return Err(TideError::shape(format!("TAN inputs {s:?} vs {shape:?}, width {}", layer.width)));
        }
    }
    if g.shape(x_t) != (1, layer.gate.in_dim) {
        return Err(TideError::shape(format!("time embedding {:?}, expected 1×{}", g.shape(x_t), layer.gate.in_dim)));
    }
    Ok(())
}

pub fn tan_modulate(g: &mut Graph, x: Var, x_f: Var, x_t: Var, layer: &TanLayer) -> Result<Var> {
    check(g, layer, &[x, x_f], x_t)?;
    let (gamma, beta) = layer.modulation(g, x_f);
    let alpha = layer.gate(g, x_t);
    Ok(tan_combine(g, x, gamma, beta, alpha))
}

/// Image-branch variant: γ and β from both annotation branches are averaged.
pub fn tan_modulate_dual(
    g: &mut Graph,
    x: Var,
    x_f_depth: Var,
    x_f_mask: Var,
    x_t: Var,
    layer: &TanLayer,
) -> Result<Var> {
    check(g, layer, &[x, x_f_depth, x_f_mask], x_t)?;
    let (gd, bd) = layer.modulation(g, x_f_depth);
    let (gm, bm) = layer.modulation(g, x_f_mask);
    let gs = g.add(gd, gm);
    let gamma = g.scale(gs, 0.5);
    let bs = g.add(bd, bm);
    let beta = g.scale(bs, 0.5);
    let alpha = layer.gate(g, x_t);
    Ok(tan_combine(g, x, gamma, beta, alpha))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::init_matrix;
    use ndarray::arr2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn bits(m: &Mat) -> Vec<u64> {
        m.iter().map(|v| v.to_bits()).collect()
    }

    #[test]
    fn time_embedding_closed_form() {
        let e = time_embedding(1.0, 2);
        assert_eq!(e, arr2(&[[1f64.sin(), 1f64.cos()]]));
        let z = time_embedding(0.0, 8);
        assert_eq!(z, arr2(&[[0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]]));
        assert_eq!(time_embedding(37.0, 16), time_embedding(37.0, 16));
    }

    #[test]
    fn scalar_substitution() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.constant(arr2(&[[2.0]]));
        let gamma = g.constant(arr2(&[[0.5]]));
        let beta = g.constant(arr2(&[[1.0]]));
        let alpha = g.constant(arr2(&[[0.5]]));
        let out = tan_combine(&mut g, x, gamma, beta, alpha);
        assert_eq!(g.scalar(out), 3.0);

        // dual: γ̄ = (1 + 0)/2, β̄ = (0 + 2)/2, α = 1, x = 1
        let x = g.constant(arr2(&[[1.0]]));
        let gs = g.constant(arr2(&[[0.5]]));
        let bs = g.constant(arr2(&[[1.0]]));
        let a = g.constant(arr2(&[[1.0]]));
        let out = tan_combine(&mut g, x, gs, bs, a);
        assert_eq!(g.scalar(out), 2.5);

        let closed = g.constant(arr2(&[[0.0]]));
        let out = tan_combine(&mut g, x, gamma, beta, closed);
        assert_eq!(g.scalar(out), 1.0);
    }

    fn layer() -> (ParamStore, TanLayer, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        let l = TanLayer::new(&mut store, &mut rng, "tan", 6, 4);
        (store, l, rng)
    }

    #[test]
    fn fresh_layer_is_identity() {
        let (store, l, mut rng) = layer();
        let x = init_matrix(&mut rng, 5, 6, Init::Normal(1.0));
        let mut g = Graph::new(&store);
        let xv = g.constant(x.clone());
        let f1 = g.constant(init_matrix(&mut rng, 5, 6, Init::Normal(3.0)));
        let f2 = g.constant(init_matrix(&mut rng, 5, 6, Init::Normal(3.0)));
        let t = g.constant(time_embedding(17.0, 4));
        let single = tan_modulate(&mut g, xv, f1, t, &l).unwrap();
        let dual = tan_modulate_dual(&mut g, xv, f1, f2, t, &l).unwrap();
        assert_eq!(bits(&g.to_mat(single)), bits(&x));
        assert_eq!(bits(&g.to_mat(dual)), bits(&x));
        let a = l.gate(&mut g, t);
        assert!(g.scalar(a) > 0.0 && g.scalar(a) < 1.0);
    }

    #[test]
    fn dual_with_equal_sources_matches_single() {
        let (mut store, l, mut rng) = layer();
        for id in [l.gamma_out.weight, l.beta_out.weight] {
            store.set(id, init_matrix(&mut rng, 6, 6, Init::Normal(1.0)));
        }
        let mut g = Graph::new(&store);
        let xv = g.constant(init_matrix(&mut rng, 3, 6, Init::Normal(1.0)));
        let f = g.constant(init_matrix(&mut rng, 3, 6, Init::Normal(1.0)));
        let t = g.constant(time_embedding(5.0, 4));
        let single = tan_modulate(&mut g, xv, f, t, &l).unwrap();
        let dual = tan_modulate_dual(&mut g, xv, f, f, t, &l).unwrap();
        let (a, b) = (g.to_mat(single), g.to_mat(dual));
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-14);
        }
        assert_ne!(a, g.to_mat(xv));
    }

    #[test]
    fn width_checks() {
        let (store, l, _) = layer();
        let mut g = Graph::new(&store);
        let x = g.constant(Mat::zeros((2, 6)));
        let f = g.constant(Mat::zeros((2, 5)));
        let t = g.constant(time_embedding(1.0, 4));
        assert!(tan_modulate(&mut g, x, f, t, &l).is_err());
        let t_bad = g.constant(time_embedding(1.0, 3));
        assert!(tan_modulate(&mut g, x, x, t_bad, &l).is_err());
    }
}
