use rand::Rng;

use super::{Init, Linear};
use crate::error::{Result, TideError};
use crate::tape::{Graph, Mat, ParamId, ParamKind, ParamStore, Var};

/// Query/key/value/output projections of one attention site.
#[derive(Debug, Clone, PartialEq)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub width: usize,
}

impl Attention {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, name: &str, width: usize, heads: usize) -> Self {
        assert!(heads >= 1 && width % heads == 0, "width {width} not divisible by {heads} heads");
        let mut lin = |n: &str, gain: f64| {
            Linear::new(store, rng, &format!("{name}.{n}"), width, width, true, Init::Normal(gain), ParamKind::Base)
        };
        let q = lin("q", 1.0);
        let k = lin("k", 1.0);
        let v = lin("v", 1.0);
        let o = lin("o", 0.5);
        Self { q, k, v, o, heads, width }
    }

    pub fn projections(&self) -> [&Linear; 4] {
        [&self.q, &self.k, &self.v, &self.o]
    }

    pub fn projections_mut(&mut self) -> [&mut Linear; 4] {
        [&mut self.q, &mut self.k, &mut self.v, &mut self.o]
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.projections().iter().flat_map(|l| l.param_ids()).collect()
    }

    fn head_width(&self) -> usize {
        self.width / self.heads
    }
}

/// Cross-attention probabilities inside a graph, one N × L node per head.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub heads: Vec<Var>,
}

impl Layout {
    pub fn materialize(&self, g: &Graph) -> ImplicitLayout {
        ImplicitLayout { probs: self.heads.iter().map(|&h| g.to_mat(h)).collect() }
    }
}

/// Materialized cross-attention probabilities, N queries × L tokens per head.
#[derive(Debug, Clone, PartialEq)]
pub struct ImplicitLayout {
    pub probs: Vec<Mat>,
}

impl ImplicitLayout {
    pub fn head_count(&self) -> usize {
        self.probs.len()
    }

    /// Largest deviation of any row sum from 1; `None` if an entry is negative.
    pub fn max_row_error(&self) -> Option<f64> {
        let mut worst: f64 = 0.0;
        for p in &self.probs {
            if p.iter().any(|&v| v < 0.0 || !v.is_finite()) {
                return None;
            }
            for row in p.rows() {
                worst = worst.max((row.sum() - 1.0).abs());
            }
        }
        Some(worst)
    }

    /// Bitwise comparison of every entry.
    pub fn bit_equal(&self, other: &ImplicitLayout) -> bool {
        self.probs.len() == other.probs.len()
            && self
                .probs
                .iter()
                .zip(&other.probs)
                .all(|(a, b)| a.dim() == b.dim() && a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()))
    }
}

fn check_width(g: &Graph, x: Var, width: usize, what: &str) -> Result<()> {
    let c = g.shape(x).1;
    if c != width {
        return Err(TideError::shape(format!("{what} width {c}, attention expects {width}")));
    }
    Ok(())
}

/// softmax(Q·Kᵀ/√c_h) per head with Q from `x` and K from `ctx`, followed by
/// [`apply_shared_attention`]. Returns the output and the layout it used.
pub fn cross_attention(g: &mut Graph, x: Var, ctx: Var, p: &Attention) -> Result<(Var, Layout)> {
    check_width(g, x, p.width, "query")?;
    check_width(g, ctx, p.width, "context")?;
    let q = p.q.forward(g, x);
    let k = p.k.forward(g, ctx);
    let dh = p.head_width();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(p.heads);
    for h in 0..p.heads {
        let (qh, kh) = if p.heads == 1 { (q, k) } else { (g.cols(q, h * dh, dh), g.cols(k, h * dh, dh)) };
        let logits = g.matmul_t(qh, kh);
        let logits = g.scale(logits, scale);
        heads.push(g.softmax_rows(logits));
    }
    let layout = Layout { heads };
    let out = apply_shared_attention(g, &layout, ctx, p)?;
    Ok((out, layout))
}

/// `layout × V(ctx)` per head, concatenated and output-projected. The Q and K
/// projections of `p` are not evaluated.
pub fn apply_shared_attention(g: &mut Graph, layout: &Layout, ctx: Var, p: &Attention) -> Result<Var> {
    check_width(g, ctx, p.width, "context")?;
    if layout.heads.len() != p.heads {
        return Err(TideError::shape(format!("layout has {} heads, attention {}", layout.heads.len(), p.heads)));
    }
    let tokens = g.shape(ctx).0;
    for &h in &layout.heads {
        if g.shape(h).1 != tokens {
            return Err(TideError::shape(format!("layout covers {} tokens, context has {tokens}", g.shape(h).1)));
        }
    }
    let v = p.v.forward(g, ctx);
    let dh = p.head_width();
    let mut outs = Vec::with_capacity(p.heads);
    for (h, &probs) in layout.heads.iter().enumerate() {
        let vh = if p.heads == 1 { v } else { g.cols(v, h * dh, dh) };
        outs.push(g.matmul(probs, vh));
    }
    let mixed = g.concat_cols(&outs);
    Ok(p.o.forward(g, mixed))
}

pub fn self_attention(g: &mut Graph, x: Var, p: &Attention) -> Result<Var> {
    cross_attention(g, x, x, p).map(|(out, _)| out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::init_matrix;
    use ndarray::{arr2, Array2};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(width: usize, heads: usize) -> (ParamStore, Attention, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let att = Attention::new(&mut store, &mut rng, "att", width, heads);
        (store, att, rng)
    }

    /// Identity projections without bias.
    fn identity(store: &mut ParamStore, att: &Attention) {
        for l in att.projections() {
            store.set(l.weight, Mat::eye(att.width));
            store.set(l.bias.unwrap(), Mat::zeros((1, att.width)));
        }
    }

    #[test]
    fn single_token_context() {
        let (mut store, att, mut rng) = setup(4, 1);
        identity(&mut store, &att);
        let x = init_matrix(&mut rng, 5, 4, Init::Normal(1.0));
        let ctx = arr2(&[[0.1, -0.2, 0.3, 0.4]]);
        let mut g = Graph::new(&store);
        let xv = g.constant(x);
        let cv = g.constant(ctx.clone());
        let (out, layout) = cross_attention(&mut g, xv, cv, &att).unwrap();
        let l = layout.materialize(&g);
        assert!(l.probs[0].iter().all(|&p| p == 1.0));
        for row in g.value(out).rows() {
            assert_eq!(row, ctx.row(0));
        }
    }

    #[test]
    fn zero_logits_are_uniform() {
        let (mut store, att, mut rng) = setup(4, 1);
        identity(&mut store, &att);
        store.set(att.q.weight, Mat::zeros((4, 4)));
        let mut g = Graph::new(&store);
        let xv = g.constant(init_matrix(&mut rng, 3, 4, Init::Normal(1.0)));
        let cv = g.constant(init_matrix(&mut rng, 2, 4, Init::Normal(1.0)));
        let (_, layout) = cross_attention(&mut g, xv, cv, &att).unwrap();
        assert!(layout.materialize(&g).probs[0].iter().all(|&p| p == 0.5));
    }

    #[test]
    fn hand_softmax() {
        // width 1: logits are q·k/1 with q = ln 3, keys 1 and 0
        let (mut store, att, _) = setup(1, 1);
        identity(&mut store, &att);
        let mut g = Graph::new(&store);
        let xv = g.constant(arr2(&[[3f64.ln()]]));
        let cv = g.constant(arr2(&[[1.0], [0.0]]));
        let (_, layout) = cross_attention(&mut g, xv, cv, &att).unwrap();
        let p = &layout.materialize(&g).probs[0];
        assert!((p[[0, 0]] - 0.75).abs() < 1e-12);
        assert!((p[[0, 1]] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn shared_layout_mixes_values() {
        let (mut store, att, _) = setup(2, 1);
        identity(&mut store, &att);
        let mut g = Graph::new(&store);
        let probs = g.constant(arr2(&[[0.75, 0.25]]));
        let ctx = g.constant(arr2(&[[1.0, 2.0], [5.0, -4.0]]));
        let out = apply_shared_attention(&mut g, &Layout { heads: vec![probs] }, ctx, &att).unwrap();
        assert_eq!(g.to_mat(out), arr2(&[[0.75 + 1.25, 1.5 - 1.0]]));
        let bad = g.constant(arr2(&[[1.0, 0.0, 0.0]]));
        assert!(apply_shared_attention(&mut g, &Layout { heads: vec![bad] }, ctx, &att).is_err());
    }

    #[test]
    fn sharing_reproduces_cross_attention_bitwise() {
        for heads in [1, 2] {
            let (store, att, mut rng) = setup(8, heads);
            let x = init_matrix(&mut rng, 6, 8, Init::Normal(1.0));
            let ctx = init_matrix(&mut rng, 4, 8, Init::Normal(1.0));
            let mut g = Graph::new(&store);
            let xv = g.constant(x);
            let cv = g.constant(ctx);
            let (out, layout) = cross_attention(&mut g, xv, cv, &att).unwrap();
            let shared = apply_shared_attention(&mut g, &layout, cv, &att).unwrap();
            let (a, b) = (g.to_mat(out), g.to_mat(shared));
            assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
            let l = layout.materialize(&g);
            assert_eq!(l.head_count(), heads);
            assert!(l.max_row_error().unwrap() < 1e-12);
        }
    }

    #[test]
    fn width_mismatch() {
        let (store, att, _) = setup(4, 1);
        let mut g = Graph::new(&store);
        let xv = g.constant(Array2::zeros((2, 3)));
        let cv = g.constant(Array2::zeros((2, 4)));
        assert!(cross_attention(&mut g, xv, cv, &att).is_err());
    }
}
