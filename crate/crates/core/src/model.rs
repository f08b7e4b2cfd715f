//! The tri-branch denoiser: a full-depth image branch and two shallower
//! annotation branches (depth, mask) coupled through shared cross-attention
//! layouts and TAN exchanges at the sites listed in a [`ShareMap`].

use ndarray::Array3;
use rand::Rng;

use crate::codec::patchify;
use crate::error::{Result, TideError};
use crate::nn::{
    apply_shared_attention, cross_attention, self_attention, tan_modulate, tan_modulate_dual, time_embedding,
    Attention, ImplicitLayout, Init, Layout, Linear, TanLayer, TextEncoder,
};
use crate::tape::{Graph, Mat, ParamId, ParamKind, ParamStore, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Modality {
    Image,
    Depth,
    Mask,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Image, Modality::Depth, Modality::Mask];

    pub fn channels(self) -> usize {
        match self {
            Modality::Depth => 1,
            _ => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Image => "image",
            Modality::Depth => "depth",
            Modality::Mask => "mask",
        }
    }

    pub fn index(self) -> usize {
        match self {
            Modality::Image => 0,
            Modality::Depth => 1,
            Modality::Mask => 2,
        }
    }
}

/// Where the TAN exchange sits inside a coupled block triple.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TanPlacement {
    /// After the whole block (self-attention, cross-attention, feedforward).
    AfterBlock,
    /// Between cross-attention and the feedforward sublayer.
    BeforeFeedForward,
}

impl TanPlacement {
    pub fn as_str(self) -> &'static str {
        match self {
            TanPlacement::AfterBlock => "after-block",
            TanPlacement::BeforeFeedForward => "before-ff",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "after-block" => Ok(TanPlacement::AfterBlock),
            "before-ff" => Ok(TanPlacement::BeforeFeedForward),
            other => Err(TideError::invalid(format!("unknown TAN placement {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch: usize,
    pub width: usize,
    pub heads: usize,
    pub ff_mult: usize,
    pub image_layers: usize,
    pub mini_layers: usize,
    pub share_start: usize,
    pub share_end: usize,
    pub share_stride: usize,
    /// LoRA ranks for the image, depth and mask branches.
    pub lora_ranks: [usize; 3],
    pub lora_scale: f64,
    pub max_text_len: usize,
    pub vocab_size: usize,
    /// Whether TAN layers are built at all.
    pub tan: bool,
    pub tan_placement: TanPlacement,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 16,
            patch: 4,
            width: 64,
            heads: 1,
            ff_mult: 2,
            image_layers: 8,
            mini_layers: 4,
            share_start: 0,
            share_end: 7,
            share_stride: 2,
            lora_ranks: [4, 8, 8],
            lora_scale: 1.0,
            max_text_len: 16,
            vocab_size: crate::scenes::vocabulary().len(),
            tan: true,
            tan_placement: TanPlacement::AfterBlock,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.image_size % self.patch != 0 {
            return Err(TideError::invalid(format!("patch {} must divide image size {}", self.patch, self.image_size)));
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(TideError::invalid(format!("width {} not divisible by {} heads", self.width, self.heads)));
        }
        if self.image_layers == 0 || self.mini_layers == 0 || self.mini_layers > self.image_layers {
            return Err(TideError::invalid(format!(
                "need 1 <= mini layers ({}) <= image layers ({})",
                self.mini_layers, self.image_layers
            )));
        }
        if self.ff_mult == 0 || self.max_text_len < 2 || self.vocab_size < 4 {
            return Err(TideError::invalid("feedforward multiplier, text length or vocabulary too small"));
        }
        for (r, m) in self.lora_ranks.iter().zip(Modality::ALL) {
            if *r > self.width {
                return Err(TideError::invalid(format!("{} LoRA rank {r} exceeds width {}", m.name(), self.width)));
            }
        }
        self.share_map()?;
        Ok(())
    }

    pub fn tokens(&self) -> usize {
        let side = self.image_size / self.patch;
        side * side
    }

    pub fn patch_features(&self, m: Modality) -> usize {
        self.patch * self.patch * m.channels()
    }

    pub fn share_map(&self) -> Result<ShareMap> {
        build_share_map(self.image_layers, self.mini_layers, self.share_start, self.share_end, self.share_stride)
    }

    pub fn branch_spec(&self, m: Modality) -> BranchSpec {
        BranchSpec {
            layers: if m == Modality::Image { self.image_layers } else { self.mini_layers },
            width: self.width,
            grid: self.image_size / self.patch,
            lora_rank: self.lora_ranks[m.index()],
            modality: m,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BranchSpec {
    pub layers: usize,
    pub width: usize,
    /// Patch tokens per side of the latent grid.
    pub grid: usize,
    pub lora_rank: usize,
    pub modality: Modality,
}

/// Image layer → annotation layer pairs, strictly increasing in both.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShareMap {
    pairs: Vec<(usize, usize)>,
}

impl ShareMap {
    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Position in the map of the pair whose image layer is `layer`.
    pub fn site_for_image_layer(&self, layer: usize) -> Option<usize> {
        self.pairs.iter().position(|&(i, _)| i == layer)
    }
}

/// Pairs `(start + j·stride → j)` while the image index stays within
/// `end` and the annotation index below `mini_layers`.
pub fn build_share_map(
    image_layers: usize,
    mini_layers: usize,
    start: usize,
    end: usize,
    stride: usize,
) -> Result<ShareMap> {
    if stride == 0 {
        return Err(TideError::invalid("share stride must be at least 1"));
    }
    if start > end || end >= image_layers {
        return Err(TideError::invalid(format!(
            "share range {{{start}, {end}}} invalid for {image_layers} image layers"
        )));
    }
    let pairs: Vec<(usize, usize)> = (0..mini_layers)
        .map(|j| (start + j * stride, j))
        .take_while(|&(i, _)| i <= end)
        .collect();
    if pairs.is_empty() {
        return Err(TideError::invalid("share map is empty"));
    }
    Ok(ShareMap { pairs })
}

/// Self-attention, cross-attention (the layout site) and feedforward, each
/// residual. Pre-norms of the self-attention and feedforward sublayers are
/// modulated by the branch time embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub modulation: Linear,
    pub self_attn: Attention,
    pub cross_attn: Attention,
    pub ff_in: Linear,
    pub ff_out: Linear,
}

impl Block {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, name: &str, cfg: &ModelConfig) -> Self {
        let c = cfg.width;
        let base = ParamKind::Base;
        Self {
            modulation: Linear::new(store, rng, &format!("{name}.modulation"), c, 2 * c, true, Init::Zeros, base),
            self_attn: Attention::new(store, rng, &format!("{name}.self_attn"), c, cfg.heads),
            cross_attn: Attention::new(store, rng, &format!("{name}.cross_attn"), c, cfg.heads),
            ff_in: Linear::new(store, rng, &format!("{name}.ff_in"), c, cfg.ff_mult * c, true, Init::Normal(1.0), base),
            ff_out: Linear::new(store, rng, &format!("{name}.ff_out"), cfg.ff_mult * c, c, true, Init::Normal(0.5), base),
        }
    }

    fn linears(&self) -> Vec<&Linear> {
        let mut v = vec![&self.modulation];
        v.extend(self.self_attn.projections());
        v.extend(self.cross_attn.projections());
        v.push(&self.ff_in);
        v.push(&self.ff_out);
        v
    }

    fn adapted_mut(&mut self) -> Vec<&mut Linear> {
        let mut v: Vec<&mut Linear> = Vec::new();
        v.extend(self.self_attn.projections_mut());
        v.extend(self.cross_attn.projections_mut());
        v.push(&mut self.ff_in);
        v.push(&mut self.ff_out);
        v
    }

    fn modulated_norm(g: &mut Graph, x: Var, shift: Var, scale: Var) -> Var {
        let n = g.layer_norm(x);
        let s = g.mul_row(n, scale);
        let n = g.add(n, s);
        g.add_row(n, shift)
    }

    /// Runs self- and cross-attention. With `shared` the cross-attention
    /// consumes that layout instead of computing its own.
    fn attend(
        &self,
        g: &mut Graph,
        x: Var,
        text: Var,
        mods: (Var, Var),
        shared: Option<&Layout>,
    ) -> Result<(Var, Layout)> {
        let h = Self::modulated_norm(g, x, mods.0, mods.1);
        let sa = self_attention(g, h, &self.self_attn)?;
        let x = g.add(x, sa);
        let h = g.layer_norm(x);
        let (ca, layout) = match shared {
            Some(l) => (apply_shared_attention(g, l, text, &self.cross_attn)?, l.clone()),
            None => cross_attention(g, h, text, &self.cross_attn)?,
        };
        Ok((g.add(x, ca), layout))
    }

    fn feed_forward(&self, g: &mut Graph, x: Var, mods: (Var, Var)) -> Var {
        let h = Self::modulated_norm(g, x, mods.0, mods.1);
        let h = self.ff_in.forward(g, h);
        let h = g.silu(h);
        let h = self.ff_out.forward(g, h);
        g.add(x, h)
    }

    fn mods(&self, g: &mut Graph, temb: Var, width: usize) -> (Var, Var) {
        let m = self.modulation.forward(g, temb);
        (g.cols(m, 0, width), g.cols(m, width, width))
    }
}

/// One denoising transformer stack.
#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    pub modality: Modality,
    pub prefix: String,
    pub width: usize,
    pub embed: Linear,
    pub positions: ParamId,
    pub time_in: Linear,
    pub time_out: Linear,
    pub blocks: Vec<Block>,
    pub head: Linear,
}

impl Branch {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        prefix: &str,
        modality: Modality,
        layers: usize,
        cfg: &ModelConfig,
    ) -> Self {
        let c = cfg.width;
        let p = cfg.patch_features(modality);
        let base = ParamKind::Base;
        let embed = Linear::new(store, rng, &format!("{prefix}.embed"), p, c, true, Init::Normal(1.0), base);
        let positions = store.add(
            format!("{prefix}.positions"),
            crate::nn::init_matrix(rng, cfg.tokens(), c, Init::Normal(0.3 * (c as f64).sqrt())),
            base,
        );
        let time_in = Linear::new(store, rng, &format!("{prefix}.time_in"), c, c, true, Init::Normal(1.0), base);
        let time_out = Linear::new(store, rng, &format!("{prefix}.time_out"), c, c, true, Init::Normal(0.5), base);
        let blocks = (0..layers).map(|l| Block::new(store, rng, &format!("{prefix}.blocks.{l}"), cfg)).collect();
        let head = Linear::new(store, rng, &format!("{prefix}.head"), c, p, true, Init::Normal(0.5), base);
        Self { modality, prefix: prefix.to_string(), width: c, embed, positions, time_in, time_out, blocks, head }
    }

    pub fn layers(&self) -> usize {
        self.blocks.len()
    }

    pub fn linears(&self) -> Vec<&Linear> {
        let mut v = vec![&self.embed, &self.time_in, &self.time_out];
        for b in &self.blocks {
            v.extend(b.linears());
        }
        v.push(&self.head);
        v
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.linears().iter().flat_map(|l| l.param_ids()).collect();
        ids.push(self.positions);
        ids.sort();
        ids
    }

    pub fn base_ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self
            .linears()
            .iter()
            .flat_map(|l| std::iter::once(l.weight).chain(l.bias))
            .collect();
        ids.push(self.positions);
        ids.sort();
        ids
    }

    pub fn lora_ids(&self) -> Vec<ParamId> {
        self.linears().iter().flat_map(|l| l.lora_ids()).collect()
    }

    /// Attaches LoRA adapters to the embedding, head and every attention and
    /// feedforward projection.
    pub fn attach_lora<R: Rng + ?Sized>(&mut self, store: &mut ParamStore, rng: &mut R, rank: usize, scale: f64) {
        self.embed.attach_lora(store, rng, rank, scale);
        for b in &mut self.blocks {
            for l in b.adapted_mut() {
                l.attach_lora(store, rng, rank, scale);
            }
        }
        self.head.attach_lora(store, rng, rank, scale);
    }

    /// Branch time embedding (1 × c) from the raw sinusoidal features.
    pub fn time(&self, g: &mut Graph, sinus: Var) -> Var {
        let h = self.time_in.forward(g, sinus);
        let h = g.silu(h);
        self.time_out.forward(g, h)
    }

    /// Patch tokens → hidden states with positions and time added.
    pub fn embed_tokens(&self, g: &mut Graph, tokens: Var, temb: Var) -> Var {
        let x = self.embed.forward(g, tokens);
        let pos = g.param(self.positions);
        let x = g.add(x, pos);
        g.add_row(x, temb)
    }

    pub fn predict(&self, g: &mut Graph, x: Var) -> Var {
        let h = g.layer_norm(x);
        self.head.forward(g, h)
    }

    /// Runs the branch on its own (no sharing, no TAN) and returns the noise
    /// prediction plus the hidden state after every block.
    pub fn forward_solo(&self, g: &mut Graph, tokens: Var, sinus: Var, text: Var) -> Result<(Var, Vec<Var>)> {
        let temb = self.time(g, sinus);
        let mut x = self.embed_tokens(g, tokens, temb);
        let mut hidden = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let mods = b.mods(g, temb, self.width);
            let (h, _) = b.attend(g, x, text, mods, None)?;
            x = b.feed_forward(g, h, mods);
            hidden.push(x);
        }
        Ok((self.predict(g, x), hidden))
    }
}

/// Deep copy of the first `k` blocks (plus embedding, positions, time MLP and
/// head) of `source` under a new name prefix.
pub fn init_mini_from_image(store: &mut ParamStore, source: &Branch, k: usize, prefix: &str) -> Result<Branch> {
    if k == 0 || k > source.layers() {
        return Err(TideError::invalid(format!("cannot copy {k} of {} layers", source.layers())));
    }
    let mut copy = source.clone();
    copy.blocks.truncate(k);
    copy.prefix = prefix.to_string();
    let old_prefix = source.prefix.clone();
    let mut remap = |id: ParamId| -> ParamId {
        let name = store.name(id).to_string();
        let new_name = format!("{prefix}{}", &name[old_prefix.len()..]);
        let value = store.get(id).clone();
        let kind = store.kind(id);
        store.add(new_name, value, kind)
    };
    let remap_linear = |l: &mut Linear, remap: &mut dyn FnMut(ParamId) -> ParamId| {
        l.weight = remap(l.weight);
        l.bias = l.bias.map(&mut *remap);
        if let Some(a) = &mut l.lora {
            a.down = remap(a.down);
            a.up = remap(a.up);
        }
    };
    remap_linear(&mut copy.embed, &mut remap);
    copy.positions = remap(copy.positions);
    remap_linear(&mut copy.time_in, &mut remap);
    remap_linear(&mut copy.time_out, &mut remap);
    for b in &mut copy.blocks {
        remap_linear(&mut b.modulation, &mut remap);
        for l in b.self_attn.projections_mut() {
            remap_linear(l, &mut remap);
        }
        for l in b.cross_attn.projections_mut() {
            remap_linear(l, &mut remap);
        }
        remap_linear(&mut b.ff_in, &mut remap);
        remap_linear(&mut b.ff_out, &mut remap);
    }
    remap_linear(&mut copy.head, &mut remap);
    Ok(copy)
}

/// The three TAN layers of one coupling site.
#[derive(Debug, Clone, PartialEq)]
pub struct TanSite {
    pub image: TanLayer,
    pub depth: TanLayer,
    pub mask: TanLayer,
}

impl TanSite {
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.image.param_ids();
        ids.extend(self.depth.param_ids());
        ids.extend(self.mask.param_ids());
        ids
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Toggles {
    pub ils: bool,
    pub tan: bool,
}

impl Toggles {
    pub const BOTH: Toggles = Toggles { ils: true, tan: true };
    pub const NEITHER: Toggles = Toggles { ils: false, tan: false };
}

/// Latents for the three branches, each H × W × C.
#[derive(Debug, Clone, PartialEq)]
pub struct Latents {
    pub image: Array3<f64>,
    pub depth: Array3<f64>,
    pub mask: Array3<f64>,
}

impl Latents {
    pub fn get(&self, m: Modality) -> &Array3<f64> {
        match m {
            Modality::Image => &self.image,
            Modality::Depth => &self.depth,
            Modality::Mask => &self.mask,
        }
    }

    pub fn get_mut(&mut self, m: Modality) -> &mut Array3<f64> {
        match m {
            Modality::Image => &mut self.image,
            Modality::Depth => &mut self.depth,
            Modality::Mask => &mut self.mask,
        }
    }
}

/// Noise predictions as patch-token nodes (N × patch features), in
/// image/depth/mask order, plus an optional trace.
pub struct JointOutput {
    pub eps: [Var; 3],
    pub trace: Option<JointTrace>,
}

/// Materialized intermediates of one joint forward pass.
#[derive(Debug, Clone, Default)]
pub struct JointTrace {
    /// Cross-attention layout computed at every image layer.
    pub image_layouts: Vec<ImplicitLayout>,
    /// Layout each annotation layer used, depth then mask.
    pub consumed: [Vec<ImplicitLayout>; 2],
    /// Hidden state after every block, per branch (before any TAN).
    pub hidden: [Vec<Mat>; 3],
}

/// Text-conditioned tri-branch denoiser.
#[derive(Debug, Clone)]
pub struct TideModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub text: TextEncoder,
    pub image: Branch,
    pub depth: Branch,
    pub mask: Branch,
    pub share: ShareMap,
    pub tan: Vec<TanSite>,
}

impl TideModel {
    /// Randomly initialized model with adapters and (if enabled) TAN sites.
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let text = TextEncoder::new(&mut store, rng, "text", config.vocab_size, config.max_text_len, config.width);
        let mut image = Branch::new(&mut store, rng, "image", Modality::Image, config.image_layers, &config);
        let mut depth = Branch::new(&mut store, rng, "depth", Modality::Depth, config.mini_layers, &config);
        let mut mask = Branch::new(&mut store, rng, "mask", Modality::Mask, config.mini_layers, &config);
        let [ri, rd, rm] = config.lora_ranks;
        image.attach_lora(&mut store, rng, ri, config.lora_scale);
        depth.attach_lora(&mut store, rng, rd, config.lora_scale);
        mask.attach_lora(&mut store, rng, rm, config.lora_scale);
        let share = config.share_map()?;
        let tan = if config.tan {
            (0..share.len())
                .map(|s| {
                    let mut layer = |m: &str| TanLayer::new(&mut store, rng, &format!("tan.{s}.{m}"), config.width, config.width);
                    TanSite { image: layer("image"), depth: layer("depth"), mask: layer("mask") }
                })
                .collect()
        } else {
            Vec::new()
        };
        Ok(Self { config, store, text, image, depth, mask, share, tan })
    }

    pub fn branch(&self, m: Modality) -> &Branch {
        match m {
            Modality::Image => &self.image,
            Modality::Depth => &self.depth,
            Modality::Mask => &self.mask,
        }
    }

    /// Every LoRA and TAN tensor, in store order.
    pub fn trainable_parameters(&self) -> Vec<ParamId> {
        self.store
            .ids()
            .filter(|&id| matches!(self.store.kind(id), ParamKind::Lora | ParamKind::Tan))
            .collect()
    }

    /// Marks exactly [`Self::trainable_parameters`] as trainable.
    pub fn freeze_for_finetune(&mut self) {
        self.store.freeze_all();
        for id in self.trainable_parameters() {
            self.store.set_trainable(id, true);
        }
    }

    /// Patchifies a latent grid into the constant token input of a branch.
    pub fn tokens(&self, grid: &Array3<f64>, m: Modality) -> Result<Mat> {
        let (h, w, c) = grid.dim();
        if h != self.config.image_size || w != self.config.image_size || c != m.channels() {
            return Err(TideError::shape(format!(
                "{} latent {:?}, expected {s}×{s}×{}",
                m.name(),
                grid.dim(),
                m.channels(),
                s = self.config.image_size
            )));
        }
        patchify(grid.view(), self.config.patch)
    }

    /// Joint forward pass over the three latents at timestep `t`.
    pub fn forward_joint(
        &self,
        g: &mut Graph,
        latents: &Latents,
        t: usize,
        tokens: &[u32],
        toggles: Toggles,
        trace: bool,
    ) -> Result<JointOutput> {
        if toggles.tan && self.tan.is_empty() {
            return Err(TideError::invalid("TAN requested but the model was built without TAN layers"));
        }
        let inputs: Vec<Var> = Modality::ALL
            .iter()
            .map(|&m| self.tokens(latents.get(m), m).map(|tk| g.constant(tk)))
            .collect::<Result<_>>()?;
        let text = self.text.forward(g, tokens)?;
        let sinus = g.constant(time_embedding(t as f64, self.config.width));
        self.forward_tokens(g, [inputs[0], inputs[1], inputs[2]], sinus, text, toggles, trace)
    }

    /// Joint forward pass on already-patchified token nodes.
    pub fn forward_tokens(
        &self,
        g: &mut Graph,
        inputs: [Var; 3],
        sinus: Var,
        text: Var,
        toggles: Toggles,
        trace: bool,
    ) -> Result<JointOutput> {
        let branches = [&self.image, &self.depth, &self.mask];
        let temb: Vec<Var> = branches.iter().map(|b| b.time(g, sinus)).collect();
        let mut x: Vec<Var> = (0..3).map(|i| branches[i].embed_tokens(g, inputs[i], temb[i])).collect();
        let mut tr = trace.then(JointTrace::default);
        let c = self.config.width;
        let mut next_mini = 0usize;

        for l in 0..self.image.layers() {
            let block = &self.image.blocks[l];
            let mods_i = block.mods(g, temb[0], c);
            let (h_i, layout) = block.attend(g, x[0], text, mods_i, None)?;
            if let Some(t) = tr.as_mut() {
                t.image_layouts.push(layout.materialize(g));
            }
            let site = self.share.site_for_image_layer(l);
            let Some(site) = site else {
                x[0] = block.feed_forward(g, h_i, mods_i);
                if let Some(t) = tr.as_mut() {
                    t.hidden[0].push(g.to_mat(x[0]));
                }
                continue;
            };
            let j = self.share.pairs()[site].1;
            while next_mini < j {
                self.run_annotation_layer(g, &mut x, &temb, text, next_mini, None, &mut tr)?;
                next_mini += 1;
            }
            let shared = toggles.ils.then_some(&layout);
            let mut h = [h_i, x[1], x[2]];
            let mut mods = [mods_i, mods_i, mods_i];
            for b in 1..3 {
                let blk = &branches[b].blocks[j];
                mods[b] = blk.mods(g, temb[b], c);
                let (hb, used) = blk.attend(g, x[b], text, mods[b], shared)?;
                if let Some(t) = tr.as_mut() {
                    t.consumed[b - 1].push(used.materialize(g));
                }
                h[b] = hb;
            }
            let place = self.config.tan_placement;
            if toggles.tan && place == TanPlacement::BeforeFeedForward {
                h = self.exchange(g, site, h, sinus)?;
            }
            for b in 0..3 {
                let blk = &branches[b].blocks[if b == 0 { l } else { j }];
                x[b] = blk.feed_forward(g, h[b], mods[b]);
                if let Some(t) = tr.as_mut() {
                    t.hidden[b].push(g.to_mat(x[b]));
                }
            }
            if toggles.tan && place == TanPlacement::AfterBlock {
                let out = self.exchange(g, site, [x[0], x[1], x[2]], sinus)?;
                x.copy_from_slice(&out);
            }
            next_mini = j + 1;
        }
        while next_mini < self.config.mini_layers {
            self.run_annotation_layer(g, &mut x, &temb, text, next_mini, None, &mut tr)?;
            next_mini += 1;
        }
        let eps = [
            self.image.predict(g, x[0]),
            self.depth.predict(g, x[1]),
            self.mask.predict(g, x[2]),
        ];
        Ok(JointOutput { eps, trace: tr })
    }

    #[allow(clippy::too_many_arguments)]
    fn run_annotation_layer(
        &self,
        g: &mut Graph,
        x: &mut [Var],
        temb: &[Var],
        text: Var,
        j: usize,
        shared: Option<&Layout>,
        tr: &mut Option<JointTrace>,
    ) -> Result<()> {
        for (b, branch) in [(1, &self.depth), (2, &self.mask)] {
            let blk = &branch.blocks[j];
            let mods = blk.mods(g, temb[b], self.config.width);
            let (h, used) = blk.attend(g, x[b], text, mods, shared)?;
            x[b] = blk.feed_forward(g, h, mods);
            if let Some(t) = tr.as_mut() {
                t.consumed[b - 1].push(used.materialize(g));
                t.hidden[b].push(g.to_mat(x[b]));
            }
        }
        Ok(())
    }

    /// Simultaneous TAN exchange: depth ← mask, mask ← depth, image ← both.
    fn exchange(&self, g: &mut Graph, site: usize, x: [Var; 3], sinus: Var) -> Result<[Var; 3]> {
        let s = &self.tan[site];
        let depth = tan_modulate(g, x[1], x[2], sinus, &s.depth)?;
        let mask = tan_modulate(g, x[2], x[1], sinus, &s.mask)?;
        let image = tan_modulate_dual(g, x[0], x[1], x[2], sinus, &s.image)?;
        Ok([image, depth, mask])
    }
}

/// Stage-A model: the text encoder, the image branch and, once created, the
/// truncated copy that seeds both annotation branches.
#[derive(Debug, Clone)]
pub struct BaseModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub text: TextEncoder,
    pub image: Branch,
    pub mini: Option<Branch>,
}

impl BaseModel {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let text = TextEncoder::new(&mut store, rng, "text", config.vocab_size, config.max_text_len, config.width);
        let image = Branch::new(&mut store, rng, "image", Modality::Image, config.image_layers, &config);
        Ok(Self { config, store, text, image, mini: None })
    }

    /// Creates the mini branch as a copy of the first `mini_layers` image blocks.
    pub fn spawn_mini(&mut self) -> Result<()> {
        if self.mini.is_some() {
            return Err(TideError::invalid("mini branch already exists"));
        }
        self.mini = Some(init_mini_from_image(&mut self.store, &self.image, self.config.mini_layers, "mini")?);
        Ok(())
    }

    pub fn branch(&self, mini: bool) -> Result<&Branch> {
        if mini {
            self.mini.as_ref().ok_or_else(|| TideError::invalid("mini branch not created"))
        } else {
            Ok(&self.image)
        }
    }

    /// Stage-A trainable set: image branch plus text encoder, or the mini branch alone.
    pub fn set_stage_a_trainable(&mut self, mini: bool) -> Result<()> {
        let ids = if mini {
            self.branch(true)?.param_ids()
        } else {
            let mut ids = self.image.param_ids();
            ids.extend(self.text.param_ids());
            ids
        };
        self.store.freeze_all();
        for id in ids {
            self.store.set_trainable(id, true);
        }
        Ok(())
    }

    /// Builds the stage-B model: image branch and text encoder copied as-is,
    /// both annotation branches from the mini branch. The single-channel depth
    /// branch sees the mini branch as if depth were a gray image replicated
    /// over three channels.
    pub fn into_tide<R: Rng + ?Sized>(&self, mut config: ModelConfig, rng: &mut R) -> Result<TideModel> {
        let mini = self.branch(true)?;
        config.image_size = self.config.image_size;
        config.patch = self.config.patch;
        config.width = self.config.width;
        config.heads = self.config.heads;
        config.ff_mult = self.config.ff_mult;
        config.image_layers = self.config.image_layers;
        config.mini_layers = mini.layers();
        config.max_text_len = self.config.max_text_len;
        config.vocab_size = self.config.vocab_size;
        let mut model = TideModel::new(config, rng)?;
        let names: Vec<(ParamId, String)> = model.store.ids().map(|id| (id, model.store.name(id).to_string())).collect();
        for (id, name) in names {
            if model.store.kind(id) != ParamKind::Base {
                continue;
            }
            let (source, adapt_depth) = if let Some(rest) = name.strip_prefix("depth.") {
                (format!("mini.{rest}"), true)
            } else if let Some(rest) = name.strip_prefix("mask.") {
                (format!("mini.{rest}"), false)
            } else {
                (name.clone(), false)
            };
            let src = self
                .store
                .lookup(&source)
                .ok_or_else(|| TideError::invalid(format!("stage-A model lacks {source}")))?;
            let value = self.store.get(src);
            let value = if adapt_depth {
                adapt_to_gray(&name, value, self.config.patch * self.config.patch)
            } else {
                value.clone()
            };
            model.store.set(id, value);
        }
        Ok(model)
    }
}

/// Collapses RGB patch features (dy, dx, ch order) to one channel: embedding
/// columns are summed, head rows and biases averaged.
fn adapt_to_gray(name: &str, value: &Mat, pixels: usize) -> Mat {
    if name.ends_with("embed.weight") && value.ncols() == 3 * pixels {
        Mat::from_shape_fn((value.nrows(), pixels), |(r, p)| (0..3).map(|ch| value[[r, 3 * p + ch]]).sum())
    } else if name.ends_with("head.weight") && value.nrows() == 3 * pixels {
        Mat::from_shape_fn((pixels, value.ncols()), |(p, c)| (0..3).map(|ch| value[[3 * p + ch, c]]).sum::<f64>() / 3.0)
    } else if name.ends_with("head.bias") && value.ncols() == 3 * pixels {
        Mat::from_shape_fn((1, pixels), |(_, p)| (0..3).map(|ch| value[[0, 3 * p + ch]]).sum::<f64>() / 3.0)
    } else {
        value.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    pub(crate) fn small_config() -> ModelConfig {
        ModelConfig {
            image_size: 8,
            patch: 4,
            width: 8,
            heads: 1,
            ff_mult: 2,
            image_layers: 4,
            mini_layers: 2,
            share_start: 0,
            share_end: 3,
            share_stride: 2,
            lora_ranks: [2, 2, 2],
            max_text_len: 8,
            vocab_size: 12,
            ..ModelConfig::default()
        }
    }

    fn noise(rng: &mut ChaCha8Rng, c: usize, size: usize) -> Array3<f64> {
        Array3::from_shape_simple_fn((size, size, c), || StandardNormal.sample(rng))
    }

    fn latents(rng: &mut ChaCha8Rng, size: usize) -> Latents {
        Latents { image: noise(rng, 3, size), depth: noise(rng, 1, size), mask: noise(rng, 3, size) }
    }

    fn eps(model: &TideModel, lat: &Latents, toggles: Toggles) -> Vec<Mat> {
        let mut g = Graph::new(&model.store);
        let out = model.forward_joint(&mut g, lat, 5, &[0, 4, 5, 1], toggles, false).unwrap();
        out.eps.iter().map(|&e| g.to_mat(e)).collect()
    }

    #[test]
    fn share_map_examples() {
        let m = build_share_map(28, 10, 0, 27, 3).unwrap();
        assert_eq!(m.pairs(), (0..10).map(|j| (3 * j, j)).collect::<Vec<_>>().as_slice());
        assert_eq!(build_share_map(8, 4, 0, 7, 2).unwrap().pairs(), &[(0, 0), (2, 1), (4, 2), (6, 3)]);
        assert_eq!(build_share_map(8, 4, 0, 0, 3).unwrap().pairs(), &[(0, 0)]);
        assert!(build_share_map(8, 4, 3, 2, 1).is_err());
        assert!(build_share_map(8, 4, 0, 8, 1).is_err());
        assert!(build_share_map(8, 4, 0, 7, 0).is_err());
        assert!(build_share_map(8, 0, 0, 7, 1).is_err());
    }

    #[test]
    fn output_shapes_follow_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = TideModel::new(small_config(), &mut rng).unwrap();
        let lat = latents(&mut rng, 8);
        let out = eps(&model, &lat, Toggles::BOTH);
        assert_eq!(out[0].dim(), (4, 48));
        assert_eq!(out[1].dim(), (4, 16));
        assert_eq!(out[2].dim(), (4, 48));
        let bad = Latents { depth: noise(&mut rng, 3, 8), ..lat };
        let mut g = Graph::new(&model.store);
        assert!(model.forward_joint(&mut g, &bad, 5, &[0, 1], Toggles::BOTH, false).is_err());
    }

    #[test]
    fn decoupled_image_ignores_annotations() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut model = TideModel::new(small_config(), &mut rng).unwrap();
        // non-trivial TAN so that coupling would show if it leaked
        for id in model.trainable_parameters() {
            let v = crate::nn::init_matrix(&mut rng, model.store.get(id).nrows(), model.store.get(id).ncols(), Init::Normal(1.0));
            model.store.set(id, v);
        }
        let lat = latents(&mut rng, 8);
        let mut other = lat.clone();
        other.depth = noise(&mut rng, 1, 8);
        other.mask = noise(&mut rng, 3, 8);
        assert_eq!(eps(&model, &lat, Toggles::NEITHER)[0], eps(&model, &other, Toggles::NEITHER)[0]);
        assert_ne!(eps(&model, &lat, Toggles::BOTH)[0], eps(&model, &other, Toggles::BOTH)[0]);
    }

    #[test]
    fn fresh_tan_is_bitwise_inert() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = TideModel::new(small_config(), &mut rng).unwrap();
        let lat = latents(&mut rng, 8);
        for ils in [false, true] {
            let on = eps(&model, &lat, Toggles { ils, tan: true });
            let off = eps(&model, &lat, Toggles { ils, tan: false });
            for (a, b) in on.iter().zip(&off) {
                assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
            }
        }
    }

    #[test]
    fn shared_layouts_are_the_image_layouts() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let model = TideModel::new(small_config(), &mut rng).unwrap();
        let lat = latents(&mut rng, 8);
        let mut g = Graph::new(&model.store);
        let out = model.forward_joint(&mut g, &lat, 7, &[0, 3, 1], Toggles::BOTH, true).unwrap();
        let tr = out.trace.unwrap();
        for &(i, j) in model.share.pairs() {
            assert!(tr.consumed[0][j].bit_equal(&tr.image_layouts[i]));
            assert!(tr.consumed[1][j].bit_equal(&tr.image_layouts[i]));
        }
    }

    #[test]
    fn unpaired_annotation_layers_still_run() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let cfg = ModelConfig { share_start: 2, share_end: 2, ..small_config() };
        let model = TideModel::new(cfg, &mut rng).unwrap();
        let lat = latents(&mut rng, 8);
        let mut g = Graph::new(&model.store);
        let out = model.forward_joint(&mut g, &lat, 7, &[0, 3, 1], Toggles::BOTH, true).unwrap();
        let tr = out.trace.unwrap();
        assert_eq!(tr.hidden[1].len(), 2);
        assert_eq!(tr.consumed[0].len(), 2);
        assert_eq!(model.tan.len(), 1);
    }

    #[test]
    fn trainable_parameter_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = ModelConfig { lora_ranks: [0, 0, 0], tan: false, ..small_config() };
        let model = TideModel::new(cfg, &mut rng).unwrap();
        assert!(model.trainable_parameters().is_empty());

        let mut store = ParamStore::new();
        let mut lin = Linear::new(&mut store, &mut rng, "p", 8, 8, true, Init::Normal(1.0), ParamKind::Base);
        lin.attach_lora(&mut store, &mut rng, 3, 1.0);
        assert_eq!(store.numel(&lin.lora_ids()), 2 * 3 * 8);
    }

    #[test]
    fn mini_copy_matches_truncated_image() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut base = BaseModel::new(small_config(), &mut rng).unwrap();
        base.spawn_mini().unwrap();
        let mini = base.mini.as_ref().unwrap();
        assert_eq!(mini.layers(), 2);
        assert!(init_mini_from_image(&mut base.store.clone(), &base.image, 5, "x").is_err());
        let z = patchify(noise(&mut rng, 3, 8).view(), 4).unwrap();
        let mut g = Graph::new(&base.store);
        let zt = g.constant(z);
        let text = base.text.forward(&mut g, &[0, 5, 1]).unwrap();
        let sinus = g.constant(time_embedding(9.0, 8));
        let (_, hi) = base.image.forward_solo(&mut g, zt, sinus, text).unwrap();
        let (_, hm) = mini.forward_solo(&mut g, zt, sinus, text).unwrap();
        for k in 0..2 {
            assert_eq!(g.to_mat(hi[k]), g.to_mat(hm[k]));
        }
    }

    #[test]
    fn full_copy_is_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut base = BaseModel::new(small_config(), &mut rng).unwrap();
        let full = init_mini_from_image(&mut base.store, &base.image, 4, "full").unwrap();
        let a: Vec<Mat> = base.image.param_ids().iter().map(|&i| base.store.get(i).clone()).collect();
        let b: Vec<Mat> = full.param_ids().iter().map(|&i| base.store.get(i).clone()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn gray_depth_branch_matches_replicated_mini() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut base = BaseModel::new(small_config(), &mut rng).unwrap();
        base.spawn_mini().unwrap();
        let model = base.into_tide(small_config(), &mut rng).unwrap();
        let gray = noise(&mut rng, 1, 8);
        let rgb = Array3::from_shape_fn((8, 8, 3), |(y, x, _)| gray[[y, x, 0]]);
        let mut g = Graph::new(&model.store);
        let text = model.text.forward(&mut g, &[0, 6, 1]).unwrap();
        let sinus = g.constant(time_embedding(3.0, 8));
        let zd = g.constant(patchify(gray.view(), 4).unwrap());
        let zm = g.constant(patchify(rgb.view(), 4).unwrap());
        let (ed, _) = model.depth.forward_solo(&mut g, zd, sinus, text).unwrap();
        let (em, _) = model.mask.forward_solo(&mut g, zm, sinus, text).unwrap();
        let em = g.to_mat(em);
        let ed = g.to_mat(ed);
        for n in 0..4 {
            for p in 0..16 {
                let avg = (0..3).map(|ch| em[[n, 3 * p + ch]]).sum::<f64>() / 3.0;
                assert!((ed[[n, p]] - avg).abs() < 1e-9);
            }
        }
    }
}
