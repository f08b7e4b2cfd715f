//! Lockstep reverse diffusion: one caption in, an aligned
//! (image, depth, mask) triple out.

use std::path::Path;

use ndarray::{Array2, Array3};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::codec::{decode_depth, decode_image, decode_mask, unpatchify};
use crate::error::{Result, TideError};
use crate::model::{JointTrace, Latents, Modality, TideModel, Toggles};
use crate::nn::tokenize;
use crate::scenes::{expand_captions, palette, vocabulary, write_dataset, DatasetHeader, Grammar, ManifestEntry, Quadruple};
use crate::schedule::{ddpm_step, NoiseSchedule};
use crate::seed;
use crate::tape::Graph;

const TAG_START: u64 = 11;
const TAG_REVERSE: u64 = 12;

/// Decoded sampler output.
#[derive(Debug, Clone, PartialEq)]
pub struct Triple {
    pub image: Array3<f32>,
    pub depth: Array2<f32>,
    pub mask: Array2<u8>,
}

impl Triple {
    pub fn into_quadruple(self, caption: &str) -> Quadruple {
        Quadruple { image: self.image, depth: self.depth, mask: self.mask, caption: caption.to_string() }
    }
}

fn gaussian(seed_value: u64, counters: &[u64], shape: (usize, usize, usize)) -> Array3<f64> {
    let mut rng = seed::stream(seed_value, counters);
    Array3::from_shape_simple_fn(shape, || rng.sample(StandardNormal))
}

/// Reverse-diffuses all three latents together. `observe` sees the joint
/// trace of every network call (model timestep, trace) when given.
pub fn sample_latents(
    model: &TideModel,
    schedule: &NoiseSchedule,
    caption: &str,
    steps: usize,
    seed_value: u64,
    toggles: Toggles,
    mut observe: Option<&mut dyn FnMut(usize, &JointTrace)>,
) -> Result<Latents> {
    let timesteps = schedule.uniform_timesteps(steps)?;
    let retimed = schedule.retimed(&timesteps)?;
    let tokens = tokenize(caption, &vocabulary());
    model.text.check(&tokens)?;
    let size = model.config.image_size;
    let mut z = Latents {
        image: gaussian(seed_value, &[TAG_START, 0], (size, size, 3)),
        depth: gaussian(seed_value, &[TAG_START, 1], (size, size, 1)),
        mask: gaussian(seed_value, &[TAG_START, 2], (size, size, 3)),
    };
    for k in (1..=steps).rev() {
        let t = timesteps[k - 1];
        let mut g = Graph::new(&model.store);
        let out = model.forward_joint(&mut g, &z, t, &tokens, toggles, observe.is_some())?;
        if let (Some(f), Some(trace)) = (observe.as_mut(), out.trace.as_ref()) {
            f(t, trace);
        }
        for m in Modality::ALL {
            let eps = unpatchify(g.value(out.eps[m.index()]), size, size, m.channels(), model.config.patch)?;
            let noise = gaussian(seed_value, &[TAG_REVERSE, m.index() as u64, k as u64], eps.dim());
            let next = ddpm_step(z.get(m), &eps, k, &retimed, &noise)?;
            if next.iter().any(|v| !v.is_finite()) {
                return Err(TideError::NonFinite(format!("{} latent at timestep {t}", m.name())));
            }
            *z.get_mut(m) = next;
        }
    }
    Ok(z)
}

pub fn decode_latents(z: &Latents) -> Result<Triple> {
    Ok(Triple {
        image: decode_image(z.image.view())?,
        depth: decode_depth(z.depth.view())?,
        mask: decode_mask(z.mask.view(), &palette())?,
    })
}

/// Deterministic in (caption, steps, seed, model parameters, toggles).
pub fn sample_triple(
    model: &TideModel,
    schedule: &NoiseSchedule,
    caption: &str,
    steps: usize,
    seed_value: u64,
    toggles: Toggles,
) -> Result<Triple> {
    decode_latents(&sample_latents(model, schedule, caption, steps, seed_value, toggles, None)?)
}

/// Samples `n` triples per unique caption (job seeds `base_seed + k`) and
/// writes them as a dataset.
#[allow(clippy::too_many_arguments)]
pub fn batch_synthesize<S: AsRef<str>>(
    model: &TideModel,
    schedule: &NoiseSchedule,
    captions: &[S],
    n: usize,
    base_seed: u64,
    steps: usize,
    toggles: Toggles,
    out_dir: &Path,
) -> Result<Vec<ManifestEntry>> {
    let jobs = expand_captions(captions, n, base_seed)?;
    let records: Vec<Quadruple> = crate::par::map(&jobs, |job| {
        sample_triple(model, schedule, &job.caption, steps, job.seed, toggles).map(|t| t.into_quadruple(&job.caption))
    })
    .into_iter()
    .collect::<Result<_>>()?;
    let header = DatasetHeader::for_grammar(&Grammar::with_size(model.config.image_size));
    write_dataset(&records, out_dir, &header)
}
