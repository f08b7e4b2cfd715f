//! Checkpoint directories.
//!
//! A run directory holds one `step-NNNNNN/` directory per saved step:
//!
//! ```text
//! step-000100/
//!   config.txt          key = value: kind, step, model.*, train.*, toggles.*
//!   params/<name>.tide  every parameter tensor (f64)
//!   optim/<name>.m.tide first and second optimizer moments, when present
//!   optim/<name>.v.tide
//!   rng.bin             "TIDERNG" 0x01, seed u64 LE, step u64 LE
//!   history.csv         step,image,depth,mask,total (one line per step)
//! ```
//!
//! Every random stream is derived from (seed, step, slot), so the seed and
//! step counter are the complete generator state.

use std::fs;
use std::path::{Path, PathBuf};

use crate::config::KeyValues;
use crate::error::{Result, TideError};
use crate::model::{BaseModel, ModelConfig, TideModel};
use crate::seed;
use crate::tape::ParamStore;
use crate::tensorio::{read_bytes, read_tensor, write_bytes, write_tensor, Tensor};
use crate::train::{AdamW, LossReport, Objective, Session, TrainConfig};

const RNG_MAGIC: &[u8; 8] = b"TIDERNG\x01";
pub const CONFIG_FILE: &str = "config.txt";

/// Models that can be rebuilt from a checkpoint's config.
pub trait Checkpointable: Sized {
    const KIND: &'static str;

    fn model_config(&self) -> &ModelConfig;

    fn write_meta(&self, _kv: &mut KeyValues) {}

    /// Structure only; parameter values are overwritten on load.
    fn rebuild(config: ModelConfig, kv: &KeyValues) -> Result<Self>;

    /// Restores the trainable flags appropriate to the loaded state.
    fn restore_trainable(&mut self) -> Result<()>;
}

impl Checkpointable for TideModel {
    const KIND: &'static str = "tide";

    fn model_config(&self) -> &ModelConfig {
        &self.config
    }

    fn rebuild(config: ModelConfig, _kv: &KeyValues) -> Result<Self> {
        TideModel::new(config, &mut seed::stream(0, &[]))
    }

    fn restore_trainable(&mut self) -> Result<()> {
        self.freeze_for_finetune();
        Ok(())
    }
}

impl Checkpointable for BaseModel {
    const KIND: &'static str = "base";

    fn model_config(&self) -> &ModelConfig {
        &self.config
    }

    fn write_meta(&self, kv: &mut KeyValues) {
        kv.set("has_mini", self.mini.is_some());
    }

    fn rebuild(config: ModelConfig, kv: &KeyValues) -> Result<Self> {
        let mut m = BaseModel::new(config, &mut seed::stream(0, &[]))?;
        if kv.get::<bool>("has_mini")?.unwrap_or(false) {
            m.spawn_mini()?;
        }
        Ok(m)
    }

    fn restore_trainable(&mut self) -> Result<()> {
        self.set_stage_a_trainable(self.mini.is_some())
    }
}

fn param_file(dir: &Path, name: &str, suffix: &str) -> PathBuf {
    dir.join(format!("{name}{suffix}.tide"))
}

pub fn step_dir(run_dir: &Path, step: u64) -> PathBuf {
    run_dir.join(format!("step-{step:06}"))
}

fn write_store(store: &ParamStore, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| TideError::io(dir, e))?;
    for id in store.ids() {
        let t = Tensor::F64(store.get(id).clone().into_dyn());
        write_tensor(&param_file(dir, store.name(id), ""), &t)?;
    }
    Ok(())
}

fn read_store(store: &mut ParamStore, dir: &Path) -> Result<()> {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let value = read_tensor(&param_file(dir, store.name(id), ""))?.into_mat()?;
        if value.dim() != store.get(id).dim() {
            return Err(TideError::format(
                "checkpoint",
                format!("{} has shape {:?}, model expects {:?}", store.name(id), value.dim(), store.get(id).dim()),
            ));
        }
        store.set(id, value);
    }
    Ok(())
}

fn history_csv(history: &[LossReport]) -> String {
    let mut out = String::from("step,image,depth,mask,total\n");
    for (i, r) in history.iter().enumerate() {
        out.push_str(&format!("{},{:?},{:?},{:?},{:?}\n", i + 1, r.image, r.depth, r.mask, r.total));
    }
    out
}

fn parse_history(text: &str) -> Result<Vec<LossReport>> {
    let bad = |n: usize| TideError::format("loss history", format!("line {n}"));
    text.lines()
        .enumerate()
        .skip(1)
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, line)| {
            let f: Vec<f64> = line.split(',').skip(1).map(|v| v.parse::<f64>().map_err(|_| bad(n + 1))).collect::<Result<_>>()?;
            if f.len() != 4 {
                return Err(bad(n + 1));
            }
            Ok(LossReport { image: f[0], depth: f[1], mask: f[2], total: f[3] })
        })
        .collect()
}

/// Writes the session state into `run_dir/step-NNNNNN` and returns that path.
pub fn save<M: Objective + Checkpointable>(session: &Session<M>, run_dir: &Path) -> Result<PathBuf> {
    let dir = step_dir(run_dir, session.step);
    let tmp = run_dir.join(format!(".tmp-step-{:06}", session.step));
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| TideError::io(&tmp, e))?;
    }
    let store = session.model.store();
    write_store(store, &tmp.join("params"))?;
    let optim = tmp.join("optim");
    fs::create_dir_all(&optim).map_err(|e| TideError::io(&optim, e))?;
    for id in store.ids() {
        if let Some((m, v)) = session.opt.moments(id) {
            write_tensor(&param_file(&optim, store.name(id), ".m"), &Tensor::F64(m.clone().into_dyn()))?;
            write_tensor(&param_file(&optim, store.name(id), ".v"), &Tensor::F64(v.clone().into_dyn()))?;
        }
    }
    let mut kv = KeyValues::new();
    kv.set("kind", M::KIND);
    kv.set("step", session.step);
    kv.set("optim.t", session.opt.t);
    session.model.model_config().write_to(&mut kv);
    session.config.write_to(&mut kv);
    session.model.write_meta(&mut kv);
    write_bytes(&tmp.join(CONFIG_FILE), kv.render().as_bytes())?;
    let mut rng = RNG_MAGIC.to_vec();
    rng.extend_from_slice(&session.config.seed.to_le_bytes());
    rng.extend_from_slice(&session.step.to_le_bytes());
    write_bytes(&tmp.join("rng.bin"), &rng)?;
    write_bytes(&tmp.join("history.csv"), history_csv(&session.history).as_bytes())?;
    if dir.exists() {
        fs::remove_dir_all(&dir).map_err(|e| TideError::io(&dir, e))?;
    }
    fs::rename(&tmp, &dir).map_err(|e| TideError::io(&dir, e))?;
    log::info!("checkpoint {}", dir.display());
    Ok(dir)
}

/// Accepts either a checkpoint directory or a run directory (whose latest
/// checkpoint is used).
pub fn resolve(path: &Path) -> Result<PathBuf> {
    if path.join(CONFIG_FILE).exists() {
        return Ok(path.to_path_buf());
    }
    if !path.is_dir() {
        return Err(TideError::Missing(path.to_path_buf()));
    }
    let mut best: Option<(u64, PathBuf)> = None;
    for entry in fs::read_dir(path).map_err(|e| TideError::io(path, e))? {
        let entry = entry.map_err(|e| TideError::io(path, e))?;
        let name = entry.file_name().to_string_lossy().to_string();
        if let Some(step) = name.strip_prefix("step-").and_then(|s| s.parse::<u64>().ok()) {
            if entry.path().join(CONFIG_FILE).exists() && best.as_ref().is_none_or(|b| step > b.0) {
                best = Some((step, entry.path()));
            }
        }
    }
    best.map(|b| b.1).ok_or_else(|| TideError::Missing(path.join(CONFIG_FILE)))
}

pub fn read_config(dir: &Path) -> Result<KeyValues> {
    KeyValues::load(&resolve(dir)?.join(CONFIG_FILE))
}

/// Checkpoint kind (`base` or `tide`).
pub fn kind(dir: &Path) -> Result<String> {
    read_config(dir)?
        .get_str("kind")
        .map(str::to_string)
        .ok_or_else(|| TideError::format("checkpoint", "config lacks kind"))
}

pub fn load_model<M: Checkpointable + Objective>(path: &Path) -> Result<M> {
    let dir = resolve(path)?;
    let kv = KeyValues::load(&dir.join(CONFIG_FILE))?;
    match kv.get_str("kind") {
        Some(k) if k == M::KIND => {}
        other => {
            return Err(TideError::format(
                "checkpoint",
                format!("{} holds a {:?} model, expected {}", dir.display(), other, M::KIND),
            ))
        }
    }
    let mut config = ModelConfig::default();
    config.read_from(&kv)?;
    let mut model = M::rebuild(config, &kv)?;
    read_store(model.store_mut(), &dir.join("params"))?;
    model.restore_trainable()?;
    Ok(model)
}

/// Restores a session exactly as it was saved.
pub fn load_session<M: Checkpointable + Objective>(path: &Path) -> Result<Session<M>> {
    let dir = resolve(path)?;
    let model = load_model::<M>(&dir)?;
    let kv = KeyValues::load(&dir.join(CONFIG_FILE))?;
    let mut config = TrainConfig::default();
    config.read_from(&kv)?;
    let mut session = Session::new(model, config)?;
    let rng = read_bytes(&dir.join("rng.bin"))?;
    if rng.len() != 24 || &rng[..8] != RNG_MAGIC {
        return Err(TideError::format("rng state", "bad header or length"));
    }
    let seed_value = u64::from_le_bytes(rng[8..16].try_into().unwrap());
    let step = u64::from_le_bytes(rng[16..24].try_into().unwrap());
    if seed_value != session.config.seed || Some(step) != kv.get::<u64>("step")? {
        return Err(TideError::format("rng state", "disagrees with config.txt"));
    }
    session.step = step;
    let mut opt = AdamW::new(session.config.lr, session.config.weight_decay);
    opt.t = kv.get::<u64>("optim.t")?.unwrap_or(0);
    let store = session.model.store();
    let optim = dir.join("optim");
    for id in store.ids() {
        let mp = param_file(&optim, store.name(id), ".m");
        if mp.exists() {
            let m = read_tensor(&mp)?.into_mat()?;
            let v = read_tensor(&param_file(&optim, store.name(id), ".v"))?.into_mat()?;
            opt.set_moments(id, m, v);
        }
    }
    session.opt = opt;
    let history = String::from_utf8(read_bytes(&dir.join("history.csv"))?)
        .map_err(|e| TideError::format("loss history", e.to_string()))?;
    session.history = parse_history(&history)?;
    if session.history.len() as u64 != step {
        return Err(TideError::format("loss history", "length disagrees with step"));
    }
    Ok(session)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenes::{generate_many, Grammar};
    use crate::train::{encode_dataset, finetune_session, pretrain_session, EncodedSample};

    fn cfg() -> ModelConfig {
        ModelConfig {
            image_size: 8,
            patch: 4,
            width: 8,
            image_layers: 2,
            mini_layers: 1,
            share_start: 0,
            share_end: 1,
            share_stride: 1,
            lora_ranks: [1, 2, 2],
            ..ModelConfig::default()
        }
    }

    fn data() -> Vec<EncodedSample> {
        encode_dataset(&generate_many(&[1, 2, 3], &Grammar::with_size(8)).unwrap()).unwrap()
    }

    fn tc() -> TrainConfig {
        TrainConfig { iterations: 2, mini_iterations: 1, batch: 2, ..TrainConfig::default() }
    }

    #[test]
    fn zero_iterations_writes_initial_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = pretrain_session(cfg(), TrainConfig { iterations: 0, mini_iterations: 0, ..tc() }).unwrap();
        s.run(&data(), u64::MAX, Some(dir.path())).unwrap();
        let entries: Vec<_> = fs::read_dir(dir.path()).unwrap().collect();
        assert_eq!(entries.len(), 1);
        let base: BaseModel = load_model(dir.path()).unwrap();
        assert!(base.mini.is_some());
    }

    #[test]
    fn resume_is_bit_exact() {
        let data = data();
        let dir = tempfile::tempdir().unwrap();
        let mut a = pretrain_session(cfg(), tc()).unwrap();
        a.run(&data, u64::MAX, None).unwrap();
        let base = a.model;

        let config = TrainConfig { iterations: 6, checkpoint_every: 2, ..tc() };
        let mut straight = finetune_session(&base, cfg(), config.clone()).unwrap();
        straight.run(&data, u64::MAX, None).unwrap();

        let mut first = finetune_session(&base, cfg(), config).unwrap();
        first.run(&data, 3, Some(dir.path())).unwrap();
        let mut resumed: Session<TideModel> = load_session(&step_dir(dir.path(), 3)).unwrap();
        assert_eq!(resumed.history, first.history);
        resumed.run(&data, u64::MAX, None).unwrap();
        let bits = |h: &[LossReport]| h.iter().map(|r| r.total.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&resumed.history), bits(&straight.history));
        for id in straight.model.store.ids() {
            assert_eq!(straight.model.store.get(id), resumed.model.store.get(id));
        }
        assert_eq!(resolve(dir.path()).unwrap(), step_dir(dir.path(), 3));
        assert!(step_dir(dir.path(), 2).exists());
    }

    #[test]
    fn wrong_kind_and_missing() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = pretrain_session(cfg(), TrainConfig { iterations: 0, mini_iterations: 0, ..tc() }).unwrap();
        s.run(&data(), 0, Some(dir.path())).unwrap();
        assert!(load_model::<TideModel>(dir.path()).is_err());
        assert!(matches!(load_model::<BaseModel>(&dir.path().join("nope")), Err(TideError::Missing(_))));
    }
}
