//! Plain-text `key = value` configuration files.
//!
//! Blank lines and lines starting with `#` are ignored. Later assignments
//! override earlier ones, and command-line flags override the file.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Result, TideError};
use crate::model::{ModelConfig, TanPlacement, Toggles};

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KeyValues {
    entries: BTreeMap<String, String>,
}

impl KeyValues {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| TideError::format("config", format!("line {}: expected key = value", n + 1)))?;
            entries.insert(k.trim().to_string(), v.trim().to_string());
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = crate::tensorio::read_bytes(path)?;
        let text = String::from_utf8(bytes).map_err(|e| TideError::format("config", e.to_string()))?;
        Self::parse(&text)
    }

    pub fn render(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn set(&mut self, key: &str, value: impl Display) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn get_str(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    /// Parses `key` if present.
    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        self.entries
            .get(key)
            .map(|v| v.parse::<T>().map_err(|e| TideError::invalid(format!("config key {key} = {v}: {e}"))))
            .transpose()
    }

    /// Overwrites `*slot` when `key` is present.
    pub fn apply<T: FromStr>(&self, key: &str, slot: &mut T) -> Result<()>
    where
        T::Err: Display,
    {
        if let Some(v) = self.get(key)? {
            *slot = v;
        }
        Ok(())
    }

    /// Copies every entry of `other` over this one.
    pub fn merge(&mut self, other: &KeyValues) {
        for (k, v) in &other.entries {
            self.entries.insert(k.clone(), v.clone());
        }
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }
}

impl ModelConfig {
    pub fn write_to(&self, kv: &mut KeyValues) {
        kv.set("model.image_size", self.image_size);
        kv.set("model.patch", self.patch);
        kv.set("model.width", self.width);
        kv.set("model.heads", self.heads);
        kv.set("model.ff_mult", self.ff_mult);
        kv.set("model.image_layers", self.image_layers);
        kv.set("model.mini_layers", self.mini_layers);
        kv.set("model.share_start", self.share_start);
        kv.set("model.share_end", self.share_end);
        kv.set("model.share_stride", self.share_stride);
        kv.set("model.lora_rank_image", self.lora_ranks[0]);
        kv.set("model.lora_rank_depth", self.lora_ranks[1]);
        kv.set("model.lora_rank_mask", self.lora_ranks[2]);
        kv.set("model.lora_scale", format!("{:?}", self.lora_scale));
        kv.set("model.max_text_len", self.max_text_len);
        kv.set("model.vocab_size", self.vocab_size);
        kv.set("model.tan", self.tan);
        kv.set("model.tan_placement", self.tan_placement.as_str());
    }

    pub fn read_from(&mut self, kv: &KeyValues) -> Result<()> {
        kv.apply("model.image_size", &mut self.image_size)?;
        kv.apply("model.patch", &mut self.patch)?;
        kv.apply("model.width", &mut self.width)?;
        kv.apply("model.heads", &mut self.heads)?;
        kv.apply("model.ff_mult", &mut self.ff_mult)?;
        kv.apply("model.image_layers", &mut self.image_layers)?;
        kv.apply("model.mini_layers", &mut self.mini_layers)?;
        kv.apply("model.share_start", &mut self.share_start)?;
        kv.apply("model.share_end", &mut self.share_end)?;
        kv.apply("model.share_stride", &mut self.share_stride)?;
        kv.apply("model.lora_rank_image", &mut self.lora_ranks[0])?;
        kv.apply("model.lora_rank_depth", &mut self.lora_ranks[1])?;
        kv.apply("model.lora_rank_mask", &mut self.lora_ranks[2])?;
        kv.apply("model.lora_scale", &mut self.lora_scale)?;
        kv.apply("model.max_text_len", &mut self.max_text_len)?;
        kv.apply("model.vocab_size", &mut self.vocab_size)?;
        kv.apply("model.tan", &mut self.tan)?;
        if let Some(p) = kv.get_str("model.tan_placement") {
            self.tan_placement = TanPlacement::parse(p)?;
        }
        Ok(())
    }
}

impl Toggles {
    pub fn write_to(&self, kv: &mut KeyValues) {
        kv.set("toggles.ils", self.ils);
        kv.set("toggles.tan", self.tan);
    }

    pub fn read_from(&mut self, kv: &KeyValues) -> Result<()> {
        kv.apply("toggles.ils", &mut self.ils)?;
        kv.apply("toggles.tan", &mut self.tan)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_override() {
        let kv = KeyValues::parse("# comment\n a = 1\n\nb=x y\na = 2\n").unwrap();
        assert_eq!(kv.get::<usize>("a").unwrap(), Some(2));
        assert_eq!(kv.get_str("b"), Some("x y"));
        assert!(kv.get::<usize>("b").is_err());
        assert!(KeyValues::parse("no equals sign").is_err());
    }

    #[test]
    fn model_config_round_trip() {
        let cfg = ModelConfig { width: 32, lora_scale: 0.1 + 0.2, tan_placement: TanPlacement::BeforeFeedForward, ..ModelConfig::default() };
        let mut kv = KeyValues::new();
        cfg.write_to(&mut kv);
        let mut back = ModelConfig::default();
        back.read_from(&KeyValues::parse(&kv.render()).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }
}
