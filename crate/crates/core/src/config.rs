//! Flat `section.key=value` configuration.
//!
//! Files hold one pair per line; `#` starts a comment. Every consumer takes
//! the keys it knows and [`ConfigMap::finish`] rejects whatever is left, so a
//! typo never silently falls back to a default.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ConfigMap {
    values: BTreeMap<String, String>,
    used: BTreeSet<String>,
}

impl ConfigMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut map = ConfigMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            map.set_pair(line)
                .map_err(|e| Error::config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(map)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
    }

    /// Applies one `key=value` override.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::config(format!("expected key=value, got `{pair}`")))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(Error::config(format!("empty key in `{pair}`")));
        }
        self.values.insert(k.to_string(), v.trim().to_string());
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: impl Display) {
        self.values.insert(key.to_string(), value.to_string());
    }

    pub fn contains(&self, key: &str) -> bool {
        self.values.contains_key(key)
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    /// Reads and marks `key`; absent keys yield `default`.
    pub fn get_or<T>(&mut self, key: &str, default: T) -> Result<T>
    where
        T: FromStr,
    {
        match self.values.get(key) {
            None => Ok(default),
            Some(v) => {
                self.used.insert(key.to_string());
                v.parse().map_err(|_| {
                    Error::config(format!("`{key}`: cannot parse `{v}`"))
                })
            }
        }
    }

    /// Marks every key under `prefix.` as consumed without reading it.
    pub fn mark_section(&mut self, prefix: &str) {
        let p = format!("{prefix}.");
        let keys: Vec<String> = self.values.keys().filter(|k| k.starts_with(&p)).cloned().collect();
        self.used.extend(keys);
    }

    /// Errors on the first key nobody read.
    pub fn finish(&self) -> Result<()> {
        match self.values.keys().find(|k| !self.used.contains(*k)) {
            Some(k) => Err(Error::config(format!("unknown key `{k}`"))),
            None => Ok(()),
        }
    }

    /// Keys under `prefix.`, in sorted order.
    pub fn section(&self, prefix: &str) -> impl Iterator<Item = (&str, &str)> {
        let p = format!("{prefix}.");
        self.values
            .iter()
            .filter(move |(k, _)| k.starts_with(&p))
            .map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.values.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn merge(&mut self, other: &ConfigMap) {
        for (k, v) in other.iter() {
            self.values.insert(k.to_string(), v.to_string());
        }
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.values {
            out.push_str(k);
            out.push('=');
            out.push_str(v);
            out.push('\n');
        }
        out
    }
}

/// Typed sections backed by a [`ConfigMap`].
pub trait Section: Sized {
    /// Reads every key under `prefix`, starting from `default`.
    fn read(map: &mut ConfigMap, prefix: &str, default: Self) -> Result<Self>;
    fn write(&self, map: &mut ConfigMap, prefix: &str);
}

impl Section for crate::model::ModelConfig {
    fn read(m: &mut ConfigMap, p: &str, d: Self) -> Result<Self> {
        let frames = m.get_or(&format!("{p}.frames"), d.grid.frames())?;
        let height = m.get_or(&format!("{p}.height"), d.grid.height())?;
        let width = m.get_or(&format!("{p}.width"), d.grid.width())?;
        let grid = crate::video::GridDims::for_clip(frames, height, width)
            .map_err(|e| Error::config(e.to_string()))?;
        let cfg = crate::model::ModelConfig {
            d_enc: m.get_or(&format!("{p}.d_enc"), d.d_enc)?,
            depth_enc: m.get_or(&format!("{p}.depth_enc"), d.depth_enc)?,
            heads_enc: m.get_or(&format!("{p}.heads_enc"), d.heads_enc)?,
            d_dec: m.get_or(&format!("{p}.d_dec"), d.d_dec)?,
            depth_dec: m.get_or(&format!("{p}.depth_dec"), d.depth_dec)?,
            heads_dec: m.get_or(&format!("{p}.heads_dec"), d.heads_dec)?,
            mlp_ratio: m.get_or(&format!("{p}.mlp_ratio"), d.mlp_ratio)?,
            grid,
            num_classes: m.get_or(&format!("{p}.num_classes"), d.num_classes)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn write(&self, m: &mut ConfigMap, p: &str) {
        m.set(&format!("{p}.d_enc"), self.d_enc);
        m.set(&format!("{p}.depth_enc"), self.depth_enc);
        m.set(&format!("{p}.heads_enc"), self.heads_enc);
        m.set(&format!("{p}.d_dec"), self.d_dec);
        m.set(&format!("{p}.depth_dec"), self.depth_dec);
        m.set(&format!("{p}.heads_dec"), self.heads_dec);
        m.set(&format!("{p}.mlp_ratio"), self.mlp_ratio);
        m.set(&format!("{p}.frames"), self.grid.frames());
        m.set(&format!("{p}.height"), self.grid.height());
        m.set(&format!("{p}.width"), self.grid.width());
        m.set(&format!("{p}.num_classes"), self.num_classes);
    }
}

impl Section for crate::video::SpriteConfig {
    fn read(m: &mut ConfigMap, p: &str, d: Self) -> Result<Self> {
        Ok(crate::video::SpriteConfig {
            frames: m.get_or(&format!("{p}.frames"), d.frames)?,
            height: m.get_or(&format!("{p}.height"), d.height)?,
            width: m.get_or(&format!("{p}.width"), d.width)?,
            sprite_size: m.get_or(&format!("{p}.sprite_size"), d.sprite_size)?,
            speed: m.get_or(&format!("{p}.speed"), d.speed)?,
            background: m.get_or(&format!("{p}.background"), d.background)?,
            texture: m.get_or(&format!("{p}.texture"), d.texture)?,
            frame_noise: m.get_or(&format!("{p}.frame_noise"), d.frame_noise)?,
        })
    }

    fn write(&self, m: &mut ConfigMap, p: &str) {
        m.set(&format!("{p}.frames"), self.frames);
        m.set(&format!("{p}.height"), self.height);
        m.set(&format!("{p}.width"), self.width);
        m.set(&format!("{p}.sprite_size"), self.sprite_size);
        m.set(&format!("{p}.speed"), self.speed);
        m.set(&format!("{p}.background"), self.background);
        m.set(&format!("{p}.texture"), self.texture);
        m.set(&format!("{p}.frame_noise"), self.frame_noise);
    }
}
