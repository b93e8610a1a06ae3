//! Flat key-value configuration with dotted keys.
//!
//! Format: one `key = value` per line, `#` starts a comment. Vectors are
//! comma-separated (`0.5,0,0.2`), waypoint lists are semicolon-separated
//! `x,y,z,yaw` quadruples, intervals are `start:end` pairs separated by
//! semicolons.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::Vector3;
use thiserror::Error;

use crate::simulator::{Waypoint, YawMode};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("missing config key `{0}`")]
    MissingKey(String),
    #[error("bad value for config key `{key}`: {reason}")]
    BadValue { key: String, reason: String },
    #[error("line {line}: expected `key = value`")]
    Malformed { line: usize },
    #[error("cannot read config: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Default)]
pub struct Config {
    map: BTreeMap<String, String>,
}

impl Config {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut map = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(ConfigError::Malformed { line: i + 1 });
            };
            map.insert(key.trim().to_string(), value.trim().to_string());
        }
        Ok(Self { map })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn set(&mut self, key: &str, value: impl ToString) -> &mut Self {
        self.map.insert(key.to_string(), value.to_string());
        self
    }

    pub fn contains(&self, key: &str) -> bool {
        self.map.contains_key(key)
    }

    pub fn raw(&self, key: &str) -> Result<&str, ConfigError> {
        self.map
            .get(key)
            .map(|s| s.as_str())
            .ok_or_else(|| ConfigError::MissingKey(key.to_string()))
    }

    pub fn f64(&self, key: &str) -> Result<f64, ConfigError> {
        let raw = self.raw(key)?;
        let v: f64 = raw.parse().map_err(|_| ConfigError::BadValue {
            key: key.to_string(),
            reason: format!("`{raw}` is not a number"),
        })?;
        if !v.is_finite() {
            return Err(ConfigError::BadValue {
                key: key.to_string(),
                reason: "value must be finite".to_string(),
            });
        }
        Ok(v)
    }

    pub fn f64_or(&self, key: &str, default: f64) -> Result<f64, ConfigError> {
        if self.contains(key) {
            self.f64(key)
        } else {
            Ok(default)
        }
    }

    pub fn u64(&self, key: &str) -> Result<u64, ConfigError> {
        let raw = self.raw(key)?;
        raw.parse().map_err(|_| ConfigError::BadValue {
            key: key.to_string(),
            reason: format!("`{raw}` is not an unsigned integer"),
        })
    }

    pub fn u64_or(&self, key: &str, default: u64) -> Result<u64, ConfigError> {
        if self.contains(key) {
            self.u64(key)
        } else {
            Ok(default)
        }
    }

    pub fn bool_or(&self, key: &str, default: bool) -> Result<bool, ConfigError> {
        if !self.contains(key) {
            return Ok(default);
        }
        match self.raw(key)? {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            other => Err(ConfigError::BadValue {
                key: key.to_string(),
                reason: format!("`{other}` is not a boolean"),
            }),
        }
    }

    pub fn vec3(&self, key: &str) -> Result<Vector3<f64>, ConfigError> {
        let raw = self.raw(key)?;
        let parts: Vec<f64> = raw
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|_| ConfigError::BadValue {
                key: key.to_string(),
                reason: format!("`{raw}` is not a comma-separated 3-vector"),
            })?;
        if parts.len() != 3 {
            return Err(ConfigError::BadValue {
                key: key.to_string(),
                reason: format!("expected 3 components, got {}", parts.len()),
            });
        }
        Ok(Vector3::new(parts[0], parts[1], parts[2]))
    }

    pub fn vec3_or(&self, key: &str, default: Vector3<f64>) -> Result<Vector3<f64>, ConfigError> {
        if self.contains(key) {
            self.vec3(key)
        } else {
            Ok(default)
        }
    }

    /// Waypoints: semicolon-separated `x,y,z,yaw` quadruples.
    pub fn waypoints(&self, key: &str) -> Result<Vec<Waypoint>, ConfigError> {
        let raw = self.raw(key)?;
        let mut out = Vec::new();
        for group in raw.split(';') {
            let parts: Vec<f64> = group
                .split(',')
                .map(|p| p.trim().parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|_| ConfigError::BadValue {
                    key: key.to_string(),
                    reason: format!("`{group}` is not an x,y,z,yaw quadruple"),
                })?;
            if parts.len() != 4 {
                return Err(ConfigError::BadValue {
                    key: key.to_string(),
                    reason: format!("waypoint `{group}` must have 4 components"),
                });
            }
            out.push(Waypoint {
                position: Vector3::new(parts[0], parts[1], parts[2]),
                yaw: parts[3],
            });
        }
        Ok(out)
    }

    /// Intervals: semicolon-separated `start:end` pairs, seconds.
    pub fn intervals_or(&self, key: &str) -> Result<Vec<(f64, f64)>, ConfigError> {
        if !self.contains(key) {
            return Ok(Vec::new());
        }
        let raw = self.raw(key)?;
        let mut out = Vec::new();
        for group in raw.split(';') {
            let Some((a, b)) = group.split_once(':') else {
                return Err(ConfigError::BadValue {
                    key: key.to_string(),
                    reason: format!("interval `{group}` must be start:end"),
                });
            };
            let start: f64 = a.trim().parse().map_err(|_| ConfigError::BadValue {
                key: key.to_string(),
                reason: format!("`{a}` is not a number"),
            })?;
            let end: f64 = b.trim().parse().map_err(|_| ConfigError::BadValue {
                key: key.to_string(),
                reason: format!("`{b}` is not a number"),
            })?;
            out.push((start, end));
        }
        Ok(out)
    }

    pub fn yaw_mode_or(&self, key: &str, default: YawMode) -> Result<YawMode, ConfigError> {
        if !self.contains(key) {
            return Ok(default);
        }
        match self.raw(key)? {
            "follow_path" | "tangent" => Ok(YawMode::FollowPath),
            "waypoints" => Ok(YawMode::Waypoints),
            other => Err(ConfigError::BadValue {
                key: key.to_string(),
                reason: format!("`{other}` is not a yaw mode (follow_path | waypoints)"),
            }),
        }
    }

    /// Canonical sorted rendering, used for manifests and hashing.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.map {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(v);
            out.push('\n');
        }
        out
    }

    /// FNV-1a hash of the canonical rendering.
    pub fn content_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for b in self.render().bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        h
    }
}
