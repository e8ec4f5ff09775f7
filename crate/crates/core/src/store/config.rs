use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::format::{validate_page_size, DEFAULT_PAGE_SIZE};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IdAllocation {
    Random,
    Sequential,
}

/// Store-wide settings, persisted as `key=value` lines in `cif.conf`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StoreConfig {
    pub default_page_size: u32,
    /// Store-wide write-once mode: no new items or mutations are accepted.
    pub worm_mode: bool,
    pub id_allocation: IdAllocation,
    /// Sealed items still accept appended signature records.
    pub allow_sign_after_seal: bool,
}

impl Default for StoreConfig {
    fn default() -> Self {
        Self {
            default_page_size: DEFAULT_PAGE_SIZE,
            worm_mode: false,
            id_allocation: IdAllocation::Random,
            allow_sign_after_seal: true,
        }
    }
}

const CONFIG_VERSION: u32 = 1;

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got `{v}`"))),
    }
}

impl StoreConfig {
    pub fn to_text(&self) -> String {
        let mut s = String::from("# cif store configuration\n");
        let _ = writeln!(s, "config_version={CONFIG_VERSION}");
        let _ = writeln!(s, "default_page_size={}", self.default_page_size);
        let _ = writeln!(s, "worm_mode={}", self.worm_mode);
        let _ = writeln!(
            s,
            "id_allocation={}",
            match self.id_allocation {
                IdAllocation::Random => "random",
                IdAllocation::Sequential => "sequential",
            }
        );
        let _ = writeln!(s, "allow_sign_after_seal={}", self.allow_sign_after_seal);
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = StoreConfig::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key=value", lineno + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            match key {
                "config_version" => {
                    if value != CONFIG_VERSION.to_string() {
                        return Err(Error::Config(format!("unsupported config_version {value}")));
                    }
                }
                "default_page_size" => {
                    let n: u64 = value
                        .parse()
                        .map_err(|_| Error::Config(format!("default_page_size: `{value}`")))?;
                    cfg.default_page_size = validate_page_size(n)?;
                }
                "worm_mode" => cfg.worm_mode = parse_bool(key, value)?,
                "allow_sign_after_seal" => cfg.allow_sign_after_seal = parse_bool(key, value)?,
                "id_allocation" => {
                    cfg.id_allocation = match value {
                        "random" => IdAllocation::Random,
                        "sequential" => IdAllocation::Sequential,
                        _ => return Err(Error::Config(format!("id_allocation: `{value}`"))),
                    }
                }
                _ => return Err(Error::Config(format!("unknown key `{key}`"))),
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}
