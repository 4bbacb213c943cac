use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tilescope_core::assistant::BackendConfig;
use tilescope_core::store::CacheConfig;
use tilescope_core::{Error, Result};

pub const DEFAULT_REGION_LIMIT_PX: u64 = 16_000_000;

/// Environment variables that override the config file.
pub const ENV_LISTEN: &str = "TILESCOPE_LISTEN";
pub const ENV_STORE: &str = "TILESCOPE_STORE";
pub const ENV_TILE_CACHE_BYTES: &str = "TILESCOPE_TILE_CACHE_BYTES";
pub const ENV_SLIDE_CACHE_ENTRIES: &str = "TILESCOPE_SLIDE_CACHE_ENTRIES";
pub const ENV_REGION_LIMIT_PX: &str = "TILESCOPE_REGION_LIMIT_PX";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServerConfig {
    pub listen: String,
    pub store_root: PathBuf,
    pub cache: CacheConfig,
    pub region_limit_px: u64,
    /// Background workers warming the tile cache for prefetch hints.
    pub prefetch_workers: usize,
    /// Rebuild a stale similarity index on demand instead of failing.
    pub index_auto_refresh: bool,
    /// Static viewer bundle served under `/ui/`.
    pub ui_dir: Option<PathBuf>,
    pub assistant: BackendConfig,
}

impl Default for ServerConfig {
    fn default() -> Self {
        ServerConfig {
            listen: "127.0.0.1:8080".into(),
            store_root: PathBuf::from("store"),
            cache: CacheConfig::default(),
            region_limit_px: DEFAULT_REGION_LIMIT_PX,
            prefetch_workers: 2,
            index_auto_refresh: false,
            ui_dir: None,
            assistant: BackendConfig::default(),
        }
    }
}

impl ServerConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))
    }

    /// Reads `path` (if given), then applies environment overrides.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
                Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => ServerConfig::default(),
        };
        cfg.apply_env(|k| std::env::var(k).ok())?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply_env(&mut self, get: impl Fn(&str) -> Option<String>) -> Result<()> {
        fn num(key: &str, v: &str) -> Result<u64> {
            v.trim()
                .parse()
                .map_err(|_| Error::Config(format!("{key}: '{v}' is not a non-negative integer")))
        }
        if let Some(v) = get(ENV_LISTEN) {
            self.listen = v;
        }
        if let Some(v) = get(ENV_STORE) {
            self.store_root = PathBuf::from(v);
        }
        if let Some(v) = get(ENV_TILE_CACHE_BYTES) {
            self.cache.tile_cache_capacity_bytes = num(ENV_TILE_CACHE_BYTES, &v)?;
        }
        if let Some(v) = get(ENV_SLIDE_CACHE_ENTRIES) {
            self.cache.slide_cache_capacity_entries = num(ENV_SLIDE_CACHE_ENTRIES, &v)?;
        }
        if let Some(v) = get(ENV_REGION_LIMIT_PX) {
            self.region_limit_px = num(ENV_REGION_LIMIT_PX, &v)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.cache.validate()?;
        self.assistant.validate()?;
        if self.region_limit_px == 0 {
            return Err(Error::Config("region_limit_px must be positive".into()));
        }
        if self.prefetch_workers == 0 {
            return Err(Error::Config("prefetch_workers must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let cfg = ServerConfig::default();
        assert_eq!(cfg.cache.tile_cache_capacity_bytes, 512 * 1024 * 1024);
        assert_eq!(cfg.cache.slide_cache_capacity_entries, 16);
        assert_eq!(cfg.region_limit_px, 16_000_000);
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_key_is_named() {
        let err = ServerConfig::from_toml("listen = \"0.0.0.0:1\"\nlisten_port = 3\n").unwrap_err();
        assert!(err.to_string().contains("listen_port"), "{err}");
        let err = ServerConfig::from_toml("[cache]\ntile_cache_bytes = 3\n").unwrap_err();
        assert!(err.to_string().contains("tile_cache_bytes"), "{err}");
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let cfg =
            ServerConfig::from_toml("store_root = \"/data\"\n[assistant]\nkind = \"echo\"\nmax_context_turns = 2\n")
                .unwrap();
        assert_eq!(cfg.store_root, PathBuf::from("/data"));
        assert_eq!(cfg.assistant.max_context_turns, 2);
        assert_eq!(cfg.listen, "127.0.0.1:8080");
    }

    #[test]
    fn env_overrides() {
        let mut cfg = ServerConfig::default();
        cfg.apply_env(|k| match k {
            ENV_LISTEN => Some("127.0.0.1:0".into()),
            ENV_TILE_CACHE_BYTES => Some("1024".into()),
            ENV_REGION_LIMIT_PX => Some("99".into()),
            _ => None,
        })
        .unwrap();
        assert_eq!(cfg.listen, "127.0.0.1:0");
        assert_eq!(cfg.cache.tile_cache_capacity_bytes, 1024);
        assert_eq!(cfg.region_limit_px, 99);
        let err = cfg
            .apply_env(|k| (k == ENV_SLIDE_CACHE_ENTRIES).then(|| "many".to_string()))
            .unwrap_err();
        assert!(err.to_string().contains(ENV_SLIDE_CACHE_ENTRIES));
    }

    #[test]
    fn zero_capacity_rejected() {
        let mut cfg = ServerConfig::default();
        cfg.cache.tile_cache_capacity_bytes = 0;
        assert!(cfg.validate().is_err());
    }
}
