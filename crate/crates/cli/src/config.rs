use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use parsestack::hierarchy::LabelHierarchy;
use parsestack::net::ArchMode;
use parsestack::synth::GeoSceneSpec;
use parsestack::training::{ModelConfig, TrainConfig};
use serde::{Deserialize, Serialize};

/// Version of every CSV layout this tool writes.
pub const CSV_SCHEMA: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train: usize,
    pub val: usize,
    pub scene: GeoSceneSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train: 200,
            val: 50,
            scene: GeoSceneSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// `geoscene`, `helen`, or the path of a `.hier` file.
    pub hierarchy: String,
    /// Keep only the finest N levels.
    pub levels: Option<usize>,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            hierarchy: "geoscene".into(),
            levels: None,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub mode: Option<ArchMode>,
    pub levels: Option<usize>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text = fs::read_to_string(p)
                    .with_context(|| format!("cannot read config {}", p.display()))?;
                toml::from_str::<RunConfig>(&text)
                    .with_context(|| format!("invalid config {}", p.display()))?
            }
            None => RunConfig::default(),
        };
        if let Some(s) = overrides.seed {
            cfg.train.seed = s;
        }
        if let Some(m) = overrides.mode {
            cfg.train.mode = m;
        }
        if overrides.levels.is_some() {
            cfg.levels = overrides.levels;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn hierarchy(&self) -> Result<LabelHierarchy> {
        let full = match self.hierarchy.as_str() {
            "geoscene" => LabelHierarchy::geoscene(),
            "helen" => LabelHierarchy::helen(),
            path => {
                let text = fs::read_to_string(path)
                    .with_context(|| format!("cannot read hierarchy file {path}"))?;
                LabelHierarchy::from_text(&text)
                    .with_context(|| format!("invalid hierarchy file {path}"))?
            }
        };
        Ok(match self.levels {
            Some(n) => full.finest_levels(n)?,
            None => full,
        })
    }

    /// Checks every section before any work starts.
    pub fn validate(&self) -> Result<()> {
        let h = self.hierarchy()?;
        self.data.scene.validate()?;
        if self.data.train == 0 {
            bail!("data.train must be positive");
        }
        self.train.validate()?;
        let net = self.model.net_config(&h);
        net.validate(&h)?;
        let factor = net.encoder.downsample_factor();
        if self.data.scene.height % factor != 0 || self.data.scene.width % factor != 0 {
            bail!(
                "image size {}x{} must be a multiple of the encoder downsampling factor {factor}",
                self.data.scene.height,
                self.data.scene.width
            );
        }
        let n = self.train.loss_weights.len();
        if n != 0 && n != h.num_levels() && !(n == 1 && self.train.mode == ArchMode::Standalone) {
            bail!(
                "train.loss_weights has {n} entries for {} levels",
                h.num_levels()
            );
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }
}

/// Output directory that refuses to replace existing files unless forced.
pub struct OutDir {
    dir: PathBuf,
    force: bool,
}

impl OutDir {
    pub fn new(dir: &Path, force: bool) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
        Ok(OutDir {
            dir: dir.to_path_buf(),
            force,
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Fails if any of `names` exists and `--force` was not given.
    pub fn claim(&self, names: &[String]) -> Result<()> {
        if self.force {
            return Ok(());
        }
        for n in names {
            let p = self.dir.join(n);
            if p.exists() {
                bail!(
                    "{} already exists; pass --force to overwrite",
                    p.display()
                );
            }
        }
        Ok(())
    }

    pub fn write(&self, name: &str, contents: impl AsRef<[u8]>) -> Result<PathBuf> {
        let p = self.dir.join(name);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&p, contents).with_context(|| format!("cannot write {}", p.display()))?;
        Ok(p)
    }

    /// Writes the resolved config and the schema manifest.
    pub fn archive(&self, cfg: &RunConfig, outputs: &[String]) -> Result<()> {
        self.write("config.toml", cfg.to_toml()?)?;
        let manifest = serde_json::json!({
            "csv_schema": CSV_SCHEMA,
            "outputs": outputs,
        });
        self.write("manifest.json", serde_json::to_string_pretty(&manifest)? + "\n")?;
        Ok(())
    }
}
