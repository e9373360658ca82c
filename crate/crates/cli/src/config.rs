use std::fs;
use std::path::{Path, PathBuf};

use defectforge::dst::DstConfig;
use defectforge::features::ExtractorSource;
use defectforge::seg::SegConfig;
use defectforge::synth::BenchmarkCounts;
use serde::{Deserialize, Serialize};

pub const SCENARIOS: [&str; 5] = ["real", "real+hist", "real+dst", "hist", "dst"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Root of every generated file; relative to the config file.
    pub work: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self { work: PathBuf::from("work") }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    pub benchmark: u64,
    pub generate: u64,
    /// Segmentation seeds of `compare`.
    pub compare: Vec<u64>,
}

impl Default for Seeds {
    fn default() -> Self {
        Self { benchmark: 7, generate: 11, compare: vec![0, 1, 2] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Generate {
    pub count: usize,
}

impl Default for Generate {
    fn default() -> Self {
        Self { count: 200 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Compare {
    pub scenarios: Vec<String>,
}

impl Default for Compare {
    fn default() -> Self {
        Self { scenarios: vec!["real".into(), "real+hist".into(), "real+dst".into()] }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub paths: Paths,
    pub seeds: Seeds,
    pub benchmark: BenchmarkCounts,
    pub dst: DstConfig,
    pub seg: SegConfig,
    pub generate: Generate,
    pub compare: Compare,
}

impl RunConfig {
    /// Parses `text`, resolving relative paths against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self, String> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| e.to_string())?;
        cfg.resolve(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base).map_err(|e| format!("{}: {e}", path.display()))
    }

    fn resolve(&mut self, base: &Path) {
        self.paths.work = base.join(&self.paths.work);
        if let ExtractorSource::Archive { path } = &mut self.dst.extractor {
            *path = base.join(&*path);
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        self.dst.validate().map_err(|e| e.to_string())?;
        self.seg.validate().map_err(|e| e.to_string())?;
        let b = &self.benchmark;
        if b.references == 0 || b.backgrounds == 0 || b.real_train == 0 || b.test == 0 {
            return Err("benchmark counts must all be >= 1".into());
        }
        if b.size == 0 || !b.size.is_multiple_of(16) {
            return Err(format!("benchmark size must be a positive multiple of 16, got {}", b.size));
        }
        if self.generate.count == 0 {
            return Err("generate.count must be >= 1".into());
        }
        if self.seeds.compare.is_empty() {
            return Err("seeds.compare must not be empty".into());
        }
        check_scenarios(&self.compare.scenarios)?;
        if let ExtractorSource::Archive { path } = &self.dst.extractor {
            if !path.is_file() {
                return Err(format!("extractor archive {} does not exist", path.display()));
            }
        }
        Ok(())
    }
}

pub fn check_scenarios(names: &[String]) -> Result<(), String> {
    if names.is_empty() {
        return Err("no scenarios given".into());
    }
    match names.iter().find(|n| !SCENARIOS.contains(&n.as_str())) {
        Some(n) => Err(format!("unknown scenario `{n}` (expected one of {})", SCENARIOS.join(", "))),
        None => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults_under_base() {
        let cfg = RunConfig::parse("", Path::new("/tmp/x")).unwrap();
        assert_eq!(cfg.paths.work, Path::new("/tmp/x/work"));
        assert_eq!(cfg.dst, DstConfig::default());
        assert_eq!(cfg.seg.epochs, 120);
    }

    #[test]
    fn unknown_keys_are_errors() {
        for text in ["[dst]\nlearning_rate = 0.1\n", "[sege]\n", "top = 1\n", "[dst.weights]\nstyle_weight = 1.0\n"] {
            assert!(RunConfig::parse(text, Path::new(".")).is_err(), "{text}");
        }
    }

    #[test]
    fn nested_values_are_read_and_checked() {
        let text =
            "[dst]\nepochs = 2\n[dst.weights]\nhist = 5.0\n[seg]\ncrop = 32\n[compare]\nscenarios = [\"real\"]\n";
        let cfg = RunConfig::parse(text, Path::new(".")).unwrap();
        assert_eq!((cfg.dst.epochs, cfg.dst.weights.hist, cfg.seg.crop), (2, 5.0, Some(32)));
        assert!(RunConfig::parse("[seg]\ncrop = 20\n", Path::new(".")).is_err());
        assert!(RunConfig::parse("[dst]\nlr = -1.0\n", Path::new(".")).is_err());
        assert!(RunConfig::parse("[compare]\nscenarios = [\"gan\"]\n", Path::new(".")).is_err());
        let missing = "[dst.extractor]\nmode = \"archive\"\npath = \"nope.dstw\"\n";
        assert!(RunConfig::parse(missing, Path::new(".")).unwrap_err().contains("does not exist"));
    }
}
