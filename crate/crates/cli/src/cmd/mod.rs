pub mod analyze;
pub mod build_chains;
pub mod report;
pub mod scan;
pub mod synth;
pub mod train;

use std::fmt::Debug;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context as _;
use serde::Serialize;

use dgreason_core::backend::BackendError;
use dgreason_core::corpus::{scan_dataset, Corpus, CorpusError};
use dgreason_core::genpipe::GenError;
use dgreason_core::manifest::RunManifest;
use dgreason_core::metrics::MetricsError;
use dgreason_core::record::RecordError;
use dgreason_core::train::TrainError;

use crate::config::Config;
use crate::BackendChoice;

/// Bad invocation: reported with exit status 2.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

pub fn usage(message: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(UsageError(message.into()))
}

pub struct Context {
    pub config: Config,
    pub config_path: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub backend: Option<BackendChoice>,
    pub resume: bool,
}

impl Context {
    pub fn prepare_out_dir(&self) -> anyhow::Result<&Path> {
        fs::create_dir_all(&self.out_dir)
            .with_context(|| format!("creating {}", self.out_dir.display()))?;
        Ok(&self.out_dir)
    }

    pub fn out(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    pub fn dataset_root(&self, flag: Option<&Path>) -> anyhow::Result<PathBuf> {
        flag.map(Path::to_path_buf)
            .or_else(|| self.config.dataset.root.clone())
            .ok_or_else(|| usage("no dataset root: pass --root or set dataset.root"))
    }

    pub fn target_domain(&self, flag: Option<&str>, corpus: &Corpus) -> anyhow::Result<String> {
        let target = flag
            .map(str::to_string)
            .or_else(|| self.config.dataset.target_domain.clone())
            .ok_or_else(|| usage("no target domain: pass --target or set dataset.target_domain"))?;
        if !corpus.domains().contains(&target) {
            return Err(usage(format!(
                "target domain {target:?} not in {:?}",
                corpus.domains()
            )));
        }
        Ok(target)
    }

    pub fn load_corpus(&self, root: &Path) -> anyhow::Result<Corpus> {
        Ok(scan_dataset(root)?)
    }

    pub fn manifest(&self, command: &str, seeds: Vec<u64>) -> anyhow::Result<RunManifest> {
        let mut m = RunManifest::new(command, &self.config, seeds);
        if let Some(path) = &self.config_path {
            m.add_input("config", path)?;
        }
        Ok(m)
    }

    pub fn finish(&self, mut manifest: RunManifest) -> anyhow::Result<()> {
        let path = self.out(&format!("{}.manifest.json", manifest.command));
        manifest
            .finish(&path)
            .with_context(|| format!("writing {}", path.display()))
    }
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

pub fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Innermost variant name in a Debug rendering such as `Backend(Unscripted("a"))`.
fn variant<E: Debug>(e: &E) -> String {
    let dbg = format!("{e:?}");
    let mut rest = dbg.as_str();
    let mut name = "Error";
    loop {
        let end = rest
            .find(|c: char| !c.is_alphanumeric() && c != '_')
            .unwrap_or(rest.len());
        if end == 0 {
            break;
        }
        name = &rest[..end];
        match rest[end..].strip_prefix('(') {
            Some(inner) if inner.starts_with(|c: char| c.is_ascii_uppercase()) => rest = inner,
            _ => break,
        }
    }
    name.to_string()
}

/// Name of the most specific known error in the chain, e.g. `NotADataset`.
pub fn error_kind(err: &anyhow::Error) -> String {
    let mut kind = String::from("Error");
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return "UsageError".into();
        }
        let found = cause
            .downcast_ref::<CorpusError>()
            .map(variant)
            .or_else(|| cause.downcast_ref::<GenError>().map(variant))
            .or_else(|| cause.downcast_ref::<TrainError>().map(variant))
            .or_else(|| cause.downcast_ref::<BackendError>().map(variant))
            .or_else(|| cause.downcast_ref::<MetricsError>().map(variant))
            .or_else(|| cause.downcast_ref::<RecordError>().map(variant))
            .or_else(|| {
                cause
                    .downcast_ref::<toml::de::Error>()
                    .map(|_| "ConfigError".to_string())
            })
            .or_else(|| {
                cause
                    .downcast_ref::<std::io::Error>()
                    .map(|_| "IoFailure".to_string())
            });
        if let Some(k) = found {
            kind = k;
        }
    }
    kind
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kinds_name_the_innermost_variant() {
        let err = anyhow::Error::new(CorpusError::NotADataset("x".into()));
        assert_eq!(error_kind(&err), "NotADataset");
        let wrapped = anyhow::Error::new(TrainError::EmptyEvalSet).context("training");
        assert_eq!(error_kind(&wrapped), "EmptyEvalSet");
        let nested = anyhow::Error::new(TrainError::Backend(BackendError::Unscripted("a".into())));
        assert_eq!(error_kind(&nested), "Unscripted");
        assert_eq!(error_kind(&usage("bad")), "UsageError");
        assert_eq!(error_kind(&anyhow::anyhow!("plain")), "Error");
    }
}
