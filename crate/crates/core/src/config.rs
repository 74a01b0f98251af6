//! Flag resolution and run manifests.
//!
//! Every result-affecting value ends up in the resolved [`TrainConfig`], which
//! is echoed into the manifest written next to the outputs. A manifest holds
//! the original argument list, so re-running it reproduces the outputs, and
//! SHA-256 checksums of every output, so the reproduction can be checked.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::trainer::TrainConfig;

pub const MANIFEST_FILE: &str = "manifest.json";

/// Training settings as given on the command line or in a JSON file; `None`
/// means "use the preset's value".
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainOverrides {
    pub preset: Option<String>,
    pub lambda: Option<f64>,
    pub critic_steps: Option<usize>,
    pub clip: Option<f64>,
    pub lm_lr: Option<f64>,
    pub critic_lr: Option<f64>,
    pub steps: Option<u64>,
    pub batch_size: Option<usize>,
    pub seed: Option<u64>,
    pub d: Option<usize>,
    pub hidden: Option<usize>,
    pub f: Option<usize>,
    pub dropout: Option<f64>,
    pub init_range: Option<f64>,
    pub bptt_start: Option<usize>,
    pub bptt_end: Option<usize>,
    pub eval_every: Option<u64>,
    pub eval_samples: Option<usize>,
    pub no_critic: Option<bool>,
}

impl TrainOverrides {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Values set in `other` win.
    pub fn overlay(self, other: &TrainOverrides) -> TrainOverrides {
        macro_rules! pick {
            ($($f:ident),*) => { TrainOverrides { $($f: other.$f.clone().or(self.$f),)* } };
        }
        pick!(
            preset, lambda, critic_steps, clip, lm_lr, critic_lr, steps, batch_size, seed, d, hidden, f, dropout, init_range,
            bptt_start, bptt_end, eval_every, eval_samples, no_critic
        )
    }
}

/// Materializes every default of the chosen preset, applies the overrides and
/// validates the result for a run over `languages` languages.
pub fn validate_config(raw: &TrainOverrides, languages: usize) -> Result<TrainConfig> {
    let base = match raw.preset.as_deref().unwrap_or("desk") {
        "desk" => TrainConfig::desk(),
        "paper" => TrainConfig::paper(),
        other => return Err(Error::Config(format!("unknown preset {other:?} (expected desk or paper)"))),
    };
    let steps = raw.steps.unwrap_or(base.steps);
    let mut c = base.with_steps(steps);
    macro_rules! set {
        ($($f:ident),*) => { $(if let Some(v) = raw.$f { c.$f = v; })* };
    }
    set!(lambda, critic_steps, clip, lm_lr, critic_lr, batch_size, seed, d, hidden, f, dropout, init_range, eval_every, eval_samples);
    if let Some(s) = raw.bptt_start {
        c.truncation.start = s;
    }
    if let Some(e) = raw.bptt_end {
        c.truncation.end = e;
    }
    if raw.no_critic == Some(true) {
        if raw.lambda.is_some_and(|l| l > 0.0) {
            return Err(Error::Config("--no-critic contradicts a positive lambda".into()));
        }
        c.use_critic = false;
        c.lambda = 0.0;
    }
    if c.d == 0 || c.hidden == 0 || c.f == 0 {
        return Err(Error::Config("d, hidden and f must be positive".into()));
    }
    if !(0.0..1.0).contains(&c.dropout) {
        return Err(Error::Config(format!("dropout {} outside [0, 1)", c.dropout)));
    }
    if !(c.init_range > 0.0 && c.init_range.is_finite()) {
        return Err(Error::Config(format!("init range {} must be positive", c.init_range)));
    }
    c.validate(languages)?;
    Ok(c)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Record of one CLI invocation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    /// Arguments after the program name.
    pub argv: Vec<String>,
    /// Resolved settings, every default filled in.
    pub config: serde_json::Value,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub seed: u64,
    /// Output file name to SHA-256 hex digest.
    pub checksums: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(subcommand: &str, argv: Vec<String>, config: serde_json::Value, seed: u64) -> Self {
        RunManifest {
            subcommand: subcommand.to_string(),
            argv,
            config,
            inputs: Vec::new(),
            outputs: Vec::new(),
            seed,
            checksums: BTreeMap::new(),
        }
    }

    pub fn add_input(&mut self, path: &Path) {
        self.inputs.push(path.display().to_string());
    }

    /// Registers an existing output file and its checksum, keyed by file name.
    pub fn add_output(&mut self, path: &Path) -> Result<()> {
        let bytes = fs::read(path)?;
        let key = path.file_name().map_or_else(|| path.display().to_string(), |n| n.to_string_lossy().into_owned());
        self.outputs.push(path.display().to_string());
        self.checksums.insert(key, sha256_hex(&bytes));
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(fs::write(path, serde_json::to_string_pretty(self)? + "\n")?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }

    /// Checks that `dir` holds outputs matching every recorded checksum.
    pub fn verify(&self, dir: &Path) -> Result<()> {
        for (name, want) in &self.checksums {
            let got = sha256_hex(&fs::read(dir.join(name))?);
            if &got != want {
                return Err(Error::Checkpoint(format!("checksum of {name} differs: {got} vs {want}")));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_materialized() {
        let c = validate_config(&TrainOverrides::default(), 2).unwrap();
        assert_eq!(c, TrainConfig::desk());
        let p = validate_config(&TrainOverrides { preset: Some("paper".into()), ..Default::default() }, 2).unwrap();
        assert_eq!((p.d, p.hidden), (300, 512));
    }

    #[test]
    fn rejects_bad_values() {
        let e = validate_config(&TrainOverrides { lambda: Some(-1.0), ..Default::default() }, 2).unwrap_err();
        assert!(e.to_string().contains("lambda"), "{e}");
        let e = validate_config(&TrainOverrides { lambda: Some(0.1), ..Default::default() }, 1).unwrap_err();
        assert!(e.to_string().contains("constraint requires ≥2 languages"), "{e}");
        let e = validate_config(&TrainOverrides { lambda: Some(0.1), no_critic: Some(true), ..Default::default() }, 2).unwrap_err();
        assert!(e.to_string().contains("contradicts"), "{e}");
        assert!(validate_config(&TrainOverrides { preset: Some("huge".into()), ..Default::default() }, 2).is_err());
        assert!(validate_config(&TrainOverrides { f: Some(0), ..Default::default() }, 2).is_err());
    }

    #[test]
    fn overlay_prefers_later_values() {
        let file = TrainOverrides { lambda: Some(1.0), steps: Some(10), ..Default::default() };
        let flags = TrainOverrides { lambda: Some(0.5), ..Default::default() };
        let o = file.overlay(&flags);
        assert_eq!((o.lambda, o.steps), (Some(0.5), Some(10)));
        assert!(serde_json::from_str::<TrainOverrides>(r#"{"lamda": 1}"#).is_err());
    }

    #[test]
    fn manifest_checksums() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("a.txt");
        fs::write(&out, "hello").unwrap();
        let mut m = RunManifest::new("x", vec!["x".into()], serde_json::json!({}), 1);
        m.add_output(&out).unwrap();
        assert_eq!(m.checksums["a.txt"], "2cf24dba5fb0a30e26e83b2ac5b9e29e1b161e5c1fa7425e73043362938b9824");
        let path = dir.path().join(MANIFEST_FILE);
        m.save(&path).unwrap();
        let back = RunManifest::load(&path).unwrap();
        assert_eq!(back, m);
        back.verify(dir.path()).unwrap();
        fs::write(&out, "hellO").unwrap();
        assert!(back.verify(dir.path()).is_err());
    }
}
