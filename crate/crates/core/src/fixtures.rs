//! Checked-in test fixtures and the manifest that regenerates them.
//!
//! Every entry names a generator, its arguments and seed, the output file
//! (relative to the manifest) and the SHA-256 of the expected bytes.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augmentation::synthetic_prompt;
use crate::error::{Error, Result};
use crate::gradcheck::{chain_params, OracleKind};
use crate::optimizer::rotation_demo::{run_suite, suite_csv, trajectories_csv};
use crate::optimizer::{evaluate_objective, Mode};
use crate::protocol::file::{encode_record, write_atomic, Role};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "generator", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Generator {
    /// Prompt embedding file of unit-norm Gaussian columns.
    GenSynthetic { d: usize, k: usize },
    /// Objective value and analytic gradient at a seeded parameter point.
    GradSnapshot { d: usize, m: usize, n: usize, k: usize, mode: Mode, oracle: OracleKind, gamma: f64 },
    /// Per-case comparison table of the 2-D rotation demo.
    DemoSuite { count: usize },
    /// Iterates of both methods on one demo quadratic.
    DemoTrajectory { case: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixtureEntry {
    pub id: String,
    pub command: Generator,
    pub seed: u64,
    pub file: PathBuf,
    pub sha256: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub fixtures: Vec<FixtureEntry>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Manifest> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

#[derive(Serialize)]
struct GradSnapshot<'a> {
    reward: f64,
    p_conf: f64,
    objective: f64,
    /// Gradient blocks in parameter order, each column-major.
    grads: Vec<(&'a str, Vec<f64>)>,
}

const SLOT_NAMES: [&str; 8] =
    ["e_pre", "e_suff", "z_pre", "z_suff", "theta1_pre", "theta2_pre", "theta1_suff", "theta2_suff"];

/// Produces the bytes of one fixture.
pub fn generate(command: &Generator, seed: u64) -> Result<Vec<u8>> {
    match command {
        Generator::GenSynthetic { d, k } => {
            let prompt = synthetic_prompt(*d, *k, seed, "synthetic")?;
            let mut bytes = Vec::new();
            encode_record(&mut bytes, prompt.emb(), Role::Prompt)?;
            Ok(bytes)
        }
        Generator::GradSnapshot { d, m, n, k, mode, oracle, gamma } => {
            let params = chain_params(*d, *m, *n, seed)?;
            let prompt = synthetic_prompt(*d, *k, seed + 500, "snapshot")?;
            let mut o = oracle.build(*d, seed)?;
            let eval = evaluate_objective(&params, &prompt, o.as_mut(), *mode, *gamma)?;
            let mats = [&eval.grads.e_pre, &eval.grads.e_suff, &eval.grads.z_pre, &eval.grads.z_suff];
            let mut grads: Vec<(&str, Vec<f64>)> =
                SLOT_NAMES[..4].iter().zip(mats).map(|(n, m)| (*n, m.to_col_major())).collect();
            let angles = [eval.grads.theta1_pre, eval.grads.theta2_pre, eval.grads.theta1_suff, eval.grads.theta2_suff];
            grads.extend(SLOT_NAMES[4..].iter().zip(angles).map(|(n, a)| (*n, vec![a])));
            let snap = GradSnapshot { reward: eval.reward, p_conf: eval.p_conf, objective: eval.objective, grads };
            let mut s = serde_json::to_string_pretty(&snap)?;
            s.push('\n');
            Ok(s.into_bytes())
        }
        Generator::DemoSuite { count } => Ok(suite_csv(&run_suite(seed, *count)?).into_bytes()),
        Generator::DemoTrajectory { case } => {
            let cases = run_suite(seed, case + 1)?;
            let c = &cases[*case];
            Ok(trajectories_csv(&c.rotation, &c.plain).into_bytes())
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FixtureStatus {
    pub id: String,
    pub expected: String,
    pub actual: String,
    /// Hash of the file currently on disk, if there is one.
    pub on_disk: Option<String>,
}

impl FixtureStatus {
    pub fn matches(&self) -> bool {
        self.actual == self.expected && self.on_disk.as_deref() == Some(self.expected.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RegenMode {
    /// Regenerate in memory and compare against the manifest and the files.
    Check,
    /// Regenerate and rewrite the files; the manifest hashes must still match.
    Write,
    /// Regenerate, rewrite the files and record the new hashes in the manifest.
    Update,
}

/// Regenerates every fixture of the manifest at `path`.
///
/// Fails with [`Error::Fixture`] naming the first drifted fixture unless
/// `mode` is [`RegenMode::Update`].
pub fn regen_fixtures(path: &Path, mode: RegenMode) -> Result<Vec<FixtureStatus>> {
    let mut manifest = Manifest::load(path)?;
    let root = path.parent().unwrap_or(Path::new("."));
    let mut report = Vec::with_capacity(manifest.fixtures.len());
    for entry in &mut manifest.fixtures {
        let bytes = generate(&entry.command, entry.seed)
            .map_err(|e| Error::Fixture { id: entry.id.clone(), message: e.to_string() })?;
        let actual = sha256_hex(&bytes);
        let file = root.join(&entry.file);
        if mode != RegenMode::Check {
            if let Some(dir) = file.parent() {
                fs::create_dir_all(dir)?;
            }
            write_atomic(&file, &bytes)?;
        }
        if mode == RegenMode::Update {
            entry.sha256 = actual.clone();
        }
        let on_disk = fs::read(&file).ok().map(|b| sha256_hex(&b));
        report.push(FixtureStatus { id: entry.id.clone(), expected: entry.sha256.clone(), actual, on_disk });
    }
    if mode == RegenMode::Update {
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        write_atomic(path, text.as_bytes())?;
    }
    let drifted: Vec<&FixtureStatus> = report.iter().filter(|s| !s.matches()).collect();
    if let Some(first) = drifted.first() {
        let message = if first.actual != first.expected {
            format!("regenerated hash {} differs from manifest hash {}", first.actual, first.expected)
        } else {
            match &first.on_disk {
                Some(h) => format!("file on disk hashes to {h}, manifest expects {}", first.expected),
                None => "file missing on disk".to_string(),
            }
        };
        let more = if drifted.len() > 1 { format!(" ({} fixtures drifted)", drifted.len()) } else { String::new() };
        return Err(Error::Fixture { id: first.id.clone(), message: message + &more });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_manifest(dir: &Path, m: &Manifest) -> PathBuf {
        let p = dir.join("manifest.json");
        fs::write(&p, serde_json::to_string(m).unwrap()).unwrap();
        p
    }

    fn entry(seed: u64) -> FixtureEntry {
        FixtureEntry {
            id: "prompt-8x4".into(),
            command: Generator::GenSynthetic { d: 8, k: 4 },
            seed,
            file: "prompt.ipgo".into(),
            sha256: String::new(),
        }
    }

    #[test]
    fn empty_manifest_is_noop() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_manifest(dir.path(), &Manifest::default());
        assert!(regen_fixtures(&p, RegenMode::Check).unwrap().is_empty());
    }

    #[test]
    fn update_then_check_then_perturbed_seed() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_manifest(dir.path(), &Manifest { fixtures: vec![entry(7)] });
        regen_fixtures(&p, RegenMode::Update).unwrap();
        let report = regen_fixtures(&p, RegenMode::Check).unwrap();
        assert!(report[0].matches());

        let mut m = Manifest::load(&p).unwrap();
        m.fixtures[0].seed = 8;
        write_manifest(dir.path(), &m);
        match regen_fixtures(&p, RegenMode::Check) {
            Err(Error::Fixture { id, .. }) => assert_eq!(id, "prompt-8x4"),
            other => panic!("expected drift, got {other:?}"),
        }
    }

    #[test]
    fn generators_are_deterministic() {
        let g = Generator::GradSnapshot { d: 8, m: 3, n: 2, k: 4, mode: Mode::IpgoPlus, oracle: OracleKind::Net, gamma: 1e-3 };
        assert_eq!(generate(&g, 3).unwrap(), generate(&g, 3).unwrap());
        assert_ne!(generate(&g, 3).unwrap(), generate(&g, 4).unwrap());
    }

    #[test]
    fn manifest_json_shape() {
        let text = serde_json::to_string(&entry(1)).unwrap();
        assert!(text.contains("\"command\":{\"generator\":\"gen-synthetic\",\"d\":8,\"k\":4}"), "{text}");
    }
}
