//! Run configuration: a baked-in task preset with optional overrides read
//! from a TOML or JSON file.

use std::path::{Path, PathBuf};

use gmmflow::experiment::TaskPreset;
use serde_json::Value;

use crate::CliError;

/// Keys handled here rather than merged into the preset.
const RUN_KEYS: [&str; 3] = ["preset", "seeds", "output_dir"];

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub preset: TaskPreset,
    pub seeds: Vec<u64>,
    pub max_env_steps: usize,
    pub output_dir: PathBuf,
}

/// Seed list as given on the command line.
#[derive(Debug, Clone, PartialEq)]
pub struct Seeds(pub Vec<u64>);

/// Parses `3`, `0,2,5`, `0..5` (exclusive) or `0..=4`.
pub fn parse_seeds(text: &str) -> Result<Seeds, String> {
    let num = |s: &str| s.trim().parse::<u64>().map_err(|e| format!("bad seed '{s}': {e}"));
    let seeds = if let Some((a, b)) = text.split_once("..=") {
        (num(a)?..=num(b)?).collect()
    } else if let Some((a, b)) = text.split_once("..") {
        (num(a)?..num(b)?).collect()
    } else {
        text.split(',').map(num).collect::<Result<Vec<_>, _>>()?
    };
    if seeds.is_empty() {
        return Err(format!("seed list '{text}' is empty"));
    }
    Ok(Seeds(seeds))
}

fn read_overrides(path: &Path) -> Result<Value, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
    let parsed = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).map_err(|e| CliError::input(format!("{}: {e}", path.display())))?
    } else {
        let table: toml::Table = toml::from_str(&text).map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
        serde_json::to_value(table).map_err(|e| CliError::input(e.to_string()))?
    };
    match parsed {
        Value::Object(_) => Ok(parsed),
        _ => Err(CliError::input("config must be a table")),
    }
}

/// Overlays `patch` onto `base`. Every key in the patch must already exist
/// so that typos fail loudly instead of being ignored.
fn merge(base: &mut Value, patch: &Value, path: &str) -> Result<(), CliError> {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                let here = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                let slot = b.get_mut(k).ok_or_else(|| CliError::input(format!("unknown config key '{here}'")))?;
                merge(slot, v, &here)?;
            }
            Ok(())
        }
        (slot, v) => {
            *slot = v.clone();
            Ok(())
        }
    }
}

/// Resolves the run configuration. Command-line values win over the file,
/// the file wins over the preset.
pub fn resolve(
    config: Option<&Path>,
    task: Option<&str>,
    seeds: Option<&[u64]>,
    default_seeds: &[u64],
    max_env_steps: Option<usize>,
    out: Option<&Path>,
) -> Result<RunConfig, CliError> {
    let mut overrides = match config {
        Some(p) => read_overrides(p)?,
        None => Value::Object(Default::default()),
    };
    let table = overrides.as_object_mut().expect("checked above");
    let run: Vec<(String, Value)> =
        RUN_KEYS.iter().filter_map(|k| table.remove(*k).map(|v| (k.to_string(), v))).collect();
    let run_value = |key: &str| run.iter().find(|(k, _)| k == key).map(|(_, v)| v);

    let name = match (task, run_value("preset")) {
        (Some(t), _) => t.to_string(),
        (None, Some(Value::String(s))) => s.clone(),
        (None, Some(_)) => return Err(CliError::input("'preset' must be a string")),
        (None, None) => return Err(CliError::input("no task given: pass --task or set 'preset' in the config")),
    };
    let base = TaskPreset::from_name(&name)?;
    let mut value = serde_json::to_value(&base).map_err(|e| CliError::input(e.to_string()))?;
    merge(&mut value, &overrides, "")?;
    let preset: TaskPreset = serde_json::from_value(value).map_err(|e| CliError::input(format!("config: {e}")))?;
    preset.validate()?;

    let seeds = match (seeds, run_value("seeds")) {
        (Some(s), _) => s.to_vec(),
        (None, Some(v)) => serde_json::from_value::<Vec<u64>>(v.clone())
            .map_err(|e| CliError::input(format!("config seeds: {e}")))?,
        (None, None) => default_seeds.to_vec(),
    };
    if seeds.is_empty() {
        return Err(CliError::input("seed list is empty"));
    }
    let max_env_steps = max_env_steps.unwrap_or(preset.max_env_steps);
    if max_env_steps == 0 {
        return Err(CliError::input("max_env_steps must be > 0"));
    }
    let output_dir = match (out, run_value("output_dir")) {
        (Some(p), _) => p.to_path_buf(),
        (None, Some(Value::String(s))) => PathBuf::from(s),
        (None, Some(_)) => return Err(CliError::input("'output_dir' must be a string")),
        (None, None) => PathBuf::from("."),
    };
    Ok(RunConfig { preset, seeds, max_env_steps, output_dir })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_forms() {
        assert_eq!(parse_seeds("3").unwrap().0, vec![3]);
        assert_eq!(parse_seeds("0,2,5").unwrap().0, vec![0, 2, 5]);
        assert_eq!(parse_seeds("1..4").unwrap().0, vec![1, 2, 3]);
        assert_eq!(parse_seeds("0..=4").unwrap().0, vec![0, 1, 2, 3, 4]);
        assert!(parse_seeds("4..4").is_err());
        assert!(parse_seeds("x").is_err());
    }

    #[test]
    fn overrides_are_nested_and_checked() {
        let dir = std::env::temp_dir().join(format!("gmmflow-cfg-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("run.toml");
        std::fs::write(&path, "preset = \"collision\"\nseeds = [7, 8]\nn_demos = 4\n[optimizer]\ntau = 2.5\n").unwrap();
        let cfg = resolve(Some(&path), None, None, &[0], None, None).unwrap();
        assert_eq!(cfg.preset.name, "collision");
        assert_eq!(cfg.seeds, vec![7, 8]);
        assert_eq!(cfg.preset.n_demos, 4);
        assert_eq!(cfg.preset.optimizer.tau, 2.5);
        assert_eq!(cfg.max_env_steps, cfg.preset.max_env_steps);

        std::fs::write(&path, "preset = \"collision\"\n[optimizer]\ntaw = 2.5\n").unwrap();
        let err = resolve(Some(&path), None, None, &[0], None, None).unwrap_err();
        assert!(err.to_string().contains("optimizer.taw"));
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn flags_win_over_the_preset() {
        let cfg = resolve(None, Some("reaching"), Some(&[4]), &[0], Some(10), None).unwrap();
        assert_eq!((cfg.seeds, cfg.max_env_steps), (vec![4], 10));
        assert!(resolve(None, None, None, &[0], None, None).is_err());
        assert!(resolve(None, Some("nope"), None, &[0], None, None).is_err());
    }
}
