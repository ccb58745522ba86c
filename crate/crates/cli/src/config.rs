//! The experiment config: one JSON document, validated at load.

use crate::error::{CliError, Result};
use oga_core::fusion::{patch_dims, FusionStrategy};
use oga_core::scene::SceneConfig;
use oga_core::surrogates::{build_model, Architecture, ModelSpec, PretrainConfig, Task};
use oga_core::trainer::AttackConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

/// Hex digits kept from the SHA-256 of the canonical config.
const HASH_LEN: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    /// Relative paths resolve against the directory holding the config file.
    pub output_dir: PathBuf,
    pub scene: SceneConfig,
    pub pool: Vec<ModelSpec>,
    pub ensemble: EnsembleSpec,
    /// Tasks that greedy selection may draw from.
    pub select_tasks: Vec<Task>,
    pub pretrain: PretrainConfig,
    pub similarity: SimilarityConfig,
    pub attack: AttackConfig,
    pub compare: CompareConfig,
    /// Checkpoint interval in steps; 0 keeps only the first and last textures.
    pub checkpoint_every: usize,
}

impl Default for Config {
    fn default() -> Self {
        let spec = |a, s| ModelSpec::new(a, s);
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs"),
            scene: SceneConfig::default(),
            pool: vec![
                spec(Architecture::ConvA, 1),
                spec(Architecture::ConvA, 2),
                spec(Architecture::ConvA, 3),
                spec(Architecture::ConvC, 1),
                spec(Architecture::AttnB, 1),
                spec(Architecture::Seg, 1),
                spec(Architecture::Depth, 1),
            ],
            ensemble: EnsembleSpec::Greedy(2),
            select_tasks: vec![Task::Detection],
            pretrain: PretrainConfig::default(),
            similarity: SimilarityConfig::default(),
            attack: AttackConfig::default(),
            compare: CompareConfig::default(),
            checkpoint_every: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimilarityConfig {
    /// Views the gradient cosines are averaged over.
    pub views: usize,
}

impl Default for SimilarityConfig {
    fn default() -> Self {
        Self { views: 16 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareConfig {
    pub strategies: Vec<FusionStrategy>,
    /// Patch edges to sweep; `null` fuses the whole texture at once.
    pub patches: Vec<Option<usize>>,
}

impl Default for CompareConfig {
    fn default() -> Self {
        Self {
            strategies: FusionStrategy::ALL.to_vec(),
            patches: vec![Some(16)],
        }
    }
}

/// Which pool models to attack: `"greedy:N"` or an explicit list of names.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "EnsembleRepr", into = "EnsembleRepr")]
pub enum EnsembleSpec {
    Greedy(usize),
    Names(Vec<String>),
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum EnsembleRepr {
    Text(String),
    List(Vec<String>),
}

impl TryFrom<EnsembleRepr> for EnsembleSpec {
    type Error = String;

    fn try_from(r: EnsembleRepr) -> std::result::Result<Self, String> {
        match r {
            EnsembleRepr::Text(s) => s.parse(),
            EnsembleRepr::List(names) => Ok(Self::Names(names)),
        }
    }
}

impl From<EnsembleSpec> for EnsembleRepr {
    fn from(e: EnsembleSpec) -> Self {
        match e {
            EnsembleSpec::Greedy(_) => Self::Text(e.to_string()),
            EnsembleSpec::Names(n) => Self::List(n),
        }
    }
}

impl FromStr for EnsembleSpec {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let n = s.strip_prefix("greedy:").ok_or_else(|| {
            format!("ensemble `{s}` must be \"greedy:N\" or a list of model names")
        })?;
        n.parse()
            .map(Self::Greedy)
            .map_err(|_| format!("ensemble size `{n}` is not a number"))
    }
}

impl fmt::Display for EnsembleSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Greedy(n) => write!(f, "greedy:{n}"),
            Self::Names(n) => write!(f, "[{}]", n.join(", ")),
        }
    }
}

/// A config with its source location and resolved output directory.
#[derive(Clone, Debug)]
pub struct Loaded {
    pub config: Config,
    pub path: PathBuf,
    pub output_dir: PathBuf,
    pub hash: String,
}

impl Loaded {
    /// A default config rooted at `output_dir`, for commands run without one.
    pub fn defaults(output_dir: PathBuf) -> Self {
        let config = Config::default();
        Self {
            hash: config_hash(&config),
            config,
            path: PathBuf::new(),
            output_dir,
        }
    }
}

pub fn load(path: &Path) -> Result<Loaded> {
    let fail = |message: String| CliError::Config {
        path: path.to_path_buf(),
        line: None,
        column: None,
        key: None,
        message,
    };
    let text =
        std::fs::read_to_string(path).map_err(|e| fail(format!("cannot read config: {e}")))?;
    let config: Config = serde_json::from_str(&text).map_err(|e| parse_error(path, &text, &e))?;
    if let Err((key, message)) = validate(&config) {
        let (line, column) = locate(&text, &key).unzip();
        return Err(CliError::Config {
            path: path.to_path_buf(),
            line,
            column,
            key: Some(key.join(".")),
            message,
        });
    }
    let base = path.parent().unwrap_or(Path::new(""));
    let output_dir = base.join(&config.output_dir);
    Ok(Loaded {
        hash: config_hash(&config),
        config,
        path: path.to_path_buf(),
        output_dir,
    })
}

/// Short SHA-256 of the canonical JSON, ignoring where outputs go.
pub fn config_hash(config: &Config) -> String {
    let mut c = config.clone();
    c.output_dir = PathBuf::new();
    short_hash(&serde_json::to_vec(&c).expect("config serializes"))
}

/// Short SHA-256 of the settings a pretrained model depends on.
pub fn pretrain_hash(config: &Config, spec: &ModelSpec) -> String {
    let v = serde_json::json!({
        "scene": config.scene,
        "seed": config.seed,
        "pretrain": config.pretrain,
        "model": spec,
    });
    short_hash(&serde_json::to_vec(&v).expect("json serializes"))
}

fn short_hash(bytes: &[u8]) -> String {
    let mut h = hex::encode(Sha256::digest(bytes));
    h.truncate(HASH_LEN);
    h
}

fn parse_error(path: &Path, text: &str, e: &serde_json::Error) -> CliError {
    let msg = e.to_string();
    // serde_json appends " at line L column C"; the location is reported separately.
    let message = msg.split(" at line ").next().unwrap_or(&msg).to_string();
    let key = between(&message, "unknown field `", "`")
        .or_else(|| key_before(text, e.line(), e.column()));
    CliError::Config {
        path: path.to_path_buf(),
        line: (e.line() > 0).then_some(e.line()),
        column: (e.column() > 0).then_some(e.column()),
        key,
        message,
    }
}

fn between(s: &str, open: &str, close: &str) -> Option<String> {
    let start = s.find(open)? + open.len();
    let len = s[start..].find(close)?;
    Some(s[start..start + len].to_string())
}

/// The nearest `"key":` before a 1-based line/column.
fn key_before(text: &str, line: usize, column: usize) -> Option<String> {
    let offset: usize = text
        .split_inclusive('\n')
        .take(line.saturating_sub(1))
        .map(str::len)
        .sum::<usize>()
        + column;
    let mut prefix = &text[..offset.min(text.len())];
    while let Some(colon) = prefix.rfind(':') {
        let before = prefix[..colon].trim_end();
        if let Some(head) = before.strip_suffix('"') {
            if let Some(open) = head.rfind('"') {
                return Some(head[open + 1..].to_string());
            }
        }
        prefix = &prefix[..colon];
    }
    None
}

/// 1-based line and column of the last segment of a key path, found by
/// searching for each quoted segment after the previous one.
fn locate(text: &str, key: &[String]) -> Option<(usize, usize)> {
    let mut pos = 0;
    let mut found = None;
    for seg in key {
        let name = seg.split('[').next().unwrap_or(seg);
        let needle = format!("\"{name}\"");
        match text[pos..].find(&needle) {
            Some(i) => {
                pos += i;
                found = Some(pos);
                pos += needle.len();
            }
            None => break,
        }
    }
    let at = found?;
    let line = text[..at].matches('\n').count() + 1;
    let column = at - text[..at].rfind('\n').map_or(0, |n| n + 1) + 1;
    Some((line, column))
}

type Invalid = (Vec<String>, String);

fn path(parts: &[&str]) -> Vec<String> {
    parts.iter().map(|s| s.to_string()).collect()
}

/// Attaches a section to a core validation error, naming the field when the
/// message starts with one.
fn section<T: Serialize>(
    name: &str,
    value: &T,
    r: oga_core::Result<()>,
) -> std::result::Result<(), Invalid> {
    r.map_err(|e| {
        let message = match e {
            oga_core::Error::InvalidArgument(m) => m,
            other => other.to_string(),
        };
        let first = message.split_whitespace().next().unwrap_or("");
        let fields = serde_json::to_value(value).ok();
        let is_field = fields.as_ref().and_then(|v| v.get(first)).is_some();
        let mut key = vec![name.to_string()];
        if is_field {
            key.push(first.to_string());
        }
        (key, message)
    })
}

pub fn validate(c: &Config) -> std::result::Result<(), Invalid> {
    section("scene", &c.scene, c.scene.validate())?;
    if c.pool.is_empty() {
        return Err((path(&["pool"]), "the model pool is empty".into()));
    }
    let mut names = HashSet::new();
    for (i, spec) in c.pool.iter().enumerate() {
        let key = vec![format!("pool[{i}]")];
        build_model(spec).map_err(|e| (key.clone(), e.to_string()))?;
        if !names.insert(spec.display_name()) {
            return Err((
                key,
                format!("duplicate model name `{}`", spec.display_name()),
            ));
        }
    }
    if c.select_tasks.is_empty() {
        return Err((
            path(&["select_tasks"]),
            "at least one task must be selectable".into(),
        ));
    }
    match &c.ensemble {
        EnsembleSpec::Greedy(n) => {
            let candidates = c
                .pool
                .iter()
                .filter(|s| c.select_tasks.contains(&s.architecture.task()))
                .count();
            if *n < 2 || *n > candidates {
                return Err((
                    path(&["ensemble"]),
                    format!(
                        "greedy size {n} must lie in [2, {candidates}] (selectable pool models)"
                    ),
                ));
            }
        }
        EnsembleSpec::Names(list) => {
            if list.is_empty() {
                return Err((path(&["ensemble"]), "the ensemble list is empty".into()));
            }
            let mut seen = HashSet::new();
            for n in list {
                if !names.contains(n) {
                    return Err((path(&["ensemble"]), format!("`{n}` is not a pool model")));
                }
                if !seen.insert(n) {
                    return Err((path(&["ensemble"]), format!("`{n}` is listed twice")));
                }
            }
        }
    }
    validate_pretrain(&c.pretrain)?;
    if c.similarity.views == 0 {
        return Err((path(&["similarity", "views"]), "must be positive".into()));
    }
    section("attack", &c.attack, c.attack.validate())?;
    let shape = c
        .scene
        .mesh()
        .map(|m| m.texture_shape())
        .map_err(|e| (path(&["scene"]), e.to_string()))?;
    patch_dims(&shape, c.attack.patch).map_err(|e| (path(&["attack", "patch"]), e.to_string()))?;
    if c.compare.strategies.is_empty() {
        return Err((
            path(&["compare", "strategies"]),
            "no strategies to compare".into(),
        ));
    }
    if c.compare.patches.is_empty() {
        return Err((
            path(&["compare", "patches"]),
            "no patch sizes to compare".into(),
        ));
    }
    for p in &c.compare.patches {
        patch_dims(&shape, *p).map_err(|e| (path(&["compare", "patches"]), e.to_string()))?;
    }
    Ok(())
}

fn validate_pretrain(p: &PretrainConfig) -> std::result::Result<(), Invalid> {
    let key = |f: &str| path(&["pretrain", f]);
    if p.steps == 0 {
        return Err((key("steps"), "must be positive".into()));
    }
    if p.eval_every == 0 {
        return Err((key("eval_every"), "must be positive".into()));
    }
    if p.eval_views == 0 {
        return Err((key("eval_views"), "must be positive".into()));
    }
    if let Some(lr) = p.lr {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err((key("lr"), "must be finite and positive".into()));
        }
    }
    for (f, v) in [
        ("target_threshold", p.target_threshold),
        ("background_threshold", p.background_threshold),
        ("iou_threshold", p.iou_threshold),
    ] {
        if !(0.0..=1.0).contains(&v) {
            return Err((key(f), "must lie in [0, 1]".into()));
        }
    }
    if !(p.depth_threshold > 0.0 && p.depth_threshold.is_finite()) {
        return Err((key("depth_threshold"), "must be finite and positive".into()));
    }
    Ok(())
}
