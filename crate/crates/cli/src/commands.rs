//! The subcommands. Each one reads the config, does its work and leaves
//! artifacts with `.meta.json` sidecars in the output directory.

use crate::config::{load, pretrain_hash, EnsembleSpec, Loaded};
use crate::error::{CliError, Result};
use crate::io::{
    csv_writer, finish_csv, read_json, read_meta, read_ogaf, to_f32_precision, write_json,
    write_meta, write_ogaf, write_ppm, DirLock, Meta,
};
use oga_core::fusion::FusionStrategy;
use oga_core::scene::SceneGenerator;
use oga_core::similarity::{greedy_trace, similarity_matrix, SimilarityMatrix};
use oga_core::surrogates::{build_model, pretrain, Model, ModelSpec, PretrainMetrics, TrainStatus};
use oga_core::trainer::{
    eval_indices, evaluate, init_texture, run_attack, AttackConfig, AttackState, EvalResult,
};
use oga_core::Tensor;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::time::Instant;

/// Similarity views are drawn from their own index range.
pub const SIMILARITY_VIEW_BASE: usize = 1 << 36;

pub const MODELS_DIR: &str = "models";
pub const SIMILARITY_CSV: &str = "similarity.csv";
pub const ENSEMBLE_JSON: &str = "ensemble.json";
pub const ATTACK_DIR: &str = "attack";
pub const EVAL_CSV: &str = "eval.csv";
pub const COMPARE_DIR: &str = "compare";

/// A loaded config, its scene generator and the output-directory lock.
pub struct Context {
    pub loaded: Loaded,
    pub scenes: SceneGenerator,
    _lock: DirLock,
}

impl Context {
    pub fn open(config: &Path) -> Result<Self> {
        Self::from_loaded(load(config)?)
    }

    pub fn from_loaded(loaded: Loaded) -> Result<Self> {
        let scenes = SceneGenerator::new(loaded.config.scene.clone(), loaded.config.seed)?;
        let lock = DirLock::acquire(&loaded.output_dir)?;
        Ok(Self {
            loaded,
            scenes,
            _lock: lock,
        })
    }

    pub fn out(&self, rel: impl AsRef<Path>) -> PathBuf {
        self.loaded.output_dir.join(rel)
    }

    fn meta(&self, command: &str) -> Meta {
        Meta {
            config_hash: self.loaded.hash.clone(),
            seed: self.loaded.config.seed,
            command: command.into(),
            step: None,
        }
    }

    fn texture_shape(&self) -> [usize; 3] {
        self.scenes.mesh().texture_shape()
    }
}

/// Sidecar of a pretrained model.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelMeta {
    pub config_hash: String,
    pub seed: u64,
    pub pretrain_hash: String,
    pub spec: ModelSpec,
    pub metrics: PretrainMetrics,
}

pub fn model_path(ctx: &Context, spec: &ModelSpec) -> PathBuf {
    ctx.out(MODELS_DIR)
        .join(format!("{}.ogaf", spec.display_name()))
}

fn model_meta_path(ctx: &Context, spec: &ModelSpec) -> PathBuf {
    crate::io::meta_path(&model_path(ctx, spec))
}

/// Trains every pool model whose weights are missing or stale.
pub fn cmd_pretrain(ctx: &Context, force: bool) -> Result<Vec<ModelMeta>> {
    let cfg = &ctx.loaded.config;
    let mut out = Vec::with_capacity(cfg.pool.len());
    for spec in &cfg.pool {
        let path = model_path(ctx, spec);
        let meta_path = model_meta_path(ctx, spec);
        let hash = pretrain_hash(cfg, spec);
        if !force && path.exists() {
            if let Ok(m) = read_json::<ModelMeta>(&meta_path) {
                if m.pretrain_hash == hash {
                    println!(
                        "{}: up to date ({:?})",
                        spec.display_name(),
                        m.metrics.status
                    );
                    out.push(m);
                    continue;
                }
            }
        }
        let start = Instant::now();
        let (model, metrics) = pretrain(&build_model(spec)?, &ctx.scenes, &cfg.pretrain)?;
        write_ogaf(&path, &model.flat_params())?;
        let meta = ModelMeta {
            config_hash: ctx.loaded.hash.clone(),
            seed: cfg.seed,
            pretrain_hash: hash,
            spec: spec.clone(),
            metrics,
        };
        write_json(&meta_path, &meta)?;
        println!(
            "{}: {:?} after {} steps in {:.1}s (target {:.3}, background {:.3})",
            spec.display_name(),
            meta.metrics.status,
            meta.metrics.steps,
            start.elapsed().as_secs_f64(),
            meta.metrics.target_mean,
            meta.metrics.background_mean
        );
        if meta.metrics.status == TrainStatus::Undertrained {
            eprintln!(
                "warning: {} did not reach the pretraining thresholds",
                spec.display_name()
            );
        }
        out.push(meta);
    }
    Ok(out)
}

pub fn load_model(ctx: &Context, spec: &ModelSpec) -> Result<Model> {
    let path = model_path(ctx, spec);
    if !path.exists() {
        return Err(CliError::MissingModel(path));
    }
    let meta: ModelMeta = read_json(&model_meta_path(ctx, spec))?;
    let expected = pretrain_hash(&ctx.loaded.config, spec);
    if meta.pretrain_hash != expected {
        return Err(CliError::StaleArtifact {
            path,
            found: meta.pretrain_hash,
            expected,
        });
    }
    let mut model = build_model(spec)?;
    model.load_flat(&read_ogaf(&path)?)?;
    Ok(model)
}

fn load_models(ctx: &Context, specs: &[ModelSpec]) -> Result<Vec<Model>> {
    specs.iter().map(|s| load_model(ctx, s)).collect()
}

/// Pairwise gradient similarity of the whole pool at the attack's starting texture.
pub fn cmd_similarity(ctx: &Context) -> Result<SimilarityMatrix> {
    let cfg = &ctx.loaded.config;
    let pool = load_models(ctx, &cfg.pool)?;
    let views = ctx
        .scenes
        .views(SIMILARITY_VIEW_BASE..SIMILARITY_VIEW_BASE + cfg.similarity.views)?;
    let texture = init_texture(ctx.texture_shape(), cfg.seed);
    let m = similarity_matrix(&pool, &views, &texture, cfg.attack.tau)?;
    let path = ctx.out(SIMILARITY_CSV);
    write_similarity(&path, &m)?;
    write_meta(&path, &ctx.meta("similarity"))?;
    for (name, row) in m.names.iter().zip(&m.entries) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:+.3}")).collect();
        println!("{name:>10} {}", cells.join(" "));
    }
    Ok(m)
}

pub fn write_similarity(path: &Path, m: &SimilarityMatrix) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(std::iter::once("model".to_string()).chain(m.names.iter().cloned()))?;
    for (name, row) in m.names.iter().zip(&m.entries) {
        w.write_record(std::iter::once(name.clone()).chain(row.iter().map(|v| v.to_string())))?;
    }
    finish_csv(w, path)
}

pub fn read_similarity(path: &Path) -> Result<SimilarityMatrix> {
    let mut r =
        csv::Reader::from_path(path).map_err(|e| CliError::malformed(path, e.to_string()))?;
    let header = r.headers()?.clone();
    let names: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    let mut entries = Vec::with_capacity(names.len());
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        if rec.get(0) != names.get(i).map(String::as_str) {
            return Err(CliError::malformed(
                path,
                format!(
                    "row {} is not labeled `{}`",
                    i + 1,
                    names.get(i).map_or("", |s| s)
                ),
            ));
        }
        let row = rec
            .iter()
            .skip(1)
            .map(|v| v.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| CliError::malformed(path, format!("row {}: {e}", i + 1)))?;
        entries.push(row);
    }
    SimilarityMatrix::new(names, entries).map_err(|e| CliError::malformed(path, e.to_string()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleChoice {
    pub config_hash: String,
    pub seed: u64,
    pub rule: String,
    /// Rows of the similarity matrix, ascending. Empty for explicit lists.
    pub indices: Vec<usize>,
    pub names: Vec<String>,
    /// Names in the order greedy picked them.
    pub trace: Vec<String>,
}

/// Chooses the ensemble: the configured list, or greedy selection on the
/// similarity matrix (from `matrix`, a current `similarity.csv`, or computed).
pub fn cmd_select(ctx: &Context, matrix: Option<&Path>) -> Result<EnsembleChoice> {
    let cfg = &ctx.loaded.config;
    let choice = match &cfg.ensemble {
        EnsembleSpec::Names(names) => EnsembleChoice {
            config_hash: ctx.loaded.hash.clone(),
            seed: cfg.seed,
            rule: cfg.ensemble.to_string(),
            indices: Vec::new(),
            names: names.clone(),
            trace: names.clone(),
        },
        EnsembleSpec::Greedy(n) => {
            let m = match matrix {
                Some(p) => read_similarity(p)?,
                None => current_similarity(ctx)?,
            };
            let candidates: Vec<usize> = m
                .names
                .iter()
                .enumerate()
                .map(|(i, name)| {
                    let spec = cfg
                        .pool
                        .iter()
                        .find(|s| &s.display_name() == name)
                        .ok_or_else(|| {
                            CliError::malformed(
                                matrix.unwrap_or(Path::new(SIMILARITY_CSV)),
                                format!("`{name}` is not a pool model"),
                            )
                        })?;
                    Ok(cfg
                        .select_tasks
                        .contains(&spec.architecture.task())
                        .then_some(i))
                })
                .collect::<Result<Vec<_>>>()?
                .into_iter()
                .flatten()
                .collect();
            let sub = SimilarityMatrix::new(
                candidates.iter().map(|&i| m.names[i].clone()).collect(),
                candidates
                    .iter()
                    .map(|&a| candidates.iter().map(|&b| m.get(a, b)).collect())
                    .collect(),
            )?;
            let trace: Vec<usize> = greedy_trace(&sub, *n)?
                .into_iter()
                .map(|k| candidates[k])
                .collect();
            let mut indices = trace.clone();
            indices.sort_unstable();
            EnsembleChoice {
                config_hash: ctx.loaded.hash.clone(),
                seed: cfg.seed,
                rule: cfg.ensemble.to_string(),
                names: indices.iter().map(|&i| m.names[i].clone()).collect(),
                trace: trace.iter().map(|&i| m.names[i].clone()).collect(),
                indices,
            }
        }
    };
    write_json(&ctx.out(ENSEMBLE_JSON), &choice)?;
    println!("ensemble: {}", choice.names.join(", "));
    Ok(choice)
}

fn current_similarity(ctx: &Context) -> Result<SimilarityMatrix> {
    let path = ctx.out(SIMILARITY_CSV);
    if let Ok(meta) = read_meta(&path) {
        if meta.config_hash == ctx.loaded.hash && path.exists() {
            return read_similarity(&path);
        }
    }
    cmd_similarity(ctx)
}

/// The ensemble's specs, selecting it first when the rule is greedy and no
/// current selection exists.
pub fn ensemble_specs(ctx: &Context) -> Result<Vec<ModelSpec>> {
    let cfg = &ctx.loaded.config;
    let names = match &cfg.ensemble {
        EnsembleSpec::Names(n) => n.clone(),
        EnsembleSpec::Greedy(_) => {
            let path = ctx.out(ENSEMBLE_JSON);
            match read_json::<EnsembleChoice>(&path) {
                Ok(c) if c.config_hash == ctx.loaded.hash => c.names,
                _ => cmd_select(ctx, None)?.names,
            }
        }
    };
    names
        .iter()
        .map(|n| {
            cfg.pool
                .iter()
                .find(|s| &s.display_name() == n)
                .cloned()
                .ok_or_else(|| {
                    CliError::malformed(
                        ctx.out(ENSEMBLE_JSON),
                        format!("`{n}` is not a pool model"),
                    )
                })
        })
        .collect()
}

/// Artifacts of one attack run.
pub struct AttackOutcome {
    pub state: AttackState,
    pub models: Vec<Model>,
    /// The final texture as stored, at f32 precision.
    pub texture: Tensor,
}

/// Runs the attack, writing checkpoints, the final texture and the history.
pub fn cmd_attack(ctx: &Context) -> Result<AttackOutcome> {
    let cfg = &ctx.loaded.config;
    let models = load_models(ctx, &ensemble_specs(ctx)?)?;
    let dir = ctx.out(ATTACK_DIR);
    let ckpt_dir = dir.join("checkpoints");
    if ckpt_dir.exists() {
        std::fs::remove_dir_all(&ckpt_dir).map_err(|e| CliError::io(&ckpt_dir, e))?;
    }
    let checkpoint = |state_step: usize, texture: &Tensor| -> Result<()> {
        let path = ckpt_dir.join(format!("step-{state_step:06}.ogaf"));
        write_ogaf(&path, texture)?;
        write_meta(
            &path,
            &Meta {
                step: Some(state_step),
                ..ctx.meta("attack")
            },
        )
    };
    checkpoint(0, &init_texture(ctx.texture_shape(), cfg.seed))?;
    let every = cfg.checkpoint_every;
    let total = cfg.attack.epochs * cfg.attack.steps_per_epoch();
    let start = Instant::now();
    let mut write_err = None;
    let run = run_attack(&models, &ctx.scenes, &cfg.attack, cfg.seed, |s| {
        if every > 0 && s.step % every == 0 && s.step != total {
            if let Err(e) = checkpoint(s.step, &s.texture) {
                write_err = Some(e);
                return Err(oga_core::Error::InvalidArgument(
                    "checkpoint write failed".into(),
                ));
            }
        }
        if s.step % 50 == 0 {
            eprintln!(
                "step {}/{total} ({:.0}s)",
                s.step,
                start.elapsed().as_secs_f64()
            );
        }
        Ok(())
    });
    if let Some(e) = write_err {
        return Err(e);
    }
    let state = run?;
    if state.step > 0 {
        checkpoint(state.step, &state.texture)?;
    }
    let texture = to_f32_precision(&state.texture);
    let meta = Meta {
        step: Some(state.step),
        ..ctx.meta("attack")
    };
    let tex_path = dir.join("texture.ogaf");
    write_ogaf(&tex_path, &texture)?;
    write_meta(&tex_path, &meta)?;
    let ppm = dir.join("texture.ppm");
    write_ppm(&ppm, &texture)?;
    write_meta(&ppm, &meta)?;
    let hist = dir.join("history.csv");
    write_history(&hist, &models, &state)?;
    write_meta(&hist, &meta)?;
    if let (Some(first), Some(last)) = (state.history.first(), state.history.last()) {
        let mean = |r: &oga_core::trainer::StepRecord| {
            r.losses.models.iter().map(|m| m.total).sum::<f64>() / r.losses.models.len() as f64
        };
        println!(
            "attacked {} for {} steps in {:.1}s: mean loss {:.4} -> {:.4}",
            models
                .iter()
                .map(Model::name)
                .collect::<Vec<_>>()
                .join(", "),
            state.step,
            start.elapsed().as_secs_f64(),
            mean(first),
            mean(last)
        );
    } else {
        println!("no attack steps; wrote the initial texture");
    }
    Ok(AttackOutcome {
        state,
        models,
        texture,
    })
}

pub fn write_history(path: &Path, models: &[Model], state: &AttackState) -> Result<()> {
    let names: Vec<String> = models.iter().map(Model::name).collect();
    let mut header = vec!["step".to_string(), "epoch".to_string()];
    for n in &names {
        header.push(format!("{n}_task"));
        header.push(format!("{n}_feature"));
    }
    header.push("smooth".into());
    header.push("grad_norm".into());
    header.extend(names.iter().map(|n| format!("omega_{n}")));
    header.push("stalled".into());
    let mut w = csv_writer(path)?;
    w.write_record(&header)?;
    for r in &state.history {
        let mut row = vec![r.step.to_string(), r.epoch.to_string()];
        for m in &r.losses.models {
            row.push(m.task.to_string());
            row.push(m.feature.map(|f| f.to_string()).unwrap_or_default());
        }
        row.push(r.losses.smooth.to_string());
        row.push(r.grad_norm.to_string());
        row.extend(r.omega.iter().map(|o| o.to_string()));
        row.push(r.stalled.to_string());
        w.write_record(&row)?;
    }
    finish_csv(w, path)
}

/// Which texture `eval` scores.
pub enum EvalTexture {
    /// The attack's output in the run directory.
    Attacked,
    /// The seeded starting texture.
    Initial,
    File(PathBuf),
}

/// Held-out ASR and AP for the ensemble (or the whole pool).
pub fn cmd_eval(
    ctx: &Context,
    texture: EvalTexture,
    whole_pool: bool,
    output: Option<&Path>,
) -> Result<EvalResult> {
    let cfg = &ctx.loaded.config;
    let specs = if whole_pool {
        cfg.pool.clone()
    } else {
        ensemble_specs(ctx)?
    };
    let models = load_models(ctx, &specs)?;
    let texture = match texture {
        EvalTexture::Attacked => read_ogaf(&ctx.out(ATTACK_DIR).join("texture.ogaf"))?,
        EvalTexture::Initial => init_texture(ctx.texture_shape(), cfg.seed),
        EvalTexture::File(p) => read_ogaf(&p)?,
    };
    let views = ctx.scenes.views(eval_indices(cfg.attack.eval_views))?;
    let result = evaluate(&texture, &models, &views, cfg.attack.tau)?;
    let path = output.map_or_else(|| ctx.out(EVAL_CSV), Path::to_path_buf);
    write_eval(&path, &result)?;
    write_meta(&path, &ctx.meta("eval"))?;
    for m in &result.models {
        let opt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.3}"));
        println!(
            "{:>10} task loss {:.4} asr {} ap {}",
            m.name,
            m.task_loss,
            opt(m.asr),
            opt(m.ap)
        );
    }
    if let Some(a) = result.ensemble_asr {
        println!("  ensemble asr {a:.3}");
    }
    Ok(result)
}

pub fn write_eval(path: &Path, r: &EvalResult) -> Result<()> {
    let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
    let mut w = csv_writer(path)?;
    w.write_record([
        "model",
        "task",
        "views",
        "task_loss",
        "mean_confidence",
        "asr",
        "ap",
    ])?;
    for m in &r.models {
        let conf = (!m.confidences.is_empty())
            .then(|| m.confidences.iter().sum::<f64>() / m.confidences.len() as f64);
        let task = serde_json::to_value(m.task)?
            .as_str()
            .unwrap_or_default()
            .to_string();
        w.write_record([
            m.name.clone(),
            task,
            r.views.to_string(),
            m.task_loss.to_string(),
            opt(conf),
            opt(m.asr),
            opt(m.ap),
        ])?;
    }
    w.write_record([
        "ensemble".to_string(),
        String::new(),
        r.views.to_string(),
        String::new(),
        String::new(),
        opt(r.ensemble_asr),
        String::new(),
    ])?;
    finish_csv(w, path)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompareRow {
    pub strategy: FusionStrategy,
    /// `None` for whole-texture fusion.
    pub patch: Option<usize>,
    pub eval: EvalResult,
    /// Mean total loss over the ensemble at the last step.
    pub final_loss: f64,
    pub seconds: f64,
}

/// One attack per strategy and patch size from the same seed, each scored on
/// held-out views. Baselines ignore the patch size and run once.
pub fn cmd_compare(ctx: &Context) -> Result<Vec<CompareRow>> {
    let cfg = &ctx.loaded.config;
    let models = load_models(ctx, &ensemble_specs(ctx)?)?;
    let views = ctx.scenes.views(eval_indices(cfg.attack.eval_views))?;
    let mut runs: Vec<(FusionStrategy, Option<usize>)> = Vec::new();
    for &s in &cfg.compare.strategies {
        if s == FusionStrategy::Oga {
            runs.extend(cfg.compare.patches.iter().map(|&p| (s, p)));
        } else {
            runs.push((s, None));
        }
    }
    let dir = ctx.out(COMPARE_DIR);
    let mut rows = Vec::with_capacity(runs.len());
    for (strategy, patch) in runs {
        let attack = AttackConfig {
            fusion: strategy,
            patch,
            ..cfg.attack.clone()
        };
        let start = Instant::now();
        let state = run_attack(&models, &ctx.scenes, &attack, cfg.seed, |_| Ok(()))?;
        let seconds = start.elapsed().as_secs_f64();
        let texture = to_f32_precision(&state.texture);
        let eval = evaluate(&texture, &models, &views, attack.tau)?;
        let final_loss = state.history.last().map_or(f64::NAN, |r| {
            r.losses.models.iter().map(|m| m.total).sum::<f64>() / r.losses.models.len() as f64
        });
        let label = patch.map_or("full".to_string(), |p| p.to_string());
        let tex_path = dir.join(format!("{}-{label}.ogaf", strategy.id()));
        write_ogaf(&tex_path, &texture)?;
        write_meta(&tex_path, &ctx.meta("compare-fusion"))?;
        println!(
            "{:>16} patch {label:>4}: ensemble asr {} in {seconds:.1}s",
            strategy.id(),
            eval.ensemble_asr
                .map_or("-".to_string(), |a| format!("{a:.3}"))
        );
        rows.push(CompareRow {
            strategy,
            patch,
            eval,
            final_loss,
            seconds,
        });
    }
    let path = dir.join("compare.csv");
    write_compare(&path, &rows)?;
    write_meta(&path, &ctx.meta("compare-fusion"))?;
    Ok(rows)
}

pub fn write_compare(path: &Path, rows: &[CompareRow]) -> Result<()> {
    let mut w = csv_writer(path)?;
    let names: Vec<String> = rows
        .first()
        .map(|r| r.eval.models.iter().map(|m| m.name.clone()).collect())
        .unwrap_or_default();
    let mut header = vec![
        "strategy".to_string(),
        "patch".into(),
        "ensemble_asr".into(),
    ];
    header.extend(names.iter().map(|n| format!("asr_{n}")));
    header.push("final_loss".into());
    header.push("wall_seconds".into());
    w.write_record(&header)?;
    let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
    for r in rows {
        let mut row = vec![
            r.strategy.id().to_string(),
            r.patch.map(|p| p.to_string()).unwrap_or_default(),
            opt(r.eval.ensemble_asr),
        ];
        row.extend(r.eval.models.iter().map(|m| opt(m.asr)));
        row.push(r.final_loss.to_string());
        row.push(format!("{:.3}", r.seconds));
        w.write_record(&row)?;
    }
    finish_csv(w, path)
}

/// Writes `views` held-out renders of a texture plus the texture atlas itself.
pub fn cmd_render(
    ctx: &Context,
    texture: Option<&Path>,
    views: usize,
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    let texture = match texture {
        Some(p) => read_ogaf(p)?,
        None => init_texture(ctx.texture_shape(), ctx.loaded.config.seed),
    };
    let meta = ctx.meta("render");
    let mut written = Vec::with_capacity(views + 1);
    let atlas = dir.join("texture.ppm");
    write_ppm(&atlas, &texture)?;
    write_meta(&atlas, &meta)?;
    written.push(atlas);
    for (k, v) in ctx.scenes.views(eval_indices(views))?.iter().enumerate() {
        let path = dir.join(format!("view-{k:03}.ppm"));
        write_ppm(&path, &v.render(&texture)?)?;
        write_meta(&path, &meta)?;
        written.push(path);
    }
    println!("wrote {} images to {}", written.len(), dir.display());
    Ok(written)
}
