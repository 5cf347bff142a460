use std::fs;
use std::path::PathBuf;

use serde::Serialize;

use super::{CliError, RunConfig};
use crate::degradation::{self, map_ratio, type_only_mask, DegradationMask};
use crate::diffusion::{distance, CdgSampler, MaskSource, SigmaSchedule};
use crate::encoder::TokenSequence;
use crate::error::Error;
use crate::geometry::{run_geometry_sweep, GeometryReport};
use crate::guidance::{GuidanceConfig, GuidanceMode};
use crate::importance::{compute_importance, ImportanceReport};
use crate::rng;

type Sampler = CdgSampler<f64>;
type CmdResult = Result<Vec<PathBuf>, CliError>;

/// Output directory guard: refuses to overwrite unless forced.
pub struct Output {
    dir: PathBuf,
    force: bool,
}

impl Output {
    pub fn new(dir: PathBuf, force: bool) -> Self {
        Self { dir, force }
    }

    /// Checks every target up front so a refused run writes nothing.
    fn claim(&self, names: &[String]) -> Result<Vec<PathBuf>, CliError> {
        let paths: Vec<PathBuf> = names.iter().map(|n| self.dir.join(n)).collect();
        if !self.force {
            if let Some(p) = paths.iter().find(|p| p.exists()) {
                return Err(CliError::usage(format!(
                    "{} already exists (pass --force to overwrite)",
                    p.display()
                )));
            }
        }
        fs::create_dir_all(&self.dir).map_err(|e| CliError::runtime(format!("cannot create {}: {e}", self.dir.display())))?;
        Ok(paths)
    }
}

fn write_json<S: Serialize>(path: &PathBuf, value: &S) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::runtime(format!("cannot write {}: {e}", path.display())))
}

fn write_csv(path: &PathBuf, header: &[&str], rows: &[Vec<String>]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(Error::from)?;
    w.write_record(header).map_err(Error::from)?;
    for row in rows {
        w.write_record(row).map_err(Error::from)?;
    }
    w.flush().map_err(|e| CliError::runtime(format!("cannot write {}: {e}", path.display())))
}

fn build_sampler(cfg: &RunConfig) -> Result<Sampler, CliError> {
    Ok(CdgSampler::seeded(&cfg.setup(), cfg.seed)?)
}

fn schedule(cfg: &RunConfig) -> Result<SigmaSchedule<f64>, CliError> {
    Ok(SigmaSchedule::from_params(&cfg.schedule)?)
}

fn check_block(sampler: &Sampler, block: usize) -> Result<(), CliError> {
    let blocks = sampler.encoder().params().num_blocks;
    if block >= blocks {
        return Err(CliError::usage(format!(
            "lambda_block {block} out of range (encoder has {blocks} blocks)"
        )));
    }
    Ok(())
}

/// Importance from the encoder's own attention at the configured block.
fn static_importance(sampler: &Sampler, cfg: &RunConfig, tokens: &TokenSequence) -> Result<ImportanceReport<f64>, CliError> {
    check_block(sampler, cfg.guidance.lambda_block)?;
    let trace = sampler.encoder().trace(tokens)?;
    Ok(compute_importance(&trace.attention[cfg.guidance.lambda_block], sampler.importance_config())?)
}

fn sample_seed(cfg: &RunConfig, prompt_index: usize) -> u64 {
    rng::derive_seed(cfg.seed, "sample", prompt_index as u64)
}

#[derive(Serialize)]
struct TokenRank<'a> {
    position: usize,
    token: &'a str,
    id: u32,
    #[serde(rename = "type")]
    kind: &'static str,
    score: f64,
    rank: usize,
}

#[derive(Serialize)]
struct HeadRank {
    head: usize,
    variance: f64,
    kept: bool,
    converged: bool,
    iterations: usize,
    scores: Vec<f64>,
}

#[derive(Serialize)]
struct RankingFile<'a> {
    prompt: &'a str,
    lambda_block: usize,
    converged: bool,
    tokens: Vec<TokenRank<'a>>,
    heads: Vec<HeadRank>,
}

pub fn rank_tokens(cfg: &RunConfig, out: &Output, prompt: &str) -> CmdResult {
    let sampler = build_sampler(cfg)?;
    let tokens = sampler.encoder().tokenize(prompt)?;
    let report = static_importance(&sampler, cfg, &tokens)?;
    let paths = out.claim(&["rankings.json".into(), "rankings.csv".into()])?;

    let ranks = report.fused.ranks();
    let token_rows: Vec<TokenRank> = (0..tokens.len())
        .map(|i| TokenRank {
            position: i,
            token: &tokens.labels[i],
            id: tokens.ids[i],
            kind: tokens.kinds[i].as_str(),
            score: report.fused.scores[i],
            rank: ranks[i],
        })
        .collect();
    let csv_rows: Vec<Vec<String>> = token_rows
        .iter()
        .map(|t| vec![t.position.to_string(), t.token.to_string(), t.kind.to_string(), t.score.to_string(), t.rank.to_string()])
        .collect();
    let file = RankingFile {
        prompt,
        lambda_block: cfg.guidance.lambda_block,
        converged: report.per_head.iter().all(|h| h.converged),
        heads: report
            .per_head
            .iter()
            .enumerate()
            .map(|(h, s)| HeadRank {
                head: h,
                variance: report.variances[h],
                kept: report.heads_kept[h],
                converged: s.converged,
                iterations: s.iterations,
                scores: s.scores.clone(),
            })
            .collect(),
        tokens: token_rows,
    };
    write_json(&paths[0], &file)?;
    write_csv(&paths[1], &["position", "token", "type", "score", "rank"], &csv_rows)?;
    Ok(paths)
}

#[derive(Serialize)]
struct MaskToken<'a> {
    position: usize,
    token: &'a str,
    #[serde(rename = "type")]
    kind: &'static str,
    bit: u8,
    rank_within_type: usize,
}

#[derive(Serialize)]
struct MaskFile<'a> {
    prompt: &'a str,
    r_deg: f64,
    r_content: f64,
    r_ctxagg: f64,
    k_content: usize,
    k_ctxagg: usize,
    replaced_indices: &'a [usize],
    tokens: Vec<MaskToken<'a>>,
}

pub fn build_mask(cfg: &RunConfig, out: &Output, prompt: &str, r_deg: f64) -> CmdResult {
    let ratios = map_ratio(r_deg)?;
    let sampler = build_sampler(cfg)?;
    let tokens = sampler.encoder().tokenize(prompt)?;
    let mask = if ratios.is_type_boundary() {
        type_only_mask(&tokens)
    } else {
        let report = static_importance(&sampler, cfg, &tokens)?;
        degradation::build_mask(&tokens, &report.fused, &ratios)?
    };
    let paths = out.claim(&["mask.json".into()])?;
    let file = MaskFile {
        prompt,
        r_deg,
        r_content: ratios.r_content,
        r_ctxagg: ratios.r_ctxagg,
        k_content: mask.k_content,
        k_ctxagg: mask.k_ctxagg,
        replaced_indices: &mask.replaced_indices,
        tokens: (0..tokens.len())
            .map(|i| MaskToken {
                position: i,
                token: &tokens.labels[i],
                kind: tokens.kinds[i].as_str(),
                bit: mask.bits[i],
                rank_within_type: mask.rank_within_type[i],
            })
            .collect(),
    };
    write_json(&paths[0], &file)?;
    Ok(paths)
}

#[derive(Serialize)]
struct MaskSummary<'a> {
    k_content: usize,
    k_ctxagg: usize,
    replaced_indices: &'a [usize],
}

impl<'a> From<&'a DegradationMask> for MaskSummary<'a> {
    fn from(m: &'a DegradationMask) -> Self {
        Self {
            k_content: m.k_content,
            k_ctxagg: m.k_ctxagg,
            replaced_indices: &m.replaced_indices,
        }
    }
}

#[derive(Serialize)]
struct SampleRunFile<'a> {
    prompt_index: usize,
    prompt: &'a str,
    seed: u64,
    trajectory_file: String,
    final_latent: &'a [f64],
    wpr_call_count: usize,
    masks: Vec<MaskSummary<'a>>,
    step_masks: Vec<Option<usize>>,
    step_mask_sources: Vec<Option<MaskSource>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    wall_time_ms: Option<f64>,
}

#[derive(Serialize)]
struct SampleMetadata<'a> {
    seed: u64,
    guidance: &'a GuidanceConfig,
    steps: usize,
    runs: Vec<SampleRunFile<'a>>,
}

pub fn sample(cfg: &RunConfig, out: &Output, prompt: Option<&str>, record_timing: bool) -> CmdResult {
    let sampler = build_sampler(cfg)?;
    let schedule = schedule(cfg)?;
    let prompts = match prompt {
        Some(p) => vec![p.to_string()],
        None => cfg.resolved_prompts()?,
    };
    let mut runs = Vec::with_capacity(prompts.len());
    for (i, p) in prompts.iter().enumerate() {
        let tokens = sampler.encoder().tokenize(p)?;
        runs.push(sampler.sample(&schedule, &tokens, &cfg.guidance, sample_seed(cfg, i))?);
    }

    let mut names: Vec<String> = (0..prompts.len()).map(|i| format!("trajectory_{i:03}.csv")).collect();
    names.push("sample_metadata.json".into());
    let paths = out.claim(&names)?;

    let d = sampler.model().data_dim();
    let mut header = vec!["step".to_string(), "sigma".to_string()];
    header.extend((0..d).map(|j| format!("x{j}")));
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    for (i, run) in runs.iter().enumerate() {
        let rows: Vec<Vec<String>> = run
            .trajectory
            .iter()
            .enumerate()
            .map(|(step, x)| {
                let mut row = vec![step.to_string(), run.sigmas[step].to_string()];
                row.extend(x.iter().map(f64::to_string));
                row
            })
            .collect();
        write_csv(&paths[i], &header, &rows)?;
    }

    let meta = SampleMetadata {
        seed: cfg.seed,
        guidance: &cfg.guidance,
        steps: schedule.steps(),
        runs: runs
            .iter()
            .enumerate()
            .map(|(i, run)| SampleRunFile {
                prompt_index: i,
                prompt: &prompts[i],
                seed: sample_seed(cfg, i),
                trajectory_file: names[i].clone(),
                final_latent: run.final_latent(),
                wpr_call_count: run.wpr_call_count,
                masks: run.masks.iter().map(MaskSummary::from).collect(),
                step_masks: run.steps.iter().map(|s| s.mask).collect(),
                step_mask_sources: run.steps.iter().map(|s| s.mask_source).collect(),
                wall_time_ms: record_timing.then_some(run.wall_time.as_secs_f64() * 1e3),
            })
            .collect(),
    };
    write_json(paths.last().expect("metadata path"), &meta)?;
    Ok(paths)
}

pub fn sweep(cfg: &RunConfig, out: &Output) -> CmdResult {
    let sampler = build_sampler(cfg)?;
    let schedule = schedule(cfg)?;
    let prompts = cfg.resolved_prompts()?;
    let mode = if cfg.guidance.mode == GuidanceMode::CfgStar {
        GuidanceMode::CfgStar
    } else {
        GuidanceMode::Cdg
    };
    let grid = cfg.grid();

    let mut references = Vec::with_capacity(prompts.len());
    let mut prepared = Vec::with_capacity(prompts.len());
    for (i, p) in prompts.iter().enumerate() {
        let prompt = sampler.prepare_prompt(p)?;
        let x_t = sampler.initial_latent(&schedule, sample_seed(cfg, i));
        let reference = sampler.run_from(&schedule, &prompt, &GuidanceConfig::unguided(), x_t)?;
        references.push(reference.final_latent().to_vec());
        prepared.push(prompt);
    }

    let mut rows = Vec::with_capacity(grid.len() * prompts.len());
    for &r in &grid {
        let config = GuidanceConfig {
            mode,
            r_deg: Some(r),
            ..cfg.guidance
        };
        for (i, prompt) in prepared.iter().enumerate() {
            let x_t = sampler.initial_latent(&schedule, sample_seed(cfg, i));
            let run = sampler.run_from(&schedule, prompt, &config, x_t)?;
            let mask = run.first_mask().expect("degradation modes record a mask");
            rows.push(vec![
                r.to_string(),
                i.to_string(),
                prompts[i].clone(),
                mask.k_content.to_string(),
                mask.k_ctxagg.to_string(),
                mask.replaced_count().to_string(),
                distance(run.final_latent(), &references[i]).to_string(),
                run.wpr_call_count.to_string(),
            ]);
        }
    }
    let paths = out.claim(&["sweep.csv".into()])?;
    write_csv(
        &paths[0],
        &[
            "r_deg",
            "prompt_index",
            "prompt",
            "k_content",
            "k_ctxagg",
            "replaced_count",
            "distance_to_conditional",
            "wpr_call_count",
        ],
        &rows,
    )?;
    Ok(paths)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn diagnose(cfg: &RunConfig, out: &Output) -> CmdResult {
    let sampler = build_sampler(cfg)?;
    let schedule = schedule(cfg)?;
    let prompts = cfg
        .resolved_prompts()?
        .iter()
        .map(|p| sampler.prepare_prompt(p))
        .collect::<Result<Vec<_>, _>>()?;
    let w = cfg.guidance.guidance_scale;
    let config_cfg = GuidanceConfig {
        mode: GuidanceMode::Cfg,
        r_deg: None,
        ..cfg.guidance
    };
    let config_cdg = if cfg.guidance.mode.uses_degradation() {
        cfg.guidance
    } else {
        GuidanceConfig {
            mode: GuidanceMode::Cdg,
            r_deg: Some(1.0),
            guidance_scale: w,
            ..cfg.guidance
        }
    };
    let report: GeometryReport = run_geometry_sweep(
        &sampler,
        &schedule,
        &prompts,
        &config_cfg,
        &config_cdg,
        cfg.subspace_dim,
        rng::derive_seed(cfg.seed, "geometry", 0),
    )?;

    let mut rows = Vec::with_capacity(2 * report.records.len());
    for r in &report.records {
        for m in [&r.cfg, &r.cdg] {
            rows.push(vec![
                r.sigma.to_string(),
                m.method.as_str().to_string(),
                opt(m.decoupling_mean),
                opt(m.interference_mean),
                m.num_valid_prompts.to_string(),
            ]);
        }
    }
    let paths = out.claim(&["geometry.csv".into(), "geometry.json".into()])?;
    write_csv(
        &paths[0],
        &["sigma", "method", "decoupling_mean", "interference_mean", "num_valid_prompts"],
        &rows,
    )?;
    write_json(&paths[1], &report)?;
    Ok(paths)
}
