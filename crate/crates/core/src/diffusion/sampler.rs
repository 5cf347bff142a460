//! Guided probability-flow ODE sampling.
//!
//! Starting from `x_T ~ N(0, σ_T² I)`, each step evaluates the conditional noise
//! prediction and the mode's negative prediction, combines them, and takes an
//! Euler step `x ← x + (σ_next − σ) · ε̂` (equivalently
//! `x + (σ_next − σ) · σ · ŝcore`).
//!
//! For the degradation modes the importance ranking comes from the block
//! `lambda_block` attention at the current latent. With
//! `reuse_first_step_mask` the ranking is computed at the first step and cached;
//! otherwise it is recomputed every step. At `R == 1` the mask depends on token
//! types only and no ranking is computed at all.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::attention::{AttentionProvider, DEFAULT_BIAS_WEIGHT};
use super::model::{GmmConditionalModel, ModelParams};
use super::schedule::SigmaSchedule;
use crate::degradation::{apply_mask, build_mask_from_order, map_ratio, type_only_mask, DegradationMask};
use crate::encoder::{Condition, EncoderParams, EncoderTrace, Pooler, TextEncoder, TokenSequence};
use crate::error::{invalid, Error, Result};
use crate::guidance::{combine_cdg, combine_cfg, combine_cfg_star, GuidanceConfig, GuidanceMode, Prediction, PredictionSpace};
use crate::importance::{compute_importance, ImportanceConfig, ImportanceReport};
use crate::rng;
use crate::scalar::Scalar;

/// Everything needed to build the toy text-to-sample stack from seeds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToySetup {
    pub encoder: EncoderParams,
    pub model: ModelParams,
    pub attention_bias_weight: f64,
    pub importance: ImportanceConfig,
}

impl Default for ToySetup {
    fn default() -> Self {
        Self {
            encoder: EncoderParams::default(),
            model: ModelParams::default(),
            attention_bias_weight: DEFAULT_BIAS_WEIGHT,
            importance: ImportanceConfig::default(),
        }
    }
}

/// A prompt encoded once for a whole run.
#[derive(Debug, Clone)]
pub struct PreparedPrompt<T> {
    pub tokens: TokenSequence,
    pub trace: EncoderTrace<T>,
    pub condition: Condition<T>,
    pub embedding: Vec<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum MaskSource {
    /// `R == 1`: content positions zeroed without a ranking.
    TypeOnly,
    /// Ranking computed at this step.
    Computed,
    /// Ranking reused from the first step.
    Cached,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub sigma: f64,
    /// Index into `SamplerRun::masks`.
    pub mask: Option<usize>,
    pub mask_source: Option<MaskSource>,
}

#[derive(Debug, Clone)]
pub struct SamplerRun<T> {
    pub config: GuidanceConfig,
    pub sigmas: Vec<T>,
    /// `steps + 1` latents, starting with `x_T`.
    pub trajectory: Vec<Vec<T>>,
    pub steps: Vec<StepRecord>,
    /// Distinct consecutive masks used during the run.
    pub masks: Vec<DegradationMask>,
    pub wpr_call_count: usize,
    pub wall_time: Duration,
}

impl<T: Scalar> SamplerRun<T> {
    pub fn final_latent(&self) -> &[T] {
        self.trajectory.last().expect("trajectory holds x_T")
    }

    pub fn first_mask(&self) -> Option<&DegradationMask> {
        self.masks.first()
    }
}

pub struct CdgSampler<T> {
    encoder: TextEncoder<T>,
    pooler: Pooler<T>,
    model: GmmConditionalModel<T>,
    provider: AttentionProvider<T>,
    importance: ImportanceConfig,
    null_embedding: Vec<T>,
}

impl<T: Scalar> CdgSampler<T> {
    pub fn new(
        encoder: TextEncoder<T>,
        pooler: Pooler<T>,
        model: GmmConditionalModel<T>,
        provider: AttentionProvider<T>,
        importance: ImportanceConfig,
    ) -> Result<Self> {
        let d = encoder.params().embed_dim;
        if pooler.weight().cols() != d || pooler.out_dim() != model.cond_dim() {
            return Err(Error::Config(format!(
                "pooler maps {} -> {}, need {d} -> {}",
                pooler.weight().cols(),
                pooler.out_dim(),
                model.cond_dim()
            )));
        }
        if provider.embed_dim() != d || provider.data_dim() != model.data_dim() {
            return Err(Error::Config("attention provider dimensions do not match".into()));
        }
        let null_embedding = pooler.pool(encoder.null_condition())?;
        Ok(Self {
            encoder,
            pooler,
            model,
            provider,
            importance,
            null_embedding,
        })
    }

    /// Builds every component from `setup`, deriving each seed from `seed`.
    /// The `seed` fields of the encoder and model sections select a stream
    /// under the master seed rather than replacing it.
    pub fn seeded(setup: &ToySetup, seed: u64) -> Result<Self> {
        let encoder_params = EncoderParams {
            seed: rng::derive_seed(seed, "encoder", setup.encoder.seed),
            ..setup.encoder
        };
        let model_params = ModelParams {
            seed: rng::derive_seed(seed, "model", setup.model.seed),
            ..setup.model
        };
        let encoder = TextEncoder::new(encoder_params)?;
        let pooler = Pooler::new(encoder_params.embed_dim, model_params.cond_dim, rng::derive_seed(seed, "pooler", 0))?;
        let model = GmmConditionalModel::seeded(&model_params)?;
        let provider = AttentionProvider::new(
            encoder_params.embed_dim,
            model_params.data_dim,
            setup.attention_bias_weight,
            rng::derive_seed(seed, "provider", 0),
        )?;
        Self::new(encoder, pooler, model, provider, setup.importance)
    }

    pub fn encoder(&self) -> &TextEncoder<T> {
        &self.encoder
    }

    pub fn model(&self) -> &GmmConditionalModel<T> {
        &self.model
    }

    pub fn pooler(&self) -> &Pooler<T> {
        &self.pooler
    }

    pub fn provider(&self) -> &AttentionProvider<T> {
        &self.provider
    }

    pub fn importance_config(&self) -> &ImportanceConfig {
        &self.importance
    }

    pub fn null_embedding(&self) -> &[T] {
        &self.null_embedding
    }

    pub fn prepare(&self, tokens: &TokenSequence) -> Result<PreparedPrompt<T>> {
        let trace = self.encoder.trace(tokens)?;
        let condition = trace.output();
        let embedding = self.pooler.pool(&condition)?;
        Ok(PreparedPrompt {
            tokens: tokens.clone(),
            trace,
            condition,
            embedding,
        })
    }

    pub fn prepare_prompt(&self, prompt: &str) -> Result<PreparedPrompt<T>> {
        self.prepare(&self.encoder.tokenize(prompt)?)
    }

    /// Importance of the prompt's tokens at latent `x`, noise level `sigma`.
    pub fn importance_at(&self, prompt: &PreparedPrompt<T>, x: &[T], sigma: T, block: usize) -> Result<ImportanceReport<T>> {
        let map = self.provider.attention_for_trace(&self.encoder, &prompt.trace, x, sigma, block)?;
        compute_importance(&map, &self.importance)
    }

    /// Pooled embedding of `c_deg` for `mask`.
    pub fn degraded_embedding(&self, prompt: &PreparedPrompt<T>, mask: &DegradationMask) -> Result<Vec<T>> {
        let degraded = apply_mask(&prompt.condition, self.encoder.null_condition(), mask)?;
        self.pooler.pool(&degraded)
    }

    /// Noise prediction `ε = (x − D)/σ` for pooled condition `e`.
    pub fn noise_prediction(&self, x: &[T], sigma: T, e: &[T]) -> Result<Prediction<T>> {
        self.model.denoise(x, sigma, e)?.to_space(x, PredictionSpace::Noise)
    }

    /// Records a new mask and returns its pooled degraded embedding.
    fn push_mask(&self, prompt: &PreparedPrompt<T>, mask: DegradationMask, masks: &mut Vec<DegradationMask>) -> Result<Vec<T>> {
        let e = self.degraded_embedding(prompt, &mask)?;
        masks.push(mask);
        Ok(e)
    }

    pub fn initial_latent(&self, schedule: &SigmaSchedule<T>, seed: u64) -> Vec<T> {
        let mut r = rng::stream(seed, "initial-latent", 0);
        rng::normal_vec(&mut r, self.model.data_dim(), schedule.sigma_max())
    }

    pub fn sample(&self, schedule: &SigmaSchedule<T>, tokens: &TokenSequence, config: &GuidanceConfig, seed: u64) -> Result<SamplerRun<T>> {
        let start = Instant::now();
        let prompt = self.prepare(tokens)?;
        let x0 = self.initial_latent(schedule, seed);
        let mut run = self.run_from(schedule, &prompt, config, x0)?;
        run.wall_time = start.elapsed();
        Ok(run)
    }

    /// Integrates from a given starting latent `x_T`.
    pub fn run_from(&self, schedule: &SigmaSchedule<T>, prompt: &PreparedPrompt<T>, config: &GuidanceConfig, x_start: Vec<T>) -> Result<SamplerRun<T>> {
        let start = Instant::now();
        config.validate()?;
        if x_start.len() != self.model.data_dim() {
            return Err(invalid("starting latent has the wrong dimension"));
        }
        let degrade = config.mode.uses_degradation();
        if degrade && config.lambda_block >= self.encoder.params().num_blocks {
            return Err(invalid(format!(
                "lambda_block {} out of range (encoder has {} blocks)",
                config.lambda_block,
                self.encoder.params().num_blocks
            )));
        }
        let ratios = config.r_deg.map(map_ratio).transpose()?;
        let w = T::lit(config.guidance_scale);
        let sigmas = schedule.sigmas().to_vec();

        let mut x = x_start;
        let mut trajectory = Vec::with_capacity(sigmas.len());
        trajectory.push(x.clone());
        let mut steps = Vec::with_capacity(schedule.steps());
        let mut masks: Vec<DegradationMask> = Vec::new();
        let mut degraded_embedding: Option<Vec<T>> = None;
        let mut wpr_call_count = 0;

        for (i, pair) in sigmas.windows(2).enumerate() {
            let (sigma, next) = (pair[0], pair[1]);
            let cond = self.noise_prediction(&x, sigma, &prompt.embedding)?;
            let mut record = StepRecord {
                step: i,
                sigma: sigma.as_f64(),
                mask: None,
                mask_source: None,
            };

            let guided = match config.mode {
                GuidanceMode::None => cond,
                GuidanceMode::Cfg => {
                    let uncond = self.noise_prediction(&x, sigma, &self.null_embedding)?;
                    combine_cfg(&cond, &uncond, w)?
                }
                GuidanceMode::Cdg | GuidanceMode::CfgStar => {
                    let ratios = ratios.as_ref().expect("validated: degradation modes carry r_deg");
                    // type-only and reused masks are built once
                    let source = if ratios.is_type_boundary() {
                        if masks.is_empty() {
                            degraded_embedding = Some(self.push_mask(prompt, type_only_mask(&prompt.tokens), &mut masks)?);
                        }
                        MaskSource::TypeOnly
                    } else if config.reuse_first_step_mask && !masks.is_empty() {
                        MaskSource::Cached
                    } else {
                        let report = self.importance_at(prompt, &x, sigma, config.lambda_block)?;
                        wpr_call_count += 1;
                        let mask = build_mask_from_order(&prompt.tokens, &report.fused.sorted_indices, ratios)?;
                        if masks.last() != Some(&mask) {
                            degraded_embedding = Some(self.push_mask(prompt, mask, &mut masks)?);
                        }
                        MaskSource::Computed
                    };
                    record.mask = Some(masks.len() - 1);
                    record.mask_source = Some(source);

                    let e_deg = degraded_embedding.as_deref().expect("set alongside the mask");
                    let degraded = self.noise_prediction(&x, sigma, e_deg)?;
                    if config.mode == GuidanceMode::Cdg {
                        combine_cdg(&cond, &degraded, w)?
                    } else {
                        let uncond = self.noise_prediction(&x, sigma, &self.null_embedding)?;
                        combine_cfg_star(&degraded, &uncond, w)?
                    }
                }
            };

            let dt = next - sigma;
            for (xi, &g) in x.iter_mut().zip(&guided.value) {
                *xi += dt * g;
            }
            trajectory.push(x.clone());
            steps.push(record);
        }

        Ok(SamplerRun {
            config: *config,
            sigmas,
            trajectory,
            steps,
            masks,
            wpr_call_count,
            wall_time: start.elapsed(),
        })
    }
}
