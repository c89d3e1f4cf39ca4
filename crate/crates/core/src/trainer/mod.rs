//! Stage 1 trains only the adapters on the embedding losses; Stage 2 freezes
//! them inside the encoder and trains a depth head on day-clear scenes.

mod adamw;
mod head;

use std::fmt;

pub use adamw::AdamW;
pub use head::{from_patch_layout, to_patch_layout, DepthHead};

use crate::config::ExperimentConfig;
use crate::encoders::{ImageEncoder, TextEncoder};
use crate::error::{Error, Result};
use crate::lora::{policy_deltas, AdapterPolicy, AdapterSet};
use crate::metrics::{MetricAccumulator, MetricReport};
use crate::objectives::{pretrain_loss, EmbeddingBundle};
use crate::synthdata::{apply_domain, gen_scene, sample_crops, tile_crops, CropBatch};
use crate::tensor::{SeededRng, Tensor};

/// Label of the single set used when adapters are shared across targets.
pub const SHARED_LABEL: &str = "shared";

/// One label per adapter set, in set order.
pub fn set_labels(cfg: &ExperimentConfig) -> Vec<String> {
    if cfg.lora.shared {
        vec![SHARED_LABEL.to_string()]
    } else {
        cfg.prompts.labels()
    }
}

/// Zero-initialized adapter sets for the configured topology.
pub fn init_adapters(cfg: &ExperimentConfig) -> Result<Vec<AdapterSet>> {
    (0..set_labels(cfg).len())
        .map(|i| {
            let mut rng = SeededRng::child(cfg.pretrain.seed, "adapters", i as u64);
            AdapterSet::new(
                &mut rng,
                i,
                cfg.encoder.blocks,
                &cfg.lora.layers,
                cfg.encoder.dim,
                cfg.lora.rank,
                cfg.lora.alpha(),
            )
        })
        .collect()
}

/// Encoder with the policy's adapter deltas folded into its projections.
pub fn merged_encoder(cfg: &ExperimentConfig, image: &ImageEncoder, sets: &[AdapterSet], policy: &AdapterPolicy) -> Result<ImageEncoder> {
    if *policy == AdapterPolicy::None {
        return Ok(image.clone());
    }
    let policy = match policy {
        AdapterPolicy::Single(_) if cfg.lora.shared => AdapterPolicy::MergeMean,
        other => other.clone(),
    };
    image.with_deltas(&policy_deltas(sets, &set_labels(cfg), &policy)?)
}

/// `B` training images, `N` crops each.
fn training_batch(rng: &mut SeededRng, cfg: &ExperimentConfig, batch: usize, distinct_scenes: bool) -> Result<CropBatch> {
    let d = &cfg.data;
    let mut parts = Vec::new();
    for _ in 0..batch {
        if distinct_scenes {
            for _ in 0..d.crops {
                let scene = gen_scene(rng, &d.scene);
                parts.push(sample_crops(rng, &scene, 1, d.crop_height, d.crop_width, cfg.encoder.patch)?);
            }
        } else {
            let scene = gen_scene(rng, &d.scene);
            parts.push(sample_crops(rng, &scene, d.crops, d.crop_height, d.crop_width, cfg.encoder.patch)?);
        }
    }
    CropBatch::concat(&parts)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainLogLine {
    pub iteration: usize,
    pub align: Vec<(String, f64)>,
    pub vtccl: f64,
    pub total: f64,
}

impl fmt::Display for PretrainLogLine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "iter={}", self.iteration)?;
        for (label, v) in &self.align {
            write!(f, " align[{label}]={v:.9}")?;
        }
        write!(f, " vtccl={:.9} pre={:.9}", self.vtccl, self.total)
    }
}

#[derive(Clone, Debug)]
pub struct PretrainRun {
    pub sets: Vec<AdapterSet>,
    pub log: Vec<PretrainLogLine>,
}

/// Optimizes the adapters alone under the alignment + contrastive objective.
pub fn pretrain_stage(cfg: &ExperimentConfig, image: &ImageEncoder, text: &TextEncoder) -> Result<PretrainRun> {
    let prompts = cfg.prompt_set()?;
    let targets = prompts.len();
    cfg.loss.validate(targets)?;
    let labels = set_labels(cfg);
    let sets = init_adapters(cfg)?;
    let source_text = text.encode(&prompts.source)?;
    let target_text = prompts.targets.iter().map(|p| text.encode(p)).collect::<Result<Vec<_>>>()?;
    let weights = vec![1.0; targets];

    let params = sets
        .iter()
        .zip(&labels)
        .flat_map(|(set, label)| {
            set.adapters().flat_map(move |ad| {
                let t = ad.target();
                [
                    (format!("lora.{label}.{}.{}.A", t.block, t.layer), ad.a.clone()),
                    (format!("lora.{label}.{}.{}.B", t.block, t.layer), ad.b.clone()),
                ]
            })
        })
        .collect();
    let mut opt = AdamW::new(cfg.pretrain.optim.clone(), params);
    let mut rng = SeededRng::child(cfg.pretrain.seed, "pretrain-data", 0);
    let n = cfg.data.crops;
    let mut log = Vec::with_capacity(cfg.pretrain.iterations);

    for iteration in 0..cfg.pretrain.iterations {
        let batch = training_batch(&mut rng, cfg, cfg.pretrain.batch, cfg.data.distinct_scenes)?;
        let source = image.encode(&batch.crops, None)?;
        let adapted = sets
            .iter()
            .map(|s| image.encode(&batch.crops, Some(s)))
            .collect::<Result<Vec<_>>>()?;
        let per_target: Vec<&Tensor> = (0..targets).map(|i| &adapted[i.min(adapted.len() - 1)]).collect();

        let items = cfg.pretrain.batch;
        let mut total: Option<Tensor> = None;
        let mut align = vec![0.0; targets];
        let mut vtccl = 0.0;
        for b in 0..items {
            let bundle = EmbeddingBundle::new(
                source.narrow_rows(b * n, n)?,
                per_target.iter().map(|t| t.narrow_rows(b * n, n)).collect::<Result<_>>()?,
                source_text.clone(),
                target_text.clone(),
            )?;
            let loss = pretrain_loss(&bundle, &cfg.loss, &weights)?;
            align.iter_mut().zip(&loss.align).for_each(|(a, v)| *a += v / items as f64);
            vtccl += loss.vtccl / items as f64;
            total = Some(match total {
                None => loss.total,
                Some(t) => t.add(&loss.total)?,
            });
        }
        let total = total.expect("batch is nonempty").scalar_mul(1.0 / items as f64);
        let line = PretrainLogLine {
            iteration,
            align: cfg.prompts.labels().into_iter().zip(align).collect(),
            vtccl,
            total: total.item(),
        };
        if !line.total.is_finite() {
            return Err(Error::NonFinite {
                iteration,
                components: line.to_string(),
            });
        }
        log.push(line);
        opt.zero_grad();
        total.backward()?;
        opt.step()?;
    }
    Ok(PretrainRun { sets, log })
}

#[derive(Clone, Debug, PartialEq)]
pub struct DepthLogLine {
    pub iteration: usize,
    pub mae: f64,
}

impl fmt::Display for DepthLogLine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "iter={} mae={:.9}", self.iteration, self.mae)
    }
}

#[derive(Clone, Debug)]
pub struct DepthRun {
    pub head: DepthHead,
    pub log: Vec<DepthLogLine>,
}

/// Trains a fresh head by mean absolute depth error on day-clear crops.
pub fn train_depth_stage(cfg: &ExperimentConfig, image: &ImageEncoder, sets: &[AdapterSet], policy: &AdapterPolicy) -> Result<DepthRun> {
    let encoder = merged_encoder(cfg, image, sets, policy)?;
    let dc = &cfg.depth;
    let p = cfg.encoder.patch;
    let head = DepthHead::new(
        &mut SeededRng::child(dc.seed, "head", 0),
        cfg.encoder.dim,
        p,
        dc.depth_min,
        dc.depth_max,
    )?;
    let mut opt = AdamW::new(dc.optim.clone(), head.params());
    let mut rng = SeededRng::child(dc.seed, "depth-data", 0);
    let mut log = Vec::with_capacity(dc.iterations);
    let (h, w) = (cfg.data.crop_height, cfg.data.crop_width);

    for iteration in 0..dc.iterations {
        let batch = training_batch(&mut rng, cfg, dc.batch, false)?;
        let count = batch.len();
        let gt = Tensor::from_vec(
            to_patch_layout(&batch.depth.data(), count, h, w, p),
            &[count * (h / p) * (w / p), p * p],
        )?;
        let states = encoder.token_states(&batch.crops, None)?;
        let loss = head.forward(&states)?.l1_mean(&gt)?;
        let mae = loss.item();
        if !mae.is_finite() {
            return Err(Error::NonFinite {
                iteration,
                components: format!("mae={mae}"),
            });
        }
        log.push(DepthLogLine { iteration, mae });
        opt.zero_grad();
        loss.backward()?;
        opt.step()?;
    }
    Ok(DepthRun { head, log })
}

/// Pooled metrics per configured domain over the same held-out scenes.
pub fn evaluate(
    cfg: &ExperimentConfig,
    image: &ImageEncoder,
    sets: &[AdapterSet],
    policy: &AdapterPolicy,
    head: &DepthHead,
) -> Result<Vec<(String, MetricReport)>> {
    let encoder = merged_encoder(cfg, image, sets, policy)?;
    let ev = &cfg.eval;
    let scenes: Vec<_> = (0..ev.heldout)
        .map(|i| gen_scene(&mut SeededRng::child(ev.seed, "heldout", i as u64), &cfg.data.scene))
        .collect();
    ev.domains
        .iter()
        .map(|domain| {
            let mut acc = MetricAccumulator::default();
            for scene in &scenes {
                let rendered = apply_domain(scene, domain, &cfg.data.scene)?;
                let tiles = tile_crops(&rendered, cfg.data.crop_height, cfg.data.crop_width, cfg.encoder.patch)?;
                let pred = head.predict_crops(&encoder, &tiles.crops)?;
                acc.add(&pred, &tiles.depth.data(), ev.cap)?;
            }
            Ok((domain.clone(), acc.finish(ev.cap)?))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::init_frozen;
    use crate::lora::sets_checksum;

    fn small() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.encoder.dim = 16;
        cfg.encoder.blocks = 1;
        cfg.lora.rank = 2;
        cfg.data.scene.height = 32;
        cfg.data.scene.width = 32;
        cfg.pretrain.iterations = 5;
        cfg.pretrain.batch = 2;
        cfg.depth.iterations = 5;
        cfg.depth.batch = 2;
        cfg.eval.heldout = 2;
        cfg
    }

    #[test]
    fn first_iteration_alignment_is_one_per_target() {
        let cfg = small();
        let (image, text) = init_frozen(&cfg.encoder).unwrap();
        let run = pretrain_stage(&cfg, &image, &text).unwrap();
        let first = &run.log[0];
        for (_, a) in &first.align {
            assert!((a - 1.0).abs() < 1e-9);
        }
        assert!((first.total - (2.0 + first.vtccl)).abs() < 1e-9);
    }

    #[test]
    fn pretrain_touches_only_adapters() {
        let cfg = small();
        let (image, text) = init_frozen(&cfg.encoder).unwrap();
        let before = (image.checksum(), text.checksum());
        let fresh = sets_checksum(&init_adapters(&cfg).unwrap());
        let run = pretrain_stage(&cfg, &image, &text).unwrap();
        assert_eq!(before, (image.checksum(), text.checksum()));
        assert_ne!(fresh, sets_checksum(&run.sets));
    }

    #[test]
    fn shared_sets_collapse_to_one() {
        let mut cfg = small();
        cfg.lora.shared = true;
        let (image, text) = init_frozen(&cfg.encoder).unwrap();
        let run = pretrain_stage(&cfg, &image, &text).unwrap();
        assert_eq!(run.sets.len(), 1);
        assert_eq!(run.log[0].align.len(), 2);
    }

    #[test]
    fn depth_stage_freezes_adapters_and_reports_domains() {
        let cfg = small();
        let (image, text) = init_frozen(&cfg.encoder).unwrap();
        let sets = pretrain_stage(&cfg, &image, &text).unwrap().sets;
        let frozen = (image.checksum(), sets_checksum(&sets));
        let run = train_depth_stage(&cfg, &image, &sets, &cfg.depth.adapter_policy).unwrap();
        assert_eq!(frozen, (image.checksum(), sets_checksum(&sets)));
        let report = evaluate(&cfg, &image, &sets, &cfg.depth.adapter_policy, &run.head).unwrap();
        let labels: Vec<&str> = report.iter().map(|(d, _)| d.as_str()).collect();
        assert_eq!(labels, ["day-clear", "night", "rain"]);
        assert!(report.iter().all(|(_, r)| (0.0..=1.0).contains(&r.d1)));
    }

    #[test]
    fn non_finite_loss_aborts_with_iteration() {
        let mut cfg = small();
        cfg.loss.tau = 1e-320;
        let (image, text) = init_frozen(&cfg.encoder).unwrap();
        match pretrain_stage(&cfg, &image, &text) {
            Err(Error::NonFinite { iteration: 0, components }) => assert!(components.contains("vtccl")),
            other => panic!("{other:?}"),
        }
    }
}
