//! Command implementations: each is a function of (config, inputs) that writes
//! its artifacts under an output directory.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_adapters, load_head, save_adapters, save_head, AdapterLayout};
use crate::config::ExperimentConfig;
use crate::encoders::{init_frozen, AttentionBlock, EncoderConfig};
use crate::error::{Error, Result};
use crate::lora::{count_trainable, lora_linear, AdapterPolicy, AdapterSet, AdapterTarget, LoraAdapter, ProjLayer};
use crate::metrics::{aggregate, format_table, DomainRow};
use crate::objectives::{alignment_loss, pretrain_loss, vtccl_loss, EmbeddingBundle};
use crate::synthdata::{gen_scene, sample_crops, SceneParams};
use crate::tensor::{grad_check, SeededRng, Tensor};
use crate::trainer::{evaluate, init_adapters, pretrain_stage, set_labels, to_patch_layout, train_depth_stage, DepthHead};

pub const ADAPTERS_FILE: &str = "adapters.ckpt";
pub const PRETRAIN_LOG: &str = "pretrain.log";
pub const HEAD_FILE: &str = "head.ckpt";
pub const DEPTH_LOG: &str = "train_depth.log";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TXT: &str = "report.txt";
pub const GRADCHECK_TXT: &str = "gradcheck.txt";
pub const ABLATION_JSON: &str = "ablation.json";
pub const ABLATION_TXT: &str = "ablation.txt";

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::file(path, e))
}

fn prepare(out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir).map_err(|e| Error::file(out_dir, e))
}

pub fn adapter_layout(cfg: &ExperimentConfig) -> AdapterLayout {
    AdapterLayout {
        dim: cfg.encoder.dim,
        rank: cfg.lora.rank,
        alpha: cfg.lora.alpha(),
        labels: set_labels(cfg),
        blocks: cfg.encoder.blocks,
        layers: cfg.lora.layers.clone(),
    }
}

fn join_lines<T: ToString>(lines: &[T]) -> String {
    lines.iter().map(|l| l.to_string() + "\n").collect()
}

#[derive(Clone, Debug)]
pub struct PretrainOutput {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub sets: Vec<AdapterSet>,
    pub encoder_checksum: String,
}

pub fn run_pretrain(cfg: &ExperimentConfig, out_dir: &Path) -> Result<PretrainOutput> {
    prepare(out_dir)?;
    let (image, text) = init_frozen(&cfg.encoder)?;
    let run = pretrain_stage(cfg, &image, &text)?;
    let checkpoint = out_dir.join(ADAPTERS_FILE);
    let log = out_dir.join(PRETRAIN_LOG);
    save_adapters(&checkpoint, &run.sets, &set_labels(cfg))?;
    write(&log, &join_lines(&run.log))?;
    Ok(PretrainOutput {
        checkpoint,
        log,
        sets: run.sets,
        encoder_checksum: image.checksum(),
    })
}

/// Adapter sets for `policy`; `none` needs no checkpoint.
fn adapters_for(cfg: &ExperimentConfig, adapters: Option<&Path>, policy: &AdapterPolicy) -> Result<Vec<AdapterSet>> {
    match (adapters, policy) {
        (Some(path), _) => load_adapters(path, &adapter_layout(cfg)),
        (None, AdapterPolicy::None) => Ok(Vec::new()),
        (None, p) => Err(Error::config("adapters", format!("adapter policy '{p}' needs an adapter checkpoint"))),
    }
}

#[derive(Clone, Debug)]
pub struct DepthOutput {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub head: DepthHead,
}

pub fn run_train_depth(cfg: &ExperimentConfig, out_dir: &Path, adapters: Option<&Path>, policy: Option<&AdapterPolicy>) -> Result<DepthOutput> {
    let policy = policy.unwrap_or(&cfg.depth.adapter_policy);
    let sets = adapters_for(cfg, adapters, policy)?;
    prepare(out_dir)?;
    let (image, _) = init_frozen(&cfg.encoder)?;
    let run = train_depth_stage(cfg, &image, &sets, policy)?;
    let checkpoint = out_dir.join(HEAD_FILE);
    let log = out_dir.join(DEPTH_LOG);
    save_head(&checkpoint, &run.head, policy)?;
    write(&log, &join_lines(&run.log))?;
    Ok(DepthOutput {
        checkpoint,
        log,
        head: run.head,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub encoder: u64,
    pub pretrain: u64,
    pub depth: u64,
    pub eval: u64,
}

impl Seeds {
    fn of(cfg: &ExperimentConfig) -> Self {
        Self {
            encoder: cfg.encoder.seed,
            pretrain: cfg.pretrain.seed,
            depth: cfg.depth.seed,
            eval: cfg.eval.seed,
        }
    }
}

/// Evaluation document written as `report.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    #[serde(rename = "config-hash")]
    pub config_hash: String,
    pub seeds: Seeds,
    #[serde(rename = "adapter-policy")]
    pub adapter_policy: String,
    pub metrics: Vec<DomainRow>,
    /// Trainable adapter parameters behind the evaluated encoder.
    #[serde(rename = "parameter-count")]
    pub parameter_count: usize,
}

impl Report {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse {
            offset: 0,
            message: e.to_string(),
        })
    }

    pub fn table(&self) -> String {
        format!(
            "config {}\npolicy {}  adapter parameters {}\n{}",
            self.config_hash,
            self.adapter_policy,
            self.parameter_count,
            format_table(&self.metrics)
        )
    }
}

pub fn run_evaluate(
    cfg: &ExperimentConfig,
    out_dir: &Path,
    head: &Path,
    adapters: Option<&Path>,
    policy: Option<&AdapterPolicy>,
) -> Result<Report> {
    let (head, trained_with) = load_head(head, cfg.encoder.dim, cfg.encoder.patch)?;
    let policy = policy.unwrap_or(&trained_with);
    let sets = adapters_for(cfg, adapters, policy)?;
    prepare(out_dir)?;
    let (image, _) = init_frozen(&cfg.encoder)?;
    let metrics = aggregate(&evaluate(cfg, &image, &sets, policy, &head)?)?;
    let report = Report {
        config_hash: cfg.hash(),
        seeds: Seeds::of(cfg),
        adapter_policy: policy.to_string(),
        metrics,
        parameter_count: if *policy == AdapterPolicy::None { 0 } else { count_trainable(&sets) },
    };
    write(&out_dir.join(REPORT_JSON), &report.to_json())?;
    write(&out_dir.join(REPORT_TXT), &report.table())?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckRow {
    pub name: String,
    pub max_rel_error: f64,
    /// `parameter[coordinate]` with the largest error.
    pub worst: String,
    pub coords: usize,
    pub passed: bool,
}

fn seeded_param(rng: &mut SeededRng, shape: &[usize]) -> Result<Tensor> {
    Tensor::param(rng.uniform_vec(shape.iter().product(), -1.0, 1.0), shape)
}

fn seeded_const(rng: &mut SeededRng, shape: &[usize]) -> Result<Tensor> {
    Tensor::from_vec(rng.uniform_vec(shape.iter().product(), -1.0, 1.0), shape)
}

type Check = (String, Vec<(String, Tensor)>, Box<dyn FnMut() -> Result<Tensor>>);

/// Shrunk copy of the configured model so every coordinate can be perturbed.
fn gradcheck_model(cfg: &ExperimentConfig) -> ExperimentConfig {
    let mut small = cfg.clone();
    small.encoder = EncoderConfig {
        dim: 16,
        blocks: cfg.encoder.blocks.min(2),
        seed: cfg.gradcheck.seed,
        ..cfg.encoder.clone()
    };
    small.lora.rank = 2;
    small.lora.alpha = None;
    small.pretrain.seed = cfg.gradcheck.seed;
    small
}

fn op_checks(rng: &mut SeededRng) -> Result<Vec<Check>> {
    let mut checks: Vec<Check> = Vec::new();

    let (a, b, r) = (seeded_param(rng, &[3, 4])?, seeded_param(rng, &[4, 2])?, seeded_const(rng, &[3, 2])?);
    let params = vec![("a".into(), a.clone()), ("b".into(), b.clone())];
    checks.push(("matmul".into(), params, Box::new(move || a.matmul(&b)?.mul(&r).map(|t| t.sum()))));

    let (a, b, r) = (seeded_param(rng, &[2, 3, 4])?, seeded_param(rng, &[2, 5, 4])?, seeded_const(rng, &[2, 3, 5])?);
    let params = vec![("a".into(), a.clone()), ("b".into(), b.clone())];
    checks.push(("bmm_t".into(), params, Box::new(move || a.bmm_t(&b)?.mul(&r).map(|t| t.sum()))));

    let (x, y) = (seeded_param(rng, &[6])?, seeded_param(rng, &[6])?);
    let params = vec![("x".into(), x.clone()), ("y".into(), y.clone())];
    checks.push((
        "elementwise".into(),
        params,
        Box::new(move || {
            let s = x.softplus().mul(&x.scalar_mul(0.5).exp())?.sum();
            let l = x.mul(&y)?.add_scalar(2.0).log()?.mean();
            let n = x.sub(&y)?.l2_norm();
            let q = x.relu().mul(&y)?.sum();
            let m = x.l1_mean(&y.scalar_mul(0.3))?;
            s.add(&l)?.add(&n)?.add(&q)?.add(&m)
        }),
    ));

    let (x, r) = (seeded_param(rng, &[3, 5])?, seeded_const(rng, &[3, 5])?);
    let params = vec![("x".into(), x.clone())];
    checks.push((
        "softmax_rows".into(),
        params,
        Box::new(move || x.scalar_mul(3.0).softmax_rows().mul(&r)?.sum().add(&x.logsumexp_rows().sum())),
    ));

    let (x, g, b, r) = (
        seeded_param(rng, &[4, 6])?,
        seeded_param(rng, &[6])?,
        seeded_param(rng, &[6])?,
        seeded_const(rng, &[4, 6])?,
    );
    let params = vec![("x".into(), x.clone()), ("gain".into(), g.clone()), ("bias".into(), b.clone())];
    checks.push(("layer_norm".into(), params, Box::new(move || x.layer_norm(&g, &b, 1e-5)?.mul(&r).map(|t| t.sum()))));

    let (u, v, r) = (seeded_param(rng, &[5])?, seeded_param(rng, &[5])?, seeded_const(rng, &[3, 5])?);
    let rows = seeded_param(rng, &[3, 5])?;
    let params = vec![("u".into(), u.clone()), ("v".into(), v.clone()), ("rows".into(), rows.clone())];
    checks.push((
        "cosine_sim".into(),
        params,
        Box::new(move || u.cosine_sim(&v)?.add(&rows.normalize_rows().mul(&r)?.sum())),
    ));

    let target = AdapterTarget {
        block: 0,
        layer: ProjLayer::Q,
    };
    let ad = LoraAdapter::new(rng, 5, 4, 2, 2.0, target)?;
    ad.b.data_mut().copy_from_slice(&rng.uniform_vec(10, -1.0, 1.0));
    let (w0, x, r) = (seeded_const(rng, &[5, 4])?, seeded_param(rng, &[3, 4])?, seeded_const(rng, &[3, 5])?);
    let params = vec![("A".into(), ad.a.clone()), ("B".into(), ad.b.clone()), ("x".into(), x.clone())];
    checks.push((
        "lora_linear".into(),
        params,
        Box::new(move || lora_linear(&w0, Some(&ad), &x)?.mul(&r).map(|t| t.sum())),
    ));
    Ok(checks)
}

fn model_checks(cfg: &ExperimentConfig, rng: &mut SeededRng) -> Result<Vec<Check>> {
    let small = gradcheck_model(cfg);
    let (image, text) = init_frozen(&small.encoder)?;
    let d = small.encoder.dim;
    let mut checks: Vec<Check> = Vec::new();

    // attention block with adapters on every projection
    let block = AttentionBlock::new(rng, d)?;
    let set = AdapterSet::new(rng, 0, 1, &ProjLayer::ALL, d, 2, 2.0)?;
    for ad in set.adapters() {
        let n = ad.b.numel();
        ad.b.data_mut().copy_from_slice(&rng.uniform_vec(n, -0.5, 0.5));
    }
    let (x, r) = (seeded_param(rng, &[8, d])?, seeded_const(rng, &[8, d])?);
    let mut params = vec![("x".to_string(), x.clone())];
    params.extend(named_params(&set, "attn"));
    checks.push((
        "attention_block".into(),
        params,
        Box::new(move || block.forward(&x, 2, 0, Some(&set))?.mul(&r).map(|t| t.sum())),
    ));

    // embedding losses through nonzero adapters, away from the zero-init saddle
    let sets = init_adapters(&small)?;
    for set in &sets {
        for ad in set.adapters() {
            let n = ad.b.numel();
            ad.b.data_mut().copy_from_slice(&rng.uniform_vec(n, -0.5, 0.5));
        }
    }
    let scene_params = SceneParams {
        height: 16,
        width: 16,
        channels: small.encoder.channels,
        ..small.data.scene.clone()
    };
    let scene = gen_scene(rng, &scene_params);
    let crops = sample_crops(rng, &scene, 2, 8, 8, small.encoder.patch)?;
    let prompts = small.prompt_set()?;
    let source_text = text.encode(&prompts.source)?;
    let target_text = prompts.targets.iter().map(|p| text.encode(p)).collect::<Result<Vec<_>>>()?;
    let targets = prompts.len();
    let params: Vec<(String, Tensor)> = sets
        .iter()
        .zip(set_labels(&small))
        .flat_map(|(s, l)| named_params(s, &l))
        .collect();

    let bundle = {
        let (image, sets, crops) = (image.clone(), sets.clone(), crops.crops.clone());
        let (source_text, target_text) = (source_text.clone(), target_text.clone());
        move || -> Result<EmbeddingBundle> {
            let source = image.encode(&crops, None)?;
            let adapted = sets.iter().map(|s| image.encode(&crops, Some(s))).collect::<Result<Vec<_>>>()?;
            let per_target = (0..targets).map(|i| adapted[i.min(adapted.len() - 1)].clone()).collect();
            EmbeddingBundle::new(source, per_target, source_text.clone(), target_text.clone())
        }
    };
    let make = bundle.clone();
    checks.push((
        "alignment_loss".into(),
        params.clone(),
        Box::new(move || {
            let b = make()?;
            (0..b.domains()).try_fold(Tensor::scalar(0.0), |acc, i| acc.add(&alignment_loss(&b, i)?))
        }),
    ));
    let (make, loss_cfg) = (bundle.clone(), small.loss.clone());
    checks.push((
        "vtccl_loss".into(),
        params.clone(),
        Box::new(move || vtccl_loss(&make()?, &loss_cfg)),
    ));
    let (make, loss_cfg) = (bundle, small.loss.clone());
    checks.push((
        "pretrain_loss".into(),
        params,
        Box::new(move || Ok(pretrain_loss(&make()?, &loss_cfg, &vec![1.0; targets])?.total)),
    ));

    let head = DepthHead::new(rng, d, small.encoder.patch, small.depth.depth_min, small.depth.depth_max)?;
    let states = image.token_states(&crops.crops, None)?;
    let p = small.encoder.patch;
    let n = crops.len();
    let gt = Tensor::from_vec(to_patch_layout(&crops.depth.data(), n, 8, 8, p), &[states.shape()[0], p * p])?;
    checks.push((
        "depth_head".into(),
        head.params(),
        Box::new(move || head.forward(&states)?.l1_mean(&gt)),
    ));
    Ok(checks)
}

fn named_params(set: &AdapterSet, label: &str) -> Vec<(String, Tensor)> {
    set.adapters()
        .flat_map(|ad| {
            let t = ad.target();
            [
                (format!("{label}.{}.{}.A", t.block, t.layer), ad.a.clone()),
                (format!("{label}.{}.{}.B", t.block, t.layer), ad.b.clone()),
            ]
        })
        .collect()
}

/// Central-difference check of every differentiable op and loss in the model.
pub fn run_gradcheck(cfg: &ExperimentConfig) -> Result<Vec<GradcheckRow>> {
    let gc = &cfg.gradcheck;
    let mut rng = SeededRng::child(gc.seed, "gradcheck", 0);
    let mut checks = op_checks(&mut rng)?;
    checks.extend(model_checks(cfg, &mut rng)?);
    checks
        .into_iter()
        .map(|(name, params, f)| {
            let tensors: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();
            let report = grad_check(f, &tensors, gc.step)?;
            let worst = report
                .worst
                .map_or_else(|| "-".to_string(), |(pi, i)| format!("{}[{i}]", params[pi].0));
            Ok(GradcheckRow {
                name,
                passed: report.passes(gc.tolerance),
                max_rel_error: report.max_rel_error,
                worst,
                coords: report.coords_checked,
            })
        })
        .collect()
}

pub fn format_gradcheck(rows: &[GradcheckRow], tolerance: f64) -> String {
    let mut out = format!("{:<18} {:>12} {:>8} {:<22} {}\n", "check", "max rel err", "coords", "worst", "result");
    for r in rows {
        out.push_str(&format!(
            "{:<18} {:>12.3e} {:>8} {:<22} {}\n",
            r.name,
            r.max_rel_error,
            r.coords,
            r.worst,
            if r.passed { "pass" } else { "FAIL" }
        ));
    }
    out.push_str(&format!("tolerance {tolerance:e}\n"));
    out
}

pub fn run_gradcheck_to(cfg: &ExperimentConfig, out_dir: Option<&Path>) -> Result<Vec<GradcheckRow>> {
    let rows = run_gradcheck(cfg)?;
    if let Some(dir) = out_dir {
        prepare(dir)?;
        write(&dir.join(GRADCHECK_TXT), &format_gradcheck(&rows, cfg.gradcheck.tolerance))?;
    }
    Ok(rows)
}

pub const VARIANTS: [&str; 3] = ["baseline", "pdda", "pdda+vtccl"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

impl Spread {
    fn of(values: &[f64]) -> Self {
        Self {
            mean: values.iter().sum::<f64>() / values.len() as f64,
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub domain: String,
    /// Fraction per seed, in seed order.
    pub d1: Vec<f64>,
    pub absrel: Vec<f64>,
    pub d1_spread: Spread,
    pub absrel_spread: Spread,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankRow {
    pub rank: usize,
    pub parameter_count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ablation {
    #[serde(rename = "config-hash")]
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
    pub ranks: Vec<RankRow>,
}

impl Ablation {
    pub fn row(&self, variant: &str, domain: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant && r.domain == domain)
    }

    pub fn table(&self) -> String {
        let mut out = format!("seeds {:?}\n", self.seeds);
        out.push_str(&format!(
            "{:<12} {:<12} {:>10} {:>17} {:>9}\n",
            "variant", "domain", "d1 mean %", "d1 range %", "absREL"
        ));
        for r in &self.rows {
            out.push_str(&format!(
                "{:<12} {:<12} {:>10.2} {:>8.2}–{:<8.2} {:>9.4}\n",
                r.variant,
                r.domain,
                100.0 * r.d1_spread.mean,
                100.0 * r.d1_spread.min,
                100.0 * r.d1_spread.max,
                r.absrel_spread.mean
            ));
        }
        out.push_str(&format!("{:<6} {:>12}\n", "rank", "parameters"));
        for r in &self.ranks {
            out.push_str(&format!("{:<6} {:>12}\n", r.rank, r.parameter_count));
        }
        out
    }
}

/// Per-seed domain metrics for the three component variants.
fn ablation_seed(cfg: &ExperimentConfig) -> Result<Vec<Vec<(String, crate::metrics::MetricReport)>>> {
    let (image, text) = init_frozen(&cfg.encoder)?;
    let policy = &cfg.depth.adapter_policy;

    let baseline_head = train_depth_stage(cfg, &image, &[], &AdapterPolicy::None)?.head;
    let baseline = evaluate(cfg, &image, &[], &AdapterPolicy::None, &baseline_head)?;

    let mut pdda_cfg = cfg.clone();
    pdda_cfg.loss.lambdas.iter_mut().for_each(|l| *l = 0.0);
    let mut variants = vec![baseline];
    for variant_cfg in [&pdda_cfg, cfg] {
        let sets = pretrain_stage(variant_cfg, &image, &text)?.sets;
        let head = train_depth_stage(cfg, &image, &sets, policy)?.head;
        variants.push(evaluate(cfg, &image, &sets, policy, &head)?);
    }
    Ok(variants)
}

pub fn ablation(cfg: &ExperimentConfig) -> Result<Ablation> {
    let seeds = cfg.ablate.seeds.clone();
    let per_seed = seeds
        .iter()
        .map(|&s| ablation_seed(&cfg.clone().with_seed(s)))
        .collect::<Result<Vec<_>>>()?;

    let mut rows = Vec::new();
    for (vi, variant) in VARIANTS.iter().enumerate() {
        for (di, domain) in cfg.eval.domains.iter().enumerate() {
            let d1: Vec<f64> = per_seed.iter().map(|v| v[vi][di].1.d1).collect();
            let absrel: Vec<f64> = per_seed.iter().map(|v| v[vi][di].1.absrel).collect();
            rows.push(AblationRow {
                variant: variant.to_string(),
                domain: domain.clone(),
                d1_spread: Spread::of(&d1),
                absrel_spread: Spread::of(&absrel),
                d1,
                absrel,
            });
        }
    }

    let ranks = cfg
        .ablate
        .ranks
        .iter()
        .map(|&rank| {
            let mut c = cfg.clone();
            c.lora.rank = rank;
            c.lora.alpha = None;
            Ok(RankRow {
                rank,
                parameter_count: count_trainable(&init_adapters(&c)?),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(Ablation {
        config_hash: cfg.hash(),
        seeds,
        rows,
        ranks,
    })
}

pub fn run_ablate(cfg: &ExperimentConfig, out_dir: &Path) -> Result<Ablation> {
    let result = ablation(cfg)?;
    prepare(out_dir)?;
    write(
        &out_dir.join(ABLATION_JSON),
        &(serde_json::to_string_pretty(&result).expect("ablation serializes") + "\n"),
    )?;
    write(&out_dir.join(ABLATION_TXT), &result.table())?;
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.encoder.dim = 8;
        cfg.encoder.blocks = 1;
        cfg.lora.rank = 2;
        cfg.data.scene.height = 16;
        cfg.data.scene.width = 16;
        cfg.data.crop_height = 8;
        cfg.data.crop_width = 8;
        cfg.pretrain.iterations = 3;
        cfg.pretrain.batch = 1;
        cfg.depth.iterations = 3;
        cfg.depth.batch = 1;
        cfg.eval.heldout = 1;
        cfg.ablate.seeds = vec![0, 1];
        cfg.ablate.ranks = vec![1, 2, 4];
        cfg
    }

    #[test]
    fn stages_chain_through_files() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny();
        let pre = run_pretrain(&cfg, dir.path()).unwrap();
        assert_eq!(fs::read_to_string(&pre.log).unwrap().lines().count(), 3);
        let depth = run_train_depth(&cfg, dir.path(), Some(&pre.checkpoint), None).unwrap();
        let report = run_evaluate(&cfg, dir.path(), &depth.checkpoint, Some(&pre.checkpoint), None).unwrap();
        assert_eq!(report.adapter_policy, "merge-mean");
        assert_eq!(report.parameter_count, count_trainable(&pre.sets));
        let text = fs::read_to_string(dir.path().join(REPORT_JSON)).unwrap();
        assert_eq!(Report::from_json(&text).unwrap(), report);
        assert!(text.contains("\"config-hash\"") && text.contains("\"parameter-count\""));
    }

    #[test]
    fn report_survives_round_trip_to_six_decimals() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny();
        let depth = run_train_depth(&cfg, dir.path(), None, Some(&AdapterPolicy::None)).unwrap();
        let report = run_evaluate(&cfg, dir.path(), &depth.checkpoint, None, None).unwrap();
        let back = Report::from_json(&report.to_json()).unwrap();
        for (a, b) in report.metrics.iter().zip(&back.metrics) {
            assert!((a.absrel - b.absrel).abs() < 1e-6 && (a.d1_percent - b.d1_percent).abs() < 1e-6);
        }
    }

    #[test]
    fn merge_policy_without_adapters_is_config_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(run_train_depth(&tiny(), dir.path(), None, None), Err(Error::Config { .. })));
    }

    #[test]
    fn missing_adapter_file_is_file_error() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("nope.ckpt");
        assert!(matches!(
            run_train_depth(&tiny(), dir.path(), Some(&missing), None),
            Err(Error::File { .. })
        ));
    }

    #[test]
    fn gradcheck_suite_passes_and_names_worst() {
        let rows = run_gradcheck(&ExperimentConfig::default()).unwrap();
        let names: Vec<&str> = rows.iter().map(|r| r.name.as_str()).collect();
        for expected in ["attention_block", "alignment_loss", "vtccl_loss", "pretrain_loss", "depth_head", "lora_linear"] {
            assert!(names.contains(&expected), "{expected} missing");
        }
        for r in &rows {
            assert!(r.passed, "{}: {} at {}", r.name, r.max_rel_error, r.worst);
            assert_ne!(r.worst, "-");
        }
    }

    #[test]
    fn ablation_shape() {
        let cfg = tiny();
        let ab = ablation(&cfg).unwrap();
        assert_eq!(ab.rows.len(), 3 * cfg.eval.domains.len());
        assert!(ab.rows.iter().all(|r| r.d1.len() == 2 && r.d1_spread.min <= r.d1_spread.mean));
        let counts: Vec<usize> = ab.ranks.iter().map(|r| r.parameter_count).collect();
        assert_eq!(counts[1], 2 * counts[0]);
        assert_eq!(counts[2], 2 * counts[1]);
        // PDDA-only never leaves the zero-init saddle, so it reproduces the baseline
        for domain in &cfg.eval.domains {
            assert_eq!(ab.row("baseline", domain).unwrap().d1, ab.row("pdda", domain).unwrap().d1);
        }
    }
}
