//! Low-rank adapters `W = W₀ + (α/r)·B·A` on square attention projections.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{de, Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::tensor::{checksum, gemm, SeededRng, Tensor};

/// Attention projection an adapter can attach to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ProjLayer {
    Q,
    K,
    V,
    Proj,
}

impl ProjLayer {
    pub const ALL: [ProjLayer; 4] = [ProjLayer::Q, ProjLayer::K, ProjLayer::V, ProjLayer::Proj];

    pub fn name(self) -> &'static str {
        match self {
            ProjLayer::Q => "q",
            ProjLayer::K => "k",
            ProjLayer::V => "v",
            ProjLayer::Proj => "proj",
        }
    }
}

impl fmt::Display for ProjLayer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl Serialize for ProjLayer {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for ProjLayer {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(de::Error::custom)
    }
}

impl FromStr for ProjLayer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "q" => Ok(ProjLayer::Q),
            "k" => Ok(ProjLayer::K),
            "v" => Ok(ProjLayer::V),
            "proj" => Ok(ProjLayer::Proj),
            other => Err(Error::config("lora.layers", format!("unknown layer '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct AdapterTarget {
    pub block: usize,
    pub layer: ProjLayer,
}

/// One trainable pair: `A` is `r×k`, `B` is `d×r`.
#[derive(Clone, Debug)]
pub struct LoraAdapter {
    pub a: Tensor,
    pub b: Tensor,
    alpha: f64,
    target: AdapterTarget,
}

impl LoraAdapter {
    /// `B = 0`, `A ~ U(−1/√r, 1/√r)`, so the adapted layer starts equal to `W₀`.
    pub fn new(rng: &mut SeededRng, out_dim: usize, in_dim: usize, rank: usize, alpha: f64, target: AdapterTarget) -> Result<Self> {
        if rank == 0 || rank > out_dim.min(in_dim) {
            return Err(Error::config(
                "lora.rank",
                format!("rank {rank} must lie in 1..={}", out_dim.min(in_dim)),
            ));
        }
        let bound = 1.0 / (rank as f64).sqrt();
        let a = Tensor::param(rng.uniform_vec(rank * in_dim, -bound, bound), &[rank, in_dim])?;
        let b = Tensor::param(vec![0.0; out_dim * rank], &[out_dim, rank])?;
        Self::from_parts(a, b, alpha, target)
    }

    pub fn from_parts(a: Tensor, b: Tensor, alpha: f64, target: AdapterTarget) -> Result<Self> {
        let (&[r, _], &[_, r2]) = (a.shape(), b.shape()) else {
            return Err(Error::config("lora", format!("A {:?} / B {:?} must be matrices", a.shape(), b.shape())));
        };
        if r != r2 {
            return Err(Error::config("lora.rank", format!("A has rank {r} but B has rank {r2}")));
        }
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::config("lora.alpha", format!("alpha must be positive, got {alpha}")));
        }
        Ok(Self { a, b, alpha, target })
    }

    pub fn rank(&self) -> usize {
        self.a.shape()[0]
    }

    pub fn in_dim(&self) -> usize {
        self.a.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.b.shape()[0]
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank() as f64
    }

    pub fn target(&self) -> AdapterTarget {
        self.target
    }

    pub fn trainable_count(&self) -> usize {
        self.rank() * (self.out_dim() + self.in_dim())
    }

    /// Dense `(α/r)·B·A`, row-major `d×k`.
    pub fn delta(&self) -> Vec<f64> {
        let s = self.scale();
        gemm(&self.b.data(), &self.a.data(), self.out_dim(), self.rank(), self.in_dim())
            .into_iter()
            .map(|v| s * v)
            .collect()
    }
}

/// `y = x·W₀ᵀ + (α/r)·(x·Aᵀ)·Bᵀ`; with no adapter this is the frozen layer.
pub fn lora_linear(w0: &Tensor, adapter: Option<&LoraAdapter>, x: &Tensor) -> Result<Tensor> {
    let base = x.matmul_t(w0)?;
    let Some(ad) = adapter else {
        return Ok(base);
    };
    if w0.shape() != [ad.out_dim(), ad.in_dim()] {
        return Err(Error::config(
            "lora",
            format!(
                "adapter at block {} layer {} is {}×{} (rank {}) but the layer weight is {:?}",
                ad.target.block,
                ad.target.layer,
                ad.out_dim(),
                ad.in_dim(),
                ad.rank(),
                w0.shape()
            ),
        ));
    }
    let low = x.matmul_t(&ad.a)?.matmul_t(&ad.b)?.scalar_mul(ad.scale());
    base.add(&low)
}

/// Dense `W₀ + (α/r)·B·A`.
pub fn merge(w0: &Tensor, adapter: &LoraAdapter) -> Result<Tensor> {
    if w0.shape() != [adapter.out_dim(), adapter.in_dim()] {
        return Err(Error::Dimension {
            op: "merge",
            lhs: w0.shape().to_vec(),
            rhs: vec![adapter.out_dim(), adapter.in_dim()],
        });
    }
    let merged = w0.data().iter().zip(adapter.delta()).map(|(w, d)| w + d).collect();
    Tensor::from_vec(merged, w0.shape())
}

/// Adapters for one target domain, one per configured `(block, layer)`.
#[derive(Clone, Debug)]
pub struct AdapterSet {
    pub domain: usize,
    adapters: BTreeMap<AdapterTarget, LoraAdapter>,
}

impl AdapterSet {
    pub fn new(
        rng: &mut SeededRng,
        domain: usize,
        blocks: usize,
        layers: &[ProjLayer],
        dim: usize,
        rank: usize,
        alpha: f64,
    ) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::config("lora.layers", "at least one layer is required"));
        }
        let mut adapters = BTreeMap::new();
        for block in 0..blocks {
            for &layer in layers {
                let target = AdapterTarget { block, layer };
                adapters.insert(target, LoraAdapter::new(rng, dim, dim, rank, alpha, target)?);
            }
        }
        Ok(Self { domain, adapters })
    }

    pub fn from_adapters(domain: usize, list: Vec<LoraAdapter>) -> Result<Self> {
        let mut adapters = BTreeMap::new();
        let rank = list.first().map(LoraAdapter::rank);
        for ad in list {
            if Some(ad.rank()) != rank {
                return Err(Error::config("lora.rank", "all adapters in a set must share one rank"));
            }
            if adapters.insert(ad.target(), ad).is_some() {
                return Err(Error::config("lora", "duplicate adapter target"));
            }
        }
        Ok(Self { domain, adapters })
    }

    pub fn get(&self, target: AdapterTarget) -> Option<&LoraAdapter> {
        self.adapters.get(&target)
    }

    pub fn adapters(&self) -> impl Iterator<Item = &LoraAdapter> {
        self.adapters.values()
    }

    pub fn len(&self) -> usize {
        self.adapters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adapters.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.adapters().next().map_or(0, LoraAdapter::rank)
    }

    pub fn alpha(&self) -> f64 {
        self.adapters().next().map_or(0.0, LoraAdapter::alpha)
    }

    /// All trainable tensors, `A` before `B`, in target order.
    pub fn params(&self) -> Vec<Tensor> {
        self.adapters().flat_map(|ad| [ad.a.clone(), ad.b.clone()]).collect()
    }

    pub fn checksum(&self) -> String {
        let params = self.params();
        checksum(params.iter())
    }
}

pub fn count_trainable(sets: &[AdapterSet]) -> usize {
    sets.iter().flat_map(AdapterSet::adapters).map(LoraAdapter::trainable_count).sum()
}

pub fn sets_checksum(sets: &[AdapterSet]) -> String {
    let params: Vec<Tensor> = sets.iter().flat_map(AdapterSet::params).collect();
    checksum(params.iter())
}

/// How trained adapters enter the frozen encoder for depth training and inference.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum AdapterPolicy {
    /// Average every set's delta into the base weights.
    MergeMean,
    /// Merge only the set trained for this target (label or index).
    Single(String),
    /// Ignore adapters entirely.
    None,
}

impl fmt::Display for AdapterPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AdapterPolicy::MergeMean => f.write_str("merge-mean"),
            AdapterPolicy::Single(d) => write!(f, "single:{d}"),
            AdapterPolicy::None => f.write_str("none"),
        }
    }
}

impl Serialize for AdapterPolicy {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for AdapterPolicy {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(de::Error::custom)
    }
}

impl FromStr for AdapterPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "merge-mean" => Ok(AdapterPolicy::MergeMean),
            "none" => Ok(AdapterPolicy::None),
            _ => match s.strip_prefix("single:") {
                Some(d) if !d.is_empty() => Ok(AdapterPolicy::Single(d.to_string())),
                _ => Err(Error::config(
                    "depth.adapter_policy",
                    format!("expected merge-mean, none or single:<domain>, got '{s}'"),
                )),
            },
        }
    }
}

/// Dense per-target deltas selected by `policy`. `labels[i]` names set `i`.
pub fn policy_deltas(sets: &[AdapterSet], labels: &[String], policy: &AdapterPolicy) -> Result<BTreeMap<AdapterTarget, Vec<f64>>> {
    let chosen: Vec<&AdapterSet> = match policy {
        AdapterPolicy::None => return Ok(BTreeMap::new()),
        AdapterPolicy::MergeMean => sets.iter().collect(),
        AdapterPolicy::Single(name) => {
            let idx = labels
                .iter()
                .position(|l| l == name)
                .or_else(|| name.parse::<usize>().ok().filter(|&i| i < sets.len()))
                .ok_or_else(|| Error::config("depth.adapter_policy", format!("no adapter set for domain '{name}'")))?;
            let set = sets
                .get(idx)
                .ok_or_else(|| Error::config("depth.adapter_policy", format!("no adapter set for domain '{name}'")))?;
            vec![set]
        }
    };
    if chosen.is_empty() {
        return Err(Error::config("depth.adapter_policy", "policy needs at least one adapter set"));
    }
    let mut out: BTreeMap<AdapterTarget, Vec<f64>> = BTreeMap::new();
    for set in &chosen {
        for ad in set.adapters() {
            let delta = ad.delta();
            match out.get_mut(&ad.target()) {
                Some(acc) => acc.iter_mut().zip(&delta).for_each(|(a, d)| *a += d),
                None => {
                    out.insert(ad.target(), delta);
                }
            }
        }
    }
    let n = chosen.len() as f64;
    for acc in out.values_mut() {
        acc.iter_mut().for_each(|v| *v /= n);
    }
    Ok(out)
}
