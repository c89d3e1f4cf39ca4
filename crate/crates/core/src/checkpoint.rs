//! Text checkpoints for adapter sets and the depth head.
//!
//! Values are written as `{:.16e}` (17 significant digits), which reproduces
//! every finite f64 exactly on reload.

use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::lora::{AdapterPolicy, AdapterSet, AdapterTarget, LoraAdapter, ProjLayer};
use crate::tensor::Tensor;
use crate::trainer::DepthHead;

const ADAPTER_MAGIC: &str = "MMDLORA";
const HEAD_MAGIC: &str = "MMDHEAD";
const VERSION: &str = "v1";

fn push_values(out: &mut String, t: &Tensor) {
    for v in t.data().iter() {
        out.push_str(&format!("{v:.16e}\n"));
    }
}

/// Line reader that reports byte offsets.
struct Reader<'a> {
    text: &'a str,
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(text: &'a str) -> Self {
        Self { text, pos: 0 }
    }

    fn at_end(&self) -> bool {
        self.text[self.pos..].trim().is_empty()
    }

    fn parse_err(&self, offset: usize, message: impl Into<String>) -> Error {
        Error::Parse {
            offset,
            message: message.into(),
        }
    }

    /// Next non-empty line and its starting offset.
    fn line(&mut self) -> Result<(usize, &'a str)> {
        loop {
            if self.pos >= self.text.len() {
                return Err(self.parse_err(self.pos, "unexpected end of file"));
            }
            let start = self.pos;
            let rest = &self.text[start..];
            let len = rest.find('\n').map_or(rest.len(), |i| i + 1);
            self.pos += len;
            let line = rest[..len].trim();
            if !line.is_empty() {
                return Ok((start, line));
            }
        }
    }

    fn values(&mut self, count: usize) -> Result<Vec<f64>> {
        (0..count)
            .map(|_| {
                let (at, line) = self.line()?;
                line.parse::<f64>()
                    .map_err(|_| self.parse_err(at, format!("'{line}' is not a number")))
            })
            .collect()
    }
}

/// `key=value` fields of a header line, in order.
fn header_fields<'a>(reader: &Reader, at: usize, line: &'a str, magic: &str, keys: &[&str]) -> Result<Vec<&'a str>> {
    let mut parts = line.split_whitespace();
    if parts.next() != Some(magic) {
        return Err(reader.parse_err(at, format!("expected {magic} header")));
    }
    match parts.next() {
        Some(VERSION) => {}
        Some(v) => return Err(Error::checkpoint("version", format!("unsupported version {v}"))),
        None => return Err(reader.parse_err(at, "missing version")),
    }
    let mut out = Vec::with_capacity(keys.len());
    for key in keys {
        let part = parts.next().ok_or_else(|| reader.parse_err(at, format!("missing header field {key}")))?;
        let value = part
            .strip_prefix(key)
            .and_then(|r| r.strip_prefix('='))
            .ok_or_else(|| reader.parse_err(at, format!("expected {key}=<value>, got '{part}'")))?;
        out.push(value);
    }
    Ok(out)
}

fn parse_field<T: FromStr>(reader: &Reader, at: usize, key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| reader.parse_err(at, format!("bad value '{v}' for {key}")))
}

fn expect_eq<T: PartialEq + std::fmt::Display>(field: &str, found: T, expected: T) -> Result<()> {
    if found != expected {
        return Err(Error::checkpoint(field, format!("file has {field}={found}, configuration expects {expected}")));
    }
    Ok(())
}

/// Adapter layout a checkpoint must match.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterLayout {
    pub dim: usize,
    pub rank: usize,
    pub alpha: f64,
    pub labels: Vec<String>,
    pub blocks: usize,
    pub layers: Vec<ProjLayer>,
}

pub fn render_adapters(sets: &[AdapterSet], labels: &[String]) -> Result<String> {
    if sets.len() != labels.len() {
        return Err(Error::Contract(format!("{} adapter sets but {} labels", sets.len(), labels.len())));
    }
    let first = sets
        .iter()
        .flat_map(AdapterSet::adapters)
        .next()
        .ok_or_else(|| Error::Contract("no adapters to save".into()))?;
    let mut out = format!(
        "{ADAPTER_MAGIC} {VERSION} d={} k={} r={} alpha={} domains={}\n",
        first.out_dim(),
        first.in_dim(),
        first.rank(),
        first.alpha(),
        sets.len()
    );
    for (set, label) in sets.iter().zip(labels) {
        for ad in set.adapters() {
            let t = ad.target();
            for (name, tensor) in [("A", &ad.a), ("B", &ad.b)] {
                let s = tensor.shape();
                out.push_str(&format!("{label} {} {} {name} {} {}\n", t.block, t.layer, s[0], s[1]));
                push_values(&mut out, tensor);
            }
        }
    }
    Ok(out)
}

pub fn parse_adapters(text: &str, layout: &AdapterLayout) -> Result<Vec<AdapterSet>> {
    let mut r = Reader::new(text);
    let (at, line) = r.line()?;
    let h = header_fields(&r, at, line, ADAPTER_MAGIC, &["d", "k", "r", "alpha", "domains"])?;
    let d: usize = parse_field(&r, at, "d", h[0])?;
    let k: usize = parse_field(&r, at, "k", h[1])?;
    let rank: usize = parse_field(&r, at, "r", h[2])?;
    let alpha: f64 = parse_field(&r, at, "alpha", h[3])?;
    let domains: usize = parse_field(&r, at, "domains", h[4])?;
    expect_eq("d", d, layout.dim)?;
    expect_eq("k", k, layout.dim)?;
    expect_eq("r", rank, layout.rank)?;
    expect_eq("alpha", alpha, layout.alpha)?;
    expect_eq("domains", domains, layout.labels.len())?;

    let mut sets = Vec::with_capacity(domains);
    for (index, label) in layout.labels.iter().enumerate() {
        let mut adapters = Vec::new();
        for block in 0..layout.blocks {
            for &layer in &layout.layers {
                let mut pair = Vec::with_capacity(2);
                for (name, rows, cols) in [("A", rank, k), ("B", d, rank)] {
                    let (at, line) = r.line()?;
                    let f: Vec<&str> = line.split_whitespace().collect();
                    if f.len() != 6 {
                        return Err(r.parse_err(at, "expected `domain block layer A|B rows cols`"));
                    }
                    expect_eq("domain", f[0], label.as_str())?;
                    expect_eq("block", parse_field::<usize>(&r, at, "block", f[1])?, block)?;
                    expect_eq("layer", f[2], layer.name())?;
                    expect_eq("matrix", f[3], name)?;
                    expect_eq("rows", parse_field::<usize>(&r, at, "rows", f[4])?, rows)?;
                    expect_eq("cols", parse_field::<usize>(&r, at, "cols", f[5])?, cols)?;
                    pair.push(Tensor::param(r.values(rows * cols)?, &[rows, cols])?);
                }
                let b = pair.pop().expect("two matrices");
                let a = pair.pop().expect("two matrices");
                adapters.push(LoraAdapter::from_parts(a, b, alpha, AdapterTarget { block, layer })?);
            }
        }
        sets.push(AdapterSet::from_adapters(index, adapters)?);
    }
    if !r.at_end() {
        return Err(r.parse_err(r.pos, "trailing data after last record"));
    }
    Ok(sets)
}

pub fn save_adapters(path: &Path, sets: &[AdapterSet], labels: &[String]) -> Result<()> {
    fs::write(path, render_adapters(sets, labels)?).map_err(|e| Error::file(path, e))
}

pub fn load_adapters(path: &Path, layout: &AdapterLayout) -> Result<Vec<AdapterSet>> {
    let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
    parse_adapters(&text, layout)
}

/// Head plus the adapter policy it was trained under.
pub fn render_head(head: &DepthHead, policy: &AdapterPolicy) -> String {
    let (dmin, dmax) = head.depth_range();
    let mut out = format!(
        "{HEAD_MAGIC} {VERSION} d={} p={} dmin={dmin} dmax={dmax} policy={policy}\n",
        head.dim(),
        head.patch()
    );
    for (name, t) in [("W", &head.weight), ("b", &head.bias)] {
        let s = t.shape();
        let cols = s.get(1).copied().unwrap_or(1);
        out.push_str(&format!("{name} {} {cols}\n", s[0]));
        push_values(&mut out, t);
    }
    out
}

pub fn parse_head(text: &str, dim: usize, patch: usize) -> Result<(DepthHead, AdapterPolicy)> {
    let mut r = Reader::new(text);
    let (at, line) = r.line()?;
    let h = header_fields(&r, at, line, HEAD_MAGIC, &["d", "p", "dmin", "dmax", "policy"])?;
    let d: usize = parse_field(&r, at, "d", h[0])?;
    let p: usize = parse_field(&r, at, "p", h[1])?;
    let dmin: f64 = parse_field(&r, at, "dmin", h[2])?;
    let dmax: f64 = parse_field(&r, at, "dmax", h[3])?;
    let policy: AdapterPolicy = h[4].parse().map_err(|_| r.parse_err(at, format!("bad policy '{}'", h[4])))?;
    expect_eq("d", d, dim)?;
    expect_eq("p", p, patch)?;

    let mut tensors = Vec::with_capacity(2);
    for (name, rows, cols) in [("W", p * p, d), ("b", p * p, 1)] {
        let (at, line) = r.line()?;
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 3 {
            return Err(r.parse_err(at, "expected `name rows cols`"));
        }
        expect_eq("matrix", f[0], name)?;
        expect_eq("rows", parse_field::<usize>(&r, at, "rows", f[1])?, rows)?;
        expect_eq("cols", parse_field::<usize>(&r, at, "cols", f[2])?, cols)?;
        let shape: &[usize] = if name == "b" { &[rows] } else { &[rows, cols] };
        tensors.push(Tensor::param(r.values(rows * cols)?, shape)?);
    }
    if !r.at_end() {
        return Err(r.parse_err(r.pos, "trailing data after last record"));
    }
    let bias = tensors.pop().expect("two tensors");
    let weight = tensors.pop().expect("two tensors");
    Ok((DepthHead::from_parts(weight, bias, p, dmin, dmax)?, policy))
}

pub fn save_head(path: &Path, head: &DepthHead, policy: &AdapterPolicy) -> Result<()> {
    fs::write(path, render_head(head, policy)).map_err(|e| Error::file(path, e))
}

pub fn load_head(path: &Path, dim: usize, patch: usize) -> Result<(DepthHead, AdapterPolicy)> {
    let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
    parse_head(&text, dim, patch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lora::sets_checksum;
    use crate::tensor::SeededRng;

    fn layout(rank: usize) -> AdapterLayout {
        AdapterLayout {
            dim: 6,
            rank,
            alpha: rank as f64,
            labels: vec!["night".into(), "rain".into()],
            blocks: 2,
            layers: vec![ProjLayer::Q, ProjLayer::Proj],
        }
    }

    fn trained_sets(l: &AdapterLayout) -> Vec<AdapterSet> {
        let mut rng = SeededRng::new(11);
        (0..l.labels.len())
            .map(|i| {
                let set = AdapterSet::new(&mut rng, i, l.blocks, &l.layers, l.dim, l.rank, l.alpha).unwrap();
                for ad in set.adapters() {
                    let n = ad.b.numel();
                    ad.b.data_mut().copy_from_slice(&rng.uniform_vec(n, -1.0, 1.0));
                }
                set
            })
            .collect()
    }

    #[test]
    fn adapters_round_trip_exactly() {
        let l = layout(2);
        let sets = trained_sets(&l);
        let text = render_adapters(&sets, &l.labels).unwrap();
        assert!(text.starts_with("MMDLORA v1 d=6 k=6 r=2 alpha=2 domains=2\n"));
        let back = parse_adapters(&text, &l).unwrap();
        assert_eq!(sets_checksum(&back), sets_checksum(&sets));
    }

    #[test]
    fn rank_mismatch_names_field() {
        let sets = trained_sets(&layout(4));
        let text = render_adapters(&sets, &layout(4).labels).unwrap();
        match parse_adapters(&text, &layout(2)) {
            Err(Error::Checkpoint { field, .. }) => assert_eq!(field, "r"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn truncation_reports_offset() {
        let l = layout(2);
        let text = render_adapters(&trained_sets(&l), &l.labels).unwrap();
        let cut = &text[..text.len() / 2];
        match parse_adapters(cut, &l) {
            Err(Error::Parse { offset, .. }) => assert!(offset > 0 && offset <= cut.len()),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn corrupt_value_reports_its_line() {
        let l = layout(2);
        let text = render_adapters(&trained_sets(&l), &l.labels).unwrap();
        let at = text.find('\n').unwrap() + 1;
        let at = at + text[at..].find('\n').unwrap() + 1;
        let mut bad = text.clone();
        bad.replace_range(at..at + 1, "x");
        assert!(matches!(parse_adapters(&bad, &l), Err(Error::Parse { offset, .. }) if offset == at));
    }

    #[test]
    fn head_round_trip_keeps_policy() {
        let mut rng = SeededRng::new(2);
        let head = DepthHead::new(&mut rng, 8, 2, 1.0, 80.0).unwrap();
        head.bias.data_mut()[1] = std::f64::consts::PI;
        let policy = AdapterPolicy::Single("rain".into());
        let (back, p) = parse_head(&render_head(&head, &policy), 8, 2).unwrap();
        assert_eq!(back.checksum(), head.checksum());
        assert_eq!(p, policy);
        assert!(matches!(parse_head(&render_head(&head, &policy), 8, 4), Err(Error::Checkpoint { .. })));
    }

    #[test]
    fn extreme_values_survive() {
        let l = AdapterLayout { dim: 2, rank: 1, alpha: 0.1 + 0.2, labels: vec!["x".into()], blocks: 1, layers: vec![ProjLayer::V] };
        let a = Tensor::param(vec![f64::MIN_POSITIVE, -1e300], &[1, 2]).unwrap();
        let b = Tensor::param(vec![5e-324, 1.0 / 3.0], &[2, 1]).unwrap();
        let t = AdapterTarget { block: 0, layer: ProjLayer::V };
        let set = AdapterSet::from_adapters(0, vec![LoraAdapter::from_parts(a, b, l.alpha, t).unwrap()]).unwrap();
        let back = parse_adapters(&render_adapters(std::slice::from_ref(&set), &l.labels).unwrap(), &l).unwrap();
        assert_eq!(back[0].checksum(), set.checksum());
    }
}
