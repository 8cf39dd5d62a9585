//! Synthetic workflow benchmark.
//!
//! Every domain walks the same seven steps and shares one set of step
//! embeddings, so what a step "is" transfers between domains. Each domain
//! sees those embeddings through its own mixing matrix
//! `M_d = (1−δ)·P + δ·R_d·P` (P a shared E→N projection, R_d a random
//! rotation) plus an offset scaled by δ, so δ dials the domain shift from
//! none (0) to a fully domain-specific appearance (1).
//!
//! Random streams: shared parameters come from stream `(0, 0)` of the master
//! seed, domain `d`'s rotation and offset from stream `(1, d)`, and video `v`
//! of domain `d` from stream `(2 + d, v)`.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Geometric, Poisson, StandardNormal};
use rayon::prelude::*;

use super::manifest::{write_manifest, ManifestEntry, Split};
use super::sfm::write_sequence;
use super::{split_sizes, FeatureSequence};
use crate::error::{Error, Result};
use crate::keyvalue::{format_list, KeyValues};
use crate::models::NUM_STEPS;
use crate::numerics::Tensor;
use crate::rng::{stream, stream_id, SeedRng};

pub const SPEC_FILE: &str = "spec.txt";
pub const MANIFEST_FILE: &str = "manifest.tsv";
/// Shortest and longest video the label sampler accepts, in seconds.
pub const LENGTH_LIMITS: (usize, usize) = (60, 3600);
pub const MIN_STEP_SECONDS: usize = 5;
pub const IRRELEVANT_SPAN_SECONDS: (usize, usize) = (5, 20);

#[derive(Clone, Debug, PartialEq)]
pub struct DomainSpec {
    pub name: String,
    pub videos: usize,
    /// δ: 0 shares the source appearance exactly, 1 is fully domain specific.
    pub shift: f64,
    pub noise_std: f64,
    /// Mean duration of each step in seconds, before rescaling to the video length.
    pub duration_means: [f64; NUM_STEPS],
    pub skip_prob: f64,
    pub revisit_prob: f64,
    /// Expected irrelevant spans per minute of video.
    pub irrelevant_rate: f64,
}

impl DomainSpec {
    pub fn new(name: impl Into<String>, videos: usize) -> Self {
        Self {
            name: name.into(),
            videos,
            shift: 0.4,
            noise_std: 0.3,
            duration_means: [40.0, 70.0, 55.0, 90.0, 60.0, 45.0, 30.0],
            skip_prob: 0.1,
            revisit_prob: 0.1,
            irrelevant_rate: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("domain {}: {msg}", self.name)));
        if self.name.is_empty()
            || !self
                .name
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
        {
            return bad("name must be non-empty and use only [A-Za-z0-9_-]".into());
        }
        if self.videos < 4 {
            return bad(format!(
                "needs at least 4 videos for a train/val/test split, got {}",
                self.videos
            ));
        }
        for (what, p) in [
            ("shift", self.shift),
            ("skip_prob", self.skip_prob),
            ("revisit_prob", self.revisit_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{what} must be in [0, 1], got {p}"));
            }
        }
        if !(self.noise_std > 0.0 && self.noise_std.is_finite()) {
            return bad(format!("noise_std must be positive, got {}", self.noise_std));
        }
        if !(self.irrelevant_rate >= 0.0 && self.irrelevant_rate.is_finite()) {
            return bad(format!(
                "irrelevant_rate must be non-negative, got {}",
                self.irrelevant_rate
            ));
        }
        if self.duration_means.iter().any(|&m| !(m >= 1.0 && m.is_finite())) {
            return bad(format!("duration means must be ≥ 1 s, got {:?}", self.duration_means));
        }
        Ok(())
    }

    fn take_overrides(&mut self, kv: &mut KeyValues, prefix: &str) -> Result<()> {
        self.shift = kv.take_or(&format!("{prefix}shift"), self.shift)?;
        self.noise_std = kv.take_or(&format!("{prefix}noise_std"), self.noise_std)?;
        self.skip_prob = kv.take_or(&format!("{prefix}skip_prob"), self.skip_prob)?;
        self.revisit_prob = kv.take_or(&format!("{prefix}revisit_prob"), self.revisit_prob)?;
        self.irrelevant_rate = kv.take_or(&format!("{prefix}irrelevant_rate"), self.irrelevant_rate)?;
        if let Some(d) = kv.take_list::<f64>(&format!("{prefix}durations"))? {
            self.duration_means = d.try_into().map_err(|d: Vec<f64>| {
                Error::Config(format!("{prefix}durations needs {NUM_STEPS} values, got {}", d.len()))
            })?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchmarkSpec {
    pub seed: u64,
    /// N, the per-second feature width.
    pub feature_dim: usize,
    /// E, the width of the shared step embeddings.
    pub embed_dim: usize,
    /// Standard deviation of each step-embedding coordinate.
    pub embed_scale: f64,
    pub min_length: usize,
    pub max_length: usize,
    pub source: DomainSpec,
    pub targets: Vec<DomainSpec>,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        Self {
            seed: 2024,
            feature_dim: 64,
            embed_dim: 16,
            embed_scale: 0.25,
            min_length: 200,
            max_length: 600,
            source: DomainSpec::new("source", 120),
            targets: vec![
                DomainSpec::new("target_a", 40),
                DomainSpec::new("target_b", 44),
                DomainSpec::new("target_c", 80),
            ],
        }
    }
}

impl BenchmarkSpec {
    pub fn domains(&self) -> impl Iterator<Item = &DomainSpec> {
        std::iter::once(&self.source).chain(&self.targets)
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 || self.embed_dim == 0 {
            return Err(Error::Config("feature_dim and embed_dim must be positive".into()));
        }
        if !(self.embed_scale > 0.0 && self.embed_scale.is_finite()) {
            return Err(Error::Config(format!(
                "embed_scale must be positive, got {}",
                self.embed_scale
            )));
        }
        check_length_range(self.min_length, self.max_length)?;
        if self.targets.is_empty() {
            return Err(Error::Config("at least one target domain is required".into()));
        }
        let mut names: Vec<&str> = self.domains().map(|d| d.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("domain names must be unique".into()));
        }
        self.domains().try_for_each(DomainSpec::validate)
    }

    /// Parses the `key = value` spec format. Every key is optional; see
    /// [`BenchmarkSpec::to_text`] for the full list. Domain parameters given
    /// without a prefix apply to all domains and `<domain>.<key>` overrides one.
    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = KeyValues::parse(text)?;
        let default = Self::default();
        let parse_domain = |raw: &str| -> Result<DomainSpec> {
            let (name, videos) = raw
                .split_once(':')
                .ok_or_else(|| Error::Config(format!("expected `name:videos`, got {raw:?}")))?;
            let videos = videos
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("invalid video count in {raw:?}")))?;
            Ok(DomainSpec::new(name.trim(), videos))
        };
        let mut spec = Self {
            seed: kv.take_or("seed", default.seed)?,
            feature_dim: kv.take_or("feature_dim", default.feature_dim)?,
            embed_dim: kv.take_or("embed_dim", default.embed_dim)?,
            embed_scale: kv.take_or("embed_scale", default.embed_scale)?,
            min_length: kv.take_or("min_length", default.min_length)?,
            max_length: kv.take_or("max_length", default.max_length)?,
            source: match kv.take::<String>("source")? {
                Some(raw) => parse_domain(&raw)?,
                None => default.source,
            },
            targets: match kv.take::<String>("targets")? {
                Some(raw) => raw.split(',').map(parse_domain).collect::<Result<_>>()?,
                None => default.targets,
            },
        };
        let mut shared = DomainSpec::new("shared", 4);
        shared.take_overrides(&mut kv, "")?;
        for d in std::iter::once(&mut spec.source).chain(&mut spec.targets) {
            let DomainSpec { name, videos, .. } = d.clone();
            *d = DomainSpec {
                name: name.clone(),
                videos,
                ..shared.clone()
            };
            d.take_overrides(&mut kv, &format!("{name}."))?;
        }
        kv.finish()?;
        spec.validate()?;
        Ok(spec)
    }

    /// Fully explicit text form; `parse(to_text())` reproduces `self`.
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "seed = {}\nfeature_dim = {}\nembed_dim = {}\nembed_scale = {}\nmin_length = {}\nmax_length = {}\n",
            self.seed, self.feature_dim, self.embed_dim, self.embed_scale, self.min_length, self.max_length
        );
        let count = |d: &DomainSpec| format!("{}:{}", d.name, d.videos);
        out += &format!("source = {}\n", count(&self.source));
        out += &format!(
            "targets = {}\n",
            self.targets.iter().map(count).collect::<Vec<_>>().join(",")
        );
        for d in self.domains() {
            let n = &d.name;
            out += &format!(
                "{n}.shift = {}\n{n}.noise_std = {}\n{n}.skip_prob = {}\n{n}.revisit_prob = {}\n{n}.irrelevant_rate = {}\n{n}.durations = {}\n",
                d.shift,
                d.noise_std,
                d.skip_prob,
                d.revisit_prob,
                d.irrelevant_rate,
                format_list(&d.duration_means)
            );
        }
        out
    }

    /// Emission parameters of domain `index` (0 = source, then targets).
    pub fn emission(&self, index: usize) -> Result<EmissionModel> {
        let domain = self
            .domains()
            .nth(index)
            .ok_or_else(|| Error::Config(format!("no domain with index {index}")))?;
        let (n, e) = (self.feature_dim, self.embed_dim);
        let mut shared = stream(self.seed, stream_id(0, 0));
        let embeddings: Vec<Vec<f64>> = (0..NUM_STEPS)
            .map(|_| normals(e, self.embed_scale, &mut shared))
            .collect();
        let projection: Vec<Vec<f64>> = (0..n).map(|_| normals(e, (e as f64).powf(-0.5), &mut shared)).collect();
        let oob_mean = normals(n, 1.0, &mut shared);

        let mut own = stream(self.seed, stream_id(1, index as u64));
        let rotation = random_orthogonal(n, &mut own);
        let offset = normals(n, 1.0, &mut own);

        let delta = domain.shift;
        let rotated = mat_mul(&rotation, &projection);
        let mix: Vec<Vec<f64>> = projection
            .iter()
            .zip(&rotated)
            .map(|(p, r)| p.iter().zip(r).map(|(a, b)| (1.0 - delta) * a + delta * b).collect())
            .collect();
        let step_means = embeddings.iter().map(|emb| mat_vec(&mix, emb)).collect();
        Ok(EmissionModel {
            domain: domain.clone(),
            mix,
            step_means,
            offset: offset.iter().map(|o| delta * o).collect(),
            oob_mean,
            oob_std: 0.5,
        })
    }
}

/// Everything needed to emit one domain's feature rows.
#[derive(Clone, Debug)]
pub struct EmissionModel {
    pub domain: DomainSpec,
    /// M_d, N×E.
    pub mix: Vec<Vec<f64>>,
    /// M_d·e_y for each step.
    pub step_means: Vec<Vec<f64>>,
    /// δ·domain_offset.
    pub offset: Vec<f64>,
    pub oob_mean: Vec<f64>,
    pub oob_std: f64,
}

impl EmissionModel {
    pub fn feature_dim(&self) -> usize {
        self.offset.len()
    }
}

fn check_length_range(min: usize, max: usize) -> Result<()> {
    let (lo, hi) = LENGTH_LIMITS;
    if min < lo || max > hi || min > max {
        return Err(Error::Config(format!(
            "length range [{min}, {max}] must lie within [{lo}, {hi}]"
        )));
    }
    Ok(())
}

fn normals(n: usize, std: f64, rng: &mut SeedRng) -> Vec<f64> {
    (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect()
}

fn mat_vec(m: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    m.iter()
        .map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum())
        .collect()
}

fn mat_mul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let cols = b.first().map_or(0, Vec::len);
    a.iter()
        .map(|row| {
            (0..cols)
                .map(|j| row.iter().zip(b).map(|(x, br)| x * br[j]).sum())
                .collect()
        })
        .collect()
}

/// Gram–Schmidt on the rows of a Gaussian matrix, redrawing any row that
/// comes out (numerically) dependent.
fn random_orthogonal(n: usize, rng: &mut SeedRng) -> Vec<Vec<f64>> {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
    while rows.len() < n {
        let mut v = normals(n, 1.0, rng);
        for _ in 0..2 {
            for q in &rows {
                let d: f64 = q.iter().zip(&v).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(q).for_each(|(x, qi)| *x -= d * qi);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            rows.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    rows
}

/// Per-second step labels for one video.
///
/// A semi-Markov walk starts at step 0 and ends after step 6. Each visit
/// lasts a geometric number of seconds with the step's mean, floored at
/// [`MIN_STEP_SECONDS`]. After a step the walk may revisit a uniformly chosen
/// earlier step (`revisit_prob`) before continuing, and moves on by two steps
/// instead of one with `skip_prob`. Segment durations are then rescaled
/// proportionally to a length drawn uniformly from the range.
pub fn sample_label_sequence(
    domain: &DomainSpec,
    min_len: usize,
    max_len: usize,
    rng: &mut SeedRng,
) -> Result<Vec<usize>> {
    check_length_range(min_len, max_len)?;
    domain.validate()?;
    let total = rng.random_range(min_len..=max_len);
    let draw = |step: usize, rng: &mut SeedRng| -> Result<usize> {
        let geo = Geometric::new(1.0 / domain.duration_means[step]).map_err(|e| Error::Config(e.to_string()))?;
        Ok((1 + geo.sample(rng) as usize).max(MIN_STEP_SECONDS))
    };
    let mut segments: Vec<(usize, usize)> = Vec::new();
    let mut step = 0;
    loop {
        segments.push((step, draw(step, rng)?));
        if step == NUM_STEPS - 1 {
            break;
        }
        if step > 0 && rng.random::<f64>() < domain.revisit_prob {
            let earlier = rng.random_range(0..step);
            segments.push((earlier, draw(earlier, rng)?));
        }
        step += if step + 2 < NUM_STEPS && rng.random::<f64>() < domain.skip_prob {
            2
        } else {
            1
        };
    }
    Ok(rescale(&segments, total)
        .into_iter()
        .flat_map(|(step, d)| std::iter::repeat_n(step, d))
        .collect())
}

/// Largest-remainder rescaling of segment durations to sum to `total`,
/// keeping every segment at least one second long.
fn rescale(segments: &[(usize, usize)], total: usize) -> Vec<(usize, usize)> {
    let raw: usize = segments.iter().map(|s| s.1).sum();
    let exact: Vec<f64> = segments
        .iter()
        .map(|s| s.1 as f64 * total as f64 / raw as f64)
        .collect();
    let mut out: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let mut order: Vec<usize> = (0..segments.len()).collect();
    order.sort_by(|&a, &b| {
        (exact[b] - exact[b].floor())
            .total_cmp(&(exact[a] - exact[a].floor()))
            .then(a.cmp(&b))
    });
    let mut short = total - out.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if short == 0 {
            break;
        }
        out[i] += 1;
        short -= 1;
    }
    while let Some(i) = out.iter().position(|&d| d == 0) {
        let j = (0..out.len())
            .max_by_key(|&j| (out[j], std::cmp::Reverse(j)))
            .unwrap_or(0);
        out[j] -= 1;
        out[i] += 1;
    }
    segments.iter().zip(out).map(|(s, d)| (s.0, d)).collect()
}

/// Features for a label sequence: relevant seconds get
/// `tanh(M_d·(e_y + σ·ε) + δ·offset)`, irrelevant spans get draws from the
/// shared out-of-body distribution but keep their step label. Values are
/// rounded to f32 so they survive the `.sfm` format unchanged.
pub fn emit_features(
    id: &str,
    labels: &[usize],
    emission: &EmissionModel,
    rng: &mut SeedRng,
) -> Result<FeatureSequence> {
    let l = labels.len();
    let n = emission.feature_dim();
    let domain = &emission.domain;
    let mut relevance = vec![true; l];
    let expected = domain.irrelevant_rate * l as f64 / 60.0;
    if expected > 0.0 {
        let spans = Poisson::new(expected)
            .map_err(|e| Error::Config(e.to_string()))?
            .sample(rng) as usize;
        let (lo, hi) = IRRELEVANT_SPAN_SECONDS;
        for _ in 0..spans {
            let start = rng.random_range(0..l);
            let len = rng.random_range(lo..=hi);
            relevance[start..(start + len).min(l)].fill(false);
        }
    }

    let e = emission.mix.first().map_or(0, Vec::len);
    let mut data = Vec::with_capacity(l * n);
    for (t, &y) in labels.iter().enumerate() {
        if relevance[t] {
            let noise = normals(e, domain.noise_std, rng);
            let projected = mat_vec(&emission.mix, &noise);
            for ((m, p), o) in emission.step_means[y].iter().zip(&projected).zip(&emission.offset) {
                data.push((m + p + o).tanh() as f32 as f64);
            }
        } else {
            for i in 0..n {
                let z = emission.oob_mean[i] + emission.oob_std * rng.sample::<f64, _>(StandardNormal);
                data.push(z.tanh() as f32 as f64);
            }
        }
    }
    FeatureSequence::new(
        id,
        Tensor::new(vec![l, n], data)?,
        Some(labels.to_vec()),
        Some(relevance),
    )
}

/// One video of domain `index`, fully determined by the master seed.
pub fn generate_video(
    spec: &BenchmarkSpec,
    emission: &EmissionModel,
    index: usize,
    video: usize,
) -> Result<FeatureSequence> {
    let mut rng = stream(spec.seed, stream_id(2 + index as u64, video as u64));
    let labels = sample_label_sequence(&emission.domain, spec.min_length, spec.max_length, &mut rng)?;
    emit_features(
        &format!("{}_{video:04}", emission.domain.name),
        &labels,
        emission,
        &mut rng,
    )
}

/// Writes `spec.txt`, one `.sfm` per video under `<domain>/`, and
/// `manifest.tsv`. Within a domain the first videos form the training split,
/// then validation, then test (videos are i.i.d., so this is unbiased).
pub fn generate_benchmark(spec: &BenchmarkSpec, out: &Path) -> Result<Vec<ManifestEntry>> {
    spec.validate()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let spec_path = out.join(SPEC_FILE);
    fs::write(&spec_path, spec.to_text()).map_err(|e| Error::io(&spec_path, e))?;

    let mut manifest = Vec::new();
    for (index, domain) in spec.domains().enumerate() {
        let dir = out.join(&domain.name);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let emission = spec.emission(index)?;
        let (train, val, _) = split_sizes(domain.videos);
        let entries: Vec<ManifestEntry> = (0..domain.videos)
            .into_par_iter()
            .map(|v| {
                let seq = generate_video(spec, &emission, index, v)?;
                let rel = format!("{}/{}.sfm", domain.name, seq.id);
                write_sequence(&out.join(&rel), &seq)?;
                let split = if v < train {
                    Split::Train
                } else if v < train + val {
                    Split::Val
                } else {
                    Split::Test
                };
                Ok(ManifestEntry {
                    id: seq.id.clone(),
                    domain: domain.name.clone(),
                    split,
                    path: rel,
                    len: seq.len(),
                })
            })
            .collect::<Result<_>>()?;
        log::info!("generated {} videos for domain {}", entries.len(), domain.name);
        manifest.extend(entries);
    }
    write_manifest(&out.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}
