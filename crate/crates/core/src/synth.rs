//! Deterministic multi-domain clip benchmark.
//!
//! Every clip is a drifting grating whose drift direction encodes the class,
//! seen through a domain's per-channel gain and static texture, plus noise:
//!
//! `x[ch,t,y,x] = s_c * gain_d[ch] * cos(k.(x,y) - w*t + phase) + s_d * texture_d[ch,y,x] + s_n * noise`

use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Pixels per grating period.
const PERIOD: f64 = 8.0;
/// Drift in pixels per frame.
const SPEED: f64 = 1.0;
const TEXTURE_WAVES: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub classes: usize,
    pub seen_domains: usize,
    pub unseen_domains: usize,
    pub samples_per_class: usize,
    pub channels: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub class_signal: f64,
    pub domain_signature: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            classes: 6,
            seen_domains: 4,
            unseen_domains: 5,
            samples_per_class: 12,
            channels: 3,
            frames: 8,
            height: 32,
            width: 32,
            class_signal: 1.0,
            domain_signature: 1.0,
            noise: 0.5,
            seed: 0,
        }
    }
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("classes", self.classes),
            ("seen_domains", self.seen_domains),
            ("unseen_domains", self.unseen_domains),
            ("samples_per_class", self.samples_per_class),
            ("channels", self.channels),
            ("frames", self.frames),
            ("height", self.height),
            ("width", self.width),
        ];
        let bad: Vec<String> = counts
            .iter()
            .filter(|(_, v)| *v == 0)
            .map(|(k, _)| format!("{k} must be positive"))
            .collect();
        if !bad.is_empty() {
            return Err(Error::Input(bad.join("; ")));
        }
        for (k, v) in [
            ("class_signal", self.class_signal),
            ("domain_signature", self.domain_signature),
            ("noise", self.noise),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Input(format!("{k} must be finite and non-negative, got {v}")));
            }
        }
        Ok(())
    }

    pub fn total_domains(&self) -> usize {
        self.seen_domains + self.unseen_domains
    }

    /// Seen domains take ids `0..K`, unseen ones `K..K+U`.
    pub fn designation(&self, domain: usize) -> Designation {
        if domain < self.seen_domains {
            Designation::Seen
        } else {
            Designation::Unseen
        }
    }

    pub fn clip_shape(&self) -> [usize; 4] {
        [self.channels, self.frames, self.height, self.width]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Designation {
    Seen,
    Unseen,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub clip: Tensor,
    pub label: usize,
    pub domain: usize,
}

/// Samples of one domain.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainSamples {
    pub domain: usize,
    pub samples: Vec<Sample>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainDataset {
    pub designation: Designation,
    pub domains: Vec<DomainSamples>,
}

impl DomainDataset {
    pub fn len(&self) -> usize {
        self.domains.iter().map(|d| d.samples.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn samples(&self) -> impl Iterator<Item = &Sample> {
        self.domains.iter().flat_map(|d| &d.samples)
    }

    pub fn domain_ids(&self) -> Vec<usize> {
        self.domains.iter().map(|d| d.domain).collect()
    }
}

/// splitmix64 finaliser.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub(crate) fn derive_rng(seed: u64, parts: &[u64]) -> ChaCha8Rng {
    let mut h = mix(seed);
    for &p in parts {
        h = mix(h ^ p);
    }
    ChaCha8Rng::seed_from_u64(h)
}

const TAG_DOMAIN: u64 = 1;
const TAG_PHASE: u64 = 2;
const TAG_NOISE: u64 = 3;

struct DomainLook {
    gain: Vec<f64>,
    texture: Vec<f64>,
}

fn domain_look(spec: &TaskSpec, domain: usize) -> DomainLook {
    let mut rng = derive_rng(spec.seed, &[TAG_DOMAIN, domain as u64]);
    let (h, w) = (spec.height, spec.width);
    let gain = (0..spec.channels)
        .map(|_| (0.5 * spec.domain_signature * rng.random_range(-1.0..1.0f64)).exp())
        .collect();
    let mut texture = vec![0.0; spec.channels * h * w];
    for ch in 0..spec.channels {
        let offset: f64 = rng.random_range(-1.0..1.0);
        let waves: Vec<(f64, f64, f64)> = (0..TEXTURE_WAVES)
            .map(|_| {
                (
                    rng.random_range(0..4) as f64,
                    rng.random_range(0..4) as f64,
                    rng.random_range(0.0..TAU),
                )
            })
            .collect();
        for y in 0..h {
            for x in 0..w {
                let mut v = offset;
                for &(fx, fy, ph) in &waves {
                    v += (TAU * (fx * x as f64 / w as f64 + fy * y as f64 / h as f64) + ph).cos()
                        / (TEXTURE_WAVES as f64).sqrt();
                }
                texture[(ch * h + y) * w + x] = v;
            }
        }
    }
    DomainLook { gain, texture }
}

fn sample_id(domain: usize, class: usize, instance: usize) -> String {
    format!("d{domain:02}-c{class:02}-i{instance:04}")
}

fn render_with(spec: &TaskSpec, look: &DomainLook, domain: usize, class: usize, instance: usize) -> Sample {
    let [c, t, h, w] = spec.clip_shape();
    let theta = TAU * class as f64 / spec.classes as f64;
    let k = TAU / PERIOD;
    let (kx, ky) = (k * theta.cos(), k * theta.sin());
    let omega = k * SPEED;
    let phase = derive_rng(spec.seed, &[TAG_PHASE, class as u64, instance as u64]).random_range(0.0..TAU);
    let mut noise = derive_rng(spec.seed, &[TAG_NOISE, domain as u64, class as u64, instance as u64]);
    let mut data = Vec::with_capacity(c * t * h * w);
    for ch in 0..c {
        let amp = spec.class_signal * look.gain[ch];
        for f in 0..t {
            for y in 0..h {
                for x in 0..w {
                    let wave = (kx * x as f64 + ky * y as f64 - omega * f as f64 + phase).cos();
                    let n: f64 = noise.sample(StandardNormal);
                    data.push(
                        amp * wave + spec.domain_signature * look.texture[(ch * h + y) * w + x] + spec.noise * n,
                    );
                }
            }
        }
    }
    Sample {
        id: sample_id(domain, class, instance),
        clip: Tensor::new(vec![c, t, h, w], data).expect("clip extents are positive"),
        label: class,
        domain,
    }
}

fn check_indices(spec: &TaskSpec, domain: usize, class: usize, instance: usize) -> Result<()> {
    if domain >= spec.total_domains() {
        return Err(Error::Input(format!("domain {domain} out of range (0..{})", spec.total_domains())));
    }
    if class >= spec.classes {
        return Err(Error::Input(format!("class {class} out of range (0..{})", spec.classes)));
    }
    if instance >= spec.samples_per_class {
        return Err(Error::Input(format!("instance {instance} out of range (0..{})", spec.samples_per_class)));
    }
    Ok(())
}

pub fn render_sample(spec: &TaskSpec, domain: usize, class: usize, instance: usize) -> Result<Sample> {
    spec.validate()?;
    check_indices(spec, domain, class, instance)?;
    Ok(render_with(spec, &domain_look(spec, domain), domain, class, instance))
}

fn render_domain(spec: &TaskSpec, domain: usize) -> DomainSamples {
    let look = domain_look(spec, domain);
    let samples = (0..spec.classes)
        .flat_map(|c| (0..spec.samples_per_class).map(move |i| (c, i)))
        .map(|(c, i)| render_with(spec, &look, domain, c, i))
        .collect();
    DomainSamples { domain, samples }
}

/// `(seen, unseen)` datasets; a pure function of `spec`.
pub fn make_benchmark(spec: &TaskSpec) -> Result<(DomainDataset, DomainDataset)> {
    spec.validate()?;
    let seen = DomainDataset {
        designation: Designation::Seen,
        domains: (0..spec.seen_domains).map(|d| render_domain(spec, d)).collect(),
    };
    let unseen = DomainDataset {
        designation: Designation::Unseen,
        domains: (spec.seen_domains..spec.total_domains()).map(|d| render_domain(spec, d)).collect(),
    };
    Ok((seen, unseen))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub class_separability: f64,
    pub domain_separability: f64,
    pub train_items: usize,
    pub test_items: usize,
}

/// Hand-crafted clip features: spatial block means per channel and
/// gain-normalised space-time correlations of the temporally centred clip.
fn audit_features(clip: &Tensor) -> Vec<f64> {
    let &[c, t, h, w] = clip.shape() else { unreachable!("clips are 4-d") };
    let d = clip.data();
    let at = |ch: usize, f: usize, y: usize, x: usize| d[((ch * t + f) * h + y) * w + x];
    let mut feats = Vec::new();
    let blocks = 4;
    for ch in 0..c {
        for by in 0..blocks {
            for bx in 0..blocks {
                let (y0, y1) = (by * h / blocks, ((by + 1) * h / blocks).max(by * h / blocks + 1).min(h));
                let (x0, x1) = (bx * w / blocks, ((bx + 1) * w / blocks).max(bx * w / blocks + 1).min(w));
                let mut s = 0.0;
                let mut n = 0usize;
                for f in 0..t {
                    for y in y0..y1 {
                        for x in x0..x1 {
                            s += at(ch, f, y, x);
                            n += 1;
                        }
                    }
                }
                feats.push(s / n as f64);
            }
        }
    }
    let mut centred = vec![0.0; d.len()];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let m = (0..t).map(|f| at(ch, f, y, x)).sum::<f64>() / t as f64;
                for f in 0..t {
                    centred[((ch * t + f) * h + y) * w + x] = at(ch, f, y, x) - m;
                }
            }
        }
    }
    let cz = |ch: usize, f: usize, y: usize, x: usize| centred[((ch * t + f) * h + y) * w + x];
    let r = 2i64;
    let energy: f64 = centred.iter().map(|v| v * v).sum::<f64>().max(1e-12) / centred.len() as f64;
    if t < 2 {
        feats.extend(std::iter::repeat_n(0.0, ((2 * r + 1) * (2 * r + 1)) as usize));
        return feats;
    }
    for dy in -r..=r {
        for dx in -r..=r {
            let mut s = 0.0;
            let mut n = 0usize;
            for ch in 0..c {
                for f in 0..t - 1 {
                    for y in 0..h as i64 {
                        for x in 0..w as i64 {
                            let (yy, xx) = (y + dy, x + dx);
                            if yy < 0 || xx < 0 || yy >= h as i64 || xx >= w as i64 {
                                continue;
                            }
                            s += cz(ch, f + 1, yy as usize, xx as usize) * cz(ch, f, y as usize, x as usize);
                            n += 1;
                        }
                    }
                }
            }
            feats.push(s / n.max(1) as f64 / energy);
        }
    }
    feats
}

/// One-vs-rest ridge least squares; returns held-out accuracy.
fn probe_accuracy(train: &[(Vec<f64>, usize)], test: &[(Vec<f64>, usize)], n_labels: usize) -> f64 {
    let dim = train[0].0.len() + 1;
    let rows = |set: &[(Vec<f64>, usize)]| {
        DMatrix::from_fn(set.len(), dim, |i, j| if j + 1 == dim { 1.0 } else { set[i].0[j] })
    };
    let a = rows(train);
    let mut y = DMatrix::zeros(train.len(), n_labels);
    for (i, (_, l)) in train.iter().enumerate() {
        y[(i, *l)] = 1.0;
    }
    let ridge = 1e-3 * train.len() as f64;
    let gram = a.transpose() * &a + DMatrix::identity(dim, dim) * ridge;
    let rhs = a.transpose() * y;
    let weights = gram.cholesky().expect("ridge Gram matrix is positive definite").solve(&rhs);
    let b = rows(test);
    let scores = b * weights;
    let correct = test
        .iter()
        .enumerate()
        .filter(|(i, (_, l))| {
            let row: DVector<f64> = scores.row(*i).transpose();
            row.argmax().0 == *l
        })
        .count();
    correct as f64 / test.len() as f64
}

/// Linear-probe separability of class and of domain on the seen domains.
/// `n_probe` instances are rendered per (domain, class); even instances fit
/// the probes, odd ones score them.
pub fn signal_audit(spec: &TaskSpec, n_probe: usize) -> Result<AuditReport> {
    spec.validate()?;
    if n_probe < 2 {
        return Err(Error::Input("signal_audit needs at least 2 instances per cell".into()));
    }
    let mut probe_spec = spec.clone();
    probe_spec.samples_per_class = n_probe;
    let mut train = Vec::new();
    let mut test = Vec::new();
    for d in 0..spec.seen_domains {
        let look = domain_look(&probe_spec, d);
        for c in 0..spec.classes {
            for i in 0..n_probe {
                let s = render_with(&probe_spec, &look, d, c, i);
                let f = audit_features(&s.clip);
                if i % 2 == 0 { &mut train } else { &mut test }.push((f, c, d));
            }
        }
    }
    let by = |set: &[(Vec<f64>, usize, usize)], domain: bool| -> Vec<(Vec<f64>, usize)> {
        set.iter().map(|(f, c, d)| (f.clone(), if domain { *d } else { *c })).collect()
    };
    Ok(AuditReport {
        class_separability: probe_accuracy(&by(&train, false), &by(&test, false), spec.classes),
        domain_separability: probe_accuracy(&by(&train, true), &by(&test, true), spec.seen_domains),
        train_items: train.len(),
        test_items: test.len(),
    })
}

const CLIP_MAGIC: &[u8; 8] = b"CARECLIP";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub id: String,
    pub domain: usize,
    pub class: usize,
    pub designation: Designation,
    pub path: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub spec: TaskSpec,
    pub samples: Vec<IndexEntry>,
}

pub const INDEX_FILE: &str = "index.json";

pub fn domain_dir_name(domain: usize) -> String {
    format!("domain_{domain:02}")
}

pub fn write_clip(path: &Path, clip: &Tensor) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(CLIP_MAGIC)?;
    f.write_all(&(clip.shape().len() as u32).to_le_bytes())?;
    for &e in clip.shape() {
        f.write_all(&(e as u64).to_le_bytes())?;
    }
    for v in clip.data() {
        f.write_all(&v.to_le_bytes())?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_clip(path: &Path) -> Result<Tensor> {
    let bad = |reason: &str| Error::Format {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 12 || &bytes[..8] != CLIP_MAGIC {
        return Err(bad("not a clip file"));
    }
    let ndim = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let header = 12 + 8 * ndim;
    if bytes.len() < header {
        return Err(bad("truncated shape header"));
    }
    let shape: Vec<usize> = bytes[12..header]
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")) as usize)
        .collect();
    let payload = &bytes[header..];
    let n: usize = shape.iter().product();
    if payload.len() != n * 8 {
        return Err(bad("payload length does not match shape"));
    }
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Tensor::new(shape, data).map_err(|e| bad(&e.to_string()))
}

/// Writes one directory per domain plus `index.json` under `root`.
pub fn export_dataset(root: &Path, spec: &TaskSpec, sets: &[&DomainDataset]) -> Result<DatasetIndex> {
    let mut samples = Vec::new();
    for set in sets {
        for dom in &set.domains {
            let dir_name = domain_dir_name(dom.domain);
            std::fs::create_dir_all(root.join(&dir_name))?;
            for s in &dom.samples {
                let rel = format!("{dir_name}/{}.clip", s.id);
                write_clip(&root.join(&rel), &s.clip)?;
                samples.push(IndexEntry {
                    id: s.id.clone(),
                    domain: s.domain,
                    class: s.label,
                    designation: set.designation,
                    path: rel,
                });
            }
        }
    }
    let index = DatasetIndex {
        spec: spec.clone(),
        samples,
    };
    let mut json = serde_json::to_string_pretty(&index)?;
    json.push('\n');
    std::fs::write(root.join(INDEX_FILE), json)?;
    Ok(index)
}

pub fn read_index(root: &Path) -> Result<DatasetIndex> {
    let path: PathBuf = root.join(INDEX_FILE);
    let text = std::fs::read_to_string(&path)?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        path,
        reason: e.to_string(),
    })
}

/// Loads an exported dataset as `(spec, seen, unseen)`.
pub fn import_dataset(root: &Path) -> Result<(TaskSpec, DomainDataset, DomainDataset)> {
    let index = read_index(root)?;
    let mut buckets: BTreeMap<(bool, usize), Vec<Sample>> = BTreeMap::new();
    for e in &index.samples {
        let clip = read_clip(&root.join(&e.path))?;
        buckets
            .entry((e.designation == Designation::Unseen, e.domain))
            .or_default()
            .push(Sample {
                id: e.id.clone(),
                clip,
                label: e.class,
                domain: e.domain,
            });
    }
    let collect = |unseen: bool, designation| DomainDataset {
        designation,
        domains: buckets
            .iter()
            .filter(|((u, _), _)| *u == unseen)
            .map(|((_, d), s)| DomainSamples {
                domain: *d,
                samples: s.clone(),
            })
            .collect(),
    };
    let seen = collect(false, Designation::Seen);
    let unseen = collect(true, Designation::Unseen);
    Ok((index.spec, seen, unseen))
}
