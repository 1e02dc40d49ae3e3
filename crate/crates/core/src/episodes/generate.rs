//! Seeded synthetic episodes in feature space.
//!
//! A [`ClassBank`] holds unit-norm class means separated by a minimum angle.
//! Each episode draws `N` classes from one side of a [`ClassSplit`], a fresh
//! background mean, and paints rectangular or elliptical blobs onto
//! `height x width` grids. Every pixel is its region's mean plus isotropic
//! Gaussian noise.
//!
//! Auxiliary images can carry distractor blobs: an unseen class whose mean
//! lies between the tagged class mean and the background mean, closer to the
//! class. Its pixels decode to the tagged class, so unfiltered pooling drags
//! the class prototype toward the background.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Episode, GroundTruth};
use crate::features::{BinaryMask, FeatureMap};
use crate::fusion::AuxImage;
use crate::metric::{dot, norm, LabelMap, SupportImage, BACKGROUND};
use crate::{Error, Result};

const MAX_DRAWS: usize = 10_000;
const MAX_PLACEMENTS: usize = 64;

/// Which part of the class bank an episode draws its classes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ClassPool {
    Train,
    #[default]
    Test,
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub n_way: usize,
    pub k_shot: usize,
    pub u_aux: usize,
    pub q_query: usize,
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    pub sigma: f64,
    /// Minimum pairwise angle (radians) between the means of an episode.
    pub separation: f64,
    /// Distractor blobs per auxiliary image.
    pub distractors: usize,
    /// Range of the position of a distractor mean on the arc from the tagged
    /// class mean (0) to the background mean (1).
    pub distractor_pull: [f64; 2],
    /// Range of the tilt (radians) of a distractor mean off that arc.
    pub distractor_tilt: [f64; 2],
    /// Largest angle (radians) between an object's own mean and its class
    /// mean. Every support, auxiliary and query object draws its own.
    pub instance_jitter: f64,
    /// Blob side length range as a fraction of the image side.
    pub blob_size: [f64; 2],
    pub bank_size: usize,
    pub bank_seed: u64,
    /// Fraction of bank classes reserved for training episodes.
    pub train_fraction: f64,
    pub pool: ClassPool,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self::clean()
    }
}

impl SyntheticSpec {
    /// No distractors, low noise.
    pub fn clean() -> Self {
        Self {
            n_way: 2,
            k_shot: 1,
            u_aux: 2,
            q_query: 1,
            height: 32,
            width: 32,
            dim: 8,
            sigma: 0.05,
            separation: 0.3,
            distractors: 0,
            distractor_pull: [0.3, 0.45],
            distractor_tilt: [0.0, 0.3],
            instance_jitter: 0.0,
            blob_size: [0.25, 0.5],
            bank_size: 20,
            bank_seed: 0,
            train_fraction: 0.5,
            pool: ClassPool::Test,
            seed: 0,
        }
    }

    /// One unseen-class blob in every auxiliary image, noisier features.
    pub fn distractor() -> Self {
        Self {
            distractors: 1,
            sigma: 0.25,
            distractor_tilt: [1.0, 1.3],
            ..Self::clean()
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }

    pub fn with_pool(&self, pool: ClassPool) -> Self {
        Self { pool, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.n_way == 0 || self.k_shot == 0 || self.q_query == 0 {
            return bad("episode.n_way, k_shot and q_query must be at least 1".into());
        }
        if self.height < 2 || self.width < 2 || self.dim < 2 {
            return bad("episode.height, width and dim must be at least 2".into());
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return bad(format!("episode.sigma must be non-negative, got {}", self.sigma));
        }
        if !(self.separation >= 0.0 && self.separation < std::f64::consts::PI) {
            return bad(format!("episode.separation must lie in [0, pi), got {}", self.separation));
        }
        let [p0, p1] = self.distractor_pull;
        if !(0.0 < p0 && p0 <= p1 && p1 < 0.5) {
            return bad(format!("episode.distractor_pull must satisfy 0 < lo <= hi < 0.5, got {p0}..{p1}"));
        }
        if !(0.0..std::f64::consts::FRAC_PI_2).contains(&self.instance_jitter) {
            return bad(format!(
                "episode.instance_jitter must lie in [0, pi/2), got {}",
                self.instance_jitter
            ));
        }
        let [t0, t1] = self.distractor_tilt;
        if !(0.0 <= t0 && t0 <= t1 && t1 < std::f64::consts::FRAC_PI_2) {
            return bad(format!("episode.distractor_tilt must satisfy 0 <= lo <= hi < pi/2, got {t0}..{t1}"));
        }
        let [b0, b1] = self.blob_size;
        if !(0.0 < b0 && b0 <= b1 && b1 <= 1.0) {
            return bad(format!("episode.blob_size must satisfy 0 < lo <= hi <= 1, got {b0}..{b1}"));
        }
        if !(0.0 < self.train_fraction && self.train_fraction < 1.0) {
            return bad(format!("episode.train_fraction must lie in (0, 1), got {}", self.train_fraction));
        }
        let split = ClassSplit::new(self.bank_size, self.train_fraction, self.bank_seed);
        if split.pool(self.pool).len() < self.n_way {
            return bad(format!(
                "class pool {:?} has {} classes, episode needs {}",
                self.pool,
                split.pool(self.pool).len(),
                self.n_way
            ));
        }
        if self.distractors > 0 && self.dim < 3 {
            return bad(format!("distractors need dim >= 3, got {}", self.dim));
        }
        Ok(())
    }
}

fn unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = norm(&v);
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn draw(rng: &mut ChaCha8Rng, [lo, hi]: [f64; 2]) -> f64 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

fn angle(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b).clamp(-1.0, 1.0).acos()
}

/// Unit class means addressed by class id (`1..=size`).
#[derive(Debug, Clone, PartialEq)]
pub struct ClassBank {
    means: Vec<Vec<f64>>,
}

impl ClassBank {
    pub fn new(size: usize, dim: usize, separation: f64, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x00C1_A55B_A4C0);
        let mut means: Vec<Vec<f64>> = Vec::with_capacity(size);
        while means.len() < size {
            let mut placed = false;
            for _ in 0..MAX_DRAWS {
                let v = unit_vector(&mut rng, dim);
                if means.iter().all(|m| angle(m, &v) >= separation) {
                    means.push(v);
                    placed = true;
                    break;
                }
            }
            if !placed {
                return Err(Error::InfeasibleSpec(format!(
                    "could not place {size} unit means {separation} rad apart in dimension {dim}"
                )));
            }
        }
        Ok(Self { means })
    }

    pub fn for_spec(spec: &SyntheticSpec) -> Result<Self> {
        Self::new(spec.bank_size, spec.dim, spec.separation, spec.bank_seed)
    }

    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }

    pub fn mean(&self, class_id: usize) -> Option<&[f64]> {
        class_id.checked_sub(1).and_then(|i| self.means.get(i)).map(Vec::as_slice)
    }
}

/// Disjoint train/test partition of bank class ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassSplit {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl ClassSplit {
    pub fn new(bank_size: usize, train_fraction: f64, seed: u64) -> Self {
        let mut ids: Vec<usize> = (1..=bank_size).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5911_7000);
        ids.shuffle(&mut rng);
        let n_train = ((bank_size as f64) * train_fraction).round() as usize;
        let n_train = n_train.min(bank_size);
        let mut train = ids[..n_train].to_vec();
        let mut test = ids[n_train..].to_vec();
        train.sort_unstable();
        test.sort_unstable();
        Self { train, test }
    }

    pub fn pool(&self, pool: ClassPool) -> Vec<usize> {
        match pool {
            ClassPool::Train => self.train.clone(),
            ClassPool::Test => self.test.clone(),
            ClassPool::All => {
                let mut all = [self.train.as_slice(), self.test.as_slice()].concat();
                all.sort_unstable();
                all
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Blob {
    top: usize,
    left: usize,
    rows: usize,
    cols: usize,
    ellipse: bool,
}

impl Blob {
    fn random(rng: &mut ChaCha8Rng, h: usize, w: usize, size: [f64; 2]) -> Self {
        let side = |rng: &mut ChaCha8Rng, n: usize| {
            let lo = ((size[0] * n as f64).round() as usize).clamp(1, n);
            let hi = ((size[1] * n as f64).round() as usize).clamp(lo, n);
            rng.random_range(lo..=hi)
        };
        let rows = side(rng, h);
        let cols = side(rng, w);
        Self {
            top: rng.random_range(0..=h - rows),
            left: rng.random_range(0..=w - cols),
            rows,
            cols,
            ellipse: rng.random_bool(0.5),
        }
    }

    fn contains(&self, r: usize, c: usize) -> bool {
        if r < self.top || r >= self.top + self.rows || c < self.left || c >= self.left + self.cols {
            return false;
        }
        if !self.ellipse {
            return true;
        }
        let dy = (r as f64 + 0.5 - self.top as f64) / self.rows as f64 - 0.5;
        let dx = (c as f64 + 0.5 - self.left as f64) / self.cols as f64 - 0.5;
        dx * dx + dy * dy <= 0.25
    }

    fn overlaps(&self, other: &Blob) -> bool {
        self.top < other.top + other.rows
            && other.top < self.top + self.rows
            && self.left < other.left + other.cols
            && other.left < self.left + self.cols
    }
}

/// Place `count` blobs, preferring non-overlapping bounding boxes.
fn place_blobs(rng: &mut ChaCha8Rng, spec: &SyntheticSpec, count: usize) -> Vec<Blob> {
    let mut blobs: Vec<Blob> = Vec::with_capacity(count);
    for _ in 0..count {
        let mut candidate = Blob::random(rng, spec.height, spec.width, spec.blob_size);
        for _ in 0..MAX_PLACEMENTS {
            if blobs.iter().all(|b| !b.overlaps(&candidate)) {
                break;
            }
            candidate = Blob::random(rng, spec.height, spec.width, spec.blob_size);
        }
        blobs.push(candidate);
    }
    blobs
}

/// Region index per pixel; later blobs paint over earlier ones.
fn paint(spec: &SyntheticSpec, blobs: &[(Blob, usize)], background: usize) -> Vec<usize> {
    let mut regions = vec![background; spec.height * spec.width];
    for (blob, region) in blobs {
        for r in blob.top..blob.top + blob.rows {
            for c in blob.left..blob.left + blob.cols {
                if blob.contains(r, c) {
                    regions[r * spec.width + c] = *region;
                }
            }
        }
    }
    regions
}

fn render(rng: &mut ChaCha8Rng, spec: &SyntheticSpec, regions: &[usize], means: &[Vec<f64>]) -> Result<FeatureMap> {
    let mut values = Vec::with_capacity(regions.len() * spec.dim);
    for &r in regions {
        for &m in &means[r] {
            let noise: f64 = rng.sample(StandardNormal);
            values.push(m + spec.sigma * noise);
        }
    }
    FeatureMap::new(spec.height, spec.width, spec.dim, values)
}

/// Remove from `v` its components along the orthonormal `basis`.
fn orthogonalize(v: &mut [f64], basis: &[Vec<f64>]) {
    for q in basis {
        let p = dot(v, q);
        v.iter_mut().zip(q).for_each(|(x, y)| *x -= p * y);
    }
}

/// Point on the great arc from `class` toward `background`, a fraction `pull`
/// of the way, then tilted by `tilt` radians toward a random direction
/// orthogonal to both means.
fn distractor_mean(rng: &mut ChaCha8Rng, class: &[f64], background: &[f64], pull: f64, tilt: f64) -> Vec<f64> {
    let mut basis = vec![class.to_vec()];
    let mut toward = background.to_vec();
    orthogonalize(&mut toward, &basis);
    let n = norm(&toward);
    let toward: Vec<f64> = if n > 1e-9 {
        toward.iter().map(|x| x / n).collect()
    } else {
        loop {
            let mut u = unit_vector(rng, class.len());
            orthogonalize(&mut u, &basis);
            let n = norm(&u);
            if n > 1e-6 {
                break u.iter().map(|x| x / n).collect();
            }
        }
    };
    basis.push(toward.clone());
    let side = loop {
        let mut u = unit_vector(rng, class.len());
        orthogonalize(&mut u, &basis);
        let n = norm(&u);
        if n > 1e-6 {
            break u.iter().map(|x| x / n).collect::<Vec<_>>();
        }
    };
    let theta = pull * angle(class, background);
    (0..class.len())
        .map(|i| tilt.cos() * (theta.cos() * class[i] + theta.sin() * toward[i]) + tilt.sin() * side[i])
        .collect()
}

/// `mean` rotated by up to `max` radians toward a random orthogonal direction.
fn jitter_mean(rng: &mut ChaCha8Rng, mean: &[f64], max: f64) -> Vec<f64> {
    if max == 0.0 {
        return mean.to_vec();
    }
    let basis = vec![mean.to_vec()];
    let side = loop {
        let mut u = unit_vector(rng, mean.len());
        orthogonalize(&mut u, &basis);
        let n = norm(&u);
        if n > 1e-6 {
            break u.iter().map(|x| x / n).collect::<Vec<_>>();
        }
    };
    let a = rng.random_range(0.0..=max);
    mean.iter().zip(&side).map(|(m, s)| a.cos() * m + a.sin() * s).collect()
}

/// Build one episode; fully determined by `spec` (including `spec.seed`).
pub fn generate_episode(spec: &SyntheticSpec) -> Result<Episode> {
    spec.validate()?;
    let bank = ClassBank::for_spec(spec)?;
    generate_with_bank(spec, &bank)
}

pub fn generate_with_bank(spec: &SyntheticSpec, bank: &ClassBank) -> Result<Episode> {
    spec.validate()?;
    let split = ClassSplit::new(spec.bank_size, spec.train_fraction, spec.bank_seed);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut pool = split.pool(spec.pool);
    pool.shuffle(&mut rng);
    let mut classes: Vec<usize> = pool[..spec.n_way].to_vec();
    classes.sort_unstable();
    let class_means: Vec<Vec<f64>> = classes
        .iter()
        .map(|&c| bank.mean(c).map(<[f64]>::to_vec))
        .collect::<Option<_>>()
        .ok_or_else(|| Error::InfeasibleSpec("class id outside the bank".into()))?;

    let background_mean = (0..MAX_DRAWS)
        .map(|_| unit_vector(&mut rng, spec.dim))
        .find(|v| class_means.iter().all(|m| angle(m, v) >= spec.separation))
        .ok_or_else(|| Error::InfeasibleSpec("no background mean satisfies the separation".into()))?;

    // region 0 = background, region 1 + k = classes[k]
    let mut means = vec![background_mean.clone()];
    means.extend(class_means.iter().cloned());

    let mut support = Vec::with_capacity(spec.n_way * spec.k_shot);
    for (k, &c) in classes.iter().enumerate() {
        for _ in 0..spec.k_shot {
            let blob = place_blobs(&mut rng, spec, 1)[0];
            let regions = paint(spec, &[(blob, 1 + k)], 0);
            let mut local = means.clone();
            local[1 + k] = jitter_mean(&mut rng, &class_means[k], spec.instance_jitter);
            let features = render(&mut rng, spec, &regions, &local)?;
            let mask = BinaryMask::new(spec.height, spec.width, regions.iter().map(|&r| r == 1 + k).collect())?;
            support.push(SupportImage {
                features,
                masks: vec![(c, mask)],
            });
        }
    }

    let mut aux = Vec::with_capacity(spec.n_way * spec.u_aux);
    let mut distractor_means = Vec::new();
    for (k, &c) in classes.iter().enumerate() {
        for _ in 0..spec.u_aux {
            let mut local = means.clone();
            local[1 + k] = jitter_mean(&mut rng, &class_means[k], spec.instance_jitter);
            let blobs = place_blobs(&mut rng, spec, spec.distractors + 1);
            let mut painted = Vec::with_capacity(blobs.len());
            for blob in &blobs[..spec.distractors] {
                let pull = draw(&mut rng, spec.distractor_pull);
                let tilt = draw(&mut rng, spec.distractor_tilt);
                let d = distractor_mean(&mut rng, &class_means[k], &background_mean, pull, tilt);
                distractor_means.push(d.clone());
                local.push(d);
                painted.push((*blob, local.len() - 1));
            }
            // the tagged object goes on top
            painted.push((blobs[spec.distractors], 1 + k));
            let regions = paint(spec, &painted, 0);
            let features = render(&mut rng, spec, &regions, &local)?;
            aux.push(AuxImage {
                features,
                tags: vec![c],
            });
        }
    }

    let mut query = Vec::with_capacity(spec.q_query);
    let mut query_truth = Vec::with_capacity(spec.q_query);
    for _ in 0..spec.q_query {
        let mut attempt = 0;
        let regions = loop {
            let blobs = place_blobs(&mut rng, spec, spec.n_way);
            let painted: Vec<(Blob, usize)> = blobs.into_iter().enumerate().map(|(k, b)| (b, 1 + k)).collect();
            let regions = paint(spec, &painted, 0);
            if (1..=spec.n_way).all(|k| regions.contains(&k)) {
                break regions;
            }
            attempt += 1;
            if attempt > MAX_PLACEMENTS {
                return Err(Error::InfeasibleSpec("could not fit every query class into the image".into()));
            }
        };
        let mut local = means.clone();
        for k in 0..spec.n_way {
            local[1 + k] = jitter_mean(&mut rng, &class_means[k], spec.instance_jitter);
        }
        let features = render(&mut rng, spec, &regions, &local)?;
        let labels = regions
            .iter()
            .map(|&r| if r == 0 { BACKGROUND } else { classes[r - 1] })
            .collect();
        query.push(AuxImage {
            features,
            tags: classes.clone(),
        });
        query_truth.push(LabelMap::new(spec.height, spec.width, labels)?);
    }

    let truth = GroundTruth {
        class_means: classes.iter().copied().zip(class_means).collect(),
        background_mean,
        distractor_means,
    };
    Episode::from_parts(spec.seed, Some(spec.clone()), classes, support, aux, query, query_truth, truth)
}
