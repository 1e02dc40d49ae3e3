//! Distance statistics and the learned per-class filter threshold.
//!
//! For a prototype `p_c`, every auxiliary pixel gets a cosine distance. The
//! pooled distances over all auxiliary images are min-max normalized to
//! `[0, 1]`, summarized by five population moments, and fed to a small
//! `5 -> 20 -> 1` network (tanh hidden layer, logistic output) that predicts a
//! threshold `gamma_c` in normalized units. Pixels with normalized distance
//! strictly below `gamma_c` survive the filter.
//!
//! The hard comparison has no useful gradient, so training goes through
//! [`soft_indicator`], a logistic relaxation with a temperature.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::features::{BinaryMask, FeatureMap, SoftMask};
use crate::metric::{distance, Prototype};
use crate::{Error, Result};

pub const STAT_INPUTS: usize = 5;
pub const HIDDEN_UNITS: usize = 20;

/// Distances of every pixel of one image to a prototype.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceGrid {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl DistanceGrid {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if height * width != values.len() || values.is_empty() {
            return Err(Error::ShapeMismatch(format!(
                "distance grid {height}x{width} needs {} values, got {}",
                height * width,
                values.len()
            )));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Raw cosine distances for one prototype over a list of images.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceSet {
    grids: Vec<DistanceGrid>,
}

impl DistanceSet {
    pub fn new(grids: Vec<DistanceGrid>) -> Self {
        Self { grids }
    }

    pub fn grids(&self) -> &[DistanceGrid] {
        &self.grids
    }

    pub fn pooled(&self) -> impl Iterator<Item = f64> + Clone + '_ {
        self.grids.iter().flat_map(|g| g.values.iter().copied())
    }
}

/// Distances rescaled by the pooled minimum and maximum.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedDistanceSet {
    grids: Vec<DistanceGrid>,
    raw_min: f64,
    raw_max: f64,
}

impl NormalizedDistanceSet {
    pub fn grids(&self) -> &[DistanceGrid] {
        &self.grids
    }

    pub fn pooled(&self) -> impl Iterator<Item = f64> + Clone + '_ {
        self.grids.iter().flat_map(|g| g.values.iter().copied())
    }

    /// Pooled raw `(min, max)` used for the rescaling.
    pub fn raw_range(&self) -> (f64, f64) {
        (self.raw_min, self.raw_max)
    }
}

pub fn distance_maps<'a, I>(aux_features: I, p: &Prototype) -> Result<DistanceSet>
where
    I: IntoIterator<Item = &'a FeatureMap>,
{
    let grids = aux_features
        .into_iter()
        .map(|f| {
            let values = f.pixels().map(|x| distance(x, p)).collect::<Result<Vec<_>>>()?;
            DistanceGrid::new(f.height(), f.width(), values)
        })
        .collect::<Result<Vec<_>>>()?;
    if grids.is_empty() {
        return Err(Error::InvalidConfig("no images to measure distances on".into()));
    }
    Ok(DistanceSet { grids })
}

/// Min-max normalization over the pooled set, applied to every grid.
pub fn normalize_distances(d: &DistanceSet) -> Result<NormalizedDistanceSet> {
    let (min, max) = d
        .pooled()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !(max > min) {
        return Err(Error::DegenerateSet);
    }
    let span = max - min;
    let grids = d
        .grids
        .iter()
        .map(|g| DistanceGrid {
            values: g.values.iter().map(|v| (v - min) / span).collect(),
            ..g.clone()
        })
        .collect();
    Ok(NormalizedDistanceSet {
        grids,
        raw_min: min,
        raw_max: max,
    })
}

/// Population moments of a distance set; kurtosis is non-excess.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistanceStats {
    pub min: f64,
    pub max: f64,
    pub variance: f64,
    pub skewness: f64,
    pub kurtosis: f64,
}

impl DistanceStats {
    pub fn from_values<I>(values: I) -> Self
    where
        I: IntoIterator<Item = f64>,
        I::IntoIter: Clone,
    {
        let iter = values.into_iter();
        let (mut n, mut sum, mut min, mut max) = (0usize, 0.0, f64::INFINITY, f64::NEG_INFINITY);
        for v in iter.clone() {
            n += 1;
            sum += v;
            min = min.min(v);
            max = max.max(v);
        }
        if n == 0 {
            return Self::from_array([0.0; STAT_INPUTS]);
        }
        if min == max {
            // every deviation is exactly zero
            return Self::from_array([min, max, 0.0, 0.0, 0.0]);
        }
        let mean = sum / n as f64;
        let (mut m2, mut m3, mut m4) = (0.0, 0.0, 0.0);
        for v in iter {
            let d = v - mean;
            let d2 = d * d;
            m2 += d2;
            m3 += d2 * d;
            m4 += d2 * d2;
        }
        let n = n as f64;
        let (m2, m3, m4) = (m2 / n, m3 / n, m4 / n);
        let (skewness, kurtosis) = if m2 > 0.0 {
            (m3 / m2.powf(1.5), m4 / (m2 * m2))
        } else {
            (0.0, 0.0)
        };
        Self {
            min,
            max,
            variance: m2,
            skewness,
            kurtosis,
        }
    }

    pub fn to_array(&self) -> [f64; STAT_INPUTS] {
        [self.min, self.max, self.variance, self.skewness, self.kurtosis]
    }

    pub fn from_array(a: [f64; STAT_INPUTS]) -> Self {
        Self {
            min: a[0],
            max: a[1],
            variance: a[2],
            skewness: a[3],
            kurtosis: a[4],
        }
    }
}

pub fn distance_stats(nd: &NormalizedDistanceSet) -> DistanceStats {
    DistanceStats::from_values(nd.pooled())
}

pub(crate) fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Threshold predictor: `gamma = logistic(w2 . tanh(W1 s + b1) + b2)`.
///
/// `hidden_weights` is row-major `HIDDEN_UNITS x STAT_INPUTS`: row `h` holds
/// the input weights of hidden unit `h`.
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdNet {
    hidden_weights: Vec<f64>,
    hidden_biases: Vec<f64>,
    output_weights: Vec<f64>,
    output_bias: f64,
}

/// Parameter (and input) gradients of the threshold network output.
#[derive(Debug, Clone, PartialEq)]
pub struct NetGradients {
    pub hidden_weights: Vec<f64>,
    pub hidden_biases: Vec<f64>,
    pub output_weights: Vec<f64>,
    pub output_bias: f64,
    pub stats: [f64; STAT_INPUTS],
}

impl NetGradients {
    pub fn zeros() -> Self {
        Self {
            hidden_weights: vec![0.0; HIDDEN_UNITS * STAT_INPUTS],
            hidden_biases: vec![0.0; HIDDEN_UNITS],
            output_weights: vec![0.0; HIDDEN_UNITS],
            output_bias: 0.0,
            stats: [0.0; STAT_INPUTS],
        }
    }

    /// Parameter gradients in [`ThresholdNet::to_flat`] order.
    pub fn params_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(ThresholdNet::NUM_PARAMS);
        v.extend_from_slice(&self.hidden_weights);
        v.extend_from_slice(&self.hidden_biases);
        v.extend_from_slice(&self.output_weights);
        v.push(self.output_bias);
        v
    }

    /// `self += k * other`.
    pub fn add_scaled(&mut self, other: &NetGradients, k: f64) {
        let pairs = self
            .hidden_weights
            .iter_mut()
            .zip(&other.hidden_weights)
            .chain(self.hidden_biases.iter_mut().zip(&other.hidden_biases))
            .chain(self.output_weights.iter_mut().zip(&other.output_weights))
            .chain(self.stats.iter_mut().zip(&other.stats));
        for (a, b) in pairs {
            *a += k * b;
        }
        self.output_bias += k * other.output_bias;
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NetRecord {
    format: String,
    version: u32,
    inputs: usize,
    hidden: usize,
    hidden_weights: Vec<f64>,
    hidden_biases: Vec<f64>,
    output_weights: Vec<f64>,
    output_bias: f64,
}

const NET_FORMAT: &str = "protoseg-threshold-net";
const NET_VERSION: u32 = 1;

impl ThresholdNet {
    pub const NUM_PARAMS: usize = HIDDEN_UNITS * STAT_INPUTS + 2 * HIDDEN_UNITS + 1;

    pub fn zeros() -> Self {
        Self {
            hidden_weights: vec![0.0; HIDDEN_UNITS * STAT_INPUTS],
            hidden_biases: vec![0.0; HIDDEN_UNITS],
            output_weights: vec![0.0; HIDDEN_UNITS],
            output_bias: 0.0,
        }
    }

    /// Hidden weights uniform in `±sqrt(6 / (inputs + hidden))`, everything
    /// else zero, so the untrained threshold is exactly 0.5.
    pub fn init(seed: u64) -> Self {
        let bound = (6.0 / (STAT_INPUTS + HIDDEN_UNITS) as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = Self::zeros();
        net.hidden_weights
            .iter_mut()
            .for_each(|w| *w = rng.random_range(-bound..=bound));
        net
    }

    pub fn from_flat(params: &[f64]) -> Result<Self> {
        if params.len() != Self::NUM_PARAMS {
            return Err(Error::ShapeMismatch(format!(
                "threshold net has {} parameters, got {}",
                Self::NUM_PARAMS,
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::InvalidConfig("non-finite threshold net parameter".into()));
        }
        let hw = HIDDEN_UNITS * STAT_INPUTS;
        Ok(Self {
            hidden_weights: params[..hw].to_vec(),
            hidden_biases: params[hw..hw + HIDDEN_UNITS].to_vec(),
            output_weights: params[hw + HIDDEN_UNITS..hw + 2 * HIDDEN_UNITS].to_vec(),
            output_bias: params[hw + 2 * HIDDEN_UNITS],
        })
    }

    /// All parameters: hidden weights, hidden biases, output weights, output bias.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(Self::NUM_PARAMS);
        v.extend_from_slice(&self.hidden_weights);
        v.extend_from_slice(&self.hidden_biases);
        v.extend_from_slice(&self.output_weights);
        v.push(self.output_bias);
        v
    }

    pub fn hidden_weights(&self) -> &[f64] {
        &self.hidden_weights
    }

    pub fn output_bias(&self) -> f64 {
        self.output_bias
    }

    pub fn with_output_bias(mut self, bias: f64) -> Self {
        self.output_bias = bias;
        self
    }

    fn hidden(&self, s: &[f64; STAT_INPUTS]) -> [f64; HIDDEN_UNITS] {
        let mut h = [0.0; HIDDEN_UNITS];
        for (k, hk) in h.iter_mut().enumerate() {
            let row = &self.hidden_weights[k * STAT_INPUTS..(k + 1) * STAT_INPUTS];
            let pre: f64 = row.iter().zip(s).map(|(w, x)| w * x).sum::<f64>() + self.hidden_biases[k];
            *hk = pre.tanh();
        }
        h
    }

    pub fn forward(&self, stats: &DistanceStats) -> f64 {
        let s = stats.to_array();
        let h = self.hidden(&s);
        let out: f64 = h.iter().zip(&self.output_weights).map(|(a, w)| a * w).sum::<f64>() + self.output_bias;
        logistic(out)
    }

    /// Gradients of `upstream * gamma` with respect to every parameter and input.
    pub fn backward(&self, stats: &DistanceStats, upstream: f64) -> NetGradients {
        let s = stats.to_array();
        let h = self.hidden(&s);
        let out: f64 = h.iter().zip(&self.output_weights).map(|(a, w)| a * w).sum::<f64>() + self.output_bias;
        let gamma = logistic(out);
        let d_out = upstream * gamma * (1.0 - gamma);
        let mut g = NetGradients::zeros();
        g.output_bias = d_out;
        for k in 0..HIDDEN_UNITS {
            g.output_weights[k] = d_out * h[k];
            let d_pre = d_out * self.output_weights[k] * (1.0 - h[k] * h[k]);
            g.hidden_biases[k] = d_pre;
            for i in 0..STAT_INPUTS {
                g.hidden_weights[k * STAT_INPUTS + i] = d_pre * s[i];
                g.stats[i] += d_pre * self.hidden_weights[k * STAT_INPUTS + i];
            }
        }
        g
    }

    pub fn to_json(&self) -> Result<String> {
        let record = NetRecord {
            format: NET_FORMAT.into(),
            version: NET_VERSION,
            inputs: STAT_INPUTS,
            hidden: HIDDEN_UNITS,
            hidden_weights: self.hidden_weights.clone(),
            hidden_biases: self.hidden_biases.clone(),
            output_weights: self.output_weights.clone(),
            output_bias: self.output_bias,
        };
        Ok(serde_json::to_string_pretty(&record)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: NetRecord = serde_json::from_str(text)?;
        if r.format != NET_FORMAT || r.version != NET_VERSION {
            return Err(Error::Format(format!(
                "expected {NET_FORMAT} v{NET_VERSION}, got {} v{}",
                r.format, r.version
            )));
        }
        if r.inputs != STAT_INPUTS || r.hidden != HIDDEN_UNITS {
            return Err(Error::Format(format!(
                "unsupported net shape {}x{}",
                r.inputs, r.hidden
            )));
        }
        let mut flat = r.hidden_weights;
        flat.extend(r.hidden_biases);
        flat.extend(r.output_weights);
        flat.push(r.output_bias);
        Self::from_flat(&flat).map_err(|e| Error::Format(e.to_string()))
    }
}

pub fn threshold_forward(stats: &DistanceStats, net: &ThresholdNet) -> f64 {
    net.forward(stats)
}

pub fn threshold_backward(stats: &DistanceStats, net: &ThresholdNet, upstream_gradient: f64) -> NetGradients {
    net.backward(stats, upstream_gradient)
}

/// `1` where the normalized distance is strictly below `gamma`.
pub fn distraction_indicator(nd_image: &DistanceGrid, gamma: f64) -> BinaryMask {
    BinaryMask::new(
        nd_image.height,
        nd_image.width,
        nd_image.values.iter().map(|&d| d < gamma).collect(),
    )
    .expect("grid shape is valid")
}

/// `logistic((gamma - d) / temperature)` per pixel.
pub fn soft_indicator(nd_image: &DistanceGrid, gamma: f64, temperature: f64) -> Result<SoftMask> {
    if !(temperature > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "soft indicator temperature must be positive, got {temperature}"
        )));
    }
    SoftMask::new(
        nd_image.height,
        nd_image.width,
        nd_image
            .values
            .iter()
            .map(|&d| logistic((gamma - d) / temperature))
            .collect(),
    )
}
