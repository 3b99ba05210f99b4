//! Synthetic domain-shift datasets and CSV ingestion.

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

/// Feature vectors with optional integer labels.
///
/// A target dataset exposes no labels to training code. Its ground truth,
/// when known, is kept privately and is only read by
/// [`crate::metrics::evaluate`].
#[derive(Debug, Clone, PartialEq)]
pub struct DomainDataset {
    features: Vec<Vec<f64>>,
    labels: Vec<Option<usize>>,
    hidden_truth: Option<Vec<Option<usize>>>,
    domain: Domain,
    dim: usize,
    classes: usize,
}

impl DomainDataset {
    pub fn new(
        features: Vec<Vec<f64>>,
        labels: Vec<Option<usize>>,
        domain: Domain,
        dim: usize,
        classes: usize,
    ) -> Result<Self> {
        if features.len() != labels.len() {
            return Err(Error::config("features and labels differ in length"));
        }
        if features.iter().any(|f| f.len() != dim) {
            return Err(Error::config(format!("every feature vector must have {dim} entries")));
        }
        if labels.iter().flatten().any(|&l| l >= classes) {
            return Err(Error::config(format!("label outside 0..{classes}")));
        }
        Ok(DomainDataset { features, labels, hidden_truth: None, domain, dim, classes })
    }

    /// Turns the dataset into an unlabeled target set whose labels become
    /// hidden evaluation truth.
    pub fn into_target(mut self) -> Self {
        if self.domain == Domain::Source {
            let truth = std::mem::replace(&mut self.labels, vec![None; self.features.len()]);
            self.hidden_truth = Some(truth);
            self.domain = Domain::Target;
        }
        self
    }

    pub fn features(&self) -> &[Vec<f64>] {
        &self.features
    }

    /// Visible labels; always `None` for target datasets.
    pub fn labels(&self) -> &[Option<usize>] {
        &self.labels
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    /// Labels used for evaluation: visible labels for source data, hidden
    /// truth for target data.
    pub(crate) fn evaluation_labels(&self) -> &[Option<usize>] {
        match &self.hidden_truth {
            Some(truth) => truth,
            None => &self.labels,
        }
    }

    /// FNV-1a over the exact bit patterns of features and labels.
    pub fn fingerprint(&self) -> u64 {
        const PRIME: u64 = 0x0100_0000_01b3;
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |v: u64| {
            for b in v.to_le_bytes() {
                h ^= u64::from(b);
                h = h.wrapping_mul(PRIME);
            }
        };
        for (f, l) in self.features.iter().zip(self.evaluation_labels()) {
            f.iter().for_each(|v| eat(v.to_bits()));
            eat(l.map_or(u64::MAX, |l| l as u64));
        }
        h
    }
}

/// Two interleaved half circles, `n / 2` points each.
///
/// Class 0 lies on `(cos t, sin t)`, class 1 on `(1 - cos t, 0.5 - sin t)`,
/// `t` evenly spaced over `[0, π]`, plus isotropic Gaussian noise.
pub fn gen_two_moons(n: usize, noise_sd: f64, seed: u64) -> Result<DomainDataset> {
    two_moons(n, noise_sd, &mut stream(seed, Stream::SourceData))
}

/// Source two moons and an independent draw, rotated by `theta_degrees`,
/// as the target. The target noise comes from the target-data stream.
pub fn gen_two_moons_shift(
    n: usize,
    noise_sd: f64,
    theta_degrees: f64,
    seed: u64,
) -> Result<(DomainDataset, DomainDataset)> {
    let source = gen_two_moons(n, noise_sd, seed)?;
    let target = two_moons(n, noise_sd, &mut stream(seed, Stream::TargetData))?;
    Ok((source, rotate_domain(&target, theta_degrees)?))
}

fn two_moons<R: Rng>(n: usize, noise_sd: f64, rng: &mut R) -> Result<DomainDataset> {
    if n < 2 || n % 2 != 0 {
        return Err(Error::config(format!("two moons needs an even n >= 2, got {n}")));
    }
    if !(noise_sd >= 0.0) {
        return Err(Error::config("noise_sd must be non-negative"));
    }
    let half = n / 2;
    let mut features = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let step = if half > 1 { PI / (half - 1) as f64 } else { 0.0 };
    for class in 0..2 {
        for i in 0..half {
            let t = step * i as f64;
            let (x, y) = if class == 0 { (t.cos(), t.sin()) } else { (1.0 - t.cos(), 0.5 - t.sin()) };
            let nx: f64 = rng.sample(StandardNormal);
            let ny: f64 = rng.sample(StandardNormal);
            features.push(vec![x + noise_sd * nx, y + noise_sd * ny]);
            labels.push(Some(class));
        }
    }
    DomainDataset::new(features, labels, Domain::Source, 2, 2)
}

/// Rotates every point about the origin by `theta_degrees` and returns the
/// result as an unlabeled target set.
pub fn rotate_domain(ds: &DomainDataset, theta_degrees: f64) -> Result<DomainDataset> {
    if ds.dim != 2 {
        return Err(Error::config(format!("rotation needs 2-D features, got {}", ds.dim)));
    }
    let (s, c) = theta_degrees.to_radians().sin_cos();
    let mut out = ds.clone();
    for f in &mut out.features {
        let (x, y) = (f[0], f[1]);
        f[0] = c * x - s * y;
        f[1] = s * x + c * y;
    }
    Ok(out.into_target())
}

/// Cluster centers used by [`gen_gaussian_shift`]: radius 3, evenly spaced
/// in the first two coordinates (along the first axis when `dim == 1`).
pub fn gaussian_centers(classes: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..classes)
        .map(|k| {
            let mut c = vec![0.0; dim];
            if dim == 1 {
                c[0] = 3.0 * k as f64;
            } else {
                let a = 2.0 * PI * k as f64 / classes as f64;
                c[0] = 3.0 * a.cos();
                c[1] = 3.0 * a.sin();
            }
            c
        })
        .collect()
}

fn gaussian_clusters(n: usize, classes: usize, offset: &[f64], seed: u64, purpose: Stream) -> Vec<(Vec<f64>, usize)> {
    let dim = offset.len();
    let centers = gaussian_centers(classes, dim);
    let mut rng = stream(seed, purpose);
    let mut out = Vec::with_capacity(n);
    for k in 0..classes {
        // the first n % classes classes get one extra sample
        let count = n / classes + usize::from(k < n % classes);
        for _ in 0..count {
            let x = centers[k]
                .iter()
                .zip(offset)
                .map(|(c, o)| c + o + rng.sample::<f64, _>(StandardNormal))
                .collect();
            out.push((x, k));
        }
    }
    out
}

/// Unit-variance Gaussian clusters for the source domain and the same
/// clusters translated by `mean_shift` for the target domain.
///
/// Source noise is drawn from the source-data stream of `seed`, target noise
/// from the target-data stream, so a zero shift yields two independent draws
/// from one distribution.
pub fn gen_gaussian_shift(
    n: usize,
    classes: usize,
    mean_shift: &[f64],
    seed: u64,
) -> Result<(DomainDataset, DomainDataset)> {
    if classes == 0 || n < classes {
        return Err(Error::config(format!("need n >= K > 0, got n={n}, K={classes}")));
    }
    if mean_shift.is_empty() {
        return Err(Error::config("mean_shift must have at least one coordinate"));
    }
    let dim = mean_shift.len();
    let build = |rows: Vec<(Vec<f64>, usize)>| {
        let (f, l): (Vec<_>, Vec<_>) = rows.into_iter().map(|(x, k)| (x, Some(k))).unzip();
        DomainDataset::new(f, l, Domain::Source, dim, classes)
    };
    let source = build(gaussian_clusters(n, classes, &vec![0.0; dim], seed, Stream::SourceData))?;
    let target = build(gaussian_clusters(n, classes, mean_shift, seed, Stream::TargetData))?.into_target();
    Ok((source, target))
}

/// Reads `f1,...,fD,label` rows. A label of `-1` marks an unlabeled sample.
pub fn load_csv(path: impl AsRef<Path>, classes: usize) -> Result<DomainDataset> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_path(path.as_ref())?;
    let header = reader.headers()?.clone();
    if header.len() < 2 || header.get(header.len() - 1).map(str::trim) != Some("label") {
        return Err(Error::Parse { line: 1, detail: "header must be f1,...,fD,label".into() });
    }
    let dim = header.len() - 1;
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != dim + 1 {
            return Err(Error::Parse { line, detail: format!("expected {} fields, found {}", dim + 1, record.len()) });
        }
        let row = (0..dim)
            .map(|i| {
                let cell = record[i].trim();
                cell.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::Parse { line, detail: format!("non-numeric feature {cell:?}") })
            })
            .collect::<Result<Vec<_>>>()?;
        let cell = record[dim].trim();
        let label: i64 = cell
            .parse()
            .map_err(|_| Error::Parse { line, detail: format!("non-integer label {cell:?}") })?;
        let label = match label {
            -1 => None,
            l if l >= 0 && (l as usize) < classes => Some(l as usize),
            l => return Err(Error::Parse { line, detail: format!("label {l} outside 0..{classes}") }),
        };
        features.push(row);
        labels.push(label);
    }
    DomainDataset::new(features, labels, Domain::Source, dim, classes)
}

/// Writes a dataset in the format read by [`load_csv`]. Target datasets are
/// written with their visible labels, i.e. all `-1`.
pub fn write_csv(ds: &DomainDataset, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = (1..=ds.dim).map(|i| format!("f{i}")).collect();
    header.push("label".into());
    w.write_record(&header)?;
    for (f, l) in ds.features.iter().zip(&ds.labels) {
        let mut row: Vec<String> = f.iter().map(|v| v.to_string()).collect();
        row.push(l.map_or("-1".to_string(), |l| l.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}
