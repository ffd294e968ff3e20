//! Wearable-stream ingestion: windowing, per-split normalization,
//! subject-disjoint splits, body-location client partitions, and a synthetic
//! non-IID generator so tests need no downloads.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{standard_normal, stream, substream};

/// One raw sensor row from the input CSV schema
/// `timestamp_s,subject,location,label,c1,...,cK`.
#[derive(Debug, Clone)]
pub struct SensorRow {
    pub timestamp_s: f64,
    pub subject: String,
    pub location: String,
    pub label: usize,
    pub channels: Vec<f64>,
}

/// One feature window.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub features: Vec<f64>,
    pub label: usize,
    pub subject: String,
    pub location: String,
}

/// Windowed, feature-extracted dataset.
#[derive(Debug, Clone)]
pub struct WindowedDataset {
    pub windows: Vec<Window>,
    pub d_x: usize,
    pub num_classes: usize,
    pub sampling_rate_hz: f64,
}

/// One body-location client with train and held-out windows.
#[derive(Debug, Clone)]
pub struct ClientPartition {
    pub client_id: usize,
    pub location: String,
    pub train: Vec<Window>,
    pub heldout: Vec<Window>,
    pub subject_disjoint: bool,
}

impl ClientPartition {
    /// Train window count, the FedAvg weight numerator.
    pub fn n_train(&self) -> usize {
        self.train.len()
    }

    /// Class histogram of the train buffer, normalized to sum 1.
    pub fn label_histogram(&self, num_classes: usize) -> Vec<f64> {
        let mut hist = vec![0.0; num_classes];
        for w in &self.train {
            hist[w.label] += 1.0;
        }
        let total: f64 = hist.iter().sum();
        if total > 0.0 {
            for h in &mut hist {
                *h /= total;
            }
        }
        hist
    }
}

/// Per-channel summary features: mean, population stddev, min, max.
fn window_features(rows: &[&SensorRow], channels: usize) -> Vec<f64> {
    let n = rows.len() as f64;
    let mut features = Vec::with_capacity(4 * channels);
    for c in 0..channels {
        let mut sum = 0.0;
        let mut min = f64::INFINITY;
        let mut max = f64::NEG_INFINITY;
        for r in rows {
            let v = r.channels[c];
            sum += v;
            min = min.min(v);
            max = max.max(v);
        }
        let mean = sum / n;
        let var = rows.iter().map(|r| (r.channels[c] - mean).powi(2)).sum::<f64>() / n;
        features.push(mean);
        features.push(var.sqrt());
        features.push(min);
        features.push(max);
    }
    features
}

/// Majority label; ties go to the lowest class index.
fn majority_label(rows: &[&SensorRow], num_classes: usize) -> usize {
    let mut counts = vec![0usize; num_classes];
    for r in rows {
        counts[r.label] += 1;
    }
    let mut best = 0;
    for (c, &count) in counts.iter().enumerate() {
        if count > counts[best] {
            best = c;
        }
    }
    best
}

/// Segment time-ordered rows into fixed windows with per-channel
/// (mean, stddev, min, max) features. Windows are built per contiguous
/// (subject, location) stream; trailing partial windows are dropped.
pub fn window_stream(
    rows: &[SensorRow],
    window_s: f64,
    overlap_fraction: f64,
    sampling_rate_hz: f64,
) -> Result<WindowedDataset> {
    if rows.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if !(1.0..=5.0).contains(&window_s) {
        return Err(Error::InvalidConfig(format!(
            "window_s must be in [1, 5], got {window_s}"
        )));
    }
    if !(0.0..1.0).contains(&overlap_fraction) {
        return Err(Error::InvalidConfig(format!(
            "overlap_fraction must be in [0, 1), got {overlap_fraction}"
        )));
    }
    let window_len = (window_s * sampling_rate_hz).round() as usize;
    if window_len < 1 {
        return Err(Error::InvalidConfig(
            "window shorter than one sample".into(),
        ));
    }
    let stride = ((window_len as f64) * (1.0 - overlap_fraction)).round().max(1.0) as usize;

    let channels = rows[0].channels.len();
    let num_classes = rows.iter().map(|r| r.label).max().unwrap_or(0) + 1;

    let mut streams: BTreeMap<(String, String), Vec<&SensorRow>> = BTreeMap::new();
    for (i, r) in rows.iter().enumerate() {
        if r.channels.len() != channels {
            return Err(Error::DimensionMismatch {
                expected: channels,
                got: r.channels.len(),
            });
        }
        let key = (r.subject.clone(), r.location.clone());
        if let Some(prev) = streams.get(&key).and_then(|v| v.last()) {
            if r.timestamp_s < prev.timestamp_s {
                return Err(Error::NonMonotoneTimestamps {
                    subject: r.subject.clone(),
                    location: r.location.clone(),
                    row: i + 1,
                });
            }
        }
        streams.entry(key).or_default().push(r);
    }

    let mut windows = Vec::new();
    for ((subject, location), seg) in &streams {
        if seg.len() < window_len {
            continue;
        }
        let mut start = 0;
        while start + window_len <= seg.len() {
            let slice = &seg[start..start + window_len];
            windows.push(Window {
                features: window_features(slice, channels),
                label: majority_label(slice, num_classes),
                subject: subject.clone(),
                location: location.clone(),
            });
            start += stride;
        }
    }
    if windows.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(WindowedDataset {
        windows,
        d_x: 4 * channels,
        num_classes,
        sampling_rate_hz,
    })
}

/// Per-feature train-split statistics used for z-scoring.
#[derive(Debug, Clone)]
pub struct NormStats {
    pub mean: Vec<f64>,
    /// Population stddev; entries below 1e-12 mark pass-through (centered
    /// only) features.
    pub stddev: Vec<f64>,
}

/// Compute z-scoring statistics from train windows only.
pub fn fit_norm_stats(train: &[Window]) -> Result<NormStats> {
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let d = train[0].features.len();
    let n = train.len() as f64;
    let mut mean = vec![0.0; d];
    for w in train {
        for (m, &f) in mean.iter_mut().zip(&w.features) {
            *m += f;
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    let mut var = vec![0.0; d];
    for w in train {
        for ((v, &f), &m) in var.iter_mut().zip(&w.features).zip(&mean) {
            *v += (f - m).powi(2);
        }
    }
    let stddev = var.into_iter().map(|v| (v / n).sqrt()).collect();
    Ok(NormStats { mean, stddev })
}

fn apply_norm(windows: &[Window], stats: &NormStats) -> Vec<Window> {
    windows
        .iter()
        .map(|w| {
            let features = w
                .features
                .iter()
                .zip(&stats.mean)
                .zip(&stats.stddev)
                .map(|((&f, &m), &s)| if s < 1e-12 { f - m } else { (f - m) / s })
                .collect();
            Window { features, ..w.clone() }
        })
        .collect()
}

/// Z-score both splits with statistics computed from train only, so the
/// held-out side never leaks into the transform.
pub fn normalize_per_split(
    train: &[Window],
    heldout: &[Window],
) -> Result<(Vec<Window>, Vec<Window>)> {
    let stats = fit_norm_stats(train)?;
    Ok((apply_norm(train, &stats), apply_norm(heldout, &stats)))
}

/// Split so that no subject appears on both sides.
pub fn split_subject_disjoint(
    ds: &WindowedDataset,
    test_subjects: &BTreeSet<String>,
) -> Result<(Vec<Window>, Vec<Window>)> {
    let present: BTreeSet<&str> = ds.windows.iter().map(|w| w.subject.as_str()).collect();
    for s in test_subjects {
        if !present.contains(s.as_str()) {
            return Err(Error::InvalidConfig(format!(
                "test subject {s:?} not present in dataset"
            )));
        }
    }
    let (heldout, train): (Vec<Window>, Vec<Window>) = ds
        .windows
        .iter()
        .cloned()
        .partition(|w| test_subjects.contains(&w.subject));
    if train.is_empty() {
        return Err(Error::EmptySplit { side: "train" });
    }
    if heldout.is_empty() {
        return Err(Error::EmptySplit { side: "heldout" });
    }
    Ok((train, heldout))
}

/// Group normalized windows into one client per body location.
pub fn partition_by_location(
    train: Vec<Window>,
    heldout: Vec<Window>,
    subject_disjoint: bool,
) -> Result<Vec<ClientPartition>> {
    let mut locations: BTreeSet<String> = BTreeSet::new();
    for w in train.iter().chain(&heldout) {
        locations.insert(w.location.clone());
    }
    let mut parts = Vec::new();
    for (client_id, location) in locations.into_iter().enumerate() {
        let t: Vec<Window> = train.iter().filter(|w| w.location == location).cloned().collect();
        let h: Vec<Window> = heldout.iter().filter(|w| w.location == location).cloned().collect();
        if t.is_empty() {
            return Err(Error::InvalidConfig(format!(
                "location {location:?} has no training windows"
            )));
        }
        parts.push(ClientPartition {
            client_id,
            location,
            train: t,
            heldout: h,
            subject_disjoint,
        });
    }
    if parts.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(parts)
}

/// Synthetic non-IID generator configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub locations: Vec<String>,
    pub num_classes: usize,
    /// Per location, a class-weight vector summing to 1.
    pub per_client_class_weights: Vec<Vec<f64>>,
    pub windows_per_client: usize,
    pub heldout_per_client: usize,
    pub d_x: usize,
    pub class_mean_separation: f64,
    pub noise_sigma: f64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::InvalidConfig("num_classes must be >= 2".into()));
        }
        if self.locations.is_empty() {
            return Err(Error::InvalidConfig("need at least one location".into()));
        }
        if self.per_client_class_weights.len() != self.locations.len() {
            return Err(Error::InvalidConfig(
                "per_client_class_weights length must match locations".into(),
            ));
        }
        for (i, w) in self.per_client_class_weights.iter().enumerate() {
            if w.len() != self.num_classes {
                return Err(Error::InvalidConfig(format!(
                    "client {i}: weight vector length {} != num_classes {}",
                    w.len(),
                    self.num_classes
                )));
            }
            if w.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
                return Err(Error::InvalidConfig(format!("client {i}: weights outside [0,1]")));
            }
            let sum: f64 = w.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidConfig(format!(
                    "client {i}: class weights sum to {sum}"
                )));
            }
        }
        if self.windows_per_client == 0 || self.heldout_per_client == 0 {
            return Err(Error::InvalidConfig("window counts must be positive".into()));
        }
        if self.d_x == 0 {
            return Err(Error::InvalidConfig("d_x must be positive".into()));
        }
        Ok(())
    }
}

fn draw_class(weights: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.gen();
    let mut cum = 0.0;
    for (c, &w) in weights.iter().enumerate() {
        cum += w;
        if u < cum {
            return c;
        }
    }
    weights.len() - 1
}

/// Gaussian class clusters with per-location mean offsets; the label mix per
/// client follows its weight vector, making clients non-IID across body
/// locations. Bit-identical per seed.
pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<Vec<ClientPartition>> {
    spec.validate()?;
    let d = spec.d_x;

    // Class means and location offsets scale with the separation knob, so
    // separation 0 collapses everything onto the noise.
    let mut dir_rng = substream(seed, &[stream::SYNTH, 0]);
    let unit = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> {
        let v: Vec<f64> = (0..d).map(|_| standard_normal(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        v.into_iter().map(|x| x / norm).collect()
    };
    let class_means: Vec<Vec<f64>> = (0..spec.num_classes)
        .map(|_| {
            unit(&mut dir_rng)
                .into_iter()
                .map(|x| x * spec.class_mean_separation)
                .collect()
        })
        .collect();
    let location_offsets: Vec<Vec<f64>> = (0..spec.locations.len())
        .map(|_| {
            unit(&mut dir_rng)
                .into_iter()
                .map(|x| x * 0.25 * spec.class_mean_separation)
                .collect()
        })
        .collect();

    let mut parts = Vec::new();
    for (client_id, location) in spec.locations.iter().enumerate() {
        let weights = &spec.per_client_class_weights[client_id];
        let gen_windows = |count: usize, split_tag: u64| -> Vec<Window> {
            let mut rng = substream(seed, &[stream::SYNTH, 1 + split_tag, client_id as u64]);
            (0..count)
                .map(|_| {
                    let label = draw_class(weights, &mut rng);
                    let features: Vec<f64> = (0..d)
                        .map(|j| {
                            class_means[label][j]
                                + location_offsets[client_id][j]
                                + spec.noise_sigma * standard_normal(&mut rng)
                        })
                        .collect();
                    Window {
                        features,
                        label,
                        subject: "synthetic".to_string(),
                        location: location.clone(),
                    }
                })
                .collect()
        };
        let train = gen_windows(spec.windows_per_client, 0);
        let heldout = gen_windows(spec.heldout_per_client, 1);
        parts.push(ClientPartition {
            client_id,
            location: location.clone(),
            train,
            heldout,
            subject_disjoint: false,
        });
    }
    Ok(parts)
}

/// Parse the dataset CSV schema `timestamp_s,subject,location,label,c1..cK`.
pub fn parse_sensor_csv(text: &str, path: &str) -> Result<Vec<SensorRow>> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or(Error::EmptyDataset)?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    if cols.len() < 5
        || cols[0] != "timestamp_s"
        || cols[1] != "subject"
        || cols[2] != "location"
        || cols[3] != "label"
    {
        return Err(Error::CsvSchema {
            path: path.to_string(),
            row: 1,
            msg: "expected header timestamp_s,subject,location,label,c1,...".to_string(),
        });
    }
    let channels = cols.len() - 4;
    let mut rows = Vec::new();
    for (idx, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let row_no = idx + 1;
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != cols.len() {
            return Err(Error::CsvSchema {
                path: path.to_string(),
                row: row_no,
                msg: format!("expected {} fields, got {}", cols.len(), fields.len()),
            });
        }
        let timestamp_s: f64 = fields[0].parse().map_err(|_| Error::CsvSchema {
            path: path.to_string(),
            row: row_no,
            msg: format!("bad timestamp_s {:?}", fields[0]),
        })?;
        let label: usize = fields[3].parse().map_err(|_| Error::CsvSchema {
            path: path.to_string(),
            row: row_no,
            msg: format!("bad label {:?}", fields[3]),
        })?;
        let mut channel_vals = Vec::with_capacity(channels);
        for f in &fields[4..] {
            channel_vals.push(f.parse::<f64>().map_err(|_| Error::CsvSchema {
                path: path.to_string(),
                row: row_no,
                msg: format!("bad channel value {f:?}"),
            })?);
        }
        rows.push(SensorRow {
            timestamp_s,
            subject: fields[1].to_string(),
            location: fields[2].to_string(),
            label,
            channels: channel_vals,
        });
    }
    if rows.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(rows)
}
