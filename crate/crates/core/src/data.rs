//! ROI time-series ingestion, normalization, splitting, and the planted
//! regime-switching generator.

use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MIN_ROIS: usize = 2;
pub const MIN_STEPS: usize = 4;

/// Class label. Index 0 (ASD) is the positive class.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    #[serde(rename = "ASD")]
    Asd,
    #[serde(rename = "TC")]
    Tc,
}

impl Label {
    pub const ALL: [Label; 2] = [Label::Asd, Label::Tc];

    pub fn index(self) -> usize {
        match self {
            Label::Asd => 0,
            Label::Tc => 1,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        match i {
            0 => Some(Label::Asd),
            1 => Some(Label::Tc),
            _ => None,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Asd => "ASD",
            Label::Tc => "TC",
        })
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ASD" | "asd" => Ok(Label::Asd),
            "TC" | "tc" => Ok(Label::Tc),
            _ => Err(Error::Content(format!("unknown label `{s}`"))),
        }
    }
}

/// One subject's `[T × N]` series.
#[derive(Clone, Debug, PartialEq)]
pub struct RoiTimeSeries {
    pub subject_id: String,
    pub values: Tensor,
    pub label: Option<Label>,
}

impl RoiTimeSeries {
    pub fn steps(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn rois(&self) -> usize {
        self.values.shape()[1]
    }
}

fn parse_error(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

/// Reads a `roi_0,…,roi_{N-1}` CSV with one time point per row.
pub fn load_roi_csv(path: &Path) -> Result<RoiTimeSeries> {
    let file = fs::File::open(path)?;
    let mut lines = BufReader::new(file).lines();
    let header = lines.next().transpose()?.ok_or_else(|| Error::Content(format!("{}: empty file", path.display())))?;
    let cols: Vec<&str> = header.trim().split(',').map(str::trim).collect();
    for (i, c) in cols.iter().enumerate() {
        if *c != format!("roi_{i}") {
            return Err(parse_error(path, 1, format!("expected header `roi_{i}`, found `{c}`")));
        }
    }
    let n = cols.len();
    let mut data = Vec::new();
    let mut t = 0;
    for (i, line) in lines.enumerate() {
        let line = line?;
        let lineno = i + 2;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != n {
            return Err(parse_error(path, lineno, format!("expected {n} fields, found {}", fields.len())));
        }
        for f in fields {
            let v: f64 = f
                .trim()
                .parse()
                .map_err(|_| parse_error(path, lineno, format!("non-numeric field `{}`", f.trim())))?;
            if !v.is_finite() {
                return Err(parse_error(path, lineno, format!("non-finite field `{}`", f.trim())));
            }
            data.push(v);
        }
        t += 1;
    }
    if n < MIN_ROIS || t < MIN_STEPS {
        return Err(Error::Content(format!(
            "{}: need N ≥ {MIN_ROIS} and T ≥ {MIN_STEPS}, found N={n}, T={t}",
            path.display()
        )));
    }
    let subject_id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    Ok(RoiTimeSeries {
        subject_id,
        values: Tensor::new(vec![t, n], data)?,
        label: None,
    })
}

/// Writes `values` in the format read by [`load_roi_csv`], with round-trip
/// float formatting.
pub fn write_roi_csv(path: &Path, values: &Tensor) -> Result<()> {
    let (t, n) = values.dims2()?;
    let mut w = BufWriter::new(fs::File::create(path)?);
    let header: Vec<String> = (0..n).map(|i| format!("roi_{i}")).collect();
    writeln!(w, "{}", header.join(","))?;
    for r in 0..t {
        let row: Vec<String> = values.row(r).iter().map(|v| format!("{v:?}")).collect();
        writeln!(w, "{}", row.join(","))?;
    }
    w.flush()?;
    Ok(())
}

/// Per-column z-score with the population standard deviation. Constant
/// columns become zeros.
pub fn normalize_zscore(ts: &RoiTimeSeries) -> Result<RoiTimeSeries> {
    let (t, n) = ts.values.dims2()?;
    if t < 2 {
        return Err(Error::Content(format!("normalization needs T ≥ 2, found {t}")));
    }
    let x = ts.values.data();
    let mut out = vec![0.0; t * n];
    for j in 0..n {
        let mean = (0..t).map(|i| x[i * n + j]).sum::<f64>() / t as f64;
        let var = (0..t).map(|i| (x[i * n + j] - mean).powi(2)).sum::<f64>() / t as f64;
        let std = var.sqrt();
        if std <= 1e-12 * mean.abs().max(1.0) {
            continue;
        }
        for i in 0..t {
            out[i * n + j] = (x[i * n + j] - mean) / std;
        }
    }
    Ok(RoiTimeSeries {
        subject_id: ts.subject_id.clone(),
        values: Tensor::new(vec![t, n], out)?,
        label: ts.label,
    })
}

/// Regime-switching generator settings.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub rois: usize,
    pub steps: usize,
    pub subjects_per_class: usize,
    /// Connectivity templates per class, indexed by [`Label::index`].
    pub state_graphs: [Vec<Tensor>; 2],
    /// Expected number of regime switches per scan.
    pub switch_rate: f64,
    pub noise_std: f64,
    pub seed: u64,
}

/// Community pairings used by the planted templates: each entry couples two
/// pairs of the four ROI communities.
const PAIRINGS: [[(usize, usize); 2]; 3] = [[(0, 1), (2, 3)], [(0, 2), (1, 3)], [(0, 3), (1, 2)]];

/// `I + separation` on every off-diagonal entry joining ROIs whose
/// communities are paired.
pub fn pairing_template(rois: usize, pairing: usize, separation: f64) -> Tensor {
    let community = |i: usize| (i * 4) / rois;
    let pairs = PAIRINGS[pairing % PAIRINGS.len()];
    let linked = |a: usize, b: usize| a == b || pairs.iter().any(|&(p, q)| (a, b) == (p, q) || (a, b) == (q, p));
    let mut data = vec![0.0; rois * rois];
    for i in 0..rois {
        for j in 0..rois {
            data[i * rois + j] = if i == j {
                1.0
            } else if linked(community(i), community(j)) {
                separation
            } else {
                0.0
            };
        }
    }
    Tensor::new(vec![rois, rois], data).expect("finite template")
}

impl SynthSpec {
    /// Two regimes per class. ASD alternates pairings 0 and 1, TC alternates
    /// 2 and 0, so the classes share one regime and differ in the other.
    pub fn planted(rois: usize, steps: usize, subjects_per_class: usize, separation: f64, seed: u64) -> Self {
        Self {
            rois,
            steps,
            subjects_per_class,
            state_graphs: [
                vec![pairing_template(rois, 0, separation), pairing_template(rois, 1, separation)],
                vec![pairing_template(rois, 2, separation), pairing_template(rois, 0, separation)],
            ],
            switch_rate: 4.0,
            noise_std: 0.3,
            seed,
        }
    }

    /// Both classes share the same templates.
    pub fn null(rois: usize, steps: usize, subjects_per_class: usize, separation: f64, seed: u64) -> Self {
        let templates = vec![pairing_template(rois, 0, separation), pairing_template(rois, 1, separation)];
        Self {
            state_graphs: [templates.clone(), templates],
            ..Self::planted(rois, steps, subjects_per_class, separation, seed)
        }
    }

    /// Desk default: N=16, T=128, 40 subjects per class.
    pub fn default_planted(seed: u64) -> Self {
        Self::planted(16, 128, 40, 0.6, seed)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rois < MIN_ROIS || self.steps < MIN_STEPS || self.subjects_per_class == 0 {
            return Err(Error::Spec(format!(
                "need N ≥ {MIN_ROIS}, T ≥ {MIN_STEPS}, and at least one subject per class"
            )));
        }
        if !(self.switch_rate >= 0.0 && self.switch_rate.is_finite()) || !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Spec("switch_rate and noise_std must be finite and non-negative".into()));
        }
        for graphs in &self.state_graphs {
            if graphs.is_empty() {
                return Err(Error::Spec("every class needs at least one template".into()));
            }
            for c in graphs {
                if c.shape() != [self.rois, self.rois] {
                    return Err(Error::Spec(format!("template shape {:?} does not match N={}", c.shape(), self.rois)));
                }
                for i in 0..self.rois {
                    if c.at2(i, i) != 1.0 {
                        return Err(Error::Spec("templates need a unit diagonal".into()));
                    }
                    for j in 0..i {
                        if c.at2(i, j) != c.at2(j, i) {
                            return Err(Error::Spec("templates must be symmetric".into()));
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Lower Cholesky factor of the nearest PD matrix (eigenvalues clamped).
fn nearest_pd_cholesky(c: &Tensor) -> Result<Tensor> {
    let n = c.shape()[0];
    let m = nalgebra::DMatrix::from_row_slice(n, n, c.data());
    let eig = nalgebra::SymmetricEigen::new(m);
    let floor = 1e-6;
    let vals = eig.eigenvalues.map(|v| v.max(floor));
    let pd = &eig.eigenvectors * nalgebra::DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose();
    let pd = (&pd + pd.transpose()) * 0.5;
    let chol = nalgebra::Cholesky::new(pd).ok_or_else(|| Error::Spec("template is not PD after projection".into()))?;
    let l = chol.l();
    let data = (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).map(|(i, j)| l[(i, j)]).collect();
    Tensor::new(vec![n, n], data)
}

/// Deterministic per-subject generator: seed from the spec, stream from the
/// subject index.
pub fn subject_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Hidden regime sequence with switch probability `rate / (T - 1)` per step.
pub fn regime_sequence<R: Rng + ?Sized>(steps: usize, regimes: usize, switch_rate: f64, rng: &mut R) -> Vec<usize> {
    let p = if steps > 1 { (switch_rate / (steps - 1) as f64).min(1.0) } else { 0.0 };
    let mut current = rng.random_range(0..regimes);
    let mut out = Vec::with_capacity(steps);
    for t in 0..steps {
        if t > 0 && regimes > 1 && rng.random::<f64>() < p {
            let shift = rng.random_range(1..regimes);
            current = (current + shift) % regimes;
        }
        out.push(current);
    }
    out
}

/// Draws every subject. Output order is class-major: all ASD, then all TC.
pub fn synth_generate(spec: &SynthSpec) -> Result<Vec<RoiTimeSeries>> {
    spec.validate()?;
    let factors: Vec<Vec<Tensor>> = spec
        .state_graphs
        .iter()
        .map(|gs| gs.iter().map(nearest_pd_cholesky).collect::<Result<_>>())
        .collect::<Result<_>>()?;
    let (n, t) = (spec.rois, spec.steps);
    let total = 2 * spec.subjects_per_class;
    (0..total)
        .into_par_iter()
        .map(|idx| {
            let label = Label::from_index(idx / spec.subjects_per_class).expect("two classes");
            let ls = &factors[label.index()];
            let mut rng = subject_rng(spec.seed, idx);
            let regimes = regime_sequence(t, ls.len(), spec.switch_rate, &mut rng);
            let mut data = Vec::with_capacity(t * n);
            let mut eps = vec![0.0; n];
            for &r in &regimes {
                for e in eps.iter_mut() {
                    *e = rng.sample(StandardNormal);
                }
                let l = ls[r].data();
                for i in 0..n {
                    let signal: f64 = (0..=i).map(|j| l[i * n + j] * eps[j]).sum();
                    let noise: f64 = rng.sample(StandardNormal);
                    data.push(signal + spec.noise_std * noise);
                }
            }
            Ok(RoiTimeSeries {
                subject_id: format!("sub-{idx:04}"),
                values: Tensor::new(vec![t, n], data)?,
                label: Some(label),
            })
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct DatasetSplit {
    pub train: Vec<RoiTimeSeries>,
    pub test: Vec<RoiTimeSeries>,
    pub seed: u64,
}

/// Stratified subject-level shuffle split.
pub fn split_dataset(subjects: &[RoiTimeSeries], train_fraction: f64, seed: u64) -> Result<DatasetSplit> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Split(format!("train fraction {train_fraction} must be in (0, 1)")));
    }
    if subjects.iter().any(|s| s.label.is_none()) {
        return Err(Error::Split("every subject needs a label to be split".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for label in Label::ALL {
        let mut members: Vec<&RoiTimeSeries> = subjects.iter().filter(|s| s.label == Some(label)).collect();
        if members.len() < 2 {
            return Err(Error::Split(format!("class {label} has {} subjects, need at least 2", members.len())));
        }
        members.shuffle(&mut rng);
        let k = ((members.len() as f64 * train_fraction).round() as usize).clamp(1, members.len() - 1);
        train.extend(members[..k].iter().map(|s| (*s).clone()));
        test.extend(members[k..].iter().map(|s| (*s).clone()));
    }
    Ok(DatasetSplit { train, test, seed })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub subject_id: String,
    pub label: Label,
    pub path: PathBuf,
}

/// Writes one CSV per subject plus `manifest.json` into `dir`.
pub fn write_dataset(dir: &Path, subjects: &[RoiTimeSeries]) -> Result<Vec<ManifestEntry>> {
    fs::create_dir_all(dir)?;
    let mut manifest = Vec::with_capacity(subjects.len());
    for s in subjects {
        let label = s
            .label
            .ok_or_else(|| Error::Content(format!("subject {} has no label", s.subject_id)))?;
        let file = PathBuf::from(format!("{}.csv", s.subject_id));
        write_roi_csv(&dir.join(&file), &s.values)?;
        manifest.push(ManifestEntry {
            subject_id: s.subject_id.clone(),
            label,
            path: file,
        });
    }
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(dir.join("manifest.json"), json + "\n")?;
    Ok(manifest)
}

/// Loads a manifest (a JSON array of entries, or a directory containing
/// `manifest.json`). Relative paths resolve against the manifest's directory.
pub fn load_dataset(path: &Path) -> Result<Vec<RoiTimeSeries>> {
    let manifest_path = if path.is_dir() { path.join("manifest.json") } else { path.to_path_buf() };
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let entries: Vec<ManifestEntry> = serde_json::from_str(&fs::read_to_string(&manifest_path)?)?;
    let mut out = Vec::with_capacity(entries.len());
    let mut shape: Option<usize> = None;
    for e in entries {
        let mut ts = load_roi_csv(&base.join(&e.path))?;
        if *shape.get_or_insert(ts.rois()) != ts.rois() {
            return Err(Error::Content(format!("{}: ROI count differs from earlier subjects", e.subject_id)));
        }
        ts.subject_id = e.subject_id;
        ts.label = Some(e.label);
        out.push(ts);
    }
    Ok(out)
}

/// Upper-triangle Pearson correlations of the columns.
pub fn static_correlation_features(values: &Tensor) -> Vec<f64> {
    let (t, n) = values.dims2().expect("matrix");
    let x = values.data();
    let mean: Vec<f64> = (0..n).map(|j| (0..t).map(|i| x[i * n + j]).sum::<f64>() / t as f64).collect();
    let sd: Vec<f64> = (0..n)
        .map(|j| ((0..t).map(|i| (x[i * n + j] - mean[j]).powi(2)).sum::<f64>()).sqrt())
        .collect();
    let mut out = Vec::with_capacity(n * (n - 1) / 2);
    for a in 0..n {
        for b in a + 1..n {
            let cov: f64 = (0..t).map(|i| (x[i * n + a] - mean[a]) * (x[i * n + b] - mean[b])).sum();
            let denom = sd[a] * sd[b];
            out.push(if denom > 0.0 { cov / denom } else { 0.0 });
        }
    }
    out
}

/// Nearest-class-centroid probe on static correlation features; returns test
/// accuracy. Distance to two centroids is a linear decision rule.
pub fn linear_probe_accuracy(split: &DatasetSplit) -> f64 {
    let feats = |s: &RoiTimeSeries| static_correlation_features(&s.values);
    let mut centroids: [Option<Vec<f64>>; 2] = [None, None];
    for label in Label::ALL {
        let members: Vec<Vec<f64>> = split.train.iter().filter(|s| s.label == Some(label)).map(feats).collect();
        if let Some(first) = members.first() {
            let mut c = vec![0.0; first.len()];
            for m in &members {
                for (ci, v) in c.iter_mut().zip(m) {
                    *ci += v / members.len() as f64;
                }
            }
            centroids[label.index()] = Some(c);
        }
    }
    let [Some(c0), Some(c1)] = centroids else {
        return 0.0;
    };
    let dist = |f: &[f64], c: &[f64]| f.iter().zip(c).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
    let correct = split
        .test
        .iter()
        .filter(|s| {
            let f = feats(s);
            let pred = if dist(&f, &c0) < dist(&f, &c1) { Label::Asd } else { Label::Tc };
            Some(pred) == s.label
        })
        .count();
    correct as f64 / split.test.len().max(1) as f64
}
