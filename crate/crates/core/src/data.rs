//! Derivative datasets collected from randomized open-loop rollouts.
//!
//! Each rollout draws the initial state and constant leader inputs i.i.d.
//! from a box; every interior time point yields one sample per candidate with
//! `ḣ` taken by central differences.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::barriers::{BarrierCandidate, KInfFunction};
use crate::dynamics::{rollout, step_count, Interval, SystemModel};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSample {
    pub hdot: f64,
    /// Stacked states over the candidate's `state_agents`.
    pub x_block: Vec<f64>,
    /// Stacked inputs over the candidate's `input_agents`.
    pub u_block: Vec<f64>,
}

impl DataSample {
    pub fn feature(&self) -> Vec<f64> {
        let mut z = self.x_block.clone();
        z.extend_from_slice(&self.u_block);
        z
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub config_hash: String,
    pub n_sims: usize,
    pub horizon: f64,
    pub dt: f64,
    pub filtered: bool,
    pub reduced_k: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DerivativeDataset {
    pub candidate: BarrierCandidate,
    pub state_dim: usize,
    pub input_dim: usize,
    pub samples: Vec<DataSample>,
    pub provenance: Provenance,
}

impl DerivativeDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn x_len(&self) -> usize {
        self.state_dim * self.candidate.state_agents.len()
    }

    pub fn u_len(&self) -> usize {
        self.input_dim * self.candidate.input_agents.len()
    }

    /// Barrier value at sample `i`, recomputed from its state block.
    pub fn sample_h(&self, i: usize, eps: f64) -> Result<f64> {
        let c = &self.candidate;
        let n = self.state_dim;
        let agents = c.state_agents.last().map_or(0, |a| a + 1);
        let mut x = vec![0.0; agents * n];
        for (slot, &a) in c.state_agents.iter().enumerate() {
            x[a * n..(a + 1) * n].copy_from_slice(&self.samples[i].x_block[slot * n..(slot + 1) * n]);
        }
        c.eval(&x, n, eps)
    }

    pub fn h_values(&self, eps: f64) -> Result<Vec<f64>> {
        (0..self.len()).map(|i| self.sample_h(i, eps)).collect()
    }

    fn with_samples(&self, samples: Vec<DataSample>) -> Self {
        Self {
            candidate: self.candidate.clone(),
            state_dim: self.state_dim,
            input_dim: self.input_dim,
            samples,
            provenance: self.provenance.clone(),
        }
    }
}

/// Parameters of one dataset generation run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerationSpec {
    pub n_sims: usize,
    pub horizon: f64,
    pub dt: f64,
    pub sample_box: Interval,
    pub seed: u64,
}

pub fn central_diff(h_prev: f64, h_next: f64, dt: f64) -> Result<f64> {
    if !(dt > 0.0) {
        return Err(Error::InvalidParameter(format!("dt must be positive, got {dt}")));
    }
    Ok((h_next - h_prev) / (2.0 * dt))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

fn generation_hash<M: SystemModel + ?Sized>(model: &M, candidates: &[BarrierCandidate], spec: &GenerationSpec) -> Result<String> {
    let g = model.graph();
    let doc = serde_json::json!({
        "spec": spec,
        "agents": g.num_agents(),
        "leaders": g.leaders(),
        "edges": g.edges(),
        "state_dim": model.state_dim(),
        "input_dim": model.input_dim(),
        "candidates": candidates.iter().map(|c| c.id()).collect::<Vec<_>>(),
    });
    Ok(sha256_hex(serde_json::to_string(&doc)?.as_bytes()))
}

/// Per-rollout random draw: initial state, then one input per leader in agent order.
pub fn draw_rollout<M: SystemModel + ?Sized>(model: &M, spec: &GenerationSpec, index: usize) -> (Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);
    let b = spec.sample_box;
    let mut draw = || if b.lo == b.hi { b.lo } else { rng.gen_range(b.lo..b.hi) };
    let x0: Vec<f64> = (0..model.stacked_state_len()).map(|_| draw()).collect();
    let m = model.input_dim();
    let mut u = vec![0.0; model.stacked_input_len()];
    for &l in model.graph().leaders() {
        for c in 0..m {
            u[l * m + c] = draw();
        }
    }
    (x0, u)
}

fn rollout_samples<M: SystemModel + ?Sized>(
    model: &M,
    candidates: &[BarrierCandidate],
    spec: &GenerationSpec,
    index: usize,
    eps: f64,
) -> Result<Vec<Vec<DataSample>>> {
    let (n, m) = (model.state_dim(), model.input_dim());
    let (x0, u) = draw_rollout(model, spec, index);
    let traj = rollout(model, &x0, |_| u.clone(), spec.horizon, spec.dt)?;
    let mut out = Vec::with_capacity(candidates.len());
    for c in candidates {
        // ff barriers are undefined where the leaders nearly coincide; those points are skipped
        let h: Vec<Option<f64>> = traj.states.iter().map(|x| c.eval(x, n, eps).ok()).collect();
        let u_block = c.input_block(&u, m);
        let mut samples = Vec::with_capacity(h.len().saturating_sub(2));
        for t in 1..h.len().saturating_sub(1) {
            if let (Some(a), Some(_), Some(b)) = (h[t - 1], h[t], h[t + 1]) {
                samples.push(DataSample {
                    hdot: central_diff(a, b, spec.dt)?,
                    x_block: c.state_block(&traj.states[t], n),
                    u_block: u_block.clone(),
                });
            }
        }
        out.push(samples);
    }
    Ok(out)
}

/// Roll out `spec.n_sims` randomized simulations and build one dataset per candidate.
pub fn generate<M: SystemModel + ?Sized>(
    model: &M,
    candidates: &[BarrierCandidate],
    spec: &GenerationSpec,
    eps: f64,
) -> Result<Vec<DerivativeDataset>> {
    if spec.n_sims == 0 {
        return Err(Error::InvalidParameter("n_sims must be at least 1".into()));
    }
    if !(spec.dt > 0.0) || spec.horizon + 1e-12 < 3.0 * spec.dt {
        return Err(Error::InvalidParameter(format!(
            "horizon {} too short for central differences at dt {}",
            spec.horizon, spec.dt
        )));
    }
    let per_rollout = map_indices(spec.n_sims, |r| rollout_samples(model, candidates, spec, r, eps))?;
    let config_hash = generation_hash(model, candidates, spec)?;
    let interior = step_count(spec.horizon, spec.dt).saturating_sub(1);
    Ok(candidates
        .iter()
        .enumerate()
        .map(|(ci, c)| {
            let mut samples = Vec::with_capacity(spec.n_sims * interior);
            for r in &per_rollout {
                samples.extend(r[ci].iter().cloned());
            }
            DerivativeDataset {
                candidate: c.clone(),
                state_dim: model.state_dim(),
                input_dim: model.input_dim(),
                samples,
                provenance: Provenance {
                    seed: spec.seed,
                    config_hash: config_hash.clone(),
                    n_sims: spec.n_sims,
                    horizon: spec.horizon,
                    dt: spec.dt,
                    filtered: false,
                    reduced_k: None,
                },
            }
        })
        .collect())
}

#[cfg(feature = "parallel")]
pub(crate) fn map_indices<T: Send, F>(count: usize, f: F) -> Result<Vec<T>>
where
    F: Fn(usize) -> Result<T> + Sync + Send,
{
    use rayon::prelude::*;
    (0..count).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub(crate) fn map_indices<T: Send, F>(count: usize, f: F) -> Result<Vec<T>>
where
    F: Fn(usize) -> Result<T> + Sync + Send,
{
    (0..count).map(f).collect()
}

/// Keep samples satisfying `ḣ + α(h) ≥ 0`.
pub fn filter_feasible(ds: &DerivativeDataset, alpha: KInfFunction, h_values: &[f64]) -> Result<DerivativeDataset> {
    if h_values.len() != ds.len() {
        return Err(Error::Dimension(format!(
            "{} h values for {} samples",
            h_values.len(),
            ds.len()
        )));
    }
    let kept = ds
        .samples
        .iter()
        .zip(h_values)
        .filter(|(s, &h)| s.hdot + alpha.alpha(h) >= 0.0)
        .map(|(s, _)| s.clone())
        .collect();
    let mut out = ds.with_samples(kept);
    out.provenance.filtered = true;
    Ok(out)
}

/// [`filter_feasible`] with `h` recomputed from each sample's state block.
pub fn filter_by_barrier(ds: &DerivativeDataset, alpha: KInfFunction, eps: f64) -> Result<DerivativeDataset> {
    filter_feasible(ds, alpha, &ds.h_values(eps)?)
}

/// Row-major feature matrix with a fixed stride.
#[derive(Debug, Clone, PartialEq)]
pub struct Points {
    pub data: Vec<f64>,
    pub dim: usize,
}

impl Points {
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let dim = rows.first().map_or(0, Vec::len);
        Self {
            data: rows.iter().flat_map(|r| r.iter().copied()).collect(),
            dim,
        }
    }

    pub fn len(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.data.len() / self.dim
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// k-means++ seeding; returns the indices of the chosen initial centers.
pub fn kmeans_pp_init(points: &Points, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = points.len();
    let mut centers = Vec::with_capacity(k);
    if n == 0 || k == 0 {
        return centers;
    }
    centers.push(rng.gen_range(0..n));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(points.row(i), points.row(centers[0]))).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let r = rng.gen::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &w) in d2.iter().enumerate() {
                acc += w;
                if acc > r && w > 0.0 {
                    pick = Some(i);
                    break;
                }
            }
            // rounding can leave r at the very top of the cumulative sum
            pick.unwrap_or_else(|| d2.iter().rposition(|&w| w > 0.0).unwrap_or(0))
        } else {
            rng.gen_range(0..n)
        };
        centers.push(next);
        let c = points.row(next).to_vec();
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(points.row(i), &c));
        }
    }
    centers
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub assignment: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub iterations: usize,
}

pub const LLOYD_MAX_ITERS: usize = 300;

/// Lloyd iterations from the given initial centroids. Ties go to the lowest
/// centroid index; empty clusters keep their previous centroid.
///
/// Distance bounds (Hamerly) skip points whose centroid is provably the
/// strict nearest, so the assignments match plain Lloyd.
pub fn lloyd(points: &Points, init: Vec<Vec<f64>>, max_iters: usize) -> KMeansResult {
    // relative slack so rounding in the bounds never skips a tie
    const MARGIN: f64 = 1e-9;
    let n = points.len();
    let d = points.dim;
    let k = init.len();
    let mut centroids = init;
    let mut assignment = vec![usize::MAX; n];
    let mut upper = vec![f64::INFINITY; n];
    let mut lower = vec![0.0f64; n];
    let mut half_gap = vec![0.0f64; k];
    let mut iterations = 0;
    for _ in 0..max_iters.max(1) {
        iterations += 1;
        for c in 0..k {
            half_gap[c] = 0.5
                * (0..k)
                    .filter(|&o| o != c)
                    .map(|o| sq_dist(&centroids[c], &centroids[o]).sqrt())
                    .fold(f64::INFINITY, f64::min);
        }
        let mut changed = false;
        for i in 0..n {
            let p = points.row(i);
            let a = assignment[i];
            if a != usize::MAX {
                let bound = half_gap[a].max(lower[i]);
                if upper[i] * (1.0 + MARGIN) < bound {
                    continue;
                }
                upper[i] = sq_dist(p, &centroids[a]).sqrt();
                if upper[i] * (1.0 + MARGIN) < bound {
                    continue;
                }
            }
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            let mut second_d = f64::INFINITY;
            for (c, cen) in centroids.iter().enumerate() {
                let dist = sq_dist(p, cen);
                if dist < best_d {
                    second_d = best_d;
                    best_d = dist;
                    best = c;
                } else if dist < second_d {
                    second_d = dist;
                }
            }
            upper[i] = best_d.sqrt();
            lower[i] = second_d.sqrt();
            if a != best {
                assignment[i] = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for (i, &a) in assignment.iter().enumerate() {
            counts[a] += 1;
            sums[a].iter_mut().zip(points.row(i)).for_each(|(s, v)| *s += v);
        }
        let mut shift = vec![0.0f64; k];
        for c in 0..k {
            if counts[c] > 0 {
                let next: Vec<f64> = sums[c].iter().map(|s| s / counts[c] as f64).collect();
                shift[c] = sq_dist(&next, &centroids[c]).sqrt();
                centroids[c] = next;
            }
        }
        // largest shift, and the largest among the other centroids
        let top = (0..k).fold(0, |b, c| if shift[c] > shift[b] { c } else { b });
        let runner_up = (0..k).filter(|&c| c != top).map(|c| shift[c]).fold(0.0, f64::max);
        for i in 0..n {
            let a = assignment[i];
            upper[i] += shift[a];
            lower[i] -= if a == top { runner_up } else { shift[top] };
        }
    }
    KMeansResult {
        assignment,
        centroids,
        iterations,
    }
}

/// Cluster the `(x_block, u_block)` features and keep, per non-empty cluster,
/// the member nearest its centroid. Output preserves the original sample order.
pub fn kmeans_reduce(ds: &DerivativeDataset, k: usize, seed: u64) -> Result<DerivativeDataset> {
    if k == 0 {
        return Err(Error::InvalidParameter("k must be at least 1".into()));
    }
    if k > ds.len() {
        return Err(Error::NotEnoughSamples {
            needed: k,
            have: ds.len(),
        });
    }
    let points = Points::from_rows(&ds.samples.iter().map(DataSample::feature).collect::<Vec<_>>());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let init = kmeans_pp_init(&points, k, &mut rng);
    let km = lloyd(&points, init.iter().map(|&i| points.row(i).to_vec()).collect(), LLOYD_MAX_ITERS);
    let mut best: Vec<Option<(f64, usize)>> = vec![None; k];
    for (i, &a) in km.assignment.iter().enumerate() {
        let dist = sq_dist(points.row(i), &km.centroids[a]);
        if best[a].map_or(true, |(bd, _)| dist < bd) {
            best[a] = Some((dist, i));
        }
    }
    let mut keep: Vec<usize> = best.into_iter().flatten().map(|(_, i)| i).collect();
    keep.sort_unstable();
    let mut out = ds.with_samples(keep.into_iter().map(|i| ds.samples[i].clone()).collect());
    out.provenance.reduced_k = Some(k);
    Ok(out)
}

/// Sidecar metadata written next to a dataset CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub candidate: BarrierCandidate,
    pub state_dim: usize,
    pub input_dim: usize,
    pub num_samples: usize,
    pub provenance: Provenance,
    pub csv_sha256: String,
}

pub fn csv_header(ds: &DerivativeDataset) -> Vec<String> {
    let mut h = vec!["hdot".to_string()];
    for &a in &ds.candidate.state_agents {
        h.extend((0..ds.state_dim).map(|d| format!("x_{a}_{d}")));
    }
    for &a in &ds.candidate.input_agents {
        h.extend((0..ds.input_dim).map(|d| format!("u_{a}_{d}")));
    }
    h
}

pub fn write_csv<W: Write>(ds: &DerivativeDataset, w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(csv_header(ds))?;
    for s in &ds.samples {
        let row = std::iter::once(s.hdot).chain(s.x_block.iter().copied()).chain(s.u_block.iter().copied());
        out.write_record(row.map(|v| v.to_string()))?;
    }
    out.flush()?;
    Ok(())
}

/// Parse samples written by [`write_csv`]; the header must match the manifest.
pub fn read_csv<R: Read>(manifest: &DatasetManifest, r: R) -> Result<DerivativeDataset> {
    let mut ds = DerivativeDataset {
        candidate: manifest.candidate.clone(),
        state_dim: manifest.state_dim,
        input_dim: manifest.input_dim,
        samples: Vec::new(),
        provenance: manifest.provenance.clone(),
    };
    let mut rdr = csv::Reader::from_reader(r);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header != csv_header(&ds) {
        return Err(Error::Config(format!(
            "dataset header does not match candidate {}",
            ds.candidate.id()
        )));
    }
    let (nx, nu) = (ds.x_len(), ds.u_len());
    for rec in rdr.records() {
        let rec = rec?;
        let vals = rec
            .iter()
            .map(|s| s.parse::<f64>().map_err(|e| Error::Config(format!("bad number {s:?}: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        if vals.len() != 1 + nx + nu {
            return Err(Error::Dimension(format!("row has {} fields, expected {}", vals.len(), 1 + nx + nu)));
        }
        ds.samples.push(DataSample {
            hdot: vals[0],
            x_block: vals[1..1 + nx].to_vec(),
            u_block: vals[1 + nx..].to_vec(),
        });
    }
    if ds.len() != manifest.num_samples {
        return Err(Error::Config(format!(
            "manifest lists {} samples, file has {}",
            manifest.num_samples,
            ds.len()
        )));
    }
    Ok(ds)
}

pub fn dataset_paths(dir: &Path, id: &str) -> (PathBuf, PathBuf) {
    (dir.join(format!("{id}.csv")), dir.join(format!("{id}.json")))
}

/// Write `<dir>/<id>.csv` and `<dir>/<id>.json`.
pub fn save(ds: &DerivativeDataset, dir: &Path) -> Result<(PathBuf, PathBuf)> {
    fs::create_dir_all(dir)?;
    let mut buf = Vec::new();
    write_csv(ds, &mut buf)?;
    let manifest = DatasetManifest {
        candidate: ds.candidate.clone(),
        state_dim: ds.state_dim,
        input_dim: ds.input_dim,
        num_samples: ds.len(),
        provenance: ds.provenance.clone(),
        csv_sha256: sha256_hex(&buf),
    };
    let (csv_path, json_path) = dataset_paths(dir, &ds.candidate.id());
    fs::write(&csv_path, &buf)?;
    fs::write(&json_path, serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok((csv_path, json_path))
}

pub fn load(dir: &Path, id: &str) -> Result<DerivativeDataset> {
    let (csv_path, json_path) = dataset_paths(dir, id);
    if !csv_path.exists() || !json_path.exists() {
        return Err(Error::Config(format!(
            "missing dataset for candidate {id} in {}",
            dir.display()
        )));
    }
    let manifest: DatasetManifest = serde_json::from_str(&fs::read_to_string(&json_path)?)?;
    let bytes = fs::read(&csv_path)?;
    if sha256_hex(&bytes) != manifest.csv_sha256 {
        return Err(Error::Config(format!("dataset {id} does not match its manifest checksum")));
    }
    read_csv(&manifest, bytes.as_slice())
}
