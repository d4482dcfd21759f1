//! City graphs, mobility matrices, and the synthetic twin-city generator.
//!
//! A city is a set of regions with a symmetric spatial adjacency and a
//! row-stochastic mobility matrix built from origin/destination trip counts.
//! The twin-city generator produces source/target pairs that share latent
//! region semantics under a known permutation, so correspondence quality can
//! be scored against ground truth.

use crate::{Result, Scalar, ScotError};
use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

/// Per-row count scale used when quantizing generated mobility to integer
/// trips. Rows built by the generator sum to exactly this many trips, which
/// makes the written `trips.csv` reproduce the in-memory mobility bit for bit.
const TRIP_SCALE: f64 = 1e6;

/// A city's regions, spatial adjacency, and row-stochastic mobility.
#[derive(Debug, Clone)]
pub struct CityGraph<F> {
    pub city_id: String,
    /// Region count.
    pub n: usize,
    /// Symmetric 0/1 matrix with zero diagonal.
    pub adjacency: Array2<F>,
    /// Row-stochastic matrix; every row sums to 1 within 1e-9.
    pub mobility: Array2<F>,
    /// Optional task name -> length-n label vector.
    pub labels: BTreeMap<String, Array1<F>>,
}

impl<F: Scalar> CityGraph<F> {
    /// Checks the structural invariants: symmetric hollow adjacency and
    /// row-stochastic mobility with entries in [0, 1].
    pub fn validate(&self) -> Result<()> {
        let n = self.n;
        if n == 0 {
            return Err(ScotError::Input("city has zero regions".into()));
        }
        if self.adjacency.dim() != (n, n) || self.mobility.dim() != (n, n) {
            return Err(ScotError::Input(format!(
                "city {}: matrix shapes do not match n={}",
                self.city_id, n
            )));
        }
        let tol = F::from(1e-9).unwrap();
        for i in 0..n {
            if self.adjacency[[i, i]] != F::zero() {
                return Err(ScotError::Input(format!(
                    "city {}: adjacency has a self-loop at region {}",
                    self.city_id, i
                )));
            }
            let mut row_sum = F::zero();
            for j in 0..n {
                if self.adjacency[[i, j]] != self.adjacency[[j, i]] {
                    return Err(ScotError::Input(format!(
                        "city {}: adjacency not symmetric at ({}, {})",
                        self.city_id, i, j
                    )));
                }
                let m = self.mobility[[i, j]];
                if m < F::zero() || m > F::one() {
                    return Err(ScotError::Input(format!(
                        "city {}: mobility[{}][{}] = {} outside [0, 1]",
                        self.city_id, i, j, m
                    )));
                }
                row_sum += m;
            }
            if (row_sum - F::one()).abs() > tol {
                return Err(ScotError::Input(format!(
                    "city {}: mobility row {} sums to {}",
                    self.city_id, i, row_sum
                )));
            }
        }
        for (task, y) in &self.labels {
            if y.len() != n {
                return Err(ScotError::Input(format!(
                    "city {}: label {} has length {} != {}",
                    self.city_id,
                    task,
                    y.len(),
                    n
                )));
            }
        }
        Ok(())
    }
}

/// Raw origin/destination trip counts.
#[derive(Debug, Clone, Default)]
pub struct TripTable {
    /// (origin, dest, count) triples; indices must lie in [0, n).
    pub records: Vec<(usize, usize, u64)>,
}

/// A generated source/target pair with ground-truth correspondence.
#[derive(Debug, Clone)]
pub struct TwinCityTruth<F> {
    pub source: CityGraph<F>,
    pub target: CityGraph<F>,
    /// For each source region, the matched target region, or `None` for
    /// unmatched/dropped regions.
    pub true_match: Vec<Option<usize>>,
    /// Latent vectors the source city was built from (one row per region).
    pub source_latents: Array2<F>,
    /// Latent vectors the target city was built from.
    pub target_latents: Array2<F>,
}

impl<F: Scalar> TwinCityTruth<F> {
    /// Checks that matched indices are valid and the matching is injective.
    pub fn validate(&self) -> Result<()> {
        if self.true_match.len() != self.source.n {
            return Err(ScotError::Input(format!(
                "true_match length {} != source regions {}",
                self.true_match.len(),
                self.source.n
            )));
        }
        let mut seen = vec![false; self.target.n];
        for (i, m) in self.true_match.iter().enumerate() {
            if let Some(j) = m {
                if *j >= self.target.n {
                    return Err(ScotError::Input(format!(
                        "true_match[{}] = {} out of target range",
                        i, j
                    )));
                }
                if seen[*j] {
                    return Err(ScotError::Input(format!(
                        "true_match maps two source regions to target {}",
                        j
                    )));
                }
                seen[*j] = true;
            }
        }
        Ok(())
    }
}

/// Builds a row-stochastic mobility matrix from trip counts.
///
/// `M[i][j] = count(i -> j) / total(i)`; rows with no outgoing trips become
/// uniform `1/n` so the result is always row-stochastic.
pub fn build_mobility<F: Scalar>(trips: &TripTable, n: usize) -> Result<Array2<F>> {
    if n == 0 {
        return Err(ScotError::Input("region count must be at least 1".into()));
    }
    let mut counts = Array2::<f64>::zeros((n, n));
    for &(i, j, c) in &trips.records {
        if i >= n || j >= n {
            return Err(ScotError::Input(format!(
                "trip ({}, {}) out of range for n = {}",
                i, j, n
            )));
        }
        counts[[i, j]] += c as f64;
    }
    let mut m = Array2::<F>::zeros((n, n));
    for i in 0..n {
        let total: f64 = (0..n).map(|j| counts[[i, j]]).sum();
        if total == 0.0 {
            let unif = F::one() / F::from(n).unwrap();
            for j in 0..n {
                m[[i, j]] = unif;
            }
        } else {
            for j in 0..n {
                m[[i, j]] = F::from(counts[[i, j]] / total).unwrap();
            }
        }
    }
    Ok(m)
}

fn parse_field<T: std::str::FromStr>(
    raw: &str,
    path: &Path,
    line: usize,
    what: &str,
) -> Result<T> {
    raw.trim().parse().map_err(|_| ScotError::Parse {
        file: path.to_path_buf(),
        line,
        msg: format!("cannot parse {} from {:?}", what, raw),
    })
}

fn record_line(record: &csv::StringRecord) -> usize {
    record.position().map(|p| p.line() as usize).unwrap_or(0)
}

fn open_csv(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    if !path.is_file() {
        return Err(ScotError::NotFound(path.to_path_buf()));
    }
    csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| ScotError::Parse {
            file: path.to_path_buf(),
            line: 0,
            msg: e.to_string(),
        })
}

/// Loads a city from a directory holding `edges.csv` (header `i,j`),
/// `trips.csv` (header `origin,dest,count`), and optionally `labels.csv`
/// (header `region_id,<task>...`).
///
/// The region count is the `labels.csv` row count when present, otherwise
/// one past the largest index seen in the edge and trip files. The edge list
/// is undirected and gets symmetrized; self-loops are rejected.
pub fn load_city<F: Scalar>(dir: &Path) -> Result<CityGraph<F>> {
    if !dir.is_dir() {
        return Err(ScotError::NotFound(dir.to_path_buf()));
    }
    let edges_path = dir.join("edges.csv");
    let trips_path = dir.join("trips.csv");
    let labels_path = dir.join("labels.csv");

    let mut edges: Vec<(usize, usize)> = Vec::new();
    let mut rdr = open_csv(&edges_path)?;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| ScotError::Parse {
            file: edges_path.clone(),
            line: 0,
            msg: e.to_string(),
        })?;
        let line = record_line(&rec);
        if rec.len() != 2 {
            return Err(ScotError::Parse {
                file: edges_path.clone(),
                line,
                msg: format!("expected 2 fields, got {}", rec.len()),
            });
        }
        let i: usize = parse_field(&rec[0], &edges_path, line, "region index")?;
        let j: usize = parse_field(&rec[1], &edges_path, line, "region index")?;
        if i == j {
            return Err(ScotError::Parse {
                file: edges_path.clone(),
                line,
                msg: format!("self-loop edge ({}, {}) is not allowed", i, j),
            });
        }
        edges.push((i, j));
    }

    let mut trips = TripTable::default();
    let mut rdr = open_csv(&trips_path)?;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| ScotError::Parse {
            file: trips_path.clone(),
            line: 0,
            msg: e.to_string(),
        })?;
        let line = record_line(&rec);
        if rec.len() != 3 {
            return Err(ScotError::Parse {
                file: trips_path.clone(),
                line,
                msg: format!("expected 3 fields, got {}", rec.len()),
            });
        }
        let o: usize = parse_field(&rec[0], &trips_path, line, "origin index")?;
        let d: usize = parse_field(&rec[1], &trips_path, line, "dest index")?;
        let c: u64 = parse_field(&rec[2], &trips_path, line, "trip count")?;
        trips.records.push((o, d, c));
    }

    let mut labels: BTreeMap<String, Vec<F>> = BTreeMap::new();
    let mut label_rows = 0usize;
    if labels_path.is_file() {
        let mut rdr = open_csv(&labels_path)?;
        let tasks: Vec<String> = {
            let headers = rdr.headers().map_err(|e| ScotError::Parse {
                file: labels_path.clone(),
                line: 1,
                msg: e.to_string(),
            })?;
            if headers.len() < 2 || &headers[0] != "region_id" {
                return Err(ScotError::Parse {
                    file: labels_path.clone(),
                    line: 1,
                    msg: "expected header region_id,<task>...".into(),
                });
            }
            headers.iter().skip(1).map(str::to_owned).collect()
        };
        for task in &tasks {
            labels.insert(task.clone(), Vec::new());
        }
        for rec in rdr.records() {
            let rec = rec.map_err(|e| ScotError::Parse {
                file: labels_path.clone(),
                line: 0,
                msg: e.to_string(),
            })?;
            let line = record_line(&rec);
            if rec.len() != tasks.len() + 1 {
                return Err(ScotError::Parse {
                    file: labels_path.clone(),
                    line,
                    msg: format!("expected {} fields, got {}", tasks.len() + 1, rec.len()),
                });
            }
            let rid: usize = parse_field(&rec[0], &labels_path, line, "region_id")?;
            if rid != label_rows {
                return Err(ScotError::Parse {
                    file: labels_path.clone(),
                    line,
                    msg: format!("region_id {} out of order (expected {})", rid, label_rows),
                });
            }
            for (t, task) in tasks.iter().enumerate() {
                let v: f64 = parse_field(&rec[t + 1], &labels_path, line, "label value")?;
                labels.get_mut(task).unwrap().push(F::from(v).unwrap());
            }
            label_rows += 1;
        }
    }

    let n = if label_rows > 0 {
        label_rows
    } else {
        let max_idx = edges
            .iter()
            .flat_map(|&(i, j)| [i, j])
            .chain(trips.records.iter().flat_map(|&(o, d, _)| [o, d]))
            .max();
        match max_idx {
            Some(m) => m + 1,
            None => {
                return Err(ScotError::Parse {
                    file: edges_path.clone(),
                    line: 0,
                    msg: "cannot infer region count from empty files".into(),
                })
            }
        }
    };

    let mut adjacency = Array2::<F>::zeros((n, n));
    for (i, j) in edges {
        if i >= n || j >= n {
            return Err(ScotError::Parse {
                file: edges_path.clone(),
                line: 0,
                msg: format!("edge ({}, {}) out of range for n = {}", i, j, n),
            });
        }
        adjacency[[i, j]] = F::one();
        adjacency[[j, i]] = F::one();
    }

    let mobility = build_mobility::<F>(&trips, n)?;
    let city = CityGraph {
        city_id: dir
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "city".into()),
        n,
        adjacency,
        mobility,
        labels: labels
            .into_iter()
            .map(|(k, v)| (k, Array1::from_vec(v)))
            .collect(),
    };
    city.validate()?;
    Ok(city)
}

/// Writes a city directory in the layout `load_city` reads.
///
/// Trip counts are recovered as `round(mobility * 1e6)`, which is exact for
/// generated cities (whose rows were quantized to that scale) and a faithful
/// rational approximation otherwise.
pub fn write_city<F: Scalar>(city: &CityGraph<F>, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut edges = String::from("i,j\n");
    for i in 0..city.n {
        for j in (i + 1)..city.n {
            if city.adjacency[[i, j]] != F::zero() {
                writeln!(edges, "{},{}", i, j).unwrap();
            }
        }
    }
    std::fs::write(dir.join("edges.csv"), edges)?;

    let mut trips = String::from("origin,dest,count\n");
    for i in 0..city.n {
        for j in 0..city.n {
            let c = (city.mobility[[i, j]].to_f64().unwrap() * TRIP_SCALE).round() as u64;
            if c > 0 {
                writeln!(trips, "{},{},{}", i, j, c).unwrap();
            }
        }
    }
    std::fs::write(dir.join("trips.csv"), trips)?;

    if !city.labels.is_empty() {
        let mut out = String::from("region_id");
        for task in city.labels.keys() {
            write!(out, ",{}", task).unwrap();
        }
        out.push('\n');
        for i in 0..city.n {
            write!(out, "{}", i).unwrap();
            for y in city.labels.values() {
                write!(out, ",{}", y[i]).unwrap();
            }
            out.push('\n');
        }
        std::fs::write(dir.join("labels.csv"), out)?;
    }
    Ok(())
}

/// Nearest-neighbor count used for generated graphs.
fn knn_count(n: usize) -> usize {
    (n / 10).max(3).min(n - 1)
}

/// Splits a probability row into integer counts summing to exactly
/// `TRIP_SCALE`, by largest remainder.
fn quantize_row(probs: &[(usize, f64)]) -> Vec<(usize, u64)> {
    let scale = TRIP_SCALE;
    let mut base: Vec<(usize, u64, f64)> = probs
        .iter()
        .map(|&(j, p)| {
            let exact = p * scale;
            let fl = exact.floor();
            (j, fl as u64, exact - fl)
        })
        .collect();
    let assigned: u64 = base.iter().map(|&(_, c, _)| c).sum();
    let mut leftover = scale as u64 - assigned;
    // Hand out the remainder to the largest fractional parts, ties by index.
    let mut order: Vec<usize> = (0..base.len()).collect();
    order.sort_by(|&a, &b| {
        base[b].2.partial_cmp(&base[a].2).unwrap().then(base[a].0.cmp(&base[b].0))
    });
    for idx in order {
        if leftover == 0 {
            break;
        }
        base[idx].1 += 1;
        leftover -= 1;
    }
    base.into_iter().map(|(j, c, _)| (j, c)).collect()
}

/// Builds one city (adjacency, mobility, labels) from latent region vectors.
fn city_from_latents<F: Scalar>(
    city_id: &str,
    latents: &Array2<f64>,
    label_fns: &[(String, Array1<f64>)],
    label_noise: &Array2<f64>,
) -> Result<CityGraph<F>> {
    let n = latents.nrows();
    let k = knn_count(n);

    // Pairwise squared latent distances.
    let mut d2 = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in (i + 1)..n {
            let dist: f64 = latents
                .row(i)
                .iter()
                .zip(latents.row(j).iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            d2[[i, j]] = dist;
            d2[[j, i]] = dist;
        }
    }

    let mut adjacency = Array2::<F>::zeros((n, n));
    let mut trips = TripTable::default();
    for i in 0..n {
        let mut order: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        order.sort_by(|&a, &b| d2[[i, a]].partial_cmp(&d2[[i, b]]).unwrap().then(a.cmp(&b)));
        let neighbors = &order[..k];
        for &j in neighbors {
            adjacency[[i, j]] = F::one();
            adjacency[[j, i]] = F::one();
        }
        // Destination distribution: Gaussian kernel on latent distance,
        // restricted to the nearest neighbors.
        let max_neg = neighbors
            .iter()
            .map(|&j| -d2[[i, j]] / 2.0)
            .fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<(usize, f64)> = neighbors
            .iter()
            .map(|&j| (j, ((-d2[[i, j]] / 2.0) - max_neg).exp()))
            .collect();
        let total: f64 = weights.iter().map(|&(_, w)| w).sum();
        let probs: Vec<(usize, f64)> = weights.into_iter().map(|(j, w)| (j, w / total)).collect();
        for (j, c) in quantize_row(&probs) {
            if c > 0 {
                trips.records.push((i, j, c));
            }
        }
    }

    let mobility = build_mobility::<F>(&trips, n)?;
    let mut labels = BTreeMap::new();
    for (t, (task, w)) in label_fns.iter().enumerate() {
        let mut y = Array1::<F>::zeros(n);
        for i in 0..n {
            let v: f64 = latents.row(i).dot(w) + label_noise[[t, i]];
            y[i] = F::from(v).unwrap();
        }
        labels.insert(task.clone(), y);
    }

    let city = CityGraph {
        city_id: city_id.to_string(),
        n,
        adjacency,
        mobility,
        labels,
    };
    city.validate()?;
    Ok(city)
}

/// Generates a synthetic twin-city pair with known correspondence.
///
/// Latent region vectors are drawn from a mixture of 4 spherical Gaussian
/// clusters. The source takes the first `n_s` vectors; the target takes a
/// random permutation of `n_t` of them plus `N(0, noise_sigma^2)` noise.
/// Each city's mobility and adjacency come from its own latents via a
/// nearest-neighbor Gaussian kernel, and labels are a fixed linear functional
/// of the latents (identical for both cities) plus noise of the same sigma.
/// `drop_frac` of the smaller side is removed from the match set.
///
/// Deterministic: equal arguments give identical output.
pub fn gen_twin_cities<F: Scalar>(
    seed: u64,
    n_s: usize,
    n_t: usize,
    d_latent: usize,
    noise_sigma: f64,
    drop_frac: f64,
) -> Result<TwinCityTruth<F>> {
    if n_s < 4 || n_t < 4 {
        return Err(ScotError::Input(format!(
            "need at least 4 regions per city, got n_s = {}, n_t = {}",
            n_s, n_t
        )));
    }
    if d_latent == 0 {
        return Err(ScotError::Input("d_latent must be at least 1".into()));
    }
    if !(0.0..1.0).contains(&drop_frac) {
        return Err(ScotError::Input(format!(
            "drop_frac must lie in [0, 1), got {}",
            drop_frac
        )));
    }
    if noise_sigma < 0.0 {
        return Err(ScotError::Input(format!(
            "noise_sigma must be nonnegative, got {}",
            noise_sigma
        )));
    }

    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let mut sub = || ChaCha8Rng::seed_from_u64(master.random::<u64>());
    let mut latent_rng = sub();
    let mut perm_rng = sub();
    let mut noise_rng = sub();
    let mut label_rng = sub();
    let mut drop_rng = sub();

    let n_max = n_s.max(n_t);
    const CLUSTERS: usize = 4;
    const CENTER_SCALE: f64 = 2.0;
    const CLUSTER_SPREAD: f64 = 0.5;

    let mut centers = Array2::<f64>::zeros((CLUSTERS, d_latent));
    for c in 0..CLUSTERS {
        for d in 0..d_latent {
            let g: f64 = latent_rng.sample(StandardNormal);
            centers[[c, d]] = CENTER_SCALE * g;
        }
    }
    let mut latents = Array2::<f64>::zeros((n_max, d_latent));
    for i in 0..n_max {
        let c = latent_rng.random_range(0..CLUSTERS);
        for d in 0..d_latent {
            let g: f64 = latent_rng.sample(StandardNormal);
            latents[[i, d]] = centers[[c, d]] + CLUSTER_SPREAD * g;
        }
    }

    // Target holds latent perm[p] at position p, for the first n_t of a
    // random permutation of all n_max latents.
    let mut perm: Vec<usize> = (0..n_max).collect();
    perm.shuffle(&mut perm_rng);
    let mut target_latents = Array2::<f64>::zeros((n_t, d_latent));
    for p in 0..n_t {
        for d in 0..d_latent {
            let g: f64 = noise_rng.sample(StandardNormal);
            target_latents[[p, d]] = latents[[perm[p], d]] + noise_sigma * g;
        }
    }
    let source_latents = latents.slice(ndarray::s![..n_s, ..]).to_owned();

    let mut true_match: Vec<Option<usize>> = vec![None; n_s];
    for p in 0..n_t {
        if perm[p] < n_s {
            true_match[perm[p]] = Some(p);
        }
    }

    let tasks = ["gdp", "pop", "co2"];
    let mut label_fns: Vec<(String, Array1<f64>)> = Vec::new();
    for task in tasks {
        let mut w = Array1::<f64>::zeros(d_latent);
        for d in 0..d_latent {
            w[d] = label_rng.sample::<f64, _>(StandardNormal);
        }
        label_fns.push((task.to_string(), w));
    }
    let mut source_label_noise = Array2::<f64>::zeros((tasks.len(), n_s));
    for t in 0..tasks.len() {
        for i in 0..n_s {
            let g: f64 = label_rng.sample(StandardNormal);
            source_label_noise[[t, i]] = noise_sigma * g;
        }
    }
    let mut target_label_noise = Array2::<f64>::zeros((tasks.len(), n_t));
    for t in 0..tasks.len() {
        for i in 0..n_t {
            let g: f64 = label_rng.sample(StandardNormal);
            target_label_noise[[t, i]] = noise_sigma * g;
        }
    }

    let source = city_from_latents("source", &source_latents, &label_fns, &source_label_noise)?;
    let target = city_from_latents("target", &target_latents, &label_fns, &target_label_noise)?;

    // Drop a fraction of the smaller side from the match set.
    let drop_count =
        ((drop_frac * n_s.min(n_t) as f64).floor() as usize).min(true_match.iter().flatten().count());
    if drop_count > 0 {
        let mut matched: Vec<usize> = (0..n_s).filter(|&i| true_match[i].is_some()).collect();
        matched.shuffle(&mut drop_rng);
        for &i in &matched[..drop_count] {
            true_match[i] = None;
        }
    }

    let cast = |a: &Array2<f64>| a.mapv(|x| F::from(x).unwrap());
    let truth = TwinCityTruth {
        source,
        target,
        true_match,
        source_latents: cast(&source_latents),
        target_latents: cast(&target_latents),
    };
    truth.validate()?;
    Ok(truth)
}

/// Writes `truth.csv` (`source_id,target_id`, sentinel -1 for unmatched).
pub fn write_truth(true_match: &[Option<usize>], path: &Path) -> Result<()> {
    let mut out = String::from("source_id,target_id\n");
    for (i, m) in true_match.iter().enumerate() {
        match m {
            Some(j) => writeln!(out, "{},{}", i, j).unwrap(),
            None => writeln!(out, "{},-1", i).unwrap(),
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Reads a `truth.csv` written by [`write_truth`].
pub fn load_truth(path: &Path) -> Result<Vec<Option<usize>>> {
    let mut rdr = open_csv(path)?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| ScotError::Parse {
            file: path.to_path_buf(),
            line: 0,
            msg: e.to_string(),
        })?;
        let line = record_line(&rec);
        let i: usize = parse_field(&rec[0], path, line, "source_id")?;
        if i != out.len() {
            return Err(ScotError::Parse {
                file: path.to_path_buf(),
                line,
                msg: format!("source_id {} out of order", i),
            });
        }
        let j: i64 = parse_field(&rec[1], path, line, "target_id")?;
        out.push(if j < 0 { None } else { Some(j as usize) });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn trips(records: &[(usize, usize, u64)]) -> TripTable {
        TripTable {
            records: records.to_vec(),
        }
    }

    #[test]
    fn build_mobility_normalizes_rows() {
        let m = build_mobility::<f64>(&trips(&[(0, 1, 3), (0, 2, 1)]), 3).unwrap();
        assert_eq!(m.row(0).to_vec(), vec![0.0, 0.75, 0.25]);
    }

    #[test]
    fn build_mobility_zero_trip_rows_become_uniform() {
        let m = build_mobility::<f64>(&trips(&[]), 2).unwrap();
        assert_eq!(m, ndarray::arr2(&[[0.5, 0.5], [0.5, 0.5]]));
    }

    #[test]
    fn build_mobility_single_row_oracle() {
        // Hand-computed: row 1 fully to region 0, row 0 falls back to uniform.
        let m = build_mobility::<f64>(&trips(&[(1, 0, 5)]), 2).unwrap();
        assert_eq!(m.row(1).to_vec(), vec![1.0, 0.0]);
        assert_eq!(m.row(0).to_vec(), vec![0.5, 0.5]);
    }

    #[test]
    fn build_mobility_rejects_bad_input() {
        assert!(build_mobility::<f64>(&trips(&[(0, 3, 1)]), 3).is_err());
        assert!(build_mobility::<f64>(&trips(&[]), 0).is_err());
    }

    proptest! {
        #[test]
        fn build_mobility_always_row_stochastic(
            recs in proptest::collection::vec((0usize..6, 0usize..6, 0u64..100), 0..20)
        ) {
            let m = build_mobility::<f64>(&trips(&recs), 6).unwrap();
            for i in 0..6 {
                let s: f64 = m.row(i).sum();
                prop_assert!((s - 1.0).abs() < 1e-9);
            }
        }
    }

    fn write_fixture(dir: &Path, edges: &str, trips: &str, labels: Option<&str>) {
        std::fs::write(dir.join("edges.csv"), edges).unwrap();
        std::fs::write(dir.join("trips.csv"), trips).unwrap();
        if let Some(l) = labels {
            std::fs::write(dir.join("labels.csv"), l).unwrap();
        }
    }

    #[test]
    fn load_city_symmetrizes_edges() {
        let tmp = tempfile::tempdir().unwrap();
        write_fixture(
            tmp.path(),
            "i,j\n0,1\n",
            "origin,dest,count\n0,1,2\n",
            Some("region_id,gdp\n0,1.0\n1,2.0\n2,3.0\n"),
        );
        let city = load_city::<f64>(tmp.path()).unwrap();
        assert_eq!(city.n, 3);
        assert_eq!(city.adjacency[[0, 1]], 1.0);
        assert_eq!(city.adjacency[[1, 0]], 1.0);
        assert_eq!(city.adjacency.sum(), 2.0);
    }

    #[test]
    fn load_city_applies_uniform_fallback() {
        let tmp = tempfile::tempdir().unwrap();
        write_fixture(
            tmp.path(),
            "i,j\n0,1\n0,2\n",
            "origin,dest,count\n0,1,3\n0,2,1\n",
            Some("region_id,gdp\n0,1.0\n1,2.0\n2,3.0\n"),
        );
        let city = load_city::<f64>(tmp.path()).unwrap();
        assert_eq!(city.mobility.row(0).to_vec(), vec![0.0, 0.75, 0.25]);
        for i in 1..3 {
            for j in 0..3 {
                assert_abs_diff_eq!(city.mobility[[i, j]], 1.0 / 3.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn load_city_reads_labels() {
        let tmp = tempfile::tempdir().unwrap();
        write_fixture(
            tmp.path(),
            "i,j\n0,1\n",
            "origin,dest,count\n",
            Some("region_id,gdp\n0,1.5\n1,2.5\n2,3.5\n"),
        );
        let city = load_city::<f64>(tmp.path()).unwrap();
        assert_eq!(city.labels["gdp"].to_vec(), vec![1.5, 2.5, 3.5]);
    }

    #[test]
    fn load_city_missing_file_is_not_found() {
        let tmp = tempfile::tempdir().unwrap();
        std::fs::write(tmp.path().join("edges.csv"), "i,j\n0,1\n").unwrap();
        match load_city::<f64>(tmp.path()) {
            Err(ScotError::NotFound(p)) => assert!(p.ends_with("trips.csv")),
            other => panic!("expected NotFound, got {:?}", other.map(|c| c.n)),
        }
    }

    #[test]
    fn load_city_reports_parse_location() {
        let tmp = tempfile::tempdir().unwrap();
        write_fixture(tmp.path(), "i,j\n0,x\n", "origin,dest,count\n", None);
        match load_city::<f64>(tmp.path()) {
            Err(ScotError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected Parse, got {:?}", other.map(|c| c.n)),
        }
    }

    #[test]
    fn load_city_rejects_self_loop() {
        let tmp = tempfile::tempdir().unwrap();
        write_fixture(tmp.path(), "i,j\n1,1\n", "origin,dest,count\n", None);
        assert!(matches!(
            load_city::<f64>(tmp.path()),
            Err(ScotError::Parse { .. })
        ));
    }

    #[test]
    fn gen_twin_cities_zero_noise_latents_coincide() {
        let t = gen_twin_cities::<f64>(1, 20, 20, 6, 0.0, 0.0).unwrap();
        let mut seen = vec![false; 20];
        for (i, m) in t.true_match.iter().enumerate() {
            let p = m.expect("zero-noise square twins are fully matched");
            seen[p] = true;
            // Matched latent vectors are bit-identical with no noise.
            assert_eq!(t.source_latents.row(i), t.target_latents.row(p));
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn gen_twin_cities_is_deterministic() {
        let a = gen_twin_cities::<f64>(1, 12, 9, 5, 0.2, 0.1).unwrap();
        let b = gen_twin_cities::<f64>(1, 12, 9, 5, 0.2, 0.1).unwrap();
        assert_eq!(a.true_match, b.true_match);
        assert_eq!(a.source.mobility, b.source.mobility);
        assert_eq!(a.target.mobility, b.target.mobility);
        assert_eq!(a.source.adjacency, b.source.adjacency);
        assert_eq!(a.source.labels, b.source.labels);
        assert_eq!(a.target_latents, b.target_latents);
    }

    #[test]
    fn gen_twin_cities_rectangular_match_counts() {
        let t = gen_twin_cities::<f64>(2, 30, 20, 6, 0.0, 0.0).unwrap();
        let matched = t.true_match.iter().flatten().count();
        assert_eq!(matched, 20);
        assert_eq!(t.true_match.iter().filter(|m| m.is_none()).count(), 10);
    }

    #[test]
    fn gen_twin_cities_drop_frac_removes_matches() {
        let t = gen_twin_cities::<f64>(3, 20, 20, 6, 0.0, 0.25).unwrap();
        assert_eq!(t.true_match.iter().flatten().count(), 15);
    }

    #[test]
    fn gen_twin_cities_rejects_degenerate_parameters() {
        assert!(gen_twin_cities::<f64>(0, 3, 20, 6, 0.0, 0.0).is_err());
        assert!(gen_twin_cities::<f64>(0, 20, 20, 0, 0.0, 0.0).is_err());
        assert!(gen_twin_cities::<f64>(0, 20, 20, 6, 0.0, 1.0).is_err());
        assert!(gen_twin_cities::<f64>(0, 20, 20, 6, -0.1, 0.0).is_err());
    }

    #[test]
    fn generated_cities_satisfy_invariants() {
        for seed in 0..5 {
            let t = gen_twin_cities::<f64>(seed, 17, 23, 6, 0.3, 0.1).unwrap();
            t.source.validate().unwrap();
            t.target.validate().unwrap();
            t.validate().unwrap();
        }
    }

    #[test]
    fn written_city_round_trips_exactly() {
        let t = gen_twin_cities::<f64>(7, 14, 14, 5, 0.1, 0.0).unwrap();
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("source");
        write_city(&t.source, &dir).unwrap();
        let loaded = load_city::<f64>(&dir).unwrap();
        assert_eq!(loaded.mobility, t.source.mobility);
        assert_eq!(loaded.adjacency, t.source.adjacency);
        assert_eq!(loaded.labels, t.source.labels);
    }

    #[test]
    fn truth_round_trips_with_sentinels() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("truth.csv");
        let tm = vec![Some(2), None, Some(0)];
        write_truth(&tm, &path).unwrap();
        assert_eq!(load_truth(&path).unwrap(), tm);
    }
}
