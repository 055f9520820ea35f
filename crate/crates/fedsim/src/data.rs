//! Dataset construction, CSV I/O, and Dirichlet non-IID partitioning.

use crate::error::{Error, Result};
use crate::model::Batch;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use std::fmt::Write as _;
use std::path::Path;

/// Labeled feature matrix, rows stored contiguously.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    labels: Vec<usize>,
    dim: usize,
    num_classes: usize,
}

impl Dataset {
    pub fn new(features: Vec<f64>, labels: Vec<usize>, dim: usize, num_classes: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if features.len() != labels.len() * dim {
            return Err(Error::DimensionMismatch {
                op: "Dataset",
                left: features.len(),
                right: labels.len() * dim,
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "Dataset" });
        }
        Ok(Self {
            features,
            labels,
            dim,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn label(&self, idx: usize) -> usize {
        self.labels[idx]
    }

    pub fn row(&self, idx: usize) -> &[f64] {
        &self.features[idx * self.dim..(idx + 1) * self.dim]
    }

    /// Gather rows into a batch. Indices are sorted and deduplicated with
    /// multiplicities, so a batch is determined by its index multiset alone.
    pub fn gather(&self, indices: &[usize]) -> Result<Batch> {
        if indices.is_empty() {
            return Err(Error::InvalidArgument("gather: empty index set".into()));
        }
        let mut sorted = indices.to_vec();
        sorted.sort_unstable();
        if *sorted.last().unwrap() >= self.len() {
            return Err(Error::InvalidArgument(format!(
                "gather: index {} out of range ({})",
                sorted.last().unwrap(),
                self.len()
            )));
        }
        let mut features = Vec::new();
        let mut labels = Vec::new();
        let mut counts: Vec<f64> = Vec::new();
        let mut prev: Option<usize> = None;
        for idx in sorted {
            if prev == Some(idx) {
                *counts.last_mut().unwrap() += 1.0;
            } else {
                features.extend_from_slice(self.row(idx));
                labels.push(self.labels[idx]);
                counts.push(1.0);
                prev = Some(idx);
            }
        }
        Ok(Batch::from_weighted(features, labels, counts, self.dim))
    }

    /// Per-class histogram of the whole dataset.
    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0usize; self.num_classes];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }

    /// Deterministic split into (rest, holdout) by seeded shuffle.
    pub fn split_holdout(&self, holdout_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&holdout_fraction) || holdout_fraction <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "holdout fraction {holdout_fraction} must be in (0, 1)"
            )));
        }
        let n = self.len();
        let n_holdout = ((n as f64) * holdout_fraction).round() as usize;
        if n_holdout == 0 || n_holdout >= n {
            return Err(Error::InvalidArgument(format!(
                "holdout of {n_holdout} from {n} samples leaves one side empty"
            )));
        }
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        order.shuffle(&mut rng);
        let take = |idxs: &[usize]| -> Dataset {
            let mut features = Vec::with_capacity(idxs.len() * self.dim);
            let mut labels = Vec::with_capacity(idxs.len());
            for &i in idxs {
                features.extend_from_slice(self.row(i));
                labels.push(self.labels[i]);
            }
            Dataset {
                features,
                labels,
                dim: self.dim,
                num_classes: self.num_classes,
            }
        };
        let holdout = take(&order[..n_holdout]);
        let rest = take(&order[n_holdout..]);
        Ok((rest, holdout))
    }

    /// Write as CSV with header `f0,...,f{d-1},label`.
    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for i in 0..self.dim {
            let _ = write!(out, "f{i},");
        }
        out.push_str("label\n");
        for (r, &label) in self.labels.iter().enumerate() {
            for v in self.row(r) {
                let _ = write!(out, "{v},");
            }
            let _ = writeln!(out, "{label}");
        }
        std::fs::write(path, out)?;
        Ok(())
    }
}

/// Synthetic Gaussian blobs: `num_classes` unit-variance isotropic clusters
/// whose centers sit on a circle in the first two feature dimensions with
/// pairwise distance at least `separation`. Samples are emitted class-major.
pub fn generate_blobs(
    num_classes: usize,
    per_class: usize,
    dim: usize,
    separation: f64,
    rng: &mut ChaCha12Rng,
) -> Result<Dataset> {
    if num_classes < 2 || per_class < 1 || dim < 2 {
        return Err(Error::InvalidArgument(format!(
            "blobs: need classes >= 2, per_class >= 1, dim >= 2 (got {num_classes}, {per_class}, {dim})"
        )));
    }
    if !(separation > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "blobs: separation {separation} must be positive"
        )));
    }
    // Adjacent centers on the circle are exactly `separation` apart.
    let radius = separation / (2.0 * (std::f64::consts::PI / num_classes as f64).sin());
    let n = num_classes * per_class;
    let mut features = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for c in 0..num_classes {
        let angle = 2.0 * std::f64::consts::PI * c as f64 / num_classes as f64;
        let (cx, cy) = (radius * angle.cos(), radius * angle.sin());
        for _ in 0..per_class {
            for d in 0..dim {
                let center = match d {
                    0 => cx,
                    1 => cy,
                    _ => 0.0,
                };
                let z: f64 = rng.sample(StandardNormal);
                features.push(center + z);
            }
            labels.push(c);
        }
    }
    Dataset::new(features, labels, dim, num_classes)
}

/// Load a dataset written in the `f0,...,f{d-1},label` CSV layout.
/// Labels must be 0-based contiguous integers; `num_classes` becomes
/// `max label + 1`.
pub fn load_csv(path: &Path) -> Result<Dataset> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(Error::DatasetMissing {
                path: path.display().to_string(),
            })
        }
        Err(e) => return Err(e.into()),
    };
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or(Error::EmptyDataset)?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 2 || cols[cols.len() - 1] != "label" {
        return Err(Error::MalformedField {
            line: 1,
            detail: format!("header must be f0,...,f{{d-1}},label, got `{header}`"),
        });
    }
    let dim = cols.len() - 1;
    for (i, col) in cols[..dim].iter().enumerate() {
        if *col != format!("f{i}") {
            return Err(Error::MalformedField {
                line: 1,
                detail: format!("expected column f{i}, got `{col}`"),
            });
        }
    }
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (lineno, line) in lines {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != dim + 1 {
            return Err(Error::RaggedRow {
                line: lineno + 1,
                expected: dim + 1,
                found: fields.len(),
            });
        }
        for f in &fields[..dim] {
            let v: f64 = f.trim().parse().map_err(|_| Error::MalformedField {
                line: lineno + 1,
                detail: format!("not a number: `{f}`"),
            })?;
            features.push(v);
        }
        let label: usize = fields[dim].trim().parse().map_err(|_| Error::MalformedField {
            line: lineno + 1,
            detail: format!("not a label: `{}`", fields[dim]),
        })?;
        labels.push(label);
    }
    if labels.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let max = *labels.iter().max().unwrap();
    let mut seen = vec![false; max + 1];
    for &l in &labels {
        seen[l] = true;
    }
    if let Some(missing) = seen.iter().position(|&s| !s) {
        return Err(Error::NonContiguousLabels { missing, max });
    }
    Dataset::new(features, labels, dim, max + 1)
}

/// Per-client sample assignment produced by [`dirichlet_partition`].
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionPlan {
    pub client_indices: Vec<Vec<usize>>,
    pub beta: f64,
    pub seed: u64,
}

impl PartitionPlan {
    pub fn num_clients(&self) -> usize {
        self.client_indices.len()
    }

    pub fn client_sizes(&self) -> Vec<usize> {
        self.client_indices.iter().map(|c| c.len()).collect()
    }
}

/// Split `target` units across classes proportionally to `pool` sizes,
/// by largest remainder, never exceeding a class's pool.
fn proportional_shares(target: usize, pool: &[usize]) -> Vec<usize> {
    let total: usize = pool.iter().sum();
    debug_assert!(total >= target);
    let mut shares = vec![0usize; pool.len()];
    if target == 0 {
        return shares;
    }
    let mut remainders: Vec<(usize, f64)> = Vec::with_capacity(pool.len());
    let mut assigned = 0usize;
    for (c, &p) in pool.iter().enumerate() {
        let exact = target as f64 * p as f64 / total as f64;
        let floor = (exact.floor() as usize).min(p);
        shares[c] = floor;
        assigned += floor;
        remainders.push((c, exact - floor as f64));
    }
    // Hand out the leftover units to the largest fractional parts, skipping
    // classes already at their pool cap. Ties resolve to the lower class id.
    remainders.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    let mut left = target - assigned;
    while left > 0 {
        let mut progressed = false;
        for &(c, _) in &remainders {
            if left == 0 {
                break;
            }
            if shares[c] < pool[c] {
                shares[c] += 1;
                left -= 1;
                progressed = true;
            }
        }
        if !progressed {
            break;
        }
    }
    shares
}

/// Dirichlet(beta) composition skew across clients.
///
/// Each client draws a class composition from Dirichlet(beta) (normalized
/// Gamma(beta, 1) draws) and receives an ~n/N quota filled from per-class
/// pools according to that composition; when a pool runs dry the shortfall
/// is redistributed over the remaining pools, proportionally to the client's
/// own composition there (falling back to pool sizes once that mass is
/// spent). Every sample is assigned exactly once and no client ends up
/// empty.
pub fn dirichlet_partition(
    dataset: &Dataset,
    num_clients: usize,
    beta: f64,
    seed: u64,
) -> Result<PartitionPlan> {
    if num_clients == 0 {
        return Err(Error::InvalidArgument("need at least one client".into()));
    }
    if !(beta > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "beta {beta} must be positive"
        )));
    }
    let n = dataset.len();
    if n < num_clients {
        return Err(Error::TooFewSamples {
            samples: n,
            clients: num_clients,
        });
    }
    let classes = dataset.num_classes();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);

    // Per-class index pools, shuffled once; allocation pops from the back.
    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for idx in 0..n {
        pools[dataset.label(idx)].push(idx);
    }
    for pool in &mut pools {
        pool.shuffle(&mut rng);
    }

    let gamma = Gamma::new(beta, 1.0).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let base_quota = n / num_clients;
    let remainder = n % num_clients;

    let mut client_indices: Vec<Vec<usize>> = Vec::with_capacity(num_clients);
    for i in 0..num_clients {
        let quota = base_quota + usize::from(i < remainder);
        let mut draws: Vec<f64> = (0..classes).map(|_| gamma.sample(&mut rng)).collect();
        let sum: f64 = draws.iter().sum();
        if sum <= 0.0 {
            // All-zero draws are possible for tiny beta; fall back to uniform.
            draws = vec![1.0; classes];
        }
        let total: f64 = draws.iter().sum();
        let pool_sizes: Vec<usize> = pools.iter().map(|p| p.len()).collect();

        // Target counts from the composition, by largest remainder, capped at
        // each pool; the shortfall spreads proportionally over leftover pools.
        let mut counts = vec![0usize; classes];
        let mut remainders: Vec<(usize, f64)> = Vec::with_capacity(classes);
        let mut assigned = 0usize;
        for c in 0..classes {
            let exact = quota as f64 * draws[c] / total;
            let capped = (exact.floor() as usize).min(pool_sizes[c]);
            counts[c] = capped;
            assigned += capped;
            let frac = if counts[c] < pool_sizes[c] {
                exact - exact.floor()
            } else {
                -1.0
            };
            remainders.push((c, frac));
        }
        remainders.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        let mut left = quota - assigned;
        for &(c, frac) in &remainders {
            if left == 0 {
                break;
            }
            if frac >= 0.0 && counts[c] < pool_sizes[c] {
                counts[c] += 1;
                left -= 1;
            }
        }
        // Shortfall from exhausted pools: follow the client's composition
        // over the classes that still have samples, so a skewed client stays
        // skewed toward its next-preferred classes.
        while left > 0 {
            let open: Vec<usize> = (0..classes).map(|c| pool_sizes[c] - counts[c]).collect();
            let weight_sum: f64 = (0..classes)
                .filter(|&c| open[c] > 0)
                .map(|c| draws[c])
                .sum();
            let extra = if weight_sum > 0.0 {
                let mut shares = vec![0usize; classes];
                let mut placed = 0usize;
                let mut fracs: Vec<(usize, f64)> = Vec::new();
                for c in 0..classes {
                    if open[c] == 0 {
                        continue;
                    }
                    let exact = left as f64 * draws[c] / weight_sum;
                    let fl = (exact.floor() as usize).min(open[c]);
                    shares[c] = fl;
                    placed += fl;
                    fracs.push((c, exact - exact.floor()));
                }
                fracs.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
                let mut units = left - placed;
                for &(c, _) in &fracs {
                    if units == 0 {
                        break;
                    }
                    if shares[c] < open[c] {
                        shares[c] += 1;
                        units -= 1;
                    }
                }
                shares
            } else {
                proportional_shares(left, &open)
            };
            let added: usize = extra.iter().sum();
            for c in 0..classes {
                counts[c] += extra[c];
            }
            left -= added;
            if added == 0 {
                // Composition mass sits entirely on drained classes; spread
                // the rest by pool size instead.
                let open: Vec<usize> = (0..classes).map(|c| pool_sizes[c] - counts[c]).collect();
                let fallback = proportional_shares(left, &open);
                for c in 0..classes {
                    counts[c] += fallback[c];
                }
                left = 0;
            }
        }

        let mut indices = Vec::with_capacity(quota);
        for c in 0..classes {
            for _ in 0..counts[c] {
                indices.push(pools[c].pop().expect("pool accounting"));
            }
        }
        indices.sort_unstable();
        client_indices.push(indices);
    }
    debug_assert!(pools.iter().all(|p| p.is_empty()));

    // Quotas are >= 1 whenever n >= N, but keep the repair for safety.
    for i in 0..num_clients {
        if client_indices[i].is_empty() {
            let donor = (0..num_clients)
                .max_by_key(|&j| client_indices[j].len())
                .unwrap();
            let moved = client_indices[donor].pop().ok_or(Error::TooFewSamples {
                samples: n,
                clients: num_clients,
            })?;
            client_indices[i].push(moved);
        }
    }

    Ok(PartitionPlan {
        client_indices,
        beta,
        seed,
    })
}

/// Count matrix: entry `(i, c)` is the number of class-`c` samples held by
/// client `i`.
pub fn partition_stats(plan: &PartitionPlan, dataset: &Dataset) -> Result<Vec<Vec<usize>>> {
    let classes = dataset.num_classes();
    let mut stats = vec![vec![0usize; classes]; plan.num_clients()];
    for (i, indices) in plan.client_indices.iter().enumerate() {
        for &idx in indices {
            if idx >= dataset.len() {
                return Err(Error::InvalidArgument(format!(
                    "partition index {idx} out of range ({})",
                    dataset.len()
                )));
            }
            stats[i][dataset.label(idx)] += 1;
        }
    }
    Ok(stats)
}

/// Render a stats matrix as `client,class,count` CSV.
pub fn stats_csv(stats: &[Vec<usize>]) -> String {
    let mut out = String::from("client,class,count\n");
    for (i, row) in stats.iter().enumerate() {
        for (c, &count) in row.iter().enumerate() {
            let _ = writeln!(out, "{i},{c},{count}");
        }
    }
    out
}
