//! Desk-scale federated objectives.
//!
//! `f(θ) = (1/n) Σ f_i(θ)` where each client objective is either a shifted
//! quadratic `½‖θ − c_i‖²` (optionally with Gaussian gradient noise) or the
//! mean cross-entropy of a softmax network over the client's local samples.
//! Softmax regression is the network with no hidden layer; the MLP uses
//! `tanh` hidden units so gradients are smooth enough for finite-difference
//! checks.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::param_space::{GroupLayout, ParamVector};

/// Which samples a gradient is averaged over.
#[derive(Debug, Clone, Copy)]
pub enum Batch<'a> {
    Full,
    /// Positions into the client's local sample list; repeats allowed.
    Indices(&'a [usize]),
}

/// Labelled samples, features stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    labels: Vec<usize>,
    dim: usize,
    num_classes: usize,
}

impl Dataset {
    pub fn new(features: Vec<f64>, labels: Vec<usize>, dim: usize) -> Result<Self> {
        if dim == 0 || features.len() != labels.len() * dim {
            return Err(Error::config(
                "dataset",
                format!(
                    "{} feature values for {} samples of dim {dim}",
                    features.len(),
                    labels.len()
                ),
            ));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("dataset features"));
        }
        let num_classes = labels.iter().max().map_or(0, |&m| m + 1);
        Ok(Self {
            features,
            labels,
            dim,
            num_classes,
        })
    }

    /// Gaussian blobs: one unit-variance cluster per class around a mean drawn
    /// from `N(0, separation² I)`. Samples are grouped by class.
    pub fn blobs<R: Rng + ?Sized>(
        num_classes: usize,
        per_class: usize,
        dim: usize,
        separation: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if num_classes == 0 || per_class == 0 || dim == 0 {
            return Err(Error::config("problem", "blobs need classes, samples and features"));
        }
        let means: Vec<Vec<f64>> = (0..num_classes)
            .map(|_| (0..dim).map(|_| separation * gauss(rng)).collect())
            .collect();
        let mut features = Vec::with_capacity(num_classes * per_class * dim);
        let mut labels = Vec::with_capacity(num_classes * per_class);
        for (c, mean) in means.iter().enumerate() {
            for _ in 0..per_class {
                features.extend(mean.iter().map(|m| m + gauss(rng)));
                labels.push(c);
            }
        }
        Self::new(features, labels, dim)
    }

    /// Reads a CSV with header `label,f0,f1,...` and one numeric sample per row.
    pub fn from_csv(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines
            .next()
            .ok_or_else(|| Error::config("dataset.csv", "file is empty"))?;
        let cols: Vec<&str> = header.split(',').map(str::trim).collect();
        if cols.first() != Some(&"label") || cols.len() < 2 {
            return Err(Error::config("dataset.csv", "header must be `label,f0,f1,...`"));
        }
        let dim = cols.len() - 1;
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for (row, line) in lines.enumerate() {
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != cols.len() {
                return Err(Error::config(
                    "dataset.csv",
                    format!("row {} has {} fields, expected {}", row + 1, fields.len(), cols.len()),
                ));
            }
            let label = fields[0].parse::<f64>().ok().filter(|l| *l >= 0.0 && l.fract() == 0.0);
            let label = label
                .ok_or_else(|| Error::config("dataset.csv", format!("row {}: bad label `{}`", row + 1, fields[0])))?;
            labels.push(label as usize);
            for f in &fields[1..] {
                features.push(
                    f.parse::<f64>()
                        .map_err(|_| Error::config("dataset.csv", format!("row {}: bad value `{f}`", row + 1)))?,
                );
            }
        }
        Self::new(features, labels, dim)
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

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn sample(&self, i: usize) -> (&[f64], usize) {
        (&self.features[i * self.dim..(i + 1) * self.dim], self.labels[i])
    }
}

/// Per-client sample index lists.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClientPartition {
    clients: Vec<Vec<usize>>,
}

impl ClientPartition {
    pub fn new(clients: Vec<Vec<usize>>) -> Self {
        Self { clients }
    }

    pub fn num_clients(&self) -> usize {
        self.clients.len()
    }

    pub fn client(&self, i: usize) -> &[usize] {
        &self.clients[i]
    }

    pub fn clients(&self) -> &[Vec<usize>] {
        &self.clients
    }
}

/// Label-sorted shard split: `2n` contiguous shards dealt two per client.
///
/// Each client sees at most two classes whenever every class size is a
/// multiple of the shard size.
pub fn shard_partition<R: Rng + ?Sized>(labels: &[usize], n: usize, rng: &mut R) -> Result<ClientPartition> {
    if n == 0 {
        return Err(Error::config("problem.n", "need at least one client"));
    }
    let shards = 2 * n;
    if labels.len() < shards {
        return Err(Error::config(
            "problem.n",
            format!("{} samples cannot fill {shards} shards", labels.len()),
        ));
    }
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.sort_by_key(|&i| labels[i]);
    let total = order.len();
    let bounds = |s: usize| (s * total / shards)..((s + 1) * total / shards);
    let mut shard_ids: Vec<usize> = (0..shards).collect();
    shard_ids.shuffle(rng);
    let clients = shard_ids
        .chunks(2)
        .map(|pair| {
            let mut idx: Vec<usize> = pair.iter().flat_map(|&s| order[bounds(s)].iter().copied()).collect();
            idx.sort_unstable();
            idx
        })
        .collect();
    Ok(ClientPartition { clients })
}

/// Softmax network with `tanh` hidden layers; no hidden layer is softmax
/// regression. Parameters are laid out `[W_0, b_0, W_1, b_1, ...]` with
/// `W_l` row-major of shape `(sizes[l+1], sizes[l])`.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxNet {
    sizes: Vec<usize>,
}

impl SoftmaxNet {
    pub fn new(sizes: Vec<usize>) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::config(
                "problem.hidden",
                format!("invalid layer sizes {sizes:?}"),
            ));
        }
        Ok(Self { sizes })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    fn num_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn layout(&self) -> Result<GroupLayout> {
        let groups = self.sizes.windows(2).flat_map(|w| [w[0] * w[1], w[1]]).collect();
        GroupLayout::new(groups)
    }

    /// Offsets of `(W_l, b_l)` in the flat parameter vector.
    fn offsets(&self) -> Vec<(usize, usize)> {
        let mut off = 0;
        self.sizes
            .windows(2)
            .map(|w| {
                let wo = off;
                off += w[0] * w[1];
                let bo = off;
                off += w[1];
                (wo, bo)
            })
            .collect()
    }

    fn forward(&self, theta: &[f64], x: &[f64], offsets: &[(usize, usize)]) -> Vec<Vec<f64>> {
        let mut acts = vec![x.to_vec()];
        for l in 0..self.num_layers() {
            let (fan_in, fan_out) = (self.sizes[l], self.sizes[l + 1]);
            let (wo, bo) = offsets[l];
            let input = &acts[l];
            let mut z: Vec<f64> = (0..fan_out)
                .map(|r| {
                    let row = &theta[wo + r * fan_in..wo + (r + 1) * fan_in];
                    row.iter().zip(input).fold(theta[bo + r], |acc, (w, a)| acc + w * a)
                })
                .collect();
            if l + 1 < self.num_layers() {
                z.iter_mut().for_each(|v| *v = v.tanh());
            }
            acts.push(z);
        }
        acts
    }

    /// Cross-entropy of one sample; adds its gradient into `grad` when given.
    fn sample_loss(
        &self,
        theta: &[f64],
        x: &[f64],
        label: usize,
        offsets: &[(usize, usize)],
        grad: Option<&mut [f64]>,
    ) -> f64 {
        let acts = self.forward(theta, x, offsets);
        let logits = acts.last().expect("network has an output layer");
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum_exp: f64 = logits.iter().map(|z| (z - max).exp()).sum();
        let log_norm = max + sum_exp.ln();
        let loss = log_norm - logits[label];
        let Some(grad) = grad else {
            return loss;
        };
        let mut delta: Vec<f64> = logits.iter().map(|z| (z - log_norm).exp()).collect();
        delta[label] -= 1.0;
        for l in (0..self.num_layers()).rev() {
            let (fan_in, fan_out) = (self.sizes[l], self.sizes[l + 1]);
            let (wo, bo) = offsets[l];
            let input = &acts[l];
            for r in 0..fan_out {
                let gw = &mut grad[wo + r * fan_in..wo + (r + 1) * fan_in];
                for (g, a) in gw.iter_mut().zip(input) {
                    *g += delta[r] * a;
                }
                grad[bo + r] += delta[r];
            }
            if l > 0 {
                delta = (0..fan_in)
                    .map(|c| {
                        let back = (0..fan_out).fold(0.0, |acc, r| acc + theta[wo + r * fan_in + c] * delta[r]);
                        back * (1.0 - input[c] * input[c])
                    })
                    .collect();
            }
        }
        loss
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ProblemKind {
    /// `f_i(θ) = ½‖θ − c_i‖²`, stochastic gradients add `N(0, noise_std²)`.
    Quadratic { centers: Vec<ParamVector>, noise_std: f64 },
    /// Softmax network over partitioned data, plus `(l2/2)‖θ‖²`.
    Classifier {
        net: SoftmaxNet,
        data: Arc<Dataset>,
        partition: ClientPartition,
        l2: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Problem {
    kind: ProblemKind,
    layout: Arc<GroupLayout>,
}

impl Problem {
    /// Quadratic problem from explicit centers.
    pub fn quadratic(centers: Vec<ParamVector>, noise_std: f64) -> Result<Self> {
        let first = centers
            .first()
            .ok_or_else(|| Error::config("problem.n", "need at least one client"))?;
        let layout = first.shared_layout().clone();
        for c in &centers {
            first.check_same_layout(c)?;
        }
        if !(noise_std >= 0.0 && noise_std.is_finite()) {
            return Err(Error::config("problem.noise", "must be finite and >= 0"));
        }
        Ok(Self {
            kind: ProblemKind::Quadratic { centers, noise_std },
            layout,
        })
    }

    pub fn classifier(net: SoftmaxNet, data: Arc<Dataset>, partition: ClientPartition, l2: f64) -> Result<Self> {
        if data.dim() != net.sizes()[0] {
            return Err(Error::config(
                "problem",
                format!("network input {} but data has {} features", net.sizes()[0], data.dim()),
            ));
        }
        if data.num_classes() > *net.sizes().last().expect("sizes validated") {
            return Err(Error::config("problem.classes", "more labels than network outputs"));
        }
        if partition.num_clients() == 0 {
            return Err(Error::config("problem.n", "need at least one client"));
        }
        if let Some(bad) = partition.clients().iter().flatten().find(|&&i| i >= data.len()) {
            return Err(Error::config("problem", format!("sample {bad} not in dataset")));
        }
        if !(l2 >= 0.0 && l2.is_finite()) {
            return Err(Error::config("problem.l2", "must be finite and >= 0"));
        }
        let layout = Arc::new(net.layout()?);
        Ok(Self {
            kind: ProblemKind::Classifier {
                net,
                data,
                partition,
                l2,
            },
            layout,
        })
    }

    pub fn kind(&self) -> &ProblemKind {
        &self.kind
    }

    pub fn layout(&self) -> &Arc<GroupLayout> {
        &self.layout
    }

    pub fn num_clients(&self) -> usize {
        match &self.kind {
            ProblemKind::Quadratic { centers, .. } => centers.len(),
            ProblemKind::Classifier { partition, .. } => partition.num_clients(),
        }
    }

    /// Local sample count, `None` for data-free objectives.
    pub fn client_samples(&self, client: usize) -> Option<usize> {
        match &self.kind {
            ProblemKind::Quadratic { .. } => None,
            ProblemKind::Classifier { partition, .. } => Some(partition.client(client).len()),
        }
    }

    /// Exact minimizer of `f` for quadratics: the mean of the centers.
    pub fn minimizer(&self) -> Option<ParamVector> {
        match &self.kind {
            ProblemKind::Quadratic { centers, .. } => {
                Some(ParamVector::mean(&centers.iter().collect::<Vec<_>>()).expect("centers non-empty"))
            }
            ProblemKind::Classifier { .. } => None,
        }
    }

    /// `(1/n) Σ ‖∇f_i(θ*) ‖²` for quadratics.
    pub fn heterogeneity(&self) -> Option<f64> {
        let star = self.minimizer()?;
        let ProblemKind::Quadratic { centers, .. } = &self.kind else {
            return None;
        };
        let total: f64 = centers
            .iter()
            .map(|c| star.sub(c).expect("shared layout").sq_norm())
            .sum();
        Some(total / centers.len() as f64)
    }

    pub fn initial_params<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamVector {
        match &self.kind {
            ProblemKind::Classifier { net, .. } if net.num_layers() > 1 => {
                let mut values = Vec::with_capacity(self.layout.dim());
                for w in net.sizes().windows(2) {
                    let std = 1.0 / (w[0] as f64).sqrt();
                    values.extend((0..w[0] * w[1]).map(|_| std * gauss(rng)));
                    values.extend(std::iter::repeat_n(0.0, w[1]));
                }
                ParamVector::from_raw(self.layout.clone(), values)
            }
            _ => ParamVector::zeros(self.layout.clone()),
        }
    }

    fn check_client(&self, client: usize, theta: &ParamVector) -> Result<()> {
        if client >= self.num_clients() {
            return Err(Error::config("client", format!("client {client} out of range")));
        }
        if theta.layout() != self.layout.as_ref() {
            return Err(Error::LayoutMismatch {
                expected: self.layout.group_sizes().to_vec(),
                got: theta.layout().group_sizes().to_vec(),
            });
        }
        Ok(())
    }

    fn client_eval(
        &self,
        client: usize,
        theta: &ParamVector,
        batch: Batch<'_>,
        want_grad: bool,
    ) -> Result<(f64, Option<ParamVector>)> {
        self.check_client(client, theta)?;
        match &self.kind {
            ProblemKind::Quadratic { centers, .. } => {
                if let Batch::Indices(_) = batch {
                    return Err(Error::config("batch", "quadratic clients hold no samples"));
                }
                let diff = theta.sub(&centers[client])?;
                Ok((0.5 * diff.sq_norm(), want_grad.then_some(diff)))
            }
            ProblemKind::Classifier {
                net,
                data,
                partition,
                l2,
            } => {
                let local = partition.client(client);
                if local.is_empty() {
                    return Err(Error::config("problem", format!("client {client} has no data")));
                }
                let owned;
                let positions: &[usize] = match batch {
                    Batch::Full => {
                        owned = (0..local.len()).collect::<Vec<_>>();
                        &owned
                    }
                    Batch::Indices(p) => p,
                };
                if positions.is_empty() {
                    return Err(Error::config("batch", "empty batch"));
                }
                let th = theta.values();
                let offsets = net.offsets();
                let mut grad = want_grad.then(|| vec![0.0; th.len()]);
                let mut loss = 0.0;
                for &p in positions {
                    let sample = *local
                        .get(p)
                        .ok_or_else(|| Error::config("batch", format!("position {p} out of range")))?;
                    let (x, y) = data.sample(sample);
                    loss += net.sample_loss(th, x, y, &offsets, grad.as_deref_mut());
                }
                let count = positions.len() as f64;
                let reg = 0.5 * l2 * theta.sq_norm();
                let grad = grad.map(|mut g| {
                    for (gi, &ti) in g.iter_mut().zip(th) {
                        *gi = *gi / count + l2 * ti;
                    }
                    ParamVector::from_raw(self.layout.clone(), g)
                });
                Ok((loss / count + reg, grad))
            }
        }
    }

    /// Exact mean gradient of client `client` over `batch`.
    pub fn gradient(&self, client: usize, theta: &ParamVector, batch: Batch<'_>) -> Result<ParamVector> {
        Ok(self
            .client_eval(client, theta, batch, true)?
            .1
            .expect("gradient requested"))
    }

    pub fn client_loss(&self, client: usize, theta: &ParamVector, batch: Batch<'_>) -> Result<f64> {
        Ok(self.client_eval(client, theta, batch, false)?.0)
    }

    /// One unbiased stochastic gradient: a with-replacement mini-batch for
    /// data problems, additive Gaussian noise for quadratics. `batch_size`
    /// of `None` means the full local objective.
    pub fn stochastic_gradient<R: Rng + ?Sized>(
        &self,
        client: usize,
        theta: &ParamVector,
        batch_size: Option<usize>,
        rng: &mut R,
    ) -> Result<ParamVector> {
        match &self.kind {
            ProblemKind::Quadratic { noise_std, .. } => {
                let mut g = self.gradient(client, theta, Batch::Full)?;
                if *noise_std > 0.0 {
                    let noise: Vec<f64> = (0..g.dim()).map(|_| noise_std * gauss(rng)).collect();
                    g.axpy(1.0, &ParamVector::from_raw(self.layout.clone(), noise))?;
                }
                Ok(g)
            }
            ProblemKind::Classifier { partition, .. } => match batch_size {
                None => self.gradient(client, theta, Batch::Full),
                Some(b) => {
                    let len = partition.client(client).len();
                    if len == 0 {
                        return Err(Error::config("problem", format!("client {client} has no data")));
                    }
                    let positions: Vec<usize> = (0..b).map(|_| rng.random_range(0..len)).collect();
                    self.gradient(client, theta, Batch::Indices(&positions))
                }
            },
        }
    }

    /// `∇f(θ) = (1/n) Σ ∇f_i(θ)`, clients summed in index order.
    pub fn global_gradient(&self, theta: &ParamVector) -> Result<ParamVector> {
        let grads = (0..self.num_clients())
            .map(|i| self.gradient(i, theta, Batch::Full))
            .collect::<Result<Vec<_>>>()?;
        ParamVector::mean(&grads.iter().collect::<Vec<_>>())
    }

    pub fn global_loss(&self, theta: &ParamVector) -> Result<f64> {
        let mut total = 0.0;
        for i in 0..self.num_clients() {
            total += self.client_loss(i, theta, Batch::Full)?;
        }
        Ok(total / self.num_clients() as f64)
    }
}

/// Quadratic with `n` centers at distance `spread` from the origin in
/// uniformly random directions. Returns the problem and its exact minimizer.
pub fn make_quadratic<R: Rng + ?Sized>(n: usize, d: usize, spread: f64, rng: &mut R) -> Result<(Problem, ParamVector)> {
    if d == 0 {
        return Err(Error::config("problem.d", "must be >= 1"));
    }
    make_grouped_quadratic(n, GroupLayout::single(d)?, spread, 0.0, rng)
}

pub fn make_grouped_quadratic<R: Rng + ?Sized>(
    n: usize,
    layout: GroupLayout,
    spread: f64,
    noise_std: f64,
    rng: &mut R,
) -> Result<(Problem, ParamVector)> {
    if n == 0 {
        return Err(Error::config("problem.n", "must be >= 1"));
    }
    if !(spread >= 0.0 && spread.is_finite()) {
        return Err(Error::config("problem.spread", "must be finite and >= 0"));
    }
    let layout = Arc::new(layout);
    let d = layout.dim();
    let centers = (0..n)
        .map(|_| {
            let mut z: Vec<f64> = (0..d).map(|_| gauss(rng)).collect();
            let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
            let scale = if norm > 0.0 { spread / norm } else { 0.0 };
            z.iter_mut().for_each(|v| *v *= scale);
            ParamVector::from_raw(layout.clone(), z)
        })
        .collect();
    let problem = Problem::quadratic(centers, noise_std)?;
    let star = problem.minimizer().expect("quadratic has a minimizer");
    Ok((problem, star))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "dist", rename_all = "lowercase")]
pub enum GradientDist {
    Gaussian { std: f64 },
    Laplace { scale: f64 },
}

impl GradientDist {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            GradientDist::Gaussian { std } => std * gauss(rng),
            GradientDist::Laplace { scale } => {
                // inverse CDF on u ∈ (-1/2, 1/2)
                let u: f64 = rng.random::<f64>() - 0.5;
                -scale * u.signum() * (1.0 - 2.0 * u.abs()).ln()
            }
        }
    }

    pub fn variance(&self) -> f64 {
        match *self {
            GradientDist::Gaussian { std } => std * std,
            GradientDist::Laplace { scale } => 2.0 * scale * scale,
        }
    }
}

/// Heterogeneous synthetic client gradients: iid draws from `dist`, with
/// client `i`'s contiguous block `[i d/n, (i+1) d/n)` multiplied by `s`.
pub fn synth_client_gradients<R: Rng + ?Sized>(
    dist: GradientDist,
    n: usize,
    d: usize,
    s: f64,
    rng: &mut R,
) -> Result<Vec<ParamVector>> {
    if n == 0 || d == 0 {
        return Err(Error::config("synth", "need n >= 1 and d >= 1"));
    }
    if !(s >= 1.0 && s.is_finite()) {
        return Err(Error::config("s", format!("scale factor must be >= 1, got {s}")));
    }
    let layout = Arc::new(GroupLayout::single(d)?);
    Ok((0..n)
        .map(|i| {
            let block = (i * d / n)..((i + 1) * d / n);
            let values = (0..d)
                .map(|j| {
                    let v = dist.sample(rng);
                    if block.contains(&j) {
                        s * v
                    } else {
                        v
                    }
                })
                .collect();
            ParamVector::from_raw(layout.clone(), values)
        })
        .collect())
}

fn gauss<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

fn default_classes() -> usize {
    10
}
fn default_per_class() -> usize {
    100
}
fn default_features() -> usize {
    20
}
fn default_separation() -> f64 {
    1.0
}
fn default_l2() -> f64 {
    1e-4
}
fn default_hidden() -> Vec<usize> {
    vec![32]
}

/// Declarative problem description, as it appears in experiment configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProblemSpec {
    Quadratic {
        n: usize,
        d: usize,
        #[serde(default)]
        spread: f64,
        #[serde(default)]
        noise: f64,
        /// Optional group split of the `d` coordinates.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        groups: Option<Vec<usize>>,
    },
    Logistic {
        n: usize,
        #[serde(flatten)]
        data: DataSpec,
    },
    Mlp {
        n: usize,
        #[serde(default = "default_hidden")]
        hidden: Vec<usize>,
        #[serde(flatten)]
        data: DataSpec,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSpec {
    #[serde(default = "default_classes")]
    pub classes: usize,
    #[serde(default = "default_per_class")]
    pub per_class: usize,
    #[serde(default = "default_features")]
    pub features: usize,
    #[serde(default = "default_separation")]
    pub separation: f64,
    #[serde(default = "default_l2")]
    pub l2: f64,
    /// External `label,f0,...` CSV replacing the synthetic blobs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub csv: Option<PathBuf>,
}

impl ProblemSpec {
    pub fn num_clients(&self) -> usize {
        match *self {
            ProblemSpec::Quadratic { n, .. } | ProblemSpec::Logistic { n, .. } | ProblemSpec::Mlp { n, .. } => n,
        }
    }

    pub fn set_num_clients(&mut self, clients: usize) {
        match self {
            ProblemSpec::Quadratic { n, .. } | ProblemSpec::Logistic { n, .. } | ProblemSpec::Mlp { n, .. } => {
                *n = clients
            }
        }
    }

    /// Whether the objective is defined by local samples (mini-batches apply).
    pub fn has_data(&self) -> bool {
        !matches!(self, ProblemSpec::Quadratic { .. })
    }

    pub fn build<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Problem> {
        match self {
            ProblemSpec::Quadratic {
                n,
                d,
                spread,
                noise,
                groups,
            } => {
                if *d == 0 {
                    return Err(Error::config("problem.d", "must be >= 1"));
                }
                let layout = match groups {
                    Some(g) => {
                        let l =
                            GroupLayout::new(g.clone()).map_err(|e| Error::config("problem.groups", e.to_string()))?;
                        if l.dim() != *d {
                            return Err(Error::config(
                                "problem.groups",
                                format!("groups sum to {} but d = {d}", l.dim()),
                            ));
                        }
                        l
                    }
                    None => GroupLayout::single(*d)?,
                };
                Ok(make_grouped_quadratic(*n, layout, *spread, *noise, rng)?.0)
            }
            ProblemSpec::Logistic { n, data } => build_classifier(*n, &[], data, rng),
            ProblemSpec::Mlp { n, hidden, data } => build_classifier(*n, hidden, data, rng),
        }
    }
}

fn build_classifier<R: Rng + ?Sized>(n: usize, hidden: &[usize], spec: &DataSpec, rng: &mut R) -> Result<Problem> {
    let data = match &spec.csv {
        Some(path) => Dataset::from_csv(path)?,
        None => Dataset::blobs(spec.classes, spec.per_class, spec.features, spec.separation, rng)?,
    };
    let partition = shard_partition(data.labels(), n, rng)?;
    let mut sizes = vec![data.dim()];
    sizes.extend_from_slice(hidden);
    sizes.push(data.num_classes().max(spec.classes).max(2));
    Problem::classifier(SoftmaxNet::new(sizes)?, Arc::new(data), partition, spec.l2)
}
