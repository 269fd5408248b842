//! Soft city-to-group assignment, the city↔group transforms, and the
//! K-means hard-assignment baseline.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{softmax_rows, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Mlp, ParamGroup, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Row-stochastic assignment `S = softmax(logits)` along each row.
pub fn soft_assignment<T: Scalar>(logits: &Tensor<T>) -> Tensor<T> {
    softmax_rows(logits)
}

/// Trainable assignment logits `[N_city × N_group]`.
#[derive(Clone, Debug)]
pub struct AssignmentLogits {
    pub logits: ParamId,
}

impl AssignmentLogits {
    pub const PARAM_NAME: &'static str = "assignment.logits";

    /// Logits drawn i.i.d. from `normal(0, init_std)`.
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        n_cities: usize,
        n_groups: usize,
        init_std: f64,
    ) -> Self {
        let normal = Normal::new(0.0, init_std).expect("valid std");
        let init = Tensor::from_fn(n_cities, n_groups, |_, _| T::lit(normal.sample(rng)));
        Self {
            logits: store.add(Self::PARAM_NAME, ParamGroup::AssignmentLogits, init),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>) -> Var {
        let l = tape.param(self.logits);
        tape.softmax_rows(l)
    }

    pub fn assignment<T: Scalar>(&self, store: &ParamStore<T>) -> Tensor<T> {
        soft_assignment(store.value(self.logits))
    }
}

/// Min-max scales each coordinate axis to `[0, 1]`; a constant axis maps to 0.
pub fn normalize_locations(locations: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for l in locations {
        for a in 0..2 {
            lo[a] = lo[a].min(l[a]);
            hi[a] = hi[a].max(l[a]);
        }
    }
    locations
        .iter()
        .map(|l| {
            let mut out = [0.0; 2];
            for a in 0..2 {
                let span = hi[a] - lo[a];
                out[a] = if span > 0.0 { (l[a] - lo[a]) / span } else { 0.0 };
            }
            out
        })
        .collect()
}

/// `X′ = MLP([X ‖ L])`, or `MLP(X)` when locations are disabled.
#[derive(Clone, Debug)]
pub struct LocationFusion {
    pub mlp: Mlp,
    pub use_location: bool,
}

impl LocationFusion {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        width: usize,
        use_location: bool,
    ) -> Self {
        let in_dim = width + if use_location { 2 } else { 0 };
        Self {
            mlp: Mlp::new(store, rng, name, &[in_dim, width, width]),
            use_location,
        }
    }

    /// `x`: `[R × width]`, `locations`: `[R × 2]`.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var, locations: Var) -> Var {
        let input = if self.use_location {
            tape.concat_cols(&[x, locations])
        } else {
            x
        };
        self.mlp.forward(tape, input)
    }
}

/// `Z = Sᵀ·X′` per sample: `s` is `[N×G]`, `x` is `[(B·N)×d]`.
pub fn cities_to_groups<T: Scalar>(tape: &mut Tape<'_, T>, s: Var, x: Var) -> Var {
    let st = tape.transpose(s);
    tape.block_matmul(st, x)
}

/// `X¹ = S·Z′` per sample: `z` is `[(B·G)×d]`.
pub fn groups_to_cities<T: Scalar>(tape: &mut Tape<'_, T>, s: Var, z: Var) -> Var {
    tape.block_matmul(s, z)
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeans {
    pub labels: Vec<usize>,
    pub centroids: Vec<[f64; 2]>,
    pub inertia: f64,
    pub iterations: usize,
}

impl KMeans {
    pub fn assignment<T: Scalar>(&self) -> Tensor<T> {
        one_hot(&self.labels, self.centroids.len())
    }
}

pub fn one_hot<T: Scalar>(labels: &[usize], k: usize) -> Tensor<T> {
    Tensor::from_fn(labels.len(), k, |r, c| if labels[r] == c { T::one() } else { T::zero() })
}

const KMEANS_MAX_ITER: usize = 100;
const KMEANS_TOL: f64 = 1e-6;
const KMEANS_RESTARTS: usize = 10;

fn dist2(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
}

fn nearest(p: [f64; 2], centroids: &[[f64; 2]]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, &c) in centroids.iter().enumerate() {
        let d = dist2(p, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// k-means++ seeding: a random first centre, then each next centre drawn with
/// probability proportional to squared distance from the chosen ones.
fn seed_centroids(points: &[[f64; 2]], k: usize, rng: &mut ChaCha8Rng) -> Vec<[f64; 2]> {
    let mut chosen = vec![false; points.len()];
    let first = rng.random_range(0..points.len());
    chosen[first] = true;
    let mut centroids = vec![points[first]];
    while centroids.len() < k {
        let d: Vec<f64> = points
            .iter()
            .zip(&chosen)
            .map(|(&p, &c)| if c { 0.0 } else { nearest(p, &centroids).1 })
            .collect();
        let total: f64 = d.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = d.iter().rposition(|&v| v > 0.0).unwrap();
            for (i, &v) in d.iter().enumerate() {
                if v > 0.0 && u < v {
                    pick = i;
                    break;
                }
                u -= v;
            }
            pick
        } else {
            // All remaining points coincide with a centre.
            chosen.iter().position(|&c| !c).unwrap()
        };
        chosen[pick] = true;
        centroids.push(points[pick]);
    }
    centroids
}

fn lloyd(points: &[[f64; 2]], mut centroids: Vec<[f64; 2]>) -> KMeans {
    let k = centroids.len();
    let mut labels = vec![0; points.len()];
    let mut iterations = 0;
    for _ in 0..KMEANS_MAX_ITER {
        iterations += 1;
        for (l, &p) in labels.iter_mut().zip(points) {
            *l = nearest(p, &centroids).0;
        }
        let mut sums = vec![[0.0; 2]; k];
        let mut counts = vec![0usize; k];
        for (&l, p) in labels.iter().zip(points) {
            sums[l][0] += p[0];
            sums[l][1] += p[1];
            counts[l] += 1;
        }
        let mut next = centroids.clone();
        for j in 0..k {
            if counts[j] > 0 {
                next[j] = [sums[j][0] / counts[j] as f64, sums[j][1] / counts[j] as f64];
            }
        }
        for j in 0..k {
            if counts[j] == 0 {
                // Re-seed at the point farthest from its own centroid.
                let far = (0..points.len())
                    .max_by(|&a, &b| {
                        dist2(points[a], next[labels[a]])
                            .partial_cmp(&dist2(points[b], next[labels[b]]))
                            .unwrap()
                            .then(b.cmp(&a))
                    })
                    .unwrap();
                next[j] = points[far];
                labels[far] = j;
            }
        }
        let shift = centroids
            .iter()
            .zip(&next)
            .map(|(&a, &b)| dist2(a, b).sqrt())
            .fold(0.0, f64::max);
        centroids = next;
        if shift < KMEANS_TOL {
            break;
        }
    }
    for (l, &p) in labels.iter_mut().zip(points) {
        *l = nearest(p, &centroids).0;
    }
    let inertia = labels.iter().zip(points).map(|(&l, &p)| dist2(p, centroids[l])).sum();
    KMeans {
        labels,
        centroids,
        inertia,
        iterations,
    }
}

/// Lloyd's algorithm on min-max normalized locations with k-means++ seeding;
/// the lowest-inertia of several seeded restarts is returned.
pub fn kmeans_assignment(locations: &[[f64; 2]], k: usize, seed: u64) -> Result<KMeans> {
    if k == 0 || k > locations.len() {
        return Err(Error::InvalidArgument(format!(
            "k = {k} must be in 1..={} (number of cities)",
            locations.len()
        )));
    }
    let points = normalize_locations(locations);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<KMeans> = None;
    for _ in 0..KMEANS_RESTARTS {
        let run = lloyd(&points, seed_centroids(&points, k, &mut rng));
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia - 1e-12) {
            best = Some(run);
        }
    }
    Ok(best.unwrap())
}
