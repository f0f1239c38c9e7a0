//! Independent oracles and sweeps shared by the property tests and the
//! acceptance suite. Sweeps return their worst case instead of panicking.
#![allow(dead_code)]

use repper::data::{dirichlet_partition, ClientPartition, LabeledDataset, PartitionSpec};
use repper::nn::{Encoder, HeadKind, HeadParams, Parameters};
use repper::numerics::{Matrix, RngStream};
use repper::supcon::{
    sc_grad_r, sc_grad_r_total, sc_grad_z, sc_grad_z_total, sc_mean_loss_and_grad_r, ContrastiveBatch,
};

pub const H: f64 = 1e-5;
pub const TOL: f64 = 1e-4;
pub const FD_CASES: usize = 120;

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn unit(v: &[f64]) -> Vec<f64> {
    let n = dot(v, v).sqrt();
    v.iter().map(|x| x / n).collect()
}

/// ℓ_j = −log{ (1/|P|) Σ_p exp(z_j·z_p/τ) / Σ_a exp(z_j·z_a/τ) } on raw rows; `None` if P(j) is empty.
pub fn oracle_anchor(z: &[Vec<f64>], labels: &[usize], tau: f64, j: usize) -> Option<f64> {
    let denom: f64 = (0..z.len())
        .filter(|&a| a != j)
        .map(|a| (dot(&z[j], &z[a]) / tau).exp())
        .sum();
    let pos: Vec<usize> = (0..z.len())
        .filter(|&p| p != j && labels[p] == labels[j])
        .collect();
    if pos.is_empty() {
        return None;
    }
    let inner: f64 = pos
        .iter()
        .map(|&p| (dot(&z[j], &z[p]) / tau).exp() / denom)
        .sum::<f64>()
        / pos.len() as f64;
    Some(-inner.ln())
}

pub fn oracle_sum(z: &[Vec<f64>], labels: &[usize], tau: f64) -> f64 {
    (0..z.len())
        .filter_map(|j| oracle_anchor(z, labels, tau, j))
        .sum()
}

pub fn oracle_mean(z: &[Vec<f64>], labels: &[usize], tau: f64) -> f64 {
    let terms: Vec<f64> = (0..z.len())
        .filter_map(|j| oracle_anchor(z, labels, tau, j))
        .collect();
    if terms.is_empty() {
        0.0
    } else {
        terms.iter().sum::<f64>() / terms.len() as f64
    }
}

pub fn normalized(r: &[Vec<f64>]) -> Vec<Vec<f64>> {
    r.iter().map(|v| unit(v)).collect()
}

/// ‖a − n‖ / max(‖a‖, ‖n‖, 1e-6); the floor keeps identically-zero
/// gradients (against FD roundoff) from reading as 100% error.
pub fn rel(a: &[f64], n: &[f64]) -> f64 {
    let diff: Vec<f64> = a.iter().zip(n).map(|(x, y)| x - y).collect();
    let scale = dot(a, a).sqrt().max(dot(n, n).sqrt()).max(1e-6);
    dot(&diff, &diff).sqrt() / scale
}

/// Central-difference gradient of `f` w.r.t. row `row` of `x`.
pub fn fd_row(x: &[Vec<f64>], row: usize, f: impl Fn(&[Vec<f64>]) -> f64) -> Vec<f64> {
    let mut x = x.to_vec();
    (0..x[row].len())
        .map(|c| {
            let orig = x[row][c];
            x[row][c] = orig + H;
            let plus = f(&x);
            x[row][c] = orig - H;
            let minus = f(&x);
            x[row][c] = orig;
            (plus - minus) / (2.0 * H)
        })
        .collect()
}

/// FD of `f(params)` w.r.t. every flattened parameter.
pub fn fd_params<P: Parameters + Clone>(p: &P, f: impl Fn(&P) -> f64) -> Vec<f64> {
    let base = p.flatten();
    let mut probe = p.clone();
    (0..base.len())
        .map(|i| {
            let mut v = base.clone();
            v[i] += H;
            probe.load_flat(&v).unwrap();
            let plus = f(&probe);
            v[i] -= 2.0 * H;
            probe.load_flat(&v).unwrap();
            let minus = f(&probe);
            (plus - minus) / (2.0 * H)
        })
        .collect()
}

pub fn fd_matrix(x: &Matrix, f: impl Fn(&Matrix) -> f64) -> Vec<f64> {
    let mut probe = x.clone();
    (0..x.len())
        .map(|i| {
            let orig = x.as_slice()[i];
            probe.as_mut_slice()[i] = orig + H;
            let plus = f(&probe);
            probe.as_mut_slice()[i] = orig - H;
            let minus = f(&probe);
            probe.as_mut_slice()[i] = orig;
            (plus - minus) / (2.0 * H)
        })
        .collect()
}

/// Label mixes from balanced to heavily imbalanced; always augmentation pairs.
fn labels_for(case: usize, pairs: usize, rng: &mut RngStream) -> Vec<usize> {
    let per_sample: Vec<usize> = match case % 4 {
        0 => (0..pairs).map(|k| k % 3).collect(),
        // one dominant class plus singletons
        1 => (0..pairs).map(|k| if k < pairs - 2 { 0 } else { k }).collect(),
        // uniform random over 4 classes
        2 => (0..pairs).map(|_| rng.uniform(0.0, 4.0) as usize).collect(),
        // all distinct: every anchor has exactly its augmentation twin
        _ => (0..pairs).collect(),
    };
    per_sample.iter().flat_map(|&y| [y, y]).collect()
}

pub struct Instance {
    pub r: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub tau: f64,
}

pub fn instance(case: usize) -> Instance {
    let mut rng = RngStream::new(case as u64, "grad-fd", 0, 0);
    let pairs = 2 + case % 5;
    let g = 3 + case % 4;
    let labels = labels_for(case, pairs, &mut rng);
    let r = (0..2 * pairs)
        .map(|_| {
            let scale = rng.uniform(0.3, 3.0);
            (0..g).map(|_| scale * rng.uniform(-1.0, 1.0)).collect()
        })
        .collect();
    let tau = [0.1, 0.5, 1.0][case % 3];
    Instance { r, labels, tau }
}

pub fn to_matrix(rows: &[Vec<f64>]) -> Matrix {
    Matrix::from_rows(rows).unwrap()
}

pub fn batch_of(inst: &Instance) -> (ContrastiveBatch, Vec<f64>) {
    ContrastiveBatch::from_features(&to_matrix(&inst.r), inst.labels.clone(), inst.tau).unwrap()
}

pub fn random_matrix(rows: usize, cols: usize, rng: &mut RngStream) -> Matrix {
    Matrix::new(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.uniform(-1.0, 1.0)).collect(),
    )
    .unwrap()
}

/// Largest error seen by a sweep and where it occurred.
#[derive(Debug, Clone, Default)]
pub struct Worst {
    pub err: f64,
    pub at: String,
    pub cases: usize,
}

impl Worst {
    pub fn record(&mut self, err: f64, at: impl FnOnce() -> String) {
        // NaN must register as a failure
        if err.is_nan() || err > self.err {
            self.err = if err.is_nan() { f64::INFINITY } else { err };
            self.at = at();
        }
    }

    pub fn ok(&self, tol: f64) -> bool {
        self.err < tol
    }

    pub fn summary(&self) -> String {
        format!("{} cases, worst error {:.2e} ({})", self.cases, self.err, self.at)
    }
}

/// Anchor gradient w.r.t. z against FD of the oracle anchor loss. Anchors
/// without positives must receive an exactly zero row.
pub fn sweep_anchor_grad_z() -> Worst {
    let mut w = Worst::default();
    for case in 0..FD_CASES {
        let inst = instance(case);
        let (batch, _) = batch_of(&inst);
        let z = normalized(&inst.r);
        let g = sc_grad_z(&batch);
        for j in 0..z.len() {
            if oracle_anchor(&z, &inst.labels, inst.tau, j).is_none() {
                let e = if g.row(j).iter().all(|&v| v == 0.0) {
                    0.0
                } else {
                    f64::INFINITY
                };
                w.record(e, || format!("case {case} skipped anchor {j}"));
                continue;
            }
            let num = fd_row(&z, j, |zz| oracle_anchor(zz, &inst.labels, inst.tau, j).unwrap());
            w.record(rel(g.row(j), &num), || format!("case {case} anchor {j}"));
        }
        w.cases += 1;
    }
    w
}

/// Full-batch gradient w.r.t. z against FD of the summed oracle loss.
pub fn sweep_total_grad_z() -> Worst {
    let mut w = Worst::default();
    for case in 0..FD_CASES {
        let inst = instance(case);
        let (batch, _) = batch_of(&inst);
        let z = normalized(&inst.r);
        let g = sc_grad_z_total(&batch);
        for k in 0..z.len() {
            let num = fd_row(&z, k, |zz| oracle_sum(zz, &inst.labels, inst.tau));
            w.record(rel(g.row(k), &num), || format!("case {case} row {k}"));
        }
        w.cases += 1;
    }
    w
}

/// Anchor, total and mean gradients w.r.t. unnormalized features.
pub fn sweep_grad_r() -> Worst {
    let mut w = Worst::default();
    for case in 0..FD_CASES {
        let inst = instance(case);
        let (batch, norms) = batch_of(&inst);
        let anchor = sc_grad_r(&batch, &norms).unwrap();
        let total = sc_grad_r_total(&batch, &norms).unwrap();
        let (_, mean) = sc_mean_loss_and_grad_r(&batch, &norms).unwrap();
        if !anchor.degenerate.is_empty() {
            w.record(f64::INFINITY, || format!("case {case} reported degenerate rows"));
        }
        for j in 0..inst.r.len() {
            if oracle_anchor(&normalized(&inst.r), &inst.labels, inst.tau, j).is_some() {
                let num = fd_row(&inst.r, j, |rr| {
                    oracle_anchor(&normalized(rr), &inst.labels, inst.tau, j).unwrap()
                });
                w.record(rel(anchor.grad.row(j), &num), || {
                    format!("case {case} anchor {j}")
                });
            }
            let num = fd_row(&inst.r, j, |rr| {
                oracle_sum(&normalized(rr), &inst.labels, inst.tau)
            });
            w.record(rel(total.grad.row(j), &num), || {
                format!("case {case} row {j} (total)")
            });
            let num = fd_row(&inst.r, j, |rr| {
                oracle_mean(&normalized(rr), &inst.labels, inst.tau)
            });
            w.record(rel(mean.grad.row(j), &num), || {
                format!("case {case} row {j} (mean)")
            });
        }
        w.cases += 1;
    }
    w
}

/// Parameter and input gradients of the encoder under a random linear read-out.
pub fn sweep_encoder_backward() -> Worst {
    let mut w = Worst::default();
    for case in 0..100u64 {
        let mut rng = RngStream::new(case, "enc-fd", 0, 0);
        let d = 4 + (case % 4) as usize;
        let dims = [d, 6 + (case % 3) as usize, 5, 2 + (case % 2) as usize];
        let enc = Encoder::new(&dims, &mut rng).unwrap();
        let x = random_matrix(5, d, &mut rng);
        let upstream = random_matrix(5, dims[3], &mut rng);
        let objective = |e: &Encoder, x: &Matrix| dot(e.features(x).unwrap().as_slice(), upstream.as_slice());
        let (_, cache) = enc.forward(&x).unwrap();
        let (grads, gx) = enc.backward(&cache, &upstream).unwrap();
        let num = fd_params(&enc, |e| objective(e, &x));
        w.record(rel(&grads.flatten(), &num), || format!("case {case} params"));
        let num = fd_matrix(&x, |xx| objective(&enc, xx));
        w.record(rel(gx.as_slice(), &num), || format!("case {case} input"));
        w.cases += 1;
    }
    w
}

/// Loss gradients of one head family on imbalanced batches.
pub fn sweep_head(kind: HeadKind) -> Worst {
    let mut w = Worst::default();
    for case in 0..100u64 {
        let mut rng = RngStream::new(case, "head-fd", 0, 0);
        let g = 3 + (case % 4) as usize;
        let classes = 2 + (case % 4) as usize;
        let head = HeadParams::new(kind, g, classes, 6, &mut rng).unwrap();
        let mut r = random_matrix(7, g, &mut rng);
        r.scale(2.0);
        // mostly class 0
        let labels: Vec<usize> = (0..7).map(|i| if i < 5 { 0 } else { i % classes }).collect();
        let out = head.forward_loss(&r, &labels).unwrap();
        let num = fd_params(&head, |h| h.forward_loss(&r, &labels).unwrap().loss);
        w.record(rel(&out.grads.flatten(), &num), || {
            format!("{kind} case {case} params")
        });
        let num = fd_matrix(&r, |rr| head.forward_loss(rr, &labels).unwrap().loss);
        w.record(rel(out.grad_input.as_slice(), &num), || {
            format!("{kind} case {case} input")
        });
        w.cases += 1;
    }
    w
}

/// Largest |‖z_p − (z_j·z_p)z_j‖ − sqrt(1 − (z_j·z_p)²)| over random unit pairs.
pub fn sweep_tangent_identity(pairs: usize) -> Worst {
    let mut w = Worst::default();
    let mut rng = RngStream::new(11, "tangent", 0, 0);
    for i in 0..pairs {
        let g = 2 + i % 15;
        let a = unit(&(0..g).map(|_| rng.uniform(-1.0, 1.0)).collect::<Vec<_>>());
        let b = unit(&(0..g).map(|_| rng.uniform(-1.0, 1.0)).collect::<Vec<_>>());
        let c = dot(&a, &b);
        let lhs = repper::supcon::tangent_residual_norm(&a, &b);
        w.record((lhs - (1.0 - c * c).max(0.0).sqrt()).abs(), || {
            format!("pair {i}, g={g}")
        });
        w.cases += 1;
    }
    w
}

/// Labels only; features are irrelevant to partitioning.
pub fn label_dataset(classes: usize, per_class: usize) -> LabeledDataset {
    let labels: Vec<usize> = (0..classes).flat_map(|c| vec![c; per_class]).collect();
    let n = labels.len();
    LabeledDataset::new(Matrix::zeros(n, 1), labels, classes).unwrap()
}

pub fn partition(ds: &LabeledDataset, k: usize, alpha: f64, seed: u64) -> ClientPartition {
    dirichlet_partition(
        ds,
        &PartitionSpec::new(k, alpha),
        &mut RngStream::new(seed, "partition", 0, 0),
    )
    .unwrap()
}

pub fn class_counts(ds: &LabeledDataset, idx: &[usize]) -> Vec<usize> {
    let mut c = vec![0; ds.classes()];
    for &i in idx {
        c[ds.labels()[i]] += 1;
    }
    c
}

/// Fraction of (client, class) cells whose within-client class share is
/// within ±0.15 of uniform.
pub fn uniform_cell_fraction(ds: &LabeledDataset, part: &ClientPartition) -> f64 {
    let uniform = 1.0 / ds.classes() as f64;
    let mut ok = 0;
    let mut cells = 0;
    for idx in &part.indices {
        for n in class_counts(ds, idx) {
            cells += 1;
            if (n as f64 / idx.len() as f64 - uniform).abs() <= 0.15 {
                ok += 1;
            }
        }
    }
    ok as f64 / cells as f64
}

/// Per client, the number of classes making up under 1% of its samples.
pub fn rare_class_counts(ds: &LabeledDataset, part: &ClientPartition) -> Vec<usize> {
    part.indices
        .iter()
        .map(|idx| {
            class_counts(ds, idx)
                .iter()
                .filter(|&&n| (n as f64) < 0.01 * idx.len() as f64)
                .count()
        })
        .collect()
}

/// Disjoint, complete, deterministic under re-draw, with weights `n_i / n`.
pub fn partition_structure_ok(ds: &LabeledDataset, spec: &PartitionSpec, seed: u64) -> Result<(), String> {
    let draw = || dirichlet_partition(ds, spec, &mut RngStream::new(seed, "partition", 0, 0));
    let (a, b) = match (draw(), draw()) {
        (Ok(a), Ok(b)) => (a, b),
        (Err(_), Err(_)) => return Ok(()),
        _ => return Err("re-draw disagreed on success".into()),
    };
    if a != b {
        return Err("re-draw differs".into());
    }
    let mut all: Vec<usize> = a.indices.iter().flatten().copied().collect();
    all.sort_unstable();
    if all != (0..ds.len()).collect::<Vec<_>>() {
        return Err("not a partition of the samples".into());
    }
    if a.counts.iter().any(|&n| n < spec.min_size) {
        return Err("client below the size floor".into());
    }
    for (w, &n) in a.weights.iter().zip(&a.counts) {
        if *w != n as f64 / ds.len() as f64 {
            return Err("weight is not n_i / n".into());
        }
    }
    Ok(())
}
