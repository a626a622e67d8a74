//! Generalized end-to-end loss, generic over the grouping factor: the same
//! math trains the speaker extractor (groups = speakers) and the environment
//! extractor (groups = environments).
//!
//! For embedding E of utterance j in group i, similarity against group k is
//! w * cos(E, C_k) + b, where the own-group entry (k == i) uses the
//! leave-one-out centroid. The loss is the sum over all rows of softmax
//! cross-entropy with target k = i.

use crate::autodiff::graph::EPS_NORM;
use crate::autodiff::{Graph, NodeId, Real, Shape};
use crate::error::{EattsError, Result};

/// Trainable scale for the similarity matrix; w stays positive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ge2eScale {
    pub w: f64,
    pub b: f64,
}

impl Ge2eScale {
    /// Standard initialization: w=10, b=-5.
    pub fn default_init() -> Ge2eScale {
        Ge2eScale { w: 10.0, b: -5.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.w <= 0.0 {
            return Err(EattsError::Parameter(format!(
                "ge2e scale w must be positive, got {}",
                self.w
            )));
        }
        Ok(())
    }
}

/// A batch of unit-norm embeddings: `groups` groups times `per_group`
/// utterances, row (i, j) at index i * per_group + j.
#[derive(Debug, Clone)]
pub struct EmbeddingBatch {
    pub groups: usize,
    pub per_group: usize,
    pub dim: usize,
    data: Vec<f64>,
}

impl EmbeddingBatch {
    pub fn new(groups: usize, per_group: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if per_group < 2 {
            return Err(EattsError::Contract(
                "ge2e batch needs >= 2 utterances per group (leave-one-out)".into(),
            ));
        }
        if data.len() != groups * per_group * dim {
            return Err(EattsError::Contract(format!(
                "batch data length {} != {}x{}x{}",
                data.len(),
                groups,
                per_group,
                dim
            )));
        }
        for r in 0..groups * per_group {
            let row = &data[r * dim..(r + 1) * dim];
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-5 {
                return Err(EattsError::Contract(format!(
                    "embedding row {r} has norm {norm}, expected 1"
                )));
            }
        }
        Ok(EmbeddingBatch {
            groups,
            per_group,
            dim,
            data,
        })
    }

    pub fn row(&self, i: usize, j: usize) -> &[f64] {
        let r = i * self.per_group + j;
        &self.data[r * self.dim..(r + 1) * self.dim]
    }

    pub fn rows(&self) -> usize {
        self.groups * self.per_group
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// (g*u) x g similarity matrix.
#[derive(Debug, Clone)]
pub struct SimilarityMatrix {
    pub rows: usize,
    pub groups: usize,
    pub data: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn at(&self, row: usize, k: usize) -> f64 {
        self.data[row * self.groups + k]
    }
}

fn check_group(batch: &EmbeddingBatch, i: usize) -> Result<()> {
    if i >= batch.groups {
        return Err(EattsError::Lookup(format!(
            "group index {i} out of range ({} groups)",
            batch.groups
        )));
    }
    Ok(())
}

/// Full centroid: plain mean of group i's rows, not renormalized.
pub fn centroid_full(batch: &EmbeddingBatch, i: usize) -> Result<Vec<f64>> {
    check_group(batch, i)?;
    let mut c = vec![0.0; batch.dim];
    for j in 0..batch.per_group {
        for (acc, &v) in c.iter_mut().zip(batch.row(i, j).iter()) {
            *acc += v;
        }
    }
    for v in c.iter_mut() {
        *v /= batch.per_group as f64;
    }
    Ok(c)
}

/// Leave-one-out centroid: mean of group i excluding utterance j. The
/// identity u*C_i == (u-1)*C_i^(-j) + E_ij holds exactly.
pub fn centroid_loo(batch: &EmbeddingBatch, i: usize, j: usize) -> Result<Vec<f64>> {
    check_group(batch, i)?;
    if j >= batch.per_group {
        return Err(EattsError::Lookup(format!(
            "utterance index {j} out of range ({} per group)",
            batch.per_group
        )));
    }
    let mut c = vec![0.0; batch.dim];
    for m in 0..batch.per_group {
        if m == j {
            continue;
        }
        for (acc, &v) in c.iter_mut().zip(batch.row(i, m).iter()) {
            *acc += v;
        }
    }
    for v in c.iter_mut() {
        *v /= (batch.per_group - 1) as f64;
    }
    Ok(c)
}

fn guarded_cos(a: &[f64], b: &[f64]) -> Result<f64> {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na <= EPS_NORM || nb <= EPS_NORM {
        return Err(EattsError::Degenerate(format!(
            "cosine with near-zero norm ({na}, {nb})"
        )));
    }
    let dot: f64 = a.iter().zip(b.iter()).map(|(x, y)| x * y).sum();
    Ok(dot / ((na + EPS_NORM) * (nb + EPS_NORM)))
}

/// Scaled-cosine similarity of every row against every group centroid;
/// own-group entries use the leave-one-out centroid.
pub fn similarity_matrix(batch: &EmbeddingBatch, scale: &Ge2eScale) -> Result<SimilarityMatrix> {
    scale.validate()?;
    let full: Vec<Vec<f64>> = (0..batch.groups)
        .map(|i| centroid_full(batch, i))
        .collect::<Result<_>>()?;
    let mut data = Vec::with_capacity(batch.rows() * batch.groups);
    for i in 0..batch.groups {
        for j in 0..batch.per_group {
            let e = batch.row(i, j);
            for (k, ck) in full.iter().enumerate() {
                let cos = if k == i {
                    let loo = centroid_loo(batch, i, j)?;
                    guarded_cos(e, &loo)?
                } else {
                    guarded_cos(e, ck)?
                };
                data.push(scale.w * cos + scale.b);
            }
        }
    }
    Ok(SimilarityMatrix {
        rows: batch.rows(),
        groups: batch.groups,
        data,
    })
}

/// GE2E loss: sum over all g*u rows of -log softmax(S[row])[own group].
/// Log-sum-exp uses max subtraction.
pub fn ge2e_loss(batch: &EmbeddingBatch, scale: &Ge2eScale) -> Result<f64> {
    let sim = similarity_matrix(batch, scale)?;
    let mut total = 0.0;
    for i in 0..batch.groups {
        for j in 0..batch.per_group {
            let r = i * batch.per_group + j;
            let row = &sim.data[r * sim.groups..(r + 1) * sim.groups];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|&s| (s - m).exp()).sum::<f64>().ln();
            total += lse - row[i];
        }
    }
    Ok(total)
}

// ── Tape construction for training ─────────────────────────────────────

/// Group-mean matrix M (g x g*u) with 1/u at each member column.
fn mean_matrix<T: Real>(groups: usize, per_group: usize) -> (Shape, Vec<T>) {
    let rows = groups * per_group;
    let mut data = vec![T::ZERO; groups * rows];
    let inv = T::from_f64(1.0 / per_group as f64);
    for i in 0..groups {
        for j in 0..per_group {
            data[i * rows + i * per_group + j] = inv;
        }
    }
    (Shape::matrix(groups, rows), data)
}

/// Row-to-group indicator P (g*u x g).
fn indicator_matrix<T: Real>(groups: usize, per_group: usize) -> (Shape, Vec<T>) {
    let rows = groups * per_group;
    let mut data = vec![T::ZERO; rows * groups];
    for i in 0..groups {
        for j in 0..per_group {
            data[(i * per_group + j) * groups + i] = T::ONE;
        }
    }
    (Shape::matrix(rows, groups), data)
}

fn guarded_row_norms<T: Real>(g: &mut Graph<T>, x: NodeId, what: &str) -> Result<NodeId> {
    let sq = g.mul(x, x)?;
    let sums = g.row_sum(sq)?;
    for (r, &s) in g.value(sums).iter().enumerate() {
        if s.to_f64().sqrt() <= EPS_NORM {
            return Err(EattsError::Degenerate(format!(
                "{what} row {r} has near-zero norm"
            )));
        }
    }
    let norms = g.sqrt(sums);
    Ok(g.add_const(norms, T::from_f64(EPS_NORM)))
}

/// Builds the similarity matrix on the tape. `emb` is (g*u x d) with rows in
/// group-major order; `w` and `b` are scalar nodes.
pub fn similarity_graph<T: Real>(
    g: &mut Graph<T>,
    emb: NodeId,
    w: NodeId,
    b: NodeId,
    groups: usize,
    per_group: usize,
) -> Result<NodeId> {
    let rows = groups * per_group;
    if g.shape(emb).rank() != 2 || g.shape(emb).rows() != rows {
        return Err(EattsError::dim(
            "similarity_graph embeddings",
            g.shape(emb).dims(),
            &[rows, 0],
        ));
    }
    if per_group < 2 {
        return Err(EattsError::Contract(
            "ge2e needs >= 2 utterances per group".into(),
        ));
    }
    let w_val = g.scalar_value(w).to_f64();
    if w_val <= 0.0 {
        return Err(EattsError::Parameter(format!(
            "ge2e scale w must be positive, got {w_val}"
        )));
    }
    let u = per_group as f64;

    // Full centroids C = M * E (g x d).
    let (ms, md) = mean_matrix::<T>(groups, per_group);
    let m = g.constant(ms, md)?;
    let centroids = g.matmul(m, emb)?;

    // Per-row leave-one-out centroids L = (u*C_i - E) / (u-1)  (g*u x d).
    let (ps, pd) = indicator_matrix::<T>(groups, per_group);
    let p = g.constant(ps, pd)?;
    let own_centroid = g.matmul(p, centroids)?;
    let scaled_own = g.scale(own_centroid, T::from_f64(u / (u - 1.0)));
    let scaled_emb = g.scale(emb, T::from_f64(1.0 / (u - 1.0)));
    let loo = g.sub(scaled_own, scaled_emb)?;

    // Cosines against full centroids: E . C_k / (|E_r| |C_k|), guarded.
    let numer_full = {
        let ct = g.transpose(centroids)?;
        g.matmul(emb, ct)?
    };
    let norm_e = guarded_row_norms(g, emb, "embedding")?;
    let norm_c = guarded_row_norms(g, centroids, "centroid")?;
    let norm_e_col = g.reshape(norm_e, Shape::matrix(rows, 1))?;
    let norm_c_row = g.reshape(norm_c, Shape::matrix(1, groups))?;
    let denom_full = g.matmul(norm_e_col, norm_c_row)?;
    let cos_full = g.div(numer_full, denom_full)?;

    // Cosines against own leave-one-out centroid, one per row.
    let prod = g.mul(emb, loo)?;
    let numer_loo = g.row_sum(prod)?;
    let norm_loo = guarded_row_norms(g, loo, "leave-one-out centroid")?;
    let denom_loo = g.mul(norm_e, norm_loo)?;
    let cos_loo = g.div(numer_loo, denom_loo)?;

    // Mix: own-group entries take the LOO cosine, the rest take the full one.
    let cos_loo_col = g.reshape(cos_loo, Shape::matrix(rows, 1))?;
    let ones_row = g.constant(Shape::matrix(1, groups), vec![T::ONE; groups])?;
    let cos_loo_mat = g.matmul(cos_loo_col, ones_row)?;
    let (is, id) = indicator_matrix::<T>(groups, per_group);
    let not_id: Vec<T> = id.iter().map(|&v| T::ONE - v).collect();
    let ind = g.constant(is.clone(), id)?;
    let not_ind = g.constant(is, not_id)?;
    let off_part = g.mul(cos_full, not_ind)?;
    let own_part = g.mul(cos_loo_mat, ind)?;
    let cos_mixed = g.add(off_part, own_part)?;

    let scaled = g.mul_scalar_node(cos_mixed, w)?;
    g.add_scalar_node(scaled, b)
}

/// GE2E loss on the tape: softmax cross-entropy per row, summed.
pub fn ge2e_loss_graph<T: Real>(
    g: &mut Graph<T>,
    emb: NodeId,
    w: NodeId,
    b: NodeId,
    groups: usize,
    per_group: usize,
) -> Result<NodeId> {
    let sim = similarity_graph(g, emb, w, b, groups, per_group)?;
    let rows = groups * per_group;

    // Detached per-row max: the log-sum-exp shift cancels analytically, so
    // treating it as a constant leaves gradients exact.
    let sim_vals = g.value(sim).to_vec();
    let mut row_max = Vec::with_capacity(rows);
    for r in 0..rows {
        let m = sim_vals[r * groups..(r + 1) * groups]
            .iter()
            .fold(T::from_f64(f64::NEG_INFINITY), |a, &b| a.max_val(b));
        row_max.push(m);
    }
    let max_mat: Vec<T> = (0..rows * groups).map(|i| row_max[i / groups]).collect();
    let max_mat = g.constant(Shape::matrix(rows, groups), max_mat)?;
    let max_vec = g.constant(Shape::vector(rows), row_max)?;

    let shifted = g.sub(sim, max_mat)?;
    let exps = g.exp(shifted);
    let sums = g.row_sum(exps)?;
    let log_sums = g.ln(sums);
    let lse = g.add(log_sums, max_vec)?;

    let (is, id) = indicator_matrix::<T>(groups, per_group);
    let ind = g.constant(is, id)?;
    let own = g.mul(sim, ind)?;
    let target = g.row_sum(own)?;

    let per_row = g.sub(lse, target)?;
    Ok(g.sum_all(per_row))
}
