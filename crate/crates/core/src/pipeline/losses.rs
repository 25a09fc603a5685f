//! Classification and triplet losses for mutual teaching.
//!
//! Teacher outputs enter as plain tensors, so no gradient can reach a
//! teacher through these functions.

use awb_tensor::{softmax_rows, Graph, Real, Tensor, Var};

use crate::error::{invalid, Result};

/// Distances below this are clamped before the square root.
const DIST_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub hard_ce: f64,
    pub soft_ce: f64,
    pub hard_tri: f64,
    pub soft_tri: f64,
    pub temperature: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { hard_ce: 0.5, soft_ce: 0.5, hard_tri: 0.5, soft_tri: 0.5, temperature: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [self.hard_ce, self.soft_ce, self.hard_tri, self.soft_tri];
        if w.iter().any(|&x| !(x >= 0.0 && x.is_finite())) || w.iter().all(|&x| x == 0.0) {
            return Err(invalid!("loss weights must be non-negative with at least one positive, got {w:?}"));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(invalid!("temperature must be positive, got {}", self.temperature));
        }
        Ok(())
    }
}

/// Weighted loss contributions of one step; `total` is their sum.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub hard_ce: f64,
    pub soft_ce: f64,
    /// Hard and soft triplet terms together.
    pub tri: f64,
}

impl LossParts {
    pub fn accumulate(&mut self, other: &LossParts) {
        self.total += other.total;
        self.hard_ce += other.hard_ce;
        self.soft_ce += other.soft_ce;
        self.tri += other.tri;
    }

    pub fn scaled(&self, s: f64) -> LossParts {
        LossParts { total: self.total * s, hard_ce: self.hard_ce * s, soft_ce: self.soft_ce * s, tri: self.tri * s }
    }
}

fn scalar<T: Real>(g: &Graph<T>, v: Var) -> f64 {
    g.value(v).data()[0].to_f64_lossy()
}

/// Mean of `−log softmax(logits)[i, labels[i]]`.
pub fn cross_entropy<T: Real>(g: &mut Graph<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    let shape = g.shape(logits).to_vec();
    let [n, k] = shape[..] else {
        return Err(invalid!("logits must be N×K, got {shape:?}"));
    };
    if labels.len() != n {
        return Err(invalid!("{} labels for {} rows", labels.len(), n));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(invalid!("label {bad} out of range for {k} classes"));
    }
    let lp = g.log_softmax(logits)?;
    let offsets: Vec<usize> = labels.iter().enumerate().map(|(i, &l)| i * k + l).collect();
    let picked = g.gather(lp, &offsets)?;
    let m = g.mean(picked)?;
    Ok(g.scale(m, T::of(-1.0))?)
}

/// `−(1/N) Σ_i Σ_j target_ij · log softmax(logits)_ij` with a fixed target.
pub fn soft_cross_entropy<T: Real>(g: &mut Graph<T>, logits: Var, target: &Tensor<T>) -> Result<Var> {
    if g.shape(logits) != target.shape() {
        return Err(invalid!("soft targets {:?} do not match logits {:?}", target.shape(), g.shape(logits)));
    }
    let n = target.shape()[0];
    let lp = g.log_softmax(logits)?;
    let t = g.constant(target.clone());
    let prod = g.mul(lp, t)?;
    let s = g.sum(prod)?;
    Ok(g.scale(s, T::of(-1.0 / n as f64))?)
}

/// Euclidean distance matrix of the rows of `e` (`N×D`).
pub fn pairwise_distances<T: Real>(g: &mut Graph<T>, e: Var) -> Result<Var> {
    let n = g.shape(e)[0];
    let sq = g.mul(e, e)?;
    let norms = g.sum_axis(sq, 1)?;
    let col = g.reshape(norms, &[n, 1])?;
    let row = g.reshape(norms, &[1, n])?;
    let gram = g.matmul_t(e, e, false, true)?;
    let gram2 = g.scale(gram, T::of(-2.0))?;
    let sum = g.add(col, row)?;
    let d2 = g.add(sum, gram2)?;
    let d2 = g.clamp_min(d2, T::of(DIST_FLOOR))?;
    Ok(g.sqrt(d2)?)
}

/// Plain-tensor counterpart of [`pairwise_distances`].
pub fn distance_matrix<T: Real>(e: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let v = g.constant(e.clone());
    let d = pairwise_distances(&mut g, v)?;
    Ok(g.value(d).clone())
}

/// Hardest positive and hardest negative per anchor, as flat offsets into
/// the `N×N` distance matrix. Anchors lacking either are skipped.
pub fn batch_hard_mining<T: Real>(dist: &Tensor<T>, labels: &[usize]) -> Result<Vec<(usize, usize)>> {
    let (n, m) = dist.dims2()?;
    if n != m || labels.len() != n {
        return Err(invalid!("mining needs an N×N matrix and N labels"));
    }
    let d = dist.data();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut pos: Option<usize> = None;
        let mut neg: Option<usize> = None;
        for j in 0..n {
            let o = i * n + j;
            if labels[j] == labels[i] {
                if j != i && pos.is_none_or(|p| d[o] > d[p]) {
                    pos = Some(o);
                }
            } else if neg.is_none_or(|q| d[o] < d[q]) {
                neg = Some(o);
            }
        }
        if let (Some(p), Some(q)) = (pos, neg) {
            out.push((p, q));
        }
    }
    Ok(out)
}

/// `log softmax([d_ap, d_an])` per mined anchor, `A×2`.
fn pair_log_softmax<T: Real>(g: &mut Graph<T>, dist: Var, mined: &[(usize, usize)]) -> Result<Var> {
    let a = mined.len();
    let ap: Vec<usize> = mined.iter().map(|m| m.0).collect();
    let an: Vec<usize> = mined.iter().map(|m| m.1).collect();
    let dap = g.gather(dist, &ap)?;
    let dap = g.reshape(dap, &[a, 1])?;
    let dan = g.gather(dist, &an)?;
    let dan = g.reshape(dan, &[a, 1])?;
    let pair = g.concat(&[dap, dan], 1)?;
    Ok(g.log_softmax(pair)?)
}

/// Margin-free batch-hard triplet loss `mean softplus(d_ap − d_an)`.
pub fn hard_triplet<T: Real>(g: &mut Graph<T>, dist: Var, mined: &[(usize, usize)]) -> Result<Option<Var>> {
    if mined.is_empty() {
        return Ok(None);
    }
    let lp = pair_log_softmax(g, dist, mined)?;
    let offsets: Vec<usize> = (0..mined.len()).map(|i| 2 * i + 1).collect();
    let picked = g.gather(lp, &offsets)?;
    let m = g.mean(picked)?;
    Ok(Some(g.scale(m, T::of(-1.0))?))
}

/// Cross-entropy between the student's `[d_ap, d_an]` softmax and the
/// teacher's over the same pairs.
pub fn soft_triplet<T: Real>(
    g: &mut Graph<T>,
    dist: Var,
    mined: &[(usize, usize)],
    teacher_dist: &Tensor<T>,
) -> Result<Option<Var>> {
    if mined.is_empty() {
        return Ok(None);
    }
    let td = teacher_dist.data();
    let mut pairs = Vec::with_capacity(2 * mined.len());
    for &(p, q) in mined {
        pairs.push(td[p]);
        pairs.push(td[q]);
    }
    let target = softmax_rows(&Tensor::new(&[mined.len(), 2], pairs)?)?;
    let lp = pair_log_softmax(g, dist, mined)?;
    Ok(Some(soft_cross_entropy_from_log(g, lp, &target)?))
}

fn soft_cross_entropy_from_log<T: Real>(g: &mut Graph<T>, lp: Var, target: &Tensor<T>) -> Result<Var> {
    let n = target.shape()[0];
    let t = g.constant(target.clone());
    let prod = g.mul(lp, t)?;
    let s = g.sum(prod)?;
    Ok(g.scale(s, T::of(-1.0 / n as f64))?)
}

/// Student-side inputs of a mutual loss.
#[derive(Clone, Copy, Debug)]
pub struct StudentOut {
    pub logits: Var,
    pub embedding: Var,
}

/// Teacher-side inputs: detached values.
#[derive(Clone, Copy, Debug)]
pub struct TeacherOut<'a, T> {
    pub logits: &'a Tensor<T>,
    pub embedding: &'a Tensor<T>,
}

/// The four-term mutual loss of one student supervised by the other
/// network's teacher.
pub fn mutual_losses<T: Real>(
    g: &mut Graph<T>,
    student: StudentOut,
    teacher: TeacherOut<'_, T>,
    labels: &[usize],
    w: &LossWeights,
) -> Result<(Var, LossParts)> {
    w.validate()?;
    let mut terms: Vec<Var> = Vec::new();
    let mut parts = LossParts::default();

    if w.hard_ce > 0.0 {
        let ce = cross_entropy(g, student.logits, labels)?;
        let ce = g.scale(ce, T::of(w.hard_ce))?;
        parts.hard_ce = scalar(g, ce);
        terms.push(ce);
    }
    if w.soft_ce > 0.0 {
        let t = teacher.logits.map(|v| v / T::of(w.temperature));
        let target = softmax_rows(&t)?;
        let sce = soft_cross_entropy(g, student.logits, &target)?;
        let sce = g.scale(sce, T::of(w.soft_ce))?;
        parts.soft_ce = scalar(g, sce);
        terms.push(sce);
    }
    if w.hard_tri > 0.0 || w.soft_tri > 0.0 {
        let dist = pairwise_distances(g, student.embedding)?;
        let mined = batch_hard_mining(g.value(dist), labels)?;
        if w.hard_tri > 0.0 {
            if let Some(t) = hard_triplet(g, dist, &mined)? {
                let t = g.scale(t, T::of(w.hard_tri))?;
                parts.tri += scalar(g, t);
                terms.push(t);
            }
        }
        if w.soft_tri > 0.0 {
            let tdist = distance_matrix(teacher.embedding)?;
            if let Some(t) = soft_triplet(g, dist, &mined, &tdist)? {
                let t = g.scale(t, T::of(w.soft_tri))?;
                parts.tri += scalar(g, t);
                terms.push(t);
            }
        }
    }
    let mut total = *terms.first().ok_or_else(|| invalid!("no loss term is active for this batch"))?;
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    parts.total = scalar(g, total);
    Ok((total, parts))
}

/// Supervised loss for source pre-training: `ce·CE + tri·triplet`.
pub fn supervised_loss<T: Real>(
    g: &mut Graph<T>,
    student: StudentOut,
    labels: &[usize],
    ce_weight: f64,
    tri_weight: f64,
) -> Result<(Var, LossParts)> {
    let mut parts = LossParts::default();
    let ce = cross_entropy(g, student.logits, labels)?;
    let ce = g.scale(ce, T::of(ce_weight))?;
    parts.hard_ce = scalar(g, ce);
    let mut total = ce;
    let dist = pairwise_distances(g, student.embedding)?;
    let mined = batch_hard_mining(g.value(dist), labels)?;
    if let Some(t) = hard_triplet(g, dist, &mined)? {
        let t = g.scale(t, T::of(tri_weight))?;
        parts.tri = scalar(g, t);
        total = g.add(total, t)?;
    }
    parts.total = scalar(g, total);
    Ok((total, parts))
}
