//! Metadata matrices and the least-squares machinery shared by MDN and PMDN.
//!
//! Features are modelled as `f = M beta + r`. The closed form
//! `beta = (M^T M + eps I)^-1 M^T f` is computed here once per training set
//! ([`invert_gram`]), then reused either over the full data
//! ([`solve_beta_full`]) or per mini-batch ([`batch_beta_estimate`]).

use crate::error::{Error, Result};
use crate::tensor::{Op, Tensor};

/// Ridge term added to `M^T M` unless the caller asks otherwise.
pub const DEFAULT_RIDGE_EPS: f64 = 1e-8;

/// Condition-number estimate beyond which the gram matrix is rejected.
pub const MAX_CONDITION: f64 = 1e12;

/// What a metadata column carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ColumnRole {
    /// Constant 1.0 column.
    Intercept,
    /// A z-scored confounding variable.
    Confounder,
    /// The group label, appended during training only.
    LabelAug,
}

impl ColumnRole {
    pub fn code(self) -> u8 {
        match self {
            ColumnRole::Intercept => 0,
            ColumnRole::Confounder => 1,
            ColumnRole::LabelAug => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(ColumnRole::Intercept),
            1 => Some(ColumnRole::Confounder),
            2 => Some(ColumnRole::LabelAug),
            _ => None,
        }
    }
}

/// Mean and (population) standard deviation used to z-score one column.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ColumnStats {
    pub mean: f64,
    pub std: f64,
}

impl ColumnStats {
    pub fn fit(values: &[f64]) -> Result<Self> {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt();
        if !(std > 0.0) {
            return Err(Error::ConstantInput);
        }
        Ok(Self { mean, std })
    }

    pub fn apply(&self, v: f64) -> f64 {
        (v - self.mean) / self.std
    }
}

fn check_roles(roles: &[ColumnRole]) -> Result<()> {
    let count = |r| roles.iter().filter(|&&x| x == r).count();
    if count(ColumnRole::Intercept) > 1 {
        return Err(Error::InvalidMetadata("more than one intercept column".into()));
    }
    match count(ColumnRole::LabelAug) {
        0 => Ok(()),
        1 if roles.last() == Some(&ColumnRole::LabelAug) => Ok(()),
        1 => Err(Error::InvalidMetadata("label column must be last".into())),
        _ => Err(Error::InvalidMetadata("more than one label column".into())),
    }
}

/// N x K per-sample metadata with column roles and the z-score constants
/// needed to replay the same transform on unseen rows.
#[derive(Debug, Clone, PartialEq)]
pub struct MetadataMatrix {
    values: Tensor,
    roles: Vec<ColumnRole>,
    /// One entry per `Confounder` column, in column order.
    standardization: Vec<ColumnStats>,
}

impl MetadataMatrix {
    /// Builds a training matrix: optional intercept, z-scored confounders
    /// (constants fitted on these rows), optional label column last.
    pub fn fit(confounders: &Tensor, labels: Option<&[f64]>, intercept: bool) -> Result<Self> {
        let (n, q) = confounders.dims()?;
        let stats = (0..q)
            .map(|j| {
                let col: Vec<f64> = (0..n).map(|i| confounders.at(i, j)).collect();
                ColumnStats::fit(&col)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::assemble(confounders, labels, intercept, stats)
    }

    /// Applies this matrix's intercept choice and z-score constants to new
    /// raw confounder rows. The label column is included only if `labels`
    /// is given.
    pub fn replay(&self, confounders: &Tensor, labels: Option<&[f64]>) -> Result<Self> {
        let intercept = self.roles.contains(&ColumnRole::Intercept);
        Self::assemble(confounders, labels, intercept, self.standardization.clone())
    }

    fn assemble(
        confounders: &Tensor,
        labels: Option<&[f64]>,
        intercept: bool,
        stats: Vec<ColumnStats>,
    ) -> Result<Self> {
        let (n, q) = confounders.dims()?;
        if stats.len() != q {
            return Err(Error::shape("metadata confounders", stats.len(), q));
        }
        if let Some(l) = labels {
            if l.len() != n {
                return Err(Error::shape("metadata labels", n, l.len()));
            }
        }
        let mut roles = Vec::new();
        if intercept {
            roles.push(ColumnRole::Intercept);
        }
        roles.extend(std::iter::repeat_n(ColumnRole::Confounder, q));
        if labels.is_some() {
            roles.push(ColumnRole::LabelAug);
        }
        let k = roles.len();
        if k == 0 {
            return Err(Error::InvalidMetadata("no columns".into()));
        }
        let mut data = Vec::with_capacity(n * k);
        for i in 0..n {
            if intercept {
                data.push(1.0);
            }
            for (j, s) in stats.iter().enumerate() {
                data.push(s.apply(confounders.at(i, j)));
            }
            if let Some(l) = labels {
                data.push(l[i]);
            }
        }
        let values = Tensor::from_finite([n, k], data)?;
        Ok(Self {
            values,
            roles,
            standardization: stats,
        })
    }

    /// Wraps already-prepared values. Intercept and label layout are
    /// validated; confounder columns are taken as given.
    pub fn from_parts(values: Tensor, roles: Vec<ColumnRole>) -> Result<Self> {
        let (n, k) = values.dims()?;
        if roles.len() != k {
            return Err(Error::shape("metadata roles", k, roles.len()));
        }
        check_roles(&roles)?;
        values.check_finite("metadata")?;
        if let Some(c) = roles.iter().position(|&r| r == ColumnRole::Intercept) {
            if (0..n).any(|i| values.at(i, c) != 1.0) {
                return Err(Error::InvalidMetadata("intercept column must be all ones".into()));
            }
        }
        let q = roles.iter().filter(|&&r| r == ColumnRole::Confounder).count();
        Ok(Self {
            values,
            roles,
            standardization: vec![ColumnStats { mean: 0.0, std: 1.0 }; q],
        })
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn roles(&self) -> &[ColumnRole] {
        &self.roles
    }

    pub fn standardization(&self) -> &[ColumnStats] {
        &self.standardization
    }

    pub fn n_rows(&self) -> usize {
        self.values.rows()
    }

    pub fn n_cols(&self) -> usize {
        self.roles.len()
    }

    pub fn label_column(&self) -> Option<usize> {
        self.roles.iter().position(|&r| r == ColumnRole::LabelAug)
    }

    /// The same matrix with the label column removed (inference layout).
    pub fn without_label(&self) -> Result<Self> {
        match self.label_column() {
            None => Ok(self.clone()),
            Some(c) => {
                let mut roles = self.roles.clone();
                roles.remove(c);
                Ok(Self {
                    values: self.values.drop_column(c)?,
                    roles,
                    standardization: self.standardization.clone(),
                })
            }
        }
    }

    pub fn batch(&self, idx: &[usize]) -> Result<MetaBatch> {
        MetaBatch::new(self.values.select_rows(idx)?, self.roles.clone())
    }

    pub fn all_rows(&self) -> MetaBatch {
        MetaBatch {
            values: self.values.clone(),
            roles: self.roles.clone(),
        }
    }

    pub fn gram_inverse(&self, ridge_eps: f64) -> Result<GramInverse> {
        invert_gram(&self.values, ridge_eps)
    }
}

/// Metadata rows for one mini-batch (no z-score bookkeeping).
#[derive(Debug, Clone, PartialEq)]
pub struct MetaBatch {
    values: Tensor,
    roles: Vec<ColumnRole>,
}

impl MetaBatch {
    pub fn new(values: Tensor, roles: Vec<ColumnRole>) -> Result<Self> {
        let (_, k) = values.dims()?;
        if roles.len() != k {
            return Err(Error::shape("metadata batch roles", k, roles.len()));
        }
        check_roles(&roles)?;
        Ok(Self { values, roles })
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut Tensor {
        &mut self.values
    }

    pub fn roles(&self) -> &[ColumnRole] {
        &self.roles
    }

    pub fn rows(&self) -> usize {
        self.values.rows()
    }

    pub fn label_column(&self) -> Option<usize> {
        self.roles.iter().position(|&r| r == ColumnRole::LabelAug)
    }

    pub fn without_label(&self) -> Result<Self> {
        match self.label_column() {
            None => Ok(self.clone()),
            Some(c) => {
                let mut roles = self.roles.clone();
                roles.remove(c);
                Ok(Self {
                    values: self.values.drop_column(c)?,
                    roles,
                })
            }
        }
    }
}

/// `(M^T M + eps I)^-1` for a full training matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct GramInverse {
    matrix: Tensor,
    ridge_eps: f64,
    source_rows: usize,
}

impl GramInverse {
    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }

    pub fn ridge_eps(&self) -> f64 {
        self.ridge_eps
    }

    pub fn source_rows(&self) -> usize {
        self.source_rows
    }

    pub fn dim(&self) -> usize {
        self.matrix.rows()
    }

    /// Rebuilds from stored parts (checkpoint loading).
    pub fn from_parts(matrix: Tensor, ridge_eps: f64, source_rows: usize) -> Result<Self> {
        let (r, c) = matrix.dims()?;
        if r != c {
            return Err(Error::shape("gram inverse", "square", format!("{r}x{c}")));
        }
        Ok(Self {
            matrix,
            ridge_eps,
            source_rows,
        })
    }
}

/// LU factorization with partial pivoting, stored compactly.
struct Lu {
    n: usize,
    lu: Vec<f64>,
    perm: Vec<usize>,
}

impl Lu {
    fn factor(a: &[f64], n: usize) -> Option<Self> {
        let mut lu = a.to_vec();
        let mut perm: Vec<usize> = (0..n).collect();
        let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for col in 0..n {
            let (piv, max) = (col..n)
                .map(|r| (r, lu[r * n + col].abs()))
                .fold((col, -1.0), |best, x| if x.1 > best.1 { x } else { best });
            if max <= scale * f64::EPSILON * n as f64 || max == 0.0 {
                return None;
            }
            if piv != col {
                for j in 0..n {
                    lu.swap(piv * n + j, col * n + j);
                }
                perm.swap(piv, col);
            }
            let d = lu[col * n + col];
            for r in col + 1..n {
                let factor = lu[r * n + col] / d;
                lu[r * n + col] = factor;
                for j in col + 1..n {
                    lu[r * n + j] -= factor * lu[col * n + j];
                }
            }
        }
        Some(Self { n, lu, perm })
    }

    fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut x: Vec<f64> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 0..n {
            for j in 0..i {
                x[i] -= self.lu[i * n + j] * x[j];
            }
        }
        for i in (0..n).rev() {
            for j in i + 1..n {
                x[i] -= self.lu[i * n + j] * x[j];
            }
            x[i] /= self.lu[i * n + i];
        }
        x
    }
}

fn one_norm(a: &[f64], n: usize) -> f64 {
    (0..n)
        .map(|j| (0..n).map(|i| a[i * n + j].abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// `(M^T M + ridge_eps I)^-1` through a partially pivoted LU solve.
pub fn invert_gram(m: &Tensor, ridge_eps: f64) -> Result<GramInverse> {
    let (n, k) = m.dims()?;
    if n < k {
        return Err(Error::shape("invert_gram", format!("at least {k} rows"), n));
    }
    if !(ridge_eps >= 0.0) {
        return Err(Error::Config(format!("ridge_eps must be >= 0, got {ridge_eps}")));
    }
    let mut gram = m.matmul_op(Op::T, m, Op::N)?;
    for i in 0..k {
        let v = gram.at(i, i) + ridge_eps;
        gram.set(i, i, v);
    }
    let lu = Lu::factor(gram.data(), k).ok_or(Error::SingularGram {
        condition: f64::INFINITY,
    })?;
    let mut inv = vec![0.0; k * k];
    let mut e = vec![0.0; k];
    for j in 0..k {
        e.fill(0.0);
        e[j] = 1.0;
        let col = lu.solve(&e);
        for i in 0..k {
            inv[i * k + j] = col[i];
        }
    }
    let condition = one_norm(gram.data(), k) * one_norm(&inv, k);
    if !condition.is_finite() || condition > MAX_CONDITION {
        return Err(Error::SingularGram { condition });
    }
    for i in 0..k {
        for j in i + 1..k {
            let s = 0.5 * (inv[i * k + j] + inv[j * k + i]);
            inv[i * k + j] = s;
            inv[j * k + i] = s;
        }
    }
    Ok(GramInverse {
        matrix: Tensor::new([k, k], inv)?,
        ridge_eps,
        source_rows: n,
    })
}

/// `scale * G^-1 * M^T F` for a `rows x K` metadata block and `rows x C`
/// features; returns `K x C`.
pub(crate) fn weighted_normal_solve(
    gram_inv: &GramInverse,
    m: &Tensor,
    f: &Tensor,
    scale: f64,
) -> Result<Tensor> {
    let (rows, k) = m.dims()?;
    let (frows, _) = f.dims()?;
    if frows != rows {
        return Err(Error::shape("feature rows", rows, frows));
    }
    if k != gram_inv.dim() {
        return Err(Error::shape("metadata columns", gram_inv.dim(), k));
    }
    let mtf = m.matmul_op(Op::T, f, Op::N)?;
    let mut beta = gram_inv.matrix.matmul(&mtf)?;
    if scale != 1.0 {
        beta.data_mut().iter_mut().for_each(|v| *v *= scale);
    }
    Ok(beta)
}

fn as_column(f: &Tensor, rows: usize, context: &'static str) -> Result<Tensor> {
    if f.len() != rows {
        return Err(Error::shape(context, rows, f.len()));
    }
    Tensor::new([rows, 1], f.data().to_vec())
}

/// Full-data least squares `beta = G^-1 M^T f`.
pub fn solve_beta_full(m: &Tensor, f: &Tensor, gram_inv: &GramInverse) -> Result<Tensor> {
    let (n, k) = m.dims()?;
    let f = as_column(f, n, "solve_beta_full features")?;
    let beta = weighted_normal_solve(gram_inv, m, &f, 1.0)?;
    beta.reshape([k])
}

/// Mini-batch estimate `(N / b) G^-1 sum_i m_i f_i`, where `G^-1` was built
/// on all `n_total` training rows.
pub fn batch_beta_estimate(
    gram_inv: &GramInverse,
    m_batch: &Tensor,
    f_batch: &Tensor,
    n_total: usize,
) -> Result<Tensor> {
    let (b, k) = m_batch.dims()?;
    let f = as_column(f_batch, b, "batch_beta_estimate features")?;
    let beta = weighted_normal_solve(gram_inv, m_batch, &f, n_total as f64 / b as f64)?;
    beta.reshape([k])
}

/// `f - M beta` for a single feature column.
pub fn residual(m: &Tensor, f: &Tensor, beta: &Tensor) -> Result<Tensor> {
    let (n, k) = m.dims()?;
    let f = as_column(f, n, "residual features")?;
    let beta = as_column(beta, k, "residual beta")?;
    let fit = m.matmul(&beta)?;
    f.sub(&fit)?.reshape([n])
}
