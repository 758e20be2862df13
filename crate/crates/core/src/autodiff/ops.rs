use std::sync::Arc;

use rand::Rng;

use super::pattern::{Mask, Pattern};
use super::tape::{Binary, Op, Tape, Unary, Var};
use super::tensor::Tensor;
use crate::distributions::WeibullGammaKl;
use crate::error::{BamError, Result};

/// Output shape of a broadcast binary op: shapes must match, one side must be
/// a single value, or the smaller shape (leading 1s ignored) must equal the
/// trailing dimensions of the larger.
fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    fn strip(s: &[usize]) -> &[usize] {
        let lead = s.iter().take_while(|&&d| d == 1).count();
        &s[lead.min(s.len().saturating_sub(1))..]
    }
    let (la, lb): (usize, usize) = (a.iter().product(), b.iter().product());
    if a == b || lb == 1 {
        return Ok(a.to_vec());
    }
    if la == 1 {
        return Ok(b.to_vec());
    }
    let (big, small) = if la >= lb { (a, b) } else { (b, a) };
    let small = strip(small);
    if big.ends_with(small) {
        Ok(big.to_vec())
    } else {
        Err(BamError::Dimension(format!(
            "cannot broadcast shapes {a:?} and {b:?}"
        )))
    }
}

impl Tape {
    fn unary(&mut self, kind: Unary, a: Var, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(a).map(f);
        self.push(value, Op::Unary(kind, a), &[a])
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let shape = broadcast_shape(self.shape(a), self.shape(b))?;
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let (la, lb) = (ad.len(), bd.len());
        let len: usize = shape.iter().product();
        if kind == Binary::Div && bd.contains(&0.0) {
            return Err(BamError::Domain("division by zero".into()));
        }
        let data = (0..len)
            .map(|i| {
                let (x, y) = (ad[i % la], bd[i % lb]);
                match kind {
                    Binary::Add => x + y,
                    Binary::Sub => x - y,
                    Binary::Mul => x * y,
                    Binary::Div => x / y,
                }
            })
            .collect();
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Binary(kind, a, b), &[a, b]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        av.require_matrix("matmul")?;
        bv.require_matrix("matmul")?;
        let (m, k, n) = (av.rows(), av.cols(), bv.cols());
        if bv.rows() != k {
            return Err(BamError::Dimension(format!(
                "matmul inner dimensions differ: {:?} x {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let (ad, bd) = (av.data(), bv.data());
        let mut out = vec![0.0; m * n];
        if n == 1 {
            for (o, arow) in out.iter_mut().zip(ad.chunks_exact(k)) {
                *o = arow.iter().zip(bd).map(|(x, y)| x * y).sum();
            }
            let value = Tensor::matrix(m, n, out)?;
            return Ok(self.push(value, Op::MatMul(a, b), &[a, b]));
        }
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let a_ip = ad[i * k + p];
                // Bag-of-words features are mostly zeros.
                if a_ip == 0.0 {
                    continue;
                }
                for (o, &b) in orow.iter_mut().zip(&bd[p * n..(p + 1) * n]) {
                    *o += a_ip * b;
                }
            }
        }
        let value = Tensor::matrix(m, n, out)?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).transpose()?;
        Ok(self.push(value, Op::Transpose(a), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        Ok(self.push(value, Op::Reshape(a), &[a]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(Unary::Exp, a, f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(x) = self.value(a).data().iter().find(|&&x| x <= 0.0 || x.is_nan()) {
            return Err(BamError::Domain(format!("log of non-positive value {x}")));
        }
        Ok(self.unary(Unary::Log, a, f64::ln))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(Unary::Neg, a, |x| -x)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(Unary::Relu, a, |x| x.max(0.0))
    }

    /// Exponential linear unit with unit scale.
    pub fn elu(&mut self, a: Var) -> Var {
        self.unary(Unary::Elu, a, |x| if x > 0.0 { x } else { x.exp_m1() })
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.unary(Unary::LeakyRelu(slope), a, move |x| if x > 0.0 { x } else { slope * x })
    }

    pub fn pow_const(&mut self, a: Var, p: f64) -> Var {
        self.unary(Unary::PowConst(p), a, move |x| x.powf(p))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(Unary::Scale(c), a, move |x| c * x)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(Unary::AddScalar(c), a, move |x| x + c)
    }

    /// Elementwise product with a constant of the same length.
    pub fn mul_const(&mut self, a: Var, c: Arc<Vec<f64>>) -> Result<Var> {
        let av = self.value(a);
        if c.len() != av.len() {
            return Err(BamError::Dimension(format!(
                "constant of length {} against tensor of length {}",
                c.len(),
                av.len()
            )));
        }
        let data = av.data().iter().zip(c.iter()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(value, Op::MulConst(a, c), &[a]))
    }

    /// Elementwise sum with a constant of the same length.
    pub fn add_const(&mut self, a: Var, c: Arc<Vec<f64>>) -> Result<Var> {
        let av = self.value(a);
        if c.len() != av.len() {
            return Err(BamError::Dimension(format!(
                "constant of length {} against tensor of length {}",
                c.len(),
                av.len()
            )));
        }
        let data = av.data().iter().zip(c.iter()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(value, Op::AddConst(a), &[a]))
    }

    /// Row-wise softmax with per-row max subtraction. Masked entries are
    /// exactly zero and excluded from the normalizer.
    pub fn softmax_rows(&mut self, x: Var, mask: Option<Arc<Mask>>) -> Result<Var> {
        let xv = self.value(x);
        xv.require_matrix("softmax_rows")?;
        let (r, c) = (xv.rows(), xv.cols());
        if let Some(mask) = &mask {
            if mask.rows() != r || mask.cols() != c {
                return Err(BamError::Dimension(format!(
                    "mask {}x{} against scores {r}x{c}",
                    mask.rows(),
                    mask.cols()
                )));
            }
        }
        let keep = |i: usize, j: usize| mask.as_ref().is_none_or(|m| m.allowed(i, j));
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = xv.row(i);
            let max = (0..c)
                .filter(|&j| keep(i, j))
                .map(|j| row[j])
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(BamError::DegenerateRow { row: i });
            }
            let mut z = 0.0;
            for j in (0..c).filter(|&j| keep(i, j)) {
                let e = (row[j] - max).exp();
                out[i * c + j] = e;
                z += e;
            }
            out[i * c..(i + 1) * c].iter_mut().for_each(|v| *v /= z);
        }
        let value = Tensor::matrix(r, c, out)?;
        Ok(self.push(value, Op::SoftmaxRows(x), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let value = Tensor::scalar(v.sum() / v.len() as f64);
        self.push(value, Op::Mean(x), &[x])
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.axis_reduce(x, axis, false)
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.axis_reduce(x, axis, true)
    }

    fn axis_reduce(&mut self, x: Var, axis: usize, mean: bool) -> Result<Var> {
        let xv = self.value(x);
        let shape = xv.shape();
        if axis >= shape.len() {
            return Err(BamError::Dimension(format!(
                "axis {axis} out of range for shape {shape:?}"
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let xd = xv.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                for i in 0..inner {
                    out[o * inner + i] += xd[(o * len + l) * inner + i];
                }
            }
        }
        if mean {
            out.iter_mut().for_each(|v| *v /= len as f64);
        }
        let mut out_shape: Vec<usize> = shape[..axis].iter().chain(&shape[axis + 1..]).copied().collect();
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push(
            value,
            Op::AxisReduce {
                x,
                outer,
                len,
                inner,
                mean,
            },
            &[x],
        ))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| BamError::Dimension("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(BamError::Dimension(format!(
                "axis {axis} out of range for shape {base:?}"
            )));
        }
        let mut axis_total = 0;
        for v in inputs {
            let s = self.shape(*v);
            let agrees = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !agrees {
                return Err(BamError::Dimension(format!(
                    "cannot concatenate {s:?} with {base:?} along axis {axis}"
                )));
            }
            axis_total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let chunks: Vec<usize> = inputs
            .iter()
            .map(|v| self.value(*v).len() / outer)
            .collect();
        let total: usize = chunks.iter().sum();
        let mut out = Vec::with_capacity(outer * total);
        for o in 0..outer {
            for (v, &chunk) in inputs.iter().zip(&chunks) {
                out.extend_from_slice(&self.value(*v).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = axis_total;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                outer,
                chunks,
            },
            inputs,
        ))
    }

    /// Inverted dropout: in training each entry is zeroed with probability
    /// `p` and survivors are scaled by `1/(1-p)`; otherwise the identity.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R, training: bool) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(BamError::Parameter(format!(
                "dropout probability {p} must lie in [0, 1)"
            )));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        // Without a gradient, zero entries stay zero whatever their factor,
        // so they consume no randomness.
        let sparse_ok = !self.requires_grad(x);
        let factors: Vec<f64> = self
            .value(x)
            .data()
            .iter()
            .map(|&v| {
                if sparse_ok && v == 0.0 {
                    keep
                } else if rng.random::<f64>() < p {
                    0.0
                } else {
                    keep
                }
            })
            .collect();
        self.mul_const(x, Arc::new(factors))
    }

    /// Picks entries by flat index into a 1-D tensor.
    pub fn gather(&mut self, x: Var, indices: Arc<Vec<usize>>) -> Result<Var> {
        let xd = self.value(x).data();
        if let Some(&bad) = indices.iter().find(|&&i| i >= xd.len()) {
            return Err(BamError::Dimension(format!(
                "gather index {bad} out of range for length {}",
                xd.len()
            )));
        }
        if indices.is_empty() {
            return Err(BamError::Dimension("gather with no indices".into()));
        }
        let data = indices.iter().map(|&i| xd[i]).collect();
        let value = Tensor::vector(data)?;
        Ok(self.push(value, Op::Gather(x, indices), &[x]))
    }

    /// Columns `start..start + width` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let v = self.value(x);
        v.require_matrix("slice_cols")?;
        let (rows, cols) = (v.rows(), v.cols());
        if width == 0 || start + width > cols {
            return Err(BamError::Dimension(format!(
                "columns {start}..{} of a {rows}x{cols} matrix",
                start + width
            )));
        }
        let idx = (0..rows)
            .flat_map(|r| (start..start + width).map(move |c| r * cols + c))
            .collect();
        let picked = self.gather(x, Arc::new(idx))?;
        self.reshape(picked, vec![rows, width])
    }

    /// Places the entries of a 1-D tensor at unique flat indices of a zero
    /// tensor of the given shape.
    pub fn scatter(&mut self, x: Var, indices: Arc<Vec<usize>>, shape: Vec<usize>) -> Result<Var> {
        let xd = self.value(x).data();
        let len: usize = shape.iter().product();
        if xd.len() != indices.len() || indices.iter().any(|&i| i >= len) {
            return Err(BamError::Dimension(format!(
                "scatter of {} values into shape {shape:?}",
                xd.len()
            )));
        }
        let mut out = vec![0.0; len];
        for (&i, &v) in indices.iter().zip(xd) {
            out[i] = v;
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Scatter(x, indices), &[x]))
    }

    fn check_compact(&self, x: Var, pattern: &Pattern, what: &str) -> Result<()> {
        let len = self.value(x).len();
        if len != pattern.nnz() {
            return Err(BamError::Dimension(format!(
                "{what}: {len} values for a pattern with {} entries",
                pattern.nnz()
            )));
        }
        Ok(())
    }

    /// `exp(x_e - max_row(x))` over the entries of a pattern. The per-row
    /// shift is held constant; it cancels under row normalization.
    pub fn exp_shifted(&mut self, x: Var, pattern: Arc<Pattern>) -> Result<Var> {
        self.check_compact(x, &pattern, "exp_shifted")?;
        pattern.ensure_rows_nonempty()?;
        let xd = self.value(x).data();
        let mut out = vec![0.0; xd.len()];
        for r in 0..pattern.m() {
            let range = pattern.row_range(r);
            let max = xd[range.clone()].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            for e in range {
                out[e] = (xd[e] - max).exp();
            }
        }
        let value = Tensor::vector(out)?;
        Ok(self.push(value, Op::ExpShifted(x), &[x]))
    }

    /// Divides every entry by the sum of its row.
    pub fn segment_normalize(&mut self, x: Var, pattern: Arc<Pattern>) -> Result<Var> {
        self.check_compact(x, &pattern, "segment_normalize")?;
        let xd = self.value(x).data();
        let mut out = vec![0.0; xd.len()];
        for r in 0..pattern.m() {
            let range = pattern.row_range(r);
            if range.is_empty() {
                return Err(BamError::DegenerateRow { row: r });
            }
            let s: f64 = xd[range.clone()].iter().sum();
            if !(s > 0.0) || !s.is_finite() {
                return Err(BamError::Domain(format!("row {r} sums to {s}")));
            }
            for e in range {
                out[e] = xd[e] / s;
            }
        }
        let value = Tensor::vector(out)?;
        Ok(self.push(value, Op::SegmentNormalize(x, pattern), &[x]))
    }

    /// `scale * <q_row, k_col>` for every pattern entry.
    pub fn edge_dot(&mut self, q: Var, k: Var, pattern: Arc<Pattern>, scale: f64) -> Result<Var> {
        let (qv, kv) = (self.value(q), self.value(k));
        qv.require_matrix("edge_dot")?;
        kv.require_matrix("edge_dot")?;
        if qv.cols() != kv.cols() || qv.rows() != pattern.m() || kv.rows() != pattern.n() {
            return Err(BamError::Dimension(format!(
                "edge_dot of {:?} and {:?} over a {}x{} pattern",
                qv.shape(),
                kv.shape(),
                pattern.m(),
                pattern.n()
            )));
        }
        let data = pattern
            .row_ids()
            .iter()
            .zip(pattern.col_ids())
            .map(|(&r, &c)| scale * qv.row(r).iter().zip(kv.row(c)).map(|(a, b)| a * b).sum::<f64>())
            .collect();
        let value = Tensor::vector(data)?;
        Ok(self.push(value, Op::EdgeDot { q, k, pattern, scale }, &[q, k]))
    }

    /// Sparse `W V`: row `i` of the output is `sum_e w_e * v[col_e]` over the
    /// entries of row `i`.
    pub fn edge_aggregate(&mut self, w: Var, v: Var, pattern: Arc<Pattern>) -> Result<Var> {
        self.check_compact(w, &pattern, "edge_aggregate")?;
        let vv = self.value(v);
        vv.require_matrix("edge_aggregate")?;
        if vv.rows() != pattern.n() {
            return Err(BamError::Dimension(format!(
                "values have {} rows, pattern has {} columns",
                vv.rows(),
                pattern.n()
            )));
        }
        let d = vv.cols();
        let wd = self.value(w).data();
        let mut out = vec![0.0; pattern.m() * d];
        for (e, (&r, &c)) in pattern.row_ids().iter().zip(pattern.col_ids()).enumerate() {
            let we = wd[e];
            for (o, &x) in out[r * d..(r + 1) * d].iter_mut().zip(vv.row(c)) {
                *o += we * x;
            }
        }
        let value = Tensor::matrix(pattern.m(), d, out)?;
        Ok(self.push(value, Op::EdgeAggregate { w, v, pattern }, &[w, v]))
    }

    /// `out[i][j] = col[i] + row[j]`.
    pub fn outer_sum(&mut self, col: Var, row: Var) -> Result<Var> {
        let (cd, rd) = (self.value(col).data(), self.value(row).data());
        let (m, n) = (cd.len(), rd.len());
        let data = cd.iter().flat_map(|&a| rd.iter().map(move |&b| a + b)).collect();
        let value = Tensor::matrix(m, n, data)?;
        Ok(self.push(value, Op::OuterSum(col, row), &[col, row]))
    }

    /// Mean negative log-likelihood of `targets` under row-softmax of the
    /// selected logit rows.
    pub fn cross_entropy(&mut self, logits: Var, rows: Arc<Vec<usize>>, targets: Arc<Vec<usize>>) -> Result<Var> {
        let lv = self.value(logits);
        lv.require_matrix("cross_entropy")?;
        let c = lv.cols();
        if rows.len() != targets.len() || rows.is_empty() {
            return Err(BamError::Dimension(format!(
                "{} rows against {} targets",
                rows.len(),
                targets.len()
            )));
        }
        if rows.iter().any(|&r| r >= lv.rows()) || targets.iter().any(|&t| t >= c) {
            return Err(BamError::Dimension("cross_entropy row or target out of range".into()));
        }
        let mut total = 0.0;
        for (&r, &t) in rows.iter().zip(targets.iter()) {
            let row = lv.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            total += lse - row[t];
        }
        let value = Tensor::scalar(total / rows.len() as f64);
        Ok(self.push(value, Op::CrossEntropy { logits, rows, targets }, &[logits]))
    }

    /// Sum over entries of KL(Weibull(k, exp(log_lambda)) || Gamma(alpha, beta)).
    pub fn kl_weibull_gamma(&mut self, log_lambda: Var, alpha: Var, k: f64, beta: f64) -> Result<Var> {
        let (ll, al) = (self.value(log_lambda).data(), self.value(alpha).data());
        if ll.len() != al.len() {
            return Err(BamError::Dimension(format!(
                "{} scales against {} shapes",
                ll.len(),
                al.len()
            )));
        }
        let kl = WeibullGammaKl::new(k, beta)?;
        let mut total = 0.0;
        for (&l, &a) in ll.iter().zip(al) {
            total += kl.eval(l, a)?;
        }
        let value = Tensor::scalar(total);
        Ok(self.push(value, Op::KlWeibullGamma { log_lambda, alpha, k, beta }, &[log_lambda, alpha]))
    }

    /// Sum over entries of KL(Lognormal(mu_q, sigma_q) || Lognormal(mu_p, sigma_p)).
    pub fn kl_lognormal(&mut self, mu_q: Var, mu_p: Var, sigma_q: f64, sigma_p: f64) -> Result<Var> {
        let (q, p) = (self.value(mu_q).data(), self.value(mu_p).data());
        if q.len() != p.len() {
            return Err(BamError::Dimension(format!(
                "{} posterior locations against {} prior locations",
                q.len(),
                p.len()
            )));
        }
        let mut total = 0.0;
        for (&a, &b) in q.iter().zip(p) {
            total += crate::distributions::kl_lognormal_lognormal(a, sigma_q, b, sigma_p)?;
        }
        let value = Tensor::scalar(total);
        Ok(self.push(value, Op::KlLognormal { mu_q, mu_p, sigma_p }, &[mu_q, mu_p]))
    }
}
