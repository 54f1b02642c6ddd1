use super::{check_division, check_rank, LayerError, Result};
use crate::linalg::{self, LinalgError, Tensor2, Tensor3};

/// The `B_i` side of a PHM factor set.
#[derive(Debug, Clone, PartialEq)]
pub enum FastWeights {
    /// Stacked `B_i`, `k x (d/n)`.
    Full(Tensor2),
    /// Stacked `s_i` (`k x r`) and `t_i` (`(n·r) x (d/n)`), `B_i = s_i·t_i`.
    LowRank { s: Tensor2, t: Tensor2 },
}

/// Owned PHM/LPHM parameters for one projection `k -> d`.
#[derive(Debug, Clone, PartialEq)]
pub struct PhmFactors {
    n: usize,
    k: usize,
    d: usize,
    a_set: Tensor2,
    fast: FastWeights,
    bias: Tensor2,
    shared_a: bool,
}

impl PhmFactors {
    pub fn new(n: usize, a_set: Tensor2, fast: FastWeights, bias: Tensor2) -> Result<Self> {
        if n == 0 || a_set.shape() != (n * n, n) {
            return Err(LinalgError::ShapeMismatch {
                op: "phm_factors",
                left: a_set.shape(),
                right: (n * n, n),
            }
            .into());
        }
        let (k, q) = match &fast {
            FastWeights::Full(b) => (b.rows(), b.cols()),
            FastWeights::LowRank { s, t } => {
                let r = s.cols();
                if t.rows() != n * r {
                    return Err(LinalgError::ShapeMismatch {
                        op: "phm_factors",
                        left: s.shape(),
                        right: t.shape(),
                    }
                    .into());
                }
                (s.rows(), t.cols())
            }
        };
        let d = n * q;
        check_division(k, d, n)?;
        if let FastWeights::LowRank { s, .. } = &fast {
            check_rank(s.cols(), (k / n).min(d / n))?;
        }
        if bias.shape() != (1, d) {
            return Err(LinalgError::ShapeMismatch {
                op: "phm_factors",
                left: bias.shape(),
                right: (1, d),
            }
            .into());
        }
        Ok(Self {
            n,
            k,
            d,
            a_set,
            fast,
            bias,
            shared_a: false,
        })
    }

    pub fn shared(mut self, shared: bool) -> Self {
        self.shared_a = shared;
        self
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn input_dim(&self) -> usize {
        self.k
    }

    pub fn output_dim(&self) -> usize {
        self.d
    }

    pub fn a_set(&self) -> &Tensor2 {
        &self.a_set
    }

    pub fn fast(&self) -> &FastWeights {
        &self.fast
    }

    pub fn bias(&self) -> &Tensor2 {
        &self.bias
    }

    pub fn is_shared(&self) -> bool {
        self.shared_a
    }

    /// Rank of the fast weights, `None` in full PHM mode.
    pub fn rank(&self) -> Option<usize> {
        match &self.fast {
            FastWeights::Full(_) => None,
            FastWeights::LowRank { s, .. } => Some(s.cols()),
        }
    }

    /// Stacked `B_i`, computing `s_i·t_i` in low-rank mode.
    pub fn b_stack(&self) -> Result<Tensor2> {
        Ok(match &self.fast {
            FastWeights::Full(b) => b.clone(),
            FastWeights::LowRank { s, t } => linalg::block_matmul(s, t, self.n)?,
        })
    }
}

/// `W = Σ_i A_i ⊗ B_i`, shape `k x d`.
pub fn materialize_w(f: &PhmFactors) -> Result<Tensor2> {
    Ok(linalg::sum_kron(&f.a_set, &f.b_stack()?, f.n)?)
}

/// `y = x·W + b` for `x: batch x seq x k`, without forming `W`.
pub fn phm_apply(f: &PhmFactors, x: &Tensor3) -> Result<Tensor3> {
    if x.cols() != f.k {
        return Err(LayerError::InputDim {
            got: x.cols(),
            expected: f.k,
        });
    }
    let b = f.b_stack()?;
    let y = linalg::phm_matmul(&x.to_stacked(), &f.a_set, &b, f.n)?.add_row(&f.bias)?;
    Ok(Tensor3::from_stacked(x.batch(), y)?)
}
