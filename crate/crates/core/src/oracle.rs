//! Brute-force second-quantized reference for the photon currents.
//!
//! The truncated Fock space (at most two photons) over the input modes is
//! built explicitly. Output annihilation operators are formed as
//! amplitude-weighted sums of the input annihilation matrices, and the
//! currents are evaluated as traces against an explicit density matrix.
//! Nothing here reuses the closed forms in [`crate::qstates`].

use faer::{Mat, Scale};
use num_complex::Complex64;
use thiserror::Error;

use crate::qstates::StateKind;

pub const MAX_MODES: usize = 8;
pub const MAX_RANK: usize = 3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error("basis overflow: {0}")]
    Overflow(String),
    #[error("unsupported state for the oracle: {0:?}")]
    Unsupported(StateKind),
    #[error("shape mismatch: {0}")]
    Shape(String),
}

type Op = Mat<Complex64>;

fn zero() -> Complex64 {
    Complex64::new(0.0, 0.0)
}

/// Occupation-number basis with total photon number 0, 1 or 2.
#[derive(Debug, Clone)]
pub struct FockBasis {
    n_modes: usize,
    states: Vec<Vec<u8>>,
}

impl FockBasis {
    pub fn new(n_modes: usize) -> Result<Self, OracleError> {
        if n_modes == 0 || n_modes > MAX_MODES {
            return Err(OracleError::Overflow(format!(
                "{n_modes} modes (limit {MAX_MODES})"
            )));
        }
        let mut states = vec![vec![0u8; n_modes]];
        for x in 0..n_modes {
            let mut s = vec![0u8; n_modes];
            s[x] = 1;
            states.push(s);
        }
        for x in 0..n_modes {
            for y in x..n_modes {
                let mut s = vec![0u8; n_modes];
                s[x] += 1;
                s[y] += 1;
                states.push(s);
            }
        }
        Ok(Self { n_modes, states })
    }

    pub fn dim(&self) -> usize {
        self.states.len()
    }

    pub fn n_modes(&self) -> usize {
        self.n_modes
    }

    fn index_of(&self, occ: &[u8]) -> Option<usize> {
        self.states.iter().position(|s| s.as_slice() == occ)
    }

    /// Matrix of the annihilation operator of `mode`.
    pub fn annihilation(&self, mode: usize) -> Op {
        let d = self.dim();
        let mut a = Mat::<Complex64>::zeros(d, d);
        for (col, occ) in self.states.iter().enumerate() {
            let n = occ[mode];
            if n == 0 {
                continue;
            }
            let mut lowered = occ.clone();
            lowered[mode] -= 1;
            let row = self.index_of(&lowered).expect("lowered state in basis");
            a[(row, col)] = Complex64::new((n as f64).sqrt(), 0.0);
        }
        a
    }

    pub fn vacuum(&self) -> Op {
        let mut v = Mat::<Complex64>::zeros(self.dim(), 1);
        v[(0, 0)] = Complex64::new(1.0, 0.0);
        v
    }
}

fn adjoint(m: &Op) -> Op {
    Mat::from_fn(m.ncols(), m.nrows(), |i, j| m[(j, i)].conj())
}

fn trace(m: &Op) -> Complex64 {
    (0..m.nrows()).map(|i| m[(i, i)]).sum()
}

fn outer(v: &Op) -> Op {
    v * adjoint(v)
}

/// Input density matrix of a two-photon state over modes ordered
/// `(q_1, -q_1, q_2, -q_2, ...)`, or a single mode for the Fock state.
pub fn density_matrix(basis: &FockBasis, kind: StateKind, rank: usize) -> Result<Op, OracleError> {
    let vac = basis.vacuum();
    let create = |mode: usize| adjoint(&basis.annihilation(mode));
    match kind {
        StateKind::EntangledPure | StateKind::FullyMixed => {
            if rank == 0 || rank > MAX_RANK || 2 * rank > basis.n_modes() {
                return Err(OracleError::Overflow(format!("rank {rank}")));
            }
            let pairs: Vec<Op> = (0..rank)
                .map(|m| create(2 * m) * (create(2 * m + 1) * &vac))
                .collect();
            let scale = Complex64::new(1.0 / rank as f64, 0.0);
            if kind == StateKind::EntangledPure {
                let mut psi = Mat::<Complex64>::zeros(basis.dim(), 1);
                for p in &pairs {
                    psi += p;
                }
                Ok(outer(&psi) * Scale(scale))
            } else {
                let mut rho = Mat::<Complex64>::zeros(basis.dim(), basis.dim());
                for p in &pairs {
                    rho += outer(p);
                }
                Ok(rho * Scale(scale))
            }
        }
        StateKind::FockTwoSameMode => {
            let a = create(0);
            let psi = (&a * (&a * &vac)) * Scale(Complex64::new(0.5f64.sqrt(), 0.0));
            Ok(outer(&psi))
        }
        other => Err(OracleError::Unsupported(other)),
    }
}

pub fn purity(rho: &Op) -> f64 {
    trace(&(rho * rho)).re
}

/// Output annihilation operator `sum_x S[row, x] a_x`.
fn output_operator(basis: &FockBasis, amplitudes: &[Complex64]) -> Op {
    let d = basis.dim();
    let mut op = Mat::<Complex64>::zeros(d, d);
    for (x, &s) in amplitudes.iter().enumerate() {
        if s != zero() {
            op += basis.annihilation(x) * Scale(s);
        }
    }
    op
}

/// Single- and two-photon currents `(I1(i), I2(i, j))` by direct trace.
///
/// `s_sub[o][x]` is the amplitude from input mode `x` to output `o`; inputs
/// follow the state's mode order.
pub fn oracle_currents(
    s_sub: &[Vec<Complex64>],
    kind: StateKind,
    rank: usize,
    i: usize,
    j: usize,
) -> Result<(f64, f64), OracleError> {
    if s_sub.is_empty() || s_sub.len() > MAX_MODES {
        return Err(OracleError::Overflow(format!("{} output modes", s_sub.len())));
    }
    let n_inputs = s_sub[0].len();
    if s_sub.iter().any(|r| r.len() != n_inputs) {
        return Err(OracleError::Shape("ragged amplitude rows".into()));
    }
    let expected = match kind {
        StateKind::EntangledPure | StateKind::FullyMixed => 2 * rank,
        StateKind::FockTwoSameMode => 1,
        other => return Err(OracleError::Unsupported(other)),
    };
    if n_inputs != expected {
        return Err(OracleError::Shape(format!(
            "{n_inputs} input columns, state needs {expected}"
        )));
    }
    if i >= s_sub.len() || j >= s_sub.len() {
        return Err(OracleError::Shape(format!("output index out of range ({i}, {j})")));
    }
    let basis = FockBasis::new(n_inputs)?;
    let rho = density_matrix(&basis, kind, rank)?;
    let ai = output_operator(&basis, &s_sub[i]);
    let aj = output_operator(&basis, &s_sub[j]);
    let ai_dag = adjoint(&ai);
    let aj_dag = adjoint(&aj);
    let n_i = &ai_dag * &ai;
    let i1 = trace(&(&rho * &n_i)).re;
    let pair = &ai_dag * (&aj_dag * (&aj * &ai));
    let i2 = trace(&(&rho * &pair)).re;
    Ok((i1, i2))
}
