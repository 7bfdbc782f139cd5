//! Raw numeric kernels shared by the forward and backward passes.

/// `c = a·b + beta·c` where `a` is logically `m×k` and `b` is `k×n`.
/// A transposed flag means the operand is stored as its transpose.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slice lengths were checked against the logical shapes and
    // the strides above stay within those extents.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Numpy-style broadcast of two shapes.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// How an operand maps onto a broadcast output.
pub(crate) enum Bcast {
    Same,
    /// Operand repeats with period `len` along the flat output.
    Cyclic(usize),
    /// Each contiguous block of `inner` operand values is repeated `repeat`
    /// times before moving on, e.g. `[B,1,D]` against `[B,N,D]`.
    Tile { inner: usize, repeat: usize },
    /// Explicit input offset for every output element.
    Map(Vec<usize>),
}

impl Bcast {
    pub(crate) fn new(out: &[usize], inp: &[usize]) -> Bcast {
        if out == inp {
            return Bcast::Same;
        }
        let rank = out.len();
        let pad = rank - inp.len();
        let padded: Vec<usize> = std::iter::repeat_n(1, pad).chain(inp.iter().copied()).collect();
        let differ: Vec<usize> = (0..rank).filter(|&d| padded[d] != out[d]).collect();
        if differ.is_empty() {
            return Bcast::Same;
        }
        let (s, e) = (differ[0], differ[differ.len() - 1] + 1);
        if differ.len() == e - s {
            let inner: usize = out[e..].iter().product();
            if s == 0 || padded[..s].iter().all(|&d| d == 1) && out[..s].iter().all(|&d| d == 1) {
                return Bcast::Cyclic(inner);
            }
            return Bcast::Tile {
                inner,
                repeat: out[s..e].iter().product(),
            };
        }
        let mut strides = vec![0usize; rank];
        let mut st = 1;
        for i in (0..inp.len()).rev() {
            strides[i + pad] = if inp[i] == 1 { 0 } else { st };
            st *= inp[i];
        }
        let total: usize = out.iter().product();
        let mut map = Vec::with_capacity(total);
        let mut idx = vec![0usize; rank];
        let mut off = 0usize;
        for _ in 0..total {
            map.push(off);
            for d in (0..rank).rev() {
                idx[d] += 1;
                off += strides[d];
                if idx[d] < out[d] {
                    break;
                }
                off -= strides[d] * idx[d];
                idx[d] = 0;
            }
        }
        Bcast::Map(map)
    }

    #[inline]
    pub(crate) fn at(&self, i: usize) -> usize {
        match self {
            Bcast::Same => i,
            Bcast::Cyclic(n) => i % n,
            Bcast::Tile { inner, repeat } => (i / (inner * repeat)) * inner + i % inner,
            Bcast::Map(m) => m[i],
        }
    }

    /// Length of aligned output runs over which the operand is contiguous.
    pub(crate) fn run(&self, total: usize) -> usize {
        match self {
            Bcast::Same => total,
            Bcast::Cyclic(n) => *n,
            Bcast::Tile { inner, .. } => *inner,
            Bcast::Map(_) => 1,
        }
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Visit the output in aligned runs `(start, len, a_offset, b_offset)` within
/// which both operands are contiguous.
pub(crate) fn for_runs(total: usize, ma: &Bcast, mb: &Bcast, mut f: impl FnMut(usize, usize, usize, usize)) {
    if total == 0 {
        return;
    }
    let run = gcd(ma.run(total), mb.run(total)).max(1);
    let mut s = 0;
    while s < total {
        f(s, run, ma.at(s), mb.at(s));
        s += run;
    }
}

pub(crate) fn sigmoid_clamped(x: f64) -> f64 {
    1.0 / (1.0 + (-x.clamp(-super::SIGMOID_CLAMP, super::SIGMOID_CLAMP)).exp())
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

// 0.5·(1 + tanh(u)) = σ(2u)
#[inline]
fn gelu_gate(x: f64) -> f64 {
    1.0 / (1.0 + (-2.0 * GELU_C * (x + GELU_A * x * x * x)).exp())
}

/// `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`.
pub(crate) fn gelu(x: f64) -> f64 {
    x * gelu_gate(x)
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let s = gelu_gate(x);
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    s + 2.0 * x * s * (1.0 - s) * du
}
