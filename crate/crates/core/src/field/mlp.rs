//! Two-layer perceptron heads evaluated over row-major sample batches.

use serde::{Deserialize, Serialize};

use crate::math::{softplus, Real};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Softplus,
}

impl Activation {
    pub fn code(self) -> u32 {
        match self {
            Activation::Relu => 0,
            Activation::Softplus => 1,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(Activation::Relu),
            1 => Some(Activation::Softplus),
            _ => None,
        }
    }

    fn apply<T: Real>(self, z: T) -> T {
        match self {
            Activation::Relu => z.max(T::zero()),
            Activation::Softplus => softplus(z),
        }
    }

    /// Derivative expressed through the activation output `a`.
    fn derivative_from_output<T: Real>(self, a: T) -> T {
        match self {
            Activation::Relu => {
                if a > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            // softplus'(z) = sigmoid(z) = 1 - exp(-softplus(z))
            Activation::Softplus => -(-a).exp_m1(),
        }
    }
}

/// Parameter offsets of `input → hidden (activation) → output (linear)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dense2 {
    pub input: usize,
    pub hidden: usize,
    pub output: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

impl Dense2 {
    /// Lays the head out starting at `offset`; returns it and the next free offset.
    pub fn at(offset: usize, input: usize, hidden: usize, output: usize) -> (Self, usize) {
        let w1 = offset;
        let b1 = w1 + input * hidden;
        let w2 = b1 + hidden;
        let b2 = w2 + hidden * output;
        let end = b2 + output;
        (
            Self {
                input,
                hidden,
                output,
                w1,
                b1,
                w2,
                b2,
            },
            end,
        )
    }

    pub fn param_count(&self) -> usize {
        self.input * self.hidden + self.hidden + self.hidden * self.output + self.output
    }

    /// Evaluates `rows` inputs; fills `hidden` (post-activation) and `out`.
    /// With `shared`, `x` holds only the leading input columns and the
    /// trailing ones come from the shared rows.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<T: Real>(
        &self,
        params: &[T],
        act: Activation,
        x: &[T],
        rows: usize,
        shared: Option<SharedInput<'_, T>>,
        hidden: &mut Vec<T>,
        out: &mut Vec<T>,
    ) {
        let lead = self.input - shared.as_ref().map_or(0, |s| s.width);
        debug_assert_eq!(x.len(), rows * lead);
        let h = self.hidden;
        hidden.clear();
        hidden.resize(rows * h, T::zero());
        let b1 = &params[self.b1..self.b1 + h];
        for r in hidden.chunks_exact_mut(h) {
            r.copy_from_slice(b1);
        }
        T::gemm(rows, lead, h, x, false, &params[self.w1..self.w1 + lead * h], false, T::one(), hidden);
        if let Some(sh) = shared {
            let segs = sh.spans.len();
            let mut proj = vec![T::zero(); segs * h];
            T::gemm(segs, sh.width, h, sh.data, false, &params[self.w1 + lead * h..self.b1], false, T::zero(), &mut proj);
            for (span, p) in sh.spans.iter().zip(proj.chunks_exact(h)) {
                for r in hidden[span.start * h..span.end * h].chunks_exact_mut(h) {
                    for (v, &q) in r.iter_mut().zip(p) {
                        *v += q;
                    }
                }
            }
        }
        for v in hidden.iter_mut() {
            *v = act.apply(*v);
        }
        out.clear();
        out.resize(rows * self.output, T::zero());
        let b2 = &params[self.b2..self.b2 + self.output];
        for r in out.chunks_exact_mut(self.output) {
            r.copy_from_slice(b2);
        }
        T::gemm(rows, h, self.output, hidden, false, &params[self.w2..self.b2], false, T::one(), out);
    }

    /// Accumulates parameter gradients for `d_out` and returns the adjoint
    /// of the leading input columns when `want_dx` is set.
    #[allow(clippy::too_many_arguments)]
    pub fn backward<T: Real>(
        &self,
        params: &[T],
        grads: &mut [T],
        act: Activation,
        x: &[T],
        shared: Option<SharedInput<'_, T>>,
        hidden: &[T],
        d_out: &[T],
        rows: usize,
        want_dx: bool,
    ) -> Option<Vec<T>> {
        let lead = self.input - shared.as_ref().map_or(0, |s| s.width);
        if rows == 0 {
            return want_dx.then(Vec::new);
        }
        let h = self.hidden;
        // Output layer.
        T::gemm(h, rows, self.output, hidden, true, d_out, false, T::one(), &mut grads[self.w2..self.b2]);
        for r in d_out.chunks_exact(self.output) {
            for (g, &d) in grads[self.b2..self.b2 + self.output].iter_mut().zip(r) {
                *g += d;
            }
        }
        let mut d_hidden = vec![T::zero(); rows * h];
        T::gemm(rows, self.output, h, d_out, false, &params[self.w2..self.b2], true, T::zero(), &mut d_hidden);
        for (d, &a) in d_hidden.iter_mut().zip(hidden) {
            *d *= act.derivative_from_output(a);
        }
        // Hidden layer.
        T::gemm(lead, rows, h, x, true, &d_hidden, false, T::one(), &mut grads[self.w1..self.w1 + lead * h]);
        if let Some(sh) = shared {
            let mut seg_sum = vec![T::zero(); sh.spans.len() * h];
            for (span, acc) in sh.spans.iter().zip(seg_sum.chunks_exact_mut(h)) {
                for r in d_hidden[span.start * h..span.end * h].chunks_exact(h) {
                    for (a, &d) in acc.iter_mut().zip(r) {
                        *a += d;
                    }
                }
            }
            T::gemm(
                sh.width,
                sh.spans.len(),
                h,
                sh.data,
                true,
                &seg_sum,
                false,
                T::one(),
                &mut grads[self.w1 + lead * h..self.b1],
            );
        }
        for r in d_hidden.chunks_exact(h) {
            for (g, &d) in grads[self.b1..self.b1 + h].iter_mut().zip(r) {
                *g += d;
            }
        }
        if !want_dx {
            return None;
        }
        let mut dx = vec![T::zero(); rows * lead];
        T::gemm(rows, h, lead, &d_hidden, false, &params[self.w1..self.w1 + lead * h], true, T::zero(), &mut dx);
        Some(dx)
    }
}

/// Trailing input columns shared by contiguous runs of rows: row span
/// `spans[k]` uses row `k` of `data` (`width` columns each).
#[derive(Clone, Copy, Debug)]
pub struct SharedInput<'a, T> {
    pub data: &'a [T],
    pub width: usize,
    pub spans: &'a [std::ops::Range<usize>],
}
