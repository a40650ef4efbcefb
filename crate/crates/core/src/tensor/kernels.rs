// Sequential matmul kernels. Every output element accumulates its products in
// ascending inner-index order, so results do not depend on the position of a
// row or column within the operands (class-permutation tests rely on that).

use super::Scalar;

/// `out[m×n] = a[m×k] · b[k×n]`
pub fn matmul_nn(a: &[Scalar], b: &[Scalar], out: &mut [Scalar], m: usize, k: usize, n: usize) {
    out.fill(0.0);
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &aip) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    }
}

/// `out[m×n] = a[m×k] · b[n×k]ᵀ`
pub fn matmul_nt(a: &[Scalar], b: &[Scalar], out: &mut [Scalar], m: usize, k: usize, n: usize) {
    let mut bt = vec![0.0; k * n];
    transpose(b, &mut bt, n, k);
    matmul_nn(a, &bt, out, m, k, n);
}

/// `out[m×n] = a[k×m]ᵀ · b[k×n]`
pub fn matmul_tn(a: &[Scalar], b: &[Scalar], out: &mut [Scalar], k: usize, m: usize, n: usize) {
    out.fill(0.0);
    for p in 0..k {
        let a_row = &a[p * m..(p + 1) * m];
        let b_row = &b[p * n..(p + 1) * n];
        for (i, &api) in a_row.iter().enumerate() {
            let row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in row.iter_mut().zip(b_row) {
                *o += api * bv;
            }
        }
    }
}

/// `out[n×m] = a[m×n]ᵀ`
pub fn transpose(a: &[Scalar], out: &mut [Scalar], m: usize, n: usize) {
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
}

/// Running sum with Neumaier compensation: the low-order bits lost by each
/// addition are carried in `comp` and added back at the end.
#[derive(Clone, Copy, Debug, Default)]
pub struct CompensatedSum {
    sum: Scalar,
    comp: Scalar,
}

impl CompensatedSum {
    pub fn add(&mut self, v: Scalar) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.comp += (self.sum - t) + v;
        } else {
            self.comp += (v - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> Scalar {
        self.sum + self.comp
    }
}

pub fn compensated_sum(values: &[Scalar]) -> Scalar {
    let mut acc = CompensatedSum::default();
    for &v in values {
        acc.add(v);
    }
    acc.value()
}

/// Column sums of a row-major `[rows × n]` buffer, compensated per column.
pub fn column_sums(data: &[Scalar], n: usize) -> Vec<Scalar> {
    let mut acc = vec![CompensatedSum::default(); n];
    for row in data.chunks(n) {
        for (a, &v) in acc.iter_mut().zip(row) {
            a.add(v);
        }
    }
    acc.iter().map(CompensatedSum::value).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[Scalar], b: &[Scalar], m: usize, k: usize, n: usize) -> Vec<Scalar> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a[i * k + p] * b[p * n + j];
                }
                out[i * n + j] = s;
            }
        }
        out
    }

    #[test]
    fn all_variants_agree_bitwise_with_naive_loop() {
        let (m, k, n) = (5, 7, 3);
        let a: Vec<Scalar> = (0..m * k).map(|i| ((i * 37 % 11) as Scalar - 5.0) * 0.3).collect();
        let b: Vec<Scalar> = (0..k * n).map(|i| ((i * 17 % 13) as Scalar - 6.0) * 0.7).collect();
        let want = naive(&a, &b, m, k, n);

        let mut out = vec![0.0; m * n];
        matmul_nn(&a, &b, &mut out, m, k, n);
        assert_eq!(out, want);

        let mut bt = vec![0.0; n * k];
        transpose(&b, &mut bt, k, n);
        matmul_nt(&a, &bt, &mut out, m, k, n);
        assert_eq!(out, want);

        let mut at = vec![0.0; k * m];
        transpose(&a, &mut at, m, k);
        matmul_tn(&at, &b, &mut out, k, m, n);
        assert_eq!(out, want);
    }

    #[test]
    fn compensated_sum_recovers_cancelled_bits() {
        let v = [1.0, 1e30, 1.0, -1e30];
        assert_eq!(compensated_sum(&v), 2.0);
        assert_eq!(column_sums(&[1.0, 3.0, 1e30, 0.0, 1.0, 1.0, -1e30, 0.0], 2), vec![2.0, 4.0]);
    }
}
