use crate::model::SquareMatrix;

/// Euclidean projection onto antisymmetric matrices with `|u_ik| <= cap_ik`.
/// Each unordered pair is an independent two-variable problem whose solution
/// is the clamped antisymmetric part. The diagonal of `v` is ignored.
pub fn project_pairwise_antisymmetric(v: &SquareMatrix, cap: &SquareMatrix) -> SquareMatrix {
    let n = v.dim();
    let mut out = SquareMatrix::zeros(n);
    for i in 0..n {
        for k in (i + 1)..n {
            let c = cap.get(i, k);
            let u = (0.5 * (v.get(i, k) - v.get(k, i))).clamp(-c, c);
            out.set(i, k, u);
            out.set(k, i, -u);
        }
    }
    out
}
