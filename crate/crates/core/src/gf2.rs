//! Linear algebra over GF(2) with vectors packed into `u64` bit masks.

/// Reduced row echelon form; returns (rows, pivot bit of each row).
fn rref(rows: &[u64], aug: Option<&[bool]>) -> (Vec<u64>, Vec<bool>, Vec<u32>) {
    let mut r: Vec<u64> = rows.to_vec();
    let mut a: Vec<bool> = aug.map_or_else(|| vec![false; rows.len()], |a| a.to_vec());
    let mut pivots = vec![];
    let mut top = 0;
    for bit in 0..64u32 {
        let Some(p) = (top..r.len()).find(|&i| r[i] >> bit & 1 == 1) else {
            continue;
        };
        r.swap(top, p);
        a.swap(top, p);
        for i in 0..r.len() {
            if i != top && r[i] >> bit & 1 == 1 {
                r[i] ^= r[top];
                a[i] ^= a[top];
            }
        }
        pivots.push(bit);
        top += 1;
        if top == r.len() {
            break;
        }
    }
    (r, a, pivots)
}

pub fn rank(rows: &[u64]) -> usize {
    rref(rows, None).2.len()
}

/// Basis of { m ⊆ support : parity(m & v) = 0 for every v in `rows` }.
pub fn nullspace(rows: &[u64], support: u64) -> Vec<u64> {
    let restricted: Vec<u64> = rows.iter().map(|v| v & support).collect();
    let (r, _, pivots) = rref(&restricted, None);
    let pivot_mask = pivots.iter().fold(0u64, |m, b| m | 1 << b);
    let mut basis = vec![];
    for free in (0..64).filter(|b| support >> b & 1 == 1 && pivot_mask >> b & 1 == 0) {
        let mut m = 1u64 << free;
        for (row, &p) in r.iter().zip(&pivots) {
            if row >> free & 1 == 1 {
                m |= 1 << p;
            }
        }
        basis.push(m);
    }
    basis
}

/// Solution of parity(m & rows[i]) = rhs[i] within `support`: a particular
/// solution plus the free bits left undetermined, or None if inconsistent.
pub fn solve(rows: &[u64], rhs: &[bool], support: u64) -> Option<(u64, u64)> {
    assert_eq!(rows.len(), rhs.len());
    let restricted: Vec<u64> = rows.iter().map(|v| v & support).collect();
    let (r, a, pivots) = rref(&restricted, Some(rhs));
    if r.iter().zip(&a).skip(pivots.len()).any(|(&row, &y)| row == 0 && y) {
        return None;
    }
    let mut sol = 0u64;
    for (i, &p) in pivots.iter().enumerate() {
        if a[i] {
            sol |= 1 << p;
        }
    }
    let pivot_mask = pivots.iter().fold(0u64, |m, b| m | 1 << b);
    Some((sol, support & !pivot_mask))
}

pub fn span(basis: &[u64]) -> Vec<u64> {
    let mut out = vec![0u64];
    for &b in basis {
        let n = out.len();
        for i in 0..n {
            out.push(out[i] ^ b);
        }
    }
    out
}
