//! Physicists' Hermite polynomials.

/// `H_n(u)` via the three-term recurrence `H_{k+1} = 2u H_k - 2k H_{k-1}`.
pub fn hermite(n: usize, u: f64) -> f64 {
    let mut prev = 1.0;
    if n == 0 {
        return prev;
    }
    let mut cur = 2.0 * u;
    for k in 1..n {
        let next = 2.0 * u * cur - 2.0 * k as f64 * prev;
        prev = cur;
        cur = next;
    }
    cur
}

/// `[H_0(u), ..., H_{n_max}(u)]`.
pub fn hermite_all(n_max: usize, u: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(n_max + 1);
    out.push(1.0);
    if n_max >= 1 {
        out.push(2.0 * u);
    }
    for k in 1..n_max {
        let next = 2.0 * u * out[k] - 2.0 * k as f64 * out[k - 1];
        out.push(next);
    }
    out
}

pub fn factorial(n: usize) -> f64 {
    (1..=n).fold(1.0, |acc, k| acc * k as f64)
}

/// `n! / (n - j)!`, zero when `j > n`.
pub fn falling_factorial(n: usize, j: usize) -> f64 {
    if j > n {
        return 0.0;
    }
    ((n - j + 1)..=n).fold(1.0, |acc, k| acc * k as f64)
}
