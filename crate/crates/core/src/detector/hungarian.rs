//! Minimum-cost bipartite assignment (Kuhn-Munkres with potentials,
//! shortest-augmenting-path formulation, O(n^3)).

use crate::error::{Error, Result};

/// Injective assignment covering `min(rows, cols)` pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// `(row, col)` pairs sorted by row index.
    pub pairs: Vec<(usize, usize)>,
    pub total_cost: f64,
}

/// Solves the rectangular linear assignment problem on a row-major
/// `rows x cols` cost matrix.
pub fn hungarian_match(cost: &[f64], rows: usize, cols: usize) -> Result<MatchResult> {
    if cost.len() != rows * cols {
        return Err(Error::shape(
            "hungarian_match",
            format!("cost buffer {} != {rows}x{cols}", cost.len()),
        ));
    }
    if rows == 0 || cols == 0 {
        return Ok(MatchResult {
            pairs: vec![],
            total_cost: 0.0,
        });
    }
    if let Some(bad) = cost.iter().find(|c| !c.is_finite()) {
        return Err(Error::contract(
            "hungarian_match",
            format!("non-finite cost entry {bad}"),
        ));
    }

    // The augmenting-path solver wants rows <= cols; transpose otherwise.
    let transposed = rows > cols;
    let (nr, nc, c): (usize, usize, Vec<f64>) = if transposed {
        let mut t = vec![0.0; rows * cols];
        for r in 0..rows {
            for col in 0..cols {
                t[col * rows + r] = cost[r * cols + col];
            }
        }
        (cols, rows, t)
    } else {
        (rows, cols, cost.to_vec())
    };

    // 1-based potentials; p[j] is the row matched to column j (0 = free).
    let mut u = vec![0.0f64; nr + 1];
    let mut v = vec![0.0f64; nc + 1];
    let mut p = vec![0usize; nc + 1];
    let mut way = vec![0usize; nc + 1];

    for i in 1..=nr {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; nc + 1];
        let mut used = vec![false; nc + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=nc {
                if !used[j] {
                    let cur = c[(i0 - 1) * nc + (j - 1)] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=nc {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut pairs = Vec::with_capacity(nr);
    let mut total = 0.0;
    for j in 1..=nc {
        if p[j] != 0 {
            let (r, col) = (p[j] - 1, j - 1);
            total += c[r * nc + col];
            if transposed {
                pairs.push((col, r));
            } else {
                pairs.push((r, col));
            }
        }
    }
    pairs.sort_unstable();
    Ok(MatchResult {
        pairs,
        total_cost: total,
    })
}

/// Exhaustive minimum over all injective assignments; test oracle for
/// small problems.
pub fn brute_force_match(cost: &[f64], rows: usize, cols: usize) -> MatchResult {
    fn permutations(items: &[usize]) -> Vec<Vec<usize>> {
        if items.len() <= 1 {
            return vec![items.to_vec()];
        }
        let mut out = Vec::new();
        for (i, &x) in items.iter().enumerate() {
            let mut rest: Vec<usize> = items.to_vec();
            rest.remove(i);
            for mut tail in permutations(&rest) {
                tail.insert(0, x);
                out.push(tail);
            }
        }
        out
    }

    let k = rows.min(cols);
    let row_sets = combinations(rows, k);
    let col_perm_source: Vec<usize> = (0..cols).collect();
    let mut best: Option<MatchResult> = None;
    for rows_chosen in &row_sets {
        for perm in permutations(&col_perm_source) {
            let cols_chosen = &perm[..k];
            if cols_chosen.len() != k {
                continue;
            }
            let mut seen = vec![false; cols];
            if cols_chosen.iter().any(|&c| {
                let dup = seen[c];
                seen[c] = true;
                dup
            }) {
                continue;
            }
            let mut total = 0.0;
            let mut pairs = Vec::with_capacity(k);
            for (ri, &r) in rows_chosen.iter().enumerate() {
                let c = cols_chosen[ri];
                total += cost[r * cols + c];
                pairs.push((r, c));
            }
            pairs.sort_unstable();
            if best.as_ref().map(|b| total < b.total_cost).unwrap_or(true) {
                best = Some(MatchResult {
                    pairs,
                    total_cost: total,
                });
            }
        }
    }
    best.unwrap_or(MatchResult {
        pairs: vec![],
        total_cost: 0.0,
    })
}

fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur = Vec::with_capacity(k);
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            rec(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    rec(0, n, k, &mut cur, &mut out);
    out
}
