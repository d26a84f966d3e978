//! Independent oracles shared by the integration tests. None of these call
//! into the library's numeric code.

#![allow(dead_code)]

use ctxfair::data::Group;

/// Average ranks (ties share the mean rank).
pub fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0;
        for k in i..=j {
            r[idx[k]] = avg;
        }
        i = j + 1;
    }
    r
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    pearson(&ranks(a), &ranks(b))
}

/// Error rates of one group by direct filtering: (FPR, FNR), `None` when the
/// conditioning class is absent.
pub fn group_rates(
    labels: &[u8],
    preds: &[u8],
    groups: &[Group],
    g: Group,
) -> (Option<f64>, Option<f64>) {
    let rows: Vec<usize> = (0..labels.len()).filter(|&i| groups[i] == g).collect();
    let negatives: Vec<usize> = rows.iter().copied().filter(|&i| labels[i] == 0).collect();
    let positives: Vec<usize> = rows.iter().copied().filter(|&i| labels[i] == 1).collect();
    let fp = negatives.iter().filter(|&&i| preds[i] == 1).count();
    let fn_ = positives.iter().filter(|&&i| preds[i] == 0).count();
    let fpr = if negatives.is_empty() {
        None
    } else {
        Some(fp as f64 / negatives.len() as f64)
    };
    let fnr = if positives.is_empty() {
        None
    } else {
        Some(fn_ as f64 / positives.len() as f64)
    };
    (fpr, fnr)
}

/// (δFPR, δFNR, EqOdds) between `reference` and `other`.
pub fn gaps(
    labels: &[u8],
    preds: &[u8],
    groups: &[Group],
    reference: Group,
    other: Group,
) -> (Option<f64>, Option<f64>, Option<f64>) {
    let (fa, na) = group_rates(labels, preds, groups, reference);
    let (fb, nb) = group_rates(labels, preds, groups, other);
    let dfpr = match (fa, fb) {
        (Some(a), Some(b)) => Some((a - b).abs()),
        _ => None,
    };
    let dfnr = match (na, nb) {
        (Some(a), Some(b)) => Some((a - b).abs()),
        _ => None,
    };
    let eq = match (dfpr, dfnr) {
        (Some(a), Some(b)) => Some(a + b),
        _ => None,
    };
    (dfpr, dfnr, eq)
}

/// Naive value of the fairness-aware objective: per-group coefficient
/// blocks `[θ_g, b_g]`, weighted mean NLL, prejudice index scaled by η/n
/// with weighted P̂ terms, and the share-weighted L2 penalty.
pub fn fair_objective(
    x: &[Vec<f64>],
    y: &[u8],
    g: &[usize],
    w: &[f64],
    l2: f64,
    eta: f64,
    params: &[f64],
) -> f64 {
    let n = x.len();
    let d = x[0].len();
    let block = |s: usize| &params[s * (d + 1)..(s + 1) * (d + 1)];
    let prob: Vec<f64> = (0..n)
        .map(|i| {
            let p = block(g[i]);
            let mut z = p[d];
            for k in 0..d {
                z += p[k] * x[i][k];
            }
            1.0 / (1.0 + (-z).exp())
        })
        .collect();
    let total_w: f64 = w.iter().sum();
    let mut nll = 0.0;
    for i in 0..n {
        let p = prob[i];
        nll -= w[i] * if y[i] == 1 { p.ln() } else { (1.0 - p).ln() };
    }
    nll /= total_w;

    let mut wsum = [0.0; 3];
    let mut wp = [0.0; 3];
    for i in 0..n {
        wsum[g[i]] += w[i];
        wp[g[i]] += w[i] * prob[i];
    }
    let r = wp.iter().sum::<f64>() / total_w;
    let mut pi = 0.0;
    for i in 0..n {
        let q = wp[g[i]] / wsum[g[i]];
        pi += prob[i] * (q / r).ln() + (1.0 - prob[i]) * ((1.0 - q) / (1.0 - r)).ln();
    }

    let mut pen = 0.0;
    for (s, ws) in wsum.iter().enumerate() {
        pen += 0.5 * l2 * (ws / total_w) * block(s)[..d].iter().map(|t| t * t).sum::<f64>();
    }
    nll + eta * pi / n as f64 + pen
}

/// Biased linear-kernel MMD² as the squared distance of sample means.
pub fn mmd_biased_means(x: &[Vec<f64>], v: &[Vec<f64>]) -> f64 {
    let d = x[0].len();
    let mean = |s: &[Vec<f64>]| -> Vec<f64> {
        (0..d)
            .map(|k| s.iter().map(|r| r[k]).sum::<f64>() / s.len() as f64)
            .collect()
    };
    let (mx, mv) = (mean(x), mean(v));
    mx.iter().zip(&mv).map(|(a, b)| (a - b).powi(2)).sum()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| p * q).sum()
}

/// Unbiased linear-kernel MMD² by explicit double loops over pairs.
pub fn mmd_unbiased_loops(x: &[Vec<f64>], v: &[Vec<f64>]) -> f64 {
    let (m, n) = (x.len() as f64, v.len() as f64);
    let mut kxx = 0.0;
    for i in 0..x.len() {
        for j in 0..x.len() {
            if i != j {
                kxx += dot(&x[i], &x[j]);
            }
        }
    }
    let mut kvv = 0.0;
    for i in 0..v.len() {
        for j in 0..v.len() {
            if i != j {
                kvv += dot(&v[i], &v[j]);
            }
        }
    }
    let mut kxv = 0.0;
    for a in x {
        for b in v {
            kxv += dot(a, b);
        }
    }
    kxx / (m * (m - 1.0)) + kvv / (n * (n - 1.0)) - 2.0 * kxv / (m * n)
}

/// Type-7 quantile, `x[j] + (h − j)(x[j+1] − x[j])` with `h = p(n − 1)`.
pub fn quantile(values: &[f64], p: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pos = p * (v.len() as f64 - 1.0);
    let lo = pos.floor() as usize;
    let frac = pos - lo as f64;
    if lo + 1 < v.len() {
        v[lo] + frac * (v[lo + 1] - v[lo])
    } else {
        v[lo]
    }
}

pub fn median(values: &[f64]) -> f64 {
    quantile(values, 0.5)
}

// Written straight to the stderr handle: the test harness only captures the
// print macros, so these lines show up without --nocapture.
fn emit(line: String) {
    use std::io::Write;
    let _ = writeln!(std::io::stderr().lock(), "{line}");
}

/// Prints one acceptance line.
pub fn report(id: u32, name: &str, pass: bool, detail: &str) {
    emit(format!(
        "ACCEPTANCE {id:>2} {name}: {} ({detail})",
        if pass { "PASS" } else { "FAIL" }
    ));
}

pub fn report_skip(id: u32, name: &str, why: &str) {
    emit(format!("ACCEPTANCE {id:>2} {name}: SKIP ({why})"));
}
