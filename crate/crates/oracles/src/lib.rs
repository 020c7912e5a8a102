//! Loop-level reference implementations.
//!
//! Everything here works on plain nested `Vec`s and spells each quantity out
//! from its definition, sharing no code with `pivad-core`. Tests compare the
//! library against these.

pub type Mat = Vec<Vec<f64>>;

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let (m, k, n) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; n]; m];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a[i][p] * b[p][j];
            }
            out[i][j] = s;
        }
    }
    out
}

/// `w[k][c_in][c_out]`; zero padding on both ends.
pub fn conv1d(x: &Mat, w: &[Mat], bias: &[f64], stride: usize, padding: usize) -> Mat {
    let t = x.len() as isize;
    let k = w.len();
    let cout = bias.len();
    let t_out = (x.len() + 2 * padding - k) / stride + 1;
    let mut out = vec![vec![0.0; cout]; t_out];
    for (to, row) in out.iter_mut().enumerate() {
        for (o, cell) in row.iter_mut().enumerate() {
            let mut s = bias[o];
            for (kk, wk) in w.iter().enumerate() {
                let ti = (to * stride + kk) as isize - padding as isize;
                if ti < 0 || ti >= t {
                    continue;
                }
                for (c, wc) in wk.iter().enumerate() {
                    s += x[ti as usize][c] * wc[o];
                }
            }
            *cell = s;
        }
    }
    out
}

pub fn gelu_tanh(x: f64) -> f64 {
    let inner = (2.0f64 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3));
    x * 0.5 * (1.0 + inner.tanh())
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn layer_norm_row(row: &[f64], eps: f64) -> Vec<f64> {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    row.iter()
        .map(|v| (v - mean) / (var + eps).sqrt())
        .collect()
}

pub fn softmax_row(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
    row.iter().map(|v| (v - m).exp() / z).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn cosine_matrix(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .map(|ai| {
            b.iter()
                .map(|bk| dot(ai, bk) / (norm(ai).max(1e-12) * norm(bk).max(1e-12)))
                .collect()
        })
        .collect()
}

/// Bidirectional snippet-level InfoNCE with the positive inside the
/// denominator: ½ (rows + columns).
pub fn infonce_bidirectional(f: &Mat, a: &Mat, tau: f64) -> f64 {
    let s = cosine_matrix(f, a);
    let t = s.len();
    let mut row_dir = 0.0;
    let mut col_dir = 0.0;
    for i in 0..t {
        let mut den_r = 0.0;
        let mut den_c = 0.0;
        for k in 0..t {
            den_r += (s[i][k] / tau).exp();
            den_c += (s[k][i] / tau).exp();
        }
        let pos = (s[i][i] / tau).exp();
        row_dir -= (pos / den_r).ln();
        col_dir -= (pos / den_c).ln();
    }
    0.5 * (row_dir / t as f64 + col_dir / t as f64)
}

pub fn align(f: &Mat, aligned: &[Mat], tau: f64) -> f64 {
    aligned
        .iter()
        .map(|a| infonce_bidirectional(f, a, tau))
        .sum()
}

pub fn mean_sq_diff(a: &Mat, b: &Mat) -> f64 {
    let mut s = 0.0;
    let mut n = 0usize;
    for (ra, rb) in a.iter().zip(b) {
        for (x, y) in ra.iter().zip(rb) {
            s += (x - y) * (x - y);
            n += 1;
        }
    }
    s / n as f64
}

pub fn pmg(pred: &[Mat], target: &[Mat]) -> f64 {
    pred.iter()
        .zip(target)
        .map(|(p, t)| mean_sq_diff(p, t))
        .sum()
}

/// Top-k mean of sigmoid scores per video, then clamped BCE averaged over
/// the batch. `k = floor(T / 16) + 1`.
pub fn mil(logits: &[Vec<f64>], labels: &[bool]) -> f64 {
    let mut total = 0.0;
    for (lg, &y) in logits.iter().zip(labels) {
        let k = (lg.len() / 16 + 1).min(lg.len());
        let mut s: Vec<f64> = lg.iter().map(|&v| sigmoid(v)).collect();
        s.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let p = (s[..k].iter().sum::<f64>() / k as f64).clamp(1e-7, 1.0 - 1e-7);
        total += if y { -p.ln() } else { -(1.0 - p).ln() };
    }
    total / logits.len() as f64
}

/// P(score_pos > score_neg) + ½ P(tie) by enumerating every pair.
pub fn auc_pairwise(scores: &[f64], labels: &[bool]) -> f64 {
    let mut num = 0.0;
    let mut pairs = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        if !labels[i] {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] {
                continue;
            }
            pairs += 1.0;
            if si > sj {
                num += 1.0;
            } else if si == sj {
                num += 0.5;
            }
        }
    }
    num / pairs
}

/// Σ (R_n − R_{n−1}) P_n over every distinct score used as a threshold,
/// with precision and recall counted directly at each threshold.
pub fn ap_bruteforce(scores: &[f64], labels: &[bool]) -> f64 {
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    let positives = labels.iter().filter(|l| **l).count() as f64;
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    for th in thresholds {
        let mut tp = 0.0;
        let mut fp = 0.0;
        for (s, &l) in scores.iter().zip(labels) {
            if *s >= th {
                if l {
                    tp += 1.0;
                } else {
                    fp += 1.0;
                }
            }
        }
        let recall = tp / positives;
        let precision = tp / (tp + fp);
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    ap
}

/// Row-major flattening helper.
pub fn flatten(m: &Mat) -> Vec<f64> {
    m.iter().flatten().copied().collect()
}

/// Tiny deterministic generator so oracle-side fixtures need no RNG crate.
pub struct SplitMix(u64);

impl SplitMix {
    pub fn new(seed: u64) -> Self {
        Self(seed)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        let u = (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
        lo + (hi - lo) * u
    }

    pub fn below(&mut self, n: usize) -> usize {
        (self.next_u64() % n as u64) as usize
    }

    pub fn matrix(&mut self, rows: usize, cols: usize) -> Mat {
        (0..rows)
            .map(|_| (0..cols).map(|_| self.uniform(-1.0, 1.0)).collect())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn infonce_orthonormal_pair_closed_form() {
        let f = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let v = infonce_bidirectional(&f, &f, 1.0);
        assert!((v - (1.0 + (-1.0f64).exp()).ln()).abs() < 1e-12);
    }

    #[test]
    fn auc_and_ap_perfect_ranking() {
        let s = [0.1, 0.2, 0.8, 0.9];
        let l = [false, false, true, true];
        assert_eq!(auc_pairwise(&s, &l), 1.0);
        assert_eq!(ap_bruteforce(&s, &l), 1.0);
    }
}
