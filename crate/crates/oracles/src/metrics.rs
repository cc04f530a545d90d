//! Metrics by exhaustive counting and textbook formulas.

/// Fraction of (positive, negative) pairs ranked correctly, ties ½.
pub fn auroc_pairs(score: &[f64], positive: &[bool]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for i in 0..score.len() {
        for j in 0..score.len() {
            if positive[i] && !positive[j] {
                pairs += 1.0;
                if score[i] > score[j] {
                    wins += 1.0;
                } else if score[i] == score[j] {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}

/// (mse, mae, r2, pearson) written out column by column.
pub fn regression(pred: &[f64], target: &[f64]) -> (f64, f64, f64, f64) {
    let n = pred.len() as f64;
    let mut sq = 0.0;
    let mut ab = 0.0;
    for i in 0..pred.len() {
        let e = pred[i] - target[i];
        sq += e * e;
        ab += e.abs();
    }
    let mp = pred.iter().sum::<f64>() / n;
    let mt = target.iter().sum::<f64>() / n;
    let mut tot = 0.0;
    let mut cov = 0.0;
    let mut vp = 0.0;
    for i in 0..pred.len() {
        tot += (target[i] - mt) * (target[i] - mt);
        cov += (pred[i] - mp) * (target[i] - mt);
        vp += (pred[i] - mp) * (pred[i] - mp);
    }
    (sq / n, ab / n, 1.0 - sq / tot, cov / (vp.sqrt() * tot.sqrt()))
}

pub fn brier(pred: &[f64], positive: &[bool]) -> f64 {
    let mut s = 0.0;
    for i in 0..pred.len() {
        let y = if positive[i] { 1.0 } else { 0.0 };
        s += (pred[i] - y) * (pred[i] - y);
    }
    s / pred.len() as f64
}

/// Bin index: 0 for p ≤ 0.25, 2 for p ≥ 0.75, 1 otherwise.
pub fn risk_bin(p: f64) -> usize {
    if p <= 0.25 {
        0
    } else if p >= 0.75 {
        2
    } else {
        1
    }
}

/// 3×3 confusion counts, rows = true bin, columns = predicted bin.
pub fn confusion(pred: &[f64], target: &[f64]) -> [[usize; 3]; 3] {
    let mut c = [[0; 3]; 3];
    for i in 0..pred.len() {
        c[risk_bin(target[i])][risk_bin(pred[i])] += 1;
    }
    c
}

/// One-vs-rest (sensitivity, specificity) per bin from confusion counts.
pub fn sens_spec(c: &[[usize; 3]; 3]) -> [(Option<f64>, Option<f64>); 3] {
    let total: usize = c.iter().flatten().sum();
    let mut out = [(None, None); 3];
    for b in 0..3 {
        let row: usize = c[b].iter().sum();
        let col: usize = (0..3).map(|r| c[r][b]).sum();
        let neg = total - row;
        let tn = total + c[b][b] - row - col;
        out[b] = (
            (row > 0).then(|| c[b][b] as f64 / row as f64),
            (neg > 0).then(|| tn as f64 / neg as f64),
        );
    }
    out
}
