use crate::error::{invalid, Result};

/// Coefficient of determination of `achieved` against `prompts`, with the
/// prompts as reference values.
pub fn r2_score(prompts: &[f64], achieved: &[f64]) -> Result<f64> {
    if prompts.len() != achieved.len() || prompts.len() < 2 {
        return Err(invalid("r2 needs ≥ 2 paired values"));
    }
    let mean = prompts.iter().sum::<f64>() / prompts.len() as f64;
    let ss_tot: f64 = prompts.iter().map(|p| (p - mean).powi(2)).sum();
    if ss_tot == 0.0 {
        return Err(invalid("prompts have zero variance"));
    }
    let ss_res: f64 = prompts.iter().zip(achieved).map(|(p, a)| (a - p).powi(2)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

/// Ranks starting at 1; ties share their average rank.
fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

/// Pearson correlation of the ranks.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(invalid("spearman needs ≥ 2 paired values"));
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        return Err(invalid("spearman undefined for a constant sequence"));
    }
    Ok(cov / (va * vb).sqrt())
}
