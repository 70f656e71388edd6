//! Slow, direct reference computations for cross-checking fairgate.
//! Nothing here shares code with the library under test.

/// Exhaustive EER sweep. Thresholds are every midpoint `a/2 + b/2` of
/// adjacent distinct pooled scores plus one value below and above the
/// range. Rates are counted directly at each threshold; the smallest
/// threshold with the least `|FAR − FRR|` wins. Returns `(eer, threshold)`.
pub fn eer_sweep(bona: &[f64], spoof: &[f64]) -> (f64, f64) {
    assert!(!bona.is_empty() && !spoof.is_empty());
    let mut pooled: Vec<f64> = bona.iter().chain(spoof).copied().collect();
    pooled.sort_by(f64::total_cmp);
    pooled.dedup_by(|a, b| a == b);
    let mut thresholds = vec![pooled[0] - 1.0];
    for w in pooled.windows(2) {
        thresholds.push(w[0] / 2.0 + w[1] / 2.0);
    }
    thresholds.push(pooled[pooled.len() - 1] + 1.0);

    let rates = |t: f64| {
        let far = spoof.iter().filter(|&&s| s >= t).count() as f64 / spoof.len() as f64;
        let frr = bona.iter().filter(|&&s| s < t).count() as f64 / bona.len() as f64;
        (far, frr)
    };
    let best = thresholds
        .iter()
        .map(|&t| {
            let (far, frr) = rates(t);
            (far - frr).abs()
        })
        .fold(f64::INFINITY, f64::min);
    let theta = thresholds
        .iter()
        .copied()
        .filter(|&t| {
            let (far, frr) = rates(t);
            (far - frr).abs() == best
        })
        .fold(f64::INFINITY, f64::min);
    let (far, frr) = rates(theta);
    ((far + frr) / 2.0, theta)
}

/// Pearson chi-squared statistic of a 2×2 table, no continuity correction.
pub fn chi2_statistic(table: [[f64; 2]; 2]) -> f64 {
    let n: f64 = table.iter().flatten().sum();
    let mut stat = 0.0;
    for i in 0..2 {
        for j in 0..2 {
            let row = table[i][0] + table[i][1];
            let col = table[0][j] + table[1][j];
            let e = row * col / n;
            stat += (table[i][j] - e).powi(2) / e;
        }
    }
    stat
}

/// Γ(df/2) from Γ(1/2) = √π and Γ(1) = 1 by the recurrence Γ(x+1) = xΓ(x).
fn half_gamma(df: u32) -> f64 {
    assert!(df > 0);
    let (mut x, mut g) = if df % 2 == 1 {
        (0.5, std::f64::consts::PI.sqrt())
    } else {
        (1.0, 1.0)
    };
    while x < df as f64 / 2.0 {
        g *= x;
        x += 1.0;
    }
    g
}

/// Chi-squared upper tail by Simpson integration of the density after the
/// substitution `t = u²`, which removes the singularity at zero for df = 1.
pub fn chi2_sf_integral(x: f64, df: u32) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    let k = df as f64;
    let norm = 2.0_f64.powf(k / 2.0) * half_gamma(df);
    let f = |u: f64| 2.0 * u.powf(k - 1.0) * (-u * u / 2.0).exp() / norm;
    let a = x.sqrt();
    let b = a + 14.0;
    let n = 40_000;
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * f(a + i as f64 * h);
    }
    s * h / 3.0
}

/// Central finite-difference gradient of `f` at `x`.
pub fn central_difference(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Exact Shapley values of `f` at `x` by enumerating every coalition.
/// Features outside a coalition take their `baseline` value.
pub fn shapley(f: impl Fn(&[f64]) -> f64, x: &[f64], baseline: &[f64]) -> Vec<f64> {
    let d = x.len();
    assert!(d <= 16, "coalition enumeration is exponential in the dimension");
    let value = |mask: usize| {
        let point: Vec<f64> = (0..d)
            .map(|i| if mask >> i & 1 == 1 { x[i] } else { baseline[i] })
            .collect();
        f(&point)
    };
    let fact = |n: usize| (1..=n).map(|v| v as f64).product::<f64>();
    let mut phi = vec![0.0; d];
    for (i, p) in phi.iter_mut().enumerate() {
        for mask in 0..1usize << d {
            if mask >> i & 1 == 1 {
                continue;
            }
            let s = mask.count_ones() as usize;
            let weight = fact(s) * fact(d - s - 1) / fact(d);
            *p += weight * (value(mask | 1 << i) - value(mask));
        }
    }
    phi
}

/// Mean absolute Shapley value per feature over `xs`, with the sample mean
/// as baseline.
pub fn mean_abs_shapley(f: impl Fn(&[f64]) -> f64, xs: &[Vec<f64>]) -> Vec<f64> {
    let d = xs[0].len();
    let n = xs.len() as f64;
    let baseline: Vec<f64> = (0..d).map(|j| xs.iter().map(|x| x[j]).sum::<f64>() / n).collect();
    let mut mass = vec![0.0; d];
    for x in xs {
        for (m, p) in mass.iter_mut().zip(shapley(&f, x, &baseline)) {
            *m += p.abs();
        }
    }
    mass.iter().map(|m| m / n).collect()
}

/// Mean absolute change of `f` when feature `d` alone is replaced by its
/// sample mean, per feature.
pub fn mean_replacement_attribution(f: impl Fn(&[f64]) -> f64, xs: &[Vec<f64>]) -> Vec<f64> {
    let d = xs[0].len();
    let n = xs.len() as f64;
    let means: Vec<f64> = (0..d).map(|j| xs.iter().map(|x| x[j]).sum::<f64>() / n).collect();
    (0..d)
        .map(|j| {
            xs.iter()
                .map(|x| {
                    let mut y = x.clone();
                    y[j] = means[j];
                    (f(x) - f(&y)).abs()
                })
                .sum::<f64>()
                / n
        })
        .collect()
}
