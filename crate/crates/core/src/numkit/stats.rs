use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

fn mean(xs: &[f64]) -> f64 {
    let mut s = 0.0;
    for x in xs {
        s += x;
    }
    s / xs.len() as f64
}

/// Pearson correlation coefficient.
///
/// Fails with [`Error::DegenerateInput`] on fewer than 3 points, mismatched
/// lengths or a constant sequence.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::DegenerateInput(format!("length mismatch {} vs {}", xs.len(), ys.len())));
    }
    if xs.len() < 3 {
        return Err(Error::DegenerateInput(format!("need at least 3 points, got {}", xs.len())));
    }
    let mx = mean(xs);
    let my = mean(ys);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let dx = x - mx;
        let dy = y - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::DegenerateInput("constant sequence".into()));
    }
    let r = sxy / (sxx.sqrt() * syy.sqrt());
    if !r.is_finite() {
        return Err(Error::DegenerateInput("correlation is not finite".into()));
    }
    Ok(r.clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

/// Ordinary least-squares line `y ≈ slope·x + intercept`.
pub fn linfit(xs: &[f64], ys: &[f64]) -> Result<LineFit> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::DegenerateInput(format!(
            "need two equal-length sequences of at least 2 points, got {} and {}",
            xs.len(),
            ys.len()
        )));
    }
    let mx = mean(xs);
    let my = mean(ys);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let dx = x - mx;
        let dy = y - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 {
        return Err(Error::DegenerateInput("abscissae are constant".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r_squared = if syy == 0.0 {
        0.0
    } else {
        let mut ss_res = 0.0;
        for (x, y) in xs.iter().zip(ys) {
            let e = y - (slope * x + intercept);
            ss_res += e * e;
        }
        (1.0 - ss_res / syy).clamp(0.0, 1.0)
    };
    Ok(LineFit { slope, intercept, r_squared })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanCi {
    pub mean: f64,
    pub lo: f64,
    pub hi: f64,
}

/// Mean with a two-sided Student-t confidence interval at `level`.
pub fn mean_ci(samples: &[f64], level: f64) -> Result<MeanCi> {
    if samples.len() < 2 {
        return Err(Error::DegenerateInput(format!("need at least 2 samples, got {}", samples.len())));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::DegenerateInput(format!("confidence level {level} not in (0, 1)")));
    }
    let n = samples.len() as f64;
    let m = mean(samples);
    let mut ss = 0.0;
    for x in samples {
        ss += (x - m) * (x - m);
    }
    let sd = (ss / (n - 1.0)).sqrt();
    if sd == 0.0 {
        return Ok(MeanCi { mean: m, lo: m, hi: m });
    }
    let t = StudentsT::new(0.0, 1.0, n - 1.0)
        .map_err(|e| Error::DegenerateInput(e.to_string()))?
        .inverse_cdf(0.5 + level / 2.0);
    let half = t * sd / n.sqrt();
    Ok(MeanCi { mean: m, lo: m - half, hi: m + half })
}
