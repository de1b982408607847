use super::{features, simulate_step, CostModel, SimScenario};
use crate::error::{Error, Result};

const PARAM_NAMES: [&str; 4] = ["t_fn", "t_fixed", "latency", "bandwidth"];

#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub scenario: SimScenario,
    /// Measured step time in seconds.
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Calibration {
    pub model: CostModel,
    /// `predicted − observed`, in seconds, per observation.
    pub residuals: Vec<f64>,
}

impl Calibration {
    pub fn rms(&self) -> f64 {
        (self.residuals.iter().map(|r| r * r).sum::<f64>() / self.residuals.len() as f64).sqrt()
    }
}

/// Least squares on `cols` (column-major) via modified Gram–Schmidt.
/// Returns `None` when the columns are numerically dependent.
fn least_squares(cols: &[Vec<f64>], y: &[f64]) -> Option<Vec<f64>> {
    let p = cols.len();
    let mut q: Vec<Vec<f64>> = cols.to_vec();
    let mut r = vec![vec![0.0; p]; p];
    for j in 0..p {
        let orig = dot(&cols[j], &cols[j]).sqrt();
        for i in 0..j {
            let rij = dot(&q[i], &q[j]);
            r[i][j] = rij;
            let qi = q[i].clone();
            q[j].iter_mut().zip(&qi).for_each(|(a, b)| *a -= rij * b);
        }
        let norm = dot(&q[j], &q[j]).sqrt();
        if norm <= 1e-10 * orig.max(f64::MIN_POSITIVE) {
            return None;
        }
        r[j][j] = norm;
        q[j].iter_mut().for_each(|v| *v /= norm);
    }
    let qty: Vec<f64> = q.iter().map(|qj| dot(qj, y)).collect();
    let mut x = vec![0.0; p];
    for i in (0..p).rev() {
        let s: f64 = (i + 1..p).map(|j| r[i][j] * x[j]).sum();
        x[i] = (qty[i] - s) / r[i][i];
    }
    Some(x)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// First parameter whose column is a combination of the earlier ones.
fn first_dependent(cols: &[Vec<f64>]) -> Option<usize> {
    (0..cols.len()).find(|&j| least_squares(&cols[..=j], &vec![0.0; cols[0].len()]).is_none())
}

/// Fit `t_fn`, `t_fixed`, `latency` and `1/bandwidth` to measured step times.
///
/// The step time is linear in those four, so the fit is an exact
/// non-negative least-squares solve: every subset of parameters is tried
/// free with the rest pinned at zero, and the best feasible subset wins.
/// Warp, activation size and parameter size come from `initial`.
pub fn calibrate(observations: &[Observation], initial: &CostModel) -> Result<Calibration> {
    initial.validate()?;
    if observations.len() < 3 {
        return Err(Error::config(format!(
            "calibration needs at least 3 observations, got {}",
            observations.len()
        )));
    }
    let rows = observations
        .iter()
        .map(|o| features(&o.scenario, initial))
        .collect::<Result<Vec<_>>>()?;
    let y: Vec<f64> = observations.iter().map(|o| o.seconds).collect();
    if y.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::config("observed times must be finite and non-negative"));
    }
    // columns scaled to unit max so conditioning does not depend on units
    let mut scale = [0.0; 4];
    let mut cols: Vec<Vec<f64>> = vec![Vec::new(); 4];
    for j in 0..4 {
        scale[j] = rows.iter().map(|r| r[j].abs()).fold(0.0, f64::max);
        if scale[j] == 0.0 {
            return Err(Error::Unidentifiable(PARAM_NAMES[j]));
        }
        cols[j] = rows.iter().map(|r| r[j] / scale[j]).collect();
    }
    if let Some(j) = first_dependent(&cols) {
        return Err(Error::Unidentifiable(PARAM_NAMES[j]));
    }

    let mut best: Option<(f64, [f64; 4])> = None;
    for mask in 0u32..16 {
        let active: Vec<usize> = (0..4).filter(|j| mask & (1 << j) != 0).collect();
        let sub: Vec<Vec<f64>> = active.iter().map(|&j| cols[j].clone()).collect();
        let coef = if active.is_empty() {
            Vec::new()
        } else {
            match least_squares(&sub, &y) {
                Some(c) => c,
                None => continue,
            }
        };
        if coef.iter().any(|&c| c < 0.0) {
            continue;
        }
        let mut theta = [0.0; 4];
        for (&j, c) in active.iter().zip(&coef) {
            theta[j] = c / scale[j];
        }
        let sse: f64 = rows.iter().zip(&y).map(|(r, yi)| (dot(r, &theta) - yi).powi(2)).sum();
        if best.as_ref().is_none_or(|(b, _)| sse < *b) {
            best = Some((sse, theta));
        }
    }
    let (_, [t_fn, t_fixed, latency, inv_bw]) = best.expect("the empty subset is always feasible");
    let model = CostModel {
        t_fn,
        t_fixed,
        latency,
        bandwidth: if inv_bw > 0.0 { 1.0 / inv_bw } else { f64::INFINITY },
        ..initial.clone()
    };
    let residuals = observations
        .iter()
        .map(|o| Ok(simulate_step(&o.scenario, &model)?.step_time - o.seconds))
        .collect::<Result<Vec<f64>>>()?;
    Ok(Calibration { model, residuals })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::Strategy;

    fn grid() -> Vec<SimScenario> {
        let mut out = Vec::new();
        for batch in [16, 64, 200] {
            out.push(SimScenario::new(108, 1, batch, 2, Strategy::Data));
            out.push(SimScenario::new(54, 2, batch, 2, Strategy::Model));
            out.push(SimScenario::new(30, 4, batch, 1, Strategy::Data));
        }
        out
    }

    #[test]
    fn recovers_known_model() {
        let truth = CostModel {
            t_fn: 3e-5,
            t_fixed: 0.02,
            latency: 4e-4,
            bandwidth: 6e9,
            ..CostModel::default()
        };
        let obs: Vec<Observation> = grid()
            .into_iter()
            .map(|s| Observation {
                seconds: simulate_step(&s, &truth).unwrap().step_time,
                scenario: s,
            })
            .collect();
        let fit = calibrate(&obs, &CostModel::default()).unwrap();
        for (a, b) in [
            (fit.model.t_fn, truth.t_fn),
            (fit.model.t_fixed, truth.t_fixed),
            (fit.model.latency, truth.latency),
            (fit.model.bandwidth, truth.bandwidth),
        ] {
            assert!((a / b - 1.0).abs() < 0.01, "{a} vs {b}");
        }
        assert!(fit.rms() < 1e-12);
    }

    #[test]
    fn identical_observations_are_rank_deficient() {
        let s = SimScenario::new(54, 2, 32, 2, Strategy::Model);
        let obs = vec![
            Observation {
                scenario: s.clone(),
                seconds: 0.1
            };
            3
        ];
        assert!(matches!(
            calibrate(&obs, &CostModel::default()),
            Err(Error::Unidentifiable(_))
        ));
        assert!(calibrate(&obs[..2], &CostModel::default()).is_err());
    }

    #[test]
    fn fit_never_goes_negative() {
        let obs: Vec<Observation> = grid()
            .into_iter()
            .enumerate()
            .map(|(i, s)| Observation {
                scenario: s,
                seconds: if i % 2 == 0 { 0.5 } else { 0.1 },
            })
            .collect();
        let fit = calibrate(&obs, &CostModel::default()).unwrap();
        let m = fit.model;
        assert!(m.t_fn >= 0.0 && m.t_fixed >= 0.0 && m.latency >= 0.0 && m.bandwidth > 0.0);
    }
}
