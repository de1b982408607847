//! Path combinatorics of (multi-)residual networks.
//!
//! Unravelling `n` blocks of `x + f¹(x) + … + fᵏ(x)` gives `(k+1)ⁿ` additive
//! path terms, `N(d) = C(n,d)·kᵈ` of which traverse exactly `d` functions.
//! Separately, switching each of the `k·n` functions on or off gives `2^(kn)`
//! configurations. Counts and weights are exact integers; floats appear only
//! in normalised outputs.

mod empirical;

pub use empirical::{
    empirical_path_gradient, fit_decay, lesion_sweep, toy_linear_network, LesionReport, LesionRow, PathGradient,
};

use std::fmt::Write as _;

use num_bigint::{BigInt, BigUint};
use num_rational::BigRational;
use num_traits::{One, ToPrimitive, Zero};

use crate::error::{Error, Result};
use crate::model::BlockKind;

fn check_nk(n: usize, k: usize) -> Result<()> {
    if n == 0 || k == 0 {
        return Err(Error::config("n and k must be at least 1"));
    }
    Ok(())
}

/// On/off configurations of all residual functions: `2^(k·n)`.
pub fn multiplicity(n: usize, k: usize) -> Result<BigUint> {
    check_nk(n, k)?;
    Ok(BigUint::one() << (k * n))
}

/// Additive terms in the distributed expansion: `(k+1)ⁿ`.
pub fn path_term_count(n: usize, k: usize) -> Result<BigUint> {
    check_nk(n, k)?;
    Ok(BigUint::from(k + 1).pow(n as u32))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PathDistribution {
    pub n: usize,
    pub k: usize,
    /// `counts[d] = C(n,d)·kᵈ`, `d = 0..=n`.
    pub counts: Vec<BigUint>,
}

impl PathDistribution {
    pub fn total(&self) -> BigUint {
        self.counts.iter().sum()
    }
}

pub fn path_depth_distribution(n: usize, k: usize) -> Result<PathDistribution> {
    check_nk(n, k)?;
    let mut counts = Vec::with_capacity(n + 1);
    let mut binom = BigUint::one();
    let mut kpow = BigUint::one();
    let kb = BigUint::from(k);
    for d in 0..=n {
        if d > 0 {
            binom = binom * BigUint::from(n - d + 1) / BigUint::from(d);
            kpow *= &kb;
        }
        counts.push(&binom * &kpow);
    }
    Ok(PathDistribution { n, k, counts })
}

/// Exact rational for the shortest decimal that round-trips `x`
/// (`0.7` becomes `7/10`, not the nearest binary fraction).
pub fn decimal_rational(x: f64) -> Result<BigRational> {
    if !x.is_finite() || x < 0.0 {
        return Err(Error::config(format!("{x} is not a finite non-negative number")));
    }
    let text = x.to_string();
    let (int, frac) = text.split_once('.').unwrap_or((&text, ""));
    let digits: BigInt = format!("{int}{frac}").parse().expect("decimal digits");
    let den = BigInt::from(10u32).pow(frac.len() as u32);
    Ok(BigRational::new(digits, den))
}

fn split_rational(r: &BigRational) -> (BigUint, BigUint) {
    let num = r.numer().to_biguint().expect("non-negative");
    let den = r.denom().to_biguint().expect("positive");
    (num, den)
}

/// `a / b` as the nearest-ish f64, for integers of any size.
pub fn ratio_f64(a: &BigUint, b: &BigUint) -> f64 {
    if a.is_zero() {
        return 0.0;
    }
    let shift = b.bits() as i64 - a.bits() as i64 + 64;
    let q = if shift >= 0 {
        (a << shift as u64) / b
    } else {
        a / (b << (-shift) as u64)
    };
    q.to_f64().expect("finite") * 2f64.powi(-shift as i32)
}

/// `w(d) = N(d)·rᵈ`.
///
/// Stored as integers `scaled[d] = N(d)·pᵈ·q^(n−d)` for `r = p/q`, i.e. the
/// exact weights times the common factor `qⁿ`.
#[derive(Clone, Debug, PartialEq)]
pub struct ContributionCurve {
    pub n: usize,
    pub k: usize,
    pub r: f64,
    pub distribution: PathDistribution,
    pub scaled: Vec<BigUint>,
    pub denominator: BigUint,
}

pub fn gradient_contribution(n: usize, k: usize, r: f64) -> Result<ContributionCurve> {
    if !(r > 0.0 && r <= 1.0) {
        return Err(Error::config(format!("decay r = {r} outside (0, 1]")));
    }
    let distribution = path_depth_distribution(n, k)?;
    let (p, q) = split_rational(&decimal_rational(r)?);
    let mut qpow = vec![BigUint::one(); n + 1];
    for i in 1..=n {
        qpow[i] = &qpow[i - 1] * &q;
    }
    let mut ppow = BigUint::one();
    let mut scaled = Vec::with_capacity(n + 1);
    for d in 0..=n {
        if d > 0 {
            ppow *= &p;
        }
        scaled.push(&distribution.counts[d] * &ppow * &qpow[n - d]);
    }
    Ok(ContributionCurve {
        n,
        k,
        r,
        distribution,
        scaled,
        denominator: qpow[n].clone(),
    })
}

impl ContributionCurve {
    /// Exact `w(d)`.
    pub fn weight(&self, d: usize) -> BigRational {
        BigRational::new(
            BigInt::from(self.scaled[d].clone()),
            BigInt::from(self.denominator.clone()),
        )
    }

    pub fn normalized(&self) -> Vec<f64> {
        let total: BigUint = self.scaled.iter().sum();
        self.scaled.iter().map(|w| ratio_f64(w, &total)).collect()
    }

    /// Smallest depth with the largest weight.
    pub fn mode(&self) -> usize {
        let mut best = 0;
        for d in 1..self.scaled.len() {
            if self.scaled[d] > self.scaled[best] {
                best = d;
            }
        }
        best
    }

    pub fn mean(&self) -> f64 {
        let total: BigUint = self.scaled.iter().sum();
        let moment: BigUint = self.scaled.iter().enumerate().map(|(d, w)| w * BigUint::from(d)).sum();
        ratio_f64(&moment, &total)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("d,count,weight,normalized\n");
        for (d, norm) in self.normalized().into_iter().enumerate() {
            let w = ratio_f64(&self.scaled[d], &self.denominator);
            let _ = writeln!(s, "{d},{},{w:e},{norm:e}", self.distribution.counts[d]);
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EffectiveRange {
    pub a: usize,
    pub b: usize,
    pub p: f64,
    /// Normalised mass inside `[a, b]`.
    pub coverage: f64,
}

impl EffectiveRange {
    pub fn width(&self) -> usize {
        self.b - self.a + 1
    }
}

/// Minimal-width window `[a, b]` of non-negative integer weights holding at
/// least a fraction `p` of the total, ties going to the smaller `a`.
pub fn effective_range_of(weights: &[BigUint], p: f64) -> Result<EffectiveRange> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::config(format!("coverage {p} outside (0, 1)")));
    }
    if weights.is_empty() {
        return Err(Error::config("empty curve"));
    }
    let (pn, pd) = split_rational(&decimal_rational(p)?);
    let mut prefix = Vec::with_capacity(weights.len() + 1);
    prefix.push(BigUint::zero());
    for w in weights {
        let next = prefix.last().expect("non-empty") + w;
        prefix.push(next);
    }
    let total = prefix.last().expect("non-empty").clone();
    if total.is_zero() {
        return Err(Error::config("curve has no mass"));
    }
    let need = &pn * &total;
    let enough = |a: usize, b: usize| (&prefix[b + 1] - &prefix[a]) * &pd >= need;
    let mut best: Option<(usize, usize)> = None;
    let mut b = 0;
    for a in 0..weights.len() {
        b = b.max(a);
        while b < weights.len() && !enough(a, b) {
            b += 1;
        }
        if b == weights.len() {
            break;
        }
        if best.is_none_or(|(ba, bb)| b - a < bb - ba) {
            best = Some((a, b));
        }
    }
    let (a, b) = best.expect("full window always suffices");
    Ok(EffectiveRange {
        a,
        b,
        p,
        coverage: ratio_f64(&(&prefix[b + 1] - &prefix[a]), &total),
    })
}

pub fn effective_range(curve: &ContributionCurve, p: f64) -> Result<EffectiveRange> {
    effective_range_of(&curve.scaled, p)
}

pub fn effective_range_csv(rows: &[(String, EffectiveRange)]) -> String {
    let mut s = String::from("case,a,b,width,p,coverage\n");
    for (name, r) in rows {
        let _ = writeln!(s, "{name},{},{},{},{},{}", r.a, r.b, r.width(), r.p, r.coverage);
    }
    s
}

/// Deeper (`c·n` blocks, `k = 1`) versus wider (`n` blocks, `k = c`) networks.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalingReport {
    pub n: usize,
    pub c: usize,
    pub r: f64,
    pub p: f64,
    pub base: EffectiveRange,
    pub deep: EffectiveRange,
    pub wide: EffectiveRange,
}

impl ScalingReport {
    /// `b_deep / (c·b_base)`; `None` when `b_base = 0`.
    pub fn ratio(&self) -> Option<f64> {
        (self.base.b > 0).then(|| self.deep.b as f64 / (self.c * self.base.b) as f64)
    }

    pub fn is_sublinear(&self) -> bool {
        self.deep.b < self.c * self.base.b
    }
}

pub fn compare_scaling(n: usize, c: usize, r: f64, p: f64) -> Result<ScalingReport> {
    if c == 0 {
        return Err(Error::config("scaling factor c must be positive"));
    }
    let base = effective_range(&gradient_contribution(n, 1, r)?, p)?;
    let deep = effective_range(&gradient_contribution(c * n, 1, r)?, p)?;
    let wide = effective_range(&gradient_contribution(n, c, r)?, p)?;
    Ok(ScalingReport {
        n,
        c,
        r,
        p,
        base,
        deep,
        wide,
    })
}

/// Convolutional layers traversed by a path through `path_depth` functions.
pub fn layer_depth(path_depth: usize, kind: BlockKind) -> usize {
    path_depth * kind.convs_per_function()
}
