//! Scalar plate sources `h`, their antiderivatives `H`, the radial truncation
//! `h^K`, and numerical validators for the superlinearity assumptions.

use std::fmt;
use std::sync::Arc;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::SourceError;
use crate::mesh::GridFunction;
use crate::operators::DiscreteOperators;

/// A user-supplied scalar source. `antiderivative(0)` must be zero.
pub trait ScalarSource: Send + Sync {
    fn h(&self, s: f64) -> f64;
    fn h_prime(&self, s: f64) -> f64;
    fn antiderivative(&self, s: f64) -> f64;
}

/// Built-in source families.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum Builtin {
    /// `h(s) = a |s|^{p-1} s`.
    Power {
        p: f64,
        scale: f64,
    },
    /// `h(s) = e^{|s|^q} |s|^p s`.
    ExpPower {
        p: f64,
        q: f64,
    },
    /// `h(s) = e^{e^{|s|}} |s|^p s`.
    DoubleExp {
        p: f64,
    },
    /// `h(s) = c s + b`.
    Linear {
        c: f64,
        offset: f64,
    },
    Zero,
}

/// Parameters accepted by [`SourceSpec::builtin`]. Unset keys take family defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceParams {
    pub p: Option<f64>,
    pub q: Option<f64>,
    pub c: Option<f64>,
    pub offset: Option<f64>,
    pub scale: Option<f64>,
    /// Overrides the family's AR exponent.
    pub theta: Option<f64>,
}

#[derive(Clone)]
enum Kind {
    Builtin(Builtin),
    Custom { name: String, f: Arc<dyn ScalarSource> },
}

/// A scalar source with metadata.
#[derive(Clone)]
pub struct SourceSpec {
    kind: Kind,
    theta: Option<f64>,
    linear_growth_c: Option<f64>,
}

impl fmt::Debug for SourceSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut d = f.debug_struct("SourceSpec");
        match &self.kind {
            Kind::Builtin(b) => d.field("builtin", b),
            Kind::Custom { name, .. } => d.field("custom", name),
        };
        d.field("theta", &self.theta)
            .field("linear_growth_c", &self.linear_growth_c)
            .finish()
    }
}

fn param(msg: impl Into<String>) -> SourceError {
    SourceError::Parameter(msg.into())
}

fn finite_positive(name: &str, v: f64) -> Result<f64, SourceError> {
    if v.is_finite() && v > 0.0 {
        Ok(v)
    } else {
        Err(param(format!("{name} must be finite and positive, got {v}")))
    }
}

/// `Σ_k x^k / (k! (q k + r))` for `x ≥ 0`, all terms positive.
fn exp_moment_series(x: f64, q: f64, r: f64) -> f64 {
    let mut term = 1.0;
    let mut sum = 1.0 / r;
    let mut k = 0u32;
    loop {
        k += 1;
        term *= x / k as f64;
        let add = term / (q * k as f64 + r);
        sum += add;
        if !sum.is_finite() {
            return f64::INFINITY;
        }
        if k as f64 > x && add <= sum * 1e-17 {
            return sum;
        }
        if k > 100_000 {
            return sum;
        }
    }
}

impl Builtin {
    fn h(&self, s: f64) -> f64 {
        let a = s.abs();
        match *self {
            Builtin::Power { p, scale } => scale * a.powf(p - 1.0) * s,
            Builtin::ExpPower { p, q } => (a.powf(q)).exp() * a.powf(p) * s,
            Builtin::DoubleExp { p } => a.exp().exp() * a.powf(p) * s,
            Builtin::Linear { c, offset } => c * s + offset,
            Builtin::Zero => 0.0,
        }
    }

    fn h_prime(&self, s: f64) -> f64 {
        let a = s.abs();
        match *self {
            Builtin::Power { p, scale } => scale * p * a.powf(p - 1.0),
            Builtin::ExpPower { p, q } => {
                let aq = a.powf(q);
                aq.exp() * a.powf(p) * (q * aq + p + 1.0)
            }
            Builtin::DoubleExp { p } => {
                let ea = a.exp();
                ea.exp() * (ea * a.powf(p + 1.0) + (p + 1.0) * a.powf(p))
            }
            Builtin::Linear { c, .. } => c,
            Builtin::Zero => 0.0,
        }
    }

    fn antiderivative(&self, s: f64) -> f64 {
        let a = s.abs();
        match *self {
            Builtin::Power { p, scale } => scale * a.powf(p + 1.0) / (p + 1.0),
            Builtin::ExpPower { p, q } => {
                if a == 0.0 {
                    0.0
                } else {
                    a.powf(p + 2.0) * exp_moment_series(a.powf(q), q, p + 2.0)
                }
            }
            Builtin::DoubleExp { p } => {
                if a == 0.0 {
                    return 0.0;
                }
                let f = |t: f64| t.exp().exp() * t.powf(p + 1.0);
                let bound = f(a) * a;
                if !bound.is_finite() {
                    return f64::INFINITY;
                }
                quadrature::integrate(f, 0.0, a, 1e-15 * bound.max(f64::MIN_POSITIVE)).integral
            }
            Builtin::Linear { c, offset } => 0.5 * c * s * s + offset * s,
            Builtin::Zero => 0.0,
        }
    }
}

impl SourceSpec {
    /// Looks up a built-in family by config name.
    pub fn builtin(name: &str, params: &SourceParams) -> Result<Self, SourceError> {
        let allowed: &[&str] = match name {
            "power" => &["p", "scale", "theta"],
            "exp_power" => &["p", "q", "theta"],
            "double_exp" => &["p", "theta"],
            "linear" => &["c", "offset"],
            "zero" => &[],
            other => return Err(SourceError::UnknownSource(other.to_string())),
        };
        let given = [
            ("p", params.p),
            ("q", params.q),
            ("c", params.c),
            ("offset", params.offset),
            ("scale", params.scale),
            ("theta", params.theta),
        ];
        for (key, v) in given {
            if v.is_some() && !allowed.contains(&key) {
                return Err(param(format!("`{key}` is not a parameter of `{name}`")));
            }
        }
        let mut spec = match name {
            "power" => Self::power_scaled(params.p.unwrap_or(3.0), params.scale.unwrap_or(1.0))?,
            "exp_power" => Self::exp_power(params.p.unwrap_or(1.0), params.q.unwrap_or(1.0))?,
            "double_exp" => Self::double_exp(params.p.unwrap_or(1.0))?,
            "linear" => Self::linear_affine(params.c.unwrap_or(1.0), params.offset.unwrap_or(0.0))?,
            _ => Self::zero(),
        };
        if let Some(theta) = params.theta {
            spec = spec.with_theta(theta)?;
        }
        Ok(spec)
    }

    pub fn power(p: f64) -> Result<Self, SourceError> {
        Self::power_scaled(p, 1.0)
    }

    /// `a |s|^{p-1} s`, `p ≥ 1`, `a > 0`.
    ///
    /// For `p > 1` the AR exponent is `(p + 3)/2`, strictly inside `(2, p + 1)`.
    pub fn power_scaled(p: f64, scale: f64) -> Result<Self, SourceError> {
        if !(p.is_finite() && p >= 1.0) {
            return Err(param(format!("power exponent must be >= 1, got {p}")));
        }
        finite_positive("scale", scale)?;
        Ok(Self {
            kind: Kind::Builtin(Builtin::Power { p, scale }),
            theta: (p > 1.0).then(|| (p + 3.0) / 2.0),
            linear_growth_c: (p == 1.0).then_some(scale),
        })
    }

    /// `e^{|s|^q} |s|^p s`, `p, q > 0`; AR exponent `2 + p/2`.
    pub fn exp_power(p: f64, q: f64) -> Result<Self, SourceError> {
        finite_positive("p", p)?;
        finite_positive("q", q)?;
        Ok(Self {
            kind: Kind::Builtin(Builtin::ExpPower { p, q }),
            theta: Some(2.0 + p / 2.0),
            linear_growth_c: None,
        })
    }

    /// `e^{e^{|s|}} |s|^p s`, `p ≥ 0`; AR exponent `2 + p/2` when `p > 0`.
    ///
    /// For `p = 0`, `h(s)s / H(s) → 2` as `s → 0`, so no `θ > 2` exists.
    pub fn double_exp(p: f64) -> Result<Self, SourceError> {
        if !(p.is_finite() && p >= 0.0) {
            return Err(param(format!("double_exp exponent must be >= 0, got {p}")));
        }
        Ok(Self {
            kind: Kind::Builtin(Builtin::DoubleExp { p }),
            theta: (p > 0.0).then(|| 2.0 + p / 2.0),
            linear_growth_c: None,
        })
    }

    pub fn linear(c: f64) -> Result<Self, SourceError> {
        Self::linear_affine(c, 0.0)
    }

    /// `c s + b`; satisfies `|h(s)| ≤ max(|c|, |b|)(|s| + 1)`.
    pub fn linear_affine(c: f64, offset: f64) -> Result<Self, SourceError> {
        if !c.is_finite() || !offset.is_finite() {
            return Err(param("linear coefficients must be finite"));
        }
        let growth = c.abs().max(offset.abs());
        Ok(Self {
            kind: Kind::Builtin(Builtin::Linear { c, offset }),
            theta: None,
            linear_growth_c: (growth > 0.0).then_some(growth),
        })
    }

    /// `h ≡ 0`. Its growth constant is recorded as 0, the infimum of valid `c`.
    pub fn zero() -> Self {
        Self {
            kind: Kind::Builtin(Builtin::Zero),
            theta: None,
            linear_growth_c: Some(0.0),
        }
    }

    pub fn custom(
        name: impl Into<String>,
        f: Arc<dyn ScalarSource>,
        theta: Option<f64>,
        linear_growth_c: Option<f64>,
    ) -> Result<Self, SourceError> {
        if f.antiderivative(0.0) != 0.0 {
            return Err(param("antiderivative must vanish at 0"));
        }
        if let Some(c) = linear_growth_c {
            if !(c.is_finite() && c >= 0.0) {
                return Err(param(format!("linear growth constant must be >= 0, got {c}")));
            }
        }
        let spec = Self {
            kind: Kind::Custom { name: name.into(), f },
            theta: None,
            linear_growth_c,
        };
        match theta {
            Some(t) => spec.with_theta(t),
            None => Ok(spec),
        }
    }

    /// Replaces the AR exponent. Requires `θ > 2` and `h(0) = 0`.
    pub fn with_theta(mut self, theta: f64) -> Result<Self, SourceError> {
        if !(theta.is_finite() && theta > 2.0) {
            return Err(param(format!("theta must be > 2, got {theta}")));
        }
        if self.h(0.0) != 0.0 {
            return Err(param("an AR exponent requires h(0) = 0"));
        }
        self.theta = Some(theta);
        Ok(self)
    }

    /// Replaces the declared linear-growth constant (no validation of the claim).
    pub fn with_linear_growth(mut self, c: f64) -> Self {
        self.linear_growth_c = Some(c);
        self
    }

    pub fn name(&self) -> &str {
        match &self.kind {
            Kind::Builtin(Builtin::Power { .. }) => "power",
            Kind::Builtin(Builtin::ExpPower { .. }) => "exp_power",
            Kind::Builtin(Builtin::DoubleExp { .. }) => "double_exp",
            Kind::Builtin(Builtin::Linear { .. }) => "linear",
            Kind::Builtin(Builtin::Zero) => "zero",
            Kind::Custom { name, .. } => name,
        }
    }

    pub fn builtin_kind(&self) -> Option<Builtin> {
        match self.kind {
            Kind::Builtin(b) => Some(b),
            Kind::Custom { .. } => None,
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self.kind, Kind::Builtin(Builtin::Zero))
    }

    pub fn theta(&self) -> Option<f64> {
        self.theta
    }

    pub fn linear_growth_c(&self) -> Option<f64> {
        self.linear_growth_c
    }

    #[inline]
    pub fn h(&self, s: f64) -> f64 {
        match &self.kind {
            Kind::Builtin(b) => b.h(s),
            Kind::Custom { f, .. } => f.h(s),
        }
    }

    #[inline]
    pub fn h_prime(&self, s: f64) -> f64 {
        match &self.kind {
            Kind::Builtin(b) => b.h_prime(s),
            Kind::Custom { f, .. } => f.h_prime(s),
        }
    }

    /// `H(s) = ∫₀ˢ h`.
    #[inline]
    pub fn antiderivative(&self, s: f64) -> f64 {
        match &self.kind {
            Kind::Builtin(b) => b.antiderivative(s),
            Kind::Custom { f, .. } => f.antiderivative(s),
        }
    }

    /// Pointwise `h` on a slice; the error carries the slice index.
    pub fn apply(&self, w: &[f64], out: &mut [f64]) -> Result<(), SourceError> {
        for (i, (&s, o)) in w.iter().zip(out.iter_mut()).enumerate() {
            let v = self.h(s);
            if !v.is_finite() {
                return Err(SourceError::NonFinite {
                    node: i,
                    input: s,
                    value: v,
                });
            }
            *o = v;
        }
        Ok(())
    }

    /// `max_{|s| ≤ r} |h'(s)|`, by dense sampling (exact for the built-ins,
    /// whose `|h'|` is even and nondecreasing in `|s|`).
    pub fn max_abs_derivative(&self, r: f64) -> f64 {
        let r = r.abs();
        let n = 2000;
        let mut m = self.h_prime(r).abs().max(self.h_prime(-r).abs());
        for k in 0..=n {
            let s = -r + 2.0 * r * k as f64 / n as f64;
            m = m.max(self.h_prime(s).abs());
        }
        m
    }
}

/// Pointwise `h(w)` on a plate grid function.
pub fn eval_source_field(s: &SourceSpec, w: &GridFunction) -> Result<GridFunction, SourceError> {
    let mut values = vec![0.0; w.values.len()];
    s.apply(&w.values, &mut values)?;
    Ok(GridFunction {
        grid: w.grid.clone(),
        values,
    })
}

/// `h^K`: the source evaluated on the `|Δ_h ·|₂`-ball of radius `K`.
#[derive(Clone, Debug)]
pub struct TruncatedSource {
    pub base: SourceSpec,
    pub k: f64,
}

impl TruncatedSource {
    pub fn new(base: SourceSpec, k: f64) -> Result<Self, SourceError> {
        if !(k.is_finite() && k > 0.0) {
            return Err(param(format!("truncation radius must be positive, got {k}")));
        }
        Ok(Self { base, k })
    }

    /// Radial retraction factor for a field with `|Δ_h w|₂ = norm`.
    pub fn factor(&self, norm: f64) -> f64 {
        if norm <= self.k {
            1.0
        } else {
            self.k / norm
        }
    }

    /// Retracted free values and whether the retraction was active.
    pub fn retract(&self, ops: &DiscreteOperators, w: &DVector<f64>) -> (DVector<f64>, bool) {
        let norm = ops.lap_sq(w).sqrt();
        let f = self.factor(norm);
        if f == 1.0 {
            (w.clone(), false)
        } else {
            (w * f, true)
        }
    }

    /// Global Lipschitz estimate `L_K = max_{|s| ≤ C_emb K} |h'(s)|`.
    pub fn lipschitz(&self, ops: &DiscreteOperators) -> f64 {
        self.base.max_abs_derivative(ops.constants().embedding * self.k)
    }
}

pub fn eval_truncated(
    t: &TruncatedSource,
    ops: &DiscreteOperators,
    w: &GridFunction,
) -> Result<GridFunction, SourceError> {
    let norm = ops.plate_h2_seminorm(w)?;
    let f = t.factor(norm);
    if f == 1.0 {
        eval_source_field(&t.base, w)
    } else {
        eval_source_field(&t.base, &w.scaled(f))
    }
}

/// Outcome of one numerical condition check.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConditionCheck {
    pub passed: bool,
    /// First violating sample, if any.
    pub witness: Option<f64>,
    /// First sample whose meaning is ambiguous (reported, not judged).
    pub flagged: Option<f64>,
}

impl ConditionCheck {
    fn new() -> Self {
        Self {
            passed: true,
            witness: None,
            flagged: None,
        }
    }

    fn fail(&mut self, s: f64) {
        if self.passed {
            self.passed = false;
            self.witness = Some(s);
        }
    }
}

/// Numerical check of the four superlinearity conditions on a sample range.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ArReport {
    pub theta: f64,
    /// `0 < θ H(s) < h(s) s` for `s ≠ 0`.
    pub positivity: ConditionCheck,
    /// `|h(s)| ≤ h(|s|)`.
    pub odd_bound: ConditionCheck,
    /// `h` nondecreasing on `(0, ∞)`.
    pub monotone: ConditionCheck,
    /// `h(s)/s ↓ 0⁺` on a halving sequence toward 0.
    pub vanishing_slope: ConditionCheck,
    /// Samples skipped because `h` or `H` overflowed.
    pub skipped: usize,
}

impl ArReport {
    pub fn all_passed(&self) -> bool {
        self.positivity.passed && self.odd_bound.passed && self.monotone.passed && self.vanishing_slope.passed
    }
}

pub fn ar_conditions_report(s: &SourceSpec, range: (f64, f64), samples: usize) -> Result<ArReport, SourceError> {
    let theta = s.theta().ok_or_else(|| param("source has no AR exponent"))?;
    if samples < 100 {
        return Err(param(format!("need at least 100 samples, got {samples}")));
    }
    let (lo, hi) = if range.0 <= range.1 { range } else { (range.1, range.0) };
    let points: Vec<f64> = (0..samples)
        .map(|k| lo + (hi - lo) * k as f64 / (samples - 1) as f64)
        .collect();

    let mut positivity = ConditionCheck::new();
    let mut odd_bound = ConditionCheck::new();
    let mut skipped = 0;
    for &x in &points {
        let hx = s.h(x);
        let big_h = s.antiderivative(x);
        let ha = s.h(x.abs());
        if !(hx.is_finite() && big_h.is_finite() && ha.is_finite()) {
            skipped += 1;
            continue;
        }
        if x != 0.0 {
            let th = theta * big_h;
            if !(0.0 < th && th < hx * x) {
                positivity.fail(x);
            }
        }
        if ha < 0.0 {
            if odd_bound.flagged.is_none() {
                odd_bound.flagged = Some(x);
            }
        } else if hx.abs() > ha * (1.0 + 4.0 * f64::EPSILON) {
            odd_bound.fail(x);
        }
    }

    let mut monotone = ConditionCheck::new();
    let top = hi.abs().max(lo.abs());
    let mut positives: Vec<f64> = points.iter().copied().filter(|&x| x > 0.0).collect();
    if positives.len() < 2 {
        positives = (1..=samples).map(|k| top * k as f64 / samples as f64).collect();
    }
    let mut prev: Option<f64> = None;
    for &x in &positives {
        let v = s.h(x);
        if !v.is_finite() {
            continue;
        }
        if let Some(p) = prev {
            if v < p {
                monotone.fail(x);
            }
        }
        prev = Some(v);
    }

    let mut vanishing_slope = ConditionCheck::new();
    let mut x = top.min(1.0);
    let mut prev: Option<f64> = None;
    for _ in 0..60 {
        let r = s.h(x) / x;
        if r.is_finite() {
            if r <= 0.0 {
                vanishing_slope.fail(x);
                break;
            }
            if let Some(p) = prev {
                if r >= p {
                    vanishing_slope.fail(x);
                    break;
                }
            }
            if r < 1e-280 {
                break;
            }
            prev = Some(r);
        }
        x *= 0.5;
    }

    Ok(ArReport {
        theta,
        positivity,
        odd_bound,
        monotone,
        vanishing_slope,
        skipped,
    })
}

/// Ridders' extrapolated central difference.
fn ridders(f: impl Fn(f64) -> f64, x: f64, h0: f64) -> f64 {
    const CON: f64 = 1.4;
    const CON2: f64 = CON * CON;
    const NTAB: usize = 10;
    let mut a = [[0.0f64; NTAB]; NTAB];
    let mut hh = h0;
    a[0][0] = (f(x + hh) - f(x - hh)) / (2.0 * hh);
    let mut err = f64::MAX;
    let mut ans = a[0][0];
    for i in 1..NTAB {
        hh /= CON;
        a[0][i] = (f(x + hh) - f(x - hh)) / (2.0 * hh);
        let mut fac = CON2;
        for j in 1..=i {
            a[j][i] = (a[j - 1][i] * fac - a[j - 1][i - 1]) / (fac - 1.0);
            fac *= CON2;
            let errt = (a[j][i] - a[j - 1][i]).abs().max((a[j][i] - a[j - 1][i - 1]).abs());
            if errt <= err {
                err = errt;
                ans = a[j][i];
            }
        }
        if (a[i][i] - a[i - 1][i - 1]).abs() >= 2.0 * err {
            break;
        }
    }
    ans
}

/// Worst finite-difference discrepancies of `h'` and `H'` against `h`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DerivativeCheck {
    pub h_prime_error: f64,
    pub antiderivative_error: f64,
    pub worst_point: f64,
    /// Points skipped because a value overflowed.
    pub skipped: usize,
    pub checked: usize,
}

impl DerivativeCheck {
    pub const TOL: f64 = 1e-6;

    pub fn passed(&self) -> bool {
        self.h_prime_error <= Self::TOL && self.antiderivative_error <= Self::TOL
    }
}

fn step_for(f0: f64, df: f64, x: f64) -> f64 {
    let scale = x.abs().max(1.0);
    let log_slope = if f0 != 0.0 { (df / f0).abs() } else { 0.0 };
    0.1 * scale.min(if log_slope > 0.0 {
        1.0 / log_slope
    } else {
        f64::INFINITY
    })
}

/// Checks `h'` and `H' = h` by Ridders differences at seeded uniform points.
pub fn derivative_check(s: &SourceSpec, range: (f64, f64), points: usize, seed: u64) -> DerivativeCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = DerivativeCheck {
        h_prime_error: 0.0,
        antiderivative_error: 0.0,
        worst_point: f64::NAN,
        skipped: 0,
        checked: 0,
    };
    let rel = |fd: f64, exact: f64| (fd - exact).abs() / exact.abs().max(1e-8);
    for _ in 0..points {
        let x: f64 = rng.gen_range(range.0..=range.1);
        let (h, dh, big_h) = (s.h(x), s.h_prime(x), s.antiderivative(x));
        // the stencil needs finite neighbours too
        let probe = step_for(h, dh, x).max(step_for(big_h, h, x));
        if ![
            h,
            dh,
            big_h,
            s.h(x + probe),
            s.h(x - probe),
            s.antiderivative(x + probe),
            s.antiderivative(x - probe),
        ]
        .iter()
        .all(|v| v.is_finite())
        {
            out.skipped += 1;
            continue;
        }
        out.checked += 1;
        let e1 = rel(ridders(|t| s.h(t), x, step_for(h, dh, x)), dh);
        let e2 = rel(ridders(|t| s.antiderivative(t), x, step_for(big_h, h, x)), h);
        if e1.max(e2) > out.h_prime_error.max(out.antiderivative_error) {
            out.worst_point = x;
        }
        out.h_prime_error = out.h_prime_error.max(e1);
        out.antiderivative_error = out.antiderivative_error.max(e2);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::GridSpec;
    use crate::operators::assemble;

    fn all_builtins() -> Vec<SourceSpec> {
        vec![
            SourceSpec::power(3.0).unwrap(),
            SourceSpec::power(1.0).unwrap(),
            SourceSpec::power(2.5).unwrap(),
            SourceSpec::exp_power(2.0, 1.0).unwrap(),
            SourceSpec::exp_power(1.0, 2.0).unwrap(),
            SourceSpec::exp_power(0.5, 0.5).unwrap(),
            SourceSpec::double_exp(1.0).unwrap(),
            SourceSpec::double_exp(0.0).unwrap(),
            SourceSpec::linear(1.0).unwrap(),
            SourceSpec::linear_affine(2.0, -0.5).unwrap(),
            SourceSpec::zero(),
        ]
    }

    #[test]
    fn closed_form_values() {
        let cube = SourceSpec::power(3.0).unwrap();
        assert_eq!(cube.h(2.0), 8.0);
        assert_eq!(cube.antiderivative(2.0), 4.0);
        let e = SourceSpec::exp_power(1.0, 1.0).unwrap();
        assert!((e.h(1.0) - std::f64::consts::E).abs() < 1e-15);
        let z = SourceSpec::zero();
        assert_eq!(z.h(3.0), 0.0);
        assert_eq!(z.antiderivative(-3.0), 0.0);
        let lin = SourceSpec::linear(1.0).unwrap();
        for s in [-5.0, -0.1, 0.0, 2.0] {
            assert!(lin.h(s).abs() <= lin.linear_growth_c().unwrap() * (s.abs() + 1.0));
        }
    }

    #[test]
    fn antiderivatives_vanish_at_zero() {
        for s in all_builtins() {
            assert_eq!(s.antiderivative(0.0), 0.0, "{s:?}");
        }
    }

    #[test]
    fn exp_power_antiderivative_matches_closed_form() {
        // p = q = 2: d/dt[(t² - 1)e^{t²}/2] = t³ e^{t²}.
        let s = SourceSpec::exp_power(2.0, 2.0).unwrap();
        for x in [0.3, 1.0, 2.5, -3.0] {
            let t2: f64 = x * x;
            let exact = ((t2 - 1.0) * t2.exp() + 1.0) / 2.0;
            let got = s.antiderivative(x);
            assert!((got - exact).abs() <= 1e-12 * exact, "{x}: {got} vs {exact}");
        }
    }

    #[test]
    fn derivative_checks_pass_for_builtins() {
        for s in all_builtins() {
            let chk = derivative_check(&s, (-10.0, 10.0), 1000, 42);
            assert!(chk.passed(), "{s:?}: {chk:?}");
            assert!(chk.checked > 0);
        }
    }

    #[test]
    fn derivative_check_catches_a_wrong_derivative() {
        struct Bad;
        impl ScalarSource for Bad {
            fn h(&self, s: f64) -> f64 {
                s * s * s
            }
            fn h_prime(&self, s: f64) -> f64 {
                2.0 * s * s
            }
            fn antiderivative(&self, s: f64) -> f64 {
                s.powi(4) / 4.0
            }
        }
        let s = SourceSpec::custom("bad", Arc::new(Bad), None, None).unwrap();
        assert!(!derivative_check(&s, (-2.0, 2.0), 100, 1).passed());
    }

    #[test]
    fn parameter_validation() {
        assert!(SourceSpec::power(0.5).is_err());
        assert!(SourceSpec::exp_power(-1.0, 1.0).is_err());
        assert!(SourceSpec::exp_power(1.0, 0.0).is_err());
        assert!(SourceSpec::double_exp(-1.0).is_err());
        assert!(matches!(
            SourceSpec::builtin("cosh", &SourceParams::default()),
            Err(SourceError::UnknownSource(_))
        ));
        let bad = SourceParams {
            q: Some(1.0),
            ..Default::default()
        };
        assert!(SourceSpec::builtin("power", &bad).is_err());
        assert!(SourceSpec::linear_affine(1.0, 1.0).unwrap().with_theta(3.0).is_err());
        assert!(SourceSpec::power(3.0).unwrap().with_theta(2.0).is_err());
    }

    #[test]
    fn ar_report_power_cube() {
        let s = SourceSpec::power(3.0).unwrap();
        assert_eq!(s.theta(), Some(3.0));
        let r = ar_conditions_report(&s, (-5.0, 5.0), 1001).unwrap();
        assert!(r.all_passed(), "{r:?}");
    }

    #[test]
    fn ar_report_rejects_too_large_theta() {
        let s = SourceSpec::power(3.0).unwrap().with_theta(4.5).unwrap();
        let r = ar_conditions_report(&s, (-5.0, 5.0), 1001).unwrap();
        assert!(!r.positivity.passed);
        assert_eq!(r.positivity.witness, Some(-5.0));
        // every nonzero sample violates it
        let later = ar_conditions_report(&s, (0.5, 5.0), 100).unwrap();
        assert_eq!(later.positivity.witness, Some(0.5));
    }

    #[test]
    fn ar_report_exp_family() {
        for (p, q) in [(1.0, 1.0), (2.0, 1.0), (0.5, 2.0), (3.0, 0.5)] {
            let s = SourceSpec::exp_power(p, q).unwrap();
            let r = ar_conditions_report(&s, (-5.0, 5.0), 1001).unwrap();
            assert!(r.all_passed(), "p={p} q={q}: {r:?}");
        }
        let s = SourceSpec::double_exp(1.0).unwrap();
        let r = ar_conditions_report(&s, (-5.0, 5.0), 1001).unwrap();
        assert!(r.all_passed(), "{r:?}");
    }

    #[test]
    fn ar_report_flags_negative_h_on_positive_axis() {
        struct Neg;
        impl ScalarSource for Neg {
            fn h(&self, s: f64) -> f64 {
                -s * s * s
            }
            fn h_prime(&self, s: f64) -> f64 {
                -3.0 * s * s
            }
            fn antiderivative(&self, s: f64) -> f64 {
                -s.powi(4) / 4.0
            }
        }
        let s = SourceSpec::custom("neg", Arc::new(Neg), Some(3.0), None).unwrap();
        let r = ar_conditions_report(&s, (-1.0, 1.0), 101).unwrap();
        assert!(r.odd_bound.flagged.is_some());
        assert!(!r.positivity.passed);
    }

    #[test]
    fn ar_report_preconditions() {
        assert!(ar_conditions_report(&SourceSpec::zero(), (-1.0, 1.0), 1000).is_err());
        assert!(ar_conditions_report(&SourceSpec::power(3.0).unwrap(), (-1.0, 1.0), 50).is_err());
    }

    #[test]
    fn linear_source_fails_vanishing_slope() {
        let s = SourceSpec::linear(1.0).unwrap();
        let s = SourceSpec::custom("lin", Arc::new(LinWrap(s)), Some(3.0), None).unwrap();
        let r = ar_conditions_report(&s, (-1.0, 1.0), 101).unwrap();
        assert!(!r.vanishing_slope.passed);
    }

    struct LinWrap(SourceSpec);
    impl ScalarSource for LinWrap {
        fn h(&self, s: f64) -> f64 {
            self.0.h(s)
        }
        fn h_prime(&self, s: f64) -> f64 {
            self.0.h_prime(s)
        }
        fn antiderivative(&self, s: f64) -> f64 {
            self.0.antiderivative(s)
        }
    }

    #[test]
    fn field_evaluation_and_overflow() {
        let (c, p) = GridSpec::uniform(2, 8).build().unwrap();
        let _ = c;
        let mut w = p.zeros();
        w.values.iter_mut().for_each(|v| *v = 2.0);
        let f = eval_source_field(&SourceSpec::power(3.0).unwrap(), &w).unwrap();
        assert!(f.values.iter().all(|&v| v == 8.0));
        let z = eval_source_field(&SourceSpec::zero(), &w).unwrap();
        assert!(z.values.iter().all(|&v| v == 0.0));
        w.values[3] = 8.0;
        let err = eval_source_field(&SourceSpec::double_exp(1.0).unwrap(), &w).unwrap_err();
        assert!(matches!(err, SourceError::NonFinite { node: 3, .. }));
    }

    #[test]
    fn truncation_cases() {
        let (c, p) = GridSpec::uniform(2, 16).build().unwrap();
        let ops = assemble(&c, &p).unwrap();
        let s = SourceSpec::power(3.0).unwrap();
        let w0 = p.sample(|x| (std::f64::consts::PI * x[0]).sin().powi(2));
        let n0 = ops.plate_h2_seminorm(&w0).unwrap();
        let k = 1.0;
        let t = TruncatedSource::new(s.clone(), k).unwrap();

        let inside = w0.scaled(0.5 * k / n0);
        assert_eq!(
            eval_truncated(&t, &ops, &inside).unwrap(),
            eval_source_field(&s, &inside).unwrap()
        );

        let outside = w0.scaled(2.0 * k / n0);
        let half = outside.scaled(0.5);
        let a = eval_truncated(&t, &ops, &outside).unwrap();
        let b = eval_source_field(&s, &half).unwrap();
        for (x, y) in a.values.iter().zip(&b.values) {
            assert!((x - y).abs() <= 1e-14 * y.abs().max(1e-300));
        }

        let lo = eval_truncated(&t, &ops, &w0.scaled(k * (1.0 - 1e-9) / n0)).unwrap();
        let hi = eval_truncated(&t, &ops, &w0.scaled(k * (1.0 + 1e-9) / n0)).unwrap();
        let scale = lo.sup_norm();
        let diff = lo
            .values
            .iter()
            .zip(&hi.values)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(diff <= 1e-6 * scale);
        assert!(TruncatedSource::new(s, 0.0).is_err());
    }

    #[test]
    fn local_lipschitz_bound_holds() {
        let (c, p) = GridSpec::uniform(2, 16).build().unwrap();
        let ops = assemble(&c, &p).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for s in [
            SourceSpec::power(3.0).unwrap(),
            SourceSpec::exp_power(2.0, 1.0).unwrap(),
            SourceSpec::double_exp(1.0).unwrap(),
        ] {
            let r = 1.5;
            let cr = s.max_abs_derivative(r);
            for _ in 0..50 {
                let w1 = DVector::from_fn(ops.plate_dofs(), |_, _| rng.gen_range(-r..r));
                let w2 = DVector::from_fn(ops.plate_dofs(), |_, _| rng.gen_range(-r..r));
                let h1 = w1.map(|x| s.h(x));
                let h2 = w2.map(|x| s.h(x));
                let lhs = ops.plate_dot(&(&h1 - &h2), &(&h1 - &h2)).sqrt();
                let rhs = cr * ops.plate_dot(&(&w1 - &w2), &(&w1 - &w2)).sqrt();
                assert!(lhs <= rhs * (1.0 + 1e-12), "{s:?}");
            }
        }
    }
}
