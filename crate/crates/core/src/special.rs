//! Modified Bessel functions of the second kind in log scale, generalized
//! inverse Gaussian (GIG) moments and quantiles, and the standard normal
//! quantile.
//!
//! `K_ν(x)` is evaluated as in Temme (small `x`) and Steed's continued fraction
//! (large `x`) for a base order `μ ∈ [-1/2, 1/2)`, then carried up to `ν` by the
//! three-term recurrence written for the ratio `K_{ν+1}/K_ν`. Everything after
//! the base evaluation stays in log space, so neither tiny arguments (as
//! produced by fully shrunk components, `r_i → 0`) nor large orders overflow.

use crate::error::{domain, Error, Result};
use crate::quadrature;

/// Lower floor applied to the GIG `r` parameter before forming `√(r b)`.
pub const R_FLOOR: f64 = 1e-300;

/// Largest supported `|order|`.
pub const MAX_ORDER: f64 = 50.0;

const TEMME_CF2_SWITCH: f64 = 2.0;
const MAX_SERIES_TERMS: usize = 15_000;

// Chebyshev expansions of 1/Γ(1±ν) helpers on |ν| ≤ 1/2 (Temme's g1, g2).
const G1_COEFFS: [f64; 14] = [
    -1.145_164_083_662_683_117_868_981_528_67,
    0.006_360_853_113_470_840_382_389_554_95,
    0.001_862_451_930_072_068_484_396_346_43,
    0.000_152_833_085_873_453_507_081_227_824,
    0.000_017_017_464_011_802_038_795_324_732,
    -6.459_750_292_334_725_435_466_832_645_1e-07,
    -5.181_984_843_251_938_089_410_431_296_8e-08,
    4.518_909_289_485_818_305_112_318_079_7e-10,
    3.243_322_737_102_087_304_366_625_918_0e-11,
    6.830_943_402_494_752_287_543_240_082_8e-13,
    2.835_350_275_517_210_151_311_962_813_0e-14,
    -7.988_390_576_932_359_287_563_808_754_1e-16,
    -3.372_667_730_077_194_983_334_121_345_7e-17,
    -3.658_633_480_921_052_074_405_443_710_4e-20,
];

const G2_COEFFS: [f64; 15] = [
    1.882_645_524_949_671_835_019_616_975_350,
    -0.077_490_658_396_167_518_329_547_945_212,
    -0.018_256_714_847_324_929_419_579_340_950,
    0.000_633_803_020_907_489_579_592_397_173_1,
    0.000_076_229_054_350_872_902_119_446_117_5,
    -9.550_164_756_172_044_351_985_399_352_6e-07,
    -8.892_726_810_788_635_191_243_151_295_5e-08,
    -1.952_133_477_231_961_374_051_188_013_2e-09,
    -9.400_305_273_588_516_211_176_957_977_1e-11,
    4.687_513_384_953_239_317_929_087_910_1e-12,
    2.265_853_574_692_575_958_244_754_514_5e-13,
    -1.172_550_969_848_801_511_187_873_525_1e-15,
    -7.044_133_820_024_522_253_084_315_587_7e-17,
    -2.437_787_831_010_769_365_065_974_022_8e-18,
    -7.522_524_321_825_390_172_716_467_501_1e-20,
];

fn chebyshev(coeffs: &[f64], y: f64) -> f64 {
    let y2 = 2.0 * y;
    let (mut d, mut dd) = (0.0, 0.0);
    for &c in coeffs[1..].iter().rev() {
        let tmp = d;
        d = y2 * d - dd + c;
        dd = tmp;
    }
    y * d - dd + 0.5 * coeffs[0]
}

/// Returns `(1/Γ(1+ν), 1/Γ(1-ν), g1, g2)` for |ν| ≤ 1/2.
fn temme_gamma(nu: f64) -> (f64, f64, f64, f64) {
    let y = 4.0 * nu.abs() - 1.0;
    let g1 = chebyshev(&G1_COEFFS, y);
    let g2 = chebyshev(&G2_COEFFS, y);
    let inv_gamma_1mnu = 1.0 / (g2 + nu * g1);
    let inv_gamma_1pnu = 1.0 / (g2 - nu * g1);
    (inv_gamma_1pnu, inv_gamma_1mnu, g1, g2)
}

/// Temme's series for `x < 2`, `|μ| ≤ 1/2`: returns `(ln K_μ(x), ln K_{μ+1}(x)/K_μ(x))`.
fn log_k_temme(mu: f64, x: f64) -> (f64, f64) {
    let half_x = 0.5 * x;
    let ln_half_x = half_x.ln();
    let half_x_nu = (mu * ln_half_x).exp();
    let pi_nu = std::f64::consts::PI * mu;
    let sigma = -mu * ln_half_x;
    let sinrat = if pi_nu.abs() < f64::EPSILON {
        1.0
    } else {
        pi_nu / pi_nu.sin()
    };
    let sinhrat = if sigma.abs() < f64::EPSILON {
        1.0
    } else {
        sigma.sinh() / sigma
    };
    let (g_1pnu, g_1mnu, g1, g2) = temme_gamma(mu);

    let mut fk = sinrat * (sigma.cosh() * g1 - sinhrat * ln_half_x * g2);
    let mut pk = 0.5 / half_x_nu * g_1pnu;
    let mut qk = 0.5 * half_x_nu * g_1mnu;
    let mut ck = 1.0;
    let mut sum0 = fk;
    let mut sum1 = pk;
    for k in 1..MAX_SERIES_TERMS {
        let kf = k as f64;
        fk = (kf * fk + pk + qk) / (kf * kf - mu * mu);
        ck *= half_x * half_x / kf;
        pk /= kf - mu;
        qk /= kf + mu;
        let hk = -kf * fk + pk;
        let del0 = ck * fk;
        sum0 += del0;
        sum1 += ck * hk;
        if del0.abs() < 0.5 * sum0.abs() * f64::EPSILON {
            break;
        }
    }
    let ln_k = sum0.ln();
    let ln_ratio = sum1.ln() + std::f64::consts::LN_2 - x.ln() - ln_k;
    (ln_k, ln_ratio)
}

/// Steed's continued fraction (CF2) for `x ≥ 2`, `|μ| ≤ 1/2`.
fn log_k_steed(mu: f64, x: f64) -> (f64, f64) {
    let mut bi = 2.0 * (1.0 + x);
    let mut di = 1.0 / bi;
    let mut delhi = di;
    let mut hi = di;
    let mut qi = 0.0;
    let mut qip1 = 1.0;
    let mut ai = -(0.25 - mu * mu);
    let a1 = ai;
    let mut ci = -ai;
    let mut bqi = -ai;
    let mut s = 1.0 + bqi * delhi;
    for i in 2..MAX_SERIES_TERMS {
        ai -= 2.0 * (i - 1) as f64;
        ci = -ai * ci / i as f64;
        let tmp = (qi - bi * qip1) / ai;
        qi = qip1;
        qip1 = tmp;
        bqi += ci * qip1;
        bi += 2.0;
        di = 1.0 / (bi + ai * di);
        delhi = (bi * di - 1.0) * delhi;
        hi += delhi;
        let dels = bqi * delhi;
        s += dels;
        if (dels / s).abs() < f64::EPSILON {
            break;
        }
    }
    hi *= -a1;
    // K_μ(x) e^x = sqrt(π / 2x) / s
    let ln_k = 0.5 * (std::f64::consts::PI / (2.0 * x)).ln() - s.ln() - x;
    let ratio = (mu + x + 0.5 - hi) / x;
    (ln_k, ratio.ln())
}

fn ln_add_exp(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

fn check_args(order: f64, x: f64) -> Result<()> {
    if !x.is_finite() || !order.is_finite() {
        return domain(format!("non-finite Bessel argument (order {order}, x {x})"));
    }
    if x <= 0.0 {
        return domain(format!("Bessel K requires x > 0, got {x}"));
    }
    if order.abs() > MAX_ORDER {
        return domain(format!("|order| {order} exceeds supported range {MAX_ORDER}"));
    }
    Ok(())
}

/// Returns `(ln K_ν(x), ln K_{ν+1}(x)/K_ν(x))` for `ν ≥ 0`.
fn log_k_with_ratio(nu: f64, x: f64) -> (f64, f64) {
    let n = (nu + 0.5).floor();
    let mu = nu - n;
    let (mut ln_k, mut ln_ratio) = if x < TEMME_CF2_SWITCH {
        log_k_temme(mu, x)
    } else {
        log_k_steed(mu, x)
    };
    let ln_x = x.ln();
    // K_{ν+1}/K_ν = K_{ν-1}/K_ν + 2ν/x
    for j in 1..=(n as usize) {
        ln_k += ln_ratio;
        let order = mu + j as f64;
        ln_ratio = ln_add_exp(-ln_ratio, (2.0 * order).ln() - ln_x);
    }
    (ln_k, ln_ratio)
}

/// Natural log of the modified Bessel function of the second kind `K_s(x)`.
pub fn log_bessel_k(order: f64, x: f64) -> Result<f64> {
    check_args(order, x)?;
    Ok(log_k_with_ratio(order.abs(), x).0)
}

/// `K_{s+shift}(x) / K_s(x)` for `shift ∈ {-1, 1, 2}`.
pub fn bessel_k_ratio(order: f64, x: f64, shift: i32) -> Result<f64> {
    check_args(order, x)?;
    if !matches!(shift, -1 | 1 | 2) {
        return Err(Error::InvalidInput(format!(
            "Bessel ratio shift must be -1, 1 or 2, got {shift}"
        )));
    }
    let shifted = order + shift as f64;
    check_args(shifted, x)?;
    Ok(log_ratio(order, shifted, x).exp())
}

fn log_ratio(order: f64, shifted: f64, x: f64) -> f64 {
    let (ln_a, ratio_a) = log_k_with_ratio(order.abs(), x);
    // Adjacent orders on the same side of zero reuse the recurrence ratio.
    if order >= 0.0 && (shifted - order - 1.0).abs() < 1e-15 {
        return ratio_a;
    }
    let (ln_b, ratio_b) = log_k_with_ratio(shifted.abs(), x);
    if shifted >= 0.0 && (order - shifted - 1.0).abs() < 1e-15 {
        return -ratio_b;
    }
    ln_b - ln_a
}

/// Parameters of GIG(b, r, s) with density
/// `(b/r)^{s/2} / (2 K_s(√(rb))) θ^{s-1} exp(-(bθ + r/θ)/2)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GigParams {
    b: f64,
    r: f64,
    s: f64,
}

impl GigParams {
    /// `r` is floored at [`R_FLOOR`]; zero is accepted and floored.
    pub fn new(b: f64, r: f64, s: f64) -> Result<Self> {
        if !(b.is_finite() && b > 0.0) {
            return domain(format!("GIG requires b > 0, got {b}"));
        }
        if !(r.is_finite() && r >= 0.0) {
            return domain(format!("GIG requires r >= 0, got {r}"));
        }
        if !s.is_finite() || s.abs() + 2.0 > MAX_ORDER {
            return domain(format!("GIG order s = {s} outside supported range"));
        }
        Ok(Self {
            b,
            r: r.max(R_FLOOR),
            s,
        })
    }

    pub fn b(&self) -> f64 {
        self.b
    }
    pub fn r(&self) -> f64 {
        self.r
    }
    pub fn s(&self) -> f64 {
        self.s
    }

    fn omega(&self) -> f64 {
        (self.r * self.b).sqrt()
    }

    fn ratio(&self, shift: i32) -> f64 {
        let order = self.s;
        log_ratio(order, order + shift as f64, self.omega()).exp()
    }

    /// Log-normalizer: `(s/2) ln(b/r) - ln(2 K_s(√(rb)))`.
    pub fn log_normalizer(&self) -> f64 {
        0.5 * self.s * (self.b / self.r).ln()
            - std::f64::consts::LN_2
            - log_k_with_ratio(self.s.abs(), self.omega()).0
    }

    /// Log density at `theta > 0`.
    pub fn log_density(&self, theta: f64) -> f64 {
        if theta <= 0.0 {
            return f64::NEG_INFINITY;
        }
        self.log_normalizer() + (self.s - 1.0) * theta.ln()
            - 0.5 * (self.b * theta + self.r / theta)
    }

    /// Mode of the density of `t = ln θ`, i.e. of `θ q(θ)`.
    fn log_scale_mode(&self) -> f64 {
        let (b, r, s) = (self.b, self.r, self.s);
        let disc = (s * s + r * b).sqrt();
        let num = if s >= 0.0 { s + disc } else { r * b / (disc - s) };
        (num / b).ln()
    }

    /// `ln(θ q(θ))` at `θ = e^t`, up to the normalizing constant.
    fn log_scale_kernel(&self, t: f64) -> f64 {
        self.s * t - 0.5 * (self.b * t.exp() + self.r * (-t).exp())
    }
}

/// `E[θ]` under GIG(b, r, s).
pub fn gig_mean(p: &GigParams) -> f64 {
    p.ratio(1) * (p.r / p.b).sqrt()
}

/// `V[θ]` under GIG(b, r, s).
pub fn gig_var(p: &GigParams) -> f64 {
    let scale = p.r / p.b;
    let mean = gig_mean(p);
    p.ratio(2) * scale - mean * mean
}

/// `E[1/θ]` under GIG(b, r, s).
pub fn gig_inv_mean(p: &GigParams) -> f64 {
    p.ratio(-1) * (p.b / p.r).sqrt()
}

const TAIL_LOG_DROP: f64 = 50.0;
const MAX_DOUBLINGS: usize = 200;
const QUANTILE_QUAD_TOL: f64 = 1e-10;

/// Peak-normalized density of `t = ln θ` with its numerically effective support.
struct LogScaleDensity {
    params: GigParams,
    peak: f64,
    lo: f64,
    hi: f64,
    total: f64,
}

impl LogScaleDensity {
    fn new(params: GigParams) -> Result<Self> {
        let mode = params.log_scale_mode();
        let peak = params.log_scale_kernel(mode);
        if !peak.is_finite() {
            return Err(Error::Convergence(format!(
                "GIG log-density not finite at its mode for {params:?}"
            )));
        }
        let edge = |dir: f64| -> Result<f64> {
            let mut step = 1.0;
            for _ in 0..MAX_DOUBLINGS {
                let t = mode + dir * step;
                if params.log_scale_kernel(t) < peak - TAIL_LOG_DROP {
                    return Ok(t);
                }
                step *= 2.0;
            }
            Err(Error::Convergence(format!(
                "GIG tail bracket not found within {MAX_DOUBLINGS} doublings for {params:?}"
            )))
        };
        let lo = edge(-1.0)?;
        let hi = edge(1.0)?;
        let mut density = Self {
            params,
            peak,
            lo,
            hi,
            total: 1.0,
        };
        // Integrate the two sides of the mode separately so the peak is a panel edge.
        let total = density.integral(lo, mode) + density.integral(mode, hi);
        density.total = total;
        Ok(density)
    }

    fn eval(&self, t: f64) -> f64 {
        (self.params.log_scale_kernel(t) - self.peak).exp()
    }

    fn integral(&self, a: f64, b: f64) -> f64 {
        let f = |t: f64| self.eval(t);
        quadrature::integrate(&f, a, b, QUANTILE_QUAD_TOL * self.total.min(1.0) * 1e-2)
    }
}

/// CDF of GIG(b, r, s) at `x`, by adaptive quadrature of the density in `ln θ`.
pub fn gig_cdf(p: &GigParams, x: f64) -> Result<f64> {
    if x <= 0.0 {
        return Ok(0.0);
    }
    let density = LogScaleDensity::new(*p)?;
    let t = x.ln();
    if t <= density.lo {
        return Ok(0.0);
    }
    if t >= density.hi {
        return Ok(1.0);
    }
    Ok((density.integral(density.lo, t) / density.total).clamp(0.0, 1.0))
}

/// Quantile of GIG(b, r, s): `x` with `CDF(x) = prob`.
pub fn gig_quantile(p: &GigParams, prob: f64) -> Result<f64> {
    if !(prob > 0.0 && prob < 1.0) {
        return Err(Error::InvalidInput(format!(
            "quantile probability must lie in (0, 1), got {prob}"
        )));
    }
    let density = LogScaleDensity::new(*p)?;
    let target = prob * density.total;
    let (mut a, mut b) = (density.lo, density.hi);
    let mut mass_a = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (a + b);
        if mid <= a || mid >= b {
            break;
        }
        let mass_mid = mass_a + density.integral(a, mid);
        if mass_mid < target {
            a = mid;
            mass_a = mass_mid;
        } else {
            b = mid;
        }
        if b - a <= 1e-15 * (1.0 + a.abs()) {
            break;
        }
    }
    Ok((0.5 * (a + b)).exp())
}

/// Standard normal quantile (Wichura, AS 241), relative accuracy ~1e-16.
pub fn normal_quantile(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::InvalidInput(format!(
            "normal quantile requires p in (0, 1), got {p}"
        )));
    }
    let q = p - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180_625 - q * q;
        let num = (((((((2.509_080_928_730_122_672_7e3 * r + 3.343_057_558_358_812_810_5e4) * r
            + 6.726_577_092_700_870_085_3e4)
            * r
            + 4.592_195_393_154_987_145_7e4)
            * r
            + 1.373_169_376_550_946_112_5e4)
            * r
            + 1.971_590_950_306_551_442_7e3)
            * r
            + 1.331_416_678_917_843_774_5e2)
            * r
            + 3.387_132_872_796_366_608_0)
            * q;
        let den = ((((((5.226_495_278_852_854_561_0e3 * r + 2.872_908_573_572_194_267_4e4) * r
            + 3.930_789_580_009_271_061_0e4)
            * r
            + 2.121_379_430_158_659_586_7e4)
            * r
            + 5.394_196_021_424_751_107_7e3)
            * r
            + 6.871_870_074_920_579_083_0e2)
            * r
            + 4.231_333_070_160_091_125_2e1)
            * r
            + 1.0;
        return Ok(num / den);
    }
    let tail = if q < 0.0 { p } else { 1.0 - p };
    let mut r = (-tail.ln()).sqrt();
    let value = if r <= 5.0 {
        r -= 1.6;
        let num = ((((((7.745_450_142_783_414_076_4e-4 * r + 2.272_384_498_926_918_458_3e-2)
            * r
            + 2.417_807_251_774_506_117_7e-1)
            * r
            + 1.270_458_252_452_368_382_6)
            * r
            + 3.647_848_324_763_204_605_0)
            * r
            + 5.769_497_221_460_691_405_5)
            * r
            + 4.630_337_846_156_545_295_9)
            * r
            + 1.423_437_110_749_683_577_3;
        let den = ((((((1.050_750_071_644_416_843_2e-9 * r + 5.475_938_084_995_344_946_0e-4)
            * r
            + 1.519_866_656_361_645_719_7e-2)
            * r
            + 1.481_039_764_274_800_745_9e-1)
            * r
            + 6.897_673_349_851_000_045_5e-1)
            * r
            + 1.676_384_830_183_803_849_4)
            * r
            + 2.053_191_626_637_758_821_9)
            * r
            + 1.0;
        num / den
    } else {
        r -= 5.0;
        let num = ((((((2.010_334_399_292_288_132_7e-7 * r + 2.711_555_568_743_487_578_2e-5)
            * r
            + 1.242_660_947_388_078_438_6e-3)
            * r
            + 2.653_218_952_657_612_309_3e-2)
            * r
            + 2.965_605_718_285_048_912_3e-1)
            * r
            + 1.784_826_539_917_291_335_8)
            * r
            + 5.463_784_911_164_114_369_9)
            * r
            + 6.657_904_643_501_103_777_2;
        let den = ((((((2.044_263_103_389_939_785_6e-15 * r + 1.421_511_758_316_445_888_7e-7)
            * r
            + 1.846_318_317_510_054_681_8e-5)
            * r
            + 7.868_691_311_456_132_591_0e-4)
            * r
            + 1.487_536_129_085_061_485_2e-2)
            * r
            + 1.369_298_809_227_358_053_1e-1)
            * r
            + 5.998_322_065_558_879_376_9e-1)
            * r
            + 1.0;
        num / den
    };
    Ok(if q < 0.0 { -value } else { value })
}
