//! Road-grade profiles, synthetic test routes, and the sparse grade preview
//! fit used by the motion planners.
//!
//! Grade previews are cubic Legendre series `alpha(l) = sum c_j P_j(l)` over a
//! position window mapped linearly onto `l in [-1, 1]`.

use std::fmt::Write as _;
use std::path::Path;

use crate::{Error, Result};

/// Piecewise-linear road grade by position.
#[derive(Debug, Clone, PartialEq)]
pub struct GradeProfile {
    /// `(s [m], grade [rad])`, positions strictly increasing.
    breakpoints: Vec<(f64, f64)>,
}

impl GradeProfile {
    pub fn new(breakpoints: Vec<(f64, f64)>) -> Result<Self> {
        if breakpoints.is_empty() {
            return Err(Error::Domain("grade profile needs at least one breakpoint".into()));
        }
        for w in breakpoints.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(Error::Domain(format!(
                    "breakpoint positions must be strictly increasing ({} then {})",
                    w[0].0, w[1].0
                )));
            }
        }
        if breakpoints.iter().any(|&(_, a)| a.abs() > 0.15) {
            return Err(Error::Domain("grade magnitude exceeds 0.15 rad".into()));
        }
        Ok(Self { breakpoints })
    }

    pub fn breakpoints(&self) -> &[(f64, f64)] {
        &self.breakpoints
    }

    /// Route length: position of the last breakpoint [m].
    pub fn route_length(&self) -> f64 {
        self.breakpoints.last().unwrap().0
    }

    /// Grade at `s` [rad], linearly interpolated and clamped to the end values.
    pub fn grade_at(&self, s: f64) -> f64 {
        let pts = &self.breakpoints;
        if s <= pts[0].0 {
            return pts[0].1;
        }
        if s >= pts[pts.len() - 1].0 {
            return pts[pts.len() - 1].1;
        }
        let idx = pts.partition_point(|&(x, _)| x <= s);
        let (s0, a0) = pts[idx - 1];
        let (s1, a1) = pts[idx];
        a0 + (a1 - a0) * (s - s0) / (s1 - s0)
    }

    /// Elevation change over `[s0, s1]` by trapezoidal integration of `sin(alpha)` [m].
    pub fn elevation_change(&self, s0: f64, s1: f64, n: usize) -> f64 {
        let h = (s1 - s0) / n as f64;
        let mut acc = 0.0;
        for i in 0..n {
            let a = self.grade_at(s0 + i as f64 * h).sin();
            let b = self.grade_at(s0 + (i + 1) as f64 * h).sin();
            acc += 0.5 * (a + b) * h;
        }
        acc
    }
}

/// Legendre polynomial `P_j` for `j <= 3`.
pub fn legendre_p(j: usize, l: f64) -> f64 {
    match j {
        0 => 1.0,
        1 => l,
        2 => 0.5 * (3.0 * l * l - 1.0),
        3 => 0.5 * (5.0 * l * l * l - 3.0 * l),
        _ => unreachable!("preview basis is cubic"),
    }
}

/// Derivative `P_j'` for `j <= 3`.
pub fn legendre_dp(j: usize, l: f64) -> f64 {
    match j {
        0 => 0.0,
        1 => 1.0,
        2 => 3.0 * l,
        3 => 0.5 * (15.0 * l * l - 3.0),
        _ => unreachable!("preview basis is cubic"),
    }
}

/// Cubic Legendre-series grade preview over `[s_start, s_start + s_plus]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LegendrePreview {
    /// Series coefficients `c_0..c_3` [rad].
    pub c: [f64; 4],
    /// Window start [m].
    pub s_start: f64,
    /// Window length [m].
    pub s_plus: f64,
}

impl LegendrePreview {
    fn ell(&self, s: f64) -> f64 {
        (2.0 * (s - self.s_start) / self.s_plus - 1.0).clamp(-1.0, 1.0)
    }

    /// Grade at position `s` [rad]; extrapolates by clamping `l` to `[-1, 1]`.
    pub fn eval(&self, s: f64) -> f64 {
        let l = self.ell(s);
        (0..4).map(|j| self.c[j] * legendre_p(j, l)).sum()
    }

    /// Grade and its position derivative `d(alpha)/ds` [rad, rad/m].
    pub fn eval_with_deriv(&self, s: f64) -> (f64, f64) {
        let raw = 2.0 * (s - self.s_start) / self.s_plus - 1.0;
        let l = raw.clamp(-1.0, 1.0);
        let val = (0..4).map(|j| self.c[j] * legendre_p(j, l)).sum();
        if raw < -1.0 || raw > 1.0 {
            return (val, 0.0);
        }
        let dval: f64 = (0..4).map(|j| self.c[j] * legendre_dp(j, l)).sum();
        (val, dval * 2.0 / self.s_plus)
    }
}

/// Fits the cubic Legendre preview to `n_samples` evenly spaced grade samples
/// over the window, in the least-squares sense (QR factorization).
pub fn fit_preview(
    profile: &GradeProfile,
    s_start: f64,
    s_plus: f64,
    n_samples: usize,
) -> Result<LegendrePreview> {
    if n_samples < 4 {
        return Err(Error::Domain(format!(
            "preview fit needs at least 4 samples, got {n_samples}"
        )));
    }
    if s_plus <= 0.0 {
        return Err(Error::Domain("preview window length must be positive".into()));
    }
    let mut phi = nalgebra::DMatrix::zeros(n_samples, 4);
    let mut y = nalgebra::DVector::zeros(n_samples);
    for i in 0..n_samples {
        let frac = i as f64 / (n_samples - 1) as f64;
        let s = s_start + frac * s_plus;
        let l = 2.0 * frac - 1.0;
        for j in 0..4 {
            phi[(i, j)] = legendre_p(j, l);
        }
        y[i] = profile.grade_at(s);
    }
    let svd = phi.svd(true, true);
    let c = svd
        .solve(&y, 1e-14)
        .map_err(|e| Error::Solver(format!("preview least squares failed: {e}")))?;
    Ok(LegendrePreview {
        c: [c[0], c[1], c[2], c[3]],
        s_start,
        s_plus,
    })
}

fn push_cosine_ramp(pts: &mut Vec<(f64, f64)>, center: f64, from: f64, to: f64, ramp_len: f64) {
    if ramp_len <= 0.0 {
        // Degenerate smoothing: a 1 mm linear jump.
        pts.push((center, from));
        pts.push((center + 1e-3, to));
        return;
    }
    let k = ((ramp_len / 10.0).ceil() as usize).max(2);
    for j in 0..=k {
        let frac = j as f64 / k as f64;
        let s = center - 0.5 * ramp_len + frac * ramp_len;
        let a = from + (to - from) * 0.5 * (1.0 - (std::f64::consts::PI * frac).cos());
        pts.push((s, a));
    }
}

/// Builds the S-shaped test profile: flat lead-in, downhill, flat valley,
/// uphill, flat run-out, with cosine-smoothed grade transitions of length
/// `ramp_len` centered on the segment boundaries.
pub fn make_s_road(
    downhill_grade: f64,
    uphill_grade: f64,
    segment_lengths: &[f64],
    ramp_len: f64,
) -> GradeProfile {
    assert_eq!(segment_lengths.len(), 5, "five segments: lead-in, down, valley, up, run-out");
    assert!(
        downhill_grade * uphill_grade < 0.0,
        "downhill and uphill grades must have opposite signs"
    );
    let grades = [0.0, downhill_grade, 0.0, uphill_grade, 0.0];
    let mut boundary = 0.0;
    let mut pts = vec![(0.0, 0.0)];
    for i in 0..4 {
        boundary += segment_lengths[i];
        push_cosine_ramp(&mut pts, boundary, grades[i], grades[i + 1], ramp_len);
    }
    let total: f64 = segment_lengths.iter().sum();
    pts.push((total, 0.0));
    GradeProfile::new(pts).expect("s-road construction is valid")
}

/// Standard 35 km S-road used by the desk-scale experiments.
pub fn standard_s_road() -> GradeProfile {
    make_s_road(-0.04, 0.04, &[5.0e3, 10.0e3, 5.0e3, 10.0e3, 5.0e3], 500.0)
}

/// Flat lead-in, one sustained climb, flat run-out; used by the
/// uphill-saturation fixtures.
pub fn make_hill_road(lead_in: f64, climb: f64, grade: f64, run_out: f64, ramp_len: f64) -> GradeProfile {
    let mut pts = vec![(0.0, 0.0)];
    push_cosine_ramp(&mut pts, lead_in, 0.0, grade, ramp_len);
    push_cosine_ramp(&mut pts, lead_in + climb, grade, 0.0, ramp_len);
    pts.push((lead_in + climb + run_out, 0.0));
    GradeProfile::new(pts).expect("hill road construction is valid")
}

/// Smoothed box indicator: 0 before `a`, 1 between `a` and `b`, 0 after,
/// with cosine edges of width `r`.
fn smooth_box(s: f64, a: f64, b: f64, r: f64) -> f64 {
    let rise = |x: f64| {
        if x <= -0.5 {
            0.0
        } else if x >= 0.5 {
            1.0
        } else {
            0.5 * (1.0 - (std::f64::consts::PI * (0.5 - x)).cos())
        }
    };
    rise((s - a) / r) * rise((b - s) / r)
}

/// Synthetic 70 km rolling-terrain route: three grade sinusoids
/// (1.5%/12 km, 1.0%/5 km, 0.8%/2.1 km) plus two 4.5% hill events at 22 km
/// and 47 km, each a 2.5 km climb followed by a 2.5 km descent.
pub fn synthetic_route_70km() -> GradeProfile {
    let len = 70.0e3;
    let step = 20.0;
    let n = (len / step) as usize;
    let two_pi = 2.0 * std::f64::consts::PI;
    let hills = [(22.0e3, 1.0), (47.0e3, 1.0)];
    let mut pts = Vec::with_capacity(n + 1);
    for i in 0..=n {
        let s = i as f64 * step;
        let mut a = 0.015 * (two_pi * s / 12.0e3 + 0.7).sin()
            + 0.010 * (two_pi * s / 5.0e3 + 1.9).sin()
            + 0.008 * (two_pi * s / 2.1e3 + 4.0).sin();
        for &(start, sign) in &hills {
            let up = smooth_box(s, start, start + 2.5e3, 300.0);
            let down = smooth_box(s, start + 2.5e3, start + 5.0e3, 300.0);
            a += sign * 0.045 * (up - down);
        }
        pts.push((s, a));
    }
    GradeProfile::new(pts).expect("synthetic route construction is valid")
}

/// Loads a route CSV with header `s_m,grade_rad`.
pub fn load_route(path: &Path) -> Result<GradeProfile> {
    let text = std::fs::read_to_string(path)?;
    parse_route(&text)
}

/// Parses route CSV text; see [`load_route`].
pub fn parse_route(text: &str) -> Result<GradeProfile> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.trim() == "s_m,grade_rad" => {}
        Some((_, header)) => {
            return Err(Error::Parse {
                line: 1,
                msg: format!("expected header 's_m,grade_rad', got '{header}'"),
            })
        }
        None => {
            return Err(Error::Parse {
                line: 1,
                msg: "empty route file".into(),
            })
        }
    }
    let mut pts = Vec::new();
    for (idx, line) in lines {
        let lineno = idx + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let (Some(s_str), Some(a_str), None) = (fields.next(), fields.next(), fields.next()) else {
            return Err(Error::Parse {
                line: lineno,
                msg: "expected two comma-separated fields".into(),
            });
        };
        let s: f64 = s_str.trim().parse().map_err(|_| Error::Parse {
            line: lineno,
            msg: format!("non-numeric position '{s_str}'"),
        })?;
        let a: f64 = a_str.trim().parse().map_err(|_| Error::Parse {
            line: lineno,
            msg: format!("non-numeric grade '{a_str}'"),
        })?;
        if let Some(&(prev, _)) = pts.last() {
            if s <= prev {
                return Err(Error::Parse {
                    line: lineno,
                    msg: format!("positions must be strictly increasing ({prev} then {s})"),
                });
            }
        }
        pts.push((s, a));
    }
    GradeProfile::new(pts)
}

/// Writes a route CSV with header `s_m,grade_rad` (UTF-8, LF endings; floats
/// in shortest round-trip form so save/load is bit-identical).
pub fn save_route(profile: &GradeProfile, path: &Path) -> Result<()> {
    let mut out = String::from("s_m,grade_rad\n");
    for &(s, a) in profile.breakpoints() {
        writeln!(out, "{s},{a}").expect("string write");
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn constant_grade_fits_to_first_coefficient() {
        let profile = GradeProfile::new(vec![(0.0, 0.02), (5000.0, 0.02)]).unwrap();
        let fit = fit_preview(&profile, 500.0, 2000.0, 20).unwrap();
        assert_relative_eq!(fit.c[0], 0.02, epsilon = 1e-12);
        for j in 1..4 {
            assert!(fit.c[j].abs() < 1e-12);
        }
        assert_relative_eq!(fit.eval(1200.0), 0.02, epsilon = 1e-12);
    }

    #[test]
    fn linear_grade_fits_to_p1() {
        // alpha(l) = 0.01 l over the window [1000, 3000].
        let profile = GradeProfile::new(vec![(1000.0, -0.01), (3000.0, 0.01)]).unwrap();
        let fit = fit_preview(&profile, 1000.0, 2000.0, 20).unwrap();
        assert!(fit.c[0].abs() < 1e-13);
        assert_relative_eq!(fit.c[1], 0.01, epsilon = 1e-12);
        assert!(fit.c[2].abs() < 1e-12 && fit.c[3].abs() < 1e-12);
    }

    /// Hand-rolled 4x4 normal-equations solve, independent of the QR path.
    pub(crate) fn normal_equations_fit(
        profile: &GradeProfile,
        s_start: f64,
        s_plus: f64,
        n: usize,
    ) -> [f64; 4] {
        let mut ata = [[0.0f64; 4]; 4];
        let mut atb = [0.0f64; 4];
        for i in 0..n {
            let frac = i as f64 / (n - 1) as f64;
            let l = 2.0 * frac - 1.0;
            let row = [legendre_p(0, l), legendre_p(1, l), legendre_p(2, l), legendre_p(3, l)];
            let y = profile.grade_at(s_start + frac * s_plus);
            for r in 0..4 {
                atb[r] += row[r] * y;
                for c in 0..4 {
                    ata[r][c] += row[r] * row[c];
                }
            }
        }
        // Gaussian elimination with partial pivoting.
        let mut m = ata;
        let mut b = atb;
        for col in 0..4 {
            let piv = (col..4).max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs())).unwrap();
            m.swap(col, piv);
            b.swap(col, piv);
            for row in col + 1..4 {
                let f = m[row][col] / m[col][col];
                for c in col..4 {
                    m[row][c] -= f * m[col][c];
                }
                b[row] -= f * b[col];
            }
        }
        let mut x = [0.0; 4];
        for row in (0..4).rev() {
            let mut acc = b[row];
            for c in row + 1..4 {
                acc -= m[row][c] * x[c];
            }
            x[row] = acc / m[row][row];
        }
        x
    }

    #[test]
    fn fit_matches_normal_equations_oracle() {
        let road = standard_s_road();
        let fit = fit_preview(&road, 4000.0, 3000.0, 20).unwrap();
        let oracle = normal_equations_fit(&road, 4000.0, 3000.0, 20);
        for j in 0..4 {
            assert!((fit.c[j] - oracle[j]).abs() <= 1e-9, "c[{j}]: {} vs {}", fit.c[j], oracle[j]);
        }
    }

    #[test]
    fn eval_basis_values() {
        let p2 = LegendrePreview {
            c: [0.0, 0.0, 1.0, 0.0],
            s_start: 0.0,
            s_plus: 100.0,
        };
        assert_relative_eq!(p2.eval(50.0), -0.5, epsilon = 1e-15);
        let p3 = LegendrePreview {
            c: [0.0, 0.0, 0.0, 1.0],
            s_start: 0.0,
            s_plus: 100.0,
        };
        assert_relative_eq!(p3.eval(100.0), 1.0, epsilon = 1e-15);
    }

    proptest! {
        /// Any grade that is a cubic polynomial in `l` is reproduced exactly
        /// at the sample points (and hence everywhere, as a degree-3 poly).
        #[test]
        fn cubic_grades_fit_exactly(
            c0 in -0.02..0.02f64,
            c1 in -0.02..0.02f64,
            c2 in -0.02..0.02f64,
            c3 in -0.02..0.02f64,
        ) {
            let truth = LegendrePreview { c: [c0, c1, c2, c3], s_start: 0.0, s_plus: 1900.0 };
            let n = 20usize;
            let pts: Vec<(f64, f64)> = (0..n)
                .map(|i| {
                    let s = 1900.0 * i as f64 / (n - 1) as f64;
                    (s, truth.eval(s))
                })
                .collect();
            let profile = GradeProfile::new(pts).unwrap();
            let fit = fit_preview(&profile, 0.0, 1900.0, n).unwrap();
            for j in 0..4 {
                prop_assert!((fit.c[j] - truth.c[j]).abs() < 1e-12);
            }
        }

        /// Lipschitz bound from the basis derivatives on [-1, 1].
        #[test]
        fn eval_is_lipschitz(
            c0 in -0.05..0.05f64,
            c1 in -0.05..0.05f64,
            c2 in -0.05..0.05f64,
            c3 in -0.05..0.05f64,
            s1 in 0.0..2000.0f64,
            s2 in 0.0..2000.0f64,
        ) {
            let fit = LegendrePreview { c: [c0, c1, c2, c3], s_start: 0.0, s_plus: 2000.0 };
            let dp_max = [0.0, 1.0, 3.0, 6.0];
            let lip: f64 = (2.0 / fit.s_plus)
                * (0..4).map(|j| fit.c[j].abs() * dp_max[j]).sum::<f64>();
            let dv = (fit.eval(s1) - fit.eval(s2)).abs();
            prop_assert!(dv <= lip * (s1 - s2).abs() + 1e-12);
        }
    }

    #[test]
    fn orthogonality_sanity() {
        for j in 0..4 {
            let mut c = [0.0; 4];
            c[j] = 0.01;
            let truth = LegendrePreview { c, s_start: 0.0, s_plus: 950.0 };
            let n = 20usize;
            let pts: Vec<(f64, f64)> = (0..n)
                .map(|i| {
                    let s = 950.0 * i as f64 / (n - 1) as f64;
                    (s, truth.eval(s))
                })
                .collect();
            let profile = GradeProfile::new(pts).unwrap();
            let fit = fit_preview(&profile, 0.0, 950.0, n).unwrap();
            for k in 0..4 {
                assert!((fit.c[k] - c[k]).abs() < 1e-13, "P_{j} fit returned c[{k}] = {}", fit.c[k]);
            }
        }
    }

    #[test]
    fn s_road_geometry() {
        let road = standard_s_road();
        assert_relative_eq!(road.route_length(), 35.0e3);
        // Downhill and uphill elevation changes cancel by symmetry.
        let down = road.elevation_change(5.0e3, 15.0e3, 20_000);
        let up = road.elevation_change(20.0e3, 30.0e3, 20_000);
        assert_relative_eq!(down, -up, epsilon = 1e-6);
        // Uphill gain close to length * sin(grade).
        let predicted = 10.0e3 * 0.04f64.sin();
        assert!((up - predicted).abs() / predicted < 0.01, "gain {up} vs {predicted}");
    }

    #[test]
    fn s_road_zero_ramp_is_piecewise_constant() {
        let road = make_s_road(-0.04, 0.04, &[1.0e3, 1.0e3, 1.0e3, 1.0e3, 1.0e3], 0.0);
        assert_relative_eq!(road.grade_at(999.9), 0.0, epsilon = 1e-12);
        assert_relative_eq!(road.grade_at(1000.01), -0.04, epsilon = 1e-12);
        assert_relative_eq!(road.grade_at(1500.0), -0.04, epsilon = 1e-12);
    }

    #[test]
    fn route_parsing_and_interpolation() {
        let p = parse_route("s_m,grade_rad\n0,0.01\n1000,0.01\n").unwrap();
        assert_relative_eq!(p.grade_at(432.0), 0.01);

        let p = parse_route("s_m,grade_rad\n0,0\n1000,0.02\n").unwrap();
        assert_relative_eq!(p.grade_at(500.0), 0.01, epsilon = 1e-15);
        // Beyond the last breakpoint: last grade.
        assert_relative_eq!(p.grade_at(2000.0), 0.02);
    }

    #[test]
    fn route_parse_errors_carry_line_numbers() {
        let err = parse_route("s_m,grade_rad\n0,0\n-5,0.01\n").unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected error {other:?}"),
        }
        let err = parse_route("s_m,grade_rad\n0,zero\n").unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn route_round_trips_bit_identically() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("route.csv");
        let road = synthetic_route_70km();
        save_route(&road, &path).unwrap();
        let loaded = load_route(&path).unwrap();
        assert_eq!(road, loaded);
        // Second save reproduces the same bytes.
        let bytes1 = std::fs::read(&path).unwrap();
        save_route(&loaded, &path).unwrap();
        let bytes2 = std::fs::read(&path).unwrap();
        assert_eq!(bytes1, bytes2);
    }

    #[test]
    fn synthetic_route_shape() {
        let road = synthetic_route_70km();
        assert_relative_eq!(road.route_length(), 70.0e3);
        let steepest = road
            .breakpoints()
            .iter()
            .map(|&(_, a)| a.abs())
            .fold(0.0, f64::max);
        assert!(steepest > 0.045 && steepest < 0.15, "steepest {steepest}");
    }
}
