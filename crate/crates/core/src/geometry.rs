//! Codebook construction and verification.
//!
//! Simplex codes are built in closed form from the orthogonal representation:
//! `M` scaled axis vectors have their centroid removed, and the result is
//! expressed in the Helmert basis of the hyperplane orthogonal to the all-ones
//! vector so that it fits in `M - 1` dimensions with no numerical
//! factorization. Large message sets use a greedy random packing on the unit
//! sphere with a hard cap on pairwise |cosine|.

use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{contract, param, Result};

/// Relative tolerance used to validate exact constructions.
pub const EXACT_TOL: f64 = 1e-9;

/// `M` real codewords of a common dimension, each with squared norm `energy`.
///
/// Stored row-major: codeword `i` occupies `data[i * dim..(i + 1) * dim]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Codebook {
    m: usize,
    dim: usize,
    energy: f64,
    data: Vec<f64>,
}

/// Metadata written next to a codebook CSV.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CodebookHeader {
    #[serde(rename = "M")]
    pub m: usize,
    pub dim: usize,
    pub energy: f64,
}

impl Codebook {
    /// Wraps row-major data, checking that every row has squared norm
    /// `energy` to [`EXACT_TOL`] relative.
    pub fn new(m: usize, dim: usize, energy: f64, data: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(param("codebook dimension must be at least 1"));
        }
        if data.len() != m * dim {
            return Err(contract(format!(
                "codebook data has {} entries, expected {} x {}",
                data.len(),
                m,
                dim
            )));
        }
        if !(energy >= 0.0) || !energy.is_finite() {
            return Err(param(format!("codebook energy must be finite and >= 0, got {energy}")));
        }
        let cb = Self { m, dim, energy, data };
        for i in 0..m {
            let e = norm_sq(cb.codeword(i));
            if (e - energy).abs() > EXACT_TOL * energy.max(1e-300) && (e - energy).abs() > 1e-12 {
                return Err(contract(format!(
                    "codeword {i} has squared norm {e}, expected {energy}"
                )));
            }
        }
        Ok(cb)
    }

    /// Builds a codebook from rows; the energy is taken from the first row.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let first = rows
            .first()
            .ok_or_else(|| param("codebook needs at least one codeword"))?;
        let dim = first.len();
        if rows.iter().any(|r| r.len() != dim) {
            return Err(contract("codewords have differing dimensions"));
        }
        let energy = norm_sq(first);
        Self::new(rows.len(), dim, energy, rows.concat())
    }

    pub fn len(&self) -> usize {
        self.m
    }

    pub fn is_empty(&self) -> bool {
        self.m == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn energy(&self) -> f64 {
        self.energy
    }

    pub fn codeword(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn codewords(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.data
    }

    pub fn header(&self) -> CodebookHeader {
        CodebookHeader {
            m: self.m,
            dim: self.dim,
            energy: self.energy,
        }
    }

    /// Rescales every codeword to squared norm `energy`.
    pub fn scaled(&self, energy: f64) -> Result<Self> {
        if self.energy == 0.0 {
            return Err(param("cannot rescale a zero-energy codebook"));
        }
        let k = (energy / self.energy).sqrt();
        Self::new(self.m, self.dim, energy, self.data.iter().map(|v| v * k).collect())
    }

    /// Full `M x M` Gram matrix, row-major.
    pub fn gram(&self) -> Vec<f64> {
        let mut g = vec![0.0; self.m * self.m];
        for i in 0..self.m {
            for j in i..self.m {
                let v = dot(self.codeword(i), self.codeword(j));
                g[i * self.m + j] = v;
                g[j * self.m + i] = v;
            }
        }
        g
    }

    /// Writes one codeword per CSV row, no header line.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::WriterBuilder::new().has_headers(false).from_writer(w);
        for row in self.codewords() {
            wr.write_record(row.iter().map(|v| format!("{v:e}")))?;
        }
        wr.flush()?;
        Ok(())
    }

    /// Reads rows written by [`Codebook::write_csv`] and checks them against
    /// `header`.
    pub fn read_csv<R: Read>(r: R, header: &CodebookHeader) -> Result<Self> {
        let mut rd = csv::ReaderBuilder::new().has_headers(false).from_reader(r);
        let mut data = Vec::with_capacity(header.m * header.dim);
        for rec in rd.records() {
            for field in rec?.iter() {
                let v: f64 = field
                    .trim()
                    .parse()
                    .map_err(|e| contract(format!("bad codebook entry {field:?}: {e}")))?;
                data.push(v);
            }
        }
        Self::new(header.m, header.dim, header.energy, data)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm_sq(a: &[f64]) -> f64 {
    dot(a, a)
}

pub(crate) fn dist_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Simplex code of `m` codewords with squared norm `energy`, embedded in
/// `dim >= m - 1` coordinates (extra coordinates are zero).
///
/// Codeword `i` is `sqrt(energy * m / (m - 1)) * (e_i - 1/m)` written in the
/// Helmert basis, so pairwise inner products are `-energy / (m - 1)` and the
/// codewords sum to zero.
pub fn make_simplex(m: usize, energy: f64, dim: usize) -> Result<Codebook> {
    if m < 2 {
        return Err(param(format!("simplex needs at least 2 codewords, got {m}")));
    }
    if dim < m - 1 {
        return Err(param(format!(
            "simplex of {m} codewords needs dimension >= {}, got {dim}",
            m - 1
        )));
    }
    if !(energy > 0.0) || !energy.is_finite() {
        return Err(param(format!("simplex energy must be positive, got {energy}")));
    }
    let scale = (energy * m as f64 / (m - 1) as f64).sqrt();
    let mut data = vec![0.0; m * dim];
    // Helmert row k: k + 1 entries equal to 1/sqrt((k+1)(k+2)), then -(k+1)
    // times that, then zeros.
    for k in 0..m - 1 {
        let kf = (k + 1) as f64;
        let a = scale / (kf * (kf + 1.0)).sqrt();
        for i in 0..=k {
            data[i * dim + k] = a;
        }
        data[(k + 1) * dim + k] = -kf * a;
    }
    Codebook::new(m, dim, energy, data)
}

/// Pairwise statistics of a codebook.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GramReport {
    pub max_abs_offdiag_cosine: f64,
    pub min_sq_distance: f64,
    pub max_sq_distance: f64,
    pub mean_sq_distance: f64,
    /// All pairwise squared distances lie within `tolerance * mean` of their mean.
    pub is_equidistant: bool,
    pub tolerance: f64,
}

/// Exact pairwise scan of `cb`. `tol` is relative to the mean squared distance.
pub fn gram_check(cb: &Codebook, tol: f64) -> GramReport {
    let m = cb.len();
    let norms: Vec<f64> = cb.codewords().map(|c| norm_sq(c).sqrt()).collect();
    let mut max_cos: f64 = 0.0;
    let mut dists = Vec::with_capacity(m * m.saturating_sub(1) / 2);
    for i in 0..m {
        for j in i + 1..m {
            let (a, b) = (cb.codeword(i), cb.codeword(j));
            if norms[i] > 0.0 && norms[j] > 0.0 {
                let c = (dot(a, b) / (norms[i] * norms[j])).abs().min(1.0);
                max_cos = max_cos.max(c);
            }
            dists.push(dist_sq(a, b));
        }
    }
    if dists.is_empty() {
        return GramReport {
            max_abs_offdiag_cosine: 0.0,
            min_sq_distance: 0.0,
            max_sq_distance: 0.0,
            mean_sq_distance: 0.0,
            is_equidistant: true,
            tolerance: tol,
        };
    }
    let mean = dists.iter().sum::<f64>() / dists.len() as f64;
    let min = dists.iter().copied().fold(f64::INFINITY, f64::min);
    let max = dists.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let spread = (max - mean).abs().max((mean - min).abs());
    GramReport {
        max_abs_offdiag_cosine: max_cos,
        min_sq_distance: min,
        max_sq_distance: max,
        mean_sq_distance: mean,
        is_equidistant: spread <= tol * mean,
        tolerance: tol,
    }
}

/// Recovers the mutually orthogonal vectors `u_i = z_i + u_0` behind a simplex
/// code, where `u_0` is orthogonal to every codeword with `|u_0|^2 = E/(M-1)`.
///
/// The input must be equidistant with pairwise inner product `-E/(M-1)` and
/// live in at least `M` dimensions so that a complement direction exists.
pub fn simplex_to_orthogonal(cb: &Codebook) -> Result<Codebook> {
    let m = cb.len();
    if m < 2 {
        return Err(contract("need at least 2 codewords"));
    }
    if cb.dim() < m {
        return Err(contract(format!(
            "ambient dimension {} too small, need >= {m} for the orthogonal representation",
            cb.dim()
        )));
    }
    let report = gram_check(cb, EXACT_TOL);
    if !report.is_equidistant {
        return Err(contract("input codebook is not equidistant"));
    }
    let r = cb.energy() / (m - 1) as f64;
    for i in 0..m {
        for j in i + 1..m {
            let ip = dot(cb.codeword(i), cb.codeword(j));
            if (ip + r).abs() > EXACT_TOL * cb.energy().max(1.0) {
                return Err(contract(format!(
                    "codewords {i},{j} have inner product {ip}, simplex requires {}",
                    -r
                )));
            }
        }
    }

    let dim = cb.dim();
    // Orthonormal basis of span{z_i} via modified Gram-Schmidt; at most M-1
    // directions survive since the codewords sum to zero.
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for z in cb.codewords() {
        let mut v = z.to_vec();
        for _ in 0..2 {
            for q in &basis {
                let c = dot(&v, q);
                v.iter_mut().zip(q).for_each(|(x, y)| *x -= c * y);
            }
        }
        let nv = norm_sq(&v).sqrt();
        if nv > 1e-9 * cb.energy().sqrt() {
            v.iter_mut().for_each(|x| *x /= nv);
            basis.push(v);
        }
    }
    // Complement direction: the axis vector with the largest residual.
    let mut best: Option<Vec<f64>> = None;
    let mut best_norm = 0.0;
    for axis in 0..dim {
        let mut v = vec![0.0; dim];
        v[axis] = 1.0;
        for _ in 0..2 {
            for q in &basis {
                let c = dot(&v, q);
                v.iter_mut().zip(q).for_each(|(x, y)| *x -= c * y);
            }
        }
        let nv = norm_sq(&v).sqrt();
        if nv > best_norm {
            best_norm = nv;
            best = Some(v);
        }
    }
    let mut u0 = best.ok_or_else(|| contract("no complement direction found"))?;
    let k = r.sqrt() / best_norm;
    u0.iter_mut().for_each(|x| *x *= k);

    let data: Vec<f64> = cb
        .codewords()
        .flat_map(|z| z.iter().zip(&u0).map(|(a, b)| a + b).collect::<Vec<_>>())
        .collect();
    Codebook::new(m, dim, cb.energy() * m as f64 / (m - 1) as f64, data)
}

/// Result of the greedy spherical packing.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PackingOutcome {
    /// Unit-energy codewords; rescale with [`Codebook::scaled`].
    pub codebook: Codebook,
    pub target: usize,
    pub achieved: usize,
    /// `rho * exp(n * rho^2 / 2)`, the guaranteed existence floor.
    pub floor: f64,
    pub candidates_tried: usize,
    /// `false` when the candidate budget ran out before `target` was reached.
    pub complete: bool,
}

/// Default candidate budget as a multiple of the target size.
pub const DEFAULT_BUDGET_FACTOR: usize = 50;

/// Accepted candidates keep this margin below `rho` so that recomputing the
/// cosines later can never exceed the cap through rounding.
const COSINE_GUARD: f64 = 1e-12;

/// Guaranteed size of a spherical code in `R^n` with |cosine| <= `rho`.
pub fn packing_floor(n: usize, rho: f64) -> f64 {
    rho * (n as f64 * rho * rho / 2.0).exp()
}

/// Greedy random packing on the unit sphere of `R^n`: draws isotropic
/// candidates and keeps those whose |cosine| with every kept vector is at
/// most `rho`. Stops at `target_m` codewords or after `budget` candidates
/// (default `50 * target_m`).
pub fn make_quasi_equidistant(
    n: usize,
    rho: f64,
    target_m: usize,
    seed: u64,
    budget: Option<usize>,
) -> Result<PackingOutcome> {
    if n < 3 {
        return Err(param(format!("packing dimension must be >= 3, got {n}")));
    }
    if !(rho > 0.0 && rho < 1.0) {
        return Err(param(format!("rho must lie in (0, 1), got {rho}")));
    }
    if target_m == 0 {
        return Err(param("target size must be positive"));
    }
    let budget = budget.unwrap_or(DEFAULT_BUDGET_FACTOR * target_m);
    let cap = rho - COSINE_GUARD;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut kept: Vec<f64> = Vec::with_capacity(target_m * n);
    let mut count = 0;
    let mut tried = 0;
    let mut cand = vec![0.0; n];
    while count < target_m && tried < budget {
        tried += 1;
        for c in cand.iter_mut() {
            *c = StandardNormal.sample(&mut rng);
        }
        let nrm = norm_sq(&cand).sqrt();
        if nrm == 0.0 {
            continue;
        }
        cand.iter_mut().for_each(|c| *c /= nrm);
        let ok = kept.chunks_exact(n).all(|k| dot(k, &cand).abs() <= cap);
        if ok {
            kept.extend_from_slice(&cand);
            count += 1;
        }
    }
    // Renormalized rows have unit norm to rounding, well inside EXACT_TOL.
    let codebook = Codebook::new(count, n, 1.0, kept)?;
    Ok(PackingOutcome {
        codebook,
        target: target_m,
        achieved: count,
        floor: packing_floor(n, rho),
        candidates_tried: tried,
        complete: count == target_m,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn two_point_simplex_is_antipodal() {
        let cb = make_simplex(2, 1.0, 1).unwrap();
        assert_relative_eq!(cb.codeword(0)[0], 1.0, epsilon = 1e-15);
        assert_relative_eq!(cb.codeword(1)[0], -1.0, epsilon = 1e-15);
    }

    #[test]
    fn three_point_simplex_geometry() {
        let cb = make_simplex(3, 1.0, 2).unwrap();
        for i in 0..3 {
            for j in i + 1..3 {
                assert_relative_eq!(dot(cb.codeword(i), cb.codeword(j)), -0.5, epsilon = 1e-12);
                assert_relative_eq!(dist_sq(cb.codeword(i), cb.codeword(j)), 3.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn simplex_sums_to_zero() {
        for m in 2..40 {
            let cb = make_simplex(m, 1.0, m - 1).unwrap();
            for k in 0..cb.dim() {
                let s: f64 = cb.codewords().map(|c| c[k]).sum();
                assert!(s.abs() < 1e-12, "m={m} coord {k} sum {s}");
            }
        }
    }

    #[test]
    fn simplex_padding_and_dimension_error() {
        let cb = make_simplex(4, 2.0, 6).unwrap();
        assert_eq!(cb.dim(), 6);
        assert!(cb.codewords().all(|c| c[3..].iter().all(|&v| v == 0.0)));
        assert!(matches!(make_simplex(4, 1.0, 2), Err(crate::Error::Parameter(_))));
    }

    #[test]
    fn simplex_to_orthogonal_three_points() {
        let z = make_simplex(3, 1.0, 3).unwrap();
        let u = simplex_to_orthogonal(&z).unwrap();
        assert_relative_eq!(u.energy(), 1.5);
        let g = u.gram();
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.5 } else { 0.0 };
                assert!((g[i * 3 + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn antipodal_pair_to_orthogonal() {
        let z = Codebook::new(2, 2, 1.0, vec![1.0, 0.0, -1.0, 0.0]).unwrap();
        let u = simplex_to_orthogonal(&z).unwrap();
        assert_relative_eq!(norm_sq(u.codeword(0)), 2.0, epsilon = 1e-12);
        assert_relative_eq!(norm_sq(u.codeword(1)), 2.0, epsilon = 1e-12);
        assert!(dot(u.codeword(0), u.codeword(1)).abs() < 1e-12);
    }

    #[test]
    fn simplex_to_orthogonal_rejects_bad_input() {
        // orthogonal code: equidistant but not a simplex
        let orth = Codebook::new(2, 2, 1.0, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert!(matches!(simplex_to_orthogonal(&orth), Err(crate::Error::Contract(_))));
        let skew = Codebook::new(3, 3, 1.0, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.6, 0.8, 0.0]).unwrap();
        assert!(matches!(simplex_to_orthogonal(&skew), Err(crate::Error::Contract(_))));
        let tight = make_simplex(3, 1.0, 2).unwrap();
        assert!(matches!(simplex_to_orthogonal(&tight), Err(crate::Error::Contract(_))));
    }

    #[test]
    fn gram_check_cases() {
        let r = gram_check(&make_simplex(4, 1.0, 3).unwrap(), EXACT_TOL);
        assert!(r.is_equidistant);
        assert_relative_eq!(r.max_abs_offdiag_cosine, 1.0 / 3.0, epsilon = 1e-12);

        let dup = Codebook::from_rows(&[vec![0.6, 0.8], vec![0.6, 0.8]]).unwrap();
        let r = gram_check(&dup, EXACT_TOL);
        assert_eq!(r.max_abs_offdiag_cosine, 1.0);
        assert_eq!(r.min_sq_distance, 0.0);
    }

    #[test]
    fn codebook_rejects_unequal_energies() {
        assert!(Codebook::from_rows(&[vec![1.0, 0.0], vec![0.0, 2.0]]).is_err());
        assert!(Codebook::from_rows(&[vec![1.0, 0.0], vec![1.0]]).is_err());
    }

    #[test]
    fn packing_trivial_case() {
        let out = make_quasi_equidistant(3, 0.999, 2, 1, None).unwrap();
        assert_eq!(out.achieved, 2);
        assert!(out.complete);
        assert!(gram_check(&out.codebook, 1.0).max_abs_offdiag_cosine <= 0.999);
    }

    #[test]
    fn packing_flags_partial_result() {
        // more than 2n nearly orthogonal vectors cannot exist; budget runs out
        let out = make_quasi_equidistant(3, 0.05, 10, 3, Some(200)).unwrap();
        assert!(!out.complete);
        assert!(out.achieved < 10);
        assert_eq!(out.candidates_tried, 200);
    }

    #[test]
    fn packing_n50_rho03_respects_cap() {
        let out = make_quasi_equidistant(50, 0.3, 60, 11, None).unwrap();
        assert!(out.achieved as f64 >= out.floor, "{} < {}", out.achieved, out.floor);
        // independent scan over the returned set
        let cb = &out.codebook;
        let mut worst: f64 = 0.0;
        for i in 0..cb.len() {
            for j in 0..i {
                let c: f64 = cb.codeword(i).iter().zip(cb.codeword(j)).map(|(a, b)| a * b).sum();
                worst = worst.max(c.abs());
            }
        }
        assert!(worst <= 0.3, "worst cosine {worst}");
    }

    #[test]
    fn csv_roundtrip() {
        let cb = make_simplex(5, 3.5, 4).unwrap();
        let mut buf = Vec::new();
        cb.write_csv(&mut buf).unwrap();
        let back = Codebook::read_csv(buf.as_slice(), &cb.header()).unwrap();
        for (a, b) in cb.as_flat().iter().zip(back.as_flat()) {
            assert_relative_eq!(a, b, max_relative = 1e-15);
        }
        let json = serde_json::to_string(&cb.header()).unwrap();
        assert!(json.contains("\"M\":5"));
    }
}
