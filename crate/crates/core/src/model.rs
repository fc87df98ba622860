//! Problem data, solver artifacts and their JSON encoding.
//!
//! Matrices travel as row-major nested arrays. Every float is written with 17
//! significant digits so that a save/load cycle reproduces the exact bits.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{asymmetry, symmetrize, Mat, Vector};

/// Tolerance on a generator row sum below which the diagonal is silently repaired.
pub const ROW_SUM_TOL: f64 = 1e-12;
/// Asymmetry of Q or R tolerated (and removed) on load.
pub const SYMMETRY_TOL: f64 = 1e-9;

/// Generator of the regime chain: off-diagonal jump intensities, rows summing to zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generator {
    #[serde(with = "serde_mat::matrix")]
    rates: Mat,
}

impl Generator {
    /// Validates intensities and repairs the diagonal when the row-sum defect is within
    /// [`ROW_SUM_TOL`].
    pub fn new(rates: Mat) -> Result<Self> {
        let l = rates.nrows();
        if l == 0 || rates.ncols() != l {
            return Err(Error::Validation(format!(
                "generator must be a non-empty square matrix, got {}x{}",
                rates.nrows(),
                rates.ncols()
            )));
        }
        if rates.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("generator has non-finite entries".into()));
        }
        let mut rates = rates;
        for i in 0..l {
            for j in 0..l {
                if i != j && rates[(i, j)] < 0.0 {
                    return Err(Error::Validation(format!(
                        "negative off-diagonal intensity pi[{i}][{j}] = {}",
                        rates[(i, j)]
                    )));
                }
            }
            let off = off_diagonal_sum(&rates, i);
            let defect = rates[(i, i)] + off;
            if defect.abs() > ROW_SUM_TOL {
                return Err(Error::Validation(format!(
                    "generator row {i} sums to {defect:e}, not 0"
                )));
            }
            rates[(i, i)] = -off;
        }
        Ok(Self { rates })
    }

    pub fn regimes(&self) -> usize {
        self.rates.nrows()
    }

    pub fn rate(&self, i: usize, j: usize) -> f64 {
        self.rates[(i, j)]
    }

    pub fn rates(&self) -> &Mat {
        &self.rates
    }

    /// Total exit intensity `-pi_ii`.
    pub fn exit_rate(&self, i: usize) -> f64 {
        -self.rates[(i, i)]
    }

    /// Row sum computed as `pi_ii + sum_{j != i} pi_ij`; exactly zero for a validated generator.
    pub fn row_defect(&self, i: usize) -> f64 {
        self.rates[(i, i)] + off_diagonal_sum(&self.rates, i)
    }
}

fn off_diagonal_sum(rates: &Mat, i: usize) -> f64 {
    (0..rates.ncols()).filter(|&j| j != i).map(|j| rates[(i, j)]).sum()
}

/// Coefficients of one regime.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeData {
    #[serde(rename = "A", with = "serde_mat::matrix")]
    pub a: Mat,
    #[serde(rename = "B", with = "serde_mat::matrix")]
    pub b: Mat,
    #[serde(rename = "C", with = "serde_mat::matrix")]
    pub c: Mat,
    #[serde(rename = "D", with = "serde_mat::matrix")]
    pub d: Mat,
    #[serde(rename = "Q", with = "serde_mat::matrix")]
    pub q: Mat,
    #[serde(rename = "S", with = "serde_mat::matrix")]
    pub s: Mat,
    #[serde(rename = "R", with = "serde_mat::matrix")]
    pub r: Mat,
    #[serde(rename = "b", default, with = "serde_mat::opt_vector", skip_serializing_if = "Option::is_none")]
    pub drift_offset: Option<Vector>,
    #[serde(rename = "sigma", default, with = "serde_mat::opt_vector", skip_serializing_if = "Option::is_none")]
    pub diffusion_offset: Option<Vector>,
    #[serde(rename = "q", default, with = "serde_mat::opt_vector", skip_serializing_if = "Option::is_none")]
    pub state_cost: Option<Vector>,
    #[serde(rename = "rho", default, with = "serde_mat::opt_vector", skip_serializing_if = "Option::is_none")]
    pub control_cost: Option<Vector>,
}

impl RegimeData {
    /// Homogeneous regime with the given matrices.
    #[allow(clippy::too_many_arguments)]
    pub fn new(a: Mat, b: Mat, c: Mat, d: Mat, q: Mat, s: Mat, r: Mat) -> Self {
        Self {
            a,
            b,
            c,
            d,
            q,
            s,
            r,
            drift_offset: None,
            diffusion_offset: None,
            state_cost: None,
            control_cost: None,
        }
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn m(&self) -> usize {
        self.b.ncols()
    }

    /// `b`, zero when absent.
    pub fn b_vec(&self) -> Vector {
        self.drift_offset.clone().unwrap_or_else(|| Vector::zeros(self.n()))
    }

    pub fn sigma_vec(&self) -> Vector {
        self.diffusion_offset.clone().unwrap_or_else(|| Vector::zeros(self.n()))
    }

    pub fn q_vec(&self) -> Vector {
        self.state_cost.clone().unwrap_or_else(|| Vector::zeros(self.n()))
    }

    pub fn rho_vec(&self) -> Vector {
        self.control_cost.clone().unwrap_or_else(|| Vector::zeros(self.m()))
    }

    fn has_nonzero_offsets(&self) -> bool {
        [&self.drift_offset, &self.diffusion_offset, &self.state_cost, &self.control_cost]
            .iter()
            .any(|v| v.as_ref().is_some_and(|v| v.iter().any(|x| *x != 0.0)))
    }
}

/// A complete regime-switching LQ instance.
#[derive(Debug, Clone, PartialEq)]
pub struct ProblemSpec {
    pub n: usize,
    pub m: usize,
    pub generator: Generator,
    pub regimes: Vec<RegimeData>,
    pub discount_r: f64,
}

impl ProblemSpec {
    /// Validates dimensions, symmetrizes the weights and checks offset consistency.
    pub fn new(
        n: usize,
        m: usize,
        generator: Generator,
        regimes: Vec<RegimeData>,
        discount_r: f64,
    ) -> Result<Self> {
        if n == 0 || m == 0 {
            return Err(Error::Validation(format!("dimensions must be positive (n={n}, m={m})")));
        }
        if regimes.len() != generator.regimes() {
            return Err(Error::Validation(format!(
                "{} regimes given for a {}-state generator",
                regimes.len(),
                generator.regimes()
            )));
        }
        if !(discount_r >= 0.0) || !discount_r.is_finite() {
            return Err(Error::Validation(format!("discount rate must be >= 0, got {discount_r}")));
        }
        let mut regimes = regimes;
        for (i, reg) in regimes.iter_mut().enumerate() {
            check_shape(i, "A", &reg.a, n, n)?;
            check_shape(i, "B", &reg.b, n, m)?;
            check_shape(i, "C", &reg.c, n, n)?;
            check_shape(i, "D", &reg.d, n, m)?;
            check_shape(i, "Q", &reg.q, n, n)?;
            check_shape(i, "S", &reg.s, m, n)?;
            check_shape(i, "R", &reg.r, m, m)?;
            for (name, v, len) in [
                ("b", &reg.drift_offset, n),
                ("sigma", &reg.diffusion_offset, n),
                ("q", &reg.state_cost, n),
                ("rho", &reg.control_cost, m),
            ] {
                if let Some(v) = v {
                    if v.len() != len {
                        return Err(Error::Validation(format!(
                            "regime {i}: {name} has length {}, expected {len}",
                            v.len()
                        )));
                    }
                    if v.iter().any(|x| !x.is_finite()) {
                        return Err(Error::Validation(format!("regime {i}: {name} is not finite")));
                    }
                }
            }
            reg.q = symmetrized_weight(i, "Q", &reg.q)?;
            reg.r = symmetrized_weight(i, "R", &reg.r)?;
        }
        let presence = |f: fn(&RegimeData) -> bool| {
            let count = regimes.iter().filter(|r| f(r)).count();
            count == 0 || count == regimes.len()
        };
        let consistent = presence(|r| r.drift_offset.is_some())
            && presence(|r| r.diffusion_offset.is_some())
            && presence(|r| r.state_cost.is_some())
            && presence(|r| r.control_cost.is_some());
        if !consistent {
            return Err(Error::Validation(
                "inhomogeneous terms must be given for every regime or for none".into(),
            ));
        }
        Ok(Self { n, m, generator, regimes, discount_r })
    }

    pub fn regimes_count(&self) -> usize {
        self.regimes.len()
    }

    /// True when every offset term (b, sigma, q, rho) is absent or identically zero.
    pub fn is_homogeneous(&self) -> bool {
        !self.regimes.iter().any(RegimeData::has_nonzero_offsets)
    }

    pub fn to_file(&self) -> ProblemFile {
        ProblemFile {
            n: self.n,
            m: self.m,
            l: self.regimes.len(),
            generator: self.generator.rates.clone(),
            regimes: self.regimes.clone(),
            discount_r: (self.discount_r != 0.0).then_some(self.discount_r),
        }
    }
}

fn check_shape(i: usize, name: &str, m: &Mat, rows: usize, cols: usize) -> Result<()> {
    if m.nrows() != rows || m.ncols() != cols {
        return Err(Error::Validation(format!(
            "regime {i}: {name} is {}x{}, expected {rows}x{cols}",
            m.nrows(),
            m.ncols()
        )));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation(format!("regime {i}: {name} has non-finite entries")));
    }
    Ok(())
}

fn symmetrized_weight(i: usize, name: &str, m: &Mat) -> Result<Mat> {
    let asym = asymmetry(m);
    if asym > SYMMETRY_TOL {
        return Err(Error::Validation(format!(
            "regime {i}: {name} is not symmetric (max |M - M^T| = {asym:e})"
        )));
    }
    Ok(symmetrize(m))
}

/// On-disk layout of a problem instance.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemFile {
    pub n: usize,
    pub m: usize,
    #[serde(rename = "L")]
    pub l: usize,
    #[serde(with = "serde_mat::matrix")]
    pub generator: Mat,
    pub regimes: Vec<RegimeData>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub discount_r: Option<f64>,
}

impl ProblemFile {
    pub fn into_problem(self) -> Result<ProblemSpec> {
        if self.generator.nrows() != self.l {
            return Err(Error::Validation(format!(
                "L = {} but generator has {} rows",
                self.l,
                self.generator.nrows()
            )));
        }
        let generator = Generator::new(self.generator)?;
        ProblemSpec::new(self.n, self.m, generator, self.regimes, self.discount_r.unwrap_or(0.0))
    }
}

/// An L-indexed family of symmetric n x n matrices (P, Lambda, G, ...).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoupledMatrixSet {
    #[serde(with = "serde_mat::matrices")]
    entries: Vec<Mat>,
}

impl CoupledMatrixSet {
    /// Symmetrizes every entry.
    pub fn new(entries: Vec<Mat>) -> Self {
        Self { entries: entries.iter().map(symmetrize).collect() }
    }

    pub fn zeros(l: usize, n: usize) -> Self {
        Self { entries: vec![Mat::zeros(n, n); l] }
    }

    pub fn identity(l: usize, n: usize) -> Self {
        Self { entries: vec![Mat::identity(n, n); l] }
    }

    pub fn from_scalars(values: &[f64]) -> Self {
        Self { entries: values.iter().map(|&v| Mat::from_element(1, 1, v)).collect() }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.entries.first().map_or(0, |m| m.nrows())
    }

    pub fn entries(&self) -> &[Mat] {
        &self.entries
    }

    pub fn into_entries(self) -> Vec<Mat> {
        self.entries
    }

    /// Largest per-regime Frobenius distance.
    pub fn max_distance(&self, other: &Self) -> f64 {
        self.entries
            .iter()
            .zip(&other.entries)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max)
    }

    pub fn max_norm(&self) -> f64 {
        self.entries.iter().map(|m| m.norm()).fold(0.0, f64::max)
    }
}

impl std::ops::Index<usize> for CoupledMatrixSet {
    type Output = Mat;

    fn index(&self, i: usize) -> &Mat {
        &self.entries[i]
    }
}

/// Per-regime feedback `u = theta(alpha) x + nu(alpha)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackStrategy {
    #[serde(with = "serde_mat::matrices")]
    pub theta: Vec<Mat>,
    #[serde(with = "serde_mat::vectors")]
    pub nu: Vec<Vector>,
}

impl FeedbackStrategy {
    /// Pure feedback with zero offsets.
    pub fn from_gains(theta: Vec<Mat>) -> Self {
        let nu = theta.iter().map(|t| Vector::zeros(t.nrows())).collect();
        Self { theta, nu }
    }

    pub fn zeros(l: usize, m: usize, n: usize) -> Self {
        Self::from_gains(vec![Mat::zeros(m, n); l])
    }

    pub fn len(&self) -> usize {
        self.theta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.theta.is_empty()
    }

    pub fn negated(&self) -> Self {
        Self {
            theta: self.theta.iter().map(|t| -t).collect(),
            nu: self.nu.iter().map(|v| -v).collect(),
        }
    }

    pub fn has_offsets(&self) -> bool {
        self.nu.iter().any(|v| v.iter().any(|x| *x != 0.0))
    }

    /// Checks the strategy against the problem dimensions.
    pub fn check_dims(&self, l: usize, m: usize, n: usize) -> Result<()> {
        if self.theta.len() != l || self.nu.len() != l {
            return Err(Error::Dimension(format!(
                "strategy has {} gains / {} offsets for {l} regimes",
                self.theta.len(),
                self.nu.len()
            )));
        }
        for (i, (t, v)) in self.theta.iter().zip(&self.nu).enumerate() {
            if t.nrows() != m || t.ncols() != n || v.len() != m {
                return Err(Error::Dimension(format!(
                    "regime {i}: gain is {}x{} and offset has length {}, expected {m}x{n} and {m}",
                    t.nrows(),
                    t.ncols(),
                    v.len()
                )));
            }
        }
        Ok(())
    }
}

/// Reads and validates a problem file.
pub fn load_problem(path: impl AsRef<Path>) -> Result<ProblemSpec> {
    let file: ProblemFile = load_json(path)?;
    file.into_problem()
}

/// Parses a problem from an in-memory JSON document.
pub fn parse_problem(text: &str) -> Result<ProblemSpec> {
    let file: ProblemFile = serde_json::from_str(text).map_err(|e| Error::Parse {
        path: "<memory>".into(),
        message: e.to_string(),
    })?;
    file.into_problem()
}

pub fn save_problem(problem: &ProblemSpec, path: impl AsRef<Path>) -> Result<()> {
    save_artifact(&problem.to_file(), path)
}

/// Loads any JSON artifact written by [`save_artifact`].
pub fn load_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| Error::Io { path: path.into(), source })?;
    serde_json::from_str(&text).map_err(|e| Error::Parse { path: path.into(), message: e.to_string() })
}

/// Serializes an artifact to a JSON string with 17-significant-digit floats.
pub fn to_json_string<T: Serialize + ?Sized>(object: &T) -> Result<String> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, ExactFloatFormatter::default());
    object.serialize(&mut ser).map_err(|e| {
        if e.to_string().contains(serde_mat::NON_FINITE) {
            Error::NonFinite("artifact")
        } else {
            Error::Internal(format!("serialization failed: {e}"))
        }
    })?;
    Ok(String::from_utf8(buf).expect("serde_json emits UTF-8"))
}

/// Writes an artifact atomically (temp file in the same directory, then rename).
pub fn save_artifact<T: Serialize + ?Sized>(object: &T, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = to_json_string(object)?;
    let io_err = |source| Error::Io { path: path.into(), source };
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => std::env::current_dir().map_err(io_err)?,
    };
    let file_name = path.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{file_name}.{}.tmp", std::process::id()));
    let write = || -> io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(text.as_bytes())?;
        f.write_all(b"\n")?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = fs::remove_file(&tmp);
        io_err(e)
    })
}

/// Pretty JSON formatter that prints every `f64` as `{:.16e}`.
#[derive(Default)]
struct ExactFloatFormatter<'a> {
    inner: serde_json::ser::PrettyFormatter<'a>,
}

impl serde_json::ser::Formatter for ExactFloatFormatter<'_> {
    fn write_f64<W: ?Sized + Write>(&mut self, writer: &mut W, value: f64) -> io::Result<()> {
        write!(writer, "{value:.16e}")
    }

    fn write_f32<W: ?Sized + Write>(&mut self, writer: &mut W, value: f32) -> io::Result<()> {
        write!(writer, "{value:.8e}")
    }

    fn begin_array<W: ?Sized + Write>(&mut self, writer: &mut W) -> io::Result<()> {
        self.inner.begin_array(writer)
    }

    fn end_array<W: ?Sized + Write>(&mut self, writer: &mut W) -> io::Result<()> {
        self.inner.end_array(writer)
    }

    fn begin_array_value<W: ?Sized + Write>(&mut self, writer: &mut W, first: bool) -> io::Result<()> {
        self.inner.begin_array_value(writer, first)
    }

    fn end_array_value<W: ?Sized + Write>(&mut self, writer: &mut W) -> io::Result<()> {
        self.inner.end_array_value(writer)
    }

    fn begin_object<W: ?Sized + Write>(&mut self, writer: &mut W) -> io::Result<()> {
        self.inner.begin_object(writer)
    }

    fn end_object<W: ?Sized + Write>(&mut self, writer: &mut W) -> io::Result<()> {
        self.inner.end_object(writer)
    }

    fn begin_object_key<W: ?Sized + Write>(&mut self, writer: &mut W, first: bool) -> io::Result<()> {
        self.inner.begin_object_key(writer, first)
    }

    fn begin_object_value<W: ?Sized + Write>(&mut self, writer: &mut W) -> io::Result<()> {
        self.inner.begin_object_value(writer)
    }

    fn end_object_value<W: ?Sized + Write>(&mut self, writer: &mut W) -> io::Result<()> {
        self.inner.end_object_value(writer)
    }
}

/// serde adapters for nalgebra matrices as row-major nested arrays.
pub mod serde_mat {
    use serde::de::Error as _;
    use serde::ser::Error as _;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use crate::linalg::{Mat, Vector};

    pub(crate) const NON_FINITE: &str = "non-finite value in artifact";

    fn rows_of<E: serde::ser::Error>(m: &Mat) -> Result<Vec<Vec<f64>>, E> {
        if m.iter().any(|v| !v.is_finite()) {
            return Err(E::custom(NON_FINITE));
        }
        Ok(m.row_iter().map(|r| r.iter().copied().collect()).collect())
    }

    fn from_rows<E: serde::de::Error>(rows: Vec<Vec<f64>>) -> Result<Mat, E> {
        let nrows = rows.len();
        let ncols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != ncols) {
            return Err(E::custom("ragged matrix rows"));
        }
        Ok(Mat::from_row_iterator(nrows, ncols, rows.into_iter().flatten()))
    }

    fn finite_vec<E: serde::ser::Error>(v: &Vector) -> Result<&[f64], E> {
        if v.iter().any(|x| !x.is_finite()) {
            return Err(E::custom(NON_FINITE));
        }
        Ok(v.as_slice())
    }

    pub mod matrix {
        use super::*;

        pub fn serialize<S: Serializer>(m: &Mat, s: S) -> Result<S::Ok, S::Error> {
            rows_of::<S::Error>(m)?.serialize(s)
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Mat, D::Error> {
            from_rows(Vec::<Vec<f64>>::deserialize(d)?)
        }
    }

    pub mod matrices {
        use super::*;

        pub fn serialize<S: Serializer>(ms: &[Mat], s: S) -> Result<S::Ok, S::Error> {
            ms.iter().map(rows_of::<S::Error>).collect::<Result<Vec<_>, _>>()?.serialize(s)
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Mat>, D::Error> {
            Vec::<Vec<Vec<f64>>>::deserialize(d)?.into_iter().map(from_rows).collect()
        }
    }

    pub mod vector {
        use super::*;

        pub fn serialize<S: Serializer>(v: &Vector, s: S) -> Result<S::Ok, S::Error> {
            finite_vec::<S::Error>(v)?.serialize(s)
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vector, D::Error> {
            Ok(Vector::from_vec(Vec::<f64>::deserialize(d)?))
        }
    }

    pub mod vectors {
        use super::*;

        pub fn serialize<S: Serializer>(vs: &[Vector], s: S) -> Result<S::Ok, S::Error> {
            vs.iter().map(finite_vec::<S::Error>).collect::<Result<Vec<_>, _>>()?.serialize(s)
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Vector>, D::Error> {
            Ok(Vec::<Vec<f64>>::deserialize(d)?.into_iter().map(Vector::from_vec).collect())
        }
    }

    pub mod opt_vector {
        use super::*;

        pub fn serialize<S: Serializer>(v: &Option<Vector>, s: S) -> Result<S::Ok, S::Error> {
            match v {
                Some(v) => Some(finite_vec::<S::Error>(v)?).serialize(s),
                None => s.serialize_none(),
            }
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Vector>, D::Error> {
            Ok(Option::<Vec<f64>>::deserialize(d)?.map(Vector::from_vec))
        }
    }

    /// Statistic written as `null` when undefined (NaN or infinite), read back as NaN.
    pub mod nullable {
        use super::*;

        pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
            if v.is_finite() {
                s.serialize_f64(*v)
            } else {
                s.serialize_none()
            }
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
            Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
        }
    }

    /// Scalar that must be finite when written.
    pub mod finite {
        use super::*;

        pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
            if !v.is_finite() {
                return Err(S::Error::custom(NON_FINITE));
            }
            s.serialize_f64(*v)
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
            let v = f64::deserialize(d)?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(D::Error::custom(NON_FINITE))
            }
        }
    }
}
