//! Shared numeric types: state vectors, ensembles, seeded random streams and
//! their CSV serialization.

use std::io::{Read, Write};
use std::ops::Deref;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{check_dim, Error, Result};

/// A finite, non-empty real state of a dynamical system.
#[derive(Clone, Debug, PartialEq)]
pub struct StateVector(Vec<f64>);

impl StateVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::arg("state vector must have at least one component"));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::arg(format!("state component {i} is not finite")));
        }
        Ok(StateVector(values))
    }

    pub fn zeros(d: usize) -> Self {
        assert!(d > 0, "state dimension must be positive");
        StateVector(vec![0.0; d])
    }

    pub fn filled(d: usize, value: f64) -> Self {
        assert!(d > 0 && value.is_finite());
        StateVector(vec![value; d])
    }

    pub(crate) fn from_vec_unchecked(values: Vec<f64>) -> Self {
        StateVector(values)
    }

    pub fn from_array(values: ArrayView1<f64>) -> Result<Self> {
        Self::new(values.to_vec())
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn view(&self) -> ArrayView1<'_, f64> {
        ArrayView1::from(&self.0[..])
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

impl Deref for StateVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// `J >= 2` member states of identical dimension, stored row-wise.
#[derive(Clone, Debug, PartialEq)]
pub struct Ensemble {
    members: Array2<f64>,
    pub time_index: usize,
}

impl Ensemble {
    pub fn new(members: Array2<f64>, time_index: usize) -> Result<Self> {
        if members.nrows() < 2 {
            return Err(Error::arg(format!(
                "ensemble needs at least 2 members, got {}",
                members.nrows()
            )));
        }
        if members.ncols() == 0 {
            return Err(Error::arg("ensemble members must have positive dimension"));
        }
        if let Some(pos) = members.iter().position(|v| !v.is_finite()) {
            return Err(Error::arg(format!(
                "ensemble member {} has a non-finite component",
                pos / members.ncols()
            )));
        }
        Ok(Ensemble {
            members,
            time_index,
        })
    }

    pub fn from_states(states: &[StateVector], time_index: usize) -> Result<Self> {
        let d = states.first().map(|s| s.dim()).unwrap_or(0);
        let mut members = Array2::zeros((states.len(), d));
        for (j, s) in states.iter().enumerate() {
            check_dim(d, s.dim())?;
            members.row_mut(j).assign(&s.view());
        }
        Self::new(members, time_index)
    }

    pub fn size(&self) -> usize {
        self.members.nrows()
    }

    pub fn dim(&self) -> usize {
        self.members.ncols()
    }

    pub fn members(&self) -> ArrayView2<'_, f64> {
        self.members.view()
    }

    pub fn into_members(self) -> Array2<f64> {
        self.members
    }

    pub fn member(&self, j: usize) -> StateVector {
        StateVector(self.members.row(j).to_vec())
    }

    pub fn mean(&self) -> StateVector {
        ensemble_mean(self)
    }

    /// Root of the component-averaged unbiased sample variance.
    pub fn spread(&self) -> f64 {
        let j = self.size() as f64;
        let mean = self.members.mean_axis(Axis(0)).expect("non-empty ensemble");
        let mut total = 0.0;
        for row in self.members.rows() {
            total += row
                .iter()
                .zip(mean.iter())
                .map(|(x, m)| (x - m) * (x - m))
                .sum::<f64>();
        }
        (total / ((j - 1.0) * self.dim() as f64)).sqrt()
    }
}

/// Componentwise arithmetic mean of the members.
pub fn ensemble_mean(e: &Ensemble) -> StateVector {
    let j = e.size() as f64;
    let mut acc = Array1::<f64>::zeros(e.dim());
    for row in e.members.rows() {
        acc += &row;
    }
    StateVector(acc.iter().map(|v| v / j).collect())
}

pub fn rmse(a: &[f64], b: &[f64]) -> Result<f64> {
    check_dim(a.len(), b.len())?;
    if a.is_empty() {
        return Err(Error::arg("rmse of empty vectors"));
    }
    let ss: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok((ss / a.len() as f64).sqrt())
}

/// Counter-based random stream: a ChaCha8 key from `seed` and one of 2^64
/// independent stream positions selected by `stream_id`.
#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    rng: ChaCha8Rng,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream_id);
        RngStream {
            seed,
            stream_id,
            rng,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// A fresh child stream, independent of this one and of other children.
    /// Does not advance `self`.
    pub fn fork(&self, child: u64) -> RngStream {
        let id = splitmix64(self.stream_id ^ splitmix64(child.wrapping_add(0xA5A5_A5A5)));
        RngStream::new(self.seed, id)
    }

    pub fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    /// Uniform on [0, 1).
    pub fn uniform(&mut self) -> f64 {
        use rand::Rng;
        self.rng.gen::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// `k` distinct indices from `0..n`, in sampling order.
    pub fn sample_indices(&mut self, n: usize, k: usize) -> Vec<usize> {
        rand::seq::index::sample(&mut self.rng, n, k).into_vec()
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        use rand::seq::SliceRandom;
        items.shuffle(&mut self.rng);
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }
    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }
    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.rng.fill_bytes(dest)
    }
    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> std::result::Result<(), rand::Error> {
        self.rng.try_fill_bytes(dest)
    }
}

/// `n` independent draws from N(mean, std^2).
pub fn gaussian_draw(rng: &mut RngStream, n: usize, mean: f64, std: f64) -> Result<Vec<f64>> {
    if !(std >= 0.0) || !std.is_finite() {
        return Err(Error::arg(format!("standard deviation must be >= 0, got {std}")));
    }
    if n == 0 {
        return Err(Error::arg("gaussian_draw needs n >= 1"));
    }
    Ok((0..n).map(|_| mean + std * rng.standard_normal()).collect())
}

/// Writes a trajectory with header `t,x0,...,x{d-1}`; `t` is `t0 + k * dt`.
pub fn write_trajectory<W: Write>(
    out: W,
    states: &[StateVector],
    t0: f64,
    dt: f64,
) -> Result<()> {
    let d = states
        .first()
        .map(|s| s.dim())
        .ok_or_else(|| Error::arg("empty trajectory"))?;
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["t".to_string()];
    header.extend((0..d).map(|i| format!("x{i}")));
    w.write_record(&header)?;
    for (k, s) in states.iter().enumerate() {
        check_dim(d, s.dim())?;
        let mut rec = Vec::with_capacity(d + 1);
        rec.push((t0 + k as f64 * dt).to_string());
        rec.extend(s.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a trajectory written by [`write_trajectory`]; returns times and states.
pub fn read_trajectory<R: Read>(input: R) -> Result<(Vec<f64>, Vec<StateVector>)> {
    let mut r = csv::Reader::from_reader(input);
    let header = r.headers()?.clone();
    if header.get(0) != Some("t") || header.len() < 2 {
        return Err(Error::Parse("trajectory header must start with `t,x0`".into()));
    }
    for (i, name) in header.iter().skip(1).enumerate() {
        if name != format!("x{i}") {
            return Err(Error::Parse(format!("unexpected column `{name}`")));
        }
    }
    let mut times = Vec::new();
    let mut states = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let mut vals = rec.iter().map(|f| {
            f.trim()
                .parse::<f64>()
                .map_err(|e| Error::Parse(format!("bad number `{f}`: {e}")))
        });
        times.push(vals.next().ok_or_else(|| Error::Parse("empty row".into()))??);
        let x = vals.collect::<Result<Vec<f64>>>()?;
        check_dim(header.len() - 1, x.len())?;
        states.push(StateVector::new(x)?);
    }
    Ok((times, states))
}

/// One headerless CSV row per member.
pub fn write_ensemble<W: Write>(out: W, e: &Ensemble) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    for row in e.members().rows() {
        w.write_record(row.iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_ensemble<R: Read>(input: R, time_index: usize) -> Result<Ensemble> {
    let mut r = csv::ReaderBuilder::new().has_headers(false).from_reader(input);
    let mut states = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let x = rec
            .iter()
            .map(|f| {
                f.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Parse(format!("bad number `{f}`: {e}")))
            })
            .collect::<Result<Vec<f64>>>()?;
        states.push(StateVector::new(x)?);
    }
    Ensemble::from_states(&states, time_index)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn zero_std_draws_are_the_mean() {
        let mut rng = RngStream::new(1, 0);
        assert_eq!(gaussian_draw(&mut rng, 5, 0.0, 0.0).unwrap(), vec![0.0; 5]);
        let mut rng = RngStream::new(7, 0);
        assert_eq!(gaussian_draw(&mut rng, 3, 2.0, 0.0).unwrap(), vec![2.0; 3]);
    }

    #[test]
    fn gaussian_draw_moments() {
        let mut rng = RngStream::new(1, 0);
        let x = gaussian_draw(&mut rng, 100_000, 0.0, 1.0).unwrap();
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let std = (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!(mean.abs() <= 0.01, "mean {mean}");
        assert!((0.995..=1.005).contains(&std), "std {std}");
    }

    #[test]
    fn negative_std_rejected() {
        let mut rng = RngStream::new(1, 0);
        assert!(matches!(
            gaussian_draw(&mut rng, 3, 0.0, -1.0),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn streams_reproduce_and_decorrelate() {
        let mut a = RngStream::new(42, 3);
        let mut b = RngStream::new(42, 3);
        let xa = gaussian_draw(&mut a, 1000, 0.0, 1.0).unwrap();
        let xb = gaussian_draw(&mut b, 1000, 0.0, 1.0).unwrap();
        assert_eq!(xa, xb);

        let n = 100_000;
        let mut s0 = RngStream::new(42, 0);
        let mut s1 = RngStream::new(42, 1);
        let u = gaussian_draw(&mut s0, n, 0.0, 1.0).unwrap();
        let v = gaussian_draw(&mut s1, n, 0.0, 1.0).unwrap();
        let corr = u.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>() / n as f64;
        assert!(corr.abs() < 0.05, "cross-correlation {corr}");

        let mut f0 = s0.fork(0);
        let mut f1 = s0.fork(1);
        let u = gaussian_draw(&mut f0, n, 0.0, 1.0).unwrap();
        let v = gaussian_draw(&mut f1, n, 0.0, 1.0).unwrap();
        let corr = u.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>() / n as f64;
        assert!(corr.abs() < 0.05, "forked cross-correlation {corr}");
    }

    #[test]
    fn mean_examples() {
        let e = Ensemble::new(array![[1.0, 3.0], [3.0, 1.0]], 0).unwrap();
        assert_eq!(ensemble_mean(&e).as_slice(), &[2.0, 2.0]);
        let e = Ensemble::new(array![[0.0, 0.0], [0.0, 6.0], [6.0, 0.0]], 0).unwrap();
        assert_eq!(ensemble_mean(&e).as_slice(), &[2.0, 2.0]);
        let e = Ensemble::new(array![[0.3, -1.7], [0.3, -1.7], [0.3, -1.7]], 0).unwrap();
        assert_eq!(ensemble_mean(&e).as_slice(), &[0.3, -1.7]);
    }

    #[test]
    fn ensemble_invariants() {
        assert!(Ensemble::new(array![[1.0, 2.0]], 0).is_err());
        assert!(Ensemble::new(array![[1.0, f64::NAN], [0.0, 0.0]], 0).is_err());
        assert!(StateVector::new(vec![]).is_err());
        assert!(StateVector::new(vec![f64::INFINITY]).is_err());
    }

    #[test]
    fn rmse_examples() {
        assert_eq!(rmse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert!((rmse(&[0.0, 0.0], &[3.0, 4.0]).unwrap() - 12.5f64.sqrt()).abs() < 1e-15);
        assert_eq!(rmse(&[1.0], &[0.0]).unwrap(), 1.0);
        assert!(matches!(
            rmse(&[1.0], &[0.0, 1.0]),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn trajectory_csv_round_trip() {
        let states = vec![
            StateVector::new(vec![0.1, -2.5e-17, 3.0]).unwrap(),
            StateVector::new(vec![1.0 / 3.0, 7.0, f64::MIN_POSITIVE]).unwrap(),
        ];
        let mut buf = Vec::new();
        write_trajectory(&mut buf, &states, 0.0, 0.004).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("t,x0,x1,x2\n"));
        let (times, back) = read_trajectory(&buf[..]).unwrap();
        assert_eq!(back, states);
        assert_eq!(times, vec![0.0, 0.004]);
    }

    #[test]
    fn ensemble_csv_round_trip() {
        let e = Ensemble::new(array![[1.5, -0.25], [1e-300, 2.0 / 7.0]], 4).unwrap();
        let mut buf = Vec::new();
        write_ensemble(&mut buf, &e).unwrap();
        assert_eq!(read_ensemble(&buf[..], 4).unwrap(), e);
    }

    proptest! {
        #[test]
        fn mean_is_permutation_invariant(
            rows in proptest::collection::vec(proptest::collection::vec(-1e3f64..1e3, 3), 2..8),
            seed in any::<u64>(),
        ) {
            let states: Vec<_> = rows.iter().map(|r| StateVector::new(r.clone()).unwrap()).collect();
            let mut shuffled = states.clone();
            RngStream::new(seed, 0).shuffle(&mut shuffled);
            let a = ensemble_mean(&Ensemble::from_states(&states, 0).unwrap());
            let b = ensemble_mean(&Ensemble::from_states(&shuffled, 0).unwrap());
            for (x, y) in a.iter().zip(b.iter()) {
                prop_assert!((x - y).abs() <= 1e-12 * (1.0 + x.abs()));
            }
        }

        #[test]
        fn rmse_is_a_symmetric_nonnegative_distance(
            a in proptest::collection::vec(-1e3f64..1e3, 1..16),
            shift in proptest::collection::vec(-1.0f64..1.0, 16),
        ) {
            let b: Vec<f64> = a.iter().zip(&shift).map(|(x, s)| x + s).collect();
            let ab = rmse(&a, &b).unwrap();
            prop_assert_eq!(ab, rmse(&b, &a).unwrap());
            prop_assert!(ab >= 0.0);
            prop_assert_eq!(rmse(&a, &a).unwrap(), 0.0);
            prop_assert_eq!(ab == 0.0, a == b);
        }
    }
}
