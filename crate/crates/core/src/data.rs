//! Synthetic unpaired pools: `C ~ N(mu_c, sigma_c)` and `V = concat(c, r)`
//! with `r ~ N(mu_r, sigma_r)`.
//!
//! Training code sees only [`TrainingPools`]. The factors behind each `V`
//! sample are kept in [`Dataset`] and in the evaluation-only [`Holdout`].

use std::io::{Read, Write};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::nn::Dims;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub dims: Dims,
    pub mu_c: f64,
    pub sigma_c: f64,
    pub mu_r: f64,
    pub sigma_r: f64,
}

impl Default for DomainSpec {
    fn default() -> Self {
        Self {
            dims: Dims::default(),
            mu_c: 2.0,
            sigma_c: 1.0,
            mu_r: -2.0,
            sigma_r: 1.0,
        }
    }
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        Dims::new(self.dims.dim_c, self.dims.dim_r)?;
        for (field, s) in [("sigma_c", self.sigma_c), ("sigma_r", self.sigma_r)] {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::Config {
                    field: field.into(),
                    reason: format!("must be positive, got {s}"),
                });
            }
        }
        for (field, m) in [("mu_c", self.mu_c), ("mu_r", self.mu_r)] {
            if !m.is_finite() {
                return Err(Error::Config {
                    field: field.into(),
                    reason: "must be finite".into(),
                });
            }
        }
        Ok(())
    }

    fn draw<R: Rng + ?Sized>(&self, rng: &mut R, rows: usize, width: usize, mu: f64, sigma: f64) -> Vec<f64> {
        let n = Normal::new(mu, sigma).expect("validated sigma");
        (0..rows * width).map(|_| n.sample(rng)).collect()
    }

    fn draw_c<R: Rng + ?Sized>(&self, rng: &mut R, rows: usize) -> Tensor {
        Tensor::from_rows(
            rows,
            self.dims.dim_c,
            self.draw(rng, rows, self.dims.dim_c, self.mu_c, self.sigma_c),
        )
    }

    /// Entangled samples with their factors, drawn row by row as `c` then `r`.
    fn draw_v<R: Rng + ?Sized>(&self, rng: &mut R, rows: usize) -> (Tensor, Tensor, Tensor) {
        let (dc, dr) = (self.dims.dim_c, self.dims.dim_r);
        let (mut c, mut r, mut v) = (
            Vec::with_capacity(rows * dc),
            Vec::with_capacity(rows * dr),
            Vec::with_capacity(rows * (dc + dr)),
        );
        for _ in 0..rows {
            let ci = self.draw(rng, 1, dc, self.mu_c, self.sigma_c);
            let ri = self.draw(rng, 1, dr, self.mu_r, self.sigma_r);
            v.extend_from_slice(&ci);
            v.extend_from_slice(&ri);
            c.extend(ci);
            r.extend(ri);
        }
        (
            Tensor::from_rows(rows, dc + dr, v),
            Tensor::from_rows(rows, dc, c),
            Tensor::from_rows(rows, dr, r),
        )
    }
}

/// Which training pool to sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainPool {
    C,
    V,
}

impl FromStr for TrainPool {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "c" | "C" => Ok(Self::C),
            "v" | "V" => Ok(Self::V),
            other => Err(Error::Config {
                field: "pool".into(),
                reason: format!("unknown pool `{other}` (expected C or V)"),
            }),
        }
    }
}

fn gather(pool: &Tensor, batch: usize, rng: &mut impl Rng) -> Result<Tensor> {
    let n = pool.rows();
    if batch == 0 || batch > n {
        return Err(Error::Config {
            field: "batch".into(),
            reason: format!("batch {batch} must be in 1..={n}"),
        });
    }
    let cols = pool.cols();
    let mut data = Vec::with_capacity(batch * cols);
    for _ in 0..batch {
        data.extend_from_slice(pool.row(rng.random_range(0..n)));
    }
    Ok(Tensor::from_rows(batch, cols, data))
}

/// The unpaired `C` and `V` samples. No hidden factors are reachable from here.
#[derive(Debug, Clone)]
pub struct TrainingPools {
    spec: DomainSpec,
    c: Tensor,
    v: Tensor,
    on_the_fly: bool,
}

impl TrainingPools {
    pub fn spec(&self) -> &DomainSpec {
        &self.spec
    }

    pub fn c(&self) -> &Tensor {
        &self.c
    }

    pub fn v(&self) -> &Tensor {
        &self.v
    }

    /// Fresh draws from the distribution instead of resampling the fixed pools.
    pub fn set_on_the_fly(&mut self, on: bool) {
        self.on_the_fly = on;
    }

    /// Uniform sampling with replacement from the chosen pool.
    pub fn sample(&self, pool: TrainPool, batch: usize, rng: &mut impl Rng) -> Result<Tensor> {
        if self.on_the_fly {
            if batch == 0 {
                return Err(Error::Config {
                    field: "batch".into(),
                    reason: "batch must be at least 1".into(),
                });
            }
            return Ok(match pool {
                TrainPool::C => self.spec.draw_c(rng, batch),
                TrainPool::V => self.spec.draw_v(rng, batch).0,
            });
        }
        match pool {
            TrainPool::C => gather(&self.c, batch, rng),
            TrainPool::V => gather(&self.v, batch, rng),
        }
    }
}

/// Held-out `V` samples with their true factors, for evaluation only.
#[derive(Debug, Clone)]
pub struct Holdout {
    pub v: Tensor,
    pub c_true: Tensor,
    pub r_true: Tensor,
}

impl Holdout {
    pub fn len(&self) -> usize {
        self.v.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A batch of held-out samples with their factors `(v, c_true, r_true)`.
    pub fn sample(&self, batch: usize, rng: &mut impl Rng) -> Result<(Tensor, Tensor, Tensor)> {
        let n = self.len();
        if batch == 0 || batch > n {
            return Err(Error::Config {
                field: "batch".into(),
                reason: format!("batch {batch} must be in 1..={n}"),
            });
        }
        let idx: Vec<usize> = (0..batch).map(|_| rng.random_range(0..n)).collect();
        let pick = |t: &Tensor| {
            let cols = t.cols();
            Tensor::from_rows(batch, cols, idx.iter().flat_map(|&i| t.row(i).to_vec()).collect())
        };
        Ok((pick(&self.v), pick(&self.c_true), pick(&self.r_true)))
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    train: TrainingPools,
    v_c_true: Tensor,
    v_r_true: Tensor,
    holdout: Holdout,
}

pub const DEFAULT_POOL: usize = 10_000;
pub const DEFAULT_HOLDOUT: usize = 2_048;

/// Draws `n` `C` samples, `m` training `V` samples and `e` held-out `V` samples,
/// in that order, from one seeded stream.
pub fn generate(spec: &DomainSpec, n: usize, m: usize, e: usize, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    for (field, k) in [("n", n), ("m", m), ("e", e)] {
        if k == 0 {
            return Err(Error::Config {
                field: field.into(),
                reason: "pool sizes must be at least 1".into(),
            });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = spec.draw_c(&mut rng, n);
    let (v, v_c_true, v_r_true) = spec.draw_v(&mut rng, m);
    let (hv, hc, hr) = spec.draw_v(&mut rng, e);
    Ok(Dataset {
        train: TrainingPools {
            spec: *spec,
            c,
            v,
            on_the_fly: false,
        },
        v_c_true,
        v_r_true,
        holdout: Holdout {
            v: hv,
            c_true: hc,
            r_true: hr,
        },
    })
}

impl Dataset {
    pub fn spec(&self) -> &DomainSpec {
        &self.train.spec
    }

    pub fn training(&self) -> &TrainingPools {
        &self.train
    }

    pub fn training_mut(&mut self) -> &mut TrainingPools {
        &mut self.train
    }

    pub fn holdout(&self) -> &Holdout {
        &self.holdout
    }

    /// True factors `(c, r)` of the training `V` pool. Not for training code.
    pub fn v_pool_truth(&self) -> (&Tensor, &Tensor) {
        (&self.v_c_true, &self.v_r_true)
    }

    /// Writes three CSV tables: the `C` pool (`c0..`), and the training and
    /// held-out `V` pools (`v0.., c0.., r0..`).
    pub fn write_csv<W: Write>(&self, c_out: W, v_out: W, holdout_out: W) -> Result<()> {
        let dims = self.spec().dims;
        let names = |p: &'static str, k: usize| (0..k).map(move |i| format!("{p}{i}"));
        let mut w = csv::Writer::from_writer(c_out);
        w.write_record(names("c", dims.dim_c)).map_err(csv_err)?;
        for i in 0..self.train.c.rows() {
            w.write_record(self.train.c.row(i).iter().map(f64::to_string))
                .map_err(csv_err)?;
        }
        w.flush()?;

        let v_header: Vec<String> = names("v", dims.dim_v())
            .chain(names("c", dims.dim_c))
            .chain(names("r", dims.dim_r))
            .collect();
        for (out, (v, c, r)) in [
            (v_out, (&self.train.v, &self.v_c_true, &self.v_r_true)),
            (
                holdout_out,
                (&self.holdout.v, &self.holdout.c_true, &self.holdout.r_true),
            ),
        ] {
            let mut w = csv::Writer::from_writer(out);
            w.write_record(&v_header).map_err(csv_err)?;
            for i in 0..v.rows() {
                let row = v.row(i).iter().chain(c.row(i)).chain(r.row(i));
                w.write_record(row.map(f64::to_string)).map_err(csv_err)?;
            }
            w.flush()?;
        }
        Ok(())
    }

    /// Reads tables written by [`Dataset::write_csv`].
    pub fn read_csv<R: Read>(spec: &DomainSpec, c_in: R, v_in: R, holdout_in: R) -> Result<Self> {
        spec.validate()?;
        let dims = spec.dims;
        let read = |input: R, width: usize| -> Result<Vec<Vec<f64>>> {
            let mut rdr = csv::Reader::from_reader(input);
            let mut rows = Vec::new();
            for rec in rdr.records() {
                let rec = rec.map_err(csv_err)?;
                if rec.len() != width {
                    return Err(Error::Config {
                        field: "dataset csv".into(),
                        reason: format!("expected {width} columns, got {}", rec.len()),
                    });
                }
                let row = rec
                    .iter()
                    .map(|s| {
                        s.parse::<f64>().map_err(|e| Error::Config {
                            field: "dataset csv".into(),
                            reason: format!("`{s}`: {e}"),
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                rows.push(row);
            }
            if rows.is_empty() {
                return Err(Error::Config {
                    field: "dataset csv".into(),
                    reason: "no rows".into(),
                });
            }
            Ok(rows)
        };
        let to_tensor = |rows: &[Vec<f64>], range: std::ops::Range<usize>| {
            let w = range.len();
            Tensor::from_rows(
                rows.len(),
                w,
                rows.iter().flat_map(|r| r[range.clone()].to_vec()).collect(),
            )
        };
        let (dc, dr, dv) = (dims.dim_c, dims.dim_r, dims.dim_v());
        let c_rows = read(c_in, dc)?;
        let v_rows = read(v_in, dv + dc + dr)?;
        let h_rows = read(holdout_in, dv + dc + dr)?;
        Ok(Self {
            train: TrainingPools {
                spec: *spec,
                c: to_tensor(&c_rows, 0..dc),
                v: to_tensor(&v_rows, 0..dv),
                on_the_fly: false,
            },
            v_c_true: to_tensor(&v_rows, dv..dv + dc),
            v_r_true: to_tensor(&v_rows, dv + dc..dv + dc + dr),
            holdout: Holdout {
                v: to_tensor(&h_rows, 0..dv),
                c_true: to_tensor(&h_rows, dv..dv + dc),
                r_true: to_tensor(&h_rows, dv + dc..dv + dc + dr),
            },
        })
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn moments(x: &[f64]) -> (f64, f64) {
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (mean, var.sqrt())
    }

    #[test]
    fn c_pool_moments() {
        // standard error of the mean is 0.01 at n = 10,000; of the std ~0.007
        let ds = generate(&DomainSpec::default(), 10_000, 10, 10, 3).unwrap();
        let (m, s) = moments(ds.training().c().data());
        assert!((m - 2.0).abs() < 0.05, "mean {m}");
        assert!((s - 1.0).abs() < 0.05, "std {s}");
    }

    #[test]
    fn residual_moments() {
        let ds = generate(&DomainSpec::default(), 10, 10_000, 10, 4).unwrap();
        let (m, s) = moments(ds.v_pool_truth().1.data());
        assert!((m + 2.0).abs() < 0.05, "mean {m}");
        assert!((s - 1.0).abs() < 0.05, "std {s}");
    }

    #[test]
    fn v_is_concatenation_of_truth() {
        let spec = DomainSpec {
            dims: Dims::new(2, 3).unwrap(),
            ..Default::default()
        };
        let ds = generate(&spec, 50, 200, 60, 1).unwrap();
        let (c, r) = ds.v_pool_truth();
        for i in 0..200 {
            let joined: Vec<f64> = c.row(i).iter().chain(r.row(i)).copied().collect();
            assert_eq!(ds.training().v().row(i), &joined[..]);
        }
        let h = ds.holdout();
        for i in 0..60 {
            let joined: Vec<f64> = h.c_true.row(i).iter().chain(h.r_true.row(i)).copied().collect();
            assert_eq!(h.v.row(i), &joined[..]);
        }
    }

    #[test]
    fn seeds_give_disjoint_values() {
        let a = generate(&DomainSpec::default(), 100, 100, 100, 1).unwrap();
        let b = generate(&DomainSpec::default(), 100, 100, 100, 2).unwrap();
        let av = a.training().c().data();
        assert!(b.training().c().data().iter().all(|x| !av.contains(x)));
        let again = generate(&DomainSpec::default(), 100, 100, 100, 1).unwrap();
        assert_eq!(again.training().v(), a.training().v());
    }

    #[test]
    fn batch_shapes_and_replay() {
        let ds = generate(&DomainSpec::default(), 1000, 1000, 100, 0).unwrap();
        let draw = || {
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            ds.training().sample(TrainPool::V, 128, &mut rng).unwrap()
        };
        let b = draw();
        assert_eq!(b.shape(), &[128, 2]);
        assert_eq!(b, draw());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(
            ds.training().sample(TrainPool::C, 128, &mut rng).unwrap().shape(),
            &[128, 1]
        );
        let (v, c, r) = ds.holdout().sample(16, &mut rng).unwrap();
        assert_eq!(
            (v.shape(), c.shape(), r.shape()),
            (&[16, 2][..], &[16, 1][..], &[16, 1][..])
        );
    }

    #[test]
    fn oversized_batch_and_unknown_pool_error() {
        let ds = generate(&DomainSpec::default(), 10, 10, 10, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(ds.training().sample(TrainPool::C, 11, &mut rng).is_err());
        assert!("holdout".parse::<TrainPool>().is_err());
        assert_eq!("V".parse::<TrainPool>().unwrap(), TrainPool::V);
    }

    #[test]
    fn on_the_fly_draws_fresh_samples() {
        let mut ds = generate(&DomainSpec::default(), 10, 10, 10, 0).unwrap();
        ds.training_mut().set_on_the_fly(true);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let b = ds.training().sample(TrainPool::V, 64, &mut rng).unwrap();
        assert_eq!(b.shape(), &[64, 2]);
        let pool = ds.training().v().data();
        assert!(b.data().iter().all(|x| !pool.contains(x)));
    }

    #[test]
    fn invalid_spec_rejected() {
        let spec = DomainSpec {
            sigma_r: 0.0,
            ..Default::default()
        };
        assert!(generate(&spec, 1, 1, 1, 0).is_err());
        assert!(generate(&DomainSpec::default(), 0, 1, 1, 0).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let ds = generate(&DomainSpec::default(), 20, 30, 15, 9).unwrap();
        let (mut c, mut v, mut h) = (Vec::new(), Vec::new(), Vec::new());
        ds.write_csv(&mut c, &mut v, &mut h).unwrap();
        assert!(String::from_utf8_lossy(&v).starts_with("v0,v1,c0,r0\n"));
        assert!(String::from_utf8_lossy(&c).starts_with("c0\n"));
        let back = Dataset::read_csv(ds.spec(), &c[..], &v[..], &h[..]).unwrap();
        assert_eq!(back.training().c(), ds.training().c());
        assert_eq!(back.training().v(), ds.training().v());
        assert_eq!(back.v_pool_truth(), ds.v_pool_truth());
        assert_eq!(back.holdout().r_true, ds.holdout().r_true);
    }
}
