//! Wall-clock scaling of the selective scan against a quadratic attention
//! reference over one long sequence.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::funcs::softmax;
use crate::numerics::{ParamStore, Tensor2};
use crate::ssm::SelectiveBlock;

pub const WARMUPS: usize = 2;
pub const MIN_REPS: usize = 5;
/// State size of the benchmarked scan.
pub const BENCH_STATE: usize = 16;
/// Query rows per attention block, bounding the score buffer to `ROWS × L`.
const ATTN_BLOCK: usize = 256;

/// Single-head scaled dot-product self-attention with fixed projections.
#[derive(Debug, Clone)]
pub struct Attention {
    pub w_q: Tensor2,
    pub w_k: Tensor2,
    pub w_v: Tensor2,
}

impl Attention {
    pub fn random(width: usize, rng: &mut impl Rng) -> Self {
        let bound = (3.0 / width as f64).sqrt();
        let mut m = || {
            let data = (0..width * width).map(|_| rng.gen_range(-bound..bound)).collect();
            Tensor2::from_vec(width, width, data).expect("square buffer")
        };
        Self {
            w_q: m(),
            w_k: m(),
            w_v: m(),
        }
    }

    pub fn forward(&self, h: &Tensor2) -> Result<Tensor2> {
        let (l, c) = h.shape();
        if !h.is_finite() {
            return Err(Error::Validation("attention input is not finite".into()));
        }
        let q = h.matmul(&self.w_q)?;
        let kt = h.matmul(&self.w_k)?.transpose();
        let v = h.matmul(&self.w_v)?;
        let scale = 1.0 / (c as f64).sqrt();
        let mut out = Tensor2::zeros(l, c);
        for start in (0..l).step_by(ATTN_BLOCK) {
            let end = (start + ATTN_BLOCK).min(l);
            let rows: Vec<f64> = q.data()[start * c..end * c].to_vec();
            let qb = Tensor2::from_vec(end - start, c, rows)?;
            let mut s = qb.matmul(&kt)?;
            for r in 0..s.rows() {
                let p = softmax(&s.row(r).iter().map(|x| x * scale).collect::<Vec<_>>());
                s.row_mut(r).copy_from_slice(&p);
            }
            let ob = s.matmul(&v)?;
            out.data_mut()[start * c..end * c].copy_from_slice(ob.data());
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchResult {
    pub seq_len: usize,
    pub scan_ns: u128,
    pub attn_ns: u128,
    pub reps: usize,
    pub channel_width: usize,
    /// Sum of the scan output, for comparison with an untimed call.
    pub scan_checksum: f64,
}

/// The fixed kernels and input used at one sequence length.
pub struct BenchCase {
    pub store: ParamStore,
    pub block: SelectiveBlock,
    pub attention: Attention,
    pub input: Tensor2,
}

impl BenchCase {
    pub fn new(seq_len: usize, width: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let block = SelectiveBlock::new(&mut store, "bench", width, BENCH_STATE, false, &mut rng)?;
        let attention = Attention::random(width, &mut rng);
        let data = (0..seq_len * width).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let input = Tensor2::from_vec(seq_len, width, data)?;
        Ok(Self {
            store,
            block,
            attention,
            input,
        })
    }

    pub fn scan(&self) -> Result<Tensor2> {
        self.block.selective_scan(&self.store, &self.input)
    }

    pub fn attend(&self) -> Result<Tensor2> {
        self.attention.forward(&self.input)
    }
}

fn median_ns(reps: usize, mut f: impl FnMut() -> Result<Tensor2>) -> Result<(u128, Tensor2)> {
    let mut last = f()?;
    for _ in 1..WARMUPS {
        last = f()?;
    }
    let mut times = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t = Instant::now();
        last = std::hint::black_box(f()?);
        times.push(t.elapsed().as_nanos().max(1));
    }
    times.sort_unstable();
    Ok((times[reps / 2], last))
}

/// Median forward time of both kernels at each length, on one thread.
pub fn scaling_run(lengths: &[usize], width: usize, reps: usize, seed: u64) -> Result<Vec<BenchResult>> {
    if reps < MIN_REPS {
        return Err(Error::Config(format!(
            "need at least {MIN_REPS} repetitions, got {reps}"
        )));
    }
    if lengths.is_empty() || lengths.windows(2).any(|w| w[0] >= w[1]) || lengths[0] == 0 {
        return Err(Error::Config(format!(
            "lengths must be positive and ascending, got {lengths:?}"
        )));
    }
    if width == 0 {
        return Err(Error::Config("width must be positive".into()));
    }
    let mut out = Vec::new();
    for &l in lengths {
        let case = BenchCase::new(l, width, seed)?;
        let (scan_ns, y) = median_ns(reps, || case.scan())?;
        let (attn_ns, _) = median_ns(reps, || case.attend())?;
        out.push(BenchResult {
            seq_len: l,
            scan_ns,
            attn_ns,
            reps,
            channel_width: width,
            scan_checksum: y.sum(),
        });
    }
    Ok(out)
}

/// `time(L₂)/time(L₁)` for consecutive lengths, as `(L₂, scan, attention)`.
pub fn doubling_ratios(results: &[BenchResult]) -> Vec<(usize, f64, f64)> {
    results
        .windows(2)
        .map(|w| {
            (
                w[1].seq_len,
                w[1].scan_ns as f64 / w[0].scan_ns as f64,
                w[1].attn_ns as f64 / w[0].attn_ns as f64,
            )
        })
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct CsvRow {
    seq_len: usize,
    kernel: String,
    median_ns: u128,
    reps: usize,
    width: usize,
}

/// Two rows per result, kernel `scan` then `attention`.
pub fn to_csv(results: &[BenchResult]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in results {
        for (kernel, ns) in [("scan", r.scan_ns), ("attention", r.attn_ns)] {
            w.serialize(CsvRow {
                seq_len: r.seq_len,
                kernel: kernel.into(),
                median_ns: ns,
                reps: r.reps,
                width: r.channel_width,
            })
            .expect("in-memory csv write");
        }
    }
    String::from_utf8(w.into_inner().expect("in-memory csv flush")).expect("csv is utf-8")
}

/// Inverse of [`to_csv`]; checksums are not stored and come back as NaN.
pub fn from_csv(text: &str) -> Result<Vec<BenchResult>> {
    let bad = |msg: String| Error::Validation(format!("bench csv: {msg}"));
    let mut out: Vec<BenchResult> = Vec::new();
    for row in csv::Reader::from_reader(text.as_bytes()).deserialize::<CsvRow>() {
        let row = row.map_err(|e| bad(e.to_string()))?;
        let idx = match out.iter().position(|r| r.seq_len == row.seq_len) {
            Some(i) => i,
            None => {
                out.push(BenchResult {
                    seq_len: row.seq_len,
                    scan_ns: 0,
                    attn_ns: 0,
                    reps: row.reps,
                    channel_width: row.width,
                    scan_checksum: f64::NAN,
                });
                out.len() - 1
            }
        };
        match row.kernel.as_str() {
            "scan" => out[idx].scan_ns = row.median_ns,
            "attention" => out[idx].attn_ns = row.median_ns,
            k => return Err(bad(format!("unknown kernel {k:?}"))),
        }
    }
    if let Some(r) = out.iter().find(|r| r.scan_ns == 0 || r.attn_ns == 0) {
        return Err(bad(format!("length {} lacks a kernel row", r.seq_len)));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Double loop over query/key pairs.
    fn attention_oracle(a: &Attention, h: &Tensor2) -> Tensor2 {
        let (l, c) = h.shape();
        let q = h.matmul(&a.w_q).unwrap();
        let k = h.matmul(&a.w_k).unwrap();
        let v = h.matmul(&a.w_v).unwrap();
        let mut out = Tensor2::zeros(l, c);
        for i in 0..l {
            let mut w = vec![0.0; l];
            for (j, wj) in w.iter_mut().enumerate() {
                *wj = (0..c).map(|x| q.get(i, x) * k.get(j, x)).sum::<f64>() / (c as f64).sqrt();
            }
            let m = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = w.iter().map(|x| (x - m).exp()).sum();
            for (j, wj) in w.iter().enumerate() {
                for x in 0..c {
                    out.set(i, x, out.get(i, x) + (wj - m).exp() / z * v.get(j, x));
                }
            }
        }
        out
    }

    #[test]
    fn attention_matches_double_loop() {
        let case = BenchCase::new(4, 6, 3).unwrap();
        let got = case.attend().unwrap();
        assert!(got.max_abs_diff(&attention_oracle(&case.attention, &case.input)) < 1e-12);
        // blocks of rows give the same answer as one block
        let long = BenchCase::new(ATTN_BLOCK + 7, 3, 4).unwrap();
        assert!(
            long.attend()
                .unwrap()
                .max_abs_diff(&attention_oracle(&long.attention, &long.input))
                < 1e-12
        );
    }

    #[test]
    fn attention_special_cases() {
        let case = BenchCase::new(1, 5, 0).unwrap();
        let v = case.input.matmul(&case.attention.w_v).unwrap();
        assert!(case.attend().unwrap().max_abs_diff(&v) < 1e-15);
        let uniform = Tensor2::filled(6, 5, 0.3);
        let y = case.attention.forward(&uniform).unwrap();
        for r in 1..6 {
            assert_eq!(y.row(r), y.row(0));
        }
    }

    #[test]
    fn run_shape_and_checksum() {
        let res = scaling_run(&[16], 8, 5, 1).unwrap();
        assert_eq!(res.len(), 1);
        let r = &res[0];
        assert!(r.scan_ns > 0 && r.attn_ns > 0 && r.reps == 5 && r.channel_width == 8);
        assert_eq!(r.scan_checksum, BenchCase::new(16, 8, 1).unwrap().scan().unwrap().sum());
        assert!(scaling_run(&[16], 8, 4, 1).is_err());
        assert!(scaling_run(&[32, 16], 8, 5, 1).is_err());
        assert!(scaling_run(&[], 8, 5, 1).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let res = vec![
            BenchResult {
                seq_len: 256,
                scan_ns: 10,
                attn_ns: 40,
                reps: 5,
                channel_width: 128,
                scan_checksum: 1.0,
            },
            BenchResult {
                seq_len: 512,
                scan_ns: 21,
                attn_ns: 170,
                reps: 5,
                channel_width: 128,
                scan_checksum: 2.0,
            },
        ];
        let text = to_csv(&res);
        assert!(text.starts_with("seq_len,kernel,median_ns,reps,width\n256,scan,10,5,128\n"));
        let back = from_csv(&text).unwrap();
        for (a, b) in res.iter().zip(&back) {
            assert_eq!(
                (a.seq_len, a.scan_ns, a.attn_ns, a.reps, a.channel_width),
                (b.seq_len, b.scan_ns, b.attn_ns, b.reps, b.channel_width)
            );
        }
        assert_eq!(doubling_ratios(&res), vec![(512, 2.1, 4.25)]);
        assert!(from_csv("seq_len,kernel,median_ns,reps,width\n1,scan,3,5,2\n").is_err());
    }
}
