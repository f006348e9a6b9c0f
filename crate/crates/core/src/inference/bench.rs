use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::Weights;
use crate::decoders::Decoder;
use crate::error::{Error, Result};
use crate::numerics::AttnStats;
use crate::obs::{Image, Instruction, Observation};

use super::cache::{act_counted, append_frame, StreamCache};
use super::{oracle_act_counted, uncompressed_act_counted};

pub const BENCH_CSV_HEADER: &str = "mode,median_ms,p90_ms,key_tokens,attn_macs";
const WARMUP: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BenchMode {
    Uncompressed,
    Compressed,
    Cached,
}

impl BenchMode {
    pub const ALL: [BenchMode; 3] = [BenchMode::Uncompressed, BenchMode::Compressed, BenchMode::Cached];
}

impl fmt::Display for BenchMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BenchMode::Uncompressed => "uncompressed",
            BenchMode::Compressed => "compressed",
            BenchMode::Cached => "compressed+cached",
        })
    }
}

impl FromStr for BenchMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uncompressed" => Ok(BenchMode::Uncompressed),
            "compressed" => Ok(BenchMode::Compressed),
            "compressed+cached" | "cached" => Ok(BenchMode::Cached),
            _ => Err(Error::Invalid(format!("unknown bench mode '{s}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub mode: BenchMode,
    pub median_ms: f64,
    pub p90_ms: f64,
    /// Attention key tokens summed over every attention call of one act.
    pub key_tokens: u64,
    pub attn_macs: u64,
    /// Full counters of one act.
    pub stats: AttnStats,
}

fn random_frame<R: Rng>(w: &Weights, rng: &mut R) -> Observation {
    let c = &w.cfg;
    let n = c.image_height * c.image_width * c.image_channels;
    Observation {
        views: (0..c.views)
            .map(|_| Image { height: c.image_height, width: c.image_width, channels: c.image_channels, data: (0..n).map(|_| rng.gen()).collect() })
            .collect(),
    }
}

fn percentile(sorted: &[f64], p: f64) -> f64 {
    let idx = ((p * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len()) - 1;
    sorted[idx]
}

/// Times one act per trial for each mode on a random full-history episode.
/// The cached mode builds its cache beforehand; only `act` is timed.
pub fn bench(w: &Weights, dec: &Decoder, modes: &[BenchMode], trials: usize, seed: u64) -> Result<Vec<BenchRow>> {
    if trials < 10 {
        return Err(Error::Invalid(format!("bench needs at least 10 trials, got {trials}")));
    }
    let cfg = &w.cfg;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let history: Vec<Observation> = (0..cfg.history_len).map(|_| random_frame(w, &mut rng)).collect();
    let current = random_frame(w, &mut rng);
    let instr = Instruction::new((0..cfg.instr_len).map(|_| rng.gen_range(0..cfg.instr_vocab)).collect());
    let mut cache = StreamCache::new(w);
    for o in &history {
        cache = append_frame(cache, o, w)?;
    }
    let run = |mode: BenchMode| -> Result<AttnStats> {
        Ok(match mode {
            BenchMode::Uncompressed => uncompressed_act_counted(&history, &current, &instr, dec, w)?.1,
            BenchMode::Compressed => oracle_act_counted(&history, &current, &instr, dec, w)?.1,
            BenchMode::Cached => act_counted(&cache, &current, &instr, dec, w)?.1,
        })
    };
    let mut rows = Vec::with_capacity(modes.len());
    for &mode in modes {
        for _ in 0..WARMUP {
            run(mode)?;
        }
        let mut times = Vec::with_capacity(trials);
        let mut stats = AttnStats::default();
        for _ in 0..trials {
            let t0 = Instant::now();
            stats = run(mode)?;
            times.push(t0.elapsed().as_secs_f64() * 1e3);
        }
        times.sort_by(f64::total_cmp);
        rows.push(BenchRow {
            mode,
            median_ms: percentile(&times, 0.5),
            p90_ms: percentile(&times, 0.9),
            key_tokens: stats.key_tokens,
            attn_macs: stats.macs,
            stats,
        });
    }
    Ok(rows)
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut s = format!("{BENCH_CSV_HEADER}\n");
    for r in rows {
        s.push_str(&format!("{},{:.3},{:.3},{},{}\n", r.mode, r.median_ms, r.p90_ms, r.key_tokens, r.attn_macs));
    }
    s
}
