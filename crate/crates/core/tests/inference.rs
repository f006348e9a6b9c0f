mod common;

use common::{random_instr, random_obs, tiny_cfg};
use ctxp_core::backbone::*;
use ctxp_core::decoders::*;
use ctxp_core::inference::*;
use ctxp_core::numerics::{Tape, Tensor2};
use ctxp_core::obs::Observation;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn frames(cfg: &ModelConfig, n: usize, rng: &mut ChaCha8Rng) -> Vec<Observation> {
    (0..n).map(|_| random_obs(cfg, rng)).collect()
}

fn fill(w: &Weights, obs: &[Observation]) -> StreamCache {
    obs.iter().fold(StreamCache::new(w), |c, o| append_frame(c, o, w).unwrap())
}

/// Lower-block keys/values of a frames-only sequence, recomputed from scratch.
fn recompute_kv(w: &Weights, obs: &[Observation]) -> Vec<(Tensor2, Tensor2)> {
    let mut tape = Tape::new(&w.params);
    let parts: Vec<_> = obs.iter().map(|o| embed_frame_on(&mut tape, w, o).unwrap()).collect();
    let mut h = tape.concat_rows(&parts).unwrap();
    let layout = Layout { past_frames: obs.len() - 1, instr: 0, ..Layout::uncompressed(&w.cfg, 0) };
    let pos = rope_positions(&layout);
    let mask = layout.mask();
    let mut out = Vec::new();
    for b in &w.layout.blocks[..w.cfg.split_block] {
        let o = block_on(&mut tape, w, b, h, None, &mask, Some(&pos)).unwrap();
        out.push((tape.value(o.k).clone(), tape.value(o.v).clone()));
        h = o.out;
    }
    out
}

#[test]
fn pooled_count_follows_window_arithmetic() {
    let cfg = ModelConfig { history_len: 3, views: 2, ..tiny_cfg() };
    let w = Weights::init(&cfg, 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let obs = frames(&cfg, 6, &mut rng);
    let fp = cfg.frame_tokens();
    let mut c = StreamCache::new(&w);
    assert_eq!(c.pooled_count(), 0);
    assert!(c.context_mean().is_none());
    for (i, o) in obs.iter().enumerate() {
        c = append_frame(c, o, &w).unwrap();
        assert_eq!(c.pooled_count(), (i + 1).min(3) * fp);
        assert_eq!(c.len(), (i + 1).min(3));
        assert_eq!(c.last_timestep(), Some(i as u64));
    }
    assert_eq!(c.observations(), obs[3..].to_vec());
}

#[test]
fn append_rejects_wrong_shape() {
    let w = Weights::init(&tiny_cfg(), 0).unwrap();
    let bad = random_obs(&ModelConfig { image_height: 4, ..tiny_cfg() }, &mut ChaCha8Rng::seed_from_u64(0));
    assert!(append_frame(StreamCache::new(&w), &bad, &w).is_err());
}

#[test]
fn cached_kv_equals_full_recompute() {
    let cfg = ModelConfig { history_len: 4, num_blocks: 3, split_block: 2, ..tiny_cfg() };
    for seed in 0..5 {
        let w = Weights::init(&cfg, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let obs = frames(&cfg, 7, &mut rng);
        let mut c = StreamCache::new(&w);
        for m in 1..=7 {
            c = append_frame(c, &obs[m - 1], &w).unwrap();
            let window = &obs[m.saturating_sub(4)..m];
            for (b, (k, v)) in recompute_kv(&w, window).iter().enumerate() {
                let (ck, cv) = c.block_kv(b).unwrap();
                assert!(ck.max_abs_diff(k) < 1e-6 && cv.max_abs_diff(v) < 1e-6, "m={m} block {b}");
            }
        }
    }
}

#[test]
fn running_mean_equals_batch_pooling() {
    let cfg = ModelConfig { history_len: 3, ..tiny_cfg() };
    let w = Weights::init(&cfg, 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let instr = random_instr(&cfg, &mut rng);
    let mut c = StreamCache::new(&w);
    let mut seen = Vec::new();
    for _ in 0..9 {
        let o = random_obs(&cfg, &mut rng);
        seen.push(o.clone());
        c = append_frame(c, &o, &w).unwrap();
        let window = &seen[seen.len().saturating_sub(3)..];
        let cur = random_obs(&cfg, &mut rng);
        let low = forward_lower(&embed_sequence(&w, window, &cur, &instr).unwrap(), &w).unwrap();
        let want = compress_history(&low).unwrap();
        assert!(c.context_mean().unwrap().max_abs_diff(&want.0) < 1e-6);
    }
}

fn flow(seed: u64) -> Decoder {
    Decoder::Flow { steps: 4, seed }
}

#[test]
fn act_matches_oracle_on_random_episodes() {
    let cfg = ModelConfig { history_len: 7, ..ModelConfig::small() };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for seed in 0..20 {
        let w = Weights::init(&cfg, seed).unwrap();
        let m = rng.gen_range(0..=7);
        let hist = frames(&cfg, m, &mut rng);
        let cur = random_obs(&cfg, &mut rng);
        let instr = random_instr(&cfg, &mut rng);
        let c = fill(&w, &hist);
        let a = act(&c, &cur, &instr, &flow(seed), &w).unwrap();
        let b = oracle_act(&hist, &cur, &instr, &flow(seed), &w).unwrap();
        assert!(a.values.max_abs_diff(&b.values) < 1e-5, "seed {seed}, {m} frames");
    }
}

#[test]
fn act_matches_oracle_when_compressing_after_the_last_block() {
    let cfg = ModelConfig { num_blocks: 2, split_block: 2, history_len: 3, ..ModelConfig::small() };
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for seed in 0..5 {
        let w = Weights::init(&cfg, seed).unwrap();
        let hist = frames(&cfg, 3, &mut rng);
        let cur = random_obs(&cfg, &mut rng);
        let instr = random_instr(&cfg, &mut rng);
        let a = act(&fill(&w, &hist), &cur, &instr, &flow(seed), &w).unwrap();
        let b = oracle_act(&hist, &cur, &instr, &flow(seed), &w).unwrap();
        assert!(a.values.max_abs_diff(&b.values) < 1e-5, "seed {seed}");
    }
}

#[test]
fn act_matches_oracle_after_evictions() {
    let cfg = ModelConfig { history_len: 3, ..ModelConfig::small() };
    let w = Weights::init(&cfg, 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let obs = frames(&cfg, 10, &mut rng);
    let instr = random_instr(&cfg, &mut rng);
    let mut c = StreamCache::new(&w);
    for t in 0..obs.len() {
        let hist = &obs[t.saturating_sub(3)..t];
        let a = act(&c, &obs[t], &instr, &flow(t as u64), &w).unwrap();
        let b = oracle_act(hist, &obs[t], &instr, &flow(t as u64), &w).unwrap();
        assert!(a.values.max_abs_diff(&b.values) < 1e-5, "t={t}");
        c = append_frame(c, &obs[t], &w).unwrap();
    }
}

#[test]
fn act_matches_oracle_with_ar_decoder() {
    let cfg = ModelConfig { decoder: DecoderKind::Autoregressive, history_len: 3, ..tiny_cfg() };
    let mut tok = FastTokenizer::new(2.0, 8, cfg.instr_vocab).unwrap();
    tok.merges = bpe_train(&[vec![4, 4, 4, 4, 3, 5, 3, 5]], 3, 8);
    let dec = Decoder::Autoregressive { tokenizer: tok, max_len: 10 };
    let mut compared = 0;
    for seed in 0..20 {
        let w = Weights::init(&cfg, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hist = frames(&cfg, 3, &mut rng);
        let cur = random_obs(&cfg, &mut rng);
        let instr = random_instr(&cfg, &mut rng);
        let a = act(&fill(&w, &hist), &cur, &instr, &dec, &w);
        let b = oracle_act(&hist, &cur, &instr, &dec, &w);
        match (a, b) {
            (Ok(a), Ok(b)) => {
                assert!(a.values.max_abs_diff(&b.values) < 1e-5);
                compared += 1;
            }
            (Err(_), Err(_)) => {}
            (a, b) => panic!("seed {seed}: {a:?} vs {b:?}"),
        }
    }
    assert!(compared > 0);
}

#[test]
fn no_history_act_equals_single_frame_forward() {
    let cfg = ModelConfig { history_len: 0, ..ModelConfig::small() };
    let w = Weights::init(&cfg, 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cur = random_obs(&cfg, &mut rng);
    let instr = random_instr(&cfg, &mut rng);
    let c = append_frame(StreamCache::new(&w), &cur, &w).unwrap();
    assert!(c.is_empty());
    let a = act(&c, &cur, &instr, &flow(1), &w).unwrap();
    let b = oracle_act(&[], &cur, &instr, &flow(1), &w).unwrap();
    assert_eq!(a, b);
}

#[test]
fn act_is_deterministic_and_oracle_is_stateless() {
    let cfg = ModelConfig { history_len: 2, ..ModelConfig::small() };
    let w = Weights::init(&cfg, 6).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let hist = frames(&cfg, 2, &mut rng);
    let cur = random_obs(&cfg, &mut rng);
    let instr = random_instr(&cfg, &mut rng);
    let c = fill(&w, &hist);
    assert_eq!(act(&c, &cur, &instr, &flow(3), &w).unwrap(), act(&c, &cur, &instr, &flow(3), &w).unwrap());
    let first = oracle_act(&hist, &cur, &instr, &flow(3), &w).unwrap();
    let _ = oracle_act(&frames(&cfg, 2, &mut rng), &cur, &instr, &flow(3), &w).unwrap();
    assert_eq!(oracle_act(&hist, &cur, &instr, &flow(3), &w).unwrap(), first);
}

#[test]
fn streaming_policy_pads_with_first_frame() {
    let cfg = ModelConfig { history_len: 3, ..ModelConfig::small() };
    let w = Weights::init(&cfg, 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let obs = frames(&cfg, 6, &mut rng);
    let instr = random_instr(&cfg, &mut rng);
    let mut p = StreamingPolicy::new(&w, flow(10));
    for t in 0..obs.len() {
        let got = p.step(&obs[t], &instr).unwrap();
        let hist: Vec<Observation> = (0..3).map(|j| obs[(t + j).saturating_sub(3)].clone()).collect();
        let want = oracle_act(&hist, &obs[t], &instr, &flow(10 + t as u64), &w).unwrap();
        assert!(got.values.max_abs_diff(&want.values) < 1e-5, "t={t}");
    }
}

#[test]
fn bench_reports_layout_token_counts() {
    let cfg = ModelConfig::default();
    let w = Weights::init(&cfg, 0).unwrap();
    let rows = bench(&w, &flow(0), &BenchMode::ALL, 10, 0).unwrap();
    let keys: Vec<u64> = rows.iter().map(|r| r.key_tokens).collect();
    assert_eq!(keys, vec![1088, 422, 422]);
    // the cached act runs only the current frame and instruction through the lower blocks
    let ft = cfg.frame_tokens() + cfg.instr_len;
    assert_eq!(rows[2].stats.query_tokens as usize, 2 * ft + 6 * (1 + ft));
    assert_eq!(rows[1].stats.query_tokens as usize, 2 * 136 + 6 * (1 + ft));
    assert!(rows[0].attn_macs > rows[1].attn_macs && rows[1].attn_macs > rows[2].attn_macs);
    let csv = bench_csv(&rows);
    assert!(csv.starts_with("mode,median_ms,p90_ms,key_tokens,attn_macs\n"));
    assert_eq!(csv.lines().count(), 4);
    assert!(bench(&w, &flow(0), &BenchMode::ALL, 5, 0).is_err());
}
