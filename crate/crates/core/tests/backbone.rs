mod common;

use common::{random_instr, random_obs, tiny_cfg};
use ctxp_core::backbone::*;
use ctxp_core::numerics::{gelu, multi_head_attention, rms_norm, rope, AttnMask, Tape, Tensor2};
use ctxp_core::obs::{Image, Observation};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn zero_image(cfg: &ModelConfig) -> Observation {
    Observation { views: vec![Image::new(cfg.image_height, cfg.image_width, cfg.image_channels); cfg.views] }
}

#[test]
fn zero_image_embeds_to_positional_plus_view() {
    let cfg = ModelConfig { views: 2, ..ModelConfig::small() };
    let w = Weights::init(&cfg, 1).unwrap();
    let e = embed_observation(&zero_image(&cfg), &w).unwrap();
    let p = cfg.patch_tokens();
    let pos = w.get(w.layout.patch_pos);
    let view = w.get(w.layout.view_emb);
    for v in 0..2 {
        for i in 0..p {
            for c in 0..cfg.hidden_dim {
                let want = pos.get(i, c) + view.get(v, c);
                assert!((e.get(v * p + i, c) - want).abs() < 1e-15);
            }
        }
    }
}

#[test]
fn identical_views_differ_by_view_embedding() {
    let cfg = ModelConfig { views: 2, ..ModelConfig::small() };
    let w = Weights::init(&cfg, 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let one = random_obs(&ModelConfig { views: 1, ..cfg.clone() }, &mut rng);
    let obs = Observation { views: vec![one.views[0].clone(), one.views[0].clone()] };
    let e = embed_observation(&obs, &w).unwrap();
    let view = w.get(w.layout.view_emb);
    let p = cfg.patch_tokens();
    for i in 0..p {
        for c in 0..cfg.hidden_dim {
            let diff = e.get(p + i, c) - e.get(i, c);
            assert!((diff - (view.get(1, c) - view.get(0, c))).abs() < 1e-12);
        }
    }
}

#[test]
fn embedding_matches_naive_patch_gather() {
    let cfg = ModelConfig { image_channels: 3, image_height: 16, image_width: 24, patch_size: 8, ..ModelConfig::small() };
    let w = Weights::init(&cfg, 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let obs = random_obs(&cfg, &mut rng);
    let e = embed_observation(&obs, &w).unwrap();
    let img = &obs.views[0];
    let pw = w.get(w.layout.patch_w);
    let pb = w.get(w.layout.patch_b);
    let pos = w.get(w.layout.patch_pos);
    let view = w.get(w.layout.view_emb);
    let gw = cfg.image_width / 8;
    for p in 0..cfg.patch_tokens() {
        let (py, px) = (p / gw, p % gw);
        let mut vec = Vec::new();
        for y in 0..8 {
            for x in 0..8 {
                for c in 0..3 {
                    vec.push(f64::from(img.get(py * 8 + y, px * 8 + x, c)) / 255.0);
                }
            }
        }
        for j in 0..cfg.hidden_dim {
            let mut s = pb.get(0, j) + pos.get(p, j) + view.get(0, j);
            for (i, v) in vec.iter().enumerate() {
                s += v * pw.get(i, j);
            }
            assert!((e.get(p, j) - s).abs() < 1e-12);
        }
    }
}

#[test]
fn embedding_rejects_wrong_shape() {
    let cfg = ModelConfig::small();
    let w = Weights::init(&cfg, 1).unwrap();
    let obs = Observation::single(Image::new(16, 32, 1));
    assert!(embed_observation(&obs, &w).is_err());
}

fn zero_block_weights(cfg: &ModelConfig) -> Weights {
    let mut w = Weights::init(cfg, 3).unwrap();
    w.zero_blocks();
    w
}

#[test]
fn zero_blocks_are_identity() {
    let cfg = ModelConfig::small();
    let w = zero_block_weights(&cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let hist: Vec<_> = (0..cfg.history_len).map(|_| random_obs(&cfg, &mut rng)).collect();
    let cur = random_obs(&cfg, &mut rng);
    let instr = random_instr(&cfg, &mut rng);
    let seq = embed_sequence(&w, &hist, &cur, &instr).unwrap();
    let low = forward_lower(&seq, &w).unwrap();
    assert_eq!(low.block, cfg.split_block);
    assert!(low.acts.max_abs_diff(&seq.acts) < 1e-15);

    let rest_rows = low.acts.slice_rows(low.layout.past_rows(), low.layout.total_rows() - low.layout.past_rows());
    let rest = HiddenStates::new(cfg.split_block, Layout::compressed(&cfg, false), rest_rows.clone()).unwrap();
    let up = forward_upper(None, &rest, &w).unwrap();
    assert!(up.acts.max_abs_diff(&rest_rows) < 1e-15);
}

/// Step-by-step block written directly against the kernels.
fn oracle_block(w: &Weights, b: &BlockIds, x: &Tensor2, mask: &AttnMask, pos: Option<&[f64]>) -> Tensor2 {
    let cfg = &w.cfg;
    let (h, _) = rms_norm(x, w.get(b.norm1).data()).unwrap();
    let mut q = h.matmul(w.get(b.wq)).unwrap();
    let mut k = h.matmul(w.get(b.wk)).unwrap();
    let v = h.matmul(w.get(b.wv)).unwrap();
    if let Some(p) = pos {
        q = rope(&q, p, cfg.heads, cfg.rope_base, 1.0).unwrap();
        k = rope(&k, p, cfg.heads, cfg.rope_base, 1.0).unwrap();
    }
    let (a, _) = multi_head_attention(&q, &k, &v, Some(mask), cfg.heads).unwrap();
    let o = a.matmul(w.get(b.wo)).unwrap().add_row(w.get(b.bo)).unwrap();
    let x1 = x.add(&o).unwrap();
    let (h2, _) = rms_norm(&x1, w.get(b.norm2).data()).unwrap();
    let m = h2.matmul(w.get(b.w1)).unwrap().add_row(w.get(b.b1)).unwrap().map(gelu);
    let m = m.matmul(w.get(b.w2)).unwrap().add_row(w.get(b.b2)).unwrap();
    x1.add(&m).unwrap()
}

#[test]
fn lower_blocks_match_compositional_oracle() {
    let cfg = ModelConfig { num_blocks: 3, split_block: 2, ..tiny_cfg() };
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for seed in 0..5 {
        let w = Weights::init(&cfg, seed).unwrap();
        let hist: Vec<_> = (0..2).map(|_| random_obs(&cfg, &mut rng)).collect();
        let cur = random_obs(&cfg, &mut rng);
        let instr = random_instr(&cfg, &mut rng);
        let seq = embed_sequence(&w, &hist, &cur, &instr).unwrap();
        let got = forward_lower(&seq, &w).unwrap();
        let mask = seq.layout.mask();
        let pos = rope_positions(&seq.layout);
        let mut x = seq.acts.clone();
        for b in &w.layout.blocks[..2] {
            x = oracle_block(&w, b, &x, &mask, Some(&pos));
        }
        assert!(got.acts.max_abs_diff(&x) < 1e-12);
    }
}

#[test]
fn end_to_end_matches_splice_oracle() {
    let cfg = ModelConfig { num_blocks: 4, split_block: 2, ..tiny_cfg() };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for seed in 0..5 {
        let w = Weights::init(&cfg, seed).unwrap();
        let hist: Vec<_> = (0..cfg.history_len).map(|_| random_obs(&cfg, &mut rng)).collect();
        let cur = random_obs(&cfg, &mut rng);
        let instr = random_instr(&cfg, &mut rng);
        let got = forward_features(&w, &hist, &cur, &instr).unwrap();

        let low = forward_lower(&embed_sequence(&w, &hist, &cur, &instr).unwrap(), &w).unwrap();
        let past = low.layout.past_rows();
        let mut ctx = vec![0.0; cfg.hidden_dim];
        for r in 0..past {
            for (c, v) in ctx.iter_mut().zip(low.acts.row(r)) {
                *c += v / past as f64;
            }
        }
        let mut rows = vec![ctx.iter().zip(w.get(w.layout.ctx_emb).data()).map(|(a, b)| a + b).collect::<Vec<_>>()];
        for r in past..low.acts.rows() {
            rows.push(low.acts.row(r).to_vec());
        }
        let mut x = Tensor2::from_rows(&rows).unwrap();
        let layout = Layout::compressed(&cfg, true);
        let mask = layout.mask();
        for b in &w.layout.blocks[2..] {
            x = oracle_block(&w, b, &x, &mask, None);
        }
        assert_eq!(got.layout, layout);
        assert!(got.acts.max_abs_diff(&x) < 1e-12);
    }
}

#[test]
fn compress_history_examples() {
    let cfg = ModelConfig { history_len: 2, views: 1, image_height: 16, patch_size: 16, hidden_dim: 2, heads: 1, instr_len: 0, ..ModelConfig::small() };
    assert_eq!(cfg.patch_tokens(), 2);
    let layout = Layout::uncompressed(&cfg, 2);
    let acts = Tensor2::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0], vec![7.0, 8.0], vec![0.0, 0.0], vec![0.0, 0.0]]).unwrap();
    let h = HiddenStates::new(2, layout, acts.clone()).unwrap();
    assert_eq!(compress_history(&h).unwrap().0.data(), &[4.0, 5.0]);

    let permuted = Tensor2::from_rows(&[vec![7.0, 8.0], vec![1.0, 2.0], vec![5.0, 6.0], vec![3.0, 4.0], vec![9.0, 9.0], vec![9.0, 9.0]]).unwrap();
    let hp = HiddenStates::new(2, layout, permuted).unwrap();
    assert_eq!(compress_history(&hp).unwrap().0.data(), &[4.0, 5.0]);

    let same = Tensor2::from_rows(&vec![vec![0.5, -1.0]; 6]).unwrap();
    let hs = HiddenStates::new(2, layout, same).unwrap();
    assert_eq!(compress_history(&hs).unwrap().0.data(), &[0.5, -1.0]);

    let no_hist = HiddenStates::new(2, Layout::uncompressed(&cfg, 0), Tensor2::zeros(2, 2)).unwrap();
    assert!(compress_history(&no_hist).is_err());
}

#[test]
fn pooling_equals_column_mean() {
    let cfg = ModelConfig::small();
    let w = Weights::init(&cfg, 8).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let hist: Vec<_> = (0..cfg.history_len).map(|_| random_obs(&cfg, &mut rng)).collect();
    let cur = random_obs(&cfg, &mut rng);
    let instr = random_instr(&cfg, &mut rng);
    let low = forward_lower(&embed_sequence(&w, &hist, &cur, &instr).unwrap(), &w).unwrap();
    let ctx = compress_history(&low).unwrap();
    let past = low.layout.past_rows();
    for c in 0..cfg.hidden_dim {
        let col: f64 = (0..past).map(|r| low.acts.get(r, c)).sum::<f64>() / past as f64;
        assert!((ctx.0.get(0, c) - col).abs() < 1e-12);
    }
}

#[test]
fn lower_blocks_are_frame_causal() {
    let cfg = ModelConfig { history_len: 4, ..ModelConfig::small() };
    let w = Weights::init(&cfg, 11).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut frames: Vec<_> = (0..5).map(|_| random_obs(&cfg, &mut rng)).collect();
    let instr = random_instr(&cfg, &mut rng);
    let base = forward_lower(&embed_sequence(&w, &frames[..4], &frames[4], &instr).unwrap(), &w).unwrap();
    let ft = cfg.frame_tokens();
    for j in 0..5 {
        let saved = frames[j].clone();
        for b in frames[j].views[0].data.iter_mut() {
            *b = rng.gen();
        }
        let pert = forward_lower(&embed_sequence(&w, &frames[..4], &frames[4], &instr).unwrap(), &w).unwrap();
        for r in 0..j * ft {
            assert_eq!(base.acts.row(r), pert.acts.row(r), "frame {j} leaked into row {r}");
        }
        assert!(base.acts.row(j * ft) != pert.acts.row(j * ft));
        frames[j] = saved;
    }
}

#[test]
fn instructions_do_not_reach_visual_rows() {
    let cfg = ModelConfig::small();
    let w = Weights::init(&cfg, 12).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let hist: Vec<_> = (0..cfg.history_len).map(|_| random_obs(&cfg, &mut rng)).collect();
    let cur = random_obs(&cfg, &mut rng);
    let a = random_instr(&cfg, &mut rng);
    let mut b = a.clone();
    b.ids[0] = (b.ids[0] + 1) % cfg.instr_vocab;
    let la = forward_lower(&embed_sequence(&w, &hist, &cur, &a).unwrap(), &w).unwrap();
    let lb = forward_lower(&embed_sequence(&w, &hist, &cur, &b).unwrap(), &w).unwrap();
    let vis = la.layout.visual_rows();
    for r in 0..vis {
        assert_eq!(la.acts.row(r), lb.acts.row(r));
    }
    assert!(la.acts.row(vis) != lb.acts.row(vis));
}

#[test]
fn upper_visual_token_count_is_independent_of_history() {
    for k in 1..=7 {
        let cfg = ModelConfig { history_len: k, ..ModelConfig::small() };
        let w = Weights::init(&cfg, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(k as u64);
        let hist: Vec<_> = (0..k).map(|_| random_obs(&cfg, &mut rng)).collect();
        let cur = random_obs(&cfg, &mut rng);
        let f = forward_features(&w, &hist, &cur, &random_instr(&cfg, &mut rng)).unwrap();
        assert_eq!(f.layout.visual_rows(), 1 + cfg.frame_tokens());
        assert_eq!(f.acts.rows(), 1 + cfg.frame_tokens() + cfg.instr_len);
    }
}

#[test]
fn attention_key_tokens_drop_from_1088_to_422() {
    let cfg = ModelConfig::default();
    assert_eq!((cfg.history_len, cfg.views, cfg.patch_tokens(), cfg.instr_len, cfg.num_blocks, cfg.split_block), (7, 1, 16, 8, 8, 2));
    let w = Weights::init(&cfg, 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let hist: Vec<_> = (0..7).map(|_| random_obs(&cfg, &mut rng)).collect();
    let cur = random_obs(&cfg, &mut rng);
    let instr = random_instr(&cfg, &mut rng);

    let mut t = Tape::new(&w.params);
    forward_uncompressed_on(&mut t, &w, &hist, &cur, &instr).unwrap();
    assert_eq!(t.stats.key_tokens, 8 * 136);

    let mut t = Tape::new(&w.params);
    forward_features_on(&mut t, &w, &hist, &cur, &instr).unwrap();
    assert_eq!(t.stats.key_tokens, 2 * 136 + 6 * 25);
    assert_eq!(t.stats.key_tokens, 422);
    assert!((1088.0_f64 / 422.0 - 2.578).abs() < 1e-3);
}

#[test]
fn discarded_context_drops_the_token() {
    let cfg = ModelConfig { context_token: false, ..ModelConfig::small() };
    let w = Weights::init(&cfg, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let hist: Vec<_> = (0..cfg.history_len).map(|_| random_obs(&cfg, &mut rng)).collect();
    let cur = random_obs(&cfg, &mut rng);
    let f = forward_features(&w, &hist, &cur, &random_instr(&cfg, &mut rng)).unwrap();
    assert!(!f.layout.context);
    assert_eq!(f.acts.rows(), cfg.frame_tokens() + cfg.instr_len);
}

#[test]
fn single_frame_compressed_equals_uncompressed() {
    let cfg = ModelConfig { history_len: 0, ..ModelConfig::small() };
    let w = Weights::init(&cfg, 6).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let cur = random_obs(&cfg, &mut rng);
    let instr = random_instr(&cfg, &mut rng);
    let a = forward_features(&w, &[], &cur, &instr).unwrap();
    let mut t = Tape::new(&w.params);
    let (u, _) = forward_uncompressed_on(&mut t, &w, &[], &cur, &instr).unwrap();
    assert!(a.acts.max_abs_diff(t.value(u)) < 1e-12);
}
