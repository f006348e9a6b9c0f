use crate::numerics::AttnMask;

use super::config::ModelConfig;

/// Token layout of one sequence: `[context?][frame 0 .. frame F][instruction][actions]`.
///
/// Frame `past_frames` is the current frame; frames before it are history.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Layout {
    pub context: bool,
    pub past_frames: usize,
    pub frame_tokens: usize,
    pub instr: usize,
    pub actions: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenKind {
    Context,
    Frame(usize),
    Instr,
    Action(usize),
}

impl Layout {
    /// Lower-block layout over `past` history frames.
    pub fn uncompressed(cfg: &ModelConfig, past: usize) -> Self {
        Self { context: false, past_frames: past, frame_tokens: cfg.frame_tokens(), instr: cfg.instr_len, actions: 0 }
    }

    /// Upper-block layout: the history is reduced to at most one context token.
    pub fn compressed(cfg: &ModelConfig, context: bool) -> Self {
        Self { context, past_frames: 0, frame_tokens: cfg.frame_tokens(), instr: cfg.instr_len, actions: 0 }
    }

    pub fn with_actions(mut self, actions: usize) -> Self {
        self.actions = actions;
        self
    }

    pub fn context_rows(&self) -> usize {
        usize::from(self.context)
    }

    pub fn visual_rows(&self) -> usize {
        self.context_rows() + (self.past_frames + 1) * self.frame_tokens
    }

    pub fn past_rows(&self) -> usize {
        self.past_frames * self.frame_tokens
    }

    /// First row of the current frame.
    pub fn current_start(&self) -> usize {
        self.context_rows() + self.past_rows()
    }

    pub fn instr_start(&self) -> usize {
        self.visual_rows()
    }

    pub fn prefix_rows(&self) -> usize {
        self.visual_rows() + self.instr
    }

    pub fn total_rows(&self) -> usize {
        self.prefix_rows() + self.actions
    }

    pub fn kind(&self, row: usize) -> TokenKind {
        if self.context && row == 0 {
            return TokenKind::Context;
        }
        let r = row - self.context_rows();
        let frames = (self.past_frames + 1) * self.frame_tokens;
        if r < frames {
            TokenKind::Frame(r / self.frame_tokens)
        } else if r < frames + self.instr {
            TokenKind::Instr
        } else {
            TokenKind::Action(r - frames - self.instr)
        }
    }

    /// Frame index used for rotary positions; text tokens share the current frame's.
    pub fn frame_position(&self, row: usize) -> f64 {
        match self.kind(row) {
            TokenKind::Frame(f) => f as f64,
            _ => self.past_frames as f64,
        }
    }

    pub fn mask(&self) -> AttnMask {
        let n = self.total_rows();
        let kinds: Vec<TokenKind> = (0..n).map(|i| self.kind(i)).collect();
        AttnMask::from_fn(n, n, |q, k| visible(kinds[q], kinds[k]))
    }
}

fn visible(q: TokenKind, k: TokenKind) -> bool {
    use TokenKind::*;
    match (q, k) {
        (Context, Context) => true,
        (Context, _) => false,
        (Frame(_), Context) => true,
        (Frame(i), Frame(j)) => j <= i,
        (Frame(_), _) => false,
        (Instr, Action(_)) => false,
        (Instr, _) => true,
        (Action(i), Action(j)) => j <= i,
        (Action(_), _) => true,
    }
}

/// Attention mask for the full history (`compressed = false`, lower blocks) or
/// the reduced sequence above the split (`compressed = true`).
pub fn build_mask(cfg: &ModelConfig, compressed: bool) -> AttnMask {
    if compressed {
        Layout::compressed(cfg, cfg.context_token && cfg.history_len > 0).mask()
    } else {
        Layout::uncompressed(cfg, cfg.history_len).mask()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(k: usize, v: usize, patch_size: usize, l: usize) -> ModelConfig {
        ModelConfig { history_len: k, views: v, patch_size, instr_len: l, ..ModelConfig::default() }
    }

    #[test]
    fn single_frame_is_all_allowed_among_visual() {
        let c = cfg(0, 1, 8, 3);
        let m = build_mask(&c, false);
        let p = c.frame_tokens();
        for q in 0..p {
            for k in 0..p {
                assert!(m.allowed(q, k));
            }
            for k in p..p + 3 {
                assert!(!m.allowed(q, k));
            }
        }
    }

    #[test]
    fn one_past_one_current_token() {
        let c = cfg(1, 1, 32, 0);
        let m = build_mask(&c, false);
        assert_eq!(m, AttnMask::from_rows(&[vec![true, false], vec![true, true]]).unwrap());
    }

    /// Rule-by-rule builder over explicit (token -> frame id) assignments.
    fn brute_force(frames: usize, per_frame: usize, instr: usize) -> Vec<Vec<bool>> {
        let mut frame_of = Vec::new();
        for f in 0..frames {
            for _ in 0..per_frame {
                frame_of.push(Some(f));
            }
        }
        for _ in 0..instr {
            frame_of.push(None);
        }
        let n = frame_of.len();
        let mut m = vec![vec![false; n]; n];
        for q in 0..n {
            for k in 0..n {
                m[q][k] = match (frame_of[q], frame_of[k]) {
                    (Some(fq), Some(fk)) => fk <= fq,
                    (Some(_), None) => false,
                    (None, _) => true,
                };
            }
        }
        m
    }

    #[test]
    fn matches_brute_force_builder() {
        // k=2, V=1, P=2, L=2: 32x16 images with 16-pixel patches give P=2
        let c = ModelConfig { image_height: 16, ..cfg(2, 1, 16, 2) };
        assert_eq!(c.patch_tokens(), 2);
        let m = build_mask(&c, false);
        assert_eq!(m, AttnMask::from_rows(&brute_force(3, 2, 2)).unwrap());

        let c2 = cfg(3, 2, 16, 4);
        let m2 = build_mask(&c2, false);
        assert_eq!(m2, AttnMask::from_rows(&brute_force(4, 8, 4)).unwrap());
    }

    #[test]
    fn compressed_layout_rules() {
        let c = ModelConfig { image_height: 16, ..cfg(2, 1, 16, 2) };
        let m = build_mask(&c, true);
        // rows: context, cur0, cur1, instr0, instr1
        let want = vec![
            vec![true, false, false, false, false],
            vec![true, true, true, false, false],
            vec![true, true, true, false, false],
            vec![true; 5],
            vec![true; 5],
        ];
        assert_eq!(m, AttnMask::from_rows(&want).unwrap());
        assert_eq!(m.queries(), 1 + c.frame_tokens() + c.instr_len);
    }

    #[test]
    fn action_tokens_are_causal_and_invisible_to_prefix() {
        let c = ModelConfig { image_height: 16, ..cfg(1, 1, 16, 1) };
        let l = Layout::compressed(&c, true).with_actions(3);
        let m = l.mask();
        let a0 = l.prefix_rows();
        for q in 0..a0 {
            for k in a0..a0 + 3 {
                assert!(!m.allowed(q, k));
            }
        }
        for i in 0..3 {
            for k in 0..a0 {
                assert!(m.allowed(a0 + i, k));
            }
            for j in 0..3 {
                assert_eq!(m.allowed(a0 + i, a0 + j), j <= i);
            }
        }
    }
}
