//! Clip sampling and expensive/cheap assignment.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};

/// Which backbone processes a clip.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Source {
    Expensive,
    Cheap,
}

impl Source {
    pub fn letter(self) -> char {
        match self {
            Source::Expensive => 'E',
            Source::Cheap => 'C',
        }
    }
}

/// An input pattern family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PatternKind {
    AllExpensive,
    /// One expensive clip followed by `x` cheap ones, repeated.
    OneTo(usize),
    AllCheap,
}

impl PatternKind {
    /// Ratio values offered by the trade-off study.
    pub const RATIOS: [usize; 6] = [0, 1, 3, 7, 15, 31];

    pub fn from_ratio(x: usize) -> Self {
        if x == 0 {
            PatternKind::AllExpensive
        } else {
            PatternKind::OneTo(x)
        }
    }

    /// Cheap clips per expensive clip; `None` for all-cheap.
    pub fn ratio(self) -> Option<usize> {
        match self {
            PatternKind::AllExpensive => Some(0),
            PatternKind::OneTo(x) => Some(x),
            PatternKind::AllCheap => None,
        }
    }
}

impl fmt::Display for PatternKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PatternKind::AllExpensive => f.write_str("all-e"),
            PatternKind::OneTo(x) => write!(f, "1:{}", x),
            PatternKind::AllCheap => f.write_str("all-c"),
        }
    }
}

impl FromStr for PatternKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        match s.as_str() {
            "all-e" | "alle" | "e" | "1:0" => return Ok(PatternKind::AllExpensive),
            "all-c" | "allc" | "c" => return Ok(PatternKind::AllCheap),
            _ => {}
        }
        let x = s
            .strip_prefix("1:")
            .unwrap_or(&s)
            .parse::<usize>()
            .map_err(|_| Error::Config(format!("bad pattern '{}' (expected 1:x, all-e or all-c)", s)))?;
        Ok(PatternKind::from_ratio(x))
    }
}

/// Ratios `x` with `(x + 1) | clips`, among the study's ratio values.
pub fn feasible_ratios(clips: usize) -> Vec<usize> {
    PatternKind::RATIOS
        .into_iter()
        .filter(|x| clips > 0 && clips % (x + 1) == 0)
        .collect()
}

/// Per-clip backbone assignment; expensive clips sit at indices `≡ 0 mod (x+1)`.
pub fn make_pattern(clips: usize, kind: PatternKind) -> Result<Vec<Source>> {
    if clips == 0 {
        return Err(Error::Config("a pattern needs at least one clip".into()));
    }
    match kind {
        PatternKind::AllCheap => Ok(alloc::vec![Source::Cheap; clips]),
        PatternKind::AllExpensive => Ok(alloc::vec![Source::Expensive; clips]),
        PatternKind::OneTo(x) => {
            if clips % (x + 1) != 0 {
                let feasible = feasible_ratios(clips)
                    .iter()
                    .map(|x| if *x == 0 { "all-e".to_string() } else { format!("1:{x}") })
                    .collect::<Vec<_>>()
                    .join(", ");
                return Err(Error::InfeasiblePattern {
                    ratio: x,
                    clips,
                    feasible,
                });
            }
            Ok((0..clips)
                .map(|i| if i % (x + 1) == 0 { Source::Expensive } else { Source::Cheap })
                .collect())
        }
    }
}

pub fn pattern_string(pattern: &[Source]) -> String {
    pattern.iter().map(|s| s.letter()).collect()
}

/// `(L, N, pattern)` plan for one video.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClipSchedule {
    pub clip_len: usize,
    pub num_clips: usize,
    pub kind: PatternKind,
    pub pattern: Vec<Source>,
}

impl ClipSchedule {
    pub fn new(clip_len: usize, num_clips: usize, kind: PatternKind) -> Result<Self> {
        if clip_len == 0 {
            return Err(Error::Config("clip length must be positive".into()));
        }
        Ok(Self {
            clip_len,
            num_clips,
            kind,
            pattern: make_pattern(num_clips, kind)?,
        })
    }

    /// Schedule whose frame budget `L·N` is fixed.
    pub fn with_budget(clip_len: usize, budget: usize, kind: PatternKind) -> Result<Self> {
        if clip_len == 0 || budget % clip_len != 0 {
            return Err(Error::Config(format!("budget {} is not a multiple of L={}", budget, clip_len)));
        }
        Self::new(clip_len, budget / clip_len, kind)
    }

    pub fn budget(&self) -> usize {
        self.clip_len * self.num_clips
    }

    pub fn expensive_count(&self) -> usize {
        self.pattern.iter().filter(|s| **s == Source::Expensive).count()
    }
}

/// `L` consecutive frames starting at `start`, wrapping at the video end.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ClipWindow {
    pub start: usize,
    pub len: usize,
}

impl ClipWindow {
    pub fn frames(&self, video_len: usize) -> impl Iterator<Item = usize> + '_ {
        let video_len = video_len.max(1);
        (0..self.len).map(move |i| (self.start + i) % video_len)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClipSet {
    pub video_id: u32,
    pub video_len: usize,
    pub windows: Vec<ClipWindow>,
}

impl ClipSet {
    pub fn frame_indices(&self) -> Vec<Vec<usize>> {
        self.windows.iter().map(|w| w.frames(self.video_len).collect()).collect()
    }
}

/// `N` evenly spaced windows covering the video: starts
/// `round(i·(T−L)/(N−1))`, a centered window when `N = 1`. Videos shorter
/// than `L` loop.
pub fn sample_clips_eval(video_id: u32, video_len: usize, clip_len: usize, num_clips: usize) -> ClipSet {
    let span = video_len.saturating_sub(clip_len);
    let windows = (0..num_clips)
        .map(|i| {
            let start = if num_clips == 1 {
                span / 2
            } else {
                // round half up in integers
                (2 * i * span + (num_clips - 1)) / (2 * (num_clips - 1))
            };
            ClipWindow { start, len: clip_len }
        })
        .collect();
    ClipSet {
        video_id,
        video_len,
        windows,
    }
}

/// `N` independent uniform starts in `[0, T−L]`, sorted into temporal order.
pub fn sample_clips_train<R: Rng>(video_id: u32, video_len: usize, clip_len: usize, num_clips: usize, rng: &mut R) -> ClipSet {
    let span = video_len.saturating_sub(clip_len);
    let mut starts: Vec<usize> = (0..num_clips).map(|_| rng.random_range(0..=span)).collect();
    starts.sort_unstable();
    ClipSet {
        video_id,
        video_len,
        windows: starts.into_iter().map(|start| ClipWindow { start, len: clip_len }).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn one_to_one_alternates() {
        let p = make_pattern(8, PatternKind::OneTo(1)).unwrap();
        assert_eq!(pattern_string(&p), "ECECECEC");
    }

    #[test]
    fn faster16_pattern() {
        let p = make_pattern(16, PatternKind::OneTo(7)).unwrap();
        assert_eq!(pattern_string(&p), "ECCCCCCCECCCCCCC");
    }

    #[test]
    fn infeasible_ratio_lists_alternatives() {
        let err = make_pattern(8, PatternKind::OneTo(15)).unwrap_err();
        match err {
            Error::InfeasiblePattern { ratio, clips, feasible } => {
                assert_eq!((ratio, clips), (15, 8));
                assert_eq!(feasible, "all-e, 1:1, 1:3, 1:7");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn all_cheap_and_all_expensive() {
        assert!(make_pattern(4, PatternKind::AllCheap).unwrap().iter().all(|s| *s == Source::Cheap));
        assert!(make_pattern(4, PatternKind::AllExpensive).unwrap().iter().all(|s| *s == Source::Expensive));
    }

    #[test]
    fn pattern_parsing() {
        assert_eq!("1:3".parse::<PatternKind>().unwrap(), PatternKind::OneTo(3));
        assert_eq!("all-c".parse::<PatternKind>().unwrap(), PatternKind::AllCheap);
        assert_eq!("1:0".parse::<PatternKind>().unwrap(), PatternKind::AllExpensive);
        assert!("x:3".parse::<PatternKind>().is_err());
    }

    #[test]
    fn eval_sampling_covers_video() {
        let set = sample_clips_eval(0, 256, 8, 32);
        let starts: Vec<usize> = set.windows.iter().map(|w| w.start).collect();
        let expect: Vec<usize> = (0..32).map(|i| 8 * i).collect();
        assert_eq!(starts, expect);
    }

    #[test]
    fn single_eval_clip_is_centered() {
        assert_eq!(sample_clips_eval(0, 100, 8, 1).windows[0].start, 46);
    }

    #[test]
    fn short_video_loops() {
        let set = sample_clips_eval(0, 10, 16, 1);
        let frames = set.frame_indices();
        let expect: Vec<usize> = (0..10).chain(0..6).collect();
        assert_eq!(frames[0], expect);
    }

    #[test]
    fn train_sampling_is_sorted_and_seeded() {
        let a = sample_clips_train(0, 64, 8, 6, &mut ChaCha8Rng::seed_from_u64(3));
        let b = sample_clips_train(0, 64, 8, 6, &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(a, b);
        assert!(a.windows.windows(2).all(|w| w[0].start <= w[1].start));
        assert!(a.windows.iter().all(|w| w.start <= 56));
    }

    #[test]
    fn budget_presets() {
        for (l, n) in [(8, 32), (16, 16), (32, 8)] {
            let s = ClipSchedule::with_budget(l, 256, PatternKind::AllExpensive).unwrap();
            assert_eq!((s.num_clips, s.budget()), (n, 256));
        }
        assert!(ClipSchedule::with_budget(24, 256, PatternKind::AllCheap).is_err());
        let _ = vec![0u8];
    }
}
