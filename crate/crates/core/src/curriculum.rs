//! Step → hard-negative level schedules.
//!
//! Level 1 is the hardest negative, `num_levels` the easiest. Steps are 1-based.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_NUM_LEVELS: usize = 4;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CurriculumError {
    #[error("invalid schedule config: {0}")]
    Config(String),
    #[error("schedule contract violation: {0}")]
    Contract(String),
}

/// Serialized as `curriculum`, `reverse`, `random` or `fixed:K`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Strategy {
    /// Easiest level first, hardest last, in equal contiguous blocks.
    #[default]
    Curriculum,
    /// Mirror image of `Curriculum`.
    Reverse,
    /// Independent uniform draw per step.
    Random,
    /// One level for every step.
    Fixed(usize),
}

impl Strategy {
    pub fn name(self) -> String {
        match self {
            Strategy::Curriculum => "curriculum".into(),
            Strategy::Reverse => "reverse".into(),
            Strategy::Random => "random".into(),
            Strategy::Fixed(k) => format!("fixed:{k}"),
        }
    }
}

impl From<Strategy> for String {
    fn from(s: Strategy) -> String {
        s.name()
    }
}

impl TryFrom<String> for Strategy {
    type Error = CurriculumError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl std::str::FromStr for Strategy {
    type Err = CurriculumError;

    /// Accepts `curriculum`, `reverse`, `random` and `fixed:K`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "curriculum" => Ok(Self::Curriculum),
            "reverse" => Ok(Self::Reverse),
            "random" => Ok(Self::Random),
            _ => s
                .strip_prefix("fixed:")
                .and_then(|k| k.parse().ok())
                .map(Self::Fixed)
                .ok_or_else(|| CurriculumError::Config(format!("unknown strategy {s:?}"))),
        }
    }
}

/// A run of consecutive steps at one level, inclusive on both ends.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub level: usize,
    pub first_step: usize,
    pub last_step: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Schedule {
    strategy: Strategy,
    total_steps: usize,
    num_levels: usize,
    seed: u64,
    levels: Vec<usize>,
}

/// Run-length form used in run manifests.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleRecord {
    pub strategy: String,
    pub total_steps: usize,
    pub num_levels: usize,
    pub seed: u64,
    pub blocks: Vec<Block>,
}

pub fn build_schedule(
    strategy: Strategy,
    total_steps: usize,
    num_levels: usize,
    seed: u64,
) -> Result<Schedule, CurriculumError> {
    if num_levels == 0 {
        return Err(CurriculumError::Config("num_levels must be at least 1".into()));
    }
    if total_steps < num_levels {
        return Err(CurriculumError::Config(format!(
            "total_steps {total_steps} is smaller than num_levels {num_levels}"
        )));
    }
    let curriculum = || {
        let mut levels = Vec::with_capacity(total_steps);
        for m in 1..=num_levels {
            let start = total_steps * (m - 1) / num_levels;
            let end = total_steps * m / num_levels;
            levels.extend(std::iter::repeat_n(num_levels + 1 - m, end - start));
        }
        levels
    };
    let levels = match strategy {
        Strategy::Curriculum => curriculum(),
        Strategy::Reverse => {
            let mut l = curriculum();
            l.reverse();
            l
        }
        Strategy::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..total_steps).map(|_| rng.gen_range(1..=num_levels)).collect()
        }
        Strategy::Fixed(k) => {
            if k == 0 || k > num_levels {
                return Err(CurriculumError::Config(format!(
                    "fixed level {k} outside 1..={num_levels}"
                )));
            }
            vec![k; total_steps]
        }
    };
    Ok(Schedule {
        strategy,
        total_steps,
        num_levels,
        seed,
        levels,
    })
}

impl Schedule {
    pub fn strategy(&self) -> Strategy {
        self.strategy
    }

    pub fn total_steps(&self) -> usize {
        self.total_steps
    }

    pub fn num_levels(&self) -> usize {
        self.num_levels
    }

    pub fn levels(&self) -> &[usize] {
        &self.levels
    }

    pub fn level_at(&self, step: usize) -> Result<usize, CurriculumError> {
        if step == 0 || step > self.total_steps {
            return Err(CurriculumError::Contract(format!(
                "step {step} outside 1..={}",
                self.total_steps
            )));
        }
        Ok(self.levels[step - 1])
    }

    pub fn blocks(&self) -> Vec<Block> {
        let mut out: Vec<Block> = Vec::new();
        for (i, &level) in self.levels.iter().enumerate() {
            match out.last_mut() {
                Some(b) if b.level == level => b.last_step = i + 1,
                _ => out.push(Block {
                    level,
                    first_step: i + 1,
                    last_step: i + 1,
                }),
            }
        }
        out
    }

    pub fn counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.num_levels];
        for &l in &self.levels {
            c[l - 1] += 1;
        }
        c
    }

    pub fn record(&self) -> ScheduleRecord {
        ScheduleRecord {
            strategy: self.strategy.name(),
            total_steps: self.total_steps,
            num_levels: self.num_levels,
            seed: self.seed,
            blocks: self.blocks(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn curriculum_blocks_of_400() {
        let s = build_schedule(Strategy::Curriculum, 1600, 4, 0).unwrap();
        let blocks = s.blocks();
        assert_eq!(blocks.len(), 4);
        for (i, b) in blocks.iter().enumerate() {
            assert_eq!(b.level, 4 - i);
            assert_eq!((b.first_step, b.last_step), (400 * i + 1, 400 * (i + 1)));
        }
        assert_eq!(s.level_at(1).unwrap(), 4);
        assert_eq!(s.level_at(400).unwrap(), 4);
        assert_eq!(s.level_at(401).unwrap(), 3);
        assert_eq!(s.level_at(1600).unwrap(), 1);
    }

    #[test]
    fn reverse_starts_hard() {
        let s = build_schedule(Strategy::Reverse, 1600, 4, 0).unwrap();
        assert_eq!(s.level_at(1).unwrap(), 1);
        assert_eq!(s.level_at(1600).unwrap(), 4);
    }

    #[test]
    fn fixed_and_errors() {
        let s = build_schedule(Strategy::Fixed(2), 10, 4, 0).unwrap();
        assert_eq!(s.levels(), &[2; 10]);
        assert!(matches!(
            build_schedule(Strategy::Curriculum, 3, 4, 0),
            Err(CurriculumError::Config(_))
        ));
        assert!(matches!(
            build_schedule(Strategy::Fixed(5), 10, 4, 0),
            Err(CurriculumError::Config(_))
        ));
        assert!(matches!(s.level_at(0), Err(CurriculumError::Contract(_))));
        assert!(matches!(s.level_at(11), Err(CurriculumError::Contract(_))));
    }

    #[test]
    fn remainders_spread_by_floor_boundaries() {
        let s = build_schedule(Strategy::Curriculum, 10, 4, 0).unwrap();
        // boundaries ⌊10·m/4⌋ = 2, 5, 7, 10
        assert_eq!(s.levels(), &[4, 4, 3, 3, 3, 2, 2, 1, 1, 1]);
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in [
            Strategy::Curriculum,
            Strategy::Reverse,
            Strategy::Random,
            Strategy::Fixed(3),
        ] {
            assert_eq!(s.name().parse::<Strategy>().unwrap(), s);
        }
        assert!("fixed:x".parse::<Strategy>().is_err());
    }
}
