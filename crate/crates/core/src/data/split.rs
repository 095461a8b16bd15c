use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::SeriesDataset;
use crate::error::{Error, Result};

/// Guards `ceil`/`floor` of fractional counts against representation error,
/// e.g. `0.05 * 10000 = 500.00000000000006`.
const COUNT_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Segment {
    Train,
    Val,
    Test,
}

impl Segment {
    pub const ALL: [Segment; 3] = [Segment::Train, Segment::Val, Segment::Test];
}

impl fmt::Display for Segment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Segment::Train => "train",
            Segment::Val => "val",
            Segment::Test => "test",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SplitKind {
    /// Train and test take `floor(fraction · len)` points; validation gets
    /// the remainder.
    Ratios { train: f64, val: f64, test: f64 },
    /// Explicit nominal boundaries; test runs to the end of the series.
    Boundaries { train_end: usize, val_end: usize },
    /// 12, 4 and 4 months of 30 days. Rows after month 20 are unused.
    Ett { points_per_day: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    pub kind: SplitKind,
    /// Validation and test inputs may reach `L` points back into the
    /// preceding segment, so their first target follows the boundary.
    pub lookback_overlap: bool,
}

/// Nominal segment ranges plus the look-back reach for val/test inputs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitRanges {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
    pub lookback: usize,
}

impl SplitRanges {
    pub fn nominal(&self, seg: Segment) -> Range<usize> {
        match seg {
            Segment::Train => self.train.clone(),
            Segment::Val => self.val.clone(),
            Segment::Test => self.test.clone(),
        }
    }

    /// Range windows are drawn from, including any look-back overlap.
    pub fn effective(&self, seg: Segment) -> Range<usize> {
        let r = self.nominal(seg);
        match seg {
            Segment::Train => r,
            _ => r.start.saturating_sub(self.lookback)..r.end,
        }
    }
}

/// Splits a series of length `len` and checks every segment can hold one
/// `L + T` window.
pub fn split(
    len: usize,
    spec: &SplitSpec,
    input_len: usize,
    horizon: usize,
) -> Result<SplitRanges> {
    let (train_end, val_end, end) = match spec.kind {
        SplitKind::Ratios { train, val, test } => {
            if [train, val, test].iter().any(|r| !(0.0..=1.0).contains(r))
                || ((train + val + test) - 1.0).abs() > 1e-6
            {
                return Err(Error::Config(format!(
                    "split ratios must be in [0, 1] and sum to 1, got ({train}, {val}, {test})"
                )));
            }
            let n_train = (train * len as f64 + COUNT_SLACK).floor() as usize;
            let n_test = (test * len as f64 + COUNT_SLACK).floor() as usize;
            let n_train = n_train.min(len);
            let n_test = n_test.min(len - n_train);
            (n_train, len - n_test, len)
        }
        SplitKind::Boundaries { train_end, val_end } => {
            if !(train_end <= val_end && val_end <= len) {
                return Err(Error::Config(format!(
                    "boundaries {train_end}, {val_end} not monotone within length {len}"
                )));
            }
            (train_end, val_end, len)
        }
        SplitKind::Ett { points_per_day } => {
            let month = 30 * points_per_day;
            let end = 20 * month;
            if end > len {
                return Err(Error::InsufficientData {
                    segment: "ett protocol".into(),
                    available: len,
                    required: end,
                });
            }
            (12 * month, 16 * month, end)
        }
    };
    let ranges = SplitRanges {
        train: 0..train_end,
        val: train_end..val_end,
        test: val_end..end,
        lookback: if spec.lookback_overlap { input_len } else { 0 },
    };
    if horizon == 0 || input_len == 0 {
        return Err(Error::Config(
            "input length and horizon must be positive".into(),
        ));
    }
    for seg in Segment::ALL {
        let r = ranges.effective(seg);
        if r.len() < input_len + horizon {
            return Err(Error::InsufficientData {
                segment: seg.to_string(),
                available: r.len(),
                required: input_len + horizon,
            });
        }
    }
    Ok(ranges)
}

/// Windows whose input fits in a range of `len` points, ignoring the horizon.
pub fn input_window_count(len: usize, input_len: usize) -> usize {
    (len + 1).saturating_sub(input_len)
}

/// Windows whose input and horizon both fit in a range of `len` points.
pub fn pair_count(len: usize, input_len: usize, horizon: usize) -> usize {
    (len + 1).saturating_sub(input_len + horizon)
}

/// One training or evaluation sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowIndex {
    pub segment: Segment,
    /// Absolute row of the first input point.
    pub start: usize,
    pub input_len: usize,
    pub horizon: usize,
    /// Source channel. Without channel independence this is always 0 and
    /// the window stands for all channels at once.
    pub channel: usize,
}

/// Every window of `seg`, channel by channel, starts ascending.
pub fn windows(
    ranges: &SplitRanges,
    seg: Segment,
    input_len: usize,
    horizon: usize,
    channels: usize,
    channel_independent: bool,
) -> Result<Vec<WindowIndex>> {
    if horizon == 0 || input_len == 0 {
        return Err(Error::Config(
            "input length and horizon must be positive".into(),
        ));
    }
    let r = ranges.effective(seg);
    let count = pair_count(r.len(), input_len, horizon);
    let reps = if channel_independent { channels } else { 1 };
    Ok((0..reps)
        .flat_map(|channel| {
            (0..count).map(move |i| WindowIndex {
                segment: seg,
                start: r.start + i,
                input_len,
                horizon,
                channel,
            })
        })
        .collect())
}

/// Restricts training to the first `ceil(fraction · len)` training points.
pub fn few_shot(
    ranges: &SplitRanges,
    fraction: f64,
    input_len: usize,
    horizon: usize,
) -> Result<SplitRanges> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!(
            "few-shot fraction must be in (0, 1], got {fraction}"
        )));
    }
    let len = ranges.train.len();
    let keep = ((fraction * len as f64 - COUNT_SLACK).ceil() as usize).min(len);
    if keep < input_len + horizon {
        return Err(Error::InsufficientData {
            segment: "few-shot train".into(),
            available: keep,
            required: input_len + horizon,
        });
    }
    Ok(SplitRanges {
        train: ranges.train.start..ranges.train.start + keep,
        ..ranges.clone()
    })
}

/// Train and validate on `source`, test on `target`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ZeroShotPlan {
    pub source: String,
    pub target: String,
    pub source_ranges: SplitRanges,
    pub target_ranges: SplitRanges,
}

impl ZeroShotPlan {
    pub fn train(&self) -> Range<usize> {
        self.source_ranges.effective(Segment::Train)
    }

    pub fn val(&self) -> Range<usize> {
        self.source_ranges.effective(Segment::Val)
    }

    pub fn test(&self) -> Range<usize> {
        self.target_ranges.effective(Segment::Test)
    }
}

pub fn zero_shot_pair(
    source: &SeriesDataset,
    source_spec: &SplitSpec,
    target: &SeriesDataset,
    target_spec: &SplitSpec,
    input_len: usize,
    horizon: usize,
) -> Result<ZeroShotPlan> {
    Ok(ZeroShotPlan {
        source: source.name.clone(),
        target: target.name.clone(),
        source_ranges: split(source.len(), source_spec, input_len, horizon)?,
        target_ranges: split(target.len(), target_spec, input_len, horizon)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ratios(train: f64, val: f64, test: f64, overlap: bool) -> SplitSpec {
        SplitSpec {
            kind: SplitKind::Ratios { train, val, test },
            lookback_overlap: overlap,
        }
    }

    #[test]
    fn ratio_boundaries() {
        let r = split(100, &ratios(0.6, 0.2, 0.2, false), 3, 2).unwrap();
        assert_eq!((r.train.end, r.val.end, r.test.end), (60, 80, 100));
        assert_eq!(r.effective(Segment::Val), 60..80);
    }

    #[test]
    fn ratio_remainder_goes_to_validation() {
        // 52696 rows at 7:1:2 leaves 36887 / 5270 / 10539 points
        let r = split(52696, &ratios(0.7, 0.1, 0.2, true), 96, 96).unwrap();
        assert_eq!(
            (r.train.len(), r.val.len(), r.test.len()),
            (36887, 5270, 10539)
        );
        let counts: Vec<usize> = Segment::ALL
            .iter()
            .map(|&s| input_window_count(r.effective(s).len(), 96))
            .collect();
        assert_eq!(counts, vec![36792, 5271, 10540]);
    }

    #[test]
    fn ett_hourly_counts() {
        let spec = SplitSpec {
            kind: SplitKind::Ett { points_per_day: 24 },
            lookback_overlap: true,
        };
        let r = split(17420, &spec, 96, 96).unwrap();
        assert_eq!(
            (r.train.len(), r.val.len(), r.test.len()),
            (8640, 2880, 2880)
        );
        let counts: Vec<usize> = Segment::ALL
            .iter()
            .map(|&s| input_window_count(r.effective(s).len(), 96))
            .collect();
        assert_eq!(counts, vec![8545, 2881, 2881]);
        assert_eq!(pair_count(r.effective(Segment::Val).len(), 96, 96), 2785);
    }

    #[test]
    fn short_segment_named() {
        let err = split(100, &ratios(0.8, 0.1, 0.1, false), 5, 8).unwrap_err();
        assert!(
            matches!(err, Error::InsufficientData { ref segment, .. } if segment == "val"),
            "{err}"
        );
    }

    #[test]
    fn bad_ratios_rejected() {
        assert!(split(100, &ratios(0.5, 0.2, 0.2, false), 1, 1).is_err());
    }

    #[test]
    fn ten_points_six_windows() {
        let r = SplitRanges {
            train: 0..10,
            val: 10..10,
            test: 10..10,
            lookback: 0,
        };
        let w = windows(&r, Segment::Train, 3, 2, 1, true).unwrap();
        assert_eq!(
            w.iter().map(|w| w.start).collect::<Vec<_>>(),
            vec![0, 1, 2, 3, 4, 5]
        );
        let w7 = windows(&r, Segment::Train, 3, 2, 7, true).unwrap();
        assert_eq!(w7.len(), 7 * w.len());
        assert_eq!(
            windows(&r, Segment::Train, 3, 2, 7, false).unwrap().len(),
            6
        );
        assert!(windows(&r, Segment::Train, 3, 0, 1, true).is_err());
    }

    #[test]
    fn few_shot_prefix() {
        let r = SplitRanges {
            train: 0..10000,
            val: 10000..12000,
            test: 12000..14000,
            lookback: 96,
        };
        let f = few_shot(&r, 0.05, 96, 96).unwrap();
        assert_eq!(f.train, 0..500);
        assert_eq!(f.val, r.val);
        assert_eq!(
            windows(&f, Segment::Train, 96, 96, 1, true).unwrap().len(),
            309
        );
        assert_eq!(few_shot(&r, 1.0, 96, 96).unwrap(), r);
        let short = SplitRanges { train: 0..200, ..r };
        assert!(matches!(
            few_shot(&short, 0.05, 96, 720),
            Err(Error::InsufficientData { .. })
        ));
        assert!(few_shot(&short, 0.0, 96, 96).is_err());
    }

    #[test]
    fn zero_shot_channel_counts_may_differ() {
        let a = SeriesDataset::new(
            "a",
            (0..7).map(|i| i.to_string()).collect(),
            vec![vec![0.0; 500]; 7],
        )
        .unwrap();
        let b = SeriesDataset::new(
            "b",
            (0..3).map(|i| i.to_string()).collect(),
            vec![vec![1.0; 400]; 3],
        )
        .unwrap();
        let spec = ratios(0.7, 0.1, 0.2, true);
        let plan = zero_shot_pair(&a, &spec, &b, &spec, 24, 12).unwrap();
        assert_eq!(plan.train(), 0..350);
        assert_eq!(plan.test(), 320 - 24..400);
        let same = zero_shot_pair(&a, &spec, &a, &spec, 24, 12).unwrap();
        assert_eq!(same.source_ranges, same.target_ranges);
    }

    proptest! {
        #[test]
        fn windows_match_enumeration(
            len in 1usize..200, l in 1usize..40, t in 1usize..40, d in 1usize..4, overlap: bool,
        ) {
            let spec = ratios(0.6, 0.2, 0.2, overlap);
            let Ok(r) = split(len, &spec, l, t) else { return Ok(()); };
            for seg in Segment::ALL {
                let eff = r.effective(seg);
                let ws = windows(&r, seg, l, t, d, true).unwrap();
                let mut expected = 0;
                for start in 0..len {
                    if start >= eff.start && start + l + t <= eff.end {
                        expected += 1;
                    }
                }
                prop_assert_eq!(ws.len(), d * expected);
                for w in &ws {
                    prop_assert!(w.start >= eff.start && w.start + l + t <= eff.end && eff.end <= len);
                }
            }
            prop_assert_eq!(r.train.end, r.val.start);
            prop_assert_eq!(r.val.end, r.test.start);
            prop_assert_eq!(r.test.end, len);
        }
    }
}
