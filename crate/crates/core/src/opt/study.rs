//! Trial history with ask/tell bookkeeping and its line-delimited JSON log.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{self, Write};
use thiserror::Error;

pub type Params = BTreeMap<String, f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrialState {
    Pending,
    Complete,
    Failed,
}

/// One evaluation. Times are seconds since the study clock started.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Trial {
    pub number: u64,
    pub params: Params,
    pub value: Option<f64>,
    pub state: TrialState,
    pub t_start: f64,
    pub t_end: f64,
}

impl Trial {
    /// Same trial with both timestamps zeroed, for comparing runs.
    pub fn without_times(&self) -> Trial {
        Trial {
            t_start: 0.0,
            t_end: 0.0,
            ..self.clone()
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum StudyError {
    #[error("need at least 2 complete trials, have {0}")]
    NotEnoughData(usize),
    #[error("trial log line {line}: {detail}")]
    Log { line: usize, detail: String },
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Study {
    trials: Vec<Trial>,
}

impl Study {
    pub fn new() -> Self {
        Self::default()
    }

    /// Rebuilds a study by replaying logged trials in trial-number order.
    /// Logs are written in completion order, which can differ.
    pub fn replay<I: IntoIterator<Item = Trial>>(trials: I) -> Self {
        let mut trials: Vec<Trial> = trials.into_iter().collect();
        trials.sort_by_key(|t| t.number);
        let mut s = Self::new();
        for t in trials {
            let outcome = match (t.state, t.value) {
                (TrialState::Complete, Some(v)) => Ok(v),
                _ => Err(()),
            };
            s.tell(t.params, outcome, t.t_start, t.t_end);
        }
        s
    }

    pub fn trials(&self) -> &[Trial] {
        &self.trials
    }

    pub fn len(&self) -> usize {
        self.trials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trials.is_empty()
    }

    pub fn next_number(&self) -> u64 {
        self.trials.len() as u64
    }

    pub fn complete(&self) -> impl Iterator<Item = &Trial> {
        self.trials.iter().filter(|t| t.state == TrialState::Complete)
    }

    /// Records an evaluation. A non-finite value is stored as a failure.
    pub fn tell<E>(&mut self, params: Params, outcome: Result<f64, E>, t_start: f64, t_end: f64) -> &Trial {
        let (value, state) = match outcome {
            Ok(v) if v.is_finite() => (Some(v), TrialState::Complete),
            _ => (None, TrialState::Failed),
        };
        self.trials.push(Trial {
            number: self.next_number(),
            params,
            value,
            state,
            t_start,
            t_end: t_end.max(t_start),
        });
        self.trials.last().unwrap()
    }

    /// Lowest complete value; ties go to the earlier finisher.
    pub fn best(&self) -> Option<&Trial> {
        self.complete().min_by(|a, b| {
            a.value
                .unwrap()
                .total_cmp(&b.value.unwrap())
                .then(a.t_end.total_cmp(&b.t_end))
                .then(a.number.cmp(&b.number))
        })
    }

    pub fn best_value(&self) -> Option<f64> {
        self.best().and_then(|t| t.value)
    }
}

/// Splits complete trials into the `ceil(gamma * n)` lowest values and the
/// rest. Ties are broken by earlier `t_end`, then lower trial number.
pub fn tpe_split<'a>(
    trials: impl IntoIterator<Item = &'a Trial>,
    gamma: f64,
) -> Result<(Vec<&'a Trial>, Vec<&'a Trial>), StudyError> {
    let mut done: Vec<&Trial> = trials
        .into_iter()
        .filter(|t| t.state == TrialState::Complete)
        .collect();
    if done.len() < 2 {
        return Err(StudyError::NotEnoughData(done.len()));
    }
    done.sort_by(|a, b| {
        a.value
            .unwrap()
            .total_cmp(&b.value.unwrap())
            .then(a.t_end.total_cmp(&b.t_end))
            .then(a.number.cmp(&b.number))
    });
    let n_good = ((gamma * done.len() as f64).ceil() as usize).clamp(1, done.len());
    let bad = done.split_off(n_good);
    Ok((done, bad))
}

/// Appends trials to a line-delimited JSON log, flushing after each line.
pub struct TrialLogWriter<W: Write> {
    out: W,
}

impl<W: Write> TrialLogWriter<W> {
    pub fn new(out: W) -> Self {
        Self { out }
    }

    pub fn append(&mut self, trial: &Trial) -> io::Result<()> {
        serde_json::to_writer(&mut self.out, trial)?;
        self.out.write_all(b"\n")?;
        self.out.flush()
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

/// Parses a trial log. Blank lines are skipped; a truncated final line
/// (no trailing newline) is an error like any other bad line.
pub fn parse_trial_log(text: &str) -> Result<Vec<Trial>, StudyError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let t: Trial = serde_json::from_str(line).map_err(|e| StudyError::Log {
            line: i + 1,
            detail: e.to_string(),
        })?;
        if t.state == TrialState::Complete && !t.value.is_some_and(f64::is_finite) {
            return Err(StudyError::Log {
                line: i + 1,
                detail: "complete trial without a finite value".into(),
            });
        }
        if !(t.t_end >= t.t_start) {
            return Err(StudyError::Log {
                line: i + 1,
                detail: "t_end before t_start".into(),
            });
        }
        out.push(t);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(x: f64) -> Params {
        Params::from([("x".to_string(), x)])
    }

    fn study(values: &[f64]) -> Study {
        let mut s = Study::new();
        for (i, v) in values.iter().enumerate() {
            s.tell::<()>(p(i as f64), Ok(*v), i as f64, i as f64 + 0.5);
        }
        s
    }

    #[test]
    fn split_sizes_and_order() {
        let s = study(&[5.0, 3.0, 8.0, 1.0, 9.0, 2.0, 7.0, 4.0]);
        let (good, bad) = tpe_split(s.trials(), 0.25).unwrap();
        assert_eq!(good.len(), 2);
        assert_eq!(bad.len(), 6);
        assert_eq!(good.iter().map(|t| t.value.unwrap()).collect::<Vec<_>>(), vec![1.0, 2.0]);

        let s = study(&(1..=100).map(f64::from).collect::<Vec<_>>());
        let (good, _) = tpe_split(s.trials(), 0.1).unwrap();
        assert_eq!(good.iter().map(|t| t.value.unwrap()).collect::<Vec<_>>(), (1..=10).map(f64::from).collect::<Vec<_>>());
    }

    #[test]
    fn equal_values_split_by_finish_time() {
        let mut s = Study::new();
        for (i, t_end) in [5.0, 1.0, 3.0, 2.0, 4.0, 6.0, 7.0, 8.0].iter().enumerate() {
            s.tell::<()>(p(i as f64), Ok(1.0), 0.0, *t_end);
        }
        let (good, _) = tpe_split(s.trials(), 0.25).unwrap();
        assert_eq!(good.iter().map(|t| t.number).collect::<Vec<_>>(), vec![1, 3]);
    }

    #[test]
    fn split_needs_two_complete() {
        let mut s = study(&[1.0]);
        s.tell(p(0.0), Err("crash"), 0.0, 1.0);
        assert_eq!(tpe_split(s.trials(), 0.5), Err(StudyError::NotEnoughData(1)));
    }

    #[test]
    fn tell_and_best() {
        let mut s = study(&[3.0, 1.0, 2.0]);
        assert_eq!(s.best_value(), Some(1.0));
        s.tell::<()>(p(0.0), Ok(0.5), 0.0, 1.0);
        assert_eq!(s.len(), 4);
        assert_eq!(s.trials()[3].state, TrialState::Complete);
        s.tell::<()>(p(0.0), Ok(f64::NAN), 0.0, 1.0);
        assert_eq!(s.trials()[4].state, TrialState::Failed);
        assert_eq!(s.complete().count(), 4);
        assert_eq!(s.best_value(), Some(0.5));
    }

    #[test]
    fn log_round_trip_and_replay() {
        let mut s = study(&[0.3, 0.1]);
        s.tell(p(9.0), Err("bad"), 2.0, 2.5);
        let mut w = TrialLogWriter::new(Vec::new());
        for t in s.trials() {
            w.append(t).unwrap();
        }
        let text = String::from_utf8(w.into_inner()).unwrap();
        assert_eq!(text.lines().count(), 3);
        let mut back = parse_trial_log(&text).unwrap();
        assert_eq!(back, s.trials());
        back.swap(0, 2);
        assert_eq!(Study::replay(back), s);
    }

    #[test]
    fn log_errors_name_the_line() {
        let good = serde_json::to_string(&study(&[1.0]).trials()[0]).unwrap();
        let text = format!("{good}\n{{\"number\":1}}\n");
        assert!(matches!(parse_trial_log(&text), Err(StudyError::Log { line: 2, .. })));
        let cut = &good[..good.len() - 3];
        assert!(parse_trial_log(cut).is_err());
    }
}
