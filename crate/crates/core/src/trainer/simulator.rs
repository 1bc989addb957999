//! Timeline model of one synchronous optimizer step across replicas.
//!
//! Within a sub-batch of duration `d` starting at `s`, bucket `b` of `n`
//! becomes ready at `s + d * (b + 1) / n`. Reductions share one channel and run
//! in bucket order.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SyncMode {
    /// Reduce after every sub-batch once all replicas finish it.
    SerialSync,
    /// Reduce after every sub-batch, each bucket as soon as all replicas produced it.
    Overlap,
    /// Run all sub-batches back to back; reduce only the last one's buckets, overlapped.
    OverlapAccum,
}

impl SyncMode {
    pub fn name(self) -> &'static str {
        match self {
            SyncMode::SerialSync => "serial_sync",
            SyncMode::Overlap => "overlap",
            SyncMode::OverlapAccum => "overlap_accum",
        }
    }
}

impl fmt::Display for SyncMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SyncMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "serial_sync" => Ok(SyncMode::SerialSync),
            "overlap" => Ok(SyncMode::Overlap),
            "overlap_accum" => Ok(SyncMode::OverlapAccum),
            other => Err(Error::Invalid(format!(
                "unknown mode '{other}' (expected serial_sync, overlap or overlap_accum)"
            ))),
        }
    }
}

pub type Span = (f64, f64);

#[derive(Clone, Debug, PartialEq)]
pub struct TimelineReport {
    pub mode: SyncMode,
    pub compute: Vec<Vec<Span>>,
    /// Spans on the shared reduction channel.
    pub comm: Vec<Span>,
    /// Per replica: time neither computing nor communicating.
    pub idle: Vec<f64>,
    pub makespan: f64,
    /// Reduction time during which no replica computes.
    pub exposed_comm: f64,
}

impl TimelineReport {
    pub fn total_idle(&self) -> f64 {
        self.idle.iter().sum()
    }

    pub fn total_compute(&self) -> f64 {
        self.compute.iter().flatten().map(|(s, e)| e - s).sum()
    }

    /// `mode=... makespan=... exposed_comm=... idle[0]=...` on one line.
    pub fn to_line(&self) -> String {
        let mut line = format!(
            "mode={} makespan={} exposed_comm={}",
            self.mode, self.makespan, self.exposed_comm
        );
        for (r, idle) in self.idle.iter().enumerate() {
            line.push_str(&format!(" idle[{r}]={idle}"));
        }
        line
    }
}

/// Total length of the union of `spans`.
fn union_length(spans: &mut [Span]) -> f64 {
    spans.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut total = 0.0;
    let mut current: Option<Span> = None;
    for &(s, e) in spans.iter() {
        match current {
            Some((cs, ce)) if s <= ce => current = Some((cs, ce.max(e))),
            Some((cs, ce)) => {
                total += ce - cs;
                current = Some((s, e));
            }
            None => current = Some((s, e)),
        }
    }
    if let Some((cs, ce)) = current {
        total += ce - cs;
    }
    total
}

/// Length of `span` not covered by any of `cover`.
fn uncovered(span: Span, cover: &[Span]) -> f64 {
    let mut pieces: Vec<Span> = cover
        .iter()
        .filter_map(|&(s, e)| {
            let (s, e) = (s.max(span.0), e.min(span.1));
            (s < e).then_some((s, e))
        })
        .collect();
    (span.1 - span.0) - union_length(&mut pieces)
}

/// Simulates one optimizer step.
///
/// `compute[w][a]` is replica `w`'s duration for sub-batch `a`; `comm[b]` the
/// reduction time of bucket `b` in backward completion order.
// Worker and sub-batch indices address two tables at once.
#[allow(clippy::needless_range_loop)]
pub fn simulate_timeline(compute: &[Vec<f64>], comm: &[f64], mode: SyncMode) -> Result<TimelineReport> {
    let workers = compute.len();
    let accum = compute.first().map_or(0, Vec::len);
    if workers == 0 || accum == 0 || comm.is_empty() {
        return Err(Error::Invalid("need at least one replica, sub-batch and bucket".into()));
    }
    if compute.iter().any(|c| c.len() != accum) {
        return Err(Error::Invalid(
            "every replica needs the same number of sub-batches".into(),
        ));
    }
    if compute.iter().flatten().chain(comm).any(|&d| d.is_nan() || d <= 0.0) {
        return Err(Error::Invalid("durations must be positive".into()));
    }
    let nb = comm.len() as f64;
    let mut compute_spans: Vec<Vec<Span>> = vec![Vec::new(); workers];
    let mut comm_spans: Vec<Span> = Vec::new();

    let reduce = |ready: Vec<f64>, spans: &mut Vec<Span>| -> f64 {
        let mut channel_free = 0.0f64;
        for (b, r) in ready.into_iter().enumerate() {
            let start = r.max(channel_free);
            let end = start + comm[b];
            spans.push((start, end));
            channel_free = end;
        }
        channel_free
    };

    let mut t = 0.0f64;
    match mode {
        SyncMode::SerialSync | SyncMode::Overlap => {
            for a in 0..accum {
                let mut all_done = t;
                for w in 0..workers {
                    let end = t + compute[w][a];
                    compute_spans[w].push((t, end));
                    all_done = all_done.max(end);
                }
                let ready: Vec<f64> = (0..comm.len())
                    .map(|b| match mode {
                        SyncMode::SerialSync => all_done,
                        _ => (0..workers)
                            .map(|w| t + compute[w][a] * (b as f64 + 1.0) / nb)
                            .fold(t, f64::max),
                    })
                    .collect();
                t = reduce(ready, &mut comm_spans);
            }
        }
        SyncMode::OverlapAccum => {
            let mut last_start = vec![0.0f64; workers];
            for w in 0..workers {
                let mut s = t;
                for a in 0..accum {
                    let end = s + compute[w][a];
                    compute_spans[w].push((s, end));
                    if a + 1 == accum {
                        last_start[w] = s;
                    }
                    s = end;
                }
            }
            let ready: Vec<f64> = (0..comm.len())
                .map(|b| {
                    (0..workers)
                        .map(|w| last_start[w] + compute[w][accum - 1] * (b as f64 + 1.0) / nb)
                        .fold(t, f64::max)
                })
                .collect();
            t = reduce(ready, &mut comm_spans);
        }
    }

    let makespan = compute_spans
        .iter()
        .flatten()
        .chain(&comm_spans)
        .map(|s| s.1)
        .fold(t, f64::max);
    let idle = compute_spans
        .iter()
        .map(|spans| {
            let mut busy: Vec<Span> = spans.iter().chain(&comm_spans).copied().collect();
            makespan - union_length(&mut busy)
        })
        .collect();
    let all_compute: Vec<Span> = compute_spans.iter().flatten().copied().collect();
    let exposed_comm = comm_spans.iter().map(|&s| uncovered(s, &all_compute)).sum();
    Ok(TimelineReport {
        mode,
        compute: compute_spans,
        comm: comm_spans,
        idle,
        makespan,
        exposed_comm,
    })
}

/// A parsed scenario: durations plus the modes to run.
#[derive(Clone, Debug, PartialEq)]
pub struct Scenario {
    pub compute: Vec<Vec<f64>>,
    pub comm: Vec<f64>,
    pub modes: Vec<SyncMode>,
}

impl Scenario {
    /// `key = value` lines: `workers`, `accum`, `mode` (one or more names),
    /// `compute.<replica>` (one duration per sub-batch), `comm` (one per bucket).
    pub fn parse(text: &str) -> Result<Self> {
        let mut workers = None;
        let mut accum = None;
        let mut modes = Vec::new();
        let mut compute: Vec<(usize, Vec<f64>)> = Vec::new();
        let mut comm = Vec::new();
        let nums = |v: &str, key: &str| -> Result<Vec<f64>> {
            v.split(|c: char| c.is_whitespace() || c == ',')
                .filter(|s| !s.is_empty())
                .map(|s| {
                    s.parse::<f64>()
                        .map_err(|_| Error::Invalid(format!("{key}: bad number '{s}'")))
                })
                .collect()
        };
        for (key, value) in crate::registry::parse_config_text(text)? {
            let int = || {
                value
                    .parse::<usize>()
                    .map_err(|_| Error::Invalid(format!("{key}: expected an integer, got '{value}'")))
            };
            match key.as_str() {
                "workers" => workers = Some(int()?),
                "accum" => accum = Some(int()?),
                "mode" | "modes" => {
                    for m in value
                        .split(|c: char| c.is_whitespace() || c == ',')
                        .filter(|s| !s.is_empty())
                    {
                        modes.push(m.parse()?);
                    }
                }
                "comm" => comm = nums(&value, &key)?,
                k if k.starts_with("compute.") => {
                    let w: usize = k["compute.".len()..]
                        .parse()
                        .map_err(|_| Error::Invalid(format!("bad replica index in '{k}'")))?;
                    compute.push((w, nums(&value, k)?));
                }
                other => return Err(Error::Invalid(format!("unknown scenario key '{other}'"))),
            }
        }
        compute.sort_by_key(|(w, _)| *w);
        let workers = workers.unwrap_or(compute.len());
        if compute.len() != workers || compute.iter().enumerate().any(|(i, (w, _))| i != *w) {
            return Err(Error::Invalid(format!(
                "expected compute.0 .. compute.{}",
                workers.saturating_sub(1)
            )));
        }
        let compute: Vec<Vec<f64>> = compute.into_iter().map(|(_, c)| c).collect();
        if let Some(a) = accum {
            if compute.iter().any(|c| c.len() != a) {
                return Err(Error::Invalid(format!("every compute line needs {a} durations")));
            }
        }
        if modes.is_empty() {
            modes = vec![SyncMode::SerialSync, SyncMode::Overlap, SyncMode::OverlapAccum];
        }
        Ok(Self { compute, comm, modes })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn run(&self) -> Result<Vec<TimelineReport>> {
        self.modes
            .iter()
            .map(|&m| simulate_timeline(&self.compute, &self.comm, m))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn straggler_idles_fast_replica() {
        let r = simulate_timeline(&[vec![1.0], vec![2.0]], &[0.5], SyncMode::SerialSync).unwrap();
        assert_eq!(r.makespan, 2.5);
        assert_eq!(r.idle, vec![1.0, 0.0]);
        assert_eq!(r.exposed_comm, 0.5);
    }

    #[test]
    fn overlap_hides_first_bucket() {
        let r = simulate_timeline(&[vec![1.0], vec![2.0]], &[0.25, 0.25], SyncMode::Overlap).unwrap();
        assert_eq!(r.comm, vec![(1.0, 1.25), (2.0, 2.25)]);
        assert_eq!(r.makespan, 2.25);
        assert_eq!(r.exposed_comm, 0.25);
    }

    #[test]
    fn accumulation_evens_out_variance() {
        let c = [vec![1.0, 2.0], vec![2.0, 1.0]];
        let serial = simulate_timeline(&c, &[0.5], SyncMode::SerialSync).unwrap();
        let accum = simulate_timeline(&c, &[0.5], SyncMode::OverlapAccum).unwrap();
        assert_eq!(serial.makespan, 5.0);
        assert_eq!(accum.makespan, 3.5);
        assert_eq!(serial.total_compute(), accum.total_compute());
    }

    #[test]
    fn scenario_parsing() {
        let s = Scenario::parse(
            "workers = 2\naccum = 1\nmode = serial_sync overlap\ncompute.0 = 1.0\ncompute.1 = 2.0\ncomm = 0.25, 0.25\n",
        )
        .unwrap();
        assert_eq!(s.modes, vec![SyncMode::SerialSync, SyncMode::Overlap]);
        let reports = s.run().unwrap();
        assert_eq!(reports[1].makespan, 2.25);
        assert_eq!(
            reports[1].to_line(),
            "mode=overlap makespan=2.25 exposed_comm=0.25 idle[0]=0.75 idle[1]=0"
        );
        assert!(Scenario::parse("compute.1 = 1\n").is_err());
        assert!(Scenario::parse("mode = fast\n").is_err());
    }

    fn durations() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<f64>)> {
        (1usize..4, 1usize..4, 1usize..4).prop_flat_map(|(w, a, b)| {
            (
                prop::collection::vec(prop::collection::vec(0.1f64..5.0, a), w),
                prop::collection::vec(0.05f64..2.0, b),
            )
        })
    }

    proptest! {
        #[test]
        fn overlap_never_slower((compute, comm) in durations()) {
            let s = simulate_timeline(&compute, &comm, SyncMode::SerialSync).unwrap();
            let o = simulate_timeline(&compute, &comm, SyncMode::Overlap).unwrap();
            let a = simulate_timeline(&compute, &comm, SyncMode::OverlapAccum).unwrap();
            prop_assert!(o.makespan <= s.makespan + 1e-12);
            prop_assert!((s.total_compute() - o.total_compute()).abs() < 1e-9);
            prop_assert!((s.total_compute() - a.total_compute()).abs() < 1e-9);
            for r in [&s, &o, &a] {
                let max_end = r.compute.iter().flatten().chain(&r.comm).map(|x| x.1).fold(0.0, f64::max);
                prop_assert_eq!(r.makespan, max_end);
                for w in 0..compute.len() {
                    for pair in r.compute[w].windows(2) {
                        prop_assert!(pair[0].1 <= pair[1].0);
                    }
                }
                for pair in r.comm.windows(2) {
                    prop_assert!(pair[0].1 <= pair[1].0);
                }
                prop_assert!(r.idle.iter().all(|&i| i >= -1e-12));
            }
        }
    }
}
