use std::collections::{BTreeMap, HashMap, VecDeque};
use std::hash::{Hash, Hasher};

use serde::{Deserialize, Serialize};

use super::PipelineError;

/// Splits on runs of ASCII non-alphanumeric characters and lowercases.
/// Invalid UTF-8 is decoded lossily.
pub fn tokenize(value: &[u8], mut emit: impl FnMut(&str)) {
    let text = String::from_utf8_lossy(value);
    for token in text.split(|c: char| c.is_ascii() && !c.is_ascii_alphanumeric()) {
        if token.is_empty() {
            continue;
        }
        if token.bytes().any(|b| b.is_ascii_uppercase() || !b.is_ascii()) {
            emit(&token.to_lowercase());
        } else {
            emit(token);
        }
    }
}

/// Substring predicate on raw bytes; the empty pattern matches everything.
#[derive(Clone, Debug)]
pub struct Filter {
    pattern: Vec<u8>,
}

impl Filter {
    pub fn new(pattern: impl Into<Vec<u8>>) -> Self {
        Self {
            pattern: pattern.into(),
        }
    }

    pub fn pattern(&self) -> &[u8] {
        &self.pattern
    }

    pub fn matches(&self, value: &[u8]) -> bool {
        let p = &self.pattern[..];
        match p.len() {
            0 => true,
            n if n > value.len() => false,
            _ => {
                let first = p[0];
                value
                    .iter()
                    .enumerate()
                    .take(value.len() - p.len() + 1)
                    .any(|(i, &b)| b == first && &value[i..i + p.len()] == p)
            }
        }
    }
}

/// Stable key routing: the same key always lands on the same task.
pub fn key_task(key: &str, tasks: usize) -> usize {
    let mut h = std::hash::DefaultHasher::new();
    key.hash(&mut h);
    (h.finish() % tasks as u64) as usize
}

/// Running per-key sum, emitting the updated total for every input.
#[derive(Debug, Default)]
pub struct KeyedSum {
    totals: HashMap<String, u64>,
}

impl KeyedSum {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, key: &str, n: u64) -> u64 {
        match self.totals.get_mut(key) {
            Some(t) => {
                *t += n;
                *t
            }
            None => {
                self.totals.insert(key.to_string(), n);
                n
            }
        }
    }

    pub fn totals(&self) -> &HashMap<String, u64> {
        &self.totals
    }

    pub fn into_totals(self) -> HashMap<String, u64> {
        self.totals
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WindowKind {
    /// Sizes in elements per key.
    Count,
    /// Sizes in milliseconds of arrival time.
    Time,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub kind: WindowKind,
    pub size: u64,
    pub slide: u64,
}

impl WindowSpec {
    pub fn count(size: u64, slide: u64) -> Self {
        Self {
            kind: WindowKind::Count,
            size,
            slide,
        }
    }

    pub fn time_ms(size: u64, slide: u64) -> Self {
        Self {
            kind: WindowKind::Time,
            size,
            slide,
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.size == 0 || self.slide == 0 {
            return Err(PipelineError::Config("window size and slide must be positive".into()));
        }
        if self.slide > self.size {
            return Err(PipelineError::Config("window slide exceeds size".into()));
        }
        if self.kind == WindowKind::Time && self.size % self.slide != 0 {
            return Err(PipelineError::Config("time window size must be a multiple of the slide".into()));
        }
        Ok(())
    }
}

impl Default for WindowSpec {
    /// Five-second windows sliding every second.
    fn default() -> Self {
        Self::time_ms(5000, 1000)
    }
}

/// One window result. `end` is the element count (count windows) or the
/// exclusive end in ms since run start (time windows).
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct WindowEmission {
    pub key: String,
    pub end: u64,
    pub sum: u64,
}

/// Sliding count windows per key: once a key has seen `size` elements, emits
/// the sum of its last `size` elements every `slide` elements.
#[derive(Debug)]
pub struct CountWindows {
    size: u64,
    slide: u64,
    state: HashMap<String, (u64, VecDeque<u64>)>,
}

impl CountWindows {
    pub fn new(size: u64, slide: u64) -> Self {
        Self {
            size,
            slide,
            state: HashMap::new(),
        }
    }

    pub fn add(&mut self, key: &str, value: u64, mut emit: impl FnMut(WindowEmission)) {
        let (seen, buf) = match self.state.get_mut(key) {
            Some(s) => s,
            None => self.state.entry(key.to_string()).or_default(),
        };
        *seen += 1;
        buf.push_back(value);
        if buf.len() as u64 > self.size {
            buf.pop_front();
        }
        if *seen >= self.size && (*seen - self.size) % self.slide == 0 {
            emit(WindowEmission {
                key: key.to_string(),
                end: *seen,
                sum: buf.iter().sum(),
            });
        }
    }
}

/// Sliding processing-time windows per key, aligned to multiples of `slide`
/// since run start. The window ending at `b` covers `[b - size, b)` and fires
/// once input timestamps pass `b + slide` (the allowed lateness) or on
/// [`TimeWindows::flush`]. Pairs older than the last fired boundary are late
/// and counted, not applied.
#[derive(Debug)]
pub struct TimeWindows {
    size: u64,
    slide: u64,
    panes: BTreeMap<u64, HashMap<String, u64>>,
    /// Next window end to fire.
    next_end: Option<u64>,
    max_ts: u64,
    late: u64,
}

impl TimeWindows {
    pub fn new(size_ms: u64, slide_ms: u64) -> Self {
        Self {
            size: size_ms,
            slide: slide_ms,
            panes: BTreeMap::new(),
            next_end: None,
            max_ts: 0,
            late: 0,
        }
    }

    pub fn late(&self) -> u64 {
        self.late
    }

    pub fn add(&mut self, key: &str, ts_ms: u64, value: u64, mut emit: impl FnMut(WindowEmission)) {
        let pane = ts_ms / self.slide;
        let next_end = *self.next_end.get_or_insert((pane + 1) * self.slide);
        if ts_ms + self.size < next_end {
            // Every window containing this pair fired already.
            self.late += 1;
            return;
        }
        if ts_ms < next_end.saturating_sub(self.slide) {
            // Some containing windows fired; applying it would make them wrong.
            self.late += 1;
            return;
        }
        let counts = self.panes.entry(pane).or_default();
        match counts.get_mut(key) {
            Some(c) => *c += value,
            None => {
                counts.insert(key.to_string(), value);
            }
        }
        self.max_ts = self.max_ts.max(ts_ms);
        while let Some(end) = self.next_end.filter(|&e| self.max_ts >= e + self.slide) {
            self.fire(end, &mut emit);
        }
    }

    /// Fires every window that still contains data.
    pub fn flush(&mut self, mut emit: impl FnMut(WindowEmission)) {
        let Some(&last) = self.panes.keys().next_back() else {
            return;
        };
        let final_end = (last + 1) * self.slide + self.size - self.slide;
        while let Some(end) = self.next_end.filter(|&e| e <= final_end) {
            self.fire(end, &mut emit);
        }
    }

    fn fire(&mut self, end: u64, emit: &mut impl FnMut(WindowEmission)) {
        let start = end.saturating_sub(self.size);
        let mut sums: BTreeMap<&str, u64> = BTreeMap::new();
        for (_, counts) in self.panes.range(start / self.slide..end / self.slide) {
            for (k, &v) in counts {
                *sums.entry(k.as_str()).or_default() += v;
            }
        }
        for (key, sum) in sums {
            emit(WindowEmission {
                key: key.to_string(),
                end,
                sum,
            });
        }
        self.next_end = Some(end + self.slide);
        // Panes before the next window's start are no longer needed.
        let keep_from = (end + self.slide).saturating_sub(self.size) / self.slide;
        self.panes = self.panes.split_off(&keep_from);
    }
}

/// Nearest-rank percentile (`ceil(p * n)`-th smallest); `None` when empty.
pub fn percentile(values: &[u64], p: f64) -> Option<u64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_unstable();
    let rank = ((p * v.len() as f64).ceil() as usize).clamp(1, v.len());
    Some(v[rank - 1])
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tokens(s: &str) -> Vec<String> {
        let mut v = Vec::new();
        tokenize(s.as_bytes(), |t| v.push(t.to_string()));
        v
    }

    #[test]
    fn tokenizer_examples() {
        assert_eq!(tokens("Hello, hello world"), vec!["hello", "hello", "world"]);
        assert!(tokens("").is_empty());
        assert_eq!(tokens("--a1_B2--"), vec!["a1", "b2"]);
        assert_eq!(tokens("Ünïcode stays"), vec!["ünïcode", "stays"]);
    }

    #[test]
    fn filter_examples() {
        let f = Filter::new("needle");
        assert!(f.matches(b"haystack with needle inside"));
        assert!(!f.matches(b"needl"));
        assert!(Filter::new("").matches(b""));
    }

    #[test]
    fn keyed_sum_emits_running_totals() {
        let mut s = KeyedSum::new();
        assert_eq!(s.add("a", 1), 1);
        assert_eq!(s.add("a", 1), 2);
        assert_eq!(s.add("b", 1), 1);
    }

    #[test]
    fn tumbling_count_window() {
        let mut w = CountWindows::new(3, 3);
        let mut out = Vec::new();
        for _ in 0..6 {
            w.add("a", 1, |e| out.push(e.sum));
        }
        assert_eq!(out, vec![3, 3]);
    }

    #[test]
    fn percentile_nearest_rank() {
        assert_eq!(percentile(&[120, 80, 100], 0.5), Some(100));
        assert_eq!(percentile(&[100, 100, 100], 0.5), Some(100));
        assert_eq!(percentile(&[1, 2, 3, 4], 0.5), Some(2));
        assert_eq!(percentile(&[], 0.5), None);
    }

    #[test]
    fn window_spec_validation() {
        assert!(WindowSpec::count(3, 4).validate().is_err());
        assert!(WindowSpec::time_ms(5000, 1500).validate().is_err());
        assert!(WindowSpec::default().validate().is_ok());
    }

    /// Brute-force count windows: the n-th element (1-based) closes a window
    /// when n >= size and (n - size) is a multiple of slide.
    fn count_oracle(values: &[u64], size: usize, slide: usize) -> Vec<u64> {
        (1..=values.len())
            .filter(|&n| n >= size && (n - size) % slide == 0)
            .map(|n| values[n - size..n].iter().sum())
            .collect()
    }

    /// Brute-force time windows over a timeline: every aligned end from the
    /// first pane's end until the last window holding data.
    fn time_oracle(events: &[(String, u64)], size: u64, slide: u64) -> Vec<WindowEmission> {
        let Some(min) = events.iter().map(|e| e.1).min() else {
            return Vec::new();
        };
        let max = events.iter().map(|e| e.1).max().unwrap();
        let mut out = Vec::new();
        let mut end = (min / slide + 1) * slide;
        while end < max + size + slide && end.saturating_sub(size) <= max {
            let mut sums: BTreeMap<&str, u64> = BTreeMap::new();
            for (k, t) in events {
                if *t + size >= end && *t < end {
                    *sums.entry(k).or_default() += 1;
                }
            }
            out.extend(sums.into_iter().map(|(k, sum)| WindowEmission {
                key: k.to_string(),
                end,
                sum,
            }));
            end += slide;
        }
        out
    }

    proptest! {
        #[test]
        fn count_windows_match_brute_force(
            values in proptest::collection::vec(0u64..10, 0..60),
            size in 1usize..8,
            slide_frac in 1usize..8,
        ) {
            let slide = slide_frac.min(size);
            let mut w = CountWindows::new(size as u64, slide as u64);
            let mut got = Vec::new();
            for &v in &values {
                w.add("k", v, |e| got.push(e.sum));
            }
            prop_assert_eq!(got, count_oracle(&values, size, slide));
        }

        // In-order timelines (the lateness rule never drops anything) must
        // match the brute-force sliding sums exactly.
        #[test]
        fn time_windows_match_brute_force(
            gaps in proptest::collection::vec((0u64..700, 0usize..3), 1..120),
            slide in 1u64..4,
            mult in 1u64..5,
        ) {
            let slide = slide * 250;
            let size = slide * mult;
            let keys = ["a", "b", "c"];
            let mut t = 0;
            let events: Vec<(String, u64)> = gaps
                .iter()
                .map(|&(g, k)| {
                    t += g;
                    (keys[k].to_string(), t)
                })
                .collect();
            let mut w = TimeWindows::new(size, slide);
            let mut got = Vec::new();
            for (k, ts) in &events {
                w.add(k, *ts, 1, |e| got.push(e));
            }
            w.flush(|e| got.push(e));
            prop_assert_eq!(w.late(), 0);
            let mut want = time_oracle(&events, size, slide);
            got.sort();
            want.sort();
            prop_assert_eq!(got, want);
        }
    }
}
