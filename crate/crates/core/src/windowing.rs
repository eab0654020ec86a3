//! Tuple-count sliding windows.
//!
//! A window of `size` tuples advances every `slide` tuples, so it always
//! covers the `k = size / slide` most recent slide periods. Entries (cell
//! groups on the detect side, cell groups of the violation graph on the
//! repair side) live in a [`KListQueue`] bucket matching the period of
//! their last update; dropping the oldest bucket evicts exactly the entries
//! with no cell left in the window. Cells that are older than the window
//! but belong to surviving entries are found through an [`ExpiryLog`].

use std::collections::{BTreeMap, VecDeque};

use rustc_hash::{FxHashMap as HashMap, FxHashSet as HashSet};
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::error::ConfigError;
use crate::model::TupleId;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WindowStrategy {
    /// Only cells inside the window contribute to repairs.
    Basic,
    /// Evicted cells keep contributing their counts while their cell group
    /// stays alive.
    Cumulative,
}

impl std::str::FromStr for WindowStrategy {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "basic" => Ok(Self::Basic),
            "cumulative" => Ok(Self::Cumulative),
            other => Err(ConfigError::Invalid(format!(
                "unknown window strategy `{other}`"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawWindow")]
pub struct WindowConfig {
    pub size: u64,
    pub slide: u64,
    pub strategy: WindowStrategy,
}

#[derive(Deserialize)]
struct RawWindow {
    size: u64,
    slide: u64,
    strategy: WindowStrategy,
}

impl TryFrom<RawWindow> for WindowConfig {
    type Error = ConfigError;

    fn try_from(r: RawWindow) -> Result<Self, ConfigError> {
        WindowConfig::new(r.size, r.slide, r.strategy)
    }
}

impl WindowConfig {
    pub fn new(size: u64, slide: u64, strategy: WindowStrategy) -> Result<Self, ConfigError> {
        if slide == 0 || size < slide || !size.is_multiple_of(slide) {
            return Err(ConfigError::WindowRatio { size, slide });
        }
        Ok(Self {
            size,
            slide,
            strategy,
        })
    }

    /// Number of slide periods covered by one window.
    pub fn k(&self) -> usize {
        (self.size / self.slide) as usize
    }
}

/// A slide of the window: every stored cell with an id below `lo` is out.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Slide {
    pub lo: TupleId,
}

/// Tracks the arrival count and announces slides.
#[derive(Clone, Debug)]
pub struct WindowClock {
    config: Option<WindowConfig>,
    arrivals: u64,
    period: u64,
    /// First tuple id of each of the last `k` periods.
    period_starts: VecDeque<TupleId>,
}

impl WindowClock {
    pub fn new(config: Option<WindowConfig>) -> Self {
        Self {
            config,
            arrivals: 0,
            period: 0,
            period_starts: VecDeque::new(),
        }
    }

    /// Registers the arrival of `id` and returns the slide that must be
    /// applied before that tuple is processed, if any.
    pub fn arrive(&mut self, id: TupleId) -> Option<Slide> {
        let cfg = self.config?;
        self.arrivals += 1;
        let period = (self.arrivals - 1) / cfg.slide;
        let first = self.arrivals == 1;
        if !first && period == self.period {
            return None;
        }
        self.period = period;
        self.period_starts.push_back(id);
        if self.period_starts.len() > cfg.k() {
            self.period_starts.pop_front();
        }
        if first {
            return None;
        }
        Some(Slide {
            lo: *self.period_starts.front().expect("non-empty"),
        })
    }

    pub fn arrivals(&self) -> u64 {
        self.arrivals
    }
}

/// FIFO queue of `k` buckets. An entry sits in the bucket of the slide
/// period in which it was last touched; the front bucket is the oldest.
#[derive(Clone, Debug)]
pub struct KListQueue<K: Eq + Hash + Clone> {
    buckets: VecDeque<HashSet<K>>,
    /// Generation of the bucket holding each entry.
    home: HashMap<K, u64>,
    /// Generation of `buckets[0]`.
    front_gen: u64,
}

impl<K: Eq + Hash + Clone> KListQueue<K> {
    pub fn new(k: usize) -> Self {
        assert!(k >= 1);
        Self {
            buckets: (0..k).map(|_| HashSet::default()).collect(),
            home: HashMap::default(),
            front_gen: 0,
        }
    }

    pub fn k(&self) -> usize {
        self.buckets.len()
    }

    fn newest_gen(&self) -> u64 {
        self.front_gen + self.buckets.len() as u64 - 1
    }

    /// Moves (or inserts) `entry` into the newest bucket.
    pub fn touch(&mut self, entry: &K) {
        let newest = self.newest_gen();
        match self.home.get_mut(entry) {
            Some(g) if *g == newest => {}
            Some(g) => {
                let old = (*g - self.front_gen) as usize;
                *g = newest;
                self.buckets[old].remove(entry);
                self.buckets.back_mut().unwrap().insert(entry.clone());
            }
            None => {
                self.home.insert(entry.clone(), newest);
                self.buckets.back_mut().unwrap().insert(entry.clone());
            }
        }
    }

    pub fn remove(&mut self, entry: &K) -> bool {
        match self.home.remove(entry) {
            Some(g) => {
                self.buckets[(g - self.front_gen) as usize].remove(entry);
                true
            }
            None => false,
        }
    }

    /// Drops the oldest bucket, returning its entries, and opens a new one.
    pub fn slide(&mut self) -> Vec<K> {
        let dropped = self.buckets.pop_front().unwrap_or_default();
        self.front_gen += 1;
        self.buckets.push_back(HashSet::default());
        for k in &dropped {
            self.home.remove(k);
        }
        dropped.into_iter().collect()
    }

    /// 1-based bucket position of `entry` (k is the newest).
    pub fn position(&self, entry: &K) -> Option<usize> {
        self.home
            .get(entry)
            .map(|g| (g - self.front_gen) as usize + 1)
    }

    pub fn len(&self) -> usize {
        self.home.len()
    }

    pub fn is_empty(&self) -> bool {
        self.home.is_empty()
    }
}

/// Index from tuple id to the entries holding a cell of that tuple.
#[derive(Clone, Debug)]
pub struct ExpiryLog<K> {
    by_tuple: BTreeMap<TupleId, Vec<K>>,
}

impl<K> Default for ExpiryLog<K> {
    fn default() -> Self {
        Self {
            by_tuple: BTreeMap::new(),
        }
    }
}

impl<K> ExpiryLog<K> {
    pub fn record(&mut self, id: TupleId, key: K) {
        self.by_tuple.entry(id).or_default().push(key);
    }

    /// Removes and returns every record with an id below `lo`.
    pub fn expire_below(&mut self, lo: TupleId) -> Vec<(TupleId, K)> {
        let keep = self.by_tuple.split_off(&lo);
        let expired = std::mem::replace(&mut self.by_tuple, keep);
        expired
            .into_iter()
            .flat_map(|(id, ks)| ks.into_iter().map(move |k| (id, k)))
            .collect()
    }

    pub fn is_empty(&self) -> bool {
        self.by_tuple.is_empty()
    }
}
