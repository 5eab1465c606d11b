//! Near-line serving: decode once, filter by tag, keep the top three by
//! sequence log-probability and cache the answer for a TTL.
//!
//! Cache file format:
//!
//! ```text
//! qralign-cache 1 <checkpoint sha256> <ttl seconds>
//! <query>\t<created_at epoch seconds>\t<rewrites joined by U+001F>
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::RwLock;
use std::time::{SystemTime, UNIX_EPOCH};

use crate::catalog::normalize;
use crate::error::{Error, Result};
use crate::eval::{surviving_rewrites, EvalConfig};
use crate::policy::{checkpoint, Policy};
use crate::seed::sha256_hex;

pub const CACHE_MAGIC: &str = "qralign-cache";
pub const DEFAULT_TTL_SECS: u64 = 14 * 24 * 60 * 60;
pub const SERVED_REWRITES: usize = 3;
const UNIT_SEPARATOR: char = '\u{1f}';

/// Source of wall-clock time in epoch seconds.
pub trait Clock: Send + Sync {
    fn now(&self) -> u64;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> u64 {
        SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
    }
}

/// Clock that only moves when told to.
#[derive(Debug, Default)]
pub struct ManualClock(AtomicU64);

impl ManualClock {
    pub fn new(start: u64) -> Self {
        Self(AtomicU64::new(start))
    }

    pub fn advance(&self, secs: u64) {
        self.0.fetch_add(secs, Ordering::SeqCst);
    }

    pub fn set(&self, secs: u64) {
        self.0.store(secs, Ordering::SeqCst);
    }
}

impl Clock for ManualClock {
    fn now(&self) -> u64 {
        self.0.load(Ordering::SeqCst)
    }
}

impl<C: Clock + ?Sized> Clock for &C {
    fn now(&self) -> u64 {
        (**self).now()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CacheEntry {
    pub query: String,
    pub rewrites: Vec<String>,
    pub created_at: u64,
    pub ttl: u64,
}

impl CacheEntry {
    /// Live for `ttl` seconds after creation, expired from then on.
    pub fn is_fresh(&self, now: u64) -> bool {
        now < self.created_at.saturating_add(self.ttl)
    }
}

/// TTL cache keyed by normalized query text and bound to one checkpoint.
#[derive(Debug)]
pub struct RewriteCache {
    ttl: u64,
    checkpoint_hash: String,
    entries: RwLock<BTreeMap<String, CacheEntry>>,
}

impl RewriteCache {
    pub fn new(ttl: u64, checkpoint_hash: impl Into<String>) -> Self {
        Self {
            ttl,
            checkpoint_hash: checkpoint_hash.into(),
            entries: RwLock::new(BTreeMap::new()),
        }
    }

    pub fn ttl(&self) -> u64 {
        self.ttl
    }

    pub fn checkpoint_hash(&self) -> &str {
        &self.checkpoint_hash
    }

    pub fn len(&self) -> usize {
        self.read().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn read(&self) -> std::sync::RwLockReadGuard<'_, BTreeMap<String, CacheEntry>> {
        self.entries.read().unwrap_or_else(|p| p.into_inner())
    }

    fn write(&self) -> std::sync::RwLockWriteGuard<'_, BTreeMap<String, CacheEntry>> {
        self.entries.write().unwrap_or_else(|p| p.into_inner())
    }

    pub fn get(&self, query: &str, now: u64) -> Option<CacheEntry> {
        self.read().get(&normalize(query)).filter(|e| e.is_fresh(now)).cloned()
    }

    pub fn insert(&self, query: &str, rewrites: Vec<String>, now: u64) -> CacheEntry {
        let key = normalize(query);
        let entry = CacheEntry {
            query: key.clone(),
            rewrites,
            created_at: now,
            ttl: self.ttl,
        };
        self.write().insert(key, entry.clone());
        entry
    }

    /// Drops expired entries; returns how many were removed.
    pub fn purge(&self, now: u64) -> usize {
        let mut entries = self.write();
        let before = entries.len();
        entries.retain(|_, e| e.is_fresh(now));
        before - entries.len()
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{CACHE_MAGIC} 1 {} {}\n", self.checkpoint_hash, self.ttl);
        for e in self.read().values() {
            let joined: Vec<&str> = e.rewrites.iter().map(String::as_str).collect();
            let _ = writeln!(out, "{}\t{}\t{}", e.query, e.created_at, joined.join(&UNIT_SEPARATOR.to_string()));
        }
        out
    }

    /// Parses a persisted cache. A cache written for a different checkpoint
    /// comes back empty.
    pub fn from_text(text: &str, checkpoint_hash: &str, ttl: u64) -> Result<Self> {
        let bad = |why: String| Error::Malformed(format!("cache: {why}"));
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad("empty file".into()))?;
        let fields: Vec<&str> = header.split(' ').collect();
        if fields.len() != 4 || fields[0] != CACHE_MAGIC || fields[1] != "1" {
            return Err(bad(format!("bad header {header:?}")));
        }
        let cache = Self::new(ttl, checkpoint_hash);
        if fields[2] != checkpoint_hash {
            return Ok(cache);
        }
        {
            let mut entries = cache.write();
            for line in lines.filter(|l| !l.is_empty()) {
                let mut parts = line.split('\t');
                let (Some(query), Some(created), Some(rewrites), None) =
                    (parts.next(), parts.next(), parts.next(), parts.next())
                else {
                    return Err(bad(format!("bad line {line:?}")));
                };
                let created_at = created
                    .parse()
                    .map_err(|_| bad(format!("bad timestamp {created:?}")))?;
                let rewrites: Vec<String> = if rewrites.is_empty() {
                    Vec::new()
                } else {
                    rewrites.split(UNIT_SEPARATOR).map(str::to_string).collect()
                };
                if rewrites.len() > SERVED_REWRITES {
                    return Err(bad(format!("more than {SERVED_REWRITES} rewrites for {query:?}")));
                }
                entries.insert(
                    query.to_string(),
                    CacheEntry {
                        query: query.to_string(),
                        rewrites,
                        created_at,
                        ttl,
                    },
                );
            }
        }
        Ok(cache)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    /// Loads a cache file, or starts empty when the file does not exist.
    pub fn load_or_new(path: &Path, checkpoint_hash: &str, ttl: u64) -> Result<Self> {
        match std::fs::read_to_string(path) {
            Ok(text) => Self::from_text(&text, checkpoint_hash, ttl),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Self::new(ttl, checkpoint_hash)),
            Err(e) => Err(Error::io(path, e)),
        }
    }
}

pub fn checkpoint_hash(policy: &Policy) -> String {
    sha256_hex(checkpoint::to_text(policy).as_bytes())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Served {
    pub rewrites: Vec<String>,
    pub cache_hit: bool,
    pub created_at: u64,
}

pub struct Server<C: Clock> {
    pub policy: Policy,
    pub cache: RewriteCache,
    pub clock: C,
    decode: EvalConfig,
    decodes: AtomicUsize,
}

impl<C: Clock> Server<C> {
    /// `beam_size` and `max_len` come from `decode`; the served count is
    /// always three.
    pub fn new(policy: Policy, cache: RewriteCache, clock: C, decode: &EvalConfig) -> Result<Self> {
        let decode = EvalConfig {
            rewrite_count: SERVED_REWRITES,
            ..*decode
        };
        decode.validate()?;
        let hash = checkpoint_hash(&policy);
        let cache = if cache.checkpoint_hash() == hash {
            cache
        } else {
            RewriteCache::new(cache.ttl(), hash)
        };
        Ok(Self {
            policy,
            cache,
            clock,
            decode,
            decodes: AtomicUsize::new(0),
        })
    }

    /// Number of model decodes performed so far.
    pub fn decodes(&self) -> usize {
        self.decodes.load(Ordering::SeqCst)
    }

    pub fn serve(&self, query: &str) -> Result<Served> {
        let now = self.clock.now();
        if let Some(entry) = self.cache.get(query, now) {
            return Ok(Served {
                rewrites: entry.rewrites,
                cache_hit: true,
                created_at: entry.created_at,
            });
        }
        self.decodes.fetch_add(1, Ordering::SeqCst);
        let survivors = surviving_rewrites(&self.policy, query, &self.decode)?;
        let entry = self.cache.insert(query, survivors.rewrites, now);
        Ok(Served {
            rewrites: entry.rewrites,
            cache_hit: false,
            created_at: entry.created_at,
        })
    }
}
