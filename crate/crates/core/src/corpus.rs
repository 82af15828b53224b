//! Bundled example workloads with their expected outcomes.

use serde::{Deserialize, Serialize};

use crate::detect::Category;
use crate::error::{Error, Result};
use crate::pipeline::{report, Report};
use crate::replay::{record, ReplayOptions, DEFAULT_SEED};
use crate::workload::{parse_workload, WorkloadProgram};

/// What a bundled workload is expected to produce.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Expectation {
    /// Most frequent pair category.
    pub dominant: Category,
    /// Dominant category of the top-ranked group.
    #[serde(default)]
    pub top_group: Option<Category>,
    /// Recording seed; defaults to the crate default.
    #[serde(default)]
    pub seed: Option<u64>,
    /// Recorded makespan under `seed`.
    #[serde(default)]
    pub makespan: Option<u64>,
}

#[derive(Debug, Clone, Copy)]
pub struct Entry {
    pub name: &'static str,
    pub source: &'static str,
    expect: &'static str,
}

impl Entry {
    pub fn program(&self) -> Result<WorkloadProgram> {
        parse_workload(self.source)
    }

    pub fn expectation(&self) -> Expectation {
        toml::from_str(self.expect).expect("bundled expectation parses")
    }

    pub fn seed(&self) -> u64 {
        self.expectation().seed.unwrap_or(DEFAULT_SEED)
    }

    /// Records under the expected seed and analyzes the trace.
    pub fn run(&self, opts: &ReplayOptions) -> Result<Report> {
        let (trace, _) = record(&self.program()?, self.seed())?;
        report(&trace, opts)
    }
}

macro_rules! entries {
    ($($name:literal),* $(,)?) => {
        &[$(Entry {
            name: $name,
            source: include_str!(concat!("../corpus/", $name, ".wl")),
            expect: include_str!(concat!("../corpus/", $name, ".toml")),
        }),*]
    };
}

const ENTRIES: &[Entry] = entries!(
    "cache_timedwait",
    "causal_topology",
    "coarse_partition",
    "condvar_reacquire",
    "fil_space_lookup",
    "global_read_lock",
    "lockset_chain",
    "nested_consumer",
    "null_lock_guard",
    "query_cache_search",
    "redundant_write",
    "slot_fields",
    "spin_wait",
    "sync_defer",
    "thd_abort",
    "thd_members",
    "tie_order",
    "trx_list_scan",
);

pub fn list() -> &'static [Entry] {
    ENTRIES
}

pub fn get(name: &str) -> Result<&'static Entry> {
    ENTRIES
        .iter()
        .find(|e| e.name == name)
        .ok_or_else(|| Error::UnknownWorkload(name.to_string()))
}
