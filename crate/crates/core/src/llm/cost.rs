//! Dollar accounting for token usage.
//!
//! Money is held as integer nanodollars. Prices with up to three decimals
//! per million tokens (e.g. $0.30/M) are then exact per token, so stage
//! totals add up without float drift. Rounding to cents happens only when a
//! table is rendered.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::{Add, AddAssign};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::TokenUsage;

const NANOS_PER_USD: i64 = 1_000_000_000;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Money(pub i64);

impl Money {
    pub const ZERO: Money = Money(0);

    pub fn from_usd(usd: f64) -> Self {
        Money((usd * NANOS_PER_USD as f64).round() as i64)
    }

    pub fn usd(self) -> f64 {
        self.0 as f64 / NANOS_PER_USD as f64
    }

    /// Whole cents, rounded half away from zero.
    pub fn cents(self) -> i64 {
        let per_cent = NANOS_PER_USD / 100;
        let q = self.0 / per_cent;
        let r = self.0 % per_cent;
        if r.abs() * 2 >= per_cent {
            q + self.0.signum()
        } else {
            q
        }
    }
}

impl Add for Money {
    type Output = Money;
    fn add(self, rhs: Money) -> Money {
        Money(self.0 + rhs.0)
    }
}

impl AddAssign for Money {
    fn add_assign(&mut self, rhs: Money) {
        self.0 += rhs.0;
    }
}

impl std::iter::Sum for Money {
    fn sum<I: Iterator<Item = Money>>(iter: I) -> Money {
        iter.fold(Money::ZERO, Add::add)
    }
}

impl fmt::Display for Money {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let c = self.cents();
        let sign = if c < 0 { "-" } else { "" };
        write!(f, "{sign}{}.{:02}", c.abs() / 100, c.abs() % 100)
    }
}

/// USD per million tokens for each usage class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriceTable {
    pub input: f64,
    pub output: f64,
    pub cache_read: f64,
    pub cache_write: f64,
}

impl Default for PriceTable {
    /// Claude 3.5 Sonnet list prices.
    fn default() -> Self {
        Self {
            input: 3.0,
            output: 15.0,
            cache_read: 0.3,
            cache_write: 3.75,
        }
    }
}

impl PriceTable {
    pub fn validate(&self) -> Result<(), String> {
        let all = [self.input, self.output, self.cache_read, self.cache_write];
        if all.iter().all(|p| p.is_finite() && *p >= 0.0) {
            Ok(())
        } else {
            Err(format!("prices must be finite and nonnegative: {self:?}"))
        }
    }

    fn nanos_per_token(usd_per_million: f64) -> i64 {
        // $/M tokens == 1000 * n$/token
        (usd_per_million * 1000.0).round() as i64
    }

    pub fn class_costs(&self, usage: &TokenUsage) -> ClassCosts {
        let cost = |tokens: u64, price: f64| Money(tokens as i64 * Self::nanos_per_token(price));
        ClassCosts {
            input: cost(usage.input_tokens, self.input),
            output: cost(usage.output_tokens, self.output),
            cache_read: cost(usage.cache_read_tokens, self.cache_read),
            cache_write: cost(usage.cache_write_tokens, self.cache_write),
        }
    }
}

/// Dollar cost of `usage`: sum over classes of count / 10^6 * price.
pub fn usage_cost(usage: &TokenUsage, prices: &PriceTable) -> Money {
    prices.class_costs(usage).total()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCosts {
    pub input: Money,
    pub output: Money,
    pub cache_read: Money,
    pub cache_write: Money,
}

impl ClassCosts {
    pub fn total(&self) -> Money {
        self.input + self.output + self.cache_read + self.cache_write
    }
}

impl Add for ClassCosts {
    type Output = ClassCosts;
    fn add(self, rhs: ClassCosts) -> ClassCosts {
        ClassCosts {
            input: self.input + rhs.input,
            output: self.output + rhs.output,
            cache_read: self.cache_read + rhs.cache_read,
            cache_write: self.cache_write + rhs.cache_write,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Relevance,
    Ranking,
    GenTests,
    GenEdits,
    Selection,
    Other,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Relevance,
        Stage::Ranking,
        Stage::GenTests,
        Stage::GenEdits,
        Stage::Selection,
        Stage::Other,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Stage::Relevance => "Relevance",
            Stage::Ranking => "Ranking",
            Stage::GenTests => "Gen. tests",
            Stage::GenEdits => "Gen. edits",
            Stage::Selection => "Selection",
            Stage::Other => "Other",
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageEntry {
    pub usage: TokenUsage,
    pub api: ClassCosts,
    pub local: Money,
}

impl StageEntry {
    pub fn total(&self) -> Money {
        self.api.total() + self.local
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LedgerError {
    #[error("ledger has no recorded stages")]
    Empty,
}

/// Append-only per-stage accumulator; safe to share between workers.
#[derive(Debug, Default)]
pub struct CostLedger {
    prices: PriceTable,
    entries: Mutex<BTreeMap<Stage, StageEntry>>,
}

impl CostLedger {
    pub fn new(prices: PriceTable) -> Self {
        Self {
            prices,
            entries: Mutex::new(BTreeMap::new()),
        }
    }

    pub fn prices(&self) -> &PriceTable {
        &self.prices
    }

    pub fn record_usage(&self, stage: Stage, usage: TokenUsage) {
        let api = self.prices.class_costs(&usage);
        let mut entries = self.entries.lock().unwrap();
        let entry = entries.entry(stage).or_default();
        entry.usage = entry.usage + usage;
        entry.api = entry.api + api;
    }

    /// Adds already-priced API costs, e.g. imported from another accounting source.
    pub fn record_api_costs(&self, stage: Stage, costs: ClassCosts) {
        let mut entries = self.entries.lock().unwrap();
        let entry = entries.entry(stage).or_default();
        entry.api = entry.api + costs;
    }

    pub fn record_local(&self, stage: Stage, usd: Money) {
        let mut entries = self.entries.lock().unwrap();
        entries.entry(stage).or_default().local += usd;
    }

    /// Consistent copy of all entries.
    pub fn snapshot(&self) -> BTreeMap<Stage, StageEntry> {
        self.entries.lock().unwrap().clone()
    }

    pub fn grand_total(&self) -> Money {
        self.snapshot().values().map(StageEntry::total).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostRow {
    pub label: String,
    pub input: Money,
    pub output: Money,
    pub cache_read: Money,
    pub cache_write: Money,
    pub local: Money,
    pub total: Money,
    /// Share of the grand total in percent (unrounded).
    pub percent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostTable {
    pub rows: Vec<CostRow>,
    pub total: CostRow,
}

impl CostTable {
    pub fn row(&self, label: &str) -> Option<&CostRow> {
        self.rows.iter().find(|r| r.label == label)
    }
}

/// Per-stage cost table in fixed stage order with a total row.
pub fn render_ledger(ledger: &CostLedger) -> Result<CostTable, LedgerError> {
    let entries = ledger.snapshot();
    if entries.is_empty() {
        return Err(LedgerError::Empty);
    }
    let grand: Money = entries.values().map(StageEntry::total).sum();
    let recorded = entries.len() as f64;
    let percent = |recorded_stage: bool, m: Money| {
        if grand == Money::ZERO {
            if recorded_stage {
                100.0 / recorded
            } else {
                0.0
            }
        } else {
            m.0 as f64 / grand.0 as f64 * 100.0
        }
    };
    let row = |label: &str, e: &StageEntry, pct: f64| CostRow {
        label: label.to_string(),
        input: e.api.input,
        output: e.api.output,
        cache_read: e.api.cache_read,
        cache_write: e.api.cache_write,
        local: e.local,
        total: e.total(),
        percent: pct,
    };
    let mut rows = Vec::new();
    let mut sum = StageEntry::default();
    for stage in Stage::ALL {
        let recorded_stage = entries.contains_key(&stage);
        let entry = entries.get(&stage).copied().unwrap_or_default();
        if stage != Stage::Other || recorded_stage {
            rows.push(row(stage.label(), &entry, percent(recorded_stage, entry.total())));
        }
        sum.usage = sum.usage + entry.usage;
        sum.api = sum.api + entry.api;
        sum.local += entry.local;
    }
    let total = row("Total", &sum, 100.0);
    Ok(CostTable { rows, total })
}

impl fmt::Display for CostTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<12} {:>10} {:>10} {:>11} {:>11} {:>10} {:>20}",
            "Stage", "Input", "Output", "Cache read", "Cache write", "Local", "Total USD (%)"
        )?;
        for r in self.rows.iter().chain(std::iter::once(&self.total)) {
            let total = format!("{} ({:.1}%)", r.total, r.percent);
            writeln!(
                f,
                "{:<12} {:>10} {:>10} {:>11} {:>11} {:>10} {:>20}",
                r.label,
                r.input.to_string(),
                r.output.to_string(),
                r.cache_read.to_string(),
                r.cache_write.to_string(),
                r.local.to_string(),
                total
            )?;
        }
        Ok(())
    }
}
