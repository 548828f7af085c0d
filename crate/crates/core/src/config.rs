//! Runtime configuration resolved from `UMAP_*` environment variables,
//! programmatic overrides and defaults.
//!
//! A [`RuntimeConfig`] is validated on every construction path, so holding
//! one means every invariant holds. Once an engine starts it keeps a frozen
//! copy; overrides applied to a frozen copy fail with
//! [`ConfigError::ImmutableAtRuntime`].

use std::collections::HashMap;

use thiserror::Error;

pub const ENV_PAGE_SIZE: &str = "UMAP_PAGESIZE";
pub const ENV_BUFFER_SIZE: &str = "UMAP_BUFSIZE";
pub const ENV_PAGE_FILLERS: &str = "UMAP_PAGE_FILLERS";
pub const ENV_PAGE_EVICTORS: &str = "UMAP_PAGE_EVICTORS";
pub const ENV_HIGH_WATER: &str = "UMAP_EVICT_HIGH_WATER_THRESHOLD";
pub const ENV_LOW_WATER: &str = "UMAP_EVICT_LOW_WATER_THRESHOLD";
pub const ENV_READ_AHEAD: &str = "UMAP_READ_AHEAD";
pub const ENV_MAX_FAULT_EVENTS: &str = "UMAP_MAX_FAULT_EVENTS";

/// Every environment variable the loader understands.
pub const ENV_VARIABLES: [&str; 8] = [
    ENV_PAGE_SIZE,
    ENV_BUFFER_SIZE,
    ENV_PAGE_FILLERS,
    ENV_PAGE_EVICTORS,
    ENV_HIGH_WATER,
    ENV_LOW_WATER,
    ENV_READ_AHEAD,
    ENV_MAX_FAULT_EVENTS,
];

pub const DEFAULT_HIGH_WATERMARK: u8 = 90;
pub const DEFAULT_LOW_WATERMARK: u8 = 70;
pub const DEFAULT_READ_AHEAD: usize = 0;
pub const DEFAULT_MANAGERS: usize = 1;
/// Percentage of available memory used for the page buffer when unset.
pub const DEFAULT_BUFFER_PERCENT: u64 = 80;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ConfigError {
    #[error("malformed value {value:?} for {variable}: {reason}")]
    MalformedValue {
        variable: String,
        value: String,
        reason: String,
    },
    #[error("invalid combination involving {variable}: {reason}")]
    InvalidCombination { variable: String, reason: String },
    #[error("configuration is frozen once the engine has started ({variable})")]
    ImmutableAtRuntime { variable: String },
}

impl ConfigError {
    /// Name of the variable (or field) the error is about.
    pub fn variable(&self) -> &str {
        match self {
            ConfigError::MalformedValue { variable, .. }
            | ConfigError::InvalidCombination { variable, .. }
            | ConfigError::ImmutableAtRuntime { variable } => variable,
        }
    }
}

/// Fields that can be overridden programmatically.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ConfigField {
    PageSize,
    BufferCapacity,
    Fillers,
    Evictors,
    HighWatermark,
    LowWatermark,
    ReadAhead,
    MaxFaultEvents,
    Managers,
}

impl ConfigField {
    /// The environment variable backing this field. Managers have none.
    pub fn env_name(self) -> &'static str {
        match self {
            ConfigField::PageSize => ENV_PAGE_SIZE,
            ConfigField::BufferCapacity => ENV_BUFFER_SIZE,
            ConfigField::Fillers => ENV_PAGE_FILLERS,
            ConfigField::Evictors => ENV_PAGE_EVICTORS,
            ConfigField::HighWatermark => ENV_HIGH_WATER,
            ConfigField::LowWatermark => ENV_LOW_WATER,
            ConfigField::ReadAhead => ENV_READ_AHEAD,
            ConfigField::MaxFaultEvents => ENV_MAX_FAULT_EVENTS,
            ConfigField::Managers => "num_managers",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RuntimeConfig {
    granularity: usize,
    page_size: usize,
    buffer_capacity: usize,
    num_fillers: usize,
    num_evictors: usize,
    num_managers: usize,
    high_watermark: u8,
    low_watermark: u8,
    read_ahead: usize,
    max_fault_events: usize,
    frozen: bool,
}

impl RuntimeConfig {
    /// Resolves a configuration on a host with the system base page size.
    pub fn load(
        environment: &HashMap<String, String>,
        hardware_threads: usize,
        available_memory: usize,
    ) -> Result<Self, ConfigError> {
        Self::load_with_granularity(
            environment,
            hardware_threads,
            available_memory,
            system_page_size(),
        )
    }

    pub fn load_with_granularity(
        environment: &HashMap<String, String>,
        hardware_threads: usize,
        available_memory: usize,
        granularity: usize,
    ) -> Result<Self, ConfigError> {
        assert!(granularity.is_power_of_two(), "granularity must be a power of two");
        let threads = hardware_threads.max(1);
        let get = |name: &str| environment.get(name).map(|v| v.trim());

        let page_size = match get(ENV_PAGE_SIZE) {
            Some(v) => parse_size(ENV_PAGE_SIZE, v)?,
            None => granularity,
        };
        if page_size == 0 || page_size % granularity != 0 {
            return Err(malformed(
                ENV_PAGE_SIZE,
                &page_size.to_string(),
                format!("must be a positive multiple of {granularity}"),
            ));
        }

        let buffer_capacity = match get(ENV_BUFFER_SIZE) {
            Some(v) => parse_size(ENV_BUFFER_SIZE, v)?,
            None => (available_memory as u128 * DEFAULT_BUFFER_PERCENT as u128 / 100) as usize,
        };
        let buffer_capacity = buffer_capacity - buffer_capacity % granularity;

        let count = |name: &str, default: usize, min: usize| -> Result<usize, ConfigError> {
            match get(name) {
                Some(v) => {
                    let n = parse_count(name, v)?;
                    if n < min {
                        return Err(malformed(name, v, format!("must be at least {min}")));
                    }
                    Ok(n)
                }
                None => Ok(default),
            }
        };
        let num_fillers = count(ENV_PAGE_FILLERS, threads, 1)?;
        let num_evictors = count(ENV_PAGE_EVICTORS, threads, 1)?;
        let max_fault_events = count(ENV_MAX_FAULT_EVENTS, threads, 1)?;
        let read_ahead = count(ENV_READ_AHEAD, DEFAULT_READ_AHEAD, 0)?;

        let high_watermark = match get(ENV_HIGH_WATER) {
            Some(v) => parse_percent(ENV_HIGH_WATER, v, 1, 100)?,
            None => DEFAULT_HIGH_WATERMARK,
        };
        let low_watermark = match get(ENV_LOW_WATER) {
            Some(v) => parse_percent(ENV_LOW_WATER, v, 0, 99)?,
            None => DEFAULT_LOW_WATERMARK,
        };

        let config = RuntimeConfig {
            granularity,
            page_size,
            buffer_capacity,
            num_fillers,
            num_evictors,
            num_managers: DEFAULT_MANAGERS,
            high_watermark,
            low_watermark,
            read_ahead,
            max_fault_events,
            frozen: false,
        };
        // Blame the low watermark only when the user actually set it.
        let watermark_var = if get(ENV_LOW_WATER).is_some() || get(ENV_HIGH_WATER).is_none() {
            ENV_LOW_WATER
        } else {
            ENV_HIGH_WATER
        };
        config.validate(watermark_var)?;
        Ok(config)
    }

    /// Reads the process environment and probes the host.
    pub fn from_process_env() -> Result<Self, ConfigError> {
        let environment: HashMap<String, String> = ENV_VARIABLES
            .iter()
            .filter_map(|name| std::env::var(name).ok().map(|v| (name.to_string(), v)))
            .collect();
        Self::load(&environment, hardware_threads(), available_memory())
    }

    /// Defaults for a host description, without reading any variables.
    pub fn defaults(hardware_threads: usize, available_memory: usize) -> Result<Self, ConfigError> {
        Self::load(&HashMap::new(), hardware_threads, available_memory)
    }

    fn validate(&self, watermark_var: &str) -> Result<(), ConfigError> {
        if self.page_size == 0 || !self.page_size.is_multiple_of(self.granularity) {
            return Err(combination(
                ENV_PAGE_SIZE,
                format!("page size {} is not a multiple of {}", self.page_size, self.granularity),
            ));
        }
        if self.low_watermark >= self.high_watermark || self.high_watermark > 100 {
            return Err(combination(
                watermark_var,
                format!(
                    "low watermark {}% must be below high watermark {}% (at most 100%)",
                    self.low_watermark, self.high_watermark
                ),
            ));
        }
        if self.buffer_capacity < self.page_size {
            return Err(combination(
                ENV_BUFFER_SIZE,
                format!(
                    "buffer of {} bytes cannot hold one {}-byte page",
                    self.buffer_capacity, self.page_size
                ),
            ));
        }
        for (field, value) in [
            (ConfigField::Fillers, self.num_fillers),
            (ConfigField::Evictors, self.num_evictors),
            (ConfigField::Managers, self.num_managers),
            (ConfigField::MaxFaultEvents, self.max_fault_events),
        ] {
            if value == 0 {
                return Err(combination(field.env_name(), "must be at least 1".into()));
            }
        }
        Ok(())
    }

    /// Returns a copy with one field replaced, revalidated.
    pub fn apply_override(&self, field: ConfigField, value: u64) -> Result<Self, ConfigError> {
        self.apply_overrides(&[(field, value)])
    }

    /// Returns a copy with several fields replaced, validated once at the end
    /// so that their order does not matter.
    pub fn apply_overrides(&self, overrides: &[(ConfigField, u64)]) -> Result<Self, ConfigError> {
        let mut next = self.clone();
        for &(field, value) in overrides {
            next.assign(field, value)?;
        }
        let last = overrides.last().map_or(ENV_PAGE_SIZE, |(f, _)| f.env_name());
        next.validate(last)?;
        Ok(next)
    }

    fn assign(&mut self, field: ConfigField, value: u64) -> Result<(), ConfigError> {
        let name = field.env_name();
        if self.frozen {
            return Err(ConfigError::ImmutableAtRuntime {
                variable: name.to_string(),
            });
        }
        let as_usize = usize::try_from(value)
            .map_err(|_| malformed(name, &value.to_string(), "does not fit in usize".into()))?;
        match field {
            ConfigField::PageSize => self.page_size = as_usize,
            ConfigField::BufferCapacity => self.buffer_capacity = as_usize - as_usize % self.granularity,
            ConfigField::Fillers => self.num_fillers = as_usize,
            ConfigField::Evictors => self.num_evictors = as_usize,
            ConfigField::Managers => self.num_managers = as_usize,
            ConfigField::MaxFaultEvents => self.max_fault_events = as_usize,
            ConfigField::ReadAhead => self.read_ahead = as_usize,
            ConfigField::HighWatermark => {
                if !(1..=100).contains(&value) {
                    return Err(malformed(name, &value.to_string(), "must be within 1..=100".into()));
                }
                self.high_watermark = value as u8;
            }
            ConfigField::LowWatermark => {
                if value > 99 {
                    return Err(malformed(name, &value.to_string(), "must be within 0..=99".into()));
                }
                self.low_watermark = value as u8;
            }
        }
        Ok(())
    }

    pub fn set_page_size(&self, bytes: usize) -> Result<Self, ConfigError> {
        self.apply_override(ConfigField::PageSize, bytes as u64)
    }

    pub fn set_buffer_capacity(&self, bytes: usize) -> Result<Self, ConfigError> {
        self.apply_override(ConfigField::BufferCapacity, bytes as u64)
    }

    pub fn set_fillers(&self, n: usize) -> Result<Self, ConfigError> {
        self.apply_override(ConfigField::Fillers, n as u64)
    }

    pub fn set_evictors(&self, n: usize) -> Result<Self, ConfigError> {
        self.apply_override(ConfigField::Evictors, n as u64)
    }

    pub fn set_managers(&self, n: usize) -> Result<Self, ConfigError> {
        self.apply_override(ConfigField::Managers, n as u64)
    }

    pub fn set_read_ahead(&self, pages: usize) -> Result<Self, ConfigError> {
        self.apply_override(ConfigField::ReadAhead, pages as u64)
    }

    pub fn set_max_fault_events(&self, n: usize) -> Result<Self, ConfigError> {
        self.apply_override(ConfigField::MaxFaultEvents, n as u64)
    }

    /// Sets both watermarks at once so intermediate states need not be valid.
    pub fn set_watermarks(&self, high: u8, low: u8) -> Result<Self, ConfigError> {
        if self.frozen {
            return Err(ConfigError::ImmutableAtRuntime {
                variable: ENV_HIGH_WATER.to_string(),
            });
        }
        if !(1..=100).contains(&high) {
            return Err(malformed(ENV_HIGH_WATER, &high.to_string(), "must be within 1..=100".into()));
        }
        if low > 99 {
            return Err(malformed(ENV_LOW_WATER, &low.to_string(), "must be within 0..=99".into()));
        }
        let mut next = self.clone();
        next.high_watermark = high;
        next.low_watermark = low;
        next.validate(ENV_LOW_WATER)?;
        Ok(next)
    }

    pub(crate) fn frozen(&self) -> Self {
        let mut c = self.clone();
        c.frozen = true;
        c
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn granularity(&self) -> usize {
        self.granularity
    }

    pub fn page_size(&self) -> usize {
        self.page_size
    }

    pub fn buffer_capacity(&self) -> usize {
        self.buffer_capacity
    }

    pub fn num_fillers(&self) -> usize {
        self.num_fillers
    }

    pub fn num_evictors(&self) -> usize {
        self.num_evictors
    }

    pub fn num_managers(&self) -> usize {
        self.num_managers
    }

    pub fn high_watermark(&self) -> u8 {
        self.high_watermark
    }

    pub fn low_watermark(&self) -> u8 {
        self.low_watermark
    }

    pub fn read_ahead(&self) -> usize {
        self.read_ahead
    }

    pub fn max_fault_events(&self) -> usize {
        self.max_fault_events
    }

    /// `floor(capacity * high / 100)`.
    pub fn high_bytes(&self) -> usize {
        watermark_bytes(self.buffer_capacity, self.high_watermark)
    }

    /// `floor(capacity * low / 100)`.
    pub fn low_bytes(&self) -> usize {
        watermark_bytes(self.buffer_capacity, self.low_watermark)
    }
}

pub fn watermark_bytes(capacity: usize, percent: u8) -> usize {
    (capacity as u128 * percent as u128 / 100) as usize
}

fn malformed(variable: &str, value: &str, reason: String) -> ConfigError {
    ConfigError::MalformedValue {
        variable: variable.to_string(),
        value: value.to_string(),
        reason,
    }
}

fn combination(variable: &str, reason: String) -> ConfigError {
    ConfigError::InvalidCombination {
        variable: variable.to_string(),
        reason,
    }
}

fn parse_count(variable: &str, value: &str) -> Result<usize, ConfigError> {
    value
        .parse::<usize>()
        .map_err(|e| malformed(variable, value, e.to_string()))
}

fn parse_percent(variable: &str, value: &str, min: u8, max: u8) -> Result<u8, ConfigError> {
    let n: u8 = value
        .parse()
        .map_err(|_| malformed(variable, value, "expected an integer percentage".into()))?;
    if n < min || n > max {
        return Err(malformed(variable, value, format!("must be within {min}..={max}")));
    }
    Ok(n)
}

/// Parses a decimal byte count with an optional `K`/`M`/`G` binary suffix.
pub fn parse_size(variable: &str, value: &str) -> Result<usize, ConfigError> {
    let value = value.trim();
    let (digits, shift) = match value.char_indices().last() {
        Some((i, c)) if c.eq_ignore_ascii_case(&'k') => (&value[..i], 10),
        Some((i, c)) if c.eq_ignore_ascii_case(&'m') => (&value[..i], 20),
        Some((i, c)) if c.eq_ignore_ascii_case(&'g') => (&value[..i], 30),
        _ => (value, 0),
    };
    let n: usize = digits
        .parse()
        .map_err(|_| malformed(variable, value, "expected a decimal byte count".into()))?;
    n.checked_mul(1usize << shift)
        .ok_or_else(|| malformed(variable, value, "overflows".into()))
}

pub fn system_page_size() -> usize {
    // SAFETY: sysconf has no memory-safety preconditions.
    let n = unsafe { libc::sysconf(libc::_SC_PAGESIZE) };
    if n > 0 {
        n as usize
    } else {
        4096
    }
}

pub fn hardware_threads() -> usize {
    std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
}

/// `MemAvailable` from `/proc/meminfo`, falling back to physical pages.
pub fn available_memory() -> usize {
    if let Ok(info) = std::fs::read_to_string("/proc/meminfo") {
        for line in info.lines() {
            if let Some(rest) = line.strip_prefix("MemAvailable:") {
                let kib = rest.trim().trim_end_matches("kB").trim();
                if let Ok(k) = kib.parse::<usize>() {
                    return k * 1024;
                }
            }
        }
    }
    // SAFETY: sysconf has no memory-safety preconditions.
    let pages = unsafe { libc::sysconf(libc::_SC_PHYS_PAGES) };
    if pages > 0 {
        pages as usize * system_page_size()
    } else {
        1 << 30
    }
}
