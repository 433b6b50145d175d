//! Process peak-resident-memory reading.

/// High-water-mark resident set size of this process, in bytes.
///
/// Uses `getrusage(RUSAGE_SELF).ru_maxrss`, falling back to `VmHWM` from
/// `/proc/self/status`. Returns 0 where neither is available, so callers
/// treat the figure as informational.
pub fn peak_rss_bytes() -> u64 {
    #[cfg(unix)]
    {
        let mut usage: libc::rusage = unsafe { std::mem::zeroed() };
        if unsafe { libc::getrusage(libc::RUSAGE_SELF, &mut usage) } == 0 && usage.ru_maxrss > 0 {
            // ru_maxrss is kilobytes on Linux.
            return (usage.ru_maxrss as u64) * 1024;
        }
    }
    let Ok(status) = std::fs::read_to_string("/proc/self/status") else {
        return 0;
    };
    for line in status.lines() {
        if let Some(rest) = line.strip_prefix("VmHWM:") {
            let mut parts = rest.split_whitespace();
            if let Some(kb) = parts.next().and_then(|v| v.parse::<u64>().ok()) {
                return kb * 1024;
            }
        }
    }
    0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn peak_rss_is_positive_and_grows_monotonically() {
        let before = peak_rss_bytes();
        assert!(before > 0);
        let ballast = vec![1u8; 16 * 1024 * 1024];
        std::hint::black_box(&ballast);
        let after = peak_rss_bytes();
        assert!(after >= before);
    }
}
