use std::sync::{Condvar, Mutex};

/// Counting limit on concurrent in-flight requests.
#[derive(Debug)]
pub struct InFlightLimit {
    max: usize,
    current: Mutex<usize>,
    freed: Condvar,
}

pub struct Permit<'a> {
    limit: &'a InFlightLimit,
}

impl InFlightLimit {
    pub fn new(max: usize) -> Self {
        InFlightLimit { max: max.max(1), current: Mutex::new(0), freed: Condvar::new() }
    }

    pub fn acquire(&self) -> Permit<'_> {
        let mut n = self.current.lock().expect("limit lock");
        while *n >= self.max {
            n = self.freed.wait(n).expect("limit lock");
        }
        *n += 1;
        Permit { limit: self }
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut n = self.limit.current.lock().expect("limit lock");
        *n -= 1;
        self.limit.freed.notify_one();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    #[test]
    fn never_exceeds_max() {
        let limit = InFlightLimit::new(2);
        let live = AtomicUsize::new(0);
        let peak = AtomicUsize::new(0);
        std::thread::scope(|s| {
            for _ in 0..8 {
                s.spawn(|| {
                    let _p = limit.acquire();
                    let now = live.fetch_add(1, Ordering::SeqCst) + 1;
                    peak.fetch_max(now, Ordering::SeqCst);
                    std::thread::sleep(std::time::Duration::from_millis(5));
                    live.fetch_sub(1, Ordering::SeqCst);
                });
            }
        });
        assert!(peak.load(Ordering::SeqCst) <= 2);
    }
}
