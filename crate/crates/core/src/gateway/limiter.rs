use std::sync::{Arc, Condvar, Mutex};

#[derive(Debug, Default)]
struct State {
    in_flight: usize,
    max_observed: usize,
}

/// Counting semaphore bounding in-flight requests on one route.
#[derive(Debug, Clone)]
pub struct Limiter {
    limit: usize,
    inner: Arc<(Mutex<State>, Condvar)>,
}

pub struct Permit<'a> {
    limiter: &'a Limiter,
}

impl Limiter {
    pub fn new(limit: usize) -> Self {
        Self {
            limit: limit.max(1),
            inner: Arc::default(),
        }
    }

    pub fn acquire(&self) -> Permit<'_> {
        let (lock, cvar) = &*self.inner;
        let mut state = lock.lock().expect("limiter poisoned");
        while state.in_flight >= self.limit {
            state = cvar.wait(state).expect("limiter poisoned");
        }
        state.in_flight += 1;
        state.max_observed = state.max_observed.max(state.in_flight);
        Permit { limiter: self }
    }

    pub fn max_observed(&self) -> usize {
        self.inner.0.lock().expect("limiter poisoned").max_observed
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let (lock, cvar) = &*self.limiter.inner;
        lock.lock().expect("limiter poisoned").in_flight -= 1;
        cvar.notify_one();
    }
}
