//! Single-slot channel: a newer value overwrites an unread older one.

use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

#[derive(Debug)]
struct Slot<T> {
    value: Option<T>,
    closed: bool,
    overwritten: u64,
}

#[derive(Debug)]
pub struct Mailbox<T> {
    inner: Arc<(Mutex<Slot<T>>, Condvar)>,
}

impl<T> Clone for Mailbox<T> {
    fn clone(&self) -> Self {
        Self { inner: Arc::clone(&self.inner) }
    }
}

impl<T> Default for Mailbox<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T> Mailbox<T> {
    pub fn new() -> Self {
        Self { inner: Arc::new((Mutex::new(Slot { value: None, closed: false, overwritten: 0 }), Condvar::new())) }
    }

    fn slot(&self) -> std::sync::MutexGuard<'_, Slot<T>> {
        self.inner.0.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Stores `value`, replacing anything not yet taken.
    pub fn put(&self, value: T) {
        let mut s = self.slot();
        if s.value.replace(value).is_some() {
            s.overwritten += 1;
        }
        self.inner.1.notify_all();
    }

    pub fn try_take(&self) -> Option<T> {
        self.slot().value.take()
    }

    /// Waits up to `timeout` for a value; `None` on timeout or once closed and empty.
    pub fn take_timeout(&self, timeout: Duration) -> Option<T> {
        let guard = self.slot();
        let (mut s, _) = self
            .inner
            .1
            .wait_timeout_while(guard, timeout, |s| s.value.is_none() && !s.closed)
            .unwrap_or_else(|e| e.into_inner());
        s.value.take()
    }

    pub fn close(&self) {
        self.slot().closed = true;
        self.inner.1.notify_all();
    }

    pub fn is_closed(&self) -> bool {
        self.slot().closed
    }

    /// Number of values dropped unread.
    pub fn overwritten(&self) -> u64 {
        self.slot().overwritten
    }
}
