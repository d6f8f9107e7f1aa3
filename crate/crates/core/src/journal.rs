// SPDX-License-Identifier: Apache-2.0

//! Append-only record log, optionally mirrored to a line-delimited JSON
//! writer that is flushed after every record.

use std::io::Write;
use std::sync::{Arc, Mutex, MutexGuard};

use serde::Serialize;

struct Inner<T> {
    records: Vec<T>,
    keep: bool,
    writer: Option<Box<dyn Write + Send>>,
    write_errors: u64,
}

/// Cloneable handle; all clones append to the same log.
pub struct Journal<T> {
    inner: Arc<Mutex<Inner<T>>>,
}

impl<T> Clone for Journal<T> {
    fn clone(&self) -> Self {
        Journal {
            inner: Arc::clone(&self.inner),
        }
    }
}

impl<T> std::fmt::Debug for Journal<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let inner = self.inner.lock().unwrap_or_else(|e| e.into_inner());
        f.debug_struct("Journal")
            .field("records", &inner.records.len())
            .field("writer", &inner.writer.is_some())
            .finish()
    }
}

impl<T: Serialize + Clone> Default for Journal<T> {
    fn default() -> Self {
        Self::in_memory()
    }
}

impl<T: Serialize + Clone> Journal<T> {
    pub fn in_memory() -> Self {
        Self::build(true, None)
    }

    /// Writes every record to `writer`; also retains them in memory when
    /// `keep` is set.
    pub fn to_writer(writer: Box<dyn Write + Send>, keep: bool) -> Self {
        Self::build(keep, Some(writer))
    }

    fn build(keep: bool, writer: Option<Box<dyn Write + Send>>) -> Self {
        Journal {
            inner: Arc::new(Mutex::new(Inner {
                records: Vec::new(),
                keep,
                writer,
                write_errors: 0,
            })),
        }
    }

    fn lock(&self) -> MutexGuard<'_, Inner<T>> {
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Builds the record while holding the log lock, so records built from a
    /// clock reading land in the log in clock order.
    pub fn push_with<F: FnOnce(Option<&T>) -> T>(&self, build: F) -> T {
        let mut inner = self.lock();
        let record = build(inner.records.last());
        if let Some(w) = inner.writer.as_mut() {
            let ok = serde_json::to_writer(&mut *w, &record).is_ok() && w.write_all(b"\n").is_ok() && w.flush().is_ok();
            if !ok {
                inner.write_errors += 1;
            }
        }
        if inner.keep {
            inner.records.push(record.clone());
        }
        record
    }

    pub fn push(&self, record: T) {
        self.push_with(|_| record);
    }

    pub fn records(&self) -> Vec<T> {
        self.lock().records.clone()
    }

    pub fn len(&self) -> usize {
        self.lock().records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn write_errors(&self) -> u64 {
        self.lock().write_errors
    }

    pub fn flush(&self) {
        if let Some(w) = self.lock().writer.as_mut() {
            let _ = w.flush();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Clone, Serialize, PartialEq, Debug)]
    struct Rec {
        n: u32,
    }

    #[derive(Clone, Default)]
    struct Shared(Arc<Mutex<Vec<u8>>>);

    impl Write for Shared {
        fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
            self.0.lock().unwrap().extend_from_slice(buf);
            Ok(buf.len())
        }
        fn flush(&mut self) -> std::io::Result<()> {
            Ok(())
        }
    }

    #[test]
    fn writes_one_line_per_record() {
        let buf = Shared::default();
        let j = Journal::to_writer(Box::new(buf.clone()), false);
        j.push(Rec { n: 1 });
        j.push_with(|_| Rec { n: 2 });
        assert!(j.is_empty());
        let text = String::from_utf8(buf.0.lock().unwrap().clone()).unwrap();
        assert_eq!(text, "{\"n\":1}\n{\"n\":2}\n");
    }

    #[test]
    fn push_with_sees_previous_record() {
        let j = Journal::in_memory();
        j.push(Rec { n: 4 });
        j.push_with(|prev| Rec { n: prev.unwrap().n + 1 });
        assert_eq!(j.records(), vec![Rec { n: 4 }, Rec { n: 5 }]);
    }
}
