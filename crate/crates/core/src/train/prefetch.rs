use std::sync::mpsc::{sync_channel, IntoIter};
use std::thread;

/// Runs `source` on a producer thread that blocks once `capacity` items are
/// waiting. Dropping the returned iterator stops the producer at its next send.
pub fn prefetch<I>(source: I, capacity: usize) -> IntoIter<I::Item>
where
    I: IntoIterator + Send + 'static,
    I::Item: Send + 'static,
{
    let (tx, rx) = sync_channel(capacity);
    thread::spawn(move || {
        for item in source {
            if tx.send(item).is_err() {
                break;
            }
        }
    });
    rx.into_iter()
}
