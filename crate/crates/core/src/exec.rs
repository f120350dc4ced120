//! Bounded-parallel job execution with in-order commits.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::mpsc;

/// Run `work` over `items` on up to `jobs` threads. Results are handed to
/// `commit` strictly in input order, on the calling thread, so whatever
/// `commit` writes is independent of scheduling. The first `commit` error
/// stops dispatch of further items and is returned.
pub fn run_ordered<T, R, E>(
    items: &[T],
    jobs: usize,
    work: impl Fn(&T) -> R + Sync,
    mut commit: impl FnMut(&T, R) -> Result<(), E>,
) -> Result<(), E>
where
    T: Sync,
    R: Send,
{
    if items.is_empty() {
        return Ok(());
    }
    let next = AtomicUsize::new(0);
    let stop = AtomicBool::new(false);
    let (tx, rx) = mpsc::channel::<(usize, R)>();
    std::thread::scope(|s| {
        for _ in 0..jobs.clamp(1, items.len()) {
            let tx = tx.clone();
            let (next, stop, work) = (&next, &stop, &work);
            s.spawn(move || loop {
                if stop.load(Ordering::SeqCst) {
                    break;
                }
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= items.len() {
                    break;
                }
                if tx.send((i, work(&items[i]))).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        let mut pending: BTreeMap<usize, R> = BTreeMap::new();
        let mut expected = 0;
        for (i, r) in rx.iter() {
            pending.insert(i, r);
            while let Some(r) = pending.remove(&expected) {
                if let Err(e) = commit(&items[expected], r) {
                    stop.store(true, Ordering::SeqCst);
                    return Err(e);
                }
                expected += 1;
            }
        }
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn commits_in_order() {
        let items: Vec<u64> = (0..100).collect();
        let mut seen = Vec::new();
        run_ordered(
            &items,
            8,
            |x| {
                std::thread::sleep(std::time::Duration::from_micros((100 - x) * 10));
                x * 2
            },
            |x, r| {
                assert_eq!(r, x * 2);
                seen.push(*x);
                Ok::<_, ()>(())
            },
        )
        .unwrap();
        assert_eq!(seen, items);
    }

    #[test]
    fn commit_error_stops() {
        let items: Vec<u32> = (0..50).collect();
        let mut n = 0;
        let r = run_ordered(
            &items,
            4,
            |x| *x,
            |_, _| {
                n += 1;
                if n == 10 {
                    Err("boom")
                } else {
                    Ok(())
                }
            },
        );
        assert_eq!(r, Err("boom"));
        assert_eq!(n, 10);
    }
}
