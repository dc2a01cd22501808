use std::future::{ready, Future};
use std::ptr;
use std::sync::atomic::{AtomicPtr, AtomicU64, AtomicUsize, Ordering::SeqCst};

use super::{CellId, ProcessId, SharedMemory, Word};

const BASE_SHIFT: u32 = 10;
const BASE: usize = 1 << BASE_SHIFT;
// Segment k holds BASE << k cells, so 40 segments cover far more than memory.
const SEGMENTS: usize = 40;

/// Shared cells backed by `AtomicU64`, safe for use from any number of
/// threads.
///
/// Cells live in geometrically growing segments that are never moved, so a
/// `CellId` stays valid while other threads allocate. Every operation uses
/// `SeqCst`.
pub struct NativeMemory {
    segments: [AtomicPtr<AtomicU64>; SEGMENTS],
    next: AtomicUsize,
}

fn locate(index: usize) -> (usize, usize) {
    let j = (index >> BASE_SHIFT) + 1;
    let seg = (usize::BITS - 1 - j.leading_zeros()) as usize;
    let start = BASE * ((1 << seg) - 1);
    (seg, index - start)
}

fn segment_len(seg: usize) -> usize {
    BASE << seg
}

impl NativeMemory {
    pub fn new() -> Self {
        NativeMemory {
            segments: std::array::from_fn(|_| AtomicPtr::new(ptr::null_mut())),
            next: AtomicUsize::new(0),
        }
    }

    fn ensure_segment(&self, seg: usize) {
        assert!(seg < SEGMENTS, "cell arena exhausted");
        if !self.segments[seg].load(SeqCst).is_null() {
            return;
        }
        let cells: Box<[AtomicU64]> = (0..segment_len(seg)).map(|_| AtomicU64::new(0)).collect();
        let fresh = Box::into_raw(cells) as *mut AtomicU64;
        if self.segments[seg]
            .compare_exchange(ptr::null_mut(), fresh, SeqCst, SeqCst)
            .is_err()
        {
            // Lost the race; another thread installed the segment.
            unsafe { drop(Box::from_raw(ptr::slice_from_raw_parts_mut(fresh, segment_len(seg)))) };
        }
    }

    #[inline]
    fn cell(&self, cell: CellId) -> &AtomicU64 {
        debug_assert!(cell.0 < self.next.load(SeqCst), "cell {cell:?} not allocated");
        let (seg, off) = locate(cell.0);
        let base = self.segments[seg].load(SeqCst);
        assert!(!base.is_null(), "cell {cell:?} not allocated");
        // SAFETY: the segment is live until drop and `off` is within it.
        unsafe { &*base.add(off) }
    }
}

impl Default for NativeMemory {
    fn default() -> Self {
        Self::new()
    }
}

impl Drop for NativeMemory {
    fn drop(&mut self) {
        for (seg, slot) in self.segments.iter_mut().enumerate() {
            let p = *slot.get_mut();
            if !p.is_null() {
                unsafe { drop(Box::from_raw(ptr::slice_from_raw_parts_mut(p, segment_len(seg)))) };
            }
        }
    }
}

impl SharedMemory for NativeMemory {
    #[inline]
    fn read(&self, _pid: ProcessId, cell: CellId) -> impl Future<Output = Word> {
        ready(self.cell(cell).load(SeqCst))
    }

    #[inline]
    fn write(&self, _pid: ProcessId, cell: CellId, value: Word) -> impl Future<Output = ()> {
        self.cell(cell).store(value, SeqCst);
        ready(())
    }

    #[inline]
    fn cas(
        &self,
        _pid: ProcessId,
        cell: CellId,
        expected: Word,
        new: Word,
    ) -> impl Future<Output = bool> {
        ready(self.cell(cell).compare_exchange(expected, new, SeqCst, SeqCst).is_ok())
    }

    #[inline]
    fn faa(&self, _pid: ProcessId, cell: CellId, delta: i64) -> impl Future<Output = Word> {
        ready(self.cell(cell).fetch_add(delta as u64, SeqCst))
    }

    #[inline]
    fn pause(&self, _pid: ProcessId, attempt: u32) -> impl Future<Output = ()> {
        // Yield early: with more threads than cores the holder we wait on is
        // likely descheduled.
        if attempt < 4 {
            std::hint::spin_loop();
        } else {
            std::thread::yield_now();
        }
        ready(())
    }

    fn alloc(&self, count: usize) -> CellId {
        let start = self.next.fetch_add(count, SeqCst);
        if count > 0 {
            let (first, _) = locate(start);
            let (last, _) = locate(start + count - 1);
            for seg in first..=last {
                self.ensure_segment(seg);
            }
        }
        CellId(start)
    }

    fn poke(&self, cell: CellId, value: Word) {
        self.cell(cell).store(value, SeqCst);
    }

    fn peek(&self, cell: CellId) -> Word {
        self.cell(cell).load(SeqCst)
    }

    fn cell_count(&self) -> usize {
        self.next.load(SeqCst)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    #[test]
    fn locate_covers_segments_contiguously() {
        let mut expect = (0usize, 0usize);
        for i in 0..(BASE * 7 + 3) {
            assert_eq!(locate(i), expect, "index {i}");
            expect.1 += 1;
            if expect.1 == segment_len(expect.0) {
                expect = (expect.0 + 1, 0);
            }
        }
    }

    #[test]
    fn alloc_spanning_segments() {
        let mem = NativeMemory::new();
        let a = mem.alloc(BASE - 1);
        let b = mem.alloc(5);
        assert_eq!(a, CellId(0));
        assert_eq!(b, CellId(BASE - 1));
        for i in 0..5 {
            mem.poke(b.offset(i), i as u64 + 1);
        }
        assert_eq!(mem.peek(b.offset(4)), 5);
        assert_eq!(mem.cell_count(), BASE + 4);
    }

    #[test]
    fn concurrent_faa_and_alloc() {
        let mem = Arc::new(NativeMemory::new());
        let counter = mem.alloc(1);
        let handles: Vec<_> = (0..4)
            .map(|t| {
                let mem = Arc::clone(&mem);
                std::thread::spawn(move || {
                    let p = ProcessId::from_index(t);
                    for _ in 0..1000 {
                        super::super::run_ready(mem.faa(p, counter, 1));
                        let c = mem.alloc(3);
                        mem.poke(c.offset(2), 1);
                    }
                })
            })
            .collect();
        for h in handles {
            h.join().unwrap();
        }
        assert_eq!(mem.peek(counter), 4000);
        assert_eq!(mem.cell_count(), 1 + 4 * 1000 * 3);
    }
}
