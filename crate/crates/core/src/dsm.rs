//! Local-spin waiting for the distributed shared memory model.
//!
//! Instead of polling the session state of the head node, a waiter parks the
//! node it waits on in its own ready slot and polls only that slot. Whoever
//! adjourns the session, or links the next node, clears matching slots.

use crate::context::ProcessContext;
use crate::gme::Gme;
use crate::memory::{ProcessId, SharedMemory, Word};
use crate::node::{NodeRef, STATE};
use crate::state::is_adjourned;

impl<M: SharedMemory> Gme<M> {
    /// Waits until `current`'s session adjourns. Returns the number of
    /// failed checks of the ready slot.
    pub(crate) async fn wait_adjourned_dsm(&self, ctx: &mut ProcessContext, current: NodeRef) -> u32 {
        let ready = self.ready_cell(ctx.me);
        self.write(ctx, ready, current.word()).await;
        if is_adjourned(self.read(ctx, current.field(STATE)).await) {
            self.write(ctx, ready, 0).await;
        }
        self.begin_wait(ctx);
        let mut failures = 0;
        while self.read(ctx, ready).await != 0 {
            self.memory().pause(ctx.me, failures).await;
            failures += 1;
        }
        self.end_wait(ctx);
        failures
    }

    /// Releases process `pid` if it waits on `node`.
    pub(crate) async fn notify(&self, ctx: &mut ProcessContext, pid: Word, node: NodeRef) {
        let slot = self.ready_cell(ProcessId::new(pid as u32));
        self.cas(ctx, slot, node.word(), 0).await;
    }

    pub(crate) async fn notify_all(&self, ctx: &mut ProcessContext, node: NodeRef) {
        for pid in 1..=self.processes() as Word {
            self.notify(ctx, pid, node).await;
        }
    }
}

#[cfg(test)]
mod tests {
    use crate::gme::{Config, Gme};
    use crate::memory::{OpKind, ProcessId, ScheduleSource, SharedMemory, SimMemory, Simulation};
    use crate::node::{NodeRef, STATE};
    use crate::state::{GUARDS, VACANT};

    fn lock(n: usize) -> Gme<SimMemory> {
        Gme::new(Config::new(n, 1).reclaim(false).dsm(true), SimMemory::new()).unwrap()
    }

    fn run(gme: &Gme<SimMemory>, pid: u32, body: impl std::future::Future<Output = ()>) {
        let mut sim = Simulation::new();
        sim.spawn(gme.memory(), ProcessId::new(pid), body);
        sim.run(gme.memory(), ScheduleSource::Seeded(0), 1000).unwrap();
    }

    #[test]
    fn notify_clears_only_matching_slot() {
        let gme = lock(3);
        let (x, y) = (NodeRef(1000), NodeRef(2000));
        let mem = gme.memory();
        let slot = |p| gme.ready_cell(ProcessId::new(p));
        mem.poke(slot(1), x.word());
        mem.poke(slot(2), y.word());
        let mut ctx = gme.context(3).unwrap();
        for p in 1..=3 {
            run(&gme, 3, gme.notify(&mut ctx, p, x));
        }
        assert_eq!((mem.peek(slot(1)), mem.peek(slot(2)), mem.peek(slot(3))), (0, y.word(), 0));
    }

    #[test]
    fn notify_all_issues_n_cas() {
        let gme = lock(4);
        let x = NodeRef(1000);
        let mem = gme.memory();
        for p in 1..=3 {
            mem.poke(gme.ready_cell(ProcessId::new(p)), x.word());
        }
        let mut ctx = gme.context(4).unwrap();
        mem.enable_access_log();
        run(&gme, 4, gme.notify_all(&mut ctx, x));
        let log = mem.take_access_log();
        assert_eq!(log.len(), 4);
        assert!(log.iter().all(|r| matches!(r.kind, OpKind::Cas { .. })));
        assert!((1..=4).all(|p| mem.peek(gme.ready_cell(ProcessId::new(p))) == 0));

        // Waiters on another node are left alone.
        let y = NodeRef(2000);
        mem.poke(gme.ready_cell(ProcessId::new(1)), y.word());
        run(&gme, 4, gme.notify_all(&mut ctx, x));
        assert_eq!(mem.peek(gme.ready_cell(ProcessId::new(1))), y.word());
    }

    #[test]
    fn already_adjourned_self_clears() {
        let gme = lock(2);
        let node = gme.head(1);
        gme.memory().poke(node.field(STATE), GUARDS | VACANT);
        let mut ctx = gme.context(1).unwrap();
        let failures = std::rc::Rc::new(std::cell::Cell::new(u32::MAX));
        let f = failures.clone();
        let (g, c) = (&gme, &mut ctx);
        run(&gme, 1, async move { f.set(g.wait_adjourned_dsm(c, node).await) });
        assert_eq!(failures.get(), 0);
        assert_eq!(gme.memory().peek(gme.ready_cell(ProcessId::new(1))), 0);
    }

    #[test]
    fn waiter_released_by_notify() {
        let gme = lock(2);
        let node = gme.head(1);
        let mem = gme.memory();
        mem.poke(node.field(STATE), GUARDS);
        let mut waiter = gme.context(1).unwrap();
        let mut leaver = gme.context(2).unwrap();
        mem.enable_access_log();
        let mut sim = Simulation::new();
        let g = &gme;
        let w = &mut waiter;
        sim.spawn(mem, ProcessId::new(1), async move {
            g.wait_adjourned_dsm(w, node).await;
        });
        // Store, state check, one failed slot check, then blocked.
        for _ in 0..3 {
            sim.step(mem, ProcessId::new(1)).unwrap();
        }
        assert!(sim.runnable(mem).is_empty());
        let l = &mut leaver;
        sim.spawn(mem, ProcessId::new(2), async move { g.notify_all(l, node).await });
        sim.run(mem, ScheduleSource::Seeded(3), 100).unwrap();
        assert!(sim.is_quiescent());
        drop(sim);
        assert_eq!(waiter.metrics().remote_spin_reads, 0);
        assert!(waiter.metrics().spin_reads >= 2);
        let spin: Vec<_> = mem
            .take_access_log()
            .into_iter()
            .filter(|r| r.pid == ProcessId::new(1) && r.region == crate::memory::Region::Spin)
            .collect();
        assert!(!spin.is_empty());
        assert!(spin.iter().all(|r| r.home == Some(ProcessId::new(1))));
    }
}
