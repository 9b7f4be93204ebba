import heapq
import itertools
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, List, Mapping, Optional, Sequence

import numpy as np

from app.core.config import settings
from app.core.exceptions import EngineError, WorkerFailureError
from app.core.logging_config import get_logger
from app.services.mailbox import Mailbox

logger = get_logger(__name__)


class DelayMode(str, Enum):
    NONE = "none"
    FIXED = "fixed"
    SEEDED_RANDOM = "seeded-random"
    PER_WORKER_SLOWDOWN = "per-worker-slowdown"


@dataclass(frozen=True)
class DelaySchedule:
    """
    Delays injected on worker -> coordinator messages, in schedule time units.

    - none: no delay.
    - fixed: `delay` for every worker, overridden per worker by `per_worker`.
    - seeded-random: exponential delays with mean `delay`, one numpy stream per worker
      derived from `seed`.
    - per-worker-slowdown: no delay, fine solves of worker k cost `slowdown[k]` units.
    """
    mode: DelayMode = DelayMode.NONE
    seed: int = 0
    delay: float = 0.0
    per_worker: Mapping[int, float] = field(default_factory=dict)
    slowdown: Mapping[int, float] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "mode", DelayMode(self.mode))
        if self.delay < 0 or any(v < 0 for v in self.per_worker.values()):
            raise EngineError("Delays must be non-negative.")
        if any(v <= 0 for v in self.slowdown.values()):
            raise EngineError("Slowdown factors must be positive.")

    def sampler(self, n_workers: int) -> "DelaySampler":
        return DelaySampler(self, n_workers)


class DelaySampler:
    """Draws delays for one run; state advances only through delay() calls."""

    def __init__(self, schedule: DelaySchedule, n_workers: int):
        self.schedule = schedule
        streams = np.random.SeedSequence(schedule.seed).spawn(n_workers)
        self._rngs = [np.random.default_rng(s) for s in streams]

    def delay(self, worker_id: int) -> float:
        s = self.schedule
        if s.mode == DelayMode.FIXED:
            return float(s.per_worker.get(worker_id, s.delay))
        if s.mode == DelayMode.SEEDED_RANDOM:
            return float(self._rngs[worker_id].exponential(s.delay)) if s.delay > 0 else 0.0
        return 0.0

    def slowdown(self, worker_id: int) -> float:
        if self.schedule.mode == DelayMode.PER_WORKER_SLOWDOWN:
            return float(self.schedule.slowdown.get(worker_id, 1.0))
        return 1.0


@dataclass(frozen=True, eq=False)
class Envelope:
    """A pending put into a mailbox."""
    mailbox: Mailbox
    payload: np.ndarray
    tag: int

    def deliver(self) -> int:
        return self.mailbox.put(self.payload, self.tag)


class SimulatedBackend:
    """
    Single-threaded discrete-event executor. Events are ordered by (time, priority, seq);
    deliveries (priority 0) at a given time happen before agents wake up (priority 1),
    so equal-cost agents run in lockstep. A global solve costs `global_cost` units and a
    fine solve `fine_cost` times the worker's slowdown. Messages into one mailbox are
    delivered in the order they were sent, whatever their delays.
    """

    name = "simulated"

    def __init__(self, schedule: Optional[DelaySchedule] = None, global_cost: float = 1.0, fine_cost: float = 1.0):
        self.schedule = schedule or DelaySchedule()
        if not global_cost > 0.0 or not fine_cost > 0.0:
            raise EngineError(f"Solve costs must be positive, got global {global_cost}, fine {fine_cost}")
        self.global_cost = float(global_cost)
        self.fine_cost = float(fine_cost)

    def run(self, coordinator, workers: Sequence) -> None:
        sampler = self.schedule.sampler(len(workers))
        queue: List = []
        seq = itertools.count()
        now = 0.0
        busy: Dict[int, bool] = {}
        wake_pending: Dict[int, bool] = {}
        last_delivery: Dict[int, float] = {}
        agents = {id(coordinator): coordinator, **{id(w): w for w in workers}}
        owner = {}
        for w in workers:
            for box in w.inboxes:
                owner[id(box)] = w
        for box in coordinator.inboxes:
            owner[id(box)] = coordinator

        def push(at: float, priority: int, action: Callable[[], None]):
            heapq.heappush(queue, (at, priority, next(seq), action))

        def wake(agent):
            key = id(agent)
            if busy.get(key) or wake_pending.get(key):
                return
            wake_pending[key] = True

            def fire():
                wake_pending[key] = False
                if not busy.get(key) and not coordinator.done and agent.ready():
                    run_agent(agent)

            push(now, 1, fire)

        def run_agent(agent, first: bool = False):
            if agent is coordinator:
                outgoing = coordinator.start() if first else coordinator.step()
                cost, delay = self.global_cost, (lambda: 0.0)
            else:
                outgoing, n_solved = agent.compute()
                cost = self.fine_cost * n_solved * sampler.slowdown(agent.worker_id)
                delay = (lambda wid=agent.worker_id: sampler.delay(wid))
            end = now + cost
            busy[id(agent)] = True
            for envelope in outgoing:
                key = id(envelope.mailbox)
                at = max(end + delay(), last_delivery.get(key, 0.0))
                last_delivery[key] = at
                push(at, 0, lambda env=envelope: deliver(env))

            def release():
                busy[id(agent)] = False
                wake(agent)

            push(end, 1, release)

        def deliver(envelope: Envelope):
            envelope.deliver()
            target = owner.get(id(envelope.mailbox))
            if target is not None:
                wake(target)

        coordinator.clock = lambda: now
        run_agent(coordinator, first=True)
        while queue and not coordinator.done:
            now, _, _, action = heapq.heappop(queue)
            action()
        if not coordinator.done:
            raise EngineError("Simulation ran out of events before the coordinator finished")
        logger.debug("Simulation finished", virtual_time=now, agents=len(agents))


class ThreadedBackend:
    """
    Coordinator on the calling thread, one pool thread per worker. Readers sleep on a
    doorbell event (check ready, wait, clear). A fine solve additionally sleeps
    fine_cost * slowdown * time_unit_s, and a reaction is held back by its delay before the put.
    """

    name = "threaded"

    def __init__(self, schedule: Optional[DelaySchedule] = None, poll_s: Optional[float] = None, time_unit_s: Optional[float] = None,
                 fine_cost: float = 1.0):
        self.schedule = schedule or DelaySchedule()
        if not fine_cost > 0.0:
            raise EngineError(f"Fine solve cost must be positive, got {fine_cost}")
        self.fine_cost = float(fine_cost)
        self.poll_s = settings.thread_poll_s if poll_s is None else poll_s
        self.time_unit_s = settings.time_unit_s if time_unit_s is None else time_unit_s

    def _worker_loop(self, worker, sampler: DelaySampler, stop) -> None:
        while not stop.is_set():
            if worker.ready():
                outgoing, n_solved = worker.compute()
                hold = (self.fine_cost * sampler.slowdown(worker.worker_id) * n_solved + sampler.delay(worker.worker_id)) * self.time_unit_s
                if hold > 0 and stop.wait(hold):
                    break
                for envelope in outgoing:
                    envelope.deliver()
            else:
                worker.doorbell.wait(self.poll_s)
                worker.doorbell.clear()

    def run(self, coordinator, workers: Sequence) -> None:
        sampler = self.schedule.sampler(len(workers))
        stop = coordinator.stop
        start = time.perf_counter()
        coordinator.clock = lambda: (time.perf_counter() - start) * 1000.0

        with ThreadPoolExecutor(max_workers=max(1, len(workers)), thread_name_prefix="glc-worker") as pool:
            futures = {pool.submit(self._worker_loop, w, sampler, stop): w.worker_id for w in workers}
            try:
                for envelope in coordinator.start():
                    envelope.deliver()
                while not coordinator.done:
                    for future, worker_id in futures.items():
                        if future.done() and future.exception() is not None:
                            error = future.exception()
                            logger.error("Worker failed", worker_id=worker_id, error=str(error))
                            raise WorkerFailureError(worker_id, str(error)) from error
                    if coordinator.ready():
                        for envelope in coordinator.step():
                            envelope.deliver()
                    else:
                        coordinator.doorbell.wait(self.poll_s)
                        coordinator.doorbell.clear()
            finally:
                stop.raise_flag(stop.reason or "coordinator exited")
                for w in workers:
                    w.doorbell.set()
        logger.debug("Threaded run finished", wall_ms=coordinator.clock())


def make_backend(name: str, schedule: Optional[DelaySchedule] = None, global_cost: float = 1.0, fine_cost: float = 1.0):
    """The threaded backend measures the global solve, so it only takes the fine cost."""
    if name == SimulatedBackend.name:
        return SimulatedBackend(schedule, global_cost=global_cost, fine_cost=fine_cost)
    if name == ThreadedBackend.name:
        return ThreadedBackend(schedule, fine_cost=fine_cost)
    raise EngineError(f"Unknown backend '{name}', expected 'simulated' or 'threaded'")
