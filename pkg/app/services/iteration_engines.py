import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from app.core.config import settings
from app.core.exceptions import DivergenceError, EngineError
from app.core.logging_config import get_logger
from app.services.coupling_core import CouplingProblem, CouplingState
from app.services.mailbox import Mailbox, StopFlag
from app.services.scheduling import DelaySchedule, Envelope, make_backend

logger = get_logger(__name__)

OMEGA_MIN = 1e-6
OMEGA_MAX_FACTOR = 1e3 # Aitken omega is clipped to [OMEGA_MIN, OMEGA_MAX_FACTOR * omega0]
VERIFY_FACTOR = 10.0


class Relaxation(str, Enum):
    FIXED = "fixed"
    AITKEN = "aitken"


class Policy(str, Enum):
    SYNC = "sync" # wait for a fresh reaction from every patch
    ASYNC = "async" # go as soon as any reaction is new


class Status(str, Enum):
    RUNNING = "running"
    CONVERGED = "converged"
    DIVERGED = "diverged"
    MAX_ITERS = "max_iters"
    UNVERIFIED = "unverified"


@dataclass
class RunRecord:
    """
    Per-iteration log of one engine run. Row j of the history holds the residual norm
    evaluated at iteration j (row 0 is the initialisation, norm 0), the omega used for
    the update that follows it and the time at which it was evaluated.
    """
    mode: str
    omega0: float
    n_patches: int
    residual_norms: List[float] = field(default_factory=list)
    omegas: List[float] = field(default_factory=list)
    times_ms: List[float] = field(default_factory=list)
    sigma: List[Tuple[int, ...]] = field(default_factory=list) # trace tag behind each consumed reaction, j >= 1
    it_global: int = 0
    it_fine: List[int] = field(default_factory=list)
    status: Status = Status.RUNNING
    scale: float = 1.0
    rel_residual: float = float("nan")
    verification_residual: Optional[float] = None
    stationary: bool = False
    wall_ms: float = 0.0
    u_A: Optional[np.ndarray] = field(default=None, repr=False)
    fine_fields: List[np.ndarray] = field(default_factory=list, repr=False)
    iterates: List[Tuple[np.ndarray, np.ndarray]] = field(default_factory=list, repr=False)

    @property
    def converged(self) -> bool:
        return self.status == Status.CONVERGED

    @property
    def it_fine_min(self) -> int:
        return min(self.it_fine) if self.it_fine else 0

    @property
    def it_fine_max(self) -> int:
        return max(self.it_fine) if self.it_fine else 0

    def history_rows(self) -> List[Tuple[int, float, float, float]]:
        return [(j, t, n, w) for j, (t, n, w) in enumerate(zip(self.times_ms, self.residual_norms, self.omegas))]


def check_convergence(r: np.ndarray, scale: float, tol: float) -> bool:
    """True iff ||r||_2 / scale <= tol."""
    if not scale > 0.0:
        raise EngineError(f"Convergence scale must be positive, got {scale}")
    return bool(np.linalg.norm(r) / scale <= tol)


def convergence_scale(first_residual_norm: float, reference_rhs: np.ndarray) -> float:
    """
    ||r_1||, unless r_1 is round-off relative to ||b^R|| (the coupling starts at its
    fixed point); then ||b^R||, and 1 if that is zero too.
    """
    rhs_norm = float(np.linalg.norm(reference_rhs))
    if first_residual_norm > np.sqrt(np.finfo(float).eps) * rhs_norm:
        return float(first_residual_norm)
    return rhs_norm if rhs_norm > 0.0 else 1.0


class Coordinator:
    """
    Owns the global model. Reads reactions from one mailbox per patch, assembles the
    residual, relaxes the interface load and puts the new coarse traces.
    """

    def __init__(self, problem: CouplingProblem, omega: float, relaxation: Relaxation, policy: Policy,
                 tol: float, max_iters: int, mode: str, keep_iterates: bool = False):
        if not omega > 0.0:
            raise EngineError(f"omega must be positive, got {omega}")
        if not tol > 0.0:
            raise EngineError(f"tol must be positive, got {tol}")
        if int(max_iters) < 1:
            raise EngineError(f"max_iters must be >= 1, got {max_iters}")
        self.problem = problem
        self.omega0 = float(omega)
        self.relaxation = Relaxation(relaxation)
        self.policy = Policy(policy)
        self.tol = float(tol)
        self.max_iters = int(max_iters)
        self.keep_iterates = keep_iterates

        self.doorbell = threading.Event()
        self.stop = StopFlag()
        n = problem.n_patches
        self.trace_boxes = [Mailbox(f"trace{k}") for k in range(n)]
        self.reaction_boxes = [Mailbox(f"reaction{k}", doorbell=self.doorbell) for k in range(n)]
        self.inboxes = self.reaction_boxes
        self.clock = lambda: 0.0

        self.record = RunRecord(mode=mode, omega0=self.omega0, n_patches=n)
        self.trace_tag = 0
        self.state = CouplingState.initial(problem.n_interface, omega)
        self.lam0: Optional[np.ndarray] = None
        self.traces: Dict[int, np.ndarray] = {} # u_A behind every trace tag still in flight (async)
        self.done = False

    def _scatter(self) -> List[Envelope]:
        self.state.u_A, self.lam0 = self.problem.global_solve(self.state.p)
        self.trace_tag = self.state.j + 1
        if self.policy == Policy.ASYNC:
            self.traces[self.trace_tag] = self.state.u_A
        return [
            Envelope(box, self.problem.coarse_trace(k, self.state.u_A), self.trace_tag)
            for k, box in enumerate(self.trace_boxes)
        ]

    def start(self) -> List[Envelope]:
        """Iteration 0: p = 0, global solve, first traces. Its zero residual is never tested."""
        self._log_row(0.0)
        return self._scatter()

    def ready(self) -> bool:
        if self.done:
            return False
        if self.policy == Policy.SYNC:
            return all(box.peek() is not None and box.peek().tag == self.trace_tag for box in self.reaction_boxes)
        return all(box.version > 0 for box in self.reaction_boxes) and any(box.has_new() for box in self.reaction_boxes)

    def _log_row(self, norm: float) -> None:
        self.record.residual_norms.append(float(norm))
        self.record.omegas.append(self.state.omega)
        self.record.times_ms.append(float(self.clock()))

    def _finish(self, status: Status) -> None:
        self.record.status = status
        self.record.it_global = self.state.j
        self.record.u_A = self.state.u_A
        self.record.wall_ms = float(self.clock())
        self.done = True
        self.stop.raise_flag(status.value)

    def step(self) -> List[Envelope]:
        messages = [box.take() for box in self.reaction_boxes]
        self.state.j += 1
        j = self.state.j
        r = self.problem.assemble_residual(self.lam0, [m.payload for m in messages])
        if self.policy == Policy.ASYNC:
            r = self._stale_corrected(r, messages)
        norm = float(np.linalg.norm(r))
        self.record.sigma.append(tuple(m.tag for m in messages))
        if self.keep_iterates:
            self.record.iterates.append((self.state.p.copy(), r.copy()))

        if not np.isfinite(norm):
            self._diverge(norm, "Residual is not finite")
        if j == 1:
            self.record.scale = convergence_scale(norm, self.problem.reference_rhs)
        rel = norm / self.record.scale
        self.record.rel_residual = rel
        if rel > settings.divergence_ratio:
            self._diverge(norm, f"Relative residual {rel:.3e} exceeds {settings.divergence_ratio:g}")

        converged = check_convergence(r, self.record.scale, self.tol)
        if not converged and self.relaxation == Relaxation.AITKEN and j >= 2:
            converged = self._aitken_update(r)
        self._log_row(norm)
        logger.debug("Coordinator iteration", iteration=j, residual=norm, relative=rel, omega=self.state.omega, sigma=self.record.sigma[-1])

        if converged:
            self._finish(Status.CONVERGED)
            return []
        if j >= self.max_iters:
            logger.warning("Maximum iterations reached", iterations=j, relative_residual=rel)
            self._finish(Status.MAX_ITERS)
            return []
        self.state.relax(r)
        return self._scatter()

    def _stale_corrected(self, r: np.ndarray, messages) -> np.ndarray:
        """
        Adds to every stale fine reaction the change of its cube's coarse reaction since
        the trace it answered, so the update reads p <- (1 - omega) p + omega G(p_sigma)
        with G the coupling fixed-point map. Fresh reactions are left untouched.
        """
        u_now = self.state.u_A
        for k, message in enumerate(messages):
            if message.tag == self.trace_tag:
                continue
            u_then = self.traces.get(message.tag)
            if u_then is None:
                raise EngineError(f"Reaction of patch {k} answers trace {message.tag}, which was already released")
            r = r - self.problem.stale_correction(k, u_now, u_then)
        oldest = min(message.tag for message in messages)
        for tag in [t for t in self.traces if t < oldest]:
            del self.traces[tag]
        return r

    def _aitken_update(self, r: np.ndarray) -> bool:
        """omega_j = -omega_{j-1} <r_{j-1}, dr> / ||dr||^2; returns True on a stationary residual."""
        dr = r - self.state.r
        denom = float(dr @ dr)
        if denom == 0.0:
            logger.info("Residual is stationary, stopping", iteration=self.state.j)
            self.record.stationary = True
            return True
        omega = -self.state.omega * float(self.state.r @ dr) / denom
        clipped = float(np.clip(omega, OMEGA_MIN, OMEGA_MAX_FACTOR * self.omega0))
        if clipped != omega:
            logger.debug("Aitken omega clipped", iteration=self.state.j, raw=omega, clipped=clipped)
        self.state.omega = clipped
        return False

    def _diverge(self, norm: float, reason: str) -> None:
        self._log_row(norm if np.isfinite(norm) else float("nan"))
        self._finish(Status.DIVERGED)
        logger.error("Coupling diverged", iteration=self.state.j, omega=self.state.omega, reason=reason)
        raise DivergenceError(reason, iteration=self.state.j, omega=self.state.omega, record=self.record)


class Worker:
    """Owns one or more fine patches; answers every new trace with a fine reaction."""

    def __init__(self, worker_id: int, problem: CouplingProblem, patches: Sequence[int],
                 trace_boxes: Sequence[Mailbox], reaction_boxes: Sequence[Mailbox]):
        self.worker_id = worker_id
        self.problem = problem
        self.patches = list(patches)
        self.doorbell = threading.Event()
        self.trace_boxes = list(trace_boxes)
        self.reaction_boxes = list(reaction_boxes)
        for box in self.trace_boxes:
            box.doorbell = self.doorbell
        self.inboxes = self.trace_boxes
        self.solves = {k: 0 for k in self.patches}

    def ready(self) -> bool:
        return any(box.has_new() for box in self.trace_boxes)

    def compute(self) -> Tuple[List[Envelope], int]:
        """Fine solves for every patch with a new trace; returns the reactions to put."""
        outgoing = []
        for k, trace_box, reaction_box in zip(self.patches, self.trace_boxes, self.reaction_boxes):
            if not trace_box.has_new():
                continue
            message = trace_box.take()
            reaction = self.problem.fine_reaction_from_trace(k, message.payload)
            self.solves[k] += 1
            outgoing.append(Envelope(reaction_box, reaction, message.tag))
        return outgoing, len(outgoing)


def deal_patches(n_patches: int, n_workers: int) -> List[List[int]]:
    """Round-robin assignment of patches to workers."""
    if not 1 <= n_workers <= n_patches:
        raise EngineError(f"workers must lie in [1, {n_patches}], got {n_workers}")
    return [list(range(w, n_patches, n_workers)) for w in range(n_workers)]


def _verify(problem: CouplingProblem, coordinator: Coordinator, record: RunRecord) -> None:
    """Recomputes the residual at the final u_A with fresh fine solves."""
    fresh = [problem.fine_local_solve(k, coordinator.state.u_A) for k in range(problem.n_patches)]
    r = problem.assemble_residual(coordinator.lam0, fresh)
    record.verification_residual = float(np.linalg.norm(r)) / record.scale
    if record.verification_residual > VERIFY_FACTOR * coordinator.tol:
        logger.warning("Asynchronous convergence not confirmed by fresh reactions",
                       verification=record.verification_residual, tol=coordinator.tol)
        record.status = Status.UNVERIFIED


def _run(problem: CouplingProblem, omega: float, relaxation: Relaxation, policy: Policy, mode: str,
         tol: float, max_iters: int, backend, schedule: Optional[DelaySchedule], workers: Optional[int],
         keep_iterates: bool) -> RunRecord:
    coordinator = Coordinator(problem, omega, relaxation, policy, tol, max_iters, mode, keep_iterates)
    n_workers = problem.n_patches if workers is None else int(workers)
    pool = []
    for w, patches in enumerate(deal_patches(problem.n_patches, n_workers)):
        pool.append(Worker(
            w, problem, patches,
            [coordinator.trace_boxes[k] for k in patches],
            [coordinator.reaction_boxes[k] for k in patches],
        ))
    if backend is None or isinstance(backend, str):
        backend = make_backend(backend or settings.default_backend, schedule)

    logger.info("Starting coupling run", mode=mode, omega=omega, tol=tol, workers=n_workers, backend=backend.name)
    record = coordinator.record
    started = time.perf_counter()
    try:
        backend.run(coordinator, pool)
    finally:
        fine = {}
        for worker in pool:
            fine.update(worker.solves)
        record.it_fine = [fine[k] for k in range(problem.n_patches)]
        if backend.name != "simulated":
            record.wall_ms = (time.perf_counter() - started) * 1000.0

    if policy == Policy.ASYNC and record.status == Status.CONVERGED:
        _verify(problem, coordinator, record)
    if record.u_A is not None:
        record.fine_fields = problem.fine_fields(record.u_A)
    logger.info("Coupling run finished", mode=mode, status=record.status.value, it_global=record.it_global,
                it_fine=record.it_fine, rel_residual=record.rel_residual, wall_ms=record.wall_ms)
    return record


def run_sync(problem: CouplingProblem, omega: float, tol: float = 1e-8, max_iters: int = 10000, *,
             backend=None, schedule: Optional[DelaySchedule] = None, workers: Optional[int] = None,
             keep_iterates: bool = False) -> RunRecord:
    """
    Synchronous relaxed Richardson iteration p += omega * r.

    Raises:
        DivergenceError: If the residual stops being finite or blows up; carries the partial record.
    """
    return _run(problem, omega, Relaxation.FIXED, Policy.SYNC, "sync", tol, max_iters,
                backend, schedule, workers, keep_iterates)


def run_aitken(problem: CouplingProblem, omega0: float, tol: float = 1e-8, max_iters: int = 10000, *,
               backend=None, schedule: Optional[DelaySchedule] = None, workers: Optional[int] = None,
               keep_iterates: bool = False) -> RunRecord:
    """Synchronous iteration with Aitken dynamic relaxation, starting from omega0."""
    return _run(problem, omega0, Relaxation.AITKEN, Policy.SYNC, "aitken", tol, max_iters,
                backend, schedule, workers, keep_iterates)


def run_async(problem: CouplingProblem, omega: float, tol: float = 1e-8, max_iters: int = 10000,
              schedule: Optional[DelaySchedule] = None, workers: Optional[int] = None, *,
              backend=None, keep_iterates: bool = False) -> RunRecord:
    """
    Asynchronous coupling: the coordinator iterates whenever any reaction is new and
    uses the latest value of the others, each stale one shifted by its coarse
    reaction change since its trace. A converged run is verified with fresh
    reactions and downgraded to "unverified" if that fails 10 * tol.
    """
    return _run(problem, omega, Relaxation.FIXED, Policy.ASYNC, "async", tol, max_iters,
                backend, schedule, workers, keep_iterates)
