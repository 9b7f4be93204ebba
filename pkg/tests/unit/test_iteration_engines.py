import numpy as np
import pytest
from numpy.testing import assert_allclose

from app.core.exceptions import DivergenceError, EngineError, WorkerFailureError
from app.services.coupling_core import global_solve, reference_solve
from app.services.iteration_engines import (
    OMEGA_MIN,
    Status,
    check_convergence,
    convergence_scale,
    deal_patches,
    run_aitken,
    run_async,
    run_sync,
)
from app.services.scheduling import DelaySchedule, SimulatedBackend, ThreadedBackend


def _relative_error(record, problem):
    u_R = reference_solve(problem).interface_displacement
    return np.linalg.norm(record.u_A - u_R) / np.linalg.norm(u_R)


class TestScalarToy:
    def test_sync_halves_the_residual(self, scalar_problem):
        record = run_sync(scalar_problem, 1.0, tol=1e-8)
        assert record.status == Status.CONVERGED
        assert record.it_global == 28
        assert len(record.history_rows()) == 29
        assert record.residual_norms[0] == 0.0
        assert_allclose(record.residual_norms[1:], [2.0 ** -(j - 1) for j in range(1, 29)])
        assert record.scale == 1.0
        assert record.it_fine == [28]
        assert_allclose(record.u_A, [1.0], rtol=1e-7)

    def test_optimal_omega_converges_in_two_iterations(self, scalar_problem):
        record = run_sync(scalar_problem, 2.0)
        assert record.converged
        assert record.it_global == 2
        assert record.residual_norms[2] == 0.0

    def test_aitken_finds_optimal_omega(self, scalar_problem):
        record = run_aitken(scalar_problem, 1.0)
        assert record.converged
        assert record.it_global == 3
        assert_allclose(record.omegas, [1.0, 1.0, 2.0, 2.0])
        assert not record.stationary

    def test_large_omega_diverges(self, scalar_problem):
        with pytest.raises(DivergenceError) as info:
            run_sync(scalar_problem, 6.0)
        assert info.value.iteration == 41
        assert info.value.omega == 6.0
        record = info.value.record
        assert record.status == Status.DIVERGED
        assert record.it_global == 41
        assert len(record.residual_norms) == 42

    def test_max_iters(self, scalar_problem):
        record = run_sync(scalar_problem, 1.0, max_iters=5)
        assert record.status == Status.MAX_ITERS
        assert not record.converged
        assert record.it_global == 5
        assert record.rel_residual == pytest.approx(2.0 ** -4)

    def test_sync_sigma_matches_iteration(self, scalar_problem):
        record = run_sync(scalar_problem, 1.0, max_iters=6)
        assert record.sigma == [(j,) for j in range(1, 7)]


class TestConvergenceHelpers:
    def test_check_convergence(self):
        assert check_convergence(np.array([3.0, 4.0]), 5.0, 1.0)
        assert not check_convergence(np.array([3.0, 4.0]), 5.0, 0.5)
        assert check_convergence(np.array([0.999e-8]), 1.0, 1e-8)
        assert not check_convergence(np.array([1.001e-8]), 1.0, 1e-8)
        with pytest.raises(EngineError, match="scale must be positive"):
            check_convergence(np.zeros(2), 0.0, 1e-8)

    def test_convergence_scale_falls_back_to_rhs(self):
        assert convergence_scale(2.0, np.array([3.0, 4.0])) == 2.0
        assert convergence_scale(1e-20, np.array([3.0, 4.0])) == 5.0
        assert convergence_scale(0.0, np.zeros(3)) == 1.0

    def test_deal_patches_round_robin(self):
        assert deal_patches(5, 2) == [[0, 2, 4], [1, 3]]
        assert deal_patches(3, 3) == [[0], [1], [2]]
        for bad in (0, 4):
            with pytest.raises(EngineError, match="workers must lie"):
                deal_patches(3, bad)


class TestEngineValidation:
    @pytest.mark.parametrize("kwargs", [{"omega": 0.0}, {"omega": 1.0, "tol": 0.0}, {"omega": 1.0, "max_iters": 0}])
    def test_bad_parameters(self, scalar_problem, kwargs):
        with pytest.raises(EngineError):
            run_sync(scalar_problem, **kwargs)

    def test_too_many_workers(self, column_problem):
        with pytest.raises(EngineError, match="workers"):
            run_sync(column_problem, 1.0, workers=3)


class TestSyncEngine:
    def test_residual_follows_linear_recurrence(self, column_problem):
        problem = column_problem
        omega = 0.8
        record = run_sync(problem, omega, tol=1e-10, max_iters=8, keep_iterates=True)
        S_G = problem.global_operator.toarray()
        S_R = problem.reference_operator().toarray()
        M = S_R @ np.linalg.inv(S_G)
        iterates = record.iterates
        assert len(iterates) == 8
        for (_, r_j), (_, r_next) in zip(iterates, iterates[1:]):
            expected = r_j - omega * (M @ r_j)
            assert np.linalg.norm(r_next - expected) <= 1e-9 * np.linalg.norm(r_j)

    def test_converges_to_reference(self, beam_problem):
        record = run_sync(beam_problem, 1.0, tol=1e-10)
        assert record.converged
        assert _relative_error(record, beam_problem) <= 1e-7
        assert len(record.fine_fields) == beam_problem.n_patches
        assert record.it_fine == [record.it_global] * beam_problem.n_patches

    def test_is_independent_of_workers_and_delays(self, beam_problem):
        base = run_sync(beam_problem, 1.0, tol=1e-8)
        dealt = run_sync(beam_problem, 1.0, tol=1e-8, workers=3,
                         schedule=DelaySchedule(mode="seeded-random", seed=5, delay=2.0))
        assert dealt.it_global == base.it_global
        assert_allclose(dealt.residual_norms, base.residual_norms, rtol=1e-12, atol=0.0)

    def test_partial_patching_converges(self, partial_column_problem):
        record = run_sync(partial_column_problem, 1.0, tol=1e-10)
        assert record.converged
        assert _relative_error(record, partial_column_problem) <= 1e-7

    def test_aitken_omegas_stay_in_bounds(self, beam_problem):
        aitken = run_aitken(beam_problem, 1.0, tol=1e-8)
        assert aitken.converged
        assert all(OMEGA_MIN <= w <= 1e3 for w in aitken.omegas)


class TestAsyncEngine:
    @pytest.mark.parametrize("name", ["beam_problem", "partial_column_problem"])
    def test_lockstep_without_delays_matches_sync(self, name, request):
        problem = request.getfixturevalue(name)
        sync = run_sync(problem, 1.0, tol=1e-8)
        asynchronous = run_async(problem, 1.0, tol=1e-8)
        assert asynchronous.it_global == sync.it_global
        assert asynchronous.residual_norms == sync.residual_norms
        assert asynchronous.sigma == sync.sigma
        assert asynchronous.status == Status.CONVERGED
        assert asynchronous.verification_residual <= 10 * 1e-8

    def test_is_deterministic(self, column_problem):
        schedule = DelaySchedule(mode="seeded-random", seed=42, delay=2.0)
        a = run_async(column_problem, 1.0, tol=1e-8, schedule=schedule)
        b = run_async(column_problem, 1.0, tol=1e-8, schedule=schedule)
        assert a.residual_norms == b.residual_norms
        assert a.sigma == b.sigma
        assert a.times_ms == b.times_ms

    @pytest.mark.parametrize("seed", [42, 7, 123])
    def test_converges_under_random_delays(self, beam_problem, seed):
        schedule = DelaySchedule(mode="seeded-random", seed=seed, delay=2.0)
        record = run_async(beam_problem, 1.0, tol=1e-10, schedule=schedule)
        assert record.status in (Status.CONVERGED, Status.UNVERIFIED)
        assert _relative_error(record, beam_problem) <= 1e-6

    def test_stale_tags_never_exceed_iteration(self, column_problem):
        schedule = DelaySchedule(mode="fixed", delay=0.0, per_worker={1: 4.0})
        record = run_async(column_problem, 1.0, tol=1e-8, max_iters=2000, schedule=schedule)
        for j, tags in enumerate(record.sigma, start=1):
            assert all(1 <= tag <= j for tag in tags)
        for k in range(column_problem.n_patches):
            per_patch = [tags[k] for tags in record.sigma]
            assert per_patch == sorted(per_patch)

    def test_slow_worker_is_overtaken(self, column_problem):
        schedule = DelaySchedule(mode="per-worker-slowdown", slowdown={0: 10.0})
        sync = run_sync(column_problem, 1.0, tol=1e-8, backend=SimulatedBackend(schedule))
        asynchronous = run_async(column_problem, 1.0, tol=1e-8, backend=SimulatedBackend(schedule))
        assert sync.converged
        assert asynchronous.status in (Status.CONVERGED, Status.UNVERIFIED)
        assert asynchronous.it_fine_max > asynchronous.it_fine_min

    def test_stale_residual_is_the_fixed_point_map_at_old_traces(self, column_problem):
        # r_j = -p_j + sum_s A^(s) (coarse reaction - J^T fine reaction) at the trace each reaction answered
        problem = column_problem
        schedule = DelaySchedule(mode="fixed", delay=0.0, per_worker={1: 4.0})
        record = run_async(problem, 1.0, tol=1e-10, max_iters=60, schedule=schedule, keep_iterates=True)
        assert any(len(set(tags)) > 1 for tags in record.sigma)
        traces = {}
        for j, ((p_j, r_j), tags) in enumerate(zip(record.iterates, record.sigma), start=1):
            expected = -p_j
            for k, tag in enumerate(tags):
                if tag not in traces:
                    traces[tag] = global_solve(problem, record.iterates[tag - 1][0])[0]
                s = problem.patch_of[k]
                local = problem.space.restrict(s, traces[tag])
                fine = problem.space.interpolators[k].T @ problem.fine_reaction_from_trace(k, local)
                expected = expected + problem.space.extend(s, problem.coarse[s].reaction(local) - fine)
            assert np.linalg.norm(r_j - expected) <= 1e-9 * max(np.linalg.norm(expected), 1.0)

    def test_fine_cost_sets_the_fine_solve_share(self, column_problem):
        schedule = DelaySchedule(mode="per-worker-slowdown", slowdown={0: 3.0})
        cheap = run_async(column_problem, 1.0, tol=1e-8, backend=SimulatedBackend(schedule, global_cost=1.0, fine_cost=1.0))
        costly = run_async(column_problem, 1.0, tol=1e-8, backend=SimulatedBackend(schedule, global_cost=1.0, fine_cost=4.0))
        for record in (cheap, costly):
            assert record.status in (Status.CONVERGED, Status.UNVERIFIED)
            assert record.it_fine_min < record.it_global
        assert costly.wall_ms > cheap.wall_ms

    def test_sync_time_grows_with_fine_cost(self, column_problem):
        cheap = run_sync(column_problem, 1.0, tol=1e-8, backend=SimulatedBackend(global_cost=1.0, fine_cost=1.0))
        costly = run_sync(column_problem, 1.0, tol=1e-8, backend=SimulatedBackend(global_cost=1.0, fine_cost=4.0))
        assert costly.it_global == cheap.it_global
        assert costly.residual_norms == cheap.residual_norms
        assert costly.wall_ms > cheap.wall_ms


class TestThreadedBackend:
    def test_sync_matches_simulated(self, column_problem):
        simulated = run_sync(column_problem, 1.0, tol=1e-8)
        threaded = run_sync(column_problem, 1.0, tol=1e-8, backend=ThreadedBackend(poll_s=0.01, time_unit_s=0.0))
        assert threaded.converged
        assert threaded.it_global == simulated.it_global
        assert_allclose(threaded.residual_norms, simulated.residual_norms, rtol=1e-12)

    def test_worker_failure_is_reported(self, scalar_problem, monkeypatch):
        def boom(k, trace):
            raise RuntimeError("fine solve exploded")

        monkeypatch.setattr(scalar_problem, "fine_reaction_from_trace", boom)
        with pytest.raises(WorkerFailureError, match="fine solve exploded") as info:
            run_async(scalar_problem, 1.0, backend=ThreadedBackend(poll_s=0.01, time_unit_s=0.0))
        assert info.value.worker_id == 0

    @pytest.mark.slow
    @pytest.mark.parametrize("repetition", range(3))
    def test_async_beats_sync_with_a_slow_worker(self, beam_problem, repetition):
        schedule = DelaySchedule(mode="per-worker-slowdown", slowdown={0: 10.0})
        sync = run_sync(beam_problem, 1.0, tol=1e-6, backend=ThreadedBackend(schedule, poll_s=0.01, time_unit_s=0.002))
        asynchronous = run_async(beam_problem, 1.0, tol=1e-6,
                                 backend=ThreadedBackend(schedule, poll_s=0.01, time_unit_s=0.002))
        assert sync.converged
        assert asynchronous.status in (Status.CONVERGED, Status.UNVERIFIED)
        assert asynchronous.wall_ms < sync.wall_ms


class TestBenchmarkBeam:
    """2x2x2 beam with coarse 4 and fine 8 elements per cube edge."""

    def test_sync_reaches_the_reference(self, full_beam_problem):
        record = run_sync(full_beam_problem, 1.0, tol=1e-10)
        assert record.converged
        assert _relative_error(record, full_beam_problem) <= 1e-7

    @pytest.mark.parametrize("seed", [42, 7, 123])
    def test_async_reaches_the_reference_under_random_delays(self, full_beam_problem, seed):
        schedule = DelaySchedule(mode="seeded-random", seed=seed, delay=2.0)
        record = run_async(full_beam_problem, 1.0, tol=1e-10, schedule=schedule)
        assert record.status in (Status.CONVERGED, Status.UNVERIFIED)
        assert _relative_error(record, full_beam_problem) <= 1e-7

    def test_aitken_matches_the_best_fixed_omega(self, full_beam_problem):
        best = None
        for omega in np.round(np.arange(0.5, 2.01, 0.1), 1):
            try:
                record = run_sync(full_beam_problem, float(omega), tol=1e-8, max_iters=500)
            except DivergenceError:
                continue
            if record.converged and (best is None or record.it_global < best):
                best = record.it_global
        aitken = run_aitken(full_beam_problem, 1.0, tol=1e-8)
        assert best is not None
        assert aitken.converged
        assert aitken.it_global <= best
