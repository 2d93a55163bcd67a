import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from opdkit.consistency import (
    ClippedEvaluator,
    FunctionEvaluator,
    PotentialDifferenceEvaluator,
    Sampling,
    StateSet,
    accumulated_progress,
    additivity_residual,
    check_cocycle,
    equivalence_invariance_check,
    induce_potential,
    reconstruction_mismatches,
    refinement_drift,
)
from opdkit.errors import (
    AnchorNotInSet,
    ConfigError,
    EvaluatorFailure,
    InvalidPartition,
    NotARefinement,
    TooFewStates,
    TooShort,
)

PHI = {"a": 0.0, "b": 0.5, "c": 1.0}


def diff_eval(n, seed=0):
    rng = np.random.default_rng(seed)
    phi = {f"s{i}": float(v) for i, v in enumerate(rng.random(n))}
    return PotentialDifferenceEvaluator(phi), list(phi)


def test_residuals():
    E = PotentialDifferenceEvaluator(PHI)
    assert additivity_residual(E, "a", "b", "c") == 0
    C = ClippedEvaluator(PHI, 0.5)
    assert additivity_residual(C, "a", "b", "c") == -0.5
    assert additivity_residual(C, "b", "b", "b") == 0


def test_cocycle_consistent():
    E, ids = diff_eval(10)
    rep = check_cocycle(E, ids, sampling="exhaustive")
    assert rep.verdict == "consistent-within-tol"
    assert rep.max_abs_residual <= 1e-12
    assert rep.triples_checked == 1000


def test_cocycle_violated_with_certificate():
    rep = check_cocycle(ClippedEvaluator(PHI), list(PHI))
    assert rep.verdict == "violated"
    assert rep.violations
    c = rep.certificate
    assert (c.i, c.j, c.k, c.residual) == ("a", "b", "c", -0.5)
    assert rep.max_abs_residual == 0.5


def test_tolerance_semantics():
    rep = check_cocycle(ClippedEvaluator(PHI), list(PHI), tolerance=0.6)
    assert rep.verdict == "consistent-within-tol"
    rep = check_cocycle(ClippedEvaluator(PHI), list(PHI), tolerance=0.5)
    assert rep.verdict == "consistent-within-tol"  # strict >, 0.5 is not above 0.5


def test_too_few_states():
    with pytest.raises(TooFewStates):
        check_cocycle(PotentialDifferenceEvaluator(PHI), ["a", "b"])


def test_random_sampling_deterministic():
    E, ids = diff_eval(80, seed=3)
    r1 = check_cocycle(E, ids, sampling=Sampling.random(5000, seed=9))
    r2 = check_cocycle(E, ids, sampling=Sampling.random(5000, seed=9))
    assert r1.to_dict() == r2.to_dict()
    assert r1.sampling.startswith("random")
    assert 0 < r1.coverage < 1
    with pytest.raises(ConfigError):
        check_cocycle(E, ids, sampling="exhaustive")


def test_auto_switches_above_limit():
    E, ids = diff_eval(65)
    rep = check_cocycle(E, ids, sampling=Sampling("auto", 2000, 1))
    assert rep.sampling.startswith("random") and rep.triples_checked == 2000


def test_parallel_matches_serial():
    C = ClippedEvaluator({f"s{i}": i / 19 for i in range(20)}, 0.3)
    ids = list(C.potentials)
    a = check_cocycle(C, ids, jobs=1).to_dict()
    b = check_cocycle(C, ids, jobs=8).to_dict()
    assert a == b


def test_single_threaded_evaluator_honored():
    seen = set()
    lock = threading.Lock()

    def fn(i, j, ctx):
        with lock:
            seen.add(threading.get_ident())
        return PHI[j] - PHI[i]

    check_cocycle(FunctionEvaluator(fn, single_threaded=True), list(PHI), jobs=8)
    assert len(seen) == 1


def test_evaluator_failure():
    def fn(i, j, ctx):
        raise RuntimeError("boom")

    with pytest.raises(EvaluatorFailure):
        check_cocycle(FunctionEvaluator(fn), list(PHI))


def test_induce_potential():
    phi = {"x": 0.2, "y": 0.5, "z": 0.9}
    E = PotentialDifferenceEvaluator(phi)
    got = induce_potential(E, "x", list(phi))
    assert got == pytest.approx({"x": 0.0, "y": 0.3, "z": 0.7}, abs=1e-12)
    other = induce_potential(E, "z", list(phi))
    shifts = {s: got[s] - other[s] for s in phi}
    assert max(shifts.values()) - min(shifts.values()) < 1e-12
    with pytest.raises(AnchorNotInSet):
        induce_potential(E, "q", list(phi))


def test_clipped_reconstruction_mismatch():
    C = ClippedEvaluator(PHI)
    phi = induce_potential(C, "a", list(PHI))
    assert reconstruction_mismatches(C, phi)


def test_accumulated_and_drift():
    E = PotentialDifferenceEvaluator(PHI)
    C = ClippedEvaluator(PHI)
    assert accumulated_progress(E, ["a", "b", "c", "b"]) == pytest.approx(0.5)
    assert accumulated_progress(C, ["a", "c"]) == 0.5
    assert accumulated_progress(C, ["b", "c"]) == C.score("b", "c")
    assert refinement_drift(C, ["a", "c"], ["a", "b", "c"]) == 0.5
    assert refinement_drift(E, ["a", "c"], ["a", "b", "c"]) == 0
    with pytest.raises(NotARefinement):
        refinement_drift(E, ["a", "c"], ["b", "a", "c"])
    with pytest.raises(TooShort):
        accumulated_progress(E, ["a"])


def test_refinement_with_duplicate_potential():
    phi = {"a": 0.0, "a2": 0.0, "c": 1.0}
    E = PotentialDifferenceEvaluator(phi)
    assert refinement_drift(E, ["a", "c"], ["a", "a2", "c"]) == 0


def test_equivalence():
    score = {"p": 0.8, "q": 0.6, "r": 0.1}
    v = equivalence_invariance_check(score, [["p", "q"], ["r"]], 0.05)
    assert len(v) == 1 and v[0].gap == pytest.approx(0.2)
    assert equivalence_invariance_check(score, [["p", "q"], ["r"]], 0.3) == []
    assert equivalence_invariance_check({"p": 0.5, "q": 0.5, "r": 0.1}, [["p", "q"], ["r"]]) == []
    with pytest.raises(InvalidPartition):
        equivalence_invariance_check(score, [["p"], ["r"]])
    with pytest.raises(InvalidPartition):
        StateSet(("p", "q"), (("p", "q"), ("q",)))


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=3, max_size=20, unique=True))
def test_sufficiency_and_necessity(vals):
    phi = {f"s{i}": v for i, v in enumerate(vals)}
    E = PotentialDifferenceEvaluator(phi)
    rep = check_cocycle(E, list(phi))
    assert rep.max_abs_residual <= 1e-12
    rec = induce_potential(E, "s0", list(phi))
    assert not reconstruction_mismatches(E, rec, tolerance=1e-12)


@settings(max_examples=100)
@given(st.lists(st.floats(0, 1), min_size=2, max_size=15), st.data())
def test_telescoping(vals, data):
    phi = {i: v for i, v in enumerate(vals)}
    E = PotentialDifferenceEvaluator(phi)
    traj = list(phi)
    assert accumulated_progress(E, traj) == pytest.approx(vals[-1] - vals[0], abs=1e-12)
    sub = [traj[0]] + sorted(data.draw(st.sets(st.sampled_from(traj[1:-1]))) if len(traj) > 2 else []) + [traj[-1]]
    assert refinement_drift(E, sub, traj) <= 1e-12
