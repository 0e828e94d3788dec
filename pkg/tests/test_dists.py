import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ipstop import dists
from ipstop.errors import BadParameters, CounterOutOfRange, EmptySource, MalformedRow
from ipstop.model import FactorizedPmf, JointPmf

HEADER = "t,intrusion_active,attacker_step,dx,dy,dz\n"

SAMPLE = HEADER + (
    "1,0,0,1,0,2\n"
    "2,0,0,3,0,2\n"
    "3,0,0,1,1,0\n"
    "4,1,1,6,2,1\n"
    "5,1,2,8,4,1\n"
    "6,1,3,8,4,1\n"
)


def test_relative_frequencies():
    comps = dists.ingest_measurements(SAMPLE.encode())
    quiet = comps[(0, 0)]
    assert isinstance(quiet, FactorizedPmf)
    assert quiet.dx.prob(1) == pytest.approx(2 / 3)
    assert quiet.dx.prob(3) == pytest.approx(1 / 3)
    assert quiet.dz.prob(2) == pytest.approx(2 / 3)
    assert quiet.sample_count == 3
    assert set(comps) == {(0, 0), (1, 1), (1, 2), (1, 3)}


def test_max_phase_pools_late_steps():
    comps = dists.ingest_measurements(SAMPLE.encode(), max_phase=2)
    assert set(comps) == {(0, 0), (1, 1), (1, 2)}
    assert comps[(1, 2)].sample_count == 2


def test_joint_estimate():
    comps = dists.ingest_measurements(SAMPLE.encode(), joint=True)
    quiet = comps[(0, 0)]
    assert isinstance(quiet, JointPmf)
    assert quiet.prob((1, 0, 2)) == pytest.approx(1 / 3)
    assert quiet.prob((1, 0, 0)) == 0.0


def test_smoothing_gives_every_value_mass():
    comps = dists.ingest_measurements(SAMPLE.encode(), bounds=(10, 10, 10), smoothing=True)
    quiet = comps[(0, 0)]
    assert quiet.dx.prob(7) == pytest.approx(1 / 14)
    assert quiet.dx.prob(1) == pytest.approx(3 / 14)


def test_joint_with_smoothing_rejected():
    with pytest.raises(BadParameters):
        dists.ingest_measurements(SAMPLE.encode(), joint=True, smoothing=True)


def test_accepts_path_and_file(tmp_path):
    path = tmp_path / "m.csv"
    path.write_text(SAMPLE)
    a = dists.model_from_measurements(str(path))
    b = dists.model_from_measurements(io.StringIO(SAMPLE))
    assert a == b


@pytest.mark.parametrize("text,exc,line", [
    ("", EmptySource, None),
    (HEADER, EmptySource, None),
    ("a,b,c\n1,0,0\n", MalformedRow, 1),
    (HEADER + "1,0,0,1,0\n", MalformedRow, 2),
    (HEADER + "1,0,0,1,0,0\n2,0,0,x,0,0\n", MalformedRow, 3),
    (HEADER + "1,2,0,1,0,0\n", MalformedRow, 2),
    (HEADER + "1,1,0,1,0,0\n", MalformedRow, 2),
    (HEADER + "1,0,3,1,0,0\n", MalformedRow, 2),
    (HEADER + "1,0,0,-1,0,0\n", CounterOutOfRange, 2),
    (HEADER + "1,0,0,0,0,1001\n", CounterOutOfRange, 2),
])
def test_bad_input(text, exc, line):
    with pytest.raises(exc) as info:
        dists.read_measurements(text.encode())
    if line is not None:
        assert info.value.line == line


def test_appendix_preset():
    z = dists.appendix_uniform()
    assert dists.pmf(z, 0, 0) == pytest.approx(0.2)
    assert dists.pmf(z, 5, 1) == pytest.approx(1 / 6)
    assert z.bounds == (5, 0, 0)


def test_poisson_preset_normalized():
    z = dists.overlapping_poissonlike(mean0=5, mean1=20)
    for key, comp in z.components.items():
        for f in (comp.dx, comp.dy, comp.dz):
            assert f.probs.sum() == pytest.approx(1.0, abs=1e-9)
    # truncation at a small bound still normalizes
    z = dists.overlapping_poissonlike(mean0=5, mean1=20, bounds=(10, 10, 10))
    assert z.components[(1, 0)].dx.probs.sum() == pytest.approx(1.0, abs=1e-9)
    assert z.components[(1, 0)].dx.max_value == 10


def test_poisson_phase_means():
    z = dists.overlapping_poissonlike(mean0=1, phase_means={1: 2, 2: (5, 1, 0)}, bounds=(30, 30, 30))
    assert z.phases(1) == [1, 2]
    assert z.components[(1, 2)].dz.prob(0) == 1.0
    with pytest.raises(BadParameters):
        dists.overlapping_poissonlike(phase_means={0: 2})


def test_full_synthetic_preset():
    z = dists.synthetic_model("full_synthetic")
    assert z.name == "full_synthetic"
    rng = np.random.default_rng(0)
    draws = np.array([z.sample(1, 1, rng) for _ in range(3000)])
    assert draws.mean(axis=0) == pytest.approx(dists.FULL_MEANS_ATTACK, rel=0.05)


def test_custom_table_per_counter():
    z = dists.custom_table({0: {"dx": {0: 1}, "dz": {0: 1, 1: 1}}, "1": {"dx": {1: 1}}})
    assert z.prob((0, 0, 1), 0) == pytest.approx(0.5)
    assert z.bounds == (1, 0, 1)


def test_unknown_preset():
    with pytest.raises(BadParameters):
        dists.synthetic_model("nope")
    with pytest.raises(BadParameters):
        dists.synthetic_model("appendix_uniform", mean=3)
    with pytest.raises(BadParameters):
        dists.resolve_model("no/such/model.json")


def test_model_file_roundtrip(tmp_path):
    z = dists.overlapping_poissonlike(mean0=(1, 2, 3), mean1=(4, 5, 6), bounds=(20, 20, 20))
    path = tmp_path / "m.json"
    dists.save_model(z, path)
    back = dists.resolve_model(str(path))
    assert back == z
    assert back.prob((3, 4, 5), 1) == z.prob((3, 4, 5), 1)


@settings(max_examples=25, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 4), st.integers(0, 4), st.integers(0, 4)), min_size=1, max_size=40))
def test_ingest_sums_to_one(rows):
    text = HEADER + "".join(f"{i},0,0,{a},{b},{c}\n" for i, (a, b, c) in enumerate(rows, start=1))
    comps = dists.ingest_measurements(text.encode(), joint=True)
    assert comps[(0, 0)].probs.sum() == pytest.approx(1.0)


def test_sampling_matches_pmf():
    z = dists.appendix_uniform()
    rng = np.random.default_rng(3)
    draws = np.array([dists.sample(z, 1, 1, rng)[0] for _ in range(12000)])
    freq = np.bincount(draws, minlength=6) / len(draws)
    assert np.abs(freq - 1 / 6).max() < 0.015
