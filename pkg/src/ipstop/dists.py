"""Building observation models from measurements or from synthetic presets.

Measurement CSVs carry one row per simulated or emulated time-step::

    t,intrusion_active,attacker_step,dx,dy,dz

and are turned into empirical pmfs keyed by ``(state, phase)``, where the
phase is the ``attacker_step`` column (0 exactly when no intrusion is active).
"""
from __future__ import annotations

import csv
import io
import json
import os
from collections import Counter, defaultdict
from typing import Dict, Mapping, Optional, Tuple, Union

import numpy as np
from scipy import stats

from .errors import BadParameters, CounterOutOfRange, EmptySource, MalformedRow
from .model import COUNTERS, ComponentPmf, FactorizedPmf, JointPmf, ObservationModel, Pmf, as_triple

CSV_HEADER = ("t", "intrusion_active", "attacker_step", "dx", "dy", "dz")
DEFAULT_BOUNDS = (1000, 1000, 1000)

Key = Tuple[int, int]


def _read_text(source) -> str:
    if isinstance(source, (bytes, bytearray)):
        return bytes(source).decode("utf-8")
    if isinstance(source, (str, os.PathLike)):
        with open(source, "rb") as fh:
            return fh.read().decode("utf-8")
    data = source.read()
    return data.decode("utf-8") if isinstance(data, (bytes, bytearray)) else data


def _int_field(value: str, line: int, name: str) -> int:
    try:
        return int(value)
    except ValueError:
        raise MalformedRow(line, f"{name}={value!r} is not an integer") from None


def read_measurements(source, bounds=DEFAULT_BOUNDS):
    """Parse and validate measurement rows; yields ``(state, phase, (dx, dy, dz))``."""
    text = _read_text(source)
    if not text.strip():
        raise EmptySource("measurement source is empty")
    reader = csv.reader(io.StringIO(text, newline=""))
    header = next(reader)
    if tuple(h.strip() for h in header) != CSV_HEADER:
        raise MalformedRow(1, f"header must be {','.join(CSV_HEADER)}")
    rows = []
    for line, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != len(CSV_HEADER):
            raise MalformedRow(line, f"expected {len(CSV_HEADER)} fields, got {len(row)}")
        vals = [_int_field(v, line, n) for v, n in zip(row, CSV_HEADER)]
        t, active, step, dx, dy, dz = vals
        if active not in (0, 1):
            raise MalformedRow(line, "intrusion_active must be 0 or 1")
        if step < 0 or (step == 0) != (active == 0):
            raise MalformedRow(line, "attacker_step must be 0 exactly when no intrusion is active")
        for name, v, b in zip(COUNTERS, (dx, dy, dz), bounds):
            if not 0 <= v <= b:
                raise CounterOutOfRange(line, f"{name}={v} outside [0, {b}]")
        rows.append((active, step, (dx, dy, dz)))
    if not rows:
        raise EmptySource("measurement source has a header but no rows")
    return rows


def _counts_to_pmf(counts: Counter, bound: int, smoothing: bool) -> Pmf:
    if smoothing:
        w = np.ones(bound + 1)
        for k, c in counts.items():
            w[k] += c
        return Pmf(np.arange(bound + 1), w / w.sum())
    keys = sorted(counts)
    total = sum(counts.values())
    return Pmf(keys, [counts[k] / total for k in keys])


def ingest_measurements(source, bounds=DEFAULT_BOUNDS, joint: bool = False, smoothing: bool = False,
                        max_phase: Optional[int] = None) -> Dict[Key, ComponentPmf]:
    """Relative-frequency pmfs, one per ``(state, phase)`` key seen in the data.

    ``max_phase`` clamps attacker steps (later steps are pooled into the last
    phase). ``smoothing`` adds one pseudo-count to every counter value and is
    only available for the factorized representation.
    """
    if joint and smoothing:
        raise BadParameters("add-one smoothing is only supported for factorized pmfs")
    groups = defaultdict(list)
    for active, step, triple in read_measurements(source, bounds):
        phase = min(step, max_phase) if (max_phase is not None and step > 0) else step
        groups[(active, phase)].append(triple)
    out = {}
    for key in sorted(groups):
        triples = groups[key]
        if joint:
            counts = Counter(triples)
            out[key] = JointPmf.from_weights(counts, sample_count=len(triples))
        else:
            factors = [_counts_to_pmf(Counter(t[i] for t in triples), bounds[i], smoothing) for i in range(3)]
            out[key] = FactorizedPmf(*factors, sample_count=len(triples))
    return out


def model_from_measurements(source, bounds=DEFAULT_BOUNDS, **kwargs) -> ObservationModel:
    return ObservationModel(tuple(bounds), ingest_measurements(source, bounds, **kwargs), name="empirical")


def pmf(model: ObservationModel, o, state, phase: int = 0) -> float:
    return model.lookup(state, phase).prob(as_triple(o))


def sample(model: ObservationModel, state, phase: int, rng: np.random.Generator):
    return model.sample(state, phase, rng)


# --------------------------------------------------------------------------
# synthetic presets


def _truncated_poisson(mean: float, bound: int) -> Pmf:
    if mean < 0:
        raise BadParameters("poisson means must be non-negative")
    if mean == 0:
        return Pmf.point(0)
    w = stats.poisson.pmf(np.arange(bound + 1), mean)
    keep = w > 0
    return Pmf(np.arange(bound + 1)[keep], w[keep] / w[keep].sum())


def _triple(v) -> Tuple[float, float, float]:
    if np.isscalar(v):
        return (float(v),) * 3
    v = tuple(float(x) for x in v)
    if len(v) != 3:
        raise BadParameters("expected a scalar or three per-counter values")
    return v


def appendix_uniform() -> ObservationModel:
    """Scalar alert count: uniform on 0..4 without intrusion, on 0..5 with one."""
    return ObservationModel(
        (5, 0, 0),
        {(0, 0): FactorizedPmf(Pmf.uniform(0, 4)), (1, 0): FactorizedPmf(Pmf.uniform(0, 5))},
        name="appendix_uniform",
    )


def overlapping_poissonlike(mean0=5.0, mean1=20.0, bounds=DEFAULT_BOUNDS, phase_means=None) -> ObservationModel:
    """Truncated-Poisson counters whose means rise under intrusion.

    ``mean0``/``mean1`` are scalars or per-counter triples. ``phase_means``
    optionally maps attacker phases to per-counter means for the intrusion
    state, replacing ``mean1``.
    """
    bounds = tuple(int(b) for b in bounds)
    m0 = _triple(mean0)
    comps = {(0, 0): FactorizedPmf(*(_truncated_poisson(m, b) for m, b in zip(m0, bounds)))}
    if phase_means:
        for ph, means in sorted(phase_means.items()):
            if int(ph) < 1:
                raise BadParameters("intrusion phases start at 1")
            comps[(1, int(ph))] = FactorizedPmf(
                *(_truncated_poisson(m, b) for m, b in zip(_triple(means), bounds)))
    else:
        comps[(1, 0)] = FactorizedPmf(*(_truncated_poisson(m, b) for m, b in zip(_triple(mean1), bounds)))
    return ObservationModel(bounds, comps, name="overlapping_poissonlike")


FULL_MEANS_CLEAN = (2.0, 4.0, 3.0)
FULL_MEANS_ATTACK = (6.0, 12.0, 5.0)


def full_synthetic(bounds=DEFAULT_BOUNDS) -> ObservationModel:
    """Three informative counters; severe and warning alerts rise by the same factor,
    so the evidence they carry depends on ``x + y`` alone."""
    m = overlapping_poissonlike(FULL_MEANS_CLEAN, FULL_MEANS_ATTACK, bounds)
    return ObservationModel(m.bounds, m.components, name="full_synthetic")


def _parse_key(k) -> Key:
    if isinstance(k, tuple):
        return int(k[0]), int(k[1])
    parts = str(k).split(":")
    state = int(parts[0])
    return state, int(parts[1]) if len(parts) > 1 else 0


def custom_table(table: Mapping, bounds=None) -> ObservationModel:
    """Explicit weight tables.

    ``table`` maps a key (``0``, ``1`` or ``"1:phase"``) either to
    ``{value: weight}`` (a scalar count in ``dx``) or to per-counter tables
    ``{"dx": {...}, "dy": {...}, "dz": {...}}``. Missing counters are fixed at 0.
    """
    comps = {}
    for k, spec in table.items():
        spec = dict(spec)
        if spec and all(name in COUNTERS for name in spec):
            factors = [Pmf.from_weights(spec[c]) if c in spec else Pmf.point(0) for c in COUNTERS]
        else:
            factors = [Pmf.from_weights(spec), Pmf.point(0), Pmf.point(0)]
        comps[_parse_key(k)] = FactorizedPmf(*factors)
    if bounds is None:
        bounds = tuple(max(c.max_values()[i] for c in comps.values()) for i in range(3))
    return ObservationModel(tuple(bounds), comps, name="custom_table")


PRESETS = {
    "appendix_uniform": appendix_uniform,
    "overlapping_poissonlike": overlapping_poissonlike,
    "custom_table": custom_table,
    "full_synthetic": full_synthetic,
}


def synthetic_model(preset: str, **params) -> ObservationModel:
    try:
        build = PRESETS[preset]
    except KeyError:
        raise BadParameters(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}") from None
    try:
        return build(**params)
    except TypeError as exc:
        raise BadParameters(str(exc)) from None


# --------------------------------------------------------------------------
# model files


def dumps_model(model: ObservationModel) -> str:
    return json.dumps(model.to_dict(), indent=1, sort_keys=True) + "\n"


def save_model(model: ObservationModel, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dumps_model(model))


def load_model(path_or_text: Union[str, os.PathLike]) -> ObservationModel:
    text = str(path_or_text)
    if not text.lstrip().startswith("{"):
        with open(path_or_text, encoding="utf-8") as fh:
            text = fh.read()
    return ObservationModel.from_dict(json.loads(text))


def resolve_model(spec: str, **params) -> ObservationModel:
    """A preset name or a path to a model file."""
    if spec in PRESETS:
        return synthetic_model(spec, **params)
    if not os.path.exists(spec):
        raise BadParameters(f"{spec!r} is neither a preset {sorted(PRESETS)} nor an existing model file")
    if params:
        raise BadParameters("model parameters only apply to presets")
    return load_model(spec)
