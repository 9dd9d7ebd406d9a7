"""Synthetic capacity-fade corpora with a known knee.

Discharge capacity follows ``q(j) = q0 * (1 - a * (j / EOL) ** b)`` with
``a = 0.2``, so every cell ends at 80 % of its initial capacity on its last
cycle. The knee is the point of maximum curvature of the capacity curve in
normalised coordinates ``x = j / EOL``, ``y = q / q0``::

    kappa(x) = a b (b-1) x^(b-2) / (1 + (a b)^2 x^(2b-2))^(3/2)

whose maximiser has the closed form used by :func:`knee_fraction`. Internal
resistance bends upward at the same knee.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from battrul.data.cells import MIT7_COLUMNS, SYNTH, CellSeries


@dataclass
class SynthSpec:
    n_cells: int = 20
    eol_range: tuple[int, int] = (400, 800)
    exponent_range: tuple[float, float] = (5.0, 8.0)
    fade: float = 0.2
    q0: float = 1.1
    q0_spread: float = 0.005
    capacity_noise: float = 0.001
    resistance_noise: float = 0.0001
    temp_noise: float = 0.5
    time_noise: float = 0.05
    seed: int = 0
    id_prefix: str = "synth"

    def __post_init__(self):
        lo, hi = self.eol_range
        if self.n_cells < 1:
            raise ValueError("n_cells must be >= 1")
        if lo < 200 or hi < lo:
            raise ValueError(f"eol_range must satisfy 200 <= min <= max, got {self.eol_range}")
        if not (3.0 < self.exponent_range[0] <= self.exponent_range[1]):
            raise ValueError(f"exponent_range must satisfy 3 < min <= max, got {self.exponent_range}")
        if not 0.0 < self.fade < 1.0:
            raise ValueError("fade must be in (0, 1)")
        for name in ("capacity_noise", "resistance_noise", "temp_noise", "time_noise", "q0_spread"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d


@dataclass
class SynthCell:
    cell: CellSeries
    knee_cycle: int
    exponent: float
    q0: float

    @property
    def knee_frac(self) -> float:
        return self.knee_cycle / self.cell.eol


def capacity_curve(eol: int, q0: float, fade: float, exponent: float) -> np.ndarray:
    """Noise-free capacity of cycles ``1..eol``."""
    x = np.arange(1, eol + 1, dtype=np.float64) / eol
    return q0 * (1.0 - fade * x ** exponent)


def knee_fraction(fade: float, exponent: float) -> float:
    """Location of maximum normalised curvature as a fraction of EOL."""
    b = exponent
    c = fade * b
    u = (b - 2.0) / (c * c * (2.0 * b - 1.0))
    return float(min(1.0, u ** (1.0 / (2.0 * b - 2.0))))


def knee_cycle(eol: int, fade: float, exponent: float) -> int:
    return int(min(eol, max(1, round(knee_fraction(fade, exponent) * eol))))


def generate_synthetic(spec: SynthSpec) -> list[SynthCell]:
    """Generate ``spec.n_cells`` cells in the MIT channel layout.

    Channels: noisy discharge capacity on the fade curve; charge capacity a
    hair above it; internal resistance with a slow drift plus a linear rise
    that starts at the knee; temperatures as bounded uniform noise around
    fixed set points; charge time growing mildly with capacity fade.
    """
    seeds = np.random.SeedSequence(spec.seed).spawn(spec.n_cells)
    width = max(3, len(str(spec.n_cells - 1)))
    out = []
    for k, ss in enumerate(seeds):
        rng = np.random.default_rng(ss)
        eol = int(rng.integers(spec.eol_range[0], spec.eol_range[1] + 1))
        b = float(rng.uniform(*spec.exponent_range))
        q0 = spec.q0 * (1.0 + spec.q0_spread * rng.standard_normal())
        x = np.arange(1, eol + 1, dtype=np.float64) / eol
        q = capacity_curve(eol, q0, spec.fade, b)
        xk = knee_fraction(spec.fade, b)
        faded = 1.0 - q / q0

        discharge = q + spec.capacity_noise * rng.standard_normal(eol)
        charge = q * 1.002 + spec.capacity_noise * rng.standard_normal(eol)
        r0 = 0.016 * (1.0 + 0.01 * rng.standard_normal())
        # resistance elbow coincides with the capacity knee
        after = np.clip((x - xk) / max(1e-9, 1.0 - xk), 0.0, None)
        resistance = r0 * (1.0 + 0.01 * x + 0.3 * after)
        resistance += spec.resistance_noise * rng.standard_normal(eol)
        t_set = 30.5 + rng.uniform(-0.5, 0.5)
        temp_avg = t_set + rng.uniform(-spec.temp_noise, spec.temp_noise, eol)
        temp_min = temp_avg - 1.5 + rng.uniform(-spec.temp_noise, spec.temp_noise, eol)
        temp_max = temp_avg + 3.0 + rng.uniform(-spec.temp_noise, spec.temp_noise, eol)
        t0 = 10.0 * (1.0 + 0.01 * rng.standard_normal())
        charge_time = t0 * (1.0 + 0.3 * faded) + spec.time_noise * rng.standard_normal(eol)

        feats = np.column_stack(
            [discharge, resistance, charge, temp_avg, temp_min, temp_max, charge_time]
        )
        cell = CellSeries(f"{spec.id_prefix}-{k:0{width}d}", SYNTH, feats, MIT7_COLUMNS)
        out.append(SynthCell(cell, knee_cycle(eol, spec.fade, b), b, q0))
    return out
