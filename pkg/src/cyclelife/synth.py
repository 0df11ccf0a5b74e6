"""Synthetic cells with a planted delta-Q / cycle-life relation.

Per cell, with its own Philox stream keyed by ``(seed, index)``:

1. draw a fade exponent ``b`` and rate ``a`` and take the noiseless end of
   life ``N0`` where ``Q0 * (1 - a n^b)`` reaches ``eol_fraction * Q0``;
2. plant ``Var(dQ) = 10 ** ((log10 N0 - intercept) / slope)``;
3. perturb the realized life, ``N = N0 * 10**(noise_sigma * eps)``, and
   rescale the fade rate so the capacity series crosses exactly at ``N``;
4. build discharge curves ``Q_n(V) = C_n q(V) + d_n q(V)(1 - q(V))`` on the
   voltage grid, where ``q`` is a normalized logistic plateau and ``d_n``
   ramps from 0 at ``cycle_b`` to ``delta`` at ``cycle_a``; ``delta`` solves
   the quadratic that makes the grid variance of ``Q_a - Q_b`` equal the
   planted value.

So ``log10 N = intercept + slope * log10 Var(dQ) + noise_sigma * eps`` holds
exactly, with noise independent of the feature.  Curves are sampled on the
grid voltages themselves, which makes delta-Q extraction on the same grid
reproduce the planted variance to rounding error.

``fade_model="knee"`` adds a linear early-fade term (two regimes) for a
more Fig.-2-like look; its crossing is found numerically.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy import optimize

from .dataset import CellRecord, CycleCurve, Dataset, write_dataset
from .errors import ConfigError, SynthError
from .features import VoltageGrid

GROUND_TRUTH_HEADER = ["cell_id", "group_id", "true_var_dq", "true_cycle_life"]


@dataclass(frozen=True)
class SynthSpec:
    n_cells: int = 124
    seed: int = 0
    groups: int = 8
    nominal_capacity: float = 1.1
    fade_exponent_range: tuple[float, float] = (2.8, 3.2)
    fade_rate_range: tuple[float, float] = (5e-11, 7e-9)
    slope: float = -0.5
    intercept: float = 0.75
    noise_sigma: float = 0.05
    eol_fraction: float = 0.8
    max_cycle: int = 10_000
    cycle_a: int = 100
    cycle_b: int = 10
    curve_cycles: tuple[int, ...] = (10, 100)
    v_high: float = 3.5
    v_low: float = 2.0
    n_points: int = 1000
    plateau_voltage: float = 3.25
    plateau_width: float = 0.08
    fade_model: str = "power"
    knee_linear_rate: float = 2e-5

    def __post_init__(self):
        for name in ("fade_exponent_range", "fade_rate_range", "curve_cycles"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        self.validate()

    def validate(self) -> None:
        def bad(name, why):
            raise ConfigError(f"synth spec field {name!r}: {why}", field=name)

        if int(self.n_cells) != self.n_cells or self.n_cells < 2:
            bad("n_cells", f"need an integer >= 2 for regression, got {self.n_cells}")
        if int(self.groups) != self.groups or not 1 <= self.groups <= self.n_cells:
            bad("groups", f"need 1 <= groups <= n_cells, got {self.groups}")
        if not self.nominal_capacity > 0:
            bad("nominal_capacity", "must be positive")
        lo, hi = self.fade_exponent_range
        if not 0 < lo <= hi:
            bad("fade_exponent_range", f"need 0 < low <= high, got {self.fade_exponent_range}")
        lo, hi = self.fade_rate_range
        if not 0 <= lo <= hi:
            bad("fade_rate_range", f"need 0 <= low <= high, got {self.fade_rate_range}")
        if self.slope == 0:
            bad("slope", "planted slope must be nonzero")
        if not self.noise_sigma >= 0:
            bad("noise_sigma", "must be >= 0")
        if not 0 < self.eol_fraction < 1:
            bad("eol_fraction", "must lie in (0, 1)")
        if not self.cycle_a > self.cycle_b >= 1:
            bad("cycle_a", "need cycle_a > cycle_b >= 1")
        if self.cycle_a not in self.curve_cycles or self.cycle_b not in self.curve_cycles:
            bad("curve_cycles", "must include cycle_a and cycle_b")
        if self.max_cycle <= max(self.curve_cycles):
            bad("max_cycle", "must exceed every curve cycle")
        if not self.v_high > self.v_low or self.n_points < 2:
            bad("n_points", "need v_high > v_low and n_points >= 2")
        if not self.plateau_width > 0:
            bad("plateau_width", "must be positive")
        if self.fade_model not in ("power", "knee"):
            bad("fade_model", f"expected 'power' or 'knee', got {self.fade_model!r}")

    @property
    def grid(self) -> VoltageGrid:
        return VoltageGrid(self.v_high, self.v_low, self.n_points)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown synth spec field(s): {', '.join(unknown)}", field=unknown[0])
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(f"invalid synth spec: {exc}") from exc


@dataclass(frozen=True)
class CellTruth:
    cell_id: str
    group_id: str
    true_var_dq: float
    true_cycle_life: float
    cycle_life: float = field(default=float("nan"))
    fade_rate: float = field(default=float("nan"))
    fade_exponent: float = field(default=float("nan"))


def _cell_id(spec: SynthSpec, index: int) -> str:
    width = max(3, len(str(spec.n_cells - 1)))
    return f"cell_{index:0{width}d}"


def _group_id(spec: SynthSpec, index: int) -> str:
    return f"batch_{index * spec.groups // spec.n_cells:02d}"


def _rng(spec: SynthSpec, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([spec.seed, index])))


def plateau_fraction(v, spec: SynthSpec) -> np.ndarray:
    """Normalized depth of discharge q(V): 0 at v_high, 1 at v_low, logistic plateau."""
    def s(x):
        return 1.0 / (1.0 + np.exp((np.asarray(x, dtype=float) - spec.plateau_voltage) / spec.plateau_width))

    s_hi, s_lo = s(spec.v_high), s(spec.v_low)
    return (s(v) - s_hi) / (s_lo - s_hi)


def _fade_loss(n, a, b, spec: SynthSpec):
    n = np.asarray(n, dtype=float)
    loss = a * n ** b
    if spec.fade_model == "knee":
        loss = loss + spec.knee_linear_rate * n
    return loss


def _crossing(a, b, spec: SynthSpec) -> float:
    target = 1.0 - spec.eol_fraction
    if spec.fade_model == "power":
        if a <= 0:
            return math.inf
        return (target / a) ** (1.0 / b)
    if a <= 0 and spec.knee_linear_rate <= 0:
        return math.inf
    f = lambda n: float(_fade_loss(n, a, b, spec)) - target
    hi = 1.0
    while f(hi) < 0:
        hi *= 2
        if hi > 1e12:
            return math.inf
    return optimize.brentq(f, 0.0, hi, xtol=1e-13, rtol=1e-15, maxiter=500)


def fade_rate_for_life(life, b, spec: SynthSpec) -> float:
    target = 1.0 - spec.eol_fraction
    if spec.fade_model == "knee":
        target -= spec.knee_linear_rate * life
        if target <= 0:
            raise SynthError(f"linear knee term alone reaches end of life before cycle {life:.1f}")
    return target / life ** b


def generate_cell(
    spec: SynthSpec,
    index: int,
    fade_rate: float | None = None,
    fade_exponent: float | None = None,
    noise: float | None = None,
) -> tuple[CellRecord, CellTruth]:
    """One synthetic cell and its ground truth.

    ``fade_rate``, ``fade_exponent`` and ``noise`` (standard-normal draw)
    override the cell's random draws, for building controlled cells.
    """
    rng = _rng(spec, index)
    b_lo, b_hi = spec.fade_exponent_range
    a_lo, a_hi = spec.fade_rate_range
    b = rng.uniform(b_lo, b_hi)
    u = rng.random()
    eps = rng.standard_normal()
    if fade_exponent is not None:
        b = float(fade_exponent)
    if fade_rate is not None:
        a = float(fade_rate)
    elif a_lo > 0:
        a = math.exp(math.log(a_lo) + u * (math.log(a_hi) - math.log(a_lo)))
    else:
        a = a_lo + u * (a_hi - a_lo)
    if noise is not None:
        eps = float(noise)

    cid, gid = _cell_id(spec, index), _group_id(spec, index)
    life0 = _crossing(a, b, spec)
    if not math.isfinite(life0) or life0 > spec.max_cycle:
        raise SynthError(
            f"{cid}: fade (rate {a:g}, exponent {b:g}) never reaches "
            f"{spec.eol_fraction:g} x nominal capacity before cycle {spec.max_cycle}"
        )
    life = life0 * 10.0 ** (spec.noise_sigma * eps)
    if life > spec.max_cycle:
        raise SynthError(f"{cid}: noisy end of life {life:.1f} exceeds max_cycle {spec.max_cycle}")
    a_eff = fade_rate_for_life(life, b, spec)
    planted_var = 10.0 ** ((math.log10(life0) - spec.intercept) / spec.slope)

    q0 = spec.nominal_capacity
    last = int(min(spec.max_cycle, max(math.ceil(life * 1.05) + 10, max(spec.curve_cycles))))
    n = np.arange(1, last + 1, dtype=float)
    fade = q0 * (1.0 - _fade_loss(n, a_eff, b, spec))

    volts = spec.grid.voltages
    qv = plateau_fraction(volts, spec)
    hv = qv * (1.0 - qv)
    cap = {c: q0 * (1.0 - float(_fade_loss(c, a_eff, b, spec))) for c in spec.curve_cycles}
    dc = cap[spec.cycle_a] - cap[spec.cycle_b]
    vq, vh = qv.var(), hv.var()
    cqh = float(np.mean((qv - qv.mean()) * (hv - hv.mean())))
    # Vh d^2 + 2 dc Cqh d + dc^2 Vq - target = 0
    disc = (dc * cqh) ** 2 - vh * (dc * dc * vq - planted_var)
    if disc < 0:
        raise SynthError(
            f"{cid}: planted Var(dQ)={planted_var:.3g} is below what capacity fade alone "
            f"produces; raise the planted intercept or lower fade rates"
        )
    roots = [(-dc * cqh + sgn * math.sqrt(disc)) / vh for sgn in (1.0, -1.0)]
    delta = min(roots, key=abs)
    if abs(delta) >= 0.9 * min(cap.values()):
        raise SynthError(f"{cid}: curve perturbation {delta:.3g} Ah would break monotonicity")

    span = spec.cycle_a - spec.cycle_b
    curves = {}
    for c in spec.curve_cycles:
        ramp = min(max((c - spec.cycle_b) / span, 0.0), 1.0)
        qcurve = cap[c] * qv + delta * ramp * hv
        curves[c] = CycleCurve(c, volts, np.maximum.accumulate(qcurve))
    cell = CellRecord(cid, gid, q0, curves, n, fade)
    realized = float(np.var(curves[spec.cycle_a].discharge_capacity - curves[spec.cycle_b].discharge_capacity))
    truth = CellTruth(cid, gid, realized, float(life0), float(life), float(a_eff), float(b))
    return cell, truth


def generate_dataset(spec: SynthSpec, threads: int = 1) -> tuple[Dataset, list[CellTruth]]:
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            out = list(pool.map(lambda i: generate_cell(spec, i), range(spec.n_cells)))
    else:
        out = [generate_cell(spec, i) for i in range(spec.n_cells)]
    return Dataset(tuple(c for c, _ in out)), [t for _, t in out]


def write_ground_truth(truth, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(GROUND_TRUTH_HEADER)
        for t in sorted(truth, key=lambda t: t.cell_id):
            w.writerow([t.cell_id, t.group_id, repr(t.true_var_dq), repr(t.true_cycle_life)])


def read_ground_truth(path) -> dict[str, CellTruth]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        return {
            r["cell_id"]: CellTruth(r["cell_id"], r["group_id"], float(r["true_var_dq"]), float(r["true_cycle_life"]))
            for r in reader
        }


def write_synth(spec: SynthSpec, out_dir, threads: int = 1) -> Path:
    """Generate and write the dataset plus ``ground_truth.csv``; returns the manifest path."""
    dataset, truth = generate_dataset(spec, threads)
    out_dir = Path(out_dir)
    manifest = write_dataset(dataset, out_dir)
    write_ground_truth(truth, out_dir / "ground_truth.csv")
    return manifest
