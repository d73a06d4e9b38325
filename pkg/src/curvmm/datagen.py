"""Synthetic corpus for the inverse problem: leadfields with a controlled
singular-value ratio, compact source patches on a ring or grid graph,
Gaussian or oscillatory waveforms, noise at an exact SNR, and a bit-exact
dataset directory format (manifest.json plus X.bin / Y.bin / L.bin).

Every sample is deterministic in its own seed, so generation order and
worker count never change dataset content.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass

import numpy as np
from scipy.special import expit

from .exceptions import ConfigError, DomainError, FormatError, InvalidInputError, ShapeError
from .losses import DomainConstraints

__all__ = [
    "InverseProblemInstance",
    "GeneratorConfig",
    "RingGeometry",
    "GridGeometry",
    "make_geometry",
    "make_leadfield",
    "make_source_patch",
    "gaussian_waveform",
    "oscillatory_waveform",
    "simulate_sample",
    "generate_dataset",
    "write_dataset",
    "read_dataset",
]

WAVEFORMS = ("gaussian", "oscillatory")
GEOMETRIES = ("ring", "grid")

_X_FILE, _Y_FILE, _L_FILE = "X.bin", "Y.bin", "L.bin"
_MANIFEST = "manifest.json"


@dataclass
class InverseProblemInstance:
    """One sample: sources ``X_true`` (s, t), measurements ``Y`` (n, t),
    leadfield ``L`` (n, s), plus the SNR and seed that produced it."""

    X_true: np.ndarray
    Y: np.ndarray
    L: np.ndarray
    snr_db: float
    seed: int

    def __post_init__(self):
        n, s = self.L.shape
        if self.X_true.shape[0] != s or self.Y.shape[0] != n:
            raise ShapeError(
                f"inconsistent shapes: X {self.X_true.shape}, Y {self.Y.shape}, "
                f"L {self.L.shape}"
            )
        if self.X_true.shape[1] != self.Y.shape[1]:
            raise ShapeError("X_true and Y disagree on the number of time samples")
        for name, a in (("X_true", self.X_true), ("Y", self.Y), ("L", self.L)):
            if not np.all(np.isfinite(a)):
                raise InvalidInputError(f"{name} contains non-finite entries")
        if np.any(np.linalg.norm(self.Y, axis=0) == 0.0):
            raise InvalidInputError("Y has an all-zero column")


@dataclass(frozen=True)
class GeneratorConfig:
    """Corpus parameters.

    Waveform parameters are uniform ranges; ``center_range`` and
    ``width_range`` are fractions of the window length. ``freq`` counts
    cycles across the window.
    """

    n: int = 16
    s: int = 64
    t: int = 8
    patch_extent: int = 2
    waveform: str = "gaussian"
    center_range: tuple = (0.25, 0.75)
    width_range: tuple = (0.05, 0.2)
    amplitude_range: tuple = (0.5, 1.0)
    freq_range: tuple = (1.0, 3.0)
    damping_range: tuple = (0.05, 0.3)
    coupling_range: tuple = (0.5, 2.0)
    snr_db: float = 10.0
    count: int = 500
    condition_target: float = 100.0
    seed: int = 0
    geometry: str = "ring"
    patch_tau: float = 1.0

    def __post_init__(self):
        if not self.s > self.n >= 2:
            raise ConfigError(f"need s > n >= 2, got n={self.n}, s={self.s}")
        if self.t < 2:
            raise ConfigError(f"t must be >= 2, got {self.t}")
        if self.count < 1:
            raise ConfigError(f"count must be >= 1, got {self.count}")
        if not 0 <= self.patch_extent < self.s:
            raise ConfigError(
                f"patch_extent must lie in [0, s), got {self.patch_extent}"
            )
        if self.waveform not in WAVEFORMS:
            raise ConfigError(f"waveform must be one of {WAVEFORMS}, got {self.waveform!r}")
        if self.geometry not in GEOMETRIES:
            raise ConfigError(f"geometry must be one of {GEOMETRIES}, got {self.geometry!r}")
        if self.condition_target < 1.0:
            raise ConfigError(
                f"condition_target must be >= 1, got {self.condition_target}"
            )
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")
        if not self.patch_tau > 0:
            raise ConfigError("patch_tau must be positive")
        for name in ("center_range", "width_range", "amplitude_range",
                     "freq_range", "damping_range", "coupling_range"):
            lo, hi = getattr(self, name)
            if not lo <= hi:
                raise ConfigError(f"{name} must be ordered, got ({lo}, {hi})")
        if self.width_range[0] <= 0:
            raise ConfigError("width_range must be positive")
        if self.freq_range[0] <= 0:
            raise ConfigError("freq_range must be positive")
        if self.damping_range[0] < 0 or self.coupling_range[0] < 0:
            raise ConfigError("damping and coupling must be nonnegative")


# ---------------------------------------------------------------------------
# neighborhood geometry


class RingGeometry:
    """Sources on a cycle; distance is the shorter arc."""

    kind = "ring"

    def __init__(self, size):
        if size < 2:
            raise ConfigError(f"ring needs at least 2 nodes, got {size}")
        self.size = size

    def distance(self, i, j):
        d = abs(int(i) - int(j))
        return min(d, self.size - d)

    @property
    def max_distance(self):
        return self.size // 2

    def ordered_neighbors(self, center):
        """All indices by increasing distance; the +side breaks ties."""
        out = [int(center)]
        for d in range(1, self.size // 2 + 1):
            fwd = (center + d) % self.size
            back = (center - d) % self.size
            out.append(int(fwd))
            if back != fwd:
                out.append(int(back))
        return out


class GridGeometry:
    """Sources on a rows-by-cols 4-neighbor grid; Manhattan distance."""

    kind = "grid"

    def __init__(self, rows, cols):
        if rows < 1 or cols < 1 or rows * cols < 2:
            raise ConfigError(f"grid {rows}x{cols} is too small")
        self.rows = rows
        self.cols = cols
        self.size = rows * cols

    def distance(self, i, j):
        ri, ci = divmod(int(i), self.cols)
        rj, cj = divmod(int(j), self.cols)
        return abs(ri - rj) + abs(ci - cj)

    @property
    def max_distance(self):
        return (self.rows - 1) + (self.cols - 1)

    def ordered_neighbors(self, center):
        return sorted(range(self.size),
                      key=lambda j: (self.distance(center, j), j))


def make_geometry(kind, s):
    """Geometry instance for ``s`` sources; grid demands a square count."""
    if kind == "ring":
        return RingGeometry(s)
    if kind == "grid":
        side = math.isqrt(s)
        if side * side != s:
            raise ConfigError(f"grid geometry needs a square source count, got {s}")
        return GridGeometry(side, side)
    raise ConfigError(f"geometry must be one of {GEOMETRIES}, got {kind!r}")


# ---------------------------------------------------------------------------
# building blocks


def make_leadfield(n, s, condition_target, seed):
    """Random forward operator with singular values in an exact geometric
    ladder: the ratio of the largest to the n-th equals ``condition_target``.

    The largest singular value is 1.
    """
    if not s > n >= 2:
        raise ConfigError(f"need s > n >= 2, got n={n}, s={s}")
    if condition_target < 1.0:
        raise ConfigError(f"condition_target must be >= 1, got {condition_target}")
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((n, s))
    u, _, vt = np.linalg.svd(a, full_matrices=False)
    sigma = condition_target ** (-np.arange(n) / (n - 1))
    return (u * sigma) @ vt


def make_source_patch(s, patch_extent, seed, tau=1.0, geometry="ring"):
    """Spatial profile: a seeded dipole plus its nearest graph neighbors.

    Support size is exactly ``patch_extent + 1``; the amplitude is
    ``exp(-d / tau)`` in graph distance ``d``, so the seed dipole has
    amplitude 1 and amplitudes decrease with distance.
    """
    if not 0 <= patch_extent < s:
        raise ConfigError(f"patch_extent must lie in [0, s), got {patch_extent}")
    if not tau > 0:
        raise ConfigError("tau must be positive")
    geo = make_geometry(geometry, s) if isinstance(geometry, str) else geometry
    rng = np.random.default_rng(seed)
    center = int(rng.integers(s))
    profile = np.zeros(s)
    for j in geo.ordered_neighbors(center)[:patch_extent + 1]:
        profile[j] = np.exp(-geo.distance(center, j) / tau)
    return profile


def gaussian_waveform(t, center, width, amplitude):
    """Pulse ``amplitude * exp(-(k - center)^2 / (2 width^2))`` on k = 0..t-1."""
    if t < 2:
        raise ConfigError(f"t must be >= 2, got {t}")
    if not width > 0:
        raise ConfigError(f"width must be positive, got {width}")
    k = np.arange(t, dtype=np.float64)
    return amplitude * np.exp(-((k - center) ** 2) / (2.0 * width * width))


def oscillatory_waveform(t, freq, damping, coupling, seed, substeps=64):
    """Damped oscillator pair with sigmoid coupling, integrated by RK4.

    The first unit starts at amplitude 1 with zero velocity; the second
    gets seeded random initial conditions and a seeded detuned frequency.
    ``freq`` counts cycles across the returned window of ``t`` samples.
    With zero damping and zero coupling the output is exactly
    ``cos(2 pi freq k / t)`` up to the integrator error.
    """
    if t < 2:
        raise ConfigError(f"t must be >= 2, got {t}")
    if not freq > 0:
        raise ConfigError(f"freq must be positive, got {freq}")
    if damping < 0 or coupling < 0:
        raise ConfigError("damping and coupling must be nonnegative")
    if substeps < 1:
        raise ConfigError("substeps must be >= 1")
    rng = np.random.default_rng(seed)
    omega = 2.0 * np.pi * freq
    omega_b = omega * rng.uniform(1.1, 1.6)
    state = np.array([1.0, 0.0, rng.standard_normal(), rng.standard_normal()])

    def deriv(y):
        a, adot, b, bdot = y
        return np.array([
            adot,
            -omega * omega * a - 2.0 * damping * omega * adot
            + coupling * (expit(b) - 0.5),
            bdot,
            -omega_b * omega_b * b - 2.0 * damping * omega_b * bdot
            + coupling * (expit(a) - 0.5),
        ])

    h = (1.0 / t) / substeps
    out = np.empty(t)
    out[0] = state[0]
    for k in range(1, t):
        for _ in range(substeps):
            k1 = deriv(state)
            k2 = deriv(state + 0.5 * h * k1)
            k3 = deriv(state + 0.5 * h * k2)
            k4 = deriv(state + h * k3)
            state = state + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        out[k] = state[0]
    return out


# ---------------------------------------------------------------------------
# sample assembly


def simulate_sample(cfg, sample_seed, leadfield=None):
    """One instance: rank-1 sources (patch profile times waveform), forward
    projection, noise at exactly ``cfg.snr_db``, then a joint rescale so the
    largest measurement column has unit norm.

    ``sample_seed`` must be a non-negative integer; identical seeds give
    bit-identical samples. Pass ``leadfield`` to share one operator across
    a dataset (it must match ``cfg.seed``'s, which is used otherwise).
    """
    if not isinstance(sample_seed, (int, np.integer)) or sample_seed < 0:
        raise ConfigError("sample_seed must be a non-negative integer")
    L = leadfield if leadfield is not None else make_leadfield(
        cfg.n, cfg.s, cfg.condition_target, cfg.seed
    )
    if L.shape != (cfg.n, cfg.s):
        raise ShapeError(f"leadfield shape {L.shape} != ({cfg.n}, {cfg.s})")
    rng = np.random.default_rng(sample_seed)
    patch_seed = int(rng.integers(2 ** 63))
    profile = make_source_patch(cfg.s, cfg.patch_extent, patch_seed,
                                tau=cfg.patch_tau, geometry=cfg.geometry)
    if cfg.waveform == "gaussian":
        center = rng.uniform(*cfg.center_range) * cfg.t
        width = rng.uniform(*cfg.width_range) * cfg.t
        amplitude = rng.uniform(*cfg.amplitude_range)
        wave = gaussian_waveform(cfg.t, center, width, amplitude)
    else:
        freq = rng.uniform(*cfg.freq_range)
        damping = rng.uniform(*cfg.damping_range)
        coupling = rng.uniform(*cfg.coupling_range)
        wave_seed = int(rng.integers(2 ** 63))
        wave = oscillatory_waveform(cfg.t, freq, damping, coupling, wave_seed)
    x = np.outer(profile, wave)
    y_clean = L @ x
    if np.isfinite(cfg.snr_db):
        noise = rng.standard_normal((cfg.n, cfg.t))
        clean_norm = float(np.linalg.norm(y_clean))
        noise_norm = float(np.linalg.norm(noise))
        if clean_norm == 0.0 or noise_norm == 0.0:
            raise DomainError("degenerate sample: zero signal or noise draw")
        eta = clean_norm / (noise_norm * 10.0 ** (cfg.snr_db / 20.0))
        y = y_clean + eta * noise
    else:
        y = y_clean
    peak = float(np.max(np.linalg.norm(y, axis=0)))
    if peak == 0.0:
        raise DomainError("degenerate sample: zero measurements")
    x = x / peak
    y = y / peak

    cons = DomainConstraints()
    col_norms = np.linalg.norm(y, axis=0)
    if np.any(col_norms < cons.delta_lo) or np.any(col_norms > cons.delta_hi):
        raise DomainError(
            "emitted measurements violate the column energy band; "
            "use a finite SNR or wider waveforms", constraint="y_energy",
        )
    if float(np.linalg.norm(x)) < cons.upsilon:
        raise DomainError("emitted sources below the minimum norm",
                          constraint="x_norm")
    return InverseProblemInstance(X_true=x, Y=y, L=L, snr_db=float(cfg.snr_db),
                                  seed=int(sample_seed))


def sample_seeds(cfg):
    """The per-sample seed list for a config (order-independent streams)."""
    return [
        int(np.random.SeedSequence([cfg.seed, k]).generate_state(1, np.uint64)[0])
        for k in range(cfg.count)
    ]


def generate_dataset(cfg, leadfield=None):
    """All ``cfg.count`` instances, sharing one leadfield."""
    L = leadfield if leadfield is not None else make_leadfield(
        cfg.n, cfg.s, cfg.condition_target, cfg.seed
    )
    return [simulate_sample(cfg, sd, leadfield=L) for sd in sample_seeds(cfg)]


# ---------------------------------------------------------------------------
# dataset directory IO


def write_dataset(path, samples, manifest=None):
    """Write ``manifest.json`` plus X.bin / Y.bin / L.bin under ``path``.

    Tensors are float64 little-endian, row-major, samples in order; the
    shared leadfield is stored once. ``manifest`` may carry extra keys
    (name, generator config); dimensional keys are derived from the data.
    """
    if not samples:
        raise InvalidInputError("cannot write an empty dataset")
    first = samples[0]
    n, s = first.L.shape
    t = first.Y.shape[1]
    for inst in samples:
        if inst.Y.shape != (n, t) or inst.X_true.shape != (s, t):
            raise ShapeError("samples disagree on shapes")
        if not np.array_equal(inst.L, first.L):
            raise InvalidInputError("samples must share one leadfield")
    meta = dict(manifest or {})
    meta.update({
        "version": 1,
        "n": n, "s": s, "t": t,
        "count": len(samples),
        "dtype": "f64le",
        "seeds": [int(inst.seed) for inst in samples],
        "snrs": [float(inst.snr_db) for inst in samples],
    })
    os.makedirs(path, exist_ok=True)
    with open(os.path.join(path, _MANIFEST), "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(os.path.join(path, _X_FILE), "wb") as fh:
        for inst in samples:
            fh.write(np.ascontiguousarray(inst.X_true, dtype="<f8").tobytes())
    with open(os.path.join(path, _Y_FILE), "wb") as fh:
        for inst in samples:
            fh.write(np.ascontiguousarray(inst.Y, dtype="<f8").tobytes())
    with open(os.path.join(path, _L_FILE), "wb") as fh:
        fh.write(np.ascontiguousarray(first.L, dtype="<f8").tobytes())
    return meta


def _read_tensor_file(path, name, count, shape):
    expected = 8 * count * int(np.prod(shape, dtype=np.int64))
    actual = os.path.getsize(path)
    if actual != expected:
        raise FormatError(
            f"{name} has {actual} bytes, expected {expected} "
            f"({count} tensors of shape {shape})",
            offset=min(actual, expected),
        )
    data = np.fromfile(path, dtype="<f8").astype(np.float64)
    data = data.reshape((count,) + shape)
    if not np.all(np.isfinite(data)):
        raise FormatError(f"{name} contains non-finite values")
    return data


def read_dataset(path):
    """Load a dataset directory; returns ``(samples, manifest)``."""
    manifest_path = os.path.join(path, _MANIFEST)
    if not os.path.isfile(manifest_path):
        raise FormatError(f"missing {_MANIFEST} under {path}")
    with open(manifest_path, "r", encoding="utf-8") as fh:
        try:
            meta = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"manifest is not valid JSON: {exc}") from exc
    try:
        n, s, t = int(meta["n"]), int(meta["s"]), int(meta["t"])
        count = int(meta["count"])
        seeds = [int(x) for x in meta["seeds"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"manifest missing required keys: {exc}") from exc
    if meta.get("dtype") != "f64le":
        raise FormatError(f"unsupported dtype {meta.get('dtype')!r}")
    if len(seeds) != count:
        raise FormatError(f"manifest lists {len(seeds)} seeds for count {count}")
    snrs = meta.get("snrs")
    if snrs is None:
        snrs = [float("nan")] * count
    if len(snrs) != count:
        raise FormatError(f"manifest lists {len(snrs)} snrs for count {count}")
    xs = _read_tensor_file(os.path.join(path, _X_FILE), _X_FILE, count, (s, t))
    ys = _read_tensor_file(os.path.join(path, _Y_FILE), _Y_FILE, count, (n, t))
    ls = _read_tensor_file(os.path.join(path, _L_FILE), _L_FILE, 1, (n, s))
    leadfield = ls[0]
    samples = [
        InverseProblemInstance(X_true=xs[k], Y=ys[k], L=leadfield,
                               snr_db=float(snrs[k]), seed=seeds[k])
        for k in range(count)
    ]
    return samples, meta


def config_to_manifest(cfg, name="dataset"):
    """Manifest skeleton recording the generator settings."""
    return {"name": name, "config": asdict(cfg)}
