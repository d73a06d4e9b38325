"""Bilevel training of the representation network and step-size predictor.

The training loss lives on top of the unrolled inner loop. A static
expression graph replays the solver iterations with the interval upper
ends bound as per-iteration constants; those constants come from a fast
numeric first pass over the same iterates. One reverse sweep through the
unrolled graph then yields the loss gradient with respect to every
parameter tensor at once. Updates use adaptive moment estimation, one
step per batch.

Checkpoints are a small binary container: magic ``MMCK``, a version word,
a JSON metadata block (tensor manifest, hyperparameters, loss history),
then the raw float64 little-endian tensor payloads in manifest order.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import curvature, linalg, losses, phinet
from . import predictor as pred_mod
from . import solver as solver_mod
from .exceptions import (
    ConfigError,
    CurvatureUnavailableError,
    FormatError,
    NumericError,
)

__all__ = [
    "TrainConfig",
    "TrainResult",
    "AdamState",
    "Unrolled",
    "HypergradientResult",
    "hypergradient",
    "training_loss",
    "adaptive_moment_step",
    "train",
    "split_indices",
    "Checkpoint",
    "save_checkpoint",
    "load_checkpoint",
]

CHECKPOINT_MAGIC = b"MMCK"
CHECKPOINT_VERSION = 1

# Distinct fixed tags keep the per-purpose random streams independent.
_SPLIT_TAG = 17
_ORDER_TAG = 101
_PHI_TAG = 1
_PRED_TAG = 2


@dataclass(frozen=True)
class TrainConfig:
    """Outer-loop settings; the inner loop is configured by ``solver``.

    ``lam`` weighs the regularizer of the lower objective. The network
    fields (``hidden_dim``, ``phi_hidden``, ``phi_eps``, ``p_scale``,
    ``init_weight_scale``) only matter when :func:`train` constructs the
    initial networks itself.
    """

    epochs: int = 500
    learning_rate: float = 5e-5
    batch_size: int = 16
    lam: float = 1.0
    solver: solver_mod.SolverConfig = field(default_factory=solver_mod.SolverConfig)
    seed: int = 0
    checkpoint_every: int = 0
    val_fraction: float = 0.2
    hidden_dim: int = 32
    phi_hidden: tuple | None = None
    phi_eps: float = 0.1
    p_scale: float = 1.0
    init_weight_scale: float | None = None
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if not np.isfinite(self.learning_rate) or self.learning_rate < 0:
            raise ConfigError(f"learning_rate must be finite and >= 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.lam >= 0:
            raise ConfigError(f"lam must be nonnegative, got {self.lam}")
        if self.solver.majorant_mode != "learned":
            raise ConfigError("training requires solver.majorant_mode='learned'")
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigError(f"val_fraction must lie in (0, 1), got {self.val_fraction}")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")
        if self.checkpoint_every < 0:
            raise ConfigError("checkpoint_every must be >= 0")
        if self.hidden_dim < 1:
            raise ConfigError(f"hidden_dim must be >= 1, got {self.hidden_dim}")
        if not self.p_scale > 0:
            raise ConfigError(f"p_scale must be positive, got {self.p_scale}")
        b1, b2 = self.betas
        if not 0.0 <= b1 < 1.0 or not 0.0 <= b2 < 1.0:
            raise ConfigError("moment decay rates must lie in [0, 1)")
        if not self.adam_eps > 0:
            raise ConfigError("adam_eps must be positive")


# ---------------------------------------------------------------------------
# unrolled graph


class Unrolled:
    """Static unrolled-solver graph for one shape signature.

    Variables: ``x_true``, ``y``, ``l``, ``x0``, per-iteration scalars
    ``nu_hi_i``, and every network parameter tensor. The projection of the
    step proposal uses a clamp whose bounds carry no derivative, so the
    interval ends act as constants of the replayed trajectory.
    """

    def __init__(self, n, s, t, inner_iters, gamma, lam, eps, upsilon, nu_lo,
                 hidden, phi_hidden, p_scale):
        h1, h2 = phi_hidden if phi_hidden is not None else (s, s)
        self.key = (n, s, t, inner_iters, gamma, lam, eps, upsilon, nu_lo,
                    hidden, h1, h2, p_scale)
        self.inner_iters = inner_iters
        xt = ad.var("x_true", (s, t))
        y = ad.var("y", (n, t))
        lf = ad.var("l", (n, s))
        x = ad.var("x0", (s, t))
        self.phi_vars = phinet.phi_param_vars(s, h1, h2)
        self.pred_vars = pred_mod.predictor_param_vars(s, hidden)
        self.nu_hi_names = [f"nu_hi_{i}" for i in range(inner_iters)]
        nu_lo_e = ad.const(float(nu_lo))
        state = {k: ad.const(np.zeros((hidden, t))) for k in ("h1", "c1", "h2", "c2")}
        self.iter_objectives = []
        for i in range(inner_iters):
            u_e, _, _ = losses.lower_objective_graph(x, y, lf, self.phi_vars, lam, eps)
            self.iter_objectives.append(u_e)
            g_e = ad.grad_graph(u_e, x)
            p_tilde, state = pred_mod.predictor_graph(x, g_e, state, self.pred_vars, p_scale)
            p_e = ad.clamp(p_tilde, nu_lo_e, ad.var(self.nu_hi_names[i], ()))
            x_step = ad.sub(x, ad.scale(ad.mul(p_e, g_e), float(gamma)))
            factor = ad.clamp(ad.div(ad.const(float(upsilon)), ad.norm2(x_step)), 1.0, 1e30)
            x = ad.scale(x_step, factor)
        self.final_objective = losses.lower_objective_graph(
            x, y, lf, self.phi_vars, lam, eps
        )[0]
        self.x_final = x
        self.loss = losses.upper_loss_graph(xt, x, self.phi_vars, eps)
        self.param_names = sorted(self.phi_vars) + sorted(self.pred_vars)
        self.tape = ad.Tape(
            [self.loss, self.x_final, self.final_objective] + self.iter_objectives
        )

    @classmethod
    def for_problem(cls, inst, spec, solver_cfg, phi, predictor):
        """Build (or fetch from cache) the graph matching one instance."""
        n, s = inst.L.shape
        t = inst.Y.shape[1]
        key = (n, s, t, solver_cfg.inner_iters, solver_cfg.gamma, spec.lam,
               phi.eps, spec.constraints.upsilon, solver_cfg.nu_lo,
               predictor.hidden, phi.hidden[0], phi.hidden[1],
               predictor.p_scale)
        hit = _GRAPH_CACHE.get(key)
        if hit is not None:
            return hit
        built = cls(n, s, t, solver_cfg.inner_iters, solver_cfg.gamma, spec.lam,
                    phi.eps, spec.constraints.upsilon, solver_cfg.nu_lo,
                    predictor.hidden, phi.hidden, predictor.p_scale)
        if len(_GRAPH_CACHE) >= 8:
            _GRAPH_CACHE.pop(next(iter(_GRAPH_CACHE)))
        _GRAPH_CACHE[key] = built
        return built

    def bindings(self, inst, phi, predictor, x0, nu_his):
        if len(nu_his) != self.inner_iters:
            raise ConfigError(
                f"expected {self.inner_iters} interval ends, got {len(nu_his)}"
            )
        b = {"x_true": inst.X_true, "y": inst.Y, "l": inst.L, "x0": x0}
        b.update(phinet.phi_param_arrays(phi))
        b.update(pred_mod.predictor_param_arrays(predictor))
        for name, nu in zip(self.nu_hi_names, nu_his):
            b[name] = nu
        return b


_GRAPH_CACHE: dict = {}


@dataclass
class HypergradientResult:
    loss: float
    grads: dict | None
    trace: solver_mod.SolverTrace
    x_final: np.ndarray
    objective_taps: list


def hypergradient(inst, phi, predictor, spec, solver_cfg, unrolled=None,
                  sample_seed=None, want_grads=True, leadfield_norm=None,
                  jac_bound=None, hess_bound=None):
    """Training loss (and parameter gradients) for one instance.

    Pass one runs the fast numeric solver to fix the initial point and the
    per-iteration interval ends; pass two replays the trajectory on the
    unrolled graph and sweeps it in reverse. ``solver_cfg`` must be in
    learned mode.
    """
    if solver_cfg.majorant_mode != "learned":
        raise ConfigError("training requires majorant_mode='learned'")
    if spec.columnwise:
        raise ConfigError("unrolled training supports the flattened objective only")
    if getattr(inst, "X_true", None) is None:
        raise ConfigError("training requires instances with ground truth")
    trace = solver_mod.solve_lower(
        inst, phi, predictor, solver_cfg, spec, seed=sample_seed,
        leadfield_norm=leadfield_norm, jac_bound=jac_bound, hess_bound=hess_bound,
    )
    if unrolled is None:
        unrolled = Unrolled.for_problem(inst, spec, solver_cfg, phi, predictor)
    buf = unrolled.tape.forward(
        unrolled.bindings(inst, phi, predictor, trace.x_init, trace.nu_his)
    )
    loss = float(unrolled.tape.value(buf, unrolled.loss))
    if not np.isfinite(loss):
        raise NumericError("non-finite training loss")
    taps = [float(unrolled.tape.value(buf, e)) for e in unrolled.iter_objectives]
    taps.append(float(unrolled.tape.value(buf, unrolled.final_objective)))
    x_final = unrolled.tape.value(buf, unrolled.x_final)
    grads = None
    if want_grads:
        grads = unrolled.tape.backward(buf, unrolled.param_names)
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient for {name}")
    return HypergradientResult(loss=loss, grads=grads, trace=trace,
                               x_final=x_final, objective_taps=taps)


def training_loss(inst, phi, predictor, spec, solver_cfg, unrolled=None,
                  sample_seed=None):
    """Loss-only evaluation of the same two-pass pipeline."""
    return hypergradient(
        inst, phi, predictor, spec, solver_cfg, unrolled=unrolled,
        sample_seed=sample_seed, want_grads=False,
    ).loss


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    """First/second moment accumulators keyed like the parameter dict."""

    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adaptive_moment_step(params, grads, moments, lr, betas=(0.9, 0.999),
                         eps=1e-8):
    """One bias-corrected moment update over a dict of tensors.

    Returns ``(new_params, new_moments)`` without mutating the inputs.
    A zero learning rate still advances the moments but returns
    bit-identical parameters.
    """
    b1, b2 = betas
    t = moments.t + 1
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    new_m, new_v, out = {}, {}, {}
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        m_prev = moments.m.get(name, 0.0)
        v_prev = moments.v.get(name, 0.0)
        m = b1 * m_prev + (1.0 - b1) * g
        v = b2 * v_prev + (1.0 - b2) * (g * g)
        new_m[name] = m
        new_v[name] = v
        if lr == 0.0:
            out[name] = np.array(p, dtype=np.float64, copy=True)
        else:
            out[name] = p - lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return out, AdamState(m=new_m, v=new_v, t=t)


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    """Everything needed to resume or deploy: networks, moments, history."""

    phi: phinet.PhiParameters
    predictor: pred_mod.PredictorParameters
    moments: AdamState | None
    epoch: int
    history: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)


def _parameter_manifest(ck):
    tensors = []
    tensors += list(phinet.phi_param_arrays(ck.phi).items())
    tensors += list(pred_mod.predictor_param_arrays(ck.predictor).items())
    if ck.moments is not None and ck.moments.m:
        base = [name for name, _ in tensors]
        tensors += [("adam.m." + n, ck.moments.m[n]) for n in base]
        tensors += [("adam.v." + n, ck.moments.v[n]) for n in base]
    return tensors


def save_checkpoint(ck, path):
    """Write a :class:`Checkpoint` to ``path``."""
    tensors = _parameter_manifest(ck)
    has_moments = ck.moments is not None and bool(ck.moments.m)
    meta = {
        "tensors": [[name, list(np.shape(arr))] for name, arr in tensors],
        "phi_eps": ck.phi.eps,
        "p_scale": ck.predictor.p_scale,
        "epoch": int(ck.epoch),
        "adam_t": ck.moments.t if has_moments else None,
        "history": ck.history,
        "extra": ck.extra,
    }
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for _, arr in tensors:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path):
    """Read a checkpoint; structural problems raise ``FormatError``."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 12:
        raise FormatError("checkpoint shorter than its fixed header", offset=len(raw))
    if raw[:4] != CHECKPOINT_MAGIC:
        raise FormatError("bad checkpoint magic", offset=0)
    version = struct.unpack("<I", raw[4:8])[0]
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=4)
    meta_len = struct.unpack("<I", raw[8:12])[0]
    if 12 + meta_len > len(raw):
        raise FormatError("metadata block truncated", offset=len(raw))
    try:
        meta = json.loads(raw[12:12 + meta_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"metadata is not valid JSON: {exc}", offset=12) from exc
    try:
        manifest = [(str(n), tuple(int(d) for d in shp)) for n, shp in meta["tensors"]]
        phi_eps = float(meta["phi_eps"])
        p_scale = float(meta["p_scale"])
        epoch = int(meta["epoch"])
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"metadata missing required fields: {exc}", offset=12) from exc
    expected = 12 + meta_len + sum(
        8 * int(np.prod(shp, dtype=np.int64)) for _, shp in manifest
    )
    if len(raw) != expected:
        raise FormatError(
            f"tensor payload has {len(raw)} bytes, expected {expected}",
            offset=min(len(raw), expected),
        )
    arrays = {}
    off = 12 + meta_len
    for name, shp in manifest:
        count = int(np.prod(shp, dtype=np.int64))
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=off)
        off += 8 * count
        arr = np.array(arr, dtype=np.float64).reshape(shp)
        if not np.all(np.isfinite(arr)):
            raise FormatError(f"tensor {name!r} contains non-finite values",
                              offset=off - 8 * count)
        arrays[name] = arr
    try:
        phi = phinet.phi_from_arrays(arrays, eps=phi_eps)
        predictor = pred_mod.predictor_from_arrays(arrays, p_scale=p_scale)
    except KeyError as exc:
        raise FormatError(f"manifest missing tensor {exc}", offset=12) from exc
    moments = None
    if meta.get("adam_t") is not None:
        base = [n for n in arrays if not n.startswith("adam.")]
        try:
            moments = AdamState(
                m={n: arrays["adam.m." + n] for n in base},
                v={n: arrays["adam.v." + n] for n in base},
                t=int(meta["adam_t"]),
            )
        except KeyError as exc:
            raise FormatError(f"manifest missing moment tensor {exc}", offset=12) from exc
    return Checkpoint(phi=phi, predictor=predictor, moments=moments, epoch=epoch,
                      history=meta.get("history", []), extra=meta.get("extra", {}))


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    phi: phinet.PhiParameters
    predictor: pred_mod.PredictorParameters
    best_phi: phinet.PhiParameters
    best_predictor: pred_mod.PredictorParameters
    best_epoch: int
    best_val: float
    moments: AdamState
    history: list
    skipped: int

    def checkpoint(self, best=True):
        """Package the run (best or final networks) for saving."""
        phi = self.best_phi if best else self.phi
        predictor = self.best_predictor if best else self.predictor
        return Checkpoint(
            phi=phi, predictor=predictor, moments=self.moments,
            epoch=self.history[-1]["epoch"] if self.history else 0,
            history=self.history,
            extra={"best_epoch": self.best_epoch, "best_val": self.best_val,
                   "best": bool(best)},
        )


def _chunks(seq, size):
    for i in range(0, len(seq), size):
        yield seq[i:i + size]


def split_indices(count, val_fraction, seed):
    """Deterministic shuffle split; returns ``(train_idx, val_idx)``."""
    if count < 1:
        raise ConfigError("training requires at least one instance")
    perm = np.random.default_rng([seed, _SPLIT_TAG]).permutation(count)
    n_val = int(round(count * val_fraction))
    if count > 1:
        n_val = min(max(n_val, 1), count - 1)
    else:
        n_val = 0
    return [int(i) for i in perm[n_val:]], [int(i) for i in perm[:n_val]]


def _mean_upper_loss(instances, idx, phi, predictor, spec, solver_cfg, ln_cache):
    if not idx:
        return None
    total = 0.0
    jac = curvature.network_jacobian_bound(phi)
    hess = curvature.network_hessian_bound(phi)
    for k in idx:
        inst = instances[k]
        trace = solver_mod.solve_lower(
            inst, phi, predictor, solver_cfg, spec, seed=[solver_cfg.seed, k],
            leadfield_norm=ln_cache(inst), jac_bound=jac, hess_bound=hess,
        )
        total += losses.upper_loss(inst.X_true, trace.x_final, phi)
    return float(total / len(idx))


def train(instances, cfg, spec=None, phi=None, predictor=None, moments=None,
          start_epoch=0, log_cb=None, best_val=None, best_epoch=None):
    """Fit both networks on a dataset; returns a :class:`TrainResult`.

    ``instances`` need ``Y``, ``L`` and ``X_true``. The objective spec
    defaults to ``cfg.lam`` with standard domain constraints. Resume by
    passing the loaded networks, moments and ``start_epoch`` (plus the
    previous ``best_val`` / ``best_epoch`` so best tracking continues);
    the epoch-indexed random streams make the continuation match an
    uninterrupted run. ``log_cb`` receives
    ``(entry, phi, predictor, moments)`` once per epoch.
    """
    solver_cfg = cfg.solver
    if spec is None:
        spec = losses.ObjectiveSpec(lam=cfg.lam)
    if not instances:
        raise ConfigError("training requires at least one instance")
    n, s = instances[0].L.shape
    t = instances[0].Y.shape[1]
    for inst in instances:
        if inst.L.shape != (n, s) or inst.Y.shape != (n, t):
            raise ConfigError("all instances must share one shape signature")
        if getattr(inst, "X_true", None) is None:
            raise ConfigError("training requires instances with ground truth")

    if phi is None:
        phi = phinet.make_phi(s, hidden=cfg.phi_hidden, eps=cfg.phi_eps,
                              seed=[cfg.seed, _PHI_TAG],
                              weight_scale=cfg.init_weight_scale)
    if predictor is None:
        predictor = pred_mod.make_predictor(s, hidden=cfg.hidden_dim,
                                            seed=[cfg.seed, _PRED_TAG],
                                            weight_scale=cfg.init_weight_scale,
                                            p_scale=cfg.p_scale)
    if moments is None:
        moments = AdamState()

    train_idx, val_idx = split_indices(len(instances), cfg.val_fraction, cfg.seed)

    norms = {}

    def ln_cache(inst):
        key = id(inst.L)
        if key not in norms:
            norms[key] = linalg.spectral_norm(inst.L)
        return norms[key]

    unrolled = Unrolled.for_problem(instances[0], spec, solver_cfg, phi, predictor)
    history = []
    skipped_total = 0
    best_val = np.inf if best_val is None else float(best_val)
    best_epoch = start_epoch if best_epoch is None else int(best_epoch)
    best_phi, best_predictor = phi, predictor

    def validate_and_track(epoch):
        nonlocal best_val, best_epoch, best_phi, best_predictor
        val = _mean_upper_loss(instances, val_idx, phi, predictor, spec,
                               solver_cfg, ln_cache)
        if val is not None and val < best_val:
            best_val = val
            best_epoch = epoch
            best_phi, best_predictor = phi, predictor
        return val

    def emit(entry):
        history.append(entry)
        if log_cb is not None:
            log_cb(entry, phi, predictor, moments)

    if cfg.epochs == 0:
        val = validate_and_track(start_epoch)
        emit({"epoch": start_epoch, "train_loss": None, "val_loss": val,
              "lower_final": None, "violations": 0, "skipped": 0, "best": True})

    for epoch in range(start_epoch, start_epoch + cfg.epochs):
        order = [train_idx[int(i)] for i in
                 np.random.default_rng([cfg.seed, _ORDER_TAG, epoch])
                 .permutation(len(train_idx))]
        epoch_loss = 0.0
        epoch_lower = 0.0
        epoch_count = 0
        epoch_violations = 0
        epoch_skipped = 0
        for batch_no, batch in enumerate(_chunks(order, cfg.batch_size)):
            jac = curvature.network_jacobian_bound(phi)
            hess = curvature.network_hessian_bound(phi)
            acc = None
            got = 0
            for k in batch:
                inst = instances[k]
                try:
                    res = hypergradient(
                        inst, phi, predictor, spec, solver_cfg,
                        unrolled=unrolled, sample_seed=[solver_cfg.seed, epoch, k],
                        leadfield_norm=ln_cache(inst), jac_bound=jac,
                        hess_bound=hess,
                    )
                except CurvatureUnavailableError:
                    epoch_skipped += 1
                    continue
                except NumericError as exc:
                    raise NumericError(
                        f"training aborted at epoch {epoch}, batch {batch_no}, "
                        f"sample {k}: {exc}"
                    ) from exc
                got += 1
                epoch_count += 1
                epoch_loss += res.loss
                epoch_lower += res.trace.objectives[-1]
                epoch_violations += res.trace.descent_violations
                if acc is None:
                    acc = {name: g.copy() for name, g in res.grads.items()}
                else:
                    for name, g in res.grads.items():
                        acc[name] += g
            if got == 0:
                continue
            for name in acc:
                acc[name] /= got
            params = {}
            params.update(phinet.phi_param_arrays(phi))
            params.update(pred_mod.predictor_param_arrays(predictor))
            new, moments = adaptive_moment_step(
                params, acc, moments, cfg.learning_rate, betas=cfg.betas,
                eps=cfg.adam_eps,
            )
            phi = phinet.phi_from_arrays(new, eps=phi.eps)
            predictor = pred_mod.predictor_from_arrays(new, p_scale=predictor.p_scale)
        skipped_total += epoch_skipped
        val = validate_and_track(epoch)
        emit({
            "epoch": epoch,
            "train_loss": float(epoch_loss / epoch_count) if epoch_count else None,
            "val_loss": val,
            "lower_final": float(epoch_lower / epoch_count) if epoch_count else None,
            "violations": int(epoch_violations),
            "skipped": int(epoch_skipped),
            "best": bool(epoch == best_epoch and np.isfinite(best_val)),
        })

    if not np.isfinite(best_val):
        best_phi, best_predictor = phi, predictor
        best_epoch = start_epoch + max(cfg.epochs - 1, 0)
        best_val = float("nan")
    return TrainResult(
        phi=phi, predictor=predictor, best_phi=best_phi,
        best_predictor=best_predictor, best_epoch=best_epoch,
        best_val=float(best_val), moments=moments, history=history,
        skipped=skipped_total,
    )
