"""Command-line surface: dataset generation, training, solving, evaluation,
and curvature auditing.

Configuration comes from flags plus an optional JSON config file; flags win
on conflict and unknown config keys are rejected. Every command is
deterministic given its seed. Exit codes: 0 success, 2 usage or
configuration error, 3 IO or format error, 4 numeric or domain failure.

Report-producing commands render matplotlib figures next to their JSON and
CSV outputs; pass --no-plots to skip rendering.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import bilevel, curvature, datagen, linalg, losses, metrics, phinet, plotting
from . import predictor as pred_mod
from . import solver as solver_mod
from .exceptions import (
    ConfigError,
    CurvMMError,
    DomainError,
    EvaluationError,
    FormatError,
    InvalidInputError,
    NumericError,
    ShapeError,
)

__all__ = ["main", "build_parser"]

_WIDTH = 96

EVAL_MODES = solver_mod.MAJORANT_MODES + ("truth",)

_PHI_SEED_TAG = 1
_PRED_SEED_TAG = 2


def _formatter(prog):
    # Fixed width keeps --help output stable regardless of the terminal.
    return argparse.HelpFormatter(prog, max_help_position=28, width=_WIDTH)


# ---------------------------------------------------------------------------
# defaults and config merging

_DATAGEN_DEFAULTS = {
    "out": None,
    "name": "dataset",
    "preset": None,
    "n": 16,
    "s": 64,
    "t": None,
    "count": 500,
    "waveform": "gaussian",
    "snr_db": 10.0,
    "patch_extent": 2,
    "patch_tau": 1.0,
    "condition_target": 100.0,
    "geometry": "ring",
    "seed": 0,
    "split": 0.2,
    "center_range": (0.25, 0.75),
    "width_range": (0.05, 0.2),
    "amplitude_range": (0.5, 1.0),
    "freq_range": (1.0, 3.0),
    "damping_range": (0.05, 0.3),
    "coupling_range": (0.5, 2.0),
}

_PAPER_PRESET = {"n": 90, "s": 994, "count": 10000}

_TRAIN_DEFAULTS = {
    "dataset": None,
    "out": None,
    "best_out": None,
    "log": None,
    "plot": None,
    "resume": None,
    "epochs": 500,
    "learning_rate": 5e-5,
    "batch_size": 16,
    "lam": 1.0,
    "inner_iters": 10,
    "gamma": 1.0,
    "init_scale": 1e-3,
    "nu_lo": 1e-10,
    "hidden": 32,
    "phi_hidden": None,
    "phi_eps": 0.1,
    "p_scale": 1.0,
    "init_weight_scale": None,
    "val_fraction": 0.2,
    "checkpoint_every": 0,
    "seed": 0,
    "no_plots": False,
}

_SOLVE_DEFAULTS = {
    "dataset": None,
    "out": None,
    "estimate_out": None,
    "checkpoint": None,
    "index": 0,
    "mode": "learned",
    "inner_iters": 10,
    "gamma": 1.0,
    "init_scale": 1e-3,
    "nu_lo": 1e-10,
    "gd_step": None,
    "curvature_refresh": "per-iteration",
    "spectral_iters": 20,
    "lam": 1.0,
    "hidden": 32,
    "phi_hidden": None,
    "phi_eps": 0.1,
    "p_scale": 1.0,
    "seed": 0,
    "no_plots": False,
}

_EVAL_DEFAULTS = {
    "dataset": None,
    "out": None,
    "csv": None,
    "checkpoint": None,
    "mode": "learned",
    "limit": None,
    "geometry": None,
    "calibrate": False,
    "inner_iters": 10,
    "gamma": 1.0,
    "init_scale": 1e-3,
    "nu_lo": 1e-10,
    "gd_step": None,
    "curvature_refresh": "per-iteration",
    "spectral_iters": 20,
    "lam": 1.0,
    "hidden": 32,
    "phi_hidden": None,
    "phi_eps": 0.1,
    "p_scale": 1.0,
    "seed": 0,
    "no_plots": False,
}

_AUDIT_DEFAULTS = {
    "dataset": None,
    "out": None,
    "checkpoint": None,
    "instances": 6,
    "points": 4,
    "probe_scale": 1e-3,
    "majorization_draws": 3,
    "spectral_iters": 20,
    "lam": 1.0,
    "n": 16,
    "s": 64,
    "t": 8,
    "snr_db": 10.0,
    "phi_hidden": None,
    "phi_eps": 0.1,
    "seed": 0,
    "no_plots": False,
}

_TUPLE_KEYS = (
    "center_range", "width_range", "amplitude_range",
    "freq_range", "damping_range", "coupling_range", "phi_hidden",
)


def _load_config_file(path):
    with open(path, "r", encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return data


def _merge(defaults, args):
    """Defaults, then config-file values, then explicit flags.

    Returns ``(merged, explicit)`` where ``explicit`` is the set of keys the
    user pinned in either source.
    """
    merged = dict(defaults)
    explicit = set()
    config_path = getattr(args, "config", None)
    if config_path:
        data = _load_config_file(config_path)
        unknown = sorted(set(data) - set(defaults))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        merged.update(data)
        explicit.update(data)
    for key in defaults:
        value = getattr(args, key, None)
        if value is not None:
            merged[key] = value
            explicit.add(key)
    for key in _TUPLE_KEYS:
        if key in merged and isinstance(merged[key], list):
            merged[key] = tuple(merged[key])
    return merged, explicit


def _require(merged, key, flag):
    if not merged.get(key):
        raise ConfigError(f"{flag} is required")
    return merged[key]


def _sibling(path, suffix):
    root, _ = os.path.splitext(path)
    return root + suffix


def _ensure_parent(path):
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)


def _write_json(payload, path):
    _ensure_parent(path)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _fresh_networks(s, merged):
    phi_hidden = merged.get("phi_hidden")
    if phi_hidden is not None:
        phi_hidden = tuple(int(v) for v in phi_hidden)
    phi = phinet.make_phi(s, hidden=phi_hidden, eps=merged["phi_eps"],
                          seed=[merged["seed"], _PHI_SEED_TAG])
    predictor = pred_mod.make_predictor(
        s, hidden=merged.get("hidden", 32),
        seed=[merged["seed"], _PRED_SEED_TAG],
        p_scale=merged.get("p_scale", 1.0),
    )
    return phi, predictor


def _networks_for(merged, s):
    """Checkpoint networks when given, fresh seeded ones otherwise."""
    if merged.get("checkpoint"):
        ck = bilevel.load_checkpoint(merged["checkpoint"])
        if ck.phi.w1.shape[1] != s:
            raise ShapeError(
                f"checkpoint was trained for {ck.phi.w1.shape[1]} sources "
                f"but the dataset has {s}"
            )
        return ck.phi, ck.predictor
    return _fresh_networks(s, merged)


def _solver_config(merged, mode):
    return solver_mod.SolverConfig(
        inner_iters=merged["inner_iters"],
        gamma=merged["gamma"],
        init_scale=merged["init_scale"],
        majorant_mode=mode,
        seed=merged["seed"],
        nu_lo=merged["nu_lo"],
        gd_step=merged.get("gd_step"),
        curvature_refresh=merged["curvature_refresh"],
        spectral_iters=merged["spectral_iters"],
    )


# ---------------------------------------------------------------------------
# datagen


def cmd_datagen(args):
    merged, explicit = _merge(_DATAGEN_DEFAULTS, args)
    out = _require(merged, "out", "--out")
    if merged["preset"] == "paper":
        preset = dict(_PAPER_PRESET)
        preset["t"] = 64 if merged["waveform"] == "gaussian" else 500
        for key, value in preset.items():
            if key not in explicit:
                merged[key] = value
    if merged["t"] is None:
        merged["t"] = 8 if merged["waveform"] == "gaussian" else 32
    split = float(merged["split"])
    if not 0.0 <= split < 1.0:
        raise ConfigError(f"--split must lie in [0, 1), got {split}")
    cfg = datagen.GeneratorConfig(
        n=merged["n"], s=merged["s"], t=merged["t"],
        patch_extent=merged["patch_extent"], waveform=merged["waveform"],
        center_range=merged["center_range"], width_range=merged["width_range"],
        amplitude_range=merged["amplitude_range"],
        freq_range=merged["freq_range"], damping_range=merged["damping_range"],
        coupling_range=merged["coupling_range"], snr_db=merged["snr_db"],
        count=merged["count"], condition_target=merged["condition_target"],
        seed=merged["seed"], geometry=merged["geometry"],
        patch_tau=merged["patch_tau"],
    )
    samples = datagen.generate_dataset(cfg)
    n_val = int(round(cfg.count * split))
    if cfg.count > 1 and split > 0.0:
        n_val = min(max(n_val, 1), cfg.count - 1)
    else:
        n_val = 0
    train = samples[:cfg.count - n_val]
    val = samples[cfg.count - n_val:]
    train_dir = os.path.join(out, "train")
    datagen.write_dataset(
        train_dir, train,
        datagen.config_to_manifest(cfg, name=f"{merged['name']}-train"),
    )
    print(f"train\t{train_dir}\t{len(train)}")
    if val:
        val_dir = os.path.join(out, "val")
        datagen.write_dataset(
            val_dir, val,
            datagen.config_to_manifest(cfg, name=f"{merged['name']}-val"),
        )
        print(f"val\t{val_dir}\t{len(val)}")
    return 0


# ---------------------------------------------------------------------------
# train


def cmd_train(args):
    merged, _ = _merge(_TRAIN_DEFAULTS, args)
    dataset = _require(merged, "dataset", "--dataset")
    out = _require(merged, "out", "--out")
    samples, _meta = datagen.read_dataset(dataset)

    phi_hidden = merged.get("phi_hidden")
    if phi_hidden is not None:
        phi_hidden = tuple(int(v) for v in phi_hidden)
    solver_cfg = solver_mod.SolverConfig(
        inner_iters=merged["inner_iters"], gamma=merged["gamma"],
        init_scale=merged["init_scale"], majorant_mode="learned",
        seed=merged["seed"], nu_lo=merged["nu_lo"],
    )
    cfg = bilevel.TrainConfig(
        epochs=merged["epochs"], learning_rate=merged["learning_rate"],
        batch_size=merged["batch_size"], lam=merged["lam"], solver=solver_cfg,
        seed=merged["seed"], checkpoint_every=merged["checkpoint_every"],
        val_fraction=merged["val_fraction"], hidden_dim=merged["hidden"],
        phi_hidden=phi_hidden, phi_eps=merged["phi_eps"],
        p_scale=merged["p_scale"],
        init_weight_scale=merged["init_weight_scale"],
    )

    phi = predictor = moments = None
    start_epoch = 0
    prior_history = []
    best_val = best_epoch = None
    if merged["resume"]:
        ck = bilevel.load_checkpoint(merged["resume"])
        phi, predictor, moments = ck.phi, ck.predictor, ck.moments
        start_epoch = ck.epoch + 1
        prior_history = list(ck.history)
        best_val = ck.extra.get("best_val")
        best_epoch = ck.extra.get("best_epoch")

    log_path = merged["log"] or out + ".log"
    _ensure_parent(out)
    _ensure_parent(log_path)
    new_entries = []
    every = int(merged["checkpoint_every"])
    with open(log_path, "a" if merged["resume"] else "w", encoding="utf-8") as log_fh:

        def log_cb(entry, cur_phi, cur_pred, cur_moments):
            new_entries.append(entry)
            log_fh.write(json.dumps(entry, sort_keys=True) + "\n")
            log_fh.flush()
            if every > 0 and (entry["epoch"] + 1) % every == 0:
                periodic = bilevel.Checkpoint(
                    phi=cur_phi, predictor=cur_pred, moments=cur_moments,
                    epoch=entry["epoch"],
                    history=prior_history + new_entries,
                )
                bilevel.save_checkpoint(periodic, f"{out}.epoch{entry['epoch']}")

        result = bilevel.train(
            samples, cfg, phi=phi, predictor=predictor, moments=moments,
            start_epoch=start_epoch, log_cb=log_cb,
            best_val=best_val, best_epoch=best_epoch,
        )

    full_history = prior_history + result.history
    final_ck = result.checkpoint(best=False)
    final_ck.history = full_history
    bilevel.save_checkpoint(final_ck, out)
    best_path = merged["best_out"] or out + ".best"
    best_ck = result.checkpoint(best=True)
    best_ck.history = full_history
    bilevel.save_checkpoint(best_ck, best_path)

    plot_path = None
    if not merged["no_plots"] and full_history:
        plot_path = merged["plot"] or _sibling(out, "_curves.png")
        plotting.save_training_curves(full_history, plot_path)

    print(json.dumps({
        "checkpoint": out,
        "best_checkpoint": best_path,
        "log": log_path,
        "plot": plot_path,
        "epochs_run": len(result.history),
        "best_epoch": result.best_epoch,
        "best_val": result.best_val,
        "skipped": result.skipped,
    }, sort_keys=True))
    return 0


# ---------------------------------------------------------------------------
# solve


def cmd_solve(args):
    merged, _ = _merge(_SOLVE_DEFAULTS, args)
    dataset = _require(merged, "dataset", "--dataset")
    out = _require(merged, "out", "--out")
    samples, _meta = datagen.read_dataset(dataset)
    index = int(merged["index"])
    if not 0 <= index < len(samples):
        raise ConfigError(
            f"--index {index} out of range for {len(samples)} samples"
        )
    inst = samples[index]
    s = inst.L.shape[1]
    phi, predictor = _networks_for(merged, s)
    spec = losses.ObjectiveSpec(lam=merged["lam"])
    cfg = _solver_config(merged, merged["mode"])
    trace = solver_mod.solve_lower(inst, phi, predictor, cfg, spec,
                                   seed=[merged["seed"], index])
    payload = {
        "dataset": dataset,
        "sample_index": index,
        "lambda": float(merged["lam"]),
        "snr_db": inst.snr_db,
    }
    payload.update(trace.to_dict())
    _write_json(payload, out)
    if merged["estimate_out"]:
        _ensure_parent(merged["estimate_out"])
        with open(merged["estimate_out"], "wb") as fh:
            fh.write(np.ascontiguousarray(trace.x_final, dtype="<f8").tobytes())
    plot_path = None
    if not merged["no_plots"]:
        plot_path = _sibling(out, ".png")
        plotting.save_trace_plot(payload, plot_path)
    print(json.dumps({
        "trace": out,
        "plot": plot_path,
        "estimate": merged["estimate_out"],
        "mode": cfg.majorant_mode,
        "iterations": cfg.inner_iters,
        "objective_final": trace.objectives[-1],
        "descent_violations": trace.descent_violations,
    }, sort_keys=True))
    return 0


# ---------------------------------------------------------------------------
# eval


def cmd_eval(args):
    merged, _ = _merge(_EVAL_DEFAULTS, args)
    dataset = _require(merged, "dataset", "--dataset")
    out = _require(merged, "out", "--out")
    samples, meta = datagen.read_dataset(dataset)
    limit = merged["limit"]
    if limit is not None:
        limit = int(limit)
        if limit < 1:
            raise ConfigError(f"--limit must be >= 1, got {limit}")
        samples = samples[:limit]
    geometry = merged["geometry"]
    if geometry is None:
        geometry = (meta.get("config") or {}).get("geometry", "ring")

    mode = merged["mode"]
    if mode == "truth":
        estimates = [inst.X_true for inst in samples]
    else:
        s = samples[0].L.shape[1]
        phi, predictor = _networks_for(merged, s)
        spec = losses.ObjectiveSpec(lam=merged["lam"])
        cfg = _solver_config(merged, mode)
        ln = linalg.spectral_norm(samples[0].L)
        jac = curvature.network_jacobian_bound(phi)
        hess = curvature.network_hessian_bound(phi)
        estimates = []
        for k, inst in enumerate(samples):
            trace = solver_mod.solve_lower(
                inst, phi, predictor, cfg, spec, seed=[merged["seed"], k],
                leadfield_norm=ln, jac_bound=jac, hess_bound=hess,
            )
            x_est = trace.x_final
            if merged["calibrate"]:
                x_est = solver_mod.calibrate_amplitude(inst, x_est)
            estimates.append(x_est)

    report = metrics.evaluate(samples, estimates, geometry=geometry)
    _ensure_parent(out)
    metrics.write_report_json(report, out)
    csv_path = merged["csv"] or _sibling(out, ".csv")
    metrics.write_report_csv(report, csv_path)
    plot_path = None
    if not merged["no_plots"]:
        plot_path = _sibling(out, ".png")
        plotting.save_metrics_plot(report, plot_path)
    print(json.dumps({
        "report": out,
        "csv": csv_path,
        "plot": plot_path,
        "mode": mode,
        "count": len(samples),
        "le": report.le,
        "auc": report.auc,
        "nmse": report.nmse,
        "psnr_db": report.psnr_db,
        "te": report.te,
    }, sort_keys=True))
    return 0


# ---------------------------------------------------------------------------
# curvature audit


def cmd_curvature_audit(args):
    merged, _ = _merge(_AUDIT_DEFAULTS, args)
    out = _require(merged, "out", "--out")
    seed = int(merged["seed"])
    if merged["dataset"]:
        samples, _meta = datagen.read_dataset(merged["dataset"])
        samples = samples[:int(merged["instances"])]
    else:
        cfg = datagen.GeneratorConfig(
            n=merged["n"], s=merged["s"], t=merged["t"],
            snr_db=merged["snr_db"], count=int(merged["instances"]),
            seed=seed,
        )
        samples = datagen.generate_dataset(cfg)
    s = samples[0].L.shape[1]
    if merged.get("checkpoint"):
        phi = bilevel.load_checkpoint(merged["checkpoint"]).phi
        if phi.w1.shape[1] != s:
            raise ShapeError(
                f"checkpoint was trained for {phi.w1.shape[1]} sources "
                f"but the audit problems have {s}"
            )
    else:
        phi_hidden = merged.get("phi_hidden")
        if phi_hidden is not None:
            phi_hidden = tuple(int(v) for v in phi_hidden)
        phi = phinet.make_phi(s, hidden=phi_hidden, eps=merged["phi_eps"],
                              seed=[seed, _PHI_SEED_TAG])
    spec = losses.ObjectiveSpec(lam=merged["lam"])
    jac = curvature.network_jacobian_bound(phi)
    hess = curvature.network_hessian_bound(phi)
    points = int(merged["points"])
    draws = int(merged["majorization_draws"])
    probe_scale = float(merged["probe_scale"])
    spectral_iters = int(merged["spectral_iters"])

    checked = 0
    skipped = 0
    le_hits = 0
    maj_pass = 0
    ratios = []
    for i, inst in enumerate(samples):
        t = inst.Y.shape[1]
        ln = linalg.spectral_norm(inst.L)
        apply_hvp, _shape = curvature.objective_hessian_operator(inst, phi, spec)
        for j in range(points):
            rng = np.random.default_rng([seed, i, j])
            x = probe_scale * rng.standard_normal((s, t))
            try:
                u0 = losses.lower_objective(x, inst, phi, spec)
                g = losses.lower_gradient(x, inst, phi, spec)
                interval_a = curvature.valid_interval(
                    x, inst, phi, spec, method="analytic",
                    leadfield_norm=ln, jac_bound=jac, hess_bound=hess,
                )
                pi_seed = [seed, i, j, 3]
                interval_s = curvature.valid_interval(
                    x, inst, phi, spec, method="spectral",
                    hvp_apply=lambda v: apply_hvp(x, v),
                    iters=spectral_iters, seed=pi_seed,
                )
                est = curvature.estimate_lambda_max(
                    lambda v: apply_hvp(x, v), (s, t),
                    iters=spectral_iters, seed=pi_seed,
                )
                bounds = curvature.curvature_bounds(
                    x, inst, phi, spec, leadfield_norm=ln,
                    jac_bound=jac, hess_bound=hess,
                )
            except (DomainError, NumericError):
                skipped += 1
                continue
            checked += 1
            if interval_a.nu_hi <= interval_s.nu_hi * (1.0 + 1e-12):
                le_hits += 1
            ratios.append(
                float(est.lambda_hat / (bounds.mu1 + spec.lam * bounds.mu2))
            )
            # Majorization sampling: the quadratic surrogate with the
            # analytic reciprocal curvature must dominate the objective at
            # the step target and at random nearby points.
            nu = interval_a.nu_hi
            step = nu * g
            targets = [x - step]
            for d in range(draws):
                direction = np.random.default_rng([seed, i, j, 7, d]) \
                    .standard_normal((s, t))
                direction *= np.linalg.norm(step) / max(
                    np.linalg.norm(direction), 1e-300)
                targets.append(x + direction)
            ok = True
            for z in targets:
                try:
                    uz = losses.lower_objective(z, inst, phi, spec)
                except DomainError:
                    continue
                dz = z - x
                quad = u0 + float(np.sum(g * dz)) \
                    + 0.5 / nu * float(np.sum(dz * dz))
                if uz > quad + 1e-10:
                    ok = False
                    break
            if ok:
                maj_pass += 1

    if checked == 0:
        raise NumericError("curvature audit checked no points")
    counts, edges = np.histogram(
        ratios, bins=min(20, max(5, checked // 2)),
        range=(0.0, max(1.0, max(ratios))),
    )
    report = {
        "instances": len(samples),
        "points_per_instance": points,
        "points_checked": checked,
        "points_skipped": skipped,
        "analytic_le_spectral_rate": le_hits / checked,
        "majorization_pass_rate": maj_pass / checked,
        "majorization_draws": draws,
        "tightness_ratios": ratios,
        "histogram": {
            "bin_edges": [float(v) for v in edges],
            "counts": [int(v) for v in counts],
        },
        "lambda": float(merged["lam"]),
        "spectral_iters": spectral_iters,
        "probe_scale": probe_scale,
        "seed": seed,
    }
    _write_json(report, out)
    plot_path = None
    if not merged["no_plots"]:
        plot_path = _sibling(out, ".png")
        plotting.save_audit_histogram(report, plot_path)
    print(json.dumps({
        "report": out,
        "plot": plot_path,
        "points_checked": checked,
        "analytic_le_spectral_rate": report["analytic_le_spectral_rate"],
        "majorization_pass_rate": report["majorization_pass_rate"],
    }, sort_keys=True))
    if report["majorization_pass_rate"] < 1.0:
        raise NumericError(
            "analytic majorization failed the sampling test "
            f"(pass rate {report['majorization_pass_rate']:.4f})"
        )
    return 0


# ---------------------------------------------------------------------------
# parser


def _add_common(p):
    p.add_argument("--config", metavar="PATH",
                   help="JSON config file; flags override its values")
    p.add_argument("--seed", type=int, metavar="N",
                   help="master seed (default: 0)")


def _add_solver_flags(p):
    p.add_argument("--inner-iters", type=int, metavar="I",
                   help="solver iterations (default: 10)")
    p.add_argument("--gamma", type=float, metavar="G",
                   help="relaxation in (0, 2) (default: 1.0)")
    p.add_argument("--init-scale", type=float, metavar="S",
                   help="initial iterate scale (default: 0.001)")
    p.add_argument("--nu-lo", type=float, metavar="V",
                   help="step interval lower end (default: 1e-10)")
    p.add_argument("--gd-step", type=float, metavar="V",
                   help="fixed step for the gradient-descent baseline "
                        "(default: first analytic ceiling)")
    p.add_argument("--curvature-refresh", choices=("per-iteration", "freeze"),
                   help="recompute the interval each iteration or freeze the "
                        "first (default: per-iteration)")
    p.add_argument("--spectral-iters", type=int, metavar="K",
                   help="power iterations for spectral mode (default: 20)")
    p.add_argument("--lambda", dest="lam", type=float, metavar="L",
                   help="regularization weight (default: 1.0)")


def _add_network_flags(p):
    p.add_argument("--hidden", type=int, metavar="H",
                   help="step predictor hidden width (default: 32)")
    p.add_argument("--phi-hidden", type=int, nargs=2, metavar=("H1", "H2"),
                   help="representation hidden widths (default: s s)")
    p.add_argument("--phi-eps", type=float, metavar="E",
                   help="representation activation smoothing (default: 0.1)")
    p.add_argument("--p-scale", type=float, metavar="S",
                   help="predictor output scale (default: 1.0)")


def _no_plots_flag(p):
    p.add_argument("--no-plots", dest="no_plots", action="store_const",
                   const=True, help="skip figure rendering")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="curvmm",
        description="Learned majorization-minimization solvers for ill-posed "
                    "linear inverse problems.",
        formatter_class=_formatter,
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser(
        "datagen", formatter_class=_formatter,
        help="generate a synthetic dataset with train/val subdirectories",
        description="Generate a synthetic dataset and write train/ and val/ "
                    "subdirectories under --out.",
    )
    p.add_argument("--out", metavar="DIR", help="output directory (required)")
    p.add_argument("--name", metavar="NAME",
                   help="dataset name stem (default: dataset)")
    p.add_argument("--preset", choices=("paper",),
                   help="problem-shape preset: paper = 90 sensors, 994 "
                        "sources, 10000 samples")
    p.add_argument("--n", type=int, metavar="N",
                   help="sensors (default: 16)")
    p.add_argument("--s", type=int, metavar="S",
                   help="sources (default: 64)")
    p.add_argument("--t", type=int, metavar="T",
                   help="time samples (default: 8 gaussian, 32 oscillatory)")
    p.add_argument("--count", type=int, metavar="K",
                   help="total samples before the split (default: 500)")
    p.add_argument("--waveform", choices=datagen.WAVEFORMS,
                   help="time course family (default: gaussian)")
    p.add_argument("--snr-db", type=float, metavar="DB",
                   help="noise level; inf disables noise (default: 10)")
    p.add_argument("--patch-extent", type=int, metavar="E",
                   help="extra active neighbors (default: 2)")
    p.add_argument("--patch-tau", type=float, metavar="TAU",
                   help="patch amplitude decay length (default: 1.0)")
    p.add_argument("--condition-target", type=float, metavar="C",
                   help="leadfield singular value ratio (default: 100)")
    p.add_argument("--geometry", choices=datagen.GEOMETRIES,
                   help="source neighborhood graph (default: ring)")
    p.add_argument("--split", type=float, metavar="F",
                   help="validation fraction (default: 0.2)")
    _add_common(p)
    p.set_defaults(func=cmd_datagen)

    p = sub.add_parser(
        "train", formatter_class=_formatter,
        help="fit the networks on a dataset and write checkpoints",
        description="Train on a dataset directory; writes the final "
                    "checkpoint to --out, the best-validation checkpoint "
                    "next to it, a JSON-lines log, and a training-curve "
                    "figure.",
    )
    p.add_argument("--dataset", metavar="DIR", help="dataset directory (required)")
    p.add_argument("--out", metavar="PATH", help="final checkpoint path (required)")
    p.add_argument("--best-out", metavar="PATH",
                   help="best-validation checkpoint path (default: OUT.best)")
    p.add_argument("--log", metavar="PATH",
                   help="JSON-lines epoch log (default: OUT.log)")
    p.add_argument("--plot", metavar="PATH",
                   help="training-curve figure path (default: next to OUT)")
    p.add_argument("--resume", metavar="PATH",
                   help="continue from a saved checkpoint")
    p.add_argument("--epochs", type=int, metavar="E",
                   help="training epochs; 0 emits the initial checkpoint "
                        "(default: 500)")
    p.add_argument("--learning-rate", type=float, metavar="LR",
                   help="step size for the moment update (default: 5e-05)")
    p.add_argument("--batch-size", type=int, metavar="B",
                   help="samples per parameter update (default: 16)")
    p.add_argument("--val-fraction", type=float, metavar="F",
                   help="held-out fraction for best tracking (default: 0.2)")
    p.add_argument("--checkpoint-every", type=int, metavar="N",
                   help="also save every N epochs (default: 0 = off)")
    p.add_argument("--init-weight-scale", type=float, metavar="S",
                   help="network weight init scale (default: per-layer)")
    _add_solver_flags(p)
    _add_network_flags(p)
    _no_plots_flag(p)
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser(
        "solve", formatter_class=_formatter,
        help="solve one sample and write its iteration trace",
        description="Run the solver on one dataset sample; writes a trace "
                    "JSON with the per-iteration objective decomposition and "
                    "a figure. Baseline modes run without a checkpoint.",
    )
    p.add_argument("--dataset", metavar="DIR", help="dataset directory (required)")
    p.add_argument("--out", metavar="PATH", help="trace JSON path (required)")
    p.add_argument("--estimate-out", metavar="PATH",
                   help="also write the estimate as raw float64 bytes")
    p.add_argument("--checkpoint", metavar="PATH",
                   help="trained networks; fresh seeded ones otherwise")
    p.add_argument("--index", type=int, metavar="K",
                   help="sample index (default: 0)")
    p.add_argument("--mode", choices=solver_mod.MAJORANT_MODES,
                   help="step size source (default: learned)")
    _add_solver_flags(p)
    _add_network_flags(p)
    _no_plots_flag(p)
    _add_common(p)
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser(
        "eval", formatter_class=_formatter,
        help="solve a dataset and score the reconstructions",
        description="Solve every sample (or --limit) and write the metric "
                    "report as JSON, CSV, and a figure. Mode 'truth' scores "
                    "the ground truth against itself as a sanity row.",
    )
    p.add_argument("--dataset", metavar="DIR", help="dataset directory (required)")
    p.add_argument("--out", metavar="PATH", help="report JSON path (required)")
    p.add_argument("--csv", metavar="PATH",
                   help="report CSV path (default: next to --out)")
    p.add_argument("--checkpoint", metavar="PATH",
                   help="trained networks; fresh seeded ones otherwise")
    p.add_argument("--mode", choices=EVAL_MODES,
                   help="step size source or 'truth' (default: learned)")
    p.add_argument("--limit", type=int, metavar="K",
                   help="evaluate only the first K samples")
    p.add_argument("--geometry", choices=datagen.GEOMETRIES,
                   help="metric graph (default: from the manifest)")
    p.add_argument("--calibrate", action="store_const", const=True, default=None,
                   help="rescale estimates to the least-squares amplitude "
                        "against the measurements before scoring")
    _add_solver_flags(p)
    _add_network_flags(p)
    _no_plots_flag(p)
    _add_common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser(
        "curvature-audit", formatter_class=_formatter,
        help="compare analytic and spectral curvature over sampled points",
        description="Audit the analytic curvature bound against the "
                    "power-iteration estimate over seeded problems and "
                    "probe points; writes a JSON report with tightness "
                    "histogram data and a figure. Exits 4 if any sampled "
                    "point breaks the analytic majorization.",
    )
    p.add_argument("--out", metavar="PATH", help="report JSON path (required)")
    p.add_argument("--dataset", metavar="DIR",
                   help="audit these samples instead of synthesizing")
    p.add_argument("--checkpoint", metavar="PATH",
                   help="use the trained representation network")
    p.add_argument("--instances", type=int, metavar="N",
                   help="problems to audit (default: 6)")
    p.add_argument("--points", type=int, metavar="M",
                   help="probe points per problem (default: 4)")
    p.add_argument("--probe-scale", type=float, metavar="S",
                   help="probe point scale (default: 0.001)")
    p.add_argument("--majorization-draws", type=int, metavar="D",
                   help="random surrogate checks per point (default: 3)")
    p.add_argument("--spectral-iters", type=int, metavar="K",
                   help="power iterations (default: 20)")
    p.add_argument("--lambda", dest="lam", type=float, metavar="L",
                   help="regularization weight (default: 1.0)")
    p.add_argument("--n", type=int, metavar="N",
                   help="sensors for synthesized problems (default: 16)")
    p.add_argument("--s", type=int, metavar="S",
                   help="sources for synthesized problems (default: 64)")
    p.add_argument("--t", type=int, metavar="T",
                   help="time samples for synthesized problems (default: 8)")
    p.add_argument("--snr-db", type=float, metavar="DB",
                   help="noise level for synthesized problems (default: 10)")
    p.add_argument("--phi-hidden", type=int, nargs=2, metavar=("H1", "H2"),
                   help="representation hidden widths (default: s s)")
    p.add_argument("--phi-eps", type=float, metavar="E",
                   help="representation activation smoothing (default: 0.1)")
    _no_plots_flag(p)
    _add_common(p)
    p.set_defaults(func=cmd_curvature_audit)

    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (FormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (DomainError, NumericError, InvalidInputError, ShapeError,
            EvaluationError, CurvMMError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
