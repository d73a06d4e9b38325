"""Shared builders for the test suite."""

import numpy as np

from curvmm import datagen, losses, phinet, predictor


def make_instance(n=4, s=8, t=2, seed=0, snr_db=20.0, **kw):
    """One generated problem instance at a small shape.

    The generator wants t >= 2; a single-column instance is produced by
    slicing the first time sample off a two-column one.
    """
    if t == 1:
        base = make_instance(n=n, s=s, t=2, seed=seed, snr_db=snr_db, **kw)
        return datagen.InverseProblemInstance(
            X_true=np.ascontiguousarray(base.X_true[:, :1]),
            Y=np.ascontiguousarray(base.Y[:, :1]),
            L=base.L, snr_db=base.snr_db, seed=base.seed)
    cfg = datagen.GeneratorConfig(n=n, s=s, t=t, seed=seed, count=1,
                                  snr_db=snr_db, **kw)
    return datagen.generate_dataset(cfg)[0]


def make_networks(s, hidden=(8, 8), eps=0.1, pred_hidden=6, p_scale=1.0,
                  seed=0):
    phi = phinet.make_phi(s, hidden, eps=eps, seed=seed)
    pred = predictor.make_predictor(s, pred_hidden, p_scale=p_scale,
                                    seed=seed + 1)
    return phi, pred


def default_spec(lam=1.0, **kw):
    return losses.ObjectiveSpec(lam=lam, **kw)


def admissible_point(inst, rng, scale=1.0):
    """Random estimate that satisfies the domain guards for ``inst``."""
    s = inst.L.shape[1]
    t = inst.Y.shape[1]
    while True:
        x = scale * rng.standard_normal((s, t))
        if (np.linalg.norm(x) > 1e-6
                and np.linalg.norm(inst.L @ x) > 1e-6):
            return x
