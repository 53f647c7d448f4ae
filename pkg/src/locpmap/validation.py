"""Packaged oracle checks behind ``locpmap verify``.

Each check builds small random models from the seed, compares an exact
enumeration with Monte Carlo (or finite differences) and returns plain dicts.
"""
from __future__ import annotations

import math

import numpy as np

from . import oracle
from .learning import Dataset, pl_gradient, pl_objective
from .model import BlockPartition, GridModel, Weights
from .perturb import GumbelSource

CHECKS = ("gumbelmax", "theorem1", "zb", "gradcheck")
MC_TOLERANCE = 0.01
GRAD_RTOL = 1e-5
FD_STEP = 1e-5


def tiny_model(height: int, width: int, num_labels: int = 2, seed: int = 0, d_unary: int = 2,
               d_pairwise: int = 2, scale: float = 1.0, symmetric: bool = False):
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed))))
    m = height * (width - 1) + width * (height - 1)
    model = GridModel(height, width, num_labels, rng.normal(size=(height * width, d_unary)),
                      rng.normal(size=(m, d_pairwise)))
    return model, Weights.random(rng, num_labels, d_unary, d_pairwise, scale, symmetric)


def _precision_warning(name, draws, p_max=0.5, tolerance=MC_TOLERANCE):
    se = math.sqrt(p_max * (1 - p_max) / max(draws, 1))
    if 3 * se > tolerance:
        return (f"{name}: {draws} draws give a standard error up to {se:.3g}; "
                f"too few to resolve the {tolerance} tolerance")
    return None


def check_theorem1(draws: int, seed: int):
    out = []
    cases = [
        ("theorem1/2x2-singletons", (2, 2), BlockPartition.singletons(4)),
        ("theorem1/2x3-pairs", (2, 3), BlockPartition(((0, 1), (2,), (3, 4), (5,)), 6)),
    ]
    for k, (name, (h, w), part) in enumerate(cases):
        model, weights = tiny_model(h, w, 2, seed + 101 * (k + 1))
        rep = oracle.theorem1_check(model, weights, part, None, draws, GumbelSource(seed, 10 + k))
        d = rep.to_dict()
        d["name"] = name
        out.append(d)
    return out


def check_gumbelmax(draws: int, seed: int):
    model, weights = tiny_model(1, 3, 3, seed + 7)
    d = oracle.gumbelmax_check(model, weights, draws, GumbelSource(seed, 20)).to_dict()
    d["name"] = "gumbelmax/1x3-K3"
    return [d]


def check_zb(draws: int, seed: int):
    out = []
    for k, (h, w) in enumerate([(1, 2), (2, 2), (2, 3)]):
        model, weights = tiny_model(h, w, 2, seed + 31 * (k + 1))
        z = oracle.zb_exact(model, weights, BlockPartition.whole(model.num_nodes))
        dev = abs(z - 1.0)
        out.append({"name": f"zb/global-{h}x{w}", "exact": [1.0], "empirical": [z], "stderr": [0.0],
                    "max_abs_dev": dev, "tolerance": 1e-10, "passed": dev <= 1e-10, "draws": 0})
    model, weights = tiny_model(2, 2, 2, seed + 5)
    part = BlockPartition.singletons(4)
    rep = oracle.zb_check(model, weights, part, draws, GumbelSource(seed, 30))
    d = rep.to_dict()
    d["name"] = "zb/2x2-singletons-mc"
    d["passed"] = bool(d["passed"] and rep.exact[0] >= 1.0)
    out.append(d)
    return out


def finite_difference_check(dataset: Dataset, weights: Weights, partition, h: float = FD_STEP):
    """(max relative error, analytic gradient, numeric gradient) over all weight coordinates."""
    g = pl_gradient(dataset, weights, partition).flat()
    x = weights.flat()
    fd = np.empty_like(x)
    for k in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp[k] += h
        xm[k] -= h
        fd[k] = (pl_objective(dataset, weights.with_flat(xp), partition)
                 - pl_objective(dataset, weights.with_flat(xm), partition)) / (2 * h)
    denom = np.maximum(np.maximum(np.abs(fd), np.abs(g)), 1e-8)
    return float(np.max(np.abs(fd - g) / denom)), g, fd


def check_gradcheck(draws: int, seed: int):
    model, weights = tiny_model(2, 2, 2, seed + 3)
    ys = oracle.exact_sample(model, weights, GumbelSource(seed, 40), 8)
    ds = Dataset([(model, y) for y in ys])
    out = []
    for name, part in [("gradcheck/singletons", None),
                       ("gradcheck/pairs", BlockPartition(((0, 1), (2, 3)), 4))]:
        err, g, fd = finite_difference_check(ds, weights, part)
        out.append({"name": name, "exact": fd.tolist(), "empirical": g.tolist(), "stderr": [],
                    "max_abs_dev": err, "tolerance": GRAD_RTOL, "passed": err < GRAD_RTOL, "draws": 0})
    return out


def run_checks(which: str, draws: int, seed: int) -> dict:
    names = CHECKS if which == "all" else (which,)
    checks, warnings = [], []
    for name in names:
        if name in ("gumbelmax", "theorem1", "zb"):
            w = _precision_warning(name, draws)
            if w:
                warnings.append(w)
        fn = {"gumbelmax": check_gumbelmax, "theorem1": check_theorem1, "zb": check_zb,
              "gradcheck": check_gradcheck}[name]
        checks.extend(fn(draws, seed))
    for c in checks:
        c["passed"] = bool(c["passed"])
    return {"seed": seed, "draws": draws, "warnings": warnings, "checks": checks,
            "passed": all(c["passed"] for c in checks)}
