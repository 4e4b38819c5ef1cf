"""Power of the one-sided ``d`` test against logistic selection bias.

Assignments are drawn from the biased law (treated clusters favored in
proportion to ``exp(beta * x)`` within blocks) and the test rejects when
``d > z_star * sd(d)``, with ``sd(d)`` the null randomization s.d. Local
theory predicts power ``1 - Phi(z_star - delta)`` with noncentrality

    delta = beta * sum_b w_b s^2(x_b) / m_bar_b / sqrt(Var(d)).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import ndtri

from ..balance import Contrast, normal_sf, resolve_weights, variance_d
from ..data import BalanceError
from ..randomization import BiasModel, map_replicates, sample_biased_batch
from ..serialize import write_csv
from . import synthetic

Z_STAR = float(ndtri(0.95))

SCHEMA = {
    "type": "object",
    "required": ["kind", "blocks", "beta", "reps", "seed"],
    "additionalProperties": False,
    "properties": {
        "kind": {"const": "power"},
        "blocks": {
            "type": "array", "minItems": 1,
            "items": {
                "type": "object",
                "required": ["n", "n_treated", "m", "count"],
                "additionalProperties": False,
                "properties": {
                    "n": {"type": "integer", "minimum": 2},
                    "n_treated": {"type": "integer", "minimum": 1},
                    "m": {"type": "integer", "minimum": 1},
                    "count": {"type": "integer", "minimum": 1},
                },
            },
        },
        "data_seed": {"type": "integer", "minimum": 0},
        "beta": {"type": "array", "minItems": 1, "items": {"type": "number"}},
        "weights": {"type": "array", "minItems": 1, "uniqueItems": True,
                    "items": {"enum": ["harmonic", "equal", "block-size", "treated-size"]}},
        "z_star": {"type": "number"},
        "reps": {"type": "integer", "minimum": 100},
        "seed": {"type": "integer", "minimum": 0},
        "burn_in": {"type": ["integer", "null"], "minimum": 0},
    },
}


def s2_blocks(design, x) -> np.ndarray:
    """Within-block variances ``s^2(x_b)`` with ``n_b - 1`` denominators."""
    x = np.asarray(x, dtype=np.float64)
    means = np.add.reduceat(x, design.starts) / design.sizes
    ss = np.add.reduceat((x - means[design.block_index]) ** 2, design.starts)
    return ss / (design.sizes - 1)


def noncentrality(design, x, beta: float, weights=None) -> float:
    """Finite-sample noncentrality of the standardized ``d`` under bias ``beta``.

    Zero when ``x`` is constant within every block.
    """
    w = resolve_weights(design, weights)
    var = variance_d(design, x, w)
    if not var > 0:
        return 0.0
    return float(beta * (w * s2_blocks(design, x) / design.m_bar).sum() / math.sqrt(var))


def theoretical_power(delta, z_star: float = Z_STAR):
    return normal_sf(z_star - np.asarray(delta, dtype=np.float64))


@dataclass(frozen=True)
class PowerStudySpec:
    """Configuration of a power study.

    ``blocks`` lists block templates for :func:`synthetic.block_mixture`,
    whose ``data_seed`` fixes the standardized covariate. The same
    assignments are scored under every weight scheme.
    """

    blocks: tuple
    beta: tuple[float, ...] = (0.0, 0.1, 0.2)
    weights: tuple[str, ...] = ("harmonic", "equal", "block-size")
    z_star: float = Z_STAR
    reps: int = 10_000
    seed: int = 1
    data_seed: int = 0
    burn_in: int | None = None

    def __post_init__(self):
        if self.reps < 100:
            raise BalanceError("power studies need at least 100 replicates")

    @classmethod
    def from_dict(cls, doc: dict) -> "PowerStudySpec":
        doc = {k: v for k, v in doc.items() if k != "kind"}
        for key in ("blocks", "beta", "weights"):
            if key in doc:
                doc[key] = tuple(doc[key])
        return cls(**doc)

    def population(self) -> synthetic.SyntheticStudy:
        return synthetic.block_mixture(list(self.blocks), seed=self.data_seed)


@dataclass
class PowerStudyResult:
    spec: PowerStudySpec
    rows: list = field(default_factory=list)

    def get(self, beta: float, weights: str) -> dict:
        for r in self.rows:
            if r["beta"] == beta and r["weights"] == weights:
                return r
        raise KeyError((beta, weights))

    def write(self, outdir) -> list[Path]:
        outdir = Path(outdir)
        outdir.mkdir(parents=True, exist_ok=True)
        cols = ["beta", "weights", "delta_hat", "theory", "power", "stderr", "rejections", "reps"]
        path = outdir / "power_curve.csv"
        write_csv(path, cols, [[r[c] for c in cols] for r in self.rows])
        return [path]


def run_power_study(spec: PowerStudySpec, workers: int | None = None, study=None) -> PowerStudyResult:
    """Empirical and theoretical power for every (beta, weight scheme) pair.

    Every beta uses the same seed, so the curves share random numbers and
    differences between weight schemes are not blurred by sampling noise.
    """
    study = spec.population() if study is None else study
    design = study.design
    x = study.values[:, 0]
    schemes = []
    for name in spec.weights:
        var = variance_d(design, x, name)
        if not var > 0:
            raise BalanceError("covariate is constant within blocks")
        schemes.append((name, Contrast.for_design(design, name), spec.z_star * math.sqrt(var)))
    chunk = max(64, min(4096, 4_000_000 // max(design.n_clusters, 1)))
    result = PowerStudyResult(spec)
    for beta in spec.beta:
        bias = BiasModel(float(beta))

        def run(start, count):
            Z = sample_biased_batch(design, x, bias, spec.seed, start, count, spec.burn_in)
            return [int((c.apply(Z, x[:, None])[:, 0] > crit).sum()) for _, c, crit in schemes]

        parts = map_replicates(run, 0, spec.reps, chunk=chunk, workers=workers)
        hits = np.sum(parts, axis=0)
        for (name, _, _), h in zip(schemes, hits):
            delta = noncentrality(design, x, float(beta), name)
            p = h / spec.reps
            result.rows.append({
                "beta": float(beta), "weights": name, "delta_hat": delta,
                "theory": float(theoretical_power(delta, spec.z_star)), "power": float(p),
                "stderr": math.sqrt(p * (1 - p) / spec.reps), "rejections": int(h), "reps": spec.reps,
            })
    return result
