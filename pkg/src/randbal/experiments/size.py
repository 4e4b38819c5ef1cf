"""Type I error of balance tests under the randomization null.

Each replicate draws a uniform assignment from the design, runs every
requested test and records its p-value. Sizes at each nominal level are
rejection rates with binomial standard errors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import chdtrc

from ..balance import Contrast, normal_p
from ..comparators import DevianceTest
from ..data import BalanceError
from ..omnibus import omnibus_form
from ..randomization import STREAM_CONTROL, SeedSpec, map_replicates, sample_uniform_batch
from ..serialize import write_csv
from . import synthetic

TESTS = ("d2", "logistic", "noclus", "uniform")
MIN_REPS = 10_000
QQ_POINTS = 1000

SCHEMA = {
    "type": "object",
    "required": ["kind", "generator", "tests", "reps", "seed"],
    "additionalProperties": False,
    "properties": {
        "kind": {"const": "size"},
        "generator": {
            "type": "object",
            "required": ["name"],
            "properties": {
                "name": {"enum": ["clinics", "households"]},
                "seed": {"type": "integer", "minimum": 0},
            },
        },
        "tests": {"type": "array", "minItems": 1, "uniqueItems": True, "items": {"enum": list(TESTS)}},
        "nominal": {"type": "array", "minItems": 1,
                    "items": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1}},
        "reps": {"type": "integer", "minimum": MIN_REPS},
        "seed": {"type": "integer", "minimum": 0},
        "weights": {"enum": ["harmonic", "equal", "block-size", "treated-size"]},
        "logistic_include_size": {"type": "boolean"},
        "noclus_covariate": {"type": "string"},
    },
}


@dataclass(frozen=True)
class SizeStudySpec:
    """Configuration of a size study.

    ``generator`` names a synthetic population from :mod:`synthetic` and
    passes its keyword arguments (``seed`` fixes the population). The
    ``noclus`` test uses ``noclus_covariate``, by default the first
    covariate.
    """

    generator: dict
    tests: tuple[str, ...] = ("d2", "logistic")
    nominal: tuple[float, ...] = (0.01, 0.05, 0.10)
    reps: int = 100_000
    seed: int = 1
    weights: str = "harmonic"
    logistic_include_size: bool = True
    noclus_covariate: str | None = None

    def __post_init__(self):
        if self.reps < MIN_REPS:
            raise BalanceError(f"size studies need at least {MIN_REPS} replicates")
        bad = [t for t in self.tests if t not in TESTS]
        if bad:
            raise BalanceError(f"unknown test(s): {', '.join(bad)}")
        if not all(0 < a < 1 for a in self.nominal):
            raise BalanceError("nominal levels must lie in (0, 1)")

    @classmethod
    def from_dict(cls, doc: dict) -> "SizeStudySpec":
        doc = {k: v for k, v in doc.items() if k != "kind"}
        for key in ("tests", "nominal"):
            if key in doc:
                doc[key] = tuple(doc[key])
        return cls(**doc)

    def population(self) -> synthetic.SyntheticStudy:
        kw = dict(self.generator)
        name = kw.pop("name")
        return getattr(synthetic, name)(**kw)


@dataclass
class SizeStudyResult:
    spec: SizeStudySpec
    pvalues: dict
    failures: dict
    info: dict = field(default_factory=dict)

    def table(self) -> list[dict]:
        rows = []
        for test, p in self.pvalues.items():
            for a in self.spec.nominal:
                size = float(np.mean(p <= a))
                rows.append({
                    "test": test, "nominal": a, "rejections": int((p <= a).sum()),
                    "reps": p.size, "size": size, "stderr": math.sqrt(size * (1 - size) / p.size),
                    "failures": self.failures.get(test, 0),
                })
        return rows

    def size(self, test: str, nominal: float) -> tuple[float, float]:
        p = self.pvalues[test]
        s = float(np.mean(p <= nominal))
        return s, math.sqrt(s * (1 - s) / p.size)

    def qq(self, points: int = QQ_POINTS) -> list[list]:
        """Sorted p-values at evenly spaced ranks against uniform quantiles."""
        out = []
        for test, p in self.pvalues.items():
            s = np.sort(p)
            idx = np.unique(np.linspace(0, s.size - 1, min(points, s.size)).round().astype(np.int64))
            for i in idx:
                out.append([test, (i + 0.5) / s.size, s[i]])
        return out

    def write(self, outdir) -> list[Path]:
        outdir = Path(outdir)
        outdir.mkdir(parents=True, exist_ok=True)
        cols = ["test", "nominal", "rejections", "reps", "size", "stderr", "failures"]
        t = outdir / "size_table.csv"
        write_csv(t, cols, [[r[c] for c in cols] for r in self.table()])
        q = outdir / "size_qq.csv"
        write_csv(q, ["test", "uniform_quantile", "p_value"], self.qq())
        return [t, q]


class _NoclusBatch:
    """Unit-level z-test evaluated for a batch of cluster assignments."""

    def __init__(self, design, X, covariate):
        units = X.units
        col = units.names.index(covariate)
        xu = units.values[:, col]
        pos = {c: i for i, c in enumerate(design.cluster_ids)}
        rows = np.array([pos[X.cluster_ids[r]] for r in units.cluster_row])
        self.x = np.bincount(rows, weights=xu, minlength=design.n_clusters)
        self.m = design.m
        self.s = xu.std(ddof=1)
        if not self.s > 0:
            raise BalanceError(f"covariate {covariate!r} is constant over units")

    def __call__(self, Z):
        Zf = Z.astype(np.float64)
        mt = Zf @ self.m
        mc = self.m.sum() - mt
        xt = Zf @ self.x
        xc = self.x.sum() - xt
        z = (xt / mt - xc / mc) / (self.s * np.sqrt(1.0 / mt + 1.0 / mc))
        return normal_p(z)


def run_size_study(spec: SizeStudySpec, workers: int | None = None, study=None) -> SizeStudyResult:
    """Simulate each test's null p-value distribution.

    Logistic fits that hit the separation flag are counted in
    ``failures["logistic"]``; their p-values are kept as computed.
    """
    study = spec.population() if study is None else study
    design = study.design
    Xv = study.values
    seed = SeedSpec(spec.seed)
    info = {"n_clusters": design.n_clusters, "B": design.B, "k": Xv.shape[1]}

    evaluators = {}
    if "d2" in spec.tests:
        contrast = Contrast.for_design(design, spec.weights)
        form = omnibus_form(design, Xv, spec.weights)
        if form.df == 0:
            raise BalanceError("all covariates are constant within blocks")
        info["d2_df"] = form.df
        evaluators["d2"] = lambda Z, start: _chi2_batch(form(contrast.apply(Z, Xv)), form.df)
    if "logistic" in spec.tests:
        dev = DevianceTest(design, Xv, include_size=spec.logistic_include_size)
        info["logistic_df"] = dev.df
        evaluators["logistic"] = lambda Z, start: _logistic_batch(dev, Z)
    if "noclus" in spec.tests:
        name = spec.noclus_covariate or study.X.names[0]
        nb = _NoclusBatch(design, study.X, name)
        info["noclus_covariate"] = name
        evaluators["noclus"] = lambda Z, start: (nb(Z), 0)
    if "uniform" in spec.tests:
        evaluators["uniform"] = lambda Z, start: (seed.uniforms(start, Z.shape[0], 1, STREAM_CONTROL)[:, 0], 0)

    def run(start, count):
        Z = sample_uniform_batch(design, seed, start, count)
        return {t: f(Z, start) for t, f in evaluators.items()}

    parts = map_replicates(run, 0, spec.reps, chunk=4096, workers=workers)
    pvalues = {t: np.concatenate([p[t][0] for p in parts]) for t in evaluators}
    failures = {t: int(sum(p[t][1] for p in parts)) for t in evaluators}
    return SizeStudyResult(spec, pvalues, failures, info)


def _chi2_batch(d2, df):
    return chdtrc(df, np.maximum(d2, 0.0)), 0


def _logistic_batch(dev: DevianceTest, Z):
    p = np.empty(Z.shape[0])
    sep = 0
    for r in range(Z.shape[0]):
        res = dev.run(Z[r])
        p[r] = res.p
        sep += bool(res.fit is not None and res.fit.separation_flag)
    return p, sep
