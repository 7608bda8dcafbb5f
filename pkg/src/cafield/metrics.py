"""Chamfer distance, instance / category / ground-truth-equivariance
consistency metrics, the PCA baseline and report generation."""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field

import numpy as np

from . import fields, kernels, so3

METRICS_VERSION = "cafield-metrics-v1"

# Published full-scale averages (x100), shown next to desk-scale values.
REFERENCE = {
    "model": {"IC": 1.34, "CC": 1.45, "GEC": 1.67},
    "pca": {"GEC": 8.61},
    "ablation.signal": {"gradient": 1.57, "xyz": 1.95},
    "ablation.weighting": {"direct": 1.57, "local-average": 1.73},
    "ablation.siamese": {"on": 1.57, "off": 1.86},
}

PROTOCOL_NOTE = ("IC and CC follow the GEC structure (IC: same instance in two poses; "
                 "CC: ordered instance pairs, unit-scale normalized); formalization is this "
                 "package's, the reference values come from the full-scale dataset.")


class DegenerateGeometryError(ValueError):
    pass


# -- chamfer ------------------------------------------------------------------

def _points(A):
    A = np.asarray(A, dtype=np.float64).reshape(-1, 3)
    if A.shape[0] == 0:
        raise ValueError("chamfer needs non-empty point sets")
    if not np.all(np.isfinite(A)):
        raise ValueError("point set has non-finite coordinates")
    return A


def chamfer(A, B, impl=None):
    """mean_a min_b |a-b|^2 + mean_b min_a |a-b|^2."""
    A, B = _points(A), _points(B)
    dab, _ = kernels.nearest_sqdist(A, B, impl)
    dba, _ = kernels.nearest_sqdist(B, A, impl)
    return float(dab.mean() + dba.mean())


def unit_scale(P):
    """Center and divide by the largest centered norm."""
    P = np.asarray(P, dtype=np.float64)
    c = P - P.mean(axis=0)
    s = np.linalg.norm(c, axis=1).max()
    return c / s if s > 0 else c


# -- PCA baseline -------------------------------------------------------------

def pca_canonicalizer(P, gap_tol=1e-9):
    """Rotation whose rows are the covariance eigenvectors (descending
    eigenvalue), each oriented toward positive third central moment; the
    smallest axis is flipped if needed for det +1."""
    P = np.asarray(P, dtype=np.float64)
    if P.shape[0] < 3:
        raise DegenerateGeometryError("PCA needs at least 3 points")
    X = P - P.mean(axis=0)
    C = X.T @ X / X.shape[0]
    w, V = np.linalg.eigh(C)
    w, V = w[::-1], V[:, ::-1]
    scale = max(w[0], 1e-300)
    if w[2] <= 1e-12 * scale:
        raise DegenerateGeometryError("covariance is rank deficient")
    if min(w[0] - w[1], w[1] - w[2]) <= gap_tol * scale:
        raise DegenerateGeometryError("covariance eigenvalues are not separated")
    R = V.T.copy()
    for i in range(3):
        if np.mean((X @ R[i]) ** 3) < 0:
            R[i] = -R[i]
    if np.linalg.det(R) < 0:
        R[2] = -R[2]
    return R


# -- canonicalizer handles ----------------------------------------------------

@dataclass
class EvalInstance:
    """A category member: template surface points (canonical frame) and the
    instance's field provider (posed by ``R_gt`` about ``center``)."""
    name: str
    category: str
    points: np.ndarray
    provider: object = None
    R_gt: np.ndarray = field(default_factory=lambda: np.eye(3))
    center: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def field_for(self, R):
        """Provider whose object sits at pose R relative to the canonical frame."""
        return fields.RotatedProvider(self.provider, R @ self.R_gt.T, self.center)


def eval_instance(category, seed, clutter=0.0, noise=0.0, n_points=512):
    inst, prov = fields.synth_generate(category, seed, clutter, noise)
    pts = inst.template.surface_points(n_points, seed)
    return EvalInstance(f"{category}-{seed}", category, pts, prov, inst.R_gt, inst.offset)


class Canonicalizer:
    name = "base"

    def __call__(self, inst, R):
        raise NotImplementedError


class OracleCanonicalizer(Canonicalizer):
    name = "oracle"

    def __call__(self, inst, R):
        return np.asarray(R, dtype=np.float64).T


class IdentityCanonicalizer(Canonicalizer):
    name = "identity"

    def __call__(self, inst, R):
        return np.eye(3)


class PCACanonicalizer(Canonicalizer):
    name = "pca"

    def __call__(self, inst, R):
        return pca_canonicalizer(inst.points @ np.asarray(R).T)


class ModelCanonicalizer(Canonicalizer):
    """Trained network on the posed density field; returns E_b^T."""
    name = "model"

    def __init__(self, net, resolution=32, d=fields.DEFAULT_DEPTH_STEP, name="model"):
        self.net, self.resolution, self.d, self.name = net, resolution, d, name

    def __call__(self, inst, R):
        from .canonicalizer import canonicalize
        res = canonicalize(inst.field_for(R), self.net, self.resolution, self.d)
        return res.rotation.T


def rotation_pairs(T, seed):
    rng = np.random.default_rng([seed, 11])
    return [(so3.random_rotation(rng), so3.random_rotation(rng)) for _ in range(T)]


class _Predictions:
    """Cached canonicalizer outputs per (instance, trial, side)."""

    def __init__(self, canon, instances, pairs):
        self.canon, self.instances, self.pairs = canon, instances, pairs
        self.cache = {}

    def rot(self, i, t, side):
        key = (i, t, side)
        if key not in self.cache:
            R = self.pairs[t][side]
            C = np.asarray(self.canon(self.instances[i], R), dtype=np.float64)
            so3.check_rotation(C, 1e-6)
            self.cache[key] = C @ R
        return self.cache[key]

    def posed(self, i, t, side, k=None):
        """C(R P_i) R P_k as an (N, 3) array."""
        k = i if k is None else k
        return self.instances[k].points @ self.rot(i, t, side).T


def instance_consistency(canon, instances, T=10, seed=0, pairs=None, _pred=None):
    pairs = rotation_pairs(T, seed) if pairs is None else pairs
    if len(pairs) < 1:
        raise ValueError("need at least one rotation pair")
    pred = _pred or _Predictions(canon, instances, pairs)
    vals = [chamfer(pred.posed(i, t, 0), pred.posed(i, t, 1))
            for i in range(len(instances)) for t in range(len(pairs))]
    return float(np.mean(vals))


def category_consistency(canon, instances, T=10, seed=0, pairs=None, _pred=None):
    if len(instances) < 2:
        raise ValueError("category consistency needs at least 2 instances")
    pairs = rotation_pairs(T, seed) if pairs is None else pairs
    pred = _pred or _Predictions(canon, instances, pairs)
    vals = [chamfer(unit_scale(pred.posed(i, t, 0)), unit_scale(pred.posed(j, t, 1)))
            for i, j in itertools.permutations(range(len(instances)), 2)
            for t in range(len(pairs))]
    return float(np.mean(vals))


def gec_triples(n, T, seed, budget=100_000):
    if n ** 3 * T <= budget:
        return list(itertools.product(range(n), repeat=3))
    rng = np.random.default_rng([seed, 13])
    m = max(1, budget // T)
    return [tuple(int(v) for v in rng.integers(n, size=3)) for _ in range(m)]


def gec(canon, instances, T=10, seed=0, pairs=None, _pred=None, budget=100_000):
    """mean over (i, j, k) and rotation pairs of
    CD(C(R1 P_i) R1 P_k, C(R2 P_j) R2 P_k)."""
    if len(instances) < 2:
        raise ValueError("GEC needs at least 2 instances")
    pairs = rotation_pairs(T, seed) if pairs is None else pairs
    pred = _pred or _Predictions(canon, instances, pairs)
    vals = [chamfer(pred.posed(i, t, 0, k), pred.posed(j, t, 1, k))
            for i, j, k in gec_triples(len(instances), len(pairs), seed, budget)
            for t in range(len(pairs))]
    return float(np.mean(vals))


# -- reports ------------------------------------------------------------------

@dataclass
class MetricsReport:
    results: dict                 # canonicalizer -> category -> {IC, CC, GEC, ...}
    T: int
    seed: int
    annotations: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def to_json(self):
        doc = {"format": METRICS_VERSION, "scale": 100, "T": self.T, "seed": self.seed,
               "results": self.results, "annotations": self.annotations, "meta": self.meta,
               "protocol": PROTOCOL_NOTE}
        return json.dumps(doc, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        doc = json.loads(text)
        if doc.get("format") != METRICS_VERSION:
            raise ValueError(f"not a {METRICS_VERSION} report")
        return cls(doc["results"], doc["T"], doc["seed"], doc["annotations"], doc["meta"])

    def table(self):
        lines = [f"{METRICS_VERSION}  (values x100, T={self.T}, seed={self.seed})"]
        for name in sorted(self.results):
            lines.append(f"[{name}]")
            lines.append(f"  {'category':<12}{'IC':>10}{'CC':>10}{'GEC':>10}{'n':>5}")
            for cat in sorted(self.results[name]):
                r = self.results[name][cat]
                lines.append(f"  {cat:<12}{r['IC']:>10.2f}{r['CC']:>10.2f}{r['GEC']:>10.2f}"
                             f"{r['n_instances']:>5d}")
        if self.annotations:
            lines.append("reference averages (full-scale dataset, not reproduced here):")
            for key in sorted(self.annotations):
                vals = ", ".join(f"{k} {v}" for k, v in sorted(self.annotations[key].items()))
                lines.append(f"  {key}: {vals}")
        return "\n".join(lines)


def evaluate_suite(canonicalizers, instances, T=10, seed=0, annotations=None, meta=None):
    """IC / CC / GEC (x100) per category for each canonicalizer. All
    canonicalizers see the same rotation pairs."""
    pairs = rotation_pairs(T, seed)
    by_cat = {}
    for inst in instances:
        by_cat.setdefault(inst.category, []).append(inst)
    results = {}
    for canon in canonicalizers:
        res = {}
        for cat in sorted(by_cat):
            members = by_cat[cat]
            pred = _Predictions(canon, members, pairs)
            row = {"IC": 100 * instance_consistency(canon, members, pairs=pairs, _pred=pred),
                   "n_instances": len(members)}
            if len(members) >= 2:
                row["CC"] = 100 * category_consistency(canon, members, pairs=pairs, _pred=pred)
                row["GEC"] = 100 * gec(canon, members, pairs=pairs, seed=seed, _pred=pred)
            else:
                row["CC"] = row["GEC"] = float("nan")
            res[cat] = row
        results[canon.name] = res
    ann = dict(REFERENCE) if annotations is None else annotations
    return MetricsReport(results, T, seed, ann, dict(meta or {}))
