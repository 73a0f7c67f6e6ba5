"""Desk-scale analyses: NMSE CDFs, channel-gain error grids, embedding
clustering with material purity, and per-subcarrier amplitude/phase errors.

Grid spec file (YAML)::

    format: emtwin-grid/1
    x: [x_min, x_max, nx]
    y: [y_min, y_max, ny]
    z: 1.2
    trace: {max_depth: 2, n_rays: 4000}    # TraceConfig fields, optional
"""
from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field

import numpy as np
import yaml
from scipy.cluster.vq import kmeans2

from .autodiff import Tape
from .oracle import load_materials, path_gain
from .raytrace import TraceConfig, trace_paths
from .scene import ObjectModel, Scene
from .twin import TwinModel, compile_sample, forward_batch, object_embedding, param_vars

GRID_FORMAT = "emtwin-grid/1"
KMEANS_ITERS = 50


# --- CDF -------------------------------------------------------------------------

def nmse_cdf(values) -> list:
    """Empirical CDF as sorted (value, rank / n) pairs."""
    v = np.sort(np.asarray(values, float).ravel())
    if v.size == 0:
        raise ValueError("nmse_cdf: no values")
    return [(float(x), (i + 1) / v.size) for i, x in enumerate(v)]


def write_cdf(path, pairs):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["nmse_db", "cdf"])
        for x, c in pairs:
            w.writerow([repr(x), repr(c)])


# --- amplitude / phase error -------------------------------------------------------

def amp_phase_error(h_true, h_pred):
    """Per subcarrier: relative amplitude error and absolute wrapped phase error."""
    h_true = np.asarray(h_true, complex)
    h_pred = np.asarray(h_pred, complex)
    if h_true.shape != h_pred.shape:
        raise ValueError("amp_phase_error: length mismatch")
    a = np.abs(h_true)
    if np.any(a == 0):
        raise ValueError("amp_phase_error: zero-amplitude subcarrier in ground truth")
    amp = np.abs(np.abs(h_pred) - a) / a
    d = np.angle(h_pred) - np.angle(h_true)
    phase = np.abs((d + np.pi) % (2 * np.pi) - np.pi)
    return amp, phase


# --- channel-gain grid -------------------------------------------------------------

@dataclass(frozen=True)
class GridSpec:
    x: tuple
    y: tuple
    z: float
    trace: TraceConfig = field(default_factory=lambda: TraceConfig(max_depth=2, n_rays=4000, max_scatter_prefix=0))

    @property
    def xs(self):
        return np.linspace(self.x[0], self.x[1], int(self.x[2]))

    @property
    def ys(self):
        return np.linspace(self.y[0], self.y[1], int(self.y[2]))


def load_grid_spec(path) -> GridSpec:
    with open(path) as fh:
        doc = yaml.safe_load(fh) or {}
    if doc.pop("format", GRID_FORMAT) != GRID_FORMAT:
        raise ValueError(f"{path}: unsupported grid format")
    unknown = set(doc) - {"x", "y", "z", "trace"}
    if unknown:
        raise ValueError(f"{path}: unknown field(s) {sorted(unknown)}")
    from .trainer import _sub
    trace = _sub(TraceConfig, doc["trace"], "trace") if "trace" in doc else GridSpec.__dataclass_fields__["trace"].default_factory()
    ax = lambda k: (float(doc[k][0]), float(doc[k][1]), int(doc[k][2]))  # noqa: E731
    return GridSpec(ax("x"), ax("y"), float(doc["z"]), trace)


def oracle_path_gains(scene: Scene, paths, fc: float, materials=None) -> np.ndarray:
    materials = load_materials() if materials is None else materials
    return np.array([path_gain(p, materials, scene.scene_max_dim, fc) for p in paths], dtype=complex)


def twin_path_gains(twin: TwinModel, scene: Scene, paths) -> np.ndarray:
    """Per-path complex amplitudes predicted by the twin."""
    if not paths:
        return np.zeros(0, complex)
    batch = compile_sample(scene, paths, twin.config.fc)
    # one pseudo-sample per path and a zero-delay grid point gives alpha_l directly
    batch.p_sample = np.arange(batch.n_paths)
    batch.n_samples = batch.n_paths
    batch.tau = np.zeros_like(batch.tau)
    tape = Tape()
    h_re, h_im = forward_batch(tape, twin, param_vars(tape, twin), batch, np.zeros(1))
    return h_re.value[:, 0] + 1j * h_im.value[:, 0]


def channel_gain_db(alphas) -> float:
    p = float(np.sum(np.abs(alphas) ** 2))
    return 10 * np.log10(p) if p > 0 else -np.inf


def _gain_fn(model, fc):
    if callable(model):
        return model
    if model == "oracle":
        return lambda sc, ps: oracle_path_gains(sc, ps, fc)
    if isinstance(model, TwinModel):
        return lambda sc, ps: twin_path_gains(model, sc, ps)
    raise TypeError("model must be a TwinModel, 'oracle' or a callable")


def gain_error_grid(model, scene: Scene, spec: GridSpec, fc: float | None = None, reference="oracle"):
    """|P_model_dB - P_reference_dB| over a horizontal grid; NaN where no path exists.

    ``model`` and ``reference`` are a TwinModel, the string ``"oracle"`` or a
    callable (scene, paths) -> per-path complex gains. Returns (matrix, xs, ys)
    with ``matrix[iy, ix]``.
    """
    if fc is None:
        fc = model.config.fc if isinstance(model, TwinModel) else 3.5e9
    verts = np.concatenate([o.pose.to_world(o.local_vertices()) for o in scene.objects])
    lo, hi = verts.min(0), verts.max(0)
    xs, ys = spec.xs, spec.ys
    if xs.min() < lo[0] or xs.max() > hi[0] or ys.min() < lo[1] or ys.max() > hi[1] or not lo[2] <= spec.z <= hi[2]:
        raise ValueError("gain_error_grid: grid leaves the scene bounds")
    f_model, f_ref = _gain_fn(model, fc), _gain_fn(reference, fc)
    out = np.full((len(ys), len(xs)), np.nan)
    for iy, y in enumerate(ys):
        for ix, x in enumerate(xs):
            sc = scene.with_rx((x, y, spec.z))
            paths = trace_paths(sc, spec.trace)
            if not paths:
                continue
            p_ref = channel_gain_db(f_ref(sc, paths))
            p_mod = channel_gain_db(f_model(sc, paths))
            if np.isfinite(p_ref) and np.isfinite(p_mod):
                out[iy, ix] = abs(p_mod - p_ref)
    return out, xs, ys


def write_grid(path, matrix, xs, ys):
    """Matrix CSV: header row of x values, first column y; absent cells empty."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["y\\x"] + [repr(float(x)) for x in xs])
        for y, row in zip(ys, matrix):
            w.writerow([repr(float(y))] + ["" if np.isnan(v) else repr(float(v)) for v in row])


# --- embedding clustering ------------------------------------------------------------

def sample_surface(obj: ObjectModel, n: int, seed: int):
    """Area-weighted uniform points on the object's triangles (world frame)
    with the material of the surface each point came from."""
    tris = np.concatenate([s.triangles for s in obj.surfaces])
    mats = np.concatenate([np.full(len(s.triangles), s.material_id) for s in obj.surfaces])
    if len(tris) < 2:
        raise ValueError(f"object {obj.id}: degenerate (single triangle)")
    area = 0.5 * np.linalg.norm(np.cross(tris[:, 1] - tris[:, 0], tris[:, 2] - tris[:, 0]), axis=1)
    rng = np.random.default_rng(seed)
    t = rng.choice(len(tris), size=n, p=area / area.sum())
    u, v = rng.random(n), rng.random(n)
    flip = u + v > 1
    u[flip], v[flip] = 1 - u[flip], 1 - v[flip]
    a, b, c = tris[t, 0], tris[t, 1], tris[t, 2]
    local = a + u[:, None] * (b - a) + v[:, None] * (c - a)
    return obj.pose.to_world(local), mats[t]


def purity(labels, truth) -> float:
    labels = np.asarray(labels)
    truth = np.asarray(truth)
    hit = 0
    for c in np.unique(labels):
        _, counts = np.unique(truth[labels == c], return_counts=True)
        hit += counts.max()
    return hit / len(truth)


def kmeans(x, k: int, seed: int, iters: int = KMEANS_ITERS):
    """Seeded k-means++ start and a fixed number of Lloyd iterations."""
    x = np.asarray(x, float)
    if np.ptp(x, axis=0).max(initial=0.0) == 0.0:
        return np.zeros(len(x), dtype=int)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        _, labels = kmeans2(x, k, iter=iters, minit="++", seed=np.random.default_rng(seed))
    return labels


@dataclass
class ClusterResult:
    labels: np.ndarray
    purity: float
    points: np.ndarray
    materials: np.ndarray
    baseline: float   # majority-material frequency


def cluster_embeddings(twin: TwinModel, obj: ObjectModel, n_samples: int = 2000, k: int = 2,
                       seed: int = 0) -> ClusterResult:
    if k < 2:
        raise ValueError("k must be >= 2")
    if len({s.material_id for s in obj.surfaces}) < 2:
        raise ValueError(f"object {obj.id}: needs at least two materials")
    pts, mats = sample_surface(obj, n_samples, seed)
    e = object_embedding(twin, obj.id, pts, obj)
    labels = kmeans(e, k, seed)
    _, counts = np.unique(mats, return_counts=True)
    return ClusterResult(labels, purity(labels, mats), pts, mats, counts.max() / len(mats))


def write_cluster_report(path, res: ClusterResult, extra: dict | None = None):
    """Per-point CSV plus a ``<path>.json`` summary with the purity."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "y", "z", "cluster", "material"])
        for p, c, m in zip(res.points, res.labels, res.materials):
            w.writerow([repr(float(p[0])), repr(float(p[1])), repr(float(p[2])), int(c), int(m)])
    summary = {"purity": res.purity, "baseline": res.baseline, "n": len(res.labels)}
    summary.update(extra or {})
    with open(f"{path}.json", "w") as fh:
        json.dump(summary, fh, sort_keys=True, indent=1)
