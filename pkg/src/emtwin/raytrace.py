"""Shooting-and-bouncing-ray path enumeration.

Three path families are produced:

* LoS and specular chains: rays bounce specularly; chains whose tube passes
  the receiver are re-solved exactly with the image method.
* specular prefix + one diffuse scattering event aimed straight at rx.
* first-order edge diffraction tx -> wedge -> rx.

Coplanar triangles of one surface form a *facet*; specular and scattering
chains are deduplicated per facet sequence, so a floor made of two triangles
yields one reflection, not two.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from .bvh import BVH
from .scene import Scene, normalize

C0 = 299_792_458.0
EPS_SELF = 1e-6
BARY_EPS = 1e-9
PLANE_TOL = 1e-9
KIND_CODE = {"reflection": "R", "diffraction": "D", "scattering": "S"}


@dataclass(frozen=True)
class TraceConfig:
    max_depth: int = 3
    n_rays: int = 20000
    seed: int = 0
    capture: float = 1.0
    scattering: bool = True
    diffraction: bool = True
    max_scatter_prefix: int | None = None  # None: max_depth - 1

    def __post_init__(self):
        if self.max_depth < 1:
            raise ValueError("max_depth must be >= 1")
        if self.n_rays < 1:
            raise ValueError("n_rays must be >= 1")

    @property
    def scatter_prefix(self) -> int:
        if self.max_scatter_prefix is None:
            return self.max_depth - 1
        return min(self.max_scatter_prefix, self.max_depth - 1)


@dataclass(frozen=True)
class InteractionRecord:
    kind: str
    p: np.ndarray
    object_id: int
    d_aoa: np.ndarray
    d_aod: np.ndarray
    material_id: int
    normal: np.ndarray | None = None  # reflection/scattering, faces the incoming side
    n0: np.ndarray | None = None      # diffraction, outward face normals
    nn: np.ndarray | None = None
    edge: np.ndarray | None = None
    triangle: int = -1                # global triangle index (reflection/scattering)
    wedge: int = -1                   # global wedge index (diffraction)

    @property
    def primitive(self) -> int:
        return self.wedge if self.kind == "diffraction" else self.triangle


@dataclass(frozen=True)
class PathGeometry:
    vertices: np.ndarray              # (I+2, 3): tx, interaction points, rx
    interactions: tuple
    segment_lengths: np.ndarray = field(init=False)
    tau: float = field(init=False)
    aod: tuple = field(init=False)
    aoa: tuple = field(init=False)
    spread_factor: float = field(init=False)

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=float)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "interactions", tuple(self.interactions))
        seg = np.linalg.norm(np.diff(v, axis=0), axis=1)
        object.__setattr__(self, "segment_lengths", seg)
        object.__setattr__(self, "tau", float(seg.sum()) / C0)
        object.__setattr__(self, "aod", direction_angles(v[1] - v[0]))
        object.__setattr__(self, "aoa", direction_angles(v[-2] - v[-1]))
        object.__setattr__(self, "spread_factor", spread_factor(self))

    @property
    def kinds(self) -> str:
        return "".join(KIND_CODE[r.kind] for r in self.interactions)

    @property
    def ids(self) -> tuple:
        return tuple(r.primitive for r in self.interactions)

    @property
    def first_direction(self) -> np.ndarray:
        return normalize(self.vertices[1] - self.vertices[0])

    @property
    def last_direction(self) -> np.ndarray:
        return normalize(self.vertices[-1] - self.vertices[-2])

    def sort_key(self):
        return (len(self.interactions), self.kinds, self.ids)


def direction_angles(d) -> tuple:
    """(theta, phi) of a direction: polar angle from +z, azimuth via arctan2."""
    d = normalize(d)
    return float(np.arccos(np.clip(d[2], -1.0, 1.0))), float(np.arctan2(d[1], d[0]))


def spread_factor(path: PathGeometry) -> float:
    """a_l = d_1 * S_l with S_l the composite spreading of the path family."""
    seg = path.segment_lengths
    kinds = [r.kind for r in path.interactions]
    if "diffraction" in kinds:
        sp, s = seg[0], seg[1]
        return float(np.sqrt(sp / (s * (sp + s))))
    if kinds and kinds[-1] == "scattering":
        return float(seg[0] / (seg[:-1].sum() * seg[-1]))
    return float(seg[0] / seg.sum())


def sample_directions(n: int, seed: int) -> np.ndarray:
    """Fibonacci-lattice unit vectors under a seeded random rotation."""
    if n < 1:
        raise ValueError("n must be >= 1")
    i = np.arange(n) + 0.5
    z = 1.0 - 2.0 * i / n
    r = np.sqrt(np.clip(1.0 - z * z, 0.0, None))
    phi = np.pi * (3.0 - np.sqrt(5.0)) * np.arange(n)
    pts = np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)
    rot = Rotation.random(random_state=np.random.default_rng(seed))
    return normalize(rot.apply(pts))


# --- compiled geometry ----------------------------------------------------

class TraceGeometry:
    """World-space triangles, facets and wedges of one scene instance."""

    def __init__(self, scene: Scene):
        self.scene = scene
        tris, tri_obj, tri_surf_mat = [], [], []
        facet_of_tri = []
        facet_normal, facet_offset, facet_obj, facet_mat = [], [], [], []
        for obj in scene.objects:
            for surf in obj.surfaces:
                wt = obj.pose.to_world(surf.triangles)
                nrm = normalize(np.cross(wt[:, 1] - wt[:, 0], wt[:, 2] - wt[:, 0]))
                off = np.einsum("ij,ij->i", nrm, wt[:, 0])
                local = []  # facets of this surface: (normal, offset, id)
                for k in range(len(wt)):
                    fid = None
                    for n_f, c_f, f in local:
                        if np.abs(n_f - nrm[k]).max() < PLANE_TOL and abs(c_f - off[k]) < PLANE_TOL * max(1.0, abs(c_f)):
                            fid = f
                            break
                    if fid is None:
                        fid = len(facet_normal)
                        local.append((nrm[k], off[k], fid))
                        facet_normal.append(nrm[k])
                        facet_offset.append(off[k])
                        facet_obj.append(obj.id)
                        facet_mat.append(surf.material_id)
                    facet_of_tri.append(fid)
                    tris.append(wt[k])
                    tri_obj.append(obj.id)
                    tri_surf_mat.append(surf.material_id)
        self.tris = np.array(tris).reshape(-1, 3, 3)
        self.tri_obj = np.array(tri_obj, dtype=int)
        self.tri_material = np.array(tri_surf_mat, dtype=int)
        self.tri_normal = normalize(np.cross(self.tris[:, 1] - self.tris[:, 0], self.tris[:, 2] - self.tris[:, 0])) if len(tris) else np.zeros((0, 3))
        self.tri_facet = np.array(facet_of_tri, dtype=int)
        self.facet_normal = np.array(facet_normal).reshape(-1, 3)
        self.facet_offset = np.array(facet_offset)
        self.facet_obj = np.array(facet_obj, dtype=int)
        self.facet_material = np.array(facet_mat, dtype=int)
        self.facet_tris = [np.flatnonzero(self.tri_facet == f) for f in range(len(facet_normal))]
        area = 0.5 * np.linalg.norm(np.cross(self.tris[:, 1] - self.tris[:, 0], self.tris[:, 2] - self.tris[:, 0]), axis=1)
        cent = self.tris.mean(axis=1)
        self.facet_centroid = np.array([
            (cent[ids] * area[ids, None]).sum(0) / area[ids].sum() for ids in self.facet_tris
        ]).reshape(-1, 3)

        w_a, w_b, w_n0, w_nn, w_obj, w_mat = [], [], [], [], [], []
        for obj in scene.objects:
            for w in obj.wedges:
                ends = obj.pose.to_world(w.endpoints)
                w_a.append(ends[0])
                w_b.append(ends[1])
                w_n0.append(obj.pose.dir_to_world(w.n0))
                w_nn.append(obj.pose.dir_to_world(w.nn))
                w_obj.append(obj.id)
                w_mat.append(w.material_id)
        self.w_a = np.array(w_a).reshape(-1, 3)
        self.w_b = np.array(w_b).reshape(-1, 3)
        self.w_n0 = np.array(w_n0).reshape(-1, 3)
        self.w_nn = np.array(w_nn).reshape(-1, 3)
        self.w_edge = normalize(np.cross(self.w_n0, self.w_nn)) if len(w_a) else np.zeros((0, 3))
        self.w_obj = np.array(w_obj, dtype=int)
        self.w_material = np.array(w_mat, dtype=int)
        self.bvh = BVH(self.tris)

    def closest_hit(self, origins, dirs, t_max=None):
        return self.bvh.closest_hit(origins, dirs, t_min=EPS_SELF, t_max=t_max)

    def segments_clear(self, a, b) -> np.ndarray:
        """True where the open segment a->b hits nothing (ends excluded by EPS_SELF)."""
        a = np.atleast_2d(a)
        b = np.atleast_2d(b)
        v = b - a
        length = np.linalg.norm(v, axis=1)
        d = v / np.where(length > 0, length, 1.0)[:, None]
        t, _ = self.closest_hit(a, d, t_max=np.maximum(length - EPS_SELF, 0.0))
        return ~np.isfinite(t)

    def containing_triangle(self, facet: int, p) -> int:
        """First triangle of ``facet`` containing point p (tolerant), or -1."""
        for t in self.facet_tris[facet]:
            if point_in_triangle(p, self.tris[t]):
                return int(t)
        return -1


def compile_scene(scene) -> TraceGeometry:
    return scene if isinstance(scene, TraceGeometry) else TraceGeometry(scene)


def point_in_triangle(p, tri, tol=BARY_EPS) -> bool:
    v0, v1, v2 = tri
    e1, e2, w = v1 - v0, v2 - v0, p - v0
    d11, d12, d22 = e1 @ e1, e1 @ e2, e2 @ e2
    det = d11 * d22 - d12 * d12
    if det <= 0:
        return False
    b1 = (d22 * (w @ e1) - d12 * (w @ e2)) / det
    b2 = (d11 * (w @ e2) - d12 * (w @ e1)) / det
    return b1 >= -tol and b2 >= -tol and b1 + b2 <= 1 + tol


@dataclass(frozen=True)
class Hit:
    p: np.ndarray
    object_id: int
    triangle: int
    n: np.ndarray
    t: float


def intersect(origin, direction, scene) -> Hit | None:
    """Nearest hit beyond EPS_SELF, normal oriented against the ray."""
    geom = compile_scene(scene)
    o = np.asarray(origin, float).reshape(1, 3)
    d = np.asarray(direction, float).reshape(1, 3)
    t, idx = geom.closest_hit(o, d)
    if idx[0] < 0:
        return None
    n = geom.tri_normal[idx[0]]
    if n @ d[0] > 0:
        n = -n
    return Hit(p=o[0] + t[0] * d[0], object_id=int(geom.tri_obj[idx[0]]), triangle=int(idx[0]), n=n, t=float(t[0]))


# --- specular refinement --------------------------------------------------

def image_points(geom: TraceGeometry, facets, tx, rx):
    """Exact specular points for a facet chain, or None if the chain is invalid.

    Only the planar construction is done here; containment and occlusion are
    checked by the caller.
    """
    images = [np.asarray(tx, float)]
    for f in facets:
        n, c = geom.facet_normal[f], geom.facet_offset[f]
        i = images[-1]
        images.append(i - 2.0 * (n @ i - c) * n)
    pts = [None] * len(facets)
    target = np.asarray(rx, float)
    for k in range(len(facets) - 1, -1, -1):
        n, c = geom.facet_normal[facets[k]], geom.facet_offset[facets[k]]
        src = images[k + 1]
        den = n @ (target - src)
        if abs(den) < 1e-15:
            return None
        u = (c - n @ src) / den
        if not (1e-12 < u < 1 - 1e-12):
            return None
        pts[k] = src + u * (target - src)
        target = pts[k]
    return pts


def _specular_path(geom: TraceGeometry, facets, tx, rx):
    pts = image_points(geom, facets, tx, rx)
    if pts is None:
        return None
    verts = np.array([tx, *pts, rx], dtype=float).reshape(-1, 3)
    tri_ids = []
    for k, f in enumerate(facets):
        n, c = geom.facet_normal[f], geom.facet_offset[f]
        side_prev = n @ verts[k] - c
        side_next = n @ verts[k + 2] - c
        if side_prev * side_next <= 0:
            return None
        t = geom.containing_triangle(f, verts[k + 1])
        if t < 0:
            return None
        tri_ids.append(t)
    if np.any(np.linalg.norm(np.diff(verts, axis=0), axis=1) <= EPS_SELF):
        return None
    if not geom.segments_clear(verts[:-1], verts[1:]).all():
        return None
    recs = []
    for k, f in enumerate(facets):
        d_in = normalize(verts[k + 1] - verts[k])
        d_out = normalize(verts[k + 2] - verts[k + 1])
        n = geom.facet_normal[f]
        if n @ d_in > 0:
            n = -n
        # law of reflection exactly: rebuild d_out from d_in to kill rounding drift
        d_ref = d_in - 2.0 * (n @ d_in) * n
        recs.append(InteractionRecord(
            kind="reflection", p=verts[k + 1], object_id=int(geom.facet_obj[f]),
            d_aoa=d_in, d_aod=d_ref if np.abs(d_ref - d_out).max() < 1e-6 else d_out,
            material_id=int(geom.facet_material[f]), normal=n, triangle=tri_ids[k]))
    return PathGeometry(verts, recs)


# --- diffraction ------------------------------------------------------------

def wedge_frame(n0, nn):
    e = normalize(np.cross(n0, nn))
    t0 = np.cross(n0, e)
    betan = np.pi + np.arccos(np.clip(n0 @ nn, -1.0, 1.0))
    return e, t0, betan


def exterior_angle(x, q, n0, t0, e) -> float:
    """Angle of point x around the edge, measured from face 0 into free space."""
    w = x - q
    w = w - (w @ e) * e
    return float(np.arctan2(w @ n0, w @ t0) % (2.0 * np.pi))


def fermat_edge_point(tx, a, b, rx):
    """Stationary point of |tx-q|+|q-rx| on the infinite line through a, b.

    Returns (q, s) with s the parameter along a->b in metres, or None if either
    endpoint lies on the edge line.
    """
    tx, a, b, rx = (np.asarray(v, float) for v in (tx, a, b, rx))
    length = np.linalg.norm(b - a)
    e = (b - a) / length
    a1, a2 = (tx - a) @ e, (rx - a) @ e
    r1 = np.linalg.norm((tx - a) - a1 * e)
    r2 = np.linalg.norm((rx - a) - a2 * e)
    if r1 < 1e-12 or r2 < 1e-12:
        return None
    s = (a1 * r2 + a2 * r1) / (r1 + r2)
    return a + s * e, s


def find_diffraction_point(tx, wedge_world, rx, geom: TraceGeometry | None = None):
    """Fermat point on a wedge edge if it is strictly inside and visible.

    ``wedge_world`` is ``(a, b, n0, nn)`` in world coordinates. Without
    ``geom`` no occlusion test is done.
    """
    a, b, n0, nn = (np.asarray(v, float) for v in wedge_world)
    res = fermat_edge_point(tx, a, b, rx)
    if res is None:
        return None
    q, s = res
    length = np.linalg.norm(b - a)
    if not (EPS_SELF < s < length - EPS_SELF):
        return None
    e, t0, betan = wedge_frame(n0, nn)
    for x in (tx, rx):
        ang = exterior_angle(np.asarray(x, float), q, n0, t0, e)
        if not (1e-9 < ang < betan - 1e-9):
            return None
    if geom is not None and not geom.segments_clear(np.array([tx, q]), np.array([q, rx])).all():
        return None
    return q


def _diffraction_paths(geom: TraceGeometry, tx, rx):
    out = []
    for w in range(len(geom.w_a)):
        q = find_diffraction_point(tx, (geom.w_a[w], geom.w_b[w], geom.w_n0[w], geom.w_nn[w]), rx, geom)
        if q is None:
            continue
        rec = InteractionRecord(
            kind="diffraction", p=q, object_id=int(geom.w_obj[w]),
            d_aoa=normalize(q - tx), d_aod=normalize(rx - q),
            material_id=int(geom.w_material[w]),
            n0=geom.w_n0[w], nn=geom.w_nn[w], edge=geom.w_edge[w], wedge=w)
        out.append(PathGeometry(np.array([tx, q, rx]), [rec]))
    return out


# --- shooting and bouncing --------------------------------------------------

def _unique_rows(a):
    if a.shape[1] == 0:
        return [()]
    return [tuple(int(v) for v in r) for r in np.unique(a, axis=0)]


def trace_paths(scene, cfg: TraceConfig | None = None) -> list:
    """Enumerate propagation paths tx -> rx; deterministic, sorted output."""
    cfg = cfg or TraceConfig()
    geom = compile_scene(scene)
    tx = geom.scene.tx.position.copy()
    rx = geom.scene.rx.position.copy()
    n = cfg.n_rays
    dirs = sample_directions(n, cfg.seed)
    dalpha = np.sqrt(4.0 * np.pi / n)
    depth = cfg.max_depth
    org = np.repeat(tx[None], n, axis=0)
    acc = np.zeros(n)
    chain = np.full((n, depth), -1, dtype=int)
    pts = np.zeros((n, depth, 3))
    alive = np.arange(n)
    spec_chains = {()}
    scat_paths = []

    for k in range(depth + 1):
        if alive.size == 0:
            break
        o, d = org[alive], dirs[alive]
        t, tri = geom.closest_hit(o, d)
        v = rx - o
        s = np.einsum("ij,ij->i", v, d)
        perp2 = np.einsum("ij,ij->i", v, v) - s * s
        rad = cfg.capture * (acc[alive] + s) * dalpha
        cap = (s > 0) & (s < t) & (perp2 <= rad * rad)
        if k > 0 and cap.any():
            spec_chains.update(_unique_rows(chain[alive[cap], :k]))
        if k == depth:
            break
        hit = tri >= 0
        ids = alive[hit]
        p_hit = o[hit] + t[hit, None] * d[hit]
        facet = geom.tri_facet[tri[hit]]
        if cfg.scattering and k <= cfg.scatter_prefix and ids.size:
            scat_paths.extend(_scatter_candidates(geom, chain[ids, :k], pts[ids, :k], facet, p_hit, tx, rx))
        n_hit = geom.tri_normal[tri[hit]]
        d_new = d[hit] - 2.0 * np.einsum("ij,ij->i", d[hit], n_hit)[:, None] * n_hit
        chain[ids, k] = facet
        pts[ids, k] = p_hit
        acc[ids] += t[hit]
        org[ids] = p_hit
        dirs[ids] = normalize(d_new)
        alive = ids

    paths = []
    for fc in sorted(spec_chains, key=lambda c: (len(c), c)):
        p = _specular_path(geom, list(fc), tx, rx)
        if p is not None:
            paths.append(p)
    paths.extend(scat_paths)
    if cfg.diffraction:
        paths.extend(_diffraction_paths(geom, tx, rx))
    return _dedup_sorted(paths)


def _scatter_candidates(geom, prefix, prefix_pts, facet, p_hit, tx, rx):
    """One scattering path per (prefix facets, hit facet) key.

    The representative hit is the one closest to the facet centroid whose
    last leg to rx is valid; ties break on ray order.
    """
    keys = np.concatenate([prefix, facet[:, None]], axis=1)
    uniq, inv = np.unique(keys, axis=0, return_inverse=True)
    inv = inv.reshape(-1)
    dist = np.linalg.norm(p_hit - geom.facet_centroid[facet], axis=1)
    order = np.lexsort((np.arange(len(inv)), dist, inv))
    # side condition for every candidate, occlusion only for the survivors
    prev = np.concatenate([np.repeat(tx[None], len(facet), 0)[:, None], prefix_pts], axis=1)[:, -1]
    nf = geom.facet_normal[facet]
    side_in = np.einsum("ij,ij->i", prev - p_hit, nf)
    side_out = np.einsum("ij,ij->i", rx - p_hit, nf)
    ok_side = side_in * side_out > 0
    out = []
    pending = {}
    for j in order:
        g = inv[j]
        if g in pending or not ok_side[j]:
            continue
        pending[g] = j
    if not pending:
        return out
    groups = sorted(pending)
    js = np.array([pending[g] for g in groups])
    clear = geom.segments_clear(p_hit[js], np.repeat(rx[None], len(js), 0))
    # groups whose nearest-to-centroid candidate is occluded try the next ones
    todo = [g for g, c in zip(groups, clear) if not c]
    chosen = {g: j for g, j, c in zip(groups, js, clear) if c}
    if todo:
        cand = {g: [j for j in order if inv[j] == g and ok_side[j]] for g in todo}
        for g in todo:
            rest = np.array(cand[g][1:], dtype=int)
            if rest.size == 0:
                continue
            c = geom.segments_clear(p_hit[rest], np.repeat(rx[None], len(rest), 0))
            if c.any():
                chosen[g] = int(rest[np.argmax(c)])
    for g in sorted(chosen):
        j = chosen[g]
        verts = np.concatenate([tx[None], prefix_pts[j], p_hit[j][None], rx[None]])
        seg = np.linalg.norm(np.diff(verts, axis=0), axis=1)
        if np.any(seg <= EPS_SELF):
            continue
        recs = []
        for m in range(len(keys[j])):
            f = keys[j][m]
            p = verts[m + 1]
            d_in = normalize(p - verts[m])
            d_out = normalize(verts[m + 2] - p)
            nrm = geom.facet_normal[f]
            if nrm @ d_in > 0:
                nrm = -nrm
            kind = "scattering" if m == len(keys[j]) - 1 else "reflection"
            tri_id = geom.containing_triangle(f, p)
            recs.append(InteractionRecord(
                kind=kind, p=p, object_id=int(geom.facet_obj[f]), d_aoa=d_in, d_aod=d_out,
                material_id=int(geom.facet_material[f]), normal=nrm, triangle=tri_id))
        out.append(PathGeometry(verts, recs))
    return out


def _dedup_sorted(paths):
    seen = set()
    out = []
    for p in sorted(paths, key=lambda q: q.sort_key()):
        key = (p.kinds, p.ids)
        if key in seen:
            continue
        seen.add(key)
        out.append(p)
    return out


# --- serialization ----------------------------------------------------------

def _vec(v):
    return None if v is None else [float(x) for x in v]


def record_to_dict(r: InteractionRecord) -> dict:
    d = {"kind": r.kind, "p": _vec(r.p), "object_id": r.object_id, "material_id": r.material_id,
         "d_aoa": _vec(r.d_aoa), "d_aod": _vec(r.d_aod)}
    if r.kind == "diffraction":
        d.update(n0=_vec(r.n0), nn=_vec(r.nn), edge=_vec(r.edge), wedge=r.wedge)
    else:
        d.update(normal=_vec(r.normal), triangle=r.triangle)
    return d


def record_from_dict(d: dict) -> InteractionRecord:
    arr = lambda k: None if d.get(k) is None else np.array(d[k], dtype=float)  # noqa: E731
    return InteractionRecord(
        kind=d["kind"], p=arr("p"), object_id=int(d["object_id"]), material_id=int(d["material_id"]),
        d_aoa=arr("d_aoa"), d_aod=arr("d_aod"), normal=arr("normal"), n0=arr("n0"), nn=arr("nn"),
        edge=arr("edge"), triangle=int(d.get("triangle", -1)), wedge=int(d.get("wedge", -1)))


def path_to_dict(p: PathGeometry) -> dict:
    return {
        "vertices": [_vec(v) for v in p.vertices],
        "interactions": [record_to_dict(r) for r in p.interactions],
        "segment_lengths": _vec(p.segment_lengths),
        "tau": p.tau,
        "aod": list(p.aod),
        "aoa": list(p.aoa),
        "spread_factor": p.spread_factor,
    }


def path_from_dict(d: dict) -> PathGeometry:
    """Rebuild a path; derived fields are recomputed from the vertices."""
    return PathGeometry(np.array(d["vertices"], dtype=float), [record_from_dict(r) for r in d["interactions"]])


def dumps_paths(paths) -> str:
    """One JSON object per line; floats are written with repr precision."""
    return "".join(json.dumps(path_to_dict(p), sort_keys=True) + "\n" for p in paths)


def loads_paths(text: str) -> list:
    return [path_from_dict(json.loads(line)) for line in text.splitlines() if line.strip()]
