"""Segmented triangle-mesh scenes, object poses and the scene file format.

A scene file is YAML with three top-level keys besides ``format``::

    format: emtwin-scene/1
    tx: {position: [x, y, z], quaternion: [w, x, y, z]}
    rx: {position: [x, y, z], quaternion: [w, x, y, z]}
    objects:
      - id: 0
        name: room              # optional
        enclosure: true         # optional, default false
        pose: {position: [...], quaternion: [...]}
        surfaces:
          - material: 1
            triangles: [[[x,y,z], [x,y,z], [x,y,z]], ...]
        wedges:
          - {endpoints: [[x,y,z], [x,y,z]], n0: [...], nn: [...], material: 2}

Triangles, wedge endpoints and wedge normals are given in the object's local
frame; lengths are metres. ``n0``/``nn`` are the outward normals of the two
faces meeting at the edge. Unknown keys are rejected.

Objects flagged ``enclosure`` (rooms) bound the free space from outside; all
other objects are treated as solids when rejecting receiver positions.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml
from scipy.spatial.transform import Rotation

SCENE_FORMAT = "emtwin-scene/1"
MIN_TRIANGLE_AREA = 1e-12
UNIT_TOL = 1e-9


class SceneError(ValueError):
    """Raised when a scene file cannot be parsed or violates an invariant."""


def normalize(v, axis=-1):
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v, axis=axis, keepdims=True)


@dataclass(frozen=True)
class Pose:
    position: np.ndarray
    quaternion: np.ndarray  # (w, x, y, z)

    def __post_init__(self):
        object.__setattr__(self, "position", np.asarray(self.position, dtype=float).reshape(3))
        object.__setattr__(self, "quaternion", np.asarray(self.quaternion, dtype=float).reshape(4))

    @classmethod
    def identity(cls, position=(0.0, 0.0, 0.0)):
        return cls(np.asarray(position, dtype=float), np.array([1.0, 0.0, 0.0, 0.0]))

    @classmethod
    def from_axis_angle(cls, position, axis, angle):
        rv = normalize(axis) * angle
        x, y, z, w = Rotation.from_rotvec(rv).as_quat()
        return cls(np.asarray(position, dtype=float), np.array([w, x, y, z]))

    @property
    def rotation(self) -> np.ndarray:
        """3x3 matrix mapping local vectors to world vectors."""
        w, x, y, z = self.quaternion
        return Rotation.from_quat([x, y, z, w]).as_matrix()

    def to_world(self, p_local):
        return np.asarray(p_local) @ self.rotation.T + self.position

    def to_local(self, p_world):
        return (np.asarray(p_world) - self.position) @ self.rotation

    def dir_to_world(self, d_local):
        return np.asarray(d_local) @ self.rotation.T

    def dir_to_local(self, d_world):
        return np.asarray(d_world) @ self.rotation


@dataclass(frozen=True)
class Surface:
    triangles: np.ndarray  # (T, 3, 3) local frame
    material_id: int

    def __post_init__(self):
        object.__setattr__(self, "triangles", np.asarray(self.triangles, dtype=float).reshape(-1, 3, 3))


@dataclass(frozen=True)
class Wedge:
    endpoints: np.ndarray  # (2, 3) local frame
    n0: np.ndarray
    nn: np.ndarray
    material_id: int

    def __post_init__(self):
        object.__setattr__(self, "endpoints", np.asarray(self.endpoints, dtype=float).reshape(2, 3))
        object.__setattr__(self, "n0", np.asarray(self.n0, dtype=float).reshape(3))
        object.__setattr__(self, "nn", np.asarray(self.nn, dtype=float).reshape(3))

    @property
    def edge(self) -> np.ndarray:
        """Unit edge vector n0 x nn in the local frame."""
        return normalize(np.cross(self.n0, self.nn))


@dataclass(frozen=True)
class ObjectModel:
    id: int
    surfaces: tuple
    wedges: tuple
    pose: Pose
    name: str = ""
    enclosure: bool = False
    max_dim: float = field(default=0.0, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "surfaces", tuple(self.surfaces))
        object.__setattr__(self, "wedges", tuple(self.wedges))
        # Largest local bbox extent, widened if the local origin sits outside the
        # bbox, so normalized local coordinates always stay in [-1, 1].
        verts = self.local_vertices()
        if len(verts):
            extent = float(np.max(verts.max(0) - verts.min(0)))
            reach = float(np.max(np.abs(verts)))
            object.__setattr__(self, "max_dim", max(extent, reach))

    def local_vertices(self) -> np.ndarray:
        if not self.surfaces:
            return np.zeros((0, 3))
        return np.concatenate([s.triangles.reshape(-1, 3) for s in self.surfaces])

    def local_bounds(self):
        v = self.local_vertices()
        return v.min(0), v.max(0)

    def world_triangles(self) -> np.ndarray:
        tris = np.concatenate([s.triangles for s in self.surfaces])
        return self.pose.to_world(tris)

    def with_pose(self, pose: Pose) -> "ObjectModel":
        return dataclasses.replace(self, pose=pose)


@dataclass(frozen=True)
class Scene:
    tx: Pose
    rx: Pose
    objects: tuple
    scene_max_dim: float = field(default=0.0, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "objects", tuple(self.objects))
        if self.objects:
            verts = np.concatenate([o.pose.to_world(o.local_vertices()) for o in self.objects])
            object.__setattr__(self, "scene_max_dim", float(np.max(verts.max(0) - verts.min(0))))

    def object(self, object_id: int) -> ObjectModel:
        for o in self.objects:
            if o.id == object_id:
                return o
        raise KeyError(f"unknown object id {object_id}")

    @property
    def object_ids(self):
        return [o.id for o in self.objects]

    def with_rx(self, position, quaternion=(1.0, 0.0, 0.0, 0.0)) -> "Scene":
        return dataclasses.replace(self, rx=Pose(position, quaternion))

    def with_tx(self, position, quaternion=(1.0, 0.0, 0.0, 0.0)) -> "Scene":
        return dataclasses.replace(self, tx=Pose(position, quaternion))


def to_local_normalized(obj: ObjectModel, p_world) -> np.ndarray:
    """Map world points into the object's frame, scaled by its max dimension."""
    return obj.pose.to_local(p_world) / obj.max_dim


def from_local_normalized(obj: ObjectModel, p_bar) -> np.ndarray:
    return obj.pose.to_world(np.asarray(p_bar) * obj.max_dim)


def transform_scene(scene: Scene, edits) -> Scene:
    """Return a copy of ``scene`` with the listed objects moved to new poses.

    ``edits`` is an iterable of ``(object_id, Pose)``. Local geometry is kept.
    """
    edits = list(edits)
    known = set(scene.object_ids)
    for oid, _ in edits:
        if oid not in known:
            raise SceneError(f"transform_scene: unknown object id {oid}")
    new_pose = dict(edits)
    objs = [o.with_pose(new_pose[o.id]) if o.id in new_pose else o for o in scene.objects]
    return dataclasses.replace(scene, objects=objs)


def translate_object(scene: Scene, object_id: int, offset) -> Scene:
    o = scene.object(object_id)
    return transform_scene(scene, [(object_id, Pose(o.pose.position + np.asarray(offset, float), o.pose.quaternion))])


# --- validation -----------------------------------------------------------

def validate_scene(scene: Scene) -> Scene:
    ids = scene.object_ids
    if len(set(ids)) != len(ids):
        dup = sorted({i for i in ids if ids.count(i) > 1})
        raise SceneError(f"duplicate object ids: {dup}")
    for pose, label in [(scene.tx, "tx"), (scene.rx, "rx")]:
        _check_pose(pose, label)
    for o in scene.objects:
        where = f"object {o.id}"
        _check_pose(o.pose, where)
        if not o.surfaces:
            raise SceneError(f"{where}: no surfaces")
        for si, s in enumerate(o.surfaces):
            a, b, c = s.triangles[:, 0], s.triangles[:, 1], s.triangles[:, 2]
            area = 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)
            bad = np.flatnonzero(~(area > MIN_TRIANGLE_AREA))
            if bad.size:
                raise SceneError(f"{where}: surface {si} triangle {int(bad[0])} is degenerate (area {area[bad[0]]:.3g} m^2)")
        verts = o.local_vertices()
        for wi, w in enumerate(o.wedges):
            wwhere = f"{where}: wedge {wi}"
            for name in ("n0", "nn"):
                n = getattr(w, name)
                if abs(np.linalg.norm(n) - 1.0) > UNIT_TOL:
                    raise SceneError(f"{wwhere}: {name} is not a unit vector")
            if np.linalg.norm(w.endpoints[1] - w.endpoints[0]) <= 0:
                raise SceneError(f"{wwhere}: zero edge length")
            if np.linalg.norm(np.cross(w.n0, w.nn)) < 1e-9:
                raise SceneError(f"{wwhere}: degenerate wedge (n0 parallel to nn)")
            for e in w.endpoints:
                if np.min(np.linalg.norm(verts - e, axis=1)) > 1e-9:
                    raise SceneError(f"{wwhere}: endpoint {e.tolist()} is not a triangle vertex")
        if not o.max_dim > 0:
            raise SceneError(f"{where}: max_dim must be positive")
    return scene


def _check_pose(pose: Pose, where: str):
    if not np.all(np.isfinite(pose.position)):
        raise SceneError(f"{where}: non-finite position")
    if abs(np.linalg.norm(pose.quaternion) - 1.0) > UNIT_TOL:
        raise SceneError(f"{where}: quaternion norm {np.linalg.norm(pose.quaternion):.12g} != 1")


# --- file format ----------------------------------------------------------

def _vec(x, n, where):
    try:
        arr = np.array(x, dtype=float)
    except (TypeError, ValueError) as exc:
        raise SceneError(f"{where}: not numeric") from exc
    if arr.shape != (n,):
        raise SceneError(f"{where}: expected {n} numbers, got shape {arr.shape}")
    return arr


def _keys(d, allowed, required, where):
    if not isinstance(d, dict):
        raise SceneError(f"{where}: expected a mapping")
    unknown = set(d) - set(allowed)
    if unknown:
        raise SceneError(f"{where}: unknown field(s) {sorted(unknown)}")
    missing = set(required) - set(d)
    if missing:
        raise SceneError(f"{where}: missing field(s) {sorted(missing)}")


def _pose_from(d, where) -> Pose:
    _keys(d, ["position", "quaternion"], ["position"], where)
    q = d.get("quaternion", [1.0, 0.0, 0.0, 0.0])
    return Pose(_vec(d["position"], 3, f"{where}.position"), _vec(q, 4, f"{where}.quaternion"))


def scene_from_dict(doc) -> Scene:
    _keys(doc, ["format", "tx", "rx", "objects"], ["tx", "rx", "objects"], "scene")
    if doc.get("format", SCENE_FORMAT) != SCENE_FORMAT:
        raise SceneError(f"unsupported scene format {doc.get('format')!r}")
    objects = []
    for i, od in enumerate(doc["objects"]):
        where = f"objects[{i}]"
        _keys(od, ["id", "name", "enclosure", "pose", "surfaces", "wedges"], ["id", "pose", "surfaces"], where)
        oid = od["id"]
        if not isinstance(oid, int):
            raise SceneError(f"{where}: id must be an integer")
        where = f"object {oid}"
        surfaces = []
        for si, sd in enumerate(od["surfaces"]):
            _keys(sd, ["material", "triangles"], ["material", "triangles"], f"{where}.surfaces[{si}]")
            tris = np.array(sd["triangles"], dtype=float)
            if tris.ndim != 3 or tris.shape[1:] != (3, 3):
                raise SceneError(f"{where}.surfaces[{si}]: triangles must be a list of 3 xyz vertices")
            surfaces.append(Surface(tris, int(sd["material"])))
        wedges = []
        for wi, wd in enumerate(od.get("wedges", []) or []):
            ww = f"{where}.wedges[{wi}]"
            _keys(wd, ["endpoints", "n0", "nn", "material"], ["endpoints", "n0", "nn", "material"], ww)
            ends = np.array(wd["endpoints"], dtype=float)
            if ends.shape != (2, 3):
                raise SceneError(f"{ww}: endpoints must be two xyz points")
            wedges.append(Wedge(ends, _vec(wd["n0"], 3, f"{ww}.n0"), _vec(wd["nn"], 3, f"{ww}.nn"), int(wd["material"])))
        objects.append(ObjectModel(oid, surfaces, wedges, _pose_from(od["pose"], f"{where}.pose"),
                                   name=str(od.get("name", "")), enclosure=bool(od.get("enclosure", False))))
    scene = Scene(_pose_from(doc["tx"], "tx"), _pose_from(doc["rx"], "rx"), objects)
    return validate_scene(scene)


def _lst(a):
    return np.asarray(a, dtype=float).tolist()


def _pose_dict(p: Pose):
    return {"position": _lst(p.position), "quaternion": _lst(p.quaternion)}


def scene_to_dict(scene: Scene) -> dict:
    objs = []
    for o in scene.objects:
        d = {"id": int(o.id)}
        if o.name:
            d["name"] = o.name
        if o.enclosure:
            d["enclosure"] = True
        d["pose"] = _pose_dict(o.pose)
        d["surfaces"] = [{"material": int(s.material_id), "triangles": _lst(s.triangles)} for s in o.surfaces]
        d["wedges"] = [{"endpoints": _lst(w.endpoints), "n0": _lst(w.n0), "nn": _lst(w.nn),
                        "material": int(w.material_id)} for w in o.wedges]
        objs.append(d)
    return {"format": SCENE_FORMAT, "tx": _pose_dict(scene.tx), "rx": _pose_dict(scene.rx), "objects": objs}


def dumps_scene(scene: Scene) -> str:
    return yaml.safe_dump(scene_to_dict(scene), sort_keys=False, default_flow_style=None, width=120)


def loads_scene(text: str) -> Scene:
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise SceneError(f"scene parse error: {exc}") from exc
    return scene_from_dict(doc)


def load_scene(path) -> Scene:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise SceneError(f"cannot read scene file {path}: {exc}") from exc
    return loads_scene(text)


def save_scene(scene: Scene, path):
    Path(path).write_text(dumps_scene(scene))


# --- builders -------------------------------------------------------------

_BOX_FACES = {
    # name: (corner indices (counter-clockwise seen from outside), outward normal)
    "bottom": ((0, 2, 3, 1), (0, 0, -1)),
    "top": ((4, 5, 7, 6), (0, 0, 1)),
    "xmin": ((0, 4, 6, 2), (-1, 0, 0)),
    "xmax": ((1, 3, 7, 5), (1, 0, 0)),
    "ymin": ((0, 1, 5, 4), (0, -1, 0)),
    "ymax": ((2, 6, 7, 3), (0, 1, 0)),
}


def _box_corners(size):
    hx, hy, hz = np.asarray(size, float) / 2
    return np.array([[x, y, z] for z in (-hz, hz) for y in (-hy, hy) for x in (-hx, hx)])


def box_object(object_id, size, position, materials, *, faces=None, inward=False,
               wedges="top+vertical", wedge_material=None, name="", quaternion=(1.0, 0.0, 0.0, 0.0)) -> ObjectModel:
    """Axis-aligned box centred on its local origin.

    ``materials`` is either one material id or a dict face-name -> id.
    ``inward=True`` flips the winding so normals face the interior (rooms).
    ``wedges`` selects edges to expose for diffraction: "none" or "top+vertical".
    """
    corners = _box_corners(size)
    faces = list(_BOX_FACES) if faces is None else list(faces)
    surfaces = []
    for fname in faces:
        idx, _ = _BOX_FACES[fname]
        a, b, c, d = (corners[i] for i in idx)
        tris = [[a, b, c], [a, c, d]]
        if inward:
            tris = [[t[0], t[2], t[1]] for t in tris]
        mat = materials[fname] if isinstance(materials, dict) else materials
        surfaces.append(Surface(np.array(tris), int(mat)))
    ws = []
    if wedges == "top+vertical" and not inward:
        hx, hy, hz = np.asarray(size, float) / 2
        wm = wedge_material
        if wm is None:
            wm = materials["top"] if isinstance(materials, dict) else materials
        top = np.array([0.0, 0.0, 1.0])
        side = {"xmin": np.array([-1.0, 0, 0]), "xmax": np.array([1.0, 0, 0]),
                "ymin": np.array([0, -1.0, 0]), "ymax": np.array([0, 1.0, 0])}
        # top edges: 0-face = top, n-face = side, ordered so n0 x nn runs along the edge
        for sname, (p, q) in {
            "ymin": ((-hx, -hy, hz), (hx, -hy, hz)),
            "xmax": ((hx, -hy, hz), (hx, hy, hz)),
            "ymax": ((hx, hy, hz), (-hx, hy, hz)),
            "xmin": ((-hx, hy, hz), (-hx, -hy, hz)),
        }.items():
            n0, nn = top, side[sname]
            e = np.cross(n0, nn)
            p, q = np.array(p), np.array(q)
            if np.dot(q - p, e) < 0:
                p, q = q, p
            ws.append(Wedge(np.array([p, q]), n0, nn, int(wm)))
        # vertical edges: 0-face / n-face chosen so n0 x nn points up
        for sx, sy in [(-1, -1), (1, -1), (1, 1), (-1, 1)]:
            nx = np.array([sx, 0.0, 0.0])
            ny = np.array([0.0, sy, 0.0])
            n0, nn = (nx, ny) if np.cross(nx, ny)[2] > 0 else (ny, nx)
            side_mat = wedge_material
            if side_mat is None:
                side_mat = materials["xmin"] if isinstance(materials, dict) else materials
            ws.append(Wedge(np.array([[sx * hx, sy * hy, -hz], [sx * hx, sy * hy, hz]]), n0, nn, int(side_mat)))
    pose = Pose(np.asarray(position, float), np.asarray(quaternion, float))
    return ObjectModel(int(object_id), surfaces, ws, pose, name=name, enclosure=inward)


def floor_object(object_id, size, material, z=0.0, name="floor") -> ObjectModel:
    hx, hy = size[0] / 2, size[1] / 2
    a, b, c, d = [(-hx, -hy, 0), (hx, -hy, 0), (hx, hy, 0), (-hx, hy, 0)]
    tris = np.array([[a, b, c], [a, c, d]], dtype=float)
    return ObjectModel(int(object_id), [Surface(tris, int(material))], [], Pose.identity((0.0, 0.0, z)), name=name)


def shoebox_room(object_id, size, material, center=None, name="room") -> ObjectModel:
    size = np.asarray(size, float)
    center = size / 2 if center is None else np.asarray(center, float)
    return box_object(object_id, size, center, material, inward=True, wedges="none", name=name)
