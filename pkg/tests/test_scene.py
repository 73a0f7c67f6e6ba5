import numpy as np
import pytest
from hypothesis import given, strategies as st

from emtwin.scene import (
    Pose, Scene, SceneError, box_object, dumps_scene, from_local_normalized, load_scene, loads_scene,
    save_scene, shoebox_room, to_local_normalized, transform_scene, translate_object,
)

SHOEBOX_TEXT = """
format: emtwin-scene/1
tx: {position: [1.0, 1.0, 1.5]}
rx: {position: [3.0, 2.0, 1.0]}
objects:
  - id: 0
    name: room
    enclosure: true
    pose: {position: [2.0, 1.5, 1.5]}
    surfaces:
{surfaces}
"""


def _shoebox_file(tmp_path, extra_area=1.0):
    room = shoebox_room(0, (4.0, 3.0, 3.0), 1)
    sc = Scene(Pose.identity((1, 1, 1.5)), Pose.identity((3, 2, 1)), [room])
    p = tmp_path / "room.yaml"
    save_scene(sc, p)
    return p


def test_load_shoebox_has_six_surfaces(tmp_path):
    sc = load_scene(_shoebox_file(tmp_path))
    assert len(sc.objects) == 1
    assert len(sc.objects[0].surfaces) == 6


def test_hand_written_file(tmp_path):
    tri = "[[0, 0, 0], [1, 0, 0], [0, 1, 0]]"
    text = SHOEBOX_TEXT.replace("{surfaces}", f"      - material: 1\n        triangles: [{tri}]")
    sc = loads_scene(text)
    assert sc.objects[0].surfaces[0].material_id == 1
    assert sc.objects[0].max_dim == pytest.approx(1.0)


def test_zero_area_triangle_is_named():
    tri = "[[0, 0, 0], [1, 0, 0], [2, 0, 0]]"
    text = SHOEBOX_TEXT.replace("{surfaces}", f"      - material: 1\n        triangles: [{tri}]")
    with pytest.raises(SceneError, match="object 0: surface 0 triangle 0"):
        loads_scene(text)


def test_duplicate_ids_rejected():
    a = box_object(1, (1, 1, 1), (0, 0, 0), 1)
    b = box_object(1, (1, 1, 1), (3, 0, 0), 1)
    text = dumps_scene(Scene(Pose.identity(), Pose.identity((5, 5, 5)), [a, b]))
    with pytest.raises(SceneError, match="duplicate object ids"):
        loads_scene(text)


def test_unknown_field_rejected():
    tri = "[[0, 0, 0], [1, 0, 0], [0, 1, 0]]"
    text = SHOEBOX_TEXT.replace("{surfaces}", f"      - material: 1\n        colour: red\n        triangles: [{tri}]")
    with pytest.raises(SceneError, match="unknown field"):
        loads_scene(text)


def test_bad_quaternion_rejected():
    text = dumps_scene(Scene(Pose.identity(), Pose.identity(), [box_object(0, (1, 1, 1), (0, 0, 0), 1)]))
    text = text.replace("quaternion: [1.0, 0.0, 0.0, 0.0]", "quaternion: [1.0, 0.1, 0.0, 0.0]", 1)
    with pytest.raises(SceneError, match="quaternion norm"):
        loads_scene(text)


def test_round_trip_bit_identical(desk, tmp_path):
    p = tmp_path / "desk.yaml"
    save_scene(desk, p)
    again = load_scene(p)
    assert dumps_scene(again) == dumps_scene(desk)
    for a, b in zip(desk.objects, again.objects):
        for sa, sb in zip(a.surfaces, b.surfaces):
            assert np.array_equal(sa.triangles, sb.triangles)
        assert np.array_equal(a.pose.quaternion, b.pose.quaternion)


def test_local_normalized_examples():
    obj = box_object(0, (2.0, 1.0, 1.0), (0, 0, 0), 1)
    assert obj.max_dim == 2.0
    assert np.allclose(to_local_normalized(obj, [1.0, 0, 0]), [0.5, 0, 0])
    moved = box_object(0, (1.0, 1.0, 1.0), (3, 4, 5), 1)
    assert np.allclose(to_local_normalized(moved, [3, 4, 5]), 0.0)


def test_local_normalized_rotation():
    # 90 deg about z: local x maps to world y, so a world offset of +y is local +x
    q = (np.cos(np.pi / 4), 0.0, 0.0, np.sin(np.pi / 4))
    obj = box_object(0, (1.0, 1.0, 1.0), (2.0, 0.0, 0.0), 1, quaternion=q)
    assert np.allclose(to_local_normalized(obj, [2.0, 1.0, 0.0]), [1.0, 0.0, 0.0], atol=1e-12)


def test_vertices_inside_unit_cube(desk):
    for o in desk.objects:
        pts = o.world_triangles().reshape(-1, 3)
        assert np.abs(to_local_normalized(o, pts)).max() <= 1.0 + 1e-12


@given(st.lists(st.floats(-5, 5), min_size=3, max_size=3), st.lists(st.floats(-1, 1), min_size=4, max_size=4))
def test_local_roundtrip(p, q):
    q = np.array(q)
    if np.linalg.norm(q) < 1e-3:
        q = np.array([1.0, 0, 0, 0])
    obj = box_object(0, (1.0, 2.0, 0.5), (1, -2, 3), 1, quaternion=q / np.linalg.norm(q))
    back = from_local_normalized(obj, to_local_normalized(obj, np.array(p)))
    assert np.allclose(back, p, atol=1e-9)


def test_transform_examples(desk):
    assert dumps_scene(transform_scene(desk, [])) == dumps_scene(desk)
    moved = translate_object(desk, 1, (1.0, 0.0, 0.0))
    assert np.allclose(moved.object(1).world_triangles(), desk.object(1).world_triangles() + [1, 0, 0])
    with pytest.raises(SceneError):
        transform_scene(desk, [(99, Pose.identity())])


def test_rotation_negates_horizontal_normals(desk):
    o = desk.object(1)
    q = (0.0, 0.0, 0.0, 1.0)   # 180 deg about z
    rot = transform_scene(desk, [(1, Pose(o.pose.position, q))]).object(1)
    n_local = np.array([[1.0, 0, 0], [0, 1.0, 0], [0.3, 0.4, np.sqrt(0.75)]])
    n_world = rot.pose.dir_to_world(n_local)
    assert np.allclose(n_world[:, :2], -n_local[:, :2], atol=1e-12)
    assert np.allclose(n_world[:, 2], n_local[:, 2], atol=1e-12)


@given(st.lists(st.floats(-3, 3), min_size=3, max_size=3), st.lists(st.floats(-1, 1), min_size=4, max_size=4))
def test_rigid_motion_preserves_areas(t, q):
    q = np.array(q)
    if np.linalg.norm(q) < 1e-3:
        q = np.array([1.0, 0, 0, 0])
    o = box_object(0, (1.0, 0.7, 0.4), (0, 0, 0), 1)
    o2 = o.with_pose(Pose(np.array(t), q / np.linalg.norm(q)))
    def areas(tris):
        return 0.5 * np.linalg.norm(np.cross(tris[:, 1] - tris[:, 0], tris[:, 2] - tris[:, 0]), axis=1)
    a, b = o.world_triangles(), o2.world_triangles()
    assert np.allclose(areas(a), areas(b), atol=1e-12)
    assert np.allclose(np.linalg.norm(a[:, 1] - a[:, 0], axis=1), np.linalg.norm(b[:, 1] - b[:, 0], axis=1), atol=1e-12)
