"""Builders for the small reference scenes shipped with the package.

The YAML files under ``emtwin/data/scenes`` are generated from these
functions (``python -m emtwin.fixtures``); tests load the YAML so the file
format is exercised too.
"""
from __future__ import annotations

from importlib import resources

import numpy as np

from .scene import Pose, Scene, box_object, floor_object, load_scene, save_scene, shoebox_room, validate_scene

CONCRETE, WOOD, METAL = 1, 2, 5

DESK_ROOM = (8.0, 6.0, 3.0)
DESK_TX = (4.0, 3.0, 2.7)
DESK_RX = (1.5, 4.5, 1.2)
# object id of the furniture piece translated in the moved-object variant, and by how much
MOVED_OBJECT = 3
MOVED_OFFSET = (0.0, 1.5, 0.0)


def floor_scene() -> Scene:
    floor = floor_object(0, (20.0, 20.0), CONCRETE)
    return validate_scene(Scene(Pose.identity((0.0, 0.0, 2.0)), Pose.identity((6.0, 1.0, 1.5)), [floor]))


def shoebox_scene() -> Scene:
    room = shoebox_room(0, (6.0, 4.0, 3.0), CONCRETE)
    return validate_scene(Scene(Pose.identity((1.5, 1.2, 1.8)), Pose.identity((4.2, 2.9, 1.1)), [room]))


def desk_scene() -> Scene:
    """8 x 6 x 3 m concrete room with a two-material table, a wooden cabinet and a metal desk."""
    room = shoebox_room(0, DESK_ROOM, CONCRETE)
    sides = {"xmin": WOOD, "xmax": WOOD, "ymin": WOOD, "ymax": WOOD}
    no_bottom = ["top", "xmin", "xmax", "ymin", "ymax"]
    table = box_object(1, (1.6, 0.8, 0.75), (2.5, 2.0, 0.375), {"top": METAL, **sides},
                       faces=no_bottom, name="table")
    cabinet = box_object(2, (0.6, 0.5, 1.8), (6.8, 4.9, 0.9), WOOD, faces=no_bottom, name="cabinet")
    desk = box_object(3, (1.2, 0.6, 0.75), (5.5, 1.4, 0.375), METAL, faces=no_bottom, name="desk")
    return validate_scene(Scene(Pose.identity(DESK_TX), Pose.identity(DESK_RX), [room, table, cabinet, desk]))


def desk_moved_scene() -> Scene:
    base = desk_scene()
    o = base.object(MOVED_OBJECT)
    moved = o.with_pose(Pose(o.pose.position + np.asarray(MOVED_OFFSET), o.pose.quaternion))
    objs = [moved if x.id == MOVED_OBJECT else x for x in base.objects]
    return validate_scene(Scene(base.tx, base.rx, objs))


BUILDERS = {
    "floor": floor_scene,
    "shoebox": shoebox_scene,
    "desk": desk_scene,
    "desk_moved": desk_moved_scene,
}


def fixture_path(name: str):
    return resources.files("emtwin").joinpath(f"data/scenes/{name}.yaml")


def load_fixture(name: str) -> Scene:
    with resources.as_file(fixture_path(name)) as p:
        return load_scene(p)


def config_path(name: str):
    return resources.files("emtwin").joinpath(f"data/configs/{name}.yaml")


def write_fixtures(out_dir):
    from pathlib import Path
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, build in BUILDERS.items():
        save_scene(build(), out / f"{name}.yaml")


if __name__ == "__main__":
    import sys
    write_fixtures(sys.argv[1] if len(sys.argv) > 1 else resources.files("emtwin").joinpath("data/scenes"))
