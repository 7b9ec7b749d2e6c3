"""Scene builders shared by the test modules."""
import numpy as np

from lanesmith.scene import Scene
from lanesmith.scene.geometry import resample_polyline


def straight(p0, p1):
    return resample_polyline(np.array([p0, p1], dtype=float), 20)


def make_scene(lanes, succ_edges=(), left_edges=(), objects=None, classes=None, partitioned=False):
    lanes = np.array(lanes, dtype=float)
    n = len(lanes)
    succ = np.zeros((n, n), dtype=bool)
    left = np.zeros((n, n), dtype=bool)
    for i, j in succ_edges:
        succ[i, j] = True
    for i, j in left_edges:
        left[i, j] = True
    if objects is None:
        objects = [[0.0, 0.0, 5.0, 1.0, 0.0, 4.5, 2.0]]
        classes = [0]
    return Scene(
        lanes=lanes, lane_types=np.zeros(n, dtype=int), successor=succ, left=left,
        objects=np.array(objects, dtype=float).reshape(-1, 7), object_classes=np.array(classes, dtype=int),
        partitioned=partitioned,
    )


def random_lane_scene(rng, n_lanes=None, partitioned=False):
    """Random straight/curved lanes inside the FOV, with random successor edges."""
    n = n_lanes or int(rng.integers(2, 12))
    lanes = []
    for _ in range(n):
        a = rng.uniform(-30, 30, 2)
        b = rng.uniform(-30, 30, 2)
        if partitioned:
            side = rng.choice([-1.0, 1.0])
            a[0], b[0] = side * abs(a[0]) + side * 0.1, side * abs(b[0]) + side * 0.1
        mid = (a + b) / 2 + rng.normal(0, 3, 2)
        if partitioned:
            mid[0] = side * max(abs(mid[0]), 0.1)
        lanes.append(resample_polyline(np.array([a, mid, b]), 20))
    succ = [(i, j) for i in range(n) for j in range(n) if i != j and rng.random() < 0.15]
    n_obj = int(rng.integers(1, 8))
    objs = np.column_stack([
        rng.uniform(-30, 30, n_obj), rng.uniform(-30, 30, n_obj), rng.uniform(0, 15, n_obj),
        *(lambda th: (np.cos(th), np.sin(th)))(rng.uniform(-np.pi, np.pi, n_obj)),
        rng.uniform(3.5, 5.5, n_obj), rng.uniform(1.6, 2.2, n_obj),
    ])
    classes = [0] + [1] * (n_obj - 1)
    return make_scene(lanes, succ, objects=objs, classes=classes, partitioned=partitioned)
