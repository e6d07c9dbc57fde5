"""Shared fixtures: meshes, phantoms, robot contexts, and a cached colormap.

Expensive artifacts (phantom volumes, skin meshes, colormaps) are session
scoped: many tests read them, none mutate them.
"""

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from needletwin.geometry import RigidTransform, TriMesh
from needletwin.phantom import small_phantom, synthesize_phantom
from needletwin.planner import Target, build_colormap, default_robot_context
from needletwin.volume import extract_skin_mesh

TINY_DIMS = (48, 56, 60)
TINY_SPACING = (3.0, 3.0, 3.2)


def make_icosphere(radius=1.0, center=(0.0, 0.0, 0.0), subdivisions=3):
    """Subdivided icosahedron; good analytic sphere stand-in."""
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array(
        [
            [-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
            [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
            [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1],
        ],
        dtype=float,
    )
    verts /= np.linalg.norm(verts, axis=1)[:, None]
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    verts = list(verts)
    cache = {}

    def midpoint(i, j):
        key = (min(i, j), max(i, j))
        if key not in cache:
            m = (verts[i] + verts[j]) / 2.0
            m /= np.linalg.norm(m)
            cache[key] = len(verts)
            verts.append(m)
        return cache[key]

    for _ in range(subdivisions):
        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces
    v = np.array(verts) * radius + np.asarray(center, dtype=float)
    return TriMesh(v, np.array(faces, dtype=np.int64))


def random_rigid_transform(rng, from_frame="B", to_frame="CT", trans_scale=100.0):
    rot = Rotation.random(random_state=np.random.RandomState(rng.integers(2**31))).as_matrix()
    t = rng.normal(0.0, trans_scale, size=3)
    return RigidTransform(rot, t, from_frame, to_frame)


@pytest.fixture(scope="session")
def icosphere():
    return make_icosphere(radius=1.0, subdivisions=3)


@pytest.fixture(scope="session")
def tiny_case():
    """Phantom (no grid) + skin mesh + robot context used across modules."""
    spec = small_phantom(with_grid=False)
    volume, truth = synthesize_phantom(spec, TINY_DIMS, TINY_SPACING, seed=1)
    skin = extract_skin_mesh(volume)
    context = default_robot_context(skin)
    context.scene.skin_index()
    return {"spec": spec, "volume": volume, "truth": truth, "skin": skin, "context": context}


@pytest.fixture(scope="session")
def tiny_target(tiny_case):
    center = tiny_case["truth"].organ_centers["target_organ"]
    return Target("t1", center, "target_organ")


@pytest.fixture(scope="session")
def tiny_colormap(tiny_case, tiny_target):
    """Single shared colormap build (the expensive planner artifact)."""
    return build_colormap(
        tiny_target,
        tiny_case["volume"],
        tiny_case["skin"],
        tiny_case["context"],
        workers=1,
    )


@pytest.fixture(scope="session")
def grid_case():
    """Fine-spacing phantom with the marker grid for detection tests."""
    spec = small_phantom(with_grid=True)
    volume, truth = synthesize_phantom(spec, (100, 120, 100), (1.6, 1.6, 1.6), seed=3)
    return {"spec": spec, "volume": volume, "truth": truth}
