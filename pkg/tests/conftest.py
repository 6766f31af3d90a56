import pytest

from admgs.synth import FrameSpec, Lighting, Primitive, SyntheticSceneSpec, generate_dataset, suite


def tiny_two_traversal_spec() -> SyntheticSceneSpec:
    prims = [
        Primitive("plane", {"x": [-1.5, 1.5], "y": [-1.5, 1.5], "z": 0.0}, (0.5, 0.45, 0.35), name="ground"),
        Primitive("box", {"min": [-0.3, -0.3, 0.0], "max": [0.3, 0.3, 0.6]}, (0.2, 0.5, 0.8), name="box"),
    ]
    lights = [Lighting((0.0, -0.6, 0.8), (0.7, 0.7, 0.7), (0.3, 0.3, 0.3)),
              Lighting((0.6, 0.0, 0.8), (0.6, 0.55, 0.5), (0.3, 0.3, 0.3))]
    frames = [
        [FrameSpec((2.5 * (i - 1) * 0.5 + 0.2 * m, -2.8, 2.0), (0, 0, 0.2), 0.1 * i, "test" if i == 1 else "train")
         for i in range(3)]
        for m in range(2)
    ]
    return SyntheticSceneSpec("tiny-2trav", prims, lights, frames, 24, 18, 22.0, init_points=150, seed=2)


@pytest.fixture(scope="session")
def sanity_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("sanity")
    generate_dataset(suite("sanity-1splat"), root)
    return root


@pytest.fixture(scope="session")
def tiny_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    generate_dataset(tiny_two_traversal_spec(), root)
    return root
