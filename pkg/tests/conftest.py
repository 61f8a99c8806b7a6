import numpy as np
import pytest

from retinamatch import nets


def tiny_teacher_spec(lk_block=False, input_size=(16, 16)):
    return nets.ModelSpec(kind="teacher", base_channels=4, descriptor_dim=8,
                          lk_block=lk_block, input_size=input_size)


def tiny_student_spec(input_size=(16, 16), dropout_rate=0.0):
    return nets.ModelSpec(kind="student", base_channels=8, descriptor_dim=8,
                          window_size=2, dropout_rate=dropout_rate,
                          input_size=input_size)


def params_as_float64(params: nets.ModelParams) -> nets.ModelParams:
    return nets.ModelParams(params.spec,
                            {k: v.astype(np.float64) for k, v in params.tensors.items()})


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def vessel_fixture_raw(size=64, seed=11) -> np.ndarray:
    """Deterministic synthetic fundus-like RGB image used by golden tests."""
    r = np.random.default_rng(seed)
    h = w = size
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    cx = cy = (size - 1) / 2.0
    disk = ((xs - cx) ** 2 + (ys - cy) ** 2) <= (0.47 * size) ** 2
    base = 0.12 + 0.03 * np.sin(xs / 6.0) * np.cos(ys / 9.0)
    vessels = np.zeros((h, w))
    for k in range(4):
        phase = r.uniform(0, np.pi)
        amp = r.uniform(6, 14)
        yc = r.uniform(0.25, 0.75) * h
        band = np.abs(ys - (yc + amp * np.sin(xs / 10.0 + phase))) < r.uniform(1.0, 2.2)
        vessels = np.maximum(vessels, band * r.uniform(0.45, 0.8))
    img = np.clip(np.where(disk, base + vessels, 0.02), 0, 1)
    rgb = np.stack([0.35 * img, img, 0.55 * img], axis=2)
    return np.clip(np.rint(rgb * 255), 0, 255).astype(np.uint8)
