import numpy as np
import pytest
import torch

from pcdnf.dataset import ShapeSpec, add_gaussian_noise, generate_shape
from pcdnf.geometry import PointCloud, extract_patch
from pcdnf.network import PCDNF, NetConfig


@pytest.fixture(scope="session")
def model64():
    torch.manual_seed(0)
    return PCDNF(NetConfig(seed=1)).double()


@pytest.fixture(scope="session")
def noisy_sphere():
    clean = generate_shape(ShapeSpec("sphere", 3000, seed=11))
    return add_gaussian_noise(clean, 0.01, seed=12)


@pytest.fixture(scope="session")
def sphere_patches(noisy_sphere):
    cloud = noisy_sphere.noisy
    r = 0.05 * cloud.diag
    return [extract_patch(cloud, i, r, 512, seed=0) for i in (0, 7, 99, 1500)]


def planar_sample(n=400, level=0.01, seed=0, size=1.0):
    rng = np.random.default_rng(seed)
    pts = np.c_[rng.uniform(-size, size, (n, 2)), np.zeros(n)]
    normals = np.tile([0.0, 0.0, 1.0], (n, 1))
    return add_gaussian_noise(PointCloud(pts, normals), level, seed=seed + 1, name="plane")
