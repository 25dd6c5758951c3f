import numpy as np
import pytest

from edgedepth.geometry import Camera
from edgedepth.synth import NoiseModel, PoseRanges, make_template, sample_instance

CAMERA = Camera(f_x=721.5, f_y=721.5, c_x=609.6, c_y=172.9)


def make_instance(seed, n_extra=6, sigma_px=0.0, sigma_3d=0.0, p_outlier=0.0,
                  z_range=(5.0, 60.0)):
    template = make_template("car_like", n_extra=n_extra, seed=0)
    noise = NoiseModel(sigma_px=sigma_px, sigma_3d=sigma_3d, p_outlier=p_outlier)
    ranges = PoseRanges(z_range=z_range)
    return sample_instance(template, ranges, CAMERA, noise, seed=seed)


@pytest.fixture
def clean_instance():
    return make_instance(seed=7)
