import math

import numpy as np

from crowdnav.geometry import Homography


def random_floor_homography(rng: np.random.Generator) -> Homography:
    """Random overhead floor-alignment homography: a similarity with small
    shear plus mild perspective, the regime a fixed hallway camera produces."""
    th = rng.uniform(-math.pi / 6, math.pi / 6)
    s = rng.uniform(0.7, 1.4)
    m = np.eye(3)
    m[:2, :2] = s * np.array(
        [[math.cos(th), -math.sin(th)], [math.sin(th), math.cos(th)]]
    )
    m[:2, :2] += rng.uniform(-0.1, 0.1, (2, 2))
    m[:2, 2] = rng.uniform(-100, 100, 2)
    m[2, :2] = rng.uniform(-1.5e-4, 1.5e-4, 2)
    return Homography.from_values(m.ravel())
