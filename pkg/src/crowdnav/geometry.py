"""Planar camera geometry for overhead-view rectification.

Maps raw wide-angle footage of a flat floor into a top-down metric frame:
Brown-Conrady lens distortion (3 radial + 2 tangential coefficients), a
plane-to-plane homography fitted by gradient descent on point
correspondences, inverse-mapped bilinear warping, least-squares recovery
of the optical-center foot point from imaged vertical lines, and
similar-triangles height correction for elevated targets.

Points are (x, y) tuples of pixels unless a docstring says otherwise.
All functions are pure.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

Point = tuple[float, float]


class UndistortDivergedError(ValueError):
    """Fixed-point undistortion failed to converge (point outside the
    invertible region or pathological coefficients)."""


class PointAtInfinityError(ValueError):
    """Homography denominator vanished: the point maps to infinity."""


class DegenerateFitError(ValueError):
    """Correspondences cannot determine a homography (too few points,
    duplicates, or collinear configurations)."""


class GdDivergedError(ValueError):
    """Gradient descent produced a non-finite loss (learning rate too
    large for the given correspondences)."""


class SingularHomographyError(ValueError):
    """Homography is not invertible."""


class NoIntersectionError(ValueError):
    """Lines are mutually parallel; no intersection point exists."""


class InvalidHeightError(ValueError):
    """Target height must satisfy 0 <= h_target < h_camera."""


@dataclass(frozen=True)
class DistortionCoeffs:
    """Brown-Conrady lens model: k1, k2, k3 radial, p1, p2 tangential."""

    k1: float = 0.0
    k2: float = 0.0
    k3: float = 0.0
    p1: float = 0.0
    p2: float = 0.0

    def __post_init__(self):
        for name in ("k1", "k2", "k3", "p1", "p2"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"distortion coefficient {name} must be finite")


ZERO_DISTORTION = DistortionCoeffs()


def distort(p: Point, c: DistortionCoeffs) -> Point:
    """Apply lens distortion to a point given relative to the optical center.

    Radial and tangential terms are composed additively (the combined
    Brown-Conrady form).
    """
    x, y = p
    r2 = x * x + y * y
    radial = 1.0 + r2 * (c.k1 + r2 * (c.k2 + r2 * c.k3))
    tx = 2.0 * c.p1 * x * y + c.p2 * (r2 + 2.0 * x * x)
    ty = c.p1 * (r2 + 2.0 * y * y) + 2.0 * c.p2 * x * y
    return (x * radial + tx, y * radial + ty)


def undistort(
    p: Point,
    c: DistortionCoeffs,
    tol: float = 1e-8,
    max_iter: int = 100,
) -> Point:
    """Invert `distort` by fixed-point iteration q <- p - (distort(q) - q).

    Returns q with |distort(q) - p| <= tol. Raises UndistortDivergedError
    if the iteration has not converged after max_iter steps.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    px, py = p
    qx, qy = px, py
    for _ in range(max_iter):
        dx, dy = distort((qx, qy), c)
        ex, ey = dx - px, dy - py
        if math.hypot(ex, ey) <= tol:
            return (qx, qy)
        qx -= ex
        qy -= ey
    raise UndistortDivergedError(
        f"undistortion did not reach tol={tol} within {max_iter} iterations"
    )


@dataclass(frozen=True)
class Homography:
    """3x3 projective map, row-major entries, normalized so h[8] == 1."""

    h: tuple[float, float, float, float, float, float, float, float, float]

    def __post_init__(self):
        if len(self.h) != 9:
            raise ValueError("homography needs 9 entries")
        if any(not math.isfinite(v) for v in self.h):
            raise ValueError("homography entries must be finite")
        if self.h[8] != 1.0:
            raise ValueError("homography must be normalized with h9 == 1")
        if abs(np.linalg.det(self.as_matrix())) <= 1e-12:
            raise SingularHomographyError("homography is singular")

    @classmethod
    def from_values(cls, values) -> "Homography":
        """Build from any 9 values, rescaling so the last entry is 1."""
        v = [float(x) for x in values]
        if len(v) != 9:
            raise ValueError("homography needs 9 entries")
        if abs(v[8]) <= 1e-12:
            raise SingularHomographyError("cannot normalize: h9 is zero")
        return cls(tuple(x / v[8] for x in v))

    @classmethod
    def identity(cls) -> "Homography":
        return cls((1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0))

    def as_matrix(self) -> np.ndarray:
        return np.array(self.h, dtype=float).reshape(3, 3)

    def inverse(self) -> "Homography":
        m = self.as_matrix()
        if abs(np.linalg.det(m)) <= 1e-12:
            raise SingularHomographyError("homography is singular")
        return Homography.from_values(np.linalg.inv(m).ravel())


def homography_apply(h: Homography, p: Point) -> Point:
    """Map a point through the homography (projective division)."""
    x, y = p
    v = h.h
    den = v[6] * x + v[7] * y + v[8]
    if abs(den) <= 1e-12:
        raise PointAtInfinityError(f"point {p} maps to infinity")
    return (
        (v[0] * x + v[1] * y + v[2]) / den,
        (v[3] * x + v[4] * y + v[5]) / den,
    )


@dataclass(frozen=True)
class GdConfig:
    """Gradient-descent settings for homography fitting."""

    iterations: int = 80_000
    learning_rate: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")


# Descent stops early once the normalized-frame loss is numerically
# converged; `iterations` remains the hard budget.
_LOSS_FLOOR = 1e-24
_STALL_LIMIT = 200
_STALL_REL = 1e-12


def _check_not_degenerate(pts: np.ndarray) -> None:
    n = len(pts)
    scale2 = max(float(np.max(np.abs(pts))) ** 2, 1e-12)
    for i in range(n - 2):
        for j in range(i + 1, n - 1):
            dij = pts[j] - pts[i]
            for k in range(j + 1, n):
                dik = pts[k] - pts[i]
                cross = dij[0] * dik[1] - dij[1] * dik[0]
                if abs(cross) <= 1e-9 * scale2:
                    raise DegenerateFitError(
                        f"source points {i}, {j}, {k} are collinear or coincident"
                    )


def _normalization(pts: np.ndarray) -> tuple[np.ndarray, float]:
    """Centroid and RMS radius used to condition the fit."""
    mu = pts.mean(axis=0)
    rms = math.sqrt(float(np.mean(np.sum((pts - mu) ** 2, axis=1))))
    if rms <= 1e-12:
        raise DegenerateFitError("points are coincident")
    return mu, rms


def homography_fit(
    src: list[Point],
    dst: list[Point],
    cfg: GdConfig,
) -> tuple[Homography, float]:
    """Fit dst ~ H(src) by full-batch gradient descent on the summed
    per-coordinate squared reprojection error.

    h9 is pinned to 1 (8 free parameters). Points are shifted/scaled to
    zero-mean unit-RMS before descent and the result is de-normalized.
    Returns the homography and its final loss in original pixel units.
    Deterministic for a fixed config.
    """
    if len(src) != len(dst):
        raise DegenerateFitError("src and dst must have equal length")
    if len(src) < 4:
        raise DegenerateFitError("need at least 4 correspondences")
    s = np.asarray(src, dtype=float)
    d = np.asarray(dst, dtype=float)
    _check_not_degenerate(s)

    mu_s, rms_s = _normalization(s)
    mu_d, rms_d = _normalization(d)
    xs, ys = (s[:, 0] - mu_s[0]) / rms_s, (s[:, 1] - mu_s[1]) / rms_s
    xd, yd = (d[:, 0] - mu_d[0]) / rms_d, (d[:, 1] - mu_d[1]) / rms_d

    rng = np.random.default_rng(cfg.seed)
    h = np.array([1.0, 0, 0, 0, 1.0, 0, 0, 0])
    h += rng.uniform(-1e-3, 1e-3, size=8)

    lr = cfg.learning_rate
    best = math.inf
    stall = 0
    for _ in range(cfg.iterations):
        den = h[6] * xs + h[7] * ys + 1.0
        inv = 1.0 / den
        u = (h[0] * xs + h[1] * ys + h[2]) * inv
        v = (h[3] * xs + h[4] * ys + h[5]) * inv
        rx = u - xd
        ry = v - yd
        loss = float(rx @ rx + ry @ ry)
        if not math.isfinite(loss):
            raise GdDivergedError("homography descent diverged; reduce learning_rate")
        if loss <= _LOSS_FLOOR:
            break
        if loss < best * (1.0 - _STALL_REL):
            best = loss
            stall = 0
        else:
            stall += 1
            if stall >= _STALL_LIMIT:
                break
        a = 2.0 * rx * inv
        b = 2.0 * ry * inv
        c = a * u + b * v
        h -= lr * np.array(
            [a @ xs, a @ ys, a.sum(), b @ xs, b @ ys, b.sum(), -(c @ xs), -(c @ ys)]
        )

    hn = np.array([[h[0], h[1], h[2]], [h[3], h[4], h[5]], [h[6], h[7], 1.0]])
    t_src = np.array(
        [[1 / rms_s, 0, -mu_s[0] / rms_s], [0, 1 / rms_s, -mu_s[1] / rms_s], [0, 0, 1]]
    )
    t_dst_inv = np.array([[rms_d, 0, mu_d[0]], [0, rms_d, mu_d[1]], [0, 0, 1]])
    full = t_dst_inv @ hn @ t_src
    if abs(full[2, 2]) <= 1e-12:
        raise DegenerateFitError("fitted homography cannot be normalized (h9 ~ 0)")
    fitted = Homography.from_values(full.ravel())

    final_loss = 0.0
    for (sx, sy), (dx_, dy_) in zip(src, dst):
        px, py = homography_apply(fitted, (sx, sy))
        final_loss += (px - dx_) ** 2 + (py - dy_) ** 2
    return fitted, final_loss


@dataclass
class Image:
    """Row-major 8-bit grayscale image."""

    width: int
    height: int
    pixels: np.ndarray  # shape (height, width), dtype uint8

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.uint8)
        if self.pixels.shape != (self.height, self.width):
            raise ValueError(
                f"pixel buffer shape {self.pixels.shape} does not match "
                f"{self.height}x{self.width}"
            )

    @classmethod
    def from_array(cls, a: np.ndarray) -> "Image":
        a = np.asarray(a, dtype=np.uint8)
        return cls(width=a.shape[1], height=a.shape[0], pixels=a)


def warp_image(img: Image, h: Homography, out_size: tuple[int, int]) -> Image:
    """Warp an image through a homography into a (width, height) output.

    Each output pixel is inverse-mapped through h and bilinearly sampled;
    samples falling outside the source are zero. Pixel centers sit on
    integer coordinates.
    """
    ow, oh = out_size
    g = h.inverse().h
    xs, ys = np.meshgrid(np.arange(ow, dtype=float), np.arange(oh, dtype=float))
    den = g[6] * xs + g[7] * ys + g[8]
    valid = np.abs(den) > 1e-12
    safe_den = np.where(valid, den, 1.0)
    sx = (g[0] * xs + g[1] * ys + g[2]) / safe_den
    sy = (g[3] * xs + g[4] * ys + g[5]) / safe_den

    x0 = np.floor(sx).astype(np.int64)
    y0 = np.floor(sy).astype(np.int64)
    fx = sx - x0
    fy = sy - y0
    acc = np.zeros((oh, ow), dtype=float)
    pix = img.pixels.astype(float)
    corners = (
        (0, 0, (1 - fx) * (1 - fy)),
        (1, 0, fx * (1 - fy)),
        (0, 1, (1 - fx) * fy),
        (1, 1, fx * fy),
    )
    for dx, dy, w in corners:
        xi = x0 + dx
        yi = y0 + dy
        m = valid & (xi >= 0) & (xi < img.width) & (yi >= 0) & (yi < img.height)
        acc[m] += pix[yi[m], xi[m]] * w[m]
    return Image.from_array(np.clip(np.rint(acc), 0, 255))


def optical_center_from_lines(lines: list[tuple[Point, Point]]) -> Point:
    """Least-squares intersection of lines given by endpoint pairs.

    Minimizes the summed squared perpendicular distance to every line.
    Raises NoIntersectionError when the lines are mutually parallel
    (within 1e-6 rad) and an intersection is undefined.
    """
    if len(lines) < 2:
        raise ValueError("need at least 2 lines")
    normals = []
    offsets = []
    angles = []
    for (p1, p2) in lines:
        dx, dy = p2[0] - p1[0], p2[1] - p1[1]
        norm = math.hypot(dx, dy)
        if norm <= 1e-12:
            raise ValueError(f"line endpoints coincide: {p1}")
        dx, dy = dx / norm, dy / norm
        normals.append((-dy, dx))
        offsets.append(-dy * p1[0] + dx * p1[1])
        angles.append(math.atan2(dy, dx) % math.pi)

    a0 = angles[0]
    spread = 0.0
    for a in angles[1:]:
        diff = abs(a - a0) % math.pi
        spread = max(spread, min(diff, math.pi - diff))
    if spread < 1e-6:
        raise NoIntersectionError("lines are parallel; no intersection")

    n = np.asarray(normals)
    c = np.asarray(offsets)
    ata = n.T @ n
    atb = n.T @ c
    if abs(np.linalg.det(ata)) <= 1e-18:
        raise NoIntersectionError("lines are parallel; no intersection")
    x = np.linalg.solve(ata, atb)
    return (float(x[0]), float(x[1]))


def height_correct(p_hat: Point, h_target: float, h_camera: float) -> Point:
    """Project an imaged point of an elevated target down to the floor.

    Input coordinates are relative to the optical-center foot point.
    Elevated points image outward from that point, so the true floor
    position is the imaged one scaled by (1 - h_target / h_camera).
    """
    if h_camera <= 0:
        raise InvalidHeightError("camera height must be positive")
    if h_target < 0 or h_target >= h_camera:
        raise InvalidHeightError(
            f"target height {h_target} must be in [0, {h_camera})"
        )
    f = 1.0 - h_target / h_camera
    return (p_hat[0] * f, p_hat[1] * f)
