"""Near-light Shape-from-Shading.

Geometry: a pinhole camera at the origin looking down +z with focal length
``f`` pixels, and a point light displaced from the optical centre.  In the
near-light model the camera sits at ``(a, b, c)`` relative to the
light, i.e. the light is at ``-(a, b, c)`` in camera coordinates.  With image
coordinates normalized by the focal length, ``v = log(depth)`` satisfies

    (I / rho) * sqrt(v_x^2 + v_y^2 + J^2) * Q^(3/2) = exp(-2 v)

with Q and J given by ``q_term`` and ``j_term``.  The identity is exact for a
light at the optical centre and a first-order approximation (offsets taken
relative to ``working_distance``) otherwise.

The solver is Lax-Friedrichs fast sweeping: Gauss-Seidel updates over the
four diagonal orderings with artificial viscosity, the exp(-2v) term treated
implicitly by a scalar Newton solve at every point.
"""
from dataclasses import dataclass, field
from typing import Optional

import numba
import numpy as np

from .errors import GeometryError, ValidationError


@dataclass(frozen=True)
class CameraModel:
    f: float
    light_offset: tuple = (0.0, 0.0, 0.0)
    cx: Optional[float] = None
    cy: Optional[float] = None
    working_distance: float = 1.0

    def __post_init__(self):
        if not self.f > 0:
            raise GeometryError(f"focal length must be positive, got {self.f}")

    def grid(self, shape):
        """Normalized image coordinates (x along columns, y along rows) and the pixel pitch."""
        h, w = shape
        cx = (w - 1) / 2 if self.cx is None else self.cx
        cy = (h - 1) / 2 if self.cy is None else self.cy
        rows, cols = np.mgrid[0:h, 0:w].astype(float)
        return (cols - cx) / self.f, (rows - cy) / self.f, 1.0 / self.f

    def pde_offset(self):
        """Light offset in normalized image-plane units."""
        return tuple(float(o) / self.working_distance for o in self.light_offset)


@dataclass
class SfSConfig:
    albedo: object = 1.0  # a positive number or "estimate"
    max_sweeps: int = 1000  # sweep groups of four orderings
    tolerance: float = 1e-4
    boundary: str = "outflow"  # or "fixed-value"
    boundary_value: Optional[float] = None  # None: one unit above the largest initial v
    viscosity: Optional[tuple] = None  # fixed (sigma_x, sigma_y); None: re-estimated per group
    viscosity_safety: float = 1.2
    specular_threshold: float = 0.98
    dark_threshold: float = 1e-3
    reference_depth: float = 1.0

    def __post_init__(self):
        if not self.tolerance > 0:
            raise ValidationError("tolerance must be positive")
        if self.max_sweeps < 1:
            raise ValidationError("max_sweeps must be >= 1")
        if self.boundary not in ("fixed-value", "outflow"):
            raise ValidationError(f"unknown boundary condition {self.boundary!r}")
        if self.albedo != "estimate" and not float(self.albedo) > 0:
            raise ValidationError("albedo must be positive or 'estimate'")


@dataclass
class LogDepthField:
    v: np.ndarray
    spacing: float
    converged: bool
    residual: float
    sweeps: int
    albedo: float
    history: list = field(default_factory=list)
    degenerate: bool = False

    @property
    def depth(self):
        return np.exp(self.v)


def q_term(x, y, f, a=0.0, b=0.0, c=0.0):
    return (x + a) ** 2 + (y + b) ** 2 + (f + c) ** 2


def j_term(x, y, vx, vy, f, a=0.0, b=0.0, c=0.0):
    if np.any(np.asarray(f + c) == 0):
        raise GeometryError("f + c must be non-zero")
    return ((x + a) * vx + (y + b) * vy + 1.0) / (f + c)


def hamiltonian(x, y, vx, vy, intensity, rho, f=1.0, a=0.0, b=0.0, c=0.0):
    """Left-hand side (I/rho) sqrt(v_x^2 + v_y^2 + J^2) Q^(3/2)."""
    j = j_term(x, y, vx, vy, f, a, b, c)
    return intensity / rho * np.sqrt(vx * vx + vy * vy + j * j) * q_term(x, y, f, a, b, c) ** 1.5


def hamiltonian_residual(x, y, v, vx, vy, intensity, rho, f=1.0, a=0.0, b=0.0, c=0.0):
    """Zero where (v, grad v) explains the observed intensity."""
    return hamiltonian(x, y, vx, vy, intensity, rho, f, a, b, c) - np.exp(-2.0 * v)


def render_lambertian(depth, cam, rho=1.0, grad_v=None):
    """Intensity of a Lambertian surface lit by the point light, with inverse-square falloff.

    ``depth`` is z-depth per pixel.  Normals come from central differences of
    log-depth unless ``grad_v = (v_x, v_y)`` (w.r.t. normalized coordinates)
    is supplied.  Back-facing pixels render black.
    """
    depth = np.asarray(depth, dtype=float)
    if np.any(depth <= 0):
        raise ValidationError("depth must be strictly positive")
    x, y, h = cam.grid(depth.shape)
    if grad_v is None:
        vy, vx = np.gradient(np.log(depth), h)
    else:
        vx, vy = grad_v
    normal = np.stack([vx, vy, -(x * vx + y * vy + 1.0)])
    point = depth * np.stack([x, y, np.ones_like(x)])
    light = -np.asarray(cam.light_offset, dtype=float)[:, None, None]
    to_light = light - point
    dist2 = np.sum(to_light * to_light, axis=0)
    cos = np.sum(normal * to_light, axis=0) / (np.linalg.norm(normal, axis=0) * np.sqrt(dist2))
    return rho * np.clip(cos, 0.0, None) / dist2


def estimate_albedo(image, highlight_mask=None, reference_depth=1.0, cam=None, specular_threshold=0.98,
                    percentile=99.0):
    """Albedo that places the brightest diffuse patch fronto-parallel at ``reference_depth``.

    Uses the median over ``highlight_mask`` or, without one, over pixels at or
    above the given percentile of the non-saturated intensities.  With a
    camera the off-axis falloff Q^(3/2) is undone per pixel.
    """
    image = np.asarray(image, dtype=float)
    diffuse = image < specular_threshold
    if not diffuse.any():
        raise ValidationError("image is fully saturated; albedo cannot be estimated")
    if highlight_mask is None or not np.any(highlight_mask):
        level = np.percentile(image[diffuse], percentile)
        highlight_mask = diffuse & (image >= level)
    else:
        highlight_mask = np.asarray(highlight_mask, dtype=bool) & diffuse
        if not highlight_mask.any():
            raise ValidationError("highlight mask covers only saturated pixels")
    falloff = np.ones_like(image)
    if cam is not None:
        x, y, _ = cam.grid(image.shape)
        a, b, c = cam.pde_offset()
        falloff = q_term(x, y, 1.0, a, b, c) ** 1.5
    return float(np.median((image * falloff)[highlight_mask]) * reference_depth ** 2)


@numba.njit(cache=True, nogil=True)
def _sweep(v, coef, xm, ym, big_f, h, sx, sy, active, fill, rows, cols):
    n, m = v.shape
    alpha = (sx + sy) / h
    for i in rows:
        if i == 0 or i == n - 1:
            continue
        for j in cols:
            if j == 0 or j == m - 1:
                continue
            if fill[i, j]:
                v[i, j] = 0.25 * (v[i - 1, j] + v[i + 1, j] + v[i, j - 1] + v[i, j + 1])
                continue
            if not active[i, j]:
                continue
            p = (v[i, j + 1] - v[i, j - 1]) / (2.0 * h)
            q = (v[i + 1, j] - v[i - 1, j]) / (2.0 * h)
            jj = (xm[i, j] * p + ym[i, j] * q + 1.0) / big_f
            hg = coef[i, j] * np.sqrt(p * p + q * q + jj * jj)
            rhs = -hg + (sx * (v[i, j + 1] + v[i, j - 1]) + sy * (v[i + 1, j] + v[i - 1, j])) / (2.0 * h)
            # alpha*w - exp(-2w) = rhs has a unique root: the left side is increasing
            w = v[i, j]
            for _ in range(50):
                e = np.exp(-2.0 * w)
                step = (alpha * w - e - rhs) / (alpha + 2.0 * e)
                w -= step
                if abs(step) < 1e-14:
                    break
            v[i, j] = w


def _extrapolate(v):
    v[0, :] = 2 * v[1, :] - v[2, :]
    v[-1, :] = 2 * v[-2, :] - v[-3, :]
    v[:, 0] = 2 * v[:, 1] - v[:, 2]
    v[:, -1] = 2 * v[:, -2] - v[:, -3]


def _viscosity(v, coef, xm, ym, big_f, h, active):
    """Largest |dH/dv_x|, |dH/dv_y| over all one-sided gradient combinations of the iterate."""
    px = np.diff(v, axis=1) / h
    qy = np.diff(v, axis=0) / h
    c = coef[1:-1, 1:-1] * active[1:-1, 1:-1]
    xi, yi = xm[1:-1, 1:-1], ym[1:-1, 1:-1]
    sx = sy = 0.0
    for p in (px[1:-1, :-1], px[1:-1, 1:]):
        for q in (qy[:-1, 1:-1], qy[1:, 1:-1]):
            j = (xi * p + yi * q + 1.0) / big_f
            norm = np.sqrt(p * p + q * q + j * j)
            sx = max(sx, float(np.max(c * np.abs(p + j * xi / big_f) / norm)))
            sy = max(sy, float(np.max(c * np.abs(q + j * yi / big_f) / norm)))
    return sx, sy


def _residual(v, coef, xm, ym, big_f, h, sx, sy, active):
    """Max over solved pixels of |discrete Lax-Friedrichs Hamiltonian| / exp(-2v)."""
    c = v[1:-1, 1:-1]
    east, west = v[1:-1, 2:], v[1:-1, :-2]
    south, north = v[2:, 1:-1], v[:-2, 1:-1]
    p = (east - west) / (2 * h)
    q = (south - north) / (2 * h)
    j = (xm[1:-1, 1:-1] * p + ym[1:-1, 1:-1] * q + 1.0) / big_f
    hg = coef[1:-1, 1:-1] * np.sqrt(p * p + q * q + j * j)
    lf = hg - np.exp(-2 * c) - (sx * (east - 2 * c + west) + sy * (south - 2 * c + north)) / (2 * h)
    rel = np.abs(lf) * np.exp(2 * c)
    inner = active[1:-1, 1:-1]
    return float(rel[inner].max()) if inner.any() else 0.0


ORDERINGS = ((1, 1), (-1, 1), (-1, -1), (1, -1))


def lax_friedrichs_solve(image, cam, config=None, mask=None):
    """Recover log-depth from a grayscale image in [0, 1].

    Pixels that are saturated (>= specular threshold), too dark, or outside
    ``mask`` are excluded from the PDE and filled by neighbour averaging.
    Returns a ``LogDepthField``; ``converged`` is False if the residual did
    not drop below tolerance within ``max_sweeps`` groups.
    """
    config = config or SfSConfig()
    image = np.asarray(image, dtype=float)
    if image.ndim != 2 or min(image.shape) < 3:
        raise ValidationError(f"expected a 2-D image of at least 3x3, got shape {image.shape}")
    if np.any(image < 0) or np.any(image > 1) or not np.all(np.isfinite(image)):
        raise ValidationError("intensities must be finite and within [0, 1]")
    x, y, h = cam.grid(image.shape)
    a, b, c = cam.pde_offset()
    big_f = 1.0 + c
    if big_f == 0:
        raise GeometryError("f + c must be non-zero")

    active = (image > config.dark_threshold) & (image < config.specular_threshold)
    if mask is not None:
        active &= np.asarray(mask, dtype=bool)
    if active.sum() < 1:
        return LogDepthField(np.zeros_like(image), h, False, float("inf"), 0, float("nan"), [], degenerate=True)

    if config.albedo == "estimate":
        rho = estimate_albedo(image, reference_depth=config.reference_depth, cam=cam,
                              specular_threshold=config.specular_threshold)
    else:
        rho = float(config.albedo)

    xm, ym = x + a, y + b
    q = q_term(x, y, 1.0, a, b, c)
    coef = np.where(active, image / rho * q ** 1.5, 0.0)

    # (I/rho) Q is a lower bound of the left-hand side over all gradients, so
    # this start lies above the solution and the iterates decrease
    v = np.empty_like(image)
    v[active] = -0.5 * np.log(image[active] / rho * q[active])
    v[~active] = v[active].max()
    fill = ~active
    fixed = config.boundary == "fixed-value"
    if fixed:
        edge = config.boundary_value if config.boundary_value is not None else v[active].max() + 1.0
        v[0, :] = v[-1, :] = v[:, 0] = v[:, -1] = edge

    rows = np.arange(image.shape[0])
    cols = np.arange(image.shape[1])
    history = []
    converged = False
    for group in range(1, config.max_sweeps + 1):
        if config.viscosity is None:
            sx, sy = _viscosity(v, coef, xm, ym, big_f, h, active)
            sx, sy = config.viscosity_safety * sx, config.viscosity_safety * sy
        else:
            sx, sy = config.viscosity
        sx, sy = max(sx, 1e-12), max(sy, 1e-12)
        for dr, dc in ORDERINGS:
            _sweep(v, coef, xm, ym, big_f, h, sx, sy, active, fill, rows[::dr], cols[::dc])
            if not fixed:
                _extrapolate(v)
        res = _residual(v, coef, xm, ym, big_f, h, sx, sy, active)
        history.append(res)
        if not np.isfinite(res):
            break
        if res < config.tolerance:
            converged = True
            break
    return LogDepthField(v, h, converged, history[-1], len(history), rho, history)


def depth_to_channel(v):
    """Per-image min-max normalization of a log-depth map to [0, 1]; constant maps give 0.5."""
    v = np.asarray(v, dtype=float)
    lo, hi = v.min(), v.max()
    if hi - lo <= 0:
        return np.full_like(v, 0.5)
    return (v - lo) / (hi - lo)
