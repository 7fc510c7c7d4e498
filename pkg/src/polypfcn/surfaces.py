"""Smooth analytic test surfaces for the SfS roundtrip, with exact log-depth gradients."""
import numpy as np

SURFACES = ("plane", "tilted", "hemisphere", "sinusoid")


def surface(name, cam, shape=(64, 64)):
    """Return (depth, (v_x, v_y)) on the camera's normalized grid; v = log depth."""
    x, y, _ = cam.grid(shape)
    zero = np.zeros_like(x)
    if name == "plane":
        return np.full_like(x, 2.0), (zero, zero)
    if name == "tilted":
        # the plane z = 1.5 + 0.5 X seen through the pinhole
        t, d0 = 0.5, 1.5
        return d0 / (1 - t * x), (t / (1 - t * x), zero)
    if name == "hemisphere":
        # front half of a sphere centred on the optical axis, covering the view
        zc, r = 4.0, 2.5
        a = x * x + y * y + 1.0
        d = (zc - np.sqrt(zc * zc - a * (zc * zc - r * r))) / a
        denom = d * a - zc
        return d, (-d * x / denom, -d * y / denom)
    if name == "sinusoid":
        amp, k = 0.1, 2 * np.pi
        d = 2.0 + amp * (np.sin(k * x) + np.sin(k * y))
        return d, (amp * k * np.cos(k * x) / d, amp * k * np.cos(k * y) / d)
    raise ValueError(f"unknown surface {name!r}; choose from {SURFACES}")
