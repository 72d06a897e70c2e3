"""Linear measurement operators y = A(x) + n with exact adjoints.

Images are (H, W) or batched (B, H, W) arrays.  Convolutions use zero
padding and downsampling is area averaging, so every operator is a plain
matrix with a clean transpose.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import diffcore as dc
from .diffcore import Tape, Var

KINDS = ("superres", "boxinpaint", "gaussblur", "motionblur")
DEFAULT_NOISE = 0.01


def gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    if size % 2 == 0 or size < 1:
        raise ValueError(f"kernel size must be odd and positive, got {size}")
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    r = np.arange(size) - size // 2
    g = np.exp(-0.5 * (r / sigma) ** 2)
    k = np.outer(g, g)
    return k / k.sum()


def gaussian_kernel_size(sigma: float) -> int:
    """Smallest odd support covering +-3 sigma, at least 9."""
    return max(9, 2 * math.ceil(3 * sigma) + 1)


def _bresenham(r0: int, c0: int, r1: int, c1: int) -> list[tuple[int, int]]:
    pts = []
    dr, dc_ = abs(r1 - r0), abs(c1 - c0)
    sr, sc = (1 if r1 >= r0 else -1), (1 if c1 >= c0 else -1)
    err = dc_ - dr
    r, c = r0, c0
    while True:
        pts.append((r, c))
        if r == r1 and c == c1:
            return pts
        e2 = 2 * err
        if e2 > -dr:
            err -= dr
            c += sc
        if e2 < dc_:
            err += dc_
            r += sr


def make_motion_kernel(seed: int, length: int = 7, angle_free: bool = True,
                       intensity: float = 0.5) -> np.ndarray:
    """Line-shaped blur kernel.

    A Bresenham segment through the centre, of half-length
    ``min(intensity * (length - 1), (length - 1) / 2)`` at a seeded angle
    (horizontal if ``angle_free`` is False), smoothed by a Gaussian of width
    ``intensity`` and renormalized.  Intensity 0 gives the identity kernel.
    """
    if length < 3 or length % 2 == 0:
        raise ValueError(f"motion kernel length must be odd and >= 3, got {length}")
    if intensity < 0:
        raise ValueError("intensity must be non-negative")
    rng = np.random.default_rng(seed)
    theta = rng.uniform(0.0, math.pi) if angle_free else 0.0
    c = length // 2
    half = min(intensity * (length - 1), (length - 1) / 2)
    dr, dcol = int(round(half * math.sin(theta))), int(round(half * math.cos(theta)))
    k = np.zeros((length, length))
    for r, col in _bresenham(c - dr, c - dcol, c + dr, c + dcol):
        k[r, col] = 1.0
    if intensity > 0:
        k = ndimage.gaussian_filter(k, sigma=intensity, mode="constant", truncate=3.0)
    return k / k.sum()


def box_mask(image_size: int, size: int, origin: tuple[int, int] | None = None) -> np.ndarray:
    if origin is None:
        o = (image_size - size) // 2
        origin = (o, o)
    r, c = origin
    if size < 1 or r < 0 or c < 0 or r + size > image_size or c + size > image_size:
        raise ValueError("box does not fit in the image")
    m = np.ones((image_size, image_size))
    m[r:r + size, c:c + size] = 0.0
    return m


@dataclass
class DegradationOp:
    """A linear operator plus measurement noise level.

    kind-specific parameters: ``factor`` (superres), ``mask`` (boxinpaint),
    ``kernel`` (gaussblur, motionblur).
    """

    kind: str
    image_size: int = 32
    noise_std: float = DEFAULT_NOISE
    factor: int = 1
    mask: np.ndarray | None = None
    kernel: np.ndarray | None = None
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown degradation {self.kind!r}; choose from {KINDS}")
        if self.noise_std < 0:
            raise ValueError("noise_std must be non-negative")
        if self.kind == "superres":
            if self.factor < 1 or self.image_size % self.factor:
                raise ValueError(f"factor {self.factor} does not divide {self.image_size}")
        elif self.kind == "boxinpaint":
            if self.mask is None or self.mask.shape != (self.image_size,) * 2:
                raise ValueError("boxinpaint needs an image-sized mask")
        else:
            if self.kernel is None:
                raise ValueError(f"{self.kind} needs a kernel")
            if self.kernel.shape[0] > self.image_size or self.kernel.shape[1] > self.image_size:
                raise ValueError(f"kernel {self.kernel.shape} larger than image {self.image_size}")

    # -- shapes ------------------------------------------------------------

    @property
    def image_shape(self) -> tuple[int, int]:
        return (self.image_size, self.image_size)

    @property
    def measurement_shape(self) -> tuple[int, int]:
        if self.kind == "superres":
            s = self.image_size // self.factor
            return (s, s)
        return self.image_shape

    def _batch(self, x, shape):
        x = np.asarray(x, dtype=np.float64)
        if x.shape == shape:
            return x[None], True
        if x.ndim == 3 and x.shape[1:] == shape:
            return x, False
        raise ValueError(f"expected shape {shape} or (B, *{shape}), got {x.shape}")

    # -- linear map --------------------------------------------------------

    def forward_clean(self, x) -> np.ndarray:
        xb, single = self._batch(x, self.image_shape)
        if self.kind == "superres":
            f = self.factor
            b, h, w = xb.shape
            out = xb.reshape(b, h // f, f, w // f, f).mean(axis=(2, 4))
        elif self.kind == "boxinpaint":
            out = xb * self.mask
        else:
            out = ndimage.convolve(xb, self.kernel[None], mode="constant", cval=0.0)
        return out[0] if single else out

    def adjoint(self, y) -> np.ndarray:
        yb, single = self._batch(y, self.measurement_shape)
        if self.kind == "superres":
            f = self.factor
            out = np.repeat(np.repeat(yb, f, axis=1), f, axis=2) / (f * f)
        elif self.kind == "boxinpaint":
            out = yb * self.mask
        else:
            out = ndimage.correlate(yb, self.kernel[None], mode="constant", cval=0.0)
        return out[0] if single else out

    def apply(self, x, rng: np.random.Generator | None = None) -> np.ndarray:
        """y = A(x) + n; noiseless when rng is None or noise_std == 0."""
        x = np.asarray(x, dtype=np.float64)
        if np.any(x < 0) or np.any(x > 1):
            raise ValueError("images must lie in [0, 1]")
        y = self.forward_clean(x)
        if rng is not None and self.noise_std > 0:
            y = y + self.noise_std * rng.standard_normal(y.shape)
        return y

    def forward(self, tape: Tape, x: Var) -> Var:
        """A(x) on the tape for a (B, H, W) Var."""
        if self.kind == "superres":
            return dc.avg_pool(x, self.factor)
        if self.kind == "boxinpaint":
            return dc.apply_mask(x, self.mask)
        return dc.conv2d(x, self.kernel)

    def proxy_image(self, y) -> np.ndarray:
        """Image-shaped version of a measurement (nearest upsampling for SR)."""
        yb, single = self._batch(y, self.measurement_shape)
        if self.kind == "superres":
            f = self.factor
            yb = np.repeat(np.repeat(yb, f, axis=1), f, axis=2)
        return yb[0] if single else yb

    def describe(self) -> dict:
        d = {"kind": self.kind, "image_size": self.image_size, "noise_std": self.noise_std}
        d.update(self.params)
        return d


def superres(factor: int = 4, image_size: int = 32, noise_std: float = DEFAULT_NOISE) -> DegradationOp:
    return DegradationOp("superres", image_size, noise_std, factor=factor,
                         params={"factor": factor})


def boxinpaint(size: int = 16, image_size: int = 32, origin=None,
               noise_std: float = DEFAULT_NOISE) -> DegradationOp:
    return DegradationOp("boxinpaint", image_size, noise_std,
                         mask=box_mask(image_size, size, origin), params={"box": size})


def gaussblur(sigma: float = 1.5, size: int | None = None, image_size: int = 32,
              noise_std: float = DEFAULT_NOISE) -> DegradationOp:
    size = gaussian_kernel_size(sigma) if size is None else size
    return DegradationOp("gaussblur", image_size, noise_std, kernel=gaussian_kernel(size, sigma),
                         params={"sigma": sigma, "kernel_size": size})


def motionblur(seed: int = 0, length: int = 7, intensity: float = 0.5, image_size: int = 32,
               noise_std: float = DEFAULT_NOISE) -> DegradationOp:
    return DegradationOp("motionblur", image_size, noise_std,
                         kernel=make_motion_kernel(seed, length, True, intensity),
                         params={"seed": seed, "length": length, "intensity": intensity})


def make_operator(task: str, image_size: int = 32, noise_std: float = DEFAULT_NOISE,
                  **kw) -> DegradationOp:
    """Build an operator by task name with the desk-scale defaults."""
    builders = {
        "superres": superres,
        "boxinpaint": boxinpaint,
        "gaussblur": gaussblur,
        "motionblur": motionblur,
    }
    if task not in builders:
        raise ValueError(f"unknown task {task!r}; choose from {sorted(builders)}")
    return builders[task](image_size=image_size, noise_std=noise_std, **kw)
