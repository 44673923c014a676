"""Adversarial perturbation sets and their samplers.

A perturbation set is a base image plus noise directions with a coefficient
box: adversarial images are x + sum_i lambda(i) * noise_i. Three builders
are provided: the darkening adversary (dim bright pixels channel-wise), and
global l2 / l-inf balls whose noise basis is the identity and therefore
never materialized. Perturbed intensities are deliberately not clamped to
[0, 1]: the darkening construction is in-range by design, and clamping
would destroy the affine structure the surrogate model relies on.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .model import ImageTensor

__all__ = [
    "PerturbationSpec",
    "apply",
    "apply_batch",
    "build_darkening",
    "build_global_ball",
    "sample",
    "sample_lambdas",
    "spec_manifest",
    "DEFAULT_INTENSITY_THRESHOLD",
]

UNIFORM_BOX = "uniform-box"
UNIFORM_L2_BALL = "uniform-l2-ball"
UNIFORM_LINF_BALL = "uniform-linf-ball"

DEFAULT_INTENSITY_THRESHOLD = 150.0 / 255.0


@dataclass(frozen=True)
class PerturbationSpec:
    """Immutable description of the input set I and its sampling law.

    ``noise_matrix`` holds the r noise images as rows, flattened; ``None``
    means the implicit identity basis of a global ball (r = n0). Bounds are
    the componentwise coefficient box; for balls the box is the enclosing
    [-e, e] cube and membership additionally requires the norm constraint.
    """

    base_image: ImageTensor
    noise_matrix: Optional[np.ndarray]
    lambda_lower: np.ndarray
    lambda_upper: np.ndarray
    distribution: str
    radius: Optional[float] = None
    intensity_threshold: Optional[float] = None
    min_darkening: Optional[float] = None
    selected_pixels: Optional[tuple] = None
    selection_seed: Optional[int] = None

    def __post_init__(self):
        if self.lambda_lower.shape != self.lambda_upper.shape:
            raise ValueError("lambda bound shapes differ")
        if np.any(self.lambda_lower > self.lambda_upper):
            raise ValueError("lambda_lower must be <= lambda_upper componentwise")
        if self.noise_matrix is not None:
            if self.noise_matrix.shape != (self.dim, self.base_image.size):
                raise ValueError("noise matrix shape disagrees with base image")

    @property
    def dim(self) -> int:
        """Number of perturbation coefficients r."""
        return self.lambda_lower.shape[0]

    def contains(self, lam: np.ndarray, atol: float = 0.0) -> bool:
        """Membership predicate of the coefficient set (box or ball)."""
        lam = np.asarray(lam, dtype=np.float64)
        if self.distribution == UNIFORM_L2_BALL:
            return bool(np.linalg.norm(lam) <= self.radius + atol)
        if self.distribution == UNIFORM_LINF_BALL:
            return bool(np.max(np.abs(lam)) <= self.radius + atol)
        return bool(
            np.all(lam >= self.lambda_lower - atol)
            and np.all(lam <= self.lambda_upper + atol)
        )


def apply(spec: PerturbationSpec, lam: np.ndarray) -> ImageTensor:
    """Adversarial image x + sum_i lambda(i) noise_i for one coefficient
    vector inside the box; raw superposition, no clamping."""
    lam = np.asarray(lam, dtype=np.float64)
    if lam.shape != (spec.dim,):
        raise ValueError(f"lambda must have shape ({spec.dim},), got {lam.shape}")
    if np.any(lam < spec.lambda_lower) or np.any(lam > spec.lambda_upper):
        raise ValueError("lambda outside the coefficient box")
    flat = apply_batch(spec, lam[None, :])[0]
    img = spec.base_image
    return ImageTensor(img.height, img.width, img.channels, flat)


def apply_batch(spec: PerturbationSpec, lams: np.ndarray) -> np.ndarray:
    """Vectorized superposition: (k, r) coefficients -> (k, n0) flat images."""
    base = spec.base_image.data
    if spec.noise_matrix is None:
        return base[None, :] + lams
    return base[None, :] + lams @ spec.noise_matrix


def build_darkening(
    x: ImageTensor,
    pixel_fraction: float,
    intensity_threshold: float = DEFAULT_INTENSITY_THRESHOLD,
    min_darkening: float = 5.0 / 255.0,
    rng_seed: int = 0,
) -> PerturbationSpec:
    """Darkening adversary: dim randomly chosen bright pixels channel-wise.

    Eligible pixels exceed ``intensity_threshold`` in every channel;
    ceil(pixel_fraction * #eligible) of them are drawn without replacement
    from the seeded generator, in sorted row-major order for
    reproducibility. Each selected (pixel, channel) pair yields one noise
    image equal to minus that channel value at that pixel, so the
    coefficient 1 blacks the channel out (full darkening) while the lower
    bound dims it by exactly ``min_darkening``.
    """
    if not (0.0 < pixel_fraction <= 1.0):
        raise ValueError(f"pixel_fraction must lie in (0, 1], got {pixel_fraction!r}")
    if min_darkening <= 0:
        raise ValueError("min_darkening must be positive")
    arr = x.as_array()
    eligible = np.argwhere(np.all(arr > intensity_threshold, axis=2))
    if eligible.shape[0] == 0:
        raise ValueError("no eligible pixel above the intensity threshold")
    # argwhere already yields row-major sorted coordinates
    n_eligible = eligible.shape[0]
    r_pix = int(np.ceil(pixel_fraction * n_eligible))
    rng = np.random.default_rng(rng_seed)
    chosen = eligible[np.sort(rng.choice(n_eligible, size=r_pix, replace=False))]

    nc = x.channels
    r = nc * r_pix
    noise = np.zeros((r, x.size))
    lo = np.empty(r)
    hi = np.ones(r)
    for p, (i, j) in enumerate(chosen):
        for ch in range(nc):
            val = arr[i, j, ch]
            if min_darkening > val:
                raise ValueError(
                    f"min_darkening {min_darkening} exceeds intensity {val} "
                    f"at pixel ({i}, {j}) channel {ch}"
                )
            k = p * nc + ch
            noise[k, (i * x.width + j) * nc + ch] = -val
            lo[k] = min_darkening / val
    return PerturbationSpec(
        base_image=x,
        noise_matrix=noise,
        lambda_lower=lo,
        lambda_upper=hi,
        distribution=UNIFORM_BOX,
        intensity_threshold=intensity_threshold,
        min_darkening=min_darkening,
        selected_pixels=tuple((int(i), int(j)) for i, j in chosen),
        selection_seed=rng_seed,
    )


def build_global_ball(x: ImageTensor, norm: str, radius: float) -> PerturbationSpec:
    """Whole-image perturbation ball of the given radius around x.

    The noise basis is the identity (one unit direction per input
    coordinate) kept implicit, so nothing quadratic in n0 is stored.
    """
    if radius <= 0:
        raise ValueError(f"radius must be positive, got {radius!r}")
    if norm == "l2":
        dist = UNIFORM_L2_BALL
    elif norm == "linf":
        dist = UNIFORM_LINF_BALL
    else:
        raise ValueError(f"norm must be 'l2' or 'linf', got {norm!r}")
    n0 = x.size
    e = float(radius)
    return PerturbationSpec(
        base_image=x,
        noise_matrix=None,
        lambda_lower=np.full(n0, -e),
        lambda_upper=np.full(n0, e),
        distribution=dist,
        radius=e,
    )


def sample_lambdas(spec: PerturbationSpec, count: int, rng) -> np.ndarray:
    """(count, r) i.i.d. coefficient draws from the spec's distribution.

    ``rng`` is an integer seed or a numpy Generator; pass derived
    sub-generators to parallelize shards deterministically.
    """
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count!r}")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    r = spec.dim
    if spec.distribution == UNIFORM_BOX or spec.distribution == UNIFORM_LINF_BALL:
        return rng.uniform(spec.lambda_lower, spec.lambda_upper, size=(count, r))
    if spec.distribution == UNIFORM_L2_BALL:
        g = rng.standard_normal((count, r))
        g /= np.linalg.norm(g, axis=1, keepdims=True)
        radii = spec.radius * rng.random(count) ** (1.0 / r)
        return g * radii[:, None]
    raise ValueError(f"unknown distribution {spec.distribution!r}")


def sample(spec: PerturbationSpec, count: int, rng_seed: int):
    """List of (lambda, ImageTensor) pairs, reproducible from the seed."""
    lams = sample_lambdas(spec, count, rng_seed)
    flats = apply_batch(spec, lams)
    img = spec.base_image
    return [
        (lams[i].copy(), ImageTensor(img.height, img.width, img.channels, flats[i]))
        for i in range(count)
    ]


def spec_manifest(spec: PerturbationSpec, base_image_path: str = "") -> dict:
    """JSON-ready description sufficient to rebuild the exact input set."""
    return {
        "base_image": base_image_path,
        "image_shape": [
            spec.base_image.height,
            spec.base_image.width,
            spec.base_image.channels,
        ],
        "distribution": spec.distribution,
        "radius": spec.radius,
        "intensity_threshold": spec.intensity_threshold,
        "min_darkening": spec.min_darkening,
        "selected_pixels": [list(p) for p in spec.selected_pixels]
        if spec.selected_pixels is not None
        else None,
        "selection_seed": spec.selection_seed,
        "lambda_lower": spec.lambda_lower.tolist(),
        "lambda_upper": spec.lambda_upper.tolist(),
    }


def spec_from_manifest(manifest: dict, base_image: ImageTensor) -> PerturbationSpec:
    """Rebuild a spec from its manifest plus the base image it references."""
    dist = manifest["distribution"]
    if dist in (UNIFORM_L2_BALL, UNIFORM_LINF_BALL):
        norm = "l2" if dist == UNIFORM_L2_BALL else "linf"
        return build_global_ball(base_image, norm, manifest["radius"])
    arr = base_image.as_array()
    nc = base_image.channels
    pixels = [tuple(p) for p in manifest["selected_pixels"]]
    r = nc * len(pixels)
    noise = np.zeros((r, base_image.size))
    for p, (i, j) in enumerate(pixels):
        for ch in range(nc):
            noise[p * nc + ch, (i * base_image.width + j) * nc + ch] = -arr[i, j, ch]
    return PerturbationSpec(
        base_image=base_image,
        noise_matrix=noise,
        lambda_lower=np.asarray(manifest["lambda_lower"], dtype=np.float64),
        lambda_upper=np.asarray(manifest["lambda_upper"], dtype=np.float64),
        distribution=UNIFORM_BOX,
        intensity_threshold=manifest["intensity_threshold"],
        min_darkening=manifest["min_darkening"],
        selected_pixels=tuple(pixels),
        selection_seed=manifest["selection_seed"],
    )
