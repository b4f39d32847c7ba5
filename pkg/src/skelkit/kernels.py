"""Green's-function kernel blocks for the Laplace and Helmholtz equations.

Conventions:
    2D Laplace    G(x,y) = -log|x-y| / (2 pi)
    3D Laplace    G(x,y) = 1 / (4 pi |x-y|)
    2D Helmholtz  G(x,y) = (i/4) H0^(1)(k |x-y|)
    3D Helmholtz  G(x,y) = exp(i k |x-y|) / (4 pi |x-y|)

``layer="double"`` evaluates dG/dnu_y (normal derivative at the source).
If the source set carries quadrature weights, column j of every block is
scaled by w_j, so a block times a density vector is a quadrature sum.
"""

from dataclasses import dataclass

import numpy as np
from scipy import special as sp

from .errors import InvalidInput
from .geom import PointSet

# targets closer to a source than this times the cloud extent count as
# coincident and are handled by the self-interaction policy
COINCIDENT_RTOL = 1e-14


@dataclass(frozen=True)
class KernelSpec:
    equation: str                   # "laplace" | "helmholtz"
    dim: int                        # 2 | 3
    layer: str = "single"           # "single" | "double"
    wavenumber: float = 0.0
    self_interaction: str = "zero"  # "zero" | "curvature_limit"

    def __post_init__(self):
        if self.equation not in ("laplace", "helmholtz"):
            raise InvalidInput(f"unknown equation {self.equation!r}")
        if self.dim not in (2, 3):
            raise InvalidInput("dim must be 2 or 3")
        if self.layer not in ("single", "double"):
            raise InvalidInput(f"unknown layer {self.layer!r}")
        if self.self_interaction not in ("zero", "curvature_limit"):
            raise InvalidInput(f"unknown self_interaction {self.self_interaction!r}")
        if self.equation == "helmholtz" and not self.wavenumber > 0:
            raise InvalidInput("helmholtz requires wavenumber > 0")
        if self.equation == "laplace" and self.wavenumber != 0:
            raise InvalidInput("laplace requires wavenumber == 0")

    @property
    def scalar_field(self):
        return "complex" if self.equation == "helmholtz" else "real"

    @property
    def dtype(self):
        return np.complex128 if self.equation == "helmholtz" else np.float64

    def single_layer(self):
        """Same spec with layer forced to single (used for proxy surfaces)."""
        if self.layer == "single":
            return self
        return KernelSpec(self.equation, self.dim, "single", self.wavenumber,
                          self.self_interaction)


def bessel_h0(z):
    """Zeroth-order Hankel function of the first kind, J0(z) + i Y0(z).

    Accepts a positive scalar or array; relative accuracy ~1e-15 over
    (0, 700] (Cephes via scipy).  Y0 blows up at 0, so z <= 0 is rejected.
    """
    z = np.asarray(z, dtype=np.float64)
    if not np.all(z > 0):
        raise InvalidInput("bessel_h0 requires z > 0 (Y0 is singular at 0)")
    out = sp.j0(z) + 1j * sp.y0(z)
    return complex(out) if out.ndim == 0 else out


# chunk the pairwise-difference tensor to roughly this many entries
_CHUNK_ENTRIES = 4_000_000


def eval_block(spec: KernelSpec, targets: PointSet, sources: PointSet,
               source_curvature=None) -> np.ndarray:
    """Dense m x n kernel block G(x_i, y_j) (or dG/dnu_y for double layer).

    Coincident pairs (distance below 1e-14 times the joint cloud extent) are
    set by ``spec.self_interaction``: "zero", or "curvature_limit" which
    fills -kappa/(4 pi) (2D Laplace double layer smooth limit; the curvature
    comes from ``sources.curvatures`` or the explicit argument).
    """
    if targets.dim != spec.dim or sources.dim != spec.dim:
        raise InvalidInput(
            f"dimension mismatch: spec is {spec.dim}D, targets {targets.dim}D, "
            f"sources {sources.dim}D")
    if spec.layer == "double" and sources.normals is None:
        raise InvalidInput("double layer needs source normals")

    m, n = targets.n, sources.n
    rows_per_chunk = max(1, _CHUNK_ENTRIES // max(n, 1))
    if m > rows_per_chunk:
        out = np.empty((m, n), dtype=spec.dtype)
        for lo in range(0, m, rows_per_chunk):
            hi = min(lo + rows_per_chunk, m)
            sub = targets.subset(np.arange(lo, hi))
            out[lo:hi] = eval_block(spec, sub, sources, source_curvature)
        return out

    diff = targets.coords[:, None, :] - sources.coords[None, :, :]
    r = np.sqrt(np.sum(diff * diff, axis=2))

    span = max(
        float(np.ptp(targets.coords, axis=0).max()),
        float(np.ptp(sources.coords, axis=0).max()),
        float(np.abs(targets.coords).max()),
        float(np.abs(sources.coords).max()),
        1.0,
    )
    coincident = r < COINCIDENT_RTOL * span
    rs = np.where(coincident, 1.0, r)  # safe radius, overwritten below

    k = spec.wavenumber
    if spec.layer == "single":
        if spec.equation == "laplace":
            block = -np.log(rs) / (2 * np.pi) if spec.dim == 2 else 1.0 / (4 * np.pi * rs)
        else:
            if spec.dim == 2:
                block = 0.25j * (sp.j0(k * rs) + 1j * sp.y0(k * rs))
            else:
                block = np.exp(1j * k * rs) / (4 * np.pi * rs)
    else:
        # dG/dnu_y with nu the source normal; ndot[i,j] = (y_j - x_i) . nu_j
        ndot = -np.einsum("ijk,jk->ij", diff, sources.normals)
        if spec.equation == "laplace":
            if spec.dim == 2:
                block = -ndot / (2 * np.pi * rs * rs)
            else:
                # grad_y |x-y|^{-1} = (x-y)/r^3, so dG/dnu_y = -(y-x).nu/(4 pi r^3)
                block = -ndot / (4 * np.pi * rs ** 3)
        else:
            if spec.dim == 2:
                block = -0.25j * k * (sp.j1(k * rs) + 1j * sp.y1(k * rs)) * ndot / rs
            else:
                dgdr = np.exp(1j * k * rs) * (1j * k * rs - 1.0) / (4 * np.pi * rs * rs)
                block = dgdr * ndot / rs

    if np.any(coincident):
        if spec.self_interaction == "zero":
            fill = np.zeros(1, dtype=block.dtype)
            block = np.where(coincident, fill, block)
        else:
            if spec.equation != "laplace" or spec.dim != 2 or spec.layer != "double":
                raise InvalidInput("curvature_limit only defined for the 2D Laplace double layer")
            kappa = source_curvature if source_curvature is not None else sources.curvatures
            if kappa is None:
                raise InvalidInput("curvature_limit needs source curvatures")
            limit = np.broadcast_to(-np.asarray(kappa) / (4 * np.pi), block.shape[1:])
            block = np.where(coincident, limit[None, :], block)

    if sources.weights is not None:
        block = block * sources.weights[None, :]
    return block
