"""Second-kind boundary integral equations on smooth closed 2D curves.

Interior Dirichlet problems use the double-layer representation, giving

    -sigma(x)/2 + int_dOmega dG/dnu_y (x,y) sigma(y) ds(y) = f(x).

Laplace systems are discretized with the plain trapezoidal rule (the kernel
is smooth on a smooth curve; the diagonal takes the limit -kappa/(4 pi)).
Helmholtz kernels are weakly singular, so the trapezoidal rule is corrected
with tenth-order Kapur-Rokhlin endpoint weights.  A multiple-scattering
driver (sound-hard obstacles, single-layer representation) provides the
block system and per-scatterer direct-solver preconditioners.
"""

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import AccuracyWarning, InvalidInput
from .geom import PointSet, build_tree
from .kernels import KernelSpec, eval_block
from .skel import ProxyConfig, compress_source
from .solver import factor, solve

# Two-sided Kapur-Rokhlin correction weights of order 10 for integrands of
# the form phi(x) log|x| + psi(x) (Kapur & Rokhlin, SIAM J. Numer. Anal.
# 34(4), 1997; the widely reproduced ten-weight table).  The corrected rule
# drops the singular node and reweights the ten nearest nodes on each side
# by (1 + gamma_l).  Validated by the convergence test in the test suite.
KR10_GAMMA = np.array([
    7.832432020568779e+00,
    -4.565161670374749e+01,
    1.452168846354677e+02,
    -2.901348302886379e+02,
    3.870862162579900e+02,
    -3.523821383570681e+02,
    2.172421547519342e+02,
    -8.707796087382991e+01,
    2.053584266072635e+01,
    -2.166984103403823e+00,
])

QUAD_RULES = ("plain_trapezoid", "kapur_rokhlin_10")


@dataclass
class Curve2D:
    """Closed smooth curve sampled at n equispaced parameter values.

    Carries everything the Nystrom discretization needs: positions, unit
    outward normals, signed curvatures, and arclength weights |x'| * 2pi/n.
    """

    t: np.ndarray
    xy: np.ndarray
    normals: np.ndarray
    curvature: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        if np.any(self.weights <= 0):
            raise InvalidInput("curve weights must be positive")

    @property
    def n(self):
        return self.xy.shape[0]

    def point_set(self):
        return PointSet(self.xy, self.normals, self.weights, self.curvature)

    def node_spacing(self):
        return float(self.weights.max())

    def diameter(self):
        lo = self.xy.min(axis=0)
        hi = self.xy.max(axis=0)
        return float(np.linalg.norm(hi - lo))


def ellipse(a, b, n) -> Curve2D:
    """Ellipse with semi-axes a, b, counterclockwise, n nodes."""
    if a <= 0 or b <= 0 or n < 4:
        raise InvalidInput("need positive semi-axes and n >= 4")
    t = 2 * np.pi * np.arange(n) / n
    xy = np.column_stack([a * np.cos(t), b * np.sin(t)])
    speed = np.sqrt((a * np.sin(t)) ** 2 + (b * np.cos(t)) ** 2)
    normals = np.column_stack([b * np.cos(t), a * np.sin(t)]) / speed[:, None]
    curvature = a * b / speed ** 3
    weights = speed * (2 * np.pi / n)
    return Curve2D(t, xy, normals, curvature, weights)


def circle(radius, n) -> Curve2D:
    return ellipse(radius, radius, n)


def trefoil(n, center=(0.0, 0.0), scale=1.0) -> Curve2D:
    """Three-lobed curve r(theta) = (2 + cos 3 theta)/6, counterclockwise."""
    if n < 8:
        raise InvalidInput("need n >= 8")
    t = 2 * np.pi * np.arange(n) / n
    r = (2 + np.cos(3 * t)) / 6
    dr = -np.sin(3 * t) / 2
    ddr = -1.5 * np.cos(3 * t)
    c, s = np.cos(t), np.sin(t)
    xy = np.asarray(center) + scale * r[:, None] * np.column_stack([c, s])
    dx = scale * (dr * c - r * s)
    dy = scale * (dr * s + r * c)
    speed = np.hypot(dx, dy)
    normals = np.column_stack([dy, -dx]) / speed[:, None]
    curvature = (r * r + 2 * dr * dr - r * ddr) / (r * r + dr * dr) ** 1.5 / scale
    weights = speed * (2 * np.pi / n)
    return Curve2D(t, xy, normals, curvature, weights)


def winding_number(curve: Curve2D, point) -> int:
    """Winding of the sampled curve around a point (1 inside a CCW curve)."""
    d = curve.xy - np.asarray(point)
    ang = np.arctan2(d[:, 1], d[:, 0])
    dang = np.diff(np.concatenate([ang, ang[:1]]))
    dang = (dang + np.pi) % (2 * np.pi) - np.pi
    return int(np.round(dang.sum() / (2 * np.pi)))


def contains(curve: Curve2D, point) -> bool:
    return winding_number(curve, point) != 0


def _cyclic_distance(i, j, n):
    d = np.abs(i[:, None] - j[None, :])
    return np.minimum(d, n - d)


@dataclass
class BieSystem:
    """Discretized second-kind system: entries K(x_i, x_j) w_j off the
    diagonal (plus Kapur-Rokhlin reweighting near it, when active) and
    identity_coef (+ smooth kernel limit, Laplace) on the diagonal.
    The ``block`` accessor is deterministic and side-effect free."""

    spec: KernelSpec
    curve: Curve2D
    quad: str
    identity_coef: float = -0.5

    def __post_init__(self):
        self.points = self.curve.point_set()

    @property
    def n(self):
        return self.curve.n

    @property
    def dtype(self):
        return self.spec.dtype

    def block(self, rows, cols):
        rows = np.asarray(rows)
        cols = np.asarray(cols)
        tgt = self.points.subset(rows)
        src = self.points.subset(cols)
        base = eval_block(self.spec, tgt, src)
        if self.quad == "kapur_rokhlin_10":
            dist = _cyclic_distance(rows, cols, self.n)
            near = (dist >= 1) & (dist <= KR10_GAMMA.size)
            if np.any(near):
                base = base * np.where(near, 1.0 + KR10_GAMMA[np.minimum(dist, KR10_GAMMA.size) - 1], 1.0)
        same = rows[:, None] == cols[None, :]
        if np.any(same):
            base = base + np.where(same, self.identity_coef, 0.0)
        return base

    def matrix(self):
        idx = np.arange(self.n)
        return self.block(idx, idx)


def discretize_dirichlet(curve: Curve2D, spec: KernelSpec,
                         quad: str | None = None) -> BieSystem:
    """Nystrom system for the interior Dirichlet problem on ``curve``.

    Laplace pairs with the plain trapezoidal rule (smooth kernel; diagonal
    -1/2 + w * (-kappa/(4 pi))); Helmholtz requires the tenth-order
    Kapur-Rokhlin corrected rule and a bare -1/2 diagonal.
    """
    if spec.dim != 2 or spec.layer != "double":
        spec = KernelSpec(spec.equation, 2, "double", spec.wavenumber,
                          "curvature_limit" if spec.equation == "laplace" else "zero")
    if quad is None:
        quad = "plain_trapezoid" if spec.equation == "laplace" else "kapur_rokhlin_10"
    if quad not in QUAD_RULES:
        raise InvalidInput(f"unknown quadrature {quad!r}")
    if spec.equation == "helmholtz" and quad == "plain_trapezoid":
        raise InvalidInput("helmholtz double layer is weakly singular; "
                           "plain trapezoid cannot meet the accuracy contract")
    if spec.equation == "laplace" and quad != "plain_trapezoid":
        raise InvalidInput("laplace double layer is smooth; use plain_trapezoid")
    if spec.equation == "laplace" and spec.self_interaction != "curvature_limit":
        spec = KernelSpec(spec.equation, 2, "double", 0.0, "curvature_limit")
    return BieSystem(spec=spec, curve=curve, quad=quad)


def point_source_data(curve: Curve2D, source, spec: KernelSpec) -> np.ndarray:
    """Dirichlet data on the curve from an exterior unit point source:
    f_i = G(x_i, source)."""
    source = np.asarray(source, dtype=np.float64)
    if contains(curve, source):
        raise InvalidInput("point source must lie strictly outside the domain")
    sspec = KernelSpec(spec.equation, 2, "single", spec.wavenumber)
    tgt = PointSet(curve.xy)
    src = PointSet(source.reshape(1, 2))
    return eval_block(sspec, tgt, src)[:, 0]


def eval_interior(curve: Curve2D, density, spec: KernelSpec, targets) -> np.ndarray:
    """Double-layer potential of ``density`` at interior targets via the
    trapezoidal rule.  Targets within two node spacings of the curve get an
    AccuracyWarning (the result is returned regardless)."""
    targets = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    for p in targets:
        if not contains(curve, p):
            raise InvalidInput(f"target {p} is not interior")
    dists = np.min(np.linalg.norm(curve.xy[None, :, :] - targets[:, None, :], axis=2), axis=1)
    if np.any(dists < 2 * curve.node_spacing()):
        warnings.warn("target within 2 node spacings of the boundary; "
                      "quadrature accuracy degrades near the curve", AccuracyWarning)
    dspec = KernelSpec(spec.equation, 2, "double", spec.wavenumber)
    block = eval_block(dspec, PointSet(targets), curve.point_set())
    return block @ np.asarray(density)


class _BieSource:
    """Presents a BieSystem to the compression sweep in tree ordering.

    Proxy blocks use the single-layer kernel of the same equation: rows of
    the system are point evaluations of exterior fields, and distant columns
    are curve-supported densities whose far fields the proxy ring spans.
    """

    def __init__(self, system: BieSystem, perm):
        self.system = system
        self.perm = np.asarray(perm)
        self.n = system.n
        self.dtype = system.dtype
        self.wavenumber = system.spec.wavenumber
        self.points = system.points.subset(self.perm)
        self.pspec = system.spec.single_layer()
        # bring the unweighted proxy columns onto the quadrature scale of the
        # system columns, so the rank cutoff sees one consistent magnitude
        self.wscale = float(np.mean(self.points.weights))

    def block(self, rows, cols):
        return self.system.block(self.perm[rows], self.perm[cols])

    def proxy_row_block(self, rows, pxy):
        return self.wscale * eval_block(self.pspec, self.points.subset(rows), pxy)

    def proxy_col_block(self, cols, pxy):
        src = self.points.subset(cols)
        src = PointSet(src.coords, None, src.weights)
        return eval_block(self.pspec, pxy, src)


def compress_system(system: BieSystem, eps, max_leaf_size=None,
                    proxy: ProxyConfig | None = None, mode="proxy", seed=0):
    """Build a tree over the curve nodes and skeletonize the system matrix.
    Returns (tree, CompressedMatrix)."""
    tree = build_tree(system.points, max_leaf_size)
    src = _BieSource(system, tree.perm)
    cm = compress_source(src, tree, eps, proxy=proxy, mode=mode, seed=seed)
    return tree, cm


def solve_dirichlet(system: BieSystem, rhs, eps, max_leaf_size=None):
    """Convenience driver: compress, factor, solve.  Returns (density, cm, fi)."""
    _, cm = compress_system(system, eps, max_leaf_size)
    fi = factor(cm)
    return solve(fi, rhs), cm, fi


def write_density_csv(path, curve: Curve2D, density):
    """Solution density along a curve as CSV: t, x, y, re(sigma), im(sigma)."""
    density = np.asarray(density)
    with open(path, "w") as f:
        f.write("t,x,y,sigma_re,sigma_im\n")
        for i in range(curve.n):
            f.write(f"{curve.t[i]:.17g},{curve.xy[i, 0]:.17g},{curve.xy[i, 1]:.17g},"
                    f"{np.real(density[i]):.17g},{np.imag(density[i]):.17g}\n")


def write_field_csv(path, points, values):
    """Potential field samples as CSV: x, y, re(u), im(u)."""
    points = np.atleast_2d(np.asarray(points))
    values = np.asarray(values)
    with open(path, "w") as f:
        f.write("x,y,u_re,u_im\n")
        for p, v in zip(points, values):
            f.write(f"{p[0]:.17g},{p[1]:.17g},{np.real(v):.17g},{np.imag(v):.17g}\n")


# ---------------------------------------------------------------------------
# multiple scattering: sound-hard obstacles, single-layer representation

def _neumann_trace_block(k, targets: PointSet, sources: PointSet,
                         kr_dist=None) -> np.ndarray:
    """d/dnu_x of the 2D Helmholtz single layer: -(ik/4) H1(kr) (x-y).nu_x/r,
    scaled by source weights; diagonal entries zero.  kr_dist, when given,
    is the cyclic node distance used for Kapur-Rokhlin reweighting."""
    from scipy import special as sp
    diff = targets.coords[:, None, :] - sources.coords[None, :, :]
    r = np.sqrt(np.sum(diff * diff, axis=2))
    same = r < 1e-14
    rs = np.where(same, 1.0, r)
    ndotx = np.einsum("ijk,ik->ij", diff, targets.normals)
    blk = -0.25j * k * (sp.j1(k * rs) + 1j * sp.y1(k * rs)) * ndotx / rs
    blk = np.where(same, 0.0, blk)
    if kr_dist is not None:
        near = (kr_dist >= 1) & (kr_dist <= KR10_GAMMA.size)
        blk = blk * np.where(near, 1.0 + KR10_GAMMA[np.minimum(kr_dist, KR10_GAMMA.size) - 1], 1.0)
    if sources.weights is not None:
        blk = blk * sources.weights[None, :]
    return blk


class _ScattererSource:
    """Self-block of one scatterer for the preconditioner: the Neumann-trace
    rows are derivative functionals, so the row-side proxy uses the target-
    normal derivative of the single-layer proxy field."""

    def __init__(self, scat, perm):
        self.scat = scat
        self.perm = np.asarray(perm)
        self.n = scat.npts
        self.dtype = np.complex128
        self.wavenumber = scat.k
        self.points = scat.points.subset(self.perm)

    def block(self, rows, cols):
        return self.scat.self_block(self.perm[rows], self.perm[cols])

    def proxy_row_block(self, rows, pxy):
        tgt = self.points.subset(rows)
        return _neumann_trace_block(self.scat.k, tgt, pxy)

    def proxy_col_block(self, cols, pxy):
        src = self.points.subset(cols)
        src = PointSet(src.coords, None, src.weights)
        return eval_block(KernelSpec("helmholtz", 2, "single", self.scat.k), pxy, src)


class _Scatterer:
    def __init__(self, curve: Curve2D, k):
        self.curve = curve
        self.k = k
        self.points = curve.point_set()
        self.npts = curve.n

    def self_block(self, rows, cols):
        rows = np.asarray(rows)
        cols = np.asarray(cols)
        dist = _cyclic_distance(rows, cols, self.npts)
        blk = _neumann_trace_block(self.k, self.points.subset(rows),
                                   self.points.subset(cols), kr_dist=dist)
        same = rows[:, None] == cols[None, :]
        return blk + np.where(same, -0.5, 0.0)


@dataclass
class ScatteringSystem:
    """Block system A_ij = -I/2 + K_ii (i = j), K_ij (i != j), with K the
    target-normal derivative of the Helmholtz single layer; the incoming
    field is the vertical plane wave exp(i k x2)."""

    scatterers: list
    k: float

    @property
    def n(self):
        return sum(s.npts for s in self.scatterers)

    def offsets(self):
        sizes = [s.npts for s in self.scatterers]
        return np.concatenate([[0], np.cumsum(sizes)])

    def matrix(self):
        off = self.offsets()
        A = np.zeros((self.n, self.n), dtype=np.complex128)
        for i, si in enumerate(self.scatterers):
            for j, sj in enumerate(self.scatterers):
                bi = slice(off[i], off[i + 1])
                bj = slice(off[j], off[j + 1])
                if i == j:
                    idx = np.arange(si.npts)
                    A[bi, bj] = si.self_block(idx, idx)
                else:
                    A[bi, bj] = _neumann_trace_block(self.k, si.points, sj.points)
        return A

    def rhs_plane_wave(self):
        """-d/dnu of u_inc = exp(i k x2) on every scatterer boundary."""
        parts = []
        for s in self.scatterers:
            u = np.exp(1j * self.k * s.curve.xy[:, 1])
            parts.append(-1j * self.k * s.curve.normals[:, 1] * u)
        return np.concatenate(parts)

    def precond_blocks(self, eps=1e-6, max_leaf_size=None):
        """Per-scatterer factored inverses of the isolated self-systems."""
        facs = []
        for s in self.scatterers:
            tree = build_tree(s.points, max_leaf_size)
            src = _ScattererSource(s, tree.perm)
            cm = compress_source(src, tree, eps)
            facs.append(factor(cm))
        return facs

    def precond_apply(self, facs):
        off = self.offsets()

        def apply_pinv(x):
            out = np.empty_like(np.asarray(x, dtype=np.complex128))
            for i, fi in enumerate(facs):
                out[off[i]:off[i + 1]] = solve(fi, x[off[i]:off[i + 1]])
            return out

        return apply_pinv

    def scattered_field(self, densities, targets):
        """Single-layer field of the solved densities at exterior points."""
        targets = np.atleast_2d(np.asarray(targets, dtype=np.float64))
        off = self.offsets()
        out = np.zeros(targets.shape[0], dtype=np.complex128)
        spec = KernelSpec("helmholtz", 2, "single", self.k)
        for i, s in enumerate(self.scatterers):
            blk = eval_block(spec, PointSet(targets), s.points)
            out += blk @ densities[off[i]:off[i + 1]]
        return out


def scattering_system(scatterers, k) -> ScatteringSystem:
    """Validate geometry (pairwise disjoint) and assemble the block system."""
    if k <= 0:
        raise InvalidInput("wavenumber must be positive")
    curves = list(scatterers)
    for i in range(len(curves)):
        for j in range(i + 1, len(curves)):
            a, b = curves[i], curves[j]
            lo_a, hi_a = a.xy.min(0), a.xy.max(0)
            lo_b, hi_b = b.xy.min(0), b.xy.max(0)
            boxes_overlap = np.all(lo_a <= hi_b) and np.all(lo_b <= hi_a)
            if boxes_overlap and (contains(a, b.xy.mean(0)) or contains(b, a.xy.mean(0))
                                  or contains(a, b.xy[0]) or contains(b, a.xy[0])):
                raise InvalidInput(f"scatterers {i} and {j} overlap")
    return ScatteringSystem([_Scatterer(c, k) for c in curves], k)
