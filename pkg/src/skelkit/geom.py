"""Point clouds and adaptive orthtrees (binary/quad/octrees).

The tree reorders points so that every node owns a contiguous index range,
which is what makes blockwise compression of the kernel matrix possible.
Level 0 of ``OrthTree.levels`` is the finest level; the last level is the
root alone.  A leaf whose subdivision stopped early is listed again at every
finer level it spans, so each level is a full partition of ``0..N-1``.
"""

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInput

DEFAULT_MAX_LEAF = {2: 64, 3: 128}

# relative padding of the root box; keeps extreme points strictly inside
ROOT_PAD = 1e-12

# hard cap; beyond this, duplicated points are left together in one leaf
_MAX_DEPTH = 60


@dataclass
class PointSet:
    """N points in 2 or 3 dimensions, with optional unit normals (needed by
    double-layer kernels), quadrature weights and signed curvatures."""

    coords: np.ndarray
    normals: np.ndarray | None = None
    weights: np.ndarray | None = None
    curvatures: np.ndarray | None = None

    def __post_init__(self):
        self.coords = np.ascontiguousarray(self.coords, dtype=np.float64)
        if self.coords.ndim != 2 or self.coords.shape[1] not in (2, 3):
            raise InvalidInput(f"coords must be (N, d) with d in {{2,3}}, got {self.coords.shape}")
        if self.coords.shape[0] < 1:
            raise InvalidInput("need at least one point")
        if not np.all(np.isfinite(self.coords)):
            raise InvalidInput("non-finite coordinate")
        if self.normals is not None:
            self.normals = np.ascontiguousarray(self.normals, dtype=np.float64)
            if self.normals.shape != self.coords.shape:
                raise InvalidInput("normals must match coords shape")
            lens = np.linalg.norm(self.normals, axis=1)
            if np.any(np.abs(lens - 1.0) > 1e-12):
                raise InvalidInput("normals must be unit vectors (|n| = 1 within 1e-12)")
        for name in ("weights", "curvatures"):
            arr = getattr(self, name)
            if arr is not None:
                arr = np.ascontiguousarray(arr, dtype=np.float64).reshape(-1)
                if arr.shape[0] != self.coords.shape[0]:
                    raise InvalidInput(f"{name} must have one entry per point")
                setattr(self, name, arr)

    @property
    def n(self):
        return self.coords.shape[0]

    @property
    def dim(self):
        return self.coords.shape[1]

    def subset(self, idx):
        """New PointSet restricted to the given indices (fancy indexing)."""
        return PointSet(
            self.coords[idx],
            None if self.normals is None else self.normals[idx],
            None if self.weights is None else self.weights[idx],
            None if self.curvatures is None else self.curvatures[idx],
        )


@dataclass
class TreeNode:
    center: np.ndarray
    halfwidth: float
    lo: int          # index range [lo, hi) in tree ordering
    hi: int
    depth: int
    parent: int | None = None
    children: list = field(default_factory=list)

    @property
    def size(self):
        return self.hi - self.lo


@dataclass
class OrthTree:
    """Adaptive 2^d-ary partition.  ``perm`` maps tree positions to original
    indices: ``coords_tree = coords[perm]``."""

    nodes: list
    levels: list        # levels[0] = finest cover ... levels[-1] = [root]
    perm: np.ndarray
    dim: int

    @property
    def depth(self):
        return len(self.levels)

    @property
    def root(self):
        return self.nodes[self.levels[-1][0]]

    @property
    def n_points(self):
        return self.root.size

    def leaves(self):
        return [i for i, nd in enumerate(self.nodes) if not nd.children]


def build_tree(points: PointSet, max_leaf_size: int | None = None) -> OrthTree:
    """Sort points into an adaptive orthtree with contiguous per-node ranges.

    The root is the smallest enclosing hypercube (padded by 1e-12 relative).
    Boxes split at their centers; a point exactly on a split plane goes to
    the higher-coordinate child.  Empty children are pruned.  Subdivision
    stops once a node holds <= max_leaf_size points.
    """
    coords = points.coords
    d = points.dim
    n = points.n
    if max_leaf_size is None:
        max_leaf_size = DEFAULT_MAX_LEAF[d]
    if max_leaf_size < 1:
        raise InvalidInput("max_leaf_size must be >= 1")
    if not np.all(np.isfinite(coords)):
        raise InvalidInput("non-finite coordinate")

    lo_c = coords.min(axis=0)
    hi_c = coords.max(axis=0)
    center = 0.5 * (lo_c + hi_c)
    halfwidth = 0.5 * float((hi_c - lo_c).max())
    pad_scale = max(halfwidth, float(np.abs(center).max()), 1.0)
    halfwidth = halfwidth * (1.0 + ROOT_PAD) + ROOT_PAD * pad_scale

    nodes = []
    perm = np.empty(n, dtype=np.int64)
    order = np.arange(n, dtype=np.int64)
    pos = [0]  # running DFS write position into perm

    def recurse(idx, center, hw, depth, parent):
        node_id = len(nodes)
        node = TreeNode(center=center.copy(), halfwidth=hw, lo=pos[0],
                        hi=pos[0] + idx.size, depth=depth, parent=parent)
        nodes.append(node)
        if idx.size <= max_leaf_size or depth >= _MAX_DEPTH:
            perm[node.lo:node.hi] = idx
            pos[0] += idx.size
            return node_id
        pts = coords[idx]
        # child octant per point; ties (== center) go to the upper child
        code = np.zeros(idx.size, dtype=np.int64)
        for a in range(d):
            code |= (pts[:, a] >= center[a]).astype(np.int64) << a
        for c in range(1 << d):
            sel = idx[code == c]
            if sel.size == 0:
                continue
            offs = np.array([(0.5 if (c >> a) & 1 else -0.5) * hw for a in range(d)])
            cid = recurse(sel, center + offs, 0.5 * hw, depth + 1, node_id)
            node.children.append(cid)
        if len(node.children) == 0:  # defensive; cannot happen
            perm[node.lo:node.hi] = idx
            pos[0] += idx.size
        return node_id

    recurse(order, center, halfwidth, 0, None)

    max_depth = max(nd.depth for nd in nodes)
    # cover at fineness f: nodes at depth (max_depth - f) plus shallower leaves
    levels = []
    for f in range(max_depth, -1, -1):
        cover = [i for i, nd in enumerate(nodes)
                 if nd.depth == f or (not nd.children and nd.depth < f)]
        cover.sort(key=lambda i: nodes[i].lo)
        levels.append(cover)
    return OrthTree(nodes=nodes, levels=levels, perm=perm, dim=d)


def _boxes_touch(na: TreeNode, nb: TreeNode, tol: float) -> bool:
    gap = np.abs(na.center - nb.center) - (na.halfwidth + nb.halfwidth)
    return bool(np.all(gap <= tol))


def neighbors(tree: OrthTree, node_id: int) -> list:
    """Same-depth nodes whose boxes touch the given node's box (itself
    excluded), in increasing node-id order."""
    if not isinstance(node_id, (int, np.integer)) or not 0 <= node_id < len(tree.nodes):
        raise InvalidInput(f"invalid node id {node_id!r}")
    node = tree.nodes[node_id]
    tol = 1e-9 * tree.root.halfwidth
    out = [i for i, other in enumerate(tree.nodes)
           if i != node_id and other.depth == node.depth
           and _boxes_touch(node, other, tol)]
    return out


def level_neighbors(tree: OrthTree, level: int) -> list:
    """Adjacency lists within one cover (``tree.levels[level]``).  Unlike
    :func:`neighbors` this mixes box sizes, since early-stopped leaves are
    carried down through finer covers."""
    ids = tree.levels[level]
    tol = 1e-9 * tree.root.halfwidth
    nbrs = [[] for _ in ids]
    for a in range(len(ids)):
        na = tree.nodes[ids[a]]
        for b in range(a + 1, len(ids)):
            nb = tree.nodes[ids[b]]
            if _boxes_touch(na, nb, tol):
                nbrs[a].append(b)
                nbrs[b].append(a)
    return nbrs


# ---------------------------------------------------------------------------
# point-set file formats (see README for the layouts)

def read_points_text(path, dim, has_normals=False, has_weights=False) -> PointSet:
    """Whitespace-delimited text, one point per row: d coordinate columns,
    then optionally d normal columns, then optionally one weight column."""
    data = np.loadtxt(path, dtype=np.float64, ndmin=2)
    want = dim + (dim if has_normals else 0) + (1 if has_weights else 0)
    if data.shape[1] != want:
        raise InvalidInput(f"expected {want} columns, found {data.shape[1]}")
    coords = data[:, :dim]
    k = dim
    normals = None
    if has_normals:
        normals = data[:, k:k + dim]
        k += dim
    weights = data[:, k] if has_weights else None
    return PointSet(coords, normals, weights)


def write_points_text(ps: PointSet, path):
    cols = [ps.coords]
    if ps.normals is not None:
        cols.append(ps.normals)
    if ps.weights is not None:
        cols.append(ps.weights[:, None])
    np.savetxt(path, np.hstack(cols), fmt="%.17g")


_BIN_MAGIC = b"SKPT"


def write_points_binary(ps: PointSet, path):
    """Shape-prefixed binary: magic, u32 N, u8 dim, u8 flags (bit0 normals,
    bit1 weights), then float64 coords row-major, normals, weights."""
    flags = (1 if ps.normals is not None else 0) | (2 if ps.weights is not None else 0)
    with open(path, "wb") as f:
        f.write(_BIN_MAGIC)
        f.write(struct.pack("<IBB", ps.n, ps.dim, flags))
        f.write(ps.coords.tobytes())
        if ps.normals is not None:
            f.write(ps.normals.tobytes())
        if ps.weights is not None:
            f.write(ps.weights.tobytes())


def read_points_binary(path) -> PointSet:
    with open(path, "rb") as f:
        if f.read(4) != _BIN_MAGIC:
            raise InvalidInput(f"{path}: not a skelkit binary point file")
        n, dim, flags = struct.unpack("<IBB", f.read(6))
        coords = np.frombuffer(f.read(8 * n * dim), dtype=np.float64).reshape(n, dim)
        normals = weights = None
        if flags & 1:
            normals = np.frombuffer(f.read(8 * n * dim), dtype=np.float64).reshape(n, dim)
        if flags & 2:
            weights = np.frombuffer(f.read(8 * n), dtype=np.float64)
    return PointSet(coords.copy(), None if normals is None else normals.copy(),
                    None if weights is None else weights.copy())
