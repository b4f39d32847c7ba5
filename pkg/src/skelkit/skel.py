"""Multilevel recursive skeletonization over an orthtree.

Working from the finest tree level upward, each node's diagonal block is
extracted and its off-diagonal block row/column is compressed with an ID;
surviving skeletons are regrouped into parent nodes and the procedure
repeats.  The result is a telescoping representation

    A  ~  D1 + L1 [ D2 + L2 ( ... Dt + Lt S Rt ... ) R2 ] R1

whose factors are block diagonal, plus a small dense skeleton matrix S at
the top.  Compression targets are shrunk with proxy surfaces: distant
interactions are replaced by a constant-size ring/sphere of equivalent
sources around each box, so per-node work depends only on neighbor sizes.
"""

import io
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .errors import InvalidInput, RefusedTooLarge
from .geom import OrthTree, PointSet, level_neighbors
from .kernels import KernelSpec, eval_block
from .lowrank import id_fixed_precision, id_randomized

DEFAULT_N_PROXY = {2: 64, 3: 512}

# in global mode, sketch the off-diagonal block when it is this much taller
# than the node itself
_RANDOMIZED_CUTOFF = 4096

GLOBAL_MODE_LIMIT = 20000


def _workers():
    try:
        return max(1, int(os.environ.get("SKELKIT_THREADS", "1")))
    except ValueError:
        return 1


def _map_nodes(fn, items):
    w = _workers()
    if w == 1 or len(items) < 2:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=w) as pool:
        return list(pool.map(fn, items))


@dataclass
class ProxyConfig:
    """Proxy surface: n_proxy points on the circle/sphere circumscribing the
    3^d supercell of a box's neighbors, scaled by radius_factor."""

    n_proxy: int | None = None     # None -> 64 (2D) / 512 (3D)
    radius_factor: float = 1.0
    shape: str = "auto"            # "auto" | "circle" | "sphere"

    def resolve(self, dim):
        n = self.n_proxy if self.n_proxy is not None else DEFAULT_N_PROXY[dim]
        floor = 8 if dim == 2 else 32
        if n < floor:
            raise InvalidInput(f"n_proxy must be >= {floor} in {dim}D")
        shape = self.shape
        if shape == "auto":
            shape = "circle" if dim == 2 else "sphere"
        if (shape == "circle") != (dim == 2):
            raise InvalidInput(f"proxy shape {shape!r} incompatible with {dim}D")
        return replace(self, n_proxy=n, shape=shape)


def proxy_radius(halfwidth, config: ProxyConfig, dim):
    return config.radius_factor * 3.0 * halfwidth * np.sqrt(dim)


def proxy_points(box, config: ProxyConfig, dim) -> PointSet:
    """Deterministic points on the proxy surface around ``box`` (anything
    with .center and .halfwidth).  2D: equispaced on the circle; 3D:
    spherical Fibonacci spiral."""
    cfg = config.resolve(dim)
    n = cfg.n_proxy
    r = proxy_radius(box.halfwidth, cfg, dim)
    c = np.asarray(box.center, dtype=np.float64)
    if dim == 2:
        th = 2 * np.pi * np.arange(n) / n
        pts = c + r * np.column_stack([np.cos(th), np.sin(th)])
    else:
        i = np.arange(n) + 0.5
        z = 1.0 - 2.0 * i / n
        rho = np.sqrt(np.clip(1.0 - z * z, 0.0, None))
        golden = np.pi * (3.0 - np.sqrt(5.0))
        th = golden * i
        pts = c + r * np.column_stack([rho * np.cos(th), rho * np.sin(th), z])
    return PointSet(pts)


class KernelSource:
    """Adapter presenting a plain kernel matrix (in tree ordering) to the
    compression sweep.  Proxy blocks always use the single-layer kernel of
    the same equation: the proxy only has to span exterior fields."""

    def __init__(self, spec: KernelSpec, points: PointSet, perm):
        self.spec = spec
        self.points = points.subset(perm)
        self.proxy_spec = spec.single_layer()
        self.n = points.n
        self.dtype = spec.dtype
        self.wavenumber = spec.wavenumber

    def block(self, rows, cols):
        return eval_block(self.spec, self.points.subset(rows), self.points.subset(cols))

    def proxy_row_block(self, rows, proxy: PointSet):
        # incoming fields: proxy charges evaluated at the node's points
        return eval_block(self.proxy_spec, self.points.subset(rows), proxy)

    def proxy_col_block(self, cols, proxy: PointSet):
        # outgoing fields: node sources evaluated on the proxy surface
        src = self.points.subset(cols)
        src = PointSet(src.coords, None, src.weights)  # single layer: drop normals
        return eval_block(self.proxy_spec, proxy, src)


@dataclass
class CompressedNode:
    row_skel: np.ndarray    # surviving row indices, global tree order, sorted
    col_skel: np.ndarray
    D: np.ndarray           # extracted diagonal block (n_r x n_c)
    L: np.ndarray           # row interpolation, n_r x k_r
    R: np.ndarray           # column interpolation, k_c x n_c
    children: np.ndarray | None   # positions in the previous level (None at finest)

    @property
    def k_r(self):
        return self.row_skel.size

    @property
    def k_c(self):
        return self.col_skel.size


class CompressedLevel:
    def __init__(self, nodes):
        self.nodes = nodes
        self.row_dof_counts = np.array([nd.D.shape[0] for nd in nodes])
        self.col_dof_counts = np.array([nd.D.shape[1] for nd in nodes])
        self.kr_counts = np.array([nd.k_r for nd in nodes])
        self.kc_counts = np.array([nd.k_c for nd in nodes])
        self.row_dof_off = np.concatenate([[0], np.cumsum(self.row_dof_counts)])
        self.col_dof_off = np.concatenate([[0], np.cumsum(self.col_dof_counts)])
        self.kr_off = np.concatenate([[0], np.cumsum(self.kr_counts)])
        self.kc_off = np.concatenate([[0], np.cumsum(self.kc_counts)])

    @property
    def K_r(self):
        return int(self.kr_off[-1])

    @property
    def K_c(self):
        return int(self.kc_off[-1])


@dataclass
class CompressedMatrix:
    """Telescoping compressed form of an N x N structured matrix."""

    levels: list
    S: np.ndarray
    n: int
    eps: float
    perm: np.ndarray
    scalar_field: str
    tree: OrthTree | None = None

    @property
    def nlevels(self):
        return len(self.levels)

    @property
    def dtype(self):
        return np.complex128 if self.scalar_field == "complex" else np.float64

    def skeleton_counts(self):
        """(K_r, K_c) totals per level, finest first."""
        return [(lv.K_r, lv.K_c) for lv in self.levels]

    def storage_bytes(self):
        total = self.S.nbytes + self.perm.nbytes
        for lv in self.levels:
            for nd in lv.nodes:
                total += nd.D.nbytes + nd.L.nbytes + nd.R.nbytes
                total += nd.row_skel.nbytes + nd.col_skel.nbytes
        return total

    def apply(self, x):
        return apply(self, x)

    def matvec_dense(self):
        """Densify by applying to identity columns (test/debug helper)."""
        return apply(self, np.eye(self.n, dtype=self.dtype))


def apply(cm: CompressedMatrix, x) -> np.ndarray:
    """Multiply the compressed matrix against x (vector or column block):
    upward pass through the column interpolants, dense top-level skeleton
    multiply, downward pass through the row interpolants, accumulating the
    extracted diagonal blocks on the way down."""
    x = np.asarray(x)
    single = x.ndim == 1
    if x.shape[0] != cm.n:
        raise InvalidInput(f"length mismatch: matrix is {cm.n}, vector {x.shape[0]}")
    dtype = np.result_type(cm.dtype, x.dtype)
    xc = x.reshape(cm.n, -1).astype(dtype, copy=False)
    xt = xc[cm.perm]

    if cm.nlevels == 0:
        yt = cm.S @ xt
    else:
        # upward: restrict to column skeletons level by level
        us = [xt]
        u = xt
        for lv in cm.levels:
            nxt = np.empty((lv.K_c, xt.shape[1]), dtype=dtype)
            for a, nd in enumerate(lv.nodes):
                seg = u[lv.col_dof_off[a]:lv.col_dof_off[a + 1]]
                if nd.k_c:
                    nxt[lv.kc_off[a]:lv.kc_off[a + 1]] = nd.R @ seg
            us.append(nxt)
            u = nxt
        v = cm.S @ u
        # downward: diagonal contributions plus prolonged skeleton data
        for li in range(cm.nlevels - 1, -1, -1):
            lv = cm.levels[li]
            w = np.empty((int(lv.row_dof_off[-1]), xt.shape[1]), dtype=dtype)
            ul = us[li]
            for a, nd in enumerate(lv.nodes):
                seg = nd.D @ ul[lv.col_dof_off[a]:lv.col_dof_off[a + 1]]
                if nd.k_r:
                    seg = seg + nd.L @ v[lv.kr_off[a]:lv.kr_off[a + 1]]
                w[lv.row_dof_off[a]:lv.row_dof_off[a + 1]] = seg
            v = w
        yt = v

    out = np.empty_like(xt)
    out[cm.perm] = yt
    return out[:, 0] if single else out


def _cover_children(tree, cover_prev, cover):
    """For each node of ``cover``, positions of its members in ``cover_prev``
    (both sorted by range start; a pass-through leaf is its own child)."""
    out = []
    j = 0
    for nid in cover:
        nd = tree.nodes[nid]
        kids = []
        while j < len(cover_prev) and tree.nodes[cover_prev[j]].lo < nd.hi:
            kids.append(j)
            j += 1
        out.append(np.array(kids, dtype=np.int64))
    return out


def compress(spec: KernelSpec, points: PointSet, tree: OrthTree, eps,
             proxy: ProxyConfig | None = None, mode: str = "proxy",
             equalize_ranks: bool = True, seed: int = 0,
             allow_large: bool = False) -> CompressedMatrix:
    """Recursively skeletonize the kernel matrix of ``spec`` over ``points``.

    mode="proxy" compresses each node against [neighbor blocks | proxy
    surface]; mode="global" uses the full off-diagonal block row/column
    (quadratic work, refused above 20000 points unless allow_large).

    equalize_ranks grows the smaller of each node's row/column skeleton sets
    to the larger so every diagonal block of the inverse recursion is square.
    """
    source = KernelSource(spec, points, tree.perm)
    return compress_source(source, tree, eps, proxy=proxy, mode=mode,
                           equalize_ranks=equalize_ranks, seed=seed,
                           allow_large=allow_large)


def compress_source(source, tree: OrthTree, eps, proxy: ProxyConfig | None = None,
                    mode: str = "proxy", equalize_ranks: bool = True,
                    seed: int = 0, allow_large: bool = False) -> CompressedMatrix:
    """Compression sweep over any matrix source exposing ``block``,
    ``proxy_row_block``, ``proxy_col_block``, ``n``, ``dtype``, ``wavenumber``."""
    if not 0 < eps < 1:
        raise InvalidInput("eps must lie in (0, 1)")
    if mode not in ("proxy", "global"):
        raise InvalidInput(f"unknown mode {mode!r}")
    n = tree.n_points
    if mode == "global" and n > GLOBAL_MODE_LIMIT and not allow_large:
        raise RefusedTooLarge(
            f"global-mode compression of N={n} is quadratic; "
            "pass allow_large=True to force it")
    cfg = (proxy or ProxyConfig()).resolve(tree.dim)
    dtype = source.dtype
    field = "complex" if np.issubdtype(dtype, np.complexfloating) else "real"

    covers = tree.levels
    top = next(i for i, c in enumerate(covers) if len(c) == 1)
    if top == 0:
        allidx = np.arange(n)
        S = np.ascontiguousarray(source.block(allidx, allidx), dtype=dtype)
        return CompressedMatrix(levels=[], S=S, n=n, eps=eps,
                                perm=tree.perm.copy(), scalar_field=field, tree=tree)

    k_wave = getattr(source, "wavenumber", 0.0)
    levels = []
    prev_row = prev_col = None

    for li in range(top):
        ids = covers[li]
        nbrs = level_neighbors(tree, li)
        if li == 0:
            children = [None] * len(ids)
            row_dofs = [np.arange(tree.nodes[i].lo, tree.nodes[i].hi) for i in ids]
            col_dofs = [r.copy() for r in row_dofs]
            child_off = None
        else:
            children = _cover_children(tree, covers[li - 1], ids)
            row_dofs = [np.concatenate([prev_row[c] for c in ch]) if len(ch) else
                        np.empty(0, dtype=np.int64) for ch in children]
            col_dofs = [np.concatenate([prev_col[c] for c in ch]) if len(ch) else
                        np.empty(0, dtype=np.int64) for ch in children]
            child_off = [
                (np.concatenate([[0], np.cumsum([prev_row[c].size for c in ch])]),
                 np.concatenate([[0], np.cumsum([prev_col[c].size for c in ch])]))
                for ch in children]

        def _blk(rows, cols):
            # nodes can be isolated (no neighbors) or fully compressed away
            if len(rows) == 0 or len(cols) == 0:
                return np.zeros((len(rows), len(cols)), dtype=dtype)
            return source.block(rows, cols)

        def build_node(a, _li=li, _ids=ids, _nbrs=nbrs, _children=children,
                       _row=row_dofs, _col=col_dofs, _coff=child_off):
            rd, cd = _row[a], _col[a]
            D = np.ascontiguousarray(_blk(rd, cd), dtype=dtype)
            if _li > 0:
                roff, coff = _coff[a]
                for ci in range(len(_children[a])):
                    D[roff[ci]:roff[ci + 1], coff[ci]:coff[ci + 1]] = 0
            nbr_cols = (np.concatenate([_col[b] for b in _nbrs[a]])
                        if _nbrs[a] else np.empty(0, dtype=np.int64))
            nbr_rows = (np.concatenate([_row[b] for b in _nbrs[a]])
                        if _nbrs[a] else np.empty(0, dtype=np.int64))
            if mode == "proxy":
                node = tree.nodes[_ids[a]]
                n_eff = cfg.n_proxy
                if k_wave > 0:
                    n_eff += int(np.ceil(4.0 * k_wave * proxy_radius(node.halfwidth, cfg, tree.dim)))
                pxy = proxy_points(node, replace(cfg, n_proxy=n_eff), tree.dim)
                if rd.size:
                    t_row = np.hstack([_blk(rd, nbr_cols),
                                       source.proxy_row_block(rd, pxy)])
                else:
                    t_row = np.zeros((0, n_eff), dtype=dtype)
                if cd.size:
                    t_col = np.vstack([_blk(nbr_rows, cd),
                                       source.proxy_col_block(cd, pxy)])
                else:
                    t_col = np.zeros((n_eff, 0), dtype=dtype)
            else:
                other_c = np.concatenate([_col[b] for b in range(len(_ids)) if b != a])
                other_r = np.concatenate([_row[b] for b in range(len(_ids)) if b != a])
                t_row = _blk(rd, other_c)
                t_col = _blk(other_r, cd)

            idr = _run_id(t_row.T, eps, seed, (_li, a, 0))
            idc = _run_id(t_col, eps, seed, (_li, a, 1))
            if equalize_ranks and idr.rank != idc.rank:
                k = max(idr.rank, idc.rank)
                if idr.rank < k:
                    idr = id_fixed_precision(t_row.T, eps, min_rank=k)
                else:
                    idc = id_fixed_precision(t_col, eps, min_rank=k)

            ro = np.argsort(idr.skel)
            co = np.argsort(idc.skel)
            L = np.ascontiguousarray(idr.proj.T[:, ro], dtype=dtype)
            R = np.ascontiguousarray(idc.proj[co, :], dtype=dtype)
            return CompressedNode(
                row_skel=rd[idr.skel[ro]], col_skel=cd[idc.skel[co]],
                D=D, L=L, R=R,
                children=_children[a])

        nodes = _map_nodes(build_node, list(range(len(ids))))
        lv = CompressedLevel(nodes)
        levels.append(lv)
        prev_row = [nd.row_skel for nd in nodes]
        prev_col = [nd.col_skel for nd in nodes]

    # dense top-level skeleton matrix; diagonal blocks stay zero (their
    # interactions were extracted into the final D level)
    lv = levels[-1]
    S = np.zeros((lv.K_r, lv.K_c), dtype=dtype)
    for a, nda in enumerate(lv.nodes):
        for b, ndb in enumerate(lv.nodes):
            if a == b or nda.k_r == 0 or ndb.k_c == 0:
                continue
            S[lv.kr_off[a]:lv.kr_off[a + 1], lv.kc_off[b]:lv.kc_off[b + 1]] = \
                source.block(nda.row_skel, ndb.col_skel)

    return CompressedMatrix(levels=levels, S=S, n=n, eps=eps,
                            perm=tree.perm.copy(), scalar_field=field, tree=tree)


def _run_id(A, eps, seed, tag):
    """Deterministic ID unless the block is so tall that sketching pays off
    (global mode); the randomized seed mixes in the node tag for
    reproducibility."""
    m, nn = A.shape
    if m > max(_RANDOMIZED_CUTOFF, 4 * nn + 256):
        sub = (seed * 1000003 + hash(tag)) % (2 ** 31)
        return id_randomized(A, eps, seed=sub)
    return id_fixed_precision(A, eps)


# ---------------------------------------------------------------------------
# binary container (shared with the factored-inverse serialization)

_MAGIC = b"SKLC"
_VERSION = 1
_DT_CODE = {np.dtype(np.float64): 0, np.dtype(np.complex128): 1}
_CODE_DT = {v: k for k, v in _DT_CODE.items()}


def _write_arr(f, a):
    a = np.ascontiguousarray(a)
    code = {np.dtype(np.int64): 2}.get(a.dtype) or _DT_CODE[a.dtype]
    f.write(struct.pack("<BB", code, a.ndim))
    f.write(struct.pack(f"<{a.ndim}q", *a.shape))
    f.write(a.tobytes())


def _read_arr(f):
    code, ndim = struct.unpack("<BB", f.read(2))
    shape = struct.unpack(f"<{ndim}q", f.read(8 * ndim))
    dt = np.dtype(np.int64) if code == 2 else _CODE_DT[code]
    nbytes = int(np.prod(shape)) * dt.itemsize
    return np.frombuffer(f.read(nbytes), dtype=dt).reshape(shape).copy()


def serialize_compressed(cm: CompressedMatrix) -> bytes:
    """Bit-exact binary container: header (N, levels, eps, field), the
    permutation, per-level block tables, dense top S.  See README."""
    f = io.BytesIO()
    f.write(_MAGIC)
    f.write(struct.pack("<HBB", _VERSION, 1, 1 if cm.scalar_field == "complex" else 0))
    f.write(struct.pack("<qId", cm.n, cm.nlevels, cm.eps))
    _write_arr(f, cm.perm.astype(np.int64))
    for lv in cm.levels:
        f.write(struct.pack("<I", len(lv.nodes)))
        for nd in lv.nodes:
            ch = nd.children if nd.children is not None else np.empty(0, dtype=np.int64)
            f.write(struct.pack("<B", 1 if nd.children is not None else 0))
            _write_arr(f, np.asarray(ch, dtype=np.int64))
            _write_arr(f, nd.row_skel.astype(np.int64))
            _write_arr(f, nd.col_skel.astype(np.int64))
            _write_arr(f, nd.D)
            _write_arr(f, nd.L)
            _write_arr(f, nd.R)
    _write_arr(f, cm.S)
    return f.getvalue()


def deserialize_compressed(data: bytes) -> CompressedMatrix:
    f = io.BytesIO(data)
    if f.read(4) != _MAGIC:
        raise InvalidInput("not a skelkit compressed-matrix container")
    version, _kind, fieldcode = struct.unpack("<HBB", f.read(4))
    if version != _VERSION:
        raise InvalidInput(f"unsupported container version {version}")
    n, nlev, eps = struct.unpack("<qId", f.read(20))
    perm = _read_arr(f)
    levels = []
    for _ in range(nlev):
        (count,) = struct.unpack("<I", f.read(4))
        nodes = []
        for _ in range(count):
            (has_ch,) = struct.unpack("<B", f.read(1))
            ch = _read_arr(f)
            row_skel = _read_arr(f)
            col_skel = _read_arr(f)
            D = _read_arr(f)
            L = _read_arr(f)
            R = _read_arr(f)
            nodes.append(CompressedNode(row_skel=row_skel, col_skel=col_skel,
                                        D=D, L=L, R=R,
                                        children=ch if has_ch else None))
        levels.append(CompressedLevel(nodes))
    S = _read_arr(f)
    return CompressedMatrix(levels=levels, S=S, n=n, eps=eps, perm=perm,
                            scalar_field="complex" if fieldcode else "real",
                            tree=None)


def save_compressed(cm: CompressedMatrix, path):
    with open(path, "wb") as f:
        f.write(serialize_compressed(cm))


def load_compressed(path) -> CompressedMatrix:
    with open(path, "rb") as f:
        return deserialize_compressed(f.read())
