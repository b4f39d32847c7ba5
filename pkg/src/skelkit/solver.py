"""Sparse embedding, telescoping factorization and solves.

A compressed matrix D1 + L1[...]R1 embeds into a structured sparse system
by introducing per-level auxiliary variables z = R x and y = S z:

    [ D1 L1                 ] [x ]   [b]
    [ R1       -I           ] [y1]   [0]
    [    -I  D2   L2        ] [z1] = [0]
    [         R2  ...       ] [..]   [.]
    [             ...  -I   ]
    [              -I   S   ]

Rather than handing that system to a generic sparse LU, the factorization
here eliminates blockwise: per node Lambda = (R D^-1 L)^-1, then
Dd = D^-1 - D^-1 L Lambda R D^-1, Ld = D^-1 L Lambda, Rd = Lambda R D^-1,
and the recursion continues on Shat = Lambda + S one level up.  The
embedding is still assembled (and exportable as Matrix Market) so an
external sparse solver can serve as an independent cross-check.
"""

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import LinAlgWarning, lu_factor, lu_solve

from .errors import InvalidInput, NotConverged, SingularBlock
from .skel import CompressedMatrix, _map_nodes

_RCOND_WARN = 1e-14


@dataclass
class SparseEmbedding:
    """Coordinate-form embedding with entries grouped into labeled blocks
    ("D1", "L1", "R1", "I:y1", "I:z1", ..., "S").  Variable layout is
    [x, y1, z1, ..., yL, zL]; the right-hand side is [b, 0, ..., 0]."""

    m: int
    n: int
    dtype: np.dtype
    blocks: dict
    perm: np.ndarray

    def to_coo(self):
        rows = np.concatenate([v[0] for v in self.blocks.values()])
        cols = np.concatenate([v[1] for v in self.blocks.values()])
        vals = np.concatenate([v[2] for v in self.blocks.values()])
        return rows, cols, vals

    def to_dense(self):
        A = np.zeros((self.m, self.m), dtype=self.dtype)
        rows, cols, vals = self.to_coo()
        A[rows, cols] = vals
        return A

    def rhs(self, b):
        b = np.asarray(b)
        if b.shape[0] != self.n:
            raise InvalidInput("rhs length mismatch")
        out = np.zeros((self.m,) + b.shape[1:], dtype=np.result_type(self.dtype, b.dtype))
        out[:self.n] = b[self.perm]
        return out

    def extract_x(self, sol):
        out = np.empty_like(sol[:self.n])
        out[self.perm] = sol[:self.n]
        return out

    @property
    def nnz(self):
        return sum(len(v[0]) for v in self.blocks.values())


def _block_entries(blocks, label, r0, c0, B):
    nz = np.nonzero(B)
    if len(nz[0]) == 0:
        return
    rows = nz[0] + r0
    cols = nz[1] + c0
    vals = B[nz]
    if label in blocks:
        old = blocks[label]
        blocks[label] = (np.concatenate([old[0], rows]),
                         np.concatenate([old[1], cols]),
                         np.concatenate([old[2], vals]))
    else:
        blocks[label] = (rows, cols, vals)


def assemble_embedding(cm: CompressedMatrix) -> SparseEmbedding:
    """Build the coordinate-form multilevel embedding of ``cm``."""
    n = cm.n
    dtype = cm.dtype
    blocks = {}
    if cm.nlevels == 0:
        _block_entries(blocks, "S", 0, 0, cm.S)
        return SparseEmbedding(m=n, n=n, dtype=dtype, blocks=blocks, perm=cm.perm)

    # column offsets of [x, y1, z1, y2, z2, ...]
    col_off = [0, n]
    for lv in cm.levels:
        col_off.append(col_off[-1] + lv.K_r)   # y(l)
        col_off.append(col_off[-1] + lv.K_c)   # z(l)
    # row offsets of [b-rows, z1-coupling, y1-coupling, z2-coupling, ...]
    row_off = [0, n]
    for lv in cm.levels:
        row_off.append(row_off[-1] + lv.K_c)
        row_off.append(row_off[-1] + lv.K_r)
    m = col_off[-1]
    assert row_off[-1] == m

    for li, lv in enumerate(cm.levels):
        l1 = li + 1
        # this level's D/L rows: b-rows at the finest level, otherwise the
        # y(l-1) coupling rows
        dl_rows = 0 if li == 0 else row_off[2 * li]
        dl_cols = 0 if li == 0 else col_off[2 * li]       # x or z(l-1)
        y_cols = col_off[2 * li + 1]
        z_cols = col_off[2 * li + 2]
        r_rows = row_off[2 * li + 1]
        for a, nd in enumerate(lv.nodes):
            _block_entries(blocks, f"D{l1}", dl_rows + lv.row_dof_off[a],
                           dl_cols + lv.col_dof_off[a], nd.D)
            _block_entries(blocks, f"L{l1}", dl_rows + lv.row_dof_off[a],
                           y_cols + lv.kr_off[a], nd.L)
            _block_entries(blocks, f"R{l1}", r_rows + lv.kc_off[a],
                           dl_cols + lv.col_dof_off[a], nd.R)
        # coupling identities: R(l) x - z(l) = 0 and -y(l) + [next level] = 0
        idx = np.arange(lv.K_c)
        blocks[f"I:z{l1}"] = (r_rows + idx, z_cols + idx,
                              np.full(lv.K_c, -1.0, dtype=dtype))
        idy = np.arange(lv.K_r)
        y_rows = row_off[2 * li + 2]
        blocks[f"I:y{l1}"] = (y_rows + idy, y_cols + idy,
                              np.full(lv.K_r, -1.0, dtype=dtype))

    # S couples the y(L) rows to the z(L) columns
    _block_entries(blocks, "S", row_off[2 * cm.nlevels], col_off[2 * cm.nlevels], cm.S)
    return SparseEmbedding(m=m, n=n, dtype=dtype, blocks=blocks, perm=cm.perm)


@dataclass
class FactoredNode:
    Dd: np.ndarray          # D^-1 - D^-1 L Lambda R D^-1
    Ld: np.ndarray          # D^-1 L Lambda
    Rd: np.ndarray          # Lambda R D^-1
    Lam: np.ndarray         # (R D^-1 L)^-1, needed one level up
    lu_D: tuple             # pivoted LU of the effective diagonal block
    lu_M: tuple | None      # pivoted LU of Lambda^-1 = R D^-1 L


class FactoredLevel:
    def __init__(self, nodes, ref):
        self.nodes = nodes
        self.row_dof_off = ref.row_dof_off
        self.col_dof_off = ref.col_dof_off
        self.kr_off = ref.kr_off
        self.kc_off = ref.kc_off


@dataclass
class FactoredInverse:
    levels: list
    S_lu: tuple
    n: int
    perm: np.ndarray
    scalar_field: str
    warnings: list = field(default_factory=list)

    @property
    def dtype(self):
        return np.complex128 if self.scalar_field == "complex" else np.float64

    def solve(self, b):
        return solve(self, b)


def _rcond1(A, Ainv):
    if A.size == 0:
        return 1.0
    na = np.abs(A).sum(axis=0).max()
    nb = np.abs(Ainv).sum(axis=0).max()
    return 1.0 / (na * nb) if na * nb > 0 else 0.0


def factor(cm: CompressedMatrix, regularize: float = 0.0) -> FactoredInverse:
    """Telescoping inverse of a compressed matrix.

    Per level and node, the effective diagonal block (extracted D plus the
    children's Lambda fill-in) is LU-factored with partial pivoting; an
    exactly zero pivot raises SingularBlock naming the level and node.
    Blocks with reciprocal condition below 1e-14 are recorded in
    ``warnings`` rather than aborting.  ``regularize`` adds delta*I to every
    diagonal block before factorization (off by default)."""
    dtype = cm.dtype
    warnings_list = []

    def _lu(block, level, node, what):
        if block.shape[0] != block.shape[1]:
            raise InvalidInput(
                f"non-square {what} block ({block.shape[0]}x{block.shape[1]}) at "
                f"level {level}, node {node}; compress with equalize_ranks=True")
        if block.size == 0:
            return None
        if regularize:
            block = block + regularize * np.eye(block.shape[0], dtype=dtype)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", LinAlgWarning)
            lu, piv = lu_factor(block, check_finite=False)
        if np.any(np.diag(lu) == 0):
            raise SingularBlock(level, node, what)
        return lu, piv

    if cm.nlevels == 0:
        S_lu = _lu(np.ascontiguousarray(cm.S, dtype=dtype), "top", 0, "S")
        return FactoredInverse(levels=[], S_lu=S_lu, n=cm.n, perm=cm.perm.copy(),
                               scalar_field=cm.scalar_field, warnings=warnings_list)

    lam_prev = None
    flevels = []
    for li, lv in enumerate(cm.levels):

        def factor_node(a, _li=li, _lv=lv, _lam=lam_prev):
            nd = _lv.nodes[a]
            D_eff = np.array(nd.D, dtype=dtype)
            if _li > 0:
                ro = co = 0
                for ci in nd.children:
                    lam_c = _lam[ci]
                    D_eff[ro:ro + lam_c.shape[0], co:co + lam_c.shape[1]] = lam_c
                    ro += lam_c.shape[0]
                    co += lam_c.shape[1]
            nn = D_eff.shape[0]
            k = nd.k_r
            lu_D = _lu(D_eff, _li + 1, a, "D")
            if lu_D is None:
                return FactoredNode(Dd=np.zeros((0, 0), dtype=dtype),
                                    Ld=np.zeros((0, 0), dtype=dtype),
                                    Rd=np.zeros((0, 0), dtype=dtype),
                                    Lam=np.zeros((0, 0), dtype=dtype),
                                    lu_D=None, lu_M=None)
            Dinv = lu_solve(lu_D, np.eye(nn, dtype=dtype), check_finite=False)
            rc = _rcond1(D_eff, Dinv)
            if rc < _RCOND_WARN:
                warnings_list.append((_li + 1, a, "D", rc))
            if k == 0:
                return FactoredNode(
                    Dd=Dinv, Ld=np.zeros((nn, 0), dtype=dtype),
                    Rd=np.zeros((0, nn), dtype=dtype),
                    Lam=np.zeros((0, 0), dtype=dtype), lu_D=lu_D, lu_M=None)
            X = lu_solve(lu_D, nd.L, check_finite=False)            # D^-1 L
            RD = lu_solve(lu_D, nd.R.T, trans=1, check_finite=False).T  # R D^-1
            M_blk = nd.R @ X
            lu_M = _lu(M_blk, _li + 1, a, "Lambda")
            Lam = lu_solve(lu_M, np.eye(k, dtype=dtype), check_finite=False)
            rc = _rcond1(M_blk, Lam)
            if rc < _RCOND_WARN:
                warnings_list.append((_li + 1, a, "Lambda", rc))
            Rd = Lam @ RD
            return FactoredNode(Dd=Dinv - X @ Rd, Ld=X @ Lam, Rd=Rd,
                                Lam=Lam, lu_D=lu_D, lu_M=lu_M)

        fnodes = _map_nodes(factor_node, list(range(len(lv.nodes))))
        flevels.append(FactoredLevel(fnodes, lv))
        lam_prev = [fn.Lam for fn in fnodes]

    # top: Shat = Lambda + S with the final level's Lambdas on the diagonal
    top = cm.levels[-1]
    Shat = np.array(cm.S, dtype=dtype)
    for a in range(len(top.nodes)):
        lam = lam_prev[a]
        Shat[top.kr_off[a]:top.kr_off[a + 1], top.kc_off[a]:top.kc_off[a + 1]] = lam
    S_lu = _lu(Shat, "top", 0, "S")
    return FactoredInverse(levels=flevels, S_lu=S_lu, n=cm.n, perm=cm.perm.copy(),
                           scalar_field=cm.scalar_field, warnings=warnings_list)


def solve(fi: FactoredInverse, b) -> np.ndarray:
    """Apply the factored inverse: x = Dd1 b + Ld1 [ ... Shat^-1 ... ] Rd1 b,
    mirroring the structure (and cost) of the forward apply."""
    b = np.asarray(b)
    single = b.ndim == 1
    if b.shape[0] != fi.n:
        raise InvalidInput(f"length mismatch: system is {fi.n}, rhs {b.shape[0]}")
    dtype = np.result_type(fi.dtype, b.dtype)
    bc = b.reshape(fi.n, -1).astype(dtype, copy=False)
    bt = bc[fi.perm]

    if not fi.levels:
        xt = lu_solve(fi.S_lu, bt, check_finite=False)
    else:
        us = [bt]
        u = bt
        for lv in fi.levels:
            nxt = np.empty((int(lv.kr_off[-1]), bt.shape[1]), dtype=dtype)
            for a, fn in enumerate(lv.nodes):
                if fn.Rd.shape[0]:
                    nxt[lv.kr_off[a]:lv.kr_off[a + 1]] = \
                        fn.Rd @ u[lv.row_dof_off[a]:lv.row_dof_off[a + 1]]
            us.append(nxt)
            u = nxt
        v = lu_solve(fi.S_lu, u, check_finite=False) if u.shape[0] else u
        for li in range(len(fi.levels) - 1, -1, -1):
            lv = fi.levels[li]
            w = np.empty((int(lv.col_dof_off[-1]), bt.shape[1]), dtype=dtype)
            ul = us[li]
            for a, fn in enumerate(lv.nodes):
                seg = fn.Dd @ ul[lv.row_dof_off[a]:lv.row_dof_off[a + 1]]
                if fn.Ld.shape[1]:
                    seg = seg + fn.Ld @ v[lv.kc_off[a]:lv.kc_off[a + 1]]
                w[lv.col_dof_off[a]:lv.col_dof_off[a + 1]] = seg
            v = w
        xt = v

    out = np.empty_like(bt)
    out[fi.perm] = xt
    return out[:, 0] if single else out


def _as_operator(op):
    if callable(op):
        return op
    mat = np.asarray(op)
    return lambda v: mat @ v


def gmres(apply_fn, b, tol=1e-9, max_iter=None, precond=None):
    """Full (no restart) GMRES with modified Gram-Schmidt and a single
    re-orthogonalization pass when loss of orthogonality is detected.

    Returns (x, iterations), where iterations counts applications of the
    operator.  Raises NotConverged (carrying the best iterate) if the
    relative residual has not reached tol within max_iter steps.
    """
    if not tol > 0:
        raise InvalidInput("tol must be positive")
    A = _as_operator(apply_fn)
    M = _as_operator(precond) if precond is not None else None
    b = np.asarray(b)
    n = b.shape[0]
    if max_iter is None:
        max_iter = n
    max_iter = min(max_iter, n)

    r0 = M(b) if M is not None else b
    r0 = np.asarray(r0)
    dtype = np.result_type(r0.dtype, np.float64)
    beta = np.linalg.norm(r0)
    if beta == 0:
        return np.zeros(n, dtype=dtype), 0

    V = np.empty((max_iter + 1, n), dtype=dtype)
    V[0] = r0 / beta
    H = np.zeros((max_iter + 1, max_iter), dtype=dtype)
    cs = np.zeros(max_iter + 1, dtype=dtype)
    sn = np.zeros(max_iter + 1, dtype=dtype)
    g = np.zeros(max_iter + 1, dtype=dtype)
    g[0] = beta

    def _solution(j):
        y = np.zeros(j, dtype=dtype)
        for i in range(j - 1, -1, -1):
            y[i] = (g[i] - H[i, i + 1:j] @ y[i + 1:j]) / H[i, i]
        return V[:j].T @ y

    res = 1.0
    j = 0
    for j in range(max_iter):
        w = A(V[j])
        if M is not None:
            w = M(w)
        w = np.asarray(w, dtype=dtype).copy()
        norm0 = np.linalg.norm(w)
        for i in range(j + 1):
            hij = np.vdot(V[i], w)
            H[i, j] = hij
            w -= hij * V[i]
        # DGKS-style correction when the projection removed nearly everything
        corr = V[:j + 1].conj() @ w
        if np.linalg.norm(corr) > 1e-10 * max(norm0, 1e-300):
            w -= V[:j + 1].T @ corr
            H[:j + 1, j] += corr
        H[j + 1, j] = np.linalg.norm(w)
        if H[j + 1, j] > 0:
            V[j + 1] = w / H[j + 1, j]
        # apply accumulated Givens rotations, then form a new one
        for i in range(j):
            t = cs[i] * H[i, j] + sn[i] * H[i + 1, j]
            H[i + 1, j] = -np.conj(sn[i]) * H[i, j] + cs[i] * H[i + 1, j]
            H[i, j] = t
        denom = np.sqrt(np.abs(H[j, j]) ** 2 + np.abs(H[j + 1, j]) ** 2)
        if denom == 0:
            res = 0.0
            j += 1
            break
        cs[j] = np.abs(H[j, j]) / denom
        phase = H[j, j] / np.abs(H[j, j]) if H[j, j] != 0 else 1.0
        sn[j] = phase * np.conj(H[j + 1, j]) / denom
        H[j, j] = phase * denom
        H[j + 1, j] = 0.0
        g[j + 1] = -np.conj(sn[j]) * g[j]
        g[j] = cs[j] * g[j]
        res = abs(g[j + 1]) / beta
        if res <= tol:
            return _solution(j + 1), j + 1
    x = _solution(j + 1)
    raise NotConverged(x, float(res), int(max_iter))


# ---------------------------------------------------------------------------
# Matrix Market export of the embedding

def export_matrix_market(se: SparseEmbedding, path):
    """Coordinate-format Matrix Market file: 1-based indices, entries sorted
    by (column, row), 17 significant digits (bit-exact decimal round trip)."""
    rows, cols, vals = se.to_coo()
    order = np.lexsort((rows, cols))
    rows, cols, vals = rows[order], cols[order], vals[order]
    complex_field = np.issubdtype(se.dtype, np.complexfloating)
    field_name = "complex" if complex_field else "real"
    try:
        with open(path, "w") as f:
            f.write(f"%%MatrixMarket matrix coordinate {field_name} general\n")
            f.write(f"{se.m} {se.m} {len(vals)}\n")
            if complex_field:
                for r, c, v in zip(rows, cols, vals):
                    f.write(f"{r + 1} {c + 1} {v.real:.17g} {v.imag:.17g}\n")
            else:
                for r, c, v in zip(rows, cols, vals):
                    f.write(f"{r + 1} {c + 1} {v:.17g}\n")
    except OSError:
        raise


# ---------------------------------------------------------------------------
# factored-inverse serialization (same binary container as CompressedMatrix)

def serialize_factored(fi: FactoredInverse) -> bytes:
    import io
    import struct

    from .skel import _MAGIC, _VERSION, _write_arr
    f = io.BytesIO()
    f.write(_MAGIC)
    f.write(struct.pack("<HBB", _VERSION, 2, 1 if fi.scalar_field == "complex" else 0))
    f.write(struct.pack("<qId", fi.n, len(fi.levels), 0.0))
    _write_arr(f, fi.perm.astype(np.int64))
    for lv in fi.levels:
        f.write(struct.pack("<I", len(lv.nodes)))
        for fn in lv.nodes:
            _write_arr(f, fn.Dd)
            _write_arr(f, fn.Ld)
            _write_arr(f, fn.Rd)
    if fi.S_lu is None:
        _write_arr(f, np.zeros((0, 0), dtype=fi.dtype))
        _write_arr(f, np.zeros(0, dtype=np.int64))
    else:
        _write_arr(f, fi.S_lu[0])
        _write_arr(f, np.asarray(fi.S_lu[1], dtype=np.int64))
    return f.getvalue()


def deserialize_factored(data: bytes) -> FactoredInverse:
    import io
    import struct

    from .skel import _MAGIC, _VERSION, _read_arr
    f = io.BytesIO(data)
    if f.read(4) != _MAGIC:
        raise InvalidInput("not a skelkit container")
    version, kind, fieldcode = struct.unpack("<HBB", f.read(4))
    if version != _VERSION or kind != 2:
        raise InvalidInput("not a factored-inverse container")
    n, nlev, _eps = struct.unpack("<qId", f.read(20))
    perm = _read_arr(f)
    levels = []
    for _ in range(nlev):
        (count,) = struct.unpack("<I", f.read(4))
        nodes = []
        offsets = _Offsets()
        for _ in range(count):
            Dd = _read_arr(f)
            Ld = _read_arr(f)
            Rd = _read_arr(f)
            nodes.append(FactoredNode(Dd=Dd, Ld=Ld, Rd=Rd,
                                      Lam=np.zeros((0, 0), dtype=Dd.dtype),
                                      lu_D=None, lu_M=None))
            offsets.push(Dd.shape[0], Dd.shape[1], Ld.shape[1], Rd.shape[0])
        levels.append(FactoredLevel(nodes, offsets.finish()))
    lu = _read_arr(f)
    piv = _read_arr(f)
    S_lu = None if lu.size == 0 else (lu, piv.astype(np.int32))
    return FactoredInverse(levels=levels, S_lu=S_lu, n=n, perm=perm,
                           scalar_field="complex" if fieldcode else "real")


class _Offsets:
    """Rebuilds the per-level slicing tables from stored block shapes."""

    def __init__(self):
        self.rd, self.cd, self.kr, self.kc = [0], [0], [0], [0]

    def push(self, nr, nc, kr, kc):
        self.rd.append(self.rd[-1] + nr)
        self.cd.append(self.cd[-1] + nc)
        self.kr.append(self.kr[-1] + kr)
        self.kc.append(self.kc[-1] + kc)

    def finish(self):
        class Ref:
            pass

        ref = Ref()
        ref.row_dof_off = np.array(self.rd)
        ref.col_dof_off = np.array(self.cd)
        ref.kr_off = np.array(self.kr)
        ref.kc_off = np.array(self.kc)
        return ref


def save_factored(fi: FactoredInverse, path):
    with open(path, "wb") as f:
        f.write(serialize_factored(fi))


def load_factored(path) -> FactoredInverse:
    with open(path, "rb") as f:
        return deserialize_factored(f.read())


def read_matrix_market(path):
    """Minimal coordinate-format reader; returns (shape, rows, cols, vals)."""
    with open(path) as f:
        header = f.readline()
        if not header.startswith("%%MatrixMarket matrix coordinate"):
            raise InvalidInput("unsupported Matrix Market header")
        complex_field = "complex" in header
        line = f.readline()
        while line.startswith("%"):
            line = f.readline()
        mm, nn, nnz = (int(t) for t in line.split())
        rows = np.empty(nnz, dtype=np.int64)
        cols = np.empty(nnz, dtype=np.int64)
        vals = np.empty(nnz, dtype=np.complex128 if complex_field else np.float64)
        for i in range(nnz):
            parts = f.readline().split()
            rows[i] = int(parts[0]) - 1
            cols[i] = int(parts[1]) - 1
            if complex_field:
                vals[i] = float(parts[2]) + 1j * float(parts[3])
            else:
                vals[i] = float(parts[2])
    return (mm, nn), rows, cols, vals
