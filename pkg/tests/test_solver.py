import numpy as np
import pytest

from skelkit import bie
from skelkit.errors import InvalidInput, NotConverged, SingularBlock
from skelkit.geom import PointSet, build_tree
from skelkit.kernels import KernelSpec, eval_block
from skelkit.skel import (CompressedLevel, CompressedMatrix, CompressedNode,
                          apply, compress)
from skelkit.solver import (assemble_embedding, export_matrix_market, factor,
                            gmres, read_matrix_market, solve)

LAPLACE2 = KernelSpec("laplace", 2)


def circle_points(n):
    th = 2 * np.pi * np.arange(n) / n
    return PointSet(np.column_stack([np.cos(th), np.sin(th)]))


def one_level_synthetic(seed=0, sizes=(50, 50), k=5, diag_shift=4.0):
    """Hand-built one-level block-separable matrix A = D + L S R with known
    blocks, well conditioned via a diagonal shift.  Returns (cm, A_dense)."""
    rng = np.random.default_rng(seed)
    p = len(sizes)
    offs = np.concatenate([[0], np.cumsum(sizes)])
    n = offs[-1]
    nodes = []
    Ds, Ls, Rs = [], [], []
    for a, na in enumerate(sizes):
        D = rng.standard_normal((na, na)) + diag_shift * np.eye(na)
        L = rng.standard_normal((na, k))
        R = rng.standard_normal((k, na))
        Ds.append(D)
        Ls.append(L)
        Rs.append(R)
        skel = np.arange(offs[a], offs[a] + k)
        nodes.append(CompressedNode(skel, skel.copy(), D, L, R, None))
    S = np.zeros((p * k, p * k))
    for a in range(p):
        for b in range(p):
            if a != b:
                S[a * k:(a + 1) * k, b * k:(b + 1) * k] = rng.standard_normal((k, k))
    cm = CompressedMatrix(levels=[CompressedLevel(nodes)], S=S, n=n, eps=1e-15,
                          perm=np.arange(n), scalar_field="real")
    A = np.zeros((n, n))
    for a in range(p):
        sa = slice(offs[a], offs[a + 1])
        A[sa, sa] = Ds[a]
        for b in range(p):
            if a != b:
                sb = slice(offs[b], offs[b + 1])
                A[sa, sb] = Ls[a] @ S[a * k:(a + 1) * k, b * k:(b + 1) * k] @ Rs[b]
    return cm, A


class TestEmbedding:
    def test_one_level_dimension(self):
        cm, _ = one_level_synthetic(sizes=(50, 50), k=5)  # N=100, Kr=Kc=10
        se = assemble_embedding(cm)
        assert se.m == 120
        assert se.n == 100

    def test_degenerate_is_s_itself(self):
        pts = circle_points(30)
        cm = compress(LAPLACE2, pts, build_tree(pts, 64), 1e-9)
        assert cm.nlevels == 0
        se = assemble_embedding(cm)
        assert se.m == 30
        dense = se.to_dense()
        full = eval_block(LAPLACE2, pts, pts)
        np.testing.assert_array_equal(dense[np.ix_(np.argsort(cm.perm)[cm.perm],
                                                   np.arange(30))][0:0], dense[0:0])
        np.testing.assert_allclose(dense, full[np.ix_(cm.perm, cm.perm)], atol=0)

    def test_block_labels(self):
        # one level reduces to the 3x3 block pattern [D L; R 0 -I; 0 -I S]:
        # exactly these labeled blocks and nothing else
        cm, _ = one_level_synthetic()
        se = assemble_embedding(cm)
        assert set(se.blocks) == {"D1", "L1", "R1", "I:y1", "I:z1", "S"}

    def test_dense_elimination_matches_compressed_solve(self):
        pts = circle_points(512)
        tree = build_tree(pts, 64)
        # shifted single-layer system so the matrix is well conditioned
        sys_ = bie.discretize_dirichlet(bie.circle(1.0, 512), LAPLACE2)
        tree, cm = bie.compress_system(sys_, 1e-9)
        se = assemble_embedding(cm)
        E = se.to_dense()
        Atilde = apply(cm, np.eye(512))
        rng = np.random.default_rng(0)
        for _ in range(5):
            b = rng.standard_normal(512)
            xe = se.extract_x(np.linalg.solve(E, se.rhs(b)))
            xd = np.linalg.solve(Atilde, b)
            assert np.linalg.norm(xe - xd) / np.linalg.norm(xd) <= 1e-10

    def test_consistency_forward_recursion(self):
        # filling y/z by the coupling rows must reproduce apply() in the
        # first block row and zero out all coupling rows
        pts = circle_points(512)
        tree = build_tree(pts, 64)
        cm = compress(LAPLACE2, pts, tree, 1e-9)
        assert cm.nlevels >= 2
        se = assemble_embedding(cm)
        E = se.to_dense()
        rng = np.random.default_rng(1)
        x = rng.standard_normal(512)
        xt = x[cm.perm]
        # forward recursion: z(l) = R z(l-1), then y downward from S
        zs = []
        u = xt
        for lv in cm.levels:
            nxt = np.zeros(lv.K_c)
            for a, nd in enumerate(lv.nodes):
                if nd.k_c:
                    nxt[lv.kc_off[a]:lv.kc_off[a + 1]] = \
                        nd.R @ u[lv.col_dof_off[a]:lv.col_dof_off[a + 1]]
            zs.append(nxt)
            u = nxt
        ys = [None] * cm.nlevels
        v = cm.S @ zs[-1]
        ys[-1] = v
        for li in range(cm.nlevels - 1, 0, -1):
            lv = cm.levels[li]
            w = np.zeros(int(lv.row_dof_off[-1]))
            for a, nd in enumerate(lv.nodes):
                seg = nd.D @ zs[li - 1][lv.col_dof_off[a]:lv.col_dof_off[a + 1]]
                if nd.k_r:
                    seg = seg + nd.L @ ys[li][lv.kr_off[a]:lv.kr_off[a + 1]]
                w[lv.row_dof_off[a]:lv.row_dof_off[a + 1]] = seg
            ys[li - 1] = w
        vec = np.concatenate([xt] + [np.concatenate([ys[li], zs[li]])
                                     for li in range(cm.nlevels)])
        out = E @ vec
        ref = apply(cm, x)[cm.perm]
        assert np.linalg.norm(out[:512] - ref) / np.linalg.norm(ref) <= 1e-13
        assert np.abs(out[512:]).max() <= 1e-13 * np.abs(ref).max()


class TestFactor:
    def test_diagonal_matrix_trivial_compression(self):
        # 1x1 blocks with empty skeletons: solve is exact division
        nodes = [CompressedNode(np.empty(0, dtype=int), np.empty(0, dtype=int),
                                np.array([[2.0]]), np.zeros((1, 0)), np.zeros((0, 1)), None),
                 CompressedNode(np.empty(0, dtype=int), np.empty(0, dtype=int),
                                np.array([[3.0]]), np.zeros((1, 0)), np.zeros((0, 1)), None)]
        cm = CompressedMatrix(levels=[CompressedLevel(nodes)], S=np.zeros((0, 0)),
                              n=2, eps=1e-15, perm=np.arange(2), scalar_field="real")
        fi = factor(cm)
        b = np.array([4.0, 9.0])
        np.testing.assert_array_equal(solve(fi, b), [2.0, 3.0])

    def test_synthetic_matches_dense_inverse(self):
        cm, A = one_level_synthetic(seed=3, sizes=(40, 35, 45), k=4)
        fi = factor(cm)
        rng = np.random.default_rng(5)
        b = rng.standard_normal(A.shape[0])
        x = solve(fi, b)
        xd = np.linalg.solve(A, b)
        assert np.linalg.norm(x - xd) / np.linalg.norm(xd) <= 1e-10

    def test_circle_double_layer_factor(self):
        sys_ = bie.discretize_dirichlet(bie.circle(1.0, 512), LAPLACE2)
        tree, cm = bie.compress_system(sys_, 1e-9)
        fi = factor(cm)
        assert fi.warnings == []
        rng = np.random.default_rng(2)
        b = rng.standard_normal(512)
        x = solve(fi, b)
        res = np.linalg.norm(apply(cm, x) - b) / np.linalg.norm(b)
        assert res <= 1e-8

    def test_solve_apply_roundtrip_bound(self):
        pts = circle_points(512)
        sys_ = bie.discretize_dirichlet(bie.circle(1.0, 512), LAPLACE2)
        tree, cm = bie.compress_system(sys_, 1e-9)
        fi = factor(cm)
        # condition estimate by power iteration on the compressed operator
        rng = np.random.default_rng(3)
        v = rng.standard_normal(512)
        for _ in range(20):
            v = apply(cm, v)
            v /= np.linalg.norm(v)
        sigma_max = np.linalg.norm(apply(cm, v))
        w = rng.standard_normal(512)
        for _ in range(20):
            w = solve(fi, w)
            w /= np.linalg.norm(w)
        sigma_min = 1.0 / np.linalg.norm(solve(fi, w))
        kappa = sigma_max / sigma_min
        b = rng.standard_normal(512)
        res = np.linalg.norm(apply(cm, solve(fi, b)) - b) / np.linalg.norm(b)
        assert res <= 100 * cm.eps * kappa

    def test_multiple_rhs_reuse(self):
        cm, A = one_level_synthetic(seed=9)
        fi = factor(cm)
        rng = np.random.default_rng(0)
        B = rng.standard_normal((A.shape[0], 10))
        X = solve(fi, B)
        assert X.shape == B.shape
        np.testing.assert_allclose(A @ X, B, atol=1e-9 * np.abs(B).max())

    def test_singular_block_raises_and_regularize_rescues(self):
        cm, _ = one_level_synthetic(seed=1, sizes=(8, 8), k=2)
        cm.levels[0].nodes[1].D[:] = 0.0
        with pytest.raises(SingularBlock) as exc:
            factor(cm)
        assert exc.value.level == 1
        assert exc.value.node == 1
        fi = factor(cm, regularize=1e-8)
        assert fi is not None

    def test_length_mismatch(self):
        cm, _ = one_level_synthetic()
        fi = factor(cm)
        with pytest.raises(InvalidInput):
            solve(fi, np.zeros(7))
        assert np.all(solve(fi, np.zeros(cm.n)) == 0.0)


class TestGmres:
    def test_identity_one_iteration(self):
        b = np.arange(1.0, 6.0)
        x, it = gmres(lambda v: v, b, tol=1e-12)
        assert it == 1
        np.testing.assert_allclose(x, b, rtol=1e-12)

    def test_diagonal_krylov_bound(self):
        d = np.arange(1.0, 11.0)
        b = np.ones(10)
        x, it = gmres(lambda v: d * v, b, tol=1e-12)
        assert it <= 10
        np.testing.assert_allclose(x, b / d, rtol=1e-10)

    def test_random_system_matches_dense(self):
        rng = np.random.default_rng(8)
        A = rng.standard_normal((50, 50)) + 6 * np.eye(50)
        b = rng.standard_normal(50)
        x, it = gmres(A, b, tol=1e-12)
        xd = np.linalg.solve(A, b)
        assert np.linalg.norm(x - xd) / np.linalg.norm(xd) <= 1e-11

    def test_complex_system(self):
        rng = np.random.default_rng(9)
        A = rng.standard_normal((40, 40)) + 1j * rng.standard_normal((40, 40)) \
            + 8 * np.eye(40)
        b = rng.standard_normal(40) + 1j * rng.standard_normal(40)
        x, _ = gmres(A, b, tol=1e-12)
        assert np.linalg.norm(A @ x - b) / np.linalg.norm(b) <= 1e-11

    def test_not_converged_carries_iterate(self):
        rng = np.random.default_rng(10)
        A = rng.standard_normal((60, 60)) + 4 * np.eye(60)
        b = rng.standard_normal(60)
        with pytest.raises(NotConverged) as exc:
            gmres(A, b, tol=1e-14, max_iter=3)
        assert exc.value.iterations == 3
        assert exc.value.x.shape == (60,)
        assert 0 < exc.value.residual < 1

    def test_preconditioner_cuts_iterations(self):
        rng = np.random.default_rng(11)
        A = rng.standard_normal((80, 80)) + 10 * np.eye(80)
        b = rng.standard_normal(80)
        Ainv = np.linalg.inv(A)
        _, it_plain = gmres(A, b, tol=1e-10)
        x, it_prec = gmres(A, b, tol=1e-10, precond=Ainv)
        assert it_prec <= 2
        assert it_prec < it_plain
        assert np.linalg.norm(A @ x - b) / np.linalg.norm(b) <= 1e-9

    def test_zero_rhs(self):
        x, it = gmres(np.eye(4), np.zeros(4), tol=1e-12)
        assert it == 0
        assert np.all(x == 0)

    def test_bad_tol(self):
        with pytest.raises(InvalidInput):
            gmres(np.eye(2), np.ones(2), tol=0.0)


class TestMatrixMarket:
    def test_identity_format(self, tmp_path):
        nodes = [CompressedNode(np.empty(0, dtype=int), np.empty(0, dtype=int),
                                np.eye(1), np.zeros((1, 0)), np.zeros((0, 1)), None)
                 for _ in range(2)]
        cm = CompressedMatrix(levels=[], S=np.eye(2), n=2, eps=1e-15,
                              perm=np.arange(2), scalar_field="real")
        se = assemble_embedding(cm)
        path = tmp_path / "eye.mtx"
        export_matrix_market(se, path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "%%MatrixMarket matrix coordinate real general"
        assert lines[1] == "2 2 2"
        assert lines[2].split() == ["1", "1", "1"]
        assert lines[3].split() == ["2", "2", "1"]

    def test_roundtrip_real(self, tmp_path):
        pts = circle_points(256)
        cm = compress(LAPLACE2, pts, build_tree(pts, 64), 1e-6)
        se = assemble_embedding(cm)
        path = tmp_path / "emb.mtx"
        export_matrix_market(se, path)
        shape, rows, cols, vals = read_matrix_market(path)
        assert shape == (se.m, se.m)
        dense = np.zeros((se.m, se.m))
        dense[rows, cols] = vals
        np.testing.assert_array_equal(dense, se.to_dense())
        # cross-check with an independent reader
        from scipy.io import mmread
        ref = mmread(str(path)).toarray()
        np.testing.assert_array_equal(ref, se.to_dense())

    def test_roundtrip_complex(self, tmp_path):
        spec = KernelSpec("helmholtz", 2, wavenumber=2.0)
        pts = circle_points(200)
        cm = compress(spec, pts, build_tree(pts, 64), 1e-6)
        se = assemble_embedding(cm)
        path = tmp_path / "emb_c.mtx"
        export_matrix_market(se, path)
        header = path.read_text().splitlines()[0]
        assert "complex" in header
        first_entry = path.read_text().splitlines()[2]
        assert len(first_entry.split()) == 4  # i j re im
        shape, rows, cols, vals = read_matrix_market(path)
        dense = np.zeros((se.m, se.m), dtype=np.complex128)
        dense[rows, cols] = vals
        np.testing.assert_array_equal(dense, se.to_dense())


class TestFactoredSerialization:
    def test_roundtrip_solves_identically(self, tmp_path):
        from skelkit.solver import load_factored, save_factored
        sys_ = bie.discretize_dirichlet(bie.circle(1.0, 512), LAPLACE2)
        tree, cm = bie.compress_system(sys_, 1e-9)
        fi = factor(cm)
        path = tmp_path / "fi.bin"
        save_factored(fi, path)
        fi2 = load_factored(path)
        assert fi2.n == fi.n and fi2.scalar_field == fi.scalar_field
        b = np.random.default_rng(0).standard_normal(512)
        assert np.array_equal(solve(fi, b), solve(fi2, b))

    def test_roundtrip_complex_and_degenerate(self, tmp_path):
        from skelkit.solver import load_factored, save_factored
        spec = KernelSpec("helmholtz", 2, wavenumber=2.0)
        pts = circle_points(40)
        cm = compress(spec, pts, build_tree(pts, 64), 1e-9)
        assert cm.nlevels == 0
        fi = factor(cm)
        path = tmp_path / "fid.bin"
        save_factored(fi, path)
        fi2 = load_factored(path)
        b = np.random.default_rng(1).standard_normal(40) + 0j
        assert np.array_equal(solve(fi, b), solve(fi2, b))


def test_nonsquare_lambda_rejected():
    # rectangular skeleton blocks cannot enter the telescoping inverse
    rng = np.random.default_rng(0)
    n1 = 8
    nodes = [CompressedNode(np.arange(3), np.arange(2),
                            rng.standard_normal((n1, n1)) + 4 * np.eye(n1),
                            rng.standard_normal((n1, 3)),
                            rng.standard_normal((2, n1)), None)
             for _ in range(2)]
    S = np.zeros((6, 4))
    S[:3, 2:] = rng.standard_normal((3, 2))
    S[3:, :2] = rng.standard_normal((3, 2))
    cm = CompressedMatrix(levels=[CompressedLevel(nodes)], S=S, n=2 * n1,
                          eps=1e-15, perm=np.arange(2 * n1), scalar_field="real")
    with pytest.raises(InvalidInput, match="equalize_ranks"):
        factor(cm)


def test_threaded_factor_matches_serial(monkeypatch):
    sys_ = bie.discretize_dirichlet(bie.circle(1.0, 512), LAPLACE2)
    tree, cm = bie.compress_system(sys_, 1e-9)
    fi1 = factor(cm)
    monkeypatch.setenv("SKELKIT_THREADS", "4")
    fi2 = factor(cm)
    b = np.random.default_rng(0).standard_normal(512)
    assert np.array_equal(solve(fi1, b), solve(fi2, b))
