import numpy as np
import pytest

from tdlab import analysis, diffusion, rng
from tdlab.analysis import (LocalGraph, dirichlet_energies, is_connected,
                            jacobi_eigenvalues, lambda2, laplacian, path_graph,
                            track_dynamics, verify_decomposition,
                            verify_pairwise_bound, verify_poincare,
                            verify_variance_bound)
from tdlab.denoiser import DenoiserModel
from tdlab.errors import AnalysisError, ConfigError
from tdlab.proximity import KIND_UNIFORM, ProximityWeight

PATH3 = LocalGraph(n=3, edges=[(0, 1, 1.0), (1, 2, 1.0)])
K4 = LocalGraph(n=4, edges=[(i, j, 1.0) for i in range(4)
                            for j in range(i + 1, 4)])


def random_graph(g, n):
    # random spanning tree plus a few extra edges, random positive weights
    edges = {}
    for j in range(1, n):
        i = int(g.integers(j))
        edges[(i, j)] = float(g.uniform(0.1, 3.0))
    for _ in range(n):
        i, j = sorted(g.integers(n, size=2))
        if i != j:
            edges.setdefault((int(i), int(j)), float(g.uniform(0.1, 3.0)))
    return LocalGraph(n=n, edges=[(i, j, w) for (i, j), w in edges.items()])


class TestGraph:
    def test_path3_laplacian_matrix(self):
        expect = np.array([[1.0, -1.0, 0.0],
                           [-1.0, 2.0, -1.0],
                           [0.0, -1.0, 1.0]])
        np.testing.assert_array_equal(laplacian(PATH3), expect)

    def test_laplacian_rows_sum_to_zero(self):
        g = rng.substream(60)
        L = laplacian(random_graph(g, 9))
        np.testing.assert_allclose(L.sum(axis=1), 0.0, atol=1e-12)
        np.testing.assert_array_equal(L, L.T)

    def test_quadratic_form_is_weighted_edge_energy(self):
        g = rng.substream(61)
        graph = random_graph(g, 7)
        L = laplacian(graph)
        x = g.standard_normal(7)
        direct = sum(w * (x[i] - x[j]) ** 2 for i, j, w in graph.edges)
        assert x @ L @ x == pytest.approx(direct, rel=1e-12)

    def test_path_graph_builder(self):
        pg = path_graph([ProximityWeight(0.0, 2.5, KIND_UNIFORM), 4.0])
        assert pg.n == 3
        assert pg.edges == [(0, 1, 2.5), (1, 2, 4.0)]

    def test_connectivity(self):
        assert is_connected(PATH3)
        assert not is_connected(LocalGraph(n=4, edges=[(0, 1, 1.0),
                                                       (2, 3, 1.0)]))
        assert is_connected(LocalGraph(n=1, edges=[]))

    @pytest.mark.parametrize("bad", [
        dict(n=0, edges=[]),
        dict(n=3, edges=[(1, 1, 1.0)]),
        dict(n=3, edges=[(0, 3, 1.0)]),
        dict(n=3, edges=[(0, 1, 0.0)]),
        dict(n=3, edges=[(0, 1, 1.0), (1, 0, 2.0)]),
    ])
    def test_rejects_malformed_graphs(self, bad):
        with pytest.raises(ConfigError):
            LocalGraph(**bad)


class TestEigenvalues:
    def test_path3_spectrum(self):
        vals = jacobi_eigenvalues(laplacian(PATH3))
        np.testing.assert_allclose(vals, [0.0, 1.0, 3.0], atol=1e-10)

    def test_lambda2_path3(self):
        assert lambda2(PATH3) == pytest.approx(1.0, abs=1e-10)

    def test_lambda2_complete_graph(self):
        assert lambda2(K4) == pytest.approx(4.0, abs=1e-10)

    def test_lambda2_disconnected_is_exact_zero(self):
        split = LocalGraph(n=4, edges=[(0, 1, 1.0), (2, 3, 1.0)])
        assert lambda2(split) == 0.0

    def test_jacobi_matches_lapack_on_random_symmetric(self):
        g = rng.substream(62)
        for n in (2, 5, 11):
            m = g.standard_normal((n, n))
            m = m + m.T
            np.testing.assert_allclose(jacobi_eigenvalues(m),
                                       np.linalg.eigvalsh(m), atol=1e-8)

    def test_weighted_path_matches_lapack(self):
        g = rng.substream(63)
        graph = path_graph(list(g.uniform(0.2, 5.0, size=6)))
        assert lambda2(graph) == pytest.approx(
            float(np.linalg.eigvalsh(laplacian(graph))[1]), abs=1e-9)

    def test_jacobi_input_validation(self):
        with pytest.raises(ConfigError):
            jacobi_eigenvalues(np.zeros((2, 3)))
        with pytest.raises(ConfigError):
            jacobi_eigenvalues(np.array([[0.0, 1.0], [0.0, 0.0]]))
        with pytest.raises(ConfigError):
            lambda2(LocalGraph(n=1, edges=[]))


class TestDirichlet:
    def test_single_edge_output_energy(self):
        # one edge, unit weight, difference vector (2, 0): E_S = 0.5*1*4 = 2
        outputs = np.array([[2.0, 0.0], [0.0, 0.0]])
        e_s, e_g = dirichlet_energies(outputs, None,
                                      LocalGraph(n=2, edges=[(0, 1, 1.0)]))
        assert e_s == 2.0
        assert e_g is None

    def test_energies_match_loop_oracle(self):
        g = rng.substream(64)
        graph = random_graph(g, 6)
        f = g.standard_normal((6, 10))
        jac = g.standard_normal((6, 10, 4))
        e_s, e_g = dirichlet_energies(f, jac, graph)
        es_ref = sum(0.5 * w * np.sum((f[i] - f[j]) ** 2)
                     for i, j, w in graph.edges)
        eg_ref = sum(0.5 * w * np.sum((jac[i] - jac[j]) ** 2)
                     for i, j, w in graph.edges)
        assert e_s == pytest.approx(es_ref, rel=1e-12)
        assert e_g == pytest.approx(eg_ref, rel=1e-12)

    def test_identical_outputs_zero_energy(self):
        f = np.ones((3, 8))
        e_s, _ = dirichlet_energies(f, None, PATH3)
        assert e_s == 0.0


class TestDecomposition:
    def test_same_node_all_zero(self):
        g = rng.substream(65)
        jac = g.standard_normal((6, 4))
        f = g.standard_normal(6)
        eps = g.standard_normal(6)
        u = jac.T @ (f - eps)
        out = verify_decomposition(u, u, jac, jac, f, f, eps)
        assert out["exact_residual"] == 0.0
        assert out["paper_residual"] == 0.0
        assert out["du_norm"] == 0.0

    def test_exact_identity_and_paper_diagnostic(self):
        g = rng.substream(66)
        d, p = 7, 5
        jac_i, jac_j = g.standard_normal((2, d, p))
        f_i, f_j, eps = g.standard_normal((3, d))
        u_i = jac_i.T @ (f_i - eps)
        u_j = jac_j.T @ (f_j - eps)
        out = verify_decomposition(u_i, u_j, jac_i, jac_j, f_i, f_j, eps)
        assert out["exact_residual"] <= 1e-12 * max(out["du_norm"], 1.0)
        expect_paper = float(np.linalg.norm((jac_i - jac_j).T @ eps))
        assert out["paper_residual"] == pytest.approx(expect_paper, rel=1e-9)

    def test_constant_jacobian_makes_paper_form_exact(self):
        g = rng.substream(67)
        jac = g.standard_normal((6, 4))
        f_i, f_j, eps = g.standard_normal((3, 6))
        u_i = jac.T @ (f_i - eps)
        u_j = jac.T @ (f_j - eps)
        out = verify_decomposition(u_i, u_j, jac, jac, f_i, f_j, eps)
        assert out["exact_residual"] <= 1e-13
        assert out["paper_residual"] <= 1e-13

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ConfigError):
            verify_decomposition(np.zeros(3), np.zeros(3), np.zeros((4, 3)),
                                 np.zeros((4, 3)), np.zeros(4), np.zeros(4),
                                 np.zeros(5))


class TestInequalities:
    def test_pairwise_bound_random_trials(self):
        g = rng.substream(68)
        for _ in range(1000):
            d, p = int(g.integers(2, 8)), int(g.integers(2, 8))
            jac_i, jac_j = g.standard_normal((2, d, p))
            f_i, f_j, eps = g.standard_normal((3, d))
            u_i = jac_i.T @ (f_i - eps)
            u_j = jac_j.T @ (f_j - eps)
            G = max(np.linalg.norm(jac_i, 2), np.linalg.norm(jac_j, 2))
            F = max(np.linalg.norm(f_i - eps), np.linalg.norm(f_j - eps))
            ok, slack = verify_pairwise_bound(u_i, u_j, f_i - f_j,
                                              jac_i - jac_j, G, F)
            assert ok
            assert slack >= 0.0 or abs(slack) < 1e-9

    def test_pairwise_bound_detects_violation(self):
        # understated suprema must trip the check
        u_i = np.array([10.0, 0.0])
        u_j = np.zeros(2)
        ok, slack = verify_pairwise_bound(u_i, u_j, np.array([1.0, 0.0]),
                                          np.zeros((2, 2)), 0.1, 0.1)
        assert not ok
        assert slack < 0.0

    def test_poincare_random_trials(self):
        g = rng.substream(69)
        for _ in range(300):
            n = int(g.integers(2, 9))
            graph = random_graph(g, n)
            u = g.standard_normal((n, int(g.integers(1, 6))))
            ok, slack = verify_poincare(u, graph)
            assert ok

    def test_poincare_tight_on_fiedler_vector(self):
        # equality when u is the lambda2 eigenvector of a path
        vals, vecs = np.linalg.eigh(laplacian(PATH3))
        u = vecs[:, 1:2]
        ok, slack = verify_poincare(u, PATH3)
        assert ok
        assert abs(slack) <= 1e-12

    def test_poincare_requires_connected_graph(self):
        split = LocalGraph(n=4, edges=[(0, 1, 1.0), (2, 3, 1.0)])
        with pytest.raises(AnalysisError):
            verify_poincare(np.ones((4, 2)), split)


class TestWindowAnalysis:
    def test_report_fields_and_bound(self, tiny_model, corrupted_window):
        rep = analysis.analyze_window(tiny_model, corrupted_window, [1.0, 1.0])
        assert rep.n == 3
        assert rep.lambda2 == pytest.approx(1.0, abs=1e-10)
        assert rep.bound_holds and rep.pairwise_holds
        assert rep.grad_variance <= rep.bound_rhs * (1 + 1e-9)
        assert len(rep.d_ij_norms) == 2
        assert len(rep.decomposition) == 2
        for row in rep.decomposition:
            assert row["exact_residual"] <= 1e-10 * max(row["du_norm"], 1.0)

    def test_without_jacobians(self, tiny_model, corrupted_window):
        rep = analysis.analyze_window(tiny_model, corrupted_window,
                                      [1.0, 1.0], with_jacobians=False)
        assert rep.e_g is None and rep.G is None
        assert rep.bound_rhs is None and rep.bound_holds is None
        assert rep.e_s >= 0.0 and rep.grad_variance >= 0.0

    def test_identical_frames_give_zero_variance(self, tiny_model, sched):
        g = rng.substream(70)
        frame = g.uniform(0, 1, (1, 16, 16))
        win = diffusion.corrupt_window(
            diffusion.FrameWindow(np.stack([frame] * 3)), sched, 71)
        rep = verify_variance_bound(tiny_model, win, [1.0, 1.0])
        assert rep.grad_variance == pytest.approx(0.0, abs=1e-20)
        assert rep.e_s == 0.0
        assert rep.bound_rhs == pytest.approx(0.0, abs=1e-20)

    def test_verify_passes_on_real_window(self, tiny_model, corrupted_window):
        rep = verify_variance_bound(tiny_model, corrupted_window,
                                    [0.5, 2.0])
        assert rep.bound_holds

    def test_weight_count_and_corruption_checked(self, tiny_model,
                                                 corrupted_window):
        with pytest.raises(ConfigError):
            analysis.analyze_window(tiny_model, corrupted_window, [1.0])
        clean = diffusion.FrameWindow(corrupted_window.frames)
        with pytest.raises(ConfigError):
            analysis.analyze_window(tiny_model, clean, [1.0, 1.0])


class TestDynamics:
    def test_travel_and_series(self, tiny_model, corrupted_window):
        g = rng.substream(72)
        v = g.standard_normal(tiny_model.params.size)
        stepped = DenoiserModel(tiny_model.arch,
                                tiny_model.params + 0.01 * v)
        rows = track_dynamics([(0, tiny_model), (50, stepped)],
                              [(corrupted_window, [1.0, 1.0])])
        assert [r["step"] for r in rows] == [0, 50]
        assert rows[0]["param_travel"] == 0.0
        assert rows[1]["param_travel"] == pytest.approx(
            0.01 * float(np.linalg.norm(v)), rel=1e-12)
        for r in rows:
            assert r["bound_holds"] and r["pairwise_holds"]
            assert set(r) >= {"step", "param_travel", "grad_variance",
                              "grad_norm", "e_s", "lambda2", "e_g",
                              "bound_rhs", "mean_d_ij"}

    def test_collinear_updates_add_up(self, tiny_model, corrupted_window):
        g = rng.substream(73)
        v = g.standard_normal(tiny_model.params.size)
        models = [(k, DenoiserModel(tiny_model.arch,
                                    tiny_model.params + k * 0.001 * v))
                  for k in range(3)]
        rows = track_dynamics(models, [(corrupted_window, [1.0, 1.0])],
                              with_jacobians=False)
        travels = [r["param_travel"] for r in rows]
        assert travels[2] == pytest.approx(2 * travels[1], rel=1e-12)
        assert "e_g" not in rows[0]

    def test_explicit_reference_point(self, tiny_model, corrupted_window):
        theta0 = np.zeros_like(tiny_model.params)
        rows = track_dynamics([(0, tiny_model)],
                              [(corrupted_window, [1.0, 1.0])], theta0=theta0,
                              with_jacobians=False)
        assert rows[0]["param_travel"] == pytest.approx(
            float(np.linalg.norm(tiny_model.params)), rel=1e-12)

    def test_empty_checkpoints_rejected(self, corrupted_window):
        with pytest.raises(ConfigError):
            track_dynamics([], [(corrupted_window, [1.0, 1.0])])
