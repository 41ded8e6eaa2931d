"""Tests for the logits and representation weighting graphs."""

import numpy as np
import pytest

from graphkd.graphs import (
    LogitsGraph,
    ReprGraph,
    edge_weight_report,
    logits_graph_loss,
    repr_graph_loss,
)
from graphkd.losses import soften
from graphkd.sketch import BilinearVertex
from graphkd.tensor import Tensor

from oracles import assert_grad_close, fd_grad


def _w1_numpy(mu, eta):
    return np.abs(np.cumsum(mu - eta, axis=-1))[..., :-1].sum(axis=-1)


def _mmd_numpy(x_soft, d, bw):
    def k(a, b):
        diff = a[:, None, :] - b[None, :, :]
        return np.exp(-(diff**2).sum(-1) / (2 * bw**2))

    return float(k(x_soft, x_soft).mean() + k(d, d).mean() - 2 * k(x_soft, d).mean())


def _vertices(vectors):
    return [
        BilinearVertex(i + 1, (1, 2), np.asarray(v, dtype=np.float64))
        for i, v in enumerate(vectors)
    ]


# -- LogitsGraph structure ------------------------------------------------------


def test_fresh_graph_is_uniform_over_allowed_edges():
    g = LogitsGraph(4)
    w = g.effective_weights().data
    np.testing.assert_allclose(w[~np.eye(4, dtype=bool)], 1.0 / 3.0)
    np.testing.assert_array_equal(np.diag(w), 0.0)
    np.testing.assert_allclose(w.sum(axis=1), 1.0)


def test_single_teacher_keeps_self_loop():
    g = LogitsGraph(1)
    assert g.effective_weights().data.tolist() == [[1.0]]


def test_adjacency_is_sender_major_transpose():
    g = LogitsGraph(3)
    g.raw.data[:] = np.arange(9.0).reshape(3, 3)
    w = g.effective_weights().data
    np.testing.assert_array_equal(g.adjacency(), w.T)


def test_masked_edges_are_exactly_zero_and_excluded():
    mask = np.array([[False, True, True], [True, False, False], [True, True, False]])
    g = LogitsGraph(3, mask=mask)
    g.raw.data[0, 0] = 50.0  # huge score on a masked edge must not leak
    g.raw.data[1, 2] = 50.0
    w = g.effective_weights().data
    assert w[0, 0] == 0.0 and w[1, 2] == 0.0 and w[1, 1] == 0.0
    np.testing.assert_allclose(w[0, 1:], 0.5)  # renormalized over allowed only
    assert w[1, 0] == 1.0
    np.testing.assert_allclose(w.sum(axis=1), 1.0)


def test_graph_argument_validation():
    with pytest.raises(ValueError):
        LogitsGraph(0)
    with pytest.raises(ValueError):
        LogitsGraph(2, mask=np.zeros((2, 2), dtype=bool))
    with pytest.raises(ValueError):
        LogitsGraph(2, mask=np.ones((3, 3), dtype=bool))
    with pytest.raises(ValueError):
        LogitsGraph(2, temperatures=[4.0, -1.0])
    with pytest.raises(ValueError):
        LogitsGraph(2, temperatures=[4.0, 4.0, 4.0])


# -- logits_graph_loss ----------------------------------------------------------


def test_single_teacher_degenerates_to_plain_distance():
    rng = np.random.default_rng(0)
    s = rng.standard_normal(6)
    t = rng.standard_normal(6)
    g = LogitsGraph(1, temperatures=3.0)
    loss = logits_graph_loss(Tensor(s), [Tensor(t)], g).item()
    expect = _w1_numpy(soften(t, 3.0), soften(s))
    assert abs(loss - expect) < 1e-12


def test_loss_is_zero_when_student_matches_targets():
    rng = np.random.default_rng(1)
    t = rng.standard_normal(5)
    s = t / 4.0  # softmax(t/4) equals the temperature-4 softened target
    g = LogitsGraph(2)
    loss = logits_graph_loss(Tensor(s), [Tensor(t), Tensor(t)], g).item()
    assert abs(loss) < 1e-12


def test_two_teacher_loss_hand_summed():
    rng = np.random.default_rng(2)
    s = rng.standard_normal(7)
    t1, t2 = rng.standard_normal(7), rng.standard_normal(7)
    g = LogitsGraph(2, temperatures=[2.0, 5.0])
    # Complete digraph without self-loops: each sender's single outgoing
    # edge has weight 1, and the total edge mass of 2 normalizes the sum.
    em1 = _w1_numpy(soften(t1, 2.0), soften(s))
    em2 = _w1_numpy(soften(t2, 5.0), soften(s))
    loss = logits_graph_loss(Tensor(s), [Tensor(t1), Tensor(t2)], g).item()
    assert abs(loss - (em1 + em2) / 2.0) < 1e-10


def test_three_teacher_loss_hand_summed_with_set_params():
    rng = np.random.default_rng(3)
    s = rng.standard_normal(5)
    ts = [rng.standard_normal(5) for _ in range(3)]
    g = LogitsGraph(3)
    g.raw.data[:] = rng.standard_normal((3, 3))
    w = g.effective_weights().data
    ems = np.array([_w1_numpy(soften(t, 4.0), soften(s)) for t in ts])
    expect = sum(
        w[m, n] * ems[n] for m in range(3) for n in range(3) if m != n
    ) / w.sum()
    loss = logits_graph_loss(Tensor(s), [Tensor(t) for t in ts], g).item()
    assert abs(loss - expect) < 1e-10


def test_loss_equivariant_under_teacher_permutation():
    rng = np.random.default_rng(4)
    s = rng.standard_normal(6)
    ts = [rng.standard_normal(6) for _ in range(3)]
    temps = np.array([2.0, 4.0, 7.0])
    raw = rng.standard_normal((3, 3))
    perm = [2, 0, 1]

    g = LogitsGraph(3, temperatures=temps)
    g.raw.data[:] = raw
    base = logits_graph_loss(Tensor(s), [Tensor(t) for t in ts], g).item()

    gp = LogitsGraph(3, temperatures=temps[perm])
    gp.raw.data[:] = raw[np.ix_(perm, perm)]
    permuted = logits_graph_loss(
        Tensor(s), [Tensor(ts[i]) for i in perm], gp).item()
    assert abs(base - permuted) < 1e-12


def test_uniform_params_equal_mean_teacher_loss():
    rng = np.random.default_rng(5)
    s = rng.standard_normal(8)
    # For 4 teachers the edge mass normalizes to exactly 1/4 per sender, so
    # the graph loss is bitwise the plain mean; other sizes agree to rounding.
    for n, tol in ((3, 1e-15), (4, 0.0)):
        ts = [rng.standard_normal(8) for _ in range(n)]
        g = LogitsGraph(n)
        loss = logits_graph_loss(Tensor(s), [Tensor(t) for t in ts], g).item()
        mean = np.mean([_w1_numpy(soften(t, 4.0), soften(s)) for t in ts])
        assert abs(loss - mean) <= tol


def test_logits_loss_batched_is_mean_of_singles():
    rng = np.random.default_rng(6)
    s = rng.standard_normal((4, 5))
    ts = [rng.standard_normal((4, 5)) for _ in range(3)]
    g = LogitsGraph(3)
    g.raw.data[:] = rng.standard_normal((3, 3))
    batched = logits_graph_loss(Tensor(s), [Tensor(t) for t in ts], g).item()
    singles = [
        logits_graph_loss(
            Tensor(s[b]), [Tensor(t[b]) for t in ts], g).item()
        for b in range(4)
    ]
    assert abs(batched - np.mean(singles)) < 1e-12


def test_logits_loss_rejects_bad_inputs():
    g = LogitsGraph(2)
    s = Tensor(np.zeros(4))
    with pytest.raises(ValueError):
        logits_graph_loss(s, [Tensor(np.zeros(4))], g)
    with pytest.raises(ValueError):
        logits_graph_loss(s, [Tensor(np.zeros(4)), Tensor(np.zeros(5))], g)


def test_logits_loss_gradients():
    rng = np.random.default_rng(7)
    s_data = rng.standard_normal((3, 6))
    ts = [rng.standard_normal((3, 6)) for _ in range(3)]
    g = LogitsGraph(3)
    g.raw.data[:] = rng.standard_normal((3, 3)) * 0.5
    s = Tensor(s_data, requires_grad=True)
    loss = logits_graph_loss(s, [Tensor(t) for t in ts], g)
    loss.backward()

    def f():
        return logits_graph_loss(
            Tensor(s_data), [Tensor(t) for t in ts], g).item()

    assert_grad_close(g.raw.grad, fd_grad(f, g.raw.data))

    fixed = LogitsGraph(3)
    fixed.raw.data[:] = g.raw.data

    def f_s():
        return logits_graph_loss(
            Tensor(s_data), [Tensor(t) for t in ts], fixed).item()

    assert_grad_close(s.grad, fd_grad(f_s, s_data))


def test_training_weights_favor_the_aligned_teacher():
    # The teacher whose softened targets match the student should win the
    # largest incoming weight in every other teacher's row.
    for seed in range(5):
        rng = np.random.default_rng(100 + seed)
        s_data = rng.standard_normal((8, 6))
        good = 4.0 * s_data  # temperature-4 softening recovers softmax(s)
        far1 = s_data[:, ::-1] * 8.0 + rng.standard_normal((8, 6))
        far2 = np.roll(s_data, 3, axis=1) * 8.0 + rng.standard_normal((8, 6))
        teachers = [Tensor(good), Tensor(far1), Tensor(far2)]
        g = LogitsGraph(3)
        s = Tensor(s_data)
        for _ in range(80):
            loss = logits_graph_loss(s, teachers, g)
            loss.backward()
            g.raw.data -= 2.0 * g.raw.grad
            g.raw.grad = None
        w = g.effective_weights().data
        for receiver in (1, 2):
            others = [n for n in range(3) if n not in (0, receiver)]
            for n in others:
                assert w[receiver, 0] > w[receiver, n], (seed, receiver, w)


# -- ReprGraph ----------------------------------------------------------------


def test_repr_graph_vertex_counts():
    assert ReprGraph(2).n_vertices == 1
    assert ReprGraph(3).n_vertices == 3
    assert ReprGraph(4).n_vertices == 6
    with pytest.raises(ValueError):
        ReprGraph(1)
    with pytest.raises(ValueError):
        ReprGraph(3, vector_edges=-1)


def test_repr_graph_uniform_weights_at_init():
    g = ReprGraph(4)
    np.testing.assert_allclose(g.vertex_weights().data, np.ones(6) / 6.0)
    gv = ReprGraph(3, vector_edges=5)
    assert gv.vertex_weights().shape == (3, 5)
    np.testing.assert_allclose(gv.vertex_weights().data, 1.0 / 3.0)


def test_single_vertex_loss_is_plain_discrepancy():
    rng = np.random.default_rng(8)
    student = rng.standard_normal((3, 4))
    vec = rng.standard_normal(12)  # 3 channels of spatial size 4
    g = ReprGraph(2, temperatures=2.0)
    loss = repr_graph_loss(Tensor(student), _vertices([vec]), g, bandwidth=1.0)
    d = soften(vec, 2.0).reshape(3, 4)
    expect = _mmd_numpy(soften(student), d, 1.0)
    assert abs(loss.item() - expect) < 1e-10


def test_three_vertex_loss_hand_summed():
    rng = np.random.default_rng(9)
    student = rng.standard_normal((2, 4))
    vecs = [rng.standard_normal(8) for _ in range(3)]
    temps = np.array([2.0, 4.0, 6.0])
    g = ReprGraph(3, temperatures=temps)
    g.raw.data[:] = np.array([0.3, -0.1, 0.8])
    loss = repr_graph_loss(Tensor(student), _vertices(vecs), g, bandwidth=1.3)

    weights = soften(g.raw.data / temps)  # softmax of raw over temperatures
    expect = sum(
        weights[k]
        * _mmd_numpy(soften(student), soften(v, temps[k]).reshape(2, 4), 1.3)
        for k, v in enumerate(vecs)
    )
    assert abs(loss.item() - expect) < 1e-10


def test_repr_loss_batched_is_mean_of_singles():
    rng = np.random.default_rng(10)
    student = rng.standard_normal((3, 2, 6))
    vecs = [rng.standard_normal(12) for _ in range(3)]
    g = ReprGraph(3)
    g.raw.data[:] = rng.standard_normal(3)
    batched = repr_graph_loss(
        Tensor(student), _vertices(vecs), g, bandwidth=1.1).item()
    singles = [
        repr_graph_loss(Tensor(student[b]), _vertices(vecs), g, 1.1).item()
        for b in range(3)
    ]
    assert abs(batched - np.mean(singles)) < 1e-12


def test_repr_loss_accepts_spatial_maps():
    rng = np.random.default_rng(11)
    student = rng.standard_normal((2, 3, 2, 2))
    vecs = [rng.standard_normal(8)]
    g = ReprGraph(2)
    flat = repr_graph_loss(
        Tensor(student.reshape(2, 3, 4)), _vertices(vecs), g, 1.0).item()
    maps = repr_graph_loss(Tensor(student), _vertices(vecs), g, 1.0).item()
    assert abs(flat - maps) < 1e-15


def test_repr_loss_validates_inputs():
    g = ReprGraph(3)
    student = Tensor(np.zeros((2, 4)))
    with pytest.raises(ValueError):
        repr_graph_loss(student, _vertices([np.zeros(8)]), g, 1.0)
    with pytest.raises(ValueError):  # 10 does not reshape to spatial size 4
        repr_graph_loss(
            student, _vertices([np.zeros(10)] * 3), g, 1.0)


def test_vector_edges_uniform_matches_scalar_path():
    rng = np.random.default_rng(12)
    student = rng.standard_normal((2, 4))
    vecs = [rng.standard_normal(8) for _ in range(3)]
    scalar = repr_graph_loss(
        Tensor(student), _vertices(vecs), ReprGraph(3), 1.0).item()
    vector = repr_graph_loss(
        Tensor(student), _vertices(vecs), ReprGraph(3, vector_edges=4), 1.0
    ).item()
    assert abs(scalar - vector) < 1e-12


def test_repr_loss_gradients():
    rng = np.random.default_rng(13)
    student_data = rng.standard_normal((2, 3, 4))
    vecs = [rng.standard_normal(8) for _ in range(3)]
    g = ReprGraph(3)
    g.raw.data[:] = rng.standard_normal(3) * 0.5
    student = Tensor(student_data, requires_grad=True)
    repr_graph_loss(student, _vertices(vecs), g, bandwidth=1.2).backward()

    def f():
        return repr_graph_loss(
            Tensor(student_data), _vertices(vecs), g, bandwidth=1.2).item()

    assert_grad_close(g.raw.grad, fd_grad(f, g.raw.data))

    fixed = ReprGraph(3)
    fixed.raw.data[:] = g.raw.data

    def f_s():
        return repr_graph_loss(
            Tensor(student_data), _vertices(vecs), fixed, bandwidth=1.2).item()

    assert_grad_close(student.grad, fd_grad(f_s, student_data))


def test_repr_loss_median_bandwidth_default_runs():
    rng = np.random.default_rng(14)
    student = rng.standard_normal((2, 3, 4))
    vecs = [rng.standard_normal(8) for _ in range(3)]
    g = ReprGraph(3)
    loss = repr_graph_loss(Tensor(student), _vertices(vecs), g)
    assert np.isfinite(loss.item()) and loss.item() >= -1e-9


# -- edge_weight_report --------------------------------------------------------


def test_report_fresh_logits_graph():
    rep = edge_weight_report(LogitsGraph(3))
    assert rep["kind"] == "logits"
    w = np.array(rep["weights"])
    np.testing.assert_allclose(w[~np.eye(3, dtype=bool)], 0.5)
    np.testing.assert_array_equal(np.diag(w), 0.0)
    assert rep["mask"] == (~np.eye(3, dtype=bool)).astype(int).tolist()


def test_report_masked_edge_is_zero():
    mask = np.array([[False, True], [True, False]])
    g = LogitsGraph(2, mask=mask)
    rep = edge_weight_report(g)
    assert rep["weights"][0][0] == 0.0
    assert rep["weights"][0][1] == 1.0


def test_report_repr_graph_and_type_error():
    rep = edge_weight_report(ReprGraph(4))
    assert rep["kind"] == "repr"
    assert abs(sum(rep["weights"]) - 1.0) < 1e-12
    with pytest.raises(TypeError):
        edge_weight_report(object())
