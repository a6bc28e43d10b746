import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from orthotrain import linalg, ortho
from orthotrain.autodiff import Tape, backward, grad_check
from orthotrain.energy import hyperspherical_energy
from orthotrain.errors import ConfigError, RankDeficiencyError, StateCorruptionError

from conftest import gaussian, ill_conditioned

PRODUCERS = {
    "gs": ortho.gram_schmidt,
    "mgs": lambda u: ortho.gram_schmidt(u, "modified"),
    "igs": ortho.iterative_gram_schmidt,
    "hr": ortho.householder_orthogonalize,
    "ls": ortho.lowdin,
    "cp": ortho.cayley,
}


def naive_cgs(u):
    """Column-by-column classic Gram-Schmidt."""
    q = np.zeros_like(u)
    for j in range(u.shape[1]):
        e = u[:, j] - sum((u[:, j] @ q[:, i]) * q[:, i] for i in range(j))
        q[:, j] = e / np.linalg.norm(e)
    return q


# Gram-Schmidt


def test_gs_identity_and_diag():
    assert np.allclose(ortho.gram_schmidt(np.eye(4)), np.eye(4), atol=1e-15)
    assert np.allclose(ortho.gram_schmidt(np.diag([2.0, 3.0])), np.eye(2), atol=1e-15)


def test_gs_hand_2d():
    q = ortho.gram_schmidt(np.array([[1.0, 1.0], [0.0, 1.0]]))
    assert np.allclose(q, np.eye(2), atol=1e-15)


@pytest.mark.parametrize("n", [5, 64, 130])
def test_blocked_cgs_matches_column_loop(n):
    u = gaussian(n, seed=n)
    assert np.max(np.abs(ortho.gram_schmidt(u) - naive_cgs(u))) <= 1e-10


@pytest.mark.parametrize("variant", ["classic", "modified"])
def test_gs_preserves_leading_spans(variant):
    u = gaussian(7, seed=2)
    q = ortho.gram_schmidt(u, variant)
    # span(q[:, :j]) == span(u[:, :j]) for all j  <=>  q^T u is upper triangular
    assert np.max(np.abs(np.tril(q.T @ u, -1))) <= 1e-12


@pytest.mark.parametrize("variant", ["classic", "modified"])
def test_gs_rank_deficiency_names_column(variant):
    u = gaussian(4, seed=3)
    u[:, 2] = u[:, 0] - 2 * u[:, 1]
    with pytest.raises(RankDeficiencyError, match="column 2"):
        ortho.gram_schmidt(u, variant)


def test_igs_single_pass_is_classic():
    u = gaussian(8, seed=4)
    assert np.max(np.abs(ortho.iterative_gram_schmidt(u, 1) - ortho.gram_schmidt(u))) <= 1e-12
    assert np.allclose(ortho.iterative_gram_schmidt(np.eye(5), 3), np.eye(5), atol=1e-15)


def test_igs_second_pass_never_worse_on_ill_conditioned():
    for trial in range(100):
        u = ill_conditioned(8, 1e6, seed=trial)
        r1 = linalg.ortho_residual(ortho.iterative_gram_schmidt(u, 1))
        r2 = linalg.ortho_residual(ortho.iterative_gram_schmidt(u, 2))
        assert r2 <= r1


def test_mgs_more_stable_than_cgs_on_ill_conditioned():
    u = ill_conditioned(12, 1e8, seed=1)
    assert linalg.ortho_residual(ortho.gram_schmidt(u, "modified")) < linalg.ortho_residual(ortho.gram_schmidt(u))


# Householder


def test_householder_identity():
    assert np.array_equal(ortho.householder_orthogonalize(np.eye(3)), np.eye(3))


def test_householder_first_reflection_keeps_norm():
    q, r = ortho.householder_orthogonalize(np.array([[3.0, 1.0], [4.0, 2.0]]), return_r=True)
    assert abs(abs(r[0, 0]) - 5.0) <= 1e-14 and r[1, 0] == 0.0


def test_householder_reconstruction():
    u = gaussian(16, seed=5)
    q, r = ortho.householder_orthogonalize(u, return_r=True)
    assert linalg.ortho_residual(q) <= 1e-12
    assert np.max(np.abs(q @ r - u)) <= 1e-10
    assert np.array_equal(r, np.triu(r))
    assert abs(abs(linalg.det(q)) - 1.0) <= 1e-12


# Lowdin


def test_lowdin_fixed_on_orthogonal_and_scaling():
    q = linalg.rand_orthogonal(6, linalg.RngState(1))
    assert np.max(np.abs(ortho.lowdin(q) - q)) <= 1e-12
    assert np.max(np.abs(ortho.lowdin(3.5 * q) - q)) <= 1e-12


def test_lowdin_matches_svd_polar():
    u = gaussian(8, seed=6)
    a, _, bt = np.linalg.svd(u)
    assert np.max(np.abs(ortho.lowdin(u) - a @ bt)) <= 1e-10


def test_lowdin_nearer_than_householder():
    for trial in range(100):
        u = gaussian(8, seed=1000 + trial)
        assert np.linalg.norm(ortho.lowdin(u) - u) <= np.linalg.norm(ortho.householder_orthogonalize(u) - u)


def test_lowdin_local_minimality():
    rng = linalg.RngState(7)
    for trial in range(100):
        u = linalg.rand_gaussian(8, 8, 0.0, 1.0, rng)
        r = ortho.lowdin(u)
        z = np.triu(linalg.rand_gaussian(8, 8, 0.0, 1.0, rng), 1)
        assert np.linalg.norm(r @ ortho.cayley(1e-2 * z) - u) >= np.linalg.norm(r - u)


# Cayley


def test_cayley_zero_and_quarter_turn():
    assert np.array_equal(ortho.cayley(np.zeros((4, 4))), np.eye(4))
    r = ortho.cayley(np.array([[0.0, 1.0], [0.0, 0.0]]))
    assert np.allclose(r, [[0.0, 1.0], [-1.0, 0.0]], atol=1e-15)
    assert abs(linalg.det(r) - 1.0) <= 1e-15


def test_cayley_ignores_lower_triangle():
    p = gaussian(5, seed=8)
    assert np.array_equal(ortho.cayley(p), ortho.cayley(np.triu(p, 1)))


def test_cayley_random_determinant():
    r = ortho.cayley(gaussian(16, seed=9))
    assert linalg.ortho_residual(r) <= 1e-12
    assert abs(linalg.det(r) - 1.0) <= 1e-10


def test_fused_cayley_matches_primitive_graph():
    p0, c = gaussian(6, seed=10), gaussian(6, seed=11)
    grads = []
    for fused in (True, False):
        t = Tape()
        p = t.variable(p0)
        r = ortho.cayley_node(t, p, fused=fused)
        assert np.max(np.abs(t.value(r) - ortho.cayley(p0))) <= 1e-13
        grads.append(backward(t, t.sum(t.hadamard(r, t.constant(c))))[p])
    assert np.max(np.abs(grads[0] - grads[1])) <= 1e-12


# OGD


def _ogd_inputs(seed, n=6):
    rng = linalg.RngState(seed)
    return linalg.rand_orthogonal(n, rng), linalg.rand_gaussian(n, n, 0.0, 1.0, rng)


def test_ogd_zero_step_and_closed_form():
    u, g = _ogd_inputs(1)
    assert np.array_equal(ortho.ogd_step(u, g, 0.0), u)
    assert linalg.ortho_residual(ortho.ogd_step(u, g, 0.3, closed_form=True)) <= 1e-10


def test_ogd_skew_is_skew():
    u, g = _ogd_inputs(2)
    w = ortho.ogd_skew(u, g)
    assert np.max(np.abs(w + w.T)) == 0.0


def test_ogd_fixed_point_order():
    ratios = []
    for trial in range(20):
        u, g = _ogd_inputs(100 + trial)
        err = [np.linalg.norm(ortho.ogd_step(u, g, lam, 2) - ortho.ogd_step(u, g, lam, closed_form=True))
               for lam in (1e-2, 5e-3)]
        ratios.append(err[0] / err[1])
    assert np.median(ratios) >= 8


def test_ogd_negated_gradient_descends():
    u, _ = _ogd_inputs(3)
    target = linalg.rand_orthogonal(6, linalg.RngState(4))
    loss = lambda x: np.sum((x - target) ** 2)
    y = ortho.ogd_step(u, -2 * (u - target), 1e-2, closed_form=True)
    assert loss(y) < loss(u)


def test_ogd_rejects_non_orthogonal_input():
    with pytest.raises(StateCorruptionError):
        ortho.ogd_step(2 * np.eye(3), np.ones((3, 3)), 0.1)


# penalty


def test_penalty_values():
    t = Tape()
    q = t.constant(linalg.rand_orthogonal(5, linalg.RngState(2)))
    assert t.value(ortho.ortho_penalty(t, q))[0, 0] <= 1e-20
    assert t.value(ortho.ortho_penalty(t, t.constant(2 * np.eye(2))))[0, 0] == 18.0


# block_apply


def test_block_apply_single_block_is_plain_method():
    spec = ortho.OrthoSpec(method="gs")
    p, v = gaussian(8, seed=12), gaussian(8, 5, seed=13)
    assert np.array_equal(ortho.block_apply(spec, [p], v), ortho.gram_schmidt(p) @ v)


def test_block_apply_scalar_cayley_blocks_are_identity():
    spec = ortho.OrthoSpec(method="cp", blocks=6, block_shared=True)
    v = gaussian(6, 4, seed=14)
    assert np.array_equal(ortho.block_apply(spec, [np.array([[0.7]])], v), v)


@pytest.mark.parametrize("k", [2, 4, 8])
@pytest.mark.parametrize("shared", [False, True])
def test_block_apply_matches_dense_assembly(k, shared):
    import scipy.linalg

    spec = ortho.OrthoSpec(method="hr", blocks=k, block_shared=shared)
    rng = linalg.RngState(k)
    d = 16
    params = [linalg.rand_gaussian(d // k, d // k, 0.0, 1.0, rng) for _ in range(spec.n_param_blocks())]
    v = linalg.rand_gaussian(d, 10, 0.0, 1.0, rng)
    blocks = [ortho.householder_orthogonalize(p) for p in params] * (k if shared else 1)
    dense = scipy.linalg.block_diag(*blocks)
    w = ortho.block_apply(spec, params, v)
    assert np.max(np.abs(w - dense @ v)) <= 1e-12
    e0, e1 = hyperspherical_energy(v.T), hyperspherical_energy(w.T)
    assert abs(e1 - e0) / e0 <= 1e-9
    assert ortho.orthogonal_parameter_count(spec, d) == (d * d // (k * k) if shared else d * d // k)


def test_block_apply_tape_matches_numpy_and_gradients():
    spec = ortho.OrthoSpec(method="cp", blocks=2)
    rng = linalg.RngState(15)
    params = [linalg.rand_gaussian(3, 3, 0.0, 1.0, rng) for _ in range(2)]
    v = linalg.rand_gaussian(6, 4, 0.0, 1.0, rng)
    t = Tape()
    nodes = [t.variable(p) for p in params]
    out = ortho.block_apply(spec, nodes, t.constant(v), tape=t)
    assert np.max(np.abs(t.value(out) - ortho.block_apply(spec, params, v))) <= 1e-14


def test_block_apply_rejects_bad_blocking():
    with pytest.raises(ConfigError):
        ortho.block_apply(ortho.OrthoSpec(method="gs", blocks=3), [np.eye(2)] * 3, np.ones((8, 2)))


# dispatch and invariants


@pytest.mark.parametrize("method", sorted(PRODUCERS))
def test_orthogonality_64(method):
    u = gaussian(64, seed=16)
    assert linalg.ortho_residual(PRODUCERS[method](u)) <= 1e-10


@pytest.mark.parametrize("method", ["gs", "mgs", "igs", "hr", "ls", "cp"])
def test_orthogonal_matrix_agrees_with_node(method):
    spec = ortho.OrthoSpec(method=method)
    p = gaussian(6, seed=17)
    t = Tape()
    r = ortho.orthogonal_node(t, spec, t.variable(p))
    assert np.max(np.abs(t.value(r) - ortho.orthogonal_matrix(spec, p))) <= 1e-14


@pytest.mark.parametrize("method", ["gs", "igs", "mgs", "hr", "cp"])
def test_composite_gradients(method):
    spec = ortho.OrthoSpec(method=method)
    c = gaussian(6, seed=18)
    f = lambda t, x: t.sum(t.hadamard(ortho.orthogonal_node(t, spec, x), t.constant(c)))
    assert grad_check(f, gaussian(6, seed=19)) <= 1e-5


def test_truncated_lowdin_gradient():
    spec = ortho.OrthoSpec(method="ls", ls_iters=8, ls_tol=None)
    c = gaussian(6, seed=20)
    f = lambda t, x: t.sum(t.hadamard(ortho.orthogonal_node(t, spec, x), t.constant(c)))
    assert grad_check(f, gaussian(6, seed=21)) <= 1e-4


def test_identity_init_gives_identity():
    rng = linalg.RngState(0)
    for method in ortho.METHODS:
        spec = ortho.OrthoSpec(method=method)
        p = ortho.init_orthogonal_param(spec, 5, rng, identity=True)
        assert np.allclose(ortho.orthogonal_matrix(spec, p), np.eye(5), atol=1e-14)


def test_spec_validation():
    with pytest.raises(ConfigError):
        ortho.OrthoSpec(method="qr")
    with pytest.raises(ConfigError):
        ortho.OrthoSpec(method="or", or_beta=0.0)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(2, 12), method=st.sampled_from(sorted(PRODUCERS)))
def test_norm_preservation(seed, n, method):
    u = gaussian(n, seed=seed)
    x = gaussian(n, 1, seed=seed + 1)
    r = PRODUCERS[method](u)
    assert abs(np.linalg.norm(r @ x) - np.linalg.norm(x)) <= 1e-10
    if method == "cp":
        assert abs(linalg.det(r) - 1.0) <= 1e-10
