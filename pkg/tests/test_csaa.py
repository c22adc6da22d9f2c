import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from builders import random_combine, random_side, random_table, tiny_model, zero_attention
from hcsc import autodiff as ad
from hcsc.autodiff import Tape, Tensor
from hcsc.csaa import (CombineParams, EmptyCandidatePoolError, EntityTable, Switches, UPAParams,
                       combine_user_product, distinct_attend, entity_pool, pool_document,
                       shared_attend, shared_context, upa_attend, weibull_gate)
from hcsc.data import make_batch


def rand_words(rng, batch, n, dim):
    return Tensor(rng.normal(size=(batch, n, dim)))


# --- distinct / shared attention --------------------------------------------


@pytest.mark.parametrize("attend", [distinct_attend, shared_attend])
def test_singleton_attention_returns_the_word(attend):
    rng = np.random.default_rng(0)
    side = random_side(rng, 4)
    w = rand_words(rng, 1, 1, 4)
    v, a = attend(w, np.ones((1, 1)), Tensor(rng.normal(size=(1, 4))), side.distinct)
    np.testing.assert_array_equal(a.values, [[1.0]])
    np.testing.assert_allclose(v.values[0], w.values[0, 0], atol=1e-15)


@pytest.mark.parametrize("attend", [distinct_attend, shared_attend])
def test_zero_parameters_give_masked_mean(attend):
    rng = np.random.default_rng(1)
    w = rand_words(rng, 1, 5, 3)
    mask = np.array([[1, 1, 0, 1, 0]], dtype=float)
    v, a = attend(w, mask, Tensor(rng.normal(size=(1, 3))), zero_attention(3))
    np.testing.assert_allclose(a.values, [[1 / 3, 1 / 3, 0, 1 / 3, 0]], atol=1e-15)
    np.testing.assert_allclose(v.values[0], w.values[0, [0, 1, 3]].mean(axis=0), atol=1e-12)


@pytest.mark.parametrize("attend", [distinct_attend, shared_attend])
def test_identical_words_pool_to_that_word(attend):
    rng = np.random.default_rng(2)
    side = random_side(rng, 4)
    word = rng.normal(size=4)
    w = Tensor(np.tile(word, (1, 6, 1)))
    v, _ = attend(w, np.ones((1, 6)), Tensor(rng.normal(size=(1, 4))), side.distinct)
    np.testing.assert_allclose(v.values[0], word, atol=1e-12)


def test_attention_rejects_fully_masked_sequence():
    rng = np.random.default_rng(3)
    with pytest.raises(ad.MaskError):
        distinct_attend(rand_words(rng, 1, 3, 2), np.zeros((1, 3)), Tensor(np.zeros((1, 2))), zero_attention(2))


# --- shared context ----------------------------------------------------------


def _table(emb, freqs=None):
    k = emb.shape[0] - 1
    return EntityTable("user", {f"u{i}": i + 1 for i in range(k)}, Tensor(emb, True),
                       np.concatenate([[0], freqs if freqs is not None else np.ones(k, dtype=int)]),
                       Tensor(np.ones(emb.shape[1]), True), Tensor(np.ones(emb.shape[1]), True))


def test_single_candidate_context():
    rng = np.random.default_rng(4)
    emb = rng.normal(size=(3, 4))
    ctx, sim = shared_context(Tensor(rng.normal(size=(1, 4))), _table(emb), [1], Tensor(rng.normal(size=(4, 4))))
    np.testing.assert_array_equal(sim.values, [[0.0, 0.0, 1.0]])
    np.testing.assert_allclose(ctx.values[0], emb[2], atol=1e-15)


def test_zero_projection_gives_candidate_mean():
    rng = np.random.default_rng(5)
    emb = rng.normal(size=(5, 3))
    ctx, sim = shared_context(Tensor(rng.normal(size=(1, 3))), _table(emb), [2], Tensor(np.zeros((3, 3))))
    np.testing.assert_allclose(sim.values, [[0, 1 / 3, 0, 1 / 3, 1 / 3]], atol=1e-15)
    np.testing.assert_allclose(ctx.values[0], emb[[1, 3, 4]].mean(axis=0), atol=1e-12)


def test_two_candidate_softmax():
    # energies mean * W * u_k = (ln 3, 0) -> weights (0.75, 0.25)
    emb = np.array([[0.0], [9.0], [math.log(3)], [0.0]])
    ctx, sim = shared_context(Tensor([[1.0]]), _table(emb), [1], Tensor([[1.0]]))
    np.testing.assert_allclose(sim.values, [[0.0, 0.0, 0.75, 0.25]], atol=1e-15)
    np.testing.assert_allclose(ctx.values, [[0.75 * math.log(3)]], atol=1e-15)


def test_empty_candidate_pool():
    with pytest.raises(EmptyCandidatePoolError):
        shared_context(Tensor([[1.0]]), _table(np.ones((2, 1))), [1], Tensor([[1.0]]))


def test_unknown_entity_uses_every_known_candidate():
    rng = np.random.default_rng(6)
    ctx, sim = shared_context(Tensor(rng.normal(size=(1, 2))), _table(rng.normal(size=(3, 2))), [0],
                              Tensor(rng.normal(size=(2, 2))))
    assert sim.values[0, 0] == 0.0
    assert sim.values[0, 1] > 0 and sim.values[0, 2] > 0


# --- Weibull gate --------------------------------------------------------------


def test_gate_is_zero_at_zero_frequency():
    rng = np.random.default_rng(7)
    g = weibull_gate([0.0], Tensor(rng.uniform(0.1, 3, 5)), Tensor(rng.uniform(0.1, 3, 5)))
    assert np.all(g.values == 0.0)


def test_gate_unit_parameters():
    g = weibull_gate([1.0], Tensor(np.ones(3)), Tensor(np.ones(3)))
    np.testing.assert_allclose(g.values, 1 - math.exp(-1), atol=1e-12)
    assert g.values[0, 0] == pytest.approx(0.632121, abs=1e-6)


def test_gate_saturates():
    g = weibull_gate([100.0], Tensor(np.ones(3)), Tensor(np.ones(3)))
    assert np.all(g.values >= 1 - math.exp(-100))


def test_gate_floor_handles_non_positive_parameters():
    g = weibull_gate([0.5, 2.0], Tensor([-1.0, 0.0, 2.0]), Tensor([-3.0, 1.0, 0.0]))
    assert np.all(np.isfinite(g.values))
    assert np.all((g.values >= 0) & (g.values <= 1))


@settings(max_examples=100, deadline=None)
@given(st.floats(0, 50), st.floats(0, 50), st.integers(0, 2**31 - 1))
def test_gate_is_monotone_in_frequency(f1, f2, seed):
    lo, hi = sorted((f1, f2))
    rng = np.random.default_rng(seed)
    k, lam = Tensor(rng.uniform(0.05, 5, 6)), Tensor(rng.uniform(0.05, 5, 6))
    g1, g2 = weibull_gate([lo], k, lam).values, weibull_gate([hi], k, lam).values
    assert np.all(g2 >= g1)
    assert np.all((g1 >= 0) & (g2 <= 1))


# --- entity pool and combination -------------------------------------------------


def test_unknown_entity_uses_shared_vector_exactly():
    rng = np.random.default_rng(8)
    table, side = random_table(rng, 4, 5), random_side(rng, 5)
    w = rand_words(rng, 2, 6, 5)
    v, diag = entity_pool(w, np.ones((2, 6)), [0, 0], table, side)
    np.testing.assert_array_equal(v.values, diag["v_s"].values)
    assert np.all(diag["g"].values == 0.0)


def test_saturated_gate_uses_distinct_vector():
    rng = np.random.default_rng(9)
    table = random_table(rng, 3, 4, freqs=np.array([1000, 1, 1]))
    table.shape_k.values[:] = 1.0
    table.scale_lam.values[:] = 1.0
    side = random_side(rng, 4)
    v, diag = entity_pool(rand_words(rng, 1, 5, 4), np.ones((1, 5)), [1], table, side)
    # normalized frequency 1000 / 334 ~ 3 is not enough; push lambda down to saturate
    table.scale_lam.values[:] = 0.01
    v, diag = entity_pool(rand_words(rng, 1, 5, 4), np.ones((1, 5)), [1], table, side)
    np.testing.assert_allclose(v.values, diag["v_d"].values, atol=1e-9)


def test_equal_branches_blend_to_themselves():
    rng = np.random.default_rng(10)
    table = random_table(rng, 3, 4)
    side = random_side(rng, 4)
    side.shared = side.distinct
    word = rng.normal(size=4)
    w = Tensor(np.tile(word, (1, 3, 1)))
    v, _ = entity_pool(w, np.ones((1, 3)), [2], table, side)
    np.testing.assert_allclose(v.values[0], word, atol=1e-12)


def test_combine_equal_inputs():
    rng = np.random.default_rng(11)
    x = Tensor(rng.normal(size=(2, 4)))
    v, g = combine_user_product(x, x, random_combine(rng, 4))
    np.testing.assert_allclose(v.values, x.values, atol=1e-15)


def test_combine_zero_gate_is_average():
    c = CombineParams(Tensor(np.zeros((6, 3))), Tensor(np.zeros(3)))
    a, b = Tensor([[1.0, 2.0, 3.0]]), Tensor([[3.0, 0.0, -1.0]])
    v, g = combine_user_product(a, b, c)
    np.testing.assert_array_equal(g.values, 0.5)
    np.testing.assert_allclose(v.values, [[2.0, 1.0, 1.0]])


def test_combine_saturated_bias_selects_user():
    c = CombineParams(Tensor(np.zeros((4, 2))), Tensor(np.full(2, 40.0)))
    a, b = Tensor([[1.0, -1.0]]), Tensor([[5.0, 5.0]])
    v, g = combine_user_product(a, b, c)
    np.testing.assert_allclose(v.values, a.values, atol=1e-12)


def test_combine_dimension_mismatch():
    c = CombineParams(Tensor(np.zeros((4, 2))), Tensor(np.zeros(2)))
    with pytest.raises(ad.ShapeError):
        combine_user_product(Tensor(np.zeros((1, 2))), Tensor(np.zeros((1, 3))), c)


def test_combine_gate_range_and_betweenness():
    rng = np.random.default_rng(12)
    a, b = Tensor(rng.normal(size=(8, 5))), Tensor(rng.normal(size=(8, 5)))
    v, g = combine_user_product(a, b, random_combine(rng, 5))
    assert np.all((g.values > 0) & (g.values < 1))
    lo, hi = np.minimum(a.values, b.values), np.maximum(a.values, b.values)
    assert np.all((v.values >= lo - 1e-12) & (v.values <= hi + 1e-12))


# --- UPA baseline ---------------------------------------------------------------


def _upa(rng, dim, zero=False):
    p = UPAParams.init(dim, dim, rng)
    if zero:
        for t in p.tensors():
            t.values = np.zeros(t.shape)
    return p


def test_upa_singleton_and_zero_parameters():
    rng = np.random.default_rng(13)
    u, p = Tensor(rng.normal(size=(1, 3))), Tensor(rng.normal(size=(1, 3)))
    w = rand_words(rng, 1, 1, 3)
    v, a = upa_attend(w, np.ones((1, 1)), u, p, _upa(rng, 3))
    np.testing.assert_allclose(v.values[0], w.values[0, 0])
    w = rand_words(rng, 1, 4, 3)
    v, a = upa_attend(w, np.ones((1, 4)), u, p, _upa(rng, 3, zero=True))
    np.testing.assert_allclose(v.values[0], w.values[0].mean(axis=0), atol=1e-12)


def test_upa_with_zero_contexts_is_context_free():
    rng = np.random.default_rng(14)
    params = _upa(rng, 3)
    w = rand_words(rng, 1, 4, 3)
    zero = Tensor(np.zeros((1, 3)))
    v, a = upa_attend(w, np.ones((1, 4)), zero, zero, params)
    energies = np.tanh(w.values[0] @ params.w_word.values + params.bias.values) @ params.v.values[:, 0]
    expected = np.exp(energies - energies.max())
    np.testing.assert_allclose(a.values[0], expected / expected.sum(), atol=1e-12)


# --- pool_document -----------------------------------------------------------------


def _pool(rng, dim=5, n=6, batch=3, user_idx=None, prod_idx=None, mask=None, **kw):
    ut, pt = random_table(rng, 4, dim, "user"), random_table(rng, 5, dim, "product")
    us, ps, comb = random_side(rng, dim), random_side(rng, dim), random_combine(rng, dim)
    w = rand_words(rng, batch, n, dim)
    if mask is None:
        mask = np.ones((batch, n))
    ui = rng.integers(0, 5, size=batch) if user_idx is None else user_idx
    pi = rng.integers(0, 6, size=batch) if prod_idx is None else prod_idx
    return pool_document(w, mask, ui, pi, ut, pt, us, ps, comb, **kw), (w, mask, ui, pi, ut, pt, us, ps, comb)


def test_both_unknown_gives_shared_vectors():
    pooled, _ = _pool(np.random.default_rng(15), user_idx=[0, 0, 0], prod_idx=[0, 0, 0])
    np.testing.assert_array_equal(pooled.v_user.values, pooled.v_s_user.values)
    np.testing.assert_array_equal(pooled.v_prod.values, pooled.v_s_prod.values)


def test_saturated_gates_give_distinct_vectors():
    rng = np.random.default_rng(16)
    pooled, args = _pool(rng, user_idx=[1, 2, 3], prod_idx=[1, 2, 3])
    w, mask, ui, pi, ut, pt, us, ps, comb = args
    for t in (ut, pt):
        t.scale_lam.values[:] = 1e-3
        t.shape_k.values[:] = 1.0
    pooled = pool_document(w, mask, ui, pi, ut, pt, us, ps, comb)
    np.testing.assert_allclose(pooled.v_user.values, pooled.v_d_user.values, atol=1e-9)
    np.testing.assert_allclose(pooled.v_prod.values, pooled.v_d_prod.values, atol=1e-9)


def _check_simplex(a, mask):
    assert np.all(a >= 0)
    np.testing.assert_allclose(a.sum(axis=-1), 1.0, atol=1e-6)
    assert np.all(a[mask == 0] == 0.0)


def test_pooled_set_invariants_fuzz():
    rng = np.random.default_rng(17)
    for case in range(1000):
        dim, n, batch = int(rng.integers(1, 6)), int(rng.integers(1, 7)), 1
        mask = (rng.random((batch, n)) < 0.6).astype(float)
        mask[0, rng.integers(0, n)] = 1.0
        pooled, (w, *_rest) = _pool(rng, dim=dim, n=n, batch=batch, mask=mask)
        ut, pt = _rest[3], _rest[4]
        for name in ("attn_d_user", "attn_s_user", "attn_d_prod", "attn_s_prod"):
            _check_simplex(getattr(pooled, name).values, mask)
        for sim, idx, table in ((pooled.sim_user, _rest[1], ut), (pooled.sim_prod, _rest[2], pt)):
            cand = np.ones((batch, table.size))
            cand[:, 0] = 0
            cand[np.arange(batch), idx] = 0
            _check_simplex(sim.values, cand)
        for g in (pooled.gate_user, pooled.gate_prod):
            assert np.all((g.values >= 0) & (g.values <= 1))
        assert np.all((pooled.gate_up.values > 0) & (pooled.gate_up.values < 1))
        dims = {v.shape[-1] for v in pooled.vectors().values()}
        assert dims == {dim} and len(pooled.vectors()) == 7


def test_own_entity_gets_zero_similarity():
    rng = np.random.default_rng(18)
    pooled, args = _pool(rng, user_idx=[1, 2, 3], prod_idx=[4, 5, 1])
    np.testing.assert_array_equal(pooled.sim_user.values[[0, 1, 2], [1, 2, 3]], 0.0)
    np.testing.assert_array_equal(pooled.sim_prod.values[[0, 1, 2], [4, 5, 1]], 0.0)


def test_pool_document_is_batch_independent():
    rng = np.random.default_rng(19)
    lengths = [2, 6, 4]
    mask = np.zeros((3, 6))
    for r, n in enumerate(lengths):
        mask[r, :n] = 1
    pooled, args = _pool(rng, mask=mask)
    w, mask, ui, pi, ut, pt, us, ps, comb = args
    for r, n in enumerate(lengths):
        alone = pool_document(Tensor(w.values[r:r + 1, :n]), np.ones((1, n)), ui[r:r + 1], pi[r:r + 1],
                              ut, pt, us, ps, comb)
        for name, v in pooled.vectors().items():
            np.testing.assert_allclose(v.values[r], getattr(alone, name).values[0], atol=1e-6)


def test_cold_start_distinct_branch_gets_no_gradient_through_v_user():
    model, batch, corpus = tiny_model()
    docs = [d.__class__("nobody", "nothing", d.label, d.tokens) for d in corpus.documents]
    cold = make_batch(docs, np.arange(len(docs)), model.vocab)
    with Tape() as tape:
        loss = model.loss(cold, heads=("v_user",))
    ad.backward(loss, tape)
    for t in model.user_side.distinct.tensors():
        assert np.all(t.grad == 0.0), t.name
    assert np.any(model.user_side.shared.w_word.grad != 0.0)


def test_switches():
    rng = np.random.default_rng(20)
    pooled, args = _pool(rng, switches=Switches(disable_shared=True))
    assert pooled.v_s_user is None and pooled.sim_user is None
    np.testing.assert_array_equal(pooled.v_user.values, pooled.v_d_user.values)
    pooled, _ = _pool(rng, switches=Switches(disable_gate=True))
    np.testing.assert_array_equal(pooled.v_user.values, pooled.v_d_user.values)
    assert pooled.v_s_user is not None
    upa = UPAParams.init(5, 5, rng)
    pooled, _ = _pool(rng, switches=Switches(upa_baseline=True), upa=upa)
    assert list(pooled.vectors()) == ["v_up"]
