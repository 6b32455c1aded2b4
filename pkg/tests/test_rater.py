import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from asyncfm.errors import InvalidArgument, InvalidState
from asyncfm.rater import (ALPHA, BETA, ConfidenceRater, RaterConfig, build_mask, per_token_error,
                           pseudo_labels, rater_loss)

from conftest import random_ctx
from gradcheck import check_gradients


def t(x):
    return torch.tensor(x, dtype=torch.float64)


class TestPerTokenError:
    def test_identical(self):
        a = torch.randn(5, 4)
        assert torch.equal(per_token_error(a, a.clone()), torch.zeros(5))

    def test_locality(self):
        a = torch.zeros(5, 4)
        b = a.clone()
        b[2] = 0.3
        assert (per_token_error(a, b) != 0).tolist() == [False, False, True, False, False]

    def test_value(self):
        assert float(per_token_error(torch.ones(1, 4), torch.zeros(1, 4))[0]) == 1.0

    def test_mismatch(self):
        with pytest.raises(InvalidArgument):
            per_token_error(torch.zeros(2, 4), torch.zeros(2, 3))


class TestPseudoLabels:
    def test_constant_errors(self):
        q = pseudo_labels(t([0.2, 0.2, 0.2])).q
        assert torch.allclose(q, t([0.99] * 3), atol=1e-12, rtol=0)

    def test_hand_example(self):
        q = pseudo_labels(t([0.0, 0.5, 1.0]), 0.01, 0.98, 1e-6).q
        # 1 - 0.01 - 0.98 * e / (1 + 1e-6)
        ref = [0.99, 0.99 - 0.49 / 1.000001, 0.99 - 0.98 / 1.000001]
        assert torch.allclose(q, t(ref), atol=1e-12, rtol=0)
        assert torch.allclose(q, t([0.99, 0.500000, 0.010001]), atol=1e-6, rtol=0)

    def test_min_gets_top_label(self):
        e = t([0.4, 0.1, 0.9, 0.3])
        assert float(pseudo_labels(e).q[1]) == 1 - ALPHA

    def test_batched_rows_independent(self):
        e = t([[0.0, 0.5, 1.0], [0.2, 0.2, 0.2]])
        q = pseudo_labels(e).q
        assert torch.equal(q[0], pseudo_labels(e[0]).q)
        assert torch.equal(q[1], pseudo_labels(e[1]).q)


@given(arrays(np.float64, st.integers(1, 12), elements=st.floats(0, 1e3, allow_subnormal=False)))
def test_pseudo_label_law(e):
    q = pseudo_labels(torch.from_numpy(e)).q.numpy()
    assert np.all(q >= 1 - ALPHA - BETA) and np.all(q <= 1 - ALPHA)
    order = np.argsort(e, kind="stable")
    assert np.all(np.diff(q[order]) <= 0)


class TestBuildMask:
    def test_all_high(self):
        assert build_mask(t([0.9, 0.8]), 0.5).tolist() == [0, 0]

    def test_all_low(self):
        assert build_mask(t([0.1, 0.2]), 0.5).tolist() == [1, 1]

    def test_strict_boundary(self):
        assert build_mask(t([0.4, 0.5, 0.6]), 0.5).tolist() == [1, 0, 0]

    def test_bad_threshold(self):
        with pytest.raises(InvalidArgument):
            build_mask(t([0.1]), 1.0)


@given(arrays(np.float64, 8, elements=st.floats(0, 1)), st.floats(0.01, 0.98), st.floats(0.0, 0.01))
def test_mask_monotone_in_threshold(p, T, bump):
    lo = build_mask(torch.from_numpy(p), T)
    hi = build_mask(torch.from_numpy(p), T + bump)
    assert torch.all(hi >= lo)


class TestRaterLoss:
    def test_zero(self):
        q = t([0.3, 0.7])
        assert float(rater_loss(q, q.clone())) == 0.0

    def test_value(self):
        assert abs(float(rater_loss(t([0.5, 0.5]), t([0.99, 0.01]))) - 0.2401) <= 1e-12

    def test_order_symmetric(self):
        p, q = t([0.1, 0.4, 0.8]), t([0.3, 0.2, 0.9])
        perm = [2, 0, 1]
        assert abs(float(rater_loss(p, q)) - float(rater_loss(p[perm], q[perm]))) <= 1e-15

    def test_accepts_pseudo_labels(self):
        e = t([0.0, 1.0])
        assert float(rater_loss(pseudo_labels(e).q, pseudo_labels(e))) == 0.0


class TestScore:
    def _inputs(self, model, B=2, seed=0):
        c = model.config
        gen = np.random.default_rng(seed)
        ctx = random_ctx(gen, c, B)
        return model.context_embeddings(ctx).detach(), torch.from_numpy(gen.standard_normal((B, c.L, c.D)))

    def test_range_and_shape(self, tiny_model, tiny_rater):
        emb, acts = self._inputs(tiny_model)
        p = tiny_rater.score(emb, acts)
        assert p.shape == (2, tiny_model.config.L)
        assert torch.all((p > 0) & (p < 1))

    def test_zero_head_half(self, tiny_model, tiny_rater):
        with torch.no_grad():
            tiny_rater.rate_head.weight.zero_()
            tiny_rater.rate_head.bias.zero_()
        emb, acts = self._inputs(tiny_model)
        assert torch.equal(tiny_rater.score(emb, acts), torch.full((2, 4), 0.5, dtype=torch.float64))

    def test_untrained_raises(self, tiny_model, tiny_rater):
        tiny_rater.ready = False
        emb, acts = self._inputs(tiny_model)
        with pytest.raises(InvalidState):
            tiny_rater.score(emb, acts)

    def test_adaptive_cardinality(self, tiny_model, tiny_rater):
        emb, acts = self._inputs(tiny_model, B=1)
        with torch.no_grad():
            tiny_rater.rate_head.weight.zero_()
            tiny_rater.rate_head.bias.fill_(-5.0)
            assert int(build_mask(tiny_rater.score(emb, acts)).sum()) == 4
            tiny_rater.rate_head.bias.fill_(5.0)
            assert int(build_mask(tiny_rater.score(emb, acts)).sum()) == 0
            tiny_rater.rate_head.bias.fill_(0.0)
            tiny_rater.rate_head.weight.normal_(generator=torch.Generator().manual_seed(0))
            p = tiny_rater.score(emb, acts)[0]
            thr = float(p.sort().values[1:3].mean())
            assert 0 < int(build_mask(p, thr).sum()) < 4

    def test_context_projection_when_widths_differ(self, tiny_model):
        c = tiny_model.config
        r = ConfidenceRater(RaterConfig(layers=1, heads=2, ffn=8, d_r=8), c.d, c.ctx_len, c.L, c.D)
        assert r.ctx_proj is not None
        r2 = ConfidenceRater(RaterConfig(layers=1, heads=2, ffn=8, d_r=c.d), c.d, c.ctx_len, c.L, c.D)
        assert r2.ctx_proj is None


def test_rater_gradients_match_finite_differences(tiny_model, tiny_rater):
    c = tiny_model.config
    gen = np.random.default_rng(1)
    ctx = random_ctx(gen, c, 3)
    emb = tiny_model.context_embeddings(ctx).detach()
    acts = torch.from_numpy(gen.standard_normal((3, c.L, c.D)))
    q = pseudo_labels(torch.from_numpy(gen.random((3, c.L))))

    def loss():
        return rater_loss(tiny_rater(emb, acts), q)

    worst = check_gradients(tiny_rater, loss, coords=20)
    bad = {k: v for k, v in worst.items() if v > 1e-4}
    assert not bad, bad
