"""Encoder, masking, predictor, momentum encoder, EMA."""

import numpy as np
import pytest

from ehrjepa import autodiff as ad
from ehrjepa.errors import DataError
from ehrjepa.model import (
    EncoderConfig,
    ModelBundle,
    PredictorConfig,
    apply_mask,
    ema_update,
    encoder_forward,
    momentum_forward,
    predictor_forward,
)
from ehrjepa.records import TokenSequence

ENC = EncoderConfig(vocab_size=30, hidden=16, layers=2, heads=2, max_len=32)
PRED = PredictorConfig(depth=1, bottleneck=8, heads=2)


@pytest.fixture()
def bundle():
    return ModelBundle(ENC, PRED, mask_id=2, seed=1)


def seq_of(ids, n):
    return TokenSequence(np.asarray(ids, np.int64), n)


class TestEncoderForward:
    def test_logit_shape_len_one(self, bundle):
        _, logits = encoder_forward(bundle.online, [1], ENC)
        assert logits.shape == (1, 30)

    def test_causality_future_permutation(self, bundle):
        rng = np.random.default_rng(0)
        ids = rng.integers(3, 30, size=12)
        h1, _ = encoder_forward(bundle.online, ids, ENC)
        shuffled = ids.copy()
        shuffled[6:] = shuffled[6:][::-1]
        h2, _ = encoder_forward(bundle.online, shuffled, ENC)
        assert np.allclose(h1.data[:6], h2.data[:6], atol=1e-6)

    def test_id_out_of_range(self, bundle):
        with pytest.raises(DataError, match="out of range"):
            encoder_forward(bundle.online, [31], ENC)

    def test_too_long_rejected(self, bundle):
        with pytest.raises(DataError, match="exceeds"):
            encoder_forward(bundle.online, np.ones(33, np.int64), ENC)

    def test_hidden_dim_divisibility_checked(self):
        with pytest.raises(DataError):
            EncoderConfig(vocab_size=10, hidden=10, heads=4)


class TestApplyMask:
    def test_half_of_ten(self):
        rng = np.random.default_rng(0)
        s = seq_of(np.arange(3, 18), 5)  # m = 10
        _, m = apply_mask(s, 0.5, rng, mask_id=2)
        assert len(m) == 5

    def test_full_ratio_masks_whole_continuation(self):
        rng = np.random.default_rng(0)
        s = seq_of(np.arange(3, 13), 4)
        masked, m = apply_mask(s, 1.0, rng, mask_id=2)
        assert sorted(m) == list(range(4, 10))
        assert (masked[4:] == 2).all()
        assert np.array_equal(masked[:4], s.ids[:4])

    def test_floor_to_one(self):
        rng = np.random.default_rng(0)
        s = seq_of(np.arange(3, 8), 4)  # m = 1
        _, m = apply_mask(s, 0.25, rng, mask_id=2)
        assert len(m) == 1

    def test_round_half_up(self):
        rng = np.random.default_rng(0)
        s = seq_of(np.arange(3, 10), 2)  # m = 5; 0.5*5 = 2.5 -> 3
        _, m = apply_mask(s, 0.5, rng, mask_id=2)
        assert len(m) == 3

    def test_empty_continuation_rejected(self):
        s = seq_of([1, 2, 3], 3)
        with pytest.raises(DataError, match="no continuation"):
            apply_mask(s, 0.5, np.random.default_rng(0), mask_id=2)

    def test_context_never_masked_property(self):
        rng = np.random.default_rng(123)
        for _ in range(500):
            length = int(rng.integers(3, 24))
            n = int(rng.integers(1, length))
            r_m = float(rng.uniform(0.05, 1.0))
            s = seq_of(rng.integers(3, 30, size=length), n)
            masked, m = apply_mask(s, r_m, rng, mask_id=2)
            assert m.min() >= n
            assert len(m) == max(1, int(np.floor(r_m * s.m + 0.5)))
            assert len(set(m.tolist())) == len(m)
            assert np.array_equal(masked[:n], s.ids[:n])


class TestPredictor:
    def test_output_dim_matches_hidden(self, bundle):
        h = ad.Tensor(np.random.default_rng(0).standard_normal((8, 16)).astype(np.float32))
        out = predictor_forward(bundle.predictor, h, [1, 4], ENC, PRED)
        assert out.shape == (2, 16)

    def test_ablation_grid_dims(self):
        for depth in (1, 2, 4):
            for mult in (0.5, 1.0, 2.0):
                pred = PredictorConfig(depth=depth, bottleneck=int(mult * 16), heads=2)
                b = ModelBundle(ENC, pred, mask_id=2, seed=0)
                h = ad.Tensor(np.zeros((6, 16), np.float32))
                out = predictor_forward(b.predictor, h, [0, 5], ENC, pred)
                assert out.shape == (2, 16)

    def test_degenerate_weights_reduce_to_layer_norm(self):
        """Zero residual branches + identity down/up: output rows equal
        LayerNorm of the input rows."""
        enc = EncoderConfig(vocab_size=10, hidden=8, layers=1, heads=2, max_len=16)
        pred = PredictorConfig(depth=1, bottleneck=8, heads=2)
        b = ModelBundle(enc, pred, mask_id=2, seed=0)
        p = b.predictor
        eye = np.eye(8, dtype=np.float32)
        p["down"].data = eye.copy()
        p["up"].data = eye.copy()
        for w in ("attn.wo", "mlp.w2"):
            p[f"l0.{w}"].data = np.zeros_like(p[f"l0.{w}"].data)
        rng = np.random.default_rng(3)
        h = ad.Tensor(rng.standard_normal((5, 8)).astype(np.float32))
        out = predictor_forward(p, h, np.arange(5), enc, pred)
        from ehrjepa.kernels import layernorm_fwd

        expect, _, _ = layernorm_fwd(
            h.data, p["ln_out.g"].data, p["ln_out.b"].data, 1e-5
        )
        assert np.allclose(out.data, expect, atol=1e-5)

    def test_bottleneck_mismatch_rejected(self, bundle):
        h = ad.Tensor(np.zeros((4, 16), np.float32))
        wrong = PredictorConfig(depth=1, bottleneck=4, heads=2)
        with pytest.raises(DataError, match="bottleneck"):
            predictor_forward(bundle.predictor, h, [0], ENC, wrong)

    def test_gradient_reaches_mask_token(self, bundle):
        """Masking a continuation position routes JEPA gradient into the
        mask embedding row."""
        rng = np.random.default_rng(0)
        ids = rng.integers(3, 30, size=10)
        s = seq_of(ids, 6)
        masked, m = apply_mask(s, 1.0, rng, bundle.mask_id)
        with ad.record():
            h, _ = encoder_forward(bundle.online, masked, ENC)
            pred = predictor_forward(bundle.predictor, h, m, ENC, PRED)
            tgt = ad.Tensor(np.zeros(pred.shape, np.float32))
            loss = ad.masked_mse(pred, tgt, np.arange(len(m)))
            ad.backward(loss)
        grad_row = bundle.online["tok_emb"].grad[bundle.mask_id]
        assert np.abs(grad_row).max() > 0


class TestMomentumEncoder:
    def test_same_params_same_output(self, bundle):
        ids = np.arange(3, 13)
        h_online, _ = encoder_forward(bundle.online, ids, ENC)
        h_mom = momentum_forward(bundle.momentum, ids, ENC)
        assert np.array_equal(h_online.data, h_mom.data)

    def test_no_grads_recorded(self, bundle):
        ids = np.arange(3, 13)
        with ad.record():
            h = momentum_forward(bundle.momentum, ids, ENC)
            assert not h.requires_grad
        assert all(t.grad is None for t in bundle.momentum.values())

    def test_momentum_params_not_trainable(self, bundle):
        assert all(not t.requires_grad for t in bundle.momentum.values())

    def test_output_independent_of_rng(self, bundle):
        ids = np.arange(3, 13)
        np.random.seed(0)
        a = momentum_forward(bundle.momentum, ids, ENC).data
        np.random.seed(999)
        b = momentum_forward(bundle.momentum, ids, ENC).data
        assert np.array_equal(a, b)


class TestEmaUpdate:
    def test_fixed_point(self, bundle):
        before = {k: t.data.copy() for k, t in bundle.momentum.items()}
        ema_update(bundle.momentum, bundle.online, 0.996)
        for k, t in bundle.momentum.items():
            assert np.allclose(t.data, before[k])  # theta_bar == theta here

    def test_tau_one_freezes(self, bundle):
        bundle.online["tok_emb"].data += 1.0
        before = bundle.momentum["tok_emb"].data.copy()
        ema_update(bundle.momentum, bundle.online, 1.0)
        assert np.array_equal(bundle.momentum["tok_emb"].data, before)

    def test_tau_zero_copies(self, bundle):
        bundle.online["tok_emb"].data += 1.0
        ema_update(bundle.momentum, bundle.online, 0.0)
        assert np.array_equal(
            bundle.momentum["tok_emb"].data, bundle.online["tok_emb"].data
        )

    def test_paper_tau_arithmetic(self):
        mom = {"w": ad.Tensor(np.zeros(3, np.float32))}
        onl = {"w": ad.Tensor(np.ones(3, np.float32))}
        ema_update(mom, onl, 0.996)
        assert np.allclose(mom["w"].data, 0.004, atol=1e-7)

    def test_name_bijection_enforced(self, bundle):
        extra = dict(bundle.online)
        extra["rogue"] = ad.Tensor(np.zeros(1, np.float32))
        with pytest.raises(DataError):
            ema_update(bundle.momentum, extra, 0.5)

    def test_mask_token_is_embedding_row(self, bundle):
        assert np.array_equal(
            bundle.mask_token, bundle.online["tok_emb"].data[bundle.mask_id]
        )

    def test_init_std(self):
        big = ModelBundle(
            EncoderConfig(vocab_size=2000, hidden=64), PredictorConfig(), 2, seed=0
        )
        emb = big.online["tok_emb"].data
        assert abs(float(emb.std()) - 0.02) < 0.002
