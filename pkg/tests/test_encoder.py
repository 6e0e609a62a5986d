import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from doei import tensor as T
from doei.doei import DoeiConfig
from doei.encoder import (
    ModelConfig,
    TokenState,
    block_forward,
    class_token_scores,
    embed,
    init_params,
    mlsm_loss,
    model_forward,
    param_names,
    patch_scores,
)
from doei.scenes import SceneSpec, default_classes, default_rules, generate, stack
from doei.tensor import Tensor
from doei.train import TrainConfig, train

TINY = ModelConfig(image_size=16, patch_size=8, num_classes=3, dim=8, depth=2, heads=2)


def zeroed(params, *names):
    out = dict(params)
    for n in names:
        out[n] = Tensor(np.zeros(params[n].shape), requires_grad=True)
    return out


def full_doei(depth=2, **kw):
    base = dict(af_p2c=2.0, sf_p2c=-0.5, af_c2c=1.5, sf_c2c=-0.3, alpha=0.35, active_layers=frozenset(range(1, depth + 1)))
    base.update(kw)
    return DoeiConfig(**base)


class TestEmbed:
    def test_zero_image_gives_position_encoding(self):
        params = init_params(TINY)
        state, _ = embed(np.zeros((16, 16, 3)), params, TINY)
        np.testing.assert_array_equal(state.tokens.data[0, 3:], params["pos_embed"].data[3:])

    def test_row_count(self):
        state, feats = embed(np.zeros((2, 16, 16, 3)), init_params(TINY), TINY)
        assert state.tokens.shape == (2, 3 + 4, 8)
        assert feats.shape == (2, 4, 8)

    def test_locality(self):
        params = init_params(TINY)
        a = np.random.default_rng(0).random((16, 16, 3))
        b = a.copy()
        b[8:, :8] = 0.0  # patch index 2
        _, fa = embed(a, params, TINY)
        _, fb = embed(b, params, TINY)
        differs = np.any(fa.data[0] != fb.data[0], axis=1)
        assert differs.tolist() == [False, False, True, False]

    def test_bad_image_shape(self):
        with pytest.raises(T.ShapeError):
            embed(np.zeros((15, 16, 3)), init_params(TINY), TINY)


class TestBlock:
    def test_single_token_degenerate(self):
        cfg = ModelConfig(image_size=8, patch_size=8, num_classes=1, dim=4, depth=1, heads=1)
        params = zeroed(init_params(cfg), "blk1.wq", "blk1.wk")
        state, _ = embed(np.zeros((8, 8, 3)), params, cfg)
        _, rec = block_forward(state, 1, params, cfg)
        assert rec.weights.data.tolist() == [[[[0.5, 0.5], [0.5, 0.5]]]]

    def test_rows_sum_to_one(self):
        params = init_params(TINY)
        state, _ = embed(np.random.default_rng(1).random((3, 16, 16, 3)), params, TINY)
        _, rec = block_forward(state, 1, params, TINY)
        np.testing.assert_allclose(rec.weights.data.sum(axis=-1), 1.0, atol=1e-9)

    def test_zero_weights_reduce_to_layer_norm(self):
        params = zeroed(init_params(TINY), "blk1.wq", "blk1.wk", "blk1.wv", "blk1.wo")
        state, _ = embed(np.random.default_rng(2).random((16, 16, 3)), params, TINY)
        trace = {}
        block_forward(state, 1, params, TINY, trace=trace)
        expected = T.layer_norm(state.tokens, params["blk1.ln_g"], params["blk1.ln_b"])
        np.testing.assert_allclose(trace["pre_mlp"].data, expected.data, atol=1e-12)

    def test_zero_mlp_output_is_bias(self):
        params = zeroed(init_params(TINY), "blk1.fc2_w")
        params["blk1.fc2_b"] = Tensor(np.full(8, 0.25), requires_grad=True)
        state, _ = embed(np.random.default_rng(3).random((16, 16, 3)), params, TINY)
        out, _ = block_forward(state, 1, params, TINY)
        assert np.all(out.tokens.data == 0.25)

    def test_layer_order_enforced(self):
        params = init_params(TINY)
        state, _ = embed(np.zeros((16, 16, 3)), params, TINY)
        with pytest.raises(ValueError):
            block_forward(state, 2, params, TINY)

    def test_patch_permutation_equivariance(self):
        # a block without position information commutes with any patch permutation
        rng = np.random.default_rng(4)
        x = rng.normal(size=(1, 7, 8))
        perm = np.concatenate([np.arange(3), 3 + rng.permutation(4)])
        for style in ("paper", "standard"):
            cfg = ModelConfig(**{**TINY.__dict__, "block_style": style})
            p = init_params(cfg)
            out, _ = block_forward(TokenState(Tensor(x), 0), 1, p, cfg)
            out_p, _ = block_forward(TokenState(Tensor(x[:, perm]), 0), 1, p, cfg)
            np.testing.assert_allclose(out_p.tokens.data, out.tokens.data[:, perm], atol=1e-12)


class TestScores:
    def test_class_token_mean(self):
        tokens = np.zeros((1, 5, 4))
        tokens[0, 0] = 2.0
        tokens[0, 1] = [1, 2, 3, 4]
        cfg = ModelConfig(image_size=8, patch_size=4, num_classes=1, dim=4, depth=1, heads=1)
        y = class_token_scores(TokenState(Tensor(tokens), 1), cfg)
        assert y.data.tolist() == [[2.0]]
        cfg2 = ModelConfig(image_size=8, patch_size=4, num_classes=2, dim=4, depth=1, heads=1)
        assert class_token_scores(TokenState(Tensor(np.pad(tokens, ((0, 0), (0, 1), (0, 0)))), 1), cfg2).data.tolist() == [[2.0, 2.5]]

    def test_patch_score_dot_product(self):
        cfg = ModelConfig(image_size=4, patch_size=2, num_classes=1, dim=2, depth=1, heads=1)
        tokens = np.ones((1, 5, 2))
        y = patch_scores(TokenState(Tensor(tokens), 1), Tensor([[2.0], [3.0]]), cfg)
        assert y.data.tolist() == [[5.0]]

    def test_zero_tokens(self):
        cfg = ModelConfig(image_size=4, patch_size=2, num_classes=2, dim=2, depth=1, heads=1)
        st_ = TokenState(Tensor(np.zeros((1, 6, 2))), 1)
        assert np.all(class_token_scores(st_, cfg).data == 0)
        assert np.all(patch_scores(st_, Tensor(np.ones((2, 2))), cfg).data == 0)


class TestMlsm:
    def test_log_two(self):
        assert mlsm_loss(Tensor([0.0]), [0]).item() == pytest.approx(0.6931471805599453, abs=1e-12)
        assert mlsm_loss(Tensor([0.0, 0.0]), [1, 0]).item() == pytest.approx(0.6931471805599453, abs=1e-12)

    def test_saturation(self):
        assert mlsm_loss(Tensor([800.0]), [1]).item() == 0.0
        assert np.isfinite(mlsm_loss(Tensor([-800.0]), [1]).item())

    @given(st.lists(st.floats(-100, 100), min_size=1, max_size=6), st.data())
    def test_nonnegative(self, logits, data):
        labels = data.draw(st.lists(st.integers(0, 1), min_size=len(logits), max_size=len(logits)))
        assert mlsm_loss(Tensor(logits), labels).item() >= 0.0


def tiny_batch(seed, b=2):
    rng = np.random.default_rng(seed)
    return rng.random((b, 16, 16, 3)), rng.integers(0, 2, size=(b, 3))


class TestModelForward:
    def test_identity_reduction(self):
        images, labels = tiny_batch(0)
        params = init_params(TINY)
        off = model_forward(images, labels, params, TINY).loss.item()
        cfg = full_doei(af_p2c=0.0, sf_p2c=0.0, af_c2c=0.0, sf_c2c=0.0, alpha=0.0)
        on = model_forward(images, labels, params, TINY, cfg).loss.item()
        assert abs(on - off) <= 1e-12

    def test_doei_changes_loss(self):
        images, labels = tiny_batch(1)
        params = init_params(TINY)
        off = model_forward(images, labels, params, TINY).loss.item()
        assert model_forward(images, labels, params, TINY, full_doei()).loss.item() != off

    def test_batch_matches_single(self):
        images, labels = tiny_batch(2, 3)
        params = init_params(TINY)
        batch = model_forward(images, labels, params, TINY, full_doei()).sample_losses
        single = [model_forward(images[i : i + 1], labels[i : i + 1], params, TINY, full_doei()).sample_losses[0] for i in range(3)]
        np.testing.assert_allclose(batch, single, atol=1e-12)

    @pytest.mark.parametrize("style", ["paper", "standard"])
    @pytest.mark.parametrize("seed", range(5))
    def test_gradient_check(self, seed, style):
        cfg = ModelConfig(**{**TINY.__dict__, "seed": seed, "block_style": style})
        images, labels = tiny_batch(seed)
        params = init_params(cfg)
        doei = full_doei()
        with T.Tape() as tape:
            res = model_forward(images, labels, params, cfg, doei)
        T.backward(res.loss, tape)
        rng = np.random.default_rng(seed)
        h = 1e-5
        worst = 0.0
        for name in param_names(cfg):
            base = params[name].data
            idxs = list(np.ndindex(base.shape))
            # every entry of small tensors, a random subset of larger ones
            if len(idxs) > 12:
                idxs = [idxs[i] for i in rng.choice(len(idxs), 12, replace=False)]
            for idx in idxs:
                vals = []
                for sign in (1, -1):
                    arr = base.copy()
                    arr[idx] += sign * h
                    vals.append(model_forward(images, labels, {**params, name: Tensor(arr)}, cfg, doei).loss.item())
                num = (vals[0] - vals[1]) / (2 * h)
                ana = params[name].grad[idx]
                worst = max(worst, abs(num - ana) / max(abs(num), abs(ana), 1e-6))
        assert worst <= 1e-4


class TestTrain:
    def _samples(self, n=4):
        spec = SceneSpec(canvas=16, classes=default_classes(3), cooccurrence_rules=default_rules(3, 0.5), objects_max=2, seed=3)
        return generate(spec, n)

    def test_lr_zero_keeps_init(self):
        res = train(self._samples(), TINY, TrainConfig(epochs=2, lr=0.0, batch_size=2))
        init = init_params(TINY)
        for k in init:
            assert np.array_equal(res.params[k].data, init[k].data)

    def test_deterministic(self):
        a = train(self._samples(), TINY, TrainConfig(epochs=2, batch_size=2), full_doei())
        b = train(self._samples(), TINY, TrainConfig(epochs=2, batch_size=2), full_doei())
        for k in a.params:
            assert np.array_equal(a.params[k].data, b.params[k].data)
        assert a.epoch_losses == b.epoch_losses

    def test_overfits_one_sample(self):
        samples = self._samples(1)
        res = train(samples, TINY, TrainConfig(epochs=150, lr=0.05, batch_size=1))
        assert res.epoch_losses[-1] < 0.05 * res.initial_loss

    def test_stack_shapes(self):
        images, labels = stack(self._samples(3))
        assert images.shape == (3, 16, 16, 3) and labels.shape == (3, 3)
