import numpy as np
import pytest

from skeldiff.autodiff import Value
from skeldiff.optim import (
    AdamWHyper,
    AdamWState,
    adamw_init,
    adamw_step,
    load_checkpoint,
    save_checkpoint,
)


def make_params(rng, shapes):
    return {f"p{i}": Value(rng.normal(size=s), requires_grad=True) for i, s in enumerate(shapes)}


class TestAdamW:
    def test_zero_grad_no_decay_leaves_params(self):
        rng = np.random.default_rng(0)
        params = make_params(rng, [(3, 2), (4,)])
        before = {k: v.data.copy() for k, v in params.items()}
        state = adamw_init(params, AdamWHyper(lr=1e-3, weight_decay=0.0))
        adamw_step(params, {k: np.zeros_like(v.data) for k, v in params.items()}, state)
        for k in params:
            np.testing.assert_array_equal(params[k].data, before[k])

    def test_zero_grad_decay_only_scales(self):
        rng = np.random.default_rng(1)
        params = make_params(rng, [(5,)])
        before = params["p0"].data.copy()
        state = adamw_init(params, AdamWHyper(lr=1e-4, weight_decay=0.1))
        adamw_step(params, {"p0": np.zeros(5)}, state)
        np.testing.assert_allclose(params["p0"].data, before * (1.0 - 1e-5), rtol=0, atol=0)

    def test_first_step_matches_hand_formula(self):
        # hand evaluation of the update at step 1: bias corrections cancel,
        # so the step is -lr * g / (|g| + eps)
        rng = np.random.default_rng(2)
        g = rng.normal(size=(4, 3))
        params = make_params(rng, [(4, 3)])
        before = params["p0"].data.copy()
        hyper = AdamWHyper(lr=1e-2, weight_decay=0.0, eps=1e-8)
        state = adamw_init(params, hyper)
        adamw_step(params, {"p0": g}, state)
        expected = before - hyper.lr * g / (np.abs(g) + hyper.eps)
        np.testing.assert_allclose(params["p0"].data, expected, atol=1e-15)

    def test_matches_textbook_reference_over_steps(self):
        # oracle: independent textbook AdamW loop
        rng = np.random.default_rng(3)
        p0 = rng.normal(size=(6,))
        grads = [rng.normal(size=(6,)) for _ in range(10)]
        hyper = AdamWHyper(lr=3e-3, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.02)

        ref = p0.copy()
        m = np.zeros(6)
        v = np.zeros(6)
        for step, g in enumerate(grads, start=1):
            ref = ref * (1 - hyper.lr * hyper.weight_decay)
            m = hyper.beta1 * m + (1 - hyper.beta1) * g
            v = hyper.beta2 * v + (1 - hyper.beta2) * g * g
            mhat = m / (1 - hyper.beta1**step)
            vhat = v / (1 - hyper.beta2**step)
            ref = ref - hyper.lr * mhat / (np.sqrt(vhat) + hyper.eps)

        params = {"p0": Value(p0.copy(), requires_grad=True)}
        state = adamw_init(params, hyper)
        for g in grads:
            adamw_step(params, {"p0": g}, state)
        np.testing.assert_allclose(params["p0"].data, ref, atol=1e-12)
        assert state.step_count == 10

    def test_uninitialized_state_rejected(self):
        params = {"p0": Value(np.zeros(3), requires_grad=True)}
        with pytest.raises(ValueError, match="uninitialized"):
            adamw_step(params, {"p0": np.zeros(3)}, AdamWState(hyper=AdamWHyper()))

    def test_missing_grad_rejected(self):
        params = {"p0": Value(np.zeros(3), requires_grad=True)}
        state = adamw_init(params)
        with pytest.raises(ValueError, match="no gradient"):
            adamw_step(params, {}, state)

    def test_shape_mismatch_rejected(self):
        params = {"p0": Value(np.zeros(3), requires_grad=True)}
        state = adamw_init(params)
        with pytest.raises(ValueError, match="shape"):
            adamw_step(params, {"p0": np.zeros(4)}, state)


class TestCheckpoint:
    def test_roundtrip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(4)
        params = make_params(rng, [(3, 2), (4,), (2, 2, 2)])
        path = tmp_path / "ckpt.bin"
        save_checkpoint(params, path, extra={"kind": "test", "note": 7})
        arrays, extra = load_checkpoint(path)
        assert extra == {"kind": "test", "note": 7}
        assert list(arrays) == list(params)
        for name in params:
            assert arrays[name].tobytes() == params[name].data.tobytes()

    def test_double_roundtrip_byte_identical(self, tmp_path):
        rng = np.random.default_rng(5)
        params = make_params(rng, [(8, 8)])
        p1, p2 = tmp_path / "a.bin", tmp_path / "b.bin"
        save_checkpoint(params, p1)
        arrays, _ = load_checkpoint(p1)
        save_checkpoint(arrays, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_truncated_rejected(self, tmp_path):
        rng = np.random.default_rng(6)
        path = tmp_path / "ckpt.bin"
        save_checkpoint(make_params(rng, [(4, 4)]), path)
        path.write_bytes(path.read_bytes()[:-16])
        with pytest.raises(ValueError, match="truncated"):
            load_checkpoint(path)

    def test_trailing_bytes_rejected(self, tmp_path):
        rng = np.random.default_rng(7)
        path = tmp_path / "ckpt.bin"
        save_checkpoint(make_params(rng, [(2,)]), path)
        path.write_bytes(path.read_bytes() + b"x")
        with pytest.raises(ValueError, match="trailing"):
            load_checkpoint(path)
