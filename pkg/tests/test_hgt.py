import math

import numpy as np
import pytest

from vision_hgnn import autodiff as ad
from vision_hgnn.autodiff import Tensor
from vision_hgnn.errors import ConfigError, DimensionError
from vision_hgnn.hgt import attention_maps, hgt_layer_forward, hgt_stack_forward, msa


def layer_params(rng, d, heads, layers=1, scale=0.4, zero=False):
    params = {}
    for layer in range(layers):
        p = f"hgt.{layer}"
        shapes = {
            f"{p}.ln1.gain": (d,), f"{p}.ln1.bias": (d,), f"{p}.ln2.gain": (d,), f"{p}.ln2.bias": (d,),
            f"{p}.attn.Wo": (d, d), f"{p}.mlp.W1": (d, 4 * d), f"{p}.mlp.b1": (4 * d,),
            f"{p}.mlp.W2": (4 * d, d), f"{p}.mlp.b2": (d,),
        }
        for k in range(heads):
            for w in ("Wq", "Wk", "Wv"):
                shapes[f"{p}.attn.head{k}.{w}"] = (d, d // heads)
        for name, shape in shapes.items():
            if name.endswith("gain"):
                params[name] = Tensor(np.ones(shape) + (0 if zero else 0.1 * rng.normal(size=shape)))
            elif zero:
                params[name] = Tensor(np.zeros(shape))
            else:
                params[name] = Tensor(rng.normal(size=shape) * scale)
    return params


def ref_attention(x, Wq, Wk, Wv):
    """Loop over query rows; softmax over every key row."""
    n, dh = x.shape[0], Wq.shape[1]
    out = np.zeros((n, dh))
    for i in range(n):
        q = x[i] @ Wq
        scores = np.array([q @ (x[j] @ Wk) / math.sqrt(dh) for j in range(n)])
        w = np.exp(scores - scores.max())
        w /= w.sum()
        for j in range(n):
            out[i] += w[j] * (x[j] @ Wv)
    return out


def ref_layer_norm(x, gain, bias, eps=1e-5):
    mu = x.mean(axis=1, keepdims=True)
    var = x.var(axis=1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * gain + bias


def ref_gelu(x):
    return 0.5 * x * (1 + np.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x ** 3)))


def ref_msa(x, params, prefix, heads):
    outs = [ref_attention(x, *(params[f"{prefix}.head{k}.{w}"].data for w in ("Wq", "Wk", "Wv")))
            for k in range(heads)]
    return np.concatenate(outs, axis=1) @ params[f"{prefix}.Wo"].data


def ref_layer(h, skip, params, heads):
    P = {k: v.data for k, v in params.items()}
    mid = ref_msa(ref_layer_norm(h + skip, P["hgt.0.ln1.gain"], P["hgt.0.ln1.bias"]), params, "hgt.0.attn", heads) + h
    hidden = ref_gelu(ref_layer_norm(mid, P["hgt.0.ln2.gain"], P["hgt.0.ln2.bias"]) @ P["hgt.0.mlp.W1"] + P["hgt.0.mlp.b1"])
    return hidden @ P["hgt.0.mlp.W2"] + P["hgt.0.mlp.b2"] + mid


class TestMSA:
    def test_single_row(self, rng):
        params = layer_params(rng, 4, 2)
        x = rng.normal(size=(1, 4))
        out, weights = msa(Tensor(x), params, "hgt.0.attn", 2, return_attention=True)
        for w in weights:
            np.testing.assert_allclose(w.data, [[1.0]])
        v = np.concatenate([x @ params[f"hgt.0.attn.head{k}.Wv"].data for k in range(2)], axis=1)
        np.testing.assert_allclose(out.data, v @ params["hgt.0.attn.Wo"].data)

    def test_identical_rows(self, rng):
        params = layer_params(rng, 4, 2)
        row = rng.normal(size=4)
        out = msa(Tensor(np.stack([row, rng.normal(size=4), row])), params, "hgt.0.attn", 2).data
        np.testing.assert_allclose(out[0], out[2])

    def test_one_head_against_loop(self, rng):
        params = layer_params(rng, 4, 1)
        x = rng.normal(size=(3, 4))
        out = msa(Tensor(x), params, "hgt.0.attn", 1)
        np.testing.assert_allclose(out.data, ref_msa(x, params, "hgt.0.attn", 1), atol=1e-6)

    def test_four_heads_against_loop(self, rng):
        params = layer_params(rng, 8, 4)
        x = rng.normal(size=(6, 8))
        out = msa(Tensor(x), params, "hgt.0.attn", 4)
        np.testing.assert_allclose(out.data, ref_msa(x, params, "hgt.0.attn", 4), atol=1e-12)

    def test_rows_sum_to_one(self, rng):
        params = layer_params(rng, 8, 4, scale=3.0)
        _, weights = msa(Tensor(rng.normal(size=(10, 8)) * 4), params, "hgt.0.attn", 4, return_attention=True)
        for w in weights:
            np.testing.assert_allclose(w.data.sum(axis=1), 1.0, atol=1e-6)

    def test_heads_must_divide(self, rng):
        with pytest.raises(ConfigError):
            msa(Tensor(np.zeros((2, 6))), {}, "x", 4)


class TestLayer:
    def test_against_reference(self, rng):
        params = layer_params(rng, 8, 2)
        h, skip = rng.normal(size=(5, 8)), rng.normal(size=(5, 8))
        out = hgt_layer_forward(Tensor(h), Tensor(skip), params, 0, 2)
        np.testing.assert_allclose(out.data, ref_layer(h, skip, params, 2), atol=1e-12)

    def test_zero_weights_are_identity(self, rng):
        params = layer_params(rng, 8, 4, layers=2, zero=True)
        h = rng.normal(size=(5, 8))
        out = hgt_stack_forward(Tensor(h), Tensor(rng.normal(size=(5, 8))), params, 2, 4)
        assert np.array_equal(out.data, h)

    def test_skip_is_used(self, rng):
        params = layer_params(rng, 8, 2)
        h = rng.normal(size=(5, 8))
        a = hgt_layer_forward(Tensor(h), Tensor(np.zeros((5, 8))), params, 0, 2).data
        b = hgt_layer_forward(Tensor(h), Tensor(rng.normal(size=(5, 8))), params, 0, 2).data
        assert not np.allclose(a, b)

    def test_shape_mismatch(self, rng):
        params = layer_params(rng, 4, 2)
        with pytest.raises(DimensionError):
            hgt_layer_forward(Tensor(np.zeros((3, 4))), Tensor(np.zeros((2, 4))), params, 0, 2)

    def test_default_shape(self, rng):
        params = layer_params(rng, 128, 4, layers=2, scale=0.05)
        out = hgt_stack_forward(Tensor(rng.normal(size=(64, 128))), Tensor(rng.normal(size=(64, 128))), params, 2, 4)
        assert out.shape == (64, 128)

    def test_empty_stack(self, rng):
        h = Tensor(rng.normal(size=(3, 4)))
        assert hgt_stack_forward(h, h, {}, 0, 2) is h

    def test_stack_permutation_equivariance(self, rng):
        params = layer_params(rng, 8, 2, layers=2)
        h, skip = rng.normal(size=(7, 8)), rng.normal(size=(7, 8))
        perm = rng.permutation(7)
        out = hgt_stack_forward(Tensor(h), Tensor(skip), params, 2, 2).data
        permuted = hgt_stack_forward(Tensor(h[perm]), Tensor(skip[perm]), params, 2, 2).data
        np.testing.assert_allclose(permuted, out[perm], atol=1e-12)

    def test_attention_maps(self, rng):
        params = layer_params(rng, 8, 2, layers=2)
        maps = attention_maps(Tensor(rng.normal(size=(5, 8))), Tensor(rng.normal(size=(5, 8))), params, 2, 2)
        assert len(maps) == 4
        for m in maps:
            assert m.shape == (5, 5)
            np.testing.assert_allclose(m.sum(axis=1), 1.0, atol=1e-6)

    def test_gradcheck_toy(self, rng):
        params = layer_params(rng, 4, 2, layers=2)
        for t in params.values():
            t.requires_grad = True
        h = Tensor(rng.normal(size=(4, 4)), requires_grad=True)
        skip = Tensor(rng.normal(size=(4, 4)), requires_grad=True)
        w = rng.normal(size=(4, 4))

        def loss():
            return ad.sum_reduce(ad.mul(hgt_stack_forward(h, skip, params, 2, 2), Tensor(w)))

        assert ad.gradcheck(loss, [h, skip, *params.values()]) < 1e-4
