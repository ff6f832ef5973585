import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vision_hgnn import autodiff as ad
from vision_hgnn.autodiff import Tensor
from vision_hgnn.hgat import (
    hyperedge_embed,
    hypernode_update,
    inter_edge_attention,
    intra_edge_attention,
    layer_forward,
    stack_forward,
)
from vision_hgnn.hypergraph import build_incidence, pairwise_distances


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def softmax(v):
    e = np.exp(v - v.max())
    return e / e.sum()


def ref_alpha(h, H, W0):
    """{p: {i: alpha_pi}} by looping over the members of each hyperedge."""
    out = {}
    for p in range(H.shape[1]):
        members = [i for i in range(H.shape[0]) if H[i, p]]
        scores = np.array([np.maximum(h[i] @ W0, 0).sum() for i in members])
        out[p] = dict(zip(members, softmax(scores)))
    return out


def ref_edges(h, H, reps):
    d = h.shape[1]
    out = np.zeros((H.shape[1], d))
    for W in reps:
        alpha = ref_alpha(h, H, W["W0"])
        for p in range(H.shape[1]):
            acc = np.zeros(d)
            for i, a in alpha[p].items():
                acc += a * (h[i] @ W["W0"])
            out[p] += sigmoid(acc)
    return out


def ref_beta(h, e, H, W2, W3):
    d = W2.shape[1]
    out = {}
    for i in range(H.shape[0]):
        edges = [p for p in range(H.shape[1]) if H[i, p]]
        phi = np.array([max(0.0, W3[:d] @ (h[i] @ W2) + W3[d:] @ (e[p] @ W2)) for p in edges])
        out[i] = dict(zip(edges, softmax(phi)))
    return out


def ref_update(h, e, H, reps):
    out = np.zeros_like(h)
    for W in reps:
        beta = ref_beta(h, e, H, W["W2"], W["W3"])
        for i in range(H.shape[0]):
            msg = sum(b * (e[p] @ W["W1"]) for p, b in beta[i].items())
            out[i] += np.maximum(h[i] @ W["W0"] + msg, 0)
    return out


def dense(mapping, shape):
    out = np.zeros(shape)
    for r, row in mapping.items():
        for c, v in row.items():
            out[r, c] = v
    return out


def make_reps(rng, d, Z, scale=0.5):
    return [
        {"W0": rng.normal(size=(d, d)) * scale, "W1": rng.normal(size=(d, d)) * scale,
         "W2": rng.normal(size=(d, d)) * scale, "W3": rng.normal(size=2 * d) * scale}
        for _ in range(Z)
    ]


def as_tensors(reps):
    return [{k: Tensor(v) for k, v in W.items()} for W in reps]


def random_graph(rng, n, k, d):
    h = rng.normal(size=(n, d))
    return h, build_incidence(pairwise_distances(h), k)


class TestIntraAttention:
    def test_singleton(self):
        H = np.eye(3, dtype=bool)
        alpha = intra_edge_attention(Tensor(np.ones((3, 2))), H, Tensor(np.eye(2)))
        np.testing.assert_allclose(alpha.data, np.eye(3))

    def test_identical_members(self):
        H = np.array([[1, 1], [1, 1]], dtype=bool)
        alpha = intra_edge_attention(Tensor(np.ones((2, 3))), H, Tensor(np.eye(3)))
        np.testing.assert_allclose(alpha.data, 0.5)

    def test_against_loop(self, rng):
        h, H = random_graph(rng, 9, 4, 5)
        W0 = rng.normal(size=(5, 5))
        alpha = intra_edge_attention(Tensor(h), H, Tensor(W0))
        np.testing.assert_allclose(alpha.data, dense(ref_alpha(h, H, W0), (9, 9)), atol=1e-12)

    def test_zero_outside_members(self, rng):
        h, H = random_graph(rng, 8, 2, 3)
        alpha = intra_edge_attention(Tensor(h), H, Tensor(rng.normal(size=(3, 3)))).data
        assert np.all(alpha[~H.T] == 0)


class TestHyperedgeEmbed:
    def test_zero_case(self):
        H = np.ones((3, 3), dtype=bool)
        reps = as_tensors([{w: np.zeros((2, 2)) for w in ("W0", "W1", "W2")} | {"W3": np.zeros(4)}])
        out = hyperedge_embed(Tensor(np.zeros((3, 2))), H, reps)
        np.testing.assert_allclose(out.data, 0.5)

    @pytest.mark.parametrize("Z", [1, 2, 4])
    def test_range(self, rng, Z):
        h, H = random_graph(rng, 10, 3, 4)
        out = hyperedge_embed(Tensor(h), H, as_tensors(make_reps(rng, 4, Z))).data
        assert np.all(out > 0) and np.all(out < Z)
        # saturated inputs reach the bounds only through float rounding
        big = hyperedge_embed(Tensor(h * 50), H, as_tensors(make_reps(rng, 4, Z, scale=5.0))).data
        assert np.all(big >= 0) and np.all(big <= Z)

    def test_small_against_loop(self, rng):
        h, H = random_graph(rng, 4, 1, 3)
        reps = make_reps(rng, 3, 2)
        out = hyperedge_embed(Tensor(h), H, as_tensors(reps))
        np.testing.assert_allclose(out.data, ref_edges(h, H, reps), atol=1e-6)

    def test_larger_against_loop(self, rng):
        h, H = random_graph(rng, 12, 5, 6)
        reps = make_reps(rng, 6, 3)
        out = hyperedge_embed(Tensor(h), H, as_tensors(reps))
        np.testing.assert_allclose(out.data, ref_edges(h, H, reps), atol=1e-12)

    def test_locality(self, rng):
        h, H = random_graph(rng, 10, 3, 4)
        reps = as_tensors(make_reps(rng, 4, 2))
        base = hyperedge_embed(Tensor(h), H, reps).data
        for j in range(10):
            bumped = h.copy()
            bumped[j] += rng.normal(size=4)
            changed = np.abs(hyperedge_embed(Tensor(bumped), H, reps).data - base).max(axis=1) > 0
            assert np.array_equal(changed, H[j]), j


class TestInterAttention:
    def test_singleton(self, rng):
        H = np.eye(4, dtype=bool)
        beta = inter_edge_attention(Tensor(rng.normal(size=(4, 3))), Tensor(rng.normal(size=(4, 3))), H,
                                    Tensor(rng.normal(size=(3, 3))), Tensor(rng.normal(size=6)))
        np.testing.assert_allclose(beta.data, np.eye(4))

    def test_zero_w3_is_uniform(self, rng):
        h, H = random_graph(rng, 10, 3, 4)
        beta = inter_edge_attention(Tensor(h), Tensor(rng.normal(size=(10, 4))), H,
                                    Tensor(rng.normal(size=(4, 4))), Tensor(np.zeros(8))).data
        counts = H.sum(axis=1, keepdims=True)
        np.testing.assert_allclose(beta, H / counts, atol=1e-15)

    def test_against_loop(self, rng):
        h, H = random_graph(rng, 9, 3, 5)
        e = rng.normal(size=(9, 5))
        W2, W3 = rng.normal(size=(5, 5)), rng.normal(size=10)
        beta = inter_edge_attention(Tensor(h), Tensor(e), H, Tensor(W2), Tensor(W3))
        np.testing.assert_allclose(beta.data, dense(ref_beta(h, e, H, W2, W3), (9, 9)), atol=1e-12)


class TestHypernodeUpdate:
    def test_nonnegative(self, rng):
        h, H = random_graph(rng, 10, 3, 4)
        out = hypernode_update(Tensor(h), Tensor(rng.normal(size=(10, 4))), H, as_tensors(make_reps(rng, 4, 3)))
        assert np.all(out.data >= 0)

    def test_zero_weights(self, rng):
        h, H = random_graph(rng, 6, 2, 3)
        reps = as_tensors([{w: np.zeros((3, 3)) for w in ("W0", "W1", "W2")} | {"W3": np.zeros(6)}])
        out = hypernode_update(Tensor(h), Tensor(rng.normal(size=(6, 3))), H, reps)
        assert not out.data.any()

    def test_small_against_loop(self, rng):
        h, H = random_graph(rng, 4, 1, 3)
        e = rng.normal(size=(4, 3))
        reps = make_reps(rng, 3, 2)
        out = hypernode_update(Tensor(h), Tensor(e), H, as_tensors(reps))
        np.testing.assert_allclose(out.data, ref_update(h, e, H, reps), atol=1e-6)

    def test_layer_composes(self, rng):
        h, H = random_graph(rng, 8, 3, 4)
        reps = make_reps(rng, 4, 2)
        out = layer_forward(Tensor(h), H, as_tensors(reps))
        np.testing.assert_allclose(out.data, ref_update(h, ref_edges(h, H, reps), H, reps), atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 12), st.integers(1, 4), st.integers(0, 2**31))
def test_attention_rows_sum_to_one(n, d, seed):
    rng = np.random.default_rng(seed)
    h, H = random_graph(rng, n, int(rng.integers(1, n)), d)
    alpha = intra_edge_attention(Tensor(h), H, Tensor(rng.normal(size=(d, d)) * 3))
    beta = inter_edge_attention(Tensor(h), Tensor(rng.normal(size=(n, d))), H,
                                Tensor(rng.normal(size=(d, d)) * 3), Tensor(rng.normal(size=2 * d) * 3))
    np.testing.assert_allclose(alpha.data.sum(axis=1), 1.0, atol=1e-6)
    np.testing.assert_allclose(beta.data.sum(axis=1), 1.0, atol=1e-6)


def stack_params(rng, d, L, Z):
    params = {}
    for layer in range(L):
        for z, W in enumerate(make_reps(rng, d, Z)):
            for name, v in W.items():
                params[f"hgat.{layer}.z{z}.{name}"] = Tensor(v)
        params[f"hgat.{layer}.bn.gain"] = Tensor(rng.uniform(0.5, 1.5, size=d))
        params[f"hgat.{layer}.bn.bias"] = Tensor(rng.normal(size=d))
    params["hgat.proj"] = Tensor(rng.normal(size=(d * L, d)) / np.sqrt(d * L))
    buffers = {}
    for layer in range(L):
        buffers[f"hgat.{layer}.bn.running_mean"] = rng.normal(size=d)
        buffers[f"hgat.{layer}.bn.running_var"] = rng.uniform(0.5, 2.0, size=d)
    return params, buffers


class TestStack:
    def test_single_layer_identity_projection(self, rng):
        h, H = random_graph(rng, 7, 2, 4)
        params, buffers = stack_params(rng, 4, 1, 2)
        params["hgat.proj"] = Tensor(np.eye(4))
        out = stack_forward(Tensor(h), H, params, buffers, 1, 2)
        expected = layer_forward(Tensor(h), H, [{w: params[f"hgat.0.z{z}.{w}"] for w in ("W0", "W1", "W2", "W3")}
                                                for z in range(2)])
        np.testing.assert_allclose(out.data, expected.data)

    def test_two_layers_match_manual(self, rng):
        h, H = random_graph(rng, 7, 2, 4)
        params, buffers = stack_params(rng, 4, 2, 2)
        reps = [[{w: params[f"hgat.{layer}.z{z}.{w}"].data for w in ("W0", "W1", "W2", "W3")} for z in range(2)]
                for layer in range(2)]
        first = ref_update(h, ref_edges(h, H, reps[0]), H, reps[0])
        normed = (first - buffers["hgat.0.bn.running_mean"]) / np.sqrt(buffers["hgat.0.bn.running_var"] + 1e-5)
        normed = normed * params["hgat.0.bn.gain"].data + params["hgat.0.bn.bias"].data
        second = ref_update(normed, ref_edges(normed, H, reps[1]), H, reps[1])
        expected = np.concatenate([first, second], axis=1) @ params["hgat.proj"].data
        out = stack_forward(Tensor(h), H, params, buffers, 2, 2, dropout_rate=0.2, training=False)
        np.testing.assert_allclose(out.data, expected, atol=1e-10)

    def test_default_shape(self, rng):
        h, H = random_graph(rng, 64, 20, 128)
        params, buffers = stack_params(rng, 128, 2, 4)
        assert stack_forward(Tensor(h), H, params, buffers, 2, 4).shape == (64, 128)

    @pytest.mark.parametrize("training", [False, True])
    def test_permutation_equivariance(self, rng, training):
        h, H = random_graph(rng, 9, 3, 4)
        params, buffers = stack_params(rng, 4, 2, 2)
        perm = rng.permutation(9)
        out = stack_forward(Tensor(h), H, params, buffers, 2, 2, training=training)
        permuted = stack_forward(Tensor(h[perm]), H[np.ix_(perm, perm)], params,
                                 {k: v.copy() for k, v in buffers.items()}, 2, 2, training=training)
        np.testing.assert_allclose(permuted.data, out.data[perm], atol=1e-5)

    def test_gradcheck_toy(self, rng):
        h, H = random_graph(rng, 4, 1, 3)
        params, buffers = stack_params(rng, 3, 2, 2)
        for t in params.values():
            t.requires_grad = True
        x = Tensor(h, requires_grad=True)
        w = rng.normal(size=(4, 3))

        def loss():
            out = stack_forward(x, H, params, buffers, 2, 2, dropout_rate=0.0, training=False)
            return ad.sum_reduce(ad.mul(out, Tensor(w)))

        assert ad.kink_margin(loss) > 1e-4
        assert ad.gradcheck(loss, [x, *params.values()]) < 1e-4
