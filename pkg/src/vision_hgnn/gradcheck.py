"""Finite-difference checks for every differentiable op and the assembled model.

Parameters are redrawn at random before checking the model: freshly
initialized W3 and bias vectors are exactly zero, which puts ReLU inputs on
their kink where central differences are not meaningful.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import hgat, hgt
from .autodiff import Tensor
from .model import VisionHgNNConfig, forward_patches, init_parameters
from .training import cross_entropy

TOLERANCE = 1e-4
STEP = 1e-5
# instances with a relu input closer than this to zero are redrawn
KINK_MARGIN = 10 * STEP


@dataclass
class CheckResult:
    name: str
    max_rel_error: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < TOLERANCE


def _leaf(rng, *shape, low=None) -> Tensor:
    data = rng.normal(size=shape) if low is None else rng.uniform(low, 1.0 + low, size=shape)
    return Tensor(data, requires_grad=True, dtype=np.float64)


def _weight(rng, *shape) -> Tensor:
    # fan-in scaling keeps attention logits O(1); unit-normal weights saturate
    # the softmax and leave gradients far below the finite-difference noise
    return Tensor(rng.normal(size=shape) / np.sqrt(shape[0]), requires_grad=True, dtype=np.float64)


def _weighted(out: Tensor, weights: np.ndarray) -> Tensor:
    # a random linear functional exercises every output component differently
    return ad.sum_reduce(ad.mul(out, Tensor(weights)))


def op_cases(rng: np.random.Generator) -> list[tuple[str, Callable[[], Tensor], list[Tensor]]]:
    """(name, loss_fn, inputs) triples covering the op set."""
    cases = []

    def add_case(name, build, inputs):
        sample = build()
        w = rng.normal(size=sample.shape)
        cases.append((name, lambda: _weighted(build(), w), inputs))

    a, b = _leaf(rng, 3, 4), _leaf(rng, 4, 2)
    add_case("matmul", lambda: ad.matmul(a, b), [a, b])
    x, W, bias = _leaf(rng, 3, 4), _leaf(rng, 4, 5), _leaf(rng, 5)
    add_case("linear", lambda: ad.linear(x, W, bias), [x, W, bias])
    u, v = _leaf(rng, 3, 4), _leaf(rng, 3, 4)
    add_case("add", lambda: ad.add(u, v), [u, v])
    add_case("sub", lambda: ad.sub(u, v), [u, v])
    add_case("mul", lambda: ad.mul(u, v), [u, v])
    s = _leaf(rng)
    add_case("scalar_mul", lambda: ad.mul(u, s), [u, s])
    add_case("scale", lambda: ad.scale(u, -2.5), [u])
    add_case("relu", lambda: ad.relu(u), [u])
    add_case("sigmoid", lambda: ad.sigmoid(u), [u])
    add_case("gelu", lambda: ad.gelu(u), [u])
    add_case("exp", lambda: ad.exp(u), [u])
    pos = _leaf(rng, 3, 4, low=0.5)
    add_case("log", lambda: ad.log(pos), [pos])
    add_case("softmax", lambda: ad.softmax_over(u, axis=1), [u])
    mask = rng.random((3, 4)) < 0.6
    mask[:, 0] = True
    add_case("masked_softmax", lambda: ad.softmax_over(u, axis=1, mask=mask), [u])
    add_case("log_softmax", lambda: ad.log_softmax_over(u, axis=1), [u])
    add_case("sum_reduce", lambda: ad.sum_reduce(u, axis=0), [u])
    add_case("mean_reduce", lambda: ad.mean_reduce(u, axis=1), [u])
    add_case("concat", lambda: ad.concat([u, v], axis=1), [u, v])
    add_case("transpose", lambda: ad.transpose(u), [u])
    add_case("reshape", lambda: ad.reshape(u, (2, 6)), [u])
    add_case("take_rows", lambda: ad.take_rows(u, [2, 0, 2]), [u])
    ln_x, gain, beta = _leaf(rng, 4, 8), _leaf(rng, 8), _leaf(rng, 8)
    add_case("layer_norm", lambda: ad.layer_norm(ln_x, gain, beta), [ln_x, gain, beta])
    rm, rv = np.zeros(8), np.ones(8)
    add_case("batch_norm[train]", lambda: ad.batch_norm(ln_x, gain, beta, rm, rv, True), [ln_x, gain, beta])
    rm2, rv2 = rng.normal(size=8), rng.uniform(0.5, 2.0, size=8)
    add_case("batch_norm[eval]", lambda: ad.batch_norm(ln_x, gain, beta, rm2, rv2, False), [ln_x, gain, beta])
    add_case("dropout", lambda: ad.dropout(u, 0.3, True, (3, 1, 0, 7)), [u])
    logits = _leaf(rng, 5, 4)
    labels = rng.integers(0, 4, size=5)
    cases.append(("cross_entropy", lambda: cross_entropy(logits, labels), [logits]))
    return cases


def _random_hypergraph(rng, n: int, k: int) -> np.ndarray:
    from .hypergraph import build_incidence, pairwise_distances

    return build_incidence(pairwise_distances(rng.normal(size=(n, 3))), k)


def layer_cases(rng: np.random.Generator) -> list[tuple[str, Callable[[], Tensor], list[Tensor]]]:
    d, n = 6, 5
    incidence = _random_hypergraph(rng, n, 2)
    h = _leaf(rng, n, d)
    reps = [{"W0": _weight(rng, d, d), "W1": _weight(rng, d, d), "W2": _weight(rng, d, d), "W3": _weight(rng, 2 * d)}
            for _ in range(2)]
    flat = [h] + [t for r in reps for t in r.values()]
    edges = _leaf(rng, n, d)
    cases = []

    def add_case(name, build, inputs):
        w = rng.normal(size=build().shape)
        cases.append((name, lambda: _weighted(build(), w), inputs))

    add_case("hgat.intra_attention", lambda: hgat.intra_edge_attention(h, incidence, reps[0]["W0"]), [h, reps[0]["W0"]])
    add_case("hgat.hyperedge_embed", lambda: hgat.hyperedge_embed(h, incidence, reps), flat)
    # h is not checked here: its score term is constant along each softmax row
    # and cancels, so its true gradient is ~0 and only roundoff is left to
    # measure. The hypernode_update and layer cases cover h.
    add_case(
        "hgat.inter_attention",
        lambda: hgat.inter_edge_attention(h, edges, incidence, reps[0]["W2"], reps[0]["W3"]),
        [edges, reps[0]["W2"], reps[0]["W3"]],
    )
    add_case("hgat.hypernode_update", lambda: hgat.hypernode_update(h, edges, incidence, reps), flat + [edges])
    add_case("hgat.layer", lambda: hgat.layer_forward(h, incidence, reps), flat)

    params = {}
    for name, shape in {
        "hgt.0.ln1.gain": (d,), "hgt.0.ln1.bias": (d,), "hgt.0.ln2.gain": (d,), "hgt.0.ln2.bias": (d,),
        "hgt.0.attn.Wo": (d, d), "hgt.0.mlp.W1": (d, 4 * d), "hgt.0.mlp.b1": (4 * d,),
        "hgt.0.mlp.W2": (4 * d, d), "hgt.0.mlp.b2": (d,),
        **{f"hgt.0.attn.head{k}.{w}": (d, d // 2) for k in range(2) for w in ("Wq", "Wk", "Wv")},
    }.items():
        params[name] = _weight(rng, *shape) if len(shape) == 2 else _leaf(rng, *shape)
    skip = _leaf(rng, n, d)
    add_case("hgt.msa", lambda: hgt.msa(h, params, "hgt.0.attn", 2), [h] + list(params.values()))
    add_case("hgt.layer", lambda: hgt.hgt_layer_forward(h, skip, params, 0, 2), [h, skip] + list(params.values()))
    return cases


def toy_model_config(**overrides) -> VisionHgNNConfig:
    """4 patches of 2x2x3, K=1, d=8, 64-bit."""
    base = dict(
        d=8, patch_size=2, image_size=4, k=1, replicas=2, hgat_layers=2, hgt_layers=2, heads=2,
        dropout=0.2, num_classes=3, precision="float64",
    )
    base.update(overrides)
    return VisionHgNNConfig(**base).validate()


def randomize(params, rng: np.random.Generator) -> None:
    for name, t in params.tensors.items():
        if name.endswith("gain"):
            t.data = 1.0 + 0.1 * rng.normal(size=t.shape)
        elif t.ndim == 2:
            t.data = rng.normal(size=t.shape) / np.sqrt(t.shape[0])
        else:
            t.data = 0.5 * rng.normal(size=t.shape)


def model_cases(rng: np.random.Generator) -> list[tuple[str, Callable[[], Tensor], list[Tensor]]]:
    cases = []
    for name, cfg, training in (
        ("model[train]", toy_model_config(), True),
        ("model[eval,virtual,cls]", toy_model_config(virtual_node=True, readout="cls"), False),
    ):
        params = init_parameters(cfg, seed=int(rng.integers(1 << 31)))
        randomize(params, rng)
        features = rng.uniform(-1, 1, size=(cfg.n_patches, cfg.patch_dim))
        label = [int(rng.integers(cfg.num_classes))]

        def loss(params=params, cfg=cfg, features=features, label=label, training=training):
            logits = forward_patches(features, params, cfg, training=training, key=(1, 2, 3))
            return cross_entropy(ad.reshape(logits, (1, cfg.num_classes)), label)

        cases.append((name, loss, params.trainable()))
    return cases


def _all_cases(rng, include_model):
    cases = op_cases(rng) + layer_cases(rng)
    if include_model:
        cases += model_cases(rng)
    return cases


def draw_cases(seed: int = 0, include_model: bool = True, max_attempts: int = 20):
    """One instance per case, each clear of relu kinks by ``KINK_MARGIN``.

    A case whose first draw lands near a kink is redrawn from a derived
    seed; the result is still a pure function of ``seed``.
    """
    first = _all_cases(np.random.default_rng(seed), include_model)
    picked = []
    for name, fn, inputs in first:
        attempt = 0
        while ad.kink_margin(fn) < KINK_MARGIN and attempt < max_attempts:
            attempt += 1
            redraw = {n: (f, i) for n, f, i in _all_cases(np.random.default_rng([seed, attempt]), include_model)}
            fn, inputs = redraw[name]
        picked.append((name, fn, inputs))
    return picked


def run_suite(seed: int = 0, include_model: bool = True) -> list[CheckResult]:
    return [CheckResult(name, ad.gradcheck(fn, inputs, STEP)) for name, fn, inputs in draw_cases(seed, include_model)]


def format_table(results: list[CheckResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{'op':<{width}}  {'max rel err':>12}  status"]
    for r in results:
        lines.append(f"{r.name:<{width}}  {r.max_rel_error:>12.3e}  {'pass' if r.passed else 'FAIL'}")
    return "\n".join(lines)
