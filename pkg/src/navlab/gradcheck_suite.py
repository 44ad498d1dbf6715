"""Finite-difference audit of every differentiable kernel and encoder.

Each case builds small double-precision inputs, runs the kernel to a scalar,
and compares backward gradients against central differences.  The suite is
callable from the command line and from the acceptance tests; it reports the
worst relative error seen across all cases and seeds.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import autodiff as ad
from .agent import AgentConfig, build_agent
from .autodiff import Tensor
from .encoders import EncoderConfig, build_encoder, encoder_variants


def _t(rng: np.random.Generator, *shape: int) -> Tensor:
    return Tensor(rng.normal(size=shape))


def _off_kink(rng: np.random.Generator, *shape: int) -> Tensor:
    """Values bounded away from zero, where relu/abs kinks would break FD."""
    raw = rng.uniform(0.2, 1.0, size=shape) * rng.choice([-1.0, 1.0],
                                                         size=shape)
    return Tensor(raw)


def kernel_cases(rng: np.random.Generator) -> dict[str, tuple[Callable, list[Tensor]]]:
    """Name -> (scalar-valued fn, fresh inputs).  Covers every public op."""
    g, b = Tensor(rng.normal(size=4) * 0.1 + 1.0), Tensor(rng.normal(size=4))
    w, bias = _t(rng, 5, 3), _t(rng, 3)
    table = _t(rng, 6, 4)
    ids = rng.integers(0, 6, size=7)
    conv_x, conv_w, conv_b = _t(rng, 2, 3, 6, 6), _t(rng, 4, 3, 3, 3), _t(rng, 4)
    wx, wh = _t(rng, 4, 9), Tensor(ad.orthogonal(rng, (3, 3)).astype(np.float64))
    whs = Tensor(np.concatenate([wh.data, wh.data, wh.data], axis=1))
    bx, bh = _t(rng, 9), _t(rng, 9)
    min_a = _t(rng, 3, 4)
    # Keep the two branches separated so the min has no ties near the probe.
    min_b = Tensor(min_a.data + _off_kink(rng, 3, 4).data)

    return {
        "add": (lambda a, c: ad.tsum(a + c), [_t(rng, 3, 4), _t(rng, 4)]),
        "mul": (lambda a, c: ad.tsum(a * c), [_t(rng, 3, 4), _t(rng, 3, 1)]),
        "power": (lambda a: ad.tsum(ad.power(a, 3.0)), [_t(rng, 3, 3)]),
        "exp": (lambda a: ad.tsum(ad.texp(a)), [_t(rng, 3, 3)]),
        "log": (lambda a: ad.tsum(ad.tlog(a * a + 1.0)), [_t(rng, 3, 3)]),
        "abs": (lambda a: ad.tsum(ad.tabs(a)), [_off_kink(rng, 3, 4)]),
        "relu": (lambda a: ad.tsum(ad.relu(a)), [_off_kink(rng, 3, 4)]),
        "gelu": (lambda a: ad.tsum(ad.gelu(a)), [_t(rng, 3, 4)]),
        "sigmoid": (lambda a: ad.tsum(ad.sigmoid(a)), [_t(rng, 3, 4)]),
        "tanh": (lambda a: ad.tsum(ad.tanh(a)), [_t(rng, 3, 4)]),
        "minimum": (lambda a, c: ad.tsum(ad.minimum(a, c) ** 2.0),
                    [min_a, min_b]),
        "clip": (lambda a: ad.tsum(ad.clip(a, -0.9, 0.9)),
                 [_off_kink(rng, 3, 4)]),
        "sum_axis": (lambda a: ad.tsum(ad.tsum(a, axis=1) ** 2.0),
                     [_t(rng, 3, 4)]),
        "mean": (lambda a: ad.tsum(ad.tmean(a, axis=0) ** 2.0),
                 [_t(rng, 3, 4)]),
        "reshape": (lambda a: ad.tsum(ad.reshape(a, (2, 6)) ** 2.0),
                    [_t(rng, 3, 4)]),
        "transpose": (lambda a: ad.tsum(ad.transpose(a, (1, 0)) ** 2.0),
                      [_t(rng, 3, 4)]),
        "concat": (lambda a, c: ad.tsum(ad.concat([a, c], axis=1) ** 2.0),
                   [_t(rng, 3, 2), _t(rng, 3, 4)]),
        "stack": (lambda a, c: ad.tsum(ad.stack([a, c], axis=0) ** 2.0),
                  [_t(rng, 3, 2), _t(rng, 3, 2)]),
        "index": (lambda a: ad.tsum(ad.index(a, np.array([2, 0, 1, 2])) ** 2.0),
                  [_t(rng, 4, 3)]),
        "matmul": (lambda a, c: ad.tsum(ad.matmul(a, c)),
                   [_t(rng, 3, 5), _t(rng, 5, 2)]),
        "batched_matmul": (lambda a, c: ad.tsum(ad.matmul(a, c)),
                           [_t(rng, 2, 3, 4), _t(rng, 2, 4, 2)]),
        "linear": (lambda x: ad.tsum(ad.linear(x, w, bias)), [_t(rng, 4, 5)]),
        "softmax": (lambda a: ad.tsum(ad.softmax(a) ** 2.0), [_t(rng, 3, 5)]),
        "log_softmax": (lambda a: ad.tsum(ad.log_softmax(a) * 0.5),
                        [_t(rng, 3, 5)]),
        "layer_norm": (lambda x: ad.tsum(ad.layer_norm(x, g, b) ** 2.0),
                       [_t(rng, 3, 4)]),
        "embedding": (lambda tbl: ad.tsum(ad.embedding(tbl, ids) ** 2.0),
                      [table]),
        "mean_pool": (lambda x: ad.tsum(ad.mean_pool(x) ** 2.0),
                      [_t(rng, 2, 5, 3)]),
        "conv2d": (lambda x: ad.tsum(ad.conv2d(x, conv_w, conv_b,
                                               stride=2) ** 2.0), [conv_x]),
        "space_to_depth": (lambda x: ad.tsum(ad.space_to_depth(x, 2) ** 2.0),
                           [_t(rng, 2, 3, 4, 4)]),
        "depth_to_space": (lambda x: ad.tsum(ad.depth_to_space(x, 2) ** 2.0),
                           [_t(rng, 2, 8, 2, 2)]),
        "attention": (lambda q, k, v: ad.tsum(
            ad.scaled_dot_attention(q, k, v, num_heads=2) ** 2.0),
            [_t(rng, 2, 3, 4), _t(rng, 2, 5, 4), _t(rng, 2, 5, 4)]),
        "gru_cell": (lambda x, h: ad.tsum(
            ad.gru_cell(x, h, wx, whs, bx, bh) ** 2.0),
            [_t(rng, 2, 4), _t(rng, 2, 3)]),
    }


def _f64_parameters(module) -> None:
    for p in module.parameters():
        p.data = p.data.astype(np.float64)


def encoder_cases(rng: np.random.Generator) -> dict[str, tuple[Callable, list[Tensor]]]:
    """Input gradients through each full encoder at a tiny image size."""
    cases: dict[str, tuple[Callable, list[Tensor]]] = {}
    for name, cfg in encoder_variants().items():
        small = EncoderConfig.from_json({**cfg.to_json(), "image_size": 8,
                                         "embed_dim": 12,
                                         "cnn_widths": [4, 4, 8, 8],
                                         "late_widths": [3, 3, 6, 6],
                                         "vit_dim": 8, "vit_heads": 2,
                                         "vit_enc_blocks": 1,
                                         "vit_dec_blocks": 1})
        enc = build_encoder(small, np.random.default_rng(rng.integers(2**31)))
        _f64_parameters(enc)

        def fn(obs, goal, enc=enc):
            return ad.tsum(enc.tokens(obs, goal) ** 2.0)

        cases[f"encoder:{name}"] = (
            fn, [_t(rng, 2, 3, 8, 8), _t(rng, 2, 3, 8, 8)])
    return cases


def agent_case(rng: np.random.Generator) -> dict[str, tuple[Callable, list[Tensor]]]:
    """Input gradients through the full policy forward pass."""
    cfg = AgentConfig(encoder=EncoderConfig(image_size=8, embed_dim=12,
                                            cnn_widths=(4, 4, 8, 8)),
                      hidden_size=6, gru_layers=2, action_embed_dim=5)
    agent = build_agent(cfg, seed=int(rng.integers(2**31)))
    for module in agent.modules().values():
        _f64_parameters(module)
    prev = np.array([1, 3])

    def fn(obs, goal, h0, h1):
        logits, value, _ = agent.step(obs, goal, prev, [h0, h1])
        return ad.tsum(logits ** 2.0) + ad.tsum(value ** 2.0)

    return {"agent_forward": (fn, [_t(rng, 2, 3, 8, 8), _t(rng, 2, 3, 8, 8),
                                   _t(rng, 2, 6), _t(rng, 2, 6)])}


def run_gradcheck_suite(seeds: int = 5, tolerance: float = 1e-4,
                        verbose: bool = False,
                        max_coords: int = 24) -> float:
    """Run every case under each seed; returns the worst relative error."""
    worst = 0.0
    for seed in range(seeds):
        rng = np.random.default_rng([seed, 0xD1FF])
        cases = {}
        cases.update(kernel_cases(rng))
        cases.update(encoder_cases(rng))
        cases.update(agent_case(rng))
        for name, (fn, inputs) in cases.items():
            err = ad.grad_check(fn, inputs, seed=seed,
                                max_coords_per_input=max_coords)
            worst = max(worst, err)
            if verbose:
                status = "ok" if err <= tolerance else "FAIL"
                print(f"seed {seed} {name:<24} rel_err={err:.3e} {status}")
    return worst
