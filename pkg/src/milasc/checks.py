"""Finite-difference gradient suite over every layer and a reduced end-to-end model."""
from __future__ import annotations

from typing import Iterable

import numpy as np

from .gradcheck import GradCheckResult, check_module, grad_check
from .model import MDHead, MILNetwork, MTS, MaxAggregator, ModelConfig, SDHead
from .nn import BatchNorm, Conv1d, Conv2d, MaxPool2d, ReLU, Sigmoid, Softmax
from .training import one_hot, weighted_bce, weighted_bce_grad

SCALES = {
    # name: (model channels, instance dim, input shape, probes per tensor)
    "tiny": ((2, 2, 4), 4, (16, 16), 12),
    "small": ((4, 8, 16), 16, (40, 40), 24),
}


def _merge(into: dict, name: str, res: GradCheckResult) -> None:
    old = into.get(name)
    if old is None:
        into[name] = GradCheckResult(res.max_rel_error, res.checked, res.skipped)
    else:
        old.max_rel_error = max(old.max_rel_error, res.max_rel_error)
        old.checked += res.checked
        old.skipped += res.skipped


def _worst(results: dict[str, GradCheckResult]) -> GradCheckResult:
    vals = list(results.values())
    return GradCheckResult(max(r.max_rel_error for r in vals), sum(r.checked for r in vals),
                           sum(r.skipped for r in vals))


def layer_checks(seed: int, h: float = 1e-5) -> dict[str, GradCheckResult]:
    rng = np.random.default_rng(seed)
    out: dict[str, GradCheckResult] = {}
    bn = BatchNorm(2)
    bn.params["gamma"][:] = rng.uniform(0.5, 1.5, 2)
    bn.params["beta"][:] = rng.standard_normal(2)
    cases = [
        ("conv2d", Conv2d(3, 4, (3, 3), (1, 1), rng), (2, 3, 8, 8)),
        ("conv2d_fullheight", Conv2d(3, 5, (5, 1), (0, 0), rng), (2, 3, 5, 6)),
        ("conv1d_dilated", Conv1d(3, 4, 3, 4, "same", rng), (2, 3, 12)),
        ("batchnorm_train", bn, (4, 2, 5, 5)),
        ("maxpool2d", MaxPool2d(), (2, 2, 5, 7)),
        ("relu", ReLU(), (3, 4, 5)),
        ("sigmoid", Sigmoid(), (3, 4, 5)),
        ("softmax", Softmax(axis=1), (3, 4, 5)),
        ("mts", MTS(6, rng), (2, 6, 11)),
        ("sd_head", SDHead(6, 4, rng), (2, 6, 9)),
        ("md_head", MDHead(6, 4, 3, rng), (2, 6, 9)),
        ("max_aggregator", MaxAggregator(), (2, 4, 9)),
    ]
    for name, module, shape in cases:
        module.train()
        report = check_module(module, rng.standard_normal(shape), rng, h=h)
        out[name] = _worst(report.results)
    # loss w.r.t. bag scores
    scores = np.ascontiguousarray(rng.uniform(0.05, 0.95, (4, 5)))
    labels = one_hot(rng.integers(0, 5, 4), 5)
    out["weighted_bce"] = grad_check(lambda: weighted_bce(scores, labels), scores,
                                     weighted_bce_grad(scores, labels), h=h)
    return out


def model_check(seed: int, scale: str = "small", head: str = "SD", mts: bool = False,
                h: float = 1e-5) -> GradCheckResult:
    """Loss -> every parameter tensor and the input of a reduced network,
    train-mode batch norm, batch of two. Probes are subsampled per tensor."""
    channels, dim, shape, probes = SCALES[scale]
    if mts:
        # MTS needs at least 9 instances
        shape = (shape[0], max(shape[1], 9 * 8))
    rng = np.random.default_rng(seed)
    cfg = ModelConfig(head=head, mts=mts, k=3, n_classes=4, channels=channels,
                      instance_dim=dim, input_shape=shape, seed=seed)
    net = MILNetwork(cfg).train()
    x = np.ascontiguousarray(rng.standard_normal((2, 1) + shape))
    labels = one_hot([0, 2], 4)

    def f():
        return weighted_bce(net.forward(x).bag_scores, labels)

    pred = net.forward(x)
    net.zero_grad()
    dx = net.backward(weighted_bce_grad(pred.bag_scores, labels))
    targets = [("input", x, dx)] + [(n, p, g.copy()) for n, p, g in net.named_parameters()]
    total: dict[str, GradCheckResult] = {}
    for name, arr, grad in targets:
        coords = None
        if arr.size > probes:
            coords = rng.choice(arr.size, size=probes, replace=False)
        total[name] = grad_check(f, arr, grad, h=h, coords=coords, pattern=net.pattern)
    return _worst(total)


def gradient_suite(scale: str = "small", seeds: Iterable[int] = range(5),
                   h: float = 1e-5) -> list[tuple[str, GradCheckResult]]:
    merged: dict[str, GradCheckResult] = {}
    for seed in seeds:
        for name, res in layer_checks(seed, h).items():
            _merge(merged, name, res)
        for head in ("SD", "MD"):
            _merge(merged, f"model_{head}", model_check(seed, scale, head, False, h))
        _merge(merged, "model_MD_MTS", model_check(seed, scale, "MD", True, h))
    return list(merged.items())
