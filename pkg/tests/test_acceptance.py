"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v`` (about 12 minutes on
one core; the synthetic training experiments dominate) or as a script.
The verdict lines are repeated in the "acceptance criteria" section of the
pytest summary.
"""
import math
import time

import numpy as np
import pytest

from milasc.checks import gradient_suite
from milasc.data import SyntheticSpec, generate_synthetic, localization_score
from milasc.frontend import AudioClip, log_mel, stft_power
from milasc.io import RunConfig, load_checkpoint, save_checkpoint
from milasc.model import MTS, VARIANTS, MDHead, MILNetwork, ModelConfig, aggregate
from milasc.training import (Adam, PlateauScheduler, evaluate, one_hot, train, weighted_bce)

# synthetic-oracle protocol (reduced model; see README)
SEEDS = range(5)
PROTOCOL = dict(epochs=30, batch_size=32, lr=1e-2, lr_patience=3)
REDUCED = dict(channels=(4, 8, 16), instance_dim=16, input_shape=(40, 100))


def synthetic_run(head: str, seed: int, events_per_class: int = 1):
    spec = SyntheticSpec(events_per_class=events_per_class, seed=seed)
    tr, _ = generate_synthetic(spec, "train")
    va, truth = generate_synthetic(spec, "val")
    cfg = ModelConfig(head=head, k=4, n_classes=spec.n_classes, seed=seed, **REDUCED)
    net = MILNetwork(cfg)
    res = train(net, tr.features, tr.labels, va.features, va.labels, seed=seed, **PROTOCOL)
    net.load_state_dict(res.best_state)
    _, _, pred = evaluate(net, va.features, va.labels)
    return res, pred, truth, va.labels


@pytest.fixture(scope="module")
def sd_runs():
    t0 = time.perf_counter()
    runs = [synthetic_run("SD", s) for s in SEEDS]
    return runs, time.perf_counter() - t0


# 1 -----------------------------------------------------------------------

def test_c01_gradient_suite(verdict):
    t0 = time.perf_counter()
    rows = gradient_suite(scale="small", seeds=range(5), h=1e-5)
    elapsed = time.perf_counter() - t0
    worst_name, worst = max(((n, r.max_rel_error) for n, r in rows), key=lambda t: t[1])
    required = {"conv2d", "conv1d_dilated", "batchnorm_train", "sd_head", "md_head",
                "max_aggregator", "weighted_bce"}
    names = {n for n, _ in rows}
    ok = worst < 1e-4 and elapsed < 120 and required <= names
    verdict(ok, f"worst rel err {worst:.2e} ({worst_name}) over {len(rows)} checks x 5 seeds, "
                f"{elapsed:.0f}s (< 1e-4, < 120 s)")
    assert required <= names
    assert worst < 1e-4
    assert elapsed < 120


# 2 -----------------------------------------------------------------------

def test_c02_shape_suite(verdict):
    x = np.random.default_rng(0).standard_normal((1, 1, 40, 500))
    shapes = {}
    for name in VARIANTS:
        net = MILNetwork(ModelConfig.variant(name)).eval()
        bag = net.generator.forward(x)
        inst = net.instances(x)
        pred = net.forward(x)
        shapes[name] = (bag.shape[1:], inst.shape[1:], pred.instance_scores.shape[1:],
                        pred.bag_scores.shape[1:])
    mts = MTS(256, np.random.default_rng(1)).eval()
    mts_out = mts.forward(np.random.default_rng(2).standard_normal((2, 256, 62))).shape
    expect = ((256, 62), (256, 62), (10, 62), (10,))
    ok = all(s == expect for s in shapes.values()) and mts_out == (2, 256, 62)
    verdict(ok, f"all four variants map (1,1,40,500) -> {expect}; MTS -> {mts_out[1:]}")
    assert ok


# 3 -----------------------------------------------------------------------

def test_c03_frontend_contract(verdict):
    rate = 44100
    x = np.random.default_rng(3).standard_normal(10 * rate)
    feat = log_mel(AudioClip(x, rate))
    doubled = log_mel(AudioClip(2 * x, rate))
    strong = feat > np.log(1e-3)
    shift_err = float(np.abs((doubled - feat)[strong] - math.log(4)).max())
    k = 100
    tone = np.sin(2 * np.pi * k * rate / 1764 * np.arange(rate) / rate)
    p = stft_power(AudioClip(tone, rate), 1764, 882)[:-1]
    conc = float((p[:, k - 1:k + 2].sum(axis=1) / p.sum(axis=1)).min())
    ok = feat.shape == (40, 500) and shift_err < 1e-6 and conc >= 0.9
    verdict(ok, f"shape {feat.shape}; doubling shift error {shift_err:.1e} (< 1e-6); "
                f"min bin concentration {conc:.4f} (>= 0.9)")
    assert ok


# 4 -----------------------------------------------------------------------

def test_c04_mts_receptive_field(verdict):
    rng = np.random.default_rng(4)
    mts = MTS(16, rng)
    for name, buf in mts.named_buffers():
        buf[:] = rng.uniform(0.5, 1.5, buf.shape) if name.endswith("var") else \
            rng.normal(0, 0.3, buf.shape)
    for name, p, _ in mts.named_parameters():
        if name.endswith(("beta", "bias")):
            p[:] = rng.normal(0, 0.3, p.shape)
    mts.eval()
    m, t = 41, 20
    mts.forward(rng.standard_normal((1, 16, m)))
    g = np.zeros((1, 16, m))
    g[0, :, t] = rng.standard_normal(16)
    influence = np.abs(mts.backward(g)[0]).sum(axis=0)
    dist = np.abs(np.arange(m) - t)
    beyond = float(influence[dist > 7].max())
    within = float(influence[dist <= 7].min())
    ok = beyond == 0.0 and within > 0.0
    verdict(ok, f"max influence beyond +-7: {beyond}; min influence within +-7: {within:.2e}")
    assert ok


# 5 -----------------------------------------------------------------------

def test_c05_smi_aggregator(verdict):
    rng = np.random.default_rng(5)
    inst = rng.uniform(size=(4, 6, 12))
    pred = aggregate(inst)
    is_max = np.array_equal(pred.bag_scores, inst.max(axis=-1))
    low = inst.copy()
    mask = np.ones_like(low, dtype=bool)
    np.put_along_axis(mask, pred.argmax[..., None], False, axis=-1)
    low[mask] -= rng.uniform(0, 1, mask.sum())
    monotone = np.array_equal(aggregate(low).bag_scores, pred.bag_scores)
    md = MDHead(8, 10, 4, rng).forward(rng.standard_normal((3, 8, 12)) * 5)
    md_err = float(np.abs(md.sum(axis=1) - 1).max())
    cfg = ModelConfig(channels=(2, 4, 4), instance_dim=8, input_shape=(40, 40), n_classes=5)
    sd = MILNetwork(cfg).eval().forward(rng.standard_normal((3, 1, 40, 40))).bag_scores
    sd_sums = sd.sum(axis=1)
    unnormalised = bool(np.all(np.abs(sd_sums - 1) > 1e-3))
    ok = is_max and monotone and md_err < 1e-12 and unnormalised
    verdict(ok, f"bag==max {is_max}; non-argmax perturbation invariant {monotone}; "
                f"MD column-sum err {md_err:.1e}; SD bag-score sums {np.round(sd_sums, 3)}")
    assert ok


# 6 -----------------------------------------------------------------------

def test_c06_loss_properties(verdict):
    c = 10
    alpha = c - 1
    scores = np.full((1, c), 0.5)
    value = weighted_bce(scores, one_hot([0], c))
    oracle = 9 * math.log(2) + 9 * math.log(2)
    # balanced batch: one bag per class, positive mass alpha*C == negative mass C*(C-1)
    y = one_hot(np.arange(c), c)
    pos_mass, neg_mass = alpha * y.sum(), (1 - y).sum()
    same_default = weighted_bce(scores, one_hot([0], c), alpha=9) == value
    ok = alpha == 9 and abs(value - oracle) < 1e-9 and abs(value - 12.4766) < 1e-4 \
        and pos_mass == neg_mass and same_default
    verdict(ok, f"alpha={alpha}; L={value:.10f} vs 18 ln2={oracle:.10f}; "
                f"weight mass {pos_mass:g} == {neg_mass:g}")
    assert ok


# 7 -----------------------------------------------------------------------

def test_c07_synthetic_classification(sd_runs, verdict):
    runs, elapsed = sd_runs
    accs = [r[0].best_accuracy for r in runs]
    med = float(np.median(accs))
    ok = med >= 0.90 and elapsed < 600
    verdict(ok, f"SD val accuracy per seed {accs}; median {med:.3f} (>= 0.90); "
                f"{elapsed:.0f}s for 5 runs")
    assert med >= 0.90
    assert elapsed < 600


# 8 -----------------------------------------------------------------------

def test_c08_synthetic_localization(sd_runs, verdict):
    runs, _ = sd_runs
    hits = total = 0
    baseline_num = 0.0
    per_seed = []
    for _, pred, truth, labels in runs:
        score = localization_score(pred, truth, labels)
        per_seed.append(round(score.pooled, 3))
        hits += score.pooled * score.n_correct
        total += score.n_correct
        correct = pred.bag_scores.argmax(axis=1) == labels
        rows = np.arange(len(labels))[correct]
        frac = truth.positive[rows, labels[correct]].mean(axis=1)
        baseline_num += frac.sum()
    pooled = hits / total
    baseline = baseline_num / total
    ok = pooled >= 0.80
    verdict(ok, f"pooled precision {pooled:.3f} over {total} correct clips (>= 0.80); "
                f"per seed {per_seed}; random baseline {baseline:.3f}")
    assert ok


# 9 -----------------------------------------------------------------------

def test_c09_md_vs_sd_multimodal(verdict):
    sd = [synthetic_run("SD", s, events_per_class=2)[0].best_accuracy for s in SEEDS]
    md = [synthetic_run("MD", s, events_per_class=2)[0].best_accuracy for s in SEEDS]
    ok = np.median(md) >= np.median(sd)
    verdict(ok, f"two events/class: MD(K=4) median {np.median(md):.3f} {md} vs "
                f"SD median {np.median(sd):.3f} {sd}")
    assert ok


# 10 ----------------------------------------------------------------------

def test_c10_optimizer_scheduler_traces(verdict):
    p = {"w": np.array([0.0])}
    Adam(lr=0.001).step(p, {"w": np.array([1.0])})
    adam_err = abs(p["w"][0] - (-0.001 / (1 + 1e-8)))
    opt = Adam(lr=1.0)
    sched = PlateauScheduler(opt, factor=0.5, patience=3)
    trace = [sched.step(a) for a in (0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5)]
    opt2 = Adam(lr=1.0)
    sched2 = PlateauScheduler(opt2, 0.5, 3)
    trace2 = [sched2.step(a) for a in (0.5, 0.6, 0.5, 0.5, 0.5)]
    ok = adam_err < 1e-12 and trace == [1, 1, 1, 0.5, 0.5, 0.5, 0.25] \
        and trace2 == [1, 1, 1, 1, 0.5]
    verdict(ok, f"Adam t=1 err {adam_err:.1e}; flat trace {trace}; reset trace {trace2}")
    assert ok


# 11 ----------------------------------------------------------------------

def test_c11_determinism(tmp_path, verdict):
    spec = SyntheticSpec(n_train=24, n_val=12, frames=72, seed=9)
    tr, _ = generate_synthetic(spec, "train")
    va, _ = generate_synthetic(spec, "val")
    cfg = ModelConfig(channels=(2, 4, 4), instance_dim=8, input_shape=(40, 72), n_classes=4,
                      seed=9)
    rc = RunConfig(channels=cfg.channels, instance_dim=8, frames=72, epochs=3, batch_size=8,
                   learning_rate=0.01, seed=9, classes=tuple(tr.class_names))
    blobs, logs = [], []
    for i in range(2):
        net = MILNetwork(cfg)
        res = train(net, tr.features, tr.labels, va.features, va.labels, epochs=3, batch_size=8,
                    lr=0.01, seed=9)
        path = tmp_path / f"ck{i}.mla"
        save_checkpoint(path, net.state_dict(), rc)
        blobs.append(path.read_bytes())
        logs.append(res.log_tsv())
        if i == 0:
            _, cm_before, pred_before = evaluate(net, va.features, va.labels)
    state, _ = load_checkpoint(tmp_path / "ck0.mla")
    fresh = MILNetwork(ModelConfig(channels=(2, 4, 4), instance_dim=8, input_shape=(40, 72),
                                   n_classes=4, seed=123))
    fresh.load_state_dict(state)
    _, cm_after, pred_after = evaluate(fresh, va.features, va.labels)
    same_log = logs[0] == logs[1]
    same_ck = blobs[0] == blobs[1]
    same_eval = pred_before.instance_scores.tobytes() == pred_after.instance_scores.tobytes() \
        and np.array_equal(cm_before.counts, cm_after.counts)
    ok = same_log and same_ck and same_eval
    verdict(ok, f"identical logs {same_log}; identical checkpoint bytes {same_ck}; "
                f"round-trip evaluation bit-identical {same_eval}")
    assert ok


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-v"]))
