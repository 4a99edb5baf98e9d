"""End-to-end acceptance checks, one group per criterion.

Each test carries an ``acceptance`` marker; the run ends with a one-line
PASS/FAIL summary per criterion (see ``conftest.py``).
"""

import dataclasses
import time
import zlib

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fgsmsdi import tensor as T
from fgsmsdi.attacks import (
    AttackConfig,
    constrain,
    evaluate_robust_accuracy,
    fgsm,
    fgsm_rs,
    pgd,
    project_linf,
)
from fgsmsdi.cli import main
from fgsmsdi.data import synth_dataset
from fgsmsdi.initializer import generate_init, sdi_perturbation
from fgsmsdi.landscape import export_landscape
from fgsmsdi.models import Architecture, GeneratorNet, TargetNet, init_params, split_state
from fgsmsdi.tensor import Tensor
from fgsmsdi.training import TrainConfig, Trainer, monitor_overfit

from op_cases import CASES
from oracles import central_diff, corner_max_loss, linear_loss, max_rel_error

EPS = 8 / 255


def acceptance(number, title):
    return pytest.mark.acceptance(number, title)


def desk_data(cfg: TrainConfig):
    kw = dict(num_classes=cfg.classes, image_shape=cfg.dims, noise=cfg.noise, seed=cfg.data_seed)
    return (synth_dataset(size=cfg.train_size, split="train", **kw),
            synth_dataset(size=cfg.test_size, split="test", **kw))


# ---------------------------------------------------------------------------
# 1


def _network_grad_error(net, x, y, extra=()):
    """Worst FD error over every parameter of ``net`` plus the input."""
    xt = Tensor(x, requires_grad=True)
    params = net.parameters() + list(extra)
    net.zero_grad()

    def loss():
        return T.softmax_cross_entropy(net(xt), y)

    T.backward(loss())
    worst = 0.0
    for t in params + [xt]:
        numeric = central_diff(lambda: loss().item(), t.data)
        worst = max(worst, max_rel_error(t.grad, numeric))
    return worst


@acceptance(1, "gradients match central finite differences")
def test_gradients_match_finite_differences(detail):
    t0 = time.perf_counter()
    worst = 0.0
    for name, make_inputs, fn in CASES:
        rng = np.random.default_rng(zlib.crc32(name.encode()))
        inputs = [Tensor(a, requires_grad=True) for a in make_inputs(rng)]
        weights = Tensor(rng.normal(size=fn(*inputs).shape))

        def loss():
            return T.sum(T.mul(fn(*inputs), weights))

        T.backward(loss())
        for t in inputs:
            worst = max(worst, max_rel_error(t.grad, central_diff(lambda: loss().item(), t.data)))

    rng = np.random.default_rng(0)
    x = rng.uniform(0, 1, (4, 3, 6, 6))
    y = np.array([0, 1, 2, 1])
    for arch in (Architecture("linear", (3, 6, 6), 3), Architecture("mlp", (3, 6, 6), 3, hidden=8),
                 Architecture("cnn", (3, 6, 6), 3, widths=(4, 6))):
        net = TargetNet(arch, np.float64)
        init_params(net, 1)
        assert net.num_parameters() <= 2000
        worst = max(worst, _network_grad_error(net, x, y))

    # generator feeding a linear head, so its output has a scalar loss
    gen = GeneratorNet(3, hidden=4, dtype=np.float64)
    init_params(gen, 2)
    head = TargetNet(Architecture("linear", (3, 6, 6), 3), np.float64)
    init_params(head, 3)
    s_x = np.sign(rng.normal(size=x.shape))

    class Stack:
        def parameters(self):
            return gen.parameters()

        def zero_grad(self):
            gen.zero_grad()
            head.zero_grad()

        def __call__(self, xt):
            return head(gen(xt, Tensor(s_x)))

    assert gen.num_parameters() + head.num_parameters() <= 2000
    worst = max(worst, _network_grad_error(Stack(), x, y, head.parameters()))
    elapsed = time.perf_counter() - t0
    detail(f"max rel err {worst:.2e}, {elapsed:.1f}s")
    assert worst < 1e-5
    assert elapsed < 30


# ---------------------------------------------------------------------------
# 2


@acceptance(2, "FGSM and PGD-50 reach the exhaustive corner maximum")
def test_attack_oracle_equivalence(linear_net, detail):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst_gap, worst_ratio = 0.0, np.inf
    for _ in range(100):
        d = int(rng.integers(1, 13))
        W, b = rng.normal(size=(2, d)), rng.normal(size=2)
        x = rng.uniform(0.2, 0.8, (1, 1, 1, d))
        y = rng.integers(0, 2, 1)
        net = linear_net(W, b)
        best = corner_max_loss(W, b, x, y, EPS)
        fg = fgsm(net, x, y, AttackConfig(EPS, clip_to_valid=False))
        pg = pgd(net, x, y, AttackConfig(EPS, alpha=EPS / 4, steps=50, clip_to_valid=False))
        worst_gap = max(worst_gap, abs(linear_loss(W, b, x + fg, y) - best))
        worst_ratio = min(worst_ratio, linear_loss(W, b, x + pg, y) / best)
    elapsed = time.perf_counter() - t0
    detail(f"fgsm gap {worst_gap:.1e}, pgd50 ratio {worst_ratio:.6f}, {elapsed:.1f}s")
    assert worst_gap <= 1e-9
    assert worst_ratio >= 0.999
    assert elapsed < 60


# ---------------------------------------------------------------------------
# 3


@acceptance(3, "PGD(T=1) and zero-output FGSM-SDI reduce bit-exactly to FGSM")
@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_algorithm_reductions(dtype, detail):
    rng = np.random.default_rng(3)
    net = TargetNet(Architecture("cnn", (3, 16, 16), 10), dtype)
    init_params(net, 0)
    gen = GeneratorNet(3, hidden=64, dtype=dtype)
    init_params(gen, 1)
    gen.conv3.weight.data[:] = 0
    gen.bn3.bias.data[:] = 0
    cfg = AttackConfig(EPS, alpha=EPS, steps=1)
    for _ in range(3):
        x = rng.uniform(0, 1, (20, 3, 16, 16)).astype(dtype)
        y = rng.integers(0, 10, 20)
        ref = fgsm(net, x, y, cfg)
        assert pgd(net, x, y, cfg).tobytes() == ref.tobytes()
        assert sdi_perturbation(net, gen, x, y, cfg).data.tobytes() == ref.tobytes()
    detail(f"{np.dtype(dtype).name} exact")


# ---------------------------------------------------------------------------
# 4


@acceptance(4, "generator update cadence under 1-based i mod k")
@pytest.mark.parametrize("k,expected", [(20, 5), (1, 100)])
def test_cadence(k, expected, detail):
    cfg = TrainConfig(method="fgsm-sdi", k=k, batch_size=2, train_size=200, test_size=20, classes=4,
                      dims=(3, 4, 4), gen_hidden=4, epochs=2, eval_subset=4, eval_steps=1)
    t = Trainer(cfg, *desk_data(cfg))
    assert t.batches_per_epoch == 100
    per_epoch = [t.train_epoch().gen_updates for _ in range(2)]
    detail(f"k={k}: {per_epoch}")
    assert per_epoch == [expected, expected]


# ---------------------------------------------------------------------------
# 5


@acceptance(5, "10,000 randomized perturbations keep ball and valid-range invariants")
def test_invariants(detail):
    rng = np.random.default_rng(5)
    dims = (3, 8, 8)
    net = TargetNet(Architecture("cnn", dims, 10, widths=(8, 16)))
    gen = GeneratorNet(3, hidden=8)
    count = violations = gen_checked = 0
    methods = ["fgsm", "fgsm-rs", "pgd2", "pgd4", "pgd10-rs", "fgsm-sdi"]
    while count < 10_000:
        for m in methods:
            init_params(net, int(rng.integers(1 << 30)))
            init_params(gen, int(rng.integers(1 << 30)))
            eps = float(rng.uniform(1, 16)) / 255
            # mix interior pixels with saturated ones so the valid-range clip is exercised
            x = np.where(rng.random((50, *dims)) < 0.3, rng.integers(0, 2, (50, *dims)),
                         rng.uniform(0, 1, (50, *dims))).astype(np.float32)
            y = rng.integers(0, 10, 50)
            alpha = eps * float(rng.choice([0.25, 0.5, 1.0, 1.25, 2.0]))
            if m == "fgsm":
                d = fgsm(net, x, y, AttackConfig(eps))
            elif m == "fgsm-rs":
                d = fgsm_rs(net, x, y, AttackConfig(eps, alpha=alpha), rng)
            elif m.startswith("pgd"):
                steps = int(m[3:].split("-")[0])
                cfg = AttackConfig(eps, alpha=alpha, steps=steps, random_start=m.endswith("rs"))
                d = pgd(net, x, y, cfg, rng=rng)
            else:
                s_x = np.sign(rng.normal(size=x.shape)).astype(np.float32)
                eta = generate_init(gen, x, s_x, eps).data
                gen_checked += eta.shape[0]
                violations += int(np.abs(eta).max() > np.float32(eps))
                d = sdi_perturbation(net, gen, x, y, AttackConfig(eps, alpha=alpha), s_x=s_x).data
            e32 = np.float32(eps)
            per_sample = (np.abs(d) > e32).reshape(50, -1).any(1) | \
                         ((x + d) < 0).reshape(50, -1).any(1) | ((x + d) > 1).reshape(50, -1).any(1)
            violations += int(per_sample.sum())
            violations += int(project_linf(d, eps).tobytes() != d.tobytes())
            violations += int(constrain(x, d, eps, True).tobytes() != d.tobytes())
            count += 50
    detail(f"{count} perturbations, {gen_checked} generator inits, {violations} violations")
    assert count >= 10_000 and violations == 0


# ---------------------------------------------------------------------------
# 6


@acceptance(6, "input-gradient calls per batch and epoch wall-clock ordering")
def test_gradient_accounting(detail):
    desk = TrainConfig(epochs=1, eval_subset=10)
    data = desk_data(desk)
    counts, wall = {}, {}
    for method in ("fgsm-rs", "pgd2-at", "fgsm-sdi", "pgd-at"):
        t = Trainer(dataclasses.replace(desk, method=method), *data)
        rec = t.train_epoch()
        counts[method] = t.batch_grad_calls
        wall[method] = rec.wall_ms
    sdi = counts["fgsm-sdi"]
    assert set(counts["fgsm-rs"]) == {1}
    assert set(counts["pgd2-at"]) == {2}
    assert set(counts["pgd-at"]) == {10}
    assert sdi == [3 if i % 20 == 0 else 2 for i in range(1, len(sdi) + 1)]
    detail("ms/epoch " + ", ".join(f"{m} {wall[m]:.0f}" for m in ("fgsm-rs", "fgsm-sdi", "pgd-at")))
    assert wall["fgsm-rs"] < wall["fgsm-sdi"] < wall["pgd-at"]


# ---------------------------------------------------------------------------
# 7


@acceptance(7, "desk-scale FGSM-SDI vs FGSM-RS, median of 3 seeds")
def test_desk_scale_training(detail):
    t0 = time.perf_counter()
    base = TrainConfig()
    train_set, test_set = desk_data(base)
    results = {}
    for method in ("fgsm-rs", "fgsm-sdi"):
        robust, clean = [], []
        for seed in range(3):
            cfg = dataclasses.replace(base, method=method, seed=seed)
            res = Trainer(cfg, train_set, test_set).run()
            net = TargetNet(res.target.arch)
            net.load_state_dict(split_state(res.best_state, "target"))
            acc = evaluate_robust_accuracy(net, test_set.images, test_set.labels, ["clean", "pgd10"],
                                           cfg.epsilon, rng=np.random.default_rng(seed))
            robust.append(acc["pgd10"])
            clean.append(acc["clean"])
        results[method] = (float(np.median(robust)), float(np.median(clean)), robust, clean)
    elapsed = time.perf_counter() - t0
    rs, sdi = results["fgsm-rs"], results["fgsm-sdi"]
    detail(f"pgd10 sdi {sdi[0]:.3f} vs rs {rs[0]:.3f}; clean sdi {sdi[1]:.3f} rs {rs[1]:.3f}; "
           f"{elapsed / 60:.1f} min")
    assert sdi[0] >= rs[0]
    assert sdi[1] >= 0.80 and rs[1] >= 0.80
    assert elapsed < 15 * 60


# ---------------------------------------------------------------------------
# 8


@acceptance(8, "catastrophic-overfitting monitor")
def test_overfit_trace():
    assert monitor_overfit([0.35, 0.38, 0.40, 0.01, 0.00]) == 4


@acceptance(8, "catastrophic-overfitting monitor")
@given(st.lists(st.floats(0, 1), min_size=1, max_size=60))
def test_overfit_monotone_never_triggers(trace):
    assert monitor_overfit(sorted(trace)) is None


# ---------------------------------------------------------------------------
# 9


@acceptance(9, "hyper-parameter defaults")
def test_config_defaults():
    sdi = TrainConfig().resolved()
    rs = TrainConfig(method="fgsm-rs").resolved()
    assert sdi.epsilon == 8 / 255
    assert rs.alpha == pytest.approx(1.25 * rs.epsilon)
    assert sdi.k == 20
    assert sdi.lr == 0.1
    assert sdi.weight_decay == 5e-4
    assert sdi.schedule == "multistep" and sdi.lr_factor == 0.1


# ---------------------------------------------------------------------------
# 10


@acceptance(10, "21x21 loss landscape export")
def test_landscape_export(tmp_path, linear_net, detail):
    cfg = TrainConfig()
    _, test_set = desk_data(cfg)
    net = TargetNet(Architecture(image_shape=cfg.dims, num_classes=cfg.classes))
    init_params(net, 0)
    sub = test_set.subset(100)
    grid = export_landscape(net, sub.images, sub.labels, EPS, 21, path=tmp_path / "grid.txt")
    net.eval()
    clean = T.softmax_cross_entropy(net(Tensor(sub.images)), sub.labels).item()
    assert grid.values.shape == (21, 21)
    assert np.isfinite(grid.values).all()
    assert abs(grid.origin - clean) <= 1e-6

    rng = np.random.default_rng(10)
    W, b = rng.normal(size=(2, 12)), rng.normal(size=2)
    x = rng.uniform(0, 1, (16, 1, 1, 12))
    lin = export_landscape(linear_net(W, b), x, np.zeros(16, int), EPS, 21)
    assert np.all(np.diff(lin.values[:, 10]) > 0)
    detail(f"origin {grid.origin:.6f} vs clean {clean:.6f}")


# ---------------------------------------------------------------------------
# 11


@acceptance(11, "identical manifests give bit-identical checkpoints and metrics")
def test_determinism(tmp_path, detail):
    argv = ["train", "--method", "fgsm-sdi", "--epochs", "2", "--k", "5", "--train-size", "500",
            "--test-size", "100", "--eval-subset", "50", "--final-attacks", "none"]
    assert main(argv + ["--out", str(tmp_path / "a")]) == 0
    assert main(["train", "--manifest", str(tmp_path / "a" / "manifest.json"), "--final-attacks", "none",
                 "--out", str(tmp_path / "b")]) == 0
    a, b = tmp_path / "a", tmp_path / "b"
    for name in ("best.advt", "last.advt"):
        assert (a / name).read_bytes() == (b / name).read_bytes(), name

    # wall_ms is a timing measurement; every other column must match byte for byte
    def without_wall(path):
        rows = [line.split(",") for line in path.read_text().splitlines()]
        col = rows[0].index("wall_ms")
        return [r[:col] + r[col + 1:] for r in rows]

    assert without_wall(a / "metrics.csv") == without_wall(b / "metrics.csv")
    assert (a / "manifest.json").read_text() == (b / "manifest.json").read_text()
    detail(f"{len(without_wall(a / 'metrics.csv')) - 1} metric rows compared")
