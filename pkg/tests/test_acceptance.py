"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line."""
import contextlib
import dataclasses
import json
import subprocess
import sys
import time

import numpy as np
import pytest

from mdmt import harness, storage
from mdmt import network as net
from mdmt import tensor as T
from mdmt.config import from_dict, preset
from mdmt.datagen import normalize
from mdmt.exceptions import FormatError
from mdmt.losses import bce, detection_loss, dice_loss, voxel_ce
from mdmt.metrics import roc_auc
from mdmt.tensor import Tensor, grad_check
from mdmt.trainer import (
    OptimizerState,
    Strategy,
    epoch_detection,
    mean_dice,
    predict_scores,
    TrainConfig,
    TrainingData,
    fit,
    propagate_labels,
    train,
    training_data,
)

import conftest

DESK = from_dict(preset("desk_default"))


@contextlib.contextmanager
def criterion(n: int, title: str, budget: float | None = None):
    """Record and print a PASS/FAIL line for criterion ``n``."""
    info: dict = {}
    start = time.perf_counter()
    try:
        yield info
        elapsed = time.perf_counter() - start
        if budget is not None:
            assert elapsed < budget, f"runtime {elapsed:.1f}s exceeds {budget:.0f}s"
    except BaseException as exc:
        elapsed = time.perf_counter() - start
        line = f"criterion {n} FAIL  {title} ({elapsed:.1f}s): {type(exc).__name__}: {exc}"
        conftest.ACCEPTANCE[n] = line
        print(line)
        raise
    detail = "; ".join(f"{k}={v}" for k, v in info.items())
    line = f"criterion {n} PASS  {title} ({elapsed:.1f}s) {detail}".rstrip()
    conftest.ACCEPTANCE[n] = line
    print(line)


# -- 1. gradients ----------------------------------------------------------------------

GRAD_POINTS = 10
GRAD_TOL = 1e-4


def _weighted(out: Tensor, rng) -> Tensor:
    # random projection so every output element contributes a distinct weight
    return (out * Tensor(rng.normal(size=out.shape))).sum() if out.size > 1 else out


def _unary_cases():
    pos = lambda r, s: r.uniform(0.5, 2.0, size=s)  # noqa: E731
    gen = lambda r, s: r.normal(size=s)  # noqa: E731
    prob = lambda r, s: r.uniform(0.05, 0.95, size=s)  # noqa: E731
    return {
        "add": (lambda t, r: t + Tensor(r.normal(size=t.shape)), gen, (3, 4)),
        "add_scalar": (lambda t, r: t + 1.5, gen, (5,)),
        "sub": (lambda t, r: Tensor(r.normal(size=t.shape)) - t, gen, (3, 4)),
        "rsub": (lambda t, r: 2.0 - t, gen, (5,)),
        "neg": (lambda t, r: -t, gen, (5,)),
        "mul": (lambda t, r: t * t, gen, (3, 4)),
        "div": (lambda t, r: Tensor(r.normal(size=t.shape)) / t, pos, (3, 4)),
        "rdiv": (lambda t, r: 1.0 / t, pos, (5,)),
        "pow": (lambda t, r: t ** 3.0, pos, (5,)),
        "sum_axis": (lambda t, r: t.sum(axis=1), gen, (3, 4)),
        "mean": (lambda t, r: t.mean(axis=0), gen, (3, 4)),
        "reshape": (lambda t, r: t.reshape(4, 3) * t.reshape(4, 3), gen, (3, 4)),
        "flatten": (lambda t, r: t.flatten(1), gen, (2, 3, 2)),
        "sigmoid": (lambda t, r: T.sigmoid(t), gen, (6,)),
        "silu": (lambda t, r: T.silu(t), gen, (6,)),
        "log": (lambda t, r: T.log(t), pos, (6,)),
        "exp": (lambda t, r: T.exp(t), gen, (6,)),
        "clamp": (lambda t, r: T.clamp(t, -0.5, 0.5), gen, (8,)),
        "affine_x": (lambda t, r: T.affine(t, Tensor(r.normal(size=(4, 3))), Tensor(r.normal(size=4))), gen, (2, 3)),
        "affine_w": (lambda t, r: T.affine(Tensor(r.normal(size=(2, 3))), t, Tensor(r.normal(size=4))), gen, (4, 3)),
        "affine_b": (lambda t, r: T.affine(Tensor(r.normal(size=(2, 3))), Tensor(r.normal(size=(4, 3))), t), gen, (4,)),
        "conv3d_x": (lambda t, r: T.conv3d(t, Tensor(r.normal(size=(2, 2, 3, 3, 3))), 1, 1), gen, (2, 4, 4, 3)),
        "conv3d_k": (lambda t, r: T.conv3d(Tensor(r.normal(size=(2, 4, 4, 3))), t, 2, 1), gen, (3, 2, 3, 3, 3)),
        "conv3d_bias": (lambda t, r: T.conv3d(Tensor(r.normal(size=(1, 2, 3, 3, 3))),
                                               Tensor(r.normal(size=(2, 2, 1, 1, 1))), bias=t), gen, (2,)),
        "conv3d_batched": (lambda t, r: T.conv3d(t, Tensor(r.normal(size=(2, 1, 3, 3, 3))), 1, 1), gen, (2, 1, 3, 3, 2)),
        "avg_pool3d": (lambda t, r: T.avg_pool3d(t, 2), gen, (2, 4, 4, 2)),
        "upsample": (lambda t, r: T.upsample_nearest3d(t, 2), gen, (2, 2, 2, 1)),
        "concat": (lambda t, r: T.concat_channels([t, Tensor(r.normal(size=t.shape)), t]), gen, (2, 2, 2, 1)),
        "split": (lambda t, r: T.split_channels(t, [1, 2])[1] * T.split_channels(t, [1, 2])[1], gen, (3, 2, 2, 1)),
        "bce": (lambda t, r: bce(t, r.uniform(size=t.shape)), prob, (5,)),
        "voxel_ce": (lambda t, r: voxel_ce(t, (r.random(t.shape) > 0.5) * 1.0), prob, (2, 3, 3, 2)),
        "dice_loss": (lambda t, r: dice_loss(t, (r.random(t.shape) > 0.5) * 1.0, per_sample=True), prob, (2, 3, 3, 2)),
        "detection_loss": (lambda t, r: detection_loss(t, (r.random(t.shape) > 0.5) * 1.0), prob, (2, 3, 3, 2)),
    }


def _composite_worst(arch, point: int) -> float:
    """Loss through encoder, classifier and decoder, checked w.r.t. input and parameters."""
    r = np.random.default_rng(1000 + point)
    params = net.init_params(net.ArchConfig(**{**arch.to_dict(), "seed": point}))
    v = r.normal(size=(2,) + arch.input_shape)
    y = np.array([1.0, 0.0])
    s = (r.random((2,) + arch.input_shape) > 0.7) * 1.0

    def loss(p, vol):
        o = net.encoder_forward(vol, p.theta_e, arch)
        return (bce(net.classifier_forward(o, p.theta_c, arch), y)
                + detection_loss(net.decoder_forward(o, p.theta_d, arch), s))

    worst = grad_check(lambda t: loss(params, t), v, indices=r.choice(v.size, 10, replace=False))
    for group in params.groups().values():
        for name in group:
            orig = group[name]

            def f(t, group=group, name=name):
                group[name] = t
                try:
                    return loss(params, v)
                finally:
                    group[name] = orig

            idx = r.choice(orig.size, min(orig.size, 4), replace=False)
            worst = max(worst, grad_check(f, orig.data, indices=idx))
    return worst


def test_criterion_1_gradient_correctness():
    with criterion(1, "gradient correctness", budget=120) as info:
        worst_op = {}
        for name, (fn, sample, shape) in _unary_cases().items():
            for point in range(GRAD_POINTS):
                r = np.random.default_rng([point, len(name)])
                x = sample(r, shape)
                # fresh generators per call keep f a fixed function of t
                err = grad_check(lambda t: _weighted(fn(t, np.random.default_rng([point, 3])),
                                                     np.random.default_rng([point, 11])), x, eps=1e-5)
                worst_op[name] = max(worst_op.get(name, 0.0), err)
        arch = net.ArchConfig(input_shape=(4, 4, 4), base_channels=2, num_blocks=2, growth=2, fc_hidden=3)
        composite = max(_composite_worst(arch, p) for p in range(GRAD_POINTS))
        worst = max(worst_op.values())
        info.update(ops=len(worst_op), max_op_err=f"{worst:.2e}", composite_err=f"{composite:.2e}")
        bad = {k: v for k, v in worst_op.items() if v >= GRAD_TOL}
        assert not bad, f"ops over tolerance: {bad}"
        assert composite < GRAD_TOL, f"composite error {composite:.2e}"


# -- 2. loss oracles ----------------------------------------------------------------------

def test_criterion_2_loss_oracles():
    with criterion(2, "loss oracles") as info:
        assert abs(bce(0.5, 1.0).item() - np.log(2)) <= 1e-9
        m = np.zeros((2, 2, 2))
        m[0, 1, 1] = 1
        assert dice_loss(m, m).item() == 0.0
        assert dice_loss(np.zeros(8), np.zeros(8)).item() == 0.0
        assert abs(dice_loss(np.ones(8), np.zeros(8)).item() - 8 / 9) <= 1e-12
        r = np.random.default_rng(0)
        for _ in range(20):
            p = r.uniform(0.01, 0.99, size=(2, 4, 4, 2))
            s = (r.random(p.shape) > 0.6) * 1.0
            combined = detection_loss(p, s).item()
            parts = voxel_ce(p, s).item() + dice_loss(p, s).item()
            assert combined == parts, (combined, parts)
        info["detection_bitwise"] = "20/20"


# -- 3. AUC oracle ---------------------------------------------------------------------

def _pairwise_auc(scores, labels) -> float:
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    wins = 0.0
    for p in pos:
        for q in neg:
            wins += 1.0 if p > q else 0.5 if p == q else 0.0
    return wins / (len(pos) * len(neg))


def test_criterion_3_auc_oracle():
    with criterion(3, "AUC oracle equivalence") as info:
        r = np.random.default_rng(3)
        tied = 0
        for i in range(100):
            n = int(r.integers(2, 201))
            labels = r.integers(0, 2, size=n)
            labels[0], labels[1] = 0, 1
            # coarse grids force ties on about half of the instances
            scores = r.integers(0, 8, size=n) / 8.0 if i % 2 else r.random(n)
            tied += len(np.unique(scores)) < n
            assert roc_auc(scores, labels) == _pairwise_auc(scores, labels), i
        assert roc_auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75
        info.update(instances=100, with_ties=tied)


# -- 4. label propagation ------------------------------------------------------------------------

def test_criterion_4_label_propagation_contract():
    with criterion(4, "label-propagation contract") as info:
        d1, d2 = map(normalize, harness.build_datasets(DESK))
        short = {**DESK.train, "epochs": 4, "warmup_epochs": 1}
        cfg = from_dict({**DESK.to_dict(), "train": short})
        tcfg = cfg.train_config(Strategy.SEMI_SUPERVISED_MDMT, 0)
        data = training_data(tcfg, d1, d2)
        x1, x2 = data.x1.copy(), data.x2.copy()
        pool = propagate_labels(net.init_params(DESK.arch), data.x1, data.x2)
        # the domain-2 training pool is train+val by default
        assert pool.n_cls == len(d2.indices(list(tcfg.domain2_splits)))
        assert pool.n_det == len(d1.indices("train"))
        strict = training_data(dataclasses.replace(tcfg, domain2_splits=("train",)), d1, d2)
        strict_pool = propagate_labels(net.init_params(DESK.arch), strict.x1, strict.x2)
        assert strict_pool.n_cls == len(d2.indices("train"))
        assert np.all((pool.y_cls > 0) & (pool.y_cls < 1))
        assert np.all((pool.s_det > 0) & (pool.s_det < 1))
        assert np.array_equal(data.x1, x1) and np.array_equal(data.x2, x2)
        assert d1.masks is None and d2.labels is None

        a = train(dataclasses.replace(tcfg, pseudo_weight=0.0), d1, d2)
        b = train(cfg.train_config(Strategy.SUPERVISED_MDMT, 0), d1, d2)

        def trajectory(run):
            # "propagated" only says whether propagation ran, not what it changed
            return [{k: v for k, v in h.items() if k not in ("propagated", "wall_clock")}
                    for h in run.history]

        assert trajectory(a) == trajectory(b)
        for (na, ta), (nb, tb) in zip(a.final_params.named_parameters(), b.final_params.named_parameters()):
            assert na == nb and np.array_equal(ta.data, tb.data), na
        info.update(D_tilde_1=pool.n_cls, D_tilde_2=pool.n_det, trajectory="identical")


# -- 5. overfit sanity --------------------------------------------------------------------

class _Reached(Exception):
    pass


def test_criterion_5_overfit_sanity():
    with criterion(5, "overfit sanity") as info:
        d1, d2 = map(normalize, harness.build_datasets(DESK))
        idx = d1.indices("train")
        # four of each class
        pick = np.r_[idx[d1.labels[idx] == 0][:4], idx[d1.labels[idx] == 1][:4]]
        x, y = d1.volumes[pick], d1.labels[pick]

        base = {k: v for k, v in DESK.train.items() if k != "domain2_splits"}
        cfg = TrainConfig(strategy=Strategy.SUPERVISED_BASELINE, arch=DESK.arch, seed=0,
                          **{**base, "epochs": 200, "warmup_epochs": 0})
        reached = {}

        def on_epoch(record, params):
            if roc_auc(predict_scores(params, x), y) == 1.0:
                reached["epoch"] = record["epoch"]
                raise _Reached

        t0 = time.perf_counter()
        with contextlib.suppress(_Reached):
            fit(cfg, TrainingData(x1=x, y1=y), on_epoch=on_epoch)
        t_cls = time.perf_counter() - t0
        assert "epoch" in reached, "train AUC never reached 1.0 in 200 epochs"
        assert t_cls < 300, f"classification overfit took {t_cls:.0f}s"

        tr = d2.indices("train")
        xs, ss = d2.volumes[tr], d2.masks[tr]
        dcfg = TrainConfig(strategy=Strategy.SUPERVISED_MDMT, arch=DESK.arch, seed=0,
                           **{**base, "epochs": 100, "warmup_epochs": 0})
        params = net.init_params(DESK.arch)
        state = OptimizerState()
        t0 = time.perf_counter()
        dice_epoch = None
        for epoch in range(1, 101):
            epoch_detection(params, state, dcfg, xs, ss, None, None, epoch)
            if mean_dice(params, xs, ss, dcfg.zeta) > 0.5:
                dice_epoch = epoch
                break
        t_det = time.perf_counter() - t0
        assert dice_epoch is not None, "train Dice never exceeded 0.5 in 100 epochs"
        assert t_det < 300, f"detection overfit took {t_det:.0f}s"
        info.update(auc1_epoch=reached["epoch"], dice_epoch=dice_epoch,
                    t_cls=f"{t_cls:.0f}s", t_det=f"{t_det:.0f}s")


# -- 6. strategy comparison -------------------------------------------------------------------

MARGIN_BASELINE = 0.03
NOISE_ALLOWANCE = 0.01


def test_criterion_6_strategy_ordering(tmp_path):
    with criterion(6, "strategy comparison ordering", budget=1800) as info:
        cfg = from_dict({**preset("desk_default"), "output_dir": str(tmp_path / "bench")})
        assert len(cfg.seeds) == 5 and set(cfg.strategies) == set(Strategy)
        report = harness.cmd_compare(cfg, jobs=1)
        print(harness.format_table(report), end="")
        assert all(r["status"] == "ok" for r in report["rows"])
        mean = {s: report["summary"][s]["mean_test_auc"] for s in report["strategies"]}
        full = mean[Strategy.SEMI_SUPERVISED_MDMT.value]
        info.update(**{k: f"{v:.3f}" for k, v in mean.items()})
        assert full >= mean[Strategy.SUPERVISED_BASELINE.value] + MARGIN_BASELINE, mean
        assert full >= mean[Strategy.SEMI_SUPERVISED.value] - NOISE_ALLOWANCE, mean
        assert full >= mean[Strategy.SUPERVISED_MDMT.value] - NOISE_ALLOWANCE, mean


# -- 7. determinism ---------------------------------------------------------------------------

def _cli(*args):
    out = subprocess.run([sys.executable, "-m", "mdmt", *args], capture_output=True, text=True)
    assert out.returncode == 0, out.stderr
    return out


def test_criterion_7_determinism(tmp_path):
    with criterion(7, "determinism") as info:
        blobs = []
        for name in ("a", "b"):
            common = ["--preset", "desk_default", "--output-dir", str(tmp_path / name),
                      "--set", "train.epochs=3", "--set", "train.warmup_epochs=1"]
            _cli("generate", *common)
            cfg = from_dict({**preset("desk_default"), "output_dir": str(tmp_path / name),
                             "train": {**preset("desk_default")["train"], "epochs": 3, "warmup_epochs": 1}})
            files = [harness.dataset_path(cfg, 1).read_bytes(), harness.dataset_path(cfg, 2).read_bytes()]
            logs = []
            for _ in range(2):
                _cli("train", *common, "--strategy", "semi_supervised_mdmt", "--seed", "1")
                logs.append((harness.run_dir(cfg, "semi_supervised_mdmt", 1) / "metrics.jsonl").read_bytes())
            assert logs[0] == logs[1]
            blobs.append((files, logs[0]))
        assert blobs[0][0] == blobs[1][0], "dataset generation differs between runs"
        assert blobs[0][1] == blobs[1][1], "metrics log differs between output directories"
        info.update(log_lines=blobs[0][1].count(b"\n"), dataset_bytes=sum(map(len, blobs[0][0])))


# -- 8. persistence ------------------------------------------------------------------------

def _mutations(blob: bytes, rng):
    end = blob.index(b"end_header\n") + len(b"end_header\n")
    yield "magic", b"XXXX" + blob[4:]
    yield "truncated", blob[:-1]
    yield "empty", b""
    yield "header only", blob[:end]
    yield "extra byte", blob + b"\0"
    yield "payload flip", blob[:-5] + bytes([blob[-5] ^ 1]) + blob[-4:]
    yield "no end marker", blob.replace(b"end_header\n", b"end_headr\n", 1)
    for i in range(40):
        pos = int(rng.integers(0, end))
        yield f"header byte {pos}", blob[:pos] + bytes([blob[pos] ^ int(rng.integers(1, 256))]) + blob[pos + 1:]
    for i in range(10):
        yield f"cut {i}", blob[:int(rng.integers(0, len(blob)))]


def test_criterion_8_persistence(tmp_path):
    with criterion(8, "persistence") as info:
        d1, d2 = harness.build_datasets(DESK)
        rng = np.random.default_rng(8)
        caught = 0
        for ds in (d1, d2):
            path = tmp_path / f"d{ds.domain_id}.mdmt"
            storage.write_dataset(ds, path)
            back = storage.read_dataset(path)
            assert np.array_equal(back.volumes, ds.volumes) and back.volumes.tobytes() == ds.volumes.tobytes()
            for field in ("labels", "masks", "splits"):
                a, b = getattr(ds, field), getattr(back, field)
                assert (a is None and b is None) or np.array_equal(a, b), field
            assert back.stats == ds.stats and back.spec == ds.spec
            storage.write_dataset(back, tmp_path / "again.mdmt")
            blob = path.read_bytes()
            assert (tmp_path / "again.mdmt").read_bytes() == blob
            for what, bad in _mutations(blob, rng):
                if bad == blob:
                    continue
                try:
                    storage.read_dataset_bytes(bad)
                except FormatError:
                    caught += 1
                else:
                    raise AssertionError(f"dataset {what}: corrupted file accepted")

        params = net.init_params(DESK.arch)
        path = tmp_path / "ckpt.mdmt"
        storage.save_checkpoint(params, path, meta={"epoch": 3})
        back, meta = storage.load_checkpoint(path)
        assert back.arch == params.arch and meta["epoch"] == 3
        for (na, ta), (nb, tb) in zip(params.named_parameters(), back.named_parameters()):
            assert na == nb and ta.data.tobytes() == tb.data.tobytes()
        blob = path.read_bytes()
        for what, bad in _mutations(blob, rng):
            if bad == blob:
                continue
            try:
                storage.read_checkpoint_bytes(bad)
            except FormatError:
                caught += 1
            else:
                raise AssertionError(f"checkpoint {what}: corrupted file accepted")
        info["corruptions_rejected"] = caught
