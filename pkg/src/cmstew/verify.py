"""Self-checks behind ``cmstew verify``.

Each check returns a :class:`Check`; the harness never raises on a failing
check, so a report always lists every result. Reference numbers that the
checks compare against live in ``ORACLE_VALUES`` and can be overridden (a
tampered value must make its check fail, which the test-suite exercises).
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np
import scipy.linalg
import torch

from .data import SyntheticSpec, generate_synthetic, shift_labels, standardize, window_clips
from .layers import BiGRU, Dense, MultiHeadAttention, TransformerEncoderLayer
from .models import (ClassifierConfig, DecoderConfig, EncoderConfig, WeakModel,
                     load_checkpoint, save_checkpoint)
from .numerics import GradientCheckError, finite_difference_check
from .objectives import (DccaConfig, LossWeights, alignment_loss, binary_accuracy, bce_loss, ccc,
                         dcca_correlation, mae_translation_loss, total_loss, weighted_f1)
from .training import TrainConfig, evaluate, train_source, train_weak

ORACLE_VALUES = {
    "ccc_example": 0.8,                          # Y=[1,2,3,4], Y_hat=[2,2,4,4]
    "weighted_f1_example": 0.7333333333333333,   # Y=[1,1,0,0], Y_hat=[1,0,0,0]
    "shift_frames": 70,                          # 2.8 s at 40 ms frames
    "window_count": 298,                         # 7500 frames, 3 s windows, 1 s hop
}

TOLERANCES = {"gradient": 1e-4, "dcca": 1e-6, "metric": 1e-9}

# settings of the desk-scale transfer experiment
SYNTH_ENCODER = {"gru_layers": 1}
SYNTH_TRAIN = {"lr": 1e-3, "max_epochs": 30, "patience": 10}
TRANSFER_RUNS = ("strong", "weak", "cmstew", "no_lfa", "no_decoder")


@dataclass
class Check:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0


def _run(name: str, fn: Callable[[], tuple[bool, str]]) -> Check:
    t0 = time.perf_counter()
    try:
        passed, detail = fn()
    except (GradientCheckError, AssertionError, ValueError, ArithmeticError) as exc:
        passed, detail = False, f"{type(exc).__name__}: {exc}"
    return Check(name, bool(passed), detail, time.perf_counter() - t0)


# -- independent oracles ---------------------------------------------------------

def cca_oracle(a: np.ndarray, b: np.ndarray, r1: float, r2: float) -> float:
    """Sum of canonical correlations from S_sw S_w^-1 S_ws v = rho^2 S_s v."""
    n, d = a.shape
    ac, bc = a - a.mean(0), b - b.mean(0)
    s_s = ac.T @ ac / (n - 1) + r1 * np.eye(d)
    s_w = bc.T @ bc / (n - 1) + r2 * np.eye(d)
    s_sw = ac.T @ bc / (n - 1)
    rho2 = scipy.linalg.eigh(s_sw @ np.linalg.solve(s_w, s_sw.T), s_s, eigvals_only=True)
    return float(np.sqrt(np.clip(rho2, 0, None)).sum())


def ccc_direct(y, p) -> float:
    n = len(y)
    my, mp = sum(y) / n, sum(p) / n
    vy = sum((v - my) ** 2 for v in y) / n
    vp = sum((v - mp) ** 2 for v in p) / n
    cov = sum((a - my) * (b - mp) for a, b in zip(y, p)) / n
    return 2 * cov / (vy + vp + (my - mp) ** 2)


def weighted_f1_direct(y, p) -> float:
    def f1(cls):
        tp = sum(1 for a, b in zip(y, p) if a == cls and b == cls)
        fp = sum(1 for a, b in zip(y, p) if a != cls and b == cls)
        fn = sum(1 for a, b in zip(y, p) if a == cls and b != cls)
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        return 2 * prec * rec / (prec + rec) if prec + rec else 0.0

    pos = sum(1 for v in y if v == 1)
    return (f1(1) * pos + f1(0) * (len(y) - pos)) / len(y)


# -- gradient checks ---------------------------------------------------------------

def _rand(gen, *shape):
    return torch.randn(*shape, generator=gen, dtype=torch.float64)


def check_layer_gradients() -> tuple[bool, str]:
    gen = torch.Generator().manual_seed(0)
    worst = {}
    x, x6 = _rand(gen, 2, 4, 3), _rand(gen, 2, 4, 6)
    layers = {
        "dense": (Dense(3, 5, "tanh", gen=gen).double(), lambda m: m(x)),
        "bigru": (BiGRU(3, 4, 2, 0.0, gen).double(), lambda m: m(x)),
        "attention": (MultiHeadAttention(6, 2, 0.0, gen).double(), lambda m: m(x6)),
        "transformer": (TransformerEncoderLayer(6, 2, (8, 6), 0.0, gen).double(), lambda m: m(x6)),
    }
    for name, (module, call) in layers.items():
        weight = _rand(gen, *call(module).shape)
        params = dict(module.named_parameters())
        worst[name] = finite_difference_check(lambda: (call(module) * weight).sum(), params,
                                              tol=TOLERANCES["gradient"], max_coords=16)
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    return max(worst.values()) <= TOLERANCES["gradient"], detail


def check_dcca_gradients() -> tuple[bool, str]:
    gen = torch.Generator().manual_seed(1)
    xs = _rand(gen, 30, 4).requires_grad_()
    xw = (xs.detach() @ _rand(gen, 4, 4) + 0.5 * _rand(gen, 30, 4)).requires_grad_()
    cfg = DccaConfig(latent_dim=4)
    err_corr = finite_difference_check(lambda: dcca_correlation(xs, xw, cfg),
                                       {"xs": xs, "xw": xw}, tol=TOLERANCES["gradient"], max_coords=None)
    err_align = finite_difference_check(lambda: alignment_loss(xs, xw, cfg), {"xw": xw},
                                        tol=TOLERANCES["gradient"], max_coords=None)
    return max(err_corr, err_align) <= TOLERANCES["gradient"], \
        f"correlation {err_corr:.1e}, alignment {err_align:.1e}"


def small_weak_model(seed: int = 0, d_w: int = 3, d_s: int = 4, latent: int = 4) -> WeakModel:
    enc = EncoderConfig(d_w, gru_layers=2, latent_dim=latent, ffn_dims=(8, latent), dropout_rate=0.0)
    return WeakModel(enc, "classification", DecoderConfig(d_s, latent_dim=latent, gru_layers=1,
                                                          dropout_rate=0.0),
                     seed=seed, classifier_cfg=ClassifierConfig(latent, 6, 0.0))


def check_weak_total_gradient() -> tuple[bool, str]:
    """Full weak-model objective on a two-clip batch, every term active."""
    gen = torch.Generator().manual_seed(2)
    model = small_weak_model().double()
    xw, xs = _rand(gen, 2, 5, 3), _rand(gen, 2, 5, 4)
    target_latent = _rand(gen, 10, 4)
    y = torch.tensor([[1.0] * 5, [0.0] * 5], dtype=torch.float64)
    cfg, weights = DccaConfig(latent_dim=4), LossWeights(1.0, 1.0)

    def loss():
        latent, y_hat, xs_hat = model(xw)
        return total_loss(bce_loss(y.reshape(-1), y_hat.reshape(-1)),
                          alignment_loss(target_latent, latent.reshape(-1, 4), cfg),
                          mae_translation_loss(xs, xs_hat), weights)

    params = dict(model.named_parameters())
    err = finite_difference_check(loss, params, tol=TOLERANCES["gradient"], max_coords=4)
    sampled = sum(min(4, p.numel()) for p in params.values())
    return err <= TOLERANCES["gradient"], f"max rel. error {err:.1e} over {sampled} coordinates"


# -- oracle comparisons --------------------------------------------------------------

def check_dcca_oracle(instances: int = 20) -> tuple[bool, str]:
    rng = np.random.default_rng(3)
    worst = 0.0
    for i in range(instances):
        d = (2, 3, 5)[i % 3]
        a = rng.standard_normal((200, d))
        b = a @ rng.standard_normal((d, d)) + rng.uniform(0.2, 2.0) * rng.standard_normal((200, d))
        cfg = DccaConfig(r1=1e-4, r2=1e-4, latent_dim=d)
        got = dcca_correlation(torch.from_numpy(a), torch.from_numpy(b), cfg).item()
        worst = max(worst, abs(got - cca_oracle(a, b, 1e-4, 1e-4)))
    return worst <= TOLERANCES["dcca"], f"{instances} instances, max abs. diff {worst:.1e}"


def check_metric_examples(oracles: dict) -> tuple[bool, str]:
    got_ccc = ccc([1, 2, 3, 4], [2, 2, 4, 4])
    got_f1 = weighted_f1([1, 1, 0, 0], [1, 0, 0, 0])
    ok = (abs(got_ccc - oracles["ccc_example"]) <= TOLERANCES["metric"]
          and abs(got_f1 - oracles["weighted_f1_example"]) <= TOLERANCES["metric"])
    return ok, f"ccc {got_ccc:.12g} (expected {oracles['ccc_example']}), " \
               f"weighted F1 {got_f1:.12g} (expected {oracles['weighted_f1_example']})"


def check_metric_randomized(instances: int = 100) -> tuple[bool, str]:
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(instances):
        n = int(rng.integers(5, 60))
        y, p = rng.standard_normal(n), rng.standard_normal(n) * rng.uniform(0.1, 3) + rng.normal()
        worst = max(worst, abs(ccc(y, p) - ccc_direct(y.tolist(), p.tolist())))
        yb, pb = rng.integers(0, 2, n), rng.integers(0, 2, n)
        worst = max(worst, abs(weighted_f1(yb, pb) - weighted_f1_direct(yb.tolist(), pb.tolist())))
        scores = rng.uniform(0, 1, n)
        direct = sum(int(s >= 0.5) == t for s, t in zip(scores, yb)) / n
        worst = max(worst, abs(binary_accuracy(yb, scores) - direct))
    return worst <= TOLERANCES["metric"], f"{instances} instances, max abs. diff {worst:.1e}"


def check_preprocessing(oracles: dict) -> tuple[bool, str]:
    shifted = shift_labels(np.arange(200.0), 2.8, 0.04)
    frames = int(shifted[0])
    clips = window_clips(np.zeros((7500, 1), dtype=np.float32), np.zeros(7500))
    lengths = {c.n_segments for c in clips}
    ok = frames == oracles["shift_frames"] and len(clips) == oracles["window_count"] and lengths == {75}
    return ok, f"shift {frames} frames, {len(clips)} windows of N={sorted(lengths)}"


# -- training contracts ------------------------------------------------------------------

def _tiny_dataset(seed: int = 0):
    spec = SyntheticSpec(train_clips=12, dev_clips=4, clip_len=6, strong_dim=5, weak_dim=4, seed=seed)
    return standardize(generate_synthetic(spec))


def _tiny_encoder(dim: int, latent: int = 8) -> EncoderConfig:
    return EncoderConfig(dim, gru_layers=1, latent_dim=latent, ffn_dims=(16, latent))


def _tiny_train(**kw) -> TrainConfig:
    base = dict(lr=1e-3, batch_size=4, max_epochs=2, patience=2, seed=0)
    base.update(kw)
    return TrainConfig(**base)


def _source(ds, cfg):
    return train_source(ds, cfg, "strong", _tiny_encoder(ds.modalities["strong"]))[0]


def check_objective_collapse() -> tuple[bool, str]:
    """alpha = beta = 0 reproduces the uni-modal baseline bit for bit."""
    ds = _tiny_dataset()
    cfg = _tiny_train(alpha=0.0, beta=0.0)
    source = _source(ds, _tiny_train())
    enc = _tiny_encoder(ds.modalities["weak"])
    baseline, _ = train_source(ds, cfg, "weak", enc, freeze=False)
    weak, _ = train_weak(ds, source, cfg, "weak", "strong", enc,
                         DecoderConfig(ds.modalities["strong"], latent_dim=8, gru_layers=1))
    deploy = weak.deployable()
    same = all(torch.equal(a, b) for a, b in zip(baseline.state_dict().values(),
                                                 deploy.state_dict().values()))
    return same, "encoder+classifier identical" if same else "weights differ from baseline"


def check_freeze_contract() -> tuple[bool, str]:
    ds = _tiny_dataset(1)
    source = _source(ds, _tiny_train())
    before = {k: v.clone() for k, v in source.state_dict().items()}
    weak, _ = train_weak(ds, source, _tiny_train(), "weak", "strong",
                         _tiny_encoder(ds.modalities["weak"]),
                         DecoderConfig(ds.modalities["strong"], latent_dim=8, gru_layers=1))
    frozen = all(torch.equal(before[k], v) for k, v in source.state_dict().items())

    # decoder receives exactly zero gradient when both auxiliary weights vanish
    model = WeakModel(_tiny_encoder(4), "classification",
                      DecoderConfig(5, latent_dim=8, gru_layers=1), seed=0)
    x = torch.from_numpy(np.stack([c.features["weak"] for c in ds.split("train")[:4]]))
    _, y_hat, _ = model(x, translate=False)
    y_hat.sum().backward()
    dec_zero = all(p.grad is None or not p.grad.any() for p in model.decoder.parameters())
    ok = frozen and dec_zero and weak.decoder is not None
    return ok, f"source unchanged: {frozen}, decoder gradient zero: {dec_zero}"


def check_shapes_and_checkpoint(tmpdir=None) -> tuple[bool, str]:
    import tempfile
    from pathlib import Path

    model = small_weak_model(seed=5)
    latent, y_hat, xs_hat = model(torch.zeros(3, 7, 3))
    shapes_ok = latent.shape == (3, 7, 4) and y_hat.shape == (3, 7) and xs_hat.shape == (3, 7, 4)
    with tempfile.TemporaryDirectory(dir=tmpdir) as d:
        path = save_checkpoint(model, Path(d) / "m.ckpt")
        back = load_checkpoint(path)
        same = all(torch.equal(a, b) for a, b in zip(model.state_dict().values(),
                                                     back.state_dict().values()))
    return shapes_ok and same, f"shapes ok: {shapes_ok}, checkpoint round trip: {same}"


def check_determinism() -> tuple[bool, str]:
    """Two identical runs give identical metric records, wall-clock aside."""
    from .training import MetricsStream

    ds, records = _tiny_dataset(2), []
    for _ in range(2):
        stream = MetricsStream(None, "rerun")
        train_source(ds, _tiny_train(), "strong", _tiny_encoder(5), stream=stream)
        records.append([{k: v for k, v in r.items() if k != "seconds"} for r in stream.records])
    same = records[0] == records[1]
    return same, f"{len(records[0])} records, identical: {same}"


# -- synthetic transfer experiment ---------------------------------------------------------

def transfer_seed(seed: int, spec: SyntheticSpec | None = None,
                  train_overrides: dict | None = None) -> dict:
    """Best dev accuracy of the five runs compared in the transfer table."""
    spec = replace(spec or SyntheticSpec(), seed=seed)
    ds = standardize(generate_synthetic(spec))
    s_name, w_name = spec.strong_name, spec.weak_name
    cfg = TrainConfig(task=ds.task, seed=seed, **{**SYNTH_TRAIN, **(train_overrides or {})})

    def enc(m):
        return EncoderConfig(ds.modalities[m], dropout_rate=cfg.dropout_rate, **SYNTH_ENCODER)

    dev = ds.split("dev")
    row = {"seed": seed}
    source, _ = train_source(ds, cfg, s_name, enc(s_name))
    row["strong"] = evaluate(source, dev, ds.task, s_name)["acc"]
    baseline, _ = train_source(ds, cfg, w_name, enc(w_name), freeze=False)
    row["weak"] = evaluate(baseline, dev, ds.task, w_name)["acc"]
    for name, ablation in (("cmstew", "none"), ("no_lfa", "no_lfa"), ("no_decoder", "no_decoder")):
        model, _ = train_weak(ds, source, replace(cfg, ablation=ablation), w_name, s_name, enc(w_name))
        row[name] = evaluate(model, dev, ds.task, w_name)["acc"]
    return row


def transfer_summary(rows: list[dict], slack: float = 0.005, min_gap: float = 0.05) -> dict:
    means = {k: float(np.mean([r[k] for r in rows])) for k in TRANSFER_RUNS}
    non_degrading = sum(r["cmstew"] >= r["weak"] - slack for r in rows)
    return {
        "means": means,
        "gap": means["strong"] - means["weak"],
        "gain": means["cmstew"] - means["weak"],
        "non_degrading": non_degrading,
        "ranking_ok": means["strong"] - means["weak"] >= min_gap,
        "transfer_ok": means["cmstew"] > means["weak"] and non_degrading >= math.ceil(0.8 * len(rows)),
    }


def check_synthetic_transfer(seeds=range(5), budget_s: float = 900.0) -> tuple[bool, str]:
    t0 = time.perf_counter()
    rows = [transfer_seed(s) for s in seeds]
    elapsed = time.perf_counter() - t0
    s = transfer_summary(rows)
    m = s["means"]
    detail = (f"strong {m['strong']:.3f}, weak {m['weak']:.3f}, cm-stew {m['cmstew']:.3f}, "
              f"-lfa {m['no_lfa']:.3f}, -decoder {m['no_decoder']:.3f}; "
              f"non-degrading {s['non_degrading']}/{len(rows)}; {elapsed:.0f} s")
    return s["ranking_ok"] and s["transfer_ok"] and elapsed <= budget_s, detail


# -- suites ----------------------------------------------------------------------------

def fast_checks(oracles: dict | None = None) -> list[tuple[str, Callable[[], tuple[bool, str]]]]:
    oracles = {**ORACLE_VALUES, **(oracles or {})}
    return [
        ("gradient.layers", check_layer_gradients),
        ("gradient.dcca", check_dcca_gradients),
        ("gradient.weak_total", check_weak_total_gradient),
        ("oracle.dcca_vs_cca", check_dcca_oracle),
        ("oracle.metric_examples", lambda: check_metric_examples(oracles)),
        ("oracle.metric_randomized", check_metric_randomized),
        ("preprocessing", lambda: check_preprocessing(oracles)),
        ("contract.objective_collapse", check_objective_collapse),
        ("contract.freeze", check_freeze_contract),
        ("shapes.checkpoint", check_shapes_and_checkpoint),
        ("determinism.rerun", check_determinism),
    ]


def run_suite(level: str = "fast", oracles: dict | None = None,
              progress: Callable[[Check], None] | None = None) -> list[Check]:
    if level not in ("fast", "full"):
        raise ValueError(f"verify level must be 'fast' or 'full', got {level!r}")
    checks = fast_checks(oracles)
    if level == "full":
        checks.append(("experiment.synthetic_transfer", check_synthetic_transfer))
    results = []
    for name, fn in checks:
        results.append(_run(name, fn))
        if progress is not None:
            progress(results[-1])
    return results


# acceptance-criterion number -> checks that establish it
ACCEPTANCE = {
    1: ("gradient correctness", ("gradient.layers", "gradient.dcca", "gradient.weak_total")),
    2: ("DCCA oracle equivalence", ("oracle.dcca_vs_cca",)),
    3: ("metric oracles", ("oracle.metric_examples", "oracle.metric_randomized")),
    4: ("objective collapse", ("contract.objective_collapse",)),
    5: ("freeze contract", ("contract.freeze",)),
    6: ("synthetic knowledge transfer", ("experiment.synthetic_transfer",)),
    7: ("preprocessing exactness", ("preprocessing",)),
    8: ("determinism", ("determinism.rerun",)),
}


def acceptance_table(results: list[Check]) -> list[tuple[int, str, str]]:
    by_name = {c.name: c for c in results}
    rows = []
    for num, (title, names) in ACCEPTANCE.items():
        found = [by_name[n] for n in names if n in by_name]
        if len(found) < len(names):
            status = "not run"
        else:
            status = "pass" if all(c.passed for c in found) else "FAIL"
        rows.append((num, title, status))
    return rows
