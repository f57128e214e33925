"""Training and evaluation engine, the ablation runner, and the oracle suite."""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import qsim
from . import tensor as T
from .checkpoint import apply_checkpoint, load_checkpoint, quantize_params, save_checkpoint
from .circuits import BUILDERS, QubitGrid, feature_observables
from .config import ConfigError, RunConfig
from .data import epoch_batches, scan_dataset
from .dmcaf import DmcafConfig, FusionStage
from .metrics import ConfusionMatrix, compute_metrics
from .optim import Adam
from .quantum_blocks import QMoEBottleneck
from .segnet import FUSED_STAGES, FileFeatureProvider, SegNet, SyntheticFeatureProvider, batch_features
from .tensor import OpTape, Tensor

IGNORE_INDEX = 255

# Table-style ablation ladder: every variant keeps the frozen-feature guidance
ABLATION_VARIANTS = (
    ("unet_dinov3_mul", "mul", False, False),
    ("unet_dinov3_add", "add", False, False),
    ("dmcaf", "dmcaf", False, False),
    ("dmcaf_qskip", "dmcaf", True, False),
    ("dmcaf_qmoe", "dmcaf", False, True),
    ("hqf_full", "dmcaf", True, True),
)

CSV_COLUMNS = ("variant", "mIoU", "OA", "params", "seconds")


def cross_entropy_loss(logits, mask, tape=None, ignore_index: int = IGNORE_INDEX):
    """Mean per-pixel negative log likelihood; see tensor.cross_entropy."""
    return T.cross_entropy(logits, mask, ignore_index=ignore_index, tape=tape)


@dataclass
class TrainResult:
    variant: str
    miou: float
    oa: float
    params: int
    seconds: float
    steps: int
    losses: list


def build_provider(cfg: RunConfig, net_cfg):
    if cfg.provider_mode == "file":
        return FileFeatureProvider(net_cfg, cfg.provider_manifest)
    return SyntheticFeatureProvider(net_cfg, cfg.provider_seed)


def _crop_resize(cfg: RunConfig):
    return (cfg.crop or None), (cfg.resize or None)


def evaluate_model(net: SegNet, provider, records, cfg: RunConfig) -> tuple[float, float]:
    """Confusion-matrix metrics over the record list (deterministic pass)."""
    cm = ConfusionMatrix(cfg.n_classes)
    _, resize = _crop_resize(cfg)
    eval_resize = resize
    if cfg.crop:
        # crops are a training augmentation; evaluation sees whole resized samples
        eval_resize = cfg.input_size
    for ids, imgs, masks in epoch_batches(
        records, cfg.batch, cfg.input_size, cfg.n_classes,
        seed=cfg.seed, epoch=0, crop=None, resize=eval_resize, shuffle=False,
    ):
        feats = batch_features(net, provider, ids)
        logits = net.forward(Tensor(imgs), feats)
        pred = np.argmax(logits.data, axis=1)
        cm.add(masks, pred, ignore_index=IGNORE_INDEX)
    return compute_metrics(cm)


def run_training(cfg: RunConfig, variant_name: str = "model") -> TrainResult:
    """Train per config, quantize to the published f32 weights, save, evaluate."""
    if not cfg.data_root:
        raise ConfigError("data.root is required for training")
    records = scan_dataset(cfg.data_root)
    net_cfg = cfg.net_config()
    net = SegNet(net_cfg, seed=cfg.seed)
    provider = build_provider(cfg, net_cfg)
    named = net.named_params()
    opt = Adam(named, lr=cfg.lr, betas=cfg.betas, eps=cfg.eps)
    crop, resize = _crop_resize(cfg)

    t0 = time.perf_counter()
    losses: list[float] = []
    step = 0
    done = False
    for epoch in range(cfg.epochs):
        if done:
            break
        for ids, imgs, masks in epoch_batches(
            records, cfg.batch, cfg.input_size, cfg.n_classes,
            seed=cfg.seed, epoch=epoch, crop=crop, resize=resize,
        ):
            if cfg.steps and step >= cfg.steps:
                done = True
                break
            feats = batch_features(net, provider, ids)
            tape = OpTape()
            opt.zero_grad()
            logits = net.forward(Tensor(imgs), feats, tape)
            loss = cross_entropy_loss(logits, masks, tape)
            tape.backward(loss)
            opt.step()
            losses.append(float(loss.data))
            step += 1

    quantize_params(named)
    if cfg.checkpoint:
        save_checkpoint(cfg.checkpoint, named)
    miou, oa = evaluate_model(net, provider, records, cfg)
    seconds = time.perf_counter() - t0
    return TrainResult(variant_name, miou, oa, net.param_count(), seconds, step, losses)


def run_eval(cfg: RunConfig, checkpoint_path: str) -> tuple[float, float]:
    if not cfg.data_root:
        raise ConfigError("data.root is required for evaluation")
    records = scan_dataset(cfg.data_root)
    net_cfg = cfg.net_config()
    net = SegNet(net_cfg, seed=cfg.seed)
    apply_checkpoint(net.named_params(), load_checkpoint(checkpoint_path))
    provider = build_provider(cfg, net_cfg)
    return evaluate_model(net, provider, records, cfg)


def write_report(path, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for r in rows:
            writer.writerow([r.variant, f"{r.miou:.6f}", f"{r.oa:.6f}", r.params, f"{r.seconds:.3f}"])


def run_ablation(cfg: RunConfig, out_csv: str | None = None) -> list[TrainResult]:
    """Train and score all six fusion/quantum variants under one protocol."""
    rows = []
    for name, fusion, qskip, qmoe in ABLATION_VARIANTS:
        vcfg = cfg.with_variant(fusion, qskip, qmoe)
        if vcfg.checkpoint:
            stem = Path(vcfg.checkpoint)
            vcfg.checkpoint = str(stem.with_name(f"{stem.stem}_{name}{stem.suffix}"))
        rows.append(run_training(vcfg, variant_name=name))
    target = out_csv or cfg.report_path
    if target:
        write_report(target, rows)
    full = next(r for r in rows if r.variant == "hqf_full")
    for r in rows:
        if r.variant != "hqf_full" and r.params >= full.params:
            raise RuntimeError(
                f"variant {r.variant} has {r.params} parameters, full model only {full.params}"
            )
    return rows


# ---------------------------------------------------------------------------
# oracle suite behind the `gradcheck` subcommand
# ---------------------------------------------------------------------------

@dataclass
class CheckResult:
    name: str
    error: float
    tolerance: float

    @property
    def ok(self) -> bool:
        return self.error <= self.tolerance


def _layer_checks(rng) -> list[CheckResult]:
    out = []

    def head(t, tape, w):
        flat = T.reshape(t, (1, t.data.size), tape)
        return T.reshape(T.linear(flat, Tensor(w), tape=tape), (), tape)

    cases = {
        "conv1x1": (20, lambda p, tape: T.conv1x1(
            T.reshape(T.slice_axis(p, 0, 0, 12, tape), (1, 3, 2, 2), tape),
            T.reshape(T.slice_axis(p, 0, 12, 18, tape), (2, 3), tape),
            T.slice_axis(p, 0, 18, 20, tape), tape)),
        "depthwise_separable": (59, lambda p, tape: T.depthwise_separable_conv(
            T.reshape(T.slice_axis(p, 0, 0, 32, tape), (1, 2, 4, 4), tape),
            T.reshape(T.slice_axis(p, 0, 32, 50, tape), (2, 3, 3), tape),
            T.reshape(T.slice_axis(p, 0, 50, 56, tape), (3, 2), tape),
            T.slice_axis(p, 0, 56, 59, tape), 2, tape)),
        "transposed_conv2x": (34, lambda p, tape: T.transposed_conv2x(
            T.reshape(T.slice_axis(p, 0, 0, 18, tape), (1, 2, 3, 3), tape),
            T.reshape(T.slice_axis(p, 0, 18, 34, tape), (2, 2, 2, 2), tape), None, tape)),
        "bilinear_sample": (44, lambda p, tape: T.bilinear_sample(
            T.reshape(T.slice_axis(p, 0, 0, 32, tape), (1, 2, 4, 4), tape),
            T.scale_const(T.tanh(T.reshape(T.slice_axis(p, 0, 32, 44, tape), (1, 6, 2), tape), tape), 0.9, tape),
            tape)),
        "softmax_tanh": (12, lambda p, tape: T.softmax(T.tanh(T.reshape(p, (2, 6), tape), tape), tape)),
        "adaptive_pool_upsample": (18, lambda p, tape: T.bilinear_upsample(
            T.adaptive_avg_pool(T.reshape(p, (1, 2, 3, 3), tape), 2, tape=tape), 5, 5, tape)),
    }
    for name, (n, build) in cases.items():
        theta0 = rng.normal(size=n) * 0.5

        def value(t, build=build):
            out_t = build(Tensor(t), None)
            return float(out_t.data.sum())

        params = Tensor(theta0)
        tape = OpTape()
        out_t = build(params, tape)
        ones = Tensor(np.ones((1, out_t.data.size)))
        loss = T.reshape(T.linear(T.reshape(out_t, (1, out_t.data.size), tape), ones, tape=tape), (), tape)
        tape.backward(loss)
        err = T.finite_diff_check(value, theta0, params.grad, h=1e-3)
        out.append(CheckResult(f"layer.{name}", err, 1e-5))
    return out


def _quantum_checks(rng) -> list[CheckResult]:
    out = []
    grid = QubitGrid.for_qubits(8)
    for name, builder in sorted(BUILDERS.items()):
        spec = builder(grid)
        obs = feature_observables(spec.n_qubits)
        theta = rng.uniform(-math.pi, math.pi, spec.n_trainable)
        x = rng.uniform(-math.pi, math.pi, spec.n_inputs)
        ja = qsim.adjoint_gradients(spec, theta, x, obs)
        js = qsim.parameter_shift_gradients(spec, theta, x, obs)
        out.append(CheckResult(f"qsim.adjoint_vs_shift.{name}", float(np.abs(ja - js).max()), 1e-9))
        h = 1e-5
        worst = 0.0
        for slot in rng.choice(spec.n_slots, size=min(6, spec.n_slots), replace=False):
            vec = np.concatenate([theta, x])
            vp, vm = vec.copy(), vec.copy()
            vp[slot] += h
            vm[slot] -= h
            ep = qsim.expectations(spec, vp[:spec.n_trainable], vp[spec.n_trainable:], obs)
            em = qsim.expectations(spec, vm[:spec.n_trainable], vm[spec.n_trainable:], obs)
            worst = max(worst, float(np.abs(js[:, slot] - (ep - em) / (2 * h)).max()))
        out.append(CheckResult(f"qsim.shift_vs_fd.{name}", worst, 1e-8))
    return out


def _stage_check(rng) -> CheckResult:
    stage = FusionStage(rng, 2, 2, DmcafConfig(dim=4, heads=2, points=2, stride=2))
    for _, p in stage.named_params("s"):
        if not p.data.any():
            p.data[:] = rng.normal(size=p.shape) * 0.3
    u = rng.normal(size=(1, 2, 4, 4))
    d = rng.normal(size=(1, 2, 3, 3))
    head = rng.normal(size=(1, 32))

    def value():
        out = stage.forward(Tensor(u), Tensor(d))
        return float((head @ out.data.reshape(-1, 1)).item())

    tape = OpTape()
    out = stage.forward(Tensor(u), Tensor(d), tape)
    loss = T.reshape(T.linear(T.reshape(out, (1, 32), tape), Tensor(head), tape=tape), (), tape)
    tape.backward(loss)
    worst = 0.0
    h = 1e-4
    for name, p in stage.named_params("s"):
        flat = p.data.reshape(-1)
        g = p.grad.reshape(-1) if p.grad is not None else np.zeros_like(flat)
        for idx in rng.choice(flat.size, size=min(2, flat.size), replace=False):
            orig = flat[idx]
            flat[idx] = orig + h
            fp = value()
            flat[idx] = orig - h
            fm = value()
            flat[idx] = orig
            num = (fp - fm) / (2 * h)
            worst = max(worst, abs(g[idx] - num) / max(1.0, abs(num)))
    return CheckResult("dmcaf.stage_end_to_end", worst, 1e-4)


def _qmoe_check(rng) -> CheckResult:
    block = QMoEBottleneck(rng, 4, 4, n_qubits=8)
    x = rng.normal(size=(1, 4, 4, 4))
    head = rng.normal(size=(1, 64))

    def value():
        out = block.forward(Tensor(x))
        return float((head @ out.data.reshape(-1, 1)).item())

    tape = OpTape()
    out = block.forward(Tensor(x), tape)
    loss = T.reshape(T.linear(T.reshape(out, (1, 64), tape), Tensor(head), tape=tape), (), tape)
    tape.backward(loss)
    worst = 0.0
    h = 1e-3
    for name, p in block.named_params("q"):
        flat = p.data.reshape(-1)
        g = p.grad.reshape(-1) if p.grad is not None else np.zeros_like(flat)
        for idx in rng.choice(flat.size, size=min(2, flat.size), replace=False):
            orig = flat[idx]
            flat[idx] = orig + h
            fp = value()
            flat[idx] = orig - h
            fm = value()
            flat[idx] = orig
            num = (fp - fm) / (2 * h)
            worst = max(worst, abs(g[idx] - num) / max(1.0, abs(num)))
    return CheckResult("qmoe.end_to_end", worst, 1e-3)


def gradcheck_suite(seed: int = 0) -> list[CheckResult]:
    """Module-by-module oracle checks; returns every result for reporting."""
    rng = np.random.default_rng(seed)
    results = []
    results += _layer_checks(rng)
    results += _quantum_checks(rng)
    results.append(_stage_check(rng))
    results.append(_qmoe_check(rng))
    return results


def network_gradcheck(n_params: int = 50, seed: int = 0) -> CheckResult:
    """Whole-network check: sampled parameters vs central finite differences.

    Toy profile: 32x32 input, width 0.125, 8 qubits, full variant.
    """
    rng = np.random.default_rng(seed)
    cfg = RunConfig(width=0.125, n_classes=3, input_size=32, n_qubits=8,
                    provider_channels=8)
    net_cfg = cfg.net_config()
    net = SegNet(net_cfg, seed=seed)
    provider = SyntheticFeatureProvider(net_cfg, seed=cfg.provider_seed)
    imgs = rng.uniform(0, 1, size=(1, 3, 32, 32))
    masks = rng.integers(0, 3, size=(1, 32, 32))
    feats = batch_features(net, provider, ["gradcheck"])

    def loss_value():
        logits = net.forward(Tensor(imgs), feats)
        return float(cross_entropy_loss(logits, masks).data)

    tape = OpTape()
    logits = net.forward(Tensor(imgs), feats, tape)
    loss = cross_entropy_loss(logits, masks, tape)
    tape.backward(loss)

    named = net.named_params()
    sizes = np.array([t.data.size for _, t in named])
    probs = sizes / sizes.sum()
    h = 1e-3
    worst = 0.0
    for _ in range(n_params):
        pi = int(rng.choice(len(named), p=probs))
        name, p = named[pi]
        idx = int(rng.integers(p.data.size))
        flat = p.data.reshape(-1)
        g = p.grad.reshape(-1)[idx] if p.grad is not None else 0.0
        orig = flat[idx]
        flat[idx] = orig + h
        fp = loss_value()
        flat[idx] = orig - h
        fm = loss_value()
        flat[idx] = orig
        num = (fp - fm) / (2 * h)
        worst = max(worst, abs(g - num) / max(1.0, abs(num)))
    return CheckResult("network.sampled_params", worst, 1e-3)
