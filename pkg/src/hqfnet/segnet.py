"""Full segmentation network assembly and the frozen semantic-feature providers.

Encoder: a full-resolution stem then four stride-2 depthwise-separable
stages (skips at 1/2 .. 1/16 of the input). Per variant flags, stages 2-4
are fused with provider features (naive add/mul or deformable
cross-attention), every skip may pass through quantum recalibration, and the
bottleneck conv block may be followed by the quantum MoE. The decoder
mirrors the ladder with 2x transposed convolutions and skip concatenation.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import read_feature
from .dmcaf import DmcafConfig, FusionStage
from .layers import Conv1x1, ConvBlock, TransposedConv2x
from .quantum_blocks import QMoEBottleneck, QSkipBlock
from .tensor import OpTape, ShapeError, Tensor

FUSION_MODES = ("none", "add", "mul", "dmcaf")
FUSED_STAGES = (2, 3, 4)
BASE_LADDER = (64, 128, 256, 512, 1024)


@dataclass(frozen=True)
class NetConfig:
    input_size: int = 224
    n_classes: int = 5
    width: float = 1.0
    fusion: str = "dmcaf"
    qskip: bool = True
    qmoe: bool = True
    n_qubits: int = 16
    provider_channels: int = 64
    provider_patch: int = 2
    dmcaf: DmcafConfig = field(default_factory=DmcafConfig)

    def __post_init__(self):
        if self.input_size % 16:
            raise ValueError(f"input size {self.input_size} not divisible by 16")
        if self.fusion not in FUSION_MODES:
            raise ValueError(f"fusion must be one of {FUSION_MODES}, got {self.fusion!r}")
        if self.n_qubits not in (8, 16):
            raise ValueError(f"qubit profile must be 8 or 16, got {self.n_qubits}")
        if self.n_classes < 2:
            raise ValueError("need at least two classes")

    @property
    def ladder(self) -> tuple[int, ...]:
        return tuple(max(1, round(c * self.width)) for c in BASE_LADDER)

    def stage_resolution(self, stage: int) -> int:
        return self.input_size >> stage

    def provider_shape(self, stage: int) -> tuple[int, int, int]:
        side = max(1, self.stage_resolution(stage) // self.provider_patch)
        return (self.provider_channels, side, side)


def _stable_id_hash(sample_id: str) -> int:
    return int.from_bytes(hashlib.sha256(sample_id.encode("utf-8")).digest()[:8], "little")


class SyntheticFeatureProvider:
    """Seeded smooth pseudo-random fields standing in for a frozen backbone.

    Deterministic in (seed, sample id, stage); holds no trainable state.
    """

    mode = "synthetic"

    def __init__(self, cfg: NetConfig, seed: int):
        self.cfg = cfg
        self.seed = seed

    def features(self, sample_id: str, stage: int) -> np.ndarray:
        c, h, w = self.cfg.provider_shape(stage)
        rng = np.random.default_rng(
            np.random.SeedSequence([self.seed, stage, _stable_id_hash(sample_id)])
        )
        base_h, base_w = min(4, h), min(4, w)
        coarse = rng.normal(size=(1, c, base_h, base_w))
        if (base_h, base_w) != (h, w):
            out = T.bilinear_upsample(Tensor(coarse), h, w).data[0]
        else:
            out = coarse[0]
        return out


class FileFeatureProvider:
    """Reads per-sample per-stage feature files listed in a JSON manifest."""

    mode = "file"

    def __init__(self, cfg: NetConfig, manifest_path: str):
        self.cfg = cfg
        self.root = Path(manifest_path).parent
        with open(manifest_path, "r", encoding="utf-8") as fh:
            self.manifest = json.load(fh)

    def features(self, sample_id: str, stage: int) -> np.ndarray:
        try:
            rel = self.manifest[sample_id][str(stage)]
        except KeyError:
            raise FileNotFoundError(f"manifest has no entry for sample {sample_id!r} stage {stage}")
        arr = read_feature(self.root / rel)
        want = self.cfg.provider_shape(stage)
        if arr.shape != want:
            raise ShapeError(f"feature {rel}: shape {arr.shape} vs manifest contract {want}")
        return arr


def provider_batch(provider, sample_ids, stage: int) -> Tensor:
    return Tensor(np.stack([provider.features(sid, stage) for sid in sample_ids]))


class BaselineFusion:
    """Project the semantic map to stage channels, resize, then add or multiply."""

    def __init__(self, rng, c_in: int, c_t: int, mode: str):
        self.mode = mode
        self.proj = Conv1x1(rng, c_t, c_in)

    def forward(self, u: Tensor, d: Tensor, tape: OpTape | None = None) -> Tensor:
        proj = self.proj(d, tape)
        resized = T.bilinear_upsample(proj, u.shape[2], u.shape[3], tape)
        if self.mode == "add":
            return T.add(u, resized, tape)
        return T.mul(u, resized, tape)

    def named_params(self, prefix: str):
        return self.proj.named_params(prefix + ".proj")


class Encoder:
    def __init__(self, rng, ladder):
        self.stem = ConvBlock(rng, 3, ladder[0], stride=1)
        self.stages = [ConvBlock(rng, ladder[i], ladder[i + 1], stride=2) for i in range(4)]

    def forward(self, x: Tensor, tape: OpTape | None = None):
        h = self.stem(x, tape)
        skips = []
        for stage in self.stages:
            h = stage(h, tape)
            skips.append(h)
        return skips, skips[-1]

    def named_params(self, prefix: str):
        out = self.stem.named_params(prefix + ".stem")
        for i, s in enumerate(self.stages, start=1):
            out += s.named_params(f"{prefix}.stage{i}")
        return out


class Decoder:
    def __init__(self, rng, ladder, bottleneck_ch: int, n_classes: int):
        l0, l1, l2, l3, l4 = ladder
        self.merge4 = ConvBlock(rng, bottleneck_ch + l4, l3)
        self.up3 = TransposedConv2x(rng, l3, l3)
        self.merge3 = ConvBlock(rng, l3 + l3, l2)
        self.up2 = TransposedConv2x(rng, l2, l2)
        self.merge2 = ConvBlock(rng, l2 + l2, l1)
        self.up1 = TransposedConv2x(rng, l1, l1)
        self.merge1 = ConvBlock(rng, l1 + l1, l0)
        self.up0 = TransposedConv2x(rng, l0, l0)
        self.final = ConvBlock(rng, l0, l0)
        self.head = Conv1x1(rng, l0, n_classes)

    def forward(self, xb: Tensor, skips, tape: OpTape | None = None) -> Tensor:
        y = self.merge4(T.concat([xb, skips[3]], 1, tape), tape)
        y = self.merge3(T.concat([self.up3(y, tape), skips[2]], 1, tape), tape)
        y = self.merge2(T.concat([self.up2(y, tape), skips[1]], 1, tape), tape)
        y = self.merge1(T.concat([self.up1(y, tape), skips[0]], 1, tape), tape)
        y = self.final(self.up0(y, tape), tape)
        return self.head(y, tape)

    def named_params(self, prefix: str):
        out = []
        for name in ("merge4", "up3", "merge3", "up2", "merge2", "up1", "merge1", "up0", "final", "head"):
            out += getattr(self, name).named_params(f"{prefix}.{name}")
        return out


class SegNet:
    """Encoder, per-stage fusion, quantum skip refinement, bottleneck, decoder."""

    def __init__(self, cfg: NetConfig, seed: int = 0):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xD15EA5E]))
        self.cfg = cfg
        ladder = cfg.ladder
        self.encoder = Encoder(rng, ladder)
        self.fusion_stages: dict[int, object] = {}
        if cfg.fusion == "dmcaf":
            for s in FUSED_STAGES:
                self.fusion_stages[s] = FusionStage(rng, ladder[s], cfg.provider_channels, cfg.dmcaf)
        elif cfg.fusion in ("add", "mul"):
            for s in FUSED_STAGES:
                self.fusion_stages[s] = BaselineFusion(rng, ladder[s], cfg.provider_channels, cfg.fusion)
        self.qskips = (
            [QSkipBlock(rng, ladder[i], cfg.n_qubits) for i in (1, 2, 3, 4)]
            if cfg.qskip else []
        )
        self.bottleneck = ConvBlock(rng, ladder[4], ladder[4])
        self.qmoe = QMoEBottleneck(rng, ladder[4], ladder[4], cfg.n_qubits) if cfg.qmoe else None
        self.decoder = Decoder(rng, ladder, ladder[4], cfg.n_classes)

    def named_params(self):
        out = self.encoder.named_params("encoder")
        for s in FUSED_STAGES:
            if s in self.fusion_stages:
                out += self.fusion_stages[s].named_params(f"fusion.stage{s}")
        for i, q in enumerate(self.qskips, start=1):
            out += q.named_params(f"qskip.{i}")
        out += self.bottleneck.named_params("bottleneck.conv")
        if self.qmoe is not None:
            out += self.qmoe.named_params("bottleneck.qmoe")
        out += self.decoder.named_params("decoder")
        return out

    def param_count(self) -> int:
        return sum(t.data.size for _, t in self.named_params())

    def forward(
        self,
        images: Tensor,
        feats: dict[int, Tensor] | None = None,
        tape: OpTape | None = None,
        trace: dict | None = None,
    ) -> Tensor:
        if images.ndim != 4 or images.shape[1] != 3:
            raise ShapeError(f"images must be [B,3,H,W], got {images.shape}")
        if images.shape[2] != self.cfg.input_size or images.shape[3] != self.cfg.input_size:
            raise ShapeError(
                f"input {images.shape[2]}x{images.shape[3]} vs configured {self.cfg.input_size}"
            )
        skips, _ = self.encoder.forward(images, tape)
        if self.cfg.fusion != "none":
            if feats is None:
                raise ValueError("fusion enabled but no provider features supplied")
            for s in FUSED_STAGES:
                skips[s - 1] = self.fusion_stages[s].forward(skips[s - 1], feats[s], tape)
        bottom = skips[3]
        if trace is not None:
            trace["encoder.bottom"] = bottom
        if self.cfg.qskip:
            skips = [
                q.refine(skip, tape, trace, f"qskip{i}")
                for i, (q, skip) in enumerate(zip(self.qskips, skips), start=1)
            ]
        xb = self.bottleneck(bottom, tape)
        if self.qmoe is not None:
            xb = self.qmoe.forward(xb, tape, trace)
        logits = self.decoder.forward(xb, skips, tape)
        if trace is not None:
            trace["logits"] = logits
        return logits


def batch_features(net: SegNet, provider, sample_ids) -> dict[int, Tensor] | None:
    if net.cfg.fusion == "none":
        return None
    return {s: provider_batch(provider, sample_ids, s) for s in FUSED_STAGES}
