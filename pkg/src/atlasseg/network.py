"""Dual-branch 3D U-Net with attention-gated template fusion.

Two structurally identical U-Net branches run side by side: the subject
branch takes the single-channel image, the template branch takes the
template image plus its label channel scaled to [0, 1] (2 input channels).
At any subset of nine sites (encoder stage outputs E1..E4, bottleneck B,
decoder stage outputs D4..D1) a fusion block combines the subject feature
map with the template branch's feature map from the same site, and the
fused result is what flows onward (and into skip connections at encoder
sites). Nothing ever feeds back into the template branch.

Fusion kinds:
  * "msa": per branch, four parallel convs (kernels 1/3/5/7, same padding)
    each emitting a quarter of that branch's channels, BN + PReLU, all
    concatenated, then a 1x1x1 conv to a single channel and a sigmoid. The
    subject features are multiplied by that attention map.
  * "sa": same gate but from one 3x3x3 conv per branch keeping full width.
  * "concat": concatenate both maps, 1x1x1 conv back to the subject width.
  * "none": no fusion modules at all; the template branch, if present, is
    never evaluated, so outputs cannot depend on it.

Channel widths double per stage from `base_channels_*`; spatial edges halve
per stage via stride-2 2x2x2 convs, and decoder stages mirror that with
transposed convs and skip concatenation.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from .volume import NUM_CLASSES

FUSION_KINDS = ("msa", "sa", "concat", "none")


def fusion_position_ids(num_stages: int = 4) -> tuple:
    enc = tuple(f"E{k}" for k in range(1, num_stages + 1))
    dec = tuple(f"D{k}" for k in range(num_stages, 0, -1))
    return enc + ("B",) + dec


ALL_FUSION_POSITIONS = fusion_position_ids(4)


@dataclass
class ArchitectureConfig:
    base_channels_seg: int = 32
    base_channels_atlas: int = 8
    num_stages: int = 4
    fusion_kind: str = "msa"
    fusion_positions: tuple = ALL_FUSION_POSITIONS
    atlas_branch: bool = True
    out_classes: int = NUM_CLASSES

    def __post_init__(self):
        self.fusion_positions = tuple(self.fusion_positions)
        if self.fusion_kind not in FUSION_KINDS:
            raise ValueError(f"fusion_kind must be one of {FUSION_KINDS}")
        valid = set(fusion_position_ids(self.num_stages))
        bad = [p for p in self.fusion_positions if p not in valid]
        if bad:
            raise ValueError(f"unknown fusion positions {bad}")
        if self.base_channels_seg <= 0 or self.base_channels_atlas <= 0:
            raise ValueError("base channel counts must be positive")
        if self.fusion_kind == "msa":
            if self.base_channels_seg % 4:
                raise ValueError("msa needs subject base channels divisible by 4")
            if self.atlas_branch and self.base_channels_atlas % 4:
                raise ValueError("msa needs template base channels divisible by 4")

    @property
    def active_positions(self) -> tuple:
        if self.fusion_kind == "none":
            return ()
        return self.fusion_positions

    def stage_channels(self, base: int) -> dict:
        ns = self.num_stages
        ch = {f"E{k + 1}": base * 2**k for k in range(ns)}
        ch["B"] = base * 2**ns
        for k in range(1, ns + 1):
            ch[f"D{k}"] = base * 2 ** (k - 1)
        return ch

    def stage_shapes(self, patch_edge: int) -> dict:
        """position -> (subject channels, spatial edge) for a cubic patch."""
        if patch_edge % 2**self.num_stages:
            raise ValueError(
                f"patch edge {patch_edge} not divisible by {2**self.num_stages}"
            )
        ch = self.stage_channels(self.base_channels_seg)
        out = {}
        for pos, c in ch.items():
            level = int(pos[1:]) - 1 if pos != "B" else self.num_stages
            out[pos] = (c, patch_edge // 2**level)
        return out


class DoubleConv(nn.Module):
    """Two (conv3x3x3 -> BN -> PReLU) blocks."""

    def __init__(self, c_in, c_out):
        super().__init__()
        self.block = nn.Sequential(
            nn.Conv3d(c_in, c_out, 3, padding=1),
            nn.BatchNorm3d(c_out),
            nn.PReLU(),
            nn.Conv3d(c_out, c_out, 3, padding=1),
            nn.BatchNorm3d(c_out),
            nn.PReLU(),
        )

    def forward(self, x):
        return self.block(x)


class ConvBNAct(nn.Module):
    def __init__(self, c_in, c_out, kernel):
        super().__init__()
        self.conv = nn.Conv3d(c_in, c_out, kernel, padding=kernel // 2)
        self.bn = nn.BatchNorm3d(c_out)
        self.act = nn.PReLU()

    def forward(self, x):
        return self.act(self.bn(self.conv(x)))


class MultiScaleAttentionFusion(nn.Module):
    """Kernels 1/3/5/7 at quarter width per branch -> 1-channel sigmoid gate."""

    KERNELS = (1, 3, 5, 7)

    def __init__(self, seg_channels: int, atlas_channels=None):
        super().__init__()
        if seg_channels % 4:
            raise ValueError(f"seg channels {seg_channels} not divisible by 4")
        self.seg_paths = nn.ModuleList(
            ConvBNAct(seg_channels, seg_channels // 4, k) for k in self.KERNELS
        )
        merged = seg_channels
        if atlas_channels is not None:
            if atlas_channels % 4:
                raise ValueError(f"atlas channels {atlas_channels} not divisible by 4")
            self.atlas_paths = nn.ModuleList(
                ConvBNAct(atlas_channels, atlas_channels // 4, k) for k in self.KERNELS
            )
            merged += atlas_channels
        else:
            self.atlas_paths = None
        self.merge = nn.Conv3d(merged, 1, 1)

    def attention(self, f_seg, f_atlas=None):
        parts = [path(f_seg) for path in self.seg_paths]
        if self.atlas_paths is not None:
            if f_atlas is None:
                raise ValueError("fusion block built with a template side needs f_atlas")
            parts += [path(f_atlas) for path in self.atlas_paths]
        return torch.sigmoid(self.merge(torch.cat(parts, dim=1)))

    def forward(self, f_seg, f_atlas=None):
        return f_seg * self.attention(f_seg, f_atlas)


class SpatialAttentionFusion(nn.Module):
    """Single 3x3x3 conv per branch at full width -> 1-channel sigmoid gate."""

    def __init__(self, seg_channels: int, atlas_channels=None):
        super().__init__()
        self.seg_path = ConvBNAct(seg_channels, seg_channels, 3)
        merged = seg_channels
        if atlas_channels is not None:
            self.atlas_path = ConvBNAct(atlas_channels, atlas_channels, 3)
            merged += atlas_channels
        else:
            self.atlas_path = None
        self.merge = nn.Conv3d(merged, 1, 1)

    def attention(self, f_seg, f_atlas=None):
        parts = [self.seg_path(f_seg)]
        if self.atlas_path is not None:
            if f_atlas is None:
                raise ValueError("fusion block built with a template side needs f_atlas")
            parts.append(self.atlas_path(f_atlas))
        return torch.sigmoid(self.merge(torch.cat(parts, dim=1)))

    def forward(self, f_seg, f_atlas=None):
        return f_seg * self.attention(f_seg, f_atlas)


class ConcatFusion(nn.Module):
    """Plain concatenation squeezed back to the subject width by a 1x1x1."""

    def __init__(self, seg_channels: int, atlas_channels=None):
        super().__init__()
        self.merge = nn.Conv3d(seg_channels + (atlas_channels or 0), seg_channels, 1)

    def forward(self, f_seg, f_atlas=None):
        if f_atlas is not None:
            f_seg = torch.cat([f_seg, f_atlas], dim=1)
        return self.merge(f_seg)


_FUSION_CLASSES = {
    "msa": MultiScaleAttentionFusion,
    "sa": SpatialAttentionFusion,
    "concat": ConcatFusion,
}


class UNetBranch(nn.Module):
    """Encoder/decoder stack; the walk itself lives in AtlasSegNet."""

    def __init__(self, in_channels: int, base: int, num_stages: int):
        super().__init__()
        self.num_stages = num_stages
        self.stem = DoubleConv(in_channels, base)
        self.downs = nn.ModuleList(
            nn.Conv3d(base * 2**k, base * 2**k, 2, stride=2) for k in range(num_stages)
        )
        self.enc_convs = nn.ModuleList(
            DoubleConv(base * 2**k, base * 2 ** (k + 1)) for k in range(num_stages)
        )
        self.ups = nn.ModuleList(
            nn.ConvTranspose3d(base * 2 ** (num_stages - k), base * 2 ** (num_stages - 1 - k), 2, stride=2)
            for k in range(num_stages)
        )
        self.dec_convs = nn.ModuleList(
            DoubleConv(base * 2 ** (num_stages - k), base * 2 ** (num_stages - 1 - k))
            for k in range(num_stages)
        )


class AtlasSegNet(nn.Module):
    def __init__(self, cfg: ArchitectureConfig):
        super().__init__()
        self.cfg = cfg
        ns = cfg.num_stages
        self.seg = UNetBranch(1, cfg.base_channels_seg, ns)
        self.atlas = UNetBranch(2, cfg.base_channels_atlas, ns) if cfg.atlas_branch else None
        if cfg.fusion_kind != "none":
            seg_ch = cfg.stage_channels(cfg.base_channels_seg)
            atl_ch = cfg.stage_channels(cfg.base_channels_atlas)
            cls = _FUSION_CLASSES[cfg.fusion_kind]
            self.fusions = nn.ModuleDict(
                {
                    pos: cls(seg_ch[pos], atl_ch[pos] if cfg.atlas_branch else None)
                    for pos in cfg.active_positions
                }
            )
        else:
            self.fusions = nn.ModuleDict()
        self.head = nn.Conv3d(cfg.base_channels_seg, cfg.out_classes, 1)

    @property
    def needs_atlas(self) -> bool:
        """True when a forward pass must be given template image + labels."""
        return self.cfg.atlas_branch and len(self.fusions) > 0

    def _walk(self, branch: UNetBranch, x, fuse, capture=None, tag=""):
        ns = branch.num_stages
        h = branch.stem(x)
        h = fuse("E1", h)
        skips = [h]
        for k in range(ns):
            h = branch.enc_convs[k](branch.downs[k](h))
            pos = f"E{k + 2}" if k + 1 < ns else "B"
            h = fuse(pos, h)
            if k + 1 < ns:
                skips.append(h)
        for k in range(ns):
            up = branch.ups[k](h)
            h = branch.dec_convs[k](torch.cat([up, skips[ns - 1 - k]], dim=1))
            h = fuse(f"D{ns - k}", h)
        if capture is not None:
            pass  # capture happens inside fuse wrappers
        return h

    def forward(self, image, atlas_image=None, atlas_labels=None, capture=None):
        """image (B,1,*), atlas channels likewise; returns softmax probs.

        Pass a dict as `capture` to receive the per-site feature maps,
        keyed (branch, position), detached.
        """
        atlas_feats = {}
        if self.needs_atlas:
            if atlas_image is None or atlas_labels is None:
                raise ValueError("this configuration needs template image and labels")

            def atlas_fuse(pos, h):
                atlas_feats[pos] = h
                if capture is not None:
                    capture[("atlas", pos)] = h.detach()
                return h

            self._walk(self.atlas, torch.cat([atlas_image, atlas_labels], dim=1), atlas_fuse)

        def seg_fuse(pos, h):
            if pos in self.fusions:
                h = self.fusions[pos](h, atlas_feats.get(pos))
            if capture is not None:
                capture[("seg", pos)] = h.detach()
            return h

        out = self._walk(self.seg, image, seg_fuse)
        return torch.softmax(self.head(out), dim=1)


def init_parameters(model: nn.Module, seed: int) -> None:
    """Deterministic He-style init; BN reset; PReLU slope 0.25."""
    torch.manual_seed(seed)
    for _, m in model.named_modules():
        if isinstance(m, (nn.Conv3d, nn.ConvTranspose3d)):
            nn.init.kaiming_normal_(m.weight, a=0.25, mode="fan_in", nonlinearity="leaky_relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.BatchNorm3d):
            m.reset_running_stats()
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)
        elif isinstance(m, nn.PReLU):
            nn.init.constant_(m.weight, 0.25)


def build_model(cfg: ArchitectureConfig, seed: int = 0) -> AtlasSegNet:
    model = AtlasSegNet(cfg)
    init_parameters(model, seed)
    return model


def parameter_count(cfg: ArchitectureConfig) -> int:
    return sum(p.numel() for p in AtlasSegNet(cfg).parameters())


# --- checkpoint container ---------------------------------------------------

CHECKPOINT_MAGIC = b"ASCK"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    """Checkpoint unreadable or inconsistent with the declared config."""


def save_checkpoint(model: AtlasSegNet, path) -> None:
    """Magic, version, JSON header, then float32 payloads in sorted key order.

    Integer buffers (BN batch counters) are stored as float32 too; they are
    exact well past any realistic step count.
    """
    state = model.state_dict()
    keys = sorted(state.keys())
    header = {
        "config": asdict(model.cfg),
        "tensors": [{"key": k, "shape": list(state[k].shape)} for k in keys],
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<HI", CHECKPOINT_VERSION, len(header_bytes)))
        fh.write(header_bytes)
        for k in keys:
            arr = state[k].detach().to(torch.float32).numpy().astype("<f4")
            fh.write(arr.tobytes())


def load_checkpoint(path) -> tuple[AtlasSegNet, ArchitectureConfig]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad checkpoint magic {blob[:4]!r}")
    version, header_len = struct.unpack_from("<HI", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    header_end = 10 + header_len
    try:
        header = json.loads(blob[10:header_end].decode("utf-8"))
        cfg_dict = dict(header["config"])
        cfg_dict["fusion_positions"] = tuple(cfg_dict["fusion_positions"])
        cfg = ArchitectureConfig(**cfg_dict)
        tensor_table = header["tensors"]
    except (KeyError, TypeError, ValueError, json.JSONDecodeError) as e:
        raise CheckpointError(f"malformed checkpoint header: {e}") from e

    model = AtlasSegNet(cfg)
    state = model.state_dict()
    expected_keys = sorted(state.keys())
    got_keys = [t["key"] for t in tensor_table]
    if got_keys != expected_keys:
        raise CheckpointError(
            "checkpoint tensor table does not match the declared architecture"
        )
    offset = header_end
    new_state = {}
    for t in tensor_table:
        shape = tuple(t["shape"])
        want = state[t["key"]]
        if shape != tuple(want.shape):
            raise CheckpointError(
                f"tensor {t['key']} has shape {shape}, expected {tuple(want.shape)}"
            )
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        end = offset + 4 * n
        if end > len(blob):
            raise CheckpointError("checkpoint payload truncated")
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=offset).reshape(shape)
        new_state[t["key"]] = torch.from_numpy(arr.copy()).to(want.dtype)
        offset = end
    if offset != len(blob):
        raise CheckpointError("checkpoint has trailing bytes")
    model.load_state_dict(new_state)
    return model, cfg
