"""Dual-branch patch transformer with per-layer CLS fusion and four heads.

Two parallel pre-norm ViT branches (RGB and segmentation) exchange their CLS
tokens after every encoder block, then the final CLS pair is attention-weighted
and concatenated before the coarse/middle/fine/scene classifier heads. The
single-branch configuration duplicates its CLS so the head shapes match.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

CKPT_MAGIC = b"TLOCKP1\x00"


class ModelError(ValueError):
    pass


@dataclass
class ModelConfig:
    image_size: int = 32
    patch_size: int = 4
    embed_dim: int = 64
    depth: int = 4
    heads: int = 4
    ffn_dim: int = 256
    branches: str = "dual"  # "dual" | "rgb-only"
    mff: bool = True
    attentive_fusion: bool = True
    scene_head: bool = True
    seg_encoding: str = "embed"  # "embed" | "onehot"
    seg_channels: int = 3
    n_seg_classes: int = 6
    k_coarse: int = 4
    k_middle: int = 8
    k_fine: int = 16
    k_scene: int = 4
    head_hidden_middle: int = 0  # 0 -> 4 * k_middle
    head_hidden_fine: int = 0

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ModelError("image_size must be divisible by patch_size")
        if self.embed_dim % self.heads:
            raise ModelError("embed_dim must be divisible by heads")
        if self.branches not in ("dual", "rgb-only"):
            raise ModelError(f"unknown branches mode {self.branches!r}")
        if self.seg_encoding not in ("embed", "onehot"):
            raise ModelError(f"unknown seg_encoding {self.seg_encoding!r}")
        if self.seg_encoding == "onehot":
            self.seg_channels = self.n_seg_classes
        if self.head_hidden_middle == 0:
            self.head_hidden_middle = 4 * self.k_middle
        if self.head_hidden_fine == 0:
            self.head_hidden_fine = 4 * self.k_fine

    @property
    def n_patches(self) -> int:
        side = self.image_size // self.patch_size
        return side * side

    @property
    def dual(self) -> bool:
        return self.branches == "dual"


def _branch_names(cfg: ModelConfig):
    return ("rgb", "seg") if cfg.dual else ("rgb",)


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Zero-mean Gaussian std 0.02 everywhere except: LN gains 1, biases 0,
    MFF f/g initialized to the identity map."""
    c = cfg.embed_dim
    p = cfg.patch_size
    std = 0.02

    def gauss(*shape):
        return rng.normal(0.0, std, size=shape)

    params: dict[str, np.ndarray] = {}

    def affine(name, din, dout):
        params[f"{name}.w"] = gauss(din, dout)
        params[f"{name}.b"] = np.zeros(dout)

    def ln(name):
        params[f"{name}.g"] = np.ones(c)
        params[f"{name}.b"] = np.zeros(c)

    for br in _branch_names(cfg):
        in_ch = 3 if br == "rgb" else cfg.seg_channels
        if br == "seg" and cfg.seg_encoding == "embed":
            params["seg.class_embed"] = gauss(cfg.n_seg_classes, cfg.seg_channels)
        affine(f"{br}.patch", in_ch * p * p, c)
        params[f"{br}.cls"] = gauss(1, 1, c)
        params[f"{br}.pos"] = gauss(1, 1 + cfg.n_patches, c)
        for k in range(cfg.depth):
            ln(f"{br}.blocks.{k}.ln1")
            affine(f"{br}.blocks.{k}.qkv", c, 3 * c)
            affine(f"{br}.blocks.{k}.proj", c, c)
            ln(f"{br}.blocks.{k}.ln2")
            affine(f"{br}.blocks.{k}.fc1", c, cfg.ffn_dim)
            affine(f"{br}.blocks.{k}.fc2", cfg.ffn_dim, c)
        ln(f"{br}.ln_final")

    if cfg.dual and cfg.mff:
        for k in range(cfg.depth):
            for fn in ("f", "g"):
                params[f"mff.{k}.{fn}.w"] = np.eye(c)
                params[f"mff.{k}.{fn}.b"] = np.zeros(c)

    if cfg.dual and cfg.attentive_fusion:
        affine("fuse.score1", c, 8)
        affine("fuse.score2", 8, 1)

    affine("head.coarse", 2 * c, cfg.k_coarse)
    affine("head.middle1", 2 * c, cfg.head_hidden_middle)
    affine("head.middle2", cfg.head_hidden_middle, cfg.k_middle)
    affine("head.fine1", 2 * c, cfg.head_hidden_fine)
    affine("head.fine2", cfg.head_hidden_fine, cfg.k_fine)
    if cfg.scene_head:
        affine("head.scene", 2 * c, cfg.k_scene)
    return params


class DualBranchModel:
    def __init__(self, cfg: ModelConfig, params: dict[str, np.ndarray] | None = None,
                 rng: np.random.Generator | None = None):
        self.cfg = cfg
        if params is None:
            params = init_params(cfg, rng if rng is not None else np.random.default_rng(0))
        self.params: dict[str, Tensor] = {
            k: Tensor(v, requires_grad=True) for k, v in params.items()
        }
        self.last_attention: dict[str, list[np.ndarray]] | None = None
        self.last_fusion_weights: np.ndarray | None = None

    # parameter helpers -----------------------------------------------------

    def p(self, name: str) -> Tensor:
        return self.params[name]

    def zero_grad(self):
        for t in self.params.values():
            t.zero_grad()

    def _affine(self, name: str, x: Tensor) -> Tensor:
        return x @ self.p(f"{name}.w") + self.p(f"{name}.b")

    def _ln(self, name: str, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.p(f"{name}.g"), self.p(f"{name}.b"))

    # forward pieces --------------------------------------------------------

    def _patchify(self, x: Tensor) -> Tensor:
        """[B, ch, H, W] -> [B, N, ch*P*P] by non-overlapping P x P patches."""
        b, ch, h, w = x.shape
        p = self.cfg.patch_size
        x = x.reshape(b, ch, h // p, p, w // p, p)
        x = x.transpose((0, 2, 4, 1, 3, 5))
        return x.reshape(b, (h // p) * (w // p), ch * p * p)

    def patch_embed(self, branch: str, image: Tensor) -> Tensor:
        b, ch, h, w = image.shape
        expect_ch = 3 if branch == "rgb" else self.cfg.seg_channels
        if (ch, h, w) != (expect_ch, self.cfg.image_size, self.cfg.image_size):
            raise ModelError(
                f"{branch} input shape {image.shape} does not match config "
                f"({expect_ch}x{self.cfg.image_size}x{self.cfg.image_size})"
            )
        tokens = self._affine(f"{branch}.patch", self._patchify(image))
        cls = self.p(f"{branch}.cls")
        cls = ad.concat([cls] * b, axis=0) if b > 1 else cls
        x = ad.concat([cls, tokens], axis=1)
        return x + self.p(f"{branch}.pos")

    def encoder_block(self, branch: str, k: int, x: Tensor,
                      record: list[np.ndarray] | None = None) -> Tensor:
        cfg = self.cfg
        b, t, c = x.shape
        nh, dh = cfg.heads, cfg.embed_dim // cfg.heads
        name = f"{branch}.blocks.{k}"

        h = self._ln(f"{name}.ln1", x)
        qkv = self._affine(f"{name}.qkv", h)  # [B, T, 3C]
        qkv = qkv.reshape(b, t, 3, nh, dh).transpose((2, 0, 3, 1, 4))
        q, kk, v = qkv[0], qkv[1], qkv[2]  # [B, nh, T, dh]
        att = ad.softmax(ad.scale(q @ kk.transpose((0, 1, 3, 2)), 1.0 / np.sqrt(dh)), axis=-1)
        if record is not None:
            record.append(att.data.copy())
        ctx = (att @ v).transpose((0, 2, 1, 3)).reshape(b, t, c)
        x = x + self._affine(f"{name}.proj", ctx)

        h = self._ln(f"{name}.ln2", x)
        h = ad.gelu(self._affine(f"{name}.fc1", h))
        return x + self._affine(f"{name}.fc2", h)

    def mff_exchange(self, k: int, states: dict[str, Tensor]) -> dict[str, Tensor]:
        """Replace both branches' CLS tokens with g(sum_j f(cls_j))."""
        if not (self.cfg.dual and self.cfg.mff):
            raise ModelError("mff_exchange requires dual-branch mode with MFF enabled")
        summed = None
        for br, x in states.items():
            proj = self._affine(f"mff.{k}.f", x[:, 0:1, :])
            summed = proj if summed is None else summed + proj
        fused = self._affine(f"mff.{k}.g", summed)
        return {
            br: ad.concat([fused, x[:, 1:, :]], axis=1) for br, x in states.items()
        }

    def attentive_fuse(self, cls_rgb: Tensor, cls_seg: Tensor) -> tuple[Tensor, np.ndarray]:
        """Softmax-weighted residual scaling and concatenation of the CLS pair."""
        scores = []
        for cls in (cls_rgb, cls_seg):
            s = self._affine("fuse.score2", ad.gelu(self._affine("fuse.score1", cls)))
            scores.append(s)  # [B, 1]
        w = ad.softmax(ad.concat(scores, axis=-1), axis=-1)  # [B, 2]
        f_rgb = cls_rgb * (w[:, 0:1] + 1.0)
        f_seg = cls_seg * (w[:, 1:2] + 1.0)
        return ad.concat([f_rgb, f_seg], axis=-1), w.data.copy()

    def encode_seg(self, seg_ids: np.ndarray) -> Tensor:
        """Integer class map [B, H, W] -> channel image [B, ch, H, W]."""
        if self.cfg.seg_encoding == "onehot":
            oh = np.eye(self.cfg.seg_channels)[seg_ids]  # [B, H, W, ch]
            return Tensor(np.moveaxis(oh, -1, 1))
        emb = ad.embedding(self.p("seg.class_embed"), seg_ids)  # [B, H, W, ch]
        return emb.transpose((0, 3, 1, 2))

    # full forward ----------------------------------------------------------

    def forward(self, rgb: np.ndarray, seg: np.ndarray | None = None,
                record_attention: bool = False) -> dict[str, Tensor]:
        cfg = self.cfg
        if rgb.ndim == 3:
            rgb = rgb[None]
            seg = seg[None] if seg is not None else None
        if cfg.dual and seg is None:
            raise ModelError("dual-branch model requires a segmentation input")
        if not cfg.dual and seg is not None:
            raise ModelError("rgb-only model does not accept a segmentation input")

        attn: dict[str, list[np.ndarray]] = {br: [] for br in _branch_names(cfg)}
        states: dict[str, Tensor] = {"rgb": self.patch_embed("rgb", Tensor(rgb))}
        if cfg.dual:
            states["seg"] = self.patch_embed("seg", self.encode_seg(seg))

        for k in range(cfg.depth):
            states = {
                br: self.encoder_block(br, k, x, attn[br] if record_attention else None)
                for br, x in states.items()
            }
            if cfg.dual and cfg.mff:
                states = self.mff_exchange(k, states)

        w_mm = None
        if cfg.dual:
            cls_rgb = self._ln("rgb.ln_final", states["rgb"][:, 0, :])
            cls_seg = self._ln("seg.ln_final", states["seg"][:, 0, :])
            if cfg.attentive_fusion:
                f_mm, w_mm = self.attentive_fuse(cls_rgb, cls_seg)
            else:
                f_mm = ad.concat([cls_rgb, cls_seg], axis=-1)
        else:
            cls = self._ln("rgb.ln_final", states["rgb"][:, 0, :])
            f_mm = ad.concat([cls, cls], axis=-1)

        logits = {
            "coarse": self._affine("head.coarse", f_mm),
            "middle": self._affine("head.middle2", ad.gelu(self._affine("head.middle1", f_mm))),
            "fine": self._affine("head.fine2", ad.gelu(self._affine("head.fine1", f_mm))),
        }
        if cfg.scene_head:
            logits["scene"] = self._affine("head.scene", f_mm)

        self.last_attention = attn if record_attention else None
        self.last_fusion_weights = w_mm
        return logits

    def attention_export(self) -> dict[str, list[np.ndarray]]:
        """Per-layer [B, heads, 1+N, 1+N] attention maps from the last forward."""
        if self.last_attention is None:
            raise ModelError("attention recording was not enabled on the last forward")
        return self.last_attention


# checkpoint io -------------------------------------------------------------


def _config_text(cfg: ModelConfig) -> str:
    fields = (
        "image_size patch_size embed_dim depth heads ffn_dim branches mff "
        "attentive_fusion scene_head seg_encoding seg_channels n_seg_classes "
        "k_coarse k_middle k_fine k_scene head_hidden_middle head_hidden_fine"
    ).split()
    return "\n".join(f"{f}={getattr(cfg, f)}" for f in fields) + "\n"


def _config_from_text(text: str) -> ModelConfig:
    kv = {}
    for line in text.splitlines():
        if not line:
            continue
        key, _, val = line.partition("=")
        kv[key] = val
    bools = {"mff", "attentive_fusion", "scene_head"}
    strs = {"branches", "seg_encoding"}
    kwargs = {}
    for k, v in kv.items():
        if k in bools:
            kwargs[k] = v == "True"
        elif k in strs:
            kwargs[k] = v
        else:
            kwargs[k] = int(v)
    return ModelConfig(**kwargs)


def save_checkpoint(model: DualBranchModel, path: str) -> None:
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    cfg_bytes = _config_text(model.cfg).encode("utf-8")
    buf.write(struct.pack("<I", len(cfg_bytes)))
    buf.write(cfg_bytes)
    names = list(model.params)
    buf.write(struct.pack("<I", len(names)))
    for name in names:
        data = model.params[name].data
        nb = name.encode("utf-8")
        buf.write(struct.pack("<I", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<I", data.ndim))
        buf.write(struct.pack(f"<{data.ndim}I", *data.shape))
    for name in names:
        buf.write(model.params[name].data.astype("<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path: str) -> DualBranchModel:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != CKPT_MAGIC:
        raise ModelError(f"{path}: bad checkpoint magic")
    off = 8
    (cfg_len,) = struct.unpack_from("<I", raw, off)
    off += 4
    cfg = _config_from_text(raw[off:off + cfg_len].decode("utf-8"))
    off += cfg_len
    (count,) = struct.unpack_from("<I", raw, off)
    off += 4
    manifest = []
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", raw, off)
        off += 4
        name = raw[off:off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<I", raw, off)
        off += 4
        shape = struct.unpack_from(f"<{rank}I", raw, off)
        off += 4 * rank
        manifest.append((name, shape))
    params = {}
    for name, shape in manifest:
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype="<f8", count=n, offset=off).reshape(shape)
        params[name] = arr.copy()
        off += 8 * n
    return DualBranchModel(cfg, params=params)


def clone_config(cfg: ModelConfig, **overrides) -> ModelConfig:
    return replace(cfg, **overrides)
