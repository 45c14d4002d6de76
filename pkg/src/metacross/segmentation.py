"""3D segmentation with a metadata cross-attention bottleneck.

Each modality owns a small conv encoder stem. Stems of missing modalities
are gated off (skipped entirely), the survivors are summed, tokenized,
enriched under the availability mask, and decoded back to voxel logits.
With gating disabled the zero-filled channels flow through, which isolates
the attention-level protection for ablation.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field as dc_field

import numpy as np

from . import tensor as T
from .attention import AttentionConfig, CrossAttentionBlock, PatchTokenizer, detokenize
from .errors import CheckpointError, ConfigError, NumericError, ShapeError
from .metadata import MetadataEncoder, ModalityMask, N_MODALITIES
from .nn import Adam, Conv3d, Module, clip_grad_norm
from .tensor import Tape, Tensor

CHECKPOINT_MAGIC = b"MCKP"
CHECKPOINT_VERSION = 1


@dataclass
class SegConfig:
    extent: int = 32
    attention: AttentionConfig = dc_field(default_factory=lambda: AttentionConfig(embed_dim=32))
    encoder_channels: tuple[int, ...] = (8,)
    decoder_channels: tuple[int, ...] = (16, 8, 8)
    n_seg_classes: int = 2
    deep_supervision: bool = True
    ds_decay: float = 0.4
    ds_decay_epoch_fraction: float = 0.5
    gate_missing: bool = True
    direct_patch: bool = False
    metadata_embed_dim: int = 16

    def __post_init__(self):
        self.encoder_channels = tuple(int(c) for c in self.encoder_channels)
        self.decoder_channels = tuple(int(c) for c in self.decoder_channels)
        if not self.decoder_channels:
            raise ConfigError("decoder needs at least one stage")
        if not self.direct_patch and not self.encoder_channels:
            raise ConfigError("encoder channel list is empty; set direct_patch for raw patch projection")
        if any(c < 1 for c in self.encoder_channels + self.decoder_channels):
            raise ConfigError("channel counts must be positive")
        if not 0.0 < self.ds_decay <= 1.0:
            raise ConfigError(f"ds_decay must lie in (0, 1], got {self.ds_decay}")
        if not 0.0 <= self.ds_decay_epoch_fraction <= 1.0:
            raise ConfigError(f"ds_decay_epoch_fraction must lie in [0, 1], got {self.ds_decay_epoch_fraction}")
        if self.n_seg_classes < 2:
            raise ConfigError(f"need at least two segmentation classes, got {self.n_seg_classes}")
        if self.metadata_embed_dim < 1:
            raise ConfigError("metadata_embed_dim must be positive")
        down = self.total_downsample
        if down & (down - 1):
            raise ConfigError(f"total downsample factor {down} must be a power of two")
        if self.extent % down:
            raise ConfigError(f"extent {self.extent} not divisible by total downsample {down}")
        needed = down.bit_length() - 1
        if len(self.decoder_channels) != needed:
            raise ConfigError(
                f"decoder must undo a x{down} downsample: expected {needed} stages, got {len(self.decoder_channels)}")

    @property
    def n_encoder_stages(self) -> int:
        return 0 if self.direct_patch else len(self.encoder_channels)

    @property
    def total_downsample(self) -> int:
        return (2 ** self.n_encoder_stages) * self.attention.patch_size

    @property
    def encoded_extent(self) -> int:
        return self.extent // (2 ** self.n_encoder_stages)

    @property
    def grid_extent(self) -> int:
        return self.extent // self.total_downsample

    @property
    def n_tokens(self) -> int:
        return self.grid_extent ** 3

    @property
    def skip_stage(self) -> int | None:
        """Decoder stage whose post-upsample extent matches the fused stem
        features, so they can be concatenated as a skip connection."""
        if self.direct_patch:
            return None
        ext = self.grid_extent
        for i in range(len(self.decoder_channels)):
            ext *= 2
            if ext == self.encoded_extent:
                return i
        return None


@dataclass
class SegBatch:
    """One volume: four channels (zero-filled where missing), mask, labels."""

    volumes: Tensor  # [4, d, h, w]
    mask: ModalityMask
    target: np.ndarray  # [d, h, w] integer labels

    def __post_init__(self):
        if self.volumes.ndim != 4 or self.volumes.shape[0] != N_MODALITIES:
            raise ShapeError(f"volumes must be [{N_MODALITIES}, d, h, w], got {self.volumes.shape}")
        self.target = np.asarray(self.target)
        if self.target.shape != self.volumes.shape[1:]:
            raise ShapeError(f"target {self.target.shape} does not match volume extent {self.volumes.shape[1:]}")
        if not np.issubdtype(self.target.dtype, np.integer):
            raise ShapeError(f"target labels must be integers, got dtype {self.target.dtype}")
        if self.target.min() < 0:
            raise ShapeError("target labels must be non-negative")
        if not np.all(np.isfinite(self.volumes.data)):
            raise NumericError("volumes contain non-finite values")


class SegModel(Module):
    def __init__(self, cfg: SegConfig, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.cfg = cfg
        att = cfg.attention
        if cfg.direct_patch:
            self.stems = []
            token_in = N_MODALITIES
        else:
            self.stems = [self._build_stem(cfg, rng) for _ in range(N_MODALITIES)]
            token_in = cfg.encoder_channels[-1]
        e = cfg.encoded_extent
        self.tokenizer = PatchTokenizer(token_in, (e, e, e), att, rng=rng)
        self.meta_encoder = MetadataEncoder(cfg.metadata_embed_dim, att.embed_dim, rng=rng)
        self.blocks = [CrossAttentionBlock(att, rng=rng) for _ in range(att.n_layers)]
        decoder = []
        prev = att.embed_dim
        for i, ch in enumerate(cfg.decoder_channels):
            in_ch = prev + (cfg.encoder_channels[-1] if i == cfg.skip_stage else 0)
            decoder.append(Conv3d(in_ch, ch, kernel=3, stride=1, padding=1, rng=rng))
            prev = ch
        self.decoder = decoder
        if cfg.deep_supervision:
            self.aux_heads = [Conv3d(ch, cfg.n_seg_classes, kernel=1, rng=rng)
                              for ch in cfg.decoder_channels[:-1]]
        else:
            self.aux_heads = []
        self.head = Conv3d(prev, cfg.n_seg_classes, kernel=1, rng=rng)

    @staticmethod
    def _build_stem(cfg: SegConfig, rng: np.random.Generator) -> list[Conv3d]:
        stem = []
        prev = 1
        for ch in cfg.encoder_channels:
            stem.append(Conv3d(prev, ch, kernel=3, stride=2, padding=1, rng=rng))
            prev = ch
        return stem

    def _encode(self, batch: SegBatch) -> Tensor:
        """Fuse per-modality features; missing stems never execute when gated."""
        cfg = self.cfg
        volumes = batch.volumes
        if cfg.direct_patch:
            if cfg.gate_missing:
                gate = Tensor(np.where(np.array(batch.mask.available), 1.0, 0.0).reshape(N_MODALITIES, 1, 1, 1))
                return T.mul(volumes, gate)
            return volumes
        use = [i for i in range(N_MODALITIES) if batch.mask.available[i]] if cfg.gate_missing else list(range(N_MODALITIES))
        e = cfg.extent
        # Sum, not mean: a subset's features are then a partial sum of the
        # full set's, so adding a modality adds evidence instead of diluting
        # strong channels with weak ones.  Downstream layer norm bounds scale.
        fused = None
        for m in use:
            x = T.reshape(T.narrow(volumes, 0, m, 1), (1, 1, e, e, e))
            for conv in self.stems[m]:
                x = T.relu(conv(x))
            fused = x if fused is None else T.add(fused, x)
        ee = cfg.encoded_extent
        return T.reshape(fused, (fused.shape[1], ee, ee, ee))

    def forward(self, batch: SegBatch) -> tuple[Tensor, list[Tensor]]:
        cfg = self.cfg
        if batch.volumes.shape[1:] != (cfg.extent,) * 3:
            raise ShapeError(f"model built for extent {cfg.extent}, got volume {batch.volumes.shape}")
        if batch.target.max() >= cfg.n_seg_classes:
            raise ShapeError(f"target label {batch.target.max()} outside [0, {cfg.n_seg_classes})")

        fused = self._encode(batch)
        grid = self.tokenizer(fused)
        keys, values = self.meta_encoder.tokens()
        mask = batch.mask.resize(grid.n_tokens)
        for block in self.blocks:
            grid = block(grid, keys, values, mask)
        x = detokenize(grid)
        g = cfg.grid_extent
        x = T.reshape(x, (1, cfg.attention.embed_dim, g, g, g))

        aux: list[Tensor] = []
        last = len(self.decoder) - 1
        skip = cfg.skip_stage
        for i, conv in enumerate(self.decoder):
            x = T.upsample3d_nearest(x, 2)
            if i == skip:
                x = T.concat([x, T.reshape(fused, (1,) + fused.shape)], axis=1)
            x = T.relu(conv(x))
            if cfg.deep_supervision and i < last:
                a = self.aux_heads[i](x)
                ext = a.shape[2]
                aux.append(T.reshape(a, (cfg.n_seg_classes, ext, ext, ext)))
        logits = self.head(x)
        return T.reshape(logits, (cfg.n_seg_classes,) + (cfg.extent,) * 3), aux

    def cost_rows(self, input_shape: tuple[int, ...] | None = None, name: str = "seg"):
        from .complexity import LayerCost

        cfg = self.cfg
        rows: list[LayerCost] = []
        e = cfg.extent
        if not cfg.direct_patch:
            for m, stem in enumerate(self.stems):
                ext = e
                for j, conv in enumerate(stem):
                    rows.extend(conv.cost_rows((1, conv.in_ch, ext, ext, ext), name=f"{name}.stem{m}.{j}"))
                    ext = conv.output_extent(ext)
        rows.extend(self.tokenizer.cost_rows(name=f"{name}.tokenizer"))
        n = cfg.n_tokens
        rows.append(LayerCost(f"{name}.metadata_encoder", "encoder",
                              self.meta_encoder.n_parameters(),
                              2 * (2 * N_MODALITIES * cfg.metadata_embed_dim * cfg.attention.embed_dim
                                   + N_MODALITIES * cfg.attention.embed_dim)))
        for i, block in enumerate(self.blocks):
            rows.extend(block.cost_rows(n, name=f"{name}.block{i}"))
        ext = cfg.grid_extent
        for i, conv in enumerate(self.decoder):
            ext *= 2
            rows.extend(conv.cost_rows((1, conv.in_ch, ext, ext, ext), name=f"{name}.decoder{i}"))
        for i, head in enumerate(self.aux_heads):
            ext_i = cfg.grid_extent * (2 ** (i + 1))
            rows.extend(head.cost_rows((1, head.in_ch, ext_i, ext_i, ext_i), name=f"{name}.aux{i}"))
        rows.extend(self.head.cost_rows((1, self.head.in_ch, e, e, e), name=f"{name}.head"))
        return rows


# ---------------------------------------------------------------------------
# metrics and losses


def dice_score(pred, target, class_id: int) -> float:
    """Hard overlap 2|P & T| / (|P| + |T|); defined as 1.0 when both empty."""
    p = np.asarray(pred)
    t = np.asarray(target)
    if p.shape != t.shape:
        raise ShapeError(f"dice: prediction {p.shape} and target {t.shape} differ")
    pm = p == class_id
    tm = t == class_id
    denom = int(pm.sum()) + int(tm.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((pm & tm).sum()) / denom


def _one_hot(target: np.ndarray, n_classes: int) -> np.ndarray:
    eye = np.eye(n_classes, dtype=np.float64)
    return np.moveaxis(eye[target], -1, 0)  # [C, *spatial]


def cross_entropy_mean(logits: Tensor, target: np.ndarray) -> Tensor:
    """Mean per-position cross entropy; class axis is the leading one."""
    n_classes = logits.shape[0]
    onehot = Tensor(_one_hot(target, n_classes))
    log_probs = T.log_softmax(logits, axis=0)
    n_positions = int(np.prod(target.shape))
    return T.scale(T.sum_(T.mul(onehot, log_probs)), -1.0 / n_positions)


def soft_dice_mean(logits: Tensor, target: np.ndarray, smooth: float = 1e-7) -> Tensor:
    """Mean soft Dice over classes, on softmax probabilities."""
    n_classes = logits.shape[0]
    onehot = _one_hot(target, n_classes)
    probs = T.exp(T.log_softmax(logits, axis=0))
    total = None
    for c in range(n_classes):
        p_c = T.narrow(probs, 0, c, 1)
        t_c = Tensor(onehot[c][None])
        num = T.add(T.scale(T.sum_(T.mul(p_c, t_c)), 2.0), Tensor(smooth))
        den = T.add(T.add(T.sum_(p_c), Tensor(float(onehot[c].sum()))), Tensor(smooth))
        d = T.div(num, den)
        total = d if total is None else T.add(total, d)
    return T.scale(total, 1.0 / n_classes)


def combined_loss(logits: Tensor, target: np.ndarray, aux_logits: list[Tensor] = (),
                  *, epoch: int = 0, total_epochs: int = 1, cfg: SegConfig) -> Tensor:
    """Cross entropy plus (1 - soft Dice), with decaying auxiliary terms.

    Auxiliary heads compare against nearest-subsampled targets and carry
    weight 1.0 until ``ds_decay_epoch_fraction`` of training has elapsed,
    then exactly ``ds_decay``.
    """
    loss = T.add(cross_entropy_mean(logits, target),
                 T.sub(Tensor(1.0), soft_dice_mean(logits, target)))
    if not aux_logits:
        return loss
    progress = epoch / total_epochs if total_epochs > 0 else 1.0
    weight = 1.0 if progress < cfg.ds_decay_epoch_fraction else cfg.ds_decay
    full = target.shape[0]
    for a in aux_logits:
        f = full // a.shape[1]
        small = target[::f, ::f, ::f]
        term = T.add(cross_entropy_mean(a, small), T.sub(Tensor(1.0), soft_dice_mean(a, small)))
        loss = T.add(loss, T.scale(term, weight))
    return loss


def train_step(model: SegModel, batch: SegBatch, optimizer: Adam,
               lr: float = 2e-4, weight_decay: float = 1e-4, clip: float = 1.0,
               *, epoch: int = 0, total_epochs: int = 1) -> float:
    """One optimization step; returns the loss value before the update."""
    named = model.named_parameters()
    model.zero_grad()
    with Tape() as tape:
        logits, aux = model.forward(batch)
        loss = combined_loss(logits, batch.target, aux, epoch=epoch,
                             total_epochs=total_epochs, cfg=model.cfg)
        value = loss.item()
        if not np.isfinite(value):
            culprit = tape.first_nonfinite() or "loss"
            raise NumericError(f"non-finite training loss (first bad op: {culprit})")
        tape.backward(loss)
    clip_grad_norm([p for _, p in named], clip)
    optimizer.step(named, lr, weight_decay)
    return value


def predict_labels(model: SegModel, batch: SegBatch) -> np.ndarray:
    """Arg-max segmentation labels, computed without recording a tape."""
    logits, _ = model.forward(batch)
    return np.argmax(logits.data, axis=0)


# ---------------------------------------------------------------------------
# checkpoint container: magic, version byte, then (name, shape, f64 LE data)


def save_checkpoint(model: Module, path) -> None:
    entries = model.named_parameters()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<B", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(entries)))
        for name, p in entries:
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", p.ndim))
            fh.write(struct.pack(f"<{p.ndim}I", *p.shape))
            fh.write(p.data.astype("<f8").tobytes())


def load_checkpoint(model: Module, path) -> None:
    try:
        blob = open(path, "rb").read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    view = memoryview(blob)
    off = 0

    def take(n: int) -> memoryview:
        nonlocal off
        if off + n > len(view):
            raise CheckpointError(f"checkpoint {path} truncated at byte {off}")
        chunk = view[off:off + n]
        off += n
        return chunk

    if bytes(take(4)) != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path} is not a parameter checkpoint (bad magic)")
    version = struct.unpack("<B", take(1))[0]
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version {version} unsupported (expected {CHECKPOINT_VERSION})")
    count = struct.unpack("<I", take(4))[0]
    loaded: dict[str, np.ndarray] = {}
    for _ in range(count):
        name_len = struct.unpack("<H", take(2))[0]
        name = bytes(take(name_len)).decode("utf-8")
        rank = struct.unpack("<B", take(1))[0]
        shape = struct.unpack(f"<{rank}I", take(4 * rank)) if rank else ()
        size = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(take(8 * size), dtype="<f8").reshape(shape).astype(np.float64)
        loaded[name] = arr
    if off != len(view):
        raise CheckpointError(f"checkpoint {path} has {len(view) - off} trailing bytes")

    params = dict(model.named_parameters())
    missing = sorted(set(params) - set(loaded))
    extra = sorted(set(loaded) - set(params))
    if missing or extra:
        raise CheckpointError(f"checkpoint mismatch: missing {missing[:3]}, unexpected {extra[:3]}")
    for name, p in params.items():
        if loaded[name].shape != p.shape:
            raise CheckpointError(f"parameter {name}: checkpoint shape {loaded[name].shape} != model {p.shape}")
        p.data = loaded[name].copy()
