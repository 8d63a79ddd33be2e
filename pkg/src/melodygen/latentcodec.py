"""Patch-wise autoencoder between mel grids and compressed latent grids.

A T x F mel grid (dB) is cut into non-overlapping r x r patches; each patch
is scaled from [-80, 0] dB to [0, 1], flattened, and mapped by the encoder to
a C-vector, giving a C x T/r x F/r latent. Decoding inverts the mapping and
clamps back to [-80, 0] dB (a zero decoder therefore emits the silence
floor). The encoder is deterministic (no sampling); training minimizes
reconstruction MSE in scaled units plus ``kl_weight * mean(z^2)``, an L2 pull
toward a standard-normal-scale latent that keeps downstream targets
well-scaled.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import smallnet
from .errors import ShapeError, ValidationError
from .signal import DB_FLOOR, MelGrid

_DB_SPAN = -DB_FLOOR  # 80 dB mapped onto one unit


@dataclass
class LatentGrid:
    values: np.ndarray  # (C, T/r, F/r)
    channels: int
    compression: int

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 3 or self.values.shape[0] != self.channels:
            raise ShapeError(
                f"latent must be (C, T/r, F/r) with C={self.channels}, got {self.values.shape}"
            )
        if not np.all(np.isfinite(self.values)):
            raise ValidationError("latent contains non-finite values")


def _check_divisible(shape: tuple[int, int], r: int) -> None:
    t, f = shape
    if t % r or f % r:
        raise ShapeError(f"mel shape {t}x{f} not divisible by compression level {r}")


def _to_patches(values: np.ndarray, r: int) -> np.ndarray:
    """(T, F) -> (T/r * F/r, r*r), row-major over patch grid and patch."""
    t, f = values.shape
    return (
        values.reshape(t // r, r, f // r, r)
        .transpose(0, 2, 1, 3)
        .reshape(t // r * (f // r), r * r)
    )


def _from_patches(patches: np.ndarray, t: int, f: int, r: int) -> np.ndarray:
    return (
        patches.reshape(t // r, f // r, r, r)
        .transpose(0, 2, 1, 3)
        .reshape(t, f)
    )


@dataclass
class LatentCodecModel:
    encoder: smallnet.DenseNet  # r*r -> C
    decoder: smallnet.DenseNet  # C -> r*r
    compression: int
    channels: int
    kl_weight: float
    mel_params: dict = field(default_factory=dict)

    @classmethod
    def create(
        cls,
        compression: int = 4,
        channels: int = 8,
        hidden: int = 32,
        kl_weight: float = 1e-3,
        seed: int = 0,
        mel_params: dict | None = None,
    ) -> "LatentCodecModel":
        rng = smallnet.spawn_rng(seed, 404)
        patch = compression * compression
        return cls(
            encoder=smallnet.DenseNet.create([patch, hidden, channels], "tanh", rng),
            decoder=smallnet.DenseNet.create([channels, hidden, patch], "tanh", rng),
            compression=compression,
            channels=channels,
            kl_weight=kl_weight,
            mel_params=dict(mel_params or {}),
        )

    def parameters(self) -> list[np.ndarray]:
        return self.encoder.parameters() + self.decoder.parameters()

    def parameter_names(self) -> list[str]:
        return (self.encoder.parameter_names("encoder.")
                + self.decoder.parameter_names("decoder."))

    def save(self, path) -> None:
        enc_a, enc_m = smallnet.net_state(self.encoder, "encoder.")
        dec_a, dec_m = smallnet.net_state(self.decoder, "decoder.")
        meta = {
            "compression": self.compression,
            "channels": self.channels,
            "kl_weight": self.kl_weight,
            "mel_params": self.mel_params,
            "nets": {"encoder": enc_m, "decoder": dec_m},
        }
        smallnet.save_checkpoint(path, {**enc_a, **dec_a}, meta)

    @classmethod
    def load(cls, path) -> "LatentCodecModel":
        arrays, meta = smallnet.load_checkpoint(path)
        return cls(
            encoder=smallnet.net_from_state(arrays, meta["nets"]["encoder"], "encoder."),
            decoder=smallnet.net_from_state(arrays, meta["nets"]["decoder"], "decoder."),
            compression=int(meta["compression"]),
            channels=int(meta["channels"]),
            kl_weight=float(meta["kl_weight"]),
            mel_params=dict(meta.get("mel_params", {})),
        )


def _scale_db(values: np.ndarray) -> np.ndarray:
    return (values - DB_FLOOR) / _DB_SPAN


def _unscale_db(scaled: np.ndarray) -> np.ndarray:
    return np.clip(scaled * _DB_SPAN + DB_FLOOR, DB_FLOOR, 0.0)


def encode_mel(model: LatentCodecModel, m: MelGrid) -> LatentGrid:
    r = model.compression
    _check_divisible(m.values.shape, r)
    t, f = m.values.shape
    patches = _to_patches(_scale_db(m.values), r)
    z = model.encoder.forward(patches)  # (cells, C)
    values = z.reshape(t // r, f // r, model.channels).transpose(2, 0, 1)
    return LatentGrid(values, channels=model.channels, compression=r)


def decode_latent(model: LatentCodecModel, z: LatentGrid) -> MelGrid:
    if z.channels != model.channels or z.compression != model.compression:
        raise ShapeError(
            f"latent is C={z.channels}, r={z.compression}; codec wants "
            f"C={model.channels}, r={model.compression}"
        )
    r = model.compression
    _, th, fw = z.values.shape
    cells = z.values.transpose(1, 2, 0).reshape(th * fw, model.channels)
    patches = model.decoder.forward(cells)
    values = _unscale_db(_from_patches(patches, th * r, fw * r, r))
    return MelGrid(values, **model.mel_params) if model.mel_params else MelGrid(values)


@dataclass
class LatentTrainConfig:
    steps: int = 2000
    batch_size: int = 256  # patches per step
    learning_rate: float = 1e-3
    seed: int = 0


def train_latentcodec(model: LatentCodecModel, mels: list[MelGrid],
                      config: LatentTrainConfig) -> list[float]:
    """AdamW on pooled patches from all grids; returns the loss history."""
    if len(mels) < 32:
        raise ValidationError(f"need at least 32 training grids, got {len(mels)}")
    r = model.compression
    pool = []
    for m in mels:
        _check_divisible(m.values.shape, r)
        pool.append(_to_patches(_scale_db(m.values), r))
    pool = np.concatenate(pool, axis=0)

    rng = smallnet.spawn_rng(config.seed, 405)
    opt = smallnet.Optimizer(kind="adamw", learning_rate=config.learning_rate)
    params = model.parameters()
    names = model.parameter_names()
    history = []
    for _ in range(config.steps):
        idx = rng.integers(0, len(pool), size=config.batch_size)
        x = pool[idx]
        z, enc_cache = model.encoder.forward_cached(x)
        xh, dec_cache = model.decoder.forward_cached(z)
        diff = xh - x
        recon = float(np.mean(diff * diff))
        gauss = float(np.mean(z * z))
        loss = recon + model.kl_weight * gauss
        d_xh = 2.0 * diff / diff.size
        dec_grads, dz = model.decoder.backward_cached(dec_cache, d_xh)
        dz = dz + 2.0 * model.kl_weight * z / z.size
        enc_grads, _ = model.encoder.backward_cached(enc_cache, dz)
        opt.step(params, enc_grads + dec_grads, names)
        history.append(loss)
    return history


def reconstruction_mae_db(model: LatentCodecModel, mels: list[MelGrid]) -> float:
    """Mean absolute round-trip error in dB over a list of grids."""
    total, count = 0.0, 0
    for m in mels:
        rec = decode_latent(model, encode_mel(model, m))
        total += float(np.abs(rec.values - m.values).sum())
        count += m.values.size
    return total / count


def latent_channel_stds(model: LatentCodecModel, mels: list[MelGrid]) -> np.ndarray:
    """Per-channel latent std over a corpus (diffusion target scale probe)."""
    zs = [encode_mel(model, m).values.reshape(model.channels, -1) for m in mels]
    return np.concatenate(zs, axis=1).std(axis=1)
