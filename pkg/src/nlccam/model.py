"""Toy classifier with low- and high-level non-local blocks.

Architecture (per image, Cin x H0 x W0)::

    P x P patch embed -> ReLU -> [non-local low] -> 2x2 avg pool
    -> channel linear -> ReLU -> [non-local high] -> f (N x H x W)
    F = spatial mean of f, logits = F @ W_fc

All passes are vectorized over a leading batch axis.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import nonlocal_block as nlb
from .tensor_core import DimensionError, spatial_mean

log = logging.getLogger(__name__)

BACKBONE_PARAMS = ("embed.W", "embed.b", "proj.W", "proj.b", "fc.W")


@dataclass(frozen=True)
class ModelConfig:
    image_size: tuple[int, int] = (32, 32)
    in_channels: int = 3
    patch: int = 2
    widths: tuple[int, int] = (32, 64)
    num_classes: int = 8
    nl_low: bool = True
    nl_high: bool = True
    reduction: int = 8
    seed: int = 0

    def __post_init__(self):
        h, w = self.image_size
        if self.patch < 1 or h % self.patch or w % self.patch:
            raise ValueError(f"image size {h}x{w} is not divisible by patch {self.patch}")
        if (h // self.patch) % 2 or (w // self.patch) % 2:
            raise ValueError("patch grid must have even extents for the 2x2 pool")
        if self.num_classes < 2:
            raise ValueError("need at least 2 classes")
        if self.in_channels < 1 or min(self.widths) < 1 or self.reduction < 1:
            raise ValueError("channel counts and reduction must be positive")

    @property
    def feature_size(self) -> tuple[int, int]:
        h, w = self.image_size
        return h // self.patch // 2, w // self.patch // 2

    def to_metadata(self) -> dict[str, str]:
        out = {}
        for key, value in asdict(self).items():
            if isinstance(value, (tuple, list)):
                value = "x".join(str(v) for v in value)
            out[f"config.{key}"] = str(value)
        return out

    @classmethod
    def from_metadata(cls, meta: dict[str, str]) -> "ModelConfig":
        def pair(s):
            return tuple(int(v) for v in s.split("x"))

        def flag(s):
            return s == "True"

        return cls(
            image_size=pair(meta["config.image_size"]),
            in_channels=int(meta["config.in_channels"]),
            patch=int(meta["config.patch"]),
            widths=pair(meta["config.widths"]),
            num_classes=int(meta["config.num_classes"]),
            nl_low=flag(meta["config.nl_low"]),
            nl_high=flag(meta["config.nl_high"]),
            reduction=int(meta["config.reduction"]),
            seed=int(meta["config.seed"]),
        )


class CheckpointError(KeyError):
    """A checkpoint lacks a parameter the architecture needs, or has a wrong shape."""


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict[str, np.ndarray]
    metadata: dict[str, str] = field(default_factory=dict)
    losses: list[float] = field(default_factory=list)

    def nonlocal_params(self, idx: int) -> nlb.NonLocalParams:
        return nlb.NonLocalParams(**{n: self.params[f"nl{idx}.{n}"] for n in nlb.PARAM_NAMES})

    @property
    def fc(self) -> np.ndarray:
        return self.params["fc.W"]

    def copy(self) -> "Checkpoint":
        return Checkpoint(
            self.config,
            {k: v.copy() for k, v in self.params.items()},
            dict(self.metadata),
            list(self.losses),
        )


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    w1, w2 = cfg.widths
    din = cfg.in_channels * cfg.patch * cfg.patch
    shapes = {
        "embed.W": (din, w1),
        "embed.b": (w1,),
        "proj.W": (w1, w2),
        "proj.b": (w2,),
        "fc.W": (w2, cfg.num_classes),
    }
    for idx, (on, c) in enumerate(((cfg.nl_low, w1), (cfg.nl_high, w2))):
        if not on:
            continue
        cr = nlb.reduced_channels(c, cfg.reduction)
        shapes.update(
            {
                f"nl{idx}.Wf": (cr, c),
                f"nl{idx}.Wg": (cr, c),
                f"nl{idx}.Wh": (c, c),
                f"nl{idx}.Wk": (c, c),
                f"nl{idx}.gamma": (c,),
                f"nl{idx}.beta": (c,),
            }
        )
    return shapes


def validate_params(cfg: ModelConfig, params: dict[str, np.ndarray]) -> None:
    shapes = param_shapes(cfg)
    missing = sorted(set(shapes) - set(params))
    if missing:
        raise CheckpointError(f"checkpoint is missing parameters: {', '.join(missing)}")
    extra = sorted(set(params) - set(shapes))
    if extra:
        raise CheckpointError(f"checkpoint has unexpected parameters: {', '.join(extra)}")
    for name, shape in shapes.items():
        if params[name].shape != shape:
            raise CheckpointError(f"{name} has shape {params[name].shape}, expected {shape}")


def init_checkpoint(cfg: ModelConfig) -> Checkpoint:
    """Seeded uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights; biases and norm params zero."""
    rng = np.random.default_rng(cfg.seed)
    params = {}
    # Draw every block even when disabled so toggling flags leaves backbone weights unchanged.
    for name, shape in param_shapes(
        ModelConfig(**{**asdict(cfg), "nl_low": True, "nl_high": True})
    ).items():
        if name.endswith((".b", ".gamma", ".beta")):
            params[name] = np.zeros(shape)
        else:
            s = 1.0 / np.sqrt(shape[-1] if name.startswith("nl") else shape[0])
            params[name] = rng.uniform(-s, s, shape)
    keep = param_shapes(cfg)
    return Checkpoint(cfg, {k: v for k, v in params.items() if k in keep})


@dataclass
class _Cache:
    patches: np.ndarray
    pre1: np.ndarray
    nl0: nlb.NonLocalCache | None
    a1: np.ndarray
    pooled: np.ndarray
    pre2: np.ndarray
    nl1: nlb.NonLocalCache | None
    f: np.ndarray


def _to_patches(img: np.ndarray, p: int) -> np.ndarray:
    b, c, h, w = img.shape
    x = img.reshape(b, c, h // p, p, w // p, p)
    return x.transpose(0, 2, 4, 1, 3, 5).reshape(b, h // p, w // p, c * p * p)


def _check_images(img: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    expected = (cfg.in_channels,) + tuple(cfg.image_size)
    if img.ndim != 4 or img.shape[1:] != expected:
        raise DimensionError(f"images must be B x {expected}, got {img.shape}")
    return img


def forward_batch(img: np.ndarray, ckpt: Checkpoint):
    """Returns (logits B x K, f B x N x H x W, F B x N, cache)."""
    cfg = ckpt.config
    prm = ckpt.params
    img = _check_images(img, cfg)
    patches = _to_patches(img, cfg.patch)
    pre1 = (patches @ prm["embed.W"] + prm["embed.b"]).transpose(0, 3, 1, 2)
    a1 = np.maximum(pre1, 0.0)
    nl0 = None
    if cfg.nl_low:
        a1, nl0 = nlb.forward_batch(a1, ckpt.nonlocal_params(0))
    b, c1, h1, w1 = a1.shape
    pooled = a1.reshape(b, c1, h1 // 2, 2, w1 // 2, 2).mean(axis=(3, 5))
    pre2 = np.einsum("bchw,cd->bdhw", pooled, prm["proj.W"]) + prm["proj.b"][:, None, None]
    f = np.maximum(pre2, 0.0)
    nl1 = None
    if cfg.nl_high:
        f, nl1 = nlb.forward_batch(f, ckpt.nonlocal_params(1))
    F = f.mean(axis=(2, 3))
    logits = F @ prm["fc.W"]
    return logits, f, F, _Cache(patches, pre1, nl0, a1, pooled, pre2, nl1, f)


def forward(img, ckpt: Checkpoint):
    """Single image: returns (logits K, f N x H x W, F N)."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3:
        raise DimensionError(f"expected a Cin x H x W image, got shape {img.shape}")
    logits, f, F, _ = forward_batch(img[None], ckpt)
    return logits[0], f[0], spatial_mean(f[0])


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def loss_and_grads(img: np.ndarray, labels: np.ndarray, ckpt: Checkpoint):
    """Mean softmax cross-entropy over the batch and its parameter gradients."""
    cfg = ckpt.config
    prm = ckpt.params
    labels = np.asarray(labels)
    logits, f, F, cache = forward_batch(img, ckpt)
    b = logits.shape[0]
    logp = _log_softmax(logits)
    loss = -logp[np.arange(b), labels].mean()

    dlogits = np.exp(logp)
    dlogits[np.arange(b), labels] -= 1.0
    dlogits /= b
    grads = {"fc.W": F.T @ dlogits}
    dF = dlogits @ prm["fc.W"].T
    hh, ww = f.shape[2:]
    df = np.broadcast_to(dF[:, :, None, None] / (hh * ww), f.shape)
    if cfg.nl_high:
        df, g1 = nlb.backward_batch(cache.nl1, df)
        grads.update({f"nl1.{k}": v for k, v in g1.items()})
    dpre2 = df * (cache.pre2 > 0)
    grads["proj.W"] = np.einsum("bchw,bdhw->cd", cache.pooled, dpre2)
    grads["proj.b"] = dpre2.sum(axis=(0, 2, 3))
    dpooled = np.einsum("bdhw,cd->bchw", dpre2, prm["proj.W"])
    da1 = np.repeat(np.repeat(dpooled, 2, axis=2), 2, axis=3) / 4.0
    if cfg.nl_low:
        da1, g0 = nlb.backward_batch(cache.nl0, da1)
        grads.update({f"nl0.{k}": v for k, v in g0.items()})
    dpre1 = (da1 * (cache.pre1 > 0)).transpose(0, 2, 3, 1)
    grads["embed.W"] = np.einsum("bhwi,bhwo->io", cache.patches, dpre1)
    grads["embed.b"] = dpre1.sum(axis=(0, 1, 2))
    return loss, grads


def train(
    images: np.ndarray,
    labels: np.ndarray,
    cfg: ModelConfig,
    epochs: int = 30,
    lr: float = 0.01,
    batch: int = 16,
    log_file=None,
) -> Checkpoint:
    """Plain minibatch SGD on mean cross-entropy; deterministic for a fixed ``cfg.seed``."""
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if len(images) == 0:
        raise ValueError("empty dataset")
    if len(labels) != len(images):
        raise ValueError(f"{len(images)} images but {len(labels)} labels")
    if labels.min() < 0 or labels.max() >= cfg.num_classes:
        raise ValueError(f"labels must lie in [0, {cfg.num_classes})")
    if batch < 1 or epochs < 0:
        raise ValueError("batch must be positive and epochs non-negative")

    ckpt = init_checkpoint(cfg)
    rng = np.random.default_rng([cfg.seed, 1])
    n = len(images)
    for epoch in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch):
            idx = order[start : start + batch]
            loss, grads = loss_and_grads(images[idx], labels[idx], ckpt)
            total += loss * len(idx)
            if lr != 0.0:
                for name, g in grads.items():
                    ckpt.params[name] -= lr * g
        ckpt.losses.append(float(total / n))
        line = f"epoch {epoch + 1} loss {total / n:.6f}"
        log.info(line)
        if log_file is not None:
            log_file.write(line + "\n")
    ckpt.metadata.update(
        {
            "epochs": str(epochs),
            "lr": repr(float(lr)),
            "batch": str(batch),
            "seed": str(cfg.seed),
            "final_loss": repr(ckpt.losses[-1]) if ckpt.losses else "nan",
            "losses": ",".join(repr(v) for v in ckpt.losses),
        }
    )
    return ckpt


def predict(images: np.ndarray, ckpt: Checkpoint, batch: int = 256):
    """Logits and last feature maps for a stack of images, in chunks."""
    logits, feats = [], []
    for start in range(0, len(images), batch):
        lg, f, _, _ = forward_batch(images[start : start + batch], ckpt)
        logits.append(lg)
        feats.append(f)
    return np.concatenate(logits), np.concatenate(feats)


@dataclass
class GradCheckReport:
    errors: dict[str, float]
    tolerance: float

    @property
    def max_error(self) -> float:
        return max(self.errors.values())

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tolerance


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Max over components of |a - n| / max(|a|, |n|, floor)."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float((np.abs(analytic - numeric) / denom).max())


def small_config(seed: int = 0, nl_low: bool = True, nl_high: bool = True) -> ModelConfig:
    return ModelConfig(
        image_size=(16, 16),
        in_channels=3,
        patch=4,
        widths=(16, 16),
        num_classes=3,
        nl_low=nl_low,
        nl_high=nl_high,
        reduction=8,
        seed=seed,
    )


def grad_check_model(
    cfg: ModelConfig,
    seed: int = 0,
    step: float = 1e-5,
    tolerance: float = 1e-4,
    batch: int = 3,
    corrupt: str | None = None,
    kink_margin: float = 1e-3,
) -> GradCheckReport:
    """Central-difference check of every parameter gradient of the mean loss.

    Biases and the non-local scale and shift are drawn at random so no
    branch is masked by zero initialization. ``corrupt`` names
    a parameter whose analytic gradient is deliberately perturbed, to prove
    the check can fail.
    """
    rng = np.random.default_rng(seed)
    ckpt = init_checkpoint(ModelConfig(**{**asdict(cfg), "seed": seed}))
    for name, value in ckpt.params.items():
        if name.endswith((".b", ".gamma", ".beta")):
            ckpt.params[name] = rng.uniform(-0.5, 0.5, value.shape)
    # Resample inputs until no ReLU input sits within reach of a step; a
    # central difference straddling the kink is meaningless.
    for _ in range(1000):
        images = rng.normal(size=(batch, cfg.in_channels) + tuple(cfg.image_size))
        _, _, _, cache = forward_batch(images, ckpt)
        if min(np.abs(cache.pre1).min(), np.abs(cache.pre2).min()) > kink_margin:
            break
    labels = rng.integers(0, cfg.num_classes, batch)

    _, grads = loss_and_grads(images, labels, ckpt)
    if corrupt is not None:
        grads[corrupt] = grads[corrupt] * 1.01 + 1e-3

    errors = {}
    for name, value in ckpt.params.items():
        numeric = np.empty_like(value)
        flat = value.reshape(-1)
        num_flat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up, _ = loss_and_grads(images, labels, ckpt)
            flat[i] = orig - step
            down, _ = loss_and_grads(images, labels, ckpt)
            flat[i] = orig
            num_flat[i] = (up - down) / (2 * step)
        errors[name] = relative_error(grads[name], numeric)
    return GradCheckReport(errors, tolerance)


def save_model(path, ckpt: Checkpoint) -> None:
    from . import storage

    meta = {**ckpt.metadata, **ckpt.config.to_metadata()}
    storage.save_checkpoint(path, sorted(ckpt.params.items()), meta)


def load_model(path) -> Checkpoint:
    """Load a checkpoint and check it has exactly the parameters its config demands."""
    from . import storage

    params, meta = storage.load_checkpoint(path)
    try:
        cfg = ModelConfig.from_metadata(meta)
    except KeyError as exc:
        raise CheckpointError(f"checkpoint metadata lacks {exc}") from None
    validate_params(cfg, params)
    losses = [float(v) for v in meta.get("losses", "").split(",") if v]
    extra = {k: v for k, v in meta.items() if not k.startswith("config.")}
    return Checkpoint(cfg, params, extra, losses)
