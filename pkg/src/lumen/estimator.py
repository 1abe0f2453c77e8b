"""Inception-style light estimator: encoder, three decoder heads, loss and training loop."""

from __future__ import annotations

import io
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .lightmath import (
    LightColor,
    decode_angle,
    direction_error_deg,
    encode_angle,
    rgb_angular_error_deg,
)
from .scenegen import LightGT

log = logging.getLogger(__name__)

STAGE_KINDS = ("inception", "conv", "pool")
CHECKPOINT_MAGIC = b"LPCKPT1\n"


@dataclass(frozen=True)
class ModelConfig:
    """Network shape. Stages are (kind, width) pairs; width is ignored for pools.

    Stride-2 convolutions use 4x4 kernels with padding 1 so that even inputs
    halve exactly.
    """

    input_size: int = 64
    in_channels: int = 3
    stem_channels: int = 16
    stages: tuple[tuple[str, int], ...] = (
        ("inception", 32),
        ("pool", 0),
        ("inception", 64),
        ("conv", 96),
        ("inception", 128),
    )
    decoder_hidden: int = 64

    def __post_init__(self):
        if self.input_size < 4 or self.in_channels < 1 or self.stem_channels < 1 or self.decoder_hidden < 1:
            raise ValueError(f"invalid model widths: {self}")
        if not self.stages:
            raise ValueError("model needs at least one stage")
        size = self.input_size // 2
        if self.input_size % 2:
            raise ValueError("input size must be even")
        for kind, width in self.stages:
            if kind not in STAGE_KINDS:
                raise ValueError(f"unknown stage kind {kind!r}")
            if kind == "inception" and (width < 4 or width % 4):
                raise ValueError(f"inception width must be a positive multiple of 4, got {width}")
            if kind == "conv" and width < 1:
                raise ValueError(f"conv width must be >= 1, got {width}")
            if kind in ("conv", "pool"):
                if size < 2:
                    raise ValueError("too many downsampling stages for the input size")
                size //= 2

    @property
    def embedding_size(self) -> int:
        width = self.stem_channels
        for kind, w in self.stages:
            if kind != "pool":
                width = w
        return width

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stages"] = [list(s) for s in self.stages]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["stages"] = tuple((str(k), int(w)) for k, w in d["stages"])
        return cls(**d)


@dataclass(frozen=True)
class LossWeights:
    pan: float = 1.0
    tilt: float = 1.0
    color: float = 1.0

    def __post_init__(self):
        if min(self.pan, self.tilt, self.color) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.pan == self.tilt == self.color == 0:
            raise ValueError("loss weights cannot all be zero")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    lr: float = 2e-4
    plateau_factor: float = 0.1
    plateau_patience: int = 5
    plateau_threshold: float = 1e-4
    max_epochs: int = 50
    max_steps: int | None = None
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    literal_residual_sum: bool = False
    shuffle: bool = True

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if not 0.0 < self.plateau_factor < 1.0:
            raise ValueError("plateau factor must lie in (0, 1)")
        if self.lr <= 0 or self.max_epochs < 1 or self.plateau_patience < 1:
            raise ValueError(f"invalid training config: {self}")


@dataclass(frozen=True)
class LightEstimate:
    sin_pan: float
    cos_pan: float
    sin_tilt: float
    cos_tilt: float
    rgb: tuple[float, float, float]

    @property
    def delta_pan(self) -> float:
        return decode_angle(self.sin_pan, self.cos_pan)

    @property
    def delta_tilt(self) -> float:
        return decode_angle(self.sin_tilt, self.cos_tilt)

    @property
    def color(self) -> LightColor:
        return LightColor(*self.rgb)

    @classmethod
    def from_vector(cls, y: Sequence[float]) -> "LightEstimate":
        y = [float(v) for v in y]
        if len(y) != 7:
            raise ValueError(f"expected 7 head outputs, got {len(y)}")
        return cls(y[0], y[1], y[2], y[3], (y[4], y[5], y[6]))


# ---------------------------------------------------------------- network


class Model:
    """Parameters plus the forward pass. Forward returns (pan[B,2], tilt[B,2], rgb[B,3])."""

    def __init__(self, cfg: ModelConfig, params: ad.ParamStore):
        self.cfg = cfg
        self.params = params

    def forward(self, x: ad.Tensor) -> tuple[ad.Tensor, ad.Tensor, ad.Tensor]:
        cfg = self.cfg
        if x.data.ndim != 4 or x.shape[1:] != (cfg.in_channels, cfg.input_size, cfg.input_size):
            raise ValueError(
                f"model expects input [B, {cfg.in_channels}, {cfg.input_size}, {cfg.input_size}], got {x.shape}"
            )
        p = self.params
        h = _conv_relu(p, "stem", x, stride=2, padding=1)
        for i, (kind, _) in enumerate(cfg.stages):
            name = f"s{i}"
            if kind == "inception":
                h = inception_forward(p, name, h)
            elif kind == "conv":
                h = _conv_relu(p, name, h, stride=2, padding=1)
            else:
                h = ad.maxpool2(h)
        emb = ad.reshape(ad.global_avg_pool(h), (h.shape[0], h.shape[1]))
        heads = []
        for head, act in (("pan", ad.tanh), ("tilt", ad.tanh), ("rgb", ad.sigmoid)):
            z = ad.relu(ad.dense(emb, p[f"{head}.fc1.w"], p[f"{head}.fc1.b"]))
            heads.append(act(ad.dense(z, p[f"{head}.fc2.w"], p[f"{head}.fc2.b"])))
        return heads[0], heads[1], heads[2]

    def raw_outputs(self, images: np.ndarray) -> np.ndarray:
        """[B, 7] head outputs for already-normalized [B, C, H, W] images."""
        pan, tilt, rgb = self.forward(ad.Tensor(images))
        return np.concatenate([pan.data, tilt.data, rgb.data], axis=1)


def _conv_relu(p: ad.ParamStore, name: str, x: ad.Tensor, stride=1, padding=0) -> ad.Tensor:
    return ad.relu(ad.conv2d(x, p[f"{name}.w"], p[f"{name}.b"], stride=stride, padding=padding))


def _add_conv(store, rng, name, cin, cout, kh, kw):
    store.add(f"{name}.w", ad.he_normal_init(rng, (cout, cin, kh, kw), cin * kh * kw))
    store.add(f"{name}.b", ad.Tensor(np.zeros(cout), requires_grad=True))


def _add_dense(store, rng, name, fin, fout):
    store.add(f"{name}.w", ad.he_normal_init(rng, (fin, fout), fin))
    store.add(f"{name}.b", ad.Tensor(np.zeros(fout), requires_grad=True))


# branch -> sequence of (kh, kw) kernels after the leading 1x1
_FACTORED = {"b2": ((1, 3), (3, 1)), "b3": ((1, 3), (3, 1), (1, 3), (3, 1))}


def add_inception_params(
    store: ad.ParamStore, rng: np.random.Generator, name: str, cin: int, widths: Sequence[int]
) -> int:
    """Register an inception block's parameters; returns its output channel count."""
    if len(widths) != 4 or min(widths) < 1:
        raise ValueError(f"inception needs four positive branch widths, got {widths}")
    w1, w2, w3, w4 = widths
    _add_conv(store, rng, f"{name}.b1.0", cin, w1, 1, 1)
    for br, w in (("b2", w2), ("b3", w3)):
        _add_conv(store, rng, f"{name}.{br}.0", cin, w, 1, 1)
        for j, (kh, kw) in enumerate(_FACTORED[br], start=1):
            _add_conv(store, rng, f"{name}.{br}.{j}", w, w, kh, kw)
    _add_conv(store, rng, f"{name}.b4.0", cin, w4, 1, 1)
    return w1 + w2 + w3 + w4


def inception_forward(p: ad.ParamStore, name: str, x: ad.Tensor) -> ad.Tensor:
    outs = [_conv_relu(p, f"{name}.b1.0", x)]
    for br in ("b2", "b3"):
        h = _conv_relu(p, f"{name}.{br}.0", x)
        for j, (kh, kw) in enumerate(_FACTORED[br], start=1):
            h = _conv_relu(p, f"{name}.{br}.{j}", h, padding=(kh // 2, kw // 2))
        outs.append(h)
    outs.append(_conv_relu(p, f"{name}.b4.0", ad.maxpool2d(x, 3, 1, 1)))
    return ad.concat_channels(outs)


def build_model(cfg: ModelConfig | None = None, rng: np.random.Generator | int | None = 0) -> Model:
    cfg = cfg or ModelConfig()
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    store = ad.ParamStore()
    _add_conv(store, rng, "stem", cfg.in_channels, cfg.stem_channels, 4, 4)
    c = cfg.stem_channels
    for i, (kind, width) in enumerate(cfg.stages):
        name = f"s{i}"
        if kind == "inception":
            c = add_inception_params(store, rng, name, c, [width // 4] * 4)
        elif kind == "conv":
            _add_conv(store, rng, name, c, width, 4, 4)
            c = width
    for head, size in (("pan", 2), ("tilt", 2), ("rgb", 3)):
        _add_dense(store, rng, f"{head}.fc1", c, cfg.decoder_hidden)
        _add_dense(store, rng, f"{head}.fc2", cfg.decoder_hidden, size)
    return Model(cfg, store)


# ------------------------------------------------------------------- loss


@dataclass
class Targets:
    pan: np.ndarray  # [B, 2] sin, cos
    tilt: np.ndarray  # [B, 2]
    color: np.ndarray  # [B, 3]

    @classmethod
    def from_gts(cls, gts: Sequence[LightGT]) -> "Targets":
        return cls(
            np.array([encode_angle(g.delta_pan) for g in gts], dtype=np.float64).reshape(-1, 2),
            np.array([encode_angle(g.delta_tilt) for g in gts], dtype=np.float64).reshape(-1, 2),
            np.array([tuple(g.color) for g in gts], dtype=np.float64).reshape(-1, 3),
        )

    def subset(self, idx) -> "Targets":
        return Targets(self.pan[idx], self.tilt[idx], self.color[idx])


@dataclass
class LossTerms:
    total: ad.Tensor
    pan: float
    tilt: float
    color: float


def total_loss(
    outputs: tuple[ad.Tensor, ad.Tensor, ad.Tensor],
    targets: Targets,
    weights: LossWeights = LossWeights(),
    literal_residual_sum: bool = False,
) -> LossTerms:
    """Weighted sum of the pan, tilt and colour terms.

    The pan and tilt terms average squared residuals over batch and both
    components. With ``literal_residual_sum`` the two residuals of a pair are
    summed before squaring instead.
    """
    pan, tilt, rgb = outputs
    reg = ad.summed_residual_mse if literal_residual_sum else ad.mse
    lp = reg(pan, targets.pan)
    lt = reg(tilt, targets.tilt)
    lc = ad.cosine_angle_loss(rgb, targets.color)
    total = ad.add(ad.add(ad.scale(lp, weights.pan), ad.scale(lt, weights.tilt)), ad.scale(lc, weights.color))
    return LossTerms(total, lp.item(), lt.item(), lc.item())


def estimate_loss(est: LightEstimate, gt: LightGT, weights: LossWeights = LossWeights()) -> float:
    """total_loss for a single estimate given as plain numbers."""
    outs = (
        ad.Tensor([[est.sin_pan, est.cos_pan]]),
        ad.Tensor([[est.sin_tilt, est.cos_tilt]]),
        ad.Tensor([list(est.rgb)]),
    )
    return total_loss(outs, Targets.from_gts([gt]), weights).total.item()


# ------------------------------------------------------------- prediction


def normalize_images(images: np.ndarray) -> np.ndarray:
    """uint8 [H, W, 3] or [B, H, W, 3] -> float64 [B, 3, H, W] in [0, 1]."""
    arr = np.asarray(images)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4:
        raise ValueError(f"expected HxWx3 image(s), got shape {arr.shape}")
    out = arr.astype(np.float64)
    if arr.dtype == np.uint8:
        out /= 255.0
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def predict(model: Model, image: np.ndarray) -> tuple[float, float, LightColor]:
    """(delta_pan, delta_tilt, colour) for one HxWx3 image at the model resolution."""
    arr = np.asarray(image)
    size = model.cfg.input_size
    if arr.ndim != 3 or arr.shape[:2] != (size, size) or arr.shape[2] != model.cfg.in_channels:
        raise ValueError(f"image must be {size}x{size}x{model.cfg.in_channels}, got {arr.shape}")
    est = LightEstimate.from_vector(model.raw_outputs(normalize_images(arr))[0])
    return est.delta_pan, est.delta_tilt, est.color


def predict_batch(model: Model, images: np.ndarray, batch_size: int = 64) -> list[LightEstimate]:
    """Estimates for normalized [N, C, H, W] images."""
    out = []
    for s in range(0, len(images), batch_size):
        for row in model.raw_outputs(images[s : s + batch_size]):
            out.append(LightEstimate.from_vector(row))
    return out


def sample_errors(est: LightEstimate, gt: LightGT) -> tuple[float, float]:
    """(direction error, colour error) in degrees."""
    d = direction_error_deg((est.delta_pan, est.delta_tilt), (gt.delta_pan, gt.delta_tilt))
    c = rgb_angular_error_deg(est.rgb, tuple(gt.color))
    return d, c


# --------------------------------------------------------------- training


class PlateauScheduler:
    """Multiply the learning rate by ``factor`` after ``patience`` epochs without improvement."""

    def __init__(self, lr: float, factor: float = 0.1, patience: int = 5, threshold: float = 1e-4):
        self.lr = lr
        self.factor = factor
        self.patience = patience
        self.threshold = threshold
        self.best = math.inf
        self.bad_epochs = 0

    def step(self, loss: float) -> float:
        if loss < self.best - self.threshold:
            self.best = loss
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs >= self.patience:
                self.lr *= self.factor
                self.bad_epochs = 0
        return self.lr

    def state(self) -> dict:
        return {"lr": self.lr, "best": self.best, "bad_epochs": self.bad_epochs}


@dataclass
class EpochLog:
    epoch: int
    steps: int
    lr: float
    train_loss: float
    val_loss: float | None
    direction_error: float
    color_error: float


def _arrays_from_gts(gts):
    if isinstance(gts, Targets):
        return gts
    return Targets.from_gts(gts)


def evaluate_loss(model: Model, images: np.ndarray, targets: Targets, cfg: TrainConfig) -> tuple[float, float, float]:
    """(mean loss, mean direction error, mean colour error) over a set, in batches."""
    n = len(images)
    loss_sum, d_sum, c_sum = 0.0, 0.0, 0.0
    for s in range(0, n, cfg.batch_size):
        idx = np.arange(s, min(n, s + cfg.batch_size))
        outs = model.forward(ad.Tensor(images[idx]))
        terms = total_loss(outs, targets.subset(idx), cfg.weights, cfg.literal_residual_sum)
        loss_sum += terms.total.item() * len(idx)
        d, c = _batch_errors(outs, targets.subset(idx))
        d_sum += d.sum()
        c_sum += c.sum()
    return loss_sum / n, float(d_sum / n), float(c_sum / n)


def _batch_errors(outs, targets: Targets) -> tuple[np.ndarray, np.ndarray]:
    raw = np.concatenate([o.data for o in outs], axis=1)
    d, c = [], []
    for row, tp, tt, tc in zip(raw, targets.pan, targets.tilt, targets.color):
        est = LightEstimate.from_vector(row)
        gp = decode_angle(tp[0], tp[1])
        gtl = decode_angle(tt[0], tt[1])
        d.append(direction_error_deg((est.delta_pan, est.delta_tilt), (gp, gtl)))
        c.append(rgb_angular_error_deg(est.rgb, tc))
    return np.array(d), np.array(c)


def fit(
    model: Model,
    images: np.ndarray,
    gts: Sequence[LightGT] | Targets,
    cfg: TrainConfig = TrainConfig(),
    val: tuple[np.ndarray, Sequence[LightGT] | Targets] | None = None,
    checkpoint_dir: str | Path | None = None,
    on_epoch: Callable[[EpochLog], None] | None = None,
) -> list[EpochLog]:
    """Mini-batch Adam training with a plateau learning-rate schedule.

    ``images`` are normalized [N, C, H, W]. The schedule tracks the
    validation loss when ``val`` is given and the training loss otherwise.
    A checkpoint is written after every epoch when ``checkpoint_dir`` is set.
    """
    n = len(images)
    if n == 0:
        raise ValueError("cannot train on an empty dataset")
    targets = _arrays_from_gts(gts)
    if len(targets.pan) != n:
        raise ValueError(f"{n} images but {len(targets.pan)} ground-truth records")
    val_t = (val[0], _arrays_from_gts(val[1])) if val is not None and len(val[0]) else None
    rng = np.random.default_rng(cfg.seed)
    sched = PlateauScheduler(cfg.lr, cfg.plateau_factor, cfg.plateau_patience, cfg.plateau_threshold)
    store = model.params
    history: list[EpochLog] = []
    steps = 0
    ckpt = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if ckpt is not None:
        ckpt.mkdir(parents=True, exist_ok=True)

    for epoch in range(cfg.max_epochs):
        order = rng.permutation(n) if cfg.shuffle else np.arange(n)
        loss_sum, d_sum, c_sum = 0.0, 0.0, 0.0
        seen = 0
        for s in range(0, n, cfg.batch_size):
            if cfg.max_steps is not None and steps >= cfg.max_steps:
                break
            idx = order[s : s + cfg.batch_size]
            t = targets.subset(idx)
            outs = model.forward(ad.Tensor(images[idx]))
            terms = total_loss(outs, t, cfg.weights, cfg.literal_residual_sum)
            terms.total.backward()
            ad.adam_step(store, sched.lr)
            steps += 1
            d, c = _batch_errors(outs, t)
            loss_sum += terms.total.item() * len(idx)
            d_sum += d.sum()
            c_sum += c.sum()
            seen += len(idx)
        if seen == 0:
            break
        train_loss = loss_sum / seen
        val_loss = None
        if val_t is not None:
            val_loss, _, _ = evaluate_loss(model, val_t[0], val_t[1], cfg)
        entry = EpochLog(epoch, steps, sched.lr, train_loss, val_loss, float(d_sum / seen), float(c_sum / seen))
        history.append(entry)
        log.info(
            "epoch %d steps %d lr %.2e loss %.5f val %s dir %.2f col %.2f",
            epoch, steps, entry.lr, train_loss,
            "-" if val_loss is None else f"{val_loss:.5f}", entry.direction_error, entry.color_error,
        )
        sched.step(val_loss if val_loss is not None else train_loss)
        if ckpt is not None:
            save_checkpoint(ckpt / "last.lpckpt", model, {"epoch": epoch, **sched.state()})
        if on_epoch is not None:
            on_epoch(entry)
        if cfg.max_steps is not None and steps >= cfg.max_steps:
            break
    return history


# ------------------------------------------------------------- checkpoints


def _dumps(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=True).encode("utf-8")


def checkpoint_bytes(model: Model, train_state: dict | None = None) -> bytes:
    """LPCKPT1 container: magic, u64 header length, JSON header, float64 LE payload."""
    store = model.params
    entries = []
    blobs = io.BytesIO()
    offset = 0
    for section, table in (("param", None), ("adam_m", store.m), ("adam_v", store.v)):
        for name, t in store:
            arr = t.data if table is None else table[name]
            entries.append({"section": section, "name": name, "shape": list(arr.shape), "offset": offset})
            raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
            blobs.write(raw)
            offset += len(raw)
    header = {
        "format": "LPCKPT1",
        "model_config": model.cfg.to_dict(),
        "optimizer": {"name": "adam", "step": store.step},
        "train_state": train_state or {},
        "tensors": entries,
    }
    head = _dumps(header)
    return CHECKPOINT_MAGIC + struct.pack("<Q", len(head)) + head + blobs.getvalue()


def save_checkpoint(path: str | Path, model: Model, train_state: dict | None = None) -> None:
    path = Path(path)
    data = checkpoint_bytes(model, train_state)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)


def load_checkpoint_bytes(data: bytes) -> tuple[Model, dict]:
    if not data.startswith(CHECKPOINT_MAGIC):
        raise ValueError("not an LPCKPT1 checkpoint")
    pos = len(CHECKPOINT_MAGIC)
    (hlen,) = struct.unpack_from("<Q", data, pos)
    pos += 8
    header = json.loads(data[pos : pos + hlen].decode("utf-8"))
    payload = memoryview(data)[pos + hlen :]
    cfg = ModelConfig.from_dict(header["model_config"])
    store = ad.ParamStore()
    moments: dict[str, dict[str, np.ndarray]] = {"adam_m": {}, "adam_v": {}}
    for e in header["tensors"]:
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=e["offset"]).astype(np.float64)
        arr = arr.reshape(e["shape"])
        if e["section"] == "param":
            store.add(e["name"], ad.Tensor(arr, requires_grad=True))
        else:
            moments[e["section"]][e["name"]] = arr
    for name, _ in store:
        store.m[name] = moments["adam_m"][name]
        store.v[name] = moments["adam_v"][name]
    store.step = int(header["optimizer"]["step"])
    return Model(cfg, store), header["train_state"]


def load_checkpoint(path: str | Path) -> tuple[Model, dict]:
    return load_checkpoint_bytes(Path(path).read_bytes())
