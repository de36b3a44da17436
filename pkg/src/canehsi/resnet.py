"""A small residual CNN with explicit forward and reverse-mode passes.

Architecture (NHWC tensors, stride 1 throughout)::

    x -> conv3x3 stem -> relu -> [residual block] x num_blocks -> global avg pool -> fc

    residual block: z = conv3x3(relu(conv3x3(h))) + skip(h);  out = relu(z)
    skip = identity when channels match, otherwise a 1x1 projection

All parameters live in one flat float array; ``ResidualNet.layout`` maps
each tensor name to its offset and shape.  Parameter count::

    9*B*C0 + C0
    + sum_i [9*c_in*c_out + c_out + 9*c_out*c_out + c_out + (c_in != c_out) * (c_in*c_out + c_out)]
    + C_last*K + K
"""
from __future__ import annotations

import csv
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .patches import PatchSet, SplitResult
from .svm import EvalReport, evaluate
from .synthgen import RATING_CLASSES

CLASSES = np.array(RATING_CLASSES)
_CLASS_INDEX = {c: i for i, c in enumerate(RATING_CLASSES)}


@dataclass
class NetConfig:
    input_n: int = 19
    input_bands: int = 11
    stem_channels: int = 16
    num_blocks: int = 3
    channels_per_stage: list | None = None
    num_classes: int = 7
    rectifier: bool = True
    seed: int = 0

    def block_channels(self) -> list[int]:
        if self.channels_per_stage is None:
            return [self.stem_channels] * self.num_blocks
        return [int(c) for c in self.channels_per_stage]

    def validate(self) -> None:
        if self.num_blocks < 1:
            raise ValueError("num_blocks must be >= 1")
        chans = self.block_channels()
        if len(chans) != self.num_blocks:
            raise ValueError(f"channels_per_stage has {len(chans)} entries for {self.num_blocks} blocks")
        if min([self.stem_channels, self.input_bands, self.input_n, self.num_classes] + chans) < 1:
            raise ValueError("all sizes and channel counts must be >= 1")
        if self.num_classes != len(RATING_CLASSES):
            raise ValueError(f"num_classes must be {len(RATING_CLASSES)}")


def param_count(config: NetConfig) -> int:
    B, c0, K = config.input_bands, config.stem_channels, config.num_classes
    total = 9 * B * c0 + c0
    cin = c0
    for cout in config.block_channels():
        total += 9 * cin * cout + cout + 9 * cout * cout + cout
        if cin != cout:
            total += cin * cout + cout
        cin = cout
    return total + cin * K + K


def _layout(config: NetConfig) -> dict:
    shapes = [("stem.w", (3, 3, config.input_bands, config.stem_channels)), ("stem.b", (config.stem_channels,))]
    cin = config.stem_channels
    for i, cout in enumerate(config.block_channels()):
        shapes += [
            (f"block{i}.conv1.w", (3, 3, cin, cout)),
            (f"block{i}.conv1.b", (cout,)),
            (f"block{i}.conv2.w", (3, 3, cout, cout)),
            (f"block{i}.conv2.b", (cout,)),
        ]
        if cin != cout:
            shapes += [(f"block{i}.proj.w", (cin, cout)), (f"block{i}.proj.b", (cout,))]
        cin = cout
    shapes += [("fc.w", (cin, config.num_classes)), ("fc.b", (config.num_classes,))]
    layout, off = {}, 0
    for name, shape in shapes:
        layout[name] = (off, shape)
        off += math.prod(shape)
    return layout


class ResidualNet:
    def __init__(self, config: NetConfig, params: np.ndarray | None = None, dtype=np.float32):
        config.validate()
        self.config = config
        self.layout = _layout(config)
        size = param_count(config)
        if params is None:
            params = np.zeros(size, dtype=dtype)
        self.params = np.asarray(params, dtype=dtype).copy()
        if self.params.size != size:
            raise ValueError(f"expected {size} parameters, got {self.params.size}")
        # fixed per-band standardisation applied before the stem: (x - shift) * scale
        self.input_shift: np.ndarray | None = None
        self.input_scale: np.ndarray | None = None

    def set_input_norm(self, shift, scale) -> None:
        self.input_shift = np.asarray(shift, dtype=self.dtype).reshape(self.config.input_bands)
        self.input_scale = np.asarray(scale, dtype=self.dtype).reshape(self.config.input_bands)

    def normalize(self, x: np.ndarray) -> np.ndarray:
        if self.input_shift is None:
            return x
        return (x - self.input_shift) * self.input_scale

    @property
    def dtype(self):
        return self.params.dtype

    def view(self, name: str, flat: np.ndarray | None = None) -> np.ndarray:
        off, shape = self.layout[name]
        src = self.params if flat is None else flat
        return src[off : off + math.prod(shape)].reshape(shape)

    def has(self, name: str) -> bool:
        return name in self.layout

    @property
    def layers(self) -> list[dict]:
        """Ordered layer records describing the forward graph."""
        recs = [{"kind": "conv3x3", "params": "stem"}]
        if self.config.rectifier:
            recs.append({"kind": "relu"})
        for i in range(self.config.num_blocks):
            recs.append({"kind": "conv3x3", "params": f"block{i}.conv1"})
            if self.config.rectifier:
                recs.append({"kind": "relu"})
            recs.append({"kind": "conv3x3", "params": f"block{i}.conv2"})
            skip = f"block{i}.proj" if self.has(f"block{i}.proj.w") else "identity"
            recs.append({"kind": "residual_add", "skip": skip})
            if self.config.rectifier:
                recs.append({"kind": "relu"})
        recs += [{"kind": "global_avg_pool"}, {"kind": "fc", "params": "fc"}]
        return recs

    def astype(self, dtype) -> "ResidualNet":
        out = ResidualNet(self.config, self.params, dtype)
        if self.input_shift is not None:
            out.set_input_norm(self.input_shift, self.input_scale)
        return out

    def copy(self) -> "ResidualNet":
        return self.astype(self.dtype)


def init_net(config: NetConfig) -> ResidualNet:
    """He-normal conv weights (std sqrt(2 / fan_in)), zero biases.

    The classifier layer uses std sqrt(1 / fan_in) / 10 so initial logits are
    near zero and the starting loss is close to ln(num_classes).
    """
    net = ResidualNet(config)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(config.seed))))
    for name, (off, shape) in net.layout.items():
        if not name.endswith(".w"):
            continue
        if name == "fc.w":
            std = math.sqrt(1.0 / shape[0]) * 0.1
        elif len(shape) == 4:
            std = math.sqrt(2.0 / (shape[0] * shape[1] * shape[2]))
        else:
            std = math.sqrt(2.0 / shape[0])
        net.params[off : off + math.prod(shape)] = (std * rng.standard_normal(math.prod(shape))).astype(net.dtype)
    return net


# --- layer kernels -----------------------------------------------------------


def conv3x3_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    """'Same' 3x3 convolution, returning (y, padded_flat) where padded_flat is cached for backward.

    The zero-padded input is viewed as one (N*(H+2)*(W+2), C) matrix; the
    tap (i, j) is then a contiguous row offset i*(W+2)+j, so the convolution
    is nine GEMMs on views.  Rows past the valid region are discarded.
    """
    n, h, wd, c = x.shape
    k = w.shape[-1]
    wp = wd + 2
    xp = np.zeros((n, h + 2, wp, c), dtype=x.dtype)
    xp[:, 1:-1, 1:-1] = x
    flat = xp.reshape(-1, c)
    rows = flat.shape[0]
    span = rows - (2 * wp + 2)
    out = np.zeros((rows, k), dtype=x.dtype)
    acc = out[:span]
    acc += b
    for i in range(3):
        for j in range(3):
            o = i * wp + j
            acc += flat[o : o + span] @ w[i, j]
    return out.reshape(n, h + 2, wp, k)[:, :h, :wd], flat


def conv3x3_backward(dy: np.ndarray, flat: np.ndarray, w: np.ndarray, x_shape, need_dx: bool = True):
    n, h, wd, c = x_shape
    k = w.shape[-1]
    wp = wd + 2
    dyp = np.zeros((n, h + 2, wp, k), dtype=dy.dtype)
    dyp[:, :h, :wd] = dy
    dyp = dyp.reshape(-1, k)
    rows = dyp.shape[0]
    span = rows - (2 * wp + 2)
    dyv = dyp[:span]
    dw = np.empty_like(w)
    dxp = np.zeros((rows, c), dtype=dy.dtype) if need_dx else None
    for i in range(3):
        for j in range(3):
            o = i * wp + j
            dw[i, j] = flat[o : o + span].T @ dyv
            if need_dx:
                dxp[o : o + span] += dyv @ w[i, j].T
    db = dy.reshape(-1, k).sum(axis=0)
    if not need_dx:
        return None, dw, db
    return dxp.reshape(n, h + 2, wp, c)[:, 1:-1, 1:-1], dw, db


def _relu(z, on: bool):
    return np.maximum(z, 0) if on else z


def _relu_back(dz, z, on: bool):
    return dz * (z > 0) if on else dz


def residual_block_forward(x: np.ndarray, params: dict, rectifier: bool = True, cache: dict | None = None):
    """``params`` keys: conv1.w, conv1.b, conv2.w, conv2.b and optionally proj.w, proj.b."""
    cin = x.shape[-1]
    cout = params["conv1.w"].shape[-1]
    if params["conv1.w"].shape[2] != cin:
        raise ValueError(f"block expects {params['conv1.w'].shape[2]} input channels, got {cin}")
    if cin != cout and "proj.w" not in params:
        raise ValueError("channel change requires a 1x1 projection")
    a1, pad1 = conv3x3_forward(x, params["conv1.w"], params["conv1.b"])
    r1 = _relu(a1, rectifier)
    a2, pad2 = conv3x3_forward(r1, params["conv2.w"], params["conv2.b"])
    skip = x @ params["proj.w"] + params["proj.b"] if "proj.w" in params else x
    z = a2 + skip
    out = _relu(z, rectifier)
    if cache is not None:
        cache.update(x=x, a1=a1, r1=r1, pad1=pad1, pad2=pad2, z=z)
    return out


def _block_params(net: ResidualNet, i: int, flat=None) -> dict:
    keys = ["conv1.w", "conv1.b", "conv2.w", "conv2.b"]
    if net.has(f"block{i}.proj.w"):
        keys += ["proj.w", "proj.b"]
    return {k: net.view(f"block{i}.{k}", flat) for k in keys}


def _as_batch(net: ResidualNet, batch) -> np.ndarray:
    x = batch.stack() if isinstance(batch, PatchSet) else np.asarray(batch)
    if x.ndim == 3:
        x = x[None]
    cfg = net.config
    if x.shape[1:] != (cfg.input_n, cfg.input_n, cfg.input_bands):
        raise ValueError(f"batch shape {x.shape[1:]} != ({cfg.input_n}, {cfg.input_n}, {cfg.input_bands})")
    return x.astype(net.dtype, copy=False)


def _forward(net: ResidualNet, x: np.ndarray, keep: bool):
    rect = net.config.rectifier
    caches = {}
    x = net.normalize(x)
    a0, pad0 = conv3x3_forward(x, net.view("stem.w"), net.view("stem.b"))
    h = _relu(a0, rect)
    if keep:
        caches["stem"] = {"a0": a0, "pad0": pad0, "x_shape": x.shape}
    for i in range(net.config.num_blocks):
        c = {} if keep else None
        h = residual_block_forward(h, _block_params(net, i), rect, c)
        if keep:
            caches[i] = c
    pooled = h.mean(axis=(1, 2))
    logits = pooled @ net.view("fc.w") + net.view("fc.b")
    if keep:
        caches["head"] = {"pooled": pooled, "hw": h.shape[1] * h.shape[2], "h_shape": h.shape}
    return logits, caches


def forward(net: ResidualNet, batch) -> np.ndarray:
    """Logits of shape (batch, 7)."""
    return _forward(net, _as_batch(net, batch), keep=False)[0]


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def label_indices(labels) -> np.ndarray:
    try:
        return np.array([_CLASS_INDEX[int(v)] for v in labels], dtype=np.int64)
    except KeyError as exc:
        raise ValueError(f"label {exc.args[0]} not in {RATING_CLASSES}") from None


def cross_entropy(logits: np.ndarray, idx: np.ndarray) -> float:
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(-logp[np.arange(len(idx)), idx].mean())


def loss_and_grad(net: ResidualNet, batch, labels):
    """Mean softmax cross-entropy and its gradient, laid out like ``net.params``."""
    x = _as_batch(net, batch)
    idx = label_indices(labels)
    if idx.size != x.shape[0]:
        raise ValueError("one label per batch item required")
    loss, grad, _ = _loss_grad_logits(net, x, idx)
    return loss, grad


def _loss_grad_logits(net: ResidualNet, x: np.ndarray, idx: np.ndarray):
    rect = net.config.rectifier
    logits, caches = _forward(net, x, keep=True)
    loss = cross_entropy(logits, idx)
    grad = np.zeros_like(net.params)

    nb = x.shape[0]
    dlogits = softmax(logits)
    dlogits[np.arange(nb), idx] -= 1.0
    dlogits /= nb
    head = caches["head"]
    net.view("fc.w", grad)[...] = head["pooled"].T @ dlogits
    net.view("fc.b", grad)[...] = dlogits.sum(axis=0)
    dpooled = dlogits @ net.view("fc.w").T
    dh = np.broadcast_to((dpooled / head["hw"])[:, None, None, :], head["h_shape"]).astype(net.dtype)

    for i in reversed(range(net.config.num_blocks)):
        c = caches[i]
        p = _block_params(net, i)
        g = _block_params(net, i, grad)
        dz = _relu_back(dh, c["z"], rect)
        dr1, g["conv2.w"][...], g["conv2.b"][...] = conv3x3_backward(dz, c["pad2"], p["conv2.w"], c["r1"].shape)
        da1 = _relu_back(dr1, c["a1"], rect)
        dx, g["conv1.w"][...], g["conv1.b"][...] = conv3x3_backward(da1, c["pad1"], p["conv1.w"], c["x"].shape)
        if "proj.w" in p:
            cin = c["x"].shape[-1]
            dz2 = dz.reshape(-1, dz.shape[-1])
            g["proj.w"][...] = c["x"].reshape(-1, cin).T @ dz2
            g["proj.b"][...] = dz2.sum(axis=0)
            dx = dx + dz @ p["proj.w"].T
        else:
            dx = dx + dz
        dh = dx

    s = caches["stem"]
    da0 = _relu_back(dh, s["a0"], rect)
    _, gw, gb = conv3x3_backward(da0, s["pad0"], net.view("stem.w"), s["x_shape"], need_dx=False)
    net.view("stem.w", grad)[...] = gw
    net.view("stem.b", grad)[...] = gb
    return loss, grad, logits


def _relu_pattern(net: ResidualNet, x: np.ndarray) -> np.ndarray:
    """On/off state of every rectifier for input ``x``."""
    return _pattern_from(net, _forward(net, x, keep=True)[1])


def gradient_check(
    net: ResidualNet,
    batch,
    labels,
    step: float = 1e-3,
    grad: np.ndarray | None = None,
    dtype=np.float64,
    min_step: float = 1e-7,
) -> float:
    """Max relative error between an analytic gradient and central differences.

    relative error = |analytic - numeric| / max(|analytic|, |numeric|, 1e-8)

    Runs in ``dtype`` (float64 by default) so the finite differences are not
    dominated by rounding.  A difference whose +/- step flips any rectifier
    straddles a kink where the loss is not differentiable; such parameters are
    re-measured with the step divided by 10 until the pattern holds (or
    ``min_step`` is reached).  Pass ``grad`` to check a supplied gradient
    instead of the one from ``loss_and_grad``.
    """
    work = net.astype(dtype)
    x = _as_batch(work, batch)
    idx_labels = list(labels)
    if grad is None:
        _, grad = loss_and_grad(work, x, idx_labels)
    grad = np.asarray(grad, dtype=np.float64)
    idx = label_indices(idx_labels)
    kinks = work.config.rectifier
    base = _relu_pattern(work, x) if kinks else None

    def probe(k, h):
        orig = work.params[k]
        out = []
        for v in (orig + h, orig - h):
            work.params[k] = v
            logits, caches = _forward(work, x, keep=kinks)
            flipped = kinks and not np.array_equal(_pattern_from(work, caches), base)
            out.append((cross_entropy(logits, idx), flipped))
        work.params[k] = orig
        (fp, f1), (fm, f2) = out
        return (fp - fm) / (2.0 * h), f1 or f2

    numeric = np.empty(work.params.size)
    smooth = np.ones(work.params.size, dtype=bool)
    for k in range(work.params.size):
        h = step
        numeric[k], flipped = probe(k, h)
        while flipped and h / 10 >= min_step:
            h /= 10
            numeric[k], flipped = probe(k, h)
        # still flipping at the smallest step: a pre-activation sits exactly on the
        # kink, the loss has only a subgradient there and the parameter is skipped
        smooth[k] = not flipped
    denom = np.maximum(np.maximum(np.abs(grad), np.abs(numeric)), 1e-8)
    rel = np.abs(grad - numeric) / denom
    return float(np.max(rel[smooth])) if smooth.any() else 0.0


def _pattern_from(net: ResidualNet, caches: dict) -> np.ndarray:
    parts = [caches["stem"]["a0"] > 0]
    for i in range(net.config.num_blocks):
        parts += [caches[i]["a1"] > 0, caches[i]["z"] > 0]
    return np.concatenate([p.reshape(-1) for p in parts])


# --- training ----------------------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_accuracy: float
    val_accuracy: float

    def __str__(self) -> str:
        return (
            f"epoch {self.epoch}: loss {self.train_loss:.4f}  "
            f"train acc {self.train_accuracy:.4f}  val acc {self.val_accuracy:.4f}"
        )


@dataclass
class TrainReport:
    epochs: list = field(default_factory=list)
    final_test_accuracy: float | None = None

    def save_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["epoch", "train_loss", "train_acc", "val_acc"])
            for e in self.epochs:
                wr.writerow([e.epoch, f"{e.train_loss:.6f}", f"{e.train_accuracy:.6f}", f"{e.val_accuracy:.6f}"])

    def to_json(self) -> dict:
        return {"epochs": [asdict(e) for e in self.epochs], "final_test_accuracy": self.final_test_accuracy}


def predict(net: ResidualNet, patch_set, batch_size: int = 256) -> np.ndarray:
    x = patch_set.stack() if isinstance(patch_set, PatchSet) else np.asarray(patch_set)
    out = []
    for s in range(0, len(x), batch_size):
        out.append(np.argmax(forward(net, x[s : s + batch_size]), axis=1))
    return CLASSES[np.concatenate(out)] if out else np.zeros(0, dtype=np.int64)


def evaluate_net(net: ResidualNet, patch_set: PatchSet) -> EvalReport:
    return evaluate(zip(patch_set.labels(), predict(net, patch_set)))


def _accuracy(net, patch_set) -> float:
    if len(patch_set) == 0:
        return 0.0
    return float(np.mean(predict(net, patch_set) == patch_set.labels()))


def train(
    net: ResidualNet,
    split: SplitResult,
    epochs: int = 30,
    lr: float = 0.01,
    momentum: float = 0.9,
    lr_decay: tuple = (0.6, 0.85),
    seed: int = 0,
    batch_size: int = 32,
    decay_factor: float = 0.1,
    weight_decay: float = 0.0,
    standardize: bool = True,
    log=None,
):
    """Mini-batch SGD with momentum; the learning rate is multiplied by
    ``decay_factor`` once each epoch passes a fraction listed in ``lr_decay``.

    With ``standardize`` the per-band mean and std of the training patches
    are frozen into the net as its input normalisation (unless already set).
    """
    if len(split.train) == 0:
        raise ValueError("empty training split")
    net = net.copy()
    X = split.train.stack().astype(net.dtype)
    y = split.train.labels()
    yi = label_indices(y)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed))))
    if standardize and net.input_shift is None:
        flat = X.reshape(-1, X.shape[-1]).astype(np.float64)
        net.set_input_norm(flat.mean(axis=0), 1.0 / np.maximum(flat.std(axis=0), 1e-6))
    velocity = np.zeros_like(net.params)
    milestones = [int(round(f * epochs)) for f in lr_decay]
    report = TrainReport()
    for epoch in range(epochs):
        rate = lr * decay_factor ** sum(epoch >= m for m in milestones)
        order = rng.permutation(len(y))
        loss_sum, correct = 0.0, 0
        for s in range(0, len(order), batch_size):
            sel = order[s : s + batch_size]
            loss, grad, logits = _loss_grad_logits(net, X[sel], yi[sel])
            if weight_decay:
                grad = grad + weight_decay * net.params
            velocity = momentum * velocity - rate * grad
            net.params += velocity.astype(net.dtype)
            loss_sum += loss * len(sel)
            # running accuracy, measured on the forward pass before each update
            correct += int(np.sum(np.argmax(logits, axis=1) == yi[sel]))
        rec = EpochRecord(epoch + 1, loss_sum / len(y), correct / len(y), _accuracy(net, split.validation))
        report.epochs.append(rec)
        if log is not None:
            log(rec)
    if len(split.test):
        report.final_test_accuracy = _accuracy(net, split.test)
    return net, report


# --- serialization -------------------------------------------------------------
# file = u64 little-endian header length | UTF-8 JSON header | little-endian f32 parameter blob


def save_net(net: ResidualNet, path) -> None:
    header = {
        "config": asdict(net.config),
        "layout": {k: {"offset": off, "shape": list(shape)} for k, (off, shape) in net.layout.items()},
        "param_count": int(net.params.size),
        "input_shift": None if net.input_shift is None else [float(v) for v in net.input_shift],
        "input_scale": None if net.input_scale is None else [float(v) for v in net.input_scale],
    }
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(hb)))
        fh.write(hb)
        fh.write(net.params.astype("<f4").tobytes())


def load_net(path) -> ResidualNet:
    raw = Path(path).read_bytes()
    (hlen,) = struct.unpack_from("<Q", raw)
    header = json.loads(raw[8 : 8 + hlen].decode("utf-8"))
    config = NetConfig(**header["config"])
    params = np.frombuffer(raw, dtype="<f4", count=header["param_count"], offset=8 + hlen)
    net = ResidualNet(config, params)
    if header.get("input_shift") is not None:
        net.set_input_norm(header["input_shift"], header["input_scale"])
    return net
