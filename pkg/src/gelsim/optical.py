"""Residual optical model: rendered geometry maps -> sensor image residual.

A compact convolutional encoder-decoder (4->16->32->32->16->3 channels, 3x3
kernels, two stride-2 stages down and two nearest-neighbour upsamples back,
one skip connection at full resolution, tanh output in [-1, 1]) maps the
normalized [normal_x, normal_y, normal_z, depth] stack to a residual RGB
image that is added onto a fixed contact-free idle frame. Forward, backward,
and Adam are implemented here directly on numpy arrays; gradients are exact
and are checked against finite differences in the test suite.

Tensors are NHWC float64 internally; weights serialize as float32.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .camera import TactileGeometryFrame


class OpticalError(ValueError):
    pass


# ---------------------------------------------------------------------------
# layer primitives (3x3 convolutions as nine shifted matmuls)
# ---------------------------------------------------------------------------

def conv3x3_forward(x, W, b, stride=1):
    n, h, w, cin = x.shape
    cout = W.shape[3]
    ho = (h + 2 - 3) // stride + 1
    wo = (w + 2 - 3) // stride + 1
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    y = np.tile(b, (n, ho, wo, 1))
    for di in range(3):
        for dj in range(3):
            sl = xp[:, di:di + ho * stride:stride, dj:dj + wo * stride:stride, :]
            y += sl @ W[di, dj]
    return y


def conv3x3_backward(x, W, dout, stride=1):
    n, h, w, cin = x.shape
    ho, wo = dout.shape[1:3]
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    dxp = np.zeros_like(xp)
    dW = np.zeros_like(W)
    db = dout.sum(axis=(0, 1, 2))
    flat_dout = dout.reshape(-1, dout.shape[3])
    for di in range(3):
        for dj in range(3):
            sl = xp[:, di:di + ho * stride:stride, dj:dj + wo * stride:stride, :]
            dW[di, dj] = sl.reshape(-1, cin).T @ flat_dout
            dxp[:, di:di + ho * stride:stride, dj:dj + wo * stride:stride, :] += dout @ W[di, dj].T
    return dxp[:, 1:-1, 1:-1, :], dW, db


def elu_forward(x):
    neg = x < 0
    return np.where(neg, np.expm1(x), x)


def elu_backward(y, dout):
    # for ELU(alpha=1): dy/dx = 1 where x >= 0 else exp(x) = y + 1
    return np.where(y < 0, y + 1.0, 1.0) * dout


def upsample2_forward(x):
    return x.repeat(2, axis=1).repeat(2, axis=2)


def upsample2_backward(dout):
    n, h, w, c = dout.shape
    return dout.reshape(n, h // 2, 2, w // 2, 2, c).sum(axis=(2, 4))


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

LAYER_SPECS = [
    # (name, in_ch, out_ch, stride)
    ("enc1", 4, 16, 1),
    ("enc2", 16, 32, 2),
    ("bott", 32, 32, 2),
    ("dec1", 32, 16, 1),  # preceded by a 2x upsample
    ("out", 16, 3, 1),  # preceded by 2x upsample + skip add from enc1
]


@dataclass
class OpticalModel:
    weights: dict = field(default_factory=dict)  # name -> (W, b)

    @staticmethod
    def initialize(seed: int = 0) -> "OpticalModel":
        """Uniform fan-in init: U(-k, k) with k = gain / sqrt(9 * in_ch).

        The output layer uses a small gain so the freshly initialized model
        predicts a near-zero residual; an untouched sensor then composes to
        (almost) the idle image before any training.
        """
        rng = np.random.default_rng(seed)
        weights = {}
        for name, cin, cout, _ in LAYER_SPECS:
            gain = 0.02 if name == "out" else 1.0
            k = gain / np.sqrt(9.0 * cin)
            W = rng.uniform(-k, k, size=(3, 3, cin, cout))
            b = rng.uniform(-k, k, size=cout)
            weights[name] = (W, b)
        return OpticalModel(weights)

    def n_params(self) -> int:
        return sum(W.size + b.size for W, b in self.weights.values())

    # -- inference -----------------------------------------------------
    def forward(self, x: np.ndarray, want_cache: bool = False):
        """x: (N, H, W, 4) in [0, 1] -> residual (N, H, W, 3) in [-1, 1]."""
        x = np.asarray(x, dtype=np.float64)
        squeeze = x.ndim == 3
        if squeeze:
            x = x[None]
        if x.shape[3] != 4:
            raise OpticalError(f"expected 4 input channels, got {x.shape[3]}")
        if x.shape[1] % 4 or x.shape[2] % 4:
            raise OpticalError("spatial size must be a multiple of 4")
        w = self.weights
        c = {}
        c["x"] = x
        c["enc1"] = elu_forward(conv3x3_forward(x, *w["enc1"], stride=1))
        c["enc2"] = elu_forward(conv3x3_forward(c["enc1"], *w["enc2"], stride=2))
        c["bott"] = elu_forward(conv3x3_forward(c["enc2"], *w["bott"], stride=2))
        c["up1"] = upsample2_forward(c["bott"])
        c["dec1"] = elu_forward(conv3x3_forward(c["up1"], *w["dec1"], stride=1))
        c["up2"] = upsample2_forward(c["dec1"])
        c["skip"] = c["up2"] + c["enc1"]
        c["pre"] = conv3x3_forward(c["skip"], *w["out"], stride=1)
        y = np.tanh(c["pre"])
        c["y"] = y
        if want_cache:
            return (y[0], c) if squeeze else (y, c)
        return y[0] if squeeze else y

    def backward(self, cache: dict, dy: np.ndarray):
        """Gradients of a scalar loss w.r.t. all parameters and the input."""
        w = self.weights
        grads = {}
        dpre = (1.0 - cache["y"] ** 2) * dy
        dskip, grads["out"], gb_out = conv3x3_backward(cache["skip"], w["out"][0], dpre, stride=1)
        grads["out"] = (grads["out"], gb_out)
        denc1_skip = dskip  # skip add distributes the gradient
        ddec1 = upsample2_backward(dskip)
        ddec1 = elu_backward(cache["dec1"], ddec1)
        dup1, gW, gb = conv3x3_backward(cache["up1"], w["dec1"][0], ddec1, stride=1)
        grads["dec1"] = (gW, gb)
        dbott = upsample2_backward(dup1)
        dbott = elu_backward(cache["bott"], dbott)
        denc2, gW, gb = conv3x3_backward(cache["enc2"], w["bott"][0], dbott, stride=2)
        grads["bott"] = (gW, gb)
        denc2 = elu_backward(cache["enc2"], denc2)
        denc1, gW, gb = conv3x3_backward(cache["enc1"], w["enc2"][0], denc2, stride=2)
        grads["enc2"] = (gW, gb)
        denc1 = denc1 + denc1_skip
        denc1 = elu_backward(cache["enc1"], denc1)
        dx, gW, gb = conv3x3_backward(cache["x"], w["enc1"][0], denc1, stride=1)
        grads["enc1"] = (gW, gb)
        return grads, dx


# ---------------------------------------------------------------------------
# input normalization and composition
# ---------------------------------------------------------------------------

def normalize_inputs(frame: TactileGeometryFrame) -> np.ndarray:
    """(H, W, 4) stack [nx, ny, nz, depth], all mapped into [0, 1].

    Invalid pixels already carry normal (0, 0, -1) and depth max_depth,
    which map to (0.5, 0.5, 0, 1).
    """
    nrm = (frame.normal + 1.0) * 0.5
    depth = frame.depth / frame.max_depth
    out = np.concatenate([nrm, depth[..., None]], axis=-1)
    return np.clip(out, 0.0, 1.0)


def compose(idle: np.ndarray, residual: np.ndarray) -> np.ndarray:
    idle = np.asarray(idle, dtype=np.float64)
    residual = np.asarray(residual, dtype=np.float64)
    if idle.shape != residual.shape:
        raise OpticalError(f"shape mismatch: idle {idle.shape} vs residual {residual.shape}")
    return np.clip(idle + residual, 0.0, 1.0)


def predict_composed(model: OpticalModel, opt_input: np.ndarray, idle: np.ndarray) -> np.ndarray:
    return compose(idle, model.forward(opt_input))


def predict_direct(model: OpticalModel, opt_input: np.ndarray) -> np.ndarray:
    """Direct-regression readout: tanh output remapped to [0, 1]."""
    return (model.forward(opt_input) + 1.0) * 0.5


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    batch_size: int = 8
    lr: float = 3e-4
    weight_decay: float = 1e-4
    epochs: int = 100
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if min(self.batch_size, self.lr, self.epochs) <= 0:
            raise OpticalError("train config values must be positive")


def train(model: OpticalModel, dataset, cfg: TrainConfig):
    """Mini-batch Adam on per-pixel squared error.

    dataset: list of (input (H, W, 4), target (H, W, 3)) pairs; targets are
    residuals in [-1, 1] (or remapped raw frames for the direct-regression
    ablation). Returns (model, per-epoch mean loss history). L2 weight decay
    is added to the gradients, mirroring the usual Adam usage.
    """
    if not dataset:
        raise OpticalError("empty training dataset")
    rng = np.random.default_rng(cfg.seed)
    inputs = np.stack([np.asarray(x, dtype=np.float64) for x, _ in dataset])
    targets = np.stack([np.asarray(t, dtype=np.float64) for _, t in dataset])

    m_state = {k: (np.zeros_like(W), np.zeros_like(b)) for k, (W, b) in model.weights.items()}
    v_state = {k: (np.zeros_like(W), np.zeros_like(b)) for k, (W, b) in model.weights.items()}
    step = 0
    history = []
    n = len(dataset)

    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        n_batches = 0
        for s in range(0, n, cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            xb, tb = inputs[idx], targets[idx]
            pred, cache = model.forward(xb, want_cache=True)
            diff = pred - tb
            loss = float(np.mean(diff * diff))
            if not np.isfinite(loss):
                raise OpticalError(f"non-finite loss at epoch {epoch}, batch {n_batches}")
            dy = (2.0 / diff.size) * diff
            grads, _ = model.backward(cache, dy)
            step += 1
            bc1 = 1.0 - cfg.beta1 ** step
            bc2 = 1.0 - cfg.beta2 ** step
            for name, (W, b) in model.weights.items():
                gW, gb = grads[name]
                gW = gW + cfg.weight_decay * W
                gb = gb + cfg.weight_decay * b
                mW, mb = m_state[name]
                vW, vb = v_state[name]
                mW[:] = cfg.beta1 * mW + (1 - cfg.beta1) * gW
                mb[:] = cfg.beta1 * mb + (1 - cfg.beta1) * gb
                vW[:] = cfg.beta2 * vW + (1 - cfg.beta2) * gW ** 2
                vb[:] = cfg.beta2 * vb + (1 - cfg.beta2) * gb ** 2
                W -= cfg.lr * (mW / bc1) / (np.sqrt(vW / bc2) + cfg.eps)
                b -= cfg.lr * (mb / bc1) / (np.sqrt(vb / bc2) + cfg.eps)
            epoch_loss += loss
            n_batches += 1
        history.append(epoch_loss / n_batches)
    return model, history


# ---------------------------------------------------------------------------
# synthetic shading camera (stand-in for real sensor frames)
# ---------------------------------------------------------------------------

# oblique lights: shading then responds strongly to the surface slope, so
# contact dimples leave a clear signature in the pseudo-real frames
_LIGHTS = np.array([[0.70, 0.25, -0.67], [-0.60, -0.45, -0.66]])
_LIGHTS = _LIGHTS / np.linalg.norm(_LIGHTS, axis=1, keepdims=True)
_LIGHT_WEIGHTS = (0.62, 0.5)
_AMBIENT = 0.22


def synth_shade(frame: TactileGeometryFrame, pattern: np.ndarray) -> np.ndarray:
    """Deterministic Lambertian shading of the rendered surface.

    Two fixed virtual lights modulate the pattern texture; serves as the
    synthetic ground-truth camera so training targets exist without
    hardware.
    """
    pattern = np.asarray(pattern, dtype=np.float64)
    if pattern.shape[:2] != frame.normal.shape[:2]:
        raise OpticalError("pattern resolution must match the frame")
    shade = np.full(frame.normal.shape[:2], _AMBIENT)
    for (light, wgt) in zip(_LIGHTS, _LIGHT_WEIGHTS):
        lam = np.maximum(0.0, -(frame.normal @ light))
        shade = shade + wgt * lam
    return np.clip(pattern * shade[..., None], 0.0, 1.0)


def make_pattern(height: int, width: int, seed: int = 0) -> np.ndarray:
    """Smooth random RGB texture, mimicking a speckled sensor coating."""
    rng = np.random.default_rng(seed)
    img = rng.uniform(0.25, 1.0, size=(height, width, 3))
    for _ in range(3):  # separable box blur
        img = (np.roll(img, 1, axis=0) + img + np.roll(img, -1, axis=0)) / 3.0
        img = (np.roll(img, 1, axis=1) + img + np.roll(img, -1, axis=1)) / 3.0
    lo, hi = img.min(), img.max()
    return 0.3 + 0.65 * (img - lo) / (hi - lo)


# ---------------------------------------------------------------------------
# weights file: magic OPTW, version, layer table, float32 parameters
# ---------------------------------------------------------------------------

WEIGHTS_MAGIC = b"OPTW"
WEIGHTS_VERSION = 1
_LAYER_TYPE_IDS = {1: "conv3x3_s1", 2: "conv3x3_s2"}


def save_weights(model: OpticalModel, path) -> None:
    with open(path, "wb") as fh:
        fh.write(WEIGHTS_MAGIC)
        fh.write(struct.pack("<I", WEIGHTS_VERSION))
        fh.write(struct.pack("<I", len(LAYER_SPECS)))
        for name, cin, cout, stride in LAYER_SPECS:
            type_id = 2 if stride == 2 else 1
            fh.write(struct.pack("<IIII", type_id, cin, cout, 3))
        for name, _, _, _ in LAYER_SPECS:
            W, b = model.weights[name]
            fh.write(W.astype("<f4").tobytes())
            fh.write(b.astype("<f4").tobytes())


def load_weights(path) -> OpticalModel:
    with open(path, "rb") as fh:
        if fh.read(4) != WEIGHTS_MAGIC:
            raise OpticalError(f"{path}: bad magic")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != WEIGHTS_VERSION:
            raise OpticalError(f"{path}: unsupported version {version}")
        (n_layers,) = struct.unpack("<I", fh.read(4))
        if n_layers != len(LAYER_SPECS):
            raise OpticalError(f"{path}: expected {len(LAYER_SPECS)} layers, found {n_layers}")
        table = []
        for _ in range(n_layers):
            type_id, cin, cout, k = struct.unpack("<IIII", fh.read(16))
            if type_id not in _LAYER_TYPE_IDS or k != 3:
                raise OpticalError(f"{path}: unknown layer descriptor")
            table.append((type_id, cin, cout))
        weights = {}
        for (name, cin, cout, stride), (type_id, fcin, fcout) in zip(LAYER_SPECS, table):
            if (fcin, fcout) != (cin, cout):
                raise OpticalError(f"{path}: layer {name} channel mismatch")
            W = np.frombuffer(fh.read(9 * cin * cout * 4), dtype="<f4").reshape(3, 3, cin, cout)
            b = np.frombuffer(fh.read(cout * 4), dtype="<f4")
            weights[name] = (W.astype(np.float64), b.astype(np.float64))
    return OpticalModel(weights)
