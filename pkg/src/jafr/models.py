"""Small twice-differentiable classifiers and the cross-entropy loss."""
from __future__ import annotations

import contextlib
import io
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import ContractViolation, Tensor

ACTIVATIONS = {"relu": ad.relu, "softplus": ad.softplus}

CHECKPOINT_MAGIC = b"JAFRCKPT"
CHECKPOINT_VERSION = 1


@dataclass
class ModelSpec:
    architecture: str = "small-cnn"  # "mlp" | "small-cnn"
    input_shape: tuple[int, int, int] = (1, 16, 16)
    num_classes: int = 10
    activation: str = "relu"
    hidden: tuple[int, ...] = (128,)
    conv_channels: tuple[int, ...] = (16, 32)
    kernel_size: int = 3
    zero_init_head: bool = False

    def __post_init__(self):
        self.input_shape = tuple(int(v) for v in self.input_shape)
        self.hidden = tuple(int(v) for v in self.hidden)
        self.conv_channels = tuple(int(v) for v in self.conv_channels)
        if self.architecture not in ("mlp", "small-cnn"):
            raise ContractViolation(f"unknown architecture {self.architecture!r}")
        if self.activation not in ACTIVATIONS:
            raise ContractViolation(f"unknown activation {self.activation!r}")
        if len(self.input_shape) != 3:
            raise ContractViolation("input_shape must be (c, h, w)")
        if self.num_classes < 2:
            raise ContractViolation("need at least two classes")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(**d)


class Model:
    """A classifier whose parameters are autodiff leaves.

    ``params`` is an ordered list; the order defines the checkpoint layout.
    """

    def __init__(self, spec: ModelSpec, seed: int = 0):
        self.spec = spec
        self.params: list[Tensor] = []
        self.param_names: list[str] = []
        rng = np.random.default_rng(seed)
        self._layers: list[tuple] = []
        c, h, w = spec.input_shape
        if spec.architecture == "small-cnn":
            k = spec.kernel_size
            for i, out_c in enumerate(spec.conv_channels):
                fan_in = c * k * k
                W = self._param(f"conv{i}.weight", rng, (fan_in, out_c), fan_in)
                b = self._param(f"conv{i}.bias", rng, (out_c,), fan_in)
                self._layers.append(("conv", W, b, (c, h, w), out_c))
                c = out_c
                self._layers.append(("pool", (c, h, w)))
                h, w = h // 2, w // 2
            features = c * h * w
        else:
            features = c * h * w
        self._layers.append(("flatten",))
        dims = [features, *spec.hidden, spec.num_classes]
        for i, (din, dout) in enumerate(zip(dims[:-1], dims[1:])):
            last = i == len(dims) - 2
            W = self._param(f"fc{i}.weight", rng, (din, dout), din, zero=last and spec.zero_init_head)
            b = self._param(f"fc{i}.bias", rng, (dout,), din, zero=last and spec.zero_init_head)
            self._layers.append(("linear", W, b, last))

    def _param(self, name, rng, shape, fan_in, zero=False) -> Tensor:
        bound = 1.0 / np.sqrt(fan_in)
        data = np.zeros(shape) if zero else rng.uniform(-bound, bound, size=shape)
        t = Tensor(data, requires_grad=True)
        self.params.append(t)
        self.param_names.append(name)
        return t

    @contextlib.contextmanager
    def frozen(self):
        """Treat parameters as constants inside the block (input-gradient work)."""
        prev = [p.requires_grad for p in self.params]
        for p in self.params:
            p.requires_grad = False
        try:
            yield self
        finally:
            for p, flag in zip(self.params, prev):
                p.requires_grad = flag

    @property
    def num_params(self) -> int:
        return sum(p.size for p in self.params)

    def __call__(self, x) -> Tensor:
        return self.forward(x)

    def forward(self, x) -> Tensor:
        """Logits ``(n, k)`` for a batch ``(n, c, h, w)``; a single image gives ``(k,)``."""
        x = x if isinstance(x, Tensor) else Tensor(x)
        single = x.ndim == 3
        if single:
            x = ad.reshape(x, (1,) + x.shape)
        if x.shape[1:] != self.spec.input_shape:
            raise ContractViolation(f"input shape {x.shape[1:]} does not match {self.spec.input_shape}")
        act = ACTIVATIONS[self.spec.activation]
        n = x.shape[0]
        out = x
        for layer in self._layers:
            kind = layer[0]
            if kind == "conv":
                # activations are kept channels-last between conv layers
                _, W, b, (c, h, w), out_c = layer
                if out.shape[1:] == (c, h, w) and out is x:
                    out = ad.transpose(out, (0, 2, 3, 1))
                cols = ad.im2col(out, self.spec.kernel_size)  # (n, h*w, k*k*c)
                y = ad.add(ad.matmul(cols, W), b)
                out = act(ad.reshape(y, (n, h, w, out_c)))
            elif kind == "pool":
                c, h, w = layer[1]
                ho, wo = h // 2, w // 2
                if (ho * 2, wo * 2) != (h, w):
                    out = ad.reshape(out, (n, h, w * c))
                    out = ad._slice_axis(out, 1, 0, ho * 2)
                    out = ad.reshape(out, (n, ho * 2, w, c))
                    out = ad._slice_axis(out, 2, 0, wo * 2)
                out = ad.reshape(out, (n, ho, 2, wo, 2, c))
                out = ad.mean(out, axis=(2, 4))
            elif kind == "flatten":
                out = ad.reshape(out, (n, -1))
            else:
                _, W, b, last = layer
                out = ad.add(ad.matmul(out, W), b)
                if not last:
                    out = act(out)
        if single:
            out = ad.reshape(out, (self.spec.num_classes,))
        return out

    # -- parameter vector helpers ------------------------------------------
    def get_flat(self) -> np.ndarray:
        return np.concatenate([p.data.ravel() for p in self.params])

    def set_flat(self, flat: np.ndarray) -> None:
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != self.num_params:
            raise ContractViolation(f"expected {self.num_params} values, got {flat.size}")
        pos = 0
        for p in self.params:
            p.data = flat[pos:pos + p.size].reshape(p.shape).copy()
            pos += p.size

    def copy(self) -> "Model":
        other = Model(self.spec, seed=0)
        other.set_flat(self.get_flat())
        return other


def one_hot(labels, k: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.size, k))
    out[np.arange(labels.size), labels] = 1.0
    return out


def cross_entropy(logits: Tensor, y, reduction: str = "mean") -> Tensor:
    """``-y . log softmax(logits)`` per row, reduced by ``mean``, ``sum`` or ``none``.

    ``y`` must be one-hot with the same shape as ``logits``.
    """
    logits = logits if isinstance(logits, Tensor) else Tensor(logits)
    y = np.asarray(y.data if isinstance(y, Tensor) else y, dtype=np.float64)
    if y.shape != logits.shape:
        raise ContractViolation(f"label shape {y.shape} does not match logits {logits.shape}")
    if not (np.all((y == 0) | (y == 1)) and np.all(y.sum(axis=-1) == 1)):
        raise ContractViolation("labels must be one-hot")
    per = ad.neg(ad.tsum(ad.mul(ad.log_softmax(logits, axis=-1), y), axis=-1))
    if reduction == "none":
        return per
    if reduction == "sum":
        return ad.tsum(per)
    return ad.mean(per)


def jacobian(model: Model, x, y, create_graph: bool = True) -> tuple[Tensor, Tensor]:
    """Per-sample input gradients of the classification loss.

    Returns ``(J, per_sample_loss)``.  J has the shape of ``x``; because the
    loss is summed over the batch, row ``i`` of J is exactly the gradient of
    sample ``i``'s own loss.
    """
    xt = x if isinstance(x, Tensor) and x.requires_grad and x.is_leaf else Tensor(
        x.data if isinstance(x, Tensor) else x, requires_grad=True)
    single = xt.ndim == 3
    logits = model(xt)
    if single:
        logits = ad.reshape(logits, (1, -1))
        y = np.asarray(y, dtype=np.float64).reshape(1, -1)
    per = cross_entropy(logits, y, reduction="none")
    J = ad.grad(ad.tsum(per), xt, create_graph=create_graph)
    return J, per


def predict(model: Model, x: np.ndarray, batch_size: int = 500) -> np.ndarray:
    preds = []
    with ad.no_grad():
        for lo in range(0, len(x), batch_size):
            preds.append(np.argmax(model(Tensor(x[lo:lo + batch_size])).data, axis=-1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


# -- checkpoints --------------------------------------------------------------

def save_checkpoint(model: Model, path: str | Path) -> None:
    """Header (magic, version, spec JSON) followed by big-endian float64 params."""
    spec = model.spec.to_json().encode("utf-8")
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack(">II", CHECKPOINT_VERSION, len(spec)))
    buf.write(spec)
    flat = model.get_flat()
    buf.write(struct.pack(">Q", flat.size))
    buf.write(flat.astype(">f8").tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path: str | Path) -> Model:
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: bad checkpoint magic at offset 0")
    version, n = struct.unpack(">II", raw[8:16])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    spec = ModelSpec.from_dict(json.loads(raw[16:16 + n].decode("utf-8")))
    off = 16 + n
    (count,) = struct.unpack(">Q", raw[off:off + 8])
    off += 8
    payload = raw[off:]
    if len(payload) != 8 * count:
        raise ValueError(f"{path}: truncated parameter payload at offset {off}")
    model = Model(spec, seed=0)
    model.set_flat(np.frombuffer(payload, dtype=">f8").astype(np.float64))
    return model
