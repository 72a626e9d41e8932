"""Layered CNN with per-layer representation taps and binary checkpoints.

A model is an ordered list of :class:`LayerSpec` entries. Trainable layers
(conv and dense) are the tap points, numbered from 1 in forward order; a
conv layer's tap is read after its ReLU and the max-pool that follows it.
The output layer is the last tap and carries no activation.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ContractError, DimensionError, IngestionError
from .ops import conv2d, dense, maxpool2d
from .tensor import Tensor, no_grad, parameter

CONV = "conv5x5"
POOL = "maxpool2x2"
DENSE = "dense"
OUTPUT = "output"
KERNEL = 5

CHECKPOINT_MAGIC = b"FEDCKA-CKPT"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    units: int = 0
    activation: str = "none"

    def __post_init__(self):
        if self.kind not in (CONV, POOL, DENSE, OUTPUT):
            raise ContractError(f"unknown layer kind {self.kind!r}")
        if self.kind != POOL and self.units < 1:
            raise ContractError(f"{self.kind} layer needs a positive unit count")
        if self.activation not in ("relu", "none"):
            raise ContractError(f"unknown activation {self.activation!r}")

    @property
    def trainable(self) -> bool:
        return self.kind in (CONV, DENSE, OUTPUT)


class Model:
    """Parameters plus the layer recipe that consumes them.

    ``taps`` are 1-based positions into the trainable layers; ``tap_names``
    gives their human names (``conv1``, ``fc3``, ``out``, ...).
    """

    def __init__(self, specs: Sequence[LayerSpec], input_shape: Tuple[int, int, int],
                 params: Optional[List[Tensor]] = None, seed: int = 0):
        self.specs = tuple(specs)
        self.input_shape = tuple(int(v) for v in input_shape)
        if not self.specs or self.specs[-1].kind != OUTPUT:
            raise ContractError("the last layer must be the output layer")
        self._plan = self._build_plan()
        if params is None:
            params = self._init_params(seed)
        expected = self.param_shapes()
        if [p.shape for p in params] != [s for _, s in expected]:
            raise DimensionError("parameter shapes do not match the layer recipe")
        for p, (name, _) in zip(params, expected):
            p.name = name
            p.requires_grad = True
        self.params = list(params)

    # -- structure ------------------------------------------------------------

    def _build_plan(self):
        """Resolve shapes and names; returns one entry per spec."""
        plan = []
        shape = self.input_shape
        n_conv = n_dense = 0
        for i, spec in enumerate(self.specs):
            if spec.kind == CONV:
                if len(shape) != 3:
                    raise ContractError("conv layer after a dense layer")
                c, h, w = shape
                if h < KERNEL or w < KERNEL:
                    raise DimensionError(f"spatial size {h}x{w} too small for a {KERNEL}x{KERNEL} conv")
                n_conv += 1
                name = f"conv{n_conv}"
                pshapes = [(spec.units, c, KERNEL, KERNEL), (spec.units,)]
                shape = (spec.units, h - KERNEL + 1, w - KERNEL + 1)
            elif spec.kind == POOL:
                c, h, w = shape
                if h % 2 or w % 2:
                    raise DimensionError(f"max-pool needs even spatial dims, got {h}x{w}")
                name = None
                pshapes = []
                shape = (c, h // 2, w // 2)
            else:
                fan_in = int(np.prod(shape))
                if spec.kind == DENSE:
                    n_dense += 1
                    name = f"fc{n_dense}"
                else:
                    name = "out"
                pshapes = [(fan_in, spec.units), (spec.units,)]
                shape = (spec.units,)
            plan.append((name, pshapes, shape))
        return plan

    def param_shapes(self) -> List[Tuple[str, Tuple[int, ...]]]:
        out = []
        for name, pshapes, _ in self._plan:
            if name is None:
                continue
            out.append((f"{name}.weight", pshapes[0]))
            out.append((f"{name}.bias", pshapes[1]))
        return out

    def _init_params(self, seed: int) -> List[Tensor]:
        rng = np.random.default_rng(seed)
        params = []
        for name, shape in self.param_shapes():
            if name.endswith(".bias"):
                params.append(parameter(np.zeros(shape), name))
                continue
            fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
            bound = np.sqrt(6.0 / fan_in)
            params.append(parameter(rng.uniform(-bound, bound, size=shape), name))
        return params

    @property
    def tap_names(self) -> List[str]:
        return [name for name, _, _ in self._plan if name is not None]

    @property
    def num_taps(self) -> int:
        return len(self.tap_names)

    @property
    def projection_tap(self) -> int:
        """1-based tap of the last hidden layer (the projection read by MOON)."""
        return self.num_taps - 1

    @property
    def num_classes(self) -> int:
        return self.specs[-1].units

    def tap_features(self) -> List[int]:
        """Flattened feature count of each tap."""
        feats = []
        for i, (name, _, shape) in enumerate(self._plan):
            if name is None:
                continue
            nxt = self.specs[i + 1] if i + 1 < len(self.specs) else None
            if nxt is not None and nxt.kind == POOL:
                shape = self._plan[i + 1][2]
            feats.append(int(np.prod(shape)))
        return feats

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.params))

    # -- forward --------------------------------------------------------------

    def forward(self, x, m: int = 0, stop_after_tap: bool = False
                ) -> Tuple[Optional[Tensor], List[Tensor]]:
        """Run the network and capture the first ``m`` taps.

        Args:
            x: batch of shape (B, C, H, W), Tensor or array.
            m: number of taps to capture, 0..num_taps.
            stop_after_tap: stop as soon as tap ``m`` is captured and return
                ``None`` for the logits. Used for the frozen reference models
                whose logits are never needed.

        Returns:
            (logits, taps) where every tap is flattened to (B, features).
        """
        if not 0 <= m <= self.num_taps:
            raise ContractError(f"tap count must lie in [0, {self.num_taps}], got {m}")
        h = x if isinstance(x, Tensor) else Tensor(x)
        if h.shape[1:] != self.input_shape:
            raise DimensionError(f"expected input (B, {self.input_shape}), got {h.shape}")
        taps: List[Tensor] = []
        k = 0
        pending = False
        for spec, (name, _, _) in zip(self.specs, self._plan):
            if spec.kind == POOL:
                h = maxpool2d(h, 2)
            else:
                if pending:
                    taps.append(h.flatten_rows())
                    pending = False
                    if stop_after_tap and len(taps) == m:
                        return None, taps
                w, b = self.params[2 * k], self.params[2 * k + 1]
                k += 1
                if spec.kind == CONV:
                    h = conv2d(h, w, b)
                else:
                    if h.ndim != 2:
                        h = h.flatten_rows()
                    h = dense(h, w, b)
                if spec.activation == "relu":
                    h = h.relu()
                pending = len(taps) < m
        if pending:
            taps.append(h.flatten_rows())
        return h, taps

    __call__ = forward

    def predict(self, x, batch_size: int = 500) -> np.ndarray:
        """Arg-max class per row, computed without recording a tape."""
        preds = []
        with no_grad():
            for start in range(0, len(x), batch_size):
                logits, _ = self.forward(x[start:start + batch_size])
                preds.append(logits.data.argmax(axis=1))
        return np.concatenate(preds) if preds else np.zeros(0, dtype=np.intp)

    # -- parameter vectors ------------------------------------------------------

    def get_flat(self) -> np.ndarray:
        return np.concatenate([p.data.ravel() for p in self.params])

    def set_flat(self, vec: np.ndarray) -> None:
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.num_parameters(),):
            raise DimensionError(f"expected {self.num_parameters()} values, got {vec.shape}")
        offset = 0
        for p in self.params:
            n = p.size
            p.data = vec[offset:offset + n].reshape(p.shape).copy()
            offset += n

    def same_architecture(self, other: "Model") -> bool:
        return self.specs == other.specs and self.input_shape == other.input_shape

    def clone(self) -> "Model":
        params = [parameter(p.data.copy(), p.name) for p in self.params]
        return Model(self.specs, self.input_shape, params=params)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def naturally_similar_layers(model: Model, m: int = 2) -> List[int]:
    """The first ``m`` trainable layers, as 1-based tap indices.

    For plain CNNs the layers closest to the input are the ones that stay
    similar across clients, so these are the ones to regularize.
    """
    if m < 1 or m > model.num_taps:
        raise ContractError(f"m must lie in [1, {model.num_taps}], got {m}")
    return list(range(1, m + 1))


def base_cnn_specs(num_classes: int) -> List[LayerSpec]:
    return [
        LayerSpec(CONV, 16, "relu"),
        LayerSpec(POOL),
        LayerSpec(CONV, 32, "relu"),
        LayerSpec(POOL),
        LayerSpec(DENSE, 120, "relu"),
        LayerSpec(DENSE, 84, "relu"),
        LayerSpec(DENSE, 84, "relu"),
        LayerSpec(DENSE, 256, "relu"),
        LayerSpec(OUTPUT, num_classes),
    ]


def build_base_cnn(num_classes: int = 10, seed: int = 0,
                    input_shape: Tuple[int, int, int] = (3, 32, 32)) -> Model:
    """Two 5x5 conv layers (16, 32 channels) each followed by 2x2 max-pool,
    dense layers of 120, 84, 84 and 256 units, then the output layer."""
    if num_classes < 2:
        raise ContractError(f"num_classes must be at least 2, got {num_classes}")
    return Model(base_cnn_specs(num_classes), input_shape, seed=seed)


def build_deep_cnn(num_classes: int = 10, seed: int = 0,
                   input_shape: Tuple[int, int, int] = (3, 32, 32),
                   extra_layers: int = 24, width: int = 512) -> Model:
    """The base CNN's encoder with a much deeper dense stack.

    Stands in for a large model in timing benchmarks: the first two layers
    are identical to :func:`build_base_cnn`, everything after them grows.
    """
    if num_classes < 2:
        raise ContractError(f"num_classes must be at least 2, got {num_classes}")
    specs = base_cnn_specs(num_classes)[:4]
    specs += [LayerSpec(DENSE, width, "relu") for _ in range(extra_layers)]
    specs += [LayerSpec(DENSE, 256, "relu"), LayerSpec(OUTPUT, num_classes)]
    return Model(specs, input_shape, seed=seed)


# -- checkpoints ----------------------------------------------------------------
#
# Layout: magic | u32 version | u32 header length | UTF-8 JSON header | f64 LE blob.
# The header lists input shape, layer recipe and parameter names/shapes in blob order.

def save_checkpoint(model: Model, path: Union[str, Path]) -> None:
    header = {
        "input_shape": list(model.input_shape),
        "layers": [asdict(s) for s in model.specs],
        "params": [{"name": n, "shape": list(s)} for n, s in model.param_shapes()],
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    blob = model.get_flat().astype("<f8").tobytes()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(hbytes)))
        f.write(hbytes)
        f.write(blob)


def load_checkpoint(path: Union[str, Path]) -> Model:
    raw = Path(path).read_bytes()
    n_magic = len(CHECKPOINT_MAGIC)
    if raw[:n_magic] != CHECKPOINT_MAGIC:
        raise IngestionError(f"{path}: not a model checkpoint (bad magic)")
    if len(raw) < n_magic + 8:
        raise IngestionError(f"{path}: truncated header")
    version, hlen = struct.unpack_from("<II", raw, n_magic)
    if version != CHECKPOINT_VERSION:
        raise IngestionError(f"{path}: unsupported checkpoint version {version}")
    start = n_magic + 8
    try:
        header = json.loads(raw[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise IngestionError(f"{path}: corrupt header: {exc}") from exc
    specs = [LayerSpec(**d) for d in header["layers"]]
    model = Model(specs, tuple(header["input_shape"]), seed=0)
    if [list(s) for _, s in model.param_shapes()] != [p["shape"] for p in header["params"]]:
        raise IngestionError(f"{path}: parameter manifest does not match layer recipe")
    blob = raw[start + hlen:]
    expected = 8 * model.num_parameters()
    if len(blob) != expected:
        raise IngestionError(
            f"{path}: parameter blob at byte offset {start + hlen} holds {len(blob)} bytes, "
            f"expected {expected}"
        )
    model.set_flat(np.frombuffer(blob, dtype="<f8").astype(np.float64))
    return model
