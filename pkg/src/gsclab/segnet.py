"""Small fully-convolutional segmentation model with a growing classifier head."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import ContractViolation, Tensor, conv2d, no_grad, relu

HEAD_INITS = ("random", "background_split")
NEW_ROW_STD = 0.01
# fixed input normalisation; images are rendered roughly in [0, 1]
INPUT_MEAN = 0.5
INPUT_STD = 0.25
MAGIC = b"GSC1"


@dataclass
class ForwardOutput:
    features: Tensor
    intermediate: list[Tensor]
    logits: Tensor


class SegNetwork:
    """Stack of 3x3 conv+relu blocks followed by a 1x1 classifier head.

    The head has one output per seen class plus the background channel at
    index 0.  ``step_boundaries[m]`` is the head width after step ``m``.
    """

    def __init__(self, n_base_classes: int, channels: Sequence[int] = (16, 16, 16),
                 in_channels: int = 3, kernel_size: int = 3, dtype=np.float32,
                 seed: int = 0, head_init: str = "random"):
        if n_base_classes < 1:
            raise ContractViolation("need at least one base class")
        if head_init not in HEAD_INITS:
            raise ContractViolation(f"head_init must be one of {HEAD_INITS}")
        if kernel_size % 2 == 0:
            raise ContractViolation("kernel_size must be odd")
        self.dtype = np.dtype(dtype)
        self.kernel_size = kernel_size
        self.head_init = head_init
        self.seed = seed
        self.steps_trained = 0
        rng = np.random.default_rng([seed, 0])
        self.blocks: list[tuple[Tensor, Tensor]] = []
        cin = in_channels
        for cout in channels:
            std = np.sqrt(2.0 / (cin * kernel_size * kernel_size))
            w = rng.normal(0.0, std, size=(cout, cin, kernel_size, kernel_size))
            self.blocks.append((Tensor(w.astype(self.dtype), requires_grad=True),
                                Tensor(np.zeros(cout, self.dtype), requires_grad=True)))
            cin = cout
        width = 1 + n_base_classes
        hw = rng.normal(0.0, NEW_ROW_STD, size=(width, cin, 1, 1))
        self.head_w = Tensor(hw.astype(self.dtype), requires_grad=True)
        self.head_b = Tensor(np.zeros(width, self.dtype), requires_grad=True)
        self.step_boundaries = [width]

    @property
    def n_outputs(self) -> int:
        return self.head_w.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.head_w.shape[1]

    @property
    def in_channels(self) -> int:
        return self.blocks[0][0].shape[1]

    def parameters(self) -> list[Tensor]:
        params = [p for block in self.blocks for p in block]
        return params + [self.head_w, self.head_b]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def forward(self, images) -> ForwardOutput:
        x = images.data if isinstance(images, Tensor) else np.asarray(images)
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ContractViolation(f"expected [N,{self.in_channels},H,W] images, got {x.shape}")
        x = Tensor(((x - INPUT_MEAN) / INPUT_STD).astype(self.dtype, copy=False))
        pad = self.kernel_size // 2
        intermediate = []
        for w, b in self.blocks:
            x = relu(conv2d(x, w, b, padding=pad))
            intermediate.append(x)
        logits = conv2d(x, self.head_w, self.head_b, padding=0)
        return ForwardOutput(x, intermediate, logits)

    __call__ = forward

    def expand_head(self, new_class_count: int) -> "SegNetwork":
        """Append ``new_class_count`` output rows, leaving old rows untouched."""
        if new_class_count < 1:
            raise ContractViolation("new_class_count must be >= 1")
        if self.steps_trained < 1:
            raise ContractViolation("expand_head called before step 0 was trained")
        rng = np.random.default_rng([self.seed, 1, len(self.step_boundaries)])
        f = self.feature_dim
        if self.head_init == "random":
            new_w = rng.normal(0.0, NEW_ROW_STD, size=(new_class_count, f, 1, 1)).astype(self.dtype)
            new_b = np.zeros(new_class_count, self.dtype)
        else:
            new_w = np.repeat(self.head_w.data[:1], new_class_count, axis=0)
            shift = np.log(new_class_count + 1.0)
            new_b = np.full(new_class_count, self.head_b.data[0] - shift, self.dtype)
        self.head_w = Tensor(np.concatenate([self.head_w.data, new_w]), requires_grad=True)
        self.head_b = Tensor(np.concatenate([self.head_b.data, new_b]), requires_grad=True)
        self.step_boundaries.append(self.n_outputs)
        return self

    def snapshot(self) -> "ModelSnapshot":
        return ModelSnapshot(
            arrays=tuple(p.data.copy() for p in self.parameters()),
            step_boundaries=tuple(self.step_boundaries),
            kernel_size=self.kernel_size,
            steps_trained=self.steps_trained,
        )


class ModelSnapshot:
    """Frozen copy of a network's parameters; inference only.

    ``n_forward`` counts forward calls so callers can check that a code path
    never consulted the old model.
    """

    def __init__(self, arrays: Sequence[np.ndarray], step_boundaries: Sequence[int],
                 kernel_size: int = 3, steps_trained: int = 0):
        self.arrays = tuple(np.array(a, copy=True) for a in arrays)
        for a in self.arrays:
            a.setflags(write=False)
        self.step_boundaries = tuple(int(b) for b in step_boundaries)
        self.kernel_size = kernel_size
        self.steps_trained = steps_trained
        self.n_forward = 0
        if self.arrays[-2].shape[0] != self.step_boundaries[-1]:
            raise ContractViolation("head width does not match step boundaries")
        if any(b1 >= b2 for b1, b2 in zip(self.step_boundaries, self.step_boundaries[1:])):
            raise ContractViolation("step boundaries must be strictly increasing")

    @property
    def n_outputs(self) -> int:
        return self.step_boundaries[-1]

    @property
    def dtype(self):
        return self.arrays[0].dtype

    def forward(self, images) -> ForwardOutput:
        self.n_forward += 1
        with no_grad():
            return self.restore().forward(images)

    __call__ = forward

    def restore(self, seed: int = 0, head_init: str = "random") -> SegNetwork:
        n_blocks = (len(self.arrays) - 2) // 2
        net = SegNetwork.__new__(SegNetwork)
        net.dtype = self.arrays[0].dtype
        net.kernel_size = self.kernel_size
        net.head_init = head_init
        net.seed = seed
        net.steps_trained = self.steps_trained
        net.blocks = [(Tensor(self.arrays[2 * i].copy(), requires_grad=True),
                       Tensor(self.arrays[2 * i + 1].copy(), requires_grad=True))
                      for i in range(n_blocks)]
        net.head_w = Tensor(self.arrays[-2].copy(), requires_grad=True)
        net.head_b = Tensor(self.arrays[-1].copy(), requires_grad=True)
        net.step_boundaries = list(self.step_boundaries)
        return net


# ------------------------------------------------------------- checkpoint
#
# Layout (all integers little-endian):
#   4 bytes   magic "GSC1"
#   u8        bytes per parameter value (4 or 8)
#   u8        kernel size
#   u32       steps trained
#   u32       number of step boundaries B, then B x u32
#   u32       number of tensors P, then per tensor: u8 ndim, ndim x u32 extents
#   payload   P tensors, C order, IEEE little-endian floats


def save_checkpoint(model: SegNetwork | ModelSnapshot, path) -> None:
    snap = model.snapshot() if isinstance(model, SegNetwork) else model
    width = snap.dtype.itemsize
    if width not in (4, 8):
        raise ContractViolation(f"cannot serialise dtype {snap.dtype}")
    parts = [MAGIC, struct.pack("<BBI", width, snap.kernel_size, snap.steps_trained)]
    parts.append(struct.pack(f"<I{len(snap.step_boundaries)}I", len(snap.step_boundaries),
                             *snap.step_boundaries))
    parts.append(struct.pack("<I", len(snap.arrays)))
    for a in snap.arrays:
        parts.append(struct.pack(f"<B{a.ndim}I", a.ndim, *a.shape))
    fmt = "<f4" if width == 4 else "<f8"
    for a in snap.arrays:
        parts.append(np.ascontiguousarray(a, dtype=fmt).tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> ModelSnapshot:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ContractViolation(f"{path}: not a GSC1 checkpoint")
    off = 4
    width, kernel_size, steps_trained = struct.unpack_from("<BBI", raw, off)
    off += 6
    (nb,) = struct.unpack_from("<I", raw, off)
    off += 4
    boundaries = struct.unpack_from(f"<{nb}I", raw, off)
    off += 4 * nb
    (npar,) = struct.unpack_from("<I", raw, off)
    off += 4
    shapes = []
    for _ in range(npar):
        (ndim,) = struct.unpack_from("<B", raw, off)
        off += 1
        shapes.append(struct.unpack_from(f"<{ndim}I", raw, off))
        off += 4 * ndim
    fmt = np.dtype("<f4" if width == 4 else "<f8")
    native = np.float32 if width == 4 else np.float64
    arrays = []
    for shape in shapes:
        count = int(np.prod(shape))
        a = np.frombuffer(raw, dtype=fmt, count=count, offset=off).reshape(shape)
        arrays.append(a.astype(native))
        off += count * width
    if off != len(raw):
        raise ContractViolation(f"{path}: trailing bytes in checkpoint")
    return ModelSnapshot(arrays, boundaries, kernel_size=kernel_size, steps_trained=steps_trained)
