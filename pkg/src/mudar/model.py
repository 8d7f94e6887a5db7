"""1-D CNN classifier: three conv blocks, two hidden fc layers, softmax head.

The network is written functionally over a :class:`Parameters` container so
that losses can be differentiated with respect to every named array and
checked entry by entry against finite differences.
"""

from __future__ import annotations

import hashlib
import io
import json
import zipfile
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from . import diffcore as dc
from .errors import ContractError, FormatError

CHECKPOINT_FORMAT = "mudar-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    # data-dependent fields; left unset in templates and filled by bind()
    in_channels: int | None = None
    window_len: int | None = None
    num_classes: int | None = None
    filters: tuple[int, ...] = (32, 128, 64)
    kernel_sizes: tuple[int, ...] = (5, 5, 5)
    pool: int = 2
    fc: tuple[int, ...] = (8, 4)
    dropout: float = 0.3
    padding: str = "valid"
    embedding: str = "fc"  # "fc" = last hidden fc activation, "flatten" = conv features
    fc_negative_slope: float = 0.2  # leaky hidden fc layers; 0 restores plain ReLU
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def __post_init__(self):
        self.filters = tuple(self.filters)
        self.kernel_sizes = tuple(self.kernel_sizes)
        self.fc = tuple(self.fc)
        if self.num_classes is not None and self.num_classes < 2:
            raise ContractError(f"num_classes must be >= 2, got {self.num_classes}")
        if len(self.filters) != len(self.kernel_sizes):
            raise ContractError("filters and kernel_sizes must have equal length")
        if self.padding not in ("valid", "same"):
            raise ContractError(f"padding must be 'valid' or 'same', got {self.padding!r}")
        if self.embedding not in ("fc", "flatten"):
            raise ContractError(f"embedding must be 'fc' or 'flatten', got {self.embedding!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ContractError(f"dropout must lie in [0, 1), got {self.dropout}")

    def bind(self, in_channels: int, window_len: int, num_classes: int) -> "ModelConfig":
        return replace(self, in_channels=in_channels, window_len=window_len, num_classes=num_classes)

    @property
    def is_bound(self) -> bool:
        return None not in (self.in_channels, self.window_len, self.num_classes)

    def conv_lengths(self, window_len: int | None = None) -> list[int]:
        """Sequence length after each conv block; non-positive means infeasible."""
        length = self.window_len if window_len is None else window_len
        out = []
        for k in self.kernel_sizes:
            if self.padding == "valid":
                length = length - k + 1
            length = length // self.pool if length > 0 else 0
            out.append(length)
            if length <= 0:
                break
        return out

    def min_window_len(self) -> int:
        w = 1
        while min(self.conv_lengths(w)) <= 0:
            w += 1
        return w

    @property
    def flatten_size(self) -> int:
        return self.filters[-1] * self.conv_lengths()[-1]

    @property
    def embedding_dim(self) -> int:
        return self.fc[-1] if self.embedding == "fc" else self.flatten_size

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Parameters:
    """Trainable arrays plus batchnorm running statistics, all float64."""

    trainable: dict[str, torch.Tensor]
    running: dict[str, torch.Tensor] = field(default_factory=dict)

    def copy(self) -> "Parameters":
        return Parameters(
            {k: v.detach().clone() for k, v in self.trainable.items()},
            {k: v.detach().clone() for k, v in self.running.items()},
        )

    def requires_grad_(self) -> "Parameters":
        for v in self.trainable.values():
            v.requires_grad_(True)
        return self

    def numpy(self) -> dict[str, np.ndarray]:
        arrays = {k: v.detach().numpy().copy() for k, v in self.trainable.items()}
        arrays.update({k: v.detach().numpy().copy() for k, v in self.running.items()})
        return arrays

    def digest(self) -> str:
        h = hashlib.sha256()
        for k, v in sorted(self.numpy().items()):
            h.update(k.encode())
            h.update(np.ascontiguousarray(v).tobytes())
        return h.hexdigest()


@dataclass
class ForwardOutput:
    embedding: torch.Tensor  # (B, d)
    logits: torch.Tensor  # (B, c)
    log_probabilities: torch.Tensor
    probabilities: torch.Tensor
    running: dict[str, torch.Tensor]


def init(config: ModelConfig, seed: int = 0) -> Parameters:
    """Fan-in scaled uniform weights (He bound sqrt(6 / fan_in)), zero biases."""
    if not config.is_bound:
        raise ContractError("model config needs in_channels, window_len and num_classes")
    if min(config.conv_lengths()) <= 0:
        raise ContractError(
            f"window length {config.window_len} too short for the architecture; "
            f"minimum is {config.min_window_len()}"
        )
    rng = np.random.default_rng(seed)

    def uniform(shape, fan_in):
        bound = np.sqrt(6.0 / fan_in)
        return torch.from_numpy(rng.uniform(-bound, bound, size=shape))

    p: dict[str, torch.Tensor] = {}
    r: dict[str, torch.Tensor] = {}
    c_in = config.in_channels
    for i, (c_out, k) in enumerate(zip(config.filters, config.kernel_sizes), start=1):
        p[f"conv{i}.weight"] = uniform((c_out, c_in, k), c_in * k)
        p[f"bn{i}.scale"] = torch.ones(c_out, dtype=dc.DTYPE)
        p[f"bn{i}.shift"] = torch.zeros(c_out, dtype=dc.DTYPE)
        r[f"bn{i}.running_mean"] = torch.zeros(c_out, dtype=dc.DTYPE)
        r[f"bn{i}.running_var"] = torch.ones(c_out, dtype=dc.DTYPE)
        c_in = c_out
    widths = [config.flatten_size, *config.fc, config.num_classes]
    for i, (w_in, w_out) in enumerate(zip(widths[:-1], widths[1:]), start=1):
        p[f"fc{i}.weight"] = uniform((w_in, w_out), w_in)
        p[f"fc{i}.bias"] = torch.zeros(w_out, dtype=dc.DTYPE)
    return Parameters(p, r)


def _dropout(x: torch.Tensor, rate: float, generator: torch.Generator) -> torch.Tensor:
    if rate == 0:
        return x
    keep = (torch.rand(x.shape, generator=generator, dtype=dc.DTYPE) >= rate).to(dc.DTYPE)
    return x * keep / (1.0 - rate)


def forward(
    params: Parameters,
    x,
    config: ModelConfig,
    mode: str = "eval",
    generator: torch.Generator | None = None,
    trainable: dict[str, torch.Tensor] | None = None,
) -> ForwardOutput:
    """Run the network on a (B, C, W) batch.

    ``mode="train"`` normalises with batch statistics and applies inverted
    dropout drawn from ``generator``; the updated running statistics are
    returned in ``ForwardOutput.running`` and ``params`` is left untouched.
    ``trainable`` overrides ``params.trainable`` (used by gradient checks).
    """
    if mode not in ("train", "eval"):
        raise ContractError(f"mode must be 'train' or 'eval', got {mode!r}")
    x = dc.as_array(x)
    if x.ndim != 3 or tuple(x.shape[1:]) != (config.in_channels, config.window_len):
        raise ContractError(
            f"batch shape {tuple(x.shape)} does not match (B, {config.in_channels}, {config.window_len})"
        )
    training = mode == "train"
    if training and x.shape[0] < 2:
        raise ContractError("train mode needs a batch of at least 2 windows (batchnorm)")
    if training and generator is None:
        generator = torch.Generator().manual_seed(0)
    w = params.trainable if trainable is None else trainable
    running = dict(params.running)

    h = x
    for i, k in enumerate(config.kernel_sizes, start=1):
        if config.padding == "same":
            h = torch.nn.functional.pad(h, ((k - 1) // 2, k // 2))
        # no conv bias: the batchnorm mean subtraction would cancel it exactly
        h = dc.conv1d(h, w[f"conv{i}.weight"])
        h, running[f"bn{i}.running_mean"], running[f"bn{i}.running_var"] = dc.batchnorm(
            h,
            w[f"bn{i}.scale"],
            w[f"bn{i}.shift"],
            running[f"bn{i}.running_mean"],
            running[f"bn{i}.running_var"],
            training,
            config.bn_momentum,
            config.bn_eps,
        )
        h = dc.maxpool1d(dc.relu(h), config.pool)
    h = h.reshape(h.shape[0], -1)
    embedding = h
    n_fc = len(config.fc) + 1
    for i in range(1, n_fc + 1):
        h = h @ w[f"fc{i}.weight"] + w[f"fc{i}.bias"]
        if i < n_fc:
            h = dc.relu(h) - config.fc_negative_slope * dc.relu(-h) if config.fc_negative_slope else dc.relu(h)
            if i == n_fc - 1 and config.embedding == "fc":
                embedding = h
            if training:
                h = _dropout(h, config.dropout, generator)
    log_p = dc.log_softmax(h)
    return ForwardOutput(embedding, h, log_p, torch.exp(log_p), running)


def predict_proba(params: Parameters, x, config: ModelConfig, batch_size: int = 256) -> np.ndarray:
    """Eval-mode class probabilities for an (n, C, W) array."""
    x = np.asarray(x, dtype=np.float64)
    out = []
    with torch.no_grad():
        for start in range(0, len(x), batch_size):
            out.append(forward(params, x[start : start + batch_size], config).probabilities.numpy())
    if not out:
        return np.zeros((0, config.num_classes))
    return np.concatenate(out)


def embed(params: Parameters, x, config: ModelConfig, batch_size: int = 256) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    out = []
    with torch.no_grad():
        for start in range(0, len(x), batch_size):
            out.append(forward(params, x[start : start + batch_size], config).embedding.numpy())
    if not out:
        return np.zeros((0, config.embedding_dim))
    return np.concatenate(out)


# -- checkpoints --------------------------------------------------------------


def save_checkpoint(path: str | Path, params: Parameters, config: ModelConfig, seed: int, extra: dict | None = None):
    """Write an ``.npz`` holding every named array plus a JSON header.

    The header (array ``__header__``) records format name, version, the model
    config, the seed and any extra provenance.
    """
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": config.to_dict(),
        "seed": seed,
        "trainable": sorted(params.trainable),
        "running": sorted(params.running),
        **(extra or {}),
    }
    arrays = params.numpy()
    arrays["__header__"] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    # fixed entry timestamps keep identical checkpoints byte-identical
    with zipfile.ZipFile(buf, "w", compression=zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            arr_buf = io.BytesIO()
            np.lib.format.write_array(arr_buf, np.ascontiguousarray(arrays[name]), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0)), arr_buf.getvalue())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path: str | Path) -> tuple[Parameters, ModelConfig, dict]:
    try:
        with np.load(path, allow_pickle=False) as npz:
            header = json.loads(npz["__header__"].tobytes().decode())
            arrays = {k: npz[k] for k in npz.files if k != "__header__"}
    except (OSError, ValueError, KeyError, EOFError, zipfile.BadZipFile, json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise FormatError(f"{path}: not a readable {CHECKPOINT_FORMAT} v{CHECKPOINT_VERSION} file ({exc})") from None
    if header.get("format") != CHECKPOINT_FORMAT:
        raise FormatError(f"{path}: unknown checkpoint format {header.get('format')!r}")
    if header.get("version") != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {header.get('version')!r}")
    try:
        config = ModelConfig(**header["config"])
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: checkpoint header holds an invalid model config ({exc})") from None
    try:
        trainable = {k: torch.from_numpy(arrays[k]) for k in header["trainable"]}
        running = {k: torch.from_numpy(arrays[k]) for k in header["running"]}
    except KeyError as exc:
        raise FormatError(f"{path}: checkpoint missing array {exc}") from None
    params = Parameters(trainable, running)
    expected = init_shapes(config)
    for k, shape in expected.items():
        arr = trainable.get(k, running.get(k))
        if arr is None or tuple(arr.shape) != shape:
            raise FormatError(f"{path}: array {k} has wrong shape for the stored config")
    return params, config, header


def init_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    p = init(config, seed=0)
    shapes = {k: tuple(v.shape) for k, v in p.trainable.items()}
    shapes.update({k: tuple(v.shape) for k, v in p.running.items()})
    return shapes
