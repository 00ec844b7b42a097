"""Dense encoder-decoder surrogate with explicit layer specs and freeze masks.

Tensors follow the ``(N, C, H, W)`` layout. Autograd comes from torch; the
Adam update, plateau scheduler and loss are implemented here so that freezing
and weight-decay semantics stay explicit.
"""
from __future__ import annotations

import io
import json
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import InvalidArgument

DTYPE = torch.float64
CHECKPOINT_VERSION = 1
LAYER_KINDS = ("conv", "conv-transpose", "dense-block", "batchnorm", "activation")


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str
    in_channels: int
    out_channels: int
    kernel: int = 3
    stride: int = 1
    padding: int = 1
    n_layers: int = 0  # dense block: sub-layer count
    growth: int = 0  # dense block: channels added per sub-layer

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise InvalidArgument(f"unknown layer kind {self.kind!r}")
        if self.kind == "dense-block" and self.out_channels != self.in_channels + self.n_layers * self.growth:
            raise InvalidArgument(f"dense block {self.name} must emit in + K*g channels")

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        if self.kind == "conv":
            return ((h + 2 * self.padding - self.kernel) // self.stride + 1,
                    (w + 2 * self.padding - self.kernel) // self.stride + 1)
        if self.kind == "conv-transpose":
            return ((h - 1) * self.stride - 2 * self.padding + self.kernel,
                    (w - 1) * self.stride - 2 * self.padding + self.kernel)
        return h, w

    def parameter_count(self) -> int:
        k2 = self.kernel * self.kernel
        if self.kind in ("conv", "conv-transpose"):
            return self.in_channels * self.out_channels * k2 + self.out_channels
        if self.kind == "batchnorm":
            return 2 * self.in_channels
        if self.kind == "dense-block":
            total = 0
            for j in range(self.n_layers):
                c = self.in_channels + j * self.growth
                total += 2 * c + c * self.growth * 9 + self.growth
            return total
        return 0


def conv(name, cin, cout, kernel=3, stride=1, padding=1):
    return LayerSpec(name, "conv", cin, cout, kernel, stride, padding)


def conv_transpose(name, cin, cout, kernel=4, stride=2, padding=1):
    return LayerSpec(name, "conv-transpose", cin, cout, kernel, stride, padding)


def dense_block(name, cin, n_layers, growth):
    return LayerSpec(name, "dense-block", cin, cin + n_layers * growth, n_layers=n_layers, growth=growth)


def batchnorm(name, c):
    return LayerSpec(name, "batchnorm", c, c, kernel=1, padding=0)


def activation(name, c):
    return LayerSpec(name, "activation", c, c, kernel=1, padding=0)


@dataclass(frozen=True)
class ArchConfig:
    """Channel plan of the encoder-decoder.

    Defaults are the desk-scale model (32x32 input, 16x16 LFS, 8x8 bottleneck).
    ``full_scale()`` returns the 128/64/32 reference plan.
    """

    grid: int = 32
    n_ts: int = 16
    in_channels: int = 1
    conv1_out: int = 32
    enc_block: tuple[int, int] = (3, 16)
    enc_out: int = 40
    down_out: int = 48
    mid_block: tuple[int, int] = (3, 16)
    mid_out: int = 48
    up_out: int = 48
    dec_block: tuple[int, int] = (3, 16)
    dec_out: int = 24
    input_transform: str = "log"

    @classmethod
    def full_scale(cls, enc_block=(4, 32), mid_block=(4, 32), dec_block=(4, 32)) -> "ArchConfig":
        return cls(grid=128, n_ts=16, conv1_out=344, enc_block=enc_block, enc_out=172, down_out=652,
                   mid_block=mid_block, mid_out=326, up_out=606, dec_block=dec_block, dec_out=303)

    def layer_specs(self) -> list[LayerSpec]:
        specs = [conv("conv1", self.in_channels, self.conv1_out, kernel=4, stride=2, padding=1)]
        c = self.conv1_out

        def block(prefix, kg, out):
            nonlocal c
            k, g = kg
            specs.append(dense_block(f"{prefix}_dense", c, k, g))
            c = c + k * g
            specs.extend([batchnorm(f"{prefix}_bn", c), activation(f"{prefix}_relu", c),
                          conv(f"{prefix}_trans", c, out, kernel=1, padding=0)])
            c = out

        block("enc", self.enc_block, self.enc_out)
        specs.extend([batchnorm("down_bn", c), activation("down_relu", c),
                      conv("conv2", c, self.down_out, kernel=4, stride=2, padding=1)])
        c = self.down_out
        block("mid", self.mid_block, self.mid_out)
        specs.extend([batchnorm("up_bn", c), activation("up_relu", c),
                      conv_transpose("convT1", c, self.up_out)])
        c = self.up_out
        block("dec", self.dec_block, self.dec_out)
        specs.extend([batchnorm("head_bn", c), activation("head_relu", c), last_layer_spec(c, self.n_ts)])
        return specs


def last_layer_spec(cin: int, n_ts: int) -> LayerSpec:
    """Full-resolution output head: stride-2 transposed conv."""
    return conv_transpose("L_last", cin, n_ts)


def temp_layer_spec(cin: int, n_ts: int) -> LayerSpec:
    """Low-resolution output head: 3x3 conv, stride 1."""
    return conv("L_temp", cin, n_ts, kernel=3, stride=1, padding=1)


def infer_shapes(specs, input_shape):
    """Propagate ``(C, H, W)`` through the layer chain, checking channels."""
    c, h, w = input_shape
    shapes = []
    for spec in specs:
        if spec.in_channels != c:
            raise InvalidArgument(f"layer {spec.name} expects {spec.in_channels} channels, gets {c}")
        h, w = spec.output_hw(h, w)
        c = spec.out_channels
        shapes.append((spec.name, (c, h, w)))
    return shapes


# ----------------------------------------------------------------- layers


def _check_channels(x: torch.Tensor, spec: LayerSpec):
    if x.dim() != 4 or x.shape[1] != spec.in_channels:
        raise InvalidArgument(f"layer {spec.name} expects (N, {spec.in_channels}, H, W), got {tuple(x.shape)}")


def conv2d_forward(x, spec: LayerSpec, weight, bias=None):
    _check_channels(x, spec)
    return F.conv2d(x, weight, bias, stride=spec.stride, padding=spec.padding)


def conv_transpose2d_forward(x, spec: LayerSpec, weight, bias=None):
    _check_channels(x, spec)
    return F.conv_transpose2d(x, weight, bias, stride=spec.stride, padding=spec.padding)


class ConvLayer(nn.Module):
    def __init__(self, spec: LayerSpec):
        super().__init__()
        self.spec = spec
        cls = nn.Conv2d if spec.kind == "conv" else nn.ConvTranspose2d
        ref = cls(spec.in_channels, spec.out_channels, spec.kernel, spec.stride, spec.padding, dtype=DTYPE)
        self.weight = ref.weight
        self.bias = ref.bias

    def forward(self, x):
        fn = conv2d_forward if self.spec.kind == "conv" else conv_transpose2d_forward
        return fn(x, self.spec, self.weight, self.bias)


class DenseBlock(nn.Module):
    """Each sub-layer sees the concatenation of the input and all earlier outputs."""

    def __init__(self, spec: LayerSpec):
        super().__init__()
        self.spec = spec
        self.sublayers = nn.ModuleList()
        for j in range(spec.n_layers):
            c = spec.in_channels + j * spec.growth
            self.sublayers.append(nn.Sequential(
                nn.BatchNorm2d(c, momentum=0.1, dtype=DTYPE),
                nn.ReLU(),
                nn.Conv2d(c, spec.growth, 3, 1, 1, dtype=DTYPE),
            ))

    def forward(self, x):
        return dense_block_forward(x, self)


def dense_block_forward(x, block: DenseBlock):
    _check_channels(x, block.spec)
    features = [x]
    for sub in block.sublayers:
        features.append(sub(torch.cat(features, dim=1)))
    return torch.cat(features, dim=1)


def make_layer(spec: LayerSpec) -> nn.Module:
    if spec.kind in ("conv", "conv-transpose"):
        return ConvLayer(spec)
    if spec.kind == "dense-block":
        return DenseBlock(spec)
    if spec.kind == "batchnorm":
        return nn.BatchNorm2d(spec.in_channels, momentum=0.1, dtype=DTYPE)
    return nn.ReLU()


# ----------------------------------------------------------------- model


class SurrogateModel(nn.Module):
    """Ordered layer chain mapping permeability to saturation snapshots."""

    def __init__(self, specs: list[LayerSpec], input_shape=(1, 32, 32), input_transform="log", seed: int | None = None):
        super().__init__()
        infer_shapes(specs, input_shape)
        self.input_shape = tuple(input_shape)
        self.input_transform = input_transform
        self.specs = list(specs)
        if seed is not None:
            torch.manual_seed(seed)
        self.layers = nn.ModuleDict({s.name: make_layer(s) for s in specs})
        self.frozen: dict[str, bool] = {s.name: False for s in specs}

    @classmethod
    def from_config(cls, arch: ArchConfig, seed: int | None = None) -> "SurrogateModel":
        return cls(arch.layer_specs(), (arch.in_channels, arch.grid, arch.grid), arch.input_transform, seed)

    # shape contract
    @property
    def output_shape(self) -> tuple[int, int, int]:
        return infer_shapes(self.specs, self.input_shape)[-1][1]

    @property
    def dtype(self) -> torch.dtype:
        return next(self.parameters()).dtype

    @property
    def head(self) -> LayerSpec:
        return self.specs[-1]

    def layer_params(self, name: str) -> dict[str, torch.Tensor]:
        return {f"{name}.{k}": v for k, v in self.layers[name].named_parameters()}

    def parameter_count(self, trainable_only=False) -> int:
        return sum(p.numel() for n, p in self.named_parameters()
                   if not trainable_only or not self.frozen[n.split(".")[1]])

    def trainable_parameters(self) -> dict[str, torch.Tensor]:
        return {n: p for n, p in self.named_parameters() if not self.frozen[n.split(".")[1]]}

    def set_frozen(self, name: str, frozen: bool = True):
        self.frozen[name] = frozen
        for p in self.layers[name].parameters():
            p.requires_grad_(not frozen)

    def freeze_all_but(self, *names: str):
        for spec in self.specs:
            self.set_frozen(spec.name, spec.name not in names)

    def unfreeze_all(self):
        for spec in self.specs:
            self.set_frozen(spec.name, False)

    def train(self, mode: bool = True):
        super().train(mode)
        # frozen layers keep their batch-norm running statistics untouched
        for spec in self.specs:
            if self.frozen.get(spec.name):
                self.layers[spec.name].train(False)
        return self

    def transform_input(self, k):
        if isinstance(k, np.ndarray) and not k.flags.writeable:
            k = k.copy()
        k = torch.as_tensor(k, dtype=self.dtype)
        if self.input_transform == "log":
            return torch.log(k)
        if self.input_transform == "identity":
            return k
        raise InvalidArgument(f"unknown input transform {self.input_transform!r}")

    def forward(self, k):
        x = self.transform_input(k)
        if x.dim() != 4 or tuple(x.shape[1:]) != self.input_shape:
            raise InvalidArgument(f"input must be (N, {', '.join(map(str, self.input_shape))}), got {tuple(x.shape)}")
        for spec in self.specs:
            x = self.layers[spec.name](x)
        return x

    def replace_head(self, spec: LayerSpec, seed: int | None = None) -> "SurrogateModel":
        """Copy of this model with the last layer swapped for ``spec``.

        All other parameters and buffers are copied bit for bit.
        """
        new = SurrogateModel.__new__(SurrogateModel)
        nn.Module.__init__(new)
        new.input_shape = self.input_shape
        new.input_transform = self.input_transform
        new.specs = self.specs[:-1] + [spec]
        infer_shapes(new.specs, new.input_shape)
        if seed is not None:
            torch.manual_seed(seed)
        new.layers = nn.ModuleDict()
        for s in self.specs[:-1]:
            new.layers[s.name] = _clone_module(self.layers[s.name])
        new.layers[spec.name] = make_layer(spec).to(self.dtype)
        new.frozen = {s.name: self.frozen[s.name] for s in self.specs[:-1]}
        new.frozen[spec.name] = False
        for s in new.specs:
            new.set_frozen(s.name, new.frozen[s.name])
        return new


def _clone_module(module: nn.Module) -> nn.Module:
    buf = io.BytesIO()
    torch.save(module, buf)
    buf.seek(0)
    return torch.load(buf, weights_only=False)


def forward(model: SurrogateModel, k_input) -> torch.Tensor:
    return model(k_input)


@torch.no_grad()
def predict(model: SurrogateModel, k_input, batch_size: int = 64) -> np.ndarray:
    """Evaluation-mode prediction clamped to [0, 1], as a numpy array."""
    was_training = model.training
    model.eval()
    k_input = np.asarray(k_input)
    out = [model(k_input[i:i + batch_size]).numpy() for i in range(0, len(k_input), batch_size)]
    model.train(was_training)
    return np.clip(np.concatenate(out), 0.0, 1.0)


# ----------------------------------------------------------------- loss and gradients


def loss_terms(pred, target, model: SurrogateModel | None = None, lam: float = 0.0):
    """``(L1 misfit, lam * sum w^2)`` over trainable parameters."""
    target = torch.as_tensor(target, dtype=pred.dtype)
    if pred.shape != target.shape:
        raise InvalidArgument(f"prediction {tuple(pred.shape)} and target {tuple(target.shape)} differ")
    misfit = torch.sum(torch.abs(pred - target))
    penalty = pred.new_zeros(())
    if lam and model is not None:
        penalty = lam * sum(torch.sum(p * p) for p in model.trainable_parameters().values())
    return misfit, penalty


def loss(pred, target, model: SurrogateModel | None = None, lam: float = 0.0):
    misfit, penalty = loss_terms(pred, target, model, lam)
    return misfit + penalty


def backward(model: SurrogateModel, k_input, target, lam: float = 0.0) -> dict[str, torch.Tensor]:
    """Gradients of the loss with respect to every trainable parameter."""
    params = model.trainable_parameters()
    value = loss(model(k_input), target, model, lam)
    grads = torch.autograd.grad(value, list(params.values()), allow_unused=True)
    return {n: (g if g is not None else torch.zeros_like(p)) for (n, p), g in zip(params.items(), grads)}


# ----------------------------------------------------------------- optimizer and scheduler


@dataclass
class OptimizerState:
    """Adam with decoupled weight decay."""

    lr: float = 1e-3
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


@torch.no_grad()
def adam_step(opt: OptimizerState, params: dict[str, torch.Tensor], grads: dict[str, torch.Tensor]):
    """Update ``params`` in place; moments are allocated lazily per parameter name."""
    opt.step += 1
    bc1 = 1.0 - opt.beta1**opt.step
    bc2 = 1.0 - opt.beta2**opt.step
    for name, p in params.items():
        g = grads[name]
        if name not in opt.m:
            opt.m[name] = torch.zeros_like(p)
            opt.v[name] = torch.zeros_like(p)
        m, v = opt.m[name], opt.v[name]
        if opt.weight_decay:
            p.mul_(1.0 - opt.lr * opt.weight_decay)
        m.mul_(opt.beta1).add_(g, alpha=1.0 - opt.beta1)
        v.mul_(opt.beta2).addcmul_(g, g, value=1.0 - opt.beta2)
        denom = (v / bc2).sqrt_().add_(opt.eps)
        p.addcdiv_(m, denom, value=-opt.lr / bc1)
    return params, opt


@dataclass
class SchedulerState:
    """Reduce-on-plateau: cut the learning rate after ``patience`` epochs without improvement."""

    factor: float = 0.6
    min_lr: float = 5e-6
    patience: int = 10
    best: float = math.inf
    bad_epochs: int = 0

    def __post_init__(self):
        if not 0 < self.factor < 1:
            raise InvalidArgument("factor must lie in (0, 1)")
        if self.min_lr <= 0:
            raise InvalidArgument("min_lr must be positive")


def scheduler_step(sched: SchedulerState, opt: OptimizerState, epoch_loss: float) -> float:
    if not math.isfinite(epoch_loss):
        raise InvalidArgument("epoch loss must be finite")
    if epoch_loss < sched.best:
        sched.best = epoch_loss
        sched.bad_epochs = 0
    else:
        sched.bad_epochs += 1
    if sched.bad_epochs > sched.patience:
        opt.lr = reduce_lr(opt.lr, sched)
        sched.bad_epochs = 0
    return opt.lr


def reduce_lr(lr: float, sched: SchedulerState) -> float:
    return max(lr * sched.factor, sched.min_lr)


# ----------------------------------------------------------------- checkpoints


def _spec_list(model):
    return [asdict(s) for s in model.specs]


def save_checkpoint(path, model: SurrogateModel, opt: OptimizerState | None = None, extra: dict | None = None):
    """Write a versioned ``.npz`` container: JSON header plus little-endian float64 arrays."""
    header = {
        "format": "mflearn-checkpoint",
        "version": CHECKPOINT_VERSION,
        "input_shape": list(model.input_shape),
        "input_transform": model.input_transform,
        "dtype": str(model.dtype).removeprefix("torch."),
        "layers": _spec_list(model),
        "frozen": model.frozen,
        "optimizer": None,
        "extra": extra or {},
    }
    arrays = {f"state/{k}": v.detach().numpy().astype("<f8") if v.is_floating_point() else v.numpy().astype("<i8")
              for k, v in model.state_dict().items()}
    if opt is not None:
        header["optimizer"] = {k: getattr(opt, k) for k in ("lr", "weight_decay", "beta1", "beta2", "eps", "step")}
        for k, t in opt.m.items():
            arrays[f"adam_m/{k}"] = t.numpy().astype("<f8")
        for k, t in opt.v.items():
            arrays[f"adam_v/{k}"] = t.numpy().astype("<f8")
    arrays["header"] = np.frombuffer(json.dumps(header).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path):
    """Returns ``(model, optimizer_state_or_None, extra)``."""
    with np.load(path) as data:
        header = json.loads(bytes(data["header"]).decode())
        if header.get("format") != "mflearn-checkpoint" or header.get("version") != CHECKPOINT_VERSION:
            raise InvalidArgument(f"{path}: unsupported checkpoint format")
        specs = [LayerSpec(**s) for s in header["layers"]]
        model = SurrogateModel(specs, tuple(header["input_shape"]), header["input_transform"])
        state = {k[len("state/"):]: torch.from_numpy(data[k].copy()) for k in data.files if k.startswith("state/")}
        state = {k: (v.to(DTYPE) if v.is_floating_point() else v) for k, v in state.items()}
        model.load_state_dict(state)
        dtype = getattr(torch, header.get("dtype", "float64"))
        model.to(dtype)
        for name, flag in header["frozen"].items():
            model.set_frozen(name, flag)
        opt = None
        if header["optimizer"] is not None:
            opt = OptimizerState(**header["optimizer"])
            for k in data.files:
                if k.startswith("adam_m/"):
                    opt.m[k[7:]] = torch.from_numpy(data[k].copy()).to(dtype)
                elif k.startswith("adam_v/"):
                    opt.v[k[7:]] = torch.from_numpy(data[k].copy()).to(dtype)
    return model, opt, header["extra"]


def model_copy(model: SurrogateModel) -> SurrogateModel:
    return _clone_module(model)


__all__ = [
    "ArchConfig", "LayerSpec", "SurrogateModel", "OptimizerState", "SchedulerState",
    "conv2d_forward", "conv_transpose2d_forward", "dense_block_forward", "forward", "predict",
    "loss", "loss_terms", "backward", "adam_step", "scheduler_step", "reduce_lr",
    "save_checkpoint", "load_checkpoint", "infer_shapes", "last_layer_spec", "temp_layer_spec",
]
