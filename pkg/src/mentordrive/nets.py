"""Function-approximator substrate: MLPs, a squashed-Gaussian policy head,
reverse-mode gradients, Polyak target updates, and a versioned binary
checkpoint format.

Everything runs in float64 on CPU with a single thread so that identical
seeds give bit-identical runs and finite-difference checks are tight.
"""

from __future__ import annotations

import io
import json
import math
import os
import struct
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .core import Action, InvalidInputError, RngHandle

DTYPE = torch.float64
LOG_STD_MIN, LOG_STD_MAX = -20.0, 2.0
CHECKPOINT_MAGIC = b"MDCK"
CHECKPOINT_VERSION = 1

torch.set_num_threads(1)


class ShapeError(ValueError):
    """Input shape does not match the network architecture."""


def _torch_gen(seed: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(int(seed) & 0x7FFF_FFFF_FFFF_FFFF)
    return g


def _init_linear(layer: torch.nn.Linear, gen: torch.Generator):
    fan_in = layer.in_features
    bound = 1.0 / math.sqrt(fan_in)
    with torch.no_grad():
        layer.weight.uniform_(-bound, bound, generator=gen)
        layer.bias.uniform_(-bound, bound, generator=gen)


class Mlp(torch.nn.Module):
    """Fully connected network. Architecture is immutable after construction;
    `layer_sizes` includes input and output widths."""

    def __init__(self, layer_sizes: Sequence[int], activation: str = "relu", seed: int = 0):
        super().__init__()
        if len(layer_sizes) < 2:
            raise InvalidInputError("Mlp needs at least input and output sizes")
        if activation not in ("relu", "tanh"):
            raise InvalidInputError(f"unsupported activation {activation!r}")
        self.layer_sizes = tuple(int(n) for n in layer_sizes)
        self.activation = activation
        gen = _torch_gen(seed)
        layers: List[torch.nn.Module] = []
        act = torch.nn.ReLU if activation == "relu" else torch.nn.Tanh
        for i, (a, b) in enumerate(zip(self.layer_sizes[:-1], self.layer_sizes[1:])):
            lin = torch.nn.Linear(a, b, dtype=DTYPE)
            _init_linear(lin, gen)
            layers.append(lin)
            if i < len(self.layer_sizes) - 2:
                layers.append(act())
        self.net = torch.nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.layer_sizes[0]:
            raise ShapeError(
                f"input width {x.shape[-1]} != layer 0 width {self.layer_sizes[0]}"
            )
        return self.net(x)

    def descriptor(self) -> dict:
        return {"layer_sizes": list(self.layer_sizes), "activation": self.activation}


def forward(net: Mlp, x) -> np.ndarray:
    """Deterministic evaluation on a numpy vector or batch."""
    t = torch.as_tensor(np.asarray(x), dtype=DTYPE)
    squeeze = t.ndim == 1
    if squeeze:
        t = t.unsqueeze(0)
    with torch.no_grad():
        out = net(t)
    out = out.numpy()
    return out[0] if squeeze else out


def grad(loss_fn: Callable[[], torch.Tensor], params: Iterable[torch.Tensor]) -> List[torch.Tensor]:
    """Exact reverse-mode gradient of a scalar loss wrt the given parameters."""
    params = list(params)
    loss = loss_fn()
    if loss.dim() != 0:
        raise InvalidInputError(f"loss must be scalar, got shape {tuple(loss.shape)}")
    if not loss.requires_grad:
        return [torch.zeros_like(p) for p in params]
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    return [g if g is not None else torch.zeros_like(p) for g, p in zip(grads, params)]


def polyak_update(target: torch.nn.Module, online: torch.nn.Module, tau: float = 0.005):
    """target <- (1 - tau) * target + tau * online, elementwise."""
    t_params = list(target.parameters())
    o_params = list(online.parameters())
    if len(t_params) != len(o_params):
        raise ShapeError("target/online architectures differ")
    with torch.no_grad():
        for tp, op in zip(t_params, o_params):
            if tp.shape != op.shape:
                raise ShapeError(f"parameter shape mismatch {tp.shape} vs {op.shape}")
            tp.mul_(1.0 - tau).add_(op, alpha=tau)


class GaussianPolicyHead(torch.nn.Module):
    """Tanh-squashed Gaussian policy over 2 action dims with the standard
    log-prob correction for the squash."""

    def __init__(self, obs_dim: int, hidden: Sequence[int], act_dim: int = 2, seed: int = 0):
        super().__init__()
        self.obs_dim, self.act_dim = int(obs_dim), int(act_dim)
        self.trunk = Mlp([obs_dim, *hidden], activation="relu", seed=seed)
        gen = _torch_gen(seed + 0x9E3779B9)
        self.mean = torch.nn.Linear(hidden[-1], act_dim, dtype=DTYPE)
        self.log_std = torch.nn.Linear(hidden[-1], act_dim, dtype=DTYPE)
        _init_linear(self.mean, gen)
        _init_linear(self.log_std, gen)
        # hidden trunk ends with an activation applied here
        self._act = torch.nn.ReLU()

    def _heads(self, obs: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        h = self._act(self.trunk(obs))
        mean = self.mean(h)
        log_std = torch.clamp(self.log_std(h), LOG_STD_MIN, LOG_STD_MAX)
        return mean, log_std

    def sample(self, obs: torch.Tensor, noise: Optional[torch.Tensor] = None):
        """Reparameterised sample -> (action in [-1,1]^k, log_prob). `noise`
        pins the standard-normal draw for deterministic tests."""
        mean, log_std = self._heads(obs)
        std = log_std.exp()
        if noise is None:
            noise = torch.randn(mean.shape, dtype=DTYPE)
        pre = mean + std * noise
        action = torch.tanh(pre)
        # log N(pre; mean, std) with tanh change of variables
        log_prob = (
            -0.5 * (((pre - mean) / std) ** 2 + 2.0 * log_std + math.log(2.0 * math.pi))
        ).sum(-1)
        log_prob = log_prob - torch.log(1.0 - action.pow(2) + 1e-9).sum(-1)
        return action, log_prob

    def log_prob_of(self, obs: torch.Tensor, action: torch.Tensor) -> torch.Tensor:
        """Log density of a given squashed action."""
        mean, log_std = self._heads(obs)
        std = log_std.exp()
        pre = torch.atanh(torch.clamp(action, -1.0 + 1e-9, 1.0 - 1e-9))
        log_prob = (
            -0.5 * (((pre - mean) / std) ** 2 + 2.0 * log_std + math.log(2.0 * math.pi))
        ).sum(-1)
        return log_prob - torch.log(1.0 - action.pow(2) + 1e-9).sum(-1)

    def deterministic(self, obs: torch.Tensor) -> torch.Tensor:
        mean, _ = self._heads(obs)
        return torch.tanh(mean)


def sample_action(head: GaussianPolicyHead, obs, rng: Optional[np.random.Generator] = None):
    """Draw one action for a single observation -> (Action, log_prob)."""
    t = torch.as_tensor(np.asarray(obs), dtype=DTYPE).unsqueeze(0)
    noise = None
    if rng is not None:
        noise = torch.as_tensor(rng.standard_normal(head.act_dim), dtype=DTYPE).unsqueeze(0)
    with torch.no_grad():
        a, lp = head.sample(t, noise=noise)
    a = a[0].numpy()
    return Action(float(a[0]), float(a[1])), float(lp[0])


def deterministic_action(head: GaussianPolicyHead, obs) -> Action:
    t = torch.as_tensor(np.asarray(obs), dtype=DTYPE).unsqueeze(0)
    with torch.no_grad():
        a = head.deterministic(t)[0].numpy()
    return Action(float(a[0]), float(a[1]))


def clip_grad_norm(params: Iterable[torch.Tensor], max_norm: float = 10.0) -> float:
    return float(torch.nn.utils.clip_grad_norm_(list(params), max_norm))


def assert_finite_params(module: torch.nn.Module, label: str = "network"):
    for name, p in module.named_parameters():
        if not torch.isfinite(p).all():
            raise FloatingPointError(f"{label}.{name} contains non-finite parameters")


# ---------------------------------------------------------------------------
# checkpoint format: MAGIC | u32 version | u32 header_len | header json | blobs
# header lists every tensor (name, shape, dtype, offset, nbytes) plus metadata.
# Writes are atomic (tmp + rename); loads are bit-exact.


class CheckpointError(RuntimeError):
    pass


def _tensor_entries(modules: Dict[str, torch.nn.Module], optimizers: Dict[str, torch.optim.Optimizer]):
    for mod_name, module in modules.items():
        for p_name, tensor in module.state_dict().items():
            yield f"module/{mod_name}/{p_name}", tensor
    for opt_name, opt in optimizers.items():
        state = opt.state_dict()
        for gi, group in enumerate(state["param_groups"]):
            for p_idx in group["params"]:
                st = state["state"].get(p_idx, {})
                for k, v in sorted(st.items()):
                    if isinstance(v, torch.Tensor):
                        yield f"opt/{opt_name}/{gi}/{p_idx}/{k}", v
                    else:
                        yield f"optscalar/{opt_name}/{gi}/{p_idx}/{k}", torch.tensor(float(v), dtype=DTYPE)


def save_checkpoint(
    path,
    modules: Dict[str, torch.nn.Module],
    optimizers: Optional[Dict[str, torch.optim.Optimizer]] = None,
    meta: Optional[dict] = None,
):
    optimizers = optimizers or {}
    entries = []
    payload = io.BytesIO()
    offset = 0
    for name, tensor in _tensor_entries(modules, optimizers):
        arr = tensor.detach().cpu().numpy()
        raw = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        entries.append(
            {
                "name": name,
                "shape": list(arr.shape),
                "dtype": str(arr.dtype),
                "offset": offset,
                "nbytes": len(raw),
            }
        )
        payload.write(raw)
        offset += len(raw)
    header = {
        "entries": entries,
        "meta": meta or {},
        "descriptors": {
            name: mod.descriptor() if hasattr(mod, "descriptor") else None
            for name, mod in modules.items()
        },
    }
    header_raw = json.dumps(header, sort_keys=True).encode("utf-8")
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(header_raw)))
        fh.write(header_raw)
        fh.write(payload.getvalue())
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def read_checkpoint(path) -> Tuple[dict, Dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: bad magic {magic!r}")
        version, header_len = struct.unpack("<II", fh.read(8))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        header = json.loads(fh.read(header_len).decode("utf-8"))
        blob = fh.read()
    tensors = {}
    for e in header["entries"]:
        raw = blob[e["offset"] : e["offset"] + e["nbytes"]]
        if len(raw) != e["nbytes"]:
            raise CheckpointError(f"{path}: truncated tensor {e['name']}")
        arr = np.frombuffer(raw, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
        tensors[e["name"]] = arr
    return header, tensors


def load_checkpoint(
    path,
    modules: Dict[str, torch.nn.Module],
    optimizers: Optional[Dict[str, torch.optim.Optimizer]] = None,
) -> dict:
    """Restore parameters (and optimizer moments) in place; returns meta."""
    optimizers = optimizers or {}
    header, tensors = read_checkpoint(path)
    for mod_name, module in modules.items():
        sd = module.state_dict()
        for p_name in sd:
            key = f"module/{mod_name}/{p_name}"
            if key not in tensors:
                raise CheckpointError(f"{path}: missing tensor {key}")
            src = tensors[key]
            if tuple(src.shape) != tuple(sd[p_name].shape):
                raise CheckpointError(
                    f"{path}: shape mismatch for {key}: {src.shape} vs {tuple(sd[p_name].shape)}"
                )
            sd[p_name] = torch.as_tensor(src)
        module.load_state_dict(sd)
    for opt_name, opt in optimizers.items():
        state = opt.state_dict()
        for gi, group in enumerate(state["param_groups"]):
            for p_idx in group["params"]:
                st = state["state"].setdefault(p_idx, {})
                prefix_t = f"opt/{opt_name}/{gi}/{p_idx}/"
                prefix_s = f"optscalar/{opt_name}/{gi}/{p_idx}/"
                for key, arr in tensors.items():
                    if key.startswith(prefix_t):
                        st[key[len(prefix_t):]] = torch.as_tensor(arr)
                    elif key.startswith(prefix_s):
                        st[key[len(prefix_s):]] = float(arr)
        opt.load_state_dict(state)
    return header["meta"]
