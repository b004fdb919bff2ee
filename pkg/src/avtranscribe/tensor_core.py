"""Differentiable building blocks, a finite-difference gradient checker and
the checkpoint file format.

Reverse-mode differentiation is delegated to torch autograd; the layer math
(attention, normalization, activation, loss) is written out here so each
primitive can be checked against central differences in float64.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence

import numpy as np
import torch
from torch import nn

CKPT_MAGIC = b"AVCKPT01"


def gelu(x: torch.Tensor) -> torch.Tensor:
    """tanh approximation of GELU."""
    return 0.5 * x * (1.0 + torch.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x ** 3)))


def relu(x: torch.Tensor) -> torch.Tensor:
    # kept for the gradient checker's kink handling; the model uses gelu
    return torch.clamp(x, min=0.0)


def softmax(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    shifted = x - x.amax(dim=dim, keepdim=True).detach()
    e = torch.exp(shifted)
    return e / e.sum(dim=dim, keepdim=True)


def log_softmax(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    shifted = x - x.amax(dim=dim, keepdim=True).detach()
    return shifted - torch.log(torch.exp(shifted).sum(dim=dim, keepdim=True))


def linear(x: torch.Tensor, weight: torch.Tensor, bias: Optional[torch.Tensor] = None) -> torch.Tensor:
    y = x @ weight.transpose(-1, -2)
    return y if bias is None else y + bias


def layer_norm(x: torch.Tensor, gain: torch.Tensor, bias: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    mean = x.mean(dim=-1, keepdim=True)
    centered = x - mean
    var = (centered * centered).mean(dim=-1, keepdim=True)
    return centered / torch.sqrt(var + eps) * gain + bias


def attend(
    q: torch.Tensor,
    k: torch.Tensor,
    v: torch.Tensor,
    n_heads: int,
    causal: bool = False,
    key_padding_mask: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """Scaled dot-product attention per head, heads concatenated (no output projection).

    Shapes: q ``[..., Lq, d]``, k/v ``[..., Lk, d]``. ``key_padding_mask`` is a
    boolean ``[..., Lk]`` tensor, True where a key must be ignored.
    """
    d = q.shape[-1]
    if d % n_heads:
        raise ValueError(f"model width {d} is not divisible by {n_heads} heads")
    dh = d // n_heads
    lq, lk = q.shape[-2], k.shape[-2]

    def split(t, n):
        return t.reshape(*t.shape[:-2], n, n_heads, dh).transpose(-3, -2)

    qh, kh, vh = split(q, lq), split(k, lk), split(v, lk)
    scores = qh @ kh.transpose(-1, -2) / math.sqrt(dh)
    blocked = None
    if causal:
        blocked = torch.ones(lq, lk, dtype=torch.bool, device=q.device).triu(1)
    if key_padding_mask is not None:
        pad = key_padding_mask[..., None, None, :]
        blocked = pad if blocked is None else (blocked | pad)
    if blocked is not None:
        scores = scores.masked_fill(blocked, float("-inf"))
    out = softmax(scores, dim=-1) @ vh
    return out.transpose(-3, -2).reshape(*q.shape[:-2], lq, d)


def multi_head_attention(
    q: torch.Tensor,
    k: torch.Tensor,
    v: torch.Tensor,
    n_heads: int,
    out_weight: torch.Tensor,
    out_bias: Optional[torch.Tensor] = None,
    causal: bool = False,
    key_padding_mask: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    return linear(attend(q, k, v, n_heads, causal, key_padding_mask), out_weight, out_bias)


def cross_entropy(logits: torch.Tensor, targets: torch.Tensor, pad_id: int) -> torch.Tensor:
    """Mean token negative log-likelihood, skipping ``pad_id`` targets."""
    logits = logits.reshape(-1, logits.shape[-1])
    targets = torch.as_tensor(targets, device=logits.device).reshape(-1).long()
    if targets.shape[0] != logits.shape[0]:
        raise ValueError("one target per logit row required")
    valid = targets != pad_id
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise ValueError("every target position is padding")
    real = targets[valid]
    if int(real.max()) >= logits.shape[-1] or int(real.min()) < 0:
        raise ValueError("target id outside the vocabulary")
    logp = log_softmax(logits, dim=-1)
    safe = torch.where(valid, targets, torch.zeros_like(targets))
    picked = logp.gather(1, safe[:, None])[:, 0]
    return -(picked * valid.to(logp.dtype)).sum() / n_valid


# -- modules ---------------------------------------------------------------


class Linear(nn.Module):
    def __init__(self, d_in: int, d_out: int, bias: bool = True):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(d_out, d_in))
        self.bias = nn.Parameter(torch.zeros(d_out)) if bias else None

    def forward(self, x):
        return linear(x, self.weight, self.bias)


class LayerNorm(nn.Module):
    def __init__(self, d: int, eps: float = 1e-5):
        super().__init__()
        self.gain = nn.Parameter(torch.ones(d))
        self.bias = nn.Parameter(torch.zeros(d))
        self.eps = eps

    def forward(self, x):
        return layer_norm(x, self.gain, self.bias, self.eps)


class MultiHeadAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        if d_model % n_heads:
            raise ValueError(f"d_model={d_model} not divisible by n_heads={n_heads}")
        self.n_heads = n_heads
        self.q_proj = Linear(d_model, d_model)
        self.k_proj = Linear(d_model, d_model)
        self.v_proj = Linear(d_model, d_model)
        self.out_proj = Linear(d_model, d_model)

    def forward(self, x_q, x_kv, causal=False, key_padding_mask=None):
        return multi_head_attention(
            self.q_proj(x_q),
            self.k_proj(x_kv),
            self.v_proj(x_kv),
            self.n_heads,
            self.out_proj.weight,
            self.out_proj.bias,
            causal=causal,
            key_padding_mask=key_padding_mask,
        )


class FeedForward(nn.Module):
    def __init__(self, d_model: int, mult: int = 4):
        super().__init__()
        self.fc1 = Linear(d_model, mult * d_model)
        self.fc2 = Linear(mult * d_model, d_model)

    def forward(self, x):
        return self.fc2(gelu(self.fc1(x)))


def init_parameters(module: nn.Module, generator: torch.Generator, pos_std: float = 0.5) -> None:
    """Xavier-uniform projections, zero biases, unit norm gains.

    Positional and token embedding tables (``*_pos``/``*embed``) draw from a
    normal with ``pos_std``; bottleneck seeds get the same treatment.
    """
    with torch.no_grad():
        for name, p in module.named_parameters():
            leaf = name.rsplit(".", 1)[-1]
            if leaf == "gain":
                p.fill_(1.0)
            elif leaf == "bias":
                p.zero_()
            elif leaf == "weight" and p.dim() == 2:
                fan_out, fan_in = p.shape
                bound = math.sqrt(6.0 / (fan_in + fan_out))
                p.uniform_(-bound, bound, generator=generator)
            else:
                p.normal_(0.0, pos_std, generator=generator)


# -- optimization ------------------------------------------------------------


@dataclass
class OptimConfig:
    lr: float = 1e-3
    warmup_steps: int = 50
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    clip_norm: float = 1.0


def make_optimizer(params, cfg: OptimConfig):
    opt = torch.optim.Adam(params, lr=cfg.lr, betas=tuple(cfg.betas), eps=cfg.eps)
    warm = max(1, cfg.warmup_steps)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda step: min(1.0, (step + 1) / warm))
    return opt, sched


def clip_grad_norm(params, max_norm: float) -> float:
    grads = [p.grad for p in params if p.grad is not None]
    if not grads:
        return 0.0
    total = torch.sqrt(sum((g.double() ** 2).sum() for g in grads))
    scale = max_norm / (float(total) + 1e-12)
    if scale < 1.0:
        for g in grads:
            g.mul_(scale)
    return float(total)


# -- gradient checking -------------------------------------------------------


@dataclass
class GradCheckReport:
    name: str
    max_rel_error: float = 0.0
    n_checked: int = 0
    n_excluded: int = 0
    passed: bool = True
    error: Optional[str] = None
    worst_index: Optional[int] = None


def finite_diff_check(
    f: Callable[[], torch.Tensor],
    params: Mapping[str, torch.Tensor] | Sequence[torch.Tensor],
    step: float = 1e-5,
    tol: float = 1e-4,
    max_coords: int = 64,
    seed: int = 0,
    kink_tol: float = 1e-3,
    abs_floor: float = 1e-6,
) -> list[GradCheckReport]:
    """Compare autograd gradients of scalar ``f()`` with central differences.

    Each tensor in ``params`` is perturbed in place, one sampled coordinate at
    a time. A coordinate whose one-sided slopes disagree by more than
    ``kink_tol`` (relative) sits on a kink of a piecewise function; it is
    counted as excluded instead of failing. The relative error divides by
    ``max(abs_floor, |analytic|, |numeric|)`` so that gradients which are
    exactly zero (e.g. a key bias under softmax) do not blow up. Run in float64.
    """
    if not isinstance(params, Mapping):
        params = {f"param{i}": p for i, p in enumerate(params)}
    rng = np.random.default_rng(seed)
    tensors = list(params.values())

    reports = []
    try:
        value = f()
        if not torch.isfinite(value).all():
            raise FloatingPointError(f"objective is not finite: {float(value.detach())}")
        grads = torch.autograd.grad(value, tensors, allow_unused=True)
    except (FloatingPointError, RuntimeError) as exc:
        return [GradCheckReport(name, passed=False, error=str(exc)) for name in params]

    f_mid = float(value.detach())
    for (name, p), g in zip(params.items(), grads):
        rep = GradCheckReport(name)
        reports.append(rep)
        g = torch.zeros_like(p) if g is None else g.detach()
        n = p.numel()
        idx = np.arange(n) if n <= max_coords else rng.choice(n, size=max_coords, replace=False)
        flat = p.data.view(-1)
        gflat = g.reshape(-1)
        try:
            with torch.no_grad():
                for i in idx:
                    i = int(i)
                    orig = flat[i].item()
                    flat[i] = orig + step
                    f_plus = float(f())
                    flat[i] = orig - step
                    f_minus = float(f())
                    flat[i] = orig
                    if not all(map(math.isfinite, (f_plus, f_minus, f_mid))):
                        raise FloatingPointError(f"objective not finite near coordinate {i}")
                    right = (f_plus - f_mid) / step
                    left = (f_mid - f_minus) / step
                    if abs(right - left) > kink_tol * max(1.0, abs(left), abs(right)):
                        rep.n_excluded += 1
                        continue
                    numeric = (f_plus - f_minus) / (2 * step)
                    a = float(gflat[i])
                    err = abs(a - numeric) / max(abs_floor, abs(a), abs(numeric))
                    rep.n_checked += 1
                    if err > rep.max_rel_error:
                        rep.max_rel_error, rep.worst_index = err, i
        except FloatingPointError as exc:
            rep.error = str(exc)
            rep.passed = False
            continue
        rep.passed = rep.max_rel_error < tol
    return reports


# -- checkpoints ---------------------------------------------------------------


def save_checkpoint(path, tensors: Mapping[str, torch.Tensor], meta: Optional[dict] = None) -> None:
    """Write ``magic | u64 header length | JSON index | f32 payload`` (little-endian)."""
    index, chunks, offset = [], [], 0
    for name, t in tensors.items():
        arr = np.ascontiguousarray(t.detach().cpu().numpy(), dtype="<f4")
        data = arr.tobytes(order="C")
        index.append({"name": name, "shape": list(arr.shape), "dtype": "f32", "offset": offset, "nbytes": len(data)})
        chunks.append(data)
        offset += len(data)
    header = json.dumps({"tensors": index, "meta": meta or {}}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for c in chunks:
            fh.write(c)


def load_checkpoint(path) -> tuple[dict[str, torch.Tensor], dict]:
    blob = Path(path).read_bytes()
    if blob[: len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    pos = len(CKPT_MAGIC)
    (hlen,) = struct.unpack_from("<Q", blob, pos)
    pos += 8
    header = json.loads(blob[pos : pos + hlen].decode("utf-8"))
    base = pos + hlen
    out = {}
    for entry in header["tensors"]:
        start = base + entry["offset"]
        arr = np.frombuffer(blob, dtype="<f4", count=entry["nbytes"] // 4, offset=start)
        out[entry["name"]] = torch.from_numpy(arr.reshape(entry["shape"]).copy())
    return out, header.get("meta", {})
