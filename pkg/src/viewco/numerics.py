"""Tensor primitives shared by the encoders and losses.

Autodiff comes from torch; this module pins down the handful of primitives the
rest of the package relies on (normalization, tempered softmax, cosine
similarity), a finite-difference gradient checker and the ``VWCT`` tensor file
format used for checkpoints and fixtures.
"""
from __future__ import annotations

import math
import os
import struct
import tempfile
from pathlib import Path
from typing import Callable, Iterable, Mapping, NamedTuple, Sequence

import numpy as np
import torch

from .errors import DegenerateVector, FormatError, InvalidTemperature, NonFiniteObjective, ShapeError

MAGIC = b"VWCT"
FORMAT_VERSION = 1
DTYPE_TAGS = {torch.float32: 0, torch.float64: 1}
TAG_DTYPES = {0: (torch.float32, "<f4"), 1: (torch.float64, "<f8")}


class GradRecord(NamedTuple):
    name: str
    grad: torch.Tensor


def check_finite(t: torch.Tensor, what: str = "tensor") -> torch.Tensor:
    if not bool(torch.isfinite(t).all()):
        raise NonFiniteObjective(f"non-finite values in {what}")
    return t


def l2_normalize(v: torch.Tensor, eps: float = 1e-12, dim: int = -1) -> torch.Tensor:
    """Scale each row of ``v`` to unit Euclidean norm.

    Raises DegenerateVector when a row norm is at or below ``eps``.
    """
    norm = torch.linalg.vector_norm(v, dim=dim, keepdim=True)
    if bool((norm <= eps).any()):
        raise DegenerateVector(f"row norm <= {eps}")
    return check_finite(v / norm, "l2_normalize")


def _check_temperature(temperature) -> None:
    t = temperature.detach() if isinstance(temperature, torch.Tensor) else torch.as_tensor(temperature)
    if not bool((t > 0).all()):
        raise InvalidTemperature(f"temperature must be positive, got {t}")


def log_softmax(x: torch.Tensor, temperature=1.0, dim: int = -1) -> torch.Tensor:
    _check_temperature(temperature)
    z = x / temperature
    # max-subtraction; the shift is a constant so detaching it leaves gradients exact
    z = z - z.amax(dim=dim, keepdim=True).detach()
    out = z - torch.log(torch.exp(z).sum(dim=dim, keepdim=True))
    return check_finite(out, "log_softmax")


def softmax(x: torch.Tensor, temperature=1.0, dim: int = -1) -> torch.Tensor:
    return torch.exp(log_softmax(x, temperature, dim))


def logsumexp(x: torch.Tensor, dim) -> torch.Tensor:
    m = x.amax(dim=dim, keepdim=True).detach()
    out = torch.log(torch.exp(x - m).sum(dim=dim, keepdim=True)) + m
    if isinstance(dim, int):
        dim = (dim,)
    return out.squeeze(dim)


def similarity_matrix(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Cosine similarities between the rows of two row-normalized matrices.

    Leading batch dimensions broadcast, so ``(B, m, d) x (B, n, d) -> (B, m, n)``.
    """
    if a.shape[-1] != b.shape[-1]:
        raise ShapeError(f"feature dims differ: {a.shape[-1]} vs {b.shape[-1]}")
    return check_finite(a @ b.transpose(-1, -2), "similarity_matrix")


def gradient_records(named_params: Iterable[tuple[str, torch.Tensor]]) -> list[GradRecord]:
    """Gradients currently held by parameters; parameters without one are skipped."""
    out = []
    for name, p in named_params:
        if p.grad is not None:
            if p.grad.shape != p.shape:
                raise ShapeError(f"gradient shape mismatch for {name}")
            out.append(GradRecord(name, p.grad.detach().clone()))
    return out


def grad_check(
    f: Callable[..., torch.Tensor],
    params: Sequence[torch.Tensor],
    step: float = 1e-5,
    samples: int | None = None,
    seed: int = 0,
) -> float:
    """Compare autograd gradients of scalar ``f(*params)`` with central differences.

    Returns the max over checked entries of
    ``|analytic - numeric| / max(1, |numeric|)``. With ``samples`` set, only that
    many randomly chosen entries per parameter are perturbed.
    """
    params = [p.detach().clone().requires_grad_(True) for p in params]
    value = f(*params)
    if value.numel() != 1:
        raise ShapeError("grad_check needs a scalar objective")
    if not bool(torch.isfinite(value)):
        raise NonFiniteObjective("objective is not finite")
    analytic = torch.autograd.grad(value, params, allow_unused=True)
    rng = np.random.default_rng(seed)
    worst = 0.0
    with torch.no_grad():
        work = [p.detach().clone() for p in params]
        for i, p in enumerate(work):
            g = analytic[i]
            g = torch.zeros_like(p) if g is None else g.reshape(-1)
            flat = p.view(-1)
            idx = np.arange(flat.numel())
            if samples is not None and samples < flat.numel():
                idx = rng.choice(flat.numel(), size=samples, replace=False)
            for j in idx:
                orig = flat[j].item()
                flat[j] = orig + step
                hi = f(*work).item()
                flat[j] = orig - step
                lo = f(*work).item()
                flat[j] = orig
                if not (math.isfinite(hi) and math.isfinite(lo)):
                    raise NonFiniteObjective("objective is not finite under perturbation")
                numeric = (hi - lo) / (2 * step)
                err = abs(g[j].item() - numeric) / max(1.0, abs(numeric))
                worst = max(worst, err)
    return worst


def save_tensors(path: str | os.PathLike, tensors: Mapping[str, torch.Tensor]) -> None:
    """Write named tensors in the VWCT format; the write is atomic."""
    chunks = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(tensors))]
    for name, t in tensors.items():
        t = torch.as_tensor(t).detach()
        if t.dtype not in DTYPE_TAGS:
            t = t.to(torch.float64)
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<B", t.dim()))
        chunks.append(struct.pack(f"<{t.dim()}I", *t.shape))
        tag = DTYPE_TAGS[t.dtype]
        chunks.append(struct.pack("<B", tag))
        chunks.append(t.cpu().contiguous().numpy().astype(TAG_DTYPES[tag][1], copy=False).tobytes())
    _atomic_write(Path(path), b"".join(chunks))


def load_tensors(path: str | os.PathLike) -> dict[str, torch.Tensor]:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise FormatError("bad magic")
    try:
        version, count = struct.unpack_from("<II", buf, 4)
        if version != FORMAT_VERSION:
            raise FormatError(f"unsupported version {version}")
        off = 12
        out: dict[str, torch.Tensor] = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<H", buf, off)
            off += 2
            name = buf[off:off + n].decode("utf-8")
            off += n
            (rank,) = struct.unpack_from("<B", buf, off)
            off += 1
            dims = struct.unpack_from(f"<{rank}I", buf, off)
            off += 4 * rank
            (tag,) = struct.unpack_from("<B", buf, off)
            off += 1
            if tag not in TAG_DTYPES:
                raise FormatError(f"unknown dtype tag {tag}")
            dtype, np_dtype = TAG_DTYPES[tag]
            size = int(np.prod(dims, dtype=np.int64))
            nbytes = size * np.dtype(np_dtype).itemsize
            if off + nbytes > len(buf):
                raise FormatError("truncated tensor data")
            arr = np.frombuffer(buf, dtype=np_dtype, count=size, offset=off).reshape(dims)
            off += nbytes
            out[name] = torch.from_numpy(arr.astype(np_dtype[1:], copy=True))
    except struct.error as exc:
        raise FormatError(f"truncated file: {exc}") from exc
    if off != len(buf):
        raise FormatError("trailing bytes")
    return out


def _atomic_write(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
