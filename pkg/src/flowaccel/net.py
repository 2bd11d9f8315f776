"""Small residual velocity network used to exercise the cache levels.

The forward pass is written out explicitly in numpy so that every
intermediate residual can be stored, predicted, or skipped:

    c  = silu(W_t emb(t) + b_t)                     time conditioning
    h0 = W_in x + b_in + c                          input projection
    for each block b and sub-operation k:
        r_bk = W2_bk silu(W1_bk h + U_bk c + b1_bk) + b2_bk
        h    = h + r_bk
    v  = W_out h + b_out                            output projection

so ``v = W_out (h0 + sum_b sum_k r_bk) + b_out`` holds by construction.
Training is done with torch on a mirror of the same graph.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .flows import RECTIFIED, T_EPS, GaussianMixture, GMMField, InterpolationPath

MAGIC = b"RFNETv01"
FORMAT_VERSION = 1
OPS_PER_BLOCK = 2


class TrainingDiverged(RuntimeError):
    pass


def time_embedding(t: float, dim: int) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-math.log(1000.0) * np.arange(half) / max(half - 1, 1))
    arg = 1000.0 * t * freqs
    return np.concatenate([np.sin(arg), np.cos(arg)])


def _silu(x):
    return x / (1.0 + np.exp(-x))


def _param_shapes(d: int, n_blocks: int, width: int, emb_dim: int):
    shapes = [
        ("time.w", (width, emb_dim)), ("time.b", (width,)),
        ("in.w", (width, d)), ("in.b", (width,)),
    ]
    for b in range(n_blocks):
        for k in range(OPS_PER_BLOCK):
            p = f"block{b}.op{k}"
            shapes += [
                (f"{p}.w1", (width, width)), (f"{p}.u", (width, width)), (f"{p}.b1", (width,)),
                (f"{p}.w2", (width, width)), (f"{p}.b2", (width,)),
            ]
    shapes += [("out.w", (d, width)), ("out.b", (d,))]
    return shapes


@dataclass
class ResidualFlowNet:
    d: int
    n_blocks: int = 4
    width: int = 128
    emb_dim: int = 32
    params: dict = field(default_factory=dict)
    history: list = field(default_factory=list)

    kind = "residual-net"

    @classmethod
    def init(cls, d: int, n_blocks: int = 4, width: int = 128, emb_dim: int = 32,
             seed: int = 0) -> "ResidualFlowNet":
        rng = np.random.Generator(np.random.Philox(seed))
        params = {}
        for name, shape in _param_shapes(d, n_blocks, width, emb_dim):
            if name.endswith((".b", ".b1", ".b2")):
                params[name] = np.zeros(shape)
            else:
                fan_in = shape[1]
                gain = 0.1 if name.endswith(".w2") else 1.0
                params[name] = gain * rng.standard_normal(shape) / math.sqrt(fan_in)
        return cls(d, n_blocks, width, emb_dim, params)

    @property
    def dim(self) -> int:
        return self.d

    def copy(self) -> "ResidualFlowNet":
        return ResidualFlowNet(self.d, self.n_blocks, self.width, self.emb_dim,
                               {k: v.copy() for k, v in self.params.items()}, list(self.history))

    # -- forward pieces -------------------------------------------------
    def conditioning(self, t: float) -> np.ndarray:
        p = self.params
        return _silu(p["time.w"] @ time_embedding(t, self.emb_dim) + p["time.b"])

    def input_projection(self, x: np.ndarray, c: np.ndarray) -> np.ndarray:
        p = self.params
        return x @ p["in.w"].T + p["in.b"] + c

    def operation(self, b: int, k: int, h: np.ndarray, c: np.ndarray) -> np.ndarray:
        p = self.params
        q = f"block{b}.op{k}"
        z = h @ p[q + ".w1"].T + (p[q + ".u"] @ c + p[q + ".b1"])
        return _silu(z) @ p[q + ".w2"].T + p[q + ".b2"]

    def block(self, b: int, h: np.ndarray, c: np.ndarray):
        """Run block ``b``; return its total residual and the per-operation residuals."""
        ops = []
        g = h
        for k in range(OPS_PER_BLOCK):
            r = self.operation(b, k, g, c)
            ops.append(r)
            g = g + r
        return sum_residuals(ops), ops

    def output_projection(self, h: np.ndarray) -> np.ndarray:
        p = self.params
        return h @ p["out.w"].T + p["out.b"]

    def forward(self, x, t: float, return_residuals: bool = False):
        squeeze = np.ndim(x) == 1
        x = np.atleast_2d(np.asarray(x, dtype=float))
        c = self.conditioning(t)
        h0 = self.input_projection(x, c)
        h = h0
        block_res, op_res = [], []
        for b in range(self.n_blocks):
            r, ops = self.block(b, h, c)
            block_res.append(r)
            op_res.append(ops)
            h = h + r
        v = self.output_projection(h)
        if squeeze:
            v = v[0]
        if return_residuals:
            return v, {"h0": h0, "blocks": block_res, "ops": op_res}
        return v

    def __call__(self, x, t: float) -> np.ndarray:
        return self.forward(x, t)

    # -- serialization --------------------------------------------------
    def save(self, path) -> None:
        header = MAGIC + struct.pack("<6I", FORMAT_VERSION, self.d, self.n_blocks, self.width,
                                     self.emb_dim, OPS_PER_BLOCK)
        body = b"".join(
            np.ascontiguousarray(self.params[name], dtype="<f8").tobytes()
            for name, _ in _param_shapes(self.d, self.n_blocks, self.width, self.emb_dim)
        )
        _atomic_write_bytes(path, header + body)

    @classmethod
    def load(cls, path) -> "ResidualFlowNet":
        with open(path, "rb") as fh:
            raw = fh.read()
        if raw[:8] != MAGIC:
            raise ValueError(f"{path}: not a residual-net file (bad magic)")
        version, d, n_blocks, width, emb_dim, ops = struct.unpack_from("<6I", raw, 8)
        if version != FORMAT_VERSION or ops != OPS_PER_BLOCK:
            raise ValueError(f"{path}: unsupported format version {version} / ops {ops}")
        offset = 8 + 24
        params = {}
        for name, shape in _param_shapes(d, n_blocks, width, emb_dim):
            n = int(np.prod(shape))
            params[name] = np.frombuffer(raw, dtype="<f8", count=n, offset=offset).reshape(shape).astype(float)
            offset += 8 * n
        if offset != len(raw):
            raise ValueError(f"{path}: trailing or missing weight bytes")
        return cls(d, n_blocks, width, emb_dim, params)


def sum_residuals(residuals):
    """Left-to-right sum; every code path composes residuals in this order."""
    total = residuals[0]
    for r in residuals[1:]:
        total = total + r
    return total


def _atomic_write_bytes(path, data: bytes) -> None:
    import os
    import tempfile

    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# -- training -------------------------------------------------------------

@dataclass
class TrainConfig:
    iterations: int = 2000
    batch_size: int = 256
    lr: float = 1e-3
    seed: int = 0
    checkpoint_every: int = 250
    n_validation: int = 512
    n_blocks: int = 4
    width: int = 128
    emb_dim: int = 32

    def __post_init__(self):
        if self.iterations < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("iterations must be >= 0, batch_size >= 1 and lr > 0")


def _torch_mirror(net: ResidualFlowNet):
    import torch

    params = {k: torch.tensor(v, dtype=torch.float64, requires_grad=True) for k, v in net.params.items()}
    half = net.emb_dim // 2
    freqs = torch.exp(-math.log(1000.0) * torch.arange(half, dtype=torch.float64) / max(half - 1, 1))

    def forward(x, t):
        arg = 1000.0 * t[:, None] * freqs[None]
        emb = torch.cat([torch.sin(arg), torch.cos(arg)], dim=1)
        silu = torch.nn.functional.silu
        c = silu(emb @ params["time.w"].T + params["time.b"])
        h = x @ params["in.w"].T + params["in.b"] + c
        for b in range(net.n_blocks):
            for k in range(OPS_PER_BLOCK):
                q = f"block{b}.op{k}"
                z = h @ params[q + ".w1"].T + c @ params[q + ".u"].T + params[q + ".b1"]
                h = h + silu(z) @ params[q + ".w2"].T + params[q + ".b2"]
        return h @ params["out.w"].T + params["out.b"]

    return params, forward


def _cfm_batch(gmm: GaussianMixture, path: InterpolationPath, n: int, rng: np.random.Generator):
    x0 = gmm.sample(n, rng)
    x1 = rng.standard_normal((n, gmm.dim))
    t = rng.uniform(T_EPS, 1.0 - T_EPS, size=n)
    a = np.array([path.alpha(s) for s in t])
    s = np.array([path.sigma(s) for s in t])
    ad = np.array([path.alpha_dot(s) for s in t])
    sd = np.array([path.sigma_dot(s) for s in t])
    xt = a[:, None] * x0 + s[:, None] * x1
    # conditional target d/dt (alpha x0 + sigma x1), identical to the
    # x_t / x_0 form of the conditional velocity
    target = ad[:, None] * x0 + sd[:, None] * x1
    return xt, t, target


def train_toy_net(gmm: GaussianMixture, path: InterpolationPath = RECTIFIED,
                  config: TrainConfig | None = None) -> ResidualFlowNet:
    """Fit a ResidualFlowNet to ``gmm`` with the conditional flow-matching loss.

    Checkpoints record the validation CFM loss and the mean squared deviation
    from the exact marginal field on a fixed held-out (x, t) set; they are
    appended to ``net.history``.
    """
    import torch

    cfg = config or TrainConfig()
    net = ResidualFlowNet.init(gmm.dim, cfg.n_blocks, cfg.width, cfg.emb_dim, seed=cfg.seed)
    if cfg.iterations == 0:
        return net

    rng = np.random.Generator(np.random.Philox(cfg.seed + 1))
    val_rng = np.random.Generator(np.random.Philox(cfg.seed + 2))
    xv, tv, yv = _cfm_batch(gmm, path, cfg.n_validation, val_rng)
    field = GMMField(gmm, path)
    exact = np.stack([field(x, t) for x, t in zip(xv, tv)])
    xv_t, tv_t, yv_t = (torch.tensor(a, dtype=torch.float64) for a in (xv, tv, yv))

    params, forward = _torch_mirror(net)
    opt = torch.optim.Adam(params.values(), lr=cfg.lr)

    def checkpoint(it: int):
        with torch.no_grad(), np.errstate(over="ignore", invalid="ignore"):  # divergence shows up as inf
            pred = forward(xv_t, tv_t)
            val = float(((pred - yv_t) ** 2).sum(1).mean())
            dev = float(((pred.numpy() - exact) ** 2).sum(1).mean())
        net.history.append({"iteration": it, "val_cfm_loss": val, "field_mse": dev})

    checkpoint(0)
    for it in range(1, cfg.iterations + 1):
        xt, t, target = _cfm_batch(gmm, path, cfg.batch_size, rng)
        pred = forward(torch.tensor(xt), torch.tensor(t))
        loss = ((pred - torch.tensor(target)) ** 2).sum(1).mean()
        if not torch.isfinite(loss):
            raise TrainingDiverged(f"non-finite loss {loss.item()} at iteration {it}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        if it % cfg.checkpoint_every == 0 or it == cfg.iterations:
            checkpoint(it)

    for k, v in params.items():
        net.params[k] = v.detach().numpy().copy()
    return net
