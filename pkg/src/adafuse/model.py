"""Adaptive gated fusion with a mixture-of-experts residual branch.

Everything here works on row batches: ``z_T`` and ``z_D`` are ``(B, d)``
arrays (a single ``(d,)`` vector is promoted to one row by the single-sample
wrappers). Forward pass, per row::

    h_T = gelu(P_T z_T + b_T)            h_D = gelu(P_D z_D + b_D)
    h_u = [h_T ; h_D]
    lam = sigmoid(w2 . gelu(W1 h_u + b1) + b2)
    z_base = lam * z_T + (1 - lam) * z_D
    p = softmax(R2 gelu(R1 h_u + r1) + r2)
    h_res = sum_k p_k gelu(E_k h_u + e_k)
    z_final = normalize(z_base + W_out h_res + b_out)

The backward pass is written out by hand; see :func:`fuse_backward`.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import numerics as nx
from .exceptions import (
    ConfigError,
    ContractViolation,
    DegenerateFusionError,
    ShapeError,
)

DEFAULT_STATIC_WEIGHT = 0.55
GATE_BIAS_INIT = 1.0


@dataclass(frozen=True)
class FusionConfig:
    d: int = 64
    d_proj: int = 128
    d_mid: int = 32
    d_hidden: int = 64
    n_experts: int = 4
    d_router: int = 16

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if not isinstance(value, (int, np.integer)) or isinstance(value, bool) or value < 1:
                raise ConfigError(f"FusionConfig.{f.name} must be an integer >= 1, got {value!r}")

    def to_dict(self) -> dict:
        return {k: int(v) for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, data: dict) -> "FusionConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown FusionConfig fields: {sorted(unknown)}")
        return cls(**data)


def tensor_shapes(config: FusionConfig) -> dict[str, tuple[int, ...]]:
    """Ordered manifest of every learnable tensor; the order is the wire order."""
    d, dp, dm = config.d, config.d_proj, config.d_mid
    dh, K, dr = config.d_hidden, config.n_experts, config.d_router
    shapes = {
        "proj_T.W": (dp, d),
        "proj_T.b": (dp,),
        "proj_D.W": (dp, d),
        "proj_D.b": (dp,),
        "gate.W1": (dm, 2 * dp),
        "gate.b1": (dm,),
        "gate.W2": (1, dm),
        "gate.b2": (1,),
        "router.W1": (dr, 2 * dp),
        "router.b1": (dr,),
        "router.W2": (K, dr),
        "router.b2": (K,),
    }
    for k in range(K):
        shapes[f"experts.{k}.W"] = (dh, 2 * dp)
        shapes[f"experts.{k}.b"] = (dh,)
    shapes["out.W"] = (d, dh)
    shapes["out.b"] = (d,)
    return shapes


def count_params(config: FusionConfig) -> int:
    d, dp, dm = config.d, config.d_proj, config.d_mid
    dh, K, dr = config.d_hidden, config.n_experts, config.d_router
    return (
        2 * (d * dp + dp)
        + (2 * dp * dm + dm)
        + (dm + 1)
        + (2 * dp * dr + dr)
        + (dr * K + K)
        + K * (2 * dp * dh + dh)
        + (dh * d + d)
    )


@dataclass
class FusionParams:
    """Learnable tensors keyed by manifest name, plus the owning config.

    ``step`` counts optimizer updates; cached activations remember it so a
    backward pass against parameters that moved since the forward is caught.
    """

    config: FusionConfig
    tensors: dict[str, np.ndarray]
    step: int = 0

    def __post_init__(self):
        expected = tensor_shapes(self.config)
        if list(self.tensors) != list(expected):
            raise ShapeError(f"tensor names {list(self.tensors)} do not match manifest {list(expected)}")
        for name, shape in expected.items():
            if self.tensors[name].shape != shape:
                raise ShapeError(f"{name}: expected shape {shape}, got {self.tensors[name].shape}")

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def n_params(self) -> int:
        return sum(int(t.size) for t in self.tensors.values())

    def copy(self) -> "FusionParams":
        return FusionParams(self.config, {k: v.copy() for k, v in self.tensors.items()}, self.step)

    def astype(self, dtype) -> "FusionParams":
        return FusionParams(self.config, {k: v.astype(dtype) for k, v in self.tensors.items()}, self.step)

    def expert_stack(self) -> tuple[np.ndarray, np.ndarray]:
        K = self.config.n_experts
        W = np.stack([self.tensors[f"experts.{k}.W"] for k in range(K)])
        b = np.stack([self.tensors[f"experts.{k}.b"] for k in range(K)])
        return W, b


def init_params(config: FusionConfig, seed: int) -> FusionParams:
    """Uniform(+-sqrt(1/fan_in)) weights, zero biases, gate output bias 1.0."""
    rng = np.random.default_rng(seed)
    dtype = nx.storage_dtype()
    tensors = {}
    for name, shape in tensor_shapes(config).items():
        if len(shape) == 2:
            bound = math.sqrt(1.0 / shape[1])
            tensors[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
        else:
            tensors[name] = np.zeros(shape, dtype=dtype)
    tensors["gate.b2"][0] = GATE_BIAS_INIT
    return FusionParams(config, tensors)


def zero_params(config: FusionConfig) -> FusionParams:
    dtype = nx.storage_dtype()
    return FusionParams(config, {n: np.zeros(s, dtype=dtype) for n, s in tensor_shapes(config).items()})


def _linear(x: np.ndarray, W: np.ndarray, b: np.ndarray) -> np.ndarray:
    return nx.matmul(x, W.T) + b


def _as_rows(z, d: int, name: str) -> np.ndarray:
    arr = np.asarray(z)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] != d:
        raise ShapeError(f"{name}: expected (B, {d}) or ({d},), got {np.shape(z)}")
    return nx.as_storage(arr)


# ---------------------------------------------------------------------------
# individual stages


def project(params: FusionParams, z_T, z_D) -> tuple[np.ndarray, np.ndarray]:
    d = params.config.d
    zt = _as_rows(z_T, d, "z_T")
    zd = _as_rows(z_D, d, "z_D")
    h_T = nx.gelu(_linear(zt, params["proj_T.W"], params["proj_T.b"]))
    h_D = nx.gelu(_linear(zd, params["proj_D.W"], params["proj_D.b"]))
    if np.ndim(z_T) == 1:
        return h_T[0], h_D[0]
    return h_T, h_D


def joint_context(h_T, h_D) -> np.ndarray:
    h_T = np.asarray(h_T)
    h_D = np.asarray(h_D)
    if h_T.shape != h_D.shape:
        raise ShapeError(f"joint context of mismatched shapes {h_T.shape} and {h_D.shape}")
    return np.concatenate([h_T, h_D], axis=-1)


def gate(params: FusionParams, h_u) -> np.ndarray | float:
    hu = np.atleast_2d(h_u)
    q = nx.gelu(_linear(hu, params["gate.W1"], params["gate.b1"]))
    s = _linear(q, params["gate.W2"], params["gate.b2"])[:, 0]
    lam = nx.sigmoid(s)
    return float(lam[0]) if np.ndim(h_u) == 1 else lam


def base_fusion(lam, z_T, z_D) -> np.ndarray:
    z_T = np.asarray(z_T)
    z_D = np.asarray(z_D)
    if z_T.shape != z_D.shape:
        raise ShapeError(f"base fusion of mismatched shapes {z_T.shape} and {z_D.shape}")
    lam = np.asarray(lam, dtype=np.float64)
    if lam.ndim == 1:
        lam = lam[:, None]
    out = lam * z_T.astype(np.float64) + (1.0 - lam) * z_D.astype(np.float64)
    return out.astype(nx.storage_dtype())


def route(params: FusionParams, h_u) -> np.ndarray:
    hu = np.atleast_2d(h_u)
    rq = nx.gelu(_linear(hu, params["router.W1"], params["router.b1"]))
    logits = _linear(rq, params["router.W2"], params["router.b2"])
    p = nx.softmax(logits, axis=-1)
    return p[0] if np.ndim(h_u) == 1 else p


def experts_forward(params: FusionParams, h_u, p) -> np.ndarray:
    hu = np.atleast_2d(h_u)
    pp = np.atleast_2d(p)
    outs = _expert_outputs(params, hu)[1]
    h_res = np.einsum("bk,bkh->bh", pp.astype(np.float64), outs.astype(np.float64))
    h_res = h_res.astype(nx.storage_dtype())
    return h_res[0] if np.ndim(h_u) == 1 else h_res


def _expert_outputs(params: FusionParams, hu: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    W, b = params.expert_stack()
    pre = np.einsum("bi,khi->bkh", hu.astype(np.float64), W.astype(np.float64)) + b
    pre = pre.astype(nx.storage_dtype())
    return pre, nx.gelu(pre)


# ---------------------------------------------------------------------------
# full forward / backward


@dataclass
class FusionActivations:
    """Everything the backward pass needs, one row per sample."""

    z_T: np.ndarray
    z_D: np.ndarray
    a_T: np.ndarray  # projection pre-activations
    a_D: np.ndarray
    h_T: np.ndarray
    h_D: np.ndarray
    h_u: np.ndarray
    gate_pre: np.ndarray
    gate_hidden: np.ndarray
    lam: np.ndarray
    router_pre: np.ndarray
    router_hidden: np.ndarray
    p: np.ndarray
    expert_pre: np.ndarray  # (B, K, d_hidden)
    expert_out: np.ndarray
    h_res: np.ndarray
    z_base: np.ndarray
    z_pre_norm: np.ndarray
    pre_norm: np.ndarray  # (B,) norms of z_pre_norm
    z_final: np.ndarray
    params_id: int = 0
    params_step: int = 0


@dataclass(frozen=True)
class GateRecord:
    sample_id: object
    round: int
    lam: float
    image_weight: float
    cos_TD: float


def fuse_forward_batch(params: FusionParams, z_T, z_D, sample_ids=None, rounds=None):
    """Fuse a batch of (text, image) rows. Returns ``(z_final, acts)``."""
    d = params.config.d
    zt = _as_rows(z_T, d, "z_T")
    zd = _as_rows(z_D, d, "z_D")
    if zt.shape != zd.shape:
        raise ShapeError(f"z_T {zt.shape} and z_D {zd.shape} differ")

    a_T = _linear(zt, params["proj_T.W"], params["proj_T.b"])
    a_D = _linear(zd, params["proj_D.W"], params["proj_D.b"])
    h_T = nx.gelu(a_T)
    h_D = nx.gelu(a_D)
    h_u = joint_context(h_T, h_D)

    gate_pre = _linear(h_u, params["gate.W1"], params["gate.b1"])
    gate_hidden = nx.gelu(gate_pre)
    lam = nx.sigmoid(_linear(gate_hidden, params["gate.W2"], params["gate.b2"])[:, 0])
    z_base = base_fusion(lam, zt, zd)

    router_pre = _linear(h_u, params["router.W1"], params["router.b1"])
    router_hidden = nx.gelu(router_pre)
    p = nx.softmax(_linear(router_hidden, params["router.W2"], params["router.b2"]), axis=-1)

    expert_pre, expert_out = _expert_outputs(params, h_u)
    h_res = np.einsum("bk,bkh->bh", p.astype(np.float64), expert_out.astype(np.float64))
    h_res = h_res.astype(nx.storage_dtype())

    v = (z_base.astype(np.float64) + nx.matmul(h_res, params["out.W"].T) + params["out.b"])
    norms = np.sqrt(np.sum(v * v, axis=1))
    bad = np.flatnonzero(norms < nx.NORM_EPS)
    if bad.size:
        i = int(bad[0])
        sid = None if sample_ids is None else sample_ids[i]
        rnd = None if rounds is None else rounds[i]
        raise DegenerateFusionError(
            f"fused query for row {i} (sample {sid}, round {rnd}) has norm {norms[i]:.3g}",
            sample_id=sid,
            round_index=rnd,
        )
    z_final = (v / norms[:, None]).astype(nx.storage_dtype())

    acts = FusionActivations(
        z_T=zt, z_D=zd, a_T=a_T, a_D=a_D, h_T=h_T, h_D=h_D, h_u=h_u,
        gate_pre=gate_pre, gate_hidden=gate_hidden, lam=lam,
        router_pre=router_pre, router_hidden=router_hidden, p=p,
        expert_pre=expert_pre, expert_out=expert_out, h_res=h_res,
        z_base=z_base, z_pre_norm=v.astype(nx.storage_dtype()), pre_norm=norms,
        z_final=z_final, params_id=id(params), params_step=params.step,
    )
    return z_final, acts


def gate_records(acts: FusionActivations, sample_ids=None, rounds=None) -> list[GateRecord]:
    cos = nx.rowwise_cosine(acts.z_T, acts.z_D)
    n = acts.lam.shape[0]
    sample_ids = range(n) if sample_ids is None else sample_ids
    rounds = [0] * n if rounds is None else rounds
    out = []
    for sid, rnd, lam, c in zip(sample_ids, rounds, acts.lam, cos):
        lam = float(lam)
        out.append(GateRecord(sid, int(rnd), lam, 1.0 - lam, float(c)))
    return out


def fuse_forward(params: FusionParams, z_T, z_D, sample_id=None, round_index: int = 0):
    """Single-sample fusion: ``(z_final, acts, GateRecord)``."""
    z_final, acts = fuse_forward_batch(
        params, z_T, z_D,
        sample_ids=None if sample_id is None else [sample_id],
        rounds=[round_index],
    )
    record = gate_records(acts, [sample_id], [round_index])[0]
    return z_final[0], acts, record


def transform(params: FusionParams, z_T, z_D) -> np.ndarray:
    """Fused unit queries for a batch, without keeping activations."""
    return fuse_forward_batch(params, z_T, z_D)[0]


def fuse_backward(params: FusionParams, acts: FusionActivations, z_T, z_D, grad_z_final):
    """Reverse-mode pass through the fusion module.

    Returns ``(grads, grad_z_T, grad_z_D)`` where ``grads`` mirrors
    ``params.tensors`` and is summed over the batch rows.
    """
    d = params.config.d
    zt = _as_rows(z_T, d, "z_T")
    zd = _as_rows(z_D, d, "z_D")
    if acts.params_id != id(params) or acts.params_step != params.step:
        raise ContractViolation("activations were produced by different or since-updated parameters")
    if not (np.array_equal(zt, acts.z_T) and np.array_equal(zd, acts.z_D)):
        raise ContractViolation("activations do not match the given inputs")
    gz = np.asarray(grad_z_final, dtype=np.float64)
    if gz.ndim == 1:
        gz = gz[None, :]
    if gz.shape != acts.z_final.shape:
        raise ShapeError(f"grad_z_final shape {gz.shape} != {acts.z_final.shape}")

    f64 = lambda a: np.asarray(a, dtype=np.float64)  # noqa: E731
    P = {k: f64(v) for k, v in params.tensors.items()}
    K = params.config.n_experts
    zt64, zd64 = f64(zt), f64(zd)
    z = f64(acts.z_final)
    h_u = f64(acts.h_u)
    lam = f64(acts.lam)[:, None]
    p = f64(acts.p)

    # normalisation Jacobian (I - z z^T) / ||v||
    gv = (gz - z * np.sum(z * gz, axis=1, keepdims=True)) / acts.pre_norm[:, None]

    g = {}
    g["out.W"] = gv.T @ f64(acts.h_res)
    g["out.b"] = gv.sum(axis=0)
    g_hres = gv @ P["out.W"]

    # z_base = lam * z_T + (1 - lam) * z_D; lam appears in both terms
    g_zT = lam * gv
    g_zD = (1.0 - lam) * gv
    g_lam = np.sum(gv * (zt64 - zd64), axis=1)

    g_s = g_lam * lam[:, 0] * (1.0 - lam[:, 0])
    q = f64(acts.gate_hidden)
    g["gate.W2"] = g_s[None, :] @ q
    g["gate.b2"] = np.array([g_s.sum()])
    g_gpre = (g_s[:, None] @ P["gate.W2"]) * f64(nx.gelu_grad(acts.gate_pre))
    g["gate.W1"] = g_gpre.T @ h_u
    g["gate.b1"] = g_gpre.sum(axis=0)
    g_hu = g_gpre @ P["gate.W1"]

    # experts and router
    outs = f64(acts.expert_out)
    g_p = np.einsum("bkh,bh->bk", outs, g_hres)
    g_epre = p[:, :, None] * g_hres[:, None, :] * f64(nx.gelu_grad(acts.expert_pre))
    for k in range(K):
        g[f"experts.{k}.W"] = g_epre[:, k, :].T @ h_u
        g[f"experts.{k}.b"] = g_epre[:, k, :].sum(axis=0)
        g_hu += g_epre[:, k, :] @ P[f"experts.{k}.W"]

    g_logits = p * (g_p - np.sum(p * g_p, axis=1, keepdims=True))
    rq = f64(acts.router_hidden)
    g["router.W2"] = g_logits.T @ rq
    g["router.b2"] = g_logits.sum(axis=0)
    g_rpre = (g_logits @ P["router.W2"]) * f64(nx.gelu_grad(acts.router_pre))
    g["router.W1"] = g_rpre.T @ h_u
    g["router.b1"] = g_rpre.sum(axis=0)
    g_hu += g_rpre @ P["router.W1"]

    dp = params.config.d_proj
    g_aT = g_hu[:, :dp] * f64(nx.gelu_grad(acts.a_T))
    g_aD = g_hu[:, dp:] * f64(nx.gelu_grad(acts.a_D))
    g["proj_T.W"] = g_aT.T @ zt64
    g["proj_T.b"] = g_aT.sum(axis=0)
    g["proj_D.W"] = g_aD.T @ zd64
    g["proj_D.b"] = g_aD.sum(axis=0)
    g_zT += g_aT @ P["proj_T.W"]
    g_zD += g_aD @ P["proj_D.W"]

    dtype = nx.storage_dtype()
    grads = {name: g[name].astype(dtype) for name in params.tensors}
    return grads, g_zT.astype(dtype), g_zD.astype(dtype)


# ---------------------------------------------------------------------------
# comparison fusers


def static_fusion(z_T, z_D, w: float = DEFAULT_STATIC_WEIGHT) -> np.ndarray:
    """Fixed-weight additive fusion followed by l2 normalisation."""
    if not 0.0 <= w <= 1.0:
        raise ConfigError(f"static fusion weight must lie in [0, 1], got {w}")
    z_T = np.asarray(z_T)
    z_D = np.asarray(z_D)
    if z_T.shape != z_D.shape:
        raise ShapeError(f"static fusion of mismatched shapes {z_T.shape} and {z_D.shape}")
    mixed = w * z_T.astype(np.float64) + (1.0 - w) * z_D.astype(np.float64)
    return nx.l2_normalize(mixed)


def text_only(z_T, z_D=None) -> np.ndarray:
    """Text-only query: the normalised text embedding; the image is ignored."""
    return nx.l2_normalize(z_T)


def frozen_gate_params(config: FusionConfig, w: float) -> FusionParams:
    """A model whose gate outputs ``w`` everywhere and whose residual is zero."""
    if not 0.0 < w < 1.0:
        raise ConfigError("a sigmoid gate can only be frozen strictly inside (0, 1)")
    params = zero_params(config)
    params.tensors["gate.b2"][0] = math.log(w / (1.0 - w))
    return params
