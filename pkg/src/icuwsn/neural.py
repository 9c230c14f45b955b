"""Dense -> GRU -> dense Q-network with hand-written backprop through time, plus Adam.

Shapes follow a (time, batch, feature) convention. Parameters live in one flat
vector; ``NetParams.view`` exposes the named weight matrices as views into it.
"""
from __future__ import annotations

import ctypes
import ctypes.util
import json
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CHECKPOINT_FORMAT = 1
INIT_SCHEMES = ("fan_in_uniform", "glorot_uniform")


_ALLOCATOR_TUNED = False


def tune_allocator() -> bool:
    """Keep freed heap memory for reuse instead of returning it to the OS (glibc only).

    Training allocates and frees multi-megabyte temporaries every update; with
    the default thresholds each one is a fresh mmap whose pages fault in again.
    Returns whether the tuning is active.
    """
    global _ALLOCATOR_TUNED
    if _ALLOCATOR_TUNED:
        return True
    name = ctypes.util.find_library("c")
    if not name:
        return False
    try:
        libc = ctypes.CDLL(name)
        m_trim, m_top_pad, m_mmap = -1, -2, -3
        ok = (libc.mallopt(m_mmap, 1 << 30) and libc.mallopt(m_trim, 1 << 30)
              and libc.mallopt(m_top_pad, 64 << 20))
    except (OSError, AttributeError):
        return False
    _ALLOCATOR_TUNED = bool(ok)
    return _ALLOCATOR_TUNED


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _sigmoid_(x):
    """In-place logistic function (same rounding as ``_sigmoid``)."""
    np.multiply(x, 0.5, out=x)
    np.tanh(x, out=x)
    x += 1.0
    x *= 0.5
    return x


def make_layout(obs_dim: int, n_actions: int, hidden: int = 64) -> "OrderedDict[str, tuple]":
    h = hidden
    return OrderedDict([
        ("fc1.w", (obs_dim, h)), ("fc1.b", (h,)),
        ("gru.w_x", (h, 3 * h)), ("gru.b_x", (3 * h,)),
        ("gru.w_h", (h, 3 * h)), ("gru.b_h", (3 * h,)),
        ("fc2.w", (h, h)), ("fc2.b", (h,)),
        ("out.w", (h, n_actions)), ("out.b", (n_actions,)),
    ])


@dataclass(eq=False)
class NetParams:
    obs_dim: int
    n_actions: int
    hidden: int = 64
    flat: np.ndarray | None = None
    init_scheme: str = "fan_in_uniform"
    layout: "OrderedDict[str, tuple]" = field(init=False)
    offsets: dict = field(init=False)

    def __post_init__(self):
        self.layout = make_layout(self.obs_dim, self.n_actions, self.hidden)
        self.offsets = {}
        off = 0
        for name, shape in self.layout.items():
            size = int(np.prod(shape))
            self.offsets[name] = (off, off + size)
            off += size
        if self.flat is None:
            self.flat = np.zeros(off, dtype=np.float32)
        if self.flat.shape != (off,):
            raise ValueError(f"flat vector has {self.flat.size} entries, layout needs {off}")

    @property
    def size(self) -> int:
        return self.flat.size

    def view(self, name: str, flat: np.ndarray | None = None) -> np.ndarray:
        a, b = self.offsets[name]
        return (self.flat if flat is None else flat)[a:b].reshape(self.layout[name])

    def with_flat(self, flat: np.ndarray) -> "NetParams":
        return NetParams(self.obs_dim, self.n_actions, self.hidden, flat, self.init_scheme)

    def copy(self) -> "NetParams":
        return self.with_flat(self.flat.copy())

    def astype(self, dtype) -> "NetParams":
        return self.with_flat(self.flat.astype(dtype))

    def descriptor(self) -> dict:
        return {
            "layers": ["input", f"fc_relu({self.hidden})", f"gru({self.hidden})",
                       f"fc_relu({self.hidden})", f"linear({self.n_actions})"],
            "obs_dim": self.obs_dim, "n_actions": self.n_actions, "hidden": self.hidden,
            "init_scheme": self.init_scheme,
        }


def init_params(rng: np.random.Generator, obs_dim: int, n_actions: int, hidden: int = 64,
                scheme: str = "fan_in_uniform", dtype=np.float32) -> NetParams:
    """Uniform weights scaled by fan-in (or fan-in + fan-out); all biases zero.

    ``fan_in_uniform`` draws from U(-1/sqrt(fan_in), 1/sqrt(fan_in)), i.e. a
    variance of 1/(3 fan_in). ``glorot_uniform`` uses bound sqrt(6/(fan_in+fan_out)).
    """
    if scheme not in INIT_SCHEMES:
        raise ValueError(f"unknown init scheme {scheme!r}")
    params = NetParams(obs_dim, n_actions, hidden, None, scheme)
    flat = np.zeros(params.size, dtype=np.float64)
    for name, shape in params.layout.items():
        if name.endswith(".b") or ".b_" in name:
            continue
        bound = init_bound(scheme, shape)
        a, b = params.offsets[name]
        flat[a:b] = rng.uniform(-bound, bound, size=b - a)
    return params.with_flat(flat.astype(dtype))


def init_bound(scheme: str, shape: tuple) -> float:
    fan_in, fan_out = shape[0], shape[1]
    if scheme == "fan_in_uniform":
        return 1.0 / np.sqrt(fan_in)
    return np.sqrt(6.0 / (fan_in + fan_out))


def zero_hidden(batch: int, hidden: int = 64, dtype=np.float32) -> np.ndarray:
    return np.zeros((batch, hidden), dtype=dtype)


def _input_bias(params: NetParams) -> np.ndarray:
    """Input-side GRU bias with the recurrent gate biases folded in."""
    H = params.hidden
    bias = params.view("gru.b_x").copy()
    bias[:2 * H] += params.view("gru.b_h")[:2 * H]
    return bias


def gru_cell(params: NetParams, x1: np.ndarray, h: np.ndarray):
    """One GRU update from the fc1 activations ``x1``; returns (h_next, r, z, n, gh_n).

    The recurrent bias of the reset and update gates is folded into the input
    projection, exactly as in ``forward_sequence``.
    """
    H = params.hidden
    b_h = params.view("gru.b_h")
    gx = x1 @ params.view("gru.w_x")
    gx += _input_bias(params)
    gh = h @ params.view("gru.w_h")
    rz = _sigmoid_(gx[:, :2 * H] + gh[:, :2 * H])
    r, z = rz[:, :H], rz[:, H:]
    gh_n = gh[:, 2 * H:] + b_h[2 * H:]
    n = np.tanh(gx[:, 2 * H:] + r * gh_n)
    return n + z * (h - n), r, z, n, gh_n


def forward(params: NetParams, obs: np.ndarray, hidden: np.ndarray):
    """Single step: ``obs`` (B, D), ``hidden`` (B, H) -> (q (B, A), next hidden)."""
    obs = np.asarray(obs, dtype=params.flat.dtype)
    if obs.ndim == 1:
        q, h = forward(params, obs[None], hidden.reshape(1, -1))
        return q[0], h[0]
    if obs.shape[-1] != params.obs_dim:
        raise ValueError(f"observation width {obs.shape[-1]} != network input {params.obs_dim}")
    x1 = np.maximum(obs @ params.view("fc1.w") + params.view("fc1.b"), 0.0)
    h_next = gru_cell(params, x1, hidden)[0]
    x2 = np.maximum(h_next @ params.view("fc2.w") + params.view("fc2.b"), 0.0)
    return x2 @ params.view("out.w") + params.view("out.b"), h_next


@dataclass
class SeqCache:
    obs: np.ndarray
    x1: np.ndarray
    hs: np.ndarray      # (T+1, B, H) including the initial state
    rz: np.ndarray      # (T, B, 2H) reset and update gates
    n: np.ndarray
    gh_n: np.ndarray
    x2: np.ndarray


def forward_sequence(params: NetParams, obs: np.ndarray, h0: np.ndarray | None = None,
                     keep_cache: bool = True):
    """Unroll over ``obs`` of shape (T, B, D); returns (q (T, B, A), cache)."""
    obs = np.asarray(obs, dtype=params.flat.dtype)
    T, B, D = obs.shape
    if D != params.obs_dim:
        raise ValueError(f"observation width {D} != network input {params.obs_dim}")
    H = params.hidden
    dt = params.flat.dtype
    x1 = obs.reshape(T * B, D) @ params.view("fc1.w")
    x1 += params.view("fc1.b")
    np.maximum(x1, 0.0, out=x1)
    gx = x1 @ params.view("gru.w_x")
    gx += _input_bias(params)
    gx = gx.reshape(T, B, 3 * H)
    w_h, b_h = params.view("gru.w_h"), params.view("gru.b_h")
    b_hn = b_h[2 * H:]
    hs = np.empty((T + 1, B, H), dtype=dt)
    hs[0] = 0.0 if h0 is None else h0
    rz_all = np.empty((T, B, 2 * H), dtype=dt)
    n_all = np.empty((T, B, H), dtype=dt)
    ghn_all = np.empty((T, B, H), dtype=dt)
    gh = np.empty((B, 3 * H), dtype=dt)
    for t in range(T):
        h = hs[t]
        np.matmul(h, w_h, out=gh)
        rz = rz_all[t]
        np.add(gx[t, :, :2 * H], gh[:, :2 * H], out=rz)
        _sigmoid_(rz)
        gh_n = ghn_all[t]
        np.add(gh[:, 2 * H:], b_hn, out=gh_n)
        n = n_all[t]
        np.multiply(rz[:, :H], gh_n, out=n)
        n += gx[t, :, 2 * H:]
        np.tanh(n, out=n)
        nxt = hs[t + 1]
        np.subtract(h, n, out=nxt)
        nxt *= rz[:, H:]
        nxt += n
    hflat = hs[1:].reshape(T * B, H)
    x2 = hflat @ params.view("fc2.w")
    x2 += params.view("fc2.b")
    np.maximum(x2, 0.0, out=x2)
    q = x2 @ params.view("out.w")
    q += params.view("out.b")
    q = q.reshape(T, B, -1)
    if not keep_cache:
        return q, None
    return q, SeqCache(obs, x1, hs, rz_all, n_all, ghn_all, x2)


def backward(params: NetParams, cache: SeqCache, dq: np.ndarray) -> np.ndarray:
    """Gradient (flat, same layout as ``params``) of sum(dq * q) through the unrolled net."""
    T, B, A = dq.shape
    H = params.hidden
    D = params.obs_dim
    dt = params.flat.dtype
    grad = np.zeros(params.size, dtype=dt)
    g = lambda name: params.view(name, grad)
    dq2 = dq.reshape(T * B, A).astype(dt, copy=False)
    g("out.w")[...] = cache.x2.T @ dq2
    g("out.b")[...] = dq2.sum(0)
    da2 = (dq2 @ params.view("out.w").T) * (cache.x2 > 0)
    hflat = cache.hs[1:].reshape(T * B, H)
    g("fc2.w")[...] = hflat.T @ da2
    g("fc2.b")[...] = da2.sum(0)
    dh_out = (da2 @ params.view("fc2.w").T).reshape(T, B, H)
    # local derivatives of every step, computed in bulk
    r, z, n = cache.rz[:, :, :H], cache.rz[:, :, H:], cache.n
    d_n = (1.0 - z) * (1.0 - n * n)                       # dh'/dn_pre
    d_z = (cache.hs[:-1] - n) * z * (1.0 - z)             # dh'/dz_pre
    d_r = cache.gh_n * r * (1.0 - r)                      # dn_pre/dr_pre
    w_h_T = params.view("gru.w_h").T
    dgx = np.empty((T, B, 3 * H), dtype=dt)
    dgh = np.empty((T, B, 3 * H), dtype=dt)
    dh = np.zeros((B, H), dtype=dt)
    for t in range(T - 1, -1, -1):
        dh += dh_out[t]
        gx_t, gh_t = dgx[t], dgh[t]
        dn_pre = gx_t[:, 2 * H:]
        np.multiply(dh, d_n[t], out=dn_pre)
        np.multiply(dh, d_z[t], out=gx_t[:, H:2 * H])
        np.multiply(dn_pre, d_r[t], out=gx_t[:, :H])
        gh_t[:, :2 * H] = gx_t[:, :2 * H]
        np.multiply(dn_pre, r[t], out=gh_t[:, 2 * H:])
        dh *= z[t]
        dh += gh_t @ w_h_T
    dgx2 = dgx.reshape(T * B, 3 * H)
    dgh2 = dgh.reshape(T * B, 3 * H)
    g("gru.w_x")[...] = cache.x1.T @ dgx2
    g("gru.b_x")[...] = dgx2.sum(0)
    g("gru.w_h")[...] = cache.hs[:-1].reshape(T * B, H).T @ dgh2
    g("gru.b_h")[...] = dgh2.sum(0)
    da1 = (dgx2 @ params.view("gru.w_x").T) * (cache.x1 > 0)
    g("fc1.w")[...] = cache.obs.reshape(T * B, D).T @ da1
    g("fc1.b")[...] = da1.sum(0)
    return grad


def squared_error_grad(params: NetParams, obs: np.ndarray, actions: np.ndarray,
                       targets: np.ndarray, mask: np.ndarray | None = None):
    """Loss sum((y - Q(obs, a))^2) over unmasked steps and its exact gradient.

    ``obs`` (T, B, D), ``actions`` and ``targets`` (T, B). Returns (loss, grad).
    """
    q, cache = forward_sequence(params, obs)
    T, B = actions.shape
    chosen = np.take_along_axis(q, actions[..., None], axis=2)[..., 0]
    m = np.ones((T, B)) if mask is None else mask
    err = (targets - chosen.astype(np.float64)) * m
    dq = np.zeros_like(q)
    np.put_along_axis(dq, actions[..., None], (-2.0 * err)[..., None].astype(q.dtype), axis=2)
    return float(np.sum(err * err)), backward(params, cache, dq)


@dataclass
class OptimizerState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: NetParams, lr: float = 5e-4, **kw) -> "OptimizerState":
        z = np.zeros_like(params.flat)
        return cls(z, z.copy(), 0, lr, **kw)


def optimizer_step(params: NetParams, grads: np.ndarray, state: OptimizerState
                   ) -> tuple[NetParams, OptimizerState]:
    """Bias-corrected Adam update; inputs are left untouched."""
    if grads.shape != params.flat.shape:
        raise ValueError("gradient and parameter shapes differ")
    t = state.step + 1
    m = state.beta1 * state.m + (1 - state.beta1) * grads
    v = state.beta2 * state.v + (1 - state.beta2) * grads * grads
    m_hat = m / (1 - state.beta1 ** t)
    v_hat = v / (1 - state.beta2 ** t)
    update = state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    new = params.with_flat((params.flat - update).astype(params.flat.dtype))
    return new, OptimizerState(m, v, t, state.lr, state.beta1, state.beta2, state.eps)


def clip_by_norm(grads: np.ndarray, max_norm: float | None) -> tuple[np.ndarray, float]:
    norm = float(np.sqrt(np.dot(grads.astype(np.float64), grads.astype(np.float64))))
    if max_norm is not None and norm > max_norm:
        grads = grads * (max_norm / norm)
    return grads, norm


def save_checkpoint(path, params: NetParams, metadata: dict | None = None) -> None:
    """Write ``manifest.json`` plus one little-endian float32 file per named slice."""
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    slices = {}
    for name, shape in params.layout.items():
        fname = f"{name}.f32"
        params.view(name).astype("<f4").tofile(out / fname)
        slices[name] = {"shape": list(shape), "file": fname}
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "architecture": params.descriptor(),
        "slices": slices,
        "metadata": metadata or {},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


class CheckpointError(Exception):
    pass


def load_checkpoint(path, expect_obs_dim: int | None = None, expect_actions: int | None = None
                    ) -> tuple[NetParams, dict]:
    src = Path(path)
    try:
        manifest = json.loads((src / "manifest.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint manifest in {src}: {exc}") from exc
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"unsupported checkpoint format {manifest.get('format')!r}")
    arch = manifest["architecture"]
    if expect_obs_dim is not None and arch["obs_dim"] != expect_obs_dim:
        raise CheckpointError(
            f"checkpoint expects {arch['obs_dim']} inputs, scenario produces {expect_obs_dim}")
    if expect_actions is not None and arch["n_actions"] != expect_actions:
        raise CheckpointError(
            f"checkpoint has {arch['n_actions']} actions, scenario has {expect_actions}")
    params = NetParams(arch["obs_dim"], arch["n_actions"], arch["hidden"],
                       init_scheme=arch.get("init_scheme", "fan_in_uniform"))
    for name, shape in params.layout.items():
        entry = manifest["slices"].get(name)
        if entry is None or tuple(entry["shape"]) != tuple(shape):
            raise CheckpointError(f"slice {name} missing or mis-shaped")
        data = np.fromfile(src / entry["file"], dtype="<f4")
        if data.size != int(np.prod(shape)):
            raise CheckpointError(f"slice {name} has {data.size} values")
        params.view(name)[...] = data.reshape(shape)
    return params, manifest.get("metadata", {})
